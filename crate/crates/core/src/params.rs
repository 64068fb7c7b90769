//! Named trainable parameters, kept outside any single tape so they persist
//! across optimizer steps. Each forward pass binds them into a fresh graph
//! as leaves and scatters gradients back after `backward`.

use crate::error::{CatsError, Result};
use crate::tensor::{Graph, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Index of a parameter inside a [`ParamSet`]. Stable for the set's lifetime.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param {
    /// "group/name" — the group prefix feeds the parameter-count breakdown.
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    UniformFanIn(usize),
    /// Zero-mean Gaussian with the given standard deviation.
    Gaussian(f64),
}

#[derive(Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn alloc(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut impl Rng,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::UniformFanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
            Init::Gaussian(std) => {
                let normal = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| normal.sample(rng)).collect()
            }
        };
        self.params.push(Param {
            name: name.into(),
            shape: shape.to_vec(),
            data,
            grad: vec![0.0; n],
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn total_len(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }

    /// Element counts grouped by the "group/" prefix of parameter names.
    pub fn counts_by_group(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for p in &self.params {
            let group = p.name.split('/').next().unwrap_or("").to_string();
            match out.iter_mut().find(|(g, _)| *g == group) {
                Some((_, n)) => *n += p.numel(),
                None => out.push((group, p.numel())),
            }
        }
        out
    }

    /// Bind every parameter into `g` as a gradient-tracking leaf, in
    /// allocation order. Index the result with `ParamId.0`.
    pub fn bind(&self, g: &mut Graph) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|p| g.leaf(&p.data, &p.shape, true))
            .collect()
    }

    /// Add the graph's leaf gradients into each parameter's `grad` slot.
    /// Aborts with the parameter name on non-finite gradients.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &[Tensor]) -> Result<()> {
        for (p, &t) in self.params.iter_mut().zip(bound) {
            if let Some(gr) = g.grad(t) {
                for (acc, &v) in p.grad.iter_mut().zip(gr) {
                    if !v.is_finite() {
                        return Err(CatsError::Numeric(format!(
                            "non-finite gradient in parameter {}",
                            p.name
                        )));
                    }
                    *acc += v;
                }
            }
        }
        Ok(())
    }
}
