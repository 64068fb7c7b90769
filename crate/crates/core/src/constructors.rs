//! The auxiliary-series constructor bank: six constructor families mapping
//! the input window [B, L, C] to auxiliary channels [B, L, N], each followed
//! by GELU. Default banks follow the small/large channel regimes.

use crate::error::{CatsError, Result};
use crate::params::{Init, ParamId, ParamSet};
use crate::tensor::{Graph, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstructorKind {
    /// Cross-channel 1D convolution over time, same-length padding.
    Conv,
    /// Non-overlapping (patch) convolution: kernel = stride, phase-distinct
    /// kernels keep the output length.
    NoConv,
    /// Per-channel (grouped) convolution; output channels = multiplier * C.
    IConv,
    /// Pointwise channel mixing (kernel-1 convolution).
    Lin,
    /// Pass the input channels through unchanged.
    Id,
    /// Trainable time-indexed matrix, independent of the input values.
    Emb,
}

/// Declarative description of one constructor in the bank.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConstructorSpec {
    pub kind: ConstructorKind,
    /// Kernel size (Conv/NoConv/IConv).
    #[serde(default)]
    pub kernel: usize,
    /// Output channels n_m (ignored for IConv and Id, which derive it).
    #[serde(default)]
    pub out: usize,
    /// IConv channel multiplier v.
    #[serde(default = "one")]
    pub multiplier: usize,
    /// Apply GELU after this constructor (on by default).
    #[serde(default = "yes")]
    pub activation: bool,
}

fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}

impl ConstructorSpec {
    pub fn conv(kernel: usize, out: usize) -> Self {
        ConstructorSpec {
            kind: ConstructorKind::Conv,
            kernel,
            out,
            multiplier: 1,
            activation: true,
        }
    }

    pub fn noconv(kernel: usize, out: usize) -> Self {
        ConstructorSpec {
            kind: ConstructorKind::NoConv,
            kernel,
            out,
            multiplier: 1,
            activation: true,
        }
    }

    pub fn iconv(kernel: usize, multiplier: usize) -> Self {
        ConstructorSpec {
            kind: ConstructorKind::IConv,
            kernel,
            out: 0,
            multiplier,
            activation: true,
        }
    }

    pub fn lin(out: usize) -> Self {
        ConstructorSpec {
            kind: ConstructorKind::Lin,
            kernel: 0,
            out,
            multiplier: 1,
            activation: true,
        }
    }

    pub fn id() -> Self {
        ConstructorSpec {
            kind: ConstructorKind::Id,
            kernel: 0,
            out: 0,
            multiplier: 1,
            activation: true,
        }
    }

    pub fn emb(out: usize) -> Self {
        ConstructorSpec {
            kind: ConstructorKind::Emb,
            kernel: 0,
            out,
            multiplier: 1,
            activation: true,
        }
    }

    /// Output channels for input channel count `c`.
    pub fn out_channels(&self, c: usize) -> usize {
        match self.kind {
            ConstructorKind::IConv => self.multiplier * c,
            ConstructorKind::Id => c,
            _ => self.out,
        }
    }
}

/// Table-style default bank for the given channel count: the small regime
/// below 16 channels, the large regime at or above it.
pub fn default_bank(channels: usize) -> Vec<ConstructorSpec> {
    if channels < 16 {
        vec![
            ConstructorSpec::conv(49, 8),
            ConstructorSpec::conv(193, 8),
            ConstructorSpec::noconv(12, 8),
            ConstructorSpec::noconv(24, 8),
            ConstructorSpec::iconv(49, 1),
            ConstructorSpec::lin(8),
            ConstructorSpec::id(),
            ConstructorSpec::emb(4),
        ]
    } else {
        let v = usize::max(1, 32usize.div_ceil(channels));
        vec![
            ConstructorSpec::conv(49, 32),
            ConstructorSpec::conv(193, 32),
            ConstructorSpec::noconv(12, 32),
            ConstructorSpec::noconv(24, 32),
            ConstructorSpec::iconv(49, v),
            ConstructorSpec::lin(32),
            ConstructorSpec::id(),
            ConstructorSpec::emb(16),
        ]
    }
}

/// Named bank presets used by the run config and the ablation flags.
pub fn bank_preset(name: &str, channels: usize) -> Result<Vec<ConstructorSpec>> {
    let small = channels < 16;
    let n = if small { 8 } else { 32 };
    match name {
        "default" => Ok(default_bank(channels)),
        "default-small" => Ok(default_bank(usize::min(channels, 15))),
        "default-large" => Ok(default_bank(usize::max(channels, 16))),
        // Every slot becomes a pointwise projection with the same widths.
        "pure-linear" => Ok(vec![
            ConstructorSpec::lin(n),
            ConstructorSpec::lin(n),
            ConstructorSpec::lin(n),
            ConstructorSpec::lin(n),
            ConstructorSpec::lin(default_bank(channels)[4].out_channels(channels)),
            ConstructorSpec::lin(n),
            ConstructorSpec::lin(channels),
            ConstructorSpec::lin(default_bank(channels)[7].out),
        ]),
        // Every slot becomes a cross-channel convolution, keeping widths; the
        // two original convolution kernels are preserved.
        "pure-conv" => Ok(vec![
            ConstructorSpec::conv(49, n),
            ConstructorSpec::conv(193, n),
            ConstructorSpec::conv(13, n),
            ConstructorSpec::conv(25, n),
            ConstructorSpec::conv(49, default_bank(channels)[4].out_channels(channels)),
            ConstructorSpec::conv(49, n),
            ConstructorSpec::conv(49, channels),
            ConstructorSpec::conv(49, default_bank(channels)[7].out),
        ]),
        "identity-only" => Ok(vec![ConstructorSpec::id()]),
        "empty" => Ok(vec![]),
        other => Err(CatsError::Config(format!("unknown bank preset {other:?}"))),
    }
}

enum ConstructorParams {
    Conv { w: ParamId, b: ParamId },
    NoConv { phases: Vec<(ParamId, ParamId)> },
    IConv { w: ParamId, b: ParamId },
    Lin { w: ParamId, b: ParamId },
    Id,
    Emb { w: ParamId },
}

/// The constructor bank with its owned parameters.
pub struct ConstructorBank {
    specs: Vec<ConstructorSpec>,
    params: Vec<ConstructorParams>,
    channels: usize,
    input_len: usize,
    total_out: usize,
}

impl ConstructorBank {
    pub fn build(
        specs: Vec<ConstructorSpec>,
        channels: usize,
        input_len: usize,
        ps: &mut ParamSet,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(CatsError::Config("bank needs at least one input channel".into()));
        }
        let mut params = Vec::with_capacity(specs.len());
        let mut total_out = 0usize;
        for (m, spec) in specs.iter().enumerate() {
            let n_m = spec.out_channels(channels);
            match spec.kind {
                ConstructorKind::Conv => {
                    if spec.kernel % 2 == 0 || spec.kernel == 0 {
                        return Err(CatsError::Config(format!(
                            "constructor {m}: conv kernel must be odd, got {}",
                            spec.kernel
                        )));
                    }
                    if n_m == 0 {
                        return Err(CatsError::Config(format!("constructor {m}: n_m must be >= 1")));
                    }
                    let fan_in = channels * spec.kernel;
                    let w = ps.alloc(
                        format!("conv/f{m}.weight"),
                        &[n_m, channels, spec.kernel],
                        Init::UniformFanIn(fan_in),
                        rng,
                    );
                    let b = ps.alloc(format!("conv/f{m}.bias"), &[n_m], Init::Zeros, rng);
                    params.push(ConstructorParams::Conv { w, b });
                }
                ConstructorKind::NoConv => {
                    if spec.kernel == 0 {
                        return Err(CatsError::Config(format!(
                            "constructor {m}: patch kernel must be >= 1"
                        )));
                    }
                    if n_m == 0 {
                        return Err(CatsError::Config(format!("constructor {m}: n_m must be >= 1")));
                    }
                    let fan_in = channels * spec.kernel;
                    let phases = (0..spec.kernel)
                        .map(|phase| {
                            let w = ps.alloc(
                                format!("noconv/f{m}.phase{phase}.weight"),
                                &[n_m, channels, spec.kernel],
                                Init::UniformFanIn(fan_in),
                                rng,
                            );
                            let b = ps.alloc(
                                format!("noconv/f{m}.phase{phase}.bias"),
                                &[n_m],
                                Init::Zeros,
                                rng,
                            );
                            (w, b)
                        })
                        .collect();
                    params.push(ConstructorParams::NoConv { phases });
                }
                ConstructorKind::IConv => {
                    if spec.kernel % 2 == 0 || spec.kernel == 0 {
                        return Err(CatsError::Config(format!(
                            "constructor {m}: per-channel kernel must be odd, got {}",
                            spec.kernel
                        )));
                    }
                    if spec.multiplier == 0 {
                        return Err(CatsError::Config(format!(
                            "constructor {m}: multiplier must be >= 1"
                        )));
                    }
                    let w = ps.alloc(
                        format!("iconv/f{m}.weight"),
                        &[n_m, 1, spec.kernel],
                        Init::UniformFanIn(spec.kernel),
                        rng,
                    );
                    let b = ps.alloc(format!("iconv/f{m}.bias"), &[n_m], Init::Zeros, rng);
                    params.push(ConstructorParams::IConv { w, b });
                }
                ConstructorKind::Lin => {
                    if n_m == 0 {
                        return Err(CatsError::Config(format!("constructor {m}: n_m must be >= 1")));
                    }
                    let w = ps.alloc(
                        format!("lin/f{m}.weight"),
                        &[channels, n_m],
                        Init::UniformFanIn(channels),
                        rng,
                    );
                    let b = ps.alloc(format!("lin/f{m}.bias"), &[n_m], Init::Zeros, rng);
                    params.push(ConstructorParams::Lin { w, b });
                }
                ConstructorKind::Id => params.push(ConstructorParams::Id),
                ConstructorKind::Emb => {
                    if n_m == 0 {
                        return Err(CatsError::Config(format!("constructor {m}: n_m must be >= 1")));
                    }
                    let w = ps.alloc(
                        format!("emb/f{m}.weight"),
                        &[n_m, input_len],
                        Init::Gaussian(0.02),
                        rng,
                    );
                    params.push(ConstructorParams::Emb { w });
                }
            }
            total_out += n_m;
        }
        Ok(ConstructorBank {
            specs,
            params,
            channels,
            input_len,
            total_out,
        })
    }

    /// N, the total auxiliary channel count.
    pub fn total_out(&self) -> usize {
        self.total_out
    }

    pub fn specs(&self) -> &[ConstructorSpec] {
        &self.specs
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    /// Column range of constructor `m` in the concatenated output.
    pub fn column_range(&self, m: usize) -> std::ops::Range<usize> {
        let mut start = 0;
        for spec in &self.specs[..m] {
            start += spec.out_channels(self.channels);
        }
        start..start + self.specs[m].out_channels(self.channels)
    }

    /// Map the input window to the concatenated auxiliary channels:
    /// [B, L, C] -> [B, L, N], constructors in spec order.
    pub fn forward(&self, g: &mut Graph, bound: &[Tensor], x: Tensor) -> Result<Tensor> {
        let xs = g.shape(x).to_vec();
        if xs.len() != 3 || xs[2] != self.channels || xs[1] != self.input_len {
            return Err(CatsError::shape(
                "construct_ats",
                format!(
                    "input {xs:?} vs bank (L={}, C={})",
                    self.input_len, self.channels
                ),
            ));
        }
        let (batch, len) = (xs[0], xs[1]);
        if self.specs.is_empty() {
            return Ok(g.leaf(&[], &[batch, len, 0], false));
        }
        // Channels-first view for the convolutional families, computed once.
        let needs_t = self.specs.iter().any(|s| {
            matches!(
                s.kind,
                ConstructorKind::Conv | ConstructorKind::NoConv | ConstructorKind::IConv
            )
        });
        let x_cf = if needs_t { Some(g.transpose12(x)?) } else { None };

        let mut parts = Vec::with_capacity(self.specs.len());
        for (spec, par) in self.specs.iter().zip(&self.params) {
            let raw = match par {
                ConstructorParams::Conv { w, b } => {
                    let y = g.conv1d(
                        x_cf.unwrap(),
                        bound[w.0],
                        bound[b.0],
                        (spec.kernel - 1) / 2,
                        1,
                        1,
                    )?;
                    g.transpose12(y)?
                }
                ConstructorParams::NoConv { phases } => {
                    let k = spec.kernel;
                    let extra = (k - (len % k)) % k;
                    let padded = if extra > 0 {
                        g.pad_last(x_cf.unwrap(), extra / 2, extra - extra / 2)
                    } else {
                        x_cf.unwrap()
                    };
                    let outs: Vec<Tensor> = phases
                        .iter()
                        .map(|(w, b)| g.conv1d(padded, bound[w.0], bound[b.0], 0, k, 1))
                        .collect::<Result<_>>()?;
                    let inter = g.phase_interleave(&outs, len)?;
                    g.transpose12(inter)?
                }
                ConstructorParams::IConv { w, b } => {
                    let y = g.conv1d(
                        x_cf.unwrap(),
                        bound[w.0],
                        bound[b.0],
                        (spec.kernel - 1) / 2,
                        1,
                        self.channels,
                    )?;
                    g.transpose12(y)?
                }
                ConstructorParams::Lin { w, b } => g.affine(x, bound[w.0], bound[b.0])?,
                ConstructorParams::Id => x,
                ConstructorParams::Emb { w } => {
                    let rep = g.expand_batch(bound[w.0], batch);
                    g.transpose12(rep)?
                }
            };
            parts.push(if spec.activation { g.gelu(raw) } else { raw });
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            g.concat_channels(&parts)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(
        specs: Vec<ConstructorSpec>,
        c: usize,
        l: usize,
    ) -> (ConstructorBank, ParamSet) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bank = ConstructorBank::build(specs, c, l, &mut ps, &mut rng).unwrap();
        (bank, ps)
    }

    fn forward(bank: &ConstructorBank, ps: &ParamSet, x: &[f64], b: usize, l: usize, c: usize) -> (Graph, Tensor) {
        let mut g = Graph::new();
        let bound = ps.bind(&mut g);
        let xt = g.leaf(x, &[b, l, c], false);
        let a = bank.forward(&mut g, &bound, xt).unwrap();
        (g, a)
    }

    #[test]
    fn default_bank_widths() {
        // Small regime at C=7: N = 8+8+8+8+7+8+7+4 = 58.
        let (bank, _) = build(default_bank(7), 7, 32);
        assert_eq!(bank.total_out(), 58);

        // C=321: IConv multiplier 1, n5 = 321.
        let specs = default_bank(321);
        assert_eq!(specs[4].multiplier, 1);
        assert_eq!(specs[4].out_channels(321), 321);

        // boundary: C=16 takes the large regime (v = 2 -> n5 = 32).
        let specs = default_bank(16);
        assert_eq!(specs[0].out, 32);
        assert_eq!(specs[4].out_channels(16), 32);
        assert_eq!(specs[7].out, 16);
    }

    #[test]
    fn conv_pair_parameter_audit() {
        // Conv(49,8) + Conv(193,8) at C=7: 8*7*49+8 + 8*7*193+8 = 13568.
        let (_, ps) = build(
            vec![ConstructorSpec::conv(49, 8), ConstructorSpec::conv(193, 8)],
            7,
            720,
        );
        let total: usize = ps
            .counts_by_group()
            .iter()
            .filter(|(g, _)| g == "conv")
            .map(|(_, n)| n)
            .sum();
        assert_eq!(total, 13568);

        // IConv at C=7, v=1, K=49: 7*49 + 7 = 350 parameters.
        let (_, ps) = build(vec![ConstructorSpec::iconv(49, 1)], 7, 720);
        assert_eq!(ps.total_len(), 350);

        // Emb(4, 720): 2880 parameters.
        let (_, ps) = build(vec![ConstructorSpec::emb(4)], 7, 720);
        assert_eq!(ps.total_len(), 2880);
    }

    #[test]
    fn outputs_keep_input_length() {
        let (b, l, c) = (2usize, 27usize, 3usize);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..b * l * c)
            .map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0))
            .collect();
        for spec in [
            ConstructorSpec::conv(5, 4),
            ConstructorSpec::conv(49, 2), // kernel wider than the window
            ConstructorSpec::noconv(4, 3),
            ConstructorSpec::noconv(9, 2),
            ConstructorSpec::iconv(3, 2),
            ConstructorSpec::lin(5),
            ConstructorSpec::id(),
            ConstructorSpec::emb(3),
        ] {
            let n_m = spec.out_channels(c);
            let (bank, ps) = build(vec![spec], c, l);
            let (g, a) = forward(&bank, &ps, &x, b, l, c);
            assert_eq!(g.shape(a), &[b, l, n_m]);
        }
    }

    #[test]
    fn noconv_padding_arithmetic() {
        // L=720, K=12: no extra padding, 60 patches, 12 phase kernels.
        assert_eq!((12 - (720 % 12)) % 12, 0);
        // L=10, K=4: E=2, split 1/1.
        let (l, k) = (10usize, 4usize);
        let e = (k - (l % k)) % k;
        assert_eq!(e, 2);
        assert_eq!((e / 2, e - e / 2), (1, 1));

        // Constant input with equal phase kernels: constant within each patch.
        let (bank, mut ps) = build(vec![ConstructorSpec::noconv(4, 1)], 1, 10);
        // Make all phases share the same kernel values.
        let first: (Vec<f64>, Vec<f64>) = (ps.get(crate::params::ParamId(0)).data.clone(),
                                            ps.get(crate::params::ParamId(1)).data.clone());
        for phase in 0..4 {
            ps.get_mut(crate::params::ParamId(2 * phase)).data = first.0.clone();
            ps.get_mut(crate::params::ParamId(2 * phase + 1)).data = first.1.clone();
        }
        let x = vec![1.0; 10];
        let (g, a) = forward(&bank, &ps, &x, 1, 10, 1);
        let out = g.data(a);
        // Patches under E=2 front-pad 1: boundaries shift by one inside the
        // padded timeline; equal kernels on constant input still give runs.
        // Interior patches see identical windows, so phases agree exactly.
        assert_eq!(g.shape(a), &[1, 10, 1]);
        for t in [4usize, 5, 6] {
            assert!((out[t] - out[4]).abs() < 1e-12, "patch run broke at {t}");
        }
    }

    #[test]
    fn iconv_channel_isolation() {
        let (b, l, c) = (1usize, 16usize, 3usize);
        let (bank, ps) = build(vec![ConstructorSpec::iconv(3, 2)], c, l);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<f64> = (0..b * l * c)
            .map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0))
            .collect();
        let (g, a) = forward(&bank, &ps, &x, b, l, c);
        let base = g.data(a).to_vec();

        // Perturb channel 1 only: outputs for channels {2,3} and {4,5}
        // (groups of channels 1 and 2) must not change.
        let mut x2 = x.clone();
        for t in 0..l {
            x2[t * c] += 0.5;
        }
        let (g2, a2) = forward(&bank, &ps, &x2, b, l, c);
        let pert = g2.data(a2);
        let n = 6;
        for t in 0..l {
            for ch in 2..n {
                assert_eq!(base[t * n + ch], pert[t * n + ch]);
            }
            assert_ne!(base[t * n], pert[t * n]);
        }
    }

    #[test]
    fn emb_is_input_invariant_and_trainable() {
        let (b, l, c) = (2usize, 12usize, 2usize);
        let (bank, ps) = build(vec![ConstructorSpec::emb(3)], c, l);
        let x0 = vec![0.25; b * l * c];
        let x1 = vec![-1.5; b * l * c];
        let (g0, a0) = forward(&bank, &ps, &x0, b, l, c);
        let (g1, a1) = forward(&bank, &ps, &x1, b, l, c);
        assert_eq!(g0.data(a0), g1.data(a1));

        // gradient reaches the embedding matrix
        let mut g = Graph::new();
        let bound = ps.bind(&mut g);
        let xt = g.leaf(&x0, &[b, l, c], false);
        let a = bank.forward(&mut g, &bound, xt).unwrap();
        let loss = g.sum_all(a);
        g.backward(loss).unwrap();
        let emb_grad = g.grad(bound[0]).unwrap();
        assert!(emb_grad.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn lin_equals_pointwise_conv() {
        let (b, l, c, n) = (2usize, 9usize, 3usize, 4usize);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..b * l * c)
            .map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0))
            .collect();
        let wv: Vec<f64> = (0..c * n)
            .map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0))
            .collect();
        let bv: Vec<f64> = (0..n)
            .map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0))
            .collect();

        let mut g = Graph::new();
        let xt = g.leaf(&x, &[b, l, c], false);
        let w = g.leaf(&wv, &[c, n], false);
        let bias = g.leaf(&bv, &[n], false);
        let lin = g.affine(xt, w, bias).unwrap();
        let lin = g.gelu(lin);

        // Same weights as a kernel-1 convolution: w_conv[o][i][0] = w[i][o].
        let mut wconv = vec![0.0; n * c];
        for i in 0..c {
            for o in 0..n {
                wconv[o * c + i] = wv[i * n + o];
            }
        }
        let xcf = g.transpose12(xt).unwrap();
        let wc = g.leaf(&wconv, &[n, c, 1], false);
        let conv = g.conv1d(xcf, wc, bias, 0, 1, 1).unwrap();
        let conv = g.transpose12(conv).unwrap();
        let conv = g.gelu(conv);
        for (a, b) in g.data(lin).iter().zip(g.data(conv)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bank_layout_and_empty_bank() {
        let (b, l, c) = (1usize, 8usize, 2usize);
        let (bank, ps) = build(
            vec![ConstructorSpec::id(), ConstructorSpec::emb(3)],
            c,
            l,
        );
        assert_eq!(bank.total_out(), 5);
        assert_eq!(bank.column_range(0), 0..2);
        assert_eq!(bank.column_range(1), 2..5);

        let x = vec![2.0; b * l * c];
        let (g, a) = forward(&bank, &ps, &x, b, l, c);
        // Identity slot holds GELU(x) in columns 0..2.
        let expect = crate::tensor::kernels::gelu(2.0);
        for t in 0..l {
            assert!((g.data(a)[t * 5] - expect).abs() < 1e-15);
            assert!((g.data(a)[t * 5 + 1] - expect).abs() < 1e-15);
        }

        let (bank, ps) = build(vec![], c, l);
        assert_eq!(bank.total_out(), 0);
        let (g, a) = forward(&bank, &ps, &x, b, l, c);
        assert_eq!(g.shape(a), &[b, l, 0]);
    }

    #[test]
    fn id_with_activation_attenuates_negatives() {
        let (bank, ps) = build(vec![ConstructorSpec::id()], 1, 4);
        let x = vec![-0.5, -1.0, 8.0, 9.0];
        let (g, a) = forward(&bank, &ps, &x, 1, 4, 1);
        let out = g.data(a);
        assert!(out[0] > -0.5 && out[0] < 0.0); // attenuated copy
        assert!((out[2] - 8.0).abs() < 1e-9); // large positive ~ exact copy
    }
}
