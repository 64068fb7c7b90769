//! Sparsity modules: soft channel gating of the auxiliary series and the
//! adaptive temporal cutoff trained with a straight-through estimator.

use crate::error::Result;
use crate::params::{Init, ParamId, ParamSet};
use crate::tensor::{Graph, Tensor};
use rand::Rng;

/// Squeeze-style channel attention: aggregate each input channel over time,
/// expand through a small MLP, and squash to per-auxiliary-channel scores in
/// (0, 1).
pub struct ChannelGate {
    agg: Aggregation,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

enum Aggregation {
    /// One weight vector shared by all input channels (the written formula).
    Shared { w: ParamId, b: ParamId },
    /// Independent weights per input channel (config option).
    PerChannel { w: ParamId, b: ParamId },
}

impl ChannelGate {
    /// `hidden` is U, conventionally q * C.
    pub fn build(
        channels: usize,
        ats_channels: usize,
        input_len: usize,
        hidden: usize,
        per_channel_aggregation: bool,
        ps: &mut ParamSet,
        rng: &mut impl Rng,
    ) -> Self {
        let agg = if per_channel_aggregation {
            Aggregation::PerChannel {
                w: ps.alloc(
                    "channel_sparsity/agg.weight",
                    &[input_len, channels],
                    Init::UniformFanIn(input_len),
                    rng,
                ),
                b: ps.alloc("channel_sparsity/agg.bias", &[channels], Init::Zeros, rng),
            }
        } else {
            Aggregation::Shared {
                w: ps.alloc(
                    "channel_sparsity/agg.weight",
                    &[input_len],
                    Init::UniformFanIn(input_len),
                    rng,
                ),
                b: ps.alloc("channel_sparsity/agg.bias", &[1], Init::Zeros, rng),
            }
        };
        ChannelGate {
            agg,
            w1: ps.alloc(
                "channel_sparsity/mlp1.weight",
                &[channels, hidden],
                Init::UniformFanIn(channels),
                rng,
            ),
            b1: ps.alloc("channel_sparsity/mlp1.bias", &[hidden], Init::Zeros, rng),
            w2: ps.alloc(
                "channel_sparsity/mlp2.weight",
                &[hidden, ats_channels],
                Init::UniformFanIn(hidden),
                rng,
            ),
            b2: ps.alloc(
                "channel_sparsity/mlp2.bias",
                &[ats_channels],
                Init::Zeros,
                rng,
            ),
        }
    }

    /// Attention scores from the input window: [B, L, C] -> [B, N], each
    /// strictly inside (0, 1).
    pub fn scores(&self, g: &mut Graph, bound: &[Tensor], x: Tensor) -> Result<Tensor> {
        let pooled = match &self.agg {
            Aggregation::Shared { w, b } => {
                let d = g.time_dot_shared(x, bound[w.0])?;
                g.add(d, bound[b.0])?
            }
            Aggregation::PerChannel { w, b } => g.channel_time_affine(x, bound[w.0], bound[b.0])?,
        };
        let h = g.affine(pooled, bound[self.w1.0], bound[self.b1.0])?;
        let h = g.gelu(h);
        let z = g.affine(h, bound[self.w2.0], bound[self.b2.0])?;
        Ok(g.sigmoid(z))
    }

    /// Scale each auxiliary channel by its score: [B, L, N] * [B, N].
    pub fn apply(g: &mut Graph, ats: Tensor, gamma: Tensor) -> Result<Tensor> {
        let gs = g.shape(gamma).to_vec();
        let g3 = g.reshape(gamma, &[gs[0], 1, gs[1]])?;
        g.mul(ats, g3)
    }
}

/// Learned per-channel prefix cutoff. For channel i with aggregated slope
/// a_i, the ramp h_i(t) = a_i * (t - L) + 1 gates timestep t by 1{h_i(t) > 0};
/// the straight-through estimator h - sg(h - 1{h>0}) carries gradients
/// through the indicator.
pub struct TemporalCutoff {
    w: ParamId,
    b: ParamId,
    input_len: usize,
}

impl TemporalCutoff {
    /// Slopes start at zero: no cutoff until training moves them.
    pub fn build(
        input_len: usize,
        channels: usize,
        ps: &mut ParamSet,
        rng: &mut impl Rng,
    ) -> Self {
        TemporalCutoff {
            w: ps.alloc(
                "temporal_sparsity/slope.weight",
                &[input_len, channels],
                Init::Zeros,
                rng,
            ),
            b: ps.alloc("temporal_sparsity/slope.bias", &[channels], Init::Zeros, rng),
            input_len,
        }
    }

    /// Apply the cutoff to [B, L, P]. Returns (masked series, mask).
    pub fn apply(&self, g: &mut Graph, bound: &[Tensor], q: Tensor) -> Result<(Tensor, Tensor)> {
        let qs = g.shape(q).to_vec();
        let (batch, len, p) = (qs[0], qs[1], qs[2]);
        debug_assert_eq!(len, self.input_len);
        let slope = g.channel_time_affine(q, bound[self.w.0], bound[self.b.0])?;
        let slope3 = g.reshape(slope, &[batch, 1, p])?;
        // t is 1-based in the ramp: t - L for t = 1..=L.
        let ramp_data: Vec<f64> = (1..=len).map(|t| t as f64 - len as f64).collect();
        let ramp = g.constant(&ramp_data, &[1, len, 1]);
        let prod = g.mul(slope3, ramp)?;
        let h = g.offset(prod, 1.0);
        let mask = g.indicator_pos(h);
        let diff = g.sub(h, mask)?;
        let sg = g.stop_gradient(diff);
        let factor = g.sub(h, sg)?;
        let out = g.mul(q, factor)?;
        Ok((out, mask))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    #[test]
    fn zero_gate_parameters_give_half_scores() {
        let mut ps = ParamSet::new();
        let gate = ChannelGate::build(3, 5, 8, 6, false, &mut ps, &mut rng());
        for p in ps.iter_mut() {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let bound = ps.bind(&mut g);
        let x = g.leaf(&vec![0.7; 2 * 8 * 3], &[2, 8, 3], false);
        let gamma = gate.scores(&mut g, &bound, x).unwrap();
        assert!(g.data(gamma).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn gate_scores_strictly_inside_unit_interval() {
        let mut r = rng();
        let mut ps = ParamSet::new();
        let gate = ChannelGate::build(4, 7, 12, 16, false, &mut ps, &mut r);
        let xv: Vec<f64> = (0..3 * 12 * 4).map(|_| r.random_range(-3.0..3.0)).collect();
        let mut g = Graph::new();
        let bound = ps.bind(&mut g);
        let x = g.leaf(&xv, &[3, 12, 4], false);
        let gamma = gate.scores(&mut g, &bound, x).unwrap();
        assert_eq!(g.shape(gamma), &[3, 7]);
        assert!(g.data(gamma).iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn gate_formula_matches_hand_computation() {
        // C=2, N=2, U=2, L=3, batch 1: evaluate the written formula directly.
        let mut ps = ParamSet::new();
        let gate = ChannelGate::build(2, 2, 3, 2, false, &mut ps, &mut rng());
        let agg_w = [0.5, -1.0, 2.0];
        let agg_b = 0.25;
        let w1 = [[0.3, -0.2], [0.1, 0.4]]; // [C][U]
        let b1 = [0.05, -0.1];
        let w2 = [[1.5, -0.7], [0.2, 0.9]]; // [U][N]
        let b2 = [-0.3, 0.6];
        ps.get_mut(ParamId(0)).data = agg_w.to_vec();
        ps.get_mut(ParamId(1)).data = vec![agg_b];
        ps.get_mut(ParamId(2)).data = w1.concat();
        ps.get_mut(ParamId(3)).data = b1.to_vec();
        ps.get_mut(ParamId(4)).data = w2.concat();
        ps.get_mut(ParamId(5)).data = b2.to_vec();

        // x[t][c], column-wise channels
        let x = [[0.2, -0.4], [1.0, 0.3], [-0.5, 0.8]];
        let mut g = Graph::new();
        let bound = ps.bind(&mut g);
        let xt = g.leaf(&x.concat(), &[1, 3, 2], false);
        let gamma = gate.scores(&mut g, &bound, xt).unwrap();

        let pool = |c: usize| -> f64 {
            (0..3).map(|t| agg_w[t] * x[t][c]).sum::<f64>() + agg_b
        };
        let gstar = [pool(0), pool(1)];
        let hid: Vec<f64> = (0..2)
            .map(|u| {
                crate::tensor::kernels::gelu(
                    gstar[0] * w1[0][u] + gstar[1] * w1[1][u] + b1[u],
                )
            })
            .collect();
        for n in 0..2 {
            let z = hid[0] * w2[0][n] + hid[1] * w2[1][n] + b2[n];
            let expect = crate::tensor::kernels::sigmoid(z);
            assert!((g.data(gamma)[n] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn gate_application_scales_channels_and_gradients() {
        let mut g = Graph::new();
        let a = g.leaf(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[1, 3, 2], true);
        let gamma = g.leaf(&[1.0, 0.0], &[1, 2], false);
        let out = ChannelGate::apply(&mut g, a, gamma).unwrap();
        assert_eq!(g.data(out), &[1.0, 0.0, 3.0, 0.0, 5.0, 0.0]);

        // gradient wrt A scales by gamma
        let loss = g.sum_all(out);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn cutoff_zero_slope_is_identity() {
        let mut ps = ParamSet::new();
        let tc = TemporalCutoff::build(6, 2, &mut ps, &mut rng());
        let mut r = rng();
        let qv: Vec<f64> = (0..2 * 6 * 2).map(|_| r.random_range(-2.0..2.0)).collect();
        let mut g = Graph::new();
        let bound = ps.bind(&mut g);
        let q = g.leaf(&qv, &[2, 6, 2], false);
        let (out, mask) = tc.apply(&mut g, &bound, q).unwrap();
        assert_eq!(g.data(out), &qv[..]);
        assert!(g.data(mask).iter().all(|&m| m == 1.0));
    }

    #[test]
    fn cutoff_mask_from_hand_ramp() {
        // L=4, a=0.5 via bias: h = [-0.5, 0, 0.5, 1] -> mask [0,0,1,1]
        // (h = 0 is cut; the inequality is strict).
        let mut ps = ParamSet::new();
        let tc = TemporalCutoff::build(4, 1, &mut ps, &mut rng());
        ps.get_mut(ParamId(1)).data = vec![0.5];
        let qv = vec![1.0, 2.0, 3.0, 4.0];
        let mut g = Graph::new();
        let bound = ps.bind(&mut g);
        let q = g.leaf(&qv, &[1, 4, 1], false);
        let (out, mask) = tc.apply(&mut g, &bound, q).unwrap();
        assert_eq!(g.data(mask), &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(g.data(out), &[0.0, 0.0, 3.0, 4.0]);
    }

    #[test]
    fn cutoff_idempotent_under_same_mask() {
        let mut ps = ParamSet::new();
        let tc = TemporalCutoff::build(5, 1, &mut ps, &mut rng());
        ps.get_mut(ParamId(1)).data = vec![0.4];
        let qv = vec![1.0, -2.0, 3.0, -4.0, 5.0];
        let mut g = Graph::new();
        let bound = ps.bind(&mut g);
        let q = g.leaf(&qv, &[1, 5, 1], false);
        let (out, mask) = tc.apply(&mut g, &bound, q).unwrap();
        let again = g.mul(out, mask).unwrap();
        assert_eq!(g.data(again), g.data(out));
    }

    #[test]
    fn cutoff_mask_is_suffix_for_positive_slope_all_ones_otherwise() {
        let mut ps = ParamSet::new();
        let tc = TemporalCutoff::build(16, 3, &mut ps, &mut rng());
        // slopes via bias: positive, zero, negative
        ps.get_mut(ParamId(1)).data = vec![0.21, 0.0, -0.5];
        let mut r = rng();
        let qv: Vec<f64> = (0..2 * 16 * 3).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let bound = ps.bind(&mut g);
        let q = g.leaf(&qv, &[2, 16, 3], false);
        let (_, mask) = tc.apply(&mut g, &bound, q).unwrap();
        let md = g.data(mask);
        for b in 0..2 {
            for ch in 0..3 {
                let col: Vec<f64> = (0..16).map(|t| md[(b * 16 + t) * 3 + ch]).collect();
                // once the mask turns on it stays on, and t = L is always on
                let first_on = col.iter().position(|&v| v == 1.0).unwrap();
                assert!(col[first_on..].iter().all(|&v| v == 1.0));
                assert_eq!(col[15], 1.0);
                if ch > 0 {
                    // non-positive slope keeps everything
                    assert!(col.iter().all(|&v| v == 1.0));
                }
            }
        }
    }

    #[test]
    fn ste_gradient_matches_analytic_surrogate() {
        // Random 1-channel toy; loss = sum(Q'). The surrogate gradient is
        //   dQ_s = m_s + W_s * D,  dW_s = Q_s * D,  db = D,
        // where D = sum_t Q_t * (t - L).
        let l = 7usize;
        let mut r = rng();
        let qv: Vec<f64> = (0..l).map(|_| r.random_range(-1.0..1.0)).collect();
        let wv: Vec<f64> = (0..l).map(|_| r.random_range(-0.2..0.2)).collect();
        let bv = 0.3;

        let mut ps = ParamSet::new();
        let tc = TemporalCutoff::build(l, 1, &mut ps, &mut r);
        ps.get_mut(ParamId(0)).data = wv.clone();
        ps.get_mut(ParamId(1)).data = vec![bv];

        let mut g = Graph::new();
        let bound = ps.bind(&mut g);
        let q = g.leaf(&qv, &[1, l, 1], true);
        let (out, mask) = tc.apply(&mut g, &bound, q).unwrap();
        let loss = g.sum_all(out);
        g.backward(loss).unwrap();

        let d: f64 = (0..l).map(|t| qv[t] * ((t + 1) as f64 - l as f64)).sum();
        let md = g.data(mask).to_vec();
        let dq = g.grad(q).unwrap();
        let dw = g.grad(bound[0]).unwrap();
        let db = g.grad(bound[1]).unwrap();
        for s in 0..l {
            let expect_q = md[s] + wv[s] * d;
            assert!((dq[s] - expect_q).abs() < 1e-6, "dQ[{s}]");
            let expect_w = qv[s] * d;
            assert!((dw[s] - expect_w).abs() < 1e-6, "dW[{s}]");
        }
        assert!((db[0] - d).abs() < 1e-6);
    }
}
