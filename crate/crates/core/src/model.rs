//! Full model assembly: demean, construct auxiliary channels, gate, cut off,
//! predict all channels jointly, project the joint forecast back onto the
//! output channels, and add the first-stage output-channel forecast as a
//! residual shortcut.

use crate::constructors::{ConstructorBank, ConstructorSpec};
use crate::error::{CatsError, Result};
use crate::params::{Init, ParamId, ParamSet};
use crate::predictors::{Predictor, PredictorConfig, PredictorKind};
use crate::sparsity::{ChannelGate, TemporalCutoff};
use crate::tensor::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Floor used when normalizing first differences by the channel std.
pub const CONT_STD_EPS: f64 = 1e-8;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub input_len: usize,
    pub horizon: usize,
    pub bank: Vec<ConstructorSpec>,
    pub predictor: PredictorKind,
    /// Hidden multiplier q: predictor hidden = q * L, gate hidden = q * C.
    pub mlp_ratio: usize,
    /// Two-layer predictor hidden dropout.
    pub dropout: f64,
    pub use_channel_sparsity: bool,
    pub use_temporal_sparsity: bool,
    pub use_shortcut: bool,
    /// Wrap the whole model in last-value demeaning (on in the standard
    /// pipeline; the lag-oracle configuration turns it off).
    pub use_demean: bool,
    /// Learn one aggregation vector per input channel instead of a shared one.
    pub per_channel_aggregation: bool,
    pub beta_cont: f64,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl ModelConfig {
    /// Paper-style defaults for a dataset shape: small regime below 16
    /// channels (q=4, dropout 0.75), large regime otherwise (q=8, 0.5).
    pub fn defaults(channels: usize, input_len: usize, horizon: usize) -> Self {
        let small = channels < 16;
        ModelConfig {
            channels,
            input_len,
            horizon,
            bank: crate::constructors::default_bank(channels),
            predictor: PredictorKind::TwoLayer,
            mlp_ratio: if small { 4 } else { 8 },
            dropout: if small { 0.75 } else { 0.5 },
            use_channel_sparsity: true,
            use_temporal_sparsity: true,
            use_shortcut: true,
            use_demean: true,
            per_channel_aggregation: false,
            beta_cont: 1.0,
            seed: 0,
        }
    }
}

/// Handles into the forward graph for inspection and plotting.
pub struct ForwardDiagnostics {
    /// Demeaned input window [B, L, C].
    pub input: Tensor,
    /// Auxiliary channels after gating [B, L, N] (None for an empty bank).
    pub ats_post_gate: Option<Tensor>,
    /// Gate scores [B, N].
    pub gamma: Option<Tensor>,
    /// Cutoff mask [B, L, N+C].
    pub mask: Option<Tensor>,
    /// Predictor input after the cutoff [B, L, N+C].
    pub predictor_input: Tensor,
    /// Joint first-stage forecast [B, L_P, N+C].
    pub first_stage: Tensor,
    /// First-stage forecast of the output channels [B, L_P, C].
    pub first_stage_out: Tensor,
    /// Projection of the joint forecast onto the output channels [B, L_P, C].
    pub projected: Tensor,
    /// Final forecast in input units [B, L_P, C].
    pub forecast: Tensor,
}

pub struct CatsModel {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    bank: ConstructorBank,
    gate: ChannelGate,
    cutoff: TemporalCutoff,
    predictor: Predictor,
    proj_w: ParamId,
    proj_b: ParamId,
}

impl CatsModel {
    pub fn build(cfg: ModelConfig) -> Result<Self> {
        if cfg.channels == 0 || cfg.input_len == 0 || cfg.horizon == 0 {
            return Err(CatsError::Config("model needs positive dimensions".into()));
        }
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let bank = ConstructorBank::build(
            cfg.bank.clone(),
            cfg.channels,
            cfg.input_len,
            &mut params,
            &mut rng,
        )?;
        let n = bank.total_out();
        let joint = n + cfg.channels;
        let gate = ChannelGate::build(
            cfg.channels,
            n,
            cfg.input_len,
            usize::max(1, cfg.mlp_ratio * cfg.channels),
            cfg.per_channel_aggregation,
            &mut params,
            &mut rng,
        );
        let cutoff = TemporalCutoff::build(cfg.input_len, joint, &mut params, &mut rng);
        let predictor = Predictor::build(
            &PredictorConfig {
                kind: cfg.predictor,
                input_len: cfg.input_len,
                horizon: cfg.horizon,
                mlp_ratio: cfg.mlp_ratio,
                dropout: cfg.dropout,
                channels: joint,
            },
            &mut params,
            &mut rng,
        )?;
        // Zero-initialized projection: training starts at the first-stage
        // output-channel forecast.
        let proj_w = params.alloc(
            "projection/weight",
            &[joint, cfg.channels],
            Init::Zeros,
            &mut rng,
        );
        let proj_b = params.alloc("projection/bias", &[cfg.channels], Init::Zeros, &mut rng);
        Ok(CatsModel {
            cfg,
            params,
            bank,
            gate,
            cutoff,
            predictor,
            proj_w,
            proj_b,
        })
    }

    pub fn ats_channels(&self) -> usize {
        self.bank.total_out()
    }

    pub fn bank(&self) -> &ConstructorBank {
        &self.bank
    }

    pub fn predictor_kind(&self) -> PredictorKind {
        self.predictor.kind()
    }

    /// Run the pipeline on a raw window batch [B, L, C]. The returned
    /// tensors live in `g`; pull values out before dropping it.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &[Tensor],
        x: Tensor,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor, ForwardDiagnostics)> {
        let xs = g.shape(x).to_vec();
        if xs.len() != 3 || xs[1] != self.cfg.input_len || xs[2] != self.cfg.channels {
            return Err(CatsError::shape(
                "model input",
                format!(
                    "{xs:?} vs (L={}, C={})",
                    self.cfg.input_len, self.cfg.channels
                ),
            ));
        }
        let len = self.cfg.input_len;
        let n = self.bank.total_out();

        // (1) last-value demean
        let (xd, anchors) = if self.cfg.use_demean {
            let anchors = g.slice_time(x, len - 1, len)?;
            (g.sub(x, anchors)?, Some(anchors))
        } else {
            (x, None)
        };

        // (2) construct auxiliary channels
        let ats_raw = if n > 0 {
            Some(self.bank.forward(g, bound, xd)?)
        } else {
            None
        };

        // (3) soft channel gate
        let (ats, gamma) = match ats_raw {
            Some(a) if self.cfg.use_channel_sparsity => {
                let gamma = self.gate.scores(g, bound, xd)?;
                (Some(ChannelGate::apply(g, a, gamma)?), Some(gamma))
            }
            other => (other, None),
        };

        // (4) temporal cutoff on [ATS', OTS']
        let joint = match ats {
            Some(a) => g.concat_channels(&[a, xd])?,
            None => xd,
        };
        let (q, mask) = if self.cfg.use_temporal_sparsity {
            let (q, m) = self.cutoff.apply(g, bound, joint)?;
            (q, Some(m))
        } else {
            (joint, None)
        };

        // (5) joint first-stage prediction
        let stage1 = self.predictor.forward(g, bound, q, training, rng)?;

        // (6) project all N+C forecast channels onto the C output channels
        let projected = g.affine(stage1, bound[self.proj_w.0], bound[self.proj_b.0])?;

        // (7) residual shortcut keeps the first-stage output-channel forecast
        let first_stage_out = g.slice_channels(stage1, n, n + self.cfg.channels)?;
        let combined = if self.cfg.use_shortcut {
            g.add(first_stage_out, projected)?
        } else {
            projected
        };

        // (8) remean
        let forecast = match anchors {
            Some(a) => g.add(combined, a)?,
            None => combined,
        };

        Ok((
            forecast,
            ForwardDiagnostics {
                input: xd,
                ats_post_gate: ats,
                gamma,
                mask,
                predictor_input: q,
                first_stage: stage1,
                first_stage_out,
                projected,
                forecast,
            },
        ))
    }

    /// Normalized squared first-difference penalty on the (post-gate)
    /// auxiliary channels, averaged over the batch.
    pub fn continuity_loss(&self, g: &mut Graph, ats: Tensor) -> Result<Tensor> {
        let shape = g.shape(ats).to_vec();
        let (batch, len, n) = (shape[0], shape[1], shape[2]);
        if n == 0 || len < 2 {
            return Ok(g.scalar(0.0));
        }
        let hi = g.slice_time(ats, 1, len)?;
        let lo = g.slice_time(ats, 0, len - 1)?;
        let diff = g.sub(hi, lo)?;
        let std = g.std_over_time(ats, CONT_STD_EPS)?;
        let z = g.div(diff, std)?;
        let sq = g.mul(z, z)?;
        let total = g.sum_all(sq);
        Ok(g.scale(
            total,
            self.cfg.beta_cont / (len as f64 * n as f64 * batch as f64),
        ))
    }

    /// MSE over all forecast entries plus the continuity term.
    pub fn total_loss(
        &self,
        g: &mut Graph,
        bound: &[Tensor],
        x: Tensor,
        target: Tensor,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor, ForwardDiagnostics)> {
        let (forecast, diag) = self.forward(g, bound, x, training, rng)?;
        if g.shape(target) != g.shape(forecast) {
            return Err(CatsError::shape(
                "total_loss",
                format!("target {:?} vs forecast {:?}", g.shape(target), g.shape(forecast)),
            ));
        }
        let err = g.sub(forecast, target)?;
        let sq = g.mul(err, err)?;
        let mse = g.mean_all(sq);
        let loss = match (diag.ats_post_gate, self.cfg.beta_cont != 0.0) {
            (Some(ats), true) => {
                let cont = self.continuity_loss(g, ats)?;
                g.add(mse, cont)?
            }
            _ => mse,
        };
        Ok((loss, diag))
    }

    /// Per-module parameter counts (by name group) plus the total.
    pub fn count_params(&self) -> (Vec<(String, usize)>, usize) {
        let groups = self.params.counts_by_group();
        let total = self.params.total_len();
        (groups, total)
    }

    /// Forecast values for a raw window batch, in input units (eval mode).
    pub fn predict(&self, x: &[f64], batch: usize) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let xt = g.leaf(x, &[batch, self.cfg.input_len, self.cfg.channels], false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (forecast, _) = self.forward(&mut g, &bound, xt, false, &mut rng)?;
        Ok(g.data(forecast).to_vec())
    }
}

/// One row of the per-window diagnostics dump.
#[derive(Debug, Serialize)]
struct DiagRow {
    channel_kind: &'static str,
    channel_index: usize,
    t: usize,
    input_value: Option<f64>,
    gate: Option<f64>,
    mask: Option<f64>,
    first_stage: Option<f64>,
    final_value: Option<f64>,
    truth: Option<f64>,
}

/// Dump one window (batch row `b`) of a forward pass as CSV, one row per
/// (channel, timestep): input timesteps carry the predictor input, gate and
/// mask; horizon timesteps carry the first-stage, final and true values.
#[allow(clippy::too_many_arguments)]
pub fn dump_window_diagnostics(
    g: &Graph,
    model: &CatsModel,
    diag: &ForwardDiagnostics,
    b: usize,
    truth: &[f64],
    path: &std::path::Path,
) -> Result<()> {
    let n = model.ats_channels();
    let c = model.cfg.channels;
    let (len, horizon) = (model.cfg.input_len, model.cfg.horizon);
    let joint = n + c;
    let q = g.data(diag.predictor_input);
    let stage1 = g.data(diag.first_stage);
    let forecast = g.data(diag.forecast);
    let gamma = diag.gamma.map(|t| g.data(t));
    let mask = diag.mask.map(|t| g.data(t));

    let mut w = csv::Writer::from_path(path)?;
    for ch in 0..joint {
        let (kind, index): (&'static str, usize) = if ch < n {
            ("ATS", ch)
        } else {
            ("OTS", ch - n)
        };
        for t in 0..len {
            w.serialize(DiagRow {
                channel_kind: kind,
                channel_index: index,
                t: t + 1,
                input_value: Some(q[(b * len + t) * joint + ch]),
                gate: match (kind, &gamma) {
                    ("ATS", Some(gd)) => Some(gd[b * n + ch]),
                    _ => None,
                },
                mask: mask.as_ref().map(|m| m[(b * len + t) * joint + ch]),
                first_stage: None,
                final_value: None,
                truth: None,
            })?;
        }
        for h in 0..horizon {
            w.serialize(DiagRow {
                channel_kind: kind,
                channel_index: index,
                t: len + h + 1,
                input_value: None,
                gate: None,
                mask: None,
                first_stage: Some(stage1[(b * horizon + h) * joint + ch]),
                final_value: (kind == "OTS").then(|| forecast[(b * horizon + h) * c + index]),
                truth: (kind == "OTS").then(|| truth[(b * horizon + h) * c + index]),
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constructors::ConstructorSpec;
    use rand::Rng;

    fn toy_cfg() -> ModelConfig {
        ModelConfig {
            channels: 3,
            input_len: 16,
            horizon: 4,
            bank: vec![
                ConstructorSpec::conv(5, 2),
                ConstructorSpec::noconv(4, 2),
                ConstructorSpec::iconv(3, 1),
                ConstructorSpec::lin(2),
                ConstructorSpec::id(),
                ConstructorSpec::emb(2),
            ],
            predictor: PredictorKind::TwoLayer,
            mlp_ratio: 2,
            dropout: 0.0,
            use_channel_sparsity: true,
            use_temporal_sparsity: true,
            use_shortcut: true,
            use_demean: true,
            per_channel_aggregation: false,
            beta_cont: 1.0,
            seed: 3,
        }
    }

    fn randx(n: usize, seed: u64) -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn forward_shapes_and_diagnostics() {
        let model = CatsModel::build(toy_cfg()).unwrap();
        let x = randx(2 * 16 * 3, 1);
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g);
        let xt = g.leaf(&x, &[2, 16, 3], false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (y, diag) = model.forward(&mut g, &bound, xt, false, &mut rng).unwrap();
        let n = model.ats_channels();
        assert_eq!(n, 2 + 2 + 3 + 2 + 3 + 2);
        assert_eq!(g.shape(y), &[2, 4, 3]);
        assert_eq!(g.shape(diag.first_stage), &[2, 4, n + 3]);
        assert_eq!(g.shape(diag.gamma.unwrap()), &[2, n]);
        assert_eq!(g.shape(diag.mask.unwrap()), &[2, 16, n + 3]);
        // gates strictly inside (0,1)
        assert!(g
            .data(diag.gamma.unwrap())
            .iter()
            .all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_projection_keeps_first_stage_forecast() {
        // At init the projection is zero, so the final forecast equals the
        // remeaned first-stage output-channel forecast.
        let model = CatsModel::build(toy_cfg()).unwrap();
        let x = randx(2 * 16 * 3, 2);
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g);
        let xt = g.leaf(&x, &[2, 16, 3], false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (y, diag) = model.forward(&mut g, &bound, xt, false, &mut rng).unwrap();
        let first = g.data(diag.first_stage_out);
        let yd = g.data(y);
        for b in 0..2 {
            for h in 0..4 {
                for c in 0..3 {
                    let anchor = x[(b * 16 + 15) * 3 + c];
                    let expect = first[(b * 4 + h) * 3 + c] + anchor;
                    assert_eq!(yd[(b * 4 + h) * 3 + c], expect);
                }
            }
        }
    }

    #[test]
    fn empty_bank_no_sparsity_equals_bare_predictor() {
        let mut cfg = toy_cfg();
        cfg.bank = vec![];
        cfg.use_channel_sparsity = false;
        cfg.use_temporal_sparsity = false;
        let model = CatsModel::build(cfg).unwrap();
        let x = randx(4 * 16 * 3, 5);

        let forecast = model.predict(&x, 4).unwrap();

        // Bare predictor with the same weights: demean -> predict -> remean.
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g);
        let xt = g.leaf(&x, &[4, 16, 3], false);
        let anchors = g.slice_time(xt, 15, 16).unwrap();
        let xd = g.sub(xt, anchors).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let yd = model
            .predictor
            .forward(&mut g, &bound, xd, false, &mut rng)
            .unwrap();
        let y = g.add(yd, anchors).unwrap();
        assert!(forecast
            .iter()
            .zip(g.data(y))
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn continuity_loss_hand_value_and_degenerate_cases() {
        let model = CatsModel::build(toy_cfg()).unwrap();
        // Single channel [1,2,3,4]: diffs 1,1,1, population var 1.25
        // -> (1/ (4*1)) * 3/1.25 = 0.6
        let mut g = Graph::new();
        let a = g.leaf(&[1.0, 2.0, 3.0, 4.0], &[1, 4, 1], false);
        let l = model.continuity_loss(&mut g, a).unwrap();
        assert!((g.value(l) - 0.6).abs() < 1e-12);

        // constant channel -> zero
        let c = g.leaf(&[2.0; 4], &[1, 4, 1], false);
        let l = model.continuity_loss(&mut g, c).unwrap();
        assert_eq!(g.value(l), 0.0);

        // fully gated (all-zero) channel -> zero under the eps floor
        let z = g.leaf(&[0.0; 8], &[1, 4, 2], false);
        let l = model.continuity_loss(&mut g, z).unwrap();
        assert_eq!(g.value(l), 0.0);
    }

    #[test]
    fn continuity_loss_invariant_to_channel_affine_rescale() {
        let model = CatsModel::build(toy_cfg()).unwrap();
        let a = randx(2 * 10 * 3, 7);
        let mut g = Graph::new();
        let at = g.leaf(&a, &[2, 10, 3], false);
        let l0 = model.continuity_loss(&mut g, at).unwrap();
        let scaled: Vec<f64> = a
            .iter()
            .enumerate()
            .map(|(i, &v)| match i % 3 {
                0 => 3.0 * v + 5.0,
                1 => 0.25 * v - 2.0,
                _ => -1.5 * v,
            })
            .collect();
        let st = g.leaf(&scaled, &[2, 10, 3], false);
        let l1 = model.continuity_loss(&mut g, st).unwrap();
        assert!(
            (g.value(l0) - g.value(l1)).abs() < 1e-9,
            "{} vs {}",
            g.value(l0),
            g.value(l1)
        );
    }

    #[test]
    fn beta_zero_reduces_to_plain_mse() {
        let mut cfg = toy_cfg();
        cfg.beta_cont = 0.0;
        let model = CatsModel::build(cfg).unwrap();
        let x = randx(2 * 16 * 3, 8);
        let t = randx(2 * 4 * 3, 9);
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g);
        let xt = g.leaf(&x, &[2, 16, 3], false);
        let tt = g.leaf(&t, &[2, 4, 3], false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (loss, diag) = model
            .total_loss(&mut g, &bound, xt, tt, false, &mut rng)
            .unwrap();
        let f = g.data(diag.forecast);
        let mse: f64 = f
            .iter()
            .zip(&t)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / (2.0 * 4.0 * 3.0);
        assert!((g.value(loss) - mse).abs() < 1e-12);
    }

    #[test]
    fn zeroed_gate_makes_output_invariant_to_constructor_params() {
        // Saturating the gate bias to a large negative value gives exact
        // zero scores, so constructor parameters cannot affect the output.
        let mut cfg = toy_cfg();
        cfg.use_temporal_sparsity = false;
        let mut model = CatsModel::build(cfg).unwrap();
        let b2 = model
            .params
            .iter()
            .position(|p| p.name == "channel_sparsity/mlp2.bias")
            .unwrap();
        model
            .params
            .get_mut(crate::params::ParamId(b2))
            .data
            .iter_mut()
            .for_each(|v| *v = -1e4);

        let x = randx(2 * 16 * 3, 11);
        let base = model.predict(&x, 2).unwrap();

        // Perturb every constructor parameter.
        for p in model.params.iter_mut() {
            let g = p.name.split('/').next().unwrap();
            if ["conv", "noconv", "iconv", "lin", "emb"].contains(&g) {
                p.data.iter_mut().for_each(|v| *v += 0.37);
            }
        }
        let pert = model.predict(&x, 2).unwrap();
        assert_eq!(base, pert);
    }

    #[test]
    fn param_count_breakdown() {
        let cfg = ModelConfig {
            channels: 7,
            input_len: 720,
            horizon: 96,
            bank: crate::constructors::default_bank(7),
            predictor: PredictorKind::TwoLayer,
            mlp_ratio: 4,
            dropout: 0.75,
            use_channel_sparsity: true,
            use_temporal_sparsity: true,
            use_shortcut: true,
            use_demean: true,
            per_channel_aggregation: false,
            beta_cont: 1.0,
            seed: 0,
        };
        let model = CatsModel::build(cfg).unwrap();
        let (groups, total) = model.count_params();
        let find = |name: &str| {
            groups
                .iter()
                .find(|(g, _)| g == name)
                .map(|(_, n)| *n)
                .unwrap_or(0)
        };
        assert_eq!(find("predictor"), 2_353_056);
        assert_eq!(find("emb"), 2_880);
        assert_eq!(find("conv"), 13_568);
        assert_eq!(find("iconv"), 350);
        // N = 58, joint = 65
        assert_eq!(find("projection"), 65 * 7 + 7);
        assert_eq!(find("temporal_sparsity"), 720 * 65 + 65);
        assert_eq!(total, groups.iter().map(|(_, n)| n).sum::<usize>());

        // Mean predictor reports zero predictor parameters.
        let mut cfg2 = toy_cfg();
        cfg2.predictor = PredictorKind::Mean;
        let m2 = CatsModel::build(cfg2).unwrap();
        let (groups2, _) = m2.count_params();
        assert!(groups2.iter().all(|(g, n)| g != "predictor" || *n == 0));
    }

    #[test]
    fn diagnostics_dump_has_expected_rows() {
        let model = CatsModel::build(toy_cfg()).unwrap();
        let x = randx(16 * 3, 13);
        let truth = randx(4 * 3, 14);
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g);
        let xt = g.leaf(&x, &[1, 16, 3], false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, diag) = model.forward(&mut g, &bound, xt, false, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("diag.csv");
        dump_window_diagnostics(&g, &model, &diag, 0, &truth, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let joint = model.ats_channels() + 3;
        assert_eq!(text.lines().count(), 1 + joint * (16 + 4));
        assert!(text.lines().next().unwrap().contains("channel_kind"));
    }
}
