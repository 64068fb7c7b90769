//! First-stage predictors mapping each channel's lookback window to the
//! forecasting horizon behind one interface: a shared two-layer MLP, channel-
//! independent linear maps, mean pooling, and a trend/seasonal linear
//! baseline.

use crate::error::{CatsError, Result};
use crate::params::{Init, ParamId, ParamSet};
use crate::tensor::{Graph, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorKind {
    TwoLayer,
    IndLin,
    Mean,
    DLinear,
}

#[derive(Clone, Debug)]
pub struct PredictorConfig {
    pub kind: PredictorKind,
    pub input_len: usize,
    pub horizon: usize,
    /// Hidden width multiplier q for the two-layer MLP (hidden = q * L).
    pub mlp_ratio: usize,
    /// Hidden-layer dropout for the two-layer MLP.
    pub dropout: f64,
    /// Channel count; fixed at build time for the channel-unshared kinds.
    pub channels: usize,
}

/// Moving-average window of the trend/seasonal decomposition.
const DLINEAR_KERNEL: usize = 25;

pub enum Predictor {
    TwoLayer {
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
        dropout: f64,
    },
    IndLin {
        w: ParamId,
        b: ParamId,
        channels: usize,
    },
    Mean {
        horizon: usize,
    },
    DLinear {
        trend_w: ParamId,
        trend_b: ParamId,
        seasonal_w: ParamId,
        seasonal_b: ParamId,
    },
}

impl Predictor {
    pub fn build(cfg: &PredictorConfig, ps: &mut ParamSet, rng: &mut impl Rng) -> Result<Self> {
        let (l, h) = (cfg.input_len, cfg.horizon);
        if l == 0 || h == 0 {
            return Err(CatsError::Config("predictor needs positive lengths".into()));
        }
        Ok(match cfg.kind {
            PredictorKind::TwoLayer => {
                if cfg.mlp_ratio == 0 {
                    return Err(CatsError::Config("mlp_ratio must be >= 1".into()));
                }
                if !(0.0..1.0).contains(&cfg.dropout) {
                    return Err(CatsError::Config(format!(
                        "dropout must be in [0,1), got {}",
                        cfg.dropout
                    )));
                }
                let hidden = cfg.mlp_ratio * l;
                Predictor::TwoLayer {
                    w1: ps.alloc(
                        "predictor/mlp1.weight",
                        &[l, hidden],
                        Init::UniformFanIn(l),
                        rng,
                    ),
                    b1: ps.alloc("predictor/mlp1.bias", &[hidden], Init::Zeros, rng),
                    w2: ps.alloc(
                        "predictor/mlp2.weight",
                        &[hidden, h],
                        Init::UniformFanIn(hidden),
                        rng,
                    ),
                    b2: ps.alloc("predictor/mlp2.bias", &[h], Init::Zeros, rng),
                    dropout: cfg.dropout,
                }
            }
            PredictorKind::IndLin => {
                if cfg.channels == 0 {
                    return Err(CatsError::Config("indlin needs a channel count".into()));
                }
                Predictor::IndLin {
                    w: ps.alloc(
                        "predictor/indlin.weight",
                        &[cfg.channels, l, h],
                        Init::UniformFanIn(l),
                        rng,
                    ),
                    b: ps.alloc("predictor/indlin.bias", &[cfg.channels, h], Init::Zeros, rng),
                    channels: cfg.channels,
                }
            }
            PredictorKind::Mean => Predictor::Mean { horizon: h },
            PredictorKind::DLinear => Predictor::DLinear {
                trend_w: ps.alloc(
                    "predictor/trend.weight",
                    &[l, h],
                    Init::UniformFanIn(l),
                    rng,
                ),
                trend_b: ps.alloc("predictor/trend.bias", &[h], Init::Zeros, rng),
                seasonal_w: ps.alloc(
                    "predictor/seasonal.weight",
                    &[l, h],
                    Init::UniformFanIn(l),
                    rng,
                ),
                seasonal_b: ps.alloc("predictor/seasonal.bias", &[h], Init::Zeros, rng),
            },
        })
    }

    pub fn kind(&self) -> PredictorKind {
        match self {
            Predictor::TwoLayer { .. } => PredictorKind::TwoLayer,
            Predictor::IndLin { .. } => PredictorKind::IndLin,
            Predictor::Mean { .. } => PredictorKind::Mean,
            Predictor::DLinear { .. } => PredictorKind::DLinear,
        }
    }

    /// Map [B, L, k] to [B, L_P, k].
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &[Tensor],
        z: Tensor,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        match self {
            Predictor::TwoLayer {
                w1,
                b1,
                w2,
                b2,
                dropout,
            } => {
                let rows = g.transpose12(z)?; // [B, k, L]
                let h = g.affine(rows, bound[w1.0], bound[b1.0])?;
                let h = g.gelu(h);
                let h = g.dropout(h, *dropout, training, rng)?;
                let o = g.affine(h, bound[w2.0], bound[b2.0])?;
                g.transpose12(o)
            }
            Predictor::IndLin { w, b, channels } => {
                let k = g.shape(z)[2];
                if k != *channels {
                    return Err(CatsError::shape(
                        "indlin",
                        format!("built for {channels} channels, got {k}"),
                    ));
                }
                g.channelwise_affine(z, bound[w.0], bound[b.0])
            }
            Predictor::Mean { horizon } => {
                let m = g.mean_over_time(z)?;
                g.repeat_time(m, *horizon)
            }
            Predictor::DLinear {
                trend_w,
                trend_b,
                seasonal_w,
                seasonal_b,
            } => {
                let trend = g.moving_average_time(z, DLINEAR_KERNEL)?;
                let seasonal = g.sub(z, trend)?;
                let tr = g.transpose12(trend)?;
                let ty = g.affine(tr, bound[trend_w.0], bound[trend_b.0])?;
                let sr = g.transpose12(seasonal)?;
                let sy = g.affine(sr, bound[seasonal_w.0], bound[seasonal_b.0])?;
                let sum = g.add(ty, sy)?;
                g.transpose12(sum)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn cfg(kind: PredictorKind, l: usize, h: usize, k: usize) -> PredictorConfig {
        PredictorConfig {
            kind,
            input_len: l,
            horizon: h,
            mlp_ratio: 4,
            dropout: 0.0,
            channels: k,
        }
    }

    fn build(c: &PredictorConfig) -> (Predictor, ParamSet) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Predictor::build(c, &mut ps, &mut rng).unwrap();
        (p, ps)
    }

    fn run(p: &Predictor, ps: &ParamSet, z: &[f64], shape: &[usize]) -> (Graph, Tensor) {
        let mut g = Graph::new();
        let bound = ps.bind(&mut g);
        let zt = g.leaf(z, shape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = p.forward(&mut g, &bound, zt, false, &mut rng).unwrap();
        (g, y)
    }

    #[test]
    fn two_layer_parameter_count() {
        let (_, ps) = build(&cfg(PredictorKind::TwoLayer, 720, 96, 1));
        assert_eq!(ps.total_len(), 2_353_056);
    }

    #[test]
    fn indlin_per_channel_parameter_count() {
        let (_, ps) = build(&cfg(PredictorKind::IndLin, 720, 96, 1));
        assert_eq!(ps.total_len(), 69_216);
    }

    #[test]
    fn mean_has_zero_parameters() {
        let (_, ps) = build(&cfg(PredictorKind::Mean, 16, 4, 3));
        assert_eq!(ps.total_len(), 0);
    }

    #[test]
    fn two_layer_zero_weights_zero_forecast() {
        let c = cfg(PredictorKind::TwoLayer, 8, 3, 2);
        let (p, mut ps) = build(&c);
        for prm in ps.iter_mut() {
            prm.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let z = vec![1.5; 2 * 8 * 2];
        let (g, y) = run(&p, &ps, &z, &[2, 8, 2]);
        assert_eq!(g.shape(y), &[2, 3, 2]);
        assert!(g.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_layer_weight_sharing_is_channel_symmetric() {
        let c = cfg(PredictorKind::TwoLayer, 8, 3, 2);
        let (p, ps) = build(&c);
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let za: Vec<f64> = (0..8 * 2).map(|_| r.random_range(-1.0..1.0)).collect();
        // swap the two channels
        let mut zb = za.clone();
        for t in 0..8 {
            zb.swap(t * 2, t * 2 + 1);
        }
        let (ga, ya) = run(&p, &ps, &za, &[1, 8, 2]);
        let (gb, yb) = run(&p, &ps, &zb, &[1, 8, 2]);
        for h in 0..3 {
            assert_eq!(ga.data(ya)[h * 2], gb.data(yb)[h * 2 + 1]);
            assert_eq!(ga.data(ya)[h * 2 + 1], gb.data(yb)[h * 2]);
        }
    }

    #[test]
    fn indlin_oracle_weights_copy_paste() {
        // One channel, L=144, H=48: W[:, 49:96] = I reproduces steps 49..96.
        let c = cfg(PredictorKind::IndLin, 144, 48, 1);
        let (p, mut ps) = build(&c);
        {
            let w = ps.get_mut(ParamId(0));
            w.data.iter_mut().for_each(|v| *v = 0.0);
            for h in 0..48 {
                w.data[(48 + h) * 48 + h] = 1.0; // w[0][t][h], t = 48 + h
            }
            ps.get_mut(ParamId(1)).data.iter_mut().for_each(|v| *v = 0.0);
        }
        let z: Vec<f64> = (0..144).map(|t| (t as f64).sin()).collect();
        let (g, y) = run(&p, &ps, &z, &[1, 144, 1]);
        for h in 0..48 {
            assert_eq!(g.data(y)[h], z[48 + h]);
        }
    }

    #[test]
    fn indlin_channels_are_independent() {
        let c = cfg(PredictorKind::IndLin, 10, 4, 3);
        let (p, ps) = build(&c);
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let za: Vec<f64> = (0..10 * 3).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut zb = za.clone();
        for t in 0..10 {
            zb[t * 3 + 1] += 2.0; // perturb channel 1 only
        }
        let (ga, ya) = run(&p, &ps, &za, &[1, 10, 3]);
        let (gb, yb) = run(&p, &ps, &zb, &[1, 10, 3]);
        for h in 0..4 {
            assert_eq!(ga.data(ya)[h * 3], gb.data(yb)[h * 3]);
            assert_eq!(ga.data(ya)[h * 3 + 2], gb.data(yb)[h * 3 + 2]);
            assert_ne!(ga.data(ya)[h * 3 + 1], gb.data(yb)[h * 3 + 1]);
        }

        // runtime channel mismatch errors
        let mut g = Graph::new();
        let bound = ps.bind(&mut g);
        let bad = g.leaf(&[0.0; 20], &[1, 10, 2], false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(p.forward(&mut g, &bound, bad, false, &mut rng).is_err());
    }

    #[test]
    fn mean_fills_horizon_with_input_mean() {
        let c = cfg(PredictorKind::Mean, 4, 2, 1);
        let (p, ps) = build(&c);
        let (g, y) = run(&p, &ps, &[1.0, 2.0, 3.0, 4.0], &[1, 4, 1]);
        assert_eq!(g.data(y), &[2.5, 2.5]);

        let (g, y) = run(&p, &ps, &[7.0; 4], &[1, 4, 1]);
        assert_eq!(g.data(y), &[7.0, 7.0]);
    }

    #[test]
    fn dlinear_paths_decompose() {
        let c = cfg(PredictorKind::DLinear, 30, 5, 2);
        let (p, ps) = build(&c);
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let z: Vec<f64> = (0..30 * 2).map(|_| r.random_range(-1.0..1.0)).collect();
        let (g, y) = run(&p, &ps, &z, &[1, 30, 2]);

        // Recompute the two paths separately and compare their sum.
        let mut g2 = Graph::new();
        let bound = ps.bind(&mut g2);
        let zt = g2.leaf(&z, &[1, 30, 2], false);
        let trend = g2.moving_average_time(zt, 25).unwrap();
        let seasonal = g2.sub(zt, trend).unwrap();
        let tr = g2.transpose12(trend).unwrap();
        let ty = g2.affine(tr, bound[0], bound[1]).unwrap();
        let sr = g2.transpose12(seasonal).unwrap();
        let sy = g2.affine(sr, bound[2], bound[3]).unwrap();
        let mut sum = vec![0.0; 10];
        let (tyd, syd) = (g2.data(ty), g2.data(sy));
        // ty/sy are [B, k, H]; y is [B, H, k]
        for k in 0..2 {
            for h in 0..5 {
                sum[h * 2 + k] = tyd[k * 5 + h] + syd[k * 5 + h];
            }
        }
        for (a, b) in g.data(y).iter().zip(&sum) {
            assert!((a - b).abs() < 1e-12);
        }

        // Constant input: seasonal part is exactly zero, trend path carries it.
        let zc = vec![3.0; 30 * 2];
        let (gc, yc) = run(&p, &ps, &zc, &[1, 30, 2]);
        let mut g3 = Graph::new();
        let bound = ps.bind(&mut g3);
        let zt = g3.leaf(&zc, &[1, 30, 2], false);
        let tr = g3.transpose12(zt).unwrap();
        let ty = g3.affine(tr, bound[0], bound[1]).unwrap();
        let ty = g3.transpose12(ty).unwrap();
        for (a, b) in gc.data(yc).iter().zip(g3.data(ty)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_layer_grad_check() {
        let c = cfg(PredictorKind::TwoLayer, 6, 2, 2);
        let (p, ps) = build(&c);
        let err = crate::tensor::grad_check(
            move |g, z| {
                let bound = ps.bind(g);
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let y = p.forward(g, &bound, z, false, &mut rng)?;
                let sq = g.mul(y, y)?;
                Ok(g.mean_all(sq))
            },
            &{
                let mut r = ChaCha8Rng::seed_from_u64(7);
                (0..2 * 6 * 2).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>()
            },
            &[2, 6, 2],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
