//! Synthetic benchmark generators: the two-channel shifting toy, the
//! eight-channel lag-linked walk, and the parameterized lag chain with
//! cumulative noise. All are fully determined by (sizes, seed).

use super::SeriesFrame;
use crate::error::{CatsError, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Lags used by the eight-channel generator.
pub const MULTI_LAGS: [usize; 4] = [96, 192, 336, 720];

/// Sidecar metadata written next to every generated CSV; enough to
/// regenerate the dataset bitwise.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator: String,
    pub seed: u64,
    pub rows: usize,
    pub channels: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lags: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub combination_coefficients: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ar_coefficient: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offsets: Option<Vec<usize>>,
}

impl DatasetManifest {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// AR(1) path with unit Gaussian innovations; coefficient 1 is a random walk.
fn ar1(len: usize, coeff: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(len);
    let mut prev = 0.0;
    for _ in 0..len {
        let eps: f64 = StandardNormal.sample(rng);
        prev = coeff * prev + eps;
        out.push(prev);
    }
    out
}

/// Two channels: a random walk and the same walk lagged by 96 steps. The
/// master carries 96 steps of prehistory so that the lag relation holds on
/// every retained row.
pub fn gen_shifting_toy(rows: usize, seed: u64) -> Result<(SeriesFrame, DatasetManifest)> {
    const LAG: usize = 96;
    if rows <= 2 * LAG {
        return Err(CatsError::Config(format!(
            "shifting toy needs more than {} rows, got {rows}",
            2 * LAG
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let master = ar1(rows + LAG, 1.0, &mut rng);
    let mut values = Vec::with_capacity(rows * 2);
    for t in 0..rows {
        values.push(master[LAG + t]); // series 1
        values.push(master[t]); // series 2 = series 1 lagged by 96
    }
    let frame = SeriesFrame::new(values, vec!["s1".into(), "s2".into()])?;
    let manifest = DatasetManifest {
        generator: "shifting-toy".into(),
        seed,
        rows,
        channels: 2,
        lags: Some(vec![LAG]),
        combination_coefficients: None,
        noise_scale: None,
        ar_coefficient: Some(1.0),
        offsets: None,
    };
    Ok((frame, manifest))
}

/// Eight channels: a master random walk, four lagged copies (96/192/336/720),
/// and three fixed random linear combinations of the first five series
/// (coefficients uniform in [-1,1], normalized to unit l1, drawn once from
/// the seed and recorded in the manifest).
pub fn gen_multi(rows: usize, seed: u64) -> Result<(SeriesFrame, DatasetManifest)> {
    let max_lag = *MULTI_LAGS.iter().max().unwrap();
    if rows <= max_lag {
        return Err(CatsError::Config(format!(
            "multi generator needs more than {max_lag} rows, got {rows}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let master = ar1(rows + max_lag, 1.0, &mut rng);
    let mut coeffs: Vec<Vec<f64>> = Vec::with_capacity(3);
    for _ in 0..3 {
        let mut c: Vec<f64> = (0..5)
            .map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0))
            .collect();
        let l1: f64 = c.iter().map(|v| v.abs()).sum();
        c.iter_mut().for_each(|v| *v /= l1);
        coeffs.push(c);
    }
    let base_at = |t: usize, i: usize| -> f64 {
        match i {
            0 => master[max_lag + t],
            _ => master[max_lag + t - MULTI_LAGS[i - 1]],
        }
    };
    let mut values = Vec::with_capacity(rows * 8);
    for t in 0..rows {
        let base: Vec<f64> = (0..5).map(|i| base_at(t, i)).collect();
        values.extend_from_slice(&base);
        for c in &coeffs {
            values.push(base.iter().zip(c).map(|(b, w)| b * w).sum());
        }
    }
    let names = (1..=8).map(|i| format!("s{i}")).collect();
    let frame = SeriesFrame::new(values, names)?;
    let manifest = DatasetManifest {
        generator: "multi".into(),
        seed,
        rows,
        channels: 8,
        lags: Some(MULTI_LAGS.to_vec()),
        combination_coefficients: Some(coeffs),
        noise_scale: None,
        ar_coefficient: Some(1.0),
        offsets: None,
    };
    Ok((frame, manifest))
}

/// Chain of `count` series: the first is the master walk; each subsequent
/// series is the previous one plus fresh Gaussian noise, shifted so that the
/// cumulative offset of series i is round(i * total_offset / (count-1)).
/// Noise std is `noise_scale` times the master increment std and accumulates
/// down the chain.
pub fn gen_multix(
    count: usize,
    rows: usize,
    total_offset: usize,
    noise_scale: f64,
    ar_coefficient: f64,
    seed: u64,
) -> Result<(SeriesFrame, DatasetManifest)> {
    if count < 2 {
        return Err(CatsError::Config("multix needs at least 2 series".into()));
    }
    if count > total_offset {
        return Err(CatsError::Config(format!(
            "multix with {count} series over a total offset of {total_offset} \
             would produce zero strides"
        )));
    }
    if rows <= total_offset {
        return Err(CatsError::Config(format!(
            "multix needs more than {total_offset} rows, got {rows}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ext = rows + total_offset;
    let master = ar1(ext, ar_coefficient, &mut rng);
    let inc_std = {
        let n = ext - 1;
        let mut mean = 0.0;
        for t in 1..ext {
            mean += master[t] - master[t - 1];
        }
        mean /= n as f64;
        let mut var = 0.0;
        for t in 1..ext {
            let d = master[t] - master[t - 1] - mean;
            var += d * d;
        }
        (var / n as f64).sqrt()
    };
    let offsets: Vec<usize> = (0..count)
        .map(|i| ((i * total_offset) as f64 / (count - 1) as f64).round() as usize)
        .collect();

    let mut chain = master;
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(count);
    columns.push(chain[total_offset..].to_vec());
    for i in 1..count {
        let stride = offsets[i] - offsets[i - 1];
        let mut next = vec![0.0; ext];
        for t in stride..ext {
            let eps: f64 = StandardNormal.sample(&mut rng);
            next[t] = chain[t - stride] + noise_scale * inc_std * eps;
        }
        columns.push(next[total_offset..].to_vec());
        chain = next;
    }

    let mut values = Vec::with_capacity(rows * count);
    for t in 0..rows {
        for col in &columns {
            values.push(col[t]);
        }
    }
    let names = (1..=count).map(|i| format!("s{i}")).collect();
    let frame = SeriesFrame::new(values, names)?;
    let manifest = DatasetManifest {
        generator: "multix".into(),
        seed,
        rows,
        channels: count,
        lags: None,
        combination_coefficients: None,
        noise_scale: Some(noise_scale),
        ar_coefficient: Some(ar_coefficient),
        offsets: Some(offsets),
    };
    Ok((frame, manifest))
}
