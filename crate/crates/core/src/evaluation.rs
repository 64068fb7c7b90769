//! Metrics, the repeat baseline, table aggregation (percentage vs the naive
//! pivot, average ranks, first-place counts), and smoothness diagnostics.

use crate::data::{make_windows, repeat_forecast, SeriesFrame, Split};
use crate::error::{CatsError, Result};
use crate::model::CatsModel;
use crate::training::forecast_mse;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(CatsError::shape(
            "mse",
            format!("{} vs {}", pred.len(), truth.len()),
        ));
    }
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.len() as f64)
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(CatsError::shape(
            "mae",
            format!("{} vs {}", pred.len(), truth.len()),
        ));
    }
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

/// Metrics for one (model, horizon) evaluation, with the repeat baseline
/// computed on identical windows.
#[derive(Clone, Debug, Serialize)]
pub struct HorizonMetrics {
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
    pub repeat_mse: f64,
    pub repeat_mae: f64,
    pub windows: usize,
}

/// Stride-1 evaluation over the test split, in standardized units.
pub fn evaluate(model: &CatsModel, frame: &SeriesFrame, batch: usize) -> Result<HorizonMetrics> {
    let (l_i, l_p) = (model.cfg.input_len, model.cfg.horizon);
    let windows = make_windows(frame, Split::Test, l_i, l_p, 1)?;
    let c = windows.channels;
    let idx: Vec<usize> = (0..windows.len()).collect();
    let mut acc = [0.0f64; 4]; // se, ae, repeat se, repeat ae
    let mut count = 0usize;
    for chunk in idx.chunks(batch.max(1)) {
        let (xi, xp) = windows.gather(chunk);
        let pred = model.predict(&xi, chunk.len())?;
        let rep = repeat_forecast(&xi, l_i, c, l_p);
        for ((p, r), t) in pred.iter().zip(&rep).zip(&xp) {
            acc[0] += (p - t) * (p - t);
            acc[1] += (p - t).abs();
            acc[2] += (r - t) * (r - t);
            acc[3] += (r - t).abs();
        }
        count += xp.len();
    }
    let n = count.max(1) as f64;
    Ok(HorizonMetrics {
        horizon: l_p,
        mse: acc[0] / n,
        mae: acc[1] / n,
        repeat_mse: acc[2] / n,
        repeat_mae: acc[3] / n,
        windows: windows.len(),
    })
}

/// Repeat-baseline metrics alone (no model required).
pub fn evaluate_repeat(frame: &SeriesFrame, l_i: usize, l_p: usize) -> Result<(f64, f64)> {
    let windows = make_windows(frame, Split::Test, l_i, l_p, 1)?;
    let rep = repeat_forecast(&windows.x_input, l_i, windows.channels, l_p);
    Ok((mse(&rep, &windows.x_target)?, mae(&rep, &windows.x_target)?))
}

/// Per-run bundle of metrics destined for the results CSV.
#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub dataset: String,
    pub model: String,
    pub seed: u64,
    pub metrics: Vec<HorizonMetrics>,
    pub wall_time_s: f64,
}

/// One line of a results CSV: (dataset, model, L_P, mse, mae, seed).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ResultRow {
    pub dataset: String,
    pub model: String,
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
    pub seed: u64,
}

impl RunReport {
    /// Rows for this run's model, plus repeat-baseline rows.
    pub fn result_rows(&self) -> Vec<ResultRow> {
        let mut rows = Vec::new();
        for m in &self.metrics {
            rows.push(ResultRow {
                dataset: self.dataset.clone(),
                model: self.model.clone(),
                horizon: m.horizon,
                mse: m.mse,
                mae: m.mae,
                seed: self.seed,
            });
            rows.push(ResultRow {
                dataset: self.dataset.clone(),
                model: "repeat".into(),
                horizon: m.horizon,
                mse: m.repeat_mse,
                mae: m.repeat_mae,
                seed: self.seed,
            });
        }
        rows
    }
}

pub fn write_results_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["dataset", "model", "horizon", "mse", "mae", "seed"])?;
    for r in rows {
        w.write_record([
            r.dataset.clone(),
            r.model.clone(),
            r.horizon.to_string(),
            format!("{:.17e}", r.mse),
            format!("{:.17e}", r.mae),
            r.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| CatsError::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for rec in rdr.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

/// Aggregated comparison: rows are datasets, columns are models; each cell
/// averages MSE over horizons (seed-averaged first) with a percentage
/// against the repeat pivot. Footer: Avg% across datasets, average rank and
/// first-place count over (dataset, horizon, metric) sub-experiments.
#[derive(Clone, Debug)]
pub struct ComparisonTable {
    pub datasets: Vec<String>,
    pub models: Vec<String>,
    /// cells[dataset][model] = (avg MSE, pct vs repeat).
    pub cells: Vec<Vec<(f64, f64)>>,
    pub avg_pct: Vec<f64>,
    pub avg_rank: Vec<f64>,
    pub wins: Vec<usize>,
}

pub fn comparison_table(rows: &[ResultRow]) -> Result<ComparisonTable> {
    if rows.is_empty() {
        return Err(CatsError::Data("no result rows".into()));
    }
    let mut datasets: Vec<String> = Vec::new();
    let mut models: Vec<String> = Vec::new();
    for r in rows {
        if !datasets.contains(&r.dataset) {
            datasets.push(r.dataset.clone());
        }
        if !models.contains(&r.model) {
            models.push(r.model.clone());
        }
    }
    if !models.iter().any(|m| m == "repeat") {
        return Err(CatsError::Data(
            "comparison table requires the repeat baseline".into(),
        ));
    }

    // Seed-average metrics per (dataset, model, horizon).
    let mut keys: Vec<(usize, usize, usize)> = Vec::new(); // (ds, model, horizon)
    let mut sums: Vec<(f64, f64, usize)> = Vec::new();
    for r in rows {
        let ds = datasets.iter().position(|d| *d == r.dataset).unwrap();
        let mo = models.iter().position(|m| *m == r.model).unwrap();
        match keys.iter().position(|k| *k == (ds, mo, r.horizon)) {
            Some(i) => {
                sums[i].0 += r.mse;
                sums[i].1 += r.mae;
                sums[i].2 += 1;
            }
            None => {
                keys.push((ds, mo, r.horizon));
                sums.push((r.mse, r.mae, 1));
            }
        }
    }
    let metric =
        |ds: usize, mo: usize, h: usize| -> Option<(f64, f64)> {
            keys.iter().position(|k| *k == (ds, mo, h)).map(|i| {
                let (s_mse, s_mae, n) = sums[i];
                (s_mse / n as f64, s_mae / n as f64)
            })
        };

    // All horizons present per dataset (union over models).
    let mut horizons: Vec<Vec<usize>> = vec![Vec::new(); datasets.len()];
    for &(ds, _, h) in &keys {
        if !horizons[ds].contains(&h) {
            horizons[ds].push(h);
        }
    }
    for h in horizons.iter_mut() {
        h.sort_unstable();
    }

    let mut cells = vec![vec![(f64::NAN, f64::NAN); models.len()]; datasets.len()];
    for ds in 0..datasets.len() {
        let repeat_idx = models.iter().position(|m| m == "repeat").unwrap();
        let mut repeat_avg = 0.0;
        for &h in &horizons[ds] {
            let (m, _) = metric(ds, repeat_idx, h).ok_or_else(|| {
                CatsError::Data(format!(
                    "repeat baseline missing for {} at horizon {h}",
                    datasets[ds]
                ))
            })?;
            repeat_avg += m;
        }
        repeat_avg /= horizons[ds].len() as f64;
        for mo in 0..models.len() {
            let mut avg = 0.0;
            for &h in &horizons[ds] {
                let (m, _) = metric(ds, mo, h).ok_or_else(|| {
                    CatsError::Data(format!(
                        "model {} missing {} at horizon {h}",
                        models[mo], datasets[ds]
                    ))
                })?;
                avg += m;
            }
            avg /= horizons[ds].len() as f64;
            cells[ds][mo] = (avg, 100.0 * avg / repeat_avg);
        }
    }

    // Ranks per (dataset, horizon, metric); ties share the lower rank.
    let mut rank_sum = vec![0.0; models.len()];
    let mut wins = vec![0usize; models.len()];
    let mut sub_count = 0usize;
    for ds in 0..datasets.len() {
        for &h in &horizons[ds] {
            for pick in 0..2usize {
                let vals: Vec<f64> = (0..models.len())
                    .map(|mo| {
                        let (m, a) = metric(ds, mo, h).unwrap();
                        if pick == 0 {
                            m
                        } else {
                            a
                        }
                    })
                    .collect();
                sub_count += 1;
                for mo in 0..models.len() {
                    let better = vals.iter().filter(|&&v| v < vals[mo]).count();
                    let rank = better + 1; // ties share the lower rank
                    rank_sum[mo] += rank as f64;
                    if rank == 1 {
                        wins[mo] += 1;
                    }
                }
            }
        }
    }

    let avg_pct = (0..models.len())
        .map(|mo| {
            cells.iter().map(|row| row[mo].1).sum::<f64>() / datasets.len() as f64
        })
        .collect();
    let avg_rank = rank_sum
        .into_iter()
        .map(|s| s / sub_count.max(1) as f64)
        .collect();

    Ok(ComparisonTable {
        datasets,
        models,
        cells,
        avg_pct,
        avg_rank,
        wins,
    })
}

/// Round to `sig` significant figures and render without exponent.
pub fn format_sig(v: f64, sig: i32) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let mag = v.abs().log10().floor() as i32;
    let decimals = (sig - 1 - mag).max(0) as usize;
    format!("{:.*}", decimals, v)
}

impl ComparisonTable {
    /// Aligned text rendering, one dataset per row pair (pct over MSE).
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let width = 14usize;
        out.push_str(&format!("{:<16}", "dataset"));
        for m in &self.models {
            out.push_str(&format!("{m:>width$}"));
        }
        out.push('\n');
        for (ds, row) in self.datasets.iter().zip(&self.cells) {
            out.push_str(&format!("{ds:<16}"));
            for &(_, pct) in row {
                out.push_str(&format!("{:>width$}", format!("{}%", format_sig(pct, 3))));
            }
            out.push('\n');
            out.push_str(&format!("{:<16}", ""));
            for &(avg, _) in row {
                out.push_str(&format!("{:>width$}", format!("({})", format_sig(avg, 3))));
            }
            out.push('\n');
        }
        out.push_str(&format!("{:<16}", "Avg%"));
        for &p in &self.avg_pct {
            out.push_str(&format!("{:>width$}", format!("{}%", format_sig(p, 3))));
        }
        out.push('\n');
        out.push_str(&format!("{:<16}", "AvgRank"));
        for &r in &self.avg_rank {
            out.push_str(&format!("{:>width$}", format!("{r:.2}")));
        }
        out.push('\n');
        out.push_str(&format!("{:<16}", "#Win"));
        for &w in &self.wins {
            out.push_str(&format!("{w:>width$}"));
        }
        out.push('\n');
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["dataset".to_string()];
        for m in &self.models {
            header.push(format!("{m}_avg_mse"));
            header.push(format!("{m}_pct_vs_repeat"));
        }
        w.write_record(&header)?;
        for (ds, row) in self.datasets.iter().zip(&self.cells) {
            let mut rec = vec![ds.clone()];
            for &(avg, pct) in row {
                rec.push(format!("{avg:.6}"));
                rec.push(format!("{pct:.4}"));
            }
            w.write_record(&rec)?;
        }
        let mut foot = vec!["avg_pct".to_string()];
        for &p in &self.avg_pct {
            foot.push(String::new());
            foot.push(format!("{p:.4}"));
        }
        w.write_record(&foot)?;
        let mut foot = vec!["avg_rank".to_string()];
        for &r in &self.avg_rank {
            foot.push(String::new());
            foot.push(format!("{r:.4}"));
        }
        w.write_record(&foot)?;
        let mut foot = vec!["wins".to_string()];
        for &n in &self.wins {
            foot.push(String::new());
            foot.push(n.to_string());
        }
        w.write_record(&foot)?;
        w.flush()?;
        Ok(())
    }
}

/// Normalized first-difference energy of the gated auxiliary channels,
/// averaged over test windows: per channel, mean over windows of
/// sum_t ((A_t - A_{t-1}) / sigma)^2 / L.
#[derive(Clone, Debug, Serialize)]
pub struct SmoothnessReport {
    pub per_channel_energy: Vec<f64>,
    pub mean_energy: f64,
    pub windows: usize,
}

pub fn smoothness_report(
    model: &CatsModel,
    frame: &SeriesFrame,
    batch: usize,
    max_windows: usize,
) -> Result<SmoothnessReport> {
    let (l_i, l_p) = (model.cfg.input_len, model.cfg.horizon);
    let n = model.ats_channels();
    if n == 0 {
        return Ok(SmoothnessReport {
            per_channel_energy: Vec::new(),
            mean_energy: 0.0,
            windows: 0,
        });
    }
    let windows = make_windows(frame, Split::Test, l_i, l_p, 1)?;
    let count = windows.len().min(max_windows.max(1));
    let idx: Vec<usize> = (0..count).collect();
    let mut energy = vec![0.0; n];
    for chunk in idx.chunks(batch.max(1)) {
        let (xi, _) = windows.gather(chunk);
        let mut g = crate::tensor::Graph::new();
        let bound = model.params.bind(&mut g);
        let xt = g.leaf(&xi, &[chunk.len(), l_i, model.cfg.channels], false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, diag) = model.forward(&mut g, &bound, xt, false, &mut rng)?;
        let ats = diag
            .ats_post_gate
            .ok_or_else(|| CatsError::Data("model has no auxiliary channels".into()))?;
        let a = g.data(ats);
        for b in 0..chunk.len() {
            for ch in 0..n {
                let mut mean = 0.0;
                for t in 0..l_i {
                    mean += a[(b * l_i + t) * n + ch];
                }
                mean /= l_i as f64;
                let mut var = 0.0;
                for t in 0..l_i {
                    let d = a[(b * l_i + t) * n + ch] - mean;
                    var += d * d;
                }
                let sigma = (var / l_i as f64).sqrt().max(crate::model::CONT_STD_EPS);
                let mut e = 0.0;
                for t in 1..l_i {
                    let d = (a[(b * l_i + t) * n + ch] - a[(b * l_i + t - 1) * n + ch]) / sigma;
                    e += d * d;
                }
                energy[ch] += e / l_i as f64;
            }
        }
    }
    for e in energy.iter_mut() {
        *e /= count as f64;
    }
    let mean_energy = energy.iter().sum::<f64>() / n as f64;
    Ok(SmoothnessReport {
        per_channel_energy: energy,
        mean_energy,
        windows: count,
    })
}

/// Convenience: forecasting MSE on the validation split (selection metric).
pub fn validation_mse(model: &CatsModel, frame: &SeriesFrame, batch: usize) -> Result<f64> {
    let windows = make_windows(
        frame,
        Split::Val,
        model.cfg.input_len,
        model.cfg.horizon,
        1,
    )?;
    forecast_mse(model, &windows, batch)
}
