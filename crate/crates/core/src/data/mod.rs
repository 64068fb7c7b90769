//! Dataset ingestion, chronological splitting, standardization, windowing,
//! and the training-time input transforms.

pub mod synthetic;

use crate::error::{CatsError, Result};
use rand::Rng;
use std::path::Path;

/// Floor for standard deviations throughout the data pipeline.
pub const STD_EPS: f64 = 1e-8;

/// Which chronological segment windows are drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
    /// Ignore split bounds; window over the whole frame.
    All,
}

/// A T x C time-series table with channel names and chronological split markers.
#[derive(Clone, Debug)]
pub struct SeriesFrame {
    /// Row-major T x C values.
    values: Vec<f64>,
    channel_names: Vec<String>,
    /// (train_end, val_end) row indices; rows [0, train_end) are train,
    /// [train_end, val_end) validation, [val_end, T) test.
    split_bounds: Option<(usize, usize)>,
}

impl SeriesFrame {
    pub fn new(values: Vec<f64>, channel_names: Vec<String>) -> Result<Self> {
        if channel_names.is_empty() || values.len() % channel_names.len() != 0 {
            return Err(CatsError::Data(format!(
                "values length {} not a multiple of channel count {}",
                values.len(),
                channel_names.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CatsError::Data("non-finite value in series".into()));
        }
        Ok(SeriesFrame {
            values,
            channel_names,
            split_bounds: None,
        })
    }

    pub fn rows(&self) -> usize {
        self.values.len() / self.channel_names.len()
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, t: usize, c: usize) -> f64 {
        self.values[t * self.channels() + c]
    }

    pub fn split_bounds(&self) -> Option<(usize, usize)> {
        self.split_bounds
    }

    /// Chronological split at floor(r_train * T) and floor((r_train+r_val) * T).
    ///
    /// `min_span` is the window span (input length + horizon) the caller
    /// intends to use; the train segment must hold at least one full window.
    pub fn split(&mut self, ratios: (f64, f64, f64), min_span: usize) -> Result<()> {
        let (r0, r1, r2) = ratios;
        if r0 <= 0.0 || r1 <= 0.0 || r2 <= 0.0 || (r0 + r1 + r2 - 1.0).abs() > 1e-9 {
            return Err(CatsError::Config(format!(
                "split ratios must be positive and sum to 1, got {ratios:?}"
            )));
        }
        let t = self.rows();
        // Guard against decimal ratios landing just under an integer
        // (0.7 + 0.1 = 0.799.. in binary floating point).
        let train_end = (r0 * t as f64 + 1e-9).floor() as usize;
        let val_end = ((r0 + r1) * t as f64 + 1e-9).floor() as usize;
        if train_end < min_span {
            let min_t = (min_span as f64 / r0).ceil() as usize;
            return Err(CatsError::Data(format!(
                "insufficient rows: T={t} gives a train segment of {train_end} rows, \
                 need at least {min_span}; minimum T is {min_t}"
            )));
        }
        if train_end == 0 || val_end <= train_end || val_end >= t {
            return Err(CatsError::Data(format!(
                "degenerate split bounds ({train_end}, {val_end}) for T={t}"
            )));
        }
        self.split_bounds = Some((train_end, val_end));
        Ok(())
    }

    /// Write as CSV: header row of channel names, one row per timestep.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.channel_names)?;
        let c = self.channels();
        for t in 0..self.rows() {
            let row: Vec<String> = (0..c).map(|ch| format!("{:.17e}", self.get(t, ch))).collect();
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Load a CSV with a header row; every column except the optional date
/// column becomes a channel, in file order. NaN or unparseable cells are
/// rejected with their row/column position.
pub fn load_csv(path: &Path, date_column: Option<&str>) -> Result<SeriesFrame> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| CatsError::Data(format!("cannot open {}: {e}", path.display())))?;
    let headers = rdr.headers()?.clone();
    let mut keep: Vec<usize> = Vec::new();
    let mut names: Vec<String> = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        if Some(h) == date_column {
            continue;
        }
        keep.push(i);
        names.push(h.to_string());
    }
    if names.is_empty() {
        return Err(CatsError::Data("no numeric channels in CSV".into()));
    }
    let mut values = Vec::new();
    for (row_idx, record) in rdr.records().enumerate() {
        let record = record?;
        for &col in &keep {
            let cell = record.get(col).unwrap_or("");
            let v: f64 = cell.trim().parse().map_err(|_| {
                CatsError::Data(format!(
                    "unparseable cell {cell:?} at row {} column {} ({})",
                    row_idx + 2, // 1-based, counting the header
                    col + 1,
                    headers.get(col).unwrap_or("?")
                ))
            })?;
            if !v.is_finite() {
                return Err(CatsError::Data(format!(
                    "non-finite value at row {} column {}",
                    row_idx + 2,
                    col + 1
                )));
            }
            values.push(v);
        }
    }
    if values.is_empty() {
        return Err(CatsError::Data(format!("{} has no data rows", path.display())));
    }
    SeriesFrame::new(values, names)
}

/// Per-channel z-score transform fitted on the train split only.
#[derive(Clone, Debug)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fit on the frame's train rows (population statistics). Constant
    /// channels get a floored std and a warning.
    pub fn fit(frame: &SeriesFrame) -> Result<Self> {
        let (train_end, _) = frame
            .split_bounds()
            .ok_or_else(|| CatsError::Data("standardizer requires split bounds".into()))?;
        let c = frame.channels();
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for ch in 0..c {
            let mut m = 0.0;
            for t in 0..train_end {
                m += frame.get(t, ch);
            }
            m /= train_end as f64;
            let mut var = 0.0;
            for t in 0..train_end {
                let d = frame.get(t, ch) - m;
                var += d * d;
            }
            var /= train_end as f64;
            let s = var.sqrt();
            if s < STD_EPS {
                log::warn!(
                    "channel {} ({}) is constant on the train split; std floored at {STD_EPS}",
                    ch,
                    frame.channel_names()[ch]
                );
            }
            mean[ch] = m;
            std[ch] = s.max(STD_EPS);
        }
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, frame: &SeriesFrame) -> Result<SeriesFrame> {
        let c = frame.channels();
        if c != self.mean.len() {
            return Err(CatsError::Data("standardizer channel mismatch".into()));
        }
        let mut values = frame.values().to_vec();
        for (i, v) in values.iter_mut().enumerate() {
            let ch = i % c;
            *v = (*v - self.mean[ch]) / self.std[ch];
        }
        let mut out = SeriesFrame::new(values, frame.channel_names().to_vec())?;
        out.split_bounds = frame.split_bounds;
        Ok(out)
    }

    /// Inverse transform of a row-major [.., C] buffer, in place.
    pub fn inverse_values(&self, values: &mut [f64]) {
        let c = self.mean.len();
        for (i, v) in values.iter_mut().enumerate() {
            let ch = i % c;
            *v = *v * self.std[ch] + self.mean[ch];
        }
    }
}

/// A batch of forecasting windows gathered from one frame.
///
/// Inputs are B x L_I x C, targets B x L_P x C; each window's rows are
/// contiguous in the source and targets never cross the split boundary.
#[derive(Clone, Debug)]
pub struct WindowBatch {
    pub x_input: Vec<f64>,
    pub x_target: Vec<f64>,
    pub window_origins: Vec<usize>,
    pub input_len: usize,
    pub horizon: usize,
    pub channels: usize,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.window_origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window_origins.is_empty()
    }

    /// Gather a sub-batch by window indices.
    pub fn gather(&self, idx: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let (ni, np) = (self.input_len * self.channels, self.horizon * self.channels);
        let mut xi = Vec::with_capacity(idx.len() * ni);
        let mut xp = Vec::with_capacity(idx.len() * np);
        for &i in idx {
            xi.extend_from_slice(&self.x_input[i * ni..(i + 1) * ni]);
            xp.extend_from_slice(&self.x_target[i * np..(i + 1) * np]);
        }
        (xi, xp)
    }
}

/// Enumerate windows at the given stride. Validation and test windows may
/// draw input context from earlier rows, but their targets stay inside the
/// requested split.
pub fn make_windows(
    frame: &SeriesFrame,
    split: Split,
    input_len: usize,
    horizon: usize,
    stride: usize,
) -> Result<WindowBatch> {
    if stride == 0 || input_len == 0 || horizon == 0 {
        return Err(CatsError::Config(
            "window stride, input length and horizon must be positive".into(),
        ));
    }
    let t = frame.rows();
    let span = input_len + horizon;
    let (first, last) = match split {
        Split::All => {
            if t < span {
                return Err(CatsError::Data(format!(
                    "frame too short for windows: T={t} < {span}; minimum T is {span}"
                )));
            }
            (0usize, t - span)
        }
        _ => {
            let (train_end, val_end) = frame
                .split_bounds()
                .ok_or_else(|| CatsError::Data("frame has no split bounds".into()))?;
            let (target_lo, target_hi) = match split {
                Split::Train => (0, train_end),
                Split::Val => (train_end, val_end),
                Split::Test => (val_end, t),
                Split::All => unreachable!(),
            };
            // Window origin o: input [o, o+L_I), target [o+L_I, o+L_I+L_P).
            let lo = target_lo.saturating_sub(input_len);
            if target_hi < target_lo + horizon || target_hi < span {
                return Err(CatsError::Data(format!(
                    "{split:?} split has {} target rows, need at least {horizon}",
                    target_hi.saturating_sub(target_lo)
                )));
            }
            let hi = target_hi - span;
            if hi < lo {
                return Err(CatsError::Data(format!(
                    "{split:?} split admits no windows with L_I={input_len}, L_P={horizon}"
                )));
            }
            (lo, hi)
        }
    };
    let c = frame.channels();
    let count = (last - first) / stride + 1;
    let mut wb = WindowBatch {
        x_input: Vec::with_capacity(count * input_len * c),
        x_target: Vec::with_capacity(count * horizon * c),
        window_origins: Vec::with_capacity(count),
        input_len,
        horizon,
        channels: c,
    };
    let vals = frame.values();
    let mut o = first;
    while o <= last {
        wb.x_input
            .extend_from_slice(&vals[o * c..(o + input_len) * c]);
        wb.x_target
            .extend_from_slice(&vals[(o + input_len) * c..(o + span) * c]);
        wb.window_origins.push(o);
        o += stride;
    }
    Ok(wb)
}

/// Subtract each window's last input value per channel. Returns the anchors
/// (B x C) needed to undo the shift.
pub fn last_value_demean(x_input: &mut [f64], input_len: usize, channels: usize) -> Vec<f64> {
    let n = input_len * channels;
    let batch = x_input.len() / n;
    let mut anchors = vec![0.0; batch * channels];
    for b in 0..batch {
        let w = &mut x_input[b * n..(b + 1) * n];
        let (head, last) = w.split_at_mut((input_len - 1) * channels);
        anchors[b * channels..(b + 1) * channels].copy_from_slice(last);
        for row in head.chunks_mut(channels) {
            for (v, a) in row.iter_mut().zip(last.iter()) {
                *v -= a;
            }
        }
        for v in last.iter_mut() {
            *v = 0.0;
        }
    }
    anchors
}

/// Add anchors back onto a forecast (B x L x C).
pub fn remean(values: &mut [f64], anchors: &[f64], channels: usize) {
    let batch = anchors.len() / channels;
    let rows = values.len() / (batch * channels).max(1);
    for b in 0..batch {
        let a = &anchors[b * channels..(b + 1) * channels];
        for r in 0..rows {
            let row = &mut values[(b * rows + r) * channels..(b * rows + r + 1) * channels];
            for (v, &av) in row.iter_mut().zip(a) {
                *v += av;
            }
        }
    }
}

/// Training-time random dropping: with probability `p_drop` per window, zero
/// a prefix of uniformly random length d in [0, L_I) across all channels.
/// Expects demeaned inputs.
pub fn random_drop_prefix(
    x_input: &mut [f64],
    input_len: usize,
    channels: usize,
    p_drop: f64,
    rng: &mut impl Rng,
) {
    let n = input_len * channels;
    let batch = x_input.len() / n;
    for b in 0..batch {
        if rng.random::<f64>() < p_drop {
            let d = rng.random_range(0..input_len);
            x_input[b * n..b * n + d * channels].iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Naive baseline: repeat each channel's last observed input value across
/// the horizon.
pub fn repeat_forecast(
    x_input: &[f64],
    input_len: usize,
    channels: usize,
    horizon: usize,
) -> Vec<f64> {
    let n = input_len * channels;
    let batch = x_input.len() / n;
    let mut out = vec![0.0; batch * horizon * channels];
    for b in 0..batch {
        let last = &x_input[b * n + (input_len - 1) * channels..(b + 1) * n];
        for h in 0..horizon {
            out[(b * horizon + h) * channels..(b * horizon + h + 1) * channels]
                .copy_from_slice(last);
        }
    }
    out
}
