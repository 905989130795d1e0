//! Data ingestion, standardization, chronological splitting, window
//! extraction, and synthetic series generation.

use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-variable standardization statistics, frozen from the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
}

/// An `m`-variable, `t`-step real-valued series.
///
/// Values are stored row-major per variable: `values[v * t + i]` is variable
/// `v` at time `i`. `stats` is populated once the frame has been
/// standardized.
#[derive(Debug, Clone)]
pub struct TimeSeriesFrame {
    pub names: Vec<String>,
    values: Vec<f64>,
    n_vars: usize,
    len: usize,
    pub timestamps: Option<Vec<f64>>,
    /// Indices into `names` of the forecast targets.
    pub targets: Vec<usize>,
    pub stats: Option<Vec<Stats>>,
}

impl TimeSeriesFrame {
    pub fn new(names: Vec<String>, values: Vec<f64>, targets: Vec<usize>) -> Result<Self> {
        let n_vars = names.len();
        if n_vars == 0 || values.len() % n_vars != 0 || values.is_empty() {
            return Err(Error::Data("frame requires at least one variable and one step".into()));
        }
        if targets.is_empty() || targets.iter().any(|&t| t >= n_vars) {
            return Err(Error::Data("target indices out of range".into()));
        }
        let len = values.len() / n_vars;
        Ok(TimeSeriesFrame {
            names,
            values,
            n_vars,
            len,
            timestamps: None,
            targets,
            stats: None,
        })
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn var(&self, v: usize) -> &[f64] {
        &self.values[v * self.len..(v + 1) * self.len]
    }

    pub fn target_names(&self) -> Vec<String> {
        self.targets.iter().map(|&v| self.names[v].clone()).collect()
    }

    /// Population mean/std per variable, with the zero-variance guard
    /// `std = max(std, 1e-8)`. Call on the training split only.
    pub fn fit_stats(&self) -> Vec<Stats> {
        (0..self.n_vars)
            .map(|v| {
                let col = self.var(v);
                let mean = col.iter().sum::<f64>() / col.len() as f64;
                let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
                    / col.len() as f64;
                let mut std = var.sqrt();
                if std < 1e-8 {
                    eprintln!(
                        "warning: variable {:?} has zero variance; guarding std at 1e-8",
                        self.names[v]
                    );
                    std = 1e-8;
                }
                Stats { mean, std }
            })
            .collect()
    }

    /// Returns a z-scored copy using the given (training-split) statistics.
    pub fn standardized(&self, stats: &[Stats]) -> Result<TimeSeriesFrame> {
        if stats.len() != self.n_vars {
            return Err(Error::Data(format!(
                "got {} stats for {} variables",
                stats.len(),
                self.n_vars
            )));
        }
        let mut out = self.clone();
        for v in 0..self.n_vars {
            let Stats { mean, std } = stats[v];
            for x in &mut out.values[v * self.len..(v + 1) * self.len] {
                *x = (*x - mean) / std;
            }
        }
        out.stats = Some(stats.to_vec());
        Ok(out)
    }

    /// Contiguous chronological segments, train earliest. Ratios must be
    /// positive and sum to one; every segment must be at least `min_len`
    /// steps long.
    pub fn split(
        &self,
        ratios: [f64; 3],
        min_len: usize,
    ) -> Result<(TimeSeriesFrame, TimeSeriesFrame, TimeSeriesFrame)> {
        if ratios.iter().any(|&r| r <= 0.0) {
            return Err(Error::Data(format!(
                "split ratios must be positive, got {ratios:?}"
            )));
        }
        let sum: f64 = ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Data(format!("split ratios must sum to 1, got {sum}")));
        }
        let n_train = (self.len as f64 * ratios[0]).floor() as usize;
        let n_val = (self.len as f64 * ratios[1]).floor() as usize;
        let n_test = self.len - n_train - n_val;
        for (name, n) in [("train", n_train), ("validation", n_val), ("test", n_test)] {
            if n < min_len {
                return Err(Error::Data(format!(
                    "{name} segment has {n} steps, need at least {min_len}"
                )));
            }
        }
        Ok((
            self.slice_time(0, n_train),
            self.slice_time(n_train, n_train + n_val),
            self.slice_time(n_train + n_val, self.len),
        ))
    }

    fn slice_time(&self, start: usize, end: usize) -> TimeSeriesFrame {
        let len = end - start;
        let mut values = Vec::with_capacity(self.n_vars * len);
        for v in 0..self.n_vars {
            values.extend_from_slice(&self.var(v)[start..end]);
        }
        TimeSeriesFrame {
            names: self.names.clone(),
            values,
            n_vars: self.n_vars,
            len,
            timestamps: self
                .timestamps
                .as_ref()
                .map(|ts| ts[start..end].to_vec()),
            targets: self.targets.clone(),
            stats: self.stats.clone(),
        }
    }
}

/// Loads a CSV with a header row. A leading column named `timestamp`
/// (case-insensitive) is kept as the time index; every other column must be
/// numeric. Missing cells are forward-filled; a missing value with no
/// predecessor is an error.
///
/// `target_columns` selects the forecast targets; empty means "all columns".
pub fn load_csv(path: &Path, target_columns: &[String]) -> Result<TimeSeriesFrame> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.to_string())
        .collect();
    if headers.is_empty() {
        return Err(Error::Data(format!("{}: no header row", path.display())));
    }
    let has_timestamp = headers
        .first()
        .map(|h| h.eq_ignore_ascii_case("timestamp"))
        .unwrap_or(false);
    let var_offset = usize::from(has_timestamp);
    let names: Vec<String> = headers[var_offset..].to_vec();
    if names.is_empty() {
        return Err(Error::Data(format!(
            "{}: no numeric columns besides the timestamp",
            path.display()
        )));
    }

    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    let mut timestamps: Vec<f64> = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != headers.len() {
            return Err(Error::Data(format!(
                "{}: row {} has {} fields, expected {}",
                path.display(),
                row_idx + 2,
                record.len(),
                headers.len()
            )));
        }
        if has_timestamp {
            let cell = record.get(0).unwrap_or("");
            let ts = cell.parse::<f64>().map_err(|_| {
                Error::Data(format!(
                    "{}: row {} column \"timestamp\": cannot parse {cell:?}",
                    path.display(),
                    row_idx + 2
                ))
            })?;
            timestamps.push(ts);
        }
        for (v, name) in names.iter().enumerate() {
            let cell = record.get(v + var_offset).unwrap_or("");
            if cell.is_empty() {
                match columns[v].last().copied() {
                    Some(prev) => columns[v].push(prev),
                    None => {
                        return Err(Error::Data(format!(
                            "{}: row {} column {name:?} is missing with no earlier value to forward-fill",
                            path.display(),
                            row_idx + 2
                        )))
                    }
                }
            } else {
                let value = cell.parse::<f64>().map_err(|_| {
                    Error::Data(format!(
                        "{}: row {} column {name:?}: cannot parse {cell:?}",
                        path.display(),
                        row_idx + 2
                    ))
                })?;
                columns[v].push(value);
            }
        }
    }
    let len = columns[0].len();
    if len == 0 {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }

    let targets: Vec<usize> = if target_columns.is_empty() {
        (0..names.len()).collect()
    } else {
        target_columns
            .iter()
            .map(|t| {
                names.iter().position(|n| n == t).ok_or_else(|| {
                    Error::Data(format!(
                        "target column {t:?} not found; available: {names:?}"
                    ))
                })
            })
            .collect::<Result<Vec<usize>>>()?
    };

    let mut values = Vec::with_capacity(names.len() * len);
    for col in &columns {
        values.extend_from_slice(col);
    }
    let mut frame = TimeSeriesFrame::new(names, values, targets)?;
    frame.timestamps = if has_timestamp { Some(timestamps) } else { None };
    Ok(frame)
}

/// Writes a frame to CSV (header row, one column per variable).
pub fn write_csv(frame: &TimeSeriesFrame, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = Vec::new();
    if frame.timestamps.is_some() {
        header.push("timestamp".to_string());
    }
    header.extend(frame.names.iter().cloned());
    writer.write_record(&header)?;
    for i in 0..frame.len() {
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        if let Some(ts) = &frame.timestamps {
            row.push(format!("{}", ts[i]));
        }
        for v in 0..frame.n_vars() {
            row.push(format!("{}", frame.var(v)[i]));
        }
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Sliding context/target windows over a frame.
///
/// Window `i` starts at `i * stride`; `X` covers all variables over
/// `context` steps and `Y` covers the target variables over the following
/// `horizon` steps, immediately adjacent.
#[derive(Debug, Clone)]
pub struct WindowSet {
    pub frame: TimeSeriesFrame,
    starts: Vec<usize>,
    pub context: usize,
    pub horizon: usize,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    /// Returns `(X, Y)` for window `i` as `f32` tensors of shapes
    /// `[m, context]` and `[n, horizon]`.
    pub fn window(&self, i: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let start = *self
            .starts
            .get(i)
            .ok_or_else(|| Error::Data(format!("window index {i} out of range")))?;
        let m = self.frame.n_vars();
        let n = self.frame.targets.len();
        let mut x = Vec::with_capacity(m * self.context);
        for v in 0..m {
            x.extend(
                self.frame.var(v)[start..start + self.context]
                    .iter()
                    .map(|&f| f as f32),
            );
        }
        let y_start = start + self.context;
        let mut y = Vec::with_capacity(n * self.horizon);
        for &v in &self.frame.targets {
            y.extend(
                self.frame.var(v)[y_start..y_start + self.horizon]
                    .iter()
                    .map(|&f| f as f32),
            );
        }
        Ok((
            Tensor::from_vec(x, vec![m, self.context])?,
            Tensor::from_vec(y, vec![n, self.horizon])?,
        ))
    }

    /// Stacks the selected windows into `[B, m, context]` and
    /// `[B, n, horizon]` batches.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let m = self.frame.n_vars();
        let n = self.frame.targets.len();
        let mut xs = Vec::with_capacity(indices.len() * m * self.context);
        let mut ys = Vec::with_capacity(indices.len() * n * self.horizon);
        for &i in indices {
            let (x, y) = self.window(i)?;
            xs.extend_from_slice(x.data());
            ys.extend_from_slice(y.data());
        }
        Ok((
            Tensor::from_vec(xs, vec![indices.len(), m, self.context])?,
            Tensor::from_vec(ys, vec![indices.len(), n, self.horizon])?,
        ))
    }
}

/// Builds the window index over a frame. Window count is
/// `(t - context - horizon) / stride + 1`.
pub fn make_windows(
    frame: &TimeSeriesFrame,
    context: usize,
    horizon: usize,
    stride: usize,
) -> Result<WindowSet> {
    if context < 1 || horizon < 1 || stride < 1 {
        return Err(Error::Data(
            "context, horizon and stride must all be >= 1".into(),
        ));
    }
    if frame.len() < context + horizon {
        return Err(Error::Data(format!(
            "series of {} steps is too short for context {} + horizon {}",
            frame.len(),
            context,
            horizon
        )));
    }
    let count = (frame.len() - context - horizon) / stride + 1;
    Ok(WindowSet {
        frame: frame.clone(),
        starts: (0..count).map(|i| i * stride).collect(),
        context,
        horizon,
    })
}

/// De-standardizes a `[.., n, p]` tensor in place; `stats[j]` applies to the
/// variables along the second-to-last axis.
pub fn destandardize_tensor(t: &mut Tensor<f32>, stats: &[Stats]) -> Result<()> {
    let shape = t.shape().to_vec();
    if shape.len() < 2 {
        return Err(Error::Data("destandardize expects at least 2 axes".into()));
    }
    let p = shape[shape.len() - 1];
    let n = shape[shape.len() - 2];
    if n != stats.len() {
        return Err(Error::Data(format!(
            "got {} stats for {} variables",
            stats.len(),
            n
        )));
    }
    let outer: usize = shape[..shape.len() - 2].iter().product();
    let data = t.data_mut();
    for o in 0..outer {
        for (v, st) in stats.iter().enumerate() {
            let (mean, std) = (st.mean as f32, st.std as f32);
            for x in &mut data[(o * n + v) * p..(o * n + v + 1) * p] {
                *x = *x * std + mean;
            }
        }
    }
    Ok(())
}

/// Synthetic series kinds. Each generator is a pure function of
/// `(kind, length, seed)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// Seasonal sine (period 24, amplitude 2) plus an AR(2) residual:
    /// `x_t = 2 sin(2 pi t / 24) + u_t`, `u_t = 0.55 u_{t-1} + 0.25 u_{t-2} + 0.3 eps_t`.
    Ar2Seasonal,
    /// Two-state Markov chain (stay probability 0.98) selecting between two
    /// AR(1) processes with means -4 and +4:
    /// `u_t = mu_r + 0.9 (u_{t-1} - mu_r) + 0.5 eps_t`. Emits a second,
    /// observable covariate `regime_cov = sign(mu_r) + 0.2 eps'_t`. The
    /// marginal of `value` is bimodal by construction.
    RegimeSwitchBimodal,
    /// `x_t = x_{t-1} + eps_t`, `x_0 = 0`.
    RandomWalk,
    /// Every cell equals 5.
    Constant,
}

pub const SYNTH_KINDS: [&str; 4] = [
    "ar2_seasonal",
    "regime_switch_bimodal",
    "random_walk",
    "constant",
];

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ar2_seasonal" => Ok(SynthKind::Ar2Seasonal),
            "regime_switch_bimodal" => Ok(SynthKind::RegimeSwitchBimodal),
            "random_walk" => Ok(SynthKind::RandomWalk),
            "constant" => Ok(SynthKind::Constant),
            other => Err(Error::Data(format!(
                "unknown synthetic kind {other:?}; known kinds: {SYNTH_KINDS:?}"
            ))),
        }
    }
}

impl SynthKind {
    /// Stationary standard deviation of one regime component of the bimodal
    /// generator; used by tests to express mode separation in component
    /// standard deviations.
    pub fn bimodal_component_std() -> f64 {
        0.5 / (1.0f64 - 0.9 * 0.9).sqrt()
    }

    pub fn bimodal_means() -> (f64, f64) {
        (-4.0, 4.0)
    }
}

/// Generates a synthetic frame of `t` steps.
pub fn synth_generate(kind: SynthKind, t: usize, seed: u64) -> Result<TimeSeriesFrame> {
    if t == 0 {
        return Err(Error::Data("length must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        SynthKind::Ar2Seasonal => {
            let (phi1, phi2, sigma, amp, period) = (0.55, 0.25, 0.3, 2.0, 24.0);
            let mut u_prev = 0.0f64;
            let mut u_prev2 = 0.0f64;
            let mut values = Vec::with_capacity(t);
            for i in 0..t {
                let eps: f64 = rng.sample(rand_distr::StandardNormal);
                let u = phi1 * u_prev + phi2 * u_prev2 + sigma * eps;
                u_prev2 = u_prev;
                u_prev = u;
                let season = amp * (2.0 * std::f64::consts::PI * i as f64 / period).sin();
                values.push(season + u);
            }
            TimeSeriesFrame::new(vec!["value".into()], values, vec![0])
        }
        SynthKind::RegimeSwitchBimodal => {
            let (stay, phi, sigma, cov_noise) = (0.98, 0.9, 0.5, 0.2);
            let (mu_lo, mu_hi) = SynthKind::bimodal_means();
            let mut regime: bool = rng.random_bool(0.5);
            let mut u = if regime { mu_hi } else { mu_lo };
            let mut value = Vec::with_capacity(t);
            let mut cov = Vec::with_capacity(t);
            for _ in 0..t {
                if !rng.random_bool(stay) {
                    regime = !regime;
                }
                let mu = if regime { mu_hi } else { mu_lo };
                let eps: f64 = rng.sample(rand_distr::StandardNormal);
                u = mu + phi * (u - mu) + sigma * eps;
                value.push(u);
                let eps2: f64 = rng.sample(rand_distr::StandardNormal);
                cov.push(if regime { 1.0 } else { -1.0 } + cov_noise * eps2);
            }
            let mut values = value;
            values.extend_from_slice(&cov);
            TimeSeriesFrame::new(
                vec!["value".into(), "regime_cov".into()],
                values,
                vec![0],
            )
        }
        SynthKind::RandomWalk => {
            let mut x = 0.0f64;
            let mut values = Vec::with_capacity(t);
            for _ in 0..t {
                let eps: f64 = rng.sample(rand_distr::StandardNormal);
                x += eps;
                values.push(x);
            }
            TimeSeriesFrame::new(vec!["value".into()], values, vec![0])
        }
        SynthKind::Constant => {
            TimeSeriesFrame::new(vec!["value".into()], vec![5.0; t], vec![0])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn temp_csv(content: &str) -> tempfile::NamedTempFile {
        let mut file = tempfile::Builder::new().suffix(".csv").tempfile().unwrap();
        file.write_all(content.as_bytes()).unwrap();
        file.flush().unwrap();
        file
    }

    #[test]
    fn loads_a_plain_three_column_file() {
        let file = temp_csv("a,b,c\n1,2,3\n4,5,6\n7,8,9\n10,11,12\n13,14,15\n");
        let frame = load_csv(file.path(), &[]).unwrap();
        assert_eq!(frame.n_vars(), 3);
        assert_eq!(frame.len(), 5);
        assert_eq!(frame.var(1), &[2.0, 5.0, 8.0, 11.0, 14.0]);
        assert_eq!(frame.targets, vec![0, 1, 2]);
    }

    #[test]
    fn timestamp_column_is_detected_by_name() {
        let file = temp_csv("timestamp,x\n100,1.5\n101,2.5\n");
        let frame = load_csv(file.path(), &[]).unwrap();
        assert_eq!(frame.n_vars(), 1);
        assert_eq!(frame.timestamps.as_deref(), Some(&[100.0, 101.0][..]));
    }

    #[test]
    fn missing_cells_forward_fill_and_leading_gap_errors() {
        let file = temp_csv("a,b\n1,5\n,6\n3,\n");
        let frame = load_csv(file.path(), &[]).unwrap();
        assert_eq!(frame.var(0), &[1.0, 1.0, 3.0]);
        assert_eq!(frame.var(1), &[5.0, 6.0, 6.0]);

        let bad = temp_csv("a,b\n,5\n2,6\n");
        let err = load_csv(bad.path(), &[]).unwrap_err().to_string();
        assert!(err.contains("forward-fill"), "{err}");
        assert!(err.contains("\"a\""), "{err}");
    }

    #[test]
    fn unparseable_cell_reports_row_and_column() {
        let file = temp_csv("a,b\n1,2\n3,oops\n");
        let err = load_csv(file.path(), &[]).unwrap_err().to_string();
        assert!(err.contains("row 3"), "{err}");
        assert!(err.contains("\"b\""), "{err}");
    }

    #[test]
    fn empty_file_and_absent_target_error() {
        let empty = temp_csv("a,b\n");
        assert!(load_csv(empty.path(), &[]).is_err());

        let file = temp_csv("a,b\n1,2\n");
        let err = load_csv(file.path(), &["latency".to_string()])
            .unwrap_err()
            .to_string();
        assert!(err.contains("latency"), "{err}");
    }

    #[test]
    fn standardize_roundtrip_and_training_stats_oracle() {
        let frame = synth_generate(SynthKind::Ar2Seasonal, 2000, 3).unwrap();
        let stats = frame.fit_stats();
        let standardized = frame.standardized(&stats).unwrap();
        // direct recomputation: standardized training split has mean ~0 and
        // std ~1 per variable
        for v in 0..frame.n_vars() {
            let col = standardized.var(v);
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
                / col.len() as f64;
            assert!(mean.abs() < 1e-9, "mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-6, "std {}", var.sqrt());
        }
        // round trip within 1e-6 relative
        for v in 0..frame.n_vars() {
            for (orig, std_v) in frame.var(v).iter().zip(standardized.var(v)) {
                let back = std_v * stats[v].std + stats[v].mean;
                assert!((back - orig).abs() <= 1e-6 * orig.abs().max(1.0));
            }
        }
    }

    #[test]
    fn constant_column_standardizes_to_zeros_under_guard() {
        let frame = synth_generate(SynthKind::Constant, 50, 0).unwrap();
        let stats = frame.fit_stats();
        assert_eq!(stats[0].std, 1e-8);
        let standardized = frame.standardized(&stats).unwrap();
        assert!(standardized.var(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn split_sizes_and_boundaries() {
        let frame = synth_generate(SynthKind::RandomWalk, 1000, 1).unwrap();
        let (train, val, test) = frame.split([0.8, 0.1, 0.1], 10).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (800, 100, 100));
        // contiguous, non-overlapping, reproducible
        assert_eq!(train.var(0)[799], frame.var(0)[799]);
        assert_eq!(val.var(0)[0], frame.var(0)[800]);
        assert_eq!(test.var(0)[0], frame.var(0)[900]);
        let (train2, _, _) = frame.split([0.8, 0.1, 0.1], 10).unwrap();
        assert_eq!(train.var(0), train2.var(0));
    }

    #[test]
    fn degenerate_split_ratios_error() {
        let frame = synth_generate(SynthKind::RandomWalk, 100, 1).unwrap();
        assert!(frame.split([1.0, 0.0, 0.0], 5).is_err());
        assert!(frame.split([0.5, 0.3, 0.1], 5).is_err());
        // a positive ratio that still yields a too-short segment
        assert!(frame.split([0.98, 0.01, 0.01], 5).is_err());
    }

    #[test]
    fn window_counts_match_formula_and_enumeration() {
        let frame = synth_generate(SynthKind::RandomWalk, 130, 2).unwrap();
        assert_eq!(make_windows(&frame, 120, 10, 1).unwrap().len(), 1);

        let frame = synth_generate(SynthKind::RandomWalk, 200, 2).unwrap();
        assert_eq!(make_windows(&frame, 120, 10, 1).unwrap().len(), 71);
        assert_eq!(make_windows(&frame, 120, 10, 10).unwrap().len(), 8);

        // enumeration oracle
        for (t, c, p, stride) in [(200usize, 120usize, 10usize, 1usize), (200, 120, 10, 10), (131, 120, 10, 3)] {
            let mut count = 0;
            let mut start = 0;
            while start + c + p <= t {
                count += 1;
                start += stride;
            }
            let frame = synth_generate(SynthKind::RandomWalk, t, 5).unwrap();
            assert_eq!(make_windows(&frame, c, p, stride).unwrap().len(), count);
        }

        let short = synth_generate(SynthKind::RandomWalk, 129, 2).unwrap();
        assert!(make_windows(&short, 120, 10, 1).is_err());
    }

    // X and Y are exactly adjacent for every window.
    #[test]
    fn window_pairs_are_adjacent() {
        let frame = synth_generate(SynthKind::RegimeSwitchBimodal, 300, 7).unwrap();
        let ws = make_windows(&frame, 50, 5, 7).unwrap();
        for i in 0..ws.len() {
            let (x, y) = ws.window(i).unwrap();
            assert_eq!(x.shape(), &[2, 50]);
            assert_eq!(y.shape(), &[1, 5]); // targets only
            let start = i * 7;
            for t in 0..50 {
                assert_eq!(x.data()[t], frame.var(0)[start + t] as f32);
            }
            for t in 0..5 {
                assert_eq!(y.data()[t], frame.var(0)[start + 50 + t] as f32);
            }
        }
    }

    #[test]
    fn generators_are_deterministic_in_seed() {
        for kind in [
            SynthKind::Ar2Seasonal,
            SynthKind::RegimeSwitchBimodal,
            SynthKind::RandomWalk,
            SynthKind::Constant,
        ] {
            let a = synth_generate(kind, 500, 11).unwrap();
            let b = synth_generate(kind, 500, 11).unwrap();
            assert_eq!(a.var(0), b.var(0));
            let c = synth_generate(kind, 500, 12).unwrap();
            if kind != SynthKind::Constant {
                assert_ne!(a.var(0), c.var(0));
            }
        }
    }

    #[test]
    fn constant_kind_emits_fives() {
        let frame = synth_generate(SynthKind::Constant, 20, 9).unwrap();
        assert!(frame.var(0).iter().all(|&v| v == 5.0));
    }

    #[test]
    fn unknown_kind_lists_the_valid_ones() {
        let err = "sawtooth".parse::<SynthKind>().unwrap_err().to_string();
        for kind in SYNTH_KINDS {
            assert!(err.contains(kind), "{err}");
        }
    }

    // Histogram of the generator's own output: two modes separated by more
    // than four component standard deviations.
    #[test]
    fn bimodal_marginal_has_two_separated_modes() {
        let frame = synth_generate(SynthKind::RegimeSwitchBimodal, 50_000, 21).unwrap();
        let values = frame.var(0);
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let bins = 80usize;
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0usize; bins];
        for &v in values {
            let idx = (((v - lo) / width) as usize).min(bins - 1);
            counts[idx] += 1;
        }
        // local maxima with some smoothing
        let smooth: Vec<f64> = (0..bins)
            .map(|i| {
                let a = counts[i.saturating_sub(1)] as f64;
                let b = counts[i] as f64;
                let c = counts[(i + 1).min(bins - 1)] as f64;
                (a + b + c) / 3.0
            })
            .collect();
        let mut peaks: Vec<usize> = Vec::new();
        for i in 1..bins - 1 {
            if smooth[i] > smooth[i - 1] && smooth[i] >= smooth[i + 1] && smooth[i] > 50.0 {
                peaks.push(i);
            }
        }
        assert!(peaks.len() >= 2, "found peaks at {peaks:?}");
        let first = lo + (peaks[0] as f64 + 0.5) * width;
        let last = lo + (*peaks.last().unwrap() as f64 + 0.5) * width;
        let separation = last - first;
        assert!(
            separation > 4.0 * SynthKind::bimodal_component_std(),
            "separation {separation} vs component std {}",
            SynthKind::bimodal_component_std()
        );
    }

    #[test]
    fn csv_roundtrip_via_write() {
        let frame = synth_generate(SynthKind::RegimeSwitchBimodal, 40, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("series.csv");
        write_csv(&frame, &path).unwrap();
        let back = load_csv(&path, &["value".to_string()]).unwrap();
        assert_eq!(back.names, frame.names);
        assert_eq!(back.len(), frame.len());
        for v in 0..frame.n_vars() {
            for (a, b) in frame.var(v).iter().zip(back.var(v)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn destandardize_tensor_applies_per_variable_stats() {
        let stats = vec![
            Stats { mean: 10.0, std: 2.0 },
            Stats { mean: -5.0, std: 0.5 },
        ];
        let mut t = Tensor::from_vec(vec![1.0f32, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
        destandardize_tensor(&mut t, &stats).unwrap();
        assert_eq!(t.data(), &[12.0, 14.0, -3.5, -3.0]);
    }
}
