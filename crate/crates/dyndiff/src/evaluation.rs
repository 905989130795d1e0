//! Scoring ensembles with MAE, MSE and CRPS; per-horizon reports, the
//! ten-trial summary, and baseline comparisons.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Stats, TimeSeriesFrame, WindowSet};
use crate::error::{Error, Result};
use crate::forecasting::{forecast_ensemble, ForecastEnsemble, Model};
use crate::tensor::Tensor;

/// Per-element mean across the ensemble paths (accumulated in f64, so an
/// ensemble of identical paths averages back to them exactly).
pub fn point_forecast(ens: &ForecastEnsemble) -> Tensor<f32> {
    let (k, n, p) = (ens.k(), ens.n_vars(), ens.horizon());
    let mut acc = vec![0.0f64; n * p];
    for path in 0..k {
        for (o, &v) in acc
            .iter_mut()
            .zip(&ens.samples.data()[path * n * p..(path + 1) * n * p])
        {
            *o += v as f64;
        }
    }
    let out: Vec<f32> = acc.iter().map(|&v| (v / k as f64) as f32).collect();
    Tensor::from_vec(out, vec![n, p]).expect("shape preserved")
}

pub fn mae(point: &Tensor<f32>, truth: &Tensor<f32>) -> Result<f64> {
    if point.shape() != truth.shape() {
        return Err(Error::ShapeMismatch {
            op: "mae",
            lhs: point.shape().to_vec(),
            rhs: truth.shape().to_vec(),
        });
    }
    let sum: f64 = point
        .data()
        .iter()
        .zip(truth.data())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum();
    Ok(sum / point.numel() as f64)
}

pub fn mse(point: &Tensor<f32>, truth: &Tensor<f32>) -> Result<f64> {
    if point.shape() != truth.shape() {
        return Err(Error::ShapeMismatch {
            op: "mse",
            lhs: point.shape().to_vec(),
            rhs: truth.shape().to_vec(),
        });
    }
    let sum: f64 = point
        .data()
        .iter()
        .zip(truth.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sum / point.numel() as f64)
}

/// CRPS of an empirical sample set against one observation, by the energy
/// identity for the empirical step CDF:
///
/// `mean_i |X_i - x| - (1/2) mean_{i,j} |X_i - X_j|`
///
/// The pairwise term is computed from the sorted samples in `O(K log K)`.
/// With a single sample this reduces exactly to the absolute error.
pub fn crps(samples: &[f64], x: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Evaluate("crps needs at least one sample".into()));
    }
    let k = samples.len() as f64;
    let term1: f64 = samples.iter().map(|s| (s - x).abs()).sum::<f64>() / k;
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    // sum_{i<j} (x_(j) - x_(i)) = sum_r (2r - K + 1) x_(r)
    let mut pair_sum = 0.0;
    for (r, &v) in sorted.iter().enumerate() {
        pair_sum += (2.0 * r as f64 - k + 1.0) * v;
    }
    Ok(term1 - pair_sum / (k * k))
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricRow {
    pub mae: f64,
    pub mse: f64,
    pub crps: f64,
}

/// Per-horizon and pooled scores for one evaluation run.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_horizon: Vec<(usize, MetricRow)>,
    /// Scores pooled over every prediction step `1..=p`.
    pub overall: MetricRow,
    pub n_windows: usize,
    pub config_hash: String,
    pub seeds: Vec<u64>,
}

#[derive(Default, Clone, Copy)]
struct Sums {
    abs: f64,
    sq: f64,
    crps: f64,
    count: f64,
}

impl Sums {
    fn push(&mut self, point: f64, truth: f64, crps_val: f64) {
        let d = point - truth;
        self.abs += d.abs();
        self.sq += d * d;
        self.crps += crps_val;
        self.count += 1.0;
    }

    fn row(&self) -> MetricRow {
        MetricRow {
            mae: self.abs / self.count.max(1.0),
            mse: self.sq / self.count.max(1.0),
            crps: self.crps / self.count.max(1.0),
        }
    }
}

fn score_windows(
    ensembles: &[ForecastEnsemble],
    truths: &[Tensor<f32>],
    horizons: &[usize],
    p: usize,
    config_hash: &str,
    seeds: Vec<u64>,
) -> Result<EvalReport> {
    for &h in horizons {
        if h < 1 || h > p {
            return Err(Error::Evaluate(format!(
                "horizon {h} outside the model's prediction window 1..={p}"
            )));
        }
    }
    let mut per_h: Vec<Sums> = vec![Sums::default(); horizons.len()];
    let mut overall = Sums::default();
    for (ens, truth) in ensembles.iter().zip(truths) {
        let n = ens.n_vars();
        let point = point_forecast(ens);
        for step in 0..p {
            for v in 0..n {
                let pt = point.data()[v * p + step] as f64;
                let tr = truth.data()[v * p + step] as f64;
                let c = crps(&ens.values_at(v, step), tr)?;
                overall.push(pt, tr, c);
                if let Some(hi) = horizons.iter().position(|&h| h == step + 1) {
                    per_h[hi].push(pt, tr, c);
                }
            }
        }
    }
    Ok(EvalReport {
        per_horizon: horizons
            .iter()
            .zip(&per_h)
            .map(|(&h, s)| (h, s.row()))
            .collect(),
        overall: overall.row(),
        n_windows: ensembles.len(),
        config_hash: config_hash.to_string(),
        seeds,
    })
}

fn window_seed(master: u64, window: usize) -> u64 {
    master ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(window as u64 + 1)
}

/// Scores a trained model over every test window: a `K`-path ensemble per
/// window, metrics at each requested horizon plus pooled over all steps,
/// averaged across windows and variables. All scores are in original units.
pub fn evaluate(
    model: &Model,
    test_ws: &WindowSet,
    horizons: &[usize],
    k: usize,
    seed: u64,
    config_hash: &str,
) -> Result<EvalReport> {
    let p = model.denoiser_cfg.horizon;
    let stats = test_ws
        .frame
        .stats
        .clone()
        .ok_or_else(|| Error::Evaluate("test windows must come from a standardized frame".into()))?;
    let target_stats: Vec<Stats> = test_ws.frame.targets.iter().map(|&v| stats[v]).collect();
    let names = test_ws.frame.target_names();

    let mut ensembles = Vec::with_capacity(test_ws.len());
    let mut truths = Vec::with_capacity(test_ws.len());
    for i in 0..test_ws.len() {
        let (x, mut y) = test_ws.window(i)?;
        let ens = forecast_ensemble(
            &x,
            model,
            k,
            window_seed(seed, i),
            test_ws.context - 1,
            names.clone(),
            &target_stats,
        )?;
        crate::data::destandardize_tensor(&mut y, &target_stats)?;
        ensembles.push(ens);
        truths.push(y);
    }
    score_windows(&ensembles, &truths, horizons, p, config_hash, vec![seed])
}

/// Self-test mode: every ensemble is `K` copies of the truth, so all metrics
/// must come out exactly zero.
pub fn evaluate_oracle_identity(
    test_ws: &WindowSet,
    horizons: &[usize],
    k: usize,
    config_hash: &str,
) -> Result<EvalReport> {
    let stats = test_ws
        .frame
        .stats
        .clone()
        .ok_or_else(|| Error::Evaluate("test windows must come from a standardized frame".into()))?;
    let target_stats: Vec<Stats> = test_ws.frame.targets.iter().map(|&v| stats[v]).collect();
    let names = test_ws.frame.target_names();
    let p = test_ws.horizon;
    let mut ensembles = Vec::with_capacity(test_ws.len());
    let mut truths = Vec::with_capacity(test_ws.len());
    for i in 0..test_ws.len() {
        let (_, mut y) = test_ws.window(i)?;
        crate::data::destandardize_tensor(&mut y, &target_stats)?;
        let n = y.shape()[0];
        let mut data = Vec::with_capacity(k * n * p);
        for _ in 0..k {
            data.extend_from_slice(y.data());
        }
        ensembles.push(ForecastEnsemble {
            samples: Tensor::from_vec(data, vec![k, n, p])?,
            origin: test_ws.context - 1,
            variable_names: names.clone(),
        });
        truths.push(y);
    }
    score_windows(&ensembles, &truths, horizons, p, config_hash, vec![])
}

/// Skill floor: the forecast distribution is `K` iid draws from the
/// training-split marginal of each target variable. Returns the pooled CRPS
/// over all test windows, steps and targets, in original units.
pub fn climatology_crps(
    train_original: &TimeSeriesFrame,
    test_ws: &WindowSet,
    k: usize,
    seed: u64,
) -> Result<f64> {
    let stats = test_ws
        .frame
        .stats
        .clone()
        .ok_or_else(|| Error::Evaluate("test windows must come from a standardized frame".into()))?;
    let target_stats: Vec<Stats> = test_ws.frame.targets.iter().map(|&v| stats[v]).collect();
    let p = test_ws.horizon;
    let mut total = 0.0f64;
    let mut count = 0.0f64;
    for i in 0..test_ws.len() {
        let (_, mut y) = test_ws.window(i)?;
        crate::data::destandardize_tensor(&mut y, &target_stats)?;
        let mut rng = ChaCha8Rng::seed_from_u64(window_seed(seed, i));
        for (j, &var) in test_ws.frame.targets.iter().enumerate() {
            let marginal = train_original.var(var);
            for step in 0..p {
                let draws: Vec<f64> = (0..k)
                    .map(|_| marginal[rng.random_range(0..marginal.len())])
                    .collect();
                total += crps(&draws, y.data()[j * p + step] as f64)?;
                count += 1.0;
            }
        }
    }
    Ok(total / count.max(1.0))
}

/// Renders a report as a flat machine-parseable key/value document.
pub fn render_report(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str("format = eval-report-v1\n");
    out.push_str(&format!("n_windows = {}\n", report.n_windows));
    out.push_str(&format!("config_hash = {}\n", report.config_hash));
    let seeds: Vec<String> = report.seeds.iter().map(|s| s.to_string()).collect();
    out.push_str(&format!("seeds = {}\n", seeds.join(",")));
    for (h, row) in &report.per_horizon {
        out.push_str(&format!("horizon.{h}.mae = {:.6}\n", row.mae));
        out.push_str(&format!("horizon.{h}.mse = {:.6}\n", row.mse));
        out.push_str(&format!("horizon.{h}.crps = {:.6}\n", row.crps));
    }
    out.push_str(&format!("overall.mae = {:.6}\n", report.overall.mae));
    out.push_str(&format!("overall.mse = {:.6}\n", report.overall.mse));
    out.push_str(&format!("overall.crps = {:.6}\n", report.overall.crps));
    out
}

/// Mean and standard deviation of each metric across repeated trials.
pub fn render_trials(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    out.push_str("format = eval-trials-v1\n");
    out.push_str(&format!("trials = {}\n", reports.len()));
    if let Some(first) = reports.first() {
        out.push_str(&format!("config_hash = {}\n", first.config_hash));
        let seeds: Vec<String> = reports
            .iter()
            .flat_map(|r| r.seeds.iter().map(|s| s.to_string()))
            .collect();
        out.push_str(&format!("seeds = {}\n", seeds.join(",")));
        let mut emit = |key: &str, values: Vec<f64>| {
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / values.len() as f64;
            out.push_str(&format!(
                "{key}.mean = {:.6}\n{key}.std = {:.6}\n",
                mean,
                var.sqrt()
            ));
        };
        for (idx, (h, _)) in first.per_horizon.iter().enumerate() {
            emit(
                &format!("horizon.{h}.mae"),
                reports.iter().map(|r| r.per_horizon[idx].1.mae).collect(),
            );
            emit(
                &format!("horizon.{h}.mse"),
                reports.iter().map(|r| r.per_horizon[idx].1.mse).collect(),
            );
            emit(
                &format!("horizon.{h}.crps"),
                reports.iter().map(|r| r.per_horizon[idx].1.crps).collect(),
            );
        }
        emit("overall.mae", reports.iter().map(|r| r.overall.mae).collect());
        emit("overall.mse", reports.iter().map(|r| r.overall.mse).collect());
        emit(
            "overall.crps",
            reports.iter().map(|r| r.overall.crps).collect(),
        );
    }
    out
}

/// Side-by-side comparison of named reports, ordered by overall CRPS
/// ascending (lower is better).
pub fn render_comparison(entries: &[(String, EvalReport)]) -> String {
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by(|&a, &b| {
        entries[a]
            .1
            .overall
            .crps
            .partial_cmp(&entries[b].1.overall.crps)
            .expect("finite crps")
    });
    let mut out = String::new();
    out.push_str("format = eval-comparison-v1\n");
    out.push_str("order = crps ascending\n");
    for (rank, &i) in order.iter().enumerate() {
        let (name, report) = &entries[i];
        out.push_str(&format!(
            "rank.{}.method = {}\nrank.{}.crps = {:.6}\nrank.{}.mae = {:.6}\nrank.{}.mse = {:.6}\n",
            rank + 1,
            name,
            rank + 1,
            report.overall.crps,
            rank + 1,
            report.overall.mae,
            rank + 1,
            report.overall.mse,
        ));
    }
    out
}
