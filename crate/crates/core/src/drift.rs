//! Drift detection with the 1-D Wasserstein distance and layer-freezing
//! incremental updates of a trained estimator.

use std::io::Write;
use std::path::Path;

use ndarray::{ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::estimator::{train_with_lr, EstimatorError, EstimatorModel, TrainConfig, TrainReport};
use crate::stats;

#[derive(Debug, thiserror::Error)]
pub enum DriftError {
    #[error("sample set is empty")]
    Empty,
    #[error("cannot cut {samples} time steps into {windows} windows")]
    TooManyWindows { windows: usize, samples: usize },
    #[error("pools have {training} and {new} nodes")]
    NodeMismatch { training: usize, new: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = DriftError> = std::result::Result<T, E>;

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    v
}

/// W1 between two sorted samples: integral of `|Qa(u) - Qb(u)|` over the
/// piecewise-constant quantile functions.
fn wasserstein_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut u = 0.0;
    let mut total = 0.0;
    while i < a.len() && j < b.len() {
        let next_a = (i + 1) as f64 / n;
        let next_b = (j + 1) as f64 / m;
        let next = next_a.min(next_b);
        total += (a[i] - b[j]).abs() * (next - u);
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    total
}

/// 1-Wasserstein distance between the empirical distributions of `a` and `b`.
/// Sizes may differ.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(DriftError::Empty);
    }
    Ok(wasserstein_sorted(&sorted(a), &sorted(b)))
}

/// How a multi-node magnitude pool is reduced to one-dimensional samples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolMode {
    /// Every node's samples go into one pool.
    #[default]
    Flattened,
    /// W1 per node, averaged over nodes.
    PerNode,
}

fn pool_distance(a: ArrayView2<f64>, b: ArrayView2<f64>, mode: PoolMode) -> Result<f64> {
    match mode {
        PoolMode::Flattened => wasserstein_1d(&a.iter().copied().collect::<Vec<_>>(), &b.iter().copied().collect::<Vec<_>>()),
        PoolMode::PerNode => {
            let mut sum = 0.0;
            for (ca, cb) in a.axis_iter(Axis(1)).zip(b.axis_iter(Axis(1))) {
                sum += wasserstein_1d(&ca.to_vec(), &cb.to_vec())?;
            }
            Ok(sum / a.ncols() as f64)
        }
    }
}

/// Row ranges of `n_v` contiguous windows over `t` time steps; sizes differ
/// by at most one.
pub fn window_bounds(t: usize, n_v: usize) -> Result<Vec<(usize, usize)>> {
    if n_v == 0 || n_v > t {
        return Err(DriftError::TooManyWindows { windows: n_v, samples: t });
    }
    Ok((0..n_v).map(|i| (i * t / n_v, (i + 1) * t / n_v)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftIndicator {
    pub n_v: usize,
    /// W1 between each training window and the new pool.
    pub distances: Vec<f64>,
    pub tt: f64,
    pub threshold: Option<f64>,
}

impl DriftIndicator {
    /// `tt > tt*`; false while no threshold is set.
    pub fn triggered(&self) -> bool {
        self.threshold.is_some_and(|t| self.tt > t)
    }

    pub fn with_threshold(mut self, threshold: f64) -> DriftIndicator {
        self.threshold = Some(threshold);
        self
    }

    /// One row per window: `window,w_i,tt,tt_star,triggered`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["window", "w_i", "tt", "tt_star", "triggered"])?;
        let star = self.threshold.map(|t| t.to_string()).unwrap_or_default();
        for (i, d) in self.distances.iter().enumerate() {
            w.write_record([
                (i + 1).to_string(),
                d.to_string(),
                self.tt.to_string(),
                star.clone(),
                self.triggered().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Cut `training` (time x node) into `n_v` chronological windows and sum
/// their distances to `new`.
pub fn drift_indicator(training: ArrayView2<f64>, new: ArrayView2<f64>, n_v: usize, mode: PoolMode) -> Result<DriftIndicator> {
    if training.ncols() != new.ncols() {
        return Err(DriftError::NodeMismatch { training: training.ncols(), new: new.ncols() });
    }
    if new.is_empty() || training.is_empty() {
        return Err(DriftError::Empty);
    }
    let bounds = window_bounds(training.nrows(), n_v)?;
    let distances = bounds
        .iter()
        .map(|&(s, e)| pool_distance(training.slice(ndarray::s![s..e, ..]), new, mode))
        .collect::<Result<Vec<_>>>()?;
    Ok(DriftIndicator { n_v, tt: distances.iter().sum(), distances, threshold: None })
}

/// Self-calibrated threshold. Each training window in turn plays the new
/// pool against the other `n_v - 1`; the resulting sums are rescaled by
/// `n_v / (n_v - 1)` and the threshold is their mean plus three standard
/// deviations. Returns `(threshold, leave-one-out tt values)`.
pub fn calibrate_threshold(training: ArrayView2<f64>, n_v: usize, mode: PoolMode) -> Result<(f64, Vec<f64>)> {
    if n_v < 2 {
        return Err(DriftError::InvalidConfig("threshold calibration needs at least two windows".into()));
    }
    let bounds = window_bounds(training.nrows(), n_v)?;
    let windows: Vec<_> = bounds.iter().map(|&(s, e)| training.slice(ndarray::s![s..e, ..])).collect();
    let scale = n_v as f64 / (n_v - 1) as f64;
    let mut values = Vec::with_capacity(n_v);
    for (j, held) in windows.iter().enumerate() {
        let mut tt = 0.0;
        for (i, w) in windows.iter().enumerate() {
            if i != j {
                tt += pool_distance(*w, *held, mode)?;
            }
        }
        values.push(tt * scale);
    }
    Ok((stats::mean(&values) + 3.0 * stats::std_dev(&values), values))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IlConfig {
    /// 1-based layer indices held fixed during the update.
    pub frozen: Vec<usize>,
    pub lr: f64,
    /// Per-round learning-rate decay, `lr_k = gamma^k * lr`.
    pub gamma: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for IlConfig {
    fn default() -> Self {
        IlConfig { frozen: vec![4, 5, 6], lr: 5e-6, gamma: 1.0, max_epochs: 1000, batch_size: 25, weight_decay: 1e-4, seed: 0 }
    }
}

impl IlConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DriftError::InvalidConfig(m.to_string()));
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive");
        }
        Ok(())
    }

    /// Learning rate of update round `round` (0-based).
    pub fn lr_at(&self, round: u32) -> f64 {
        self.lr * self.gamma.powi(round as i32)
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.max_epochs,
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct UpdateEvent {
    pub round: u32,
    pub lr: f64,
    pub frozen: Vec<usize>,
    pub epochs: usize,
    pub samples: usize,
    pub final_train_loss: f64,
    pub final_test_loss: Option<f64>,
    pub duration_secs: f64,
}

#[derive(Debug, Clone)]
pub struct UpdateOutcome {
    pub model: EstimatorModel,
    pub report: TrainReport,
    pub event: UpdateEvent,
}

/// Fine-tune a copy of `model` on new data with the layers in `cfg.frozen`
/// held fixed. The input model is left untouched; the returned model keeps the
/// input's freeze flags and its scaler.
pub fn incremental_update(
    model: &EstimatorModel,
    features: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    test: Option<(ArrayView2<f64>, ArrayView2<f64>)>,
    cfg: &IlConfig,
    round: u32,
) -> Result<UpdateOutcome> {
    cfg.validate()?;
    let mut updated = model.clone();
    let original_flags = model.frozen_layers();
    updated.set_frozen(&cfg.frozen)?;
    let lr = cfg.lr_at(round);
    let report = train_with_lr(&mut updated, features, targets, test, &cfg.train_config(), lr)?;
    updated.set_frozen(&original_flags)?;
    let event = UpdateEvent {
        round,
        lr,
        frozen: cfg.frozen.clone(),
        epochs: report.curve.len(),
        samples: features.nrows(),
        final_train_loss: report.final_train_loss(),
        final_test_loss: report.final_test_loss(),
        duration_secs: report.duration_secs,
    };
    Ok(UpdateOutcome { model: updated, report, event })
}

/// Append `event` as one JSON line.
pub fn append_update_log(path: impl AsRef<Path>, event: &UpdateEvent) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(event)?)?;
    Ok(())
}
