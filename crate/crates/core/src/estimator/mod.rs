//! Model-free voltage estimator: input standardization plus a tanh MLP that
//! maps `[P | Q]` of every metered bus to its voltage magnitude.

mod checkpoint;
mod network;

pub use network::{mse_loss, Grads, Layer, Network, Real};

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::stats::Histogram;

#[derive(Debug, thiserror::Error)]
pub enum EstimatorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch} (lr = {lr}, batch size = {batch_size})")]
    NonFinite { epoch: usize, batch: usize, lr: f64, batch_size: usize, loss: f64 },
    #[error("every layer is frozen, nothing to train")]
    AllFrozen,
    #[error("layer {0} does not exist")]
    UnknownLayer(usize),
    #[error("scaler must be fit before use")]
    ScalerNotFit,
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = EstimatorError> = std::result::Result<T, E>;

/// Variance floor below which a feature counts as constant.
pub const SCALER_EPS: f64 = 1e-12;

/// Per-feature standardization fit on the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    pub mean: Array1<f64>,
    /// Population standard deviation; 1 for constant features.
    pub std: Array1<f64>,
    /// Indices of features whose variance fell under [`SCALER_EPS`].
    pub constant: Vec<usize>,
}

impl Scaler {
    pub fn fit(x: ArrayView2<f64>) -> Result<Scaler> {
        if x.nrows() < 2 {
            return Err(EstimatorError::InvalidConfig("scaler needs at least two samples".into()));
        }
        let n = x.nrows() as f64;
        let mean = x.sum_axis(Axis(0)) / n;
        let mut var = Array1::<f64>::zeros(x.ncols());
        for row in x.rows() {
            Zip::from(&mut var).and(&row).and(&mean).for_each(|v, &x, &m| *v += (x - m) * (x - m));
        }
        var /= n;
        let mut constant = Vec::new();
        let std = Array1::from_iter(var.iter().enumerate().map(|(j, &v)| {
            if v <= SCALER_EPS {
                constant.push(j);
                1.0
            } else {
                v.sqrt()
            }
        }));
        // centre constant features on their value so they scale to exact zeros
        let mut mean = mean;
        for &j in &constant {
            mean[j] = x[[0, j]];
        }
        if !constant.is_empty() {
            log::warn!("scaler: {} constant feature(s) {:?}", constant.len(), constant);
        }
        Ok(Scaler { mean, std, constant })
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.width() {
            return Err(EstimatorError::ShapeMismatch(format!("scaler expects {} features, got {}", self.width(), x.ncols())));
        }
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            Zip::from(&mut row).and(&self.mean).and(&self.std).for_each(|v, &m, &s| *v = (*v - m) / s);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Preset {
    #[serde(rename = "ann-0")]
    Ann0,
    #[serde(rename = "ann-1")]
    Ann1,
    #[serde(rename = "ann-2")]
    Ann2,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Ann0 => "ann-0",
            Preset::Ann1 => "ann-1",
            Preset::Ann2 => "ann-2",
        })
    }
}

impl FromStr for Preset {
    type Err = EstimatorError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ann-0" | "ann0" => Ok(Preset::Ann0),
            "ann-1" | "ann1" => Ok(Preset::Ann1),
            "ann-2" | "ann2" => Ok(Preset::Ann2),
            other => Err(EstimatorError::InvalidConfig(format!("unknown preset `{other}`"))),
        }
    }
}

/// Architecture: `layers` weight layers, `hidden` units per hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelSpec {
    pub layers: usize,
    pub hidden: usize,
    pub scaler: bool,
}

impl From<Preset> for ModelSpec {
    fn from(p: Preset) -> ModelSpec {
        match p {
            // the two baselines differ only in the data they are trained on
            Preset::Ann0 | Preset::Ann1 => ModelSpec { layers: 5, hidden: 512, scaler: false },
            Preset::Ann2 => ModelSpec { layers: 6, hidden: 512, scaler: true },
        }
    }
}

/// Scaler plus network. Layers are addressed 1-based (`fc1..fcL`).
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorModel {
    pub spec: ModelSpec,
    pub scaler: Option<Scaler>,
    pub net: Network<f32>,
}

impl EstimatorModel {
    pub fn new(spec: ModelSpec, inputs: usize, outputs: usize, seed: u64) -> Result<EstimatorModel> {
        if spec.layers < 1 || spec.hidden == 0 || inputs == 0 || outputs == 0 {
            return Err(EstimatorError::InvalidConfig(format!("degenerate architecture {spec:?}")));
        }
        let mut dims = vec![inputs];
        dims.extend(std::iter::repeat_n(spec.hidden, spec.layers - 1));
        dims.push(outputs);
        Ok(EstimatorModel { spec, scaler: None, net: Network::new(&dims, seed) })
    }

    /// Model for `n_buses` meters: input `[P | Q]` of width `2N`, output `N`.
    pub fn for_buses(preset: Preset, n_buses: usize, seed: u64) -> Result<EstimatorModel> {
        EstimatorModel::new(preset.into(), 2 * n_buses, n_buses, seed)
    }

    pub fn layer_count(&self) -> usize {
        self.net.layers.len()
    }

    /// Freeze exactly the 1-based layers in `frozen`, unfreeze the rest.
    pub fn set_frozen(&mut self, frozen: &[usize]) -> Result<()> {
        if let Some(&bad) = frozen.iter().find(|&&l| l == 0 || l > self.layer_count()) {
            return Err(EstimatorError::UnknownLayer(bad));
        }
        for (i, layer) in self.net.layers.iter_mut().enumerate() {
            layer.frozen = frozen.contains(&(i + 1));
        }
        Ok(())
    }

    pub fn frozen_layers(&self) -> Vec<usize> {
        self.net.layers.iter().enumerate().filter(|(_, l)| l.frozen).map(|(i, _)| i + 1).collect()
    }

    fn prepare(&self, features: ArrayView2<f64>) -> Result<Array2<f32>> {
        if features.ncols() != self.net.input_dim() {
            return Err(EstimatorError::ShapeMismatch(format!(
                "model expects {} features, got {}",
                self.net.input_dim(),
                features.ncols()
            )));
        }
        let scaled = match (&self.scaler, self.spec.scaler) {
            (Some(s), true) => s.transform(features)?,
            (None, true) => return Err(EstimatorError::ScalerNotFit),
            _ => features.to_owned(),
        };
        Ok(scaled.mapv(|v| v as f32))
    }

    /// Voltage estimates, `T x N`.
    pub fn predict(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        let x = self.prepare(features)?;
        let mut out = Array2::zeros((x.nrows(), self.net.output_dim()));
        const CHUNK: usize = 1024;
        for start in (0..x.nrows()).step_by(CHUNK) {
            let end = (start + CHUNK).min(x.nrows());
            let y = self.net.forward(x.slice(s![start..end, ..]));
            out.slice_mut(s![start..end, ..]).assign(&y.mapv(|v| v as f64));
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, checkpoint::encode(self))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<EstimatorModel> {
        checkpoint::decode(&std::fs::read(path)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<EstimatorModel> {
        checkpoint::decode(bytes)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub train_fraction: f64,
    /// Stop once the monitored loss has not improved for this many epochs.
    /// The monitored loss is the test loss when a test set is given.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-6,
            epochs: 1500,
            batch_size: 25,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            seed: 0,
            train_fraction: 0.8,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EstimatorError::InvalidConfig(m.to_string()));
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train fraction must lie in (0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("moment coefficients must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return bad("eps must be positive and weight decay nonnegative");
        }
        Ok(())
    }
}

/// Decoupled weight decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW<F> {
    m: Grads<F>,
    v: Grads<F>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl<F: Real> AdamW<F> {
    pub fn new(net: &Network<F>, cfg: &TrainConfig) -> AdamW<F> {
        AdamW {
            m: net.zero_grads(),
            v: net.zero_grads(),
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, net: &mut Network<F>, grads: &Grads<F>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let decay = F::of(1.0 - lr * self.weight_decay);
        let step = F::of(lr / bc1);
        let inv_sqrt_bc2 = F::of(1.0 / bc2.sqrt());
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let (c1, c2) = (F::one() - b1, F::one() - b2);
        let eps = F::of(self.eps);
        let update = |p: &mut F, &g: &F, m: &mut F, v: &mut F| {
            *m = b1 * *m + c1 * g;
            *v = b2 * *v + c2 * g * g;
            *p = *p * decay - step * *m / (v.sqrt() * inv_sqrt_bc2 + eps);
        };
        for (i, layer) in net.layers.iter_mut().enumerate() {
            if layer.frozen {
                continue;
            }
            Zip::from(&mut layer.w).and(&grads.w[i]).and(&mut self.m.w[i]).and(&mut self.v.w[i]).for_each(update);
            Zip::from(&mut layer.b).and(&grads.b[i]).and(&mut self.m.b[i]).and(&mut self.v.b[i]).for_each(update);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct TrainReport {
    pub curve: Vec<EpochLoss>,
    pub stopped_early: bool,
    pub duration_secs: f64,
}

impl TrainReport {
    pub fn final_train_loss(&self) -> f64 {
        self.curve.last().map_or(f64::NAN, |e| e.train_loss)
    }

    pub fn final_test_loss(&self) -> Option<f64> {
        self.curve.last().and_then(|e| e.test_loss)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "train_loss", "test_loss"])?;
        for e in &self.curve {
            w.write_record([
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.test_loss.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Seeded random split of `0..n`; both halves are returned sorted.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64) * train_fraction).round() as usize;
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Train on explicit train/test sets. Fits the scaler on `x_train` if the
/// model uses one and it is not fit yet; an existing scaler is kept.
pub fn train_on(
    model: &mut EstimatorModel,
    x_train: ArrayView2<f64>,
    y_train: ArrayView2<f64>,
    test: Option<(ArrayView2<f64>, ArrayView2<f64>)>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_with_lr(model, x_train, y_train, test, cfg, cfg.lr)
}

pub(crate) fn train_with_lr(
    model: &mut EstimatorModel,
    x_train: ArrayView2<f64>,
    y_train: ArrayView2<f64>,
    test: Option<(ArrayView2<f64>, ArrayView2<f64>)>,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<TrainReport> {
    cfg.validate()?;
    if !(lr > 0.0) {
        return Err(EstimatorError::InvalidConfig("learning rate must be positive".into()));
    }
    if x_train.nrows() != y_train.nrows() || x_train.nrows() == 0 {
        return Err(EstimatorError::ShapeMismatch(format!(
            "{} feature rows vs {} target rows",
            x_train.nrows(),
            y_train.nrows()
        )));
    }
    if y_train.ncols() != model.net.output_dim() {
        return Err(EstimatorError::ShapeMismatch(format!(
            "model outputs {}, targets have {}",
            model.net.output_dim(),
            y_train.ncols()
        )));
    }
    if model.net.layers.iter().all(|l| l.frozen) {
        return Err(EstimatorError::AllFrozen);
    }
    if model.spec.scaler && model.scaler.is_none() {
        model.scaler = Some(Scaler::fit(x_train)?);
    }
    let x = model.prepare(x_train)?;
    let y = y_train.mapv(|v| v as f32);
    let test = match test {
        Some((tx, ty)) => {
            if tx.nrows() != ty.nrows() || ty.ncols() != y.ncols() {
                return Err(EstimatorError::ShapeMismatch("test set shapes".into()));
            }
            Some((model.prepare(tx)?, ty.mapv(|v| v as f32)))
        }
        None => None,
    };

    let start = Instant::now();
    let net = &mut model.net;
    let mut opt = AdamW::new(net, cfg);
    let mut grads = net.zero_grads();
    let n = x.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, epoch)));
        let mut total = 0.0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let xb = x.select(Axis(0), idx);
            let yb = y.select(Axis(0), idx);
            let loss = net.loss_and_grad(xb.view(), yb.view(), &mut grads).to64();
            if !loss.is_finite() {
                return Err(EstimatorError::NonFinite { epoch, batch, lr, batch_size: cfg.batch_size, loss });
            }
            total += loss * idx.len() as f64;
            opt.step(net, &grads, lr);
        }
        let train_loss = total / n as f64;
        let test_loss = test.as_ref().map(|(tx, ty)| {
            let pred = net.forward(tx.view());
            Zip::from(&pred).and(ty).fold(0.0f64, |acc, &p, &t| acc + ((p - t) as f64).powi(2)) / pred.len() as f64
        });
        curve.push(EpochLoss { epoch: epoch + 1, train_loss, test_loss });
        if (epoch + 1) % 100 == 0 {
            log::info!("epoch {}: train {train_loss:.3e} test {:?}", epoch + 1, test_loss);
        }
        if let Some(patience) = cfg.patience {
            let monitored = test_loss.unwrap_or(train_loss);
            if monitored < best {
                best = monitored;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(TrainReport { curve, stopped_early, duration_secs: start.elapsed().as_secs_f64() })
}

/// Indices and loss curve of a [`train`] run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

/// Split `features`/`targets` per `cfg` and train.
pub fn train(
    model: &mut EstimatorModel,
    features: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if features.nrows() != targets.nrows() {
        return Err(EstimatorError::ShapeMismatch(format!(
            "{} feature rows vs {} target rows",
            features.nrows(),
            targets.nrows()
        )));
    }
    let (train_idx, test_idx) = split_indices(features.nrows(), cfg.train_fraction, cfg.seed);
    let xtr = features.select(Axis(0), &train_idx);
    let ytr = targets.select(Axis(0), &train_idx);
    let xte = features.select(Axis(0), &test_idx);
    let yte = targets.select(Axis(0), &test_idx);
    let test = (!test_idx.is_empty()).then(|| (xte.view(), yte.view()));
    let report = train_on(model, xtr.view(), ytr.view(), test, cfg)?;
    Ok(TrainOutcome { report, train_idx, test_idx })
}

/// Signed errors `estimate - truth` and their summary.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorStats {
    pub errors: Array2<f64>,
    pub mean: f64,
    pub std: f64,
    pub mean_abs: f64,
    pub max_abs: f64,
    pub mse: f64,
    pub histogram: Histogram,
}

pub const ERROR_HIST_BINS: usize = 50;

pub fn error_stats(estimate: ArrayView2<f64>, truth: ArrayView2<f64>) -> Result<ErrorStats> {
    if estimate.dim() != truth.dim() {
        return Err(EstimatorError::ShapeMismatch(format!("{:?} vs {:?}", estimate.dim(), truth.dim())));
    }
    let errors = &estimate - &truth;
    let flat: Vec<f64> = errors.iter().copied().collect();
    let n = flat.len().max(1) as f64;
    let mean = flat.iter().sum::<f64>() / n;
    let std = if flat.len() > 1 { crate::stats::std_dev(&flat) } else { 0.0 };
    let mean_abs = flat.iter().map(|e| e.abs()).sum::<f64>() / n;
    let max_abs = flat.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    let mse = flat.iter().map(|e| e * e).sum::<f64>() / n;
    let histogram = if max_abs > 0.0 {
        Histogram::with_range(&flat, ERROR_HIST_BINS, -max_abs, max_abs)
    } else {
        Histogram::with_range(&flat, ERROR_HIST_BINS, -1e-12, 1e-12)
    };
    Ok(ErrorStats { errors, mean, std, mean_abs, max_abs, mse, histogram })
}

pub fn evaluate(model: &EstimatorModel, features: ArrayView2<f64>, truth: ArrayView2<f64>) -> Result<ErrorStats> {
    let est = model.predict(features)?;
    error_stats(est.view(), truth)
}

impl ErrorStats {
    /// Long-format per-sample errors: `sample,bus_id,error`.
    pub fn write_errors_csv(&self, path: impl AsRef<Path>, bus_ids: &[usize]) -> Result<()> {
        if bus_ids.len() != self.errors.ncols() {
            return Err(EstimatorError::ShapeMismatch("bus id count".into()));
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["sample", "bus_id", "error"])?;
        for (t, row) in self.errors.rows().into_iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                w.write_record([t.to_string(), bus_ids[j].to_string(), e.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["mean", "std", "mean_abs", "max_abs", "mse"])?;
        w.write_record([self.mean, self.std, self.mean_abs, self.max_abs, self.mse].map(|v| v.to_string()))?;
        w.flush()?;
        Ok(())
    }

    pub fn write_histogram_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["error", "count"])?;
        for (c, n) in self.histogram.bin_centres().iter().zip(&self.histogram.counts) {
            w.write_record([c.to_string(), n.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-3.0..5.0))
    }

    #[test]
    fn scaler_two_pass_oracle() {
        let x = random_matrix(40, 5, 1);
        let s = Scaler::fit(x.view()).unwrap();
        for j in 0..5 {
            let col: Vec<f64> = x.column(j).to_vec();
            let m = col.iter().sum::<f64>() / 40.0;
            let v = col.iter().map(|c| (c - m) * (c - m)).sum::<f64>() / 40.0;
            assert!((s.mean[j] - m).abs() < 1e-12);
            assert!((s.std[j] - v.sqrt()).abs() < 1e-12);
        }
        let z = s.transform(x.view()).unwrap();
        for j in 0..5 {
            let col = z.column(j);
            let m = col.mean().unwrap();
            assert!(m.abs() < 1e-9);
            assert!((col.std(0.0) - 1.0).abs() < 1e-6);
        }
        let again = Scaler::fit(z.view()).unwrap().transform(z.view()).unwrap();
        assert!((&again - &z).iter().all(|d| d.abs() < 1e-9));
    }

    #[test]
    fn scaler_constant_column() {
        let mut x = random_matrix(10, 3, 2);
        x.column_mut(1).fill(4.2);
        let s = Scaler::fit(x.view()).unwrap();
        assert_eq!(s.constant, vec![1]);
        assert!(s.transform(x.view()).unwrap().column(1).iter().all(|&v| v == 0.0));
        assert!(Scaler::fit(x.slice(s![..1, ..])).is_err());
    }

    #[test]
    fn presets_and_freezing() {
        let m = EstimatorModel::for_buses(Preset::Ann2, 14, 0).unwrap();
        assert_eq!(m.net.dims(), vec![28, 512, 512, 512, 512, 512, 14]);
        assert_eq!(m.layer_count(), 6);
        let m1 = EstimatorModel::for_buses(Preset::Ann1, 14, 0).unwrap();
        assert_eq!(m1.layer_count(), 5);
        assert!(!m1.spec.scaler);
        let mut m = m;
        m.set_frozen(&[4, 5, 6]).unwrap();
        assert_eq!(m.frozen_layers(), vec![4, 5, 6]);
        assert!(matches!(m.set_frozen(&[7]), Err(EstimatorError::UnknownLayer(7))));
        assert_eq!("ANN-2".parse::<Preset>().unwrap(), Preset::Ann2);
    }

    #[test]
    fn quadratic_toy_converges() {
        // a single affine unit learning a constant: convex in its parameters
        let spec = ModelSpec { layers: 1, hidden: 1, scaler: false };
        let mut m = EstimatorModel::new(spec, 1, 1, 3).unwrap();
        m.net.layers[0].w.fill(0.0);
        m.net.layers[0].frozen = false;
        let x = Array2::<f64>::zeros((8, 1));
        let y = Array2::<f64>::from_elem((8, 1), 0.75);
        let cfg = TrainConfig { lr: 1e-2, epochs: 600, batch_size: 8, weight_decay: 0.0, ..Default::default() };
        let rep = train_on(&mut m, x.view(), y.view(), None, &cfg).unwrap();
        let losses: Vec<f64> = rep.curve.iter().map(|e| e.train_loss).collect();
        assert!(losses.last().unwrap() < &1e-8, "{:?}", losses.last());
        // monotone until it reaches the noise floor of single precision
        for w in losses.windows(2).take_while(|w| w[0] > 1e-9) {
            assert!(w[1] <= w[0] * (1.0 + 1e-6), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn training_is_deterministic_and_respects_frozen_layers() {
        let spec = ModelSpec { layers: 3, hidden: 16, scaler: true };
        let x = random_matrix(60, 4, 7);
        let y = x.map_axis(Axis(1), |r| 1.0 - 0.01 * r.sum()).insert_axis(Axis(1));
        let y = ndarray::concatenate![Axis(1), y, y.mapv(|v| v * 0.99)];
        let cfg = TrainConfig { lr: 1e-3, epochs: 20, batch_size: 7, seed: 4, ..Default::default() };
        let run = |frozen: &[usize]| {
            let mut m = EstimatorModel::new(spec, 4, 2, 9).unwrap();
            m.set_frozen(frozen).unwrap();
            let before = m.clone();
            let out = train(&mut m, x.view(), y.view(), &cfg).unwrap();
            (before, m, out)
        };
        let (_, a, ra) = run(&[]);
        let (_, b, _) = run(&[]);
        assert_eq!(a, b);
        assert_eq!(ra.train_idx.len(), 48);
        assert!(ra.report.curve.iter().all(|e| e.test_loss.is_some()));

        let (before, after, _) = run(&[2, 3]);
        assert_eq!(before.net.layers[1], after.net.layers[1]);
        assert_eq!(before.net.layers[2], after.net.layers[2]);
        assert_ne!(before.net.layers[0], after.net.layers[0]);

        let mut m = EstimatorModel::new(spec, 4, 2, 9).unwrap();
        m.set_frozen(&[1, 2, 3]).unwrap();
        assert!(matches!(train(&mut m, x.view(), y.view(), &cfg), Err(EstimatorError::AllFrozen)));
    }

    #[test]
    fn nan_aborts_with_diagnostics() {
        let spec = ModelSpec { layers: 2, hidden: 4, scaler: false };
        let mut m = EstimatorModel::new(spec, 2, 1, 1).unwrap();
        let mut x = random_matrix(10, 2, 1);
        x[[3, 0]] = f64::NAN;
        let y = Array2::<f64>::ones((10, 1));
        let cfg = TrainConfig { epochs: 2, batch_size: 5, ..Default::default() };
        let err = train_on(&mut m, x.view(), y.view(), None, &cfg).unwrap_err();
        assert!(matches!(err, EstimatorError::NonFinite { batch_size: 5, .. }), "{err}");
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { train_fraction: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn perfect_estimates_have_zero_error() {
        let v = array![[1.0, 0.99], [0.98, 0.97]];
        let st = error_stats(v.view(), v.view()).unwrap();
        assert_eq!((st.mean, st.std, st.max_abs, st.mse), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(st.histogram.total(), 4);
    }

    #[test]
    fn split_is_a_partition() {
        let (a, b) = split_indices(2880, 0.8, 1);
        assert_eq!((a.len(), b.len()), (2304, 576));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..2880).collect::<Vec<_>>());
        assert_ne!(split_indices(2880, 0.8, 2).0, a);
    }
}
