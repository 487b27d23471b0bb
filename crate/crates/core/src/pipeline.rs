//! Resumable end-to-end runs: generate, solve, collect, train, estimate,
//! check drift, update, report.
//!
//! Every stage reads the artifacts of earlier stages from the output
//! directory and writes its own, then records itself in `manifest.json`
//! together with the SHA-256 of the effective configuration, the seeds it
//! used and its wall time.
//!
//! The configuration is TOML. Every key is optional; missing keys take the
//! defaults of the `desk-15min` preset.
//!
//! ```toml
//! out = "run"
//!
//! [feeder]
//! path = "feeder.txt"      # optional; otherwise a synthetic feeder
//! buses = 15
//! topology = "radial"      # or "ring"
//! seed = 1
//!
//! [profiles]
//! samples = 2880
//! resolution_min = 15
//! season = "winter"
//! seed = 2
//! noise_pct = 0.0          # 3-sigma meter error, percent of 1 p.u.
//! noise_seed = 3
//!
//! [lrs]
//! a_lo = 3.0
//! a_hi = 8.0
//! c_lo = 0.9
//! c_hi = 1.1
//! seed = 4
//!
//! [collect]
//! realization = "toy-modp" # or "secp256k1"
//! group_seed = 5
//! dim = 16
//! k = 2
//! rounds = 1               # sigma rounds per candidate
//! parallel = false
//! transport = "channel"    # or "tcp"
//! port = 0
//! timeout_secs = 10
//! seed = 6
//!
//! [train]
//! preset = "ann-2"
//! model_seed = 7
//! lr = 5e-6
//! epochs = 1500
//! batch_size = 25
//! seed = 7
//!
//! [drift]
//! season = "summer"        # season of the online data
//! samples = 2880
//! seed = 8
//! windows = 10
//! mode = "flattened"       # or "per-node"
//! # threshold = 0.01       # default: self-calibrated
//!
//! [update]
//! frozen = [4, 5, 6]
//! lr = 5e-6
//! gamma = 1.0
//! max_epochs = 1000
//! update_samples = 720     # leading online samples used for the update
//! force = false
//! seed = 9
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::collect::{collect_dataset, CollectOptions, DsoAgent, Outcome, SmAgent, TransportKind};
use crate::commit::{setup, Realization};
use crate::drift::{append_update_log, calibrate_threshold, drift_indicator, incremental_update, IlConfig, PoolMode};
use crate::estimator::{evaluate, train, EstimatorModel, ModelSpec, Preset, TrainConfig};
use crate::feeder::{
    build_admittance, generate_profiles, inject_measurement_noise, read_profiles_csv, solve_power_flow, write_profiles_csv,
    write_voltages_csv, BusState, FeederModel, LoadProfile, NewtonOptions, Season,
};
use crate::lrs::{sample_meter_params, transform_profile, BoundsConfig};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot parse configuration: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("missing {path}; run the `{stage}` stage first")]
    MissingArtifact { path: PathBuf, stage: Stage },
    #[error("unknown stage `{0}`")]
    UnknownStage(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Feeder(#[from] crate::feeder::FeederError),
    #[error(transparent)]
    Lrs(#[from] crate::lrs::LrsError),
    #[error(transparent)]
    Commit(#[from] crate::commit::CommitError),
    #[error(transparent)]
    Collect(#[from] crate::collect::CollectError),
    #[error(transparent)]
    Estimator(#[from] crate::estimator::EstimatorError),
    #[error(transparent)]
    Drift(#[from] crate::drift::DriftError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    GenNetwork,
    GenProfiles,
    SolvePf,
    Collect,
    Train,
    Estimate,
    DriftCheck,
    Update,
    Report,
    All,
}

impl Stage {
    /// Every concrete stage in execution order.
    pub const SEQUENCE: [Stage; 9] = [
        Stage::GenNetwork,
        Stage::GenProfiles,
        Stage::SolvePf,
        Stage::Collect,
        Stage::Train,
        Stage::Estimate,
        Stage::DriftCheck,
        Stage::Update,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenNetwork => "gen-network",
            Stage::GenProfiles => "gen-profiles",
            Stage::SolvePf => "solve-pf",
            Stage::Collect => "collect",
            Stage::Train => "train",
            Stage::Estimate => "estimate",
            Stage::DriftCheck => "drift-check",
            Stage::Update => "update",
            Stage::Report => "report",
            Stage::All => "all",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Stage> {
        Stage::SEQUENCE
            .iter()
            .chain([Stage::All].iter())
            .copied()
            .find(|st| st.name() == s)
            .ok_or_else(|| PipelineError::UnknownStage(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    #[default]
    Radial,
    Ring,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeederSection {
    pub path: Option<PathBuf>,
    pub buses: usize,
    pub topology: Topology,
    pub seed: u64,
}

impl Default for FeederSection {
    fn default() -> Self {
        FeederSection { path: None, buses: 15, topology: Topology::Radial, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileSection {
    pub samples: usize,
    pub resolution_min: u32,
    pub season: Season,
    pub seed: u64,
    pub noise_pct: f64,
    pub noise_seed: u64,
}

impl Default for ProfileSection {
    fn default() -> Self {
        ProfileSection { samples: 2880, resolution_min: 15, season: Season::Winter, seed: 2, noise_pct: 0.0, noise_seed: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrsSection {
    #[serde(flatten)]
    pub bounds: BoundsConfig,
    pub seed: u64,
}

impl Default for LrsSection {
    fn default() -> Self {
        LrsSection { bounds: BoundsConfig::default(), seed: 4 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportChoice {
    #[default]
    Channel,
    Tcp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectSection {
    pub realization: Realization,
    pub group_seed: u64,
    pub dim: usize,
    pub k: usize,
    pub rounds: u32,
    pub parallel: bool,
    pub transport: TransportChoice,
    pub port: u16,
    pub timeout_secs: u64,
    pub seed: u64,
}

impl Default for CollectSection {
    fn default() -> Self {
        CollectSection {
            realization: Realization::ToyModp,
            group_seed: 5,
            dim: 16,
            k: 2,
            rounds: 1,
            parallel: false,
            transport: TransportChoice::Channel,
            port: 0,
            timeout_secs: 10,
            seed: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub preset: Preset,
    pub model_seed: u64,
    #[serde(flatten)]
    pub config: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { preset: Preset::Ann2, model_seed: 7, config: TrainConfig { seed: 7, ..TrainConfig::default() } }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftSection {
    pub season: Season,
    pub samples: usize,
    pub seed: u64,
    pub windows: usize,
    pub mode: PoolMode,
    pub threshold: Option<f64>,
}

impl Default for DriftSection {
    fn default() -> Self {
        DriftSection { season: Season::Summer, samples: 2880, seed: 8, windows: 10, mode: PoolMode::Flattened, threshold: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UpdateSection {
    /// Leading online samples used for the update; the rest are held out.
    pub update_samples: usize,
    /// Update even when the drift check did not trigger.
    pub force: bool,
    #[serde(flatten)]
    pub il: IlConfig,
}

impl Default for UpdateSection {
    fn default() -> Self {
        UpdateSection { update_samples: 720, force: false, il: IlConfig { seed: 9, ..IlConfig::default() } }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub out: PathBuf,
    pub feeder: FeederSection,
    pub profiles: ProfileSection,
    pub lrs: LrsSection,
    pub collect: CollectSection,
    pub train: TrainSection,
    pub drift: DriftSection,
    pub update: UpdateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out: PathBuf::from("run"),
            feeder: FeederSection::default(),
            profiles: ProfileSection::default(),
            lrs: LrsSection::default(),
            collect: CollectSection::default(),
            train: TrainSection::default(),
            drift: DriftSection::default(),
            update: UpdateSection::default(),
        }
    }
}

impl RunConfig {
    pub const PRESETS: [&'static str; 3] = ["desk-15min", "london-hourly", "nl-hourly"];

    /// `desk-15min`: 30 days at 15 min on a 15-bus feeder, winter training
    /// data, summer online data.
    /// `london-hourly`: 60 winter days hourly on a 30-bus feeder, 30 spring
    /// days online.
    /// `nl-hourly`: 90 summer days hourly on a 15-bus feeder, 80 winter days
    /// online of which the first 20 feed the update.
    pub fn preset(name: &str) -> Result<RunConfig> {
        let base = RunConfig::default();
        match name {
            "desk-15min" => Ok(base),
            "london-hourly" => Ok(RunConfig {
                feeder: FeederSection { buses: 30, ..base.feeder },
                profiles: ProfileSection { samples: 60 * 24, resolution_min: 60, ..base.profiles },
                drift: DriftSection { season: Season::Spring, samples: 30 * 24, windows: 6, ..base.drift },
                update: UpdateSection { update_samples: 10 * 24, ..base.update },
                ..base
            }),
            "nl-hourly" => Ok(RunConfig {
                profiles: ProfileSection { samples: 90 * 24, resolution_min: 60, season: Season::Summer, ..base.profiles },
                drift: DriftSection { season: Season::Winter, samples: 80 * 24, windows: 9, ..base.drift },
                update: UpdateSection { update_samples: 20 * 24, ..base.update },
                ..base
            }),
            other => Err(PipelineError::Config(format!("unknown preset `{other}`; known: {}", Self::PRESETS.join(", ")))),
        }
    }

    pub fn from_toml(text: &str) -> Result<RunConfig> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let text =
            fs::read_to_string(path.as_ref()).map_err(|e| PipelineError::Config(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form with `out` cleared, hex encoded.
    pub fn hash(&self) -> String {
        let canonical = RunConfig { out: PathBuf::new(), ..self.clone() };
        hex(&Sha256::digest(canonical.to_toml().as_bytes()))
    }

    /// Derive every stage seed from one value.
    pub fn reseed(&mut self, seed: u64) {
        let s = |i: u64| seed.wrapping_add(i);
        self.feeder.seed = s(0);
        self.profiles.seed = s(1);
        self.profiles.noise_seed = s(2);
        self.lrs.seed = s(3);
        self.collect.group_seed = s(4);
        self.collect.seed = s(5);
        self.train.model_seed = s(6);
        self.train.config.seed = s(6);
        self.drift.seed = s(7);
        self.update.il.seed = s(8);
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if let Some(p) = &self.feeder.path {
            if !p.exists() {
                return bad(format!("feeder file {} does not exist", p.display()));
            }
        } else if self.feeder.buses < 2 {
            return bad("a feeder needs at least two buses".into());
        }
        if self.profiles.samples == 0 || self.drift.samples == 0 {
            return bad("sample counts must be positive".into());
        }
        if !(self.profiles.noise_pct >= 0.0) {
            return bad("noise percentage must be nonnegative".into());
        }
        self.lrs.bounds.validate()?;
        if self.collect.dim <= self.collect.k {
            return bad(format!("collect.dim {} must exceed k {}", self.collect.dim, self.collect.k));
        }
        self.train.config.validate()?;
        self.update.il.validate()?;
        let layers = ModelSpec::from(self.train.preset).layers;
        if let Some(l) = self.update.il.frozen.iter().find(|&&l| l > layers) {
            return bad(format!("update.frozen names layer {l}, but preset {} has {layers} layers", self.train.preset));
        }
        if self.update.update_samples == 0 || self.update.update_samples >= self.drift.samples {
            return bad(format!(
                "update_samples must lie in [1, {}) so that some online samples remain for testing",
                self.drift.samples
            ));
        }
        Ok(())
    }

    fn seeds(&self, stage: Stage) -> BTreeMap<String, u64> {
        let pairs: Vec<(&str, u64)> = match stage {
            Stage::GenNetwork => vec![("feeder", self.feeder.seed)],
            Stage::GenProfiles => vec![("profiles", self.profiles.seed), ("online", self.drift.seed), ("lrs", self.lrs.seed)],
            Stage::SolvePf => vec![("noise", self.profiles.noise_seed)],
            Stage::Collect => vec![("group", self.collect.group_seed), ("collect", self.collect.seed)],
            Stage::Train => vec![("model", self.train.model_seed), ("train", self.train.config.seed)],
            Stage::Update => vec![("update", self.update.il.seed)],
            _ => vec![],
        };
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub config_sha256: String,
    pub seeds: BTreeMap<String, u64>,
    pub duration_secs: f64,
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub config_sha256: String,
    pub config: String,
    pub stages: BTreeMap<String, StageEntry>,
}

pub const MANIFEST_FORMAT: u32 = 1;

impl Manifest {
    pub fn load(dir: &Path) -> Result<Option<Manifest>> {
        let path = dir.join("manifest.json");
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_slice(&fs::read(path)?)?))
    }

    fn save(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// Artifact file names, relative to the output directory.
pub mod artifact {
    pub const FEEDER: &str = "feeder.txt";
    pub const PROFILES: &str = "profiles.csv";
    pub const PROFILES_LRS: &str = "profiles_lrs.csv";
    pub const ONLINE_PROFILES: &str = "online_profiles.csv";
    pub const ONLINE_PROFILES_LRS: &str = "online_profiles_lrs.csv";
    pub const VOLTAGES: &str = "voltages.csv";
    pub const MEASURED: &str = "measured.csv";
    pub const ONLINE_VOLTAGES: &str = "online_voltages.csv";
    pub const ONLINE_MEASURED: &str = "online_measured.csv";
    pub const COLLECTED: &str = "collected.csv";
    pub const ONLINE_COLLECTED: &str = "online_collected.csv";
    pub const SESSIONS: &str = "sessions.csv";
    pub const COLLECTION: &str = "collection.json";
    pub const MODEL: &str = "model.bin";
    pub const LOSS_CURVE: &str = "loss_curve.csv";
    pub const SPLIT: &str = "split.json";
    pub const TEST_SUMMARY: &str = "test_summary.csv";
    pub const TEST_HISTOGRAM: &str = "test_histogram.csv";
    pub const ESTIMATES: &str = "estimates.csv";
    pub const ESTIMATE_SUMMARY: &str = "estimate_summary.csv";
    pub const ESTIMATE_HISTOGRAM: &str = "estimate_histogram.csv";
    pub const DRIFT: &str = "drift.csv";
    pub const DRIFT_STATUS: &str = "drift.json";
    pub const MODEL_UPDATED: &str = "model_updated.bin";
    pub const UPDATE_CURVE: &str = "update_curve.csv";
    pub const UPDATE_LOG: &str = "update_log.jsonl";
    pub const UPDATE_EVAL: &str = "update_eval.csv";
    pub const UPDATE_STATUS: &str = "update.json";
    pub const REPORT_DIR: &str = "report";
}

use artifact as a;

/// Magnitude matrix in long form: `bus_id,timestamp,v_pu`.
pub fn write_magnitudes_csv(path: impl AsRef<Path>, bus_ids: &[usize], resolution_min: u32, v: ArrayView2<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["bus_id", "timestamp", "v_pu"])?;
    for (t, row) in v.rows().into_iter().enumerate() {
        let ts = (t as u64 * resolution_min as u64).to_string();
        for (id, x) in bus_ids.iter().zip(row) {
            w.write_record([id.to_string(), ts.clone(), x.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_magnitudes_csv`]: `(bus_ids, T x N)`.
pub fn read_magnitudes_csv(path: impl AsRef<Path>) -> Result<(Vec<usize>, Array2<f64>)> {
    let mut rdr = csv::Reader::from_path(path.as_ref())?;
    let mut ids: Vec<usize> = Vec::new();
    let mut values = Vec::new();
    let mut first_ts = None;
    for rec in rdr.records() {
        let rec = rec?;
        let parse_err = |what: &str| PipelineError::Data(format!("{}: bad {what} `{}`", path.as_ref().display(), rec.as_slice()));
        let id: usize = rec[0].parse().map_err(|_| parse_err("bus id"))?;
        let ts: u64 = rec[1].parse().map_err(|_| parse_err("timestamp"))?;
        let v: f64 = rec[2].parse().map_err(|_| parse_err("value"))?;
        if *first_ts.get_or_insert(ts) == ts {
            ids.push(id);
        }
        values.push(v);
    }
    if ids.is_empty() || values.len() % ids.len() != 0 {
        return Err(PipelineError::Data(format!("{}: ragged magnitude table", path.as_ref().display())));
    }
    let rows = values.len() / ids.len();
    let m = Array2::from_shape_vec((rows, ids.len()), values).map_err(|e| PipelineError::Data(e.to_string()))?;
    Ok((ids, m))
}

/// Two-column whitespace-separated series for plotting tools.
fn write_series(path: &Path, header: (&str, &str), points: impl IntoIterator<Item = (f64, f64)>) -> Result<()> {
    let mut s = format!("# {} {}\n", header.0, header.1);
    for (x, y) in points {
        s.push_str(&format!("{x} {y}\n"));
    }
    fs::write(path, s)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SplitRecord {
    train: Vec<usize>,
    test: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftStatus {
    pub tt: f64,
    pub threshold: f64,
    pub calibrated: bool,
    pub triggered: bool,
    pub leave_one_out: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UpdateStatus {
    pub performed: bool,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CollectionSummary {
    pub meters: usize,
    pub samples: usize,
    pub dim: usize,
    pub k: usize,
    pub realization: Realization,
    pub parallel: bool,
    pub failed: Vec<usize>,
    pub duration_secs: f64,
    pub online_duration_secs: f64,
}

/// A run bound to one output directory.
pub struct Pipeline {
    pub cfg: RunConfig,
    dir: PathBuf,
    hash: String,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Result<Pipeline> {
        cfg.validate()?;
        let dir = cfg.out.clone();
        fs::create_dir_all(&dir)?;
        let hash = cfg.hash();
        Ok(Pipeline { cfg, dir, hash })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn need(&self, name: &str, stage: Stage) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(PipelineError::MissingArtifact { path: p, stage })
        }
    }

    /// Run `stage`, or every stage in order for [`Stage::All`].
    pub fn run(&self, stage: Stage) -> Result<()> {
        if stage == Stage::All {
            for s in Stage::SEQUENCE {
                self.run(s)?;
            }
            return Ok(());
        }
        let mut manifest = Manifest::load(&self.dir)?.unwrap_or_default();
        for (name, entry) in &manifest.stages {
            if entry.config_sha256 != self.hash {
                log::warn!("stage `{name}` in {} ran with a different configuration", self.dir.display());
            }
        }
        log::info!("stage {stage}");
        let start = Instant::now();
        let artifacts = match stage {
            Stage::GenNetwork => self.gen_network()?,
            Stage::GenProfiles => self.gen_profiles()?,
            Stage::SolvePf => self.solve_pf()?,
            Stage::Collect => self.collect()?,
            Stage::Train => self.train()?,
            Stage::Estimate => self.estimate()?,
            Stage::DriftCheck => self.drift_check()?,
            Stage::Update => self.update()?,
            Stage::Report => self.report()?,
            Stage::All => unreachable!(),
        };
        manifest.format = MANIFEST_FORMAT;
        manifest.config_sha256 = self.hash.clone();
        manifest.config = self.cfg.to_toml();
        manifest.stages.insert(
            stage.name().to_string(),
            StageEntry {
                config_sha256: self.hash.clone(),
                seeds: self.cfg.seeds(stage),
                duration_secs: start.elapsed().as_secs_f64(),
                artifacts: artifacts.into_iter().map(String::from).collect(),
            },
        );
        manifest.save(&self.dir)
    }

    fn feeder(&self) -> Result<FeederModel> {
        Ok(FeederModel::load(self.need(a::FEEDER, Stage::GenNetwork)?)?)
    }

    fn gen_network(&self) -> Result<Vec<&'static str>> {
        let f = &self.cfg.feeder;
        let model = match &f.path {
            Some(p) => FeederModel::load(p)?,
            None => match f.topology {
                Topology::Radial => FeederModel::radial(f.buses, f.seed)?,
                Topology::Ring => FeederModel::ring(f.buses, f.seed)?,
            },
        };
        build_admittance(&model)?;
        model.save(self.path(a::FEEDER))?;
        Ok(vec![a::FEEDER])
    }

    fn profiles_for(&self, feeder: &FeederModel, samples: usize, season: Season, seed: u64) -> Result<LoadProfile> {
        let ids = feeder.load_bus_ids();
        let mut p = generate_profiles(ids.len(), samples, self.cfg.profiles.resolution_min, seed, season)?;
        p.bus_ids = ids;
        Ok(p)
    }

    fn gen_profiles(&self) -> Result<Vec<&'static str>> {
        let feeder = self.feeder()?;
        let pc = &self.cfg.profiles;
        let base = self.profiles_for(&feeder, pc.samples, pc.season, pc.seed)?;
        let online = self.profiles_for(&feeder, self.cfg.drift.samples, self.cfg.drift.season, self.cfg.drift.seed)?;
        // each meter keeps its parameters across both periods
        let params = sample_meter_params(&base.bus_ids, &self.cfg.lrs.bounds, self.cfg.lrs.seed)?;
        write_profiles_csv(self.path(a::PROFILES), &base, false)?;
        write_profiles_csv(self.path(a::PROFILES_LRS), &transform_profile(&base, &params)?, true)?;
        write_profiles_csv(self.path(a::ONLINE_PROFILES), &online, false)?;
        write_profiles_csv(self.path(a::ONLINE_PROFILES_LRS), &transform_profile(&online, &params)?, true)?;
        Ok(vec![a::PROFILES, a::PROFILES_LRS, a::ONLINE_PROFILES, a::ONLINE_PROFILES_LRS])
    }

    fn solve_pf(&self) -> Result<Vec<&'static str>> {
        let feeder = self.feeder()?;
        let y = build_admittance(&feeder)?;
        let opts = NewtonOptions::default();
        let pairs = [
            (a::PROFILES, a::VOLTAGES, a::MEASURED, self.cfg.profiles.noise_seed),
            (a::ONLINE_PROFILES, a::ONLINE_VOLTAGES, a::ONLINE_MEASURED, self.cfg.profiles.noise_seed.wrapping_add(1)),
        ];
        for (src, truth, measured, noise_seed) in pairs {
            let (prof, _) = read_profiles_csv(self.need(src, Stage::GenProfiles)?)?;
            let state = solve_power_flow(&feeder, &y, &prof, &opts)?;
            write_voltages_csv(self.path(truth), &state)?;
            let noisy = inject_measurement_noise(&state, self.cfg.profiles.noise_pct, noise_seed)?;
            let v = metered(&noisy, &prof.bus_ids)?;
            write_magnitudes_csv(self.path(measured), &prof.bus_ids, prof.resolution_min, v.view())?;
        }
        Ok(vec![a::VOLTAGES, a::MEASURED, a::ONLINE_VOLTAGES, a::ONLINE_MEASURED])
    }

    fn collect_one(&self, measured: &str, salt: u64) -> Result<(Vec<usize>, Array2<f64>, crate::collect::CollectedData)> {
        let c = &self.cfg.collect;
        let (ids, v) = read_magnitudes_csv(self.need(measured, Stage::SolvePf)?)?;
        let params = setup(c.realization, c.group_seed)?;
        let seed = c.seed.wrapping_add(salt);
        let sms = ids
            .iter()
            .zip(v.columns())
            .map(|(&id, col)| Ok(SmAgent::new(id, col.to_vec(), c.dim, c.k, seed)?.with_rounds(c.rounds)))
            .collect::<Result<Vec<_>>>()?;
        let dso = DsoAgent::new(params, seed);
        let opts = CollectOptions {
            parallel: c.parallel,
            transport: match c.transport {
                TransportChoice::Channel => TransportKind::Channel,
                TransportChoice::Tcp => TransportKind::Tcp { port: c.port },
            },
            timeout: Duration::from_secs(c.timeout_secs.max(1)),
            ..CollectOptions::default()
        };
        let data = collect_dataset(&sms, &dso, v.nrows(), &opts)?;
        Ok((ids, v, data))
    }

    fn collect(&self) -> Result<Vec<&'static str>> {
        let res = self.cfg.profiles.resolution_min;
        let (ids, _, base) = self.collect_one(a::MEASURED, 0)?;
        write_magnitudes_csv(self.path(a::COLLECTED), &ids, res, base.voltages.view())?;
        let (online_ids, _, online) = self.collect_one(a::ONLINE_MEASURED, 1)?;
        write_magnitudes_csv(self.path(a::ONLINE_COLLECTED), &online_ids, res, online.voltages.view())?;

        let mut w = csv::Writer::from_path(self.path(a::SESSIONS))?;
        w.write_record([
            "period",
            "sm_id",
            "dim",
            "k",
            "rounds",
            "sigma_rounds",
            "handshake_secs",
            "duration_secs",
            "outcome",
            "error",
        ])?;
        for (period, data) in [("training", &base), ("online", &online)] {
            for r in &data.records {
                w.write_record([
                    period.to_string(),
                    r.sm_id.to_string(),
                    r.dim.to_string(),
                    r.k.to_string(),
                    r.rounds.to_string(),
                    r.sigma_rounds.to_string(),
                    r.handshake_secs.to_string(),
                    r.duration_secs.to_string(),
                    r.outcome.to_string(),
                    r.error.clone().unwrap_or_default(),
                ])?;
            }
        }
        w.flush()?;
        let mut failed = base.failed();
        failed.extend(online.failed());
        failed.sort_unstable();
        failed.dedup();
        let summary = CollectionSummary {
            meters: ids.len(),
            samples: base.voltages.nrows(),
            dim: self.cfg.collect.dim,
            k: self.cfg.collect.k,
            realization: self.cfg.collect.realization,
            parallel: self.cfg.collect.parallel,
            failed: failed.clone(),
            duration_secs: base.duration.as_secs_f64(),
            online_duration_secs: online.duration.as_secs_f64(),
        };
        fs::write(self.path(a::COLLECTION), serde_json::to_vec_pretty(&summary)?)?;
        if !failed.is_empty() {
            log::warn!("collection incomplete, meters {failed:?} failed");
        }
        Ok(vec![a::COLLECTED, a::ONLINE_COLLECTED, a::SESSIONS, a::COLLECTION])
    }

    /// Transformed features and collected magnitudes, aligned by bus id.
    fn dataset(&self, profiles: &str, collected: &str) -> Result<(Vec<usize>, Array2<f64>, Array2<f64>)> {
        let (prof, meta) = read_profiles_csv(self.need(profiles, Stage::GenProfiles)?)?;
        if !meta.transformed {
            log::warn!("{profiles} is not marked as randomized");
        }
        let (ids, v) = read_magnitudes_csv(self.need(collected, Stage::Collect)?)?;
        if ids != prof.bus_ids || v.nrows() != prof.samples() {
            return Err(PipelineError::Data(format!("{profiles} and {collected} cover different meters or periods")));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(PipelineError::Data(format!("{collected} has gaps from failed meters; rerun `collect`")));
        }
        Ok((ids, prof.features(), v))
    }

    fn train(&self) -> Result<Vec<&'static str>> {
        let (ids, x, v) = self.dataset(a::PROFILES_LRS, a::COLLECTED)?;
        let t = &self.cfg.train;
        let mut model = EstimatorModel::for_buses(t.preset, ids.len(), t.model_seed)?;
        let out = train(&mut model, x.view(), v.view(), &t.config)?;
        model.save(self.path(a::MODEL))?;
        out.report.write_csv(self.path(a::LOSS_CURVE))?;
        let split = SplitRecord { train: out.train_idx, test: out.test_idx.clone() };
        fs::write(self.path(a::SPLIT), serde_json::to_vec(&split)?)?;
        let stats = evaluate(&model, x.select(Axis(0), &out.test_idx).view(), v.select(Axis(0), &out.test_idx).view())?;
        stats.write_summary_csv(self.path(a::TEST_SUMMARY))?;
        stats.write_histogram_csv(self.path(a::TEST_HISTOGRAM))?;
        log::info!("test mse {:.3e}, mean error {:.3e}", stats.mse, stats.mean);
        Ok(vec![a::MODEL, a::LOSS_CURVE, a::SPLIT, a::TEST_SUMMARY, a::TEST_HISTOGRAM])
    }

    fn model(&self) -> Result<EstimatorModel> {
        Ok(EstimatorModel::load(self.need(a::MODEL, Stage::Train)?)?)
    }

    fn estimate(&self) -> Result<Vec<&'static str>> {
        let model = self.model()?;
        let (prof, _) = read_profiles_csv(self.need(a::ONLINE_PROFILES_LRS, Stage::GenProfiles)?)?;
        let est = model.predict(prof.features().view())?;
        write_magnitudes_csv(self.path(a::ESTIMATES), &prof.bus_ids, prof.resolution_min, est.view())?;
        let (_, truth) = read_magnitudes_csv(self.need(a::ONLINE_MEASURED, Stage::SolvePf)?)?;
        let stats = crate::estimator::error_stats(est.view(), truth.view())?;
        stats.write_summary_csv(self.path(a::ESTIMATE_SUMMARY))?;
        stats.write_histogram_csv(self.path(a::ESTIMATE_HISTOGRAM))?;
        Ok(vec![a::ESTIMATES, a::ESTIMATE_SUMMARY, a::ESTIMATE_HISTOGRAM])
    }

    fn drift_check(&self) -> Result<Vec<&'static str>> {
        let d = &self.cfg.drift;
        let (_, train_v) = read_magnitudes_csv(self.need(a::COLLECTED, Stage::Collect)?)?;
        let (_, online_v) = read_magnitudes_csv(self.need(a::ONLINE_COLLECTED, Stage::Collect)?)?;
        let (threshold, loo, calibrated) = match d.threshold {
            Some(t) => (t, Vec::new(), false),
            None => {
                let (t, loo) = calibrate_threshold(train_v.view(), d.windows, d.mode)?;
                (t, loo, true)
            }
        };
        let ind = drift_indicator(train_v.view(), online_v.view(), d.windows, d.mode)?.with_threshold(threshold);
        ind.write_csv(self.path(a::DRIFT))?;
        let status = DriftStatus { tt: ind.tt, threshold, calibrated, triggered: ind.triggered(), leave_one_out: loo };
        fs::write(self.path(a::DRIFT_STATUS), serde_json::to_vec_pretty(&status)?)?;
        log::info!(
            "tt = {:.4e}, threshold {:.4e}: {}",
            ind.tt,
            threshold,
            if ind.triggered() { "triggered" } else { "not triggered" }
        );
        Ok(vec![a::DRIFT, a::DRIFT_STATUS])
    }

    fn update(&self) -> Result<Vec<&'static str>> {
        let status: DriftStatus = serde_json::from_slice(&fs::read(self.need(a::DRIFT_STATUS, Stage::DriftCheck)?)?)?;
        let u = &self.cfg.update;
        if !status.triggered && !u.force {
            let s = UpdateStatus { performed: false, reason: "drift check not triggered".into() };
            fs::write(self.path(a::UPDATE_STATUS), serde_json::to_vec_pretty(&s)?)?;
            return Ok(vec![a::UPDATE_STATUS]);
        }
        let model = self.model()?;
        let (_, x_new, v_new) = self.dataset(a::ONLINE_PROFILES_LRS, a::ONLINE_COLLECTED)?;
        let cut = u.update_samples.min(x_new.nrows() - 1);
        let upd: Vec<usize> = (0..cut).collect();
        let held: Vec<usize> = (cut..x_new.nrows()).collect();
        let (x_upd, v_upd) = (x_new.select(Axis(0), &upd), v_new.select(Axis(0), &upd));
        let (x_held, v_held) = (x_new.select(Axis(0), &held), v_new.select(Axis(0), &held));

        let round = match fs::read_to_string(self.path(a::UPDATE_LOG)) {
            Ok(text) => text.lines().filter(|l| !l.trim().is_empty()).count() as u32,
            Err(_) => 0,
        };
        let out = incremental_update(&model, x_upd.view(), v_upd.view(), Some((x_held.view(), v_held.view())), &u.il, round)?;
        out.model.save(self.path(a::MODEL_UPDATED))?;
        out.report.write_csv(self.path(a::UPDATE_CURVE))?;
        append_update_log(self.path(a::UPDATE_LOG), &out.event)?;

        let (_, x_old, v_old) = self.dataset(a::PROFILES_LRS, a::COLLECTED)?;
        let split: SplitRecord = serde_json::from_slice(&fs::read(self.need(a::SPLIT, Stage::Train)?)?)?;
        let (x_old, v_old) = (x_old.select(Axis(0), &split.test), v_old.select(Axis(0), &split.test));

        let mut w = csv::Writer::from_path(self.path(a::UPDATE_EVAL))?;
        w.write_record(["dataset", "model", "mean", "std", "mean_abs", "max_abs", "mse"])?;
        for (set, x, v) in [("online-held-out", &x_held, &v_held), ("training-test", &x_old, &v_old)] {
            for (name, m) in [("before", &model), ("after", &out.model)] {
                let s = evaluate(m, x.view(), v.view())?;
                w.write_record(
                    [set, name]
                        .map(String::from)
                        .into_iter()
                        .chain([s.mean, s.std, s.mean_abs, s.max_abs, s.mse].map(|x| x.to_string())),
                )?;
            }
        }
        w.flush()?;
        let reason = if status.triggered { "drift check triggered" } else { "forced" };
        let s = UpdateStatus { performed: true, reason: reason.into() };
        fs::write(self.path(a::UPDATE_STATUS), serde_json::to_vec_pretty(&s)?)?;
        Ok(vec![a::MODEL_UPDATED, a::UPDATE_CURVE, a::UPDATE_LOG, a::UPDATE_EVAL, a::UPDATE_STATUS])
    }

    /// Summary table plus plot-data series for whatever earlier stages produced.
    fn report(&self) -> Result<Vec<&'static str>> {
        let dir = self.path(a::REPORT_DIR);
        fs::create_dir_all(&dir)?;
        let mut summary: Vec<(String, String)> = vec![("config_sha256".into(), self.hash.clone())];

        if let Ok(p) = self.need(a::LOSS_CURVE, Stage::Train) {
            let mut rdr = csv::Reader::from_path(p)?;
            let mut train = Vec::new();
            let mut test = Vec::new();
            for rec in rdr.records() {
                let rec = rec?;
                let e: f64 = rec[0].parse().unwrap_or(f64::NAN);
                train.push((e, rec[1].parse().unwrap_or(f64::NAN)));
                if let Ok(t) = rec[2].parse::<f64>() {
                    test.push((e, t));
                }
            }
            write_series(&dir.join("loss_train.dat"), ("epoch", "mse"), train)?;
            write_series(&dir.join("loss_test.dat"), ("epoch", "mse"), test)?;
        }
        if let Ok(p) = self.need(a::TEST_SUMMARY, Stage::Train) {
            summary.extend(read_summary(&p, "test")?);
            copy_histogram(&self.path(a::TEST_HISTOGRAM), &dir.join("test_error_hist.dat"))?;
        }
        if let Ok(p) = self.need(a::ESTIMATE_SUMMARY, Stage::Estimate) {
            summary.extend(read_summary(&p, "online")?);
            copy_histogram(&self.path(a::ESTIMATE_HISTOGRAM), &dir.join("online_error_hist.dat"))?;
        }
        if let Ok(p) = self.need(a::SESSIONS, Stage::Collect) {
            let mut rdr = csv::Reader::from_path(p)?;
            let mut time = Vec::new();
            let mut rounds = Vec::new();
            let mut accepted = 0usize;
            let mut total = 0usize;
            for rec in rdr.records() {
                let rec = rec?;
                if &rec[0] != "training" {
                    continue;
                }
                let id: f64 = rec[1].parse().unwrap_or(f64::NAN);
                rounds.push((id, rec[4].parse().unwrap_or(f64::NAN)));
                time.push((id, rec[7].parse().unwrap_or(f64::NAN)));
                total += 1;
                accepted += (&rec[8] == Outcome::Accepted.to_string().as_str()) as usize;
            }
            write_series(&dir.join("session_rounds.dat"), ("sm_id", "rounds"), rounds)?;
            write_series(&dir.join("session_time.dat"), ("sm_id", "seconds"), time)?;
            summary.push(("sessions_accepted".into(), format!("{accepted}/{total}")));
        }
        if let Ok(p) = self.need(a::COLLECTION, Stage::Collect) {
            let c: CollectionSummary = serde_json::from_slice(&fs::read(p)?)?;
            summary.push(("collection_secs".into(), c.duration_secs.to_string()));
        }
        if let Ok(p) = self.need(a::DRIFT, Stage::DriftCheck) {
            let mut rdr = csv::Reader::from_path(p)?;
            let mut w = Vec::new();
            for rec in rdr.records() {
                let rec = rec?;
                w.push((rec[0].parse().unwrap_or(f64::NAN), rec[1].parse().unwrap_or(f64::NAN)));
            }
            write_series(&dir.join("drift_windows.dat"), ("window", "w1"), w)?;
            let s: DriftStatus = serde_json::from_slice(&fs::read(self.path(a::DRIFT_STATUS))?)?;
            summary.push(("drift_tt".into(), s.tt.to_string()));
            summary.push(("drift_threshold".into(), s.threshold.to_string()));
            summary.push(("drift_triggered".into(), s.triggered.to_string()));
        }
        if let (Ok(before), Ok(after)) = (self.need(a::MODEL, Stage::Train), self.need(a::MODEL_UPDATED, Stage::Update)) {
            let (before, after) = (EstimatorModel::load(before)?, EstimatorModel::load(after)?);
            let (_, x_new, v_new) = self.dataset(a::ONLINE_PROFILES_LRS, a::ONLINE_COLLECTED)?;
            for (name, m) in [("before", &before), ("after", &after)] {
                let s = evaluate(m, x_new.view(), v_new.view())?;
                let per_sample = s.errors.map_axis(Axis(1), |r| r.mean().unwrap_or(0.0));
                let pts = per_sample.iter().enumerate().map(|(t, e)| (t as f64, *e));
                write_series(&dir.join(format!("update_{name}.dat")), ("sample", "mean_error"), pts)?;
                summary.push((format!("online_mean_error_{name}"), s.mean.to_string()));
            }
        }
        let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
        w.write_record(["key", "value"])?;
        for (k, v) in &summary {
            w.write_record([k, v])?;
        }
        w.flush()?;
        Ok(vec![a::REPORT_DIR])
    }
}

fn metered(state: &BusState, ids: &[usize]) -> Result<Array2<f64>> {
    state.magnitudes_for(ids).ok_or_else(|| PipelineError::Data("solved state lacks a metered bus".into()))
}

fn read_summary(path: &Path, prefix: &str) -> Result<Vec<(String, String)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let mut out = Vec::new();
    if let Some(rec) = rdr.records().next() {
        let rec = rec?;
        for (h, v) in headers.iter().zip(rec.iter()) {
            out.push((format!("{prefix}_{h}"), v.to_string()));
        }
    }
    Ok(out)
}

fn copy_histogram(src: &Path, dst: &Path) -> Result<()> {
    let mut rdr = csv::Reader::from_path(src)?;
    let mut pts = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        pts.push((rec[0].parse().unwrap_or(f64::NAN), rec[1].parse().unwrap_or(f64::NAN)));
    }
    write_series(dst, ("error", "count"), pts)
}
