//! Distribution feeder models and the ground-truth side of the simulation.
//!
//! A [`FeederModel`] is a set of buses (one slack, the rest PQ loads) joined by
//! series `r + jx` lines. From it we derive the nodal [`AdmittanceMatrix`],
//! solve AC power flow with Newton-Raphson ([`solve_power_flow`]) and add
//! smart-meter measurement noise ([`inject_measurement_noise`]).

mod io;
mod powerflow;
mod profiles;

pub use io::{read_profiles_csv, read_voltages_csv, write_profiles_csv, write_voltages_csv, ProfileCsvMeta};
pub use powerflow::{power_injections, solve_power_flow, solve_snapshot, NewtonOptions, SnapshotSolution};
pub use profiles::{generate_profiles, Season, POWER_FACTOR};

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, thiserror::Error)]
pub enum FeederError {
    #[error("feeder must have exactly one slack bus, found {0}")]
    SlackCount(usize),
    #[error("duplicate bus id {0}")]
    DuplicateBus(usize),
    #[error("line {from}-{to} references an unknown bus")]
    UnknownBus { from: usize, to: usize },
    #[error("duplicate line between buses {0} and {1}")]
    DuplicateLine(usize, usize),
    #[error("line {from}-{to} has zero impedance")]
    ZeroImpedance { from: usize, to: usize },
    #[error("line {from}-{to} has invalid impedance r={r}, x={x} (need r >= 0, x > 0)")]
    InvalidImpedance { from: usize, to: usize, r: f64, x: f64 },
    #[error("line {0}-{0} is a self loop")]
    SelfLoop(usize),
    #[error("feeder is not connected ({reached} of {total} buses reachable from the slack)")]
    Disconnected { reached: usize, total: usize },
    #[error("feeder needs at least two buses")]
    TooSmall,
    #[error("load profile does not match feeder: {0}")]
    ProfileMismatch(String),
    #[error("newton-raphson diverged at step {step} after {iterations} iterations; mismatch trace {trace:?}")]
    Diverged { step: usize, iterations: usize, trace: Vec<f64> },
    #[error("singular jacobian at step {step}, iteration {iteration} (condition estimate {condition:.3e})")]
    SingularJacobian { step: usize, iteration: usize, condition: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, FeederError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BusKind {
    Slack,
    Pq,
}

impl fmt::Display for BusKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BusKind::Slack => f.write_str("slack"),
            BusKind::Pq => f.write_str("pq"),
        }
    }
}

impl FromStr for BusKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "slack" => Ok(BusKind::Slack),
            "pq" => Ok(BusKind::Pq),
            other => Err(format!("unknown bus type `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bus {
    pub id: usize,
    pub kind: BusKind,
}

/// Series branch between two buses, impedance in p.u.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
}

impl Line {
    pub fn admittance(&self) -> Complex64 {
        Complex64::new(self.r, self.x).inv()
    }
}

/// A validated distribution network.
///
/// Construction checks that there is exactly one slack bus, that bus ids are
/// unique, that every line has `r >= 0`, `x > 0`, and that the line graph is
/// connected. Duplicate lines are rejected later by [`build_admittance`].
#[derive(Debug, Clone, PartialEq)]
pub struct FeederModel {
    buses: Vec<Bus>,
    lines: Vec<Line>,
    base_voltage: f64,
    index: HashMap<usize, usize>,
}

impl FeederModel {
    pub fn new(buses: Vec<Bus>, lines: Vec<Line>) -> Result<Self> {
        if buses.len() < 2 {
            return Err(FeederError::TooSmall);
        }
        let slack = buses.iter().filter(|b| b.kind == BusKind::Slack).count();
        if slack != 1 {
            return Err(FeederError::SlackCount(slack));
        }
        let mut index = HashMap::with_capacity(buses.len());
        for (i, b) in buses.iter().enumerate() {
            if index.insert(b.id, i).is_some() {
                return Err(FeederError::DuplicateBus(b.id));
            }
        }
        for l in &lines {
            if !index.contains_key(&l.from) || !index.contains_key(&l.to) {
                return Err(FeederError::UnknownBus { from: l.from, to: l.to });
            }
            if l.from == l.to {
                return Err(FeederError::SelfLoop(l.from));
            }
            if l.r == 0.0 && l.x == 0.0 {
                return Err(FeederError::ZeroImpedance { from: l.from, to: l.to });
            }
            if !(l.r >= 0.0 && l.x > 0.0) || !l.r.is_finite() || !l.x.is_finite() {
                return Err(FeederError::InvalidImpedance { from: l.from, to: l.to, r: l.r, x: l.x });
            }
        }
        let model = FeederModel { buses, lines, base_voltage: 1.0, index };
        model.check_connected()?;
        Ok(model)
    }

    fn check_connected(&self) -> Result<()> {
        let n = self.buses.len();
        let mut adj = vec![Vec::new(); n];
        for l in &self.lines {
            let (a, b) = (self.index[&l.from], self.index[&l.to]);
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; n];
        let start = self.slack_index();
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        let mut reached = 1;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    reached += 1;
                    queue.push_back(v);
                }
            }
        }
        if reached != n {
            return Err(FeederError::Disconnected { reached, total: n });
        }
        Ok(())
    }

    /// Random radial feeder: bus 0 is the slack, every new bus hangs off an
    /// earlier one. Attachment favours the most recent bus so that feeders
    /// look like a few long laterals rather than a star.
    pub fn radial(n_buses: usize, seed: u64) -> Result<Self> {
        if n_buses < 2 {
            return Err(FeederError::TooSmall);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
        let mut buses = vec![Bus { id: 0, kind: BusKind::Slack }];
        let mut lines = Vec::with_capacity(n_buses - 1);
        for id in 1..n_buses {
            buses.push(Bus { id, kind: BusKind::Pq });
            let parent = if id == 1 || rng.random::<f64>() < 0.6 { id - 1 } else { rng.random_range(0..id) };
            let r = rng.random_range(0.002..0.006);
            let x = r * rng.random_range(0.3..0.6);
            lines.push(Line { from: parent, to: id, r, x });
        }
        Self::new(buses, lines)
    }

    /// Radial feeder closed into a ring by one extra tie line between the
    /// last bus and the first PQ bus.
    pub fn ring(n_buses: usize, seed: u64) -> Result<Self> {
        let radial = Self::radial(n_buses, seed)?;
        if n_buses < 3 {
            return Ok(radial);
        }
        let mut lines = radial.lines.clone();
        let last = n_buses - 1;
        if !lines.iter().any(|l| (l.from == 1 && l.to == last) || (l.from == last && l.to == 1)) {
            lines.push(Line { from: last, to: 1, r: 0.004, x: 0.002 });
        }
        Self::new(radial.buses, lines)
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn base_voltage(&self) -> f64 {
        self.base_voltage
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn slack_index(&self) -> usize {
        self.buses.iter().position(|b| b.kind == BusKind::Slack).expect("validated feeder has a slack bus")
    }

    pub fn index_of(&self, id: usize) -> Option<usize> {
        self.index.get(&id).copied()
    }

    /// Ids of the PQ buses, in bus order. These are the metered households.
    pub fn load_bus_ids(&self) -> Vec<usize> {
        self.buses.iter().filter(|b| b.kind == BusKind::Pq).map(|b| b.id).collect()
    }

    pub fn bus_ids(&self) -> Vec<usize> {
        self.buses.iter().map(|b| b.id).collect()
    }

    pub fn is_radial(&self) -> bool {
        self.lines.len() + 1 == self.buses.len()
    }
}

/// Nodal admittance matrix `Y = G + jB` in p.u. siemens, indexed by bus order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmittanceMatrix {
    y: Array2<Complex64>,
}

impl AdmittanceMatrix {
    pub fn from_matrix(y: Array2<Complex64>) -> Self {
        assert_eq!(y.nrows(), y.ncols(), "admittance matrix must be square");
        AdmittanceMatrix { y }
    }

    pub fn dim(&self) -> usize {
        self.y.nrows()
    }

    pub fn get(&self, n: usize, m: usize) -> Complex64 {
        self.y[[n, m]]
    }

    pub fn conductance(&self, n: usize, m: usize) -> f64 {
        self.y[[n, m]].re
    }

    pub fn susceptance(&self, n: usize, m: usize) -> f64 {
        self.y[[n, m]].im
    }

    pub fn matrix(&self) -> &Array2<Complex64> {
        &self.y
    }
}

/// Stamp every line into the nodal admittance matrix.
///
/// `Y[n][m] = -1/(r+jx)` for each line `(n, m)` and `Y[n][n]` is the sum of
/// the incident line admittances. No shunt elements are modelled.
pub fn build_admittance(model: &FeederModel) -> Result<AdmittanceMatrix> {
    let n = model.n_buses();
    let mut seen = BTreeSet::new();
    let mut y = Array2::<Complex64>::zeros((n, n));
    for l in model.lines() {
        let key = (l.from.min(l.to), l.from.max(l.to));
        if !seen.insert(key) {
            return Err(FeederError::DuplicateLine(key.0, key.1));
        }
        let z = Complex64::new(l.r, l.x);
        if z.norm() == 0.0 {
            return Err(FeederError::ZeroImpedance { from: l.from, to: l.to });
        }
        let ys = z.inv();
        let a = model.index_of(l.from).expect("validated");
        let b = model.index_of(l.to).expect("validated");
        y[[a, a]] += ys;
        y[[b, b]] += ys;
        y[[a, b]] -= ys;
        y[[b, a]] -= ys;
    }
    Ok(AdmittanceMatrix { y })
}

/// Per-bus active and reactive consumption, `T` samples by `N` load buses.
///
/// Positive values are consumption. The slack bus carries no load and is not
/// part of a profile.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadProfile {
    pub bus_ids: Vec<usize>,
    pub resolution_min: u32,
    pub p: Array2<f64>,
    pub q: Array2<f64>,
}

impl LoadProfile {
    pub fn new(bus_ids: Vec<usize>, resolution_min: u32, p: Array2<f64>, q: Array2<f64>) -> Result<Self> {
        if p.dim() != q.dim() {
            return Err(FeederError::ProfileMismatch(format!("P shape {:?} differs from Q shape {:?}", p.dim(), q.dim())));
        }
        if p.ncols() != bus_ids.len() {
            return Err(FeederError::ProfileMismatch(format!("{} columns for {} buses", p.ncols(), bus_ids.len())));
        }
        Ok(LoadProfile { bus_ids, resolution_min, p, q })
    }

    pub fn samples(&self) -> usize {
        self.p.nrows()
    }

    pub fn n_buses(&self) -> usize {
        self.bus_ids.len()
    }

    /// Scale every sample by `k`.
    pub fn scaled(&self, k: f64) -> LoadProfile {
        LoadProfile { bus_ids: self.bus_ids.clone(), resolution_min: self.resolution_min, p: &self.p * k, q: &self.q * k }
    }

    /// Contiguous sample range `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> LoadProfile {
        use ndarray::s;
        LoadProfile {
            bus_ids: self.bus_ids.clone(),
            resolution_min: self.resolution_min,
            p: self.p.slice(s![start..end, ..]).to_owned(),
            q: self.q.slice(s![start..end, ..]).to_owned(),
        }
    }

    /// Model input features: `[P_1..P_N, Q_1..Q_N]` per sample.
    pub fn features(&self) -> Array2<f64> {
        ndarray::concatenate(ndarray::Axis(1), &[self.p.view(), self.q.view()]).expect("P and Q share a shape")
    }
}

/// Voltage magnitudes and angles for every bus at every time step.
#[derive(Debug, Clone, PartialEq)]
pub struct BusState {
    pub bus_ids: Vec<usize>,
    pub resolution_min: u32,
    /// `T x N` magnitudes in p.u.
    pub v: Array2<f64>,
    /// `T x N` angles in radians.
    pub theta: Array2<f64>,
}

impl BusState {
    pub fn samples(&self) -> usize {
        self.v.nrows()
    }

    /// Magnitudes restricted to the given buses, in the given order.
    pub fn magnitudes_for(&self, ids: &[usize]) -> Option<Array2<f64>> {
        let cols: Option<Vec<usize>> = ids.iter().map(|id| self.bus_ids.iter().position(|b| b == id)).collect();
        let cols = cols?;
        Some(Array2::from_shape_fn((self.samples(), cols.len()), |(t, j)| self.v[[t, cols[j]]]))
    }
}

/// Add zero-mean Gaussian error to every magnitude.
///
/// `three_sigma_pct` is the 3-sigma band in percent of the nominal 1.0 p.u.,
/// so `1.0` gives `sigma = 0.01 / 3`. Angles are left alone. The slack bus is
/// noised like any other bus; callers that need it pinned should drop it.
pub fn inject_measurement_noise(states: &BusState, three_sigma_pct: f64, seed: u64) -> Result<BusState> {
    if !(three_sigma_pct >= 0.0) || !three_sigma_pct.is_finite() {
        return Err(FeederError::InvalidArgument(format!("noise percentage must be nonnegative, got {three_sigma_pct}")));
    }
    let mut out = states.clone();
    if three_sigma_pct == 0.0 {
        return Ok(out);
    }
    let sigma = three_sigma_pct / 100.0 / 3.0;
    let normal = Normal::new(0.0, sigma).expect("sigma is positive and finite");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in out.v.iter_mut() {
        *v += normal.sample(&mut rng);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn two_bus(r: f64, x: f64) -> FeederModel {
        FeederModel::new(
            vec![Bus { id: 1, kind: BusKind::Slack }, Bus { id: 2, kind: BusKind::Pq }],
            vec![Line { from: 1, to: 2, r, x }],
        )
        .unwrap()
    }

    #[test]
    fn single_line_admittance() {
        let y = build_admittance(&two_bus(0.01, 0.01)).unwrap();
        let y12 = -Complex64::new(0.01, 0.01).inv();
        assert_relative_eq!(y.get(0, 1).re, y12.re, max_relative = 1e-15);
        assert_relative_eq!(y.get(0, 1).im, y12.im, max_relative = 1e-15);
        assert_eq!(y.get(0, 0), -y12);
        assert_eq!(y.get(1, 1), -y12);
    }

    #[test]
    fn three_bus_matches_summed_stamps() {
        let lines = vec![Line { from: 0, to: 1, r: 0.01, x: 0.02 }, Line { from: 1, to: 2, r: 0.03, x: 0.01 }];
        let model = FeederModel::new(
            vec![Bus { id: 0, kind: BusKind::Slack }, Bus { id: 1, kind: BusKind::Pq }, Bus { id: 2, kind: BusKind::Pq }],
            lines.clone(),
        )
        .unwrap();
        let y = build_admittance(&model).unwrap();

        // independent construction: sum of 2x2 [[y, -y], [-y, y]] stamps
        let mut expected = Array2::<Complex64>::zeros((3, 3));
        for l in &lines {
            let ys = Complex64::new(1.0, 0.0) / Complex64::new(l.r, l.x);
            let stamp = [[ys, -ys], [-ys, ys]];
            let idx = [l.from, l.to];
            for a in 0..2 {
                for b in 0..2 {
                    expected[[idx[a], idx[b]]] += stamp[a][b];
                }
            }
        }
        for n in 0..3 {
            for m in 0..3 {
                assert!((y.get(n, m) - expected[[n, m]]).norm() < 1e-9);
            }
        }
        assert_eq!(y.get(0, 2), Complex64::new(0.0, 0.0));
    }

    #[test]
    fn rejects_bad_models() {
        let buses = vec![Bus { id: 0, kind: BusKind::Slack }, Bus { id: 1, kind: BusKind::Pq }];
        assert!(matches!(FeederModel::new(buses.clone(), vec![]), Err(FeederError::Disconnected { .. })));
        assert!(matches!(
            FeederModel::new(buses.clone(), vec![Line { from: 0, to: 1, r: 0.0, x: 0.0 }]),
            Err(FeederError::ZeroImpedance { .. })
        ));
        assert!(matches!(
            FeederModel::new(buses.clone(), vec![Line { from: 0, to: 1, r: 0.01, x: -0.1 }]),
            Err(FeederError::InvalidImpedance { .. })
        ));
        let two_slack = vec![Bus { id: 0, kind: BusKind::Slack }, Bus { id: 1, kind: BusKind::Slack }];
        assert!(matches!(
            FeederModel::new(two_slack, vec![Line { from: 0, to: 1, r: 0.01, x: 0.01 }]),
            Err(FeederError::SlackCount(2))
        ));
        let dup = vec![Bus { id: 0, kind: BusKind::Slack }, Bus { id: 0, kind: BusKind::Pq }];
        assert!(matches!(FeederModel::new(dup, vec![]), Err(FeederError::DuplicateBus(0))));
    }

    #[test]
    fn duplicate_line_rejected() {
        let model = FeederModel::new(
            vec![Bus { id: 0, kind: BusKind::Slack }, Bus { id: 1, kind: BusKind::Pq }],
            vec![Line { from: 0, to: 1, r: 0.01, x: 0.01 }, Line { from: 1, to: 0, r: 0.02, x: 0.01 }],
        )
        .unwrap();
        assert!(matches!(build_admittance(&model), Err(FeederError::DuplicateLine(0, 1))));
    }

    #[test]
    fn radial_generator_shapes() {
        for seed in 0..20 {
            let f = FeederModel::radial(15, seed).unwrap();
            assert!(f.is_radial());
            assert_eq!(f.load_bus_ids().len(), 14);
            let y = build_admittance(&f).unwrap();
            for n in 0..15 {
                let off: Complex64 = (0..15).filter(|&m| m != n).map(|m| y.get(n, m)).sum();
                assert!((off + y.get(n, n)).norm() < 1e-9);
                for m in 0..15 {
                    assert_eq!(y.get(n, m), y.get(m, n));
                }
            }
        }
        let ring = FeederModel::ring(10, 3).unwrap();
        assert!(!ring.is_radial());
        assert!(build_admittance(&ring).is_ok());
    }

    fn flat_state(t: usize, n: usize) -> BusState {
        BusState {
            bus_ids: (0..n).collect(),
            resolution_min: 15,
            v: Array2::from_elem((t, n), 1.0),
            theta: Array2::zeros((t, n)),
        }
    }

    #[test]
    fn zero_noise_is_identity() {
        let s = flat_state(10, 4);
        assert_eq!(inject_measurement_noise(&s, 0.0, 1).unwrap(), s);
        assert!(inject_measurement_noise(&s, -0.1, 1).is_err());
    }

    #[test]
    fn noise_statistics() {
        let s = flat_state(25_000, 4);
        let noisy = inject_measurement_noise(&s, 1.0, 42).unwrap();
        let diff: Vec<f64> = noisy.v.iter().zip(s.v.iter()).map(|(a, b)| a - b).collect();
        let n = diff.len() as f64;
        let mean = diff.iter().sum::<f64>() / n;
        let var = diff.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let sigma = 0.01 / 3.0;
        assert!((var.sqrt() - sigma).abs() / sigma < 0.05);
        assert!(mean.abs() < 3.0 * sigma / n.sqrt());
        assert_eq!(noisy.theta, s.theta);
        assert_eq!(inject_measurement_noise(&s, 1.0, 42).unwrap(), noisy);
    }
}
