//! Local randomization of metered power.
//!
//! Every smart meter owns secret parameters `(a_p, a_q, c_p, c_q)` and sends
//! `F(x) = 1/(1 + e^(-a·x)) - 0.5 + c` of its active and reactive power
//! instead of the raw readings. `F` is strictly increasing, so ranks survive
//! and a downstream model can still learn from the data, while the per-meter
//! scale and offset hide absolute values and make meters hard to compare.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::feeder::LoadProfile;
use crate::stats::{ks_statistic, pearson, spearman, Histogram};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LrsError {
    #[error("invalid bounds: {0}")]
    InvalidBounds(String),
    #[error("no transform parameters for bus {0}")]
    MissingParams(usize),
    #[error("profiles differ in shape: {0}")]
    ShapeMismatch(String),
}

/// Limits on the sigmoid scale `a` and the offset `c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct BoundsConfig {
    pub a_lo: f64,
    pub a_hi: f64,
    pub c_lo: f64,
    pub c_hi: f64,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        BoundsConfig { a_lo: 3.0, a_hi: 8.0, c_lo: 0.9, c_hi: 1.1 }
    }
}

impl BoundsConfig {
    pub fn new(a_lo: f64, a_hi: f64, c_lo: f64, c_hi: f64) -> Result<Self, LrsError> {
        let b = BoundsConfig { a_lo, a_hi, c_lo, c_hi };
        b.validate()?;
        Ok(b)
    }

    /// The five randomized bound sets compared against the raw data, in
    /// column order: II..VI. Set IV is the table variant of the default
    /// (`c` capped at 1.0 instead of 1.1).
    pub fn comparison_sets() -> [(&'static str, BoundsConfig); 5] {
        [
            ("II", BoundsConfig { a_lo: 0.0, a_hi: 0.2, c_lo: 0.0, c_hi: 0.5 }),
            ("III", BoundsConfig { a_lo: 1.0, a_hi: 1.5, c_lo: 0.5, c_hi: 1.0 }),
            ("IV", BoundsConfig { a_lo: 3.0, a_hi: 8.0, c_lo: 0.9, c_hi: 1.0 }),
            ("V", BoundsConfig { a_lo: 8.0, a_hi: 10.0, c_lo: 1.2, c_hi: 5.0 }),
            ("VI", BoundsConfig { a_lo: 0.0, a_hi: 50.0, c_lo: 0.0, c_hi: 50.0 }),
        ]
    }

    pub fn validate(&self) -> Result<(), LrsError> {
        let finite = [self.a_lo, self.a_hi, self.c_lo, self.c_hi].iter().all(|v| v.is_finite());
        if !finite {
            return Err(LrsError::InvalidBounds(format!("{self:?} has non-finite limits")));
        }
        if !(self.a_lo >= 0.0 && self.a_lo <= self.a_hi && self.a_hi > 0.0) {
            return Err(LrsError::InvalidBounds(format!("need 0 <= a_lo <= a_hi, a_hi > 0; got {self:?}")));
        }
        if self.c_lo > self.c_hi {
            return Err(LrsError::InvalidBounds(format!("need c_lo <= c_hi; got {self:?}")));
        }
        Ok(())
    }

    pub fn contains(&self, p: &TransformParams) -> bool {
        let a_ok = |a: f64| a > 0.0 && a >= self.a_lo && a <= self.a_hi;
        let c_ok = |c: f64| c >= self.c_lo && c <= self.c_hi;
        a_ok(p.a_p) && a_ok(p.a_q) && c_ok(p.c_p) && c_ok(p.c_q)
    }
}

/// A meter's secret randomization parameters. Never serialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformParams {
    pub a_p: f64,
    pub a_q: f64,
    pub c_p: f64,
    pub c_q: f64,
}

impl TransformParams {
    pub fn apply_p(&self, x: f64) -> f64 {
        transform(x, self.a_p, self.c_p)
    }

    pub fn apply_q(&self, x: f64) -> f64 {
        transform(x, self.a_q, self.c_q)
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn positive_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    loop {
        let a = uniform(rng, lo, hi);
        if a > 0.0 {
            return a;
        }
    }
}

/// Draw one meter's parameters uniformly inside `bounds`.
pub fn sample_params(bounds: &BoundsConfig, seed: u64) -> Result<TransformParams, LrsError> {
    bounds.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(TransformParams {
        a_p: positive_uniform(&mut rng, bounds.a_lo, bounds.a_hi),
        a_q: positive_uniform(&mut rng, bounds.a_lo, bounds.a_hi),
        c_p: uniform(&mut rng, bounds.c_lo, bounds.c_hi),
        c_q: uniform(&mut rng, bounds.c_lo, bounds.c_hi),
    })
}

/// Per-meter seed derived from a run seed; each meter draws independently.
pub fn meter_seed(run_seed: u64, bus_id: usize) -> u64 {
    let mut z = run_seed ^ (bus_id as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Parameters for a whole population of meters, keyed by bus id.
///
/// In the simulation every meter agent calls this for itself; the map form
/// only exists so tests and the pipeline can hold all meters in one process.
pub fn sample_meter_params(
    bus_ids: &[usize],
    bounds: &BoundsConfig,
    run_seed: u64,
) -> Result<BTreeMap<usize, TransformParams>, LrsError> {
    bus_ids.iter().map(|&id| Ok((id, sample_params(bounds, meter_seed(run_seed, id))?))).collect()
}

/// `1/(1 + e^(-a·x)) - 0.5 + c`, evaluated as `c + tanh(a·x/2)/2`.
///
/// The tanh form is exact at `x = 0` and avoids cancellation near it. Far in
/// the tails the result saturates at the nearest doubles strictly inside
/// `(c - 0.5, c + 0.5)`.
pub fn transform(x: f64, a: f64, c: f64) -> f64 {
    let y = c + 0.5 * (0.5 * a * x).tanh();
    y.clamp((c - 0.5).next_up(), (c + 0.5).next_down())
}

/// Randomize every P and Q sample with the owning meter's parameters.
pub fn transform_profile(profile: &LoadProfile, params: &BTreeMap<usize, TransformParams>) -> Result<LoadProfile, LrsError> {
    let mut out = profile.clone();
    for (j, id) in profile.bus_ids.iter().enumerate() {
        let tp = params.get(id).ok_or(LrsError::MissingParams(*id))?;
        out.p.column_mut(j).mapv_inplace(|x| tp.apply_p(x));
        out.q.column_mut(j).mapv_inplace(|x| tp.apply_q(x));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct MeterCorrelation {
    pub bus_id: usize,
    pub pearson_p: Option<f64>,
    pub spearman_p: Option<f64>,
    pub pearson_q: Option<f64>,
    pub spearman_q: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CorrelationReport {
    pub meters: Vec<MeterCorrelation>,
    pub hist_original_p: Histogram,
    pub hist_transformed_p: Histogram,
    /// KS statistic between pooled original and pooled transformed P.
    pub ks_p: f64,
    pub ks_q: f64,
}

pub const REPORT_BINS: usize = 40;

/// Per-meter correlation between raw and randomized series plus pooled
/// distribution diagnostics.
pub fn correlation_report(original: &LoadProfile, transformed: &LoadProfile) -> Result<CorrelationReport, LrsError> {
    if original.p.dim() != transformed.p.dim() || original.bus_ids != transformed.bus_ids {
        return Err(LrsError::ShapeMismatch(format!("{:?} vs {:?}", original.p.dim(), transformed.p.dim())));
    }
    let meters = original
        .bus_ids
        .iter()
        .enumerate()
        .map(|(j, &bus_id)| {
            let op = original.p.column(j).to_vec();
            let tp = transformed.p.column(j).to_vec();
            let oq = original.q.column(j).to_vec();
            let tq = transformed.q.column(j).to_vec();
            MeterCorrelation {
                bus_id,
                pearson_p: pearson(&op, &tp),
                spearman_p: spearman(&op, &tp),
                pearson_q: pearson(&oq, &tq),
                spearman_q: spearman(&oq, &tq),
            }
        })
        .collect();
    let pooled_op: Vec<f64> = original.p.iter().copied().collect();
    let pooled_tp: Vec<f64> = transformed.p.iter().copied().collect();
    let pooled_oq: Vec<f64> = original.q.iter().copied().collect();
    let pooled_tq: Vec<f64> = transformed.q.iter().copied().collect();
    Ok(CorrelationReport {
        meters,
        hist_original_p: Histogram::new(&pooled_op, REPORT_BINS),
        hist_transformed_p: Histogram::new(&pooled_tp, REPORT_BINS),
        ks_p: ks_statistic(&pooled_op, &pooled_tp),
        ks_q: ks_statistic(&pooled_oq, &pooled_tq),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::{generate_profiles, Season};
    use crate::stats::variance;
    use proptest::prelude::*;

    #[test]
    fn zero_maps_to_offset() {
        for &(a, c) in &[(3.0, 0.9), (8.0, 1.1), (0.1, 0.0), (50.0, 50.0)] {
            assert_eq!(transform(0.0, a, c), c);
        }
    }

    #[test]
    fn matches_extended_precision_values() {
        // 60-digit evaluations of 1/(1+exp(-a x)) - 0.5 + c
        let cases = [
            (0.5, 5.0, 0.95, 1.374_141_819_978_756_4),
            (-0.25, 3.0, 1.05, 0.870_821_300_824_607),
            (1.5, 8.0, 0.9, 1.399_993_855_825_397_8),
        ];
        for (x, a, c, want) in cases {
            let got = transform(x, a, c);
            assert!((got - want).abs() < 1e-15, "{x} {a} {c}: {got} vs {want}");
        }
    }

    #[test]
    fn saturates_strictly_inside() {
        for &(a, c) in &[(3.0, 0.9), (8.0, 1.1)] {
            assert!(transform(1e6, a, c) < c + 0.5);
            assert!(transform(-1e6, a, c) > c - 0.5);
        }
    }

    #[test]
    fn sampled_params_stay_in_bounds() {
        let b = BoundsConfig::default();
        for seed in 0..500 {
            let p = sample_params(&b, seed).unwrap();
            assert!(b.contains(&p), "{p:?}");
        }
        let point = BoundsConfig::new(5.0, 5.0, 1.0, 1.0).unwrap();
        let p = sample_params(&point, 9).unwrap();
        assert_eq!((p.a_p, p.a_q, p.c_p, p.c_q), (5.0, 5.0, 1.0, 1.0));
        assert_ne!(sample_params(&b, 1).unwrap(), sample_params(&b, 2).unwrap());
        assert!(BoundsConfig::new(8.0, 3.0, 0.9, 1.1).is_err());
        assert!(BoundsConfig::new(1.0, 3.0, 1.1, 0.9).is_err());
    }

    #[test]
    fn zero_profile_maps_to_offsets() {
        let mut prof = generate_profiles(4, 10, 15, 1, Season::Summer).unwrap();
        prof.p.fill(0.0);
        prof.q.fill(0.0);
        let params = sample_meter_params(&prof.bus_ids, &BoundsConfig::default(), 3).unwrap();
        let out = transform_profile(&prof, &params).unwrap();
        for (j, id) in prof.bus_ids.iter().enumerate() {
            assert!(out.p.column(j).iter().all(|&v| v == params[id].c_p));
            assert!(out.q.column(j).iter().all(|&v| v == params[id].c_q));
        }
    }

    #[test]
    fn missing_meter_rejected() {
        let prof = generate_profiles(3, 10, 15, 1, Season::Summer).unwrap();
        let mut params = sample_meter_params(&prof.bus_ids, &BoundsConfig::default(), 3).unwrap();
        params.remove(&2);
        assert_eq!(transform_profile(&prof, &params), Err(LrsError::MissingParams(2)));
    }

    #[test]
    fn report_on_identity_and_transform() {
        let prof = generate_profiles(5, 300, 15, 4, Season::Winter).unwrap();
        let same = correlation_report(&prof, &prof).unwrap();
        for m in &same.meters {
            assert_eq!(m.spearman_p, Some(1.0));
            assert!((m.pearson_p.unwrap() - 1.0).abs() < 1e-12);
        }
        assert_eq!(same.ks_p, 0.0);

        let params = sample_meter_params(&prof.bus_ids, &BoundsConfig::default(), 11).unwrap();
        let out = transform_profile(&prof, &params).unwrap();
        let rep = correlation_report(&prof, &out).unwrap();
        for m in &rep.meters {
            assert_eq!(m.spearman_p, Some(1.0));
            assert_eq!(m.spearman_q, Some(1.0));
        }
        assert!(rep.ks_p > 0.0);

        let mut flat = prof.clone();
        flat.p.column_mut(0).fill(0.2);
        let rep = correlation_report(&flat, &transform_profile(&flat, &params).unwrap()).unwrap();
        assert_eq!(rep.meters[0].pearson_p, None);
    }

    #[test]
    fn wide_bounds_widen_the_pool() {
        let prof = generate_profiles(20, 500, 15, 4, Season::Winter).unwrap();
        let pooled_var = |b: &BoundsConfig| {
            let params = sample_meter_params(&prof.bus_ids, b, 21).unwrap();
            let out = transform_profile(&prof, &params).unwrap();
            variance(&out.p.iter().copied().collect::<Vec<_>>())
        };
        let set_v = BoundsConfig::comparison_sets()[3].1;
        assert!(pooled_var(&set_v) > 10.0 * pooled_var(&BoundsConfig::default()));
    }

    proptest! {
        #[test]
        fn strictly_increasing(a in 3.0f64..8.0, c in 0.9f64..1.1, x1 in -1.5f64..1.5, dx in 1e-6f64..1.0) {
            let x2 = x1 + dx;
            prop_assert!(transform(x1, a, c) < transform(x2, a, c));
        }

        #[test]
        fn bounded(a in 0.01f64..50.0, c in -5.0f64..50.0, x in -1e6f64..1e6) {
            let y = transform(x, a, c);
            prop_assert!(y > c - 0.5 && y < c + 0.5);
        }
    }
}
