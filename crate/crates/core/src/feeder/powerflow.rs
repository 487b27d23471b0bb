use nalgebra::{DMatrix, DVector};
use ndarray::Array2;

use super::{AdmittanceMatrix, BusState, FeederError, FeederModel, LoadProfile, Result};

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    /// Largest tolerated |dP|, |dQ| over PQ buses, p.u.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions { tol: 1e-8, max_iter: 50 }
    }
}

#[derive(Debug, Clone)]
pub struct SnapshotSolution {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    pub iterations: usize,
    pub max_mismatch: f64,
}

/// Net injections `(P_n, Q_n)` at every bus for a given state.
pub fn power_injections(y: &AdmittanceMatrix, v: &[f64], theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = y.dim();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for i in 0..n {
        let mut pi = 0.0;
        let mut qi = 0.0;
        for m in 0..n {
            let ynm = y.get(i, m);
            if ynm.re == 0.0 && ynm.im == 0.0 {
                continue;
            }
            let (s, c) = (theta[i] - theta[m]).sin_cos();
            pi += v[m] * (ynm.re * c + ynm.im * s);
            qi += v[m] * (ynm.re * s - ynm.im * c);
        }
        p[i] = v[i] * pi;
        q[i] = v[i] * qi;
    }
    (p, q)
}

/// Solve one operating point from a flat start.
///
/// `p_inj`/`q_inj` are scheduled net injections per bus (negative for load);
/// entries at the slack bus are ignored.
pub fn solve_snapshot(
    y: &AdmittanceMatrix,
    slack: usize,
    p_inj: &[f64],
    q_inj: &[f64],
    opts: &NewtonOptions,
    step: usize,
) -> Result<SnapshotSolution> {
    let n = y.dim();
    let pq: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let m = pq.len();
    let mut v = vec![1.0; n];
    let mut theta = vec![0.0; n];
    let mut trace = Vec::new();

    for iteration in 0..=opts.max_iter {
        let (p, q) = power_injections(y, &v, &theta);
        let mut mismatch = DVector::<f64>::zeros(2 * m);
        for (k, &i) in pq.iter().enumerate() {
            mismatch[k] = p_inj[i] - p[i];
            mismatch[m + k] = q_inj[i] - q[i];
        }
        let worst = mismatch.amax();
        trace.push(worst);
        if worst < opts.tol {
            return Ok(SnapshotSolution { v, theta, iterations: iteration, max_mismatch: worst });
        }
        if iteration == opts.max_iter || !worst.is_finite() {
            break;
        }

        let mut jac = DMatrix::<f64>::zeros(2 * m, 2 * m);
        for (a, &i) in pq.iter().enumerate() {
            let gii = y.conductance(i, i);
            let bii = y.susceptance(i, i);
            for (b, &j) in pq.iter().enumerate() {
                if i == j {
                    jac[(a, b)] = -q[i] - bii * v[i] * v[i];
                    jac[(a, m + b)] = p[i] / v[i] + gii * v[i];
                    jac[(m + a, b)] = p[i] - gii * v[i] * v[i];
                    jac[(m + a, m + b)] = q[i] / v[i] - bii * v[i];
                } else {
                    let yij = y.get(i, j);
                    if yij.re == 0.0 && yij.im == 0.0 {
                        continue;
                    }
                    let (s, c) = (theta[i] - theta[j]).sin_cos();
                    let (g, bb) = (yij.re, yij.im);
                    jac[(a, b)] = v[i] * v[j] * (g * s - bb * c);
                    jac[(a, m + b)] = v[i] * (g * c + bb * s);
                    jac[(m + a, b)] = -v[i] * v[j] * (g * c + bb * s);
                    jac[(m + a, m + b)] = v[i] * (g * s - bb * c);
                }
            }
        }

        let lu = jac.clone().lu();
        let dx = match lu.solve(&mismatch) {
            Some(dx) if dx.iter().all(|d| d.is_finite()) => dx,
            _ => {
                let sv = jac.singular_values();
                let condition = sv.max() / sv.min();
                return Err(FeederError::SingularJacobian { step, iteration, condition });
            }
        };
        for (k, &i) in pq.iter().enumerate() {
            theta[i] += dx[k];
            v[i] += dx[m + k];
        }
    }
    Err(FeederError::Diverged { step, iterations: opts.max_iter, trace })
}

/// Newton-Raphson power flow for every time step of a load profile.
///
/// The slack bus is held at `1.0∠0`. Loads are consumption, so they enter as
/// negative injections. Each step starts flat (`V = 1`, `θ = 0`).
pub fn solve_power_flow(
    feeder: &FeederModel,
    y: &AdmittanceMatrix,
    loads: &LoadProfile,
    opts: &NewtonOptions,
) -> Result<BusState> {
    if !(opts.tol > 0.0) {
        return Err(FeederError::InvalidArgument(format!("tolerance must be positive, got {}", opts.tol)));
    }
    let n = feeder.n_buses();
    if y.dim() != n {
        return Err(FeederError::ProfileMismatch(format!("admittance matrix is {0}x{0} but feeder has {n} buses", y.dim())));
    }
    let slack = feeder.slack_index();
    let mut cols = Vec::with_capacity(loads.n_buses());
    for id in &loads.bus_ids {
        let idx = feeder.index_of(*id).ok_or_else(|| FeederError::ProfileMismatch(format!("bus {id} not in feeder")))?;
        if idx == slack {
            return Err(FeederError::ProfileMismatch(format!("bus {id} is the slack bus")));
        }
        cols.push(idx);
    }

    let t_len = loads.samples();
    let mut v = Array2::zeros((t_len, n));
    let mut theta = Array2::zeros((t_len, n));
    let mut p_inj = vec![0.0; n];
    let mut q_inj = vec![0.0; n];
    for t in 0..t_len {
        p_inj.iter_mut().for_each(|x| *x = 0.0);
        q_inj.iter_mut().for_each(|x| *x = 0.0);
        for (j, &idx) in cols.iter().enumerate() {
            p_inj[idx] = -loads.p[[t, j]];
            q_inj[idx] = -loads.q[[t, j]];
        }
        let sol = solve_snapshot(y, slack, &p_inj, &q_inj, opts, t)?;
        for i in 0..n {
            v[[t, i]] = sol.v[i];
            theta[[t, i]] = sol.theta[i];
        }
    }
    Ok(BusState { bus_ids: feeder.bus_ids(), resolution_min: loads.resolution_min, v, theta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::{build_admittance, Bus, BusKind, Line};

    fn two_bus() -> FeederModel {
        FeederModel::new(
            vec![Bus { id: 0, kind: BusKind::Slack }, Bus { id: 1, kind: BusKind::Pq }],
            vec![Line { from: 0, to: 1, r: 0.01, x: 0.01 }],
        )
        .unwrap()
    }

    fn profile(ids: Vec<usize>, p: Vec<f64>, q: Vec<f64>) -> LoadProfile {
        let n = ids.len();
        LoadProfile::new(ids, 15, Array2::from_shape_vec((1, n), p).unwrap(), Array2::from_shape_vec((1, n), q).unwrap()).unwrap()
    }

    #[test]
    fn no_load_is_flat() {
        let f = FeederModel::radial(8, 1).unwrap();
        let y = build_admittance(&f).unwrap();
        let ids = f.load_bus_ids();
        let n = ids.len();
        let st = solve_power_flow(&f, &y, &profile(ids, vec![0.0; n], vec![0.0; n]), &NewtonOptions::default()).unwrap();
        assert!(st.v.iter().all(|&v| v == 1.0));
        assert!(st.theta.iter().all(|&t| t == 0.0));
    }

    /// Closed-form receiving-end voltage of a single line feeding a PQ load:
    /// V^4 + (2(RP + XQ) - V0^2) V^2 + (R^2 + X^2)(P^2 + Q^2) = 0.
    fn analytic_v2(r: f64, x: f64, p: f64, q: f64) -> f64 {
        let b = 2.0 * (r * p + x * q) - 1.0;
        let c = (r * r + x * x) * (p * p + q * q);
        ((-b + (b * b - 4.0 * c).sqrt()) / 2.0).sqrt()
    }

    #[test]
    fn two_bus_matches_quadratic() {
        let f = two_bus();
        let y = build_admittance(&f).unwrap();
        let st = solve_power_flow(&f, &y, &profile(vec![1], vec![0.1], vec![0.0329]), &NewtonOptions::default()).unwrap();
        let v2 = analytic_v2(0.01, 0.01, 0.1, 0.0329);
        assert!((st.v[[0, 1]] - v2).abs() < 1e-8, "{} vs {}", st.v[[0, 1]], v2);
    }

    #[test]
    fn bad_tolerance_and_divergence() {
        let f = two_bus();
        let y = build_admittance(&f).unwrap();
        let loads = profile(vec![1], vec![0.1], vec![0.03]);
        let bad = NewtonOptions { tol: 0.0, max_iter: 10 };
        assert!(matches!(solve_power_flow(&f, &y, &loads, &bad), Err(FeederError::InvalidArgument(_))));
        // far beyond the nose of the PV curve: no solution exists
        let huge = profile(vec![1], vec![500.0], vec![100.0]);
        match solve_power_flow(&f, &y, &huge, &NewtonOptions::default()) {
            Err(FeederError::Diverged { trace, .. }) => assert!(!trace.is_empty()),
            Err(FeederError::SingularJacobian { .. }) => {}
            other => panic!("expected failure, got {other:?}"),
        }
    }
}
