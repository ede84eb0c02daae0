//! Explicit couplings that merge two copies of the `D H D` chain.
//!
//! Given starts `z, z'` and Gaussian inputs `G` for the chain from `z`, the
//! constructed inputs `W` drive the chain from `z'` so that the difference of
//! the two states follows a prescribed path `y_0 = z' − z, …, y_n = 0`. The
//! displacement `W − G` and the Jacobian of `G ↦ W` control the relative
//! entropy of the two n-step laws.

use rayon::prelude::*;
use serde::Serialize;

use crate::certify::{self, RateInputs};
use crate::chain::{noise_scale, transition_with_draws, ChainParams, RefreshPlacement, RngStream};
use crate::error::{check_dim, KmcError, Result};
use crate::flow::{flow, inverse_position_map, PhaseState};
use crate::linalg;
use crate::model::Potential;

/// Finite-difference step for the Jacobian of the coupling map.
pub const FD_STEP: f64 = 1e-5;
/// Tolerance on the state difference after each coupled step.
pub const MERGE_TOLERANCE: f64 = 1e-7;

/// Prescribed differences `y_k = (u_k, w_k)` between the two chains.
#[derive(Clone, Debug, Serialize)]
pub struct MergeSchedule {
    /// Number of merging steps after capping at `⌊1/(4t)⌋`.
    pub n: usize,
    pub requested: usize,
    pub u: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
}

impl MergeSchedule {
    pub fn target(&self, k: usize) -> (&[f64], &[f64]) {
        (&self.u[k], &self.w[k])
    }
}

/// Interpolating schedule: velocities drive positions (`u_{k+1} = u_k + ηt·w_k`)
/// and both reach zero after `n` steps.
pub fn merge_schedule(z: &PhaseState, zp: &PhaseState, n: usize, eta: f64, t: f64) -> Result<MergeSchedule> {
    check_dim(z.dim(), zp.dim())?;
    if n < 2 {
        return Err(KmcError::Precondition("merge schedule needs n >= 2".into()));
    }
    if !(eta > 0.0 && eta < 1.0) {
        return Err(KmcError::Precondition(format!("multi-step merging needs 0 < eta < 1, got {eta}")));
    }
    if !(t > 0.0 && t <= 0.125) {
        return Err(KmcError::Precondition(format!("multi-step merging needs 0 < t <= 1/8, got {t}")));
    }
    let n_eff = certify::effective_steps(n, t);
    let nf = n_eff as f64;
    let dx = linalg::dist_vec(&zp.x, &z.x);
    let dv = linalg::dist_vec(&zp.v, &z.v);
    let w: Vec<Vec<f64>> = (0..=n_eff)
        .map(|k| {
            let kf = k as f64;
            let cv = 1.0 - kf / nf - 3.0 * kf * (nf - kf) / (nf * nf - nf);
            let cx = 6.0 * kf * (nf - kf) / ((nf.powi(3) - nf) * eta * t);
            dv.iter().zip(&dx).map(|(v, x)| cv * v - cx * x).collect()
        })
        .collect();
    let mut u = Vec::with_capacity(n_eff + 1);
    u.push(dx.clone());
    for k in 0..n_eff {
        let next: Vec<f64> = u[k].iter().zip(&w[k]).map(|(a, b)| a + eta * t * b).collect();
        u.push(next);
    }
    // The closed-form endpoints are exact; pin them so roundoff cannot leak.
    u[n_eff].iter_mut().for_each(|x| *x = 0.0);
    Ok(MergeSchedule { n: n_eff, requested: n, u, w })
}

/// Solve for the inputs `(W, W')` of one `D H D` step from `zp` so that the
/// result equals the step from `z` with inputs `(g, gp)` shifted by `(u_next, w_next)`.
#[allow(clippy::too_many_arguments)]
fn coupled_step(
    p: &dyn Potential,
    params: &ChainParams,
    z: &PhaseState,
    zp: &PhaseState,
    g: &[f64],
    gp: &[f64],
    u_next: &[f64],
    w_next: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (eta, s) = (params.eta, noise_scale(params.eta));
    let refreshed: Vec<f64> = z.v.iter().zip(g).map(|(v, g)| eta * v + s * g).collect();
    let moved = flow(p, &PhaseState { x: z.x.clone(), v: refreshed }, params.t, &params.integrator, false)?.state;
    let target: Vec<f64> = moved.x.iter().zip(u_next).map(|(a, b)| a + b).collect();
    let sol = inverse_position_map(p, &zp.x, &target, params.t, &params.integrator)?;
    let moved_p = flow(p, &PhaseState { x: zp.x.clone(), v: sol.v.clone() }, params.t, &params.integrator, false)?.state;
    let w: Vec<f64> = sol.v.iter().zip(&zp.v).map(|(a, b)| (a - eta * b) / s).collect();
    let wp: Vec<f64> = (0..z.dim()).map(|i| gp[i] + (w_next[i] + eta * moved.v[i] - eta * moved_p.v[i]) / s).collect();
    Ok((w, wp))
}

/// Coupling map `G ↦ W` for a flat input vector of `n` blocks `(G_k, G'_k)`.
/// With `schedule = None` the chains merge in a single step and later blocks
/// are copied.
pub fn coupling_map(p: &dyn Potential, params: &ChainParams, z: &PhaseState, zp: &PhaseState, schedule: Option<&MergeSchedule>, g: &[f64]) -> Result<Vec<f64>> {
    let d = z.dim();
    if g.len() % (2 * d) != 0 || g.is_empty() {
        return Err(KmcError::InvalidParameter("input length must be a positive multiple of 2d".into()));
    }
    let blocks = g.len() / (2 * d);
    let merge_steps = schedule.map_or(1, |s| s.n);
    let zero = vec![0.0; d];
    let mut out = g.to_vec();
    let (mut a, mut b) = (z.clone(), zp.clone());
    for k in 0..blocks.min(merge_steps) {
        let gk = &g[2 * d * k..2 * d * k + d];
        let gpk = &g[2 * d * k + d..2 * d * (k + 1)];
        let (u_next, w_next) = match schedule {
            Some(s) => s.target(k + 1),
            None => (&zero[..], &zero[..]),
        };
        let (w, wp) = coupled_step(p, params, &a, &b, gk, gpk, u_next, w_next)?;
        out[2 * d * k..2 * d * k + d].copy_from_slice(&w);
        out[2 * d * k + d..2 * d * (k + 1)].copy_from_slice(&wp);
        if k + 1 < blocks.min(merge_steps) {
            a = transition_with_draws(p, params, &a, gk, gpk)?;
            b = transition_with_draws(p, params, &b, &w, &wp)?;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct CoupledDraw {
    pub g: Vec<f64>,
    pub w: Vec<f64>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct DrawDiagnostics {
    /// `½|W − G|²`.
    pub half_sq_displacement: f64,
    /// `‖∇_G W − I‖_F²` by central differences.
    pub jacobian_frobenius_sq: f64,
    /// `|∇_G W − I|` (operator norm).
    pub jacobian_op_norm: f64,
    /// Largest `|z'_k − z_k − y_k|` along the re-simulated pair.
    pub max_path_error: f64,
    /// `|z'_n − z_n|` at the end of the merging phase.
    pub merge_error: f64,
}

impl DrawDiagnostics {
    pub fn surrogate(&self) -> f64 {
        self.half_sq_displacement + self.jacobian_frobenius_sq
    }
}

/// Validated setup shared by single draws and ensembles.
#[derive(Clone, Debug, Serialize)]
pub struct CouplingPlan {
    pub requested_steps: usize,
    pub merge_steps: usize,
    #[serde(skip)]
    pub schedule: Option<MergeSchedule>,
    /// Certified constant at unit curvature.
    pub constant: f64,
    /// Constant times the weighted squared distance of the starts.
    pub bound: f64,
}

fn q_params(params: &ChainParams) -> ChainParams {
    params.clone().with_placement(RefreshPlacement::RefreshFlowRefresh)
}

pub fn plan(p: &dyn Potential, params: &ChainParams, z: &PhaseState, zp: &PhaseState, n: usize) -> Result<CouplingPlan> {
    check_dim(p.dim(), z.dim())?;
    check_dim(p.dim(), zp.dim())?;
    params.validate()?;
    if n == 0 {
        return Err(KmcError::InvalidParameter("coupling needs n >= 1".into()));
    }
    if params.eta >= 1.0 {
        return Err(KmcError::Precondition("coupling needs eta < 1".into()));
    }
    let sm = p.smoothness();
    // A flat potential satisfies the unit-curvature assumptions as is.
    let l = if sm.l > 0.0 { sm.l } else { 1.0 };
    let (unit, _) = certify::rescale(&RateInputs { t: params.t, eta: params.eta, a: 1.0, c_ls: 1.0, l, l_h: sm.l_h })?;
    let dx2 = l * linalg::norm_sq(&linalg::dist_vec(&zp.x, &z.x));
    let dv2 = linalg::norm_sq(&linalg::dist_vec(&zp.v, &z.v));
    if n == 1 {
        if unit.t > 0.25 {
            return Err(KmcError::Precondition(format!("one-step coupling needs t*sqrt(L) <= 1/4, got {}", unit.t)));
        }
        let constant = certify::c1_hat(unit.t, params.eta, unit.l_h);
        let weight = (params.eta * unit.t).powi(2);
        return Ok(CouplingPlan { requested_steps: 1, merge_steps: 1, schedule: None, constant, bound: constant * (dx2 + weight * dv2) });
    }
    // Schedule in unit coordinates, mapped back to the original positions.
    let scale = l.sqrt();
    let to_unit = |s: &PhaseState| PhaseState { x: s.x.iter().map(|x| x * scale).collect(), v: s.v.clone() };
    let mut schedule = merge_schedule(&to_unit(z), &to_unit(zp), n, params.eta, unit.t)?;
    schedule.u.iter_mut().for_each(|u| u.iter_mut().for_each(|x| *x /= scale));
    let m = schedule.n;
    let s = unit.t * m as f64;
    let constant = certify::c_star_hat(s, params.eta, unit.gamma(), unit.l_h);
    let weight = (params.eta * s).powi(2);
    Ok(CouplingPlan { requested_steps: n, merge_steps: m, schedule: Some(schedule), constant, bound: constant * (dx2 + weight * dv2) })
}

/// Build one coupled draw from explicit inputs, re-simulate both chains and
/// check the prescribed differences along the way.
pub fn couple_draw(p: &dyn Potential, params: &ChainParams, z: &PhaseState, zp: &PhaseState, plan: &CouplingPlan, g: &[f64], with_jacobian: bool) -> Result<(CoupledDraw, DrawDiagnostics)> {
    let params = q_params(params);
    let d = z.dim();
    let w = coupling_map(p, &params, z, zp, plan.schedule.as_ref(), g)?;
    let (mut a, mut b) = (z.clone(), zp.clone());
    let mut max_path_error: f64 = 0.0;
    let mut merge_error = f64::NAN;
    let zero = vec![0.0; d];
    for k in 0..plan.merge_steps {
        a = transition_with_draws(p, &params, &a, &g[2 * d * k..2 * d * k + d], &g[2 * d * k + d..2 * d * (k + 1)])?;
        b = transition_with_draws(p, &params, &b, &w[2 * d * k..2 * d * k + d], &w[2 * d * k + d..2 * d * (k + 1)])?;
        let (u, wv) = match &plan.schedule {
            Some(s) => s.target(k + 1),
            None => (&zero[..], &zero[..]),
        };
        let err = (0..d).map(|i| (b.x[i] - a.x[i] - u[i]).powi(2) + (b.v[i] - a.v[i] - wv[i]).powi(2)).sum::<f64>().sqrt();
        max_path_error = max_path_error.max(err);
        if k + 1 == plan.merge_steps {
            merge_error = a.distance(&b);
        }
    }
    if !(max_path_error <= MERGE_TOLERANCE) {
        return Err(KmcError::Assertion(format!("coupled chains deviate from the schedule by {max_path_error:e}")));
    }
    let half_sq_displacement = 0.5 * g.iter().zip(&w).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    let (jacobian_frobenius_sq, jacobian_op_norm) = if with_jacobian {
        let jm = jacobian_minus_identity(p, &params, z, zp, plan, g)?;
        (jm.norm_squared(), linalg::op_norm(&jm))
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok((
        CoupledDraw { g: g.to_vec(), w },
        DrawDiagnostics { half_sq_displacement, jacobian_frobenius_sq, jacobian_op_norm, max_path_error, merge_error },
    ))
}

/// `∇_G W − I` restricted to the merging blocks (later blocks are copied, so
/// their contribution vanishes).
fn jacobian_minus_identity(p: &dyn Potential, params: &ChainParams, z: &PhaseState, zp: &PhaseState, plan: &CouplingPlan, g: &[f64]) -> Result<nalgebra::DMatrix<f64>> {
    let n = (2 * z.dim() * plan.merge_steps).min(g.len());
    let head = &g[..n];
    let mut jm = nalgebra::DMatrix::zeros(n, n);
    let mut probe = head.to_vec();
    for j in 0..n {
        probe[j] = head[j] + FD_STEP;
        let plus = coupling_map(p, params, z, zp, plan.schedule.as_ref(), &probe)?;
        probe[j] = head[j] - FD_STEP;
        let minus = coupling_map(p, params, z, zp, plan.schedule.as_ref(), &probe)?;
        probe[j] = head[j];
        for i in 0..n {
            jm[(i, j)] = (plus[i] - minus[i]) / (2.0 * FD_STEP) - if i == j { 1.0 } else { 0.0 };
        }
    }
    Ok(jm)
}

/// Draw `G`, construct `W` and diagnose one coupled pair.
pub fn n_step_coupling(p: &dyn Potential, params: &ChainParams, z: &PhaseState, zp: &PhaseState, n: usize, rng: &mut RngStream) -> Result<(CoupledDraw, DrawDiagnostics)> {
    let plan = plan(p, params, z, zp, n)?;
    let g = rng.normals(2 * z.dim() * n);
    couple_draw(p, params, z, zp, &plan, &g, true)
}

/// Convenience wrapper for the single-step map `(G, G') ↦ (W, W')`.
pub fn one_step_coupling(p: &dyn Potential, params: &ChainParams, z: &PhaseState, zp: &PhaseState, g: &[f64], gp: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dim(z.dim(), g.len())?;
    check_dim(z.dim(), gp.len())?;
    plan(p, params, z, zp, 1)?;
    let d = z.dim();
    let flat: Vec<f64> = g.iter().chain(gp).copied().collect();
    let w = coupling_map(p, &q_params(params), z, zp, None, &flat)?;
    Ok((w[..d].to_vec(), w[d..].to_vec()))
}

#[derive(Clone, Debug, Serialize)]
pub struct CouplingSummary {
    pub draws: usize,
    pub merge_steps: usize,
    pub mean_half_sq_displacement: f64,
    pub mean_surrogate: f64,
    pub max_jacobian_op_norm: f64,
    pub max_merge_error: f64,
    pub bound: f64,
    pub displacement_within_bound: bool,
    pub surrogate_within_bound: bool,
}

/// Ensemble of `draws` coupled pairs on independent substreams of `seed`.
#[allow(clippy::too_many_arguments)]
pub fn coupling_experiment(
    p: &dyn Potential,
    params: &ChainParams,
    z: &PhaseState,
    zp: &PhaseState,
    n: usize,
    draws: usize,
    seed: u64,
    with_jacobian: bool,
) -> Result<(Vec<DrawDiagnostics>, CouplingSummary)> {
    let plan = plan(p, params, z, zp, n)?;
    let len = 2 * z.dim() * n;
    let diags: Vec<DrawDiagnostics> = (0..draws)
        .into_par_iter()
        .map(|i| {
            let g = RngStream::substream(seed, i as u64).normals(len);
            couple_draw(p, params, z, zp, &plan, &g, with_jacobian).map(|r| r.1)
        })
        .collect::<Result<_>>()?;
    let nf = draws.max(1) as f64;
    let mean_half = diags.iter().map(|d| d.half_sq_displacement).sum::<f64>() / nf;
    let mean_sur = diags.iter().map(|d| d.surrogate()).sum::<f64>() / nf;
    let summary = CouplingSummary {
        draws,
        merge_steps: plan.merge_steps,
        mean_half_sq_displacement: mean_half,
        mean_surrogate: mean_sur,
        max_jacobian_op_norm: diags.iter().map(|d| d.jacobian_op_norm).fold(f64::NAN, f64::max),
        max_merge_error: diags.iter().map(|d| d.merge_error).fold(0.0, f64::max),
        bound: plan.bound,
        displacement_within_bound: mean_half <= plan.bound,
        surrogate_within_bound: with_jacobian && mean_sur <= plan.bound,
    };
    Ok((diags, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DoubleWell1D, MexicanHat2D, ZeroPotential};
    use proptest::prelude::*;

    fn st(x: &[f64], v: &[f64]) -> PhaseState {
        PhaseState::new(x.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn identical_starts_give_identity_coupling() {
        let p = DoubleWell1D::unit_curvature(2.0).unwrap();
        let params = ChainParams::new(0.1, 0.5).unwrap();
        let z = st(&[0.3], &[-0.2]);
        let (w, wp) = one_step_coupling(&p, &params, &z, &z, &[0.7], &[-1.1]).unwrap();
        assert!((w[0] - 0.7).abs() < 1e-10 && (wp[0] + 1.1).abs() < 1e-10);
        let params = ChainParams::new(0.05, 0.9).unwrap();
        let mut rng = RngStream::new(3);
        let (draw, diag) = n_step_coupling(&p, &params, &z, &z, 5, &mut rng).unwrap();
        assert!(draw.g.iter().zip(&draw.w).all(|(a, b)| (a - b).abs() < 1e-10));
        assert!(diag.half_sq_displacement < 1e-18 && diag.jacobian_op_norm < 1e-4);
    }

    #[test]
    fn free_flight_closed_form() {
        let p = ZeroPotential { dim: 2 };
        let (t, eta) = (0.2, 0.4);
        let params = ChainParams::new(t, eta).unwrap();
        let s = noise_scale(eta);
        let (z, zp) = (st(&[0.1, -0.4], &[0.5, 0.0]), st(&[0.6, 0.2], &[-0.3, 1.0]));
        let (g, gp) = ([0.3, -0.8], [1.2, 0.05]);
        let (w, wp) = one_step_coupling(&p, &params, &z, &zp, &g, &gp).unwrap();
        for i in 0..2 {
            // H_{x,x'}(v) = v + (x − x')/t.
            let vt = eta * z.v[i] + s * g[i];
            let h = vt + (z.x[i] - zp.x[i]) / t;
            let expect_w = (h - eta * zp.v[i]) / s;
            assert!((w[i] - expect_w).abs() < 1e-9);
            let expect_wp = gp[i] + eta * (vt - h) / s;
            assert!((wp[i] - expect_wp).abs() < 1e-9);
        }
    }

    #[test]
    fn full_refresh_drops_velocity_dependence() {
        let p = ZeroPotential { dim: 1 };
        let params = ChainParams::new(0.2, 0.0).unwrap();
        let z = st(&[0.0], &[0.0]);
        let a = one_step_coupling(&p, &params, &z, &st(&[0.5], &[0.0]), &[0.3], &[0.1]).unwrap();
        let b = one_step_coupling(&p, &params, &z, &st(&[0.5], &[7.0]), &[0.3], &[0.1]).unwrap();
        assert!((a.0[0] - b.0[0]).abs() < 1e-10 && (a.1[0] - b.1[0]).abs() < 1e-10);
    }

    #[test]
    fn schedule_identities() {
        let (z, zp) = (st(&[0.0], &[0.0]), st(&[1.0], &[0.0]));
        let (eta, t) = (0.5, 0.1);
        let s = merge_schedule(&z, &zp, 2, eta, t).unwrap();
        // w₁ = −6·1·1/((8−2)·0.05) = −20.
        assert!((s.w[1][0] + 20.0).abs() < 1e-12);
        assert_eq!(s.u[0], vec![1.0]);
        assert!(s.u[2][0].abs() < 1e-12 && s.w[2][0].abs() < 1e-12);
        for k in 0..2 {
            assert!((s.u[k + 1][0] - s.u[k][0] - eta * t * s.w[k][0]).abs() < 1e-12);
        }
        let total: f64 = s.w.iter().map(|w| w[0]).sum::<f64>() * eta * t;
        assert!((total - (z.x[0] - zp.x[0])).abs() < 1e-12);
    }

    #[test]
    fn schedule_preconditions() {
        let z = st(&[0.0], &[0.0]);
        assert!(merge_schedule(&z, &z, 4, 0.0, 0.1).is_err());
        assert!(merge_schedule(&z, &z, 4, 0.5, 0.2).is_err());
        assert!(merge_schedule(&z, &z, 1, 0.5, 0.1).is_err());
        assert_eq!(merge_schedule(&z, &z, 100, 0.5, 0.05).unwrap().n, 5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn schedule_invariants(n in 2usize..12, eta in 0.05f64..0.99, t in 0.005f64..0.125,
                               dx in prop::array::uniform2(-3.0f64..3.0), dv in prop::array::uniform2(-3.0f64..3.0)) {
            let z = st(&[0.0, 0.0], &[0.0, 0.0]);
            let zp = st(&dx, &dv);
            let s = merge_schedule(&z, &zp, n, eta, t).unwrap();
            let m = s.n;
            prop_assert_eq!(s.u[0].clone(), dx.to_vec());
            prop_assert_eq!(s.w[0].clone(), dv.to_vec());
            let scale = 1.0 + linalg::norm(&dx) / (eta * t);
            for i in 0..2 {
                prop_assert!(s.w[m][i].abs() < 1e-12 * scale);
                let total: f64 = s.w.iter().map(|w| w[i]).sum::<f64>() * eta * t;
                prop_assert!((total + dx[i]).abs() < 1e-12 * scale.max(1.0) * (1.0 + dx[i].abs()));
            }
            for k in 0..m {
                for i in 0..2 {
                    prop_assert!((s.u[k + 1][i] - s.u[k][i] - eta * t * s.w[k][i]).abs() < 1e-12 * (1.0 + s.u[k][i].abs()));
                }
            }
            let (ndx, ndv) = (linalg::norm(&dx), linalg::norm(&dv));
            for k in 0..=m {
                prop_assert!(linalg::norm(&s.w[k]) <= ndv + 3.0 / (eta * m as f64 * t) * ndx + 1e-9);
                prop_assert!(linalg::norm(&s.u[k]) <= ndx + eta * m as f64 * t * ndv + 1e-9);
            }
        }
    }

    #[test]
    fn one_step_resimulation_on_double_well() {
        let p = DoubleWell1D::unit_curvature(2.0).unwrap();
        let params = ChainParams::new(0.2, 0.3).unwrap();
        let mut rng = RngStream::new(17);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let z = st(&[rng.uniform() * 2.0 - 1.0], &[rng.normal()]);
            let zp = st(&[rng.uniform() * 2.0 - 1.0], &[rng.normal()]);
            let (draw, diag) = n_step_coupling(&p, &params, &z, &zp, 1, &mut rng).unwrap();
            let q = q_params(&params);
            let a = transition_with_draws(&p, &q, &z, &draw.g[..1], &draw.g[1..]).unwrap();
            let b = transition_with_draws(&p, &q, &zp, &draw.w[..1], &draw.w[1..]).unwrap();
            worst = worst.max(a.distance(&b));
            assert!(diag.jacobian_op_norm <= 0.5, "{diag:?}");
        }
        assert!(worst <= 1e-8, "{worst}");
    }

    #[test]
    fn multi_step_merge_on_double_well() {
        let p = DoubleWell1D::unit_curvature(2.0).unwrap();
        let t = 0.05;
        let params = ChainParams::new(t, 1.0 - 2.0 * t).unwrap();
        let n = (0.25 / t).floor() as usize;
        let mut rng = RngStream::new(23);
        for _ in 0..50 {
            let z = st(&[rng.uniform() * 2.0 - 1.0], &[rng.normal()]);
            let zp = st(&[rng.uniform() * 2.0 - 1.0], &[rng.normal()]);
            let (_, diag) = n_step_coupling(&p, &params, &z, &zp, n, &mut rng).unwrap();
            assert!(diag.merge_error <= MERGE_TOLERANCE, "{diag:?}");
            assert!(diag.jacobian_op_norm <= 0.5, "{diag:?}");
        }
    }

    #[test]
    fn mexican_hat_merge() {
        let p = MexicanHat2D::unit_curvature(1.0, 2.0).unwrap();
        let t = 0.1;
        let params = ChainParams::new(t, 1.0 - t).unwrap();
        let z = st(&[0.5, -0.2], &[0.3, 0.1]);
        let zp = st(&[-0.4, 0.6], &[-0.5, 0.2]);
        let (_, diag) = n_step_coupling(&p, &params, &z, &zp, 2, &mut RngStream::new(5)).unwrap();
        assert!(diag.merge_error <= MERGE_TOLERANCE);
    }

    #[test]
    fn displacement_within_certified_bound() {
        let p = DoubleWell1D::unit_curvature(2.0).unwrap();
        let t = 0.05;
        let params = ChainParams::new(t, 1.0 - 2.0 * t).unwrap();
        let (z, zp) = (st(&[-0.5], &[0.2]), st(&[0.4], &[-0.6]));
        let (_, summary) = coupling_experiment(&p, &params, &z, &zp, 5, 1000, 11, false).unwrap();
        assert!(summary.displacement_within_bound, "{summary:?}");
        let (_, one) = coupling_experiment(&p, &ChainParams::new(0.2, 0.3).unwrap(), &z, &zp, 1, 1000, 12, true).unwrap();
        assert!(one.displacement_within_bound && one.surrogate_within_bound, "{one:?}");
    }

    #[test]
    fn step_too_large_is_rejected() {
        let p = DoubleWell1D::unit_curvature(2.0).unwrap();
        let z = st(&[0.0], &[0.0]);
        assert!(plan(&p, &ChainParams::new(0.3, 0.3).unwrap(), &z, &z, 1).is_err());
        assert!(plan(&p, &ChainParams::new(0.2, 0.3).unwrap(), &z, &z, 3).is_err());
    }
}
