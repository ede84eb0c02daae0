//! Hamiltonian flow `ẋ = v, v̇ = −∇U(x)`: a high-accuracy reference
//! integrator, the velocity Verlet map, flow Jacobians, the comparison matrix
//! `E_t`, and the inverse-position map `K`.
//!
//! Jacobians are returned with rows indexed by *input* coordinates, i.e. the
//! transpose of the usual Jacobian, so that `∇(Ψ∘Φ) = ∇Φ · (∇Ψ∘Φ)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, KmcError, Result};
use crate::linalg;
use crate::model::{require_hessian, Potential};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseState {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

impl PhaseState {
    pub fn new(x: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        check_dim(x.len(), v.len())?;
        if x.iter().chain(&v).any(|c| !c.is_finite()) {
            return Err(KmcError::InvalidParameter("phase state has non-finite entries".into()));
        }
        Ok(Self { x, v })
    }

    pub fn zeros(d: usize) -> Self {
        Self { x: vec![0.0; d], v: vec![0.0; d] }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    pub fn energy(&self, p: &dyn Potential) -> f64 {
        p.value(&self.x) + 0.5 * linalg::norm_sq(&self.v)
    }

    /// Concatenation `(x, v)`.
    pub fn to_vec(&self) -> Vec<f64> {
        self.x.iter().chain(&self.v).copied().collect()
    }

    pub fn from_slice(z: &[f64]) -> Self {
        let d = z.len() / 2;
        Self { x: z[..d].to_vec(), v: z[d..].to_vec() }
    }

    pub fn distance(&self, other: &PhaseState) -> f64 {
        (linalg::norm_sq(&sub(&self.x, &other.x)) + linalg::norm_sq(&sub(&self.v, &other.v))).sqrt()
    }
}

pub(crate) fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(a, b)| a - b).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum IntegratorConfig {
    /// Classical fourth-order Runge-Kutta with a fixed number of substeps chosen
    /// from the curvature bound so that the per-flow error is below `tolerance`.
    Reference { tolerance: f64, max_substeps: usize },
    /// `count` velocity-Verlet steps of size `step`.
    Verlet { step: f64, count: usize },
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig::Reference { tolerance: 1e-10, max_substeps: 1 << 22 }
    }
}

impl IntegratorConfig {
    pub fn reference(tolerance: f64) -> Self {
        IntegratorConfig::Reference { tolerance, max_substeps: 1 << 22 }
    }

    /// Verlet emulating a flow of duration `t` with `count` steps.
    pub fn verlet_for(t: f64, count: usize) -> Self {
        IntegratorConfig::Verlet { step: t / count as f64, count }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            IntegratorConfig::Reference { tolerance, max_substeps } => {
                if !(tolerance > 0.0) || max_substeps < 2 {
                    return Err(KmcError::InvalidParameter("reference integrator needs tolerance > 0 and a substep budget >= 2".into()));
                }
            }
            IntegratorConfig::Verlet { step, count } => {
                if !(step > 0.0) || count == 0 {
                    return Err(KmcError::InvalidParameter("verlet needs step > 0 and count >= 1".into()));
                }
            }
        }
        Ok(())
    }

    fn tolerance(&self) -> f64 {
        match *self {
            IntegratorConfig::Reference { tolerance, .. } => tolerance,
            IntegratorConfig::Verlet { .. } => 1e-10,
        }
    }

    fn budget(&self) -> usize {
        match *self {
            IntegratorConfig::Reference { max_substeps, .. } => max_substeps,
            IntegratorConfig::Verlet { .. } => 1 << 22,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FlowResult {
    pub state: PhaseState,
    /// `∇Φ_t`, rows indexed by inputs.
    pub jacobian: Option<DMatrix<f64>>,
    pub e_t: Option<DMatrix<f64>>,
    pub energy_before: f64,
    pub energy_after: f64,
    pub substeps: usize,
}

/// Even substep count for the reference integrator.
pub fn reference_substeps(t: f64, l: f64, tolerance: f64, budget: usize) -> Result<usize> {
    let omega = l.max(0.0).sqrt();
    let h_omega = (10.0 * tolerance).powf(0.25).min(0.1);
    let mut m = (t * omega / h_omega).ceil() as usize;
    m = m.max(2);
    m += m % 2;
    if m > budget {
        return Err(KmcError::ToleranceNotReached { budget });
    }
    Ok(m)
}

struct Rk4Out {
    z: Vec<f64>,
    jac: Option<DMatrix<f64>>,
    grid_x: Vec<Vec<f64>>,
}

/// `A·M` with `A = [[0, I], [−H, 0]]`.
fn variational_rhs(h: &DMatrix<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
    let d = h.nrows();
    let n = m.ncols();
    let mut out = DMatrix::zeros(2 * d, n);
    out.view_mut((0, 0), (d, n)).copy_from(&m.view((d, 0), (d, n)));
    let low = -(h * m.view((0, 0), (d, n)));
    out.view_mut((d, 0), (d, n)).copy_from(&low);
    out
}

fn rk4(p: &dyn Potential, z: &[f64], t: f64, m: usize, want_jac: bool, record: bool) -> Result<Rk4Out> {
    let n = z.len();
    let d = n / 2;
    let h = t / m as f64;
    let mut y = z.to_vec();
    let mut jac = want_jac.then(|| DMatrix::<f64>::identity(n, n));
    let mut grid_x = Vec::new();
    if record {
        grid_x.push(y[..d].to_vec());
    }
    let mut k = vec![vec![0.0; n]; 4];
    let mut tmp = vec![0.0; n];
    let rhs = |y: &[f64], out: &mut [f64]| {
        out[..d].copy_from_slice(&y[d..]);
        p.gradient(&y[..d], &mut out[d..]);
        out[d..].iter_mut().for_each(|g| *g = -*g);
    };
    for _ in 0..m {
        let coeffs = [0.0, 0.5 * h, 0.5 * h, h];
        let mut hess = Vec::new();
        for s in 0..4 {
            if s == 0 {
                tmp.copy_from_slice(&y);
            } else {
                for i in 0..n {
                    tmp[i] = y[i] + coeffs[s] * k[s - 1][i];
                }
            }
            let (head, tail) = k.split_at_mut(s);
            let _ = head;
            rhs(&tmp, &mut tail[0]);
            if want_jac {
                hess.push(require_hessian(p, &tmp[..d])?);
            }
        }
        if let Some(j) = jac.as_mut() {
            let k1 = variational_rhs(&hess[0], j);
            let k2 = variational_rhs(&hess[1], &(&*j + &k1 * (0.5 * h)));
            let k3 = variational_rhs(&hess[2], &(&*j + &k2 * (0.5 * h)));
            let k4 = variational_rhs(&hess[3], &(&*j + &k3 * h));
            *j += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        for i in 0..n {
            y[i] += h / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
        }
        if record {
            grid_x.push(y[..d].to_vec());
        }
    }
    Ok(Rk4Out { z: y, jac, grid_x })
}

/// Standard Jacobian (rows = outputs) of one Verlet step at `x`.
fn verlet_step_jacobian(p: &dyn Potential, x: &[f64], x1: &[f64], delta: f64) -> Result<DMatrix<f64>> {
    let d = x.len();
    let h0 = require_hessian(p, x)?;
    let h1 = require_hessian(p, x1)?;
    let id = DMatrix::<f64>::identity(d, d);
    let dx_dx = &id - &h0 * (0.5 * delta * delta);
    let dx_dv = &id * delta;
    let dv_dx = -(&h0 + &h1 * &dx_dx) * (0.5 * delta);
    let dv_dv = &id - &h1 * (0.5 * delta * delta);
    let mut j = DMatrix::zeros(2 * d, 2 * d);
    j.view_mut((0, 0), (d, d)).copy_from(&dx_dx);
    j.view_mut((0, d), (d, d)).copy_from(&dx_dv);
    j.view_mut((d, 0), (d, d)).copy_from(&dv_dx);
    j.view_mut((d, d), (d, d)).copy_from(&dv_dv);
    Ok(j)
}

/// One kick-drift-kick step of size `delta`.
pub fn verlet_step(p: &dyn Potential, z: &PhaseState, delta: f64) -> Result<PhaseState> {
    check_dim(p.dim(), z.dim())?;
    if !(delta > 0.0) {
        return Err(KmcError::InvalidParameter("verlet step must be positive".into()));
    }
    let mut g = vec![0.0; z.dim()];
    p.gradient(&z.x, &mut g);
    Ok(verlet_steps(p, z, delta, 1, &mut g))
}

/// `count` Verlet steps; `grad` holds `∇U(z.x)` on entry and `∇U` at the
/// final position on exit, so consecutive calls share gradient evaluations.
pub fn verlet_steps(p: &dyn Potential, z: &PhaseState, delta: f64, count: usize, grad: &mut [f64]) -> PhaseState {
    let mut x = z.x.clone();
    let mut v = z.v.clone();
    for _ in 0..count {
        for i in 0..x.len() {
            v[i] -= 0.5 * delta * grad[i];
            x[i] += delta * v[i];
        }
        p.gradient(&x, grad);
        for i in 0..x.len() {
            v[i] -= 0.5 * delta * grad[i];
        }
    }
    PhaseState { x, v }
}

fn check_verlet_duration(t: f64, step: f64, count: usize) -> Result<()> {
    if (step * count as f64 - t).abs() > 1e-12 * t.max(1.0) {
        return Err(KmcError::InvalidParameter(format!(
            "verlet count*step = {} does not match flow duration {t}",
            step * count as f64
        )));
    }
    Ok(())
}

/// Flow of duration `t` using `cfg`.
pub fn flow(p: &dyn Potential, z: &PhaseState, t: f64, cfg: &IntegratorConfig, want_jacobian: bool) -> Result<FlowResult> {
    flow_impl(p, z, t, cfg, want_jacobian, false)
}

/// Like [`flow`], additionally assembling `E_t` along the reference trajectory.
pub fn flow_with_comparison(p: &dyn Potential, z: &PhaseState, t: f64, cfg: &IntegratorConfig) -> Result<FlowResult> {
    flow_impl(p, z, t, cfg, true, true)
}

fn flow_impl(p: &dyn Potential, z: &PhaseState, t: f64, cfg: &IntegratorConfig, want_jac: bool, want_e: bool) -> Result<FlowResult> {
    check_dim(p.dim(), z.dim())?;
    cfg.validate()?;
    if !(t >= 0.0) {
        return Err(KmcError::InvalidParameter("flow duration must be >= 0".into()));
    }
    if (want_jac || want_e) && !p.has_hessian() {
        return Err(KmcError::MissingHessian);
    }
    let energy_before = z.energy(p);
    let mut e_t = None;
    let (state, jacobian, substeps) = match *cfg {
        IntegratorConfig::Verlet { step, count } if !want_e => {
            check_verlet_duration(t, step, count)?;
            let mut grad = vec![0.0; z.dim()];
            p.gradient(&z.x, &mut grad);
            if want_jac {
                let n = 2 * z.dim();
                let mut j = DMatrix::<f64>::identity(n, n);
                let mut cur = z.clone();
                for _ in 0..count {
                    let next = verlet_steps(p, &cur, step, 1, &mut grad);
                    j = verlet_step_jacobian(p, &cur.x, &next.x, step)? * j;
                    cur = next;
                }
                (cur, Some(j.transpose()), count)
            } else {
                (verlet_steps(p, z, step, count, &mut grad), None, count)
            }
        }
        _ => {
            let m = if t == 0.0 { 2 } else { reference_substeps(t, p.smoothness().l, cfg.tolerance(), cfg.budget())? };
            let out = rk4(p, &z.to_vec(), t, m, want_jac, want_e)?;
            if want_e {
                e_t = Some(simpson_comparison(p, &out.grid_x, t)?);
            }
            (PhaseState::from_slice(&out.z), out.jac.map(|j| j.transpose()), m)
        }
    };
    let energy_after = state.energy(p);
    Ok(FlowResult { state, jacobian, e_t, energy_before, energy_after, substeps })
}

/// Assemble `E_t` (rows indexed by inputs) from Hessians on an evenly spaced grid.
fn simpson_comparison(p: &dyn Potential, grid_x: &[Vec<f64>], t: f64) -> Result<DMatrix<f64>> {
    let m = grid_x.len() - 1;
    let d = grid_x[0].len();
    let h = t / m as f64;
    let mut i0 = DMatrix::<f64>::zeros(d, d);
    let mut i1 = DMatrix::<f64>::zeros(d, d);
    for (k, x) in grid_x.iter().enumerate() {
        let w = if k == 0 || k == m {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        } * h
            / 3.0;
        let hess = require_hessian(p, x)?;
        let s = k as f64 * h;
        i0 += &hess * w;
        i1 += &hess * (w * s);
    }
    let i2 = &i0 * t - &i1;
    let id = DMatrix::<f64>::identity(d, d);
    let mut e = DMatrix::zeros(2 * d, 2 * d);
    e.view_mut((0, 0), (d, d)).copy_from(&(&id - &i2));
    e.view_mut((0, d), (d, d)).copy_from(&(-&i0));
    e.view_mut((d, 0), (d, d)).copy_from(&(&id * t));
    e.view_mut((d, d), (d, d)).copy_from(&(&id - &i1));
    Ok(e)
}

/// `E_t` along the trajectory from `z` (rows indexed by inputs).
pub fn comparison_matrix(p: &dyn Potential, z: &PhaseState, t: f64, cfg: &IntegratorConfig) -> Result<DMatrix<f64>> {
    Ok(flow_impl(p, z, t, cfg, false, true)?.e_t.expect("comparison requested"))
}

/// Bound `t³eᵗ/6 · L^{3/2}` on `|∇Φ_t − E_t|` (operator norm).
pub fn comparison_bound(t: f64, l: f64) -> f64 {
    let s = t * l.sqrt();
    s.powi(3) * s.exp() / 6.0
}

#[derive(Clone, Debug, Serialize)]
pub struct InverseMapSolution {
    pub v: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct NewtonOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self { tolerance: 1e-10, max_iterations: 50 }
    }
}

/// Position block and `∂Φ¹/∂v` (standard orientation) at `(x, v)`.
fn position_and_dv(p: &dyn Potential, x: &[f64], v: &[f64], t: f64, cfg: &IntegratorConfig) -> Result<(Vec<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let d = x.len();
    let r = flow(p, &PhaseState { x: x.to_vec(), v: v.to_vec() }, t, cfg, true)?;
    let j = r.jacobian.expect("jacobian requested").transpose();
    Ok((r.state.x, j.view((0, d), (d, d)).into_owned(), j.view((0, 0), (d, d)).into_owned()))
}

/// Solve `Φ_t¹(x, v) = x_target` for `v` by damped Newton.
pub fn inverse_position_map(p: &dyn Potential, x: &[f64], x_target: &[f64], t: f64, cfg: &IntegratorConfig) -> Result<InverseMapSolution> {
    inverse_position_map_with(p, x, x_target, t, cfg, NewtonOptions::default())
}

pub fn inverse_position_map_with(
    p: &dyn Potential,
    x: &[f64],
    x_target: &[f64],
    t: f64,
    cfg: &IntegratorConfig,
    opts: NewtonOptions,
) -> Result<InverseMapSolution> {
    check_dim(p.dim(), x.len())?;
    check_dim(p.dim(), x_target.len())?;
    if !(t > 0.0) {
        return Err(KmcError::InvalidParameter("inverse map needs t > 0".into()));
    }
    let mut v: Vec<f64> = x_target.iter().zip(x).map(|(b, a)| (b - a) / t).collect();
    let (mut pos, mut a, _) = position_and_dv(p, x, &v, t, cfg)?;
    let mut res = sub(&pos, x_target);
    let mut rnorm = linalg::norm(&res);
    let mut iterations = 1;
    while rnorm > opts.tolerance {
        if iterations >= opts.max_iterations {
            return Err(KmcError::NewtonFailed { iterations, residual: rnorm });
        }
        let step = a
            .clone()
            .lu()
            .solve(&linalg::to_dvec(&res))
            .ok_or_else(|| KmcError::NewtonFailed { iterations, residual: rnorm })?;
        let mut lambda = 1.0;
        loop {
            let cand: Vec<f64> = v.iter().zip(step.iter()).map(|(vi, si)| vi - lambda * si).collect();
            let (cpos, ca, _) = position_and_dv(p, x, &cand, t, cfg)?;
            let cres = sub(&cpos, x_target);
            let cnorm = linalg::norm(&cres);
            if cnorm < rnorm || lambda < 1e-6 {
                v = cand;
                pos = cpos;
                a = ca;
                res = cres;
                rnorm = cnorm;
                break;
            }
            lambda *= 0.5;
        }
        iterations += 1;
        if rnorm > opts.tolerance && lambda < 1e-6 {
            return Err(KmcError::NewtonFailed { iterations, residual: rnorm });
        }
    }
    let _ = pos;
    Ok(InverseMapSolution { v, residual: rnorm, iterations })
}

/// `K_{u0,u1}(x, v)` with its Jacobian blocks, rows indexed by inputs.
#[derive(Clone, Debug)]
pub struct InverseMapDerivatives {
    pub value: Vec<f64>,
    pub grad_x: DMatrix<f64>,
    pub grad_v: DMatrix<f64>,
    pub residual: f64,
}

/// Evaluate `v' = K_{u0,u1}(x, v)`, the solution of
/// `Φ_t¹(x+u0, v') = Φ_t¹(x, v) + u1`, and differentiate the fixed point.
pub fn inverse_map_derivatives(
    p: &dyn Potential,
    x: &[f64],
    v: &[f64],
    t: f64,
    cfg: &IntegratorConfig,
    u0: &[f64],
    u1: &[f64],
) -> Result<InverseMapDerivatives> {
    inverse_map_derivatives_with(p, x, v, t, cfg, u0, u1, NewtonOptions::default())
}

#[allow(clippy::too_many_arguments)]
pub fn inverse_map_derivatives_with(
    p: &dyn Potential,
    x: &[f64],
    v: &[f64],
    t: f64,
    cfg: &IntegratorConfig,
    u0: &[f64],
    u1: &[f64],
    opts: NewtonOptions,
) -> Result<InverseMapDerivatives> {
    let d = p.dim();
    for w in [x, v, u0, u1] {
        check_dim(d, w.len())?;
    }
    let (pos, a, b) = position_and_dv(p, x, v, t, cfg)?;
    let target: Vec<f64> = pos.iter().zip(u1).map(|(a, b)| a + b).collect();
    let start: Vec<f64> = x.iter().zip(u0).map(|(a, b)| a + b).collect();
    let sol = inverse_position_map_with(p, &start, &target, t, cfg, opts)?;
    let (_, a2, b2) = position_and_dv(p, &start, &sol.v, t, cfg)?;
    let lu = a2.lu();
    let dv_dv = lu.solve(&a).ok_or_else(|| KmcError::NewtonFailed { iterations: sol.iterations, residual: sol.residual })?;
    let dv_dx = lu.solve(&(b - b2)).ok_or_else(|| KmcError::NewtonFailed { iterations: sol.iterations, residual: sol.residual })?;
    Ok(InverseMapDerivatives { value: sol.v, grad_x: dv_dx.transpose(), grad_v: dv_dv.transpose(), residual: sol.residual })
}

/// One inequality of the inverse-map bounds: `lhs ≤ rhs`.
#[derive(Clone, Debug, Serialize)]
pub struct BoundCheck {
    pub name: &'static str,
    pub lhs: f64,
    pub rhs: f64,
}

impl BoundCheck {
    pub fn holds(&self, slack: f64) -> bool {
        self.lhs <= self.rhs + slack
    }
}

/// The five inverse-map inequalities at unit curvature.
pub fn inverse_map_bounds(t: f64, l_h: f64, v: &[f64], u0: &[f64], u1: &[f64], k: &InverseMapDerivatives) -> Vec<BoundCheck> {
    let d = v.len();
    let n0 = linalg::norm(u0);
    let n10 = linalg::dist(u1, u0);
    let shift: Vec<f64> = (0..d).map(|i| u1[i] - u0[i] + t * v[i] - t * k.value[i]).collect();
    let gv_minus_i = &k.grad_v - DMatrix::<f64>::identity(d, d);
    vec![
        BoundCheck { name: "displacement", lhs: linalg::norm(&shift), rhs: 0.6 * t * t * n0 + 0.2 * t * t * n10 },
        BoundCheck { name: "grad_v_frobenius", lhs: gv_minus_i.norm(), rhs: 0.2 * t * t * l_h * n0 + 0.1 * t.powi(3) * l_h * n10 },
        BoundCheck { name: "grad_v_operator", lhs: linalg::op_norm(&gv_minus_i), rhs: 0.5 * t * t },
        BoundCheck { name: "grad_x_frobenius", lhs: k.grad_x.norm(), rhs: 0.6 * t * l_h * n0 + 0.2 * t * t * l_h * n10 },
        BoundCheck { name: "grad_x_operator", lhs: linalg::op_norm(&k.grad_x), rhs: 1.2 * t },
    ]
}

/// Central finite-difference Jacobian of the flow (rows indexed by inputs).
pub fn finite_difference_jacobian(p: &dyn Potential, z: &PhaseState, t: f64, cfg: &IntegratorConfig, h: f64) -> Result<DMatrix<f64>> {
    let base = z.to_vec();
    let n = base.len();
    let mut j = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut zp = base.clone();
        zp[i] += h;
        let mut zm = base.clone();
        zm[i] -= h;
        let fp = flow(p, &PhaseState::from_slice(&zp), t, cfg, false)?.state.to_vec();
        let fm = flow(p, &PhaseState::from_slice(&zm), t, cfg, false)?.state.to_vec();
        for k in 0..n {
            j[(i, k)] = (fp[k] - fm[k]) / (2.0 * h);
        }
    }
    Ok(j)
}
