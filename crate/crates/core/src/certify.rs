//! Explicit convergence and regularization constants.
//!
//! Every formula is stated for unit curvature (`L = 1`); inputs at another `L`
//! are mapped there by [`rescale`] first.

use serde::Serialize;

use crate::error::{KmcError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RateInputs {
    pub t: f64,
    pub eta: f64,
    /// Weight of the mixed Fisher term in the modified entropy.
    pub a: f64,
    pub c_ls: f64,
    pub l: f64,
    pub l_h: f64,
}

impl RateInputs {
    pub fn unit(t: f64, eta: f64, a: f64, c_ls: f64) -> Self {
        Self { t, eta, a, c_ls, l: 1.0, l_h: 0.0 }
    }

    pub fn gamma(&self) -> f64 {
        (1.0 - self.eta) / self.t
    }

    /// `t√L ≤ 1/4`.
    pub fn step_admissible(&self) -> bool {
        self.t * self.l.sqrt() <= 0.25 * (1.0 + 1e-12)
    }
}

/// Record of the substitutions that bring inputs to unit curvature. Distances
/// and Fisher informations convert as `W₂ = √L·W₂,L`-style factors listed here.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RescaleReport {
    pub original_l: f64,
    pub time_factor: f64,
    pub lsi_factor: f64,
    pub gamma_factor: f64,
    pub hessian_lipschitz_factor: f64,
    /// `W₂ ↦ L·W₂,L`.
    pub wasserstein_factor: f64,
    /// `I ↦ L·I_L`.
    pub fisher_factor: f64,
}

pub fn rescale(inputs: &RateInputs) -> Result<(RateInputs, RescaleReport)> {
    let l = inputs.l;
    if !(l > 0.0) {
        return Err(KmcError::InvalidParameter("rescaling needs L > 0".into()));
    }
    let sl = l.sqrt();
    let out = RateInputs { t: inputs.t * sl, c_ls: inputs.c_ls * l, l: 1.0, l_h: inputs.l_h / l.powf(1.5), ..*inputs };
    let report = RescaleReport {
        original_l: l,
        time_factor: sl,
        lsi_factor: l,
        gamma_factor: 1.0 / sl,
        hessian_lipschitz_factor: l.powf(-1.5),
        wasserstein_factor: l,
        fisher_factor: l,
    };
    Ok((out, report))
}

/// Damping-based choice of the mixed-term weight: `γ/[14 + 8(γ+3)²]`.
pub fn a_rule(gamma: f64) -> f64 {
    gamma / (14.0 + 8.0 * (gamma + 3.0).powi(2))
}

#[derive(Clone, Debug, Serialize)]
pub struct Certificate {
    /// Inputs after rescaling to unit curvature.
    pub inputs: RateInputs,
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub rho: f64,
    /// `ρ` from the literal closed form (cancels badly as `η → 0`).
    pub rho_literal: f64,
    /// `|ρ_limit − ρ_stable|` at `η = 0`; zero otherwise.
    pub eta_zero_discrepancy: f64,
    pub valid: bool,
    pub contraction_factor: f64,
    pub a_rule: f64,
    pub c1: f64,
    pub step_admissible: bool,
    pub rescale: RescaleReport,
}

impl Certificate {
    /// Regularization constant `c_*(s)` at this certificate's `η, γ, L_H`.
    pub fn c_star(&self, s: f64) -> f64 {
        c_star(s, self.inputs.eta, self.inputs.gamma(), self.inputs.l_h)
    }

    /// Contraction per step of the rate `ρ/(max(C_LS,1)/a + 2)`.
    pub fn rate(&self) -> f64 {
        self.rho / (self.inputs.c_ls.max(1.0) / self.inputs.a + 2.0)
    }
}

fn m_coefficients(t: f64, eta: f64, a: f64) -> (f64, f64, f64) {
    let m1 = 2.0 * t - 2.1 * t * t;
    let m2 = 1.0 + eta * (-1.0 + 2.0 * t + 2.6 * t * t);
    let m3 = 1.0 - eta * eta * (1.0 + 2.0 * t + 3.1 * t * t) + (1.0 - eta) * (1.0 + eta) / (2.0 * a);
    (m1, m2, m3)
}

/// Smaller eigenvalue of `[[m1, −m2/η], [−m2/η, m3/η²]]` times `(1−3t)`, in
/// the form `det/λ_max`, which stays accurate as `η → 0`.
fn rho_stable(t: f64, eta: f64, m1: f64, m2: f64, m3: f64) -> f64 {
    if eta == 0.0 {
        return (1.0 - 3.0 * t) * (m1 - m2 * m2 / m3);
    }
    let b = m3 / (eta * eta);
    let c = m2 / eta;
    let half_sum = 0.5 * (m1 + b);
    let lmax = half_sum + (c * c + (0.5 * (m1 - b)).powi(2)).sqrt();
    let det = (m1 * m3 - m2 * m2) / (eta * eta);
    (1.0 - 3.0 * t) * det / lmax
}

fn rho_literal(t: f64, eta: f64, a: f64, m1: f64, m2: f64, m3: f64) -> f64 {
    if eta == 0.0 {
        return (1.0 - 3.0 * t) * (m1 - 2.0 * a / (2.0 * a + 1.0));
    }
    let e2 = eta * eta;
    (1.0 - 3.0 * t) * (0.5 * (m1 + m3 / e2) - (m2 * m2 / e2 + (0.5 * (m1 - m3 / e2)).powi(2)).sqrt())
}

/// Evaluate the entropy-dissipation certificate.
pub fn dissipation_rate(inputs: &RateInputs) -> Result<Certificate> {
    if !(inputs.a > 0.0) {
        return Err(KmcError::InvalidParameter(format!("a must be > 0, got {}", inputs.a)));
    }
    if !(0.0..1.0).contains(&inputs.eta) {
        return Err(KmcError::InvalidParameter(format!("eta must lie in [0, 1), got {}", inputs.eta)));
    }
    if !(inputs.t > 0.0) || !(inputs.c_ls > 0.0) {
        return Err(KmcError::InvalidParameter("t and C_LS must be > 0".into()));
    }
    let (unit, report) = rescale(inputs)?;
    let (t, eta, a) = (unit.t, unit.eta, unit.a);
    let (m1, m2, m3) = m_coefficients(t, eta, a);
    let rho = rho_stable(t, eta, m1, m2, m3);
    let literal = rho_literal(t, eta, a, m1, m2, m3);
    let eta_zero_discrepancy = if eta == 0.0 { (literal - rho).abs() } else { 0.0 };
    if eta_zero_discrepancy > 1e-9 {
        log::warn!("eta = 0 limit and stable evaluation of rho differ by {eta_zero_discrepancy:.3e}");
    }
    let valid = m1 * m3 > m2 * m2 && t < 1.0 / 3.0;
    let contraction_factor = if valid { 1.0 / (1.0 + rho / (unit.c_ls.max(1.0) / a + 2.0)) } else { 1.0 };
    let c1 = c1(t, eta, unit.l_h);
    Ok(Certificate {
        inputs: unit,
        m1,
        m2,
        m3,
        rho,
        rho_literal: literal,
        eta_zero_discrepancy,
        valid,
        contraction_factor,
        a_rule: a_rule(unit.gamma()),
        c1,
        step_admissible: unit.t <= 0.25 * (1.0 + 1e-12),
        rescale: report,
    })
}

/// Choose `a` maximizing the per-step rate `ρ/(max(C_LS,1)/a + 2)` by
/// golden-section search in `log a` over `(0, a_max]`, where `a_max` is the
/// validity boundary. Among numerically tied candidates the smallest `a` wins.
pub fn optimize_a(inputs: &RateInputs) -> Result<Certificate> {
    let at = |a: f64| dissipation_rate(&RateInputs { a, ..*inputs });
    let base = at(a_rule((1.0 - inputs.eta) / (inputs.t * inputs.l.sqrt())).max(1e-12))?;
    if !base.valid {
        return Err(KmcError::Precondition("no valid a: the certificate fails even for small a".into()));
    }
    // Bracket the validity boundary.
    let (mut lo, mut hi) = (base.inputs.a, base.inputs.a);
    while at(hi)?.valid {
        lo = hi;
        hi *= 2.0;
        if hi > 1e12 {
            break;
        }
    }
    for _ in 0..200 {
        if hi / lo < 1.0 + 1e-13 {
            break;
        }
        let mid = (lo * hi).sqrt();
        if at(mid)?.valid {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let a_max = lo;
    let score = |la: f64| -> Result<f64> {
        let c = at(la.exp())?;
        Ok(if c.valid { c.rate() } else { f64::NEG_INFINITY })
    };
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut x0, mut x1) = ((a_max * 1e-10).ln(), a_max.ln());
    let mut c = x1 - phi * (x1 - x0);
    let mut d = x0 + phi * (x1 - x0);
    let (mut fc, mut fd) = (score(c)?, score(d)?);
    let mut evaluated = vec![(c, fc), (d, fd), (x1, score(x1)?)];
    for _ in 0..200 {
        if (x1 - x0).abs() < 1e-10 {
            break;
        }
        if fc >= fd {
            x1 = d;
            d = c;
            fd = fc;
            c = x1 - phi * (x1 - x0);
            fc = score(c)?;
            evaluated.push((c, fc));
        } else {
            x0 = c;
            c = d;
            fc = fd;
            d = x0 + phi * (x1 - x0);
            fd = score(d)?;
            evaluated.push((d, fd));
        }
    }
    let best = evaluated.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
    let pick = evaluated
        .iter()
        .filter(|e| e.1 >= best - 1e-14 * best.abs())
        .map(|e| e.0)
        .fold(f64::INFINITY, f64::min);
    at(pick.exp())
}

/// `c₁(η,t) = max(1, η²t²)·(13/(2t²(1−η²)) + 5L_H²t⁴)`.
pub fn c1(t: f64, eta: f64, l_h: f64) -> f64 {
    (eta * eta * t * t).max(1.0) * c1_hat(t, eta, l_h)
}

/// One-step density constant without the `max(1, η²t²)` prefactor.
pub fn c1_hat(t: f64, eta: f64, l_h: f64) -> f64 {
    13.0 / (2.0 * t * t * (1.0 - eta) * (1.0 + eta)) + 5.0 * l_h * l_h * t.powi(4)
}

fn c_star_core(s: f64, eta: f64, gamma: f64) -> f64 {
    (s / gamma) * (12.0 / (eta * s * s) + 6.0 * gamma / (eta * s) + 4.0).powi(2)
}

/// `c_*(s) = max(1,η²s²)·[(s/γ)(12/(ηs²) + 6γ/(ηs) + 4)² + 132e^{4s/3}(L_H s)²]`.
pub fn c_star(s: f64, eta: f64, gamma: f64, l_h: f64) -> f64 {
    (eta * eta * s * s).max(1.0) * (c_star_core(s, eta, gamma) + 132.0 * (4.0 * s / 3.0).exp() * (l_h * s).powi(2))
}

/// Multi-step density constant `(s/γ)(…)² + 132(L_H s)²`.
pub fn c_star_hat(s: f64, eta: f64, gamma: f64, l_h: f64) -> f64 {
    c_star_core(s, eta, gamma) + 132.0 * (l_h * s).powi(2)
}

/// Number of merging steps `min(n, ⌊1/(4t)⌋)`.
pub fn effective_steps(n: usize, t: f64) -> usize {
    n.min((0.25 / t).floor() as usize)
}

#[derive(Clone, Debug, Serialize)]
pub struct RegularizationConstants {
    pub c1: f64,
    /// `c_n` for `n ≥ 2`; equal to `c₁` when `n = 1`.
    pub c_n: f64,
    pub c1_hat: f64,
    pub c_n_hat: f64,
    pub n_effective: usize,
    pub s: f64,
    /// Weights `(w_x, w_v)` of `w_x|x−x'|² + w_v|v−v'|²` in the density bound.
    pub weights: (f64, f64),
}

/// Entropy-regularization constants (unit curvature).
pub fn regularization_constants(t: f64, eta: f64, l_h: f64, n: usize) -> Result<RegularizationConstants> {
    if !(0.0..1.0).contains(&eta) || !(t > 0.0) || n == 0 {
        return Err(KmcError::InvalidParameter("need t > 0, eta in [0,1) and n >= 1".into()));
    }
    let c1v = c1(t, eta, l_h);
    let c1h = c1_hat(t, eta, l_h);
    if n == 1 {
        return Ok(RegularizationConstants {
            c1: c1v,
            c_n: c1v,
            c1_hat: c1h,
            c_n_hat: c1h,
            n_effective: 1,
            s: t,
            weights: (1.0, (eta * t).powi(2)),
        });
    }
    if eta == 0.0 || t > 0.125 {
        return Err(KmcError::Precondition("multi-step regularization needs eta > 0 and t <= 1/8".into()));
    }
    let n_eff = effective_steps(n, t);
    let s = t * n_eff as f64;
    let gamma = (1.0 - eta) / t;
    Ok(RegularizationConstants {
        c1: c1v,
        c_n: c_star(s, eta, gamma, l_h),
        c1_hat: c1h,
        c_n_hat: c_star_hat(s, eta, gamma, l_h),
        n_effective: n_eff,
        s,
        weights: (1.0, (eta * s).powi(2)),
    })
}

/// Pinsker and Talagrand-type transfers: `(√(2·ent), √(C_LS·ent))`.
pub fn pinsker_talagrand(ent: f64, c_ls: f64) -> Result<(f64, f64)> {
    if !(ent >= 0.0) {
        return Err(KmcError::InvalidParameter("entropy must be >= 0".into()));
    }
    Ok(((2.0 * ent).sqrt(), (c_ls * ent).sqrt()))
}

/// Log-Sobolev bound from a Poincaré constant and a Lyapunov condition.
pub fn lsi_from_lyapunov(c_p: f64, k: f64, lambda: f64, b: f64, m2: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(KmcError::InvalidParameter("lambda must be > 0".into()));
    }
    if c_p < 0.0 || k < 0.0 || b < 0.0 || m2 < 0.0 {
        return Err(KmcError::InvalidParameter("C_P, K, b and m2 must be >= 0".into()));
    }
    let q = c_p * (b + lambda * m2);
    Ok(2.0 * ((0.5 + q) / lambda).sqrt() + (k * (1.0 + 2.0 * q) + 4.0 * lambda * c_p) / (2.0 * lambda))
}

/// Lyapunov parameters `(λ, b)` for `∇U(x)·x ≥ ρ|x|² − R` with `W = e^{ρ|x|²/4}`.
pub fn lyapunov_quadratic_at_infinity(rho: f64, r: f64, d: usize) -> (f64, f64) {
    (0.75 * rho * rho, 0.5 * rho * (r + d as f64))
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ComplexityInputs {
    pub t: f64,
    pub gamma: f64,
    pub d: usize,
    pub c_ls: f64,
    /// Modified entropy of the initial law.
    pub mod_entropy0: f64,
    /// Discretization constant; not explicit, supplied or fitted.
    pub c_prime: f64,
    /// 1 or 2.
    pub p: u32,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ComplexityBound {
    pub discretization: f64,
    pub contraction: f64,
    pub total: f64,
}

/// Two-term `W_p` bound after `n` Verlet-discretized steps of size `delta`.
pub fn complexity_bound(inputs: &ComplexityInputs, delta: f64, n: usize) -> Result<ComplexityBound> {
    if inputs.p != 1 && inputs.p != 2 {
        return Err(KmcError::InvalidParameter("p must be 1 or 2".into()));
    }
    let a = a_rule(inputs.gamma);
    let nt = n as f64 * inputs.t;
    let discretization = inputs.c_prime * delta.powi(inputs.p as i32) * nt * (inputs.c_prime * nt).exp() * (inputs.d as f64).powf(inputs.p as f64 / 2.0);
    let base = 1.0 + 3.0 * inputs.t / (8.0 * inputs.c_ls.max(1.0) / a + 16.0);
    let contraction = base.powf(-(n as f64) / 2.0) * (inputs.c_ls * inputs.mod_entropy0).sqrt();
    Ok(ComplexityBound { discretization, contraction, total: discretization + contraction })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ComplexityResult {
    /// Gradient evaluations `K·n`.
    pub gradient_evaluations: u64,
    pub verlet_steps_per_transition: usize,
    pub transitions: usize,
    pub bound: f64,
}

/// Smallest `K·n` with bound `≤ ε·W₂(π, δ₀)`, scanning `K ≤ max_k`, `n ≤ max_n`.
pub fn m_epsilon(inputs: &ComplexityInputs, epsilon: f64, w2_target_origin: f64, max_k: usize, max_n: usize) -> Result<ComplexityResult> {
    let target = epsilon * w2_target_origin;
    let mut best: Option<ComplexityResult> = None;
    for k in 1..=max_k {
        let delta = inputs.t / k as f64;
        for n in 0..=max_n {
            let b = complexity_bound(inputs, delta, n)?;
            if b.total <= target {
                let cost = (k * n) as u64;
                if best.is_none_or(|r| cost < r.gradient_evaluations) {
                    best = Some(ComplexityResult { gradient_evaluations: cost, verlet_steps_per_transition: k, transitions: n, bound: b.total });
                }
                break;
            }
            // Past the minimum the bound only grows.
            if n > 0 && b.discretization > target {
                break;
            }
        }
    }
    best.ok_or_else(|| KmcError::Precondition(format!("epsilon = {epsilon} infeasible within the scan budget")))
}
