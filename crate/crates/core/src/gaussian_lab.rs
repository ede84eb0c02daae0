//! Exact Gaussian laboratory for quadratic potentials.
//!
//! For `U(x) = x·Px/2` every transition is an affine map plus independent
//! Gaussian noise, so Gaussian laws stay Gaussian and entropy, Fisher
//! information and Wasserstein distances have closed forms. Matrices use the
//! usual orientation here: a kernel maps the state `z` to `Mz + ξ`,
//! `ξ ~ N(0, noise_cov)`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::certify::{self, RateInputs};
use crate::chain::{noise_scale, ChainParams, RefreshPlacement};
use crate::error::{check_dim, KmcError, Result};
use crate::linalg;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianLaw {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianLaw {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        check_dim(mean.len(), cov.nrows())?;
        check_dim(cov.nrows(), cov.ncols())?;
        let scale = cov.amax().max(1.0);
        if (&cov - cov.transpose()).amax() > 1e-12 * scale {
            return Err(KmcError::InvalidParameter("covariance must be symmetric".into()));
        }
        if cov.nrows() > 0 && linalg::min_eigenvalue(&cov) < -1e-12 * scale {
            return Err(KmcError::NotPositiveDefinite("covariance has a negative eigenvalue".into()));
        }
        Ok(Self { mean, cov: linalg::symmetrize(&cov) })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `μ = N(0, P⁻¹) ⊗ N(0, I)`.
    pub fn invariant(p: &DMatrix<f64>) -> Result<Self> {
        let d = p.nrows();
        let cov = linalg::block_diag(&linalg::spd_inverse(p, "precision matrix P")?, &DMatrix::identity(d, d));
        Ok(Self { mean: DVector::zeros(2 * d), cov })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffineKernel {
    pub m: DMatrix<f64>,
    pub noise_cov: DMatrix<f64>,
}

impl AffineKernel {
    pub fn identity(n: usize) -> Self {
        Self { m: DMatrix::identity(n, n), noise_cov: DMatrix::zeros(n, n) }
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: &AffineKernel) -> AffineKernel {
        AffineKernel { m: &next.m * &self.m, noise_cov: &next.m * &self.noise_cov * next.m.transpose() + &next.noise_cov }
    }

    pub fn apply(&self, law: &GaussianLaw) -> GaussianLaw {
        GaussianLaw { mean: &self.m * &law.mean, cov: linalg::symmetrize(&(&self.m * &law.cov * self.m.transpose() + &self.noise_cov)) }
    }
}

/// Exact flow block `exp(t[[0, I], [−P, 0]])` from the eigen-decomposition of `P`.
pub fn flow_kernel(p: &DMatrix<f64>, t: f64) -> Result<AffineKernel> {
    let d = p.nrows();
    let eig = linalg::sym_eigen(p);
    if eig.eigenvalues.iter().any(|l| *l < -1e-12 * eig.eigenvalues.amax().max(1.0)) {
        return Err(KmcError::NotPositiveDefinite("P must be positive semidefinite".into()));
    }
    let (mut c, mut s, mut ms) = (DVector::zeros(d), DVector::zeros(d), DVector::zeros(d));
    for i in 0..d {
        let w = eig.eigenvalues[i].max(0.0).sqrt();
        c[i] = (w * t).cos();
        s[i] = if w == 0.0 { t } else { (w * t).sin() / w };
        ms[i] = -w * (w * t).sin();
    }
    let v = &eig.eigenvectors;
    let conj = |diag: &DVector<f64>| v * DMatrix::from_diagonal(diag) * v.transpose();
    let mut m = DMatrix::zeros(2 * d, 2 * d);
    m.view_mut((0, 0), (d, d)).copy_from(&conj(&c));
    m.view_mut((0, d), (d, d)).copy_from(&conj(&s));
    m.view_mut((d, 0), (d, d)).copy_from(&conj(&ms));
    m.view_mut((d, d), (d, d)).copy_from(&conj(&c));
    Ok(AffineKernel { m, noise_cov: DMatrix::zeros(2 * d, 2 * d) })
}

pub fn refresh_kernel(d: usize, eta: f64) -> AffineKernel {
    let id = DMatrix::<f64>::identity(d, d);
    let s = noise_scale(eta);
    AffineKernel {
        m: linalg::block_diag(&id, &(&id * eta)),
        noise_cov: linalg::block_diag(&DMatrix::zeros(d, d), &(&id * (s * s))),
    }
}

/// Affine kernel of one chain transition with target `N(0, P⁻¹)`.
pub fn kernel_of_transition(p: &DMatrix<f64>, params: &ChainParams) -> Result<AffineKernel> {
    params.validate()?;
    let d = p.nrows();
    let f = flow_kernel(p, params.t)?;
    let r = refresh_kernel(d, params.eta);
    Ok(match params.placement {
        RefreshPlacement::RefreshThenFlow => r.then(&f),
        RefreshPlacement::FlowThenRefresh => f.then(&r),
        RefreshPlacement::RefreshFlowRefresh => r.then(&f).then(&r),
    })
}

pub fn propagate(law: &GaussianLaw, k: &AffineKernel, n: usize) -> GaussianLaw {
    (0..n).fold(law.clone(), |l, _| k.apply(&l))
}

/// Closed-form divergences of `ν` with respect to `μ`.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct Divergences {
    pub kl: f64,
    /// `∫(h−1)² dμ`; the G-entropy with `G(u) = (u−1)²/2` equals `chi2/2`.
    pub chi2: f64,
    pub fisher: f64,
    pub mixed_fisher: f64,
    pub w2: f64,
    pub modified_entropy: f64,
}

/// Mixing matrix `[√L·I, I]` of the modified entropy (size `d × 2d`).
pub fn mixed_gradient_matrix(d: usize, l: f64) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(d, 2 * d);
    for i in 0..d {
        a[(i, i)] = l.sqrt();
        a[(i, d + i)] = 1.0;
    }
    a
}

/// `x − ln(1+x)` without cancellation for small `x`.
fn x_minus_log1p(x: f64) -> f64 {
    if x.abs() < 0.1 {
        let mut term = x * x;
        let mut sum = 0.0;
        let mut k = 2.0;
        loop {
            let add = term / k;
            sum += add;
            if add.abs() <= 1e-18 * sum.abs() {
                break;
            }
            term *= -x;
            k += 1.0;
        }
        sum
    } else {
        x - x.ln_1p()
    }
}

/// Divergences computed from the deviation `(mean_ν − mean_μ, Σ_ν − Σ_μ)`, which
/// keeps full relative precision when `ν` is close to `μ`.
pub fn divergences_from_deviation(
    mean_diff: &DVector<f64>,
    cov_diff: &DMatrix<f64>,
    mu: &GaussianLaw,
    mix: Option<&DMatrix<f64>>,
    a: f64,
) -> Result<Divergences> {
    let n = mu.dim();
    check_dim(n, mean_diff.len())?;
    let nu_cov = linalg::symmetrize(&(&mu.cov + cov_diff));
    let mu_inv = linalg::spd_inverse(&mu.cov, "reference covariance")?;
    let nu_inv = linalg::spd_inverse(&nu_cov, "covariance of nu")?;
    let mu_isqrt = linalg::sym_apply(&mu.cov, |l| 1.0 / l.sqrt());
    let x = linalg::symmetrize(&(&mu_isqrt * cov_diff * &mu_isqrt));
    let kl_cov: f64 = linalg::sym_eigen(&x).eigenvalues.iter().map(|x| 0.5 * x_minus_log1p(*x)).sum();
    let b = &mu_inv * mean_diff;
    let kl = kl_cov + 0.5 * mean_diff.dot(&b);
    let delta = &mu_inv * cov_diff * &nu_inv;
    let fisher_with = |am: &DMatrix<f64>| -> f64 {
        let ad = am * &delta;
        (&ad * &nu_cov * ad.transpose()).trace() + (am * &b).norm_squared()
    };
    let fisher = fisher_with(&DMatrix::identity(n, n));
    let default_mix;
    let mix = match mix {
        Some(m) => m,
        None => {
            if n % 2 != 0 {
                return Err(KmcError::InvalidParameter("default mixing matrix needs an even phase dimension".into()));
            }
            default_mix = mixed_gradient_matrix(n / 2, 1.0);
            &default_mix
        }
    };
    let mixed_fisher = fisher_with(mix);
    let nu = GaussianLaw { mean: &mu.mean + mean_diff, cov: nu_cov };
    Ok(Divergences { kl, chi2: chi2(&nu, mu, &nu_inv, &mu_inv)?, fisher, mixed_fisher, w2: bures_w2(&nu, mu), modified_entropy: kl + a * mixed_fisher })
}

fn chi2(nu: &GaussianLaw, mu: &GaussianLaw, nu_inv: &DMatrix<f64>, mu_inv: &DMatrix<f64>) -> Result<f64> {
    let a = nu_inv * 2.0 - mu_inv;
    if !linalg::is_spd(&a) {
        return Ok(f64::INFINITY);
    }
    let b = nu_inv * &nu.mean * 2.0 - mu_inv * &mu.mean;
    let c = 2.0 * nu.mean.dot(&(nu_inv * &nu.mean)) - mu.mean.dot(&(mu_inv * &mu.mean));
    let a_inv = linalg::spd_inverse(&a, "chi2 precision")?;
    let log1p_chi = 0.5 * linalg::log_det_spd(&mu.cov, "mu")? - linalg::log_det_spd(&nu.cov, "nu")? - 0.5 * linalg::log_det_spd(&a, "chi2 precision")?
        + 0.5 * (b.dot(&(&a_inv * &b)) - c);
    Ok(log1p_chi.exp_m1().max(0.0))
}

fn bures_w2(nu: &GaussianLaw, mu: &GaussianLaw) -> f64 {
    let mean_sq = (&nu.mean - &mu.mean).norm_squared();
    let dev = &nu.cov - &mu.cov;
    let tr = bures_trace_near(&mu.cov, &dev).unwrap_or_else(|| {
        let r = linalg::sym_sqrt(&mu.cov);
        let cross = linalg::sym_sqrt(&linalg::symmetrize(&(&r * &nu.cov * &r)));
        (&nu.cov + &mu.cov - cross * 2.0).trace()
    });
    (mean_sq + tr.max(0.0)).sqrt()
}

/// Bures trace term `tr(D) − 2tr(X)` where `(Σ + X)² = Σ^{1/2}(Σ + D)Σ^{1/2}`,
/// solved by fixed-point Sylvester iterations in the eigenbasis of `Σ`. Avoids
/// the cancellation of the direct formula when `D` is small; `None` if the
/// iteration does not settle.
fn bures_trace_near(sigma: &DMatrix<f64>, dev: &DMatrix<f64>) -> Option<f64> {
    let eig = linalg::sym_eigen(sigma);
    let q = &eig.eigenvectors;
    let lam = &eig.eigenvalues;
    let n = lam.len();
    let s_half = lam.map(|l| l.max(0.0).sqrt());
    let d_eig = q.transpose() * dev * q;
    let rhs = DMatrix::from_fn(n, n, |i, j| s_half[i] * d_eig[(i, j)] * s_half[j]);
    if rhs.amax() > 0.1 * lam.min().powi(2) {
        return None;
    }
    let mut x = DMatrix::zeros(n, n);
    for _ in 0..200 {
        let r = &rhs - &x * &x;
        let next = DMatrix::from_fn(n, n, |i, j| r[(i, j)] / (lam[i] + lam[j]));
        let change = (&next - &x).amax();
        x = next;
        if change <= 1e-17 * x.amax().max(f64::MIN_POSITIVE) || change == 0.0 {
            return Some(d_eig.trace() - 2.0 * x.trace());
        }
    }
    None
}

/// `(kl, chi2, fisher, mixed_fisher, w2, modified_entropy)` of `ν` relative to `μ`.
pub fn divergences(nu: &GaussianLaw, mu: &GaussianLaw, mix: Option<&DMatrix<f64>>, a: f64) -> Result<Divergences> {
    check_dim(mu.dim(), nu.dim())?;
    divergences_from_deviation(&(&nu.mean - &mu.mean), &(&nu.cov - &mu.cov), mu, mix, a)
}

/// Setup shared by the exact verification routines. `curvature` is the bound
/// `L ≥ λ_max(P)` used to normalize to unit curvature.
#[derive(Clone, Debug)]
pub struct QuadraticSetup {
    pub precision: DMatrix<f64>,
    pub curvature: f64,
}

impl QuadraticSetup {
    pub fn new(precision: DMatrix<f64>) -> Result<Self> {
        let l = linalg::max_eigenvalue(&precision);
        Self::with_curvature(precision, l)
    }

    pub fn with_curvature(precision: DMatrix<f64>, curvature: f64) -> Result<Self> {
        if !linalg::is_spd(&precision) {
            return Err(KmcError::NotPositiveDefinite("precision matrix P".into()));
        }
        if curvature < linalg::max_eigenvalue(&precision) * (1.0 - 1e-12) {
            return Err(KmcError::InvalidParameter("curvature bound below the top eigenvalue of P".into()));
        }
        Ok(Self { precision, curvature })
    }

    fn d(&self) -> usize {
        self.precision.nrows()
    }

    /// `diag(√L·I, I)`: maps states to unit-curvature coordinates.
    fn scaling(&self) -> DMatrix<f64> {
        let d = self.d();
        linalg::block_diag(&(DMatrix::identity(d, d) * self.curvature.sqrt()), &DMatrix::identity(d, d))
    }

    /// Rescaled precision, chain parameters and law.
    fn unit(&self, params: &ChainParams, law: &GaussianLaw) -> (DMatrix<f64>, ChainParams, GaussianLaw) {
        let s = self.scaling();
        let mut p = params.clone();
        p.t = params.t * self.curvature.sqrt();
        (
            &self.precision / self.curvature,
            p,
            GaussianLaw { mean: &s * &law.mean, cov: &s * &law.cov * &s },
        )
    }

    pub fn lsi_constant(&self) -> f64 {
        1.0 / linalg::min_eigenvalue(&self.precision)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DissipationRow {
    pub k: usize,
    pub kl: f64,
    pub fisher: f64,
    pub mixed_fisher: f64,
    pub modified_entropy: f64,
    pub certified_factor: f64,
    /// `L(ν_k)/L(ν_{k−1})`; `NaN` at `k = 0`, `0` when both vanish.
    pub observed_ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct DissipationReport {
    pub rows: Vec<DissipationRow>,
    pub certified_factor: f64,
    pub rho: f64,
    pub violations: usize,
    pub worst_ratio: f64,
}

/// Relative slack for roundoff when comparing consecutive modified entropies.
const RATIO_SLACK: f64 = 1e-10;

/// Propagate `ν₀` exactly under `P = D H` (the placement in `params` is
/// honoured) and compare each step's modified-entropy ratio with the certified
/// contraction factor. Everything is evaluated at unit curvature.
pub fn verify_dissipation(setup: &QuadraticSetup, params: &ChainParams, nu0: &GaussianLaw, n_max: usize, a: f64, c_ls: f64) -> Result<DissipationReport> {
    let cert = certify::dissipation_rate(&RateInputs { t: params.t, eta: params.eta, a, c_ls, l: setup.curvature, l_h: 0.0 })?;
    if !cert.valid {
        return Err(KmcError::Precondition(format!("certificate invalid (rho = {})", cert.rho)));
    }
    let (p, unit_params, law) = setup.unit(params, nu0);
    let mu = GaussianLaw::invariant(&p)?;
    let kernel = kernel_of_transition(&p, &unit_params)?;
    let factor = cert.contraction_factor;
    let mut mean = &law.mean - &mu.mean;
    let mut dev = &law.cov - &mu.cov;
    let mut rows = Vec::with_capacity(n_max + 1);
    let mut prev: Option<f64> = None;
    let (mut violations, mut worst_ratio) = (0, 0.0f64);
    for k in 0..=n_max {
        let dv = divergences_from_deviation(&mean, &dev, &mu, None, a)?;
        let l = dv.modified_entropy;
        let observed_ratio = match prev {
            None => f64::NAN,
            Some(p) if p == 0.0 && l == 0.0 => 0.0,
            Some(p) => l / p,
        };
        if let Some(p) = prev {
            if l > factor * p * (1.0 + RATIO_SLACK) + f64::MIN_POSITIVE {
                violations += 1;
            }
            if p > 0.0 {
                worst_ratio = worst_ratio.max(observed_ratio);
            }
        }
        rows.push(DissipationRow { k, kl: dv.kl, fisher: dv.fisher, mixed_fisher: dv.mixed_fisher, modified_entropy: l, certified_factor: factor, observed_ratio });
        prev = Some(l);
        mean = &kernel.m * &mean;
        dev = linalg::symmetrize(&(&kernel.m * &dev * kernel.m.transpose()));
    }
    Ok(DissipationReport { rows, certified_factor: factor, rho: cert.rho, violations, worst_ratio })
}

#[derive(Clone, Debug, Serialize)]
pub struct RegularizationReport {
    pub entropy: f64,
    pub w2_sq: f64,
    pub constant: f64,
    pub holds: bool,
}

/// Compare `Ent(ν₀Qⁿ|μ)` with `c_n·W₂²(ν₀, μ)` for `Q = D H D`.
pub fn verify_regularization(setup: &QuadraticSetup, params: &ChainParams, nu0: &GaussianLaw, n: usize) -> Result<RegularizationReport> {
    let unit_t = params.t * setup.curvature.sqrt();
    let consts = certify::regularization_constants(unit_t, params.eta, 0.0, n)?;
    let q = params.clone().with_placement(RefreshPlacement::RefreshFlowRefresh);
    let (p, unit_params, law) = setup.unit(&q, nu0);
    let mu = GaussianLaw::invariant(&p)?;
    let kernel = kernel_of_transition(&p, &unit_params)?;
    let w2 = divergences(&law, &mu, None, 0.0)?.w2;
    let mut mean = &law.mean - &mu.mean;
    let mut dev = &law.cov - &mu.cov;
    for _ in 0..n {
        mean = &kernel.m * &mean;
        dev = linalg::symmetrize(&(&kernel.m * &dev * kernel.m.transpose()));
    }
    let entropy = divergences_from_deviation(&mean, &dev, &mu, None, 0.0)?.kl;
    let constant = consts.c_n;
    Ok(RegularizationReport { entropy, w2_sq: w2 * w2, constant, holds: entropy <= constant * w2 * w2 * (1.0 + RATIO_SLACK) })
}
