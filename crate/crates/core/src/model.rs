//! Target potentials and their smoothness metadata.
//!
//! A [`Potential`] supplies `U`, `∇U` and optionally `∇²U`, together with the
//! curvature bound `L` (on `|∇²U|`) and the Frobenius-Lipschitz constant `L_H`
//! of the Hessian. Builtins that are not globally smooth carry a working box on
//! which both constants are certified.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, KmcError, Result};
use crate::linalg;

/// Axis-aligned box `[lo_i, hi_i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkingBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl WorkingBox {
    pub fn cube(d: usize, half_width: f64) -> Self {
        Self { lo: vec![-half_width; d], hi: vec![half_width; d] }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.lo).zip(&self.hi).all(|((x, lo), hi)| *x >= *lo && *x <= *hi)
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(lo, hi)| lo + (hi - lo) * rng.random::<f64>()).collect()
    }
}

/// Curvature bound `L`, Hessian Lipschitz constant `L_H` and the region on
/// which they hold (`None` means globally).
#[derive(Clone, Debug, PartialEq)]
pub struct Smoothness {
    pub l: f64,
    pub l_h: f64,
    pub working_box: Option<WorkingBox>,
}

pub trait Potential: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64], grad: &mut [f64]);
    fn hessian(&self, _x: &[f64]) -> Option<DMatrix<f64>> {
        None
    }
    fn has_hessian(&self) -> bool {
        false
    }
    fn smoothness(&self) -> Smoothness;
    /// Log-Sobolev constant of `exp(-U)`, when known.
    fn lsi_constant(&self) -> Option<f64> {
        None
    }
    fn name(&self) -> String;
}

pub type SharedPotential = Arc<dyn Potential>;

/// Value, gradient and (if available) Hessian at one point.
#[derive(Clone, Debug)]
pub struct EvalBundle {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub hessian: Option<DMatrix<f64>>,
}

pub fn eval_bundle(p: &dyn Potential, x: &[f64]) -> Result<EvalBundle> {
    check_dim(p.dim(), x.len())?;
    let mut gradient = vec![0.0; x.len()];
    p.gradient(x, &mut gradient);
    Ok(EvalBundle { value: p.value(x), gradient, hessian: p.hessian(x) })
}

pub(crate) fn require_hessian(p: &dyn Potential, x: &[f64]) -> Result<DMatrix<f64>> {
    p.hessian(x).ok_or(KmcError::MissingHessian)
}

/// `U(x) = x·Px/2` with `P` symmetric positive semidefinite.
#[derive(Clone, Debug)]
pub struct Quadratic {
    p: DMatrix<f64>,
    l: f64,
    lambda_min: f64,
}

impl Quadratic {
    pub fn new(p: DMatrix<f64>) -> Result<Self> {
        if p.nrows() != p.ncols() || p.nrows() == 0 {
            return Err(KmcError::InvalidParameter("quadratic matrix must be square and non-empty".into()));
        }
        if (&p - p.transpose()).amax() > 1e-12 * p.amax().max(1.0) {
            return Err(KmcError::InvalidParameter("quadratic matrix must be symmetric".into()));
        }
        let eig = linalg::sym_eigen(&p);
        let lambda_min = eig.eigenvalues.min();
        if lambda_min < -1e-12 * eig.eigenvalues.amax().max(1.0) {
            return Err(KmcError::NotPositiveDefinite("quadratic matrix has a negative eigenvalue".into()));
        }
        Ok(Self { l: eig.eigenvalues.max().max(0.0), lambda_min: lambda_min.max(0.0), p: linalg::symmetrize(&p) })
    }

    pub fn diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&linalg::to_dvec(diag)))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.lambda_min
    }
}

impl Potential for Quadratic {
    fn dim(&self) -> usize {
        self.p.nrows()
    }
    fn value(&self, x: &[f64]) -> f64 {
        let xv = linalg::to_dvec(x);
        0.5 * xv.dot(&(&self.p * &xv))
    }
    fn gradient(&self, x: &[f64], grad: &mut [f64]) {
        let d = x.len();
        for (i, g) in grad.iter_mut().enumerate() {
            *g = (0..d).map(|j| self.p[(i, j)] * x[j]).sum();
        }
    }
    fn hessian(&self, _x: &[f64]) -> Option<DMatrix<f64>> {
        Some(self.p.clone())
    }
    fn has_hessian(&self) -> bool {
        true
    }
    fn smoothness(&self) -> Smoothness {
        Smoothness { l: self.l, l_h: 0.0, working_box: None }
    }
    fn lsi_constant(&self) -> Option<f64> {
        (self.lambda_min > 0.0).then(|| 1.0 / self.lambda_min)
    }
    fn name(&self) -> String {
        "quadratic".into()
    }
}

/// `U(x) = scale·((x²−1)² + tilt·x) − floor` in one dimension, with `floor`
/// chosen so that `min U = 0`. The untilted well is `scale·(x²−1)²`.
#[derive(Clone, Debug)]
pub struct DoubleWell1D {
    pub scale: f64,
    pub tilt: f64,
    floor: f64,
    pub working_box: WorkingBox,
}

impl DoubleWell1D {
    pub fn new(scale: f64, half_width: f64) -> Result<Self> {
        if !(scale > 0.0) || !(half_width > 0.0) {
            return Err(KmcError::InvalidParameter("double well needs scale > 0 and box half-width > 0".into()));
        }
        Ok(Self { scale, tilt: 0.0, floor: 0.0, working_box: WorkingBox::cube(1, half_width) })
    }

    /// Tilted well; for small positive `tilt` the left well is the deeper one.
    pub fn tilted(scale: f64, tilt: f64, half_width: f64) -> Result<Self> {
        let mut w = Self::new(scale, half_width)?;
        if !tilt.is_finite() {
            return Err(KmcError::InvalidParameter("tilt must be finite".into()));
        }
        w.tilt = tilt;
        w.floor = scale * Self::shape_minimum(tilt);
        Ok(w)
    }

    /// `min_x (x²−1)² + τx`: coarse scan, then Newton on the stationarity equation.
    fn shape_minimum(tau: f64) -> f64 {
        let f = |x: f64| (x * x - 1.0).powi(2) + tau * x;
        let reach = 2.0 + tau.abs().cbrt();
        let mut best = -reach;
        let steps = 40_000;
        for i in 0..=steps {
            let x = -reach + 2.0 * reach * i as f64 / steps as f64;
            if f(x) < f(best) {
                best = x;
            }
        }
        for _ in 0..50 {
            let g = 4.0 * best * (best * best - 1.0) + tau;
            let h = 12.0 * best * best - 4.0;
            if h <= 0.0 {
                break;
            }
            best -= g / h;
        }
        f(best)
    }

    /// Scale chosen so that `L = 1` on `[-b, b]`.
    pub fn unit_curvature(half_width: f64) -> Result<Self> {
        let raw = Self::new(1.0, half_width)?;
        Self::new(1.0 / raw.smoothness().l, half_width)
    }
}

impl Potential for DoubleWell1D {
    fn dim(&self) -> usize {
        1
    }
    fn value(&self, x: &[f64]) -> f64 {
        let q = x[0] * x[0] - 1.0;
        self.scale * (q * q + self.tilt * x[0]) - self.floor
    }
    fn gradient(&self, x: &[f64], grad: &mut [f64]) {
        grad[0] = self.scale * (4.0 * x[0] * (x[0] * x[0] - 1.0) + self.tilt);
    }
    fn hessian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_element(1, 1, self.scale * (12.0 * x[0] * x[0] - 4.0)))
    }
    fn has_hessian(&self) -> bool {
        true
    }
    fn smoothness(&self) -> Smoothness {
        let (lo, hi) = (self.working_box.lo[0], self.working_box.hi[0]);
        let curv = |x: f64| (12.0 * x * x - 4.0).abs();
        let mut l = curv(lo).max(curv(hi));
        if lo <= 0.0 && hi >= 0.0 {
            l = l.max(4.0);
        }
        let r = lo.abs().max(hi.abs());
        Smoothness { l: self.scale * l, l_h: 24.0 * self.scale * r, working_box: Some(self.working_box.clone()) }
    }
    fn name(&self) -> String {
        "double_well_1d".into()
    }
}

/// `U(x) = scale·(|x|²−r²)²` in two dimensions: a ring of minima of radius `r`.
#[derive(Clone, Debug)]
pub struct MexicanHat2D {
    pub scale: f64,
    pub radius: f64,
    pub working_box: WorkingBox,
}

impl MexicanHat2D {
    pub fn new(scale: f64, radius: f64, half_width: f64) -> Result<Self> {
        if !(scale > 0.0) || !(radius > 0.0) || !(half_width > 0.0) {
            return Err(KmcError::InvalidParameter("mexican hat needs positive scale, radius and box".into()));
        }
        Ok(Self { scale, radius, working_box: WorkingBox::cube(2, half_width) })
    }

    pub fn unit_curvature(radius: f64, half_width: f64) -> Result<Self> {
        let raw = Self::new(1.0, radius, half_width)?;
        Self::new(1.0 / raw.smoothness().l, radius, half_width)
    }

    fn max_radius(&self) -> f64 {
        let s: f64 = self.working_box.lo.iter().zip(&self.working_box.hi).map(|(l, h)| l.abs().max(h.abs()).powi(2)).sum();
        s.sqrt()
    }
}

impl Potential for MexicanHat2D {
    fn dim(&self) -> usize {
        2
    }
    fn value(&self, x: &[f64]) -> f64 {
        let q = x[0] * x[0] + x[1] * x[1] - self.radius * self.radius;
        self.scale * q * q
    }
    fn gradient(&self, x: &[f64], grad: &mut [f64]) {
        let q = x[0] * x[0] + x[1] * x[1] - self.radius * self.radius;
        grad[0] = 4.0 * self.scale * q * x[0];
        grad[1] = 4.0 * self.scale * q * x[1];
    }
    fn hessian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        let q = x[0] * x[0] + x[1] * x[1] - self.radius * self.radius;
        let s = self.scale;
        Some(DMatrix::from_row_slice(
            2,
            2,
            &[
                s * (4.0 * q + 8.0 * x[0] * x[0]),
                s * 8.0 * x[0] * x[1],
                s * 8.0 * x[0] * x[1],
                s * (4.0 * q + 8.0 * x[1] * x[1]),
            ],
        ))
    }
    fn has_hessian(&self) -> bool {
        true
    }
    fn smoothness(&self) -> Smoothness {
        // Eigenvalues are 4(ρ²−r²) (tangential) and 12ρ²−4r² (radial); both are
        // monotone in ρ², so the extremes sit at ρ = 0 and ρ = ρ_max.
        let r2 = self.radius * self.radius;
        let rho2 = self.max_radius().powi(2);
        let l = [4.0 * r2, (4.0 * (rho2 - r2)).abs(), (12.0 * rho2 - 4.0 * r2).abs()].into_iter().fold(0.0, f64::max);
        // ‖D∇²U(x)[h]‖_F = 8s|x||h|·√(8cos²+2) ≤ 8√10·s·ρ_max.
        let l_h = 8.0 * 10f64.sqrt() * self.scale * self.max_radius();
        Smoothness { l: self.scale * l, l_h, working_box: Some(self.working_box.clone()) }
    }
    fn name(&self) -> String {
        "mexican_hat_2d".into()
    }
}

/// `U ≡ 0` (free flight).
#[derive(Clone, Debug)]
pub struct ZeroPotential {
    pub dim: usize,
}

impl Potential for ZeroPotential {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, _x: &[f64]) -> f64 {
        0.0
    }
    fn gradient(&self, _x: &[f64], grad: &mut [f64]) {
        grad.fill(0.0);
    }
    fn hessian(&self, _x: &[f64]) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(self.dim, self.dim))
    }
    fn has_hessian(&self) -> bool {
        true
    }
    fn smoothness(&self) -> Smoothness {
        Smoothness { l: 0.0, l_h: 0.0, working_box: None }
    }
    fn name(&self) -> String {
        "zero".into()
    }
}

/// `β·U` for a shared base potential; used by the annealing schedule.
#[derive(Clone)]
pub struct Scaled {
    pub base: SharedPotential,
    pub factor: f64,
}

impl Potential for Scaled {
    fn dim(&self) -> usize {
        self.base.dim()
    }
    fn value(&self, x: &[f64]) -> f64 {
        self.factor * self.base.value(x)
    }
    fn gradient(&self, x: &[f64], grad: &mut [f64]) {
        self.base.gradient(x, grad);
        grad.iter_mut().for_each(|g| *g *= self.factor);
    }
    fn hessian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        self.base.hessian(x).map(|h| h * self.factor)
    }
    fn has_hessian(&self) -> bool {
        self.base.has_hessian()
    }
    fn smoothness(&self) -> Smoothness {
        let s = self.base.smoothness();
        Smoothness { l: s.l * self.factor, l_h: s.l_h * self.factor, working_box: s.working_box }
    }
    fn lsi_constant(&self) -> Option<f64> {
        None
    }
    fn name(&self) -> String {
        format!("{}*{}", self.factor, self.base.name())
    }
}

/// Worst observed ratios from [`validate_smoothness`]; values above 1 flag a
/// violated declaration.
#[derive(Clone, Debug, Serialize)]
pub struct SmoothnessReport {
    pub worst_curvature_ratio: f64,
    pub worst_lipschitz_ratio: f64,
    pub samples: usize,
    pub curvature_ok: bool,
    pub lipschitz_ok: bool,
}

/// Sample `n_samples` points of `region` (deterministically) and compare the
/// Hessian against the declared `L` and `L_H`.
pub fn validate_smoothness(p: &dyn Potential, region: &WorkingBox, n_samples: usize) -> Result<SmoothnessReport> {
    if n_samples < 2 {
        return Err(KmcError::InvalidParameter("validate_smoothness needs at least 2 samples".into()));
    }
    check_dim(p.dim(), region.lo.len())?;
    let s = p.smoothness();
    let mut rng = ChaCha20Rng::seed_from_u64(0x5eed);
    let points: Vec<Vec<f64>> = (0..n_samples).map(|_| region.sample(&mut rng)).collect();
    let hessians = points.iter().map(|x| require_hessian(p, x)).collect::<Result<Vec<_>>>()?;
    let ratio = |num: f64, den: f64| {
        if num <= 1e-14 * den.max(1.0) {
            0.0
        } else if den == 0.0 {
            f64::INFINITY
        } else {
            num / den
        }
    };
    let worst_curvature_ratio = hessians.iter().map(|h| ratio(linalg::op_norm(h), s.l)).fold(0.0, f64::max);
    let mut worst_lipschitz_ratio: f64 = 0.0;
    for i in 0..n_samples {
        for j in (i + 1)..n_samples {
            let dx = linalg::dist(&points[i], &points[j]);
            if dx == 0.0 {
                continue;
            }
            let dh = (&hessians[i] - &hessians[j]).norm();
            worst_lipschitz_ratio = worst_lipschitz_ratio.max(ratio(dh, s.l_h * dx));
        }
    }
    Ok(SmoothnessReport {
        worst_curvature_ratio,
        worst_lipschitz_ratio,
        samples: n_samples,
        curvature_ok: worst_curvature_ratio <= 1.0 + 1e-9,
        lipschitz_ok: worst_lipschitz_ratio <= 1.0 + 1e-9,
    })
}

/// Largest relative deviation between `∇U` and central finite differences of `U`.
pub fn gradient_check(p: &dyn Potential, x: &[f64], h: f64) -> f64 {
    let mut grad = vec![0.0; x.len()];
    p.gradient(x, &mut grad);
    let scale = linalg::norm(&grad).max(1.0);
    let mut xp = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let up = p.value(&xp);
        xp[i] = x[i] - h;
        let um = p.value(&xp);
        xp[i] = x[i];
        worst = worst.max(((up - um) / (2.0 * h) - grad[i]).abs() / scale);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_potential_bundle() {
        let b = eval_bundle(&ZeroPotential { dim: 2 }, &[1.0, 2.0]).unwrap();
        assert_eq!(b.value, 0.0);
        assert_eq!(b.gradient, vec![0.0, 0.0]);
        assert_eq!(b.hessian.unwrap(), DMatrix::zeros(2, 2));
    }

    #[test]
    fn quadratic_bundle() {
        let q = Quadratic::diagonal(&[1.0]).unwrap();
        let b = eval_bundle(&q, &[3.0]).unwrap();
        assert_eq!(b.value, 4.5);
        assert_eq!(b.gradient, vec![3.0]);
        assert_eq!(b.hessian.unwrap()[(0, 0)], 1.0);
    }

    #[test]
    fn double_well_bundle_at_origin() {
        let w = DoubleWell1D::new(1.0, 2.0).unwrap();
        let b = eval_bundle(&w, &[0.0]).unwrap();
        assert_eq!(b.value, 1.0);
        assert_eq!(b.gradient, vec![0.0]);
        assert_eq!(b.hessian.unwrap()[(0, 0)], -4.0);
        // Finite-difference second derivative of (x²−1)² at 0.
        let h = 1e-4;
        let fd = (w.value(&[h]) - 2.0 * w.value(&[0.0]) + w.value(&[-h])) / (h * h);
        assert!((fd + 4.0).abs() < 1e-6);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        assert!(matches!(
            eval_bundle(&ZeroPotential { dim: 2 }, &[1.0]),
            Err(KmcError::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn double_well_constants_on_box() {
        let w = DoubleWell1D::new(1.0, 2.0).unwrap();
        let s = w.smoothness();
        assert_eq!(s.l, 44.0);
        assert_eq!(s.l_h, 48.0);
        let unit = DoubleWell1D::unit_curvature(2.0).unwrap();
        assert!((unit.smoothness().l - 1.0).abs() < 1e-15);
    }

    #[test]
    fn quadratic_lipschitz_ratio_is_zero() {
        let q = Quadratic::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0])).unwrap();
        let r = validate_smoothness(&q, &WorkingBox::cube(2, 3.0), 20).unwrap();
        assert_eq!(r.worst_lipschitz_ratio, 0.0);
        assert!(r.curvature_ok);
    }

    #[test]
    fn builtin_boxes_validate() {
        let w = DoubleWell1D::new(1.0, 2.0).unwrap();
        let r = validate_smoothness(&w, &w.working_box.clone(), 100).unwrap();
        assert!(r.curvature_ok && r.lipschitz_ok, "{r:?}");
        let m = MexicanHat2D::new(1.0, 1.0, 2.0).unwrap();
        let r = validate_smoothness(&m, &m.working_box.clone(), 100).unwrap();
        assert!(r.curvature_ok && r.lipschitz_ok, "{r:?}");
    }

    struct Understated;
    impl Potential for Understated {
        fn dim(&self) -> usize {
            1
        }
        fn value(&self, x: &[f64]) -> f64 {
            x[0] * x[0] * x[0] * x[0]
        }
        fn gradient(&self, x: &[f64], g: &mut [f64]) {
            g[0] = 4.0 * x[0].powi(3);
        }
        fn hessian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
            Some(DMatrix::from_element(1, 1, 12.0 * x[0] * x[0]))
        }
        fn has_hessian(&self) -> bool {
            true
        }
        fn smoothness(&self) -> Smoothness {
            Smoothness { l: 1.0, l_h: 1.0, working_box: None }
        }
        fn name(&self) -> String {
            "understated".into()
        }
    }

    #[test]
    fn understated_constants_are_flagged() {
        let r = validate_smoothness(&Understated, &WorkingBox::cube(1, 2.0), 50).unwrap();
        assert!(r.worst_curvature_ratio > 1.0 && !r.curvature_ok);
        assert!(!r.lipschitz_ok);
    }

    #[test]
    fn missing_hessian_fails_fast() {
        struct NoHess;
        impl Potential for NoHess {
            fn dim(&self) -> usize {
                1
            }
            fn value(&self, _x: &[f64]) -> f64 {
                0.0
            }
            fn gradient(&self, _x: &[f64], g: &mut [f64]) {
                g[0] = 0.0;
            }
            fn smoothness(&self) -> Smoothness {
                Smoothness { l: 0.0, l_h: 0.0, working_box: None }
            }
            fn name(&self) -> String {
                "nohess".into()
            }
        }
        assert!(matches!(validate_smoothness(&NoHess, &WorkingBox::cube(1, 1.0), 3), Err(KmcError::MissingHessian)));
    }

    #[test]
    fn quadratic_l_is_top_eigenvalue() {
        let q = Quadratic::new(DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0])).unwrap();
        assert!((q.smoothness().l - 3.0).abs() < 1e-10);
        assert!((q.lsi_constant().unwrap() - 1.0).abs() < 1e-10);
    }

    proptest! {
        #[test]
        fn gradients_match_finite_differences(a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let w = DoubleWell1D::new(1.0, 2.0).unwrap();
            prop_assert!(gradient_check(&w, &[a], 1e-6) < 1e-5);
            let m = MexicanHat2D::new(1.0, 1.0, 2.0).unwrap();
            prop_assert!(gradient_check(&m, &[a, b], 1e-6) < 1e-5);
            let q = Quadratic::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0])).unwrap();
            prop_assert!(gradient_check(&q, &[a, b], 1e-6) < 1e-5);
        }

        #[test]
        fn hessian_norm_within_l(a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let m = MexicanHat2D::new(0.7, 1.2, 2.0).unwrap();
            let h = m.hessian(&[a, b]).unwrap();
            prop_assert!(linalg::op_norm(&h) <= m.smoothness().l * (1.0 + 1e-9));
        }
    }
}
