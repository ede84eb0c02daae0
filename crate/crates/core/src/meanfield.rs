//! Mean-field particle systems: `N` exchangeable particles in `R^p` with a
//! confinement potential and an even pairwise interaction, plus a
//! propagation-of-chaos experiment comparing small-`N` marginals with a
//! large-`N` proxy of the limit.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{transition_with_draws, ChainParams, RefreshPlacement, RngStream};
use crate::error::{check_dim, KmcError, Result};
use crate::flow::PhaseState;
use crate::model::{Potential, SharedPotential, Smoothness, WorkingBox};
use crate::stats;

/// `U_N(x) = Σ U(x_i) + (1/2N) Σ_{i≠j} W(x_i − x_j)` on `R^{pN}`.
#[derive(Clone)]
pub struct MeanFieldPotential {
    pub particle_dim: usize,
    pub particles: usize,
    pub confinement: SharedPotential,
    pub interaction: SharedPotential,
}

impl std::fmt::Debug for MeanFieldPotential {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "MeanField(p={}, N={}, {}, {})", self.particle_dim, self.particles, self.confinement.name(), self.interaction.name())
    }
}

/// Samples used to check that the interaction is even.
const EVENNESS_SAMPLES: usize = 64;

impl MeanFieldPotential {
    pub fn new(particles: usize, confinement: SharedPotential, interaction: SharedPotential) -> Result<Self> {
        let p = confinement.dim();
        check_dim(p, interaction.dim())?;
        if particles == 0 {
            return Err(KmcError::InvalidParameter("need at least one particle".into()));
        }
        let mut rng = RngStream::new(0x5eed);
        for _ in 0..EVENNESS_SAMPLES {
            let y: Vec<f64> = (0..p).map(|_| 4.0 * rng.uniform() - 2.0).collect();
            let minus: Vec<f64> = y.iter().map(|v| -v).collect();
            let (a, b) = (interaction.value(&y), interaction.value(&minus));
            if (a - b).abs() > 1e-10 * (1.0 + a.abs().max(b.abs())) {
                return Err(KmcError::InvalidParameter(format!("interaction is not even: W(y) = {a}, W(-y) = {b}")));
            }
        }
        Ok(Self { particle_dim: p, particles, confinement, interaction })
    }

    fn block<'a>(&self, x: &'a [f64], i: usize) -> &'a [f64] {
        &x[i * self.particle_dim..(i + 1) * self.particle_dim]
    }

    /// Particle indices ordered by state, so sums over partners do not depend
    /// on how particles are labelled.
    fn canonical_order(&self, x: &[f64]) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.particles).collect();
        order.sort_by(|&a, &b| {
            self.block(x, a).iter().zip(self.block(x, b)).map(|(u, v)| u.total_cmp(v)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
        });
        order
    }
}

impl Potential for MeanFieldPotential {
    fn dim(&self) -> usize {
        self.particle_dim * self.particles
    }

    fn value(&self, x: &[f64]) -> f64 {
        let n = self.particles;
        let mut conf = 0.0;
        let mut pair = 0.0;
        let mut diff = vec![0.0; self.particle_dim];
        for i in 0..n {
            conf += self.confinement.value(self.block(x, i));
            for j in (i + 1)..n {
                diff.iter_mut().zip(self.block(x, i).iter().zip(self.block(x, j))).for_each(|(d, (a, b))| *d = a - b);
                pair += self.interaction.value(&diff);
            }
        }
        conf + pair / n as f64
    }

    fn gradient(&self, x: &[f64], grad: &mut [f64]) {
        let (n, p) = (self.particles, self.particle_dim);
        let order = self.canonical_order(x);
        let mut diff = vec![0.0; p];
        let mut gw = vec![0.0; p];
        let mut acc = vec![0.0; p];
        let inv_n = 1.0 / n as f64;
        for i in 0..n {
            acc.fill(0.0);
            for &j in &order {
                if j == i {
                    continue;
                }
                diff.iter_mut().zip(self.block(x, i).iter().zip(self.block(x, j))).for_each(|(d, (a, b))| *d = a - b);
                self.interaction.gradient(&diff, &mut gw);
                acc.iter_mut().zip(&gw).for_each(|(a, g)| *a += g);
            }
            let out = &mut grad[i * p..(i + 1) * p];
            self.confinement.gradient(self.block(x, i), out);
            out.iter_mut().zip(&acc).for_each(|(o, a)| *o += inv_n * a);
        }
    }

    fn hessian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        let (n, p) = (self.particles, self.particle_dim);
        let mut h = DMatrix::zeros(n * p, n * p);
        let inv_n = 1.0 / n as f64;
        let mut diff = vec![0.0; p];
        for i in 0..n {
            let hu = self.confinement.hessian(self.block(x, i))?;
            let mut diag = hu;
            for j in 0..n {
                if j == i {
                    continue;
                }
                diff.iter_mut().zip(self.block(x, i).iter().zip(self.block(x, j))).for_each(|(d, (a, b))| *d = a - b);
                let hw = self.interaction.hessian(&diff)? * inv_n;
                diag += &hw;
                h.view_mut((i * p, j * p), (p, p)).copy_from(&(-hw));
            }
            h.view_mut((i * p, i * p), (p, p)).copy_from(&diag);
        }
        Some(h)
    }

    fn has_hessian(&self) -> bool {
        self.confinement.has_hessian() && self.interaction.has_hessian()
    }

    /// `L = L_U + 2L_W`; the Hessian-Lipschitz constant uses the same
    /// combination of the per-particle constants.
    fn smoothness(&self) -> Smoothness {
        let (u, w) = (self.confinement.smoothness(), self.interaction.smoothness());
        let working_box = u.working_box.map(|b| WorkingBox {
            lo: b.lo.iter().cycle().take(self.dim()).copied().collect(),
            hi: b.hi.iter().cycle().take(self.dim()).copied().collect(),
        });
        Smoothness { l: u.l + 2.0 * w.l, l_h: u.l_h + 2.0 * w.l_h, working_box }
    }

    fn name(&self) -> String {
        format!("meanfield_{}x{}", self.particles, self.particle_dim)
    }
}

/// Product initial law: `x_i ~ N(x_mean, x_sd²I)`, `v_i ~ N(0, v_sd²I)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticleInit {
    pub x_mean: Vec<f64>,
    pub x_sd: f64,
    pub v_sd: f64,
}

impl ParticleInit {
    pub fn sample(&self, rng: &mut RngStream) -> PhaseState {
        let x = self.x_mean.iter().map(|m| m + self.x_sd * rng.normal()).collect();
        let v = (0..self.x_mean.len()).map(|_| self.v_sd * rng.normal()).collect();
        PhaseState { x, v }
    }
}

/// Stream of particle `i` in replica `r`; the replica index occupies the high bits.
pub fn particle_stream(seed: u64, replica: u64, particle: u64) -> RngStream {
    RngStream::substream(seed, (replica << 32) | particle)
}

/// Run the particle chain where every particle draws its initial state and
/// its refresh noise from its own stream. Returns the states at `record_at`.
pub fn run_particles(mf: &MeanFieldPotential, params: &ChainParams, init: &ParticleInit, streams: &mut [RngStream], n_steps: usize, record_at: &[usize]) -> Result<Vec<PhaseState>> {
    check_dim(mf.particles, streams.len())?;
    check_dim(mf.particle_dim, init.x_mean.len())?;
    let p = mf.particle_dim;
    let mut z = PhaseState::zeros(mf.dim());
    for (i, s) in streams.iter_mut().enumerate() {
        let zi = init.sample(s);
        z.x[i * p..(i + 1) * p].copy_from_slice(&zi.x);
        z.v[i * p..(i + 1) * p].copy_from_slice(&zi.v);
    }
    let mut out = Vec::with_capacity(record_at.len());
    let mut g1 = vec![0.0; mf.dim()];
    let mut g2 = vec![0.0; mf.dim()];
    let two = params.placement == RefreshPlacement::RefreshFlowRefresh;
    for n in 0..=n_steps {
        for _ in record_at.iter().filter(|&&r| r == n) {
            out.push(z.clone());
        }
        if n == n_steps {
            break;
        }
        for (i, s) in streams.iter_mut().enumerate() {
            s.fill_normal(&mut g1[i * p..(i + 1) * p]);
            if two {
                s.fill_normal(&mut g2[i * p..(i + 1) * p]);
            }
        }
        z = transition_with_draws(mf, params, &z, &g1, &g2)?;
    }
    Ok(out)
}

/// How the empirical `W₂` between sample clouds was computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum W2Method {
    SortedExact,
    Assignment,
    Sliced,
}

/// Largest cloud solved by exact assignment.
pub const ASSIGNMENT_LIMIT: usize = 512;
pub const SLICED_DIRECTIONS: usize = 64;

/// Squared `W₂` between two equally weighted clouds of the same size.
pub fn empirical_w2_sq(a: &[Vec<f64>], b: &[Vec<f64>], seed: u64) -> Result<(f64, W2Method)> {
    check_dim(a.len(), b.len())?;
    if a.is_empty() {
        return Err(KmcError::InvalidParameter("empty sample".into()));
    }
    let dim = a[0].len();
    if dim == 1 {
        let col = |s: &[Vec<f64>]| s.iter().map(|v| v[0]).collect::<Vec<f64>>();
        return Ok((sorted_w2_sq(col(a), col(b)), W2Method::SortedExact));
    }
    if a.len() <= ASSIGNMENT_LIMIT && dim <= 4 {
        let cost = DMatrix::from_fn(a.len(), b.len(), |i, j| a[i].iter().zip(&b[j]).map(|(x, y)| (x - y).powi(2)).sum::<f64>());
        let total: f64 = hungarian(&cost).iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
        return Ok((total / a.len() as f64, W2Method::Assignment));
    }
    let mut rng = RngStream::new(seed);
    let mut acc = 0.0;
    for _ in 0..SLICED_DIRECTIONS {
        let mut dir = rng.normals(dim);
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|x| *x /= norm);
        let proj = |s: &[Vec<f64>]| s.iter().map(|v| v.iter().zip(&dir).map(|(a, b)| a * b).sum()).collect::<Vec<f64>>();
        acc += sorted_w2_sq(proj(a), proj(b));
    }
    Ok((acc / SLICED_DIRECTIONS as f64, W2Method::Sliced))
}

fn sorted_w2_sq(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(|x, y| x.total_cmp(y));
    b.sort_by(|x, y| x.total_cmp(y));
    a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Minimum-cost perfect matching (square cost); returns the column of each row.
pub fn hungarian(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; n + 1]);
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if owner[j] > 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    assignment
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChaosConfig {
    pub particle_counts: Vec<usize>,
    pub reference_particles: usize,
    pub n_steps: usize,
    pub record_at: Vec<usize>,
    /// Marginal size.
    pub k: usize,
    pub replicas: usize,
    pub reference_replicas: usize,
    pub bootstrap: usize,
    pub init: ParticleInit,
}

/// Minimum replicas for a cluster bootstrap.
pub const MIN_REPLICAS: usize = 10;

#[derive(Clone, Debug, Serialize)]
pub struct ChaosRow {
    pub particles: usize,
    pub step: usize,
    pub k: usize,
    pub w2_estimate: f64,
    pub bootstrap_lo: f64,
    pub bootstrap_hi: f64,
    /// 95% quantile of the estimate under exchangeable relabelling of the two
    /// samples; estimates below it are indistinguishable from zero.
    pub null_hi: f64,
    pub method: W2Method,
    #[serde(skip)]
    pub bootstrap_draws: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ChaosReport {
    pub rows: Vec<ChaosRow>,
    /// Slope of `ln W₂²` against `ln N` at the last recorded step, with a
    /// 95% interval from the paired bootstrap draws.
    pub slope: f64,
    pub slope_lo: f64,
    pub slope_hi: f64,
    pub tuples_per_replica: usize,
}

impl ChaosReport {
    /// Whether `W₂²` at `n_small` particles exceeds that at `n_large` in at
    /// least 97.5% of paired bootstrap draws at the last recorded step.
    pub fn decrease_significant(&self, n_small: usize, n_large: usize) -> Option<bool> {
        let step = self.rows.iter().map(|r| r.step).max()?;
        let row = |n: usize| self.rows.iter().find(|r| r.particles == n && r.step == step);
        let (a, b) = (row(n_small)?, row(n_large)?);
        let diffs: Vec<f64> = a.bootstrap_draws.iter().zip(&b.bootstrap_draws).map(|(x, y)| x - y).collect();
        Some(!diffs.is_empty() && stats::quantile(&diffs, 0.025) > 0.0)
    }
}

/// Per replica: one vector of k-tuples (flattened `p·k` coordinates of
/// consecutive particles) per record step.
type ReplicaTuples = Vec<Vec<Vec<f64>>>;

fn simulate(mf: &MeanFieldPotential, params: &ChainParams, cfg: &ChaosConfig, seed: u64, replicas: usize, tuples: usize) -> Result<Vec<ReplicaTuples>> {
    let pk = mf.particle_dim * cfg.k;
    (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut streams: Vec<RngStream> = (0..mf.particles).map(|i| particle_stream(seed, r as u64, i as u64)).collect();
            let states = run_particles(mf, params, &cfg.init, &mut streams, cfg.n_steps, &cfg.record_at)?;
            Ok(states.iter().map(|z| (0..tuples).map(|m| z.x[m * pk..(m + 1) * pk].to_vec()).collect()).collect())
        })
        .collect()
}

fn pooled(runs: &[ReplicaTuples], pick: &[usize], step: usize) -> Vec<Vec<f64>> {
    pick.iter().flat_map(|&r| runs[r][step].iter().cloned()).collect()
}

/// Compare the k-particle marginal at each particle count with a large-`N`
/// reference run. Sample sizes are equal across particle counts: each
/// replica contributes `min(N)/k` disjoint tuples.
pub fn chaos_experiment(confinement: SharedPotential, interaction: SharedPotential, params: &ChainParams, cfg: &ChaosConfig, seed: u64) -> Result<ChaosReport> {
    if cfg.replicas < MIN_REPLICAS || cfg.reference_replicas < 1 || cfg.bootstrap < MIN_REPLICAS {
        return Err(KmcError::InvalidParameter(format!("need >= {MIN_REPLICAS} replicas and bootstrap draws")));
    }
    if cfg.k == 0 || cfg.particle_counts.is_empty() || cfg.record_at.iter().any(|&n| n > cfg.n_steps) {
        return Err(KmcError::InvalidParameter("invalid marginal size, particle counts or record steps".into()));
    }
    let n_min = *cfg.particle_counts.iter().min().expect("non-empty");
    let tuples = n_min / cfg.k;
    if tuples == 0 {
        return Err(KmcError::InvalidParameter("k exceeds the smallest particle count".into()));
    }
    let needed = cfg.replicas * tuples;
    let ref_tuples = cfg.reference_particles / cfg.k;
    if ref_tuples * cfg.reference_replicas < needed {
        return Err(KmcError::InvalidParameter(format!("reference run provides {} tuples, need {needed}", ref_tuples * cfg.reference_replicas)));
    }
    let ref_mf = MeanFieldPotential::new(cfg.reference_particles, confinement.clone(), interaction.clone())?;
    let ref_seed = seed ^ 0x9e37_79b9_7f4a_7c15;
    let reference = simulate(&ref_mf, params, cfg, ref_seed, cfg.reference_replicas, ref_tuples)?;
    let all_ref: Vec<usize> = (0..cfg.reference_replicas).collect();
    let mut rows = Vec::new();
    for &n_particles in &cfg.particle_counts {
        let mf = MeanFieldPotential::new(n_particles, confinement.clone(), interaction.clone())?;
        let runs = simulate(&mf, params, cfg, seed, cfg.replicas, tuples)?;
        let all: Vec<usize> = (0..cfg.replicas).collect();
        for (si, &step) in cfg.record_at.iter().enumerate() {
            let ref_cloud = |pick: &[usize]| -> Vec<Vec<f64>> { pooled(&reference, pick, si).into_iter().take(needed).collect() };
            let sample = pooled(&runs, &all, si);
            let reference_cloud = ref_cloud(&all_ref);
            let (est, method) = empirical_w2_sq(&sample, &reference_cloud, seed)?;
            let mut draws = Vec::with_capacity(cfg.bootstrap);
            let mut nulls = Vec::with_capacity(cfg.bootstrap);
            for b in 0..cfg.bootstrap {
                // Paired across particle counts: draw `b` uses the same stream everywhere.
                let mut rng = RngStream::substream(seed ^ 0xb007, b as u64);
                let pick: Vec<usize> = (0..cfg.replicas).map(|_| (rng.uniform() * cfg.replicas as f64) as usize).collect();
                let mut ref_pick: Vec<usize> = Vec::new();
                while ref_pick.len() * ref_tuples < needed {
                    ref_pick.push((rng.uniform() * cfg.reference_replicas as f64) as usize);
                }
                draws.push(empirical_w2_sq(&pooled(&runs, &pick, si), &ref_cloud(&ref_pick), seed)?.0);
                // Null: shuffle whole replicas between the two samples, with the
                // reference cut into chunks of the same size as a replica.
                let mut pool: Vec<Vec<Vec<f64>>> = runs.iter().map(|r| r[si].clone()).collect();
                pool.extend(reference_cloud.chunks(tuples).map(|c| c.to_vec()));
                for i in (1..pool.len()).rev() {
                    let j = ((rng.uniform() * (i + 1) as f64) as usize).min(i);
                    pool.swap(i, j);
                }
                let left: Vec<Vec<f64>> = pool[..cfg.replicas].iter().flatten().cloned().collect();
                let right: Vec<Vec<f64>> = pool[cfg.replicas..].iter().flatten().cloned().collect();
                nulls.push(empirical_w2_sq(&left, &right, seed)?.0);
            }
            let null_hi = stats::quantile(&nulls, 0.95);
            rows.push(ChaosRow {
                particles: n_particles,
                step,
                k: cfg.k,
                w2_estimate: est,
                bootstrap_lo: stats::quantile(&draws, 0.025),
                bootstrap_hi: stats::quantile(&draws, 0.975),
                null_hi,
                method,
                bootstrap_draws: draws,
            });
        }
    }
    let last = cfg.record_at.iter().copied().max().unwrap_or(0);
    let final_rows: Vec<&ChaosRow> = rows.iter().filter(|r| r.step == last).collect();
    let log_slope = |values: &[f64]| -> f64 {
        let fit: Vec<(f64, f64)> =
            final_rows.iter().zip(values).filter(|(_, &w)| w > 0.0).map(|(r, &w)| ((r.particles as f64).ln(), w.ln())).collect();
        if fit.len() < 2 {
            return f64::NAN;
        }
        let (x, y): (Vec<f64>, Vec<f64>) = fit.into_iter().unzip();
        stats::ols_slope(&x, &y)
    };
    let slope = log_slope(&final_rows.iter().map(|r| r.w2_estimate).collect::<Vec<_>>());
    let boot: Vec<f64> = (0..cfg.bootstrap)
        .map(|b| log_slope(&final_rows.iter().map(|r| r.bootstrap_draws[b]).collect::<Vec<_>>()))
        .filter(|s| s.is_finite())
        .collect();
    let (slope_lo, slope_hi) = if boot.is_empty() { (f64::NAN, f64::NAN) } else { (stats::quantile(&boot, 0.025), stats::quantile(&boot, 0.975)) };
    Ok(ChaosReport { rows, slope, slope_lo, slope_hi, tuples_per_replica: tuples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::transition;
    use crate::model::{gradient_check, DoubleWell1D, Quadratic, ZeroPotential};
    use std::sync::Arc;

    fn quad(c: f64) -> SharedPotential {
        Arc::new(Quadratic::diagonal(&[c]).unwrap())
    }

    #[test]
    fn two_particle_hand_expansion() {
        let mf = MeanFieldPotential::new(2, quad(1.0), quad(1.0)).unwrap();
        let x = [0.7, -1.3];
        // With N = 2 the pair sum has two ordered terms, each weighted 1/4.
        assert!((mf.value(&x) - (x[0] * x[0] + x[1] * x[1]) / 2.0 - (x[0] - x[1]).powi(2) / 4.0).abs() < 1e-14);
        assert_eq!(mf.smoothness().l, 3.0);
    }

    #[test]
    fn value_matches_direct_double_sum() {
        let w: SharedPotential = Arc::new(DoubleWell1D::new(0.3, 5.0).unwrap());
        let mf = MeanFieldPotential::new(7, quad(0.8), w.clone()).unwrap();
        let mut rng = RngStream::new(8);
        let x = rng.normals(7);
        let mut direct = x.iter().map(|v| 0.4 * v * v).sum::<f64>();
        for i in 0..7 {
            for j in 0..7 {
                if i != j {
                    direct += w.value(&[x[i] - x[j]]) / 14.0;
                }
            }
        }
        assert!((mf.value(&x) - direct).abs() < 1e-10);
        assert!(gradient_check(&mf, &x, 1e-6) < 1e-5);
        let h = mf.hessian(&x).unwrap();
        assert!((&h - h.transpose()).amax() < 1e-14);
    }

    #[test]
    fn odd_interaction_is_rejected() {
        let tilted: SharedPotential = Arc::new(DoubleWell1D::tilted(1.0, 0.5, 2.0).unwrap());
        assert!(MeanFieldPotential::new(3, quad(1.0), tilted).is_err());
    }

    #[test]
    fn exchangeability_of_value_and_gradient() {
        let w: SharedPotential = Arc::new(DoubleWell1D::new(0.3, 5.0).unwrap());
        let mf = MeanFieldPotential::new(6, quad(1.0), w).unwrap();
        let mut rng = RngStream::new(21);
        let x = rng.normals(6);
        let mut g = vec![0.0; 6];
        mf.gradient(&x, &mut g);
        for _ in 0..20 {
            let mut perm: Vec<usize> = (0..6).collect();
            for i in (1..6).rev() {
                perm.swap(i, (rng.uniform() * (i + 1) as f64) as usize);
            }
            let xp: Vec<f64> = perm.iter().map(|&i| x[i]).collect();
            let mut gp = vec![0.0; 6];
            mf.gradient(&xp, &mut gp);
            assert!((mf.value(&xp) - mf.value(&x)).abs() < 1e-12);
            for (k, &i) in perm.iter().enumerate() {
                assert_eq!(gp[k], g[i]);
            }
        }
    }

    #[test]
    fn particle_chain_is_exchangeable() {
        let w: SharedPotential = Arc::new(DoubleWell1D::new(0.1, 5.0).unwrap());
        let mf = MeanFieldPotential::new(4, quad(1.0), w).unwrap();
        let params = ChainParams::new(0.03, 0.5).unwrap();
        let init = ParticleInit { x_mean: vec![0.5], x_sd: 1.0, v_sd: 1.0 };
        let perm = [2usize, 0, 3, 1];
        let mut base: Vec<RngStream> = (0..4).map(|i| particle_stream(3, 0, i)).collect();
        let mut permuted: Vec<RngStream> = perm.iter().map(|&i| particle_stream(3, 0, i as u64)).collect();
        let a = run_particles(&mf, &params, &init, &mut base, 30, &[30]).unwrap();
        let b = run_particles(&mf, &params, &init, &mut permuted, 30, &[30]).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(b[0].x[k], a[0].x[i]);
            assert_eq!(b[0].v[k], a[0].v[i]);
        }
    }

    #[test]
    fn no_interaction_factorizes_exactly() {
        let mf = MeanFieldPotential::new(5, quad(1.0), Arc::new(ZeroPotential { dim: 1 })).unwrap();
        let single = Quadratic::diagonal(&[1.0]).unwrap();
        for placement in [RefreshPlacement::RefreshThenFlow, RefreshPlacement::RefreshFlowRefresh] {
            let params = ChainParams::new(0.2, 0.3).unwrap().with_placement(placement);
            let init = ParticleInit { x_mean: vec![1.0], x_sd: 0.5, v_sd: 1.0 };
            let mut streams: Vec<RngStream> = (0..5).map(|i| particle_stream(9, 2, i)).collect();
            let joint = run_particles(&mf, &params, &init, &mut streams, 25, &[25]).unwrap();
            for i in 0..5 {
                let mut s = particle_stream(9, 2, i);
                let mut z = init.sample(&mut s);
                for _ in 0..25 {
                    z = transition(&single, &params, &z, &mut s).unwrap();
                }
                assert_eq!(z.x[0], joint[0].x[i as usize]);
                assert_eq!(z.v[0], joint[0].v[i as usize]);
            }
        }
    }

    #[test]
    fn empirical_w2_methods() {
        let a = vec![vec![0.0], vec![1.0], vec![2.0]];
        let b = vec![vec![2.5], vec![0.5], vec![1.5]];
        let (w, m) = empirical_w2_sq(&a, &b, 0).unwrap();
        assert_eq!(m, W2Method::SortedExact);
        assert!((w - 0.25).abs() < 1e-15);
        let a2: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, 0.0]).collect();
        let b2: Vec<Vec<f64>> = (0..20).rev().map(|i| vec![i as f64, 1.0]).collect();
        let (w, m) = empirical_w2_sq(&a2, &b2, 0).unwrap();
        assert_eq!(m, W2Method::Assignment);
        assert!((w - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = RngStream::new(4);
        for _ in 0..30 {
            let n = 5;
            let c = DMatrix::from_fn(n, n, |_, _| rng.uniform());
            let got: f64 = hungarian(&c).iter().enumerate().map(|(i, &j)| c[(i, j)]).sum();
            let mut best = f64::INFINITY;
            let mut perm: Vec<usize> = (0..n).collect();
            permute(&mut perm, 0, &mut |p| best = best.min(p.iter().enumerate().map(|(i, &j)| c[(i, j)]).sum()));
            assert!((got - best).abs() < 1e-12);
        }
    }

    fn permute(v: &mut Vec<usize>, k: usize, f: &mut dyn FnMut(&[usize])) {
        if k == v.len() {
            f(v);
            return;
        }
        for i in k..v.len() {
            v.swap(k, i);
            permute(v, k + 1, f);
            v.swap(k, i);
        }
    }

    fn chaos_cfg(counts: Vec<usize>, replicas: usize) -> ChaosConfig {
        ChaosConfig {
            particle_counts: counts,
            reference_particles: 256,
            n_steps: 40,
            record_at: vec![40],
            k: 1,
            replicas,
            reference_replicas: replicas * 16 / 256 + 1,
            bootstrap: 200,
            init: ParticleInit { x_mean: vec![0.0], x_sd: 1.0, v_sd: 1.0 },
        }
    }

    #[test]
    fn no_interaction_is_indistinguishable_from_zero() {
        let cfg = chaos_cfg(vec![16], 100);
        let params = ChainParams::new(0.1, 0.5).unwrap();
        let r = chaos_experiment(quad(1.0), Arc::new(ZeroPotential { dim: 1 }), &params, &cfg, 1).unwrap();
        let row = &r.rows[0];
        assert!(row.w2_estimate <= row.null_hi, "{row:?}");
    }

    #[test]
    fn chaos_estimate_decreases_with_particles() {
        let cfg = chaos_cfg(vec![16, 64], 200);
        let params = ChainParams::new(0.05, 0.7).unwrap();
        let r = chaos_experiment(quad(1.0), quad(8.0), &params, &cfg, 2).unwrap();
        for row in &r.rows {
            println!("N={} w2={:.3e} [{:.3e}, {:.3e}] null_hi={:.3e}", row.particles, row.w2_estimate, row.bootstrap_lo, row.bootstrap_hi, row.null_hi);
        }
        println!("slope {} [{}, {}]", r.slope, r.slope_lo, r.slope_hi);
        assert_eq!(r.decrease_significant(16, 64), Some(true));
        assert!((-1.6..=-0.4).contains(&r.slope), "slope {}", r.slope);
    }

    #[test]
    fn insufficient_replicas_rejected() {
        let cfg = chaos_cfg(vec![16], 3);
        assert!(chaos_experiment(quad(1.0), quad(1.0), &ChainParams::new(0.1, 0.5).unwrap(), &cfg, 1).is_err());
    }
}
