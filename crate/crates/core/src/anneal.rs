//! Simulated annealing on top of the chain with a logarithmic cooling
//! schedule, and a grid estimator of the critical depth of a potential.

use std::collections::VecDeque;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{transition, ChainParams, RefreshPlacement, RngStream};
use crate::error::{check_dim, KmcError, Result};
use crate::flow::{IntegratorConfig, PhaseState};
use crate::model::{Potential, Scaled, SharedPotential, WorkingBox};
use crate::stats;

/// `β_n = β₀ + ln(1+n)/ĉ`, `t_n = q/√(β_n L₀)`, `η_n = 1 − γ t_n`.
/// `c_hat = ∞` freezes the temperature at `β₀`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnealSchedule {
    pub beta0: f64,
    pub c_hat: f64,
    pub gamma: f64,
    pub q: f64,
    pub l0: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ScheduleStep {
    pub beta: f64,
    pub t: f64,
    pub eta: f64,
}

impl AnnealSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(KmcError::InvalidParameter(what.into()));
        if !(self.beta0 > 0.0 && self.beta0.is_finite()) {
            return bad("beta0 must be positive");
        }
        if !(self.c_hat > 0.0) {
            return bad("c_hat must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be positive");
        }
        if !(self.q > 0.0 && self.q < 0.25) {
            return bad("q must lie in (0, 1/4)");
        }
        if !(self.l0 > 0.0 && self.l0.is_finite()) {
            return bad("l0 must be positive");
        }
        // η_n increases with n, so the first step is the binding one.
        let first = self.raw(0);
        if first.eta < 0.0 {
            return Err(KmcError::InvalidParameter(format!("gamma too large: eta_0 = {} < 0", first.eta)));
        }
        Ok(())
    }

    fn raw(&self, n: usize) -> ScheduleStep {
        let beta = self.beta0 + (n as f64).ln_1p() / self.c_hat;
        let t = self.q / (beta * self.l0).sqrt();
        ScheduleStep { beta, t, eta: 1.0 - self.gamma * t }
    }

    pub fn step(&self, n: usize) -> Result<ScheduleStep> {
        self.validate()?;
        Ok(self.raw(n))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnealConfig {
    pub schedule: AnnealSchedule,
    pub n_steps: usize,
    pub replicas: usize,
    /// Excess-energy levels `u` for the rates `P(U(X_n) ≥ u)`.
    pub thresholds: Vec<f64>,
    /// Steps at which statistics are recorded (`0..=n_steps`).
    pub record_at: Vec<usize>,
    pub placement: RefreshPlacement,
    pub integrator: IntegratorConfig,
}

impl AnnealConfig {
    /// Roughly log-spaced record steps up to `n_steps`, always including 0 and `n_steps`.
    pub fn log_spaced(n_steps: usize, per_decade: usize) -> Vec<usize> {
        let mut out = vec![0];
        if n_steps == 0 {
            return out;
        }
        let decades = (n_steps as f64).log10();
        let count = ((decades * per_decade as f64).ceil() as usize).max(1);
        for i in 0..=count {
            let n = 10f64.powf(decades * i as f64 / count as f64).round() as usize;
            out.push(n.clamp(1, n_steps));
        }
        out.sort_unstable();
        out.dedup();
        out
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AnnealRow {
    pub n: usize,
    pub beta: f64,
    pub t: f64,
    pub eta: f64,
    pub u_mean: f64,
    pub u_q10: f64,
    pub u_q50: f64,
    pub u_q90: f64,
    /// One rate per configured threshold.
    pub exceedance: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AnnealReport {
    pub rows: Vec<AnnealRow>,
    /// Log-log slope of the mean excess energy against `n` over recorded `n ≥ 1`.
    pub mean_energy_slope: f64,
    pub box_exits: usize,
}

/// Energies `U(X_n)` of one replica at the record steps. Step `n` uses the
/// potential `β_n U` with time `t_n` and damping `η_n`.
pub fn run_annealing(p: &SharedPotential, cfg: &AnnealConfig, z0: &PhaseState, rng: &mut RngStream) -> Result<(Vec<f64>, usize)> {
    check_dim(p.dim(), z0.dim())?;
    cfg.schedule.validate()?;
    let mut record = cfg.record_at.clone();
    record.sort_unstable();
    if record.last().is_some_and(|&n| n > cfg.n_steps) {
        return Err(KmcError::InvalidParameter("record step beyond n_steps".into()));
    }
    let region = p.smoothness().working_box;
    let mut out = Vec::with_capacity(record.len());
    let mut next = 0;
    let mut z = z0.clone();
    let mut exits = 0;
    for n in 0..=cfg.n_steps {
        while next < record.len() && record[next] == n {
            out.push(p.value(&z.x));
            next += 1;
        }
        if n == cfg.n_steps {
            break;
        }
        let s = cfg.schedule.raw(n);
        let scaled = Scaled { base: Arc::clone(p), factor: s.beta };
        let params = ChainParams::new(s.t, s.eta)?.with_placement(cfg.placement).with_integrator(cfg.integrator.clone());
        z = transition(&scaled, &params, &z, rng)?;
        if region.as_ref().is_some_and(|b| !b.contains(&z.x)) {
            exits += 1;
        }
    }
    Ok((out, exits))
}

/// Replicas on independent substreams of `seed`, summarized per record step.
pub fn anneal_ensemble(p: &SharedPotential, cfg: &AnnealConfig, z0: &PhaseState, seed: u64) -> Result<AnnealReport> {
    if cfg.replicas == 0 {
        return Err(KmcError::InvalidParameter("need at least one replica".into()));
    }
    let mut record = cfg.record_at.clone();
    record.sort_unstable();
    record.dedup();
    let cfg = AnnealConfig { record_at: record.clone(), ..cfg.clone() };
    let runs: Vec<(Vec<f64>, usize)> = (0..cfg.replicas)
        .into_par_iter()
        .map(|r| run_annealing(p, &cfg, z0, &mut RngStream::substream(seed, r as u64)))
        .collect::<Result<_>>()?;
    let box_exits: usize = runs.iter().map(|r| r.1).sum();
    if box_exits > 0 {
        log::warn!("annealing replicas left the working box {box_exits} times");
    }
    let rows: Vec<AnnealRow> = record
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let mut us: Vec<f64> = runs.iter().map(|r| r.0[i]).collect();
            us.sort_by(|a, b| a.total_cmp(b));
            let s = cfg.schedule.raw(n);
            let m = us.len() as f64;
            AnnealRow {
                n,
                beta: s.beta,
                t: s.t,
                eta: s.eta,
                u_mean: stats::mean(&us),
                u_q10: stats::quantile_sorted(&us, 0.1),
                u_q50: stats::quantile_sorted(&us, 0.5),
                u_q90: stats::quantile_sorted(&us, 0.9),
                exceedance: cfg.thresholds.iter().map(|&u| us.iter().filter(|&&x| x >= u).count() as f64 / m).collect(),
            }
        })
        .collect();
    let fit: Vec<(f64, f64)> = rows.iter().filter(|r| r.n >= 1 && r.u_mean > 0.0).map(|r| ((r.n as f64).ln(), r.u_mean.ln())).collect();
    let mean_energy_slope = if fit.len() >= 2 {
        let (x, y): (Vec<f64>, Vec<f64>) = fit.into_iter().unzip();
        stats::ols_slope(&x, &y)
    } else {
        f64::NAN
    };
    Ok(AnnealReport { rows, mean_energy_slope, box_exits })
}

/// Regular grid over a box with `points[i]` nodes along axis `i`.
#[derive(Clone, Debug, Serialize)]
pub struct GridSpec {
    pub working_box: WorkingBox,
    pub resolution: f64,
    pub points: Vec<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CriticalDepthResult {
    pub c_star: f64,
    pub witness_path: Vec<Vec<f64>>,
    pub grid: GridSpec,
    /// `|c_star(h) − c_star(h/2)|`.
    pub refinement_error: f64,
    pub local_minima: usize,
}

struct Grid {
    spec: GridSpec,
    values: Vec<f64>,
}

impl Grid {
    fn new(p: &dyn Potential, bx: &WorkingBox, resolution: f64) -> Result<Self> {
        let d = p.dim();
        check_dim(d, bx.lo.len())?;
        if !(1..=2).contains(&d) {
            return Err(KmcError::InvalidParameter("critical depth supports dimension 1 or 2".into()));
        }
        if !(resolution > 0.0) || bx.lo.iter().zip(&bx.hi).any(|(l, h)| !(h > l)) {
            return Err(KmcError::InvalidParameter("grid needs a positive resolution and a non-empty box".into()));
        }
        let points: Vec<usize> = bx.lo.iter().zip(&bx.hi).map(|(l, h)| ((h - l) / resolution).round() as usize + 1).collect();
        let total: usize = points.iter().product();
        if total > 50_000_000 {
            return Err(KmcError::InvalidParameter(format!("grid too large ({total} nodes)")));
        }
        let spec = GridSpec { working_box: bx.clone(), resolution, points };
        let mut g = Grid { spec, values: Vec::with_capacity(total) };
        for idx in 0..total {
            let x = g.coords(idx);
            g.values.push(p.value(&x));
        }
        Ok(g)
    }

    fn coords(&self, idx: usize) -> Vec<f64> {
        let mut rem = idx;
        self.spec
            .points
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                let k = rem % n;
                rem /= n;
                let (lo, hi) = (self.spec.working_box.lo[i], self.spec.working_box.hi[i]);
                lo + (hi - lo) * k as f64 / (n - 1).max(1) as f64
            })
            .collect()
    }

    fn neighbors(&self, idx: usize, out: &mut Vec<usize>) {
        out.clear();
        let mut stride = 1;
        let mut rem = idx;
        for &n in &self.spec.points {
            let k = rem % n;
            rem /= n;
            if k > 0 {
                out.push(idx - stride);
            }
            if k + 1 < n {
                out.push(idx + stride);
            }
            stride *= n;
        }
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

struct Merge {
    level: f64,
    depth: f64,
    from: usize,
    to: usize,
}

/// Depth analysis on one grid: the deepest basin that has to be left to reach
/// another basin of equal or lower bottom.
fn depth_on_grid(grid: &Grid) -> (f64, Option<Merge>, usize) {
    let n = grid.values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| grid.values[a].total_cmp(&grid.values[b]).then(a.cmp(&b)));
    let mut parent: Vec<usize> = (0..n).collect();
    let bottom: Vec<usize> = (0..n).collect();
    let mut active = vec![false; n];
    let mut minima = 0;
    let mut best: Option<Merge> = None;
    let mut nb = Vec::with_capacity(4);
    for &i in &order {
        active[i] = true;
        grid.neighbors(i, &mut nb);
        let mut joined = false;
        for &j in &nb {
            if !active[j] {
                continue;
            }
            let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
            if !joined {
                // First contact: `i` simply extends the basin of `j`.
                parent[ri] = rj;
                joined = true;
                continue;
            }
            if ri == rj {
                continue;
            }
            // Two basins meet at level U(i). The one with the higher bottom
            // (ties: the later one in sort order) dies with depth level − bottom.
            let (bi, bj) = (bottom[ri], bottom[rj]);
            let (dead, alive) = if (grid.values[bi], bi) > (grid.values[bj], bj) { (ri, rj) } else { (rj, ri) };
            let level = grid.values[i];
            let depth = level - grid.values[bottom[dead]];
            if best.as_ref().is_none_or(|b| depth > b.depth) {
                best = Some(Merge { level, depth, from: bottom[dead], to: bottom[alive] });
            }
            parent[dead] = alive;
        }
        if !joined {
            minima += 1;
        }
    }
    let c = best.as_ref().map_or(0.0, |m| m.depth.max(0.0));
    (c, best, minima)
}

/// Path from `from` to `to` through nodes with value at most `level` (BFS).
fn witness(grid: &Grid, m: &Merge) -> Vec<Vec<f64>> {
    let n = grid.values.len();
    let mut prev = vec![usize::MAX; n];
    let mut queue = VecDeque::from([m.from]);
    prev[m.from] = m.from;
    let mut nb = Vec::with_capacity(4);
    while let Some(i) = queue.pop_front() {
        if i == m.to {
            break;
        }
        grid.neighbors(i, &mut nb);
        for &j in &nb {
            if prev[j] == usize::MAX && grid.values[j] <= m.level {
                prev[j] = i;
                queue.push_back(j);
            }
        }
    }
    let mut path = vec![m.to];
    let mut cur = m.to;
    while cur != m.from {
        cur = prev[cur];
        path.push(cur);
    }
    path.reverse();
    path.into_iter().map(|i| grid.coords(i)).collect()
}

/// Grid estimate of the critical depth: the largest energy barrier separating
/// a discrete local minimum from another basin whose bottom is at most as
/// deep. Ties between global minima count, so a symmetric double well has the
/// depth of its central barrier.
pub fn critical_depth(p: &dyn Potential, bx: &WorkingBox, resolution: f64) -> Result<CriticalDepthResult> {
    let grid = Grid::new(p, bx, resolution)?;
    let (c, merge, minima) = depth_on_grid(&grid);
    let fine = Grid::new(p, bx, resolution / 2.0)?;
    let (c_fine, _, _) = depth_on_grid(&fine);
    let witness_path = merge.as_ref().filter(|m| m.depth > 0.0).map_or_else(Vec::new, |m| witness(&grid, m));
    Ok(CriticalDepthResult { c_star: c, witness_path, grid: grid.spec, refinement_error: (c - c_fine).abs(), local_minima: minima })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{run_trajectory, Observable};
    use crate::model::{DoubleWell1D, MexicanHat2D, Quadratic};

    fn sched() -> AnnealSchedule {
        AnnealSchedule { beta0: 1.0, c_hat: 2.0, gamma: 1.0, q: 0.2, l0: 44.0 }
    }

    #[test]
    fn schedule_values() {
        let s = sched();
        assert_eq!(s.step(0).unwrap().beta, 1.0);
        assert!((s.step(6).unwrap().beta - (1.0 + 7f64.ln() / 2.0)).abs() < 1e-15);
        assert!((s.step(6).unwrap().beta - 1.97296).abs() < 1e-5);
        for n in [0, 1, 10, 1000, 1_000_000] {
            let st = s.step(n).unwrap();
            assert!((st.t * (st.beta * s.l0).sqrt() - s.q).abs() < 1e-15);
        }
    }

    #[test]
    fn schedule_is_monotone() {
        let s = sched();
        let mut last = s.step(0).unwrap();
        for n in 1..2000 {
            let cur = s.step(n).unwrap();
            assert!(cur.beta > last.beta && cur.t < last.t && cur.eta > last.eta);
            last = cur;
        }
    }

    #[test]
    fn negative_damping_is_rejected() {
        let s = AnnealSchedule { gamma: 100.0, ..sched() };
        assert!(s.validate().is_err());
        let cfg = AnnealConfig { schedule: s, n_steps: 5, replicas: 1, thresholds: vec![], record_at: vec![0, 5], placement: RefreshPlacement::default(), integrator: IntegratorConfig::default() };
        let p: SharedPotential = Arc::new(Quadratic::diagonal(&[1.0]).unwrap());
        let mut rng = RngStream::new(1);
        assert!(run_annealing(&p, &cfg, &PhaseState::zeros(1), &mut rng).is_err());
        assert_eq!(rng.gaussian_draws(), 0);
    }

    #[test]
    fn frozen_schedule_matches_homogeneous_chain() {
        let base: SharedPotential = Arc::new(DoubleWell1D::new(1.0, 2.0).unwrap());
        let s = AnnealSchedule { c_hat: f64::INFINITY, ..sched() };
        let n = 200;
        let cfg = AnnealConfig { schedule: s.clone(), n_steps: n, replicas: 1, thresholds: vec![], record_at: (0..=n).collect(), placement: RefreshPlacement::default(), integrator: IntegratorConfig::default() };
        let z0 = PhaseState::new(vec![0.9], vec![0.1]).unwrap();
        let (energies, _) = run_annealing(&base, &cfg, &z0, &mut RngStream::new(77)).unwrap();
        let st = s.step(0).unwrap();
        let scaled = Scaled { base: Arc::clone(&base), factor: s.beta0 };
        let traj = run_trajectory(&scaled, &ChainParams::new(st.t, st.eta).unwrap(), &z0, n, &mut RngStream::new(77), &[Observable::Position]).unwrap();
        for (k, row) in traj.rows.iter().enumerate() {
            assert_eq!(energies[k], base.value(&row[..1]));
        }
    }

    #[test]
    fn quadratic_energy_decays() {
        let p: SharedPotential = Arc::new(Quadratic::diagonal(&[1.0]).unwrap());
        let cfg = AnnealConfig {
            schedule: AnnealSchedule { beta0: 1.0, c_hat: 1.0, gamma: 1.0, q: 0.2, l0: 1.0 },
            n_steps: 10_000,
            replicas: 200,
            thresholds: vec![0.1],
            record_at: vec![100, 10_000],
            placement: RefreshPlacement::default(),
            integrator: IntegratorConfig::default(),
        };
        let r = anneal_ensemble(&p, &cfg, &PhaseState::new(vec![3.0], vec![0.0]).unwrap(), 5).unwrap();
        assert!(r.rows[1].u_mean < r.rows[0].u_mean, "{:?}", r.rows);
    }

    #[test]
    fn critical_depth_examples() {
        let q = Quadratic::diagonal(&[1.0]).unwrap();
        let r = critical_depth(&q, &WorkingBox::cube(1, 2.0), 1e-3).unwrap();
        assert_eq!(r.c_star, 0.0);
        assert!(r.witness_path.is_empty());

        let dw = DoubleWell1D::new(1.0, 2.0).unwrap();
        let r = critical_depth(&dw, &WorkingBox::cube(1, 2.0), 1e-3).unwrap();
        assert!((r.c_star - 1.0).abs() < 1e-2, "{}", r.c_star);
        let start = dw.value(&r.witness_path[0]);
        let top = r.witness_path.iter().map(|x| dw.value(x)).fold(f64::MIN, f64::max);
        assert!((top - start - r.c_star).abs() < 1e-12);
        assert!(dw.value(r.witness_path.last().unwrap()) < 1e-5);

        let hat = MexicanHat2D::new(1.0, 1.0, 2.0).unwrap();
        let r = critical_depth(&hat, &WorkingBox::cube(2, 2.0), 0.01).unwrap();
        assert!(r.c_star < 1e-2, "{}", r.c_star);
    }

    #[test]
    fn tilted_well_depth() {
        let dw = DoubleWell1D::tilted(1.0, 0.3, 2.0).unwrap();
        let r = critical_depth(&dw, &WorkingBox::cube(1, 2.0), 1e-3).unwrap();
        // Shallow well on the right: barrier near 0 minus the right minimum.
        let right_min = (0..2000).map(|i| dw.value(&[0.5 + i as f64 * 1e-3])).fold(f64::MAX, f64::min);
        let barrier = (0..1000).map(|i| dw.value(&[-0.5 + i as f64 * 1e-3])).fold(f64::MIN, f64::max);
        assert!((r.c_star - (barrier - right_min)).abs() < 1e-5);
        assert!(r.witness_path[0][0] > 0.5 && r.witness_path.last().unwrap()[0] < -0.5);
    }

    #[test]
    fn critical_depth_shift_and_scale() {
        struct Affine(DoubleWell1D, f64, f64);
        impl Potential for Affine {
            fn dim(&self) -> usize {
                1
            }
            fn value(&self, x: &[f64]) -> f64 {
                self.1 * self.0.value(x) + self.2
            }
            fn gradient(&self, x: &[f64], g: &mut [f64]) {
                self.0.gradient(x, g);
                g[0] *= self.1;
            }
            fn smoothness(&self) -> crate::model::Smoothness {
                self.0.smoothness()
            }
            fn name(&self) -> String {
                "affine".into()
            }
        }
        let bx = WorkingBox::cube(1, 2.0);
        let c = |a: f64, b: f64| critical_depth(&Affine(DoubleWell1D::new(1.0, 2.0).unwrap(), a, b), &bx, 1e-3).unwrap().c_star;
        let base = c(1.0, 0.0);
        assert!((c(1.0, 5.0) - base).abs() < 1e-9);
        assert!((c(3.0, 0.0) - 3.0 * base).abs() < 1e-9);
    }

    #[test]
    fn shallow_well_escape_rate_decreases() {
        let dw = DoubleWell1D::tilted(1.0, 0.3, 2.0).unwrap();
        let c_star = critical_depth(&dw, &WorkingBox::cube(1, 2.0), 1e-3).unwrap().c_star;
        let p: SharedPotential = Arc::new(dw);
        let cfg = AnnealConfig {
            schedule: AnnealSchedule { beta0: 1.0, c_hat: 2.0 * c_star, gamma: 1.0, q: 0.2, l0: 44.0 },
            n_steps: 10_000,
            replicas: 200,
            thresholds: vec![0.5],
            record_at: vec![10, 100, 1000, 10_000],
            placement: RefreshPlacement::default(),
            integrator: IntegratorConfig::default(),
        };
        let r = anneal_ensemble(&p, &cfg, &PhaseState::new(vec![1.0], vec![0.0]).unwrap(), 9).unwrap();
        let rates: Vec<f64> = r.rows.iter().map(|row| row.exceedance[0]).collect();
        println!("exceedance rates {rates:?}");
        assert!(rates.windows(2).all(|w| w[1] <= w[0]) && rates[3] < rates[0], "{rates:?}");
    }
}
