//! Markov transitions: velocity refreshment `D_η`, Hamiltonian flow `H_t`,
//! their compositions, randomized integration times, trajectories and
//! synchronous (parallel) couplings.

use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, KmcError, Result};
use crate::flow::{flow, IntegratorConfig, PhaseState};
use crate::linalg;
use crate::model::Potential;

/// Seeded ChaCha stream with draw accounting. Substreams share a seed and
/// differ in the ChaCha stream id, so replicas are independent and reproducible.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha20Rng,
    gaussian_draws: u64,
    uniform_draws: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::substream(seed, 0)
    }

    pub fn substream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng, gaussian_draws: 0, uniform_draws: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    pub fn normal(&mut self) -> f64 {
        self.gaussian_draws += 1;
        self.rng.sample(StandardNormal)
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        out.iter_mut().for_each(|g| *g = self.normal());
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        self.fill_normal(&mut v);
        v
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.uniform_draws += 1;
        self.rng.random::<f64>()
    }

    pub fn gaussian_draws(&self) -> u64 {
        self.gaussian_draws
    }

    pub fn uniform_draws(&self) -> u64 {
        self.uniform_draws
    }

    /// Raw ChaCha word position.
    pub fn word_position(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn raw_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefreshPlacement {
    /// `P = D H`: refresh, then flow.
    #[default]
    RefreshThenFlow,
    FlowThenRefresh,
    /// `Q = D H D`.
    RefreshFlowRefresh,
}

impl RefreshPlacement {
    pub fn draws_per_step(self, d: usize) -> usize {
        match self {
            RefreshPlacement::RefreshFlowRefresh => 2 * d,
            _ => d,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainParams {
    pub t: f64,
    pub eta: f64,
    #[serde(default)]
    pub placement: RefreshPlacement,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    /// Skip the `t√L ≤ 1/4` guard (for counter-example studies).
    #[serde(default)]
    pub allow_large_step: bool,
}

impl ChainParams {
    pub fn new(t: f64, eta: f64) -> Result<Self> {
        let p = Self { t, eta, placement: RefreshPlacement::default(), integrator: IntegratorConfig::default(), allow_large_step: false };
        p.validate()?;
        Ok(p)
    }

    /// Parameters from a damping strength: `η = 1 − γt`.
    pub fn from_gamma(t: f64, gamma: f64) -> Result<Self> {
        Self::new(t, 1.0 - gamma * t)
    }

    pub fn with_placement(mut self, placement: RefreshPlacement) -> Self {
        self.placement = placement;
        self
    }

    pub fn with_integrator(mut self, integrator: IntegratorConfig) -> Self {
        self.integrator = integrator;
        self
    }

    pub fn allowing_large_step(mut self) -> Self {
        self.allow_large_step = true;
        self
    }

    pub fn gamma(&self) -> f64 {
        (1.0 - self.eta) / self.t
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t > 0.0) || !self.t.is_finite() {
            return Err(KmcError::InvalidParameter(format!("t must be > 0, got {}", self.t)));
        }
        if !(0.0..1.0).contains(&self.eta) {
            return Err(KmcError::InvalidParameter(format!("eta must lie in [0, 1), got {}", self.eta)));
        }
        self.integrator.validate()
    }

    /// Enforce `t√L ≤ 1/4` unless overridden.
    pub fn check_step(&self, l: f64) -> Result<()> {
        let value = self.t * l.max(0.0).sqrt();
        if !self.allow_large_step && value > 0.25 * (1.0 + 1e-12) {
            return Err(KmcError::StepTooLarge { value });
        }
        Ok(())
    }

    fn for_time(&self, t: f64) -> Self {
        let mut p = self.clone();
        p.t = t;
        if let IntegratorConfig::Verlet { count, .. } = p.integrator {
            p.integrator = IntegratorConfig::verlet_for(t, count);
        }
        p
    }
}

/// `√(1−η²)` evaluated without cancellation near `η = 1`.
pub fn noise_scale(eta: f64) -> f64 {
    ((1.0 - eta) * (1.0 + eta)).sqrt()
}

/// `v ← ηv + √(1−η²)g`, position unchanged.
pub fn refresh(z: &PhaseState, eta: f64, g: &[f64]) -> Result<PhaseState> {
    check_dim(z.dim(), g.len())?;
    if !(0.0..1.0).contains(&eta) {
        return Err(KmcError::InvalidParameter(format!("eta must lie in [0, 1), got {eta}")));
    }
    let s = noise_scale(eta);
    Ok(PhaseState { x: z.x.clone(), v: z.v.iter().zip(g).map(|(v, g)| eta * v + s * g).collect() })
}

fn refresh_in_place(v: &mut [f64], eta: f64, g: &[f64]) {
    let s = noise_scale(eta);
    v.iter_mut().zip(g).for_each(|(v, g)| *v = eta * *v + s * g);
}

fn flow_state(p: &dyn Potential, params: &ChainParams, z: &PhaseState) -> Result<PhaseState> {
    Ok(flow(p, z, params.t, &params.integrator, false)?.state)
}

/// One transition with explicit Gaussian draws: `g1` feeds the first refresh,
/// `g2` the second (only used by `refresh_flow_refresh`).
pub fn transition_with_draws(p: &dyn Potential, params: &ChainParams, z: &PhaseState, g1: &[f64], g2: &[f64]) -> Result<PhaseState> {
    check_dim(p.dim(), z.dim())?;
    params.check_step(p.smoothness().l)?;
    let eta = params.eta;
    match params.placement {
        RefreshPlacement::RefreshThenFlow => flow_state(p, params, &refresh(z, eta, g1)?),
        RefreshPlacement::FlowThenRefresh => refresh(&flow_state(p, params, z)?, eta, g1),
        RefreshPlacement::RefreshFlowRefresh => refresh(&flow_state(p, params, &refresh(z, eta, g1)?)?, eta, g2),
    }
}

/// One transition, drawing exactly `d` (or `2d` for `D H D`) normals.
pub fn transition(p: &dyn Potential, params: &ChainParams, z: &PhaseState, rng: &mut RngStream) -> Result<PhaseState> {
    check_dim(p.dim(), z.dim())?;
    params.check_step(p.smoothness().l)?;
    let d = z.dim();
    let eta = params.eta;
    let mut g = vec![0.0; d];
    let mut state = z.clone();
    match params.placement {
        RefreshPlacement::RefreshThenFlow => {
            rng.fill_normal(&mut g);
            refresh_in_place(&mut state.v, eta, &g);
            state = flow_state(p, params, &state)?;
        }
        RefreshPlacement::FlowThenRefresh => {
            state = flow_state(p, params, &state)?;
            rng.fill_normal(&mut g);
            refresh_in_place(&mut state.v, eta, &g);
        }
        RefreshPlacement::RefreshFlowRefresh => {
            rng.fill_normal(&mut g);
            refresh_in_place(&mut state.v, eta, &g);
            state = flow_state(p, params, &state)?;
            rng.fill_normal(&mut g);
            refresh_in_place(&mut state.v, eta, &g);
        }
    }
    Ok(state)
}

/// Law of the integration time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepLaw {
    Fixed { t: f64 },
    Uniform { t0: f64, t1: f64 },
    Discrete { times: Vec<f64>, weights: Vec<f64> },
}

impl StepLaw {
    /// Check the law is well formed and supported in `(0, 1/(4√L)]`.
    pub fn validate(&self, l: f64) -> Result<()> {
        let cap = if l > 0.0 { 0.25 / l.sqrt() } else { f64::INFINITY };
        let in_support = |t: f64| t > 0.0 && t <= cap * (1.0 + 1e-12);
        let ok = match self {
            StepLaw::Fixed { t } => in_support(*t),
            StepLaw::Uniform { t0, t1 } => t0 <= t1 && in_support(*t0) && in_support(*t1),
            StepLaw::Discrete { times, weights } => {
                if times.is_empty() || times.len() != weights.len() || weights.iter().any(|w| !(*w >= 0.0)) {
                    return Err(KmcError::InvalidParameter("discrete step law needs matching non-negative weights".into()));
                }
                if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                    return Err(KmcError::InvalidParameter("discrete step law weights must sum to 1".into()));
                }
                times.iter().all(|t| in_support(*t))
            }
        };
        if !ok {
            return Err(KmcError::InvalidParameter(format!("step law support must lie in (0, {cap}]")));
        }
        Ok(())
    }

    /// Draw a time. `Fixed` consumes no randomness; the others one uniform.
    pub fn sample(&self, rng: &mut RngStream) -> f64 {
        match self {
            StepLaw::Fixed { t } => *t,
            StepLaw::Uniform { t0, t1 } => t0 + (t1 - t0) * rng.uniform(),
            StepLaw::Discrete { times, weights } => {
                let u = rng.uniform();
                let mut acc = 0.0;
                for (t, w) in times.iter().zip(weights) {
                    acc += w;
                    if u < acc {
                        return *t;
                    }
                }
                *times.last().expect("validated non-empty")
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            StepLaw::Fixed { t } => *t,
            StepLaw::Uniform { t0, t1 } => 0.5 * (t0 + t1),
            StepLaw::Discrete { times, weights } => times.iter().zip(weights).map(|(t, w)| t * w).sum(),
        }
    }
}

/// Draw `t ~ law`, then perform [`transition`] with that duration.
pub fn transition_random_time(p: &dyn Potential, params: &ChainParams, law: &StepLaw, z: &PhaseState, rng: &mut RngStream) -> Result<PhaseState> {
    law.validate(p.smoothness().l)?;
    let t = law.sample(rng);
    transition(p, &params.for_time(t), z, rng)
}

pub type ObservableFn = Arc<dyn Fn(&PhaseState, &dyn Potential) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum Observable {
    Position,
    Velocity,
    Potential,
    SquaredNorm,
    Custom(String, ObservableFn),
}

impl Observable {
    /// The columns recorded by the CLI: `x…, v…, U, |x|²`.
    pub fn standard() -> Vec<Observable> {
        vec![Observable::Position, Observable::Velocity, Observable::Potential, Observable::SquaredNorm]
    }

    fn names(&self, d: usize) -> Vec<String> {
        match self {
            Observable::Position => (0..d).map(|i| format!("x{i}")).collect(),
            Observable::Velocity => (0..d).map(|i| format!("v{i}")).collect(),
            Observable::Potential => vec!["U".into()],
            Observable::SquaredNorm => vec!["x_norm_sq".into()],
            Observable::Custom(name, _) => vec![name.clone()],
        }
    }

    fn eval(&self, z: &PhaseState, p: &dyn Potential, out: &mut Vec<f64>) {
        match self {
            Observable::Position => out.extend_from_slice(&z.x),
            Observable::Velocity => out.extend_from_slice(&z.v),
            Observable::Potential => out.push(p.value(&z.x)),
            Observable::SquaredNorm => out.push(linalg::norm_sq(&z.x)),
            Observable::Custom(_, f) => out.push(f(z, p)),
        }
    }
}

/// Observable series; row `k` holds the values after `k` transitions.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub final_state: PhaseState,
    /// Number of recorded states outside the potential's working box.
    pub box_exits: usize,
}

impl Trajectory {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }
}

pub fn run_trajectory(
    p: &dyn Potential,
    params: &ChainParams,
    z0: &PhaseState,
    n_steps: usize,
    rng: &mut RngStream,
    observables: &[Observable],
) -> Result<Trajectory> {
    check_dim(p.dim(), z0.dim())?;
    params.validate()?;
    let d = z0.dim();
    let columns = observables.iter().flat_map(|o| o.names(d)).collect();
    let region = p.smoothness().working_box;
    let record = |z: &PhaseState| {
        let mut row = Vec::new();
        observables.iter().for_each(|o| o.eval(z, p, &mut row));
        row
    };
    let mut rows = Vec::with_capacity(n_steps + 1);
    rows.push(record(z0));
    let mut z = z0.clone();
    let mut box_exits = 0;
    for _ in 0..n_steps {
        z = transition(p, params, &z, rng)?;
        if region.as_ref().is_some_and(|b| !b.contains(&z.x)) {
            if box_exits == 0 {
                log::warn!("trajectory left the working box of {}; curvature constants no longer certified", p.name());
            }
            box_exits += 1;
        }
        rows.push(record(&z));
    }
    Ok(Trajectory { columns, rows, final_state: z, box_exits })
}

/// Per-step distances of two chains driven by the same randomness.
#[derive(Clone, Debug)]
pub struct CouplingPath {
    pub position_distance: Vec<f64>,
    pub phase_distance: Vec<f64>,
    pub final_states: (PhaseState, PhaseState),
}

/// Synchronous coupling: both chains share Gaussian draws and, when `law` is
/// given, the drawn integration time.
pub fn parallel_coupling(
    p: &dyn Potential,
    params: &ChainParams,
    law: Option<&StepLaw>,
    z0: &PhaseState,
    z0p: &PhaseState,
    n_steps: usize,
    rng: &mut RngStream,
) -> Result<CouplingPath> {
    check_dim(z0.dim(), z0p.dim())?;
    check_dim(p.dim(), z0.dim())?;
    if let Some(law) = law {
        law.validate(p.smoothness().l)?;
    }
    let d = z0.dim();
    let (mut a, mut b) = (z0.clone(), z0p.clone());
    let mut position_distance = vec![linalg::dist(&a.x, &b.x)];
    let mut phase_distance = vec![a.distance(&b)];
    for _ in 0..n_steps {
        let step = match law {
            Some(law) => params.for_time(law.sample(rng)),
            None => params.clone(),
        };
        let g1 = rng.normals(d);
        let g2 = if step.placement == RefreshPlacement::RefreshFlowRefresh { rng.normals(d) } else { Vec::new() };
        a = transition_with_draws(p, &step, &a, &g1, &g2)?;
        b = transition_with_draws(p, &step, &b, &g1, &g2)?;
        position_distance.push(linalg::dist(&a.x, &b.x));
        phase_distance.push(a.distance(&b));
    }
    Ok(CouplingPath { position_distance, phase_distance, final_states: (a, b) })
}
