//! Configuration-driven experiment runner.
//!
//! A run reads one JSON config, validates it completely (unknown keys,
//! missing sections, parameters the library rejects), and only then executes
//! and writes a CSV table, a run manifest and, for `certify`, a text report.
//! Validation failures never create files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::anneal::{self, AnnealConfig, AnnealSchedule};
use crate::certify::{self, RateInputs};
use crate::chain::{run_trajectory, transition_with_draws, ChainParams, Observable, RefreshPlacement, RngStream};
use crate::coupling;
use crate::error::{check_dim, KmcError, Result};
use crate::flow::{IntegratorConfig, PhaseState};
use crate::gaussian_lab::{self, GaussianLaw, QuadraticSetup};
use crate::meanfield::{self, ChaosConfig, ParticleInit};
use crate::model::{DoubleWell1D, MexicanHat2D, Potential, Quadratic, SharedPotential, WorkingBox, ZeroPotential};
use crate::stats;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Run,
    Certify,
    Gaussian,
    Couple,
    Anneal,
    Meanfield,
    VerletError,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Run => "run",
            ExperimentKind::Certify => "certify",
            ExperimentKind::Gaussian => "gaussian",
            ExperimentKind::Couple => "couple",
            ExperimentKind::Anneal => "anneal",
            ExperimentKind::Meanfield => "meanfield",
            ExperimentKind::VerletError => "verlet_error",
        }
    }
}

/// Named, parameterized builtin potentials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialSpec {
    /// `xᵀPx/2` with `P = diag(diagonal)`.
    DiagonalQuadratic { diagonal: Vec<f64> },
    /// `xᵀPx/2` with `P` given row by row.
    Quadratic { precision: Vec<Vec<f64>> },
    DoubleWell {
        #[serde(default = "one")]
        scale: f64,
        #[serde(default)]
        tilt: f64,
        #[serde(default = "two")]
        half_width: f64,
    },
    /// Double well rescaled to unit curvature on its box.
    UnitDoubleWell {
        #[serde(default = "two")]
        half_width: f64,
    },
    MexicanHat {
        #[serde(default = "one")]
        scale: f64,
        #[serde(default = "one")]
        radius: f64,
        #[serde(default = "two")]
        half_width: f64,
    },
    Zero { dim: usize },
}

fn one() -> f64 {
    1.0
}

fn two() -> f64 {
    2.0
}

fn matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(KmcError::InvalidParameter("matrix must be square and non-empty".into()));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

impl PotentialSpec {
    pub fn build(&self) -> Result<SharedPotential> {
        Ok(match self {
            PotentialSpec::DiagonalQuadratic { diagonal } => Arc::new(Quadratic::diagonal(diagonal)?),
            PotentialSpec::Quadratic { precision } => Arc::new(Quadratic::new(matrix(precision)?)?),
            PotentialSpec::DoubleWell { scale, tilt, half_width } => Arc::new(DoubleWell1D::tilted(*scale, *tilt, *half_width)?),
            PotentialSpec::UnitDoubleWell { half_width } => Arc::new(DoubleWell1D::unit_curvature(*half_width)?),
            PotentialSpec::MexicanHat { scale, radius, half_width } => Arc::new(MexicanHat2D::new(*scale, *radius, *half_width)?),
            PotentialSpec::Zero { dim } => {
                if *dim == 0 {
                    return Err(KmcError::InvalidParameter("dimension must be >= 1".into()));
                }
                Arc::new(ZeroPotential { dim: *dim })
            }
        })
    }
}

/// The weight of the mixed Fisher term: a number, `"rule"` or `"optimize"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightSpec {
    Value(f64),
    Named(WeightRule),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightRule {
    Rule,
    Optimize,
}

impl Default for WeightSpec {
    fn default() -> Self {
        WeightSpec::Named(WeightRule::Rule)
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunOptions {
    pub n_steps: usize,
    pub x0: Vec<f64>,
    pub v0: Vec<f64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifyOptions {
    pub t: f64,
    pub eta: f64,
    #[serde(default = "one")]
    pub l: f64,
    #[serde(default)]
    pub l_h: f64,
    pub c_ls: f64,
    #[serde(default)]
    pub a: WeightSpec,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianOptions {
    pub precision: Vec<Vec<f64>>,
    /// Curvature bound; defaults to the top eigenvalue of the precision.
    #[serde(default)]
    pub curvature: Option<f64>,
    /// Initial law on `(x, v)`.
    pub mean0: Vec<f64>,
    pub cov0: Vec<Vec<f64>>,
    pub t: Vec<f64>,
    pub eta: Vec<f64>,
    pub n_max: usize,
    #[serde(default)]
    pub a: WeightSpec,
    /// Defaults to `1/λ_min(P)`.
    #[serde(default)]
    pub c_ls: Option<f64>,
    #[serde(default)]
    pub placement: RefreshPlacement,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoupleOptions {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub x_other: Vec<f64>,
    pub v_other: Vec<f64>,
    pub n: usize,
    pub draws: usize,
    #[serde(default = "yes")]
    pub with_jacobian: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnealOptions {
    pub beta0: f64,
    /// Exactly one of `c_hat` and `c_hat_factor` (a multiple of the critical depth).
    #[serde(default)]
    pub c_hat: Option<f64>,
    #[serde(default)]
    pub c_hat_factor: Option<f64>,
    pub gamma: f64,
    pub q: f64,
    /// Defaults to the potential's curvature bound.
    #[serde(default)]
    pub l0: Option<f64>,
    pub n_steps: usize,
    pub replicas: usize,
    /// Defaults to `{0.1, 0.5, 1}` times the critical depth.
    #[serde(default)]
    pub thresholds: Option<Vec<f64>>,
    #[serde(default = "four")]
    pub record_per_decade: usize,
    pub x0: Vec<f64>,
    pub v0: Vec<f64>,
    #[serde(default)]
    pub placement: RefreshPlacement,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default = "depth_resolution")]
    pub depth_resolution: f64,
    /// Box for the critical-depth grid; defaults to the potential's working box.
    #[serde(default)]
    pub depth_box: Option<WorkingBox>,
}

fn four() -> usize {
    4
}

fn depth_resolution() -> f64 {
    1e-3
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanFieldOptions {
    pub confinement: PotentialSpec,
    pub interaction: PotentialSpec,
    pub particle_counts: Vec<usize>,
    pub reference_particles: usize,
    pub n_steps: usize,
    pub record_at: Vec<usize>,
    pub k: usize,
    pub replicas: usize,
    pub reference_replicas: usize,
    pub bootstrap: usize,
    pub init: ParticleInit,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerletErrorOptions {
    pub n_steps: usize,
    /// Verlet steps per transition; the step is `δ = t/K`.
    pub verlet_counts: Vec<usize>,
    pub replicas: usize,
    pub init: ParticleInit,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// When present, must match the subcommand.
    #[serde(default)]
    pub experiment: Option<ExperimentKind>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub potential: Option<PotentialSpec>,
    #[serde(default)]
    pub chain: Option<ChainParams>,
    #[serde(default)]
    pub run: Option<RunOptions>,
    #[serde(default)]
    pub certify: Option<CertifyOptions>,
    #[serde(default)]
    pub gaussian: Option<GaussianOptions>,
    #[serde(default)]
    pub couple: Option<CoupleOptions>,
    #[serde(default)]
    pub anneal: Option<AnnealOptions>,
    #[serde(default)]
    pub meanfield: Option<MeanFieldOptions>,
    #[serde(default)]
    pub verlet_error: Option<VerletErrorOptions>,
}

/// Command-line overrides.
#[derive(Clone, Debug, Default)]
pub struct Invocation {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// A CSV table with a fixed header.
#[derive(Clone, Debug, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<String>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i].clone()).collect())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn num(x: f64) -> String {
    format!("{x}")
}

/// Result of executing a validated experiment, before anything is written.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub table: Table,
    pub text: Option<String>,
    pub summary: Value,
    /// Set when a certified bound was violated numerically.
    pub assertion: Option<String>,
}

/// Paths written by a completed run.
#[derive(Clone, Debug)]
pub struct Written {
    pub csv: PathBuf,
    pub manifest: PathBuf,
    pub text: Option<PathBuf>,
    pub outcome: Outcome,
}

/// Process exit code for an error.
pub fn exit_code(err: &KmcError) -> i32 {
    match err {
        KmcError::Config(_) => 2,
        KmcError::Assertion(_) => 3,
        _ => 1,
    }
}

fn config_err(e: impl std::fmt::Display) -> KmcError {
    KmcError::Config(e.to_string())
}

fn missing(what: &str) -> KmcError {
    KmcError::Config(format!("missing section `{what}`"))
}

/// Parse and check a config; every failure is a [`KmcError::Config`].
pub fn parse_config(text: &str, kind: ExperimentKind) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = serde_json::from_str(text).map_err(config_err)?;
    if let Some(k) = cfg.experiment {
        if k != kind {
            return Err(KmcError::Config(format!("config is for `{}`, not `{}`", k.name(), kind.name())));
        }
    }
    Ok(cfg)
}

/// A fully validated experiment ready to run.
pub enum Job {
    Run { p: SharedPotential, params: ChainParams, opts: RunOptions },
    Certify { inputs: RateInputs, weight: WeightSpec },
    Gaussian { setup: QuadraticSetup, nu0: GaussianLaw, opts: GaussianOptions },
    Couple { p: SharedPotential, params: ChainParams, z: PhaseState, zp: PhaseState, opts: CoupleOptions },
    Anneal { p: SharedPotential, opts: AnnealOptions },
    Meanfield { confinement: SharedPotential, interaction: SharedPotential, params: ChainParams, chaos: ChaosConfig },
    VerletError { p: SharedPotential, params: ChainParams, opts: VerletErrorOptions },
}

fn state(x: &[f64], v: &[f64], d: usize) -> Result<PhaseState> {
    check_dim(d, x.len())?;
    PhaseState::new(x.to_vec(), v.to_vec())
}

fn chain_for(cfg: &ExperimentConfig, p: &dyn Potential) -> Result<ChainParams> {
    let params = cfg.chain.clone().ok_or_else(|| missing("chain"))?;
    params.validate()?;
    params.check_step(p.smoothness().l)?;
    Ok(params)
}

/// Build every object the experiment needs. Library errors raised here are
/// reported as configuration errors.
pub fn prepare(cfg: &ExperimentConfig, kind: ExperimentKind) -> Result<Job> {
    prepare_inner(cfg, kind).map_err(|e| match e {
        KmcError::Config(_) => e,
        other => KmcError::Config(other.to_string()),
    })
}

fn prepare_inner(cfg: &ExperimentConfig, kind: ExperimentKind) -> Result<Job> {
    let potential = || -> Result<SharedPotential> { cfg.potential.as_ref().ok_or_else(|| missing("potential"))?.build() };
    Ok(match kind {
        ExperimentKind::Run => {
            let opts = cfg.run.clone().ok_or_else(|| missing("run"))?;
            let p = potential()?;
            let params = chain_for(cfg, p.as_ref())?;
            state(&opts.x0, &opts.v0, p.dim())?;
            Job::Run { p, params, opts }
        }
        ExperimentKind::Certify => {
            let o = cfg.certify.clone().ok_or_else(|| missing("certify"))?;
            let inputs = RateInputs { t: o.t, eta: o.eta, a: 1.0, c_ls: o.c_ls, l: o.l, l_h: o.l_h };
            if let WeightSpec::Value(a) = o.a {
                if !(a > 0.0) {
                    return Err(KmcError::Config(format!("a must be > 0, got {a}")));
                }
            }
            certify::dissipation_rate(&inputs)?;
            Job::Certify { inputs, weight: o.a }
        }
        ExperimentKind::Gaussian => {
            let opts = cfg.gaussian.clone().ok_or_else(|| missing("gaussian"))?;
            let precision = matrix(&opts.precision)?;
            let setup = match opts.curvature {
                Some(l) => QuadraticSetup::with_curvature(precision, l)?,
                None => QuadraticSetup::new(precision)?,
            };
            let nu0 = GaussianLaw::new(DVector::from_vec(opts.mean0.clone()), matrix(&opts.cov0)?)?;
            check_dim(2 * setup.precision.nrows(), nu0.dim())?;
            if opts.t.is_empty() || opts.eta.is_empty() {
                return Err(KmcError::Config("empty t or eta grid".into()));
            }
            for &t in &opts.t {
                for &eta in &opts.eta {
                    ChainParams::new(t, eta)?.check_step(setup.curvature)?;
                }
            }
            Job::Gaussian { setup, nu0, opts }
        }
        ExperimentKind::Couple => {
            let opts = cfg.couple.clone().ok_or_else(|| missing("couple"))?;
            let p = potential()?;
            let params = chain_for(cfg, p.as_ref())?;
            let z = state(&opts.x, &opts.v, p.dim())?;
            let zp = state(&opts.x_other, &opts.v_other, p.dim())?;
            coupling::plan(p.as_ref(), &params, &z, &zp, opts.n)?;
            if opts.draws == 0 {
                return Err(KmcError::Config("draws must be >= 1".into()));
            }
            Job::Couple { p, params, z, zp, opts }
        }
        ExperimentKind::Anneal => {
            let opts = cfg.anneal.clone().ok_or_else(|| missing("anneal"))?;
            let p = potential()?;
            state(&opts.x0, &opts.v0, p.dim())?;
            match (opts.c_hat, opts.c_hat_factor) {
                (Some(c), None) if c > 0.0 => {}
                (None, Some(f)) if f > 0.0 => {}
                _ => return Err(KmcError::Config("give exactly one positive `c_hat` or `c_hat_factor`".into())),
            }
            if opts.replicas == 0 || opts.record_per_decade == 0 {
                return Err(KmcError::Config("replicas and record_per_decade must be >= 1".into()));
            }
            let l0 = opts.l0.unwrap_or(p.smoothness().l);
            AnnealSchedule { beta0: opts.beta0, c_hat: opts.c_hat.unwrap_or(1.0), gamma: opts.gamma, q: opts.q, l0 }.validate()?;
            opts.integrator.validate()?;
            if opts.depth_box.is_none() && p.smoothness().working_box.is_none() && (opts.c_hat.is_none() || opts.thresholds.is_none()) {
                return Err(KmcError::Config("critical depth needs `depth_box` for a potential without a working box".into()));
            }
            Job::Anneal { p, opts }
        }
        ExperimentKind::Meanfield => {
            let o = cfg.meanfield.clone().ok_or_else(|| missing("meanfield"))?;
            let confinement = o.confinement.build()?;
            let interaction = o.interaction.build()?;
            let params = cfg.chain.clone().ok_or_else(|| missing("chain"))?;
            params.validate()?;
            let chaos = ChaosConfig {
                particle_counts: o.particle_counts,
                reference_particles: o.reference_particles,
                n_steps: o.n_steps,
                record_at: o.record_at,
                k: o.k,
                replicas: o.replicas,
                reference_replicas: o.reference_replicas,
                bootstrap: o.bootstrap,
                init: o.init,
            };
            for &n in chaos.particle_counts.iter().chain([chaos.reference_particles].iter()) {
                let mf = meanfield::MeanFieldPotential::new(n, confinement.clone(), interaction.clone())?;
                params.check_step(mf.smoothness().l)?;
            }
            check_dim(confinement.dim(), chaos.init.x_mean.len())?;
            Job::Meanfield { confinement, interaction, params, chaos }
        }
        ExperimentKind::VerletError => {
            let opts = cfg.verlet_error.clone().ok_or_else(|| missing("verlet_error"))?;
            let p = potential()?;
            let params = chain_for(cfg, p.as_ref())?;
            check_dim(p.dim(), opts.init.x_mean.len())?;
            if opts.verlet_counts.is_empty() || opts.verlet_counts.contains(&0) || opts.replicas == 0 {
                return Err(KmcError::Config("need non-empty positive verlet_counts and replicas >= 1".into()));
            }
            Job::VerletError { p, params, opts }
        }
    })
}

impl Job {
    pub fn execute(&self, seed: u64) -> Result<Outcome> {
        match self {
            Job::Run { p, params, opts } => run_experiment(p.as_ref(), params, opts, seed),
            Job::Certify { inputs, weight } => certify_experiment(inputs, weight),
            Job::Gaussian { setup, nu0, opts } => gaussian_experiment(setup, nu0, opts),
            Job::Couple { p, params, z, zp, opts } => couple_experiment(p.as_ref(), params, z, zp, opts, seed),
            Job::Anneal { p, opts } => anneal_experiment(p, opts, seed),
            Job::Meanfield { confinement, interaction, params, chaos } => meanfield_experiment(confinement, interaction, params, chaos, seed),
            Job::VerletError { p, params, opts } => {
                let report = verlet_error_experiment(p.as_ref(), params, &opts.init, opts.n_steps, &opts.verlet_counts, opts.replicas, seed)?;
                Ok(verlet_outcome(&report))
            }
        }
    }
}

fn run_experiment(p: &dyn Potential, params: &ChainParams, opts: &RunOptions, seed: u64) -> Result<Outcome> {
    let z0 = PhaseState::new(opts.x0.clone(), opts.v0.clone())?;
    let traj = run_trajectory(p, params, &z0, opts.n_steps, &mut RngStream::new(seed), &Observable::standard())?;
    let mut header = vec!["step".to_string()];
    header.extend(traj.columns.iter().cloned());
    let rows = traj.rows.iter().enumerate().map(|(k, r)| std::iter::once(k.to_string()).chain(r.iter().map(|&x| num(x))).collect()).collect();
    Ok(Outcome {
        table: Table { header, rows },
        text: None,
        summary: json!({ "box_exits": traj.box_exits, "potential": p.name() }),
        assertion: None,
    })
}

/// Guaranteed lower bound on the rate at unit curvature.
fn rate_floor(t_unit: f64) -> f64 {
    3.0 * t_unit / 8.0
}

fn certify_experiment(inputs: &RateInputs, weight: &WeightSpec) -> Result<Outcome> {
    let unit_gamma = (1.0 - inputs.eta) / (inputs.t * inputs.l.sqrt());
    let cert = match weight {
        WeightSpec::Value(a) => certify::dissipation_rate(&RateInputs { a: *a, ..*inputs })?,
        WeightSpec::Named(WeightRule::Rule) => certify::dissipation_rate(&RateInputs { a: certify::a_rule(unit_gamma), ..*inputs })?,
        WeightSpec::Named(WeightRule::Optimize) => certify::optimize_a(inputs)?,
    };
    let u = cert.inputs;
    let floor = rate_floor(u.t);
    let mut table = Table::new(&[
        "t", "eta", "l", "l_h", "c_ls", "a", "t_unit", "gamma_unit", "c_ls_unit", "l_h_unit", "m1", "m2", "m3", "rho", "rho_floor", "rate",
        "contraction_factor", "valid", "step_admissible",
    ]);
    table.push(vec![
        num(inputs.t),
        num(inputs.eta),
        num(inputs.l),
        num(inputs.l_h),
        num(inputs.c_ls),
        num(u.a),
        num(u.t),
        num(u.gamma()),
        num(u.c_ls),
        num(u.l_h),
        num(cert.m1),
        num(cert.m2),
        num(cert.m3),
        num(cert.rho),
        num(floor),
        num(cert.rate()),
        num(cert.contraction_factor),
        cert.valid.to_string(),
        cert.step_admissible.to_string(),
    ]);
    let mut text = String::new();
    let _ = writeln!(text, "Entropy-dissipation certificate");
    let _ = writeln!(text, "  inputs: t = {}, eta = {}, L = {}, L_H = {}, C_LS = {}", inputs.t, inputs.eta, inputs.l, inputs.l_h, inputs.c_ls);
    let _ = writeln!(text, "  unit curvature: t = {}, gamma = {}, C_LS = {}, a = {}", u.t, u.gamma(), u.c_ls, u.a);
    let _ = writeln!(text, "  coefficients: m1 = {}, m2 = {}, m3 = {}", cert.m1, cert.m2, cert.m3);
    let _ = writeln!(text, "  valid: {}  (step admissible: {})", cert.valid, cert.step_admissible);
    let _ = writeln!(text, "  rho = {} (guaranteed floor 3t/8 = {})", cert.rho, floor);
    let _ = writeln!(text, "  modified entropy contracts by {} per step", cert.contraction_factor);
    let assertion = (cert.valid && cert.step_admissible && cert.rho < floor).then(|| format!("rho = {} is below the guaranteed floor {floor}", cert.rho));
    Ok(Outcome { table, text: Some(text), summary: serde_json::to_value(&cert)?, assertion })
}

fn gaussian_experiment(setup: &QuadraticSetup, nu0: &GaussianLaw, opts: &GaussianOptions) -> Result<Outcome> {
    let c_ls = opts.c_ls.unwrap_or_else(|| setup.lsi_constant());
    let mut table = Table::new(&["t", "eta", "a", "k", "kl", "fisher", "mixed_fisher", "modified_entropy", "certified_factor", "observed_ratio"]);
    let mut skipped = Vec::new();
    let mut points = Vec::new();
    let mut violations = 0;
    for &t in &opts.t {
        for &eta in &opts.eta {
            let params = ChainParams::new(t, eta)?.with_placement(opts.placement);
            let inputs = RateInputs { t, eta, a: 1.0, c_ls, l: setup.curvature, l_h: 0.0 };
            let a = match opts.a {
                WeightSpec::Value(a) => a,
                WeightSpec::Named(WeightRule::Rule) => certify::a_rule((1.0 - eta) / (t * setup.curvature.sqrt())),
                WeightSpec::Named(WeightRule::Optimize) => match certify::optimize_a(&inputs) {
                    Ok(c) => c.inputs.a,
                    Err(KmcError::Precondition(msg)) => {
                        skipped.push(json!({ "t": t, "eta": eta, "reason": msg }));
                        continue;
                    }
                    Err(e) => return Err(e),
                },
            };
            let report = match gaussian_lab::verify_dissipation(setup, &params, nu0, opts.n_max, a, c_ls) {
                Ok(r) => r,
                Err(KmcError::Precondition(msg)) => {
                    log::warn!("skipping t = {t}, eta = {eta}: {msg}");
                    skipped.push(json!({ "t": t, "eta": eta, "reason": msg }));
                    continue;
                }
                Err(e) => return Err(e),
            };
            violations += report.violations;
            points.push(json!({ "t": t, "eta": eta, "a": a, "rho": report.rho, "violations": report.violations, "worst_ratio": report.worst_ratio }));
            for r in &report.rows {
                table.push(vec![
                    num(t),
                    num(eta),
                    num(a),
                    r.k.to_string(),
                    num(r.kl),
                    num(r.fisher),
                    num(r.mixed_fisher),
                    num(r.modified_entropy),
                    num(r.certified_factor),
                    num(r.observed_ratio),
                ]);
            }
        }
    }
    let assertion = (violations > 0).then(|| format!("{violations} steps exceeded the certified contraction factor"));
    Ok(Outcome { table, text: None, summary: json!({ "c_ls": c_ls, "violations": violations, "points": points, "skipped": skipped }), assertion })
}

fn couple_experiment(p: &dyn Potential, params: &ChainParams, z: &PhaseState, zp: &PhaseState, opts: &CoupleOptions, seed: u64) -> Result<Outcome> {
    let (diags, summary) = coupling::coupling_experiment(p, params, z, zp, opts.n, opts.draws, seed, opts.with_jacobian)?;
    let mut table = Table::new(&["draw", "half_sq_displacement", "jacobian_frobenius_sq", "jacobian_op_norm", "surrogate", "max_path_error", "merge_error"]);
    for (i, d) in diags.iter().enumerate() {
        table.push(vec![
            i.to_string(),
            num(d.half_sq_displacement),
            num(d.jacobian_frobenius_sq),
            num(d.jacobian_op_norm),
            num(d.surrogate()),
            num(d.max_path_error),
            num(d.merge_error),
        ]);
    }
    let mut failures = Vec::new();
    if !summary.displacement_within_bound {
        failures.push(format!("mean half squared displacement {} exceeds the bound {}", summary.mean_half_sq_displacement, summary.bound));
    }
    if opts.with_jacobian && !summary.surrogate_within_bound {
        failures.push(format!("mean entropy surrogate {} exceeds the bound {}", summary.mean_surrogate, summary.bound));
    }
    if opts.with_jacobian && summary.max_jacobian_op_norm > 0.5 {
        failures.push(format!("Jacobian displacement {} exceeds 1/2", summary.max_jacobian_op_norm));
    }
    let assertion = (!failures.is_empty()).then(|| failures.join("; "));
    Ok(Outcome { table, text: None, summary: serde_json::to_value(&summary)?, assertion })
}

fn anneal_experiment(p: &SharedPotential, opts: &AnnealOptions, seed: u64) -> Result<Outcome> {
    let needs_depth = opts.c_hat.is_none() || opts.thresholds.is_none();
    let depth = if needs_depth {
        let bx = opts.depth_box.clone().or(p.smoothness().working_box).ok_or_else(|| KmcError::InvalidParameter("no box for critical depth".into()))?;
        Some(anneal::critical_depth(p.as_ref(), &bx, opts.depth_resolution)?)
    } else {
        None
    };
    let c_star = depth.as_ref().map(|d| d.c_star);
    let c_hat = match (opts.c_hat, opts.c_hat_factor) {
        (Some(c), _) => c,
        (None, Some(f)) => {
            let c = f * c_star.unwrap_or(0.0);
            if !(c > 0.0) {
                return Err(KmcError::InvalidParameter("critical depth is zero; give c_hat explicitly".into()));
            }
            c
        }
        (None, None) => unreachable!("checked during preparation"),
    };
    let thresholds = match &opts.thresholds {
        Some(t) => t.clone(),
        None => [0.1, 0.5, 1.0].iter().map(|f| f * c_star.unwrap_or(0.0)).collect(),
    };
    let schedule = AnnealSchedule { beta0: opts.beta0, c_hat, gamma: opts.gamma, q: opts.q, l0: opts.l0.unwrap_or(p.smoothness().l) };
    let cfg = AnnealConfig {
        schedule,
        n_steps: opts.n_steps,
        replicas: opts.replicas,
        thresholds: thresholds.clone(),
        record_at: AnnealConfig::log_spaced(opts.n_steps, opts.record_per_decade),
        placement: opts.placement,
        integrator: opts.integrator.clone(),
    };
    let z0 = PhaseState::new(opts.x0.clone(), opts.v0.clone())?;
    let report = anneal::anneal_ensemble(p, &cfg, &z0, seed)?;
    let mut header: Vec<String> = ["n", "beta", "t", "eta", "u_mean", "u_q10", "u_q50", "u_q90"].iter().map(|s| s.to_string()).collect();
    header.extend(thresholds.iter().map(|u| format!("exceed_{u}")));
    let rows = report
        .rows
        .iter()
        .map(|r| {
            let mut row = vec![r.n.to_string(), num(r.beta), num(r.t), num(r.eta), num(r.u_mean), num(r.u_q10), num(r.u_q50), num(r.u_q90)];
            row.extend(r.exceedance.iter().map(|&e| num(e)));
            row
        })
        .collect();
    let summary = json!({
        "c_star": c_star,
        "depth_refinement_error": depth.as_ref().map(|d| d.refinement_error),
        "c_hat": c_hat,
        "thresholds": thresholds,
        "mean_energy_slope": report.mean_energy_slope,
        "box_exits": report.box_exits,
    });
    Ok(Outcome { table: Table { header, rows }, text: None, summary, assertion: None })
}

fn meanfield_experiment(confinement: &SharedPotential, interaction: &SharedPotential, params: &ChainParams, chaos: &ChaosConfig, seed: u64) -> Result<Outcome> {
    let report = meanfield::chaos_experiment(confinement.clone(), interaction.clone(), params, chaos, seed)?;
    let mut table = Table::new(&["N", "n", "k", "w2_estimate", "bootstrap_lo", "bootstrap_hi", "null_hi", "method"]);
    for r in &report.rows {
        table.push(vec![
            r.particles.to_string(),
            r.step.to_string(),
            r.k.to_string(),
            num(r.w2_estimate),
            num(r.bootstrap_lo),
            num(r.bootstrap_hi),
            num(r.null_hi),
            serde_json::to_value(r.method)?.as_str().unwrap_or_default().to_string(),
        ]);
    }
    let summary = json!({ "slope": report.slope, "slope_lo": report.slope_lo, "slope_hi": report.slope_hi, "tuples_per_replica": report.tuples_per_replica });
    Ok(Outcome { table, text: None, summary, assertion: None })
}

#[derive(Clone, Debug, Serialize)]
pub struct VerletErrorRow {
    pub delta: f64,
    pub verlet_steps: usize,
    /// Mean of `|z_n − ẑ_n|` over replicas.
    pub mean_abs_error: f64,
    pub mean_sq_error: f64,
    /// Mean-square error of the previous (coarser) step divided by this one.
    pub ms_ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerletErrorReport {
    pub rows: Vec<VerletErrorRow>,
    /// Log-log slope of the mean error against `δ`.
    pub slope_p1: f64,
    /// Log-log slope of the root-mean-square error against `δ`.
    pub slope_p2: f64,
    /// Log-log slope of the mean-square error against `δ` (twice `slope_p2`).
    pub slope_mean_sq: f64,
    /// Empirical `E|z_n|²` of the exact chain, a check of the moment assumption.
    pub second_moment: f64,
}

/// Synchronous coupling of the exact chain and Verlet chains with `K` steps
/// of size `t/K` for every `K` in `counts`: all chains share the Gaussian
/// draws of each replica.
pub fn verlet_error_experiment(
    p: &dyn Potential,
    params: &ChainParams,
    init: &ParticleInit,
    n_steps: usize,
    counts: &[usize],
    replicas: usize,
    seed: u64,
) -> Result<VerletErrorReport> {
    params.validate()?;
    check_dim(p.dim(), init.x_mean.len())?;
    if counts.is_empty() || counts.contains(&0) || replicas == 0 {
        return Err(KmcError::InvalidParameter("need positive Verlet counts and replicas".into()));
    }
    let d = p.dim();
    let discrete: Vec<ChainParams> = counts.iter().map(|&k| params.clone().with_integrator(IntegratorConfig::verlet_for(params.t, k))).collect();
    let per_replica: Vec<(Vec<f64>, f64)> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = RngStream::substream(seed, r as u64);
            let z0 = init.sample(&mut rng);
            let mut exact = z0.clone();
            let mut approx = vec![z0; counts.len()];
            for _ in 0..n_steps {
                let g1 = rng.normals(d);
                let g2 = if params.placement == RefreshPlacement::RefreshFlowRefresh { rng.normals(d) } else { Vec::new() };
                exact = transition_with_draws(p, params, &exact, &g1, &g2)?;
                for (z, q) in approx.iter_mut().zip(&discrete) {
                    *z = transition_with_draws(p, q, z, &g1, &g2)?;
                }
            }
            let errs = approx.iter().map(|z| z.distance(&exact)).collect();
            Ok((errs, exact.x.iter().chain(&exact.v).map(|c| c * c).sum()))
        })
        .collect::<Result<_>>()?;
    let m = replicas as f64;
    let mut rows: Vec<VerletErrorRow> = counts
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let errs: Vec<f64> = per_replica.iter().map(|r| r.0[i]).collect();
            VerletErrorRow {
                delta: params.t / k as f64,
                verlet_steps: k,
                mean_abs_error: errs.iter().sum::<f64>() / m,
                mean_sq_error: errs.iter().map(|e| e * e).sum::<f64>() / m,
                ms_ratio: f64::NAN,
            }
        })
        .collect();
    rows.sort_by(|a, b| b.delta.total_cmp(&a.delta));
    for i in 1..rows.len() {
        rows[i].ms_ratio = rows[i - 1].mean_sq_error / rows[i].mean_sq_error;
    }
    let fit = |f: &dyn Fn(&VerletErrorRow) -> f64| {
        let pts: Vec<(f64, f64)> = rows.iter().filter(|r| f(r) > 0.0).map(|r| (r.delta.ln(), f(r).ln())).collect();
        if pts.len() < 2 {
            return f64::NAN;
        }
        let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        stats::ols_slope(&x, &y)
    };
    let slope_p1 = fit(&|r| r.mean_abs_error);
    let slope_p2 = fit(&|r| r.mean_sq_error.sqrt());
    let slope_mean_sq = fit(&|r| r.mean_sq_error);
    let second_moment = per_replica.iter().map(|r| r.1).sum::<f64>() / m;
    Ok(VerletErrorReport { rows, slope_p1, slope_p2, slope_mean_sq, second_moment })
}

fn verlet_outcome(report: &VerletErrorReport) -> Outcome {
    let mut table = Table::new(&["delta", "verlet_steps", "mean_abs_error", "mean_sq_error", "ms_ratio", "slope_p1", "slope_p2", "slope_mean_sq"]);
    for r in &report.rows {
        table.push(vec![
            num(r.delta),
            r.verlet_steps.to_string(),
            num(r.mean_abs_error),
            num(r.mean_sq_error),
            num(r.ms_ratio),
            num(report.slope_p1),
            num(report.slope_p2),
            num(report.slope_mean_sq),
        ]);
    }
    let summary = json!({
        "slope_p1": report.slope_p1,
        "slope_p2": report.slope_p2,
        "slope_mean_sq": report.slope_mean_sq,
        "second_moment": report.second_moment,
    });
    Outcome { table, text: None, summary, assertion: None }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Sibling of the CSV path with another extension, e.g. `out.manifest.json`.
fn sibling(csv: &Path, ext: &str) -> PathBuf {
    csv.with_extension(ext)
}

/// Read, validate, run and write. On a configuration error nothing is written.
pub fn execute(kind: ExperimentKind, inv: &Invocation) -> Result<Written> {
    let text = std::fs::read(&inv.config).map_err(|e| KmcError::Config(format!("cannot read {}: {e}", inv.config.display())))?;
    let text_str = std::str::from_utf8(&text).map_err(config_err)?;
    let cfg = parse_config(text_str, kind)?;
    let seed = inv.seed.unwrap_or(cfg.seed);
    let out = inv.out.clone().or_else(|| cfg.output.clone()).unwrap_or_else(|| PathBuf::from(format!("kmc_{}.csv", kind.name())));
    let job = prepare(&cfg, kind)?;
    log::info!("running {} with seed {seed}", kind.name());
    let outcome = job.execute(seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    outcome.table.write(&out)?;
    let text_path = match &outcome.text {
        Some(t) => {
            let path = sibling(&out, "txt");
            std::fs::write(&path, t)?;
            Some(path)
        }
        None => None,
    };
    let manifest_path = sibling(&out, "manifest.json");
    let manifest = json!({
        "experiment": kind.name(),
        "config_path": inv.config.display().to_string(),
        "config_sha256": sha256_hex(&text),
        "seed": seed,
        "seed_overridden": inv.seed.is_some(),
        "versions": { "kmc": env!("CARGO_PKG_VERSION"), "manifest_format": 1 },
        "outputs": { "csv": out.display().to_string(), "text": text_path.as_ref().map(|p| p.display().to_string()) },
        "summary": outcome.summary,
        "assertion_failure": outcome.assertion,
    });
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    if let Some(msg) = &outcome.assertion {
        return Err(KmcError::Assertion(msg.clone()));
    }
    Ok(Written { csv: out, manifest: manifest_path, text: text_path, outcome })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_config(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("config.json");
        std::fs::write(&path, body).unwrap();
        path
    }

    fn temp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("kmc-cli-{tag}-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let bad = [
            r#"{"seed": 1, "colour": 3}"#,
            r#"{"certify": {"t": 0.1, "eta": 0.8, "c_ls": 1, "extra": 1}}"#,
            r#"{"potential": {"kind": "double_well", "wiggle": 2}}"#,
            r#"{"chain": {"t": 0.1, "eta": 0.5, "speed": 1}}"#,
        ];
        for b in bad {
            assert!(matches!(parse_config(b, ExperimentKind::Certify), Err(KmcError::Config(_))), "{b}");
        }
    }

    #[test]
    fn mismatched_experiment_rejected() {
        let r = parse_config(r#"{"experiment": "anneal"}"#, ExperimentKind::Certify);
        assert!(matches!(r, Err(KmcError::Config(_))));
    }

    #[test]
    fn missing_section_and_bad_values_are_config_errors() {
        let cfg = parse_config("{}", ExperimentKind::Run).unwrap();
        assert!(matches!(prepare(&cfg, ExperimentKind::Run), Err(KmcError::Config(_))));
        let cfg = parse_config(r#"{"certify": {"t": 0.1, "eta": 1.5, "c_ls": 1}}"#, ExperimentKind::Certify).unwrap();
        assert!(matches!(prepare(&cfg, ExperimentKind::Certify), Err(KmcError::Config(_))));
        let cfg = parse_config(
            r#"{"potential": {"kind": "double_well"}, "chain": {"t": 0.2, "eta": 0.5}, "run": {"n_steps": 3, "x0": [0], "v0": [0]}}"#,
            ExperimentKind::Run,
        )
        .unwrap();
        // t√L = 0.2·√44 violates the step guard.
        assert!(matches!(prepare(&cfg, ExperimentKind::Run), Err(KmcError::Config(_))));
    }

    #[test]
    fn malformed_config_writes_nothing() {
        let dir = temp_dir("malformed");
        let cfg = write_config(&dir, r#"{"certify": {"t": 0.1,, }"#);
        let out = dir.join("out.csv");
        let err = execute(ExperimentKind::Certify, &Invocation { config: cfg, seed: None, out: Some(out.clone()) }).unwrap_err();
        assert_eq!(exit_code(&err), 2);
        assert!(!out.exists());
        assert!(!sibling(&out, "manifest.json").exists());
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn certify_example() {
        let dir = temp_dir("certify");
        let cfg = write_config(&dir, r#"{"certify": {"t": 0.1, "eta": 0.8, "l": 1, "c_ls": 1, "a": "rule"}}"#);
        let out = dir.join("cert.csv");
        let w = execute(ExperimentKind::Certify, &Invocation { config: cfg, seed: None, out: Some(out.clone()) }).unwrap();
        assert_eq!(w.outcome.table.column("valid").unwrap(), vec!["true"]);
        let rho: f64 = w.outcome.table.column("rho").unwrap()[0].parse().unwrap();
        assert!(rho >= 0.0375, "rho = {rho}");
        let csv_text = std::fs::read_to_string(&out).unwrap();
        assert!(csv_text.starts_with("t,eta,l,"));
        assert!(std::fs::read_to_string(w.text.unwrap()).unwrap().contains("valid: true"));
        let manifest: Value = serde_json::from_str(&std::fs::read_to_string(&w.manifest).unwrap()).unwrap();
        assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn weight_spec_forms() {
        let c: CertifyOptions = serde_json::from_str(r#"{"t": 0.1, "eta": 0.5, "c_ls": 1, "a": 0.02}"#).unwrap();
        assert_eq!(c.a, WeightSpec::Value(0.02));
        let c: CertifyOptions = serde_json::from_str(r#"{"t": 0.1, "eta": 0.5, "c_ls": 1, "a": "optimize"}"#).unwrap();
        assert_eq!(c.a, WeightSpec::Named(WeightRule::Optimize));
        assert!(serde_json::from_str::<CertifyOptions>(r#"{"t": 0.1, "eta": 0.5, "c_ls": 1, "a": "best"}"#).is_err());
    }

    #[test]
    fn seed_override_and_reproducibility() {
        let dir = temp_dir("run");
        let cfg = write_config(
            &dir,
            r#"{"seed": 5, "potential": {"kind": "unit_double_well"}, "chain": {"t": 0.2, "eta": 0.5}, "run": {"n_steps": 20, "x0": [1.0], "v0": [0.0]}}"#,
        );
        let run = |seed: Option<u64>, name: &str| {
            let out = dir.join(name);
            execute(ExperimentKind::Run, &Invocation { config: cfg.clone(), seed, out: Some(out.clone()) }).unwrap();
            std::fs::read_to_string(out).unwrap()
        };
        let a = run(None, "a.csv");
        assert_eq!(a, run(Some(5), "b.csv"));
        assert_ne!(a, run(Some(6), "c.csv"));
        assert!(a.starts_with("step,x0,v0,U,x_norm_sq\n"));
        assert_eq!(a.lines().count(), 22);
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn verlet_exact_for_single_step_free_flight() {
        let p = ZeroPotential { dim: 2 };
        let params = ChainParams::new(0.3, 0.4).unwrap();
        let init = ParticleInit { x_mean: vec![0.5, -1.0], x_sd: 1.0, v_sd: 1.0 };
        let r = verlet_error_experiment(&p, &params, &init, 10, &[1], 20, 3).unwrap();
        assert!(r.rows[0].mean_abs_error < 1e-14, "{:?}", r.rows[0]);
    }

    #[test]
    fn verlet_error_order_on_double_well() {
        let p = DoubleWell1D::unit_curvature(2.0).unwrap();
        let params = ChainParams::new(0.2, 0.5).unwrap();
        let init = ParticleInit { x_mean: vec![0.0], x_sd: 1.0, v_sd: 1.0 };
        let r = verlet_error_experiment(&p, &params, &init, 20, &[4, 8, 16, 32], 200, 11).unwrap();
        assert!((1.8..=2.2).contains(&r.slope_p2), "{r:?}");
        assert!((3.6..=4.4).contains(&r.slope_mean_sq), "{r:?}");
        for row in &r.rows[1..] {
            assert!((10.0..=24.0).contains(&row.ms_ratio), "{row:?}");
        }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&KmcError::Config("x".into())), 2);
        assert_eq!(exit_code(&KmcError::Assertion("x".into())), 3);
        assert_eq!(exit_code(&KmcError::MissingHessian), 1);
    }
}
