//! Fixed-step forward-Euler simulation of the multi-agent system, with
//! metrics, trace export and run comparison helpers.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{TopologyKind, TopologySchedule};
use crate::mathkit::norm;
use crate::objective::{team_hessian, team_value, LocalObjective};
use crate::protocol::{self, gain_check, GainCheck, ProtocolParams, ZetaRate};

/// Step sizes above this draw a stability warning.
pub const DT_WARNING: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    /// One vector per agent.
    Explicit(Vec<Vec<f64>>),
    /// Every component drawn uniformly from `[lo, hi)` using the scenario seed.
    RandomBox { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopTolerances {
    pub grad_sum_tol: f64,
    pub disagreement_tol: f64,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub objectives: Vec<LocalObjective>,
    pub schedule: TopologySchedule,
    pub params: ProtocolParams,
    pub dt: f64,
    pub horizon: f64,
    pub initial_x: InitialState,
    /// `None` runs to the horizon.
    pub stop: Option<StopTolerances>,
    pub record_stride: usize,
    pub seed: u64,
    /// Known team minimizer, enables `max_err_to_opt`.
    pub x_star: Option<Vec<f64>>,
    /// Known optimal team value, enables `objective_gap`.
    pub f_star: Option<f64>,
    pub record_states: bool,
}

/// Non-fatal findings of [`validate`].
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Validation {
    pub warnings: Vec<String>,
    pub gain_check: Option<GainCheck>,
}

impl Scenario {
    pub fn n_agents(&self) -> usize {
        self.objectives.len()
    }

    pub fn dim(&self) -> usize {
        self.objectives.first().map_or(0, LocalObjective::dim)
    }

    /// Initial decision vectors, one per agent.
    pub fn initial_states(&self) -> Result<Vec<Vec<f64>>> {
        let (n, d) = (self.n_agents(), self.dim());
        match &self.initial_x {
            InitialState::Explicit(v) => {
                if v.len() != n {
                    return Err(Error::DimensionMismatch { expected: n, found: v.len() });
                }
                if let Some(bad) = v.iter().find(|x| x.len() != d) {
                    return Err(Error::DimensionMismatch { expected: d, found: bad.len() });
                }
                if v.iter().flatten().any(|c| !c.is_finite()) {
                    return Err(Error::NonFinite("initial state"));
                }
                Ok(v.clone())
            }
            InitialState::RandomBox { lo, hi } => {
                if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                    return Err(Error::Parameter(format!("initial box [{lo}, {hi}) is empty")));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                Ok((0..n).map(|_| (0..d).map(|_| rng.random_range(*lo..*hi)).collect()).collect())
            }
        }
    }
}

/// Advisory level for [`euler_stiffness`]. Above it first-order runs tend to
/// settle into a period-2 oscillation instead of converging.
pub const STIFFNESS_WARNING: f64 = 0.5;

/// `dt * N * max_i lambda_max(hessian f_i(x*))` for first-order modes, the
/// per-step gain of the loop x -> zeta -> theta -> g near the optimum.
/// `None` in second-order mode, without `x_star`, or without Hessians.
pub fn euler_stiffness(s: &Scenario) -> Option<f64> {
    if s.params.mode.is_second_order() {
        return None;
    }
    let x = s.x_star.as_deref()?;
    let mut top = 0.0f64;
    for f in &s.objectives {
        if !f.capabilities().has_hessian || f.dim() != x.len() {
            return None;
        }
        let h = f.hessian(x).ok()?;
        top = top.max(nalgebra::SymmetricEigen::new(h).eigenvalues.max());
    }
    Some(s.dt * s.n_agents() as f64 * top)
}

/// Checks the scenario against the modelling assumptions. Violations are
/// returned together; warnings never block a run.
pub fn validate(s: &Scenario) -> Result<Validation> {
    let mut violations = Vec::new();
    let mut warnings = Vec::new();
    let n = s.n_agents();
    if n < 2 {
        violations.push(format!("dimension: need at least 2 agents, got {n}"));
    }
    let d = s.dim();
    if let Some((i, f)) = s.objectives.iter().enumerate().find(|(_, f)| f.dim() != d) {
        violations.push(format!("dimension: objective {i} has d = {}, expected {d}", f.dim()));
    }
    if s.schedule.n() != n {
        violations.push(format!("dimension: schedule has {} nodes for {n} agents", s.schedule.n()));
    }
    for (k, g) in s.schedule.graphs().iter().enumerate() {
        if !g.is_connected() {
            violations.push(format!("Assumption 1: graph {k} ({}) of the schedule is not connected", g.label()));
        }
    }
    violations.extend(s.params.violations());
    if s.params.mode.is_second_order() {
        if let Some(i) = s.objectives.iter().position(|f| !f.capabilities().has_hessian) {
            violations.push(format!("capability: objective {i} has no Hessian, required in second-order mode"));
        }
    }
    if !(s.dt > 0.0) || !s.dt.is_finite() {
        violations.push(format!("integration: dt = {} must be positive", s.dt));
    } else {
        if s.dt >= s.schedule.dwell() && s.schedule.graphs().len() > 1 {
            violations.push(format!("integration: dt = {} must be below the dwell time {}", s.dt, s.schedule.dwell()));
        }
        if !(s.horizon >= s.dt) || !s.horizon.is_finite() {
            violations.push(format!("integration: horizon = {} must be at least dt", s.horizon));
        }
        if s.dt > DT_WARNING {
            warnings.push(format!("dt = {} exceeds {DT_WARNING}; Euler steps of the sign terms may chatter or diverge", s.dt));
        }
    }
    if s.record_stride == 0 {
        violations.push("integration: record_stride must be at least 1".into());
    }
    if let Some(x) = &s.x_star {
        if x.len() != d {
            violations.push(format!("dimension: x_star has length {}, expected {d}", x.len()));
        }
    }
    if let Err(e) = s.initial_states() {
        violations.push(format!("initial state: {e}"));
    }
    if let Some(x) = s.x_star.as_deref().filter(|x| x.len() == d) {
        if s.objectives.iter().all(|f| f.capabilities().has_hessian) {
            if let Ok(h) = team_hessian(&s.objectives, x) {
                let sv = h.singular_values();
                let rank = sv.iter().filter(|v| **v > 1e-9 * sv.max().max(1.0)).count();
                if rank < d {
                    warnings.push(format!(
                        "optimum: team Hessian at x_star has rank {rank} < {d}; the minimizer is not unique and max_err_to_opt measures distance to one minimizer only"
                    ));
                }
            }
        }
    }
    if let Some(k) = euler_stiffness(s) {
        if k > STIFFNESS_WARNING {
            warnings.push(format!(
                "stiffness: dt * N * max lambda_max(hessian f_i(x*)) = {k:.3} exceeds {STIFFNESS_WARNING}; the estimator loop may chatter"
            ));
        }
    }
    let gc = (n >= 2).then(|| gain_check(&s.params, n));
    if let Some(GainCheck::Warning { required_p }) = gc {
        warnings.push(format!("gain: p = {} does not exceed (N-1) rho / 2 = {required_p}", s.params.p));
    }
    if violations.is_empty() {
        Ok(Validation { warnings, gain_check: gc })
    } else {
        Err(Error::Invalid(violations))
    }
}

/// Network sums seen during one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepReport {
    pub omega_sum_norm: f64,
    pub u_tilde_sum_norm: f64,
    /// Largest `|omega_i|` or `|u_tilde_i|` component, for scaling the sums.
    pub magnitude: f64,
    pub regularized_solves: usize,
}

/// Incremental simulation state.
pub struct Simulation<'a> {
    s: &'a Scenario,
    n: usize,
    d: usize,
    ed: usize,
    step: u64,
    x: Vec<f64>,
    theta: Vec<f64>,
    zeta: Vec<f64>,
    zeta_prev: Option<Vec<f64>>,
    u: Vec<f64>,
    u_tilde: Vec<f64>,
    omega: Vec<f64>,
    h: Vec<f64>,
    zeta_next: Vec<f64>,
    x_next: Vec<f64>,
    condition_events: u64,
}

impl<'a> Simulation<'a> {
    pub fn new(s: &'a Scenario) -> Result<Self> {
        let validation = validate(s)?;
        for w in &validation.warnings {
            log::warn!("{w}");
        }
        let (n, d) = (s.n_agents(), s.dim());
        let ed = s.params.mode.estimator_dim(d);
        let x: Vec<f64> = s.initial_states()?.into_iter().flatten().collect();
        let mut zeta = vec![0.0; n * ed];
        for i in 0..n {
            protocol::local_zeta_into(&s.objectives[i], &x[i * d..(i + 1) * d], s.params.mode, &mut zeta[i * ed..(i + 1) * ed])?;
        }
        Ok(Self {
            s,
            n,
            d,
            ed,
            step: 0,
            theta: zeta.clone(),
            zeta_next: zeta.clone(),
            zeta,
            zeta_prev: None,
            u: vec![0.0; n * d],
            u_tilde: vec![0.0; n * d],
            omega: vec![0.0; n * ed],
            h: vec![0.0; n * ed],
            x_next: x.clone(),
            x,
            condition_events: 0,
        })
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.s.dt
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn theta(&self, i: usize) -> &[f64] {
        &self.theta[i * self.ed..(i + 1) * self.ed]
    }

    /// Current `zeta_i(x_i)` (the local gradient in first-order modes).
    pub fn zeta(&self, i: usize) -> &[f64] {
        &self.zeta[i * self.ed..(i + 1) * self.ed]
    }

    /// `h_i` used by the most recent step.
    pub fn h(&self, i: usize) -> &[f64] {
        &self.h[i * self.ed..(i + 1) * self.ed]
    }

    /// Overrides an estimator entry, e.g. to start from exact averages.
    pub fn set_theta(&mut self, i: usize, theta: &[f64]) -> Result<()> {
        if theta.len() != self.ed {
            return Err(Error::DimensionMismatch { expected: self.ed, found: theta.len() });
        }
        self.theta[i * self.ed..(i + 1) * self.ed].copy_from_slice(theta);
        Ok(())
    }

    pub fn condition_events(&self) -> u64 {
        self.condition_events
    }

    pub fn active_label(&self) -> TopologyKind {
        self.s.schedule.active_graph(self.time()).label()
    }

    /// `|sum_i grad f_i(x_i)|`.
    pub fn grad_sum_norm(&self) -> f64 {
        let mut sum = vec![0.0; self.d];
        for i in 0..self.n {
            for (sk, z) in sum.iter_mut().zip(&self.zeta[i * self.ed..i * self.ed + self.d]) {
                *sk += z;
            }
        }
        norm(&sum)
    }

    fn max_pairwise(data: &[f64], n: usize, w: usize) -> f64 {
        let mut best = 0.0f64;
        for i in 0..n {
            for j in i + 1..n {
                let a = &data[i * w..(i + 1) * w];
                let b = &data[j * w..(j + 1) * w];
                let dist = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
                best = best.max(dist);
            }
        }
        best.sqrt()
    }

    pub fn max_disagreement(&self) -> f64 {
        Self::max_pairwise(&self.x, self.n, self.d)
    }

    pub fn theta_disagreement(&self) -> f64 {
        Self::max_pairwise(&self.theta, self.n, self.ed)
    }

    /// `max_ij |h_i - h_j|` over the most recent step.
    pub fn h_spread(&self) -> f64 {
        Self::max_pairwise(&self.h, self.n, self.ed)
    }

    pub fn max_err_to_opt(&self) -> Option<f64> {
        let xs = self.s.x_star.as_ref()?;
        Some((0..self.n).map(|i| norm(&self.x(i).iter().zip(xs).map(|(a, b)| a - b).collect::<Vec<_>>())).fold(0.0, f64::max))
    }

    /// `max_i F(x_i) - F*`.
    pub fn objective_gap(&self) -> Option<Result<f64>> {
        let fs = self.s.f_star?;
        let mut worst = f64::NEG_INFINITY;
        for i in 0..self.n {
            match team_value(&self.s.objectives, self.x(i)) {
                Ok(v) => worst = worst.max(v - fs),
                Err(e) => return Some(Err(e)),
            }
        }
        Some(Ok(worst.max(0.0)))
    }

    /// `|sum_i theta_i - sum_i zeta_i(x_i)|`.
    pub fn conservation_defect(&self) -> f64 {
        let mut diff = vec![0.0; self.ed];
        for i in 0..self.n {
            for k in 0..self.ed {
                diff[k] += self.theta[i * self.ed + k] - self.zeta[i * self.ed + k];
            }
        }
        norm(&diff)
    }

    fn divergence(&self, agent: usize) -> Error {
        Error::Divergence { step: self.step, time: self.time(), agent }
    }

    /// Advances one Euler step: inputs and estimates from the current state,
    /// then `h_i` from `u_i`, then the estimator consensus, then the commit.
    pub fn step(&mut self) -> Result<StepReport> {
        let s = self.s;
        let (n, d, ed) = (self.n, self.d, self.ed);
        let dt = s.dt;
        let params = &s.params;
        let mode = params.mode;
        let graph = s.schedule.active_graph(self.time());
        let max_deg = graph.max_degree();
        let dz_x = params.deadzone_radius(params.q, dt, max_deg);
        let dz_theta = params.deadzone_radius(params.p, dt, max_deg);
        let mut report = StepReport::default();

        // inputs
        self.u_tilde.fill(0.0);
        for i in 0..n {
            let xi = &self.x[i * d..(i + 1) * d];
            let nb = graph.neighbors(i).iter().map(|&j| &self.x[j * d..(j + 1) * d]);
            protocol::consensus_accumulate(
                &mut self.u_tilde[i * d..(i + 1) * d],
                xi,
                nb,
                params.q,
                params.alpha,
                params.mu1,
                params.beta,
                params.mu2,
                dz_x,
            );
            let ui = &mut self.u[i * d..(i + 1) * d];
            let info = protocol::g_i_into(&self.theta[i * ed..(i + 1) * ed], d, n, params, ui)
                .map_err(|_| self.divergence_at(i))?;
            if info.regularized {
                self.condition_events += 1;
                report.regularized_solves += 1;
            }
            for k in 0..d {
                self.u[i * d + k] += self.u_tilde[i * d + k];
            }
        }

        // h_i and the next state
        for i in 0..n {
            for k in 0..d {
                self.x_next[i * d + k] = self.x[i * d + k] + dt * self.u[i * d + k];
            }
            let f = &s.objectives[i];
            let xn = &self.x_next[i * d..(i + 1) * d];
            let zn = &mut self.zeta_next[i * ed..(i + 1) * ed];
            protocol::local_zeta_into(f, xn, mode, zn).map_err(|_| self.divergence_at(i))?;
        }
        let analytic_ok = |f: &LocalObjective| {
            let c = f.capabilities();
            if mode.is_second_order() {
                c.has_zeta_jacobian
            } else {
                c.has_hessian
            }
        };
        for i in 0..n {
            let f = &s.objectives[i];
            let hi = &mut self.h[i * ed..(i + 1) * ed];
            let rate = match params.zeta_rate {
                ZetaRate::Analytic if !analytic_ok(f) => ZetaRate::BackwardDifference,
                r => r,
            };
            match rate {
                ZetaRate::Secant => {
                    for k in 0..ed {
                        hi[k] = (self.zeta_next[i * ed + k] - self.zeta[i * ed + k]) / dt;
                    }
                }
                ZetaRate::BackwardDifference => match &self.zeta_prev {
                    Some(prev) => {
                        for k in 0..ed {
                            hi[k] = (self.zeta[i * ed + k] - prev[i * ed + k]) / dt;
                        }
                    }
                    None => hi.fill(0.0),
                },
                ZetaRate::Analytic => {
                    let v = protocol::h_i(f, &self.x[i * d..(i + 1) * d], &self.u[i * d..(i + 1) * d], mode, None)
                        .map_err(|_| Error::Divergence { step: self.step, time: self.step as f64 * dt, agent: i })?;
                    hi.copy_from_slice(&v);
                }
            }
        }

        // estimator consensus
        self.omega.fill(0.0);
        for i in 0..n {
            let ti = &self.theta[i * ed..(i + 1) * ed];
            let nb = graph.neighbors(i).iter().map(|&j| &self.theta[j * ed..(j + 1) * ed]);
            protocol::consensus_accumulate(
                &mut self.omega[i * ed..(i + 1) * ed],
                ti,
                nb,
                params.p,
                params.gamma,
                params.nu1,
                params.delta,
                params.nu2,
                dz_theta,
            );
        }
        let mut w_sum = vec![0.0; ed];
        let mut u_sum = vec![0.0; d];
        for i in 0..n {
            for k in 0..ed {
                w_sum[k] += self.omega[i * ed + k];
                report.magnitude = report.magnitude.max(self.omega[i * ed + k].abs());
            }
            for k in 0..d {
                u_sum[k] += self.u_tilde[i * d + k];
                report.magnitude = report.magnitude.max(self.u_tilde[i * d + k].abs());
            }
        }
        report.omega_sum_norm = norm(&w_sum);
        report.u_tilde_sum_norm = norm(&u_sum);

        // commit
        let secant = params.zeta_rate == ZetaRate::Secant;
        for i in 0..n {
            for k in 0..ed {
                let idx = i * ed + k;
                self.theta[idx] += if secant {
                    // the realized zeta increment keeps sum(theta) - sum(zeta) fixed
                    dt * self.omega[idx] + (self.zeta_next[idx] - self.zeta[idx])
                } else {
                    dt * (self.omega[idx] + self.h[idx])
                };
            }
        }
        if params.zeta_rate == ZetaRate::BackwardDifference || params.zeta_rate == ZetaRate::Analytic {
            let prev = self.zeta_prev.get_or_insert_with(|| vec![0.0; n * ed]);
            prev.copy_from_slice(&self.zeta);
        }
        std::mem::swap(&mut self.x, &mut self.x_next);
        std::mem::swap(&mut self.zeta, &mut self.zeta_next);
        self.step += 1;
        for i in 0..n {
            let bad_x = self.x[i * d..(i + 1) * d].iter().any(|v| !v.is_finite());
            let bad_t = self.theta[i * ed..(i + 1) * ed].iter().any(|v| !v.is_finite());
            if bad_x || bad_t {
                return Err(self.divergence(i));
            }
        }
        Ok(report)
    }

    fn divergence_at(&self, agent: usize) -> Error {
        self.divergence(agent)
    }

    fn record(&self) -> Result<TraceRow> {
        Ok(TraceRow {
            t: self.time(),
            grad_sum_norm: self.grad_sum_norm(),
            max_disagreement: self.max_disagreement(),
            max_err_to_opt: self.max_err_to_opt(),
            theta_disagreement: self.theta_disagreement(),
            graph_label: self.active_label(),
            objective_gap: self.objective_gap().transpose()?,
            conservation_defect: self.conservation_defect(),
        })
    }

    fn stop_met(&self) -> bool {
        match self.s.stop {
            Some(tol) => self.grad_sum_norm() <= tol.grad_sum_tol && self.max_disagreement() <= tol.disagreement_tol,
            None => false,
        }
    }
}

/// One recorded sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub grad_sum_norm: f64,
    pub max_disagreement: f64,
    pub max_err_to_opt: Option<f64>,
    pub theta_disagreement: f64,
    pub graph_label: TopologyKind,
    pub objective_gap: Option<f64>,
    pub conservation_defect: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateRow {
    pub t: f64,
    pub agent: usize,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
    pub states: Vec<StateRow>,
    pub iterations: u64,
    pub condition_events: u64,
    /// Largest `|h_i - h_j|` seen at the recorded steps.
    pub observed_rho: f64,
    pub stopped_early: bool,
    pub final_x: Vec<Vec<f64>>,
}

/// Runs the scenario to the horizon or until both stop tolerances hold.
pub fn run(s: &Scenario) -> Result<Trace> {
    let mut sim = Simulation::new(s)?;
    let total_steps = (s.horizon / s.dt).round() as u64;
    let stride = s.record_stride as u64;
    let mut trace = Trace::default();
    let record = |sim: &Simulation, trace: &mut Trace| -> Result<()> {
        trace.rows.push(sim.record()?);
        if s.record_states {
            for i in 0..sim.n {
                trace.states.push(StateRow { t: sim.time(), agent: i, x: sim.x(i).to_vec() });
            }
        }
        Ok(())
    };
    record(&sim, &mut trace)?;
    let mut warned_regularized = false;
    while sim.steps() < total_steps {
        sim.step()?;
        if sim.condition_events() > 0 && !warned_regularized {
            log::warn!("ill-conditioned Newton system regularized at t = {}", sim.time());
            warned_regularized = true;
        }
        let stop = sim.stop_met();
        if sim.steps() % stride == 0 || stop || sim.steps() == total_steps {
            record(&sim, &mut trace)?;
            trace.observed_rho = trace.observed_rho.max(sim.h_spread());
            let defect = sim.conservation_defect();
            let allowed = 10.0 * s.dt * sim.time() + 1e-9 * (1.0 + norm(&sim.theta));
            if defect > allowed {
                log::warn!("estimator-sum conservation defect {defect:e} exceeds {allowed:e} at t = {}", sim.time());
            }
        }
        if stop {
            trace.stopped_early = true;
            break;
        }
    }
    trace.iterations = sim.steps();
    trace.condition_events = sim.condition_events();
    trace.final_x = (0..sim.n).map(|i| sim.x(i).to_vec()).collect();
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    GradSumNorm,
    MaxDisagreement,
    MaxErrToOpt,
    ThetaDisagreement,
    ObjectiveGap,
    ConservationDefect,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::GradSumNorm,
        Metric::MaxDisagreement,
        Metric::MaxErrToOpt,
        Metric::ThetaDisagreement,
        Metric::ObjectiveGap,
        Metric::ConservationDefect,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Metric::GradSumNorm => "grad_sum_norm",
            Metric::MaxDisagreement => "max_disagreement",
            Metric::MaxErrToOpt => "max_err_to_opt",
            Metric::ThetaDisagreement => "theta_disagreement",
            Metric::ObjectiveGap => "objective_gap",
            Metric::ConservationDefect => "conservation_defect",
        }
    }

    pub fn of(&self, r: &TraceRow) -> Option<f64> {
        match self {
            Metric::GradSumNorm => Some(r.grad_sum_norm),
            Metric::MaxDisagreement => Some(r.max_disagreement),
            Metric::MaxErrToOpt => r.max_err_to_opt,
            Metric::ThetaDisagreement => Some(r.theta_disagreement),
            Metric::ObjectiveGap => r.objective_gap,
            Metric::ConservationDefect => Some(r.conservation_defect),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownMetric(s.to_string()))
    }
}

impl Trace {
    /// Whether every row carries `metric`.
    pub fn has(&self, metric: Metric) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| metric.of(r).is_some())
    }

    pub fn final_row(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    /// Trace CSV with header
    /// `t,grad_sum_norm,max_disagreement,max_err_to_opt,theta_disagreement,graph_label`.
    /// A missing `max_err_to_opt` is written as an empty field.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(TRACE_HEADER)?;
        for r in &self.rows {
            wr.write_record([
                fmt17(r.t),
                fmt17(r.grad_sum_norm),
                fmt17(r.max_disagreement),
                r.max_err_to_opt.map(fmt17).unwrap_or_default(),
                fmt17(r.theta_disagreement),
                r.graph_label.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    /// State dump CSV `t,agent,x_0..x_{d-1}`.
    /// `t,objective_gap,conservation_defect`, the per-row diagnostics that
    /// the trace CSV does not carry. A missing gap is an empty field.
    pub fn write_diagnostics_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["t", "objective_gap", "conservation_defect"])?;
        for r in &self.rows {
            wr.write_record([fmt17(r.t), r.objective_gap.map(fmt17).unwrap_or_default(), fmt17(r.conservation_defect)])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn write_states_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let d = self.states.first().map_or(0, |s| s.x.len());
        let mut header = vec!["t".to_string(), "agent".to_string()];
        header.extend((0..d).map(|k| format!("x_{k}")));
        wr.write_record(&header)?;
        for s in &self.states {
            let mut rec = vec![fmt17(s.t), s.agent.to_string()];
            rec.extend(s.x.iter().map(|v| fmt17(*v)));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads a trace CSV written by [`Trace::write_csv`]. Only the exported
    /// columns are recovered.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        if header != TRACE_HEADER {
            return Err(Error::Domain(format!("unexpected trace header {header:?}")));
        }
        let mut rows = Vec::new();
        let mut last_t = f64::NEG_INFINITY;
        for rec in rd.records() {
            let rec = rec?;
            let num = |k: usize| -> Result<f64> {
                let v: f64 = rec[k]
                    .trim()
                    .parse()
                    .map_err(|_| Error::Domain(format!("column {} is not a number: {:?}", TRACE_HEADER[k], &rec[k])))?;
                if !v.is_finite() {
                    return Err(Error::NonFinite("trace value"));
                }
                Ok(v)
            };
            let t = num(0)?;
            if !(t > last_t) {
                return Err(Error::Domain(format!("times must increase strictly, {t} follows {last_t}")));
            }
            last_t = t;
            let err = if rec[3].trim().is_empty() { None } else { Some(num(3)?) };
            let label = match rec[5].trim() {
                "line" => TopologyKind::Line,
                "ring" => TopologyKind::Ring,
                "star" => TopologyKind::Star,
                "custom" => TopologyKind::Custom,
                other => return Err(Error::Domain(format!("unknown graph label {other:?}"))),
            };
            let row = TraceRow {
                t,
                grad_sum_norm: num(1)?,
                max_disagreement: num(2)?,
                max_err_to_opt: err,
                theta_disagreement: num(4)?,
                graph_label: label,
                objective_gap: None,
                conservation_defect: 0.0,
            };
            let metrics = [Some(row.grad_sum_norm), Some(row.max_disagreement), row.max_err_to_opt, Some(row.theta_disagreement)];
            if metrics.into_iter().flatten().any(|v| v < 0.0) {
                return Err(Error::Domain(format!("negative metric at t = {t}")));
            }
            rows.push(row);
        }
        Ok(Self { rows, ..Self::default() })
    }
}

pub const TRACE_HEADER: [&str; 6] =
    ["t", "grad_sum_norm", "max_disagreement", "max_err_to_opt", "theta_disagreement", "graph_label"];

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Earliest recorded time at which `metric <= threshold`.
pub fn first_crossing(trace: &Trace, metric: Metric, threshold: f64) -> Result<Option<f64>> {
    if !trace.has(metric) {
        return Err(Error::UnknownMetric(format!("{metric} is not recorded in this trace")));
    }
    Ok(trace.rows.iter().find(|r| metric.of(r).is_some_and(|v| v <= threshold)).map(|r| r.t))
}

pub fn first_crossing_by_name(trace: &Trace, metric: &str, threshold: f64) -> Result<Option<f64>> {
    first_crossing(trace, metric.parse()?, threshold)
}

/// After `grad_sum_norm` first drops to `threshold`, it never exceeds
/// `factor` times its value at the crossing. `None` when it never crosses.
pub fn monotone_tail(trace: &Trace, threshold: f64, factor: f64) -> Option<bool> {
    let k = trace.rows.iter().position(|r| r.grad_sum_norm <= threshold)?;
    let base = trace.rows[k].grad_sum_norm;
    Some(trace.rows[k..].iter().all(|r| r.grad_sum_norm <= factor * base.max(f64::MIN_POSITIVE)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossingPair {
    pub metric: Metric,
    pub threshold: f64,
    pub a: Option<f64>,
    pub b: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    /// Times recorded by both traces.
    pub aligned_times: usize,
    /// `b / a` at the last aligned time, per metric.
    pub final_ratios: BTreeMap<String, f64>,
    pub crossings: Vec<CrossingPair>,
    /// Bit-identical rows.
    pub identical: bool,
}

/// Aligns two traces on their shared record times and compares metrics.
pub fn compare_runs(a: &Trace, b: &Trace, thresholds: &[(Metric, f64)]) -> Result<Comparison> {
    let metrics: Vec<Metric> = Metric::ALL.into_iter().filter(|m| a.has(*m)).collect();
    for m in Metric::ALL {
        if a.has(m) != b.has(m) {
            return Err(Error::IncompatibleTraces(format!("{m} is recorded in only one trace")));
        }
    }
    let mut pairs = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < a.rows.len() && j < b.rows.len() {
        let (ta, tb) = (a.rows[i].t, b.rows[j].t);
        let tol = 1e-9 * ta.abs().max(tb.abs()).max(1.0);
        if (ta - tb).abs() <= tol {
            pairs.push((i, j));
            i += 1;
            j += 1;
        } else if ta < tb {
            i += 1;
        } else {
            j += 1;
        }
    }
    let Some(&(li, lj)) = pairs.last() else {
        return Err(Error::IncompatibleTraces("no shared record times".into()));
    };
    let final_ratios = metrics
        .iter()
        .filter_map(|m| {
            let (va, vb) = (m.of(&a.rows[li])?, m.of(&b.rows[lj])?);
            Some((m.name().to_string(), vb / va))
        })
        .collect();
    let crossings = thresholds
        .iter()
        .map(|&(metric, threshold)| {
            Ok(CrossingPair { metric, threshold, a: first_crossing(a, metric, threshold)?, b: first_crossing(b, metric, threshold)? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Comparison { aligned_times: pairs.len(), final_ratios, crossings, identical: a.rows == b.rows && a.final_x == b.final_x })
}
