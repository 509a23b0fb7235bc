//! Decoupled velocity-controlled plant, training-data generation, closed-loop
//! filtered scenarios and the (α, ε) conservatism sweep.
//!
//! Each joint obeys `M q̈ = −K (q̇ − v_cmd) + d`, integrated with RK4 under a
//! zero-order hold on the command and the disturbance. With
//! `accel_feedforward` (default) a change of command is also applied to the
//! velocity at the start of the step, i.e. the inner loop knows the commanded
//! acceleration, so the tracking error `v_cmd − q̇` only evolves through
//! `ė = −(K/M) e − d/M`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cbf::{check_initial_set, h_q, safe_velocity, SafetySpec};
use crate::certify::Certificate;
use crate::dataio::{differentiate, fmt_f64, Dataset, Role, Trajectory};
use crate::error::{check_dim, Error, Result};
use crate::exec::{map_indexed, Execution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantConfig {
    pub n_joints: usize,
    pub inertia: Vec<f64>,
    pub velocity_gain: Vec<f64>,
    pub disturbance_bound: f64,
    pub dt: f64,
    pub seed: u64,
    pub accel_feedforward: bool,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            n_joints: 2,
            inertia: vec![1.0, 1.0],
            velocity_gain: vec![3.0, 5.0],
            disturbance_bound: 0.0,
            dt: 0.008,
            seed: 0,
            accel_feedforward: true,
        }
    }
}

impl PlantConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_joints == 0 {
            return Err(Error::domain("n_joints must be >= 1"));
        }
        check_dim(self.n_joints, self.inertia.len())?;
        check_dim(self.n_joints, self.velocity_gain.len())?;
        if self.inertia.iter().any(|m| !(*m > 0.0 && m.is_finite())) {
            return Err(Error::domain("inertia entries must be > 0"));
        }
        if self.velocity_gain.iter().any(|k| !(*k > 0.0 && k.is_finite())) {
            return Err(Error::domain("velocity_gain entries must be > 0"));
        }
        if !(self.disturbance_bound >= 0.0 && self.disturbance_bound.is_finite()) {
            return Err(Error::domain("disturbance_bound must be >= 0"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::domain("dt must be > 0"));
        }
        let stiff = self.rates().into_iter().fold(0.0, f64::max) * self.dt;
        if stiff >= 0.5 {
            return Err(Error::domain(format!(
                "dt·max(K/M) = {stiff} must stay below 0.5"
            )));
        }
        Ok(())
    }

    /// Per-joint error contraction rates `K_i / M_i`.
    pub fn rates(&self) -> Vec<f64> {
        self.velocity_gain.iter().zip(&self.inertia).map(|(k, m)| k / m).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
    /// Command held during the previous step.
    pub cmd_prev: Vec<f64>,
}

impl PlantState {
    /// State whose previous command equals its current velocity.
    pub fn new(q: Vec<f64>, qdot: Vec<f64>) -> Self {
        Self { cmd_prev: qdot.clone(), q, qdot }
    }

    pub fn at_rest(q: Vec<f64>) -> Self {
        let n = q.len();
        Self::new(q, vec![0.0; n])
    }
}

/// Advances the plant by one control period.
pub fn step<R: Rng + ?Sized>(state: &PlantState, v_cmd: &[f64], cfg: &PlantConfig, rng: &mut R) -> Result<PlantState> {
    let n = cfg.n_joints;
    check_dim(n, state.q.len())?;
    check_dim(n, state.qdot.len())?;
    check_dim(n, v_cmd.len())?;
    let dt = cfg.dt;
    let mut q = state.q.clone();
    let mut qdot = state.qdot.clone();
    for i in 0..n {
        let d = if cfg.disturbance_bound > 0.0 {
            rng.gen_range(-cfg.disturbance_bound..=cfg.disturbance_bound)
        } else {
            0.0
        };
        if cfg.accel_feedforward {
            qdot[i] += v_cmd[i] - state.cmd_prev.get(i).copied().unwrap_or(v_cmd[i]);
        }
        let (k, m, v) = (cfg.velocity_gain[i], cfg.inertia[i], v_cmd[i]);
        let acc = |w: f64| (-k * (w - v) + d) / m;
        let (p0, w0) = (q[i], qdot[i]);
        let (k1p, k1w) = (w0, acc(w0));
        let w1 = w0 + 0.5 * dt * k1w;
        let (k2p, k2w) = (w1, acc(w1));
        let w2 = w0 + 0.5 * dt * k2w;
        let (k3p, k3w) = (w2, acc(w2));
        let w3 = w0 + dt * k3w;
        let (k4p, k4w) = (w3, acc(w3));
        q[i] = p0 + dt / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p);
        qdot[i] = w0 + dt / 6.0 * (k1w + 2.0 * k2w + 2.0 * k3w + k4w);
    }
    Ok(PlantState { q, qdot, cmd_prev: v_cmd.to_vec() })
}

fn rollout_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataGenConfig {
    pub plant: PlantConfig,
    pub n_trajectories: usize,
    pub duration: f64,
    pub reference_velocity: Vec<f64>,
    /// Initial joint velocities are drawn from `Unif([lo, hi]^n)`.
    pub initial_velocity_range: [f64; 2],
    pub execution: Execution,
}

impl Default for DataGenConfig {
    fn default() -> Self {
        Self {
            plant: PlantConfig::default(),
            n_trajectories: 99,
            duration: 1.0,
            reference_velocity: vec![0.5, 0.5],
            initial_velocity_range: [0.0, 1.0],
            execution: Execution::default(),
        }
    }
}

impl DataGenConfig {
    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        if self.n_trajectories == 0 {
            return Err(Error::domain("n must be >= 1"));
        }
        check_dim(self.plant.n_joints, self.reference_velocity.len())?;
        let [lo, hi] = self.initial_velocity_range;
        if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
            return Err(Error::domain("initial_velocity_range must satisfy lo <= hi"));
        }
        if !(self.duration >= 2.0 * self.plant.dt) {
            return Err(Error::domain("duration must cover at least 3 samples"));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.plant.dt).round() as usize
    }
}

/// Tracking-error trajectories `ė = q̇_ref − q̇` from uniformly drawn initial
/// velocities, with central-difference derivatives attached.
pub fn generate_training_data(cfg: &DataGenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let plant = &cfg.plant;
    let n = plant.n_joints;
    let steps = cfg.steps();
    let [lo, hi] = cfg.initial_velocity_range;
    let trajectories = map_indexed(cfg.n_trajectories, cfg.execution, |idx| {
        let mut rng = rollout_rng(plant.seed, idx as u64);
        let qdot0: Vec<f64> = (0..n).map(|_| if lo < hi { rng.gen_range(lo..hi) } else { lo }).collect();
        let mut state = PlantState {
            q: vec![0.0; n],
            qdot: qdot0,
            cmd_prev: cfg.reference_velocity.clone(),
        };
        let error = |s: &PlantState| -> Vec<f64> {
            cfg.reference_velocity.iter().zip(&s.qdot).map(|(r, v)| r - v).collect()
        };
        let mut states = Vec::with_capacity(steps + 1);
        states.push(error(&state));
        for _ in 0..steps {
            state = step(&state, &cfg.reference_velocity, plant, &mut rng)?;
            states.push(error(&state));
        }
        let traj = Trajectory::from_states(plant.dt, states, format!("traj_{idx:03}"))?;
        differentiate(&traj)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Dataset::new(trajectories, Role::Train)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub t: f64,
    pub q: Vec<f64>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub plant: PlantConfig,
    pub spec: SafetySpec,
    /// Piecewise-linear position reference, held before the first and after
    /// the last waypoint.
    pub waypoints: Vec<Waypoint>,
    pub k_p: f64,
    pub duration: f64,
    pub seed: u64,
    /// Defaults to the first waypoint.
    #[serde(default)]
    pub initial_q: Option<Vec<f64>>,
    /// Defaults to rest.
    #[serde(default)]
    pub initial_qdot: Option<Vec<f64>>,
    #[serde(default = "default_true")]
    pub filter_enabled: bool,
    /// Added to the initial-set check.
    #[serde(default)]
    pub d_margin: f64,
}

impl Default for ScenarioConfig {
    /// Two joints sweeping a straight line that clips one obstacle and ends
    /// inside another, with `d̄ = 0.05`.
    fn default() -> Self {
        use crate::cbf::Obstacle;
        Self {
            plant: PlantConfig { disturbance_bound: 0.05, ..PlantConfig::default() },
            spec: SafetySpec {
                obstacles: vec![
                    Obstacle { center: vec![0.55, 0.35], radius: 0.15 },
                    Obstacle { center: vec![1.0, 0.8], radius: 0.2 },
                ],
                alpha: 1.0,
                epsilon: 0.0,
                c_h: 1.0,
            },
            waypoints: vec![
                Waypoint { t: 0.0, q: vec![0.0, 0.0] },
                Waypoint { t: 3.0, q: vec![1.0, 0.8] },
            ],
            k_p: 1.5,
            duration: 8.0,
            seed: 0,
            initial_q: None,
            initial_qdot: None,
            filter_enabled: true,
            d_margin: 0.0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        self.spec.validate()?;
        let n = self.plant.n_joints;
        for o in &self.spec.obstacles {
            check_dim(n, o.center.len())?;
        }
        if self.waypoints.is_empty() {
            return Err(Error::domain("at least one waypoint is required"));
        }
        for w in self.waypoints.windows(2) {
            if !(w[1].t > w[0].t) {
                return Err(Error::domain("waypoint times must be strictly increasing"));
            }
        }
        for w in &self.waypoints {
            check_dim(n, w.q.len())?;
        }
        if let Some(q) = &self.initial_q {
            check_dim(n, q.len())?;
        }
        if let Some(v) = &self.initial_qdot {
            check_dim(n, v.len())?;
        }
        if !(self.k_p > 0.0 && self.k_p.is_finite()) {
            return Err(Error::domain("k_p must be > 0"));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::domain("duration must be > 0"));
        }
        Ok(())
    }

    pub fn reference_at(&self, t: f64) -> Vec<f64> {
        let wp = &self.waypoints;
        if t <= wp[0].t {
            return wp[0].q.clone();
        }
        for w in wp.windows(2) {
            if t <= w[1].t {
                let s = (t - w[0].t) / (w[1].t - w[0].t);
                return w[0].q.iter().zip(&w[1].q).map(|(a, b)| a + s * (b - a)).collect();
            }
        }
        wp[wp.len() - 1].q.clone()
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.plant.dt).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FilterEvent {
    Infeasible { t: f64, active: Vec<usize> },
    SingularGradient { t: f64, obstacle: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
    pub v_cmd: Vec<f64>,
    pub h: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub min_h: f64,
    pub violated: bool,
    pub filter_activity: f64,
    pub max_speed: f64,
    pub steps: usize,
    pub initial_set_ok: Option<bool>,
    pub events: Vec<FilterEvent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioResult {
    pub trace: Vec<TraceRow>,
    pub min_h: f64,
    pub violated: bool,
    /// Fraction of steps whose command was modified by the filter.
    pub filter_activity: f64,
    /// Largest joint speed `‖q̇‖` seen along the run.
    pub max_speed: f64,
    pub dt: f64,
    pub initial_set_ok: Option<bool>,
    pub events: Vec<FilterEvent>,
}

impl ScenarioResult {
    /// Discrete-time tolerance `‖q̇‖_max · dt` on `min_h`.
    pub fn tolerance(&self) -> f64 {
        self.max_speed * self.dt
    }

    pub fn halted(&self) -> bool {
        !self.events.is_empty()
    }

    pub fn summary(&self) -> ScenarioSummary {
        ScenarioSummary {
            min_h: self.min_h,
            violated: self.violated,
            filter_activity: self.filter_activity,
            max_speed: self.max_speed,
            steps: self.trace.len().saturating_sub(1),
            initial_set_ok: self.initial_set_ok,
            events: self.events.clone(),
        }
    }

    /// CSV with header `t,x*,dx*,v*,h*`: positions, velocities (the
    /// derivative of the positions), commands and per-obstacle `h`.
    pub fn write_trace_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let Some(first) = self.trace.first() else {
            return Ok(());
        };
        let n = first.q.len();
        let mut cols = vec!["t".to_string()];
        cols.extend((0..n).map(|i| format!("x{i}")));
        cols.extend((0..n).map(|i| format!("dx{i}")));
        cols.extend((0..n).map(|i| format!("v{i}")));
        cols.extend((0..first.h.len()).map(|i| format!("h{i}")));
        let mut out = cols.join(",");
        out.push('\n');
        for r in &self.trace {
            out.push_str(&fmt_f64(r.t));
            for v in r.q.iter().chain(&r.qdot).chain(&r.v_cmd).chain(&r.h) {
                out.push(',');
                out.push_str(&fmt_f64(*v));
            }
            out.push('\n');
        }
        w.write_all(out.as_bytes()).map_err(|e| Error::io("scenario trace", e))
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn h_all(q: &[f64], spec: &SafetySpec) -> Result<Vec<f64>> {
    spec.obstacles.iter().map(|o| h_q(q, o)).collect()
}

/// Runs `v_ref = k_p (q_ref − q)` through the safety filter and the plant.
///
/// A filter failure (infeasible constraints or a state on an obstacle
/// center) is recorded as an event; the command is set to zero and the run
/// stops.
pub fn run_scenario(cfg: &ScenarioConfig, cert: Option<&Certificate>) -> Result<ScenarioResult> {
    cfg.validate()?;
    let n = cfg.plant.n_joints;
    let dt = cfg.plant.dt;
    let mut rng = rollout_rng(cfg.seed, 0);
    let q0 = cfg.initial_q.clone().unwrap_or_else(|| cfg.waypoints[0].q.clone());
    let qdot0 = cfg.initial_qdot.clone().unwrap_or_else(|| vec![0.0; n]);
    let command = |q: &[f64], t: f64| -> Vec<f64> {
        cfg.reference_at(t).iter().zip(q).map(|(r, x)| cfg.k_p * (r - x)).collect()
    };
    // The loop is engaged at t = 0: the first command is treated as already held.
    let mut state = PlantState { cmd_prev: command(&q0, 0.0), q: q0, qdot: qdot0 };

    let initial_set_ok = match cert {
        Some(c) => {
            let e0: Vec<f64> = state.cmd_prev.iter().zip(&state.qdot).map(|(v, w)| v - w).collect();
            match check_initial_set(&state.q, &e0, &c.candidate, &cfg.spec, c.lambda_best, cfg.d_margin) {
                Ok(ok) => {
                    if !ok {
                        log::warn!("initial state lies outside the certified safe set");
                    }
                    Some(ok)
                }
                Err(e) => {
                    log::warn!("initial-set check skipped: {e}");
                    None
                }
            }
        }
        None => None,
    };

    let steps = cfg.steps();
    let mut trace = Vec::with_capacity(steps + 1);
    let mut events = Vec::new();
    let mut modified_steps = 0usize;
    let mut min_h = f64::INFINITY;
    let mut max_speed: f64 = 0.0;

    for k in 0..=steps {
        let t = k as f64 * dt;
        let h = h_all(&state.q, &cfg.spec)?;
        min_h = h.iter().copied().fold(min_h, f64::min);
        max_speed = max_speed.max(norm(&state.qdot));
        let v_ref = command(&state.q, t);
        let mut v = v_ref.clone();
        let mut halt = false;
        if cfg.filter_enabled && k < steps {
            match safe_velocity(&state.q, &v_ref, &cfg.spec) {
                Ok(r) => {
                    if r.modified {
                        modified_steps += 1;
                    }
                    v = r.v_safe;
                }
                Err(Error::Infeasible { active }) => {
                    log::warn!("safety filter infeasible at t = {t}");
                    events.push(FilterEvent::Infeasible { t, active });
                    halt = true;
                }
                Err(Error::SingularGradient { index }) => {
                    log::warn!("state on obstacle {index} center at t = {t}");
                    events.push(FilterEvent::SingularGradient { t, obstacle: index });
                    halt = true;
                }
                Err(e) => return Err(e),
            }
        }
        if halt {
            v = vec![0.0; n];
        }
        trace.push(TraceRow {
            t,
            q: state.q.clone(),
            qdot: state.qdot.clone(),
            v_cmd: v.clone(),
            h,
        });
        if halt || k == steps {
            break;
        }
        state = step(&state, &v, &cfg.plant, &mut rng)?;
    }

    let filter_activity = if steps == 0 { 0.0 } else { modified_steps as f64 / steps as f64 };
    Ok(ScenarioResult {
        trace,
        min_h,
        violated: min_h < 0.0,
        filter_activity,
        max_speed,
        dt,
        initial_set_ok,
        events,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub alpha: f64,
    pub epsilon: f64,
    pub min_h: Option<f64>,
    pub tolerance: Option<f64>,
    pub error: Option<String>,
}

/// `min_h` over an α × ε grid; rows follow `alphas`, columns `epsilons`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub alphas: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub cells: Vec<Vec<SweepCell>>,
}

fn ascending(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

pub fn sweep_table(
    base: &ScenarioConfig,
    alphas: &[f64],
    epsilons: &[f64],
    cert: Option<&Certificate>,
    mode: Execution,
) -> Result<SweepTable> {
    if alphas.is_empty() || epsilons.is_empty() {
        return Err(Error::domain("sweep grids must be non-empty"));
    }
    if !ascending(alphas) || !ascending(epsilons) {
        return Err(Error::domain("sweep grids must be strictly ascending"));
    }
    let ne = epsilons.len();
    let flat = map_indexed(alphas.len() * ne, mode, |idx| {
        let (alpha, epsilon) = (alphas[idx / ne], epsilons[idx % ne]);
        let outcome = base
            .spec
            .with_params(alpha, epsilon)
            .and_then(|spec| run_scenario(&ScenarioConfig { spec, ..base.clone() }, cert));
        match outcome {
            Ok(r) if !r.halted() => SweepCell {
                alpha,
                epsilon,
                min_h: Some(r.min_h),
                tolerance: Some(r.tolerance()),
                error: None,
            },
            Ok(r) => SweepCell {
                alpha,
                epsilon,
                min_h: Some(r.min_h),
                tolerance: Some(r.tolerance()),
                error: Some(format!("filter halted: {:?}", r.events)),
            },
            Err(e) => SweepCell { alpha, epsilon, min_h: None, tolerance: None, error: Some(e.to_string()) },
        }
    });
    let mut cells = Vec::with_capacity(alphas.len());
    let mut it = flat.into_iter();
    for _ in alphas {
        cells.push(it.by_ref().take(ne).collect());
    }
    Ok(SweepTable { alphas: alphas.to_vec(), epsilons: epsilons.to_vec(), cells })
}

impl SweepTable {
    pub fn min_h(&self, i: usize, j: usize) -> Option<f64> {
        let c = &self.cells[i][j];
        if c.error.is_some() {
            None
        } else {
            c.min_h
        }
    }

    pub fn failed_cells(&self) -> usize {
        self.cells.iter().flatten().filter(|c| c.error.is_some()).count()
    }

    /// `min_h` does not increase with α at any fixed ε (ties within `tol`).
    pub fn alpha_monotone(&self, tol: f64) -> bool {
        (0..self.epsilons.len()).all(|j| {
            (1..self.alphas.len()).all(|i| match (self.min_h(i - 1, j), self.min_h(i, j)) {
                (Some(a), Some(b)) => b <= a + tol,
                _ => false,
            })
        })
    }

    /// `min_h` does not decrease with ε at any fixed α (ties within `tol`).
    pub fn epsilon_monotone(&self, tol: f64) -> bool {
        (0..self.alphas.len()).all(|i| {
            (1..self.epsilons.len()).all(|j| match (self.min_h(i, j - 1), self.min_h(i, j)) {
                (Some(a), Some(b)) => b + tol >= a,
                _ => false,
            })
        })
    }

    /// Matrix CSV: header `alpha,eps=<ε>...`, one line per α; failed cells are empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha");
        for e in &self.epsilons {
            out.push_str(&format!(",eps={e}"));
        }
        out.push('\n');
        for (i, a) in self.alphas.iter().enumerate() {
            out.push_str(&a.to_string());
            for j in 0..self.epsilons.len() {
                out.push(',');
                if let Some(v) = self.min_h(i, j) {
                    out.push_str(&fmt_f64(v));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn verdict_lines(&self, tol: f64) -> Vec<String> {
        let word = |ok: bool| if ok { "PASS" } else { "FAIL" };
        vec![
            format!("alpha-monotone (min_h non-increasing in alpha): {}", word(self.alpha_monotone(tol))),
            format!("epsilon-monotone (min_h non-decreasing in epsilon): {}", word(self.epsilon_monotone(tol))),
            format!("failed cells: {}", self.failed_cells()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cbf::Obstacle;
    use proptest::prelude::*;

    fn scalar(k: f64) -> PlantConfig {
        PlantConfig {
            n_joints: 1,
            inertia: vec![1.0],
            velocity_gain: vec![k],
            ..PlantConfig::default()
        }
    }

    #[test]
    fn equilibrium_velocity_is_kept() {
        let cfg = PlantConfig::default();
        let mut rng = rollout_rng(0, 0);
        let s = PlantState::new(vec![0.1, -0.2], vec![0.3, 0.7]);
        let next = step(&s, &[0.3, 0.7], &cfg, &mut rng).unwrap();
        assert_eq!(next.qdot, vec![0.3, 0.7]);
        assert!((next.q[0] - (0.1 + 0.3 * cfg.dt)).abs() < 1e-15);
        assert!((next.q[1] - (-0.2 + 0.7 * cfg.dt)).abs() < 1e-15);
    }

    #[test]
    fn error_contracts_at_the_analytic_rate() {
        for ff in [true, false] {
            let cfg = PlantConfig { accel_feedforward: ff, ..scalar(3.0) };
            let mut rng = rollout_rng(0, 0);
            let s = PlantState { q: vec![0.0], qdot: vec![0.0], cmd_prev: vec![1.0] };
            let next = step(&s, &[1.0], &cfg, &mut rng).unwrap();
            let ratio = (1.0 - next.qdot[0]) / 1.0;
            let exact = (-3.0 * cfg.dt).exp();
            assert!((ratio - exact).abs() < 1e-10, "{ratio} vs {exact}");
        }
    }

    #[test]
    fn feedforward_applies_command_change() {
        let cfg = scalar(3.0);
        let mut rng = rollout_rng(0, 0);
        let s = PlantState::new(vec![0.0], vec![0.2]);
        let next = step(&s, &[1.0], &cfg, &mut rng).unwrap();
        assert!((next.qdot[0] - 1.0).abs() < 1e-15);
        let lagged = step(&s, &[1.0], &PlantConfig { accel_feedforward: false, ..cfg }, &mut rng).unwrap();
        assert!(lagged.qdot[0] < 0.3);
    }

    #[test]
    fn disturbance_stays_in_iss_ball() {
        let k = 3.0;
        let cfg = PlantConfig { disturbance_bound: 0.3, ..scalar(k) };
        let mut rng = rollout_rng(7, 0);
        let mut s = PlantState::new(vec![0.0], vec![0.0]);
        let mut worst: f64 = 0.0;
        for i in 0..5000 {
            s = step(&s, &[0.0], &cfg, &mut rng).unwrap();
            if i > 1000 {
                worst = worst.max(s.qdot[0].abs());
            }
        }
        assert!(worst <= 0.3 / k + 1e-12, "{worst}");
        assert!(worst > 0.0);
    }

    #[test]
    fn coasting_never_speeds_up() {
        for ff in [true, false] {
            let cfg = PlantConfig { accel_feedforward: ff, ..PlantConfig::default() };
            let mut rng = rollout_rng(0, 0);
            let mut s = PlantState::new(vec![0.0, 0.0], vec![0.8, -0.6]);
            let mut prev = norm(&s.qdot);
            for _ in 0..500 {
                s = step(&s, &[0.0, 0.0], &cfg, &mut rng).unwrap();
                let now = norm(&s.qdot);
                assert!(now <= prev);
                prev = now;
            }
        }
    }

    #[test]
    fn plant_validation() {
        assert!(PlantConfig::default().validate().is_ok());
        assert!(PlantConfig { dt: 0.2, ..PlantConfig::default() }.validate().is_err());
        assert!(PlantConfig { inertia: vec![1.0], ..PlantConfig::default() }.validate().is_err());
        assert!(PlantConfig { disturbance_bound: -1.0, ..PlantConfig::default() }.validate().is_err());
    }

    fn small_gen(seed: u64) -> DataGenConfig {
        DataGenConfig {
            plant: PlantConfig { seed, ..PlantConfig::default() },
            n_trajectories: 6,
            duration: 0.5,
            ..DataGenConfig::default()
        }
    }

    #[test]
    fn training_errors_contract() {
        let ds = generate_training_data(&small_gen(1)).unwrap();
        assert_eq!(ds.len(), 6);
        assert!(ds.has_derivatives());
        for tr in ds.trajectories() {
            let norms: Vec<f64> = tr.samples().iter().map(|s| norm(&s.x)).collect();
            assert!(norms.windows(2).all(|w| w[1] < w[0]));
        }
    }

    #[test]
    fn default_generation_mirrors_training_count() {
        let cfg = DataGenConfig { duration: 0.05, ..DataGenConfig::default() };
        assert_eq!(generate_training_data(&cfg).unwrap().len(), 99);
        assert!(generate_training_data(&DataGenConfig { n_trajectories: 0, ..cfg }).is_err());
    }

    #[test]
    fn generation_is_deterministic_across_modes() {
        let a = generate_training_data(&DataGenConfig { execution: Execution::Sequential, ..small_gen(3) }).unwrap();
        let b = generate_training_data(&DataGenConfig { execution: Execution::Parallel, ..small_gen(3) }).unwrap();
        assert_eq!(a.trajectories(), b.trajectories());
        let c = generate_training_data(&small_gen(4)).unwrap();
        assert_ne!(a.trajectories(), c.trajectories());
    }

    fn far_scenario() -> ScenarioConfig {
        ScenarioConfig {
            spec: SafetySpec::new(vec![Obstacle::new(vec![5.0, 5.0], 0.5).unwrap()], 1.0, 0.0).unwrap(),
            duration: 2.0,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn far_reference_leaves_filter_idle() {
        let r = run_scenario(&far_scenario(), None).unwrap();
        assert_eq!(r.filter_activity, 0.0);
        assert!(r.min_h > 0.0 && !r.violated);
        assert_eq!(r.trace.len(), far_scenario().steps() + 1);
    }

    #[test]
    fn recorded_h_matches_positions() {
        let cfg = ScenarioConfig::default();
        let r = run_scenario(&cfg, None).unwrap();
        for row in r.trace.iter().step_by(37) {
            for (o, h) in cfg.spec.obstacles.iter().zip(&row.h) {
                assert_eq!(*h, h_q(&row.q, o).unwrap());
            }
        }
        assert_eq!(r.violated, r.min_h < 0.0);
    }

    #[test]
    fn filter_keeps_invading_reference_out() {
        let cfg = ScenarioConfig::default();
        let on = run_scenario(&cfg, None).unwrap();
        assert!(on.min_h >= -on.tolerance(), "{}", on.min_h);
        assert!(on.filter_activity > 0.0);
        let off = run_scenario(&ScenarioConfig { filter_enabled: false, ..cfg }, None).unwrap();
        assert!(off.violated);
    }

    #[test]
    fn scenarios_are_deterministic() {
        let a = run_scenario(&ScenarioConfig::default(), None).unwrap();
        let b = run_scenario(&ScenarioConfig::default(), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn singular_state_halts_with_zero_command() {
        let mut cfg = far_scenario();
        cfg.initial_q = Some(vec![5.0, 5.0]);
        let r = run_scenario(&cfg, None).unwrap();
        assert!(r.halted());
        assert_eq!(r.trace.len(), 1);
        assert_eq!(r.trace[0].v_cmd, vec![0.0, 0.0]);
        assert!(matches!(r.events[0], FilterEvent::SingularGradient { obstacle: 0, .. }));
    }

    #[test]
    fn conflicting_obstacles_halt_the_run() {
        // Two overlapping obstacles squeeze q from both sides beyond recovery.
        let mut cfg = far_scenario();
        cfg.spec = SafetySpec::new(
            vec![
                Obstacle::new(vec![-0.5, 0.0], 0.6).unwrap(),
                Obstacle::new(vec![0.5, 0.0], 0.6).unwrap(),
            ],
            1.0,
            0.0,
        )
        .unwrap();
        cfg.initial_q = Some(vec![0.0, 0.0]);
        cfg.waypoints = vec![Waypoint { t: 0.0, q: vec![0.0, 0.0] }];
        let r = run_scenario(&cfg, None).unwrap();
        assert!(matches!(r.events.first(), Some(FilterEvent::Infeasible { .. })), "{:?}", r.events);
    }

    #[test]
    fn reference_interpolates_linearly() {
        let cfg = ScenarioConfig::default();
        assert_eq!(cfg.reference_at(-1.0), vec![0.0, 0.0]);
        assert_eq!(cfg.reference_at(1.5), vec![0.5, 0.4]);
        assert_eq!(cfg.reference_at(10.0), vec![1.0, 0.8]);
    }

    #[test]
    fn trace_csv_has_h_columns() {
        let r = run_scenario(&far_scenario(), None).unwrap();
        let mut buf = Vec::new();
        r.write_trace_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,x0,x1,dx0,dx1,v0,v1,h0\n"));
        assert_eq!(text.lines().count(), r.trace.len() + 1);
        let summary = serde_json::to_value(r.summary()).unwrap();
        for k in ["min_h", "violated", "filter_activity"] {
            assert!(summary.get(k).is_some());
        }
    }

    #[test]
    fn sweep_reports_monotone_structure() {
        let base = ScenarioConfig { duration: 5.0, ..ScenarioConfig::default() };
        let t = sweep_table(&base, &[0.5, 1.0, 2.0], &[0.03, 0.06], None, Execution::Parallel).unwrap();
        assert_eq!(t.failed_cells(), 0);
        assert!(t.alpha_monotone(1e-4));
        assert!(t.epsilon_monotone(1e-4));
        let csv = t.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(sweep_table(&base, &[1.0, 0.5], &[0.0], None, Execution::Sequential).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn undisturbed_error_norm_decreases(v0 in prop::collection::vec(-2.0f64..2.0, 2), target in prop::collection::vec(-2.0f64..2.0, 2)) {
            prop_assume!(norm(&[v0[0] - target[0], v0[1] - target[1]]) > 1e-6);
            let cfg = PlantConfig::default();
            let mut rng = rollout_rng(0, 0);
            let mut s = PlantState { q: vec![0.0, 0.0], qdot: v0, cmd_prev: target.clone() };
            let err = |s: &PlantState| norm(&[target[0] - s.qdot[0], target[1] - s.qdot[1]]);
            let mut prev = err(&s);
            for _ in 0..50 {
                s = step(&s, &target, &cfg, &mut rng).unwrap();
                let now = err(&s);
                prop_assert!(now < prev);
                prev = now;
            }
        }
    }
}
