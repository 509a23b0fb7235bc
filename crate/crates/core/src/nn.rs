//! Multilayer perceptron producing a Cholesky factor, trained on the hinge
//! loss `mean(max(0, V̇ + λV + γ))`.
//!
//! The network maps an input of width `2n` through two rectified hidden
//! layers of width 32 to `n(n+1)/2` raw outputs. The first `n` raw outputs
//! are the diagonal of `L` and pass through softplus; the remaining ones are
//! the strictly-lower entries in row-major order and are used as-is.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::lyapunov::{tri_len, CholeskyFactor, LyapunovCandidate};

pub const HIDDEN_WIDTH: usize = 32;
const FD_STEP: f64 = 1e-5;
const REL_ERR_FLOOR: f64 = 1e-7;

#[inline]
fn softplus(t: f64) -> f64 {
    let v = if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    };
    // exp underflows below t ≈ -745; keep the diagonal strictly positive.
    v.max(f64::MIN_POSITIVE)
}

#[inline]
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Candidate with `P = L Lᵀ + μ (‖L‖²_F / n) I`; `μ = 0` gives `P = L Lᵀ`.
///
/// The shift is relative to the scale of `L`, so the condition number of `P`
/// stays below `n/μ + 1` however the network scales its output.
pub fn floored(factor: &CholeskyFactor, spectral_floor: f64) -> Result<LyapunovCandidate> {
    if spectral_floor == 0.0 {
        return Ok(LyapunovCandidate::new(factor.clone()));
    }
    let shift = spectral_floor * factor.frobenius_sq() / factor.dim() as f64;
    Ok(LyapunovCandidate::new(factor.shifted(shift)?))
}

/// Adds the floor's contribution `(μ/n) tr(S) I` to a loss-weight matrix `S`.
fn add_floor_term(s: &mut [f64], n: usize, spectral_floor: f64) {
    if spectral_floor == 0.0 {
        return;
    }
    let tr: f64 = (0..n).map(|i| s[i * n + i]).sum();
    for i in 0..n {
        s[i * n + i] += spectral_floor / n as f64 * tr;
    }
}

/// Maps raw network outputs to a Cholesky factor (diagonal slots first).
pub fn assemble_l(raw: &[f64], n: usize) -> Result<CholeskyFactor> {
    let expected = tri_len(n);
    if raw.len() != expected {
        return Err(Error::RawLength { n, expected, actual: raw.len() });
    }
    let mut entries = vec![0.0; expected];
    let mut off = n;
    let mut k = 0;
    for i in 0..n {
        for j in 0..=i {
            entries[k] = if i == j {
                softplus(raw[i])
            } else {
                off += 1;
                raw[off - 1]
            };
            k += 1;
        }
    }
    CholeskyFactor::new(n, entries)
}

/// Backpropagates `∂loss/∂L` (row-major lower-triangular entries) to the raw outputs.
fn raw_gradient(raw: &[f64], n: usize, d_l: &[f64], d_raw: &mut [f64]) {
    let mut off = n;
    let mut k = 0;
    for i in 0..n {
        for j in 0..=i {
            if i == j {
                d_raw[i] = d_l[k] * sigmoid(raw[i]);
            } else {
                d_raw[off] = d_l[k];
                off += 1;
            }
            k += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    fn init<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let weights = (0..inputs * outputs).map(|_| dist.sample(rng)).collect();
        let biases = (0..outputs).map(|_| dist.sample(rng)).collect();
        Self { inputs, outputs, weights, biases }
    }

    fn apply(&self, input: &[f64], out: &mut [f64]) {
        for (o, slot) in out.iter_mut().enumerate() {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            *slot = self.biases[o] + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
        }
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }
}

/// Weights and biases of the three dense layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    state_dim: usize,
    layers: [Dense; 3],
}

struct Forward {
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    a2: Vec<f64>,
    raw: Vec<f64>,
}

impl NetworkParams {
    /// Uniform `±1/√fan_in` initialisation for a state of dimension `n`.
    pub fn init<R: Rng>(n: usize, rng: &mut R) -> Self {
        let d_in = 2 * n;
        Self {
            state_dim: n,
            layers: [
                Dense::init(d_in, HIDDEN_WIDTH, rng),
                Dense::init(HIDDEN_WIDTH, HIDDEN_WIDTH, rng),
                Dense::init(HIDDEN_WIDTH, tri_len(n), rng),
            ],
        }
    }

    pub fn seeded(n: usize, seed: u64) -> Self {
        Self::init(n, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn input_dim(&self) -> usize {
        2 * self.state_dim
    }

    pub fn layers(&self) -> &[Dense; 3] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    /// Parameters flattened layer by layer, weights before biases.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut k = 0;
        for l in &mut self.layers {
            let (w, b) = (l.weights.len(), l.biases.len());
            l.weights.copy_from_slice(&flat[k..k + w]);
            l.biases.copy_from_slice(&flat[k + w..k + w + b]);
            k += w + b;
        }
    }

    fn for_each_param_mut(&mut self, mut f: impl FnMut(usize, &mut f64)) {
        let mut k = 0;
        for l in &mut self.layers {
            for p in l.weights.iter_mut().chain(l.biases.iter_mut()) {
                f(k, p);
                k += 1;
            }
        }
    }

    fn forward(&self, input: &[f64]) -> Forward {
        let [l1, l2, l3] = &self.layers;
        let mut z1 = vec![0.0; l1.outputs];
        l1.apply(input, &mut z1);
        let a1: Vec<f64> = z1.iter().map(|v| v.max(0.0)).collect();
        let mut z2 = vec![0.0; l2.outputs];
        l2.apply(&a1, &mut z2);
        let a2: Vec<f64> = z2.iter().map(|v| v.max(0.0)).collect();
        let mut raw = vec![0.0; l3.outputs];
        l3.apply(&a2, &mut raw);
        Forward { z1, a1, z2, a2, raw }
    }

    /// Accumulates `∂loss/∂params` into `grad` given `∂loss/∂raw`.
    fn backward(&self, input: &[f64], fwd: &Forward, d_raw: &[f64], grad: &mut [f64]) {
        let [l1, l2, l3] = &self.layers;
        let o1 = 0;
        let o2 = l1.param_count();
        let o3 = o2 + l2.param_count();

        let mut d_a2 = vec![0.0; l3.inputs];
        for (o, &g) in d_raw.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = o * l3.inputs;
            for i in 0..l3.inputs {
                grad[o3 + row + i] += g * fwd.a2[i];
                d_a2[i] += g * l3.weights[row + i];
            }
            grad[o3 + l3.weights.len() + o] += g;
        }

        let d_z2: Vec<f64> = d_a2
            .iter()
            .zip(&fwd.z2)
            .map(|(g, z)| if *z > 0.0 { *g } else { 0.0 })
            .collect();
        let mut d_a1 = vec![0.0; l2.inputs];
        for (o, &g) in d_z2.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = o * l2.inputs;
            for i in 0..l2.inputs {
                grad[o2 + row + i] += g * fwd.a1[i];
                d_a1[i] += g * l2.weights[row + i];
            }
            grad[o2 + l2.weights.len() + o] += g;
        }

        for (o, (&g, z)) in d_a1.iter().zip(&fwd.z1).enumerate() {
            if *z <= 0.0 || g == 0.0 {
                continue;
            }
            let row = o * l1.inputs;
            for i in 0..l1.inputs {
                grad[o1 + row + i] += g * input[i];
            }
            grad[o1 + l1.weights.len() + o] += g;
        }
    }

    pub fn raw_output(&self, input: &[f64]) -> Vec<f64> {
        self.forward(input).raw
    }

    /// The candidate produced for a given network input.
    pub fn candidate_for(&self, input: &[f64], spectral_floor: f64) -> Result<LyapunovCandidate> {
        floored(&assemble_l(&self.raw_output(input), self.state_dim)?, spectral_floor)
    }

    /// The candidate in [`InputMode::Constant`] (all-ones input).
    pub fn constant_candidate(&self, spectral_floor: f64) -> Result<LyapunovCandidate> {
        self.candidate_for(&vec![1.0; self.input_dim()], spectral_floor)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputMode {
    /// The network sees a fixed all-ones token, so `L` depends only on the weights.
    #[default]
    Constant,
    /// The network sees `(x, ẋ)` of every sample; the final `L` is picked among
    /// the per-sample factors and re-verified as a single fixed form.
    PerSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    GradientDescent,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

struct OptimizerState {
    kind: Optimizer,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptimizerState {
    fn new(kind: Optimizer, lr: f64, len: usize) -> Self {
        let (m, v) = match kind {
            Optimizer::GradientDescent => (Vec::new(), Vec::new()),
            Optimizer::Adam { .. } => (vec![0.0; len], vec![0.0; len]),
        };
        Self { kind, lr, m, v, t: 0 }
    }

    fn step(&mut self, params: &mut NetworkParams, grad: &[f64]) {
        match self.kind {
            Optimizer::GradientDescent => {
                let lr = self.lr;
                params.for_each_param_mut(|k, p| *p -= lr * grad[k]);
            }
            Optimizer::Adam { beta1, beta2, epsilon } => {
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                let (m, v, lr) = (&mut self.m, &mut self.v, self.lr);
                params.for_each_param_mut(|k, p| {
                    let g = grad[k];
                    m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                    v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                    *p -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + epsilon);
                });
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub restarts: usize,
    pub seed: u64,
    pub input_mode: InputMode,
    pub optimizer: Optimizer,
    /// Relative spectral floor `μ` of the candidate, see [`floored`].
    pub spectral_floor: f64,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            gamma: 1e-3,
            learning_rate: 1e-2,
            max_epochs: 5000,
            restarts: 3,
            seed: 0,
            input_mode: InputMode::Constant,
            optimizer: Optimizer::default(),
            spectral_floor: 1e-2,
            execution: Execution::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::domain(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::domain(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::domain(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.spectral_floor >= 0.0 && self.spectral_floor.is_finite()) {
            return Err(Error::domain(format!(
                "spectral_floor must be >= 0, got {}",
                self.spectral_floor
            )));
        }
        if self.restarts == 0 {
            return Err(Error::domain("restarts must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub converged: bool,
    pub final_loss: f64,
    pub epochs_used: usize,
    pub candidate: LyapunovCandidate,
    pub loss_history: Vec<f64>,
    pub params: NetworkParams,
    /// Index of the restart the result came from.
    pub restart: usize,
}

/// Mean hinge loss of a fixed candidate over every sample of `ds`.
pub fn loss(cand: &LyapunovCandidate, ds: &Dataset, lambda: f64, gamma: f64) -> Result<f64> {
    let pairs = ds.pairs()?;
    crate::error::check_dim(cand.dim(), ds.dim())?;
    Ok(fixed_loss(cand, &pairs, lambda, gamma))
}

fn fixed_loss(cand: &LyapunovCandidate, pairs: &[(&[f64], &[f64])], lambda: f64, gamma: f64) -> f64 {
    let sum = pairs
        .iter()
        .map(|(x, dx)| cand.residual_unchecked(x, dx, lambda, gamma).max(0.0))
        .fold(0.0, |a, b| a + b);
    sum / pairs.len() as f64
}

/// Adds `(x ẋᵀ + ẋ xᵀ + λ x xᵀ) * scale` into the symmetric `n x n` matrix `s`.
#[inline]
fn accumulate_sym(s: &mut [f64], x: &[f64], dx: &[f64], lambda: f64, scale: f64) {
    let n = x.len();
    for i in 0..n {
        for j in 0..n {
            s[i * n + j] += scale * (x[i] * dx[j] + dx[i] * x[j] + lambda * x[i] * x[j]);
        }
    }
}

/// `∂loss/∂L = 2 S L`, restricted to the lower triangle, row-major.
fn factor_gradient(s: &[f64], factor: &CholeskyFactor) -> Vec<f64> {
    let n = factor.dim();
    let mut out = Vec::with_capacity(tri_len(n));
    for i in 0..n {
        for j in 0..=i {
            let mut acc = 0.0;
            for k in j..n {
                acc += s[i * n + k] * factor.get(k, j);
            }
            out.push(2.0 * acc);
        }
    }
    out
}

fn sample_input(x: &[f64], dx: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(2 * x.len());
    v.extend_from_slice(x);
    v.extend_from_slice(dx);
    v
}

/// Loss and its gradient with respect to the flattened parameters.
fn loss_and_grad(params: &NetworkParams, pairs: &[(&[f64], &[f64])], cfg: &TrainConfig) -> Result<(f64, Vec<f64>)> {
    let (lambda, gamma, floor) = (cfg.lambda, cfg.gamma, cfg.spectral_floor);
    let n = params.state_dim();
    let count = pairs.len() as f64;
    let mut grad = vec![0.0; params.param_count()];
    let mut d_raw = vec![0.0; tri_len(n)];
    match cfg.input_mode {
        InputMode::Constant => {
            let input = vec![1.0; params.input_dim()];
            let fwd = params.forward(&input);
            let factor = assemble_l(&fwd.raw, n)?;
            let cand = floored(&factor, floor)?;
            let mut s = vec![0.0; n * n];
            let mut sum = 0.0;
            for (x, dx) in pairs {
                let r = cand.residual_unchecked(x, dx, lambda, gamma);
                if r > 0.0 {
                    sum += r;
                    accumulate_sym(&mut s, x, dx, lambda, 1.0);
                }
            }
            if sum > 0.0 {
                s.iter_mut().for_each(|v| *v /= count);
                add_floor_term(&mut s, n, floor);
                raw_gradient(&fwd.raw, n, &factor_gradient(&s, &factor), &mut d_raw);
                params.backward(&input, &fwd, &d_raw, &mut grad);
            }
            Ok((sum / count, grad))
        }
        InputMode::PerSample => {
            let mut sum = 0.0;
            let mut s = vec![0.0; n * n];
            for (x, dx) in pairs {
                let input = sample_input(x, dx);
                let fwd = params.forward(&input);
                let factor = assemble_l(&fwd.raw, n)?;
                let cand = floored(&factor, floor)?;
                let r = cand.residual_unchecked(x, dx, lambda, gamma);
                if r > 0.0 {
                    sum += r;
                    s.iter_mut().for_each(|v| *v = 0.0);
                    accumulate_sym(&mut s, x, dx, lambda, 1.0 / count);
                    add_floor_term(&mut s, n, floor);
                    raw_gradient(&fwd.raw, n, &factor_gradient(&s, &factor), &mut d_raw);
                    params.backward(&input, &fwd, &d_raw, &mut grad);
                }
            }
            Ok((sum / count, grad))
        }
    }
}

fn loss_only(params: &NetworkParams, pairs: &[(&[f64], &[f64])], cfg: &TrainConfig) -> Result<f64> {
    let (lambda, gamma, floor) = (cfg.lambda, cfg.gamma, cfg.spectral_floor);
    match cfg.input_mode {
        InputMode::Constant => Ok(fixed_loss(&params.constant_candidate(floor)?, pairs, lambda, gamma)),
        InputMode::PerSample => {
            let mut sum = 0.0;
            for (x, dx) in pairs {
                let cand = params.candidate_for(&sample_input(x, dx), floor)?;
                sum += cand.residual_unchecked(x, dx, lambda, gamma).max(0.0);
            }
            Ok(sum / pairs.len() as f64)
        }
    }
}

/// Among the factors the network emits on the training inputs, the one whose
/// worst residual over all samples is smallest.
fn select_fixed_candidate(
    params: &NetworkParams,
    pairs: &[(&[f64], &[f64])],
    lambda: f64,
    floor: f64,
) -> Result<LyapunovCandidate> {
    let mut best: Option<(f64, LyapunovCandidate)> = None;
    for (x, dx) in pairs {
        let cand = params.candidate_for(&sample_input(x, dx), floor)?;
        let worst = pairs
            .iter()
            .map(|(y, dy)| cand.residual_unchecked(y, dy, lambda, 0.0))
            .fold(f64::NEG_INFINITY, f64::max);
        if best.as_ref().is_none_or(|(w, _)| worst < *w) {
            best = Some((worst, cand));
        }
    }
    Ok(best.expect("non-empty training set").1)
}

struct RestartOutcome {
    converged: bool,
    final_loss: f64,
    candidate: LyapunovCandidate,
    history: Vec<f64>,
    params: NetworkParams,
}

fn run_restart(
    pairs: &[(&[f64], &[f64])],
    cfg: &TrainConfig,
    mut params: NetworkParams,
    restart: usize,
    first_converged: &AtomicUsize,
) -> Result<Option<RestartOutcome>> {
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.learning_rate, params.param_count());
    let mut history = Vec::new();
    for _ in 0..cfg.max_epochs {
        if first_converged.load(Ordering::Relaxed) < restart {
            // A lower-indexed restart already won; this result would be discarded.
            return Ok(None);
        }
        let (l, grad) = loss_and_grad(&params, pairs, cfg)?;
        history.push(l);
        if l == 0.0 {
            let candidate = match cfg.input_mode {
                InputMode::Constant => params.constant_candidate(cfg.spectral_floor)?,
                InputMode::PerSample => select_fixed_candidate(&params, pairs, cfg.lambda, cfg.spectral_floor)?,
            };
            if fixed_loss(&candidate, pairs, cfg.lambda, cfg.gamma) == 0.0 {
                first_converged.fetch_min(restart, Ordering::Relaxed);
                return Ok(Some(RestartOutcome {
                    converged: true,
                    final_loss: 0.0,
                    candidate,
                    history,
                    params,
                }));
            }
        }
        opt.step(&mut params, &grad);
    }
    let candidate = match cfg.input_mode {
        InputMode::Constant => params.constant_candidate(cfg.spectral_floor)?,
        InputMode::PerSample => select_fixed_candidate(&params, pairs, cfg.lambda, cfg.spectral_floor)?,
    };
    let final_loss = fixed_loss(&candidate, pairs, cfg.lambda, cfg.gamma);
    Ok(Some(RestartOutcome {
        converged: final_loss == 0.0,
        final_loss,
        candidate,
        history,
        params,
    }))
}

fn restart_rng(seed: u64, restart: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(restart as u64);
    rng
}

/// Trains from `restarts` random initialisations.
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainResult> {
    train_from(ds, cfg, None)
}

/// Like [`train`], but restart 0 starts from `init` when given (warm start).
pub fn train_from(ds: &Dataset, cfg: &TrainConfig, init: Option<&NetworkParams>) -> Result<TrainResult> {
    cfg.validate()?;
    let pairs = ds.pairs()?;
    let n = ds.dim();
    if let Some(p) = init {
        crate::error::check_dim(n, p.state_dim())?;
    }
    let first_converged = AtomicUsize::new(usize::MAX);
    let outcomes = map_indexed(cfg.restarts, cfg.execution, |r| {
        let params = match (r, init) {
            (0, Some(p)) => p.clone(),
            _ => NetworkParams::init(n, &mut restart_rng(cfg.seed, r)),
        };
        run_restart(&pairs, cfg, params, r, &first_converged)
    });

    let mut best: Option<(usize, RestartOutcome)> = None;
    for (r, outcome) in outcomes.into_iter().enumerate() {
        let Some(o) = outcome? else { continue };
        let better = match &best {
            None => true,
            Some((_, b)) => !b.converged && (o.converged || o.final_loss < b.final_loss),
        };
        if better {
            best = Some((r, o));
        }
        if best.as_ref().is_some_and(|(_, b)| b.converged) {
            break;
        }
    }
    let (restart, o) = best.expect("at least one restart runs to completion");
    Ok(TrainResult {
        converged: o.converged,
        final_loss: o.final_loss,
        epochs_used: o.history.len(),
        candidate: o.candidate,
        loss_history: o.history,
        params: o.params,
        restart,
    })
}

/// Maximum relative error between the analytic loss gradient and central
/// finite differences (step 1e-5) over every parameter. The relative error
/// uses `max(|analytic|, |numeric|, 1e-7)` as denominator.
pub fn gradient_check(params: &NetworkParams, ds: &Dataset, cfg: &TrainConfig) -> Result<f64> {
    let pairs = ds.pairs()?;
    crate::error::check_dim(params.state_dim(), ds.dim())?;
    let (_, analytic) = loss_and_grad(params, &pairs, cfg)?;
    let base = params.flat();
    let mut probe = params.clone();
    let mut flat = base.clone();
    let mut worst = 0.0f64;
    for k in 0..base.len() {
        flat[k] = base[k] + FD_STEP;
        probe.set_flat(&flat);
        let up = loss_only(&probe, &pairs, cfg)?;
        flat[k] = base[k] - FD_STEP;
        probe.set_flat(&flat);
        let down = loss_only(&probe, &pairs, cfg)?;
        flat[k] = base[k];
        let numeric = (up - down) / (2.0 * FD_STEP);
        let denom = analytic[k].abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        worst = worst.max((analytic[k] - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Analytic gradient of the loss; exposed for diagnostics.
pub fn loss_gradient(params: &NetworkParams, ds: &Dataset, cfg: &TrainConfig) -> Result<(f64, Vec<f64>)> {
    let pairs = ds.pairs()?;
    loss_and_grad(params, &pairs, cfg)
}
