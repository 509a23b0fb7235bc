//! Bisection for the largest certifiable decay rate, slack extraction and
//! held-out validation.

use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::lyapunov::{CholeskyFactor, LyapunovCandidate};
use crate::nn::{train_from, NetworkParams, TrainConfig, TrainResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BisectionConfig {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub resolution: f64,
    pub train: TrainConfig,
    /// Start each midpoint from the last converged weights instead of scratch.
    pub warm_start: bool,
}

impl Default for BisectionConfig {
    fn default() -> Self {
        Self {
            lambda_min: 0.0,
            lambda_max: 20.0,
            resolution: 0.25,
            train: TrainConfig::default(),
            warm_start: false,
        }
    }
}

impl BisectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_min >= 0.0 && self.lambda_min < self.lambda_max && self.lambda_max.is_finite()) {
            return Err(Error::domain(format!(
                "need 0 <= lambda_min < lambda_max, got [{}, {}]",
                self.lambda_min, self.lambda_max
            )));
        }
        if !(self.resolution > 0.0) {
            return Err(Error::domain(format!("resolution must be > 0, got {}", self.resolution)));
        }
        self.train.validate()
    }
}

/// Outcome of the bracket search alone.
#[derive(Debug, Clone)]
pub struct BisectionTrace<T> {
    pub lambda_best: f64,
    /// `(λ tried, converged)` in the order tried.
    pub history: Vec<(f64, bool)>,
    /// Payload of the last converged midpoint.
    pub best: Option<T>,
}

/// Runs the bracket updates with an arbitrary feasibility oracle.
///
/// `feasible(λ)` returns `Some(payload)` when training at `λ` converged.
/// Iterates until `λ_max − λ_min < resolution`.
pub fn bisect_with<T, F>(lambda_min: f64, lambda_max: f64, resolution: f64, mut feasible: F) -> BisectionTrace<T>
where
    F: FnMut(f64) -> Option<T>,
{
    let (mut lo, mut hi) = (lambda_min, lambda_max);
    let mut lambda_best = lambda_min;
    let mut best = None;
    let mut history = Vec::new();
    loop {
        let mid = 0.5 * (lo + hi);
        match feasible(mid) {
            None => {
                history.push((mid, false));
                hi = mid;
            }
            Some(payload) => {
                history.push((mid, true));
                best = Some(payload);
                lambda_best = mid;
                lo = mid;
            }
        }
        if hi - lo < resolution {
            break;
        }
    }
    BisectionTrace { lambda_best, history, best }
}

#[derive(Debug, Clone)]
pub struct Certificate {
    pub lambda_best: f64,
    pub epsilon: f64,
    pub candidate: LyapunovCandidate,
    pub gamma: f64,
    pub n_train: usize,
    pub history: Vec<(f64, bool)>,
    /// No midpoint converged; `lambda_best == lambda_min` and the candidate
    /// is the lowest-loss attempt at the last midpoint tried.
    pub never_converged: bool,
    pub seed: u64,
    pub resolution: f64,
    /// Loss history of the training run behind `candidate`.
    pub loss_history: Vec<f64>,
}

/// Largest decay rate certified by training, followed by the minimal slack.
pub fn bisect_lambda(ds: &Dataset, cfg: &BisectionConfig) -> Result<Certificate> {
    cfg.validate()?;
    if !ds.has_derivatives() {
        return Err(Error::MissingDerivatives);
    }
    let mut warm: Option<NetworkParams> = None;
    let mut last_attempt: Option<TrainResult> = None;
    let mut failure: Option<Error> = None;
    let trace = bisect_with(cfg.lambda_min, cfg.lambda_max, cfg.resolution, |lambda| {
        if failure.is_some() {
            return None;
        }
        let train_cfg = TrainConfig { lambda, ..cfg.train.clone() };
        let init = if cfg.warm_start { warm.as_ref() } else { None };
        match train_from(ds, &train_cfg, init) {
            Ok(r) => {
                log::info!(
                    "λ = {lambda}: converged = {} (loss {:.3e}, {} epochs)",
                    r.converged,
                    r.final_loss,
                    r.epochs_used
                );
                if r.converged {
                    warm = Some(r.params.clone());
                    Some(r)
                } else {
                    last_attempt = Some(r);
                    None
                }
            }
            Err(e) => {
                failure = Some(e);
                None
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let never_converged = trace.best.is_none();
    let result = match trace.best {
        Some(r) => r,
        None => last_attempt.expect("at least one midpoint is tried"),
    };
    let epsilon = compute_epsilon(&result.candidate, ds, trace.lambda_best)?;
    Ok(Certificate {
        lambda_best: trace.lambda_best,
        epsilon,
        candidate: result.candidate,
        gamma: cfg.train.gamma,
        n_train: ds.len(),
        history: trace.history,
        never_converged,
        seed: cfg.train.seed,
        resolution: cfg.resolution,
        loss_history: result.loss_history,
    })
}

/// Smallest `ε ≥ 0` with `V̇ + λV − ε ≤ 0` on every sample, reduced
/// left-to-right over samples.
pub fn compute_epsilon(cand: &LyapunovCandidate, ds: &Dataset, lambda: f64) -> Result<f64> {
    let pairs = ds.pairs()?;
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_dim(cand.dim(), ds.dim())?;
    let mut eps = 0.0f64;
    for (x, dx) in pairs {
        let r = cand.residual_unchecked(x, dx, lambda, 0.0);
        if r > eps {
            eps = r;
        }
    }
    Ok(eps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationCounts {
    /// Samples with `V̇ + λV − ε > 0`.
    pub violations: usize,
    pub total: usize,
    /// Trajectories containing at least one violating sample.
    pub trajectories_violated: usize,
    pub trajectories: usize,
}

/// Counts held-out samples violating the certified condition.
pub fn validate_certificate(cert: &Certificate, test: &Dataset) -> Result<ValidationCounts> {
    check_dim(cert.candidate.dim(), test.dim())?;
    let mut counts = ValidationCounts {
        violations: 0,
        total: 0,
        trajectories_violated: 0,
        trajectories: test.len(),
    };
    for traj in test.trajectories() {
        let mut any = false;
        for s in traj.samples() {
            let dx = s.xdot.as_deref().ok_or(Error::MissingDerivatives)?;
            let r = cert.candidate.residual_unchecked(&s.x, dx, cert.lambda_best, 0.0);
            counts.total += 1;
            if r - cert.epsilon > 0.0 {
                counts.violations += 1;
                any = true;
            }
        }
        counts.trajectories_violated += usize::from(any);
    }
    Ok(counts)
}

/// JSON form of a trained candidate or a full certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateRecord {
    pub n: usize,
    #[serde(rename = "L")]
    pub l: Vec<Vec<f64>>,
    pub lambda: f64,
    pub gamma: f64,
    pub epsilon: Option<f64>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history: Option<Vec<(f64, bool)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_train: Option<usize>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub never_converged: bool,
}

impl CertificateRecord {
    /// Export of a single training run (no slack, no history).
    pub fn from_candidate(cand: &LyapunovCandidate, lambda: f64, gamma: f64, seed: u64) -> Self {
        Self {
            n: cand.dim(),
            l: cand.factor().to_rows(),
            lambda,
            gamma,
            epsilon: None,
            seed,
            history: None,
            resolution: None,
            n_train: None,
            never_converged: false,
        }
    }

    pub fn candidate(&self) -> Result<LyapunovCandidate> {
        let factor = CholeskyFactor::from_rows(&self.l)?;
        check_dim(self.n, factor.dim())?;
        Ok(LyapunovCandidate::new(factor))
    }

    /// Rebuilds a certificate; a missing slack is treated as zero.
    pub fn to_certificate(&self) -> Result<Certificate> {
        Ok(Certificate {
            lambda_best: self.lambda,
            epsilon: self.epsilon.unwrap_or(0.0),
            candidate: self.candidate()?,
            gamma: self.gamma,
            n_train: self.n_train.unwrap_or(0),
            history: self.history.clone().unwrap_or_default(),
            never_converged: self.never_converged,
            seed: self.seed,
            resolution: self.resolution.unwrap_or(f64::NAN),
            loss_history: Vec::new(),
        })
    }
}

impl From<&Certificate> for CertificateRecord {
    fn from(c: &Certificate) -> Self {
        Self {
            n: c.candidate.dim(),
            l: c.candidate.factor().to_rows(),
            lambda: c.lambda_best,
            gamma: c.gamma,
            epsilon: Some(c.epsilon),
            seed: c.seed,
            history: Some(c.history.clone()),
            resolution: Some(c.resolution),
            n_train: Some(c.n_train),
            never_converged: c.never_converged,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{Role, Sample, Trajectory};

    #[test]
    fn bisection_trace_with_threshold_oracle() {
        let t = bisect_with(0.0, 4.0, 0.25, |l| (l <= 1.5).then_some(()));
        assert_eq!(t.lambda_best, 1.5);
        let tried: Vec<_> = t.history.to_vec();
        assert_eq!(
            &tried[..4],
            &[(2.0, false), (1.0, true), (1.5, true), (1.75, false)]
        );
        // The bracket [1.5, 1.75] still has width R, so one more midpoint is tried.
        assert_eq!(tried[4], (1.625, false));
        assert_eq!(tried.len(), 5);
    }

    #[test]
    fn bisection_trace_always_feasible() {
        let t = bisect_with(0.0, 4.0, 0.5, |_| Some(()));
        assert_eq!(t.lambda_best, 3.75);
        let tried: Vec<f64> = t.history.iter().map(|h| h.0).collect();
        assert_eq!(tried, vec![2.0, 3.0, 3.5, 3.75]);
    }

    #[test]
    fn bisection_never_feasible_keeps_lower_bound() {
        let t = bisect_with(1.0, 3.0, 0.25, |_| None::<()>);
        assert_eq!(t.lambda_best, 1.0);
        assert!(t.best.is_none());
        assert!(t.history.iter().all(|h| !h.1));
    }

    #[test]
    fn bracket_halves_every_iteration() {
        for &(lo, hi, r) in &[(0.0, 4.0, 0.25), (0.0, 20.0, 0.25), (1.0, 3.0, 0.3), (0.0, 1.0, 0.001)] {
            let t = bisect_with(lo, hi, r, |l| (l < 0.37 * hi).then_some(()));
            // Strict "< R" stop: the smallest k with (hi-lo)/2^k < R.
            let expected = ((hi - lo) / r).log2().floor() as usize + 1;
            assert_eq!(t.history.len(), expected, "bracket [{lo}, {hi}] R = {r}");
        }
    }

    fn points(pts: &[(f64, f64)]) -> Dataset {
        let samples = pts
            .iter()
            .enumerate()
            .map(|(k, &(x, dx))| Sample { t: k as f64, x: vec![x], xdot: Some(vec![dx]) })
            .collect();
        Dataset::new(vec![Trajectory::new(1.0, samples, "p").unwrap()], Role::Train).unwrap()
    }

    #[test]
    fn epsilon_examples() {
        let id = LyapunovCandidate::identity(1);
        // With x = 1 and λ = 0, the residual is 2ẋ.
        let ds = points(&[(1.0, -0.05), (1.0, 0.01), (1.0, -0.15)]);
        assert!((compute_epsilon(&id, &ds, 0.0).unwrap() - 0.02).abs() < 1e-15);
        let ds = points(&[(1.0, -1.0), (2.0, -2.0)]);
        assert_eq!(compute_epsilon(&id, &ds, 0.5).unwrap(), 0.0);
        let ds = points(&[(1.0, -1.0)]);
        assert!(compute_epsilon(&LyapunovCandidate::identity(2), &ds, 0.5).is_err());
    }

    fn cert_with(eps: f64) -> Certificate {
        Certificate {
            lambda_best: 1.0,
            epsilon: eps,
            candidate: LyapunovCandidate::identity(1),
            gamma: 1e-3,
            n_train: 1,
            history: vec![],
            never_converged: false,
            seed: 0,
            resolution: 0.25,
            loss_history: vec![],
        }
    }

    #[test]
    fn validation_counts() {
        // residuals 2ẋ + 1 for x = 1: -1, 0.2, -0.5
        let ds = points(&[(1.0, -1.0), (1.0, -0.4), (1.0, -0.75)]);
        let c = validate_certificate(&cert_with(0.0), &ds).unwrap();
        assert_eq!((c.violations, c.total), (1, 3));
        assert_eq!((c.trajectories_violated, c.trajectories), (1, 1));
        let eps = compute_epsilon(&LyapunovCandidate::identity(1), &ds, 1.0).unwrap();
        let c = validate_certificate(&cert_with(eps), &ds).unwrap();
        assert_eq!(c.violations, 0);
        let two_d = LyapunovCandidate::identity(2);
        let mut bad = cert_with(0.0);
        bad.candidate = two_d;
        assert!(validate_certificate(&bad, &ds).is_err());
    }

    #[test]
    fn record_round_trip() {
        let mut c = cert_with(0.0274);
        c.history = vec![(2.0, false), (1.0, true)];
        let rec = CertificateRecord::from(&c);
        let json = serde_json::to_string(&rec).unwrap();
        assert!(json.contains("\"history\":[[2.0,false],[1.0,true]]"));
        let back: CertificateRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rec);
        let cert = back.to_certificate().unwrap();
        assert_eq!(cert.epsilon, 0.0274);
        assert_eq!(cert.candidate, c.candidate);

        let plain = CertificateRecord::from_candidate(&c.candidate, 1.0, 1e-3, 4);
        let json = serde_json::to_value(&plain).unwrap();
        assert!(json["epsilon"].is_null());
        assert!(json.get("history").is_none());
    }
}
