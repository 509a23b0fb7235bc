//! Model-free CBF safety layer over joint-space spherical obstacles.
//!
//! Each obstacle contributes `h(q) = ‖q − c‖ − r` and the velocity
//! constraint `∇h(q)·v ≥ −α (h(q) − ε_c)` with `ε_c = ε/α`. The filter
//! returns the velocity closest to the reference that satisfies all of them.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::lyapunov::LyapunovCandidate;

const FEAS_TOL: f64 = 1e-12;
const DEPENDENCE_TOL: f64 = 1e-12;
const KKT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl Obstacle {
    pub fn new(center: Vec<f64>, radius: f64) -> Result<Self> {
        let o = Self { center, radius };
        o.validate()?;
        Ok(o)
    }

    fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::domain(format!("obstacle radius must be > 0, got {}", self.radius)));
        }
        if self.center.is_empty() || self.center.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("obstacle center must be a finite, non-empty point"));
        }
        Ok(())
    }
}

fn one() -> f64 {
    1.0
}

fn is_one(v: &f64) -> bool {
    *v == 1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetySpec {
    pub obstacles: Vec<Obstacle>,
    pub alpha: f64,
    pub epsilon: f64,
    /// Bound on `‖∂h/∂q‖`; 1 for distance-based safety functions.
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub c_h: f64,
}

impl SafetySpec {
    pub fn new(obstacles: Vec<Obstacle>, alpha: f64, epsilon: f64) -> Result<Self> {
        let s = Self { obstacles, alpha, epsilon, c_h: 1.0 };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::domain(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::domain(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.c_h > 0.0) {
            return Err(Error::domain(format!("c_h must be > 0, got {}", self.c_h)));
        }
        let dim = self.obstacles.first().map(|o| o.center.len());
        for o in &self.obstacles {
            o.validate()?;
            check_dim(dim.unwrap_or(0), o.center.len())?;
        }
        Ok(())
    }

    /// Safe-set shrinkage `ε/α`.
    pub fn epsilon_c(&self) -> f64 {
        self.epsilon / self.alpha
    }

    pub fn with_params(&self, alpha: f64, epsilon: f64) -> Result<Self> {
        let s = Self { alpha, epsilon, ..self.clone() };
        s.validate()?;
        Ok(s)
    }
}

fn distance(q: &[f64], c: &[f64]) -> f64 {
    q.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// `‖q − center‖ − r`.
pub fn h_q(q: &[f64], obs: &Obstacle) -> Result<f64> {
    check_dim(obs.center.len(), q.len())?;
    Ok(distance(q, &obs.center) - obs.radius)
}

/// Unit vector `(q − center)/‖q − center‖`; undefined at the center.
pub fn grad_h_q(q: &[f64], obs: &Obstacle) -> Result<Vec<f64>> {
    check_dim(obs.center.len(), q.len())?;
    let d = distance(q, &obs.center);
    if d == 0.0 {
        return Err(Error::SingularGradient { index: 0 });
    }
    Ok(q.iter().zip(&obs.center).map(|(a, b)| (a - b) / d).collect())
}

/// Linear constraint `normal · v ≥ offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct Halfspace {
    pub normal: Vec<f64>,
    pub offset: f64,
}

impl Halfspace {
    pub fn slack(&self, v: &[f64]) -> f64 {
        dot(&self.normal, v) - self.offset
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub v: Vec<f64>,
    /// Active constraint indices, ascending.
    pub active: Vec<usize>,
    /// Multipliers matching `active`.
    pub multipliers: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves the square system `a x = b` by Gaussian elimination with partial pivoting.
fn solve_dense(mut a: Vec<f64>, mut b: Vec<f64>) -> Vec<f64> {
    let k = b.len();
    for col in 0..k {
        let piv = (col..k)
            .max_by(|&i, &j| a[i * k + col].abs().total_cmp(&a[j * k + col].abs()))
            .unwrap();
        if piv != col {
            for c in 0..k {
                a.swap(col * k + c, piv * k + c);
            }
            b.swap(col, piv);
        }
        let d = a[col * k + col];
        for row in col + 1..k {
            let f = a[row * k + col] / d;
            if f == 0.0 {
                continue;
            }
            for c in col..k {
                a[row * k + c] -= f * a[col * k + c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; k];
    for row in (0..k).rev() {
        let s: f64 = (row + 1..k).map(|c| a[row * k + c] * x[c]).sum();
        x[row] = (b[row] - s) / a[row * k + row];
    }
    x
}

/// Decomposes `a_p` against the active normals: returns the nullspace
/// component `z` and the coefficients `r` with `a_p = z + Σ r_j a_j`.
fn decompose(cons: &[Halfspace], active: &[usize], a_p: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let k = active.len();
    if k == 0 {
        return (a_p.to_vec(), Vec::new());
    }
    let mut gram = vec![0.0; k * k];
    for (i, &ai) in active.iter().enumerate() {
        for (j, &aj) in active.iter().enumerate() {
            gram[i * k + j] = dot(&cons[ai].normal, &cons[aj].normal);
        }
    }
    let rhs: Vec<f64> = active.iter().map(|&a| dot(&cons[a].normal, a_p)).collect();
    let r = solve_dense(gram, rhs);
    let mut z = a_p.to_vec();
    for (coef, &a) in r.iter().zip(active) {
        for (zi, ni) in z.iter_mut().zip(&cons[a].normal) {
            *zi -= coef * ni;
        }
    }
    (z, r)
}

/// Minimises `‖v − v_ref‖²` subject to `normal_i · v ≥ offset_i`.
///
/// Dual active-set method (Goldfarb–Idnani specialised to an identity
/// Hessian): starts from the unconstrained minimiser and repeatedly adds the
/// most violated constraint (lowest index on ties), dropping constraints whose
/// multipliers would turn negative. Infeasibility is detected when a violated
/// constraint is linearly dependent on the active set with no droppable
/// constraint.
pub fn project_min_norm(v_ref: &[f64], cons: &[Halfspace]) -> Result<Projection> {
    for c in cons {
        check_dim(v_ref.len(), c.normal.len())?;
    }
    let mut v = v_ref.to_vec();
    let mut active: Vec<usize> = Vec::new();
    let mut mult: Vec<f64> = Vec::new();
    let max_iter = 50 * (cons.len() + 1);
    let mut iters = 0;

    loop {
        let mut pick: Option<(usize, f64)> = None;
        for (i, c) in cons.iter().enumerate() {
            if active.contains(&i) {
                continue;
            }
            let s = c.slack(&v);
            let scale = 1.0 + c.offset.abs();
            if s < -FEAS_TOL * scale && pick.is_none_or(|(_, best)| s < best) {
                pick = Some((i, s));
            }
        }
        let Some((p, _)) = pick else { break };
        let a_p = &cons[p].normal;
        let mut u_p = 0.0;
        loop {
            iters += 1;
            if iters > max_iter {
                return Err(Error::domain("safety QP did not terminate"));
            }
            let (z, r) = decompose(cons, &active, a_p);
            let mut drop: Option<(usize, f64)> = None;
            for (j, &rj) in r.iter().enumerate() {
                if rj > 0.0 {
                    let ratio = mult[j] / rj;
                    if drop.is_none_or(|(_, t)| ratio < t) {
                        drop = Some((j, ratio));
                    }
                }
            }
            let z_norm = dot(&z, &z).sqrt();
            let a_norm = dot(a_p, a_p).sqrt();
            if z_norm <= DEPENDENCE_TOL * a_norm.max(1.0) {
                let Some((j, t)) = drop else {
                    let mut witness = active.clone();
                    witness.push(p);
                    witness.sort_unstable();
                    return Err(Error::Infeasible { active: witness });
                };
                for (m, rj) in mult.iter_mut().zip(&r) {
                    *m -= t * rj;
                }
                u_p += t;
                active.remove(j);
                mult.remove(j);
                continue;
            }
            let full = -cons[p].slack(&v) / dot(&z, a_p);
            let (t, dropped) = match drop {
                Some((j, t1)) if t1 < full => (t1, Some(j)),
                _ => (full, None),
            };
            for (vi, zi) in v.iter_mut().zip(&z) {
                *vi += t * zi;
            }
            for (m, rj) in mult.iter_mut().zip(&r) {
                *m -= t * rj;
            }
            u_p += t;
            match dropped {
                Some(j) => {
                    active.remove(j);
                    mult.remove(j);
                }
                None => {
                    active.push(p);
                    mult.push(u_p);
                    break;
                }
            }
        }
    }

    // Stationarity: v − v_ref = Σ u_j a_j.
    let mut resid: Vec<f64> = v.iter().zip(v_ref).map(|(a, b)| a - b).collect();
    for (&j, &u) in active.iter().zip(&mult) {
        for (ri, ni) in resid.iter_mut().zip(&cons[j].normal) {
            *ri -= u * ni;
        }
    }
    let kkt = dot(&resid, &resid).sqrt();
    if kkt > KKT_TOL * (1.0 + dot(v_ref, v_ref).sqrt()) {
        log::warn!("safety QP stationarity residual {kkt:.3e}");
    }

    let mut order: Vec<usize> = (0..active.len()).collect();
    order.sort_by_key(|&i| active[i]);
    Ok(Projection {
        v,
        active: order.iter().map(|&i| active[i]).collect(),
        multipliers: order.iter().map(|&i| mult[i]).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterResult {
    pub v_safe: Vec<f64>,
    pub active_constraints: Vec<usize>,
    pub modified: bool,
}

/// Velocity constraints of every obstacle at `q`.
pub fn constraints(q: &[f64], spec: &SafetySpec) -> Result<Vec<Halfspace>> {
    let eps_c = spec.epsilon_c();
    spec.obstacles
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let h = h_q(q, o)?;
            let normal = grad_h_q(q, o).map_err(|_| Error::SingularGradient { index: i })?;
            Ok(Halfspace { normal, offset: -spec.alpha * (h - eps_c) })
        })
        .collect()
}

/// Min-norm modification of `v_ref` satisfying every obstacle constraint.
pub fn safe_velocity(q: &[f64], v_ref: &[f64], spec: &SafetySpec) -> Result<FilterResult> {
    check_dim(q.len(), v_ref.len())?;
    let cons = constraints(q, spec)?;
    let sol = project_min_norm(v_ref, &cons)?;
    let modified = sol.v != v_ref;
    Ok(FilterResult {
        v_safe: sol.v,
        active_constraints: sol.active,
        modified,
    })
}

/// `k1 (λ − α) / C_h`; requires `λ > α > 0`.
pub fn alpha_e(k1: f64, lambda: f64, alpha: f64, c_h: f64) -> Result<f64> {
    if lambda <= alpha {
        return Err(Error::DecayRateBelowAlpha { lambda, alpha });
    }
    if !(alpha > 0.0 && k1 > 0.0 && c_h > 0.0) {
        return Err(Error::domain(format!(
            "alpha_e needs alpha, k1, C_h > 0 (got {alpha}, {k1}, {c_h})"
        )));
    }
    Ok(k1 * (lambda - alpha) / c_h)
}

/// Whether `(q0, e0)` starts inside `{ −V(e) + α_e·min_i h_i(q) + d_margin ≥ 0 }`.
pub fn check_initial_set(
    q0: &[f64],
    e0: &[f64],
    cand: &LyapunovCandidate,
    spec: &SafetySpec,
    lambda: f64,
    d_margin: f64,
) -> Result<bool> {
    let (k1, _) = cand.spectral_bounds();
    let a_e = alpha_e(k1, lambda, spec.alpha, spec.c_h)?;
    let v = cand.eval_v(e0)?;
    let mut min_h = f64::INFINITY;
    for o in &spec.obstacles {
        min_h = min_h.min(h_q(q0, o)?);
    }
    Ok(-v + a_e * min_h + d_margin >= 0.0)
}
