//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::f64::consts::TAU;
use std::process::ExitCode;
use std::time::Instant;

use lyocert::bounds::chernoff_bound;
use lyocert::cbf::{project_min_norm, Halfspace, Obstacle};
use lyocert::certify::{bisect_lambda, compute_epsilon, BisectionConfig, Certificate};
use lyocert::dataio::{differentiate, Dataset, Role, Sample, Trajectory};
use lyocert::nn::{assemble_l, gradient_check, train, InputMode, NetworkParams, TrainConfig};
use lyocert::sim::{
    generate_training_data, run_scenario, sweep_table, DataGenConfig, ScenarioConfig, Waypoint,
};
use lyocert::{Execution, LyapunovCandidate, SafetySpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LINEAR_A: [[f64; 2]; 2] = [[0.0, 1.0], [-1.0, -2.0]];
const RESOLUTION: f64 = 0.25;
const TIE: f64 = 1e-4;

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, id: u32, ok: bool, detail: String) {
        if !ok {
            self.failures += 1;
        }
        println!("criterion {id}: {} — {detail}", if ok { "PASS" } else { "FAIL" });
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn linear_rhs(x: [f64; 2]) -> [f64; 2] {
    let a = LINEAR_A;
    [a[0][0] * x[0] + a[0][1] * x[1], a[1][0] * x[0] + a[1][1] * x[1]]
}

/// Ten RK4 trajectories of ẋ = A x from initial states on the unit circle.
fn linear_dataset(seed: u64) -> Dataset {
    let (dt, steps) = (0.01, 500);
    let mut r = rng(seed);
    let trajs = (0..10)
        .map(|i| {
            let th = r.gen_range(0.0..TAU);
            let mut x = [th.cos(), th.sin()];
            let mut states = vec![x.to_vec()];
            for _ in 0..steps {
                let k1 = linear_rhs(x);
                let k2 = linear_rhs([x[0] + 0.5 * dt * k1[0], x[1] + 0.5 * dt * k1[1]]);
                let k3 = linear_rhs([x[0] + 0.5 * dt * k2[0], x[1] + 0.5 * dt * k2[1]]);
                let k4 = linear_rhs([x[0] + dt * k3[0], x[1] + dt * k3[1]]);
                for j in 0..2 {
                    x[j] += dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
                }
                states.push(x.to_vec());
            }
            differentiate(&Trajectory::from_states(dt, states, format!("lin_{i}")).unwrap()).unwrap()
        })
        .collect();
    Dataset::new(trajs, Role::Train).unwrap()
}

/// `A + (λ/2) I` is Hurwitz iff its trace is negative and its determinant positive.
fn shifted_hurwitz(lambda: f64) -> bool {
    let s = lambda / 2.0;
    let (a, b, c, d) = (LINEAR_A[0][0] + s, LINEAR_A[0][1], LINEAR_A[1][0], LINEAR_A[1][1] + s);
    a + d < 0.0 && a * d - b * c > 0.0
}

fn linear_accepts(lb: f64) -> bool {
    (1.0..2.0).contains(&lb) && shifted_hurwitz(lb) && !shifted_hurwitz(lb + 2.0 * RESOLUTION)
}

fn criteria_1_2(rep: &mut Report) {
    let cfg = BisectionConfig {
        lambda_min: 0.0,
        lambda_max: 4.0,
        resolution: RESOLUTION,
        train: TrainConfig { execution: Execution::Sequential, ..TrainConfig::default() },
        ..BisectionConfig::default()
    };
    let ds = linear_dataset(2);
    let t0 = Instant::now();
    let cert = bisect_lambda(&ds, &cfg).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let lb = cert.lambda_best;
    let ok = linear_accepts(lb) && !cert.never_converged && secs <= 120.0;
    // Seed sensitivity, reported but not part of the verdict.
    let spread = lyocert::exec::map_indexed(8, Execution::Parallel, |i| {
        bisect_lambda(&linear_dataset(i as u64 + 1), &cfg).unwrap().lambda_best
    });
    let accepted = spread.iter().filter(|&&l| linear_accepts(l)).count();
    println!("  dataset seeds 1-8: λ_best = {spread:?}, {accepted}/8 meet the band and oracle checks");
    rep.line(
        1,
        ok,
        format!(
            "λ_best = {lb} (band [1, 2)), oracle feasible at λ_best: {}, infeasible at λ_best+2R: {}, {secs:.1} s on one core",
            shifted_hurwitz(lb),
            !shifted_hurwitz(lb + 2.0 * RESOLUTION)
        ),
    );

    let r = train(&ds, &TrainConfig { lambda: 1.0, ..TrainConfig::default() }).unwrap();
    rep.line(
        2,
        r.converged && r.final_loss == 0.0 && r.epochs_used <= 5000,
        format!(
            "λ = 1: loss {} after {} epochs (restart {} of 3)",
            r.final_loss,
            r.epochs_used,
            r.restart + 1
        ),
    );
}

fn criterion_3(rep: &mut Report) {
    let a = chernoff_bound(3, 499, 0.01).unwrap().c_bar;
    let b = chernoff_bound(0, 100, 0.01).unwrap().c_bar;
    let oracle = (100f64.ln() / 200.0).sqrt();
    rep.line(
        3,
        (a - 0.0739).abs() <= 5e-4 && (b - 0.151743).abs() <= 1e-6 && (b - oracle).abs() < 1e-15,
        format!("c̄(3, 499, 0.01) = {a:.6}, c̄(0, 100, 0.01) = {b:.6}"),
    );
}

fn criterion_4(rep: &mut Report) {
    let mut worst = 0.0f64;
    let mut active_instances = 0;
    for i in 0..20u64 {
        let mut r = rng(100 + i);
        let n = 1 + (i as usize % 3);
        let params = NetworkParams::seeded(n, 1000 + i);
        let samples: Vec<Sample> = (0..r.gen_range(3..12))
            .map(|k| Sample {
                t: k as f64,
                x: (0..n).map(|_| r.gen_range(-1.0..1.0)).collect(),
                xdot: Some((0..n).map(|_| r.gen_range(-1.0..1.0)).collect()),
            })
            .collect();
        let ds = Dataset::new(vec![Trajectory::new(1.0, samples, "g").unwrap()], Role::Train).unwrap();
        let cfg = TrainConfig {
            lambda: r.gen_range(0.0..3.0),
            gamma: 1e-3,
            input_mode: if i % 2 == 0 { InputMode::Constant } else { InputMode::PerSample },
            ..TrainConfig::default()
        };
        if lyocert::nn::loss_gradient(&params, &ds, &cfg).unwrap().0 > 0.0 {
            active_instances += 1;
        }
        worst = worst.max(gradient_check(&params, &ds, &cfg).unwrap());
    }
    rep.line(
        4,
        worst < 1e-4 && active_instances > 0,
        format!("max relative error {worst:.2e} over 20 instances ({active_instances} with active hinge)"),
    );
}

fn grid_min(v_ref: [f64; 2], cons: &[Halfspace], center: [f64; 2], half: f64) -> Option<([f64; 2], f64)> {
    let steps = 400;
    let mut best: Option<([f64; 2], f64)> = None;
    for i in 0..=steps {
        for j in 0..=steps {
            let v = [
                center[0] - half + 2.0 * half * i as f64 / steps as f64,
                center[1] - half + 2.0 * half * j as f64 / steps as f64,
            ];
            if cons.iter().all(|c| c.normal[0] * v[0] + c.normal[1] * v[1] >= c.offset) {
                let d = (v[0] - v_ref[0]).powi(2) + (v[1] - v_ref[1]).powi(2);
                if best.is_none_or(|(_, b)| d < b) {
                    best = Some((v, d));
                }
            }
        }
    }
    best
}

fn criterion_5(rep: &mut Report) {
    let mut worst_gap = 0.0f64;
    let mut worst_violation = 0.0f64;
    for i in 0..100u64 {
        let mut r = rng(500 + i);
        let v_ref = [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)];
        // Feasible by construction: every constraint holds at `p` with slack.
        let p = [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)];
        let cons: Vec<Halfspace> = (0..r.gen_range(1..=3))
            .map(|_| {
                let th: f64 = r.gen_range(0.0..TAU);
                let normal = vec![th.cos(), th.sin()];
                let offset = normal[0] * p[0] + normal[1] * p[1] - r.gen_range(0.0..0.5);
                Halfspace { normal, offset }
            })
            .collect();
        let sol = project_min_norm(&v_ref, &cons).unwrap();
        let obj = (sol.v[0] - v_ref[0]).powi(2) + (sol.v[1] - v_ref[1]).powi(2);
        for c in &cons {
            worst_violation = worst_violation.max(-c.slack(&sol.v));
        }
        // Coarse-to-fine brute force, independent of the solver's answer.
        let (mut center, mut half) = (v_ref, 3.0);
        let mut grid = f64::INFINITY;
        for _ in 0..3 {
            let (v, d) = grid_min(v_ref, &cons, center, half).expect("feasible instance");
            center = v;
            grid = d;
            half /= 30.0;
        }
        worst_gap = worst_gap.max((grid - obj).abs());
    }
    rep.line(
        5,
        worst_gap <= 1e-3 && worst_violation <= 1e-9,
        format!("max |objective − grid| = {worst_gap:.2e}, max constraint violation = {worst_violation:.2e}"),
    );
}

fn criterion_6(rep: &mut Report) {
    let mut mismatches = 0;
    let mut nonzero = 0;
    for i in 0..50u64 {
        let mut r = rng(900 + i);
        let n = 1 + (i as usize % 3);
        let raw: Vec<f64> = (0..n * (n + 1) / 2).map(|_| r.gen_range(-2.0..2.0)).collect();
        let cand = LyapunovCandidate::new(assemble_l(&raw, n).unwrap());
        let lambda = r.gen_range(0.0..3.0);
        let samples: Vec<Sample> = (0..r.gen_range(1..40))
            .map(|k| Sample {
                t: k as f64,
                x: (0..n).map(|_| r.gen_range(-1.0..1.0)).collect(),
                xdot: Some((0..n).map(|_| r.gen_range(-2.0..0.5)).collect()),
            })
            .collect();
        let ds = Dataset::new(vec![Trajectory::new(1.0, samples, "e").unwrap()], Role::Train).unwrap();
        let mut brute = 0.0f64;
        for (x, dx) in ds.pairs().unwrap() {
            let v = cand.residual(x, dx, lambda, 0.0).unwrap().value();
            brute = if v > brute { v } else { brute };
        }
        let eps = compute_epsilon(&cand, &ds, lambda).unwrap();
        if eps.to_bits() != brute.to_bits() {
            mismatches += 1;
        }
        if eps > 0.0 {
            nonzero += 1;
        }
    }
    rep.line(6, mismatches == 0, format!("{mismatches} bitwise mismatches over 50 datasets ({nonzero} with ε > 0)"));
}

fn plant_certificate() -> (Certificate, f64) {
    let ds = generate_training_data(&DataGenConfig::default()).unwrap();
    let t0 = Instant::now();
    let cert = bisect_lambda(&ds, &BisectionConfig::default()).unwrap();
    (cert, t0.elapsed().as_secs_f64())
}

fn criterion_7(rep: &mut Report, cert: &Certificate) {
    let base = ScenarioConfig::default();
    let ours_alphas = [0.5, 1.0, 2.0, 4.0];
    let mut eps: Vec<f64> = vec![cert.epsilon, 0.04, 0.06, 0.07, 0.08];
    eps.sort_by(f64::total_cmp);
    eps.dedup();
    let ours = sweep_table(&base, &ours_alphas, &eps, Some(cert), Execution::Parallel).unwrap();
    let std_block = sweep_table(&base, &[10.0, 20.0, 30.0, 50.0], &[0.0], Some(cert), Execution::Parallel).unwrap();

    let mut worst_margin = f64::INFINITY;
    let mut safe = ours.failed_cells() == 0;
    for (i, row) in ours.cells.iter().enumerate() {
        if ours.alphas[i] >= cert.lambda_best {
            continue;
        }
        for c in row {
            if let (Some(h), Some(tol)) = (c.min_h, c.tolerance) {
                worst_margin = worst_margin.min(h + tol);
                safe &= h >= -tol;
            }
        }
    }
    let monotone = ours.alpha_monotone(TIE) && ours.epsilon_monotone(TIE);
    let std_min: Vec<f64> = std_block.cells.iter().map(|r| r[0].min_h.unwrap_or(f64::NAN)).collect();
    let violation = std_min.iter().any(|&h| h < 0.0);
    println!("  (α, ε) sweep with λ_best = {}, ε_cert = {}:", cert.lambda_best, cert.epsilon);
    for line in ours.to_csv().lines() {
        println!("    {line}");
    }
    println!("    ε = 0, α ∈ {{10, 20, 30, 50}}: {std_min:?}");
    rep.line(
        7,
        safe && monotone && violation,
        format!(
            "(a) α < λ cells ≥ −‖q̇‖max·dt: {safe} (worst margin {worst_margin:.2e}); (b) monotone: {monotone}; (c) ε = 0 block has min_h < 0: {violation}"
        ),
    );
}

fn criterion_8(rep: &mut Report, cert: &Certificate, secs: f64) {
    let lb = cert.lambda_best;
    let ceiling = 6.0 + RESOLUTION + 0.2;
    let (k1, k2) = cert.candidate.spectral_bounds();
    rep.line(
        8,
        !cert.never_converged && (3.0..=ceiling).contains(&lb),
        format!("λ_best = {lb} ∈ [3, {ceiling}] (history {:?}, κ(P) = {:.1}, {secs:.1} s)", cert.history, k2 / k1),
    );
}

/// A straight reference from the origin that ends inside a random obstacle,
/// plus a disjoint decoy obstacle off the path.
fn invading_scenario(seed: u64, cert: &Certificate) -> ScenarioConfig {
    let mut r = rng(7000 + seed);
    let th = r.gen_range(0.0..TAU);
    let dist = r.gen_range(0.6..1.0);
    let radius = r.gen_range(0.15..0.3);
    let center = vec![dist * th.cos(), dist * th.sin()];
    let off = r.gen_range(0.0..0.5 * radius);
    let phi = r.gen_range(0.0..TAU);
    let goal = vec![center[0] + off * phi.cos(), center[1] + off * phi.sin()];
    let decoy_th = th + std::f64::consts::PI * r.gen_range(0.6..1.4);
    let decoy = vec![0.8 * decoy_th.cos(), 0.8 * decoy_th.sin()];
    let base = ScenarioConfig::default();
    ScenarioConfig {
        spec: SafetySpec::new(
            vec![Obstacle::new(center, radius).unwrap(), Obstacle::new(decoy, 0.2).unwrap()],
            1.0,
            cert.epsilon,
        )
        .unwrap(),
        waypoints: vec![
            Waypoint { t: 0.0, q: vec![0.0, 0.0] },
            Waypoint { t: 3.0, q: goal },
        ],
        seed,
        ..base
    }
}

fn criterion_9(rep: &mut Report, cert: &Certificate) {
    let mut on_ok = 0;
    let mut off_violated = 0;
    let mut worst_margin = f64::INFINITY;
    let mut initial_ok = 0;
    for seed in 0..20u64 {
        let cfg = invading_scenario(seed, cert);
        let on = run_scenario(&cfg, Some(cert)).unwrap();
        worst_margin = worst_margin.min(on.min_h + on.tolerance());
        if on.min_h >= -on.tolerance() && !on.halted() {
            on_ok += 1;
        }
        initial_ok += usize::from(on.initial_set_ok == Some(true));
        let off = run_scenario(&ScenarioConfig { filter_enabled: false, ..cfg }, Some(cert)).unwrap();
        off_violated += usize::from(off.min_h < 0.0);
    }
    rep.line(
        9,
        on_ok == 20 && off_violated == 20,
        format!(
            "filter on: {on_ok}/20 within −‖q̇‖max·dt (worst margin {worst_margin:.2e}); filter off: {off_violated}/20 violated; initial set held in {initial_ok}/20"
        ),
    );
}

fn main() -> ExitCode {
    // `cargo test` passes harness flags; only `--list` needs an answer.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let mut rep = Report { failures: 0 };
    criteria_1_2(&mut rep);
    criterion_3(&mut rep);
    criterion_4(&mut rep);
    criterion_5(&mut rep);
    criterion_6(&mut rep);
    let (cert, secs) = plant_certificate();
    criterion_7(&mut rep, &cert);
    criterion_8(&mut rep, &cert, secs);
    criterion_9(&mut rep, &cert);
    println!("acceptance: {} of 9 criteria failed", rep.failures);
    if rep.failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
