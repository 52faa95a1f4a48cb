//! Seeded invariant checks runnable outside the test harness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dispatch::{DeviceId, DispatchCommand, DispatchDiagnostics, DispatchMode, GeneratorRating, StorageRating};
use crate::linalg::Matrix;
use crate::mission::{run_mission, MissionError};
use crate::mpc::{AugmentedState, PredictionModel};
use crate::plant::{step_plant, LoadStep, PlantConfig, PlantFlags, PlantState};
use crate::qp::{qp_solve, KktReport, QpSettings, QuadraticProgram};
use crate::scenario::Scenario;
use crate::telemetry::write_trace_to;

pub const DEFAULT_SEED: u64 = 0x5eed_2019;
pub const KKT_TOL: f64 = 1e-6;
pub const FAST_PATH_TOL: f64 = 1e-8;
pub const ROLLOUT_TOL: f64 = 1e-10;
pub const BALANCE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }

    pub fn line(&self) -> String {
        format!("[{}] {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// A strictly convex QP with `n` variables and `m` rows whose feasible set
/// is nonempty by construction.
pub fn random_qp<R: Rng>(rng: &mut R, n: usize, m: usize) -> QuadraticProgram<f64> {
    let l = Matrix::from_fn(n, n, |_, _| rng.gen_range(-2.0..2.0));
    let hess = l.mul(&l.transpose()).add(&Matrix::identity(n).scale(0.1));
    let hess = Matrix::from_fn(n, n, |i, j| 0.5 * (hess[(i, j)] + hess[(j, i)]));
    let f: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
    let x_feasible: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let mut rows = Vec::with_capacity(m);
    while rows.len() < m {
        let row: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if crate::linalg::norm(&row) >= 0.1 {
            rows.push(row);
        }
    }
    let a = if m == 0 { Matrix::zeros(0, n) } else { Matrix::from_rows(&rows) };
    let b: Vec<f64> = rows
        .iter()
        .map(|r| crate::linalg::dot(r, &x_feasible) + rng.gen_range(0.0..1.0))
        .collect();
    QuadraticProgram::new(hess, f, a, b).expect("generated program is well formed")
}

fn random_shape<R: Rng>(rng: &mut R) -> (usize, usize) {
    (rng.gen_range(1..=2), rng.gen_range(0..=12))
}

/// Hildreth solutions satisfy the KKT conditions.
pub fn check_qp_kkt(seed: u64, count: usize) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let settings = QpSettings { fast_path: false, ..QpSettings::default() };
    let mut failures = 0;
    let mut worst = 0.0f64;
    for _ in 0..count {
        let (n, m) = random_shape(&mut rng);
        let qp = random_qp(&mut rng, n, m);
        match qp_solve(&qp, &settings) {
            Ok(sol) => {
                let r = KktReport::evaluate(&qp, &sol.delta_p, &sol.lambda);
                worst = worst.max(r.primal_violation).max(r.complementarity).max(r.stationarity);
                if !r.within(KKT_TOL) {
                    failures += 1;
                }
            }
            Err(_) => failures += 1,
        }
    }
    CheckOutcome::new("qp kkt", failures == 0, format!("{count} instances, {failures} failures, worst residual {worst:.2e}"))
}

/// The scalar clamp and the Hildreth iteration agree.
pub fn check_fast_path(seed: u64, count: usize) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fast = QpSettings::default();
    let slow = QpSettings { fast_path: false, ..QpSettings::default() };
    let mut worst = 0.0f64;
    let mut errors = 0;
    for _ in 0..count {
        let m = rng.gen_range(1..=12);
        let qp = random_qp(&mut rng, 1, m);
        match (qp_solve(&qp, &fast), qp_solve(&qp, &slow)) {
            (Ok(a), Ok(b)) => worst = worst.max((a.delta_p[0] - b.delta_p[0]).abs()),
            _ => errors += 1,
        }
    }
    CheckOutcome::new(
        "qp fast path",
        errors == 0 && worst <= FAST_PATH_TOL,
        format!("{count} instances, max |Δx| {worst:.2e}"),
    )
}

/// Drives the plant's storage with `p_chg` and returns the energy after each step.
pub fn plant_rollout(step: f64, e0: f64, p_chg: &[f64]) -> Vec<f64> {
    let big = 1e9;
    let cfg = PlantConfig {
        generators: vec![GeneratorRating { id: DeviceId::new("G"), p_min: -big, p_max: big, r_min: -big, r_max: big }],
        storage: StorageRating {
            id: DeviceId::new("ES"),
            e_capacity: big,
            p_abs_max: big,
            e_ref: e0,
            e_initial: e0,
        },
        step,
    };
    let idle = LoadStep { p_pr: 0.0, p_ppl: 0.0, delta_p_pr: 0.0, delta_p_ppl: 0.0 };
    let mut state = PlantState {
        step_index: 0,
        t: 0.0,
        p_gen: vec![0.0],
        p_es_bus: 0.0,
        e_es: e0,
        p_pr: 0.0,
        p_ppl: 0.0,
        flags: PlantFlags::default(),
        imbalance: 0.0,
    };
    p_chg
        .iter()
        .map(|&p| {
            let cmd = DispatchCommand {
                r_gen: vec![0.0],
                r_es_bus: 0.0,
                p_gen_cmd: vec![p],
                p_es_expected: -p,
                mode: DispatchMode::Tracking,
                diagnostics: DispatchDiagnostics::default(),
            };
            state = step_plant(&state, &cmd, &idle, &cfg);
            state.e_es
        })
        .collect()
}

/// The prediction `Gx + ΦΔP` matches the plant stepped with the same increments.
pub fn check_model_consistency(seed: u64, count: usize) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = 0.01;
    let mut worst = 0.0f64;
    for _ in 0..count {
        let np = rng.gen_range(1..=50);
        let nc = rng.gen_range(1..=np);
        let model = PredictionModel::new(step, np, nc).expect("valid horizons");
        let p_prev: f64 = rng.gen_range(-8.0..8.0);
        // high enough that the plant's lower energy clamp never engages
        let e0: f64 = rng.gen_range(20.0..30.0);
        let dp: Vec<f64> = (0..nc).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let predicted = model.predict(&AugmentedState::new(step * p_prev, e0), &dp);

        let mut p = p_prev;
        let powers: Vec<f64> = (0..np)
            .map(|i| {
                p += dp.get(i).copied().unwrap_or(0.0);
                p
            })
            .collect();
        let actual = plant_rollout(step, e0, &powers);
        for (a, b) in predicted.iter().zip(&actual) {
            worst = worst.max((a - b).abs());
        }
    }
    CheckOutcome::new(
        "model consistency",
        worst <= ROLLOUT_TOL,
        format!("{count} sequences, max |Ē − E| {worst:.2e} kJ"),
    )
}

/// Power balance, no storage power clamp, and byte-identical repeat runs.
pub fn check_mission(scenario: &Scenario) -> Vec<CheckOutcome> {
    let runs: Result<Vec<_>, MissionError> = (0..2).map(|_| run_mission(scenario)).collect();
    let runs = match runs {
        Ok(r) => r,
        Err(e) => return vec![CheckOutcome::new("mission", false, e.to_string())],
    };
    let trace = &runs[0].trace;
    let worst = trace
        .iter()
        .filter(|f| !f.flags.plant.es_power_clamped)
        .map(|f| f.balance_residual().abs())
        .fold(0.0, f64::max);
    let clamped = trace.iter().filter(|f| f.flags.plant.es_power_clamped).count();
    let csv = |t| {
        let mut buf = Vec::new();
        write_trace_to(t, &mut buf).expect("writing to memory");
        buf
    };
    let identical = csv(&runs[0].trace) == csv(&runs[1].trace);
    vec![
        CheckOutcome::new(
            "power balance",
            worst <= BALANCE_TOL && clamped == 0,
            format!("max residual {worst:.2e} kW, {clamped} clamped frames"),
        ),
        CheckOutcome::new("determinism", identical, format!("{} frames compared", trace.len())),
    ]
}

pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    let mut out = vec![
        check_qp_kkt(seed, 1000),
        check_fast_path(seed.wrapping_add(1), 1000),
        check_model_consistency(seed.wrapping_add(2), 100),
    ];
    out.extend(check_mission(&Scenario::default_mission()));
    out
}
