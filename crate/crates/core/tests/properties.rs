mod common;

use common::{brute_force_qp, objective, random_program, scalar_rollout};
use ems_core::dispatch::{
    classify_mode, generator_weights, DeviceId, Direction, DispatchMode, Dispatcher, GeneratorRating, StorageRating,
    StorageSnapshot,
};
use ems_core::mission::run_mission;
use ems_core::mpc::{mpc_step, AugmentedState, PredictionModel, StorageEnvelope};
use ems_core::qp::{hildreth_iterate_with, qp_solve, solve_unconstrained, DualProblem, KktReport, QpSettings};
use ems_core::linalg::Cholesky;
use ems_core::scenario::{Action, MissionEvent, Scenario};
use ems_core::selftest::plant_rollout;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gen(id: &str, p_max: f64, r: f64) -> GeneratorRating {
    GeneratorRating { id: DeviceId::new(id), p_min: 0.0, p_max, r_min: -r, r_max: r }
}

fn storage() -> StorageRating {
    StorageRating { id: DeviceId::new("ES"), e_capacity: 10.0, p_abs_max: 8.0, e_ref: 8.0, e_initial: 8.0 }
}

fn wide_envelope(e_ref: f64) -> StorageEnvelope<f64> {
    StorageEnvelope {
        p_chg_min: -1e6,
        p_chg_max: 1e6,
        r_chg_min: -1e6,
        r_chg_max: 1e6,
        e_min: 0.0,
        e_max: 1e6,
        e_ref,
        p_chg_now: 0.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn converged_solutions_satisfy_kkt(seed in any::<u64>(), n in 1usize..=4, m in 0usize..=12) {
        let qp = random_program(&mut rng(seed), n, m);
        let sol = qp_solve(&qp, &QpSettings { fast_path: false, ..QpSettings::default() }).unwrap();
        prop_assume!(sol.converged);
        let r = KktReport::evaluate(&qp, &sol.delta_p, &sol.lambda);
        for (s, b) in qp.slack(&sol.delta_p).iter().zip(&qp.b_ieq) {
            prop_assert!(*s <= 1e-9 * (1.0 + b.abs()), "{r:?}");
        }
        prop_assert!(sol.lambda.iter().all(|&l| l >= 0.0));
        prop_assert!(r.complementarity <= 1e-9, "{r:?}");
        prop_assert!(r.stationarity <= 1e-6, "{r:?}");
    }

    #[test]
    fn objective_matches_enumeration(seed in any::<u64>(), n in 1usize..=2, m in 0usize..=12) {
        let qp = random_program(&mut rng(seed), n, m);
        let sol = qp_solve(&qp, &QpSettings::default()).unwrap();
        let (_, best) = brute_force_qp(&qp).expect("feasible by construction");
        prop_assert!((objective(&qp, &sol.delta_p) - best).abs() <= 1e-6);
    }

    #[test]
    fn scalar_fast_path_matches_hildreth(seed in any::<u64>(), m in 1usize..=12) {
        let qp = random_program(&mut rng(seed), 1, m);
        let fast = qp_solve(&qp, &QpSettings::default()).unwrap();
        let slow = qp_solve(&qp, &QpSettings { fast_path: false, ..QpSettings::default() }).unwrap();
        prop_assert!((fast.delta_p[0] - slow.delta_p[0]).abs() <= 1e-8);
    }

    #[test]
    fn dual_objective_never_increases(seed in any::<u64>(), n in 1usize..=4, m in 1usize..=12) {
        let qp = random_program(&mut rng(seed), n, m);
        let dual = DualProblem::build(&qp, &Cholesky::factor(&qp.m).unwrap());
        let mut values = vec![0.0];
        hildreth_iterate_with(&dual.h, &dual.k, 1e-12, 200, |_, l| values.push(dual.objective(l)));
        for w in values.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-10 * (1.0 + w[0].abs()), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn prediction_matches_plant(
        np in 1usize..=60,
        nc_frac in 0.0f64..1.0,
        p_prev in -8.0f64..8.0,
        e0 in 0.0f64..10.0,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let nc = 1 + ((np - 1) as f64 * nc_frac) as usize;
        let step = 0.01;
        let mut r = rng(seed);
        let dp: Vec<f64> = (0..nc).map(|_| r.gen_range(-0.05..0.05)).collect();
        let model = PredictionModel::new(step, np, nc).unwrap();
        let predicted = model.predict(&AugmentedState::new(step * p_prev, e0), &dp);
        let expected = scalar_rollout(step, p_prev, e0, &dp, np);
        let mut p = p_prev;
        let powers: Vec<f64> = (0..np).map(|i| { p += dp.get(i).copied().unwrap_or(0.0); p }).collect();
        // lifted so the plant's lower energy clamp never engages
        let lift = 20.0;
        let plant = plant_rollout(step, e0 + lift, &powers);
        for i in 0..np {
            prop_assert!((predicted[i] - expected[i]).abs() <= 1e-10);
            prop_assert!((predicted[i] + lift - plant[i]).abs() <= 1e-10);
        }
    }

    #[test]
    fn unconstrained_step_is_closed_form(np in 1usize..=80, de in -0.05f64..0.05, e in 50.0f64..60.0, e_ref in 50.0f64..60.0) {
        let model = PredictionModel::new(0.01, np, 1).unwrap();
        let x = AugmentedState::new(de, e);
        let env = wide_envelope(e_ref);
        let qp = model.quadratic_program(&x, &env).unwrap();
        let closed = solve_unconstrained(&qp.m, &qp.f).unwrap()[0] / 0.01;
        let out = mpc_step(&model, &x, &env, &QpSettings::default()).unwrap();
        prop_assert!((out.r_chg - closed).abs() <= 1e-9);
        prop_assert_eq!(qp.b_ieq.len(), 4 + 2 * np);
    }

    #[test]
    fn constraint_rows_count(np in 1usize..=40, nc_frac in 0.0f64..1.0) {
        let nc = 1 + ((np - 1) as f64 * nc_frac) as usize;
        let model = PredictionModel::new(0.01, np, nc).unwrap();
        let qp = model.quadratic_program(&AugmentedState::new(0.0, 5.0), &wide_envelope(5.0)).unwrap();
        prop_assert_eq!(qp.b_ieq.len(), 4 * nc + 2 * np);
        prop_assert_eq!(model.constraint_count(), 4 * nc + 2 * np);
    }

    #[test]
    fn weights_ignore_common_scale(r1 in 0.01f64..5.0, r2 in 0.01f64..5.0, d1 in 0.01f64..5.0, k in 0.001f64..1000.0) {
        let g = |r: f64, d: f64| GeneratorRating { id: DeviceId::new("G"), p_min: 0.0, p_max: 1.0, r_min: -d, r_max: r };
        let base = vec![g(r1, d1), g(r2, r1)];
        let scaled = vec![g(k * r1, k * d1), g(k * r2, k * r1)];
        for dir in [Direction::Up, Direction::Down] {
            let a = generator_weights(&base, dir).unwrap();
            let b = generator_weights(&scaled, dir).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn dispatch_balances_ramps(
        r_l in -1.0f64..1.0,
        p_l in 0.0f64..10.0,
        e in 0.5f64..9.5,
        track in any::<bool>(),
        p1 in 0.0f64..4.0,
        p2 in 0.0f64..2.0,
    ) {
        let gens = vec![gen("GEN1", 4.0, 0.2), gen("GEN2", 2.0, 0.1)];
        // the storage covers whatever the generators did not at the previous load
        let p_chg = p1 + p2 - (p_l - 0.01 * r_l);
        prop_assume!(p_chg.abs() <= 7.9 && p_l - 6.0 <= 7.9);
        let model = PredictionModel::new(0.01, 50, 1).unwrap();
        let mut d = Dispatcher::new(gens, storage(), model, QpSettings::default(), vec![p1, p2]).unwrap();
        if track {
            d.set_soc_reference(8.0);
        }
        let snap = StorageSnapshot { e_es: e, delta_e: 0.01 * p_chg, p_chg };
        let cmd = d.dispatch_step(r_l, p_l, &snap).unwrap();
        let total: f64 = cmd.r_gen.iter().sum::<f64>() + cmd.r_es_bus;
        prop_assert!((total - r_l).abs() <= 1e-9, "{total} vs {r_l}");
    }

    #[test]
    fn mode_is_continuous_at_the_boundary(e in 1.0f64..9.0) {
        prop_assume!(e <= 8.0);
        let gens = vec![gen("GEN1", 4.0, 0.2), gen("GEN2", 2.0, 0.1)];
        let edge = 0.2 + 0.1;
        prop_assert_eq!(classify_mode(edge, &gens), DispatchMode::Tracking);
        let step_at = |r_l: f64| {
            let model = PredictionModel::new(0.01, 50, 1).unwrap();
            let mut d = Dispatcher::new(gens.clone(), storage(), model, QpSettings::default(), vec![2.0, 1.0]).unwrap();
            d.set_soc_reference(8.0);
            d.dispatch_step(r_l, 3.0, &StorageSnapshot { e_es: e, delta_e: 0.0, p_chg: 0.0 }).unwrap()
        };
        let at = step_at(edge);
        let above = step_at(edge + 1e-9);
        prop_assert_eq!(above.mode, DispatchMode::SaturatedUp);
        prop_assert!(at.r_es_bus.abs() <= 1e-9);
        prop_assert!((at.r_es_bus - above.r_es_bus).abs() <= 1e-6);
    }

}

fn random_scenario(seed: u64) -> Scenario {
    use rand::Rng;
    let mut r = rng(seed);
    let mut s = Scenario::default_mission();
    s.t_end = 40.0;
    s.storage.e_initial = r.gen_range(3.0..9.0);
    s.initial_propulsion = r.gen_range(0.5..3.0);
    let mut events = vec![MissionEvent { t: 1.0, action: Action::SetSocRef { e_ref: r.gen_range(4.0..9.0) } }];
    let mut t = 2.0;
    while t < 35.0 {
        let action = if r.gen_bool(0.3) {
            Action::FirePulseTrain { count: r.gen_range(1..3), period: 6.0, peak: r.gen_range(0.5..2.0), rate: 10.0, hold: 0.6 }
        } else {
            Action::SetPropulsion { target: r.gen_range(0.5..3.5), rate: r.gen_range(0.05..0.6) }
        };
        events.push(MissionEvent { t, action });
        t += r.gen_range(12.5..16.0);
    }
    s.events = events;
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn closed_loop_error_shrinks(e0 in 0.5f64..9.5, e_ref in 0.5f64..9.5) {
        let step = 0.01;
        let r_max = 0.3;
        let model = PredictionModel::new(step, 500, 1).unwrap();
        let env = StorageEnvelope {
            p_chg_min: -8.0,
            p_chg_max: 8.0,
            r_chg_min: -r_max,
            r_chg_max: r_max,
            e_min: 0.0,
            e_max: 10.0,
            e_ref,
            p_chg_now: 0.0,
        };
        let deadband = step * step * r_max;
        let (mut p, mut e) = (0.0f64, e0);
        for _ in 0..1000 {
            let out = mpc_step(&model, &AugmentedState::new(step * p, e), &StorageEnvelope { p_chg_now: p, ..env }, &QpSettings::default()).unwrap();
            p += step * out.r_chg;
            let next = e + step * p;
            if (e - e_ref).abs() > deadband {
                prop_assert!((next - e_ref).abs() <= (e - e_ref).abs() + 1e-12, "{e} -> {next} (ref {e_ref})");
            }
            e = next;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn mission_traces_respect_plant_laws(seed in any::<u64>()) {
        let s = random_scenario(seed);
        let out = run_mission(&s).unwrap();
        let step = s.controller.sample_time;
        let tr = &out.trace;
        for w in tr.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            for ((p, q), g) in b.p_gen.iter().zip(&a.p_gen).zip(&s.generators) {
                prop_assert!(p - q <= step * g.r_max + 1e-12 && p - q >= step * g.r_min - 1e-12);
            }
            if !b.flags.plant.any() {
                prop_assert_eq!(b.e_es, a.e_es - step * b.p_es_bus);
                prop_assert!(b.balance_residual().abs() <= 1e-9);
            }
        }
        // energy over clamp-free stretches
        let mut start = 0;
        for i in 1..=tr.len() {
            if i == tr.len() || tr[i].flags.plant.any() {
                let drawn: f64 = tr[start + 1..i].iter().map(|f| step * f.p_es_bus).sum();
                if i > start + 1 {
                    prop_assert!((tr[i - 1].e_es - tr[start].e_es + drawn).abs() <= 1e-9);
                }
                start = i;
            }
        }
    }

    #[test]
    fn pulse_integral_matches_trapezoid(peak in 0.5f64..3.0, rate in 2.0f64..20.0, hold in 0.0f64..1.5) {
        let mut s = Scenario::default_mission();
        s.t_end = 6.0;
        s.storage.e_initial = 8.0;
        s.events = vec![MissionEvent { t: 1.0, action: Action::FirePulseTrain { count: 1, period: 6.0, peak, rate, hold } }];
        let out = run_mission(&s).unwrap();
        let simulated: f64 = out.trace.iter().map(|f| s.controller.sample_time * f.p_ppl).sum();
        let analytic = peak * (hold + peak / rate);
        prop_assert!((simulated - analytic).abs() <= s.controller.sample_time * peak);
    }
}
