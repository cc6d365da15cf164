use fxdist::graph::{SwitchRule, Topology, TopologyKind, TopologySchedule};
use fxdist::objective::LocalObjective;
use fxdist::protocol::{Deadzone, Mode, ProtocolParams, ZetaRate};
use fxdist::sim::{self, monotone_tail, InitialState, Scenario, Simulation, StopTolerances, Trace, TraceRow};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn kind(k: usize) -> TopologyKind {
    [TopologyKind::Line, TopologyKind::Ring, TopologyKind::Star][k % 3]
}

fn switching(n: usize, rule: SwitchRule) -> TopologySchedule {
    let graphs = (0..3).map(|k| Topology::build(kind(k), n).unwrap()).collect();
    TopologySchedule::new(graphs, 0.5, rule).unwrap()
}

/// Diagonal quadratics `0.5 x'Qx + b'x` with curvature in `[0.5, 2]`.
fn quadratics(curv: &[Vec<f64>], lin: &[Vec<f64>]) -> Vec<LocalObjective> {
    curv.iter()
        .zip(lin)
        .map(|(q, b)| {
            LocalObjective::quadratic(DMatrix::from_diagonal(&DVector::from_vec(q.clone())), DVector::from_vec(b.clone()), 0.0)
                .unwrap()
        })
        .collect()
}

fn team_argmin(curv: &[Vec<f64>], lin: &[Vec<f64>]) -> Vec<f64> {
    let d = curv[0].len();
    (0..d)
        .map(|k| -lin.iter().map(|b| b[k]).sum::<f64>() / curv.iter().map(|q| q[k]).sum::<f64>())
        .collect()
}

#[derive(Debug, Clone)]
struct Case {
    curv: Vec<Vec<f64>>,
    lin: Vec<Vec<f64>>,
    x0: Vec<Vec<f64>>,
    second_order: bool,
    graph: usize,
    gain: f64,
    high: f64,
    low: f64,
}

fn case() -> impl Strategy<Value = Case> {
    (3usize..7, 1usize..3).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(prop::collection::vec(0.5f64..2.0, d), n),
            prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), n),
            prop::collection::vec(prop::collection::vec(-5.0f64..5.0, d), n),
            any::<bool>(),
            0usize..3,
            1.0f64..5.0,
            1.05f64..1.5,
            0.5f64..0.95,
        )
            .prop_map(|(curv, lin, x0, second_order, graph, gain, high, low)| Case {
                curv,
                lin,
                x0,
                second_order,
                graph,
                gain,
                high,
                low,
            })
    })
}

fn scenario(c: &Case, schedule: TopologySchedule, rate: ZetaRate) -> Scenario {
    let mode = if c.second_order { Mode::SecondOrderStrict } else { Mode::FirstOrderStrong { k: 0.5 } };
    let mut params = ProtocolParams::uniform(mode, c.gain, c.high, c.low);
    params.p = 10.0 * c.gain;
    params.deadzone = Deadzone::StepScaled;
    params.zeta_rate = rate;
    Scenario {
        objectives: quadratics(&c.curv, &c.lin),
        schedule,
        params,
        dt: 1e-4,
        horizon: 0.01,
        initial_x: InitialState::Explicit(c.x0.clone()),
        stop: None,
        record_stride: 10,
        seed: 0,
        x_star: Some(team_argmin(&c.curv, &c.lin)),
        f_star: None,
        record_states: false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn network_sums_vanish_at_every_step(c in case()) {
        let n = c.curv.len();
        let s = scenario(&c, TopologySchedule::fixed(Topology::build(kind(c.graph), n).unwrap()).unwrap(), ZetaRate::Secant);
        let mut sim = Simulation::new(&s).unwrap();
        for _ in 0..100 {
            let r = sim.step().unwrap();
            let tol = 1e-12 * r.magnitude.max(1.0) * n as f64;
            prop_assert!(r.omega_sum_norm <= tol, "omega sum {} > {tol}", r.omega_sum_norm);
            prop_assert!(r.u_tilde_sum_norm <= tol, "u_tilde sum {} > {tol}", r.u_tilde_sum_norm);
        }
    }

    #[test]
    fn estimator_sum_is_conserved(c in case(), rate in prop::sample::select(vec![ZetaRate::Secant, ZetaRate::Analytic])) {
        let n = c.curv.len();
        let s = scenario(&c, switching(n, SwitchRule::RoundRobin), rate);
        let mut sim = Simulation::new(&s).unwrap();
        for _ in 0..200 {
            sim.step().unwrap();
            let t = sim.time();
            prop_assert!(sim.conservation_defect() <= 10.0 * s.dt * t, "{rate:?}: defect {} at t = {t}", sim.conservation_defect());
        }
    }

    #[test]
    fn backward_difference_lags_by_one_increment(c in case()) {
        let n = c.curv.len();
        let s = scenario(&c, switching(n, SwitchRule::RoundRobin), ZetaRate::BackwardDifference);
        let mut sim = Simulation::new(&s).unwrap();
        let ed = sim.zeta(0).len();
        let zeta_sum = |sim: &Simulation| (0..ed).map(|k| (0..n).map(|i| sim.zeta(i)[k]).sum::<f64>()).collect::<Vec<_>>();
        for _ in 0..200 {
            let before = zeta_sum(&sim);
            sim.step().unwrap();
            let after = zeta_sum(&sim);
            let lag = before.iter().zip(&after).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt();
            let scale = after.iter().map(|v| v.abs()).fold(1.0, f64::max);
            prop_assert!((sim.conservation_defect() - lag).abs() <= 1e-9 * scale, "defect {} vs lag {lag}", sim.conservation_defect());
        }
    }

    #[test]
    fn replay_is_bit_identical(c in case(), seed in any::<u64>()) {
        let n = c.curv.len();
        let mut s = scenario(&c, switching(n, SwitchRule::SeededRandom(seed)), ZetaRate::Secant);
        s.initial_x = InitialState::RandomBox { lo: -4.0, hi: 4.0 };
        s.seed = seed;
        let a = sim::run(&s).unwrap();
        let b = sim::run(&s).unwrap();
        prop_assert_eq!(&a.rows, &b.rows);
        let bits = |t: &Trace| t.final_x.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn trace_csv_round_trips(vals in prop::collection::vec((0.0f64..1e3, 0.0f64..1e3, prop::option::of(0.0f64..1e3), 0usize..3), 1..20)) {
        let mut t = 0.0;
        let rows: Vec<TraceRow> = vals
            .iter()
            .map(|(a, b, e, k)| {
                t += 0.25;
                TraceRow {
                    t,
                    grad_sum_norm: *a,
                    max_disagreement: *b,
                    max_err_to_opt: *e,
                    theta_disagreement: a * 0.5,
                    graph_label: kind(*k),
                    objective_gap: None,
                    conservation_defect: 0.0,
                }
            })
            .collect();
        let trace = Trace { rows, ..Trace::default() };
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let back = Trace::read_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(back.rows, trace.rows);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn argmin_does_not_depend_on_switching(c in case(), seed in any::<u64>()) {
        let n = c.curv.len();
        prop_assume!(n <= 4);
        let run = |rule| {
            let mut s = scenario(&c, switching(n, rule), ZetaRate::Secant);
            s.dt = 2e-5;
            s.horizon = 10.0;
            s.record_stride = 5000;
            s.stop = Some(StopTolerances { grad_sum_tol: 1e-10, disagreement_tol: 1e-8 });
            sim::run(&s).unwrap()
        };
        let a = run(SwitchRule::RoundRobin);
        let b = run(SwitchRule::SeededRandom(seed));
        let star = team_argmin(&c.curv, &c.lin);
        for x in a.final_x.iter().chain(&b.final_x) {
            for (v, w) in x.iter().zip(&star) {
                prop_assert!((v - w).abs() <= 1e-6, "{v} vs {w}");
            }
        }
    }
}

#[test]
fn conservation_over_ten_seconds_on_quartic_team() {
    let objs = (1..=5).map(|i| LocalObjective::shifted_quartic(vec![i as f64]).unwrap()).collect();
    let mut params = ProtocolParams::uniform(Mode::SecondOrderStrict, 10.0, 1.2, 0.8);
    params.p = 80.0;
    params.deadzone = Deadzone::StepScaled;
    let s = Scenario {
        objectives: objs,
        schedule: switching(5, SwitchRule::RoundRobin),
        params,
        dt: 1e-4,
        horizon: 10.0,
        initial_x: InitialState::RandomBox { lo: 1.0, hi: 5.0 },
        stop: None,
        record_stride: 500,
        seed: 9,
        x_star: Some(vec![3.0]),
        f_star: None,
        record_states: false,
    };
    let trace = sim::run(&s).unwrap();
    assert!(trace.rows.last().unwrap().t >= 10.0 - 1e-9);
    for r in &trace.rows {
        assert!(r.conservation_defect <= 10.0 * s.dt * r.t.max(s.dt), "defect {} at {}", r.conservation_defect, r.t);
    }
    assert_eq!(monotone_tail(&trace, 1e-3, 10.0), Some(true));
    assert!(trace.rows.last().unwrap().max_err_to_opt.unwrap() < 1e-6);
}
