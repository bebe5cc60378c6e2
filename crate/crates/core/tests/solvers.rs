mod common;

use common::*;
use editedid::nulltext::EmbeddingSchedule;
use editedid::predictor::{embedding_gradient, finite_diff_embedding_grad, predict_x0, GradientMethod, NoisePredictor};
use editedid::sampler::{
    ddim_invert_step, ddim_step, dpm2m_step, half_log_snr, run_intervals, Direction, Dpm2mState, DpmOrder,
};
use editedid::schedule::{dpm_grid, HybridPlan, Interval, NoiseSchedule, Solver};

fn dpm_flow_error(steps: usize, order: DpmOrder) -> f64 {
    let sch = NoiseSchedule::default();
    let (oracle, _) = oracle_and_sample(31, 6, 1.0, uncoupled(6));
    let z = normals(&mut rng(32), 6);
    let g = dpm_grid(steps + 1).unwrap().values;
    let ivs: Vec<Interval> = g.windows(2).map(|w| Interval { from: w[0], to: w[1], solver: Solver::Dpm }).collect();
    let emb = EmbeddingSchedule::conditional_only(Vec::new(), steps);
    let rec = run_intervals(&ivs, &sch, &oracle, &z, &emb, Direction::Reconstruction, order).unwrap();
    rel_l2(rec.final_latent().unwrap(), &oracle.exact_flow(&z, g[0], g[steps], &[]).unwrap())
}

#[test]
fn dpm_second_order_beats_first_order() {
    for steps in [10, 20, 40] {
        assert!(dpm_flow_error(steps, DpmOrder::Second) < dpm_flow_error(steps, DpmOrder::First));
    }
}

#[test]
fn dpm_first_order_converges_linearly() {
    let (a, b) = (dpm_flow_error(40, DpmOrder::First), dpm_flow_error(80, DpmOrder::First));
    let order = (a / b).log2();
    assert!((0.8..1.3).contains(&order), "order {order}");
}

#[test]
fn ddim_step_matches_closed_form() {
    // z_k = √ᾱ_k·x0 + √(1−ᾱ_k)·ε computed independently of the coefficient path.
    let sch = NoiseSchedule::default();
    let (oracle, _) = oracle_and_sample(3, 5, 1.0, uncoupled(5));
    let z = normals(&mut rng(4), 5);
    let (t, k) = (0.7, 0.4);
    let eps = oracle.eps(&z, t, &[]).unwrap();
    let (at, ak) = (sch.alpha_bar(t), sch.alpha_bar(k));
    let want: Vec<f64> = (0..5)
        .map(|j| {
            let x0 = (z[j] - (1.0 - at).sqrt() * eps[j]) / at.sqrt();
            ak.sqrt() * x0 + (1.0 - ak).sqrt() * eps[j]
        })
        .collect();
    let got = ddim_step(&sch, &oracle, &z, t, k, &[]).unwrap();
    assert!(rel_l2(&got, &want) < 1e-13);
}

#[test]
fn ddim_inversion_then_step_is_near_identity_for_small_gaps() {
    let sch = NoiseSchedule::default();
    let (oracle, x) = oracle_and_sample(5, 4, 1.0, uncoupled(4));
    let up = ddim_invert_step(&sch, &oracle, &x, 0.3, 0.301, &[]).unwrap();
    let back = ddim_step(&sch, &oracle, &up, 0.301, 0.3, &[]).unwrap();
    assert!(rel_l2(&back, &x) < 1e-5);
}

#[test]
fn first_dpm_step_is_first_order_data_prediction() {
    let sch = NoiseSchedule::default();
    let (oracle, _) = oracle_and_sample(6, 4, 1.0, uncoupled(4));
    let z = normals(&mut rng(7), 4);
    let (t, k) = (0.8, 0.5);
    let (at, ak) = (sch.alpha_bar(t), sch.alpha_bar(k));
    let h = half_log_snr(ak) - half_log_snr(at);
    let x0 = predict_x0(&sch, &z, t, &oracle.eps(&z, t, &[]).unwrap()).unwrap();
    let want: Vec<f64> =
        (0..4).map(|j| ((1.0 - ak) / (1.0 - at)).sqrt() * z[j] - ak.sqrt() * ((-h).exp() - 1.0) * x0[j]).collect();
    let (got, _) = dpm2m_step(&sch, &oracle, &z, t, k, &[], &Dpm2mState::new(DpmOrder::Second)).unwrap();
    assert!(rel_l2(&got, &want) < 1e-13);
}

#[test]
fn ddim_round_trip_error_halves_with_step_doubling() {
    let sch = NoiseSchedule::default();
    let (oracle, x) = oracle_and_sample(11, 8, 1.0, uncoupled(8));
    let err = |steps: usize| {
        let ivs = HybridPlan::ddim_only(steps).unwrap().intervals();
        let emb = EmbeddingSchedule::conditional_only(Vec::new(), steps);
        let inv = run_intervals(&ivs, &sch, &oracle, &x, &emb, Direction::Inversion, DpmOrder::Second).unwrap();
        let z = inv.final_latent().unwrap();
        let rec = run_intervals(&ivs, &sch, &oracle, z, &emb, Direction::Reconstruction, DpmOrder::Second).unwrap();
        rel_l2(rec.final_latent().unwrap(), &x)
    };
    // Regression value for this oracle and seed.
    let e50 = err(50);
    assert!((e50 - 0.0418).abs() < 5e-4, "{e50}");
    let ratio = err(100) / e50;
    assert!((0.45..0.6).contains(&ratio), "{ratio}");
}

#[test]
fn analytic_embedding_gradient_matches_finite_differences() {
    let d = 6;
    let mut r = rng(40);
    let coupling: Vec<Vec<f64>> = (0..d).map(|_| normals(&mut r, 4)).collect();
    let (oracle, _) = oracle_and_sample(41, d, 1.0, coupling);
    let z = normals(&mut r, d);
    let e = normals(&mut r, 4);
    let adj = normals(&mut r, d);
    for t in [0.05, 0.5, 0.95] {
        let a = embedding_gradient(&oracle, &z, t, &e, &adj, GradientMethod::Auto).unwrap();
        let f = finite_diff_embedding_grad(&oracle, &z, t, &e, &adj, 1e-5).unwrap();
        let g = embedding_gradient(&oracle, &z, t, &e, &adj, GradientMethod::FiniteDifference).unwrap();
        assert!(rel_l2(&f, &a) < 1e-6, "t={t}");
        assert!(rel_l2(&g, &a) < 1e-6, "t={t}");
    }
}
