use fedgraph::numcore::{Activation, DenseLayer, Matrix, Mlp};
use fedgraph::privacy::{PrivacyProbeConfig, PrivacyProbeState};

fn single_unit(w: [f64; 2], b: f64) -> Mlp<f64> {
    let layer = DenseLayer::new(Matrix::from_vec(1, 2, w.to_vec()).unwrap(), vec![b], Activation::Relu).unwrap();
    Mlp::new(vec![layer]).unwrap()
}

/// Inner objective maximised over a 1e-2 grid of [-1, 1]^2.
fn grid_max(w: [f64; 2], b: f64, x: [f64; 2], lambda: f64) -> f64 {
    let f = |p: [f64; 2]| (w[0] * p[0] + w[1] * p[1] + b).max(0.0);
    let h = f(x);
    let mut best = f64::NEG_INFINITY;
    for i in 0..=200 {
        for k in 0..=200 {
            let p = [-1.0 + i as f64 * 0.01, -1.0 + k as f64 * 0.01];
            let v = (p[0] - x[0]).powi(2) + (p[1] - x[1]).powi(2) - lambda * (f(p) - h).powi(2);
            best = best.max(v);
        }
    }
    best
}

#[test]
fn inner_ascent_reaches_grid_search_optimum() {
    let cfg = PrivacyProbeConfig {
        // below 1/(λ|w|²) the penalty term is a contraction, so x̄ slides along the level set
        lr_x: 3e-5,
        clip_x: 1e3,
        outer_rounds: 200_000,
        inner_steps_theta: 0,
        ..Default::default()
    };
    let cases = [
        ([0.8, -0.6], 0.1, [0.2, 0.3]),
        ([0.8, -0.6], 0.1, [-0.5, 0.6]),
        ([1.5, 0.5], -0.2, [0.1, -0.7]),
        ([-0.3, 1.2], 0.0, [0.4, 0.25]),
        ([0.8, -0.6], 0.1, [1.0, 0.3]),
        ([1.0, 1.0], 0.5, [-1.0, -1.0]),
        ([-0.3, 1.2], 0.0, [-1.0, 0.25]),
    ];
    for (seed, (w, b, x)) in cases.into_iter().enumerate() {
        let net = single_unit(w, b);
        let mut probe = PrivacyProbeState::new(1, &net, Matrix::from_rows(&[x]).unwrap(), 1, &cfg, seed as u64).unwrap();
        let reached = probe.run(&cfg).unwrap();
        let oracle = grid_max(w, b, x, cfg.lambda);
        println!("case {seed}: reached {reached:.4}, grid {oracle:.4}");
        assert!(oracle > 0.0);
        assert!(reached >= 0.9 * oracle, "case {seed}: {reached} < 0.9 * {oracle}");
    }
}
