use pfpp_core::deconv::DeconvConfig;
use pfpp_core::{
    AdvanceOptions, Atom, BinomialPeriodParams, BinomialStep, BsPeriodParams, InverseMarginal,
    PfppState, RiskAversionMeasure, Route, ThetaBlock,
};

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

fn two_atoms(g1: f64, g2: f64, lo: f64, hi: f64) -> InverseMarginal {
    InverseMarginal::Cmim(
        RiskAversionMeasure::new(
            vec![
                Atom {
                    gamma: g1,
                    weight: 0.5,
                },
                Atom {
                    gamma: g2,
                    weight: 0.5,
                },
            ],
            vec![],
            lo,
            hi,
        )
        .unwrap(),
    )
}

#[test]
fn lognormal_deconvolution_state_passes_gates() {
    let i0 = two_atoms(1.5, 3.0, 1.4, 3.1);
    let s0 = PfppState::init(i0, 0.0).unwrap();
    let theta = ThetaBlock::Bs(BsPeriodParams::new(vec![0.3]));
    let opts = AdvanceOptions {
        deconv: Some(DeconvConfig::new(1.4, 3.1)),
        ..Default::default()
    };
    let sd = s0.advance(&theta, Route::Deconv, &opts).unwrap();
    let sc = s0
        .advance(&theta, Route::Cmim, &AdvanceOptions::default())
        .unwrap();
    assert_eq!(sd.periods[0].route, Route::Deconv);
    assert!(matches!(sd.marginals[1], InverseMarginal::Grid(_)));
    assert!(sd.periods[0].residual < 1e-6);

    let xs = log_grid(0.1, 10.0, 40);
    assert!(sd.verify_budget(1, &xs).unwrap().max_deviation < 1e-4);
    assert!(sd.verify_martingale(1, &xs).unwrap().max_deviation < 1e-4);
    for &x in &xs {
        let ud = sd.reconstruct_utility(1, &[x]).unwrap().points[0].1;
        let uc = sc.reconstruct_utility(1, &[x]).unwrap().points[0].1;
        assert!((ud - uc).abs() < 1e-6, "x = {x}: {ud} vs {uc}");
    }
    let text = serde_json::to_string(&sd).unwrap();
    let back: PfppState = serde_json::from_str(&text).unwrap();
    assert_eq!(back, sd);
}

#[test]
fn binomial_deconvolution_matches_closed_form() {
    let i0 = two_atoms(2.0, 2.6, 1.9, 3.0);
    let theta = ThetaBlock::Binomial(BinomialPeriodParams {
        steps: vec![BinomialStep {
            u: 1.2,
            d: 0.9,
            p: 0.6,
        }],
    });
    let mut cfg = DeconvConfig::new(1.9, 3.0);
    cfg.half_width = 160.0;
    cfg.n_points = 1 << 16;
    cfg.taper_fraction = 0.1;
    let opts = AdvanceOptions {
        deconv: Some(cfg),
        ..Default::default()
    };
    let s0 = PfppState::init(i0, 0.0).unwrap();
    let sd = s0.advance(&theta, Route::Deconv, &opts).unwrap();
    let sc = s0
        .advance(&theta, Route::Cmim, &AdvanceOptions::default())
        .unwrap();
    let worst = log_grid(0.1, 10.0, 301)
        .into_iter()
        .map(|y| (sd.marginals[1].eval(y).unwrap() / sc.marginals[1].eval(y).unwrap() - 1.0).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-8, "relative error {worst:e}");
}

#[test]
fn deconvolution_route_needs_a_config() {
    let s0 = PfppState::init(two_atoms(1.5, 3.0, 1.4, 3.1), 0.0).unwrap();
    let theta = ThetaBlock::Bs(BsPeriodParams::new(vec![0.3]));
    let err = s0
        .advance(&theta, Route::Deconv, &AdvanceOptions::default())
        .unwrap_err();
    assert!(matches!(err, pfpp_core::PfppError::Config(_)));
}

#[test]
fn grid_backed_state_rejects_closed_form_route() {
    let s0 = PfppState::init(two_atoms(1.5, 3.0, 1.4, 3.1), 0.0).unwrap();
    let theta = ThetaBlock::Bs(BsPeriodParams::new(vec![0.3]));
    // The second period solves only over the first period's sampled range, and
    // sample errors near that range's edges need a higher spectral floor.
    let mut cfg = DeconvConfig::new(1.4, 3.1);
    cfg.half_width = 60.0;
    cfg.n_points = 1 << 15;
    cfg.fourier_floor = 1e-4;
    let opts = AdvanceOptions {
        deconv: Some(cfg),
        ..Default::default()
    };
    let s1 = s0.advance(&theta, Route::Deconv, &opts).unwrap();
    assert!(matches!(
        s1.advance(&theta, Route::Cmim, &opts),
        Err(pfpp_core::PfppError::UnsupportedRoute(_))
    ));
    let s2 = s1.advance(&theta, Route::Auto, &opts).unwrap();
    assert_eq!(s2.periods[1].route, Route::Deconv);
    let exact = s0
        .advance(&theta, Route::Cmim, &AdvanceOptions::default())
        .and_then(|s| s.advance(&theta, Route::Cmim, &AdvanceOptions::default()))
        .unwrap();
    let worst = log_grid(0.2, 5.0, 101)
        .into_iter()
        .map(|y| {
            (s2.marginals[2].eval(y).unwrap() / exact.marginals[2].eval(y).unwrap() - 1.0).abs()
        })
        .fold(0.0, f64::max);
    assert!(worst < 1e-6, "relative error {worst:e}");
    let xs = log_grid(0.3, 3.0, 20);
    assert!(s2.verify_budget(2, &xs).unwrap().max_deviation < 1e-4);
}
