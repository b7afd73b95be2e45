use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use pfpp_core::cmim::{default_y_grid, residual_report, ResidualReport};
use pfpp_core::deconv::{self, TiltedKernel};
use pfpp_core::kernels::{kernel_from_binomial, kernel_from_bs, DEFAULT_BINOMIAL_CAP};
use pfpp_core::pfpp::{fit_to_samples, DEFAULT_DECONV_TOL};
use pfpp_core::sim::{self, ParamSource};
use pfpp_core::{
    AdvanceOptions, InverseMarginal, KernelLaw, PfppState, Route, RunOptions, ThetaBlock,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{read_state, RunConfig, Tolerances, VerifySettings};
use crate::{Cli, CliError};

fn load_config(cli: &Cli) -> Result<Option<RunConfig>, CliError> {
    let Some(path) = &cli.config else {
        return Ok(None);
    };
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(tol) = cli.tolerance {
        if !(tol > 0.0) {
            return Err(CliError::Config(format!(
                "tolerance must be positive, got {tol}"
            )));
        }
        cfg.tolerances.residual = Some(tol);
    }
    Ok(Some(cfg))
}

fn require(cfg: Option<RunConfig>) -> Result<RunConfig, CliError> {
    cfg.ok_or_else(|| CliError::Config("--config is required for this command".into()))
}

fn out_dir(cli: &Cli, cfg: Option<&RunConfig>) -> Result<PathBuf, CliError> {
    let dir = cli
        .out
        .clone()
        .or_else(|| cfg.map(|c| c.output_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::write(&path, contents)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    write(dir, name, &(text + "\n"))
}

fn advance_options(cfg: &RunConfig) -> AdvanceOptions {
    AdvanceOptions {
        tolerance: cfg.tolerances.residual,
        y_grid: default_y_grid(),
        deconv: cfg.deconv.clone(),
        binomial_cap: cfg.market.binomial_cap.unwrap_or(DEFAULT_BINOMIAL_CAP),
    }
}

fn build_state(cfg: &RunConfig, thetas: &[ThetaBlock]) -> Result<PfppState, CliError> {
    let opts = advance_options(cfg);
    let mut state = PfppState::init(cfg.initial.clone(), cfg.anchor)
        .map_err(|e| CliError::Config(e.to_string()))?;
    for (k, theta) in thetas.iter().enumerate() {
        state =
            state
                .advance(theta, cfg.route, &opts)
                .map_err(|e| match CliError::from_solver(e) {
                    CliError::Config(m) => CliError::Config(format!("period {}: {m}", k + 1)),
                    CliError::Gate(m) => CliError::Gate(format!("period {}: {m}", k + 1)),
                    other => CliError::Solver(format!("period {}: {other}", k + 1)),
                })?;
    }
    Ok(state)
}

/// The saved state, or one constructed from the configuration.
fn state_from(cli: &Cli, cfg: Option<&RunConfig>) -> Result<PfppState, CliError> {
    match (&cli.state, cfg) {
        (Some(path), _) => read_state(path),
        (None, Some(cfg)) => build_state(cfg, &cfg.market.thetas),
        (None, None) => Err(CliError::Config("pass --state or --config".into())),
    }
}

fn period_residuals(state: &PfppState) -> Result<Vec<ResidualReport>, pfpp_core::PfppError> {
    let grid = default_y_grid();
    (1..=state.period)
        .map(|k| {
            residual_report(
                &state.marginals[k],
                &state.marginals[k - 1],
                state.kernel(k)?,
                &grid,
            )
        })
        .collect()
}

fn residuals_csv(reports: &[ResidualReport]) -> String {
    let mut s = String::from("period,y,lhs,rhs,rel_err\n");
    for (k, rep) in reports.iter().enumerate() {
        for r in &rep.rows {
            let _ = writeln!(
                s,
                "{},{:e},{:e},{:e},{:e}",
                k + 1,
                r.y,
                r.lhs,
                r.rhs,
                r.rel_err
            );
        }
    }
    s
}

pub fn construct(cli: &Cli) -> Result<String, CliError> {
    let cfg = require(load_config(cli)?)?;
    let state = build_state(&cfg, &cfg.market.thetas)?;
    let reports = period_residuals(&state).map_err(CliError::from_solver)?;
    let dir = out_dir(cli, Some(&cfg))?;
    write_json(&dir, "state.json", &state)?;
    write(&dir, "residuals.csv", &residuals_csv(&reports))?;
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    Ok(format!(
        "constructed {} period(s), max residual {worst:.3e}; wrote {}",
        state.period,
        dir.display()
    ))
}

pub fn simulate(cli: &Cli) -> Result<String, CliError> {
    let cfg = load_config(cli)?;
    let settings = cfg
        .as_ref()
        .map(|c| c.simulation.clone())
        .unwrap_or_default();
    let seed = cli.seed.or(cfg.as_ref().map(|c| c.seed)).unwrap_or(0);
    let mut opts = RunOptions {
        holdings_max_steps: settings.holdings_max_steps,
        ..Default::default()
    };
    if let Some(c) = &cfg {
        opts.route = c.route;
        opts.advance = advance_options(c);
        opts.anchor = c.anchor;
    }
    let scenario = cfg.as_ref().and_then(|c| c.scenario.clone());
    let out = match (&scenario, &cli.state) {
        (Some(spec), None) if !matches!(spec.source, ParamSource::Fixed { .. }) => {
            let c = cfg.as_ref().expect("scenario comes from a config");
            let mut spec = spec.clone();
            spec.seed = seed;
            sim::run_paths(&spec, &c.initial, settings.x0, settings.n_paths, &opts)
        }
        (Some(spec), None) => {
            let c = cfg.as_ref().expect("scenario comes from a config");
            let ParamSource::Fixed { thetas } = &spec.source else {
                unreachable!()
            };
            let horizon = spec.horizon.min(thetas.len());
            let state = build_state(c, &thetas[..horizon])?;
            sim::run_paths_on_state(&state, seed, settings.x0, settings.n_paths, &opts)
        }
        _ => {
            let state = state_from(cli, cfg.as_ref())?;
            sim::run_paths_on_state(&state, seed, settings.x0, settings.n_paths, &opts)
        }
    }
    .map_err(|e| CliError::Config(e.to_string()))?;

    let dir = out_dir(cli, cfg.as_ref())?;
    write(&dir, "paths.csv", &out.paths_csv())?;
    write(&dir, "holdings.csv", &out.holdings_csv())?;
    let rate = out.failure_rate();
    let summary = sim::summarize(&out).map_err(|e| CliError::Simulation(e.to_string()))?;
    write_json(&dir, "summary.json", &summary)?;
    if rate > settings.max_failure_rate {
        return Err(CliError::Simulation(format!(
            "{} of {} paths failed (rate {rate:.3} above {}); first: {}",
            out.failures.len(),
            summary.n_paths,
            settings.max_failure_rate,
            out.failures.first().map_or("", |f| f.error.as_str())
        )));
    }
    Ok(format!(
        "simulated {} path(s), {} failed; mean deflated terminal wealth {:.6} (stderr {:.2e}); wrote {}",
        summary.n_paths,
        summary.n_failed,
        summary.deflated_terminal_mean,
        summary.deflated_terminal_stderr,
        dir.display()
    ))
}

#[derive(Debug, Clone, Serialize)]
pub struct GateRow {
    pub period: usize,
    pub gate: String,
    pub value: f64,
    pub limit: f64,
    pub pass: bool,
}

fn gate_limits(route: Route, tol: &Tolerances) -> (f64, f64, f64) {
    match route {
        Route::Deconv => (
            tol.residual.unwrap_or(DEFAULT_DECONV_TOL),
            tol.budget_deconv,
            tol.martingale_deconv,
        ),
        _ => (
            tol.residual
                .unwrap_or(pfpp_core::cmim::DEFAULT_RESIDUAL_TOL),
            tol.budget_cmim,
            tol.martingale_cmim,
        ),
    }
}

fn check_period(
    state: &PfppState,
    k: usize,
    tol: &Tolerances,
    v: &VerifySettings,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<GateRow>, pfpp_core::PfppError> {
    let route = state.periods[k - 1].route;
    let (res_tol, budget_tol, mart_tol) = gate_limits(route, tol);
    let xs = v.x_grid();
    let row = |gate: &str, value: f64, limit: f64| GateRow {
        period: k,
        gate: gate.into(),
        value,
        limit,
        pass: value <= limit,
    };
    let residual = residual_report(
        &state.marginals[k],
        &state.marginals[k - 1],
        state.kernel(k)?,
        &default_y_grid(),
    )?;
    let budget = state.verify_budget(k, &xs)?;
    let mart = state.verify_martingale(k, &xs)?;
    let mut rows = vec![
        row("residual", residual.max_rel_err, res_tol),
        row("budget", budget.max_deviation, budget_tol),
        row("martingale", mart.max_deviation, mart_tol),
    ];
    for &x in &v.x_probe {
        let rep = state.verify_supermartingale(k, x, v.n_perturbations, v.epsilon, rng)?;
        // The gate is `min gap >= -slack`, reported as `-min gap <= slack`.
        rows.push(row(
            &format!("supermartingale(x={x})"),
            -rep.min_gap,
            tol.supermartingale_slack,
        ));
    }
    Ok(rows)
}

pub fn verify(cli: &Cli) -> Result<String, CliError> {
    let cfg = load_config(cli)?;
    let state = state_from(cli, cfg.as_ref())?;
    let tol = cfg
        .as_ref()
        .map(|c| c.tolerances.clone())
        .unwrap_or_default();
    let mut tol = tol;
    if let Some(t) = cli.tolerance {
        tol.residual = Some(t);
    }
    let v = cfg
        .as_ref()
        .map(|c| c.verification.clone())
        .unwrap_or_default();
    let seed = cli.seed.or(cfg.as_ref().map(|c| c.seed)).unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for k in 1..=state.period {
        match check_period(&state, k, &tol, &v, &mut rng) {
            Ok(r) => rows.extend(r),
            Err(e) => errors.push((k, e.to_string())),
        }
    }
    let reports = period_residuals(&state).map_err(|e| CliError::Verify(e.to_string()))?;
    let dir = out_dir(cli, cfg.as_ref())?;
    write(&dir, "residuals.csv", &residuals_csv(&reports))?;
    let mut csv = String::from("period,gate,value,limit,pass\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{:e},{:e},{}",
            r.period, r.gate, r.value, r.limit, r.pass
        );
    }
    write(&dir, "verification.csv", &csv)?;
    write_json(&dir, "verification.json", &rows)?;

    if let Some((k, e)) = errors.first() {
        return Err(CliError::Verify(format!("period {k}: {e}")));
    }
    if let Some(r) = rows.iter().find(|r| !r.pass) {
        return Err(CliError::Verify(format!(
            "gate {} failed at period {}: {:.3e} > {:.1e}",
            r.gate, r.period, r.value, r.limit
        )));
    }
    Ok(format!(
        "all {} gate(s) passed over {} period(s); wrote {}",
        rows.len(),
        state.period,
        dir.display()
    ))
}

#[derive(Debug, Clone, Serialize)]
struct DeconvReport {
    residual: f64,
    trusted_t: (f64, f64),
    zeroed: [usize; 2],
    spectral_zeros: Vec<f64>,
    ill_posed: bool,
    closed_form_max_rel_error: Option<f64>,
}

pub fn deconv(cli: &Cli) -> Result<String, CliError> {
    let cfg = require(load_config(cli)?)?;
    let dcfg = cfg
        .deconv
        .clone()
        .ok_or_else(|| CliError::Config("the deconv command needs a deconv section".into()))?;
    let theta = cfg.market.thetas.first().ok_or_else(|| {
        CliError::Config("the deconv command needs one market parameter block".into())
    })?;
    let law: KernelLaw = match theta {
        ThetaBlock::Binomial(p) => {
            kernel_from_binomial(p, cfg.market.binomial_cap.unwrap_or(DEFAULT_BINOMIAL_CAP))
        }
        ThetaBlock::Bs(p) => kernel_from_bs(p),
    }
    .map_err(|e| CliError::Config(e.to_string()))?;
    let dcfg = fit_to_samples(&dcfg, &cfg.initial);
    let sol = deconv::solve(&cfg.initial, &law, &dcfg).map_err(CliError::from_solver)?;

    let (lo, hi) = sol.trusted;
    let grid: Vec<f64> = default_y_grid()
        .into_iter()
        .filter(|y| y.ln() >= lo && y.ln() <= hi)
        .collect();
    let residual = deconv::convolution_residual(&sol.marginal, &law, &cfg.initial, &grid)
        .map_err(CliError::from_solver)?;
    let closed_form_max_rel_error = match cfg.initial.measure() {
        Some(m) if law.cmim_integrability_check(m.gamma_min(), m.gamma_max()) => {
            let exact = pfpp_core::cmim::solve_period(m, &law).map_err(CliError::from_solver)?;
            let mut worst: f64 = 0.0;
            for &y in &grid {
                let a = sol.marginal.eval(y).map_err(CliError::from_solver)?;
                let b = exact.eval(y).map_err(CliError::from_solver)?;
                worst = worst.max((a / b - 1.0).abs());
            }
            Some(worst)
        }
        _ => None,
    };

    let dir = out_dir(cli, Some(&cfg))?;
    if let InverseMarginal::Grid(g) = &sol.marginal {
        let mut csv = String::from("t,y,value\n");
        let (t0, _) = g.t_range();
        for (j, v) in g.values().iter().enumerate() {
            let t = t0 + g.dt() * j as f64;
            let _ = writeln!(csv, "{t:e},{:e},{v:e}", t.exp());
        }
        write(&dir, "solution.csv", &csv)?;
    }
    for (k, gamma) in [dcfg.gamma1, dcfg.gamma2].into_iter().enumerate() {
        let mu = TiltedKernel::from_law(&law, gamma).map_err(CliError::from_solver)?;
        write(
            &dir,
            &format!("spectrum_{}.csv", k + 1),
            &deconv::spectrum_csv(&deconv::spectrum(&mu, &dcfg)),
        )?;
    }
    let report = DeconvReport {
        residual,
        trusted_t: sol.trusted,
        zeroed: sol.zeroed,
        spectral_zeros: sol.spectral_zeros.iter().map(|z| z.xi).collect(),
        ill_posed: sol.ill_posed(),
        closed_form_max_rel_error,
    };
    write_json(&dir, "deconv.json", &report)?;
    if report.ill_posed {
        eprintln!(
            "warning: the kernel transform vanishes at {} frequencies; the solution may not be unique",
            report.spectral_zeros.len()
        );
    }
    let limit = cfg.tolerances.residual.unwrap_or(DEFAULT_DECONV_TOL);
    if !(residual <= limit) {
        return Err(CliError::Gate(format!(
            "residual {residual:.3e} exceeds {limit:.1e}"
        )));
    }
    Ok(format!(
        "deconvolution residual {residual:.3e} on t in [{lo:.2}, {hi:.2}]; wrote {}",
        dir.display()
    ))
}

#[derive(Debug, Clone, Serialize)]
struct PeriodReport {
    period: usize,
    route: Option<Route>,
    residual: Option<f64>,
    anchor: f64,
    marginal_at_one: f64,
    kernel_log_variance: Option<f64>,
    theta: Option<ThetaBlock>,
}

pub fn report(cli: &Cli) -> Result<String, CliError> {
    let cfg = load_config(cli)?;
    let state = state_from(cli, cfg.as_ref())?;
    let xs = cfg
        .as_ref()
        .map(|c| c.verification.clone())
        .unwrap_or_default()
        .x_grid();
    let dir = out_dir(cli, cfg.as_ref())?;
    let mut periods = Vec::with_capacity(state.period + 1);
    let mut text = String::new();
    let _ = writeln!(text, "period  route   residual    anchor        I(1)");
    for k in 0..=state.period {
        let curve = state
            .reconstruct_utility(k, &xs)
            .map_err(|e| CliError::Solver(e.to_string()))?;
        write(&dir, &format!("utility_{k}.csv"), &curve.to_csv())?;
        let rec = k.checked_sub(1).map(|j| &state.periods[j]);
        let at_one = state.marginals[k]
            .eval(1.0)
            .map_err(|e| CliError::Solver(e.to_string()))?;
        let p = PeriodReport {
            period: k,
            route: rec.map(|r| r.route),
            residual: rec.map(|r| r.residual),
            anchor: state.anchors[k],
            marginal_at_one: at_one,
            kernel_log_variance: rec.map(|r| r.kernel.log_variance()),
            theta: rec.map(|r| r.theta.clone()),
        };
        let route = p
            .route
            .map_or("-".to_string(), |r| format!("{r:?}").to_lowercase());
        let residual = p.residual.map_or("-".to_string(), |r| format!("{r:.3e}"));
        let _ = writeln!(
            text,
            "{k:>6}  {route:<6}  {residual:<10}  {:<12.6}  {at_one:.6}",
            p.anchor
        );
        periods.push(p);
    }
    write_json(&dir, "report.json", &periods)?;
    let _ = write!(text, "wrote {}", dir.display());
    Ok(text)
}
