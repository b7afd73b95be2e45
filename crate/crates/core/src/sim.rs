//! Scenario generation, Monte Carlo wealth paths, binomial replication and
//! intra-period wealth for the Black–Scholes backend.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PfppError, Result};
use crate::kernels::{BinomialPeriodParams, BinomialStep, BsPeriodParams, KernelLaw, ThetaBlock};
use crate::marginal::InverseMarginal;
use crate::pfpp::{AdvanceOptions, PfppState, Route};

/// Leaf and root agreement required of a replication.
pub const REPLICATION_TOL: f64 = 1e-10;

/// Largest binomial tree replicated explicitly.
pub const MAX_REPLICATION_STEPS: usize = 20;

/// A one-dimensional sampling law for scenario parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ParamDist {
    Constant { value: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl ParamDist {
    fn range(&self) -> (f64, f64) {
        match *self {
            ParamDist::Constant { value } => (value, value),
            ParamDist::Uniform { lo, hi } => (lo, hi),
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        let (lo, hi) = self.range();
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(PfppError::Validation(format!(
                "{name}: bad range [{lo}, {hi}]"
            )));
        }
        Ok(())
    }

    /// Whether every draw lies in the open interval `(lo, hi)`.
    fn within(&self, lo: f64, hi: f64) -> bool {
        let (a, b) = self.range();
        a > lo && b < hi
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            ParamDist::Constant { value } => value,
            ParamDist::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ParamSource {
    /// The same parameter blocks on every path; must cover the horizon.
    Fixed {
        thetas: Vec<ThetaBlock>,
    },
    IidBinomial {
        n_steps: usize,
        u: ParamDist,
        d: ParamDist,
        p: ParamDist,
    },
    IidBs {
        lambda: Vec<ParamDist>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub horizon: usize,
    pub source: ParamSource,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn fixed(thetas: Vec<ThetaBlock>, seed: u64) -> Self {
        ScenarioSpec {
            horizon: thetas.len(),
            source: ParamSource::Fixed { thetas },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.source {
            ParamSource::Fixed { thetas } => {
                if thetas.len() < self.horizon {
                    return Err(PfppError::Validation(format!(
                        "horizon {} exceeds the {} fixed parameter blocks",
                        self.horizon,
                        thetas.len()
                    )));
                }
                thetas.iter().try_for_each(ThetaBlock::validate)
            }
            ParamSource::IidBinomial { n_steps, u, d, p } => {
                u.validate("u")?;
                d.validate("d")?;
                p.validate("p")?;
                if *n_steps == 0
                    || !u.within(1.0, f64::INFINITY)
                    || !d.within(0.0, 1.0)
                    || !p.within(0.0, 1.0)
                {
                    return Err(PfppError::Validation(
                        "binomial sampler needs n_steps >= 1, u > 1, 0 < d < 1, 0 < p < 1".into(),
                    ));
                }
                Ok(())
            }
            ParamSource::IidBs { lambda } => {
                if lambda.is_empty() {
                    return Err(PfppError::Validation("lambda sampler is empty".into()));
                }
                lambda.iter().try_for_each(|l| l.validate("lambda"))
            }
        }
    }

    fn draw_theta<R: Rng + ?Sized>(&self, period: usize, rng: &mut R) -> ThetaBlock {
        match &self.source {
            ParamSource::Fixed { thetas } => thetas[period - 1].clone(),
            ParamSource::IidBinomial { n_steps, u, d, p } => {
                ThetaBlock::Binomial(BinomialPeriodParams {
                    steps: (0..*n_steps)
                        .map(|_| BinomialStep {
                            u: u.sample(rng),
                            d: d.sample(rng),
                            p: p.sample(rng),
                        })
                        .collect(),
                })
            }
            ParamSource::IidBs { lambda } => ThetaBlock::Bs(BsPeriodParams::new(
                lambda.iter().map(|l| l.sample(rng)).collect(),
            )),
        }
    }
}

/// RNG for one (seed, path, period) cell.
pub fn period_rng(seed: u64, path: usize, period: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng.set_word_pos((period as u128) << 32);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubStepHolding {
    pub step: usize,
    pub stock: f64,
    pub delta: f64,
    pub bond: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeriodStep {
    pub period: usize,
    pub theta: Arc<ThetaBlock>,
    pub rho: f64,
    pub wealth: f64,
    /// Up (true) or down moves of a binomial period.
    pub moves: Vec<bool>,
    pub holdings: Vec<SubStepHolding>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathRecord {
    pub path: usize,
    pub x0: f64,
    pub steps: Vec<PeriodStep>,
}

impl PathRecord {
    pub fn terminal_wealth(&self) -> f64 {
        self.steps.last().map_or(self.x0, |s| s.wealth)
    }

    /// `prod rho_k`.
    pub fn deflator(&self) -> f64 {
        self.steps.iter().map(|s| s.rho).product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathFailure {
    pub path: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub records: Vec<PathRecord>,
    pub failures: Vec<PathFailure>,
}

impl RunOutput {
    pub fn failure_rate(&self) -> f64 {
        let n = self.records.len() + self.failures.len();
        if n == 0 {
            0.0
        } else {
            self.failures.len() as f64 / n as f64
        }
    }

    /// `path,period,theta,rho,wealth`, theta as quoted JSON.
    pub fn paths_csv(&self) -> String {
        let mut s = String::from("path,period,theta,rho,wealth\n");
        for r in &self.records {
            for st in &r.steps {
                let theta = serde_json::to_string(&*st.theta)
                    .unwrap_or_default()
                    .replace('"', "\"\"");
                let _ = writeln!(
                    s,
                    "{},{},\"{theta}\",{:e},{:e}",
                    r.path, st.period, st.rho, st.wealth
                );
            }
        }
        s
    }

    /// `path,period,step,stock,delta,bond` for recorded binomial holdings.
    pub fn holdings_csv(&self) -> String {
        let mut s = String::from("path,period,step,stock,delta,bond\n");
        for r in &self.records {
            for st in &r.steps {
                for h in &st.holdings {
                    let _ = writeln!(
                        s,
                        "{},{},{},{:e},{:e},{:e}",
                        r.path, st.period, h.step, h.stock, h.delta, h.bond
                    );
                }
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub route: Route,
    pub advance: AdvanceOptions,
    /// `U_0(I_0(1))`.
    pub anchor: f64,
    /// Replicate binomial periods with at most this many sub-steps.
    pub holdings_max_steps: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            route: Route::Auto,
            advance: AdvanceOptions::default(),
            anchor: 0.0,
            holdings_max_steps: 12,
        }
    }
}

/// Builds the state for a list of parameter blocks.
pub fn construct_state(
    i0: &InverseMarginal,
    anchor: f64,
    thetas: &[ThetaBlock],
    route: Route,
    opts: &AdvanceOptions,
) -> Result<PfppState> {
    let mut state = PfppState::init(i0.clone(), anchor)?;
    for theta in thetas {
        state = state.advance(theta, route, opts)?;
    }
    Ok(state)
}

/// Simulates `n_paths` optimal wealth paths; per-path solver failures are
/// collected rather than returned.
pub fn run_paths(
    spec: &ScenarioSpec,
    i0: &InverseMarginal,
    x0: f64,
    n_paths: usize,
    opts: &RunOptions,
) -> Result<RunOutput> {
    check_x0(x0)?;
    spec.validate()?;
    let results: Vec<PathResult> = match &spec.source {
        ParamSource::Fixed { thetas } => {
            let thetas = &thetas[..spec.horizon];
            match construct_state(i0, opts.anchor, thetas, opts.route, &opts.advance) {
                Ok(state) => return run_paths_on_state(&state, spec.seed, x0, n_paths, opts),
                Err(e) => vec![Err(e.to_string()); n_paths],
            }
        }
        _ => (0..n_paths)
            .into_par_iter()
            .map(|path| {
                let state = PfppState::init(i0.clone(), opts.anchor).map_err(|e| e.to_string())?;
                simulate_path(spec, &state, Some(i0), &[], x0, path, opts)
            })
            .collect(),
    };
    Ok(collect(results))
}

/// Simulates paths over the periods of an already constructed state.
pub fn run_paths_on_state(
    state: &PfppState,
    seed: u64,
    x0: f64,
    n_paths: usize,
    opts: &RunOptions,
) -> Result<RunOutput> {
    check_x0(x0)?;
    state.validate()?;
    let thetas: Vec<ThetaBlock> = state.periods.iter().map(|p| p.theta.clone()).collect();
    let arcs: Vec<Arc<ThetaBlock>> = thetas.iter().cloned().map(Arc::new).collect();
    let spec = ScenarioSpec::fixed(thetas, seed);
    let results: Vec<PathResult> = (0..n_paths)
        .into_par_iter()
        .map(|path| simulate_path(&spec, state, None, &arcs, x0, path, opts))
        .collect();
    Ok(collect(results))
}

type PathResult = std::result::Result<PathRecord, String>;

fn check_x0(x0: f64) -> Result<()> {
    if x0 > 0.0 && x0.is_finite() {
        Ok(())
    } else {
        Err(PfppError::Validation(format!(
            "initial wealth must be positive, got {x0}"
        )))
    }
}

fn collect(results: Vec<PathResult>) -> RunOutput {
    let mut out = RunOutput {
        records: Vec::with_capacity(results.len()),
        failures: Vec::new(),
    };
    for (path, r) in results.into_iter().enumerate() {
        match r {
            Ok(rec) => out.records.push(rec),
            Err(error) => out.failures.push(PathFailure { path, error }),
        }
    }
    out
}

fn simulate_path(
    spec: &ScenarioSpec,
    prebuilt: &PfppState,
    iid_start: Option<&InverseMarginal>,
    thetas: &[Arc<ThetaBlock>],
    x0: f64,
    path: usize,
    opts: &RunOptions,
) -> std::result::Result<PathRecord, String> {
    let mut state = std::borrow::Cow::Borrowed(prebuilt);
    let mut x = x0;
    let mut steps = Vec::with_capacity(spec.horizon);
    for k in 1..=spec.horizon {
        let mut rng = period_rng(spec.seed, path, k);
        let theta = if iid_start.is_some() {
            let theta = spec.draw_theta(k, &mut rng);
            let next = state
                .advance(&theta, opts.route, &opts.advance)
                .map_err(|e| format!("period {k}: {e}"))?;
            state = std::borrow::Cow::Owned(next);
            Arc::new(theta)
        } else {
            thetas[k - 1].clone()
        };
        let (rho, moves) = match &*theta {
            ThetaBlock::Binomial(p) => {
                let moves: Vec<bool> = p.steps.iter().map(|s| rng.random::<f64>() < s.p).collect();
                (leaf_rho(&p.steps, &moves), moves)
            }
            ThetaBlock::Bs(_) => (
                state.kernel(k).map_err(|e| e.to_string())?.sample(&mut rng),
                Vec::new(),
            ),
        };
        let holdings = match &*theta {
            ThetaBlock::Binomial(p) if p.steps.len() <= opts.holdings_max_steps => {
                let rep =
                    replicate_optimal(&state, k, x).map_err(|e| format!("period {k}: {e}"))?;
                rep.holdings_along(&moves)
            }
            _ => Vec::new(),
        };
        let next = state
            .wealth_step(k, x, rho)
            .map_err(|e| format!("period {k}: {e}"))?;
        if !(next > 0.0 && next.is_finite()) {
            return Err(format!("period {k}: wealth {next} is not positive"));
        }
        x = next;
        steps.push(PeriodStep {
            period: k,
            theta,
            rho,
            wealth: x,
            moves,
            holdings,
        });
    }
    Ok(PathRecord { path, x0, steps })
}

fn leaf_rho(steps: &[BinomialStep], moves: &[bool]) -> f64 {
    steps
        .iter()
        .zip(moves)
        .map(|(s, &up)| if up { s.rho_up() } else { s.rho_down() })
        .product()
}

/// One node of a replicating strategy; `index` bit `j` is set when sub-step
/// `j` moved up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationNode {
    pub depth: usize,
    pub index: usize,
    pub stock: f64,
    pub value: f64,
    pub delta: f64,
    pub bond: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationLeaf {
    pub index: usize,
    pub stock: f64,
    pub rho: f64,
    pub payoff: f64,
}

/// Backward-induction hedge over a full binomial tree with unit initial stock
/// price and zero interest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replication {
    pub steps: Vec<BinomialStep>,
    /// `nodes[depth][index]` for depths `0..N`.
    pub nodes: Vec<Vec<ReplicationNode>>,
    pub leaves: Vec<ReplicationLeaf>,
}

impl Replication {
    fn parent_value_at(&self, depth: usize, index: usize, stock: f64) -> f64 {
        let parent = &self.nodes[depth - 1][index & ((1 << (depth - 1)) - 1)];
        parent.delta * stock + parent.bond
    }

    /// Largest `|portfolio value - payoff|` over the leaves.
    pub fn max_leaf_error(&self) -> f64 {
        let n = self.steps.len();
        self.leaves
            .iter()
            .map(|l| (self.parent_value_at(n, l.index, l.stock) - l.payoff).abs())
            .fold(0.0, f64::max)
    }

    /// Largest mismatch between the incoming portfolio value at an interior
    /// node and the cost of the portfolio set up there.
    pub fn max_self_financing_error(&self) -> f64 {
        self.nodes
            .iter()
            .skip(1)
            .flatten()
            .map(|nd| {
                let incoming = self.parent_value_at(nd.depth, nd.index, nd.stock);
                (incoming - (nd.delta * nd.stock + nd.bond)).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Holdings met along a realized sequence of moves.
    pub fn holdings_along(&self, moves: &[bool]) -> Vec<SubStepHolding> {
        let mut index = 0;
        let mut out = Vec::with_capacity(self.nodes.len());
        for (depth, level) in self.nodes.iter().enumerate() {
            let nd = &level[index];
            out.push(SubStepHolding {
                step: depth,
                stock: nd.stock,
                delta: nd.delta,
                bond: nd.bond,
            });
            if moves.get(depth).copied().unwrap_or(false) {
                index |= 1 << depth;
            }
        }
        out
    }
}

/// Replicates `payoff(rho_leaf)` over the sub-steps of one binomial period.
pub fn binomial_replication<F>(
    params: &BinomialPeriodParams,
    x_start: f64,
    payoff: F,
) -> Result<Replication>
where
    F: Fn(f64) -> Result<f64>,
{
    let steps = &params.steps;
    let n = steps.len();
    if n == 0 {
        return Err(PfppError::Validation(
            "replication needs at least one sub-step".into(),
        ));
    }
    if n > MAX_REPLICATION_STEPS {
        return Err(PfppError::Capacity(format!(
            "{n} sub-steps exceed the replication cap of {MAX_REPLICATION_STEPS}"
        )));
    }
    for s in steps {
        if s.u == s.d {
            return Err(PfppError::Validation(format!(
                "degenerate sub-step u = d = {}",
                s.u
            )));
        }
        s.validate()?;
    }
    let stock_at = |depth: usize, index: usize| -> f64 {
        (0..depth)
            .map(|j| {
                if index >> j & 1 == 1 {
                    steps[j].u
                } else {
                    steps[j].d
                }
            })
            .product()
    };
    let leaves = (0..1usize << n)
        .map(|index| {
            let moves: Vec<bool> = (0..n).map(|j| index >> j & 1 == 1).collect();
            let rho = leaf_rho(steps, &moves);
            Ok(ReplicationLeaf {
                index,
                stock: stock_at(n, index),
                rho,
                payoff: payoff(rho)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut values: Vec<f64> = leaves.iter().map(|l| l.payoff).collect();
    let mut nodes: Vec<Vec<ReplicationNode>> = vec![Vec::new(); n];
    for depth in (0..n).rev() {
        let step = steps[depth];
        let q = step.q();
        let width = 1usize << depth;
        let mut level = Vec::with_capacity(width);
        let mut next_values = Vec::with_capacity(width);
        for index in 0..width {
            let up = values[index | width];
            let down = values[index];
            let stock = stock_at(depth, index);
            let value = q * up + (1.0 - q) * down;
            let delta = (up - down) / (stock * (step.u - step.d));
            level.push(ReplicationNode {
                depth,
                index,
                stock,
                value,
                delta,
                bond: value - delta * stock,
            });
            next_values.push(value);
        }
        nodes[depth] = level;
        values = next_values;
    }
    let root = nodes[0][0].value;
    if (root - x_start).abs() > REPLICATION_TOL * x_start.abs().max(1.0) {
        return Err(PfppError::BudgetMismatch(format!(
            "payoff costs {root} at the root, starting wealth is {x_start}"
        )));
    }
    Ok(Replication {
        steps: steps.clone(),
        nodes,
        leaves,
    })
}

/// Replicates `X*_k = I_k(rho I_{k-1}^-1(x_prev))` over binomial period `k`.
pub fn replicate_optimal(state: &PfppState, k: usize, x_prev: f64) -> Result<Replication> {
    let record = state
        .periods
        .get(k.wrapping_sub(1))
        .ok_or_else(|| PfppError::Validation(format!("period {k} not constructed")))?;
    let ThetaBlock::Binomial(params) = &record.theta else {
        return Err(PfppError::UnsupportedRoute(
            "replication needs a binomial period".into(),
        ));
    };
    let y = state.marginal(k - 1)?.invert(x_prev)?;
    let marginal = state.marginal(k)?;
    binomial_replication(params, x_prev, |rho| marginal.eval(y * rho))
}

/// `E[prod rho_k X*_T]` by enumerating every sub-step path of every binomial
/// period.
pub fn enumerate_budget(state: &PfppState, x0: f64) -> Result<f64> {
    let mut params = Vec::with_capacity(state.period);
    for (k, rec) in state.periods.iter().enumerate() {
        match &rec.theta {
            ThetaBlock::Binomial(p) => params.push(p),
            _ => {
                return Err(PfppError::UnsupportedRoute(format!(
                    "period {} is not binomial",
                    k + 1
                )))
            }
        }
    }
    let total: usize = params.iter().map(|p| p.steps.len()).sum();
    if total > 24 {
        return Err(PfppError::Capacity(format!(
            "{total} sub-steps are too many to enumerate"
        )));
    }
    fn walk(state: &PfppState, params: &[&BinomialPeriodParams], k: usize, x: f64) -> Result<f64> {
        if k > params.len() {
            return Ok(x);
        }
        let steps = &params[k - 1].steps;
        let mut acc = 0.0;
        for index in 0..1usize << steps.len() {
            let moves: Vec<bool> = (0..steps.len()).map(|j| index >> j & 1 == 1).collect();
            let prob: f64 = steps
                .iter()
                .zip(&moves)
                .map(|(s, &up)| if up { s.p } else { 1.0 - s.p })
                .product();
            let rho = leaf_rho(steps, &moves);
            let next = state.wealth_step(k, x, rho)?;
            acc += prob * rho * walk(state, params, k + 1, next)?;
        }
        Ok(acc)
    }
    walk(state, &params, 1, x0)
}

/// Wealth at fraction `t` of a Black–Scholes period given the partial kernel
/// `rho_t = Z_t / Z_{k-1}`:
/// `X_t = E[rho_rest I_k(y rho_t rho_rest)]` with `rho_rest` log-normal of
/// log-variance `(1 - t)|lambda|^2`, which for a CMIM marginal is `I_k` with
/// every atom reweighted by `E[rho_rest^(1 - 1/gamma)]`.
pub fn bs_wealth_interpolation(
    state: &PfppState,
    k: usize,
    x_prev: f64,
    t: f64,
    rho_t: f64,
) -> Result<f64> {
    if !(0.0..1.0).contains(&t) {
        return Err(PfppError::Validation(format!(
            "t must lie in [0, 1), got {t}"
        )));
    }
    if !(rho_t > 0.0 && rho_t.is_finite()) {
        return Err(PfppError::Domain(format!(
            "partial kernel must be positive, got {rho_t}"
        )));
    }
    let law = state.kernel(k)?;
    let m = state.marginal(k)?.measure().ok_or_else(|| {
        PfppError::UnsupportedRoute("intra-period wealth needs a CMIM-backed marginal".into())
    })?;
    let y = state.marginal(k - 1)?.invert(x_prev)?;
    match law {
        KernelLaw::LogNormal { sigma2 } => {
            let rest = KernelLaw::log_normal((1.0 - t) * sigma2)?;
            m.tilted(&rest, 1.0).eval(y * rho_t)
        }
        _ if law.is_degenerate() => m.eval(y * rho_t),
        _ => Err(PfppError::UnsupportedRoute(
            "intra-period wealth needs a Black-Scholes period".into(),
        )),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantile {
    pub level: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodSummary {
    pub period: usize,
    pub mean: f64,
    pub std: f64,
    pub mean_log: f64,
    pub std_log: f64,
    pub quantiles: Vec<Quantile>,
    /// Mean and standard error of `rho_k X_k - X_{k-1}`.
    pub budget_residual: f64,
    pub budget_residual_stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n_paths: usize,
    pub n_failed: usize,
    pub failures: Vec<PathFailure>,
    pub periods: Vec<PeriodSummary>,
    /// Mean and standard error of `prod rho_k X_T`, to compare with `x0`.
    pub deflated_terminal_mean: f64,
    pub deflated_terminal_stderr: f64,
}

pub const QUANTILE_LEVELS: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Linearly interpolated quantile of sorted data.
fn quantile(sorted: &[f64], level: f64) -> f64 {
    let h = level * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(out: &RunOutput) -> Result<Summary> {
    if out.records.is_empty() {
        return Err(PfppError::Validation(
            "no successful paths to summarize".into(),
        ));
    }
    let horizon = out.records[0].steps.len();
    let mut periods = Vec::with_capacity(horizon);
    for k in 1..=horizon {
        let wealth: Vec<f64> = out.records.iter().map(|r| r.steps[k - 1].wealth).collect();
        let logs: Vec<f64> = wealth.iter().map(|w| w.ln()).collect();
        let budget: Vec<f64> = out
            .records
            .iter()
            .map(|r| {
                let prev = if k == 1 { r.x0 } else { r.steps[k - 2].wealth };
                r.steps[k - 1].rho * r.steps[k - 1].wealth - prev
            })
            .collect();
        let (mean, std) = mean_std(&wealth);
        let (mean_log, std_log) = mean_std(&logs);
        let (br, br_std) = mean_std(&budget);
        let mut sorted = wealth.clone();
        sorted.sort_by(f64::total_cmp);
        periods.push(PeriodSummary {
            period: k,
            mean,
            std,
            mean_log,
            std_log,
            quantiles: QUANTILE_LEVELS
                .iter()
                .map(|&level| Quantile {
                    level,
                    value: quantile(&sorted, level),
                })
                .collect(),
            budget_residual: br,
            budget_residual_stderr: br_std / (budget.len() as f64).sqrt(),
        });
    }
    let deflated: Vec<f64> = out
        .records
        .iter()
        .map(|r| r.deflator() * r.terminal_wealth())
        .collect();
    let (dm, ds) = mean_std(&deflated);
    Ok(Summary {
        n_paths: out.records.len() + out.failures.len(),
        n_failed: out.failures.len(),
        failures: out.failures.clone(),
        periods,
        deflated_terminal_mean: dm,
        deflated_terminal_stderr: ds / (deflated.len() as f64).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::RiskAversionMeasure;

    fn crra(gamma: f64) -> InverseMarginal {
        InverseMarginal::Cmim(
            RiskAversionMeasure::single_atom(gamma, 1.0, 0.5 * gamma, 2.0 * gamma).unwrap(),
        )
    }

    fn binom(steps: &[(f64, f64, f64)]) -> BinomialPeriodParams {
        BinomialPeriodParams {
            steps: steps
                .iter()
                .map(|&(u, d, p)| BinomialStep { u, d, p })
                .collect(),
        }
    }

    #[test]
    fn log_paths_are_closed_form() {
        let spec = ScenarioSpec::fixed(vec![ThetaBlock::Bs(BsPeriodParams::new(vec![0.3])); 3], 11);
        let out = run_paths(&spec, &crra(1.0), 2.0, 50, &RunOptions::default()).unwrap();
        assert!(out.failures.is_empty());
        for r in &out.records {
            let expect = 2.0 / r.deflator();
            assert!((r.terminal_wealth() - expect).abs() < 1e-9 * expect);
        }
    }

    #[test]
    fn degenerate_spec_keeps_wealth() {
        let q = (1.0 - 0.9) / (1.2 - 0.9);
        let spec =
            ScenarioSpec::fixed(vec![ThetaBlock::Binomial(binom(&[(1.2, 0.9, q); 2])); 2], 3);
        let out = run_paths(&spec, &crra(2.0), 1.5, 10, &RunOptions::default()).unwrap();
        for r in &out.records {
            assert!((r.terminal_wealth() - 1.5).abs() < 1e-12);
        }
        let s = summarize(&out).unwrap();
        assert!(s.periods.iter().all(|p| p.std < 1e-12));
    }

    #[test]
    fn reproducible_and_parallel_safe() {
        let spec = ScenarioSpec {
            horizon: 2,
            source: ParamSource::IidBinomial {
                n_steps: 2,
                u: ParamDist::Uniform { lo: 1.05, hi: 1.3 },
                d: ParamDist::Uniform { lo: 0.8, hi: 0.95 },
                p: ParamDist::Uniform { lo: 0.4, hi: 0.6 },
            },
            seed: 99,
        };
        let a = run_paths(&spec, &crra(2.0), 1.0, 20, &RunOptions::default()).unwrap();
        let b = run_paths(&spec, &crra(2.0), 1.0, 20, &RunOptions::default()).unwrap();
        assert_eq!(a.paths_csv(), b.paths_csv());
        assert_eq!(a.records.len(), 20);
        let first = run_paths(&spec, &crra(2.0), 1.0, 3, &RunOptions::default()).unwrap();
        assert_eq!(first.records[2], a.records[2]);
    }

    #[test]
    fn replication_examples() {
        let params = binom(&[(1.2, 0.9, 0.6)]);
        let flat = binomial_replication(&params, 1.0, |_| Ok(1.0)).unwrap();
        assert_eq!(flat.nodes[0][0].delta, 0.0);
        assert!((flat.nodes[0][0].bond - 1.0).abs() < 1e-15);

        let rep = binomial_replication(&params, 1.0, |rho| Ok(1.0 / rho)).unwrap();
        let mut payoffs: Vec<f64> = rep.leaves.iter().map(|l| l.payoff).collect();
        payoffs.sort_by(f64::total_cmp);
        assert!((payoffs[0] - 0.6).abs() < 1e-14 && (payoffs[1] - 1.8).abs() < 1e-14);
        let root = &rep.nodes[0][0];
        assert!((root.delta - 4.0).abs() < 1e-13);
        assert!((root.bond - (1.0 - 4.0)).abs() < 1e-13);
        assert!(rep.max_leaf_error() < 1e-14);

        assert!(matches!(
            binomial_replication(&params, 1.1, |rho| Ok(1.0 / rho)),
            Err(PfppError::BudgetMismatch(_))
        ));
    }

    #[test]
    fn optimal_replication_and_enumeration() {
        let theta = ThetaBlock::Binomial(binom(&[(1.2, 0.9, 0.6), (1.1, 0.95, 0.45)]));
        let state = construct_state(
            &crra(2.0),
            0.0,
            &[theta.clone(), theta],
            Route::Cmim,
            &AdvanceOptions::default(),
        )
        .unwrap();
        let rep = replicate_optimal(&state, 2, 1.3).unwrap();
        assert!(rep.max_leaf_error() < 1e-12);
        assert!(rep.max_self_financing_error() < 1e-12);
        assert!((enumerate_budget(&state, 1.3).unwrap() - 1.3).abs() < 1e-12);
    }

    #[test]
    fn interpolation_endpoints() {
        let theta = ThetaBlock::Bs(BsPeriodParams::new(vec![0.3]));
        let m = RiskAversionMeasure::new(
            vec![
                crate::measures::Atom {
                    gamma: 1.5,
                    weight: 0.4,
                },
                crate::measures::Atom {
                    gamma: 3.0,
                    weight: 0.6,
                },
            ],
            vec![],
            1.2,
            4.0,
        )
        .unwrap();
        let state = construct_state(
            &InverseMarginal::Cmim(m),
            0.0,
            &[theta],
            Route::Cmim,
            &AdvanceOptions::default(),
        )
        .unwrap();
        assert!((bs_wealth_interpolation(&state, 1, 1.7, 0.0, 1.0).unwrap() - 1.7).abs() < 1e-9);
        let end = state.wealth_step(1, 1.7, 0.8).unwrap();
        let near = bs_wealth_interpolation(&state, 1, 1.7, 1.0 - 1e-12, 0.8).unwrap();
        assert!((near - end).abs() < 1e-9);

        let log = construct_state(
            &crra(1.0),
            0.0,
            &[ThetaBlock::Bs(BsPeriodParams::new(vec![0.3]))],
            Route::Cmim,
            &AdvanceOptions::default(),
        )
        .unwrap();
        for t in [0.0, 0.3, 0.9] {
            assert!((bs_wealth_interpolation(&log, 1, 2.0, t, 1.25).unwrap() - 1.6).abs() < 1e-12);
        }
    }

    #[test]
    fn summary_quantiles() {
        let spec = ScenarioSpec::fixed(vec![ThetaBlock::Bs(BsPeriodParams::new(vec![0.3]))], 5);
        let out = run_paths(&spec, &crra(1.0), 1.0, 1, &RunOptions::default()).unwrap();
        let s = summarize(&out).unwrap();
        let w = out.records[0].terminal_wealth();
        assert!(s.periods[0].quantiles.iter().all(|q| q.value == w));
        assert!(summarize(&RunOutput {
            records: vec![],
            failures: vec![]
        })
        .is_err());
    }
}
