//! The forward engine: period-by-period construction of inverse marginals and
//! utility anchors, the optimal wealth recursion, utility reconstruction and
//! the dynamic-programming checks.
//!
//! Utilities are never tabulated by integrating `I^-1` numerically. With
//! `W_k(y) = -∫_1^y I_k` and `y = I_k^-1(x)`,
//! `U_k(x) = c_k + W_k(y) + x y`, where `c_k = a_k - I_k(1)` and `a_k` is the
//! anchor `U_k(I_k(1))`. The recursion for `U_k` then reduces to
//! `a_k = a_{k-1} + I_k(1) - E[W_k(rho)] - E[rho I_k(rho)]`.

use std::fmt::Write as _;

use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::cmim::{default_y_grid, residual_report, solve_period, DEFAULT_RESIDUAL_TOL};
use crate::deconv::{self, DeconvConfig};
use crate::error::{PfppError, Result};
use crate::kernels::{KernelLaw, ThetaBlock, DEFAULT_BINOMIAL_CAP};
use crate::marginal::InverseMarginal;
use crate::quadrature::{log_grid, DEFAULT_HERMITE_ORDER};

/// Default residual tolerance for the deconvolution route.
pub const DEFAULT_DECONV_TOL: f64 = 1e-6;

/// 100 log-spaced wealth levels on `[1e-2, 1e2]`.
pub fn default_x_grid() -> Vec<f64> {
    log_grid(1e-2, 1e2, 100)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Cmim,
    Deconv,
    /// Closed form when the current marginal is CMIM-backed and the kernel
    /// moments are finite, otherwise deconvolution.
    #[default]
    Auto,
}

impl Route {
    pub fn resolve(self, current: &InverseMarginal, law: &KernelLaw) -> Route {
        match self {
            Route::Auto => match current.measure() {
                Some(m) if law.cmim_integrability_check(m.gamma_min(), m.gamma_max()) => {
                    Route::Cmim
                }
                _ => Route::Deconv,
            },
            r => r,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvanceOptions {
    /// Residual gate; defaults depend on the route.
    pub tolerance: Option<f64>,
    pub y_grid: Vec<f64>,
    pub deconv: Option<DeconvConfig>,
    pub binomial_cap: usize,
}

impl Default for AdvanceOptions {
    fn default() -> Self {
        AdvanceOptions {
            tolerance: None,
            y_grid: default_y_grid(),
            deconv: None,
            binomial_cap: DEFAULT_BINOMIAL_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodRecord {
    pub theta: ThetaBlock,
    pub kernel: KernelLaw,
    pub route: Route,
    pub residual: f64,
    pub order_shift: f64,
    /// Any isolated spectral zeros met on the deconvolution route.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub spectral_zeros: Vec<f64>,
}

/// Snapshot of a forward construction after `period` periods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfppState {
    pub period: usize,
    pub periods: Vec<PeriodRecord>,
    pub marginals: Vec<InverseMarginal>,
    pub anchors: Vec<f64>,
}

impl PfppState {
    /// Period-0 state; `anchor` is `U_0(I_0(1))`.
    pub fn init(i0: InverseMarginal, anchor: f64) -> Result<Self> {
        if !anchor.is_finite() {
            return Err(PfppError::Validation(format!(
                "anchor must be finite, got {anchor}"
            )));
        }
        i0.eval(1.0)?;
        Ok(PfppState {
            period: 0,
            periods: Vec::new(),
            marginals: vec![i0],
            anchors: vec![anchor],
        })
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.period;
        if self.periods.len() != n || self.marginals.len() != n + 1 || self.anchors.len() != n + 1 {
            return Err(PfppError::Validation(format!(
                "state for period {n} holds {} records, {} marginals and {} anchors",
                self.periods.len(),
                self.marginals.len(),
                self.anchors.len()
            )));
        }
        Ok(())
    }

    pub fn marginal(&self, k: usize) -> Result<&InverseMarginal> {
        self.marginals.get(k).ok_or_else(|| {
            PfppError::Validation(format!(
                "period {k} not constructed (current {})",
                self.period
            ))
        })
    }

    pub fn kernel(&self, k: usize) -> Result<&KernelLaw> {
        if k == 0 || k > self.period {
            return Err(PfppError::Validation(format!(
                "period {k} has no kernel (periods 1..={})",
                self.period
            )));
        }
        Ok(&self.periods[k - 1].kernel)
    }

    /// `c_k = a_k - I_k(1)`, the constant in `U_k(x) = c_k + W_k(y) + x y`.
    pub fn offset(&self, k: usize) -> Result<f64> {
        Ok(self.anchors[k] - self.marginal(k)?.eval(1.0)?)
    }

    /// Solves the next period for `theta` and appends it.
    pub fn advance(&self, theta: &ThetaBlock, route: Route, opts: &AdvanceOptions) -> Result<Self> {
        self.validate()?;
        theta.validate()?;
        let law = match theta {
            ThetaBlock::Binomial(p) => crate::kernels::kernel_from_binomial(p, opts.binomial_cap)?,
            ThetaBlock::Bs(p) => crate::kernels::kernel_from_bs(p)?,
        };
        let current = self.marginal(self.period)?;
        let route = route.resolve(current, &law);
        let (next, spectral_zeros) = match route {
            Route::Cmim => {
                let m = current.measure().ok_or_else(|| {
                    PfppError::UnsupportedRoute(
                        "closed-form route needs a CMIM-backed marginal".into(),
                    )
                })?;
                (InverseMarginal::Cmim(solve_period(m, &law)?), Vec::new())
            }
            Route::Deconv => {
                let cfg = opts.deconv.as_ref().ok_or_else(|| {
                    PfppError::Config("deconvolution route needs a grid configuration".into())
                })?;
                let sol = deconv::solve(current, &law, &fit_to_samples(cfg, current))?;
                let zeros = sol.spectral_zeros.iter().map(|z| z.xi).collect();
                (sol.marginal, zeros)
            }
            Route::Auto => unreachable!("resolved above"),
        };
        let tol = opts.tolerance.unwrap_or(match route {
            Route::Deconv => DEFAULT_DECONV_TOL,
            _ => DEFAULT_RESIDUAL_TOL,
        });
        let report = residual_report(&next, current, &law, &opts.y_grid)?;
        if !(report.max_rel_err <= tol) {
            return Err(PfppError::ConstructionFailed(format!(
                "period {} residual {:.3e} exceeds tolerance {tol:.1e}",
                self.period + 1,
                report.max_rel_err
            )));
        }
        let prev_anchor = self.anchors[self.period];
        let i1 = next.eval(1.0)?;
        let e_w = law.try_expect(|rho| Ok(-next.integral_from_one(rho)?))?;
        let e_rho_i = law.try_expect(|rho| Ok(rho * next.eval(rho)?))?;
        let anchor = prev_anchor + i1 - e_w - e_rho_i;

        let mut out = self.clone();
        out.period += 1;
        out.periods.push(PeriodRecord {
            theta: theta.clone(),
            kernel: law,
            route,
            residual: report.max_rel_err,
            order_shift: report.order_shift,
            spectral_zeros,
        });
        out.marginals.push(next);
        out.anchors.push(anchor);
        Ok(out)
    }

    /// `X*_k = I_k(rho I_{k-1}^-1(x_prev))`.
    pub fn wealth_step(&self, k: usize, x_prev: f64, rho: f64) -> Result<f64> {
        if k == 0 || k > self.period {
            return Err(PfppError::Validation(format!(
                "wealth step needs a completed period, got {k} of {}",
                self.period
            )));
        }
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(PfppError::Domain(format!(
                "kernel value must be positive, got {rho}"
            )));
        }
        let y = self.marginals[k - 1].invert(x_prev)?;
        self.marginals[k].eval(y * rho)
    }

    /// Wealth step for the most recent period.
    pub fn wealth_step_latest(&self, x_prev: f64, rho: f64) -> Result<f64> {
        self.wealth_step(self.period, x_prev, rho)
    }

    pub fn utility(&self, k: usize) -> Result<Utility> {
        Ok(Utility {
            offset: self.offset(k)?,
            anchor: self.anchors[k],
            marginal: self.marginal(k)?.clone(),
        })
    }

    /// Tabulates `U_k` on `x_grid`.
    pub fn reconstruct_utility(&self, k: usize, x_grid: &[f64]) -> Result<UtilityCurve> {
        let u = self.utility(k)?;
        let points = x_grid
            .iter()
            .map(|&x| Ok((x, u.value(x)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(UtilityCurve {
            period: k,
            utility: u,
            points,
        })
    }

    /// `max_x |U_{k-1}(x) - E[U_k(I_k(U'_{k-1}(x) rho))]|`.
    pub fn verify_martingale(&self, k: usize, x_grid: &[f64]) -> Result<GateReport> {
        let law = self.kernel(k)?.clone();
        let prev = self.utility(k - 1)?;
        let next = self.utility(k)?;
        let lognormal = matches!(law, KernelLaw::LogNormal { .. });
        let mut rep = GateReport::default();
        for &x in x_grid {
            let y = prev.marginal.invert(x)?;
            let lhs = prev.value_at_dual(x, y)?;
            let rhs_at = |order: usize| {
                law.try_expect_with_order(order, |rho| {
                    let z = y * rho;
                    next.value_at_dual(next.marginal.eval(z)?, z)
                })
            };
            let rhs = rhs_at(DEFAULT_HERMITE_ORDER)?;
            rep.record(x, (lhs - rhs).abs());
            if lognormal {
                let fine = rhs_at(2 * DEFAULT_HERMITE_ORDER)?;
                rep.order_shift = rep.order_shift.max((fine - rhs).abs());
            }
        }
        Ok(rep)
    }

    /// `max_x |E[rho I_k(y rho)] - x|` with `y = I_{k-1}^-1(x)`.
    pub fn verify_budget(&self, k: usize, x_grid: &[f64]) -> Result<GateReport> {
        let law = self.kernel(k)?.clone();
        let prev = self.marginal(k - 1)?;
        let next = self.marginal(k)?;
        let lognormal = matches!(law, KernelLaw::LogNormal { .. });
        let mut rep = GateReport::default();
        for &x in x_grid {
            let y = prev.invert(x)?;
            let at = |order| law.try_expect_with_order(order, |rho| Ok(rho * next.eval(y * rho)?));
            let lhs = at(DEFAULT_HERMITE_ORDER)?;
            rep.record(x, (lhs - x).abs());
            if lognormal {
                rep.order_shift = rep
                    .order_shift
                    .max((at(2 * DEFAULT_HERMITE_ORDER)? - lhs).abs());
            }
        }
        Ok(rep)
    }

    /// `U_{k-1}(x) - E[U_k(X)]` for the budget-preserving perturbation
    /// `X = X* (1 + eps (h(rho) - c))`, `c = E[rho X* h] / x`.
    pub fn supermartingale_gap(&self, k: usize, x: f64, h: &Perturbation, eps: f64) -> Result<f64> {
        let law = self.kernel(k)?.clone();
        let prev = self.utility(k - 1)?;
        let next = self.utility(k)?;
        let y = prev.marginal.invert(x)?;
        let c = law.try_expect(|rho| Ok(rho * next.marginal.eval(y * rho)? * h.eval(rho)))? / x;
        let expected = law.try_expect(|rho| {
            let opt = next.marginal.eval(y * rho)?;
            next.value(opt * (1.0 + eps * (h.eval(rho) - c)))
        })?;
        Ok(prev.value_at_dual(x, y)? - expected)
    }

    /// Runs `n_perturbations` random perturbations of size `eps` and reports
    /// the gaps `U_{k-1}(x) - E[U_k(X)]`.
    pub fn verify_supermartingale<R: Rng + ?Sized>(
        &self,
        k: usize,
        x: f64,
        n_perturbations: usize,
        eps: f64,
        rng: &mut R,
    ) -> Result<SupermartingaleReport> {
        if !(0.0..0.5).contains(&eps) {
            return Err(PfppError::Validation(format!(
                "perturbation size must lie in [0, 0.5), got {eps}"
            )));
        }
        let mut gaps = Vec::with_capacity(n_perturbations);
        for _ in 0..n_perturbations {
            let h = Perturbation::random(rng);
            gaps.push(self.supermartingale_gap(k, x, &h, eps)?);
        }
        Ok(SupermartingaleReport::new(gaps))
    }

    /// Least-squares exponent `p` in `gap ~ eps^p` for one random direction.
    pub fn gap_exponent<R: Rng + ?Sized>(
        &self,
        k: usize,
        x: f64,
        eps: &[f64],
        rng: &mut R,
    ) -> Result<f64> {
        let h = Perturbation::random(rng);
        let pts = eps
            .iter()
            .map(|&e| Ok((e.ln(), self.supermartingale_gap(k, x, &h, e)?.ln())))
            .collect::<Result<Vec<_>>>()?;
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        Ok(sxy / sxx)
    }
}

/// Shrinks the log-coordinate window to the sampled range of a grid-backed
/// marginal so the edge taper hides the switch to its power tails.
pub fn fit_to_samples(cfg: &DeconvConfig, current: &InverseMarginal) -> DeconvConfig {
    let mut cfg = cfg.clone();
    if let InverseMarginal::Grid(g) = current {
        let (lo, hi) = g.t_range();
        cfg.half_width = cfg.half_width.min(-lo).min(hi);
    }
    cfg
}

/// A bounded function `h(rho) = Σ a_j cos(f_j log rho + phi_j) / 3`, `|h| <= 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    terms: [(f64, f64, f64); 3],
}

impl Perturbation {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut term = || {
            (
                rng.random_range(-1.0..1.0),
                rng.random_range(0.2..4.0),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        };
        Perturbation {
            terms: [term(), term(), term()],
        }
    }

    pub fn eval(&self, rho: f64) -> f64 {
        let l = rho.ln();
        self.terms
            .iter()
            .map(|&(a, f, p)| a * (f * l + p).cos())
            .sum::<f64>()
            / 3.0
    }
}

/// `U(x) = offset + W(y) + x y`, `y = I^-1(x)`, for one period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utility {
    pub offset: f64,
    pub anchor: f64,
    pub marginal: InverseMarginal,
}

impl Utility {
    /// `U(x)` given `y` with `I(y) = x`.
    pub fn value_at_dual(&self, x: f64, y: f64) -> Result<f64> {
        Ok(self.offset - self.marginal.integral_from_one(y)? + x * y)
    }

    pub fn value(&self, x: f64) -> Result<f64> {
        let y = self.marginal.invert(x)?;
        self.value_at_dual(x, y)
    }

    /// `U'(x) = I^-1(x)`.
    pub fn marginal_utility(&self, x: f64) -> Result<f64> {
        self.marginal.invert(x)
    }

    /// `V(y) = U(I(y)) - y I(y) = offset + W(y)`.
    pub fn convex_dual(&self, y: f64) -> Result<f64> {
        Ok(self.offset - self.marginal.integral_from_one(y)?)
    }
}

/// A tabulated utility with its exact backing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityCurve {
    pub period: usize,
    pub utility: Utility,
    pub points: Vec<(f64, f64)>,
}

impl UtilityCurve {
    pub fn anchor(&self) -> f64 {
        self.utility.anchor
    }

    pub fn value(&self, x: f64) -> Result<f64> {
        self.utility.value(x)
    }

    pub fn marginal_utility(&self, x: f64) -> Result<f64> {
        self.utility.marginal_utility(x)
    }

    /// Whether the tabulated points are strictly increasing with
    /// non-increasing chord slopes.
    pub fn is_increasing_concave(&self) -> bool {
        let slopes: Vec<f64> = self
            .points
            .windows(2)
            .map(|w| (w[1].1 - w[0].1) / (w[1].0 - w[0].0))
            .collect();
        slopes.iter().all(|s| *s > 0.0) && slopes.windows(2).all(|w| w[1] <= w[0])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,utility\n");
        for (x, u) in &self.points {
            let _ = writeln!(s, "{x:e},{u:e}");
        }
        s
    }
}

/// `V(y)` for a reconstructed curve.
pub fn convex_dual(curve: &UtilityCurve, y: f64) -> Result<f64> {
    curve.utility.convex_dual(y)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub max_deviation: f64,
    pub worst_x: f64,
    /// Largest change when the Gauss–Hermite order doubles (log-normal only).
    pub order_shift: f64,
}

impl GateReport {
    fn record(&mut self, x: f64, dev: f64) {
        if dev > self.max_deviation || dev.is_nan() {
            self.max_deviation = dev;
            self.worst_x = x;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupermartingaleReport {
    pub gaps: Vec<f64>,
    pub min_gap: f64,
}

impl SupermartingaleReport {
    pub const SLACK: f64 = 1e-10;

    fn new(gaps: Vec<f64>) -> Self {
        let min_gap = gaps.iter().cloned().fold(f64::INFINITY, f64::min);
        SupermartingaleReport { gaps, min_gap }
    }

    /// `E[U_k(X)] <= U_{k-1}(x) + 1e-10` for every perturbation.
    pub fn passes(&self) -> bool {
        self.gaps.iter().all(|g| *g >= -Self::SLACK)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{BinomialPeriodParams, BinomialStep, BsPeriodParams};
    use crate::measures::RiskAversionMeasure;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn log_state() -> PfppState {
        let m = RiskAversionMeasure::single_atom(1.0, 1.0, 0.5, 2.0).unwrap();
        PfppState::init(InverseMarginal::Cmim(m), 0.0).unwrap()
    }

    fn crra_state(gamma: f64) -> PfppState {
        let m = RiskAversionMeasure::single_atom(gamma, 1.0, 0.5 * gamma, 2.0 * gamma).unwrap();
        PfppState::init(InverseMarginal::Cmim(m), 0.0).unwrap()
    }

    fn bs(l: f64) -> ThetaBlock {
        ThetaBlock::Bs(BsPeriodParams::new(vec![l]))
    }

    fn binom() -> ThetaBlock {
        ThetaBlock::Binomial(BinomialPeriodParams {
            steps: vec![BinomialStep {
                u: 1.2,
                d: 0.9,
                p: 0.6,
            }],
        })
    }

    #[test]
    fn log_invariance_and_utility() {
        let s = log_state()
            .advance(&bs(0.3), Route::Auto, &AdvanceOptions::default())
            .unwrap();
        assert_eq!(s.periods[0].route, Route::Cmim);
        for &y in &[0.1, 1.0, 7.0] {
            assert!((s.marginals[1].eval(y).unwrap() * y - 1.0).abs() < 1e-15);
        }
        let c = s.reconstruct_utility(1, &[1.0, 2.0]).unwrap();
        assert!((c.points[0].1 + 0.045).abs() < 1e-12);
        assert!((c.points[1].1 - (2f64.ln() - 0.045)).abs() < 1e-12);
        assert!((s.wealth_step(1, 1.0, 2.0).unwrap() - 0.5).abs() < 1e-15);
        let u0 = s.reconstruct_utility(0, &[1.0, 3.0]).unwrap();
        assert!(u0.points[0].1.abs() < 1e-15);
        assert!((u0.points[1].1 - 3f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn crra_chain() {
        let s = crra_state(2.0)
            .advance(&bs(0.3), Route::Cmim, &AdvanceOptions::default())
            .unwrap();
        let c = 0.01125f64.exp();
        assert!((s.marginals[1].eval(4.0).unwrap() - c * 0.5).abs() < 1e-14);
        assert!((s.wealth_step(1, 1.0, 1.0).unwrap() - c).abs() < 1e-12);
        let flat = ThetaBlock::Binomial(BinomialPeriodParams {
            steps: vec![BinomialStep {
                u: 1.2,
                d: 0.9,
                p: 1.0 / 3.0,
            }],
        });
        let s2 = s
            .advance(&flat, Route::Auto, &AdvanceOptions::default())
            .unwrap();
        assert!(
            (s2.marginals[2].eval(3.0).unwrap() - s.marginals[1].eval(3.0).unwrap()).abs() < 1e-14
        );
    }

    #[test]
    fn verification_gates() {
        let opts = AdvanceOptions::default();
        let xs = default_x_grid();
        for theta in [bs(0.3), binom()] {
            let s = crra_state(2.0).advance(&theta, Route::Cmim, &opts).unwrap();
            assert!(s.verify_martingale(1, &xs).unwrap().max_deviation < 1e-9);
            assert!(s.verify_budget(1, &xs).unwrap().max_deviation < 1e-9);
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let rep = s.verify_supermartingale(1, 1.3, 20, 0.1, &mut rng).unwrap();
            assert!(rep.passes() && rep.min_gap > 0.0);
            let zero = s.verify_supermartingale(1, 1.3, 3, 0.0, &mut rng).unwrap();
            assert!(zero.gaps.iter().all(|g| g.abs() < 1e-10));
        }
    }

    #[test]
    fn corrupted_marginal_is_detected() {
        let mut s = crra_state(2.0)
            .advance(&bs(0.3), Route::Cmim, &AdvanceOptions::default())
            .unwrap();
        let bad = s.marginals[1].measure().unwrap().scaled(1.01);
        s.marginals[1] = InverseMarginal::Cmim(bad);
        let dev = s.verify_budget(1, &[1.0]).unwrap().max_deviation;
        assert!((dev - 0.01).abs() < 1e-9);
        let dev = s
            .verify_martingale(1, &default_x_grid())
            .unwrap()
            .max_deviation;
        assert!(dev > 1e-3);
    }

    #[test]
    fn convex_dual_examples() {
        let s = log_state();
        let c = s.reconstruct_utility(0, &[1.0]).unwrap();
        assert!((convex_dual(&c, 1.0).unwrap() + 1.0).abs() < 1e-15);
        assert!((convex_dual(&c, 2.0).unwrap() + 2f64.ln() + 1.0).abs() < 1e-15);
        // gamma = 1/2: I(y) = y^-2, U(x) = 2 sqrt(x) - 2 when anchored at U(1) = 0.
        let s = crra_state(0.5);
        let c = s.reconstruct_utility(0, &[1.0, 4.0]).unwrap();
        assert!((c.points[1].1 - 2.0).abs() < 1e-13);
        assert!((convex_dual(&c, 1.0).unwrap() + 1.0).abs() < 1e-15);
        assert!((convex_dual(&c, 0.5).unwrap() - 0.0).abs() < 1e-14);
    }

    #[test]
    fn bad_period_index() {
        let s = log_state();
        assert!(s.wealth_step(1, 1.0, 1.0).is_err());
        assert!(s.verify_budget(1, &[1.0]).is_err());
    }
}
