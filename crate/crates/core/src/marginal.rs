//! Inverse marginal utilities: either a completely monotonic function backed
//! by a risk-aversion measure, or a sampled function of `t = log y` produced by
//! the deconvolution route.

use serde::{Deserialize, Serialize};

use crate::error::{PfppError, Result};
use crate::measures::{check_y, RiskAversionMeasure};

/// Relative accuracy required of [`InverseMarginal::invert`].
pub const INVERT_TOL: f64 = 1e-10;

const S_MAX: f64 = 690.0;
const MAX_NEWTON: usize = 200;

/// Anything that can be evaluated as `y -> I(y)`.
pub trait Marginal {
    fn eval(&self, y: f64) -> Result<f64>;
}

impl<F: Fn(f64) -> Result<f64>> Marginal for F {
    fn eval(&self, y: f64) -> Result<f64> {
        self(y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RawGrid {
    t0: f64,
    dt: f64,
    values: Vec<f64>,
    gamma_min: f64,
    gamma_max: f64,
}

/// Strictly decreasing samples `J(t0 + k dt)` of `J(t) = I(e^t)`.
///
/// Between nodes `log J` is a monotone piecewise cubic Hermite interpolant
/// with fourth-order slopes, limited where needed to keep it monotone. Outside
/// the grid it continues as `e^(-(t - t0)/gamma_min)` on the left and
/// `e^(-(t - t_n)/gamma_max)` on the right.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "RawGrid", into = "RawGrid")]
pub struct GridMarginal {
    t0: f64,
    dt: f64,
    values: Vec<f64>,
    gamma_min: f64,
    gamma_max: f64,
    logs: Vec<f64>,
    // slopes of log J at the nodes
    slopes: Vec<f64>,
    // cumulative ∫_{t0}^{t_k} e^s J(s) ds
    cumulative: Vec<f64>,
}

impl PartialEq for GridMarginal {
    fn eq(&self, other: &Self) -> bool {
        self.t0 == other.t0
            && self.dt == other.dt
            && self.values == other.values
            && self.gamma_min == other.gamma_min
            && self.gamma_max == other.gamma_max
    }
}

impl TryFrom<RawGrid> for GridMarginal {
    type Error = PfppError;

    fn try_from(r: RawGrid) -> Result<Self> {
        GridMarginal::new(r.t0, r.dt, r.values, r.gamma_min, r.gamma_max)
    }
}

impl From<GridMarginal> for RawGrid {
    fn from(g: GridMarginal) -> Self {
        RawGrid {
            t0: g.t0,
            dt: g.dt,
            values: g.values,
            gamma_min: g.gamma_min,
            gamma_max: g.gamma_max,
        }
    }
}

// Four-point Gauss–Legendre on [0, 1].
const GL4: [(f64, f64); 4] = [
    (0.069_431_844_202_973_71, 0.173_927_422_568_726_93),
    (0.330_009_478_207_571_87, 0.326_072_577_431_273_07),
    (0.669_990_521_792_428_1, 0.326_072_577_431_273_07),
    (0.930_568_155_797_026_3, 0.173_927_422_568_726_93),
];

impl GridMarginal {
    pub fn new(t0: f64, dt: f64, values: Vec<f64>, gamma_min: f64, gamma_max: f64) -> Result<Self> {
        if values.len() < 4 {
            return Err(PfppError::Validation(
                "grid marginal needs at least four samples".into(),
            ));
        }
        if !(t0.is_finite() && dt.is_finite() && dt > 0.0) {
            return Err(PfppError::Validation(format!(
                "grid origin and spacing must be finite with dt > 0, got ({t0}, {dt})"
            )));
        }
        if !(gamma_min > 0.0 && gamma_min <= gamma_max && gamma_max.is_finite()) {
            return Err(PfppError::Validation(format!(
                "need 0 < gamma_min <= gamma_max, got ({gamma_min}, {gamma_max})"
            )));
        }
        if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(PfppError::Validation(
                "grid marginal samples must be positive and finite".into(),
            ));
        }
        if let Some(k) = values.windows(2).position(|w| w[1] >= w[0]) {
            return Err(PfppError::Validation(format!(
                "grid marginal samples must be strictly decreasing (index {k})"
            )));
        }
        let logs: Vec<f64> = values.iter().map(|v| v.ln()).collect();
        let slopes = monotone_slopes(&logs, dt);
        let mut g = GridMarginal {
            t0,
            dt,
            values,
            gamma_min,
            gamma_max,
            logs,
            slopes,
            cumulative: Vec::new(),
        };
        let mut cum = Vec::with_capacity(g.values.len());
        cum.push(0.0);
        for k in 0..g.values.len() - 1 {
            let prev = *cum.last().unwrap();
            cum.push(prev + g.segment_integral(k, 1.0));
        }
        g.cumulative = cum;
        Ok(g)
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn gamma_bounds(&self) -> (f64, f64) {
        (self.gamma_min, self.gamma_max)
    }

    /// Range of `t = log y` covered by samples.
    pub fn t_range(&self) -> (f64, f64) {
        (self.t0, self.t_last())
    }

    fn t_last(&self) -> f64 {
        self.t0 + self.dt * (self.values.len() - 1) as f64
    }

    fn locate(&self, t: f64) -> (usize, f64) {
        let n = self.values.len();
        let pos = (t - self.t0) / self.dt;
        let k = (pos.floor() as isize).clamp(0, n as isize - 2) as usize;
        (k, (pos - k as f64).clamp(0.0, 1.0))
    }

    fn hermite(&self, k: usize, u: f64) -> (f64, f64) {
        let h = self.dt;
        let (v0, v1) = (self.logs[k], self.logs[k + 1]);
        let (d0, d1) = (self.slopes[k], self.slopes[k + 1]);
        let u2 = u * u;
        let u3 = u2 * u;
        let value = (2.0 * u3 - 3.0 * u2 + 1.0) * v0
            + (u3 - 2.0 * u2 + u) * h * d0
            + (-2.0 * u3 + 3.0 * u2) * v1
            + (u3 - u2) * h * d1;
        let deriv = ((6.0 * u2 - 6.0 * u) * v0 + (-6.0 * u2 + 6.0 * u) * v1) / h
            + (3.0 * u2 - 4.0 * u + 1.0) * d0
            + (3.0 * u2 - 2.0 * u) * d1;
        (value, deriv)
    }

    // ∫_{t_k}^{t_k + u dt} e^s J(s) ds
    fn segment_integral(&self, k: usize, u: f64) -> f64 {
        let tk = self.t0 + self.dt * k as f64;
        let width = u * self.dt;
        GL4.iter()
            .map(|&(x, w)| {
                let s = x * u;
                w * (tk + s * self.dt + self.hermite(k, s).0).exp()
            })
            .sum::<f64>()
            * width
    }

    /// `log J(t)` and `J'(t) / J(t)`.
    pub fn log_and_slope(&self, t: f64) -> (f64, f64) {
        let tn = self.t_last();
        if t < self.t0 {
            let g = self.gamma_min;
            (self.values[0].ln() - (t - self.t0) / g, -1.0 / g)
        } else if t > tn {
            let g = self.gamma_max;
            (
                self.values[self.values.len() - 1].ln() - (t - tn) / g,
                -1.0 / g,
            )
        } else {
            let (k, u) = self.locate(t);
            self.hermite(k, u)
        }
    }

    /// `∫_{t0}^{t} e^s J(s) ds`.
    fn antiderivative(&self, t: f64) -> f64 {
        let n = self.values.len();
        let tn = self.t_last();
        let tail = |v: f64, anchor: f64, gamma: f64| {
            let a = 1.0 - 1.0 / gamma;
            let dt = t - anchor;
            let f = if a == 0.0 { dt } else { (a * dt).exp_m1() / a };
            v * anchor.exp() * f
        };
        if t < self.t0 {
            tail(self.values[0], self.t0, self.gamma_min)
        } else if t > tn {
            self.cumulative[n - 1] + tail(self.values[n - 1], tn, self.gamma_max)
        } else {
            let (k, u) = self.locate(t);
            self.cumulative[k] + self.segment_integral(k, u)
        }
    }
}

/// Slopes of strictly decreasing samples on a uniform grid: five-point
/// centred differences in the interior, three-point formulas next to the ends,
/// then clipped into `[3 max(secants), 0]` so each cubic piece stays monotone.
fn monotone_slopes(v: &[f64], h: f64) -> Vec<f64> {
    let n = v.len();
    let delta: Vec<f64> = v.windows(2).map(|w| (w[1] - w[0]) / h).collect();
    let mut d = vec![0.0; n];
    for k in 0..n {
        d[k] = if k >= 2 && k + 2 < n {
            (v[k - 2] - 8.0 * v[k - 1] + 8.0 * v[k + 1] - v[k + 2]) / (12.0 * h)
        } else if k == 0 {
            (-3.0 * v[0] + 4.0 * v[1] - v[2]) / (2.0 * h)
        } else if k == n - 1 {
            (3.0 * v[n - 1] - 4.0 * v[n - 2] + v[n - 3]) / (2.0 * h)
        } else {
            (v[k + 1] - v[k - 1]) / (2.0 * h)
        };
        let left = if k > 0 { delta[k - 1] } else { delta[0] };
        let right = if k + 1 < n { delta[k] } else { delta[n - 2] };
        let bound = 3.0 * left.max(right);
        d[k] = d[k].clamp(bound, 0.0);
    }
    d
}

/// An inverse marginal utility `I = (U')^(-1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InverseMarginal {
    Cmim(RiskAversionMeasure),
    Grid(GridMarginal),
}

impl Marginal for InverseMarginal {
    fn eval(&self, y: f64) -> Result<f64> {
        InverseMarginal::eval(self, y)
    }
}

impl InverseMarginal {
    pub fn measure(&self) -> Option<&RiskAversionMeasure> {
        match self {
            InverseMarginal::Cmim(m) => Some(m),
            InverseMarginal::Grid(_) => None,
        }
    }

    pub fn gamma_bounds(&self) -> (f64, f64) {
        match self {
            InverseMarginal::Cmim(m) => (m.gamma_min(), m.gamma_max()),
            InverseMarginal::Grid(g) => g.gamma_bounds(),
        }
    }

    pub fn log_eval(&self, y: f64) -> Result<f64> {
        match self {
            InverseMarginal::Cmim(m) => m.log_eval(y),
            InverseMarginal::Grid(g) => Ok(g.log_and_slope(check_y(y)?).0),
        }
    }

    pub fn eval(&self, y: f64) -> Result<f64> {
        let l = self.log_eval(y)?;
        let v = l.exp();
        if v.is_finite() && v > 0.0 {
            Ok(v)
        } else {
            Err(PfppError::NumericalRange(format!(
                "I({y}) is not representable"
            )))
        }
    }

    /// `y I'(y) / I(y)`.
    pub fn elasticity(&self, y: f64) -> Result<f64> {
        match self {
            InverseMarginal::Cmim(m) => m.elasticity(y),
            InverseMarginal::Grid(g) => Ok(g.log_and_slope(check_y(y)?).1),
        }
    }

    pub fn derivative(&self, y: f64) -> Result<f64> {
        match self {
            InverseMarginal::Cmim(m) => m.derivative(y),
            InverseMarginal::Grid(_) => Ok(self.eval(y)? * self.elasticity(y)? / y),
        }
    }

    /// `∫_1^y I(z) dz`.
    pub fn integral_from_one(&self, y: f64) -> Result<f64> {
        match self {
            InverseMarginal::Cmim(m) => m.integral_from_one(y),
            InverseMarginal::Grid(g) => {
                let t = check_y(y)?;
                let v = g.antiderivative(t) - g.antiderivative(0.0);
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(PfppError::NumericalRange(format!(
                        "integral of I from 1 to {y} overflows"
                    )))
                }
            }
        }
    }

    /// Solves `I(y) = x` for `y`, working in `s = log y` with a safeguarded
    /// Newton iteration inside an expanding bracket.
    pub fn invert(&self, x: f64) -> Result<f64> {
        if !(x > 0.0) || !x.is_finite() {
            return Err(PfppError::Domain(format!(
                "wealth must be positive and finite, got {x}"
            )));
        }
        let lx = x.ln();
        let g = |s: f64| -> Result<f64> { Ok(self.log_eval(s.exp())? - lx) };

        let g0 = g(0.0)?;
        if g0 == 0.0 {
            return Ok(1.0);
        }
        // g is decreasing in s; look right when g(0) > 0.
        let dir = if g0 > 0.0 { 1.0 } else { -1.0 };
        let (mut a, mut ga): (f64, f64) = (0.0, g0);
        let mut step: f64 = 1.0;
        let (mut b, mut gb);
        loop {
            b = (a + dir * step).clamp(-S_MAX, S_MAX);
            gb = g(b).map_err(|e| match e {
                PfppError::NumericalRange(m) => {
                    PfppError::NumericalRange(format!("no bracket for I(y) = {x}: {m}"))
                }
                other => other,
            })?;
            if gb == 0.0 {
                return Ok(b.exp());
            }
            if gb.signum() != ga.signum() {
                break;
            }
            if b.abs() >= S_MAX {
                return Err(PfppError::NumericalRange(format!(
                    "no bracket for I(y) = {x} within y in [e^-{S_MAX}, e^{S_MAX}]"
                )));
            }
            a = b;
            ga = gb;
            step *= 2.0;
        }
        // Orient so that g(lo) > 0 > g(hi).
        let (mut lo, mut hi) = if ga > 0.0 { (a, b) } else { (b, a) };
        let mut s = 0.5 * (lo + hi);
        for _ in 0..MAX_NEWTON {
            let gs = g(s)?;
            if gs.abs() <= 1e-15 {
                break;
            }
            if gs > 0.0 {
                lo = s;
            } else {
                hi = s;
            }
            let slope = self.elasticity(s.exp())?;
            let newton = s - gs / slope;
            let inside = newton > lo.min(hi) && newton < lo.max(hi);
            let next = if slope < 0.0 && slope.is_finite() && inside {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if (next - s).abs() <= 4.0 * f64::EPSILON * s.abs().max(1.0) {
                s = next;
                break;
            }
            s = next;
        }
        let y = s.exp();
        let rel = (self.eval(y)? - x).abs() / x;
        if rel <= INVERT_TOL {
            Ok(y)
        } else {
            Err(PfppError::NumericalRange(format!(
                "inversion of I at x={x} stalled with relative error {rel:e}"
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::Atom;

    fn crra(gamma: f64) -> InverseMarginal {
        InverseMarginal::Cmim(
            RiskAversionMeasure::single_atom(gamma, 1.0, 0.5 * gamma, 2.0 * gamma).unwrap(),
        )
    }

    fn mixture() -> InverseMarginal {
        InverseMarginal::Cmim(
            RiskAversionMeasure::new(
                vec![
                    Atom {
                        gamma: 1.5,
                        weight: 0.5,
                    },
                    Atom {
                        gamma: 3.0,
                        weight: 0.5,
                    },
                ],
                vec![],
                1.4,
                3.1,
            )
            .unwrap(),
        )
    }

    #[test]
    fn invert_examples() {
        assert!((crra(2.0).invert(0.5).unwrap() - 4.0).abs() < 1e-12);
        assert!((crra(1.0).invert(2.0).unwrap() - 0.5).abs() < 1e-14);
        assert!((mixture().invert(0.375).unwrap() - 8.0).abs() < 1e-11);
        assert!(matches!(crra(2.0).invert(0.0), Err(PfppError::Domain(_))));
        assert!(matches!(crra(2.0).invert(-1.0), Err(PfppError::Domain(_))));
    }

    #[test]
    fn invert_out_of_range() {
        // y would have to be 1e600.
        assert!(matches!(
            crra(2.0).invert(1e-300),
            Err(PfppError::NumericalRange(_))
        ));
    }

    fn sampled(m: &InverseMarginal, lo: f64, hi: f64, n: usize) -> GridMarginal {
        let dt = (hi - lo) / (n - 1) as f64;
        let values = (0..n)
            .map(|k| m.eval((lo + dt * k as f64).exp()).unwrap())
            .collect();
        let (g1, g2) = m.gamma_bounds();
        GridMarginal::new(lo, dt, values, g1, g2).unwrap()
    }

    #[test]
    fn grid_reproduces_smooth_marginal() {
        let m = mixture();
        let grid = InverseMarginal::Grid(sampled(&m, -10.0, 10.0, 4001));
        for &y in &[0.01, 0.3, 1.0, 2.5, 700.0] {
            let a = grid.eval(y).unwrap();
            let b = m.eval(y).unwrap();
            assert!((a - b).abs() < 1e-8 * b, "y={y}: {a} vs {b}");
            let da = grid.derivative(y).unwrap();
            let db = m.derivative(y).unwrap();
            assert!((da - db).abs() < 1e-5 * db.abs(), "y={y}: {da} vs {db}");
            let ia = grid.integral_from_one(y).unwrap();
            let ib = m.integral_from_one(y).unwrap();
            assert!(
                (ia - ib).abs() < 1e-8 * ib.abs().max(1e-3),
                "y={y}: {ia} vs {ib}"
            );
        }
        let y = grid.invert(0.375).unwrap();
        assert!((y - 8.0).abs() < 1e-6);
    }

    #[test]
    fn grid_tails_follow_power_laws() {
        let m = crra(2.0);
        let dt = 0.01;
        let values = (0..601)
            .map(|k| m.eval((-3.0 + dt * k as f64).exp()).unwrap())
            .collect();
        let grid = InverseMarginal::Grid(GridMarginal::new(-3.0, dt, values, 2.0, 2.0).unwrap());
        for &y in &[1e-6, 1e6] {
            let a = grid.eval(y).unwrap();
            let b = m.eval(y).unwrap();
            assert!((a - b).abs() < 1e-10 * b);
        }
    }

    #[test]
    fn grid_rejects_non_monotone() {
        assert!(GridMarginal::new(0.0, 0.1, vec![4.0, 3.0, 3.5, 1.0], 1.0, 2.0).is_err());
        assert!(GridMarginal::new(0.0, 0.1, vec![4.0, 3.0, -1.0, -2.0], 1.0, 2.0).is_err());
    }

    #[test]
    fn serde_round_trip() {
        for m in [
            mixture(),
            InverseMarginal::Grid(sampled(&crra(2.0), -1.0, 1.0, 8)),
        ] {
            let s = serde_json::to_string(&m).unwrap();
            let back: InverseMarginal = serde_json::from_str(&s).unwrap();
            assert_eq!(back, m);
        }
    }
}
