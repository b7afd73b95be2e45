//! Quadrature rules shared by the solvers.
//!
//! Two kinds of integrals appear throughout the engine: integrals over a
//! bounded interval of a smooth function (density cells of a risk-aversion
//! measure, utility primitives) and expectations against a Gaussian variable
//! (log-normal pricing kernels). The first use adaptive Gauss–Legendre, the
//! second a Gauss–Hermite rule rescaled to the standard normal density.

use std::collections::HashMap;
use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex, OnceLock};

use gauss_quad::hermite::GaussHermite;
use gauss_quad::legendre::GaussLegendre;

use crate::error::{PfppError, Result};

/// Default Gauss–Hermite order for log-normal expectations.
pub const DEFAULT_HERMITE_ORDER: usize = 64;

const LEGENDRE_ORDER: usize = 15;
const MAX_DEPTH: usize = 48;

fn legendre_rule() -> &'static [(f64, f64)] {
    static RULE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    RULE.get_or_init(|| {
        let gl = GaussLegendre::new(NonZeroUsize::new(LEGENDRE_ORDER).unwrap());
        gl.as_node_weight_pairs().to_vec()
    })
}

fn fixed_legendre<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> f64 {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let s: f64 = legendre_rule()
        .iter()
        .map(|&(x, w)| w * f(mid + half * x))
        .sum();
    s * half
}

/// Integrates `f` over `[a, b]` to relative tolerance `rel_tol`.
///
/// Each interval is compared against the sum over its two halves and split
/// until the difference falls below its share of the global tolerance.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    if !(a.is_finite() && b.is_finite()) {
        return Err(PfppError::Domain(format!(
            "integration bounds must be finite, got [{a}, {b}]"
        )));
    }
    let (lo, hi, sign) = if a < b { (a, b, 1.0) } else { (b, a, -1.0) };
    let coarse = fixed_legendre(&f, lo, hi);
    if !coarse.is_finite() {
        return Err(PfppError::Quadrature(format!(
            "non-finite integrand on [{lo}, {hi}]"
        )));
    }
    let abs_tol = (rel_tol * coarse.abs()).max(f64::MIN_POSITIVE);
    let width = hi - lo;
    let total = refine(&f, lo, hi, coarse, abs_tol, width, 0)?;
    Ok(sign * total)
}

fn refine<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    whole: f64,
    abs_tol: f64,
    total_width: f64,
    depth: usize,
) -> Result<f64> {
    let mid = 0.5 * (a + b);
    let left = fixed_legendre(f, a, mid);
    let right = fixed_legendre(f, mid, b);
    let both = left + right;
    if !both.is_finite() {
        return Err(PfppError::Quadrature(format!(
            "non-finite integrand on [{a}, {b}]"
        )));
    }
    let share = abs_tol * (b - a) / total_width;
    if (both - whole).abs() <= share.max(4.0 * f64::EPSILON * both.abs()) {
        return Ok(both);
    }
    if depth >= MAX_DEPTH {
        return Err(PfppError::Quadrature(format!(
            "no convergence on [{a}, {b}] after {MAX_DEPTH} bisections"
        )));
    }
    Ok(refine(f, a, mid, left, abs_tol, total_width, depth + 1)?
        + refine(f, mid, b, right, abs_tol, total_width, depth + 1)?)
}

/// Nodes and weights for `E[f(Z)]`, `Z ~ N(0, 1)`.
#[derive(Debug, Clone)]
pub struct NormalRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl NormalRule {
    pub fn expect<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&z, &w)| w * f(z))
            .sum()
    }
}

/// Gauss–Hermite rule of the given order, rescaled to the standard normal.
/// Rules are computed once per order and cached.
pub fn normal_rule(order: usize) -> Arc<NormalRule> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<NormalRule>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("quadrature cache poisoned");
    guard
        .entry(order)
        .or_insert_with(|| {
            let gh = GaussHermite::new(NonZeroUsize::new(order.max(1)).unwrap());
            let scale = std::f64::consts::PI.sqrt();
            let (nodes, weights) = gh
                .as_node_weight_pairs()
                .iter()
                .map(|&(x, w)| (std::f64::consts::SQRT_2 * x, w / scale))
                .unzip();
            Arc::new(NormalRule { nodes, weights })
        })
        .clone()
}

/// Log-spaced grid of `n` points on `[lo, hi]` (both included).
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..n)
                .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_integrates_smooth_functions() {
        let v = integrate(|x: f64| x.exp(), 0.0, 3.0, 1e-13).unwrap();
        assert!((v - (3f64.exp() - 1.0)).abs() < 1e-12 * v);
        let v = integrate(|x: f64| 1.0 / x, 1e-3, 1.0, 1e-12).unwrap();
        assert!((v - 1000f64.ln()).abs() < 1e-11);
    }

    #[test]
    fn reversed_bounds_flip_sign() {
        let a = integrate(|x| x * x, 0.0, 2.0, 1e-12).unwrap();
        let b = integrate(|x| x * x, 2.0, 0.0, 1e-12).unwrap();
        assert_eq!(a, -b);
    }

    #[test]
    fn normal_rule_moments() {
        let rule = normal_rule(64);
        assert!((rule.expect(|_| 1.0) - 1.0).abs() < 1e-14);
        assert!(rule.expect(|z| z).abs() < 1e-14);
        assert!((rule.expect(|z| z * z) - 1.0).abs() < 1e-13);
        // E[exp(sZ)] = exp(s^2/2)
        let s: f64 = 0.7;
        assert!((rule.expect(|z| (s * z).exp()) - (s * s / 2.0).exp()).abs() < 1e-13);
    }

    #[test]
    fn log_grid_endpoints() {
        let g = log_grid(1e-2, 1e2, 5);
        assert_eq!(g.len(), 5);
        assert!((g[0] - 1e-2).abs() < 1e-16);
        assert!((g[2] - 1.0).abs() < 1e-14);
        assert!((g[4] - 1e2).abs() < 1e-12);
    }
}
