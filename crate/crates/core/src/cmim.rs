//! Closed-form period solve for completely monotonic inverse marginals, and
//! residual checks of the one-period integral equation
//! `E[rho * I1(y rho)] = I0(y)`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{PfppError, Result};
use crate::kernels::KernelLaw;
use crate::marginal::Marginal;
use crate::measures::RiskAversionMeasure;
use crate::quadrature::{log_grid, DEFAULT_HERMITE_ORDER};

/// Default residual tolerance for closed-form solves.
pub const DEFAULT_RESIDUAL_TOL: f64 = 1e-9;

/// Largest allowed change of the residual when the Gauss–Hermite order doubles.
pub const ORDER_GATE: f64 = 1e-10;

/// 200 log-spaced points on `[1e-2, 1e2]`.
pub fn default_y_grid() -> Vec<f64> {
    log_grid(1e-2, 1e2, 200)
}

/// `dm1/dm0(γ) = 1 / E[rho^(1 - 1/γ)]`.
pub fn solve_period(m_prev: &RiskAversionMeasure, law: &KernelLaw) -> Result<RiskAversionMeasure> {
    law.validate()?;
    if !law.cmim_integrability_check(m_prev.gamma_min(), m_prev.gamma_max()) {
        return Err(PfppError::Precondition(format!(
            "kernel moments are not finite on ({}, {})",
            m_prev.gamma_min(),
            m_prev.gamma_max()
        )));
    }
    let out = m_prev.tilted(law, -1.0);
    if out
        .atoms()
        .iter()
        .any(|a| !(a.weight.is_finite() && a.weight > 0.0))
    {
        return Err(PfppError::NumericalRange(
            "reweighted atom is not a positive finite number".into(),
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub y: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub rows: Vec<ResidualRow>,
    pub max_rel_err: f64,
    /// Largest relative change of the left-hand side between Gauss–Hermite
    /// orders 64 and 128 (zero for discrete kernels).
    pub order_shift: f64,
}

impl ResidualReport {
    pub fn order_gate_passes(&self) -> bool {
        self.order_shift < ORDER_GATE
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("y,lhs,rhs,rel_err\n");
        for r in &self.rows {
            let _ = writeln!(s, "{:e},{:e},{:e},{:e}", r.y, r.lhs, r.rhs, r.rel_err);
        }
        s
    }
}

/// `E[rho * I1(y rho)]` at the given Gauss–Hermite order.
pub fn pushforward<M: Marginal + ?Sized>(
    i1: &M,
    law: &KernelLaw,
    y: f64,
    order: usize,
) -> Result<f64> {
    law.try_expect_with_order(order, |rho| Ok(rho * i1.eval(y * rho)?))
}

/// Residual of `E[rho * I1(y rho)] = I0(y)` on `y_grid`.
pub fn residual_report<M1, M0>(
    i1: &M1,
    i0: &M0,
    law: &KernelLaw,
    y_grid: &[f64],
) -> Result<ResidualReport>
where
    M1: Marginal + ?Sized,
    M0: Marginal + ?Sized,
{
    let lognormal = matches!(law, KernelLaw::LogNormal { .. });
    let mut rows = Vec::with_capacity(y_grid.len());
    let mut max_rel_err: f64 = 0.0;
    let mut order_shift: f64 = 0.0;
    for &y in y_grid {
        let lhs = pushforward(i1, law, y, DEFAULT_HERMITE_ORDER)?;
        let rhs = i0.eval(y)?;
        let rel_err = (lhs - rhs).abs() / rhs.abs();
        if lognormal {
            let fine = pushforward(i1, law, y, 2 * DEFAULT_HERMITE_ORDER)?;
            order_shift = order_shift.max((fine - lhs).abs() / rhs.abs());
        }
        max_rel_err = max_rel_err.max(rel_err);
        rows.push(ResidualRow {
            y,
            lhs,
            rhs,
            rel_err,
        });
    }
    Ok(ResidualReport {
        rows,
        max_rel_err,
        order_shift,
    })
}

/// Max relative residual of a pair of measures under `law`.
pub fn residual(
    m1: &RiskAversionMeasure,
    m0: &RiskAversionMeasure,
    law: &KernelLaw,
    y_grid: &[f64],
) -> Result<f64> {
    let i1 = |y: f64| m1.eval(y);
    let i0 = |y: f64| m0.eval(y);
    Ok(residual_report(&i1, &i0, law, y_grid)?.max_rel_err)
}

/// Whether `E[I1(y rho)]` is finite on `y_grid`, with orders 64 and 128
/// agreeing to relative 1e-3 for log-normal kernels.
pub fn finiteness_check<M: Marginal + ?Sized>(i1: &M, law: &KernelLaw, y_grid: &[f64]) -> bool {
    let lognormal = matches!(law, KernelLaw::LogNormal { .. });
    y_grid.iter().all(|&y| {
        let coarse = law.try_expect_with_order(DEFAULT_HERMITE_ORDER, |rho| i1.eval(y * rho));
        let Ok(coarse) = coarse else { return false };
        if !coarse.is_finite() {
            return false;
        }
        if !lognormal {
            return true;
        }
        match law.try_expect_with_order(2 * DEFAULT_HERMITE_ORDER, |rho| i1.eval(y * rho)) {
            Ok(fine) => fine.is_finite() && (fine - coarse).abs() <= 1e-3 * coarse.abs(),
            Err(_) => false,
        }
    })
}

/// Inputs and outputs of one closed-form period solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodSolve {
    pub input_measure: RiskAversionMeasure,
    pub kernel: KernelLaw,
    pub output_measure: RiskAversionMeasure,
    pub residual_report: ResidualReport,
}

impl PeriodSolve {
    pub fn run(m_prev: &RiskAversionMeasure, law: &KernelLaw, y_grid: &[f64]) -> Result<Self> {
        let out = solve_period(m_prev, law)?;
        let i1 = |y: f64| out.eval(y);
        let i0 = |y: f64| m_prev.eval(y);
        let residual_report = residual_report(&i1, &i0, law, y_grid)?;
        Ok(PeriodSolve {
            input_measure: m_prev.clone(),
            kernel: law.clone(),
            output_measure: out,
            residual_report,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{kernel_from_binomial, BinomialPeriodParams, BinomialStep};
    use crate::measures::{Atom, DensityCell};

    fn binomial1() -> KernelLaw {
        kernel_from_binomial(
            &BinomialPeriodParams {
                steps: vec![BinomialStep {
                    u: 1.2,
                    d: 0.9,
                    p: 0.6,
                }],
            },
            20,
        )
        .unwrap()
    }

    fn atom(gamma: f64) -> RiskAversionMeasure {
        RiskAversionMeasure::single_atom(gamma, 1.0, 0.5, 4.0).unwrap()
    }

    #[test]
    fn log_utility_is_invariant() {
        for law in [binomial1(), KernelLaw::log_normal(0.09).unwrap()] {
            let out = solve_period(&atom(1.0), &law).unwrap();
            assert!((out.atoms()[0].weight - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn crra_weights() {
        let out = solve_period(&atom(2.0), &KernelLaw::log_normal(0.09).unwrap()).unwrap();
        assert!((out.atoms()[0].weight - 0.01125f64.exp()).abs() < 1e-15);
        assert!((out.atoms()[0].weight - 1.011313).abs() < 1e-6);

        let out = solve_period(&atom(2.0), &binomial1()).unwrap();
        let expect = 1.0 / (0.6 * (5.0f64 / 9.0).sqrt() + 0.4 * (5.0f64 / 3.0).sqrt());
        assert!((out.atoms()[0].weight - expect).abs() < 1e-14);
    }

    #[test]
    fn residual_examples() {
        let grid = default_y_grid();
        for law in [binomial1(), KernelLaw::log_normal(0.09).unwrap()] {
            let m0 = atom(2.0);
            let m1 = solve_period(&m0, &law).unwrap();
            assert!(residual(&m1, &m0, &law, &grid).unwrap() < 1e-9);
            let doubled = m1.scaled(2.0);
            let r = residual(&doubled, &m0, &law, &grid).unwrap();
            assert!((r - 1.0).abs() < 1e-9);
        }
        let m = atom(2.0);
        assert_eq!(
            residual(&m, &m, &KernelLaw::point_mass(), &grid).unwrap(),
            0.0
        );
    }

    #[test]
    fn density_cells_solve_to_tolerance() {
        let m0 = RiskAversionMeasure::new(
            vec![Atom {
                gamma: 1.3,
                weight: 0.4,
            }],
            vec![DensityCell {
                lo: 1.8,
                hi: 2.6,
                level: 0.75,
            }],
            1.1,
            3.0,
        )
        .unwrap();
        let law = KernelLaw::log_normal(0.25).unwrap();
        let solved = PeriodSolve::run(&m0, &law, &default_y_grid()).unwrap();
        assert!(solved.residual_report.max_rel_err < 1e-9);
        assert!(solved.residual_report.order_gate_passes());
        assert_eq!(solved.output_measure.support(), m0.support());
    }

    #[test]
    fn integrability_failure_is_a_precondition_error() {
        // Negative moments overflow for an extreme variance.
        let m = atom(2.0);
        let law = KernelLaw::log_normal(1e6).unwrap();
        assert!(matches!(
            solve_period(&m, &law),
            Err(PfppError::Precondition(_)) | Err(PfppError::NumericalRange(_))
        ));
    }

    #[test]
    fn finiteness_examples() {
        let grid = default_y_grid();
        let m = solve_period(&atom(2.0), &binomial1()).unwrap();
        assert!(finiteness_check(&|y: f64| m.eval(y), &binomial1(), &grid));
        let law = KernelLaw::log_normal(0.09).unwrap();
        let m = RiskAversionMeasure::single_atom(2.0, 1.0, 1.1, 3.0).unwrap();
        let m1 = solve_period(&m, &law).unwrap();
        assert!(finiteness_check(&|y: f64| m1.eval(y), &law, &grid));
        let blowup = |y: f64| Ok((1.0 / y).exp());
        assert!(!finiteness_check(&blowup, &law, &grid));
    }

    #[test]
    fn csv_rows() {
        let m = atom(2.0);
        let i = |y: f64| m.eval(y);
        let rep = residual_report(&i, &i, &KernelLaw::point_mass(), &[1.0, 4.0]).unwrap();
        let csv = rep.to_csv();
        assert!(csv.starts_with("y,lhs,rhs,rel_err\n"));
        assert_eq!(csv.lines().count(), 3);
    }
}
