//! One-period pricing-kernel laws.
//!
//! A [`KernelLaw`] is the conditional distribution of the pricing kernel
//! `rho = Z_n / Z_{n-1}` given the parameters revealed for the period. Two
//! market backends produce them: the generalized binomial tree (finite atoms)
//! and the generalized Black–Scholes market (log-normal).

use rand::{Rng, RngExt};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{PfppError, Result};
use crate::quadrature::{normal_rule, DEFAULT_HERMITE_ORDER};

/// Largest number of binomial sub-steps per period accepted by default.
pub const DEFAULT_BINOMIAL_CAP: usize = 20;

const LAW_TOL: f64 = 1e-12;
const MERGE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelAtom {
    pub rho: f64,
    pub prob: f64,
}

/// Law of the one-period pricing kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum KernelLaw {
    /// Finitely many atoms; probabilities sum to one and the mean is one.
    FiniteDiscrete { atoms: Vec<KernelAtom> },
    /// `rho = exp(-sigma2 / 2 - sqrt(sigma2) * Z)` with `Z` standard normal.
    LogNormal { sigma2: f64 },
}

impl KernelLaw {
    /// The degenerate kernel `rho = 1`.
    pub fn point_mass() -> Self {
        KernelLaw::FiniteDiscrete {
            atoms: vec![KernelAtom {
                rho: 1.0,
                prob: 1.0,
            }],
        }
    }

    pub fn finite_discrete(atoms: Vec<KernelAtom>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(PfppError::Validation("kernel law has no atoms".into()));
        }
        for a in &atoms {
            if !(a.rho.is_finite() && a.rho > 0.0 && a.prob.is_finite() && a.prob > 0.0) {
                return Err(PfppError::Validation(format!(
                    "kernel atom must have positive finite rho and prob, got {a:?}"
                )));
            }
        }
        let law = KernelLaw::FiniteDiscrete { atoms };
        law.validate()?;
        Ok(law)
    }

    pub fn log_normal(sigma2: f64) -> Result<Self> {
        if !(sigma2.is_finite() && sigma2 > 0.0) {
            return Err(PfppError::Validation(format!(
                "log-normal variance must be positive and finite, got {sigma2}"
            )));
        }
        Ok(KernelLaw::LogNormal { sigma2 })
    }

    /// Checks total probability and the unit-mean normalization.
    pub fn validate(&self) -> Result<()> {
        match self {
            KernelLaw::FiniteDiscrete { atoms } => {
                let mass: f64 = atoms.iter().map(|a| a.prob).sum();
                let mean: f64 = atoms.iter().map(|a| a.prob * a.rho).sum();
                if (mass - 1.0).abs() > LAW_TOL {
                    return Err(PfppError::Validation(format!(
                        "kernel probabilities sum to {mass}, expected 1"
                    )));
                }
                if (mean - 1.0).abs() > LAW_TOL {
                    return Err(PfppError::Validation(format!(
                        "kernel mean is {mean}, expected 1"
                    )));
                }
                Ok(())
            }
            KernelLaw::LogNormal { sigma2 } => {
                if sigma2.is_finite() && *sigma2 > 0.0 {
                    Ok(())
                } else {
                    Err(PfppError::Validation(format!(
                        "log-normal variance must be positive, got {sigma2}"
                    )))
                }
            }
        }
    }

    /// True when the law is the point mass at one.
    pub fn is_degenerate(&self) -> bool {
        match self {
            KernelLaw::FiniteDiscrete { atoms } => atoms.iter().all(|a| a.rho == 1.0),
            KernelLaw::LogNormal { .. } => false,
        }
    }

    /// `E[rho^a]`.
    pub fn moment(&self, a: f64) -> f64 {
        match self {
            KernelLaw::FiniteDiscrete { atoms } => {
                atoms.iter().map(|k| k.prob * k.rho.powf(a)).sum()
            }
            KernelLaw::LogNormal { sigma2 } => (0.5 * sigma2 * a * (a - 1.0)).exp(),
        }
    }

    /// `E[f(rho)]`: an exact sum for discrete laws, Gauss–Hermite of the given
    /// order in `log rho` for log-normal laws.
    pub fn expect_with_order<F: FnMut(f64) -> f64>(&self, order: usize, mut f: F) -> f64 {
        match self {
            KernelLaw::FiniteDiscrete { atoms } => atoms.iter().map(|k| k.prob * f(k.rho)).sum(),
            KernelLaw::LogNormal { sigma2 } => {
                let sd = sigma2.sqrt();
                let drift = -0.5 * sigma2;
                normal_rule(order).expect(|z| f((drift - sd * z).exp()))
            }
        }
    }

    pub fn expect<F: FnMut(f64) -> f64>(&self, f: F) -> f64 {
        self.expect_with_order(DEFAULT_HERMITE_ORDER, f)
    }

    /// Fallible variant of [`KernelLaw::expect_with_order`]; stops at the first error.
    pub fn try_expect_with_order<F>(&self, order: usize, mut f: F) -> Result<f64>
    where
        F: FnMut(f64) -> Result<f64>,
    {
        let mut acc = 0.0;
        match self {
            KernelLaw::FiniteDiscrete { atoms } => {
                for k in atoms {
                    acc += k.prob * f(k.rho)?;
                }
            }
            KernelLaw::LogNormal { sigma2 } => {
                let sd = sigma2.sqrt();
                let drift = -0.5 * sigma2;
                let rule = normal_rule(order);
                for (&z, &w) in rule.nodes.iter().zip(&rule.weights) {
                    acc += w * f((drift - sd * z).exp())?;
                }
            }
        }
        Ok(acc)
    }

    pub fn try_expect<F>(&self, f: F) -> Result<f64>
    where
        F: FnMut(f64) -> Result<f64>,
    {
        self.try_expect_with_order(DEFAULT_HERMITE_ORDER, f)
    }

    /// Whether `E[rho^(-1/g1) + rho^(1-1/g1) + rho^(1-1/g2)]` is finite, the
    /// integrability condition of the closed-form route.
    pub fn cmim_integrability_check(&self, gamma_min: f64, gamma_max: f64) -> bool {
        if !(gamma_min > 0.0 && gamma_min <= gamma_max) {
            return false;
        }
        let total = self.moment(-1.0 / gamma_min)
            + self.moment(1.0 - 1.0 / gamma_min)
            + self.moment(1.0 - 1.0 / gamma_max);
        total.is_finite()
    }

    /// Draws one kernel value.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            KernelLaw::FiniteDiscrete { atoms } => {
                let u: f64 = rng.random();
                let mut cum = 0.0;
                for a in atoms {
                    cum += a.prob;
                    if u < cum {
                        return a.rho;
                    }
                }
                atoms.last().map(|a| a.rho).unwrap_or(1.0)
            }
            KernelLaw::LogNormal { sigma2 } => {
                let z: f64 = rng.sample(StandardNormal);
                (-0.5 * sigma2 - sigma2.sqrt() * z).exp()
            }
        }
    }

    /// Variance of `log rho` (zero for the degenerate law).
    pub fn log_variance(&self) -> f64 {
        match self {
            KernelLaw::LogNormal { sigma2 } => *sigma2,
            KernelLaw::FiniteDiscrete { atoms } => {
                let m: f64 = atoms.iter().map(|a| a.prob * a.rho.ln()).sum();
                atoms
                    .iter()
                    .map(|a| a.prob * (a.rho.ln() - m).powi(2))
                    .sum()
            }
        }
    }
}

/// One binomial sub-step: up factor, down factor, physical up-probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinomialStep {
    pub u: f64,
    pub d: f64,
    pub p: f64,
}

impl BinomialStep {
    pub fn validate(&self) -> Result<()> {
        let ok = self.u.is_finite()
            && self.d.is_finite()
            && self.p.is_finite()
            && self.u > 1.0
            && self.d > 0.0
            && self.d < 1.0
            && self.p > 0.0
            && self.p < 1.0;
        if ok {
            Ok(())
        } else {
            Err(PfppError::Validation(format!(
                "binomial step needs u > 1, 0 < d < 1, 0 < p < 1, got {self:?}"
            )))
        }
    }

    /// Risk-neutral up-probability `(1 - d) / (u - d)`.
    pub fn q(&self) -> f64 {
        (1.0 - self.d) / (self.u - self.d)
    }

    /// Kernel factor after an up move.
    pub fn rho_up(&self) -> f64 {
        self.q() / self.p
    }

    /// Kernel factor after a down move.
    pub fn rho_down(&self) -> f64 {
        (1.0 - self.q()) / (1.0 - self.p)
    }
}

/// Parameters of one evaluation period of the binomial market.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinomialPeriodParams {
    pub steps: Vec<BinomialStep>,
}

impl BinomialPeriodParams {
    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(PfppError::Validation("binomial period has no steps".into()));
        }
        self.steps.iter().try_for_each(BinomialStep::validate)
    }
}

/// Parameters of one evaluation period of the Black–Scholes market.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BsPeriodParams {
    /// Market price of risk.
    pub lambda: Vec<f64>,
    /// Volatility matrix; only the simulator looks at it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<Vec<f64>>>,
}

impl BsPeriodParams {
    pub fn new(lambda: Vec<f64>) -> Self {
        BsPeriodParams {
            lambda,
            sigma: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda.is_empty() || self.lambda.iter().any(|l| !l.is_finite()) {
            return Err(PfppError::Validation(format!(
                "lambda must be a non-empty finite vector, got {:?}",
                self.lambda
            )));
        }
        if let Some(sigma) = &self.sigma {
            let k = self.lambda.len();
            if sigma.len() != k || sigma.iter().any(|row| row.len() != k) {
                return Err(PfppError::Validation(format!(
                    "sigma must be {k}x{k} to match lambda"
                )));
            }
            if !is_nonsingular(sigma) {
                return Err(PfppError::Validation("sigma is singular".into()));
            }
        }
        Ok(())
    }

    pub fn lambda_norm2(&self) -> f64 {
        self.lambda.iter().map(|l| l * l).sum()
    }
}

fn is_nonsingular(m: &[Vec<f64>]) -> bool {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m.to_vec();
    let scale = a.iter().flatten().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    if !scale.is_finite() || scale == 0.0 {
        return false;
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot][col].abs() <= 1e-12 * scale {
            return false;
        }
        a.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for c in col..n {
                a[row][c] -= f * a[col][c];
            }
        }
    }
    true
}

/// Per-period parameter block, tagged by market backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ThetaBlock {
    Binomial(BinomialPeriodParams),
    Bs(BsPeriodParams),
}

impl ThetaBlock {
    pub fn validate(&self) -> Result<()> {
        match self {
            ThetaBlock::Binomial(p) => p.validate(),
            ThetaBlock::Bs(p) => p.validate(),
        }
    }

    pub fn kernel(&self) -> Result<KernelLaw> {
        match self {
            ThetaBlock::Binomial(p) => kernel_from_binomial(p, DEFAULT_BINOMIAL_CAP),
            ThetaBlock::Bs(p) => kernel_from_bs(p),
        }
    }
}

/// Kernel law of a binomial evaluation period.
///
/// Every subset of up-moves contributes the atom
/// `prod_up q/p * prod_down (1-q)/(1-p)` with probability
/// `prod_up p * prod_down (1-p)`. Atoms are built one sub-step at a time and
/// equal kernel values (relative `1e-12`) are merged as they appear, which
/// gives the same law as listing all `2^N` subsets.
pub fn kernel_from_binomial(params: &BinomialPeriodParams, cap: usize) -> Result<KernelLaw> {
    if params.steps.len() > cap {
        return Err(PfppError::Capacity(format!(
            "{} binomial sub-steps exceed the cap of {cap}",
            params.steps.len()
        )));
    }
    params.validate()?;
    let mut atoms = vec![KernelAtom {
        rho: 1.0,
        prob: 1.0,
    }];
    for step in &params.steps {
        let (up, down) = (step.rho_up(), step.rho_down());
        let mut next = Vec::with_capacity(atoms.len() * 2);
        for a in &atoms {
            next.push(KernelAtom {
                rho: a.rho * up,
                prob: a.prob * step.p,
            });
            next.push(KernelAtom {
                rho: a.rho * down,
                prob: a.prob * (1.0 - step.p),
            });
        }
        atoms = merge_atoms(next);
    }
    let law = KernelLaw::FiniteDiscrete { atoms };
    law.validate()?;
    Ok(law)
}

fn merge_atoms(mut atoms: Vec<KernelAtom>) -> Vec<KernelAtom> {
    atoms.sort_by(|a, b| a.rho.total_cmp(&b.rho));
    let mut out: Vec<KernelAtom> = Vec::with_capacity(atoms.len());
    for a in atoms {
        match out.last_mut() {
            Some(last) if (a.rho - last.rho).abs() <= MERGE_TOL * last.rho.abs() => {
                last.prob += a.prob;
            }
            _ => out.push(a),
        }
    }
    out
}

/// Kernel law of a Black–Scholes evaluation period: log-normal with variance
/// `|lambda|^2`, or the point mass when `lambda = 0`.
pub fn kernel_from_bs(params: &BsPeriodParams) -> Result<KernelLaw> {
    params.validate()?;
    let s2 = params.lambda_norm2();
    if s2 == 0.0 {
        Ok(KernelLaw::point_mass())
    } else {
        KernelLaw::log_normal(s2)
    }
}
