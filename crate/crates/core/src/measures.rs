//! Finite risk-aversion measures and the completely monotonic inverse
//! marginals they induce, `I(y) = ∫ y^(-1/γ) dm(γ)`.
//!
//! A measure is a finite list of atoms plus piecewise-constant density cells.
//! Kernel reweightings of the density are carried symbolically as a list of
//! tilts, so the density of a cell at `γ` is
//! `level * Π_k E_k[rho^(1 - 1/γ)]^power_k`. Atoms are reweighted in place.

use serde::{Deserialize, Serialize};

use crate::error::{PfppError, Result};
use crate::kernels::KernelLaw;
use crate::quadrature;

/// Relative tolerance for density-cell quadrature.
pub const CELL_QUAD_TOL: f64 = 1e-12;

/// Smallest and largest `y` accepted by evaluation.
pub const Y_MIN: f64 = 1e-300;
pub const Y_MAX: f64 = 1e300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub gamma: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityCell {
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
}

/// Multiplies the density by `E[rho^(1 - 1/γ)]^power` under `law`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityTilt {
    pub law: KernelLaw,
    pub power: f64,
}

impl DensityTilt {
    fn factor(&self, gamma: f64) -> f64 {
        self.law.moment(1.0 - 1.0 / gamma).powf(self.power)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RawMeasure {
    #[serde(default)]
    atoms: Vec<Atom>,
    #[serde(default)]
    cells: Vec<DensityCell>,
    gamma_min: f64,
    gamma_max: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    density_tilts: Vec<DensityTilt>,
}

/// Finite Borel measure on `(gamma_min, gamma_max)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMeasure", into = "RawMeasure")]
pub struct RiskAversionMeasure {
    atoms: Vec<Atom>,
    cells: Vec<DensityCell>,
    gamma_min: f64,
    gamma_max: f64,
    density_tilts: Vec<DensityTilt>,
}

impl TryFrom<RawMeasure> for RiskAversionMeasure {
    type Error = PfppError;

    fn try_from(raw: RawMeasure) -> Result<Self> {
        let m = RiskAversionMeasure {
            atoms: raw.atoms,
            cells: raw.cells,
            gamma_min: raw.gamma_min,
            gamma_max: raw.gamma_max,
            density_tilts: raw.density_tilts,
        };
        m.validate()?;
        Ok(m)
    }
}

impl From<RiskAversionMeasure> for RawMeasure {
    fn from(m: RiskAversionMeasure) -> Self {
        RawMeasure {
            atoms: m.atoms,
            cells: m.cells,
            gamma_min: m.gamma_min,
            gamma_max: m.gamma_max,
            density_tilts: m.density_tilts,
        }
    }
}

impl RiskAversionMeasure {
    pub fn new(
        atoms: Vec<Atom>,
        cells: Vec<DensityCell>,
        gamma_min: f64,
        gamma_max: f64,
    ) -> Result<Self> {
        RawMeasure {
            atoms,
            cells,
            gamma_min,
            gamma_max,
            density_tilts: Vec::new(),
        }
        .try_into()
    }

    /// A single atom, i.e. a CRRA inverse marginal `weight * y^(-1/gamma)`.
    pub fn single_atom(gamma: f64, weight: f64, gamma_min: f64, gamma_max: f64) -> Result<Self> {
        Self::new(
            vec![Atom { gamma, weight }],
            Vec::new(),
            gamma_min,
            gamma_max,
        )
    }

    fn validate(&self) -> Result<()> {
        let (g1, g2) = (self.gamma_min, self.gamma_max);
        if !(g1.is_finite() && g2.is_finite() && g1 > 0.0 && g1 <= g2) {
            return Err(PfppError::Validation(format!(
                "ambient bounds need 0 < gamma_min <= gamma_max, got ({g1}, {g2})"
            )));
        }
        for a in &self.atoms {
            if !(a.gamma > g1 && a.gamma < g2) {
                return Err(PfppError::Validation(format!(
                    "atom at gamma={} lies outside ({g1}, {g2})",
                    a.gamma
                )));
            }
            if !(a.weight.is_finite() && a.weight > 0.0) {
                return Err(PfppError::Validation(format!(
                    "atom weight must be positive, got {}",
                    a.weight
                )));
            }
        }
        for c in &self.cells {
            if !(c.lo < c.hi && c.lo > g1 && c.hi < g2) {
                return Err(PfppError::Validation(format!(
                    "density cell [{}, {}] must be non-empty and inside ({g1}, {g2})",
                    c.lo, c.hi
                )));
            }
            if !(c.level.is_finite() && c.level >= 0.0) {
                return Err(PfppError::Validation(format!(
                    "density level must be non-negative, got {}",
                    c.level
                )));
            }
        }
        for t in &self.density_tilts {
            t.law.validate()?;
            if !t.power.is_finite() {
                return Err(PfppError::Validation("tilt power must be finite".into()));
            }
        }
        let mass = self.mass()?;
        if !(mass.is_finite() && mass > 0.0) {
            return Err(PfppError::Validation(format!(
                "total mass must be positive and finite, got {mass}"
            )));
        }
        Ok(())
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn cells(&self) -> &[DensityCell] {
        &self.cells
    }

    pub fn density_tilts(&self) -> &[DensityTilt] {
        &self.density_tilts
    }

    pub fn gamma_min(&self) -> f64 {
        self.gamma_min
    }

    pub fn gamma_max(&self) -> f64 {
        self.gamma_max
    }

    /// Density of the absolutely continuous part at `gamma`.
    pub fn density(&self, gamma: f64) -> f64 {
        let level: f64 = self
            .cells
            .iter()
            .filter(|c| gamma >= c.lo && gamma < c.hi)
            .map(|c| c.level)
            .sum();
        if level == 0.0 {
            return 0.0;
        }
        level * self.tilt_factor(gamma)
    }

    fn tilt_factor(&self, gamma: f64) -> f64 {
        self.density_tilts.iter().map(|t| t.factor(gamma)).product()
    }

    /// Integral of `g(γ)` against the density part, cell by cell.
    fn integrate_cells<F: Fn(f64) -> f64>(&self, g: F) -> Result<f64> {
        let mut total = 0.0;
        for c in &self.cells {
            if c.level == 0.0 {
                continue;
            }
            let v = quadrature::integrate(
                |gm| g(gm) * self.tilt_factor(gm),
                c.lo,
                c.hi,
                CELL_QUAD_TOL,
            )?;
            total += c.level * v;
        }
        Ok(total)
    }

    /// `m((gamma_min, gamma_max))`.
    pub fn mass(&self) -> Result<f64> {
        let atoms: f64 = self.atoms.iter().map(|a| a.weight).sum();
        Ok(atoms + self.integrate_cells(|_| 1.0)?)
    }

    /// The atoms' gammas and the cells' intervals, in storage order.
    pub fn support(&self) -> (Vec<f64>, Vec<(f64, f64)>) {
        (
            self.atoms.iter().map(|a| a.gamma).collect(),
            self.cells.iter().map(|c| (c.lo, c.hi)).collect(),
        )
    }

    /// Applies `dm'/dm(γ) = E[rho^(1 - 1/γ)]^power` under `law`.
    pub fn tilted(&self, law: &KernelLaw, power: f64) -> Self {
        let atoms = self
            .atoms
            .iter()
            .map(|a| Atom {
                gamma: a.gamma,
                weight: a.weight * law.moment(1.0 - 1.0 / a.gamma).powf(power),
            })
            .collect();
        let mut density_tilts = self.density_tilts.clone();
        if self.cells.iter().any(|c| c.level > 0.0) {
            density_tilts.push(DensityTilt {
                law: law.clone(),
                power,
            });
        }
        RiskAversionMeasure {
            atoms,
            cells: self.cells.clone(),
            gamma_min: self.gamma_min,
            gamma_max: self.gamma_max,
            density_tilts,
        }
    }

    /// Multiplies every weight and density level by `c > 0`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.atoms.iter_mut().for_each(|a| a.weight *= c);
        out.cells.iter_mut().for_each(|cell| cell.level *= c);
        out
    }

    /// Natural log of `I(y)`, computed without forming `y^(-1/γ)` directly.
    pub fn log_eval(&self, y: f64) -> Result<f64> {
        let ly = check_y(y)?;
        self.log_power_integral(|gamma| -ly / gamma, |_| 1.0)
    }

    /// `I(y) = ∫ y^(-1/γ) dm(γ)`.
    pub fn eval(&self, y: f64) -> Result<f64> {
        let l = self.log_eval(y)?;
        finite_exp(l, "I(y)", y)
    }

    /// `I'(y) = -∫ (1/γ) y^(-(1+γ)/γ) dm(γ)`.
    pub fn derivative(&self, y: f64) -> Result<f64> {
        let ly = check_y(y)?;
        let l =
            self.log_power_integral(|gamma| -ly * (1.0 + gamma) / gamma, |gamma| 1.0 / gamma)?;
        Ok(-finite_exp(l, "I'(y)", y)?)
    }

    /// Elasticity `y I'(y) / I(y)`, always in `[-1/gamma_min, -1/gamma_max]`.
    pub fn elasticity(&self, y: f64) -> Result<f64> {
        let ly = check_y(y)?;
        let num = self.log_power_integral(|gamma| -ly / gamma, |gamma| 1.0 / gamma)?;
        let den = self.log_power_integral(|gamma| -ly / gamma, |_| 1.0)?;
        Ok(-(num - den).exp())
    }

    /// `log ∫ exp(e(γ)) c(γ) dm(γ)` for an exponent `e` monotone in γ on each
    /// cell and a positive coefficient `c`.
    fn log_power_integral<E, C>(&self, exponent: E, coef: C) -> Result<f64>
    where
        E: Fn(f64) -> f64,
        C: Fn(f64) -> f64,
    {
        let mut terms: Vec<f64> = self
            .atoms
            .iter()
            .map(|a| a.weight.ln() + coef(a.gamma).ln() + exponent(a.gamma))
            .collect();
        for c in &self.cells {
            if c.level == 0.0 {
                continue;
            }
            let shift = exponent(c.lo).max(exponent(c.hi));
            let v = quadrature::integrate(
                |g| (exponent(g) - shift).exp() * coef(g) * self.tilt_factor(g),
                c.lo,
                c.hi,
                CELL_QUAD_TOL,
            )?;
            if v > 0.0 {
                terms.push(shift + (c.level * v).ln());
            }
        }
        let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(PfppError::NumericalRange(
                "measure integral has no finite terms".into(),
            ));
        }
        Ok(max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln())
    }

    /// `(lo, hi)` with `lo <= I(y) <= hi`: the mass-scaled powers at the
    /// ambient bounds.
    pub fn sandwich_bounds(&self, y: f64) -> Result<(f64, f64)> {
        check_y(y)?;
        let mass = self.mass()?;
        let a = mass * y.powf(-1.0 / self.gamma_min);
        let b = mass * y.powf(-1.0 / self.gamma_max);
        Ok(if y >= 1.0 { (a, b) } else { (b, a) })
    }

    /// `∫_1^y I(z) dz`.
    pub fn integral_from_one(&self, y: f64) -> Result<f64> {
        let ly = check_y(y)?;
        let prim = |gamma: f64| {
            let a = 1.0 - 1.0 / gamma;
            if a == 0.0 {
                ly
            } else {
                (a * ly).exp_m1() / a
            }
        };
        let atoms: f64 = self.atoms.iter().map(|a| a.weight * prim(a.gamma)).sum();
        let v = atoms + self.integrate_cells(prim)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(PfppError::NumericalRange(format!(
                "integral of I from 1 to {y} overflows"
            )))
        }
    }
}

pub(crate) fn check_y(y: f64) -> Result<f64> {
    if !(y > 0.0) || y.is_nan() {
        return Err(PfppError::Domain(format!("y must be positive, got {y}")));
    }
    if !(Y_MIN..=Y_MAX).contains(&y) {
        return Err(PfppError::NumericalRange(format!(
            "y={y} outside [{Y_MIN:e}, {Y_MAX:e}]"
        )));
    }
    Ok(y.ln())
}

fn finite_exp(l: f64, what: &str, y: f64) -> Result<f64> {
    let v = l.exp();
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(PfppError::NumericalRange(format!(
            "{what} at y={y} is not representable (log value {l})"
        )))
    }
}
