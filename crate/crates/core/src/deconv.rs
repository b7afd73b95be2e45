//! Grid-Fourier solver for the one-period integral equation with a general
//! (not necessarily completely monotonic) initial inverse marginal.
//!
//! In `t = log y` the equation reads `J0 = J1 * nu`, where `nu` carries mass
//! `rho * pi` at `-log rho`. Writing `J1 = e^(-t/g1) J11 + e^(-t/g2) J12` and
//! splitting `J0` the same way turns it into two bounded deconvolutions
//! `J0k = J1k * mu_k`, with `mu_k = e^(t/gk) nu`. Each is solved by FFT
//! division on a periodic grid.

use std::f64::consts::{PI, SQRT_2};
use std::fmt::Write as _;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::cmim::residual_report;
use crate::error::{PfppError, Result};
use crate::kernels::KernelLaw;
use crate::marginal::{GridMarginal, InverseMarginal, Marginal};

/// Largest relative increase tolerated between adjacent samples of `J1`.
pub const MONOTONE_TOL: f64 = 1e-6;

/// Lognormal kernels must fit inside `[-L, L]` with this many standard
/// deviations to spare.
const KERNEL_SIGMAS: f64 = 12.0;

/// Smooth windows must be at least this many kernel standard deviations wide.
const MIN_WINDOW_SIGMAS: f64 = 1.5;

/// Edge windows reach `Phi(-8.5) ~ 1e-17` at the grid boundary.
const TAPER_SCALES: f64 = 17.0;

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Uniform samples on `t_j = -L + j 2L/n`, `j = 0..n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    pub half_width: f64,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn new(half_width: f64, values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        if !(half_width.is_finite() && half_width > 0.0) {
            return Err(PfppError::Config(format!(
                "half width must be positive, got {half_width}"
            )));
        }
        if n < 4 || !n.is_power_of_two() {
            return Err(PfppError::Config(format!(
                "grid size must be a power of two >= 4, got {n}"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(PfppError::NumericalRange(
                "grid values must be finite".into(),
            ));
        }
        Ok(GridFunction { half_width, values })
    }

    pub fn from_fn<F: FnMut(f64) -> f64>(half_width: f64, n: usize, mut f: F) -> Result<Self> {
        let dt = 2.0 * half_width / n as f64;
        let values = (0..n).map(|j| f(-half_width + dt * j as f64)).collect();
        Self::new(half_width, values)
    }

    pub fn n_points(&self) -> usize {
        self.values.len()
    }

    pub fn dt(&self) -> f64 {
        2.0 * self.half_width / self.values.len() as f64
    }

    pub fn t(&self, j: usize) -> f64 {
        -self.half_width + self.dt() * j as f64
    }

    pub fn ts(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.values.len()).map(move |j| self.t(j))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,value\n");
        for (j, v) in self.values.iter().enumerate() {
            let _ = writeln!(s, "{:e},{:e}", self.t(j), v);
        }
        s
    }

    fn map_with_t<F: Fn(f64, f64) -> f64>(&self, f: F) -> GridFunction {
        GridFunction {
            half_width: self.half_width,
            values: self
                .values
                .iter()
                .enumerate()
                .map(|(j, &v)| f(self.t(j), v))
                .collect(),
        }
    }
}

/// How `J0` is cut in two and how the grid edges are faded out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    /// Gaussian-smoothed partition of unity and erf edge taper.
    #[default]
    Smooth,
    /// Indicator split at `t = 0` and raised-cosine edge taper.
    Sharp,
}

fn default_half_width() -> f64 {
    30.0
}
fn default_n_points() -> usize {
    1 << 14
}
fn default_floor() -> f64 {
    1e-8
}
fn default_taper() -> f64 {
    0.4
}
fn default_split_width() -> f64 {
    1.0
}
fn default_growth_limit() -> f64 {
    1e6
}
fn default_trust_tol() -> f64 {
    1e-7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeconvConfig {
    #[serde(default = "default_half_width")]
    pub half_width: f64,
    #[serde(default = "default_n_points")]
    pub n_points: usize,
    pub gamma1: f64,
    pub gamma2: f64,
    /// Frequencies where `|F[mu]|` falls below this are zeroed.
    #[serde(default = "default_floor")]
    pub fourier_floor: f64,
    /// Fraction of each half-line `[-L, 0]`, `[0, L]` used by the edge taper.
    #[serde(default = "default_taper")]
    pub taper_fraction: f64,
    /// Scale of the smooth split around `t = 0`.
    #[serde(default = "default_split_width")]
    pub split_width: f64,
    #[serde(default)]
    pub window: WindowKind,
    /// Edge growth (relative to the value at `t = 0`) treated as unbounded.
    #[serde(default = "default_growth_limit")]
    pub growth_limit: f64,
    /// Samples of `J1` that move by more than this (relative) when the edge
    /// taper is widened are dropped from the solution.
    #[serde(default = "default_trust_tol")]
    pub trust_tol: f64,
}

impl DeconvConfig {
    pub fn new(gamma1: f64, gamma2: f64) -> Self {
        DeconvConfig {
            half_width: default_half_width(),
            n_points: default_n_points(),
            gamma1,
            gamma2,
            fourier_floor: default_floor(),
            taper_fraction: default_taper(),
            split_width: default_split_width(),
            window: WindowKind::Smooth,
            growth_limit: default_growth_limit(),
            trust_tol: default_trust_tol(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PfppError::Config(m));
        if !(self.half_width.is_finite() && self.half_width > 0.0) {
            return bad(format!(
                "half_width must be positive, got {}",
                self.half_width
            ));
        }
        if self.n_points < 16 || !self.n_points.is_power_of_two() {
            return bad(format!(
                "n_points must be a power of two >= 16, got {}",
                self.n_points
            ));
        }
        if !(self.gamma1 > 0.0 && self.gamma1 <= self.gamma2 && self.gamma2.is_finite()) {
            return bad(format!(
                "need 0 < gamma1 <= gamma2, got ({}, {})",
                self.gamma1, self.gamma2
            ));
        }
        if !(self.fourier_floor > 0.0) {
            return bad(format!(
                "fourier_floor must be positive, got {}",
                self.fourier_floor
            ));
        }
        if !(self.taper_fraction > 0.0 && self.taper_fraction < 1.0) {
            return bad(format!(
                "taper_fraction must lie in (0, 1), got {}",
                self.taper_fraction
            ));
        }
        if !(self.split_width > 0.0) {
            return bad(format!(
                "split_width must be positive, got {}",
                self.split_width
            ));
        }
        if !(self.growth_limit > 1.0) {
            return bad(format!(
                "growth_limit must exceed 1, got {}",
                self.growth_limit
            ));
        }
        if !(self.trust_tol > 0.0) {
            return bad(format!(
                "trust_tol must be positive, got {}",
                self.trust_tol
            ));
        }
        Ok(())
    }

    fn taper_width(&self) -> f64 {
        self.taper_fraction * self.half_width
    }

    fn taper_scale(&self) -> f64 {
        self.taper_width() / TAPER_SCALES
    }

    /// Multiplier fading samples out near `t = ±L`.
    pub fn taper(&self, t: f64) -> f64 {
        let w = self.taper_width();
        let d = (t + self.half_width).min(self.half_width - t);
        match self.window {
            WindowKind::Smooth => std_normal_cdf((d - 0.5 * w) / self.taper_scale()),
            WindowKind::Sharp => {
                if d >= w {
                    1.0
                } else {
                    0.5 * (1.0 - (PI * d.max(0.0) / w).cos())
                }
            }
        }
    }

    /// Weights of the left and right pieces at `t`; they sum to one.
    pub fn split_weights(&self, t: f64) -> (f64, f64) {
        match self.window {
            WindowKind::Smooth => {
                let left = std_normal_cdf(-t / self.split_width);
                (left, 1.0 - left)
            }
            WindowKind::Sharp => {
                if t < 0.0 {
                    (1.0, 0.0)
                } else {
                    (0.0, 1.0)
                }
            }
        }
    }

    /// Interval of `t` untouched by the edge taper.
    pub fn untapered(&self) -> (f64, f64) {
        let r = self.half_width - self.taper_width();
        (-r, r)
    }
}

/// The tilted kernel `mu_k = e^(t/gk) nu` on the log-coordinate line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TiltedKernel {
    /// Point masses `(t, mass)`.
    Atoms {
        atoms: Vec<(f64, f64)>,
        gamma_k: f64,
    },
    /// `scale * Normal(mean, var)`.
    Gaussian {
        scale: f64,
        mean: f64,
        var: f64,
        gamma_k: f64,
    },
}

impl TiltedKernel {
    pub fn from_law(law: &KernelLaw, gamma_k: f64) -> Result<Self> {
        if !(gamma_k > 0.0 && gamma_k.is_finite()) {
            return Err(PfppError::Config(format!(
                "gamma_k must be positive, got {gamma_k}"
            )));
        }
        Ok(match law {
            KernelLaw::FiniteDiscrete { atoms } => TiltedKernel::Atoms {
                atoms: atoms
                    .iter()
                    .map(|a| (-a.rho.ln(), a.prob * a.rho.powf(1.0 - 1.0 / gamma_k)))
                    .collect(),
                gamma_k,
            },
            KernelLaw::LogNormal { sigma2 } => {
                let inv = 1.0 / gamma_k;
                TiltedKernel::Gaussian {
                    scale: (0.5 * sigma2 * inv * (inv - 1.0)).exp(),
                    mean: sigma2 * (inv - 0.5),
                    var: *sigma2,
                    gamma_k,
                }
            }
        })
    }

    /// Builds `mu_k` from a measure `nu` given directly as `(t, mass)` pairs.
    pub fn from_tilted_atoms(nu: &[(f64, f64)], gamma_k: f64) -> Result<Self> {
        if nu.is_empty() || nu.iter().any(|&(t, m)| !(t.is_finite() && m > 0.0)) {
            return Err(PfppError::Config(
                "kernel atoms need finite positions and positive masses".into(),
            ));
        }
        if !(gamma_k > 0.0 && gamma_k.is_finite()) {
            return Err(PfppError::Config(format!(
                "gamma_k must be positive, got {gamma_k}"
            )));
        }
        Ok(TiltedKernel::Atoms {
            atoms: nu
                .iter()
                .map(|&(t, m)| (t, m * (t / gamma_k).exp()))
                .collect(),
            gamma_k,
        })
    }

    pub fn gamma_k(&self) -> f64 {
        match self {
            TiltedKernel::Atoms { gamma_k, .. } | TiltedKernel::Gaussian { gamma_k, .. } => {
                *gamma_k
            }
        }
    }

    /// `∫ e^(-i xi t) dmu(t)`.
    pub fn transform(&self, xi: f64) -> Complex<f64> {
        match self {
            TiltedKernel::Atoms { atoms, .. } => atoms
                .iter()
                .map(|&(t, m)| Complex::from_polar(m, -xi * t))
                .sum(),
            TiltedKernel::Gaussian {
                scale, mean, var, ..
            } => Complex::from_polar(scale * (-0.5 * var * xi * xi).exp(), -xi * mean),
        }
    }

    /// Half-width of the region holding essentially all of the kernel mass.
    pub fn extent(&self) -> f64 {
        match self {
            TiltedKernel::Atoms { atoms, .. } => {
                atoms.iter().map(|a| a.0.abs()).fold(0.0, f64::max)
            }
            TiltedKernel::Gaussian { mean, var, .. } => mean.abs() + KERNEL_SIGMAS * var.sqrt(),
        }
    }

    fn std_dev(&self) -> f64 {
        match self {
            TiltedKernel::Atoms { .. } => 0.0,
            TiltedKernel::Gaussian { var, .. } => var.sqrt(),
        }
    }

    /// Checks the kernel against the grid and window sizes.
    pub fn check_fits(&self, cfg: &DeconvConfig) -> Result<()> {
        let extent = self.extent();
        if extent > cfg.half_width {
            return Err(PfppError::Config(format!(
                "kernel extent {extent:.3} exceeds the half width {}",
                cfg.half_width
            )));
        }
        let sd = self.std_dev();
        if sd > 0.0 && cfg.window == WindowKind::Smooth {
            let need = MIN_WINDOW_SIGMAS * sd;
            if cfg.split_width < need || cfg.taper_scale() < need {
                return Err(PfppError::Config(format!(
                    "window scales (split {:.3}, taper {:.3}) must be at least {need:.3} \
                     for a kernel with log-standard-deviation {sd:.3}",
                    cfg.split_width,
                    cfg.taper_scale()
                )));
            }
        }
        Ok(())
    }
}

/// Signed angular frequency of DFT bin `k`.
fn frequency(k: usize, n: usize, dt: f64) -> f64 {
    let signed = if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    };
    2.0 * PI * signed / (n as f64 * dt)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRow {
    pub xi: f64,
    pub re: f64,
    pub im: f64,
    pub abs: f64,
}

/// `F[mu]` at the grid frequencies, in ascending order of `xi`.
pub fn spectrum(mu: &TiltedKernel, cfg: &DeconvConfig) -> Vec<SpectrumRow> {
    let n = cfg.n_points;
    let dt = 2.0 * cfg.half_width / n as f64;
    let mut rows: Vec<SpectrumRow> = (0..n)
        .map(|k| {
            let xi = frequency(k, n, dt);
            let f = mu.transform(xi);
            SpectrumRow {
                xi,
                re: f.re,
                im: f.im,
                abs: f.norm(),
            }
        })
        .collect();
    rows.sort_by(|a, b| a.xi.total_cmp(&b.xi));
    rows
}

pub fn spectrum_csv(rows: &[SpectrumRow]) -> String {
    let mut s = String::from("xi,re,im,abs\n");
    for r in rows {
        let _ = writeln!(s, "{:e},{:e},{:e},{:e}", r.xi, r.re, r.im, r.abs);
    }
    s
}

/// `J0(t) = I0(e^t)` on the configured grid.
pub fn to_log_coordinates<M: Marginal + ?Sized>(
    i0: &M,
    cfg: &DeconvConfig,
) -> Result<GridFunction> {
    cfg.validate()?;
    let dt = 2.0 * cfg.half_width / cfg.n_points as f64;
    let values = (0..cfg.n_points)
        .map(|j| i0.eval((-cfg.half_width + dt * j as f64).exp()))
        .collect::<Result<Vec<_>>>()?;
    GridFunction::new(cfg.half_width, values)
}

/// Fails when `J0 e^(t/gk)` grows toward the far edge of its half-line.
fn check_bounded(j0: &GridFunction, cfg: &DeconvConfig) -> Result<()> {
    let n = j0.n_points();
    let mid = n / 2;
    let quarter = mid / 4;
    let log_tilted = |j: usize, gamma: f64| j0.values[j].abs().ln() + j0.t(j) / gamma;
    let sides = [
        ("left", cfg.gamma1, 0usize, quarter),
        ("right", cfg.gamma2, n - 1, n - 1 - quarter),
    ];
    let reference = j0.values[mid].abs().ln();
    for (side, gamma, edge, inner) in sides {
        let (a, b) = (edge.min(inner), edge.max(inner));
        let peak = (a..=b)
            .map(|j| log_tilted(j, gamma))
            .fold(f64::NEG_INFINITY, f64::max);
        let growth = log_tilted(edge, gamma) - log_tilted(inner, gamma);
        if peak - reference > cfg.growth_limit.ln() || growth > 1e-8 {
            return Err(PfppError::DomainMismatch(format!(
                "J0 e^(t/{gamma}) grows toward the {side} edge (log growth {growth:.3e} over the \
                 outer quarter, peak/centre {:.3e}); the data do not decay like the \
                 bounding powers",
                (peak - reference).exp()
            )));
        }
    }
    Ok(())
}

/// `J0k = J0 e^(t/gk) w_k`, faded out at the grid edges.
pub fn split(j0: &GridFunction, cfg: &DeconvConfig) -> Result<(GridFunction, GridFunction)> {
    cfg.validate()?;
    if j0.n_points() != cfg.n_points || j0.half_width != cfg.half_width {
        return Err(PfppError::Config(
            "grid does not match the configuration".into(),
        ));
    }
    check_bounded(j0, cfg)?;
    let piece = |left: bool| {
        j0.map_with_t(|t, v| {
            let (w1, w2) = cfg.split_weights(t);
            let (w, gamma) = if left {
                (w1, cfg.gamma1)
            } else {
                (w2, cfg.gamma2)
            };
            if w == 0.0 {
                0.0
            } else {
                v * (t / gamma).exp() * w * cfg.taper(t)
            }
        })
    };
    Ok((piece(true), piece(false)))
}

/// A local minimum of `|F[mu]|` below the floor inside the central band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralZero {
    pub xi: f64,
    pub abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierQuotient {
    pub output: GridFunction,
    /// Number of bins set to zero because `|F[mu]|` fell below the floor.
    pub zeroed: usize,
    /// Bins zeroed beyond the point where `|F[mu]|` stays below the floor.
    pub tail_zeroed: usize,
    /// Isolated near-zeros of the kernel transform (ill-posed regime).
    pub spectral_zeros: Vec<SpectralZero>,
}

impl FourierQuotient {
    pub fn ill_posed(&self) -> bool {
        !self.spectral_zeros.is_empty()
    }
}

fn golden_min<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64) -> (f64, f64) {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..100 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
        if (b - a).abs() < 1e-13 * (1.0 + a.abs()) {
            break;
        }
    }
    let x = 0.5 * (a + b);
    (x, f(x))
}

/// Isolated zeros of `|F[mu]|` among frequencies in the central 90% of the band.
pub fn find_spectral_zeros(mu: &TiltedKernel, cfg: &DeconvConfig) -> Vec<SpectralZero> {
    let n = cfg.n_points;
    let dt = 2.0 * cfg.half_width / n as f64;
    let dxi = 2.0 * PI / (n as f64 * dt);
    let kmax = (0.45 * n as f64).floor() as i64;
    let abs_at = |k: i64| mu.transform(k as f64 * dxi).norm();
    let mut zeros = Vec::new();
    let mut prev = abs_at(-kmax);
    let mut cur = abs_at(-kmax + 1);
    for k in (-kmax + 1)..kmax {
        let next = abs_at(k + 1);
        if cur < prev && cur < next {
            let xi0 = k as f64 * dxi;
            let (xi, abs) = golden_min(|x| mu.transform(x).norm(), xi0 - dxi, xi0 + dxi);
            if abs < cfg.fourier_floor {
                zeros.push(SpectralZero { xi, abs });
            }
        }
        prev = cur;
        cur = next;
    }
    zeros
}

/// `J1k = F^-1[F[J0k] / F[mu_k]]` on the periodic grid.
pub fn fourier_divide(
    j0k: &GridFunction,
    mu: &TiltedKernel,
    cfg: &DeconvConfig,
) -> Result<FourierQuotient> {
    cfg.validate()?;
    mu.check_fits(cfg)?;
    let n = j0k.n_points();
    if n != cfg.n_points {
        return Err(PfppError::Config(
            "grid does not match the configuration".into(),
        ));
    }
    let dt = j0k.dt();
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex<f64>> = j0k.values.iter().map(|&v| Complex::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);

    let mut zeroed = 0;
    let mut below = vec![false; n];
    for (k, c) in buf.iter_mut().enumerate() {
        let f = mu.transform(frequency(k, n, dt));
        if k == n / 2 || f.norm() < cfg.fourier_floor {
            if k != n / 2 {
                zeroed += 1;
                below[k] = true;
            }
            *c = Complex::new(0.0, 0.0);
        } else {
            *c /= f;
        }
    }
    // Count the zeroed bins that sit in a run reaching the band edge.
    let mut tail_zeroed = 0;
    for k in (1..=n / 2 - 1).rev() {
        if below[k] && below[n - k] {
            tail_zeroed += 2;
        } else {
            break;
        }
    }

    planner.plan_fft_inverse(n).process(&mut buf);
    let scale = 1.0 / n as f64;
    let output = GridFunction::new(j0k.half_width, buf.iter().map(|c| c.re * scale).collect())?;
    Ok(FourierQuotient {
        output,
        zeroed,
        tail_zeroed,
        spectral_zeros: find_spectral_zeros(mu, cfg),
    })
}

/// `J1 = e^(-t/g1) J11 + e^(-t/g2) J12` on the untapered part of the grid.
pub fn assemble(
    j11: &GridFunction,
    j12: &GridFunction,
    cfg: &DeconvConfig,
) -> Result<InverseMarginal> {
    let (lo, hi) = cfg.untapered();
    assemble_within(j11, j12, cfg, lo, hi)
}

/// As [`assemble`], keeping only samples with `t` in `[t_lo, t_hi]`.
pub fn assemble_within(
    j11: &GridFunction,
    j12: &GridFunction,
    cfg: &DeconvConfig,
    t_lo: f64,
    t_hi: f64,
) -> Result<InverseMarginal> {
    cfg.validate()?;
    if j11.n_points() != j12.n_points() || j11.half_width != j12.half_width {
        return Err(PfppError::Config(
            "split pieces live on different grids".into(),
        ));
    }
    let idx: Vec<usize> = (0..j11.n_points())
        .filter(|&j| {
            let t = j11.t(j);
            t >= t_lo && t <= t_hi
        })
        .collect();
    if idx.len() < 4 {
        return Err(PfppError::Config(format!(
            "no usable interior: [{t_lo:.3}, {t_hi:.3}] holds {} samples",
            idx.len()
        )));
    }
    let mut values: Vec<f64> = idx
        .iter()
        .map(|&j| {
            let t = j11.t(j);
            (-t / cfg.gamma1).exp() * j11.values[j] + (-t / cfg.gamma2).exp() * j12.values[j]
        })
        .collect();
    if let Some(p) = values.iter().position(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(PfppError::SolutionRejected(format!(
            "assembled J1 is not positive at t={:.4} (value {:e})",
            j11.t(idx[p]),
            values[p]
        )));
    }
    for w in 1..values.len() {
        let (a, b) = (values[w - 1], values[w]);
        if b > a * (1.0 + MONOTONE_TOL) {
            return Err(PfppError::SolutionRejected(format!(
                "assembled J1 increases by a relative {:.3e} at t={:.4}",
                b / a - 1.0,
                j11.t(idx[w])
            )));
        }
        if b >= a {
            values[w] = a * (1.0 - f64::EPSILON);
        }
    }
    let t0 = j11.t(idx[0]);
    let grid = GridMarginal::new(t0, j11.dt(), values, cfg.gamma1, cfg.gamma2)?;
    Ok(InverseMarginal::Grid(grid))
}

/// Max relative residual of `E[rho I1(y rho)] = I0(y)` on `y_grid`.
pub fn convolution_residual<M1, M0>(
    i1: &M1,
    law: &KernelLaw,
    i0: &M0,
    y_grid: &[f64],
) -> Result<f64>
where
    M1: Marginal + ?Sized,
    M0: Marginal + ?Sized,
{
    Ok(residual_report(i1, i0, law, y_grid)?.max_rel_err)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeconvSolution {
    pub marginal: InverseMarginal,
    pub pieces: [GridFunction; 2],
    pub zeroed: [usize; 2],
    pub spectral_zeros: Vec<SpectralZero>,
    /// Range of `t = log y` covered by grid samples.
    pub trusted: (f64, f64),
}

impl DeconvSolution {
    pub fn ill_posed(&self) -> bool {
        !self.spectral_zeros.is_empty()
    }
}

/// Full pipeline for sampled data and a pair of tilted kernels.
pub fn solve_grid(
    j0: &GridFunction,
    mu1: &TiltedKernel,
    mu2: &TiltedKernel,
    cfg: &DeconvConfig,
) -> Result<DeconvSolution> {
    let pieces = |c: &DeconvConfig| -> Result<(FourierQuotient, FourierQuotient)> {
        let (j01, j02) = split(j0, c)?;
        Ok((fourier_divide(&j01, mu1, c)?, fourier_divide(&j02, mu2, c)?))
    };
    let (q1, q2) = pieces(cfg)?;
    let mut wider = cfg.clone();
    wider.taper_fraction = (1.25 * cfg.taper_fraction).min(0.5 * (1.0 + cfg.taper_fraction));
    let (w1, w2) = pieces(&wider)?;

    let margin = mu1.extent().max(mu2.extent());
    let (lo, hi) = wider.untapered();
    let (lo, hi) = (lo + margin, hi - margin);
    let combine = |a: &GridFunction, b: &GridFunction, j: usize| {
        let t = a.t(j);
        (-t / cfg.gamma1).exp() * a.values[j] + (-t / cfg.gamma2).exp() * b.values[j]
    };
    let stable = |j: usize| {
        let t = j0.t(j);
        let x = combine(&q1.output, &q2.output, j);
        let y = combine(&w1.output, &w2.output, j);
        t >= lo && t <= hi && (x - y).abs() <= cfg.trust_tol * x.abs()
    };
    let mid = j0.n_points() / 2;
    if !stable(mid) {
        return Err(PfppError::SolutionRejected(
            "solution near t = 0 depends on the edge taper; widen the grid".into(),
        ));
    }
    let mut a = mid;
    while a > 0 && stable(a - 1) {
        a -= 1;
    }
    let mut b = mid;
    while b + 1 < j0.n_points() && stable(b + 1) {
        b += 1;
    }
    let trusted = (j0.t(a), j0.t(b));
    let marginal = assemble_within(&q1.output, &q2.output, cfg, trusted.0, trusted.1)?;
    let mut spectral_zeros = q1.spectral_zeros.clone();
    spectral_zeros.extend(q2.spectral_zeros.iter().copied());
    Ok(DeconvSolution {
        marginal,
        zeroed: [q1.zeroed, q2.zeroed],
        pieces: [q1.output, q2.output],
        spectral_zeros,
        trusted,
    })
}

/// Solves `E[rho I1(y rho)] = I0(y)` for `I1` by Fourier deconvolution.
pub fn solve<M: Marginal + ?Sized>(
    i0: &M,
    law: &KernelLaw,
    cfg: &DeconvConfig,
) -> Result<DeconvSolution> {
    law.validate()?;
    let mu1 = TiltedKernel::from_law(law, cfg.gamma1)?;
    let mu2 = TiltedKernel::from_law(law, cfg.gamma2)?;
    mu1.check_fits(cfg)?;
    mu2.check_fits(cfg)?;
    let j0 = to_log_coordinates(i0, cfg)?;
    solve_grid(&j0, &mu1, &mu2, cfg)
}
