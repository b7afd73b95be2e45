//! Construction and verification of predictable forward performance processes
//! in discrete time.

pub mod cmim;
pub mod deconv;
pub mod error;
pub mod kernels;
pub mod marginal;
pub mod measures;
pub mod pfpp;
pub mod quadrature;
pub mod sim;

pub use error::{PfppError, Result};
pub use kernels::{
    kernel_from_binomial, kernel_from_bs, BinomialPeriodParams, BinomialStep, BsPeriodParams,
    KernelAtom, KernelLaw, ThetaBlock,
};
pub use marginal::{GridMarginal, InverseMarginal, Marginal};
pub use measures::{Atom, DensityCell, DensityTilt, RiskAversionMeasure};
pub use pfpp::{convex_dual, AdvanceOptions, PfppState, Route, Utility, UtilityCurve};
pub use sim::{run_paths, summarize, PathRecord, RunOptions, ScenarioSpec};
