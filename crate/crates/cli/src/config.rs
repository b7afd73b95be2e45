//! Run configuration: JSON with optional sub-documents given as paths
//! relative to the configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use pfpp_core::deconv::DeconvConfig;
use pfpp_core::{InverseMarginal, PfppState, Route, ScenarioSpec, ThetaBlock};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// A sub-document given inline or as a path to a JSON file.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Source<T> {
    Path(PathBuf),
    Inline(T),
}

impl<T: DeserializeOwned> Source<T> {
    fn resolve(self, base: &Path, what: &str) -> Result<T, CliError> {
        match self {
            Source::Inline(v) => Ok(v),
            Source::Path(p) => read_json(&base.join(p), what),
        }
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("invalid {what} {}: {e}", path.display())))
}

pub fn read_state(path: &Path) -> Result<PfppState, CliError> {
    let state: PfppState = read_json(path, "state")?;
    state
        .validate()
        .map_err(|e| CliError::Config(format!("state {}: {e}", path.display())))?;
    Ok(state)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSpec {
    #[serde(default)]
    pub thetas: Vec<ThetaBlock>,
    #[serde(default)]
    pub binomial_cap: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Residual gate of each construction step; route default when absent.
    pub residual: Option<f64>,
    pub budget_cmim: f64,
    pub budget_deconv: f64,
    pub martingale_cmim: f64,
    pub martingale_deconv: f64,
    pub supermartingale_slack: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            residual: None,
            budget_cmim: 1e-9,
            budget_deconv: 1e-4,
            martingale_cmim: 1e-7,
            martingale_deconv: 1e-4,
            supermartingale_slack: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSettings {
    pub x0: f64,
    pub n_paths: usize,
    /// Largest tolerated fraction of failed paths.
    pub max_failure_rate: f64,
    pub holdings_max_steps: usize,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        SimulationSettings {
            x0: 1.0,
            n_paths: 1000,
            max_failure_rate: 0.0,
            holdings_max_steps: 12,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySettings {
    pub x_min: f64,
    pub x_max: f64,
    pub n_x: usize,
    pub n_perturbations: usize,
    pub epsilon: f64,
    /// Wealth levels probed by the perturbation test.
    pub x_probe: Vec<f64>,
}

impl Default for VerifySettings {
    fn default() -> Self {
        VerifySettings {
            x_min: 1e-2,
            x_max: 1e2,
            n_x: 100,
            n_perturbations: 100,
            epsilon: 0.1,
            x_probe: vec![0.5, 1.0, 2.0],
        }
    }
}

impl VerifySettings {
    pub fn x_grid(&self) -> Vec<f64> {
        pfpp_core::quadrature::log_grid(self.x_min, self.x_max, self.n_x)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    market: Option<Source<MarketSpec>>,
    initial: Source<InverseMarginal>,
    #[serde(default)]
    anchor: f64,
    #[serde(default)]
    gamma_bounds: Option<(f64, f64)>,
    #[serde(default)]
    route: Route,
    #[serde(default)]
    deconv: Option<Source<DeconvConfig>>,
    #[serde(default)]
    scenario: Option<Source<ScenarioSpec>>,
    #[serde(default)]
    tolerances: Tolerances,
    #[serde(default)]
    output_dir: Option<PathBuf>,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    simulation: SimulationSettings,
    #[serde(default)]
    verification: VerifySettings,
}

/// A configuration with every referenced document loaded and checked.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub market: MarketSpec,
    pub initial: InverseMarginal,
    pub anchor: f64,
    pub route: Route,
    pub deconv: Option<DeconvConfig>,
    pub scenario: Option<ScenarioSpec>,
    pub tolerances: Tolerances,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub simulation: SimulationSettings,
    pub verification: VerifySettings,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let raw: RawConfig = read_json(path, "config")?;
        let base = path.parent().unwrap_or(Path::new("."));
        let cfg = RunConfig {
            market: match raw.market {
                Some(m) => m.resolve(base, "market spec")?,
                None => MarketSpec::default(),
            },
            initial: raw.initial.resolve(base, "initial marginal")?,
            anchor: raw.anchor,
            route: raw.route,
            deconv: raw
                .deconv
                .map(|d| d.resolve(base, "deconvolution config"))
                .transpose()?,
            scenario: raw
                .scenario
                .map(|s| s.resolve(base, "scenario"))
                .transpose()?,
            tolerances: raw.tolerances,
            output_dir: base.join(raw.output_dir.unwrap_or_else(|| PathBuf::from("out"))),
            seed: raw.seed,
            simulation: raw.simulation,
            verification: raw.verification,
        };
        cfg.validate(raw.gamma_bounds)?;
        Ok(cfg)
    }

    fn validate(&self, gamma_bounds: Option<(f64, f64)>) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if !self.anchor.is_finite() {
            return bad("anchor must be finite".into());
        }
        let measure = self.initial.measure();
        if self.route == Route::Cmim && measure.is_none() {
            return bad("route cmim needs a CMIM initial marginal".into());
        }
        if self.route == Route::Deconv && self.deconv.is_none() {
            return bad("route deconv needs a deconv section".into());
        }
        if let Some(d) = &self.deconv {
            d.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        if let Some((lo, hi)) = gamma_bounds {
            if !(lo > 0.0 && lo <= hi) {
                return bad(format!("gamma_bounds ({lo}, {hi}) are not an interval"));
            }
            if let Some(m) = measure {
                let (atoms, cells) = m.support();
                let inside = atoms.iter().all(|g| *g >= lo && *g <= hi)
                    && cells.iter().all(|(a, b)| *a >= lo && *b <= hi);
                if !inside {
                    return bad(format!(
                        "gamma_bounds ({lo}, {hi}) do not bracket the measure support"
                    ));
                }
            } else {
                let (a, b) = self.initial.gamma_bounds();
                if a < lo || b > hi {
                    return bad(format!(
                        "gamma_bounds ({lo}, {hi}) do not bracket ({a}, {b})"
                    ));
                }
            }
        }
        for th in &self.market.thetas {
            th.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        if let Some(s) = &self.scenario {
            s.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        let sim = &self.simulation;
        if !(sim.x0 > 0.0 && sim.x0.is_finite()) || !(0.0..=1.0).contains(&sim.max_failure_rate) {
            return bad("simulation needs x0 > 0 and max_failure_rate in [0, 1]".into());
        }
        let v = &self.verification;
        if !(v.x_min > 0.0 && v.x_min < v.x_max && v.n_x >= 2) {
            return bad("verification grid needs 0 < x_min < x_max and n_x >= 2".into());
        }
        if !(0.0..0.5).contains(&v.epsilon) {
            return bad(format!(
                "verification epsilon must lie in [0, 0.5), got {}",
                v.epsilon
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sub_documents_resolve_relative_to_the_config() {
        let dir = tempfile::TempDir::new().unwrap();
        fs::create_dir(dir.path().join("parts")).unwrap();
        fs::write(
            dir.path().join("parts/initial.json"),
            r#"{"kind":"cmim","atoms":[{"gamma":2.0,"weight":1.0}],"gamma_min":1.0,"gamma_max":3.0}"#,
        )
        .unwrap();
        fs::write(
            dir.path().join("parts/market.json"),
            r#"{"thetas":[{"type":"bs","lambda":[0.3]}]}"#,
        )
        .unwrap();
        let path = dir.path().join("run.json");
        fs::write(
            &path,
            r#"{"initial":"parts/initial.json","market":"parts/market.json","gamma_bounds":[1.0,3.0]}"#,
        )
        .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.market.thetas.len(), 1);
        assert_eq!(cfg.output_dir, dir.path().join("out"));
        assert!(cfg.initial.measure().is_some());
    }

    #[test]
    fn gamma_bounds_must_bracket_support() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("run.json");
        fs::write(
            &path,
            r#"{"initial":{"kind":"cmim","atoms":[{"gamma":2.0,"weight":1.0}],"gamma_min":1.0,"gamma_max":3.0},"gamma_bounds":[2.5,3.0]}"#,
        )
        .unwrap();
        assert!(matches!(RunConfig::load(&path), Err(CliError::Config(_))));
    }
}
