//! Run configuration: TOML file, `--set` overrides, strict validation.

use std::path::{Path, PathBuf};

use gridfield_core::experiments::{Direction, PatternThresholds};
use gridfield_core::fokker_planck::{InitProtocol, SolverParams};
use gridfield_core::{Activation, KernelParams, ShiftSet, TorusGrid};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub grid: GridConfig,
    pub kernel: KernelParams,
    pub shift: ShiftConfig,
    pub activation: ActivationConfig,
    pub solver: SolverParams,
    pub sweep: SweepSection,
    pub pattern: PatternThresholds,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("gridfield-out"),
            grid: GridConfig::default(),
            kernel: KernelParams::reference(),
            shift: ShiftConfig::default(),
            activation: ActivationConfig::default(),
            solver: SolverParams::default(),
            sweep: SweepSection::default(),
            pattern: PatternThresholds::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub n: usize,
    pub n_s: usize,
    pub s_max: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { n: 64, n_s: 64, s_max: 1.3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftConfig {
    pub z_cells: usize,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        ShiftConfig { z_cells: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    SmoothEps,
    SmoothSqrt,
    Sigmoid,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActivationConfig {
    pub kind: ActivationKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gain: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
}

impl Default for ActivationConfig {
    fn default() -> Self {
        ActivationConfig { kind: ActivationKind::Relu, epsilon: None, gain: None, value: None }
    }
}

impl ActivationConfig {
    pub fn build(&self) -> Result<Activation, CliError> {
        let need = |v: Option<f64>, key: &str| {
            v.ok_or_else(|| CliError::Config(format!("activation.{key}: required for kind {:?}", self.kind)))
        };
        let reject = |v: Option<f64>, key: &str| match v {
            Some(_) => Err(CliError::Config(format!("activation.{key}: not used by kind {:?}", self.kind))),
            None => Ok(()),
        };
        let built = match self.kind {
            ActivationKind::Relu => {
                reject(self.epsilon, "epsilon")?;
                reject(self.gain, "gain")?;
                reject(self.value, "value")?;
                Ok(Activation::relu())
            }
            ActivationKind::SmoothEps | ActivationKind::SmoothSqrt => {
                reject(self.gain, "gain")?;
                reject(self.value, "value")?;
                let eps = need(self.epsilon, "epsilon")?;
                if self.kind == ActivationKind::SmoothEps {
                    Activation::smooth_eps(eps)
                } else {
                    Activation::smooth_sqrt(eps)
                }
            }
            ActivationKind::Sigmoid => {
                reject(self.epsilon, "epsilon")?;
                reject(self.value, "value")?;
                Activation::sigmoid(need(self.gain, "gain")?)
            }
            ActivationKind::Constant => {
                reject(self.epsilon, "epsilon")?;
                reject(self.gain, "gain")?;
                Activation::constant(need(self.value, "value")?)
            }
        };
        built.map_err(|e| CliError::Config(format!("activation: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub direction: Direction,
    pub sigma_lo: f64,
    pub sigma_hi: f64,
    pub points: usize,
    pub init: InitProtocol,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            direction: Direction::L2r,
            sigma_lo: 0.001,
            sigma_hi: 0.04,
            points: 100,
            init: InitProtocol::RandomDeltas,
        }
    }
}

impl RunConfig {
    /// Reads `path` (if any), applies `key=value` overrides and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Config(format!("{}: {}", p.display(), e.message())))?
            }
            None => toml::Table::new(),
        };
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        let config: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            let msg = e.inner().message().trim().to_string();
            if path == "." {
                CliError::Config(msg)
            } else {
                CliError::Config(format!("{path}: {msg}"))
            }
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let fail = |key: &str, why: &str| Err(CliError::Config(format!("{key}: {why}")));
        if TorusGrid::new(self.grid.n).is_err() {
            return fail("grid.n", "must be even and at least 4");
        }
        if self.grid.n_s < 2 {
            return fail("grid.n_s", "must be at least 2");
        }
        if !(self.grid.s_max > 0.0 && self.grid.s_max.is_finite()) {
            return fail("grid.s_max", "must be positive");
        }
        let k = &self.kernel;
        if !(k.amplitude.is_finite() && k.a.is_finite() && k.b > 0.0 && k.b.is_finite()) {
            return fail("kernel", "A and a must be finite, b positive");
        }
        let grid = TorusGrid::new(self.grid.n).unwrap();
        if self.shift.z_cells == 0 || ShiftSet::new(grid, self.shift.z_cells).is_err() {
            return fail("shift.z_cells", "must lie in [1, n/2)");
        }
        self.activation.build()?;
        self.solver.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let s = &self.sweep;
        if !(s.sigma_lo > 0.0 && s.sigma_hi > s.sigma_lo && s.sigma_hi.is_finite()) {
            return fail("sweep.sigma_lo", "need 0 < sigma_lo < sigma_hi");
        }
        if s.points < 2 {
            return fail("sweep.points", "must be at least 2");
        }
        let p = &self.pattern;
        if !(p.homogeneity > 0.0 && p.stripe_power > 0.0 && p.stripe_power <= 1.0 && p.peak_ratio >= 1.0) {
            return fail("pattern", "need homogeneity > 0, stripe_power in (0, 1], peak_ratio >= 1");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }
}

/// `a.b.c=value`; the value is parsed as TOML and falls back to a string.
fn apply_override(table: &mut toml::Table, item: &str) -> Result<(), CliError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set {item}: expected KEY=VALUE")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("--set {item}: malformed key")));
    }
    let mut current = table;
    for part in &parts[..parts.len() - 1] {
        let entry = current
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        current = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("--set {item}: {part} is not a table")))?;
    }
    current.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_the_reference_defaults() {
        let c = RunConfig::load(None, &[]).unwrap();
        assert_eq!(c.solver.tau, 10.0);
        assert_eq!(c.solver.b, 3.0);
        assert_eq!((c.grid.n, c.grid.n_s, c.grid.s_max), (64, 64, 1.3));
    }

    #[test]
    fn overrides_parse_numbers_and_strings() {
        let c = RunConfig::load(
            None,
            &["solver.sigma=0.02".into(), "activation.kind=sigmoid".into(), "activation.gain=15".into()],
        )
        .unwrap();
        assert_eq!(c.solver.sigma, 0.02);
        assert_eq!(c.activation.build().unwrap(), Activation::sigmoid(15.0).unwrap());
    }

    #[test]
    fn errors_name_the_key() {
        let err = RunConfig::load(None, &["solver.tau=-1".into()]).unwrap_err().to_string();
        assert!(err.contains("solver.tau"), "{err}");
        let err = RunConfig::load(None, &["solver.taux=1".into()]).unwrap_err().to_string();
        assert!(err.contains("solver") && err.contains("taux"), "{err}");
        let err = RunConfig::load(None, &["activation.kind=sigmoid".into()]).unwrap_err().to_string();
        assert!(err.contains("activation.gain"), "{err}");
        let err = RunConfig::load(None, &["grid.n=7".into()]).unwrap_err().to_string();
        assert!(err.contains("grid.n"), "{err}");
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig::load(None, &["sweep.direction=r2l".into(), "activation.kind=smooth_eps".into(), "activation.epsilon=0.01".into()])
            .unwrap();
        let text = c.to_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
    }
}
