//! Run configuration: one TOML file per run, with dotted `--set` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use panel_dml::riesz::PenaltySpec;
use panel_dml::{
    CrossFitConfig, DgpSpec, DgpVariant, EstimandRequest, EstimatorSpec, GammaSpec, LagOrders,
    Model, PanelSchema, Preset, RieszSpec, SolverOptions,
};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Estimate,
    Simulate,
}

/// A preset by name, or a preset with overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EstimatorEntry {
    Preset(Preset),
    Custom(Box<CustomEstimator>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomEstimator {
    pub preset: Preset,
    /// Column label in reports; the preset name when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<GammaSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub riesz: Option<RieszSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_penalty: Option<PenaltySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub riesz_penalty: Option<PenaltySpec>,
}

impl EstimatorEntry {
    pub fn name(&self) -> String {
        match self {
            EstimatorEntry::Preset(p) => p.name().to_string(),
            EstimatorEntry::Custom(c) => c
                .name
                .clone()
                .unwrap_or_else(|| c.preset.name().to_string()),
        }
    }

    pub fn spec(&self) -> Result<EstimatorSpec, CliError> {
        let c = match self {
            EstimatorEntry::Preset(p) => return Ok(p.spec()),
            EstimatorEntry::Custom(c) => c,
        };
        let mut spec = c.preset.spec();
        if let Some(g) = &c.gamma {
            spec.gamma = g.clone();
        }
        if let Some(r) = &c.riesz {
            spec.riesz = Some(r.clone());
        }
        if let Some(p) = c.gamma_penalty {
            p.validate()?;
            spec.gamma.penalty = p;
        }
        if let Some(p) = c.riesz_penalty {
            p.validate()?;
            match spec.riesz.as_mut() {
                Some(r) => r.penalty = p,
                None => {
                    return Err(CliError::config(format!(
                        "estimator `{}` has no representer to apply riesz_penalty to",
                        self.name()
                    )))
                }
            }
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Long-format CSV; relative paths resolve against the config file.
    pub path: PathBuf,
    /// Column mapping; inferred from the header (`unit, period, y, d, x_*,
    /// i_*, c_*`) when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<PanelSchema>,
}

/// A grid of data-generating settings; cells run `n_covariates` outer,
/// `n_units` inner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    pub dgp: DgpVariant,
    pub replications: usize,
    pub n_units: Vec<usize>,
    pub n_covariates: Vec<usize>,
    #[serde(default = "default_periods")]
    pub n_periods: usize,
}

fn default_periods() -> usize {
    10
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Json,
    Csv,
    Txt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "all_formats")]
    pub formats: Vec<Format>,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

fn all_formats() -> Vec<Format> {
    vec![Format::Json, Format::Csv, Format::Txt]
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            formats: all_formats(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub model: Model,
    #[serde(default = "default_lags")]
    pub lags: LagOrders,
    #[serde(default = "default_level")]
    pub level: f64,
    /// Covariate columns admitted into the instruments; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exogenous: Option<Vec<usize>>,
    #[serde(default = "SolverOptions::default")]
    pub solver: SolverOptions,
    pub estimators: Vec<EstimatorEntry>,
    pub estimands: Vec<EstimandRequest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationSection>,
    #[serde(default)]
    pub output: OutputSection,
}

fn default_folds() -> usize {
    CrossFitConfig::default().folds
}

fn default_lags() -> LagOrders {
    CrossFitConfig::default().lags
}

fn default_level() -> f64 {
    CrossFitConfig::default().level
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::config(format!("invalid configuration: {e}")))
    }

    /// Read `path`, apply `key=value` overrides, and resolve relative paths
    /// against the file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut tree: toml::Table = text
            .parse()
            .map_err(|e| CliError::config(format!("invalid configuration: {e}")))?;
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let mut cfg: RunConfig = tree
            .try_into()
            .map_err(|e| CliError::config(format!("invalid configuration: {e}")))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(d) = cfg.data.as_mut() {
            if d.path.is_relative() {
                d.path = base.join(&d.path);
            }
        }
        if cfg.output.dir.is_relative() {
            cfg.output.dir = base.join(&cfg.output.dir);
        }
        Ok(cfg)
    }

    /// Canonical TOML: every default spelled out, fixed key order.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration is always representable")
    }

    pub fn crossfit(&self) -> CrossFitConfig {
        CrossFitConfig {
            folds: self.folds,
            seed: self.seed,
            lags: self.lags,
            model: self.model,
            exogenous: self.exogenous.clone(),
            level: self.level,
            solver: self.solver,
        }
    }

    pub fn estimator_specs(&self) -> Result<Vec<(String, EstimatorSpec)>, CliError> {
        let specs = self
            .estimators
            .iter()
            .map(|e| Ok((e.name(), e.spec()?)))
            .collect::<Result<Vec<_>, CliError>>()?;
        for (i, (name, _)) in specs.iter().enumerate() {
            if specs[..i].iter().any(|(n, _)| n == name) {
                return Err(CliError::config(format!(
                    "duplicate estimator name `{name}`"
                )));
            }
        }
        Ok(specs)
    }

    /// Checks that need no data.
    pub fn validate(&self) -> Result<(), CliError> {
        self.crossfit().validate()?;
        if self.folds < panel_dml::data::MIN_FOLDS {
            return Err(CliError::config(format!(
                "folds must be at least {}, got {}",
                panel_dml::data::MIN_FOLDS,
                self.folds
            )));
        }
        if self.estimators.is_empty() {
            return Err(CliError::config("no estimators requested"));
        }
        if self.estimands.is_empty() {
            return Err(CliError::config("no estimands requested"));
        }
        for e in &self.estimands {
            e.validate()?;
            for (_, s) in e.components() {
                if s > self.lags.q {
                    return Err(CliError::config(format!(
                        "{} needs lag {s} but the model has q = {}",
                        e.label(),
                        self.lags.q
                    )));
                }
            }
        }
        self.estimator_specs()?;
        match self.mode {
            Mode::Estimate if self.data.is_none() => {
                return Err(CliError::config("estimate mode needs a [data] section"))
            }
            Mode::Simulate => {
                let sim = self.simulation.as_ref().ok_or_else(|| {
                    CliError::config("simulate mode needs a [simulation] section")
                })?;
                if sim.replications == 0 {
                    return Err(CliError::config("replications must be at least 1"));
                }
                if sim.n_units.is_empty() || sim.n_covariates.is_empty() {
                    return Err(CliError::config("simulation grid is empty"));
                }
                for dgp in self.grid()? {
                    dgp.validate()?;
                }
            }
            _ => {}
        }
        if self.output.formats.is_empty() {
            return Err(CliError::config("no output formats requested"));
        }
        Ok(())
    }

    /// Simulation cells in table order.
    pub fn grid(&self) -> Result<Vec<DgpSpec>, CliError> {
        let sim = self
            .simulation
            .as_ref()
            .ok_or_else(|| CliError::config("simulate mode needs a [simulation] section"))?;
        Ok(sim
            .n_covariates
            .iter()
            .flat_map(|&l| {
                sim.n_units.iter().map(move |&n| DgpSpec {
                    variant: sim.dgp,
                    n_units: n,
                    n_periods: sim.n_periods,
                    n_covariates: l,
                    seed: self.seed,
                })
            })
            .collect())
    }

    pub fn wants(&self, f: Format) -> bool {
        self.output.formats.contains(&f)
    }
}

/// Apply `a.b.c=value`. The value is read as a TOML literal when it parses as
/// one and as a bare string otherwise.
pub fn apply_override(tree: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment.split_once('=').ok_or_else(|| {
        CliError::config(format!(
            "override `{assignment}` is not of the form key=value"
        ))
    })?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::config(format!(
            "override `{assignment}` has an empty key"
        )));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = keys.split_last().expect("non-empty path");
    let mut node = tree;
    for k in parents {
        let entry = node
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry.as_table_mut().ok_or_else(|| {
            CliError::config(format!("override `{assignment}`: `{k}` is not a table"))
        })?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
mode = "simulate"
seed = 7
estimators = ["DPGMM", { preset = "PGMM", name = "PGMM-fixed", gamma_penalty = { fixed = 0.01 } }]
estimands = [{ t = 10, s = 0 }, { t = 10, lags = [0, 1], weights = [0.5, 0.5] }]

[simulation]
dgp = "dgp1"
replications = 3
n_units = [500]
n_covariates = [2, 5]
"#;

    #[test]
    fn parses_mixed_estimator_entries() {
        let cfg = RunConfig::from_toml(SAMPLE).unwrap();
        cfg.validate().unwrap();
        let specs = cfg.estimator_specs().unwrap();
        assert_eq!(specs[0].0, "DPGMM");
        assert_eq!(specs[1].0, "PGMM-fixed");
        assert_eq!(specs[1].1.gamma.penalty, PenaltySpec::Fixed(0.01));
        assert_eq!(cfg.grid().unwrap().len(), 2);
        assert_eq!(cfg.folds, 5);
    }

    #[test]
    fn canonical_form_round_trips() {
        let cfg = RunConfig::from_toml(SAMPLE).unwrap();
        let text = cfg.to_toml();
        let again = RunConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(text, again.to_toml());
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let mut tree: toml::Table = SAMPLE.parse().unwrap();
        apply_override(&mut tree, "simulation.replications=0").unwrap();
        apply_override(&mut tree, "output.dir=results/run1").unwrap();
        let cfg: RunConfig = tree.try_into().unwrap();
        assert_eq!(cfg.simulation.as_ref().unwrap().replications, 0);
        assert_eq!(cfg.output.dir, PathBuf::from("results/run1"));
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = SAMPLE.replace("seed = 7", "seed = 7\nfoldz = 3");
        assert!(RunConfig::from_toml(&text).is_err());
    }

    #[test]
    fn lag_beyond_model_order_is_a_config_error() {
        let text = SAMPLE.replace("{ t = 10, s = 0 }", "{ t = 10, s = 2 }");
        let cfg = RunConfig::from_toml(&text).unwrap();
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
    }
}
