//! Config files: sectioned TOML (`[run]`, `[loss]`, `[optimizer]`,
//! `[experiment]`), or a `manifest.json` written by an earlier invocation.

use std::fmt;
use std::path::Path;

use memlens_core::{InitialTheta, LossSpec, OptimizerSpec, RunConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Every settable key, with its unit or accepted values.
pub const KEYS: &[(&str, &str)] = &[
    ("run.seed", "integer; seeds fixtures, initial point and Monte Carlo draws"),
    ("run.dim", "count; parameter dimension"),
    ("run.horizon", "time; a run takes floor(horizon / h) steps"),
    ("run.domain_radius", "l-inf norm; iterates beyond it stop the run"),
    ("run.init", "gaussian | constant | explicit"),
    ("run.init_scale", "standard deviation of a gaussian initial point"),
    ("run.init_value", "value of every coordinate of a constant initial point"),
    ("run.init_values", "list of dim floats for an explicit initial point"),
    ("loss.id", "quadratic | logistic | quartic | minibatch-quadratic"),
    ("loss.eig_min", "curvature; smallest Hessian eigenvalue (quadratic)"),
    ("loss.eig_max", "curvature; largest Hessian eigenvalue (quadratic)"),
    ("loss.offset_scale", "standard deviation of the linear term (quadratic)"),
    ("loss.samples", "count; synthetic data points (logistic)"),
    ("loss.ridge", "L2 penalty weight (logistic)"),
    ("loss.a", "quartic coefficient in a/4 sum theta_i^4 (quartic)"),
    ("loss.count", "count; batches in the family (minibatch-quadratic)"),
    ("loss.spread", "relative spread of batch Hessians and offsets (minibatch-quadratic)"),
    ("optimizer.kind", "heavy-ball | nesterov | adamw | nadamw | lion-k"),
    ("optimizer.h", "time per step (learning rate)"),
    ("optimizer.beta1", "per-step decay in [0, 1); momentum beta or Lion rho1"),
    ("optimizer.beta2", "per-step decay in [0, 1); Adam second moment or Lion rho2"),
    ("optimizer.lambda", "weight decay per unit time"),
    ("optimizer.eps", "Adam denominator offset and one-norm smoothing, > 0"),
    ("optimizer.kspec", "smoothed-one-norm | half-squared-two-norm | one-norm (Lion-K)"),
    ("optimizer.bias_correction", "true | false"),
    ("experiment.h_grid", "list of step sizes for sweep, defect and ode-compare"),
    ("experiment.h_list", "list of step sizes for closeness"),
    ("experiment.kind", "memoryful | first-order | second-order | second-order-asymptotic"),
    ("experiment.terms", "leading-only | with-correction (ode-compare)"),
    ("experiment.slope_min", "lower end of the accepted log-log slope"),
    ("experiment.slope_max", "upper end of the accepted log-log slope"),
    ("experiment.min_r2", "minimum r^2 of the slope fit"),
    ("experiment.min_fraction", "fraction of post-burn-in steps that must be ordered (closeness)"),
    ("experiment.lambda_times_h", "if set, weight decay is this value / h at each h (closeness)"),
    ("experiment.samples", "count; Monte Carlo orderings (minibatch-corr)"),
    ("experiment.mc_seed", "integer; Monte Carlo seed, defaults to run.seed"),
    ("experiment.steps", "list of step indices n (corr-table)"),
    ("experiment.tolerance", "relative agreement required between correction methods (corr-table)"),
    ("experiment.points", "count; random evaluation points (gradcheck)"),
    ("experiment.fd_step", "finite-difference step (gradcheck)"),
    ("experiment.fd_tol", "maximum relative finite-difference error (gradcheck)"),
];

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitRule {
    Gaussian,
    Constant,
    Explicit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub dim: usize,
    pub horizon: f64,
    pub domain_radius: f64,
    pub init: InitRule,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_values: Option<Vec<f64>>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            dim: 10,
            horizon: 1.0,
            domain_radius: 1e3,
            init: InitRule::Gaussian,
            init_scale: None,
            init_value: None,
            init_values: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossId {
    Quadratic,
    Logistic,
    Quartic,
    MinibatchQuadratic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub id: LossId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eig_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eig_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ridge: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spread: Option<f64>,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            id: LossId::Quadratic,
            eig_min: None,
            eig_max: None,
            offset_scale: None,
            samples: None,
            ridge: None,
            a: None,
            count: None,
            spread: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h_grid: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h_list: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub terms: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slope_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slope_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_r2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_times_h: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mc_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub points: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fd_step: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fd_tol: Option<f64>,
}

fn default_optimizer() -> OptimizerSpec {
    OptimizerSpec::heavy_ball(1e-2, 0.9)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub experiment: ExperimentSection,
}

impl Default for FileConfig {
    fn default() -> Self {
        Self {
            run: RunSection::default(),
            loss: LossSection::default(),
            optimizer: default_optimizer(),
            experiment: ExperimentSection::default(),
        }
    }
}

/// Reads a TOML config, or the `config` object of a JSON manifest, and
/// applies `key=value` overrides.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<FileConfig, ConfigError> {
    let mut doc = match path {
        None => Value::Object(Map::new()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| ConfigError(format!("cannot read config {}: {e}", p.display())))?;
            parse_document(p, &text)?
        }
    };
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    serde_json::from_value(doc).map_err(|e| ConfigError(format!("config: {e}")))
}

fn parse_document(path: &Path, text: &str) -> Result<Value, ConfigError> {
    let where_ = path.display();
    if path.extension().is_some_and(|e| e == "json") {
        let mut v: Value =
            serde_json::from_str(text).map_err(|e| ConfigError(format!("{where_}: {e}")))?;
        // a manifest carries the resolved config under `config`
        if let Some(c) = v.get_mut("config") {
            return Ok(c.take());
        }
        Ok(v)
    } else {
        toml::from_str(text).map_err(|e| ConfigError(format!("{where_}: {e}")))
    }
}

fn apply_override(doc: &mut Value, entry: &str) -> Result<(), ConfigError> {
    let Some((key, raw)) = entry.split_once('=') else {
        return err(format!("override `{entry}` is not of the form key=value"));
    };
    let key = key.trim();
    if !KEYS.iter().any(|(k, _)| *k == key) {
        return err(format!("unknown key `{key}` (see --help for the list)"));
    }
    let (section, field) = key.split_once('.').expect("registry keys are dotted");
    let value = parse_value(raw.trim());
    let root = doc.as_object_mut().ok_or_else(|| ConfigError("config root must be a table".into()))?;
    // an absent section starts from its defaults so required fields stay set
    let table = root
        .entry(section)
        .or_insert_with(|| serde_json::to_value(FileConfig::default()).expect("json")[section].take())
        .as_object_mut()
        .ok_or_else(|| ConfigError(format!("`{section}` must be a table")))?;
    table.insert(field.to_string(), value);
    Ok(())
}

/// A TOML literal if it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: Value,
    }
    toml::from_str::<Wrap>(&format!("v = {raw}")).map_or_else(|_| Value::String(raw.to_string()), |w| w.v)
}

fn reject(section: &str, present: &[(&str, bool)], why: &str) -> Result<(), ConfigError> {
    match present.iter().find(|(_, p)| *p) {
        Some((name, _)) => err(format!("`{section}.{name}` does not apply to {why}")),
        None => Ok(()),
    }
}

impl FileConfig {
    /// Fills defaults for the chosen loss and initial point, rejects keys
    /// that do not apply, and builds the core run configuration.
    pub fn resolve(mut self) -> Result<(FileConfig, RunConfig), ConfigError> {
        let l = &mut self.loss;
        let loss = match l.id {
            LossId::Quadratic => {
                reject(
                    "loss",
                    &[("samples", l.samples.is_some()), ("ridge", l.ridge.is_some()), ("a", l.a.is_some()),
                      ("count", l.count.is_some()), ("spread", l.spread.is_some())],
                    "id = quadratic",
                )?;
                LossSpec::Quadratic {
                    eig_min: *l.eig_min.get_or_insert(0.1),
                    eig_max: *l.eig_max.get_or_insert(10.0),
                    offset_scale: *l.offset_scale.get_or_insert(1.0),
                }
            }
            LossId::Logistic => {
                reject(
                    "loss",
                    &[("eig_min", l.eig_min.is_some()), ("eig_max", l.eig_max.is_some()),
                      ("offset_scale", l.offset_scale.is_some()), ("a", l.a.is_some()),
                      ("count", l.count.is_some()), ("spread", l.spread.is_some())],
                    "id = logistic",
                )?;
                LossSpec::Logistic {
                    samples: *l.samples.get_or_insert(200),
                    ridge: *l.ridge.get_or_insert(0.0),
                }
            }
            LossId::Quartic => {
                reject(
                    "loss",
                    &[("eig_min", l.eig_min.is_some()), ("eig_max", l.eig_max.is_some()),
                      ("offset_scale", l.offset_scale.is_some()), ("samples", l.samples.is_some()),
                      ("ridge", l.ridge.is_some()), ("count", l.count.is_some()), ("spread", l.spread.is_some())],
                    "id = quartic",
                )?;
                LossSpec::Quartic { a: *l.a.get_or_insert(1.0) }
            }
            LossId::MinibatchQuadratic => {
                reject(
                    "loss",
                    &[("eig_min", l.eig_min.is_some()), ("eig_max", l.eig_max.is_some()),
                      ("offset_scale", l.offset_scale.is_some()), ("samples", l.samples.is_some()),
                      ("ridge", l.ridge.is_some()), ("a", l.a.is_some())],
                    "id = minibatch-quadratic",
                )?;
                LossSpec::MinibatchQuadratic {
                    count: *l.count.get_or_insert(6),
                    spread: *l.spread.get_or_insert(0.5),
                }
            }
        };
        let r = &mut self.run;
        let initial_theta = match r.init {
            InitRule::Gaussian => {
                reject("run", &[("init_value", r.init_value.is_some()), ("init_values", r.init_values.is_some())], "init = gaussian")?;
                InitialTheta::Gaussian { scale: *r.init_scale.get_or_insert(1.0) }
            }
            InitRule::Constant => {
                reject("run", &[("init_scale", r.init_scale.is_some()), ("init_values", r.init_values.is_some())], "init = constant")?;
                InitialTheta::Constant { value: *r.init_value.get_or_insert(0.0) }
            }
            InitRule::Explicit => {
                reject("run", &[("init_scale", r.init_scale.is_some()), ("init_value", r.init_value.is_some())], "init = explicit")?;
                match &r.init_values {
                    Some(v) => InitialTheta::Explicit { values: v.clone() },
                    None => return err("`run.init_values` is required when init = explicit"),
                }
            }
        };
        let config = RunConfig {
            seed: r.seed,
            dim: r.dim,
            horizon: r.horizon,
            loss,
            optimizer: self.optimizer,
            initial_theta,
            domain_radius: r.domain_radius,
        };
        config.validate().map_err(|e| ConfigError(format!("config: {e}")))?;
        Ok((self, config))
    }
}

/// The key table shown by `--help`.
pub fn key_help() -> String {
    let width = KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Config keys (set in the file or with --set key=value):\n");
    for (k, u) in KEYS {
        s.push_str(&format!("  {k:<width$}  {u}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_file_key_is_registered() {
        let full = FileConfig {
            run: RunSection {
                init_scale: Some(1.0),
                init_value: Some(0.0),
                init_values: Some(vec![]),
                ..Default::default()
            },
            loss: LossSection {
                id: LossId::Quadratic,
                eig_min: Some(1.0),
                eig_max: Some(1.0),
                offset_scale: Some(1.0),
                samples: Some(1),
                ridge: Some(0.0),
                a: Some(1.0),
                count: Some(2),
                spread: Some(0.0),
            },
            optimizer: default_optimizer(),
            experiment: ExperimentSection {
                h_grid: Some(vec![]),
                h_list: Some(vec![]),
                kind: Some(String::new()),
                terms: Some(String::new()),
                slope_min: Some(0.0),
                slope_max: Some(0.0),
                min_r2: Some(0.0),
                min_fraction: Some(0.0),
                lambda_times_h: Some(0.0),
                samples: Some(0),
                mc_seed: Some(0),
                steps: Some(vec![]),
                tolerance: Some(0.0),
                points: Some(0),
                fd_step: Some(0.0),
                fd_tol: Some(0.0),
            },
        };
        let v = serde_json::to_value(&full).unwrap();
        let mut seen = Vec::new();
        for (section, table) in v.as_object().unwrap() {
            for field in table.as_object().unwrap().keys() {
                seen.push(format!("{section}.{field}"));
            }
        }
        seen.sort();
        let mut keys: Vec<String> = KEYS.iter().map(|(k, _)| k.to_string()).collect();
        keys.sort();
        assert_eq!(seen, keys);
    }

    #[test]
    fn overrides_parse_typed_values() {
        let mut doc = Value::Object(Map::new());
        apply_override(&mut doc, "optimizer.beta1=0.5").unwrap();
        apply_override(&mut doc, "loss.id=logistic").unwrap();
        apply_override(&mut doc, "experiment.h_grid=[0.1, 0.05]").unwrap();
        assert_eq!(doc["optimizer"]["beta1"], 0.5);
        assert_eq!(doc["loss"]["id"], "logistic");
        assert_eq!(doc["experiment"]["h_grid"][1], 0.05);
    }

    #[test]
    fn unknown_override_names_the_key() {
        let mut doc = Value::Object(Map::new());
        let e = apply_override(&mut doc, "optimizer.betta=0.5").unwrap_err();
        assert!(e.0.contains("optimizer.betta"), "{e}");
        assert!(apply_override(&mut doc, "novalue").is_err());
    }

    #[test]
    fn inapplicable_loss_key_is_named() {
        let mut c = FileConfig {
            run: RunSection::default(),
            loss: LossSection::default(),
            optimizer: default_optimizer(),
            experiment: ExperimentSection::default(),
        };
        c.loss.samples = Some(10);
        let e = c.resolve().unwrap_err();
        assert!(e.0.contains("loss.samples"), "{e}");
    }

    #[test]
    fn resolution_fills_defaults() {
        let c: FileConfig = toml::from_str("[loss]\nid = \"logistic\"\n[optimizer]\nkind = \"adamw\"\nh = 0.001\n").unwrap();
        let (resolved, run) = c.resolve().unwrap();
        assert_eq!(resolved.loss.samples, Some(200));
        assert_eq!(run.loss, LossSpec::Logistic { samples: 200, ridge: 0.0 });
        assert_eq!(resolved.run.init_scale, Some(1.0));
    }
}
