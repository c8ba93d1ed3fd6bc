use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ratio::{equidistant_capabilities, set_ratios};
use super::protocol::TrainSettings;
use crate::data::SyntheticSpec;
use crate::engine::{LayerSpec, Model};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<FieldError>),
}

impl ConfigError {
    pub fn field(field: &str, message: impl Into<String>) -> Self {
        ConfigError::Invalid(vec![FieldError {
            field: field.into(),
            message: message.into(),
        }])
    }

    /// Names of the offending fields, if this is a validation error.
    pub fn fields(&self) -> Vec<&str> {
        match self {
            ConfigError::Invalid(v) => v.iter().map(|e| e.field.as_str()).collect(),
            _ => Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Fedskel,
    Fedavg,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Fedskel => "fedskel",
            Method::Fedavg => "fedavg",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `lenet5` or `caffe_lenet`; ignored when `layers` is given.
    pub preset: Option<String>,
    pub input: Option<[usize; 3]>,
    pub layers: Option<Vec<LayerSpec>>,
    #[serde(default = "yes")]
    pub local_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            preset: None,
            input: None,
            layers: None,
            local_head: true,
        }
    }
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    pub fn build(&self) -> Result<Model, ConfigError> {
        match (&self.layers, &self.preset) {
            (Some(_), Some(_)) => Err(ConfigError::field("model.layers", "cannot be combined with model.preset")),
            (Some(layers), None) => {
                let input = self
                    .input
                    .ok_or_else(|| ConfigError::field("model.input", "required with model.layers"))?;
                Model::new(input, layers.clone()).map_err(|e| ConfigError::field("model.layers", e.to_string()))
            }
            (None, preset) => match preset.as_deref().unwrap_or("lenet5") {
                "lenet5" => Ok(Model::lenet5(self.local_head)),
                "caffe_lenet" => Ok(Model::caffe_lenet(self.local_head)),
                other => Err(ConfigError::field(
                    "model.preset",
                    format!("unknown preset {other:?}; expected \"lenet5\" or \"caffe_lenet\""),
                )),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Mnist,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub source: DataSource,
    /// Directory holding the four MNIST IDX files (optionally gzipped).
    pub dir: Option<PathBuf>,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
    /// Evaluate on only the first `test_limit` test examples.
    pub test_limit: Option<usize>,
    #[serde(default = "default_shards")]
    pub shards_per_client: usize,
    /// Fraction of each client's examples held out for the local test.
    #[serde(default = "default_holdout")]
    pub holdout: f64,
}

fn default_test_per_class() -> usize {
    100
}

fn default_shards() -> usize {
    2
}

fn default_holdout() -> f64 {
    0.1
}

impl DataConfig {
    pub fn synthetic(spec: SyntheticSpec) -> Self {
        Self {
            source: DataSource::Synthetic,
            dir: None,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            synthetic: Some(spec),
            test_per_class: default_test_per_class(),
            test_limit: None,
            shards_per_client: default_shards(),
            holdout: default_holdout(),
        }
    }

    pub fn mnist(dir: impl Into<PathBuf>) -> Self {
        Self {
            source: DataSource::Mnist,
            dir: Some(dir.into()),
            synthetic: None,
            ..Self::synthetic(SyntheticSpec::new(2, 1, 1))
        }
    }

    /// `(field, path)` for the train images, train labels, test images and
    /// test labels, explicit paths taking precedence over `dir`.
    pub fn mnist_files(&self) -> [(&'static str, Option<PathBuf>); 4] {
        let pick = |field: &'static str, explicit: &Option<PathBuf>, name: &str| {
            let path = explicit.clone().or_else(|| {
                self.dir.as_ref().map(|d| {
                    let plain = d.join(name);
                    let gz = d.join(format!("{name}.gz"));
                    if !plain.exists() && gz.exists() {
                        gz
                    } else {
                        plain
                    }
                })
            });
            let field = if explicit.is_some() { field } else { "data.dir" };
            (field, path)
        };
        [
            pick("data.train_images", &self.train_images, "train-images-idx3-ubyte"),
            pick("data.train_labels", &self.train_labels, "train-labels-idx1-ubyte"),
            pick("data.test_images", &self.test_images, "t10k-images-idx3-ubyte"),
            pick("data.test_labels", &self.test_labels, "t10k-labels-idx1-ubyte"),
        ]
    }
}

/// How client capabilities are assigned.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CapabilitiesRepr", into = "CapabilitiesRepr")]
pub enum Capabilities {
    /// Every client equally fast.
    #[default]
    Uniform,
    /// Evenly spaced so that ratios run from `r_min` to 1.
    Equidistant,
    List(Vec<f64>),
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum CapabilitiesRepr {
    Name(String),
    List(Vec<f64>),
}

impl TryFrom<CapabilitiesRepr> for Capabilities {
    type Error = String;

    fn try_from(r: CapabilitiesRepr) -> Result<Self, String> {
        match r {
            CapabilitiesRepr::Name(n) if n == "uniform" => Ok(Capabilities::Uniform),
            CapabilitiesRepr::Name(n) if n == "equidistant" => Ok(Capabilities::Equidistant),
            CapabilitiesRepr::Name(n) => Err(format!(
                "unknown capabilities {n:?}; expected \"uniform\", \"equidistant\" or a list"
            )),
            CapabilitiesRepr::List(v) => Ok(Capabilities::List(v)),
        }
    }
}

impl From<Capabilities> for CapabilitiesRepr {
    fn from(c: Capabilities) -> Self {
        match c {
            Capabilities::Uniform => CapabilitiesRepr::Name("uniform".into()),
            Capabilities::Equidistant => CapabilitiesRepr::Name("equidistant".into()),
            Capabilities::List(v) => CapabilitiesRepr::List(v),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientsConfig {
    #[serde(default = "default_clients")]
    pub count: usize,
    #[serde(default)]
    pub capabilities: Capabilities,
    /// Fixed skeleton ratio for every client, bypassing the capability rule.
    pub ratio: Option<f64>,
}

fn default_clients() -> usize {
    10
}

impl Default for ClientsConfig {
    fn default() -> Self {
        Self {
            count: default_clients(),
            capabilities: Capabilities::default(),
            ratio: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkeletonConfig {
    #[serde(default = "default_r_min")]
    pub r_min: f64,
}

fn default_r_min() -> f64 {
    0.1
}

impl Default for SkeletonConfig {
    fn default() -> Self {
        Self { r_min: default_r_min() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub participation: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let s = TrainSettings::default();
        Self {
            participation: s.participation,
            local_epochs: s.local_epochs,
            batch_size: s.batch_size,
            lr: s.lr,
            lr_decay: s.lr_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// UpdateSkel rounds after each SetSkel round.
    pub updates_per_cycle: usize,
    pub cycles: usize,
    /// Evaluate every this many rounds; 0 evaluates after the last round only.
    pub eval_every: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            updates_per_cycle: 3,
            cycles: 10,
            eval_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default = "default_label")]
    pub label: String,
    #[serde(default)]
    pub method: Method,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub clients: ClientsConfig,
    #[serde(default)]
    pub skeleton: SkeletonConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
}

fn default_label() -> String {
    "run".into()
}

impl Config {
    pub fn new(data: DataConfig) -> Self {
        Self {
            label: default_label(),
            method: Method::default(),
            seed: 0,
            model: ModelConfig::default(),
            data,
            clients: ClientsConfig::default(),
            skeleton: SkeletonConfig::default(),
            training: TrainingConfig::default(),
            schedule: ScheduleConfig::default(),
        }
    }

    /// Reads and validates a TOML file. Relative data paths are taken
    /// relative to the file's directory.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: Config = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new("")));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::from("<string>"),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn resolve_paths(&mut self, base: &Path) {
        let d = &mut self.data;
        for p in [
            &mut d.dir,
            &mut d.train_images,
            &mut d.train_labels,
            &mut d.test_images,
            &mut d.test_labels,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        let t = &self.training;
        TrainSettings {
            local_epochs: t.local_epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            lr_decay: t.lr_decay,
            participation: t.participation,
        }
    }

    pub fn capabilities(&self) -> Vec<f64> {
        let n = self.clients.count;
        match &self.clients.capabilities {
            Capabilities::Uniform => vec![1.0; n],
            Capabilities::Equidistant => equidistant_capabilities(n, self.skeleton.r_min),
            Capabilities::List(v) => v.clone(),
        }
    }

    /// Skeleton ratio per client.
    pub fn ratios(&self) -> Result<Vec<f64>, ConfigError> {
        if let Some(r) = self.clients.ratio {
            return Ok(vec![r; self.clients.count]);
        }
        set_ratios(&self.capabilities(), self.skeleton.r_min)
            .map_err(|e| ConfigError::field("clients.capabilities", e.to_string()))
    }

    /// Checks every field, reporting all problems at once.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errors = Vec::new();
        let mut bad = |field: &str, message: String| {
            errors.push(FieldError {
                field: field.into(),
                message,
            })
        };
        let in_unit = |x: f64| x > 0.0 && x <= 1.0;

        if let Err(ConfigError::Invalid(e)) = self.model.build() {
            e.into_iter().for_each(|e| bad(&e.field, e.message));
        }

        let d = &self.data;
        match d.source {
            DataSource::Mnist => {
                for (field, path) in d.mnist_files() {
                    match path {
                        None => bad(field, "MNIST needs data.dir or explicit file paths".into()),
                        Some(p) if !p.is_file() => bad(field, format!("{} does not exist", p.display())),
                        Some(_) => {}
                    }
                }
            }
            DataSource::Synthetic => match &d.synthetic {
                None => bad("data.synthetic", "required when data.source = \"synthetic\"".into()),
                Some(s) => {
                    if s.classes < 2 {
                        bad("data.synthetic.classes", "must be at least 2".into());
                    }
                    if s.per_class == 0 {
                        bad("data.synthetic.per_class", "must be positive".into());
                    }
                    if s.image_size == 0 {
                        bad("data.synthetic.image_size", "must be positive".into());
                    }
                    if d.test_per_class == 0 {
                        bad("data.test_per_class", "must be positive".into());
                    }
                }
            },
        }
        if d.shards_per_client == 0 {
            bad("data.shards_per_client", "must be positive".into());
        }
        if !(d.holdout > 0.0 && d.holdout < 1.0) {
            bad("data.holdout", format!("{} is not in (0, 1)", d.holdout));
        }
        if d.test_limit == Some(0) {
            bad("data.test_limit", "must be positive".into());
        }

        let c = &self.clients;
        if c.count == 0 {
            bad("clients.count", "must be positive".into());
        }
        if let Capabilities::List(v) = &c.capabilities {
            if v.len() != c.count {
                bad(
                    "clients.capabilities",
                    format!("{} entries for {} clients", v.len(), c.count),
                );
            }
            if let Some(x) = v.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
                bad("clients.capabilities", format!("{x} is not positive"));
            }
        }
        if let Some(r) = c.ratio {
            if !in_unit(r) {
                bad("clients.ratio", format!("{r} is not in (0, 1]"));
            }
        }
        if !in_unit(self.skeleton.r_min) {
            bad("skeleton.r_min", format!("{} is not in (0, 1]", self.skeleton.r_min));
        }

        let t = &self.training;
        if !in_unit(t.participation) {
            bad("training.participation", format!("{} is not in (0, 1]", t.participation));
        } else if c.count > 0 && super::participant_count(c.count, t.participation).is_err() {
            bad(
                "training.participation",
                format!("{} of {} clients selects nobody", t.participation, c.count),
            );
        }
        if t.local_epochs == 0 {
            bad("training.local_epochs", "must be positive".into());
        }
        if t.batch_size == 0 {
            bad("training.batch_size", "must be positive".into());
        }
        if !(t.lr >= 0.0 && t.lr.is_finite()) {
            bad("training.lr", format!("{} must be finite and non-negative", t.lr));
        }
        if !(t.lr_decay > 0.0 && t.lr_decay.is_finite()) {
            bad("training.lr_decay", format!("{} must be positive", t.lr_decay));
        }
        if self.schedule.cycles == 0 {
            bad("schedule.cycles", "must be positive".into());
        }

        if errors.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errors))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SYNTH: &str = r#"
        label = "toy"
        method = "fedavg"
        seed = 4
        [data]
        source = "synthetic"
        synthetic = { classes = 3, per_class = 20, image_size = 8 }
        [clients]
        count = 4
        capabilities = [4.0, 2.0, 1.0, 1.0]
        [training]
        participation = 0.5
    "#;

    #[test]
    fn parses_with_defaults() {
        let c = Config::from_toml_str(SYNTH).unwrap();
        assert_eq!(c.method, Method::Fedavg);
        assert_eq!(c.training.batch_size, 10);
        assert_eq!(c.schedule.updates_per_cycle, 3);
        assert_eq!(c.ratios().unwrap(), vec![1.0, 0.5, 0.25, 0.25]);
        assert!(c.model.local_head);
        assert_eq!(Config::from_toml_str(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn equidistant_capabilities_give_spread_ratios() {
        let text = SYNTH.replace("[4.0, 2.0, 1.0, 1.0]", "\"equidistant\"");
        let r = Config::from_toml_str(&text).unwrap().ratios().unwrap();
        assert!((r[0] - 0.1).abs() < 1e-12 && (r[1] - 0.4).abs() < 1e-12 && r[3] == 1.0);
    }

    #[test]
    fn reports_every_bad_field() {
        let text = SYNTH
            .replace("participation = 0.5", "participation = 0.1\nbatch_size = 0")
            .replace("count = 4", "count = 3");
        let err = Config::from_toml_str(&text).unwrap_err();
        let fields = err.fields();
        assert!(fields.contains(&"training.participation"), "{err}");
        assert!(fields.contains(&"training.batch_size"));
        assert!(fields.contains(&"clients.capabilities"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = Config::from_toml_str(&SYNTH.replace("seed = 4", "seed = 4\nsed = 1")).unwrap_err();
        assert!(err.to_string().contains("sed"), "{err}");
    }

    #[test]
    fn missing_mnist_dir_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "[data]\nsource = \"mnist\"\ndir = \"nowhere\"\n").unwrap();
        let err = Config::from_file(&path).unwrap_err();
        assert_eq!(err.fields(), vec!["data.dir"; 4]);
        assert!(err.to_string().contains(&dir.path().join("nowhere").display().to_string()));
    }

    #[test]
    fn unknown_preset() {
        let err = Config::from_toml_str(&format!("{SYNTH}\n[model]\npreset = \"vgg\"")).unwrap_err();
        assert_eq!(err.fields(), vec!["model.preset"]);
    }
}
