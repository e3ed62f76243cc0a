//! Experiment configuration, read from TOML.
//!
//! Every hyperparameter has a key and a default. [`ExperimentConfig::resolve`]
//! fills in everything that depends on the code length, the method or the
//! input shape, producing the effective configuration that runs are echoed
//! with.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::activations::BinarizeRule;
use crate::autodiff::LayerSpec;
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::evaluation::JudgeMode;
use crate::schedules::{PolicyKind, PolicySpec, Quantity, Schedules};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    Abc,
    ScaledTanh,
    /// No binarizing layer; the loss regularizer alone pushes outputs to +-1.
    DshRegOnly,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Abc => "abc",
            Method::ScaledTanh => "scaled-tanh",
            Method::DshRegOnly => "dsh-reg-only",
        }
    }

    /// Thresholding used when extracting codes.
    pub fn rule(self) -> BinarizeRule {
        match self {
            Method::Abc => BinarizeRule::Abc,
            Method::ScaledTanh | Method::DshRegOnly => BinarizeRule::Sign,
        }
    }

    fn default_kinds(self) -> (PolicyKind, PolicyKind, PolicyKind) {
        match self {
            Method::Abc => (
                PolicyKind::AbcRetrievalCifar,
                PolicyKind::Constant,
                PolicyKind::AbcRetrievalCifar,
            ),
            Method::ScaledTanh => (
                PolicyKind::Constant,
                PolicyKind::TanhRetrieval,
                PolicyKind::TanhRetrieval,
            ),
            Method::DshRegOnly => (
                PolicyKind::Constant,
                PolicyKind::Constant,
                PolicyKind::AbcRetrievalCifar,
            ),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abc" => Ok(Method::Abc),
            "scaled-tanh" | "tanh" => Ok(Method::ScaledTanh),
            "dsh-reg-only" | "dsh" => Ok(Method::DshRegOnly),
            _ => Err(Error::Config(format!("unknown method `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Layer list. When absent a default body is chosen from the input shape
    /// and the method's head is appended.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<LayerSpec>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[default]
    Pairwise,
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default)]
    pub kind: LossKind,
    /// Contrastive margin; `2 * bits` when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
    #[serde(default = "default_reg_weight")]
    pub reg_weight: f64,
    /// Whether the `||b| - 1|` term is applied at all.
    #[serde(default = "yes")]
    pub regularizer: bool,
}

fn default_reg_weight() -> f64 {
    0.01
}

fn yes() -> bool {
    true
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::Pairwise,
            margin: None,
            reg_weight: default_reg_weight(),
            regularizer: true,
        }
    }
}

impl LossConfig {
    pub fn effective_reg(&self) -> f64 {
        if self.regularizer {
            self.reg_weight
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default)]
    pub r: PolicySpec,
    #[serde(default)]
    pub alpha: PolicySpec,
    #[serde(default)]
    pub lr: PolicySpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    0.004
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalDatabase {
    /// Test set ranked against itself, each query left out of its own list.
    #[default]
    Test,
    /// Test queries ranked against the training set.
    Train,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    /// Pairs per iteration for the pairwise loss, examples for softmax.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: u64,
    /// `ceil(train examples / batch_size)` when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations_per_epoch: Option<u64>,
    /// Evaluate test mAP every this many epochs (and after the last one);
    /// 0 disables evaluation.
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default)]
    pub eval_database: EvalDatabase,
    /// Relevance rule; multi-label when any example has several labels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<JudgeMode>,
}

fn default_batch() -> usize {
    200
}

fn default_epochs() -> u64 {
    120
}

fn default_eval_every() -> u64 {
    4
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: default_batch(),
            epochs: default_epochs(),
            iterations_per_epoch: None,
            eval_every: default_eval_every(),
            eval_database: EvalDatabase::Test,
            judge: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic {
        classes: usize,
        per_class: usize,
        dim: usize,
        sigma: f64,
        /// Defaults to the experiment seed.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        #[serde(default = "one_f64")]
        radius: f64,
        #[serde(default = "fifth")]
        test_fraction: f64,
        #[serde(default)]
        multi_label: bool,
        #[serde(default)]
        mean_subtraction: bool,
    },
    Cifar10 {
        train: Vec<PathBuf>,
        test: Vec<PathBuf>,
        #[serde(default = "yes")]
        mean_subtraction: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_limit: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_limit: Option<usize>,
    },
    /// Feature containers written by [`crate::data::Dataset::write_to`].
    File {
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        mean_subtraction: bool,
    },
}

fn one_f64() -> f64 {
    1.0
}

fn fifth() -> f64 {
    0.2
}

impl DataConfig {
    pub fn synthetic(spec: &SyntheticSpec) -> Self {
        DataConfig::Synthetic {
            classes: spec.classes,
            per_class: spec.per_class,
            dim: spec.dim,
            sigma: spec.sigma,
            seed: Some(spec.seed),
            radius: spec.radius,
            test_fraction: spec.test_fraction,
            multi_label: spec.multi_label,
            mean_subtraction: false,
        }
    }

    pub fn mean_subtraction(&self) -> bool {
        match self {
            DataConfig::Synthetic {
                mean_subtraction, ..
            }
            | DataConfig::Cifar10 {
                mean_subtraction, ..
            }
            | DataConfig::File {
                mean_subtraction, ..
            } => *mean_subtraction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: default_out() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub method: Method,
    #[serde(default = "default_bits")]
    pub bits: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_bits() -> usize {
    12
}

/// Fully connected body used for flat inputs when no layers are given.
pub const DEFAULT_HIDDEN: usize = 64;

/// Layers in front of the code layer when none are configured: a small
/// perceptron for flat inputs, and for images three conv-pool stages
/// followed by a 500-unit fully connected layer.
pub fn default_body(input_shape: &[usize]) -> Vec<LayerSpec> {
    use LayerSpec::*;
    if input_shape.len() == 1 {
        return vec![
            Linear {
                out: Some(DEFAULT_HIDDEN),
            },
            Relu,
        ];
    }
    let pool = Maxpool {
        window: 3,
        stride: Some(2),
    };
    vec![
        Conv {
            filters: 32,
            size: 5,
            stride: 1,
            pad: 2,
        },
        pool.clone(),
        Relu,
        Conv {
            filters: 32,
            size: 5,
            stride: 1,
            pad: 2,
        },
        Relu,
        pool.clone(),
        Conv {
            filters: 64,
            size: 5,
            stride: 1,
            pad: 2,
        },
        Relu,
        pool,
        Flatten,
        Linear { out: Some(500) },
        Relu,
    ]
}

/// The code layer and binarizer for `method`.
pub fn default_head(method: Method) -> Vec<LayerSpec> {
    use LayerSpec::*;
    match method {
        Method::Abc => vec![Linear { out: None }, Batchnorm, Abc],
        Method::ScaledTanh => vec![Linear { out: None }, Batchnorm, Tanh],
        Method::DshRegOnly => vec![Linear { out: None }],
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn margin(&self) -> f64 {
        self.loss.margin.unwrap_or(2.0 * self.bits as f64)
    }

    pub fn judge(&self, multi_label_data: bool) -> JudgeMode {
        self.training.judge.unwrap_or(if multi_label_data {
            JudgeMode::MultiLabel
        } else {
            JudgeMode::SingleLabel
        })
    }

    pub fn schedules(&self) -> Result<Schedules> {
        let (r, alpha, lr) = self.method.default_kinds();
        Ok(Schedules {
            r: self.schedule.r.resolve(Quantity::R, r)?,
            alpha: self.schedule.alpha.resolve(Quantity::Alpha, alpha)?,
            lr: self.schedule.lr.resolve(Quantity::Lr, lr)?,
        })
    }

    pub fn layers(&self, input_shape: &[usize]) -> Vec<LayerSpec> {
        self.model.layers.clone().unwrap_or_else(|| {
            let mut l = default_body(input_shape);
            l.extend(default_head(self.method));
            l
        })
    }

    pub fn synthetic_spec(&self) -> Option<SyntheticSpec> {
        match &self.data {
            DataConfig::Synthetic {
                classes,
                per_class,
                dim,
                sigma,
                seed,
                radius,
                test_fraction,
                multi_label,
                ..
            } => Some(SyntheticSpec {
                classes: *classes,
                per_class: *per_class,
                dim: *dim,
                sigma: *sigma,
                seed: seed.unwrap_or(self.seed),
                radius: *radius,
                test_fraction: *test_fraction,
                multi_label: *multi_label,
            }),
            _ => None,
        }
    }

    /// Checks every field and reports all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.bits == 0 {
            errs.push("bits: must be at least 1".to_string());
        }
        if let Some(m) = self.loss.margin {
            if !(m > 0.0) || !m.is_finite() {
                errs.push(format!("loss.margin: must be > 0, got {m}"));
            }
        }
        if !(self.loss.reg_weight >= 0.0) || !self.loss.reg_weight.is_finite() {
            errs.push(format!(
                "loss.reg_weight: must be >= 0, got {}",
                self.loss.reg_weight
            ));
        }
        if !(0.0..1.0).contains(&self.optimizer.momentum) {
            errs.push(format!(
                "optimizer.momentum: must be in [0, 1), got {}",
                self.optimizer.momentum
            ));
        }
        if !(self.optimizer.weight_decay >= 0.0) || !self.optimizer.weight_decay.is_finite() {
            errs.push(format!(
                "optimizer.weight_decay: must be >= 0, got {}",
                self.optimizer.weight_decay
            ));
        }
        let t = &self.training;
        if t.batch_size == 0 {
            errs.push("training.batch_size: must be at least 1".into());
        } else if self.loss.kind == LossKind::Pairwise && !t.batch_size.is_multiple_of(2) {
            errs.push(format!(
                "training.batch_size: pairwise batches must be even, got {}",
                t.batch_size
            ));
        } else if self.loss.kind == LossKind::Softmax && t.batch_size < 2 {
            errs.push("training.batch_size: batch normalization needs at least 2 examples".into());
        }
        if t.iterations_per_epoch == Some(0) {
            errs.push("training.iterations_per_epoch: must be at least 1".into());
        }
        let (r, alpha, lr) = self.method.default_kinds();
        for (name, spec, q, kind) in [
            ("schedule.r", &self.schedule.r, Quantity::R, r),
            (
                "schedule.alpha",
                &self.schedule.alpha,
                Quantity::Alpha,
                alpha,
            ),
            ("schedule.lr", &self.schedule.lr, Quantity::Lr, lr),
        ] {
            if let Err(e) = spec.resolve(q, kind) {
                errs.push(format!("{name}: {e}"));
            }
        }
        if let Some(layers) = &self.model.layers {
            errs.extend(check_layers(layers, self.method, self.loss.kind));
        }
        match &self.data {
            DataConfig::Synthetic { .. } => {
                let spec = self.synthetic_spec().expect("synthetic source");
                if spec.classes < 2 {
                    errs.push("data.classes: need at least 2 classes".into());
                }
                if spec.per_class == 0 {
                    errs.push("data.per_class: must be at least 1".into());
                }
                if spec.dim == 0 {
                    errs.push("data.dim: must be at least 1".into());
                }
                if !(spec.sigma >= 0.0) || !spec.sigma.is_finite() {
                    errs.push(format!("data.sigma: must be >= 0, got {}", spec.sigma));
                }
                if !(spec.radius > 0.0) {
                    errs.push(format!("data.radius: must be > 0, got {}", spec.radius));
                }
                if !(0.0..1.0).contains(&spec.test_fraction) || spec.test_fraction == 0.0 {
                    errs.push(format!(
                        "data.test_fraction: must be in (0, 1), got {}",
                        spec.test_fraction
                    ));
                }
                if spec.multi_label && spec.classes < 3 {
                    errs.push("data.multi_label: needs at least 3 classes".into());
                }
            }
            DataConfig::Cifar10 { train, test, .. } => {
                if train.is_empty() {
                    errs.push("data.train: list at least one batch file".into());
                }
                if test.is_empty() {
                    errs.push("data.test: list at least one batch file".into());
                }
            }
            DataConfig::File { .. } => {}
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    /// The effective configuration for inputs of `input_shape`: validated,
    /// with layers, margin, schedules, judge and data seed written out.
    pub fn resolve(&self, input_shape: &[usize], multi_label_data: bool) -> Result<Self> {
        self.validate()?;
        let mut out = self.clone();
        let layers = self.layers(input_shape);
        let errs = check_layers(&layers, self.method, self.loss.kind);
        if !errs.is_empty() {
            return Err(Error::Validation(errs));
        }
        out.model.layers = Some(layers);
        out.loss.margin = Some(self.margin());
        let s = self.schedules()?;
        out.schedule = ScheduleConfig {
            r: PolicySpec::from_policy(&s.r),
            alpha: PolicySpec::from_policy(&s.alpha),
            lr: PolicySpec::from_policy(&s.lr),
        };
        out.training.judge = Some(self.judge(multi_label_data));
        if let DataConfig::Synthetic { seed, .. } = &mut out.data {
            seed.get_or_insert(self.seed);
        }
        Ok(out)
    }
}

/// Structural checks on a layer list for a method and loss.
pub fn check_layers(layers: &[LayerSpec], method: Method, loss: LossKind) -> Vec<String> {
    let mut errs = Vec::new();
    let abc: Vec<usize> = positions(layers, |l| matches!(l, LayerSpec::Abc));
    let tanh: Vec<usize> = positions(layers, |l| matches!(l, LayerSpec::Tanh));
    let (want, other, want_name, other_name) = match method {
        Method::Abc => (&abc, &tanh, "abc", "tanh"),
        Method::ScaledTanh => (&tanh, &abc, "tanh", "abc"),
        Method::DshRegOnly => (&abc, &tanh, "abc", "tanh"),
    };
    if layers.is_empty() {
        errs.push("model.layers: empty layer list".into());
        return errs;
    }
    if method == Method::DshRegOnly {
        if !abc.is_empty() || !tanh.is_empty() {
            errs.push("model.layers: dsh-reg-only takes no abc or tanh layer".into());
        }
    } else {
        if want.len() != 1 {
            errs.push(format!(
                "model.layers: method {method} needs exactly one {want_name} layer, found {}",
                want.len()
            ));
        }
        if !other.is_empty() {
            errs.push(format!(
                "model.layers: method {method} cannot contain a {other_name} layer"
            ));
        }
    }
    if method == Method::Abc {
        for &i in &abc {
            if i == 0 || layers[i - 1] != LayerSpec::Batchnorm {
                errs.push(format!(
                    "model.layers[{i}]: the abc layer must directly follow a batchnorm layer"
                ));
            }
        }
    }
    if loss == LossKind::Pairwise {
        let binarizer = abc.iter().chain(&tanh).copied().max();
        if let Some(b) = binarizer {
            if b + 1 != layers.len() {
                errs.push(format!(
                    "model.layers[{b}]: with the pairwise loss the binarizing layer must be last"
                ));
            }
        }
    }
    errs
}

fn positions(layers: &[LayerSpec], f: impl Fn(&LayerSpec) -> bool) -> Vec<usize> {
    layers
        .iter()
        .enumerate()
        .filter(|(_, l)| f(l))
        .map(|(i, _)| i)
        .collect()
}
