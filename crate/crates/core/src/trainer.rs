//! SGD training loop, metrics log, code extraction and model files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activations::{extract_binary_codes, AbcParams, Mode, ScaledTanhParams};
use crate::autodiff::{Graph, Layer, Network};
use crate::codes::PackedCodeMatrix;
use crate::config::{DataConfig, EvalDatabase, ExperimentConfig, LossKind, Method};
use crate::data::{generate_synthetic, load_cifar10_files, Dataset, PairSampler};
use crate::error::{Error, Result};
use crate::evaluation::{mean_average_precision, JudgeMode, MapOptions, MapResult};
use crate::schedules::ScheduleState;
use crate::tensor::{Scalar, Tensor};

/// Salt separating the batch-sampling stream from weight initialisation.
const SAMPLING_SALT: u64 = 0x5EED_BA7C_4000_0001;

/// Examples per inference chunk during code extraction.
const EXTRACT_CHUNK: usize = 256;

/// One momentum-SGD update with L2 weight decay folded into the gradient:
/// `v = momentum * v + grad + weight_decay * p`, then `p -= lr * v`.
pub fn sgd_step<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    velocity: &mut [T],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::dim(format!(
            "parameter of {} values with {} gradient and {} velocity values",
            param.len(),
            grad.len(),
            velocity.len()
        )));
    }
    if !(lr >= 0.0) {
        return Err(Error::param(format!(
            "learning rate must be >= 0, got {lr}"
        )));
    }
    let (lr, mu, wd) = (T::lit(lr), T::lit(momentum), T::lit(weight_decay));
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = mu * *v + g + wd * *p;
        *p = *p - lr * *v;
    }
    Ok(())
}

/// Velocity buffers for every parameter of a network.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T = f32> {
    velocity: Vec<Vec<T>>,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(network: &Network<T>, momentum: f64, weight_decay: f64) -> Self {
        OptimizerState {
            velocity: network
                .params()
                .iter()
                .map(|p| vec![T::zero(); p.len()])
                .collect(),
            momentum,
            weight_decay,
        }
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    /// Updates each parameter from its accumulated gradient. Parameters
    /// flagged in `frozen` are left alone, velocity included.
    pub fn step(&mut self, network: &mut Network<T>, lr: f64, frozen: &[bool]) -> Result<()> {
        let params = network.params_mut();
        if params.len() != self.velocity.len() || frozen.len() != params.len() {
            return Err(Error::dim(format!(
                "{} parameters, {} velocity buffers, {} freeze flags",
                params.len(),
                self.velocity.len(),
                frozen.len()
            )));
        }
        for ((p, v), &skip) in params.into_iter().zip(&mut self.velocity).zip(frozen) {
            if skip {
                continue;
            }
            let g = match p.grad() {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); p.len()],
            };
            sgd_step(p.data_mut(), &g, v, lr, self.momentum, self.weight_decay)?;
        }
        Ok(())
    }
}

/// One row of the metrics log. `epoch` counts completed epochs and
/// `iteration` completed iterations; `r`, `alpha` and `lr` are the values of
/// the epoch's last iteration, `loss` the epoch's mean training loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: u64,
    pub iteration: u64,
    pub r: f64,
    pub alpha: f64,
    pub lr: f64,
    pub loss: f64,
    pub map: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,iteration,r,alpha,lr,loss,map";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    records: Vec<MetricsRecord>,
}

impl MetricsLog {
    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, rec: MetricsRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if (rec.epoch, rec.iteration) <= (last.epoch, last.iteration) {
                return Err(Error::State(format!(
                    "metrics record ({}, {}) does not follow ({}, {})",
                    rec.epoch, rec.iteration, last.epoch, last.iteration
                )));
            }
        }
        self.records.push(rec);
        Ok(())
    }

    /// Last evaluated mAP.
    pub fn final_map(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.map)
    }

    /// mAP logged at `epoch`, if it was evaluated then.
    pub fn map_at(&self, epoch: u64) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.epoch == epoch)
            .and_then(|r| r.map)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = write!(
                out,
                "{},{},{},{},{},{},",
                r.epoch, r.iteration, r.r, r.alpha, r.lr, r.loss
            );
            if let Some(m) = r.map {
                let _ = write!(out, "{m}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<MetricsLog> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end() == METRICS_HEADER => {}
            Some((_, h)) => {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected header `{METRICS_HEADER}`, found `{h}`"),
                })
            }
            None => {
                return Err(Error::Parse {
                    line: 1,
                    message: "empty file".into(),
                })
            }
        }
        let mut log = MetricsLog::default();
        for (i, line) in lines {
            let line_no = i + 1;
            let fail = |message: String| Error::Parse {
                line: line_no,
                message,
            };
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(fail(format!("expected 7 fields, found {}", f.len())));
            }
            let int = |s: &str, name: &str| {
                s.parse::<u64>()
                    .map_err(|_| fail(format!("bad {name} `{s}`")))
            };
            let num = |s: &str, name: &str| {
                s.parse::<f64>()
                    .map_err(|_| fail(format!("bad {name} `{s}`")))
            };
            let rec = MetricsRecord {
                epoch: int(f[0], "epoch")?,
                iteration: int(f[1], "iteration")?,
                r: num(f[2], "r")?,
                alpha: num(f[3], "alpha")?,
                lr: num(f[4], "lr")?,
                loss: num(f[5], "loss")?,
                map: if f[6].is_empty() {
                    None
                } else {
                    Some(num(f[6], "map")?)
                },
            };
            log.push(rec).map_err(|e| fail(e.to_string()))?;
        }
        Ok(log)
    }
}

/// Index one past the layers that produce the real-valued code.
pub fn code_layer_end<T: Scalar>(network: &Network<T>, method: Method) -> usize {
    match method {
        Method::Abc | Method::ScaledTanh => {
            network.binarizer_index().unwrap_or(network.layers().len())
        }
        Method::DshRegOnly => network.layers().len(),
    }
}

/// Real-valued pre-binarization outputs for every example of `data`.
pub fn code_activations(
    network: &Network<f32>,
    method: Method,
    data: &Dataset,
) -> Result<Tensor<f32>> {
    if data.is_empty() {
        return Err(Error::data("no examples to encode"));
    }
    let end = code_layer_end(network, method);
    let ids: Vec<usize> = (0..data.len()).collect();
    let mut values = Vec::new();
    let mut width = 0;
    for chunk in ids.chunks(EXTRACT_CHUNK) {
        let out = network.infer(&data.batch(chunk)?, 0..end)?;
        if out.rank() != 2 {
            return Err(Error::dim(format!(
                "code layer output has shape {:?}",
                out.shape()
            )));
        }
        width = out.shape()[1];
        values.extend_from_slice(out.data());
    }
    Tensor::new(vec![data.len(), width], values)
}

/// Binary codes of `data`, labelled. ABC models threshold at `x > 0`, which
/// is ABC evaluated at `r = 0` whatever `r` training ended with; the other
/// methods take the sign with `sgn(0) = +1`.
pub fn extract_codes(
    network: &Network<f32>,
    method: Method,
    data: &Dataset,
) -> Result<PackedCodeMatrix> {
    let acts = code_activations(network, method, data)?;
    extract_binary_codes(&acts, method.rule())?.with_labels(data.labels().to_vec())
}

/// Test-set retrieval mAP of a network.
pub fn evaluate(
    network: &Network<f32>,
    method: Method,
    judge: JudgeMode,
    database: EvalDatabase,
    train: &Dataset,
    test: &Dataset,
) -> Result<MapResult> {
    let queries = extract_codes(network, method, test)?;
    match database {
        EvalDatabase::Test => mean_average_precision(
            &queries,
            &queries,
            judge,
            MapOptions {
                exclude_self: true,
                topn: None,
            },
        ),
        EvalDatabase::Train => {
            let db = extract_codes(network, method, train)?;
            mean_average_precision(&db, &queries, judge, MapOptions::default())
        }
    }
}

/// Loads the train and test sets a configuration names. Mean subtraction
/// uses the training-set channel means for both.
pub fn load_datasets(config: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let (mut train, mut test) = match &config.data {
        DataConfig::Synthetic { .. } => {
            generate_synthetic(&config.synthetic_spec().expect("synthetic source"))?
        }
        DataConfig::Cifar10 {
            train,
            test,
            train_limit,
            test_limit,
            ..
        } => {
            let limit = |d: Dataset, n: &Option<usize>| match n {
                Some(n) if *n < d.len() => d.subset(&(0..*n).collect::<Vec<_>>()),
                _ => Ok(d),
            };
            (
                limit(load_cifar10_files(train)?, train_limit)?,
                limit(load_cifar10_files(test)?, test_limit)?,
            )
        }
        DataConfig::File { train, test, .. } => (Dataset::load(train)?, Dataset::load(test)?),
    };
    if config.data.mean_subtraction() {
        let means = train.channel_means();
        train.subtract_channel_means(&means)?;
        test.subtract_channel_means(&means)?;
    }
    Ok((train, test))
}

/// A trained network with what is needed to use it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavedModel {
    pub method: Method,
    pub bits: usize,
    pub network: Network<f32>,
}

impl SavedModel {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::data(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: SavedModel =
            serde_json::from_str(text).map_err(|e| Error::data(format!("model file: {e}")))?;
        let (abc, tanh) = m.network.layers().iter().fold((0, 0), |(a, t), l| match l {
            Layer::Abc { .. } => (a + 1, t),
            Layer::ScaledTanh { .. } => (a, t + 1),
            _ => (a, t),
        });
        let fits = match m.method {
            Method::Abc => abc == 1 && tanh == 0,
            Method::ScaledTanh => abc == 0 && tanh == 1,
            Method::DshRegOnly => abc == 0 && tanh == 0,
        };
        if !fits {
            return Err(Error::data(format!(
                "model file: a {} model cannot have {abc} abc and {tanh} tanh layers",
                m.method
            )));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub network: Network<f32>,
    pub log: MetricsLog,
    /// The effective configuration the run used.
    pub config: ExperimentConfig,
}

pub fn train(
    config: &ExperimentConfig,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<TrainOutcome> {
    train_with_progress(config, train_set, test_set, |_| {})
}

/// Runs training, calling `progress` after every epoch.
pub fn train_with_progress(
    config: &ExperimentConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    mut progress: impl FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    if train_set.shape() != test_set.shape() {
        return Err(Error::dim(format!(
            "train examples have shape {:?}, test examples {:?}",
            train_set.shape(),
            test_set.shape()
        )));
    }
    let multi = train_set.is_multi_label() || test_set.is_multi_label();
    let cfg = config.resolve(train_set.shape(), multi)?;
    let judge = cfg.judge(multi);
    let layers = cfg.model.layers.clone().expect("resolved layers");
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut network = Network::build(&layers, train_set.shape(), cfg.bits, &mut init_rng)?;
    check_widths(&network, &cfg, train_set)?;

    let schedules = cfg.schedules()?;
    let batch = cfg.training.batch_size;
    let per_epoch = cfg
        .training
        .iterations_per_epoch
        .unwrap_or(train_set.len().div_ceil(batch) as u64);
    let margin = cfg.margin();
    let reg = cfg.loss.effective_reg();
    let sampling_seed = cfg.seed ^ SAMPLING_SALT;
    let sampler = match cfg.loss.kind {
        LossKind::Pairwise => Some(PairSampler::new(train_set.labels(), judge, sampling_seed)?),
        LossKind::Softmax => None,
    };
    let class_ids: Vec<usize> = match cfg.loss.kind {
        LossKind::Softmax => train_set
            .labels()
            .iter()
            .enumerate()
            .map(|(i, l)| match l.ids() {
                [c] => Ok(*c as usize),
                _ => Err(Error::data(format!(
                    "softmax training needs one label per example (example {i})"
                ))),
            })
            .collect::<Result<_>>()?,
        LossKind::Pairwise => Vec::new(),
    };
    let owners = network.param_owners();
    let mut opt = OptimizerState::new(&network, cfg.optimizer.momentum, cfg.optimizer.weight_decay);
    let mut log = MetricsLog::default();
    let mut iteration = 0u64;

    for epoch in 0..cfg.training.epochs {
        let mut loss_sum = 0.0f64;
        let mut last: Option<ScheduleState> = None;
        for _ in 0..per_epoch {
            let s = schedules.state_at(epoch, iteration);
            network.set_abc(AbcParams::new(s.r)?);
            network.set_tanh(ScaledTanhParams::new(s.alpha)?);
            let frozen_before = match cfg.method {
                Method::Abc => network.frozen_prefix(),
                _ => 0,
            };
            let frozen: Vec<bool> = owners.iter().map(|&o| o < frozen_before).collect();

            let mut g = Graph::new();
            let (ids, pairs) = match &sampler {
                Some(sampler) => {
                    let p = sampler.sample(batch, iteration)?;
                    let mut ids = p.left.clone();
                    ids.extend_from_slice(&p.right);
                    (ids, Some(p))
                }
                None => {
                    let mut rng = ChaCha8Rng::seed_from_u64(sampling_seed);
                    rng.set_stream(iteration);
                    let take = batch.min(train_set.len());
                    (
                        rand::seq::index::sample(&mut rng, train_set.len(), take).into_vec(),
                        None,
                    )
                }
            };
            let x = g.leaf(train_set.batch(&ids)?);
            let pass = network.forward_frozen(&mut g, x, Mode::Train, frozen_before)?;
            let loss = match &pairs {
                Some(p) => {
                    let b = p.len();
                    let left = g.rows(pass.output, 0, b)?;
                    let right = g.rows(pass.output, b, 2 * b)?;
                    g.pairwise_loss(left, right, &p.similar, margin, reg)?
                }
                None => {
                    let labels: Vec<usize> = ids.iter().map(|&i| class_ids[i]).collect();
                    g.softmax_cross_entropy(pass.output, &labels)?
                }
            };
            let value = g.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                return Err(Error::Divergence {
                    iteration: iteration as usize,
                    loss: value,
                    r: s.r,
                    alpha: s.alpha,
                });
            }
            let grads = g.backward(loss)?;
            network.zero_grad();
            network.accumulate_grads(&pass, &grads)?;
            opt.step(&mut network, s.lr, &frozen)?;
            loss_sum += value;
            iteration += 1;
            last = Some(s);
        }
        let s = last.expect("at least one iteration per epoch");
        let done = epoch + 1;
        let every = cfg.training.eval_every;
        let due = every > 0 && (done % every == 0 || done == cfg.training.epochs);
        let map = if due {
            Some(
                evaluate(
                    &network,
                    cfg.method,
                    judge,
                    cfg.training.eval_database,
                    train_set,
                    test_set,
                )?
                .map,
            )
        } else {
            None
        };
        let rec = MetricsRecord {
            epoch: done,
            iteration,
            r: s.r,
            alpha: s.alpha,
            lr: s.lr,
            loss: loss_sum / per_epoch as f64,
            map,
        };
        progress(&rec);
        log.push(rec)?;
    }
    Ok(TrainOutcome {
        network,
        log,
        config: cfg,
    })
}

fn check_widths(network: &Network<f32>, cfg: &ExperimentConfig, train: &Dataset) -> Result<()> {
    let probe: Vec<usize> = (0..train.len().min(2)).collect();
    let x = train.batch(&probe)?;
    let end = code_layer_end(network, cfg.method);
    let code = network.infer(&x, 0..end)?;
    let mut errs = Vec::new();
    if code.shape()[1..] != [cfg.bits] {
        errs.push(format!(
            "bits: the code layer produces shape {:?} per example, expected [{}]",
            &code.shape()[1..],
            cfg.bits
        ));
    }
    if cfg.loss.kind == LossKind::Softmax {
        let out = network.infer(&x, 0..network.layers().len())?;
        let classes = train.label_universe();
        if out.shape()[1..] != [classes] {
            errs.push(format!(
                "model.layers: softmax output has shape {:?}, expected [{classes}]",
                &out.shape()[1..]
            ));
        }
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(errs))
    }
}
