//! Datasets: the CIFAR-10 binary format, seeded synthetic clusters, a small
//! feature container and balanced pair sampling.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codes::{read_label_block, write_label_block, Cursor};
use crate::error::{Error, Result};
use crate::evaluation::JudgeMode;
use crate::labels::LabelSet;
use crate::tensor::Tensor;

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_SHAPE: [usize; 3] = [3, 32, 32];
pub const CIFAR_CLASSES: u16 = 10;
pub const FEATURE_MAGIC: &[u8; 4] = b"BNF1";

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub features: Vec<f32>,
    pub labels: LabelSet,
}

/// Examples stored row-major: `features[i * feature_len ..]` is example `i`,
/// shaped `shape` (e.g. `[3, 32, 32]` or `[d]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    shape: Vec<usize>,
    features: Vec<f32>,
    labels: Vec<LabelSet>,
}

impl Dataset {
    pub fn new(shape: Vec<usize>, features: Vec<f32>, labels: Vec<LabelSet>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::data(format!("invalid example shape {shape:?}")));
        }
        let d: usize = shape.iter().product();
        if features.len() != d * labels.len() {
            return Err(Error::dim(format!(
                "{} feature values for {} examples of shape {shape:?}",
                features.len(),
                labels.len()
            )));
        }
        Ok(Dataset {
            shape,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn feature_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn features(&self, i: usize) -> &[f32] {
        let d = self.feature_len();
        &self.features[i * d..(i + 1) * d]
    }

    pub fn all_features(&self) -> &[f32] {
        &self.features
    }

    pub fn labels(&self) -> &[LabelSet] {
        &self.labels
    }

    pub fn example(&self, i: usize) -> LabeledExample {
        LabeledExample {
            features: self.features(i).to_vec(),
            labels: self.labels[i].clone(),
        }
    }

    pub fn is_multi_label(&self) -> bool {
        self.labels.iter().any(|l| l.len() > 1)
    }

    /// One past the largest label id in use.
    pub fn label_universe(&self) -> usize {
        self.labels
            .iter()
            .filter_map(|l| l.ids().last())
            .map(|&id| id as usize + 1)
            .max()
            .unwrap_or(0)
    }

    /// Stacks the given examples into a `[ids.len(), ..shape]` tensor.
    pub fn batch(&self, ids: &[usize]) -> Result<Tensor<f32>> {
        let mut data = Vec::with_capacity(ids.len() * self.feature_len());
        for &i in ids {
            if i >= self.len() {
                return Err(Error::data(format!("example {i} out of range")));
            }
            data.extend_from_slice(self.features(i));
        }
        let mut shape = vec![ids.len()];
        shape.extend_from_slice(&self.shape);
        Tensor::new(shape, data)
    }

    pub fn subset(&self, ids: &[usize]) -> Result<Dataset> {
        let t = self.batch(ids)?;
        let labels = ids.iter().map(|&i| self.labels[i].clone()).collect();
        Dataset::new(self.shape.clone(), t.into_data(), labels)
    }

    /// Image-shaped examples have one channel per leading axis entry; flat
    /// vectors treat every feature as its own channel.
    fn channel_layout(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (self.shape[0], 1),
            _ => (self.shape[0], self.feature_len() / self.shape[0]),
        }
    }

    pub fn channel_means(&self) -> Vec<f32> {
        let (channels, span) = self.channel_layout();
        let mut sums = vec![0f64; channels];
        for row in self.features.chunks_exact(self.feature_len()) {
            for (c, s) in sums.iter_mut().enumerate() {
                *s += row[c * span..(c + 1) * span]
                    .iter()
                    .map(|&v| f64::from(v))
                    .sum::<f64>();
            }
        }
        let n = (self.len() * span).max(1) as f64;
        sums.into_iter().map(|s| (s / n) as f32).collect()
    }

    pub fn subtract_channel_means(&mut self, means: &[f32]) -> Result<()> {
        let (channels, span) = self.channel_layout();
        if means.len() != channels {
            return Err(Error::dim(format!(
                "{} channel means for {channels} channels",
                means.len()
            )));
        }
        let d = self.feature_len();
        for row in self.features.chunks_exact_mut(d) {
            for (c, &m) in means.iter().enumerate() {
                row[c * span..(c + 1) * span]
                    .iter_mut()
                    .for_each(|v| *v -= m);
            }
        }
        Ok(())
    }

    /// Writes the `BNF1` container: magic, `u32` N, `u32` rank, `rank` x
    /// `u32` dims, N * prod(dims) `f32` values, then the label block used by
    /// code files. Integers and floats are little-endian.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let n = u32::try_from(self.len()).map_err(|_| Error::data("too many examples"))?;
        w.write_all(FEATURE_MAGIC)?;
        w.write_all(&n.to_le_bytes())?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.features.len() * 4);
        for v in &self.features {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        write_label_block(&mut w, &self.labels)
    }

    pub fn read_from<R: Read>(r: R) -> Result<Dataset> {
        let mut c = Cursor::new(r);
        if &c.take::<4>()? != FEATURE_MAGIC {
            return Err(Error::format(0, "missing BNF1 magic"));
        }
        let n = u32::from_le_bytes(c.take()?) as usize;
        let rank = u32::from_le_bytes(c.take()?) as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::format(8, format!("unsupported rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| c.take::<4>().map(|b| u32::from_le_bytes(b) as usize))
            .collect::<Result<Vec<_>>>()?;
        let d: usize = shape.iter().product();
        let mut raw = vec![0u8; n * d * 4];
        c.read_exact(&mut raw)?;
        let features = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let labels = read_label_block(&mut c, n)?;
        c.expect_end()?;
        Dataset::new(shape, features, labels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        Dataset::read_from(fs::read(path)?.as_slice())
    }
}

/// Parses CIFAR-10 binary records: one label byte then 1024 red, 1024 green
/// and 1024 blue bytes, each plane row-major 32x32. Pixels become `b / 255`.
pub fn parse_cifar10_binary(bytes: &[u8]) -> Result<Dataset> {
    let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
    if whole != bytes.len() {
        return Err(Error::format(
            whole,
            format!(
                "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut features = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] >= CIFAR_CLASSES as u8 {
            return Err(Error::format(
                i * CIFAR_RECORD,
                format!("label byte {} outside 0..=9", rec[0]),
            ));
        }
        labels.push(LabelSet::single(u16::from(rec[0])));
        features.extend(rec[1..].iter().map(|&b| f32::from(b) / 255.0));
    }
    Dataset::new(CIFAR_SHAPE.to_vec(), features, labels)
}

/// Inverse of [`parse_cifar10_binary`] for datasets it produced.
pub fn serialize_cifar10_binary(data: &Dataset) -> Result<Vec<u8>> {
    if data.shape() != CIFAR_SHAPE {
        return Err(Error::data(format!(
            "CIFAR records need shape {CIFAR_SHAPE:?}, got {:?}",
            data.shape()
        )));
    }
    let mut out = Vec::with_capacity(data.len() * CIFAR_RECORD);
    for i in 0..data.len() {
        match data.labels()[i].ids() {
            [l] if *l < CIFAR_CLASSES => out.push(*l as u8),
            other => return Err(Error::data(format!("example {i} has labels {other:?}"))),
        }
        for &v in data.features(i) {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::data(format!(
                    "example {i} has pixel {v} outside [0, 1]"
                )));
            }
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Reads and concatenates CIFAR-10 batch files in the given order.
pub fn load_cifar10_files<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for p in paths {
        let chunk = fs::read(p.as_ref())?;
        if chunk.len() % CIFAR_RECORD != 0 {
            return parse_cifar10_binary(&chunk)
                .map_err(|e| Error::data(format!("{}: {e}", p.as_ref().display())));
        }
        bytes.extend_from_slice(&chunk);
    }
    parse_cifar10_binary(&bytes)
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_radius() -> f64 {
    1.0
}

/// Gaussian clusters around class means drawn on a sphere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub sigma: f64,
    pub seed: u64,
    /// Sphere radius of the class means.
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Give each example 1 to 3 labels; its mean is the sum of theirs.
    #[serde(default)]
    pub multi_label: bool,
}

impl SyntheticSpec {
    pub fn new(classes: usize, per_class: usize, dim: usize, sigma: f64, seed: u64) -> Self {
        SyntheticSpec {
            classes,
            per_class,
            dim,
            sigma,
            seed,
            radius: default_radius(),
            test_fraction: default_test_fraction(),
            multi_label: false,
        }
    }
}

/// Seeded train/test split of a synthetic dataset.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    if spec.classes == 0 || spec.per_class == 0 || spec.dim == 0 {
        return Err(Error::param(
            "synthetic data needs classes, examples and dimension > 0",
        ));
    }
    if spec.classes > usize::from(u16::MAX) {
        return Err(Error::param("too many classes for 16-bit label ids"));
    }
    if !(spec.sigma >= 0.0) || !spec.sigma.is_finite() || !(spec.radius > 0.0) {
        return Err(Error::param("sigma must be finite and >= 0, radius > 0"));
    }
    if !(0.0..1.0).contains(&spec.test_fraction) {
        return Err(Error::param("test_fraction must be in [0, 1)"));
    }
    if spec.multi_label && spec.classes < 3 {
        return Err(Error::param("multi-label data needs at least 3 classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let v: Vec<f64> = (0..spec.dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let norm = v
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
                .max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x * spec.radius / norm).collect()
        })
        .collect();
    let noise = Normal::new(0.0, spec.sigma).map_err(|e| Error::param(e.to_string()))?;
    let n = spec.classes * spec.per_class;
    let mut features = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for class in 0..spec.classes {
        for _ in 0..spec.per_class {
            let mut set = vec![class as u16];
            if spec.multi_label {
                let extra = rng.random_range(0..3usize);
                while set.len() < 1 + extra {
                    let c = rng.random_range(0..spec.classes) as u16;
                    if !set.contains(&c) {
                        set.push(c);
                    }
                }
            }
            #[allow(clippy::needless_range_loop)]
            for j in 0..spec.dim {
                let centre: f64 = set.iter().map(|&c| means[c as usize][j]).sum();
                features.push((centre + noise.sample(&mut rng)) as f32);
            }
            labels.push(LabelSet::new(set));
        }
    }
    let all = Dataset::new(vec![spec.dim], features, labels)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_test = (n as f64 * spec.test_fraction).round() as usize;
    let (test, train) = order.split_at(n_test);
    Ok((all.subset(train)?, all.subset(test)?))
}

/// Index pairs of one training batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairIndices {
    pub left: Vec<usize>,
    pub right: Vec<usize>,
    pub similar: Vec<bool>,
}

impl PairIndices {
    pub fn len(&self) -> usize {
        self.left.len()
    }

    pub fn is_empty(&self) -> bool {
        self.left.is_empty()
    }
}

/// Draws balanced similar/dissimilar pairs. A similar pair picks a uniform
/// anchor among items that have a relevant partner, then a uniform relevant
/// partner; dissimilar pairs mirror that. Batch `t` of a run depends only on
/// `(seed, t)`.
#[derive(Clone, Debug)]
pub struct PairSampler {
    labels: Vec<LabelSet>,
    mode: JudgeMode,
    seed: u64,
    with_similar: Vec<usize>,
    with_dissimilar: Vec<usize>,
}

impl PairSampler {
    pub fn new(labels: &[LabelSet], mode: JudgeMode, seed: u64) -> Result<Self> {
        let n = labels.len();
        let mut with_similar = Vec::new();
        let mut with_dissimilar = Vec::new();
        for i in 0..n {
            let mut sim = false;
            let mut dis = false;
            for j in (0..n).filter(|&j| j != i) {
                if mode.relevant(&labels[i], &labels[j]) {
                    sim = true;
                } else {
                    dis = true;
                }
                if sim && dis {
                    break;
                }
            }
            if sim {
                with_similar.push(i);
            }
            if dis {
                with_dissimilar.push(i);
            }
        }
        if with_similar.is_empty() {
            return Err(Error::data("no similar pair exists in the training labels"));
        }
        if with_dissimilar.is_empty() {
            return Err(Error::data(
                "no dissimilar pair exists in the training labels",
            ));
        }
        Ok(PairSampler {
            labels: labels.to_vec(),
            mode,
            seed,
            with_similar,
            with_dissimilar,
        })
    }

    fn partner(&self, rng: &mut ChaCha8Rng, anchor: usize, similar: bool) -> usize {
        // Rejection keeps the partner uniform over qualifying items.
        loop {
            let j = rng.random_range(0..self.labels.len());
            if j != anchor && self.mode.relevant(&self.labels[anchor], &self.labels[j]) == similar {
                return j;
            }
        }
    }

    /// Batch number `position`: `pairs / 2` similar pairs then as many
    /// dissimilar ones.
    pub fn sample(&self, pairs: usize, position: u64) -> Result<PairIndices> {
        if pairs == 0 || !pairs.is_multiple_of(2) {
            return Err(Error::param(format!(
                "pair batch size must be even and > 0, got {pairs}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(position);
        let mut out = PairIndices {
            left: Vec::with_capacity(pairs),
            right: Vec::with_capacity(pairs),
            similar: Vec::with_capacity(pairs),
        };
        for similar in [true, false] {
            let pool = if similar {
                &self.with_similar
            } else {
                &self.with_dissimilar
            };
            for _ in 0..pairs / 2 {
                let a = pool[rng.random_range(0..pool.len())];
                let b = self.partner(&mut rng, a, similar);
                out.left.push(a);
                out.right.push(b);
                out.similar.push(similar);
            }
        }
        Ok(out)
    }
}

/// One-shot form of [`PairSampler::sample`].
pub fn sample_pairs(
    data: &Dataset,
    mode: JudgeMode,
    pairs: usize,
    seed: u64,
    position: u64,
) -> Result<PairIndices> {
    PairSampler::new(data.labels(), mode, seed)?.sample(pairs, position)
}
