//! Head training: Adam with a step learning-rate schedule, ablation switches,
//! checkpoint/resume and hyperparameter grid search.
//!
//! Training is organised by a global step counter. The sample order of epoch
//! `e` and the dropout masks of step `s` come from generators derived from
//! the run seed and `e` or `s`, so any step can be recomputed from the
//! checkpointed parameters, optimizer moments and step counter alone, and a
//! resumed run continues bit-identically.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::container::Container;
use crate::data::{augment_train, preprocess_eval, read_image, stack, AugmentConfig, Dataset, ImageSample};
use crate::head::{self, HeadConfig, HeadParams, Mode};
use crate::losses::{self, LossConfig};
use crate::metrics::{accuracy, average_precision};
use crate::pipeline::{encode_dataset, score, EncodedSet};
use crate::rng::{Rng, RngState};
use crate::vit::{Backbone, RineTensorK};
use crate::{Error, Result};

pub const CHECKPOINT_KIND: &str = "checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient; off by default.
    pub weight_decay: f64,
    /// Global gradient-norm cap; off by default.
    pub grad_clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: None,
        }
    }
}

/// The three published ablations.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Uniform block weights instead of learned importance.
    pub no_tie: bool,
    /// Cross-entropy only.
    pub no_contrastive: bool,
    /// Only the final block's CLS token.
    pub last_block_only: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub head: HeadConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Epochs (1-based) at whose start the learning rate is multiplied by
    /// `lr_decay_factor`; only used when `epochs > 5`.
    #[serde(default = "default_decay_epochs")]
    pub lr_decay_epochs: Vec<usize>,
    #[serde(default = "default_decay_factor")]
    pub lr_decay_factor: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub ablation: Ablation,
    /// Train-time augmentation; `None` trains on center crops.
    #[serde(default)]
    pub augment: Option<AugmentConfig>,
    /// Encode the training set once when augmentation is off.
    #[serde(default = "default_true")]
    pub cache_features: bool,
}

fn default_batch() -> usize {
    128
}
fn default_lr() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    1
}
fn default_decay_epochs() -> Vec<usize> {
    vec![6, 11]
}
fn default_decay_factor() -> f64 {
    0.1
}
fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn new(head: HeadConfig) -> Self {
        Self {
            head,
            loss: LossConfig::default(),
            batch_size: default_batch(),
            lr: default_lr(),
            epochs: default_epochs(),
            lr_decay_epochs: default_decay_epochs(),
            lr_decay_factor: default_decay_factor(),
            adam: AdamConfig::default(),
            seed: 0,
            ablation: Ablation::default(),
            augment: None,
            cache_features: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.head.validate()?;
        self.loss.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Param("batch size must be ≥ 2".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Param("epochs must be ≥ 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Param(format!("learning rate {} must be > 0", self.lr)));
        }
        Ok(())
    }

    /// Head and loss settings with the ablation switches applied.
    pub fn effective(&self) -> (HeadConfig, LossConfig) {
        let mut head = self.head.clone();
        let mut loss = self.loss.clone();
        if self.ablation.no_tie {
            head.use_tie = false;
        }
        if self.ablation.last_block_only {
            head.last_block_only = true;
        }
        if self.ablation.no_contrastive {
            loss.xi = 0.0;
        }
        (head, loss)
    }

    /// Learning rate during 1-based `epoch`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if self.epochs <= 5 {
            return self.lr;
        }
        let drops = self.lr_decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.lr * self.lr_decay_factor.powi(drops as i32)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("train config serializes");
        Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Adam moments and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: HeadParams,
    pub v: HeadParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &HeadParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, `p ← p − lr·m̂/(√v̂ + eps)`.
pub fn adam_step(
    params: &mut HeadParams,
    grads: &HeadParams,
    state: &mut AdamState,
    lr: f64,
    config: &AdamConfig,
) -> Result<()> {
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    for ((name, g), (_, p)) in grads.named().iter().zip(params.named()) {
        if g.shape() != p.shape() {
            return Err(Error::Shape(format!("gradient `{name}` {:?} vs parameter {:?}", g.shape(), p.shape())));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(name.clone()));
        }
    }
    let clip_scale = match config.grad_clip {
        Some(max) => {
            let norm = grads
                .named()
                .iter()
                .flat_map(|(_, t)| t.data().iter().map(|&v| f64::from(v).powi(2)))
                .sum::<f64>()
                .sqrt();
            if norm > max { max / norm } else { 1.0 }
        }
        None => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let g_all = grads.named();
    let mut p_all = params.tensors_mut();
    let mut m_all = state.m.tensors_mut();
    let mut v_all = state.v.tensors_mut();
    for i in 0..names.len() {
        let g = g_all[i].1.data();
        let (p, m, v) = (p_all[i].data_mut(), m_all[i].data_mut(), v_all[i].data_mut());
        for j in 0..g.len() {
            let grad = f64::from(g[j]) * clip_scale + config.weight_decay * f64::from(p[j]);
            let mj = b1 * f64::from(m[j]) + (1.0 - b1) * grad;
            let vj = b2 * f64::from(v[j]) + (1.0 - b2) * grad * grad;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let update = lr * (mj / c1) / ((vj / c2).sqrt() + config.eps);
            p[j] = (f64::from(p[j]) - update) as f32;
        }
    }
    Ok(())
}

/// Loss components of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub ce_loss: f64,
    pub cont_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub steps: Vec<StepRecord>,
}

impl History {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.steps {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv()?)?;
        Ok(())
    }
}

/// Where training batches come from.
enum Source<'a> {
    /// Pre-encoded CLS stacks.
    Cached(&'a EncodedSet),
    /// Decode, augment and encode per step.
    Images {
        dataset: &'a Dataset,
        backbone: &'a Backbone,
        augment: AugmentConfig,
    },
}

impl Source<'_> {
    fn len(&self) -> usize {
        match self {
            Source::Cached(e) => e.len(),
            Source::Images { dataset, .. } => dataset.len(),
        }
    }

    fn labels(&self) -> Vec<u8> {
        match self {
            Source::Cached(e) => e.labels.clone(),
            Source::Images { dataset, .. } => dataset.labels(),
        }
    }

    fn batch(&self, indices: &[usize], epoch: usize, seed: u64) -> Result<(RineTensorK, Vec<u8>)> {
        match self {
            Source::Cached(e) => e.select(indices),
            Source::Images {
                dataset,
                backbone,
                augment,
            } => {
                let side = backbone.config.image_side;
                let root = Rng::new(seed);
                let samples: Vec<Option<ImageSample>> = indices
                    .par_iter()
                    .map(|&i| {
                        let entry = &dataset.entries[i];
                        let pixels = match read_image(&entry.path) {
                            Ok(p) => p,
                            Err(e) => {
                                log::warn!("skipping undecodable image {}: {e}", entry.path.display());
                                return Ok(None);
                            }
                        };
                        let sample = ImageSample::new(pixels, entry.label, entry.id.clone())?;
                        let mut rng = root.derive(&format!("augment/{epoch}/{}", entry.id));
                        augment_train(&sample, augment, side, &mut rng).map(Some)
                    })
                    .collect::<Result<_>>()?;
                let samples: Vec<ImageSample> = samples.into_iter().flatten().collect();
                if samples.is_empty() {
                    return Err(Error::dataset(&dataset.root, "batch without decodable images"));
                }
                let labels = samples.iter().map(|s| s.label).collect();
                Ok((backbone.encode_pixels(&stack(&samples)?)?, labels))
            }
        }
    }
}

/// Everything a resumed run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: HeadParams,
    pub adam: AdamState,
    pub rng: RngState,
    pub config_digest: String,
    pub head: HeadConfig,
    pub history: Vec<StepRecord>,
}

impl Checkpoint {
    pub fn to_container(&self) -> Container {
        let mut c = Container::new(
            CHECKPOINT_KIND,
            json!({
                "head": self.head,
                "config_digest": self.config_digest,
                "step": self.adam.step,
                "rng": self.rng,
            }),
        );
        c.meta.insert("history".into(), serde_json::to_value(&self.history).expect("history serializes"));
        for (prefix, p) in [("params.", &self.params), ("adam.m.", &self.adam.m), ("adam.v.", &self.adam.v)] {
            for (name, t) in p.named() {
                c.insert(format!("{prefix}{name}"), t.clone());
            }
        }
        c
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        c.expect_kind(CHECKPOINT_KIND)?;
        let field = |key: &str| {
            c.config
                .get(key)
                .cloned()
                .ok_or_else(|| Error::container("config", format!("missing `{key}`")))
        };
        let bad = |e: serde_json::Error| Error::container("config", e.to_string());
        let head: HeadConfig = serde_json::from_value(field("head")?).map_err(bad)?;
        let config_digest: String = serde_json::from_value(field("config_digest")?).map_err(bad)?;
        let step: u64 = serde_json::from_value(field("step")?).map_err(bad)?;
        let rng: RngState = serde_json::from_value(field("rng")?).map_err(bad)?;
        let history = match c.meta.get("history") {
            Some(h) => serde_json::from_value(h.clone()).map_err(bad)?,
            None => Vec::new(),
        };
        let params = head::take_params(&mut c, &head, "params.")?;
        let m = head::take_params(&mut c, &head, "adam.m.")?;
        let v = head::take_params(&mut c, &head, "adam.v.")?;
        c.expect_consumed()?;
        Ok(Self {
            params,
            adam: AdamState { m, v, step },
            rng,
            config_digest,
            head,
            history,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(Container::read(path)?)
    }
}

/// Result of a finished run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: HeadParams,
    /// Head configuration with ablations applied; use it for inference.
    pub head: HeadConfig,
    pub history: History,
}

/// A training run that can be advanced step by step.
pub struct Trainer<'a> {
    config: TrainConfig,
    head: HeadConfig,
    loss: LossConfig,
    source: Source<'a>,
    params: HeadParams,
    adam: AdamState,
    history: Vec<StepRecord>,
    steps_per_epoch: usize,
}

impl<'a> Trainer<'a> {
    /// Trains on a pre-encoded set (augmentation must be off).
    pub fn from_encoded(config: TrainConfig, encoded: &'a EncodedSet) -> Result<Self> {
        if config.augment.is_some() {
            return Err(Error::Param("cached features cannot be combined with augmentation".into()));
        }
        Self::build(config, Source::Cached(encoded), encoded.k.blocks(), encoded.k.dim())
    }

    /// Trains from images. Augmentation-free runs encode the set once when
    /// `cache_features` is set; the encoded set is returned alongside.
    pub fn from_images(config: TrainConfig, dataset: &'a Dataset, backbone: &'a Backbone) -> Result<Self> {
        let augment = config.augment.clone().ok_or_else(|| {
            Error::Param("image-streaming training needs augmentation; use encode_training_set otherwise".into())
        })?;
        let source = Source::Images {
            dataset,
            backbone,
            augment,
        };
        Self::build(config, source, backbone.config.n, backbone.config.d)
    }

    fn build(config: TrainConfig, source: Source<'a>, blocks: usize, dim: usize) -> Result<Self> {
        config.validate()?;
        let (head, mut loss) = config.effective();
        let input_ok = dim == head.d && (blocks == head.n || (head.last_block_only && blocks == 1));
        if !input_ok {
            return Err(Error::Shape(format!(
                "training data has {blocks} blocks of width {dim}, head expects n={} d={}",
                head.n, head.d
            )));
        }
        if source.len() == 0 {
            return Err(Error::Param("empty training set".into()));
        }
        let labels = source.labels();
        if labels.iter().all(|&y| y == labels[0]) && loss.xi > 0.0 {
            log::warn!("training set holds a single class; contrastive term disabled");
            loss.xi = 0.0;
        }
        let params = HeadParams::init(&head, &mut Rng::new(config.seed).derive("init"))?;
        let adam = AdamState::new(&params);
        let steps_per_epoch = source.len().div_ceil(config.batch_size);
        Ok(Self {
            config,
            head,
            loss,
            source,
            params,
            adam,
            history: Vec::new(),
            steps_per_epoch,
        })
    }

    pub fn total_steps(&self) -> u64 {
        (self.steps_per_epoch * self.config.epochs) as u64
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    pub fn params(&self) -> &HeadParams {
        &self.params
    }

    pub fn is_done(&self) -> bool {
        self.adam.step >= self.total_steps()
    }

    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.source.len()).collect();
        order.shuffle(&mut Rng::new(self.config.seed).derive(&format!("shuffle/{epoch}")));
        order
    }

    /// Runs one optimizer step.
    pub fn step_once(&mut self) -> Result<()> {
        if self.is_done() {
            return Ok(());
        }
        let step = self.adam.step;
        let epoch = (step as usize) / self.steps_per_epoch;
        let within = (step as usize) % self.steps_per_epoch;
        let order = self.epoch_order(epoch);
        let end = ((within + 1) * self.config.batch_size).min(order.len());
        let indices = &order[within * self.config.batch_size..end];
        let (k, labels) = self.source.batch(indices, epoch, self.config.seed)?;

        let mut dropout = Rng::new(self.config.seed).derive(&format!("dropout/{step}"));
        let out = head::forward(&k.values, &self.params, &self.head, Mode::Train, Some(&mut dropout))?;
        let loss = losses::evaluate(&self.loss, &out.logits, &out.features, &labels)?;
        let grads = head::backward(&out.trace, &self.params, &loss.grad_logits, loss.grad_features.as_ref())?;
        let lr = self.config.lr_at_epoch(epoch + 1);
        adam_step(&mut self.params, &grads, &mut self.adam, lr, &self.config.adam)?;
        self.history.push(StepRecord {
            step,
            ce_loss: f64::from(loss.losses.ce),
            cont_loss: f64::from(loss.losses.cont),
            lr,
        });
        if (step + 1).is_multiple_of(50) {
            log::info!("step {}/{}: ce {:.4}", step + 1, self.total_steps(), loss.losses.ce);
        }
        Ok(())
    }

    /// Steps until `limit` steps have been taken in total, or training ends.
    pub fn run_until(&mut self, limit: u64) -> Result<()> {
        while self.adam.step < limit.min(self.total_steps()) {
            self.step_once()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(u64::MAX)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            adam: self.adam.clone(),
            rng: Rng::new(self.config.seed).state(),
            config_digest: self.config.digest(),
            head: self.head.clone(),
            history: self.history.clone(),
        }
    }

    /// Restores a checkpoint written by a run with the same configuration.
    pub fn restore(&mut self, checkpoint: Checkpoint) -> Result<()> {
        if checkpoint.config_digest != self.config.digest() {
            return Err(Error::Param(
                "checkpoint was written with a different training configuration".into(),
            ));
        }
        if checkpoint.head != self.head || checkpoint.rng.seed != self.config.seed {
            return Err(Error::Param("checkpoint head or seed does not match this run".into()));
        }
        self.params = checkpoint.params;
        self.adam = checkpoint.adam;
        self.history = checkpoint.history;
        Ok(())
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            params: self.params,
            head: self.head,
            history: History { steps: self.history },
        }
    }
}

/// Encodes a training set with evaluation preprocessing (center crop only).
pub fn encode_training_set(dataset: &Dataset, backbone: &Backbone) -> Result<EncodedSet> {
    let side = backbone.config.image_side;
    encode_dataset(backbone, dataset, |s| preprocess_eval(s, side))
}

/// Full training run from a dataset. Without augmentation the set is encoded
/// once and cached (when `cache_features` is set) or re-encoded per step.
pub fn train(dataset: &Dataset, backbone: &Backbone, config: &TrainConfig) -> Result<TrainOutcome> {
    if config.augment.is_none() {
        let encoded = encode_training_set(dataset, backbone)?;
        if !config.cache_features {
            log::info!("augmentation is off; cached encoding is equivalent and used");
        }
        return train_encoded(&encoded, config);
    }
    let mut t = Trainer::from_images(config.clone(), dataset, backbone)?;
    t.run()?;
    Ok(t.finish())
}

pub fn train_encoded(encoded: &EncodedSet, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut t = Trainer::from_encoded(config.clone(), encoded)?;
    t.run()?;
    Ok(t.finish())
}

/// Accuracy and AP of a trained head on an encoded validation set.
pub fn validate(params: &HeadParams, head: &HeadConfig, val: &EncodedSet) -> Result<(f64, f64)> {
    let scores = score(params, head, &val.k)?;
    Ok((accuracy(&scores, &val.labels)?, average_precision(&scores, &val.labels)?))
}

/// Hyperparameter axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub xi: Vec<f64>,
    pub q: Vec<usize>,
    pub d_prime: Vec<usize>,
}

impl Grid {
    /// ξ ∈ {0.1, 0.2, 0.4, 0.8}, q ∈ {1, 2, 4}, d′ ∈ {128, 256, 512, 1024}.
    pub fn published() -> Self {
        Self {
            xi: vec![0.1, 0.2, 0.4, 0.8],
            q: vec![1, 2, 4],
            d_prime: vec![128, 256, 512, 1024],
        }
    }

    /// Every combination applied to `base`, in ξ-major order.
    pub fn configs(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &xi in &self.xi {
            for &q in &self.q {
                for &d_prime in &self.d_prime {
                    let mut c = base.clone();
                    c.loss.xi = xi;
                    c.head.q = q;
                    c.head.d_prime = d_prime;
                    out.push(c);
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub xi: f64,
    pub q: usize,
    pub d_prime: usize,
    pub acc: Option<f64>,
    pub ap: Option<f64>,
    pub error: Option<String>,
}

impl GridResult {
    pub fn selection_score(&self) -> Option<f64> {
        Some(self.acc? + self.ap?)
    }
}

/// Evaluates every config with `run` and ranks by ACC + AP (descending, ties
/// in grid order); failed configs are kept, last.
pub fn rank_grid<F>(configs: &[TrainConfig], run: F) -> Vec<GridResult>
where
    F: Fn(&TrainConfig) -> Result<(f64, f64)>,
{
    let mut results: Vec<GridResult> = configs
        .iter()
        .map(|c| {
            let r = run(c);
            if let Err(e) = &r {
                log::warn!("grid config ξ={} q={} d′={} failed: {e}", c.loss.xi, c.head.q, c.head.d_prime);
            }
            GridResult {
                xi: c.loss.xi,
                q: c.head.q,
                d_prime: c.head.d_prime,
                acc: r.as_ref().ok().map(|r| r.0),
                ap: r.as_ref().ok().map(|r| r.1),
                error: r.err().map(|e| e.to_string()),
            }
        })
        .collect();
    results.sort_by(|a, b| match (a.selection_score(), b.selection_score()) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    results
}

/// Trains every grid point with the base seed and ranks on `val`.
pub fn grid_search(
    train_set: &Dataset,
    val: &EncodedSet,
    backbone: &Backbone,
    base: &TrainConfig,
    grid: &Grid,
) -> Result<Vec<GridResult>> {
    let configs = grid.configs(base);
    let cached = match base.augment {
        None => Some(encode_training_set(train_set, backbone)?),
        Some(_) => None,
    };
    Ok(rank_grid(&configs, |c| {
        let outcome = match &cached {
            Some(enc) => train_encoded(enc, c)?,
            None => train(train_set, backbone, c)?,
        };
        validate(&outcome.params, &outcome.head, val)
    }))
}
