//! Trainable detection head: shared per-block projection, importance-weighted
//! block fusion, second projection and classifier, with an exact hand-written
//! backward pass.
//!
//! Shapes for a batch of `b` CLS stacks with `n` blocks of width `d`:
//!
//! ```text
//! K        b×n×d   ──Q1 (q layers, shared across blocks)──▶ Kq   b×n×d′
//! S = softmax(A) over blocks, per feature column             S    n×d′
//! K̃[b,k] = Σ_l S[l,k]·Kq[b,l,k]                              K̃    b×d′
//! K̃_q = Q2(K̃)                                                     b×d′   (contrastive features)
//! logit = W3·relu(W2·relu(W1·K̃_q + c1) + c2) + c3                 b
//! ```
//!
//! Every projection layer is `relu(x·W + b)` followed by dropout in training
//! mode. Weights are stored `in × out`.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::rng::Rng;
use crate::tensor::{self, matmul, matmul_at, matmul_bt, Scalar, Tensor};
use crate::{Error, Result};

pub const CONTAINER_KIND: &str = "head";

/// Standard deviation of the importance logits at initialization.
pub const IMPORTANCE_INIT_STD: f64 = 0.02;

fn default_dropout() -> f64 {
    0.5
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Number of backbone blocks feeding the head.
    pub n: usize,
    /// Backbone width.
    pub d: usize,
    /// Projected width.
    pub d_prime: usize,
    /// Depth of each projection network.
    pub q: usize,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    /// When false, blocks are fused with fixed uniform weights `1/n`.
    #[serde(default = "default_true")]
    pub use_tie: bool,
    /// Use only the final block's CLS token.
    #[serde(default)]
    pub last_block_only: bool,
}

impl HeadConfig {
    pub fn new(n: usize, d: usize, d_prime: usize, q: usize) -> Self {
        Self {
            n,
            d,
            d_prime,
            q,
            dropout_rate: default_dropout(),
            use_tie: true,
            last_block_only: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 || self.d_prime == 0 || self.q == 0 {
            return Err(Error::Param(format!("head config needs n, d, d′, q ≥ 1: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Param(format!("dropout rate {} not in [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    /// Blocks the head actually sees.
    pub fn blocks(&self) -> usize {
        if self.last_block_only {
            1
        } else {
            self.n
        }
    }
}

/// Closed-form number of trainable scalars.
pub fn param_count(config: &HeadConfig) -> usize {
    let (d, dp, q) = (config.d, config.d_prime, config.q);
    let square = dp * dp + dp;
    let q1 = (d * dp + dp) + (q - 1) * square;
    let q2 = q * square;
    let tie = config.blocks() * dp;
    let head = 2 * square + (dp + 1);
    q1 + q2 + tie + head
}

/// `x·W + b` with `W: in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Dense<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = matmul(x, &self.weight)?;
        y.add_row_vector(&self.bias)?;
        Ok(y)
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }
}

/// All trainable state. Gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T: Scalar = f32> {
    pub q1: Vec<Dense<T>>,
    /// Importance logits `A`, `blocks × d′`.
    pub importance: Tensor<T>,
    pub q2: Vec<Dense<T>>,
    /// Two `d′×d′` ReLU layers and the `d′×1` output layer.
    pub classifier: Vec<Dense<T>>,
}

pub type HeadGradients<T = f32> = HeadParams<T>;

impl<T: Scalar> HeadParams<T> {
    /// Weights uniform in `±1/√fan_in`, biases zero, importance logits
    /// `N(0, 0.02²)`.
    pub fn init(config: &HeadConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let dp = config.d_prime;
        let mut dense = |inp: usize, out: usize| {
            let bound = 1.0 / (inp as f64).sqrt();
            Dense {
                weight: Tensor::from_fn(&[inp, out], |_| T::from_f64c(rng.random_range(-bound..bound))),
                bias: Tensor::zeros(&[out]),
            }
        };
        let q1 = (0..config.q)
            .map(|m| dense(if m == 0 { config.d } else { dp }, dp))
            .collect();
        let q2 = (0..config.q).map(|_| dense(dp, dp)).collect();
        let classifier = vec![dense(dp, dp), dense(dp, dp), dense(dp, 1)];
        let normal = Normal::new(0.0, IMPORTANCE_INIT_STD).expect("positive std");
        let importance = Tensor::from_fn(&[config.blocks(), dp], |_| T::from_f64c(normal.sample(rng)));
        Ok(Self {
            q1,
            importance,
            q2,
            classifier,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            q1: self.q1.iter().map(Dense::zeros_like).collect(),
            importance: Tensor::zeros(self.importance.shape()),
            q2: self.q2.iter().map(Dense::zeros_like).collect(),
            classifier: self.classifier.iter().map(Dense::zeros_like).collect(),
        }
    }

    /// Every tensor with its stable name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        fn dense<'a, T: Scalar>(prefix: &str, layers: &'a [Dense<T>], out: &mut Vec<(String, &'a Tensor<T>)>) {
            for (i, l) in layers.iter().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), &l.weight));
                out.push((format!("{prefix}.{i}.bias"), &l.bias));
            }
        }
        let mut out = Vec::new();
        dense("q1", &self.q1, &mut out);
        out.push(("tie.importance".to_string(), &self.importance));
        dense("q2", &self.q2, &mut out);
        dense("classifier", &self.classifier, &mut out);
        out
    }

    /// Mutable counterpart of [`named`](Self::named), same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in &mut self.q1 {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.importance);
        for l in self.q2.iter_mut().chain(self.classifier.iter_mut()) {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> HeadParams<U> {
        let dense = |l: &Dense<T>| Dense {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
        };
        HeadParams {
            q1: self.q1.iter().map(dense).collect(),
            importance: self.importance.cast(),
            q2: self.q2.iter().map(dense).collect(),
            classifier: self.classifier.iter().map(dense).collect(),
        }
    }

    fn check(&self, config: &HeadConfig) -> Result<()> {
        let dp = config.d_prime;
        let expect = |t: &Tensor<T>, shape: &[usize], name: &str| t.expect_shape(shape, name);
        if self.q1.len() != config.q || self.q2.len() != config.q || self.classifier.len() != 3 {
            return Err(Error::Shape(format!(
                "head layer counts q1={} q2={} classifier={} for q={}",
                self.q1.len(),
                self.q2.len(),
                self.classifier.len(),
                config.q
            )));
        }
        for (m, l) in self.q1.iter().enumerate() {
            expect(&l.weight, &[if m == 0 { config.d } else { dp }, dp], "q1 weight")?;
        }
        for l in &self.q2 {
            expect(&l.weight, &[dp, dp], "q2 weight")?;
        }
        expect(&self.importance, &[config.blocks(), dp], "importance")?;
        expect(&self.classifier[2].weight, &[dp, 1], "classifier output")?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
struct LayerCache<T: Scalar> {
    input: Tensor<T>,
    /// ReLU output before dropout.
    activated: Tensor<T>,
    mask: Option<Tensor<T>>,
}

/// Activations cached by [`forward`] for [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardTrace<T: Scalar = f32> {
    batch: usize,
    blocks: usize,
    use_tie: bool,
    q1: Vec<LayerCache<T>>,
    /// Fusion weights actually used, `blocks × d′`.
    pub block_weights: Tensor<T>,
    /// Q1 output, `(b·blocks) × d′`.
    kq: Tensor<T>,
    /// Fused representation `K̃`, `b × d′`.
    pub fused: Tensor<T>,
    q2: Vec<LayerCache<T>>,
    classifier_inputs: [Tensor<T>; 3],
}

#[derive(Clone, Debug)]
pub struct HeadOutput<T: Scalar = f32> {
    /// Raw logits, length `b`.
    pub logits: Tensor<T>,
    /// `K̃_q`, the Q2 output fed to the contrastive loss, `b × d′`.
    pub features: Tensor<T>,
    pub trace: ForwardTrace<T>,
}

fn projection<T: Scalar>(
    layers: &[Dense<T>],
    mut x: Tensor<T>,
    mode: Mode,
    rate: f64,
    rng: &mut Option<&mut Rng>,
) -> Result<(Tensor<T>, Vec<LayerCache<T>>)> {
    let mut caches = Vec::with_capacity(layers.len());
    for layer in layers {
        let activated = tensor::relu(&layer.forward(&x)?);
        let (out, mask) = match (mode, rng.as_deref_mut()) {
            (Mode::Train, Some(r)) => {
                let mask = tensor::dropout_mask(r, activated.shape(), rate)?;
                (activated.mul(&mask)?, Some(mask))
            }
            (Mode::Train, None) => return Err(Error::Param("train-mode forward needs an rng".into())),
            (Mode::Eval, _) => (activated.clone(), None),
        };
        caches.push(LayerCache {
            input: x,
            activated,
            mask,
        });
        x = out;
    }
    Ok((x, caches))
}

fn projection_backward<T: Scalar>(
    layers: &[Dense<T>],
    caches: &[LayerCache<T>],
    grads: &mut [Dense<T>],
    mut upstream: Tensor<T>,
) -> Result<Tensor<T>> {
    for ((layer, cache), grad) in layers.iter().zip(caches).zip(grads.iter_mut()).rev() {
        if let Some(mask) = &cache.mask {
            upstream = upstream.mul(mask)?;
        }
        let d_pre = upstream.zip_map(&cache.activated, |g, a| if a > T::zero() { g } else { T::zero() })?;
        grad.weight = matmul_at(&cache.input, &d_pre)?;
        grad.bias = d_pre.sum_rows();
        upstream = matmul_bt(&d_pre, &layer.weight)?;
    }
    Ok(upstream)
}

/// Head forward pass. `k` is `b × n × d`; in last-block-only mode `b × 1 × d`
/// is expected, and a full `b × n × d` stack is sliced to its last block.
pub fn forward<T: Scalar>(
    k: &Tensor<T>,
    params: &HeadParams<T>,
    config: &HeadConfig,
    mode: Mode,
    rng: Option<&mut Rng>,
) -> Result<HeadOutput<T>> {
    config.validate()?;
    params.check(config)?;
    let [b, n, d] = k.shape() else {
        return Err(Error::Shape(format!("head input must be b×n×d, got {:?}", k.shape())));
    };
    let (b, n, d) = (*b, *n, *d);
    if d != config.d {
        return Err(Error::Shape(format!("head input width {d}, config d={}", config.d)));
    }
    let blocks = config.blocks();
    let input = if n == blocks {
        k.clone().reshape(&[b * n, d])?
    } else if config.last_block_only && n == config.n {
        let mut data = Vec::with_capacity(b * d);
        for i in 0..b {
            data.extend_from_slice(&k.data()[(i * n + n - 1) * d..(i * n + n) * d]);
        }
        Tensor::new(vec![b, d], data)?
    } else {
        return Err(Error::Shape(format!(
            "head input has {n} blocks, config expects {blocks}"
        )));
    };

    let mut rng = rng;
    let rate = config.dropout_rate;
    let (kq, q1) = projection(&params.q1, input, mode, rate, &mut rng)?;

    let dp = config.d_prime;
    let block_weights = if config.use_tie {
        tensor::softmax(&params.importance, 0)?
    } else {
        Tensor::full(&[blocks, dp], T::one() / T::from_usize(blocks).expect("usize fits"))
    };
    let mut fused = Tensor::zeros(&[b, dp]);
    for i in 0..b {
        let out = fused.row_mut(i);
        for l in 0..blocks {
            let src = kq.row(i * blocks + l);
            for ((o, &x), &w) in out.iter_mut().zip(src).zip(block_weights.row(l)) {
                *o = *o + w * x;
            }
        }
    }

    let (features, q2) = projection(&params.q2, fused.clone(), mode, rate, &mut rng)?;

    let c = &params.classifier;
    let h1 = tensor::relu(&c[0].forward(&features)?);
    let h2 = tensor::relu(&c[1].forward(&h1)?);
    let logits = c[2].forward(&h2)?.reshape(&[b])?;

    Ok(HeadOutput {
        logits,
        features: features.clone(),
        trace: ForwardTrace {
            batch: b,
            blocks,
            use_tie: config.use_tie,
            q1,
            block_weights,
            kq,
            fused,
            q2,
            classifier_inputs: [features, h1, h2],
        },
    })
}

/// Exact gradients of `Σ grad_logits·logits + Σ grad_features·features` with
/// respect to every head parameter. Dropout masks are reused from the trace.
pub fn backward<T: Scalar>(
    trace: &ForwardTrace<T>,
    params: &HeadParams<T>,
    grad_logits: &Tensor<T>,
    grad_features: Option<&Tensor<T>>,
) -> Result<HeadGradients<T>> {
    let b = trace.batch;
    grad_logits.expect_shape(&[b], "logit gradient")?;
    if params.q1.len() != trace.q1.len() || params.q2.len() != trace.q2.len() {
        return Err(Error::Shape("trace was produced with a different head depth".into()));
    }
    let mut grads = params.zeros_like();
    let c = &params.classifier;
    let [features, h1, h2] = &trace.classifier_inputs;

    // classifier
    let g_out = grad_logits.clone().reshape(&[b, 1])?;
    grads.classifier[2].weight = matmul_at(h2, &g_out)?;
    grads.classifier[2].bias = g_out.sum_rows();
    let relu_back = |g: Tensor<T>, act: &Tensor<T>| g.zip_map(act, |g, a| if a > T::zero() { g } else { T::zero() });
    let g_h2 = relu_back(matmul_bt(&g_out, &c[2].weight)?, h2)?;
    grads.classifier[1].weight = matmul_at(h1, &g_h2)?;
    grads.classifier[1].bias = g_h2.sum_rows();
    let g_h1 = relu_back(matmul_bt(&g_h2, &c[1].weight)?, h1)?;
    grads.classifier[0].weight = matmul_at(features, &g_h1)?;
    grads.classifier[0].bias = g_h1.sum_rows();
    let mut g_features = matmul_bt(&g_h1, &c[0].weight)?;
    if let Some(gf) = grad_features {
        gf.expect_shape(features.shape(), "feature gradient")?;
        g_features.add_assign(gf)?;
    }

    let g_fused = projection_backward(&params.q2, &trace.q2, &mut grads.q2, g_features)?;

    // fusion: K̃[i,k] = Σ_l S[l,k] Kq[i,l,k]
    let (blocks, dp) = (trace.blocks, g_fused.last_dim());
    let s = &trace.block_weights;
    let mut g_kq = Tensor::zeros(trace.kq.shape());
    let mut g_s = Tensor::<T>::zeros(&[blocks, dp]);
    for i in 0..b {
        let gf = g_fused.row(i);
        for l in 0..blocks {
            let row = i * blocks + l;
            let kq = trace.kq.row(row);
            for (k, &g) in gf.iter().enumerate() {
                g_kq.row_mut(row)[k] = s.row(l)[k] * g;
                g_s.row_mut(l)[k] = g_s.row(l)[k] + kq[k] * g;
            }
        }
    }
    if trace.use_tie {
        // softmax Jacobian per column: dA = S ⊙ (dS − Σ_l S ⊙ dS)
        for k in 0..dp {
            let dot: T = (0..blocks).map(|l| s.row(l)[k] * g_s.row(l)[k]).sum();
            for l in 0..blocks {
                grads.importance.row_mut(l)[k] = s.row(l)[k] * (g_s.row(l)[k] - dot);
            }
        }
    }

    projection_backward(&params.q1, &trace.q1, &mut grads.q1, g_kq)?;
    Ok(grads)
}

pub fn save_head(params: &HeadParams, config: &HeadConfig, path: impl AsRef<Path>) -> Result<()> {
    head_container(params, config).write(path)
}

pub fn head_container(params: &HeadParams, config: &HeadConfig) -> Container {
    let mut c = Container::new(
        CONTAINER_KIND,
        serde_json::to_value(config).expect("head config serializes"),
    );
    for (name, t) in params.named() {
        c.insert(name, t.clone());
    }
    c
}

pub fn load_head(path: impl AsRef<Path>) -> Result<(HeadConfig, HeadParams)> {
    head_from_container(Container::read(path)?)
}

/// Like [`load_head`], but fails unless the stored config equals `expected`.
pub fn load_head_expecting(path: impl AsRef<Path>, expected: &HeadConfig) -> Result<HeadParams> {
    let (config, params) = load_head(path)?;
    if &config != expected {
        return Err(Error::container(
            "config",
            format!("checkpoint holds {config:?}, expected {expected:?}"),
        ));
    }
    Ok(params)
}

pub fn head_from_container(mut c: Container) -> Result<(HeadConfig, HeadParams)> {
    c.expect_kind(CONTAINER_KIND)?;
    let config: HeadConfig = serde_json::from_value(c.config.clone())
        .map_err(|e| Error::container("config", e.to_string()))?;
    config
        .validate()
        .map_err(|e| Error::container("config", e.to_string()))?;
    let params = take_params(&mut c, &config, "")?;
    c.expect_consumed()?;
    Ok((config, params))
}

/// Reads a full parameter set named `{prefix}{name}` out of `c`.
pub(crate) fn take_params(c: &mut Container, config: &HeadConfig, prefix: &str) -> Result<HeadParams> {
    let dp = config.d_prime;
    let mut dense = |name: String, inp: usize, out: usize| -> Result<Dense> {
        Ok(Dense {
            weight: c.take(&format!("{prefix}{name}.weight"), &[inp, out])?,
            bias: c.take(&format!("{prefix}{name}.bias"), &[out])?,
        })
    };
    let q1 = (0..config.q)
        .map(|m| dense(format!("q1.{m}"), if m == 0 { config.d } else { dp }, dp))
        .collect::<Result<_>>()?;
    let q2 = (0..config.q)
        .map(|m| dense(format!("q2.{m}"), dp, dp))
        .collect::<Result<_>>()?;
    let classifier = vec![
        dense("classifier.0".into(), dp, dp)?,
        dense("classifier.1".into(), dp, dp)?,
        dense("classifier.2".into(), dp, 1)?,
    ];
    let importance = c.take(&format!("{prefix}tie.importance"), &[config.blocks(), dp])?;
    Ok(HeadParams {
        q1,
        importance,
        q2,
        classifier,
    })
}
