//! Glue between datasets, the frozen backbone and the head: encode a dataset
//! into its CLS stack once, then score it with a head.

use rayon::prelude::*;

use crate::data::{stack, Dataset, ImageSample};
use crate::head::{self, HeadConfig, HeadParams, Mode};
use crate::tensor::Tensor;
use crate::vit::{Backbone, RineTensorK};
use crate::Result;

/// Images decoded, transformed and encoded per backbone call.
pub const ENCODE_CHUNK: usize = 64;

/// A dataset after the frozen backbone: `K` for every decodable image.
#[derive(Clone, Debug)]
pub struct EncodedSet {
    pub k: RineTensorK,
    pub labels: Vec<u8>,
    pub ids: Vec<String>,
    /// Undecodable files that were skipped.
    pub skipped: usize,
}

impl EncodedSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Result<(RineTensorK, Vec<u8>)> {
        Ok((self.k.select(indices)?, indices.iter().map(|&i| self.labels[i]).collect()))
    }
}

/// Decodes, transforms (per sample, in parallel) and encodes every image.
/// `transform` must map each sample to the encoder's input side.
pub fn encode_dataset<F>(backbone: &Backbone, dataset: &Dataset, transform: F) -> Result<EncodedSet>
where
    F: Fn(&ImageSample) -> Result<ImageSample> + Sync,
{
    let mut parts = Vec::new();
    let (mut labels, mut ids) = (Vec::new(), Vec::new());
    let mut batches = dataset.batches(ENCODE_CHUNK);
    for batch in batches.by_ref() {
        let ready: Vec<ImageSample> = batch.par_iter().map(&transform).collect::<Result<_>>()?;
        parts.push(backbone.encode_pixels(&stack(&ready)?)?);
        labels.extend(ready.iter().map(|s| s.label));
        ids.extend(ready.into_iter().map(|s| s.id));
    }
    let skipped = batches.skipped();
    if parts.is_empty() {
        return Err(crate::Error::dataset(&dataset.root, "no decodable images"));
    }
    Ok(EncodedSet {
        k: RineTensorK::concat(&parts)?,
        labels,
        ids,
        skipped,
    })
}

/// Fake-class probabilities `σ(logit)` for every row of `k`, in eval mode.
pub fn score(params: &HeadParams, config: &HeadConfig, k: &RineTensorK) -> Result<Vec<f64>> {
    let b = k.batch();
    let mut out = Vec::with_capacity(b);
    for start in (0..b).step_by(ENCODE_CHUNK * 4) {
        let idx: Vec<usize> = (start..(start + ENCODE_CHUNK * 4).min(b)).collect();
        let part = k.select(&idx)?;
        let logits = head::forward(&part.values, params, config, Mode::Eval, None)?.logits;
        out.extend(logits.data().iter().map(|&z| sigmoid(f64::from(z))));
    }
    Ok(out)
}

/// Projected features `K̃_q` (eval mode), `b × d′`.
pub fn features(params: &HeadParams, config: &HeadConfig, k: &RineTensorK) -> Result<Tensor> {
    Ok(head::forward(&k.values, params, config, Mode::Eval, None)?.features)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
