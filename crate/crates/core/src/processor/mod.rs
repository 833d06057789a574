//! Latent-sequence processor: per-channel window normalization, patch tokens,
//! prompt-aligned embeddings fed through the frozen backbone, training and
//! autoregressive rollout (optionally conditioned on demonstration patch pairs).

mod model;

pub use model::{
    batch_loss_and_grad, train_processor, ContextLayout, ProcessorCheckpoint, ProcessorConfig, ProcessorNet, RolloutOutput,
    PROC_MANIFEST_FILE,
};

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const REVIN_EPS: f64 = 1e-5;

/// Mean and guarded standard deviation of one window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RevinStats<T> {
    pub mean: T,
    pub std: T,
}

/// `(x − mean) / (σ + 1e−5)` with the population standard deviation `σ`.
pub fn revin_apply<T: Scalar>(segment: &[T]) -> (Vec<T>, RevinStats<T>) {
    let n = T::lit(segment.len().max(1) as f64);
    let mean = segment.iter().copied().sum::<T>() / n;
    let var = segment.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    let std = var.sqrt() + T::lit(REVIN_EPS);
    let out = segment.iter().map(|&x| (x - mean) / std).collect();
    (out, RevinStats { mean, std })
}

pub fn revin_invert<T: Scalar>(segment: &[T], stats: RevinStats<T>) -> Vec<T> {
    segment.iter().map(|&x| x * stats.std + stats.mean).collect()
}

/// Split into `⌊M/M_p⌋` consecutive patches, one per row. A trailing remainder is dropped.
pub fn patchify<T: Scalar>(segment: &[T], patch_len: usize) -> Result<Array2<T>> {
    if patch_len == 0 || segment.len() < patch_len {
        return Err(Error::shape(format!(
            "segment of length {} cannot hold a patch of length {patch_len}",
            segment.len()
        )));
    }
    let n = segment.len() / patch_len;
    if n * patch_len != segment.len() {
        log::warn!(
            "window length {} is not a multiple of patch length {patch_len}; dropping the last {} steps",
            segment.len(),
            segment.len() - n * patch_len
        );
    }
    Ok(Array2::from_shape_vec((n, patch_len), segment[..n * patch_len].to_vec()).expect("patch grid"))
}

pub fn unpatchify<T: Scalar>(patches: ArrayView2<T>) -> Vec<T> {
    patches.iter().copied().collect()
}

/// The `N` prompt texts describing each patch of a lookback window.
pub fn prompt_texts(window: usize, patch_len: usize, dt: f64) -> Vec<String> {
    let n = window / patch_len;
    (1..=n)
        .map(|j| {
            let a = (j - 1) * patch_len + 1;
            let b = j * patch_len;
            format!(
                "This patch covers time steps {a} to {b} of a lookback window of {window} steps sampled every {dt} time units; patch {j} of {n}."
            )
        })
        .collect()
}

/// Prompt texts and their backbone embeddings `k`, one row per patch position.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank<T> {
    pub texts: Vec<String>,
    pub embeddings: Array2<T>,
}

pub fn build_prompt_bank<T: Scalar>(
    window: usize,
    patch_len: usize,
    dt: f64,
    backbone: &Backbone<T>,
) -> Result<PromptBank<T>> {
    let texts = prompt_texts(window, patch_len, dt);
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let embeddings = backbone.embed_text_last_token(&refs)?;
    Ok(PromptBank { texts, embeddings })
}

/// `e = s + γ·k` row by row; `s` and `k` are `(N, D_e)`.
pub fn align<T: Scalar>(s: ArrayView2<T>, k: ArrayView2<T>, gamma: T) -> Result<Array2<T>> {
    if s.dim() != k.dim() {
        return Err(Error::shape(format!("embeddings {:?} vs prompts {:?}", s.dim(), k.dim())));
    }
    let mut e = s.to_owned();
    e.zip_mut_with(&k, |e, &k| *e += gamma * k);
    Ok(e)
}

/// `1/(D·N) Σ_i Σ_j ‖ẑ_ij − z_ij‖²` over `(D, N, M_p)` arrays.
pub fn processor_loss<T: Scalar>(pred: ArrayView3<T>, target: ArrayView3<T>) -> Result<T> {
    if pred.dim() != target.dim() {
        return Err(Error::shape(format!("{:?} vs {:?}", pred.dim(), target.dim())));
    }
    let (d, n, _) = pred.dim();
    let sq = pred.iter().zip(target.iter()).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>();
    Ok(sq / T::lit((d * n) as f64))
}

/// `n` demonstration pairs per channel from one contiguous segment of `2n` patches.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextSet<T> {
    pub n: usize,
    /// `(D, n, M_p)`: patch `j` of the segment.
    pub preceding: Array3<T>,
    /// `(D, n, M_p)`: patch `n + j` of the segment.
    pub subsequent: Array3<T>,
}

impl<T: Scalar> ContextSet<T> {
    pub fn channels(&self) -> usize {
        self.preceding.dim().0
    }

    pub fn patch_len(&self) -> usize {
        self.preceding.dim().2
    }

    /// The raw segment of channel `i`, `2n·M_p` long.
    pub fn segment(&self, i: usize) -> Vec<T> {
        let mut seg: Vec<T> = self.preceding.index_axis(ndarray::Axis(0), i).iter().copied().collect();
        seg.extend(self.subsequent.index_axis(ndarray::Axis(0), i).iter().copied());
        seg
    }
}

/// Pair patch `j` with patch `n + j` of a `(D, 2n·M_p)` segment.
pub fn build_context_set<T: Scalar>(segment: ArrayView2<T>, n: usize, patch_len: usize) -> Result<ContextSet<T>> {
    let (d, len) = segment.dim();
    if n == 0 || patch_len == 0 || len != 2 * n * patch_len {
        return Err(Error::shape(format!(
            "context segment has {len} steps, {n} pairs of length-{patch_len} patches need {}",
            2 * n * patch_len
        )));
    }
    let mut preceding = Array3::zeros((d, n, patch_len));
    let mut subsequent = Array3::zeros((d, n, patch_len));
    for i in 0..d {
        for j in 0..n {
            for t in 0..patch_len {
                preceding[[i, j, t]] = segment[[i, j * patch_len + t]];
                subsequent[[i, j, t]] = segment[[i, (n + j) * patch_len + t]];
            }
        }
    }
    Ok(ContextSet { n, preceding, subsequent })
}
