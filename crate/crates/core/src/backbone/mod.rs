//! Frozen causal sequence model used as the temporal processor's core.
//!
//! The default backbone is a small pre-LN transformer with learned absolute
//! positions and a byte-level tokenizer, randomly initialized from a seed and then
//! frozen. Only a low-rank adapter on the query projections can be trained.

mod lora;
mod transformer;

pub use lora::{LoraAdapter, LoraConfig};
pub use transformer::ForwardCache;

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{read_json, write_json};
use crate::error::{Error, Result};
use crate::nn::{fill_normal, load_params, save_params, LayerNorm, Layout, ParamBlob};
use crate::scalar::{checksum, Scalar};
use transformer::{stack, unstack, Block, Geometry, Transformer};

pub const BACKBONE_MANIFEST_FILE: &str = "backbone_manifest.json";
const BACKBONE_PARAMS_FILE: &str = "backbone_params.bin";
const BACKBONE_SCHEMA_VERSION: u32 = 1;

pub const EOS_ID: usize = 256;
pub const PAD_ID: usize = 257;
pub const VOCAB_SIZE: usize = 258;

/// Byte-level tokenizer: one id per UTF-8 byte, then `EOS`.
pub fn tokenize(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).chain(std::iter::once(EOS_ID)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSpec {
    pub d_embed: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub max_positions: usize,
    pub seed: u64,
    /// Directory of a saved backbone; scratch initialization when absent.
    pub checkpoint: Option<PathBuf>,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            d_embed: 256,
            n_layers: 4,
            n_heads: 4,
            mlp_ratio: 4,
            max_positions: 512,
            seed: 0,
            checkpoint: None,
        }
    }
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d_embed == 0 || self.n_layers == 0 || self.n_heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("backbone dimensions must be positive"));
        }
        if !self.d_embed.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "backbone.d_embed {} is not divisible by n_heads {}",
                self.d_embed, self.n_heads
            )));
        }
        if self.max_positions == 0 {
            return Err(Error::config("backbone.max_positions must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TokenizerSpec {
    kind: String,
    vocab_size: usize,
    eos_id: usize,
    pad_id: usize,
    padding: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BackboneManifest {
    schema_version: u32,
    source: String,
    d_embed: usize,
    n_layers: usize,
    n_heads: usize,
    mlp_ratio: usize,
    max_positions: usize,
    seed: u64,
    tokenizer: TokenizerSpec,
    position_encoding: String,
    normalization: String,
    activation: String,
    initialization: String,
    params: ParamBlob,
}

/// Frozen transformer plus an optional trainable adapter.
#[derive(Debug, Clone)]
pub struct Backbone<T> {
    spec: BackboneSpec,
    source: String,
    layout: Layout,
    params: Vec<T>,
    wte: usize,
    wpe: usize,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    lora: Option<LoraAdapter<T>>,
}

fn build_layout(spec: &BackboneSpec) -> (Layout, usize, usize, Vec<Block>, LayerNorm) {
    let d = spec.d_embed;
    let mut layout = Layout::new();
    let wte = layout.add("wte", &[VOCAB_SIZE, d]);
    let wpe = layout.add("wpe", &[spec.max_positions, d]);
    let blocks = (0..spec.n_layers)
        .map(|i| Block::new(&mut layout, i, d, spec.mlp_ratio * d))
        .collect();
    let ln_f = LayerNorm::new(&mut layout, "ln_f", d);
    (layout, wte, wpe, blocks, ln_f)
}

/// Build a frozen backbone from a seed, or load one saved with [`Backbone::save`].
pub fn load_or_init_backbone<T: Scalar>(spec: &BackboneSpec) -> Result<Backbone<T>> {
    spec.validate()?;
    match &spec.checkpoint {
        Some(dir) => Backbone::load(dir, spec),
        None => Ok(Backbone::scratch(spec)),
    }
}

impl<T: Scalar> Backbone<T> {
    fn scratch(spec: &BackboneSpec) -> Self {
        let (layout, wte, wpe, blocks, ln_f) = build_layout(spec);
        let mut params = vec![T::zero(); layout.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let residual_std = 0.02 / (2.0 * spec.n_layers as f64).sqrt();
        for e in &layout.entries {
            let dst = &mut params[e.range()];
            let name = e.name.as_str();
            if name == "wpe" {
                fill_normal(dst, 0.01, &mut rng);
            } else if name.contains("ln_") {
                let v = if name.ends_with(".weight") { T::one() } else { T::zero() };
                dst.fill(v);
            } else if name.ends_with(".bias") {
                dst.fill(T::zero());
            } else if name.ends_with("out_proj.weight") || name.ends_with("fc_out.weight") {
                fill_normal(dst, residual_std, &mut rng);
            } else {
                fill_normal(dst, 0.02, &mut rng);
            }
        }
        let mut resolved = spec.clone();
        resolved.checkpoint = None;
        Self {
            source: format!("scratch-frozen({})", spec.seed),
            spec: resolved,
            layout,
            params,
            wte,
            wpe,
            blocks,
            ln_f,
            lora: None,
        }
    }

    fn load(dir: &Path, spec: &BackboneSpec) -> Result<Self> {
        let m: BackboneManifest = read_json(&dir.join(BACKBONE_MANIFEST_FILE))?;
        if m.schema_version != BACKBONE_SCHEMA_VERSION {
            return Err(Error::data(format!("unsupported backbone schema version {}", m.schema_version)));
        }
        if (m.d_embed, m.n_layers, m.n_heads) != (spec.d_embed, spec.n_layers, spec.n_heads) {
            return Err(Error::config(format!(
                "backbone checkpoint is D_e={} L={} H={}, configuration asks for D_e={} L={} H={}",
                m.d_embed, m.n_layers, m.n_heads, spec.d_embed, spec.n_layers, spec.n_heads
            )));
        }
        let resolved = BackboneSpec {
            d_embed: m.d_embed,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            mlp_ratio: m.mlp_ratio,
            max_positions: m.max_positions,
            seed: m.seed,
            checkpoint: Some(dir.to_path_buf()),
        };
        resolved.validate()?;
        let (layout, wte, wpe, blocks, ln_f) = build_layout(&resolved);
        if m.params.len != layout.len() {
            return Err(Error::data(format!(
                "backbone blob has {} values, architecture needs {}",
                m.params.len,
                layout.len()
            )));
        }
        let params = load_params(dir, &m.params)?;
        Ok(Self {
            source: format!("checkpoint({})", dir.display()),
            spec: resolved,
            layout,
            params,
            wte,
            wpe,
            blocks,
            ln_f,
            lora: None,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let params = save_params(dir, BACKBONE_PARAMS_FILE, &self.params)?;
        let s = &self.spec;
        let manifest = BackboneManifest {
            schema_version: BACKBONE_SCHEMA_VERSION,
            source: self.source.clone(),
            d_embed: s.d_embed,
            n_layers: s.n_layers,
            n_heads: s.n_heads,
            mlp_ratio: s.mlp_ratio,
            max_positions: s.max_positions,
            seed: s.seed,
            tokenizer: TokenizerSpec {
                kind: "byte".into(),
                vocab_size: VOCAB_SIZE,
                eos_id: EOS_ID,
                pad_id: PAD_ID,
                padding: "left".into(),
            },
            position_encoding: "learned-absolute".into(),
            normalization: "pre-layernorm".into(),
            activation: "gelu-tanh".into(),
            initialization: "normal(0, 0.02); residual projections normal(0, 0.02/sqrt(2L)); positions normal(0, 0.01)".into(),
            params,
        };
        write_json(&dir.join(BACKBONE_MANIFEST_FILE), &manifest)
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn d_embed(&self) -> usize {
        self.spec.d_embed
    }

    pub fn n_layers(&self) -> usize {
        self.spec.n_layers
    }

    pub fn context_length(&self) -> usize {
        self.spec.max_positions
    }

    pub fn num_params(&self) -> usize {
        self.layout.len()
    }

    /// SHA-256 of the frozen weights.
    pub fn base_checksum(&self) -> String {
        checksum(&self.params)
    }

    pub fn attach_lora(mut self, adapter: LoraAdapter<T>) -> Result<Self> {
        if adapter.d_embed != self.d_embed() || adapter.layers != self.n_layers() {
            return Err(Error::shape(format!(
                "adapter built for D_e={} with {} layers, backbone has D_e={} with {} layers",
                adapter.d_embed,
                adapter.layers,
                self.d_embed(),
                self.n_layers()
            )));
        }
        self.lora = Some(adapter);
        Ok(self)
    }

    pub fn lora(&self) -> Option<&LoraAdapter<T>> {
        self.lora.as_ref()
    }

    pub fn lora_mut(&mut self) -> Option<&mut LoraAdapter<T>> {
        self.lora.as_mut()
    }

    fn net(&self) -> Transformer<'_, T> {
        Transformer {
            blocks: &self.blocks,
            ln_f: &self.ln_f,
            heads: self.spec.n_heads,
            base: &self.params,
            lora: self.lora.as_ref(),
        }
    }

    fn pos_row(&self, i: usize) -> ArrayView2<'_, T> {
        let d = self.d_embed();
        ArrayView2::from_shape((1, d), &self.params[self.wpe + i * d..self.wpe + (i + 1) * d]).unwrap()
    }

    fn check_input(&self, l: usize, d: usize) -> Result<()> {
        if d != self.d_embed() {
            return Err(Error::shape(format!("embeddings have width {d}, backbone expects {}", self.d_embed())));
        }
        if l == 0 || l > self.context_length() {
            return Err(Error::shape(format!(
                "sequence length {l} outside 1..={}",
                self.context_length()
            )));
        }
        Ok(())
    }

    /// `(B·L, D)` inputs with position embeddings added after the padding of each sequence.
    fn with_positions(&self, mut x: Array2<T>, geom: &Geometry) -> Array2<T> {
        for b in 0..geom.b {
            for i in geom.pads[b]..geom.l {
                let mut row = x.slice_mut(s![b * geom.l + i..b * geom.l + i + 1, ..]);
                row += &self.pos_row(i - geom.pads[b]);
            }
        }
        x
    }

    /// Final hidden states for continuous inputs `(L, D)`, one row per position.
    pub fn forward_embeddings(&self, e: ArrayView2<T>) -> Result<Array2<T>> {
        let (l, d) = e.dim();
        let out = self.forward_batch(e.into_shape_with_order((1, l, d)).map_err(|_| Error::shape("non-contiguous input"))?)?;
        Ok(out.index_axis_move(ndarray::Axis(0), 0))
    }

    /// Batched variant over `(B, L, D)`.
    pub fn forward_batch(&self, e: ArrayView3<T>) -> Result<Array3<T>> {
        let (b, l, d) = e.dim();
        self.check_input(l, d)?;
        let geom = Geometry { b, l, pads: vec![0; b] };
        let x = self.with_positions(stack(e), &geom);
        let (out, _) = self.net().forward(x, geom, false);
        Ok(unstack(out, b, l))
    }

    /// Forward pass that keeps activations for [`Backbone::backward`].
    pub fn forward_train(&self, e: ArrayView3<T>) -> Result<(Array3<T>, ForwardCache<T>)> {
        let (b, l, d) = e.dim();
        self.check_input(l, d)?;
        let geom = Geometry { b, l, pads: vec![0; b] };
        let x = self.with_positions(stack(e), &geom);
        let (out, cache) = self.net().forward(x, geom, true);
        Ok((unstack(out, b, l), cache.expect("cache requested")))
    }

    /// Gradient with respect to the input embeddings. Adapter gradients, laid out like
    /// the adapter's parameters, accumulate into `lora_grad` when given.
    pub fn backward(&self, cache: &ForwardCache<T>, dout: ArrayView3<T>, lora_grad: Option<&mut [T]>) -> Array3<T> {
        let (b, l, _) = dout.dim();
        let dx = self.net().backward(cache, stack(dout).view(), lora_grad);
        unstack(dx, b, l)
    }

    /// Hidden state at the end-of-sequence token of each text, one row per text.
    /// Texts are left-padded to a common length and padding is masked from attention.
    pub fn embed_text_last_token(&self, texts: &[&str]) -> Result<Array2<T>> {
        if texts.is_empty() {
            return Err(Error::data("no texts to embed"));
        }
        let tokens: Vec<Vec<usize>> = texts.iter().map(|t| tokenize(t)).collect();
        for (i, (text, tok)) in texts.iter().zip(&tokens).enumerate() {
            if text.is_empty() {
                return Err(Error::data(format!("text {i} is empty")));
            }
            if tok.len() > self.context_length() {
                return Err(Error::data(format!(
                    "text {i} has {} tokens, context length is {}",
                    tok.len(),
                    self.context_length()
                )));
            }
        }
        let l = tokens.iter().map(Vec::len).max().unwrap_or(0);
        let d = self.d_embed();
        let b = texts.len();
        let pads: Vec<usize> = tokens.iter().map(|t| l - t.len()).collect();
        let mut x = Array2::zeros((b * l, d));
        for (bi, tok) in tokens.iter().enumerate() {
            for i in 0..l {
                let id = if i < pads[bi] { PAD_ID } else { tok[i - pads[bi]] };
                x.row_mut(bi * l + i)
                    .assign(&ArrayView2::from_shape((1, d), &self.params[self.wte + id * d..self.wte + (id + 1) * d]).unwrap().row(0));
            }
        }
        let geom = Geometry { b, l, pads };
        let x = self.with_positions(x, &geom);
        let (out, _) = self.net().forward(x, geom, false);
        let mut result = Array2::zeros((b, d));
        for bi in 0..b {
            result.row_mut(bi).assign(&out.row(bi * l + l - 1));
        }
        Ok(result)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{fill_uniform, finite_difference, relative_error_norm};

    fn small_spec() -> BackboneSpec {
        BackboneSpec {
            d_embed: 16,
            n_layers: 2,
            n_heads: 2,
            mlp_ratio: 2,
            max_positions: 64,
            seed: 7,
            checkpoint: None,
        }
    }

    fn random(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
        let mut v = vec![0.0; shape.0 * shape.1 * shape.2];
        fill_uniform(&mut v, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        Array3::from_shape_vec(shape, v).unwrap()
    }

    #[test]
    fn scratch_is_deterministic() {
        let a = load_or_init_backbone::<f32>(&small_spec()).unwrap();
        let b = load_or_init_backbone::<f32>(&small_spec()).unwrap();
        assert_eq!(a.base_checksum(), b.base_checksum());
        assert_eq!(a.d_embed(), 16);
        assert_eq!(a.source(), "scratch-frozen(7)");
        let default = load_or_init_backbone::<f32>(&BackboneSpec::default()).unwrap();
        assert_eq!(default.d_embed(), 256);
    }

    #[test]
    fn missing_checkpoint_fails() {
        let spec = BackboneSpec {
            checkpoint: Some("/nonexistent/backbone".into()),
            ..small_spec()
        };
        assert!(load_or_init_backbone::<f32>(&spec).is_err());
    }

    #[test]
    fn save_and_reload() {
        let bb = load_or_init_backbone::<f32>(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        bb.save(dir.path()).unwrap();
        let spec = BackboneSpec {
            checkpoint: Some(dir.path().to_path_buf()),
            ..small_spec()
        };
        let back = load_or_init_backbone::<f32>(&spec).unwrap();
        assert_eq!(back.base_checksum(), bb.base_checksum());
        assert!(back.source().starts_with("checkpoint("));
        let wrong = BackboneSpec {
            d_embed: 32,
            ..spec
        };
        assert!(matches!(load_or_init_backbone::<f32>(&wrong), Err(Error::Config(_))));
    }

    #[test]
    fn causal_perturbation() {
        let bb = load_or_init_backbone::<f64>(&small_spec()).unwrap();
        let x = random((1, 6, 16), 1).index_axis_move(ndarray::Axis(0), 0);
        let y = bb.forward_embeddings(x.view()).unwrap();
        for q in 0..6 {
            let mut xp = x.clone();
            for (j, v) in xp.row_mut(q).iter_mut().enumerate() {
                *v += (j as f64 * 0.7).sin() * 3.0;
            }
            let yp = bb.forward_embeddings(xp.view()).unwrap();
            for p in 0..q {
                let diff = (&y.row(p) - &yp.row(p)).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                assert!(diff < 1e-6);
            }
            assert!((&y.row(q) - &yp.row(q)).iter().any(|v| v.abs() > 1e-6));
        }
        assert_eq!(bb.forward_embeddings(x.slice(s![..1, ..])).unwrap().dim(), (1, 16));
        assert_eq!(y, bb.forward_embeddings(x.view()).unwrap());
        assert!(bb.forward_embeddings(Array2::zeros((65, 16)).view()).is_err());
    }

    #[test]
    fn zero_lora_is_bit_identical() {
        let bb = load_or_init_backbone::<f64>(&small_spec()).unwrap();
        let x = random((2, 5, 16), 2);
        let y = bb.forward_batch(x.view()).unwrap();
        let ad = LoraAdapter::new(LoraConfig::default(), 16, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let adapted = bb.clone().attach_lora(ad).unwrap();
        assert_eq!(adapted.forward_batch(x.view()).unwrap(), y);
        let wrong = LoraAdapter::<f64>::new(LoraConfig::default(), 8, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(bb.attach_lora(wrong).is_err());
    }

    #[test]
    fn left_padding_invariance() {
        let bb = load_or_init_backbone::<f32>(&small_spec()).unwrap();
        let text = "The flow evolves";
        let alone = bb.embed_text_last_token(&[text]).unwrap();
        let batch = bb
            .embed_text_last_token(&["a much longer companion sentence here", text, "short"])
            .unwrap();
        let diff = (&alone.row(0) - &batch.row(1)).iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!(diff < 1e-5, "{diff}");
        let same = bb.embed_text_last_token(&[text, text]).unwrap();
        assert_eq!(same.row(0), same.row(1));
        assert_eq!(bb.embed_text_last_token(&["a", "b", "c", "d"]).unwrap().dim(), (4, 16));
        assert!(bb.embed_text_last_token(&[""]).is_err());
        assert!(bb.embed_text_last_token(&[&"x".repeat(64)]).is_err());
    }

    #[test]
    fn input_and_lora_gradients_match_finite_differences() {
        let mut spec = small_spec();
        spec.d_embed = 8;
        spec.n_layers = 1;
        spec.mlp_ratio = 1;
        let bb = load_or_init_backbone::<f64>(&spec).unwrap();
        let mut ad = LoraAdapter::new(LoraConfig::default(), 8, 1, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bl = ad.layout.get("h.0.attn.q_proj.lora_B").unwrap().range();
        fill_uniform(&mut ad.params[bl], 0.3, &mut rng);
        let bb = bb.attach_lora(ad.clone()).unwrap();
        let x = random((2, 3, 8), 6);
        let w = random((2, 3, 8), 7);
        let (y, cache) = bb.forward_train(x.view()).unwrap();
        assert_eq!(y, bb.forward_batch(x.view()).unwrap());
        let mut g = vec![0.0; ad.params.len()];
        let dx = bb.backward(&cache, w.view(), Some(&mut g));

        let loss = |b: &Backbone<f64>, x: &Array3<f64>| (&b.forward_batch(x.view()).unwrap() * &w).sum();
        let flat: Vec<f64> = x.iter().cloned().collect();
        let fdx = finite_difference(&flat, 1e-5, |v| loss(&bb, &Array3::from_shape_vec(x.dim(), v.to_vec()).unwrap()));
        let dxv: Vec<f64> = dx.iter().cloned().collect();
        assert!(relative_error_norm(&dxv, &fdx) < 1e-6);

        let fdl = finite_difference(&ad.params, 1e-5, |q| {
            let mut b2 = bb.clone();
            b2.lora_mut().unwrap().params.copy_from_slice(q);
            loss(&b2, &x)
        });
        assert!(relative_error_norm(&g, &fdl) < 1e-6);
    }
}
