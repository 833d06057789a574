use std::fs;
use std::path::Path;

use ndarray::{concatenate, s, Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_prompt_bank, patchify, revin_apply, revin_invert, unpatchify, ContextSet, PromptBank};
use crate::backbone::{load_or_init_backbone, Backbone, BackboneSpec, ForwardCache, LoraAdapter, LoraConfig};
use crate::dataio::{read_json, write_json};
use crate::error::{Error, Result};
use crate::nn::{load_params, mish, mish_grad, save_params, AdamW, Layout, Linear, ParamBlob};
use crate::rom::LatentSequence;
use crate::scalar::{checksum, Scalar};

pub const PROC_MANIFEST_FILE: &str = "proc_manifest.json";
const PROC_PARAMS_FILE: &str = "proc_params.bin";
const LORA_PARAMS_FILE: &str = "lora_params.bin";
const PROC_SCHEMA_VERSION: u32 = 1;

/// Order of demonstration tokens ahead of the lookback window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextLayout {
    /// `p_1, p_{n+1}, p_2, p_{n+2}, …`
    Interleaved,
    /// `p_1, …, p_n, p_{n+1}, …, p_{2n}`
    Grouped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProcessorConfig {
    pub window: usize,
    pub patch_len: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub rollout_stride: usize,
    pub lora_enabled: bool,
    pub lora: LoraConfig,
    pub gamma_init: f64,
    pub seed: u64,
    pub context_layout: ContextLayout,
}

impl Default for ProcessorConfig {
    fn default() -> Self {
        Self {
            window: 20,
            patch_len: 5,
            lr: 1e-3,
            batch_size: 128,
            epochs: 200,
            weight_decay: 0.01,
            rollout_stride: 1,
            lora_enabled: false,
            lora: LoraConfig::default(),
            gamma_init: 0.1,
            seed: 0,
            context_layout: ContextLayout::Interleaved,
        }
    }
}

impl ProcessorConfig {
    pub fn n_patches(&self) -> usize {
        self.window / self.patch_len.max(1)
    }

    /// Steps covered by the predicted patches.
    pub fn horizon_per_forward(&self) -> usize {
        self.n_patches() * self.patch_len
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_len == 0 || self.window < self.patch_len {
            return Err(Error::config(format!(
                "processor.window {} must be at least processor.patch_len {}",
                self.window, self.patch_len
            )));
        }
        if self.window < 2 {
            return Err(Error::config("processor.window must be at least 2"));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::config("processor.lr and processor.batch_size must be positive"));
        }
        self.check_stride(self.rollout_stride)?;
        if self.lora_enabled {
            self.lora.validate()?;
        }
        Ok(())
    }

    pub fn check_stride(&self, stride: usize) -> Result<()> {
        if stride == 0 || stride > self.horizon_per_forward() {
            return Err(Error::config(format!(
                "rollout stride {stride} outside 1..={}",
                self.horizon_per_forward()
            )));
        }
        Ok(())
    }
}

/// Trainable projections around the backbone: `M_p → D_e → D_e` with Mish, `D_e → M_p`, and `γ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessorNet {
    pub patch_len: usize,
    pub d_embed: usize,
    pub layout: Layout,
    fc1: Linear,
    fc2: Linear,
    out: Linear,
    gamma: usize,
}

struct ProjCache<T> {
    x: Array2<T>,
    pre: Array2<T>,
}

/// Activations of one training batch.
struct BatchCache<T> {
    proj: ProjCache<T>,
    backbone: ForwardCache<T>,
    hidden: Array2<T>,
    seqs: usize,
}

impl ProcessorNet {
    pub fn new(patch_len: usize, d_embed: usize) -> Self {
        let mut layout = Layout::new();
        let fc1 = Linear::new(&mut layout, "input_proj.0", patch_len, d_embed, true);
        let fc2 = Linear::new(&mut layout, "input_proj.2", d_embed, d_embed, true);
        let out = Linear::new(&mut layout, "output_proj", d_embed, patch_len, true);
        let gamma = layout.add("gamma", &[1]);
        Self {
            patch_len,
            d_embed,
            layout,
            fc1,
            fc2,
            out,
            gamma,
        }
    }

    pub fn init<T: Scalar, R: rand::Rng>(&self, p: &mut [T], gamma: f64, rng: &mut R) {
        self.fc1.init(p, rng);
        self.fc2.init(p, rng);
        self.out.init(p, rng);
        p[self.gamma] = T::lit(gamma);
    }

    pub fn gamma<T: Scalar>(&self, p: &[T]) -> T {
        p[self.gamma]
    }

    /// Position-wise input projection of patches `(R, M_p)` to `(R, D_e)`.
    pub fn project_in<T: Scalar>(&self, p: &[T], patches: ArrayView2<T>) -> Result<Array2<T>> {
        if patches.ncols() != self.patch_len {
            return Err(Error::shape(format!(
                "patches have length {}, projection expects {}",
                patches.ncols(),
                self.patch_len
            )));
        }
        Ok(self.project_in_cached(p, patches).0)
    }

    fn project_in_cached<T: Scalar>(&self, p: &[T], x: ArrayView2<T>) -> (Array2<T>, ProjCache<T>) {
        let pre = self.fc1.forward(p, x);
        let s = self.fc2.forward(p, pre.mapv(mish).view());
        (
            s,
            ProjCache {
                x: x.to_owned(),
                pre,
            },
        )
    }

    pub fn project_out<T: Scalar>(&self, p: &[T], h: ArrayView2<T>) -> Array2<T> {
        self.out.forward(p, h)
    }
}

/// Flatten `(S, L, X)` to `(S·L, X)`.
fn rows3<T: Scalar>(x: ArrayView3<T>) -> Array2<T> {
    let (a, b, c) = x.dim();
    x.as_standard_layout().into_owned().into_shape_with_order((a * b, c)).expect("rows")
}

fn cube<T: Scalar>(x: Array2<T>, a: usize, b: usize) -> Array3<T> {
    let c = x.ncols();
    x.as_standard_layout().into_owned().into_shape_with_order((a, b, c)).expect("cube")
}

/// Lookback tokens `(S, N, M_p)` → aligned embeddings `(S, N, D_e)`.
fn embed_lookback<T: Scalar>(
    net: &ProcessorNet,
    p: &[T],
    k: &Array2<T>,
    look: ArrayView3<T>,
) -> (Array3<T>, ProjCache<T>) {
    let (s_count, n, _) = look.dim();
    let (s, cache) = net.project_in_cached(p, rows3(look).view());
    let mut e = cube(s, s_count, n);
    let gamma = net.gamma(p);
    for mut seq in e.axis_iter_mut(Axis(0)) {
        Zip::from(&mut seq).and(k).for_each(|e, &kv| *e += gamma * kv);
    }
    (e, cache)
}

/// Loss and gradients for one batch of normalized `(S, N, M_p)` windows with prompt
/// embeddings `k`. Projection gradients accumulate into `g`, adapter gradients into `lora_g`.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss_and_grad<T: Scalar>(
    net: &ProcessorNet,
    p: &[T],
    g: &mut [T],
    backbone: &Backbone<T>,
    k: &Array2<T>,
    look: ArrayView3<T>,
    target: ArrayView3<T>,
    lora_g: Option<&mut [T]>,
) -> Result<T> {
    let (seqs, n, _) = look.dim();
    let (e, proj) = embed_lookback(net, p, k, look);
    let (h, bcache) = backbone.forward_train(e.view())?;
    let hidden = rows3(h.view());
    let pred = net.out.forward(p, hidden.view());
    let cache = BatchCache {
        proj,
        backbone: bcache,
        hidden,
        seqs,
    };
    let tgt = rows3(target);
    let diff = &pred - &tgt;
    let denom = T::lit((seqs * n) as f64);
    let loss = diff.iter().map(|&d| d * d).sum::<T>() / denom;
    let dpred = diff.mapv(|d| T::lit(2.0) * d / denom);

    let dh = net.out.backward(p, g, cache.hidden.view(), dpred.view());
    let de = backbone.backward(&cache.backbone, cube(dh, cache.seqs, n).view(), lora_g);
    let mut dgamma = T::zero();
    for seq in de.axis_iter(Axis(0)) {
        dgamma += Zip::from(&seq).and(k).fold(T::zero(), |acc, &d, &kv| acc + d * kv);
    }
    g[net.gamma] += dgamma;
    let ds = rows3(de.view());
    let mut dpre = net.fc2.backward(p, g, cache.proj.pre.mapv(mish).view(), ds.view());
    Zip::from(&mut dpre).and(&cache.proj.pre).for_each(|d, &a| *d *= mish_grad(a));
    net.fc1.accumulate_grads(g, cache.proj.x.view(), dpre.view());
    Ok(loss)
}

/// Normalized lookback and target patches for every `2M` segment, channels flattened.
fn training_windows<T: Scalar>(z: ArrayView2<T>, cfg: &ProcessorConfig) -> Result<(Array3<T>, Array3<T>)> {
    let (d, t) = z.dim();
    let m = cfg.window;
    if t < 2 * m {
        return Err(Error::data(format!(
            "processor training needs at least {} latent steps, got {t}",
            2 * m
        )));
    }
    let n = cfg.n_patches();
    let mp = cfg.patch_len;
    let windows = t - 2 * m + 1;
    let mut look = Array3::zeros((windows * d, n, mp));
    let mut target = Array3::zeros((windows * d, n, mp));
    for w in 0..windows {
        for i in 0..d {
            let seg: Vec<T> = z.slice(s![i, w..w + m]).to_vec();
            let (norm, st) = revin_apply(&seg);
            let fut: Vec<T> = z
                .slice(s![i, w + m..w + 2 * m])
                .iter()
                .map(|&v| (v - st.mean) / st.std)
                .collect();
            look.index_axis_mut(Axis(0), w * d + i).assign(&patchify(&norm, mp)?);
            target.index_axis_mut(Axis(0), w * d + i).assign(&patchify(&fut, mp)?);
        }
    }
    Ok((look, target))
}

/// Trained processor with its frozen backbone, prompt bank and optional adapter.
#[derive(Debug, Clone)]
pub struct ProcessorCheckpoint<T> {
    pub config: ProcessorConfig,
    pub net: ProcessorNet,
    pub params: Vec<T>,
    pub backbone: Backbone<T>,
    pub bank: PromptBank<T>,
    pub latent_dim: usize,
    pub dt_record: f64,
    pub source_scenario: String,
    pub rom_id: String,
    pub loss_trace: Vec<f64>,
}

/// Predicted latents `(D, F)` and the number of backbone forward passes used.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutOutput<T> {
    pub latents: Array2<T>,
    pub forwards: usize,
}

pub fn train_processor<T: Scalar>(
    latents: &LatentSequence<T>,
    cfg: &ProcessorConfig,
    backbone_spec: &BackboneSpec,
    dt_record: f64,
) -> Result<ProcessorCheckpoint<T>> {
    cfg.validate()?;
    let mut backbone = load_or_init_backbone::<T>(backbone_spec)?;
    let n = cfg.n_patches();
    if n > backbone.context_length() {
        return Err(Error::config(format!(
            "{n} patch tokens exceed the backbone context length {}",
            backbone.context_length()
        )));
    }
    let bank = build_prompt_bank(cfg.window, cfg.patch_len, dt_record, &backbone)?;
    let (look, target) = training_windows(latents.values.view(), cfg)?;
    let d = latents.dim();
    let windows = look.dim().0 / d;

    let net = ProcessorNet::new(cfg.patch_len, backbone.d_embed());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = vec![T::zero(); net.layout.len()];
    net.init(&mut params, cfg.gamma_init, &mut rng);
    if cfg.lora_enabled {
        let adapter = LoraAdapter::new(cfg.lora.clone(), backbone.d_embed(), backbone.n_layers(), &mut rng)?;
        backbone = backbone.attach_lora(adapter)?;
    }
    let base_checksum = backbone.base_checksum();
    let mut opt = AdamW::new(params.len(), cfg.lr).with_weight_decay(cfg.weight_decay);
    let lora_len = backbone.lora().map_or(0, |a| a.params.len());
    let mut lora_opt = AdamW::new(lora_len, cfg.lr).with_weight_decay(cfg.weight_decay);
    let mut grads = vec![T::zero(); params.len()];
    let mut lora_grads = vec![T::zero(); lora_len];
    let mut order: Vec<usize> = (0..windows).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    log::info!(
        "training processor: {} projection parameters, {} adapter parameters, {windows} windows x {d} channels, {} epochs",
        params.len(),
        lora_len,
        cfg.epochs
    );

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let rows: Vec<usize> = chunk.iter().flat_map(|&w| w * d..(w + 1) * d).collect();
            let lb = look.select(Axis(0), &rows);
            let tb = target.select(Axis(0), &rows);
            grads.fill(T::zero());
            lora_grads.fill(T::zero());
            let lg = cfg.lora_enabled.then_some(lora_grads.as_mut_slice());
            let loss = batch_loss_and_grad(&net, &params, &mut grads, &backbone, &bank.embeddings, lb.view(), tb.view(), lg)?
                .to_f64_lossy();
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss,
                    trace,
                });
            }
            opt.step(&mut params, &grads);
            if let Some(adapter) = backbone.lora_mut() {
                lora_opt.step(&mut adapter.params, &lora_grads);
            }
            total += loss * chunk.len() as f64;
        }
        let mean = total / windows as f64;
        log::info!("processor epoch {epoch}: loss {mean:.6e}, gamma {:.4}", net.gamma(&params).to_f64_lossy());
        trace.push(mean);
    }
    debug_assert_eq!(base_checksum, backbone.base_checksum());

    Ok(ProcessorCheckpoint {
        config: cfg.clone(),
        net,
        params,
        backbone,
        bank,
        latent_dim: d,
        dt_record,
        source_scenario: latents.source_scenario.clone(),
        rom_id: latents.rom_id.clone(),
        loss_trace: trace,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BackboneRef {
    spec: BackboneSpec,
    source: String,
    base_checksum: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProcManifest {
    schema_version: u32,
    config: ProcessorConfig,
    latent_dim: usize,
    d_embed: usize,
    n_patches: usize,
    dt_record: f64,
    prompt_texts: Vec<String>,
    gamma: f64,
    backbone: BackboneRef,
    seed: u64,
    source_scenario: String,
    rom_id: String,
    loss_trace: Vec<f64>,
    params: ParamBlob,
    lora: Option<ParamBlob>,
    checksum: String,
}

impl<T: Scalar> ProcessorCheckpoint<T> {
    pub fn gamma(&self) -> T {
        self.net.gamma(&self.params)
    }

    /// SHA-256 over projection parameters followed by adapter parameters.
    pub fn checksum(&self) -> String {
        let mut all = self.params.clone();
        if let Some(a) = self.backbone.lora() {
            all.extend_from_slice(&a.params);
        }
        checksum(&all)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.loss_trace.last().copied()
    }

    /// Normalized, patched lookback of every channel plus the RevIN stats.
    fn prepare_window(&self, window: ArrayView2<T>) -> Result<(Array3<T>, Vec<super::RevinStats<T>>)> {
        let (d, _) = window.dim();
        let n = self.config.n_patches();
        let mp = self.config.patch_len;
        let mut look = Array3::zeros((d, n, mp));
        let mut stats = Vec::with_capacity(d);
        for i in 0..d {
            let (norm, st) = revin_apply(&window.row(i).to_vec());
            look.index_axis_mut(Axis(0), i).assign(&patchify(&norm, mp)?);
            stats.push(st);
        }
        Ok((look, stats))
    }

    /// Projected demonstration tokens `(D, 2n, D_e)`; each channel's segment uses its own RevIN stats.
    fn context_tokens(&self, ctx: &ContextSet<T>) -> Result<Array3<T>> {
        let d = ctx.channels();
        let n = ctx.n;
        let mp = self.config.patch_len;
        let mut patches = Array3::zeros((d, 2 * n, mp));
        for i in 0..d {
            let (norm, _) = revin_apply(&ctx.segment(i));
            let p = patchify(&norm, mp)?;
            for j in 0..n {
                let (a, b) = match self.config.context_layout {
                    ContextLayout::Interleaved => (2 * j, 2 * j + 1),
                    ContextLayout::Grouped => (j, n + j),
                };
                patches.slice_mut(s![i, a, ..]).assign(&p.row(j));
                patches.slice_mut(s![i, b, ..]).assign(&p.row(n + j));
            }
        }
        let proj = self.net.project_in(&self.params, rows3(patches.view()).view())?;
        Ok(cube(proj, d, 2 * n))
    }

    /// Normalized predictions `(S, N, M_p)` for lookback tokens, optionally after a fixed prefix.
    fn predict_normalized(&self, look: ArrayView3<T>, prefix: Option<&Array3<T>>) -> Result<Array3<T>> {
        let (seqs, n, mp) = look.dim();
        let (e, _) = embed_lookback(&self.net, &self.params, &self.bank.embeddings, look);
        let tokens = match prefix {
            Some(c) => concatenate(Axis(1), &[c.view(), e.view()]).map_err(|e| Error::shape(e.to_string()))?,
            None => e,
        };
        let l = tokens.dim().1;
        let h = self.backbone.forward_batch(tokens.view())?;
        let hidden = rows3(h.slice(s![.., l - n.., ..]));
        let pred = self.net.project_out(&self.params, hidden.view());
        Ok(pred.into_shape_with_order((seqs, n, mp)).expect("prediction shape"))
    }

    /// Next `N·M_p` steps for every channel of a `(D, M)` window, in latent units.
    pub fn predict_next_window(&self, window: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_window(window)?;
        let (look, stats) = self.prepare_window(window)?;
        let pred = self.predict_normalized(look.view(), None)?;
        Ok(self.denormalize(pred.view(), &stats))
    }

    fn denormalize(&self, pred: ArrayView3<T>, stats: &[super::RevinStats<T>]) -> Array2<T> {
        let (d, n, mp) = pred.dim();
        let mut out = Array2::zeros((d, n * mp));
        for (i, st) in stats.iter().enumerate().take(d) {
            let flat = unpatchify(pred.index_axis(Axis(0), i));
            out.row_mut(i).assign(&ndarray::Array1::from(revin_invert(&flat, *st)));
        }
        out
    }

    fn check_window(&self, window: ArrayView2<T>) -> Result<()> {
        let (d, m) = window.dim();
        if d != self.latent_dim {
            return Err(Error::config(format!(
                "latent dimension {d} does not match the processor's {}",
                self.latent_dim
            )));
        }
        if m != self.config.window {
            return Err(Error::shape(format!(
                "lookback has {m} steps, processor window is {}",
                self.config.window
            )));
        }
        Ok(())
    }

    /// Autoregressive forecast of `horizon` steps from a `(D, M)` lookback.
    pub fn rollout(&self, tail: ArrayView2<T>, horizon: usize, stride: usize) -> Result<RolloutOutput<T>> {
        self.forecast_in_context(tail, horizon, stride, None)
    }

    /// As [`rollout`](Self::rollout), with demonstration pairs placed ahead of the lookback tokens.
    /// An absent or empty context set reproduces the zero-shot rollout exactly.
    pub fn forecast_in_context(
        &self,
        tail: ArrayView2<T>,
        horizon: usize,
        stride: usize,
        ctx: Option<&ContextSet<T>>,
    ) -> Result<RolloutOutput<T>> {
        self.check_window(tail)?;
        self.config.check_stride(stride)?;
        if horizon == 0 {
            return Err(Error::config("forecast horizon must be at least 1"));
        }
        let ctx = ctx.filter(|c| c.n > 0);
        let prefix = match ctx {
            Some(c) => {
                if c.channels() != self.latent_dim || c.patch_len() != self.config.patch_len {
                    return Err(Error::shape(format!(
                        "context set is {} channels x length-{} patches, processor expects {} x {}",
                        c.channels(),
                        c.patch_len(),
                        self.latent_dim,
                        self.config.patch_len
                    )));
                }
                let total = 2 * c.n + self.config.n_patches();
                if total > self.backbone.context_length() {
                    return Err(Error::config(format!(
                        "{total} tokens exceed the backbone context length {}",
                        self.backbone.context_length()
                    )));
                }
                Some(self.context_tokens(c)?)
            }
            None => None,
        };

        let d = self.latent_dim;
        let m = self.config.window;
        let mut window = tail.to_owned();
        let mut out = Array2::zeros((d, horizon));
        let mut emitted = 0;
        let mut forwards = 0;
        while emitted < horizon {
            let (look, stats) = self.prepare_window(window.view())?;
            let pred = self.predict_normalized(look.view(), prefix.as_ref())?;
            forwards += 1;
            let next = self.denormalize(pred.view(), &stats);
            let take = stride.min(horizon - emitted);
            for k in 0..take {
                if let Some(i) = (0..d).find(|&i| !next[[i, k]].is_finite()) {
                    return Err(Error::Blowup {
                        context: format!("rollout step {} (latent channel {i})", emitted + k),
                    });
                }
            }
            out.slice_mut(s![.., emitted..emitted + take]).assign(&next.slice(s![.., ..take]));
            emitted += take;
            window = concatenate(Axis(1), &[window.view(), next.slice(s![.., ..take])])
                .expect("window append")
                .slice(s![.., take..take + m])
                .to_owned();
        }
        Ok(RolloutOutput { latents: out, forwards })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let params = save_params(dir, PROC_PARAMS_FILE, &self.params)?;
        let lora = match self.backbone.lora() {
            Some(a) => Some(save_params(dir, LORA_PARAMS_FILE, &a.params)?),
            None => None,
        };
        let manifest = ProcManifest {
            schema_version: PROC_SCHEMA_VERSION,
            config: self.config.clone(),
            latent_dim: self.latent_dim,
            d_embed: self.net.d_embed,
            n_patches: self.config.n_patches(),
            dt_record: self.dt_record,
            prompt_texts: self.bank.texts.clone(),
            gamma: self.gamma().to_f64_lossy(),
            backbone: BackboneRef {
                spec: self.backbone.spec().clone(),
                source: self.backbone.source().to_string(),
                base_checksum: self.backbone.base_checksum(),
            },
            seed: self.config.seed,
            source_scenario: self.source_scenario.clone(),
            rom_id: self.rom_id.clone(),
            loss_trace: self.loss_trace.clone(),
            params,
            lora,
            checksum: self.checksum(),
        };
        write_json(&dir.join(PROC_MANIFEST_FILE), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: ProcManifest = read_json(&dir.join(PROC_MANIFEST_FILE))?;
        if m.schema_version != PROC_SCHEMA_VERSION {
            return Err(Error::data(format!("unsupported processor schema version {}", m.schema_version)));
        }
        m.config.validate()?;
        let mut backbone = load_or_init_backbone::<T>(&m.backbone.spec)?;
        if backbone.base_checksum() != m.backbone.base_checksum {
            return Err(Error::data(format!(
                "backbone {} does not reproduce the weights this processor was trained with",
                backbone.source()
            )));
        }
        let bank = build_prompt_bank(m.config.window, m.config.patch_len, m.dt_record, &backbone)?;
        if bank.texts != m.prompt_texts {
            return Err(Error::data("prompt texts differ from the stored ones"));
        }
        let net = ProcessorNet::new(m.config.patch_len, backbone.d_embed());
        if m.params.len != net.layout.len() {
            return Err(Error::data(format!(
                "processor blob has {} values, architecture needs {}",
                m.params.len,
                net.layout.len()
            )));
        }
        let params = load_params(dir, &m.params)?;
        if let Some(blob) = &m.lora {
            let values = load_params(dir, blob)?;
            let adapter = LoraAdapter::from_params(m.config.lora.clone(), backbone.d_embed(), backbone.n_layers(), values)?;
            backbone = backbone.attach_lora(adapter)?;
        }
        Ok(Self {
            config: m.config,
            net,
            params,
            backbone,
            bank,
            latent_dim: m.latent_dim,
            dt_record: m.dt_record,
            source_scenario: m.source_scenario,
            rom_id: m.rom_id,
            loss_trace: m.loss_trace,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{fill_uniform, finite_difference, relative_error_norm};
    use crate::processor::build_context_set;

    fn tiny_backbone() -> BackboneSpec {
        BackboneSpec {
            d_embed: 8,
            n_layers: 1,
            n_heads: 2,
            mlp_ratio: 1,
            max_positions: 160,
            seed: 3,
            checkpoint: None,
        }
    }

    fn latents(d: usize, t: usize) -> LatentSequence<f64> {
        let values = Array2::from_shape_fn((d, t), |(i, k)| {
            let x = k as f64 * 0.2;
            (x * (1.0 + 0.3 * i as f64)).sin() + 0.1 * i as f64
        });
        LatentSequence {
            values,
            source_scenario: "toy".into(),
            rom_id: "rom".into(),
        }
    }

    fn tiny_cfg(epochs: usize) -> ProcessorConfig {
        ProcessorConfig {
            window: 8,
            patch_len: 2,
            batch_size: 16,
            epochs,
            lr: 3e-3,
            ..ProcessorConfig::default()
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let spec = tiny_backbone();
        let backbone = load_or_init_backbone::<f64>(&spec).unwrap();
        let bank = build_prompt_bank(4, 2, 0.1, &backbone).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ad = LoraAdapter::new(LoraConfig::default(), 8, 1, &mut rng).unwrap();
        let bl = ad.layout.get("h.0.attn.q_proj.lora_B").unwrap().range();
        fill_uniform(&mut ad.params[bl], 0.2, &mut rng);
        let backbone = backbone.attach_lora(ad.clone()).unwrap();
        let net = ProcessorNet::new(2, 8);
        let mut p = vec![0.0; net.layout.len()];
        net.init(&mut p, 0.1, &mut rng);
        assert!(p.len() <= 1000);
        let mut lv = vec![0.0; 3 * 2 * 2];
        let mut tv = vec![0.0; 3 * 2 * 2];
        fill_uniform(&mut lv, 1.5, &mut rng);
        fill_uniform(&mut tv, 1.5, &mut rng);
        let look = Array3::from_shape_vec((3, 2, 2), lv).unwrap();
        let target = Array3::from_shape_vec((3, 2, 2), tv).unwrap();
        let k = bank.embeddings.clone();

        let mut g = vec![0.0; p.len()];
        let mut lg = vec![0.0; ad.params.len()];
        let loss = batch_loss_and_grad(&net, &p, &mut g, &backbone, &k, look.view(), target.view(), Some(&mut lg)).unwrap();

        let eval = |q: &[f64], bb: &Backbone<f64>| {
            let mut scratch = vec![0.0; q.len()];
            batch_loss_and_grad(&net, q, &mut scratch, bb, &k, look.view(), target.view(), None).unwrap()
        };
        assert_eq!(loss, eval(&p, &backbone));
        let fd = finite_difference(&p, 1e-5, |q| eval(q, &backbone));
        assert!(relative_error_norm(&g, &fd) < 1e-4, "{}", relative_error_norm(&g, &fd));
        let gi = net.layout.get("gamma").unwrap().offset;
        assert!((g[gi] - fd[gi]).abs() <= 1e-4 * fd[gi].abs().max(1e-3));
        let fdl = finite_difference(&ad.params, 1e-5, |q| {
            let mut bb = backbone.clone();
            bb.lora_mut().unwrap().params.copy_from_slice(q);
            eval(&p, &bb)
        });
        assert!(relative_error_norm(&lg, &fdl) < 1e-4);

        // The batch loss equals the per-window definition averaged over windows.
        let (e, _) = embed_lookback(&net, &p, &k, look.view());
        let h = backbone.forward_batch(e.view()).unwrap();
        let pred = cube(net.project_out(&p, rows3(h.view()).view()), 3, 2).into_shape_with_order((3, 2, 2)).unwrap();
        let per_window = super::super::processor_loss(pred.view(), target.view()).unwrap();
        assert!((per_window - loss).abs() < 1e-12);
    }

    #[test]
    fn gamma_zero_ignores_prompts() {
        let spec = tiny_backbone();
        let backbone = load_or_init_backbone::<f64>(&spec).unwrap();
        let net = ProcessorNet::new(2, 8);
        let mut p = vec![0.0; net.layout.len()];
        net.init(&mut p, 0.0, &mut ChaCha8Rng::seed_from_u64(1));
        let look = Array3::from_shape_fn((2, 2, 2), |(a, b, c)| (a + 2 * b + 3 * c) as f64 * 0.1);
        let k1 = build_prompt_bank(4, 2, 0.1, &backbone).unwrap().embeddings;
        let k2 = build_prompt_bank(4, 2, 0.7, &backbone).unwrap().embeddings;
        assert_ne!(k1, k2);
        let (e1, _) = embed_lookback(&net, &p, &k1, look.view());
        let (e2, _) = embed_lookback(&net, &p, &k2, look.view());
        assert_eq!(backbone.forward_batch(e1.view()).unwrap(), backbone.forward_batch(e2.view()).unwrap());
    }

    #[test]
    fn project_in_is_position_wise() {
        let net = ProcessorNet::new(5, 8);
        let mut p = vec![0.0f64; net.layout.len()];
        net.init(&mut p, 0.1, &mut ChaCha8Rng::seed_from_u64(2));
        let patches = Array2::from_shape_fn((4, 5), |(j, t)| if j == 2 { t as f64 } else { (j * 5 + t) as f64 * 0.1 });
        let mut patches = patches;
        let first = patches.row(0).to_owned();
        patches.row_mut(2).assign(&first);
        let s = net.project_in(&p, patches.view()).unwrap();
        assert_eq!(s.dim(), (4, 8));
        assert_eq!(s.row(0), s.row(2));
        assert!(net.project_in(&p, Array2::zeros((4, 4)).view()).is_err());
    }

    #[test]
    fn training_reduces_loss_and_keeps_backbone_frozen() {
        let lat = latents(4, 200);
        let spec = tiny_backbone();
        let before = load_or_init_backbone::<f64>(&spec).unwrap().base_checksum();
        let a = train_processor(&lat, &tiny_cfg(2), &spec, 0.1).unwrap();
        assert!(a.loss_trace[1] < a.loss_trace[0]);
        assert_eq!(a.backbone.base_checksum(), before);
        let b = train_processor(&lat, &tiny_cfg(2), &spec, 0.1).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let with_lora = ProcessorConfig {
            lora_enabled: true,
            ..tiny_cfg(1)
        };
        let c = train_processor(&lat, &with_lora, &spec, 0.1).unwrap();
        assert_eq!(c.backbone.base_checksum(), before);
        assert!(c.backbone.lora().unwrap().params.iter().any(|&v| v != 0.0));
        assert!(matches!(
            train_processor(&latents(4, 15), &tiny_cfg(1), &spec, 0.1),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn rollout_contracts() {
        let lat = latents(3, 120);
        let ckpt = train_processor(&lat, &tiny_cfg(1), &tiny_backbone(), 0.1).unwrap();
        let tail = lat.values.slice(s![.., 100..108]);
        let one = ckpt.rollout(tail, 1, 1).unwrap();
        let full = ckpt.predict_next_window(tail).unwrap();
        assert_eq!(one.latents.column(0), full.column(0));
        assert_eq!(one.forwards, 1);
        let r = ckpt.rollout(tail, 40, 1).unwrap();
        assert_eq!(r.latents.dim(), (3, 40));
        assert_eq!(r.forwards, 40);
        let r8 = ckpt.rollout(tail, 40, 8).unwrap();
        assert_eq!(r8.forwards, 5);
        assert_eq!(r8.latents.column(0), r.latents.column(0));
        assert!(ckpt.rollout(tail, 0, 1).is_err());
        assert!(ckpt.rollout(tail, 5, 9).is_err());
        assert!(matches!(ckpt.rollout(lat.values.slice(s![..2, 100..108]), 5, 1), Err(Error::Config(_))));
    }

    #[test]
    fn in_context_forecasts() {
        let lat = latents(3, 120);
        let ckpt = train_processor(&lat, &tiny_cfg(1), &tiny_backbone(), 0.1).unwrap();
        let tail = lat.values.slice(s![.., 100..108]);
        let zero = ckpt.rollout(tail, 10, 1).unwrap();
        assert_eq!(ckpt.forecast_in_context(tail, 10, 1, None).unwrap(), zero);
        for n in [1, 3] {
            let ctx = build_context_set(lat.values.slice(s![.., 40..40 + 4 * n]), n, 2).unwrap();
            let a = ckpt.forecast_in_context(tail, 10, 1, Some(&ctx)).unwrap();
            let b = ckpt.forecast_in_context(tail, 10, 1, Some(&ctx)).unwrap();
            assert_eq!(a, b);
            assert!(a.latents.iter().all(|v| v.is_finite()));
            assert_ne!(a.latents, zero.latents);
        }
        let big = build_context_set(lat.values.slice(s![.., 0..80]), 20, 2).unwrap();
        assert!(ckpt.forecast_in_context(tail, 2, 1, Some(&big)).is_ok());
        let too_big = build_context_set(Array2::zeros((3, 320)).view(), 80, 2).unwrap();
        assert!(matches!(ckpt.forecast_in_context(tail, 2, 1, Some(&too_big)), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let lat = latents(2, 60);
        let cfg = ProcessorConfig {
            lora_enabled: true,
            ..tiny_cfg(1)
        };
        let ckpt = train_processor(&lat, &cfg, &tiny_backbone(), 0.1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ckpt.save(dir.path()).unwrap();
        let back = ProcessorCheckpoint::<f64>::load(dir.path()).unwrap();
        assert_eq!(back.checksum(), ckpt.checksum());
        assert_eq!(back.bank, ckpt.bank);
        let tail = lat.values.slice(s![.., 50..58]);
        assert_eq!(back.rollout(tail, 5, 1).unwrap(), ckpt.rollout(tail, 5, 1).unwrap());
    }
}
