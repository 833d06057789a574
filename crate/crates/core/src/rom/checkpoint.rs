use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2, ArrayView4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::{from_tensor, to_tensor, RomNet};
use super::{loss_and_grad, LatentCode, LatentSequence, RomConfig};
use crate::dataio::{read_json, write_json, FieldNormalizer, FlowSnapshotSeries};
use crate::error::{Error, Result};
use crate::nn::{load_params, save_params, AdamW, ParamBlob, ParamEntry};
use crate::scalar::{checksum, Scalar};

pub const ROM_MANIFEST_FILE: &str = "rom_manifest.json";
const ROM_PARAMS_FILE: &str = "rom_params.bin";
const ROM_SCHEMA_VERSION: u32 = 1;
const ENCODE_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub reconstruction: f64,
    pub disentanglement: f64,
}

/// Which latent feeds the decoder when reconstructing a series.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentSource {
    Mean,
    Sampled { seed: u64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Architecture {
    description: String,
    activation: String,
    initialization: String,
    kernel: usize,
    stride: usize,
    padding: usize,
    parameters: Vec<ParamEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RomManifest {
    schema_version: u32,
    config: RomConfig,
    seed: u64,
    architecture: Architecture,
    normalizer: FieldNormalizer,
    variables: Vec<String>,
    source_scenario: String,
    loss_trace: Vec<EpochLoss>,
    params: ParamBlob,
}

/// Trained ROM: configuration, network, flat parameters and the normalizer fitted on training data.
#[derive(Debug, Clone)]
pub struct RomCheckpoint<T> {
    /// Resolved configuration; `input_shape` is always set.
    pub config: RomConfig,
    pub net: RomNet,
    pub params: Vec<T>,
    pub normalizer: FieldNormalizer,
    pub variables: Vec<String>,
    pub source_scenario: String,
    pub loss_trace: Vec<EpochLoss>,
}

fn normalized_frames<T: Scalar>(series: &FlowSnapshotSeries, norm: &FieldNormalizer) -> Vec<T> {
    let c = series.c();
    series
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| T::lit(norm.normalize_value(i % c, v as f64)))
        .collect()
}

pub fn train_rom<T: Scalar>(train: &FlowSnapshotSeries, cfg: &RomConfig) -> Result<RomCheckpoint<T>> {
    cfg.validate()?;
    let shape = [train.h(), train.w(), train.c()];
    if let Some(declared) = cfg.input_shape {
        if declared != shape {
            return Err(Error::shape(format!(
                "rom.input_shape {declared:?} does not match training data {shape:?}"
            )));
        }
    }
    cfg.check_shape(shape)?;
    let mut config = cfg.clone();
    config.input_shape = Some(shape);

    let normalizer = FieldNormalizer::fit(train, cfg.normalization);
    let data = normalized_frames::<T>(train, &normalizer);
    let frame_len = train.frame_len();
    let net = RomNet::new(cfg.latent_dim, &cfg.encoder_channels, shape);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = vec![T::zero(); net.num_params()];
    net.init(&mut params, &mut rng);
    let mut opt = AdamW::new(params.len(), cfg.lr).with_weight_decay(cfg.weight_decay);
    let mut grads = vec![T::zero(); params.len()];
    let mut order: Vec<usize> = (0..train.t()).collect();
    let mut trace: Vec<EpochLoss> = Vec::with_capacity(cfg.epochs);
    log::info!(
        "training ROM: {} parameters, {} snapshots, {} epochs",
        params.len(),
        train.t(),
        cfg.epochs
    );

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut tot, mut rec, mut dis) = (0.0, 0.0, 0.0);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let frames: Vec<&[T]> = chunk
                .iter()
                .map(|&t| &data[t * frame_len..(t + 1) * frame_len])
                .collect();
            let x = to_tensor(&frames, shape);
            let eps = Array2::from_shape_simple_fn((chunk.len(), cfg.latent_dim), || {
                T::lit(StandardNormal.sample(&mut rng))
            });
            grads.fill(T::zero());
            let loss = loss_and_grad(&net, &params, &mut grads, x.view(), eps.view(), cfg.lambda);
            let total = loss.total.to_f64_lossy();
            if !total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: total,
                    trace: trace.iter().map(|e| e.total).collect(),
                });
            }
            opt.step(&mut params, &grads);
            let w = chunk.len() as f64;
            tot += total * w;
            rec += loss.reconstruction.to_f64_lossy() * w;
            dis += loss.disentanglement.to_f64_lossy() * w;
        }
        let n = train.t() as f64;
        let entry = EpochLoss {
            epoch,
            total: tot / n,
            reconstruction: rec / n,
            disentanglement: dis / n,
        };
        log::info!(
            "rom epoch {epoch}: loss {:.6e} (rec {:.6e}, dis {:.6e})",
            entry.total,
            entry.reconstruction,
            entry.disentanglement
        );
        trace.push(entry);
    }

    Ok(RomCheckpoint {
        config,
        net,
        params,
        normalizer,
        variables: train.variables.clone(),
        source_scenario: train.scenario.clone(),
        loss_trace: trace,
    })
}

impl<T: Scalar> RomCheckpoint<T> {
    pub fn input_shape(&self) -> [usize; 3] {
        self.net.input_shape
    }

    pub fn latent_dim(&self) -> usize {
        self.net.latent_dim
    }

    /// SHA-256 of the parameter vector.
    pub fn checksum(&self) -> String {
        checksum(&self.params)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.loss_trace.last().map(|e| e.total)
    }

    fn check_series(&self, series: &FlowSnapshotSeries) -> Result<()> {
        let shape = [series.h(), series.w(), series.c()];
        if shape != self.input_shape() {
            return Err(Error::shape(format!(
                "series snapshots are {shape:?}, ROM expects {:?}",
                self.input_shape()
            )));
        }
        Ok(())
    }

    fn normalize_frame(&self, frame: &[f32]) -> Vec<T> {
        let c = self.input_shape()[2];
        frame
            .iter()
            .enumerate()
            .map(|(i, &v)| T::lit(self.normalizer.normalize_value(i % c, v as f64)))
            .collect()
    }

    fn denormalize_frame(&self, frame: &[T]) -> Vec<f32> {
        let c = self.input_shape()[2];
        frame
            .iter()
            .enumerate()
            .map(|(i, &v)| self.normalizer.denormalize_value(i % c, v.to_f64_lossy()) as f32)
            .collect()
    }

    /// `(μ, log σ²)` for a batch of normalized `(H, W, C)` frames, each `(B, D)`.
    fn encode_normalized(&self, frames: &[&[T]]) -> (Array2<T>, Array2<T>) {
        let x = to_tensor(frames, self.input_shape());
        let (mu, logvar, _) = self.net.encode(&self.params, x.view());
        (mu, logvar)
    }

    /// Posterior of one physical snapshot laid out `(H, W, C)`; `z` is set to `μ`.
    pub fn encode(&self, snapshot: &[f32]) -> Result<LatentCode<T>> {
        let [h, w, c] = self.input_shape();
        if snapshot.len() != h * w * c {
            return Err(Error::shape(format!(
                "snapshot has {} values, ROM expects {h}x{w}x{c}",
                snapshot.len()
            )));
        }
        let frame = self.normalize_frame(snapshot);
        let (mu, logvar) = self.encode_normalized(&[&frame]);
        let mu = mu.row(0).to_vec();
        let sigma = logvar.row(0).iter().map(|&v| (T::lit(0.5) * v).exp()).collect();
        Ok(LatentCode {
            z: mu.clone(),
            mu,
            sigma,
        })
    }

    /// Physical snapshot `(H, W, C)` decoded from one latent vector.
    pub fn decode(&self, z: &[T]) -> Result<Vec<f32>> {
        if z.len() != self.latent_dim() {
            return Err(Error::shape(format!(
                "latent has {} entries, ROM expects {}",
                z.len(),
                self.latent_dim()
            )));
        }
        let zz = ArrayView2::from_shape((1, z.len()), z).expect("row vector");
        Ok(self.decode_rows(zz)?.remove(0))
    }

    fn decode_rows(&self, z: ArrayView2<T>) -> Result<Vec<Vec<f32>>> {
        if let Some(i) = z.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                index: vec![i / z.ncols(), i % z.ncols()],
            });
        }
        let (x, _) = self.net.decode(&self.params, z);
        Ok(from_tensor(ArrayView4::from(&x))
            .iter()
            .map(|f| self.denormalize_frame(f))
            .collect())
    }

    /// Latent means of every snapshot, `D × T`.
    pub fn encode_series(&self, series: &FlowSnapshotSeries) -> Result<LatentSequence<T>> {
        self.check_series(series)?;
        let mut values = Array2::zeros((self.latent_dim(), series.t()));
        for start in (0..series.t()).step_by(ENCODE_BATCH) {
            let end = (start + ENCODE_BATCH).min(series.t());
            let frames: Vec<Vec<T>> = (start..end)
                .map(|t| self.normalize_frame(series.snapshot(t)))
                .collect();
            let refs: Vec<&[T]> = frames.iter().map(|f| f.as_slice()).collect();
            let (mu, _) = self.encode_normalized(&refs);
            values
                .slice_mut(ndarray::s![.., start..end])
                .assign(&mu.t());
        }
        Ok(LatentSequence {
            values,
            source_scenario: series.scenario.clone(),
            rom_id: self.checksum(),
        })
    }

    /// Decode a `D × T` latent array into `T` physical snapshots, flattened `(T, H, W, C)`.
    pub fn decode_latents(&self, latents: ArrayView2<T>) -> Result<Vec<f32>> {
        if latents.nrows() != self.latent_dim() {
            return Err(Error::shape(format!(
                "latents have {} rows, ROM expects {}",
                latents.nrows(),
                self.latent_dim()
            )));
        }
        let t = latents.ncols();
        let mut out = Vec::with_capacity(t * self.input_shape().iter().product::<usize>());
        for start in (0..t).step_by(ENCODE_BATCH) {
            let end = (start + ENCODE_BATCH).min(t);
            let rows = latents.slice(ndarray::s![.., start..end]).t().to_owned();
            for frame in self.decode_rows(rows.view())? {
                out.extend(frame);
            }
        }
        Ok(out)
    }

    /// Encode and decode every snapshot.
    pub fn reconstruct(&self, series: &FlowSnapshotSeries, source: LatentSource) -> Result<FlowSnapshotSeries> {
        self.check_series(series)?;
        let mut rng = match source {
            LatentSource::Mean => None,
            LatentSource::Sampled { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        };
        let mut data = Vec::with_capacity(series.data.len());
        for start in (0..series.t()).step_by(ENCODE_BATCH) {
            let end = (start + ENCODE_BATCH).min(series.t());
            let frames: Vec<Vec<T>> = (start..end)
                .map(|t| self.normalize_frame(series.snapshot(t)))
                .collect();
            let refs: Vec<&[T]> = frames.iter().map(|f| f.as_slice()).collect();
            let (mut z, logvar) = self.encode_normalized(&refs);
            if let Some(rng) = rng.as_mut() {
                ndarray::Zip::from(&mut z).and(&logvar).for_each(|z, &lv| {
                    let e: f64 = StandardNormal.sample(rng);
                    *z += (T::lit(0.5) * lv).exp() * T::lit(e);
                });
            }
            for frame in self.decode_rows(z.view())? {
                data.extend(frame);
            }
        }
        series.with_frames(data, series.t())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let params = save_params(dir, ROM_PARAMS_FILE, &self.params)?;
        let manifest = RomManifest {
            schema_version: ROM_SCHEMA_VERSION,
            config: self.config.clone(),
            seed: self.config.seed,
            architecture: Architecture {
                description: format!(
                    "conv encoder {:?} -> affine mu/logvar heads (D={}); decoder affine -> transposed convs mirrored",
                    self.config.encoder_channels,
                    self.latent_dim()
                ),
                activation: "silu".into(),
                initialization: "uniform(+-1/sqrt(fan_in)) weights and biases".into(),
                kernel: 4,
                stride: 2,
                padding: 1,
                parameters: self.net.layout.entries.clone(),
            },
            normalizer: self.normalizer.clone(),
            variables: self.variables.clone(),
            source_scenario: self.source_scenario.clone(),
            loss_trace: self.loss_trace.clone(),
            params,
        };
        write_json(&dir.join(ROM_MANIFEST_FILE), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: RomManifest = read_json(&dir.join(ROM_MANIFEST_FILE))?;
        if manifest.schema_version != ROM_SCHEMA_VERSION {
            return Err(Error::data(format!(
                "unsupported ROM schema version {}",
                manifest.schema_version
            )));
        }
        let config = manifest.config;
        config.validate()?;
        let shape = config
            .input_shape
            .ok_or_else(|| Error::data("ROM manifest lacks input_shape"))?;
        let net = RomNet::new(config.latent_dim, &config.encoder_channels, shape);
        if manifest.params.len != net.num_params() {
            return Err(Error::data(format!(
                "ROM parameter blob has {} values, architecture needs {}",
                manifest.params.len,
                net.num_params()
            )));
        }
        let params = load_params(dir, &manifest.params)?;
        Ok(Self {
            config,
            net,
            params,
            normalizer: manifest.normalizer,
            variables: manifest.variables,
            source_scenario: manifest.source_scenario,
            loss_trace: manifest.loss_trace,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Provenance;

    fn toy_series(t: usize) -> FlowSnapshotSeries {
        let (h, w, c) = (8, 8, 2);
        let mut data = Vec::with_capacity(t * h * w * c);
        for k in 0..t {
            let phase = k as f64 * 0.3;
            for i in 0..h {
                for j in 0..w {
                    let x = i as f64 / h as f64 * std::f64::consts::TAU;
                    let y = j as f64 / w as f64 * std::f64::consts::TAU;
                    data.push(((x + phase).sin() * y.cos()) as f32);
                    data.push(((y - phase).cos() + 0.5 * x.sin()) as f32);
                }
            }
        }
        FlowSnapshotSeries::new(
            data,
            [t, h, w, c],
            vec!["a".into(), "b".into()],
            0.1,
            "toy",
            Provenance::Label("test".into()),
            None,
        )
        .unwrap()
    }

    fn tiny_cfg(epochs: usize) -> RomConfig {
        RomConfig {
            latent_dim: 4,
            encoder_channels: vec![4, 8],
            batch_size: 8,
            epochs,
            lr: 3e-3,
            ..RomConfig::default()
        }
    }

    #[test]
    fn short_training_reduces_loss_and_is_deterministic() {
        let series = toy_series(24);
        let a = train_rom::<f64>(&series, &tiny_cfg(2)).unwrap();
        let first = train_rom::<f64>(&series, &tiny_cfg(1)).unwrap();
        assert!(a.loss_trace[1].total < first.loss_trace[0].total);
        let b = train_rom::<f64>(&series, &tiny_cfg(2)).unwrap();
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn fresh_network_outputs_are_finite() {
        let series = toy_series(3);
        let ckpt = train_rom::<f32>(&series, &tiny_cfg(0)).unwrap();
        let code = ckpt.encode(&vec![0.0; 128]).unwrap();
        assert!(code.mu.iter().all(|v| v.is_finite()));
        assert!(code.sigma.iter().all(|&s| s > 0.0));
        assert_eq!(code, ckpt.encode(&vec![0.0; 128]).unwrap());
        let x = ckpt.decode(&[0.0; 4]).unwrap();
        assert_eq!(x.len(), 128);
        assert!(x.iter().all(|v| v.is_finite()));
        assert_eq!(x, ckpt.decode(&[0.0; 4]).unwrap());
        assert!(matches!(ckpt.decode(&[f32::NAN, 0.0, 0.0, 0.0]), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn encode_series_shapes_and_repeats() {
        let series = toy_series(5);
        let ckpt = train_rom::<f32>(&series, &tiny_cfg(0)).unwrap();
        let lat = ckpt.encode_series(&series).unwrap();
        assert_eq!(lat.values.dim(), (4, 5));
        assert_eq!(lat, ckpt.encode_series(&series).unwrap());
        let mut same = series.data[..128].to_vec();
        same.extend_from_slice(&series.data[..128]);
        let rep = series.with_frames(same, 2).unwrap();
        let lat = ckpt.encode_series(&rep).unwrap();
        assert_eq!(lat.values.column(0), lat.values.column(1));
        let code = ckpt.encode(series.snapshot(0)).unwrap();
        assert_eq!(code.mu, ckpt.encode_series(&series).unwrap().values.column(0).to_vec());
    }

    #[test]
    fn checkpoint_round_trip() {
        let series = toy_series(6);
        let ckpt = train_rom::<f32>(&series, &tiny_cfg(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ckpt.save(dir.path()).unwrap();
        let back = RomCheckpoint::<f32>::load(dir.path()).unwrap();
        assert_eq!(back.params, ckpt.params);
        assert_eq!(back.config, ckpt.config);
        assert_eq!(back.normalizer, ckpt.normalizer);
        let rec = back.reconstruct(&series, LatentSource::Mean).unwrap();
        assert_eq!(rec.shape(), series.shape());
        let decoded = back.decode_latents(back.encode_series(&series).unwrap().values.view()).unwrap();
        assert_eq!(decoded, rec.data);
    }

    #[test]
    fn mismatched_shape_is_rejected() {
        let series = toy_series(4);
        let cfg = RomConfig {
            input_shape: Some([16, 16, 2]),
            ..tiny_cfg(0)
        };
        assert!(matches!(train_rom::<f32>(&series, &cfg), Err(Error::Shape(_))));
    }
}
