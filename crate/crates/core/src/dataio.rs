//! Snapshot-series container (`manifest.json` + raw little-endian `snapshots.f32`),
//! temporal train/test splitting and per-variable field normalization.
//!
//! The blob stores values in `t`-major order, then `h`, `w`, `c`. Any directory that
//! follows this layout can be read back, which is also how externally generated
//! slices (e.g. exported CFD fields) are imported.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::SolverConfig;

pub const SERIES_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "snapshots.f32";

/// Where a forecast series came from and which truth snapshots it lines up with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastInfo {
    /// Index in the source dataset of the first forecast snapshot.
    pub forecast_start: usize,
    pub source_scenario: String,
    pub rom_checksum: String,
    pub processor_checksum: String,
    pub context_pairs: usize,
    pub rollout_stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Provenance {
    Solver(SolverConfig),
    Forecast(ForecastInfo),
    /// Free-form tag; `"imported"` for external data.
    Label(String),
}

impl Provenance {
    pub fn imported() -> Self {
        Provenance::Label("imported".into())
    }
}

/// Ordered `T × H × W × C` snapshots of physical fields.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSnapshotSeries {
    pub data: Vec<f32>,
    shape: [usize; 4],
    pub variables: Vec<String>,
    pub dt_record: f64,
    pub scenario: String,
    pub provenance: Provenance,
    pub seed: Option<u64>,
}

fn unravel(mut flat: usize, shape: [usize; 4]) -> Vec<usize> {
    let mut idx = vec![0; 4];
    for axis in (0..4).rev() {
        idx[axis] = flat % shape[axis];
        flat /= shape[axis];
    }
    idx
}

impl FlowSnapshotSeries {
    pub fn new(
        data: Vec<f32>,
        shape: [usize; 4],
        variables: Vec<String>,
        dt_record: f64,
        scenario: impl Into<String>,
        provenance: Provenance,
        seed: Option<u64>,
    ) -> Result<Self> {
        let series = Self {
            data,
            shape,
            variables,
            dt_record,
            scenario: scenario.into(),
            provenance,
            seed,
        };
        series.validate()?;
        Ok(series)
    }

    fn validate(&self) -> Result<()> {
        let [t, h, w, c] = self.shape;
        if t == 0 || h == 0 || w == 0 || c == 0 {
            return Err(Error::data(format!("empty series shape {:?}", self.shape)));
        }
        if c != self.variables.len() {
            return Err(Error::data(format!(
                "{} channels but {} variable names",
                c,
                self.variables.len()
            )));
        }
        if self.data.len() != t * h * w * c {
            return Err(Error::data(format!(
                "data length {} does not match shape {:?}",
                self.data.len(),
                self.shape
            )));
        }
        self.check_finite()
    }

    fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(pos) => Err(Error::NonFinite {
                index: unravel(pos, self.shape),
            }),
            None => Ok(()),
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
    pub fn t(&self) -> usize {
        self.shape[0]
    }
    pub fn h(&self) -> usize {
        self.shape[1]
    }
    pub fn w(&self) -> usize {
        self.shape[2]
    }
    pub fn c(&self) -> usize {
        self.shape[3]
    }

    /// Number of values in one snapshot.
    pub fn frame_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn snapshot(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn at(&self, t: usize, h: usize, w: usize, c: usize) -> f32 {
        let [_, hh, ww, cc] = self.shape;
        self.data[((t * hh + h) * ww + w) * cc + c]
    }

    /// Copy of a contiguous time range, keeping metadata.
    pub fn slice_time(&self, range: Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.t() {
            return Err(Error::data(format!(
                "time range {range:?} outside series of length {}",
                self.t()
            )));
        }
        let n = self.frame_len();
        let mut out = self.clone();
        out.data = self.data[range.start * n..range.end * n].to_vec();
        out.shape[0] = range.len();
        Ok(out)
    }

    /// Series with the same metadata but new frames.
    pub fn with_frames(&self, data: Vec<f32>, t: usize) -> Result<Self> {
        let mut shape = self.shape;
        shape[0] = t;
        Self::new(
            data,
            shape,
            self.variables.clone(),
            self.dt_record,
            self.scenario.clone(),
            self.provenance.clone(),
            self.seed,
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SeriesManifest {
    schema_version: u32,
    scenario: String,
    variables: Vec<String>,
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "H")]
    h: usize,
    #[serde(rename = "W")]
    w: usize,
    #[serde(rename = "C")]
    c: usize,
    dt_record: f64,
    dtype: String,
    byte_order: String,
    seed: Option<u64>,
    provenance: Provenance,
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    write_atomic(path, text.as_bytes())
}

pub fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Write via a temporary sibling and rename, so readers never see partial files.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp-write");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_series(series: &FlowSnapshotSeries, dir: &Path) -> Result<PathBuf> {
    series.check_finite()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(series.data.len() * 4);
    for v in &series.data {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(&dir.join(BLOB_FILE), &blob)?;
    let [t, h, w, c] = series.shape;
    let manifest = SeriesManifest {
        schema_version: SERIES_SCHEMA_VERSION,
        scenario: series.scenario.clone(),
        variables: series.variables.clone(),
        t,
        h,
        w,
        c,
        dt_record: series.dt_record,
        dtype: "f32".into(),
        byte_order: "little".into(),
        seed: series.seed,
        provenance: series.provenance.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    write_json(&path, &manifest)?;
    Ok(path)
}

pub fn read_series(dir: &Path) -> Result<FlowSnapshotSeries> {
    let m: SeriesManifest = read_json(&dir.join(MANIFEST_FILE))?;
    if m.schema_version != SERIES_SCHEMA_VERSION {
        return Err(Error::data(format!(
            "unknown schema_version {}",
            m.schema_version
        )));
    }
    if m.byte_order != "little" {
        return Err(Error::data(format!("unsupported byte_order {:?}", m.byte_order)));
    }
    if m.dtype != "f32" {
        return Err(Error::data(format!("unsupported dtype {:?}", m.dtype)));
    }
    let blob_path = dir.join(BLOB_FILE);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let expected = m.t * m.h * m.w * m.c * 4;
    if blob.len() != expected {
        return Err(Error::data(format!(
            "size mismatch: {} holds {} bytes, manifest implies {}",
            blob_path.display(),
            blob.len(),
            expected
        )));
    }
    let data = blob
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    FlowSnapshotSeries::new(
        data,
        [m.t, m.h, m.w, m.c],
        m.variables,
        m.dt_record,
        m.scenario,
        m.provenance,
        m.seed,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub contiguous: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.9,
            contiguous: true,
        }
    }
}

impl SplitSpec {
    pub fn split_index(&self, t: usize) -> Result<usize> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if !self.contiguous {
            return Err(Error::config("only contiguous temporal splits are supported"));
        }
        if t < 10 {
            return Err(Error::data(format!("need at least 10 snapshots to split, got {t}")));
        }
        let idx = (t as f64 * self.train_fraction).floor() as usize;
        if idx == 0 || idx >= t {
            return Err(Error::data(format!("split of {t} snapshots leaves an empty side")));
        }
        Ok(idx)
    }
}

/// Contiguous split: training frames precede test frames with no overlap.
pub fn split_series(
    series: &FlowSnapshotSeries,
    spec: &SplitSpec,
) -> Result<(FlowSnapshotSeries, FlowSnapshotSeries)> {
    let idx = spec.split_index(series.t())?;
    Ok((
        series.slice_time(0..idx)?,
        series.slice_time(idx..series.t())?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    /// Affine map of `[min, max]` onto `[-1, 1]`.
    Minmax,
    Zscore,
}

/// Per-variable affine normalization fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldNormalizer {
    pub mode: NormMode,
    /// min (minmax) or mean (zscore) per variable.
    pub offset: Vec<f64>,
    /// max (minmax) or std (zscore) per variable.
    pub spread: Vec<f64>,
    /// Variables whose range is zero and are passed through unchanged.
    pub degenerate: Vec<bool>,
}

impl FieldNormalizer {
    pub fn fit(train: &FlowSnapshotSeries, mode: NormMode) -> Self {
        let c = train.c();
        let mut offset = vec![0.0; c];
        let mut spread = vec![0.0; c];
        match mode {
            NormMode::Minmax => {
                let mut lo = vec![f64::INFINITY; c];
                let mut hi = vec![f64::NEG_INFINITY; c];
                for (i, &v) in train.data.iter().enumerate() {
                    let ch = i % c;
                    lo[ch] = lo[ch].min(v as f64);
                    hi[ch] = hi[ch].max(v as f64);
                }
                offset.copy_from_slice(&lo);
                spread.copy_from_slice(&hi);
            }
            NormMode::Zscore => {
                let count = (train.data.len() / c) as f64;
                let mut sum = vec![0.0; c];
                for (i, &v) in train.data.iter().enumerate() {
                    sum[i % c] += v as f64;
                }
                for ch in 0..c {
                    offset[ch] = sum[ch] / count;
                }
                let mut sq = vec![0.0; c];
                for (i, &v) in train.data.iter().enumerate() {
                    let d = v as f64 - offset[i % c];
                    sq[i % c] += d * d;
                }
                for ch in 0..c {
                    spread[ch] = (sq[ch] / count).sqrt();
                }
            }
        }
        let degenerate = (0..c)
            .map(|ch| match mode {
                NormMode::Minmax => spread[ch] - offset[ch] <= 0.0,
                NormMode::Zscore => spread[ch] <= 0.0,
            })
            .collect::<Vec<_>>();
        for (ch, &d) in degenerate.iter().enumerate() {
            if d {
                log::warn!(
                    "variable {:?} has zero range; passed through unnormalized",
                    train.variables[ch]
                );
            }
        }
        Self {
            mode,
            offset,
            spread,
            degenerate,
        }
    }

    /// `(scale, shift)` with `normalized = value * scale + shift`.
    fn affine(&self, ch: usize) -> (f64, f64) {
        if self.degenerate[ch] {
            return (1.0, 0.0);
        }
        match self.mode {
            NormMode::Minmax => {
                let scale = 2.0 / (self.spread[ch] - self.offset[ch]);
                (scale, -self.offset[ch] * scale - 1.0)
            }
            NormMode::Zscore => (1.0 / self.spread[ch], -self.offset[ch] / self.spread[ch]),
        }
    }

    fn check(&self, series: &FlowSnapshotSeries) -> Result<()> {
        if series.c() != self.offset.len() {
            return Err(Error::shape(format!(
                "normalizer fitted for {} variables, series has {}",
                self.offset.len(),
                series.c()
            )));
        }
        Ok(())
    }

    pub fn normalize_value(&self, ch: usize, v: f64) -> f64 {
        let (a, b) = self.affine(ch);
        v * a + b
    }

    pub fn denormalize_value(&self, ch: usize, v: f64) -> f64 {
        let (a, b) = self.affine(ch);
        (v - b) / a
    }

    pub fn normalize(&self, series: &FlowSnapshotSeries) -> Result<FlowSnapshotSeries> {
        self.check(series)?;
        self.map(series, |ch, v| self.normalize_value(ch, v))
    }

    pub fn denormalize(&self, series: &FlowSnapshotSeries) -> Result<FlowSnapshotSeries> {
        self.check(series)?;
        self.map(series, |ch, v| self.denormalize_value(ch, v))
    }

    fn map(
        &self,
        series: &FlowSnapshotSeries,
        f: impl Fn(usize, f64) -> f64,
    ) -> Result<FlowSnapshotSeries> {
        let c = series.c();
        let data = series
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| f(i % c, v as f64) as f32)
            .collect();
        series.with_frames(data, series.t())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn series(t: usize, h: usize, w: usize, c: usize, f: impl FnMut(usize) -> f32) -> FlowSnapshotSeries {
        FlowSnapshotSeries::new(
            (0..t * h * w * c).map(f).collect(),
            [t, h, w, c],
            (0..c).map(|i| format!("var{i}")).collect(),
            0.01,
            "test",
            Provenance::imported(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn zeros_blob_is_sixteen_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let s = series(1, 2, 2, 1, |_| 0.0);
        let manifest = write_series(&s, dir.path()).unwrap();
        assert!(manifest.ends_with(MANIFEST_FILE));
        let blob = fs::read(dir.path().join(BLOB_FILE)).unwrap();
        assert_eq!(blob, vec![0u8; 16]);
        let text = fs::read_to_string(&manifest).unwrap();
        for key in ["schema_version", "\"T\"", "\"H\"", "\"W\"", "\"C\"", "dt_record", "byte_order", "provenance"] {
            assert!(text.contains(key), "manifest lacks {key}");
        }
    }

    #[test]
    fn nan_is_rejected_with_index() {
        let mut s = series(2, 2, 2, 3, |i| i as f32);
        s.data[12 + 6 + 2] = f32::NAN;
        let dir = tempfile::tempdir().unwrap();
        match write_series(&s, dir.path()) {
            Err(Error::NonFinite { index }) => assert_eq!(index, vec![1, 1, 0, 2]),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn truncated_and_mismatched_blobs_fail() {
        let dir = tempfile::tempdir().unwrap();
        let s = series(2, 3, 3, 3, |i| i as f32 * 0.5);
        write_series(&s, dir.path()).unwrap();
        assert_eq!(read_series(dir.path()).unwrap(), s);

        let blob_path = dir.path().join(BLOB_FILE);
        let blob = fs::read(&blob_path).unwrap();
        fs::write(&blob_path, &blob[..blob.len() - 3]).unwrap();
        assert!(matches!(read_series(dir.path()), Err(Error::Data(m)) if m.contains("size mismatch")));

        // Blob sized for two channels under a three-channel manifest.
        fs::write(&blob_path, &blob[..2 * 3 * 3 * 2 * 4]).unwrap();
        assert!(read_series(dir.path()).is_err());
    }

    #[test]
    fn manifest_validation() {
        let dir = tempfile::tempdir().unwrap();
        let s = series(1, 2, 2, 1, |_| 1.0);
        write_series(&s, dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, text.replace("\"little\"", "\"big\"")).unwrap();
        assert!(read_series(dir.path()).is_err());
        fs::write(&path, text.replace("\"schema_version\": 1", "\"schema_version\": 99")).unwrap();
        assert!(matches!(read_series(dir.path()), Err(Error::Data(m)) if m.contains("schema_version")));
    }

    #[test]
    fn split_examples() {
        let s = series(1500, 1, 1, 1, |i| i as f32);
        let (a, b) = split_series(&s, &SplitSpec::default()).unwrap();
        assert_eq!((a.t(), b.t()), (1350, 150));
        assert_eq!(a.data.last(), Some(&1349.0));
        assert_eq!(b.data[0], 1350.0);

        let s10 = series(10, 1, 1, 1, |i| i as f32);
        let (a, b) = split_series(&s10, &SplitSpec::default()).unwrap();
        assert_eq!((a.t(), b.t()), (9, 1));

        let s11 = series(11, 1, 1, 1, |i| i as f32);
        let half = SplitSpec { train_fraction: 0.5, contiguous: true };
        let (a, b) = split_series(&s11, &half).unwrap();
        assert_eq!((a.t(), b.t()), (5, 6));

        assert!(split_series(&series(9, 1, 1, 1, |_| 0.0), &SplitSpec::default()).is_err());
        let bad = SplitSpec { train_fraction: 1.0, contiguous: true };
        assert!(split_series(&s11, &bad).is_err());
    }

    #[test]
    fn constant_variable_passes_through() {
        let s = series(3, 2, 2, 2, |i| if i % 2 == 0 { 4.0 } else { i as f32 });
        let norm = FieldNormalizer::fit(&s, NormMode::Minmax);
        assert_eq!(norm.degenerate, vec![true, false]);
        let n = norm.normalize(&s).unwrap();
        assert!(n.data.iter().step_by(2).all(|&v| v == 4.0));
        let lo = n.data.iter().skip(1).step_by(2).cloned().fold(f32::INFINITY, f32::min);
        let hi = n.data.iter().skip(1).step_by(2).cloned().fold(f32::NEG_INFINITY, f32::max);
        assert!((lo + 1.0).abs() < 1e-6 && (hi - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zscore_on_standardized_data_is_identity() {
        // +1/-1 alternating: mean 0, population std 1.
        let s = series(4, 2, 2, 1, |i| if i % 2 == 0 { 1.0 } else { -1.0 });
        let norm = FieldNormalizer::fit(&s, NormMode::Zscore);
        let n = norm.normalize(&s).unwrap();
        for (a, b) in n.data.iter().zip(&s.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn normalizer_roundtrip_random() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let s = series(5, 4, 4, 3, |_| rng.random_range(-30.0..30.0));
        for mode in [NormMode::Minmax, NormMode::Zscore] {
            let norm = FieldNormalizer::fit(&s, mode);
            let back = norm.denormalize(&norm.normalize(&s).unwrap()).unwrap();
            let worst = back
                .data
                .iter()
                .zip(&s.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(worst < 1e-5, "{mode:?}: {worst}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn container_roundtrip_is_bit_exact(
            values in proptest::collection::vec(proptest::num::f32::NORMAL | proptest::num::f32::SUBNORMAL | proptest::num::f32::ZERO, 24)
        ) {
            let dir = tempfile::tempdir().unwrap();
            let s = FlowSnapshotSeries::new(values, [2, 2, 2, 3], vec!["u".into(), "v".into(), "omega".into()], 0.5, "p", Provenance::imported(), Some(7)).unwrap();
            write_series(&s, dir.path()).unwrap();
            let back = read_series(dir.path()).unwrap();
            let a: Vec<u32> = s.data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(back, s);
        }

        #[test]
        fn split_is_contiguous_and_complete(t in 10usize..400, frac in 0.05f64..0.95) {
            let s = series(t, 1, 1, 1, |i| i as f32);
            let spec = SplitSpec { train_fraction: frac, contiguous: true };
            if let Ok((a, b)) = split_series(&s, &spec) {
                prop_assert_eq!(a.t() + b.t(), t);
                prop_assert_eq!(a.t(), (t as f64 * frac).floor() as usize);
                let joined: Vec<f32> = a.data.iter().chain(&b.data).cloned().collect();
                prop_assert_eq!(joined, s.data);
            }
        }
    }
}
