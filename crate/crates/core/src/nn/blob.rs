use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::write_atomic;
use crate::error::{Error, Result};
use crate::scalar::{checksum, from_le_bytes, to_le_bytes, Scalar};

/// Manifest entry describing a raw little-endian parameter file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlob {
    pub file: String,
    pub dtype: String,
    pub len: usize,
    /// SHA-256 of the stored bytes.
    pub checksum: String,
}

pub fn save_params<T: Scalar>(dir: &Path, file: &str, params: &[T]) -> Result<ParamBlob> {
    write_atomic(&dir.join(file), &to_le_bytes(params))?;
    Ok(ParamBlob {
        file: file.to_string(),
        dtype: T::DTYPE.to_string(),
        len: params.len(),
        checksum: checksum(params),
    })
}

fn decode<S: Scalar, T: Scalar>(bytes: &[u8]) -> Option<Vec<T>> {
    from_le_bytes::<S>(bytes).map(|v| v.into_iter().map(|x| T::lit(x.to_f64_lossy())).collect())
}

/// Load a parameter file, converting to `T` if it was stored in the other precision.
pub fn load_params<T: Scalar>(dir: &Path, blob: &ParamBlob) -> Result<Vec<T>> {
    let path = dir.join(&blob.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let values = match blob.dtype.as_str() {
        "f32" => decode::<f32, T>(&bytes),
        "f64" => decode::<f64, T>(&bytes),
        other => return Err(Error::data(format!("unsupported parameter dtype {other:?}"))),
    }
    .ok_or_else(|| Error::data(format!("{}: length is not a multiple of the dtype size", path.display())))?;
    if values.len() != blob.len {
        return Err(Error::data(format!(
            "{}: holds {} values, manifest declares {}",
            path.display(),
            values.len(),
            blob.len
        )));
    }
    Ok(values)
}
