//! Flat binary checkpoints: magic, version, a digest of the producing
//! configuration, then named parameter blobs in declaration order. Round
//! trips are byte-exact; all integers little-endian.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"EVLG";
pub const VERSION: u32 = 1;

/// Digest binding a checkpoint to the configuration document that produced
/// it.
pub fn config_digest(config_json: &str) -> [u8; 32] {
    Sha256::digest(config_json.as_bytes()).into()
}

fn parse_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: path.display().to_string(),
        msg: msg.into(),
    }
}

pub fn save(path: &Path, digest: &[u8; 32], params: &[(String, Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(digest);
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, tensor) in params {
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let shape = tensor.shape();
        buf.extend_from_slice(&(shape.len() as u64).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in tensor.data().iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub struct LoadedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn load(path: &Path, expected_digest: Option<&[u8; 32]>) -> Result<Vec<LoadedParam>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > bytes.len() {
            return Err(parse_err(path, "truncated checkpoint"));
        }
        let slice = &bytes[pos..pos + n];
        pos += n;
        Ok(slice)
    };
    if take(4)? != MAGIC {
        return Err(parse_err(path, "bad magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(parse_err(path, format!("unsupported version {version}")));
    }
    let digest: [u8; 32] = take(32)?.try_into().expect("32 bytes");
    if let Some(expect) = expected_digest {
        if &digest != expect {
            return Err(Error::Config(format!(
                "checkpoint {} was produced by a different configuration",
                path.display()
            )));
        }
    }
    let count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let name = std::str::from_utf8(take(name_len)?)
            .map_err(|_| parse_err(path, "non-utf8 parameter name"))?
            .to_string();
        let ndim = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize);
        }
        let len: usize = shape.iter().product();
        let raw = take(len * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push(LoadedParam { name, shape, data });
    }
    if pos != bytes.len() {
        return Err(parse_err(path, "trailing bytes after last parameter"));
    }
    Ok(params)
}

/// Restores parameter values in place. Names and shapes must match the
/// model's declaration order exactly.
pub fn load_into(
    path: &Path,
    expected_digest: Option<&[u8; 32]>,
    params: &[(String, Tensor)],
) -> Result<()> {
    let loaded = load(path, expected_digest)?;
    if loaded.len() != params.len() {
        return Err(Error::Contract(format!(
            "checkpoint has {} parameters, model expects {}",
            loaded.len(),
            params.len()
        )));
    }
    for (got, (name, tensor)) in loaded.iter().zip(params) {
        if &got.name != name {
            return Err(Error::Contract(format!(
                "parameter order mismatch: checkpoint {:?}, model {:?}",
                got.name, name
            )));
        }
        if got.shape != tensor.shape() {
            return Err(Error::Contract(format!(
                "{}: checkpoint shape {:?}, model shape {:?}",
                name,
                got.shape,
                tensor.shape()
            )));
        }
        tensor.update_data(|d| d.copy_from_slice(&got.data));
    }
    Ok(())
}
