//! Checkpoints: a little-endian binary parameter file plus a JSON manifest
//! next to it.

use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::{BnParams, LayerParams, ParamStore};
use crate::search_space::{SearchSpace, WidthConfig};
use crate::supernet::BnMode;
use crate::tensor::Scalar;

const MAGIC: &[u8; 8] = b"CPRNCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub space_name: String,
    pub space_hash: String,
    pub dtype: String,
    /// Completed optimizer steps.
    pub iteration: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Planned total steps of the run.
    pub total_iterations: u64,
    pub bn_mode: BnMode,
    pub calibrated_for: Option<WidthConfig>,
    /// Generator state to continue from.
    pub rng: ChaCha8Rng,
    pub weights_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub params: ParamStore<T>,
    /// Optimizer momentum buffers, one per trainable slot.
    pub velocity: Vec<Vec<T>>,
    pub manifest: CheckpointManifest,
}

/// Manifest path belonging to a checkpoint file.
pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn put_vec<T: Scalar>(out: &mut Vec<u8>, v: &[T]) {
    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
    for &x in v {
        x.write_le(out);
    }
}

fn put_opt<T: Scalar>(out: &mut Vec<u8>, v: Option<&Vec<T>>) {
    match v {
        Some(v) => {
            out.push(1);
            put_vec(out, v);
        }
        None => out.push(0),
    }
}

fn encode<T: Scalar>(params: &ParamStore<T>, velocity: &[Vec<T>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::BYTES as u8);
    out.extend_from_slice(&(params.layers.len() as u64).to_le_bytes());
    for p in &params.layers {
        put_vec(&mut out, &p.weight);
        put_opt(&mut out, p.bias.as_ref());
        match &p.bn {
            Some(bn) => {
                out.push(1);
                for v in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var] {
                    put_vec(&mut out, v);
                }
            }
            None => out.push(0),
        }
    }
    out.extend_from_slice(&(velocity.len() as u64).to_le_bytes());
    for v in velocity {
        put_vec(&mut out, v);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{}: truncated at byte {}",
                self.path.display(),
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn vec<T: Scalar>(&mut self) -> Result<Vec<T>> {
        let n = self.u64()? as usize;
        let raw = self.take(n.checked_mul(T::BYTES).ok_or_else(|| {
            Error::Checkpoint(format!("{}: corrupt length", self.path.display()))
        })?)?;
        Ok(raw.chunks_exact(T::BYTES).map(T::read_le).collect())
    }

    fn opt<T: Scalar>(&mut self) -> Result<Option<Vec<T>>> {
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(self.vec()?)),
            f => Err(Error::Checkpoint(format!(
                "{}: bad option flag {f}",
                self.path.display()
            ))),
        }
    }
}

fn decode<T: Scalar>(bytes: &[u8], path: &Path) -> Result<(ParamStore<T>, Vec<Vec<T>>)> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint file", path.display())));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported format version {version}",
            path.display()
        )));
    }
    let width = r.u8()? as usize;
    if width != T::BYTES {
        return Err(Error::Checkpoint(format!(
            "{}: stored {width}-byte floats, expected {}",
            path.display(),
            T::NAME
        )));
    }
    let n_layers = r.u64()? as usize;
    let mut layers = Vec::with_capacity(n_layers.min(1 << 16));
    for _ in 0..n_layers {
        let weight = r.vec()?;
        let bias = r.opt()?;
        let bn = match r.u8()? {
            0 => None,
            _ => Some(BnParams {
                gamma: r.vec()?,
                beta: r.vec()?,
                running_mean: r.vec()?,
                running_var: r.vec()?,
            }),
        };
        layers.push(LayerParams { weight, bias, bn });
    }
    let n_vel = r.u64()? as usize;
    let velocity = (0..n_vel).map(|_| r.vec()).collect::<Result<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{}: trailing bytes", path.display())));
    }
    Ok((ParamStore { layers }, velocity))
}

/// Writes `path` and its manifest. The manifest's hash field is filled in
/// from the encoded parameters.
pub fn save<T: Scalar>(
    path: &Path,
    params: &ParamStore<T>,
    velocity: &[Vec<T>],
    mut manifest: CheckpointManifest,
) -> Result<CheckpointManifest> {
    let bytes = encode(params, velocity);
    manifest.weights_sha256 = hex::encode(Sha256::digest(&bytes));
    manifest.dtype = T::NAME.to_string();
    manifest.format_version = VERSION;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

/// Reads a checkpoint and verifies it against its manifest and, when given,
/// the search space it must belong to.
pub fn load<T: Scalar>(path: &Path, space: Option<&SearchSpace>) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::parse(&mpath, e))?;
    if hex::encode(Sha256::digest(&bytes)) != manifest.weights_sha256 {
        return Err(Error::Checkpoint(format!(
            "{}: contents do not match the manifest hash",
            path.display()
        )));
    }
    if let Some(space) = space {
        if space.hash_hex() != manifest.space_hash {
            return Err(Error::Checkpoint(format!(
                "{}: checkpoint belongs to a different search space ('{}')",
                path.display(),
                manifest.space_name
            )));
        }
    }
    let (params, velocity) = decode(&bytes, path)?;
    Ok(Checkpoint {
        params,
        velocity,
        manifest,
    })
}
