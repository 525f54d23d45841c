//! Bit-exact persistence: the GVOL volume format, GVCK model checkpoints,
//! and human-readable dataset manifests.
//!
//! GVOL layout (little-endian): magic "GVOL", version u16, dtype u8
//! (0 = f32, 1 = f64, 2 = i32), extents Z, Y, X as u32, spacing 3 x f64,
//! channel count u32, then raw values in C order with x fastest and the
//! channel outermost.
//!
//! GVCK layout: magic "GVCK", version u16, arch (levels, base channels,
//! groups, in channels as u32), rng state (32-byte seed, stream u64, word
//! position as two u64), iteration u64, tensor table (count u32, then name
//! and shape per tensor), per-tensor payloads (parameter values, Adam step
//! count, first and second moments), and a trailing SHA-256 of everything
//! before it.
//!
//! Files are written to a temporary sibling and atomically renamed.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{AffineParams, Dvf};
use crate::models::{hex_string, BackboneArch, ModelWeights};
use crate::optim::AdamState;
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::volume::{LabelVolume, Volume, VolumeError};

pub const VOLUME_MAGIC: &[u8; 4] = b"GVOL";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GVCK";
pub const FORMAT_VERSION: u16 = 1;

/// Refuse to allocate more than this many payload bytes unless overridden.
pub const DEFAULT_MAX_PAYLOAD: u64 = 1 << 30;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: bad magic, expected {expected:?}")]
    BadMagic { path: PathBuf, expected: String },
    #[error("{path}: unsupported format version {version}")]
    UnsupportedVersion { path: PathBuf, version: u16 },
    #[error("{path}: unknown dtype tag {tag}")]
    BadDtype { path: PathBuf, tag: u8 },
    #[error("{path}: truncated payload, expected {expected} bytes, got {actual}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },
    #[error("{path}: header claims {bytes} payload bytes, limit is {limit}")]
    PayloadTooLarge {
        path: PathBuf,
        bytes: u64,
        limit: u64,
    },
    #[error("{path}: content checksum mismatch")]
    ChecksumMismatch { path: PathBuf },
    #[error("{path}: expected dtype {expected}, file has {actual}")]
    DtypeMismatch {
        path: PathBuf,
        expected: &'static str,
        actual: &'static str,
    },
    #[error("checkpoint does not match the expected architecture: {detail}")]
    ArchMismatch { detail: String },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("{path}: file checksum {actual} does not match manifest entry {expected}")]
    ManifestChecksum {
        path: PathBuf,
        expected: String,
        actual: String,
    },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("{path}: non-finite value in payload")]
    NonFinite { path: PathBuf },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes bytes to `path` via a temporary sibling and an atomic rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let tmp = path.with_extension(format!(
        "{}.tmp{}",
        path.extension().and_then(|e| e.to_str()).unwrap_or(""),
        std::process::id()
    ));
    {
        let mut f = BufWriter::new(File::create(&tmp).map_err(io_err(&tmp))?);
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.flush().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn sha256_file(path: &Path) -> Result<String, IoError> {
    let mut f = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut h = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = f.read(&mut buf).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex_string(&h.finalize()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    I32,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
            Dtype::I32 => 2,
        }
    }

    fn from_tag(tag: u8, path: &Path) -> Result<Self, IoError> {
        match tag {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            2 => Ok(Dtype::I32),
            _ => Err(IoError::BadDtype {
                path: path.to_path_buf(),
                tag,
            }),
        }
    }

    fn size(self) -> u64 {
        4 + (self == Dtype::F64) as u64 * 4
    }

    fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
            Dtype::I32 => "i32",
        }
    }
}

struct GvolHeader {
    dtype: Dtype,
    extents: [usize; 3],
    spacing: [f64; 3],
    channels: usize,
}

fn encode_gvol(header: &GvolHeader, payload: impl FnOnce(&mut Vec<u8>)) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(header.dtype.tag());
    for &e in &header.extents {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &s in &header.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.extend_from_slice(&(header.channels as u32).to_le_bytes());
    payload(&mut out);
    out
}

fn read_gvol_header(
    r: &mut impl Read,
    path: &Path,
    max_payload: u64,
) -> Result<GvolHeader, IoError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err(path))?;
    if &magic != VOLUME_MAGIC {
        return Err(IoError::BadMagic {
            path: path.to_path_buf(),
            expected: "GVOL".into(),
        });
    }
    let mut buf2 = [0u8; 2];
    r.read_exact(&mut buf2).map_err(io_err(path))?;
    let version = u16::from_le_bytes(buf2);
    if version != FORMAT_VERSION {
        return Err(IoError::UnsupportedVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let mut b1 = [0u8; 1];
    r.read_exact(&mut b1).map_err(io_err(path))?;
    let dtype = Dtype::from_tag(b1[0], path)?;
    let mut extents = [0usize; 3];
    for e in &mut extents {
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(io_err(path))?;
        *e = u32::from_le_bytes(b4) as usize;
    }
    let mut spacing = [0f64; 3];
    for s in &mut spacing {
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(io_err(path))?;
        *s = f64::from_le_bytes(b8);
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(io_err(path))?;
    let channels = u32::from_le_bytes(b4) as usize;
    let bytes = extents.iter().product::<usize>() as u64 * channels as u64 * dtype.size();
    if bytes > max_payload {
        return Err(IoError::PayloadTooLarge {
            path: path.to_path_buf(),
            bytes,
            limit: max_payload,
        });
    }
    Ok(GvolHeader {
        dtype,
        extents,
        spacing,
        channels,
    })
}

fn read_exact_payload(r: &mut impl Read, path: &Path, expected: u64) -> Result<Vec<u8>, IoError> {
    let mut data = Vec::new();
    r.read_to_end(&mut data).map_err(io_err(path))?;
    if data.len() as u64 != expected {
        return Err(IoError::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: data.len() as u64,
        });
    }
    Ok(data)
}

/// Writes a scalar volume as one f64 channel.
pub fn write_volume(path: &Path, vol: &Volume) -> Result<(), IoError> {
    write_volume_as(path, vol, Dtype::F64)
}

/// Writes a scalar volume with the requested float dtype.
pub fn write_volume_as(path: &Path, vol: &Volume, dtype: Dtype) -> Result<(), IoError> {
    assert!(dtype != Dtype::I32, "scalar volumes are float");
    let header = GvolHeader {
        dtype,
        extents: vol.extents(),
        spacing: vol.spacing,
        channels: 1,
    };
    let bytes = encode_gvol(&header, |out| {
        for &v in vol.data() {
            match dtype {
                Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
                Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::I32 => unreachable!(),
            }
        }
    });
    atomic_write(path, &bytes)
}

pub fn read_volume(path: &Path) -> Result<Volume, IoError> {
    read_volume_with_limit(path, DEFAULT_MAX_PAYLOAD)
}

pub fn read_volume_with_limit(path: &Path, max_payload: u64) -> Result<Volume, IoError> {
    let mut r = BufReader::new(File::open(path).map_err(io_err(path))?);
    let header = read_gvol_header(&mut r, path, max_payload)?;
    if header.dtype == Dtype::I32 {
        return Err(IoError::DtypeMismatch {
            path: path.to_path_buf(),
            expected: "f32 or f64",
            actual: "i32",
        });
    }
    let count = header.extents.iter().product::<usize>() * header.channels;
    let bytes = read_exact_payload(&mut r, path, count as u64 * header.dtype.size())?;
    if header.channels != 1 {
        return Err(IoError::Manifest(format!(
            "{}: expected 1 channel, found {}",
            path.display(),
            header.channels
        )));
    }
    let data = decode_floats(&bytes, header.dtype);
    if data.iter().any(|v| !v.is_finite()) {
        return Err(IoError::NonFinite {
            path: path.to_path_buf(),
        });
    }
    let mut v = Volume::new(data, header.extents)?;
    v.spacing = header.spacing;
    Ok(v)
}

fn decode_floats(bytes: &[u8], dtype: Dtype) -> Vec<f64> {
    match dtype {
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::I32 => unreachable!(),
    }
}

pub fn write_labels(path: &Path, labels: &LabelVolume) -> Result<(), IoError> {
    let header = GvolHeader {
        dtype: Dtype::I32,
        extents: labels.extents(),
        spacing: [1.0; 3],
        channels: 1,
    };
    let bytes = encode_gvol(&header, |out| {
        for &v in labels.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    atomic_write(path, &bytes)
}

pub fn read_labels(path: &Path) -> Result<LabelVolume, IoError> {
    let mut r = BufReader::new(File::open(path).map_err(io_err(path))?);
    let header = read_gvol_header(&mut r, path, DEFAULT_MAX_PAYLOAD)?;
    if header.dtype != Dtype::I32 {
        return Err(IoError::DtypeMismatch {
            path: path.to_path_buf(),
            expected: "i32",
            actual: header.dtype.name(),
        });
    }
    let count = header.extents.iter().product::<usize>() * header.channels;
    let bytes = read_exact_payload(&mut r, path, count as u64 * 4)?;
    let data: Vec<i32> = bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(LabelVolume::new(data, header.extents)?)
}

/// Writes a displacement field as three f64 channels (u_x, u_y, u_z).
pub fn write_dvf(path: &Path, dvf: &Dvf) -> Result<(), IoError> {
    let header = GvolHeader {
        dtype: Dtype::F64,
        extents: dvf.extents(),
        spacing: dvf.spacing,
        channels: 3,
    };
    let bytes = encode_gvol(&header, |out| {
        for &v in dvf.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    atomic_write(path, &bytes)
}

pub fn read_dvf(path: &Path) -> Result<Dvf, IoError> {
    let mut r = BufReader::new(File::open(path).map_err(io_err(path))?);
    let header = read_gvol_header(&mut r, path, DEFAULT_MAX_PAYLOAD)?;
    if header.dtype != Dtype::F64 || header.channels != 3 {
        return Err(IoError::DtypeMismatch {
            path: path.to_path_buf(),
            expected: "f64 x3 channels",
            actual: header.dtype.name(),
        });
    }
    let count = header.extents.iter().product::<usize>() * 3;
    let bytes = read_exact_payload(&mut r, path, count as u64 * 8)?;
    let data = decode_floats(&bytes, Dtype::F64);
    if data.iter().any(|v| !v.is_finite()) {
        return Err(IoError::NonFinite {
            path: path.to_path_buf(),
        });
    }
    let mut d = Dvf::new(data, header.extents)
        .map_err(|_| IoError::Manifest(format!("{}: bad dvf layout", path.display())))?;
    d.spacing = header.spacing;
    Ok(d)
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

/// Everything needed to resume training bit-exactly.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub weights: ModelWeights,
    pub rng: RngState,
    pub iteration: u64,
}

fn push_tensor(out: &mut Vec<u8>, t: &Tensor) {
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), IoError> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let a = &ckpt.weights.arch;
    for v in [a.levels, a.base_channels, a.groups, a.in_channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&ckpt.rng.seed);
    out.extend_from_slice(&ckpt.rng.stream.to_le_bytes());
    out.extend_from_slice(&ckpt.rng.word_pos_lo.to_le_bytes());
    out.extend_from_slice(&ckpt.rng.word_pos_hi.to_le_bytes());
    out.extend_from_slice(&ckpt.iteration.to_le_bytes());
    out.extend_from_slice(&(ckpt.weights.tensors.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.weights.tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for (name, t) in &ckpt.weights.tensors {
        push_tensor(&mut out, t);
        let st = &ckpt.weights.adam[name];
        out.extend_from_slice(&st.t.to_le_bytes());
        push_tensor(&mut out, &st.m);
        push_tensor(&mut out, &st.v);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    atomic_write(path, &out)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() < 32 {
        return Err(IoError::Truncated {
            path: path.to_path_buf(),
            expected: 32,
            actual: bytes.len() as u64,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(IoError::ChecksumMismatch {
            path: path.to_path_buf(),
        });
    }
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], IoError> {
        if *pos + n > body.len() {
            return Err(IoError::Truncated {
                path: path.to_path_buf(),
                expected: (*pos + n) as u64,
                actual: body.len() as u64,
            });
        }
        let s = &body[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    if take(&mut pos, 4)? != CHECKPOINT_MAGIC {
        return Err(IoError::BadMagic {
            path: path.to_path_buf(),
            expected: "GVCK".into(),
        });
    }
    let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(IoError::UnsupportedVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let mut arch_vals = [0usize; 4];
    for v in &mut arch_vals {
        *v = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    }
    let arch = BackboneArch {
        levels: arch_vals[0],
        base_channels: arch_vals[1],
        groups: arch_vals[2],
        in_channels: arch_vals[3],
    };
    let mut seed = [0u8; 32];
    seed.copy_from_slice(take(&mut pos, 32)?);
    let stream = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let word_pos_lo = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let word_pos_hi = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let iteration = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;

    let mut table: Vec<(String, Vec<usize>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, nlen)?.to_vec())
            .map_err(|_| IoError::Manifest(format!("{}: bad tensor name", path.display())))?;
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        table.push((name, shape));
    }

    let mut tensors = std::collections::BTreeMap::new();
    let mut adam = std::collections::BTreeMap::new();
    for (name, shape) in table {
        let n: usize = shape.iter().product();
        let read_t = |pos: &mut usize| -> Result<Tensor, IoError> {
            let raw = take(pos, n * 8)?;
            let data = decode_floats(raw, Dtype::F64);
            Tensor::new(shape.clone(), data)
                .map_err(|_| IoError::Manifest(format!("{}: bad tensor {}", path.display(), name)))
        };
        let t = read_t(&mut pos)?;
        let step = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let m = read_t(&mut pos)?;
        let v = read_t(&mut pos)?;
        adam.insert(name.clone(), AdamState { m, v, t: step });
        tensors.insert(name, t);
    }

    Ok(Checkpoint {
        weights: ModelWeights {
            arch,
            tensors,
            adam,
        },
        rng: RngState {
            seed,
            stream,
            word_pos_lo,
            word_pos_hi,
        },
        iteration,
    })
}

/// Verifies a loaded checkpoint against an expected architecture: same arch
/// numbers and exactly the parameter set that architecture implies. Reports
/// the first offending tensor by name.
pub fn verify_arch(ckpt: &Checkpoint, expected: &BackboneArch) -> Result<(), IoError> {
    if ckpt.weights.arch != *expected {
        return Err(IoError::ArchMismatch {
            detail: format!(
                "arch descriptor {:?} differs from expected {:?}",
                ckpt.weights.arch, expected
            ),
        });
    }
    for spec in crate::models::parameter_specs(expected) {
        match ckpt.weights.tensors.get(&spec.name) {
            None => {
                return Err(IoError::ArchMismatch {
                    detail: format!("missing tensor `{}`", spec.name),
                })
            }
            Some(t) if t.shape() != spec.shape.as_slice() => {
                return Err(IoError::ArchMismatch {
                    detail: format!(
                        "tensor `{}` has shape {:?}, expected {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    ),
                })
            }
            _ => {}
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// dataset manifests
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub volume: String,
    pub labels: String,
    pub gt_affine: String,
    pub gt_deform: String,
    pub split: Split,
    pub checksum_volume: String,
    pub checksum_labels: String,
    pub checksum_gt_affine: String,
    pub checksum_gt_deform: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub count: usize,
    pub extent: usize,
    pub regions: usize,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn split_entries(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }
}

pub fn save_manifest(path: &Path, manifest: &DatasetManifest) -> Result<(), IoError> {
    let text = toml::to_string(manifest).map_err(|e| IoError::Manifest(e.to_string()))?;
    atomic_write(path, text.as_bytes())
}

/// Parses a manifest and verifies that every referenced file exists and
/// matches its recorded checksum. Paths are relative to the manifest's
/// directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let manifest: DatasetManifest =
        toml::from_str(&text).map_err(|e| IoError::Manifest(e.to_string()))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    for e in &manifest.entries {
        for (rel, sum) in [
            (&e.volume, &e.checksum_volume),
            (&e.labels, &e.checksum_labels),
            (&e.gt_affine, &e.checksum_gt_affine),
            (&e.gt_deform, &e.checksum_gt_deform),
        ] {
            let p = dir.join(rel);
            let actual = sha256_file(&p)?;
            if &actual != sum {
                return Err(IoError::ManifestChecksum {
                    path: p,
                    expected: sum.clone(),
                    actual,
                });
            }
        }
    }
    Ok(manifest)
}

/// A dataset pulled into memory for training or evaluation.
#[derive(Debug, Clone)]
pub struct LoadedEntry {
    pub volume: Volume,
    pub labels: LabelVolume,
    pub gt_affine: AffineParams,
    pub gt_deform: Dvf,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub entries: Vec<LoadedEntry>,
}

impl LoadedDataset {
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn load_dataset(manifest_path: &Path) -> Result<LoadedDataset, IoError> {
    let manifest = load_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let volume = read_volume(&dir.join(&e.volume))?;
        let labels = read_labels(&dir.join(&e.labels))?;
        let affine_text =
            fs::read_to_string(dir.join(&e.gt_affine)).map_err(io_err(&dir.join(&e.gt_affine)))?;
        let gt_affine: AffineParams =
            toml::from_str(&affine_text).map_err(|er| IoError::Manifest(er.to_string()))?;
        let gt_deform = read_dvf(&dir.join(&e.gt_deform))?;
        entries.push(LoadedEntry {
            volume,
            labels,
            gt_affine,
            gt_deform,
            split: e.split,
        });
    }
    Ok(LoadedDataset { manifest, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;

    #[test]
    fn volume_round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join(format!("gvol-test-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let mut rng = DetRng::from_seed_u64(1);
        let mut vol = Volume::from_fn([8, 8, 8], |_, _, _| rng.next_f64());
        vol.spacing = [1.0, 1.5, 2.0];
        let p = dir.join("v.gvol");
        write_volume(&p, &vol).unwrap();
        let back = read_volume(&p).unwrap();
        assert_eq!(vol, back);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn wrong_magic_is_a_typed_error() {
        let dir = std::env::temp_dir().join(format!("gvol-magic-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let p = dir.join("bad.gvol");
        fs::write(&p, b"NOPE rest of file").unwrap();
        assert!(matches!(read_volume(&p), Err(IoError::BadMagic { .. })));
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn truncated_payload_names_expected_and_actual() {
        let dir = std::env::temp_dir().join(format!("gvol-trunc-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let vol = Volume::from_fn([4, 4, 4], |z, y, x| (z + y + x) as f64 / 12.0);
        let p = dir.join("t.gvol");
        write_volume(&p, &vol).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 9]).unwrap();
        match read_volume(&p) {
            Err(IoError::Truncated {
                expected, actual, ..
            }) => {
                assert_eq!(expected, 4 * 4 * 4 * 8);
                assert_eq!(actual, 4 * 4 * 4 * 8 - 9);
            }
            other => panic!("unexpected {other:?}"),
        }
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn oversized_header_is_rejected_before_allocation() {
        let dir = std::env::temp_dir().join(format!("gvol-big-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let p = dir.join("big.gvol");
        let header = GvolHeader {
            dtype: Dtype::F64,
            extents: [100000, 100000, 100000],
            spacing: [1.0; 3],
            channels: 1,
        };
        let bytes = encode_gvol(&header, |_| {});
        fs::write(&p, bytes).unwrap();
        assert!(matches!(
            read_volume(&p),
            Err(IoError::PayloadTooLarge { .. })
        ));
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn f32_volumes_read_back_with_expected_precision() {
        let dir = std::env::temp_dir().join(format!("gvol-f32-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let vol = Volume::from_fn([4, 4, 4], |z, y, x| (z * 16 + y * 4 + x) as f64 / 64.0);
        let p = dir.join("v32.gvol");
        write_volume_as(&p, &vol, Dtype::F32).unwrap();
        let back = read_volume(&p).unwrap();
        for (a, b) in vol.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        fs::remove_dir_all(&dir).ok();
    }
}
