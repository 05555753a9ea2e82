//! Single-file run checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "ALDNCKPT"
//! version      u32      FORMAT_VERSION
//! iteration    u64      completed training iterations
//! opt_g step   u64
//! opt_d step   u64
//! config       u32 length + UTF-8 JSON of the TrainConfig snapshot
//! count        u32      number of tensor records
//! records      name (u16 length + UTF-8), dtype u8 (0 = f32, 1 = f64),
//!              rank u8, dims u64 * rank, raw element bytes
//! digest       32 bytes SHA-256 of everything above
//! ```
//!
//! Tensor names carry a group prefix: `generator/`, `discriminator/`,
//! `opt_g.m/`, `opt_g.v/`, `opt_d.m/`, `opt_d.v/`. The batch order and the
//! contrastive sampler are keyed by `(seed, iteration)`, so the seed in the
//! config snapshot and the iteration counter are the complete RNG state.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::AdamState;
use crate::training::{TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"ALDNCKPT";
pub const FORMAT_VERSION: u32 = 1;

const GENERATOR: &str = "generator/";
const DISCRIMINATOR: &str = "discriminator/";

/// Fully parsed checkpoint contents.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub iteration: u64,
    pub config: TrainConfig,
    pub generator: BTreeMap<String, Tensor>,
    pub discriminator: Option<BTreeMap<String, Tensor>>,
    pub opt_g: AdamState,
    pub opt_d: AdamState,
}

/// Hash of the settings that determine the numeric trajectory. Run length and
/// logging cadence are excluded so a run can be extended on resume.
pub fn config_hash(config: &TrainConfig) -> [u8; 32] {
    let mut c = config.clone();
    c.total_iterations = 1;
    c.log_every = 1;
    c.checkpoint_every = 0;
    let json = serde_json::to_vec(&c).expect("config serializes");
    Sha256::digest(&json).into()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn from_state(state: &TrainState) -> Result<Self> {
        Ok(Self {
            iteration: state.iteration,
            config: state.config.clone(),
            generator: state.generator.params().snapshot()?,
            discriminator: state.discriminator.as_ref().map(|d| d.params().snapshot()).transpose()?,
            opt_g: state.opt_g.state().clone(),
            opt_d: state.opt_d.state().clone(),
        })
    }

    /// A warning when `config` hashes differently from the snapshot.
    pub fn config_mismatch(&self, config: &TrainConfig) -> Option<String> {
        let (ours, theirs) = (config_hash(&self.config), config_hash(config));
        (ours != theirs).then(|| {
            format!(
                "checkpoint config hash {} differs from requested config hash {}; continuing with the checkpoint's settings",
                &hex(&ours)[..16],
                &hex(&theirs)[..16]
            )
        })
    }

    /// Overwrites `state` with the checkpoint contents. Every parameter group
    /// is validated before anything is written.
    pub fn restore_into(&self, state: &mut TrainState) -> Result<()> {
        state.generator.params().check_compatible(&self.generator)?;
        match (&state.discriminator, &self.discriminator) {
            (Some(d), Some(values)) => d.params().check_compatible(values)?,
            (None, None) => {}
            (Some(_), None) => {
                return Err(Error::CheckpointMismatch(
                    "model has a discriminator but the checkpoint holds none".into(),
                ))
            }
            (None, Some(_)) => {
                return Err(Error::CheckpointMismatch(
                    "checkpoint holds a discriminator but the model has none".into(),
                ))
            }
        }
        state.generator.params().assign(&self.generator)?;
        if let (Some(d), Some(values)) = (&state.discriminator, &self.discriminator) {
            d.params().assign(values)?;
        }
        state.opt_g.set_state(self.opt_g.clone());
        state.opt_d.set_state(self.opt_d.clone());
        state.iteration = self.iteration;
        Ok(())
    }

    /// Builds a fresh state from the config snapshot and restores into it.
    pub fn into_state(self) -> Result<TrainState> {
        let mut state = TrainState::new(self.config.clone())?;
        self.restore_into(&mut state)?;
        Ok(state)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.opt_g.step.to_le_bytes());
        out.extend_from_slice(&self.opt_d.step.to_le_bytes());
        let json = serde_json::to_vec(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);

        let mut groups: Vec<(&str, &BTreeMap<String, Tensor>)> = vec![(GENERATOR, &self.generator)];
        if let Some(d) = &self.discriminator {
            groups.push((DISCRIMINATOR, d));
        }
        groups.extend([
            ("opt_g.m/", &self.opt_g.first),
            ("opt_g.v/", &self.opt_g.second),
            ("opt_d.m/", &self.opt_d.first),
            ("opt_d.v/", &self.opt_d.second),
        ]);
        let records: Vec<(String, &Tensor)> = groups
            .into_iter()
            .flat_map(|(prefix, map)| map.iter().map(move |(k, v)| (format!("{prefix}{k}"), v)))
            .collect();

        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, t) in records {
            write_tensor(&mut out, &name, t)?;
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    /// Parses a complete container; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < MAGIC.len() + 4 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing ALDNCKPT header".into()));
        }
        let found = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if found != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                expected: FORMAT_VERSION,
                found,
            });
        }
        if bytes.len() < 12 + 32 {
            return Err(corrupt("file is truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("digest mismatch (truncated or modified file)".into()));
        }

        let mut r = Reader { buf: body, pos: 12 };
        let mut inner = || -> std::result::Result<Self, String> {
            let iteration = r.u64()?;
            let step_g = r.u64()?;
            let step_d = r.u64()?;
            let json_len = r.u32()? as usize;
            let config: TrainConfig =
                serde_json::from_slice(r.take(json_len)?).map_err(|e| format!("config snapshot: {e}"))?;
            let count = r.u32()?;
            let mut generator = BTreeMap::new();
            let mut discriminator = BTreeMap::new();
            let mut opt_g = AdamState { step: step_g, ..Default::default() };
            let mut opt_d = AdamState { step: step_d, ..Default::default() };
            for _ in 0..count {
                let (name, t) = r.tensor()?;
                let (group, key) = name
                    .split_once('/')
                    .ok_or_else(|| format!("tensor `{name}` has no group prefix"))?;
                let slot = match group {
                    "generator" => &mut generator,
                    "discriminator" => &mut discriminator,
                    "opt_g.m" => &mut opt_g.first,
                    "opt_g.v" => &mut opt_g.second,
                    "opt_d.m" => &mut opt_d.first,
                    "opt_d.v" => &mut opt_d.second,
                    other => return Err(format!("unknown tensor group `{other}`")),
                };
                if slot.insert(key.to_string(), t).is_some() {
                    return Err(format!("duplicate tensor `{name}`"));
                }
            }
            if r.pos != r.buf.len() {
                return Err(format!("{} trailing bytes", r.buf.len() - r.pos));
            }
            Ok(Self {
                iteration,
                discriminator: config.objective.enable_aad.then_some(discriminator),
                config,
                generator,
                opt_g,
                opt_d,
            })
        };
        inner().map_err(corrupt)
    }
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    let name_len = u16::try_from(name.len())
        .map_err(|_| Error::InvalidArgument(format!("tensor name `{name}` too long")))?;
    out.extend_from_slice(&name_len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    let flat = t.flatten_all()?;
    let code: u8 = match t.dtype() {
        DType::F32 => 0,
        DType::F64 => 1,
        other => return Err(Error::InvalidArgument(format!("tensor `{name}` has unsupported dtype {other:?}"))),
    };
    out.push(code);
    out.push(t.rank() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    if code == 0 {
        for v in flat.to_vec1::<f32>()? {
            out.extend_from_slice(&v.to_le_bytes());
        }
    } else {
        for v in flat.to_vec1::<f64>()? {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("unexpected end of data at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> std::result::Result<(String, Tensor), String> {
        let len = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| "tensor name is not UTF-8".to_string())?
            .to_string();
        let code = self.u8()?;
        let rank = self.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u64()? as usize);
        }
        let n: usize = dims.iter().product();
        let dev = Device::Cpu;
        let t = match code {
            0 => {
                let raw = self.take(n.checked_mul(4).ok_or("tensor too large")?)?;
                let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, dims, &dev)
            }
            1 => {
                let raw = self.take(n.checked_mul(8).ok_or("tensor too large")?)?;
                let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, dims, &dev)
            }
            other => return Err(format!("tensor `{name}` has unknown dtype code {other}")),
        }
        .map_err(|e| format!("tensor `{name}`: {e}"))?;
        Ok((name, t))
    }
}

pub fn to_bytes(state: &TrainState) -> Result<Vec<u8>> {
    Checkpoint::from_state(state)?.to_bytes()
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<TrainState> {
    Checkpoint::from_bytes(bytes, path)?.into_state()
}

/// Writes atomically: a sibling temp file is renamed over `path`.
pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = to_bytes(state)?;
    let tmp: PathBuf = {
        let mut name = path.file_name().unwrap_or_default().to_os_string();
        name.push(".tmp");
        path.with_file_name(name)
    };
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}
