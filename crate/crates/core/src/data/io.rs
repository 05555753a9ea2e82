//! Raw float32 slice files with `.meta` sidecars, and tab-separated manifests.
//!
//! A slice `foo.f32` holds `height * width` little-endian f32 values in
//! row-major order; `foo.meta` holds `height=<int>` and `width=<int>` lines
//! (an optional `hu_offset=<float>` is added to every value on read).
//!
//! Manifest lines are either `ldct<TAB>ndct<TAB>sample_id` (paired) or
//! `slice<TAB>sample_id` (single slices). Relative paths resolve against the
//! manifest's directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{CtSlice, PairedSample};
use crate::error::{Error, Result};

pub fn meta_path(slice_path: &Path) -> PathBuf {
    slice_path.with_extension("meta")
}

pub fn write_slice(path: &Path, slice: &CtSlice) -> Result<()> {
    let mut bytes = Vec::with_capacity(slice.height() * slice.width() * 4);
    for v in slice.pixels().iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let meta = format!("height={}\nwidth={}\n", slice.height(), slice.width());
    let mp = meta_path(path);
    fs::write(&mp, meta).map_err(|e| Error::io(mp, e))
}

fn parse_meta(text: &str) -> std::result::Result<(usize, usize, f32), String> {
    let (mut h, mut w, mut offset) = (None, None, 0.0f32);
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("meta line `{line}` is not key=value"))?;
        let value = value.trim();
        match key.trim() {
            "height" => h = Some(value.parse().map_err(|e| format!("height: {e}"))?),
            "width" => w = Some(value.parse().map_err(|e| format!("width: {e}"))?),
            "hu_offset" => offset = value.parse().map_err(|e| format!("hu_offset: {e}"))?,
            other => return Err(format!("unknown meta key `{other}`")),
        }
    }
    match (h, w) {
        (Some(h), Some(w)) => Ok((h, w, offset)),
        _ => Err("meta must define height and width".into()),
    }
}

fn read_slice_inner(path: &Path) -> std::result::Result<CtSlice, String> {
    let mp = meta_path(path);
    let meta = fs::read_to_string(&mp).map_err(|e| format!("{}: {e}", mp.display()))?;
    let (h, w, offset) = parse_meta(&meta)?;
    let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    if bytes.len() != h * w * 4 {
        return Err(format!(
            "{} holds {} bytes, expected {} for {h}x{w} float32",
            path.display(),
            bytes.len(),
            h * w * 4
        ));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) + offset)
        .collect();
    CtSlice::from_vec(h, w, values).map_err(|e| e.to_string())
}

pub fn read_slice(path: &Path) -> Result<CtSlice> {
    read_slice_inner(path).map_err(|reason| Error::SampleLoad {
        sample_id: path.display().to_string(),
        reason,
    })
}

/// One manifest line. `reference` is the NDCT path for paired records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub primary: PathBuf,
    pub reference: Option<PathBuf>,
    pub sample_id: String,
}

impl ManifestRecord {
    /// The normal-dose slice: the reference of a pair, or the only slice.
    pub fn ndct(&self) -> &Path {
        self.reference.as_deref().unwrap_or(&self.primary)
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &str| {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let record = match fields.as_slice() {
            [ldct, ndct, id] => ManifestRecord {
                primary: resolve(ldct),
                reference: Some(resolve(ndct)),
                sample_id: id.to_string(),
            },
            [slice, id] => ManifestRecord {
                primary: resolve(slice),
                reference: None,
                sample_id: id.to_string(),
            },
            _ => {
                return Err(Error::Manifest {
                    path: path.to_path_buf(),
                    line: i + 1,
                    reason: format!("expected 2 or 3 tab-separated fields, found {}", fields.len()),
                })
            }
        };
        records.push(record);
    }
    Ok(records)
}

/// Loads every pair of a paired manifest, in manifest order.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<PairedSample>> {
    let records = read_manifest(manifest_path)?;
    records
        .into_iter()
        .map(|r| {
            let ndct_path = r.reference.as_ref().ok_or_else(|| Error::SampleLoad {
                sample_id: r.sample_id.clone(),
                reason: "record has no NDCT column".into(),
            })?;
            let load = |p: &Path| {
                read_slice_inner(p).map_err(|reason| Error::SampleLoad {
                    sample_id: r.sample_id.clone(),
                    reason,
                })
            };
            let ldct = load(&r.primary)?;
            let ndct = load(ndct_path)?;
            if ldct.dims() != ndct.dims() {
                return Err(Error::SampleLoad {
                    sample_id: r.sample_id.clone(),
                    reason: format!(
                        "shape mismatch: ldct {:?} vs ndct {:?}",
                        ldct.dims(),
                        ndct.dims()
                    ),
                });
            }
            PairedSample::new(ldct, ndct, r.sample_id)
        })
        .collect()
}

fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for line in lines {
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn write_pair_manifest<'a>(
    path: &Path,
    records: impl IntoIterator<Item = (&'a Path, &'a Path, &'a str)>,
) -> Result<()> {
    write_lines(
        path,
        records
            .into_iter()
            .map(|(l, n, id)| format!("{}\t{}\t{id}", l.display(), n.display())),
    )
}

pub fn write_slice_manifest<'a>(
    path: &Path,
    records: impl IntoIterator<Item = (&'a Path, &'a str)>,
) -> Result<()> {
    write_lines(
        path,
        records
            .into_iter()
            .map(|(p, id)| format!("{}\t{id}", p.display())),
    )
}
