//! On-disk draw archives and delimited tables.
//!
//! An archive is a directory holding `manifest.toml` and one `<block>.bin`
//! per parameter block. Payloads are row-major little-endian `f64`, one row per
//! draw. Archives and tables are written to a temporary sibling and renamed
//! into place, so a failed write leaves nothing behind.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::gibbs::{PosteriorDraws, PriorKind};
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.toml";
const FORMAT_VERSION: u32 = 1;

/// Hex SHA-256 of a resolved configuration text.
pub fn config_hash(resolved: &str) -> String {
    hex::encode(Sha256::digest(resolved.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub prior: PriorKind,
    pub seed: u64,
    pub draws: usize,
    pub config_hash: String,
    pub blocks: Vec<BlockEntry>,
}

impl Manifest {
    pub fn block(&self, name: &str) -> Option<&BlockEntry> {
        self.blocks.iter().find(|b| b.name == name)
    }
}

fn blocks_of(draws: &PosteriorDraws) -> Vec<(String, DMatrix<f64>)> {
    let col = |v: &[f64]| DMatrix::from_column_slice(v.len(), 1, v);
    let mut out = vec![
        ("b_star".to_string(), draws.b_star.clone()),
        ("alpha".to_string(), draws.alpha.clone()),
        ("sigma2".to_string(), col(&draws.sigma2)),
        ("sigma_j2".to_string(), draws.sigma_j2.clone()),
    ];
    for (a, m) in draws.adaptive.iter().enumerate() {
        out.push((format!("adaptive_{a}"), m.clone()));
    }
    if let Some(h) = &draws.h {
        out.push(("h".to_string(), h.clone()));
        out.push(("mu_h".to_string(), col(&draws.mu_h)));
        out.push(("phi".to_string(), col(&draws.phi)));
    }
    out.push(("lambda0".to_string(), col(&draws.lambda0)));
    // One row: a posterior summary, not a per-draw quantity.
    out.push(("fitted_mean".to_string(), DMatrix::from_row_slice(1, draws.fitted_mean.len(), draws.fitted_mean.as_slice())));
    out
}

fn encode(m: &DMatrix<f64>) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(8 * m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            bytes.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    bytes
}

fn decode(bytes: &[u8], rows: usize, cols: usize, path: &Path) -> Result<DMatrix<f64>> {
    if bytes.len() != 8 * rows * cols {
        return Err(Error::parse(path, format!("expected {} bytes, found {}", 8 * rows * cols, bytes.len())));
    }
    let vals: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(DMatrix::from_row_slice(rows, cols, &vals))
}

fn temp_sibling(target: &Path) -> Result<PathBuf> {
    let name = target
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("{} has no file name", target.display())))?
        .to_string_lossy()
        .into_owned();
    Ok(target.with_file_name(format!(".{name}.tmp-{}", std::process::id())))
}

/// Writes `draws` to the directory `dir`, replacing any previous archive.
pub fn write_archive(dir: &Path, draws: &PosteriorDraws, config_hash: &str) -> Result<Manifest> {
    if let Some(parent) = dir.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = temp_sibling(dir)?;
    let result = write_archive_into(&tmp, draws, config_hash).and_then(|m| {
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
        Ok(m)
    });
    if result.is_err() {
        let _ = fs::remove_dir_all(&tmp);
    }
    result
}

fn write_archive_into(tmp: &Path, draws: &PosteriorDraws, config_hash: &str) -> Result<Manifest> {
    if tmp.exists() {
        fs::remove_dir_all(tmp).map_err(|e| Error::io(tmp, e))?;
    }
    fs::create_dir_all(tmp).map_err(|e| Error::io(tmp, e))?;
    let mut entries = Vec::new();
    for (name, m) in blocks_of(draws) {
        let file = format!("{name}.bin");
        let path = tmp.join(&file);
        fs::write(&path, encode(&m)).map_err(|e| Error::io(&path, e))?;
        entries.push(BlockEntry {
            name,
            rows: m.nrows(),
            cols: m.ncols(),
            file,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        prior: draws.prior,
        seed: draws.seed,
        draws: draws.n_draws(),
        config_hash: config_hash.to_string(),
        blocks: entries,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let path = tmp.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::parse(&path, e))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::parse(&path, format!("unsupported format version {}", m.format_version)));
    }
    Ok(m)
}

fn read_block(dir: &Path, manifest: &Manifest, name: &str) -> Result<Option<DMatrix<f64>>> {
    let Some(entry) = manifest.block(name) else {
        return Ok(None);
    };
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    decode(&bytes, entry.rows, entry.cols, &path).map(Some)
}

/// Reads an archive written by [`write_archive`].
pub fn read_archive(dir: &Path) -> Result<(Manifest, PosteriorDraws)> {
    let manifest = read_manifest(dir)?;
    let s = manifest.draws;
    let required = |name: &str| -> Result<DMatrix<f64>> {
        let m = read_block(dir, &manifest, name)?
            .ok_or_else(|| Error::parse(dir.join(MANIFEST), format!("missing block {name}")))?;
        if name != "fitted_mean" && m.nrows() != s {
            return Err(Error::parse(dir.join(MANIFEST), format!("block {name} has {} rows, expected {s}", m.nrows())));
        }
        Ok(m)
    };
    let column = |name: &str| -> Result<Vec<f64>> { Ok(required(name)?.column(0).iter().copied().collect()) };
    let mut adaptive = Vec::new();
    while let Some(m) = read_block(dir, &manifest, &format!("adaptive_{}", adaptive.len()))? {
        adaptive.push(m);
    }
    let h = read_block(dir, &manifest, "h")?;
    let (mu_h, phi) = if h.is_some() {
        (column("mu_h")?, column("phi")?)
    } else {
        (Vec::new(), Vec::new())
    };
    let fitted = required("fitted_mean")?;
    let draws = PosteriorDraws {
        prior: manifest.prior,
        seed: manifest.seed,
        b_star: required("b_star")?,
        alpha: required("alpha")?,
        sigma2: column("sigma2")?,
        sigma_j2: required("sigma_j2")?,
        adaptive,
        h,
        mu_h,
        phi,
        lambda0: column("lambda0")?,
        fitted_mean: DVector::from_iterator(fitted.len(), fitted.iter().copied()),
    };
    Ok((manifest, draws))
}

/// A delimited table with a header row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push<S: ToString>(&mut self, row: impl IntoIterator<Item = S>) {
        let row: Vec<String> = row.into_iter().map(|c| c.to_string()).collect();
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Writes `# config_hash=<hash>`, the header, then the rows, atomically.
    pub fn write(&self, path: &Path, config_hash: &str) -> Result<()> {
        atomic_write(path, |w| {
            writeln!(w, "# config_hash={config_hash}")?;
            let mut csv = csv::Writer::from_writer(w);
            csv.write_record(&self.header)?;
            for r in &self.rows {
                csv.write_record(r)?;
            }
            csv.flush()?;
            Ok(())
        })
    }

    /// Reads a table written by [`Table::write`], returning it with its hash.
    pub fn read(path: &Path) -> Result<(Self, Option<String>)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut hash = None;
        let mut body = String::new();
        for line in text.lines() {
            if let Some(c) = line.strip_prefix('#') {
                if let Some(h) = c.trim().strip_prefix("config_hash=") {
                    hash = Some(h.to_string());
                }
            } else {
                body.push_str(line);
                body.push('\n');
            }
        }
        let mut rdr = csv::Reader::from_reader(body.as_bytes());
        let header = rdr.headers().map_err(|e| Error::parse(path, e))?.iter().map(String::from).collect();
        let rows = rdr
            .records()
            .map(|r| r.map(|r| r.iter().map(String::from).collect()))
            .collect::<std::result::Result<Vec<Vec<String>>, _>>()
            .map_err(|e| Error::parse(path, e))?;
        Ok((Self { header, rows }, hash))
    }
}

/// Writes through `f` into a temporary sibling of `path`, then renames it.
pub fn atomic_write<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> std::result::Result<(), Box<dyn std::error::Error>>,
{
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = temp_sibling(path)?;
    let result = (|| {
        let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        f(&mut w).map_err(|e| Error::io(&tmp, std::io::Error::other(e.to_string())))?;
        w.flush().map_err(|e| Error::io(&tmp, e))?;
        drop(w);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}
