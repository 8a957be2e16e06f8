//! Artifact plumbing: 17-significant-digit float formatting shared by
//! every CSV and JSON writer, content digests, atomic file placement,
//! and the run manifest.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Round-trip exact decimal form: 17 significant digits in scientific
/// notation, the same in CSV cells and JSON numbers.
pub fn fmt_f64(x: f64) -> String {
    format!("{:.16e}", x)
}

struct Sig17;

impl serde_json::ser::Formatter for Sig17 {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + Write,
    {
        write!(writer, "{}", fmt_f64(value))
    }

    fn write_f32<W>(&mut self, writer: &mut W, value: f32) -> io::Result<()>
    where
        W: ?Sized + Write,
    {
        write!(writer, "{}", fmt_f64(value as f64))
    }
}

/// JSON bytes with uniform float formatting and a trailing newline.
pub fn to_json(value: &impl Serialize) -> Vec<u8> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, Sig17);
    value
        .serialize(&mut ser)
        .expect("artifact values serialize");
    out.push(b'\n');
    out
}

pub fn csv_bytes<I>(header: Option<&str>, rows: I) -> Vec<u8>
where
    I: IntoIterator<Item = String>,
{
    let mut out = String::new();
    if let Some(h) = header {
        out.push_str(h);
        out.push('\n');
    }
    for row in rows {
        out.push_str(&row);
        out.push('\n');
    }
    out.into_bytes()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{:02x}", b));
    }
    hex
}

#[derive(Debug, Clone, Serialize)]
pub struct ArtifactRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Output directory with digest bookkeeping. Files land under their
/// final name only after the full content is on disk (tmp + rename), so
/// an interrupted run leaves no partial artifacts.
pub struct Artifacts {
    dir: PathBuf,
    pub records: Vec<ArtifactRecord>,
}

impl Artifacts {
    pub fn new(dir: &Path) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Artifacts {
            dir: dir.to_path_buf(),
            records: Vec::new(),
        })
    }

    pub fn put(&mut self, name: &str, bytes: &[u8]) -> io::Result<()> {
        let tmp = self.dir.join(format!("{name}.tmp"));
        let dest = self.dir.join(name);
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, &dest)?;
        self.records.push(ArtifactRecord {
            path: dest.to_string_lossy().into_owned(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
        eprintln!("wrote {}", dest.display());
        Ok(())
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub scenario_path: String,
    /// Digest of the scenario file bytes as read.
    pub scenario_sha256: String,
    /// Every resolved parameter of the run; rerunning with these values
    /// and the same binary reproduces the artifact digests bit-exactly.
    pub params: serde_json::Value,
    pub artifacts: Vec<ArtifactRecord>,
    pub wall_ms: u64,
    /// Tree nodes expanded by the sampling stages (0 for pure-spectral runs).
    pub nodes_simulated: u64,
}

pub fn write_manifest(arts: &mut Artifacts, manifest: &RunManifest) -> io::Result<()> {
    arts.put("manifest.json", &to_json(manifest))
}
