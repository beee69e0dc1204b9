//! File formats: CSV datasets, JSON axis banks / worlds / run configs,
//! and PGM / raw-f64 images.
//!
//! Reals in the text formats are serialized with 17 significant digits
//! (`{:.16e}`), which round-trips every finite f64 bit-exactly. Writes go
//! through a temp file in the target directory and a rename, so partially
//! written artifacts never appear under the final name. Unknown fields and
//! unknown format versions are rejected on load, and banks are re-verified
//! against their structural invariants.

use crate::axes::{
    AttributeAxis, AxisBank, AxisError, ExtensionMode, ExtensionRecord, LatentDataset,
};
use crate::image::ImageGrid;
use crate::linalg::Vector;
use crate::toyworld::{make_world, ToyWorldSpec, WorldError};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

/// Magic prefix of the raw 64-bit image format.
pub const F64RAW_MAGIC: &[u8; 8] = b"F64RAW\x00\x01";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("row {row}, column '{column}': {detail}")]
    BadField {
        row: usize,
        column: String,
        detail: String,
    },
    #[error("row {row}: expected {want} fields, got {got}")]
    RaggedRow { row: usize, want: usize, got: usize },
    #[error("json error: {0}")]
    Json(String),
    #[error("unsupported format version {got} (this build reads version {want})")]
    VersionMismatch { got: u64, want: u32 },
    #[error("bad file format: {0}")]
    Format(String),
    #[error("invariant violated on load: {0}")]
    Invariant(String),
}

impl From<serde_json::Error> for IoError {
    fn from(e: serde_json::Error) -> Self {
        IoError::Json(e.to_string())
    }
}

impl From<AxisError> for IoError {
    fn from(e: AxisError) -> Self {
        IoError::Invariant(e.to_string())
    }
}

impl From<WorldError> for IoError {
    fn from(e: WorldError) -> Self {
        IoError::Invariant(e.to_string())
    }
}

/// 17-significant-digit decimal rendering; parses back to the same bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Atomic write: temp file in the destination directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = match dir {
        Some(d) => tempfile::NamedTempFile::new_in(d)?,
        None => tempfile::NamedTempFile::new_in(".")?,
    };
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| IoError::Io(e.error))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// JSON with 17-significant-digit floats
// ---------------------------------------------------------------------------

struct Sig17Formatter;

impl serde_json::ser::Formatter for Sig17Formatter {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{value:.16e}")
    }
}

/// Serializes any value to JSON with full-precision floats.
pub fn to_json_17<T: Serialize>(value: &T) -> Result<String, IoError> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, Sig17Formatter);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(out).expect("serde_json emits utf-8"))
}

fn check_version(text: &str) -> Result<(), IoError> {
    let v: serde_json::Value = serde_json::from_str(text)?;
    let got = v
        .get("format_version")
        .and_then(|x| x.as_u64())
        .ok_or_else(|| IoError::MalformedHeader("missing format_version".into()))?;
    if got != u64::from(FORMAT_VERSION) {
        return Err(IoError::VersionMismatch {
            got,
            want: FORMAT_VERSION,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Dataset CSV
// ---------------------------------------------------------------------------

/// Writes `id,z_0..z_{p-1},<attr names>` with 17-significant-digit reals.
pub fn write_dataset(path: &Path, ds: &LatentDataset) -> Result<(), IoError> {
    let mut out = String::new();
    out.push_str("id");
    for i in 0..ds.dim() {
        out.push_str(&format!(",z_{i}"));
    }
    for name in ds.attr_names() {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for i in 0..ds.len() {
        out.push_str(&i.to_string());
        for v in ds.latent(i).as_slice() {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        for v in ds.label_row(i) {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Reads a dataset CSV, validating the header shape, row widths, and field
/// values; errors name the offending row and column.
pub fn read_dataset(path: &Path) -> Result<LatentDataset, IoError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| IoError::MalformedHeader("empty file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"id") {
        return Err(IoError::MalformedHeader(format!(
            "first column must be 'id', got '{}'",
            cols.first().unwrap_or(&"")
        )));
    }
    let mut p = 0;
    while p + 1 < cols.len() && cols[p + 1] == format!("z_{p}") {
        p += 1;
    }
    if p == 0 {
        return Err(IoError::MalformedHeader(
            "expected latent columns z_0, z_1, ... after 'id'".into(),
        ));
    }
    let attr_names: Vec<String> = cols[p + 1..].iter().map(|s| s.to_string()).collect();
    for name in &attr_names {
        if name.starts_with("z_") {
            return Err(IoError::MalformedHeader(format!(
                "latent columns are not contiguous: '{name}' appears after attribute columns"
            )));
        }
    }
    let want = 1 + p + attr_names.len();

    let mut latents = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        let row = lineno; // data rows are 1-based; the header is line 0
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != want {
            return Err(IoError::RaggedRow {
                row,
                want,
                got: fields.len(),
            });
        }
        let parse = |idx: usize, col: &str| -> Result<f64, IoError> {
            let v: f64 = fields[idx].parse().map_err(|_| IoError::BadField {
                row,
                column: col.to_string(),
                detail: format!("cannot parse '{}' as a real", fields[idx]),
            })?;
            if !v.is_finite() {
                return Err(IoError::BadField {
                    row,
                    column: col.to_string(),
                    detail: "non-finite value".into(),
                });
            }
            Ok(v)
        };
        let mut z = Vec::with_capacity(p);
        for i in 0..p {
            z.push(parse(1 + i, &format!("z_{i}"))?);
        }
        let mut row_labels = Vec::with_capacity(attr_names.len());
        for (j, name) in attr_names.iter().enumerate() {
            row_labels.push(parse(1 + p + j, name)?);
        }
        latents.push(Vector::new(z).map_err(|e| IoError::Invariant(e.to_string()))?);
        labels.push(row_labels);
    }
    Ok(LatentDataset::new(attr_names, latents, labels)?)
}

// ---------------------------------------------------------------------------
// Axis bank JSON
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankFile {
    format_version: u32,
    dim: usize,
    base: Vec<BaseAxisDto>,
    base_ortho: Vec<Vec<f64>>,
    extensions: Vec<ExtensionDto>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BaseAxisDto {
    name: String,
    direction: Vec<f64>,
    bias: f64,
    rss: f64,
    r_squared: f64,
    n_samples: usize,
    rank_deficient: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExtensionDto {
    name: String,
    mode: String,
    weights: Vec<f64>,
    d_in: Vec<f64>,
    d_out: Vec<f64>,
}

pub fn write_axis_bank(path: &Path, bank: &AxisBank) -> Result<(), IoError> {
    let file = BankFile {
        format_version: FORMAT_VERSION,
        dim: bank.dim(),
        base: bank
            .base()
            .iter()
            .map(|a| BaseAxisDto {
                name: a.name.clone(),
                direction: a.direction.as_slice().to_vec(),
                bias: a.bias,
                rss: a.rss,
                r_squared: a.r_squared,
                n_samples: a.n_samples,
                rank_deficient: a.rank_deficient,
            })
            .collect(),
        base_ortho: bank
            .base_ortho()
            .iter()
            .map(|v| v.as_slice().to_vec())
            .collect(),
        extensions: bank
            .extensions()
            .iter()
            .map(|e| ExtensionDto {
                name: e.name.clone(),
                mode: e.mode.as_str().to_string(),
                weights: e.weights.clone(),
                d_in: e.d_in.as_slice().to_vec(),
                d_out: e.d_out.as_slice().to_vec(),
            })
            .collect(),
    };
    write_atomic(path, to_json_17(&file)?.as_bytes())
}

/// Loads a bank and re-verifies its invariants: unit directions (errors
/// cite the axis name), base orthonormality to 1e-10, residual extensions
/// orthogonal to the base, and per-subvector weight sums.
pub fn read_axis_bank(path: &Path) -> Result<AxisBank, IoError> {
    let text = fs::read_to_string(path)?;
    check_version(&text)?;
    let file: BankFile = serde_json::from_str(&text)?;
    let vecf = |data: Vec<f64>, what: &str| -> Result<Vector, IoError> {
        Vector::new(data).map_err(|e| IoError::Invariant(format!("{what}: {e}")))
    };
    let mut base = Vec::with_capacity(file.base.len());
    for a in file.base {
        let name = a.name.clone();
        let direction = vecf(a.direction, &format!("axis '{name}' direction"))?;
        if (direction.norm() - 1.0).abs() > 1e-10 {
            return Err(IoError::Invariant(format!(
                "axis '{name}': direction is not unit norm"
            )));
        }
        base.push(AttributeAxis {
            direction,
            name: a.name,
            bias: a.bias,
            rss: a.rss,
            r_squared: a.r_squared,
            n_samples: a.n_samples,
            rank_deficient: a.rank_deficient,
        });
    }
    let mut base_ortho = Vec::with_capacity(file.base_ortho.len());
    for (i, v) in file.base_ortho.into_iter().enumerate() {
        base_ortho.push(vecf(v, &format!("orthonormalized direction {i}"))?);
    }
    let mut extensions = Vec::with_capacity(file.extensions.len());
    for e in file.extensions {
        let mode = match e.mode.as_str() {
            "residual" => ExtensionMode::Residual,
            "per-subvector" => ExtensionMode::PerSubvector,
            other => {
                return Err(IoError::Format(format!(
                    "extension '{}': unknown mode '{other}'",
                    e.name
                )))
            }
        };
        let name = e.name.clone();
        extensions.push(ExtensionRecord {
            d_in: vecf(e.d_in, &format!("extension '{name}' d_in"))?,
            d_out: vecf(e.d_out, &format!("extension '{name}' d_out"))?,
            name: e.name,
            mode,
            weights: e.weights,
        });
    }
    Ok(AxisBank::from_parts(file.dim, base, base_ortho, extensions)?)
}

// ---------------------------------------------------------------------------
// World JSON (construction arguments; ToyWorldSpec rebuilds deterministically)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldFile {
    format_version: u32,
    p: usize,
    k: usize,
    rho: f64,
    noise_sigma: f64,
    img_h: usize,
    img_w: usize,
    seed: u64,
    names: Vec<String>,
}

pub fn write_world(path: &Path, world: &ToyWorldSpec) -> Result<(), IoError> {
    let file = WorldFile {
        format_version: FORMAT_VERSION,
        p: world.p(),
        k: world.k(),
        rho: world.rho(),
        noise_sigma: world.noise_sigma(),
        img_h: world.img_h(),
        img_w: world.img_w(),
        seed: world.seed(),
        names: world.names().to_vec(),
    };
    write_atomic(path, to_json_17(&file)?.as_bytes())
}

pub fn read_world(path: &Path) -> Result<ToyWorldSpec, IoError> {
    let text = fs::read_to_string(path)?;
    check_version(&text)?;
    let file: WorldFile = serde_json::from_str(&text)?;
    let world = make_world(
        file.p,
        file.k,
        file.rho,
        file.noise_sigma,
        file.img_h,
        file.img_w,
        file.seed,
    )?;
    Ok(world.with_names(file.names)?)
}

// ---------------------------------------------------------------------------
// Images
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    /// Binary PGM (P5, maxval 255); pixels clamped to [0,1], scaled by 255,
    /// rounded half-to-even.
    Pgm8,
    /// Magic bytes, then h and w as little-endian u64, then row-major
    /// little-endian f64 pixels. Bit-exact round trip.
    F64Raw,
}

impl ImageFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Pgm8 => "pgm",
            ImageFormat::F64Raw => "f64",
        }
    }
}

pub fn write_image(path: &Path, img: &ImageGrid, format: ImageFormat) -> Result<(), IoError> {
    let bytes = match format {
        ImageFormat::Pgm8 => {
            let mut out = Vec::with_capacity(32 + img.pixels().len());
            out.extend_from_slice(
                format!("P5\n{} {}\n255\n", img.width(), img.height()).as_bytes(),
            );
            for &p in img.clamped01().pixels() {
                out.push((p * 255.0).round_ties_even() as u8);
            }
            out
        }
        ImageFormat::F64Raw => {
            let mut out = Vec::with_capacity(24 + img.pixels().len() * 8);
            out.extend_from_slice(F64RAW_MAGIC);
            out.extend_from_slice(&(img.height() as u64).to_le_bytes());
            out.extend_from_slice(&(img.width() as u64).to_le_bytes());
            for &p in img.pixels() {
                out.extend_from_slice(&p.to_le_bytes());
            }
            out
        }
    };
    write_atomic(path, &bytes)
}

/// Reads either image format, sniffing the magic bytes. PGM pixels map to
/// [0, 1] by division by the maxval.
pub fn read_image(path: &Path) -> Result<ImageGrid, IoError> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(F64RAW_MAGIC) {
        if bytes.len() < 24 {
            return Err(IoError::Format("truncated f64raw header".into()));
        }
        let h = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let w = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let want = 24 + h.saturating_mul(w).saturating_mul(8);
        if bytes.len() != want {
            return Err(IoError::Format(format!(
                "f64raw payload is {} bytes, expected {want} for {h}x{w}",
                bytes.len()
            )));
        }
        let pixels: Vec<f64> = bytes[24..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        return ImageGrid::new(h, w, pixels).map_err(|e| IoError::Format(e.to_string()));
    }
    if bytes.starts_with(b"P5") {
        return read_pgm8(&bytes);
    }
    Err(IoError::Format(
        "unrecognized image file (expected P5 PGM or f64raw)".into(),
    ))
}

fn read_pgm8(bytes: &[u8]) -> Result<ImageGrid, IoError> {
    // Header: "P5" then whitespace-separated width, height, maxval;
    // comment lines starting with '#' are skipped.
    let mut pos = 2;
    let mut fields = Vec::with_capacity(3);
    while fields.len() < 3 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(IoError::MalformedHeader("truncated PGM header".into()));
        }
        let text = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| IoError::MalformedHeader("non-ascii PGM header".into()))?;
        let value: usize = text
            .parse()
            .map_err(|_| IoError::MalformedHeader(format!("bad PGM header field '{text}'")))?;
        fields.push(value);
    }
    // A single whitespace byte separates the header from the pixel data.
    pos += 1;
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval == 0 || maxval > 255 {
        return Err(IoError::MalformedHeader(format!(
            "unsupported PGM maxval {maxval}"
        )));
    }
    if pos > bytes.len() {
        return Err(IoError::MalformedHeader("truncated PGM header".into()));
    }
    let data = &bytes[pos..];
    if data.len() != w * h {
        return Err(IoError::Format(format!(
            "PGM payload is {} bytes, expected {}",
            data.len(),
            w * h
        )));
    }
    let pixels: Vec<f64> = data
        .iter()
        .map(|&b| f64::from(b) / maxval as f64)
        .collect();
    ImageGrid::new(h, w, pixels).map_err(|e| IoError::Format(e.to_string()))
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// Everything one pipeline run needs; a single master seed fans out to all
/// stages, and no stage consults wall-clock entropy.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    pub master_seed: u64,
    pub out_dir: String,
    pub world: WorldParams,
    /// Sample count for the fitting dataset.
    pub n_fit: usize,
    pub base_attributes: Vec<String>,
    pub extension_attributes: Vec<String>,
    /// "residual" (default) or "per-subvector".
    pub extension_mode: String,
    pub eval_trials: usize,
    pub eval_alpha: f64,
    pub edit_alpha_min: f64,
    pub edit_alpha_max: f64,
    pub edit_steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct WorldParams {
    pub p: usize,
    pub k: usize,
    pub rho: f64,
    pub noise_sigma: f64,
    pub img_h: usize,
    pub img_w: usize,
    #[serde(default)]
    pub names: Option<Vec<String>>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), IoError> {
        if self.format_version != FORMAT_VERSION {
            return Err(IoError::VersionMismatch {
                got: u64::from(self.format_version),
                want: FORMAT_VERSION,
            });
        }
        if self.extension_mode != "residual" && self.extension_mode != "per-subvector" {
            return Err(IoError::Format(format!(
                "unknown extension mode '{}'",
                self.extension_mode
            )));
        }
        if self.base_attributes.is_empty() {
            return Err(IoError::Format(
                "at least one base attribute is required".into(),
            ));
        }
        Ok(())
    }
}

pub fn write_config(path: &Path, cfg: &RunConfig) -> Result<(), IoError> {
    write_atomic(path, to_json_17(cfg)?.as_bytes())
}

pub fn read_config(path: &Path) -> Result<RunConfig, IoError> {
    let text = fs::read_to_string(path)?;
    check_version(&text)?;
    let cfg: RunConfig = serde_json::from_str(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::axes::{build_bank, extend_axis};
    use crate::toyworld::make_world;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn fmt_f64_round_trips_crooked_values() {
        for &v in &[
            0.1,
            -0.1,
            1.0 / 3.0,
            std::f64::consts::PI,
            1e-300,
            -1.7976931348623157e308,
            0.0,
        ] {
            let s = fmt_f64(v);
            let back: f64 = s.parse().unwrap();
            assert_eq!(v.to_bits(), back.to_bits(), "{v} -> {s} -> {back}");
        }
    }

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let world = make_world(8, 3, 0.3, 0.01, 16, 16, 42).unwrap();
        let ds = world.sample_dataset(10, 7).unwrap();
        let dir = tmpdir();
        let path = dir.path().join("ds.csv");
        write_dataset(&path, &ds).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn dataset_read_errors_name_row_and_column() {
        let dir = tmpdir();
        let path = dir.path().join("bad.csv");
        // Second data row is missing the final attribute column.
        fs::write(&path, "id,z_0,z_1,smile\n0,1.0,2.0,0.5\n1,1.0,2.0\n").unwrap();
        match read_dataset(&path) {
            Err(IoError::RaggedRow { row, want, got }) => {
                assert_eq!((row, want, got), (2, 4, 3));
            }
            other => panic!("expected ragged row error, got {other:?}"),
        }

        fs::write(&path, "id,z_0,z_1,smile\n0,1.0,2.0,oops\n").unwrap();
        match read_dataset(&path) {
            Err(IoError::BadField { row, column, .. }) => {
                assert_eq!(row, 1);
                assert_eq!(column, "smile");
            }
            other => panic!("expected bad field error, got {other:?}"),
        }

        fs::write(&path, "id,z_0,z_1,smile\n0,1.0,inf,0.5\n").unwrap();
        match read_dataset(&path) {
            Err(IoError::BadField { column, .. }) => assert_eq!(column, "z_1"),
            other => panic!("expected non-finite field error, got {other:?}"),
        }

        fs::write(&path, "index,z_0\n").unwrap();
        assert!(matches!(
            read_dataset(&path),
            Err(IoError::MalformedHeader(_))
        ));
    }

    fn sample_bank() -> AxisBank {
        let world = make_world(12, 4, 0.2, 0.0, 16, 16, 5).unwrap();
        let ds = world.sample_dataset(300, 3).unwrap();
        let names = world.names().to_vec();
        let bank = build_bank(&ds, &names[..3]).unwrap();
        extend_axis(&bank, &ds, &names[3], ExtensionMode::Residual, None).unwrap()
    }

    #[test]
    fn bank_round_trip_is_bit_exact() {
        let bank = sample_bank();
        let dir = tmpdir();
        let path = dir.path().join("bank.json");
        write_axis_bank(&path, &bank).unwrap();
        let back = read_axis_bank(&path).unwrap();
        assert_eq!(bank, back);
        // Writing the loaded bank again produces byte-identical output.
        let path2 = dir.path().join("bank2.json");
        write_axis_bank(&path2, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn bank_load_rejects_broken_unit_norm_citing_name() {
        let bank = sample_bank();
        let dir = tmpdir();
        let path = dir.path().join("bank.json");
        write_axis_bank(&path, &bank).unwrap();
        let mut v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        v["base"][0]["direction"][0] = serde_json::json!(5.0);
        fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
        let err = read_axis_bank(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("attr00"), "message: {msg}");
    }

    #[test]
    fn bank_load_rejects_unknown_fields_and_versions() {
        let bank = sample_bank();
        let dir = tmpdir();
        let path = dir.path().join("bank.json");
        write_axis_bank(&path, &bank).unwrap();
        let text = fs::read_to_string(&path).unwrap();

        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["format_version"] = serde_json::json!(99);
        fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
        assert!(matches!(
            read_axis_bank(&path),
            Err(IoError::VersionMismatch { got: 99, .. })
        ));

        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["surprise"] = serde_json::json!(1);
        fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
        assert!(matches!(read_axis_bank(&path), Err(IoError::Json(_))));
    }

    #[test]
    fn world_round_trip_rebuilds_bit_identically() {
        let world = make_world(16, 5, 0.4, 0.02, 24, 24, 99)
            .unwrap()
            .with_names(vec![
                "natural".into(),
                "happy".into(),
                "angry".into(),
                "fear".into(),
                "sad".into(),
            ])
            .unwrap();
        let dir = tmpdir();
        let path = dir.path().join("world.json");
        write_world(&path, &world).unwrap();
        let back = read_world(&path).unwrap();
        assert_eq!(world, back);
    }

    #[test]
    fn f64raw_round_trip_is_bit_exact() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let img = ImageGrid::from_fn(13, 9, |_, _| rng.gen::<f64>() * 10.0 - 5.0);
        let dir = tmpdir();
        let path = dir.path().join("img.f64");
        write_image(&path, &img, ImageFormat::F64Raw).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn pgm8_header_and_half_even_rounding() {
        let img = ImageGrid::constant(64, 64, 0.5);
        let dir = tmpdir();
        let path = dir.path().join("img.pgm");
        write_image(&path, &img, ImageFormat::Pgm8).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n64 64\n255\n"));
        // 0.5 * 255 = 127.5 rounds half-to-even to 128.
        assert!(bytes[b"P5\n64 64\n255\n".len()..].iter().all(|&b| b == 128));

        let back = read_image(&path).unwrap();
        assert_eq!(back.height(), 64);
        assert!((back.get(0, 0) - 128.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn pgm8_clamps_out_of_range_pixels() {
        let img = ImageGrid::new(1, 3, vec![-2.0, 0.25, 7.0]).unwrap();
        let dir = tmpdir();
        let path = dir.path().join("img.pgm");
        write_image(&path, &img, ImageFormat::Pgm8).unwrap();
        let bytes = fs::read(&path).unwrap();
        let px = &bytes[b"P5\n3 1\n255\n".len()..];
        assert_eq!(px, &[0u8, 64, 255]);
    }

    #[test]
    fn config_round_trip_and_validation() {
        let cfg = RunConfig {
            format_version: FORMAT_VERSION,
            master_seed: 7,
            out_dir: "out".into(),
            world: WorldParams {
                p: 64,
                k: 10,
                rho: 0.5,
                noise_sigma: 0.01,
                img_h: 32,
                img_w: 32,
                names: None,
            },
            n_fit: 4000,
            base_attributes: (0..6).map(|i| format!("attr{i:02}")).collect(),
            extension_attributes: (6..10).map(|i| format!("attr{i:02}")).collect(),
            extension_mode: "residual".into(),
            eval_trials: 100,
            eval_alpha: 6.0,
            edit_alpha_min: -3.0,
            edit_alpha_max: 3.0,
            edit_steps: 7,
        };
        let dir = tmpdir();
        let path = dir.path().join("run.json");
        write_config(&path, &cfg).unwrap();
        let back = read_config(&path).unwrap();
        assert_eq!(cfg, back);

        let mut bad = cfg.clone();
        bad.extension_mode = "sideways".into();
        assert!(bad.validate().is_err());
    }
}
