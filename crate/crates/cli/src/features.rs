//! Feature files: a little-endian binary container and plain CSV.
//!
//! Binary layout:
//!
//! | bytes | content                                  |
//! |-------|------------------------------------------|
//! | 8     | magic `PDAFEAT\0`                        |
//! | 4     | format version, u32                      |
//! | 4     | reserved, zero                           |
//! | 8     | rows `n`, u64                            |
//! | 8     | columns `d`, u64                         |
//! | 8     | label flag, u64 (0 or 1)                 |
//! | 8·n·d | features, f64, row-major                 |
//! | 4·n   | labels, u32 (present iff the flag is 1)  |

use std::fs;
use std::path::Path;

use ndarray::Array2;
use pda_core::FeatureDataset;

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 8] = b"PDAFEAT\0";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureFormat {
    Binary,
    Csv,
}

impl FeatureFormat {
    /// `.csv` files are CSV; everything else is binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => FeatureFormat::Csv,
            _ => FeatureFormat::Binary,
        }
    }
}

pub fn encode_binary(data: &FeatureDataset) -> Vec<u8> {
    let (n, d) = data.features().dim();
    let labels = data.labels();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * n * d + 4 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&[0; 4]);
    for v in [n as u64, d as u64, u64::from(labels.is_some())] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for x in data.features().iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    if let Some(labels) = labels {
        for &l in labels {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
    }
    out
}

/// Parse the binary container; `Err` holds a human-readable reason.
pub fn decode_binary(bytes: &[u8], num_classes: usize) -> Result<FeatureDataset, String> {
    if bytes.len() < HEADER_LEN {
        return Err(format!(
            "file is {} bytes, shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        ));
    }
    if &bytes[..8] != MAGIC {
        return Err("bad magic; not a feature file".into());
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let version = u32_at(8);
    if version != VERSION {
        return Err(format!("unsupported format version {version}"));
    }
    let (n, d, flag) = (u64_at(16), u64_at(24), u64_at(32));
    if flag > 1 {
        return Err(format!("label flag must be 0 or 1, found {flag}"));
    }
    let cells = n.checked_mul(d).ok_or("row and column counts overflow")?;
    let expected = cells
        .checked_mul(8)
        .and_then(|b| b.checked_add(if flag == 1 { 4 * n } else { 0 }))
        .and_then(|b| b.checked_add(HEADER_LEN as u64))
        .ok_or("row and column counts overflow")?;
    if expected != bytes.len() as u64 {
        return Err(format!(
            "header announces {expected} bytes, file has {}",
            bytes.len()
        ));
    }
    let (n, d) = (n as usize, d as usize);
    let body = &bytes[HEADER_LEN..];
    let values: Vec<f64> = body[..8 * n * d]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let labels = (flag == 1).then(|| {
        body[8 * n * d..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect()
    });
    let features = Array2::from_shape_vec((n, d), values).map_err(|e| e.to_string())?;
    FeatureDataset::new(features, labels, num_classes).map_err(|e| e.to_string())
}

pub fn encode_csv(data: &FeatureDataset) -> String {
    let d = data.dim();
    let mut header: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
    if data.labels().is_some() {
        header.push("label".into());
    }
    let mut out = header.join(",");
    out.push('\n');
    for (i, row) in data.features().rows().into_iter().enumerate() {
        let mut cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        if let Some(labels) = data.labels() {
            cells.push(labels[i].to_string());
        }
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn decode_csv(text: &str, num_classes: usize) -> Result<FeatureDataset, String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or("empty CSV file")?
        .split(',')
        .map(str::trim)
        .collect();
    let labeled = header.last() == Some(&"label");
    let d = header.len() - usize::from(labeled);
    for (j, name) in header[..d].iter().enumerate() {
        if *name != format!("f{j}") {
            return Err(format!("header column {j} is {name:?}, expected \"f{j}\""));
        }
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut n = 0;
    for (line_no, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != header.len() {
            return Err(format!(
                "row {}: {} cells, header has {}",
                line_no + 1,
                cells.len(),
                header.len()
            ));
        }
        for c in &cells[..d] {
            values.push(
                c.parse::<f64>()
                    .map_err(|e| format!("row {}: {c:?}: {e}", line_no + 1))?,
            );
        }
        if labeled {
            let c = cells[d];
            labels.push(
                c.parse::<usize>()
                    .map_err(|e| format!("row {}: label {c:?}: {e}", line_no + 1))?,
            );
        }
        n += 1;
    }
    let features = Array2::from_shape_vec((n, d), values).map_err(|e| e.to_string())?;
    FeatureDataset::new(features, labeled.then_some(labels), num_classes).map_err(|e| e.to_string())
}

pub fn write_features(path: &Path, data: &FeatureDataset) -> CliResult<Vec<u8>> {
    let bytes = match FeatureFormat::from_path(path) {
        FeatureFormat::Binary => encode_binary(data),
        FeatureFormat::Csv => encode_csv(data).into_bytes(),
    };
    fs::write(path, &bytes).map_err(CliError::io(path))?;
    Ok(bytes)
}

/// Read a feature file; any problem is a task-validation failure.
pub fn read_features(path: &Path, num_classes: usize) -> CliResult<(FeatureDataset, Vec<u8>)> {
    let bytes =
        fs::read(path).map_err(|e| CliError::Task(vec![format!("{}: {e}", path.display())]))?;
    let parsed = match FeatureFormat::from_path(path) {
        FeatureFormat::Binary => decode_binary(&bytes, num_classes),
        FeatureFormat::Csv => std::str::from_utf8(&bytes)
            .map_err(|e| e.to_string())
            .and_then(|t| decode_csv(t, num_classes)),
    };
    let data = parsed.map_err(|m| CliError::Task(vec![format!("{}: {m}", path.display())]))?;
    Ok((data, bytes))
}
