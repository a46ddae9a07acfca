//! Snapshot container: a JSON sidecar plus a raw little-endian `f64` array.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::field::DistributionField;
use super::grid::GridSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotHeader {
    /// `"distribution"` or `"particles"`.
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub grid: Option<GridSpec>,
    pub time: f64,
    pub endianness: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// File name of the raw array, relative to the sidecar.
    pub data: String,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

pub fn write_raw(stem: &Path, mut header: SnapshotHeader, data: &[f64]) -> Result<PathBuf> {
    let expected: usize = header.shape.iter().product();
    if expected != data.len() {
        return Err(Error::Shape {
            expected: format!("{expected}"),
            got: format!("{}", data.len()),
        });
    }
    let (json, bin) = paths(stem);
    header.data = bin
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut bytes = Vec::with_capacity(8 * data.len());
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&bin, bytes)?;
    fs::write(&json, serde_json::to_string_pretty(&header)? + "\n")?;
    Ok(json)
}

pub fn read_raw(sidecar: &Path) -> Result<(SnapshotHeader, Vec<f64>)> {
    let header: SnapshotHeader = serde_json::from_str(&fs::read_to_string(sidecar)?)?;
    if header.endianness != "little" || header.dtype != "f64" {
        return Err(Error::Config(format!(
            "unsupported snapshot encoding {}/{}",
            header.endianness, header.dtype
        )));
    }
    let bin = sidecar.with_file_name(&header.data);
    let bytes = fs::read(bin)?;
    let expected: usize = header.shape.iter().product();
    if bytes.len() != 8 * expected {
        return Err(Error::Shape {
            expected: format!("{} bytes", 8 * expected),
            got: format!("{} bytes", bytes.len()),
        });
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((header, data))
}

pub fn write_field(stem: &Path, f: &DistributionField) -> Result<PathBuf> {
    let header = SnapshotHeader {
        kind: "distribution".into(),
        grid: Some(f.grid),
        time: f.time,
        endianness: "little".into(),
        dtype: "f64".into(),
        shape: f.grid.shape(),
        data: String::new(),
    };
    write_raw(stem, header, &f.values)
}

pub fn read_field(sidecar: &Path) -> Result<DistributionField> {
    let (header, values) = read_raw(sidecar)?;
    let grid = header
        .grid
        .ok_or_else(|| Error::Config("snapshot sidecar has no grid".into()))?;
    grid.validate()?;
    if header.shape != grid.shape() {
        return Err(Error::Shape {
            expected: format!("{:?}", grid.shape()),
            got: format!("{:?}", header.shape),
        });
    }
    let mut f = DistributionField::from_values(grid, values)?;
    f.time = header.time;
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let g = GridSpec::new(1, 8, 16, 5.0).unwrap();
        let mut f = DistributionField::from_fn(g, |x, v| (x[0] * 1.3).sin() * (-v[0] * v[0]).exp() / 3.0);
        f.time = 0.1 + 0.2;
        let side = write_field(&dir.path().join("snap_0001"), &f).unwrap();
        let back = read_field(&side).unwrap();
        assert_eq!(back.time.to_bits(), f.time.to_bits());
        assert_eq!(back.grid, f.grid);
        for (a, b) in back.values.iter().zip(&f.values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncated_payload_is_a_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        let g = GridSpec::new(1, 8, 8, 5.0).unwrap();
        let side = write_field(&dir.path().join("s"), &DistributionField::zeros(g)).unwrap();
        let bin = side.with_extension("bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(read_field(&side), Err(Error::Shape { .. })));
    }
}
