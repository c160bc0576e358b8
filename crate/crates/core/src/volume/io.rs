//! Volume file I/O.
//!
//! Two on-disk formats, both little-endian with x-fastest voxel order:
//!
//! 1. A MetaImage subset (`.mha`): ASCII `Key = Value` header followed by one
//!    raw byte per voxel. The writer emits a fixed key set in a fixed order;
//!    the reader tolerates extra keys and any key order but requires
//!    `NDims = 3` and `ElementType = MET_UCHAR`.
//! 2. A raw pair: `<name>.bin` (one byte per voxel) plus a `<name>.json`
//!    sidecar with dims, spacing, and origin.
//!
//! Reads treat any nonzero element as foreground. Writes emit 0/1 bytes, and
//! spacing/origin round-trip at full 64-bit float precision (shortest
//! round-trip decimal formatting).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::VoxelGrid;

/// JSON sidecar of the raw-pair format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawSidecar {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
}

/// Reads a volume, dispatching on extension: `.mha` for MetaImage,
/// `.bin` or `.json` for the raw pair.
pub fn read_volume(path: &Path) -> Result<VoxelGrid> {
    match extension(path)? {
        "mha" => read_mha(path),
        "bin" | "json" => read_raw_pair(path),
        other => Err(Error::FormatError(format!(
            "unsupported volume extension '.{other}' ({})",
            path.display()
        ))),
    }
}

/// Writes a volume, dispatching on extension as in [`read_volume`].
pub fn write_volume(g: &VoxelGrid, path: &Path) -> Result<()> {
    match extension(path)? {
        "mha" => write_mha(g, path),
        "bin" | "json" => write_raw_pair(g, path),
        other => Err(Error::FormatError(format!(
            "unsupported volume extension '.{other}' ({})",
            path.display()
        ))),
    }
}

fn extension(path: &Path) -> Result<&str> {
    path.extension()
        .and_then(|e| e.to_str())
        .ok_or_else(|| Error::FormatError(format!("path has no extension: {}", path.display())))
}

fn payload_bytes(g: &VoxelGrid) -> Vec<u8> {
    (0..g.len()).map(|i| g.get_linear(i) as u8).collect()
}

fn write_mha(g: &VoxelGrid, path: &Path) -> Result<()> {
    let [nx, ny, nz] = g.dims();
    let [sx, sy, sz] = g.spacing();
    let [ox, oy, oz] = g.origin();
    let mut out = String::new();
    out.push_str("ObjectType = Image\n");
    out.push_str("NDims = 3\n");
    out.push_str("BinaryData = True\n");
    out.push_str("BinaryDataByteOrderMSB = False\n");
    out.push_str("CompressedData = False\n");
    out.push_str("TransformMatrix = 1 0 0 0 1 0 0 0 1\n");
    out.push_str(&format!("Offset = {ox} {oy} {oz}\n"));
    out.push_str(&format!("ElementSpacing = {sx} {sy} {sz}\n"));
    out.push_str(&format!("DimSize = {nx} {ny} {nz}\n"));
    out.push_str("ElementType = MET_UCHAR\n");
    out.push_str("ElementDataFile = LOCAL\n");
    let mut bytes = out.into_bytes();
    bytes.extend_from_slice(&payload_bytes(g));
    fs::write(path, bytes)?;
    Ok(())
}

fn parse_triplet<T: std::str::FromStr>(value: &str, key: &str) -> Result<[T; 3]> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(Error::FormatError(format!(
            "{key} must have 3 components, got '{value}'"
        )));
    }
    let mut out: Vec<T> = Vec::with_capacity(3);
    for p in parts {
        out.push(
            p.parse::<T>()
                .map_err(|_| Error::FormatError(format!("bad {key} component '{p}'")))?,
        );
    }
    Ok([
        out.remove(0),
        out.remove(0),
        out.remove(0),
    ])
}

fn read_mha(path: &Path) -> Result<VoxelGrid> {
    let bytes = fs::read(path)?;

    // Header is ASCII lines of `Key = Value`; payload begins right after the
    // newline that terminates the `ElementDataFile` line.
    let mut dims: Option<[usize; 3]> = None;
    let mut spacing = [1.0f64; 3];
    let mut origin = [0.0f64; 3];
    let mut saw_object_type = false;
    let mut saw_ndims = false;
    let mut saw_element_type = false;
    let mut payload_start: Option<usize> = None;

    let mut pos = 0usize;
    while pos < bytes.len() {
        let line_end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|off| pos + off)
            .unwrap_or(bytes.len());
        let line = std::str::from_utf8(&bytes[pos..line_end])
            .map_err(|_| Error::FormatError("non-ASCII header line".into()))?
            .trim_end_matches('\r');
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::FormatError(format!(
                "header line without '=': '{line}'"
            )));
        };
        let key = key.trim();
        let value = value.trim();
        match key {
            "ObjectType" => {
                if value != "Image" {
                    return Err(Error::FormatError(format!(
                        "ObjectType must be Image, got '{value}'"
                    )));
                }
                saw_object_type = true;
            }
            "NDims" => {
                if value != "3" {
                    return Err(Error::FormatError(format!("NDims must be 3, got '{value}'")));
                }
                saw_ndims = true;
            }
            "ElementType" => {
                if value != "MET_UCHAR" {
                    return Err(Error::FormatError(format!(
                        "ElementType must be MET_UCHAR, got '{value}'"
                    )));
                }
                saw_element_type = true;
            }
            "CompressedData" => {
                if value.eq_ignore_ascii_case("true") {
                    return Err(Error::FormatError("compressed payloads unsupported".into()));
                }
            }
            "DimSize" => dims = Some(parse_triplet::<usize>(value, "DimSize")?),
            "ElementSpacing" => spacing = parse_triplet::<f64>(value, "ElementSpacing")?,
            "Offset" => origin = parse_triplet::<f64>(value, "Offset")?,
            "ElementDataFile" => {
                if value != "LOCAL" {
                    return Err(Error::FormatError(format!(
                        "only ElementDataFile = LOCAL supported, got '{value}'"
                    )));
                }
                payload_start = Some((line_end + 1).min(bytes.len()));
                break;
            }
            _ => {} // tolerate unknown keys
        }
        if line_end == bytes.len() {
            break;
        }
        pos = line_end + 1;
    }

    if !saw_object_type {
        return Err(Error::FormatError("missing ObjectType".into()));
    }
    if !saw_ndims {
        return Err(Error::FormatError("missing NDims".into()));
    }
    if !saw_element_type {
        return Err(Error::FormatError("missing ElementType".into()));
    }
    let Some(start) = payload_start else {
        return Err(Error::FormatError("missing ElementDataFile".into()));
    };
    let Some(dims) = dims else {
        return Err(Error::FormatError("missing DimSize".into()));
    };

    let n = dims[0]
        .checked_mul(dims[1])
        .and_then(|v| v.checked_mul(dims[2]))
        .ok_or_else(|| Error::DimensionError(format!("DimSize overflow: {dims:?}")))?;
    let payload = &bytes[start..];
    if payload.len() != n {
        return Err(Error::DimensionError(format!(
            "DimSize {:?} requires {} payload bytes, found {}",
            dims,
            n,
            payload.len()
        )));
    }
    VoxelGrid::from_bytes(dims, spacing, origin, payload)
}

fn sibling_with_extension(path: &Path, ext: &str) -> std::path::PathBuf {
    path.with_extension(ext)
}

fn write_raw_pair(g: &VoxelGrid, path: &Path) -> Result<()> {
    let bin = sibling_with_extension(path, "bin");
    let json = sibling_with_extension(path, "json");
    fs::write(&bin, payload_bytes(g))?;
    let sidecar = RawSidecar {
        dims: g.dims(),
        spacing_mm: g.spacing(),
        origin_mm: g.origin(),
    };
    let text = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| Error::FormatError(format!("sidecar serialization: {e}")))?;
    fs::write(&json, text)?;
    Ok(())
}

fn read_raw_pair(path: &Path) -> Result<VoxelGrid> {
    let bin = sibling_with_extension(path, "bin");
    let json = sibling_with_extension(path, "json");
    let text = fs::read_to_string(&json)?;
    let sidecar: RawSidecar = serde_json::from_str(&text)
        .map_err(|e| Error::FormatError(format!("bad sidecar {}: {e}", json.display())))?;
    let payload = fs::read(&bin)?;
    let n = sidecar.dims[0]
        .checked_mul(sidecar.dims[1])
        .and_then(|v| v.checked_mul(sidecar.dims[2]))
        .ok_or_else(|| Error::DimensionError(format!("dims overflow: {:?}", sidecar.dims)))?;
    if payload.len() != n {
        return Err(Error::DimensionError(format!(
            "sidecar dims {:?} require {} payload bytes, found {}",
            sidecar.dims,
            n,
            payload.len()
        )));
    }
    VoxelGrid::from_bytes(sidecar.dims, sidecar.spacing_mm, sidecar.origin_mm, &payload)
}
