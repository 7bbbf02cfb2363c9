//! GridFn serialization: CSV (coordinates + value + node kind) and a raw
//! little-endian f64 dump with a JSON header.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::grid::{Grid, GridFn, NodeKind};
use crate::error::{Error, Result};
use crate::polytope::Polytope;

pub const DUMP_FORMAT: &str = "abreu-gridfn";
pub const DUMP_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpHeader {
    pub format: String,
    pub version: u32,
    pub dims: usize,
    pub shape: Vec<usize>,
    pub h: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Run-length encoded mask: (kind, count) pairs in row-major order.
    pub mask_rle: Vec<(NodeKind, usize)>,
    pub dtype: String,
}

pub fn write_csv(path: &Path, g: &GridFn) -> Result<()> {
    let grid = g.grid();
    let mut out = String::new();
    for i in 0..grid.dim() {
        out.push_str(&format!("x{i},"));
    }
    out.push_str("value,kind\n");
    for idx in 0..grid.len() {
        for c in grid.node(idx) {
            out.push_str(&format!("{c:.17e},"));
        }
        out.push_str(&format!("{:.17e},{:?}\n", g.get(idx), grid.kind(idx)));
    }
    fs::write(path, out)?;
    Ok(())
}

fn rle(kinds: &[NodeKind]) -> Vec<(NodeKind, usize)> {
    let mut out: Vec<(NodeKind, usize)> = Vec::new();
    for &k in kinds {
        match out.last_mut() {
            Some((last, n)) if *last == k => *n += 1,
            _ => out.push((k, 1)),
        }
    }
    out
}

fn unrle(runs: &[(NodeKind, usize)]) -> Vec<NodeKind> {
    runs.iter().flat_map(|&(k, n)| std::iter::repeat_n(k, n)).collect()
}

pub fn header_of(g: &GridFn) -> DumpHeader {
    let grid = g.grid();
    DumpHeader {
        format: DUMP_FORMAT.into(),
        version: DUMP_VERSION,
        dims: grid.dim(),
        shape: grid.shape().to_vec(),
        h: grid.h().to_vec(),
        lo: grid.lo().to_vec(),
        hi: grid.hi().to_vec(),
        mask_rle: rle(grid.kinds()),
        dtype: "f64-le".into(),
    }
}

fn header_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

/// Writes `<path>` (raw values) and `<path with .json>` (header).
pub fn write_dump(path: &Path, g: &GridFn) -> Result<()> {
    let mut f = fs::File::create(path)?;
    let mut buf = Vec::with_capacity(8 * g.values().len());
    for v in g.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&buf)?;
    fs::write(header_path(path), serde_json::to_string_pretty(&header_of(g))?)?;
    Ok(())
}

/// Loads a dump. With a polytope the grid is rebuilt from it and the stored
/// mask must agree; without one a plain box grid is used.
pub fn read_dump(path: &Path, poly: Option<Arc<Polytope>>) -> Result<GridFn> {
    let header: DumpHeader = serde_json::from_str(&fs::read_to_string(header_path(path))?)?;
    if header.format != DUMP_FORMAT || header.dtype != "f64-le" {
        return Err(Error::config(
            "dump.format",
            format!("unsupported dump {}", header.format),
        ));
    }
    let bytes = fs::read(path)?;
    let count: usize = header.shape.iter().product();
    if bytes.len() != 8 * count {
        return Err(Error::config(
            "dump",
            format!("expected {count} values, found {} bytes", bytes.len()),
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let kinds = unrle(&header.mask_rle);
    let grid = match poly {
        Some(p) => {
            let g = Grid::with_shape(p, &header.shape)?;
            if g.kinds() != kinds.as_slice() || g.lo() != header.lo.as_slice() {
                return Err(Error::config(
                    "dump.mask",
                    "stored mask does not match the polytope grid",
                ));
            }
            g
        }
        None => Grid::on_box_with_kinds(header.lo, header.hi, header.shape, kinds)?,
    };
    GridFn::new(Arc::new(grid), values)
}
