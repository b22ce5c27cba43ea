//! Grid tensor files: one JSON header line `{"h":..,"w":..,"c":..}` followed by
//! `h·w·c` little-endian f32 values in row-major `(row, col, channel)` order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{M3Error, Result};
use crate::token_pyramid::TokenGrid;

#[derive(Debug, Serialize, Deserialize)]
struct GridHeader {
    h: usize,
    w: usize,
    c: usize,
}

pub fn write_grid_to<W: Write>(mut out: W, grid: &TokenGrid<f32>) -> Result<()> {
    let header = GridHeader { h: grid.height(), w: grid.width(), c: grid.channels() };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for v in grid.values() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_grid_from<R: BufRead>(mut input: R) -> Result<TokenGrid<f32>> {
    let mut line = String::new();
    input.read_line(&mut line)?;
    let header: GridHeader = serde_json::from_str(line.trim_end())
        .map_err(|e| M3Error::Format(format!("bad grid header {:?}: {e}", line.trim_end())))?;
    let count = header
        .h
        .checked_mul(header.w)
        .and_then(|n| n.checked_mul(header.c))
        .ok_or_else(|| M3Error::Format("grid header dimensions overflow".into()))?;
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() != count * 4 {
        return Err(M3Error::Format(format!(
            "grid body has {} bytes, header implies {}",
            bytes.len(),
            count * 4
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    TokenGrid::new(header.h, header.w, header.c, values)
}

pub fn write_grid(path: &Path, grid: &TokenGrid<f32>) -> Result<()> {
    write_grid_to(BufWriter::new(File::create(path)?), grid)
}

pub fn read_grid(path: &Path) -> Result<TokenGrid<f32>> {
    read_grid_from(BufReader::new(File::open(path)?))
}
