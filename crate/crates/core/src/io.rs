//! File formats: the `MFGRID1` binary grid (optionally followed by a field),
//! CSV tables with round-trip float formatting, and 8-bit PGM images.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::grid::DomainGrid;
use crate::shape::Shape;

pub const GRID_MAGIC: &[u8; 7] = b"MFGRID1";

/// Writes magic, `nx`, `ny` (u32 LE), `h` (f64 LE) and the row-major mask bytes.
pub fn write_grid(w: &mut impl Write, grid: &DomainGrid) -> Result<()> {
    let dim = |n: usize| u32::try_from(n).map_err(|_| Error::Format(format!("dimension {n} exceeds u32")));
    w.write_all(GRID_MAGIC)?;
    w.write_all(&dim(grid.nx())?.to_le_bytes())?;
    w.write_all(&dim(grid.ny())?.to_le_bytes())?;
    w.write_all(&grid.h().to_le_bytes())?;
    let bytes: Vec<u8> = grid.mask().iter().map(|&m| m as u8).collect();
    w.write_all(&bytes)?;
    Ok(())
}

/// Reads a grid block. The analytic `shape`, when given, restores the exact
/// boundary geometry; its raster must match the stored mask.
pub fn read_grid(r: &mut impl Read, shape: Option<Shape>) -> Result<DomainGrid> {
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)?;
    if &magic != GRID_MAGIC {
        return Err(Error::Format("missing MFGRID1 magic".into()));
    }
    let mut u4 = [0u8; 4];
    r.read_exact(&mut u4)?;
    let nx = u32::from_le_bytes(u4) as usize;
    r.read_exact(&mut u4)?;
    let ny = u32::from_le_bytes(u4) as usize;
    let mut f8 = [0u8; 8];
    r.read_exact(&mut f8)?;
    let h = f64::from_le_bytes(f8);
    let mut bytes = vec![0u8; nx * ny];
    r.read_exact(&mut bytes)?;
    if let Some(b) = bytes.iter().find(|&&b| b > 1) {
        return Err(Error::Format(format!("mask byte {b} is not 0 or 1")));
    }
    if nx == 0 || (h - 1.0 / nx as f64).abs() > 1e-15 {
        return Err(Error::Format(format!("spacing {h} does not match 1/nx for nx={nx}")));
    }
    let mask: Vec<bool> = bytes.into_iter().map(|b| b == 1).collect();
    if let Some(s) = shape {
        let grid = DomainGrid::build(s, nx)?;
        if grid.ny() != ny || grid.mask() != mask.as_slice() {
            return Err(Error::GridMismatch);
        }
        return Ok(grid);
    }
    DomainGrid::from_mask(nx, ny, mask, None)
}

/// A grid block followed by one f64 LE value per inside cell.
pub fn write_field(w: &mut impl Write, field: &ScalarField) -> Result<()> {
    write_grid(w, field.grid())?;
    for v in &field.values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_field(r: &mut impl Read, shape: Option<Shape>) -> Result<ScalarField> {
    let grid = Arc::new(read_grid(r, shape)?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != 8 * grid.len() {
        return Err(Error::Format(format!(
            "field payload has {} bytes, expected {}",
            bytes.len(),
            8 * grid.len()
        )));
    }
    let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    ScalarField::new(grid, values)
}

pub fn save_field(path: &Path, field: &ScalarField) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_field(&mut w, field)?;
    w.flush()?;
    Ok(())
}

pub fn load_field(path: &Path, shape: Option<Shape>) -> Result<ScalarField> {
    read_field(&mut BufReader::new(File::open(path)?), shape)
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// A CSV table with a header row; cells are kept as text.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        Table { header: header.iter().map(|s| s.as_ref().to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(Error::Format(format!("row has {} cells, header has {}", row.len(), self.header.len())));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn push_numbers(&mut self, row: &[f64]) -> Result<()> {
        self.push(row.iter().map(|&v| fmt_f64(v)).collect())
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn write(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(&self.header).map_err(csv_err)?;
        for row in &self.rows {
            out.write_record(row).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read(r: impl Read) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
        let mut table = Table { header, rows: Vec::new() };
        for rec in rd.records() {
            table.rows.push(rec.map_err(csv_err)?.iter().map(str::to_string).collect());
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Binary 8-bit PGM of `field`, scaled by its maximum; outside cells are 0
/// and the first image row is the top of the domain.
pub fn write_pgm(w: &mut impl Write, field: &ScalarField) -> Result<()> {
    let grid = field.grid();
    let (nx, ny) = (grid.nx(), grid.ny());
    let top = field.max();
    let scale = if top > 0.0 { 255.0 / top } else { 0.0 };
    let mut pixels = vec![0u8; nx * ny];
    for (k, &v) in field.values.iter().enumerate() {
        let [i, j] = grid.cell(k);
        pixels[(ny - 1 - j) * nx + i] = (v.max(0.0) * scale).round().min(255.0) as u8;
    }
    write!(w, "P5\n{nx} {ny}\n255\n")?;
    w.write_all(&pixels)?;
    Ok(())
}

pub fn save_pgm(path: &Path, field: &ScalarField) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_pgm(&mut w, field)?;
    w.flush()?;
    Ok(())
}
