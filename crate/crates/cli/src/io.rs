//! Dataset CSV format: one observation per row, `Y` first, then the curve
//! values. An optional first row starting with `grid` lists the grid points;
//! without it the grid is equispaced on `[0, 1]` with one point per column.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use smallunif::{Dataset, Grid};

#[derive(Debug)]
pub struct ParseError(pub String);

impl std::fmt::Display for ParseError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn field(record: &csv::StringRecord, line: u64, col: usize) -> Result<f64, ParseError> {
    let raw = record[col].trim();
    raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
        ParseError(format!(
            "line {line}, column {}: `{raw}` is not a finite number",
            col + 1
        ))
    })
}

pub fn read_dataset<R: Read>(reader: R) -> Result<Dataset, ParseError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let mut grid_points: Option<Vec<f64>> = None;
    let mut y = Vec::new();
    let mut x: Vec<f64> = Vec::new();
    let mut width: Option<usize> = None;
    for (idx, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| ParseError(format!("malformed CSV: {e}")))?;
        let line = rec.position().map_or(idx as u64 + 1, |p| p.line());
        if idx == 0 && rec.get(0).is_some_and(|s| s.eq_ignore_ascii_case("grid")) {
            let pts = (1..rec.len())
                .map(|c| field(&rec, line, c))
                .collect::<Result<Vec<_>, _>>()?;
            width = Some(pts.len() + 1);
            grid_points = Some(pts);
            continue;
        }
        match width {
            Some(w) if w != rec.len() => {
                return Err(ParseError(format!(
                    "line {line}: expected {w} columns, found {}",
                    rec.len()
                )))
            }
            None => width = Some(rec.len()),
            _ => {}
        }
        if rec.len() < 3 {
            return Err(ParseError(format!("line {line}: need Y and at least two curve values")));
        }
        y.push(field(&rec, line, 0)?);
        for c in 1..rec.len() {
            x.push(field(&rec, line, c)?);
        }
    }
    if y.is_empty() {
        return Err(ParseError("no observations".into()));
    }
    let m = width.unwrap_or(0) - 1;
    let grid = match grid_points {
        Some(p) => Grid::new(p),
        None => Grid::equispaced(m),
    }
    .map_err(|e| ParseError(format!("grid: {e}")))?;
    let x = smallunif::nalgebra::DMatrix::from_row_slice(y.len(), m, &x);
    Dataset::new(Arc::new(grid), x, y).map_err(|e| ParseError(e.to_string()))
}

pub fn load_dataset(path: &Path) -> Result<Dataset, ParseError> {
    let file = std::fs::File::open(path).map_err(|e| ParseError(format!("{}: {e}", path.display())))?;
    read_dataset(file).map_err(|e| ParseError(format!("{}: {e}", path.display())))
}

/// Writes `data` with an explicit grid row.
pub fn write_dataset<W: Write>(data: &Dataset, w: W) -> std::io::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let to_io = |e: csv::Error| std::io::Error::other(e);
    let mut header = vec!["grid".to_string()];
    header.extend(data.grid().points().iter().map(|p| format!("{p:?}")));
    wr.write_record(&header).map_err(to_io)?;
    for i in 0..data.n() {
        let mut row = vec![format!("{:?}", data.y()[i])];
        row.extend(data.x().row(i).iter().map(|v| format!("{v:?}")));
        wr.write_record(&row).map_err(to_io)?;
    }
    wr.flush()
}
