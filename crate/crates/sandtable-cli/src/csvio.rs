//! CSV export and import of lattice fields. One file per field, header
//! `i,j,x,y,value`, rows in storage order (`j` outer, `i` inner). Values
//! are printed with 17 significant digits so a re-import reproduces the
//! field bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sandtable::dynamics::{NodeClasses, NodeKind};
use sandtable::grid::{Grid, LabelField, MaskField, ScalarField};
use sandtable::geometry::RegionLabel;

use crate::CliError;

const HEADER: &str = "i,j,x,y,value";

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn write_rows(path: &Path, grid: &Grid, value: impl Fn(usize, usize) -> String) -> Result<(), CliError> {
    let mut out = String::with_capacity(grid.len() * 64);
    out.push_str(HEADER);
    out.push('\n');
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            let p = grid.point(i, j);
            writeln!(out, "{i},{j},{:.16e},{:.16e},{}", p.x, p.y, value(i, j)).unwrap();
        }
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn write_field(path: &Path, field: &ScalarField) -> Result<(), CliError> {
    write_rows(path, field.grid(), |i, j| format!("{:.16e}", field.get(i, j)))
}

/// Region labels as integers: ridge is -1, region `a` of arc `i` packs to
/// `3i` (arc interior), `3i + 1` (endpoint A fan), `3i + 2` (endpoint B fan).
pub fn write_labels(path: &Path, labels: &LabelField) -> Result<(), CliError> {
    write_rows(path, labels.grid(), |i, j| {
        let code: i64 = match labels.get(i, j) {
            RegionLabel::Ridge => -1,
            RegionLabel::Interior(a) => 3 * a as i64,
            RegionLabel::EndA(a) => 3 * a as i64 + 1,
            RegionLabel::EndB(a) => 3 * a as i64 + 2,
        };
        code.to_string()
    })
}

pub fn write_mask(path: &Path, mask: &MaskField) -> Result<(), CliError> {
    write_rows(path, mask.grid(), |i, j| if mask.get(i, j) { "1" } else { "0" }.to_string())
}

/// Node classification: 0 interior, 1 open boundary, 2 wall, -1 exterior.
pub fn write_kinds(path: &Path, classes: &NodeClasses) -> Result<(), CliError> {
    write_rows(path, classes.grid(), |i, j| {
        let code: i64 = match classes.kind(classes.grid().idx(i, j)) {
            NodeKind::Interior => 0,
            NodeKind::Gamma => 1,
            NodeKind::Wall => 2,
            NodeKind::Exterior => -1,
        };
        code.to_string()
    })
}

/// Convergence-rate history, header `step,rate`.
pub fn write_rates(path: &Path, history: &[(usize, f64)]) -> Result<(), CliError> {
    let mut out = String::with_capacity(history.len() * 32 + 16);
    out.push_str("step,rate\n");
    for &(step, rate) in history {
        writeln!(out, "{step},{:.16e}", rate).unwrap();
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Read a field written by [`write_field`], reconstructing the lattice
/// from the index and coordinate columns.
pub fn read_field(path: &Path) -> Result<ScalarField, CliError> {
    let bad = |msg: String| CliError::Config(format!("{}: {msg}", path.display()));
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == HEADER => {}
        other => return Err(bad(format!("expected header `{HEADER}`, found {other:?}"))),
    }

    struct Row {
        i: usize,
        j: usize,
        x: f64,
        y: f64,
        value: f64,
    }
    let mut rows = Vec::new();
    let (mut max_i, mut max_j) = (0usize, 0usize);
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split(',');
        let mut next = |name: &str| {
            cols.next()
                .ok_or_else(|| bad(format!("line {}: missing column {name}", lineno + 2)))
        };
        let parse_idx = |s: &str, name: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| bad(format!("line {}: column {name}: {e}", lineno + 2)))
        };
        let parse_val = |s: &str, name: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| bad(format!("line {}: column {name}: {e}", lineno + 2)))
        };
        let row = Row {
            i: parse_idx(next("i")?, "i")?,
            j: parse_idx(next("j")?, "j")?,
            x: parse_val(next("x")?, "x")?,
            y: parse_val(next("y")?, "y")?,
            value: parse_val(next("value")?, "value")?,
        };
        max_i = max_i.max(row.i);
        max_j = max_j.max(row.j);
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(bad("no data rows".into()));
    }

    let (nx, ny) = (max_i + 1, max_j + 1);
    let origin = rows
        .iter()
        .find(|r| r.i == 0 && r.j == 0)
        .ok_or_else(|| bad("no row with i = 0, j = 0".into()))?;
    let (x0, y0) = (origin.x, origin.y);
    let h = if nx > 1 {
        rows.iter()
            .find(|r| r.i == 1 && r.j == 0)
            .map(|r| r.x - x0)
            .ok_or_else(|| bad("no row with i = 1, j = 0".into()))?
    } else if ny > 1 {
        rows.iter()
            .find(|r| r.i == 0 && r.j == 1)
            .map(|r| r.y - y0)
            .ok_or_else(|| bad("no row with i = 0, j = 1".into()))?
    } else {
        return Err(bad("single-point lattice has no step to infer".into()));
    };
    if !(h.is_finite() && h > 0.0) {
        return Err(bad(format!("inferred step {h} is not positive")));
    }

    let grid = Grid { nx, ny, h, x0, y0 };
    let mut data = vec![f64::NAN; grid.len()];
    let mut seen = vec![false; grid.len()];
    for row in &rows {
        let k = grid.idx(row.i, row.j);
        if seen[k] {
            return Err(bad(format!("duplicate row for i = {}, j = {}", row.i, row.j)));
        }
        seen[k] = true;
        data[k] = row.value;
    }
    if let Some(k) = seen.iter().position(|s| !s) {
        return Err(bad(format!(
            "missing row for i = {}, j = {}",
            k % grid.nx,
            k / grid.nx
        )));
    }
    Ok(ScalarField::new(grid, data))
}
