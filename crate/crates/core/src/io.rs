//! CSV serialization of kernels, driver increments, paths and predictions.
//!
//! Each file starts with `#` comment lines carrying free-form metadata,
//! followed by a header row and one row per grid point. Floats use Rust's
//! shortest round-trip formatting, so files are byte-stable across runs.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use crate::drivers::DriverPath;
use crate::engine::{PredictionResult, RecoveredNoise, SampledPath};
use crate::error::{Error, Result};
use crate::msdde::SampledKernel;

const MODULE: &str = "io";

fn io_err(e: impl std::fmt::Display) -> Error {
    Error::invalid(MODULE, e.to_string())
}

fn write_comments<W: Write>(w: &mut W, comments: &[String]) -> Result<()> {
    for c in comments {
        for line in c.lines() {
            writeln!(w, "# {line}").map_err(io_err)?;
        }
    }
    Ok(())
}

fn write_rows<W: Write>(w: W, header: Vec<String>, rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let mut out = csv::WriterBuilder::new().from_writer(w);
    out.write_record(&header).map_err(io_err)?;
    for r in rows {
        out.write_record(r.iter().map(|v| format!("{v}"))).map_err(io_err)?;
    }
    out.flush().map_err(io_err)?;
    Ok(())
}

fn matrix_literal(m: &DMatrix<f64>) -> String {
    let rows: Vec<String> = m
        .row_iter()
        .map(|r| format!("[{}]", r.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(", ")))
        .collect();
    format!("[{}]", rows.join(", "))
}

/// `t,{name}_11,{name}_12,…` with the jump at the origin recorded in the
/// comment block.
pub fn write_kernel<W: Write>(mut w: W, name: &str, kernel: &SampledKernel, comments: &[String]) -> Result<()> {
    write_comments(&mut w, comments)?;
    write_comments(&mut w, &[format!("atom_at_zero = {}", matrix_literal(kernel.atom_at_zero()))])?;
    let (r, c) = kernel.shape();
    let mut header = vec!["t".to_string()];
    for i in 0..r {
        for j in 0..c {
            header.push(format!("{name}_{}{}", i + 1, j + 1));
        }
    }
    let dt = kernel.dt();
    let rows = kernel.values().iter().enumerate().map(move |(k, m)| {
        let mut row = vec![k as f64 * dt];
        for i in 0..r {
            for j in 0..c {
                row.push(m[(i, j)]);
            }
        }
        row
    });
    write_rows(w, header, rows)
}

/// `t,dZ_1,…,dZ_n`, one row per step, `t` at the start of the step.
pub fn write_driver<W: Write>(mut w: W, driver: &DriverPath, comments: &[String]) -> Result<()> {
    write_comments(&mut w, comments)?;
    let n = driver.dim();
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|j| format!("dZ_{j}")));
    let rows = (0..driver.steps()).map(|k| {
        let mut row = vec![driver.t0 + k as f64 * driver.dt];
        row.extend(driver.increments.row(k).iter().copied());
        row
    });
    write_rows(w, header, rows)
}

/// Recovered increments with a trailing `valid` column (1 or 0).
pub fn write_recovered<W: Write>(mut w: W, rec: &RecoveredNoise, comments: &[String]) -> Result<()> {
    write_comments(&mut w, comments)?;
    let d = &rec.path;
    let n = d.dim();
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|j| format!("dZ_{j}")));
    header.push("valid".to_string());
    let rows = (0..d.steps()).map(|k| {
        let mut row = vec![d.t0 + k as f64 * d.dt];
        row.extend(d.increments.row(k).iter().copied());
        row.push(if rec.valid[k] { 1.0 } else { 0.0 });
        row
    });
    write_rows(w, header, rows)
}

/// `t,X_1,…,X_n` followed by `X{j}_i` columns for the derivative stacks.
pub fn write_path<W: Write>(mut w: W, path: &SampledPath, comments: &[String]) -> Result<()> {
    write_comments(&mut w, comments)?;
    let n = path.dim();
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("X_{i}")));
    for j in 1..=path.derivatives.len() {
        header.extend((1..=n).map(|i| format!("X{j}_{i}")));
    }
    let rows = (0..path.len()).map(|k| {
        let mut row = vec![path.time(k)];
        row.extend(path.values.row(k).iter().copied());
        for d in &path.derivatives {
            row.extend(d.row(k).iter().copied());
        }
        row
    });
    write_rows(w, header, rows)
}

/// `t,pred_*,term1_*,term2_*,term3_*`.
pub fn write_prediction<W: Write>(mut w: W, res: &PredictionResult, comments: &[String]) -> Result<()> {
    write_comments(&mut w, comments)?;
    write_comments(&mut w, &[format!("s = {}", res.s)])?;
    let n = res.mean.ncols();
    let mut header = vec!["t".to_string()];
    for name in ["pred", "term1", "term2", "term3"] {
        header.extend((1..=n).map(|i| format!("{name}_{i}")));
    }
    let rows = res.times.iter().enumerate().map(|(k, t)| {
        let mut row = vec![*t];
        for m in [&res.mean, &res.term1, &res.term2, &res.term3] {
            row.extend(m.row(k).iter().copied());
        }
        row
    });
    write_rows(w, header, rows)
}

/// Numeric table: header names and rows, comments skipped.
pub fn read_table<R: Read>(r: R) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(r);
    let header: Vec<String> = rdr.headers().map_err(io_err)?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(io_err)?;
        let row = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| Error::invalid(MODULE, format!("row {}: cannot parse {s:?}", i + 1))))
            .collect::<Result<Vec<f64>>>()?;
        if row.len() != header.len() {
            return Err(Error::dimension(MODULE, format!("row {} has {} fields, header has {}", i + 1, row.len(), header.len())));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

fn uniform_step(times: &[f64]) -> Result<f64> {
    if times.len() < 2 {
        return Err(Error::invalid(MODULE, "need at least two rows to infer the grid step"));
    }
    let dt = times[1] - times[0];
    if !(dt > 0.0) {
        return Err(Error::invalid(MODULE, "time column must increase"));
    }
    for w in times.windows(2) {
        if ((w[1] - w[0]) - dt).abs() > 1e-9 * dt.max(1.0) {
            return Err(Error::invalid(MODULE, "time grid must be uniform"));
        }
    }
    Ok(dt)
}

/// Reads a path written by [`write_path`] (or any `t,X_1..X_n[,X1_1..]` table).
pub fn read_path<R: Read>(r: R, n: usize) -> Result<SampledPath> {
    let (header, rows) = read_table(r)?;
    if header.first().map(String::as_str) != Some("t") || (header.len() - 1) % n != 0 || header.len() < n + 1 {
        return Err(Error::dimension(MODULE, format!("path header must be t followed by multiples of {n} columns")));
    }
    let times: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let dt = uniform_step(&times)?;
    let blocks = (header.len() - 1) / n;
    let mut mats = vec![DMatrix::zeros(rows.len(), n); blocks];
    for (k, row) in rows.iter().enumerate() {
        for b in 0..blocks {
            for i in 0..n {
                mats[b][(k, i)] = row[1 + b * n + i];
            }
        }
    }
    let values = mats.remove(0);
    SampledPath::new(times[0], dt, values, mats)
}

/// Reads `t,Z_1..Z_n` samples of a cumulative noise forecast.
pub fn read_vectors<R: Read>(r: R, n: usize) -> Result<(Vec<f64>, Vec<DVector<f64>>)> {
    let (header, rows) = read_table(r)?;
    if header.len() != n + 1 {
        return Err(Error::dimension(MODULE, format!("expected t plus {n} columns")));
    }
    let times = rows.iter().map(|r| r[0]).collect();
    let vecs = rows.iter().map(|r| DVector::from_column_slice(&r[1..])).collect();
    Ok((times, vecs))
}

/// Reads driver increments written by [`write_driver`].
pub fn read_driver<R: Read>(r: R, n: usize) -> Result<DriverPath> {
    let (header, rows) = read_table(r)?;
    if header.len() < n + 1 {
        return Err(Error::dimension(MODULE, format!("expected t plus {n} increment columns")));
    }
    let times: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let dt = uniform_step(&times)?;
    let increments = DMatrix::from_fn(rows.len(), n, |k, j| rows[k][1 + j]);
    Ok(DriverPath { t0: times[0], dt, increments, seed: 0, stream: 0, spec: None })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_roundtrip() {
        let values = DMatrix::from_fn(5, 2, |k, j| k as f64 * 0.1 + j as f64);
        let deriv = DMatrix::from_fn(5, 2, |k, j| -(k as f64) - j as f64 * 0.5);
        let path = SampledPath::new(1.0, 0.25, values, vec![deriv]).unwrap();
        let mut buf = Vec::new();
        write_path(&mut buf, &path, &["seed = 3".to_string()]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# seed = 3\nt,X_1,X_2,X1_1,X1_2\n"));
        let back = read_path(buf.as_slice(), 2).unwrap();
        assert_eq!(back, path);
    }

    #[test]
    fn kernel_header() {
        let k = SampledKernel::new(0.5, vec![DMatrix::identity(1, 1); 3], DMatrix::identity(1, 1)).unwrap();
        let mut buf = Vec::new();
        write_kernel(&mut buf, "g", &k, &[]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "# atom_at_zero = [[1]]\nt,g_11\n0,1\n0.5,1\n1,1\n");
    }

    #[test]
    fn rejects_ragged_grid() {
        let text = "t,X_1\n0,1\n0.1,2\n0.3,3\n";
        assert!(read_path(text.as_bytes(), 1).is_err());
    }
}
