//! CSV and key-value file formats.
//!
//! - network file: one row per segment, `segment_id, weight, downstream_id,
//!   polyline` where the polyline is a semicolon-separated list of `x:y`
//!   pairs and an empty `downstream_id` marks the outlet;
//! - sites file: `site_id, segment_id, arc_position`, row order defining the
//!   dimension order of every downstream vector;
//! - observations/predictions: header `t` followed by the site ids, one row
//!   per time step;
//! - matrices: headerless, row per line;
//! - tail-up parameters: `sigma2=... / phi=...` lines.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! write/read cycle is lossless and byte output is deterministic.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::harness::{FailureRow, ResultRow, TraceRecord};
use crate::network::{Point, Segment, Site};
use crate::tailup::TailUpParams;

#[derive(Debug, Error)]
pub enum FileError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Format(String),
}

fn format_err(msg: impl Into<String>) -> FileError {
    FileError::Format(msg.into())
}

fn parse_f64(s: &str, what: &str) -> Result<f64, FileError> {
    s.trim()
        .parse()
        .map_err(|_| format_err(format!("cannot parse {what} from {s:?}")))
}

// ── Network / sites ─────────────────────────────────────────────────────

pub fn read_network_csv(path: &Path) -> Result<Vec<Segment>, FileError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let mut segments = Vec::new();
    for record in reader.records() {
        let record = record?;
        if record.len() != 4 {
            return Err(format_err(format!("network row needs 4 fields, got {}", record.len())));
        }
        let polyline = record[3]
            .split(';')
            .map(|pair| {
                let (x, y) = pair
                    .split_once(':')
                    .ok_or_else(|| format_err(format!("polyline point {pair:?} is not x:y")))?;
                Ok(Point::new(parse_f64(x, "polyline x")?, parse_f64(y, "polyline y")?))
            })
            .collect::<Result<Vec<_>, FileError>>()?;
        segments.push(Segment {
            id: record[0].to_string(),
            weight: parse_f64(&record[1], "weight")?,
            downstream_id: (!record[2].is_empty()).then(|| record[2].to_string()),
            polyline,
        });
    }
    Ok(segments)
}

pub fn write_network_csv(path: &Path, segments: &[Segment]) -> Result<(), FileError> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["segment_id", "weight", "downstream_id", "polyline"])?;
    for seg in segments {
        let polyline: Vec<String> =
            seg.polyline.iter().map(|p| format!("{}:{}", p.x, p.y)).collect();
        writer.write_record([
            seg.id.as_str(),
            &seg.weight.to_string(),
            seg.downstream_id.as_deref().unwrap_or(""),
            &polyline.join(";"),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_sites_csv(path: &Path) -> Result<Vec<Site>, FileError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let mut sites = Vec::new();
    for record in reader.records() {
        let record = record?;
        if record.len() != 3 {
            return Err(format_err(format!("sites row needs 3 fields, got {}", record.len())));
        }
        sites.push(Site {
            id: record[0].to_string(),
            segment_id: record[1].to_string(),
            arc_position: parse_f64(&record[2], "arc_position")?,
        });
    }
    Ok(sites)
}

pub fn write_sites_csv(path: &Path, sites: &[Site]) -> Result<(), FileError> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["site_id", "segment_id", "arc_position"])?;
    for site in sites {
        writer.write_record([site.id.as_str(), &site.segment_id, &site.arc_position.to_string()])?;
    }
    writer.flush()?;
    Ok(())
}

// ── Observations ────────────────────────────────────────────────────────

/// An observation (or prediction) table: timestamps, site column names, and
/// the value matrix in file order.
#[derive(Debug, Clone)]
pub struct ObservationsFile {
    pub timestamps: Vec<u64>,
    pub site_names: Vec<String>,
    pub values: DMatrix<f64>,
}

pub fn read_observations_csv(path: &Path) -> Result<ObservationsFile, FileError> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    if header.is_empty() || &header[0] != "t" {
        return Err(format_err("observation header must start with a `t` column"));
    }
    let site_names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    if site_names.is_empty() {
        return Err(format_err("observation file has no site columns"));
    }
    let mut timestamps = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    for record in reader.records() {
        let record = record?;
        if record.len() != site_names.len() + 1 {
            return Err(format_err(format!(
                "observation row has {} fields, header promises {}",
                record.len(),
                site_names.len() + 1
            )));
        }
        let t = record[0]
            .trim()
            .parse()
            .map_err(|_| format_err(format!("cannot parse timestamp {:?}", &record[0])))?;
        timestamps.push(t);
        for field in record.iter().skip(1) {
            rows.push(parse_f64(field, "observation value")?);
        }
    }
    let values = DMatrix::from_row_slice(timestamps.len(), site_names.len(), &rows);
    Ok(ObservationsFile { timestamps, site_names, values })
}

pub fn write_observations_csv(
    path: &Path,
    timestamps: &[u64],
    site_names: &[String],
    values: &DMatrix<f64>,
) -> Result<(), FileError> {
    let file = std::fs::File::create(path)?;
    write_observations_to(std::io::BufWriter::new(file), timestamps, site_names, values)
}

pub fn write_observations_to<W: Write>(
    mut out: W,
    timestamps: &[u64],
    site_names: &[String],
    values: &DMatrix<f64>,
) -> Result<(), FileError> {
    if timestamps.len() != values.nrows() || site_names.len() != values.ncols() {
        return Err(format_err("observation shape does not match timestamps/site names"));
    }
    write!(out, "t")?;
    for name in site_names {
        write!(out, ",{name}")?;
    }
    writeln!(out)?;
    for (k, t) in timestamps.iter().enumerate() {
        write!(out, "{t}")?;
        for v in values.row(k).iter() {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

// ── Matrices ────────────────────────────────────────────────────────────

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>, FileError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|v| parse_f64(v, "matrix entry"))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(format_err("matrix file is empty"));
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(format_err("matrix rows have unequal lengths"));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(DMatrix::from_row_slice(flat.len() / ncols, ncols, &flat))
}

pub fn write_matrix_csv(path: &Path, matrix: &DMatrix<f64>) -> Result<(), FileError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in matrix.row_iter() {
        let line: Vec<String> = row.iter().map(f64::to_string).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    out.flush()?;
    Ok(())
}

// ── Tail-up parameters ──────────────────────────────────────────────────

pub fn write_tailup_params(path: &Path, params: &TailUpParams) -> Result<(), FileError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "sigma2={}", params.sigma2)?;
    writeln!(out, "phi={}", params.phi)?;
    out.flush()?;
    Ok(())
}

pub fn read_tailup_params(path: &Path) -> Result<TailUpParams, FileError> {
    let mut sigma2 = None;
    let mut phi = None;
    for line in BufReader::new(std::fs::File::open(path)?).lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format_err(format!("expected key=value, got {line:?}")))?;
        match key.trim() {
            "sigma2" => sigma2 = Some(parse_f64(value, "sigma2")?),
            "phi" => phi = Some(parse_f64(value, "phi")?),
            other => return Err(format_err(format!("unknown key {other:?}"))),
        }
    }
    match (sigma2, phi) {
        (Some(sigma2), Some(phi)) => TailUpParams::new(sigma2, phi)
            .map_err(|e| format_err(format!("invalid parameters: {e}"))),
        _ => Err(format_err("params file must define sigma2 and phi")),
    }
}

// ── Trace and results tables ────────────────────────────────────────────

pub fn write_trace_to<W: Write>(mut out: W, trace: &[TraceRecord]) -> Result<(), FileError> {
    writeln!(out, "t,alpha_t,threshold,covered,volume_scaled")?;
    for r in trace {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.t,
            r.alpha_t,
            r.threshold,
            u8::from(r.covered),
            r.volume_scaled
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_trace_csv(path: &Path, trace: &[TraceRecord]) -> Result<(), FileError> {
    write_trace_to(std::io::BufWriter::new(std::fs::File::create(path)?), trace)
}

pub fn write_results_to<W: Write>(mut out: W, rows: &[ResultRow]) -> Result<(), FileError> {
    writeln!(out, "method,lambda,n_cal,gamma,mode,seed,coverage,efficiency,n_fullspace")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.method, r.lambda, r.n_cal, r.gamma, r.mode, r.seed, r.coverage, r.efficiency, r.n_fullspace
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<(), FileError> {
    write_results_to(std::io::BufWriter::new(std::fs::File::create(path)?), rows)
}

/// Failed sweep cells, kept separate so the results table schema stays clean.
pub fn write_failures_csv(path: &Path, rows: &[FailureRow]) -> Result<(), FileError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "method,lambda,n_cal,gamma,mode,seed,error")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{:?}",
            r.method, r.lambda, r.n_cal, r.gamma, r.mode, r.seed, r.error
        )?;
    }
    out.flush()?;
    Ok(())
}
