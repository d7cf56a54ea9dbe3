//! Trajectory files.
//!
//! CSV: header `x1,...,xd` optionally followed by `v1,...,vd`, one sample
//! per row. A blank line or a row starting with `---` separates
//! trajectories.
//!
//! JSON: `{"positions": [[...], ...], "velocities": [...], "dt": 0.01,
//! "attractor": [...], "boundaries": [0, ...]}` with everything but
//! `positions` optional.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::damm::Demonstration;
use crate::error::{Error, Result};
use crate::lpvds::RolloutTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryFormat {
    Csv,
    Json,
}

impl TrajectoryFormat {
    /// `.json` means JSON, anything else CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => TrajectoryFormat::Json,
            _ => TrajectoryFormat::Csv,
        }
    }
}

/// Parsed file contents before velocities are filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTrajectories {
    pub positions: Vec<Vec<f64>>,
    pub velocities: Option<Vec<Vec<f64>>>,
    pub boundaries: Vec<usize>,
    pub dt: Option<f64>,
    pub attractor: Option<Vec<f64>>,
}

impl RawTrajectories {
    /// Fill in velocities (central differences with `dt`, one-sided at the
    /// ends of each trajectory) and the attractor, then validate.
    pub fn into_demonstration(self, dt: Option<f64>) -> Result<Demonstration> {
        let n = self.positions.len();
        let d = self.positions.first().map_or(0, Vec::len);
        let pos = DMatrix::from_fn(n, d, |i, j| self.positions[i][j]);
        let vel = match self.velocities {
            Some(v) => DMatrix::from_fn(n, d, |i, j| v[i][j]),
            None => {
                let dt = dt.or(self.dt).ok_or_else(|| {
                    Error::usage("the file has no velocity columns; pass a time step to differentiate positions")
                })?;
                if !(dt > 0.0 && dt.is_finite()) {
                    return Err(Error::usage("time step must be positive"));
                }
                finite_differences(&pos, &self.boundaries, dt)?
            }
        };
        match self.attractor {
            Some(a) => Demonstration::new(pos, vel, self.boundaries, DVector::from_vec(a)),
            None => Demonstration::with_default_attractor(pos, vel, self.boundaries),
        }
    }
}

fn finite_differences(pos: &DMatrix<f64>, boundaries: &[usize], dt: f64) -> Result<DMatrix<f64>> {
    let (n, d) = pos.shape();
    let mut vel = DMatrix::zeros(n, d);
    for (t, &start) in boundaries.iter().enumerate() {
        let end = boundaries.get(t + 1).copied().unwrap_or(n);
        if end - start < 2 {
            return Err(Error::usage(format!(
                "trajectory {t} has a single sample; velocities cannot be differentiated"
            )));
        }
        for i in start..end {
            let (a, b, h) = if i == start {
                (i, i + 1, dt)
            } else if i == end - 1 {
                (i - 1, i, dt)
            } else {
                (i - 1, i + 1, 2.0 * dt)
            };
            let row = (pos.row(b) - pos.row(a)) / h;
            vel.set_row(i, &row);
        }
    }
    Ok(vel)
}

fn parse_err(line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        line: line as usize,
        message: message.into(),
    }
}

/// Parse the CSV trajectory format.
pub fn parse_csv(text: &str) -> Result<RawTrajectories> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let cols: Vec<&str> = header.iter().collect();
    let d_x = cols.iter().take_while(|c| c.starts_with('x')).count();
    let d_v = cols.len() - d_x;
    let names_ok = cols[..d_x].iter().enumerate().all(|(j, c)| *c == format!("x{}", j + 1))
        && cols[d_x..].iter().enumerate().all(|(j, c)| *c == format!("v{}", j + 1));
    if d_x == 0 || !names_ok || (d_v != 0 && d_v != d_x) {
        return Err(parse_err(
            1,
            format!("header must be x1..xd optionally followed by v1..vd, found {:?}", cols),
        ));
    }
    let width = cols.len();
    let mut positions = Vec::new();
    let mut velocities = Vec::new();
    let mut boundaries = vec![0];
    let mut last_line = 1u64;
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        // A record's start position includes any blank lines before it.
        let (mut line, byte) = rec.position().map_or((0, 0), |p| (p.line(), p.byte() as usize));
        let blanks = text[byte.min(text.len())..]
            .lines()
            .take_while(|l| l.trim().is_empty())
            .count() as u64;
        line += blanks;
        let gap = blanks > 0;
        last_line = line;
        let sentinel = rec.get(0).is_some_and(|f| f.starts_with("---"));
        if (gap || sentinel) && boundaries.last() != Some(&positions.len()) {
            boundaries.push(positions.len());
        }
        if sentinel {
            continue;
        }
        if rec.len() != width {
            return Err(parse_err(line, format!("expected {width} fields, found {}", rec.len())));
        }
        let vals: Vec<f64> = rec
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(line, format!("not a finite number: {f:?}")))
            })
            .collect::<Result<_>>()?;
        positions.push(vals[..d_x].to_vec());
        if d_v > 0 {
            velocities.push(vals[d_x..].to_vec());
        }
    }
    if boundaries.last() == Some(&positions.len()) && boundaries.len() > 1 {
        boundaries.pop();
    }
    if positions.is_empty() {
        return Err(parse_err(last_line, "no samples"));
    }
    Ok(RawTrajectories {
        positions,
        velocities: (d_v > 0).then_some(velocities),
        boundaries,
        dt: None,
        attractor: None,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonTrajectories {
    positions: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    velocities: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    attractor: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    boundaries: Option<Vec<usize>>,
}

/// Parse the JSON trajectory format.
pub fn parse_json(text: &str) -> Result<RawTrajectories> {
    let raw: JsonTrajectories = serde_json::from_str(text).map_err(|e| parse_err(e.line() as u64, e.to_string()))?;
    let d = raw.positions.first().map_or(0, Vec::len);
    if raw.positions.is_empty() || raw.positions.iter().any(|r| r.len() != d) {
        return Err(Error::usage("positions must be a nonempty array of equal-length rows"));
    }
    if let Some(v) = &raw.velocities {
        if v.len() != raw.positions.len() || v.iter().any(|r| r.len() != d) {
            return Err(Error::usage("velocities must match the shape of positions"));
        }
    }
    Ok(RawTrajectories {
        positions: raw.positions,
        velocities: raw.velocities,
        boundaries: raw.boundaries.unwrap_or_else(|| vec![0]),
        dt: raw.dt,
        attractor: raw.attractor,
    })
}

/// Read a trajectory file. `dt` is needed when the file has no velocities
/// (a JSON file may carry its own).
pub fn load_trajectories(path: &Path, format: Option<TrajectoryFormat>, dt: Option<f64>) -> Result<Demonstration> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let raw = match format.unwrap_or_else(|| TrajectoryFormat::from_path(path)) {
        TrajectoryFormat::Csv => parse_csv(&text)?,
        TrajectoryFormat::Json => parse_json(&text)?,
    };
    raw.into_demonstration(dt)
}

fn write_rows<W: Write>(
    out: W,
    pos: &DMatrix<f64>,
    vel: &DMatrix<f64>,
    boundaries: &[usize],
) -> Result<()> {
    let d = pos.ncols();
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
    let header: Vec<String> = (1..=d)
        .map(|j| format!("x{j}"))
        .chain((1..=d).map(|j| format!("v{j}")))
        .collect();
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(&header).map_err(io)?;
    for i in 0..pos.nrows() {
        if i > 0 && boundaries.contains(&i) {
            w.write_record(["---"]).map_err(io)?;
        }
        let row: Vec<String> = pos
            .row(i)
            .iter()
            .chain(vel.row(i).iter())
            .map(|v| format!("{v:?}"))
            .collect();
        w.write_record(&row).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Write positions and velocities as CSV. Numbers use the shortest
/// representation that parses back to the same value.
pub fn write_csv<W: Write>(demo: &Demonstration, out: W) -> Result<()> {
    write_rows(out, demo.positions(), demo.velocities(), demo.boundaries())
}

/// Write as JSON including boundaries and attractor.
pub fn write_json<W: Write>(demo: &Demonstration, out: W) -> Result<()> {
    let rows = |m: &DMatrix<f64>| (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
    let raw = JsonTrajectories {
        positions: rows(demo.positions()),
        velocities: Some(rows(demo.velocities())),
        dt: None,
        attractor: Some(demo.attractor().iter().copied().collect()),
        boundaries: Some(demo.boundaries().to_vec()),
    };
    serde_json::to_writer_pretty(out, &raw)?;
    Ok(())
}

/// Write a rollout in the trajectory CSV format.
pub fn write_trace_csv<W: Write>(traces: &[RolloutTrace], out: W) -> Result<()> {
    let d = traces.first().map_or(0, |t| t.states.ncols());
    let n: usize = traces.iter().map(RolloutTrace::len).sum();
    let mut pos = DMatrix::zeros(n, d);
    let mut vel = DMatrix::zeros(n, d);
    let mut bounds = Vec::new();
    let mut at = 0;
    for t in traces {
        bounds.push(at);
        pos.rows_mut(at, t.len()).copy_from(&t.states);
        vel.rows_mut(at, t.len()).copy_from(&t.velocities);
        at += t.len();
    }
    write_rows(out, &pos, &vel, &bounds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positions_only_differentiates() {
        let raw = parse_csv("x1,x2\n0,0\n1,0\n3,0\n").unwrap();
        let demo = raw.into_demonstration(Some(0.5)).unwrap();
        assert_eq!(demo.velocity(0).as_slice(), &[2.0, 0.0]);
        assert_eq!(demo.velocity(1).as_slice(), &[3.0, 0.0]);
        assert_eq!(demo.velocity(2).as_slice(), &[4.0, 0.0]);
    }

    #[test]
    fn explicit_velocities_verbatim() {
        let raw = parse_csv("x1,x2,v1,v2\n0,0,7,8\n1,0,9,10\n").unwrap();
        let demo = raw.into_demonstration(None).unwrap();
        assert_eq!(demo.velocity(1).as_slice(), &[9.0, 10.0]);
    }

    #[test]
    fn separators() {
        let blank = parse_csv("x1,x2\n0,0\n1,0\n\n5,5\n6,6\n7,7\n").unwrap();
        assert_eq!(blank.boundaries, vec![0, 2]);
        let dashes = parse_csv("x1,x2\n0,0\n1,0\n---\n5,5\n6,6\n").unwrap();
        assert_eq!(dashes.boundaries, vec![0, 2]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        match parse_csv("x1,x2\n0,0\n1,abc\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        match parse_csv("x1,x2\n0,0\n1\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_csv("a,b\n1,2\n"), Err(Error::Parse { line: 1, .. })));
        assert!(parse_csv("x1,x2\n0,0\n").unwrap().into_demonstration(None).is_err());
    }

    #[test]
    fn json_reads_dt_and_attractor() {
        let raw = parse_json(r#"{"positions": [[0, 0], [1, 1], [2, 2]], "dt": 1.0, "attractor": [2, 2]}"#).unwrap();
        let demo = raw.into_demonstration(None).unwrap();
        assert_eq!(demo.velocity(1).as_slice(), &[1.0, 1.0]);
        assert_eq!(demo.attractor().as_slice(), &[2.0, 2.0]);
    }
}
