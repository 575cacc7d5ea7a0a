//! CSV/JSON artifact writers and the measurement reader.

use std::fs;
use std::io::Write;
use std::path::Path;

use hopf_rtoc::channel::{FieldGrid, MeasurementSet, Point};
use hopf_rtoc::lincontrol::Trajectory;

use crate::CliError;

pub const TRAJECTORY_HEADER: [&str; 8] = ["t_s", "qx_m", "qy_m", "vx_mps", "vy_mps", "ux", "uy", "cycle"];
pub const MEASUREMENT_HEADER: [&str; 3] = ["x_m", "y_m", "cnr_db"];
pub const GRID_HEADER: [&str; 4] = ["x_m", "y_m", "mean_db", "var_db2"];

/// `printf("%.9g")`: nine significant digits, trailing zeros dropped,
/// exponent form outside `1e-4 <= |v| < 1e9`.
pub fn fmt_num(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..9).contains(&exp) {
        let fixed = format!("{:.*}", (8 - exp) as usize, v);
        trim_zeros(&fixed).to_string()
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa), exp.abs())
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn csv_bytes<I, R>(header: &[&str], rows: I) -> Result<Vec<u8>, CliError>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(header).map_err(io_err)?;
    for row in rows {
        w.write_record(row).map_err(io_err)?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}

fn io_err(e: impl std::fmt::Display) -> CliError {
    CliError::Io(e.to_string())
}

/// Write through a temporary file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    tmp.write_all(bytes).map_err(io_err)?;
    tmp.as_file().sync_all().map_err(io_err)?;
    tmp.persist(path)
        .map_err(|e| CliError::Io(format!("{}: {}", path.display(), e.error)))?;
    Ok(())
}

/// Rows `t_s, q, v, u, cycle` for one trajectory whose local time starts at
/// `t0`. Needs a planar state `(qx, qy, vx, vy)` and a 2-D control.
pub fn trajectory_rows(traj: &Trajectory, t0: f64, cycle: usize) -> Vec<Vec<String>> {
    traj.times
        .iter()
        .zip(&traj.states)
        .zip(&traj.controls)
        .map(|((t, x), u)| {
            let mut row = vec![fmt_num(t0 + t)];
            row.extend((0..4).map(|i| fmt_num(x[i])));
            row.extend((0..2).map(|i| fmt_num(u[i])));
            row.push(cycle.to_string());
            row
        })
        .collect()
}

pub fn trajectory_csv(rows: Vec<Vec<String>>) -> Result<Vec<u8>, CliError> {
    csv_bytes(&TRAJECTORY_HEADER, rows)
}

pub fn grid_csv(grid: &FieldGrid) -> Result<Vec<u8>, CliError> {
    let rows = grid.points().enumerate().map(|(k, q)| {
        let var = grid.var.as_ref().map_or(f64::NAN, |v| v[k]);
        vec![fmt_num(q.x), fmt_num(q.y), fmt_num(grid.mean[k]), fmt_num(var)]
    });
    csv_bytes(&GRID_HEADER, rows)
}

pub fn measurements_csv(set: &MeasurementSet) -> Result<Vec<u8>, CliError> {
    let rows = set.iter().map(|(q, y)| vec![fmt_num(q.x), fmt_num(q.y), fmt_num(y)]);
    csv_bytes(&MEASUREMENT_HEADER, rows)
}

/// Reads `x_m,y_m,cnr_db`. An empty file is an empty set.
pub fn read_measurements(path: &Path) -> Result<MeasurementSet, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_measurements(&text).map_err(|e| match e {
        CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_measurements(text: &str) -> Result<MeasurementSet, CliError> {
    let mut set = MeasurementSet::default();
    if text.trim().is_empty() {
        return Ok(set);
    }
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| CliError::Config(e.to_string()))?;
    if header.iter().ne(MEASUREMENT_HEADER) {
        return Err(CliError::Config(format!(
            "expected header {}, found {}",
            MEASUREMENT_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::Config(e.to_string()))?;
        let field = |i: usize| -> Result<f64, CliError> {
            record[i]
                .parse()
                .map_err(|_| CliError::Config(format!("row {}: cannot parse {:?}", line + 1, &record[i])))
        };
        set.push(Point::new(field(0)?, field(1)?), field(2)?)
            .map_err(|e| CliError::Config(format!("row {}: {e}", line + 1)))?;
    }
    Ok(set)
}
