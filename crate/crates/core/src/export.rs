//! CSV exports. Floats are written in shortest round-trip form.

use std::io::Write;

use crate::error::{Error, Result};
use crate::harness::{EvalRow, ExperimentResult, SurfacePoint};

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

/// `episode, run_<i>..., mean, ci_halfwidth`.
pub fn write_learning_curve<W: Write>(w: W, result: &ExperimentResult) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["episode".to_string()];
    header.extend(result.runs.iter().map(|r| format!("run_{}", r.run)));
    header.push("mean".into());
    header.push("ci_halfwidth".into());
    out.write_record(&header).map_err(csv_err)?;
    for (e, (mean, hw)) in result.mean.iter().zip(&result.half_width).enumerate() {
        let mut row = vec![e.to_string()];
        row.extend(result.runs.iter().map(|r| num(r.curve[e])));
        row.push(num(*mean));
        row.push(num(*hw));
        out.write_record(&row).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// `k, x, y, u, in_region` (two state coordinates, one input).
pub fn write_trajectory<W: Write>(w: W, rows: &[EvalRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["k", "x", "y", "u", "in_region"]).map_err(csv_err)?;
    for r in rows {
        out.write_record([
            r.k.to_string(),
            num(r.x[0]),
            num(r.x[1]),
            num(r.u[0]),
            u8::from(r.in_region).to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// `s_x, s_y, u`.
pub fn write_surface<W: Write>(w: W, points: &[SurfacePoint]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["s_x", "s_y", "u"]).map_err(csv_err)?;
    for p in points {
        out.write_record([num(p.s[0]), num(p.s[1]), num(p.u[0])])
            .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}
