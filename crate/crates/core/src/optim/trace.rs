use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What produced a trace row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    /// NCG iterate gradient.
    Ncg,
    /// Newton outer gradient on new samples.
    Newton,
    /// Inner CG residual.
    Cg,
    /// Fresh-sample convergence check.
    Check,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Ncg => "ncg",
            Phase::Newton => "newton",
            Phase::Cg => "cg",
            Phase::Check => "check",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [Phase::Ncg, Phase::Newton, Phase::Cg, Phase::Check]
            .into_iter()
            .find(|p| p.name() == s)
    }
}

/// One row of the optimizer trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// NCG iteration `k` or global CG iteration `i`.
    pub k_or_i: usize,
    pub phase: Phase,
    /// `|g|` or `|r|` in the return-level norm.
    pub norm: f64,
    /// RMSE in force.
    pub epsilon: f64,
    /// New samples were drawn for this row.
    pub refreshed: bool,
    pub counts: Vec<usize>,
    pub wall_s: f64,
}

/// Sample table row written each time new samples are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefreshRow {
    pub k_or_i: usize,
    pub phase: Phase,
    pub epsilon: f64,
    pub counts: Vec<usize>,
    pub rho: Option<f64>,
    /// Wall time of the gradient evaluation with these samples.
    pub wall_s: f64,
    /// Solver-DOF cost of that evaluation.
    pub dof_cost: f64,
}

fn level_columns(rows: impl Iterator<Item = usize>) -> usize {
    rows.max().unwrap_or(1).max(1)
}

/// Writes the trace with columns
/// `k_or_i,phase,grad_or_res_norm,epsilon,refreshed,n0..nL,wall_s`.
pub fn write_trace_csv<W: Write>(records: &[IterationRecord], writer: W) -> Result<()> {
    let levels = level_columns(records.iter().map(|r| r.counts.len()));
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = ["k_or_i", "phase", "grad_or_res_norm", "epsilon", "refreshed"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..levels).map(|l| format!("n{l}")));
    header.push("wall_s".into());
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.k_or_i.to_string(),
            r.phase.name().to_string(),
            r.norm.to_string(),
            r.epsilon.to_string(),
            r.refreshed.to_string(),
        ];
        row.extend((0..levels).map(|l| r.counts.get(l).map(|n| n.to_string()).unwrap_or_default()));
        row.push(r.wall_s.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_csv<R: Read>(reader: R) -> Result<Vec<IterationRecord>> {
    let bad = |reason: String| Error::Format { what: "trace csv", reason };
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers()?.clone();
    let width = header.len();
    if width < 7 || &header[0] != "k_or_i" || &header[width - 1] != "wall_s" {
        return Err(bad("unexpected header".into()));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| rec[i].parse::<f64>().map_err(|e| bad(format!("column {i}: {e}")));
        let counts = (5..width - 1)
            .filter(|&i| !rec[i].is_empty())
            .map(|i| rec[i].parse::<usize>().map_err(|e| bad(format!("column {i}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        out.push(IterationRecord {
            k_or_i: rec[0].parse().map_err(|e| bad(format!("k_or_i: {e}")))?,
            phase: Phase::parse(&rec[1]).ok_or_else(|| bad(format!("phase `{}`", &rec[1])))?,
            norm: f(2)?,
            epsilon: f(3)?,
            refreshed: rec[4].parse().map_err(|e| bad(format!("refreshed: {e}")))?,
            counts,
            wall_s: f(width - 1)?,
        });
    }
    Ok(out)
}

/// Writes the per-refresh sample table with columns
/// `k_or_i,phase,epsilon,n0..nL,rho,wall_s,dof_cost`.
pub fn write_refresh_csv<W: Write>(rows: &[RefreshRow], writer: W) -> Result<()> {
    let levels = level_columns(rows.iter().map(|r| r.counts.len()));
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = vec!["k_or_i".into(), "phase".into(), "epsilon".into()];
    header.extend((0..levels).map(|l| format!("n{l}")));
    header.extend(["rho", "wall_s", "dof_cost"].iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for r in rows {
        let mut row = vec![r.k_or_i.to_string(), r.phase.name().to_string(), r.epsilon.to_string()];
        row.extend((0..levels).map(|l| r.counts.get(l).map(|n| n.to_string()).unwrap_or_default()));
        row.push(r.rho.map(|x| x.to_string()).unwrap_or_default());
        row.push(r.wall_s.to_string());
        row.push(r.dof_cost.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_round_trip_with_ragged_counts() {
        let recs = vec![
            IterationRecord {
                k_or_i: 0,
                phase: Phase::Ncg,
                norm: 0.0411,
                epsilon: 1e-2,
                refreshed: true,
                counts: vec![140, 76, 44],
                wall_s: 0.0,
            },
            IterationRecord {
                k_or_i: 1,
                phase: Phase::Check,
                norm: 3.2e-4,
                epsilon: 2.24e-4,
                refreshed: true,
                counts: vec![17150, 1512, 80, 28],
                wall_s: 1.5,
            },
        ];
        let mut buf = Vec::new();
        write_trace_csv(&recs, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "k_or_i,phase,grad_or_res_norm,epsilon,refreshed,n0,n1,n2,n3,wall_s"
        );
        assert_eq!(read_trace_csv(&buf[..]).unwrap(), recs);
    }

    #[test]
    fn empty_trace_has_header() {
        let mut buf = Vec::new();
        write_trace_csv(&[], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.trim_end(), "k_or_i,phase,grad_or_res_norm,epsilon,refreshed,n0,wall_s");
        let mut buf = Vec::new();
        write_refresh_csv(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1);
    }
}
