use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::grid::{GridFunction, GridHierarchy};

use super::run::ResultBundle;

/// Values along the horizontal mid-line `x2 = 1/2` (the whole grid in 1D),
/// averaging the two rows of cells next to it.
pub fn mid_cross_section(h: &GridHierarchy, v: &GridFunction) -> Vec<(f64, f64)> {
    let m = h.cells_per_axis(v.level);
    let hw = 1.0 / m as f64;
    (0..m)
        .map(|i| {
            let x = (i as f64 + 0.5) * hw;
            let y = if h.dim == 1 {
                v.values[i]
            } else {
                0.5 * (v.values[i + m * (m / 2 - 1)] + v.values[i + m * (m / 2)])
            };
            (x, y)
        })
        .collect()
}

fn writer(dir: &Path, name: &str) -> Result<(csv::Writer<BufWriter<File>>, PathBuf)> {
    let path = dir.join(name);
    Ok((csv::Writer::from_writer(BufWriter::new(File::create(&path)?)), path))
}

/// Writes plot-ready CSVs for every method in `bundle`: convergence curves,
/// mid-line cross sections of the level contributions of the final
/// gradient, and per-level variance evolution. Returns the files written.
pub fn emit_plots(bundle: &ResultBundle, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let h = bundle.hierarchy()?;
    let mut files = Vec::new();
    for run in &bundle.runs {
        let m = run.method.name();

        let (mut w, p) = writer(dir, &format!("plot_convergence_{m}.csv"))?;
        w.write_record(["k_or_i", "phase", "norm", "epsilon", "refreshed"])?;
        for r in &run.trace {
            w.write_record([
                r.k_or_i.to_string(),
                r.phase.name().to_string(),
                r.norm.to_string(),
                r.epsilon.to_string(),
                r.refreshed.to_string(),
            ])?;
        }
        w.flush()?;
        files.push(p);

        let g = &run.final_gradient;
        let (mut w, p) = writer(dir, &format!("plot_cross_section_{m}.csv"))?;
        let mut header = vec!["x".to_string()];
        header.extend((0..g.contributions.len()).map(|l| format!("level{l}")));
        header.extend(["deterministic".to_string(), "total".to_string()]);
        w.write_record(&header)?;
        let cols: Vec<Vec<(f64, f64)>> = g
            .contributions
            .iter()
            .chain([&g.deterministic, &g.total])
            .map(|v| mid_cross_section(&h, v))
            .collect();
        let n = cols.first().map_or(0, Vec::len);
        for i in 0..n {
            let mut row = vec![cols[0][i].0.to_string()];
            row.extend(cols.iter().map(|c| c[i].1.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        files.push(p);

        let levels = run.variances.iter().map(|v| v.variances.len()).max().unwrap_or(1).max(1);
        let (mut w, p) = writer(dir, &format!("plot_variances_{m}.csv"))?;
        let mut header = vec!["k_or_i".to_string(), "phase".to_string()];
        header.extend((0..levels).map(|l| format!("v{l}")));
        w.write_record(&header)?;
        for v in &run.variances {
            let mut row = vec![v.k_or_i.to_string(), v.phase.name().to_string()];
            row.extend((0..levels).map(|l| v.variances.get(l).map(|x| x.to_string()).unwrap_or_default()));
            w.write_record(&row)?;
        }
        w.flush()?;
        files.push(p);
    }
    Ok(files)
}
