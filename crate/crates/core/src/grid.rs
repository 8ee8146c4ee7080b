//! Cell-centered grid hierarchy, level inner products and inter-level transfer.
//!
//! Level `l` has `m_l = m0 * 2^l` cells per axis on the unit square (or unit
//! interval for `d = 1`). Values are stored lexicographically with `x1`
//! varying fastest. Prolongation is piecewise (multi)linear interpolation of
//! cell-center values; restriction is `2^-d` times its transpose, so that
//! `(P v, w)_{l+1} = (v, R w)_l` holds exactly for the scaled inner product
//! `(a, b)_l = a.b / m_l^d`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// How interpolation treats the half cell between the outermost coarse
/// center and the domain boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryExtension {
    /// Copy the nearest coarse value; constants are reproduced exactly.
    #[default]
    Constant,
    /// Interpolate towards a zero boundary value (homogeneous Dirichlet).
    ZeroDirichlet,
}

impl BoundaryExtension {
    fn ghost_sign(self) -> f64 {
        match self {
            BoundaryExtension::Constant => 1.0,
            BoundaryExtension::ZeroDirichlet => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridHierarchy {
    /// Cells per axis on level 0.
    pub m0: usize,
    /// Return level `L̄`; all estimates are reported on this grid.
    pub max_level: usize,
    pub dim: usize,
    #[serde(default)]
    pub boundary: BoundaryExtension,
}

impl GridHierarchy {
    pub fn new(m0: usize, max_level: usize, dim: usize) -> Result<Self> {
        Self::with_boundary(m0, max_level, dim, BoundaryExtension::default())
    }

    pub fn with_boundary(
        m0: usize,
        max_level: usize,
        dim: usize,
        boundary: BoundaryExtension,
    ) -> Result<Self> {
        let h = GridHierarchy {
            m0,
            max_level,
            dim,
            boundary,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m0 < 2 {
            return Err(invalid("m0", format!("must be at least 2, got {}", self.m0)));
        }
        if !(1..=2).contains(&self.dim) {
            return Err(invalid("dim", format!("must be 1 or 2, got {}", self.dim)));
        }
        if self.max_level > 12 {
            return Err(invalid("max_level", "hierarchies deeper than 12 levels are not supported"));
        }
        Ok(())
    }

    /// Transfer constant `c = 2^d`.
    pub fn transfer_constant(&self) -> f64 {
        (1usize << self.dim) as f64
    }

    /// Cells per axis on `level`.
    pub fn cells_per_axis(&self, level: usize) -> usize {
        self.m0 << level
    }

    /// Total number of cells `m_l^d` on `level`.
    pub fn len(&self, level: usize) -> usize {
        self.cells_per_axis(level).pow(self.dim as u32)
    }

    pub fn mesh_width(&self, level: usize) -> f64 {
        1.0 / self.cells_per_axis(level) as f64
    }

    pub fn check_level(&self, level: usize) -> Result<()> {
        if level > self.max_level {
            return Err(Error::LevelOutOfRange {
                level,
                max: self.max_level,
            });
        }
        Ok(())
    }

    /// Coordinates of the center of cell `index` on `level`; unused axes are 0.
    pub fn cell_center(&self, level: usize, index: usize) -> [f64; 2] {
        let m = self.cells_per_axis(level);
        let h = 1.0 / m as f64;
        let i = index % m;
        let j = if self.dim == 2 { index / m } else { 0 };
        let x2 = if self.dim == 2 { (j as f64 + 0.5) * h } else { 0.0 };
        [(i as f64 + 0.5) * h, x2]
    }

    pub fn zeros(&self, level: usize) -> GridFunction {
        GridFunction::new(level, vec![0.0; self.len(level)])
    }

    pub fn constant(&self, level: usize, value: f64) -> GridFunction {
        GridFunction::new(level, vec![value; self.len(level)])
    }

    /// Samples `f` at the cell centers of `level`.
    pub fn sample_fn(&self, level: usize, f: impl Fn([f64; 2]) -> f64) -> GridFunction {
        let values = (0..self.len(level))
            .map(|idx| f(self.cell_center(level, idx)))
            .collect();
        GridFunction::new(level, values)
    }

    fn check_function(&self, v: &GridFunction) -> Result<()> {
        self.check_level(v.level)?;
        if v.values.len() != self.len(v.level) {
            return Err(invalid(
                "grid function",
                format!(
                    "length {} does not match level {} ({} cells)",
                    v.values.len(),
                    v.level,
                    self.len(v.level)
                ),
            ));
        }
        Ok(())
    }

    /// Interpolates `v` from level `l` to `l + 1`.
    pub fn prolong(&self, v: &GridFunction) -> Result<GridFunction> {
        self.check_function(v)?;
        let target = v.level + 1;
        self.check_level(target)?;
        let m = self.cells_per_axis(v.level);
        let s = self.boundary.ghost_sign();
        let values = match self.dim {
            1 => prolong_1d(&v.values, s),
            _ => {
                // rows (x1) first, then columns (x2)
                let mut rows = vec![0.0; 2 * m * m];
                for j in 0..m {
                    let out = prolong_1d(&v.values[j * m..(j + 1) * m], s);
                    rows[j * 2 * m..(j + 1) * 2 * m].copy_from_slice(&out);
                }
                let mut fine = vec![0.0; 4 * m * m];
                let mut col = vec![0.0; m];
                for i in 0..2 * m {
                    for j in 0..m {
                        col[j] = rows[i + 2 * m * j];
                    }
                    let out = prolong_1d(&col, s);
                    for (jj, val) in out.into_iter().enumerate() {
                        fine[i + 2 * m * jj] = val;
                    }
                }
                fine
            }
        };
        Ok(GridFunction::new(target, values))
    }

    /// Scaled transpose of [`prolong`](Self::prolong): level `l` to `l - 1`.
    pub fn restrict(&self, v: &GridFunction) -> Result<GridFunction> {
        self.check_function(v)?;
        if v.level == 0 {
            return Err(invalid("level", "cannot restrict below level 0"));
        }
        let mf = self.cells_per_axis(v.level);
        let mc = mf / 2;
        let s = self.boundary.ghost_sign();
        let values = match self.dim {
            1 => restrict_1d(&v.values, s),
            _ => {
                let mut rows = vec![0.0; mc * mf];
                for j in 0..mf {
                    let out = restrict_1d(&v.values[j * mf..(j + 1) * mf], s);
                    rows[j * mc..(j + 1) * mc].copy_from_slice(&out);
                }
                let mut coarse = vec![0.0; mc * mc];
                let mut col = vec![0.0; mf];
                for i in 0..mc {
                    for j in 0..mf {
                        col[j] = rows[i + mc * j];
                    }
                    let out = restrict_1d(&col, s);
                    for (jj, val) in out.into_iter().enumerate() {
                        coarse[i + mc * jj] = val;
                    }
                }
                coarse
            }
        };
        Ok(GridFunction::new(v.level - 1, values))
    }

    /// Chained prolongation/restriction from `v.level` to `target`.
    pub fn transfer(&self, v: &GridFunction, target: usize) -> Result<GridFunction> {
        self.check_function(v)?;
        self.check_level(target)?;
        let mut out = v.clone();
        while out.level < target {
            out = self.prolong(&out)?;
        }
        while out.level > target {
            out = self.restrict(&out)?;
        }
        Ok(out)
    }

    /// Writes `v` as CSV with columns `d,m0,level,index,value`.
    pub fn write_csv<W: Write>(&self, v: &GridFunction, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["d", "m0", "level", "index", "value"])?;
        for (i, x) in v.values.iter().enumerate() {
            w.write_record([
                self.dim.to_string(),
                self.m0.to_string(),
                v.level.to_string(),
                i.to_string(),
                format!("{x:e}"),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a grid function written by [`write_csv`](Self::write_csv) and
    /// checks that its header matches this hierarchy.
    pub fn read_csv<R: Read>(&self, reader: R) -> Result<GridFunction> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["d", "m0", "level", "index", "value"] {
            return Err(Error::Format {
                what: "grid function csv",
                reason: format!("unexpected header {headers:?}"),
            });
        }
        let mut level = None;
        let mut values = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let parse = |k: usize| -> Result<f64> {
                rec[k].trim().parse::<f64>().map_err(|e| Error::Format {
                    what: "grid function csv",
                    reason: format!("field {k}: {e}"),
                })
            };
            let (d, m0, l, idx) = (parse(0)?, parse(1)?, parse(2)? as usize, parse(3)? as usize);
            if d as usize != self.dim || m0 as usize != self.m0 {
                return Err(Error::Format {
                    what: "grid function csv",
                    reason: format!("header (d={d}, m0={m0}) does not match the hierarchy"),
                });
            }
            if *level.get_or_insert(l) != l || idx != values.len() {
                return Err(Error::Format {
                    what: "grid function csv",
                    reason: format!("row {} out of order", values.len()),
                });
            }
            values.push(parse(4)?);
        }
        let level = level.ok_or(Error::Format {
            what: "grid function csv",
            reason: "no rows".into(),
        })?;
        let v = GridFunction::new(level, values);
        self.check_function(&v)?;
        Ok(v)
    }

    /// Binary layout: `b"GRDF"`, then `d`, `m0`, `level` as little-endian
    /// `u32`, then `m_l^d` little-endian `f64` values.
    pub fn write_binary<W: Write>(&self, v: &GridFunction, mut writer: W) -> Result<()> {
        writer.write_all(b"GRDF")?;
        for x in [self.dim, self.m0, v.level] {
            writer.write_all(&(x as u32).to_le_bytes())?;
        }
        for x in &v.values {
            writer.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(&self, mut reader: R) -> Result<GridFunction> {
        let mut magic = [0u8; 4];
        reader.read_exact(&mut magic)?;
        if &magic != b"GRDF" {
            return Err(Error::Format {
                what: "grid function binary",
                reason: "bad magic".into(),
            });
        }
        let mut word = [0u8; 4];
        let mut header = [0usize; 3];
        for h in header.iter_mut() {
            reader.read_exact(&mut word)?;
            *h = u32::from_le_bytes(word) as usize;
        }
        let [d, m0, level] = header;
        if d != self.dim || m0 != self.m0 {
            return Err(Error::Format {
                what: "grid function binary",
                reason: format!("header (d={d}, m0={m0}) does not match the hierarchy"),
            });
        }
        self.check_level(level)?;
        let mut values = vec![0.0; self.len(level)];
        let mut buf = [0u8; 8];
        for x in values.iter_mut() {
            reader.read_exact(&mut buf)?;
            *x = f64::from_le_bytes(buf);
        }
        Ok(GridFunction::new(level, values))
    }
}

fn prolong_1d(c: &[f64], ghost: f64) -> Vec<f64> {
    let m = c.len();
    let mut f = vec![0.0; 2 * m];
    for i in 0..m {
        let left = if i == 0 { ghost * c[0] } else { c[i - 1] };
        let right = if i + 1 == m { ghost * c[m - 1] } else { c[i + 1] };
        f[2 * i] = 0.75 * c[i] + 0.25 * left;
        f[2 * i + 1] = 0.75 * c[i] + 0.25 * right;
    }
    f
}

fn restrict_1d(f: &[f64], ghost: f64) -> Vec<f64> {
    let m = f.len() / 2;
    let mut c = vec![0.0; m];
    for i in 0..m {
        let mut acc = 0.75 * (f[2 * i] + f[2 * i + 1]);
        acc += if i == 0 { 0.25 * ghost * f[0] } else { 0.25 * f[2 * i - 1] };
        acc += if i + 1 == m {
            0.25 * ghost * f[2 * m - 1]
        } else {
            0.25 * f[2 * i + 2]
        };
        c[i] = 0.5 * acc;
    }
    c
}

/// Cell-center values on one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    pub level: usize,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn new(level: usize, values: Vec<f64>) -> Self {
        GridFunction { level, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn check_same(&self, other: &GridFunction) -> Result<()> {
        if self.level != other.level || self.values.len() != other.values.len() {
            return Err(Error::LevelMismatch {
                left: self.level,
                right: other.level,
            });
        }
        Ok(())
    }

    /// `(a, b)_l = sum(a_i b_i) / m_l^d`.
    pub fn inner_product(&self, other: &GridFunction) -> Result<f64> {
        self.check_same(other)?;
        Ok(dot(&self.values, &other.values) / self.values.len() as f64)
    }

    pub fn norm(&self) -> f64 {
        (dot(&self.values, &self.values) / self.values.len() as f64).sqrt()
    }

    pub fn inf_norm(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |a, x| a.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }

    pub fn scaled(&self, a: f64) -> GridFunction {
        GridFunction::new(self.level, self.values.iter().map(|x| a * x).collect())
    }

    /// `self + a * other`.
    pub fn axpy(&self, a: f64, other: &GridFunction) -> Result<GridFunction> {
        self.check_same(other)?;
        Ok(GridFunction::new(
            self.level,
            self.values
                .iter()
                .zip(&other.values)
                .map(|(x, y)| x + a * y)
                .collect(),
        ))
    }

    pub fn add_assign(&mut self, other: &GridFunction) -> Result<()> {
        self.check_same(other)?;
        for (x, y) in self.values.iter_mut().zip(&other.values) {
            *x += y;
        }
        Ok(())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
