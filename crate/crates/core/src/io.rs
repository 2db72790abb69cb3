//! CSV and JSON artifacts.
//!
//! Floats are written with Rust's shortest round-trip formatting, so equal
//! runs produce byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path as FsPath, PathBuf};

use serde::Serialize;

use crate::error::Result;
use crate::grid::GridField;
use crate::moments::{Cov, Path};
use crate::sde::{EnsembleStats, TrajectoryRecord};
use crate::stability::StabilityCell;

/// A cell of a CSV row.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Text(String),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

fn push_cell(out: &mut String, c: &Cell) {
    match c {
        Cell::Num(v) if v.is_nan() => out.push_str("nan"),
        Cell::Num(v) if v.is_infinite() => out.push_str(if *v > 0.0 { "inf" } else { "-inf" }),
        Cell::Num(v) => {
            let _ = write!(out, "{v}");
        }
        Cell::Text(s) => out.push_str(s),
    }
}

/// Render a header and rows as CSV text.
pub fn csv_string<R, I>(header: &[&str], rows: R) -> String
where
    R: IntoIterator<Item = I>,
    I: IntoIterator<Item = Cell>,
{
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        for (i, c) in row.into_iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            push_cell(&mut out, &c);
        }
        out.push('\n');
    }
    out
}

pub fn write_csv<R, I>(path: &FsPath, header: &[&str], rows: R) -> Result<()>
where
    R: IntoIterator<Item = I>,
    I: IntoIterator<Item = Cell>,
{
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, csv_string(header, rows))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &FsPath, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn nums<const N: usize>(v: [f64; N]) -> Vec<Cell> {
    v.into_iter().map(Cell::Num).collect()
}

/// `t,x,p`
pub fn write_means(path: &FsPath, means: &Path<2>) -> Result<()> {
    write_csv(
        path,
        &["t", "x", "p"],
        means
            .times
            .iter()
            .zip(&means.states)
            .map(|(t, s)| nums([*t, s[0], s[1]])),
    )
}

/// `t,vx,vp,c`
pub fn write_covariances(path: &FsPath, times: &[f64], covs: &[Cov]) -> Result<()> {
    write_csv(
        path,
        &["t", "vx", "vp", "c"],
        times
            .iter()
            .zip(covs)
            .map(|(t, c)| nums([*t, c.vx, c.vp, c.c])),
    )
}

/// `t,xc,pc,dI` plus a JSON sidecar with the seed and stream id.
pub fn write_trajectory(path: &FsPath, rec: &TrajectoryRecord) -> Result<()> {
    write_csv(
        path,
        &["t", "xc", "pc", "dI"],
        (0..rec.times.len()).map(|i| nums([rec.times[i], rec.xc[i], rec.pc[i], rec.d_i[i]])),
    )?;
    #[derive(Serialize)]
    struct Sidecar {
        seed: u64,
        stream_id: u64,
        samples: usize,
    }
    write_json(
        &sidecar(path),
        &Sidecar {
            seed: rec.seed,
            stream_id: rec.stream_id,
            samples: rec.times.len(),
        },
    )
}

/// `t,mean_x,sem_x,mean_p,sem_p,var_x,var_p`
pub fn write_ensemble(path: &FsPath, s: &EnsembleStats) -> Result<()> {
    write_csv(
        path,
        &["t", "mean_x", "sem_x", "mean_p", "sem_p", "var_x", "var_p"],
        (0..s.times.len()).map(|i| {
            nums([
                s.times[i],
                s.mean_x[i],
                s.sem_x[i],
                s.mean_p[i],
                s.sem_p[i],
                s.var_x[i],
                s.var_p[i],
            ])
        }),
    )
}

/// `x,p,w` over cell centres plus a JSON sidecar with the grid geometry.
pub fn write_field(path: &FsPath, field: &GridField, time: f64) -> Result<()> {
    let spec = field.spec;
    write_csv(
        path,
        &["x", "p", "w"],
        (0..spec.np)
            .flat_map(|ip| (0..spec.nx).map(move |ix| (ix, ip)))
            .map(|(ix, ip)| nums([spec.x(ix), spec.p(ip), field.at(ix, ip)])),
    )?;
    #[derive(Serialize)]
    struct Sidecar {
        time: f64,
        nx: usize,
        np: usize,
        x_min: f64,
        x_max: f64,
        p_min: f64,
        p_max: f64,
        hx: f64,
        hp: f64,
        kind: String,
    }
    write_json(
        &sidecar(path),
        &Sidecar {
            time,
            nx: spec.nx,
            np: spec.np,
            x_min: spec.x_min,
            x_max: spec.x_max,
            p_min: spec.p_min,
            p_max: spec.p_max,
            hx: spec.hx(),
            hp: spec.hp(),
            kind: format!("{:?}", field.kind).to_lowercase(),
        },
    )
}

/// `k,tau,re_lambda,classification`
pub fn write_chart(path: &FsPath, cells: &[StabilityCell]) -> Result<()> {
    write_csv(
        path,
        &["k", "tau", "re_lambda", "classification"],
        cells.iter().map(|c| {
            vec![
                Cell::Num(c.k),
                Cell::Num(c.tau),
                Cell::Num(c.re_lambda),
                Cell::from(c.simulated.as_str()),
            ]
        }),
    )
}

/// `t,m_c,V_c`
pub fn write_conditional_1d(path: &FsPath, times: &[f64], m: &[f64], v: &[f64]) -> Result<()> {
    write_csv(
        path,
        &["t", "m_c", "V_c"],
        (0..times.len()).map(|i| nums([times[i], m[i], v[i]])),
    )
}

/// `t,x_star`
pub fn write_reference(path: &FsPath, times: &[f64], x_star: &[f64]) -> Result<()> {
    write_csv(
        path,
        &["t", "x_star"],
        times.iter().zip(x_star).map(|(t, x)| nums([*t, *x])),
    )
}

/// `t,x,p,x_asym,p_asym`
pub fn write_tracking(
    path: &FsPath,
    means: &Path<2>,
    asymptote: impl Fn(f64) -> [f64; 2],
) -> Result<()> {
    write_csv(
        path,
        &["t", "x", "p", "x_asym", "p_asym"],
        means.times.iter().zip(&means.states).map(|(t, s)| {
            let a = asymptote(*t);
            nums([*t, s[0], s[1], a[0], a[1]])
        }),
    )
}

fn sidecar(path: &FsPath) -> PathBuf {
    path.with_extension("json")
}
