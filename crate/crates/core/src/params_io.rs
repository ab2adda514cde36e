//! TOML persistence for [`ModelParams`].
//!
//! Floats are written with 17 significant digits so that a save/load cycle
//! reproduces every bit.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::model::ModelParams;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsFile {
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "V")]
    v: usize,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    #[serde(rename = "G")]
    g: Vec<Vec<f64>>,
    p0: Vec<f64>,
    #[serde(rename = "R")]
    r: Vec<Vec<f64>>,
    a: f64,
    d: f64,
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_vec(out: &mut String, key: &str, xs: impl IntoIterator<Item = f64>) {
    let items: Vec<String> = xs.into_iter().map(fmt_f64).collect();
    let _ = writeln!(out, "{key} = [{}]", items.join(", "));
}

fn write_matrix(out: &mut String, key: &str, m: &Array2<f64>) {
    let _ = writeln!(out, "{key} = [");
    for row in m.outer_iter() {
        let items: Vec<String> = row.iter().copied().map(fmt_f64).collect();
        let _ = writeln!(out, "  [{}],", items.join(", "));
    }
    let _ = writeln!(out, "]");
}

pub fn to_toml_string(params: &ModelParams) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "K = {}", params.k());
    let _ = writeln!(out, "V = {}", params.v());
    let _ = writeln!(out, "a = {}", fmt_f64(params.a));
    let _ = writeln!(out, "d = {}", fmt_f64(params.d));
    write_vec(&mut out, "p0", params.p0.iter().copied());
    write_matrix(&mut out, "B", &params.b);
    write_matrix(&mut out, "G", &params.g);
    write_matrix(&mut out, "R", &params.r);
    out
}

fn to_matrix(name: &'static str, rows: Vec<Vec<f64>>, nrows: usize, ncols: usize) -> Result<Array2<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::DimensionMismatch {
            field: name,
            detail: format!("expected {nrows}x{ncols}"),
        });
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(Array2::from_shape_vec((nrows, ncols), flat).expect("shape checked"))
}

pub fn from_toml_str(text: &str) -> Result<ModelParams> {
    let file: ParamsFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    let b = to_matrix("B", file.b, file.k, file.v)?;
    let g = to_matrix("G", file.g, file.k, file.k)?;
    let r = to_matrix("R", file.r, file.k, file.k)?;
    ModelParams::new(b, g, Array1::from(file.p0), r, file.a, file.d)
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, to_toml_string(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_toml_str(&text)
}
