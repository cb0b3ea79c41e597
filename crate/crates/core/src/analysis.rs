//! Attention extraction, column normalisation and heat-map export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{s, Array2};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::paradigm::{ArrangedSequence, Role};
use crate::scalar::Scalar;

pub const DEFAULT_GAMMA: f64 = 0.5;

/// One head's post-softmax attention with the role of every query and key.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub layer: usize,
    pub head: usize,
    /// `(query, key)`.
    pub matrix: Array2<f64>,
    pub row_roles: Vec<Role>,
    pub col_roles: Vec<Role>,
}

/// Attention of `(layer, head)` over `arr`, rows and columns in storage order.
pub fn attention_map<T: Scalar>(
    model: &Model<T>,
    arr: &ArrangedSequence,
    layer: usize,
    head: usize,
) -> Result<AttentionMap> {
    if layer >= model.config.layers || head >= model.config.heads {
        return Err(Error::contract(format!(
            "no head {head} in layer {layer} (model has {} layers of {} heads)",
            model.config.layers, model.config.heads
        )));
    }
    let out = model.forward(arr, true)?;
    let att = out.attention.expect("attention captured");
    let matrix = att[layer].heads[head].mapv(|x| x.f64());
    Ok(AttentionMap {
        layer,
        head,
        matrix,
        row_roles: arr.roles.clone(),
        col_roles: arr.roles.clone(),
    })
}

/// Rows for target queries, columns for source keys, both in role order.
pub fn target_to_source(map: &Array2<f64>, arr: &ArrangedSequence) -> Array2<f64> {
    Array2::from_shape_fn((arr.target_len(), arr.source_len()), |(j, i)| {
        map[[arr.target_row(j), arr.source_row(i)]]
    })
}

/// `(A - min) / (max - min)` per column; a constant column maps to zeros.
pub fn normalize_columns(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut col in out.columns_mut() {
        let min = col.iter().copied().fold(f64::INFINITY, f64::min);
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = max - min;
        if span > 0.0 {
            col.mapv_inplace(|v| (v - min) / span);
        } else {
            col.fill(0.0);
        }
    }
    out
}

/// Entrywise `a^gamma`.
pub fn gamma_transform(a: &Array2<f64>, gamma: f64) -> Result<Array2<f64>> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::contract(format!(
            "gamma must be positive and finite, got {gamma}"
        )));
    }
    Ok(a.mapv(|v| v.powf(gamma)))
}

/// Drops key column 0, where the attention sink sits.
pub fn sink_strip(a: &Array2<f64>) -> Result<Array2<f64>> {
    if a.ncols() < 2 {
        return Err(Error::contract(
            "sink stripping needs at least two key columns",
        ));
    }
    Ok(a.slice(s![.., 1..]).to_owned())
}

/// Share of the total mass that lies within `band` of the main diagonal,
/// `|row - col| <= band`.
pub fn band_mass_fraction(a: &Array2<f64>, band: usize) -> f64 {
    let mut inside = 0.0;
    let mut total = 0.0;
    for ((r, c), &v) in a.indexed_iter() {
        total += v;
        if r.abs_diff(c) <= band {
            inside += v;
        }
    }
    if total > 0.0 {
        inside / total
    } else {
        0.0
    }
}

/// Mean over arrangements, layers and heads of the band mass of the
/// column-normalised target-to-source attention.
pub fn mean_band_mass<T: Scalar>(
    model: &Model<T>,
    arrangements: &[ArrangedSequence],
    band: usize,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for arr in arrangements {
        let out = model.forward(arr, true)?;
        for layer in out.attention.expect("attention captured") {
            for head in layer.heads {
                let full = head.mapv(|x| x.f64());
                let sub = normalize_columns(&target_to_source(&full, arr));
                sum += band_mass_fraction(&sub, band);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::contract("no attention maps to average"));
    }
    Ok(sum / count as f64)
}

/// Six significant digits without trailing zeros.
pub fn format_value(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v.is_finite() {
            "0".into()
        } else {
            v.to_string()
        };
    }
    let mag = v.abs().log10().floor() as i32;
    let trim = |s: String| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if !(-5..15).contains(&mag) {
        let text = format!("{v:.5e}");
        let (mantissa, exp) = text.split_once('e').expect("exponent");
        return format!("{}e{exp}", trim(mantissa.to_string()));
    }
    let decimals = (5 - mag).max(0) as usize;
    trim(format!("{v:.decimals$}"))
}

/// A header row of key indices, then one row of values per query.
pub fn to_csv(a: &Array2<f64>) -> String {
    let mut out = String::new();
    let header: Vec<String> = (0..a.ncols()).map(|c| c.to_string()).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in a.rows() {
        let cells: Vec<String> = row.iter().map(|&v| format_value(v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Array2<f64>> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "missing header".into(),
    })?;
    let cols = header.split(',').count();
    let mut values = Vec::new();
    let mut rows = 0;
    for (i, line) in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != cols {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected {cols} cells, found {}", cells.len()),
            });
        }
        for cell in cells {
            values.push(cell.trim().parse::<f64>().map_err(|e| Error::Parse {
                line: i + 1,
                message: format!("'{cell}': {e}"),
            })?);
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::contract(e.to_string()))
}

fn role_letter(role: Role) -> &'static str {
    match role {
        Role::Source => "S",
        Role::Target => "T",
    }
}

/// A grey-scale grid, dark for high values, with role labels on both axes.
pub fn to_svg(a: &Array2<f64>, row_roles: &[Role], col_roles: &[Role]) -> String {
    const CELL: usize = 12;
    const MARGIN: usize = 20;
    let (rows, cols) = a.dim();
    let (w, h) = (MARGIN + cols * CELL, MARGIN + rows * CELL);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    for (c, &role) in col_roles.iter().enumerate().take(cols) {
        let x = MARGIN + c * CELL + CELL / 2;
        let _ = writeln!(
            out,
            r#"<text x="{x}" y="{}" font-size="9" text-anchor="middle">{}</text>"#,
            MARGIN - 6,
            role_letter(role)
        );
    }
    for (r, &role) in row_roles.iter().enumerate().take(rows) {
        let y = MARGIN + r * CELL + CELL - 3;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{y}" font-size="9" text-anchor="middle">{}</text>"#,
            MARGIN / 2,
            role_letter(role)
        );
    }
    for ((r, c), &v) in a.indexed_iter() {
        let shade = (255.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8;
        let _ = writeln!(
            out,
            r#"<rect x="{}" y="{}" width="{CELL}" height="{CELL}" fill="rgb({shade},{shade},{shade})"/>"#,
            MARGIN + c * CELL,
            MARGIN + r * CELL
        );
    }
    out.push_str("</svg>\n");
    out
}

pub fn write_csv(path: &Path, a: &Array2<f64>) -> Result<()> {
    fs::write(path, to_csv(a)).map_err(|e| Error::io(path, e))
}

pub fn write_svg(
    path: &Path,
    a: &Array2<f64>,
    row_roles: &[Role],
    col_roles: &[Role],
) -> Result<()> {
    fs::write(path, to_svg(a, row_roles, col_roles)).map_err(|e| Error::io(path, e))
}
