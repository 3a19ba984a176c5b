//! Merge maps (SVG) and per-patch Δ̂ / W_Δ heatmaps (binary PPM).
//!
//! Both renderers are pure functions of their inputs, so repeated runs give
//! byte-identical files.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merge::LayerTrace;
use crate::model::patch_of;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderKind {
    MergeMap,
    DeltaHeatmap,
    WdeltaHeatmap,
}

impl RenderKind {
    pub const ALL: [RenderKind; 3] = [Self::MergeMap, Self::DeltaHeatmap, Self::WdeltaHeatmap];

    pub fn tag(self) -> &'static str {
        match self {
            Self::MergeMap => "merge_map",
            Self::DeltaHeatmap => "delta_heatmap",
            Self::WdeltaHeatmap => "wdelta_heatmap",
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Self::MergeMap => "svg",
            _ => "ppm",
        }
    }
}

impl FromStr for RenderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.tag() == s)
            .ok_or_else(|| Error::UnknownTag {
                kind: "render kind",
                tag: s.to_string(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderSpec {
    pub grid_side: usize,
    /// Pixels per grid cell.
    pub cell: usize,
    pub palette_seed: u64,
    pub kind: RenderKind,
}

impl RenderSpec {
    pub fn new(grid_side: usize, kind: RenderKind) -> Self {
        Self {
            grid_side,
            cell: 16,
            palette_seed: 0,
            kind,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cell == 0 {
            return Err(Error::Config("cell size must be at least 1 px".into()));
        }
        if self.grid_side == 0 {
            return Err(Error::Config("empty grid".into()));
        }
        Ok(())
    }

    fn n_cells(&self) -> usize {
        self.grid_side * self.grid_side
    }
}

/// Merge traces of one sample, as written by `mame eval --trace`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFile {
    pub grid_side: usize,
    pub sample: usize,
    pub label: usize,
    pub predicted: usize,
    pub traces: Vec<LayerTrace>,
}

impl TraceFile {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(f)?)
    }
}

/// Original position of the class token in a trace, if it carries one.
fn cls_orig(trace: &LayerTrace) -> Option<usize> {
    trace
        .input_cls_pos
        .and_then(|p| trace.input_members.get(p))
        .and_then(|m| m.first().copied())
}

fn patch_index(orig: usize, cls: Option<usize>) -> Option<usize> {
    match cls {
        Some(c) => patch_of(orig, c),
        None => Some(orig),
    }
}

/// Group id per grid cell after `trace`, from its output partition.
pub fn patch_groups(trace: &LayerTrace, grid_side: usize) -> Result<Vec<usize>> {
    let n = grid_side * grid_side;
    let cls = cls_orig(trace);
    let mut group = vec![usize::MAX; n];
    for (g, members) in trace.output_members.iter().enumerate() {
        for &o in members {
            if let Some(p) = patch_index(o, cls) {
                if p >= n || group[p] != usize::MAX {
                    return Err(Error::Format(format!("trace partition does not tile a {grid_side}x{grid_side} grid")));
                }
                group[p] = g;
            }
        }
    }
    if group.contains(&usize::MAX) {
        return Err(Error::Format(format!("trace partition does not cover a {grid_side}x{grid_side} grid")));
    }
    Ok(group)
}

/// Scatters one value per input token onto the grid cells it absorbed.
pub fn per_patch(trace: &LayerTrace, values: &[f64], grid_side: usize) -> Result<Vec<f64>> {
    if values.len() != trace.input_members.len() {
        return Err(Error::Format(format!(
            "{} values for {} tokens",
            values.len(),
            trace.input_members.len()
        )));
    }
    let n = grid_side * grid_side;
    let cls = cls_orig(trace);
    let mut out = vec![f64::NAN; n];
    for (members, &v) in trace.input_members.iter().zip(values) {
        for &o in members {
            if let Some(p) = patch_index(o, cls) {
                if p >= n {
                    return Err(Error::Format(format!("token {o} outside the grid")));
                }
                out[p] = v;
            }
        }
    }
    if out.iter().any(|v| v.is_nan()) {
        return Err(Error::Format("trace does not cover the grid".into()));
    }
    Ok(out)
}

/// Δ̂ per grid cell at the input of `trace`.
pub fn delta_field(trace: &LayerTrace, grid_side: usize) -> Result<Vec<f64>> {
    per_patch(trace, &trace.delta_hat, grid_side)
}

/// Per-token informativeness weight `exp(-Δ̂/τ)` per grid cell.
pub fn wdelta_field(trace: &LayerTrace, grid_side: usize) -> Result<Vec<f64>> {
    let tau = trace.decision.tau;
    let w: Vec<f64> = trace.delta_hat.iter().map(|d| (-d / tau).exp()).collect();
    per_patch(trace, &w, grid_side)
}

fn palette(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset: f64 = rng.random();
    (0..n)
        .map(|i| {
            // golden-angle hue walk keeps neighbours apart
            let h = (offset + i as f64 * 0.618_033_988_75).fract();
            let (r, g, b) = hsv(h, 0.85, 0.9);
            format!("#{r:02x}{g:02x}{b:02x}")
        })
        .collect()
}

fn hsv(h: f64, s: f64, v: f64) -> (u8, u8, u8) {
    let h6 = h * 6.0;
    let i = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    let c = |x: f64| (x * 255.0).round() as u8;
    (c(r), c(g), c(b))
}

/// SVG with one rect per grid cell; cells of the same multi-cell group share
/// a stroke color, singletons are unstroked.
pub fn render_merge_map(trace: &LayerTrace, spec: &RenderSpec) -> Result<String> {
    spec.validate()?;
    let groups = patch_groups(trace, spec.grid_side)?;
    let mut sizes = vec![0usize; trace.output_members.len()];
    for &g in &groups {
        sizes[g] += 1;
    }
    // colors in order of first appearance so the palette does not depend on group ids
    let mut color_of = vec![usize::MAX; sizes.len()];
    let mut next = 0;
    for &g in &groups {
        if sizes[g] > 1 && color_of[g] == usize::MAX {
            color_of[g] = next;
            next += 1;
        }
    }
    let colors = palette(next, spec.palette_seed);
    let (c, side) = (spec.cell, spec.grid_side * spec.cell);
    let stroke = (c / 6).max(1);
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{side}" height="{side}" viewBox="0 0 {side} {side}">"#
    );
    for (p, &g) in groups.iter().enumerate() {
        let (x, y) = ((p % spec.grid_side) * c, (p / spec.grid_side) * c);
        let _ = write!(s, r##"<rect x="{x}" y="{y}" width="{c}" height="{c}" fill="#d9d9d9""##);
        if sizes[g] > 1 {
            let _ = write!(s, r#" stroke="{}" stroke-width="{stroke}""#, colors[color_of[g]]);
        } else {
            let _ = write!(s, r#" stroke="none""#);
        }
        let _ = writeln!(s, "/>");
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Piecewise-linear ramp through five viridis anchors.
fn viridis(t: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 5] = [
        [68.0, 1.0, 84.0],
        [59.0, 82.0, 139.0],
        [33.0, 145.0, 140.0],
        [94.0, 201.0, 98.0],
        [253.0, 231.0, 37.0],
    ];
    let x = t.clamp(0.0, 1.0) * 4.0;
    let i = (x.floor() as usize).min(3);
    let f = x - i as f64;
    let mut out = [0u8; 3];
    for (k, o) in out.iter_mut().enumerate() {
        *o = (STOPS[i][k] + f * (STOPS[i + 1][k] - STOPS[i][k])).round() as u8;
    }
    out
}

/// Binary PPM of a per-cell field, min-max normalized, brighter = higher.
/// A constant field maps to the bottom of the ramp.
pub fn render_heatmap(values: &[f64], spec: &RenderSpec) -> Result<Vec<u8>> {
    spec.validate()?;
    if values.len() != spec.n_cells() {
        return Err(Error::shape(
            "render_heatmap",
            format!("{} values for a {g}x{g} grid", values.len(), g = spec.grid_side),
        ));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("heatmap field"));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let colors: Vec<[u8; 3]> = values
        .iter()
        .map(|&v| viridis(if span > 0.0 { (v - lo) / span } else { 0.0 }))
        .collect();
    let side = spec.grid_side * spec.cell;
    let mut out = format!("P6\n{side} {side}\n255\n").into_bytes();
    out.reserve(3 * side * side);
    for y in 0..side {
        let row = y / spec.cell * spec.grid_side;
        for x in 0..side {
            out.extend_from_slice(&colors[row + x / spec.cell]);
        }
    }
    Ok(out)
}

/// Renders `trace` as `spec.kind` and returns the file bytes.
pub fn render(trace: &LayerTrace, spec: &RenderSpec) -> Result<Vec<u8>> {
    match spec.kind {
        RenderKind::MergeMap => Ok(render_merge_map(trace, spec)?.into_bytes()),
        RenderKind::DeltaHeatmap => render_heatmap(&delta_field(trace, spec.grid_side)?, spec),
        RenderKind::WdeltaHeatmap => render_heatmap(&wdelta_field(trace, spec.grid_side)?, spec),
    }
}
