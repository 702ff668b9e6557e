//! Trajectories, their rasterization onto the attention grid, and exact
//! Euclidean distance fields.
//!
//! Coordinates are `(row, col)` in continuous grid units: cell `(r, c)` has
//! its center at `(r as f64, c as f64)`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridDims {
    pub height: usize,
    pub width: usize,
}

impl GridDims {
    pub const fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    #[inline]
    pub fn cell(&self, index: usize) -> Cell {
        (index / self.width, index % self.width)
    }

    pub fn scaled(&self, factor: usize) -> Self {
        Self::new(self.height * factor, self.width * factor)
    }

    pub(crate) fn check(&self, min: usize) -> Result<()> {
        if self.height < min || self.width < min {
            return Err(Error::InvalidDims {
                height: self.height,
                width: self.width,
            });
        }
        Ok(())
    }
}

pub type Cell = (usize, usize);

/// A user stroke bound to one prompt token.
///
/// Several polylines may share a token; each carries an enhancement weight
/// that divides its distances, so a weight above 1 pulls attention toward
/// that part of the stroke more strongly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub token_index: usize,
    pub polylines: Vec<Vec<[f64; 2]>>,
    #[serde(default, rename = "weights", skip_serializing_if = "Vec::is_empty")]
    pub enhancement_weights: Vec<f64>,
}

impl Trajectory {
    pub fn new(token_index: usize, polylines: Vec<Vec<[f64; 2]>>) -> Self {
        Self {
            token_index,
            polylines,
            enhancement_weights: Vec::new(),
        }
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Self {
        self.enhancement_weights = weights;
        self
    }

    pub fn point(token_index: usize, row: f64, col: f64) -> Self {
        Self::new(token_index, vec![vec![[row, col]]])
    }

    /// Enhancement weight of polyline `i`; missing weights default to 1.
    pub fn weight(&self, i: usize) -> f64 {
        self.enhancement_weights.get(i).copied().unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.polylines.is_empty() {
            return Err(Error::EmptyTrajectory);
        }
        if let Some(index) = self.polylines.iter().position(Vec::is_empty) {
            return Err(Error::EmptyPolyline { index });
        }
        if !self.enhancement_weights.is_empty()
            && self.enhancement_weights.len() != self.polylines.len()
        {
            return Err(Error::InvalidTrajectory(format!(
                "{} weights for {} polylines",
                self.enhancement_weights.len(),
                self.polylines.len()
            )));
        }
        if let Some(w) = self
            .enhancement_weights
            .iter()
            .find(|w| !(w.is_finite() && **w > 0.0))
        {
            return Err(Error::InvalidTrajectory(format!(
                "enhancement weight {w} must be positive"
            )));
        }
        for v in self.polylines.iter().flatten() {
            if !(v[0].is_finite() && v[1].is_finite()) {
                return Err(Error::InvalidTrajectory(format!(
                    "non-finite vertex ({}, {})",
                    v[0], v[1]
                )));
            }
        }
        Ok(())
    }

    /// Maps grid coordinates to a grid `factor` times finer, preserving
    /// cell centers.
    pub fn scaled(&self, factor: usize) -> Self {
        let f = factor as f64;
        let offset = (f - 1.0) / 2.0;
        let polylines = self
            .polylines
            .iter()
            .map(|p| {
                p.iter()
                    .map(|v| [v[0] * f + offset, v[1] * f + offset])
                    .collect()
            })
            .collect();
        Self {
            token_index: self.token_index,
            polylines,
            enhancement_weights: self.enhancement_weights.clone(),
        }
    }

    /// Center of the axis-aligned bounding box of all vertices, clamped.
    pub fn bbox_center(&self, dims: GridDims) -> (f64, f64) {
        let (lo, hi) = self.bbox(dims);
        ((lo.0 + hi.0) / 2.0, (lo.1 + hi.1) / 2.0)
    }

    pub fn bbox(&self, dims: GridDims) -> ((f64, f64), (f64, f64)) {
        let mut lo = (f64::INFINITY, f64::INFINITY);
        let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in self.polylines.iter().flatten() {
            let (r, c) = clamp_vertex(*v, dims);
            lo = (lo.0.min(r), lo.1.min(c));
            hi = (hi.0.max(r), hi.1.max(c));
        }
        (lo, hi)
    }
}

fn clamp_vertex(v: [f64; 2], dims: GridDims) -> (f64, f64) {
    (
        v[0].clamp(0.0, (dims.height - 1) as f64),
        v[1].clamp(0.0, (dims.width - 1) as f64),
    )
}

fn round_vertex(v: [f64; 2], dims: GridDims) -> (i64, i64) {
    let (r, c) = clamp_vertex(v, dims);
    (r.round() as i64, c.round() as i64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSet {
    pub dims: GridDims,
    pub cells: BTreeSet<Cell>,
}

impl CellSet {
    pub fn new(dims: GridDims) -> Self {
        Self {
            dims,
            cells: BTreeSet::new(),
        }
    }

    pub fn full(dims: GridDims) -> Self {
        let cells = (0..dims.height)
            .flat_map(|r| (0..dims.width).map(move |c| (r, c)))
            .collect();
        Self { dims, cells }
    }

    pub fn insert(&mut self, cell: Cell) -> bool {
        debug_assert!(cell.0 < self.dims.height && cell.1 < self.dims.width);
        self.cells.insert(cell)
    }

    pub fn contains(&self, cell: Cell) -> bool {
        self.cells.contains(&cell)
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = Cell> + '_ {
        self.cells.iter().copied()
    }

    pub fn is_subset(&self, other: &CellSet) -> bool {
        self.cells.is_subset(&other.cells)
    }

    /// Row-major 0/1 indicator over the grid.
    pub fn indicator(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dims.len()];
        for (r, c) in self.iter() {
            out[self.dims.index(r, c)] = 1.0;
        }
        out
    }

    /// Integer-shifts every cell, dropping those that leave the grid.
    pub fn translated(&self, dr: i64, dc: i64) -> CellSet {
        let mut out = CellSet::new(self.dims);
        for (r, c) in self.iter() {
            let (nr, nc) = (r as i64 + dr, c as i64 + dc);
            if nr >= 0 && nc >= 0 && (nr as usize) < self.dims.height && (nc as usize) < self.dims.width
            {
                out.insert((nr as usize, nc as usize));
            }
        }
        out
    }

    pub fn centroid(&self) -> Option<(f64, f64)> {
        if self.is_empty() {
            return None;
        }
        let n = self.len() as f64;
        let (sr, sc) = self
            .iter()
            .fold((0.0, 0.0), |(a, b), (r, c)| (a + r as f64, b + c as f64));
        Some((sr / n, sc / n))
    }
}

/// Integer line between two cells, both endpoints included, 8-connected.
fn bresenham(from: (i64, i64), to: (i64, i64), mut visit: impl FnMut(i64, i64)) {
    let (mut r, mut c) = from;
    let dr = (to.0 - r).abs();
    let dc = -(to.1 - c).abs();
    let sr = if r < to.0 { 1 } else { -1 };
    let sc = if c < to.1 { 1 } else { -1 };
    let mut err = dr + dc;
    loop {
        visit(r, c);
        if r == to.0 && c == to.1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dc {
            err += dc;
            r += sr;
        }
        if e2 <= dr {
            err += dr;
            c += sc;
        }
    }
}

fn rasterize_one(polyline: &[[f64; 2]], dims: GridDims, out: &mut CellSet) {
    let verts: Vec<(i64, i64)> = polyline.iter().map(|v| round_vertex(*v, dims)).collect();
    if verts.len() == 1 {
        out.insert((verts[0].0 as usize, verts[0].1 as usize));
        return;
    }
    for seg in verts.windows(2) {
        bresenham(seg[0], seg[1], |r, c| {
            out.insert((r as usize, c as usize));
        });
    }
}

/// Cells touched by the trajectory's polylines after rounding vertices.
pub fn rasterize_polyline(traj: &Trajectory, dims: GridDims) -> Result<CellSet> {
    dims.check(2)?;
    traj.validate()?;
    let mut out = CellSet::new(dims);
    for p in &traj.polylines {
        rasterize_one(p, dims, &mut out);
    }
    Ok(out)
}

/// Per-cell Euclidean distance to the nearest source cell, in grid units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceField {
    pub dims: GridDims,
    pub values: Vec<f64>,
}

impl DistanceField {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[self.dims.index(row, col)]
    }

    /// Bilinear resampling at cell centers. Identity when `dims` match.
    pub fn resample(&self, dims: GridDims) -> DistanceField {
        DistanceField {
            dims,
            values: resample_bilinear(&self.values, self.dims, dims),
        }
    }

    /// Multiplies every value; used to express a fine-grid field in coarse
    /// grid units.
    pub fn scaled_values(mut self, factor: f64) -> Self {
        for v in &mut self.values {
            *v *= factor;
        }
        self
    }
}

/// One pass of the lower-envelope-of-parabolas transform over a 1-D line of
/// squared costs. Infinite entries are not sites.
fn lower_envelope(f: &[f64], out: &mut [f64], sites: &mut Vec<usize>, bounds: &mut Vec<f64>) {
    sites.clear();
    bounds.clear();
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        loop {
            let Some(&p) = sites.last() else {
                sites.push(q);
                bounds.push(f64::NEG_INFINITY);
                break;
            };
            let (qf, pf) = (q as f64, p as f64);
            let s = ((fq + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf));
            if s <= *bounds.last().unwrap() {
                sites.pop();
                bounds.pop();
            } else {
                sites.push(q);
                bounds.push(s);
                break;
            }
        }
    }
    if sites.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while k + 1 < sites.len() && bounds[k + 1] < qf {
            k += 1;
        }
        let p = sites[k];
        let d = qf - p as f64;
        *o = d * d + f[p];
    }
}

/// Exact squared Euclidean distance transform (two separable passes).
pub fn squared_distance_transform(src: &CellSet) -> Result<Vec<f64>> {
    if src.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    let GridDims { height, width } = src.dims;
    let mut grid = vec![f64::INFINITY; height * width];
    for (r, c) in src.iter() {
        grid[src.dims.index(r, c)] = 0.0;
    }
    let mut sites = Vec::new();
    let mut bounds = Vec::new();

    let mut line = vec![0.0; height];
    let mut out = vec![0.0; height];
    for c in 0..width {
        for r in 0..height {
            line[r] = grid[r * width + c];
        }
        lower_envelope(&line, &mut out, &mut sites, &mut bounds);
        for r in 0..height {
            grid[r * width + c] = out[r];
        }
    }
    let mut out = vec![0.0; width];
    for r in 0..height {
        let row = &mut grid[r * width..(r + 1) * width];
        lower_envelope(row, &mut out, &mut sites, &mut bounds);
        row.copy_from_slice(&out);
    }
    Ok(grid)
}

pub fn distance_transform(src: &CellSet) -> Result<DistanceField> {
    let values = squared_distance_transform(src)?
        .into_iter()
        .map(f64::sqrt)
        .collect();
    Ok(DistanceField {
        dims: src.dims,
        values,
    })
}

/// Cells within `radius` of the rasterized trajectory.
pub fn expand_trajectory_to_mask(traj: &Trajectory, dims: GridDims, radius: f64) -> Result<CellSet> {
    if !(radius >= 0.0) {
        return Err(Error::InvalidConfig(format!("radius {radius} must be >= 0")));
    }
    let raster = rasterize_polyline(traj, dims)?;
    let field = distance_transform(&raster)?;
    let mut out = CellSet::new(dims);
    for (i, &d) in field.values.iter().enumerate() {
        if d <= radius {
            out.insert(dims.cell(i));
        }
    }
    Ok(out)
}

/// Pointwise minimum over polylines of `distance / enhancement_weight`.
pub fn combined_distance_field(traj: &Trajectory, dims: GridDims) -> Result<DistanceField> {
    dims.check(2)?;
    traj.validate()?;
    let mut values = vec![f64::INFINITY; dims.len()];
    for (i, p) in traj.polylines.iter().enumerate() {
        let mut cells = CellSet::new(dims);
        rasterize_one(p, dims, &mut cells);
        let w = traj.weight(i);
        let field = distance_transform(&cells)?;
        for (acc, d) in values.iter_mut().zip(field.values) {
            let d = if w == 1.0 { d } else { d / w };
            if d < *acc {
                *acc = d;
            }
        }
    }
    Ok(DistanceField { dims, values })
}

/// Bilinear interpolation of a row-major grid sampled at target cell
/// centers; border samples clamp to the edge.
pub fn resample_bilinear(values: &[f64], from: GridDims, to: GridDims) -> Vec<f64> {
    if from == to {
        return values.to_vec();
    }
    let axis = |i: usize, n_to: usize, n_from: usize| -> (usize, usize, f64) {
        let x = ((i as f64 + 0.5) * n_from as f64 / n_to as f64 - 0.5).clamp(0.0, (n_from - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(n_from - 1);
        (lo, hi, x - lo as f64)
    };
    let mut out = Vec::with_capacity(to.len());
    for r in 0..to.height {
        let (r0, r1, fr) = axis(r, to.height, from.height);
        for c in 0..to.width {
            let (c0, c1, fc) = axis(c, to.width, from.width);
            let v = |rr: usize, cc: usize| values[from.index(rr, cc)];
            let top = if fc == 0.0 { v(r0, c0) } else { v(r0, c0) * (1.0 - fc) + v(r0, c1) * fc };
            let value = if fr == 0.0 {
                top
            } else {
                let bottom = if fc == 0.0 { v(r1, c0) } else { v(r1, c0) * (1.0 - fc) + v(r1, c1) * fc };
                top * (1.0 - fr) + bottom * fr
            };
            out.push(value);
        }
    }
    out
}
