//! Periodic space-time lattice on `[0, T] x T^d` and the discrete operators
//! that both variational problems are written with.
//!
//! Layout conventions:
//!
//! * space nodes sit at `x_i = i * h_x` (multi-index, axis 0 major); the
//!   control volume ("cell") of node `i` is `[x_i - h_x/2, x_i + h_x/2]^d`,
//!   and face `i` along an axis is the interface between node `i` and its
//!   `+1` neighbour along that axis;
//! * time nodes sit at `t_k = k * h_t`, `k = 0..=nt`; time cell `k` is
//!   `[t_k, t_{k+1}]`.
//!
//! The gradient is the periodic forward difference from nodes to faces and
//! the divergence is exactly its negative adjoint, so summation by parts holds
//! to rounding.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Position on the torus. Only the first `dim` entries are meaningful.
pub type Point = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeLoc {
    Node,
    Cell,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceLoc {
    Node,
    Cell,
    Face,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Location {
    pub time: TimeLoc,
    pub space: SpaceLoc,
}

impl Location {
    pub const fn new(time: TimeLoc, space: SpaceLoc) -> Self {
        Self { time, space }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}-in-time/{:?}-in-space", self.time, self.space)
    }
}

/// Serializable description of a grid, written into every report.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridDescriptor {
    pub dim: usize,
    pub nx: usize,
    pub nt: usize,
    pub horizon: f64,
    pub hx: f64,
    pub ht: f64,
}

#[derive(Clone, Debug)]
pub struct SpaceTimeGrid {
    dim: usize,
    nx: usize,
    nt: usize,
    horizon: f64,
    // plus[axis][i] / minus[axis][i]: periodic neighbours of node i
    plus: Vec<Vec<usize>>,
    minus: Vec<Vec<usize>>,
}

impl PartialEq for SpaceTimeGrid {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.nx == other.nx
            && self.nt == other.nt
            && self.horizon == other.horizon
    }
}

impl SpaceTimeGrid {
    pub fn new(dim: usize, nx: usize, nt: usize, horizon: f64) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(Error::InvalidParameter(format!(
                "dimension must be 1 or 2, got {dim}"
            )));
        }
        if nx < 4 {
            return Err(Error::InvalidParameter(format!("nx must be >= 4, got {nx}")));
        }
        if nt < 2 {
            return Err(Error::InvalidParameter(format!("nt must be >= 2, got {nt}")));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        let n_space = nx.pow(dim as u32);
        let mut plus = vec![vec![0; n_space]; dim];
        let mut minus = vec![vec![0; n_space]; dim];
        for i in 0..n_space {
            for axis in 0..dim {
                let stride = nx.pow((dim - 1 - axis) as u32);
                let coord = (i / stride) % nx;
                let base = i - coord * stride;
                plus[axis][i] = base + ((coord + 1) % nx) * stride;
                minus[axis][i] = base + ((coord + nx - 1) % nx) * stride;
            }
        }
        Ok(Self {
            dim,
            nx,
            nt,
            horizon,
            plus,
            minus,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn hx(&self) -> f64 {
        1.0 / self.nx as f64
    }

    pub fn ht(&self) -> f64 {
        self.horizon / self.nt as f64
    }

    /// Number of space nodes, `nx^d`.
    pub fn n_space(&self) -> usize {
        self.plus[0].len()
    }

    /// Spatial quadrature weight `h_x^d`.
    pub fn cell_volume(&self) -> f64 {
        self.hx().powi(self.dim as i32)
    }

    pub fn time_node(&self, k: usize) -> f64 {
        k as f64 * self.ht()
    }

    pub fn slices(&self, time: TimeLoc) -> usize {
        match time {
            TimeLoc::Node => self.nt + 1,
            TimeLoc::Cell => self.nt,
        }
    }

    #[inline]
    pub fn plus(&self, axis: usize, i: usize) -> usize {
        self.plus[axis][i]
    }

    #[inline]
    pub fn minus(&self, axis: usize, i: usize) -> usize {
        self.minus[axis][i]
    }

    /// Integer coordinates of node `i`.
    pub fn multi_index(&self, i: usize) -> [usize; 2] {
        match self.dim {
            1 => [i, 0],
            _ => [i / self.nx, i % self.nx],
        }
    }

    pub fn flat_index(&self, idx: [usize; 2]) -> usize {
        match self.dim {
            1 => idx[0] % self.nx,
            _ => (idx[0] % self.nx) * self.nx + idx[1] % self.nx,
        }
    }

    pub fn position(&self, i: usize) -> Point {
        let mi = self.multi_index(i);
        let h = self.hx();
        match self.dim {
            1 => [mi[0] as f64 * h, 0.0],
            _ => [mi[0] as f64 * h, mi[1] as f64 * h],
        }
    }

    pub fn descriptor(&self) -> GridDescriptor {
        GridDescriptor {
            dim: self.dim,
            nx: self.nx,
            nt: self.nt,
            horizon: self.horizon,
            hx: self.hx(),
            ht: self.ht(),
        }
    }
}

/// Wrap a coordinate into `[0, 1)`.
#[inline]
pub fn wrap(x: f64) -> f64 {
    let y = x - x.floor();
    if y >= 1.0 {
        0.0
    } else {
        y
    }
}

/// Signed wrap-around displacement in `[-1/2, 1/2)`.
#[inline]
pub fn torus_delta(x: f64) -> f64 {
    x - (x + 0.5).floor()
}

pub fn torus_distance(a: &Point, b: &Point, dim: usize) -> f64 {
    (0..dim)
        .map(|k| torus_delta(a[k] - b[k]).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// A time-independent scalar function sampled on the space nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialField {
    dim: usize,
    nx: usize,
    values: Vec<f64>,
}

impl SpatialField {
    pub fn new(grid: &SpaceTimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_space() {
            return Err(Error::Shape(format!(
                "spatial samples: expected {} values, got {}",
                grid.n_space(),
                values.len()
            )));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "non-finite sample at node {bad}"
            )));
        }
        Ok(Self {
            dim: grid.dim(),
            nx: grid.nx(),
            values,
        })
    }

    pub fn constant(grid: &SpaceTimeGrid, value: f64) -> Self {
        Self {
            dim: grid.dim(),
            nx: grid.nx(),
            values: vec![value; grid.n_space()],
        }
    }

    pub fn from_fn(grid: &SpaceTimeGrid, f: impl Fn(&Point) -> f64) -> Self {
        let values = (0..grid.n_space()).map(|i| f(&grid.position(i))).collect();
        Self {
            dim: grid.dim(),
            nx: grid.nx(),
            values,
        }
    }

    #[inline]
    pub fn at(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sup_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    pub fn is_constant(&self) -> bool {
        self.values.iter().all(|v| *v == self.values[0])
    }

    /// Periodic multilinear interpolation at an arbitrary point.
    pub fn interpolate(&self, p: &Point) -> f64 {
        let n = self.nx as f64;
        match self.dim {
            1 => {
                let s = wrap(p[0]) * n;
                let i0 = (s.floor() as usize) % self.nx;
                let i1 = (i0 + 1) % self.nx;
                let t = s - s.floor();
                (1.0 - t) * self.values[i0] + t * self.values[i1]
            }
            _ => {
                let sx = wrap(p[0]) * n;
                let sy = wrap(p[1]) * n;
                let ix = (sx.floor() as usize) % self.nx;
                let iy = (sy.floor() as usize) % self.nx;
                let tx = sx - sx.floor();
                let ty = sy - sy.floor();
                let jx = (ix + 1) % self.nx;
                let jy = (iy + 1) % self.nx;
                let v = |a: usize, b: usize| self.values[a * self.nx + b];
                (1.0 - tx) * ((1.0 - ty) * v(ix, iy) + ty * v(ix, jy))
                    + tx * ((1.0 - ty) * v(jx, iy) + ty * v(jx, jy))
            }
        }
    }

    /// Central-difference gradient at node `i`.
    pub fn central_gradient(&self, grid: &SpaceTimeGrid, i: usize) -> Point {
        let mut g = [0.0; 2];
        let h = grid.hx();
        for (axis, gk) in g.iter_mut().enumerate().take(grid.dim()) {
            *gk = (self.values[grid.plus(axis, i)] - self.values[grid.minus(axis, i)]) / (2.0 * h);
        }
        g
    }

    /// Largest difference quotient between adjacent nodes.
    pub fn observed_lipschitz(&self, grid: &SpaceTimeGrid) -> (f64, usize) {
        let h = grid.hx();
        let mut worst = (0.0, 0);
        for i in 0..self.values.len() {
            for axis in 0..grid.dim() {
                let q = (self.values[grid.plus(axis, i)] - self.values[i]).abs() / h;
                if q > worst.0 {
                    worst = (q, i);
                }
            }
        }
        worst
    }
}

/// Values on a space-time carrier. Data layout is
/// `[slice][component][space node]`, all contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    loc: Location,
    slices: usize,
    components: usize,
    n_space: usize,
    data: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: &SpaceTimeGrid, loc: Location, components: usize) -> Self {
        let slices = grid.slices(loc.time);
        let n_space = grid.n_space();
        Self {
            loc,
            slices,
            components,
            n_space,
            data: vec![0.0; slices * components * n_space],
        }
    }

    pub fn from_vec(
        grid: &SpaceTimeGrid,
        loc: Location,
        components: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        let mut f = Self::zeros(grid, loc, components);
        if data.len() != f.data.len() {
            return Err(Error::Shape(format!(
                "field at {loc}: expected {} values, got {}",
                f.data.len(),
                data.len()
            )));
        }
        f.data = data;
        Ok(f)
    }

    /// Scalar field `value(t_k, x_i)` where `t_k` is the left node of the slice.
    pub fn from_fn(
        grid: &SpaceTimeGrid,
        loc: Location,
        value: impl Fn(f64, &Point) -> f64,
    ) -> Self {
        let mut f = Self::zeros(grid, loc, 1);
        for k in 0..f.slices {
            let t = grid.time_node(k);
            for i in 0..f.n_space {
                f.data[k * f.n_space + i] = value(t, &grid.position(i));
            }
        }
        f
    }

    pub fn location(&self) -> Location {
        self.loc
    }

    pub fn slices(&self) -> usize {
        self.slices
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn n_space(&self) -> usize {
        self.n_space
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// All components of slice `k`.
    pub fn slice(&self, k: usize) -> &[f64] {
        let len = self.components * self.n_space;
        &self.data[k * len..(k + 1) * len]
    }

    pub fn slice_mut(&mut self, k: usize) -> &mut [f64] {
        let len = self.components * self.n_space;
        &mut self.data[k * len..(k + 1) * len]
    }

    pub fn component(&self, k: usize, c: usize) -> &[f64] {
        let start = (k * self.components + c) * self.n_space;
        &self.data[start..start + self.n_space]
    }

    #[inline]
    pub fn get(&self, k: usize, c: usize, i: usize) -> f64 {
        self.data[(k * self.components + c) * self.n_space + i]
    }

    #[inline]
    pub fn set(&mut self, k: usize, c: usize, i: usize, v: f64) {
        self.data[(k * self.components + c) * self.n_space + i] = v;
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Field) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |acc, (a, b)| acc.max((a - b).abs()))
    }

    fn check_grid(&self, grid: &SpaceTimeGrid) -> Result<()> {
        if self.n_space != grid.n_space() || self.slices != grid.slices(self.loc.time) {
            return Err(Error::Shape(format!(
                "field with {} slices x {} nodes does not live on a grid with {} slices x {} nodes",
                self.slices,
                self.n_space,
                grid.slices(self.loc.time),
                grid.n_space()
            )));
        }
        Ok(())
    }
}

/// Forward difference of one node slice onto the faces, one output block per axis.
pub fn gradient_slice(grid: &SpaceTimeGrid, phi: &[f64], out: &mut [f64]) {
    let n = grid.n_space();
    let inv_h = 1.0 / grid.hx();
    for axis in 0..grid.dim() {
        let dst = &mut out[axis * n..(axis + 1) * n];
        for (i, d) in dst.iter_mut().enumerate() {
            *d = (phi[grid.plus(axis, i)] - phi[i]) * inv_h;
        }
    }
}

/// Divergence of one face slice (one block per axis) onto the cells.
pub fn divergence_slice(grid: &SpaceTimeGrid, flux: &[f64], out: &mut [f64]) {
    let n = grid.n_space();
    let inv_h = 1.0 / grid.hx();
    out.iter_mut().for_each(|v| *v = 0.0);
    for axis in 0..grid.dim() {
        let src = &flux[axis * n..(axis + 1) * n];
        for (i, o) in out.iter_mut().enumerate() {
            *o += (src[i] - src[grid.minus(axis, i)]) * inv_h;
        }
    }
}

pub fn spatial_gradient(grid: &SpaceTimeGrid, phi: &Field) -> Result<Field> {
    phi.check_grid(grid)?;
    if phi.loc.space != SpaceLoc::Node || phi.components != 1 {
        return Err(Error::Staggering {
            expected: Location::new(phi.loc.time, SpaceLoc::Node),
            found: phi.loc,
        });
    }
    let mut out = Field::zeros(grid, Location::new(phi.loc.time, SpaceLoc::Face), grid.dim());
    for k in 0..phi.slices {
        gradient_slice(grid, phi.slice(k), out.slice_mut(k));
    }
    Ok(out)
}

pub fn divergence(grid: &SpaceTimeGrid, w: &Field) -> Result<Field> {
    w.check_grid(grid)?;
    if w.loc.space != SpaceLoc::Face || w.components != grid.dim() {
        return Err(Error::Staggering {
            expected: Location::new(w.loc.time, SpaceLoc::Face),
            found: w.loc,
        });
    }
    let mut out = Field::zeros(grid, Location::new(w.loc.time, SpaceLoc::Cell), 1);
    for k in 0..w.slices {
        divergence_slice(grid, w.slice(k), out.slice_mut(k));
    }
    Ok(out)
}

/// `(phi_{k+1} - phi_k) / h_t`, from time nodes to time cells.
pub fn time_derivative(grid: &SpaceTimeGrid, phi: &Field) -> Result<Field> {
    phi.check_grid(grid)?;
    if phi.loc.time != TimeLoc::Node {
        return Err(Error::Staggering {
            expected: Location::new(TimeLoc::Node, phi.loc.space),
            found: phi.loc,
        });
    }
    let mut out = Field::zeros(
        grid,
        Location::new(TimeLoc::Cell, phi.loc.space),
        phi.components,
    );
    let inv_ht = 1.0 / grid.ht();
    for k in 0..grid.nt() {
        let (lo, hi) = (phi.slice(k), phi.slice(k + 1));
        for ((o, a), b) in out.slice_mut(k).iter_mut().zip(lo).zip(hi) {
            *o = (b - a) * inv_ht;
        }
    }
    Ok(out)
}

/// Adjoint of [`time_derivative`] for the plain time sum, boundary terms included:
/// `sum_k h_t (D_t phi)_k m_k = sum_j h_t phi_j (D_t^* m)_j`.
pub fn time_derivative_adjoint(grid: &SpaceTimeGrid, m: &Field) -> Result<Field> {
    m.check_grid(grid)?;
    if m.loc.time != TimeLoc::Cell {
        return Err(Error::Staggering {
            expected: Location::new(TimeLoc::Cell, m.loc.space),
            found: m.loc,
        });
    }
    let mut out = Field::zeros(grid, Location::new(TimeLoc::Node, m.loc.space), m.components);
    let inv_ht = 1.0 / grid.ht();
    let len = m.components * m.n_space;
    for j in 0..=grid.nt() {
        let dst = out.slice_mut(j);
        for (idx, d) in dst.iter_mut().enumerate().take(len) {
            let before = if j > 0 { m.data[(j - 1) * len + idx] } else { 0.0 };
            let after = if j < grid.nt() { m.data[j * len + idx] } else { 0.0 };
            *d = (before - after) * inv_ht;
        }
    }
    Ok(out)
}

/// `sum_i m_i h_x^d` over one slice.
pub fn mass(grid: &SpaceTimeGrid, slice: &[f64]) -> f64 {
    slice.iter().sum::<f64>() * grid.cell_volume()
}

/// Euclidean projection of a slice onto `{m >= 0, sum m h_x^d = 1}`.
pub fn project_simplex(grid: &SpaceTimeGrid, slice: &[f64]) -> Vec<f64> {
    let target = 1.0 / grid.cell_volume();
    let mut sorted = slice.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let mut cumulative = 0.0;
    let mut shift = 0.0;
    for (j, v) in sorted.iter().enumerate() {
        cumulative += v;
        let candidate = (cumulative - target) / (j + 1) as f64;
        if v - candidate > 0.0 {
            shift = candidate;
        }
    }
    slice.iter().map(|v| (v - shift).max(0.0)).collect()
}
