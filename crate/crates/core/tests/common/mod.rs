#![allow(dead_code)]

use std::f64::consts::PI;

use mfg_core::grid::{mass, torus_delta, SpaceTimeGrid, SpatialField};
use mfg_core::model::ProblemData;

pub fn grid1(nx: usize, nt: usize) -> SpaceTimeGrid {
    SpaceTimeGrid::new(1, nx, nt, 1.0).unwrap()
}

pub fn homogeneous(nx: usize, nt: usize) -> ProblemData {
    ProblemData::homogeneous(grid1(nx, nt))
}

/// Normalized gaussian density centred at 1/2.
pub fn gaussian_density(grid: &SpaceTimeGrid, width: f64) -> SpatialField {
    let raw = SpatialField::from_fn(grid, |p| {
        let s: f64 = (0..grid.dim()).map(|a| torus_delta(p[a] - 0.5).powi(2)).sum();
        (-s / (2.0 * width * width)).exp()
    });
    let total = mass(grid, raw.values());
    SpatialField::new(grid, raw.values().iter().map(|v| v / total).collect()).unwrap()
}

pub fn gaussian(nx: usize, nt: usize, width: f64) -> ProblemData {
    let data = homogeneous(nx, nt);
    let m0 = gaussian_density(&data.grid, width);
    data.with_initial(m0)
}

pub fn cosine(grid: &SpaceTimeGrid, offset: f64, amplitude: f64) -> SpatialField {
    SpatialField::from_fn(grid, |p| offset + amplitude * (2.0 * PI * p[0]).cos())
}

/// Discrete primal problem in 1-d with `r = q = 2`, unit weight and no
/// potential, written out by hand: the density follows
/// `m_{k+1} = m_k - ht/h (wp_i - wp_{i-1} + wm_{i+1} - wm_i)` and the cost is
/// `ht h sum (wp^2 + wm^2)/(2m) + m^2/2` over slices `0..nt` plus
/// `h sum phi_T m_nt`.
pub struct PrimalOracle {
    pub nx: usize,
    pub nt: usize,
    pub m0: Vec<f64>,
    pub phi_t: Vec<f64>,
}

pub struct OracleSolution {
    /// `m[k][i]` for `k = 0..=nt`.
    pub m: Vec<Vec<f64>>,
    /// `wp[k][i]`, `wm[k][i]` for `k = 0..nt`.
    pub wp: Vec<Vec<f64>>,
    pub wm: Vec<Vec<f64>>,
    pub value: f64,
    pub iterations: usize,
    /// Max-norm move of a unit projected-gradient step at the end.
    pub residual: f64,
}

impl PrimalOracle {
    fn h(&self) -> f64 {
        1.0 / self.nx as f64
    }

    fn ht(&self) -> f64 {
        1.0 / self.nt as f64
    }

    /// Unpacks `x = [wp_0, wm_0, wp_1, ...]`.
    fn split<'a>(&self, x: &'a [f64], k: usize) -> (&'a [f64], &'a [f64]) {
        let n = self.nx;
        (&x[2 * k * n..(2 * k + 1) * n], &x[(2 * k + 1) * n..(2 * k + 2) * n])
    }

    fn density(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let n = self.nx;
        let c = self.ht() / self.h();
        let mut m = vec![self.m0.clone()];
        for k in 0..self.nt {
            let (wp, wm) = self.split(x, k);
            let prev = &m[k];
            let next = (0..n)
                .map(|i| {
                    let l = (i + n - 1) % n;
                    let r = (i + 1) % n;
                    prev[i] - c * (wp[i] - wp[l] + wm[r] - wm[i])
                })
                .collect();
            m.push(next);
        }
        m
    }

    fn value(&self, x: &[f64]) -> f64 {
        let (h, ht) = (self.h(), self.ht());
        let m = self.density(x);
        let mut total = 0.0;
        for k in 0..self.nt {
            let (wp, wm) = self.split(x, k);
            for i in 0..self.nx {
                let mk = m[k][i];
                if mk <= 0.0 {
                    return f64::INFINITY;
                }
                total += ht * h * ((wp[i] * wp[i] + wm[i] * wm[i]) / (2.0 * mk) + 0.5 * mk * mk);
            }
        }
        let last = &m[self.nt];
        if last.iter().any(|v| *v < 0.0) {
            return f64::INFINITY;
        }
        total + h * last.iter().zip(&self.phi_t).map(|(a, b)| a * b).sum::<f64>()
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let (n, h, ht) = (self.nx, self.h(), self.ht());
        let c = ht / h;
        let m = self.density(x);
        // lam[k] = dJ/dm_k including everything downstream
        let mut lam = vec![vec![0.0; n]; self.nt + 1];
        lam[self.nt] = self.phi_t.iter().map(|p| h * p).collect();
        for k in (1..self.nt).rev() {
            let (wp, wm) = self.split(x, k);
            for i in 0..n {
                let mk = m[k][i];
                let local = ht * h * (-(wp[i] * wp[i] + wm[i] * wm[i]) / (2.0 * mk * mk) + mk);
                lam[k][i] = local + lam[k + 1][i];
            }
        }
        let mut g = vec![0.0; x.len()];
        for k in 0..self.nt {
            let (wp, wm) = self.split(x, k);
            let next = &lam[k + 1];
            for i in 0..n {
                let l = (i + n - 1) % n;
                let r = (i + 1) % n;
                g[2 * k * n + i] = ht * h * wp[i] / m[k][i] + c * (next[r] - next[i]);
                g[(2 * k + 1) * n + i] = ht * h * wm[i] / m[k][i] + c * (next[i] - next[l]);
            }
        }
        g
    }

    fn project(&self, x: &mut [f64]) {
        let n = self.nx;
        for k in 0..self.nt {
            for i in 0..n {
                let p = &mut x[2 * k * n + i];
                *p = p.max(0.0);
                let q = &mut x[(2 * k + 1) * n + i];
                *q = q.min(0.0);
            }
        }
    }

    fn stationarity(&self, x: &[f64]) -> f64 {
        let g = self.gradient(x);
        let mut probe: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - b).collect();
        self.project(&mut probe);
        probe.iter().zip(x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Projected gradient with a local curvature test for the step length,
    /// run until a unit projected-gradient step stops moving.
    pub fn solve(&self, max_iters: usize) -> OracleSolution {
        let len = 2 * self.nt * self.nx;
        let mut x = vec![0.0; len];
        let mut g = self.gradient(&x);
        let mut step = 1.0;
        let mut iterations = 0;
        let mut residual = self.stationarity(&x);
        while iterations < max_iters && residual >= 1e-14 {
            iterations += 1;
            loop {
                let mut y: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - step * b).collect();
                self.project(&mut y);
                if self.value(&y).is_finite() {
                    let gy = self.gradient(&y);
                    let d2: f64 = y.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum();
                    let curv: f64 = gy
                        .iter()
                        .zip(&g)
                        .zip(y.iter().zip(&x))
                        .map(|((u, v), (a, b))| (u - v) * (a - b))
                        .sum();
                    if curv * step <= d2 {
                        x = y;
                        g = gy;
                        step *= 1.2;
                        break;
                    }
                }
                step *= 0.5;
            }
            residual = self.stationarity(&x);
        }
        let fx = self.value(&x);
        let m = self.density(&x);
        let wp = (0..self.nt).map(|k| self.split(&x, k).0.to_vec()).collect();
        let wm = (0..self.nt).map(|k| self.split(&x, k).1.to_vec()).collect();
        OracleSolution {
            m,
            wp,
            wm,
            value: fx,
            iterations,
            residual,
        }
    }
}
