//! N-player deterministic game built from a computed equilibrium: sampled
//! trajectories, regularized player costs, best responses against frozen
//! opponents and the resulting epsilon-Nash gap.
//!
//! The regularized coupling seen by a player at `x` is
//! `f^{delta,sigma}(x, mu) = int xi^sigma(x - y) f(y, (xi^delta * mu)(y)) dy`,
//! where `mu` is the empirical measure of the other players. The inner
//! smoothing is an exact kernel sum; the outer integral is a quadrature on a
//! grid `quad_per_cell` times finer than the solver grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::functionals::{upwind_dp, upwind_gradient, PrimalState, ALPHA_LOC};
use crate::grid::{torus_delta, wrap, Field, Point, SpaceTimeGrid};
use crate::model::ProblemData;
use crate::solver::maximal_subsolution;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GameConfig {
    pub n_players: usize,
    pub delta: f64,
    pub sigma: f64,
    pub seed: u64,
    /// Integration substeps per solver time cell.
    pub ode_steps: usize,
    /// Number of players whose best response is computed.
    pub sample_players: usize,
    /// Refinement of the coupling quadrature grid relative to the solver grid.
    pub quad_per_cell: usize,
    /// Independent ensembles the expected gains and costs are averaged over.
    pub replicates: usize,
    /// Mollification width of the equilibrium velocity; `max(delta, 2h)`
    /// when unset.
    pub flow_width: Option<f64>,
}

impl Default for GameConfig {
    fn default() -> Self {
        Self {
            n_players: 64,
            delta: 0.35,
            sigma: 0.35,
            seed: 0,
            ode_steps: 4,
            sample_players: 16,
            quad_per_cell: 4,
            replicates: 8,
            flow_width: None,
        }
    }
}

impl GameConfig {
    pub fn validate(&self, grid: &SpaceTimeGrid) -> Result<()> {
        let h = grid.hx();
        if self.n_players < 2 {
            return Err(Error::GameConfig(format!(
                "need at least 2 players, got {}",
                self.n_players
            )));
        }
        for (name, v) in [("delta", self.delta), ("sigma", self.sigma)] {
            if !(v.is_finite() && v >= 2.0 * h) {
                return Err(Error::GameConfig(format!(
                    "{name} = {v} is below the grid resolution 2h = {}",
                    2.0 * h
                )));
            }
            if v > 1.0 {
                return Err(Error::GameConfig(format!("{name} = {v} exceeds the torus size")));
            }
        }
        if let Some(w) = self.flow_width {
            if !(w.is_finite() && w > 0.0 && w <= 1.0) {
                return Err(Error::GameConfig(format!("flow_width = {w} must lie in (0, 1]")));
            }
        }
        if self.sample_players == 0 || self.sample_players > self.n_players {
            return Err(Error::GameConfig(format!(
                "sample_players must lie in 1..={}, got {}",
                self.n_players, self.sample_players
            )));
        }
        if self.ode_steps == 0 || self.quad_per_cell == 0 || self.replicates == 0 {
            return Err(Error::GameConfig(
                "ode_steps, quad_per_cell and replicates must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Kernel

/// `C_d (1 - |z|^2)^3` on the unit ball, unit mass, twice continuously
/// differentiable.
fn bump(dim: usize, z2: f64) -> f64 {
    if z2 >= 1.0 {
        return 0.0;
    }
    let c = if dim == 1 {
        35.0 / 32.0
    } else {
        4.0 / std::f64::consts::PI
    };
    let u = 1.0 - z2;
    c * u * u * u
}

/// Periodized `xi^width(disp)`, summing the images at shifts `-1, 0, 1` per axis.
pub fn kernel(dim: usize, width: f64, disp: &Point) -> f64 {
    let scale = width.powi(dim as i32);
    let mut total = 0.0;
    let d0 = torus_delta(disp[0]);
    if dim == 1 {
        for s in [-1.0, 0.0, 1.0] {
            let z = (d0 + s) / width;
            total += bump(1, z * z);
        }
    } else {
        let d1 = torus_delta(disp[1]);
        for s0 in [-1.0, 0.0, 1.0] {
            for s1 in [-1.0, 0.0, 1.0] {
                let z0 = (d0 + s0) / width;
                let z1 = (d1 + s1) / width;
                total += bump(2, z0 * z0 + z1 * z1);
            }
        }
    }
    total / scale
}

// ---------------------------------------------------------------------------
// Quadrature grid and smoothed empirical densities

#[derive(Clone, Debug)]
struct FineGrid {
    dim: usize,
    m: usize,
    h: f64,
}

impl FineGrid {
    fn new(grid: &SpaceTimeGrid, refine: usize) -> Self {
        let m = grid.nx() * refine;
        Self {
            dim: grid.dim(),
            m,
            h: 1.0 / m as f64,
        }
    }

    fn len(&self) -> usize {
        self.m.pow(self.dim as u32)
    }

    fn point(&self, idx: usize) -> Point {
        if self.dim == 1 {
            [idx as f64 * self.h, 0.0]
        } else {
            [(idx / self.m) as f64 * self.h, (idx % self.m) as f64 * self.h]
        }
    }

    /// Indices of the fine points within `radius` (box) of `x`.
    fn neighbours(&self, x: &Point, radius: f64, mut visit: impl FnMut(usize)) {
        let span = |c: f64| {
            let lo = ((c - radius) / self.h).floor() as i64;
            let hi = ((c + radius) / self.h).ceil() as i64;
            // a full turn is enough; wider boxes would visit points twice
            let hi = hi.min(lo + self.m as i64 - 1);
            (lo, hi)
        };
        let m = self.m as i64;
        let (lo0, hi0) = span(x[0]);
        if self.dim == 1 {
            for a in lo0..=hi0 {
                visit(a.rem_euclid(m) as usize);
            }
        } else {
            let (lo1, hi1) = span(x[1]);
            for a in lo0..=hi0 {
                let ra = a.rem_euclid(m) as usize * self.m;
                for b in lo1..=hi1 {
                    visit(ra + b.rem_euclid(m) as usize);
                }
            }
        }
    }
}

/// `sum_j xi^delta(y - x^j)` over all players, on the quadrature grid.
#[derive(Clone, Debug)]
struct Snapshot {
    sum: Vec<f64>,
}

/// Evaluates the regularized coupling for one set of positions.
struct CouplingEvaluator<'a> {
    data: &'a ProblemData,
    fine: FineGrid,
    delta: f64,
    sigma: f64,
    /// Coupling weight sampled at the quadrature points.
    weight: Vec<f64>,
}

impl<'a> CouplingEvaluator<'a> {
    fn new(data: &'a ProblemData, cfg: &GameConfig) -> Self {
        let fine = FineGrid::new(&data.grid, cfg.quad_per_cell);
        let weight = (0..fine.len())
            .map(|j| data.coupling.weight().interpolate(&fine.point(j)))
            .collect();
        Self {
            data,
            fine,
            delta: cfg.delta,
            sigma: cfg.sigma,
            weight,
        }
    }

    fn snapshot(&self, positions: impl Iterator<Item = Point>) -> Snapshot {
        let dim = self.fine.dim;
        let mut sum = vec![0.0; self.fine.len()];
        for x in positions {
            self.fine.neighbours(&x, self.delta, |j| {
                let y = self.fine.point(j);
                sum[j] += kernel(dim, self.delta, &[y[0] - x[0], y[1] - x[1]]);
            });
        }
        Snapshot { sum }
    }

    /// `f^{delta,sigma}(x, mu)` where `mu` is the snapshot minus the player at
    /// `own` (if any), normalised by `n_others`.
    fn eval(&self, snap: &Snapshot, x: &Point, own: Option<&Point>, n_others: usize) -> f64 {
        let dim = self.fine.dim;
        let q1 = self.data.coupling.q() - 1.0;
        let inv_n = 1.0 / n_others as f64;
        let vol = self.fine.h.powi(dim as i32);
        let mut acc = 0.0;
        self.fine.neighbours(x, self.sigma, |j| {
            let y = self.fine.point(j);
            let ws = kernel(dim, self.sigma, &[x[0] - y[0], x[1] - y[1]]);
            if ws == 0.0 {
                return;
            }
            let mut s = snap.sum[j];
            if let Some(o) = own {
                s -= kernel(dim, self.delta, &[y[0] - o[0], y[1] - o[1]]);
            }
            let rho = (s * inv_n).max(0.0);
            let f = if rho == 0.0 {
                0.0
            } else if q1 == 1.0 {
                rho
            } else {
                rho.powf(q1)
            };
            acc += ws * self.weight[j] * f;
        });
        acc * vol
    }
}

/// `f^{delta,sigma}(x, (1/n) sum_j delta_{x^j})` for the given positions.
pub fn mollified_coupling(
    x: &Point,
    positions: &[Point],
    data: &ProblemData,
    cfg: &GameConfig,
) -> Result<f64> {
    if positions.is_empty() {
        return Err(Error::GameConfig("mollified coupling needs at least one position".into()));
    }
    let h = data.grid.hx();
    if cfg.delta < 2.0 * h || cfg.sigma < 2.0 * h {
        return Err(Error::GameConfig(format!(
            "delta and sigma must be at least 2h = {}",
            2.0 * h
        )));
    }
    let ev = CouplingEvaluator::new(data, cfg);
    let snap = ev.snapshot(positions.iter().copied());
    Ok(ev.eval(&snap, x, None, positions.len()))
}

// ---------------------------------------------------------------------------
// Trajectories

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEnsemble {
    pub dim: usize,
    /// Time between consecutive samples.
    pub dt: f64,
    /// `paths[j][s]` is player `j` at time `s * dt`.
    pub paths: Vec<Vec<Point>>,
    /// Velocity samples matching `paths`.
    pub velocities: Vec<Vec<Point>>,
    pub seed: u64,
    /// sha256 of the density and flux fields the flow was built from.
    pub flow_digest: String,
}

impl TrajectoryEnsemble {
    pub fn n_players(&self) -> usize {
        self.paths.len()
    }

    pub fn n_samples(&self) -> usize {
        self.paths.first().map_or(0, Vec::len)
    }

    pub fn positions_at(&self, s: usize) -> Vec<Point> {
        self.paths.iter().map(|p| p[s]).collect()
    }
}

fn flow_digest(primal: &PrimalState) -> String {
    let mut hasher = Sha256::new();
    for v in primal.m.data().iter().chain(primal.w.data()) {
        hasher.update(v.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

/// Inverse CDF of the piecewise-constant density `m0` (cell `i` is centred at
/// node `i`) along one axis, given cell masses.
fn inverse_cdf(masses: &[f64], h: f64, u: f64) -> f64 {
    let total: f64 = masses.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    for (i, &p) in masses.iter().enumerate() {
        if p > 0.0 && acc + p > target {
            let frac = ((target - acc) / p).clamp(0.0, 1.0);
            return wrap(i as f64 * h - 0.5 * h + frac * h);
        }
        acc += p;
    }
    // u rounding up to 1: last cell with mass
    let last = masses.iter().rposition(|p| *p > 0.0).unwrap_or(0);
    wrap(last as f64 * h + 0.5 * h * (1.0 - 1e-12))
}

/// Initial positions drawn i.i.d. from `m0`, one RNG stream per
/// (replicate, player) so the draw does not depend on scheduling.
fn sample_initial(data: &ProblemData, cfg: &GameConfig, replicate: usize) -> Vec<Point> {
    let grid = &data.grid;
    let nx = grid.nx();
    let h = grid.hx();
    let m0 = data.m0.values();
    let rows: Vec<f64> = if grid.dim() == 2 {
        (0..nx).map(|a| m0[a * nx..(a + 1) * nx].iter().sum()).collect()
    } else {
        Vec::new()
    };
    (0..cfg.n_players)
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(((replicate as u64) << 32) | j as u64);
            let u0: f64 = rng.gen();
            if grid.dim() == 1 {
                [inverse_cdf(m0, h, u0), 0.0]
            } else {
                let x0 = inverse_cdf(&rows, h, u0);
                let a = (((x0 + 0.5 * h) / h).floor() as usize) % nx;
                let u1: f64 = rng.gen();
                [x0, inverse_cdf(&m0[a * nx..(a + 1) * nx], h, u1)]
            }
        })
        .collect()
}

/// Piecewise-constant-in-time velocity field given by nodal values per time
/// cell, interpolated multilinearly in space.
struct NodalFlow<'a> {
    grid: &'a SpaceTimeGrid,
    /// `[cell][axis][node]`
    v: Vec<f64>,
}

impl NodalFlow<'_> {
    fn at(&self, k: usize, x: &Point) -> Point {
        let grid = self.grid;
        let n = grid.n_space();
        let d = grid.dim();
        let nx = grid.nx();
        let base = k * d * n;
        let mut out = [0.0; 2];
        let s0 = wrap(x[0]) * nx as f64;
        let i0 = (s0.floor() as usize) % nx;
        let t0 = s0 - s0.floor();
        let j0 = (i0 + 1) % nx;
        if d == 1 {
            let v = &self.v[base..base + n];
            out[0] = (1.0 - t0) * v[i0] + t0 * v[j0];
        } else {
            let s1 = wrap(x[1]) * nx as f64;
            let i1 = (s1.floor() as usize) % nx;
            let t1 = s1 - s1.floor();
            let j1 = (i1 + 1) % nx;
            for (a, o) in out.iter_mut().enumerate() {
                let v = &self.v[base + a * n..base + (a + 1) * n];
                let g = |p: usize, q: usize| v[p * nx + q];
                *o = (1.0 - t0) * ((1.0 - t1) * g(i0, i1) + t1 * g(i0, j1))
                    + t0 * ((1.0 - t1) * g(j0, i1) + t1 * g(j0, j1));
            }
        }
        out
    }
}

/// Explicit midpoint integration of `x' = v(t, x)` with `ode_steps` substeps
/// per time cell. The velocity sample at `t_s` is taken in the cell starting
/// at `t_s` (the last cell for the final sample).
fn integrate(
    grid: &SpaceTimeGrid,
    dim: usize,
    x0: Point,
    ode_steps: usize,
    field: impl Fn(usize, &Point) -> Point,
) -> (Vec<Point>, Vec<Point>) {
    let nt = grid.nt();
    let dt = grid.ht() / ode_steps as f64;
    let total = nt * ode_steps;
    let mut path = Vec::with_capacity(total + 1);
    let mut vel = Vec::with_capacity(total + 1);
    let mut x = x0;
    for s in 0..total {
        let k = s / ode_steps;
        let v0 = field(k, &x);
        path.push(x);
        vel.push(v0);
        let mut mid = x;
        for a in 0..dim {
            mid[a] = wrap(x[a] + 0.5 * dt * v0[a]);
        }
        let vm = field(k, &mid);
        for a in 0..dim {
            x[a] = wrap(x[a] + dt * vm[a]);
        }
    }
    vel.push(field(nt - 1, &x));
    path.push(x);
    (path, vel)
}

/// Equilibrium velocity `w^eps / m^eps` per time cell at the solver nodes,
/// with `eps = max(delta, 2h)`.
fn equilibrium_flow<'a>(primal: &PrimalState, data: &'a ProblemData, eps: f64) -> NodalFlow<'a> {
    let grid = &data.grid;
    let n = grid.n_space();
    let d = grid.dim();
    let nt = grid.nt();
    let vol = grid.cell_volume();
    let mom = primal.cell_momentum(grid);
    // kernel weights depend only on the node offset
    let nx = grid.nx();
    let offsets: Vec<(usize, f64)> = (0..n)
        .map(|o| (o, kernel(d, eps, &grid.position(o)) * vol))
        .filter(|(_, w)| *w > 0.0)
        .collect();
    let shift = |i: usize, o: usize| -> usize {
        if d == 1 {
            (i + o) % nx
        } else {
            let (a, b) = (i / nx, i % nx);
            let (p, q) = (o / nx, o % nx);
            ((a + p) % nx) * nx + (b + q) % nx
        }
    };
    let mut v = vec![0.0; nt * d * n];
    v.par_chunks_mut(d * n).enumerate().for_each(|(k, out)| {
        let m = primal.m.slice(k);
        let w = mom.slice(k);
        for i in 0..n {
            let mut me = 0.0;
            let mut we = [0.0; 2];
            for &(o, kw) in &offsets {
                let j = shift(i, o);
                me += kw * m[j];
                for a in 0..d {
                    we[a] += kw * w[a * n + j];
                }
            }
            for a in 0..d {
                out[a * n + i] = if me > 1e-300 { we[a] / me } else { 0.0 };
            }
        }
    });
    NodalFlow { grid, v }
}

pub fn sample_equilibrium_trajectories(
    primal: &PrimalState,
    data: &ProblemData,
    cfg: &GameConfig,
) -> Result<TrajectoryEnsemble> {
    Ok(sample_replicates(primal, data, cfg, 1)?.remove(0))
}

/// The first `count` independent ensembles for this configuration's seed.
pub fn sample_replicates(
    primal: &PrimalState,
    data: &ProblemData,
    cfg: &GameConfig,
    count: usize,
) -> Result<Vec<TrajectoryEnsemble>> {
    let grid = &data.grid;
    cfg.validate(grid)?;
    let dim = grid.dim();
    let eps = cfg.flow_width.unwrap_or(cfg.delta).max(2.0 * grid.hx());
    let flow = equilibrium_flow(primal, data, eps);
    let digest = flow_digest(primal);
    Ok((0..count)
        .map(|r| {
            let (paths, velocities): (Vec<_>, Vec<_>) = sample_initial(data, cfg, r)
                .par_iter()
                .map(|x0| integrate(grid, dim, *x0, cfg.ode_steps, |k, x| flow.at(k, x)))
                .unzip();
            TrajectoryEnsemble {
                dim,
                dt: grid.ht() / cfg.ode_steps as f64,
                paths,
                velocities,
                seed: cfg.seed,
                flow_digest: digest.clone(),
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Costs and best responses

/// Precomputed kernel sums of the whole ensemble at every sample time.
pub struct GameContext<'a> {
    data: &'a ProblemData,
    cfg: GameConfig,
    ensemble: &'a TrajectoryEnsemble,
    evaluator: CouplingEvaluator<'a>,
    snapshots: Vec<Snapshot>,
}

impl<'a> GameContext<'a> {
    pub fn new(
        ensemble: &'a TrajectoryEnsemble,
        cfg: &GameConfig,
        data: &'a ProblemData,
    ) -> Result<Self> {
        cfg.validate(&data.grid)?;
        let expected = data.grid.nt() * cfg.ode_steps + 1;
        if ensemble.n_players() != cfg.n_players || ensemble.n_samples() != expected {
            return Err(Error::GameConfig(format!(
                "ensemble has {} players x {} samples, configuration expects {} x {}",
                ensemble.n_players(),
                ensemble.n_samples(),
                cfg.n_players,
                expected
            )));
        }
        let evaluator = CouplingEvaluator::new(data, cfg);
        let snapshots = (0..expected)
            .into_par_iter()
            .map(|s| evaluator.snapshot(ensemble.paths.iter().map(|p| p[s])))
            .collect();
        Ok(Self {
            data,
            cfg: cfg.clone(),
            ensemble,
            evaluator,
            snapshots,
        })
    }

    /// Coupling felt at `x` and sample `s` by player `i`.
    fn coupling(&self, i: usize, s: usize, x: &Point) -> f64 {
        let own = self.ensemble.paths[i][s];
        self.evaluator
            .eval(&self.snapshots[s], x, Some(&own), self.cfg.n_players - 1)
    }

    /// Cost of player `i` following `path` (with velocity samples `vel`)
    /// while the others follow the ensemble.
    pub fn cost_of(&self, i: usize, path: &[Point], vel: &[Point]) -> f64 {
        let dt = self.ensemble.dt;
        let last = path.len() - 1;
        let h = &self.data.hamiltonian;
        let d = self.ensemble.dim;
        let mut acc = 0.0;
        for s in 0..=last {
            let wgt = if s == 0 || s == last { 0.5 } else { 1.0 };
            let x = &path[s];
            let run = h.lagrangian_at(x, &vel[s][..d]) + self.coupling(i, s, x);
            acc += wgt * run;
        }
        acc * dt + self.data.phi_terminal.interpolate(&path[last])
    }

    pub fn player_cost(&self, i: usize) -> f64 {
        self.cost_of(i, &self.ensemble.paths[i], &self.ensemble.velocities[i])
    }

    /// Grid of the best-response sweep: the solver's space grid with one
    /// time cell per trajectory sample interval.
    fn sweep_data(&self) -> Result<ProblemData> {
        let g = &self.data.grid;
        let grid = SpaceTimeGrid::new(g.dim(), g.nx(), g.nt() * self.cfg.ode_steps, g.horizon())?;
        Ok(ProblemData {
            grid,
            ..self.data.clone()
        })
    }

    /// Coupling field of player `i` on the sweep grid, averaged over the two
    /// samples bounding each cell.
    fn frozen_coupling(&self, i: usize, sweep: &SpaceTimeGrid) -> Field {
        let n = sweep.n_space();
        let nodes: Vec<Point> = (0..n).map(|j| sweep.position(j)).collect();
        let at_sample: Vec<Vec<f64>> = (0..self.snapshots.len())
            .map(|s| nodes.iter().map(|x| self.coupling(i, s, x)).collect())
            .collect();
        let mut alpha = Field::zeros(sweep, ALPHA_LOC, 1);
        for k in 0..sweep.nt() {
            let dst = alpha.slice_mut(k);
            for ((v, a), b) in dst.iter_mut().zip(&at_sample[k]).zip(&at_sample[k + 1]) {
                *v = 0.5 * (a + b);
            }
        }
        alpha
    }

    /// Optimal path of player `i` against the frozen opponents: backward
    /// sweep with the coupling as right-hand side, then the feedback flow
    /// `x' = -D_pH(D phi)` from the player's initial position.
    pub fn best_response(&self, i: usize) -> Result<(Vec<Point>, Vec<Point>, f64)> {
        let sweep = self.sweep_data()?;
        let grid = &sweep.grid;
        let alpha = self.frozen_coupling(i, grid);
        let phi = maximal_subsolution(&alpha, &sweep)?;
        let n = grid.n_space();
        let d = grid.dim();
        let nt = grid.nt();
        let mut v = vec![0.0; nt * d * n];
        for k in 0..nt {
            let next = phi.slice(k + 1);
            let mut b = [0.0; 4];
            let mut g = [0.0; 4];
            for j in 0..n {
                upwind_gradient(grid, next, j, &mut b[..2 * d]);
                upwind_dp(&sweep.hamiltonian, &b[..2 * d], &mut g[..2 * d]);
                for a in 0..d {
                    v[(k * d + a) * n + j] = -(g[a] + g[d + a]);
                }
            }
        }
        let flow = NodalFlow { grid, v };
        let x0 = self.ensemble.paths[i][0];
        let (path, vel) = integrate(grid, d, x0, 1, |k, x| flow.at(k, x));
        let cost = self.cost_of(i, &path, &vel);
        Ok((path, vel, cost))
    }
}
pub fn player_cost(
    i: usize,
    ensemble: &TrajectoryEnsemble,
    cfg: &GameConfig,
    data: &ProblemData,
) -> Result<f64> {
    check_index(i, ensemble)?;
    Ok(GameContext::new(ensemble, cfg, data)?.player_cost(i))
}

pub fn best_response(
    i: usize,
    ensemble: &TrajectoryEnsemble,
    cfg: &GameConfig,
    data: &ProblemData,
) -> Result<(Vec<Point>, f64)> {
    check_index(i, ensemble)?;
    let (path, _, cost) = GameContext::new(ensemble, cfg, data)?.best_response(i)?;
    Ok((path, cost))
}

fn check_index(i: usize, ensemble: &TrajectoryEnsemble) -> Result<()> {
    if i >= ensemble.n_players() {
        return Err(Error::GameConfig(format!(
            "player {i} out of range (ensemble has {})",
            ensemble.n_players()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlayerGain {
    pub player: usize,
    pub x0: Point,
    pub cost: f64,
    pub best_response_cost: f64,
    pub gain: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WassersteinSample {
    pub time: f64,
    pub distance: f64,
}

/// Deviation test on one ensemble.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NashSample {
    /// `max(0, max_i gain_i)` over the tested players.
    pub epsilon: f64,
    pub gains: Vec<PlayerGain>,
    /// Mean current cost over all players.
    pub mean_cost: f64,
    pub wasserstein: Vec<WassersteinSample>,
}

/// Players whose deviations are tested: evenly spread indices.
pub fn sampled_players(cfg: &GameConfig) -> Vec<usize> {
    (0..cfg.sample_players)
        .map(|k| k * cfg.n_players / cfg.sample_players)
        .collect()
}

/// `int phi(0) m0`, the value of the game per player.
pub fn game_value(phi: &Field, data: &ProblemData) -> f64 {
    data.grid.cell_volume()
        * phi
            .slice(0)
            .iter()
            .zip(data.m0.values())
            .map(|(p, m)| p * m)
            .sum::<f64>()
}

pub fn nash_gap(
    ensemble: &TrajectoryEnsemble,
    cfg: &GameConfig,
    data: &ProblemData,
    m: &Field,
) -> Result<NashSample> {
    let grid = &data.grid;
    let ctx = GameContext::new(ensemble, cfg, data)?;
    let costs: Vec<f64> = (0..cfg.n_players)
        .into_par_iter()
        .map(|i| ctx.player_cost(i))
        .collect();
    let gains = sampled_players(cfg)
        .into_par_iter()
        .map(|i| {
            let (_, _, br) = ctx.best_response(i)?;
            Ok(PlayerGain {
                player: i,
                x0: ensemble.paths[i][0],
                cost: costs[i],
                best_response_cost: br,
                gain: costs[i] - br,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let nt = grid.nt();
    let wasserstein = [0, nt / 4, nt / 2, 3 * nt / 4, nt]
        .iter()
        .map(|&k| WassersteinSample {
            time: grid.time_node(k),
            distance: wasserstein_to_density(
                &ensemble.positions_at(k * cfg.ode_steps),
                m.slice(k),
                grid,
            ),
        })
        .collect();
    Ok(NashSample {
        epsilon: gains.iter().fold(0.0f64, |e, g| e.max(g.gain)),
        gains,
        mean_cost: costs.iter().sum::<f64>() / costs.len() as f64,
        wasserstein,
    })
}

/// Expected gains and costs, averaged over `replicates` independent draws of
/// the initial positions.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NashReport {
    pub n_players: usize,
    pub delta: f64,
    pub sigma: f64,
    pub seed: u64,
    pub replicates: usize,
    /// `max(0, max_i E[gain_i])` over the tested players.
    pub epsilon: f64,
    /// `E[gain]` averaged over the tested players as well.
    pub mean_gain: f64,
    /// Smallest single-draw gain; negative values measure how far a computed
    /// best response falls short of the current path.
    pub min_gain: f64,
    /// `E[gain_i]` per tested player.
    pub expected_gains: Vec<f64>,
    pub mean_cost: f64,
    /// `int phi(0) m0`.
    pub value: f64,
    /// `mean_cost - value`: energy defect of the equilibrium ensemble.
    pub value_defect: f64,
    /// Mean `W_1` between the ensemble and `m(t)` at the sampled times.
    pub wasserstein: Vec<WassersteinSample>,
    #[serde(skip)]
    pub samples: Vec<NashSample>,
}

pub fn nash_estimate(
    primal: &PrimalState,
    phi: &Field,
    data: &ProblemData,
    cfg: &GameConfig,
) -> Result<NashReport> {
    let ensembles = sample_replicates(primal, data, cfg, cfg.replicates)?;
    let samples = ensembles
        .iter()
        .map(|e| nash_gap(e, cfg, data, &primal.m))
        .collect::<Result<Vec<_>>>()?;
    let r = samples.len() as f64;
    let tested = sampled_players(cfg).len();
    let expected_gains: Vec<f64> = (0..tested)
        .map(|k| samples.iter().map(|s| s.gains[k].gain).sum::<f64>() / r)
        .collect();
    let wasserstein = (0..samples[0].wasserstein.len())
        .map(|k| WassersteinSample {
            time: samples[0].wasserstein[k].time,
            distance: samples.iter().map(|s| s.wasserstein[k].distance).sum::<f64>() / r,
        })
        .collect();
    let mean_cost = samples.iter().map(|s| s.mean_cost).sum::<f64>() / r;
    let value = game_value(phi, data);
    Ok(NashReport {
        n_players: cfg.n_players,
        delta: cfg.delta,
        sigma: cfg.sigma,
        seed: cfg.seed,
        replicates: cfg.replicates,
        epsilon: expected_gains.iter().fold(0.0f64, |e, g| e.max(*g)),
        mean_gain: expected_gains.iter().sum::<f64>() / tested as f64,
        min_gain: samples
            .iter()
            .flat_map(|s| s.gains.iter().map(|g| g.gain))
            .fold(f64::INFINITY, f64::min),
        expected_gains,
        mean_cost,
        value,
        value_defect: mean_cost - value,
        wasserstein,
        samples,
    })
}

// ---------------------------------------------------------------------------
// Wasserstein distance on the circle

/// `W_1` on the circle between an empirical measure and a cell-wise constant
/// density: `min_c int |F_mu - F_m - c|`, with `c` the median of the CDF
/// difference. Integrated by the midpoint rule on `samples` points.
pub fn circle_w1(points: &[f64], masses: &[f64], h: f64) -> f64 {
    let samples = (1usize << 14).max(16 * points.len());
    let total: f64 = masses.iter().sum();
    let mut sorted: Vec<f64> = points.iter().map(|x| wrap(*x)).collect();
    sorted.sort_by(f64::total_cmp);
    let np = sorted.len() as f64;
    let nx = masses.len();
    // cell i covers [i h - h/2, i h + h/2); shift the origin to -h/2 so cells tile [0, 1)
    let shift = 0.5 * h;
    let mut cum = vec![0.0; nx + 1];
    for i in 0..nx {
        cum[i + 1] = cum[i] + masses[i] / total;
    }
    let cdf_m = |y: f64| {
        let c = ((y / h).floor() as usize).min(nx - 1);
        cum[c] + (y - c as f64 * h) / h * (cum[c + 1] - cum[c])
    };
    let shifted: Vec<f64> = {
        let mut s: Vec<f64> = sorted.iter().map(|x| wrap(x + shift)).collect();
        s.sort_by(f64::total_cmp);
        s
    };
    let dy = 1.0 / samples as f64;
    let mut diff = Vec::with_capacity(samples);
    let mut idx = 0;
    for s in 0..samples {
        let y = (s as f64 + 0.5) * dy;
        while idx < shifted.len() && shifted[idx] <= y {
            idx += 1;
        }
        diff.push(idx as f64 / np - cdf_m(y));
    }
    let mut med = diff.clone();
    med.sort_by(f64::total_cmp);
    let c = med[samples / 2];
    diff.iter().map(|v| (v - c).abs()).sum::<f64>() * dy
}

/// `W_1` between an empirical measure and the density slice `m`. In two
/// dimensions this is the larger of the two marginal distances, a lower
/// bound of the full distance.
pub fn wasserstein_to_density(points: &[Point], m: &[f64], grid: &SpaceTimeGrid) -> f64 {
    let h = grid.hx();
    if grid.dim() == 1 {
        let xs: Vec<f64> = points.iter().map(|p| p[0]).collect();
        return circle_w1(&xs, m, h);
    }
    let nx = grid.nx();
    let mut best: f64 = 0.0;
    for axis in 0..2 {
        let marginal: Vec<f64> = (0..nx)
            .map(|a| {
                (0..nx)
                    .map(|b| if axis == 0 { m[a * nx + b] } else { m[b * nx + a] })
                    .sum()
            })
            .collect();
        let xs: Vec<f64> = points.iter().map(|p| p[axis]).collect();
        best = best.max(circle_w1(&xs, &marginal, h));
    }
    best
}
