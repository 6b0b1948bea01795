//! Primal-dual hybrid gradient iteration on the discrete saddle point,
//! duality-gap certificate, and the maximal-subsolution post-solve.
//!
//! The dual problem is `min_phi sum K(Lambda phi) - <phi(0), m0>` with
//! `phi(T) = phi_T`, where `Lambda phi = (D_t phi, D phi^{k+1})` per time cell
//! (one-sided differences for the space part). The multipliers of the
//! splitting are exactly `(m, w)`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functionals::{
    continuity_forward, continuity_residual, eval_a, eval_b, hj_operator, prox_k_scalar,
    upwind_active_norm_sq, upwind_divergence_slice, upwind_dp, upwind_gradient,
    upwind_hamiltonian, DualState, PrimalState, ALPHA_LOC, PHI_LOC, W_LOC,
};
use crate::grid::{project_simplex, Field, GridDescriptor, SpaceTimeGrid};
use crate::model::{ExtReal, ProblemData};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iters: usize,
    pub step_safety: f64,
    pub seed: u64,
    /// Call the observer every this many iterations (0 disables).
    pub checkpoint_every: usize,
    /// Iterations between duality-gap evaluations.
    pub check_every: usize,
    /// Ratio `sigma / tau` of the dual and primal steps.
    pub step_ratio: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-5,
            max_iters: 50_000,
            step_safety: 0.95,
            seed: 0,
            checkpoint_every: 0,
            check_every: 20,
            step_ratio: 1.0,
        }
    }
}

impl SolverConfig {
    fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter(format!("tol must be positive, got {}", self.tol)));
        }
        if !(self.step_safety > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "step_safety must be positive, got {}",
                self.step_safety
            )));
        }
        if !(self.step_ratio > 0.0 && self.step_ratio.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "step_ratio must be positive, got {}",
                self.step_ratio
            )));
        }
        if self.check_every == 0 {
            return Err(Error::InvalidParameter("check_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// Apply `Lambda` to a node field, result laid out per time cell as
/// `[a | b+ per axis | b- per axis]`.
fn apply_lambda(grid: &SpaceTimeGrid, phi: &[f64]) -> Vec<f64> {
    let n = grid.n_space();
    let d = grid.dim();
    let stride = (1 + 2 * d) * n;
    let inv_ht = 1.0 / grid.ht();
    let mut out = vec![0.0; grid.nt() * stride];
    out.par_chunks_mut(stride).enumerate().for_each(|(k, dst)| {
        let now = &phi[k * n..(k + 1) * n];
        let next = &phi[(k + 1) * n..(k + 2) * n];
        let mut b = [0.0; 4];
        for i in 0..n {
            dst[i] = (next[i] - now[i]) * inv_ht;
            upwind_gradient(grid, next, i, &mut b[..2 * d]);
            for (c, v) in b[..2 * d].iter().enumerate() {
                dst[(1 + c) * n + i] = *v;
            }
        }
    });
    out
}

fn apply_lambda_adjoint(grid: &SpaceTimeGrid, y: &[f64]) -> Vec<f64> {
    let n = grid.n_space();
    let d = grid.dim();
    let stride = (1 + 2 * d) * n;
    let inv_ht = 1.0 / grid.ht();
    let inv_h = 1.0 / grid.hx();
    let nt = grid.nt();
    let mut out = vec![0.0; (nt + 1) * n];
    out.par_chunks_mut(n).enumerate().for_each(|(j, dst)| {
        for (i, o) in dst.iter_mut().enumerate() {
            let before = if j > 0 { y[(j - 1) * stride + i] } else { 0.0 };
            let after = if j < nt { y[j * stride + i] } else { 0.0 };
            let mut v = (before - after) * inv_ht;
            if j > 0 {
                let cell = &y[(j - 1) * stride..j * stride];
                for a in 0..d {
                    let bp = &cell[(1 + a) * n..(2 + a) * n];
                    let bm = &cell[(1 + d + a) * n..(2 + d + a) * n];
                    v += (bp[grid.minus(a, i)] - bp[i]) * inv_h;
                    v += (bm[i] - bm[grid.plus(a, i)]) * inv_h;
                }
            }
            *o = v;
        }
    });
    out
}

/// Largest singular value of `Lambda` by power iteration on `Lambda* Lambda`
/// (unweighted, all time nodes free).
pub fn estimate_operator_norm(grid: &SpaceTimeGrid, seed: u64) -> f64 {
    let len = (grid.nt() + 1) * grid.n_space();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let normalize = |v: &mut Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
    };
    normalize(&mut v);
    let mut lambda = 0.0;
    for _ in 0..5000 {
        let mut next = apply_lambda_adjoint(grid, &apply_lambda(grid, &v));
        let est = next.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
        normalize(&mut next);
        v = next;
        if lambda > 0.0 && ((est - lambda) / est).abs() < 1e-7 {
            lambda = est;
            break;
        }
        lambda = est;
    }
    lambda.sqrt()
}

/// Iterate of the primal-dual scheme.
#[derive(Clone, Debug)]
pub struct SaddleState {
    pub phi: Field,
    pub phi_bar: Field,
    /// Density multiplier on time cells.
    pub m: Field,
    pub w: Field,
    pub sigma: f64,
    pub tau: f64,
    pub operator_norm: f64,
    pub iteration: usize,
}

impl SaddleState {
    /// `phi = phi_T`, `m = m0`, `w = 0`; steps with `sigma tau |Lambda|^2 = safety^2`.
    pub fn initial(data: &ProblemData, cfg: &SolverConfig) -> Self {
        let grid = &data.grid;
        let norm = estimate_operator_norm(grid, cfg.seed);
        let dual = DualState::from_terminal(data);
        let mut m = Field::zeros(grid, ALPHA_LOC, 1);
        for k in 0..grid.nt() {
            m.slice_mut(k).copy_from_slice(data.m0.values());
        }
        let root = cfg.step_ratio.sqrt();
        Self {
            phi_bar: dual.phi.clone(),
            phi: dual.phi,
            m,
            w: Field::zeros(grid, W_LOC, 2 * grid.dim()),
            sigma: cfg.step_safety * root / norm,
            tau: cfg.step_safety / (norm * root),
            operator_norm: norm,
            iteration: 0,
        }
    }

    fn is_finite(&self) -> bool {
        self.phi.data().iter().all(|v| v.is_finite())
            && self.m.data().iter().all(|v| v.is_finite())
            && self.w.data().iter().all(|v| v.is_finite())
    }
}

/// One iteration: multiplier update through the prox of `K`, explicit
/// `phi` descent, terminal slice kept at `phi_T`, over-relaxation.
pub fn pd_step(state: &mut SaddleState, data: &ProblemData) -> Result<()> {
    let grid = &data.grid;
    let n = grid.n_space();
    let d = grid.dim();
    let nt = grid.nt();
    let inv_ht = 1.0 / grid.ht();
    let sigma = state.sigma;
    let lambda = 1.0 / sigma;
    let h = &data.hamiltonian;
    let coupling = &data.coupling;
    let phi_bar = &state.phi_bar;

    let iteration = state.iteration;
    let failures: Vec<Option<(usize, usize, usize)>> = state
        .m
        .data_mut()
        .par_chunks_mut(n)
        .zip(state.w.data_mut().par_chunks_mut(2 * d * n))
        .enumerate()
        .map(|(k, (mk, wk))| {
            let now = phi_bar.slice(k);
            let next = phi_bar.slice(k + 1);
            let mut zb = [0.0; 4];
            for i in 0..n {
                let za = (next[i] - now[i]) * inv_ht - mk[i] * lambda;
                upwind_gradient(grid, next, i, &mut zb[..2 * d]);
                for c in 0..2 * d {
                    zb[c] -= wk[c * n + i] * lambda;
                }
                let t0 = upwind_active_norm_sq(&zb[..2 * d]).sqrt();
                if !(za.is_finite() && t0.is_finite()) {
                    return Some((k, i, 0));
                }
                let c = coupling.weight().at(i);
                let ell = h.potential().at(i);
                match prox_k_scalar(h, coupling, c, ell, za, t0, lambda) {
                    Ok(None) => {
                        mk[i] = 0.0;
                        for c in 0..2 * d {
                            wk[c * n + i] = 0.0;
                        }
                    }
                    Ok(Some(sol)) => {
                        mk[i] = sol.mu;
                        let factor = if sol.t > 0.0 {
                            sol.mu * sol.t.powf(h.r() - 2.0) * sol.t / t0
                        } else {
                            0.0
                        };
                        for a in 0..d {
                            wk[a * n + i] = factor * (-zb[a]).max(0.0);
                            wk[(d + a) * n + i] = -factor * zb[d + a].max(0.0);
                        }
                    }
                    Err(iterations) => return Some((k, i, iterations)),
                }
            }
            None
        })
        .collect();
    if let Some((slice, node, iterations)) = failures.into_iter().flatten().next() {
        if iterations == 0 {
            return Err(Error::Divergence {
                iteration,
                gap: f64::NAN,
                best: f64::NAN,
            });
        }
        return Err(Error::ProxNonConvergence {
            slice,
            node,
            iterations,
        });
    }

    let tau = state.tau;
    let m = &state.m;
    let w = &state.w;
    let m0 = data.m0.values();
    state
        .phi
        .data_mut()
        .par_chunks_mut(n)
        .zip(state.phi_bar.data_mut().par_chunks_mut(n))
        .enumerate()
        .take(nt)
        .for_each(|(j, (pj, bj))| {
            let mut div = vec![0.0; n];
            if j > 0 {
                upwind_divergence_slice(grid, w.slice(j - 1), &mut div);
            }
            let after = m.slice(j);
            for i in 0..n {
                let before = if j > 0 { m.get(j - 1, 0, i) } else { m0[i] };
                let step = tau * ((before - after[i]) * inv_ht - div[i]);
                pj[i] += step;
                bj[i] = pj[i] + step;
            }
        });
    state.iteration += 1;
    Ok(())
}

/// Value of the gap at the current iterate: `A(phi)` with the smallest
/// admissible `alpha`, plus `B` on the density generated by `w`.
#[derive(Clone, Copy, Debug)]
pub struct GapEvaluation {
    pub gap: ExtReal,
    pub dual_value: f64,
    pub primal_value: ExtReal,
    /// `sum |w + m dH^/db(D phi)| / sum m` on the same pair.
    pub momentum_residual: f64,
}

pub fn evaluate_gap(state: &SaddleState, data: &ProblemData) -> Result<GapEvaluation> {
    let grid = &data.grid;
    let alpha = extract_alpha_from_phi(&state.phi, data)?;
    let dual = DualState {
        phi: state.phi.clone(),
        alpha,
    };
    let a = eval_a(&dual, data)?;
    let m = continuity_forward(grid, data.m0.values(), &state.w)?;
    let primal = PrimalState {
        m,
        w: state.w.clone(),
    };
    let b = eval_b(&primal, data)?;
    Ok(GapEvaluation {
        gap: b + ExtReal::Finite(a),
        dual_value: a,
        primal_value: b,
        momentum_residual: momentum_residual(&primal, &state.phi, data)?,
    })
}

/// `(-D_t phi + H^(x, D phi))^+` cellwise.
pub fn extract_alpha_from_phi(phi: &Field, data: &ProblemData) -> Result<Field> {
    let mut alpha = hj_operator(phi, data)?;
    alpha.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(alpha)
}

#[derive(Clone, Debug)]
pub struct AlphaExtraction {
    pub alpha: Field,
    /// `(sum h_t h^d |alpha - f(m)|^p)^{1/p}` over time cells.
    pub discrepancy: f64,
}

/// `alpha = (-D_t phi + H^)^+`, cross-checked against `f(x, m)`.
pub fn extract_alpha(
    dual: &DualState,
    primal: &PrimalState,
    data: &ProblemData,
) -> Result<AlphaExtraction> {
    let grid = &data.grid;
    let alpha = extract_alpha_from_phi(&dual.phi, data)?;
    let p = data.coupling.p();
    let n = grid.n_space();
    let mut acc = 0.0;
    for k in 0..grid.nt() {
        for i in 0..n {
            let diff = alpha.get(k, 0, i) - data.coupling.f(i, primal.m.get(k, 0, i));
            acc += diff.abs().powf(p);
        }
    }
    let discrepancy = (acc * grid.ht() * grid.cell_volume()).powf(1.0 / p);
    Ok(AlphaExtraction { alpha, discrepancy })
}

/// Largest explicit-sweep rate `h_t / h_x * sum_c |dH^/db_c|` over one slice.
fn sweep_rate(grid: &SpaceTimeGrid, data: &ProblemData, phi: &[f64]) -> f64 {
    let d = grid.dim();
    let mut b = [0.0; 4];
    let mut g = [0.0; 4];
    let mut worst = 0.0_f64;
    for i in 0..grid.n_space() {
        upwind_gradient(grid, phi, i, &mut b[..2 * d]);
        upwind_dp(&data.hamiltonian, &b[..2 * d], &mut g[..2 * d]);
        let s: f64 = g[..2 * d].iter().map(|v| v.abs()).sum();
        worst = worst.max(s);
    }
    worst * grid.ht() / grid.hx()
}

/// Largest `phi` with `phi(T) = phi_T` and `-D_t phi + H^ <= alpha`, computed
/// by the backward sweep `phi^k = phi^{k+1} - h_t (H^(D phi^{k+1}) - alpha_k)`.
/// The sweep is monotone while the rate stays at most 1.
pub fn maximal_subsolution(alpha: &Field, data: &ProblemData) -> Result<Field> {
    let grid = &data.grid;
    if alpha.location() != ALPHA_LOC || alpha.slices() != grid.nt() || alpha.n_space() != grid.n_space()
    {
        return Err(Error::Staggering {
            expected: ALPHA_LOC,
            found: alpha.location(),
        });
    }
    let n = grid.n_space();
    let d = grid.dim();
    let ht = grid.ht();
    let nt = grid.nt();
    let mut phi = Field::zeros(grid, PHI_LOC, 1);
    phi.slice_mut(nt).copy_from_slice(data.phi_terminal.values());
    for k in (0..nt).rev() {
        let rate = sweep_rate(grid, data, phi.slice(k + 1));
        if rate > 1.0 {
            let suggested_nt = (nt as f64 * rate * 1.1).ceil() as usize + 1;
            return Err(Error::Cfl {
                rate,
                slice: k,
                suggested_nt,
            });
        }
        let (lo, hi) = phi.data_mut().split_at_mut((k + 1) * n);
        let next = &hi[..n];
        let dst = &mut lo[k * n..];
        let a = alpha.slice(k);
        dst.par_iter_mut().enumerate().for_each(|(i, v)| {
            let mut b = [0.0; 4];
            upwind_gradient(grid, next, i, &mut b[..2 * d]);
            *v = next[i] - ht * (upwind_hamiltonian(&data.hamiltonian, i, &b[..2 * d]) - a[i]);
        });
    }
    Ok(phi)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapSample {
    pub iteration: usize,
    /// `None` encodes `+inf`.
    pub gap: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SolveReport {
    pub converged: bool,
    pub iterations: usize,
    pub duality_gap: f64,
    pub relative_gap: f64,
    pub raw_gap: Option<f64>,
    pub primal_value: f64,
    pub dual_value: f64,
    pub continuity_residual: f64,
    pub constraint_residual: f64,
    pub energy_identity_residual: f64,
    pub momentum_residual: f64,
    pub alpha_discrepancy: f64,
    /// `max(phi_raw - phi_delivered)`; nonpositive when the delivered potential dominates.
    pub subsolution_excess: f64,
    pub density_projected: bool,
    pub operator_norm: f64,
    pub sigma: f64,
    pub tau: f64,
    pub tol: f64,
    pub gap_history: Vec<GapSample>,
    pub grid: GridDescriptor,
    #[serde(skip)]
    pub wall_time: f64,
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub primal: PrimalState,
    pub dual: DualState,
    /// Potential before the maximal-subsolution recomputation.
    pub raw_phi: Field,
    pub report: SolveReport,
}

/// Consecutive growing gap evaluations above the divergence threshold.
pub const DIVERGENCE_STRIKES: usize = 3;

pub fn solve(data: &ProblemData, cfg: &SolverConfig) -> Result<Solution> {
    solve_with_observer(data, cfg, |_| Ok(()))
}

/// Same as [`solve`]; `observer` sees the iterate every `checkpoint_every`
/// iterations.
pub fn solve_with_observer(
    data: &ProblemData,
    cfg: &SolverConfig,
    mut observer: impl FnMut(&SaddleState) -> Result<()>,
) -> Result<Solution> {
    cfg.validate()?;
    let start = Instant::now();
    let mut state = SaddleState::initial(data, cfg);
    let mut history = Vec::new();
    let mut best = f64::INFINITY;
    let mut strikes = 0;
    let mut previous = f64::INFINITY;
    let mut converged = false;
    let mut last = evaluate_gap(&state, data)?;
    // PDHG gaps oscillate by orders of magnitude on the way down; only growth
    // past both 10x the best gap and the starting gap counts.
    let initial_gap = last.gap.finite().unwrap_or(0.0);
    while state.iteration < cfg.max_iters {
        pd_step(&mut state, data)?;
        if cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every == 0 {
            observer(&state)?;
        }
        if state.iteration % cfg.check_every != 0 && state.iteration != cfg.max_iters {
            continue;
        }
        if !state.is_finite() {
            return Err(Error::Divergence {
                iteration: state.iteration,
                gap: f64::NAN,
                best,
            });
        }
        last = evaluate_gap(&state, data)?;
        history.push(GapSample {
            iteration: state.iteration,
            gap: last.gap.finite(),
        });
        match last.gap {
            ExtReal::Finite(g) => {
                let scale = 1.0 + last.primal_value.finite().unwrap_or(0.0).abs();
                if g <= cfg.tol * scale && last.momentum_residual <= cfg.tol {
                    converged = true;
                    break;
                }
                if g > (10.0 * best).max(initial_gap) && g > previous {
                    strikes += 1;
                } else {
                    strikes = 0;
                }
                best = best.min(g.max(0.0));
                previous = g;
            }
            // the flux can transiently drive the generated density
            // negative; the iterate itself is still finite
            ExtReal::PosInf => previous = f64::INFINITY,
        }
        if strikes >= DIVERGENCE_STRIKES {
            return Err(Error::Divergence {
                iteration: state.iteration,
                gap: last.gap.finite().unwrap_or(f64::INFINITY),
                best,
            });
        }
    }
    finish(data, cfg, state, history, converged, last, start)
}

fn finish(
    data: &ProblemData,
    cfg: &SolverConfig,
    state: SaddleState,
    history: Vec<GapSample>,
    converged: bool,
    last: GapEvaluation,
    start: Instant,
) -> Result<Solution> {
    let grid = &data.grid;
    let mut m = continuity_forward(grid, data.m0.values(), &state.w)?;
    let density_projected = m.data().iter().any(|v| *v < 0.0);
    if density_projected {
        for k in 0..m.slices() {
            let projected = project_simplex(grid, m.slice(k));
            m.slice_mut(k).copy_from_slice(&projected);
        }
    }
    let primal = PrimalState::new(grid, m, state.w.clone())?;
    let alpha = extract_alpha_from_phi(&state.phi, data)?;
    let phi = maximal_subsolution(&alpha, data)?;
    let dual = DualState::new(grid, phi, alpha)?;

    let dual_value = eval_a(&dual, data)?;
    let primal_value = eval_b(&primal, data)?;
    let (duality_gap, primal_f) = match primal_value {
        ExtReal::Finite(b) => (dual_value + b, b),
        ExtReal::PosInf => (f64::INFINITY, f64::INFINITY),
    };
    let extraction = extract_alpha(&dual, &primal, data)?;
    let energy = crate::checker::energy_identity(&primal.m, &dual.phi, data)?;
    let subsolution_excess = state
        .phi
        .data()
        .iter()
        .zip(dual.phi.data())
        .fold(f64::NEG_INFINITY, |acc, (raw, sel)| acc.max(raw - sel));
    let report = SolveReport {
        converged,
        iterations: state.iteration,
        duality_gap,
        relative_gap: duality_gap / (1.0 + primal_f.abs()),
        raw_gap: last.gap.finite(),
        primal_value: primal_f,
        dual_value,
        continuity_residual: continuity_residual(&primal, data)?,
        constraint_residual: crate::functionals::constraint_residual(&dual, data)?,
        energy_identity_residual: energy.defect.abs(),
        momentum_residual: momentum_residual(&primal, &dual.phi, data)?,
        alpha_discrepancy: extraction.discrepancy,
        subsolution_excess,
        density_projected,
        operator_norm: state.operator_norm,
        sigma: state.sigma,
        tau: state.tau,
        tol: cfg.tol,
        gap_history: history,
        grid: grid.descriptor(),
        wall_time: start.elapsed().as_secs_f64(),
    };
    Ok(Solution {
        primal,
        dual,
        raw_phi: state.phi,
        report,
    })
}

/// `sum |w + m dH^/db(D phi^{k+1})| / sum m` over time cells.
pub fn momentum_residual(primal: &PrimalState, phi: &Field, data: &ProblemData) -> Result<f64> {
    let grid = &data.grid;
    let n = grid.n_space();
    let d = grid.dim();
    let mut num = 0.0;
    let mut den = 0.0;
    let mut b = [0.0; 4];
    let mut g = [0.0; 4];
    for k in 0..grid.nt() {
        let next = phi.slice(k + 1);
        for i in 0..n {
            let m = primal.m.get(k, 0, i);
            upwind_gradient(grid, next, i, &mut b[..2 * d]);
            upwind_dp(&data.hamiltonian, &b[..2 * d], &mut g[..2 * d]);
            for c in 0..2 * d {
                num += (primal.w.get(k, c, i) + m * g[c]).abs();
            }
            den += m.abs();
        }
    }
    Ok(if den > 0.0 { num / den } else { num })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::SpatialField;
    use approx::assert_abs_diff_eq;

    fn homogeneous(nx: usize, nt: usize) -> ProblemData {
        ProblemData::homogeneous(SpaceTimeGrid::new(1, nx, nt, 1.0).unwrap())
    }

    #[test]
    fn lambda_adjoint_matches() {
        let g = SpaceTimeGrid::new(2, 4, 3, 1.0).unwrap();
        let len = (g.nt() + 1) * g.n_space();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let phi: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..g.nt() * 5 * g.n_space()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lhs: f64 = apply_lambda(&g, &phi).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = apply_lambda_adjoint(&g, &y).iter().zip(&phi).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn exact_solution_is_a_fixed_point() {
        let data = homogeneous(8, 8);
        let cfg = SolverConfig::default();
        let mut st = SaddleState::initial(&data, &cfg);
        st.phi = Field::from_fn(&data.grid, PHI_LOC, |t, _| 1.0 - t);
        st.phi_bar = st.phi.clone();
        let before = st.clone();
        pd_step(&mut st, &data).unwrap();
        assert!(st.phi.max_abs_diff(&before.phi) < 1e-12);
        assert!(st.m.max_abs_diff(&before.m) < 1e-12);
        assert!(st.w.max_abs() < 1e-12);
    }

    #[test]
    fn maximal_subsolution_examples() {
        let data = homogeneous(16, 16);
        let g = &data.grid;
        let one = Field::from_fn(g, ALPHA_LOC, |_, _| 1.0);
        let phi = maximal_subsolution(&one, &data).unwrap();
        let exact = Field::from_fn(g, PHI_LOC, |t, _| 1.0 - t);
        assert!(phi.max_abs_diff(&exact) < 1e-12);
        let zero = Field::zeros(g, ALPHA_LOC, 1);
        assert_eq!(maximal_subsolution(&zero, &data).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn maximal_subsolution_reports_cfl() {
        let g = SpaceTimeGrid::new(1, 32, 4, 1.0).unwrap();
        let data = ProblemData::homogeneous(g.clone())
            .with_terminal(SpatialField::from_fn(&g, |p| (2.0 * std::f64::consts::PI * p[0]).sin()));
        let zero = Field::zeros(&g, ALPHA_LOC, 1);
        match maximal_subsolution(&zero, &data) {
            Err(Error::Cfl { suggested_nt, rate, .. }) => {
                assert!(rate > 1.0);
                assert!(suggested_nt > 4);
            }
            other => panic!("expected CFL error, got {other:?}"),
        }
    }

    #[test]
    fn homogeneous_small_solve() {
        let data = homogeneous(8, 8);
        let sol = solve(&data, &SolverConfig::default()).unwrap();
        assert!(sol.report.converged, "{:?}", sol.report);
        assert!(sol.report.duality_gap >= -1e-10);
        let exact = Field::from_fn(&data.grid, PHI_LOC, |t, _| 1.0 - t);
        assert!(sol.dual.phi.max_abs_diff(&exact) < 1e-3);
        for v in sol.primal.m.data() {
            assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-3);
        }
    }

    #[test]
    fn diverging_steps_are_detected() {
        let data = homogeneous(8, 8).with_initial(SpatialField::from_fn(
            &SpaceTimeGrid::new(1, 8, 8, 1.0).unwrap(),
            |p| 1.0 + 0.5 * (2.0 * std::f64::consts::PI * p[0]).cos(),
        ));
        let cfg = SolverConfig {
            step_safety: 20.0,
            ..SolverConfig::default()
        };
        assert!(matches!(solve(&data, &cfg), Err(Error::Divergence { .. })));
    }
}
