//! Residual checks of a computed pair `(m, phi)`: the four conditions of a
//! weak solution, the supersolution selection, comparison, stability, the
//! Hölder-in-time bound and the time-space elliptic operator.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functionals::{
    hj_operator, upwind_active_norm_sq, upwind_divergence_slice, upwind_dp, upwind_gradient,
    ALPHA_LOC, M_LOC, PHI_LOC,
};
use crate::grid::{Field, GridDescriptor, SpaceTimeGrid, SpatialField};
use crate::model::ProblemData;
use crate::solver::{solve, Solution, SolverConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    /// Cells with `m <= m_cut_rel * max(m)` are excluded from the a.e. residual.
    pub m_cut_rel: f64,
    /// Tolerance the solution was computed with.
    pub solver_tol: f64,
    /// `res_iii <= continuity_factor * solver_tol`.
    pub continuity_factor: f64,
    pub energy_rel: f64,
    pub condsup: f64,
    pub hj_ae: f64,
    /// Cells with `-p_t + H <= delta_reg` use the `G = 0` convention.
    pub delta_reg: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            m_cut_rel: 1e-6,
            solver_tol: 1e-5,
            continuity_factor: 10.0,
            energy_rel: 1e-2,
            condsup: 1e-6,
            hj_ae: 1e-2,
            delta_reg: 1e-10,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Integrability {
    /// `sum |D phi|^r`.
    pub gradient_r: f64,
    /// `sum m |D_pH(D phi)|`.
    pub flux: f64,
    /// `sum |m (D_t phi - <D phi, D_pH>)|`.
    pub energy: f64,
    pub finite: bool,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct EnergyIdentity {
    pub lhs: f64,
    pub rhs: f64,
    pub defect: f64,
    pub relative: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct WeakSolutionReport {
    pub res_i: Integrability,
    pub res_ii_ae: f64,
    pub res_ii_distrib: f64,
    pub res_iii: f64,
    pub res_iv: EnergyIdentity,
    pub condsup_residual: f64,
    pub m_cut: f64,
    pub test_functions: usize,
    pub thresholds: Thresholds,
    pub grid: GridDescriptor,
    pub failures: Vec<String>,
    pub passed: bool,
}

/// Separable nonnegative test function `psi(t, x) = time(t) * space(x)`.
#[derive(Clone, Debug)]
struct TestFunction {
    space: Vec<f64>,
    /// `(center, radius)`; `None` means constant `1` in time.
    time: Option<(f64, f64)>,
    w1_norm: f64,
}

impl TestFunction {
    fn time_value(&self, t: f64) -> f64 {
        match self.time {
            None => 1.0,
            Some((c, rho)) => bump_1d((t - c).abs(), rho),
        }
    }
}

#[inline]
fn bump_1d(dist: f64, rho: f64) -> f64 {
    if dist >= rho {
        0.0
    } else {
        let c = (PI * dist / (2.0 * rho)).cos();
        c * c
    }
}

const BUMP_RADII: [f64; 3] = [0.25, 0.125, 0.0625];

/// Tensor cosine bumps at three scales, centred on a lattice with the radius
/// as spacing; scales below two cells are skipped.
fn bump_family(grid: &SpaceTimeGrid, with_time_bumps: bool, with_flat: bool) -> Vec<TestFunction> {
    let d = grid.dim();
    let n = grid.n_space();
    let horizon = grid.horizon();
    let mut out = Vec::new();
    if with_flat {
        out.push(TestFunction {
            space: vec![1.0; n],
            time: None,
            w1_norm: 1.0,
        });
    }
    for rho in BUMP_RADII {
        if rho < 2.0 * grid.hx() {
            continue;
        }
        let per_axis = (1.0 / rho).round() as usize;
        let centres: Vec<f64> = (0..per_axis).map(|k| k as f64 * rho).collect();
        let rho_t = rho * horizon;
        let time_parts: Vec<Option<(f64, f64)>> = if with_time_bumps {
            let count = (horizon / rho_t).round() as usize;
            (1..count).map(|k| Some((k as f64 * rho_t, rho_t))).collect()
        } else {
            vec![None]
        };
        let slope = PI / (2.0 * rho);
        let space_centres: Vec<[f64; 2]> = match d {
            1 => centres.iter().map(|c| [*c, 0.0]).collect(),
            _ => centres
                .iter()
                .flat_map(|a| centres.iter().map(move |b| [*a, *b]))
                .collect(),
        };
        for c in &space_centres {
            let space: Vec<f64> = (0..n)
                .map(|i| {
                    let x = grid.position(i);
                    (0..d)
                        .map(|a| bump_1d(crate::grid::torus_delta(x[a] - c[a]).abs(), rho))
                        .product()
                })
                .collect();
            for tp in &time_parts {
                let time_slope = if tp.is_some() { PI / (2.0 * rho_t) } else { 0.0 };
                out.push(TestFunction {
                    space: space.clone(),
                    time: *tp,
                    w1_norm: 1.0 + slope * (d as f64).sqrt() + time_slope,
                });
            }
        }
    }
    out
}

fn require(f: &Field, grid: &SpaceTimeGrid, loc: crate::grid::Location) -> Result<()> {
    if f.location() != loc {
        return Err(Error::Staggering {
            expected: loc,
            found: f.location(),
        });
    }
    if f.n_space() != grid.n_space() || f.slices() != grid.slices(loc.time) {
        return Err(Error::Shape(format!(
            "field has {} slices x {} nodes, grid expects {} x {}",
            f.slices(),
            f.n_space(),
            grid.slices(loc.time),
            grid.n_space()
        )));
    }
    Ok(())
}

/// Momentum `-m dH^/db(D phi^{k+1})` carried by the potential.
fn potential_momentum(m: &Field, phi: &Field, data: &ProblemData) -> Field {
    let grid = &data.grid;
    let n = grid.n_space();
    let d = grid.dim();
    let mut w = Field::zeros(grid, crate::functionals::W_LOC, 2 * d);
    w.data_mut()
        .par_chunks_mut(2 * d * n)
        .enumerate()
        .for_each(|(k, dst)| {
            let next = phi.slice(k + 1);
            let mut b = [0.0; 4];
            let mut g = [0.0; 4];
            for i in 0..n {
                upwind_gradient(grid, next, i, &mut b[..2 * d]);
                upwind_dp(&data.hamiltonian, &b[..2 * d], &mut g[..2 * d]);
                let mk = m.get(k, 0, i);
                for c in 0..2 * d {
                    dst[c * n + i] = -mk * g[c];
                }
            }
        });
    w
}

/// Both sides of `sum m (D_t phi - <b, dH^/db>) = sum m(T) phi_T - m0 phi(0)`.
pub fn energy_identity(m: &Field, phi: &Field, data: &ProblemData) -> Result<EnergyIdentity> {
    let grid = &data.grid;
    require(m, grid, M_LOC)?;
    require(phi, grid, PHI_LOC)?;
    let n = grid.n_space();
    let d = grid.dim();
    let inv_ht = 1.0 / grid.ht();
    let partial: Vec<f64> = (0..grid.nt())
        .into_par_iter()
        .map(|k| {
            let now = phi.slice(k);
            let next = phi.slice(k + 1);
            let mut b = [0.0; 4];
            let mut g = [0.0; 4];
            let mut acc = 0.0;
            for i in 0..n {
                upwind_gradient(grid, next, i, &mut b[..2 * d]);
                upwind_dp(&data.hamiltonian, &b[..2 * d], &mut g[..2 * d]);
                let inner: f64 = b[..2 * d].iter().zip(&g[..2 * d]).map(|(x, y)| x * y).sum();
                acc += m.get(k, 0, i) * ((next[i] - now[i]) * inv_ht - inner);
            }
            acc
        })
        .collect();
    let lhs = partial.iter().sum::<f64>() * grid.ht() * grid.cell_volume();
    let rhs = (0..n)
        .map(|i| m.get(grid.nt(), 0, i) * data.phi_terminal.at(i) - data.m0.at(i) * phi.get(0, 0, i))
        .sum::<f64>()
        * grid.cell_volume();
    let defect = lhs - rhs;
    Ok(EnergyIdentity {
        lhs,
        rhs,
        defect,
        relative: defect.abs() / (1.0 + rhs.abs()),
    })
}

/// Largest negative part of `-D_t phi + H^(x, D phi)`.
pub fn check_condsup(phi: &Field, data: &ProblemData) -> Result<f64> {
    let hj = hj_operator(phi, data)?;
    Ok(hj.data().iter().fold(0.0_f64, |acc, v| acc.max(-v)))
}

pub fn check_weak_solution(
    m: &Field,
    phi: &Field,
    data: &ProblemData,
    thresholds: &Thresholds,
) -> Result<WeakSolutionReport> {
    let grid = &data.grid;
    require(m, grid, M_LOC)?;
    require(phi, grid, PHI_LOC)?;
    let n = grid.n_space();
    let d = grid.dim();
    let nt = grid.nt();
    let ht = grid.ht();
    let vol = grid.cell_volume();
    let hj = hj_operator(phi, data)?;
    let r = data.hamiltonian.r();

    // (i)
    let mut gradient_r = 0.0;
    let mut flux = 0.0;
    let mut b = [0.0; 4];
    let mut g = [0.0; 4];
    for k in 0..nt {
        let next = phi.slice(k + 1);
        for i in 0..n {
            upwind_gradient(grid, next, i, &mut b[..2 * d]);
            upwind_dp(&data.hamiltonian, &b[..2 * d], &mut g[..2 * d]);
            gradient_r += upwind_active_norm_sq(&b[..2 * d]).sqrt().powf(r);
            flux += m.get(k, 0, i).abs() * g[..2 * d].iter().map(|v| v * v).sum::<f64>().sqrt();
        }
    }
    gradient_r *= ht * vol;
    flux *= ht * vol;
    let energy_abs = {
        let inv_ht = 1.0 / ht;
        let mut acc = 0.0;
        for k in 0..nt {
            let (now, next) = (phi.slice(k), phi.slice(k + 1));
            for i in 0..n {
                upwind_gradient(grid, next, i, &mut b[..2 * d]);
                upwind_dp(&data.hamiltonian, &b[..2 * d], &mut g[..2 * d]);
                let inner: f64 = b[..2 * d].iter().zip(&g[..2 * d]).map(|(x, y)| x * y).sum();
                acc += (m.get(k, 0, i) * ((next[i] - now[i]) * inv_ht - inner)).abs();
            }
        }
        acc * ht * vol
    };
    let res_i = Integrability {
        gradient_r,
        flux,
        energy: energy_abs,
        finite: gradient_r.is_finite() && flux.is_finite() && energy_abs.is_finite(),
    };

    // (ii) a.e. on {m > m_cut}
    let m_max = (0..nt)
        .flat_map(|k| m.slice(k).iter().copied())
        .fold(0.0_f64, f64::max);
    let m_cut = thresholds.m_cut_rel * m_max;
    let mut res_ii_ae = 0.0;
    for k in 0..nt {
        for i in 0..n {
            let mk = m.get(k, 0, i);
            if mk > m_cut {
                res_ii_ae += (hj.get(k, 0, i) - data.coupling.f(i, mk)).abs();
            }
        }
    }
    res_ii_ae *= ht * vol;

    // (ii) distributional inequality
    let excess: Vec<f64> = (0..nt * n)
        .map(|idx| {
            let (k, i) = (idx / n, idx % n);
            hj.get(k, 0, i) - data.coupling.f(i, m.get(k, 0, i).max(0.0))
        })
        .collect();
    let distrib_family = bump_family(grid, true, false);
    let res_ii_distrib = distrib_family
        .par_iter()
        .map(|tf| {
            let mut num = 0.0;
            let mut den = 0.0;
            for k in 0..nt {
                let tv = tf.time_value((k as f64 + 0.5) * ht);
                if tv == 0.0 {
                    continue;
                }
                for i in 0..n {
                    let psi = tv * tf.space[i];
                    num += psi * excess[k * n + i];
                    den += psi;
                }
            }
            if den > 0.0 {
                (num / den).max(0.0)
            } else {
                0.0
            }
        })
        .collect::<Vec<f64>>()
        .into_iter()
        .fold(0.0_f64, f64::max);

    // (iii) weak continuity equation with w = -m D_pH(D phi)
    let w = potential_momentum(m, phi, data);
    let mut defect = Field::zeros(grid, ALPHA_LOC, 1);
    defect
        .data_mut()
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(k, dst)| {
            let mut div = vec![0.0; n];
            upwind_divergence_slice(grid, w.slice(k), &mut div);
            for i in 0..n {
                dst[i] = m.get(k + 1, 0, i) - m.get(k, 0, i) + ht * div[i];
            }
        });
    let initial: Vec<f64> = (0..n).map(|i| m.get(0, 0, i) - data.m0.at(i)).collect();
    let mut cont_family = bump_family(grid, false, true);
    cont_family.extend(bump_family(grid, true, false));
    let res_iii = cont_family
        .par_iter()
        .map(|tf| {
            let mut acc = 0.0;
            for k in 0..nt {
                let tv = tf.time_value((k + 1) as f64 * ht);
                if tv == 0.0 {
                    continue;
                }
                for i in 0..n {
                    acc += tv * tf.space[i] * defect.get(k, 0, i);
                }
            }
            let t0 = tf.time_value(0.0);
            for i in 0..n {
                acc += t0 * tf.space[i] * initial[i];
            }
            (acc * vol).abs() / tf.w1_norm
        })
        .collect::<Vec<f64>>()
        .into_iter()
        .fold(0.0_f64, f64::max);

    let res_iv = energy_identity(m, phi, data)?;
    let condsup_residual = hj.data().iter().fold(0.0_f64, |acc, v| acc.max(-v));

    let mut failures = Vec::new();
    if !res_i.finite {
        failures.push("res_i: non-finite integral".to_string());
    }
    if res_ii_ae > thresholds.hj_ae {
        failures.push(format!("res_ii_ae = {res_ii_ae:.3e} > {:.1e}", thresholds.hj_ae));
    }
    let cont_bound = thresholds.continuity_factor * thresholds.solver_tol;
    if res_iii > cont_bound {
        failures.push(format!("res_iii = {res_iii:.3e} > {cont_bound:.1e}"));
    }
    if res_iv.relative > thresholds.energy_rel {
        failures.push(format!(
            "res_iv relative defect = {:.3e} > {:.1e}",
            res_iv.relative, thresholds.energy_rel
        ));
    }
    if condsup_residual > thresholds.condsup {
        failures.push(format!(
            "condsup_residual = {condsup_residual:.3e} > {:.1e}",
            thresholds.condsup
        ));
    }
    Ok(WeakSolutionReport {
        res_i,
        res_ii_ae,
        res_ii_distrib,
        res_iii,
        res_iv,
        condsup_residual,
        m_cut,
        test_functions: distrib_family.len() + cont_family.len(),
        thresholds: thresholds.clone(),
        grid: grid.descriptor(),
        passed: failures.is_empty(),
        failures,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ComparisonReport {
    pub ordered: bool,
    /// `max(phi1 - phi2)`.
    pub max_defect: f64,
    /// Mean of `phi2 - phi1` on the last time slice before `T`.
    pub mean_gap_near_terminal: f64,
    pub tolerance: f64,
}

/// Solve both problems and compare the delivered potentials.
pub fn comparison_test(
    data1: &ProblemData,
    data2: &ProblemData,
    cfg: &SolverConfig,
    tolerance: f64,
) -> Result<ComparisonReport> {
    if data1.grid != data2.grid {
        return Err(Error::Shape("comparison needs both problems on one grid".into()));
    }
    if let Some(i) = (0..data1.grid.n_space())
        .find(|&i| data1.phi_terminal.at(i) > data2.phi_terminal.at(i))
    {
        return Err(Error::InvalidParameter(format!(
            "terminal costs are not ordered at node {i}"
        )));
    }
    let s1 = solve(data1, cfg)?;
    let s2 = solve(data2, cfg)?;
    Ok(compare_solutions(&s1, &s2, &data1.grid, tolerance))
}

pub fn compare_solutions(
    s1: &Solution,
    s2: &Solution,
    grid: &SpaceTimeGrid,
    tolerance: f64,
) -> ComparisonReport {
    let max_defect = s1
        .dual
        .phi
        .data()
        .iter()
        .zip(s2.dual.phi.data())
        .fold(f64::NEG_INFINITY, |acc, (a, b)| acc.max(a - b));
    let k = grid.nt() - 1;
    let n = grid.n_space();
    let mean_gap_near_terminal = (0..n)
        .map(|i| s2.dual.phi.get(k, 0, i) - s1.dual.phi.get(k, 0, i))
        .sum::<f64>()
        / n as f64;
    ComparisonReport {
        ordered: max_defect <= tolerance,
        max_defect,
        mean_gap_near_terminal,
        tolerance,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    /// `phi_T + eps cos(2 pi x_1)`.
    Terminal,
    /// `m0 (1 + eps cos(2 pi x_1))`, renormalized.
    Initial,
}

pub fn perturb(data: &ProblemData, kind: Perturbation, eps: f64) -> ProblemData {
    let grid = &data.grid;
    let wave = |i: usize| (2.0 * PI * grid.position(i)[0]).cos();
    match kind {
        Perturbation::Terminal => {
            let vals = (0..grid.n_space())
                .map(|i| data.phi_terminal.at(i) + eps * wave(i))
                .collect();
            data.with_terminal(SpatialField::new(grid, vals).expect("same grid"))
        }
        Perturbation::Initial => {
            let raw: Vec<f64> = (0..grid.n_space())
                .map(|i| data.m0.at(i) * (1.0 + eps * wave(i)))
                .collect();
            let mass = crate::grid::mass(grid, &raw);
            let vals = raw.iter().map(|v| v / mass).collect();
            data.with_initial(SpatialField::new(grid, vals).expect("same grid"))
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StabilityRow {
    pub eps: f64,
    /// `||m_eps - m||_{L^q}` over the time cells.
    pub m_lq: f64,
    /// `||phi_eps - phi||_inf`.
    pub phi_inf: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct StabilityReport {
    pub kind: Perturbation,
    pub rows: Vec<StabilityRow>,
    pub m_strictly_decreasing: bool,
    pub phi_decreasing: bool,
}

pub fn stability_distance(base: &Solution, other: &Solution, data: &ProblemData, eps: f64) -> StabilityRow {
    let grid = &data.grid;
    let q = data.coupling.q();
    let n = grid.n_space();
    let mut acc = 0.0;
    for k in 0..grid.nt() {
        for i in 0..n {
            acc += (other.primal.m.get(k, 0, i) - base.primal.m.get(k, 0, i)).abs().powf(q);
        }
    }
    StabilityRow {
        eps,
        m_lq: (acc * grid.ht() * grid.cell_volume()).powf(1.0 / q),
        phi_inf: other.dual.phi.max_abs_diff(&base.dual.phi),
    }
}

pub fn stability_test(
    data: &ProblemData,
    kind: Perturbation,
    eps: &[f64],
    cfg: &SolverConfig,
) -> Result<StabilityReport> {
    let base = solve(data, cfg)?;
    let mut rows = Vec::with_capacity(eps.len());
    for &e in eps {
        let perturbed = perturb(data, kind, e);
        let sol = solve(&perturbed, cfg)?;
        rows.push(stability_distance(&base, &sol, data, e));
    }
    let m_strictly_decreasing = rows.windows(2).all(|w| w[1].m_lq < w[0].m_lq);
    let phi_decreasing = rows.windows(2).all(|w| w[1].phi_inf <= w[0].phi_inf);
    Ok(StabilityReport {
        kind,
        rows,
        m_strictly_decreasing,
        phi_decreasing,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct HolderReport {
    pub nu: f64,
    pub alpha_norm: f64,
    pub worst_ratio: f64,
    pub pairs: usize,
}

/// `sup (phi(t1, x) - phi(t2, x)) / ((t2 - t1)^nu ||alpha||_p)` over dyadic pairs.
pub fn check_holder_time(phi: &Field, alpha: &Field, data: &ProblemData) -> Result<HolderReport> {
    let grid = &data.grid;
    require(phi, grid, PHI_LOC)?;
    require(alpha, grid, ALPHA_LOC)?;
    let nu = data.holder_exponent();
    let p = data.coupling.p();
    let alpha_norm = (alpha.data().iter().map(|a| a.abs().powf(p)).sum::<f64>()
        * grid.ht()
        * grid.cell_volume())
    .powf(1.0 / p);
    let nt = grid.nt();
    let mut worst = f64::NEG_INFINITY;
    let mut pairs = 0;
    let mut step = 1;
    while step <= nt {
        let mut k1 = 0;
        while k1 + step <= nt {
            let k2 = k1 + step;
            let dt = step as f64 * grid.ht();
            let diff = phi
                .slice(k1)
                .iter()
                .zip(phi.slice(k2))
                .fold(f64::NEG_INFINITY, |acc, (a, b)| acc.max(a - b));
            let ratio = if alpha_norm > 0.0 {
                diff / (dt.powf(nu) * alpha_norm)
            } else if diff > 0.0 {
                f64::INFINITY
            } else {
                0.0
            };
            worst = worst.max(ratio);
            pairs += 1;
            k1 += step;
        }
        step *= 2;
    }
    Ok(HolderReport {
        nu,
        alpha_norm,
        worst_ratio: worst,
        pairs,
    })
}

#[derive(Clone, Debug)]
pub struct EllipticResidual {
    /// `min{G, -p_t + H}` on time nodes; zero outside the checked interior.
    pub field: Field,
    pub l1: f64,
    pub max_abs: f64,
    pub checked_nodes: usize,
    pub skipped_nodes: usize,
}

/// Cellwise `min{G, -p_t + H}` with central differences, on time nodes at
/// least two steps away from `t = 0` and `t = T`.
pub fn elliptic_residual(phi: &Field, data: &ProblemData, delta_reg: f64) -> Result<EllipticResidual> {
    let grid = &data.grid;
    require(phi, grid, PHI_LOC)?;
    let n = grid.n_space();
    let d = grid.dim();
    let nt = grid.nt();
    let ht = grid.ht();
    let h = grid.hx();
    let r = data.hamiltonian.r();
    let coupling = &data.coupling;
    let ell = data.hamiltonian.potential();
    let weight = coupling.weight();
    let mut field = Field::zeros(grid, PHI_LOC, 1);
    if nt < 4 {
        return Ok(EllipticResidual {
            field,
            l1: 0.0,
            max_abs: 0.0,
            checked_nodes: 0,
            skipped_nodes: 0,
        });
    }
    let mut checked = 0;
    let mut skipped = 0;
    let mut l1 = 0.0;
    let mut max_abs = 0.0_f64;
    let central = |s: &[f64], i: usize, a: usize| (s[grid.plus(a, i)] - s[grid.minus(a, i)]) / (2.0 * h);
    for k in 2..=nt - 2 {
        let (prev, now, next) = (phi.slice(k - 1), phi.slice(k), phi.slice(k + 1));
        for i in 0..n {
            let pt = (next[i] - prev[i]) / (2.0 * ht);
            let att = (next[i] - 2.0 * now[i] + prev[i]) / (ht * ht);
            let mut px = [0.0; 2];
            let mut bx = [0.0; 2];
            let mut c = [[0.0; 2]; 2];
            for a in 0..d {
                px[a] = central(now, i, a);
                bx[a] = (central(next, i, a) - central(prev, i, a)) / (2.0 * ht);
                for bb in 0..d {
                    c[a][bb] = if a == bb {
                        (now[grid.plus(a, i)] - 2.0 * now[i] + now[grid.minus(a, i)]) / (h * h)
                    } else {
                        let pp = grid.plus(bb, grid.plus(a, i));
                        let pm = grid.minus(bb, grid.plus(a, i));
                        let mp = grid.plus(bb, grid.minus(a, i));
                        let mm = grid.minus(bb, grid.minus(a, i));
                        (now[pp] - now[pm] - now[mp] + now[mm]) / (4.0 * h * h)
                    };
                }
            }
            let norm = px[..d].iter().map(|v| v * v).sum::<f64>().sqrt();
            let hval = data.hamiltonian.eval(i, &px[..d]);
            let s = -pt + hval;
            let g = if s <= delta_reg {
                0.0
            } else {
                if norm == 0.0 && r < 2.0 {
                    skipped += 1;
                    continue;
                }
                let scale = if norm > 0.0 { norm.powf(r - 2.0) } else { 0.0 };
                let mut hp = [0.0; 2];
                for a in 0..d {
                    hp[a] = scale * px[a];
                }
                // H_pp = |p|^{r-2} (I + (r-2) p p^T / |p|^2)
                let mut hpp = [[0.0; 2]; 2];
                for a in 0..d {
                    for bb in 0..d {
                        let id = if a == bb { 1.0 } else { 0.0 };
                        let outer = if norm > 0.0 { px[a] * px[bb] / (norm * norm) } else { 0.0 };
                        hpp[a][bb] = if r == 2.0 { id } else { scale * (id + (r - 2.0) * outer) };
                    }
                }
                let hx = ell.central_gradient(grid, i);
                let dc = weight.central_gradient(grid, i);
                let fa = coupling.f_star_prime(i, s);
                let faa = coupling.f_star_second(i, s);
                let fxa = coupling.f_star_prime_dweight(i, s);
                let mut hp_b = 0.0;
                let mut chp_hp = 0.0;
                let mut hp_hx = 0.0;
                let mut fxa_hp = 0.0;
                let mut tr = 0.0;
                for a in 0..d {
                    hp_b += hp[a] * bx[a];
                    hp_hx += hp[a] * -hx[a];
                    fxa_hp += fxa * dc[a] * hp[a];
                    for bb in 0..d {
                        chp_hp += c[a][bb] * hp[bb] * hp[a];
                        tr += hpp[a][bb] * c[bb][a];
                    }
                }
                faa * (-att + 2.0 * hp_b - chp_hp - hp_hx) - fxa_hp - fa * tr
            };
            let res = g.min(s);
            field.set(k, 0, i, res);
            checked += 1;
            l1 += res.abs();
            max_abs = max_abs.max(res.abs());
        }
    }
    Ok(EllipticResidual {
        field,
        l1: l1 * ht * grid.cell_volume(),
        max_abs,
        checked_nodes: checked,
        skipped_nodes: skipped,
    })
}
