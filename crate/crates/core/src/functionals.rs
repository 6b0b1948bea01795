//! Discrete primal and dual functionals, the coupled integrand `K` and the
//! pointwise proximal maps.
//!
//! Carriers:
//!
//! * `phi`: time nodes x space nodes;
//! * `alpha`: time cells x space nodes;
//! * `m`: time nodes x space nodes; slice `k < nt` is the density used on
//!   time cell `k`, slice `nt` is the terminal density;
//! * `w`: time cells x space nodes with `2d` one-sided components: `w+` per
//!   axis (flux leaving the node towards `+1`, `>= 0`) then `w-` per axis
//!   (flux leaving towards `-1`, `<= 0`). The net flux through the face
//!   between `i` and `i+1` is `w+_i + w-_{i+1}`.
//!
//! The Hamiltonian is evaluated through its upwind numerical version
//! `H^(x, b) = |P(b)|^r / r - l(x)` where `b = (b+, b-)` holds the forward and
//! backward differences and `P = ((b+)^-, (b-)^+)`. It is monotone and
//! consistent, and its conjugate is finite only on `w+ >= 0`, `w- <= 0`, which
//! is what makes the discrete duality exact.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Field, Location, Point, SpaceLoc, SpaceTimeGrid, TimeLoc};
use crate::model::{ExtReal, PowerCoupling, PowerHamiltonian, ProblemData};

pub const PHI_LOC: Location = Location::new(TimeLoc::Node, SpaceLoc::Node);
pub const ALPHA_LOC: Location = Location::new(TimeLoc::Cell, SpaceLoc::Cell);
pub const M_LOC: Location = Location::new(TimeLoc::Node, SpaceLoc::Cell);
pub const W_LOC: Location = Location::new(TimeLoc::Cell, SpaceLoc::Face);

pub const PROX_TOL: f64 = 1e-10;
pub const PROX_MAX_ITERS: usize = 200;
pub const TERMINAL_TOL: f64 = 1e-12;

/// Forward and backward differences of a node slice at node `i`, written as
/// `[b+_0, .., b+_{d-1}, b-_0, .., b-_{d-1}]`.
#[inline]
pub fn upwind_gradient(grid: &SpaceTimeGrid, phi: &[f64], i: usize, out: &mut [f64]) {
    let d = grid.dim();
    let inv_h = 1.0 / grid.hx();
    let here = phi[i];
    for a in 0..d {
        out[a] = (phi[grid.plus(a, i)] - here) * inv_h;
        out[d + a] = (here - phi[grid.minus(a, i)]) * inv_h;
    }
}

/// `|P(b)|^2` for an upwind difference vector.
#[inline]
pub fn upwind_active_norm_sq(b: &[f64]) -> f64 {
    let d = b.len() / 2;
    let mut s = 0.0;
    for a in 0..d {
        let lo = (-b[a]).max(0.0);
        let hi = b[d + a].max(0.0);
        s += lo * lo + hi * hi;
    }
    s
}

#[inline]
pub fn upwind_hamiltonian(h: &PowerHamiltonian, i: usize, b: &[f64]) -> f64 {
    let n = upwind_active_norm_sq(b).sqrt();
    let r = h.r();
    let kin = if n == 0.0 {
        0.0
    } else if r == 2.0 {
        0.5 * n * n
    } else {
        n.powf(r) / r
    };
    kin - h.potential().at(i)
}

/// Gradient of the numerical Hamiltonian in `b`.
#[inline]
pub fn upwind_dp(h: &PowerHamiltonian, b: &[f64], out: &mut [f64]) {
    let d = b.len() / 2;
    let n = upwind_active_norm_sq(b).sqrt();
    let scale = if n > 0.0 { n.powf(h.r() - 2.0) } else { 0.0 };
    for a in 0..d {
        out[a] = -scale * (-b[a]).max(0.0);
        out[d + a] = scale * b[d + a].max(0.0);
    }
}

/// `m H^*(x_i, -w/m)` for one-sided fluxes, with the sign constraints and
/// the `m = 0` convention.
pub fn kinetic_upwind(h: &PowerHamiltonian, i: usize, m: f64, w: &[f64]) -> ExtReal {
    let d = w.len() / 2;
    if m < 0.0 {
        return ExtReal::PosInf;
    }
    let mut n2 = 0.0;
    for a in 0..d {
        if w[a] < 0.0 || w[d + a] > 0.0 {
            return ExtReal::PosInf;
        }
        n2 += w[a] * w[a] + w[d + a] * w[d + a];
    }
    if m == 0.0 {
        return if n2 == 0.0 {
            ExtReal::Finite(0.0)
        } else {
            ExtReal::PosInf
        };
    }
    let rc = h.r_conj();
    let speed = n2.sqrt() / m;
    let kin = if speed == 0.0 {
        0.0
    } else if rc == 2.0 {
        0.5 * speed * speed
    } else {
        speed.powf(rc) / rc
    };
    ExtReal::Finite(m * (kin + h.potential().at(i)))
}

/// `m H^*(x, -w/m)` with the convention `0` for `(0, 0)` and `+inf` for
/// `m = 0, w != 0`.
pub fn kinetic_integrand(h: &PowerHamiltonian, x: &Point, m: f64, w: &[f64]) -> Result<ExtReal> {
    if m < 0.0 || m.is_nan() {
        return Err(Error::InvalidParameter(format!(
            "kinetic integrand needs m >= 0, got {m}"
        )));
    }
    if m == 0.0 {
        return Ok(if w.iter().all(|v| *v == 0.0) {
            ExtReal::Finite(0.0)
        } else {
            ExtReal::PosInf
        });
    }
    let xi: Vec<f64> = w.iter().map(|v| -v / m).collect();
    Ok(ExtReal::Finite(m * h.conjugate_at(x, &xi)))
}

/// Divergence of one slice of one-sided fluxes onto the nodes.
pub fn upwind_divergence_slice(grid: &SpaceTimeGrid, w: &[f64], out: &mut [f64]) {
    let n = grid.n_space();
    let d = grid.dim();
    let inv_h = 1.0 / grid.hx();
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for a in 0..d {
            let wp = &w[a * n..(a + 1) * n];
            let wm = &w[(d + a) * n..(d + a + 1) * n];
            acc += wp[i] - wp[grid.minus(a, i)] + wm[grid.plus(a, i)] - wm[i];
        }
        *o = acc * inv_h;
    }
}

/// Density generated by the fluxes through `m_{k+1} = m_k - h_t div w_k`.
pub fn continuity_forward(grid: &SpaceTimeGrid, m0: &[f64], w: &Field) -> Result<Field> {
    expect_loc(w, W_LOC, 2 * grid.dim())?;
    let n = grid.n_space();
    let ht = grid.ht();
    let mut m = Field::zeros(grid, M_LOC, 1);
    m.slice_mut(0).copy_from_slice(m0);
    let mut div = vec![0.0; n];
    for k in 0..grid.nt() {
        upwind_divergence_slice(grid, w.slice(k), &mut div);
        let (prev, next) = m.data_mut().split_at_mut((k + 1) * n);
        let prev = &prev[k * n..];
        for i in 0..n {
            next[i] = prev[i] - ht * div[i];
        }
    }
    Ok(m)
}

fn expect_loc(f: &Field, loc: Location, components: usize) -> Result<()> {
    if f.location() != loc {
        return Err(Error::Staggering {
            expected: loc,
            found: f.location(),
        });
    }
    if f.components() != components {
        return Err(Error::Shape(format!(
            "field at {loc} has {} components, expected {components}",
            f.components()
        )));
    }
    Ok(())
}

fn expect_shape(f: &Field, grid: &SpaceTimeGrid) -> Result<()> {
    if f.n_space() != grid.n_space() || f.slices() != grid.slices(f.location().time) {
        return Err(Error::Shape(format!(
            "field at {} has {} slices x {} nodes, grid expects {} x {}",
            f.location(),
            f.slices(),
            f.n_space(),
            grid.slices(f.location().time),
            grid.n_space()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrimalState {
    pub m: Field,
    pub w: Field,
}

impl PrimalState {
    pub fn new(grid: &SpaceTimeGrid, m: Field, w: Field) -> Result<Self> {
        expect_loc(&m, M_LOC, 1)?;
        expect_loc(&w, W_LOC, 2 * grid.dim())?;
        expect_shape(&m, grid)?;
        expect_shape(&w, grid)?;
        Ok(Self { m, w })
    }

    /// `m` frozen at `m0`, no flux.
    pub fn at_rest(data: &ProblemData) -> Self {
        let grid = &data.grid;
        let mut m = Field::zeros(grid, M_LOC, 1);
        for k in 0..m.slices() {
            m.slice_mut(k).copy_from_slice(data.m0.values());
        }
        Self {
            m,
            w: Field::zeros(grid, W_LOC, 2 * grid.dim()),
        }
    }

    /// Net flux through the `+1` face of every node, one block per axis.
    pub fn face_flux(&self, grid: &SpaceTimeGrid) -> Field {
        let d = grid.dim();
        let n = grid.n_space();
        let mut out = Field::zeros(grid, W_LOC, d);
        for k in 0..grid.nt() {
            let src = self.w.slice(k);
            let dst = out.slice_mut(k);
            for a in 0..d {
                for i in 0..n {
                    dst[a * n + i] = src[a * n + i] + src[(d + a) * n + grid.plus(a, i)];
                }
            }
        }
        out
    }

    /// Cell momentum `w+ + w-` (one block per axis).
    pub fn cell_momentum(&self, grid: &SpaceTimeGrid) -> Field {
        let d = grid.dim();
        let n = grid.n_space();
        let mut out = Field::zeros(grid, Location::new(TimeLoc::Cell, SpaceLoc::Cell), d);
        for k in 0..grid.nt() {
            let src = self.w.slice(k);
            let dst = out.slice_mut(k);
            for a in 0..d {
                for i in 0..n {
                    dst[a * n + i] = src[a * n + i] + src[(d + a) * n + i];
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualState {
    pub phi: Field,
    pub alpha: Field,
}

impl DualState {
    pub fn new(grid: &SpaceTimeGrid, phi: Field, alpha: Field) -> Result<Self> {
        expect_loc(&phi, PHI_LOC, 1)?;
        expect_loc(&alpha, ALPHA_LOC, 1)?;
        expect_shape(&phi, grid)?;
        expect_shape(&alpha, grid)?;
        Ok(Self { phi, alpha })
    }

    /// `phi(t, .) = phi_T` for all `t`, `alpha = 0`.
    pub fn from_terminal(data: &ProblemData) -> Self {
        let grid = &data.grid;
        let mut phi = Field::zeros(grid, PHI_LOC, 1);
        for k in 0..phi.slices() {
            phi.slice_mut(k).copy_from_slice(data.phi_terminal.values());
        }
        Self {
            phi,
            alpha: Field::zeros(grid, ALPHA_LOC, 1),
        }
    }
}

/// `-D_t phi + H^(x, D phi^{k+1})` on every time cell.
pub fn hj_operator(phi: &Field, data: &ProblemData) -> Result<Field> {
    let grid = &data.grid;
    expect_loc(phi, PHI_LOC, 1)?;
    expect_shape(phi, grid)?;
    let n = grid.n_space();
    let d = grid.dim();
    let inv_ht = 1.0 / grid.ht();
    let mut out = Field::zeros(grid, ALPHA_LOC, 1);
    out.data_mut()
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(k, dst)| {
            let now = phi.slice(k);
            let next = phi.slice(k + 1);
            let mut b = [0.0; 4];
            for i in 0..n {
                upwind_gradient(grid, next, i, &mut b[..2 * d]);
                dst[i] = -(next[i] - now[i]) * inv_ht
                    + upwind_hamiltonian(&data.hamiltonian, i, &b[..2 * d]);
            }
        });
    Ok(out)
}

fn check_terminal(phi: &Field, data: &ProblemData) -> Result<()> {
    let last = phi.slice(data.grid.nt());
    let err = last
        .iter()
        .zip(data.phi_terminal.values())
        .fold(0.0_f64, |acc, (a, b)| acc.max((a - b).abs()));
    if err > TERMINAL_TOL {
        return Err(Error::TerminalCondition(err));
    }
    Ok(())
}

/// `sum h_t h^d F*(alpha) - h^d sum phi(0) m0`.
pub fn eval_a(dual: &DualState, data: &ProblemData) -> Result<f64> {
    let grid = &data.grid;
    expect_loc(&dual.phi, PHI_LOC, 1)?;
    expect_loc(&dual.alpha, ALPHA_LOC, 1)?;
    expect_shape(&dual.phi, grid)?;
    expect_shape(&dual.alpha, grid)?;
    check_terminal(&dual.phi, data)?;
    let n = grid.n_space();
    let partial: Vec<f64> = (0..grid.nt())
        .into_par_iter()
        .map(|k| {
            dual.alpha
                .slice(k)
                .iter()
                .enumerate()
                .map(|(i, a)| data.coupling.f_star(i, *a))
                .sum::<f64>()
        })
        .collect();
    let running: f64 = partial.iter().sum::<f64>() * grid.ht() * grid.cell_volume();
    let initial: f64 = (0..n)
        .map(|i| dual.phi.get(0, 0, i) * data.m0.at(i))
        .sum::<f64>()
        * grid.cell_volume();
    Ok(running - initial)
}

/// `sum h_t h^d [kinetic + F(m)] + h^d sum phi_T m(T)`.
pub fn eval_b(primal: &PrimalState, data: &ProblemData) -> Result<ExtReal> {
    let grid = &data.grid;
    expect_loc(&primal.m, M_LOC, 1)?;
    expect_loc(&primal.w, W_LOC, 2 * grid.dim())?;
    expect_shape(&primal.m, grid)?;
    expect_shape(&primal.w, grid)?;
    let n = grid.n_space();
    let d = grid.dim();
    let partial: Vec<ExtReal> = (0..grid.nt())
        .into_par_iter()
        .map(|k| {
            let m = primal.m.slice(k);
            let w = primal.w.slice(k);
            let mut wc = [0.0; 4];
            let mut acc = ExtReal::Finite(0.0);
            for i in 0..n {
                for c in 0..2 * d {
                    wc[c] = w[c * n + i];
                }
                acc = acc
                    + kinetic_upwind(&data.hamiltonian, i, m[i], &wc[..2 * d])
                    + data.coupling.big_f(i, m[i]);
                if !acc.is_finite() {
                    break;
                }
            }
            acc
        })
        .collect();
    let running: ExtReal = partial.into_iter().sum();
    let terminal: f64 = primal
        .m
        .slice(grid.nt())
        .iter()
        .zip(data.phi_terminal.values())
        .map(|(m, p)| m * p)
        .sum::<f64>()
        * grid.cell_volume();
    Ok(running.scale(grid.ht() * grid.cell_volume()) + ExtReal::Finite(terminal))
}

/// Largest violation of `-D_t phi + H^ <= alpha`.
pub fn constraint_residual(dual: &DualState, data: &ProblemData) -> Result<f64> {
    let hj = hj_operator(&dual.phi, data)?;
    expect_shape(&dual.alpha, &data.grid)?;
    Ok(hj
        .data()
        .iter()
        .zip(dual.alpha.data())
        .fold(0.0_f64, |acc, (h, a)| acc.max(h - a)))
}

/// Space-time L1 defect of the discrete continuity equation, plus the L1
/// mismatch of the initial slice.
pub fn continuity_residual(primal: &PrimalState, data: &ProblemData) -> Result<f64> {
    let grid = &data.grid;
    expect_loc(&primal.m, M_LOC, 1)?;
    expect_loc(&primal.w, W_LOC, 2 * grid.dim())?;
    let n = grid.n_space();
    let ht = grid.ht();
    let partial: Vec<f64> = (0..grid.nt())
        .into_par_iter()
        .map(|k| {
            let mut div = vec![0.0; n];
            upwind_divergence_slice(grid, primal.w.slice(k), &mut div);
            let now = primal.m.slice(k);
            let next = primal.m.slice(k + 1);
            (0..n)
                .map(|i| ((next[i] - now[i]) / ht + div[i]).abs())
                .sum::<f64>()
        })
        .collect();
    let initial: f64 = primal
        .m
        .slice(0)
        .iter()
        .zip(data.m0.values())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok((partial.iter().sum::<f64>() * ht + initial) * grid.cell_volume())
}

/// `K(x, a, b) = F*(x, -a + H(x, b))`.
pub fn k_eval(
    h: &PowerHamiltonian,
    coupling: &PowerCoupling,
    x: &Point,
    a: f64,
    b: &[f64],
) -> f64 {
    let c = coupling.weight().interpolate(x);
    coupling.f_star_with_weight(c, -a + h.eval_at(x, b))
}

/// Solution of the scalar reduction of the prox of `lambda K`.
#[derive(Clone, Copy, Debug)]
pub struct ProxScalar {
    /// Value of `-a + H` at the minimizer.
    pub s: f64,
    /// `F*'(s)`; equals the multiplier `m` in the saddle-point iteration.
    pub mu: f64,
    /// Norm of the shrunk active gradient.
    pub t: f64,
}

/// Solve `s + a0 + lambda mu(s) - (t'^r / r - l) = 0` on `[0, s0]`, where
/// `t'` is the radial shrink of `t` by `lambda mu(s)`.
/// Returns `Ok(None)` when `(a0, b0)` already lies in `{K = 0}`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn prox_k_scalar(
    h: &PowerHamiltonian,
    coupling: &PowerCoupling,
    c: f64,
    ell: f64,
    a0: f64,
    t0: f64,
    lambda: f64,
) -> std::result::Result<Option<ProxScalar>, usize> {
    let r = h.r();
    let kin = |t: f64| {
        if t == 0.0 {
            0.0
        } else if r == 2.0 {
            0.5 * t * t
        } else {
            t.powf(r) / r
        }
    };
    let s0 = -a0 + kin(t0) - ell;
    if s0 <= 0.0 {
        return Ok(None);
    }
    let p = coupling.p();
    let mu = |s: f64| coupling.f_star_prime_with_weight(c, s);
    let dmu = |s: f64| {
        if s <= 0.0 {
            f64::INFINITY
        } else {
            (p - 1.0) * s.powf(p - 2.0) * c.powf(1.0 - p)
        }
    };
    let eval = |s: f64| {
        let kappa = lambda * mu(s);
        let t = h.radial_shrink(t0, kappa);
        (s + a0 + kappa - kin(t) + ell, kappa, t)
    };
    let (mut lo, mut hi) = (0.0_f64, s0);
    let mut s = s0 / (1.0 + lambda * mu(s0) / s0);
    for it in 0..PROX_MAX_ITERS {
        let (res, kappa, t) = eval(s);
        if res.abs() <= PROX_TOL || hi - lo <= 4.0 * f64::EPSILON * s0 {
            return Ok(Some(ProxScalar { s, mu: mu(s), t }));
        }
        if res > 0.0 {
            hi = s;
        } else {
            lo = s;
        }
        let shrink_term = if t > 0.0 {
            t.powf(2.0 * r - 2.0) / (1.0 + kappa * (r - 1.0) * t.powf(r - 2.0))
        } else {
            0.0
        };
        let slope = 1.0 + lambda * dmu(s) * (1.0 + shrink_term);
        let mut next = s - res / slope;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        s = next;
        if it + 1 == PROX_MAX_ITERS {
            break;
        }
    }
    Err(PROX_MAX_ITERS)
}

/// Proximal map of `tau K(x, ., .)` for the continuous Hamiltonian.
pub fn prox_k(
    h: &PowerHamiltonian,
    coupling: &PowerCoupling,
    x: &Point,
    a0: f64,
    b0: &[f64],
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!("prox step must be positive, got {tau}")));
    }
    let c = coupling.weight().interpolate(x);
    let ell = h.potential().interpolate(x);
    let t0 = b0.iter().map(|v| v * v).sum::<f64>().sqrt();
    match prox_k_scalar(h, coupling, c, ell, a0, t0, tau) {
        Ok(None) => Ok((a0, b0.to_vec())),
        Ok(Some(sol)) => {
            let scale = if t0 > 0.0 { sol.t / t0 } else { 0.0 };
            Ok((a0 + tau * sol.mu, b0.iter().map(|v| v * scale).collect()))
        }
        Err(iterations) => Err(Error::ProxNonConvergence {
            slice: 0,
            node: 0,
            iterations,
        }),
    }
}

/// Proximal map of `tau F*(x, .)`.
pub fn prox_fstar(coupling: &PowerCoupling, x: &Point, a0: f64, tau: f64) -> f64 {
    if a0 <= 0.0 {
        return a0;
    }
    let c = coupling.weight().interpolate(x);
    if coupling.p() == 2.0 {
        return a0 / (1.0 + tau / c);
    }
    // a + tau c^{1-p} a^{p-1} = a0, increasing in a on [0, a0]
    let g = |a: f64| a + tau * coupling.f_star_prime_with_weight(c, a) - a0;
    let (mut lo, mut hi) = (0.0_f64, a0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-15 * a0 {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Brute-force Fenchel transform `max_s z s - g(s)` over samples `(s, g(s))`.
pub fn conjugate_oracle(samples: &[(f64, f64)], z: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidParameter("empty sample grid".into()));
    }
    Ok(samples
        .iter()
        .map(|(s, g)| z * s - g)
        .fold(f64::NEG_INFINITY, f64::max))
}
