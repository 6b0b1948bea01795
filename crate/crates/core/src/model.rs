//! Hamiltonian and coupling families with closed-form conjugates, and the
//! structural checks on the problem data.
//!
//! Only the power families are built in:
//!
//! * `H(x, p) = |p|^r / r - l(x)`, `H*(x, xi) = |xi|^{r'} / r' + l(x)`;
//! * `f(x, m) = c(x) m^{q-1}`, `F(x, m) = c(x) m^q / q` (`+inf` for `m < 0`),
//!   `F*(x, a) = (a v 0)^p c(x)^{1-p} / p`.
//!
//! The Hamiltonian is radial in `p`, so the same formulas serve vectors of any
//! length (the solver feeds it the `2d` one-sided differences of a cell).

use std::ops::Add;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{mass, Point, SpaceTimeGrid, SpatialField};

/// Extended real value used for the `+inf` branches of `F` and the kinetic
/// integrand. Never turned into a float infinity inside a reduction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum ExtReal {
    Finite(f64),
    PosInf,
}

impl ExtReal {
    pub fn is_finite(self) -> bool {
        matches!(self, ExtReal::Finite(_))
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            ExtReal::Finite(v) => Some(v),
            ExtReal::PosInf => None,
        }
    }

    pub fn scale(self, w: f64) -> ExtReal {
        match self {
            ExtReal::Finite(v) => ExtReal::Finite(v * w),
            ExtReal::PosInf => ExtReal::PosInf,
        }
    }
}

impl Add for ExtReal {
    type Output = ExtReal;

    fn add(self, rhs: ExtReal) -> ExtReal {
        match (self, rhs) {
            (ExtReal::Finite(a), ExtReal::Finite(b)) => ExtReal::Finite(a + b),
            _ => ExtReal::PosInf,
        }
    }
}

impl std::iter::Sum for ExtReal {
    fn sum<I: Iterator<Item = ExtReal>>(iter: I) -> ExtReal {
        iter.fold(ExtReal::Finite(0.0), |acc, v| acc + v)
    }
}

pub fn conjugate_exponent(e: f64) -> f64 {
    e / (e - 1.0)
}

#[inline]
fn norm(p: &[f64]) -> f64 {
    p.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[derive(Clone, Debug)]
pub struct PowerHamiltonian {
    r: f64,
    potential: SpatialField,
    potential_lipschitz: f64,
}

impl PowerHamiltonian {
    pub fn new(r: f64, potential: SpatialField, potential_lipschitz: f64) -> Result<Self> {
        if !(r.is_finite() && r > 1.0) {
            return Err(Error::Assumption {
                assumption: "H2",
                detail: format!("growth exponent r must exceed 1, got {r}"),
            });
        }
        Ok(Self {
            r,
            potential,
            potential_lipschitz,
        })
    }

    pub fn quadratic(grid: &SpaceTimeGrid) -> Self {
        Self {
            r: 2.0,
            potential: SpatialField::constant(grid, 0.0),
            potential_lipschitz: 0.0,
        }
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn r_conj(&self) -> f64 {
        conjugate_exponent(self.r)
    }

    pub fn potential(&self) -> &SpatialField {
        &self.potential
    }

    pub fn potential_lipschitz(&self) -> f64 {
        self.potential_lipschitz
    }

    /// `|p|^r / r`, the potential-free part.
    #[inline]
    pub fn kinetic(&self, p: &[f64]) -> f64 {
        radial_power(norm(p), self.r) / self.r
    }

    /// `H(x_i, p)` at space node `i`.
    #[inline]
    pub fn eval(&self, i: usize, p: &[f64]) -> f64 {
        self.kinetic(p) - self.potential.at(i)
    }

    /// `H(x, p)` at an arbitrary point (potential interpolated).
    pub fn eval_at(&self, x: &Point, p: &[f64]) -> f64 {
        self.kinetic(p) - self.potential.interpolate(x)
    }

    /// `H*(x_i, xi) = |xi|^{r'} / r' + l(x_i)`.
    #[inline]
    pub fn conjugate(&self, i: usize, xi: &[f64]) -> f64 {
        self.conjugate_kinetic(xi) + self.potential.at(i)
    }

    pub fn conjugate_at(&self, x: &Point, xi: &[f64]) -> f64 {
        self.conjugate_kinetic(xi) + self.potential.interpolate(x)
    }

    #[inline]
    pub fn conjugate_kinetic(&self, xi: &[f64]) -> f64 {
        let rc = self.r_conj();
        radial_power(norm(xi), rc) / rc
    }

    /// Running cost of velocity, `L(x, v) = H*(x, -v)`.
    pub fn lagrangian_at(&self, x: &Point, v: &[f64]) -> f64 {
        self.conjugate_at(x, v)
    }

    /// `D_pH(x, p) = |p|^{r-2} p`, with the value `0` at `p = 0` for every `r`.
    pub fn dp(&self, p: &[f64], out: &mut [f64]) {
        let n = norm(p);
        let scale = if n > 0.0 { n.powf(self.r - 2.0) } else { 0.0 };
        for (o, v) in out.iter_mut().zip(p) {
            *o = scale * v;
        }
    }

    /// `|p|^{r-2}`, the radial factor of `D_pH`.
    pub fn dp_scale(&self, p: &[f64]) -> f64 {
        let n = norm(p);
        if n > 0.0 {
            n.powf(self.r - 2.0)
        } else {
            0.0
        }
    }

    /// Solve `t + lambda t^{r-1} = t0` for `t >= 0` (radial part of the prox of
    /// `lambda |p|^r / r`).
    pub fn radial_shrink(&self, t0: f64, lambda: f64) -> f64 {
        if t0 <= 0.0 || lambda <= 0.0 {
            return t0.max(0.0);
        }
        let r = self.r;
        if (r - 2.0).abs() < 1e-15 {
            return t0 / (1.0 + lambda);
        }
        // g(t) = t + lambda t^{r-1} - t0 is increasing on [0, t0]; g(0) < 0 <= g(t0).
        let (mut lo, mut hi) = (0.0_f64, t0);
        let mut t = if r > 2.0 {
            t0.min((t0 / lambda).powf(1.0 / (r - 1.0)))
        } else {
            t0 / (1.0 + lambda)
        };
        for _ in 0..200 {
            let g = t + lambda * t.powf(r - 1.0) - t0;
            if g.abs() <= 1e-15 * t0.max(1.0) {
                break;
            }
            if g > 0.0 {
                hi = t;
            } else {
                lo = t;
            }
            let dg = 1.0 + lambda * (r - 1.0) * t.powf(r - 2.0);
            let mut next = t - g / dg;
            if !(next > lo && next < hi) || !dg.is_finite() {
                next = 0.5 * (lo + hi);
            }
            if (next - t).abs() <= 1e-16 * t0.max(1e-300) {
                t = next;
                break;
            }
            t = next;
        }
        t
    }
}

#[inline]
fn radial_power(n: f64, e: f64) -> f64 {
    if n == 0.0 {
        0.0
    } else if e == 2.0 {
        n * n
    } else {
        n.powf(e)
    }
}

#[derive(Clone, Debug)]
pub struct PowerCoupling {
    q: f64,
    weight: SpatialField,
    weight_lipschitz: f64,
}

impl PowerCoupling {
    pub fn new(q: f64, weight: SpatialField, weight_lipschitz: f64) -> Result<Self> {
        if !(q.is_finite() && q > 1.0) {
            return Err(Error::Assumption {
                assumption: "H1",
                detail: format!("growth exponent q must exceed 1, got {q}"),
            });
        }
        if weight.min() <= 0.0 {
            return Err(Error::Assumption {
                assumption: "H1",
                detail: format!("coupling weight must be positive, min is {}", weight.min()),
            });
        }
        Ok(Self {
            q,
            weight,
            weight_lipschitz,
        })
    }

    pub fn quadratic(grid: &SpaceTimeGrid) -> Self {
        Self {
            q: 2.0,
            weight: SpatialField::constant(grid, 1.0),
            weight_lipschitz: 0.0,
        }
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    /// Conjugate exponent `p` of `q`.
    pub fn p(&self) -> f64 {
        conjugate_exponent(self.q)
    }

    pub fn weight(&self) -> &SpatialField {
        &self.weight
    }

    pub fn weight_lipschitz(&self) -> f64 {
        self.weight_lipschitz
    }

    fn pow_m(&self, m: f64, e: f64) -> f64 {
        if m <= 0.0 {
            0.0
        } else if e == 1.0 {
            m
        } else if e == 2.0 {
            m * m
        } else {
            m.powf(e)
        }
    }

    /// `f(x_i, m)` for `m >= 0`; negative densities are clamped to `0`.
    #[inline]
    pub fn f(&self, i: usize, m: f64) -> f64 {
        self.weight.at(i) * self.pow_m(m, self.q - 1.0)
    }

    pub fn f_at(&self, x: &Point, m: f64) -> f64 {
        self.weight.interpolate(x) * self.pow_m(m, self.q - 1.0)
    }

    /// `F(x_i, m)`, `+inf` for `m < 0`.
    #[inline]
    pub fn big_f(&self, i: usize, m: f64) -> ExtReal {
        if m < 0.0 {
            ExtReal::PosInf
        } else {
            ExtReal::Finite(self.weight.at(i) * self.pow_m(m, self.q) / self.q)
        }
    }

    /// `F*(x_i, a)`.
    #[inline]
    pub fn f_star(&self, i: usize, a: f64) -> f64 {
        self.f_star_with_weight(self.weight.at(i), a)
    }

    #[inline]
    pub fn f_star_with_weight(&self, c: f64, a: f64) -> f64 {
        if a <= 0.0 {
            return 0.0;
        }
        let p = self.p();
        if p == 2.0 {
            a * a / (2.0 * c)
        } else {
            a.powf(p) * c.powf(1.0 - p) / p
        }
    }

    /// `dF*/da = (a v 0)^{p-1} c^{1-p}`, the inverse of `f(x, .)` on `a > 0`.
    #[inline]
    pub fn f_star_prime_with_weight(&self, c: f64, a: f64) -> f64 {
        if a <= 0.0 {
            return 0.0;
        }
        let p = self.p();
        if p == 2.0 {
            a / c
        } else {
            a.powf(p - 1.0) * c.powf(1.0 - p)
        }
    }

    pub fn f_star_prime(&self, i: usize, a: f64) -> f64 {
        self.f_star_prime_with_weight(self.weight.at(i), a)
    }

    /// `d^2F*/da^2` on `a > 0`.
    pub fn f_star_second(&self, i: usize, a: f64) -> f64 {
        if a <= 0.0 {
            return 0.0;
        }
        let p = self.p();
        (p - 1.0) * a.powf(p - 2.0) * self.weight.at(i).powf(1.0 - p)
    }

    /// `d/dc` of `F*_a`, used through the chain rule for `F*_{x,a}`.
    pub fn f_star_prime_dweight(&self, i: usize, a: f64) -> f64 {
        if a <= 0.0 {
            return 0.0;
        }
        let p = self.p();
        (1.0 - p) * a.powf(p - 1.0) * self.weight.at(i).powf(-p)
    }
}

/// Everything that defines one mean field game instance on a grid.
#[derive(Clone, Debug)]
pub struct ProblemData {
    pub grid: SpaceTimeGrid,
    pub hamiltonian: PowerHamiltonian,
    pub coupling: PowerCoupling,
    pub m0: SpatialField,
    pub phi_terminal: SpatialField,
}

impl ProblemData {
    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn horizon(&self) -> f64 {
        self.grid.horizon()
    }

    /// Homogeneous instance: `r = q = 2`, `c = 1`, `l = 0`, `m0 = 1`, `phi_T = 0`.
    pub fn homogeneous(grid: SpaceTimeGrid) -> Self {
        Self {
            hamiltonian: PowerHamiltonian::quadratic(&grid),
            coupling: PowerCoupling::quadratic(&grid),
            m0: SpatialField::constant(&grid, 1.0),
            phi_terminal: SpatialField::constant(&grid, 0.0),
            grid,
        }
    }

    /// Copy of the data with a new terminal cost.
    pub fn with_terminal(&self, phi_terminal: SpatialField) -> Self {
        Self {
            phi_terminal,
            ..self.clone()
        }
    }

    pub fn with_initial(&self, m0: SpatialField) -> Self {
        Self { m0, ..self.clone() }
    }

    /// Exponent of the Hölder-in-time estimate for constrained potentials.
    pub fn holder_exponent(&self) -> f64 {
        holder_exponent(self.hamiltonian.r(), self.coupling.q(), self.dim())
    }
}

/// `nu = (r - d(q-1)) / (d(q-1)(r-1) + rq)`.
pub fn holder_exponent(r: f64, q: f64, d: usize) -> f64 {
    let d = d as f64;
    (r - d * (q - 1.0)) / (d * (q - 1.0) * (r - 1.0) + r * q)
}

#[derive(Clone, Debug, Serialize)]
pub struct AssumptionCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    /// Node index and position of the first offending sample, if any.
    pub offending_node: Option<usize>,
    pub offending_point: Option<Point>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ObservedConstants {
    /// Tightest constant in the two-sided growth bound of `f` on the samples.
    pub c0f: f64,
    /// Constant of the growth sandwich of `H`, `max(1, sup|l|) * r`.
    pub c0h: f64,
    /// Observed Lipschitz constant of the potential on adjacent nodes.
    pub c_regu: f64,
    /// Observed Lipschitz constant of the coupling weight.
    pub weight_lipschitz: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<AssumptionCheck>,
    pub nu: f64,
    pub theta: f64,
    pub constants: ObservedConstants,
    pub mass: f64,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub const MASS_TOLERANCE: f64 = 1e-8;

/// Check the structural assumptions. Hard violations (exponents, sign and
/// mass of `m0`) are errors; sampled checks are reported.
pub fn validate(data: &ProblemData) -> Result<ValidationReport> {
    let grid = &data.grid;
    let d = grid.dim();
    let r = data.hamiltonian.r();
    let q = data.coupling.q();
    if r <= 1.0 {
        return Err(Error::Assumption {
            assumption: "H2",
            detail: format!("r = {r} must exceed 1"),
        });
    }
    if q <= 1.0 {
        return Err(Error::Assumption {
            assumption: "H1",
            detail: format!("q = {q} must exceed 1"),
        });
    }
    let margin = r - d as f64 * (q - 1.0);
    if margin <= 0.0 {
        return Err(Error::Assumption {
            assumption: "H2",
            detail: format!("r - d(q-1) = {margin} must be positive"),
        });
    }
    if let Some(i) = data.m0.values().iter().position(|v| *v < 0.0) {
        return Err(Error::Assumption {
            assumption: "H4",
            detail: format!(
                "m0 is negative at node {i} ({:?}): {}",
                grid.position(i),
                data.m0.at(i)
            ),
        });
    }
    let total = mass(grid, data.m0.values());
    if (total - 1.0).abs() > MASS_TOLERANCE {
        return Err(Error::Assumption {
            assumption: "H4",
            detail: format!("m0 has mass {total}, expected 1 within {MASS_TOLERANCE:e}"),
        });
    }

    let mut checks = Vec::new();
    let weight = data.coupling.weight();

    // (H1): f(x, 0) = 0, monotone, growth with exponent q - 1.
    let zero_violation = (0..grid.n_space()).find(|&i| data.coupling.f(i, 0.0) != 0.0);
    let c0f = weight.max().max(1.0 / weight.min()).max(1.0);
    let mut growth_violation = None;
    'outer: for i in 0..grid.n_space() {
        for s in 0..=40 {
            let m = 10f64.powf(-3.0 + 0.15 * s as f64);
            let fv = data.coupling.f(i, m);
            let lo = m.powf(q - 1.0) / c0f - c0f;
            let hi = c0f * m.powf(q - 1.0) + c0f;
            if fv < lo - 1e-12 || fv > hi + 1e-12 {
                growth_violation = Some(i);
                break 'outer;
            }
        }
    }
    let bad = zero_violation.or(growth_violation);
    checks.push(AssumptionCheck {
        name: "H1",
        passed: bad.is_none() && weight.min() > 0.0,
        detail: format!(
            "f(x,m) = c(x) m^(q-1), q = {q}, inf c = {:.6e}, growth constant {c0f:.6e}",
            weight.min()
        ),
        offending_node: bad,
        offending_point: bad.map(|i| grid.position(i)),
    });

    // (H2): growth sandwich on sampled gradients.
    let c0h = data.hamiltonian.potential().sup_abs().max(1.0) * r;
    let mut h2_bad = None;
    'h2: for i in 0..grid.n_space() {
        for s in 0..=40 {
            let mag = 10f64.powf(-3.0 + 0.15 * s as f64);
            let p = [mag, 0.0];
            let hv = data.hamiltonian.eval(i, &p[..d]);
            let lo = mag.powf(r) / (r * c0h) - c0h;
            let hi = c0h / r * mag.powf(r) + c0h;
            if hv < lo - 1e-12 || hv > hi + 1e-12 {
                h2_bad = Some(i);
                break 'h2;
            }
        }
    }
    checks.push(AssumptionCheck {
        name: "H2",
        passed: h2_bad.is_none(),
        detail: format!("r = {r}, r - d(q-1) = {margin}, growth constant {c0h:.6e}"),
        offending_node: h2_bad,
        offending_point: h2_bad.map(|i| grid.position(i)),
    });

    // (H3): theta = 0, reduces to the declared Lipschitz constant of l.
    let (lip_l, node_l) = data.hamiltonian.potential().observed_lipschitz(grid);
    let (lip_c, node_c) = weight.observed_lipschitz(grid);
    let tol = 1e-9;
    let l_ok = lip_l <= data.hamiltonian.potential_lipschitz() * (1.0 + tol) + tol;
    let c_ok = lip_c <= data.coupling.weight_lipschitz() * (1.0 + tol) + tol;
    let h3_node = if !l_ok {
        Some(node_l)
    } else if !c_ok {
        Some(node_c)
    } else {
        None
    };
    checks.push(AssumptionCheck {
        name: "H3",
        passed: l_ok && c_ok,
        detail: format!(
            "theta = 0; observed Lip(l) = {lip_l:.6e} (declared {:.6e}), observed Lip(c) = {lip_c:.6e} (declared {:.6e})",
            data.hamiltonian.potential_lipschitz(),
            data.coupling.weight_lipschitz()
        ),
        offending_node: h3_node,
        offending_point: h3_node.map(|i| grid.position(i)),
    });

    checks.push(AssumptionCheck {
        name: "H4",
        passed: true,
        detail: format!("m0 >= 0 with mass {total:.15}; phi_T sampled on {} nodes", grid.n_space()),
        offending_node: None,
        offending_point: None,
    });

    Ok(ValidationReport {
        checks,
        nu: data.holder_exponent(),
        theta: 0.0,
        constants: ObservedConstants {
            c0f,
            c0h,
            c_regu: lip_l,
            weight_lipschitz: lip_c,
        },
        mass: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn grid1(nx: usize) -> SpaceTimeGrid {
        SpaceTimeGrid::new(1, nx, 4, 1.0).unwrap()
    }

    /// Brute-force `sup_s (z s - g(s))` over a 1-D sample grid.
    fn brute_conjugate(g: impl Fn(f64) -> f64, z: f64, lo: f64, hi: f64, n: usize) -> f64 {
        (0..=n)
            .map(|k| lo + (hi - lo) * k as f64 / n as f64)
            .map(|s| z * s - g(s))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    #[test]
    fn holder_exponent_values() {
        assert_abs_diff_eq!(holder_exponent(2.0, 2.0, 1), 0.2, epsilon = 1e-15);
        // (3 - 2) / (2*1*2 + 3*2)
        assert_abs_diff_eq!(holder_exponent(3.0, 2.0, 2), 0.1, epsilon = 1e-15);
    }

    #[test]
    fn validate_homogeneous_passes() {
        let data = ProblemData::homogeneous(grid1(8));
        let rep = validate(&data).unwrap();
        assert!(rep.all_passed());
        assert_abs_diff_eq!(rep.nu, 0.2, epsilon = 1e-15);
        assert_eq!(rep.checks.len(), 4);
    }

    #[test]
    fn validate_rejects_incompatible_exponents() {
        let g = SpaceTimeGrid::new(2, 4, 4, 1.0).unwrap();
        let mut data = ProblemData::homogeneous(g.clone());
        data.coupling = PowerCoupling::new(3.0, SpatialField::constant(&g, 1.0), 0.0).unwrap();
        let err = validate(&data).unwrap_err();
        assert!(err.to_string().contains("r - d(q-1) = -2"));
    }

    #[test]
    fn validate_r3_q2_d2() {
        let g = SpaceTimeGrid::new(2, 4, 4, 1.0).unwrap();
        let mut data = ProblemData::homogeneous(g.clone());
        data.hamiltonian = PowerHamiltonian::new(3.0, SpatialField::constant(&g, 0.0), 0.0).unwrap();
        let rep = validate(&data).unwrap();
        assert!(rep.all_passed());
        assert_abs_diff_eq!(rep.nu, 0.1, epsilon = 1e-15);
    }

    #[test]
    fn validate_rejects_bad_initial_density() {
        let g = grid1(4);
        let neg = ProblemData::homogeneous(g.clone())
            .with_initial(SpatialField::new(&g, vec![2.0, -0.5, 1.5, 1.0]).unwrap());
        assert!(validate(&neg).is_err());
        let heavy = ProblemData::homogeneous(g.clone()).with_initial(SpatialField::constant(&g, 1.1));
        assert!(validate(&heavy).is_err());
        assert!(PowerHamiltonian::new(1.0, SpatialField::constant(&g, 0.0), 0.0).is_err());
        assert!(PowerCoupling::new(0.5, SpatialField::constant(&g, 1.0), 0.0).is_err());
    }

    #[test]
    fn validate_flags_lipschitz_violation() {
        let g = grid1(8);
        let mut data = ProblemData::homogeneous(g.clone());
        let ell = SpatialField::from_fn(&g, |p| (2.0 * std::f64::consts::PI * p[0]).sin());
        data.hamiltonian = PowerHamiltonian::new(2.0, ell, 1.0).unwrap();
        let rep = validate(&data).unwrap();
        let h3 = rep.checks.iter().find(|c| c.name == "H3").unwrap();
        assert!(!h3.passed);
        assert!(h3.offending_node.is_some());
    }

    #[test]
    fn hamiltonian_examples() {
        let g = grid1(4);
        let h = PowerHamiltonian::quadratic(&g);
        assert_abs_diff_eq!(h.eval(0, &[3.0]), 4.5, epsilon = 1e-14);
        assert_abs_diff_eq!(h.conjugate(0, &[3.0]), 4.5, epsilon = 1e-14);
        let mut d = [0.0];
        h.dp(&[3.0], &mut d);
        assert_abs_diff_eq!(d[0], 3.0, epsilon = 1e-14);

        let shifted = PowerHamiltonian::new(2.0, SpatialField::constant(&g, 1.0), 0.0).unwrap();
        assert_abs_diff_eq!(shifted.eval(2, &[0.0]), -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(shifted.conjugate(2, &[0.0]), 1.0, epsilon = 1e-15);

        let cubic = PowerHamiltonian::new(3.0, SpatialField::constant(&g, 0.0), 0.0).unwrap();
        assert_abs_diff_eq!(cubic.conjugate(0, &[1.0]), 2.0 / 3.0, epsilon = 1e-14);
        let brute = brute_conjugate(|p| p.abs().powi(3) / 3.0, 1.0, -3.0, 3.0, 600_000);
        assert_abs_diff_eq!(brute, 2.0 / 3.0, epsilon = 1e-4);
    }

    #[test]
    fn dp_at_origin_is_zero_for_subquadratic() {
        let g = grid1(4);
        let h = PowerHamiltonian::new(1.5, SpatialField::constant(&g, 0.0), 0.0).unwrap();
        let mut d = [1.0, 1.0];
        h.dp(&[0.0, 0.0], &mut d);
        assert_eq!(d, [0.0, 0.0]);
    }

    #[test]
    fn coupling_examples() {
        let g = grid1(4);
        let c = PowerCoupling::quadratic(&g);
        assert_eq!(c.f(0, 1.0), 1.0);
        assert_eq!(c.big_f(0, 1.0), ExtReal::Finite(0.5));
        assert_abs_diff_eq!(c.f_star(0, 1.0), 0.5, epsilon = 1e-15);
        assert_eq!(c.big_f(0, -1.0), ExtReal::PosInf);
        for q in [1.5, 2.0, 3.0] {
            let cq = PowerCoupling::new(q, SpatialField::constant(&g, 1.0), 0.0).unwrap();
            assert_eq!(cq.f_star(0, -3.0), 0.0);
            assert_eq!(cq.f(1, 0.0), 0.0);
        }
        let c3 = PowerCoupling::new(3.0, SpatialField::constant(&g, 1.0), 0.0).unwrap();
        assert_abs_diff_eq!(c3.f_star(0, 1.0), 2.0 / 3.0, epsilon = 1e-14);
        let brute = brute_conjugate(|m| m.powi(3) / 3.0, 1.0, 0.0, 5.0, 500_000);
        assert_abs_diff_eq!(brute, 2.0 / 3.0, epsilon = 1e-4);
    }

    #[test]
    fn radial_shrink_solves_its_equation() {
        let g = grid1(4);
        for r in [1.5, 2.0, 3.0, 4.5] {
            let h = PowerHamiltonian::new(r, SpatialField::constant(&g, 0.0), 0.0).unwrap();
            for (t0, lam) in [(1.0, 0.5), (10.0, 3.0), (1e-3, 100.0), (5.0, 1e-4)] {
                let t = h.radial_shrink(t0, lam);
                assert!(t >= 0.0 && t <= t0);
                let res = t + lam * t.powf(r - 1.0) - t0;
                assert!(res.abs() <= 1e-12 * t0.max(1.0), "r={r} t0={t0} lam={lam} res={res}");
            }
        }
    }
}
