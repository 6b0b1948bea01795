mod common;

use mfg_core::functionals::{
    continuity_forward, eval_a, eval_b, hj_operator, k_eval, prox_k, upwind_divergence_slice,
    upwind_gradient, DualState, PrimalState, ALPHA_LOC, M_LOC, PHI_LOC, W_LOC,
};
use mfg_core::grid::{
    divergence, divergence_slice, gradient_slice, mass, project_simplex, spatial_gradient,
    time_derivative, time_derivative_adjoint, Field, Location, SpaceLoc, SpaceTimeGrid,
    SpatialField, TimeLoc,
};
use mfg_core::io::{field_from_bytes, field_from_csv, field_to_bytes, field_to_csv};
use mfg_core::model::{PowerCoupling, PowerHamiltonian, ProblemData};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_vec(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(lo..hi)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn exponent() -> impl Strategy<Value = f64> {
    prop_oneof![Just(1.5), Just(2.0), Just(3.0)]
}

fn grid_size() -> impl Strategy<Value = usize> {
    prop_oneof![Just(4usize), Just(8), Just(16)]
}

fn hamiltonian(grid: &SpaceTimeGrid, r: f64, ell: f64) -> PowerHamiltonian {
    PowerHamiltonian::new(r, SpatialField::constant(grid, ell), 0.0).unwrap()
}

fn coupling(grid: &SpaceTimeGrid, q: f64, c: f64) -> PowerCoupling {
    PowerCoupling::new(q, SpatialField::constant(grid, c), 0.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(250))]

    #[test]
    fn young_fenchel_holds(r in exponent(), ell in -1.0..1.0f64, seed in any::<u64>()) {
        let g = common::grid1(4, 2);
        let h = hamiltonian(&g, r, ell);
        let mut rng = rng(seed);
        for _ in 0..400 {
            let p = random_vec(&mut rng, 2, -5.0, 5.0);
            let xi = random_vec(&mut rng, 2, -5.0, 5.0);
            let slack = h.eval(0, &p) + h.conjugate(0, &xi) - dot(&p, &xi);
            prop_assert!(slack >= -1e-12 * (1.0 + dot(&p, &xi).abs()), "slack {slack}");
        }
    }

    #[test]
    fn dp_matches_finite_differences(r in exponent(), seed in any::<u64>()) {
        let g = common::grid1(4, 2);
        let h = hamiltonian(&g, r, 0.0);
        let mut rng = rng(seed);
        let p = random_vec(&mut rng, 2, -3.0, 3.0);
        prop_assume!(norm(&p) > 0.1);
        let mut dp = [0.0; 2];
        h.dp(&p, &mut dp);
        let step = 1e-5;
        for a in 0..2 {
            let mut hi = p.clone();
            let mut lo = p.clone();
            hi[a] += step;
            lo[a] -= step;
            let fd = (h.eval(0, &hi) - h.eval(0, &lo)) / (2.0 * step);
            prop_assert!((fd - dp[a]).abs() <= 1e-6 * (1.0 + dp[a].abs()), "{fd} vs {}", dp[a]);
        }
    }

    #[test]
    fn coupling_vanishes_at_zero_density(q in prop_oneof![Just(1.5), Just(2.0), Just(3.0)], c in 0.1..5.0f64) {
        let g = common::grid1(8, 2);
        let f = coupling(&g, q, c);
        for i in 0..g.n_space() {
            prop_assert_eq!(f.f(i, 0.0), 0.0);
        }
    }

    #[test]
    fn gradient_and_divergence_are_adjoint(dim in 1usize..=2, nx in grid_size(), seed in any::<u64>()) {
        let g = SpaceTimeGrid::new(dim, nx, 2, 1.0).unwrap();
        let n = g.n_space();
        let mut rng = rng(seed);
        let phi = random_vec(&mut rng, n, -1.0, 1.0);
        let w = random_vec(&mut rng, dim * n, -1.0, 1.0);
        let mut grad = vec![0.0; dim * n];
        let mut div = vec![0.0; n];
        gradient_slice(&g, &phi, &mut grad);
        divergence_slice(&g, &w, &mut div);
        let lhs = dot(&grad, &w);
        let rhs = -dot(&phi, &div);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()).max(1.0));
    }

    #[test]
    fn upwind_operators_are_adjoint(dim in 1usize..=2, nx in grid_size(), seed in any::<u64>()) {
        let g = SpaceTimeGrid::new(dim, nx, 2, 1.0).unwrap();
        let n = g.n_space();
        let mut rng = rng(seed);
        let phi = random_vec(&mut rng, n, -1.0, 1.0);
        let w = random_vec(&mut rng, 2 * dim * n, -1.0, 1.0);
        let mut b = vec![0.0; 2 * dim];
        let mut lhs = 0.0;
        for i in 0..n {
            upwind_gradient(&g, &phi, i, &mut b);
            for (c, bc) in b.iter().enumerate() {
                lhs += bc * w[c * n + i];
            }
        }
        let mut div = vec![0.0; n];
        upwind_divergence_slice(&g, &w, &mut div);
        let rhs = -dot(&phi, &div);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()).max(1.0));
    }

    #[test]
    fn time_derivative_is_adjoint(dim in 1usize..=2, nx in grid_size(), nt in grid_size(), seed in any::<u64>()) {
        let g = SpaceTimeGrid::new(dim, nx, nt, 1.0).unwrap();
        let mut rng = rng(seed);
        let node = Location::new(TimeLoc::Node, SpaceLoc::Cell);
        let cell = Location::new(TimeLoc::Cell, SpaceLoc::Cell);
        let n = g.n_space();
        let phi = Field::from_vec(&g, node, 1, random_vec(&mut rng, (nt + 1) * n, -1.0, 1.0)).unwrap();
        let m = Field::from_vec(&g, cell, 1, random_vec(&mut rng, nt * n, -1.0, 1.0)).unwrap();
        let lhs = dot(time_derivative(&g, &phi).unwrap().data(), m.data());
        let rhs = dot(phi.data(), time_derivative_adjoint(&g, &m).unwrap().data());
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()).max(1.0));
    }

    #[test]
    fn divergence_conserves_mass(dim in 1usize..=2, nx in grid_size(), seed in any::<u64>(), c in -3.0..3.0f64) {
        let g = SpaceTimeGrid::new(dim, nx, 2, 1.0).unwrap();
        let n = g.n_space();
        let mut rng = rng(seed);
        let loc = Location::new(TimeLoc::Cell, SpaceLoc::Face);
        let w = Field::from_vec(&g, loc, dim, random_vec(&mut rng, 2 * dim * n, -1.0, 1.0)).unwrap();
        let div = divergence(&g, &w).unwrap();
        let scale: f64 = w.data().iter().map(|v| v.abs()).sum::<f64>() * nx as f64;
        for k in 0..2 {
            prop_assert!(div.slice(k).iter().sum::<f64>().abs() <= 1e-13 * scale);
        }
        let flat = Field::from_vec(&g, loc, dim, vec![c; 2 * dim * n]).unwrap();
        prop_assert!(divergence(&g, &flat).unwrap().data().iter().all(|v| *v == 0.0));
        let node = Location::new(TimeLoc::Node, SpaceLoc::Node);
        let constant = Field::from_vec(&g, node, 1, vec![c; 3 * n]).unwrap();
        prop_assert!(spatial_gradient(&g, &constant).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn simplex_projection_is_idempotent_and_nonexpansive(nx in grid_size(), seed in any::<u64>()) {
        let g = common::grid1(nx, 2);
        let mut rng = rng(seed);
        let a = random_vec(&mut rng, nx, -2.0, 3.0);
        let b = random_vec(&mut rng, nx, -2.0, 3.0);
        let pa = project_simplex(&g, &a);
        let pb = project_simplex(&g, &b);
        prop_assert!(pa.iter().all(|v| *v >= 0.0));
        prop_assert!((mass(&g, &pa) - 1.0).abs() <= 1e-12);
        let again = project_simplex(&g, &pa);
        let drift: f64 = again.iter().zip(&pa).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(drift <= 1e-12, "drift {drift}");
        let before: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let after: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x - y).collect();
        prop_assert!(norm(&after) <= norm(&before) + 1e-12);
    }

    #[test]
    fn prox_k_satisfies_optimality(
        r in exponent(),
        q in prop_oneof![Just(1.5), Just(2.0)],
        tau in 0.05..2.0f64,
        seed in any::<u64>(),
    ) {
        let g = common::grid1(4, 2);
        let h = hamiltonian(&g, r, 0.3);
        let f = coupling(&g, q, 1.3);
        let x = g.position(1);
        let mut rng = rng(seed);
        let a0 = rng.gen_range(-2.0..2.0);
        let b0 = random_vec(&mut rng, 2, -2.0, 2.0);
        let (a, b) = prox_k(&h, &f, &x, a0, &b0, tau).unwrap();
        let s = -a + h.eval_at(&x, &b);
        if s <= 0.0 {
            // inside {K = 0} the prox is the identity
            prop_assert_eq!(a, a0);
            prop_assert_eq!(b, b0);
        } else {
            // a - a0 - tau F*'(s) = 0 and b - b0 + tau F*'(s) D_pH(b) = 0
            let mu = f.f_star_prime_with_weight(1.3, s);
            let mut dp = [0.0; 2];
            h.dp(&b, &mut dp);
            let scale = 1.0 + a0.abs() + norm(&b0);
            prop_assert!((a - a0 - tau * mu).abs() <= 1e-8 * scale);
            for c in 0..2 {
                prop_assert!((b[c] - b0[c] + tau * mu * dp[c]).abs() <= 1e-8 * scale);
            }
            // and no nearby point does better
            let objective = |aa: f64, bb: &[f64]| {
                let d2 = (aa - a0).powi(2) + bb.iter().zip(&b0).map(|(u, v)| (u - v).powi(2)).sum::<f64>();
                0.5 * d2 + tau * k_eval(&h, &f, &x, aa, bb)
            };
            let best = objective(a, &b);
            for _ in 0..20 {
                let da = rng.gen_range(-1e-3..1e-3);
                let db = random_vec(&mut rng, 2, -1e-3, 1e-3);
                let bb: Vec<f64> = b.iter().zip(&db).map(|(u, v)| u + v).collect();
                prop_assert!(objective(a + da, &bb) >= best - 1e-12);
            }
        }
    }

    #[test]
    fn csv_and_binary_round_trips_are_exact(dim in 1usize..=2, seed in any::<u64>()) {
        let g = SpaceTimeGrid::new(dim, 4, 3, 1.0).unwrap();
        let mut rng = rng(seed);
        for (loc, comps) in [(PHI_LOC, 1), (M_LOC, 1), (ALPHA_LOC, 1), (W_LOC, 2 * dim)] {
            let len = g.slices(loc.time) * comps * g.n_space();
            let values: Vec<f64> = (0..len)
                .map(|_| rng.gen_range(-1.0..1.0) * 10f64.powi(rng.gen_range(-300..300)))
                .collect();
            let f = Field::from_vec(&g, loc, comps, values).unwrap();
            let text = field_to_csv(&g, &f);
            let back = field_from_csv(&g, loc, comps, &text, "mem").unwrap();
            prop_assert!(back.data().iter().zip(f.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            let raw = field_from_bytes(&g, loc, comps, &field_to_bytes(&g, &f)).unwrap();
            prop_assert_eq!(raw.data(), f.data());
        }
    }
}

/// Feasible primal pair: small sign-constrained fluxes on a positive density.
fn feasible_primal(data: &ProblemData, rng: &mut ChaCha8Rng, size: f64) -> PrimalState {
    let g = &data.grid;
    let n = g.n_space();
    let d = g.dim();
    let mut w = Field::zeros(g, W_LOC, 2 * d);
    for k in 0..g.nt() {
        for c in 0..2 * d {
            for i in 0..n {
                let v: f64 = rng.gen_range(0.0..size);
                w.set(k, c, i, if c < d { v } else { -v });
            }
        }
    }
    let m = continuity_forward(g, data.m0.values(), &w).unwrap();
    assert!(m.data().iter().all(|v| *v > 0.0));
    PrimalState::new(g, m, w).unwrap()
}

fn random_data(seed: u64, r: f64, q: f64) -> ProblemData {
    let g = common::grid1(8, 8);
    let mut rng = rng(seed);
    let ell = SpatialField::new(&g, random_vec(&mut rng, 8, 0.0, 0.5)).unwrap();
    let c = SpatialField::new(&g, random_vec(&mut rng, 8, 0.5, 2.0)).unwrap();
    let phi_t = SpatialField::new(&g, random_vec(&mut rng, 8, -0.2, 0.2)).unwrap();
    ProblemData {
        hamiltonian: PowerHamiltonian::new(r, ell, 100.0).unwrap(),
        coupling: PowerCoupling::new(q, c, 100.0).unwrap(),
        m0: common::cosine(&g, 1.0, 0.5),
        phi_terminal: phi_t,
        grid: g,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn eval_b_is_convex_along_segments(seed in any::<u64>(), r in exponent()) {
        let data = random_data(seed, r, 2.0);
        let mut rng = rng(seed ^ 0x5eed);
        let p0 = feasible_primal(&data, &mut rng, 0.1);
        let p1 = feasible_primal(&data, &mut rng, 0.1);
        let mid = |a: &Field, b: &Field| {
            let mut out = a.clone();
            out.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x = 0.5 * (*x + y));
            out
        };
        let pm = PrimalState::new(&data.grid, mid(&p0.m, &p1.m), mid(&p0.w, &p1.w)).unwrap();
        let b0 = eval_b(&p0, &data).unwrap().finite().unwrap();
        let b1 = eval_b(&p1, &data).unwrap().finite().unwrap();
        let bm = eval_b(&pm, &data).unwrap().finite().unwrap();
        prop_assert!(bm <= 0.5 * (b0 + b1) + 1e-10, "{bm} > {}", 0.5 * (b0 + b1));
    }

    #[test]
    fn weak_duality_on_feasible_pairs(
        seed in any::<u64>(),
        r in exponent(),
        q in prop_oneof![Just(1.5), Just(2.0), Just(3.0)],
    ) {
        let data = random_data(seed, r, q);
        let g = &data.grid;
        let mut rng = rng(seed ^ 0xd0a1);
        let mut phi = Field::from_vec(g, PHI_LOC, 1, random_vec(&mut rng, (g.nt() + 1) * g.n_space(), -0.5, 0.5)).unwrap();
        phi.slice_mut(g.nt()).copy_from_slice(data.phi_terminal.values());
        let mut alpha = hj_operator(&phi, &data).unwrap();
        for v in alpha.data_mut() {
            *v = v.max(0.0) + rng.gen_range(0.0..0.1);
        }
        let dual = DualState::new(g, phi, alpha).unwrap();
        let primal = feasible_primal(&data, &mut rng, 0.1);
        let a = eval_a(&dual, &data).unwrap();
        let b = eval_b(&primal, &data).unwrap().finite().unwrap();
        prop_assert!(a + b >= -1e-10, "A + B = {}", a + b);
    }
}
