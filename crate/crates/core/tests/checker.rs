mod common;

use std::f64::consts::TAU;

use common::*;
use mfg_core::checker::{
    check_holder_time, check_weak_solution, compare_solutions, comparison_test, elliptic_residual,
    stability_test, Perturbation, Thresholds,
};
use mfg_core::functionals::PHI_LOC;
use mfg_core::grid::{Field, SpaceTimeGrid};
use mfg_core::model::ProblemData;
use mfg_core::solver::{solve, SolverConfig};

fn thresholds() -> Thresholds {
    Thresholds {
        solver_tol: SolverConfig::default().tol,
        ..Thresholds::default()
    }
}

#[test]
fn delivered_solutions_pass_the_weak_solution_suite() {
    for data in [homogeneous(16, 16), gaussian(32, 32, 0.2)] {
        let sol = solve(&data, &SolverConfig::default()).unwrap();
        let rep = check_weak_solution(&sol.primal.m, &sol.dual.phi, &data, &thresholds()).unwrap();
        assert!(rep.passed, "{:?}", rep.failures);
        assert!(rep.res_iii <= 10.0 * thresholds().solver_tol);
        assert!(rep.condsup_residual <= 1e-6);
    }
}

#[test]
fn corrupted_potential_is_flagged() {
    let data = homogeneous(32, 32);
    let sol = solve(&data, &SolverConfig::default()).unwrap();
    let g = &data.grid;
    let mut phi = sol.dual.phi.clone();
    for k in 1..g.nt() {
        for i in 0..g.n_space() {
            let v = phi.get(k, 0, i) + 0.1 * (TAU * g.position(i)[0]).sin();
            phi.set(k, 0, i, v);
        }
    }
    let rep = check_weak_solution(&sol.primal.m, &phi, &data, &thresholds()).unwrap();
    assert!(rep.res_ii_ae > 0.01, "{}", rep.res_ii_ae);
    assert!(rep.failures.iter().any(|f| f.contains("res_ii_ae")), "{:?}", rep.failures);
    assert!(!rep.passed);
}

#[test]
fn equal_problems_compare_exactly() {
    let data = gaussian(16, 16, 0.2);
    let rep = comparison_test(&data, &data, &SolverConfig::default(), 0.0).unwrap();
    assert!(rep.ordered);
    assert_eq!(rep.max_defect, 0.0);
}

#[test]
fn raised_terminal_cost_raises_phi() {
    let data = homogeneous(16, 16);
    let g = data.grid.clone();
    let raised = data.with_terminal(mfg_core::grid::SpatialField::from_fn(&g, |p| {
        0.1 * (1.0 + (TAU * p[0]).cos())
    }));
    let cfg = SolverConfig::default();
    let s1 = solve(&data, &cfg).unwrap();
    let s2 = solve(&raised, &cfg).unwrap();
    let rep = compare_solutions(&s1, &s2, &g, 1e-6);
    assert!(rep.ordered, "{}", rep.max_defect);
    assert!(rep.mean_gap_near_terminal > 0.0);
}

#[test]
fn unordered_terminal_costs_are_rejected() {
    let data = homogeneous(8, 8);
    let g = data.grid.clone();
    let lower = data.with_terminal(mfg_core::grid::SpatialField::constant(&g, -0.1));
    assert!(comparison_test(&data, &lower, &SolverConfig::default(), 1e-6).is_err());
}

#[test]
fn zero_perturbation_gives_zero_distance() {
    let data = gaussian(16, 16, 0.2);
    let rep = stability_test(&data, Perturbation::Terminal, &[0.0], &SolverConfig::default()).unwrap();
    assert_eq!(rep.rows[0].m_lq, 0.0);
    assert_eq!(rep.rows[0].phi_inf, 0.0);
}

#[test]
fn initial_perturbations_shrink_the_distance() {
    let data = gaussian(16, 16, 0.2);
    let eps: Vec<f64> = (1..=5).map(|k| 0.5f64.powi(k)).collect();
    let rep = stability_test(&data, Perturbation::Initial, &eps, &SolverConfig::default()).unwrap();
    assert!(rep.m_strictly_decreasing, "{:?}", rep.rows);
    assert!(rep.phi_decreasing, "{:?}", rep.rows);
}

#[test]
fn holder_constant_is_mesh_stable() {
    let mut ratios = Vec::new();
    for nx in [16, 32] {
        let data = gaussian(nx, 2 * nx, 0.2);
        let sol = solve(&data, &SolverConfig::default()).unwrap();
        let rep = check_holder_time(&sol.dual.phi, &sol.dual.alpha, &data).unwrap();
        assert!(rep.worst_ratio.is_finite());
        ratios.push(rep.worst_ratio);
    }
    assert!(ratios[1] <= 2.0 * ratios[0] && ratios[0] <= 2.0 * ratios[1], "{ratios:?}");
}

#[test]
fn analytic_elliptic_residual_vanishes() {
    for dim in [1, 2] {
        for nx in [16, 32, 64] {
            if dim == 2 && nx == 64 {
                continue;
            }
            let data = ProblemData::homogeneous(SpaceTimeGrid::new(dim, nx, nx, 1.0).unwrap());
            let phi = Field::from_fn(&data.grid, PHI_LOC, |t, _| 1.0 - t);
            let rep = elliptic_residual(&phi, &data, 1e-10).unwrap();
            assert!(rep.max_abs <= 1e-6, "{}", rep.max_abs);
            assert!(rep.checked_nodes > 0);
        }
    }
}
