use proptest::prelude::*;

use svpfp::eulerian::{substep_transport_x, EulerianSolver, NoiseDriver, SolverState, StepPlan};
use svpfp::field_solver::solve_poisson;
use svpfp::noise_model::{build_basis, coloring_law, ColoringLaw, NoisePath};
use svpfp::phase_space::snapshot::{read_field, write_field};
use svpfp::phase_space::{maxwellian, theta, DistributionField, GridSpec};

fn grid() -> GridSpec {
    GridSpec::new(1, 16, 32, 6.0).unwrap()
}

fn field(a: f64, b: f64, k: f64) -> DistributionField {
    DistributionField::from_fn(grid(), move |x, v| {
        (1.0 + a * (k * x[0]).cos() + b * (x[0] + v[0]).sin() * 0.1) * maxwellian(v)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn free_transport_keeps_mass_and_l2(a in -0.5f64..0.5, b in -1.0f64..1.0, t in 0.0f64..3.0) {
        let mut f = field(a, b, 2.0);
        let (m0, l0) = (f.mass(), f.l2_norm());
        substep_transport_x(&mut f, t);
        prop_assert!((f.mass() - m0).abs() <= 1e-12 * m0);
        prop_assert!((f.l2_norm() - l0).abs() <= 1e-12 * l0);
    }

    #[test]
    fn poisson_is_linear(a in -1.0f64..1.0, b in -1.0f64..1.0, s in -3.0f64..3.0) {
        let g = grid();
        let r1: Vec<f64> = (0..g.nx).map(|i| a * g.x_node(i).cos()).collect();
        let r2: Vec<f64> = (0..g.nx).map(|i| b * (3.0 * g.x_node(i)).sin()).collect();
        let sum: Vec<f64> = r1.iter().zip(&r2).map(|(x, y)| x + s * y).collect();
        let (e1, e2, es) = (
            solve_poisson(&g, &r1).unwrap().e,
            solve_poisson(&g, &r2).unwrap().e,
            solve_poisson(&g, &sum).unwrap().e,
        );
        for i in 0..g.nx {
            prop_assert!((es[0][i] - e1[0][i] - s * e2[0][i]).abs() < 1e-13);
        }
    }

    #[test]
    fn refined_noise_sums_to_parent(seed in 0u64..1000, step in 0usize..8, levels in 1u32..5) {
        let path = NoisePath::new(seed, 3, 0.1, 8);
        let fine = path.refined(levels);
        let parent = path.increment(step, 17).unwrap();
        let n = 1usize << levels;
        let sum: f64 = (0..n).map(|i| fine.increment(step * n + i, 17).unwrap()).sum();
        prop_assert!((sum - parent).abs() < 1e-12);
    }

    #[test]
    fn cutoff_is_a_monotone_step(x in 0.0f64..3.0, y in 0.0f64..3.0) {
        let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
        prop_assert!(theta(hi) <= theta(lo));
        prop_assert!((0.0..=1.0).contains(&theta(x)));
    }
}

#[test]
fn noisy_run_is_deterministic_per_seed() {
    let g = grid();
    let basis = build_basis(1, 2).unwrap();
    let table = coloring_law(&ColoringLaw::power(2.0), 4, &basis).unwrap();
    let solver = EulerianSolver::new(g, StepPlan::new(0.05, 0.2))
        .unwrap()
        .with_noise(NoiseDriver::new(&g, basis, table).unwrap());
    let run = |seed| {
        let mut state = SolverState::new(field(0.1, 0.0, 1.0), NoisePath::new(seed, 0, 0.05, 10));
        solver.run(&mut state, 10).unwrap();
        state.f.values
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}

#[test]
fn snapshot_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut f = field(0.2, 0.5, 1.0);
    f.time = 0.375;
    let sidecar = write_field(&dir.path().join("snap"), &f).unwrap();
    let back = read_field(&sidecar).unwrap();
    assert_eq!(back.values, f.values);
    assert_eq!(back.grid, f.grid);
    assert_eq!(back.time, f.time);
}
