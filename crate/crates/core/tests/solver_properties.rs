use proptest::prelude::*;

use surrogate_core::solver::{
    init_field, run_simulation, step, Grid, SimulationTag, SolverOptions,
};
use surrogate_core::SimParams;

fn temps() -> impl Strategy<Value = SimParams> {
    prop::array::uniform5(100.0f64..500.0).prop_map(|r| SimParams::from_row(&r))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fields_stay_within_the_extreme_temperatures(p in temps(), n in 3usize..12, dt in 1e-4f64..1.0) {
        let grid = Grid::unit_square(n, dt, 1.0);
        let opts = SolverOptions::for_grid(&grid);
        let mut f = init_field(&p, &grid);
        for _ in 0..5 {
            f = step(&f, &p, &grid, opts).unwrap();
            prop_assert!(f.min() >= p.min_temp() - 1e-6 && f.max() <= p.max_temp() + 1e-6);
        }
    }

    #[test]
    fn emitted_steps_are_reproducible(p in temps(), steps in 1usize..8) {
        let grid = Grid::unit_square(6, 0.01, 1.0);
        let collect = || {
            let mut out = Vec::new();
            run_simulation(&p, &grid, steps, SolverOptions::for_grid(&grid), SimulationTag { client_id: 0, sim_index: 0 }, |s| {
                out.push(s.field);
                Ok::<(), std::convert::Infallible>(())
            }).unwrap();
            out
        };
        prop_assert_eq!(collect(), collect());
    }
}

/// With one temperature per side, the steady state at the centre of a square
/// is the mean of the four side temperatures.
#[test]
fn square_steady_state_centre_is_the_boundary_mean() {
    let n = 17;
    let p = SimParams {
        t_ic: 300.0,
        t_x1: 100.0,
        t_x2: 500.0,
        t_y1: 250.0,
        t_y2: 420.0,
    };
    let grid = Grid::unit_square(n, 10.0, 1.0);
    let opts = SolverOptions {
        tol: 1e-12,
        max_iter: 100 * grid.len(),
    };
    let mut f = init_field(&p, &grid);
    for _ in 0..40 {
        f = step(&f, &p, &grid, opts).unwrap();
    }
    let centre = f.values[(n / 2) * n + n / 2];
    let mean = (p.t_x1 + p.t_x2 + p.t_y1 + p.t_y2) / 4.0;
    assert!((centre - mean).abs() / mean < 1e-6, "{centre} vs {mean}");
}
