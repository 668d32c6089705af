use memctrl::device::{conductance_readout, DeviceState};
use memctrl::frontend::{AdcSpec, DacSpec};
use memctrl::grid::Grid;
use memctrl::network::{memristors, vmm, ArrayConfig};
use memctrl::programming::*;
use proptest::prelude::*;

fn ctx(n: usize) -> ProgramContext {
    ProgramContext { array: ArrayConfig::with_size(n, n), ..ProgramContext::default() }
}

fn spec() -> WeightMapSpec {
    WeightMapSpec { g_min: 2e-5, g_max: 6e-4, w_min: -1.0, w_max: 1.0, tolerance: 0.05, mode: ProgramMode::Voltage, max_pulses: 32 }
}

#[test]
fn hrs_and_lrs_targets_need_at_most_three_pulses() {
    let mut c = ctx(1);
    c.options.policy = StepPolicy::WidthHalving;
    let (g_hrs, g_lrs) = g_range(&c.params, 0.25).unwrap();
    for (start, g) in [(DeviceState::lrs(&c.params), g_hrs), (DeviceState::hrs(&c.params), g_lrs)] {
        let states = Grid::filled(1, 1, start);
        let (_, r) = read_verify_program(&ProgramTarget::new(0, 0, g), &states, &c).unwrap();
        assert!(r.success);
        assert!((1..=3).contains(&r.pulses()), "{} pulses", r.pulses());
    }
}

#[test]
fn unreachable_cell_fails_alone_and_others_are_untouched() {
    let c = ctx(2);
    let states = Grid::filled(2, 2, DeviceState::hrs(&c.params));
    let targets = [ProgramTarget::new(0, 0, 2e-4), ProgramTarget::new(1, 1, 1e-3)];
    let (after, report) = program_array(&targets, &states, &c).unwrap();
    assert!(report.cells[0].success());
    assert!(matches!(report.cells[1], CellOutcome::Rejected { row: 1, col: 1, .. }));
    assert_eq!(report.failures(), 1);
    for (r, col) in [(0, 1), (1, 0), (1, 1)] {
        let (a, b) = (states[(r, col)].n_disc, after[(r, col)].n_disc);
        assert!((a - b).abs() < 1e-4 * a, "cell ({r}, {col}) drifted");
    }
}

#[test]
fn resistance_matrix_pipeline_reproduces_column_sums() {
    let c = ctx(2);
    let ohms = [[5e3, 1.8e3], [3e3, 65e3]];
    let states = Grid::filled(2, 2, DeviceState::hrs(&c.params));
    let targets: Vec<ProgramTarget> =
        (0..2).flat_map(|r| (0..2).map(move |col| ProgramTarget::new(r, col, 1.0 / ohms[r][col]))).collect();
    let (after, report) = program_array(&targets, &states, &c).unwrap();
    assert!(report.all_succeeded(), "{}", report.to_csv());
    let res = vmm(&[0.25, 0.25], &memristors(&after), &ArrayConfig::ideal(2, 2), &AdcSpec::default(), &c.params).unwrap();
    for (col, expected) in [(0, 0.25 / 5e3 + 0.25 / 3e3), (1, 0.25 / 1.8e3 + 0.25 / 65e3)] {
        assert!((res.currents[col] - expected).abs() <= 0.05 * expected, "column {col}: {:e} vs {expected:e}", res.currents[col]);
    }
}

#[test]
fn tolerance_below_dac_floor_is_rejected() {
    let c = ctx(1);
    let states = Grid::filled(1, 1, DeviceState::hrs(&c.params));
    let mut t = ProgramTarget::new(0, 0, 1e-4);
    t.tolerance = 0.5 * dac_resolution_floor(&DacSpec::default(), 0.25);
    assert!(matches!(read_verify_program(&t, &states, &c), Err(ProgramError::ToleranceTooTight { .. })));
}

#[test]
fn uniform_weights_give_uniform_targets() {
    let w = Grid::filled(3, 4, 0.3);
    let m = map_weights(&w, &spec(), &DacSpec::default(), 0.25).unwrap();
    let g0 = m.targets[(0, 0)].g_target;
    assert!(m.targets.values().all(|t| t.g_target == g0));
    let ends = map_weights(&Grid::from_rows(vec![vec![-1.0, 1.0]]).unwrap(), &spec(), &DacSpec::default(), 0.25).unwrap();
    assert_eq!(ends.targets[(0, 0)].g_target, 2e-5);
    assert_eq!(ends.targets[(0, 1)].g_target, 6e-4);
}

proptest! {
    #[test]
    fn weight_map_round_trips(w in prop::collection::vec(-1.0f64..=1.0, 6)) {
        let grid = Grid::from_fn(2, 3, |r, c| w[3 * r + c]);
        let m = map_weights(&grid, &spec(), &DacSpec::default(), 0.25).unwrap();
        let back = unmap_weights(&m.targets.map(|t| t.g_target), &spec());
        for ((_, a), (_, b)) in grid.iter().zip(back.iter()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn success_is_confirmed_by_independent_readout(frac in 0.05f64..0.95, from_lrs in any::<bool>()) {
        let c = ctx(1);
        let (g_hrs, g_lrs) = g_range(&c.params, 0.25).unwrap();
        let g = g_hrs + frac * (g_lrs - g_hrs);
        let start = if from_lrs { DeviceState::lrs(&c.params) } else { DeviceState::hrs(&c.params) };
        let (after, r) = read_verify_program(&ProgramTarget::new(0, 0, g), &Grid::filled(1, 1, start), &c).unwrap();
        if r.success {
            let g_indep = conductance_readout(after[(0, 0)], &c.params, 0.25).unwrap();
            prop_assert!(r.target.contains(g_indep));
        }
    }
}
