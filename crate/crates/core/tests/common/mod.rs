//! Helpers shared by the integration tests.

#![allow(dead_code)]

use std::collections::HashMap;

use memctrl::grid::Grid;
use memctrl::network::*;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// A linear crossbar instance with its stimulus.
#[derive(Debug, Clone)]
pub struct LinearCase {
    pub cfg: ArrayConfig,
    pub select: Grid<CellMode>,
    pub drives: DriveSet,
    pub devices: Grid<CellDevice>,
}

impl LinearCase {
    pub fn network(&self) -> NetworkDescription {
        build_network(&self.cfg, &self.select, &self.drives, &self.devices).expect("valid linear case")
    }
}

/// Random resistive array with voltage drives sensed at the driver. Every
/// resistance is strictly positive so no nodes merge.
pub fn random_linear_case(rng: &mut impl Rng, n_rows: usize, n_cols: usize) -> LinearCase {
    let cfg = ArrayConfig {
        n_rows,
        n_cols,
        r_seg_row: rng.gen_range(0.5..20.0),
        r_seg_col: rng.gen_range(0.5..20.0),
        r_switch_on: rng.gen_range(10.0..500.0),
        r_switch_off: 10f64.powf(rng.gen_range(6.0..9.0)),
        ideal_switches: false,
    };
    let devices = Grid::from_fn(n_rows, n_cols, |_, _| CellDevice::Linear(10f64.powf(rng.gen_range(3.0..5.0))));
    let mut select = Grid::from_fn(n_rows, n_cols, |_, _| match rng.gen_range(0..3) {
        0 => CellMode::GroundedBoth,
        1 => CellMode::Read,
        _ => CellMode::HalfSelect,
    });
    let mut rows = Vec::with_capacity(n_rows);
    for r in 0..n_rows {
        if rng.gen_bool(0.2) {
            rows.push(RowDrive::Idle);
            continue;
        }
        if rng.gen_bool(0.3) {
            let c = rng.gen_range(0..n_cols);
            select[(r, c)] = if rng.gen_bool(0.5) { CellMode::VoltageWriteAE } else { CellMode::VoltageWriteOE };
        }
        rows.push(RowDrive::Voltage { v: rng.gen_range(-1.0..1.0), i_limit: f64::INFINITY, sense: Sense::Driver });
    }
    let cols = (0..n_cols)
        .map(|_| match rng.gen_range(0..3) {
            0 => ColumnTermination::Ground,
            1 => ColumnTermination::Adc,
            _ => ColumnTermination::Supply(rng.gen_range(-0.5..0.5)),
        })
        .collect();
    LinearCase { cfg, select, drives: DriveSet { rows, cols }, devices }
}

/// Nodal solution of a linear case, written out element by element from the
/// array topology and solved with a dense LU factorization.
pub struct DenseSolution {
    pub voltages: HashMap<RawNode, f64>,
    pub column_currents: Vec<f64>,
}

pub fn dense_solve(case: &LinearCase) -> DenseSolution {
    let (nr, nc) = (case.cfg.n_rows, case.cfg.n_cols);
    let cfg = &case.cfg;
    let mut fixed: HashMap<RawNode, f64> = HashMap::new();
    fixed.insert(RawNode::Ground, 0.0);
    for (r, d) in case.drives.rows.iter().enumerate() {
        let v = match *d {
            RowDrive::Idle => 0.0,
            RowDrive::Voltage { v, sense: Sense::Driver, .. } => v,
            _ => panic!("oracle handles driver-sensed voltage drives only"),
        };
        fixed.insert(RawNode::Driver(r), v);
    }
    for (c, t) in case.drives.cols.iter().enumerate() {
        let v = match *t {
            ColumnTermination::Ground | ColumnTermination::Adc => 0.0,
            ColumnTermination::Supply(v) => v,
        };
        fixed.insert(RawNode::Termination(c), v);
    }

    let mut unknown: Vec<RawNode> = Vec::new();
    for r in 0..nr {
        for c in 0..nc {
            unknown.extend([RawNode::RowLine(r, c), RawNode::ColLine(r, c), RawNode::Ae(r, c), RawNode::Oe(r, c)]);
        }
    }
    let index: HashMap<RawNode, usize> = unknown.iter().enumerate().map(|(k, n)| (*n, k)).collect();

    let mut branches: Vec<(RawNode, RawNode, f64)> = Vec::new();
    for r in 0..nr {
        for c in 0..nc {
            let prev = if c == 0 { RawNode::Driver(r) } else { RawNode::RowLine(r, c - 1) };
            branches.push((prev, RawNode::RowLine(r, c), cfg.r_seg_row));
            let next = if r + 1 == nr { RawNode::Termination(c) } else { RawNode::ColLine(r + 1, c) };
            branches.push((RawNode::ColLine(r, c), next, cfg.r_seg_col));
            let CellDevice::Linear(rd) = case.devices[(r, c)] else { panic!("linear devices only") };
            branches.push((RawNode::Ae(r, c), RawNode::Oe(r, c), rd));
            // Which throw of each multiplexer is closed.
            let (ae_on, oe_on) = match case.select[(r, c)] {
                CellMode::GroundedBoth => (0, 0),
                CellMode::VoltageWriteAE => (1, 0),
                CellMode::VoltageWriteOE | CellMode::CurrentWrite => (0, 1),
                CellMode::Read | CellMode::HalfSelect => (1, 2),
            };
            let targets = [RawNode::Ground, RawNode::RowLine(r, c), RawNode::ColLine(r, c)];
            for (k, t) in targets[..2].iter().enumerate() {
                let ohms = if k == ae_on { cfg.r_switch_on } else { cfg.r_switch_off };
                branches.push((RawNode::Ae(r, c), *t, ohms));
            }
            for (k, t) in targets.iter().enumerate() {
                let ohms = if k == oe_on { cfg.r_switch_on } else { cfg.r_switch_off };
                branches.push((RawNode::Oe(r, c), *t, ohms));
            }
        }
    }

    let n = unknown.len();
    let mut g = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    for &(a, b, ohms) in &branches {
        let y = 1.0 / ohms;
        match (index.get(&a), index.get(&b)) {
            (Some(&i), Some(&j)) => {
                g[(i, i)] += y;
                g[(j, j)] += y;
                g[(i, j)] -= y;
                g[(j, i)] -= y;
            }
            (Some(&i), None) => {
                g[(i, i)] += y;
                rhs[i] += y * fixed[&b];
            }
            (None, Some(&j)) => {
                g[(j, j)] += y;
                rhs[j] += y * fixed[&a];
            }
            (None, None) => {}
        }
    }
    let x = g.lu().solve(&rhs).expect("oracle matrix is nonsingular");
    let mut voltages = fixed;
    for (k, node) in unknown.iter().enumerate() {
        voltages.insert(*node, x[k]);
    }
    let column_currents = (0..nc)
        .map(|c| (voltages[&RawNode::ColLine(nr - 1, c)] - voltages[&RawNode::Termination(c)]) / cfg.r_seg_col)
        .collect();
    DenseSolution { voltages, column_currents }
}

/// Largest node-voltage mismatch between solver and oracle, relative to the
/// largest fixed potential in the circuit.
pub fn max_relative_mismatch(net: &NetworkDescription, op: &OperatingPoint, oracle: &DenseSolution) -> f64 {
    let scale = oracle.voltages.values().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-3);
    let mut worst = 0.0f64;
    for (node, v_ref) in &oracle.voltages {
        let v = op.voltage(net, *node).expect("node present in the network");
        worst = worst.max((v - v_ref).abs() / scale);
    }
    worst
}
