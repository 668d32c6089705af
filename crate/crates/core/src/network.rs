//! Resistive network of an n x m 2T1R array and its DC operating point.
//!
//! Every cell has an AE and an OE node. Each terminal sits behind a
//! multiplexer whose throws reach local ground or the row line (both
//! terminals) or the column line (OE only). Row and column lines are chains of
//! lumped segments; the row driver feeds column 0 and the column termination
//! sits below the last row. Zero-ohm elements are merged into single nodes.
//!
//! The nonlinear system is solved by Newton iteration on the modified nodal
//! formulation. A regulated voltage drive may sense across the selected cell,
//! so line and switch drops on both sides are compensated up to the pass
//! device's current limit.

use std::collections::hash_map::DefaultHasher;
use std::fmt::Write as _;
use std::hash::{Hash, Hasher};

use thiserror::Error;

use crate::device::{device_current, DeviceError, DeviceParams, DeviceState, V_READ_MAX};
use crate::frontend::{adc_read, AdcSpec, FrontendError};
use crate::grid::Grid;
use crate::linalg::BandMatrix;

/// Newton gives up after this many linear solves, source stepping included.
pub const MAX_NEWTON_ITER: usize = 200;
/// Scaled KCL residual accepted at convergence.
pub const KCL_TOL: f64 = 1e-9;
/// Largest node-voltage update accepted at convergence.
pub const DV_TOL: f64 = 1e-6;
/// Central-difference step for the device conductance.
pub const FD_STEP: f64 = 1e-3;
/// Branch currents below this floor are judged on an absolute scale.
const KCL_CURRENT_FLOOR: f64 = 1e-3;
/// Newton updates larger than this are scaled down.
const MAX_DV_PER_ITER: f64 = 0.5;
const SOURCE_STEPS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("inconsistent drive: {0}")]
    InconsistentDrive(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid array config: {0}")]
    InvalidConfig(String),
    #[error("Newton did not converge after {iterations} iterations (scaled residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("singular network matrix at unknown {unknown} (floating subnetwork)")]
    SingularMatrix { unknown: usize },
    #[error("read voltage {0} V outside [0, {V_READ_MAX}] V")]
    ReadVoltageOutOfRange(f64),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Frontend(#[from] FrontendError),
}

/// Geometry and parasitics of the array.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArrayConfig {
    pub n_rows: usize,
    pub n_cols: usize,
    /// Row-line segment between adjacent cells, and from the driver to column 0.
    pub r_seg_row: f64,
    /// Column-line segment between adjacent cells, and from the last row to the termination.
    pub r_seg_col: f64,
    pub r_switch_on: f64,
    pub r_switch_off: f64,
    /// Closed switches become shorts and open switches disappear.
    pub ideal_switches: bool,
}

impl Default for ArrayConfig {
    fn default() -> Self {
        Self {
            n_rows: 2,
            n_cols: 2,
            r_seg_row: 2.0,
            r_seg_col: 2.0,
            r_switch_on: 100.0,
            r_switch_off: 100e6,
            ideal_switches: false,
        }
    }
}

impl ArrayConfig {
    pub fn with_size(n_rows: usize, n_cols: usize) -> Self {
        Self { n_rows, n_cols, ..Self::default() }
    }

    /// Zero wire resistance and ideal switches.
    pub fn ideal(n_rows: usize, n_cols: usize) -> Self {
        Self { n_rows, n_cols, r_seg_row: 0.0, r_seg_col: 0.0, ideal_switches: true, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.n_rows == 0 || self.n_cols == 0 {
            return Err(NetworkError::InvalidConfig("array needs at least one row and column".into()));
        }
        if !(self.r_seg_row >= 0.0 && self.r_seg_col >= 0.0 && self.r_seg_row.is_finite() && self.r_seg_col.is_finite()) {
            return Err(NetworkError::InvalidConfig("segment resistances must be finite and non-negative".into()));
        }
        if !self.ideal_switches && !(self.r_switch_on > 0.0 && self.r_switch_off > 1e3 * self.r_switch_on && self.r_switch_off.is_finite()) {
            return Err(NetworkError::InvalidConfig(format!(
                "switches need 0 < r_on << r_off, got {} / {}",
                self.r_switch_on, self.r_switch_off
            )));
        }
        Ok(())
    }
}

/// Per-cell selection. Unselected cells are `GroundedBoth`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum CellMode {
    #[default]
    GroundedBoth,
    /// AE on the row line, OE grounded: positive drive resets.
    VoltageWriteAE,
    /// OE on the row line, AE grounded: positive drive sets.
    VoltageWriteOE,
    /// OE on the row line fed by a current source, AE grounded.
    CurrentWrite,
    /// AE on the row line, OE on the column line.
    Read,
    /// Both terminals left on their lines without local grounding, as an
    /// unselected cell of a plain 1T1R crossbar would be.
    HalfSelect,
}

impl CellMode {
    fn throws(self) -> (Throw, Throw) {
        match self {
            CellMode::GroundedBoth => (Throw::Ground, Throw::Ground),
            CellMode::VoltageWriteAE => (Throw::Row, Throw::Ground),
            CellMode::VoltageWriteOE | CellMode::CurrentWrite => (Throw::Ground, Throw::Row),
            CellMode::Read | CellMode::HalfSelect => (Throw::Row, Throw::Col),
        }
    }

    pub fn is_write(self) -> bool {
        matches!(self, CellMode::VoltageWriteAE | CellMode::VoltageWriteOE | CellMode::CurrentWrite)
    }

    /// Cells whose currents count as sneak currents.
    pub fn is_unselected(self) -> bool {
        matches!(self, CellMode::GroundedBoth | CellMode::HalfSelect)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Throw {
    Ground,
    Row,
    Col,
}

/// Where a regulated row drive senses its output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sense {
    /// At the driver output, ahead of the row line.
    Driver,
    /// Across the cell in this column: row-side terminal minus the other one.
    Cell(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RowDrive {
    /// Driver output held at 0 V.
    Idle,
    Voltage { v: f64, i_limit: f64, sense: Sense },
    Current { i: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ColumnTermination {
    Ground,
    /// ADC input, held at 0 V; its current is converted.
    Adc,
    Supply(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriveSet {
    pub rows: Vec<RowDrive>,
    pub cols: Vec<ColumnTermination>,
}

impl DriveSet {
    pub fn idle(cfg: &ArrayConfig) -> Self {
        Self { rows: vec![RowDrive::Idle; cfg.n_rows], cols: vec![ColumnTermination::Ground; cfg.n_cols] }
    }
}

/// What sits between a cell's AE and OE.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CellDevice {
    Memristor(DeviceState),
    /// Fixed resistor in ohms, used for linear test networks.
    Linear(f64),
}

impl CellDevice {
    pub fn current(&self, v: f64, p: &DeviceParams) -> Result<f64, DeviceError> {
        match *self {
            CellDevice::Memristor(s) => device_current(v, s, p),
            CellDevice::Linear(r) => Ok(v / r),
        }
    }

    /// Returns `(i(v), di/dv)`.
    fn linearize(&self, v: f64, p: &DeviceParams) -> Result<(f64, f64), DeviceError> {
        match *self {
            CellDevice::Memristor(s) => {
                let i0 = device_current(v, s, p)?;
                let ip = device_current(v + FD_STEP, s, p)?;
                let im = device_current(v - FD_STEP, s, p)?;
                Ok((i0, (ip - im) / (2.0 * FD_STEP)))
            }
            CellDevice::Linear(r) => Ok((v / r, 1.0 / r)),
        }
    }

    pub fn state(&self) -> Option<DeviceState> {
        match self {
            CellDevice::Memristor(s) => Some(*s),
            CellDevice::Linear(_) => None,
        }
    }
}

/// Raw (pre-merge) circuit node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RawNode {
    Ground,
    Driver(usize),
    RowLine(usize, usize),
    ColLine(usize, usize),
    Ae(usize, usize),
    Oe(usize, usize),
    Termination(usize),
}

impl RawNode {
    pub fn name(&self) -> String {
        match *self {
            RawNode::Ground => "gnd".into(),
            RawNode::Driver(r) => format!("drv_{r}"),
            RawNode::RowLine(r, c) => format!("row_{r}_{c}"),
            RawNode::ColLine(r, c) => format!("col_{r}_{c}"),
            RawNode::Ae(r, c) => format!("ae_{r}_{c}"),
            RawNode::Oe(r, c) => format!("oe_{r}_{c}"),
            RawNode::Termination(c) => format!("term_{c}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ResistorKind {
    RowSegment(usize, usize),
    ColSegment(usize, usize),
    /// One throw of a cell multiplexer: cell, terminal is AE, closed.
    Switch { row: usize, col: usize, ae: bool, closed: bool },
}

#[derive(Debug, Clone, PartialEq)]
struct Resistor {
    a: usize,
    b: usize,
    g: f64,
    kind: ResistorKind,
}

#[derive(Debug, Clone, PartialEq)]
enum Source {
    /// Regulated voltage: current injected at `node` so that `sense` sits `v`
    /// above `sense_ref`.
    Voltage { node: usize, sense: usize, sense_ref: usize, v: f64 },
    Current { node: usize, i: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SourceTag {
    Row(usize),
    Col(usize),
}

#[derive(Debug, Clone, PartialEq)]
struct SourceEntry {
    tag: SourceTag,
    source: Source,
    i_limit: f64,
}

/// Circuit graph ready for solving.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkDescription {
    cfg: ArrayConfig,
    modes: Grid<CellMode>,
    raw: Vec<RawNode>,
    class_of_raw: Vec<usize>,
    class_names: Vec<String>,
    n_classes: usize,
    resistors: Vec<Resistor>,
    cells: Grid<(usize, usize)>,
    devices: Grid<CellDevice>,
    sources: Vec<SourceEntry>,
    raw_index: std::collections::HashMap<RawNode, usize>,
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut y = x;
        while self.0[y] != r {
            let next = self.0[y];
            self.0[y] = r;
            y = next;
        }
        r
    }

    /// Keeps the smaller index as representative so ground stays class 0.
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.0[hi] = lo;
        }
    }
}

fn check_dims<T>(what: &str, g: &Grid<T>, cfg: &ArrayConfig) -> Result<(), NetworkError> {
    if g.dims() != (cfg.n_rows, cfg.n_cols) {
        return Err(NetworkError::Dimension(format!(
            "{what} is {}x{}, array is {}x{}",
            g.rows(),
            g.cols(),
            cfg.n_rows,
            cfg.n_cols
        )));
    }
    Ok(())
}

fn validate_drives(cfg: &ArrayConfig, select: &Grid<CellMode>, drives: &DriveSet) -> Result<(), NetworkError> {
    if drives.rows.len() != cfg.n_rows || drives.cols.len() != cfg.n_cols {
        return Err(NetworkError::Dimension(format!(
            "drive set has {} rows / {} columns for a {}x{} array",
            drives.rows.len(),
            drives.cols.len(),
            cfg.n_rows,
            cfg.n_cols
        )));
    }
    let bad = |m: String| Err(NetworkError::InconsistentDrive(m));
    for (r, d) in drives.rows.iter().enumerate() {
        let writes: Vec<(usize, CellMode)> =
            (0..cfg.n_cols).map(|c| (c, select[(r, c)])).filter(|(_, m)| m.is_write()).collect();
        if writes.len() > 1 {
            return bad(format!("row {r} has {} cells selected for writing; the row regulator is shared", writes.len()));
        }
        match *d {
            RowDrive::Idle => {
                if let Some((c, _)) = writes.first() {
                    return bad(format!("cell ({r}, {c}) is selected for writing but row {r} is idle"));
                }
            }
            RowDrive::Voltage { v, i_limit, sense } => {
                if !v.is_finite() || !(i_limit > 0.0) {
                    return bad(format!("row {r} voltage drive needs finite v and positive limit"));
                }
                if let Some((c, CellMode::CurrentWrite)) = writes.first() {
                    return bad(format!("cell ({r}, {c}) is in current mode but row {r} drives a voltage"));
                }
                if let Sense::Cell(c) = sense {
                    if c >= cfg.n_cols {
                        return bad(format!("row {r} senses column {c} outside the array"));
                    }
                    if select[(r, c)].throws().0 != Throw::Row && select[(r, c)].throws().1 != Throw::Row {
                        return bad(format!("row {r} senses cell ({r}, {c}) which is not on the row line"));
                    }
                }
            }
            RowDrive::Current { i } => {
                if !i.is_finite() {
                    return bad(format!("row {r} current drive is not finite"));
                }
                match writes.first() {
                    Some((_, CellMode::CurrentWrite)) => {}
                    Some((c, _)) => return bad(format!("cell ({r}, {c}) is in voltage mode but row {r} drives a current")),
                    None => return bad(format!("row {r} drives a current with no cell in current mode")),
                }
            }
        }
    }
    for (c, t) in drives.cols.iter().enumerate() {
        if let ColumnTermination::Supply(v) = t {
            if !v.is_finite() {
                return bad(format!("column {c} supply is not finite"));
            }
        }
    }
    Ok(())
}

/// Assembles the circuit graph. Node classes are numbered in row-major
/// first-appearance order, so the same inputs always give the same graph.
pub fn build_network(
    cfg: &ArrayConfig,
    select: &Grid<CellMode>,
    drives: &DriveSet,
    devices: &Grid<CellDevice>,
) -> Result<NetworkDescription, NetworkError> {
    cfg.validate()?;
    check_dims("select", select, cfg)?;
    check_dims("devices", devices, cfg)?;
    validate_drives(cfg, select, drives)?;
    let (nr, nc) = (cfg.n_rows, cfg.n_cols);

    // Cell-interleaved ordering keeps the matrix banded.
    let mut raw = vec![RawNode::Ground];
    for r in 0..nr {
        raw.push(RawNode::Driver(r));
        for c in 0..nc {
            raw.extend([RawNode::RowLine(r, c), RawNode::ColLine(r, c), RawNode::Ae(r, c), RawNode::Oe(r, c)]);
        }
    }
    raw.extend((0..nc).map(RawNode::Termination));
    let raw_index: std::collections::HashMap<RawNode, usize> = raw.iter().enumerate().map(|(k, n)| (*n, k)).collect();
    let idx = |n: RawNode| raw_index[&n];

    let mut uf = UnionFind((0..raw.len()).collect());
    let mut pending: Vec<(usize, usize, f64, ResistorKind)> = Vec::new();
    let mut link = |uf: &mut UnionFind, a: usize, b: usize, ohms: f64, kind: ResistorKind| {
        if ohms == 0.0 {
            uf.union(a, b);
        } else {
            pending.push((a, b, ohms, kind));
        }
    };

    for r in 0..nr {
        for c in 0..nc {
            let prev = if c == 0 { idx(RawNode::Driver(r)) } else { idx(RawNode::RowLine(r, c - 1)) };
            link(&mut uf, prev, idx(RawNode::RowLine(r, c)), cfg.r_seg_row, ResistorKind::RowSegment(r, c));
        }
    }
    for c in 0..nc {
        for r in 0..nr {
            let next = if r + 1 == nr { idx(RawNode::Termination(c)) } else { idx(RawNode::ColLine(r + 1, c)) };
            link(&mut uf, idx(RawNode::ColLine(r, c)), next, cfg.r_seg_col, ResistorKind::ColSegment(r, c));
        }
    }
    for r in 0..nr {
        for c in 0..nc {
            let (ae_throw, oe_throw) = select[(r, c)].throws();
            for (terminal, on, options, is_ae) in [
                (RawNode::Ae(r, c), ae_throw, &[Throw::Ground, Throw::Row][..], true),
                (RawNode::Oe(r, c), oe_throw, &[Throw::Ground, Throw::Row, Throw::Col][..], false),
            ] {
                for &throw in options {
                    let target = match throw {
                        Throw::Ground => idx(RawNode::Ground),
                        Throw::Row => idx(RawNode::RowLine(r, c)),
                        Throw::Col => idx(RawNode::ColLine(r, c)),
                    };
                    let closed = throw == on;
                    let kind = ResistorKind::Switch { row: r, col: c, ae: is_ae, closed };
                    match (cfg.ideal_switches, closed) {
                        (true, true) => uf.union(idx(terminal), target),
                        (true, false) => {}
                        (false, true) => link(&mut uf, idx(terminal), target, cfg.r_switch_on, kind),
                        (false, false) => link(&mut uf, idx(terminal), target, cfg.r_switch_off, kind),
                    }
                }
            }
        }
    }

    // Number classes by first appearance; ground is raw 0 and stays class 0.
    let mut class_of_root = vec![usize::MAX; raw.len()];
    let mut class_of_raw = vec![0; raw.len()];
    let mut class_names = Vec::new();
    for k in 0..raw.len() {
        let root = uf.find(k);
        if class_of_root[root] == usize::MAX {
            class_of_root[root] = class_names.len();
            class_names.push(raw[k].name());
        }
        class_of_raw[k] = class_of_root[root];
    }
    let n_classes = class_names.len();
    let cls = |n: RawNode| class_of_raw[raw_index[&n]];

    let resistors: Vec<Resistor> = pending
        .into_iter()
        .map(|(a, b, ohms, kind)| Resistor { a: class_of_raw[a], b: class_of_raw[b], g: 1.0 / ohms, kind })
        .filter(|r| r.a != r.b)
        .collect();
    let cells = Grid::from_fn(nr, nc, |r, c| (cls(RawNode::Ae(r, c)), cls(RawNode::Oe(r, c))));

    let mut sources = Vec::new();
    for (r, d) in drives.rows.iter().enumerate() {
        let node = cls(RawNode::Driver(r));
        let entry = match *d {
            RowDrive::Idle => SourceEntry { tag: SourceTag::Row(r), source: Source::Voltage { node, sense: node, sense_ref: 0, v: 0.0 }, i_limit: f64::INFINITY },
            RowDrive::Voltage { v, i_limit, sense } => {
                let (sense, sense_ref) = match sense {
                    Sense::Driver => (node, 0),
                    Sense::Cell(c) => match select[(r, c)].throws() {
                        (Throw::Row, _) => (cls(RawNode::Ae(r, c)), cls(RawNode::Oe(r, c))),
                        _ => (cls(RawNode::Oe(r, c)), cls(RawNode::Ae(r, c))),
                    },
                };
                if sense == 0 {
                    return Err(NetworkError::InconsistentDrive(format!("row {r} senses a grounded node")));
                }
                SourceEntry { tag: SourceTag::Row(r), source: Source::Voltage { node, sense, sense_ref, v }, i_limit }
            }
            RowDrive::Current { i } => SourceEntry { tag: SourceTag::Row(r), source: Source::Current { node, i }, i_limit: f64::INFINITY },
        };
        sources.push(entry);
    }
    for (c, t) in drives.cols.iter().enumerate() {
        let node = cls(RawNode::Termination(c));
        let v = match *t {
            ColumnTermination::Ground | ColumnTermination::Adc => 0.0,
            ColumnTermination::Supply(v) => v,
        };
        sources.push(SourceEntry { tag: SourceTag::Col(c), source: Source::Voltage { node, sense: node, sense_ref: 0, v }, i_limit: f64::INFINITY });
    }

    Ok(NetworkDescription {
        cfg: *cfg,
        modes: select.clone(),
        raw,
        class_of_raw,
        class_names,
        n_classes,
        resistors,
        cells,
        devices: devices.clone(),
        sources,
        raw_index,
    })
}

/// Converged DC solution.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatingPoint {
    /// Voltage per node class; class 0 is ground.
    pub node_voltages: Vec<f64>,
    /// `V(AE) - V(OE)` per cell.
    pub device_voltages: Grid<f64>,
    /// AE-to-OE current per cell.
    pub device_currents: Grid<f64>,
    /// Current each row driver delivers into its row.
    pub drive_currents: Vec<f64>,
    /// Current leaving the array through each column termination.
    pub column_currents: Vec<f64>,
    /// Rows whose regulated drive hit its current limit.
    pub compliance_hit: Vec<bool>,
    pub iterations: usize,
    pub max_scaled_residual: f64,
}

impl NetworkDescription {
    pub fn config(&self) -> &ArrayConfig {
        &self.cfg
    }

    pub fn modes(&self) -> &Grid<CellMode> {
        &self.modes
    }

    pub fn devices(&self) -> &Grid<CellDevice> {
        &self.devices
    }

    pub fn memristor_branch_count(&self) -> usize {
        self.cfg.n_rows * self.cfg.n_cols
    }

    /// One multiplexer per cell terminal.
    pub fn switch_branch_count(&self) -> usize {
        2 * self.cfg.n_rows * self.cfg.n_cols
    }

    pub fn resistor_count(&self) -> usize {
        self.resistors.len()
    }

    /// Number of distinct nodes, ground included.
    pub fn node_count(&self) -> usize {
        self.n_classes
    }

    pub fn node_name(&self, class: usize) -> &str {
        &self.class_names[class]
    }

    pub fn class_of(&self, node: RawNode) -> Option<usize> {
        self.raw_index.get(&node).map(|&k| self.class_of_raw[k])
    }

    pub fn raw_nodes(&self) -> &[RawNode] {
        &self.raw
    }

    /// Hash of the full structure; equal inputs give equal hashes.
    pub fn structural_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.class_of_raw.hash(&mut h);
        for r in &self.resistors {
            (r.a, r.b, r.g.to_bits(), r.kind).hash(&mut h);
        }
        for ((r, c), &(ae, oe)) in self.cells.iter() {
            (r, c, ae, oe).hash(&mut h);
        }
        for s in &self.sources {
            format!("{s:?}").hash(&mut h);
        }
        h.finish()
    }

    /// Replaces the devices without rebuilding the topology.
    pub fn set_devices(&mut self, devices: &Grid<CellDevice>) -> Result<(), NetworkError> {
        check_dims("devices", devices, &self.cfg)?;
        self.devices = devices.clone();
        Ok(())
    }

    pub fn set_states(&mut self, states: &Grid<DeviceState>) -> Result<(), NetworkError> {
        check_dims("states", states, &self.cfg)?;
        for ((r, c), s) in states.iter() {
            if let CellDevice::Memristor(m) = &mut self.devices[(r, c)] {
                *m = *s;
            }
        }
        Ok(())
    }
}

/// Unknown layout: node classes 1.. followed, right after each source's node,
/// by that source's current.
struct Layout {
    node_var: Vec<Option<usize>>,
    source_var: Vec<Option<usize>>,
    n: usize,
    kl: usize,
    ku: usize,
}

fn layout(net: &NetworkDescription, active: &[Source]) -> Layout {
    let mut by_node: Vec<Vec<usize>> = vec![Vec::new(); net.n_classes];
    for (k, s) in active.iter().enumerate() {
        if let Source::Voltage { node, .. } = s {
            by_node[*node].push(k);
        }
    }
    let mut node_var = vec![None; net.n_classes];
    let mut source_var = vec![None; active.len()];
    let mut n = 0;
    for class in 1..net.n_classes {
        node_var[class] = Some(n);
        n += 1;
        for &k in &by_node[class] {
            source_var[k] = Some(n);
            n += 1;
        }
    }
    let (mut kl, mut ku) = (0usize, 0usize);
    let mut touch = |i: Option<usize>, j: Option<usize>| {
        if let (Some(i), Some(j)) = (i, j) {
            if i > j {
                kl = kl.max(i - j);
            } else {
                ku = ku.max(j - i);
            }
        }
    };
    for r in &net.resistors {
        touch(node_var[r.a], node_var[r.b]);
        touch(node_var[r.b], node_var[r.a]);
    }
    for &(ae, oe) in net.cells.values() {
        touch(node_var[ae], node_var[oe]);
        touch(node_var[oe], node_var[ae]);
    }
    for (k, s) in active.iter().enumerate() {
        if let Source::Voltage { node, sense, sense_ref, .. } = s {
            touch(node_var[*node], source_var[k]);
            touch(source_var[k], node_var[*sense]);
            touch(source_var[k], node_var[*sense_ref]);
        }
    }
    Layout { node_var, source_var, n, kl, ku }
}

struct Residual {
    max_scaled: f64,
}

fn kcl_residual(net: &NetworkDescription, active: &[Source], lay: &Layout, x: &[f64], p: &DeviceParams) -> Result<Residual, DeviceError> {
    let volt = |class: usize| lay.node_var[class].map_or(0.0, |k| x[k]);
    let mut sum = vec![0.0; net.n_classes];
    let mut big = vec![0.0f64; net.n_classes];
    let mut add = |a: usize, b: usize, i: f64| {
        sum[a] += i;
        sum[b] -= i;
        big[a] = big[a].max(i.abs());
        big[b] = big[b].max(i.abs());
    };
    for r in &net.resistors {
        add(r.a, r.b, r.g * (volt(r.a) - volt(r.b)));
    }
    for ((rr, cc), &(ae, oe)) in net.cells.iter() {
        let i = net.devices[(rr, cc)].current(volt(ae) - volt(oe), p)?;
        add(ae, oe, i);
    }
    for (k, s) in active.iter().enumerate() {
        match *s {
            Source::Voltage { node, .. } => {
                let j = x[lay.source_var[k].expect("voltage source has a variable")];
                add(0, node, j);
            }
            Source::Current { node, i } => add(0, node, i),
        }
    }
    let max_scaled = (1..net.n_classes).map(|k| sum[k].abs() / big[k].max(KCL_CURRENT_FLOOR)).fold(0.0, f64::max);
    Ok(Residual { max_scaled })
}

fn newton(
    net: &NetworkDescription,
    active: &[Source],
    lay: &Layout,
    x: &mut [f64],
    p: &DeviceParams,
    scale: f64,
    budget: usize,
) -> Result<(bool, usize, f64), NetworkError> {
    let volt = |x: &[f64], class: usize| lay.node_var[class].map_or(0.0, |k| x[k]);
    let mut last_res = f64::INFINITY;
    for it in 1..=budget {
        let mut a = BandMatrix::zeros(lay.n, lay.kl, lay.ku);
        let mut rhs = vec![0.0; lay.n];
        let stamp_g = |a: &mut BandMatrix, na: usize, nb: usize, g: f64| {
            let (ia, ib) = (lay.node_var[na], lay.node_var[nb]);
            if let Some(i) = ia {
                a.add(i, i, g);
            }
            if let Some(j) = ib {
                a.add(j, j, g);
            }
            if let (Some(i), Some(j)) = (ia, ib) {
                a.add(i, j, -g);
                a.add(j, i, -g);
            }
        };
        for r in &net.resistors {
            stamp_g(&mut a, r.a, r.b, r.g);
        }
        for ((rr, cc), &(ae, oe)) in net.cells.iter() {
            let v0 = volt(x, ae) - volt(x, oe);
            let (i0, g) = net.devices[(rr, cc)].linearize(v0, p)?;
            let ieq = i0 - g * v0;
            stamp_g(&mut a, ae, oe, g);
            if let Some(i) = lay.node_var[ae] {
                rhs[i] -= ieq;
            }
            if let Some(j) = lay.node_var[oe] {
                rhs[j] += ieq;
            }
        }
        for (k, s) in active.iter().enumerate() {
            match *s {
                Source::Voltage { node, sense, sense_ref, v } => {
                    let sv = lay.source_var[k].expect("voltage source has a variable");
                    if let Some(i) = lay.node_var[node] {
                        a.add(i, sv, -1.0);
                    }
                    if let Some(j) = lay.node_var[sense] {
                        a.add(sv, j, 1.0);
                    }
                    if let Some(j) = lay.node_var[sense_ref] {
                        a.add(sv, j, -1.0);
                    }
                    rhs[sv] = v * scale;
                }
                Source::Current { node, i } => {
                    if let Some(j) = lay.node_var[node] {
                        rhs[j] += i * scale;
                    }
                }
            }
        }
        a.solve(&mut rhs).map_err(|e| NetworkError::SingularMatrix { unknown: e.column })?;
        let mut dv_max = 0.0f64;
        for class in 1..net.n_classes {
            let k = lay.node_var[class].expect("non-ground class has a variable");
            dv_max = dv_max.max((rhs[k] - x[k]).abs());
        }
        let damp = if dv_max > MAX_DV_PER_ITER { MAX_DV_PER_ITER / dv_max } else { 1.0 };
        for k in 0..lay.n {
            x[k] += damp * (rhs[k] - x[k]);
        }
        if damp == 1.0 && dv_max <= DV_TOL {
            let res = kcl_residual_scaled(net, active, lay, x, p, scale)?;
            last_res = res;
            if res <= KCL_TOL {
                return Ok((true, it, res));
            }
        }
    }
    Ok((false, budget, last_res))
}

fn kcl_residual_scaled(net: &NetworkDescription, active: &[Source], lay: &Layout, x: &[f64], p: &DeviceParams, scale: f64) -> Result<f64, NetworkError> {
    if scale == 1.0 {
        return Ok(kcl_residual(net, active, lay, x, p)?.max_scaled);
    }
    let scaled: Vec<Source> = active
        .iter()
        .map(|s| match *s {
            Source::Voltage { node, sense, sense_ref, v } => Source::Voltage { node, sense, sense_ref, v: v * scale },
            Source::Current { node, i } => Source::Current { node, i: i * scale },
        })
        .collect();
    Ok(kcl_residual(net, &scaled, lay, x, p)?.max_scaled)
}

/// Warm-start data from a previous solve of the same topology.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    node_voltages: Vec<f64>,
    compliance_hit: Vec<bool>,
}

impl OperatingPoint {
    pub fn warm_start(&self) -> WarmStart {
        WarmStart { node_voltages: self.node_voltages.clone(), compliance_hit: self.compliance_hit.clone() }
    }
}

pub fn solve_operating_point(net: &NetworkDescription, p: &DeviceParams) -> Result<OperatingPoint, NetworkError> {
    solve_operating_point_from(net, p, None)
}

/// Solves the network, optionally starting from a previous solution. Voltage
/// drives that exceed their current limit are re-solved as current sources
/// at the limit.
pub fn solve_operating_point_from(net: &NetworkDescription, p: &DeviceParams, warm: Option<&WarmStart>) -> Result<OperatingPoint, NetworkError> {
    let n_rows = net.cfg.n_rows;
    let mut clamped: Vec<Option<f64>> = vec![None; net.sources.len()];
    if let Some(w) = warm {
        for (k, s) in net.sources.iter().enumerate() {
            if let (SourceTag::Row(r), Source::Voltage { v, .. }) = (s.tag, &s.source) {
                if w.compliance_hit.get(r).copied().unwrap_or(false) && s.i_limit.is_finite() {
                    clamped[k] = Some(s.i_limit.copysign(*v));
                }
            }
        }
    }
    let mut warm_v: Option<Vec<f64>> = warm.map(|w| w.node_voltages.clone()).filter(|v| v.len() == net.n_classes);
    let mut total_iter = 0;
    for _round in 0..=net.sources.len() {
        let active: Vec<Source> = net
            .sources
            .iter()
            .zip(&clamped)
            .map(|(s, c)| match (c, &s.source) {
                (Some(i), Source::Voltage { node, .. }) => Source::Current { node: *node, i: *i },
                _ => s.source.clone(),
            })
            .collect();
        let lay = layout(net, &active);
        let mut x = vec![0.0; lay.n];
        if let Some(v) = &warm_v {
            for class in 1..net.n_classes {
                x[lay.node_var[class].expect("variable")] = v[class];
            }
        }
        let (ok, used, res) = {
            let budget = MAX_NEWTON_ITER.saturating_sub(total_iter).min(MAX_NEWTON_ITER / 2);
            let first = newton(net, &active, &lay, &mut x, p, 1.0, budget)?;
            if first.0 {
                first
            } else {
                // Source stepping from a cold start.
                let mut used = first.1;
                let mut y = vec![0.0; lay.n];
                let mut out = (false, used, first.2);
                for step in 1..=SOURCE_STEPS {
                    let scale = step as f64 / SOURCE_STEPS as f64;
                    let left = MAX_NEWTON_ITER.saturating_sub(total_iter + used);
                    if left == 0 {
                        break;
                    }
                    let (ok, u, r) = newton(net, &active, &lay, &mut y, p, scale, left.min(40))?;
                    used += u;
                    out = (ok, used, r);
                    if !ok {
                        break;
                    }
                }
                if out.0 {
                    x = y;
                }
                out
            }
        };
        total_iter += used;
        if !ok {
            return Err(NetworkError::NonConvergence { iterations: total_iter, residual: res });
        }
        let op = assemble(net, &active, &lay, &x, p, total_iter, res, &clamped)?;
        // Enforce pass-device limits on regulated drives.
        let mut changed = false;
        for (k, s) in net.sources.iter().enumerate() {
            if clamped[k].is_none() && s.i_limit.is_finite() {
                if let SourceTag::Row(r) = s.tag {
                    let i = op.drive_currents[r];
                    if i.abs() > s.i_limit {
                        clamped[k] = Some(s.i_limit.copysign(i));
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            debug_assert_eq!(op.compliance_hit.len(), n_rows);
            return Ok(op);
        }
        warm_v = Some(op.node_voltages);
    }
    Err(NetworkError::NonConvergence { iterations: total_iter, residual: f64::NAN })
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    net: &NetworkDescription,
    active: &[Source],
    lay: &Layout,
    x: &[f64],
    p: &DeviceParams,
    iterations: usize,
    residual: f64,
    clamped: &[Option<f64>],
) -> Result<OperatingPoint, NetworkError> {
    let node_voltages: Vec<f64> = (0..net.n_classes).map(|c| lay.node_var[c].map_or(0.0, |k| x[k])).collect();
    let (nr, nc) = (net.cfg.n_rows, net.cfg.n_cols);
    let device_voltages = Grid::from_fn(nr, nc, |r, c| {
        let (ae, oe) = net.cells[(r, c)];
        node_voltages[ae] - node_voltages[oe]
    });
    let mut device_currents = Grid::filled(nr, nc, 0.0);
    for ((r, c), v) in device_voltages.iter() {
        device_currents[(r, c)] = net.devices[(r, c)].current(*v, p)?;
    }
    let mut drive_currents = vec![0.0; nr];
    let mut column_currents = vec![0.0; nc];
    let mut compliance_hit = vec![false; nr];
    for (k, (entry, s)) in net.sources.iter().zip(active).enumerate() {
        let i = match *s {
            Source::Voltage { .. } => x[lay.source_var[k].expect("variable")],
            Source::Current { i, .. } => i,
        };
        match entry.tag {
            SourceTag::Row(r) => {
                drive_currents[r] = i;
                compliance_hit[r] = clamped[k].is_some();
            }
            // The source injects `i`; the array delivers `-i` into the termination.
            SourceTag::Col(c) => column_currents[c] = -i,
        }
    }
    Ok(OperatingPoint {
        node_voltages,
        device_voltages,
        device_currents,
        drive_currents,
        column_currents,
        compliance_hit,
        iterations,
        max_scaled_residual: residual,
    })
}

impl OperatingPoint {
    pub fn voltage(&self, net: &NetworkDescription, node: RawNode) -> Option<f64> {
        net.class_of(node).map(|c| self.node_voltages[c])
    }

    /// Current through every resistor of the network, in network order.
    pub fn resistor_currents(&self, net: &NetworkDescription) -> Vec<(ResistorKind, f64)> {
        net.resistors.iter().map(|r| (r.kind, r.g * (self.node_voltages[r.a] - self.node_voltages[r.b]))).collect()
    }

    /// Current the row line hands to the cells of `row` through their row-side
    /// switch throws, open ones included.
    pub fn row_feed_current(&self, net: &NetworkDescription, row: usize) -> f64 {
        let mut total = 0.0;
        for r in &net.resistors {
            if let ResistorKind::Switch { row: rr, col, .. } = r.kind {
                if rr != row {
                    continue;
                }
                let line = net.class_of(RawNode::RowLine(row, col)).expect("row line exists");
                let i = r.g * (self.node_voltages[r.a] - self.node_voltages[r.b]);
                if r.b == line && r.a != line {
                    total -= i;
                } else if r.a == line && r.b != line {
                    total += i;
                }
            }
        }
        total
    }

    /// `node,voltage` CSV body.
    pub fn node_csv(&self, net: &NetworkDescription) -> String {
        let mut s = String::from("node,voltage\n");
        for (k, v) in self.node_voltages.iter().enumerate() {
            let _ = writeln!(s, "{},{:e}", net.node_name(k), v);
        }
        s
    }

    /// `branch,current` CSV body covering devices, drives and columns.
    pub fn branch_csv(&self) -> String {
        let mut s = String::from("branch,current\n");
        for ((r, c), i) in self.device_currents.iter() {
            let _ = writeln!(s, "mem_{r}_{c},{i:e}");
        }
        for (r, i) in self.drive_currents.iter().enumerate() {
            let _ = writeln!(s, "drive_{r},{i:e}");
        }
        for (c, i) in self.column_currents.iter().enumerate() {
            let _ = writeln!(s, "col_{c},{i:e}");
        }
        s
    }
}

/// Result of an in-array multiply.
#[derive(Debug, Clone, PartialEq)]
pub struct VmmResult {
    pub currents: Vec<f64>,
    pub codes: Vec<u32>,
    /// Columns whose current exceeded the ADC full scale; their code is the top code.
    pub saturated: Vec<bool>,
    pub op: OperatingPoint,
}

/// Reads every cell at once: rows at `v`, columns into the ADCs.
pub fn vmm(v: &[f64], devices: &Grid<CellDevice>, cfg: &ArrayConfig, adc: &AdcSpec, p: &DeviceParams) -> Result<VmmResult, NetworkError> {
    if v.len() != cfg.n_rows {
        return Err(NetworkError::Dimension(format!("input vector has {} entries for {} rows", v.len(), cfg.n_rows)));
    }
    if let Some(&bad) = v.iter().find(|&&x| !(0.0..=adc.v_read_default.min(V_READ_MAX)).contains(&x)) {
        return Err(NetworkError::ReadVoltageOutOfRange(bad));
    }
    let select = Grid::filled(cfg.n_rows, cfg.n_cols, CellMode::Read);
    let drives = DriveSet {
        rows: v.iter().map(|&v| RowDrive::Voltage { v, i_limit: f64::INFINITY, sense: Sense::Driver }).collect(),
        cols: vec![ColumnTermination::Adc; cfg.n_cols],
    };
    let net = build_network(cfg, &select, &drives, devices)?;
    let op = solve_operating_point(&net, p)?;
    let mut codes = Vec::with_capacity(cfg.n_cols);
    let mut saturated = Vec::with_capacity(cfg.n_cols);
    for &i in &op.column_currents {
        // Roundoff around an all-zero input can leave a tiny negative value.
        let i = if i < 0.0 && i > -1e-15 { 0.0 } else { i };
        if i > adc.i_full_scale {
            codes.push((1u32 << adc.bits) - 1);
            saturated.push(true);
        } else {
            codes.push(adc_read(i, adc)?.0);
            saturated.push(false);
        }
    }
    Ok(VmmResult { currents: op.column_currents.clone(), codes, saturated, op })
}

/// Memristor states as devices.
pub fn memristors(states: &Grid<DeviceState>) -> Grid<CellDevice> {
    states.map(|s| CellDevice::Memristor(*s))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SneakEntry {
    pub row: usize,
    pub col: usize,
    pub current: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SneakReport {
    pub threshold: f64,
    pub entries: Vec<SneakEntry>,
}

impl SneakReport {
    pub fn any_flagged(&self) -> bool {
        self.entries.iter().any(|e| e.flagged)
    }

    pub fn max_current(&self) -> f64 {
        self.entries.iter().map(|e| e.current).fold(0.0, f64::max)
    }
}

pub const DEFAULT_SNEAK_THRESHOLD: f64 = 1e-9;

/// `|I|` through every unselected cell, flagged above `threshold`.
pub fn sneak_current_report(op: &OperatingPoint, select: &Grid<CellMode>, threshold: f64) -> SneakReport {
    let entries = select
        .iter()
        .filter(|(_, m)| m.is_unselected())
        .map(|((row, col), _)| {
            let current = op.device_currents[(row, col)].abs();
            SneakEntry { row, col, current, flagged: current > threshold }
        })
        .collect();
    SneakReport { threshold, entries }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(rows: Vec<Vec<f64>>) -> Grid<CellDevice> {
        Grid::from_rows(rows).unwrap().map(|&r| CellDevice::Linear(r))
    }

    #[test]
    fn single_resistor_obeys_ohm() {
        let cfg = ArrayConfig::ideal(1, 1);
        let res = vmm(&[0.25], &linear(vec![vec![5e3]]), &cfg, &AdcSpec::default(), &DeviceParams::default()).unwrap();
        assert!((res.currents[0] - 50e-6).abs() < 1e-15);
    }

    #[test]
    fn branch_counts() {
        let cfg = ArrayConfig::with_size(2, 2);
        let sel = Grid::filled(2, 2, CellMode::GroundedBoth);
        let net = build_network(&cfg, &sel, &DriveSet::idle(&cfg), &linear(vec![vec![1e3; 2]; 2])).unwrap();
        assert_eq!(net.memristor_branch_count(), 4);
        assert_eq!(net.switch_branch_count(), 8);
        // 4 row + 4 column segments, 5 throws per cell.
        assert_eq!(net.resistor_count(), 8 + 20);
    }

    #[test]
    fn one_by_one_write_has_single_source_path() {
        let cfg = ArrayConfig::with_size(1, 1);
        let sel = Grid::filled(1, 1, CellMode::VoltageWriteOE);
        let drives = DriveSet {
            rows: vec![RowDrive::Voltage { v: 0.75, i_limit: 1e-3, sense: Sense::Cell(0) }],
            cols: vec![ColumnTermination::Ground],
        };
        let devs = Grid::filled(1, 1, CellDevice::Memristor(DeviceState::new(1.0)));
        let net = build_network(&cfg, &sel, &drives, &devs).unwrap();
        let op = solve_operating_point(&net, &DeviceParams::default()).unwrap();
        // Sensing across the cell holds the device at exactly the regulated
        // value while the grounded side floats above ground by the switch drop.
        assert!((op.device_voltages[(0, 0)] + 0.75).abs() < 1e-9);
        let ae = op.voltage(&net, RawNode::Ae(0, 0)).unwrap();
        assert!(ae > 0.0);
    }

    #[test]
    fn compliance_turns_drive_into_current_limit() {
        let cfg = ArrayConfig::with_size(1, 1);
        let sel = Grid::filled(1, 1, CellMode::VoltageWriteAE);
        let drives = DriveSet {
            rows: vec![RowDrive::Voltage { v: 1.0, i_limit: 50e-6, sense: Sense::Cell(0) }],
            cols: vec![ColumnTermination::Ground],
        };
        let net = build_network(&cfg, &sel, &drives, &linear(vec![vec![1e3]])).unwrap();
        let op = solve_operating_point(&net, &DeviceParams::default()).unwrap();
        assert!(op.compliance_hit[0]);
        assert!((op.drive_currents[0] - 50e-6).abs() < 1e-15);
    }

    #[test]
    fn two_writes_in_one_row_rejected() {
        let cfg = ArrayConfig::with_size(1, 2);
        let sel = Grid::filled(1, 2, CellMode::VoltageWriteAE);
        let drives = DriveSet {
            rows: vec![RowDrive::Voltage { v: 1.0, i_limit: 1.0, sense: Sense::Driver }],
            cols: vec![ColumnTermination::Ground; 2],
        };
        let err = build_network(&cfg, &sel, &drives, &linear(vec![vec![1e3, 1e3]])).unwrap_err();
        assert!(matches!(err, NetworkError::InconsistentDrive(_)));
    }

    #[test]
    fn current_drive_needs_current_mode_cell() {
        let cfg = ArrayConfig::with_size(1, 1);
        let sel = Grid::filled(1, 1, CellMode::VoltageWriteOE);
        let drives = DriveSet { rows: vec![RowDrive::Current { i: 1e-6 }], cols: vec![ColumnTermination::Ground] };
        assert!(build_network(&cfg, &sel, &drives, &linear(vec![vec![1e3]])).is_err());
    }

    #[test]
    fn floating_row_with_ideal_switches_is_singular() {
        // A current drive into an open row has nowhere to go.
        let cfg = ArrayConfig::ideal(1, 1);
        let sel = Grid::filled(1, 1, CellMode::CurrentWrite);
        let drives = DriveSet { rows: vec![RowDrive::Current { i: 1e-6 }], cols: vec![ColumnTermination::Ground] };
        let devs = linear(vec![vec![1e3]]);
        let net = build_network(&cfg, &sel, &drives, &devs).unwrap();
        // The current source has a return path through the cell, so it solves.
        let op = solve_operating_point(&net, &DeviceParams::default()).unwrap();
        assert!((op.device_currents[(0, 0)] + 1e-6).abs() < 1e-15);
        // A Read cell in a 1x1 with ideal switches and an idle row shorts nothing
        // and floats nothing; a HalfSelect cell with ideal switches does neither.
        let sel = Grid::filled(1, 1, CellMode::HalfSelect);
        let net = build_network(&cfg, &sel, &DriveSet::idle(&cfg), &devs).unwrap();
        assert!(solve_operating_point(&net, &DeviceParams::default()).is_ok());
    }

    #[test]
    fn structure_is_deterministic() {
        let cfg = ArrayConfig::with_size(3, 2);
        let sel = Grid::from_fn(3, 2, |r, c| if (r, c) == (1, 1) { CellMode::VoltageWriteAE } else { CellMode::GroundedBoth });
        let mut drives = DriveSet::idle(&cfg);
        drives.rows[1] = RowDrive::Voltage { v: 1.2, i_limit: 1e-3, sense: Sense::Cell(1) };
        let devs = Grid::filled(3, 2, CellDevice::Memristor(DeviceState::new(1.0)));
        let a = build_network(&cfg, &sel, &drives, &devs).unwrap();
        let b = build_network(&cfg, &sel, &drives, &devs).unwrap();
        assert_eq!(a.structural_hash(), b.structural_hash());
    }
}
