//! Syndrome-extraction programs for the color code.
//!
//! One cycle is two rounds of ten steps: the X checks, then the Z checks,
//! on the same ancilla/flag pairs. Each tile's pair is prepared in a Bell
//! state, the syndrome ancilla touches the odd-direction data qubits and the
//! flag the even-direction ones, and the pair is disentangled before
//! readout. The syndrome ancilla reads out the check; the flag reads out the
//! Bell parity, which any ancilla fault able to spread to two or more data
//! qubits flips.
//!
//! ```text
//! step  ancilla        flag           data (X round / Z round)
//!  0    H              H              H / idle
//!  1    CZ(a,f)        CZ(a,f)        idle
//!  2    H              CZ slot 0
//!  3    CZ slot 1      CZ slot 2
//!  4    CZ slot 3      CZ slot 4
//!  5    CZ slot 5      H
//!  6    CZ(a,f)        CZ(a,f)
//!  7    H              H              H / idle
//!  8    measure        measure        idle
//!  9    reset          reset          idle
//! ```
//!
//! Data qubits reached by direction `k` from one tile are reached with the
//! same direction parity from every tile, so the ancilla and flag sweeps
//! never collide on a data qubit.

use crate::code::{CheckType, CodeLayout, Pauli, PauliOperator};
use crate::error::{Error, Result};
use crate::gf2::BitVec;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::ops::Range;

pub const STEPS_PER_CYCLE: usize = 20;
pub const STEPS_PER_ROUND: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Op {
    Idle(usize),
    Prep(usize),
    Hadamard(usize),
    CPhase(usize, usize),
    Measure(usize),
    Reset(usize),
}

impl Op {
    pub fn qubits(&self) -> (usize, Option<usize>) {
        match *self {
            Op::Idle(q) | Op::Prep(q) | Op::Hadamard(q) | Op::Measure(q) | Op::Reset(q) => (q, None),
            Op::CPhase(a, b) => (a, Some(b)),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Idle(_) => "IDLE",
            Op::Prep(_) => "PREP",
            Op::Hadamard(_) => "H",
            Op::CPhase(..) => "CZ",
            Op::Measure(_) => "MEASURE",
            Op::Reset(_) => "RESET",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateStep {
    pub index: usize,
    pub ops: Vec<Op>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Basis {
    X,
    Z,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ResetMode {
    Reset,
    NoReset,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleKind {
    Init,
    Cycle,
    FinalReadout(Basis),
}

/// What a measurement outcome means.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MeasurementRole {
    Syndrome { check: usize },
    Flag { check: usize },
    Data { qubit: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasurementSlot {
    pub step: usize,
    pub qubit: usize,
    pub role: MeasurementRole,
}

/// One measurement round inside a cycle.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Round {
    pub check_type: CheckType,
    pub steps: Range<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CircuitSchedule {
    pub kind: ScheduleKind,
    pub reset_mode: ResetMode,
    pub n_qubits: usize,
    pub n0_steps_per_cycle: usize,
    pub steps: Vec<GateStep>,
    /// Measurement outcomes in execution order.
    pub measurements: Vec<MeasurementSlot>,
}

impl CircuitSchedule {
    fn from_steps(kind: ScheduleKind, reset_mode: ResetMode, n_qubits: usize, steps: Vec<GateStep>, roles: impl Fn(usize, usize) -> MeasurementRole) -> Self {
        let measurements = steps
            .iter()
            .flat_map(|s| {
                s.ops.iter().filter_map(move |op| match *op {
                    Op::Measure(q) => Some((s.index, q)),
                    _ => None,
                })
            })
            .map(|(step, qubit)| MeasurementSlot { step, qubit, role: roles(step, qubit) })
            .collect();
        Self { kind, reset_mode, n_qubits, n0_steps_per_cycle: STEPS_PER_CYCLE, steps, measurements }
    }

    /// The two measurement rounds of a cycle schedule (empty for other kinds).
    pub fn rounds(&self) -> Vec<Round> {
        match self.kind {
            ScheduleKind::Cycle => vec![
                Round { check_type: CheckType::X, steps: 0..STEPS_PER_ROUND },
                Round { check_type: CheckType::Z, steps: STEPS_PER_ROUND..STEPS_PER_CYCLE },
            ],
            _ => Vec::new(),
        }
    }

    pub fn count_ops(&self, pred: impl Fn(&Op) -> bool) -> usize {
        self.steps.iter().flat_map(|s| &s.ops).filter(|op| pred(op)).count()
    }

    /// Ordered text listing, one line per operation.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# kind={:?} reset_mode={:?} steps={}", self.kind, self.reset_mode, self.steps.len());
        for s in &self.steps {
            for op in &s.ops {
                let (a, b) = op.qubits();
                match b {
                    Some(b) => {
                        let _ = writeln!(out, "{} {} {} {}", s.index, op.name(), a, b);
                    }
                    None => {
                        let _ = writeln!(out, "{} {} {}", s.index, op.name(), a);
                    }
                }
            }
        }
        out
    }
}

/// Builds the 20-step cycle program.
pub fn build_cycle_schedule(layout: &CodeLayout, reset_mode: ResetMode) -> Result<CircuitSchedule> {
    let n = layout.total_qubits;
    let mut steps = Vec::with_capacity(STEPS_PER_CYCLE);
    for check_type in [CheckType::X, CheckType::Z] {
        let offset = steps.len();
        for local in 0..STEPS_PER_ROUND {
            let mut ops = Vec::with_capacity(n);
            let mut busy = vec![false; n];
            let mut push = |op: Op, ops: &mut Vec<Op>| -> Result<()> {
                let (a, b) = op.qubits();
                for q in std::iter::once(a).chain(b) {
                    if busy[q] {
                        return Err(Error::Schedule(format!(
                            "qubit {q} used twice in step {}",
                            offset + local
                        )));
                    }
                    busy[q] = true;
                }
                ops.push(op);
                Ok(())
            };
            for tile in &layout.tiles {
                let (a, f) = (tile.ancilla, tile.flag);
                let slot = |k: usize| tile.slots[k];
                let pair: [Option<Op>; 2] = match local {
                    0 | 7 => [Some(Op::Hadamard(a)), Some(Op::Hadamard(f))],
                    1 | 6 => [Some(Op::CPhase(a, f)), None],
                    2 => [Some(Op::Hadamard(a)), slot(0).map(|d| Op::CPhase(f, d))],
                    3 => [slot(1).map(|d| Op::CPhase(a, d)), slot(2).map(|d| Op::CPhase(f, d))],
                    4 => [slot(3).map(|d| Op::CPhase(a, d)), slot(4).map(|d| Op::CPhase(f, d))],
                    5 => [slot(5).map(|d| Op::CPhase(a, d)), Some(Op::Hadamard(f))],
                    8 => [Some(Op::Measure(a)), Some(Op::Measure(f))],
                    9 => match reset_mode {
                        ResetMode::Reset => [Some(Op::Reset(a)), Some(Op::Reset(f))],
                        ResetMode::NoReset => [None, None],
                    },
                    _ => unreachable!(),
                };
                for op in pair.into_iter().flatten() {
                    push(op, &mut ops)?;
                }
            }
            if check_type == CheckType::X && (local == 0 || local == 7) {
                for q in 0..layout.n_data() {
                    push(Op::Hadamard(q), &mut ops)?;
                }
            }
            for q in 0..n {
                if !busy[q] {
                    ops.push(Op::Idle(q));
                }
            }
            ops.sort_by_key(|op| op.qubits().0);
            steps.push(GateStep { index: offset + local, ops });
        }
    }
    if steps.len() != STEPS_PER_CYCLE {
        return Err(Error::Schedule(format!("packed {} steps, expected {STEPS_PER_CYCLE}", steps.len())));
    }
    let nd = layout.n_data();
    let roles = |step: usize, q: usize| {
        let tile = (q - nd) / 2;
        let ty = if step < STEPS_PER_ROUND { CheckType::X } else { CheckType::Z };
        let check = layout.check_index(ty, tile);
        if (q - nd) % 2 == 0 {
            MeasurementRole::Syndrome { check }
        } else {
            MeasurementRole::Flag { check }
        }
    };
    Ok(CircuitSchedule::from_steps(ScheduleKind::Cycle, reset_mode, n, steps, roles))
}

/// Final data-qubit readout in the given basis. Ancillas and flags idle.
pub fn build_final_readout(layout: &CodeLayout, basis: Basis) -> CircuitSchedule {
    let n = layout.total_qubits;
    let nd = layout.n_data();
    let mut steps = Vec::new();
    if basis == Basis::X {
        steps.push(GateStep {
            index: 0,
            ops: (0..n).map(|q| if q < nd { Op::Hadamard(q) } else { Op::Idle(q) }).collect(),
        });
    }
    steps.push(GateStep {
        index: steps.len(),
        ops: (0..n).map(|q| if q < nd { Op::Measure(q) } else { Op::Idle(q) }).collect(),
    });
    CircuitSchedule::from_steps(
        ScheduleKind::FinalReadout(basis),
        ResetMode::Reset,
        n,
        steps,
        |_, q| MeasurementRole::Data { qubit: q },
    )
}

/// Preparation of every qubit. The simulator realizes it as an ideal
/// encoded `|0_L>` followed by preparation noise on each `PREP`.
pub fn build_init_schedule(layout: &CodeLayout, reset_mode: ResetMode) -> CircuitSchedule {
    let n = layout.total_qubits;
    CircuitSchedule::from_steps(
        ScheduleKind::Init,
        reset_mode,
        n,
        vec![GateStep { index: 0, ops: (0..n).map(Op::Prep).collect() }],
        |_, q| MeasurementRole::Data { qubit: q },
    )
}

/// Pauli frame over all qubits, propagated by Clifford conjugation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PauliFrame {
    pub x: BitVec,
    pub z: BitVec,
}

impl PauliFrame {
    pub fn new(n: usize) -> Self {
        Self { x: BitVec::zeros(n), z: BitVec::zeros(n) }
    }

    pub fn apply_pauli(&mut self, q: usize, p: Pauli) {
        let (x, z) = p.bits();
        if x {
            self.x.flip(q);
        }
        if z {
            self.z.flip(q);
        }
    }

    /// Conjugates the frame through `op`. Returns `true` when `op` is a
    /// measurement whose outcome the frame flips.
    pub fn apply(&mut self, op: &Op) -> bool {
        match *op {
            Op::Idle(_) => false,
            Op::Prep(q) | Op::Reset(q) => {
                self.x.set(q, false);
                self.z.set(q, false);
                false
            }
            Op::Hadamard(q) => {
                let (x, z) = (self.x.get(q), self.z.get(q));
                self.x.set(q, z);
                self.z.set(q, x);
                false
            }
            Op::CPhase(a, b) => {
                let (xa, xb) = (self.x.get(a), self.x.get(b));
                if xa {
                    self.z.flip(b);
                }
                if xb {
                    self.z.flip(a);
                }
                false
            }
            Op::Measure(q) => {
                let flipped = self.x.get(q);
                // Z components collapse; an X component stays as a flipped
                // post-measurement state until a reset clears it.
                self.z.set(q, false);
                flipped
            }
        }
    }

    pub fn data_operator(&self, n_data: usize) -> PauliOperator {
        PauliOperator { x: self.x.slice(0, n_data), z: self.z.slice(0, n_data) }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    StepCount { expected: usize, found: usize },
    QubitReused { step: usize, qubit: usize },
    QubitMissing { step: usize, qubit: usize },
    NonEdgeCPhase { step: usize, a: usize, b: usize },
    ResetInNoResetMode { step: usize, qubit: usize },
    NotResetBeforeReuse { step: usize, qubit: usize },
    /// A single ancilla/flag fault spreading to an unflagged data error of
    /// weight two or more (after reduction by the tile's stabilizers).
    HookUncontained { step: usize, qubit: usize, pauli: Pauli, tile: usize, weight: usize },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// Number of single faults examined by the hook check.
    pub faults_checked: usize,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Audits a schedule: per-step disjointness, step count, connectivity,
/// reset discipline and hook containment.
pub fn validate_schedule(layout: &CodeLayout, schedule: &CircuitSchedule) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n = schedule.n_qubits;
    let nd = layout.n_data();

    if schedule.kind == ScheduleKind::Cycle && schedule.steps.len() != STEPS_PER_CYCLE {
        report.violations.push(Violation::StepCount { expected: STEPS_PER_CYCLE, found: schedule.steps.len() });
    }

    let tile_of = |q: usize| (q >= nd && q < layout.total_qubits).then(|| (q - nd) / 2);
    let is_edge = |a: usize, b: usize| match (tile_of(a), tile_of(b)) {
        (Some(ta), Some(tb)) => ta == tb && a != b,
        (Some(t), None) => layout.tiles[t].support().any(|d| d == b),
        (None, Some(t)) => layout.tiles[t].support().any(|d| d == a),
        (None, None) => false,
    };

    for (si, step) in schedule.steps.iter().enumerate() {
        let mut seen = vec![0u8; n];
        for op in &step.ops {
            let (a, b) = op.qubits();
            for q in std::iter::once(a).chain(b) {
                seen[q] += 1;
            }
            if let Op::CPhase(a, b) = *op {
                if !is_edge(a, b) {
                    report.violations.push(Violation::NonEdgeCPhase { step: si, a, b });
                }
            }
            if let Op::Reset(q) = *op {
                if schedule.reset_mode == ResetMode::NoReset {
                    report.violations.push(Violation::ResetInNoResetMode { step: si, qubit: q });
                }
            }
        }
        for (q, &count) in seen.iter().enumerate() {
            if count > 1 {
                report.violations.push(Violation::QubitReused { step: si, qubit: q });
            } else if count == 0 {
                report.violations.push(Violation::QubitMissing { step: si, qubit: q });
            }
        }
    }

    if schedule.kind != ScheduleKind::Cycle || schedule.steps.len() != STEPS_PER_CYCLE {
        return report;
    }

    if schedule.reset_mode == ResetMode::Reset {
        // Every measured ancilla/flag must be reset before its next active use
        // (cyclically, since cycles repeat).
        for q in nd..n {
            let active: Vec<(usize, Op)> = schedule
                .steps
                .iter()
                .enumerate()
                .flat_map(|(si, s)| s.ops.iter().filter(move |op| op_touches(op, q)).map(move |op| (si, *op)))
                .filter(|(_, op)| !matches!(op, Op::Idle(_)))
                .collect();
            for (i, (si, op)) in active.iter().enumerate() {
                if matches!(op, Op::Measure(_)) {
                    let (_, next) = active[(i + 1) % active.len()];
                    if !matches!(next, Op::Reset(_) | Op::Prep(_)) {
                        report.violations.push(Violation::NotResetBeforeReuse { step: *si, qubit: q });
                    }
                }
            }
        }
    }

    check_hooks(layout, schedule, &mut report);
    report
}

fn op_touches(op: &Op, q: usize) -> bool {
    let (a, b) = op.qubits();
    a == q || b == Some(q)
}

fn check_hooks(layout: &CodeLayout, schedule: &CircuitSchedule, report: &mut ValidationReport) {
    let nd = layout.n_data();
    for round in schedule.rounds() {
        for si in round.steps.clone() {
            for op in &schedule.steps[si].ops {
                if matches!(op, Op::Measure(_)) {
                    continue;
                }
                let (a, b) = op.qubits();
                for q in std::iter::once(a).chain(b).filter(|&q| q >= nd) {
                    let tile = (q - nd) / 2;
                    for pauli in Pauli::NONTRIVIAL {
                        report.faults_checked += 1;
                        let mut frame = PauliFrame::new(schedule.n_qubits);
                        frame.apply_pauli(q, pauli);
                        let mut flagged = false;
                        for later in &schedule.steps[si + 1..round.steps.end] {
                            for lop in &later.ops {
                                if frame.apply(lop) {
                                    if let Op::Measure(mq) = lop {
                                        if *mq == layout.tiles[tile].flag {
                                            flagged = true;
                                        }
                                    }
                                }
                            }
                        }
                        let data = frame.data_operator(nd);
                        let weight = reduced_weight(layout, tile, &data);
                        if weight >= 2 && !flagged {
                            report.violations.push(Violation::HookUncontained { step: si, qubit: q, pauli, tile, weight });
                        }
                    }
                }
            }
        }
    }
}

/// Weight of `op` minimized over multiplication by the tile's X and Z stabilizers.
fn reduced_weight(layout: &CodeLayout, tile: usize, op: &PauliOperator) -> usize {
    let sx = PauliOperator::x_type(layout.x_stabilizers[tile].clone());
    let sz = PauliOperator::z_type(layout.z_stabilizers[tile].clone());
    [op.clone(), op.mul(&sx), op.mul(&sz), op.mul(&sx).mul(&sz)]
        .iter()
        .map(PauliOperator::weight)
        .min()
        .unwrap_or(0)
}
