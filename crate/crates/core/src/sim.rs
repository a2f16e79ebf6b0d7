//! Stabilizer-tableau simulation of the extraction circuits under
//! circuit-level Pauli noise.

use crate::circuit::{
    build_cycle_schedule, build_final_readout, build_init_schedule, Basis, CircuitSchedule, MeasurementRole, Op,
    PauliFrame, ResetMode,
};
use crate::code::{pure_error_basis, CodeLayout, Pauli, PauliOperator};
use crate::error::{Error, Result};
use crate::gf2::{words_for, BitVec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Aaronson–Gottesman tableau with destabilizers. Rows `0..n` are
/// destabilizers, `n..2n` stabilizers, row `2n` is scratch space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tableau {
    n: usize,
    w: usize,
    x: Vec<u64>,
    z: Vec<u64>,
    r: Vec<bool>,
}

impl Tableau {
    /// The all-zeros state.
    pub fn new(n: usize) -> Self {
        let w = words_for(n).max(1);
        let rows = 2 * n + 1;
        let mut t = Self { n, w, x: vec![0; rows * w], z: vec![0; rows * w], r: vec![false; rows] };
        for q in 0..n {
            t.x[q * w + q / 64] |= 1 << (q % 64);
            t.z[(n + q) * w + q / 64] |= 1 << (q % 64);
        }
        t
    }

    pub fn n_qubits(&self) -> usize {
        self.n
    }

    #[inline]
    fn bit(words: &[u64], w: usize, row: usize, q: usize) -> bool {
        (words[row * w + q / 64] >> (q % 64)) & 1 == 1
    }

    pub fn hadamard(&mut self, q: usize) {
        let (k, m) = (q / 64, 1u64 << (q % 64));
        for row in 0..2 * self.n {
            let i = row * self.w + k;
            let (xb, zb) = (self.x[i] & m, self.z[i] & m);
            if xb != 0 && zb != 0 {
                self.r[row] ^= true;
            }
            self.x[i] = (self.x[i] & !m) | zb;
            self.z[i] = (self.z[i] & !m) | xb;
        }
    }

    /// Phase gate `S`.
    pub fn phase(&mut self, q: usize) {
        let (k, m) = (q / 64, 1u64 << (q % 64));
        for row in 0..2 * self.n {
            let i = row * self.w + k;
            if self.x[i] & m != 0 {
                if self.z[i] & m != 0 {
                    self.r[row] ^= true;
                }
                self.z[i] ^= m;
            }
        }
    }

    pub fn cnot(&mut self, c: usize, t: usize) {
        let w = self.w;
        for row in 0..2 * self.n {
            let (xc, zc) = (Self::bit(&self.x, w, row, c), Self::bit(&self.z, w, row, c));
            let (xt, zt) = (Self::bit(&self.x, w, row, t), Self::bit(&self.z, w, row, t));
            if xc && zt && (xt == zc) {
                self.r[row] ^= true;
            }
            if xc {
                self.x[row * w + t / 64] ^= 1 << (t % 64);
            }
            if zt {
                self.z[row * w + c / 64] ^= 1 << (c % 64);
            }
        }
    }

    /// Controlled-phase: `X_a -> X_a Z_b`, `X_b -> Z_a X_b`.
    pub fn cz(&mut self, a: usize, b: usize) {
        let w = self.w;
        for row in 0..2 * self.n {
            let (xa, za) = (Self::bit(&self.x, w, row, a), Self::bit(&self.z, w, row, a));
            let (xb, zb) = (Self::bit(&self.x, w, row, b), Self::bit(&self.z, w, row, b));
            if xa && xb && (za != zb) {
                self.r[row] ^= true;
            }
            if xb {
                self.z[row * w + a / 64] ^= 1 << (a % 64);
            }
            if xa {
                self.z[row * w + b / 64] ^= 1 << (b % 64);
            }
        }
    }

    /// Applies a single-qubit Pauli to the state (flips the signs of anticommuting rows).
    pub fn apply_pauli(&mut self, q: usize, p: Pauli) {
        let (px, pz) = p.bits();
        let w = self.w;
        for row in 0..2 * self.n {
            let anti = (px && Self::bit(&self.z, w, row, q)) ^ (pz && Self::bit(&self.x, w, row, q));
            if anti {
                self.r[row] ^= true;
            }
        }
    }

    pub fn apply_operator(&mut self, op: &PauliOperator) {
        for q in 0..op.n_qubits() {
            let p = op.get(q);
            if p != Pauli::I {
                self.apply_pauli(q, p);
            }
        }
    }

    /// Row `h` := row `h` · row `i`, tracking the phase.
    fn rowsum(&mut self, h: usize, i: usize) {
        let w = self.w;
        let (mut plus, mut minus) = (0i64, 0i64);
        for k in 0..w {
            let (x1, z1) = (self.x[i * w + k], self.z[i * w + k]);
            let (x2, z2) = (self.x[h * w + k], self.z[h * w + k]);
            let p = (x1 & z1 & z2 & !x2) | (x1 & !z1 & x2 & z2) | (!x1 & z1 & x2 & !z2);
            let m = (x1 & z1 & x2 & !z2) | (x1 & !z1 & !x2 & z2) | (!x1 & z1 & x2 & z2);
            plus += p.count_ones() as i64;
            minus += m.count_ones() as i64;
            self.x[h * w + k] ^= x1;
            self.z[h * w + k] ^= z1;
        }
        let total = 2 * self.r[h] as i64 + 2 * self.r[i] as i64 + plus - minus;
        self.r[h] = total.rem_euclid(4) == 2;
    }

    fn copy_row(&mut self, dst: usize, src: usize) {
        let w = self.w;
        self.x.copy_within(src * w..src * w + w, dst * w);
        self.z.copy_within(src * w..src * w + w, dst * w);
        self.r[dst] = self.r[src];
    }

    fn clear_row(&mut self, row: usize) {
        let w = self.w;
        self.x[row * w..row * w + w].fill(0);
        self.z[row * w..row * w + w].fill(0);
        self.r[row] = false;
    }

    /// Outcome of a Z measurement if it is deterministic.
    pub fn peek_z(&mut self, q: usize) -> Option<bool> {
        let n = self.n;
        if (n..2 * n).any(|row| Self::bit(&self.x, self.w, row, q)) {
            return None;
        }
        let scratch = 2 * n;
        self.clear_row(scratch);
        for i in 0..n {
            if Self::bit(&self.x, self.w, i, q) {
                self.rowsum(scratch, i + n);
            }
        }
        Some(self.r[scratch])
    }

    /// Z measurement; returns the outcome bit (1 for the -1 eigenvalue).
    pub fn measure_z<R: Rng + ?Sized>(&mut self, q: usize, rng: &mut R) -> bool {
        let n = self.n;
        let w = self.w;
        match (n..2 * n).find(|&row| Self::bit(&self.x, w, row, q)) {
            Some(p) => {
                for row in 0..2 * n {
                    if row != p && Self::bit(&self.x, w, row, q) {
                        self.rowsum(row, p);
                    }
                }
                self.copy_row(p - n, p);
                self.clear_row(p);
                let outcome = rng.random::<bool>();
                self.z[p * w + q / 64] |= 1 << (q % 64);
                self.r[p] = outcome;
                outcome
            }
            None => self.peek_z(q).expect("deterministic branch"),
        }
    }

    /// Measures a Hermitian Pauli product (letters X/Y/Z, sign +).
    pub fn measure_pauli<R: Rng + ?Sized>(&mut self, op: &PauliOperator, rng: &mut R) -> Result<bool> {
        if op.n_qubits() != self.n {
            return Err(Error::Dimension(format!("operator on {} qubits, tableau has {}", op.n_qubits(), self.n)));
        }
        let n = self.n;
        let w = self.w;
        let anti = |t: &Tableau, row: usize| {
            let mut acc = 0u32;
            for k in 0..w {
                let (ox, oz) = (op.x.words().get(k).copied().unwrap_or(0), op.z.words().get(k).copied().unwrap_or(0));
                acc += ((t.x[row * w + k] & oz) ^ (t.z[row * w + k] & ox)).count_ones();
            }
            acc & 1 == 1
        };
        match (n..2 * n).find(|&row| anti(self, row)) {
            Some(p) => {
                for row in 0..2 * n {
                    if row != p && anti(self, row) {
                        self.rowsum(row, p);
                    }
                }
                self.copy_row(p - n, p);
                self.clear_row(p);
                for k in 0..w {
                    self.x[p * w + k] = op.x.words().get(k).copied().unwrap_or(0);
                    self.z[p * w + k] = op.z.words().get(k).copied().unwrap_or(0);
                }
                let outcome = rng.random::<bool>();
                self.r[p] = outcome;
                Ok(outcome)
            }
            None => {
                let scratch = 2 * n;
                self.clear_row(scratch);
                for i in 0..n {
                    if anti(self, i) {
                        self.rowsum(scratch, i + n);
                    }
                }
                Ok(self.r[scratch])
            }
        }
    }

    /// Projects qubit `q` onto `|0>`.
    pub fn reset<R: Rng + ?Sized>(&mut self, q: usize, rng: &mut R) {
        if self.measure_z(q, rng) {
            self.apply_pauli(q, Pauli::X);
        }
    }

    /// Stabilizer generators with their sign bits.
    pub fn stabilizers(&self) -> Vec<(PauliOperator, bool)> {
        (self.n..2 * self.n).map(|row| (self.row_operator(row), self.r[row])).collect()
    }

    fn row_operator(&self, row: usize) -> PauliOperator {
        let w = self.w;
        let bits = |words: &[u64]| BitVec::from_indices(self.n, (0..self.n).filter(|&q| Self::bit(words, w, row, q)));
        PauliOperator { x: bits(&self.x), z: bits(&self.z) }
    }

    /// Symplectic structure: destabilizer `i` anticommutes with stabilizer `i`
    /// only, and each family commutes internally.
    pub fn is_valid(&self) -> bool {
        let rows: Vec<PauliOperator> = (0..2 * self.n).map(|r| self.row_operator(r)).collect();
        for i in 0..2 * self.n {
            for j in i + 1..2 * self.n {
                let expected = j == i + self.n && i < self.n;
                if rows[i].symplectic(&rows[j]) != expected {
                    return false;
                }
            }
        }
        true
    }
}

/// Which operation types receive noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub p_error: f64,
    pub prep: bool,
    pub idle: bool,
    pub rotation: bool,
    pub cphase: bool,
    pub measurement: bool,
}

impl NoiseParams {
    pub fn uniform(p_error: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_error) {
            return Err(Error::InvalidArgument(format!("p_error must lie in [0, 1], got {p_error}")));
        }
        Ok(Self { p_error, prep: true, idle: true, rotation: true, cphase: true, measurement: true })
    }

    pub fn noiseless() -> Self {
        Self { p_error: 0.0, prep: false, idle: false, rotation: false, cphase: false, measurement: false }
    }

    fn rate(&self, op: &Op) -> f64 {
        let on = match op {
            Op::Prep(_) | Op::Reset(_) => self.prep,
            Op::Idle(_) => self.idle,
            Op::Hadamard(_) => self.rotation,
            Op::CPhase(..) => self.cphase,
            Op::Measure(_) => self.measurement,
        };
        if on {
            self.p_error
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Segment {
    Init,
    /// Error-correction cycle, numbered from 1.
    Cycle(usize),
    /// Final readout following the given cycle.
    Readout(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Location {
    pub segment: Segment,
    pub step: usize,
    /// Position of the operation within its step.
    pub op_index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FaultEffect {
    Single(Pauli),
    Double(Pauli, Pauli),
    MeasurementFlip,
}

/// A fault applied right after the operation at `location`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fault {
    pub location: Location,
    pub op: Op,
    pub effect: FaultEffect,
}

const PAULIS: [Pauli; 4] = [Pauli::I, Pauli::X, Pauli::Y, Pauli::Z];

/// Every fault effect an operation can suffer.
pub fn possible_effects(op: &Op) -> Vec<FaultEffect> {
    match op {
        Op::Measure(_) => vec![FaultEffect::MeasurementFlip],
        Op::CPhase(..) => (1..16).map(|k| FaultEffect::Double(PAULIS[k / 4], PAULIS[k % 4])).collect(),
        _ => Pauli::NONTRIVIAL.iter().map(|&p| FaultEffect::Single(p)).collect(),
    }
}

/// Draws the fault (if any) suffered by one operation.
pub fn sample_fault<R: Rng + ?Sized>(op: &Op, noise: &NoiseParams, rng: &mut R) -> Option<FaultEffect> {
    let p = noise.rate(op);
    if p <= 0.0 || rng.random::<f64>() >= p {
        return None;
    }
    Some(match op {
        Op::Measure(_) => FaultEffect::MeasurementFlip,
        Op::CPhase(..) => {
            let k = rng.random_range(1..16);
            FaultEffect::Double(PAULIS[k / 4], PAULIS[k % 4])
        }
        _ => FaultEffect::Single(Pauli::NONTRIVIAL[rng.random_range(0..3)]),
    })
}

/// Samples independent faults for every operation of one schedule.
pub fn inject_errors<R: Rng + ?Sized>(
    schedule: &CircuitSchedule,
    segment: Segment,
    noise: &NoiseParams,
    rng: &mut R,
) -> Vec<Fault> {
    let mut out = Vec::new();
    for step in &schedule.steps {
        for (op_index, op) in step.ops.iter().enumerate() {
            if let Some(effect) = sample_fault(op, noise, rng) {
                out.push(Fault { location: Location { segment, step: step.index, op_index }, op: *op, effect });
            }
        }
    }
    out
}

/// Random stream keyed by `(seed, stream)`.
pub fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// The two random streams of one sample: fault draws and the coin flips of
/// random measurement outcomes. Keeping them apart gives both engines the
/// same faults for the same seed.
#[derive(Clone, Debug)]
pub struct SampleRngs {
    pub faults: ChaCha8Rng,
    pub outcomes: ChaCha8Rng,
}

impl SampleRngs {
    pub fn new(seed: u64, index: u64) -> Self {
        Self { faults: sample_rng(seed, 2 * index), outcomes: sample_rng(seed, 2 * index + 1) }
    }
}

/// Measurement record of one noisy memory experiment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawRun {
    pub n_cycles: usize,
    pub reset_mode: ResetMode,
    pub final_basis: Basis,
    /// Per cycle, syndrome-ancilla outcomes in check order (X checks, then Z).
    pub ancilla_bits: Vec<BitVec>,
    /// Per cycle, flag outcomes in check order.
    pub flag_bits: Vec<BitVec>,
    pub final_data_bits: BitVec,
    /// Data readouts branched after each cycle (test-style runs only).
    pub readouts: Vec<BitVec>,
    pub fault_log: Vec<Fault>,
    pub seed: u64,
}

impl RawRun {
    pub fn fault_log_text(&self) -> String {
        let mut out = String::new();
        for f in &self.fault_log {
            let _ = writeln!(out, "{:?} step={} op={:?} effect={:?}", f.location.segment, f.location.step, f.op, f.effect);
        }
        out
    }
}

/// How a run is simulated.
///
/// `Tableau` tracks the full stabilizer state. `Frame` propagates only the
/// Pauli frame relative to the noiseless reference run, whose syndrome and
/// flag outcomes are all 0 for the sign-fixed initial state; final data
/// bits are then reported relative to the all-zero codeword. Both give the
/// same syndrome sequences for the same faults.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    #[default]
    Tableau,
    Frame,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub engine: Engine,
    /// Branch a final readout after every cycle.
    pub readout_every_cycle: bool,
    /// Check tableau validity after every step.
    pub validate_tableau: bool,
}

/// Precompiled programs and the encoded initial state for one layout.
#[derive(Clone, Debug)]
pub struct Simulator {
    pub layout: CodeLayout,
    pub reset_mode: ResetMode,
    pub final_basis: Basis,
    pub init: CircuitSchedule,
    pub cycle: CircuitSchedule,
    pub readout: CircuitSchedule,
    logical_zero: Tableau,
}

impl Simulator {
    pub fn new(layout: &CodeLayout, reset_mode: ResetMode, final_basis: Basis) -> Result<Self> {
        Ok(Self {
            layout: layout.clone(),
            reset_mode,
            final_basis,
            init: build_init_schedule(layout, reset_mode),
            cycle: build_cycle_schedule(layout, reset_mode)?,
            readout: build_final_readout(layout, final_basis),
            logical_zero: prepare_logical_zero(layout)?,
        })
    }

    /// Runs with the per-sample stream `(seed, index)`.
    pub fn run_seeded(&self, n_cycles: usize, noise: &NoiseParams, seed: u64, index: u64, options: RunOptions) -> RawRun {
        let mut rngs = SampleRngs::new(seed, index);
        let mut run = match options.engine {
            Engine::Tableau => self.run(n_cycles, noise, &mut rngs, options, &[]),
            Engine::Frame => self.run_frame(n_cycles, noise, &mut rngs.faults, options, &[]),
        };
        run.seed = seed;
        run
    }

    /// Initialization, `n_cycles` cycles and the final readout. `forced`
    /// faults are applied in addition to sampled ones.
    pub fn run(
        &self,
        n_cycles: usize,
        noise: &NoiseParams,
        rngs: &mut SampleRngs,
        options: RunOptions,
        forced: &[Fault],
    ) -> RawRun {
        let nc = self.layout.n_checks();
        let mut tab = self.logical_zero.clone();
        let mut log = Vec::new();
        let mut outcomes = Vec::new();
        let ctx = Ctx { noise, forced, validate: options.validate_tableau };
        self.exec(&mut tab, &self.init, Segment::Init, false, &ctx, rngs, &mut log, &mut outcomes);

        let mut ancilla_bits = Vec::with_capacity(n_cycles);
        let mut flag_bits = Vec::with_capacity(n_cycles);
        let mut readouts = Vec::new();
        for t in 1..=n_cycles {
            outcomes.clear();
            self.exec(&mut tab, &self.cycle, Segment::Cycle(t), true, &ctx, rngs, &mut log, &mut outcomes);
            let (a, f) = self.split_cycle_outcomes(&outcomes, nc);
            ancilla_bits.push(a);
            flag_bits.push(f);
            if options.readout_every_cycle && t < n_cycles {
                let mut branch = tab.clone();
                readouts.push(self.read_data(&mut branch, t, &ctx, rngs, &mut log));
            }
        }
        let final_data_bits = self.read_data(&mut tab, n_cycles, &ctx, rngs, &mut log);
        if options.readout_every_cycle {
            readouts.push(final_data_bits.clone());
        }
        RawRun {
            n_cycles,
            reset_mode: self.reset_mode,
            final_basis: self.final_basis,
            ancilla_bits,
            flag_bits,
            final_data_bits,
            readouts,
            fault_log: log,
            seed: 0,
        }
    }

    fn split_cycle_outcomes(&self, outcomes: &[bool], nc: usize) -> (BitVec, BitVec) {
        let mut a = BitVec::zeros(nc);
        let mut f = BitVec::zeros(nc);
        for (slot, &bit) in self.cycle.measurements.iter().zip(outcomes) {
            match slot.role {
                MeasurementRole::Syndrome { check } => a.set(check, bit),
                MeasurementRole::Flag { check } => f.set(check, bit),
                MeasurementRole::Data { .. } => unreachable!("cycle measures no data qubits"),
            }
        }
        (a, f)
    }

    fn data_bits(&self, outcomes: &[bool]) -> BitVec {
        let mut bits = BitVec::zeros(self.layout.n_data());
        for (slot, &b) in self.readout.measurements.iter().zip(outcomes) {
            if let MeasurementRole::Data { qubit } = slot.role {
                bits.set(qubit, b);
            }
        }
        bits
    }

    fn read_data(&self, tab: &mut Tableau, after: usize, ctx: &Ctx, rngs: &mut SampleRngs, log: &mut Vec<Fault>) -> BitVec {
        let mut outcomes = Vec::with_capacity(self.layout.n_data());
        self.exec(tab, &self.readout, Segment::Readout(after), true, ctx, rngs, log, &mut outcomes);
        self.data_bits(&outcomes)
    }

    #[allow(clippy::too_many_arguments)]
    fn exec(
        &self,
        tab: &mut Tableau,
        schedule: &CircuitSchedule,
        segment: Segment,
        apply_ops: bool,
        ctx: &Ctx,
        rngs: &mut SampleRngs,
        log: &mut Vec<Fault>,
        outcomes: &mut Vec<bool>,
    ) {
        for step in &schedule.steps {
            for (op_index, op) in step.ops.iter().enumerate() {
                let mut outcome = None;
                if apply_ops {
                    match *op {
                        Op::Idle(_) => {}
                        Op::Prep(q) | Op::Reset(q) => tab.reset(q, &mut rngs.outcomes),
                        Op::Hadamard(q) => tab.hadamard(q),
                        Op::CPhase(a, b) => tab.cz(a, b),
                        Op::Measure(q) => outcome = Some(tab.measure_z(q, &mut rngs.outcomes)),
                    }
                }
                let location = Location { segment, step: step.index, op_index };
                let sampled = sample_fault(op, ctx.noise, &mut rngs.faults);
                let forced = ctx.forced.iter().filter(|f| f.location == location).map(|f| f.effect);
                for effect in sampled.into_iter().chain(forced) {
                    match (effect, *op) {
                        (FaultEffect::MeasurementFlip, _) => {
                            if let Some(o) = outcome.as_mut() {
                                *o ^= true;
                            }
                        }
                        (FaultEffect::Single(p), _) => tab.apply_pauli(op.qubits().0, p),
                        (FaultEffect::Double(pa, pb), Op::CPhase(a, b)) => {
                            tab.apply_pauli(a, pa);
                            tab.apply_pauli(b, pb);
                        }
                        (FaultEffect::Double(..), _) => {}
                    }
                    log.push(Fault { location, op: *op, effect });
                }
                if let Some(o) = outcome {
                    outcomes.push(o);
                }
            }
            if ctx.validate {
                debug_assert!(tab.is_valid(), "tableau lost symplectic structure at {segment:?} step {}", step.index);
            }
        }
    }

    /// Same experiment as [`Simulator::run`], propagating only the Pauli frame.
    pub fn run_frame<R: Rng + ?Sized>(
        &self,
        n_cycles: usize,
        noise: &NoiseParams,
        faults_rng: &mut R,
        options: RunOptions,
        forced: &[Fault],
    ) -> RawRun {
        let nc = self.layout.n_checks();
        let mut frame = PauliFrame::new(self.layout.total_qubits);
        let mut log = Vec::new();
        let mut outcomes = Vec::new();
        let ctx = Ctx { noise, forced, validate: false };
        self.exec_frame(&mut frame, &self.init, Segment::Init, false, &ctx, faults_rng, &mut log, &mut outcomes);
        let mut ancilla_bits = Vec::with_capacity(n_cycles);
        let mut flag_bits = Vec::with_capacity(n_cycles);
        let mut readouts = Vec::new();
        for t in 1..=n_cycles {
            outcomes.clear();
            self.exec_frame(&mut frame, &self.cycle, Segment::Cycle(t), true, &ctx, faults_rng, &mut log, &mut outcomes);
            let (a, f) = self.split_cycle_outcomes(&outcomes, nc);
            ancilla_bits.push(a);
            flag_bits.push(f);
            if options.readout_every_cycle && t < n_cycles {
                let mut branch = frame.clone();
                outcomes.clear();
                self.exec_frame(&mut branch, &self.readout, Segment::Readout(t), true, &ctx, faults_rng, &mut log, &mut outcomes);
                readouts.push(self.data_bits(&outcomes));
            }
        }
        outcomes.clear();
        self.exec_frame(&mut frame, &self.readout, Segment::Readout(n_cycles), true, &ctx, faults_rng, &mut log, &mut outcomes);
        let final_data_bits = self.data_bits(&outcomes);
        if options.readout_every_cycle {
            readouts.push(final_data_bits.clone());
        }
        RawRun {
            n_cycles,
            reset_mode: self.reset_mode,
            final_basis: self.final_basis,
            ancilla_bits,
            flag_bits,
            final_data_bits,
            readouts,
            fault_log: log,
            seed: 0,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn exec_frame<R: Rng + ?Sized>(
        &self,
        frame: &mut PauliFrame,
        schedule: &CircuitSchedule,
        segment: Segment,
        apply_ops: bool,
        ctx: &Ctx,
        rng: &mut R,
        log: &mut Vec<Fault>,
        outcomes: &mut Vec<bool>,
    ) {
        for step in &schedule.steps {
            for (op_index, op) in step.ops.iter().enumerate() {
                let mut outcome = None;
                if apply_ops {
                    let flipped = frame.apply(op);
                    if matches!(op, Op::Measure(_)) {
                        outcome = Some(flipped);
                    }
                }
                let sampled = sample_fault(op, ctx.noise, rng);
                if sampled.is_none() && ctx.forced.is_empty() {
                    if let Some(o) = outcome {
                        outcomes.push(o);
                    }
                    continue;
                }
                let location = Location { segment, step: step.index, op_index };
                let forced = ctx.forced.iter().filter(|f| f.location == location).map(|f| f.effect);
                for effect in sampled.into_iter().chain(forced) {
                    match (effect, *op) {
                        (FaultEffect::MeasurementFlip, _) => {
                            if let Some(o) = outcome.as_mut() {
                                *o ^= true;
                            }
                        }
                        (FaultEffect::Single(p), _) => frame.apply_pauli(op.qubits().0, p),
                        (FaultEffect::Double(pa, pb), Op::CPhase(a, b)) => {
                            frame.apply_pauli(a, pa);
                            frame.apply_pauli(b, pb);
                        }
                        (FaultEffect::Double(..), _) => {}
                    }
                    log.push(Fault { location, op: *op, effect });
                }
                if let Some(o) = outcome {
                    outcomes.push(o);
                }
            }
        }
    }

    /// Every single-fault location and effect of a run with `n_cycles` cycles.
    pub fn enumerate_single_faults(&self, n_cycles: usize) -> Vec<Fault> {
        let mut out = Vec::new();
        let mut push = |schedule: &CircuitSchedule, segment: Segment| {
            for step in &schedule.steps {
                for (op_index, op) in step.ops.iter().enumerate() {
                    for effect in possible_effects(op) {
                        out.push(Fault { location: Location { segment, step: step.index, op_index }, op: *op, effect });
                    }
                }
            }
        };
        push(&self.init, Segment::Init);
        for t in 1..=n_cycles {
            push(&self.cycle, Segment::Cycle(t));
        }
        push(&self.readout, Segment::Readout(n_cycles));
        out
    }
}

struct Ctx<'a> {
    noise: &'a NoiseParams,
    forced: &'a [Fault],
    validate: bool,
}

/// Encoded `|0_L>` on the data qubits with every stabilizer and the logical
/// Z at eigenvalue +1; ancillas and flags in `|0>`.
pub fn prepare_logical_zero(layout: &CodeLayout) -> Result<Tableau> {
    let n = layout.total_qubits;
    let nd = layout.n_data();
    let mut tab = Tableau::new(n);
    let pure = pure_error_basis(layout)?;
    // The choice of measurement randomness does not affect the final state.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let widen = |op: &PauliOperator| PauliOperator {
        x: BitVec::from_indices(n, op.x.ones()),
        z: BitVec::from_indices(n, op.z.ones()),
    };
    for (t, support) in layout.x_stabilizers.iter().enumerate() {
        let op = widen(&PauliOperator::x_type(support.clone()));
        if tab.measure_pauli(&op, &mut rng)? {
            tab.apply_operator(&widen(&pure[t]));
        }
    }
    for g in layout.generators().iter().chain([&layout.logical_z_operator()]) {
        if tab.measure_pauli(&widen(g), &mut rng)? {
            return Err(Error::Singular(format!("generator not fixed to +1 on {nd} data qubits")));
        }
    }
    Ok(tab)
}

/// Convenience wrapper: builds a simulator and runs one experiment.
pub fn run_experiment(
    layout: &CodeLayout,
    n_cycles: usize,
    noise: &NoiseParams,
    seed: u64,
    reset_mode: ResetMode,
    final_basis: Basis,
) -> Result<RawRun> {
    if n_cycles == 0 {
        return Err(Error::InvalidArgument("at least one cycle is required".into()));
    }
    let sim = Simulator::new(layout, reset_mode, final_basis)?;
    Ok(sim.run_seeded(n_cycles, noise, seed, 0, RunOptions::default()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_clifford_state(n: usize, seed: u64) -> Tableau {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tableau::new(n);
        for _ in 0..40 {
            let a = rng.random_range(0..n);
            let b = (a + 1 + rng.random_range(0..n - 1)) % n;
            match rng.random_range(0..3) {
                0 => t.hadamard(a),
                1 => t.phase(a),
                _ => t.cnot(a, b),
            }
        }
        t
    }

    #[test]
    fn hadamard_is_an_involution() {
        let mut t = random_clifford_state(5, 1);
        let before = t.clone();
        t.hadamard(2);
        t.hadamard(2);
        assert_eq!(t, before);
    }

    #[test]
    fn cz_matches_conjugated_cnot() {
        for seed in 0..20 {
            let mut a = random_clifford_state(4, seed);
            let mut b = a.clone();
            a.cz(1, 3);
            b.hadamard(3);
            b.cnot(1, 3);
            b.hadamard(3);
            assert_eq!(a.stabilizers(), b.stabilizers(), "seed {seed}");
        }
    }

    #[test]
    fn cz_spreads_x_to_z() {
        // |+0>: stabilizers X_0, Z_1. After CZ: X_0 Z_1, Z_1.
        let mut t = Tableau::new(2);
        t.hadamard(0);
        t.cz(0, 1);
        let stabs = t.stabilizers();
        assert_eq!(format!("{:?}", stabs[0].0), "XZ");
        assert!(!stabs[0].1);
    }

    #[test]
    fn measuring_plus_state_is_fair() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let trials = 10_000;
        let mut ones = 0;
        for _ in 0..trials {
            let mut t = Tableau::new(1);
            t.hadamard(0);
            ones += t.measure_z(0, &mut rng) as usize;
        }
        let sigma = (trials as f64 * 0.25).sqrt();
        assert!((ones as f64 - trials as f64 / 2.0).abs() < 3.0 * sigma, "ones = {ones}");
    }

    #[test]
    fn repeated_measurement_is_stable_and_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = random_clifford_state(6, 11);
        for q in 0..6 {
            let a = t.measure_z(q, &mut rng);
            assert_eq!(t.measure_z(q, &mut rng), a);
            assert!(t.is_valid());
        }
    }

    #[test]
    fn logical_zero_fixes_checks_and_logical() {
        for d in [3, 5] {
            let l = CodeLayout::new(d).unwrap();
            let mut tab = prepare_logical_zero(&l).unwrap();
            assert_eq!(tab.n_qubits(), l.total_qubits);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let n = l.total_qubits;
            let widen = |op: PauliOperator| PauliOperator {
                x: BitVec::from_indices(n, op.x.ones()),
                z: BitVec::from_indices(n, op.z.ones()),
            };
            for g in l.generators().into_iter().chain([l.logical_z_operator()]) {
                let g = widen(g);
                let before = tab.stabilizers();
                assert!(!tab.measure_pauli(&g, &mut rng).unwrap());
                assert_eq!(tab.stabilizers(), before, "measurement was not deterministic");
            }
            for q in l.n_data()..n {
                assert_eq!(tab.peek_z(q), Some(false));
            }
        }
    }

    #[test]
    fn zero_noise_draws_no_faults() {
        let l = CodeLayout::new(3).unwrap();
        let s = build_cycle_schedule(&l, ResetMode::Reset).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(inject_errors(&s, Segment::Cycle(1), &NoiseParams::uniform(0.0).unwrap(), &mut rng).is_empty());
    }

    #[test]
    fn certain_single_qubit_fault_is_uniform_over_paulis() {
        let noise = NoiseParams::uniform(1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let trials = 10_000;
        let mut counts = [0usize; 3];
        for _ in 0..trials {
            match sample_fault(&Op::Idle(0), &noise, &mut rng) {
                Some(FaultEffect::Single(p)) => counts[Pauli::NONTRIVIAL.iter().position(|&q| q == p).unwrap()] += 1,
                other => panic!("unexpected {other:?}"),
            }
        }
        let (mean, sigma) = (trials as f64 / 3.0, (trials as f64 * 2.0 / 9.0).sqrt());
        for c in counts {
            assert!((c as f64 - mean).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn empirical_fault_rate_matches_p() {
        let l = CodeLayout::new(3).unwrap();
        let s = build_cycle_schedule(&l, ResetMode::Reset).unwrap();
        let noise = NoiseParams::uniform(1e-3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cycles = 1000;
        let mut faults = 0;
        for t in 0..cycles {
            faults += inject_errors(&s, Segment::Cycle(t), &noise, &mut rng).len();
        }
        let locations = (cycles * s.steps.iter().map(|st| st.ops.len()).sum::<usize>()) as f64;
        let sigma = (locations * 1e-3 * (1.0 - 1e-3)).sqrt();
        assert!((faults as f64 - locations * 1e-3).abs() < 3.0 * sigma);
    }

    #[test]
    fn noiseless_runs_are_deterministic() {
        for d in [3, 5] {
            let l = CodeLayout::new(d).unwrap();
            for mode in [ResetMode::Reset, ResetMode::NoReset] {
                let run = run_experiment(&l, 10, &NoiseParams::uniform(0.0).unwrap(), 1, mode, Basis::Z).unwrap();
                assert!(run.fault_log.is_empty());
                let first = &run.ancilla_bits[0];
                if mode == ResetMode::Reset {
                    assert!(run.ancilla_bits.iter().all(|a| a == first));
                    assert!(run.flag_bits.iter().all(BitVec::is_zero));
                }
                assert!(l.z_parities(&run.final_data_bits).is_zero());
                assert!(!l.logical_z.dot(&run.final_data_bits));
            }
        }
    }

    #[test]
    fn tableau_stays_valid_through_noisy_cycles() {
        let l = CodeLayout::new(3).unwrap();
        let sim = Simulator::new(&l, ResetMode::NoReset, Basis::Z).unwrap();
        let mut rngs = SampleRngs::new(4, 0);
        let opts = RunOptions { validate_tableau: true, ..Default::default() };
        sim.run(5, &NoiseParams::uniform(0.02).unwrap(), &mut rngs, opts, &[]);
    }

    #[test]
    fn same_seed_same_run() {
        let l = CodeLayout::new(3).unwrap();
        let noise = NoiseParams::uniform(0.01).unwrap();
        let a = run_experiment(&l, 20, &noise, 42, ResetMode::Reset, Basis::Z).unwrap();
        let b = run_experiment(&l, 20, &noise, 42, ResetMode::Reset, Basis::Z).unwrap();
        assert_eq!(a, b);
        assert!(!a.fault_log.is_empty());
    }

    #[test]
    fn forced_data_x_flips_only_containing_z_tiles() {
        let l = CodeLayout::new(5).unwrap();
        let sim = Simulator::new(&l, ResetMode::Reset, Basis::Z).unwrap();
        let nt = l.n_tiles();
        for q in 0..l.n_data() {
            // X on data qubit q right after the last step of cycle 2.
            let step = sim.cycle.steps.last().unwrap();
            let op_index = step.ops.iter().position(|op| op.qubits().0 == q).unwrap();
            let fault = Fault {
                location: Location { segment: Segment::Cycle(2), step: step.index, op_index },
                op: step.ops[op_index],
                effect: FaultEffect::Single(Pauli::X),
            };
            let mut rngs = SampleRngs::new(0, q as u64);
            let run = sim.run(4, &NoiseParams::noiseless(), &mut rngs, RunOptions::default(), &[fault]);
            let changed = run.ancilla_bits[2].xor(&run.ancilla_bits[1]);
            let expected = BitVec::from_indices(
                2 * nt,
                (0..nt).filter(|&t| l.z_stabilizers[t].get(q)).map(|t| nt + t),
            );
            assert_eq!(changed, expected, "qubit {q}");
            assert_eq!(run.ancilla_bits[3], run.ancilla_bits[2]);
        }
    }

    #[test]
    fn fault_enumeration_covers_every_op() {
        let l = CodeLayout::new(3).unwrap();
        let sim = Simulator::new(&l, ResetMode::Reset, Basis::Z).unwrap();
        let faults = sim.enumerate_single_faults(1);
        let measure = faults.iter().filter(|f| f.effect == FaultEffect::MeasurementFlip).count();
        assert_eq!(measure, 2 * l.n_checks() + l.n_data());
    }
}
