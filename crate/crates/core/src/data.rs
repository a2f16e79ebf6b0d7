//! Syndrome increments, flag bits, final increments and true parities from
//! raw measurement records, plus the on-disk dataset format.
//!
//! Increments are referenced to `m(0) = 0`: the encoded state is prepared
//! with every stabilizer at +1, so a noiseless run has `δs ≡ 0` from the
//! first cycle on.
//!
//! Without ancilla reset the ancilla and flag of a tile enter each
//! measurement round in the state they were measured in. The compensation
//! is linear in `d(h) = (m(h), m_flag(h), s(h))`, the outcomes and tracked
//! stabilizer values after round `h`; two rounds (X then Z) make a cycle.

use crate::circuit::{Basis, CircuitSchedule, Op, PauliFrame, ResetMode, ScheduleKind};
use crate::code::{pure_error_basis, CheckType, CodeLayout};
use crate::error::{Error, Result};
use crate::gf2::{BitMatrix, BitVec};
use crate::sim::{Engine, RawRun};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Decoder-ready record of one memory experiment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyndromeSequence {
    /// Per cycle, increments of all `2·n_tiles` checks.
    pub delta_s: Vec<BitVec>,
    /// Per cycle, compensated flag bits in check order.
    pub s_flag: Vec<BitVec>,
    /// Final increment over the Z checks.
    pub delta_f: BitVec,
    pub p_true: bool,
    /// Final increments and parities after every cycle (test-style records).
    pub readouts: Vec<FinalReadout>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FinalReadout {
    pub cycle: usize,
    pub delta_f: BitVec,
    pub p_true: bool,
}

impl SyndromeSequence {
    pub fn n_cycles(&self) -> usize {
        self.delta_s.len()
    }

    /// Network input for cycle `t` (0-based): `δs(t) ‖ s_flag(t)`.
    pub fn input(&self, t: usize) -> BitVec {
        self.delta_s[t].concat(&self.s_flag[t])
    }

    pub fn is_trivial(&self) -> bool {
        self.delta_s.iter().chain(&self.s_flag).all(BitVec::is_zero) && self.delta_f.is_zero() && !self.p_true
    }
}

/// Compensation for one round type, acting on `d = (m, m_flag, s)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoundCompensation {
    pub check_type: CheckType,
    /// Expected syndrome outcomes `m⁰` (n_tiles × 4·n_tiles).
    pub m_m: BitMatrix,
    /// Expected flag outcomes `m⁰_flag`.
    pub m_f: BitMatrix,
    /// Syndrome change from data errors that ancilla states leave behind.
    pub m_s: BitMatrix,
    /// Logical parity of the same data errors.
    pub m_l: BitVec,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompensationMatrices {
    /// X round, then Z round.
    pub rounds: [RoundCompensation; 2],
}

impl CompensationMatrices {
    pub fn max_row_weight(&self) -> usize {
        self.rounds
            .iter()
            .flat_map(|r| [r.m_m.max_row_weight(), r.m_f.max_row_weight(), r.m_s.max_row_weight()])
            .max()
            .unwrap_or(0)
    }
}

/// Builds the no-reset compensation by propagating each ancilla/flag basis
/// state through one noiseless round.
pub fn build_compensation_matrices(layout: &CodeLayout, schedule: &CircuitSchedule) -> Result<CompensationMatrices> {
    if schedule.kind != ScheduleKind::Cycle || schedule.reset_mode != ResetMode::NoReset {
        return Err(Error::InvalidArgument("compensation needs a NO_RESET cycle schedule".into()));
    }
    let nt = layout.n_tiles();
    let nd = layout.n_data();
    let width = 4 * nt;
    let rounds = schedule.rounds();
    let mut out = Vec::with_capacity(2);
    for round in &rounds {
        let mut m_m = BitMatrix::zeros(nt, width);
        let mut m_f = BitMatrix::zeros(nt, width);
        let mut m_s = BitMatrix::zeros(2 * nt, width);
        let mut m_l = BitVec::zeros(width);
        for tile in 0..nt {
            m_m.set(tile, 2 * nt + layout.check_index(round.check_type, tile), true);
        }
        for col in 0..2 * nt {
            let tile = &layout.tiles[col % nt];
            let qubit = if col < nt { tile.ancilla } else { tile.flag };
            let mut frame = PauliFrame::new(schedule.n_qubits);
            frame.x.set(qubit, true);
            let mut touched = false;
            for step in &schedule.steps[round.steps.clone()] {
                for op in &step.ops {
                    let flipped = frame.apply(op);
                    if let Op::Measure(q) = *op {
                        let t = (q - nd) / 2;
                        if (q - nd) % 2 == 0 {
                            m_m.set(t, col, m_m.get(t, col) ^ flipped);
                        } else {
                            m_f.set(t, col, m_f.get(t, col) ^ flipped);
                        }
                    }
                    touched |= matches!(op, Op::Measure(q) if *q == qubit);
                }
            }
            if !touched {
                return Err(Error::Schedule(format!("qubit {qubit} is not measured in the {:?} round", round.check_type)));
            }
            // The qubit must end the round in the state it was measured in.
            let data = frame.data_operator(nd);
            m_s.set_column(col, &layout.syndrome(&data));
            m_l.set(col, layout.logical_z.dot(&data.x));
        }
        out.push(RoundCompensation { check_type: round.check_type, m_m, m_f, m_s, m_l });
    }
    let z = out.pop().expect("two rounds");
    let x = out.pop().expect("two rounds");
    Ok(CompensationMatrices { rounds: [x, z] })
}

/// Computes `δf` and `p_true` from final data bits.
///
/// `accumulated_z` is the tracked Z-check syndrome at readout time and
/// `tracked_logical` the logical parity of deterministic data errors left
/// by unreset ancillas (always 0 with reset).
pub fn compute_final_increment_and_parity(
    layout: &CodeLayout,
    data_bits: &BitVec,
    accumulated_z: &BitVec,
    pure_error_logicals: &BitVec,
    tracked_logical: bool,
) -> (BitVec, bool) {
    let delta_f = layout.z_parities(data_bits).xor(accumulated_z);
    let p_true = layout.logical_z.dot(data_bits) ^ pure_error_logicals.dot(&delta_f) ^ tracked_logical;
    (delta_f, p_true)
}

/// Streaming conversion of raw runs into syndrome sequences.
#[derive(Clone, Debug)]
pub struct Extractor {
    layout: CodeLayout,
    reset_mode: ResetMode,
    compensation: Option<CompensationMatrices>,
    /// Bit `k`: logical Z parity of the X-type pure error of Z check `k`.
    pure_error_logicals: BitVec,
}

impl Extractor {
    pub fn new(layout: &CodeLayout, reset_mode: ResetMode) -> Result<Self> {
        let compensation = match reset_mode {
            ResetMode::Reset => None,
            ResetMode::NoReset => {
                let schedule = crate::circuit::build_cycle_schedule(layout, ResetMode::NoReset)?;
                Some(build_compensation_matrices(layout, &schedule)?)
            }
        };
        let nt = layout.n_tiles();
        let pure = pure_error_basis(layout)?;
        let pure_error_logicals = BitVec::from_indices(nt, (0..nt).filter(|&k| layout.logical_z.dot(&pure[nt + k].x)));
        Ok(Self { layout: layout.clone(), reset_mode, compensation, pure_error_logicals })
    }

    pub fn compensation(&self) -> Option<&CompensationMatrices> {
        self.compensation.as_ref()
    }

    pub fn extract(&self, raw: &RawRun) -> Result<SyndromeSequence> {
        let nt = self.layout.n_tiles();
        self.extract_from(raw, &BitVec::zeros(nt), &BitVec::zeros(nt))
    }

    /// Extraction when ancillas and flags start in the given computational
    /// states instead of `|0>` (only meaningful without reset).
    pub fn extract_from(&self, raw: &RawRun, ancilla0: &BitVec, flag0: &BitVec) -> Result<SyndromeSequence> {
        let nt = self.layout.n_tiles();
        let nc = 2 * nt;
        if raw.reset_mode != self.reset_mode {
            return Err(Error::InvalidArgument(format!(
                "run uses {:?} but extractor expects {:?}",
                raw.reset_mode, self.reset_mode
            )));
        }
        if raw.final_basis != Basis::Z {
            return Err(Error::InvalidArgument("only Z-basis readout defines p_true for |0_L>".into()));
        }
        let dims_ok = raw.ancilla_bits.len() == raw.n_cycles
            && raw.flag_bits.len() == raw.n_cycles
            && raw.ancilla_bits.iter().chain(&raw.flag_bits).all(|v| v.len() == nc)
            && raw.final_data_bits.len() == self.layout.n_data()
            && ancilla0.len() == nt
            && flag0.len() == nt;
        if !dims_ok || raw.n_cycles == 0 {
            return Err(Error::Dimension(format!("raw run does not match layout {}", self.layout.descriptor())));
        }

        let mut delta_s = Vec::with_capacity(raw.n_cycles);
        let mut s_flag = Vec::with_capacity(raw.n_cycles);
        let mut tracked_z = Vec::with_capacity(raw.n_cycles);
        let mut tracked_l = Vec::with_capacity(raw.n_cycles);
        match &self.compensation {
            None => {
                let mut prev = BitVec::zeros(nc);
                for (a, f) in raw.ancilla_bits.iter().zip(&raw.flag_bits) {
                    delta_s.push(a.xor(&prev));
                    s_flag.push(f.clone());
                    prev = a.clone();
                    tracked_z.push(prev.slice(nt, nt));
                    tracked_l.push(false);
                }
            }
            Some(comp) => {
                let mut m = ancilla0.clone();
                let mut mf = flag0.clone();
                let mut s = BitVec::zeros(nc);
                let mut ell = false;
                for (a, f) in raw.ancilla_bits.iter().zip(&raw.flag_bits) {
                    let mut ds = BitVec::zeros(nc);
                    let mut sf = BitVec::zeros(nc);
                    for (k, rc) in comp.rounds.iter().enumerate() {
                        let offset = k * nt;
                        let d = m.concat(&mf).concat(&s);
                        let m0 = rc.m_m.mul_vec(&d);
                        let f0 = rc.m_f.mul_vec(&d);
                        let m_now = a.slice(offset, nt);
                        let f_now = f.slice(offset, nt);
                        let inc = m_now.xor(&m0);
                        let flags = f_now.xor(&f0);
                        let mut s_next = s.xor(&rc.m_s.mul_vec(&d));
                        for i in inc.ones() {
                            s_next.flip(offset + i);
                            ds.set(offset + i, true);
                        }
                        for i in flags.ones() {
                            sf.set(offset + i, true);
                        }
                        ell ^= rc.m_l.dot(&d);
                        s = s_next;
                        m = m_now;
                        mf = f_now;
                    }
                    delta_s.push(ds);
                    s_flag.push(sf);
                    tracked_z.push(s.slice(nt, nt));
                    tracked_l.push(ell);
                }
            }
        }

        let readout = |t: usize, bits: &BitVec| {
            let (delta_f, p_true) = compute_final_increment_and_parity(
                &self.layout,
                bits,
                &tracked_z[t - 1],
                &self.pure_error_logicals,
                tracked_l[t - 1],
            );
            FinalReadout { cycle: t, delta_f, p_true }
        };
        let last = readout(raw.n_cycles, &raw.final_data_bits);
        let readouts = if raw.readouts.is_empty() {
            Vec::new()
        } else {
            if raw.readouts.len() != raw.n_cycles {
                return Err(Error::Dimension(format!(
                    "{} branched readouts for {} cycles",
                    raw.readouts.len(),
                    raw.n_cycles
                )));
            }
            raw.readouts.iter().enumerate().map(|(i, b)| readout(i + 1, b)).collect()
        };
        Ok(SyndromeSequence { delta_s, s_flag, delta_f: last.delta_f, p_true: last.p_true, readouts })
    }
}

/// One-shot extraction.
pub fn extract_syndrome_records(raw: &RawRun, layout: &CodeLayout, reset_mode: ResetMode) -> Result<SyndromeSequence> {
    Extractor::new(layout, reset_mode)?.extract(raw)
}

pub const MAGIC: &[u8; 4] = b"CCNN";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// One final readout per record, at the record's last cycle.
    Train,
    /// A final readout branched after every cycle.
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub layout: String,
    pub distance: usize,
    pub n_tiles: usize,
    pub p_error: f64,
    pub reset_mode: ResetMode,
    pub kind: DatasetKind,
    pub seed: u64,
    pub count: u64,
    pub t_min: usize,
    pub t_max: usize,
    /// Reference convention for the first increment.
    pub increment_reference: String,
    /// Explicit record lengths, cycled over records; empty when lengths are
    /// drawn uniformly from `t_min..=t_max`.
    #[serde(default)]
    pub lengths: Vec<usize>,
    #[serde(default)]
    pub engine: Engine,
}

impl DatasetHeader {
    pub fn new(layout: &CodeLayout, p_error: f64, reset_mode: ResetMode, kind: DatasetKind, seed: u64, count: u64, t_range: (usize, usize)) -> Self {
        Self {
            layout: layout.descriptor(),
            distance: layout.distance,
            n_tiles: layout.n_tiles(),
            p_error,
            reset_mode,
            kind,
            seed,
            count,
            t_min: t_range.0,
            t_max: t_range.1,
            increment_reference: "m(0)=0".into(),
            lengths: Vec::new(),
            engine: Engine::default(),
        }
    }

    fn cycle_bytes(&self) -> usize {
        (4 * self.n_tiles).div_ceil(8)
    }

    fn final_bytes(&self) -> usize {
        self.n_tiles.div_ceil(8)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<SyndromeSequence>,
}

/// Streaming writer. Records are checked against the header dimensions.
pub struct DatasetWriter<W: Write> {
    inner: W,
    header: DatasetHeader,
    written: u64,
    buf: Vec<u8>,
}

impl<W: Write> DatasetWriter<W> {
    pub fn new(mut inner: W, header: DatasetHeader) -> Result<Self> {
        let text = serde_json::to_vec(&header)?;
        inner.write_all(MAGIC)?;
        inner.write_all(&FORMAT_VERSION.to_le_bytes())?;
        inner.write_all(&(text.len() as u32).to_le_bytes())?;
        inner.write_all(&text)?;
        Ok(Self { inner, header, written: 0, buf: Vec::new() })
    }

    pub fn write_record(&mut self, seq: &SyndromeSequence) -> Result<()> {
        let nt = self.header.n_tiles;
        let dims_ok = seq.n_cycles() > 0
            && seq.s_flag.len() == seq.n_cycles()
            && seq.delta_s.iter().chain(&seq.s_flag).all(|v| v.len() == 2 * nt)
            && seq.delta_f.len() == nt
            && seq.readouts.iter().all(|r| r.delta_f.len() == nt);
        if !dims_ok {
            return Err(Error::Dimension(format!("record {} does not match header", self.written)));
        }
        let buf = &mut self.buf;
        buf.clear();
        buf.extend_from_slice(&(seq.n_cycles() as u32).to_le_bytes());
        for t in 0..seq.n_cycles() {
            buf.extend_from_slice(&seq.input(t).to_bytes());
        }
        buf.extend_from_slice(&seq.delta_f.to_bytes());
        buf.push(seq.p_true as u8);
        if self.header.kind == DatasetKind::Test {
            buf.extend_from_slice(&(seq.readouts.len() as u32).to_le_bytes());
            for r in &seq.readouts {
                buf.extend_from_slice(&(r.cycle as u32).to_le_bytes());
                buf.extend_from_slice(&r.delta_f.to_bytes());
                buf.push(r.p_true as u8);
            }
        }
        let crc = crc32fast::hash(buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        self.inner.write_all(buf)?;
        self.written += 1;
        Ok(())
    }

    /// Flushes and checks the record count announced in the header.
    pub fn finish(mut self) -> Result<W> {
        if self.written != self.header.count {
            return Err(Error::Format(format!("header announces {} records, wrote {}", self.header.count, self.written)));
        }
        self.inner.flush()?;
        Ok(self.inner)
    }
}

/// Streaming reader yielding records one at a time.
pub struct DatasetReader<R: Read> {
    inner: R,
    header: DatasetHeader,
    read: u64,
}

impl<R: Read> DatasetReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut inner, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::BadMagic(String::from_utf8_lossy(&magic).into_owned()));
        }
        let version = u16::from_le_bytes(read_array(&mut inner, "version")?);
        if version != FORMAT_VERSION {
            return Err(Error::Version { found: version, expected: FORMAT_VERSION });
        }
        let len = u32::from_le_bytes(read_array(&mut inner, "header length")?) as usize;
        let mut text = vec![0u8; len];
        read_exact(&mut inner, &mut text, "header")?;
        let header: DatasetHeader = serde_json::from_slice(&text)?;
        Ok(Self { inner, header, read: 0 })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    pub fn next_record(&mut self) -> Result<Option<SyndromeSequence>> {
        if self.read == self.header.count {
            let mut probe = [0u8; 1];
            return match self.inner.read(&mut probe)? {
                0 => Ok(None),
                _ => Err(Error::Format("trailing bytes after last record".into())),
            };
        }
        let index = self.read as usize;
        let h = &self.header;
        let (cb, fb, nt) = (h.cycle_bytes(), h.final_bytes(), h.n_tiles);
        let mut raw = Vec::new();
        let take = |n: usize, raw: &mut Vec<u8>, inner: &mut R| -> Result<()> {
            let start = raw.len();
            raw.resize(start + n, 0);
            read_exact(inner, &mut raw[start..], "record")
        };
        take(4, &mut raw, &mut self.inner)?;
        let n_cycles = u32::from_le_bytes(raw[0..4].try_into().expect("4 bytes")) as usize;
        if n_cycles == 0 || n_cycles > 100_000_000 {
            return Err(Error::Format(format!("record {index} has implausible length {n_cycles}")));
        }
        take(n_cycles * cb + fb + 1, &mut raw, &mut self.inner)?;
        let readout_start = raw.len();
        let mut n_readouts = 0;
        if h.kind == DatasetKind::Test {
            take(4, &mut raw, &mut self.inner)?;
            n_readouts = u32::from_le_bytes(raw[readout_start..readout_start + 4].try_into().expect("4 bytes")) as usize;
            if n_readouts > n_cycles {
                return Err(Error::Format(format!("record {index}: {n_readouts} readouts for {n_cycles} cycles")));
            }
            take(n_readouts * (4 + fb + 1), &mut raw, &mut self.inner)?;
        }
        let crc = u32::from_le_bytes(read_array(&mut self.inner, "checksum")?);
        if crc32fast::hash(&raw) != crc {
            return Err(Error::Checksum { record: index });
        }

        let mut pos = 4;
        let mut delta_s = Vec::with_capacity(n_cycles);
        let mut s_flag = Vec::with_capacity(n_cycles);
        for _ in 0..n_cycles {
            let v = BitVec::from_bytes(4 * nt, &raw[pos..pos + cb]);
            delta_s.push(v.slice(0, 2 * nt));
            s_flag.push(v.slice(2 * nt, 2 * nt));
            pos += cb;
        }
        let delta_f = BitVec::from_bytes(nt, &raw[pos..pos + fb]);
        pos += fb;
        let p_true = raw[pos] != 0;
        pos += 1;
        let mut readouts = Vec::with_capacity(n_readouts);
        if h.kind == DatasetKind::Test {
            pos += 4;
            for _ in 0..n_readouts {
                let cycle = u32::from_le_bytes(raw[pos..pos + 4].try_into().expect("4 bytes")) as usize;
                pos += 4;
                let df = BitVec::from_bytes(nt, &raw[pos..pos + fb]);
                pos += fb;
                readouts.push(FinalReadout { cycle, delta_f: df, p_true: raw[pos] != 0 });
                pos += 1;
            }
        }
        self.read += 1;
        Ok(Some(SyndromeSequence { delta_s, s_flag, delta_f, p_true, readouts }))
    }
}

impl<R: Read> Iterator for DatasetReader<R> {
    type Item = Result<SyndromeSequence>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_record().transpose()
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated(format!("end of file while reading {what}")),
        _ => Error::IoBare(e),
    })
}

fn read_array<const N: usize, R: Read>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b, what)?;
    Ok(b)
}

/// Compact in-memory training record: per-cycle inputs packed into one
/// bit vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedSequence {
    n_cycles: usize,
    width: usize,
    inputs: BitVec,
    pub delta_f: BitVec,
    pub p_true: bool,
}

impl PackedSequence {
    pub fn n_cycles(&self) -> usize {
        self.n_cycles
    }

    /// Width of one cycle's input.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn input_bit(&self, t: usize, i: usize) -> bool {
        self.inputs.get(t * self.width + i)
    }

    /// Set input bits of cycle `t`.
    pub fn cycle_ones(&self, t: usize) -> impl Iterator<Item = usize> + '_ {
        let (lo, hi) = (t * self.width, (t + 1) * self.width);
        self.inputs.ones().skip_while(move |&i| i < lo).take_while(move |&i| i < hi).map(move |i| i - lo)
    }
}

impl From<&SyndromeSequence> for PackedSequence {
    fn from(seq: &SyndromeSequence) -> Self {
        let n_cycles = seq.n_cycles();
        let width = seq.delta_s.first().map_or(0, |v| v.len()) + seq.s_flag.first().map_or(0, |v| v.len());
        let mut inputs = BitVec::zeros(n_cycles * width);
        for t in 0..n_cycles {
            for i in seq.input(t).ones() {
                inputs.set(t * width + i, true);
            }
        }
        Self { n_cycles, width, inputs, delta_f: seq.delta_f.clone(), p_true: seq.p_true }
    }
}

/// Reads a dataset straight into packed records.
pub fn read_packed(path: &Path) -> Result<(DatasetHeader, Vec<PackedSequence>)> {
    let mut reader = open_dataset(path)?;
    let mut records = Vec::with_capacity(reader.header().count.min(1 << 24) as usize);
    while let Some(r) = reader.next_record()? {
        records.push(PackedSequence::from(&r));
    }
    Ok((reader.header, records))
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut header = dataset.header.clone();
    header.count = dataset.records.len() as u64;
    let mut w = DatasetWriter::new(BufWriter::new(file), header)?;
    for r in &dataset.records {
        w.write_record(r)?;
    }
    w.finish()?.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    Ok(())
}

pub fn open_dataset(path: &Path) -> Result<DatasetReader<BufReader<File>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    DatasetReader::new(BufReader::new(file))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut reader = open_dataset(path)?;
    let mut records = Vec::with_capacity(reader.header().count.min(1 << 24) as usize);
    while let Some(r) = reader.next_record()? {
        records.push(r);
    }
    Ok(Dataset { header: reader.header, records })
}

/// Human-readable dump: one row per (record, cycle). The final increment
/// and parity appear on rows where a readout was taken.
pub fn write_csv<W: Write>(dataset: &Dataset, mut out: W) -> Result<()> {
    writeln!(out, "record,cycle,delta_s,s_flag,delta_f,p_true")?;
    let bits = |v: &BitVec| format!("{v:?}");
    for (i, r) in dataset.records.iter().enumerate() {
        for t in 0..r.n_cycles() {
            let readout = r.readouts.iter().find(|ro| ro.cycle == t + 1).map(|ro| (&ro.delta_f, ro.p_true));
            let readout = readout.or((t + 1 == r.n_cycles()).then_some((&r.delta_f, r.p_true)));
            let (df, p) = match readout {
                Some((df, p)) => (bits(df), (p as u8).to_string()),
                None => (String::new(), String::new()),
            };
            writeln!(out, "{i},{},{},{},{df},{p}", t + 1, bits(&r.delta_s[t]), bits(&r.s_flag[t]))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::build_cycle_schedule;
    use crate::code::Pauli;
    use crate::sim::{sample_rng, Engine, Fault, FaultEffect, Location, NoiseParams, RunOptions, SampleRngs, Segment, Simulator};

    fn forced(sim: &Simulator, segment: Segment, step: usize, qubit: usize, effect: FaultEffect) -> Fault {
        let schedule = match segment {
            Segment::Init => &sim.init,
            Segment::Cycle(_) => &sim.cycle,
            Segment::Readout(_) => &sim.readout,
        };
        let st = &schedule.steps[step];
        let op_index = st
            .ops
            .iter()
            .position(|op| {
                let (a, b) = op.qubits();
                a == qubit || b == Some(qubit)
            })
            .unwrap();
        Fault { location: Location { segment, step, op_index }, op: st.ops[op_index], effect }
    }

    fn run(sim: &Simulator, t: usize, faults: &[Fault]) -> RawRun {
        let mut rngs = SampleRngs::new(17, 0);
        sim.run(t, &NoiseParams::noiseless(), &mut rngs, RunOptions { readout_every_cycle: true, ..Default::default() }, faults)
    }

    #[test]
    fn noiseless_sequences_are_trivial_in_both_modes() {
        for d in [3, 5] {
            let l = CodeLayout::new(d).unwrap();
            for mode in [ResetMode::Reset, ResetMode::NoReset] {
                let sim = Simulator::new(&l, mode, Basis::Z).unwrap();
                let seq = Extractor::new(&l, mode).unwrap().extract(&run(&sim, 12, &[])).unwrap();
                assert!(seq.is_trivial(), "d={d} {mode:?}");
                assert!(seq.readouts.iter().all(|r| r.delta_f.is_zero() && !r.p_true));
            }
        }
    }

    #[test]
    fn measurement_flip_gives_paired_increments() {
        let l = CodeLayout::new(3).unwrap();
        let sim = Simulator::new(&l, ResetMode::Reset, Basis::Z).unwrap();
        let ex = Extractor::new(&l, ResetMode::Reset).unwrap();
        for tile in 0..l.n_tiles() {
            for (step, check) in [(8, tile), (18, l.n_tiles() + tile)] {
                for t in 1..=3 {
                    let f = forced(&sim, Segment::Cycle(t), step, l.tiles[tile].ancilla, FaultEffect::MeasurementFlip);
                    let seq = ex.extract(&run(&sim, 5, &[f])).unwrap();
                    for (c, ds) in seq.delta_s.iter().enumerate() {
                        let expected = if c + 1 == t || c == t { vec![check] } else { vec![] };
                        assert_eq!(ds.ones().collect::<Vec<_>>(), expected, "tile {tile} cycle {t}");
                    }
                    assert!(seq.s_flag.iter().all(BitVec::is_zero));
                    assert!(seq.delta_f.is_zero() && !seq.p_true);
                }
            }
        }
    }

    #[test]
    fn flag_left_in_one_is_compensated() {
        let l = CodeLayout::new(5).unwrap();
        let sim = Simulator::new(&l, ResetMode::NoReset, Basis::Z).unwrap();
        let ex = Extractor::new(&l, ResetMode::NoReset).unwrap();
        let nt = l.n_tiles();
        for tile in 0..nt {
            // X right before the flag is measured in the X round of cycle 2:
            // the flag reads 1 and stays in |1>.
            let f = forced(&sim, Segment::Cycle(2), 7, l.tiles[tile].flag, FaultEffect::Single(Pauli::X));
            let seq = ex.extract(&run(&sim, 6, &[f])).unwrap();
            for (c, (ds, sf)) in seq.delta_s.iter().zip(&seq.s_flag).enumerate() {
                assert!(ds.is_zero(), "tile {tile} cycle {}", c + 1);
                let expected: Vec<usize> = if c == 1 { vec![tile] } else { vec![] };
                assert_eq!(sf.ones().collect::<Vec<_>>(), expected);
            }
            assert!(seq.delta_f.is_zero() && !seq.p_true);
        }
    }

    #[test]
    fn ancilla_left_in_one_is_compensated() {
        let l = CodeLayout::new(3).unwrap();
        let sim = Simulator::new(&l, ResetMode::NoReset, Basis::Z).unwrap();
        let ex = Extractor::new(&l, ResetMode::NoReset).unwrap();
        let nt = l.n_tiles();
        for tile in 0..nt {
            let f = forced(&sim, Segment::Cycle(1), 17, l.tiles[tile].ancilla, FaultEffect::Single(Pauli::X));
            let seq = ex.extract(&run(&sim, 5, &[f])).unwrap();
            // Looks like a Z-check measurement error; nothing else.
            for (c, ds) in seq.delta_s.iter().enumerate() {
                let expected: Vec<usize> = if c <= 1 { vec![nt + tile] } else { vec![] };
                assert_eq!(ds.ones().collect::<Vec<_>>(), expected, "tile {tile}");
            }
            assert!(seq.s_flag.iter().all(BitVec::is_zero));
            // After cycle 1 the flipped outcome is indistinguishable from a data error.
            for r in seq.readouts.iter().skip(1) {
                assert!(r.delta_f.is_zero() && !r.p_true, "tile {tile}, readout after cycle {}", r.cycle);
            }
        }
    }

    #[test]
    fn compensation_matches_tableau_from_random_initial_states() {
        for d in [3, 5] {
            let l = CodeLayout::new(d).unwrap();
            let sim = Simulator::new(&l, ResetMode::NoReset, Basis::Z).unwrap();
            let ex = Extractor::new(&l, ResetMode::NoReset).unwrap();
            let nt = l.n_tiles();
            let last = sim.init.steps.len() - 1;
            for seed in 0..8u64 {
                let mut rng = sample_rng(seed, 99);
                use rand::Rng;
                let a0 = BitVec::from_indices(nt, (0..nt).filter(|_| rng.random::<bool>()));
                let f0 = BitVec::from_indices(nt, (0..nt).filter(|_| rng.random::<bool>()));
                let mut faults = Vec::new();
                for t in a0.ones() {
                    faults.push(forced(&sim, Segment::Init, last, l.tiles[t].ancilla, FaultEffect::Single(Pauli::X)));
                }
                for t in f0.ones() {
                    faults.push(forced(&sim, Segment::Init, last, l.tiles[t].flag, FaultEffect::Single(Pauli::X)));
                }
                let seq = ex.extract_from(&run(&sim, 4, &faults), &a0, &f0).unwrap();
                assert!(seq.is_trivial(), "d={d} seed={seed}");
            }
        }
    }

    #[test]
    fn pair_states_act_locally() {
        let l = CodeLayout::new(3).unwrap();
        let s = build_cycle_schedule(&l, ResetMode::NoReset).unwrap();
        let c = build_compensation_matrices(&l, &s).unwrap();
        let nt = l.n_tiles();
        for (k, rc) in c.rounds.iter().enumerate() {
            for tile in 0..nt {
                // A flag in |1> flips its own syndrome outcome; an ancilla in
                // |1> flips its own flag.
                assert_eq!(rc.m_m.column(nt + tile).ones().collect::<Vec<_>>(), vec![tile], "round {k}");
                assert_eq!(rc.m_f.column(tile).ones().collect::<Vec<_>>(), vec![tile]);
                assert!(rc.m_f.column(nt + tile).is_zero());
                assert!(rc.m_s.column(nt + tile).is_zero());
            }
            assert!(rc.m_m.column(0).is_zero());
        }
    }

    #[test]
    fn compensation_is_local_for_all_distances() {
        for d in [3, 5, 7] {
            let l = CodeLayout::new(d).unwrap();
            let s = build_cycle_schedule(&l, ResetMode::NoReset).unwrap();
            let c = build_compensation_matrices(&l, &s).unwrap();
            let max_tile = l.tiles.iter().map(|t| t.weight()).max().unwrap();
            assert!(c.max_row_weight() <= max_tile + 2, "d={d}: {}", c.max_row_weight());
        }
    }

    #[test]
    fn compensation_rejects_reset_schedule() {
        let l = CodeLayout::new(3).unwrap();
        let s = build_cycle_schedule(&l, ResetMode::Reset).unwrap();
        assert!(build_compensation_matrices(&l, &s).is_err());
    }

    #[test]
    fn logical_flip_mid_run() {
        let l = CodeLayout::new(3).unwrap();
        for mode in [ResetMode::Reset, ResetMode::NoReset] {
            let sim = Simulator::new(&l, mode, Basis::Z).unwrap();
            let faults: Vec<Fault> = l
                .logical_x
                .ones()
                .map(|q| forced(&sim, Segment::Cycle(2), 19, q, FaultEffect::Single(Pauli::X)))
                .collect();
            let seq = Extractor::new(&l, mode).unwrap().extract(&run(&sim, 4, &faults)).unwrap();
            assert!(seq.delta_s.iter().all(BitVec::is_zero));
            assert!(seq.delta_f.is_zero());
            assert!(seq.p_true);
            let flips: Vec<bool> = seq.readouts.iter().map(|r| r.p_true).collect();
            assert_eq!(flips, vec![false, true, true, true]);
        }
    }

    #[test]
    fn final_readout_flip_matches_pure_error_oracle() {
        let l = CodeLayout::new(3).unwrap();
        let sim = Simulator::new(&l, ResetMode::Reset, Basis::Z).unwrap();
        let ex = Extractor::new(&l, ResetMode::Reset).unwrap();
        let pure = pure_error_basis(&l).unwrap();
        let nt = l.n_tiles();
        let mut flipped_off_support = 0;
        for q in 0..l.n_data() {
            let f = forced(&sim, Segment::Readout(3), 0, q, FaultEffect::MeasurementFlip);
            let seq = ex.extract(&run(&sim, 3, &[f])).unwrap();
            let expected_df = BitVec::from_indices(nt, (0..nt).filter(|&t| l.z_stabilizers[t].get(q)));
            assert_eq!(seq.delta_f, expected_df);
            // Oracle: parity of X_q times the pure-error correction of its syndrome.
            let mut correction = BitVec::unit(l.n_data(), q);
            for k in expected_df.ones() {
                correction.xor_assign(&pure[nt + k].x);
            }
            assert_eq!(seq.p_true, l.logical_z.dot(&correction), "qubit {q}");
            if !l.logical_z.get(q) && seq.p_true {
                flipped_off_support += 1;
            }
        }
        // Some single flips off the bottom row still complete to a logical
        // with their pure-error correction.
        assert!(flipped_off_support > 0);
    }

    #[test]
    fn p_true_is_gauge_independent() {
        let l = CodeLayout::new(5).unwrap();
        let pure = pure_error_basis(&l).unwrap();
        let nt = l.n_tiles();
        let pel = BitVec::from_indices(nt, (0..nt).filter(|&k| l.logical_z.dot(&pure[nt + k].x)));
        let mut rng = sample_rng(3, 3);
        use rand::Rng;
        for _ in 0..50 {
            let bits = BitVec::from_indices(l.n_data(), (0..l.n_data()).filter(|_| rng.random::<bool>()));
            let acc = BitVec::from_indices(nt, (0..nt).filter(|_| rng.random::<bool>()));
            let (df, p) = compute_final_increment_and_parity(&l, &bits, &acc, &pel, false);
            for s in &l.z_stabilizers {
                let (df2, p2) = compute_final_increment_and_parity(&l, &bits.xor(s), &acc, &pel, false);
                assert_eq!((df2, p2), (df.clone(), p));
            }
        }
    }

    fn sample_dataset(kind: DatasetKind, count: usize) -> Dataset {
        let l = CodeLayout::new(3).unwrap();
        let sim = Simulator::new(&l, ResetMode::Reset, Basis::Z).unwrap();
        let ex = Extractor::new(&l, ResetMode::Reset).unwrap();
        let noise = NoiseParams::uniform(0.02).unwrap();
        let opts = RunOptions { readout_every_cycle: kind == DatasetKind::Test, ..Default::default() };
        let records = (0..count)
            .map(|i| ex.extract(&sim.run_seeded(1 + i % 7, &noise, 5, i as u64, opts)).unwrap())
            .collect();
        Dataset {
            header: DatasetHeader::new(&l, 0.02, ResetMode::Reset, kind, 5, count as u64, (1, 7)),
            records,
        }
    }

    #[test]
    fn frame_engine_matches_tableau() {
        for (d, mode) in [(3, ResetMode::Reset), (3, ResetMode::NoReset), (5, ResetMode::NoReset)] {
            let l = CodeLayout::new(d).unwrap();
            let sim = Simulator::new(&l, mode, Basis::Z).unwrap();
            let ex = Extractor::new(&l, mode).unwrap();
            let noise = NoiseParams::uniform(0.01).unwrap();
            for i in 0..40 {
                let opts = RunOptions { readout_every_cycle: true, ..Default::default() };
                let tab = sim.run_seeded(6, &noise, 99, i, opts);
                let frame = sim.run_seeded(6, &noise, 99, i, RunOptions { engine: Engine::Frame, ..opts });
                assert_eq!(tab.fault_log, frame.fault_log);
                assert_eq!(tab.ancilla_bits, frame.ancilla_bits, "d={d} {mode:?} sample {i}");
                assert_eq!(tab.flag_bits, frame.flag_bits);
                let (a, b) = (ex.extract(&tab).unwrap(), ex.extract(&frame).unwrap());
                assert_eq!(a.delta_s, b.delta_s);
                assert_eq!(a.s_flag, b.s_flag);
                assert_eq!(a.delta_f, b.delta_f);
                assert_eq!(a.p_true, b.p_true, "d={d} {mode:?} sample {i}");
                assert_eq!(a.readouts, b.readouts);
            }
        }
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for kind in [DatasetKind::Train, DatasetKind::Test] {
            for count in [0, 1, 25] {
                let ds = sample_dataset(kind, count);
                let path = dir.path().join("ds.bin");
                write_dataset(&ds, &path).unwrap();
                assert_eq!(read_dataset(&path).unwrap(), ds);
            }
        }
    }

    #[test]
    fn corrupted_and_truncated_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        write_dataset(&sample_dataset(DatasetKind::Train, 10), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let mut bad = bytes.clone();
        let last = bad.len() - 10;
        bad[last] ^= 0x40;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Checksum { .. })));

        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Truncated(_))));

        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        std::fs::write(&path, &wrong_version).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Version { found: 9, .. })));

        let mut wrong_magic = bytes;
        wrong_magic[0] = b'X';
        std::fs::write(&path, &wrong_magic).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::BadMagic(_))));
    }

    #[test]
    fn csv_has_one_row_per_cycle() {
        let ds = sample_dataset(DatasetKind::Train, 4);
        let mut out = Vec::new();
        write_csv(&ds, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let cycles: usize = ds.records.iter().map(|r| r.n_cycles()).sum();
        assert_eq!(text.lines().count(), cycles + 1);
    }
}
