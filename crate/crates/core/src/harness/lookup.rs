//! Lookup-table reference decoder for distance 3.
//!
//! The table holds the detection signature of every single circuit fault,
//! anchored at the first cycle it touches. Decoding walks the sequence from
//! the start, matches a window at the first nonzero cycle, removes the
//! matched signature and accumulates its parity. Windows near the end of
//! the sequence include the final increment. Anything unmatched contributes
//! parity 0, which is the pure-error convention built into `p_true`.

use crate::circuit::{Basis, ResetMode};
use crate::code::CodeLayout;
use crate::data::{Extractor, SyndromeSequence};
use crate::error::{Error, Result};
use crate::gf2::BitVec;
use crate::sim::{sample_rng, Fault, NoiseParams, RunOptions, Simulator};
use std::collections::HashMap;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct Key {
    /// The window starts at cycle 1.
    start: bool,
    /// Cycles from the window start to the end of the sequence, inclusive,
    /// when that is within the window span.
    near_end: Option<usize>,
    window: Vec<BitVec>,
    delta_f: Option<BitVec>,
}

#[derive(Clone, Debug, Default)]
struct Entry {
    odd: usize,
    even: usize,
}

impl Entry {
    fn parity(&self) -> bool {
        self.odd > self.even
    }
}

/// A single fault's observable effect on one sequence.
#[derive(Clone, Debug)]
pub struct FaultSignature {
    pub fault: Fault,
    pub n_cycles: usize,
    pub sequence: SyndromeSequence,
}

#[derive(Clone, Debug)]
pub struct LookupDecoder {
    span: usize,
    table: HashMap<Key, Entry>,
    conflicts: usize,
}

/// Simulates every single fault of runs with `1..=max_cycles` cycles.
pub fn single_fault_signatures(sim: &Simulator, extractor: &Extractor, n_cycles: usize) -> Result<Vec<FaultSignature>> {
    let noise = NoiseParams::noiseless();
    let mut out = Vec::new();
    let mut rng = sample_rng(0x5eed, 0);
    for fault in sim.enumerate_single_faults(n_cycles) {
        let raw = sim.run_frame(n_cycles, &noise, &mut rng, RunOptions::default(), &[fault]);
        out.push(FaultSignature { fault, n_cycles, sequence: extractor.extract(&raw)? });
    }
    Ok(out)
}

fn inputs(seq: &SyndromeSequence) -> Vec<BitVec> {
    (0..seq.n_cycles()).map(|t| seq.input(t)).collect()
}

impl LookupDecoder {
    /// Builds the distance-3 table for the given reset mode.
    pub fn build(reset_mode: ResetMode) -> Result<Self> {
        let layout = CodeLayout::new(3)?;
        let sim = Simulator::new(&layout, reset_mode, Basis::Z)?;
        let extractor = Extractor::new(&layout, reset_mode)?;

        // Longest time extent of a single-fault signature, from a long run.
        let probe = single_fault_signatures(&sim, &extractor, 8)?;
        let span = probe
            .iter()
            .filter_map(|s| {
                let cycles = inputs(&s.sequence);
                let first = cycles.iter().position(|c| !c.is_zero())?;
                let last = cycles.iter().rposition(|c| !c.is_zero())?;
                Some(last - first + 1)
            })
            .max()
            .unwrap_or(1);
        if span + 3 > 8 {
            return Err(Error::Schedule(format!("single-fault signatures span {span} cycles")));
        }

        let mut dec = Self { span, table: HashMap::new(), conflicts: 0 };
        for t in 1..=span + 3 {
            for sig in single_fault_signatures(&sim, &extractor, t)? {
                let cycles = inputs(&sig.sequence);
                let Some(t0) = first_event(&cycles, &sig.sequence.delta_f) else {
                    continue;
                };
                let key = dec.key(&cycles, &sig.sequence.delta_f, t0);
                let e = dec.table.entry(key).or_default();
                if sig.sequence.p_true {
                    e.odd += 1;
                } else {
                    e.even += 1;
                }
            }
        }
        dec.conflicts = dec.table.values().filter(|e| e.odd > 0 && e.even > 0).count();
        Ok(dec)
    }

    /// Number of signatures shared by faults of opposite parity.
    pub fn conflicts(&self) -> usize {
        self.conflicts
    }

    pub fn span(&self) -> usize {
        self.span
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    fn key(&self, cycles: &[BitVec], delta_f: &BitVec, t0: usize) -> Key {
        let rem = cycles.len() - t0;
        let near = rem <= self.span;
        let end = if near { cycles.len() } else { t0 + self.span };
        Key {
            start: t0 == 0,
            near_end: near.then_some(rem),
            window: cycles[t0..end].to_vec(),
            delta_f: near.then(|| delta_f.clone()),
        }
    }

    /// Predicted parity of a full sequence.
    pub fn decode(&self, seq: &SyndromeSequence) -> bool {
        self.decode_parts(&inputs(seq), &seq.delta_f)
    }

    /// Predicted parity given per-cycle inputs `δs ‖ s_flag` and the final increment.
    pub fn decode_parts(&self, cycles: &[BitVec], delta_f: &BitVec) -> bool {
        let mut cycles = cycles.to_vec();
        let mut delta_f = delta_f.clone();
        let mut parity = false;
        while let Some(t0) = first_event(&cycles, &delta_f) {
            let key = self.key(&cycles, &delta_f, t0);
            match self.table.get(&key) {
                Some(e) => {
                    parity ^= e.parity();
                    for (k, w) in key.window.iter().enumerate() {
                        cycles[t0 + k].xor_assign(w);
                    }
                    if let Some(df) = &key.delta_f {
                        delta_f.xor_assign(df);
                    }
                }
                None if t0 < cycles.len() => cycles[t0] = BitVec::zeros(cycles[t0].len()),
                None => break,
            }
        }
        parity
    }
}

/// First cycle with a nonzero input; `cycles.len()` when only `δf` is nonzero.
fn first_event(cycles: &[BitVec], delta_f: &BitVec) -> Option<usize> {
    cycles
        .iter()
        .position(|c| !c.is_zero())
        .or_else(|| (!delta_f.is_zero()).then_some(cycles.len()))
}

/// Convenience wrapper with a freshly built table.
pub fn reference_decoder_d3(seq: &SyndromeSequence) -> Result<bool> {
    Ok(LookupDecoder::build(ResetMode::Reset)?.decode(seq))
}
