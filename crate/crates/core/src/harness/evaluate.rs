//! Decoding test sets into fidelity-decay series.

use super::fit::{bootstrap_error, thinned_cycles, FidelityPoint, FidelitySeries};
use super::lookup::LookupDecoder;
use crate::data::SyndromeSequence;
use crate::error::{Error, Result};
use crate::gf2::BitVec;
use crate::net::{predict_readouts, Batch, DecoderParams};
use crate::par::Execution;
use std::collections::BTreeMap;

/// Bootstrap resamples behind each error bar.
pub const N_BOOT: usize = 200;

/// Anything that predicts the final parity after selected cycles.
pub trait ParityDecoder: Sync {
    /// Predicted parity (true = odd) of each `(cycle, δf)` readout request,
    /// for sequences of equal length.
    fn predict(&self, seqs: &[&SyndromeSequence], requests: &[Vec<(usize, &BitVec)>]) -> Result<Vec<Vec<bool>>>;
}

impl ParityDecoder for DecoderParams {
    fn predict(&self, seqs: &[&SyndromeSequence], requests: &[Vec<(usize, &BitVec)>]) -> Result<Vec<Vec<bool>>> {
        let batch = Batch::from_inputs(self.shape(), seqs)?;
        let finals: Vec<Vec<(usize, Vec<f64>)>> = requests
            .iter()
            .map(|r| r.iter().map(|&(t, df)| (t, df.to_bools().into_iter().map(f64::from).collect())).collect())
            .collect();
        // Even parity iff p < ½.
        Ok(predict_readouts(self, &batch, &finals).into_iter().map(|ps| ps.into_iter().map(|p| p >= 0.5).collect()).collect())
    }
}

impl ParityDecoder for LookupDecoder {
    fn predict(&self, seqs: &[&SyndromeSequence], requests: &[Vec<(usize, &BitVec)>]) -> Result<Vec<Vec<bool>>> {
        Ok(seqs
            .iter()
            .zip(requests)
            .map(|(s, req)| {
                let inputs: Vec<BitVec> = (0..s.n_cycles()).map(|t| s.input(t)).collect();
                req.iter().map(|&(t, df)| self.decode_parts(&inputs[..t], df)).collect()
            })
            .collect())
    }
}

/// Readouts available in a record: every cycle for test-style records, the
/// last one otherwise.
fn readouts(seq: &SyndromeSequence) -> Vec<(usize, &BitVec, bool)> {
    if seq.readouts.is_empty() {
        vec![(seq.n_cycles(), &seq.delta_f, seq.p_true)]
    } else {
        seq.readouts.iter().map(|r| (r.cycle, &r.delta_f, r.p_true)).collect()
    }
}

/// Sequences per prediction call.
const EVAL_BATCH: usize = 64;

/// Correctness of each prediction at the requested cycles, keyed by cycle.
pub fn correctness<D: ParityDecoder>(
    decoder: &D,
    seqs: &[SyndromeSequence],
    cycles: &[usize],
    exec: Execution,
) -> Result<BTreeMap<usize, Vec<bool>>> {
    let mut by_len: BTreeMap<usize, Vec<&SyndromeSequence>> = BTreeMap::new();
    for s in seqs {
        by_len.entry(s.n_cycles()).or_default().push(s);
    }
    let mut jobs: Vec<&[&SyndromeSequence]> = Vec::new();
    for group in by_len.values() {
        jobs.extend(group.chunks(EVAL_BATCH));
    }
    let wanted: std::collections::BTreeSet<usize> = cycles.iter().copied().collect();
    let results = exec.map_range(jobs.len(), |j| -> Result<Vec<(usize, bool)>> {
        let chunk = jobs[j];
        let mut truth = Vec::new();
        let requests: Vec<Vec<(usize, &BitVec)>> = chunk
            .iter()
            .map(|s| {
                let mut req = Vec::new();
                for (t, df, p) in readouts(s) {
                    if wanted.contains(&t) {
                        req.push((t, df));
                        truth.push((t, p));
                    }
                }
                req
            })
            .collect();
        let preds = decoder.predict(chunk, &requests)?;
        Ok(preds.into_iter().flatten().zip(truth).map(|(pred, (t, p))| (t, pred == p)).collect())
    });
    let mut out: BTreeMap<usize, Vec<bool>> = BTreeMap::new();
    for r in results {
        for (t, ok) in r? {
            out.entry(t).or_default().push(ok);
        }
    }
    Ok(out)
}

/// Fidelity at each cycle in `cycles` that some record can be read out at.
pub fn fidelity_series<D: ParityDecoder>(decoder: &D, seqs: &[SyndromeSequence], cycles: &[usize], exec: Execution) -> Result<FidelitySeries> {
    let hits = correctness(decoder, seqs, cycles, exec)?;
    let points = hits
        .into_iter()
        .map(|(t, ok)| FidelityPoint {
            t: t as f64,
            fidelity: ok.iter().filter(|&&b| b).count() as f64 / ok.len() as f64,
            n_samples: ok.len(),
            err: bootstrap_error(&ok, N_BOOT, t as u64),
        })
        .collect();
    Ok(FidelitySeries { points })
}

/// Fidelity decay on a test set, thinned to fewer than `max_points` cycles.
pub fn evaluate<D: ParityDecoder>(decoder: &D, test: &[SyndromeSequence], max_points: usize, exec: Execution) -> Result<FidelitySeries> {
    let t_max = test.iter().map(SyndromeSequence::n_cycles).max().ok_or_else(|| Error::InvalidArgument("empty test set".into()))?;
    let mut cycles = thinned_cycles(t_max, max_points);
    if cycles.is_empty() {
        cycles.push(t_max);
    }
    fidelity_series(decoder, test, &cycles, exec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::ResetMode;
    use crate::data::DatasetKind;
    use crate::harness::generate::{generate, GenerateConfig, Lengths};
    use crate::net::DecoderShape;
    use crate::sim::Engine;
    use rand::{Rng, SeedableRng};

    fn test_set(p: f64, count: u64, t: usize) -> Vec<SyndromeSequence> {
        let cfg = GenerateConfig {
            distance: 3,
            p_error: p,
            count,
            lengths: Lengths::Uniform { min: t, max: t },
            kind: DatasetKind::Test,
            reset_mode: ResetMode::Reset,
            seed: 5,
            engine: Engine::Frame,
        };
        generate(&cfg, Execution::Parallel).unwrap().1
    }

    struct Oracle;
    impl ParityDecoder for Oracle {
        fn predict(&self, seqs: &[&SyndromeSequence], req: &[Vec<(usize, &BitVec)>]) -> Result<Vec<Vec<bool>>> {
            Ok(seqs
                .iter()
                .zip(req)
                .map(|(s, r)| r.iter().map(|(t, _)| s.readouts.iter().find(|ro| ro.cycle == *t).unwrap().p_true).collect())
                .collect())
        }
    }

    struct Coin(u64);
    impl ParityDecoder for Coin {
        fn predict(&self, seqs: &[&SyndromeSequence], req: &[Vec<(usize, &BitVec)>]) -> Result<Vec<Vec<bool>>> {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.0 ^ seqs.len() as u64);
            Ok(req.iter().map(|r| r.iter().map(|_| rng.random_bool(0.5)).collect()).collect())
        }
    }

    #[test]
    fn perfect_decoder_on_noiseless_data() {
        let data = test_set(0.0, 50, 30);
        let s = evaluate(&LookupDecoder::build(ResetMode::Reset).unwrap(), &data, 50, Execution::Serial).unwrap();
        assert_eq!(s.points.len(), 29);
        assert!(s.points.iter().all(|p| p.fidelity == 1.0 && p.n_samples == 50));
        let zero_net = DecoderParams::zeros(DecoderShape::for_tiles(3, 4));
        // p = ½ exactly predicts odd, which is wrong on noiseless data.
        let s = evaluate(&zero_net, &data, 50, Execution::Serial).unwrap();
        assert!(s.points.iter().all(|p| p.fidelity == 0.0));
    }

    #[test]
    fn oracle_and_coin_flip_bounds() {
        let data = test_set(5e-3, 400, 20);
        let s = evaluate(&Oracle, &data, 50, Execution::Parallel).unwrap();
        assert!(s.points.iter().all(|p| p.fidelity == 1.0));
        let s = evaluate(&Coin(1), &data, 50, Execution::Parallel).unwrap();
        for p in &s.points {
            let sigma = (0.25 / p.n_samples as f64).sqrt();
            assert!((p.fidelity - 0.5).abs() < 4.0 * sigma, "{p:?}");
            assert!(p.err > 0.5 * sigma && p.err < 2.0 * sigma);
        }
    }

    #[test]
    fn lookup_decoder_decays() {
        let data = test_set(3e-3, 300, 30);
        let s = evaluate(&LookupDecoder::build(ResetMode::Reset).unwrap(), &data, 50, Execution::Parallel).unwrap();
        let first = s.points.first().unwrap().fidelity;
        let last = s.points.last().unwrap().fidelity;
        assert!(first > 0.9 && last < first, "{first} {last}");
    }
}
