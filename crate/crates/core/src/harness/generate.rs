//! Seeded dataset generation.
//!
//! Record `i` of a dataset with seed `s` is a pure function of `(s, i)`, so
//! files are identical whatever the execution mode or block size.

use crate::circuit::{Basis, ResetMode};
use crate::code::CodeLayout;
use crate::data::{DatasetHeader, DatasetKind, DatasetWriter, Extractor, SyndromeSequence};
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::sim::{sample_rng, Engine, NoiseParams, RunOptions, Simulator};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

/// Records simulated per parallel work unit.
const BLOCK: usize = 2048;

/// Separates the length draws from the simulation streams of the same seed.
const LENGTH_SALT: u64 = 0x4c45_4e47_5448_5321;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lengths {
    /// Each record draws its length uniformly from `min..=max`.
    Uniform { min: usize, max: usize },
    /// Record `i` has length `grid[i % grid.len()]`.
    Grid(Vec<usize>),
}

impl Lengths {
    fn bounds(&self) -> (usize, usize) {
        match self {
            Lengths::Uniform { min, max } => (*min, *max),
            Lengths::Grid(g) => (g.iter().copied().min().unwrap_or(0), g.iter().copied().max().unwrap_or(0)),
        }
    }

    fn length_of(&self, seed: u64, i: u64) -> usize {
        match self {
            Lengths::Uniform { min, max } => sample_rng(seed ^ LENGTH_SALT, i).random_range(*min..=*max),
            Lengths::Grid(g) => g[i as usize % g.len()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub distance: usize,
    pub p_error: f64,
    pub count: u64,
    pub lengths: Lengths,
    pub kind: DatasetKind,
    pub reset_mode: ResetMode,
    pub seed: u64,
    pub engine: Engine,
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.lengths.bounds();
        if lo == 0 || lo > hi {
            return Err(Error::InvalidArgument(format!("bad length range {lo}..={hi}")));
        }
        if !(0.0..1.0).contains(&self.p_error) {
            return Err(Error::InvalidArgument(format!("p_error must lie in [0, 1), got {}", self.p_error)));
        }
        Ok(())
    }

    pub fn header(&self, layout: &CodeLayout) -> DatasetHeader {
        let mut h = DatasetHeader::new(layout, self.p_error, self.reset_mode, self.kind, self.seed, self.count, self.lengths.bounds());
        if let Lengths::Grid(g) = &self.lengths {
            h.lengths = g.clone();
        }
        h.engine = self.engine;
        h
    }
}

/// `n` distinct lengths spaced roughly geometrically over `1..=t_max`.
pub fn log_spaced_lengths(n: usize, t_max: usize) -> Vec<usize> {
    let n = n.min(t_max).max(1);
    let mut out: Vec<usize> = Vec::with_capacity(n);
    for k in 0..n {
        let x = if n == 1 { t_max as f64 } else { (t_max as f64).powf(k as f64 / (n - 1) as f64) };
        let mut t = x.round() as usize;
        if let Some(&prev) = out.last() {
            t = t.max(prev + 1);
        }
        out.push(t);
    }
    // Bumping can overshoot at the top end; pull the tail back under t_max.
    for k in (0..n).rev() {
        let cap = t_max - (n - 1 - k);
        if out[k] > cap {
            out[k] = cap;
        }
    }
    out
}

struct Generator {
    sim: Simulator,
    extractor: Extractor,
    noise: NoiseParams,
    options: RunOptions,
    cfg: GenerateConfig,
}

impl Generator {
    fn new(cfg: &GenerateConfig) -> Result<(Self, CodeLayout)> {
        cfg.validate()?;
        let layout = CodeLayout::new(cfg.distance as i64)?;
        let sim = Simulator::new(&layout, cfg.reset_mode, Basis::Z)?;
        let extractor = Extractor::new(&layout, cfg.reset_mode)?;
        let noise = if cfg.p_error == 0.0 { NoiseParams::noiseless() } else { NoiseParams::uniform(cfg.p_error)? };
        let options = RunOptions { engine: cfg.engine, readout_every_cycle: cfg.kind == DatasetKind::Test, ..Default::default() };
        Ok((Self { sim, extractor, noise, options, cfg: cfg.clone() }, layout))
    }

    fn record(&self, i: u64) -> Result<SyndromeSequence> {
        let t = self.cfg.lengths.length_of(self.cfg.seed, i);
        let raw = self.sim.run_seeded(t, &self.noise, self.cfg.seed, i, self.options);
        self.extractor.extract(&raw)
    }

    fn block(&self, start: u64, end: u64, exec: Execution) -> Result<Vec<SyndromeSequence>> {
        exec.map_range((end - start) as usize, |k| self.record(start + k as u64)).into_iter().collect()
    }
}

/// Generates all records in memory.
pub fn generate(cfg: &GenerateConfig, exec: Execution) -> Result<(DatasetHeader, Vec<SyndromeSequence>)> {
    let (g, layout) = Generator::new(cfg)?;
    Ok((cfg.header(&layout), g.block(0, cfg.count, exec)?))
}

/// Streams records to `path` in blocks; memory stays bounded by the block size.
pub fn generate_to_file(cfg: &GenerateConfig, path: &Path, exec: Execution) -> Result<DatasetHeader> {
    let (g, layout) = Generator::new(cfg)?;
    let header = cfg.header(&layout);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = DatasetWriter::new(BufWriter::new(file), header.clone())?;
    let mut start = 0;
    while start < cfg.count {
        let end = (start + BLOCK as u64).min(cfg.count);
        for r in g.block(start, end, exec)? {
            w.write_record(&r)?;
        }
        start = end;
    }
    w.finish()?.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    Ok(header)
}
