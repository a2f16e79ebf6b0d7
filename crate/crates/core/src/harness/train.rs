//! Training loop with validation-based model selection.

use super::evaluate::correctness;
use super::fit::{fit_fidelity, FidelityPoint, FidelitySeries};
use super::generate::{log_spaced_lengths, GenerateConfig, Lengths};
use crate::circuit::ResetMode;
use crate::code::CodeLayout;
use crate::data::{DatasetKind, PackedSequence, SyndromeSequence};
use crate::error::{Error, Result};
use crate::net::{batch_gradient, AdamState, Checkpoint, CheckpointMeta, DecoderParams, DecoderShape, LossConfig};
use crate::par::Execution;
use crate::sim::{sample_rng, Engine};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub distance: usize,
    /// LSTM and head width `N`.
    pub n_hidden: usize,
    pub reset_mode: ResetMode,
    pub p_train: f64,
    pub n_train_sequences: u64,
    pub t_min: usize,
    pub t_max: usize,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub c_reg: f64,
    pub keep_prob: f64,
    pub p_validation: f64,
    pub n_validation: u64,
    pub validation_lengths: usize,
    pub validation_t_max: usize,
    pub seed: u64,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            distance: 3,
            n_hidden: 32,
            reset_mode: ResetMode::Reset,
            p_train: 1e-3,
            n_train_sequences: 200_000,
            t_min: 1,
            t_max: 40,
            batch_size: 64,
            batches_per_epoch: 3000,
            max_epochs: 1000,
            learning_rate: 1e-3,
            c_reg: 1e-5,
            keep_prob: 0.8,
            p_validation: 1e-4,
            n_validation: 1000,
            validation_lengths: 30,
            validation_t_max: 1000,
            seed: 1,
            deterministic: false,
        }
    }
}

/// Names accepted by [`TrainConfig::preset`].
pub const PRESETS: [&str; 4] = ["d3", "d3-full", "d5", "d7"];

impl TrainConfig {
    /// `d3` is the desk-scale default. `d3-full`, `d5` and `d7` use the full
    /// training sets and validation lengths up to 10⁴ cycles; they run for
    /// many hours to days.
    pub fn preset(name: &str) -> Result<Self> {
        let full = |distance, n_hidden, n_train, p_val| TrainConfig {
            distance,
            n_hidden,
            n_train_sequences: n_train,
            p_validation: p_val,
            validation_t_max: 10_000,
            ..TrainConfig::default()
        };
        match name {
            "d3" => Ok(TrainConfig::default()),
            "d3-full" => Ok(full(3, 32, 2_000_000, 1e-4)),
            "d5" => Ok(full(5, 64, 2_000_000, 2.5e-4)),
            "d7" => Ok(full(7, 128, 5_000_000, 4e-4)),
            _ => Err(Error::Config(format!("unknown preset {name:?}; expected one of {PRESETS:?}"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.distance < 3 || self.distance % 2 == 0 {
            return bad(format!("distance must be odd and >= 3, got {}", self.distance));
        }
        if self.n_hidden == 0 || self.batch_size == 0 || self.batches_per_epoch == 0 || self.n_train_sequences == 0 {
            return bad("counts must be positive".into());
        }
        if self.n_validation == 0 || self.validation_lengths < 3 {
            return bad("validation needs at least 3 lengths and one sequence".into());
        }
        for (name, p) in [("p_train", self.p_train), ("p_validation", self.p_validation)] {
            if !(p > 0.0 && p < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {p}"));
            }
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return bad(format!("keep_prob must lie in (0, 1], got {}", self.keep_prob));
        }
        if self.t_min == 0 || self.t_min > self.t_max {
            return bad(format!("bad training length range {}..={}", self.t_min, self.t_max));
        }
        if !(self.learning_rate >= 0.0 && self.c_reg >= 0.0) {
            return bad("learning_rate and c_reg must be non-negative".into());
        }
        Ok(())
    }

    pub fn shape(&self) -> Result<DecoderShape> {
        let layout = CodeLayout::new(self.distance as i64)?;
        Ok(DecoderShape::for_tiles(layout.n_tiles(), self.n_hidden))
    }

    pub fn execution(&self) -> Execution {
        Execution::from_flag(self.deterministic)
    }

    fn sub_seed(&self, tag: u64) -> u64 {
        self.seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15)
    }

    pub fn training_data(&self) -> GenerateConfig {
        GenerateConfig {
            distance: self.distance,
            p_error: self.p_train,
            count: self.n_train_sequences,
            lengths: Lengths::Uniform { min: self.t_min, max: self.t_max },
            kind: DatasetKind::Train,
            reset_mode: self.reset_mode,
            seed: self.sub_seed(1),
            engine: Engine::Frame,
        }
    }

    pub fn validation_data(&self) -> GenerateConfig {
        GenerateConfig {
            distance: self.distance,
            p_error: self.p_validation,
            count: self.n_validation,
            lengths: Lengths::Grid(log_spaced_lengths(self.validation_lengths, self.validation_t_max)),
            kind: DatasetKind::Train,
            reset_mode: self.reset_mode,
            seed: self.sub_seed(2),
            engine: Engine::Frame,
        }
    }

    fn loss_config(&self) -> LossConfig {
        LossConfig { c_reg: self.c_reg, keep_prob: self.keep_prob }
    }
}

/// Per-step error rate of the lower head on a validation set, from a fit
/// with `t0 = 0`. `None` when the fit fails (fidelity indistinguishable
/// from ½).
pub fn validation_epsilon(params: &DecoderParams, validation: &[SyndromeSequence], exec: Execution) -> Result<Option<f64>> {
    let lengths: Vec<usize> = validation.iter().map(SyndromeSequence::n_cycles).collect();
    let hits = correctness(params, validation, &lengths, exec)?;
    let points = hits
        .into_iter()
        .map(|(t, ok)| FidelityPoint {
            t: t as f64,
            fidelity: ok.iter().filter(|&&b| b).count() as f64 / ok.len() as f64,
            n_samples: ok.len(),
            err: 0.0,
        })
        .collect();
    match fit_fidelity(&FidelitySeries { points }, true) {
        Ok(f) => Ok(Some(f.epsilon_l)),
        Err(Error::FitFailed(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u64,
    pub mean_loss: f64,
    pub validation_eps: Option<f64>,
    pub improved: bool,
    pub seconds: f64,
}

/// Where checkpoints go: the best model at `best`, the latest state at `last`.
#[derive(Clone, Debug)]
pub struct CheckpointPaths {
    pub best: PathBuf,
    pub last: PathBuf,
}

impl CheckpointPaths {
    pub fn beside(best: &Path) -> Self {
        let mut last = best.as_os_str().to_owned();
        last.push(".last");
        Self { best: best.to_path_buf(), last: PathBuf::from(last) }
    }
}

pub struct Trainer<'a> {
    pub config: TrainConfig,
    train: &'a [PackedSequence],
    validation: &'a [SyndromeSequence],
    buckets: Vec<Vec<u32>>,
    pub state: Checkpoint,
    pub best: Option<Checkpoint>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, train: &'a [PackedSequence], validation: &'a [SyndromeSequence]) -> Result<Self> {
        config.validate()?;
        let shape = config.shape()?;
        let params = DecoderParams::init(shape, &mut sample_rng(config.sub_seed(3), 0));
        let adam = AdamState::new(params.n_params(), config.learning_rate);
        let meta = CheckpointMeta {
            distance: config.distance,
            seed: config.seed,
            config: serde_json::to_value(&config)?,
            ..Default::default()
        };
        Self::resume(config, train, validation, Checkpoint { meta, params, adam }, None)
    }

    /// Continues from a saved training state.
    pub fn resume(
        config: TrainConfig,
        train: &'a [PackedSequence],
        validation: &'a [SyndromeSequence],
        state: Checkpoint,
        best: Option<Checkpoint>,
    ) -> Result<Self> {
        let shape = config.shape()?;
        if state.params.shape() != shape {
            return Err(Error::Dimension(format!("checkpoint shape {:?} vs config {:?}", state.params.shape(), shape)));
        }
        if train.is_empty() || validation.is_empty() {
            return Err(Error::InvalidArgument("training and validation sets must be non-empty".into()));
        }
        if let Some(bad) = train.iter().find(|s| s.width() != shape.n_in || s.delta_f.len() != shape.n_final) {
            return Err(Error::Dimension(format!("training record of width {} does not fit {shape:?}", bad.width())));
        }
        let mut by_len: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
        for (i, s) in train.iter().enumerate() {
            by_len.entry(s.n_cycles()).or_default().push(i as u32);
        }
        Ok(Self { config, train, validation, buckets: by_len.into_values().collect(), state, best })
    }

    /// Mini-batches of one epoch: every length bucket shuffled and cut into
    /// batches, batch order shuffled, repeated until the epoch is full.
    fn epoch_batches(&self, epoch: u64) -> Vec<Vec<u32>> {
        let mut rng = sample_rng(self.config.sub_seed(4), epoch);
        let mut out = Vec::with_capacity(self.config.batches_per_epoch);
        while out.len() < self.config.batches_per_epoch {
            let mut round: Vec<Vec<u32>> = Vec::new();
            for bucket in &self.buckets {
                let mut idx = bucket.clone();
                idx.shuffle(&mut rng);
                round.extend(idx.chunks(self.config.batch_size).map(<[u32]>::to_vec));
            }
            round.shuffle(&mut rng);
            let need = self.config.batches_per_epoch - out.len();
            out.extend(round.into_iter().take(need));
        }
        out
    }

    /// Runs one epoch and validates. Returns the log line.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let started = Instant::now();
        let exec = self.config.execution();
        let cfg = self.config.loss_config();
        let epoch = self.state.meta.epoch;
        let dropout_seed = self.config.sub_seed(5);
        let mut total = 0.0;
        let batches = self.epoch_batches(epoch);
        for (bi, batch) in batches.iter().enumerate() {
            let seqs: Vec<&PackedSequence> = batch.iter().map(|&i| &self.train[i as usize]).collect();
            // 1024 dropout streams per step is far more than the chunks of any batch.
            let stream = self.state.meta.step * 1024;
            let (loss, grad) = batch_gradient(&self.state.params, &seqs, &cfg, dropout_seed, stream, exec).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged { epoch: epoch as usize, batch: bi, loss: f64::NAN },
                e => e,
            })?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch: epoch as usize, batch: bi, loss });
            }
            self.state.adam.step_params(&mut self.state.params, &grad)?;
            if !self.state.params.is_finite() {
                return Err(Error::Diverged { epoch: epoch as usize, batch: bi, loss });
            }
            self.state.meta.step += 1;
            total += loss;
        }
        let eps = validation_epsilon(&self.state.params, self.validation, exec)?;
        self.state.meta.epoch += 1;
        let best_eps = self.best.as_ref().and_then(|b| b.meta.validation_eps);
        let improved = match (eps, best_eps) {
            (Some(e), Some(b)) => e < b,
            (Some(_), None) => true,
            (None, _) => self.best.is_none(),
        };
        if improved {
            let mut best = self.state.clone();
            best.meta.validation_eps = eps;
            self.best = Some(best);
        }
        self.state.meta.validation_eps = best_eps.into_iter().chain(eps).reduce(f64::min);
        Ok(EpochLog {
            epoch: self.state.meta.epoch,
            mean_loss: total / batches.len() as f64,
            validation_eps: eps,
            improved,
            seconds: started.elapsed().as_secs_f64(),
        })
    }

    /// Trains until `max_epochs`, saving checkpoints after every epoch when
    /// `paths` is given. `on_epoch` sees each log line.
    pub fn run(&mut self, paths: Option<&CheckpointPaths>, mut on_epoch: impl FnMut(&EpochLog)) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        while (self.state.meta.epoch as usize) < self.config.max_epochs {
            let log = self.run_epoch()?;
            if let Some(p) = paths {
                if log.improved {
                    self.best.as_ref().expect("improved implies best").save(&p.best)?;
                }
                self.state.save(&p.last)?;
            }
            on_epoch(&log);
            logs.push(log);
        }
        Ok(logs)
    }
}
