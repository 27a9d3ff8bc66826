//! The four training stages: plain training, regularized training, pruning
//! plus quantization, and straight-through fine-tuning.
//!
//! Every random stream is derived from the run seed and a stage tag, so a
//! stage gives the same result whether it runs in one process with the others
//! or alone from a checkpoint.

use crate::crossbar::{evaluate_on_crossbar, map_model};
use crate::data::Splits;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::pruning::{adaptive_prune, global_prune, measure_sparsity, prune_to_sparsity, AdaptiveOutcome, SparsityReport};
use crate::quantizer::{quantization_error_l1, quantize_model, QuantScheme};
use crate::regularizers::{mean_sawtooth, relax_lambda, LevelGrid, Regularizer, RegularizerKind};
use crate::seed::derive_seed;

use super::config::{Architecture, PipelineConfig};
use super::metrics::{level_mass, Histogram, MetricsRecord};
use super::train::{train_epoch, EpochOptions};

/// Tolerance, in level periods, of the near-level mass statistic.
pub const LEVEL_MASS_TOL: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PruneMode {
    /// The adaptive per-layer loop with the configured parameters.
    Adaptive,
    /// One pass at the given rate with the configured `μ`.
    Global(f64),
    /// Every layer pruned to the given element sparsity with the configured `μ`.
    Matched(f64),
}

#[derive(Debug, Clone)]
pub struct PruneResult {
    pub model: Model,
    pub report: SparsityReport,
    pub adaptive: Option<AdaptiveOutcome>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub initial: Model,
    pub regularized: Model,
    pub pruned: PruneResult,
    pub quantized: Model,
    pub finetuned: Model,
    pub scheme: QuantScheme,
}

/// Configuration, data splits and everything a run has emitted so far.
#[derive(Debug, Clone)]
pub struct Session {
    pub config: PipelineConfig,
    pub splits: Splits,
    pub records: Vec<MetricsRecord>,
    pub histograms: Vec<(String, Histogram)>,
}

impl Session {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let splits = config.load_splits()?;
        if splits.train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self {
            config,
            splits,
            records: Vec::new(),
            histograms: Vec::new(),
        })
    }

    pub fn with_splits(config: PipelineConfig, splits: Splits) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            splits,
            records: Vec::new(),
            histograms: Vec::new(),
        })
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    /// Freshly initialized model of the configured architecture.
    pub fn initial_model(&self) -> Result<Model> {
        match self.config.model.arch {
            Architecture::Desk => {
                Model::desk_scale(self.config.data.shape, self.config.data.num_classes, self.config.seed)
            }
        }
    }

    /// Records produced since `start`, for writing one command's output.
    pub fn records_since(&self, start: usize) -> &[MetricsRecord] {
        &self.records[start..]
    }

    fn accuracy(&self, model: &Model, which: Split) -> Result<Option<f64>> {
        let data = match which {
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        };
        if data.is_empty() {
            return Ok(None);
        }
        model.evaluate_accuracy(data).map(Some)
    }

    fn epoch_record(&self, stage: &str, epoch: u32, model: &Model, loss: f64) -> Result<MetricsRecord> {
        let mut r = MetricsRecord::new(stage, epoch, &measure_sparsity(model));
        r.train_loss = Some(loss);
        r.val_accuracy = self.accuracy(model, Split::Val)?;
        r.test_accuracy = self.accuracy(model, Split::Test)?;
        Ok(r)
    }

    fn opts(&self, stage: &str, epoch: u32) -> EpochOptions {
        EpochOptions {
            lr: self.config.train.lr as f32,
            batch_size: self.config.train.batch_size,
            order_seed: derive_seed(self.config.seed, stage, epoch as u64),
        }
    }

    /// Level periods used for statistics: the frozen ranges when present,
    /// otherwise calibrated from the current weights.
    pub fn level_grid(&self, model: &Model) -> LevelGrid {
        let bits = self.config.quant.bits;
        LevelGrid::for_model(model, bits, self.config.regularizer.clamp(bits), true, None)
    }

    fn push_histogram(&mut self, stage: &str, model: &Model) {
        let grid = self.level_grid(model);
        self.histograms
            .push((stage.into(), Histogram::of_model(model, &grid.periods, grid.clamp)));
    }

    /// Fraction of weights within `±0.1·p` of a level.
    pub fn level_mass(&self, model: &Model) -> f64 {
        let grid = self.level_grid(model);
        level_mass(model, &grid.periods, grid.clamp, LEVEL_MASS_TOL)
    }

    /// Training with no penalty.
    pub fn stage_initial_train(&mut self, mut model: Model) -> Result<Model> {
        for epoch in 1..=self.config.train.epochs_initial {
            let loss = train_epoch(&mut model, &self.splits.train, self.opts("initial", epoch), None, None)?;
            let mut r = self.epoch_record("initial", epoch, &model, loss)?;
            r.mean_sawtooth = Some(mean_sawtooth(&model, &self.level_grid(&model)));
            self.records.push(r);
        }
        self.push_histogram("initial", &model);
        Ok(model)
    }

    /// Training with the configured penalty. For the sawtooth kinds the
    /// per-layer level ranges are frozen at stage start so the penalty's
    /// minima stay fixed and coincide with the later quantization levels.
    pub fn stage_regularized_train(&mut self, mut model: Model) -> Result<Model> {
        let cfg = self.config.regularizer.clone();
        let layers = cfg.layers.unwrap_or(model.weight_layer_count()).min(model.weight_layer_count());
        model.set_regularized_layers(layers)?;
        if matches!(cfg.kind, RegularizerKind::GroupSawtooth | RegularizerKind::Sawtooth) && model.level_ranges().is_none() {
            let ranges = model
                .params()
                .map(|p| p.weight.data().iter().fold(0.0f32, |m, v| m.max(v.abs())))
                .collect();
            model.set_level_ranges(Some(ranges));
        }
        let reg = Regularizer::from_config(&cfg, &model, self.config.quant.bits)?;
        for epoch in 1..=self.config.train.epochs_regularized {
            let loss = train_epoch(&mut model, &self.splits.train, self.opts("regularized", epoch), Some(&reg), None)?;
            let mut r = self.epoch_record("regularized", epoch, &model, loss)?;
            r.lambda_s = Some(reg.lambda);
            r.mean_sawtooth = Some(mean_sawtooth(&model, &self.level_grid(&model)));
            self.records.push(r);
        }
        self.push_histogram("regularized", &model);
        Ok(model)
    }

    pub fn stage_prune(&mut self, model: &Model, mode: PruneMode) -> Result<PruneResult> {
        let params = self.config.prune;
        let (pruned, adaptive) = match mode {
            PruneMode::Adaptive => {
                if self.splits.val.is_empty() {
                    return Err(Error::Config("adaptive pruning needs a non-empty validation split".into()));
                }
                let val = &self.splits.val;
                let (m, out) = adaptive_prune(model, &params, |m| m.evaluate_accuracy(val))?;
                (m, Some(out))
            }
            PruneMode::Global(rate) => (global_prune(model, rate, params.mu)?, None),
            PruneMode::Matched(target) => (prune_to_sparsity(model, target, params.mu)?, None),
        };
        let report = measure_sparsity(&pruned);
        let mut r = MetricsRecord::new("prune", 0, &report);
        r.val_accuracy = self.accuracy(&pruned, Split::Val)?;
        r.test_accuracy = self.accuracy(&pruned, Split::Test)?;
        self.records.push(r);
        self.push_histogram("prune", &pruned);
        Ok(PruneResult {
            model: pruned,
            report,
            adaptive,
        })
    }

    /// Quantizes to the configured scheme and checks the crossbar mapping
    /// reproduces the quantized model's accuracy.
    pub fn stage_quantize(&mut self, model: &Model) -> Result<(Model, QuantScheme)> {
        let scheme = QuantScheme::from_config(model, &self.config.quant)?;
        let quantized = quantize_model(model, &scheme)?;
        let mut r = MetricsRecord::new("quantize", 0, &measure_sparsity(&quantized));
        r.val_accuracy = self.accuracy(&quantized, Split::Val)?;
        r.test_accuracy = self.accuracy(&quantized, Split::Test)?;
        r.quant_error = Some(quantization_error_l1(model, &scheme));
        if !self.splits.test.is_empty() {
            let pairs = map_model(&quantized, &scheme)?;
            r.crossbar_accuracy = Some(evaluate_on_crossbar(&pairs, &quantized, &self.splits.test)?);
        }
        self.records.push(r);
        self.push_histogram("quantize", &quantized);
        Ok((quantized, scheme))
    }

    /// Adaptive pruning followed by quantization.
    pub fn stage_prune_quantize(&mut self, model: &Model, mode: PruneMode) -> Result<(PruneResult, Model, QuantScheme)> {
        let pruned = self.stage_prune(model, mode)?;
        let (q, scheme) = self.stage_quantize(&pruned.model)?;
        Ok((pruned, q, scheme))
    }

    /// Straight-through fine-tuning of a quantized model. The penalty
    /// coefficient decays as `λ_s·decay^e` for fine-tuning epoch `e = 1, 2, …`.
    /// Masked weights stay zero; the returned model is on the level grid.
    pub fn stage_fine_tune(&mut self, model: &Model, scheme: &QuantScheme) -> Result<Model> {
        let cfg = self.config.regularizer.clone();
        let mut reg = Regularizer::from_config(&cfg, model, scheme.bits)?;
        reg.grid.periods = scheme.scales.iter().map(|&p| p as f64).collect();
        let mut shadow = model.clone();
        let mut current = quantize_model(&shadow, scheme)?;
        for epoch in 1..=self.config.train.epochs_finetune {
            let lambda = relax_lambda(reg.lambda, cfg.decay, epoch);
            let step = reg.with_lambda(lambda);
            let loss = train_epoch(&mut shadow, &self.splits.train, self.opts("finetune", epoch), Some(&step), Some(scheme))?;
            let drift = quantization_error_l1(&shadow, scheme);
            current = quantize_model(&shadow, scheme)?;
            // epochs end on-level; sub-level shadow drift does not carry over
            shadow = current.clone();
            let mut r = self.epoch_record("finetune", epoch, &current, loss)?;
            r.lambda_s = Some(lambda);
            r.quant_error = Some(drift);
            self.records.push(r);
        }
        self.push_histogram("finetune", &current);
        Ok(current)
    }

    /// All four stages from a fresh model.
    pub fn run_all(&mut self, mode: PruneMode) -> Result<RunOutput> {
        let initial = self.stage_initial_train(self.initial_model()?)?;
        let regularized = self.stage_regularized_train(initial.clone())?;
        let (pruned, quantized, scheme) = self.stage_prune_quantize(&regularized, mode)?;
        let finetuned = self.stage_fine_tune(&quantized, &scheme)?;
        Ok(RunOutput {
            initial,
            regularized,
            pruned,
            quantized,
            finetuned,
            scheme,
        })
    }
}

#[derive(Debug, Clone, Copy)]
enum Split {
    Val,
    Test,
}
