//! Mask-matrix optimization with a frozen generator and scorer.
//!
//! Each step draws a source code, a reference code and a target attribute set
//! from a step-indexed random stream, so a run resumed from a checkpoint at
//! step `k` replays exactly the samples an uninterrupted run would have seen.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{alterable_region, Backends, DifferentiableGenerator, RegionSegmenter};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{
    background_loss_grad, background_mask, check_targets, probability_loss_grad, sign, total_loss,
    LossParts, LossReport, LossWeights,
};
use crate::qmm::{l1_distance, AttributeSpec, DifferentiableScorer};
use crate::stylespace::{
    attribute_mask, control_probabilities, edit_style_code, softmax, softmax_vjp, validate_targets,
    MaskMatrix, StyleCode,
};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetPolicy {
    /// One attribute drawn uniformly per step.
    #[default]
    Singleton,
    /// Two distinct attributes drawn uniformly per step.
    Pair,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd,
    Momentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub learning_rate: f64,
    pub target_policy: TargetPolicy,
    /// Edit intensity used inside the objective.
    pub delta: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 0.1,
            target_policy: TargetPolicy::Singleton,
            delta: 1.0,
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 100,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("steps must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::invalid("learning rate must be finite and non-negative"));
        }
        if !self.delta.is_finite() {
            return Err(Error::invalid("training delta must be finite"));
        }
        self.weights.validate()
    }
}

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub source: StyleCode,
    pub reference: StyleCode,
    pub targets: Vec<usize>,
}

/// Step-indexed random stream: independent of every other step.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

pub fn draw_sample(
    generator: &dyn DifferentiableGenerator,
    n_attributes: usize,
    policy: TargetPolicy,
    rng: &mut impl RngCore,
) -> Result<TrainSample> {
    let source = generator.style_from_seed(rng.next_u64())?;
    let reference = generator.style_from_seed(rng.next_u64())?;
    let first = rng.random_range(0..n_attributes);
    let targets = match policy {
        TargetPolicy::Pair if n_attributes >= 2 => {
            let mut second = rng.random_range(0..n_attributes - 1);
            if second >= first {
                second += 1;
            }
            vec![first, second]
        }
        _ => vec![first],
    };
    Ok(TrainSample {
        source,
        reference,
        targets,
    })
}

/// The training objective on a fixed sample, differentiable in the matrix.
pub struct Objective<'a> {
    generator: &'a dyn DifferentiableGenerator,
    segmenter: &'a dyn RegionSegmenter,
    scorer: &'a dyn DifferentiableScorer,
    specs: &'a [AttributeSpec],
    weights: LossWeights,
    delta: f64,
}

impl<'a> Objective<'a> {
    /// Fails with [`Error::NotDifferentiable`] when the generator or scorer
    /// cannot propagate gradients.
    pub fn new(
        backends: &'a Backends,
        specs: &'a [AttributeSpec],
        weights: LossWeights,
        delta: f64,
    ) -> Result<Self> {
        weights.validate()?;
        let generator = backends.generator.as_differentiable().ok_or_else(|| {
            Error::NotDifferentiable(format!("generator `{}`", backends.generator.manifest().model_id))
        })?;
        let scorer = backends
            .scorer
            .as_differentiable()
            .ok_or_else(|| Error::NotDifferentiable(format!("scorer `{}`", backends.scorer.name())))?;
        Ok(Self {
            generator,
            segmenter: backends.segmenter.as_ref(),
            scorer,
            specs,
            weights,
            delta,
        })
    }

    pub fn evaluate(&self, m: &MaskMatrix, sample: &TrainSample) -> Result<LossReport> {
        Ok(self.run(m, sample, false)?.0)
    }

    /// Loss report and `d total / d M` (row-major, zero on frozen columns).
    pub fn evaluate_with_grad(&self, m: &MaskMatrix, sample: &TrainSample) -> Result<(LossReport, Vec<f64>)> {
        self.run(m, sample, true)
    }

    /// Adds the attribute-distance term for `t` against `other` and, when
    /// `grad` is given, its image gradient scaled by `scale`.
    fn distance_term(
        &self,
        edited: &Image,
        other: &Image,
        t: usize,
        scale: f64,
        grad: Option<&mut Image>,
    ) -> Result<f64> {
        let mut total = 0.0;
        let mut grad = grad;
        for group in &self.specs[t].groups {
            let prompts = group.prompts();
            let rows = self.scorer.score_batch(&[edited, other], &prompts)?;
            let (pe, po) = (softmax(&rows[0]), softmax(&rows[1]));
            total += l1_distance(&pe, &po);
            if let Some(g) = grad.as_deref_mut() {
                let d_probs: Vec<f64> = pe.iter().zip(&po).map(|(a, b)| sign(a - b)).collect();
                let d_scores = softmax_vjp(&pe, &d_probs);
                let d_img = self.scorer.score_vjp(edited, &prompts, &d_scores)?;
                g.add_scaled(&d_img, scale)?;
            }
        }
        Ok(total)
    }

    fn run(&self, m: &MaskMatrix, sample: &TrainSample, want_grad: bool) -> Result<(LossReport, Vec<f64>)> {
        let editable = self.generator.editable();
        if m.n_channels() != editable.len() || m.n_attributes() != self.specs.len() {
            return Err(Error::invalid(format!(
                "matrix is {}x{}, objective expects {}x{}",
                m.n_rows(),
                m.n_channels(),
                self.specs.len() + 1,
                editable.len()
            )));
        }
        if sample.targets.is_empty() {
            return Err(Error::invalid("target attribute set must be non-empty"));
        }
        validate_targets(&sample.targets, self.specs.len())?;
        check_targets(&sample.targets, self.specs)?;

        let probs = control_probabilities(m)?;
        let mask = attribute_mask(&probs, &sample.targets, editable)?;
        let edited_code = edit_style_code(&sample.source, &sample.reference, &mask, self.delta)?;
        let source = self.generator.synthesize(&sample.source)?;
        let reference = self.generator.synthesize(&sample.reference)?;
        let edited = self.generator.synthesize(&edited_code)?;

        let (c, h, w) = edited.shape();
        let mut grad_img = want_grad.then(|| Image::zeros(c, h, w));
        let wa = self.weights.attr;

        let mut parts = LossParts::default();
        for t in 0..self.specs.len() {
            if sample.targets.contains(&t) {
                parts.l_ref += self.distance_term(&edited, &reference, t, wa, grad_img.as_mut())?;
            } else {
                parts.l_src += self.distance_term(&edited, &source, t, wa, grad_img.as_mut())?;
            }
        }

        let regions = || sample.targets.iter().map(|&t| self.specs[t].region.as_str());
        let background = background_mask(
            &alterable_region(self.segmenter, &source, regions())?,
            &alterable_region(self.segmenter, &edited, regions())?,
        )?;
        let (l_bg, g_bg) = background_loss_grad(&edited, &source, &background)?;
        parts.l_bg = l_bg;
        let (l_prob, g_prob) = probability_loss_grad(m, editable)?;
        parts.l_prob = l_prob;

        let report = match total_loss(parts, &self.weights) {
            Ok(r) => r,
            Err(_) => {
                return Err(Error::NonFiniteLoss {
                    step: 0,
                    report: Box::new(LossReport {
                        l_ref: parts.l_ref,
                        l_src: parts.l_src,
                        l_attr: parts.l_ref + parts.l_src,
                        l_bg: parts.l_bg,
                        l_prob: parts.l_prob,
                        total: f64::NAN,
                    }),
                })
            }
        };

        let Some(mut grad_img) = grad_img else {
            return Ok((report, Vec::new()));
        };
        grad_img.add_scaled(&g_bg, self.weights.bg)?;

        let d_style = self.generator.synthesize_vjp(&edited_code, &grad_img)?;
        let n = m.n_channels();
        let rows = m.n_rows();
        let mut grad = vec![0.0; rows * n];
        for i in (0..n).filter(|&i| editable[i]) {
            // d s_edit_i / d mask_i = (s_ref_i - s_src_i) * delta
            let d_mask = d_style[i]
                * (sample.reference.values()[i] - sample.source.values()[i])
                * self.delta;
            let mut d_col = vec![0.0; rows];
            for &t in &sample.targets {
                d_col[t] = d_mask;
            }
            let d_logits = softmax_vjp(&probs.column(i), &d_col);
            for r in 0..rows {
                grad[r * n + i] = d_logits[r] + self.weights.prob * g_prob[r * n + i];
            }
        }
        Ok((report, grad))
    }
}

/// First/second moment buffers for momentum and Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct OptimizerState {
    pub t: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub first: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub second: Vec<f64>,
}

fn apply_update(
    m: &mut MaskMatrix,
    grad: &[f64],
    editable: &[bool],
    lr: f64,
    opt: &OptimizerConfig,
    state: &mut OptimizerState,
) {
    let n = m.n_channels();
    let len = grad.len();
    state.t += 1;
    match *opt {
        OptimizerConfig::Sgd => {}
        OptimizerConfig::Momentum { .. } => state.first.resize(len, 0.0),
        OptimizerConfig::Adam { .. } => {
            state.first.resize(len, 0.0);
            state.second.resize(len, 0.0);
        }
    }
    let entries = m.entries_mut();
    for k in 0..len {
        if !editable[k % n] {
            continue;
        }
        let g = grad[k];
        let step = match *opt {
            OptimizerConfig::Sgd => g,
            OptimizerConfig::Momentum { beta } => {
                state.first[k] = beta * state.first[k] + g;
                state.first[k]
            }
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                state.first[k] = beta1 * state.first[k] + (1.0 - beta1) * g;
                state.second[k] = beta2 * state.second[k] + (1.0 - beta2) * g * g;
                let m_hat = state.first[k] / (1.0 - beta1.powi(state.t as i32));
                let v_hat = state.second[k] / (1.0 - beta2.powi(state.t as i32));
                m_hat / (v_hat.sqrt() + eps)
            }
        };
        entries[k] -= lr * step;
    }
}

/// Reference to the backend a checkpoint was trained against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendRef {
    pub model_id: String,
    pub n_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub step: u64,
    pub seed: u64,
    pub backend: BackendRef,
    pub weights: LossWeights,
    pub matrix: MaskMatrix,
    #[serde(default)]
    pub optimizer: OptimizerState,
}

impl Checkpoint {
    pub fn new(matrix: MaskMatrix, backend: BackendRef, cfg: &TrainConfig) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            step: 0,
            seed: cfg.seed,
            backend,
            weights: cfg.weights,
            matrix,
            optimizer: OptimizerState::default(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::format("checkpoint", e))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text).map_err(|e| Error::format("checkpoint", e))?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::format(
                "checkpoint",
                format!(
                    "unsupported format version {} (expected {CHECKPOINT_FORMAT_VERSION})",
                    ckpt.format_version
                ),
            ));
        }
        // re-run matrix invariants
        let m = &ckpt.matrix;
        MaskMatrix::from_entries(m.attribute_names().to_vec(), m.n_channels(), m.entries().to_vec())?;
        Ok(ckpt)
    }

    /// Writes through a temporary file and renames, so an interrupted save
    /// never clobbers the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_json()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Hooks called by [`train`].
pub trait TrainObserver {
    fn on_step(&mut self, _step: u64, _targets: &[usize], _report: &LossReport) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _ckpt: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// One line of the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub targets: Vec<usize>,
    #[serde(flatten)]
    pub report: LossReport,
}

/// Line-delimited JSON loss log plus a checkpoint file.
pub struct FileObserver {
    log: Option<BufWriter<File>>,
    checkpoint: Option<PathBuf>,
}

impl FileObserver {
    pub fn new(log: Option<&Path>, checkpoint: Option<&Path>, append: bool) -> Result<Self> {
        let log = match log {
            Some(p) => {
                let file = fs::OpenOptions::new()
                    .create(true)
                    .write(true)
                    .append(append)
                    .truncate(!append)
                    .open(p)
                    .map_err(|e| Error::io(p, e))?;
                Some(BufWriter::new(file))
            }
            None => None,
        };
        Ok(Self {
            log,
            checkpoint: checkpoint.map(Path::to_path_buf),
        })
    }
}

impl TrainObserver for FileObserver {
    fn on_step(&mut self, step: u64, targets: &[usize], report: &LossReport) -> Result<()> {
        if let Some(log) = &mut self.log {
            let rec = LossRecord {
                step,
                targets: targets.to_vec(),
                report: *report,
            };
            let line = serde_json::to_string(&rec).map_err(|e| Error::format("loss record", e))?;
            writeln!(log, "{line}").map_err(|e| Error::io("loss log", e))?;
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if let Some(log) = &mut self.log {
            log.flush().map_err(|e| Error::io("loss log", e))?;
        }
        match &self.checkpoint {
            Some(p) => ckpt.save(p),
            None => Ok(()),
        }
    }
}

/// One optimization step at index `step` (0-based). Returns the updated
/// matrix, the sample's targets, and the loss report before the update.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    m: &MaskMatrix,
    state: &mut OptimizerState,
    objective: &Objective<'_>,
    cfg: &TrainConfig,
    step: u64,
) -> Result<(MaskMatrix, Vec<usize>, LossReport)> {
    let mut rng = step_rng(cfg.seed, step);
    let sample = draw_sample(objective.generator, objective.specs.len(), cfg.target_policy, &mut rng)?;
    let (report, grad) = objective.evaluate_with_grad(m, &sample).map_err(|e| match e {
        Error::NonFiniteLoss { report, .. } => Error::NonFiniteLoss { step, report },
        other => other,
    })?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step,
            report: Box::new(report),
        });
    }
    let mut next = m.clone();
    apply_update(
        &mut next,
        &grad,
        objective.generator.editable(),
        cfg.learning_rate,
        &cfg.optimizer,
        state,
    );
    Ok((next, sample.targets, report))
}

/// Runs from `start.step` up to `cfg.steps`, emitting a loss record per step
/// and checkpoints at the configured cadence plus at the end.
pub fn train(
    start: Checkpoint,
    cfg: &TrainConfig,
    backends: &Backends,
    specs: &[AttributeSpec],
    observer: &mut dyn TrainObserver,
) -> Result<Checkpoint> {
    cfg.validate()?;
    let manifest = backends.generator.manifest();
    if start.backend.model_id != manifest.model_id || start.backend.n_channels != manifest.n_channels {
        return Err(Error::invalid(format!(
            "checkpoint was made for `{}` ({} channels), backend is `{}` ({} channels)",
            start.backend.model_id, start.backend.n_channels, manifest.model_id, manifest.n_channels
        )));
    }
    let names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
    if start.matrix.attribute_names() != names.as_slice() {
        return Err(Error::invalid(format!(
            "checkpoint attributes {:?} do not match configured {:?}",
            start.matrix.attribute_names(),
            names
        )));
    }
    if start.seed != cfg.seed {
        return Err(Error::invalid(format!(
            "checkpoint seed {} differs from configured seed {}",
            start.seed, cfg.seed
        )));
    }
    let objective = Objective::new(backends, specs, cfg.weights, cfg.delta)?;
    tracing::info!(from = start.step, to = cfg.steps, "training mask matrix");
    let mut ckpt = start;
    ckpt.weights = cfg.weights;
    while ckpt.step < cfg.steps {
        let (next, targets, report) =
            train_step(&ckpt.matrix, &mut ckpt.optimizer, &objective, cfg, ckpt.step)?;
        ckpt.matrix = next;
        ckpt.step += 1;
        observer.on_step(ckpt.step, &targets, &report)?;
        if cfg.checkpoint_every > 0 && ckpt.step.is_multiple_of(cfg.checkpoint_every) && ckpt.step < cfg.steps {
            tracing::debug!(step = ckpt.step, total = report.total, "checkpoint");
            observer.on_checkpoint(&ckpt)?;
        }
    }
    observer.on_checkpoint(&ckpt)?;
    Ok(ckpt)
}
