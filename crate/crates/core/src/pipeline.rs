//! Glue from a [`ProjectConfig`] to the pre-selection, initialization and
//! training procedures.

use crate::backends::Backends;
use crate::config::{PreselectConfig, ProjectConfig};
use crate::error::{Error, Result};
use crate::preselect::{accumulate_attribution, init_mask_matrix, preselect_channels, Preselection};
use crate::qmm::AttributeSpec;
use crate::trainer::{train, BackendRef, Checkpoint, TrainConfig, TrainObserver};

pub fn run_preselection(backends: &Backends, specs: &[AttributeSpec], cfg: &PreselectConfig) -> Result<Preselection> {
    let generator = backends.generator.as_differentiable().ok_or_else(|| {
        Error::NotDifferentiable(format!("generator `{}`", backends.generator.manifest().model_id))
    })?;
    let table = accumulate_attribution(generator, backends.segmenter.as_ref(), cfg.iterations, cfg.seed)?;
    let channels = preselect_channels(&table, specs)?;
    tracing::info!(?channels, "pre-selected channels");
    Ok(Preselection { table, channels })
}

/// Step-0 checkpoint: the initialized matrix for the configured attributes.
/// Without a pre-selection every channel starts in the "others" row.
pub fn initial_checkpoint(
    project: &ProjectConfig,
    backends: &Backends,
    preselection: Option<&Preselection>,
) -> Result<Checkpoint> {
    let specs = project.specs()?;
    let generator = &backends.generator;
    let empty = Default::default();
    let chosen = preselection.map_or(&empty, |p| &p.channels);
    let matrix = init_mask_matrix(generator.n_channels(), &specs, chosen, generator.editable())?;
    let manifest = generator.manifest();
    Ok(Checkpoint::new(
        matrix,
        BackendRef {
            model_id: manifest.model_id.clone(),
            n_channels: manifest.n_channels,
        },
        &project.train,
    ))
}

/// Pre-selection (if enabled), initialization and a full training run.
pub fn train_project(
    project: &ProjectConfig,
    backends: &Backends,
    train_cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Checkpoint> {
    let specs = project.specs()?;
    let preselection = if project.preselect.enabled {
        Some(run_preselection(backends, &specs, &project.preselect)?)
    } else {
        None
    };
    let mut start = initial_checkpoint(project, backends, preselection.as_ref())?;
    start.seed = train_cfg.seed;
    start.weights = train_cfg.weights;
    train(start, train_cfg, backends, &specs, observer)
}
