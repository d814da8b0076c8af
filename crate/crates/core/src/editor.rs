//! Inference-time editing with a trained mask matrix.

use serde::{Deserialize, Serialize};

use crate::backends::{alterable_region, Backends};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{background_loss, background_mask};
use crate::qmm::{attribute_distance, AttributeSpec};
use crate::stylespace::{
    attribute_mask, control_probabilities, edit_style_code, AttributeMask, ControlProbabilities,
    MaskMatrix, StyleCode,
};
use crate::trainer::Checkpoint;

/// Default intensity grid for sweeps: 1.0 to 2.25 in steps of 0.25.
pub fn default_sweep_grid() -> Vec<f64> {
    (0..6).map(|k| 1.0 + 0.25 * k as f64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditRequest {
    pub source: StyleCode,
    pub reference: StyleCode,
    pub targets: Vec<String>,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeRole {
    /// In the target set; distance is measured to the reference.
    Target,
    /// Outside the target set; distance is measured to the source.
    Preserved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeReport {
    pub attribute: String,
    pub role: AttributeRole,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QmmReport {
    pub attributes: Vec<AttributeReport>,
    /// Mean absolute pixel change outside the targets' regions.
    pub background: f64,
}

impl QmmReport {
    pub fn distance(&self, attribute: &str) -> Option<f64> {
        self.attributes
            .iter()
            .find(|a| a.attribute == attribute)
            .map(|a| a.distance)
    }

    pub fn transfer(&self) -> f64 {
        self.role_sum(AttributeRole::Target)
    }

    pub fn preservation(&self) -> f64 {
        self.role_sum(AttributeRole::Preserved)
    }

    fn role_sum(&self, role: AttributeRole) -> f64 {
        self.attributes
            .iter()
            .filter(|a| a.role == role)
            .map(|a| a.distance)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditResult {
    pub targets: Vec<String>,
    pub delta: f64,
    pub mask: AttributeMask,
    pub style: StyleCode,
    pub image: Image,
    pub report: QmmReport,
}

/// Pairs a checkpoint with the backends it edits through. Stateless after
/// construction and safe to share across threads.
pub struct Editor {
    backends: Backends,
    specs: Vec<AttributeSpec>,
    matrix: MaskMatrix,
    probs: ControlProbabilities,
}

impl Editor {
    pub fn new(backends: Backends, specs: Vec<AttributeSpec>, checkpoint: &Checkpoint) -> Result<Self> {
        let matrix = checkpoint.matrix.clone();
        let names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        if matrix.attribute_names() != names.as_slice() {
            return Err(Error::invalid(format!(
                "checkpoint attributes {:?} do not match configured {:?}",
                matrix.attribute_names(),
                names
            )));
        }
        let model_id = &backends.generator.manifest().model_id;
        if &checkpoint.backend.model_id != model_id {
            return Err(Error::invalid(format!(
                "checkpoint was made for `{}`, backend is `{model_id}`",
                checkpoint.backend.model_id
            )));
        }
        let n = backends.generator.n_channels();
        if matrix.n_channels() != n {
            return Err(Error::invalid(format!(
                "checkpoint has {} channels, generator has {n}",
                matrix.n_channels()
            )));
        }
        let probs = control_probabilities(&matrix)?;
        Ok(Self {
            backends,
            specs,
            matrix,
            probs,
        })
    }

    pub fn backends(&self) -> &Backends {
        &self.backends
    }

    pub fn specs(&self) -> &[AttributeSpec] {
        &self.specs
    }

    pub fn matrix(&self) -> &MaskMatrix {
        &self.matrix
    }

    pub fn probabilities(&self) -> &ControlProbabilities {
        &self.probs
    }

    pub fn resolve_targets(&self, names: &[String]) -> Result<Vec<usize>> {
        resolve_targets(&self.specs, names)
    }

    pub fn mask(&self, targets: &[String]) -> Result<AttributeMask> {
        let idx = self.resolve_targets(targets)?;
        attribute_mask(&self.probs, &idx, self.backends.generator.editable())
    }

    pub fn synthesize(&self, style: &StyleCode) -> Result<Image> {
        self.backends.generator.synthesize(style)
    }

    pub fn edit(&self, req: &EditRequest) -> Result<EditResult> {
        let source = self.synthesize(&req.source)?;
        let reference = self.synthesize(&req.reference)?;
        self.edit_with_images(req, &source, &reference)
    }

    /// Like [`Editor::edit`] with the source and reference already rendered.
    pub fn edit_with_images(&self, req: &EditRequest, source: &Image, reference: &Image) -> Result<EditResult> {
        if !req.delta.is_finite() {
            return Err(Error::invalid("edit intensity must be finite"));
        }
        let mask = self.mask(&req.targets)?;
        let style = edit_style_code(&req.source, &req.reference, &mask, req.delta)?;
        let image = self.synthesize(&style)?;
        let report = self.measure(source, reference, &image, &req.targets)?;
        Ok(EditResult {
            targets: req.targets.clone(),
            delta: req.delta,
            mask,
            style,
            image,
            report,
        })
    }

    /// One result per intensity, in order.
    pub fn sweep(&self, req: &EditRequest, deltas: &[f64]) -> Result<Vec<EditResult>> {
        if deltas.is_empty() {
            return Err(Error::invalid("intensity list must be non-empty"));
        }
        let source = self.synthesize(&req.source)?;
        let reference = self.synthesize(&req.reference)?;
        deltas
            .iter()
            .map(|&delta| {
                let req = EditRequest {
                    delta,
                    ..req.clone()
                };
                self.edit_with_images(&req, &source, &reference)
            })
            .collect()
    }

    /// Applies each `(targets, delta)` step in order, each starting from the
    /// previous step's style code; the reference stays fixed. Every report
    /// measures against that step's own input.
    pub fn sequential_edit(
        &self,
        source: &StyleCode,
        reference: &StyleCode,
        steps: &[(Vec<String>, f64)],
    ) -> Result<Vec<EditResult>> {
        if steps.is_empty() {
            return Err(Error::invalid("sequential edit needs at least one step"));
        }
        let reference_img = self.synthesize(reference)?;
        let mut current = source.clone();
        let mut current_img = self.synthesize(source)?;
        let mut out = Vec::with_capacity(steps.len());
        for (targets, delta) in steps {
            let req = EditRequest {
                source: current,
                reference: reference.clone(),
                targets: targets.clone(),
                delta: *delta,
            };
            let result = self.edit_with_images(&req, &current_img, &reference_img)?;
            current = result.style.clone();
            current_img = result.image.clone();
            out.push(result);
        }
        Ok(out)
    }

    /// The union of all step targets applied in a single edit.
    pub fn parallel_edit(
        &self,
        source: &StyleCode,
        reference: &StyleCode,
        targets: &[String],
        delta: f64,
    ) -> Result<EditResult> {
        self.edit(&EditRequest {
            source: source.clone(),
            reference: reference.clone(),
            targets: targets.to_vec(),
            delta,
        })
    }

    /// QMM report of an edited image against its source and reference.
    pub fn measure(&self, source: &Image, reference: &Image, edited: &Image, targets: &[String]) -> Result<QmmReport> {
        measure(&self.backends, &self.specs, source, reference, edited, targets)
    }
}

/// Attribute indices of `names` in `specs` order; rejects empty, unknown
/// and repeated names.
pub fn resolve_targets(specs: &[AttributeSpec], names: &[String]) -> Result<Vec<usize>> {
    if names.is_empty() {
        return Err(Error::invalid("target attribute set must be non-empty"));
    }
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let t = specs
            .iter()
            .position(|s| &s.name == name)
            .ok_or_else(|| Error::UnknownAttribute(name.clone()))?;
        if out.contains(&t) {
            return Err(Error::invalid(format!("attribute `{name}` listed twice")));
        }
        out.push(t);
    }
    Ok(out)
}

/// Targets are measured against the reference, every other attribute
/// against the source; the background term covers pixels outside the
/// target regions of both source and edit.
pub fn measure(
    backends: &Backends,
    specs: &[AttributeSpec],
    source: &Image,
    reference: &Image,
    edited: &Image,
    targets: &[String],
) -> Result<QmmReport> {
    let idx = resolve_targets(specs, targets)?;
    let scorer = backends.scorer.as_ref();
    let mut attributes = Vec::with_capacity(specs.len());
    for (t, spec) in specs.iter().enumerate() {
        let (role, other) = if idx.contains(&t) {
            (AttributeRole::Target, reference)
        } else {
            (AttributeRole::Preserved, source)
        };
        attributes.push(AttributeReport {
            attribute: spec.name.clone(),
            role,
            distance: attribute_distance(edited, other, spec, scorer)?,
        });
    }
    let seg = backends.segmenter.as_ref();
    let regions = || idx.iter().map(|&t| specs[t].region.as_str());
    let background = background_mask(
        &alterable_region(seg, source, regions())?,
        &alterable_region(seg, edited, regions())?,
    )?;
    Ok(QmmReport {
        attributes,
        background: background_loss(edited, source, &background)?,
    })
}
