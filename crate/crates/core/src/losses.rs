//! Training objective terms.
//!
//! `total = w_attr * (l_ref + l_src) + w_bg * l_bg + w_prob * l_prob`

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, RegionMask};
use crate::qmm::{attribute_distance, AttributeSpec, ImageTextScorer};
use crate::stylespace::{softmax, MaskMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub attr: f64,
    pub bg: f64,
    pub prob: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            attr: 1.0,
            bg: 1.0,
            prob: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("attr", self.attr), ("bg", self.bg), ("prob", self.prob)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::invalid(format!(
                    "loss weight {name} must be finite and non-negative, got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// Unweighted loss terms for one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub l_ref: f64,
    pub l_src: f64,
    pub l_bg: f64,
    pub l_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_ref: f64,
    pub l_src: f64,
    pub l_attr: f64,
    pub l_bg: f64,
    pub l_prob: f64,
    pub total: f64,
}

impl LossReport {
    /// `l_attr == l_ref + l_src` and `total` equals the weighted sum.
    pub fn is_consistent(&self, w: &LossWeights) -> bool {
        let total = w.attr * self.l_attr + w.bg * self.l_bg + w.prob * self.l_prob;
        (self.l_attr - (self.l_ref + self.l_src)).abs() <= 1e-12
            && (self.total - total).abs() <= 1e-9
    }
}

pub(crate) fn check_targets(targets: &[usize], specs: &[AttributeSpec]) -> Result<()> {
    for &t in targets {
        if t >= specs.len() {
            return Err(Error::invalid(format!(
                "attribute index {t} out of range for {} attributes",
                specs.len()
            )));
        }
    }
    Ok(())
}

/// Distance of the edited image to the reference, summed over the targets.
pub fn transfer_loss(
    edited: &Image,
    reference: &Image,
    targets: &[usize],
    specs: &[AttributeSpec],
    scorer: &dyn ImageTextScorer,
) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::invalid("target attribute set must be non-empty"));
    }
    check_targets(targets, specs)?;
    targets
        .iter()
        .map(|&t| attribute_distance(edited, reference, &specs[t], scorer))
        .sum()
}

/// Distance of the edited image to the source, summed over every attribute
/// outside the targets.
pub fn preservation_loss(
    edited: &Image,
    source: &Image,
    targets: &[usize],
    specs: &[AttributeSpec],
    scorer: &dyn ImageTextScorer,
) -> Result<f64> {
    check_targets(targets, specs)?;
    (0..specs.len())
        .filter(|t| !targets.contains(t))
        .map(|t| attribute_distance(edited, source, &specs[t], scorer))
        .sum()
}

/// Pixels outside the alterable region in both images.
pub fn background_mask(b_src: &RegionMask, b_edit: &RegionMask) -> Result<RegionMask> {
    b_src.complement().intersection(&b_edit.complement())
}

fn check_bg_shapes(edited: &Image, source: &Image, background: &RegionMask) -> Result<()> {
    let (_, h, w) = edited.shape();
    if edited.shape() != source.shape() || (h, w) != background.shape() {
        return Err(Error::invalid(format!(
            "background loss shape mismatch: edited {:?}, source {:?}, mask {:?}",
            edited.shape(),
            source.shape(),
            background.shape()
        )));
    }
    Ok(())
}

/// Mean absolute difference over the background support, averaged over
/// color channels too. Zero when the background is empty.
pub fn background_loss(edited: &Image, source: &Image, background: &RegionMask) -> Result<f64> {
    check_bg_shapes(edited, source, background)?;
    let support = background.count();
    if support == 0 {
        return Ok(0.0);
    }
    let (c, h, w) = edited.shape();
    let mut sum = 0.0;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                if background.get(y, x) {
                    sum += (edited.get(ch, y, x) - source.get(ch, y, x)).abs();
                }
            }
        }
    }
    Ok(sum / (support * c) as f64)
}

/// [`background_loss`] and its gradient with respect to the edited image.
/// The subgradient at zero difference is taken as zero.
pub fn background_loss_grad(
    edited: &Image,
    source: &Image,
    background: &RegionMask,
) -> Result<(f64, Image)> {
    check_bg_shapes(edited, source, background)?;
    let (c, h, w) = edited.shape();
    let mut grad = Image::zeros(c, h, w);
    let support = background.count();
    if support == 0 {
        return Ok((0.0, grad));
    }
    let norm = (support * c) as f64;
    let mut sum = 0.0;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                if background.get(y, x) {
                    let d = edited.get(ch, y, x) - source.get(ch, y, x);
                    sum += d.abs();
                    grad.set(ch, y, x, sign(d) / norm);
                }
            }
        }
    }
    Ok((sum / norm, grad))
}

pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn editable_count(m: &MaskMatrix, editable: &[bool]) -> Result<usize> {
    if editable.len() != m.n_channels() {
        return Err(Error::invalid(format!(
            "editability layout has {} channels, matrix has {}",
            editable.len(),
            m.n_channels()
        )));
    }
    m.validate_finite()?;
    match editable.iter().filter(|e| **e).count() {
        0 => Err(Error::invalid(
            "probability loss needs at least one editable channel",
        )),
        n => Ok(n),
    }
}

/// Mean over editable channels of `1 - max(softmax(column))`.
pub fn probability_loss(m: &MaskMatrix, editable: &[bool]) -> Result<f64> {
    let n_e = editable_count(m, editable)?;
    let sum: f64 = (0..m.n_channels())
        .filter(|&i| editable[i])
        .map(|i| {
            let p = softmax(&m.column(i));
            1.0 - p.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        })
        .sum();
    Ok(sum / n_e as f64)
}

/// [`probability_loss`] and its gradient over the matrix entries (row-major).
/// Ties for the column maximum resolve to the lowest row.
pub fn probability_loss_grad(m: &MaskMatrix, editable: &[bool]) -> Result<(f64, Vec<f64>)> {
    let n_e = editable_count(m, editable)? as f64;
    let n = m.n_channels();
    let mut grad = vec![0.0; m.n_rows() * n];
    let mut sum = 0.0;
    for i in (0..n).filter(|&i| editable[i]) {
        let p = softmax(&m.column(i));
        let mut top = 0;
        for (r, &v) in p.iter().enumerate() {
            if v > p[top] {
                top = r;
            }
        }
        sum += 1.0 - p[top];
        // d(1 - p_top)/dx_r = -p_top * ([r == top] - p_r)
        for (r, &pr) in p.iter().enumerate() {
            let kron = if r == top { 1.0 } else { 0.0 };
            grad[r * n + i] = -p[top] * (kron - pr) / n_e;
        }
    }
    Ok((sum / n_e, grad))
}

pub fn total_loss(parts: LossParts, weights: &LossWeights) -> Result<LossReport> {
    weights.validate()?;
    for (name, v) in [
        ("l_ref", parts.l_ref),
        ("l_src", parts.l_src),
        ("l_bg", parts.l_bg),
        ("l_prob", parts.l_prob),
    ] {
        if !v.is_finite() {
            return Err(Error::invalid(format!("loss term {name} is not finite")));
        }
    }
    let l_attr = parts.l_ref + parts.l_src;
    Ok(LossReport {
        l_ref: parts.l_ref,
        l_src: parts.l_src,
        l_attr,
        l_bg: parts.l_bg,
        l_prob: parts.l_prob,
        total: weights.attr * l_attr + weights.bg * parts.l_bg + weights.prob * parts.l_prob,
    })
}
