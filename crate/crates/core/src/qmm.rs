//! Quantitative measurement of attribute characteristics.
//!
//! An attribute is described by descriptor groups: small sets of phrases that
//! act as soft class labels. A scorer rates every templated phrase against an
//! image; the softmax of those ratings is the group's probability vector, and
//! attribute distances are L1 distances between such vectors summed over an
//! attribute's groups.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::stylespace::softmax;

pub const DEFAULT_TEMPLATE: &str = "a face with {}";

/// Phrases jointly describing one characteristic of an attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorGroup {
    phrases: Vec<String>,
    template: String,
}

impl DescriptorGroup {
    pub fn new(phrases: Vec<String>, template: impl Into<String>) -> Result<Self> {
        let template = template.into();
        if phrases.len() < 2 {
            return Err(Error::invalid(format!(
                "descriptor group needs at least 2 phrases, got {}",
                phrases.len()
            )));
        }
        for (i, p) in phrases.iter().enumerate() {
            if p.trim().is_empty() {
                return Err(Error::invalid("descriptor phrases must be non-empty"));
            }
            if phrases[..i].contains(p) {
                return Err(Error::invalid(format!("duplicate descriptor phrase `{p}`")));
            }
        }
        if template.matches("{}").count() != 1 {
            return Err(Error::invalid(format!(
                "template `{template}` must contain exactly one `{{}}` placeholder"
            )));
        }
        Ok(Self { phrases, template })
    }

    pub fn phrases(&self) -> &[String] {
        &self.phrases
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    /// Phrases with the template applied, in phrase order.
    pub fn prompts(&self) -> Vec<String> {
        self.phrases
            .iter()
            .map(|p| apply_template(&self.template, p))
            .collect()
    }
}

pub fn apply_template(template: &str, phrase: &str) -> String {
    template.replacen("{}", phrase, 1)
}

/// A named attribute: its descriptor groups, alterable region, and the
/// pre-selection budget and initial weight used to seed the mask matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    pub groups: Vec<DescriptorGroup>,
    pub region: String,
    pub k: usize,
    pub d: f64,
}

impl AttributeSpec {
    pub fn new(
        name: impl Into<String>,
        groups: Vec<DescriptorGroup>,
        region: impl Into<String>,
        k: usize,
        d: f64,
    ) -> Result<Self> {
        let name = name.into();
        if name.trim().is_empty() {
            return Err(Error::invalid("attribute name must be non-empty"));
        }
        if groups.is_empty() {
            return Err(Error::invalid(format!(
                "attribute `{name}` needs at least one descriptor group"
            )));
        }
        if !d.is_finite() {
            return Err(Error::invalid(format!("attribute `{name}` has non-finite d")));
        }
        Ok(Self {
            name,
            groups,
            region: region.into(),
            k,
            d,
        })
    }
}

/// Softmax over one group's phrase scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeProbability {
    pub probs: Vec<f64>,
}

/// Rates how well each prompt describes an image.
///
/// Implementations must be deterministic and return one score per prompt.
pub trait ImageTextScorer: Send + Sync {
    fn name(&self) -> &str;

    fn score(&self, image: &Image, prompts: &[String]) -> Result<Vec<f64>>;

    /// Row-aligned scores for several images.
    fn score_batch(&self, images: &[&Image], prompts: &[String]) -> Result<Vec<Vec<f64>>> {
        images.iter().map(|img| self.score(img, prompts)).collect()
    }

    fn as_differentiable(&self) -> Option<&dyn DifferentiableScorer> {
        None
    }
}

/// A scorer that can pull score gradients back onto image pixels.
pub trait DifferentiableScorer: ImageTextScorer {
    fn score_vjp(&self, image: &Image, prompts: &[String], grad_scores: &[f64]) -> Result<Image>;
}

fn checked_scores(scorer: &dyn ImageTextScorer, scores: Result<Vec<f64>>, expected: usize) -> Result<Vec<f64>> {
    let scores = scores.map_err(|e| match e {
        Error::ScorerUnavailable(_) => e,
        other => Error::ScorerUnavailable(format!("{}: {other}", scorer.name())),
    })?;
    if scores.len() != expected {
        return Err(Error::ScorerUnavailable(format!(
            "{} returned {} scores for {expected} prompts",
            scorer.name(),
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::ScorerUnavailable(format!(
            "{} returned non-finite scores",
            scorer.name()
        )));
    }
    Ok(scores)
}

/// `softmax(scores(image, templated phrases))`.
pub fn classify(
    image: &Image,
    group: &DescriptorGroup,
    scorer: &dyn ImageTextScorer,
) -> Result<AttributeProbability> {
    let prompts = group.prompts();
    let scores = checked_scores(scorer, scorer.score(image, &prompts), prompts.len())?;
    Ok(AttributeProbability {
        probs: softmax(&scores),
    })
}

/// Probability vectors for several images at once, row-aligned with `images`.
pub fn classify_batch(
    images: &[&Image],
    group: &DescriptorGroup,
    scorer: &dyn ImageTextScorer,
) -> Result<Vec<AttributeProbability>> {
    let prompts = group.prompts();
    let rows = scorer
        .score_batch(images, &prompts)
        .map_err(|e| Error::ScorerUnavailable(format!("{}: {e}", scorer.name())))?;
    if rows.len() != images.len() {
        return Err(Error::ScorerUnavailable(format!(
            "{} returned {} rows for {} images",
            scorer.name(),
            rows.len(),
            images.len()
        )));
    }
    rows.into_iter()
        .map(|row| {
            let scores = checked_scores(scorer, Ok(row), prompts.len())?;
            Ok(AttributeProbability {
                probs: softmax(&scores),
            })
        })
        .collect()
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Sum over the attribute's groups of the L1 distance between the two
/// images' probability vectors.
pub fn attribute_distance(
    a: &Image,
    b: &Image,
    spec: &AttributeSpec,
    scorer: &dyn ImageTextScorer,
) -> Result<f64> {
    let mut total = 0.0;
    for group in &spec.groups {
        let pa = classify(a, group, scorer)?;
        let pb = classify(b, group, scorer)?;
        total += l1_distance(&pa.probs, &pb.probs);
    }
    Ok(total)
}
