//! Generator, segmenter and scorer backends.
//!
//! [`toy`] is a deterministic, differentiable stand-in with planted
//! channel/attribute semantics that every gradient-based procedure and test
//! runs against. [`remote`] forwards the same interfaces to an external model
//! server for real pre-trained generators and image/text scorers.

pub mod remote;
pub mod toy;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, RegionMask};
use crate::qmm::{AttributeSpec, ImageTextScorer};
use crate::stylespace::StyleCode;

pub use toy::{PlantedProperty, PropertyKind, ToyGenerator, ToyScorer, ToySegmenter, ToyWorld};

/// A sampled latent code plus camera pose parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    pub z: Vec<f64>,
    pub pose: Vec<f64>,
}

pub trait GeneratorBackend: Send + Sync {
    fn manifest(&self) -> &BackendManifest;

    fn n_channels(&self) -> usize {
        self.manifest().n_channels
    }

    /// Per-channel editability; constant for the lifetime of the backend.
    fn editable(&self) -> &[bool];

    fn sample_latent(&self, seed: u64) -> Result<Latent>;

    fn to_style(&self, latent: &Latent) -> Result<StyleCode>;

    /// Deterministic rendering of a style code into an image in `[0, 1]`.
    fn synthesize(&self, style: &StyleCode) -> Result<Image>;

    fn as_differentiable(&self) -> Option<&dyn DifferentiableGenerator> {
        None
    }

    fn style_from_seed(&self, seed: u64) -> Result<StyleCode> {
        self.to_style(&self.sample_latent(seed)?)
    }
}

pub trait DifferentiableGenerator: GeneratorBackend {
    /// `d<grad_image, synthesize(style)> / d style`.
    fn synthesize_vjp(&self, style: &StyleCode, grad_image: &Image) -> Result<Vec<f64>>;
}

pub trait RegionSegmenter: Send + Sync {
    fn regions(&self) -> &[String];

    /// One binary mask per label of [`regions`](Self::regions), in order.
    fn segment(&self, image: &Image) -> Result<Vec<RegionMask>>;

    fn region_mask(&self, image: &Image, label: &str) -> Result<RegionMask> {
        let idx = self
            .regions()
            .iter()
            .position(|r| r == label)
            .ok_or_else(|| Error::UnknownRegion(label.to_string()))?;
        Ok(self.segment(image)?.swap_remove(idx))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Toy,
    Remote,
}

/// Describes a generator backend: identity, channel layout and image size.
///
/// The toy world embeds its parameters under `toy`; remote adapters name the
/// model server under `endpoint`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendManifest {
    pub kind: BackendKind,
    pub model_id: String,
    pub n_channels: usize,
    #[serde(default)]
    pub non_editable: Vec<usize>,
    /// `[height, width]`
    pub image_size: [usize; 2],
    pub regions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toy: Option<ToyWorld>,
}

impl BackendManifest {
    pub fn editable_flags(&self) -> Vec<bool> {
        let mut flags = vec![true; self.n_channels];
        for &c in &self.non_editable {
            if c < flags.len() {
                flags[c] = false;
            }
        }
        flags
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_channels == 0 {
            return Err(Error::invalid("manifest n_channels must be positive"));
        }
        if let Some(c) = self.non_editable.iter().find(|&&c| c >= self.n_channels) {
            return Err(Error::invalid(format!(
                "non-editable channel {c} out of range for {} channels",
                self.n_channels
            )));
        }
        if self.regions.is_empty() {
            return Err(Error::invalid("manifest must list at least one region"));
        }
        match self.kind {
            BackendKind::Toy => {
                let world = self
                    .toy
                    .as_ref()
                    .ok_or_else(|| Error::invalid("toy backend manifest needs a `toy` section"))?;
                world.validate()?;
                let derived = world.manifest(&self.model_id);
                if derived.n_channels != self.n_channels
                    || derived.image_size != self.image_size
                    || derived.regions != self.regions
                    || sorted(&derived.non_editable) != sorted(&self.non_editable)
                {
                    return Err(Error::invalid(
                        "manifest layout disagrees with the embedded toy world",
                    ));
                }
            }
            BackendKind::Remote => {
                if self.endpoint.is_none() {
                    return Err(Error::invalid("remote backend manifest needs an `endpoint`"));
                }
            }
        }
        Ok(())
    }
}

fn sorted(v: &[usize]) -> Vec<usize> {
    let mut v = v.to_vec();
    v.sort_unstable();
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScorerConfig {
    #[default]
    Toy,
    Remote { endpoint: String },
}

/// Union of the segmenter's masks for the named regions.
pub fn alterable_region<'a>(
    segmenter: &dyn RegionSegmenter,
    image: &Image,
    regions: impl IntoIterator<Item = &'a str>,
) -> Result<RegionMask> {
    let masks = segmenter.segment(image)?;
    let mut out = RegionMask::filled(image.height(), image.width(), false);
    for region in regions {
        let r = segmenter
            .regions()
            .iter()
            .position(|name| name == region)
            .ok_or_else(|| Error::UnknownRegion(region.to_string()))?;
        out = out.union(&masks[r])?;
    }
    Ok(out)
}

/// The three collaborators every procedure needs, shareable across threads.
#[derive(Clone)]
pub struct Backends {
    pub generator: Arc<dyn GeneratorBackend>,
    pub segmenter: Arc<dyn RegionSegmenter>,
    pub scorer: Arc<dyn ImageTextScorer>,
}

impl Backends {
    pub fn from_config(
        manifest: &BackendManifest,
        scorer: &ScorerConfig,
        specs: &[AttributeSpec],
    ) -> Result<Self> {
        manifest.validate()?;
        let (generator, segmenter): (Arc<dyn GeneratorBackend>, Arc<dyn RegionSegmenter>) =
            match manifest.kind {
                BackendKind::Toy => {
                    let world = manifest.toy.clone().expect("validated");
                    (
                        Arc::new(ToyGenerator::with_model_id(world.clone(), &manifest.model_id)?),
                        Arc::new(ToySegmenter::new(world)?),
                    )
                }
                BackendKind::Remote => (
                    Arc::new(remote::RemoteGenerator::new(manifest.clone())?),
                    Arc::new(remote::RemoteSegmenter::new(manifest.clone())?),
                ),
            };
        let scorer: Arc<dyn ImageTextScorer> = match scorer {
            ScorerConfig::Toy => {
                let world = manifest.toy.clone().ok_or_else(|| {
                    Error::invalid("the toy scorer only measures toy-world images")
                })?;
                Arc::new(ToyScorer::new(world, specs)?)
            }
            ScorerConfig::Remote { endpoint } => Arc::new(remote::RemoteScorer::new(endpoint)),
        };
        for spec in specs {
            if !segmenter.regions().contains(&spec.region) {
                return Err(Error::UnknownRegion(spec.region.clone()));
            }
        }
        Ok(Self {
            generator,
            segmenter,
            scorer,
        })
    }

    /// Toy generator, segmenter and scorer over one world.
    pub fn toy(world: ToyWorld, specs: &[AttributeSpec]) -> Result<Self> {
        Ok(Self {
            generator: Arc::new(ToyGenerator::new(world.clone())?),
            segmenter: Arc::new(ToySegmenter::new(world.clone())?),
            scorer: Arc::new(ToyScorer::new(world, specs)?),
        })
    }
}
