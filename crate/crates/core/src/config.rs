//! Project configuration: backend, scorer, attributes and procedure settings
//! in one TOML file.
//!
//! ```toml
//! template = "a toy image with {}"
//!
//! [backend]
//! kind = "toy"
//!
//! [[attribute]]
//! name = "tint"
//! region = "backdrop"
//! k = 4
//! d = 1.0
//! groups = [["red backdrop", "blue backdrop"], ["warm backdrop", "cool backdrop"]]
//!
//! [train]
//! steps = 500
//! learning_rate = 0.1
//! optimizer = { kind = "adam", beta1 = 0.9, beta2 = 0.999, eps = 1e-8 }
//! ```
//!
//! Every section except `backend` and `attribute` is optional.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backends::toy::TOY_MODEL_ID;
use crate::backends::{BackendKind, BackendManifest, Backends, ScorerConfig, ToyWorld};
use crate::editor::default_sweep_grid;
use crate::error::{Error, Result};
use crate::preselect::DEFAULT_ITERATIONS;
use crate::qmm::{AttributeSpec, DescriptorGroup, DEFAULT_TEMPLATE};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    Toy {
        #[serde(default = "toy_model_id")]
        model_id: String,
        #[serde(default)]
        world: ToyWorld,
    },
    /// A model server; see [`crate::backends::remote`] for the protocol.
    Remote {
        model_id: String,
        endpoint: String,
        n_channels: usize,
        #[serde(default)]
        non_editable: Vec<usize>,
        image_size: [usize; 2],
        regions: Vec<String>,
        #[serde(default)]
        latent_dim: Option<usize>,
    },
}

fn toy_model_id() -> String {
    TOY_MODEL_ID.to_string()
}

impl BackendConfig {
    pub fn manifest(&self) -> BackendManifest {
        match self {
            BackendConfig::Toy { model_id, world } => world.manifest(model_id),
            BackendConfig::Remote {
                model_id,
                endpoint,
                n_channels,
                non_editable,
                image_size,
                regions,
                latent_dim,
            } => BackendManifest {
                kind: BackendKind::Remote,
                model_id: model_id.clone(),
                n_channels: *n_channels,
                non_editable: non_editable.clone(),
                image_size: *image_size,
                regions: regions.clone(),
                endpoint: Some(endpoint.clone()),
                latent_dim: *latent_dim,
                toy: None,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeConfig {
    pub name: String,
    pub region: String,
    /// Overrides the file-level template for this attribute's phrases.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_d")]
    pub d: f64,
    pub groups: Vec<Vec<String>>,
}

fn default_k() -> usize {
    4
}

fn default_d() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreselectConfig {
    /// When false, training starts from the "others"-only matrix.
    pub enabled: bool,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for PreselectConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            iterations: DEFAULT_ITERATIONS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditConfig {
    pub delta: f64,
    pub sweep: Vec<f64>,
    /// Allowed intensity range for interactive clients.
    pub delta_range: [f64; 2],
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            delta: 1.0,
            sweep: default_sweep_grid(),
            delta_range: [0.0, 3.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub port: u16,
    pub cache_dir: PathBuf,
    pub gallery_size: usize,
    pub gallery_seed: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            port: 8080,
            cache_dir: PathBuf::from("cache"),
            gallery_size: 12,
            gallery_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectConfig {
    #[serde(default = "default_template")]
    pub template: String,
    pub backend: BackendConfig,
    #[serde(default)]
    pub scorer: ScorerConfig,
    #[serde(rename = "attribute")]
    pub attributes: Vec<AttributeConfig>,
    #[serde(default)]
    pub preselect: PreselectConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub edit: EditConfig,
    #[serde(default)]
    pub service: ServiceConfig,
}

fn default_template() -> String {
    DEFAULT_TEMPLATE.to_string()
}

impl ProjectConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ProjectConfig = toml::from_str(text).map_err(|e| Error::format("config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::format("config", e))
    }

    pub fn validate(&self) -> Result<()> {
        let manifest = self.manifest();
        manifest.validate()?;
        let specs = self.specs()?;
        for spec in &specs {
            if !manifest.regions.contains(&spec.region) {
                return Err(Error::UnknownRegion(spec.region.clone()));
            }
        }
        self.train.validate()?;
        if !self.edit.delta.is_finite() || self.edit.sweep.iter().any(|d| !d.is_finite()) {
            return Err(Error::invalid("edit intensities must be finite"));
        }
        let [lo, hi] = self.edit.delta_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::invalid(format!("bad intensity range [{lo}, {hi}]")));
        }
        Ok(())
    }

    pub fn manifest(&self) -> BackendManifest {
        self.backend.manifest()
    }

    /// Attribute specs in file order; that order fixes the matrix rows.
    pub fn specs(&self) -> Result<Vec<AttributeSpec>> {
        if self.attributes.is_empty() {
            return Err(Error::invalid("config must define at least one [[attribute]]"));
        }
        let mut specs: Vec<AttributeSpec> = Vec::with_capacity(self.attributes.len());
        for a in &self.attributes {
            if specs.iter().any(|s| s.name == a.name) {
                return Err(Error::invalid(format!("attribute `{}` defined twice", a.name)));
            }
            let template = a.template.as_deref().unwrap_or(&self.template);
            let groups = a
                .groups
                .iter()
                .map(|g| DescriptorGroup::new(g.clone(), template))
                .collect::<Result<Vec<_>>>()?;
            specs.push(AttributeSpec::new(&a.name, groups, &a.region, a.k, a.d)?);
        }
        Ok(specs)
    }

    pub fn attribute_names(&self) -> Vec<String> {
        self.attributes.iter().map(|a| a.name.clone()).collect()
    }

    pub fn backends(&self) -> Result<Backends> {
        Backends::from_config(&self.manifest(), &self.scorer, &self.specs()?)
    }

    /// The bundled toy setup: default world, its three attributes, and the
    /// training settings tuned for it.
    pub fn toy() -> Self {
        let world = ToyWorld::default();
        let attributes = crate::backends::toy::default_toy_attributes()
            .into_iter()
            .map(|s| AttributeConfig {
                name: s.name,
                region: s.region,
                template: None,
                k: s.k,
                d: s.d,
                groups: s.groups.iter().map(|g| g.phrases().to_vec()).collect(),
            })
            .collect();
        let mut train = TrainConfig::default();
        train.weights.prob = 0.02;
        Self {
            template: crate::backends::toy::TOY_TEMPLATE.to_string(),
            backend: BackendConfig::Toy {
                model_id: TOY_MODEL_ID.to_string(),
                world,
            },
            scorer: ScorerConfig::Toy,
            attributes,
            preselect: PreselectConfig::default(),
            train,
            edit: EditConfig::default(),
            service: ServiceConfig::default(),
        }
    }
}
