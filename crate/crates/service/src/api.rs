//! Request and response bodies. Every response carries `api_version`; a
//! breaking change to any field bumps it.

use serde::{Deserialize, Serialize};
use stylemask_core::editor::QmmReport;

pub const API_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub api_version: u32,
    pub status: String,
    pub model_id: String,
    /// Id of the loaded checkpoint, if any.
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogAttribute {
    pub name: String,
    pub region: String,
    pub template: String,
    /// Descriptor groups as configured, before templating.
    pub groups: Vec<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaBounds {
    pub default: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub api_version: u32,
    pub checkpoint: String,
    pub model_id: String,
    /// In configuration order, which is also the checkpoint's row order.
    pub attributes: Vec<CatalogAttribute>,
    pub delta: DeltaBounds,
    pub sweep: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRequest {
    /// Defaults to the configured gallery size.
    pub count: Option<usize>,
    /// First latent seed; entry `i` uses `seed + i`. Defaults to the
    /// configured gallery seed.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub id: String,
    /// Latent seed; sampling it again reproduces the style code bitwise.
    pub seed: u64,
    pub pose: Vec<f64>,
    pub image_id: String,
    pub image_url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResponse {
    pub api_version: u32,
    pub entries: Vec<GalleryEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRequest {
    pub source_id: String,
    pub reference_id: String,
    pub targets: Vec<String>,
    /// Defaults to the configured intensity.
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditResponse {
    pub api_version: u32,
    pub checkpoint: String,
    /// Content address of the edited image.
    pub image_id: String,
    pub image_url: String,
    pub source_id: String,
    pub reference_id: String,
    pub targets: Vec<String>,
    pub delta: f64,
    pub report: QmmReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub kind: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub api_version: u32,
    pub error: ErrorDetail,
}

pub fn image_url(id: &str) -> String {
    format!("/images/{id}")
}
