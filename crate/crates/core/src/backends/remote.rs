//! HTTP adapters for pre-trained models served out of process.
//!
//! A model server exposes the JSON endpoints below; weights for the 3D-aware
//! generator, the face parser, and the image/text scorer live with that
//! server, not with this crate.
//!
//! | adapter            | request                                   | response                                   |
//! |--------------------|-------------------------------------------|--------------------------------------------|
//! | `POST /to_style`   | `{"z": [..], "pose": [..]}`               | `{"values": [..]}`                         |
//! | `POST /synthesize` | `{"style": [..]}`                         | `{"channels", "height", "width", "data"}`  |
//! | `POST /segment`    | `{"image": {..}}`                         | `{"masks": [[0|1, ..], ..]}` (region order)|
//! | `POST /score`      | `{"image": {..}, "prompts": [..]}`        | `{"scores": [..]}`                         |
//!
//! None of these adapters are differentiable, so pre-selection and training
//! refuse to run on them; editing and measurement work.

use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{BackendManifest, GeneratorBackend, Latent, RegionSegmenter};
use crate::error::{Error, Result};
use crate::image::{Image, RegionMask};
use crate::qmm::ImageTextScorer;
use crate::stylespace::StyleCode;

const DEFAULT_LATENT_DIM: usize = 512;
const POSE_RANGE: f64 = 0.4;

fn agent() -> ureq::Agent {
    let config = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(120)))
        .build();
    ureq::Agent::new_with_config(config)
}

fn post<B: Serialize, T: DeserializeOwned>(agent: &ureq::Agent, url: &str, body: &B) -> std::result::Result<T, String> {
    let mut resp = agent.post(url).send_json(body).map_err(|e| format!("{url}: {e}"))?;
    resp.body_mut()
        .read_json::<T>()
        .map_err(|e| format!("{url}: bad response: {e}"))
}

fn join(endpoint: &str, path: &str) -> String {
    format!("{}/{}", endpoint.trim_end_matches('/'), path)
}

#[derive(Serialize, Deserialize)]
struct WireImage {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl From<&Image> for WireImage {
    fn from(img: &Image) -> Self {
        Self {
            channels: img.channels(),
            height: img.height(),
            width: img.width(),
            data: img.data().to_vec(),
        }
    }
}

pub struct RemoteGenerator {
    manifest: BackendManifest,
    editable: Vec<bool>,
    endpoint: String,
    agent: ureq::Agent,
}

impl RemoteGenerator {
    pub fn new(manifest: BackendManifest) -> Result<Self> {
        let endpoint = manifest
            .endpoint
            .clone()
            .ok_or_else(|| Error::invalid("remote generator needs an endpoint"))?;
        Ok(Self {
            editable: manifest.editable_flags(),
            manifest,
            endpoint,
            agent: agent(),
        })
    }
}

impl GeneratorBackend for RemoteGenerator {
    fn manifest(&self) -> &BackendManifest {
        &self.manifest
    }

    fn editable(&self) -> &[bool] {
        &self.editable
    }

    /// Sampled locally so gallery seeds stay reproducible across servers.
    fn sample_latent(&self, seed: u64) -> Result<Latent> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = self.manifest.latent_dim.unwrap_or(DEFAULT_LATENT_DIM);
        let z = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let pose = (0..2)
            .map(|_| rng.random_range(-POSE_RANGE..POSE_RANGE))
            .collect();
        Ok(Latent { z, pose })
    }

    fn to_style(&self, latent: &Latent) -> Result<StyleCode> {
        #[derive(Deserialize)]
        struct Resp {
            values: Vec<f64>,
        }
        let resp: Resp = post(&self.agent, &join(&self.endpoint, "to_style"), latent)
            .map_err(Error::BackendUnavailable)?;
        if resp.values.len() != self.manifest.n_channels {
            return Err(Error::BackendUnavailable(format!(
                "server returned {} style channels, manifest declares {}",
                resp.values.len(),
                self.manifest.n_channels
            )));
        }
        StyleCode::new(resp.values, self.editable.clone())
    }

    fn synthesize(&self, style: &StyleCode) -> Result<Image> {
        #[derive(Serialize)]
        struct Req<'a> {
            style: &'a [f64],
        }
        let img: WireImage = post(
            &self.agent,
            &join(&self.endpoint, "synthesize"),
            &Req {
                style: style.values(),
            },
        )
        .map_err(Error::BackendUnavailable)?;
        Image::from_data(img.channels, img.height, img.width, img.data)
            .map_err(|e| Error::BackendUnavailable(e.to_string()))
    }
}

pub struct RemoteSegmenter {
    regions: Vec<String>,
    endpoint: String,
    agent: ureq::Agent,
}

impl RemoteSegmenter {
    pub fn new(manifest: BackendManifest) -> Result<Self> {
        Ok(Self {
            regions: manifest.regions.clone(),
            endpoint: manifest
                .endpoint
                .ok_or_else(|| Error::invalid("remote segmenter needs an endpoint"))?,
            agent: agent(),
        })
    }
}

impl RegionSegmenter for RemoteSegmenter {
    fn regions(&self) -> &[String] {
        &self.regions
    }

    fn segment(&self, image: &Image) -> Result<Vec<RegionMask>> {
        #[derive(Serialize)]
        struct Req {
            image: WireImage,
        }
        #[derive(Deserialize)]
        struct Resp {
            masks: Vec<Vec<u8>>,
        }
        let resp: Resp = post(
            &self.agent,
            &join(&self.endpoint, "segment"),
            &Req {
                image: image.into(),
            },
        )
        .map_err(Error::BackendUnavailable)?;
        if resp.masks.len() != self.regions.len() {
            return Err(Error::BackendUnavailable(format!(
                "server returned {} masks for {} regions",
                resp.masks.len(),
                self.regions.len()
            )));
        }
        resp.masks
            .into_iter()
            .map(|m| {
                let bits = m.into_iter().map(|b| b != 0).collect();
                RegionMask::new(image.height(), image.width(), bits)
                    .map_err(|e| Error::BackendUnavailable(e.to_string()))
            })
            .collect()
    }
}

/// Forwards phrase scoring to a contrastive image/text model server.
pub struct RemoteScorer {
    endpoint: String,
    agent: ureq::Agent,
}

impl RemoteScorer {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            agent: agent(),
        }
    }
}

impl ImageTextScorer for RemoteScorer {
    fn name(&self) -> &str {
        "remote-scorer"
    }

    fn score(&self, image: &Image, prompts: &[String]) -> Result<Vec<f64>> {
        #[derive(Serialize)]
        struct Req<'a> {
            image: WireImage,
            prompts: &'a [String],
        }
        #[derive(Deserialize)]
        struct Resp {
            scores: Vec<f64>,
        }
        let resp: Resp = post(
            &self.agent,
            &join(&self.endpoint, "score"),
            &Req {
                image: image.into(),
                prompts,
            },
        )
        .map_err(Error::ScorerUnavailable)?;
        Ok(resp.scores)
    }
}
