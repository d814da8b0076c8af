//! HTTP+JSON service over a loaded checkpoint.
//!
//! Endpoints: `GET /health`, `GET /attributes`, `POST /sample`,
//! `POST /edit`, `GET /images/{id}`. Gallery entries are sampled latents
//! addressed by short ids; rendered images are addressed by the SHA-256 of
//! the request that produced them and cached on disk. Model state is an
//! immutable [`Session`] behind an `Arc`, swapped whole on reload.

pub mod api;
pub mod cache;
pub mod error;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::header;
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;

use stylemask_core::backends::Backends;
use stylemask_core::config::{ProjectConfig, ServiceConfig};
use stylemask_core::editor::{self, Editor};
use stylemask_core::stylespace::StyleCode;
use stylemask_core::trainer::Checkpoint;

use crate::api::*;
use crate::cache::{content_address, is_address, ImageCache};
pub use crate::error::ServiceError;

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

pub const PORT_ENV: &str = "STYLEMASK_PORT";
pub const CACHE_DIR_ENV: &str = "STYLEMASK_CACHE_DIR";
pub const MAX_SAMPLE: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub port: u16,
    pub cache_dir: PathBuf,
}

impl Settings {
    /// Config values, overridden by the environment when set.
    pub fn resolve(cfg: &ServiceConfig, env: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let port = match env(PORT_ENV) {
            Some(v) => v
                .trim()
                .parse()
                .map_err(|_| ServiceError::BadRequest(format!("{PORT_ENV}=`{v}` is not a port number")))?,
            None => cfg.port,
        };
        let cache_dir = env(CACHE_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| cfg.cache_dir.clone());
        Ok(Self { port, cache_dir })
    }

    pub fn from_env(cfg: &ServiceConfig) -> Result<Self> {
        Self::resolve(cfg, |k| std::env::var(k).ok().filter(|v| !v.is_empty()))
    }
}

struct GalleryItem {
    seed: u64,
    style: StyleCode,
}

/// Everything derived from one loaded checkpoint.
pub struct Session {
    pub checkpoint_id: String,
    editor: Editor,
    catalog: Catalog,
}

impl Session {
    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }
}

pub struct AppState {
    project: ProjectConfig,
    backends: Backends,
    fingerprint: String,
    cache: ImageCache,
    gallery: RwLock<HashMap<String, GalleryItem>>,
    session: RwLock<Option<Arc<Session>>>,
}

impl AppState {
    pub fn new(project: ProjectConfig, cache_dir: impl Into<PathBuf>) -> Result<Arc<Self>> {
        let backends = project.backends()?;
        let manifest = serde_json::to_string(backends.generator.manifest())
            .map_err(|e| ServiceError::Internal(e.to_string()))?;
        let cache = ImageCache::open(cache_dir).map_err(|e| ServiceError::Internal(format!("cache: {e}")))?;
        Ok(Arc::new(Self {
            fingerprint: content_address(&["backend", &manifest]),
            project,
            backends,
            cache,
            gallery: RwLock::new(HashMap::new()),
            session: RwLock::new(None),
        }))
    }

    pub fn model_id(&self) -> &str {
        &self.backends.generator.manifest().model_id
    }

    pub fn cache(&self) -> &ImageCache {
        &self.cache
    }

    pub fn session(&self) -> Option<Arc<Session>> {
        self.session.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Builds a new session and swaps it in; requests already running keep
    /// the session they started with.
    pub fn load_checkpoint(&self, checkpoint: &Checkpoint) -> Result<String> {
        let specs = self.project.specs()?;
        let editor = Editor::new(self.backends.clone(), specs, checkpoint)?;
        let checkpoint_id = content_address(&["checkpoint", &checkpoint.to_json()?]);
        let catalog = Catalog {
            api_version: API_VERSION,
            checkpoint: checkpoint_id.clone(),
            model_id: self.model_id().to_string(),
            attributes: self
                .project
                .attributes
                .iter()
                .map(|a| CatalogAttribute {
                    name: a.name.clone(),
                    region: a.region.clone(),
                    template: a.template.clone().unwrap_or_else(|| self.project.template.clone()),
                    groups: a.groups.clone(),
                })
                .collect(),
            delta: DeltaBounds {
                default: self.project.edit.delta,
                min: self.project.edit.delta_range[0],
                max: self.project.edit.delta_range[1],
            },
            sweep: self.project.edit.sweep.clone(),
        };
        let session = Arc::new(Session {
            checkpoint_id: checkpoint_id.clone(),
            editor,
            catalog,
        });
        *self.session.write().unwrap_or_else(|e| e.into_inner()) = Some(session);
        tracing::info!(checkpoint = %checkpoint_id, "checkpoint loaded");
        Ok(checkpoint_id)
    }

    pub fn health(&self) -> Health {
        Health {
            api_version: API_VERSION,
            status: "ok".to_string(),
            model_id: self.model_id().to_string(),
            checkpoint: self.session().map(|s| s.checkpoint_id.clone()),
        }
    }

    pub fn catalog(&self) -> Result<Catalog> {
        Ok(self.session().ok_or(ServiceError::NoCheckpoint)?.catalog.clone())
    }

    pub fn entry_id(&self, seed: u64) -> String {
        content_address(&["entry", &self.fingerprint, &seed.to_string()])[..16].to_string()
    }

    pub fn sample_image_id(&self, seed: u64) -> String {
        content_address(&["sample", &self.fingerprint, &seed.to_string()])
    }

    /// Samples `count` latents with seeds `seed, seed + 1, ...`, renders and
    /// caches their images, and registers them in the gallery.
    pub fn sample(&self, req: &SampleRequest) -> Result<Vec<GalleryEntry>> {
        let count = req.count.unwrap_or(self.project.service.gallery_size);
        let first = req.seed.unwrap_or(self.project.service.gallery_seed);
        if count > MAX_SAMPLE {
            return Err(ServiceError::BadRequest(format!("count {count} exceeds {MAX_SAMPLE}")));
        }
        let generator = &self.backends.generator;
        let mut entries = Vec::with_capacity(count);
        for i in 0..count as u64 {
            let seed = first.wrapping_add(i);
            let latent = generator.sample_latent(seed)?;
            let style = generator.to_style(&latent)?;
            let image_id = self.sample_image_id(seed);
            if self.cached(&image_id, "png")?.is_none() {
                let png = generator.synthesize(&style)?.to_png()?;
                self.store(&image_id, "png", &png)?;
            }
            let id = self.entry_id(seed);
            self.gallery
                .write()
                .unwrap_or_else(|e| e.into_inner())
                .insert(id.clone(), GalleryItem { seed, style });
            entries.push(GalleryEntry {
                id,
                seed,
                pose: latent.pose,
                image_url: image_url(&image_id),
                image_id,
            });
        }
        Ok(entries)
    }

    fn gallery_item(&self, id: &str) -> Result<(u64, StyleCode)> {
        let gallery = self.gallery.read().unwrap_or_else(|e| e.into_inner());
        let item = gallery
            .get(id)
            .ok_or_else(|| ServiceError::NotFound(format!("gallery entry `{id}`")))?;
        Ok((item.seed, item.style.clone()))
    }

    pub fn edit(&self, req: &EditRequest) -> Result<EditResponse> {
        let session = self.session().ok_or(ServiceError::NoCheckpoint)?;
        let (src_seed, source) = self.gallery_item(&req.source_id)?;
        let (ref_seed, reference) = self.gallery_item(&req.reference_id)?;
        let delta = req.delta.unwrap_or(session.catalog.delta.default);
        let bounds = session.catalog.delta;
        if !delta.is_finite() || delta < bounds.min || delta > bounds.max {
            return Err(ServiceError::BadRequest(format!(
                "delta {delta} outside [{}, {}]",
                bounds.min, bounds.max
            )));
        }
        session.editor.resolve_targets(&req.targets)?;

        let delta_bits = format!("{:016x}", delta.to_bits());
        let (src_seed_s, ref_seed_s) = (src_seed.to_string(), ref_seed.to_string());
        let mut parts = vec![
            "edit",
            &session.checkpoint_id,
            &self.fingerprint,
            &src_seed_s,
            &ref_seed_s,
            &delta_bits,
        ];
        parts.extend(req.targets.iter().map(String::as_str));
        let image_id = content_address(&parts);

        if let (Some(json), Some(_)) = (self.cached(&image_id, "json")?, self.cached(&image_id, "png")?) {
            if let Ok(resp) = serde_json::from_slice::<EditResponse>(&json) {
                if resp.source_id == req.source_id && resp.reference_id == req.reference_id {
                    return Ok(resp);
                }
            }
        }

        let result = session.editor.edit(&editor::EditRequest {
            source,
            reference,
            targets: req.targets.clone(),
            delta,
        })?;
        let resp = EditResponse {
            api_version: API_VERSION,
            checkpoint: session.checkpoint_id.clone(),
            image_url: image_url(&image_id),
            image_id: image_id.clone(),
            source_id: req.source_id.clone(),
            reference_id: req.reference_id.clone(),
            targets: req.targets.clone(),
            delta,
            report: result.report,
        };
        self.store(&image_id, "png", &result.image.to_png()?)?;
        let json = serde_json::to_vec(&resp).map_err(|e| ServiceError::Internal(e.to_string()))?;
        self.store(&image_id, "json", &json)?;
        Ok(resp)
    }

    pub fn image(&self, id: &str) -> Result<Vec<u8>> {
        if !is_address(id) {
            return Err(ServiceError::NotFound(format!("image `{id}`")));
        }
        self.cached(id, "png")?
            .ok_or_else(|| ServiceError::NotFound(format!("image `{id}`")))
    }

    fn cached(&self, id: &str, ext: &str) -> Result<Option<Vec<u8>>> {
        self.cache
            .get(id, ext)
            .map_err(|e| ServiceError::Internal(format!("cache read: {e}")))
    }

    fn store(&self, id: &str, ext: &str, bytes: &[u8]) -> Result<()> {
        self.cache
            .put(id, ext, bytes)
            .map_err(|e| ServiceError::Internal(format!("cache write: {e}")))
    }
}

fn parse_body<T: DeserializeOwned + Default>(body: &[u8]) -> Result<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    parse_required(body)
}

fn parse_required<T: DeserializeOwned>(body: &[u8]) -> Result<T> {
    serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(format!("request body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> Result<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(format!("worker: {e}")))?
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(state.health())
}

async fn attributes(State(state): State<Arc<AppState>>) -> Result<Json<Catalog>> {
    state.catalog().map(Json)
}

async fn sample(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<SampleResponse>> {
    let req: SampleRequest = parse_body(&body)?;
    let entries = blocking(move || state.sample(&req)).await?;
    Ok(Json(SampleResponse {
        api_version: API_VERSION,
        entries,
    }))
}

async fn edit(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<EditResponse>> {
    let req: EditRequest = parse_required(&body)?;
    blocking(move || state.edit(&req)).await.map(Json)
}

async fn image(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<impl IntoResponse> {
    let png = state.image(&id)?;
    Ok((
        [
            (header::CONTENT_TYPE, "image/png"),
            (header::CACHE_CONTROL, "public, max-age=31536000, immutable"),
        ],
        png,
    ))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/attributes", get(attributes))
        .route("/sample", post(sample))
        .route("/edit", post(edit))
        .route("/images/{id}", get(image))
        .with_state(state)
}

/// Serves until Ctrl-C. The configured gallery is sampled before binding.
pub async fn serve(state: Arc<AppState>, port: u16) -> std::io::Result<()> {
    let warm = state.clone();
    blocking(move || warm.sample(&SampleRequest::default()))
        .await
        .map_err(std::io::Error::other)?;
    let addr = SocketAddr::from(([0, 0, 0, 0], port));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, cache = %state.cache.dir().display(), "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
