use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use thiserror::Error;

use crate::api::{ErrorBody, ErrorDetail, API_VERSION};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0} not found")]
    NotFound(String),

    #[error("no checkpoint loaded")]
    NoCheckpoint,

    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),

    #[error("bad request: {0}")]
    BadRequest(String),

    #[error("backend unavailable: {0}")]
    Unavailable(String),

    #[error("internal error: {0}")]
    Internal(String),
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::NoCheckpoint => StatusCode::CONFLICT,
            ServiceError::UnknownAttribute(_) | ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            ServiceError::NotFound(_) => "not_found",
            ServiceError::NoCheckpoint => "no_checkpoint",
            ServiceError::UnknownAttribute(_) => "unknown_attribute",
            ServiceError::BadRequest(_) => "bad_request",
            ServiceError::Unavailable(_) => "unavailable",
            ServiceError::Internal(_) => "internal",
        }
    }
}

impl From<stylemask_core::Error> for ServiceError {
    fn from(e: stylemask_core::Error) -> Self {
        use stylemask_core::Error as E;
        match e {
            E::UnknownAttribute(name) => ServiceError::UnknownAttribute(name),
            E::InvalidInput(_) | E::UnknownRegion(_) => ServiceError::BadRequest(e.to_string()),
            E::BackendUnavailable(_) | E::ScorerUnavailable(_) => ServiceError::Unavailable(e.to_string()),
            other => ServiceError::Internal(other.to_string()),
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        if let ServiceError::Internal(msg) = &self {
            tracing::error!("{msg}");
        }
        let attribute = match &self {
            ServiceError::UnknownAttribute(name) => Some(name.clone()),
            _ => None,
        };
        let body = ErrorBody {
            api_version: API_VERSION,
            error: ErrorDetail {
                kind: self.kind().to_string(),
                message: self.to_string(),
                attribute,
            },
        };
        (self.status(), Json(body)).into_response()
    }
}
