//! Application errors with stable codes and HTTP status mapping.

use axum::extract::rejection::{JsonRejection, PathRejection, QueryRejection};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;
use thiserror::Error;

pub type AppResult<T> = std::result::Result<T, AppError>;

#[derive(Debug, Error)]
pub enum AppError {
    #[error(transparent)]
    Core(#[from] cellscout_core::Error),
    /// An uploaded table failed to parse.
    #[error(transparent)]
    Parse(cellscout_core::Error),
    #[error("{kind} {id:?} not found")]
    NotFound { kind: &'static str, id: String },
    #[error("a training job is already active for dataset {0:?}")]
    JobActive(String),
    #[error("dataset {0:?} has no trained model")]
    NotTrained(String),
    #[error("dataset {0:?} has no ground-truth labels")]
    NoLabels(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("store holds {0} datasets; pass --dataset")]
    AmbiguousDataset(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl AppError {
    pub fn not_found(kind: &'static str, id: impl Into<String>) -> Self {
        AppError::NotFound {
            kind,
            id: id.into(),
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            AppError::Core(e) | AppError::Parse(e) => e.code(),
            AppError::NotFound { .. } => "NotFound",
            AppError::JobActive(_) => "JobActive",
            AppError::NotTrained(_) => "NotTrained",
            AppError::NoLabels(_) => "NoLabels",
            AppError::BadRequest(_) => "BadRequest",
            AppError::AmbiguousDataset(_) => "AmbiguousDataset",
            AppError::Io(_) => "Io",
            AppError::Json(_) => "Json",
        }
    }

    pub fn status(&self) -> StatusCode {
        use cellscout_core::Error as E;
        match self {
            AppError::NotFound { .. } => StatusCode::NOT_FOUND,
            AppError::JobActive(_) => StatusCode::CONFLICT,
            AppError::Parse(_) | AppError::BadRequest(_) | AppError::Json(_) => {
                StatusCode::BAD_REQUEST
            }
            AppError::Io(_) | AppError::Core(E::Io(_) | E::Json(_)) => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub code: &'static str,
    pub message: String,
}

impl From<JsonRejection> for AppError {
    fn from(r: JsonRejection) -> Self {
        AppError::BadRequest(r.body_text())
    }
}

impl From<PathRejection> for AppError {
    fn from(r: PathRejection) -> Self {
        AppError::BadRequest(r.body_text())
    }
}

impl From<QueryRejection> for AppError {
    fn from(r: QueryRejection) -> Self {
        AppError::BadRequest(r.body_text())
    }
}

impl IntoResponse for AppError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.code(),
            message: self.to_string(),
        };
        (self.status(), Json(body)).into_response()
    }
}
