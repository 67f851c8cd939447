//! Error classes shared by the HTTP API and the command line.

use std::fmt;

use dikw_core::RunError;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorCode {
    NotFound,
    InvalidState,
    ValidationFailed,
    Internal,
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ErrorCode::NotFound => "NotFound",
            ErrorCode::InvalidState => "InvalidState",
            ErrorCode::ValidationFailed => "ValidationFailed",
            ErrorCode::Internal => "Internal",
        };
        f.write_str(s)
    }
}

/// Process exit statuses. Usage errors reported by the argument parser
/// also exit with 2.
pub mod exit {
    pub const OK: i32 = 0;
    pub const INTERNAL: i32 = 1;
    pub const VALIDATION: i32 = 2;
    pub const NOT_FOUND: i32 = 3;
    pub const INVALID_STATE: i32 = 4;
    pub const LLM: i32 = 5;
}

/// Body of every non-success API response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Error)]
#[error("{code}: {message}")]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
    #[serde(default)]
    pub detail: Value,
    /// Set for failures of the language-model endpoint; not serialized.
    #[serde(skip)]
    pub llm: bool,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
            detail: Value::Null,
            llm: false,
        }
    }

    pub fn with_detail(mut self, detail: Value) -> Self {
        self.detail = detail;
        self
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::NotFound, message)
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::ValidationFailed, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::Internal, message)
    }

    pub fn http_status(&self) -> u16 {
        match self.code {
            ErrorCode::NotFound => 404,
            ErrorCode::InvalidState => 409,
            ErrorCode::ValidationFailed => 400,
            ErrorCode::Internal if self.llm => 502,
            ErrorCode::Internal => 500,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.code {
            ErrorCode::NotFound => exit::NOT_FOUND,
            ErrorCode::InvalidState => exit::INVALID_STATE,
            ErrorCode::ValidationFailed => exit::VALIDATION,
            ErrorCode::Internal if self.llm => exit::LLM,
            ErrorCode::Internal => exit::INTERNAL,
        }
    }
}

impl From<RunError> for ApiError {
    fn from(e: RunError) -> Self {
        let message = e.to_string();
        let (code, kind) = match &e {
            RunError::InvalidConfig(_) => (ErrorCode::ValidationFailed, "invalid_config"),
            RunError::Dataset(_) => (ErrorCode::ValidationFailed, "dataset"),
            RunError::Simulator(_) => (ErrorCode::ValidationFailed, "simulator"),
            RunError::Topic(_) => (ErrorCode::ValidationFailed, "topic"),
            RunError::CycleDetected(_) => (ErrorCode::ValidationFailed, "cycle"),
            RunError::NotFound(_) => (ErrorCode::NotFound, "not_found"),
            RunError::InvalidState(_) => (ErrorCode::InvalidState, "invalid_state"),
            RunError::Llm(_) => (ErrorCode::Internal, "llm"),
            RunError::Store(_) => (ErrorCode::Internal, "store"),
            RunError::Io { .. } => (ErrorCode::Internal, "io"),
            RunError::Json(_) => (ErrorCode::Internal, "json"),
        };
        let mut err = ApiError::new(code, message).with_detail(json!({ "kind": kind }));
        err.llm = matches!(e, RunError::Llm(_));
        err
    }
}

impl From<serde_json::Error> for ApiError {
    fn from(e: serde_json::Error) -> Self {
        ApiError::validation(format!("malformed JSON: {e}")).with_detail(json!({
            "line": e.line(),
            "column": e.column(),
        }))
    }
}

impl From<std::io::Error> for ApiError {
    fn from(e: std::io::Error) -> Self {
        ApiError::internal(e.to_string())
    }
}

impl From<dikw_core::store::StoreError> for ApiError {
    fn from(e: dikw_core::store::StoreError) -> Self {
        ApiError::internal(e.to_string())
    }
}
