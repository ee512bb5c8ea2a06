//! Versioned key-value text documents (TOML with a top-level `version` key).

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DocError {
    #[error("{kind}: {source}")]
    Parse { kind: &'static str, source: toml::de::Error },
    #[error("{kind}: missing `version` key")]
    MissingVersion { kind: &'static str },
    #[error("{kind}: unsupported version {found} (expected {expected})")]
    Version { kind: &'static str, found: i64, expected: u32 },
    #[error("{kind}: {source}")]
    Serialize { kind: &'static str, source: toml::ser::Error },
}

/// Parses `text` as a versioned document of type `T`. Unknown keys are rejected when `T`
/// denies them.
pub fn parse<T: DeserializeOwned>(text: &str, kind: &'static str, expected: u32) -> Result<T, DocError> {
    let mut table: toml::Table = text.parse().map_err(|source| DocError::Parse { kind, source })?;
    let version = table.remove("version").ok_or(DocError::MissingVersion { kind })?;
    match version.as_integer() {
        Some(v) if v == expected as i64 => {}
        Some(v) => return Err(DocError::Version { kind, found: v, expected }),
        None => return Err(DocError::Version { kind, found: -1, expected }),
    }
    toml::Value::Table(table).try_into().map_err(|source| DocError::Parse { kind, source })
}

pub fn render<T: Serialize>(value: &T, kind: &'static str, version: u32) -> Result<String, DocError> {
    let body = toml::to_string(value).map_err(|source| DocError::Serialize { kind, source })?;
    Ok(format!("version = {version}\n{body}"))
}
