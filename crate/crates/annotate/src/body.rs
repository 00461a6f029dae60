//! Line-oriented `key=value` bodies. Blank lines and lines starting with
//! `#` are ignored; keys are unique.

use std::fmt::Write;

use crate::error::ServiceError;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Body {
    fields: Vec<(String, String)>,
}

impl Body {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, ServiceError> {
        let mut body = Self::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ServiceError::BadRequest(format!("line {}: expected key=value", n + 1)))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ServiceError::BadRequest(format!("line {}: empty key", n + 1)));
            }
            if body.get(key).is_some() {
                return Err(ServiceError::BadRequest(format!("duplicate key {key}")));
            }
            body.fields.push((key.to_string(), value.trim().to_string()));
        }
        Ok(body)
    }

    /// Appends a field. Values must not contain line breaks.
    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        let value = value.to_string().replace(['\r', '\n'], " ");
        self.fields.push((key.into(), value));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str, ServiceError> {
        self.get(key)
            .filter(|v| !v.is_empty())
            .ok_or_else(|| ServiceError::BadRequest(format!("missing field {key}")))
    }

    pub fn fields(&self) -> &[(String, String)] {
        &self.fields
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.fields {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}
