//! Versioned prompt templates.
//!
//! Templates are UTF-8 text with `{placeholder}` slots; `{{` and `}}` render
//! as literal braces. A `registry.json` maps each template id to its file and
//! SHA-256, and every run records the ids and hashes it used.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::BackendError;

pub const DECOMPOSE_CLAIMS: &str = "decompose_claims@v1";
pub const VERIFICATION_QUESTION: &str = "verification_question@v1";
pub const DECOMPOSE_REFERENCE: &str = "decompose_reference@v1";
pub const MATCH_CLAIMS: &str = "match_claims@v1";
pub const NLI_ENTAILMENT: &str = "nli_entailment@v1";
pub const REPAIR_JSON: &str = "repair_json@v1";

const BUILTIN_REGISTRY: &str = include_str!("../../templates/registry.json");
const BUILTIN_FILES: &[(&str, &str)] = &[
    ("decompose_claims.txt", include_str!("../../templates/decompose_claims.txt")),
    ("verification_question.txt", include_str!("../../templates/verification_question.txt")),
    ("decompose_reference.txt", include_str!("../../templates/decompose_reference.txt")),
    ("match_claims.txt", include_str!("../../templates/match_claims.txt")),
    ("nli_entailment.txt", include_str!("../../templates/nli_entailment.txt")),
    ("repair_json.txt", include_str!("../../templates/repair_json.txt")),
];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct RegistryEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone)]
pub struct Template {
    pub id: String,
    pub text: String,
    pub sha256: String,
}

#[derive(Debug, Clone)]
pub struct TemplateRegistry {
    templates: BTreeMap<String, Template>,
}

fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl TemplateRegistry {
    /// The templates compiled into the crate.
    pub fn builtin() -> Self {
        let entries: BTreeMap<String, RegistryEntry> =
            serde_json::from_str(BUILTIN_REGISTRY).expect("builtin registry is valid JSON");
        Self::from_entries(entries, |path| {
            BUILTIN_FILES
                .iter()
                .find(|(name, _)| *name == path)
                .map(|(_, text)| text.to_string())
                .ok_or_else(|| BackendError::Config(format!("builtin template file {path} missing")))
        })
        .expect("builtin templates match their registry hashes")
    }

    /// Load `registry.json` and the files it names from `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, BackendError> {
        let dir = dir.as_ref();
        let registry = std::fs::read_to_string(dir.join("registry.json"))
            .map_err(|e| BackendError::Config(format!("reading {}: {e}", dir.join("registry.json").display())))?;
        let entries: BTreeMap<String, RegistryEntry> =
            serde_json::from_str(&registry).map_err(|e| BackendError::Config(format!("registry.json: {e}")))?;
        Self::from_entries(entries, |path| {
            std::fs::read_to_string(dir.join(path))
                .map_err(|e| BackendError::Config(format!("reading template {path}: {e}")))
        })
    }

    fn from_entries(
        entries: BTreeMap<String, RegistryEntry>,
        read: impl Fn(&str) -> Result<String, BackendError>,
    ) -> Result<Self, BackendError> {
        let mut templates = BTreeMap::new();
        for (id, entry) in entries {
            let text = read(&entry.path)?;
            let sha256 = sha256_hex(&text);
            if sha256 != entry.sha256 {
                return Err(BackendError::Config(format!(
                    "template {id} hash mismatch: registry {} vs file {sha256}",
                    entry.sha256
                )));
            }
            templates.insert(id.clone(), Template { id, text, sha256 });
        }
        for required in [
            DECOMPOSE_CLAIMS,
            VERIFICATION_QUESTION,
            DECOMPOSE_REFERENCE,
            MATCH_CLAIMS,
            NLI_ENTAILMENT,
            REPAIR_JSON,
        ] {
            if !templates.contains_key(required) {
                return Err(BackendError::Config(format!("registry lacks template {required}")));
            }
        }
        Ok(Self { templates })
    }

    pub fn get(&self, id: &str) -> Result<&Template, BackendError> {
        self.templates
            .get(id)
            .ok_or_else(|| BackendError::InvalidRequest(format!("unknown template {id}")))
    }

    pub fn hash(&self, id: &str) -> Option<&str> {
        self.templates.get(id).map(|t| t.sha256.as_str())
    }

    /// `(id, sha256)` for every template, in id order.
    pub fn fingerprint(&self) -> BTreeMap<String, String> {
        self.templates.iter().map(|(id, t)| (id.clone(), t.sha256.clone())).collect()
    }

    pub fn render(&self, id: &str, inputs: &BTreeMap<String, String>) -> Result<String, BackendError> {
        render(&self.get(id)?.text, inputs)
    }
}

/// Substitute `{name}` slots. Every slot must have an input.
pub fn render(text: &str, inputs: &BTreeMap<String, String>) -> Result<String, BackendError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(pos) = rest.find(['{', '}']) {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if let Some(after) = tail.strip_prefix("{{") {
            out.push('{');
            rest = after;
        } else if let Some(after) = tail.strip_prefix("}}") {
            out.push('}');
            rest = after;
        } else if tail.starts_with('{') {
            let end = tail
                .find('}')
                .ok_or_else(|| BackendError::InvalidRequest("unterminated placeholder".into()))?;
            let name = &tail[1..end];
            let value = inputs
                .get(name)
                .ok_or_else(|| BackendError::InvalidRequest(format!("missing template input {name}")))?;
            out.push_str(value);
            rest = &tail[end + 1..];
        } else {
            return Err(BackendError::InvalidRequest("unbalanced '}' in template".into()));
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// Builds an input map from `(key, value)` pairs.
pub fn inputs<const N: usize>(pairs: [(&str, &str); N]) -> BTreeMap<String, String> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}
