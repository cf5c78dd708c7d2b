//! Scripted backends for deterministic tests.
//!
//! A [`Script`] is a set of verbatim lookup tables:
//! `(image digest, prompt)` to a generation, `(premise, hypothesis)` to an
//! entailment verdict, and `(template id, inputs)` to an LLM reply. Lookups
//! are pure and never touch the network; anything unscripted is a
//! [`BackendError::ScriptMiss`].

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{
    entailment_text, BackendError, EntailmentModel, EntailmentVerdict, GenerationRequest, GenerationResult,
    LanguageModel, LlmRequest, TokenLogprob, VisionLanguageModel,
};

/// Matches any image digest.
pub const ANY_IMAGE: &str = "*";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedGeneration {
    /// Hex SHA-256 of the PNG bytes, `"none"` for text-only, or `"*"`.
    pub image_digest: String,
    pub prompt: String,
    /// Restricts the entry to one sampling temperature when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    pub text: String,
    pub logprobs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub top_logprobs: Vec<Vec<f64>>,
}

impl ScriptedGeneration {
    pub fn result(&self) -> Result<GenerationResult, BackendError> {
        if !self.top_logprobs.is_empty() && self.top_logprobs.len() != self.logprobs.len() {
            return Err(BackendError::MalformedResponse(format!(
                "scripted top_logprobs has {} rows for {} tokens",
                self.top_logprobs.len(),
                self.logprobs.len()
            )));
        }
        let tokens = self
            .logprobs
            .iter()
            .enumerate()
            .map(|(i, &logprob)| TokenLogprob {
                logprob,
                top: self.top_logprobs.get(i).cloned().unwrap_or_else(|| vec![logprob]),
            })
            .collect();
        GenerationResult::new(self.text.clone(), tokens)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedEntailment {
    pub premise: String,
    pub hypothesis: String,
    pub forward: bool,
    pub backward: bool,
}

/// Shorthand for many entailment entries: answers in the same class are
/// mutually entailing, answers in different classes are not. Pairs are
/// expanded with [`entailment_text`] under `context`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntailmentGroup {
    #[serde(default)]
    pub context: String,
    pub classes: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedCompletion {
    pub template_id: String,
    pub inputs: BTreeMap<String, String>,
    /// JSON reply; serialized compactly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<Value>,
    /// Verbatim reply text, used instead of `output` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
    /// Reply to the repair retry; defaults to the first reply.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repair_raw: Option<String>,
}

impl ScriptedCompletion {
    pub fn reply(&self, attempt: u32) -> String {
        let first = match (&self.raw, &self.output) {
            (Some(raw), _) => raw.clone(),
            (None, Some(value)) => value.to_string(),
            (None, None) => String::new(),
        };
        if attempt == 0 {
            first
        } else {
            self.repair_raw.clone().unwrap_or(first)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Script {
    #[serde(default)]
    pub generations: Vec<ScriptedGeneration>,
    #[serde(default)]
    pub entailments: Vec<ScriptedEntailment>,
    #[serde(default)]
    pub entailment_groups: Vec<EntailmentGroup>,
    #[serde(default)]
    pub llm: Vec<ScriptedCompletion>,
}

impl Script {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("reading script {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| BackendError::Config(format!("script {}: {e}", path.display())))
    }

    pub fn to_file(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).expect("script serializes"))
    }

    pub fn add_generation(&mut self, image_digest: &str, prompt: &str, text: &str, logprobs: Vec<f64>) {
        self.generations.push(ScriptedGeneration {
            image_digest: image_digest.to_string(),
            prompt: prompt.to_string(),
            temperature: None,
            text: text.to_string(),
            logprobs,
            top_logprobs: Vec::new(),
        });
    }

    /// Like [`Script::add_generation`], restricted to one temperature.
    pub fn add_generation_at(
        &mut self,
        image_digest: &str,
        prompt: &str,
        temperature: f64,
        text: &str,
        logprobs: Vec<f64>,
    ) {
        self.add_generation(image_digest, prompt, text, logprobs);
        self.generations.last_mut().expect("just pushed").temperature = Some(temperature);
    }

    pub fn add_entailment(&mut self, premise: &str, hypothesis: &str, forward: bool, backward: bool) {
        self.entailments.push(ScriptedEntailment {
            premise: premise.to_string(),
            hypothesis: hypothesis.to_string(),
            forward,
            backward,
        });
    }

    /// Declare the equivalence classes among `classes` under a question.
    pub fn add_entailment_group(&mut self, context: &str, classes: Vec<Vec<String>>) {
        self.entailment_groups.push(EntailmentGroup {
            context: context.to_string(),
            classes,
        });
    }

    pub fn add_completion(&mut self, template_id: &str, inputs: BTreeMap<String, String>, output: Value) {
        self.llm.push(ScriptedCompletion {
            template_id: template_id.to_string(),
            inputs,
            output: Some(output),
            raw: None,
            repair_raw: None,
        });
    }

    pub fn add_raw_completion(
        &mut self,
        template_id: &str,
        inputs: BTreeMap<String, String>,
        raw: &str,
        repair_raw: Option<&str>,
    ) {
        self.llm.push(ScriptedCompletion {
            template_id: template_id.to_string(),
            inputs,
            output: None,
            raw: Some(raw.to_string()),
            repair_raw: repair_raw.map(str::to_string),
        });
    }
}

type GenerationKey = (String, String);
type LlmKey = (String, String);

#[derive(Debug, Default)]
struct Index {
    generations: HashMap<GenerationKey, Vec<ScriptedGeneration>>,
    entailments: HashMap<(String, String), EntailmentVerdict>,
    llm: HashMap<LlmKey, ScriptedCompletion>,
}

fn llm_key(template_id: &str, inputs: &BTreeMap<String, String>) -> LlmKey {
    (
        template_id.to_string(),
        serde_json::to_string(inputs).expect("string map serializes"),
    )
}

impl Index {
    fn build(script: &Script) -> Self {
        let mut index = Index::default();
        for g in &script.generations {
            index
                .generations
                .entry((g.image_digest.clone(), g.prompt.clone()))
                .or_default()
                .push(g.clone());
        }
        for group in &script.entailment_groups {
            let members: Vec<(usize, String)> = group
                .classes
                .iter()
                .enumerate()
                .flat_map(|(c, class)| class.iter().map(move |m| (c, entailment_text(&group.context, m))))
                .collect();
            for (ci, a) in &members {
                for (cj, b) in &members {
                    let same = ci == cj;
                    index.entailments.insert(
                        (a.clone(), b.clone()),
                        EntailmentVerdict {
                            forward: same,
                            backward: same,
                        },
                    );
                }
            }
        }
        // Explicit entries win over group expansion.
        for e in &script.entailments {
            index.entailments.insert(
                (e.premise.clone(), e.hypothesis.clone()),
                EntailmentVerdict {
                    forward: e.forward,
                    backward: e.backward,
                },
            );
        }
        for c in &script.llm {
            index.llm.insert(llm_key(&c.template_id, &c.inputs), c.clone());
        }
        index
    }
}

/// In-process scripted backend implementing all three capabilities.
#[derive(Debug, Clone)]
pub struct MockBackend {
    name: String,
    script: Arc<Script>,
    index: Arc<Index>,
}

impl MockBackend {
    pub fn new(script: Script) -> Self {
        Self::named("mock", script)
    }

    pub fn named(name: &str, script: Script) -> Self {
        let index = Index::build(&script);
        Self {
            name: name.to_string(),
            script: Arc::new(script),
            index: Arc::new(index),
        }
    }

    pub fn script(&self) -> &Script {
        &self.script
    }

    pub fn lookup_generation(
        &self,
        digest: &str,
        prompt: &str,
        temperature: f64,
    ) -> Result<&ScriptedGeneration, BackendError> {
        for key_digest in [digest, ANY_IMAGE] {
            let Some(entries) = self.index.generations.get(&(key_digest.to_string(), prompt.to_string())) else {
                continue;
            };
            let exact = entries
                .iter()
                .find(|g| g.temperature.is_some_and(|t| (t - temperature).abs() < 1e-9));
            if let Some(g) = exact.or_else(|| entries.iter().find(|g| g.temperature.is_none())) {
                return Ok(g);
            }
        }
        Err(BackendError::ScriptMiss(format!(
            "generation (image {digest}, prompt {prompt:?}, temperature {temperature})"
        )))
    }

    pub fn lookup_entailment(&self, premise: &str, hypothesis: &str) -> Result<EntailmentVerdict, BackendError> {
        let key = (premise.to_string(), hypothesis.to_string());
        if let Some(v) = self.index.entailments.get(&key) {
            return Ok(*v);
        }
        let swapped = (hypothesis.to_string(), premise.to_string());
        if let Some(v) = self.index.entailments.get(&swapped) {
            return Ok(EntailmentVerdict {
                forward: v.backward,
                backward: v.forward,
            });
        }
        if premise == hypothesis {
            return Ok(EntailmentVerdict {
                forward: true,
                backward: true,
            });
        }
        Err(BackendError::ScriptMiss(format!(
            "entailment ({premise:?}, {hypothesis:?})"
        )))
    }

    pub fn lookup_completion(
        &self,
        template_id: &str,
        inputs: &BTreeMap<String, String>,
    ) -> Result<&ScriptedCompletion, BackendError> {
        self.index
            .llm
            .get(&llm_key(template_id, inputs))
            .ok_or_else(|| BackendError::ScriptMiss(format!("completion {template_id} with inputs {inputs:?}")))
    }
}

#[async_trait]
impl VisionLanguageModel for MockBackend {
    fn backend_id(&self) -> String {
        format!("{}:vlm", self.name)
    }

    async fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        req.validate()?;
        self.lookup_generation(&req.image_digest(), &req.prompt, req.temperature)?
            .result()
    }
}

#[async_trait]
impl EntailmentModel for MockBackend {
    fn backend_id(&self) -> String {
        format!("{}:nli", self.name)
    }

    async fn entailment(&self, premise: &str, hypothesis: &str) -> Result<EntailmentVerdict, BackendError> {
        self.lookup_entailment(premise, hypothesis)
    }
}

#[async_trait]
impl LanguageModel for MockBackend {
    fn backend_id(&self) -> String {
        format!("{}:llm", self.name)
    }

    async fn complete(&self, req: &LlmRequest) -> Result<String, BackendError> {
        Ok(self.lookup_completion(&req.template_id, &req.inputs)?.reply(req.attempt))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test]
    async fn scripted_generation_lookup() {
        let png = vec![1u8, 2, 3];
        let digest = crate::perturb::image_digest(Some(&png));
        let mut script = Script::default();
        script.add_generation(&digest, "Q?", "pleural effusion", vec![-0.1, -0.2]);
        let vlm = MockBackend::new(script);
        let out = vlm.generate(&GenerationRequest::new(Some(png.clone()), "Q?", 1.0)).await.unwrap();
        assert_eq!(out.text, "pleural effusion");
        assert_eq!(out.logprobs(), vec![-0.1, -0.2]);
        let miss = vlm.generate(&GenerationRequest::new(Some(png), "other?", 1.0)).await;
        assert!(matches!(miss, Err(BackendError::ScriptMiss(_))));
    }

    #[tokio::test]
    async fn temperature_specific_entries_take_precedence() {
        let mut script = Script::default();
        script.add_generation(ANY_IMAGE, "Q?", "sampled", vec![-0.5]);
        script.generations.push(ScriptedGeneration {
            image_digest: ANY_IMAGE.into(),
            prompt: "Q?".into(),
            temperature: Some(0.1),
            text: "greedy".into(),
            logprobs: vec![-0.01],
            top_logprobs: vec![],
        });
        let vlm = MockBackend::new(script);
        let low = vlm.generate(&GenerationRequest::new(None, "Q?", 0.1)).await.unwrap();
        let high = vlm.generate(&GenerationRequest::new(None, "Q?", 1.0)).await.unwrap();
        assert_eq!((low.text.as_str(), high.text.as_str()), ("greedy", "sampled"));
    }

    #[tokio::test]
    async fn groups_expand_to_pairwise_verdicts() {
        let mut script = Script::default();
        script.add_entailment_group("Q", vec![vec!["a".into(), "a2".into()], vec!["b".into()]]);
        let nli = MockBackend::new(script);
        let t = |s| entailment_text("Q", s);
        assert_eq!(
            nli.entailment(&t("a"), &t("a2")).await.unwrap(),
            EntailmentVerdict { forward: true, backward: true }
        );
        assert_eq!(
            nli.entailment(&t("a"), &t("b")).await.unwrap(),
            EntailmentVerdict { forward: false, backward: false }
        );
    }

    #[tokio::test]
    async fn mocks_are_pure() {
        let mut script = Script::default();
        script.add_generation(ANY_IMAGE, "Q", "x", vec![-1.0]);
        let vlm = MockBackend::new(script);
        let req = GenerationRequest::new(None, "Q", 1.0);
        let a = vlm.generate(&req).await.unwrap();
        let b = vlm.generate(&req).await.unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn script_file_roundtrip() {
        let mut script = Script::default();
        script.add_generation("none", "Q", "x", vec![-1.0]);
        script.add_entailment("p", "h", true, false);
        script.add_completion("t@v1", BTreeMap::new(), serde_json::json!({"a": 1}));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("script.json");
        script.to_file(&path).unwrap();
        assert_eq!(Script::from_file(&path).unwrap(), script);
    }
}
