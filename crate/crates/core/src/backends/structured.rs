//! Templated LLM calls whose replies must parse as a typed JSON document.

use std::collections::BTreeMap;

use serde::de::DeserializeOwned;

use super::templates::{TemplateRegistry, REPAIR_JSON};
use super::{BackendError, LanguageModel, LlmRequest};

/// Strip a surrounding Markdown code fence, if any.
fn unfence(raw: &str) -> &str {
    let trimmed = raw.trim();
    let Some(body) = trimmed.strip_prefix("```") else {
        return trimmed;
    };
    let body = body.strip_prefix("json").unwrap_or(body);
    body.strip_suffix("```").unwrap_or(body).trim()
}

fn parse<T, V>(raw: &str, validate: &V) -> Result<T, String>
where
    T: DeserializeOwned,
    V: Fn(&T) -> Result<(), String>,
{
    let value: T = serde_json::from_str(unfence(raw)).map_err(|e| e.to_string())?;
    validate(&value)?;
    Ok(value)
}

/// Render `template_id`, call the LLM and parse its reply as `T`. A reply
/// that fails to parse or to validate gets exactly one repair attempt.
pub async fn llm_structured<T, V>(
    llm: &dyn LanguageModel,
    templates: &TemplateRegistry,
    template_id: &str,
    inputs: BTreeMap<String, String>,
    validate: V,
) -> Result<T, BackendError>
where
    T: DeserializeOwned,
    V: Fn(&T) -> Result<(), String>,
{
    if let Some((key, _)) = inputs.iter().find(|(_, v)| v.trim().is_empty()) {
        return Err(BackendError::SchemaViolation(format!("empty input: {key}")));
    }
    let prompt = templates.render(template_id, &inputs)?;
    let first = LlmRequest {
        template_id: template_id.to_string(),
        inputs: inputs.clone(),
        prompt: prompt.clone(),
        attempt: 0,
    };
    let raw = llm.complete(&first).await?;
    let first_error = match parse(&raw, &validate) {
        Ok(value) => return Ok(value),
        Err(e) => e,
    };
    log::debug!("{template_id}: unusable reply ({first_error}), requesting repair");

    let mut repair_inputs = BTreeMap::new();
    repair_inputs.insert("prompt".to_string(), prompt);
    repair_inputs.insert("output".to_string(), raw);
    let repair = LlmRequest {
        template_id: template_id.to_string(),
        inputs,
        prompt: templates.render(REPAIR_JSON, &repair_inputs)?,
        attempt: 1,
    };
    let raw = llm.complete(&repair).await?;
    parse(&raw, &validate).map_err(|e| {
        BackendError::SchemaViolation(format!("{template_id}: {e} (first attempt: {first_error})"))
    })
}

/// Repair prompt the pipeline sends after an unusable first reply.
pub fn repair_prompt(templates: &TemplateRegistry, prompt: &str, output: &str) -> Result<String, BackendError> {
    let mut inputs = BTreeMap::new();
    inputs.insert("prompt".to_string(), prompt.to_string());
    inputs.insert("output".to_string(), output.to_string());
    templates.render(REPAIR_JSON, &inputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{MockBackend, Script};
    use crate::backends::templates::{inputs, DECOMPOSE_CLAIMS};
    use serde::Deserialize;
    use serde_json::json;

    #[derive(Debug, Deserialize, PartialEq)]
    struct Claims {
        claims: Vec<String>,
    }

    fn ok(_: &Claims) -> Result<(), String> {
        Ok(())
    }

    #[tokio::test]
    async fn scripted_decomposition() {
        let mut script = Script::default();
        let text = "There is cardiomegaly and effusion.";
        script.add_completion(
            DECOMPOSE_CLAIMS,
            inputs([("text", text)]),
            json!({"claims": ["there is cardiomegaly", "there is effusion"]}),
        );
        let llm = MockBackend::new(script);
        let reg = TemplateRegistry::builtin();
        let out: Claims = llm_structured(&llm, &reg, DECOMPOSE_CLAIMS, inputs([("text", text)]), ok)
            .await
            .unwrap();
        assert_eq!(out.claims, vec!["there is cardiomegaly", "there is effusion"]);
    }

    #[tokio::test]
    async fn fenced_reply_parses_and_repair_is_used_once() {
        let mut script = Script::default();
        script.add_raw_completion(DECOMPOSE_CLAIMS, inputs([("text", "a")]), "```json\n{\"claims\": [\"a\"]}\n```", None);
        script.add_raw_completion(DECOMPOSE_CLAIMS, inputs([("text", "b")]), "not json", Some("{\"claims\": [\"b\"]}"));
        let llm = MockBackend::new(script);
        let reg = TemplateRegistry::builtin();
        let a: Claims = llm_structured(&llm, &reg, DECOMPOSE_CLAIMS, inputs([("text", "a")]), ok).await.unwrap();
        assert_eq!(a.claims, vec!["a"]);
        let b: Claims = llm_structured(&llm, &reg, DECOMPOSE_CLAIMS, inputs([("text", "b")]), ok).await.unwrap();
        assert_eq!(b.claims, vec!["b"]);
    }

    #[tokio::test]
    async fn malformed_twice_is_schema_violation() {
        let mut script = Script::default();
        script.add_raw_completion(DECOMPOSE_CLAIMS, inputs([("text", "x")]), "{oops", None);
        let llm = MockBackend::new(script);
        let reg = TemplateRegistry::builtin();
        let err = llm_structured::<Claims, _>(&llm, &reg, DECOMPOSE_CLAIMS, inputs([("text", "x")]), ok)
            .await
            .unwrap_err();
        assert!(matches!(err, BackendError::SchemaViolation(_)));
    }

    #[tokio::test]
    async fn validator_failure_triggers_repair() {
        let mut script = Script::default();
        script.add_completion(DECOMPOSE_CLAIMS, inputs([("text", "x")]), json!({"claims": []}));
        let llm = MockBackend::new(script);
        let reg = TemplateRegistry::builtin();
        let nonempty = |c: &Claims| if c.claims.is_empty() { Err("no claims".to_string()) } else { Ok(()) };
        let err = llm_structured::<Claims, _>(&llm, &reg, DECOMPOSE_CLAIMS, inputs([("text", "x")]), nonempty)
            .await
            .unwrap_err();
        assert!(err.to_string().contains("no claims"));
    }

    #[tokio::test]
    async fn empty_input_rejected_before_any_call() {
        let llm = MockBackend::new(Script::default());
        let reg = TemplateRegistry::builtin();
        let err = llm_structured::<Claims, _>(&llm, &reg, DECOMPOSE_CLAIMS, inputs([("text", "  ")]), ok)
            .await
            .unwrap_err();
        match err {
            BackendError::SchemaViolation(msg) => assert!(msg.contains("empty input")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
