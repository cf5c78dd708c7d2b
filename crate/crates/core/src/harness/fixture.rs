//! Self-contained scripted datasets for demos and end-to-end tests.
//!
//! The VQA fixture has ten records: six answered correctly, two
//! hallucinated with full confidence (the answer ignores the image, so it
//! survives distortion unchanged) and two hallucinated with visible
//! uncertainty. Plain semantic entropy cannot tell the overconfident ones
//! from the correct ones; the vision-conditioned score can.

use std::path::{Path, PathBuf};

use serde_json::json;

use super::config::RunConfig;
use super::dataset::{DatasetRecord, Task};
use super::HarnessError;
use crate::alfa::{format_claims, format_facts, AtomicFact, FactKind};
use crate::backends::mock::Script;
use crate::backends::templates::{inputs, DECOMPOSE_CLAIMS, DECOMPOSE_REFERENCE, MATCH_CLAIMS, VERIFICATION_QUESTION};
use crate::longform::{claim_seed, AtomicClaim, RESPONSE_TEMPERATURE};
use crate::perturb::{image_digest, load_image, ImageTensor};
use crate::seed::record_seed;
use crate::vcse::{script_branches, VcseConfig};

/// How a scripted record behaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Behavior {
    /// Confident, correct, and the answer changes once the image is destroyed.
    Grounded,
    /// Confident, wrong, and unchanged by distortion.
    Overconfident,
    /// Wrong, split evenly between two answers on both branches.
    Uncertain,
}

impl Behavior {
    pub fn hallucinated(self) -> bool {
        self != Behavior::Grounded
    }
}

pub const VQA_BEHAVIORS: [Behavior; 10] = [
    Behavior::Grounded,
    Behavior::Grounded,
    Behavior::Grounded,
    Behavior::Grounded,
    Behavior::Grounded,
    Behavior::Grounded,
    Behavior::Overconfident,
    Behavior::Overconfident,
    Behavior::Uncertain,
    Behavior::Uncertain,
];

#[derive(Debug, Clone)]
pub struct Fixture {
    pub dataset: PathBuf,
    pub script_path: PathBuf,
    pub config_path: PathBuf,
    pub config: RunConfig,
    pub script: Script,
    pub records: Vec<DatasetRecord>,
}

type Answers = Vec<(String, Vec<f64>)>;

/// Report text, reference, (claim, verification question, behavior) triples
/// and the verdict every claim receives.
type ReportCase<'a> = (&'a str, &'a str, &'a [(&'a str, &'a str, Behavior)], &'a str);

fn repeat(text: &str, lp: f64, n: usize) -> Answers {
    vec![(text.to_string(), vec![lp]); n]
}

/// Per-branch answers for a behavior, with `yes` the audited answer.
fn branch_answers(b: Behavior, m: usize) -> (Answers, Answers) {
    match b {
        Behavior::Grounded => (repeat("yes", -0.05, m), repeat("no", -0.05, m)),
        Behavior::Overconfident => {
            // The second class is sampled once but carries no mass.
            let mut a = repeat("yes", -0.05, m - 1);
            a.push(("no".into(), vec![-1000.0]));
            (a.clone(), a)
        }
        Behavior::Uncertain => {
            let mut a = repeat("yes", -0.7, m / 2);
            a.extend(repeat("no", -0.7, m - m / 2));
            (a.clone(), a)
        }
    }
}

fn io(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io(format!("{}: {e}", path.display()))
}

/// Write image `i` and return it as the pipeline will load it.
fn write_image(dir: &Path, name: &str, seed: u64) -> Result<(PathBuf, ImageTensor), HarnessError> {
    let path = dir.join(name);
    let tensor = ImageTensor::noise_pattern(32, 32, 1, seed).map_err(|e| io(&path, e))?;
    std::fs::write(&path, tensor.to_png()).map_err(|e| io(&path, e))?;
    let loaded = load_image(&path).map_err(|e| io(&path, e))?;
    Ok((path, loaded))
}

fn vcse_err(e: crate::vcse::VcseError) -> HarnessError {
    HarnessError::Config(format!("fixture: {e}"))
}

fn finish(dir: &Path, config: RunConfig, script: Script, records: Vec<DatasetRecord>) -> Result<Fixture, HarnessError> {
    let script_path = dir.join("script.json");
    script.to_file(&script_path).map_err(|e| io(&script_path, e))?;
    let dataset = dir.join("dataset.jsonl");
    let lines: Vec<String> = records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.image_path = r.image_path.strip_prefix(dir).map(Path::to_path_buf).unwrap_or(r.image_path);
            serde_json::to_string(&r).expect("record serializes")
        })
        .collect();
    std::fs::write(&dataset, lines.join("\n") + "\n").map_err(|e| io(&dataset, e))?;
    let mut config = config;
    config.backends.mock_script = Some(PathBuf::from("script.json"));
    let config_path = dir.join("config.toml");
    std::fs::write(&config_path, config.to_toml()).map_err(|e| io(&config_path, e))?;
    config.backends.mock_script = Some(script_path.clone());
    Ok(Fixture {
        dataset,
        script_path,
        config_path,
        config,
        script,
        records,
    })
}

fn alfa_script(script: &mut Script, response: &str, claims: &[String], instruction: &str, reference: &str, facts: &[AtomicFact], verdicts: serde_json::Value) {
    script.add_completion(DECOMPOSE_CLAIMS, inputs([("text", response)]), json!({ "claims": claims }));
    script.add_completion(
        DECOMPOSE_REFERENCE,
        inputs([("instruction", instruction), ("reference", reference)]),
        json!({ "facts": facts }),
    );
    script.add_completion(
        MATCH_CLAIMS,
        inputs([("instruction", instruction), ("facts", &format_facts(facts)), ("claims", &format_claims(claims))]),
        json!({ "judgments": verdicts }),
    );
}

/// Write the ten-record VQA fixture (images, dataset, script, config) into
/// `dir`, scripted for the default configuration with run seed `seed`.
pub fn write_vqa_fixture(dir: &Path, seed: u64) -> Result<Fixture, HarnessError> {
    let config = RunConfig {
        seed,
        backends: super::config::BackendsConfig {
            mock_script: Some(PathBuf::from("script.json")),
            ..Default::default()
        },
        ..RunConfig::default()
    };
    let cfg: VcseConfig = config.vcse_config();
    let mut script = Script::default();
    let mut records = Vec::new();
    for (i, behavior) in VQA_BEHAVIORS.into_iter().enumerate() {
        let id = format!("q{i:02}");
        let (path, image) = write_image(dir, &format!("{id}.png"), 100 + i as u64)?;
        let question = format!("Is there a pleural effusion in study {i}?");
        let reference = if behavior.hallucinated() { "No." } else { "Yes." };
        script.add_generation_at(
            &image_digest(Some(&image.to_png())),
            &question,
            RESPONSE_TEMPERATURE,
            "yes",
            vec![if behavior == Behavior::Uncertain { -0.7 } else { -0.05 }],
        );
        script.add_entailment_group(&question, vec![vec!["yes".into()], vec!["no".into()]]);
        let (orig, dist) = branch_answers(behavior, cfg.spd.samples);
        script_branches(&mut script, &image, &question, &cfg, record_seed(seed, &id), &orig, &dist).map_err(vcse_err)?;

        let claims = vec!["there is a pleural effusion".to_string()];
        let fact_text = if behavior.hallucinated() { "there is no pleural effusion" } else { "there is a pleural effusion" };
        let facts = vec![AtomicFact { text: fact_text.into(), kind: FactKind::Instruction }];
        let verdict = if behavior.hallucinated() {
            json!([{"claim_index": 0, "verdict": "hallucinated", "fact_index": null}])
        } else {
            json!([{"claim_index": 0, "verdict": "matched", "fact_index": 0}])
        };
        alfa_script(&mut script, "yes", &claims, &question, reference, &facts, verdict);
        records.push(DatasetRecord {
            id,
            image_path: path,
            task: Task::Vqa,
            question,
            reference: reference.into(),
        });
    }
    finish(dir, config, script, records)
}

/// A two-record report-generation fixture: one report whose claims are all
/// grounded and correct, one whose single claim is an overconfident
/// hallucination.
pub fn write_vrg_fixture(dir: &Path, seed: u64) -> Result<Fixture, HarnessError> {
    let config = RunConfig {
        seed,
        backends: super::config::BackendsConfig {
            mock_script: Some(PathBuf::from("script.json")),
            ..Default::default()
        },
        ..RunConfig::default()
    };
    let cfg = config.vcse_config();
    let instruction = "Describe the findings.";
    let mut script = Script::default();
    let mut records = Vec::new();
    let cases: [ReportCase; 2] = [
        (
            "Heart enlarged. No effusion.",
            "Cardiomegaly. No pleural effusion.",
            &[
                ("the heart is enlarged", "Is the heart enlarged?", Behavior::Grounded),
                ("there is no pleural effusion", "Is there a pleural effusion?", Behavior::Grounded),
            ],
            "matched",
        ),
        (
            "Right lung mass.",
            "Clear lungs.",
            &[("there is a mass in the right lung", "Is there a mass in the right lung?", Behavior::Overconfident)],
            "hallucinated",
        ),
    ];
    for (i, (report, reference, claim_specs, verdict)) in cases.into_iter().enumerate() {
        let id = format!("g{i:02}");
        let (path, image) = write_image(dir, &format!("{id}.png"), 200 + i as u64)?;
        let rseed = record_seed(seed, &id);
        script.add_generation_at(
            &image_digest(Some(&image.to_png())),
            instruction,
            RESPONSE_TEMPERATURE,
            report,
            vec![-0.1; 4],
        );
        let claims: Vec<String> = claim_specs.iter().map(|c| c.0.to_string()).collect();
        for (claim, question, behavior) in claim_specs {
            script.add_completion(VERIFICATION_QUESTION, inputs([("claim", claim)]), json!({ "question": question }));
            // The claim itself reads as a "yes" to its own question.
            script.add_entailment_group(question, vec![vec!["yes".into(), claim.to_string()], vec!["no".into()]]);
            let c = AtomicClaim { index: 0, text: claim.to_string(), source_span: None };
            let (orig, dist) = branch_answers(*behavior, cfg.spd.samples);
            script_branches(&mut script, &image, question, &cfg, claim_seed(rseed, &c), &orig, &dist).map_err(vcse_err)?;
        }
        let facts: Vec<AtomicFact> = reference
            .split(". ")
            .map(|f| AtomicFact { text: f.trim_end_matches('.').to_string(), kind: FactKind::Instruction })
            .collect();
        let judgments: Vec<_> = (0..claims.len())
            .map(|k| {
                let fact = (verdict == "matched").then_some(k.min(facts.len() - 1));
                json!({"claim_index": k, "verdict": verdict, "fact_index": fact})
            })
            .collect();
        alfa_script(&mut script, report, &claims, instruction, reference, &facts, json!(judgments));
        records.push(DatasetRecord {
            id,
            image_path: path,
            task: Task::Vrg,
            question: instruction.into(),
            reference: reference.into(),
        });
    }
    finish(dir, config, script, records)
}
