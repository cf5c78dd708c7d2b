//! Orchestration of a full run: label, score and persist every record.

use std::collections::{BTreeMap, HashSet};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use futures::{stream, StreamExt};
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::dataset::{DatasetRecord, Task};
use super::record::{read_records, RunRecord};
use super::HarnessError;
use crate::alfa::{label_claims, label_response, label_sample, LabelEntry};
use crate::backends::http::connect;
use crate::backends::mock::{MockBackend, Script};
use crate::backends::templates::TemplateRegistry;
use crate::backends::{EntailmentModel, GenerationRequest, LanguageModel, VisionLanguageModel};
use crate::baselines::{
    auxiliary_responses, avg_ent, avg_prob, cross_check_score, max_ent, max_prob, radflag_score, semantic_entropy,
    Method, UncertaintyScore,
};
use crate::longform::{decompose_report, mean, score_claims, RESPONSE_TEMPERATURE};
use crate::perturb::load_image;
use crate::seed::record_seed;
use crate::semantic::GenSample;
use crate::vcse::{compute_vse, VcseConfig};

pub const RECORDS_FILE: &str = "records.jsonl";
pub const LOCK_FILE: &str = "config.lock.json";

/// The model backends a run talks to.
#[derive(Clone)]
pub struct Backends {
    pub vlm: Arc<dyn VisionLanguageModel>,
    pub nli: Arc<dyn EntailmentModel>,
    pub llm: Arc<dyn LanguageModel>,
    pub auxiliary: Vec<Arc<dyn VisionLanguageModel>>,
    pub templates: Arc<TemplateRegistry>,
}

impl Backends {
    /// All three capabilities served by one in-process mock.
    pub fn mock(script: Script) -> Self {
        let mock = Arc::new(MockBackend::new(script));
        Self {
            vlm: mock.clone(),
            nli: mock.clone(),
            llm: mock,
            auxiliary: Vec::new(),
            templates: Arc::new(TemplateRegistry::builtin()),
        }
    }

    pub fn from_config(cfg: &RunConfig) -> Result<Self, HarnessError> {
        let b = &cfg.backends;
        let templates = Arc::new(TemplateRegistry::builtin());
        let config_err = |e: crate::BackendError| HarnessError::Config(e.to_string());
        let mut out = match &b.mock_script {
            Some(path) => Self::mock(Script::from_file(path).map_err(config_err)?),
            None => {
                let http = |c: &Option<_>, what: &str| match c {
                    Some(c) => connect(c, templates.clone()).map(Arc::new).map_err(config_err),
                    None => Err(HarnessError::Config(format!("backend {what} is not configured"))),
                };
                Self {
                    vlm: http(&b.vlm, "vlm")?,
                    nli: http(&b.nli, "nli")?,
                    llm: http(&b.llm, "llm")?,
                    auxiliary: Vec::new(),
                    templates: templates.clone(),
                }
            }
        };
        for aux in &b.auxiliary {
            out.auxiliary.push(Arc::new(connect(aux, templates.clone()).map_err(config_err)?));
        }
        Ok(out)
    }

    /// Check every backend answers before any record is processed.
    pub async fn probe(&self) -> Result<(), HarnessError> {
        let boot = |what: &str, e: crate::BackendError| HarnessError::Bootstrap(format!("{what}: {e}"));
        self.vlm.probe().await.map_err(|e| boot("vlm", e))?;
        self.nli.probe().await.map_err(|e| boot("nli", e))?;
        self.llm.probe().await.map_err(|e| boot("llm", e))?;
        for (i, aux) in self.auxiliary.iter().enumerate() {
            aux.probe().await.map_err(|e| boot(&format!("auxiliary {i}"), e))?;
        }
        Ok(())
    }

    pub fn ids(&self) -> BTreeMap<String, String> {
        let mut ids = BTreeMap::from([
            ("vlm".to_string(), self.vlm.backend_id()),
            ("nli".to_string(), self.nli.backend_id()),
            ("llm".to_string(), self.llm.backend_id()),
        ]);
        for (i, aux) in self.auxiliary.iter().enumerate() {
            ids.insert(format!("auxiliary.{i}"), aux.backend_id());
        }
        ids
    }
}

/// Contents of `config.lock.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigLock {
    pub config: RunConfig,
    pub config_hash: String,
    pub dataset: String,
    pub templates: BTreeMap<String, String>,
}

impl ConfigLock {
    pub fn read(dir: &Path) -> Result<Self, HarnessError> {
        let path = dir.join(LOCK_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RunSummary {
    pub processed: usize,
    pub skipped: usize,
    pub failed: usize,
}

/// Dataset name used in reports: the config's override or the file stem.
pub fn dataset_name(cfg: &RunConfig, dataset_path: &Path) -> String {
    cfg.dataset_name.clone().unwrap_or_else(|| {
        dataset_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    })
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

fn io_err(path: &Path, e: std::io::Error) -> HarnessError {
    HarnessError::Io(format!("{}: {e}", path.display()))
}

fn prepare_dir(out_dir: &Path, lock: &ConfigLock) -> Result<(), HarnessError> {
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let path = out_dir.join(LOCK_FILE);
    if path.exists() {
        let existing = ConfigLock::read(out_dir)?;
        if existing.config_hash != lock.config_hash {
            return Err(HarnessError::Config(format!(
                "{} was created with config {} but this run uses {}",
                out_dir.display(),
                existing.config_hash,
                lock.config_hash
            )));
        }
        return Ok(());
    }
    let text = serde_json::to_string_pretty(lock).expect("lock serializes");
    std::fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))
}

/// Process every record of `task` (or all tasks) into `out_dir`. Records
/// already completed there are skipped, so an interrupted run can resume.
pub async fn run(
    records: &[DatasetRecord],
    cfg: &RunConfig,
    backends: &Backends,
    dataset: &str,
    out_dir: &Path,
    task: Option<Task>,
) -> Result<RunSummary, HarnessError> {
    cfg.validate()?;
    let config_hash = cfg.config_hash(&backends.templates);
    let lock = ConfigLock {
        config: cfg.clone(),
        config_hash: config_hash.clone(),
        dataset: dataset.to_string(),
        templates: backends.templates.fingerprint(),
    };
    prepare_dir(out_dir, &lock)?;
    backends.probe().await?;

    let records_path = out_dir.join(RECORDS_FILE);
    let done: HashSet<String> = read_records(&records_path)?
        .into_iter()
        .filter(RunRecord::is_complete)
        .map(|r| r.id)
        .collect();
    let selected: Vec<&DatasetRecord> = records.iter().filter(|r| task.is_none_or(|t| r.task == t)).collect();
    if selected.is_empty() {
        return Err(HarnessError::Dataset(super::DatasetError::Empty));
    }
    let todo: Vec<&DatasetRecord> = selected.iter().copied().filter(|r| !done.contains(&r.id)).collect();
    let mut summary = RunSummary {
        skipped: selected.len() - todo.len(),
        ..RunSummary::default()
    };

    let mut methods: Vec<Method> = cfg.methods.clone();
    if backends.auxiliary.is_empty() && methods.contains(&Method::CrossCheck) {
        log::info!("no auxiliary backend configured; CrossCheck disabled");
        methods.retain(|&m| m != Method::CrossCheck);
    }
    let ctx = RecordContext {
        cfg,
        vcse: cfg.vcse_config(),
        backends,
        config_hash: &config_hash,
        methods: &methods,
        backend_ids: backends.ids(),
    };

    drop_torn_tail(&records_path)?;
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&records_path)
        .map_err(|e| io_err(&records_path, e))?;
    let mut results = stream::iter(todo).map(|rec| ctx.process(rec)).buffer_unordered(cfg.workers);
    while let Some(record) = results.next().await {
        if let Some(e) = &record.error {
            log::error!("record {}: {e}", record.id);
            summary.failed += 1;
        }
        for (step, e) in &record.step_errors {
            log::warn!("record {} step {step}: {e}", record.id);
        }
        let line = serde_json::to_string(&record).expect("record serializes");
        writeln!(file, "{line}")
            .and_then(|_| file.flush())
            .map_err(|e| io_err(&records_path, e))?;
        summary.processed += 1;
    }
    Ok(summary)
}

/// Cut a partial last line left by an interrupted run, so appended records
/// start on a line of their own.
fn drop_torn_tail(path: &Path) -> Result<(), HarnessError> {
    let body = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(io_err(path, e)),
    };
    if body.is_empty() || body.ends_with(b"\n") {
        return Ok(());
    }
    let keep = body.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let file = OpenOptions::new().write(true).open(path).map_err(|e| io_err(path, e))?;
    file.set_len(keep as u64).map_err(|e| io_err(path, e))
}

struct RecordContext<'a> {
    cfg: &'a RunConfig,
    vcse: VcseConfig,
    backends: &'a Backends,
    config_hash: &'a str,
    methods: &'a [Method],
    backend_ids: BTreeMap<String, String>,
}

impl RecordContext<'_> {
    fn enabled(&self, m: Method) -> bool {
        self.methods.contains(&m)
    }

    async fn process(&self, rec: &DatasetRecord) -> RunRecord {
        let mut out = RunRecord {
            id: rec.id.clone(),
            task: rec.task,
            config_hash: self.config_hash.to_string(),
            seed: record_seed(self.cfg.seed, &rec.id),
            response: None,
            scores: Vec::new(),
            label: None,
            alfa: None,
            vse: None,
            claims: Vec::new(),
            step_errors: BTreeMap::new(),
            error: None,
            template_hashes: self.backends.templates.fingerprint(),
            backend_ids: self.backend_ids.clone(),
            started_at: now(),
            finished_at: String::new(),
        };
        if let Err(e) = self.fill(rec, &mut out).await {
            out.error = Some(e);
        }
        out.scores.sort_by_key(|s| s.method);
        out.finished_at = now();
        out
    }

    fn push(out: &mut RunRecord, method: Method, value: Result<f64, String>) {
        match value {
            Ok(v) => out.scores.push(UncertaintyScore::new(method, v)),
            Err(e) => {
                out.step_errors.insert(method.name().to_string(), e);
            }
        }
    }

    async fn fill(&self, rec: &DatasetRecord, out: &mut RunRecord) -> Result<(), String> {
        let b = self.backends;
        let image = load_image(&rec.image_path).map_err(|e| e.to_string())?;
        let png = image.to_png();
        let mut req = GenerationRequest::new(Some(png.clone()), &rec.question, RESPONSE_TEMPERATURE);
        req.max_tokens = self.cfg.max_tokens;
        req.top_logprobs = self.cfg.top_logprobs;
        let response = b.vlm.generate(&req).await.map_err(|e| format!("response: {e}"))?;
        out.response = Some(response.text.clone());

        let sample = GenSample::from_result(&response, 0);
        let token_methods: [(Method, fn(&GenSample) -> _); 4] = [
            (Method::AvgProb, avg_prob),
            (Method::MaxProb, max_prob),
            (Method::AvgEnt, avg_ent),
            (Method::MaxEnt, max_ent),
        ];
        for (m, f) in token_methods {
            if self.enabled(m) {
                Self::push(out, m, f(&sample).map_err(|e| e.to_string()));
            }
        }

        match rec.task {
            Task::Vqa => self.fill_vqa(rec, &image, &png, &response.text, out).await,
            Task::Vrg => self.fill_vrg(rec, &image, &response.text, out).await,
        }
    }

    async fn fill_vqa(
        &self,
        rec: &DatasetRecord,
        image: &crate::perturb::ImageTensor,
        png: &[u8],
        response: &str,
        out: &mut RunRecord,
    ) -> Result<(), String> {
        let b = self.backends;
        let q = rec.question.as_str();
        let (alfa, vse) = tokio::join!(
            label_response(response, &rec.reference, q, b.llm.as_ref(), &b.templates),
            compute_vse(image, q, &self.vcse, out.seed, b.vlm.as_ref(), b.nli.as_ref()),
        );
        match alfa {
            Ok(a) => {
                out.label = Some(a.label.clone());
                out.alfa = Some(a);
            }
            Err(e) => {
                out.step_errors.insert("alfa".into(), e.to_string());
            }
        }
        match vse {
            Ok(o) => {
                if self.enabled(Method::UniVrse) {
                    Self::push(out, Method::UniVrse, Ok(o.score.value));
                }
                if self.enabled(Method::Se) {
                    Self::push(out, Method::Se, semantic_entropy(&o.original.distribution).map_err(|e| e.to_string()));
                }
                if self.enabled(Method::RadFlag) {
                    let v = radflag_score(response, &o.original.samples, b.nli.as_ref(), q).await;
                    Self::push(out, Method::RadFlag, v.map_err(|e| e.to_string()));
                }
                out.vse = Some(Box::new(o));
            }
            Err(e) => {
                out.step_errors.insert("vse".into(), e.to_string());
            }
        }
        if self.enabled(Method::CrossCheck) {
            let v = async {
                let others = auxiliary_responses(&b.auxiliary, png, q, RESPONSE_TEMPERATURE).await?;
                cross_check_score(response, &others, b.nli.as_ref(), q).await
            }
            .await;
            Self::push(out, Method::CrossCheck, v.map_err(|e| e.to_string()));
        }
        Ok(())
    }

    async fn fill_vrg(
        &self,
        rec: &DatasetRecord,
        image: &crate::perturb::ImageTensor,
        response: &str,
        out: &mut RunRecord,
    ) -> Result<(), String> {
        let b = self.backends;
        let claims = decompose_report(response, b.llm.as_ref(), &b.templates)
            .await
            .map_err(|e| format!("decompose: {e}"))?;
        let (alfa, items) = tokio::join!(
            label_claims(claims.clone(), &rec.reference, &rec.question, b.llm.as_ref(), &b.templates),
            score_claims(image, &claims, &self.vcse, out.seed, b.vlm.as_ref(), b.nli.as_ref(), b.llm.as_ref(), &b.templates),
        );
        match alfa {
            Ok(a) => {
                out.label = Some(a.label.clone());
                out.alfa = Some(a);
            }
            Err(e) => {
                out.step_errors.insert("alfa".into(), e.to_string());
            }
        }
        for item in &items {
            if let Some(e) = &item.error {
                out.step_errors.insert(format!("claim {}", item.claim.index), e.clone());
            }
        }
        let none = || "no claim could be scored".to_string();
        let scored: Vec<_> = items.iter().filter_map(|i| i.outcome.as_ref().map(|o| (i, o))).collect();
        if self.enabled(Method::UniVrse) {
            Self::push(out, Method::UniVrse, mean(scored.iter().map(|(_, o)| o.score.value)).ok_or_else(none));
        }
        if self.enabled(Method::Se) {
            let se: Result<Vec<f64>, _> = scored.iter().map(|(_, o)| semantic_entropy(&o.original.distribution)).collect();
            let v = se.map_err(|e| e.to_string()).and_then(|v| mean(v.into_iter()).ok_or_else(none));
            Self::push(out, Method::Se, v);
        }
        if self.enabled(Method::RadFlag) {
            let mut values = Vec::new();
            for (item, o) in &scored {
                let q = item.question.as_deref().unwrap_or_default();
                match radflag_score(&item.claim.text, &o.original.samples, b.nli.as_ref(), q).await {
                    Ok(v) => values.push(v),
                    Err(e) => {
                        out.step_errors.insert(format!("RadFlag claim {}", item.claim.index), e.to_string());
                    }
                }
            }
            Self::push(out, Method::RadFlag, mean(values.into_iter()).ok_or_else(none));
        }
        if self.enabled(Method::CrossCheck) {
            let png = image.to_png();
            let mut values = Vec::new();
            for item in items.iter().filter(|i| i.question.is_some()) {
                let q = item.question.as_deref().unwrap_or_default();
                let v = async {
                    let others = auxiliary_responses(&b.auxiliary, &png, q, RESPONSE_TEMPERATURE).await?;
                    cross_check_score(&item.claim.text, &others, b.nli.as_ref(), q).await
                }
                .await;
                match v {
                    Ok(v) => values.push(v),
                    Err(e) => {
                        out.step_errors.insert(format!("CrossCheck claim {}", item.claim.index), e.to_string());
                    }
                }
            }
            Self::push(out, Method::CrossCheck, mean(values.into_iter()).ok_or_else(none));
        }
        out.claims = items;
        Ok(())
    }
}

/// Outcome of labeling a dataset without scoring it.
#[derive(Debug, Default)]
pub struct LabelRun {
    pub entries: Vec<LabelEntry>,
    pub failures: Vec<(String, String)>,
}

/// ALFA-label every record; entries are sorted by id.
pub async fn label_dataset(records: &[DatasetRecord], workers: usize, backends: &Backends) -> LabelRun {
    let ids = backends.ids();
    let b = backends;
    let mut results: Vec<_> = stream::iter(records)
        .map(|rec| {
            let ids = ids.clone();
            async move {
                let res = async {
                    let image = load_image(&rec.image_path).map_err(|e| e.to_string())?;
                    let (response, outcome) = label_sample(
                        &image.to_png(),
                        &rec.question,
                        &rec.reference,
                        b.vlm.as_ref(),
                        b.llm.as_ref(),
                        &b.templates,
                    )
                    .await
                    .map_err(|e| e.to_string())?;
                    Ok::<_, String>(LabelEntry::new(&rec.id, &response.text, &outcome, &b.templates, ids))
                }
                .await;
                (rec.id.clone(), res)
            }
        })
        .buffer_unordered(workers.max(1))
        .collect()
        .await;
    results.sort_by(|a, b| a.0.cmp(&b.0));
    let mut out = LabelRun::default();
    for (id, res) in results {
        match res {
            Ok(e) => out.entries.push(e),
            Err(e) => out.failures.push((id, e)),
        }
    }
    out
}

