//! Stage orchestration over a workspace directory.
//!
//! Layout under the workspace root:
//!
//! ```text
//! blobs/        content-addressed images
//! manifests/    every input and output manifest
//! markers/      one JSON marker per completed stage
//! .lock         held while a run is in progress
//! ```
//!
//! A stage is skipped when its marker records the same input digest and
//! configuration digest as the current run and its outputs are unchanged
//! on disk.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::captioning::{build_library, recaption_record, with_quality_suffix, CaptioningError};
use crate::config::{ConfigError, PipelineConfig};
use crate::curation::{curate_record, CurationError, NameDecision};
use crate::data::{
    apply_quality_annotations, read_manifest, write_manifest, BlobError, BlobStore, DishRecord,
    ManifestError, ManifestRow, PreferencePair, QualityAnnotation, Status,
};
use crate::editset::{
    build_cep2p_pairs, build_inpaint_pairs, plan_concept_enhancement, run_concept_enhancement,
    EditPair, EditsetError, PairRequest, ProvenanceRow, ReviewQueue, SystemClock,
};
use crate::eval::{
    aggregate_scores, dish_similarity_batch, fid, mean, DimensionSummary, EmbeddingRow, EvalError,
    HumanScoreSheet, ScoredPair,
};
use crate::hashing::{seed_from_parts, sha256_hex};
use crate::par::Execution;
use crate::providers::{MockProvider, ProviderError, Providers};
use crate::schedule::{build_preference_manifest, build_stage_manifest, ScheduleError};
use crate::synth::{synthesize_corpus, SynthOptions};

/// Manifest file names inside the manifest directory.
pub mod files {
    pub const RAW: &str = "raw.jsonl";
    pub const QUALITY: &str = "quality.jsonl";
    pub const CURATED: &str = "curated.jsonl";
    pub const DECISIONS: &str = "name_decisions.jsonl";
    pub const RECAPTIONED: &str = "recaptioned.jsonl";
    pub const LIBRARY: &str = "library.jsonl";
    pub const PREFERENCES: &str = "preferences.jsonl";
    pub const PREFERENCE_CANDIDATES: &str = "preference_candidates.jsonl";
    pub const PROVENANCE: &str = "concept_provenance.jsonl";
    pub const CANDIDATES: &str = "edit_candidates.jsonl";
    pub const REVIEW_QUEUE: &str = "review_queue.jsonl";
    pub const PREFERENCE_QUEUE: &str = "preference_queue.jsonl";
    pub const HUMAN_SCORES: &str = "human_scores.jsonl";
    pub const REF_EMBEDDINGS: &str = "ref_embeddings.jsonl";
    pub const GEN_EMBEDDINGS: &str = "gen_embeddings.jsonl";
    pub const EVAL_REPORT: &str = "eval_report.json";

    pub fn stage(n: u8) -> String {
        format!("stage{n}.jsonl")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Curate,
    Recaption,
    Library,
    Schedule,
    Editset,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Curate,
        Stage::Recaption,
        Stage::Library,
        Stage::Schedule,
        Stage::Editset,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Curate => "curate",
            Stage::Recaption => "recaption",
            Stage::Library => "library",
            Stage::Schedule => "schedule",
            Stage::Editset => "editset",
            Stage::Eval => "eval",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s.trim())
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error("missing input {0}")]
    MissingInput(PathBuf),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Curation(#[from] CurationError),
    #[error(transparent)]
    Captioning(#[from] CaptioningError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Editset(#[from] EditsetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("stage {stage} failed: {source}")]
    StageFailed {
        stage: Stage,
        #[source]
        source: StageError,
    },
    #[error(transparent)]
    ConfigInvalid(#[from] ConfigError),
    #[error("workspace is locked by another run ({0})")]
    LockHeld(PathBuf),
    #[error("workspace {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Blob(#[from] BlobError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> StageError + '_ {
    move |source| StageError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// An opened workspace with its blob store and providers.
pub struct Workspace {
    root: PathBuf,
    config: PipelineConfig,
    store: Arc<BlobStore>,
    providers: Providers,
}

impl Workspace {
    pub fn open(root: impl Into<PathBuf>, config: PipelineConfig) -> Result<Self, PipelineError> {
        let root = root.into();
        config.validate()?;
        let store = Arc::new(BlobStore::open(config.blob_root(&root))?);
        let providers = config.build_providers(store.clone())?;
        let ws = Workspace {
            root,
            config,
            store,
            providers,
        };
        for dir in [ws.manifest_dir(), ws.marker_dir()] {
            fs::create_dir_all(&dir).map_err(|source| PipelineError::Io { path: dir, source })?;
        }
        Ok(ws)
    }

    /// Replaces the configured providers, e.g. with instrumented ones.
    pub fn with_providers(mut self, providers: Providers) -> Self {
        self.providers = providers;
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn store(&self) -> &Arc<BlobStore> {
        &self.store
    }

    pub fn providers(&self) -> &Providers {
        &self.providers
    }

    pub fn manifest_dir(&self) -> PathBuf {
        self.config.manifest_dir(&self.root)
    }

    pub fn marker_dir(&self) -> PathBuf {
        self.root.join("markers")
    }

    pub fn manifest(&self, name: &str) -> PathBuf {
        self.manifest_dir().join(name)
    }

    fn exec(&self) -> Execution {
        self.config.execution()
    }

    /// Writes a synthetic raw corpus plus quality annotations, preference
    /// data and human score sheets into the manifest directory.
    pub fn write_synthetic_inputs(&self, opts: &SynthOptions) -> Result<usize, PipelineError> {
        let mock = MockProvider::new(self.store.clone(), self.config.seed);
        let corpus = synthesize_corpus(&mock, opts)?;
        let write = |name: &str, f: &dyn Fn(&Path) -> Result<usize, ManifestError>| {
            let path = self.manifest(name);
            f(&path).map_err(|e| PipelineError::Io {
                path,
                source: std::io::Error::other(e.to_string()),
            })
        };
        let n = write(files::RAW, &|p| write_manifest(p, &corpus.records))?;
        write(files::QUALITY, &|p| write_manifest(p, &corpus.quality))?;
        write(files::PREFERENCES, &|p| write_manifest(p, &corpus.preferences))?;
        write(files::PREFERENCE_CANDIDATES, &|p| {
            write_manifest(p, &corpus.preference_candidates)
        })?;
        write(files::HUMAN_SCORES, &|p| write_manifest(p, &corpus.human_sheets))?;
        Ok(n)
    }

    fn lock(&self) -> Result<LockGuard, PipelineError> {
        let path = self.root.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(LockGuard(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(PipelineError::LockHeld(path))
            }
            Err(source) => Err(PipelineError::Io { path, source }),
        }
    }
}

struct LockGuard(PathBuf);

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "outcome")]
pub enum StageOutcome {
    Ran { outputs: Vec<String> },
    Skipped,
    /// Ran but produced nothing, e.g. no ultra-high-quality records.
    Empty { note: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    #[serde(flatten)]
    pub outcome: StageOutcome,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RunReport {
    pub stages: Vec<StageReport>,
}

impl RunReport {
    pub fn all_skipped(&self) -> bool {
        self.stages
            .iter()
            .all(|s| s.outcome == StageOutcome::Skipped)
    }

    pub fn outcome(&self, stage: Stage) -> Option<&StageOutcome> {
        self.stages
            .iter()
            .find(|s| s.stage == stage)
            .map(|s| &s.outcome)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Marker {
    stage: Stage,
    input_hash: String,
    config_hash: String,
    outputs: BTreeMap<String, String>,
}

struct StageRun {
    outputs: Vec<String>,
    notes: Vec<String>,
}

impl StageRun {
    fn new() -> Self {
        StageRun {
            outputs: Vec::new(),
            notes: Vec::new(),
        }
    }
}

fn stage_inputs(stage: Stage) -> (&'static [&'static str], &'static [&'static str]) {
    match stage {
        Stage::Curate => (&[files::RAW], &[files::QUALITY]),
        Stage::Recaption => (&[files::CURATED], &[]),
        Stage::Library => (&[files::RECAPTIONED], &[]),
        Stage::Schedule => (&[files::RECAPTIONED], &[files::PREFERENCES]),
        Stage::Editset => (&[files::RECAPTIONED], &[]),
        Stage::Eval => (&[files::RECAPTIONED], &[files::HUMAN_SCORES]),
    }
}

fn file_digest(path: &Path) -> Result<Option<String>, StageError> {
    match fs::read(path) {
        Ok(bytes) => Ok(Some(sha256_hex(&bytes))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(io_at(path)(e)),
    }
}

fn input_hash(ws: &Workspace, stage: Stage) -> Result<String, StageError> {
    let (required, optional) = stage_inputs(stage);
    let mut parts = Vec::new();
    for name in required {
        let path = ws.manifest(name);
        let d = file_digest(&path)?.ok_or(StageError::MissingInput(path))?;
        parts.push(format!("{name}={d}"));
    }
    for name in optional {
        let d = file_digest(&ws.manifest(name))?.unwrap_or_else(|| "absent".into());
        parts.push(format!("{name}={d}"));
    }
    Ok(sha256_hex(parts.join("\n").as_bytes()))
}

fn marker_path(ws: &Workspace, stage: Stage) -> PathBuf {
    ws.marker_dir().join(format!("{}.json", stage.name()))
}

fn up_to_date(ws: &Workspace, stage: Stage, input: &str, config: &str) -> bool {
    let Ok(text) = fs::read_to_string(marker_path(ws, stage)) else {
        return false;
    };
    let Ok(marker) = serde_json::from_str::<Marker>(&text) else {
        return false;
    };
    marker.input_hash == input
        && marker.config_hash == config
        && marker.outputs.iter().all(|(name, digest)| {
            file_digest(&ws.manifest(name))
                .ok()
                .flatten()
                .is_some_and(|d| &d == digest)
        })
}

fn write_marker(ws: &Workspace, marker: &Marker) -> Result<(), StageError> {
    let path = marker_path(ws, marker.stage);
    let mut text = serde_json::to_string_pretty(marker).expect("marker serializes");
    text.push('\n');
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(io_at(&tmp))?;
    fs::rename(&tmp, &path).map_err(io_at(&path))
}

fn read_optional<T: ManifestRow>(path: &Path) -> Result<Vec<T>, StageError> {
    if path.exists() {
        Ok(read_manifest(path)?)
    } else {
        Ok(Vec::new())
    }
}

fn remove_stale(path: &Path) -> Result<(), StageError> {
    match fs::remove_file(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(io_at(path)(e)),
    }
}

/// Runs the requested stages in pipeline order.
pub fn run_pipeline(ws: &Workspace, stages: &[Stage]) -> Result<RunReport, PipelineError> {
    let _lock = ws.lock()?;
    let mut ordered: Vec<Stage> = stages.to_vec();
    ordered.sort();
    ordered.dedup();
    let mut report = RunReport::default();
    for stage in ordered {
        let fail = |source| PipelineError::StageFailed { stage, source };
        let input = input_hash(ws, stage).map_err(fail)?;
        let config = ws.config.section_hash(stage.name());
        if up_to_date(ws, stage, &input, &config) {
            tracing::info!(%stage, "unchanged, skipped");
            report.stages.push(StageReport {
                stage,
                outcome: StageOutcome::Skipped,
                notes: Vec::new(),
            });
            continue;
        }
        tracing::info!(%stage, "running");
        let run = run_stage(ws, stage).map_err(fail)?;
        let mut outputs = BTreeMap::new();
        for name in &run.outputs {
            let digest = file_digest(&ws.manifest(name))
                .map_err(fail)?
                .ok_or_else(|| fail(StageError::MissingInput(ws.manifest(name))))?;
            outputs.insert(name.clone(), digest);
        }
        write_marker(
            ws,
            &Marker {
                stage,
                input_hash: input,
                config_hash: config,
                outputs,
            },
        )
        .map_err(fail)?;
        let outcome = if run.outputs.is_empty() {
            StageOutcome::Empty {
                note: run.notes.join("; "),
            }
        } else {
            StageOutcome::Ran {
                outputs: run.outputs,
            }
        };
        report.stages.push(StageReport {
            stage,
            outcome,
            notes: run.notes,
        });
    }
    Ok(report)
}

fn run_stage(ws: &Workspace, stage: Stage) -> Result<StageRun, StageError> {
    match stage {
        Stage::Curate => curate_stage(ws),
        Stage::Recaption => recaption_stage(ws),
        Stage::Library => library_stage(ws),
        Stage::Schedule => schedule_stage(ws),
        Stage::Editset => editset_stage(ws),
        Stage::Eval => eval_stage(ws),
    }
}

/// A name decision row of `name_decisions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRow {
    pub record_id: String,
    #[serde(flatten)]
    pub decision: NameDecision,
}

impl ManifestRow for DecisionRow {
    fn sort_key(&self) -> String {
        self.record_id.clone()
    }
}

fn curate_stage(ws: &Workspace) -> Result<StageRun, StageError> {
    let mut records: Vec<DishRecord> = read_manifest(&ws.manifest(files::RAW))?;
    let annotations: Vec<QualityAnnotation> = read_optional(&ws.manifest(files::QUALITY))?;
    let hits = apply_quality_annotations(&mut records, &annotations);
    let p = &ws.providers;
    let settings = &ws.config.curation;
    let outcomes = ws.exec().try_map(&records, |r| {
        if r.status == Status::Raw {
            curate_record(r, p.vision.as_ref(), p.chat.as_ref(), p.embed.as_ref(), settings)
                .map(|o| (o.record, o.decision))
        } else {
            Ok((r.clone(), None))
        }
    })?;
    let mut curated = Vec::with_capacity(outcomes.len());
    let mut decisions = Vec::new();
    for (record, decision) in outcomes {
        if let Some(decision) = decision {
            decisions.push(DecisionRow {
                record_id: record.record_id.clone(),
                decision,
            });
        }
        curated.push(record);
    }
    let kept = curated
        .iter()
        .filter(|r| r.status == Status::Tagged)
        .count();
    write_manifest(&ws.manifest(files::CURATED), &curated)?;
    write_manifest(&ws.manifest(files::DECISIONS), &decisions)?;
    let mut run = StageRun::new();
    run.outputs = vec![files::CURATED.into(), files::DECISIONS.into()];
    run.notes.push(format!(
        "{kept} of {} records tagged, {hits} quality annotations applied",
        curated.len()
    ));
    Ok(run)
}

fn recaption_stage(ws: &Workspace) -> Result<StageRun, StageError> {
    let records: Vec<DishRecord> = read_manifest(&ws.manifest(files::CURATED))?;
    let p = &ws.providers;
    let settings = &ws.config.captioning;
    let out = ws.exec().try_map(&records, |r| {
        if r.status == Status::Tagged {
            recaption_record(r, p.chat.as_ref(), p.vision.as_ref(), settings)
        } else {
            Ok(r.clone())
        }
    })?;
    write_manifest(&ws.manifest(files::RECAPTIONED), &out)?;
    let mut run = StageRun::new();
    run.outputs.push(files::RECAPTIONED.into());
    Ok(run)
}

fn library_stage(ws: &Workspace) -> Result<StageRun, StageError> {
    let records: Vec<DishRecord> = read_manifest(&ws.manifest(files::RECAPTIONED))?;
    let path = ws.manifest(files::LIBRARY);
    let mut run = StageRun::new();
    match build_library(
        &records,
        ws.providers.embed.as_ref(),
        ws.config.library.min_quality,
        ws.exec(),
    ) {
        Ok(lib) => {
            lib.save(&path)?;
            run.outputs.push(files::LIBRARY.into());
            run.notes.push(format!(
                "{} entries over {} dishes",
                lib.len(),
                lib.dish_names().count()
            ));
        }
        Err(CaptioningError::EmptyLibrary) => {
            remove_stale(&path)?;
            run.notes.push("no record passes the quality filter".into());
        }
        Err(e) => return Err(e.into()),
    }
    Ok(run)
}

fn schedule_stage(ws: &Workspace) -> Result<StageRun, StageError> {
    let records: Vec<DishRecord> = read_manifest(&ws.manifest(files::RECAPTIONED))?;
    let mut run = StageRun::new();
    for stage in 1..=5u8 {
        let name = files::stage(stage);
        let path = ws.manifest(&name);
        if !ws.config.schedule.stages.contains(&stage) {
            remove_stale(&path)?;
            continue;
        }
        let written = if stage == 5 {
            let pairs: Vec<PreferencePair> = read_optional(&ws.manifest(files::PREFERENCES))?;
            build_preference_manifest(&pairs).map(|rows| write_manifest(&path, &rows))
        } else {
            build_stage_manifest(stage, &records).map(|rows| write_manifest(&path, &rows))
        };
        match written {
            Ok(result) => {
                let n = result?;
                run.outputs.push(name);
                run.notes.push(format!("stage {stage}: {n} rows"));
            }
            Err(ScheduleError::EmptyStage(s)) => {
                remove_stale(&path)?;
                run.notes.push(format!("stage {s}: no eligible rows"));
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(run)
}

/// Output of the concept-enhancement half of the editset stage.
#[derive(Debug, Clone, Default)]
pub struct ConceptCandidates {
    pub provenance: Vec<ProvenanceRow>,
    pub pairs: Vec<EditPair>,
    pub notes: Vec<String>,
}

/// Fine-tunes one checkpoint per configured concept and sweeps the rho grid
/// over its seeds. `only` restricts the run to concepts with that name.
pub fn concept_candidates(
    ws: &Workspace,
    only: Option<&str>,
) -> Result<ConceptCandidates, StageError> {
    let cfg = &ws.config.editset;
    let p = &ws.providers;
    let exec = ws.exec();
    let mut out = ConceptCandidates::default();
    for concept in cfg
        .concepts
        .iter()
        .filter(|c| only.is_none_or(|name| c.concept == name))
    {
        let plan = plan_concept_enhancement(
            &concept.concept,
            &concept.target_prompts(),
            &concept.source_prompts(),
            concept.n_target,
            cfg.settings.source_fraction,
            &concept.base_checkpoint,
        )?;
        let seed_base =
            seed_from_parts(&[&ws.config.seed.to_le_bytes(), concept.concept.as_bytes()]) >> 16;
        let result = run_concept_enhancement(
            &plan,
            seed_base,
            p.generation.as_ref(),
            p.finetune.as_ref(),
            &cfg.settings,
            exec,
        )?;
        let request = PairRequest {
            source_prompt: concept.source_prompt.clone(),
            target_prompt: concept.target_prompt.clone(),
            instruction: concept.instruction.clone(),
            edit_type: concept.edit_type,
            checkpoint: result.checkpoint_id.clone(),
        };
        let pairs = build_cep2p_pairs(
            &request,
            &cfg.settings.rho_grid,
            &concept.seeds,
            p.generation.as_ref(),
            exec,
        )?;
        out.notes.push(format!(
            "{}: checkpoint {}, {} pairs",
            concept.concept,
            result.checkpoint_id,
            pairs.len()
        ));
        out.provenance.extend(result.provenance);
        out.pairs.extend(pairs);
    }
    Ok(out)
}

/// Add/remove pairs for every record that reached tagging.
pub fn inpaint_candidates(
    ws: &Workspace,
    records: &[DishRecord],
) -> Result<Vec<EditPair>, StageError> {
    let p = &ws.providers;
    let settings = &ws.config.editset.settings;
    let eligible: Vec<&DishRecord> = records
        .iter()
        .filter(|r| r.status.at_least(&Status::Tagged))
        .collect();
    let per_record = ws.exec().try_map(&eligible, |r| {
        build_inpaint_pairs(r, p.vision.as_ref(), p.edit.as_ref(), settings)
    })?;
    Ok(per_record.into_iter().flatten().collect())
}

/// Adds pairs to the review queue manifest, keeping existing verdicts.
/// Returns how many were new.
pub fn merge_review_queue(ws: &Workspace, pairs: Vec<EditPair>) -> Result<usize, StageError> {
    let path = ws.manifest(files::REVIEW_QUEUE);
    let lease_secs = ws.config.editset.settings.lease_secs;
    let clock = Arc::new(SystemClock);
    let mut queue = if path.exists() {
        ReviewQueue::load(&path, lease_secs, clock)?
    } else {
        ReviewQueue::new(lease_secs, clock)
    };
    let added = queue.enqueue(pairs);
    queue.save(&path)?;
    Ok(added)
}

fn editset_stage(ws: &Workspace) -> Result<StageRun, StageError> {
    let records: Vec<DishRecord> = read_manifest(&ws.manifest(files::RECAPTIONED))?;
    let mut run = StageRun::new();
    let concepts = concept_candidates(ws, None)?;
    run.notes.extend(concepts.notes);
    let mut candidates = concepts.pairs;
    if ws.config.editset.inpaint {
        let pairs = inpaint_candidates(ws, &records)?;
        run.notes.push(format!("inpainting: {} pairs", pairs.len()));
        candidates.extend(pairs);
    }
    write_manifest(&ws.manifest(files::PROVENANCE), &concepts.provenance)?;
    write_manifest(&ws.manifest(files::CANDIDATES), &candidates)?;
    run.outputs = vec![files::PROVENANCE.into(), files::CANDIDATES.into()];
    let added = merge_review_queue(ws, candidates)?;
    run.notes.push(format!("{added} pairs added to the review queue"));
    Ok(run)
}

/// Summary written to `eval_report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dish_similarity: Option<f64>,
    pub dish_similarity_count: usize,
    pub fid: Option<f64>,
    pub fid_reference_count: usize,
    pub fid_generated_count: usize,
    pub human: Vec<DimensionSummary>,
}

fn eval_stage(ws: &Workspace) -> Result<StageRun, StageError> {
    let records: Vec<DishRecord> = read_manifest(&ws.manifest(files::RECAPTIONED))?;
    let p = &ws.providers;
    let exec = ws.exec();
    let kept: Vec<&DishRecord> = records
        .iter()
        .filter(|r| r.status.at_least(&Status::Tagged))
        .collect();
    let eval_cfg = &ws.config.eval;
    // Prompted the way inference prompts the model: name plus quality suffix.
    let generated_images = exec.try_map(&kept, |r| {
        let seed = eval_cfg.generation_seed ^ seed_from_parts(&[r.record_id.as_bytes()]);
        p.generation.generate(
            &with_quality_suffix(r.display_name()),
            seed,
            &eval_cfg.checkpoint,
        )
    })?;
    let pairs: Vec<ScoredPair> = kept
        .iter()
        .zip(&generated_images)
        .map(|(r, img)| ScoredPair {
            id: r.record_id.clone(),
            dish_name: r.display_name().to_string(),
            image: img.clone(),
        })
        .collect();
    let scores = dish_similarity_batch(&pairs, p.embed.as_ref(), exec)?;

    let embed_rows = |items: Vec<(&str, &crate::data::ImageRef)>| {
        exec.try_map(&items, |(id, img)| {
            p.embed.embed_image(img).map(|v| EmbeddingRow {
                id: id.to_string(),
                values: v.values().to_vec(),
            })
        })
    };
    let reference = embed_rows(kept.iter().map(|r| (r.record_id.as_str(), &r.image)).collect())?;
    let generated = embed_rows(
        pairs
            .iter()
            .map(|p| (p.id.as_str(), &p.image))
            .collect(),
    )?;
    write_manifest(&ws.manifest(files::REF_EMBEDDINGS), &reference)?;
    write_manifest(&ws.manifest(files::GEN_EMBEDDINGS), &generated)?;

    let to_vectors = |rows: &[EmbeddingRow]| -> Result<Vec<crate::data::EmbeddingVector>, StageError> {
        rows.iter()
            .map(|r| {
                crate::data::EmbeddingVector::new(r.values.clone())
                    .map_err(|e| StageError::Provider(ProviderError::MalformedResponse(e.to_string())))
            })
            .collect()
    };
    let mut run = StageRun::new();
    let fid_value = if reference.len() >= 2 && generated.len() >= 2 {
        Some(fid(&to_vectors(&reference)?, &to_vectors(&generated)?)?)
    } else {
        run.notes.push("fewer than two curated images, FID not computed".into());
        None
    };
    let sheets: Vec<HumanScoreSheet> = read_optional(&ws.manifest(files::HUMAN_SCORES))?;
    let report = EvalReport {
        dish_similarity: mean(&scores),
        dish_similarity_count: scores.len(),
        fid: fid_value,
        fid_reference_count: reference.len(),
        fid_generated_count: generated.len(),
        human: aggregate_scores(&sheets),
    };
    let path = ws.manifest(files::EVAL_REPORT);
    let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
    text.push('\n');
    fs::write(&path, text).map_err(io_at(&path))?;
    run.outputs = vec![
        files::REF_EMBEDDINGS.into(),
        files::GEN_EMBEDDINGS.into(),
        files::EVAL_REPORT.into(),
    ];
    Ok(run)
}
