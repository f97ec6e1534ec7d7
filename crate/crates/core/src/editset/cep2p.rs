//! Concept-enhanced prompt-to-prompt pairs.
//!
//! The generator is first fine-tuned on its own images of the target
//! concept (plus a share of source-prompt images), then the fine-tuned
//! checkpoint produces paired images over a sweep of replacement fractions.
//! Picking the best fraction is left to human review.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{pair_id, EditPair, EditType, EditsetError, EditsetSettings, Method, ReviewStatus};
use crate::data::{ImageRef, ManifestRow};
use crate::par::Execution;
use crate::providers::{FinetuneProvider, GenerationProvider, JobState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptPlan {
    pub concept: String,
    pub target_prompts: Vec<String>,
    pub source_prompts: Vec<String>,
    pub n_target: usize,
    pub n_source: usize,
    pub base_checkpoint: String,
}

fn clean_prompts(prompts: &[String]) -> Vec<String> {
    prompts
        .iter()
        .map(|p| p.trim().to_string())
        .filter(|p| !p.is_empty())
        .collect()
}

/// `n_source = round(n_target * source_fraction)`.
pub fn plan_concept_enhancement(
    concept: &str,
    target_prompts: &[String],
    source_prompts: &[String],
    n_target: usize,
    source_fraction: f64,
    base_checkpoint: &str,
) -> Result<ConceptPlan, EditsetError> {
    if n_target == 0 {
        return Err(EditsetError::InvalidPlan("n_target must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&source_fraction) {
        return Err(EditsetError::InvalidPlan(format!(
            "source fraction {source_fraction} outside [0, 1)"
        )));
    }
    if base_checkpoint.trim().is_empty() {
        return Err(EditsetError::InvalidPlan("empty base checkpoint".into()));
    }
    let n_source = (n_target as f64 * source_fraction).round() as usize;
    let target_prompts = clean_prompts(target_prompts);
    let source_prompts = clean_prompts(source_prompts);
    if target_prompts.is_empty() || (n_source > 0 && source_prompts.is_empty()) {
        return Err(EditsetError::NoPrompts);
    }
    Ok(ConceptPlan {
        concept: concept.trim().to_string(),
        target_prompts,
        source_prompts,
        n_target,
        n_source,
        base_checkpoint: base_checkpoint.trim().to_string(),
    })
}

/// One generated training image of a concept run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRow {
    pub concept: String,
    pub role: String,
    pub prompt: String,
    pub seed: u64,
    pub image: ImageRef,
    pub job_id: String,
    pub checkpoint_id: String,
}

impl ManifestRow for ProvenanceRow {
    fn sort_key(&self) -> String {
        format!("{}\u{0}{:020}", self.concept, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptRun {
    pub checkpoint_id: String,
    pub job_id: String,
    pub provenance: Vec<ProvenanceRow>,
}

/// Generates `n_target + n_source` images with seeds `seed_base + i`,
/// fine-tunes once on all of them and waits for the job to finish.
pub fn run_concept_enhancement(
    plan: &ConceptPlan,
    seed_base: u64,
    generation: &dyn GenerationProvider,
    finetune: &dyn FinetuneProvider,
    settings: &EditsetSettings,
    exec: Execution,
) -> Result<ConceptRun, EditsetError> {
    let total = plan.n_target + plan.n_source;
    let jobs: Vec<(&str, &str, u64)> = (0..total)
        .map(|i| {
            let seed = seed_base.wrapping_add(i as u64);
            if i < plan.n_target {
                let p = &plan.target_prompts[i % plan.target_prompts.len()];
                ("target", p.as_str(), seed)
            } else {
                let j = i - plan.n_target;
                let p = &plan.source_prompts[j % plan.source_prompts.len()];
                ("source", p.as_str(), seed)
            }
        })
        .collect();
    let images = exec.try_map(&jobs, |(_, prompt, seed)| {
        generation.generate(prompt, *seed, &plan.base_checkpoint)
    })?;

    let submitted = finetune.submit_finetune(&plan.base_checkpoint, &images)?;
    let job_id = submitted.job_id.clone();
    let mut state = submitted.state;
    let mut polls = 0u32;
    let checkpoint_id = loop {
        match state {
            JobState::Done { checkpoint_id } => break checkpoint_id,
            JobState::Failed { message } => return Err(EditsetError::FinetuneFailed(message)),
            JobState::Pending | JobState::Running => {}
        }
        if polls >= settings.max_polls {
            return Err(EditsetError::FinetuneFailed(format!(
                "job {job_id} unfinished after {polls} polls"
            )));
        }
        if polls > 0 && settings.poll_interval_ms > 0 {
            thread::sleep(Duration::from_millis(settings.poll_interval_ms));
        }
        polls += 1;
        let job = finetune.poll_finetune(&job_id)?;
        job.validate()?;
        state = job.state;
    };
    tracing::info!(concept = %plan.concept, %job_id, %checkpoint_id, images = total, "concept fine-tune done");

    let provenance = jobs
        .iter()
        .zip(images)
        .map(|((role, prompt, seed), image)| ProvenanceRow {
            concept: plan.concept.clone(),
            role: role.to_string(),
            prompt: prompt.to_string(),
            seed: *seed,
            image,
            job_id: job_id.clone(),
            checkpoint_id: checkpoint_id.clone(),
        })
        .collect();
    Ok(ConceptRun {
        checkpoint_id,
        job_id,
        provenance,
    })
}

/// Inputs of a prompt-to-prompt sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRequest {
    pub source_prompt: String,
    pub target_prompt: String,
    pub instruction: String,
    pub edit_type: EditType,
    pub checkpoint: String,
}

/// `|rho_grid| * |seeds|` candidate pairs, seed-major. A pair whose two
/// images are identical carries no edit and is rejected immediately.
pub fn build_cep2p_pairs(
    request: &PairRequest,
    rho_grid: &[f64],
    seeds: &[u64],
    generation: &dyn GenerationProvider,
    exec: Execution,
) -> Result<Vec<EditPair>, EditsetError> {
    if let Some(bad) = rho_grid.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(EditsetError::InvalidRho(*bad));
    }
    if seeds.is_empty() {
        return Err(EditsetError::NoSeeds);
    }
    let grid: Vec<(u64, f64)> = seeds
        .iter()
        .flat_map(|s| rho_grid.iter().map(move |r| (*s, *r)))
        .collect();
    let pairs = exec.try_map(&grid, |(seed, rho)| {
        let (source, target) = generation.generate_pair(
            &request.source_prompt,
            &request.target_prompt,
            *rho,
            *seed,
            &request.checkpoint,
        )?;
        let review = if source.blob_id == target.blob_id {
            ReviewStatus::Rejected
        } else {
            ReviewStatus::Pending
        };
        Ok::<_, EditsetError>(EditPair {
            pair_id: pair_id(&[
                b"cep2p",
                request.source_prompt.as_bytes(),
                request.target_prompt.as_bytes(),
                request.instruction.as_bytes(),
                request.checkpoint.as_bytes(),
                &seed.to_le_bytes(),
                &rho.to_bits().to_le_bytes(),
            ]),
            source,
            target,
            instruction: request.instruction.clone(),
            edit_type: request.edit_type,
            method: Method::Cep2p,
            rho: Some(*rho),
            seed: Some(*seed),
            checkpoint: Some(request.checkpoint.clone()),
            record_id: None,
            review,
        })
    })?;
    let degenerate = pairs
        .iter()
        .filter(|p| p.review == ReviewStatus::Rejected)
        .count();
    if degenerate > 0 {
        tracing::info!(degenerate, "auto-rejected pairs with identical images");
    }
    Ok(pairs)
}
