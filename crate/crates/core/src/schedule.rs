//! Coarse-to-fine training manifests and the editing-data mixture sampler.
//!
//! Five stages: (1) dish name + tags at 512 px, (2) adds the recaption,
//! (3) the same text at 1024 px, (4) only ultra-high-quality images at
//! 1024 px, (5) human preference pairs for DPO. The manifests are data
//! products; nothing here trains or resizes anything.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curation::render_tags;
use crate::data::{DishRecord, ImageRef, ManifestRow, PreferencePair, Quality, Status};

pub const DEFAULT_DISH_RATIO: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScheduleError {
    #[error("no such stage {0} (expected 1..=5)")]
    InvalidStage(u8),
    #[error("stage {0} has no eligible records")]
    EmptyStage(u8),
    #[error("record {0} has no recaption")]
    MissingRecaption(String),
    #[error("record {0} has no tags")]
    MissingTags(String),
    #[error("record {record_id} is {actual}, expected Tagged or later")]
    InvalidState {
        record_id: String,
        actual: &'static str,
    },
    #[error("dish ratio {0} outside (0, 1]")]
    InvalidRatio(f64),
    #[error("batch size must be at least 1")]
    EmptyBatch,
    #[error("{0} pool is empty but {1} items were requested from it")]
    EmptyPool(Pool, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub stage: u8,
    pub resolution: u32,
    pub include_recaption: bool,
    pub require_ultra_quality: bool,
    pub is_preference_stage: bool,
}

impl StageSpec {
    pub fn for_stage(stage: u8) -> Result<StageSpec, ScheduleError> {
        let spec = |resolution, include_recaption, ultra, preference| StageSpec {
            stage,
            resolution,
            include_recaption,
            require_ultra_quality: ultra,
            is_preference_stage: preference,
        };
        match stage {
            1 => Ok(spec(512, false, false, false)),
            2 => Ok(spec(512, true, false, false)),
            3 => Ok(spec(1024, true, false, false)),
            4 => Ok(spec(1024, true, true, false)),
            5 => Ok(spec(1024, true, false, true)),
            other => Err(ScheduleError::InvalidStage(other)),
        }
    }

    /// Whether a record belongs in this stage's manifest.
    pub fn admits(&self, record: &DishRecord) -> bool {
        if self.is_preference_stage {
            return false;
        }
        let status_ok = if self.include_recaption {
            record.status == Status::Recaptioned
        } else {
            record.status.at_least(&Status::Tagged)
        };
        status_ok && (!self.require_ultra_quality || record.quality() == Quality::UltraHigh)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSample {
    pub record_id: String,
    pub stage: u8,
    pub text: String,
    pub resolution: u32,
    pub image: ImageRef,
}

impl ManifestRow for TrainSample {
    fn sort_key(&self) -> String {
        self.record_id.clone()
    }

    fn validate(&self) -> Result<(), String> {
        if self.text.trim().is_empty() {
            return Err(format!("sample {} has empty text", self.record_id));
        }
        Ok(())
    }
}

/// `name_final, <rendered tags>[, <recaption>]`.
pub fn assemble_sample_text(record: &DishRecord, spec: &StageSpec) -> Result<String, ScheduleError> {
    if !record.status.at_least(&Status::Tagged) {
        return Err(ScheduleError::InvalidState {
            record_id: record.record_id.clone(),
            actual: record.status.name(),
        });
    }
    let tags = record
        .tags
        .as_ref()
        .and_then(|t| render_tags(t).ok())
        .ok_or_else(|| ScheduleError::MissingTags(record.record_id.clone()))?;
    let mut parts = vec![record.display_name().to_string(), tags];
    if spec.include_recaption {
        match record.recaption.as_deref().map(str::trim) {
            Some(r) if !r.is_empty() => parts.push(r.to_string()),
            _ => return Err(ScheduleError::MissingRecaption(record.record_id.clone())),
        }
    }
    Ok(parts.join(", "))
}

/// Samples for stages 1 to 4, sorted by record id.
pub fn build_stage_manifest(
    stage: u8,
    records: &[DishRecord],
) -> Result<Vec<TrainSample>, ScheduleError> {
    let spec = StageSpec::for_stage(stage)?;
    if spec.is_preference_stage {
        return Err(ScheduleError::InvalidStage(stage));
    }
    let mut out = records
        .iter()
        .filter(|r| spec.admits(r))
        .map(|r| {
            Ok(TrainSample {
                record_id: r.record_id.clone(),
                stage,
                text: assemble_sample_text(r, &spec)?,
                resolution: spec.resolution,
                image: r.image.clone(),
            })
        })
        .collect::<Result<Vec<_>, ScheduleError>>()?;
    if out.is_empty() {
        return Err(ScheduleError::EmptyStage(stage));
    }
    out.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    Ok(out)
}

/// One DPO training row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceRow {
    pub prompt: String,
    pub annotator_id: String,
    pub image_win: ImageRef,
    pub image_lose: ImageRef,
    pub resolution: u32,
}

impl ManifestRow for PreferenceRow {
    fn sort_key(&self) -> String {
        format!(
            "{}\u{0}{}\u{0}{}\u{0}{}",
            self.prompt, self.annotator_id, self.image_win.blob_id, self.image_lose.blob_id
        )
    }

    fn validate(&self) -> Result<(), String> {
        if self.image_win.blob_id == self.image_lose.blob_id {
            return Err("preference row with identical images".into());
        }
        Ok(())
    }
}

/// Stage 5 rows, sorted by prompt then annotator.
pub fn build_preference_manifest(
    pairs: &[PreferencePair],
) -> Result<Vec<PreferenceRow>, ScheduleError> {
    if pairs.is_empty() {
        return Err(ScheduleError::EmptyStage(5));
    }
    let resolution = StageSpec::for_stage(5)?.resolution;
    let mut rows: Vec<PreferenceRow> = pairs
        .iter()
        .map(|p| PreferenceRow {
            prompt: p.prompt.clone(),
            annotator_id: p.annotator_id.clone(),
            image_win: p.image_win.clone(),
            image_lose: p.image_lose.clone(),
            resolution,
        })
        .collect();
    rows.sort_by_key(|r| r.sort_key());
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub dish_ratio: f64,
    pub seed: u64,
}

impl MixtureSpec {
    pub fn new(dish_ratio: f64, seed: u64) -> Result<Self, ScheduleError> {
        if !(dish_ratio > 0.0 && dish_ratio <= 1.0) {
            return Err(ScheduleError::InvalidRatio(dish_ratio));
        }
        Ok(MixtureSpec { dish_ratio, seed })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    Dish,
    General,
}

impl std::fmt::Display for Pool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pool::Dish => "dish",
            Pool::General => "general",
        })
    }
}

/// Number of dish items in a batch of `k`: `k * ratio` rounded half up.
/// The small epsilon keeps products like `0.15 * 10` on the intended side.
pub fn dish_count(k: usize, ratio: f64) -> usize {
    ((k as f64 * ratio + 0.5 + 1e-9).floor() as usize).min(k)
}

fn draw<T: Clone>(pool: &[T], n: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    if n <= pool.len() {
        index::sample(rng, pool.len(), n)
            .into_iter()
            .map(|i| pool[i].clone())
            .collect()
    } else {
        (0..n)
            .map(|_| pool[rng.random_range(0..pool.len())].clone())
            .collect()
    }
}

/// A batch of `k` items: [`dish_count`] from the dish pool and the rest from
/// the general pool, each drawn uniformly (without replacement when the
/// pool is large enough), then shuffled. Deterministic in all inputs.
pub fn sample_mixture<T: Clone>(
    dish_pool: &[T],
    general_pool: &[T],
    spec: &MixtureSpec,
    k: usize,
) -> Result<Vec<(Pool, T)>, ScheduleError> {
    MixtureSpec::new(spec.dish_ratio, spec.seed)?;
    if k == 0 {
        return Err(ScheduleError::EmptyBatch);
    }
    let n_dish = dish_count(k, spec.dish_ratio);
    let n_general = k - n_dish;
    if n_dish > 0 && dish_pool.is_empty() {
        return Err(ScheduleError::EmptyPool(Pool::Dish, n_dish));
    }
    if n_general > 0 && general_pool.is_empty() {
        return Err(ScheduleError::EmptyPool(Pool::General, n_general));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out: Vec<(Pool, T)> = draw(dish_pool, n_dish, &mut rng)
        .into_iter()
        .map(|t| (Pool::Dish, t))
        .chain(
            draw(general_pool, n_general, &mut rng)
                .into_iter()
                .map(|t| (Pool::General, t)),
        )
        .collect();
    out.shuffle(&mut rng);
    Ok(out)
}

/// A mixture batch row. The zero-padded slot keeps manifest order equal to
/// batch order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: DeserializeOwned"))]
pub struct MixtureRow<T> {
    pub slot: String,
    pub pool: Pool,
    pub item: T,
}

impl<T: Serialize + DeserializeOwned> ManifestRow for MixtureRow<T> {
    fn sort_key(&self) -> String {
        self.slot.clone()
    }
}

pub fn mixture_rows<T>(batch: Vec<(Pool, T)>) -> Vec<MixtureRow<T>> {
    batch
        .into_iter()
        .enumerate()
        .map(|(i, (pool, item))| MixtureRow {
            slot: format!("{i:08}"),
            pool,
            item,
        })
        .collect()
}
