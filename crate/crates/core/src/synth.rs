//! Seeded synthetic corpora for demos, tests and benchmarks.
//!
//! Records mimic scraped menu data: mostly canonical dish names, some with
//! marketing decorations or bracketed portion notes, and a share of
//! promotion strings that are not dishes at all. Images come from
//! [`MockProvider::synthesize_image`], labelled with the true dish.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DishRecord, PreferencePair, Quality, QualityAnnotation};
use crate::editset::{PreferenceCandidate, PreferenceChoice};
use crate::eval::{Dimension, HumanScoreSheet};
use crate::providers::{GenerationProvider, MockProvider, ProviderError};

pub const DISHES: &[&str] = &[
    "宫保鸡丁",
    "麻婆豆腐",
    "红烧肉",
    "鱼香肉丝",
    "驴打滚",
    "糖醋排骨",
    "回锅肉",
    "水煮鱼",
    "小笼包",
    "北京烤鸭",
    "西红柿炒鸡蛋",
    "酸辣土豆丝",
    "东坡肉",
    "清蒸鲈鱼",
    "担担面",
    "夫妻肺片",
    "蚂蚁上树",
    "地三鲜",
    "锅包肉",
    "叉烧包",
    "干炒牛河",
    "白切鸡",
    "扬州炒饭",
    "兰州拉面",
];

const DECORATIONS: &[(&str, &str)] = &[
    ("招牌", ""),
    ("秘制", ""),
    ("", "（大份）"),
    ("正宗", "【推荐】"),
    ("家常", "(微辣)"),
];

const PROMOTIONS: &[&str] = &["满29减5", "第2份半价", "买一送一 10元", "新客立减8元", "满100减30"];

const ELEMENTS: &[&str] = &["coriander", "chili pepper", "scallion", "sesame seeds", "peanuts"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub records: usize,
    pub seed: u64,
    pub decorated_fraction: f64,
    pub promotion_fraction: f64,
    pub ultra_fraction: f64,
    pub preference_pairs: usize,
    pub human_sheets: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            records: 50,
            seed: 7,
            decorated_fraction: 0.3,
            promotion_fraction: 0.1,
            ultra_fraction: 0.3,
            preference_pairs: 6,
            human_sheets: 9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub records: Vec<DishRecord>,
    pub quality: Vec<QualityAnnotation>,
    pub preferences: Vec<PreferencePair>,
    pub preference_candidates: Vec<PreferenceCandidate>,
    pub human_sheets: Vec<HumanScoreSheet>,
}

pub fn synthesize_corpus(
    mock: &MockProvider,
    opts: &SynthOptions,
) -> Result<SynthCorpus, ProviderError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut records = Vec::with_capacity(opts.records);
    let mut quality = Vec::new();
    for i in 0..opts.records {
        let dish = *DISHES.choose(&mut rng).expect("non-empty dish list");
        let roll: f64 = rng.random();
        let name = if roll < opts.promotion_fraction {
            PROMOTIONS.choose(&mut rng).expect("promotions").to_string()
        } else if roll < opts.promotion_fraction + opts.decorated_fraction {
            let (pre, post) = DECORATIONS.choose(&mut rng).expect("decorations");
            format!("{pre}{dish}{post}")
        } else {
            dish.to_string()
        };
        let n_elements = rng.random_range(0..=2usize);
        let elements: Vec<&str> = ELEMENTS
            .choose_multiple(&mut rng, n_elements)
            .copied()
            .collect();
        let image = mock.synthesize_image(dish, &elements, opts.seed ^ ((i as u64) << 8))?;
        let record_id = format!("rec-{i:05}");
        if rng.random::<f64>() < opts.ultra_fraction {
            quality.push(QualityAnnotation {
                record_id: record_id.clone(),
                quality: Quality::UltraHigh,
            });
        }
        records.push(DishRecord::new(record_id, &name, image));
    }

    let mut preferences = Vec::new();
    let mut preference_candidates = Vec::new();
    for k in 0..opts.preference_pairs {
        let dish = DISHES[k % DISHES.len()];
        let seed = opts.seed.wrapping_mul(1000).wrapping_add(2 * k as u64);
        let a = mock.generate(dish, seed, "base")?;
        let b = mock.generate(dish, seed + 1, "base")?;
        let a_wins = rng.random_bool(0.5);
        let (win, lose) = if a_wins { (&a, &b) } else { (&b, &a) };
        if let Ok(p) = PreferencePair::new(
            dish.to_string(),
            win.clone(),
            lose.clone(),
            format!("annotator-{}", k % 3),
        ) {
            preferences.push(p);
        }
        preference_candidates.push(PreferenceCandidate {
            candidate_id: format!("cand-{k:04}"),
            prompt: dish.to_string(),
            image_a: a,
            image_b: b,
            choice: PreferenceChoice::Pending,
        });
    }

    let dims = [
        Dimension::Fidelity,
        Dimension::Texture,
        Dimension::Composition,
        Dimension::Scene,
        Dimension::Lighting,
        Dimension::Subject,
        Dimension::Effectiveness,
        Dimension::Consistency,
        Dimension::Aesthetics,
    ];
    let human_sheets = (0..opts.human_sheets)
        .map(|k| {
            let scores: Vec<i64> = (0..10).map(|_| rng.random_range(1..=3)).collect();
            HumanScoreSheet::new(format!("sheet-{k:04}"), dims[k % dims.len()], &scores)
                .expect("scores in range")
        })
        .collect();

    Ok(SynthCorpus {
        records,
        quality,
        preferences,
        preference_candidates,
        human_sheets,
    })
}
