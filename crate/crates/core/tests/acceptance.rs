//! Acceptance checks, one line of output per criterion.
//!
//! Runs without the libtest harness so the report is a plain list:
//! `PASS <criterion>` or `FAIL <criterion>: <reason>`. The process exits
//! non-zero when any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use dishforge::captioning::{retrieve_with_query, CaptionEntry, CaptionLibrary};
use dishforge::config::PipelineConfig;
use dishforge::curation::{correct_name, decide_name, CurationSettings, NameChoice, NameVerdict};
use dishforge::data::image::pixel_agreement;
use dishforge::data::{
    apply_quality_annotations, decode_manifest, encode_manifest, Quality, QualityAnnotation, TagSet,
};
use dishforge::editset::{
    build_cep2p_pairs, build_inpaint_pairs, EditPair, EditType, EditsetSettings, ManualClock,
    Method, PairRequest, PreferenceCandidate, PreferenceChoice, PreferenceQueue, ReviewError,
    ReviewQueue, ReviewState, ReviewStatus,
};
use dishforge::eval::linalg::Matrix;
use dishforge::eval::{aggregate_scores, fid, frechet_distance, Dimension, GaussianStats, HumanScoreSheet};
use dishforge::par::Execution;
use dishforge::pipeline::{run_pipeline, Stage, Workspace};
use dishforge::providers::{GenerationProvider, MockProvider};
use dishforge::schedule::{
    build_preference_manifest, build_stage_manifest, mixture_rows, sample_mixture, MixtureSpec,
    Pool,
};
use dishforge::synth::{synthesize_corpus, SynthOptions};
use dishforge::{BlobStore, DishRecord, EmbeddingVector, ImageRef, MediaType, PreferencePair, Status};

type Check = Result<(), String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("FID correctness", fid_correctness),
        ("name correction decision table", name_correction),
        ("caption retrieval argmax", caption_retrieval),
        ("coarse-to-fine stage manifests", stage_manifests),
        ("mixture composition", mixture_composition),
        ("editset bidirectionality and rho trade-off", editset),
        ("end-to-end determinism", end_to_end),
        ("review gate", review_gate),
        ("human-score aggregation", human_scores),
    ];
    // Panics are reported as failures, not printed twice.
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in criteria {
        let started = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(check)) {
            Ok(r) => r,
            Err(payload) => Err(payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        let ms = started.elapsed().as_millis();
        match outcome {
            Ok(()) => println!("PASS {name} ({ms} ms)"),
            Err(reason) => {
                failed += 1;
                println!("FAIL {name} ({ms} ms): {reason}");
            }
        }
    }
    println!("{} of {} criteria passed", 9 - failed, 9);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn mock(dir: &Path, seed: u64) -> MockProvider {
    MockProvider::new(Arc::new(BlobStore::open(dir).unwrap()), seed)
}

// ---------------------------------------------------------------- FID

fn stats(mean: Vec<f64>, cov: Matrix) -> GaussianStats {
    GaussianStats::new(mean, cov, 100).unwrap()
}

fn to_dmatrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    DMatrix::from_fn(n, n, |i, j| rows[i][j])
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// Fréchet distance through nalgebra's eigensolver.
fn fid_oracle(mu_a: &[f64], cov_a: &DMatrix<f64>, mu_b: &[f64], cov_b: &DMatrix<f64>) -> f64 {
    let diff: f64 = mu_a.iter().zip(mu_b).map(|(a, b)| (a - b).powi(2)).sum();
    let ra = psd_sqrt(cov_a);
    let inner = &ra * cov_b * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    diff + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt
}

fn random_spd(d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    let spd = &a * a.transpose() + DMatrix::identity(d, d) * 0.5;
    (0..d).map(|i| (0..d).map(|j| spd[(i, j)]).collect()).collect()
}

fn sample(mu: &[f64], cov: &[Vec<f64>], n: usize, rng: &mut ChaCha8Rng) -> Vec<EmbeddingVector> {
    let d = mu.len();
    let l = to_dmatrix(cov).cholesky().expect("spd").l();
    (0..n)
        .map(|_| {
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = &l * z;
            EmbeddingVector::new((0..d).map(|i| x[i] + mu[i]).collect()).unwrap()
        })
        .collect()
}

fn fid_correctness() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    // Diagonal Gaussians: d = |mu_a - mu_b|^2 + sum (sa + sb - 2 sqrt(sa sb)).
    for case in 0..20 {
        let d = [1, 2, 3, 5, 8][case % 5];
        let mu_a: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mu_b: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let sa: Vec<f64> = (0..d).map(|_| rng.random_range(0.01..4.0)).collect();
        let sb: Vec<f64> = (0..d).map(|_| rng.random_range(0.01..4.0)).collect();
        let expected: f64 = mu_a.iter().zip(&mu_b).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            + sa.iter()
                .zip(&sb)
                .map(|(a, b)| a + b - 2.0 * (a * b).sqrt())
                .sum::<f64>();
        let got = frechet_distance(
            &stats(mu_a.clone(), Matrix::diag(&sa)),
            &stats(mu_b.clone(), Matrix::diag(&sb)),
        )
        .map_err(|e| e.to_string())?;
        ensure!(
            (got - expected).abs() <= 1e-6,
            "diagonal case {case}: got {got}, closed form {expected}"
        );
    }

    // Full covariances against an independent eigensolver.
    for case in 0..10 {
        let d = 2 + case % 6;
        let ca = random_spd(d, &mut rng);
        let cb = random_spd(d, &mut rng);
        let mu_a: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mu_b: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let expected = fid_oracle(&mu_a, &to_dmatrix(&ca), &mu_b, &to_dmatrix(&cb));
        let got = frechet_distance(
            &stats(mu_a, Matrix::from_rows(&ca)),
            &stats(mu_b, Matrix::from_rows(&cb)),
        )
        .map_err(|e| e.to_string())?;
        ensure!(
            (got - expected).abs() <= 1e-6 * expected.abs().max(1.0),
            "full case {case}: got {got}, oracle {expected}"
        );
    }

    // fid(X, X) = 0 and symmetry.
    for set in 0..50 {
        let x: Vec<EmbeddingVector> = (0..100)
            .map(|_| {
                EmbeddingVector::new((0..16).map(|_| rng.random_range(-2.0..2.0)).collect())
                    .unwrap()
            })
            .collect();
        let y: Vec<EmbeddingVector> = (0..100)
            .map(|_| {
                EmbeddingVector::new((0..16).map(|_| rng.random_range(-1.0..3.0)).collect())
                    .unwrap()
            })
            .collect();
        let self_fid = fid(&x, &x).map_err(|e| e.to_string())?;
        ensure!(self_fid <= 1e-8, "set {set}: fid(X, X) = {self_fid:e}");
        let xy = fid(&x, &y).map_err(|e| e.to_string())?;
        let yx = fid(&y, &x).map_err(|e| e.to_string())?;
        ensure!(
            (xy - yx).abs() <= 1e-6 * xy.abs().max(1e-12),
            "set {set}: fid(X,Y) = {xy}, fid(Y,X) = {yx}"
        );
    }

    // Sampled Gaussians approach the analytic value.
    let d = 8;
    let ca = random_spd(d, &mut rng);
    let cb = random_spd(d, &mut rng);
    let mu_a = vec![0.0; d];
    let mu_b: Vec<f64> = (0..d).map(|i| if i % 2 == 0 { 1.0 } else { -0.5 }).collect();
    let analytic = fid_oracle(&mu_a, &to_dmatrix(&ca), &mu_b, &to_dmatrix(&cb));
    let xa = sample(&mu_a, &ca, 10_000, &mut rng);
    let xb = sample(&mu_b, &cb, 10_000, &mut rng);
    let sampled = fid(&xa, &xb).map_err(|e| e.to_string())?;
    ensure!(
        (sampled - analytic).abs() <= 0.05 * analytic,
        "sampled fid {sampled} vs analytic {analytic}"
    );

    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(())
}

// ---------------------------------------------------------------- names

/// The decision table written as "best admissible candidate, raw first".
fn decision_oracle(valid: bool, sim_raw: f64, sim_corr: f64, tau: f64) -> NameChoice {
    if !valid {
        return NameChoice::NotADish;
    }
    let candidates = [(NameChoice::Raw, sim_raw), (NameChoice::Corrected, sim_corr)];
    let mut best: Option<(NameChoice, f64)> = None;
    for (choice, score) in candidates {
        if score < tau {
            continue;
        }
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((choice, score));
        }
    }
    best.map_or(NameChoice::BelowThreshold, |(c, _)| c)
}

fn kept(c: NameChoice) -> bool {
    matches!(c, NameChoice::Raw | NameChoice::Corrected)
}

fn name_correction() -> Check {
    let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let mut cases = 0;
    for valid in [true, false] {
        for &sr in &grid {
            for &sc in &grid {
                for tau in [0.2, 0.35, 0.5] {
                    let got = decide_name(valid, sr, Some(sc), tau);
                    let want = decision_oracle(valid, sr, sc, tau);
                    ensure!(
                        got == want,
                        "valid={valid} raw={sr} corr={sc} tau={tau}: {got:?} != {want:?}"
                    );
                    cases += 1;
                }
            }
        }
    }
    ensure!(cases == 2 * 11 * 11 * 3, "grid has {cases} cases");

    // Monotonicity of the pure rule.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let valid = rng.random_bool(0.8);
        let (sr, sc) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let (t1, t2) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let (a, b) = (decide_name(valid, sr, Some(sc), lo), decide_name(valid, sr, Some(sc), hi));
        ensure!(!kept(b) || a == b, "raising tau {lo}->{hi} changed {a:?} to {b:?}");
    }

    // Monotonicity through the full correction path on 1000 mock records.
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let m = mock(dir.path(), 21);
    let corpus = synthesize_corpus(
        &m,
        &SynthOptions {
            records: 1000,
            seed: 21,
            ..SynthOptions::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let thresholds = [-0.2, 0.0, 0.2, 0.35, 0.5, 0.7, 0.9];
    for mut record in corpus.records {
        record.status = Status::Filtered;
        let mut prev_kept = true;
        let mut prev_verdict: Option<NameVerdict> = None;
        for tau in thresholds {
            let settings = CurationSettings {
                threshold: tau,
                ..CurationSettings::default()
            };
            let d = correct_name(&record, &m, &m, &settings).map_err(|e| e.to_string())?;
            let now_kept = !matches!(d.verdict, NameVerdict::Discard(_));
            ensure!(
                prev_kept || !now_kept,
                "{}: discarded below tau {tau} but kept at {tau}",
                record.record_id
            );
            if now_kept {
                if let Some(prev) = &prev_verdict {
                    ensure!(prev == &d.verdict, "{}: kept name changed with tau", record.record_id);
                }
                prev_verdict = Some(d.verdict.clone());
            }
            prev_kept = now_kept;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- retrieval

fn cosine_oracle(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn caption_retrieval() -> Check {
    let dims = 24;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let dishes: Vec<String> = (0..50).map(|i| format!("dish {i}")).collect();
    let mut raw: Vec<(String, String, Vec<f64>)> = Vec::new();
    for i in 0..5000 {
        let dish = dishes[rng.random_range(0..dishes.len())].clone();
        let v: Vec<f64> = (0..dims).map(|_| rng.random_range(-1.0..1.0)).collect();
        raw.push((format!("e{:05}", (i * 7919) % 5000), dish, v));
    }
    let entries: Vec<CaptionEntry> = raw
        .iter()
        .map(|(id, dish, v)| CaptionEntry {
            entry_id: id.clone(),
            dish_name: dish.clone(),
            caption: format!("caption for {id}"),
            embedding: EmbeddingVector::new(v.clone()).unwrap(),
        })
        .collect();
    let lib = CaptionLibrary::new(dims, entries)?;
    let round_trip = {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let path = dir.path().join("lib.jsonl");
        lib.save(&path).map_err(|e| e.to_string())?;
        CaptionLibrary::load(&path).map_err(|e| e.to_string())?
    };

    for q in 0..1000 {
        let dish = &dishes[rng.random_range(0..dishes.len())];
        let query: Vec<f64> = (0..dims).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut best: Option<(&str, f64)> = None;
        for (id, d, v) in &raw {
            if d != dish {
                continue;
            }
            let s = cosine_oracle(&query, v);
            let better = match best {
                None => true,
                Some((bid, bs)) => s > bs || (s == bs && id.as_str() < bid),
            };
            if better {
                best = Some((id, s));
            }
        }
        let qv = EmbeddingVector::new(query).unwrap();
        for l in [&lib, &round_trip] {
            let got = retrieve_with_query(l, dish, &qv).map_err(|e| e.to_string())?;
            let want = best.map(|b| b.0);
            ensure!(
                Some(got.entry_id.as_str()) == want,
                "query {q} ({dish}): got {}, linear scan {want:?}",
                got.entry_id
            );
        }
    }

    // Constructed ties: identical embeddings resolve to the lowest id,
    // whatever the insertion order.
    let tied = |ids: &[&str]| -> Result<String, String> {
        let entries = ids
            .iter()
            .map(|id| CaptionEntry {
                entry_id: id.to_string(),
                dish_name: "红烧肉".into(),
                caption: format!("c {id}"),
                embedding: EmbeddingVector::new(vec![1.0, 2.0, 0.5]).unwrap(),
            })
            .collect();
        let lib = CaptionLibrary::new(3, entries)?;
        let q = EmbeddingVector::new(vec![0.3, 0.1, 0.9]).unwrap();
        Ok(retrieve_with_query(&lib, "红烧肉", &q)
            .map_err(|e| e.to_string())?
            .entry_id
            .clone())
    };
    for order in [["c", "a", "b"], ["b", "c", "a"], ["a", "b", "c"]] {
        let got = tied(&order)?;
        ensure!(got == "a", "tie over {order:?} resolved to {got}");
    }
    Ok(())
}

// ---------------------------------------------------------------- schedule

const SENTINEL: &str = "RECAPTION-SENTINEL";

fn image(n: u64) -> ImageRef {
    ImageRef::new(format!("{n:064x}"), 64, 64, MediaType::Png).unwrap()
}

fn recaptioned(i: u64, quality: Quality) -> DishRecord {
    let mut r = DishRecord::new(format!("r{i:04}"), "驴打滚", image(i));
    r.status = Status::Recaptioned;
    r.name_final = Some("驴打滚".into());
    r.tags = Some(TagSet {
        tableware: Some("a white ceramic bowl".into()),
        background: Some("a brown wooden tabletop".into()),
        aesthetic: Some("high aesthetic quality".into()),
        camera_angle: Some("30-degree shooting angle".into()),
    });
    r.recaption = Some(format!("Introduction to 驴打滚. {SENTINEL}-{i}"));
    let id = r.record_id.clone();
    apply_quality_annotations(std::slice::from_mut(&mut r), &[QualityAnnotation { record_id: id, quality }]);
    r
}

fn stage_manifests() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let records: Vec<DishRecord> = (0..200)
        .map(|i| {
            let q = if rng.random_bool(0.3) {
                Quality::UltraHigh
            } else {
                Quality::Standard
            };
            recaptioned(i, q)
        })
        .collect();
    let ultra: BTreeSet<&str> = records
        .iter()
        .filter(|r| r.quality() == Quality::UltraHigh)
        .map(|r| r.record_id.as_str())
        .collect();

    for stage in 1..=4u8 {
        let rows = build_stage_manifest(stage, &records).map_err(|e| e.to_string())?;
        ensure!(!rows.is_empty(), "stage {stage} is empty");
        let want_res = if stage <= 2 { 512 } else { 1024 };
        for row in &rows {
            ensure!(row.stage == stage, "row {} in stage {stage} says {}", row.record_id, row.stage);
            ensure!(
                row.resolution == want_res,
                "stage {stage} row {} at {}",
                row.record_id,
                row.resolution
            );
            let has = row.text.contains(SENTINEL);
            ensure!(
                has == (stage >= 2),
                "stage {stage} row {} recaption presence {has}",
                row.record_id
            );
            ensure!(
                row.text.starts_with("驴打滚, served in a white ceramic bowl, placed on a brown wooden tabletop, high aesthetic quality, 30-degree shooting angle"),
                "stage {stage} text {:?}",
                row.text
            );
        }
        if stage == 4 {
            let ids: BTreeSet<&str> = rows.iter().map(|r| r.record_id.as_str()).collect();
            ensure!(ids == ultra, "stage 4 rows differ from the ultra-high records");
        } else {
            ensure!(rows.len() == records.len(), "stage {stage} dropped records");
        }
    }

    let pairs: Vec<PreferencePair> = (0..30)
        .map(|i| {
            PreferencePair::new(
                format!("prompt {}", i % 7),
                image(1000 + 2 * i),
                image(1001 + 2 * i),
                format!("annotator-{}", i % 3),
            )
            .unwrap()
        })
        .collect();
    let rows = build_preference_manifest(&pairs).map_err(|e| e.to_string())?;
    ensure!(rows.len() == pairs.len(), "stage 5 has {} rows", rows.len());
    let bytes = encode_manifest(&rows).map_err(|e| e.to_string())?;
    let as_pairs: Vec<PreferencePair> = decode_manifest(&bytes).map_err(|e| e.to_string())?;
    for row in &rows {
        ensure!(row.resolution == 1024, "stage 5 resolution {}", row.resolution);
        ensure!(
            row.image_win.blob_id != row.image_lose.blob_id,
            "stage 5 row with identical images"
        );
    }
    let key = |p: &PreferencePair| {
        (p.prompt.clone(), p.annotator_id.clone(), p.image_win.blob_id.clone(), p.image_lose.blob_id.clone())
    };
    ensure!(
        as_pairs.iter().map(key).collect::<BTreeSet<_>>() == pairs.iter().map(key).collect::<BTreeSet<_>>(),
        "stage 5 rows do not read back as the input preference pairs"
    );
    Ok(())
}

// ---------------------------------------------------------------- mixture

fn mixture_composition() -> Check {
    let dish: Vec<u32> = (0..30).collect();
    let general: Vec<u32> = (1000..1040).collect();
    for j in 1..=10u32 {
        let ratio = f64::from(j) / 10.0;
        for k in 1..=50usize {
            let spec = MixtureSpec::new(ratio, 17 + k as u64).map_err(|e| e.to_string())?;
            let batch = sample_mixture(&dish, &general, &spec, k).map_err(|e| e.to_string())?;
            ensure!(batch.len() == k, "k={k} ratio={ratio}: batch of {}", batch.len());
            let n_dish = batch.iter().filter(|(p, _)| *p == Pool::Dish).count();
            // Half-up rounding of k * j / 10 in integers.
            let want = (k * j as usize + 5) / 10;
            ensure!(n_dish == want, "k={k} ratio={ratio}: {n_dish} dish items, want {want}");
            for (pool, item) in &batch {
                let from_dish = *item < 1000;
                ensure!(from_dish == (*pool == Pool::Dish), "item {item} tagged {pool:?}");
            }
        }
    }
    let spec = MixtureSpec::new(0.3, 2024).map_err(|e| e.to_string())?;
    let first = encode_manifest(&mixture_rows(
        sample_mixture(&dish, &general, &spec, 37).map_err(|e| e.to_string())?,
    ))
    .map_err(|e| e.to_string())?;
    for rerun in 0..5 {
        let again = encode_manifest(&mixture_rows(
            sample_mixture(&dish, &general, &spec, 37).map_err(|e| e.to_string())?,
        ))
        .map_err(|e| e.to_string())?;
        ensure!(again == first, "rerun {rerun} produced different bytes");
    }
    Ok(())
}

// ---------------------------------------------------------------- editset

fn editset() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let m = mock(dir.path(), 8);
    let corpus = synthesize_corpus(
        &m,
        &SynthOptions {
            records: 200,
            seed: 8,
            promotion_fraction: 0.0,
            ..SynthOptions::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let settings = EditsetSettings::default();
    let mut pairs: Vec<EditPair> = Vec::new();
    for mut r in corpus.records {
        r.status = Status::Tagged;
        r.name_final = Some(r.name_raw.clone());
        pairs.extend(build_inpaint_pairs(&r, &m, &m, &settings).map_err(|e| e.to_string())?);
    }
    let forward: Vec<&EditPair> = pairs.iter().filter(|p| p.method == Method::Inpaint).collect();
    let reversed: Vec<&EditPair> = pairs
        .iter()
        .filter(|p| p.method == Method::InpaintReversed)
        .collect();
    ensure!(forward.len() >= 50, "only {} inpainting pairs", forward.len());
    ensure!(
        forward.len() == reversed.len(),
        "{} forward vs {} reversed",
        forward.len(),
        reversed.len()
    );
    for p in &forward {
        let partners: Vec<&&EditPair> = reversed
            .iter()
            .filter(|q| q.source == p.target && q.target == p.source)
            .collect();
        ensure!(
            partners.len() == 1,
            "pair {} has {} reversed partners",
            p.pair_id,
            partners.len()
        );
        ensure!(
            p.edit_type == EditType::Remove && partners[0].edit_type == EditType::Add,
            "pair {} edit types {:?}/{:?}",
            p.pair_id,
            p.edit_type,
            partners[0].edit_type
        );
    }

    // The rho sweep: consistency with the source never rises with rho.
    let checkpoint = "ft-acceptance";
    let request = PairRequest {
        source_prompt: "a bowl of beef noodle soup".into(),
        target_prompt: "a bowl of beef noodle soup with rising steam".into(),
        instruction: "add rising steam to the dish".into(),
        edit_type: EditType::Add,
        checkpoint: checkpoint.into(),
    };
    let grid: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    let seeds: Vec<u64> = (0..25).collect();
    let swept = build_cep2p_pairs(&request, &grid, &seeds, &m, Execution::default())
        .map_err(|e| e.to_string())?;
    let store = m.store();
    let mut by_seed: BTreeMap<u64, Vec<(f64, f64)>> = BTreeMap::new();
    for p in &swept {
        let sim = pixel_agreement(
            &store.get(&p.source).map_err(|e| e.to_string())?,
            &store.get(&p.target).map_err(|e| e.to_string())?,
        )
        .ok_or("undecodable pair image")?;
        by_seed
            .entry(p.seed.ok_or("cep2p pair without seed")?)
            .or_default()
            .push((p.rho.ok_or("cep2p pair without rho")?, sim));
    }
    ensure!(by_seed.len() == seeds.len(), "sweep covered {} seeds", by_seed.len());
    for (seed, mut points) in by_seed {
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in points.windows(2) {
            ensure!(
                w[1].1 <= w[0].1,
                "seed {seed}: similarity rose from {} at rho {} to {} at rho {}",
                w[0].1,
                w[0].0,
                w[1].1,
                w[1].0
            );
        }
    }
    // Every pair shares its source image across rho for a given seed.
    let source = m
        .generate(&request.source_prompt, 0, checkpoint)
        .map_err(|e| e.to_string())?;
    ensure!(
        swept.iter().filter(|p| p.seed == Some(0)).all(|p| p.source == source),
        "seed 0 pairs do not share the source image"
    );
    Ok(())
}

// ---------------------------------------------------------------- end to end

fn test_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.editset.settings.poll_interval_ms = 5;
    cfg
}

fn run_all(root: &Path, stages: &[Stage]) -> Result<(), String> {
    let ws = Workspace::open(root, test_config()).map_err(|e| e.to_string())?;
    run_pipeline(&ws, stages).map_err(|e| e.to_string())?;
    Ok(())
}

fn seed_workspace(root: &Path) -> Result<(), String> {
    let ws = Workspace::open(root, test_config()).map_err(|e| e.to_string())?;
    ws.write_synthetic_inputs(&SynthOptions {
        records: 50,
        ..SynthOptions::default()
    })
    .map_err(|e| e.to_string())?;
    Ok(())
}

/// Relative path to contents for every file under `root`.
fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().flatten().collect();
        entries.sort_by_key(|e| e.path());
        for e in entries {
            let p = e.path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                let rel = p.strip_prefix(base).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn compare(a: &BTreeMap<String, Vec<u8>>, b: &BTreeMap<String, Vec<u8>>, what: &str) -> Check {
    let ka: Vec<&String> = a.keys().collect();
    let kb: Vec<&String> = b.keys().collect();
    ensure!(ka == kb, "{what}: file sets differ: {ka:?} vs {kb:?}");
    for (k, v) in a {
        ensure!(&b[k] == v, "{what}: {k} differs");
    }
    Ok(())
}

fn end_to_end() -> Check {
    let started = Instant::now();
    let one = tempfile::tempdir().map_err(|e| e.to_string())?;
    let two = tempfile::tempdir().map_err(|e| e.to_string())?;
    for d in [one.path(), two.path()] {
        seed_workspace(d)?;
        run_all(d, &Stage::ALL)?;
    }
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(30), "two full runs took {elapsed:?}");
    let a = snapshot(one.path());
    compare(&a, &snapshot(two.path()), "repeat run")?;
    let manifests: Vec<&String> = a.keys().filter(|k| k.starts_with("manifests/")).collect();
    for expected in [
        "curated.jsonl",
        "recaptioned.jsonl",
        "library.jsonl",
        "stage1.jsonl",
        "stage4.jsonl",
        "stage5.jsonl",
        "edit_candidates.jsonl",
        "review_queue.jsonl",
        "eval_report.json",
    ] {
        ensure!(
            manifests.iter().any(|k| k.ends_with(expected)),
            "no {expected} after a full run"
        );
    }

    // Stopped after recaptioning, then resumed.
    let three = tempfile::tempdir().map_err(|e| e.to_string())?;
    seed_workspace(three.path())?;
    run_all(three.path(), &[Stage::Curate, Stage::Recaption])?;
    run_all(three.path(), &Stage::ALL)?;
    compare(&a, &snapshot(three.path()), "resumed run")?;

    // Crashed after writing the library but before its marker.
    let four = tempfile::tempdir().map_err(|e| e.to_string())?;
    seed_workspace(four.path())?;
    run_all(four.path(), &[Stage::Curate, Stage::Recaption, Stage::Library])?;
    std::fs::remove_file(four.path().join("markers/library.json")).map_err(|e| e.to_string())?;
    run_all(four.path(), &Stage::ALL)?;
    compare(&a, &snapshot(four.path()), "run resumed after a lost marker")?;

    // A second pass over an unchanged workspace skips everything.
    let ws = Workspace::open(one.path(), test_config()).map_err(|e| e.to_string())?;
    let report = run_pipeline(&ws, &Stage::ALL).map_err(|e| e.to_string())?;
    ensure!(report.all_skipped(), "rerun did work: {report:?}");
    Ok(())
}

// ---------------------------------------------------------------- review

fn edit_pair(i: u64) -> EditPair {
    EditPair {
        pair_id: format!("p{i:03}"),
        source: image(10_000 + i),
        target: image(20_000 + i),
        instruction: "remove the scallion from the dish".into(),
        edit_type: EditType::Remove,
        method: Method::Inpaint,
        rho: None,
        seed: None,
        checkpoint: None,
        record_id: None,
        review: ReviewStatus::Pending,
    }
}

fn legal<S: ReviewState>(from: S, to: S) -> bool {
    (from == S::PENDING && to != S::PENDING) || (from == S::SKIPPED && to.is_final())
}

fn review_gate() -> Check {
    let clock = Arc::new(ManualClock::new(0));

    // Edit pairs: every (from, to) combination.
    for &from in ReviewStatus::ALL {
        for &to in ReviewStatus::ALL {
            let mut q = ReviewQueue::new(600, clock.clone());
            q.enqueue([edit_pair(0)]);
            if from != ReviewStatus::Pending {
                q.verdict("p000", from, "setup").map_err(|e| e.to_string())?;
            }
            let result = q.verdict("p000", to, "ann");
            let state = q.get("p000").unwrap().item.review;
            if legal(from, to) {
                ensure!(result.is_ok(), "{from:?} -> {to:?} refused: {result:?}");
                ensure!(state == to, "{from:?} -> {to:?} left {state:?}");
            } else {
                ensure!(
                    matches!(
                        result,
                        Err(ReviewError::IllegalTransition { .. } | ReviewError::AlreadyReviewed(_))
                    ),
                    "{from:?} -> {to:?} accepted: {result:?}"
                );
                ensure!(state == from, "refused {from:?} -> {to:?} still changed state");
            }
        }
    }

    // Preference candidates: same matrix.
    for &from in PreferenceChoice::ALL {
        for &to in PreferenceChoice::ALL {
            let mut q = PreferenceQueue::new(600, clock.clone());
            q.enqueue([PreferenceCandidate {
                candidate_id: "c0".into(),
                prompt: "红烧肉".into(),
                image_a: image(1),
                image_b: image(2),
                choice: PreferenceChoice::Pending,
            }]);
            if from != PreferenceChoice::Pending {
                q.verdict("c0", from, "setup").map_err(|e| e.to_string())?;
            }
            let ok = q.verdict("c0", to, "ann").is_ok();
            ensure!(ok == legal(from, to), "preference {from:?} -> {to:?}: accepted={ok}");
        }
    }

    // Export contains exactly the approved pairs.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut q = ReviewQueue::new(600, clock.clone());
    q.enqueue((0..200).map(edit_pair));
    ensure!(q.export_approved().is_empty(), "export before any verdict is not empty");
    let mut approved = BTreeSet::new();
    for i in 0..200u64 {
        let id = format!("p{i:03}");
        let v = match rng.random_range(0..4) {
            0 => continue,
            1 => ReviewStatus::Approved,
            2 => ReviewStatus::Rejected,
            _ => ReviewStatus::Skipped,
        };
        q.verdict(&id, v, "ann").map_err(|e| e.to_string())?;
        if v == ReviewStatus::Skipped && rng.random_bool(0.5) {
            q.verdict(&id, ReviewStatus::Approved, "ann").map_err(|e| e.to_string())?;
            approved.insert(id);
        } else if v == ReviewStatus::Approved {
            approved.insert(id);
        }
    }
    let exported: BTreeSet<String> = q.export_approved().into_iter().map(|r| r.pair_id).collect();
    ensure!(exported == approved, "export differs from the approved set");
    Ok(())
}

// ---------------------------------------------------------------- human scores

fn human_scores() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
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
    let mut sheets = Vec::new();
    let mut brute: BTreeMap<Dimension, Vec<i64>> = BTreeMap::new();
    for s in 0..60 {
        let dim = dims[rng.random_range(0..dims.len())];
        let n = rng.random_range(1..20);
        let scores: Vec<i64> = (0..n).map(|_| rng.random_range(1..=3)).collect();
        brute.entry(dim).or_default().extend(&scores);
        sheets.push(HumanScoreSheet::new(format!("s{s}"), dim, &scores).map_err(|e| e.to_string())?);
    }
    let summary = aggregate_scores(&sheets);
    ensure!(summary.len() == brute.len(), "{} dimensions summarized", summary.len());
    for row in &summary {
        let all = &brute[&row.dimension];
        let mean = all.iter().sum::<i64>() as f64 / all.len() as f64;
        ensure!(row.count == all.len(), "{:?}: count {}", row.dimension, row.count);
        ensure!(
            (row.mean - mean).abs() <= 5e-4,
            "{:?}: mean {} vs brute force {mean}",
            row.dimension,
            row.mean
        );
    }

    // Fixed fixture with exact means.
    let fixture = [
        HumanScoreSheet::new("a", Dimension::Fidelity, &[1, 2, 3]).unwrap(),
        HumanScoreSheet::new("b", Dimension::Fidelity, &[3, 3]).unwrap(),
        HumanScoreSheet::new("c", Dimension::Aesthetics, &[2]).unwrap(),
    ];
    let s = aggregate_scores(&fixture);
    ensure!(
        s.len() == 2
            && s[0].dimension == Dimension::Fidelity
            && s[0].mean == 2.4
            && s[0].count == 5
            && s[1].mean == 2.0,
        "fixture summary {s:?}"
    );

    // Only 1, 2 and 3 are scores.
    for bad in [-1i64, 0, 4, 5, 10] {
        ensure!(
            HumanScoreSheet::new("x", Dimension::Scene, &[2, bad]).is_err(),
            "score {bad} accepted"
        );
        let line = format!(
            "{{\"schema_version\":\"dishforge/1\",\"sheet_id\":\"x\",\"dimension\":\"scene\",\"scores\":[{bad}]}}\n"
        );
        ensure!(
            decode_manifest::<HumanScoreSheet>(line.as_bytes()).is_err(),
            "score {bad} read from a manifest"
        );
    }
    Ok(())
}
