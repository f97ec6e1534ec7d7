//! Deterministic offline providers.
//!
//! Every answer is a pure function of the inputs and the global seed. The
//! rules below are part of the contract; tests elsewhere rely on them.
//!
//! * `chat` reads a directive from the first line of the prompt:
//!   `VALIDATE: <name>` answers `no` when the name contains an ASCII digit
//!   (discount strings, prices) and `yes` otherwise; `CORRECT: <name>` drops
//!   bracketed segments and marketing prefixes such as 招牌; `DESCRIBE:
//!   <name>` returns a generic description; `REWRITE:` merges its `caption:`
//!   and `request:` lines. Anything else gets a hash-derived reply.
//! * `caption_image` answers a JSON tag object for contexts starting with
//!   `TAGS:`, a comma list of removable elements for `ELEMENTS:`, and a
//!   caption keyed on `(context, blob)` otherwise.
//! * `inspect_image` reports no watermark for blob ids whose first hex digit
//!   is even.
//! * Embeddings are 64-dim: hashed character unigrams and bigrams (so texts
//!   sharing characters drift together) plus a small keyed-hash term in
//!   `[-1, 1]`. An image carrying a `dish` text chunk embeds exactly like
//!   that text.
//! * `detect` returns one box for every element the image lists (the same
//!   list `ELEMENTS:` reports) and none otherwise.
//! * `generate_pair` replaces a fixed, seed-determined pixel subset of size
//!   about `rho * pixels`; subsets are nested in `rho`, so pixel agreement
//!   between the two images never increases with `rho`. `rho = 0` returns the
//!   source image twice.
//! * Fine-tune jobs report `Running` on the first poll and `Done` on the
//!   second.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use crate::data::image::{decode_luma, encode_gray_png, png_text};
use crate::data::{normalize_name, BlobStore, EmbeddingVector, ImageRef, MediaType};
use crate::hashing::{fnv1a64, seed_from_parts, splitmix64, unit_f64};

use super::{
    check_pair_prompts, check_rho, non_empty, BBox, ChatProvider, EditToolProvider,
    EmbedProvider, FilterReport, FinetuneJob, FinetuneProvider, GenerationProvider, JobState,
    ProviderError, ProviderResult, VisionProvider,
};

pub const MOCK_DIMS: usize = 64;
pub const MOCK_IMAGE_SIZE: u32 = 64;
/// Weight of the keyed-hash term relative to the n-gram term.
const NOISE_WEIGHT: f64 = 0.15;

const MARKETING_PREFIXES: &[&str] = &["招牌", "特色", "秘制", "正宗", "家常", "精品", "私房"];
const REMOVABLE: &[&str] = &["coriander", "chili pepper", "scallion", "sesame seeds", "peanuts"];
const AESTHETIC: &[&str] = &[
    "high aesthetic quality",
    "medium aesthetic quality",
    "low aesthetic quality",
];
const TABLEWARE: &[&str] = &[
    "a white ceramic bowl",
    "a black stone plate",
    "a bamboo steamer",
    "a blue-and-white porcelain dish",
    "a cast iron pot",
];
const BACKGROUND: &[&str] = &[
    "a brown wooden tabletop",
    "a marble counter",
    "a red tablecloth",
    "a dark slate surface",
];
const ANGLE: &[&str] = &[
    "30-degree shooting angle",
    "45-degree shooting angle",
    "top-down shooting angle",
    "eye-level shooting angle",
];
const METHODS: &[&str] = &["stir-fried", "braised", "steamed", "deep-fried", "slow-simmered"];
const TEXTURES: &[&str] = &["tender", "crispy", "glutinous", "silky", "chewy"];
const COLORS: &[&str] = &["golden brown", "glossy red", "pale white", "deep amber", "bright green"];
const LIGHTING: &[&str] = &["soft window light", "warm restaurant lighting", "bright studio light"];

#[derive(Debug)]
struct MockJob {
    job: FinetuneJob,
    polls: u32,
}

/// Hash-driven stand-in for every provider role.
#[derive(Debug)]
pub struct MockProvider {
    store: Arc<BlobStore>,
    seed: u64,
    image_size: u32,
    fail_finetune: bool,
    jobs: Mutex<BTreeMap<String, MockJob>>,
}

fn pick<'a>(list: &[&'a str], word: u64) -> &'a str {
    list[(word % list.len() as u64) as usize]
}

/// The `CORRECT:` rule: strip bracketed segments and marketing prefixes.
pub fn mock_correct_name(name: &str) -> String {
    let mut out = String::new();
    let mut depth = 0usize;
    for c in name.chars() {
        match c {
            '（' | '(' | '【' | '[' => depth += 1,
            '）' | ')' | '】' | ']' => depth = depth.saturating_sub(1),
            _ if depth == 0 => out.push(c),
            _ => {}
        }
    }
    let mut s = out.trim().to_string();
    loop {
        let before = s.len();
        for p in MARKETING_PREFIXES {
            if let Some(rest) = s.strip_prefix(p) {
                s = rest.trim().to_string();
            }
        }
        if s.len() == before {
            break;
        }
    }
    if s.is_empty() {
        name.trim().to_string()
    } else {
        normalize_name(&s)
    }
}

fn split_directive(prompt: &str) -> (&str, &str) {
    let first = prompt.lines().next().unwrap_or("");
    match first.split_once(':') {
        Some((d, rest)) if !d.is_empty() && d.chars().all(|c| c.is_ascii_uppercase()) => {
            (d, rest.trim())
        }
        _ => ("", first),
    }
}

fn field_line<'a>(prompt: &'a str, key: &str) -> Option<&'a str> {
    prompt
        .lines()
        .find_map(|l| l.strip_prefix(key).map(str::trim))
}

impl MockProvider {
    pub fn new(store: Arc<BlobStore>, seed: u64) -> Self {
        MockProvider {
            store,
            seed,
            image_size: MOCK_IMAGE_SIZE,
            fail_finetune: false,
            jobs: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn with_image_size(mut self, size: u32) -> Self {
        assert!(size >= 8, "mock images need at least 8x8 pixels");
        self.image_size = size;
        self
    }

    /// Makes every fine-tune job end in `Failed`.
    pub fn with_failing_finetune(mut self) -> Self {
        self.fail_finetune = true;
        self
    }

    pub fn store(&self) -> &Arc<BlobStore> {
        &self.store
    }

    fn word(&self, op: &str, parts: &[&[u8]]) -> u64 {
        let seed = self.seed.to_le_bytes();
        let mut all: Vec<&[u8]> = vec![&seed, op.as_bytes()];
        all.extend_from_slice(parts);
        seed_from_parts(&all)
    }

    fn load(&self, image: &ImageRef) -> ProviderResult<Vec<u8>> {
        Ok(self.store.get(image)?)
    }

    /// Text embedding rule shared by `embed_text` and labelled images.
    pub fn text_embedding(&self, text: &str) -> EmbeddingVector {
        let norm: Vec<char> = normalize_name(text).chars().collect();
        let mut v = vec![0.0f64; MOCK_DIMS];
        let key = self.seed.to_le_bytes();
        let mut add = |gram: &str| {
            let mut bytes = key.to_vec();
            bytes.extend_from_slice(gram.as_bytes());
            let h = fnv1a64(&bytes);
            let idx = (h % MOCK_DIMS as u64) as usize;
            let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
            v[idx] += sign;
        };
        for c in &norm {
            add(&c.to_string());
        }
        for w in norm.windows(2) {
            add(&w.iter().collect::<String>());
        }
        let gram_norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
        let scale = NOISE_WEIGHT * gram_norm / (MOCK_DIMS as f64).sqrt();
        let mut state = self.word("embed-text", &[text.as_bytes()]);
        for x in v.iter_mut() {
            *x += scale * (2.0 * unit_f64(splitmix64(&mut state)) - 1.0);
        }
        nonzero(v)
    }

    fn hash_embedding(&self, op: &str, key: &[u8]) -> EmbeddingVector {
        let mut state = self.word(op, &[key]);
        let v = (0..MOCK_DIMS)
            .map(|_| 2.0 * unit_f64(splitmix64(&mut state)) - 1.0)
            .collect();
        nonzero(v)
    }

    fn store_png(
        &self,
        width: u32,
        height: u32,
        pixels: &[u8],
        text: &[(&str, &str)],
    ) -> ProviderResult<ImageRef> {
        let bytes = encode_gray_png(width, height, pixels, text);
        Ok(self.store.put(&bytes, MediaType::Png)?)
    }

    fn noise_pixels(&self, n: usize, mut state: u64) -> Vec<u8> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let w = splitmix64(&mut state);
            for b in w.to_le_bytes() {
                if out.len() < n {
                    out.push(b);
                }
            }
        }
        out
    }

    /// Synthetic image with a `dish` label and optional removable elements.
    pub fn synthesize_image(
        &self,
        label: &str,
        elements: &[&str],
        variant: u64,
    ) -> ProviderResult<ImageRef> {
        let size = self.image_size;
        let state = self.word("synth", &[label.as_bytes(), &variant.to_le_bytes()]);
        let pixels = self.noise_pixels((size * size) as usize, state);
        let joined = elements.join(",");
        self.store_png(
            size,
            size,
            &pixels,
            &[("dish", label), ("elements", joined.as_str())],
        )
    }

    /// Elements the mock considers removable for this image.
    fn elements_of(&self, image: &ImageRef, bytes: &[u8]) -> Vec<String> {
        let text = png_text(bytes);
        if let Some(list) = text.get("elements") {
            return list
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
        }
        if text.contains_key("inpainted") {
            return Vec::new();
        }
        let w = self.word("elements", &[image.blob_id.as_bytes()]);
        let count = (w % 3) as usize;
        let start = ((w >> 8) % REMOVABLE.len() as u64) as usize;
        (0..count)
            .map(|i| REMOVABLE[(start + i) % REMOVABLE.len()].to_string())
            .collect()
    }

    fn generate_pixels(&self, prompt: &str, seed: u64, checkpoint: &str) -> Vec<u8> {
        let size = self.image_size;
        let state = self.word(
            "generate",
            &[prompt.as_bytes(), &seed.to_le_bytes(), checkpoint.as_bytes()],
        );
        self.noise_pixels((size * size) as usize, state)
    }
}

fn nonzero(mut v: Vec<f64>) -> EmbeddingVector {
    if v.iter().all(|x| *x == 0.0) {
        v[0] = 1.0;
    }
    EmbeddingVector::new(v).expect("finite non-zero mock embedding")
}

impl ChatProvider for MockProvider {
    fn chat(&self, prompt: &str) -> ProviderResult<String> {
        non_empty("prompt", prompt)?;
        let (directive, arg) = split_directive(prompt);
        let h = self.word("chat", &[prompt.as_bytes()]);
        let reply = match directive {
            "VALIDATE" => {
                if arg.is_empty() || arg.chars().any(|c| c.is_ascii_digit()) {
                    "no".to_string()
                } else {
                    "yes".to_string()
                }
            }
            "CORRECT" => mock_correct_name(arg),
            "DESCRIBE" => {
                let k = self.word("describe", &[arg.as_bytes()]);
                format!(
                    "{arg} is a traditional Chinese dish, usually {}, {} in texture with a {} color; served warm [{:08x}]",
                    pick(METHODS, k),
                    pick(TEXTURES, k >> 8),
                    pick(COLORS, k >> 16),
                    k as u32
                )
            }
            "REWRITE" => {
                let caption = field_line(prompt, "caption:").unwrap_or("");
                let request = field_line(prompt, "request:").unwrap_or("");
                match (caption.is_empty(), request.is_empty()) {
                    (true, true) => format!("mock rewrite {:016x}", h),
                    (false, true) => caption.to_string(),
                    (true, false) => request.to_string(),
                    (false, false) => format!("{caption}, as requested: {request}"),
                }
            }
            _ => format!("mock reply {:016x}", h),
        };
        Ok(reply)
    }
}

impl VisionProvider for MockProvider {
    fn inspect_image(&self, image: &ImageRef) -> ProviderResult<FilterReport> {
        self.load(image)?;
        let first = u8::from_str_radix(&image.blob_id[..1], 16).unwrap_or(0);
        let second = u8::from_str_radix(&image.blob_id[1..2], 16).unwrap_or(0);
        let w = self.word("inspect", &[image.blob_id.as_bytes()]);
        let byte = |k: u32| ((w >> (8 * k)) & 0xff) as u32;
        let (width, height) = (i64::from(image.width), i64::from(image.height));
        let dish_bbox = if byte(2) < 8 {
            None
        } else {
            let mx = (width / 8).max(1);
            let my = (height / 8).max(1);
            let x0 = (byte(4) as i64) % mx;
            let y0 = (byte(5) as i64) % my;
            let x1 = width - (byte(6) as i64) % mx;
            let y1 = height - (byte(7) as i64) % my;
            if byte(3) < 13 {
                Some(BBox::new(x0, y0, width + 1 + (byte(6) as i64) % 16, y1))
            } else {
                Some(BBox::new(x0, y0, x1, y1))
            }
        };
        Ok(FilterReport {
            has_text: byte(0) < 13,
            has_watermark: first % 2 == 1 && second < 3,
            has_hands: byte(1) < 13,
            dish_bbox,
        })
    }

    fn caption_image(&self, image: &ImageRef, context: &str) -> ProviderResult<String> {
        let bytes = self.load(image)?;
        let text = png_text(&bytes);
        let label = text.get("dish").map(String::as_str).unwrap_or("a dish");
        let k = self.word("caption", &[context.as_bytes(), image.blob_id.as_bytes()]);
        let (directive, _) = split_directive(context);
        Ok(match directive {
            "TAGS" => {
                let t = self.word("tags", &[image.blob_id.as_bytes()]);
                serde_json::json!({
                    "aesthetic": pick(AESTHETIC, t),
                    "tableware": pick(TABLEWARE, t >> 8),
                    "background": pick(BACKGROUND, t >> 16),
                    "camera_angle": pick(ANGLE, t >> 24),
                })
                .to_string()
            }
            "ELEMENTS" => {
                let elements = self.elements_of(image, &bytes);
                if elements.is_empty() {
                    "none".to_string()
                } else {
                    elements.join(", ")
                }
            }
            _ => format!(
                "a close-up photo of {label}, {} surface, {}, {}, detail {:08x}",
                pick(COLORS, k),
                pick(TEXTURES, k >> 8),
                pick(LIGHTING, k >> 16),
                (k >> 32) as u32
            ),
        })
    }
}

impl EmbedProvider for MockProvider {
    fn dims(&self) -> usize {
        MOCK_DIMS
    }

    fn embed_text(&self, text: &str) -> ProviderResult<EmbeddingVector> {
        non_empty("text", text)?;
        Ok(self.text_embedding(text))
    }

    fn embed_image(&self, image: &ImageRef) -> ProviderResult<EmbeddingVector> {
        let bytes = self.load(image)?;
        Ok(match png_text(&bytes).get("dish") {
            Some(label) if !label.trim().is_empty() => self.text_embedding(label),
            _ => self.hash_embedding("embed-image", image.blob_id.as_bytes()),
        })
    }
}

impl EditToolProvider for MockProvider {
    fn detect(&self, image: &ImageRef, query: &str) -> ProviderResult<Vec<BBox>> {
        non_empty("query", query)?;
        let bytes = self.load(image)?;
        let query = query.trim();
        if !self.elements_of(image, &bytes).iter().any(|e| e == query) {
            return Ok(Vec::new());
        }
        let (w, h) = (i64::from(image.width), i64::from(image.height));
        let k = self.word("detect", &[image.blob_id.as_bytes(), query.as_bytes()]);
        let bw = (w / 4).max(1);
        let bh = (h / 4).max(1);
        let x0 = (k % (w - bw + 1) as u64) as i64;
        let y0 = ((k >> 20) % (h - bh + 1) as u64) as i64;
        Ok(vec![BBox::new(x0, y0, x0 + bw, y0 + bh)])
    }

    fn segment(&self, image: &ImageRef, bbox: BBox) -> ProviderResult<ImageRef> {
        self.load(image)?;
        if !bbox.is_well_formed() || !bbox.within(image.width, image.height) {
            return Err(ProviderError::InvalidInput(format!(
                "bbox {:?} outside {}x{} image",
                <[i64; 4]>::from(bbox),
                image.width,
                image.height
            )));
        }
        let (w, h) = (image.width, image.height);
        let mut mask = vec![0u8; (w * h) as usize];
        for y in bbox.y0..bbox.y1 {
            for x in bbox.x0..bbox.x1 {
                mask[(y as u32 * w + x as u32) as usize] = 255;
            }
        }
        self.store_png(w, h, &mask, &[])
    }

    fn inpaint(&self, image: &ImageRef, mask: &ImageRef) -> ProviderResult<ImageRef> {
        let bytes = self.load(image)?;
        let mask_bytes = self.load(mask)?;
        if (image.width, image.height) != (mask.width, mask.height) {
            return Err(ProviderError::InvalidInput(
                "mask dimensions differ from image".into(),
            ));
        }
        let (_, _, mask_px) = decode_luma(&mask_bytes)
            .ok_or_else(|| ProviderError::InvalidInput("undecodable mask".into()))?;
        if !mask_px.iter().any(|&m| m > 127) {
            return Err(ProviderError::EmptyMask);
        }
        let (w, h, mut px) = decode_luma(&bytes)
            .ok_or_else(|| ProviderError::InvalidInput("undecodable image".into()))?;
        let mut state = self.word(
            "inpaint",
            &[image.blob_id.as_bytes(), mask.blob_id.as_bytes()],
        );
        for (p, m) in px.iter_mut().zip(&mask_px) {
            let w = splitmix64(&mut state);
            if *m > 127 {
                // XOR with a non-zero byte always changes the pixel.
                *p ^= 1 + (w % 255) as u8;
            }
        }
        let text = png_text(&bytes);
        let label = text.get("dish").cloned().unwrap_or_default();
        let mut chunks = vec![("inpainted", "1")];
        if !label.is_empty() {
            chunks.push(("dish", label.as_str()));
        }
        self.store_png(w, h, &px, &chunks)
    }
}

impl GenerationProvider for MockProvider {
    fn generate(&self, prompt: &str, seed: u64, checkpoint_id: &str) -> ProviderResult<ImageRef> {
        non_empty("prompt", prompt)?;
        let size = self.image_size;
        let px = self.generate_pixels(prompt, seed, checkpoint_id);
        self.store_png(size, size, &px, &[("dish", prompt)])
    }

    fn generate_pair(
        &self,
        source_prompt: &str,
        target_prompt: &str,
        rho: f64,
        seed: u64,
        checkpoint_id: &str,
    ) -> ProviderResult<(ImageRef, ImageRef)> {
        check_rho(rho)?;
        check_pair_prompts(source_prompt, target_prompt)?;
        let source = self.generate(source_prompt, seed, checkpoint_id)?;
        let src_px = self.generate_pixels(source_prompt, seed, checkpoint_id);
        let mut select = self.word(
            "pair-select",
            &[
                source_prompt.as_bytes(),
                target_prompt.as_bytes(),
                &seed.to_le_bytes(),
                checkpoint_id.as_bytes(),
            ],
        );
        let mut value = self.word("pair-value", &[target_prompt.as_bytes(), &seed.to_le_bytes()]);
        let mut changed = false;
        let tgt_px: Vec<u8> = src_px
            .iter()
            .map(|&p| {
                let u = unit_f64(splitmix64(&mut select));
                let v = splitmix64(&mut value);
                if u < rho {
                    changed = true;
                    p ^ (1 + (v % 255) as u8)
                } else {
                    p
                }
            })
            .collect();
        if !changed {
            return Ok((source.clone(), source));
        }
        let size = self.image_size;
        let target = self.store_png(size, size, &tgt_px, &[("dish", target_prompt)])?;
        Ok((source, target))
    }
}

impl FinetuneProvider for MockProvider {
    fn submit_finetune(
        &self,
        base_checkpoint: &str,
        images: &[ImageRef],
    ) -> ProviderResult<FinetuneJob> {
        non_empty("base checkpoint", base_checkpoint)?;
        if images.is_empty() {
            return Err(ProviderError::InvalidInput(
                "fine-tuning needs at least one image".into(),
            ));
        }
        let ids: Vec<&[u8]> = images.iter().map(|i| i.blob_id.as_bytes()).collect();
        let mut parts: Vec<&[u8]> = vec![base_checkpoint.as_bytes()];
        parts.extend(ids);
        let job_id = format!("job-{:016x}", self.word("finetune", &parts));
        let mut jobs = self.jobs.lock().expect("mock job table");
        let entry = jobs.entry(job_id.clone()).or_insert_with(|| MockJob {
            job: FinetuneJob {
                job_id,
                base_checkpoint: base_checkpoint.to_string(),
                training_image_refs: images.to_vec(),
                state: JobState::Pending,
            },
            polls: 0,
        });
        Ok(entry.job.clone())
    }

    fn poll_finetune(&self, job_id: &str) -> ProviderResult<FinetuneJob> {
        let mut jobs = self.jobs.lock().expect("mock job table");
        let entry = jobs
            .get_mut(job_id)
            .ok_or_else(|| ProviderError::UnknownJob(job_id.to_string()))?;
        if !entry.job.state.is_terminal() {
            entry.polls += 1;
            entry.job.state = match entry.polls {
                1 => JobState::Running,
                _ if self.fail_finetune => JobState::Failed {
                    message: "mock fine-tune configured to fail".into(),
                },
                _ => JobState::Done {
                    checkpoint_id: format!(
                        "ft-{:016x}",
                        self.word("checkpoint", &[job_id.as_bytes()])
                    ),
                },
            };
        }
        Ok(entry.job.clone())
    }
}
