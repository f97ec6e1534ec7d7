//! HTTP client for remote model services.
//!
//! Retries use exponential backoff with full jitter and stop after
//! `1 + max_retries` attempts. Server errors (5xx, 429), timeouts and
//! connection failures are retried; client errors and malformed responses
//! are not. In-flight calls per endpoint are bounded by a counting
//! semaphore.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::wire::{self, EmbedKind};
use super::{
    check_pair_prompts, check_rho, non_empty, BBox, ChatProvider, EditToolProvider,
    EmbedProvider, FilterReport, FinetuneJob, FinetuneProvider, GenerationProvider,
    ProviderError, ProviderResult, VisionProvider,
};
use crate::data::image::decode_luma;
use crate::data::{BlobStore, EmbeddingVector, ImageRef};

pub const DEFAULT_CONCURRENCY: usize = 8;

fn default_concurrency() -> usize {
    DEFAULT_CONCURRENCY
}

fn default_timeout() -> f64 {
    30.0
}

fn default_retries() -> u32 {
    3
}

fn default_dims() -> usize {
    super::mock::MOCK_DIMS
}

/// Address and call policy of one remote service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderEndpoint {
    #[serde(default)]
    pub name: String,
    pub base_url: String,
    /// Per-request timeout in seconds.
    #[serde(default = "default_timeout")]
    pub timeout: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// Declared embedding dimensionality (embedding endpoints only).
    #[serde(default = "default_dims")]
    pub dims: usize,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
}

impl ProviderEndpoint {
    pub fn new(name: &str, base_url: &str) -> Self {
        ProviderEndpoint {
            name: name.to_string(),
            base_url: base_url.trim_end_matches('/').to_string(),
            timeout: default_timeout(),
            max_retries: default_retries(),
            dims: default_dims(),
            concurrency: DEFAULT_CONCURRENCY,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.timeout > 0.0 && self.timeout.is_finite()) {
            return Err(format!("endpoint {}: timeout must be > 0", self.name));
        }
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return Err(format!("endpoint {}: base_url must be http(s)", self.name));
        }
        if self.dims == 0 || self.concurrency == 0 {
            return Err(format!("endpoint {}: dims and concurrency must be > 0", self.name));
        }
        Ok(())
    }
}

/// Exponential backoff with full jitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Backoff {
    pub base: Duration,
    pub factor: f64,
    pub cap: Duration,
}

impl Default for Backoff {
    fn default() -> Self {
        Backoff {
            base: Duration::from_millis(250),
            factor: 2.0,
            cap: Duration::from_secs(30),
        }
    }
}

impl Backoff {
    /// Upper bound of the sleep before retry number `retry` (0-based).
    pub fn ceiling(&self, retry: u32) -> Duration {
        let scaled = self.base.as_secs_f64() * self.factor.powi(retry as i32);
        Duration::from_secs_f64(scaled.min(self.cap.as_secs_f64()))
    }

    pub fn delay(&self, retry: u32) -> Duration {
        let ceiling = self.ceiling(retry).as_secs_f64();
        Duration::from_secs_f64(rand::rng().random_range(0.0..=ceiling))
    }
}

#[derive(Debug)]
struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore {
            permits: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().expect("semaphore");
        while *p == 0 {
            p = self.cv.wait(p).expect("semaphore");
        }
        *p -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().expect("semaphore") += 1;
        self.0.cv.notify_one();
    }
}

enum Attempt {
    Retry(ProviderError),
    Fatal(ProviderError),
}

/// Provider implementation that forwards every call over HTTP.
pub struct HttpProvider {
    endpoint: ProviderEndpoint,
    agent: ureq::Agent,
    store: Arc<BlobStore>,
    backoff: Backoff,
    limiter: Semaphore,
}

impl HttpProvider {
    pub fn new(endpoint: ProviderEndpoint, store: Arc<BlobStore>) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs_f64(endpoint.timeout))
            .build();
        let limiter = Semaphore::new(endpoint.concurrency.max(1));
        HttpProvider {
            endpoint,
            agent,
            store,
            backoff: Backoff::default(),
            limiter,
        }
    }

    pub fn with_backoff(mut self, backoff: Backoff) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn endpoint(&self) -> &ProviderEndpoint {
        &self.endpoint
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.endpoint.base_url, path)
    }

    fn call<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        path: &str,
        body: Option<&Req>,
    ) -> ProviderResult<Resp> {
        let _permit = self.limiter.acquire();
        let attempts = 1 + self.endpoint.max_retries;
        let mut last = ProviderError::Unavailable("no attempt made".into());
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.backoff.delay(attempt - 1));
            }
            match self.attempt(path, body) {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(e)) => {
                    tracing::debug!(
                        endpoint = %self.endpoint.name,
                        path,
                        attempt,
                        error = %e,
                        "retryable provider failure"
                    );
                    last = e;
                }
            }
        }
        Err(last)
    }

    fn attempt<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        path: &str,
        body: Option<&Req>,
    ) -> Result<Resp, Attempt> {
        let url = self.url(path);
        let result = match body {
            Some(b) => self.agent.post(&url).send_json(b),
            None => self.agent.get(&url).call(),
        };
        match result {
            Ok(resp) => {
                let text = resp.into_string().map_err(|e| classify_io(&e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Attempt::Fatal(ProviderError::MalformedResponse(e.to_string())))
            }
            Err(ureq::Error::Status(code, resp)) => {
                let body: Option<wire::ErrorBody> =
                    resp.into_string().ok().and_then(|t| serde_json::from_str(&t).ok());
                Err(classify_status(code, body))
            }
            Err(ureq::Error::Transport(t)) => Err(classify_transport(&t)),
        }
    }

    fn b64_of(&self, image: &ImageRef) -> ProviderResult<String> {
        Ok(B64.encode(self.store.get(image)?))
    }

    fn store_b64(&self, data: &str) -> ProviderResult<ImageRef> {
        let bytes = B64
            .decode(data)
            .map_err(|e| ProviderError::MalformedResponse(format!("bad base64: {e}")))?;
        self.store
            .put_sniffed(&bytes)
            .map_err(|e| ProviderError::MalformedResponse(e.to_string()))
    }

    fn check_embedding(&self, values: Vec<f64>) -> ProviderResult<EmbeddingVector> {
        if values.len() != self.endpoint.dims {
            return Err(ProviderError::DimensionMismatch {
                expected: self.endpoint.dims,
                actual: values.len(),
            });
        }
        EmbeddingVector::new(values).map_err(|e| ProviderError::MalformedResponse(e.to_string()))
    }

    fn job_from_status(&self, s: wire::JobStatusResponse) -> ProviderResult<FinetuneJob> {
        let refs = s
            .blob_ids
            .iter()
            .map(|id| self.store.resolve(id).map_err(ProviderError::from))
            .collect::<ProviderResult<Vec<_>>>()?;
        let job = FinetuneJob {
            job_id: s.job_id,
            base_checkpoint: s.base,
            training_image_refs: refs,
            state: s.state,
        };
        job.validate()?;
        Ok(job)
    }
}

fn classify_status(code: u16, body: Option<wire::ErrorBody>) -> Attempt {
    let (error_code, message) = match body {
        Some(b) => (b.error_code, b.message),
        None => (String::new(), format!("http status {code}")),
    };
    if code >= 500 || code == 429 {
        return Attempt::Retry(ProviderError::Unavailable(format!(
            "status {code}: {message}"
        )));
    }
    let err = match error_code.as_str() {
        "unknown_job" => ProviderError::UnknownJob(message),
        "empty_mask" => ProviderError::EmptyMask,
        "invalid_rho" => ProviderError::InvalidRho(message.parse().unwrap_or(f64::NAN)),
        "invalid_input" => ProviderError::InvalidInput(message),
        "missing_blob" => ProviderError::MissingBlob(message),
        "malformed" => ProviderError::MalformedResponse(message),
        "" => ProviderError::Unavailable(message),
        other => ProviderError::Unavailable(format!("{other}: {message}")),
    };
    Attempt::Fatal(err)
}

fn is_timeout(e: &std::io::Error) -> bool {
    matches!(
        e.kind(),
        std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock
    )
}

fn classify_io(e: &std::io::Error) -> Attempt {
    if is_timeout(e) {
        Attempt::Retry(ProviderError::Timeout)
    } else {
        Attempt::Retry(ProviderError::Unavailable(e.to_string()))
    }
}

fn classify_transport(t: &ureq::Transport) -> Attempt {
    use std::error::Error as _;
    let mut source = t.source();
    while let Some(s) = source {
        if let Some(io) = s.downcast_ref::<std::io::Error>() {
            if is_timeout(io) {
                return Attempt::Retry(ProviderError::Timeout);
            }
        }
        source = s.source();
    }
    match t.kind() {
        ureq::ErrorKind::InvalidUrl | ureq::ErrorKind::UnknownScheme => {
            Attempt::Fatal(ProviderError::Unavailable(t.to_string()))
        }
        _ => Attempt::Retry(ProviderError::Unavailable(t.to_string())),
    }
}

impl ChatProvider for HttpProvider {
    fn chat(&self, prompt: &str) -> ProviderResult<String> {
        non_empty("prompt", prompt)?;
        let r: wire::TextResponse = self.call(
            wire::CHAT,
            Some(&wire::ChatRequest {
                prompt: prompt.to_string(),
            }),
        )?;
        if r.text.trim().is_empty() {
            return Err(ProviderError::MalformedResponse("empty chat reply".into()));
        }
        Ok(r.text)
    }
}

impl VisionProvider for HttpProvider {
    fn inspect_image(&self, image: &ImageRef) -> ProviderResult<FilterReport> {
        let r: wire::InspectResponse = self.call(
            wire::INSPECT,
            Some(&wire::InspectRequest {
                blob_b64: self.b64_of(image)?,
            }),
        )?;
        let report = FilterReport {
            has_text: r.has_text,
            has_watermark: r.has_watermark,
            has_hands: r.has_hands,
            dish_bbox: r.bbox,
        };
        report.validate()?;
        Ok(report)
    }

    fn caption_image(&self, image: &ImageRef, context: &str) -> ProviderResult<String> {
        let r: wire::TextResponse = self.call(
            wire::CAPTION,
            Some(&wire::CaptionRequest {
                blob_b64: self.b64_of(image)?,
                context: context.to_string(),
            }),
        )?;
        if r.text.trim().is_empty() {
            return Err(ProviderError::MalformedResponse("empty caption".into()));
        }
        Ok(r.text)
    }
}

impl EmbedProvider for HttpProvider {
    fn dims(&self) -> usize {
        self.endpoint.dims
    }

    fn embed_text(&self, text: &str) -> ProviderResult<EmbeddingVector> {
        non_empty("text", text)?;
        let r: wire::EmbedResponse = self.call(
            wire::EMBED,
            Some(&wire::EmbedRequest {
                kind: EmbedKind::Text,
                payload: text.to_string(),
            }),
        )?;
        self.check_embedding(r.values)
    }

    fn embed_image(&self, image: &ImageRef) -> ProviderResult<EmbeddingVector> {
        let r: wire::EmbedResponse = self.call(
            wire::EMBED,
            Some(&wire::EmbedRequest {
                kind: EmbedKind::Image,
                payload: self.b64_of(image)?,
            }),
        )?;
        self.check_embedding(r.values)
    }
}

impl EditToolProvider for HttpProvider {
    fn detect(&self, image: &ImageRef, query: &str) -> ProviderResult<Vec<BBox>> {
        non_empty("query", query)?;
        let r: wire::DetectResponse = self.call(
            wire::DETECT,
            Some(&wire::DetectRequest {
                blob_b64: self.b64_of(image)?,
                query: query.to_string(),
            }),
        )?;
        if let Some(b) = r.boxes.iter().find(|b| !b.is_well_formed()) {
            return Err(ProviderError::MalformedResponse(format!(
                "degenerate box {:?}",
                <[i64; 4]>::from(*b)
            )));
        }
        Ok(r.boxes)
    }

    fn segment(&self, image: &ImageRef, bbox: BBox) -> ProviderResult<ImageRef> {
        if !bbox.is_well_formed() || !bbox.within(image.width, image.height) {
            return Err(ProviderError::InvalidInput("bbox outside image".into()));
        }
        let r: wire::MaskResponse = self.call(
            wire::SEGMENT,
            Some(&wire::SegmentRequest {
                blob_b64: self.b64_of(image)?,
                bbox,
            }),
        )?;
        let mask = self.store_b64(&r.mask_b64)?;
        if (mask.width, mask.height) != (image.width, image.height) {
            return Err(ProviderError::MalformedResponse(
                "mask dimensions differ from image".into(),
            ));
        }
        Ok(mask)
    }

    fn inpaint(&self, image: &ImageRef, mask: &ImageRef) -> ProviderResult<ImageRef> {
        if (image.width, image.height) != (mask.width, mask.height) {
            return Err(ProviderError::InvalidInput(
                "mask dimensions differ from image".into(),
            ));
        }
        let mask_bytes = self.store.get(mask)?;
        let (_, _, px) = decode_luma(&mask_bytes)
            .ok_or_else(|| ProviderError::InvalidInput("undecodable mask".into()))?;
        if !px.iter().any(|&p| p > 127) {
            return Err(ProviderError::EmptyMask);
        }
        let r: wire::ImageResponse = self.call(
            wire::INPAINT,
            Some(&wire::InpaintRequest {
                blob_b64: self.b64_of(image)?,
                mask_b64: B64.encode(&mask_bytes),
            }),
        )?;
        let out = self.store_b64(&r.image_b64)?;
        if (out.width, out.height) != (image.width, image.height) {
            return Err(ProviderError::MalformedResponse(
                "inpainted image changed dimensions".into(),
            ));
        }
        Ok(out)
    }
}

impl GenerationProvider for HttpProvider {
    fn generate(&self, prompt: &str, seed: u64, checkpoint_id: &str) -> ProviderResult<ImageRef> {
        non_empty("prompt", prompt)?;
        let r: wire::ImageResponse = self.call(
            wire::GENERATE,
            Some(&wire::GenerateRequest {
                prompt: prompt.to_string(),
                seed,
                checkpoint: checkpoint_id.to_string(),
            }),
        )?;
        self.store_b64(&r.image_b64)
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
        let r: wire::PairResponse = self.call(
            wire::GENERATE_PAIR,
            Some(&wire::GeneratePairRequest {
                source_prompt: source_prompt.to_string(),
                target_prompt: target_prompt.to_string(),
                rho,
                seed,
                checkpoint: checkpoint_id.to_string(),
            }),
        )?;
        Ok((self.store_b64(&r.source_b64)?, self.store_b64(&r.target_b64)?))
    }
}

impl FinetuneProvider for HttpProvider {
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
        let r: wire::JobIdResponse = self.call(
            wire::FINETUNE,
            Some(&wire::FinetuneRequest {
                base: base_checkpoint.to_string(),
                blob_ids: images.iter().map(|i| i.blob_id.clone()).collect(),
            }),
        )?;
        Ok(FinetuneJob {
            job_id: r.job_id,
            base_checkpoint: base_checkpoint.to_string(),
            training_image_refs: images.to_vec(),
            state: super::JobState::Pending,
        })
    }

    fn poll_finetune(&self, job_id: &str) -> ProviderResult<FinetuneJob> {
        non_empty("job id", job_id)?;
        let s: wire::JobStatusResponse =
            self.call::<(), _>(&format!("{}/{}", wire::FINETUNE, job_id), None)?;
        self.job_from_status(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_ceiling_doubles_from_250ms() {
        let b = Backoff::default();
        assert_eq!(b.ceiling(0), Duration::from_millis(250));
        assert_eq!(b.ceiling(1), Duration::from_millis(500));
        assert_eq!(b.ceiling(3), Duration::from_millis(2000));
        assert_eq!(b.ceiling(20), Duration::from_secs(30));
        for r in 0..5 {
            assert!(b.delay(r) <= b.ceiling(r));
        }
    }

    #[test]
    fn endpoint_validation() {
        let mut e = ProviderEndpoint::new("chat", "http://localhost:1/");
        assert_eq!(e.base_url, "http://localhost:1");
        assert!(e.validate().is_ok());
        e.timeout = 0.0;
        assert!(e.validate().is_err());
    }

    #[test]
    fn status_classification() {
        assert!(matches!(classify_status(500, None), Attempt::Retry(_)));
        let body = wire::ErrorBody {
            error_code: "unknown_checkpoint".into(),
            message: "no checkpoint ck-9".into(),
        };
        match classify_status(404, Some(body)) {
            Attempt::Fatal(ProviderError::Unavailable(m)) => assert!(m.contains("ck-9")),
            _ => panic!("expected fatal unavailable"),
        }
    }
}
