//! Serves a [`MockProvider`] over the provider wire protocol.
//!
//! Incoming images are stored in the mock's blob store before the call, so
//! gateway calls against this server produce the same results as calling
//! the mock in-process.

use std::collections::BTreeSet;
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::Serialize;
use tiny_http::{Method, Request};

use super::wire::{self, EmbedKind};
use super::{
    ChatProvider, EditToolProvider, EmbedProvider, FinetuneProvider, GenerationProvider,
    MockProvider, ProviderError, ProviderResult, VisionProvider,
};
use crate::data::ImageRef;
use crate::httputil::{error_response, json_response, read_json, HttpResponse, ServerHandle};

/// Optional behaviour of the mock server.
#[derive(Debug, Clone, Default)]
pub struct MockServerOptions {
    /// When set, generation requests naming any other checkpoint fail with
    /// `unknown_checkpoint`. Checkpoints produced by fine-tune jobs are
    /// always accepted.
    pub known_checkpoints: Option<BTreeSet<String>>,
}

struct State {
    mock: Arc<MockProvider>,
    options: MockServerOptions,
    produced: std::sync::Mutex<BTreeSet<String>>,
}

pub fn serve(
    mock: Arc<MockProvider>,
    bind: &str,
    options: MockServerOptions,
) -> std::io::Result<ServerHandle> {
    let state = Arc::new(State {
        mock,
        options,
        produced: Default::default(),
    });
    ServerHandle::spawn(bind, 4, move |req| {
        let resp = handle(&state, req);
        let _ = resp.0.respond(resp.1);
    })
}

fn status_of(e: &ProviderError) -> u16 {
    match e {
        ProviderError::Unavailable(_) | ProviderError::Storage(_) => 503,
        ProviderError::Timeout => 504,
        ProviderError::MissingBlob(_) | ProviderError::UnknownJob(_) => 404,
        _ => 400,
    }
}

fn provider_error(e: ProviderError) -> HttpResponse {
    let message = match &e {
        ProviderError::InvalidRho(r) => r.to_string(),
        ProviderError::UnknownJob(id) | ProviderError::MissingBlob(id) => id.clone(),
        ProviderError::InvalidInput(m) | ProviderError::Unavailable(m) => m.clone(),
        other => other.to_string(),
    };
    error_response(status_of(&e), e.code(), message)
}

impl From<ProviderError> for HttpResponse {
    fn from(e: ProviderError) -> Self {
        provider_error(e)
    }
}

fn run<Req, Resp, F>(req: &mut Request, f: F) -> HttpResponse
where
    Req: DeserializeOwned,
    Resp: Serialize,
    F: FnOnce(Req) -> Result<Resp, HttpResponse>,
{
    match read_json::<Req>(req).and_then(f) {
        Ok(v) => json_response(200, &v),
        Err(resp) => resp,
    }
}

impl State {
    fn put(&self, b64: &str) -> ProviderResult<ImageRef> {
        let bytes = B64
            .decode(b64)
            .map_err(|e| ProviderError::InvalidInput(format!("bad base64: {e}")))?;
        self.mock
            .store()
            .put_sniffed(&bytes)
            .map_err(|e| ProviderError::InvalidInput(e.to_string()))
    }

    fn encode(&self, image: &ImageRef) -> ProviderResult<String> {
        Ok(B64.encode(self.mock.store().get(image)?))
    }

    fn check_checkpoint(&self, ck: &str) -> Result<(), HttpResponse> {
        match &self.options.known_checkpoints {
            Some(known)
                if !known.contains(ck)
                    && !self.produced.lock().expect("checkpoint set").contains(ck) =>
            {
                Err(error_response(
                    404,
                    "unknown_checkpoint",
                    format!("unknown checkpoint {ck}"),
                ))
            }
            _ => Ok(()),
        }
    }
}

fn handle(state: &State, mut req: Request) -> (Request, HttpResponse) {
    let url = req.url().to_string();
    let m = &state.mock;
    let resp = match (req.method().clone(), url.as_str()) {
        (Method::Post, wire::CHAT) => run(&mut req, |b: wire::ChatRequest| {
            Ok(wire::TextResponse {
                text: m.chat(&b.prompt)?,
            })
        }),
        (Method::Post, wire::INSPECT) => run(&mut req, |b: wire::InspectRequest| {
            let r = m.inspect_image(&state.put(&b.blob_b64)?)?;
            Ok(wire::InspectResponse {
                has_text: r.has_text,
                has_watermark: r.has_watermark,
                has_hands: r.has_hands,
                bbox: r.dish_bbox,
            })
        }),
        (Method::Post, wire::CAPTION) => run(&mut req, |b: wire::CaptionRequest| {
            let text = m.caption_image(&state.put(&b.blob_b64)?, &b.context)?;
            Ok(wire::TextResponse { text })
        }),
        (Method::Post, wire::EMBED) => run(&mut req, |b: wire::EmbedRequest| {
            let v = match b.kind {
                EmbedKind::Text => m.embed_text(&b.payload)?,
                EmbedKind::Image => m.embed_image(&state.put(&b.payload)?)?,
            };
            Ok(wire::EmbedResponse {
                values: v.values().to_vec(),
            })
        }),
        (Method::Post, wire::DETECT) => run(&mut req, |b: wire::DetectRequest| {
            let boxes = m.detect(&state.put(&b.blob_b64)?, &b.query)?;
            Ok(wire::DetectResponse { boxes })
        }),
        (Method::Post, wire::SEGMENT) => run(&mut req, |b: wire::SegmentRequest| {
            let mask = m.segment(&state.put(&b.blob_b64)?, b.bbox)?;
            Ok(wire::MaskResponse {
                mask_b64: state.encode(&mask)?,
            })
        }),
        (Method::Post, wire::INPAINT) => run(&mut req, |b: wire::InpaintRequest| {
            let out = m.inpaint(&state.put(&b.blob_b64)?, &state.put(&b.mask_b64)?)?;
            Ok(wire::ImageResponse {
                image_b64: state.encode(&out)?,
            })
        }),
        (Method::Post, wire::GENERATE) => run(&mut req, |b: wire::GenerateRequest| {
            state.check_checkpoint(&b.checkpoint)?;
            let img = m.generate(&b.prompt, b.seed, &b.checkpoint)?;
            Ok(wire::ImageResponse {
                image_b64: state.encode(&img)?,
            })
        }),
        (Method::Post, wire::GENERATE_PAIR) => run(&mut req, |b: wire::GeneratePairRequest| {
            state.check_checkpoint(&b.checkpoint)?;
            let (s, t) =
                m.generate_pair(&b.source_prompt, &b.target_prompt, b.rho, b.seed, &b.checkpoint)?;
            Ok(wire::PairResponse {
                source_b64: state.encode(&s)?,
                target_b64: state.encode(&t)?,
            })
        }),
        (Method::Post, wire::FINETUNE) => run(&mut req, |b: wire::FinetuneRequest| {
            let images = b
                .blob_ids
                .iter()
                .map(|id| m.store().resolve(id).map_err(ProviderError::from))
                .collect::<ProviderResult<Vec<_>>>()?;
            let job = m.submit_finetune(&b.base, &images)?;
            Ok(wire::JobIdResponse { job_id: job.job_id })
        }),
        (Method::Get, path) if path.starts_with("/v1/finetune/") => {
            let id = &path["/v1/finetune/".len()..];
            match m.poll_finetune(id) {
                Ok(job) => {
                    if let super::JobState::Done { checkpoint_id } = &job.state {
                        state
                            .produced
                            .lock()
                            .expect("checkpoint set")
                            .insert(checkpoint_id.clone());
                    }
                    json_response(
                        200,
                        &wire::JobStatusResponse {
                            job_id: job.job_id,
                            base: job.base_checkpoint,
                            blob_ids: job
                                .training_image_refs
                                .iter()
                                .map(|i| i.blob_id.clone())
                                .collect(),
                            state: job.state,
                        },
                    )
                }
                Err(e) => provider_error(e),
            }
        }
        _ => error_response(404, "not_found", format!("no route for {url}")),
    };
    (req, resp)
}
