//! JSON bodies of the provider protocol. All calls are `POST` except the
//! fine-tune status lookup (`GET /v1/finetune/{job_id}`).

use serde::{Deserialize, Serialize};

use super::BBox;

pub const CHAT: &str = "/v1/chat";
pub const INSPECT: &str = "/v1/inspect";
pub const CAPTION: &str = "/v1/caption";
pub const EMBED: &str = "/v1/embed";
pub const DETECT: &str = "/v1/detect";
pub const SEGMENT: &str = "/v1/segment";
pub const INPAINT: &str = "/v1/inpaint";
pub const GENERATE: &str = "/v1/generate";
pub const GENERATE_PAIR: &str = "/v1/generate_pair";
pub const FINETUNE: &str = "/v1/finetune";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatRequest {
    pub prompt: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextResponse {
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InspectRequest {
    pub blob_b64: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InspectResponse {
    pub has_text: bool,
    pub has_watermark: bool,
    pub has_hands: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaptionRequest {
    pub blob_b64: String,
    pub context: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedKind {
    Text,
    Image,
}

/// `payload` is the text itself, or base64 image bytes for `kind = image`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub kind: EmbedKind,
    pub payload: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectRequest {
    pub blob_b64: String,
    pub query: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectResponse {
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentRequest {
    pub blob_b64: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskResponse {
    pub mask_b64: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InpaintRequest {
    pub blob_b64: String,
    pub mask_b64: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageResponse {
    pub image_b64: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    pub seed: u64,
    pub checkpoint: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratePairRequest {
    pub source_prompt: String,
    pub target_prompt: String,
    pub rho: f64,
    pub seed: u64,
    pub checkpoint: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairResponse {
    pub source_b64: String,
    pub target_b64: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneRequest {
    pub base: String,
    pub blob_ids: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobIdResponse {
    pub job_id: String,
}

/// Body of `GET /v1/finetune/{job_id}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobStatusResponse {
    pub job_id: String,
    pub base: String,
    pub blob_ids: Vec<String>,
    #[serde(flatten)]
    pub state: super::JobState,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error_code: String,
    pub message: String,
}
