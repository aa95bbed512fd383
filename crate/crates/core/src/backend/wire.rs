//! JSON bodies exchanged with backend servers.
//!
//! Every image travels as a base64 (standard alphabet, padded) PNG string:
//! RGB images as 8-bit RGB PNGs, masks as 8-bit grayscale PNGs with 0 for
//! unmasked and 255 for masked. Non-2xx responses carry an [`ErrorEnvelope`].

use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::{InpaintRequest, InpaintResponse, SegmentRequest, SegmentResponse};
use crate::error::{BackendKind, Error, Result};
use crate::imaging::{BitMask, RasterImage, Rect};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InpaintRequestBody {
    pub base_crop: String,
    pub mask: String,
    pub reference: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InpaintResponseBody {
    pub image: String,
    pub backend_id: String,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequestBody {
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponseBody {
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRequestBody {
    pub image: String,
    pub prompt_box: Rect,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hint_mask: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponseBody {
    pub mask: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorEnvelope {
    pub code: String,
    pub message: String,
}

pub fn encode_image(image: &RasterImage) -> Result<String> {
    Ok(STANDARD.encode(image.to_png()?))
}

pub fn encode_mask(mask: &BitMask) -> Result<String> {
    Ok(STANDARD.encode(mask.to_png()?))
}

fn decode_b64(kind: BackendKind, field: &str, s: &str) -> Result<Vec<u8>> {
    STANDARD.decode(s).map_err(|e| Error::Protocol {
        backend: kind,
        message: format!("field `{field}` is not valid base64: {e}"),
    })
}

pub fn decode_image(kind: BackendKind, field: &str, s: &str) -> Result<RasterImage> {
    RasterImage::from_png(&decode_b64(kind, field, s)?).map_err(|e| Error::Protocol {
        backend: kind,
        message: format!("field `{field}` is not a PNG image: {e}"),
    })
}

pub fn decode_mask(kind: BackendKind, field: &str, s: &str) -> Result<BitMask> {
    BitMask::from_png(&decode_b64(kind, field, s)?).map_err(|e| Error::Protocol {
        backend: kind,
        message: format!("field `{field}` is not a PNG mask: {e}"),
    })
}

impl InpaintRequestBody {
    pub fn encode(req: &InpaintRequest) -> Result<Self> {
        Ok(InpaintRequestBody {
            base_crop: encode_image(&req.base_crop)?,
            mask: encode_mask(&req.mask)?,
            reference: encode_image(&req.reference)?,
            seed: req.seed,
        })
    }

    pub fn decode(&self) -> Result<InpaintRequest> {
        let k = BackendKind::Inpaint;
        InpaintRequest::new(
            decode_image(k, "base_crop", &self.base_crop)?,
            decode_mask(k, "mask", &self.mask)?,
            decode_image(k, "reference", &self.reference)?,
            self.seed,
        )
    }
}

impl InpaintResponseBody {
    pub fn encode(resp: &InpaintResponse) -> Result<Self> {
        Ok(InpaintResponseBody {
            image: encode_image(&resp.image)?,
            backend_id: resp.backend_id.clone(),
            latency_ms: resp.latency.as_millis() as u64,
        })
    }

    pub fn decode(&self) -> Result<InpaintResponse> {
        Ok(InpaintResponse {
            image: decode_image(BackendKind::Inpaint, "image", &self.image)?,
            backend_id: self.backend_id.clone(),
            latency: Duration::from_millis(self.latency_ms),
        })
    }
}

impl SegmentRequestBody {
    pub fn encode(req: &SegmentRequest) -> Result<Self> {
        Ok(SegmentRequestBody {
            image: encode_image(&req.image)?,
            prompt_box: req.prompt_box,
            hint_mask: req.hint_mask.as_ref().map(encode_mask).transpose()?,
        })
    }

    pub fn decode(&self) -> Result<SegmentRequest> {
        let k = BackendKind::Segment;
        Ok(SegmentRequest {
            image: decode_image(k, "image", &self.image)?,
            prompt_box: self.prompt_box,
            hint_mask: self
                .hint_mask
                .as_deref()
                .map(|m| decode_mask(k, "hint_mask", m))
                .transpose()?,
        })
    }
}

impl SegmentResponseBody {
    pub fn encode(resp: &SegmentResponse) -> Result<Self> {
        Ok(SegmentResponseBody {
            mask: encode_mask(&resp.mask)?,
            confidence: resp.confidence,
        })
    }

    pub fn decode(&self) -> Result<SegmentResponse> {
        Ok(SegmentResponse {
            mask: decode_mask(BackendKind::Segment, "mask", &self.mask)?,
            confidence: self.confidence,
        })
    }
}
