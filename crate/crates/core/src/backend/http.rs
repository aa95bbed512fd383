use std::sync::OnceLock;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::de::DeserializeOwned;
use serde::Serialize;
use tokio::sync::Semaphore;

use super::wire::{
    encode_image, EmbedRequestBody, EmbedResponseBody, ErrorEnvelope, InpaintRequestBody, InpaintResponseBody,
    SegmentRequestBody, SegmentResponseBody,
};
use super::{
    BackendConfig, Embedder, InpaintRequest, InpaintResponse, Inpainter, SegmentRequest, SegmentResponse, Segmenter,
};
use crate::error::{BackendKind, Error, Result};
use crate::imaging::RasterImage;

const BACKOFF_BASE: Duration = Duration::from_millis(50);
const BACKOFF_CAP: Duration = Duration::from_secs(2);

/// JSON-over-HTTP client for one backend kind.
///
/// At most `max_in_flight` requests are outstanding at once; transport
/// failures and 5xx responses are retried up to `max_retries` times with
/// exponential backoff. Requests carry their seed, so a retry asks the
/// server for the same result as the original attempt.
pub struct HttpBackend {
    kind: BackendKind,
    cfg: BackendConfig,
    client: reqwest::Client,
    permits: Semaphore,
    embed_dim: OnceLock<usize>,
}

enum Failure {
    Retryable(Error),
    Fatal(Error),
}

impl HttpBackend {
    pub fn new(kind: BackendKind, cfg: BackendConfig) -> Result<Self> {
        cfg.validate()?;
        let client = reqwest::Client::builder()
            .timeout(cfg.timeout())
            .build()
            .map_err(|e| Error::Config(format!("cannot build {kind} HTTP client: {e}")))?;
        Ok(HttpBackend {
            kind,
            permits: Semaphore::new(cfg.max_in_flight),
            cfg,
            client,
            embed_dim: OnceLock::new(),
        })
    }

    pub fn kind(&self) -> BackendKind {
        self.kind
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    fn url(&self) -> String {
        format!("{}{}", self.cfg.endpoint.trim_end_matches('/'), self.kind.route())
    }

    async fn call<B: Serialize, R: DeserializeOwned>(&self, body: &B) -> Result<R> {
        let payload = serde_json::to_vec(body)?;
        let mut attempt = 0u32;
        loop {
            let result = {
                let _permit = self.permits.acquire().await.expect("semaphore never closed");
                self.attempt(&payload).await
            };
            match result {
                Ok(bytes) => {
                    return serde_json::from_slice(&bytes).map_err(|e| Error::Protocol {
                        backend: self.kind,
                        message: format!("malformed response body: {e}"),
                    })
                }
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retryable(e)) if attempt >= self.cfg.max_retries => return Err(e),
                Err(Failure::Retryable(e)) => {
                    let delay = BACKOFF_BASE.saturating_mul(1 << attempt.min(16)).min(BACKOFF_CAP);
                    log::warn!(
                        "{} request failed (attempt {}): {e}; retrying in {delay:?}",
                        self.kind,
                        attempt + 1
                    );
                    tokio::time::sleep(delay).await;
                    attempt += 1;
                }
            }
        }
    }

    async fn attempt(&self, payload: &[u8]) -> std::result::Result<Vec<u8>, Failure> {
        let mut req = self
            .client
            .post(self.url())
            .header("content-type", "application/json")
            .body(payload.to_vec());
        if let Some(token) = &self.cfg.bearer_token {
            req = req.header("authorization", format!("Bearer {token}"));
        }
        let resp = req.send().await.map_err(|e| {
            Failure::Retryable(Error::Transport {
                backend: self.kind,
                message: describe(&e),
            })
        })?;
        let status = resp.status();
        let bytes = resp.bytes().await.map_err(|e| {
            Failure::Retryable(Error::Transport {
                backend: self.kind,
                message: describe(&e),
            })
        })?;
        if status.is_success() {
            return Ok(bytes.to_vec());
        }
        let (code, message) = match serde_json::from_slice::<ErrorEnvelope>(&bytes) {
            Ok(env) => (env.code, env.message),
            Err(_) => (
                "unknown".to_string(),
                String::from_utf8_lossy(&bytes).chars().take(512).collect(),
            ),
        };
        let err = Error::Remote {
            backend: self.kind,
            status: status.as_u16(),
            code,
            message,
        };
        if status.is_server_error() && status.as_u16() != 501 {
            Err(Failure::Retryable(err))
        } else {
            Err(Failure::Fatal(err))
        }
    }

    fn protocol(&self, message: String) -> Error {
        Error::Protocol {
            backend: self.kind,
            message,
        }
    }

    fn wrong_kind(&self, wanted: BackendKind) -> Error {
        Error::Config(format!("{} client used as a {wanted} backend", self.kind))
    }
}

fn describe(e: &reqwest::Error) -> String {
    if e.is_timeout() {
        format!("timed out: {e}")
    } else if e.is_connect() {
        format!("connection failed: {e}")
    } else {
        e.to_string()
    }
}

#[async_trait]
impl Inpainter for HttpBackend {
    async fn inpaint(&self, req: &InpaintRequest) -> Result<InpaintResponse> {
        if self.kind != BackendKind::Inpaint {
            return Err(self.wrong_kind(BackendKind::Inpaint));
        }
        let started = Instant::now();
        let body: InpaintResponseBody = self.call(&InpaintRequestBody::encode(req)?).await?;
        let mut resp = body.decode()?;
        if resp.image.dimensions() != req.base_crop.dimensions() {
            return Err(self.protocol(format!(
                "server returned a {}x{} image for a {}x{} crop",
                resp.image.width(),
                resp.image.height(),
                req.base_crop.width(),
                req.base_crop.height()
            )));
        }
        if resp.latency.is_zero() {
            resp.latency = started.elapsed();
        }
        Ok(resp)
    }
}

#[async_trait]
impl Embedder for HttpBackend {
    async fn embed(&self, image: &RasterImage) -> Result<Vec<f64>> {
        if self.kind != BackendKind::Embed {
            return Err(self.wrong_kind(BackendKind::Embed));
        }
        let body = EmbedRequestBody {
            image: encode_image(image)?,
        };
        let resp: EmbedResponseBody = self.call(&body).await?;
        if resp.vector.is_empty() {
            return Err(self.protocol("server returned an empty embedding".into()));
        }
        let dim = *self.embed_dim.get_or_init(|| resp.vector.len());
        if resp.vector.len() != dim {
            return Err(self.protocol(format!(
                "embedding dimension changed from {dim} to {}",
                resp.vector.len()
            )));
        }
        Ok(resp.vector)
    }
}

#[async_trait]
impl Segmenter for HttpBackend {
    async fn segment(&self, req: &SegmentRequest) -> Result<SegmentResponse> {
        if self.kind != BackendKind::Segment {
            return Err(self.wrong_kind(BackendKind::Segment));
        }
        if !req.prompt_box.fits(req.image.width(), req.image.height()) {
            return Err(Error::OutOfBounds {
                rect: req.prompt_box,
                width: req.image.width(),
                height: req.image.height(),
            });
        }
        let body: SegmentResponseBody = self.call(&SegmentRequestBody::encode(req)?).await?;
        let resp = body.decode()?;
        if resp.mask.dimensions() != req.image.dimensions() {
            return Err(self.protocol(format!(
                "server returned a {}x{} mask for a {}x{} image",
                resp.mask.width(),
                resp.mask.height(),
                req.image.width(),
                req.image.height()
            )));
        }
        if !(0.0..=1.0).contains(&resp.confidence) {
            return Err(self.protocol(format!("confidence {} outside [0, 1]", resp.confidence)));
        }
        Ok(resp)
    }
}
