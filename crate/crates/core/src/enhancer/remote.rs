//! HTTP client for an external image-to-image service.
//!
//! Protocol: `POST {url}/generate` with a JSON body
//! `{prompt, control_mode, image_b64, strength, seed, width, height}`;
//! the service answers `{image_b64}` holding a PNG of the requested size.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlMode {
    Depth,
    Normal,
    Softedge,
}

impl std::str::FromStr for ControlMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "depth" => Ok(Self::Depth),
            "normal" => Ok(Self::Normal),
            "softedge" => Ok(Self::Softedge),
            _ => Err(Error::config(format!(
                "unknown control mode {s:?} (expected depth, normal, or softedge)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    /// Base URL, e.g. `http://127.0.0.1:7860`.
    pub url: String,
    pub timeout_ms: u64,
    /// Retries after the first attempt.
    pub max_retries: usize,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
    pub control_mode: ControlMode,
    pub prompt: String,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            url: "http://127.0.0.1:7860".into(),
            timeout_ms: 120_000,
            max_retries: 3,
            backoff_ms: 500,
            max_in_flight: 4,
            control_mode: ControlMode::Depth,
            prompt: String::new(),
        }
    }
}

/// Request body; field order is the wire order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemoteRequest {
    pub prompt: String,
    pub control_mode: ControlMode,
    pub image_b64: String,
    pub strength: f64,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
}

impl RemoteRequest {
    pub fn new(
        prompt: &str,
        control_mode: ControlMode,
        conditioning: &Image,
        strength: f64,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            prompt: prompt.to_string(),
            control_mode,
            image_b64: B64.encode(conditioning.encode_png()?),
            strength,
            seed,
            width: conditioning.width,
            height: conditioning.height,
        })
    }

    pub fn body(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

#[derive(Deserialize)]
struct RemoteReply {
    image_b64: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RemoteResponse {
    pub image: Image,
    /// Total attempts made, including the successful one.
    pub attempts: usize,
}

impl RemoteResponse {
    pub fn retries(&self) -> usize {
        self.attempts - 1
    }
}

fn decode_reply(body: &str, req: &RemoteRequest) -> Result<Image> {
    let reply: RemoteReply =
        serde_json::from_str(body).map_err(|e| Error::Protocol(format!("bad response json: {e}")))?;
    let bytes = B64
        .decode(reply.image_b64.as_bytes())
        .map_err(|e| Error::Protocol(format!("bad base64 image: {e}")))?;
    let image = Image::decode_png(&bytes).map_err(|e| Error::Protocol(format!("bad png: {e}")))?;
    if image.width != req.width || image.height != req.height {
        return Err(Error::Protocol(format!(
            "service returned {}x{}, requested {}x{}",
            image.width, image.height, req.width, req.height
        )));
    }
    Ok(image.to_rgb())
}

/// Sends `req`, retrying transport failures and HTTP error statuses up to
/// `cfg.max_retries` times. Malformed replies fail immediately.
pub fn remote_enhance(cfg: &RemoteConfig, req: &RemoteRequest) -> Result<RemoteResponse> {
    let agent = ureq::AgentBuilder::new()
        .timeout(Duration::from_millis(cfg.timeout_ms))
        .build();
    let url = format!("{}/generate", cfg.url.trim_end_matches('/'));
    let body = req.body()?;
    let mut last_err = String::new();
    for attempt in 1..=cfg.max_retries + 1 {
        log::info!("remote request seed={} attempt={attempt} url={url}", req.seed);
        match agent
            .post(&url)
            .set("Content-Type", "application/json")
            .send_string(&body)
        {
            Ok(resp) => {
                let text = resp
                    .into_string()
                    .map_err(|e| Error::Protocol(format!("unreadable response body: {e}")))?;
                let image = decode_reply(&text, req)?;
                log::info!("remote response seed={} attempts={attempt}", req.seed);
                return Ok(RemoteResponse {
                    image,
                    attempts: attempt,
                });
            }
            Err(ureq::Error::Status(code, _)) => last_err = format!("HTTP status {code}"),
            Err(e) => last_err = e.to_string(),
        }
        log::warn!("remote request seed={} failed: {last_err}", req.seed);
        if attempt <= cfg.max_retries && cfg.backoff_ms > 0 {
            std::thread::sleep(Duration::from_millis(cfg.backoff_ms * attempt as u64));
        }
    }
    Err(Error::Remote {
        attempts: cfg.max_retries + 1,
        detail: last_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn control_mode_parses_and_serializes() {
        assert_eq!("normal".parse::<ControlMode>().unwrap(), ControlMode::Normal);
        assert!("canny".parse::<ControlMode>().is_err());
        assert_eq!(serde_json::to_string(&ControlMode::Softedge).unwrap(), "\"softedge\"");
    }

    #[test]
    fn reply_size_is_checked() {
        let img = Image::filled(4, 4, 3, 0.5);
        let req = RemoteRequest::new("p", ControlMode::Depth, &Image::new(8, 8, 3), 0.5, 1).unwrap();
        let body = format!("{{\"image_b64\":\"{}\"}}", B64.encode(img.encode_png().unwrap()));
        assert!(matches!(decode_reply(&body, &req), Err(Error::Protocol(_))));
        assert!(matches!(decode_reply("{}", &req), Err(Error::Protocol(_))));
    }
}
