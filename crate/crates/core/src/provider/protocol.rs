//! Newline-delimited JSON wire protocol, version 1.
//!
//! ```text
//! → {"op":"hello","version":1}
//! ← {"ok":true,"vocab_size":N,"eos_id":E,"max_context":C,"name":S}
//! → {"op":"dist","id":k,"image_png_b64":…|null,"image_digest":…|null,"prompt":S,"generated":[…]}
//! ← {"ok":true,"id":k,"log_probs":[…]}
//! → {"op":"detok","id":k,"ids":[…]}
//! ← {"ok":true,"id":k,"text":S}
//! error: {"ok":false,"id":k,"error":S}
//! ```
//!
//! JSON has no infinities, so a masked log-probability travels as `null`.

use std::collections::HashMap;
use std::sync::Arc;

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::{Backend, DistributionRequest, ImageInput};
use crate::dist::TokenId;
use crate::image::ImageBuffer;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum WireRequest {
    Hello {
        version: u32,
    },
    Dist {
        id: u64,
        #[serde(default)]
        image_png_b64: Option<String>,
        #[serde(default)]
        image_digest: Option<String>,
        prompt: String,
        #[serde(default)]
        generated: Vec<u32>,
    },
    Detok {
        id: u64,
        ids: Vec<u32>,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eos_id: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_context: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_probs: Option<Vec<Option<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl WireResponse {
    pub fn error(id: Option<u64>, msg: impl Into<String>) -> Self {
        Self {
            ok: false,
            id,
            error: Some(msg.into()),
            ..Default::default()
        }
    }
}

pub(crate) fn encode_log_probs(lp: &[f64]) -> Vec<Option<f64>> {
    lp.iter()
        .map(|&v| if v.is_finite() { Some(v) } else { None })
        .collect()
}

pub(crate) fn decode_log_probs(lp: Vec<Option<f64>>) -> Vec<f64> {
    lp.into_iter()
        .map(|v| v.unwrap_or(f64::NEG_INFINITY))
        .collect()
}

pub(crate) fn version_error(got: u32) -> String {
    format!("unsupported protocol version {got}; this provider speaks version {PROTOCOL_VERSION}")
}

/// Decoded images keyed by pixel digest, held per connection.
#[derive(Debug, Default)]
pub struct ImageCache {
    entries: HashMap<String, ImageInput>,
}

const IMAGE_CACHE_CAPACITY: usize = 64;

impl ImageCache {
    fn resolve(&mut self, png_b64: Option<&str>, digest: Option<&str>) -> Result<Option<ImageInput>, String> {
        if let Some(d) = digest {
            if let Some(hit) = self.entries.get(d) {
                return Ok(Some(hit.clone()));
            }
        }
        let Some(b64) = png_b64 else {
            return match digest {
                Some(d) => Err(format!("unknown image digest {d} and no image bytes")),
                None => Ok(None),
            };
        };
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(b64)
            .map_err(|e| format!("bad base64 image: {e}"))?;
        let image = ImageBuffer::decode(&bytes).map_err(|e| format!("bad image: {e}"))?;
        let input = ImageInput::new(image);
        if let Some(d) = digest {
            if d != input.digest() {
                return Err(format!(
                    "image digest mismatch: declared {d}, computed {}",
                    input.digest()
                ));
            }
        }
        if self.entries.len() >= IMAGE_CACHE_CAPACITY {
            self.entries.clear();
        }
        self.entries.insert(input.digest().to_string(), input.clone());
        Ok(Some(input))
    }
}

/// Answers one request line. Never fails: malformed input produces an
/// `ok: false` response.
pub fn handle_line(backend: &Arc<dyn Backend>, cache: &mut ImageCache, line: &str) -> String {
    let response = match serde_json::from_str::<WireRequest>(line) {
        Ok(req) => handle_request(backend.as_ref(), cache, req),
        Err(e) => {
            let id = serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("id").and_then(|id| id.as_u64()));
            WireResponse::error(id, format!("malformed request: {e}"))
        }
    };
    serde_json::to_string(&response).expect("response serializes")
}

fn handle_request(backend: &dyn Backend, cache: &mut ImageCache, req: WireRequest) -> WireResponse {
    match req {
        WireRequest::Hello { version } => {
            if version != PROTOCOL_VERSION {
                return WireResponse::error(None, version_error(version));
            }
            let caps = backend.capabilities();
            WireResponse {
                ok: true,
                vocab_size: Some(caps.vocab_size),
                eos_id: Some(caps.eos_id.0),
                max_context: Some(caps.max_context),
                name: Some(caps.provider_name),
                ..Default::default()
            }
        }
        WireRequest::Dist {
            id,
            image_png_b64,
            image_digest,
            prompt,
            generated,
        } => {
            let image = match cache.resolve(image_png_b64.as_deref(), image_digest.as_deref()) {
                Ok(img) => img,
                Err(e) => return WireResponse::error(Some(id), e),
            };
            let caps = backend.capabilities();
            let generated: Vec<TokenId> = generated.into_iter().map(TokenId).collect();
            let req = DistributionRequest {
                image: image.as_ref(),
                prompt: &prompt,
                generated: &generated,
            };
            if let Err(e) = req.validate(&caps) {
                return WireResponse::error(Some(id), e.to_string());
            }
            match backend.distribution(&req) {
                Ok(lp) => WireResponse {
                    ok: true,
                    id: Some(id),
                    log_probs: Some(encode_log_probs(&lp)),
                    ..Default::default()
                },
                Err(e) => WireResponse::error(Some(id), e),
            }
        }
        WireRequest::Detok { id, ids } => {
            let caps = backend.capabilities();
            if let Some(bad) = ids.iter().find(|&&i| i as usize >= caps.vocab_size) {
                return WireResponse::error(Some(id), format!("token id {bad} outside vocabulary"));
            }
            let ids: Vec<TokenId> = ids.into_iter().map(TokenId).collect();
            match backend.detokenize(&ids) {
                Ok(text) => WireResponse {
                    ok: true,
                    id: Some(id),
                    text: Some(text),
                    ..Default::default()
                },
                Err(e) => WireResponse::error(Some(id), e),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::{MockBackend, MockConfig};
    use serde_json::{json, Value};

    fn backend() -> Arc<dyn Backend> {
        Arc::new(MockBackend::new(MockConfig::default()))
    }

    fn ask(line: &str) -> Value {
        let b = backend();
        let mut cache = ImageCache::default();
        serde_json::from_str(&handle_line(&b, &mut cache, line)).unwrap()
    }

    #[test]
    fn hello_fields() {
        let v = ask(r#"{"op":"hello","version":1}"#);
        assert_eq!(
            v,
            json!({"ok":true,"vocab_size":32,"eos_id":0,"max_context":4096,"name":"mock"})
        );
    }

    #[test]
    fn field_order_does_not_matter() {
        let a = ask(r#"{"op":"dist","id":3,"prompt":"p","generated":[1,2],"image_png_b64":null,"image_digest":null}"#);
        let b = ask(r#"{"generated":[1,2],"image_digest":null,"prompt":"p","image_png_b64":null,"id":3,"op":"dist"}"#);
        assert_eq!(a, b);
        assert_eq!(a["ok"], true);
        assert_eq!(a["id"], 3);
        assert_eq!(a["log_probs"].as_array().unwrap().len(), 32);
    }

    #[test]
    fn detok_request() {
        let v = ask(r#"{"op":"detok","id":9,"ids":[3,7]}"#);
        assert_eq!(v, json!({"ok":true,"id":9,"text":"yes dog"}));
        let v = ask(r#"{"op":"detok","id":9,"ids":[32]}"#);
        assert_eq!(v["ok"], false);
    }

    #[test]
    fn malformed_lines_answer_with_errors() {
        for line in ["not json", r#"{"op":"launch","id":4}"#, r#"{"op":"dist","id":5}"#] {
            let v = ask(line);
            assert_eq!(v["ok"], false, "{line}");
            assert!(v["error"].is_string());
        }
        assert_eq!(ask(r#"{"op":"dist","id":5}"#)["id"], 5);
    }

    #[test]
    fn wrong_version_rejected() {
        let v = ask(r#"{"op":"hello","version":2}"#);
        assert_eq!(v["ok"], false);
    }

    #[test]
    fn image_cache_by_digest() {
        let b = backend();
        let mut cache = ImageCache::default();
        let img = ImageInput::new(ImageBuffer::filled(3, 3, [9, 9, 9]));
        let full = json!({"op":"dist","id":1,"image_png_b64":img.png_base64().unwrap(),
            "image_digest":img.digest(),"prompt":"x","generated":[]});
        let first: Value = serde_json::from_str(&handle_line(&b, &mut cache, &full.to_string())).unwrap();
        let digest_only = json!({"op":"dist","id":2,"image_png_b64":null,
            "image_digest":img.digest(),"prompt":"x","generated":[]});
        let second: Value =
            serde_json::from_str(&handle_line(&b, &mut cache, &digest_only.to_string())).unwrap();
        assert_eq!(first["log_probs"], second["log_probs"]);
        let mut fresh = ImageCache::default();
        let miss: Value =
            serde_json::from_str(&handle_line(&b, &mut fresh, &digest_only.to_string())).unwrap();
        assert_eq!(miss["ok"], false);
        let lying = json!({"op":"dist","id":3,"image_png_b64":img.png_base64().unwrap(),
            "image_digest":"00","prompt":"x","generated":[]});
        let v: Value = serde_json::from_str(&handle_line(&b, &mut fresh, &lying.to_string())).unwrap();
        assert_eq!(v["ok"], false);
    }

    #[test]
    fn null_encodes_masked_entries() {
        let enc = encode_log_probs(&[0.0, f64::NEG_INFINITY]);
        assert_eq!(serde_json::to_string(&enc).unwrap(), "[0.0,null]");
        assert_eq!(decode_log_probs(enc), vec![0.0, f64::NEG_INFINITY]);
    }
}
