//! The boundary between the decoding engine and whatever owns the model.
//!
//! A provider answers three requests: a capability handshake, the
//! next-token distribution for an `(image, prompt, prefix)` triple, and
//! detokenization. The engine never sees model internals or the tokenizer.
//! Providers are reached through an [`Endpoint`]: in-process (`mock:`), a
//! spawned child speaking the line protocol on its standard streams
//! (`exec:<command>`), or a TCP server (`tcp:<host:port>`).

mod mock;
mod protocol;
mod server;
mod transport;

use std::sync::{Arc, OnceLock};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::{TokenDistribution, TokenId};
use crate::image::ImageBuffer;

pub use mock::{
    mock_distribution, mock_tokenize, MockBackend, MockConfig, ScriptRule, ScriptedBackend, MOCK_EOS_ID,
    MOCK_MAX_CONTEXT, MOCK_NAME, MOCK_VOCAB_SIZE, MOCK_WORDS,
};
pub use protocol::{handle_line, ImageCache, WireRequest, WireResponse, PROTOCOL_VERSION};
pub use server::{serve_stream, serve_tcp};

/// Tolerance on `Σ exp(log_probs) = 1` for distributions received from a
/// provider.
pub const RECEIPT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProviderError {
    #[error("provider unreachable: {0}")]
    Unreachable(String),
    #[error("protocol version mismatch (engine speaks {expected}): {detail}")]
    VersionMismatch { expected: u32, detail: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("provider fault: {0}")]
    ProviderFault(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub vocab_size: usize,
    pub eos_id: TokenId,
    pub max_context: usize,
    pub provider_name: String,
}

impl Capabilities {
    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.vocab_size == 0 || self.max_context == 0 {
            return Err(ProviderError::ProviderFault(
                "vocab_size and max_context must be positive".into(),
            ));
        }
        if self.eos_id.index() >= self.vocab_size {
            return Err(ProviderError::ProviderFault(format!(
                "eos id {} outside vocabulary of {}",
                self.eos_id, self.vocab_size
            )));
        }
        Ok(())
    }
}

/// An image together with its pixel digest; the PNG encoding is produced
/// lazily and reused across requests.
#[derive(Debug, Clone)]
pub struct ImageInput {
    image: Arc<ImageBuffer>,
    digest: String,
    png_b64: Arc<OnceLock<String>>,
}

impl ImageInput {
    pub fn new(image: ImageBuffer) -> Self {
        let digest = image.digest();
        Self {
            image: Arc::new(image),
            digest,
            png_b64: Arc::new(OnceLock::new()),
        }
    }

    pub fn image(&self) -> &ImageBuffer {
        &self.image
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub(crate) fn png_base64(&self) -> Result<&str, ProviderError> {
        if let Some(s) = self.png_b64.get() {
            return Ok(s);
        }
        let png = self
            .image
            .to_png()
            .map_err(|e| ProviderError::InvalidRequest(e.to_string()))?;
        let encoded = base64::engine::general_purpose::STANDARD.encode(png);
        Ok(self.png_b64.get_or_init(|| encoded))
    }
}

impl From<ImageBuffer> for ImageInput {
    fn from(image: ImageBuffer) -> Self {
        Self::new(image)
    }
}

/// Conditioning for one next-token query. `image = None` asks for the
/// text-only distribution.
#[derive(Debug, Clone, Copy)]
pub struct DistributionRequest<'a> {
    pub image: Option<&'a ImageInput>,
    pub prompt: &'a str,
    pub generated: &'a [TokenId],
}

impl DistributionRequest<'_> {
    pub fn validate(&self, caps: &Capabilities) -> Result<(), ProviderError> {
        if self.generated.len() >= caps.max_context {
            return Err(ProviderError::InvalidRequest(format!(
                "prefix of {} tokens reaches max context {}",
                self.generated.len(),
                caps.max_context
            )));
        }
        if let Some(bad) = self.generated.iter().find(|id| id.index() >= caps.vocab_size) {
            return Err(ProviderError::InvalidRequest(format!(
                "token id {bad} outside vocabulary of {}",
                caps.vocab_size
            )));
        }
        Ok(())
    }
}

/// What a model implements to be served, in-process or over the wire.
pub trait Backend: Send + Sync {
    fn capabilities(&self) -> Capabilities;

    /// Full-vocabulary log-probabilities.
    fn distribution(&self, req: &DistributionRequest<'_>) -> Result<Vec<f64>, String>;

    fn detokenize(&self, ids: &[TokenId]) -> Result<String, String>;
}

/// Where to find a provider.
#[derive(Debug, Clone, PartialEq)]
pub enum Endpoint {
    Mock(MockConfig),
    Exec(String),
    Tcp(String),
}

impl std::str::FromStr for Endpoint {
    type Err = ProviderError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "mock" {
            return Ok(Endpoint::Mock(MockConfig::default()));
        }
        if let Some(rest) = s.strip_prefix("mock:") {
            return rest
                .parse()
                .map(Endpoint::Mock)
                .map_err(ProviderError::InvalidRequest);
        }
        if let Some(cmd) = s.strip_prefix("exec:") {
            if cmd.trim().is_empty() {
                return Err(ProviderError::InvalidRequest("empty exec command".into()));
            }
            return Ok(Endpoint::Exec(cmd.to_string()));
        }
        if let Some(addr) = s.strip_prefix("tcp:") {
            if addr.is_empty() {
                return Err(ProviderError::InvalidRequest("empty tcp address".into()));
            }
            return Ok(Endpoint::Tcp(addr.to_string()));
        }
        Err(ProviderError::InvalidRequest(format!(
            "unrecognized endpoint {s:?}; expected mock:, exec:<command> or tcp:<host:port>"
        )))
    }
}

impl std::fmt::Display for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Endpoint::Mock(cfg) => write!(f, "mock:{cfg}"),
            Endpoint::Exec(cmd) => write!(f, "exec:{cmd}"),
            Endpoint::Tcp(addr) => write!(f, "tcp:{addr}"),
        }
    }
}

/// A connected provider with negotiated capabilities. One handle serves one
/// decode session at a time.
pub struct ProviderHandle {
    transport: Box<dyn transport::Transport>,
    caps: Capabilities,
    next_id: u64,
    dist_calls: u64,
}

impl std::fmt::Debug for ProviderHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProviderHandle")
            .field("caps", &self.caps)
            .field("dist_calls", &self.dist_calls)
            .finish_non_exhaustive()
    }
}

impl ProviderHandle {
    pub fn handshake(endpoint: &Endpoint) -> Result<Self, ProviderError> {
        Self::handshake_with_version(endpoint, PROTOCOL_VERSION)
    }

    /// Handshake announcing an explicit protocol version.
    pub fn handshake_with_version(endpoint: &Endpoint, version: u32) -> Result<Self, ProviderError> {
        let transport: Box<dyn transport::Transport> = match endpoint {
            Endpoint::Mock(cfg) => Box::new(transport::InProcess::new(Arc::new(MockBackend::new(
                cfg.clone(),
            )))),
            Endpoint::Exec(cmd) => Box::new(transport::LineTransport::spawn(cmd)?),
            Endpoint::Tcp(addr) => Box::new(transport::LineTransport::connect(addr)?),
        };
        Self::open(transport, version)
    }

    /// Connects directly to a backend living in this process.
    pub fn in_process(backend: Arc<dyn Backend>) -> Result<Self, ProviderError> {
        Self::open(Box::new(transport::InProcess::new(backend)), PROTOCOL_VERSION)
    }

    fn open(mut transport: Box<dyn transport::Transport>, version: u32) -> Result<Self, ProviderError> {
        let caps = transport.hello(version)?;
        caps.validate()?;
        Ok(Self {
            transport,
            caps,
            next_id: 1,
            dist_calls: 0,
        })
    }

    pub fn capabilities(&self) -> &Capabilities {
        &self.caps
    }

    /// Number of distribution queries issued through this handle.
    pub fn dist_calls(&self) -> u64 {
        self.dist_calls
    }

    fn take_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    pub fn next_distribution(&mut self, req: &DistributionRequest<'_>) -> Result<TokenDistribution, ProviderError> {
        req.validate(&self.caps)?;
        let id = self.take_id();
        self.dist_calls += 1;
        let log_probs = self.transport.dist(id, req)?;
        check_received(log_probs, self.caps.vocab_size)
    }

    pub fn detokenize(&mut self, ids: &[TokenId]) -> Result<String, ProviderError> {
        if let Some(bad) = ids.iter().find(|id| id.index() >= self.caps.vocab_size) {
            return Err(ProviderError::InvalidRequest(format!(
                "token id {bad} outside vocabulary of {}",
                self.caps.vocab_size
            )));
        }
        let id = self.take_id();
        self.transport.detok(id, ids)
    }
}

/// Validates length and normalization of a received distribution.
fn check_received(log_probs: Vec<f64>, vocab_size: usize) -> Result<TokenDistribution, ProviderError> {
    if log_probs.len() != vocab_size {
        return Err(ProviderError::ProviderFault(format!(
            "expected {vocab_size} log-probabilities, got {}",
            log_probs.len()
        )));
    }
    let dist = TokenDistribution::from_log_weights(log_probs)
        .map_err(|e| ProviderError::ProviderFault(e.to_string()))?;
    let total: f64 = dist.probs().iter().sum();
    if (total - 1.0).abs() > RECEIPT_TOLERANCE {
        return Err(ProviderError::ProviderFault(format!(
            "distribution not normalized: probabilities sum to {total}"
        )));
    }
    dist.normalize()
        .map_err(|e| ProviderError::ProviderFault(e.to_string()))
}
