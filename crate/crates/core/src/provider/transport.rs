use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::Arc;

use super::protocol::{decode_log_probs, version_error, WireRequest, WireResponse, PROTOCOL_VERSION};
use super::{Backend, Capabilities, DistributionRequest, ProviderError};
use crate::dist::TokenId;

/// Client side of a provider connection.
pub(crate) trait Transport: Send {
    fn hello(&mut self, version: u32) -> Result<Capabilities, ProviderError>;
    fn dist(&mut self, id: u64, req: &DistributionRequest<'_>) -> Result<Vec<f64>, ProviderError>;
    fn detok(&mut self, id: u64, ids: &[TokenId]) -> Result<String, ProviderError>;
}

/// Calls a backend directly, skipping serialization.
pub(crate) struct InProcess {
    backend: Arc<dyn Backend>,
}

impl InProcess {
    pub(crate) fn new(backend: Arc<dyn Backend>) -> Self {
        Self { backend }
    }
}

impl Transport for InProcess {
    fn hello(&mut self, version: u32) -> Result<Capabilities, ProviderError> {
        if version != PROTOCOL_VERSION {
            return Err(ProviderError::VersionMismatch {
                expected: version,
                detail: version_error(version),
            });
        }
        Ok(self.backend.capabilities())
    }

    fn dist(&mut self, _id: u64, req: &DistributionRequest<'_>) -> Result<Vec<f64>, ProviderError> {
        self.backend
            .distribution(req)
            .map_err(ProviderError::ProviderFault)
    }

    fn detok(&mut self, _id: u64, ids: &[TokenId]) -> Result<String, ProviderError> {
        self.backend
            .detokenize(ids)
            .map_err(ProviderError::ProviderFault)
    }
}

/// Line-framed JSON over a byte stream pair (child stdio or TCP).
pub(crate) struct LineTransport {
    reader: BufReader<Box<dyn Read + Send>>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
}

impl LineTransport {
    pub(crate) fn spawn(command: &str) -> Result<Self, ProviderError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| ProviderError::Unreachable(format!("spawning {command:?}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Ok(Self {
            reader: BufReader::new(Box::new(stdout)),
            writer: Box::new(stdin),
            child: Some(child),
        })
    }

    pub(crate) fn connect(addr: &str) -> Result<Self, ProviderError> {
        let stream = TcpStream::connect(addr)
            .map_err(|e| ProviderError::Unreachable(format!("connecting to {addr}: {e}")))?;
        stream.set_nodelay(true).ok();
        let read_half = stream
            .try_clone()
            .map_err(|e| ProviderError::Unreachable(e.to_string()))?;
        Ok(Self {
            reader: BufReader::new(Box::new(read_half)),
            writer: Box::new(stream),
            child: None,
        })
    }

    fn round_trip(&mut self, req: &WireRequest) -> Result<WireResponse, ProviderError> {
        let mut line = serde_json::to_string(req).map_err(|e| ProviderError::Transport(e.to_string()))?;
        line.push('\n');
        self.writer
            .write_all(line.as_bytes())
            .and_then(|_| self.writer.flush())
            .map_err(|e| ProviderError::Transport(format!("write: {e}")))?;
        let mut reply = String::new();
        let n = self
            .reader
            .read_line(&mut reply)
            .map_err(|e| ProviderError::Transport(format!("read: {e}")))?;
        if n == 0 {
            return Err(ProviderError::Transport("provider closed the connection".into()));
        }
        serde_json::from_str(reply.trim_end())
            .map_err(|e| ProviderError::Transport(format!("malformed response: {e}")))
    }

    fn expect_ok(resp: WireResponse, id: u64) -> Result<WireResponse, ProviderError> {
        if resp.id != Some(id) {
            return Err(ProviderError::Transport(format!(
                "response id {:?} does not match request {id}",
                resp.id
            )));
        }
        if !resp.ok {
            return Err(ProviderError::ProviderFault(
                resp.error.unwrap_or_else(|| "unspecified provider error".into()),
            ));
        }
        Ok(resp)
    }
}

impl Transport for LineTransport {
    fn hello(&mut self, version: u32) -> Result<Capabilities, ProviderError> {
        let resp = self
            .round_trip(&WireRequest::Hello { version })
            .map_err(|e| match e {
                ProviderError::Transport(msg) => ProviderError::Unreachable(msg),
                other => other,
            })?;
        if !resp.ok {
            let detail = resp.error.unwrap_or_default();
            if detail.contains("version") {
                return Err(ProviderError::VersionMismatch {
                    expected: version,
                    detail,
                });
            }
            return Err(ProviderError::ProviderFault(detail));
        }
        let missing = |field: &str| ProviderError::ProviderFault(format!("hello reply lacks {field}"));
        Ok(Capabilities {
            vocab_size: resp.vocab_size.ok_or_else(|| missing("vocab_size"))?,
            eos_id: TokenId(resp.eos_id.ok_or_else(|| missing("eos_id"))?),
            max_context: resp.max_context.ok_or_else(|| missing("max_context"))?,
            provider_name: resp.name.ok_or_else(|| missing("name"))?,
        })
    }

    fn dist(&mut self, id: u64, req: &DistributionRequest<'_>) -> Result<Vec<f64>, ProviderError> {
        let (png, digest) = match req.image {
            Some(img) => (Some(img.png_base64()?.to_string()), Some(img.digest().to_string())),
            None => (None, None),
        };
        let wire = WireRequest::Dist {
            id,
            image_png_b64: png,
            image_digest: digest,
            prompt: req.prompt.to_string(),
            generated: req.generated.iter().map(|t| t.0).collect(),
        };
        let resp = Self::expect_ok(self.round_trip(&wire)?, id)?;
        resp.log_probs
            .map(decode_log_probs)
            .ok_or_else(|| ProviderError::ProviderFault("dist reply lacks log_probs".into()))
    }

    fn detok(&mut self, id: u64, ids: &[TokenId]) -> Result<String, ProviderError> {
        let wire = WireRequest::Detok {
            id,
            ids: ids.iter().map(|t| t.0).collect(),
        };
        let resp = Self::expect_ok(self.round_trip(&wire)?, id)?;
        resp.text
            .ok_or_else(|| ProviderError::ProviderFault("detok reply lacks text".into()))
    }
}

impl Drop for LineTransport {
    fn drop(&mut self) {
        if let Some(mut child) = self.child.take() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}
