//! Deterministic mock providers.
//!
//! # Mock distribution
//!
//! For a request `(image, prompt, generated)` the mock feeds SHA-256 with
//!
//! 1. the ASCII tag `ritual-mock/1\n`,
//! 2. the image key: the 64-character hex pixel digest, or `noimg` when the
//!    request carries no image (or the mock ignores images), then `\n`,
//! 3. the prompt length as u64 little-endian, then the prompt's UTF-8 bytes,
//! 4. the prefix length as u64 little-endian, then each id as u32
//!    little-endian.
//!
//! For token `i` that state is extended with `i` as u32 little-endian and
//! finalized. The first eight digest bytes, read big-endian as `h`, give
//! `u = ((h >> 11) + 0.5) / 2^53` in `(0, 1)`; the logit is `5u` and the
//! distribution is the log-softmax of the logits.

use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use super::{Backend, Capabilities, DistributionRequest};
use crate::dist::{TokenDistribution, TokenId};

pub const MOCK_VOCAB_SIZE: usize = 32;
pub const MOCK_EOS_ID: TokenId = TokenId(0);
pub const MOCK_MAX_CONTEXT: usize = 4096;
pub const MOCK_NAME: &str = "mock";

/// Word for each of the first 32 mock token ids; larger vocabularies use
/// `tok<N>` for the remainder.
pub const MOCK_WORDS: [&str; MOCK_VOCAB_SIZE] = [
    "</s>", "a", "the", "yes", "no", "there", "is", "dog", "cat", "car", "person", "frisbee",
    "table", "chair", "in", "on", "image", "with", ".", "red", "color", "small", "sitting",
    "near", "crop", "rotate", "blur", "flip", "gaussian", "horizontal", "vertical", "jitter",
];

const LOGIT_SCALE: f64 = 5.0;
const TWO_POW_53: f64 = (1u64 << 53) as f64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockConfig {
    pub vocab_size: usize,
    pub eos_id: TokenId,
    pub max_context: usize,
    /// Condition on `noimg` for every request, so image and text-only
    /// queries coincide.
    pub ignore_image: bool,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            vocab_size: MOCK_VOCAB_SIZE,
            eos_id: MOCK_EOS_ID,
            max_context: MOCK_MAX_CONTEXT,
            ignore_image: false,
        }
    }
}

impl MockConfig {
    pub fn capabilities(&self) -> Capabilities {
        Capabilities {
            vocab_size: self.vocab_size,
            eos_id: self.eos_id,
            max_context: self.max_context,
            provider_name: MOCK_NAME.to_string(),
        }
    }
}

/// `vocab=N,eos=N,max_context=N,ignore_image`, all optional.
impl std::str::FromStr for MockConfig {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut cfg = MockConfig::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part.split_once('=').unwrap_or((part, ""));
            let num = || {
                value
                    .parse::<usize>()
                    .map_err(|_| format!("mock option {key} needs an integer, got {value:?}"))
            };
            match key {
                "vocab" | "vocab_size" => cfg.vocab_size = num()?,
                "eos" | "eos_id" => cfg.eos_id = TokenId(num()? as u32),
                "max_context" => cfg.max_context = num()?,
                "ignore_image" => cfg.ignore_image = true,
                _ => return Err(format!("unknown mock option {key:?}")),
            }
        }
        if cfg.vocab_size == 0 || cfg.eos_id.index() >= cfg.vocab_size {
            return Err(format!(
                "mock needs vocab > eos id, got vocab {} eos {}",
                cfg.vocab_size, cfg.eos_id
            ));
        }
        Ok(cfg)
    }
}

impl std::fmt::Display for MockConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let default = MockConfig::default();
        let mut parts = Vec::new();
        if self.vocab_size != default.vocab_size {
            parts.push(format!("vocab={}", self.vocab_size));
        }
        if self.eos_id != default.eos_id {
            parts.push(format!("eos={}", self.eos_id));
        }
        if self.max_context != default.max_context {
            parts.push(format!("max_context={}", self.max_context));
        }
        if self.ignore_image {
            parts.push("ignore_image".into());
        }
        f.write_str(&parts.join(","))
    }
}

fn prefix_hasher(image_key: &[u8], prompt: &str, generated: &[TokenId]) -> Sha256 {
    let mut h = Sha256::new();
    h.update(b"ritual-mock/1\n");
    h.update(image_key);
    h.update(b"\n");
    h.update((prompt.len() as u64).to_le_bytes());
    h.update(prompt.as_bytes());
    h.update((generated.len() as u64).to_le_bytes());
    for id in generated {
        h.update(id.0.to_le_bytes());
    }
    h
}

fn mock_log_probs(vocab_size: usize, ignore_image: bool, req: &DistributionRequest<'_>) -> Vec<f64> {
    let image_key: &[u8] = match req.image {
        Some(img) if !ignore_image => img.digest().as_bytes(),
        _ => b"noimg",
    };
    let prefix = prefix_hasher(image_key, req.prompt, req.generated);
    let logits: Vec<f64> = (0..vocab_size as u32)
        .map(|i| {
            let mut h = prefix.clone();
            h.update(i.to_le_bytes());
            let digest = h.finalize();
            let mut head = [0u8; 8];
            head.copy_from_slice(&digest[..8]);
            let bits = u64::from_be_bytes(head);
            let u = ((bits >> 11) as f64 + 0.5) / TWO_POW_53;
            LOGIT_SCALE * u
        })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.into_iter().map(|l| l - lse).collect()
}

/// The mock's next-token distribution, documented at module level.
pub fn mock_distribution(caps: &Capabilities, req: &DistributionRequest<'_>) -> TokenDistribution {
    let lp = mock_log_probs(caps.vocab_size, false, req);
    TokenDistribution::from_log_weights(lp)
        .and_then(|d| d.normalize())
        .expect("mock logits are finite")
}

fn mock_word(id: TokenId) -> String {
    MOCK_WORDS
        .get(id.index())
        .map(|w| w.to_string())
        .unwrap_or_else(|| format!("tok{}", id.0))
}

fn mock_detokenize(ids: &[TokenId]) -> String {
    ids.iter().map(|&id| mock_word(id)).collect::<Vec<_>>().join(" ")
}

/// Maps words from the mock table back to ids; unknown words are skipped.
pub fn mock_tokenize(text: &str) -> Vec<TokenId> {
    text.split_whitespace()
        .filter_map(|w| {
            let w = w.to_ascii_lowercase();
            MOCK_WORDS
                .iter()
                .position(|m| *m == w)
                .map(|i| TokenId(i as u32))
                .or_else(|| w.strip_prefix("tok").and_then(|n| n.parse().ok()).map(TokenId))
        })
        .collect()
}

/// Hash-driven provider; pure apart from its call counter.
#[derive(Debug, Default)]
pub struct MockBackend {
    config: MockConfig,
    calls: AtomicU64,
}

impl MockBackend {
    pub fn new(config: MockConfig) -> Self {
        Self {
            config,
            calls: AtomicU64::new(0),
        }
    }

    pub fn config(&self) -> &MockConfig {
        &self.config
    }

    /// Distribution queries served so far.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl Backend for MockBackend {
    fn capabilities(&self) -> Capabilities {
        self.config.capabilities()
    }

    fn distribution(&self, req: &DistributionRequest<'_>) -> Result<Vec<f64>, String> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        Ok(mock_log_probs(self.config.vocab_size, self.config.ignore_image, req))
    }

    fn detokenize(&self, ids: &[TokenId]) -> Result<String, String> {
        Ok(mock_detokenize(ids))
    }
}

/// A canned reply for prompts containing `prompt_contains`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptRule {
    pub prompt_contains: String,
    pub reply: Vec<TokenId>,
}

impl ScriptRule {
    /// `reply` is written in mock-table words, e.g. `"yes"` or `"gaussian blur"`.
    pub fn new(prompt_contains: impl Into<String>, reply: &str) -> Self {
        Self {
            prompt_contains: prompt_contains.into(),
            reply: mock_tokenize(reply),
        }
    }
}

/// Mock whose answers to matching prompts are scripted: at step `k` the
/// `k`-th reply token gets probability `SCRIPT_PEAK` (then EOS once the
/// reply is exhausted), the rest share the remainder evenly. Prompts that
/// match no rule fall through to the hash mock.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    base: MockBackend,
    rules: Vec<ScriptRule>,
}

const SCRIPT_PEAK: f64 = 0.97;

impl ScriptedBackend {
    pub fn new(config: MockConfig, rules: Vec<ScriptRule>) -> Self {
        Self {
            base: MockBackend::new(config),
            rules,
        }
    }

    pub fn calls(&self) -> u64 {
        self.base.calls()
    }
}

impl Backend for ScriptedBackend {
    fn capabilities(&self) -> Capabilities {
        self.base.capabilities()
    }

    fn distribution(&self, req: &DistributionRequest<'_>) -> Result<Vec<f64>, String> {
        let Some(rule) = self.rules.iter().find(|r| req.prompt.contains(&r.prompt_contains)) else {
            return self.base.distribution(req);
        };
        self.base.calls.fetch_add(1, Ordering::Relaxed);
        let n = self.base.config.vocab_size;
        let target = rule
            .reply
            .get(req.generated.len())
            .copied()
            .unwrap_or(self.base.config.eos_id);
        let rest = ((1.0 - SCRIPT_PEAK) / (n - 1).max(1) as f64).ln();
        Ok((0..n)
            .map(|i| if i == target.index() { SCRIPT_PEAK.ln() } else { rest })
            .collect())
    }

    fn detokenize(&self, ids: &[TokenId]) -> Result<String, String> {
        self.base.detokenize(ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ImageBuffer;
    use crate::provider::ImageInput;

    fn req<'a>(image: Option<&'a ImageInput>, prompt: &'a str, generated: &'a [TokenId]) -> DistributionRequest<'a> {
        DistributionRequest {
            image,
            prompt,
            generated,
        }
    }

    #[test]
    fn word_table_entries() {
        assert_eq!(mock_detokenize(&[TokenId(3), TokenId(7)]), "yes dog");
        assert_eq!(mock_detokenize(&[TokenId(40)]), "tok40");
        assert_eq!(mock_tokenize("Gaussian blur"), vec![TokenId(28), TokenId(26)]);
    }

    #[test]
    fn distribution_is_normalized_and_pure() {
        let caps = MockConfig::default().capabilities();
        let img = ImageInput::new(ImageBuffer::filled(4, 4, [1, 2, 3]));
        let ids = [TokenId(5)];
        let a = mock_distribution(&caps, &req(Some(&img), "q", &ids));
        let b = mock_distribution(&caps, &req(Some(&img), "q", &ids));
        assert_eq!(a, b);
        let total: f64 = a.probs().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn distribution_matches_hand_built_hash() {
        // Rebuild the first logit byte by byte from the documented layout.
        let caps = MockConfig::default().capabilities();
        let d = mock_distribution(&caps, &req(None, "ab", &[TokenId(2)]));
        let mut bytes = b"ritual-mock/1\nnoimg\n".to_vec();
        bytes.extend_from_slice(&2u64.to_le_bytes());
        bytes.extend_from_slice(b"ab");
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        let logit = |i: u32| {
            let mut b = bytes.clone();
            b.extend_from_slice(&i.to_le_bytes());
            let h = Sha256::digest(&b);
            let bits = u64::from_be_bytes(h[..8].try_into().unwrap());
            5.0 * (((bits >> 11) as f64 + 0.5) / 2f64.powi(53))
        };
        let logits: Vec<f64> = (0..32).map(logit).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for (i, l) in logits.iter().enumerate() {
            assert!((d.prob(TokenId(i as u32)) - l.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn inputs_change_distribution() {
        let caps = MockConfig::default().capabilities();
        let img = ImageInput::new(ImageBuffer::filled(4, 4, [1, 2, 3]));
        let with = mock_distribution(&caps, &req(Some(&img), "q", &[]));
        let without = mock_distribution(&caps, &req(None, "q", &[]));
        assert_ne!(with, without);
        let p1 = mock_distribution(&caps, &req(None, "q", &[TokenId(1), TokenId(2)]));
        let p2 = mock_distribution(&caps, &req(None, "q", &[TokenId(1), TokenId(3)]));
        assert_ne!(p1, p2);
    }

    #[test]
    fn ignore_image_collapses_conditioning() {
        let m = MockBackend::new(MockConfig {
            ignore_image: true,
            ..Default::default()
        });
        let img = ImageInput::new(ImageBuffer::filled(4, 4, [1, 2, 3]));
        let a = m.distribution(&req(Some(&img), "q", &[])).unwrap();
        let b = m.distribution(&req(None, "q", &[])).unwrap();
        assert_eq!(a, b);
        assert_eq!(m.calls(), 2);
    }

    #[test]
    fn scripted_reply_then_eos() {
        let s = ScriptedBackend::new(MockConfig::default(), vec![ScriptRule::new("pick", "crop")]);
        let lp = s.distribution(&req(None, "please pick", &[])).unwrap();
        let d = TokenDistribution::from_log_weights(lp).unwrap();
        assert_eq!(d.argmax().unwrap(), TokenId(24));
        let lp = s.distribution(&req(None, "please pick", &[TokenId(24)])).unwrap();
        let d = TokenDistribution::from_log_weights(lp).unwrap();
        assert_eq!(d.argmax().unwrap(), MOCK_EOS_ID);
        let total: f64 = d.probs().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_round_trip_display() {
        let cfg: MockConfig = "vocab=5,ignore_image".parse().unwrap();
        assert_eq!(cfg.to_string().parse::<MockConfig>().unwrap(), cfg);
        assert!("eos=40".parse::<MockConfig>().is_err());
        assert!("colour=3".parse::<MockConfig>().is_err());
    }
}
