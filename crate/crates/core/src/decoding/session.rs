use serde::Serialize;
use thiserror::Error;

use super::fusion::{
    apply_mask, fuse_combined, fuse_m3id, fuse_ritual, fuse_vcd, plausibility_mask, PlausibleSet,
};
use super::{sample, Strategy, StrategyConfig, StreamKind};
use crate::dist::{DistError, TokenDistribution, TokenId};
use crate::provider::{DistributionRequest, ImageInput, ProviderError, ProviderHandle};
use crate::rng::Rng;
use crate::selector::{select_transform, SelectionTrace};
use crate::transforms::{apply_transform, diffusion_distort, sample_transform, TransformError, TransformParams};

/// Entries per distribution head recorded in traces.
pub const TRACE_TOP_K: usize = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecodeError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Distribution(#[from] DistError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("session lacks the {0:?} conditioning required by the strategy")]
    MissingStream(StreamKind),
}

/// Distributions for one step, one per conditioning stream.
#[derive(Debug, Clone)]
pub struct StreamDists {
    pub original: TokenDistribution,
    pub transformed: Option<TokenDistribution>,
    pub distorted: Option<TokenDistribution>,
    pub text_only: Option<TokenDistribution>,
}

impl StreamDists {
    pub fn original_only(original: TokenDistribution) -> Self {
        Self {
            original,
            transformed: None,
            distorted: None,
            text_only: None,
        }
    }

    fn get(&self, kind: StreamKind) -> Result<&TokenDistribution, DecodeError> {
        let d = match kind {
            StreamKind::Original => Some(&self.original),
            StreamKind::Transformed => self.transformed.as_ref(),
            StreamKind::Distorted => self.distorted.as_ref(),
            StreamKind::TextOnly => self.text_only.as_ref(),
        };
        d.ok_or(DecodeError::MissingStream(kind))
    }

    fn set(&mut self, kind: StreamKind, d: TokenDistribution) {
        match kind {
            StreamKind::Original => self.original = d,
            StreamKind::Transformed => self.transformed = Some(d),
            StreamKind::Distorted => self.distorted = Some(d),
            StreamKind::TextOnly => self.text_only = Some(d),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// Plausible set from the original-image distribution.
    pub mask: PlausibleSet,
    pub fused: TokenDistribution,
    /// The fusion rule left no positive weight inside the plausible set and
    /// the masked original distribution was used instead.
    pub fallback: bool,
}

/// Masks and fuses one step's distributions per `cfg.strategy`. `t` is the
/// 1-based index of the token being generated. `forced` is admitted to the
/// plausible set unconditionally (the decode loop passes EOS).
pub fn step_distribution(
    cfg: &StrategyConfig,
    streams: &StreamDists,
    t: usize,
    forced: Option<TokenId>,
) -> Result<StepOutcome, DecodeError> {
    let orig = &streams.original;
    let mut mask = plausibility_mask(orig, cfg.beta);
    if let Some(id) = forced {
        orig.check_token(id)?;
        if !orig.is_masked(id) {
            mask = mask.force(id);
        }
    }
    let fused = match cfg.strategy {
        Strategy::Base => apply_mask(orig, &mask),
        Strategy::Ritual | Strategy::RitualPlus => {
            fuse_ritual(orig, streams.get(StreamKind::Transformed)?, cfg.alpha, &mask)
        }
        Strategy::Vcd => fuse_vcd(orig, streams.get(StreamKind::Distorted)?, cfg.gamma, cfg.delta, &mask),
        Strategy::M3id => fuse_m3id(orig, streams.get(StreamKind::TextOnly)?, cfg.lambda, t, &mask),
        Strategy::RitualVcd => {
            let trans = streams.get(StreamKind::Transformed)?;
            fuse_vcd(orig, streams.get(StreamKind::Distorted)?, cfg.gamma, cfg.delta, &mask)
                .and_then(|d| fuse_combined(trans, &d, cfg.zeta, &mask))
        }
        Strategy::RitualM3id => {
            let trans = streams.get(StreamKind::Transformed)?;
            fuse_m3id(orig, streams.get(StreamKind::TextOnly)?, cfg.lambda, t, &mask)
                .and_then(|d| fuse_combined(trans, &d, cfg.zeta, &mask))
        }
    };
    match fused {
        Ok(fused) => Ok(StepOutcome {
            mask,
            fused,
            fallback: false,
        }),
        Err(DistError::AllMasked) => Ok(StepOutcome {
            fused: apply_mask(orig, &mask)?,
            mask,
            fallback: true,
        }),
        Err(e) => Err(e.into()),
    }
}

/// Images and prompt for one generated response. Auxiliary images are fixed
/// for the whole session.
#[derive(Debug, Clone)]
pub struct DecodeSession {
    image: ImageInput,
    prompt: String,
    transformed: Option<ImageInput>,
    distorted: Option<ImageInput>,
    transform_used: Option<TransformParams>,
    selection: Option<SelectionTrace>,
}

impl DecodeSession {
    /// A session with no auxiliary images, enough for `Base` and `M3id`.
    pub fn new(image: impl Into<ImageInput>, prompt: impl Into<String>) -> Self {
        Self {
            image: image.into(),
            prompt: prompt.into(),
            transformed: None,
            distorted: None,
            transform_used: None,
            selection: None,
        }
    }

    /// Draws whatever the strategy needs: a transformation (uniformly, or by
    /// self-feedback for `RitualPlus`), then the diffusion-noised image.
    pub fn prepare(
        image: impl Into<ImageInput>,
        prompt: impl Into<String>,
        cfg: &StrategyConfig,
        provider: &mut ProviderHandle,
        rng: &mut Rng,
    ) -> Result<Self, DecodeFailure> {
        let mut session = Self::new(image, prompt);
        let fail = |session: &DecodeSession, error: DecodeError| DecodeFailure {
            trace: Box::new(DecodeTrace::empty(cfg, session)),
            error,
        };
        if let Err(e) = cfg.validate() {
            return Err(fail(&session, DecodeError::Config(e)));
        }
        let (w, h) = (session.image.image().width(), session.image.image().height());
        if cfg.strategy == Strategy::RitualPlus {
            let (params, selection) = select_transform(&session.image, &session.prompt, provider, cfg, rng)
                .map_err(|e| fail(&session, e))?;
            session.selection = Some(selection);
            if let Err(e) = session.set_transform(params) {
                return Err(fail(&session, e));
            }
        } else if cfg.strategy.needs_transform() {
            let params = sample_transform(rng, w, h);
            if let Err(e) = session.set_transform(params) {
                return Err(fail(&session, e));
            }
        }
        if cfg.strategy.needs_distortion() {
            let noisy = diffusion_distort(session.image.image(), cfg.noise_steps, rng)
                .map_err(|e| fail(&session, e.into()))?;
            session.distorted = Some(ImageInput::new(noisy));
        }
        Ok(session)
    }

    /// Applies `params` to the original image as the transformed view.
    pub fn with_transform(mut self, params: TransformParams) -> Result<Self, DecodeError> {
        self.set_transform(params)?;
        Ok(self)
    }

    fn set_transform(&mut self, params: TransformParams) -> Result<(), DecodeError> {
        let out = apply_transform(self.image.image(), &params)?;
        self.transformed = Some(ImageInput::new(out));
        self.transform_used = Some(params);
        Ok(())
    }

    /// Uses `image` as the corrupted view for contrastive strategies.
    pub fn with_distorted(mut self, image: impl Into<ImageInput>) -> Self {
        self.distorted = Some(image.into());
        self
    }

    pub fn image(&self) -> &ImageInput {
        &self.image
    }

    pub fn prompt(&self) -> &str {
        &self.prompt
    }

    pub fn transformed(&self) -> Option<&ImageInput> {
        self.transformed.as_ref()
    }

    pub fn distorted(&self) -> Option<&ImageInput> {
        self.distorted.as_ref()
    }

    pub fn transform_used(&self) -> Option<&TransformParams> {
        self.transform_used.as_ref()
    }

    pub fn selection(&self) -> Option<&SelectionTrace> {
        self.selection.as_ref()
    }

    fn stream_image(&self, kind: StreamKind) -> Result<Option<&ImageInput>, DecodeError> {
        match kind {
            StreamKind::Original => Ok(Some(&self.image)),
            StreamKind::Transformed => self
                .transformed
                .as_ref()
                .map(Some)
                .ok_or(DecodeError::MissingStream(kind)),
            StreamKind::Distorted => self
                .distorted
                .as_ref()
                .map(Some)
                .ok_or(DecodeError::MissingStream(kind)),
            StreamKind::TextOnly => Ok(None),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StreamTop {
    pub stream: StreamKind,
    pub top: Vec<(TokenId, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepTrace {
    pub t: usize,
    pub streams: Vec<StreamTop>,
    pub fused: Vec<(TokenId, f64)>,
    pub plausible: usize,
    pub fallback: bool,
    pub chosen: TokenId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Eos,
    MaxNewTokens,
    MaxContext,
    Error,
}

/// Auditable record of one session.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodeTrace {
    pub config: StrategyConfig,
    pub transform: Option<TransformParams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionTrace>,
    pub steps: Vec<StepTrace>,
    pub tokens: Vec<TokenId>,
    pub text: Option<String>,
    pub finish: FinishReason,
    pub error: Option<String>,
}

impl DecodeTrace {
    fn empty(cfg: &StrategyConfig, session: &DecodeSession) -> Self {
        Self {
            config: cfg.clone(),
            transform: session.transform_used.clone(),
            selection: session.selection.clone(),
            steps: Vec::new(),
            tokens: Vec::new(),
            text: None,
            finish: FinishReason::Error,
            error: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub text: String,
    /// Generated ids, EOS excluded.
    pub tokens: Vec<TokenId>,
    pub trace: DecodeTrace,
}

/// A session that stopped on an error, with everything recorded up to it.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{error}")]
pub struct DecodeFailure {
    pub error: DecodeError,
    pub trace: Box<DecodeTrace>,
}

/// Generates until EOS or `cfg.max_new_tokens`. Each step issues one provider
/// query per stream of `cfg.strategy`.
pub fn decode(
    session: &DecodeSession,
    provider: &mut ProviderHandle,
    cfg: &StrategyConfig,
    rng: &mut Rng,
) -> Result<DecodeOutput, DecodeFailure> {
    let mut trace = DecodeTrace::empty(cfg, session);
    match decode_inner(session, provider, cfg, rng, &mut trace) {
        Ok(text) => Ok(DecodeOutput {
            text,
            tokens: trace.tokens.clone(),
            trace,
        }),
        Err(error) => {
            trace.finish = FinishReason::Error;
            trace.error = Some(error.to_string());
            Err(DecodeFailure {
                error,
                trace: Box::new(trace),
            })
        }
    }
}

fn decode_inner(
    session: &DecodeSession,
    provider: &mut ProviderHandle,
    cfg: &StrategyConfig,
    rng: &mut Rng,
    trace: &mut DecodeTrace,
) -> Result<String, DecodeError> {
    cfg.validate().map_err(DecodeError::Config)?;
    let streams = cfg.strategy.streams();
    for &kind in streams {
        session.stream_image(kind)?;
    }
    let caps = provider.capabilities().clone();
    let eos = caps.eos_id;
    let mut generated: Vec<TokenId> = Vec::new();
    trace.finish = FinishReason::MaxNewTokens;
    for t in 1..=cfg.max_new_tokens {
        if generated.len() >= caps.max_context {
            trace.finish = FinishReason::MaxContext;
            break;
        }
        let mut dists: Option<StreamDists> = None;
        let mut tops = Vec::with_capacity(streams.len());
        for &kind in streams {
            let req = DistributionRequest {
                image: session.stream_image(kind)?,
                prompt: &session.prompt,
                generated: &generated,
            };
            let d = provider.next_distribution(&req)?;
            tops.push(StreamTop {
                stream: kind,
                top: d.top_k(TRACE_TOP_K),
            });
            match dists.as_mut() {
                None => dists = Some(StreamDists::original_only(d)),
                Some(s) => s.set(kind, d),
            }
        }
        let dists = dists.expect("every strategy queries the original stream");
        let outcome = step_distribution(cfg, &dists, t, Some(eos))?;
        let chosen = sample(&outcome.fused, cfg.sampler, rng)?;
        trace.steps.push(StepTrace {
            t,
            streams: tops,
            fused: outcome.fused.top_k(TRACE_TOP_K),
            plausible: outcome.mask.len(),
            fallback: outcome.fallback,
            chosen,
        });
        if chosen == eos {
            trace.finish = FinishReason::Eos;
            break;
        }
        generated.push(chosen);
        trace.tokens.push(chosen);
    }
    let text = provider.detokenize(&generated)?;
    trace.text = Some(text.clone());
    Ok(text)
}

/// Prepares a session for `cfg.strategy` and decodes it.
pub fn run_session(
    image: impl Into<ImageInput>,
    prompt: &str,
    provider: &mut ProviderHandle,
    cfg: &StrategyConfig,
    rng: &mut Rng,
) -> Result<DecodeOutput, DecodeFailure> {
    let session = DecodeSession::prepare(image, prompt, cfg, provider, rng)?;
    decode(&session, provider, cfg, rng)
}

/// Decoding with a self-selected transformation; `cfg.strategy` must be
/// `RitualPlus`.
pub fn ritual_plus_decode(
    image: impl Into<ImageInput>,
    prompt: &str,
    provider: &mut ProviderHandle,
    cfg: &StrategyConfig,
    rng: &mut Rng,
) -> Result<DecodeOutput, DecodeFailure> {
    let image = image.into();
    if cfg.strategy != Strategy::RitualPlus {
        let session = DecodeSession::new(image, prompt);
        return Err(DecodeFailure {
            trace: Box::new(DecodeTrace::empty(cfg, &session)),
            error: DecodeError::Config(format!(
                "ritual_plus_decode needs strategy ritual_plus, got {}",
                cfg.strategy
            )),
        });
    }
    run_session(image, prompt, provider, cfg, rng)
}
