//! Fusion strategies, sampling and the auto-regressive decode loop.

mod fusion;
mod session;

use serde::{Deserialize, Serialize};

use crate::dist::{DistError, TokenDistribution, TokenId};
use crate::rng::Rng;

pub use fusion::{
    apply_mask, fuse_combined, fuse_m3id, fuse_ritual, fuse_vcd, m3id_weight, plausibility_mask,
    PlausibleSet,
};
pub use session::{
    decode, ritual_plus_decode, run_session, step_distribution, DecodeError, DecodeFailure,
    DecodeOutput, DecodeSession, DecodeTrace, FinishReason, StepOutcome, StepTrace, StreamDists,
    StreamTop, TRACE_TOP_K,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Base,
    Ritual,
    Vcd,
    M3id,
    RitualVcd,
    RitualM3id,
    RitualPlus,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Base,
        Strategy::Ritual,
        Strategy::Vcd,
        Strategy::M3id,
        Strategy::RitualVcd,
        Strategy::RitualM3id,
        Strategy::RitualPlus,
    ];

    /// Conditioning streams queried at every step, original image first.
    pub fn streams(self) -> &'static [StreamKind] {
        use StreamKind::*;
        match self {
            Strategy::Base => &[Original],
            Strategy::Ritual | Strategy::RitualPlus => &[Original, Transformed],
            Strategy::Vcd => &[Original, Distorted],
            Strategy::M3id => &[Original, TextOnly],
            Strategy::RitualVcd => &[Original, Transformed, Distorted],
            Strategy::RitualM3id => &[Original, Transformed, TextOnly],
        }
    }

    pub fn needs_transform(self) -> bool {
        self.streams().contains(&StreamKind::Transformed)
    }

    pub fn needs_distortion(self) -> bool {
        self.streams().contains(&StreamKind::Distorted)
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Base => "base",
            Strategy::Ritual => "ritual",
            Strategy::Vcd => "vcd",
            Strategy::M3id => "m3id",
            Strategy::RitualVcd => "ritual_vcd",
            Strategy::RitualM3id => "ritual_m3id",
            Strategy::RitualPlus => "ritual_plus",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', '+'], "_");
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == norm || st.name().replace('_', "") == norm)
            .ok_or_else(|| format!("unknown strategy {s:?}"))
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which conditioning a distribution was computed under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    Original,
    Transformed,
    Distorted,
    TextOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    Greedy,
    Multinomial,
}

impl std::str::FromStr for Sampler {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "greedy" | "argmax" => Ok(Sampler::Greedy),
            "multinomial" | "sample" => Ok(Sampler::Multinomial),
            _ => Err(format!("unknown sampler {s:?}")),
        }
    }
}

pub const DEFAULT_ALPHA: f64 = 3.0;
pub const DEFAULT_BETA: f64 = 0.1;
pub const DEFAULT_GAMMA: f64 = 2.0;
pub const DEFAULT_DELTA: f64 = 1.0;
pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const DEFAULT_NOISE_STEPS: usize = 500;
/// Contrastive weights used inside the combined transformed + visual
/// contrastive strategy.
pub const COMBINED_VCD_GAMMA: f64 = 1.0;
pub const COMBINED_VCD_DELTA: f64 = 0.1;
pub const COMBINED_VCD_ZETA: f64 = 3.0;
pub const COMBINED_M3ID_ZETA: f64 = 3.5;
/// Token budget for captioning.
pub const CAPTION_MAX_NEW_TOKENS: usize = 64;
/// Token budget for yes/no questions.
pub const YES_NO_MAX_NEW_TOKENS: usize = 16;

/// Every decoding hyperparameter. Use [`StrategyConfig::for_strategy`] for
/// the per-strategy defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub lambda: f64,
    pub zeta: f64,
    pub noise_steps: usize,
    pub max_new_tokens: usize,
    pub sampler: Sampler,
    pub seed: u64,
}

impl StrategyConfig {
    pub fn for_strategy(strategy: Strategy) -> Self {
        let (gamma, delta) = match strategy {
            Strategy::RitualVcd => (COMBINED_VCD_GAMMA, COMBINED_VCD_DELTA),
            _ => (DEFAULT_GAMMA, DEFAULT_DELTA),
        };
        let zeta = match strategy {
            Strategy::RitualM3id => COMBINED_M3ID_ZETA,
            _ => COMBINED_VCD_ZETA,
        };
        Self {
            strategy,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            gamma,
            delta,
            lambda: DEFAULT_LAMBDA,
            zeta,
            noise_steps: DEFAULT_NOISE_STEPS,
            max_new_tokens: CAPTION_MAX_NEW_TOKENS,
            sampler: Sampler::Multinomial,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(format!("alpha must be a finite value >= 0, got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        if !self.gamma.is_finite() || !self.delta.is_finite() {
            return Err("gamma and delta must be finite".into());
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(format!("lambda must be > 0, got {}", self.lambda));
        }
        if !(self.zeta >= 0.0 && self.zeta.is_finite()) {
            return Err(format!("zeta must be a finite value >= 0, got {}", self.zeta));
        }
        if self.noise_steps > crate::transforms::DIFFUSION_STEPS {
            return Err(format!(
                "noise_steps must be at most {}, got {}",
                crate::transforms::DIFFUSION_STEPS,
                self.noise_steps
            ));
        }
        if self.max_new_tokens == 0 {
            return Err("max_new_tokens must be positive".into());
        }
        Ok(())
    }
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self::for_strategy(Strategy::Ritual)
    }
}

/// Greedy: lowest-id argmax. Multinomial: one `next_f64` draw, inverted
/// over the cumulative probabilities in id order.
pub fn sample(d: &TokenDistribution, sampler: Sampler, rng: &mut Rng) -> Result<TokenId, DistError> {
    match sampler {
        Sampler::Greedy => d.argmax(),
        Sampler::Multinomial => {
            let probs = d.probs();
            let total: f64 = probs.iter().sum();
            if total <= 0.0 {
                return Err(DistError::AllMasked);
            }
            let target = rng.next_f64() * total;
            let mut cum = 0.0;
            let mut last_positive = None;
            for (i, p) in probs.iter().enumerate() {
                if *p <= 0.0 {
                    continue;
                }
                cum += p;
                last_positive = Some(i);
                if cum > target {
                    return Ok(TokenId(i as u32));
                }
            }
            last_positive
                .map(|i| TokenId(i as u32))
                .ok_or(DistError::AllMasked)
        }
    }
}
