//! Self-feedback choice of the transformation: ask the model which of the
//! six transformations would help, parse the reply, fall back to a uniform
//! draw when the reply names none.

use serde::Serialize;

use crate::decoding::{decode, DecodeError, DecodeSession, Strategy, StrategyConfig};
use crate::provider::{ImageInput, ProviderHandle};
use crate::rng::Rng;
use crate::transforms::{sample_params, sample_transform, TransformKind, TransformParams};

/// Token budget for the selection answer.
pub const SELECTION_MAX_NEW_TOKENS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionTrace {
    pub prompt: String,
    pub response: String,
    /// What the response named, if anything.
    pub parsed: Option<TransformKind>,
    /// What was used; differs from `parsed` only on fallback.
    pub chosen: TransformKind,
    pub fallback: bool,
}

pub fn selection_prompt(question: &str) -> String {
    let mut s = String::from(
        "Which image transformation would most help you answer the question below?\n",
    );
    s.push_str("Question: ");
    s.push_str(question.trim());
    s.push_str("\nOptions:\n");
    for kind in TransformKind::ALL {
        s.push_str(&format!("{}: {}\n", kind.display_name(), kind.description()));
    }
    s.push_str("Answer with exactly one name.");
    s
}

const ALIASES: [(&str, TransformKind); 14] = [
    ("horizontal flip", TransformKind::HorizontalFlip),
    ("hflip", TransformKind::HorizontalFlip),
    ("vertical flip", TransformKind::VerticalFlip),
    ("vflip", TransformKind::VerticalFlip),
    // a bare "flip" is ambiguous; the fixed kind order resolves it
    ("flip", TransformKind::HorizontalFlip),
    ("rotate", TransformKind::Rotate),
    ("rotation", TransformKind::Rotate),
    ("color jitter", TransformKind::ColorJitter),
    ("colour jitter", TransformKind::ColorJitter),
    ("jitter", TransformKind::ColorJitter),
    ("gaussian blur", TransformKind::GaussianBlur),
    ("blur", TransformKind::GaussianBlur),
    ("gaussian", TransformKind::GaussianBlur),
    ("crop", TransformKind::Crop),
];

/// The transformation named earliest in `response` (case-insensitive,
/// matches must start on a word boundary). Ties at the same offset go to
/// the kind listed first.
pub fn parse_selection(response: &str) -> Option<TransformKind> {
    let text = response.to_lowercase();
    let mut best: Option<(usize, TransformKind)> = None;
    for (alias, kind) in ALIASES {
        let mut from = 0;
        while let Some(off) = text[from..].find(alias) {
            let pos = from + off;
            let boundary = text[..pos]
                .chars()
                .next_back()
                .is_none_or(|c| !c.is_alphanumeric());
            if boundary {
                let better = match best {
                    None => true,
                    Some((bp, bk)) => pos < bp || (pos == bp && kind < bk),
                };
                if better {
                    best = Some((pos, kind));
                }
                break;
            }
            from = pos + alias.len();
        }
    }
    best.map(|(_, k)| k)
}

/// Runs the selection sub-decode on the original image and draws concrete
/// parameters for the chosen kind. The sub-decode uses `cfg` with the `Base`
/// strategy and [`SELECTION_MAX_NEW_TOKENS`].
pub fn select_transform(
    image: &ImageInput,
    question: &str,
    provider: &mut ProviderHandle,
    cfg: &StrategyConfig,
    rng: &mut Rng,
) -> Result<(TransformParams, SelectionTrace), DecodeError> {
    let prompt = selection_prompt(question);
    let mut sub = cfg.clone();
    sub.strategy = Strategy::Base;
    sub.max_new_tokens = SELECTION_MAX_NEW_TOKENS;
    let session = DecodeSession::new(image.clone(), prompt.clone());
    let out = decode(&session, provider, &sub, rng).map_err(|f| f.error)?;
    let parsed = parse_selection(&out.text);
    let (w, h) = (image.image().width(), image.image().height());
    let params = match parsed {
        Some(kind) => sample_params(kind, rng, w, h),
        None => sample_transform(rng, w, h),
    };
    let trace = SelectionTrace {
        prompt,
        response: out.text,
        parsed,
        chosen: params.kind(),
        fallback: parsed.is_none(),
    };
    Ok((params, trace))
}
