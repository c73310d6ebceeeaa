use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;

use super::EvalError;

/// Bundled COCO lexicon, `canonical, surface, surface, ...` per line.
pub const COCO_SYNONYMS: &str = include_str!("../../data/coco_synonyms.txt");

/// Surface forms (single or multi-word) mapped to canonical object names.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectLexicon {
    vocab: BTreeSet<String>,
    surface: HashMap<String, String>,
    max_words: usize,
}

fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

fn plural(word: &str) -> String {
    const IRREGULAR: [(&str, &str); 9] = [
        ("person", "people"),
        ("child", "children"),
        ("mouse", "mice"),
        ("knife", "knives"),
        ("goose", "geese"),
        ("ox", "oxen"),
        ("calf", "calves"),
        ("sheep", "sheep"),
        ("foot", "feet"),
    ];
    if let Some((_, p)) = IRREGULAR.iter().find(|(s, _)| *s == word) {
        return p.to_string();
    }
    if let Some(stem) = word.strip_suffix("man") {
        return format!("{stem}men");
    }
    let b = word.as_bytes();
    if word.ends_with('y') && b.len() > 1 && !b"aeiou".contains(&b[b.len() - 2]) {
        return format!("{}ies", &word[..word.len() - 1]);
    }
    if ["s", "x", "z", "ch", "sh"].iter().any(|s| word.ends_with(s)) {
        return format!("{word}es");
    }
    format!("{word}s")
}

impl ObjectLexicon {
    /// The bundled COCO lexicon.
    pub fn coco() -> Self {
        Self::parse(COCO_SYNONYMS).expect("bundled lexicon is valid")
    }

    /// One category per line: canonical name first, then its surface forms,
    /// comma-separated. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, EvalError> {
        let mut vocab = Vec::new();
        let mut pairs = Vec::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(',').map(str::trim).filter(|s| !s.is_empty());
            let Some(canonical) = parts.next() else { continue };
            vocab.push(canonical.to_string());
            for s in parts {
                pairs.push((s.to_string(), canonical.to_string()));
            }
        }
        Self::from_pairs(vocab, pairs)
    }

    /// Builds a lexicon; every target must be in `vocab`. Plural forms of the
    /// final word are derived for every entry unless they collide with an
    /// explicit form. The result does not depend on pair order.
    pub fn from_pairs<V, P>(vocab: V, pairs: P) -> Result<Self, EvalError>
    where
        V: IntoIterator<Item = String>,
        P: IntoIterator<Item = (String, String)>,
    {
        let vocab: BTreeSet<String> = vocab.into_iter().map(|v| words(&v).join(" ")).collect();
        if vocab.iter().any(String::is_empty) {
            return Err(EvalError::Lexicon("empty object name".into()));
        }
        let mut explicit: BTreeMap<String, String> = BTreeMap::new();
        let mut insert = |surface: String, canonical: String| -> Result<(), EvalError> {
            match explicit.get(&surface) {
                Some(c) if *c != canonical => Err(EvalError::Lexicon(format!(
                    "{surface:?} maps to both {c:?} and {canonical:?}"
                ))),
                _ => {
                    explicit.insert(surface, canonical);
                    Ok(())
                }
            }
        };
        for v in &vocab {
            insert(v.clone(), v.clone())?;
        }
        for (surface, canonical) in pairs {
            let canonical = words(&canonical).join(" ");
            if !vocab.contains(&canonical) {
                return Err(EvalError::Lexicon(format!("target {canonical:?} is not in the vocabulary")));
            }
            let surface = words(&surface).join(" ");
            if surface.is_empty() {
                return Err(EvalError::Lexicon(format!("empty surface form for {canonical:?}")));
            }
            insert(surface, canonical)?;
        }
        // Derived plurals; ambiguous ones are dropped.
        let mut derived: BTreeMap<String, Option<String>> = BTreeMap::new();
        for (surface, canonical) in &explicit {
            let mut w: Vec<&str> = surface.split(' ').collect();
            let last = plural(w.pop().expect("non-empty"));
            w.push(&last);
            let form = w.join(" ");
            if explicit.contains_key(&form) {
                continue;
            }
            derived
                .entry(form)
                .and_modify(|c| {
                    if c.as_ref() != Some(canonical) {
                        *c = None;
                    }
                })
                .or_insert_with(|| Some(canonical.clone()));
        }
        let mut surface: HashMap<String, String> = explicit.into_iter().collect();
        surface.extend(derived.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))));
        let max_words = surface.keys().map(|k| k.split(' ').count()).max().unwrap_or(0);
        Ok(Self {
            vocab,
            surface,
            max_words,
        })
    }

    pub fn vocabulary(&self) -> &BTreeSet<String> {
        &self.vocab
    }

    pub fn canonical(&self, surface: &str) -> Option<&str> {
        self.surface.get(&words(surface).join(" ")).map(String::as_str)
    }

    /// Canonical objects in order of mention, longest surface form first at
    /// each position.
    pub fn mentions(&self, text: &str) -> Vec<&str> {
        let w = words(text);
        let mut out = Vec::new();
        let mut i = 0;
        'outer: while i < w.len() {
            for n in (1..=self.max_words.min(w.len() - i)).rev() {
                if let Some(c) = self.surface.get(&w[i..i + n].join(" ")) {
                    out.push(c.as_str());
                    i += n;
                    continue 'outer;
                }
            }
            i += 1;
        }
        out
    }
}

/// Deduplicated canonical objects mentioned in `caption`.
pub fn extract_objects(caption: &str, lexicon: &ObjectLexicon) -> BTreeSet<String> {
    lexicon.mentions(caption).into_iter().map(str::to_string).collect()
}

/// Splits on `.`, `!` and `?`, dropping pieces without any word.
pub fn split_sentences(text: &str) -> Vec<&str> {
    text.split(['.', '!', '?'])
        .map(str::trim)
        .filter(|s| s.chars().any(char::is_alphanumeric))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChairImage {
    pub id: String,
    pub caption: String,
    /// Canonical names of the objects actually present.
    pub gt: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChairImageScore {
    pub id: String,
    pub sentences: usize,
    pub hallucinated_sentences: usize,
    pub mentioned: Vec<String>,
    pub hallucinated: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChairScores {
    pub c_s: f64,
    pub c_i: f64,
    pub sentences: usize,
    pub hallucinated_sentences: usize,
    pub mentions: usize,
    pub hallucinated_mentions: usize,
    /// No sentences at all; `c_s` reported as 0.
    pub no_sentences: bool,
    /// No object mentioned at all; `c_i` reported as 0.
    pub no_mentions: bool,
    pub per_image: Vec<ChairImageScore>,
}

pub fn score_image(image: &ChairImage, lexicon: &ObjectLexicon) -> ChairImageScore {
    let mut mentioned = BTreeSet::new();
    let sentences = split_sentences(&image.caption);
    let mut hallucinated_sentences = 0;
    for s in &sentences {
        let objs = lexicon.mentions(s);
        if objs.iter().any(|o| !image.gt.contains(*o)) {
            hallucinated_sentences += 1;
        }
        mentioned.extend(objs);
    }
    let hallucinated = mentioned
        .iter()
        .filter(|o| !image.gt.contains(**o))
        .map(|o| o.to_string())
        .collect();
    ChairImageScore {
        id: image.id.clone(),
        sentences: sentences.len(),
        hallucinated_sentences,
        mentioned: mentioned.into_iter().map(str::to_string).collect(),
        hallucinated,
    }
}

/// Sentence-level (`c_s`) and per-image-deduplicated instance-level (`c_i`)
/// hallucination rates, pooled over all images.
pub fn chair_scores(images: &[ChairImage], lexicon: &ObjectLexicon) -> ChairScores {
    aggregate(images.iter().map(|im| score_image(im, lexicon)).collect())
}

pub(crate) fn aggregate(per_image: Vec<ChairImageScore>) -> ChairScores {
    let sentences: usize = per_image.iter().map(|s| s.sentences).sum();
    let hallucinated_sentences: usize = per_image.iter().map(|s| s.hallucinated_sentences).sum();
    let mentions: usize = per_image.iter().map(|s| s.mentioned.len()).sum();
    let hallucinated_mentions: usize = per_image.iter().map(|s| s.hallucinated.len()).sum();
    let frac = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    ChairScores {
        c_s: frac(hallucinated_sentences, sentences),
        c_i: frac(hallucinated_mentions, mentions),
        sentences,
        hallucinated_sentences,
        mentions,
        hallucinated_mentions,
        no_sentences: sentences == 0,
        no_mentions: mentions == 0,
        per_image,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(objs: &[&str]) -> BTreeSet<String> {
        objs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn extraction_examples() {
        let lex = ObjectLexicon::coco();
        assert_eq!(extract_objects("A dog catches a frisbee", &lex), gt(&["dog", "frisbee"]));
        assert!(extract_objects("", &lex).is_empty());
        assert_eq!(extract_objects("a puppy runs", &lex), gt(&["dog"]));
    }

    #[test]
    fn longest_first_and_plurals() {
        let lex = ObjectLexicon::coco();
        assert_eq!(extract_objects("Two hot dogs on a plate", &lex), gt(&["hot dog"]));
        assert_eq!(extract_objects("a teddy bear", &lex), gt(&["teddy bear"]));
        assert_eq!(extract_objects("three men and two women", &lex), gt(&["person"]));
        assert_eq!(extract_objects("people with knives", &lex), gt(&["person", "knife"]));
        assert_eq!(extract_objects("a dining table and chairs", &lex), gt(&["dining table", "chair"]));
        assert_eq!(extract_objects("buses and ponies", &lex), gt(&["bus", "horse"]));
        assert_eq!(extract_objects("a toilet seat", &lex), gt(&["toilet"]));
    }

    #[test]
    fn lexicon_validation() {
        let err = ObjectLexicon::from_pairs(vec!["dog".into()], vec![("puppy".into(), "cat".into())]);
        assert!(matches!(err, Err(EvalError::Lexicon(_))));
        let err = ObjectLexicon::from_pairs(
            vec!["dog".into(), "cat".into()],
            vec![("pet".into(), "dog".into()), ("pet".into(), "cat".into())],
        );
        assert!(matches!(err, Err(EvalError::Lexicon(_))));
        assert_eq!(ObjectLexicon::coco().vocabulary().len(), 80);
    }

    #[test]
    fn order_independent() {
        let vocab = || vec!["dog".to_string(), "cat".to_string(), "hot dog".to_string()];
        let mut pairs = vec![
            ("puppy".to_string(), "dog".to_string()),
            ("kitten".to_string(), "cat".to_string()),
            ("frank".to_string(), "hot dog".to_string()),
        ];
        let a = ObjectLexicon::from_pairs(vocab(), pairs.clone()).unwrap();
        pairs.reverse();
        let b = ObjectLexicon::from_pairs(vocab().into_iter().rev(), pairs).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sentences() {
        assert_eq!(split_sentences("A dog. A cat! Why? "), vec!["A dog", "A cat", "Why"]);
        assert!(split_sentences("...").is_empty());
    }

    #[test]
    fn chair_example() {
        let lex = ObjectLexicon::coco();
        let img = ChairImage {
            id: "1".into(),
            caption: "A dog catches a frisbee. A car is parked nearby.".into(),
            gt: gt(&["dog", "frisbee"]),
        };
        let s = chair_scores(&[img], &lex);
        assert_eq!((s.c_s, s.c_i), (0.5, 1.0 / 3.0));
        assert_eq!(s.per_image[0].hallucinated, vec!["car".to_string()]);
    }

    #[test]
    fn degenerate_cases() {
        let lex = ObjectLexicon::coco();
        let img = ChairImage {
            id: "1".into(),
            caption: "Nothing to see here.".into(),
            gt: gt(&["dog"]),
        };
        let s = chair_scores(&[img], &lex);
        assert_eq!((s.c_s, s.c_i, s.no_mentions, s.no_sentences), (0.0, 0.0, true, false));
        let s = chair_scores(&[], &lex);
        assert!(s.no_sentences && s.no_mentions);
    }

    #[test]
    fn dedup_per_image() {
        let lex = ObjectLexicon::coco();
        let img = ChairImage {
            id: "1".into(),
            caption: "A car. Another car. A dog.".into(),
            gt: gt(&["dog"]),
        };
        let s = chair_scores(&[img], &lex);
        assert_eq!((s.mentions, s.hallucinated_mentions), (2, 1));
        assert_eq!((s.sentences, s.hallucinated_sentences), (3, 2));
    }
}
