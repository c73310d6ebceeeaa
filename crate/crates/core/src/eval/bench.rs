use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::Serialize;
use serde_json::Value;

use super::chair::{aggregate, score_image, ChairImage, ChairImageScore, ObjectLexicon};
use super::datasets::{ChairTask, MmeRecord, PopeRecord};
use super::{
    is_perception, mme_score, parse_yes_no, pope_metrics, Answer, ConfusionMatrix, EvalError, MmePrediction,
    MmeScore, PopeMetrics,
};
use crate::decoding::{run_session, StrategyConfig};
use crate::image::ImageBuffer;
use crate::provider::{Capabilities, Endpoint, ImageInput, ProviderHandle};
use crate::rng::Rng;

/// Captioning query for CHAIR runs.
pub const CAPTION_PROMPT: &str = "Please describe this image in detail.";
/// Runs whose failed-record fraction exceeds this count as failed.
pub const FAILURE_THRESHOLD: f64 = 0.10;

const UNPARSEABLE_RULE: &str =
    "answers containing both or neither of yes/no are scored incorrect and as predicted no";

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub endpoint: Endpoint,
    pub cfg: StrategyConfig,
    pub workers: usize,
    /// Echoed verbatim into the report; defaults to `cfg` when `Null`.
    pub config_echo: Value,
}

impl BenchOptions {
    pub fn new(endpoint: Endpoint, cfg: StrategyConfig) -> Self {
        Self {
            endpoint,
            cfg,
            workers: 1,
            config_echo: Value::Null,
        }
    }
}

/// One dataset record's outcome; also the CSV row layout.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordRow {
    pub index: usize,
    pub id: String,
    /// POPE split, MME category or `"chair"`.
    pub group: String,
    pub image: String,
    pub prompt: String,
    pub label: Option<String>,
    pub output: Option<String>,
    pub answer: Option<Answer>,
    pub correct: Option<bool>,
    pub transform: Option<String>,
    pub objects: Option<String>,
    pub hallucinated: Option<String>,
    pub error: Option<String>,
}

impl RecordRow {
    fn new(index: usize, id: String, group: &str, image: &Path, prompt: &str) -> Self {
        Self {
            index,
            id,
            group: group.to_string(),
            image: image.display().to_string(),
            prompt: prompt.to_string(),
            label: None,
            output: None,
            answer: None,
            correct: None,
            transform: None,
            objects: None,
            hallucinated: None,
            error: None,
        }
    }
}

/// Wall-clock statistics; kept out of the report so reports stay
/// reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timing {
    pub workers: usize,
    pub records: usize,
    pub total_secs: f64,
    pub mean_record_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport<S> {
    pub benchmark: String,
    pub engine_version: String,
    pub config: Value,
    pub provider: Option<Capabilities>,
    pub records_total: usize,
    pub failures: usize,
    pub summary: S,
    pub records: Vec<RecordRow>,
}

impl<S: Serialize> BenchReport<S> {
    pub fn failure_rate(&self) -> f64 {
        if self.records_total == 0 {
            0.0
        } else {
            self.failures as f64 / self.records_total as f64
        }
    }

    pub fn exceeds_failure_threshold(&self) -> bool {
        self.failure_rate() > FAILURE_THRESHOLD
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSummary {
    pub records: usize,
    pub scored: usize,
    pub failures: usize,
    pub unparseable: usize,
    pub confusion: ConfusionMatrix,
    pub metrics: PopeMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PopeSummary {
    pub unparseable_rule: String,
    pub splits: BTreeMap<String, GroupSummary>,
    pub overall: GroupSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MmeSummary {
    pub unparseable_rule: String,
    pub categories: Vec<MmeScore>,
    /// Images dropped because a question of theirs failed.
    pub excluded_images: usize,
    pub unparseable: usize,
    pub perception: f64,
    pub cognition: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChairSummary {
    pub c_s: f64,
    pub c_i: f64,
    pub images: usize,
    pub sentences: usize,
    pub hallucinated_sentences: usize,
    pub mentions: usize,
    pub hallucinated_mentions: usize,
    pub no_sentences: bool,
    pub no_mentions: bool,
}

struct Decoded {
    output: Result<String, String>,
    transform: Option<String>,
}

fn decode_one(
    index: usize,
    image: &Path,
    prompt: &str,
    provider: &mut ProviderHandle,
    cfg: &StrategyConfig,
) -> Decoded {
    let mut rng = Rng::new(cfg.seed ^ index as u64);
    let img = match ImageBuffer::open(image) {
        Ok(img) => img,
        Err(e) => {
            return Decoded {
                output: Err(format!("{}: {e}", image.display())),
                transform: None,
            }
        }
    };
    match run_session(ImageInput::new(img), prompt, provider, cfg, &mut rng) {
        Ok(out) => Decoded {
            transform: out.trace.transform.as_ref().map(|t| t.kind().to_string()),
            output: Ok(out.text),
        },
        Err(f) => Decoded {
            transform: f.trace.transform.as_ref().map(|t| t.kind().to_string()),
            output: Err(f.error.to_string()),
        },
    }
}

/// Decodes every item on a bounded pool, one provider handle per worker.
/// Record `i` is seeded with `cfg.seed ^ i`, so results do not depend on
/// scheduling.
fn run_pool<T, F>(items: &[T], opts: &BenchOptions, f: F) -> Result<(Vec<Decoded>, Capabilities, Timing), EvalError>
where
    T: Sync,
    F: Fn(usize, &T, &mut ProviderHandle) -> Decoded + Sync,
{
    opts.cfg
        .validate()
        .map_err(|e| EvalError::Dataset(format!("invalid configuration: {e}")))?;
    let start = Instant::now();
    let workers = opts.workers.clamp(1, items.len().max(1));
    let mut handles = Vec::with_capacity(workers);
    for _ in 0..workers {
        handles.push(ProviderHandle::handshake(&opts.endpoint)?);
    }
    let caps = handles[0].capabilities().clone();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Decoded>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    let busy = Mutex::new(Duration::ZERO);
    std::thread::scope(|s| {
        for mut handle in handles {
            let (next, slots, busy, f) = (&next, &slots, &busy, &f);
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let t0 = Instant::now();
                let out = f(i, &items[i], &mut handle);
                *busy.lock().unwrap() += t0.elapsed();
                slots.lock().unwrap()[i] = Some(out);
            });
        }
    });
    let results: Vec<Decoded> = slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every record processed"))
        .collect();
    let n = results.len();
    let busy = busy.into_inner().unwrap();
    let timing = Timing {
        workers,
        records: n,
        total_secs: start.elapsed().as_secs_f64(),
        mean_record_secs: if n == 0 { 0.0 } else { busy.as_secs_f64() / n as f64 },
    };
    Ok((results, caps, timing))
}

fn echo(opts: &BenchOptions) -> Value {
    if opts.config_echo.is_null() {
        serde_json::to_value(&opts.cfg).expect("config serializes")
    } else {
        opts.config_echo.clone()
    }
}

fn yes_no(label: bool) -> String {
    if label { "yes" } else { "no" }.to_string()
}

fn group_summary(rows: &[&RecordRow], truth: impl Fn(&RecordRow) -> bool) -> GroupSummary {
    let mut cm = ConfusionMatrix::default();
    let mut failures = 0;
    let mut unparseable = 0;
    for r in rows {
        match r.answer {
            Some(a) => {
                cm.record(truth(r), a);
                if a == Answer::Unparseable {
                    unparseable += 1;
                }
            }
            None => failures += 1,
        }
    }
    GroupSummary {
        records: rows.len(),
        scored: cm.total() as usize,
        failures,
        unparseable,
        confusion: cm,
        metrics: pope_metrics(&cm),
    }
}

fn answer_row(row: &mut RecordRow, d: Decoded, label: bool) {
    row.label = Some(yes_no(label));
    row.transform = d.transform;
    match d.output {
        Ok(text) => {
            let a = parse_yes_no(&text);
            row.answer = Some(a);
            row.correct = Some(a.is_correct(label));
            row.output = Some(text);
        }
        Err(e) => row.error = Some(e),
    }
}

pub fn run_pope(records: &[PopeRecord], opts: &BenchOptions) -> Result<(BenchReport<PopeSummary>, Timing), EvalError> {
    let (decoded, caps, timing) = run_pool(records, opts, |i, r, h| decode_one(i, &r.image, &r.question, h, &opts.cfg))?;
    let rows: Vec<RecordRow> = records
        .iter()
        .zip(decoded)
        .enumerate()
        .map(|(i, (r, d))| {
            let mut row = RecordRow::new(i, r.id.clone(), &r.split, &r.image, &r.question);
            answer_row(&mut row, d, r.label);
            row
        })
        .collect();
    let truth = |r: &RecordRow| r.label.as_deref() == Some("yes");
    let mut by_split: BTreeMap<&str, Vec<&RecordRow>> = BTreeMap::new();
    for r in &rows {
        by_split.entry(r.group.as_str()).or_default().push(r);
    }
    let splits = by_split
        .iter()
        .map(|(k, v)| (k.to_string(), group_summary(v, truth)))
        .collect();
    let overall = group_summary(&rows.iter().collect::<Vec<_>>(), truth);
    let report = BenchReport {
        benchmark: "pope".into(),
        engine_version: env!("CARGO_PKG_VERSION").into(),
        config: echo(opts),
        provider: Some(caps),
        records_total: rows.len(),
        failures: overall.failures,
        summary: PopeSummary {
            unparseable_rule: UNPARSEABLE_RULE.into(),
            splits,
            overall,
        },
        records: rows,
    };
    Ok((report, timing))
}

pub fn run_mme(records: &[MmeRecord], opts: &BenchOptions) -> Result<(BenchReport<MmeSummary>, Timing), EvalError> {
    let (decoded, caps, timing) = run_pool(records, opts, |i, r, h| decode_one(i, &r.image, &r.question, h, &opts.cfg))?;
    let rows: Vec<RecordRow> = records
        .iter()
        .zip(decoded)
        .enumerate()
        .map(|(i, (r, d))| {
            let mut row = RecordRow::new(i, r.image_key.clone(), &r.category, &r.image, &r.question);
            answer_row(&mut row, d, r.label);
            row
        })
        .collect();
    // Group by category, then by image; images with a failed question are
    // dropped from scoring.
    let mut cats: BTreeMap<&str, BTreeMap<&str, Vec<&RecordRow>>> = BTreeMap::new();
    for r in &rows {
        cats.entry(r.group.as_str()).or_default().entry(r.id.as_str()).or_default().push(r);
    }
    let mut categories = Vec::new();
    let mut excluded_images = 0;
    for (cat, images) in &cats {
        let mut preds = Vec::new();
        for (image, qs) in images {
            if qs.iter().any(|q| q.answer.is_none()) {
                excluded_images += 1;
                continue;
            }
            preds.extend(qs.iter().map(|q| MmePrediction {
                image: image.to_string(),
                truth: q.label.as_deref() == Some("yes"),
                answer: q.answer.expect("checked above"),
            }));
        }
        if !preds.is_empty() {
            categories.push(mme_score(cat, &preds)?);
        }
    }
    let perception = categories.iter().filter(|c| is_perception(&c.category)).map(|c| c.score).sum();
    let cognition = categories.iter().filter(|c| !is_perception(&c.category)).map(|c| c.score).sum();
    let failures = rows.iter().filter(|r| r.error.is_some()).count();
    let unparseable = rows.iter().filter(|r| r.answer == Some(Answer::Unparseable)).count();
    let report = BenchReport {
        benchmark: "mme".into(),
        engine_version: env!("CARGO_PKG_VERSION").into(),
        config: echo(opts),
        provider: Some(caps),
        records_total: rows.len(),
        failures,
        summary: MmeSummary {
            unparseable_rule: UNPARSEABLE_RULE.into(),
            categories,
            excluded_images,
            unparseable,
            perception,
            cognition,
            total: perception + cognition,
        },
        records: rows,
    };
    Ok((report, timing))
}

fn chair_report(
    tasks: &[ChairTask],
    outputs: Vec<(Result<String, String>, Option<String>)>,
    lexicon: &ObjectLexicon,
    config: Value,
    provider: Option<Capabilities>,
) -> BenchReport<ChairSummary> {
    let mut rows = Vec::with_capacity(tasks.len());
    let mut scored: Vec<ChairImageScore> = Vec::new();
    for (i, (t, (output, transform))) in tasks.iter().zip(outputs).enumerate() {
        let mut row = RecordRow::new(i, t.id.to_string(), "chair", &t.image, CAPTION_PROMPT);
        row.label = Some(t.gt.iter().cloned().collect::<Vec<_>>().join("; "));
        row.transform = transform;
        match output {
            Ok(caption) => {
                let s = score_image(
                    &ChairImage {
                        id: t.id.to_string(),
                        caption: caption.clone(),
                        gt: t.gt.clone(),
                    },
                    lexicon,
                );
                row.objects = Some(s.mentioned.join("; "));
                row.hallucinated = Some(s.hallucinated.join("; "));
                row.correct = Some(s.hallucinated.is_empty());
                row.output = Some(caption);
                scored.push(s);
            }
            Err(e) => row.error = Some(e),
        }
        rows.push(row);
    }
    let images = scored.len();
    let s = aggregate(scored);
    let failures = rows.iter().filter(|r| r.error.is_some()).count();
    BenchReport {
        benchmark: "chair".into(),
        engine_version: env!("CARGO_PKG_VERSION").into(),
        config,
        provider,
        records_total: rows.len(),
        failures,
        summary: ChairSummary {
            c_s: s.c_s,
            c_i: s.c_i,
            images,
            sentences: s.sentences,
            hallucinated_sentences: s.hallucinated_sentences,
            mentions: s.mentions,
            hallucinated_mentions: s.hallucinated_mentions,
            no_sentences: s.no_sentences,
            no_mentions: s.no_mentions,
        },
        records: rows,
    }
}

/// Captions every task with [`CAPTION_PROMPT`] and scores the captions.
pub fn run_chair(
    tasks: &[ChairTask],
    lexicon: &ObjectLexicon,
    opts: &BenchOptions,
) -> Result<(BenchReport<ChairSummary>, Timing), EvalError> {
    let (decoded, caps, timing) = run_pool(tasks, opts, |i, t, h| decode_one(i, &t.image, CAPTION_PROMPT, h, &opts.cfg))?;
    let outputs = decoded.into_iter().map(|d| (d.output, d.transform)).collect();
    Ok((chair_report(tasks, outputs, lexicon, echo(opts), Some(caps)), timing))
}

/// Scores pre-generated captions; tasks without a caption count as failures.
pub fn score_chair(
    tasks: &[ChairTask],
    captions: &BTreeMap<u64, String>,
    lexicon: &ObjectLexicon,
    config: Value,
) -> BenchReport<ChairSummary> {
    let outputs = tasks
        .iter()
        .map(|t| {
            let out = captions
                .get(&t.id)
                .cloned()
                .ok_or_else(|| format!("no caption for image {}", t.id));
            (out, None)
        })
        .collect();
    chair_report(tasks, outputs, lexicon, config, None)
}

/// Ground-truth objects as a set, for callers building tasks by hand.
pub fn object_set<I: IntoIterator<Item = S>, S: Into<String>>(objs: I) -> BTreeSet<String> {
    objs.into_iter().map(Into::into).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::{MockConfig, ScriptRule, ScriptedBackend};
    use std::sync::Arc;

    fn pope_fixture(dir: &Path, n: usize) -> Vec<PopeRecord> {
        let img = ImageBuffer::from_fn(8, 8, |x, y| [x as u8 * 30, y as u8 * 30, 7]);
        let path = dir.join("im.png");
        img.save_png(&path).unwrap();
        (0..n)
            .map(|i| PopeRecord {
                id: i.to_string(),
                question: format!("Is there a {} in the image?", if i % 2 == 0 { "dog" } else { "cat" }),
                label: i % 2 == 0,
                image: path.clone(),
                split: if i < n / 2 { "random" } else { "popular" }.into(),
            })
            .collect()
    }

    fn opts(workers: usize) -> BenchOptions {
        let cfg = StrategyConfig {
            max_new_tokens: 4,
            seed: 11,
            ..Default::default()
        };
        let mut o = BenchOptions::new(Endpoint::Mock(MockConfig::default()), cfg);
        o.workers = workers;
        o
    }

    #[test]
    fn pope_conservation_and_worker_independence() {
        let dir = tempfile::tempdir().unwrap();
        let recs = pope_fixture(dir.path(), 12);
        let (a, _) = run_pope(&recs, &opts(1)).unwrap();
        let (b, t) = run_pope(&recs, &opts(4)).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(t.workers, 4);
        let o = &a.summary.overall;
        assert_eq!(o.confusion.total() as usize, a.records_total - a.failures);
        assert_eq!(a.summary.splits.len(), 2);
    }

    #[test]
    fn missing_image_is_a_record_failure() {
        let dir = tempfile::tempdir().unwrap();
        let mut recs = pope_fixture(dir.path(), 4);
        recs[1].image = dir.path().join("gone.png");
        let (r, _) = run_pope(&recs, &opts(2)).unwrap();
        assert_eq!(r.failures, 1);
        assert_eq!(r.summary.overall.confusion.total(), 3);
        assert!(r.records[1].error.is_some());
        assert!(r.exceeds_failure_threshold());
    }

    #[test]
    fn chair_scoring_only() {
        let tasks = vec![
            ChairTask {
                id: 1,
                image: "a.jpg".into(),
                gt: object_set(["dog", "frisbee"]),
            },
            ChairTask {
                id: 2,
                image: "b.jpg".into(),
                gt: object_set(["cat"]),
            },
        ];
        let caps = BTreeMap::from([(1, "A dog catches a frisbee. A car is parked nearby.".to_string())]);
        let r = score_chair(&tasks, &caps, &ObjectLexicon::coco(), Value::Null);
        assert_eq!((r.summary.c_s, r.summary.c_i), (0.5, 1.0 / 3.0));
        assert_eq!(r.failures, 1);
        assert_eq!(r.records[0].hallucinated.as_deref(), Some("car"));
    }

    #[test]
    fn scripted_truthful_mock_scores_perfectly() {
        // Direct check through an in-process scripted backend.
        let backend = Arc::new(ScriptedBackend::new(
            MockConfig::default(),
            vec![ScriptRule::new("dog", "yes"), ScriptRule::new("cat", "no")],
        ));
        let mut h = ProviderHandle::in_process(backend).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let recs = pope_fixture(dir.path(), 6);
        let cfg = StrategyConfig {
            max_new_tokens: 3,
            ..Default::default()
        };
        let mut cm = ConfusionMatrix::default();
        for (i, r) in recs.iter().enumerate() {
            let d = decode_one(i, &r.image, &r.question, &mut h, &cfg);
            cm.record(r.label, parse_yes_no(&d.output.unwrap()));
        }
        assert_eq!(pope_metrics(&cm).accuracy, Some(100.0));
    }
}
