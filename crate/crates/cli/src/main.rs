mod config;
mod output;

use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use ritual_core::decoding::{run_session, CAPTION_MAX_NEW_TOKENS, YES_NO_MAX_NEW_TOKENS};
use ritual_core::eval::{self, BenchOptions, BenchReport, ObjectLexicon, RecordRow, Timing};
use ritual_core::provider::{serve_stream, serve_tcp, MockBackend, MockConfig};
use ritual_core::transforms::{sample_params, sample_transform, TransformKind};
use ritual_core::{apply_transform, ImageBuffer, ImageInput, ProviderHandle, Rng};
use serde::Serialize;
use serde_json::{json, Value};

use config::{RunConfig, RunFlags};
use output::{atomic_write, render_summary};

#[derive(Parser)]
#[command(name = "ritual", version, about = "Transformation-augmented decoding for vision-language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode one response for an image and prompt
    Decode(DecodeCmd),
    /// Run a benchmark and write a report
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Apply one transformation to an image
    Transform(TransformCmd),
    /// Serve the mock provider over TCP or stdio
    MockServe(MockServeCmd),
    /// Print the summary table of an existing report
    Report {
        report: PathBuf,
    },
}

#[derive(Args)]
struct DecodeCmd {
    image: PathBuf,
    prompt: String,
    /// Trace output (default: <output-dir>/trace.json)
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    run: RunFlags,
}

#[derive(Args)]
struct EvalOut {
    /// Report path (default: <output-dir>/<benchmark>_report.json)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write per-record rows as CSV
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Yes/no object probing from a JSON-lines file
    Pope {
        dataset: PathBuf,
        #[arg(long)]
        image_root: Option<PathBuf>,
        #[command(flatten)]
        out: EvalOut,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Caption hallucination rates against COCO annotations
    Chair {
        /// Reference captions (COCO captions file or a list of {image_id, caption})
        captions: PathBuf,
        /// COCO instance annotations
        annotations: PathBuf,
        #[arg(long)]
        image_root: Option<PathBuf>,
        /// Caption a seeded random sample of this many images
        #[arg(long)]
        limit: Option<usize>,
        /// Object lexicon replacing the bundled COCO one
        #[arg(long)]
        synonyms: Option<PathBuf>,
        /// Score these pre-generated captions instead of decoding
        #[arg(long)]
        generated: Option<PathBuf>,
        #[command(flatten)]
        out: EvalOut,
        #[command(flatten)]
        run: RunFlags,
    },
    /// The fourteen-category yes/no benchmark, from its directory layout
    Mme {
        root: PathBuf,
        #[command(flatten)]
        out: EvalOut,
        #[command(flatten)]
        run: RunFlags,
    },
}

#[derive(Args)]
struct TransformCmd {
    image: PathBuf,
    /// hflip, vflip, rotate, jitter, blur, crop or random
    #[arg(long, default_value = "random")]
    kind: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output PNG (default: <stem>_<kind>.png next to the input)
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[group(id = "listen", required = true, multiple = false, args = ["port", "stdio"])]
struct MockServeCmd {
    /// TCP port (0 picks a free one); the bound address is printed
    #[arg(long)]
    port: Option<u16>,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Serve a single session on stdin/stdout
    #[arg(long)]
    stdio: bool,
    /// Mock options: vocab=N,eos=N,max_context=N,ignore_image
    #[arg(long, default_value = "")]
    mock: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Decode(cmd) => cmd_decode(cmd),
        Command::Eval(cmd) => cmd_eval(cmd),
        Command::Transform(cmd) => cmd_transform(cmd),
        Command::MockServe(cmd) => cmd_mock_serve(cmd),
        Command::Report { report } => {
            let text = std::fs::read_to_string(&report).with_context(|| format!("reading {}", report.display()))?;
            let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", report.display()))?;
            print!("{}", render_summary(&v)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn cmd_decode(cmd: DecodeCmd) -> anyhow::Result<ExitCode> {
    let rc = cmd.run.resolve(CAPTION_MAX_NEW_TOKENS)?;
    let image = ImageBuffer::open(&cmd.image)?;
    let mut provider = ProviderHandle::handshake(&rc.endpoint)?;
    let mut rng = Rng::new(rc.decoding.seed);
    let trace_path = cmd.trace.unwrap_or_else(|| rc.output_dir.join("trace.json"));
    match run_session(ImageInput::new(image), &cmd.prompt, &mut provider, &rc.decoding, &mut rng) {
        Ok(out) => {
            atomic_write(&trace_path, out.trace.to_json().as_bytes())?;
            println!("{}", out.text);
            println!("trace: {}", trace_path.display());
            Ok(ExitCode::SUCCESS)
        }
        Err(f) => {
            atomic_write(&trace_path, f.trace.to_json().as_bytes())?;
            eprintln!("decode failed: {}", f.error);
            eprintln!("partial trace: {}", trace_path.display());
            Ok(ExitCode::from(1))
        }
    }
}

fn echo(benchmark: &str, rc: &RunConfig, inputs: Value) -> Value {
    json!({ "benchmark": benchmark, "run": rc, "inputs": inputs })
}

fn options(rc: &RunConfig, config_echo: Value) -> BenchOptions {
    let mut opts = BenchOptions::new(rc.endpoint.clone(), rc.decoding.clone());
    opts.workers = rc.workers;
    opts.config_echo = config_echo;
    opts
}

fn path_str(p: &Option<PathBuf>) -> Value {
    p.as_ref().map_or(Value::Null, |p| Value::String(p.display().to_string()))
}

fn finish<S: Serialize>(
    name: &str,
    report: &BenchReport<S>,
    timing: Option<&Timing>,
    out: &EvalOut,
    rc: &RunConfig,
) -> anyhow::Result<ExitCode> {
    let path = out
        .out
        .clone()
        .unwrap_or_else(|| rc.output_dir.join(format!("{name}_report.json")));
    let text = report.to_json();
    atomic_write(&path, text.as_bytes())?;
    if let Some(t) = timing {
        let tpath = path.with_extension("timing.json");
        atomic_write(&tpath, serde_json::to_string_pretty(t)?.as_bytes())?;
    }
    if let Some(csv_path) = &out.csv {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &report.records {
            w.serialize(row)?;
        }
        if report.records.is_empty() {
            w.write_record(csv_header())?;
        }
        atomic_write(csv_path, &w.into_inner()?)?;
    }
    println!("report: {}", path.display());
    let v: Value = serde_json::from_str(&text)?;
    print!("{}", render_summary(&v)?);
    if report.exceeds_failure_threshold() {
        eprintln!(
            "error: {} of {} records failed (more than {:.0}%)",
            report.failures,
            report.records_total,
            100.0 * eval::FAILURE_THRESHOLD
        );
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn csv_header() -> Vec<String> {
    let row = RecordRow {
        index: 0,
        id: String::new(),
        group: String::new(),
        image: String::new(),
        prompt: String::new(),
        label: None,
        output: None,
        answer: None,
        correct: None,
        transform: None,
        objects: None,
        hallucinated: None,
        error: None,
    };
    match serde_json::to_value(row) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

fn cmd_eval(cmd: EvalCmd) -> anyhow::Result<ExitCode> {
    match cmd {
        EvalCmd::Pope {
            dataset,
            image_root,
            out,
            run,
        } => {
            let rc = run.resolve(YES_NO_MAX_NEW_TOKENS)?;
            let root = image_root.or_else(|| rc.file.image_root.clone());
            let records = eval::load_pope(&dataset, root.as_deref())?;
            let inputs = json!({ "dataset": dataset.display().to_string(), "image_root": path_str(&root) });
            let (report, timing) = eval::run_pope(&records, &options(&rc, echo("pope", &rc, inputs)))?;
            finish("pope", &report, Some(&timing), &out, &rc)
        }
        EvalCmd::Mme { root, out, run } => {
            let rc = run.resolve(YES_NO_MAX_NEW_TOKENS)?;
            let records = eval::load_mme(&root)?;
            let inputs = json!({ "root": root.display().to_string() });
            let (report, timing) = eval::run_mme(&records, &options(&rc, echo("mme", &rc, inputs)))?;
            finish("mme", &report, Some(&timing), &out, &rc)
        }
        EvalCmd::Chair {
            captions,
            annotations,
            image_root,
            limit,
            synonyms,
            generated,
            out,
            run,
        } => {
            let rc = run.resolve(CAPTION_MAX_NEW_TOKENS)?;
            let synonyms = synonyms.or_else(|| rc.file.synonyms.clone());
            let lexicon = match &synonyms {
                Some(p) => {
                    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    ObjectLexicon::parse(&text)?
                }
                None => ObjectLexicon::coco(),
            };
            let root = image_root.or_else(|| rc.file.image_root.clone());
            let mut tasks = eval::load_chair(&annotations, Some(&captions), root.as_deref(), &lexicon)?;
            if let Some(n) = limit {
                let mut rng = Rng::new(rc.decoding.seed);
                rng.shuffle(&mut tasks);
                tasks.truncate(n);
                tasks.sort_by_key(|t| t.id);
            }
            let inputs = json!({
                "captions": captions.display().to_string(),
                "annotations": annotations.display().to_string(),
                "image_root": path_str(&root),
                "limit": limit,
                "synonyms": path_str(&synonyms),
                "generated": path_str(&generated),
            });
            let config = echo("chair", &rc, inputs);
            match generated {
                Some(g) => {
                    let caps = eval::load_generated_captions(&g)?;
                    let report = eval::score_chair(&tasks, &caps, &lexicon, config);
                    finish("chair", &report, None, &out, &rc)
                }
                None => {
                    let missing: Vec<_> = tasks.iter().filter(|t| !t.image.is_file()).collect();
                    if let Some(first) = missing.first() {
                        bail!("{} image(s) not found, first: {}", missing.len(), first.image.display());
                    }
                    let (report, timing) = eval::run_chair(&tasks, &lexicon, &options(&rc, config))?;
                    finish("chair", &report, Some(&timing), &out, &rc)
                }
            }
        }
    }
}

fn cmd_transform(cmd: TransformCmd) -> anyhow::Result<ExitCode> {
    let image = ImageBuffer::open(&cmd.image)?;
    let mut rng = Rng::new(cmd.seed);
    let (w, h) = (image.width(), image.height());
    let params = if cmd.kind.eq_ignore_ascii_case("random") {
        sample_transform(&mut rng, w, h)
    } else {
        let kind: TransformKind = cmd.kind.parse()?;
        sample_params(kind, &mut rng, w, h)
    };
    let out = apply_transform(&image, &params)?;
    let path = cmd.out.unwrap_or_else(|| default_transform_path(&cmd.image, params.kind()));
    atomic_write(&path, &out.to_png()?)?;
    println!("{}", serde_json::to_string(&params)?);
    println!("wrote {} ({}x{})", path.display(), out.width(), out.height());
    Ok(ExitCode::SUCCESS)
}

fn default_transform_path(input: &Path, kind: TransformKind) -> PathBuf {
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    input.with_file_name(format!("{stem}_{kind}.png"))
}

fn cmd_mock_serve(cmd: MockServeCmd) -> anyhow::Result<ExitCode> {
    let config: MockConfig = cmd.mock.parse().map_err(anyhow::Error::msg)?;
    let backend = Arc::new(MockBackend::new(config));
    if cmd.stdio {
        serve_stream(backend, std::io::stdin().lock(), std::io::stdout().lock())?;
        return Ok(ExitCode::SUCCESS);
    }
    let port = cmd.port.expect("clap enforces port or stdio");
    let listener =
        TcpListener::bind((cmd.host.as_str(), port)).with_context(|| format!("binding {}:{port}", cmd.host))?;
    let addr = listener.local_addr()?;
    let mut stdout = std::io::stdout();
    writeln!(stdout, "listening on {addr}")?;
    stdout.flush()?;
    serve_tcp(backend, listener)?;
    Ok(ExitCode::SUCCESS)
}
