use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::Context;
use serde_json::Value;

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.with_context(|| format!("writing {}", path.display()))
}

fn pct(v: &Value) -> String {
    match v.as_f64() {
        Some(x) => format!("{x:.2}"),
        None => "n/a".into(),
    }
}

fn num(v: &Value) -> String {
    v.as_u64().map(|n| n.to_string()).unwrap_or_else(|| "-".into())
}

fn pope_row(out: &mut String, name: &str, g: &Value) {
    let m = &g["metrics"];
    let _ = writeln!(
        out,
        "{:<14}{:>7}{:>8}{:>9}{:>9}{:>9}{:>9}{:>9}",
        name,
        num(&g["records"]),
        num(&g["failures"]),
        num(&g["unparseable"]),
        pct(&m["accuracy"]),
        pct(&m["precision"]),
        pct(&m["recall"]),
        pct(&m["f1"]),
    );
}

/// Human-readable table of a report's summary.
pub fn render_summary(report: &Value) -> anyhow::Result<String> {
    let mut out = String::new();
    let s = &report["summary"];
    match report["benchmark"].as_str() {
        Some("pope") => {
            let _ = writeln!(
                out,
                "{:<14}{:>7}{:>8}{:>9}{:>9}{:>9}{:>9}{:>9}",
                "split", "n", "failed", "unparse", "acc", "prec", "rec", "f1"
            );
            if let Some(splits) = s["splits"].as_object() {
                for (name, g) in splits {
                    pope_row(&mut out, name, g);
                }
            }
            pope_row(&mut out, "overall", &s["overall"]);
        }
        Some("mme") => {
            let _ = writeln!(out, "{:<24}{:>9}{:>9}{:>9}", "category", "acc", "acc+", "score");
            for c in s["categories"].as_array().into_iter().flatten() {
                let _ = writeln!(
                    out,
                    "{:<24}{:>9}{:>9}{:>9}",
                    c["category"].as_str().unwrap_or("?"),
                    pct(&c["acc"]),
                    pct(&c["acc_plus"]),
                    pct(&c["score"]),
                );
            }
            let _ = writeln!(out, "perception {}  cognition {}  total {}", pct(&s["perception"]), pct(&s["cognition"]), pct(&s["total"]));
            let _ = writeln!(out, "unparseable {}  excluded images {}", num(&s["unparseable"]), num(&s["excluded_images"]));
        }
        Some("chair") => {
            let scaled = |v: &Value| v.as_f64().map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "n/a".into());
            let _ = writeln!(out, "C_s {}  C_i {}", scaled(&s["c_s"]), scaled(&s["c_i"]));
            let _ = writeln!(
                out,
                "images {}  sentences {}/{} hallucinated  mentions {}/{} hallucinated",
                num(&s["images"]),
                num(&s["hallucinated_sentences"]),
                num(&s["sentences"]),
                num(&s["hallucinated_mentions"]),
                num(&s["mentions"]),
            );
            if s["no_sentences"] == Value::Bool(true) || s["no_mentions"] == Value::Bool(true) {
                let _ = writeln!(out, "warning: empty denominator, affected score reported as 0");
            }
        }
        other => anyhow::bail!("not a benchmark report (benchmark = {other:?})"),
    }
    let _ = writeln!(
        out,
        "records {}  failures {}",
        num(&report["records_total"]),
        num(&report["failures"])
    );
    Ok(out)
}
