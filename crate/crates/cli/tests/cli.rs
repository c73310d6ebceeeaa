use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Command, Output, Stdio};

use ritual_core::ImageBuffer;
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_ritual");

fn ritual(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .current_dir(dir)
        .args(args)
        .env_remove("RITUAL_PROVIDER")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn sample_image(dir: &Path, name: &str, w: u32, h: u32) {
    ImageBuffer::from_fn(w, h, |x, y| [(x * 5) as u8, (y * 3) as u8, ((x + y) % 256) as u8])
        .save_png(dir.join(name))
        .unwrap();
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn decode_is_reproducible_and_traced() {
    let dir = tempfile::tempdir().unwrap();
    sample_image(dir.path(), "cat.png", 40, 30);
    let args = ["decode", "cat.png", "Describe the image.", "--seed", "3", "--max-new-tokens", "10"];
    let a = ritual(dir.path(), &[&args[..], &["--trace", "a.json"]].concat());
    let b = ritual(dir.path(), &[&args[..], &["--trace", "b.json"]].concat());
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(stdout(&a).lines().next(), stdout(&b).lines().next());
    assert_eq!(
        std::fs::read(dir.path().join("a.json")).unwrap(),
        std::fs::read(dir.path().join("b.json")).unwrap()
    );
    let trace = read_json(&dir.path().join("a.json"));
    assert_eq!(trace["config"]["strategy"], "ritual");
    assert_eq!(trace["steps"][0]["streams"].as_array().unwrap().len(), 2);
    assert!(trace["transform"]["kind"].is_string());

    let base = ritual(dir.path(), &[&args[..], &["--strategy", "base", "--trace", "c.json"]].concat());
    assert!(base.status.success());
    let trace = read_json(&dir.path().join("c.json"));
    assert_eq!(trace["steps"][0]["streams"].as_array().unwrap().len(), 1);
    assert_eq!(trace["transform"], Value::Null);
}

#[test]
fn exec_provider_matches_in_process_mock() {
    let dir = tempfile::tempdir().unwrap();
    sample_image(dir.path(), "x.png", 24, 24);
    let exec = format!("exec:{BIN} mock-serve --stdio");
    let args = ["decode", "x.png", "What is this?", "--seed", "9", "--strategy", "ritual_vcd", "--max-new-tokens", "8"];
    let local = ritual(dir.path(), &[&args[..], &["--trace", "l.json"]].concat());
    let remote = ritual(dir.path(), &[&args[..], &["--provider", &exec, "--trace", "r.json"]].concat());
    assert!(remote.status.success(), "{}", String::from_utf8_lossy(&remote.stderr));
    assert_eq!(stdout(&local).lines().next(), stdout(&remote).lines().next());
    assert_eq!(
        std::fs::read(dir.path().join("l.json")).unwrap(),
        std::fs::read(dir.path().join("r.json")).unwrap()
    );
}

#[test]
fn usage_and_input_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    sample_image(dir.path(), "x.png", 8, 8);
    let o = ritual(dir.path(), &["decode", "x.png", "hi", "--strategy", "nonsense"]);
    assert_eq!(o.status.code(), Some(2));
    let o = ritual(dir.path(), &["eval", "pope", "missing.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.jsonl"));
    let o = ritual(dir.path(), &["decode", "nope.png", "hi"]);
    assert_eq!(o.status.code(), Some(2));
    let o = ritual(dir.path(), &["decode", "x.png", "hi", "--beta", "3"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn transform_command() {
    let dir = tempfile::tempdir().unwrap();
    sample_image(dir.path(), "in.png", 50, 20);
    assert!(ritual(dir.path(), &["transform", "in.png", "--kind", "hflip", "--out", "f1.png"]).status.success());
    assert!(ritual(dir.path(), &["transform", "f1.png", "--kind", "hflip", "--out", "f2.png"]).status.success());
    let original = ImageBuffer::open(dir.path().join("in.png")).unwrap();
    assert_eq!(ImageBuffer::open(dir.path().join("f2.png")).unwrap(), original);

    let o = ritual(dir.path(), &["transform", "in.png", "--kind", "crop", "--seed", "4", "--out", "c.png"]);
    assert!(o.status.success());
    let crop = ImageBuffer::open(dir.path().join("c.png")).unwrap();
    assert_eq!((crop.width(), crop.height()), (336, 336));

    let r1 = ritual(dir.path(), &["transform", "in.png", "--kind", "rotate", "--seed", "8", "--out", "r1.png"]);
    let r2 = ritual(dir.path(), &["transform", "in.png", "--kind", "rotate", "--seed", "8", "--out", "r2.png"]);
    assert_eq!(stdout(&r1).lines().next(), stdout(&r2).lines().next());
    assert_eq!(
        std::fs::read(dir.path().join("r1.png")).unwrap(),
        std::fs::read(dir.path().join("r2.png")).unwrap()
    );
}

#[test]
fn mock_serve_over_tcp() {
    let mut child = Command::new(BIN)
        .args(["mock-serve", "--port", "0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().rsplit(' ').next().unwrap().to_string();
    let stream = std::net::TcpStream::connect(&addr).unwrap();
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut writer = stream;
    let mut ask = |req: &str| -> Value {
        writeln!(writer, "{req}").unwrap();
        let mut resp = String::new();
        reader.read_line(&mut resp).unwrap();
        serde_json::from_str(&resp).unwrap()
    };
    assert_eq!(ask("this is not json")["ok"], false);
    let hello = ask(r#"{"op":"hello","version":1}"#);
    assert_eq!(hello["vocab_size"], 32);
    let dist = ask(r#"{"op":"dist","id":1,"prompt":"hi","generated":[]}"#);
    assert_eq!(dist["log_probs"].as_array().unwrap().len(), 32);
    child.kill().unwrap();
    let _ = child.wait();
}

#[test]
fn chair_eval_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    sample_image(d, "1.png", 30, 30);
    sample_image(d, "2.png", 20, 40);
    std::fs::write(
        d.join("instances.json"),
        r#"{"images": [{"id": 1, "file_name": "1.png"}, {"id": 2, "file_name": "2.png"}],
            "annotations": [{"image_id": 1, "category_id": 18}, {"image_id": 2, "category_id": 3}],
            "categories": [{"id": 18, "name": "dog"}, {"id": 3, "name": "car"}]}"#,
    )
    .unwrap();
    std::fs::write(
        d.join("captions.json"),
        r#"{"annotations": [{"image_id": 1, "caption": "A dog on a couch."}, {"image_id": 2, "caption": "A red car."}]}"#,
    )
    .unwrap();
    let o = ritual(
        d,
        &["eval", "chair", "captions.json", "instances.json", "--max-new-tokens", "64", "--out", "chair.json", "--csv", "rows.csv"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("C_s") && out.contains("C_i"), "{out}");
    let report = read_json(&d.join("chair.json"));
    assert_eq!(report["records_total"], 2);
    assert_eq!(report["config"]["run"]["decoding"]["max_new_tokens"], 64);
    assert!(d.join("chair.timing.json").is_file());
    assert_eq!(std::fs::read_to_string(d.join("rows.csv")).unwrap().lines().count(), 3);

    std::fs::write(
        d.join("generated.json"),
        r#"[{"image_id": 1, "caption": "A dog and a cat."}, {"image_id": 2, "caption": "A car."}]"#,
    )
    .unwrap();
    let o = ritual(d, &["eval", "chair", "captions.json", "instances.json", "--generated", "generated.json", "--out", "g.json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&d.join("g.json"));
    assert_eq!(report["summary"]["c_s"], 0.5);

    let o = ritual(d, &["report", "g.json"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("C_s 50.00"), "{}", stdout(&o));
}

#[test]
fn mme_eval_from_directory() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for cat in ["existence", "code_reasoning"] {
        let c = d.join(cat);
        std::fs::create_dir_all(&c).unwrap();
        for k in 0..2 {
            sample_image(&c, &format!("im{k}.png"), 16, 16);
            std::fs::write(
                c.join(format!("im{k}.txt")),
                "Is there a dog in the image? Please answer yes or no.\tYes\nIs there a cat in the image? Please answer yes or no.\tNo\n",
            )
            .unwrap();
        }
    }
    let o = ritual(d, &["eval", "mme", ".", "--out", "mme.json", "--max-new-tokens", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&d.join("mme.json"));
    assert_eq!(report["records_total"], 8);
    assert_eq!(report["summary"]["categories"].as_array().unwrap().len(), 2);
}
