//! Provider endpoints over real transports, checked against the in-process
//! mock.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;
use std::thread;

use ritual_core::provider::{handle_line, serve_stream, serve_tcp, Backend, ImageCache, MockBackend, MockConfig};
use ritual_core::{
    run_session, DistributionRequest, Endpoint, ImageBuffer, ImageInput, ProviderHandle, Rng, Strategy,
    StrategyConfig, TokenId,
};
use serde_json::Value;

fn mock_backend() -> Arc<dyn Backend> {
    Arc::new(MockBackend::new(MockConfig::default()))
}

fn start_tcp() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let backend = mock_backend();
    thread::spawn(move || serve_tcp(backend, listener));
    format!("tcp:{addr}")
}

fn image(salt: u8) -> ImageBuffer {
    ImageBuffer::from_fn(20, 14, |x, y| [x as u8 ^ salt, y as u8, salt.wrapping_mul(3)])
}

#[test]
fn tcp_matches_in_process() {
    let endpoint: Endpoint = start_tcp().parse().unwrap();
    let mut remote = ProviderHandle::handshake(&endpoint).unwrap();
    let mut local = ProviderHandle::in_process(mock_backend()).unwrap();
    assert_eq!(remote.capabilities(), local.capabilities());

    let img = ImageInput::new(image(1));
    for generated in [vec![], vec![TokenId(3)], vec![TokenId(3), TokenId(9)]] {
        for image in [Some(&img), None] {
            let req = DistributionRequest {
                image,
                prompt: "What colour is it?",
                generated: &generated,
            };
            let a = remote.next_distribution(&req).unwrap();
            let b = local.next_distribution(&req).unwrap();
            for (x, y) in a.log_weights().iter().zip(b.log_weights()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
    let ids = [TokenId(4), TokenId(5), TokenId(0)];
    assert_eq!(remote.detokenize(&ids).unwrap(), local.detokenize(&ids).unwrap());
    assert!(remote.detokenize(&[TokenId(500)]).is_err());
    // The connection survives a rejected request.
    assert!(remote.detokenize(&ids).is_ok());
}

#[test]
fn concurrent_sessions_do_not_interfere() {
    let endpoint: Endpoint = start_tcp().parse().unwrap();
    let run = |handle: &mut ProviderHandle, k: u8| {
        let mut cfg = StrategyConfig::for_strategy(Strategy::ALL[k as usize % Strategy::ALL.len()]);
        cfg.max_new_tokens = 12;
        cfg.noise_steps = 100;
        let out = run_session(image(k), "Describe the image.", handle, &cfg, &mut Rng::new(k as u64)).unwrap();
        out.trace.to_json()
    };
    let mut local = ProviderHandle::in_process(mock_backend()).unwrap();
    let sequential: Vec<String> = (0..8).map(|k| run(&mut local, k)).collect();
    let concurrent: Vec<String> = thread::scope(|s| {
        let handles: Vec<_> = (0..8u8)
            .map(|k| {
                let endpoint = endpoint.clone();
                s.spawn(move || run(&mut ProviderHandle::handshake(&endpoint).unwrap(), k))
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert_eq!(sequential, concurrent);
}

#[test]
fn malformed_line_keeps_connection() {
    let addr = start_tcp();
    let stream = TcpStream::connect(addr.strip_prefix("tcp:").unwrap()).unwrap();
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut writer = stream;
    let mut ask = |line: &str| -> Value {
        writer.write_all(line.as_bytes()).unwrap();
        writer.write_all(b"\n").unwrap();
        let mut resp = String::new();
        reader.read_line(&mut resp).unwrap();
        serde_json::from_str(&resp).unwrap()
    };
    assert_eq!(ask("{\"op\":\"nope\"}")["ok"], false);
    assert_eq!(ask("][")["ok"], false);
    let hello = ask("{\"op\":\"hello\",\"version\":1}");
    assert_eq!(hello["ok"], true);
    assert_eq!(hello["vocab_size"], 32);
}

#[test]
fn version_mismatch_is_refused() {
    let endpoint: Endpoint = start_tcp().parse().unwrap();
    let err = ProviderHandle::handshake_with_version(&endpoint, 7).unwrap_err();
    assert!(err.to_string().contains("version"), "{err}");
}

fn assert_same_response(got: &Value, want: &Value, line: usize) {
    for key in ["ok", "id", "vocab_size", "eos_id", "max_context", "name", "text"] {
        assert_eq!(got.get(key), want.get(key), "line {line}: {key}");
    }
    assert_eq!(got.get("error").is_some(), want.get("error").is_some(), "line {line}");
    match (got.get("log_probs"), want.get("log_probs")) {
        (Some(Value::Array(a)), Some(Value::Array(b))) => {
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(b) {
                let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
                assert!((x - y).abs() < 1e-12, "line {line}");
            }
        }
        (None, None) => {}
        _ => panic!("line {line}: log_probs presence differs"),
    }
}

#[test]
fn frozen_protocol_exchange() {
    let requests = include_str!("data/requests.jsonl");
    let responses: Vec<Value> = include_str!("data/responses.jsonl")
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let backend = mock_backend();
    let mut cache = ImageCache::default();
    let mut count = 0;
    for (i, (req, want)) in requests.lines().zip(&responses).enumerate() {
        let got: Value = serde_json::from_str(&handle_line(&backend, &mut cache, req)).unwrap();
        assert_same_response(&got, want, i + 1);
        count += 1;
    }
    assert_eq!(count, responses.len());

    // The same exchange through the stream server.
    let mut out = Vec::new();
    serve_stream(mock_backend(), requests.as_bytes(), &mut out).unwrap();
    let lines: Vec<Value> = String::from_utf8(out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), responses.len());
    for (i, (got, want)) in lines.iter().zip(&responses).enumerate() {
        assert_same_response(got, want, i + 1);
    }
}
