//! Remote generator against a local HTTP stub.

mod common;

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use ata_core::generation::{
    GenerationAgent, GenerationContext, GenerationError, GenerationRequest, InterfaceManifest, RemoteConfig,
    RemoteGenerator, RepairRequest, TestTemplate,
};
use ata_core::model::AgentRole;
use common::{case, t0, CALC_MANIFEST};
use serde_json::{json, Value};

struct Stub {
    url: String,
    requests: Arc<Mutex<Vec<(String, Value)>>>,
}

/// Serves one scripted `(status, body)` per connection, in order.
fn stub(responses: Vec<(u16, Value)>) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let requests = Arc::new(Mutex::new(Vec::new()));
    let seen = requests.clone();
    thread::spawn(move || {
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut auth = String::new();
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let l = line.trim_end();
                if l.is_empty() {
                    break;
                }
                let lower = l.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = l["authorization:".len()..].trim().to_string();
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            seen.lock().unwrap().push((auth, serde_json::from_slice(&buf).unwrap_or(Value::Null)));
            let text = body.to_string();
            let mut s = stream;
            write!(
                s,
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{text}",
                text.len()
            )
            .unwrap();
        }
    });
    Stub { url, requests }
}

fn chat(content: &str) -> Value {
    json!({"choices": [{"message": {"role": "assistant", "content": content}}]})
}

fn generator(url: &str) -> RemoteGenerator {
    let mut cfg = RemoteConfig::new(url);
    cfg.timeout_s = 5.0;
    cfg.max_retries = 1;
    RemoteGenerator::with_key(
        cfg,
        "sk-test".into(),
        InterfaceManifest::from_yaml(CALC_MANIFEST).unwrap(),
        TestTemplate::pytest(),
        None,
    )
    .unwrap()
}

fn request<'a>(ctx: &'a GenerationContext, ids: &'a HashSet<ata_core::model::TestId>, refs: &'a HashSet<String>, budget: usize) -> GenerationRequest<'a> {
    GenerationRequest {
        project_ref: "calc",
        iteration: 1,
        context: ctx,
        budget,
        seed: 11,
        now: t0(),
        exclude_ids: ids,
        exclude_refs: refs,
        targets_only: false,
    }
}

#[test]
fn candidates_are_validated_deduplicated_and_truncated() {
    let content = json!([
        {"target_unit": "calc/ops.py", "source": "from calc.ops import add\n\ndef test_a():\n    assert add(1, 1) == 2\n"},
        {"target_unit": "calc/ops.py", "source": "from calc.ops import add\n\ndef test_a():\n    assert add(1, 1) == 2\n"},
        {"target_unit": "calc/ops.py", "source": "from calc.ops import neg\n\ndef test_b():\n    assert neg(1) == -1\n"},
        {"target_unit": "calc/ops.py", "source": "from calc.ops import neg\n\ndef test_c():\n    assert neg(2) == -2\n"},
        {"target_unit": "calc/ops.py", "source": "def test_nothing():\n    pass\n"},
        {"target_unit": "nowhere.py", "source": "assert True\n"}
    ])
    .to_string();
    let s = stub(vec![(200, chat(&content))]);
    let g = generator(&s.url);
    let (ctx, ids, refs) = (GenerationContext::default(), HashSet::new(), HashSet::new());
    let out = g.generate_tests(&request(&ctx, &ids, &refs, 2)).unwrap();
    assert_eq!(out.tests.len(), 2);
    assert_eq!(out.duplicates.len(), 1);
    assert_eq!(out.quarantined.len(), 2);
    assert!(out.tests.iter().all(|t| t.metadata.origin_agent == AgentRole::Generation && !t.metadata.rationale.is_empty()));

    let reqs = s.requests.lock().unwrap();
    assert_eq!(reqs[0].0, "Bearer sk-test");
    assert_eq!(reqs[0].1["seed"], 11);
    assert_eq!(reqs[0].1["temperature"], 0);
}

#[test]
fn transport_failures_are_retried_then_reported() {
    let s = stub(vec![(500, json!({})), (503, json!({}))]);
    let g = generator(&s.url);
    let (ctx, ids, refs) = (GenerationContext::default(), HashSet::new(), HashSet::new());
    let err = g.generate_tests(&request(&ctx, &ids, &refs, 4)).unwrap_err();
    assert!(matches!(err, GenerationError::Backend { attempts: 2, .. }), "{err}");
}

#[test]
fn a_retry_can_succeed() {
    let content = "```python\nfrom calc.ops import add\n\ndef test_a():\n    assert add(2, 3) == 5\n```";
    let s = stub(vec![(500, json!({})), (200, chat(content))]);
    let g = generator(&s.url);
    let (ctx, ids, refs) = (GenerationContext::default(), HashSet::new(), HashSet::new());
    let out = g.generate_tests(&request(&ctx, &ids, &refs, 4)).unwrap();
    assert_eq!(out.tests.len(), 1);
    assert_eq!(out.tests[0].target_unit, "calc/ops.py");
}

#[test]
fn empty_reply_yields_no_tests() {
    let s = stub(vec![(200, chat(""))]);
    let g = generator(&s.url);
    let (ctx, ids, refs) = (GenerationContext::default(), HashSet::new(), HashSet::new());
    let out = g.generate_tests(&request(&ctx, &ids, &refs, 4)).unwrap();
    assert!(out.tests.is_empty());
}

#[test]
fn cancelled_generator_makes_no_call() {
    let g = generator("http://127.0.0.1:9/unused");
    g.cancel_handle().store(true, std::sync::atomic::Ordering::SeqCst);
    let (ctx, ids, refs) = (GenerationContext::default(), HashSet::new(), HashSet::new());
    assert!(matches!(g.generate_tests(&request(&ctx, &ids, &refs, 4)), Err(GenerationError::Cancelled)));
}

#[test]
fn patch_sets_lineage_and_sends_the_failure() {
    let content = json!([{"target_unit": "calc/ops.py", "source": "from calc.ops import add\n\ndef test_a():\n    assert add(2, 2) == 4\n"}]).to_string();
    let s = stub(vec![(200, chat(&content))]);
    let g = generator(&s.url);
    let old = case("calc/ops.py", "from calc.ops import add\n\ndef test_a():\n    assert add(2, 2) == 5\n");
    let fixed = g
        .patch(&RepairRequest {
            test: &old,
            rationale: "assertion mismatch",
            context_refs: &[],
            context_snippets: &[],
            failure: None,
            iteration: 2,
            now: t0(),
            seed: 3,
        })
        .unwrap();
    assert_eq!(fixed.metadata.lineage.as_ref(), Some(&old.id));
    assert_ne!(fixed.id, old.id);
    let reqs = s.requests.lock().unwrap();
    let prompt = reqs[0].1["messages"][1]["content"].as_str().unwrap();
    assert!(prompt.contains("assert add(2, 2) == 5"));
}
