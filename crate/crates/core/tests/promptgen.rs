use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::thread;

use emorag_core::corpus::{build_fixture, FixtureSpec, GeneratedFixture};
use emorag_core::promptgen::{
    build_request, generate, generate_batch, load_prompts, mock_complete, persist_prompts, verify_prompts,
    LiveClient, LiveClientConfig, LlmClient, MockClient, PromptError, PromptRequest, PromptSource,
    PromptStoreEntry, INSTRUCTION_DEPRESSION, INSTRUCTION_PATTERNS,
};
use emorag_core::retrieval::{build_index, precompute_cache, Backend, HashingProvider, RetrievalCache, RetrievalHit};

fn fixture() -> (GeneratedFixture, RetrievalCache) {
    let fx = build_fixture(FixtureSpec {
        seed: 7,
        n_samples: 200,
        n_corpus: 200,
        audio_dim: 4,
        video_dim: 4,
    })
    .unwrap();
    let p = HashingProvider::default();
    let idx = build_index(&fx.corpus, &p, Backend::Flat).unwrap();
    let cache = precompute_cache(&fx.samples, &idx, &p, 5).unwrap();
    (fx, cache)
}

fn first_request(fx: &GeneratedFixture, cache: &RetrievalCache) -> PromptRequest {
    let s = &fx.samples[0];
    build_request(&s.text, cache.hits(&s.id).unwrap(), &fx.corpus).unwrap()
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/request_seed7.txt")
}

#[test]
fn rendered_request_matches_golden_file() {
    let (fx, cache) = fixture();
    let req = first_request(&fx, &cache);
    assert_eq!(req.retrieved.len(), 5);
    assert!(req.instruction_block.contains(INSTRUCTION_DEPRESSION));
    assert!(req.instruction_block.contains(INSTRUCTION_PATTERNS));
    let rendered = req.render();
    if std::env::var_os("EMORAG_UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(golden_path().parent().unwrap()).unwrap();
        std::fs::write(golden_path(), &rendered).unwrap();
    }
    assert_eq!(rendered, std::fs::read_to_string(golden_path()).unwrap());
}

#[test]
fn request_lists_hits_in_rank_order_with_two_decimals() {
    let (fx, cache) = fixture();
    let s = &fx.samples[3];
    let mut hits = cache.hits(&s.id).unwrap().to_vec();
    hits.reverse();
    let req = build_request(&s.text, &hits, &fx.corpus).unwrap();
    let rendered = req.render();
    let mut last = 0;
    for (i, h) in cache.hits(&s.id).unwrap().iter().enumerate() {
        assert_eq!(req.retrieved[i].record_id, h.record_id);
        let rec = fx.corpus.iter().find(|r| r.id == h.record_id).unwrap();
        let line = format!("[{}] (sentiment {:.2}) {}", i + 1, rec.sentiment, rec.text);
        let at = rendered.find(&line).unwrap_or_else(|| panic!("missing `{line}`"));
        assert!(at >= last);
        last = at;
    }
}

#[test]
fn request_hash_is_deterministic_and_survives_reserialization() {
    let (fx, cache) = fixture();
    let a = first_request(&fx, &cache);
    let b = first_request(&fx, &cache);
    assert_eq!(a, b);
    assert_eq!(a.render(), b.render());
    let back: PromptRequest = serde_json::from_str(&serde_json::to_string(&a).unwrap()).unwrap();
    assert_eq!(back.compute_hash(), a.request_hash);
    assert_eq!(a.request_hash.len(), 64);
}

#[test]
fn request_errors() {
    let (fx, _) = fixture();
    assert!(matches!(
        build_request("some text", &[], &fx.corpus),
        Err(PromptError::Precondition(_))
    ));
    let ghost = RetrievalHit {
        record_id: "nope".into(),
        similarity: 0.5,
        rank: 1,
    };
    assert!(matches!(
        build_request("some text", &[ghost], &fx.corpus),
        Err(PromptError::Provenance(_))
    ));
}

#[test]
fn mock_is_deterministic_and_carries_mean_sentiment() {
    let (fx, cache) = fixture();
    for s in fx.samples.iter().take(20) {
        let req = build_request(&s.text, cache.hits(&s.id).unwrap(), &fx.corpus).unwrap();
        let out = mock_complete(&req);
        assert_eq!(out, mock_complete(&req));
        let ids: Vec<&str> = cache.hits(&s.id).unwrap().iter().map(|h| h.record_id.as_str()).collect();
        let sum: f64 = ids
            .iter()
            .map(|id| fx.corpus.iter().find(|r| r.id == *id).unwrap().sentiment)
            .sum();
        let mean = format!("{:.2}", sum / ids.len() as f64);
        let mean = if mean == "-0.00" { "0.00".to_string() } else { mean };
        assert!(out.contains(&format!("average a sentiment of {mean},")), "{out}");
        for tag in ["Q1:", "A1:", "Q2:", "A2:"] {
            assert!(out.contains(tag));
        }
    }
}

#[test]
fn mock_distinguishes_a_single_changed_score() {
    let (fx, cache) = fixture();
    let req = first_request(&fx, &cache);
    let mut other = req.clone();
    other.retrieved[2].sentiment += 0.37;
    other.request_hash = other.compute_hash();
    assert_ne!(other.request_hash, req.request_hash);
    assert_ne!(mock_complete(&req), mock_complete(&other));
}

#[test]
fn mock_batch_preserves_order_and_hashes() {
    let (fx, cache) = fixture();
    let reqs: Vec<PromptRequest> = fx
        .samples
        .iter()
        .map(|s| build_request(&s.text, cache.hits(&s.id).unwrap(), &fx.corpus).unwrap())
        .collect();
    let prompts = generate_batch(&reqs, &MockClient).unwrap();
    assert_eq!(prompts.len(), reqs.len());
    for (p, r) in prompts.iter().zip(&reqs) {
        assert_eq!(p.request_hash, r.compute_hash());
        assert_eq!(p.retrieved_ids, r.retrieved_ids());
        assert_eq!(p.text, mock_complete(r));
        assert_eq!(p.source, PromptSource::Mock);
    }
}

struct Blank;

impl LlmClient for Blank {
    fn source(&self) -> PromptSource {
        PromptSource::Live("blank".into())
    }
    fn complete(&self, _: &PromptRequest) -> Result<String, PromptError> {
        Ok("  \n".into())
    }
}

#[test]
fn blank_completion_is_a_protocol_error() {
    let (fx, cache) = fixture();
    let req = first_request(&fx, &cache);
    assert!(matches!(generate(&req, &Blank), Err(PromptError::Protocol(_))));
}

/// Minimal HTTP/1.1 server answering each connection with the next canned
/// (status, body) and recording the raw requests.
fn stub_server(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    let handle = thread::spawn(move || {
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                head.push_str(&line);
                if line == "\r\n" || line.is_empty() {
                    break;
                }
            }
            let mut payload = vec![0; len];
            reader.read_exact(&mut payload).unwrap();
            log.lock().unwrap().push(head + &String::from_utf8(payload).unwrap());
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, seen, handle)
}

fn live(url: String) -> LiveClient {
    LiveClient::with_token(
        LiveClientConfig {
            base_url: url,
            model: "test-model".into(),
            max_in_flight: 1,
            timeout_secs: 10,
            attempts: 3,
            backoff_ms: 5,
        },
        Some("secret".into()),
    )
    .unwrap()
}

fn completion(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

#[test]
fn live_client_speaks_chat_completions() {
    let (fx, cache) = fixture();
    let req = first_request(&fx, &cache);
    let (url, seen, handle) = stub_server(vec![(200, completion("Q1: a A1: b Q2: c A2: d"))]);
    let prompt = generate(&req, &live(url)).unwrap();
    handle.join().unwrap();
    assert_eq!(prompt.text, "Q1: a A1: b Q2: c A2: d");
    assert_eq!(prompt.source, PromptSource::Live("test-model".into()));
    let raw = seen.lock().unwrap()[0].clone();
    assert!(raw.starts_with("POST /v1/chat/completions "));
    assert!(raw.to_ascii_lowercase().contains("authorization: bearer secret"));
    let body: serde_json::Value = serde_json::from_str(&raw[raw.find("\r\n\r\n").unwrap() + 4..]).unwrap();
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["temperature"], 0);
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(body["messages"][0]["content"], req.render());
}

#[test]
fn live_client_retries_then_succeeds() {
    let (fx, cache) = fixture();
    let req = first_request(&fx, &cache);
    let (url, seen, handle) = stub_server(vec![(503, "{}".into()), (200, completion("fine"))]);
    assert_eq!(generate(&req, &live(url)).unwrap().text, "fine");
    handle.join().unwrap();
    assert_eq!(seen.lock().unwrap().len(), 2);
}

#[test]
fn live_client_gives_up_after_three_attempts() {
    let (fx, cache) = fixture();
    let req = first_request(&fx, &cache);
    let (url, seen, handle) = stub_server(vec![(500, "{}".into()); 3]);
    assert!(matches!(generate(&req, &live(url)), Err(PromptError::Endpoint(_))));
    handle.join().unwrap();
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn live_empty_completion_is_a_protocol_error() {
    let (fx, cache) = fixture();
    let req = first_request(&fx, &cache);
    let (url, _, handle) = stub_server(vec![(200, completion(""))]);
    assert!(matches!(generate(&req, &live(url)), Err(PromptError::Protocol(_))));
    handle.join().unwrap();
}

#[test]
fn unreachable_endpoint_is_an_endpoint_error() {
    let (fx, cache) = fixture();
    let req = first_request(&fx, &cache);
    // bind then drop to get a port nobody listens on
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let client = live(format!("http://127.0.0.1:{port}/v1"));
    assert!(matches!(generate(&req, &client), Err(PromptError::Endpoint(_))));
}

fn mock_store(fx: &GeneratedFixture, cache: &RetrievalCache, n: usize) -> (Vec<PromptStoreEntry>, BTreeMap<String, PromptRequest>) {
    let mut requests = BTreeMap::new();
    let mut entries = Vec::new();
    for s in fx.samples.iter().take(n) {
        let req = build_request(&s.text, cache.hits(&s.id).unwrap(), &fx.corpus).unwrap();
        entries.push(PromptStoreEntry::new(&s.id, generate(&req, &MockClient).unwrap()));
        requests.insert(s.id.clone(), req);
    }
    (entries, requests)
}

#[test]
fn prompt_store_round_trips() {
    let (fx, cache) = fixture();
    let (entries, requests) = mock_store(&fx, &cache, 163);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("prompts.jsonl");
    persist_prompts(&entries, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 163);
    let loaded = load_prompts(&path).unwrap();
    assert_eq!(loaded, entries);
    let ids: HashSet<&str> = loaded.iter().map(|e| e.sample_id.as_str()).collect();
    assert_eq!(ids.len(), 163);
    verify_prompts(&loaded, &requests).unwrap();
}

#[test]
fn truncated_or_tampered_store_is_corrupt() {
    let (fx, cache) = fixture();
    let (entries, requests) = mock_store(&fx, &cache, 10);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("prompts.jsonl");
    persist_prompts(&entries, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();

    std::fs::write(&path, &text[..text.len() - 20]).unwrap();
    assert!(matches!(load_prompts(&path), Err(PromptError::Corruption(_))));

    let mut bad = entries.clone();
    bad[4].request_hash = "0".repeat(64);
    assert!(matches!(verify_prompts(&bad, &requests), Err(PromptError::Corruption(_))));
    assert!(matches!(verify_prompts(&entries[..9], &requests), Err(PromptError::Corruption(_))));

    let dup = text.lines().next().unwrap().to_string() + "\n" + &text;
    std::fs::write(&path, dup).unwrap();
    assert!(matches!(load_prompts(&path), Err(PromptError::Corruption(_))));
}
