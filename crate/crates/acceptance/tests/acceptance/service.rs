//! HTTP transcript replay and concurrent sessions.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use empdial_core::checkpoint::{load_checkpoint, save_checkpoint};
use empdial_core::corpus::Role;
use empdial_core::model::Model;
use empdial_core::respg::SamplingOptions;
use empdial_core::TrainConfig;
use empdial_service::{read_transcript, spawn, AppState, ServiceOptions, SessionView, TurnResult};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reqwest::Client;
use serde_json::{json, Value};

use crate::common::{tiny_config, toy_model};

const LINES: [&str; 8] = [
    "I just got accepted into my dream school!",
    "My dog passed away this morning.",
    "Someone keyed my car last night.",
    "I have a job interview tomorrow.",
    "We finally paid off our house.",
    "The milk in the fridge went bad.",
    "my sister had her baby last night",
    "I found a hundred dollars on the street!",
];

fn sampling() -> SamplingOptions {
    SamplingOptions {
        top_k: 3,
        temperature: 1.0,
        max_new: 10,
    }
}

async fn server(model: Model<f32>, transcript: Option<std::path::PathBuf>) -> String {
    let opts = ServiceOptions {
        sampling: sampling(),
        transcript,
        ..ServiceOptions::default()
    };
    let addr = spawn("127.0.0.1:0", AppState::new(Some(model), opts).unwrap()).await.unwrap();
    format!("http://{addr}")
}

async fn create(c: &Client, base: &str) -> String {
    let v: Value = c.post(format!("{base}/api/session")).send().await.unwrap().json().await.unwrap();
    v["session_id"].as_str().unwrap().to_string()
}

async fn post(c: &Client, base: &str, id: &str, text: &str, seed: u64) -> Vec<u8> {
    let r = c
        .post(format!("{base}/api/session/{id}/message"))
        .json(&json!({ "text": text, "seed": seed }))
        .send()
        .await
        .unwrap();
    assert!(r.status().is_success(), "status {}", r.status());
    r.bytes().await.unwrap().to_vec()
}

async fn view(c: &Client, base: &str, id: &str) -> SessionView {
    c.get(format!("{base}/api/session/{id}")).send().await.unwrap().json().await.unwrap()
}

/// Serial reference through the library for a sequence of (text, seed).
fn reference(model: &Model<f32>, script: &[(String, u64)]) -> Vec<TurnResult> {
    let mut history: Vec<(Role, String)> = Vec::new();
    let mut out = Vec::new();
    for (text, seed) in script {
        history.push((Role::Speaker, text.clone()));
        let ctx = model.context_for(history.iter().map(|(r, t)| (*r, t.as_str()))).unwrap();
        let turn = model.respond(&ctx, &sampling(), *seed).unwrap();
        history.push((Role::Listener, turn.response.clone()));
        out.push(TurnResult::from(&turn));
    }
    out
}

async fn scenario(model: Model<f32>, ckpt: &std::path::Path) -> Result<String, String> {
    let dir = tempfile::tempdir().unwrap();
    let transcript = dir.path().join("transcript.jsonl");
    let c = Client::new();
    let mut rng = ChaCha8Rng::seed_from_u64(90);

    // Record.
    let a = server(model.clone(), Some(transcript.clone())).await;
    let mut recorded: HashMap<String, Vec<Vec<u8>>> = HashMap::new();
    for _ in 0..4 {
        let id = create(&c, &a).await;
        for _ in 0..3 {
            let text = LINES.choose(&mut rng).unwrap();
            let body = post(&c, &a, &id, text, rng.random_range(0..1 << 40)).await;
            recorded.entry(id.clone()).or_default().push(body);
        }
    }

    // Replay on a server loaded from the checkpoint on disk.
    let reloaded = load_checkpoint(ckpt).map_err(|e| e.to_string())?.model;
    let b = server(reloaded.clone(), None).await;
    let lines = read_transcript(&transcript).unwrap();
    let mut fresh: HashMap<String, String> = HashMap::new();
    let mut replayed = 0;
    for (k, line) in lines.iter().enumerate() {
        let old = line["session_id"].as_str().unwrap().to_string();
        if !fresh.contains_key(&old) {
            fresh.insert(old.clone(), create(&c, &b).await);
        }
        let turn = recorded[&old].len() - lines[k..].iter().filter(|l| l["session_id"] == old.as_str()).count();
        let body = post(&c, &b, &fresh[&old], line["text"].as_str().unwrap(), line["seed"].as_u64().unwrap()).await;
        if body != recorded[&old][turn] {
            return Err(format!("replayed line {k} differs from the recorded response"));
        }
        let logged: TurnResult = serde_json::from_value(line["result"].clone()).unwrap();
        if serde_json::to_vec(&logged).unwrap() != body {
            return Err(format!("transcript line {k} does not match the response bytes"));
        }
        replayed += 1;
    }

    // Many sessions at once, randomly interleaved.
    let sessions = 24;
    let mut scripts = Vec::new();
    for _ in 0..sessions {
        let n = rng.random_range(2..=4);
        let script: Vec<(String, u64)> = (0..n)
            .map(|_| (LINES.choose(&mut rng).unwrap().to_string(), rng.random_range(0..1 << 40)))
            .collect();
        scripts.push(script);
    }
    let mut tasks = Vec::new();
    for (s, script) in scripts.iter().cloned().enumerate() {
        let (c, b) = (c.clone(), b.clone());
        let mut jitter = ChaCha8Rng::seed_from_u64(1000 + s as u64);
        tasks.push(tokio::spawn(async move {
            let id = create(&c, &b).await;
            for (text, seed) in &script {
                tokio::time::sleep(Duration::from_millis(jitter.random_range(0..15))).await;
                post(&c, &b, &id, text, *seed).await;
            }
            id
        }));
    }
    let mut ids = Vec::new();
    for t in tasks {
        ids.push(t.await.unwrap());
    }
    for (id, script) in ids.iter().zip(&scripts) {
        let v = view(&c, &b, id).await;
        let want = reference(&reloaded, script);
        if v.trace != want || v.turns.len() != 2 * script.len() {
            return Err(format!("session {id} diverged from its serial reference"));
        }
        for (k, (text, _)) in script.iter().enumerate() {
            if v.turns[2 * k].text != *text || v.turns[2 * k + 1].text != want[k].response {
                return Err(format!("session {id} turn {k} holds another session's text"));
            }
        }
    }

    // Concurrent posts to one session are applied one at a time.
    let id = create(&c, &b).await;
    let burst: Vec<(String, u64)> = (0..6).map(|i| (LINES[i].to_string(), 500 + i as u64)).collect();
    let mut tasks = Vec::new();
    for (text, seed) in burst.clone() {
        let (c, b, id) = (c.clone(), b.clone(), id.clone());
        tasks.push(tokio::spawn(async move { post(&c, &b, &id, &text, seed).await }));
    }
    for t in tasks {
        t.await.unwrap();
    }
    let v = view(&c, &b, &id).await;
    let order: Vec<(String, u64)> = v
        .trace
        .iter()
        .zip(v.turns.iter().step_by(2))
        .map(|(t, u)| (u.text.clone(), t.seed))
        .collect();
    if order.len() != burst.len() || reference(&reloaded, &order) != v.trace {
        return Err("concurrent posts to one session interleaved".into());
    }

    Ok(format!(
        "{replayed} transcript lines replayed byte-identically; {sessions} parallel sessions and a 6-way burst match serial references"
    ))
}

pub fn run() -> Result<String, String> {
    let (model, _) = toy_model(tiny_config(16, 1), 8);
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &model, &TrainConfig::default(), &[]).unwrap();
    let model = Arc::new(model);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()
        .unwrap();
    rt.block_on(scenario((*model).clone(), dir.path()))
}
