#![allow(dead_code)]

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use insta_core::corpus::{InstructionId, InstructionRole, LoadOptions, MetaDataset, Split, Task, TaskId};
use insta_core::embed::{Embedder, ReferenceBackend};
use insta_core::select::ScoreMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn ref_embedder(dim: usize) -> Embedder {
    Embedder::new(Arc::new(ReferenceBackend::new(dim).unwrap()))
}

/// Plain scalar cosine, written independently of the library's.
pub fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt() * nb.sqrt())
}

pub fn instr(task: &str, n: usize, text: impl Into<String>) -> (String, String, InstructionRole) {
    (format!("{task}/{n}"), text.into(), InstructionRole::Original)
}

pub fn task(id: &str, cluster: &str, split: Split, texts: &[&str]) -> Task {
    Task::new(
        id,
        cluster,
        split,
        texts.iter().enumerate().map(|(n, t)| instr(id, n, *t)).collect(),
    )
}

pub fn corpus(tasks: Vec<Task>) -> MetaDataset {
    MetaDataset::from_tasks("test", tasks, LoadOptions::default()).unwrap()
}

/// Up to ten tasks with up to six instructions each; one eval target in its
/// own cluster, train tasks spread over up to four other clusters.
pub fn random_corpus(rng: &mut ChaCha8Rng) -> (MetaDataset, TaskId) {
    let n_train = rng.random_range(1..=9);
    let mut tasks = Vec::new();
    let target_instrs = rng.random_range(1..=6);
    tasks.push(Task::new(
        "target",
        "target_cluster",
        Split::Eval,
        (0..target_instrs).map(|n| instr("target", n, format!("target prompt number {n}"))).collect(),
    ));
    for t in 0..n_train {
        let id = format!("task{t:02}");
        let cluster = format!("c{}", rng.random_range(0..4));
        let k = rng.random_range(1..=6);
        tasks.push(Task::new(
            id.as_str(),
            cluster.as_str(),
            Split::Train,
            (0..k).map(|n| instr(&id, n, format!("{id} prompt number {n}"))).collect(),
        ));
    }
    (corpus(tasks), TaskId::from("target"))
}

/// Score matrix over the target's instructions and every pool instruction,
/// with values on a coarse grid so ties are common. Columns of a task are
/// not necessarily contiguous.
pub fn random_matrix(ds: &MetaDataset, target: &TaskId, rng: &mut ChaCha8Rng) -> ScoreMatrix {
    let rows: Vec<InstructionId> = ds.task(target).unwrap().instructions.iter().map(|i| i.id.clone()).collect();
    let mut cols: Vec<(InstructionId, TaskId)> = ds
        .eligible_pool(target)
        .unwrap()
        .iter()
        .flat_map(|t| t.instructions.iter().map(|i| (i.id.clone(), t.id.clone())))
        .collect();
    for i in (1..cols.len()).rev() {
        let j = rng.random_range(0..=i);
        cols.swap(i, j);
    }
    let values = (0..rows.len() * cols.len())
        .map(|_| rng.random_range(-4i32..=4) as f64 / 4.0)
        .collect();
    let (train_instructions, train_tasks) = cols.into_iter().unzip();
    ScoreMatrix {
        target: target.clone(),
        target_instructions: rows,
        train_instructions,
        train_tasks,
        values,
        backend_id: "test".into(),
        head_id: None,
        sim_ops: 0,
    }
}

pub type OracleRow = (TaskId, f64, (InstructionId, InstructionId));

/// Top-k by exhaustive enumeration: per-task maximum with the first
/// achieving cell in row-major order, then repeated extraction of the best
/// remaining task (higher score, then smaller id).
pub fn brute_force_top_k(sm: &ScoreMatrix, ds: &MetaDataset, k: usize) -> Vec<OracleRow> {
    let target_cluster = &ds.task(&sm.target).unwrap().cluster_id;
    let mut best: BTreeMap<TaskId, (f64, usize, usize)> = BTreeMap::new();
    for i in 0..sm.target_instructions.len() {
        for j in 0..sm.train_instructions.len() {
            let t = &sm.train_tasks[j];
            if &ds.task(t).unwrap().cluster_id == target_cluster {
                continue;
            }
            let v = sm.values[i * sm.train_instructions.len() + j];
            match best.get(t) {
                Some(&(b, _, _)) if b >= v => {}
                _ => {
                    best.insert(t.clone(), (v, i, j));
                }
            }
        }
    }
    let mut remaining: Vec<(TaskId, (f64, usize, usize))> = best.into_iter().collect();
    let mut out = Vec::new();
    while out.len() < k && !remaining.is_empty() {
        let mut pick = 0;
        for c in 1..remaining.len() {
            let (ref tc, (vc, _, _)) = remaining[c];
            let (ref tp, (vp, _, _)) = remaining[pick];
            if vc > vp || (vc == vp && tc < tp) {
                pick = c;
            }
        }
        let (t, (v, i, j)) = remaining.remove(pick);
        out.push((
            t,
            v,
            (sm.target_instructions[i].clone(), sm.train_instructions[j].clone()),
        ));
    }
    out
}

/// One request as seen by the mock server.
#[derive(Debug, Clone)]
pub struct SeenRequest {
    pub method: String,
    pub path: String,
    pub body: String,
}

pub type Handler = dyn Fn(&SeenRequest) -> (u16, String) + Send + Sync;

/// Minimal HTTP/1.1 server answering each connection with `handler`.
pub struct MockServer {
    pub url: String,
    pub requests: Arc<Mutex<Vec<SeenRequest>>>,
    pub hits: Arc<AtomicUsize>,
}

impl MockServer {
    pub fn start(handler: Box<Handler>) -> MockServer {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let hits = Arc::new(AtomicUsize::new(0));
        let handler: Arc<Handler> = Arc::from(handler);
        {
            let requests = Arc::clone(&requests);
            let hits = Arc::clone(&hits);
            thread::spawn(move || {
                for stream in listener.incoming() {
                    let Ok(stream) = stream else { break };
                    let handler = Arc::clone(&handler);
                    let requests = Arc::clone(&requests);
                    let hits = Arc::clone(&hits);
                    thread::spawn(move || serve(stream, &*handler, &requests, &hits));
                }
            });
        }
        MockServer { url, requests, hits }
    }

    pub fn embed_requests(&self) -> Vec<SeenRequest> {
        self.requests
            .lock()
            .unwrap()
            .iter()
            .filter(|r| r.path == "/v1/embed")
            .cloned()
            .collect()
    }
}

fn serve(stream: TcpStream, handler: &Handler, requests: &Mutex<Vec<SeenRequest>>, hits: &AtomicUsize) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut writer = stream;
    loop {
        let mut request_line = String::new();
        if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
            return;
        }
        let mut parts = request_line.split_whitespace();
        let method = parts.next().unwrap_or_default().to_owned();
        let path = parts.next().unwrap_or_default().to_owned();
        let mut content_length = 0;
        loop {
            let mut line = String::new();
            if reader.read_line(&mut line).unwrap_or(0) == 0 {
                return;
            }
            let line = line.trim_end();
            if line.is_empty() {
                break;
            }
            if let Some((k, v)) = line.split_once(':') {
                if k.eq_ignore_ascii_case("content-length") {
                    content_length = v.trim().parse().unwrap();
                }
            }
        }
        let mut body = vec![0; content_length];
        reader.read_exact(&mut body).unwrap();
        let req = SeenRequest {
            method,
            path,
            body: String::from_utf8(body).unwrap(),
        };
        hits.fetch_add(1, Ordering::SeqCst);
        let (status, payload) = handler(&req);
        requests.lock().unwrap().push(req);
        let response = format!(
            "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n{payload}",
            payload.len()
        );
        if writer.write_all(response.as_bytes()).is_err() {
            return;
        }
    }
}

/// Deterministic fake embedding of `text` with `dim` entries.
pub fn fake_vector(text: &str, dim: usize) -> Vec<f64> {
    let seed = text.bytes().fold(7u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
    (0..dim).map(|i| ((seed.wrapping_add(i as u64 * 2654435761) % 1000) as f64 + 1.0) / 1000.0).collect()
}

/// Handler for a well-behaved service serving `model` at `dim`.
pub fn service(model: &'static str, dim: usize) -> Box<Handler> {
    Box::new(move |req: &SeenRequest| match req.path.as_str() {
        "/healthz" => (200, format!(r#"{{"status":"ok","model":"{model}","dim":{dim}}}"#)),
        "/v1/embed" => {
            let v: serde_json::Value = serde_json::from_str(&req.body).unwrap();
            let embeddings: Vec<Vec<f64>> = v["texts"]
                .as_array()
                .unwrap()
                .iter()
                .map(|t| fake_vector(t.as_str().unwrap(), dim))
                .collect();
            (
                200,
                serde_json::json!({"model": model, "dim": dim, "embeddings": embeddings}).to_string(),
            )
        }
        _ => (404, "{}".into()),
    })
}
