//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::collections::BTreeMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use medrag_core::adapters::{
    kernels_selftest, lora_forward, lora_grads, lora_init, lora_merge, relative_error, rope_paper,
    rope_standard, LoraLayer, Matrix, RopeConfig, RopeMode,
};
use medrag_core::chunker::{estimate_tokens, split_document, ChunkConfig};
use medrag_core::corpus::load_corpus;
use medrag_core::embed::{embed_local, Embedding, LocalEmbedder};
use medrag_core::genkit::{GenerationParams, Generator, StubGenerator, StubMode};
use medrag_core::harness::{
    render_report, render_summary_markdown, run_eval, EvalItem, MetricConfig, ReportFormat, Scores,
    METRIC_COLUMNS,
};
use medrag_core::index::{EntryMeta, IndexEntry, VectorIndex};
use medrag_core::metrics::{bert_score, bleu, rouge_l, rouge_n, BleuConfig, LocalTokenEmbedder};
use medrag_core::pipeline::{answer_once, SessionConfig};
use medrag_service::{router, AppState, ServiceConfig};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Value};
use tower::ServiceExt;

type Check = Result<(), String>;
type Criterion = (&'static str, Duration, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)*) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)*));
        }
    };
}

const VOCAB: &[&str] = &[
    "fever",
    "cough",
    "headache",
    "nausea",
    "rash",
    "ankle",
    "swelling",
    "insulin",
    "glucose",
    "asthma",
    "inhaler",
    "migraine",
    "antibiotic",
    "allergy",
    "pressure",
    "cholesterol",
    "sleep",
    "fatigue",
    "vitamin",
    "thyroid",
    "kidney",
    "liver",
    "dose",
    "tablet",
    "daily",
    "pain",
    "chest",
    "breath",
    "skin",
    "joint",
    "rest",
    "fluids",
    "the",
    "and",
    "of",
    "a",
    "to",
    "with",
    "after",
    "before",
];

fn random_words(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n)
        .map(|_| *VOCAB.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

fn fixture_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/clinic_dialogues.txt")
}

fn defaults_audit() -> Check {
    ensure!(
        medrag_core::DEFAULT_TOP_K == 4,
        "DEFAULT_TOP_K = {}",
        medrag_core::DEFAULT_TOP_K
    );
    ensure!(
        medrag_core::DEFAULT_CHUNK_UNITS == 1024,
        "DEFAULT_CHUNK_UNITS = {}",
        medrag_core::DEFAULT_CHUNK_UNITS
    );
    ensure!(
        medrag_core::DEFAULT_WINDOW_UNITS == 4096,
        "DEFAULT_WINDOW_UNITS = {}",
        medrag_core::DEFAULT_WINDOW_UNITS
    );
    let session = SessionConfig::default();
    ensure!(
        session.k == 4 && session.window_units == 4096,
        "session defaults k={} window={}",
        session.k,
        session.window_units
    );
    let chunking = ChunkConfig::default();
    ensure!(
        chunking.max_units == 1024,
        "chunk budget {}",
        chunking.max_units
    );
    let service = ServiceConfig::default();
    ensure!(
        service.k == 4 && service.chunk_units == 1024 && service.window_units == 4096,
        "service defaults k={} chunk={} window={}",
        service.k,
        service.chunk_units,
        service.window_units
    );
    let parsed = ServiceConfig::from_toml_str("").map_err(|e| e.to_string())?;
    ensure!(
        parsed.k == 4 && parsed.chunk_units == 1024 && parsed.window_units == 4096,
        "empty TOML config drifts from defaults"
    );
    Ok(())
}

fn metric_oracles() -> Check {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
    let b = bleu(
        "the cat sat",
        &["the cat sat on the mat"],
        &BleuConfig::uniform(3),
    )
    .map_err(|e| e.to_string())?;
    ensure!(close(b, (-1f64).exp()), "BLEU brevity case {b}");
    let r1 = rouge_n("a b d", "a b c", 1).map_err(|e| e.to_string())?;
    ensure!(
        close(r1.precision, 2.0 / 3.0) && close(r1.recall, 2.0 / 3.0) && close(r1.f1, 2.0 / 3.0),
        "ROUGE-1 {r1:?}"
    );
    let r2 = rouge_n("a b d", "a b c", 2).map_err(|e| e.to_string())?;
    ensure!(
        close(r2.precision, 0.5) && close(r2.recall, 0.5) && close(r2.f1, 0.5),
        "ROUGE-2 {r2:?}"
    );
    let rl = rouge_l("the cat", "the cat sat").map_err(|e| e.to_string())?;
    ensure!(
        close(rl.precision, 1.0) && close(rl.recall, 2.0 / 3.0) && close(rl.f1, 0.8),
        "ROUGE-L {rl:?}"
    );

    let embedder = LocalTokenEmbedder::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut texts: Vec<String> = vec![
        "Rest the ankle and keep it raised.".into(),
        "Drink plenty of fluids, and see a doctor if the fever lasts three days.".into(),
    ];
    for _ in 0..30 {
        let n = rng.random_range(2..25);
        texts.push(random_words(&mut rng, n));
    }
    for t in &texts {
        let scores = [
            bleu(t, &[t.as_str()], &BleuConfig::default()).map_err(|e| e.to_string())?,
            rouge_n(t, t, 1).map_err(|e| e.to_string())?.f1,
            rouge_n(t, t, 2).map_err(|e| e.to_string())?.f1,
            rouge_l(t, t).map_err(|e| e.to_string())?.f1,
        ];
        let bert = bert_score(t, t, &embedder).map_err(|e| e.to_string())?;
        for s in scores
            .into_iter()
            .chain([bert.precision, bert.recall, bert.f1])
        {
            ensure!(s == 1.0, "identity score {s} for {t:?}");
        }
    }

    let items: Vec<EvalItem> = (0..100)
        .map(|i| {
            let n = rng.random_range(1..30);
            EvalItem::new(format!("question {i}"), random_words(&mut rng, n))
        })
        .collect();
    let report = run_eval(
        "echo",
        &items,
        |it| Ok(it.reference.clone()),
        &MetricConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    ensure!(
        report.scored_count == 100,
        "{} of 100 items scored",
        report.scored_count
    );
    for (name, v) in METRIC_COLUMNS.iter().zip(report.averages.columns()) {
        ensure!((v - 1.0).abs() <= 1e-9, "echo average {name} = {v}");
    }
    Ok(())
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Matrix::new(rows, cols, data).unwrap()
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn naive_lora(layer: &LoraLayer, x: &[f64]) -> Vec<f64> {
    let (w0, a, b) = (&layer.w0, &layer.a, &layer.b);
    let ax: Vec<f64> = (0..a.rows())
        .map(|i| (0..a.cols()).map(|j| a.get(i, j) * x[j]).sum())
        .collect();
    (0..w0.rows())
        .map(|i| {
            let base: f64 = (0..w0.cols()).map(|j| w0.get(i, j) * x[j]).sum();
            let delta: f64 = (0..b.cols()).map(|t| b.get(i, t) * ax[t]).sum();
            base + layer.scale() * delta
        })
        .collect()
}

fn lora_correctness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut fresh_err = 0f64;
    let mut merge_err = 0f64;
    for trial in 0..100 {
        let d_in = rng.random_range(2..=32);
        let d_out = rng.random_range(2..=32);
        let r = rng.random_range(1..=d_in.min(d_out));
        let w0 = random_matrix(&mut rng, d_out, d_in);
        let fresh =
            lora_init(d_in, d_out, r, 16.0, trial, Some(w0.clone())).map_err(|e| e.to_string())?;
        let x = random_vec(&mut rng, d_in);
        let h = lora_forward(&fresh, &x).map_err(|e| e.to_string())?;
        let base = w0.matvec(&x).map_err(|e| e.to_string())?;
        for (a, b) in h.iter().zip(&base) {
            fresh_err = fresh_err.max((a - b).abs());
        }

        let layer = LoraLayer::from_parts(
            w0,
            random_matrix(&mut rng, r, d_in),
            random_matrix(&mut rng, d_out, r),
            16.0,
        )
        .map_err(|e| e.to_string())?;
        let merged = lora_merge(&layer).matvec(&x).map_err(|e| e.to_string())?;
        let oracle = naive_lora(&layer, &x);
        let forward = lora_forward(&layer, &x).map_err(|e| e.to_string())?;
        let scale = oracle.iter().fold(0f64, |m, v| m.max(v.abs())).max(1e-300);
        for ((m, f), o) in merged.iter().zip(&forward).zip(&oracle) {
            merge_err = merge_err
                .max((m - f).abs() / scale)
                .max((f - o).abs() / scale);
        }
    }
    ensure!(
        fresh_err <= 1e-15,
        "fresh-init forward deviates from W0·x by {fresh_err:e}"
    );
    ensure!(
        merge_err <= 1e-12,
        "merge/forward relative disagreement {merge_err:e}"
    );

    let step = 1e-5;
    let mut grad_err = 0f64;
    for _ in 0..20 {
        let (d_in, d_out, r) = (rng.random_range(2..=12), rng.random_range(2..=12), 2);
        let layer = LoraLayer::from_parts(
            random_matrix(&mut rng, d_out, d_in),
            random_matrix(&mut rng, r, d_in),
            random_matrix(&mut rng, d_out, r),
            4.0,
        )
        .map_err(|e| e.to_string())?;
        let x = random_vec(&mut rng, d_in);
        let up = random_vec(&mut rng, d_out);
        let grads = lora_grads(&layer, &x, &up).map_err(|e| e.to_string())?;
        let loss = |l: &LoraLayer| {
            naive_lora(l, &x)
                .iter()
                .zip(&up)
                .map(|(h, u)| h * u)
                .sum::<f64>()
        };
        for (which, analytic) in [("A", &grads.d_a), ("B", &grads.d_b)] {
            for i in 0..analytic.rows() {
                for j in 0..analytic.cols() {
                    let mut plus = layer.clone();
                    let mut minus = layer.clone();
                    let (p, m) = if which == "A" {
                        (&mut plus.a, &mut minus.a)
                    } else {
                        (&mut plus.b, &mut minus.b)
                    };
                    let v = p.get(i, j);
                    p.set(i, j, v + step);
                    m.set(i, j, v - step);
                    let numeric = (loss(&plus) - loss(&minus)) / (2.0 * step);
                    grad_err = grad_err.max(relative_error(analytic.get(i, j), numeric));
                }
            }
        }
    }
    ensure!(grad_err < 1e-4, "gradient relative error {grad_err:e}");

    for seed in [1, 42, 2024] {
        let report = kernels_selftest(seed);
        ensure!(
            report.fresh_forward_max_abs_err <= 1e-15,
            "selftest {seed}: {report:?}"
        );
        ensure!(
            report.merge_forward_max_rel_err <= 1e-12,
            "selftest {seed}: {report:?}"
        );
        ensure!(
            report.grad_max_rel_err < 1e-4,
            "selftest {seed}: {report:?}"
        );
    }
    Ok(())
}

fn rope_properties() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for dim in [1, 3, 8, 17] {
        let q = random_vec(&mut rng, dim);
        let k = random_vec(&mut rng, dim);
        let (q0, k0) = rope_paper(&q, &k, 0).map_err(|e| e.to_string())?;
        ensure!(q0 == q, "paper-literal q'(0) != q at dim {dim}");
        ensure!(
            k0.iter().all(|v| *v == 0.0),
            "paper-literal k'(0) != 0 at dim {dim}"
        );
    }
    let config = RopeConfig::new(8, RopeMode::PairedRotation).map_err(|e| e.to_string())?;
    let q = random_vec(&mut rng, 8);
    let k = random_vec(&mut rng, 8);
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let rot = |v: &[f64], m: usize| rope_standard(v, m, &config).map_err(|e| e.to_string());
    let mut norm_err = 0f64;
    let mut shift_err = 0f64;
    for m in 0..=16 {
        norm_err = norm_err.max((norm(&rot(&q, m)?) - norm(&q)).abs());
        for n in 0..=16 {
            let base = dot(&rot(&q, m)?, &rot(&k, n)?);
            for s in 0..=16 {
                shift_err = shift_err.max((dot(&rot(&q, m + s)?, &rot(&k, n + s)?) - base).abs());
            }
        }
    }
    ensure!(norm_err <= 1e-12, "norm drift {norm_err:e}");
    ensure!(shift_err <= 1e-9, "relative-shift drift {shift_err:e}");
    Ok(())
}

fn oracle_top_k(entries: &[IndexEntry], query: &Embedding, k: usize) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = entries
        .iter()
        .map(|e| {
            let (q, v) = (&query.values, &e.embedding.values);
            let dot = q.iter().zip(v).fold(0.0, |acc, (x, y)| acc + x * y);
            let nq = q.iter().fold(0.0, |acc, x| acc + x * x);
            let nv = v.iter().fold(0.0, |acc, x| acc + x * x);
            (
                e.id.clone(),
                (dot / (nq.sqrt() * nv.sqrt())).clamp(-1.0, 1.0),
            )
        })
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

fn same_hits(got: &[(String, f64)], want: &[(String, f64)]) -> bool {
    got.len() == want.len()
        && got
            .iter()
            .zip(want)
            .all(|(g, w)| g.0 == w.0 && g.1.to_bits() == w.1.to_bits())
}

fn retrieval_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut index = VectorIndex::new();
    let mut seq = 0;
    while index.len() < 50 {
        let n = rng.random_range(4..40);
        let text = format!("{} {seq}", random_words(&mut rng, n));
        seq += 1;
        let meta = EntryMeta {
            source_doc: format!("doc{seq}"),
            char_span: (0, text.len()),
            speaker: None,
        };
        index
            .add(IndexEntry::new(text.clone(), embed_local(&text, 256), meta))
            .map_err(|e| e.to_string())?;
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    index.persist(dir.path()).map_err(|e| e.to_string())?;
    let loaded = VectorIndex::load(dir.path()).map_err(|e| e.to_string())?;
    for q in 0..20 {
        let n = rng.random_range(2..8);
        let query = embed_local(&random_words(&mut rng, n), 256);
        for k in [1, 4, 50] {
            let want = oracle_top_k(index.entries(), &query, k);
            for (label, idx) in [("live", &index), ("reloaded", &loaded)] {
                let got: Vec<(String, f64)> = idx
                    .search(&query, k)
                    .map_err(|e| e.to_string())?
                    .into_iter()
                    .map(|h| (h.entry.id, h.score))
                    .collect();
                ensure!(
                    same_hits(&got, &want),
                    "{label} index disagrees with oracle on query {q}, k {k}"
                );
            }
        }
    }
    Ok(())
}

fn random_document(rng: &mut ChaCha8Rng) -> String {
    let mut text = String::new();
    let pieces = rng.random_range(0..120);
    for _ in 0..pieces {
        let word = if rng.random_bool(0.05) {
            "x".repeat(rng.random_range(1..60))
        } else {
            VOCAB.choose(rng).unwrap().to_string()
        };
        text.push_str(&word);
        let sep = *["\n\n", "\n", ". ", " ", " ", " ", "  ", "\t", "? "]
            .choose(rng)
            .unwrap();
        text.push_str(sep);
    }
    text
}

fn chunker_properties() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    for d in 0..200 {
        let text = random_document(&mut rng);
        let max_units = rng.random_range(1..40);
        let overlap = rng.random_range(0..max_units);
        let config = ChunkConfig::new(max_units, overlap).map_err(|e| e.to_string())?;
        let chunks = split_document("doc", &text, &config).map_err(|e| e.to_string())?;
        for c in &chunks {
            ensure!(
                estimate_tokens(&c.text) <= max_units,
                "doc {d}: chunk of {} units over budget {max_units}",
                estimate_tokens(&c.text)
            );
            ensure!(
                text.get(c.char_span.0..c.char_span.1) == Some(c.text.as_str()),
                "doc {d}: span does not match text"
            );
        }
        for pair in chunks.windows(2) {
            ensure!(
                pair[0].char_span.0 < pair[1].char_span.0
                    && pair[0].char_span.1 <= pair[1].char_span.1,
                "doc {d}: chunk order not monotone"
            );
        }
        let mut rebuilt: Vec<&str> = Vec::new();
        let mut covered = 0;
        for c in &chunks {
            let from = c.char_span.0.max(covered);
            rebuilt.extend(text[from..c.char_span.1].split_whitespace());
            covered = c.char_span.1;
        }
        let source: Vec<&str> = text.split_whitespace().collect();
        ensure!(
            rebuilt == source,
            "doc {d}: overlap-stripped chunks do not reproduce the source words"
        );
    }
    Ok(())
}

fn run_cli(args: &[&str], stdin: Option<&str>) -> Result<String, String> {
    let mut child = Command::new(env!("CARGO_BIN_EXE_medrag"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| e.to_string())?;
    {
        let mut pipe = child.stdin.take().unwrap();
        pipe.write_all(stdin.unwrap_or("").as_bytes())
            .map_err(|e| e.to_string())?;
    }
    let out = child.wait_with_output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "medrag {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    String::from_utf8(out.stdout).map_err(|e| e.to_string())
}

fn json_hits(sources: &Value) -> Vec<(String, f64)> {
    sources
        .as_array()
        .map(|a| {
            a.iter()
                .map(|s| {
                    (
                        s["id"].as_str().unwrap_or_default().to_string(),
                        s["score"].as_f64().unwrap_or(f64::NAN),
                    )
                })
                .collect()
        })
        .unwrap_or_default()
}

async fn call(state: &Arc<AppState>, uri: &str, body: Value) -> Result<Value, String> {
    let req = Request::builder()
        .method("POST")
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .map_err(|e| e.to_string())?;
    let resp = router(state.clone())
        .oneshot(req)
        .await
        .map_err(|e| e.to_string())?;
    let status = resp.status();
    let bytes = resp
        .into_body()
        .collect()
        .await
        .map_err(|e| e.to_string())?
        .to_bytes();
    let value: Value = serde_json::from_slice(&bytes).map_err(|e| e.to_string())?;
    if status != StatusCode::OK {
        return Err(format!("{uri} returned {status}: {value}"));
    }
    Ok(value)
}

fn end_to_end_offline() -> Check {
    let fixture = fixture_path();
    let exchanges = load_corpus(&fixture, None).map_err(|e| e.to_string())?;
    ensure!(
        exchanges.len() == 30,
        "fixture holds {} exchanges",
        exchanges.len()
    );
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let idx_dir = tmp.path().join("index");
    run_cli(
        &[
            "index",
            fixture.to_str().unwrap(),
            "--out",
            idx_dir.to_str().unwrap(),
        ],
        None,
    )?;

    let mut queries: Vec<String> = exchanges.iter().map(|e| e.patient_text.clone()).collect();
    queries.extend(
        [
            "my ankle is swollen",
            "I cannot sleep",
            "what dose of insulin",
            "chest pain when running",
        ]
        .map(String::from),
    );
    let stdin = queries.join("\n") + "\n";
    let out = run_cli(
        &[
            "chat",
            idx_dir.to_str().unwrap(),
            "--generator",
            "stub",
            "--output",
            "json",
        ],
        Some(&stdin),
    )?;
    let turns: Vec<Value> = out
        .lines()
        .map(serde_json::from_str)
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    ensure!(
        turns.len() == queries.len(),
        "{} turns for {} queries",
        turns.len(),
        queries.len()
    );

    let index = VectorIndex::load(&idx_dir).map_err(|e| e.to_string())?;
    let budget = (medrag_core::DEFAULT_WINDOW_UNITS - medrag_core::DEFAULT_RESERVE_UNITS) as u64;
    for (q, turn) in queries.iter().zip(&turns) {
        let want = oracle_top_k(
            index.entries(),
            &embed_local(q, 256),
            medrag_core::DEFAULT_TOP_K,
        );
        ensure!(
            same_hits(&json_hits(&turn["sources"]), &want),
            "CLI sources differ from the oracle for {q:?}"
        );
        let estimate = turn["prompt_token_estimate"].as_u64().unwrap_or(u64::MAX);
        ensure!(
            estimate <= budget,
            "prompt estimate {estimate} over {budget} for {q:?}"
        );
        ensure!(
            turn["no_context_flag"] == false,
            "no_context_flag set for {q:?}"
        );
    }

    let mut generators: BTreeMap<String, Arc<dyn Generator>> = BTreeMap::new();
    generators.insert(
        "stub".into(),
        Arc::new(StubGenerator::new(StubMode::extract_with_default_fallback())),
    );
    let config = ServiceConfig {
        index_dir: idx_dir.clone(),
        ..ServiceConfig::default()
    };
    let state = Arc::new(
        AppState::with_parts(
            index.clone(),
            Arc::new(LocalEmbedder::default()),
            generators,
            config,
        )
        .map_err(|e| e.to_string())?,
    );
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| e.to_string())?;
    runtime.block_on(async {
        let session = call(&state, "/v1/sessions", json!({})).await?;
        for q in queries.iter().take(10) {
            let reply = call(
                &state,
                "/v1/chat",
                json!({"session_id": session["session_id"], "query": q}),
            )
            .await?;
            let lib = answer_once(
                q,
                &state.base_session,
                &index,
                &LocalEmbedder::default(),
                &StubGenerator::new(StubMode::extract_with_default_fallback()),
                &GenerationParams::default(),
            )
            .map_err(|e| e.to_string())?;
            let expected: Vec<(String, f64)> = lib
                .sources
                .iter()
                .map(|h| (h.entry.id.clone(), h.score))
                .collect();
            ensure!(
                same_hits(&json_hits(&reply["sources"]), &expected),
                "service sources differ from the library for {q:?}"
            );
            ensure!(
                reply["reply"] == lib.reply,
                "service reply differs from the library for {q:?}"
            );
        }
        Ok(())
    })
}

fn report_fidelity() -> Check {
    let rows = [
        ("GPT (FT)", [0.372, 0.294, 0.584, 0.616, 0.571]),
        ("GPT (RAG)", [0.243, 0.235, 0.529, 0.506, 0.551]),
        ("Llama (FT)", [0.241, 0.186, 0.81, 0.829, 0.838]),
        ("Llama (RAG)", [0.288, 0.259, 0.861, 0.851, 0.875]),
    ];
    let items = vec![EvalItem::new("q", "a fixture answer")];
    let mut reports = Vec::new();
    for (name, v) in rows {
        let mut report = run_eval(
            name,
            &items,
            |it| Ok(it.reference.clone()),
            &MetricConfig::default(),
        )
        .map_err(|e| e.to_string())?;
        let scores = Scores {
            bleu: v[0],
            rouge: v[1],
            bert_f1: v[2],
            bert_precision: v[3],
            bert_recall: v[4],
        };
        report.rows[0].scores = Some(scores);
        report.averages = scores;
        reports.push(report);
    }
    let summary = render_summary_markdown(&reports);
    ensure!(
        summary.contains("| System | BLEU | ROUGE | BERT-F1 | BERT-Precision | BERT-Recall |"),
        "summary header: {summary}"
    );
    for line in [
        "| GPT (FT) | 0.372 | 0.294 | 0.584 | 0.616 | 0.571 |",
        "| GPT (RAG) | 0.243 | 0.235 | 0.529 | 0.506 | 0.551 |",
        "| Llama (FT) | 0.241 | 0.186 | 0.810 | 0.829 | 0.838 |",
        "| Llama (RAG) | 0.288 | 0.259 | 0.861 | 0.851 | 0.875 |",
    ] {
        ensure!(
            summary.lines().any(|l| l == line),
            "missing row {line:?} in\n{summary}"
        );
    }
    let md = render_report(&reports[3], ReportFormat::Markdown);
    ensure!(
        md.contains("Llama (RAG) | 0.288 | 0.259 | 0.861 | 0.851 | 0.875"),
        "per-system report: {md}"
    );
    let csv = render_report(&reports[3], ReportFormat::Csv);
    ensure!(csv.contains("0.288") && csv.contains("0.875"), "csv: {csv}");
    Ok(())
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("defaults audit", Duration::from_secs(5), defaults_audit),
        ("metric oracles", Duration::from_secs(10), metric_oracles),
        ("LoRA correctness", Duration::from_secs(5), lora_correctness),
        ("RoPE properties", Duration::from_secs(5), rope_properties),
        ("retrieval oracle", Duration::from_secs(5), retrieval_oracle),
        (
            "chunker properties",
            Duration::from_secs(10),
            chunker_properties,
        ),
        (
            "end-to-end offline",
            Duration::from_secs(30),
            end_to_end_offline,
        ),
        ("report fidelity", Duration::from_secs(5), report_fidelity),
    ];
    let mut failures = 0;
    for (name, limit, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(msg)
        });
        let elapsed = start.elapsed();
        let outcome = outcome.and_then(|()| {
            if elapsed <= limit {
                Ok(())
            } else {
                Err(format!("took {elapsed:.2?}, limit {limit:?}"))
            }
        });
        match outcome {
            Ok(()) => println!("PASS  {name} ({:.2}s)", elapsed.as_secs_f64()),
            Err(reason) => {
                failures += 1;
                println!("FAIL  {name} ({:.2}s): {reason}", elapsed.as_secs_f64());
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failures,
        criteria.len()
    );
    if failures > 0 {
        std::process::exit(1);
    }
}
