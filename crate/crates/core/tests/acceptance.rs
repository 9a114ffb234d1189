//! Acceptance suite. Each criterion runs in isolation, prints one PASS/FAIL
//! line, and the process exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

use sketchless::config::RunConfig;
use sketchless::data::{make_toy_corpus, toy_episode_config, Corpus};
use sketchless::embed::{train_stage1, triplet_loss_with, ImageRef, Stage1Config, Stage1Model};
use sketchless::embedding::{EmbeddingKind, EmbeddingVector};
use sketchless::episode::{
    detect_edges, extract_structural_lines, generate_episode, segment_edges, EpisodeConfig, RepaintOrder,
};
use sketchless::eval::{compare, photo_gallery};
use sketchless::metrics::{unweighted_metrics, weighted_metrics, RankRecord};
use sketchless::raster::{PhotoImage, SketchImage};
use sketchless::retrieval::GalleryIndex;
use sketchless::seq::{train_stage2, FeatureSequence, Stage2Config, Stage2Model};
use sketchless::service::{router, Engine, ServeConfig, SessionManager};
use sketchless::toy::toy_face;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn within(start: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let took = start.elapsed();
    ensure!(took < limit, "{what} took {took:.1?}, limit {limit:?}");
    Ok(())
}

// ---------------------------------------------------------------------------
// Metric oracle equivalence

/// Straight double loop over the metric definitions, sharing no code with the
/// library: percentile `(m - r) / (m - 1)`, weight `e^(-p_i / p_n)`.
fn oracle_metrics(ranks: &[Vec<u32>], m: usize, counts: &[Vec<u32>], totals: &[u32]) -> [f64; 4] {
    let (mut ua, mut ub, mut wa, mut wb) = (0.0, 0.0, 0.0, 0.0);
    let n = ranks[0].len();
    for j in 0..ranks.len() {
        for i in 0..n {
            let r = ranks[j][i] as f64;
            let pct = (m as f64 - r) / (m as f64 - 1.0);
            let w = (-(counts[j][i] as f64) / totals[j] as f64).exp();
            ua += pct;
            ub += 1.0 / r;
            wa += w * pct;
            wb += w / r;
        }
    }
    let denom = (ranks.len() * n) as f64;
    [ua, ub, wa, wb].map(|s| 100.0 * s / denom)
}

fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let m = rng.random_range(2..=50);
        let n = rng.random_range(1..=70);
        let ranks: Vec<Vec<u32>> = (0..m).map(|_| (0..n).map(|_| rng.random_range(1..=m as u32)).collect()).collect();
        let mut counts = Vec::with_capacity(m);
        let mut totals = Vec::with_capacity(m);
        for _ in 0..m {
            let mut c: Vec<u32> = (0..n).map(|_| rng.random_range(0..=80)).collect();
            c.sort_unstable();
            let total = c[n - 1] + rng.random_range(0..5);
            totals.push(total.max(1));
            counts.push(c);
        }
        let ids = (0..m).map(|j| format!("p{j}")).collect();
        let record = RankRecord::per_episode(ids, ranks.clone(), m, counts.clone(), totals.clone()).map_err(|e| e.to_string())?;
        let (ua, ub) = unweighted_metrics(&record).map_err(|e| e.to_string())?;
        let (wa, wb) = weighted_metrics(&record).map_err(|e| e.to_string())?;
        let expected = oracle_metrics(&ranks, m, &counts, &totals);
        for (got, want) in [ua, ub, wa, wb].iter().zip(expected) {
            let err = (got - want).abs();
            worst = worst.max(err);
            ensure!(err <= 1e-9, "case {case} (m={m}, n={n}): got {got}, oracle {want}");
        }
    }
    within(start, Duration::from_secs(10), "metric oracle")?;
    Ok(format!("100 records, max abs error {worst:.1e}, {:.2?}", start.elapsed()))
}

// ---------------------------------------------------------------------------
// Perfect-ranking ceiling

fn perfect_ranking_ceiling() -> Outcome {
    let n = 70u32;
    // Closed form of the geometric series sum_{i=1..n} q^i with q = e^(-1/n).
    let q = (-1.0 / n as f64).exp();
    let ceiling = 100.0 / n as f64 * q * (1.0 - q.powi(n as i32)) / (1.0 - q);
    let counts: Vec<u32> = (1..=n).collect();
    let m = 5;
    let record = RankRecord::new(
        (0..m).map(|j| format!("p{j}")).collect(),
        vec![vec![1; n as usize]; m],
        m,
        counts,
        n,
    )
    .map_err(|e| e.to_string())?;
    let (wa, wb) = weighted_metrics(&record).map_err(|e| e.to_string())?;
    ensure!((wa - ceiling).abs() < 1e-6, "w@mA {wa} vs ceiling {ceiling}");
    ensure!((wb - ceiling).abs() < 1e-6, "w@mB {wb} vs ceiling {ceiling}");
    Ok(format!("w@mA = w@mB = {wa:.6} (closed form {ceiling:.6})"))
}

// ---------------------------------------------------------------------------
// Episode invariants

/// One-shot composite: a pixel keeps its sketch value when some segment pixel
/// lies within Chebyshev distance `r`, otherwise it is blank paper.
fn one_shot_composite(sketch: &SketchImage, segments: &[Vec<(u32, u32)>], r: usize) -> Vec<f32> {
    let (w, h) = (sketch.width() as usize, sketch.height() as usize);
    let edge: std::collections::HashSet<(i64, i64)> =
        segments.iter().flatten().map(|&(y, x)| (y as i64, x as i64)).collect();
    let r = r as i64;
    let mut out = vec![1.0f32; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let near = (-r..=r).any(|dy| (-r..=r).any(|dx| edge.contains(&(y + dy, x + dx))));
            if near {
                out[y as usize * w + x as usize] = sketch.get(y as usize, x as usize);
            }
        }
    }
    out
}

fn episode_invariants() -> Outcome {
    let start = Instant::now();
    let strategies = [RepaintOrder::SizeDesc, RepaintOrder::TopToBottom, RepaintOrder::SeededShuffle];
    let mut frames_checked = 0;
    for i in 0..50 {
        let sketch = toy_face(11, i).render_sketch(64);
        let cfg = EpisodeConfig {
            strategy: strategies[i % 3],
            ..toy_episode_config(64, 70)
        };
        let seed = 1000 + i as u64;
        let ep = generate_episode(&sketch, &cfg, "x", seed).map_err(|e| format!("sketch {i}: {e}"))?;
        ensure!(ep.frames.len() == 70, "sketch {i}: {} frames", ep.frames.len());
        for t in 0..ep.frames.len() - 1 {
            ensure!(ep.frames[t].ink_subset_of(&ep.frames[t + 1]), "sketch {i}: frame {t} ink not kept in frame {}", t + 1);
            ensure!(ep.stroke_counts[t] <= ep.stroke_counts[t + 1], "sketch {i}: stroke counts decrease at {t}");
        }
        ensure!(ep.stroke_counts[69] == ep.total_strokes, "sketch {i}: final stroke count");

        let lines = extract_structural_lines(&sketch, cfg.line_filter);
        let edges = detect_edges(&lines, cfg.canny_low, cfg.canny_high).map_err(|e| e.to_string())?;
        let segments = segment_edges(&edges, cfg.min_segment_pixels);
        ensure!(segments.len() == ep.total_strokes as usize, "sketch {i}: segment count");
        let pixels: Vec<Vec<(u32, u32)>> = segments.iter().map(|s| s.pixels().to_vec()).collect();
        let oracle = one_shot_composite(&sketch, &pixels, cfg.dilation_radius);
        let last = ep.final_frame().pixels();
        ensure!(
            last.iter().zip(&oracle).all(|(a, b)| a.to_bits() == b.to_bits()),
            "sketch {i}: final frame differs from the one-shot composite"
        );

        let again = generate_episode(&sketch, &cfg, "x", seed).map_err(|e| e.to_string())?;
        ensure!(
            again.frames.iter().zip(&ep.frames).all(|(a, b)| {
                a.pixels().iter().zip(b.pixels()).all(|(x, y)| x.to_bits() == y.to_bits())
            }) && again.stroke_counts == ep.stroke_counts,
            "sketch {i}: regeneration with the same seed differs"
        );
        frames_checked += ep.frames.len();
    }
    within(start, Duration::from_secs(60), "episode invariants")?;
    Ok(format!("50 sketches, {frames_checked} frames, {:.2?}", start.elapsed()))
}

// ---------------------------------------------------------------------------
// Gradient check

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn random_sketch(size: u32, rng: &mut ChaCha8Rng) -> SketchImage {
    SketchImage::new(size, size, (0..size * size).map(|_| rng.random::<f32>()).collect()).unwrap()
}

fn random_photo(size: u32, rng: &mut ChaCha8Rng) -> PhotoImage {
    PhotoImage::new(size, size, (0..3 * size * size).map(|_| rng.random::<f32>()).collect()).unwrap()
}

fn set_param(params: Vec<(String, &mut sketchless::nn::Tensor)>, name: &str, idx: usize, value: f64) {
    for (n, t) in params {
        if n == name {
            t.data[idx] = value;
        }
    }
}

/// Compare every coordinate of the head tensors (and a sample of the others)
/// against a central difference. Returns (coordinates checked, worst error).
fn check_coords<M>(
    model: &mut M,
    grads: &sketchless::nn::Gradients,
    full: impl Fn(&str) -> bool,
    loss_of: impl Fn(&M) -> f64,
    params_mut: impl Fn(&mut M) -> Vec<(String, &mut sketchless::nn::Tensor)>,
    get: impl Fn(&M, &str, usize) -> f64,
) -> Result<(usize, f64), String> {
    let h = 1e-5;
    let (mut checked, mut worst) = (0, 0.0f64);
    for (name, g) in grads.entries() {
        let step = if full(name) { 1 } else { (g.len() / 8).max(1) };
        for idx in (0..g.len()).step_by(step) {
            let orig = get(model, name, idx);
            set_param(params_mut(model), name, idx, orig + h);
            let up = loss_of(model);
            set_param(params_mut(model), name, idx, orig - h);
            let down = loss_of(model);
            set_param(params_mut(model), name, idx, orig);
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(g.data[idx], numeric);
            worst = worst.max(err);
            ensure!(err < 1e-4, "{name}[{idx}]: analytic {} numeric {numeric}", g.data[idx]);
            checked += 1;
        }
    }
    Ok((checked, worst))
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut total, mut worst) = (0usize, 0.0f64);
    let mut covered = std::collections::BTreeSet::new();
    for point in 0..20 {
        // The margin is set just above the active threshold so the loss stays
        // near 1 and central-difference round-off stays far below 1e-4.
        let mut cfg = Stage1Config::toy(16, 6);
        cfg.normalize = point % 2 == 1;
        let s1_seed = rng.random();
        let (a, p, n) = (random_sketch(16, &mut rng), random_photo(16, &mut rng), random_photo(16, &mut rng));
        let probe = Stage1Model::new(cfg.clone(), s1_seed).map_err(|e| e.to_string())?;
        let e = |img| probe.encode_image(img).unwrap();
        let (ea, ep, en) = (e(ImageRef::Sketch(&a)), e(ImageRef::Photo(&p)), e(ImageRef::Photo(&n)));
        cfg.margin = (ea.distance(&en).unwrap() - ea.distance(&ep).unwrap()).max(0.0) + 1.0;
        let mut s1 = Stage1Model::new(cfg, s1_seed).map_err(|e| e.to_string())?;
        let (loss, grads) = s1
            .triplet_gradients(ImageRef::Sketch(&a), ImageRef::Photo(&p), ImageRef::Photo(&n))
            .map_err(|e| e.to_string())?;
        ensure!(loss > 0.0, "point {point}: stage-1 hinge inactive");
        let s1_loss = |m: &Stage1Model| {
            let e = |img| m.encode_image(img).unwrap();
            let c = m.config();
            triplet_loss_with(&e(ImageRef::Sketch(&a)), &e(ImageRef::Photo(&p)), &e(ImageRef::Photo(&n)), c.margin, c.distance).unwrap()
        };
        let (c, w) = check_coords(
            &mut s1,
            &grads,
            |name| name.starts_with("attention") || name.starts_with("projection"),
            s1_loss,
            |m| m.named_parameters_mut(),
            |m, name, idx| m.named_parameters().into_iter().find(|(n, _)| n == name).unwrap().1.data[idx],
        )
        .map_err(|e| format!("point {point} stage 1: {e}"))?;
        total += c;
        worst = worst.max(w);
        covered.extend(grads.entries().iter().map(|(n, _)| n.split('.').next().unwrap().to_string()));

        s1.freeze();
        let mut s2_cfg = Stage2Config { hidden_size: 4, layers: 1 + point % 2, ..Stage2Config::toy() };
        let s2_seed = rng.random();
        let len = rng.random_range(2..=5);
        let rows = Array2::from_shape_fn((len, s1.d_high()), |_| rng.random_range(-1.0..1.0));
        let seq = FeatureSequence::from_rows(rows).map_err(|e| e.to_string())?;
        let low = |rng: &mut ChaCha8Rng| {
            EmbeddingVector::new((0..s1.d_low()).map(|_| rng.random_range(-1.0..1.0)).collect(), EmbeddingKind::Low).unwrap()
        };
        let (pos, neg) = (low(&mut rng), low(&mut rng));
        let lengths: Vec<usize> = (1..=len).collect();
        let probe = Stage2Model::new(&s1, s2_cfg.clone(), s2_seed).map_err(|e| e.to_string())?;
        s2_cfg.margin = lengths
            .iter()
            .map(|&t| {
                let out = probe.encode_prefix(&seq.prefix(t).unwrap()).unwrap();
                out.distance(&neg).unwrap() - out.distance(&pos).unwrap()
            })
            .fold(0.0, f64::max)
            + 1.0;
        let margin = s2_cfg.margin;
        let mut s2 = Stage2Model::new(&s1, s2_cfg, s2_seed).map_err(|e| e.to_string())?;
        let (loss, grads) = s2.triplet_gradients(&seq, &lengths, &pos, &neg).map_err(|e| e.to_string())?;
        ensure!(loss > 0.0, "point {point}: stage-2 hinge inactive");
        let distance = s1.config().distance;
        let s2_loss = |m: &Stage2Model| -> f64 {
            lengths
                .iter()
                .map(|&t| {
                    let out = m.encode_prefix(&seq.prefix(t).unwrap()).unwrap();
                    triplet_loss_with(&out, &pos, &neg, margin, distance).unwrap()
                })
                .sum()
        };
        let (c, w) = check_coords(
            &mut s2,
            &grads,
            |_| true,
            s2_loss,
            |m| m.named_parameters_mut(),
            |m, name, idx| m.named_parameters().into_iter().find(|(n, _)| n == name).unwrap().1.data[idx],
        )
        .map_err(|e| format!("point {point} stage 2: {e}"))?;
        total += c;
        worst = worst.max(w);
        covered.extend(grads.entries().iter().map(|(n, _)| n.split('.').next().unwrap().to_string()));
    }
    for part in ["attention", "projection", "lstm", "head"] {
        ensure!(covered.contains(part), "no gradients checked for {part}");
    }
    Ok(format!("20 points, {total} coordinates, worst relative error {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// Training criteria

fn all_ids(corpus: &Corpus) -> Vec<String> {
    corpus.identities().map(String::from).collect()
}

fn trained_stage1(corpus: &Corpus, cfg: &RunConfig) -> Result<Stage1Model, String> {
    let mut model = Stage1Model::new(cfg.stage1_config(), cfg.seed).map_err(|e| e.to_string())?;
    train_stage1(&mut model, corpus, &cfg.stage1_train()).map_err(|e| e.to_string())?;
    model.freeze();
    Ok(model)
}

fn top1_complete(stage1: &Stage1Model, corpus: &Corpus) -> Result<usize, String> {
    let ids = all_ids(corpus);
    let gallery = photo_gallery(stage1, corpus, &ids).map_err(|e| e.to_string())?;
    let mut hits = 0;
    for id in &ids {
        let sketch = stage1.fit_sketch(corpus.episode(id).unwrap().final_frame());
        let q = stage1.encode_image(ImageRef::Sketch(&sketch)).map_err(|e| e.to_string())?;
        if gallery.rank_of_target(&q, id).map_err(|e| e.to_string())? == 1 {
            hits += 1;
        }
    }
    Ok(hits)
}

fn toy_setup(seed: u64) -> Result<(Corpus, RunConfig), String> {
    let cfg = RunConfig { seed, ..RunConfig::toy() };
    let corpus = make_toy_corpus(20, cfg.image_size, cfg.episode.frames, seed).map_err(|e| e.to_string())?;
    Ok((corpus, cfg))
}

fn stage1_overfit() -> Outcome {
    let start = Instant::now();
    let (corpus, cfg) = toy_setup(1)?;
    ensure!(cfg.stage1_epochs <= 200, "toy preset trains {} epochs", cfg.stage1_epochs);
    let model = trained_stage1(&corpus, &cfg)?;
    let hits = top1_complete(&model, &corpus)?;
    ensure!(hits == 20, "top-1 {hits}/20 after {} epochs", cfg.stage1_epochs);
    within(start, Duration::from_secs(300), "stage-1 overfit")?;
    Ok(format!("top-1 20/20 after {} epochs, {:.1?}", cfg.stage1_epochs, start.elapsed()))
}

fn stage2_beats_baseline() -> Outcome {
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for seed in [1, 2, 3] {
        let (corpus, cfg) = toy_setup(seed)?;
        let stage1 = trained_stage1(&corpus, &cfg)?;
        let mut stage2 = Stage2Model::new(&stage1, cfg.stage2_config(), seed).map_err(|e| e.to_string())?;
        train_stage2(&mut stage2, &corpus, &stage1, &cfg.stage2_train()).map_err(|e| e.to_string())?;
        let cmp = compare(&stage1, &stage2, &corpus, &all_ids(&corpus)).map_err(|e| e.to_string())?;
        let (oa, ob) = weighted_metrics(&cmp.sequence).map_err(|e| e.to_string())?;
        let (ba, bb) = weighted_metrics(&cmp.baseline).map_err(|e| e.to_string())?;
        lines.push(format!("seed {seed}: w@mA {oa:.2} vs {ba:.2}, w@mB {ob:.2} vs {bb:.2}"));
        if !(oa > ba && ob > bb) {
            failures.push(seed);
        }
    }
    ensure!(failures.is_empty(), "ordering violated for seeds {failures:?}; {}", lines.join("; "));
    Ok(lines.join("; "))
}

// ---------------------------------------------------------------------------
// Retrieval exactness

fn retrieval_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut queries = 0;
    let mut ties = 0;
    while queries < 1000 {
        let n = rng.random_range(1..=500);
        let dim = rng.random_range(1..=12);
        // Coarse coordinates make exact distance ties common.
        let levels = rng.random_range(2..=6);
        let coord = |rng: &mut ChaCha8Rng| rng.random_range(0..levels) as f64 * 0.5;
        let entries: Vec<(String, Vec<f64>)> =
            (0..n).map(|i| (format!("{:05}", (i * 7919) % 100_000), (0..dim).map(|_| coord(&mut rng)).collect())).collect();
        let gallery = GalleryIndex::new(
            entries.iter().map(|(id, v)| (id.clone(), EmbeddingVector::new(v.clone(), EmbeddingKind::Low).unwrap())).collect(),
        )
        .map_err(|e| e.to_string())?;
        for _ in 0..20 {
            let q: Vec<f64> = (0..dim).map(|_| coord(&mut rng)).collect();
            let k = rng.random_range(1..=n + 3);
            let mut brute: Vec<(f64, &str)> = entries
                .iter()
                .map(|(id, v)| (v.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), id.as_str()))
                .collect();
            brute.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(b.1)));
            ties += brute.windows(2).filter(|w| w[0].0 == w[1].0).count();
            let got = gallery
                .query_topk(&EmbeddingVector::new(q, EmbeddingKind::Low).unwrap(), k)
                .map_err(|e| e.to_string())?;
            ensure!(got.ranked.len() == k.min(n), "query {queries}: {} results for k={k}, n={n}", got.ranked.len());
            for (pos, (r, (d2, id))) in got.ranked.iter().zip(&brute).enumerate() {
                ensure!(
                    r.photo_id == *id && r.rank == pos + 1 && r.distance == d2.sqrt(),
                    "query {queries} position {pos}: got ({}, {}, {}), brute force ({id}, {}, {})",
                    r.photo_id,
                    r.rank,
                    r.distance,
                    pos + 1,
                    d2.sqrt()
                );
            }
            queries += 1;
        }
    }
    Ok(format!("{queries} queries, {ties} tied neighbours resolved identically"))
}

// ---------------------------------------------------------------------------
// Service replay

fn service_manager() -> Result<Arc<SessionManager>, String> {
    let corpus = make_toy_corpus(6, 32, 4, 3).map_err(|e| e.to_string())?;
    let mut stage1 = Stage1Model::new(Stage1Config::toy(32, 8), 5).map_err(|e| e.to_string())?;
    stage1.freeze();
    let stage2 = Stage2Model::new(&stage1, Stage2Config { hidden_size: 6, ..Stage2Config::toy() }, 5).map_err(|e| e.to_string())?;
    let ids = all_ids(&corpus);
    let gallery = photo_gallery(&stage1, &corpus, &ids).map_err(|e| e.to_string())?;
    let photos: BTreeMap<String, PhotoImage> = corpus.photos().clone();
    let engine = Engine::new(stage1, stage2, gallery, photos).map_err(|e| e.to_string())?;
    let cfg = ServeConfig { canvas_size: 32, k: 4, ..ServeConfig::default() };
    Ok(Arc::new(SessionManager::new(Some(Arc::new(engine)), &cfg)))
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Value) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(serde_json::to_vec(&body).unwrap()))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn strokes(seed: u64) -> Vec<Value> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..10)
        .map(|_| {
            let pts: Vec<Value> = (0..rng.random_range(2..6))
                .map(|_| json!({ "x": rng.random_range(0.0..31.0), "y": rng.random_range(0.0..31.0) }))
                .collect();
            json!({ "points": pts, "width": rng.random_range(1.0..3.0) })
        })
        .collect()
}

async fn open(app: &axum::Router, target: &str) -> Result<String, String> {
    let (status, body) = call(app, "POST", "/api/v1/sessions", json!({ "target_id": target })).await;
    ensure!(status == StatusCode::CREATED, "create returned {status}");
    let v: Value = serde_json::from_slice(&body).unwrap();
    Ok(v["session_id"].as_str().unwrap().to_string())
}

async fn stroke(app: &axum::Router, id: &str, s: &Value) -> Result<Vec<u8>, String> {
    let (status, body) = call(app, "POST", &format!("/api/v1/sessions/{id}/strokes"), s.clone()).await;
    ensure!(status == StatusCode::OK, "stroke returned {status}: {}", String::from_utf8_lossy(&body));
    Ok(body)
}

async fn record_session(strokes: &[Value], target: &str) -> Result<Vec<Vec<u8>>, String> {
    let app = router(service_manager()?);
    let id = open(&app, target).await?;
    let mut out = Vec::new();
    for s in strokes {
        out.push(stroke(&app, &id, s).await?);
    }
    Ok(out)
}

async fn service_replay_async() -> Outcome {
    let a = strokes(1);
    let b = strokes(2);
    let recorded = record_session(&a, "id0001").await?;
    let replayed = record_session(&a, "id0001").await?;
    ensure!(recorded == replayed, "replayed bodies differ from the recording");
    let indices: Vec<u64> = recorded
        .iter()
        .map(|body| serde_json::from_slice::<Value>(body).unwrap()["stroke_index"].as_u64().unwrap())
        .collect();
    ensure!(indices == (1..=10).collect::<Vec<_>>(), "stroke counter {indices:?}");

    let solo_b = record_session(&b, "id0004").await?;
    let app = router(service_manager()?);
    let (ia, ib) = (open(&app, "id0001").await?, open(&app, "id0004").await?);
    let (mut got_a, mut got_b) = (Vec::new(), Vec::new());
    for (sa, sb) in a.iter().zip(&b) {
        got_a.push(stroke(&app, &ia, sa).await?);
        got_b.push(stroke(&app, &ib, sb).await?);
    }
    ensure!(got_a == recorded, "session A changed when interleaved with B");
    ensure!(got_b == solo_b, "session B changed when interleaved with A");
    Ok("10-stroke replay byte-identical; 2 interleaved sessions match their solo runs".into())
}

fn service_replay() -> Outcome {
    tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .unwrap()
        .block_on(service_replay_async())
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("metric oracle equivalence", metric_oracle),
        ("perfect-ranking ceiling", perfect_ranking_ceiling),
        ("episode invariants", episode_invariants),
        ("gradient check", gradient_check),
        ("stage-1 overfit", stage1_overfit),
        ("stage-2 beats single-image baseline", stage2_beats_baseline),
        ("retrieval exactness", retrieval_exactness),
        ("service replay determinism", service_replay),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name} ({secs:.1}s): {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
