//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ctarate::corpus::{parse_line, read_corpus, write_corpus, KeyPolicy};
use ctarate::dialog::{Conversation, Device, Domain, Intent, Phase, Utterance};
use ctarate::features::{extract, slot_kind, FeatureVector, Lexicons, SlotKind, FEATURE_NAMES, N_FEATURES};
use ctarate::models::{coefficient_report, FlowClassifier, HeadConfig, ModelError, NeuralRater, TbRater};
use ctarate::models::{EncoderConfig, Example, ModelFamily};
use ctarate::numeric::checkpoint::Checkpoint;
use ctarate::numeric::{grad_check, GradCheckOptions, Graph, Mode, NodeId, ParamStore, Tensor, TensorError};
use ctarate::serialize::{
    prefix, serialize_conversation, serialize_turn, serialize_untruncated, SerializationConfig, TruncationSide,
    Vocabulary, CLS_ID, PAD_ID,
};
use ctarate::synth::{generate, GeneratorConfig, Preset};
use ctarate::train::{
    checkpoint, evaluate, load_model, metrics, prepare, train, Ablation, EncoderSize, TrainConfig, TrainedModel,
    DEFAULT_SEEDS,
};

type Check = Result<String, String>;
type Criterion = (u8, &'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn main() {
    let criteria: Vec<Criterion> = vec![
        (1, "feature-oracle equivalence", c1_feature_oracles),
        (2, "golden fixtures", c2_golden_fixtures),
        (3, "serialization contracts", c3_serialization),
        (4, "gradient fidelity", c4_gradients),
        (5, "planted-signal recovery", c5_planted_signal),
        (6, "fusion advantage", c6_fusion),
        (7, "truncation ordering", c7_truncation),
        (8, "metrics oracle", c8_metrics),
        (9, "determinism", c9_determinism),
        (10, "round trips", c10_round_trips),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}

// ---------------------------------------------------------------- criterion 1

fn set(u: &Utterance) -> HashSet<&str> {
    u.tokens().iter().map(String::as_str).collect()
}

fn jaccard(a: &Utterance, b: &Utterance) -> f64 {
    let (a, b) = (set(a), set(b));
    let union = a.union(&b).count();
    if union == 0 {
        0.0
    } else {
        a.intersection(&b).count() as f64 / union as f64
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn max(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn count<T>(items: &[T], pred: impl Fn(&T) -> bool) -> f64 {
    items.iter().filter(|x| pred(x)).count() as f64
}

/// Each feature recomputed straight from its one-line definition.
fn oracle(c: &Conversation, lex: &Lexicons) -> BTreeMap<String, f64> {
    let t = &c.turns;
    let n = t.len();
    let secs = |ms: i64| ms as f64 / 1000.0;
    let mut f = BTreeMap::new();
    let mut put = |k: &str, v: f64| {
        f.insert(k.to_string(), v);
    };
    let durations: Vec<f64> = t.iter().map(|x| secs(x.system_end_ms - x.user_start_ms)).collect();
    put("session_duration_s", secs(t[n - 1].system_end_ms - t[0].user_start_ms));
    put("turn_duration_s", durations[n - 1]);
    put("avg_turn_duration_s", mean(&durations));
    put("max_turn_duration_s", max(&durations));
    put("turns", n as f64);
    let pos = count(t, |x| x.user.tokens().iter().any(|w| lex.positive.contains(w)));
    let neg = count(t, |x| x.user.tokens().iter().any(|w| lex.negative.contains(w)));
    put("utterance_pos", pos);
    put("utterance_neg", neg);
    put("avg_utterance_pos", pos / n as f64);
    put("avg_utterance_neg", neg / n as f64);
    put("offensive_turns", count(t, |x| x.flags.offensive));
    put("sensitive_turns", count(t, |x| x.flags.sensitive));
    let last_pair = |g: &dyn Fn(usize, usize) -> f64| if n > 1 { g(n - 2, n - 1) } else { 0.0 };
    put("user_word_overlap", last_pair(&|a, b| jaccard(&t[a].user, &t[b].user)));
    put("system_word_overlap", last_pair(&|a, b| jaccard(&t[a].system, &t[b].system)));
    put("user_system_word_overlap", last_pair(&|a, b| jaccard(&t[a].system, &t[b].user)));
    let uu: Vec<f64> = (1..n).map(|i| jaccard(&t[i - 1].user, &t[i].user)).collect();
    let ss: Vec<f64> = (1..n).map(|i| jaccard(&t[i - 1].system, &t[i].system)).collect();
    let su: Vec<f64> = (1..n).map(|i| jaccard(&t[i - 1].system, &t[i].user)).collect();
    put("avg_user_word_overlap", mean(&uu));
    put("avg_system_word_overlap", mean(&ss));
    put("avg_user_system_word_overlap", mean(&su));
    put("words_user", t[n - 1].user.tokens().len() as f64);
    put("words_system", t[n - 1].system.tokens().len() as f64);
    let wu: Vec<f64> = t.iter().map(|x| x.user.tokens().len() as f64).collect();
    let ws: Vec<f64> = t.iter().map(|x| x.system.tokens().len() as f64).collect();
    put("avg_words_user", mean(&wu));
    put("avg_words_system", mean(&ws));
    if n > 1 {
        put("unique_user_words", set(&t[n - 1].user).difference(&set(&t[n - 2].user)).count() as f64);
        put("unique_system_words", set(&t[n - 1].system).difference(&set(&t[n - 2].system)).count() as f64);
    } else {
        put("unique_user_words", set(&t[0].user).len() as f64);
        put("unique_system_words", set(&t[0].system).len() as f64);
    }

    let ulat: Vec<f64> = (0..n)
        .map(|i| if i == 0 { 0.0 } else { secs(t[i].user_start_ms - t[i - 1].system_end_ms) })
        .collect();
    let slat: Vec<f64> = t.iter().map(|x| secs(x.system_start_ms - x.user_end_ms)).collect();
    let asr: Vec<f64> = t.iter().map(|x| x.asr_score).collect();
    put("user_latency_s", ulat[n - 1]);
    put("avg_user_latency_s", mean(&ulat));
    put("max_user_latency_s", max(&ulat));
    put("system_latency_s", slat[n - 1]);
    put("avg_system_latency_s", mean(&slat));
    put("max_system_latency_s", max(&slat));
    put("asr_score", asr[n - 1]);
    put("avg_asr_score", mean(&asr));
    put("min_asr_score", asr.iter().copied().fold(f64::INFINITY, f64::min));

    put("steps_read", count(t, |x| x.is_step_reading));
    put(
        "repeated_user_utterance",
        (1..n).filter(|&i| !t[i].user.tokens().is_empty() && t[i].user.tokens() == t[i - 1].user.tokens()).count() as f64,
    );
    put(
        "repeated_system_utterance",
        (1..n)
            .filter(|&i| !t[i].system.tokens().is_empty() && t[i].system.tokens() == t[i - 1].system.tokens())
            .count() as f64,
    );
    put("resumed", if c.resumed { 1.0 } else { 0.0 });
    put("has_screen", if c.device == Device::Screen { 1.0 } else { 0.0 });
    put("screens", t.iter().filter_map(|x| x.screen_id.as_deref()).collect::<HashSet<_>>().len() as f64);
    put("searches", count(t, |x| x.flags.search_request));
    let searches: Vec<usize> = (0..n).filter(|&i| t[i].flags.search_request).collect();
    put(
        "repeated_searches",
        searches
            .iter()
            .enumerate()
            .filter(|(k, &i)| searches[..*k].iter().any(|&j| t[j].user.tokens() == t[i].user.tokens()))
            .count() as f64,
    );
    put("result_pages", count(t, |x| x.flags.result_page_shown));
    put("started_task", if t.iter().any(|x| x.flags.task_started) { 1.0 } else { 0.0 });
    put("finished_task", if t.iter().any(|x| x.flags.task_finished) { 1.0 } else { 0.0 });
    put("fallback_exceptions", count(t, |x| x.flags.fallback));
    put(
        "domain",
        match c.domain {
            Domain::None => 0.0,
            Domain::Recipe => 1.0,
            Domain::Diy => 2.0,
        },
    );
    put("curiosities_accepted", count(t, |x| x.flags.curiosity_accepted));
    put("curiosities_denied", count(t, |x| x.flags.curiosity_denied));
    put("curiosities_said", count(t, |x| x.flags.curiosity_said));
    for p in Phase::ALL {
        put(&format!("phase_{}", p.label()), count(t, |x| x.phase == *p));
    }
    for i in Intent::ALL {
        put(&format!("intent_{}", i.label()), count(t, |x| x.intent == *i));
    }
    f
}

fn compare(name_of: &str, got: &FeatureVector, want: &BTreeMap<String, f64>, tol: f64) -> Result<(), String> {
    ensure(want.len() == N_FEATURES, || format!("oracle covers {} features", want.len()))?;
    for (i, name) in FEATURE_NAMES.iter().enumerate() {
        let w = *want.get(*name).ok_or_else(|| format!("oracle lacks {name}"))?;
        let g = got.as_slice()[i];
        let exact = matches!(slot_kind(i), SlotKind::Count | SlotKind::Flag);
        let ok = if exact || tol == 0.0 { g == w } else { (g - w).abs() <= tol };
        ensure(ok && g.is_finite(), || format!("{name_of}: {name} = {g}, oracle {w}"))?;
    }
    Ok(())
}

fn c1_feature_oracles() -> Check {
    let start = Instant::now();
    let lex = Lexicons::shipped();
    let corpus = generate(&GeneratorConfig {
        seed: 2024,
        n_conversations: 200,
        ..GeneratorConfig::default()
    })
    .map_err(err)?;
    let mut exercised: HashSet<&str> = HashSet::new();
    for c in &corpus {
        let want = oracle(c, &lex);
        let got = extract(c, &lex);
        compare(&c.id, &got, &want, 1e-9)?;
        for (i, name) in FEATURE_NAMES.iter().enumerate() {
            if got.as_slice()[i] != 0.0 {
                exercised.insert(name);
            }
        }
    }
    ensure(start.elapsed().as_secs_f64() < 30.0, || "took longer than 30 s".into())?;
    Ok(format!(
        "{} features agree on {} conversations ({} slots take non-zero values)",
        N_FEATURES,
        corpus.len(),
        exercised.len()
    ))
}

// ---------------------------------------------------------------- criterion 2

fn fixtures_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures"))
}

fn c2_golden_fixtures() -> Check {
    let lex = Lexicons::shipped();
    for (name, turns) in [("four_turn", 4), ("six_turn", 6)] {
        let corpus = read_corpus(&fixtures_dir().join(format!("{name}.jsonl"))).map_err(err)?;
        ensure(corpus.len() == 1 && corpus[0].turns.len() == turns, || format!("{name}: bad fixture"))?;
        let text = std::fs::read_to_string(fixtures_dir().join(format!("golden_{name}.json"))).map_err(err)?;
        let golden: BTreeMap<String, f64> = serde_json::from_str(&text).map_err(err)?;
        compare(name, &extract(&corpus[0], &lex), &golden, 0.0)?;
    }
    Ok("4-turn and 6-turn vectors match their golden files exactly".into())
}

// ---------------------------------------------------------------- criterion 3

fn c3_serialization() -> Check {
    let corpus = generate(&GeneratorConfig {
        seed: 77,
        n_conversations: 1000,
        ..GeneratorConfig::default()
    })
    .map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let base_off = SerializationConfig {
        use_step_token: false,
        ..Default::default()
    };
    let vocab = Vocabulary::build(&corpus, &base_off, 1).map_err(err)?;
    let mut violations = Vec::new();
    let mut overflowed = 0;
    for c in &corpus {
        let max_len = rng.gen_range(8..160);
        let extras = rng.gen_bool(0.5);
        let on = SerializationConfig {
            max_len,
            use_step_token: true,
            use_additional_tokens: extras,
            truncation_side: TruncationSide::Left,
        };
        let full = serialize_untruncated(c, &on, &vocab);
        let p = prefix(c, &on, &vocab).len();
        for side in [TruncationSide::Left, TruncationSide::Right] {
            let cfg = SerializationConfig {
                truncation_side: side,
                ..on.clone()
            };
            let seq = serialize_conversation(c, &cfg, &vocab);
            let active = seq.active();
            if seq.ids[0] != CLS_ID {
                violations.push(format!("{}: [CLS] not at position 0", c.id));
            }
            if seq.attention_len > max_len || seq.ids.len() != max_len {
                violations.push(format!("{}: length {} > {max_len}", c.id, seq.attention_len));
            }
            if seq.ids[seq.attention_len..].iter().any(|&id| id != PAD_ID) {
                violations.push(format!("{}: non-pad after attention length", c.id));
            }
            let expected: Vec<u32> = if full.len() <= max_len {
                full.clone()
            } else {
                match side {
                    TruncationSide::Left => {
                        let keep = max_len - p;
                        full[..p].iter().chain(&full[full.len() - keep..]).copied().collect()
                    }
                    TruncationSide::Right => full[..max_len].to_vec(),
                }
            };
            if active != expected.as_slice() {
                violations.push(format!("{}: {side:?} truncation does not preserve the expected span", c.id));
            }
        }
        if full.len() > max_len {
            overflowed += 1;
        }
        let off = SerializationConfig {
            use_step_token: false,
            ..on.clone()
        };
        for t in &c.turns {
            let a = serialize_turn(t, &on, &vocab);
            let b = serialize_turn(t, &off, &vocab);
            if (a != b) != t.is_step_reading {
                violations.push(format!("{} turn {}: step toggle mismatch", c.id, t.index));
            }
        }
    }
    ensure(violations.is_empty(), || {
        format!("{} violations, first: {}", violations.len(), violations[0])
    })?;
    Ok(format!("1000 conversations ({overflowed} overflowing), zero violations"))
}

// ---------------------------------------------------------------- criterion 4

fn store(entries: &[(&str, &[usize])], seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    for (name, shape) in entries {
        p.add(*name, Tensor::randn(shape, 1.0, &mut rng));
    }
    p
}

fn project(g: &mut Graph, x: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
    let w = g.input(Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(99)));
    let prod = g.mul(x, w)?;
    g.sum(prod)
}

fn c4_gradients() -> Check {
    let start = Instant::now();
    let p = store(
        &[
            ("a", &[3, 4]),
            ("b", &[4, 5]),
            ("c", &[6, 4]),
            ("row", &[1, 4]),
            ("gain", &[1, 4]),
            ("bias", &[1, 4]),
            ("table", &[7, 4]),
        ],
        11,
    );
    let id = |n: &str| p.id(n).expect("registered");
    type LossFn<'a> = Box<dyn Fn(&mut Graph) -> Result<NodeId, TensorError> + 'a>;
    let cases: Vec<(&str, LossFn)> = vec![
        ("matmul", Box::new(|g| {
            let (a, b) = (g.param(id("a")), g.param(id("b")));
            let y = g.matmul(a, b)?;
            project(g, y, &[3, 5])
        })),
        ("matmul_t", Box::new(|g| {
            let (a, c) = (g.param(id("a")), g.param(id("c")));
            let y = g.matmul_t(a, c)?;
            project(g, y, &[3, 6])
        })),
        ("add_row", Box::new(|g| {
            let (a, r) = (g.param(id("a")), g.param(id("row")));
            let y = g.add_row(a, r)?;
            project(g, y, &[3, 4])
        })),
        ("add", Box::new(|g| {
            let (a, b) = (g.param(id("a")), g.param(id("a")));
            let y = g.add(a, b)?;
            project(g, y, &[3, 4])
        })),
        ("mul", Box::new(|g| {
            let a = g.param(id("a"));
            let y = g.mul(a, a)?;
            project(g, y, &[3, 4])
        })),
        ("scale", Box::new(|g| {
            let a = g.param(id("a"));
            let y = g.scale(a, -1.7)?;
            project(g, y, &[3, 4])
        })),
        ("relu", Box::new(|g| {
            let a = g.param(id("a"));
            let y = g.relu(a)?;
            project(g, y, &[3, 4])
        })),
        ("softmax", Box::new(|g| {
            let a = g.param(id("a"));
            let y = g.softmax(a)?;
            project(g, y, &[3, 4])
        })),
        ("layer_norm", Box::new(|g| {
            let (a, gn, b) = (g.param(id("a")), g.param(id("gain")), g.param(id("bias")));
            let y = g.layer_norm(a, gn, b)?;
            project(g, y, &[3, 4])
        })),
        ("embedding", Box::new(|g| {
            let t = g.param(id("table"));
            let y = g.embedding(t, &[3, 0, 3, 6])?;
            project(g, y, &[4, 4])
        })),
        ("concat_cols", Box::new(|g| {
            let (a, r) = (g.param(id("a")), g.param(id("c")));
            let r3 = g.rows(r, &[0, 1, 2])?;
            let y = g.concat_cols(&[a, r3])?;
            project(g, y, &[3, 8])
        })),
        ("slice_cols", Box::new(|g| {
            let a = g.param(id("a"));
            let y = g.slice_cols(a, 1, 2)?;
            project(g, y, &[3, 2])
        })),
        ("rows", Box::new(|g| {
            let c = g.param(id("c"));
            let y = g.rows(c, &[5, 0, 5])?;
            project(g, y, &[3, 4])
        })),
        ("dropout", Box::new(|g| {
            let a = g.param(id("a"));
            let y = g.dropout(a, 0.3)?;
            project(g, y, &[3, 4])
        })),
        ("cross_entropy", Box::new(|g| {
            let a = g.param(id("a"));
            g.cross_entropy(a, &[0, 3, 1])
        })),
    ];
    let opts = GradCheckOptions {
        mode: Mode::Train { seed: 5 },
        coords: 1000,
        ..Default::default()
    };
    let mut worst = 0.0f64;
    for (name, f) in &cases {
        let r = grad_check(&p, &opts, f).map_err(err)?;
        ensure(r.max_rel_err < 1e-4, || format!("{name}: rel err {:.3e}", r.max_rel_err))?;
        worst = worst.max(r.max_rel_err);
    }

    let enc = EncoderConfig {
        vocab_size: 40,
        max_len: 24,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        ffn_dim: 16,
        dropout: 0.1,
    };
    let ex = Example {
        seq: ctarate::serialize::TokenSequence {
            ids: vec![CLS_ID, 7, 9, 31, 4, 4, 12, 0, 0, 0],
            attention_len: 7,
        },
        features: (0..N_FEATURES).map(|i| ((i * 7) % 11) as f64 / 5.0 - 1.0).collect(),
        label: 1,
    };
    let model_opts = GradCheckOptions {
        mode: Mode::Train { seed: 21 },
        coords: 400,
        seed: 8,
        ..Default::default()
    };
    let as_tensor = |e: ModelError| match e {
        ModelError::Tensor(t) => t,
        other => TensorError::Invalid(other.to_string()),
    };
    let flow = FlowClassifier::new(enc.clone(), HeadConfig::default(), 3).map_err(err)?;
    let r = grad_check(flow.params(), &model_opts, |g| flow.loss(g, &ex).map_err(as_tensor)).map_err(err)?;
    ensure(r.max_rel_err < 1e-4, || format!("flow-only loss: rel err {:.3e}", r.max_rel_err))?;
    worst = worst.max(r.max_rel_err);
    let tb = TbRater::new(enc, HeadConfig::default(), N_FEATURES, 3).map_err(err)?;
    let r = grad_check(tb.params(), &model_opts, |g| tb.loss(g, &ex).map_err(as_tensor)).map_err(err)?;
    ensure(r.max_rel_err < 1e-4, || format!("TB-Rater loss: rel err {:.3e}", r.max_rel_err))?;
    worst = worst.max(r.max_rel_err);
    ensure(start.elapsed().as_secs_f64() < 120.0, || "took longer than 2 min".into())?;
    Ok(format!("{} primitives and both full losses, worst rel err {worst:.2e}", cases.len()))
}

// ---------------------------------------------------------------- criterion 5

fn c5_planted_signal() -> Check {
    let start = Instant::now();
    let gen = GeneratorConfig::default();
    let corpus = generate(&gen).map_err(err)?;
    let lex = Lexicons::shipped();
    let cfg = TrainConfig::default();
    let data = prepare(&corpus, &cfg, &lex).map_err(err)?;
    let outcome = train(ModelFamily::LogisticRegression, &data, &cfg, &DEFAULT_SEEDS).map_err(err)?;
    let accuracy = outcome.report.mean.accuracy;
    ensure(accuracy >= 0.90, || format!("held-out accuracy {accuracy:.3} < 0.90"))?;

    let raw: Vec<FeatureVector> = corpus.iter().map(|c| extract(c, &lex)).collect();
    let mut checked = Vec::new();
    for (name, &w) in &gen.planted_weights {
        let i = ctarate::features::feature_index(name).expect("planted name");
        let col: Vec<f64> = raw.iter().map(|v| v.as_slice()[i]).collect();
        let m = mean(&col);
        let sd = (col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
        if w.abs() * sd < gen.noise_sd {
            continue;
        }
        for run in &outcome.runs {
            let TrainedModel::Linear(model) = &run.model else {
                return Err("expected a linear model".into());
            };
            let learned = model.weights[i];
            ensure(learned.signum() == w.signum(), || {
                format!("seed {}: {name} planted {w:+} but learned {learned:+.3}", run.seed)
            })?;
        }
        checked.push(name.as_str());
    }
    let TrainedModel::Linear(first) = &outcome.runs[0].model else {
        return Err("expected a linear model".into());
    };
    let top = coefficient_report(first, 14);
    ensure(top.len() == 14, || "coefficient report is short".into())?;
    ensure(start.elapsed().as_secs_f64() < 120.0, || "took longer than 2 min".into())?;
    Ok(format!(
        "mean accuracy {:.3} over {} seeds; signs recovered for {} planted weights ({})",
        accuracy,
        outcome.report.n_runs(),
        checked.len(),
        checked.join(", ")
    ))
}

// ---------------------------------------------------------------- criteria 6, 7

/// Encoder and sequence sizes small enough to train on one CPU core in minutes.
fn desk_config() -> TrainConfig {
    TrainConfig {
        serialization: SerializationConfig {
            max_len: 64,
            ..Default::default()
        },
        encoder: EncoderSize {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 64,
            dropout: 0.1,
        },
        ..TrainConfig::default()
    }
}

fn c6_fusion() -> Check {
    let start = Instant::now();
    let corpus = generate(&Preset::Fusion.config()).map_err(err)?;
    let cfg = desk_config();
    let data = prepare(&corpus, &cfg, &Lexicons::shipped()).map_err(err)?;
    let mut acc = BTreeMap::new();
    for family in [ModelFamily::TbRater, ModelFamily::FlowOnly, ModelFamily::LogisticRegression] {
        let outcome = train(family, &data, &cfg, &DEFAULT_SEEDS).map_err(err)?;
        acc.insert(family.short_name(), outcome.report.mean.accuracy);
    }
    let (tb, flow, lr) = (acc["tbrater"], acc["flow"], acc["lr"]);
    let summary = format!("TB-Rater {:.1}, flow-only {:.1}, LR {:.1}", 100.0 * tb, 100.0 * flow, 100.0 * lr);
    ensure(tb >= flow + 0.02, || format!("{summary}: margin over flow-only below 2 points"))?;
    ensure(tb >= lr + 0.02, || format!("{summary}: margin over LR below 2 points"))?;
    ensure(start.elapsed().as_secs_f64() < 900.0, || format!("{summary}: took longer than 15 min"))?;
    Ok(format!("{summary} (mean test accuracy, 3 seeds)"))
}

fn c7_truncation() -> Check {
    let corpus = generate(&Preset::Truncation.config()).map_err(err)?;
    let lex = Lexicons::shipped();
    let base = desk_config();
    let mut acc = Vec::new();
    for ablation in [Ablation::Full, Ablation::RightTruncation] {
        let (family, cfg) = ablation.apply(&base);
        let data = prepare(&corpus, &cfg, &lex).map_err(err)?;
        let overflow = data.train.iter().filter(|e| e.seq.attention_len == cfg.serialization.max_len).count();
        ensure(overflow == data.train.len(), || format!("only {overflow} training sequences overflow"))?;
        acc.push(train(family, &data, &cfg, &DEFAULT_SEEDS).map_err(err)?.report.mean.accuracy);
    }
    let summary = format!("left {:.1}, right {:.1}", 100.0 * acc[0], 100.0 * acc[1]);
    ensure(acc[0] >= acc[1] + 0.05, || format!("{summary}: gap below 5 points"))?;
    Ok(format!("{summary} (mean test accuracy, 3 seeds)"))
}

// ---------------------------------------------------------------- criterion 8

fn c8_metrics() -> Check {
    let m = metrics(&[0, 1, 1, 1], &[0, 0, 1, 1]).map_err(err)?;
    ensure(m.accuracy == 0.75 && (m.precision - 5.0 / 6.0).abs() < 1e-15, || format!("hand example gave {m:?}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..1000 {
        let n = rng.gen_range(1..50);
        let bias = rng.gen_range(0.0..1.0);
        let labels: Vec<usize> = (0..n).map(|_| usize::from(rng.gen_bool(bias))).collect();
        let preds: Vec<usize> = (0..n).map(|_| usize::from(rng.gen_bool(0.5))).collect();
        let mut cm = [[0usize; 2]; 2];
        for i in 0..n {
            cm[labels[i]][preds[i]] += 1;
        }
        let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let p0 = div(cm[0][0], cm[0][0] + cm[1][0]);
        let p1 = div(cm[1][1], cm[1][1] + cm[0][1]);
        let r0 = div(cm[0][0], cm[0][0] + cm[0][1]);
        let r1 = div(cm[1][1], cm[1][1] + cm[1][0]);
        let f = |p: f64, r: f64| if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        let want = (
            div(cm[0][0] + cm[1][1], n),
            (p0 + p1) / 2.0,
            (r0 + r1) / 2.0,
            (f(p0, r0) + f(p1, r1)) / 2.0,
        );
        let got = metrics(&preds, &labels).map_err(err)?;
        ensure((got.accuracy, got.precision, got.recall, got.f1) == want && got.confusion == cm, || {
            format!("case {case}: {got:?} vs {want:?}")
        })?;
    }
    Ok("hand-worked example and 1000 random cases match exactly".into())
}

// ---------------------------------------------------------------- criterion 9

fn tiny_config() -> TrainConfig {
    TrainConfig {
        serialization: SerializationConfig {
            max_len: 48,
            ..Default::default()
        },
        encoder: EncoderSize {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            ffn_dim: 32,
            dropout: 0.1,
        },
        max_epochs: 3,
        ..TrainConfig::default()
    }
}

fn c9_determinism() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let gen = GeneratorConfig {
        seed: 9,
        n_conversations: 150,
        ..GeneratorConfig::default()
    };
    let mut bytes = Vec::new();
    for k in 0..2 {
        let path = dir.path().join(format!("corpus{k}.jsonl"));
        write_corpus(&path, &generate(&gen).map_err(err)?).map_err(err)?;
        bytes.push(std::fs::read(&path).map_err(err)?);
    }
    ensure(bytes[0] == bytes[1], || "generated corpora differ".into())?;
    let corpus = read_corpus(&dir.path().join("corpus0.jsonl")).map_err(err)?;

    let cfg = tiny_config();
    let lex = Lexicons::shipped();
    for family in [ModelFamily::TbRater, ModelFamily::LogisticRegression] {
        let mut ckpts = Vec::new();
        let mut reports = Vec::new();
        let mut evals = Vec::new();
        for _ in 0..2 {
            let data = prepare(&corpus, &cfg, &lex).map_err(err)?;
            let outcome = train(family, &data, &cfg, &[13]).map_err(err)?;
            let ckpt = checkpoint(&outcome.runs[0], &data, &cfg);
            let (m, preds) = evaluate(&ckpt, &corpus).map_err(err)?;
            ckpts.push(ckpt.to_bytes());
            reports.push(serde_json::to_string(&outcome.report).map_err(err)?);
            evals.push(serde_json::to_string(&(m, preds)).map_err(err)?);
        }
        ensure(ckpts[0] == ckpts[1], || format!("{family}: checkpoints differ"))?;
        ensure(reports[0] == reports[1], || format!("{family}: reports differ"))?;
        ensure(evals[0] == evals[1], || format!("{family}: evaluations differ"))?;
    }
    Ok("generate, train and evaluate are byte-identical across two runs".into())
}

// ---------------------------------------------------------------- criterion 10

fn c10_round_trips() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let corpus = generate(&GeneratorConfig {
        seed: 10,
        n_conversations: 120,
        ..GeneratorConfig::default()
    })
    .map_err(err)?;
    let path = dir.path().join("c.jsonl");
    write_corpus(&path, &corpus).map_err(err)?;
    let back = read_corpus(&path).map_err(err)?;
    ensure(back == corpus, || "corpus read/write is not exact".into())?;
    let line = std::fs::read_to_string(&path).map_err(err)?;
    let first = line.lines().next().unwrap_or_default();
    ensure(parse_line(first, 1, KeyPolicy::Strict).map_err(err)? == corpus[0], || "line parse differs".into())?;

    let cfg = tiny_config();
    let vocab = Vocabulary::build(&corpus, &cfg.serialization, 1).map_err(err)?;
    let vpath = dir.path().join("vocab.txt");
    vocab.save(&vpath).map_err(err)?;
    ensure(Vocabulary::load(&vpath).map_err(err)? == vocab, || "vocabulary save/load is not exact".into())?;

    let data = prepare(&corpus, &cfg, &Lexicons::shipped()).map_err(err)?;
    let outcome = train(ModelFamily::TbRater, &data, &cfg, &[42]).map_err(err)?;
    let ckpt = checkpoint(&outcome.runs[0], &data, &cfg);
    let cpath = dir.path().join("model.ckpt");
    ckpt.save(&cpath).map_err(err)?;
    let loaded = Checkpoint::load(&cpath).map_err(err)?;
    ensure(loaded == ckpt && loaded.to_bytes() == ckpt.to_bytes(), || "checkpoint save/load is not exact".into())?;
    let (model, _) = load_model(&loaded).map_err(err)?;
    ensure(model == outcome.runs[0].model, || "restored parameters differ".into())?;
    Ok(format!(
        "{} conversations, {} vocabulary tokens, {}-byte checkpoint round-trip exactly",
        corpus.len(),
        vocab.len(),
        ckpt.to_bytes().len()
    ))
}
