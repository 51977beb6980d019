//! Behavioral feature vector computed at the final turn of a conversation.
//!
//! Slots come in three groups, in this fixed order:
//!
//! * general (23): durations, turn count, sentiment-lexicon hits, content flags,
//!   word overlaps and word counts;
//! * system-induced (9): user latency, system latency and ASR confidence, each as
//!   final-turn value, average and extreme;
//! * task-assistant specific (38): steps, repetitions, searches, task progress,
//!   curiosities, per-phase turn counts and per-intent counts.
//!
//! "Final-turn" slots read turn `n`, `avg_*` slots average over all turns and
//! `max_*` slots take the maximum. ASR uses the minimum instead of the maximum.

use std::collections::HashSet;
use std::fmt;
use std::io;
use std::path::Path;

use crate::dialog::{Conversation, Device, Utterance};

pub const N_GENERAL: usize = 23;
pub const N_SYSTEM: usize = 9;
pub const N_CTA: usize = 38;
pub const N_FEATURES: usize = N_GENERAL + N_SYSTEM + N_CTA;

/// Canonical slot names, in vector order.
pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    // general
    "session_duration_s",
    "turn_duration_s",
    "avg_turn_duration_s",
    "max_turn_duration_s",
    "turns",
    "utterance_pos",
    "utterance_neg",
    "avg_utterance_pos",
    "avg_utterance_neg",
    "offensive_turns",
    "sensitive_turns",
    "user_word_overlap",
    "system_word_overlap",
    "user_system_word_overlap",
    "avg_user_word_overlap",
    "avg_system_word_overlap",
    "avg_user_system_word_overlap",
    "words_user",
    "words_system",
    "avg_words_user",
    "avg_words_system",
    "unique_user_words",
    "unique_system_words",
    // system-induced
    "user_latency_s",
    "avg_user_latency_s",
    "max_user_latency_s",
    "system_latency_s",
    "avg_system_latency_s",
    "max_system_latency_s",
    "asr_score",
    "avg_asr_score",
    "min_asr_score",
    // task-assistant specific
    "steps_read",
    "repeated_user_utterance",
    "repeated_system_utterance",
    "resumed",
    "has_screen",
    "screens",
    "searches",
    "repeated_searches",
    "result_pages",
    "started_task",
    "finished_task",
    "fallback_exceptions",
    "domain",
    "curiosities_accepted",
    "curiosities_denied",
    "curiosities_said",
    "phase_greeting",
    "phase_search",
    "phase_task_overview",
    "phase_ingredients",
    "phase_steps",
    "phase_step_detail",
    "phase_conclusion",
    "intent_search",
    "intent_none_of_these",
    "intent_cancel",
    "intent_yes",
    "intent_no",
    "intent_ingredients",
    "intent_start_cooking",
    "intent_start_steps",
    "intent_next",
    "intent_next_step",
    "intent_more_detail",
    "intent_terminate_task",
    "intent_help",
    "intent_repeat",
    "intent_fallback",
];

const PHASE_OFFSET: usize = 48;
const INTENT_OFFSET: usize = PHASE_OFFSET + 7;

/// Position of a slot by name.
pub fn feature_index(name: &str) -> Option<usize> {
    FEATURE_NAMES.iter().position(|n| *n == name)
}

/// How a slot's values are constrained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    /// Non-negative integer count.
    Count,
    /// 0 or 1.
    Flag,
    /// Real in [0, 1].
    Ratio,
    /// Any finite real.
    Real,
}

pub fn slot_kind(index: usize) -> SlotKind {
    match FEATURE_NAMES[index] {
        "turns" | "utterance_pos" | "utterance_neg" | "offensive_turns" | "sensitive_turns" | "words_user"
        | "words_system" | "unique_user_words" | "unique_system_words" => SlotKind::Count,
        "avg_utterance_pos" | "avg_utterance_neg" | "asr_score" | "avg_asr_score" | "min_asr_score" => {
            SlotKind::Ratio
        }
        n if n.ends_with("overlap") => SlotKind::Ratio,
        "resumed" | "has_screen" | "started_task" | "finished_task" => SlotKind::Flag,
        "domain" => SlotKind::Count,
        _ if index >= N_GENERAL + N_SYSTEM => SlotKind::Count,
        _ => SlotKind::Real,
    }
}

#[derive(Clone, PartialEq)]
pub struct FeatureVector([f64; N_FEATURES]);

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        feature_index(name).map(|i| self.0[i])
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.to_vec()
    }
}

impl std::ops::Index<usize> for FeatureVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl fmt::Debug for FeatureVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_map()
            .entries(FEATURE_NAMES.iter().zip(self.0.iter()))
            .finish()
    }
}

/// Positive and negative word lists used as a text proxy for utterance sentiment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicons {
    pub positive: HashSet<String>,
    pub negative: HashSet<String>,
}

impl Lexicons {
    pub fn shipped() -> Self {
        Self {
            positive: parse_word_list(include_str!("../data/positive.txt")),
            negative: parse_word_list(include_str!("../data/negative.txt")),
        }
    }

    /// Loads `positive.txt` and `negative.txt` from `dir`.
    pub fn load_dir(dir: &Path) -> io::Result<Self> {
        let read = |name: &str| {
            let path = dir.join(name);
            std::fs::read_to_string(&path)
                .map_err(|e| io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        };
        Ok(Self {
            positive: parse_word_list(&read("positive.txt")?),
            negative: parse_word_list(&read("negative.txt")?),
        })
    }

    /// Sorted word lists, for persisting alongside a model.
    pub fn to_lists(&self) -> (Vec<String>, Vec<String>) {
        let sorted = |s: &HashSet<String>| {
            let mut v: Vec<_> = s.iter().cloned().collect();
            v.sort();
            v
        };
        (sorted(&self.positive), sorted(&self.negative))
    }

    pub fn from_lists(positive: &[String], negative: &[String]) -> Self {
        Self {
            positive: positive.iter().cloned().collect(),
            negative: negative.iter().cloned().collect(),
        }
    }
}

fn parse_word_list(text: &str) -> HashSet<String> {
    text.lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect()
}

fn token_set(u: &Utterance) -> HashSet<&str> {
    u.tokens().iter().map(String::as_str).collect()
}

/// Jaccard similarity of the two token sets; 0 when both are empty.
pub fn word_overlap(a: &Utterance, b: &Utterance) -> f64 {
    let a = token_set(a);
    let b = token_set(b);
    let union = a.union(&b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn max(values: impl Iterator<Item = f64>) -> f64 {
    values.fold(f64::NEG_INFINITY, f64::max)
}

fn new_words(current: &Utterance, previous: &Utterance) -> f64 {
    let prev = token_set(previous);
    token_set(current).difference(&prev).count() as f64
}

/// The 23 general slots. `conv` must be valid (non-empty).
pub fn extract_general(conv: &Conversation, lex: &Lexicons) -> [f64; N_GENERAL] {
    let turns = &conv.turns;
    let n = turns.len();
    let nf = n as f64;
    let last = &turns[n - 1];

    let session = (last.system_end_ms - turns[0].user_start_ms) as f64 / 1000.0;
    let durations = || turns.iter().map(|t| t.duration_s());

    let hits = |words: &HashSet<String>| {
        turns
            .iter()
            .filter(|t| t.user.tokens().iter().any(|w| words.contains(w)))
            .count() as f64
    };
    let pos = hits(&lex.positive);
    let neg = hits(&lex.negative);

    let offensive = turns.iter().filter(|t| t.flags.offensive).count() as f64;
    let sensitive = turns.iter().filter(|t| t.flags.sensitive).count() as f64;

    let pairs = || turns.windows(2);
    let (user_ov, system_ov, user_system_ov) = if n >= 2 {
        let prev = &turns[n - 2];
        (
            word_overlap(&prev.user, &last.user),
            word_overlap(&prev.system, &last.system),
            word_overlap(&prev.system, &last.user),
        )
    } else {
        (0.0, 0.0, 0.0)
    };
    let avg_user_ov = mean(pairs().map(|w| word_overlap(&w[0].user, &w[1].user)));
    let avg_system_ov = mean(pairs().map(|w| word_overlap(&w[0].system, &w[1].system)));
    let avg_user_system_ov = mean(pairs().map(|w| word_overlap(&w[0].system, &w[1].user)));

    let user_words: usize = turns.iter().map(|t| t.user.tokens().len()).sum();
    let system_words: usize = turns.iter().map(|t| t.system.tokens().len()).sum();

    let (unique_user, unique_system) = if n >= 2 {
        let prev = &turns[n - 2];
        (new_words(&last.user, &prev.user), new_words(&last.system, &prev.system))
    } else {
        (token_set(&last.user).len() as f64, token_set(&last.system).len() as f64)
    };

    [
        session,
        last.duration_s(),
        mean(durations()),
        max(durations()),
        nf,
        pos,
        neg,
        pos / nf,
        neg / nf,
        offensive,
        sensitive,
        user_ov,
        system_ov,
        user_system_ov,
        avg_user_ov,
        avg_system_ov,
        avg_user_system_ov,
        last.user.tokens().len() as f64,
        last.system.tokens().len() as f64,
        user_words as f64 / nf,
        system_words as f64 / nf,
        unique_user,
        unique_system,
    ]
}

/// Latency and ASR slots.
pub fn extract_system_induced(conv: &Conversation) -> [f64; N_SYSTEM] {
    let n = conv.turns.len();
    let user_lat = || (0..n).map(|i| conv.user_latency_s(i));
    let sys_lat = || conv.turns.iter().map(|t| t.system_latency_s());
    let asr = || conv.turns.iter().map(|t| t.asr_score);
    let last = &conv.turns[n - 1];
    [
        conv.user_latency_s(n - 1),
        mean(user_lat()),
        max(user_lat()),
        last.system_latency_s(),
        mean(sys_lat()),
        max(sys_lat()),
        last.asr_score,
        mean(asr()),
        asr().fold(f64::INFINITY, f64::min),
    ]
}

/// Task-assistant specific slots.
pub fn extract_cta(conv: &Conversation) -> [f64; N_CTA] {
    let turns = &conv.turns;
    let count = |pred: &dyn Fn(&crate::dialog::Turn) -> bool| turns.iter().filter(|t| pred(t)).count() as f64;

    let repeated = |get: &dyn Fn(&crate::dialog::Turn) -> &Utterance| {
        turns
            .windows(2)
            .filter(|w| {
                let (a, b) = (get(&w[0]), get(&w[1]));
                !b.is_empty() && a.tokens() == b.tokens()
            })
            .count() as f64
    };

    let screens: HashSet<&str> = turns.iter().filter_map(|t| t.screen_id.as_deref()).collect();

    let mut seen_queries: Vec<&[String]> = Vec::new();
    let mut repeated_searches = 0.0;
    for t in turns.iter().filter(|t| t.flags.search_request) {
        let q = t.user.tokens();
        if seen_queries.contains(&q) {
            repeated_searches += 1.0;
        }
        seen_queries.push(q);
    }

    let any = |pred: &dyn Fn(&crate::dialog::Turn) -> bool| f64::from(u8::from(turns.iter().any(pred)));

    let mut out = [0.0; N_CTA];
    let head = [
        count(&|t| t.is_step_reading),
        repeated(&|t| &t.user),
        repeated(&|t| &t.system),
        f64::from(u8::from(conv.resumed)),
        f64::from(u8::from(conv.device == Device::Screen)),
        screens.len() as f64,
        count(&|t| t.flags.search_request),
        repeated_searches,
        count(&|t| t.flags.result_page_shown),
        any(&|t| t.flags.task_started),
        any(&|t| t.flags.task_finished),
        count(&|t| t.flags.fallback),
        conv.domain.code(),
        count(&|t| t.flags.curiosity_accepted),
        count(&|t| t.flags.curiosity_denied),
        count(&|t| t.flags.curiosity_said),
    ];
    out[..head.len()].copy_from_slice(&head);
    let base = N_GENERAL + N_SYSTEM;
    for t in turns {
        out[PHASE_OFFSET - base + t.phase.index()] += 1.0;
        out[INTENT_OFFSET - base + t.intent.index()] += 1.0;
    }
    out
}

/// Full behavioral vector in canonical order.
pub fn extract(conv: &Conversation, lex: &Lexicons) -> FeatureVector {
    let mut v = [0.0; N_FEATURES];
    v[..N_GENERAL].copy_from_slice(&extract_general(conv, lex));
    v[N_GENERAL..N_GENERAL + N_SYSTEM].copy_from_slice(&extract_system_induced(conv));
    v[N_GENERAL + N_SYSTEM..].copy_from_slice(&extract_cta(conv));
    FeatureVector(v)
}

/// Extracts every conversation, in parallel when enabled.
pub fn extract_all(corpus: &[Conversation], lex: &Lexicons) -> Vec<FeatureVector> {
    crate::par::map(corpus, |c| extract(c, lex))
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum StandardizeError {
    #[error("cannot fit standardization stats on an empty matrix")]
    Empty,
    #[error("row {row}: slot `{slot}` is not finite")]
    NonFinite { row: usize, slot: String },
    #[error("row {row} has {got} columns, expected {expected}")]
    Width { row: usize, got: usize, expected: usize },
}

/// Per-column mean and population standard deviation from a training matrix.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StandardizeStats {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

const MIN_SD: f64 = 1e-12;

fn slot_name(col: usize) -> String {
    FEATURE_NAMES
        .get(col)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("column {col}"))
}

/// Z-scores each column. Fits stats on `rows` when `stats` is `None`,
/// otherwise applies the given stats unchanged.
pub fn standardize(
    rows: &[Vec<f64>],
    stats: Option<&StandardizeStats>,
) -> Result<(Vec<Vec<f64>>, StandardizeStats), StandardizeError> {
    let width = match (stats, rows.first()) {
        (Some(s), _) => s.mean.len(),
        (None, Some(r)) => r.len(),
        (None, None) => return Err(StandardizeError::Empty),
    };
    for (i, r) in rows.iter().enumerate() {
        if r.len() != width {
            return Err(StandardizeError::Width {
                row: i,
                got: r.len(),
                expected: width,
            });
        }
        if let Some(j) = r.iter().position(|v| !v.is_finite()) {
            return Err(StandardizeError::NonFinite {
                row: i,
                slot: slot_name(j),
            });
        }
    }
    let stats = match stats {
        Some(s) => s.clone(),
        None => {
            let n = rows.len() as f64;
            let mean: Vec<f64> = (0..width).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
            let sd = (0..width)
                .map(|j| {
                    let var = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                    let sd = var.sqrt();
                    if sd < MIN_SD {
                        1.0
                    } else {
                        sd
                    }
                })
                .collect();
            StandardizeStats { mean, sd }
        }
    };
    let out = rows
        .iter()
        .map(|r| r.iter().zip(&stats.mean).zip(&stats.sd).map(|((v, m), s)| (v - m) / s).collect())
        .collect();
    Ok((out, stats))
}

/// Writes a feature matrix with a `conversation_id,rating,<slots...>` header.
pub fn write_feature_csv<W: io::Write>(
    out: W,
    corpus: &[Conversation],
    vectors: &[FeatureVector],
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["conversation_id", "rating"];
    header.extend_from_slice(&FEATURE_NAMES);
    w.write_record(&header)?;
    for (conv, v) in corpus.iter().zip(vectors) {
        let mut rec = vec![conv.id.clone(), conv.rating.map(|r| r.to_string()).unwrap_or_default()];
        rec.extend(v.as_slice().iter().map(|x| x.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
