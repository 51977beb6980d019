//! Reading and writing conversation logs, and deterministic corpus splits.
//!
//! The on-disk format is JSON lines, one conversation per line.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dialog::{
    validate, Conversation, Device, Domain, Intent, Phase, Turn, TurnFlags, Utterance, Violation,
};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: conversation {id} is invalid: {}", join_violations(.violations))]
    Invalid {
        line: usize,
        id: String,
        violations: Vec<Violation>,
    },
    #[error("corpus has {0} conversations, at least 3 are needed to split")]
    TooSmall(usize),
    #[error("split fractions must be positive and sum to 1, got {0:?}")]
    BadFractions([f64; 3]),
    #[error("duplicate conversation id {0}")]
    DuplicateId(String),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TurnRecord {
    user_text: String,
    system_text: String,
    intent: Intent,
    rg: String,
    phase: Phase,
    user_start_ms: i64,
    user_end_ms: i64,
    system_start_ms: i64,
    system_end_ms: i64,
    asr_score: f64,
    is_step_reading: bool,
    step_text: Option<String>,
    screen_id: Option<String>,
    #[serde(default, with = "sparse_flags")]
    flags: TurnFlags,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConversationRecord {
    id: String,
    device: Device,
    domain: Domain,
    resumed: bool,
    rating: Option<i64>,
    turns: Vec<TurnRecord>,
}

/// Flags are written sparsely: only `true` entries appear in the log.
mod sparse_flags {
    use super::TurnFlags;
    use serde::ser::SerializeMap;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(flags: &TurnFlags, s: S) -> Result<S::Ok, S::Error> {
        let entries = super::flag_entries(flags);
        let set: Vec<_> = entries.iter().filter(|(_, v)| *v).collect();
        let mut map = s.serialize_map(Some(set.len()))?;
        for (k, _) in set {
            map.serialize_entry(k, &true)?;
        }
        map.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<TurnFlags, D::Error> {
        TurnFlags::deserialize(d)
    }
}

fn flag_entries(f: &TurnFlags) -> [(&'static str, bool); 10] {
    [
        ("offensive", f.offensive),
        ("sensitive", f.sensitive),
        ("search_request", f.search_request),
        ("result_page_shown", f.result_page_shown),
        ("curiosity_said", f.curiosity_said),
        ("curiosity_accepted", f.curiosity_accepted),
        ("curiosity_denied", f.curiosity_denied),
        ("task_started", f.task_started),
        ("task_finished", f.task_finished),
        ("fallback", f.fallback),
    ]
}

const CONVERSATION_KEYS: &[&str] = &["id", "device", "domain", "resumed", "rating", "turns"];
const TURN_KEYS: &[&str] = &[
    "user_text",
    "system_text",
    "intent",
    "rg",
    "phase",
    "user_start_ms",
    "user_end_ms",
    "system_start_ms",
    "system_end_ms",
    "asr_score",
    "is_step_reading",
    "step_text",
    "screen_id",
    "flags",
];
const FLAG_KEYS: &[&str] = &[
    "offensive",
    "sensitive",
    "search_request",
    "result_page_shown",
    "curiosity_said",
    "curiosity_accepted",
    "curiosity_denied",
    "task_started",
    "task_finished",
    "fallback",
];

impl From<&Conversation> for ConversationRecord {
    fn from(c: &Conversation) -> Self {
        Self {
            id: c.id.clone(),
            device: c.device,
            domain: c.domain,
            resumed: c.resumed,
            rating: c.rating.map(i64::from),
            turns: c
                .turns
                .iter()
                .map(|t| TurnRecord {
                    user_text: t.user.text().to_owned(),
                    system_text: t.system.text().to_owned(),
                    intent: t.intent,
                    rg: t.response_generator.clone(),
                    phase: t.phase,
                    user_start_ms: t.user_start_ms,
                    user_end_ms: t.user_end_ms,
                    system_start_ms: t.system_start_ms,
                    system_end_ms: t.system_end_ms,
                    asr_score: t.asr_score,
                    is_step_reading: t.is_step_reading,
                    step_text: t.step_text.clone(),
                    screen_id: t.screen_id.clone(),
                    flags: t.flags,
                })
                .collect(),
        }
    }
}

impl ConversationRecord {
    fn into_conversation(self) -> Conversation {
        // Out-of-range ratings are kept (saturated into u8) so that validation reports them.
        let rating = self.rating.map(|r| r.clamp(0, u8::MAX as i64) as u8);
        Conversation {
            id: self.id,
            device: self.device,
            domain: self.domain,
            resumed: self.resumed,
            rating,
            turns: self
                .turns
                .into_iter()
                .enumerate()
                .map(|(index, t)| Turn {
                    index,
                    user: Utterance::new(t.user_text),
                    system: Utterance::new(t.system_text),
                    intent: t.intent,
                    response_generator: t.rg,
                    phase: t.phase,
                    user_start_ms: t.user_start_ms,
                    user_end_ms: t.user_end_ms,
                    system_start_ms: t.system_start_ms,
                    system_end_ms: t.system_end_ms,
                    asr_score: t.asr_score,
                    is_step_reading: t.is_step_reading,
                    step_text: t.step_text,
                    screen_id: t.screen_id,
                    flags: t.flags,
                })
                .collect(),
        }
    }
}

/// How to treat keys that are not part of the log schema.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum KeyPolicy {
    #[default]
    Strict,
    /// Drop unknown keys with a warning.
    Lenient,
}

fn strip_unknown(map: &mut serde_json::Map<String, serde_json::Value>, known: &[&str], line: usize, ctx: &str) {
    let unknown: Vec<String> = map
        .keys()
        .filter(|k| !known.contains(&k.as_str()))
        .cloned()
        .collect();
    for k in unknown {
        log::warn!("line {line}: ignoring unknown key `{k}` in {ctx}");
        map.remove(&k);
    }
}

fn strip_unknown_keys(value: &mut serde_json::Value, line: usize) {
    let Some(obj) = value.as_object_mut() else {
        return;
    };
    strip_unknown(obj, CONVERSATION_KEYS, line, "conversation");
    if let Some(turns) = obj.get_mut("turns").and_then(|t| t.as_array_mut()) {
        for turn in turns {
            if let Some(t) = turn.as_object_mut() {
                strip_unknown(t, TURN_KEYS, line, "turn");
                if let Some(flags) = t.get_mut("flags").and_then(|f| f.as_object_mut()) {
                    strip_unknown(flags, FLAG_KEYS, line, "flags");
                }
            }
        }
    }
}

/// Parses one log line (1-based `line` for error reporting) and validates it.
pub fn parse_line(text: &str, line: usize, keys: KeyPolicy) -> Result<Conversation, CorpusError> {
    let parse_err = |e: serde_json::Error| CorpusError::Parse {
        line,
        message: e.to_string(),
    };
    let record: ConversationRecord = match keys {
        KeyPolicy::Strict => serde_json::from_str(text).map_err(parse_err)?,
        KeyPolicy::Lenient => {
            let mut value: serde_json::Value = serde_json::from_str(text).map_err(parse_err)?;
            strip_unknown_keys(&mut value, line);
            serde_json::from_value(value).map_err(parse_err)?
        }
    };
    let conv = record.into_conversation();
    let violations = validate(&conv);
    if !violations.is_empty() {
        return Err(CorpusError::Invalid {
            line,
            id: conv.id,
            violations,
        });
    }
    for w in crate::dialog::consistency_warnings(&conv) {
        log::warn!("line {line}: conversation {}: {w}", conv.id);
    }
    Ok(conv)
}

/// Serializes a conversation as one log line (no trailing newline).
pub fn to_line(conv: &Conversation) -> String {
    serde_json::to_string(&ConversationRecord::from(conv)).expect("record serialization is infallible")
}

pub fn read_corpus(path: &Path) -> Result<Vec<Conversation>, CorpusError> {
    read_corpus_with(path, KeyPolicy::Strict)
}

pub fn read_corpus_with(path: &Path, keys: KeyPolicy) -> Result<Vec<Conversation>, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_owned(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let mut lines = Vec::new();
    for line in BufReader::new(file).lines() {
        lines.push(line.map_err(io_err)?);
    }
    parse_lines(&lines, keys)
}

fn parse_lines(lines: &[String], keys: KeyPolicy) -> Result<Vec<Conversation>, CorpusError> {
    let numbered: Vec<(usize, &String)> = lines
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l))
        .collect();
    // Results are collected in line order, so the first error reported is the earliest one.
    let parsed: Vec<Result<Conversation, CorpusError>> =
        crate::par::map(&numbered, |(n, l)| parse_line(l, *n, keys));
    parsed.into_iter().collect()
}

pub fn write_corpus(path: &Path, corpus: &[Conversation]) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_owned(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for conv in corpus {
        writeln!(out, "{}", to_line(conv)).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Keeps rated conversations with at least `min_turns` turns, in input order.
pub fn filter_rated(corpus: &[Conversation], min_turns: usize) -> Vec<Conversation> {
    corpus
        .iter()
        .filter(|c| c.rating.is_some() && c.turns.len() >= min_turns)
        .cloned()
        .collect()
}

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.8, 0.1, 0.1];

/// Train/validation/test partition by conversation id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
    pub fractions: [f64; 3],
}

/// Shuffles with a seeded uniform permutation and cuts it into three parts.
///
/// Validation and test sizes are `floor(n * fraction)` (at least one each);
/// the remainder goes to training.
pub fn split(corpus: &[Conversation], seed: u64, fractions: [f64; 3]) -> Result<CorpusSplit, CorpusError> {
    if fractions.iter().any(|f| !(f.is_finite() && *f > 0.0))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(CorpusError::BadFractions(fractions));
    }
    let n = corpus.len();
    if n < 3 {
        return Err(CorpusError::TooSmall(n));
    }
    let mut seen = HashSet::with_capacity(n);
    for c in corpus {
        if !seen.insert(c.id.as_str()) {
            return Err(CorpusError::DuplicateId(c.id.clone()));
        }
    }

    let mut ids: Vec<String> = corpus.iter().map(|c| c.id.clone()).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let n_val = ((n as f64 * fractions[1]).floor() as usize).max(1);
    let n_test = ((n as f64 * fractions[2]).floor() as usize).max(1);
    let n_train = n - n_val - n_test;
    let test = ids.split_off(n_train + n_val);
    let validation = ids.split_off(n_train);
    Ok(CorpusSplit {
        train: ids,
        validation,
        test,
        seed,
        fractions,
    })
}

impl CorpusSplit {
    /// Resolves the id lists against `corpus`, preserving split order.
    pub fn resolve<'a>(&self, corpus: &'a [Conversation]) -> [Vec<&'a Conversation>; 3] {
        let by_id: std::collections::HashMap<&str, &Conversation> =
            corpus.iter().map(|c| (c.id.as_str(), c)).collect();
        let pick = |ids: &[String]| ids.iter().filter_map(|id| by_id.get(id.as_str()).copied()).collect();
        [pick(&self.train), pick(&self.validation), pick(&self.test)]
    }
}
