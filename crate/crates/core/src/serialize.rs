//! Conversational-flow token sequences.
//!
//! A turn becomes `[S] [RG_*] <system words> [U] [INT_*] <user words>` and a
//! conversation becomes `[CLS] [DEV_*] [DOM_*] T_1 ... T_n`, truncated to
//! `max_len` and padded with `[PAD]`.

use std::collections::{BTreeSet, HashMap};
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dialog::{Conversation, Device, Domain, Intent, Turn};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SYSTEM: &str = "[S]";
pub const USER: &str = "[U]";
pub const STEP: &str = "[STEP]";

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;

pub fn device_token(d: Device) -> String {
    format!("[DEV_{}]", d.label().to_uppercase())
}

pub fn domain_token(d: Domain) -> String {
    format!("[DOM_{}]", d.label().to_uppercase())
}

pub fn intent_token(i: Intent) -> String {
    format!("[INT_{}]", i.label().to_uppercase())
}

pub fn rg_token(name: &str) -> String {
    format!("[RG_{name}]")
}

fn fixed_specials() -> Vec<String> {
    let mut v: Vec<String> = [PAD, UNK, CLS, SYSTEM, USER, STEP].iter().map(|s| s.to_string()).collect();
    v.extend(Device::ALL.iter().map(|d| device_token(*d)));
    v.extend(Domain::ALL.iter().map(|d| domain_token(*d)));
    v.extend(Intent::ALL.iter().map(|i| intent_token(*i)));
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TruncationSide {
    /// Drop the oldest turn tokens, keeping the end of the conversation.
    #[default]
    Left,
    /// Drop from the end.
    Right,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SerializationConfig {
    pub max_len: usize,
    pub use_step_token: bool,
    /// Device, domain, intent and response-generator tokens.
    pub use_additional_tokens: bool,
    pub truncation_side: TruncationSide,
}

impl Default for SerializationConfig {
    fn default() -> Self {
        Self {
            max_len: 256,
            use_step_token: true,
            use_additional_tokens: true,
            truncation_side: TruncationSide::Left,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum VocabError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("vocabulary file is malformed: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Dense token-to-id map. Specials first, then response generators, then words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self, VocabError> {
        let specials = fixed_specials();
        if tokens.len() < specials.len() || tokens[..specials.len()] != specials[..] {
            return Err(VocabError::Malformed("missing or reordered special tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(VocabError::Malformed(format!("duplicate token {t}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Builds a vocabulary from (training) conversations. Words seen fewer than
    /// `min_freq` times are left out and map to `[UNK]`.
    pub fn build<'a, I>(corpus: I, config: &SerializationConfig, min_freq: usize) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = &'a Conversation>,
    {
        let mut rgs = BTreeSet::new();
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut n = 0usize;
        for conv in corpus {
            n += 1;
            for t in &conv.turns {
                rgs.insert(t.response_generator.as_str());
                let system_words = !(config.use_step_token && t.is_step_reading);
                let words = t
                    .user
                    .tokens()
                    .iter()
                    .chain(t.system.tokens().iter().filter(|_| system_words));
                for w in words {
                    *counts.entry(w.as_str()).or_default() += 1;
                }
            }
        }
        if n == 0 {
            return Err(VocabError::EmptyCorpus);
        }
        let mut words: Vec<(&str, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_freq.max(1)).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));

        let mut tokens = fixed_specials();
        tokens.extend(rgs.into_iter().map(rg_token));
        tokens.extend(words.into_iter().map(|(w, _)| w.to_owned()));
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Id of `token`, or `[UNK]`.
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, VocabError> {
        Self::from_tokens(text.lines().map(str::to_owned).collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    fn special(&self, token: &str) -> u32 {
        self.index[token]
    }
}

/// Padded id sequence plus its unpadded length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub attention_len: usize,
}

impl TokenSequence {
    /// The unpadded prefix.
    pub fn active(&self) -> &[u32] {
        &self.ids[..self.attention_len]
    }
}

pub fn serialize_turn(turn: &Turn, config: &SerializationConfig, vocab: &Vocabulary) -> Vec<u32> {
    let mut out = Vec::with_capacity(4 + turn.system.tokens().len() + turn.user.tokens().len());
    out.push(vocab.special(SYSTEM));
    if config.use_additional_tokens {
        out.push(vocab.id(&rg_token(&turn.response_generator)));
    }
    if config.use_step_token && turn.is_step_reading {
        out.push(vocab.special(STEP));
    } else {
        out.extend(turn.system.tokens().iter().map(|w| vocab.id(w)));
    }
    out.push(vocab.special(USER));
    if config.use_additional_tokens {
        out.push(vocab.special(&intent_token(turn.intent)));
    }
    out.extend(turn.user.tokens().iter().map(|w| vocab.id(w)));
    out
}

/// `[CLS]` plus, when enabled, the device and domain tokens.
pub fn prefix(conv: &Conversation, config: &SerializationConfig, vocab: &Vocabulary) -> Vec<u32> {
    let mut p = vec![CLS_ID];
    if config.use_additional_tokens {
        p.push(vocab.special(&device_token(conv.device)));
        p.push(vocab.special(&domain_token(conv.domain)));
    }
    p
}

/// Full sequence before truncation and padding.
pub fn serialize_untruncated(conv: &Conversation, config: &SerializationConfig, vocab: &Vocabulary) -> Vec<u32> {
    let mut ids = prefix(conv, config, vocab);
    for t in &conv.turns {
        ids.extend(serialize_turn(t, config, vocab));
    }
    ids
}

pub fn serialize_conversation(
    conv: &Conversation,
    config: &SerializationConfig,
    vocab: &Vocabulary,
) -> TokenSequence {
    let max_len = config.max_len;
    let prefix_len = prefix(conv, config, vocab).len();
    let mut ids = serialize_untruncated(conv, config, vocab);
    if ids.len() > max_len {
        match config.truncation_side {
            TruncationSide::Left => {
                let drop = ids.len() - max_len;
                ids.drain(prefix_len..prefix_len + drop);
            }
            TruncationSide::Right => ids.truncate(max_len),
        }
    }
    let attention_len = ids.len();
    ids.resize(max_len, PAD_ID);
    TokenSequence { ids, attention_len }
}

pub fn serialize_all(corpus: &[&Conversation], config: &SerializationConfig, vocab: &Vocabulary) -> Vec<TokenSequence> {
    crate::par::map(corpus, |c| serialize_conversation(c, config, vocab))
}
