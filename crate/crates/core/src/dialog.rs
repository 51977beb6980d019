//! Conversation domain types shared by every stage of the pipeline.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Canonical word tokenizer.
///
/// Lowercases, splits on anything that is not alphanumeric and drops the
/// separators. Deterministic and total.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase().filter(|c| c.is_alphanumeric()));
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// A surface utterance together with its cached canonical tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    text: String,
    tokens: Vec<String>,
}

impl Utterance {
    pub fn new(text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        Self { text, tokens }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

macro_rules! labelled_enum {
    (
        $(#[$meta:meta])*
        $name:ident { $($variant:ident => $label:literal),+ $(,)? }
    ) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            /// Lower snake-case name used in logs and feature names.
            pub fn label(self) -> &'static str {
                match self {
                    $($name::$variant => $label),+
                }
            }

            pub fn from_label(label: &str) -> Option<Self> {
                match label {
                    $($label => Some($name::$variant),)+
                    _ => None,
                }
            }

            pub fn index(self) -> usize {
                self as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.label())
            }
        }
    };
}

labelled_enum! {
    /// User intent as labelled in the interaction log.
    Intent {
        Search => "search",
        NoneOfThese => "none_of_these",
        Cancel => "cancel",
        Yes => "yes",
        No => "no",
        Ingredients => "ingredients",
        StartCooking => "start_cooking",
        StartSteps => "start_steps",
        Next => "next",
        NextStep => "next_step",
        MoreDetail => "more_detail",
        TerminateTask => "terminate_task",
        Help => "help",
        Repeat => "repeat",
        Fallback => "fallback",
    }
}

labelled_enum! {
    /// Coarse dialog stage.
    Phase {
        Greeting => "greeting",
        Search => "search",
        TaskOverview => "task_overview",
        Ingredients => "ingredients",
        Steps => "steps",
        StepDetail => "step_detail",
        Conclusion => "conclusion",
    }
}

labelled_enum! {
    /// Task domain of the session.
    Domain {
        None => "none",
        Recipe => "recipe",
        Diy => "diy",
    }
}

labelled_enum! {
    Device {
        Headless => "headless",
        Screen => "screen",
    }
}

impl Domain {
    /// Numeric encoding used by the `domain` feature slot.
    pub fn code(self) -> f64 {
        self.index() as f64
    }
}

/// Per-turn boolean annotations carried in the log.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TurnFlags {
    pub offensive: bool,
    pub sensitive: bool,
    pub search_request: bool,
    pub result_page_shown: bool,
    pub curiosity_said: bool,
    pub curiosity_accepted: bool,
    pub curiosity_denied: bool,
    pub task_started: bool,
    pub task_finished: bool,
    pub fallback: bool,
}

/// One user/system exchange. The user speaks first, the system answers.
#[derive(Debug, Clone, PartialEq)]
pub struct Turn {
    pub index: usize,
    pub user: Utterance,
    pub system: Utterance,
    pub intent: Intent,
    pub response_generator: String,
    pub phase: Phase,
    pub user_start_ms: i64,
    pub user_end_ms: i64,
    pub system_start_ms: i64,
    pub system_end_ms: i64,
    pub asr_score: f64,
    pub is_step_reading: bool,
    pub step_text: Option<String>,
    pub screen_id: Option<String>,
    pub flags: TurnFlags,
}

impl Turn {
    /// Wall-clock span of the exchange, in seconds.
    pub fn duration_s(&self) -> f64 {
        (self.system_end_ms - self.user_start_ms) as f64 / 1000.0
    }

    /// Time the system took to start answering after the user stopped.
    pub fn system_latency_s(&self) -> f64 {
        (self.system_start_ms - self.user_end_ms) as f64 / 1000.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conversation {
    pub id: String,
    pub device: Device,
    pub domain: Domain,
    pub resumed: bool,
    pub turns: Vec<Turn>,
    pub rating: Option<u8>,
}

impl Conversation {
    pub fn final_turn(&self) -> Option<&Turn> {
        self.turns.last()
    }

    /// Gap between the previous system response and the user's start of turn `i`.
    /// Zero for the first turn.
    pub fn user_latency_s(&self, i: usize) -> f64 {
        if i == 0 {
            return 0.0;
        }
        (self.turns[i].user_start_ms - self.turns[i - 1].system_end_ms) as f64 / 1000.0
    }
}

/// A single broken invariant found by [`validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub turn: Option<usize>,
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.turn {
            Some(t) => write!(f, "turn {t}: {}: {}", self.field, self.message),
            None => write!(f, "{}: {}", self.field, self.message),
        }
    }
}

/// Collects every invariant violation of `conv`. Empty iff the conversation is valid.
pub fn validate(conv: &Conversation) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |turn: Option<usize>, field: &'static str, message: String| {
        out.push(Violation {
            turn,
            field,
            message,
        })
    };

    if conv.id.is_empty() {
        push(None, "id", "empty conversation id".into());
    }
    if let Some(r) = conv.rating {
        if !(1..=5).contains(&r) {
            push(None, "rating", format!("rating {r} outside 1..=5"));
        }
    }
    if conv.turns.is_empty() {
        push(None, "turns", "conversation has no turns".into());
    }

    for (pos, turn) in conv.turns.iter().enumerate() {
        let t = Some(pos);
        if turn.index != pos {
            push(
                t,
                "index",
                format!("expected index {pos}, found {}", turn.index),
            );
        }
        if turn.user_start_ms > turn.user_end_ms {
            push(t, "user_end_ms", "user_end_ms precedes user_start_ms".into());
        }
        if turn.user_end_ms > turn.system_start_ms {
            push(
                t,
                "system_start_ms",
                "system_start_ms precedes user_end_ms".into(),
            );
        }
        if turn.system_start_ms > turn.system_end_ms {
            push(
                t,
                "system_end_ms",
                "system_end_ms precedes system_start_ms".into(),
            );
        }
        if !(turn.asr_score.is_finite() && (0.0..=1.0).contains(&turn.asr_score)) {
            push(
                t,
                "asr_score",
                format!("asr_score {} outside [0, 1]", turn.asr_score),
            );
        }
        if turn.is_step_reading != turn.step_text.is_some() {
            push(
                t,
                "step_text",
                "step_text must be present iff is_step_reading".into(),
            );
        }
        if turn.response_generator.is_empty() {
            push(t, "rg", "empty response generator".into());
        }
        if pos > 0 {
            let prev = &conv.turns[pos - 1];
            if turn.user_start_ms < prev.system_end_ms {
                push(
                    t,
                    "user_start_ms",
                    format!(
                        "user_start_ms {} earlier than previous system_end_ms {}",
                        turn.user_start_ms, prev.system_end_ms
                    ),
                );
            }
        }
    }
    out
}

/// Soft consistency checks that do not make a conversation invalid.
pub fn consistency_warnings(conv: &Conversation) -> Vec<Violation> {
    conv.turns
        .iter()
        .filter(|t| (t.intent == Intent::Fallback) != t.flags.fallback)
        .map(|t| Violation {
            turn: Some(t.index),
            field: "intent",
            message: "fallback intent and fallback flag disagree".into(),
        })
        .collect()
}
