//! Synthetic task-assistant conversations with a planted rating mechanism.
//!
//! Each conversation walks a Markov chain over dialog phases, draws intents,
//! flags and templated utterances per phase, and is then rated by thresholding
//!
//! ```text
//! latent = Σ_f w_f · feature_f(conversation) + cue_weight · cue + ε,   ε ~ N(0, noise_sd)
//! ```
//!
//! where the features are the extracted behavioral vector and `cue` is an
//! optional ±1 value carried only by word choice in the user text.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dialog::{tokenize, Conversation, Device, Domain, Intent, Phase, Turn, TurnFlags, Utterance};
use crate::features::{extract, feature_index, Lexicons};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("conversation {0} has no rating")]
    Unrated(String),
    #[error("unknown preset {0:?} (expected default, fusion or truncation)")]
    UnknownPreset(String),
}

/// Truncated normal over turn counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TurnCountDistribution {
    pub mean: f64,
    pub sd: f64,
    pub min: usize,
    pub max: usize,
}

impl Default for TurnCountDistribution {
    fn default() -> Self {
        Self {
            mean: 9.5,
            sd: 6.8,
            min: 3,
            max: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CuePosition {
    /// The first two user utterances.
    Opening,
    /// The last two user utterances.
    Closing,
}

/// A hidden ±1 signal expressed by which cue word is appended to user text.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextCue {
    pub weight: f64,
    pub position: CuePosition,
}

/// Utterance material the generator draws from.
///
/// `{task}` in a template is replaced by the conversation's task word.
/// Keys of `user` are intent labels and keys of `system` are phase labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplateBank {
    pub user: BTreeMap<String, Vec<String>>,
    pub system: BTreeMap<String, Vec<String>>,
    pub steps: Vec<String>,
    pub recipe_tasks: Vec<String>,
    pub diy_tasks: Vec<String>,
    pub fallback_responses: Vec<String>,
    pub curiosities: Vec<String>,
    pub positive_interjections: Vec<String>,
    pub negative_interjections: Vec<String>,
    /// Word pairs swapped freely in user text.
    pub synonyms: Vec<(String, String)>,
    /// Correct word and its misrecognition.
    pub asr_confusions: Vec<(String, String)>,
    pub cue_positive: Vec<String>,
    pub cue_negative: Vec<String>,
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn pairs(items: &[(&str, &str)]) -> Vec<(String, String)> {
    items.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
}

impl Default for TemplateBank {
    fn default() -> Self {
        let user: BTreeMap<String, Vec<String>> = [
            (Intent::Search, &["how do i make {task}", "search for {task}", "find {task} instructions", "show me {task} ideas", "i want to dye my {task}"][..]),
            (Intent::NoneOfThese, &["none of these", "something else please", "show me other options"]),
            (Intent::Cancel, &["cancel", "stop that", "never mind"]),
            (Intent::Yes, &["yes", "yes please", "sure", "okay"]),
            (Intent::No, &["no", "no thanks", "not now"]),
            (Intent::Ingredients, &["what are the ingredients", "what do i need", "how much flour do i need", "list the tools"]),
            (Intent::StartCooking, &["start cooking", "lets start", "i am ready to begin"]),
            (Intent::StartSteps, &["start the steps", "read the steps now", "show me the first step"]),
            (Intent::Next, &["next", "next one", "continue", "go on"]),
            (Intent::NextStep, &["next step", "what is the next step", "go to the next step"]),
            (Intent::MoreDetail, &["tell me more", "more details please", "explain that step", "do i knead it"]),
            (Intent::TerminateTask, &["stop the task", "i am done", "finish the task"]),
            (Intent::Help, &["help", "what can you do", "how does this work"]),
            (Intent::Repeat, &["repeat that", "say that again", "can you repeat"]),
            (Intent::Fallback, &["uh what about the", "play some music", "what time is it", "is it a whole one"]),
        ]
        .into_iter()
        .map(|(i, t)| (i.label().to_string(), strings(t)))
        .collect();
        let system: BTreeMap<String, Vec<String>> = [
            (Phase::Greeting, &["hi i can help you cook or fix things what would you like to do", "welcome what task can i help with today"][..]),
            (Phase::Search, &["here are some {task} results", "i found a few options for {task}", "which {task} would you like"]),
            (Phase::TaskOverview, &["this {task} takes about thirty minutes", "the {task} has a few simple steps", "shall we get started with the {task}"]),
            (Phase::Ingredients, &["you will need flour eggs and milk", "you need a drill some screws and a level", "here is everything you need for the {task}"]),
            (Phase::Steps, &["ready when you are", "say next when you want to continue"]),
            (Phase::StepDetail, &["take your time and be careful with this step", "make sure everything is measured before you continue"]),
            (Phase::Conclusion, &["well done you finished the {task}", "enjoy and thanks for working with me", "goodbye and see you next time"]),
        ]
        .into_iter()
        .map(|(p, t)| (p.label().to_string(), strings(t)))
        .collect();
        Self {
            user,
            system,
            steps: strings(&[
                "preheat the oven to two hundred degrees",
                "whisk the eggs and milk together",
                "mix in the flour slowly",
                "measure and mark the wall",
                "drill the pilot holes",
                "sand the edges until smooth",
                "apply the dye evenly",
                "let it rest for ten minutes",
                "pour the mixture into the pan",
                "tighten every screw by hand",
            ]),
            recipe_tasks: strings(&["pancakes", "lasagna", "risotto", "brownies", "curry", "omelette", "bread", "salad"]),
            diy_tasks: strings(&["shelf", "fence", "bookcase", "birdhouse", "lamp", "table", "hair", "wallpaper"]),
            fallback_responses: strings(&["sorry i can not help with that", "i did not understand that"]),
            curiosities: strings(&[
                "here is a fun fact honey never spoils want to hear another",
                "did you know the first hammer was a stone want another fact",
            ]),
            positive_interjections: strings(&["thanks", "great", "awesome", "perfect"]),
            negative_interjections: strings(&["ugh", "this is useless", "wrong", "that is bad"]),
            synonyms: pairs(&[("make", "cook"), ("find", "get"), ("show", "give"), ("start", "begin")]),
            asr_confusions: pairs(&[
                ("dye", "die"),
                ("flour", "flower"),
                ("knead", "need"),
                ("whole", "hole"),
                ("steps", "stepped"),
                ("next", "text"),
            ]),
            cue_positive: strings(&["amber", "cobalt", "jade", "ivory"]),
            cue_negative: strings(&["crimson", "maroon", "slate", "teal"]),
        }
    }
}

impl TemplateBank {
    fn user_for(&self, intent: Intent) -> &[String] {
        self.user.get(intent.label()).map(Vec::as_slice).unwrap_or(&[])
    }

    fn system_for(&self, phase: Phase) -> &[String] {
        self.system.get(phase.label()).map(Vec::as_slice).unwrap_or(&[])
    }

    fn all_text(&self) -> impl Iterator<Item = &String> {
        self.user
            .values()
            .chain(self.system.values())
            .flatten()
            .chain(&self.steps)
            .chain(&self.recipe_tasks)
            .chain(&self.diy_tasks)
            .chain(&self.fallback_responses)
            .chain(&self.curiosities)
            .chain(&self.positive_interjections)
            .chain(&self.negative_interjections)
            .chain(self.synonyms.iter().flat_map(|(a, b)| [a, b]))
            .chain(self.asr_confusions.iter().flat_map(|(a, b)| [a, b]))
    }

    fn validate(&self, lexicons: &Lexicons) -> Result<(), String> {
        for intent in Intent::ALL {
            if self.user_for(*intent).is_empty() {
                return Err(format!("no user templates for intent {intent}"));
            }
        }
        for phase in Phase::ALL {
            if self.system_for(*phase).is_empty() {
                return Err(format!("no system templates for phase {phase}"));
            }
        }
        for key in self.user.keys() {
            if Intent::from_label(key).is_none() {
                return Err(format!("unknown intent {key:?} in user templates"));
            }
        }
        for key in self.system.keys() {
            if Phase::from_label(key).is_none() {
                return Err(format!("unknown phase {key:?} in system templates"));
            }
        }
        let non_empty = [
            ("steps", &self.steps),
            ("recipe_tasks", &self.recipe_tasks),
            ("diy_tasks", &self.diy_tasks),
            ("fallback_responses", &self.fallback_responses),
            ("curiosities", &self.curiosities),
            ("positive_interjections", &self.positive_interjections),
            ("negative_interjections", &self.negative_interjections),
            ("cue_positive", &self.cue_positive),
            ("cue_negative", &self.cue_negative),
        ];
        for (name, list) in non_empty {
            if list.is_empty() {
                return Err(format!("{name} is empty"));
            }
        }
        for task in self.recipe_tasks.iter().chain(&self.diy_tasks) {
            if tokenize(task).len() != 1 {
                return Err(format!("task {task:?} must be a single word"));
            }
        }
        if self.cue_positive.len() != self.cue_negative.len() {
            return Err("cue word lists must have equal length".into());
        }
        let used: std::collections::HashSet<String> = self.all_text().flat_map(|t| tokenize(t)).collect();
        for word in self.cue_positive.iter().chain(&self.cue_negative) {
            let toks = tokenize(word);
            if toks.len() != 1 || toks[0] != *word {
                return Err(format!("cue word {word:?} must be a single lowercase token"));
            }
            if used.contains(word) || lexicons.positive.contains(word) || lexicons.negative.contains(word) {
                return Err(format!("cue word {word:?} also occurs in templates or lexicons"));
            }
        }
        let mut all_cues: Vec<&String> = self.cue_positive.iter().chain(&self.cue_negative).collect();
        all_cues.sort();
        all_cues.dedup();
        if all_cues.len() != self.cue_positive.len() * 2 {
            return Err("cue words must be distinct".into());
        }
        Ok(())
    }
}

/// Ratings cut points tuned once so that the default corpus has roughly the
/// 19.6 / 11.8 / 13.3 / 17.2 / 38.2 % rating proportions of the reference data.
pub const DEFAULT_THRESHOLDS: [f64; 4] = [-2.072, -1.285, -0.427, 0.845];

pub fn default_planted_weights() -> BTreeMap<String, f64> {
    [
        ("finished_task", 2.0),
        ("started_task", 1.0),
        ("steps_read", 0.3),
        ("intent_next_step", 0.4),
        ("fallback_exceptions", -0.8),
        ("searches", -0.5),
        ("avg_system_word_overlap", -3.0),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub n_conversations: usize,
    pub turns: TurnCountDistribution,
    pub planted_weights: BTreeMap<String, f64>,
    pub rating_thresholds: [f64; 4],
    pub noise_sd: f64,
    pub text_cue: Option<TextCue>,
    /// Range of the per-conversation mean system latency in seconds.
    pub system_latency_s: [f64; 2],
    /// Upper bound of the per-conversation fallback probability.
    pub max_fallback_rate: f64,
    pub templates: TemplateBank,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            n_conversations: 1000,
            turns: TurnCountDistribution::default(),
            planted_weights: default_planted_weights(),
            rating_thresholds: DEFAULT_THRESHOLDS,
            noise_sd: 0.25,
            text_cue: None,
            system_latency_s: [0.3, 2.5],
            max_fallback_rate: 0.35,
            templates: TemplateBank::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Default,
    Fusion,
    Truncation,
}

impl Preset {
    pub fn from_name(name: &str) -> Result<Self, SynthError> {
        match name {
            "default" => Ok(Preset::Default),
            "fusion" => Ok(Preset::Fusion),
            "truncation" => Ok(Preset::Truncation),
            other => Err(SynthError::UnknownPreset(other.to_string())),
        }
    }

    pub fn config(self) -> GeneratorConfig {
        match self {
            Preset::Default => GeneratorConfig::default(),
            Preset::Fusion => GeneratorConfig::fusion(),
            Preset::Truncation => GeneratorConfig::truncation(),
        }
    }
}

impl GeneratorConfig {
    /// Rating driven by mean system latency (absent from the text) and a
    /// closing text cue (absent from the behavioral features) in equal parts.
    pub fn fusion() -> Self {
        Self {
            n_conversations: 600,
            turns: TurnCountDistribution {
                mean: 4.5,
                sd: 1.0,
                min: 3,
                max: 6,
            },
            planted_weights: [("avg_system_latency_s".to_string(), -1.0)].into_iter().collect(),
            rating_thresholds: [-2.75, -2.25, -1.75, -1.25],
            noise_sd: 0.0,
            text_cue: Some(TextCue {
                weight: 0.625,
                position: CuePosition::Closing,
            }),
            system_latency_s: [0.5, 3.0],
            ..Self::default()
        }
    }

    /// Long conversations rated almost entirely by a cue in the last two user turns.
    pub fn truncation() -> Self {
        Self {
            n_conversations: 600,
            turns: TurnCountDistribution {
                mean: 14.0,
                sd: 3.0,
                min: 10,
                max: 20,
            },
            planted_weights: BTreeMap::new(),
            rating_thresholds: [-1.2, -0.6, 0.0, 0.6],
            noise_sd: 0.3,
            text_cue: Some(TextCue {
                weight: 1.0,
                position: CuePosition::Closing,
            }),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.n_conversations == 0 {
            return bad("n_conversations must be at least 1".into());
        }
        if !self.rating_thresholds.windows(2).all(|w| w[0] < w[1]) || self.rating_thresholds.iter().any(|t| !t.is_finite())
        {
            return bad(format!("thresholds {:?} must be finite and strictly ascending", self.rating_thresholds));
        }
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return bad(format!("noise_sd {} must be finite and non-negative", self.noise_sd));
        }
        let t = &self.turns;
        if t.min == 0 || t.min > t.max || !(t.sd.is_finite() && t.sd >= 0.0) || !t.mean.is_finite() {
            return bad(format!("bad turn distribution {t:?}"));
        }
        for (name, w) in &self.planted_weights {
            if feature_index(name).is_none() {
                return bad(format!("planted weight on unknown feature {name:?}"));
            }
            if !w.is_finite() {
                return bad(format!("planted weight for {name} is not finite"));
            }
        }
        let [lo, hi] = self.system_latency_s;
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
            return bad(format!("bad system latency range {:?}", self.system_latency_s));
        }
        if !(0.0..=1.0).contains(&self.max_fallback_rate) {
            return bad(format!("max_fallback_rate {} outside [0, 1]", self.max_fallback_rate));
        }
        if let Some(cue) = &self.text_cue {
            if !cue.weight.is_finite() {
                return bad("cue weight is not finite".into());
            }
        }
        self.templates.validate(&Lexicons::shipped()).map_err(SynthError::Config)
    }
}

/// Deterministic per-item seed derived from a base seed (SplitMix64 finalizer).
pub fn sub_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Rating band: one plus the number of thresholds at or below the score.
pub fn rating_band(latent: f64, thresholds: &[f64; 4]) -> u8 {
    1 + thresholds.iter().filter(|t| latent >= **t).count() as u8
}

/// The ±1 cue carried by a conversation, if any cue word is present at the
/// configured position.
pub fn cue_value(conv: &Conversation, bank: &TemplateBank, position: CuePosition) -> Option<f64> {
    let n = conv.turns.len();
    let range = match position {
        CuePosition::Opening => 0..n.min(2),
        CuePosition::Closing => n.saturating_sub(2)..n,
    };
    for t in &conv.turns[range] {
        for tok in t.user.tokens() {
            if bank.cue_positive.contains(tok) {
                return Some(1.0);
            }
            if bank.cue_negative.contains(tok) {
                return Some(-1.0);
            }
        }
    }
    None
}

/// Noise-free latent score recomputed from the emitted log.
pub fn latent_score(conv: &Conversation, config: &GeneratorConfig, lexicons: &Lexicons) -> f64 {
    let features = extract(conv, lexicons);
    let mut score: f64 = config
        .planted_weights
        .iter()
        .map(|(name, w)| w * features.get(name).expect("validated feature name"))
        .sum();
    if let Some(cue) = &config.text_cue {
        score += cue.weight * cue_value(conv, &config.templates, cue.position).unwrap_or(0.0);
    }
    score
}

/// Generates `config.n_conversations` rated conversations.
pub fn generate(config: &GeneratorConfig) -> Result<Vec<Conversation>, SynthError> {
    config.validate()?;
    let lexicons = Lexicons::shipped();
    Ok(crate::par::map_range(config.n_conversations, |i| generate_one(config, i, &lexicons)))
}

/// Generates the conversation at `index` alone. The result equals element
/// `index` of [`generate`]; `config` is assumed to be valid.
pub fn generate_one(config: &GeneratorConfig, index: usize, lexicons: &Lexicons) -> Conversation {
    let noise = Normal::new(0.0, config.noise_sd).expect("validated noise_sd");
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, index as u64));
    let mut conv = ConversationBuilder::new(config, index, &mut rng).build();
    let latent = latent_score(&conv, config, lexicons) + noise.sample(&mut rng);
    conv.rating = Some(rating_band(latent, &config.rating_thresholds));
    conv
}

/// Count per rating value 1..=5; every key is present.
pub fn default_rating_histogram(corpus: &[Conversation]) -> Result<BTreeMap<u8, usize>, SynthError> {
    let mut hist: BTreeMap<u8, usize> = (1..=5).map(|r| (r, 0)).collect();
    for c in corpus {
        let r = c.rating.ok_or_else(|| SynthError::Unrated(c.id.clone()))?;
        *hist.entry(r).or_insert(0) += 1;
    }
    Ok(hist)
}

/// Thresholds placing the given cumulative proportions of `latents` in each band.
pub fn calibrate_thresholds(latents: &[f64], proportions: [f64; 5]) -> [f64; 4] {
    let mut sorted = latents.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite latents"));
    let total: f64 = proportions.iter().sum();
    let mut cum = 0.0;
    let mut out = [0.0; 4];
    for (k, slot) in out.iter_mut().enumerate() {
        cum += proportions[k] / total;
        let pos = ((cum * sorted.len() as f64).round() as usize).clamp(1, sorted.len() - 1);
        *slot = 0.5 * (sorted[pos - 1] + sorted[pos]);
    }
    out
}

const BASE_EPOCH_MS: i64 = 1_650_000_000_000;

fn next_phase<R: Rng>(phase: Phase, rng: &mut R) -> Phase {
    use Phase::*;
    let table: &[(Phase, f64)] = match phase {
        Greeting => &[(Search, 0.85), (Greeting, 0.15)],
        Search => &[(Search, 0.3), (TaskOverview, 0.6), (Conclusion, 0.1)],
        TaskOverview => &[(Ingredients, 0.45), (Steps, 0.35), (Search, 0.2)],
        Ingredients => &[(Ingredients, 0.3), (Steps, 0.6), (Search, 0.1)],
        Steps => &[(Steps, 0.7), (StepDetail, 0.15), (Conclusion, 0.1), (Search, 0.05)],
        StepDetail => &[(Steps, 0.7), (StepDetail, 0.2), (Conclusion, 0.1)],
        Conclusion => &[(Conclusion, 0.5), (Search, 0.5)],
    };
    pick_weighted(table, rng)
}

fn phase_intent<R: Rng>(phase: Phase, rng: &mut R) -> Intent {
    use Intent::*;
    let table: &[(Intent, f64)] = match phase {
        Phase::Greeting => &[(Help, 0.3), (Yes, 0.4), (No, 0.3)],
        Phase::Search => &[(Search, 0.7), (NoneOfThese, 0.2), (Cancel, 0.1)],
        Phase::TaskOverview => &[(Yes, 0.4), (Ingredients, 0.3), (StartSteps, 0.3)],
        Phase::Ingredients => &[(Ingredients, 0.5), (Repeat, 0.2), (StartCooking, 0.3)],
        Phase::Steps => &[(Next, 0.4), (NextStep, 0.35), (Repeat, 0.1), (StartSteps, 0.15)],
        Phase::StepDetail => &[(MoreDetail, 0.7), (Help, 0.3)],
        Phase::Conclusion => &[(TerminateTask, 0.5), (Yes, 0.25), (No, 0.25)],
    };
    pick_weighted(table, rng)
}

fn pick_weighted<T: Copy, R: Rng>(table: &[(T, f64)], rng: &mut R) -> T {
    let total: f64 = table.iter().map(|(_, w)| w).sum();
    let mut x = rng.gen::<f64>() * total;
    for (item, w) in table {
        if x < *w {
            return *item;
        }
        x -= w;
    }
    table[table.len() - 1].0
}

fn pick<'a, R: Rng>(items: &'a [String], rng: &mut R) -> &'a str {
    items.choose(rng).map(String::as_str).expect("validated non-empty list")
}

fn fill(template: &str, task: &str) -> String {
    template.replace("{task}", task)
}

fn words_ms<R: Rng>(text: &str, per_word_ms: i64, rng: &mut R) -> i64 {
    let words = tokenize(text).len().max(1) as i64;
    words * per_word_ms + rng.gen_range(100..600)
}

struct ConversationBuilder<'a, R: Rng> {
    config: &'a GeneratorConfig,
    bank: &'a TemplateBank,
    rng: &'a mut R,
    id: String,
}

impl<'a, R: Rng> ConversationBuilder<'a, R> {
    fn new(config: &'a GeneratorConfig, index: usize, rng: &'a mut R) -> Self {
        Self {
            config,
            bank: &config.templates,
            rng,
            id: format!("syn-{:06}", index),
        }
    }

    fn sample_turns(&mut self) -> usize {
        let t = self.config.turns;
        if t.sd == 0.0 {
            return (t.mean.round().max(0.0) as usize).clamp(t.min, t.max);
        }
        let normal = Normal::new(t.mean, t.sd).expect("validated sd");
        for _ in 0..1000 {
            let x = normal.sample(self.rng).round();
            if x >= t.min as f64 && x <= t.max as f64 {
                return x as usize;
            }
        }
        (t.mean.round().max(0.0) as usize).clamp(t.min, t.max)
    }

    fn perturb_user(&mut self, text: &str, asr_rate: f64) -> (String, bool) {
        let mut corrupted = false;
        let words: Vec<String> = text
            .split(' ')
            .map(|w| {
                let mut w = w.to_string();
                if let Some((_, b)) = self.bank.synonyms.iter().find(|(a, _)| *a == w) {
                    if self.rng.gen_bool(0.2) {
                        w = b.clone();
                    }
                }
                if let Some((_, b)) = self.bank.asr_confusions.iter().find(|(a, _)| *a == w) {
                    if self.rng.gen_bool(asr_rate) {
                        w = b.clone();
                        corrupted = true;
                    }
                }
                w
            })
            .collect();
        (words.join(" "), corrupted)
    }

    fn build(mut self) -> Conversation {
        let rng = &mut *self.rng;
        let device = if rng.gen_bool(0.6) { Device::Screen } else { Device::Headless };
        let domain = pick_weighted(&[(Domain::Recipe, 0.55), (Domain::Diy, 0.35), (Domain::None, 0.1)], rng);
        let resumed = rng.gen_bool(0.1);
        let fallback_rate = rng.gen_range(0.0..=self.config.max_fallback_rate);
        let repeat_rate = rng.gen_range(0.0..0.15);
        let asr_rate = rng.gen_range(0.0..0.4);
        let close_prob = rng.gen_range(0.2..0.9);
        let mood: f64 = rng.gen_range(-1.0..1.0);
        let [lat_lo, lat_hi] = self.config.system_latency_s;
        let latency_s = if lat_hi > lat_lo { rng.gen_range(lat_lo..lat_hi) } else { lat_lo };
        let tasks: Vec<String> = match domain {
            Domain::Recipe => self.bank.recipe_tasks.clone(),
            Domain::Diy => self.bank.diy_tasks.clone(),
            Domain::None => self.bank.recipe_tasks.iter().chain(&self.bank.diy_tasks).cloned().collect(),
        };
        let task = pick(&tasks, rng).to_string();
        let cue_word = self.config.text_cue.map(|_| {
            let list = if rng.gen_bool(0.5) { &self.bank.cue_positive } else { &self.bank.cue_negative };
            pick(list, rng).to_string()
        });

        let n = self.sample_turns();
        let mut turns: Vec<Turn> = Vec::with_capacity(n);
        let mut phase = Phase::Greeting;
        let mut clock = BASE_EPOCH_MS + self.rng.gen_range(0..86_400_000);
        let mut step = 0usize;
        let mut started = false;
        let mut finished = false;
        let mut prev_curiosity = false;
        let mut screen_counter = 0usize;
        let mut bases: Vec<(String, bool)> = Vec::with_capacity(n);

        for t in 0..n {
            let rng = &mut *self.rng;
            if t > 0 {
                phase = next_phase(phase, rng);
            }
            if t == n - 1 && t > 0 && rng.gen_bool(close_prob) {
                phase = Phase::Conclusion;
            }
            let mut flags = TurnFlags::default();
            let mut intent = phase_intent(phase, rng);
            if prev_curiosity {
                if rng.gen_bool(0.5) {
                    intent = Intent::Yes;
                    flags.curiosity_accepted = true;
                } else {
                    intent = Intent::No;
                    flags.curiosity_denied = true;
                }
            } else if rng.gen_bool(fallback_rate) {
                intent = Intent::Fallback;
            }

            let (mut user_text, corrupted) = if t > 0 && rng.gen_bool(repeat_rate) {
                intent = turns[t - 1].intent;
                flags.curiosity_accepted = false;
                flags.curiosity_denied = false;
                bases[t - 1].clone()
            } else {
                let template = pick(self.bank.user_for(intent), rng).to_string();
                let base = fill(&template, &task);
                let (mut text, corrupted) = self.perturb_user(&base, asr_rate);
                let rng = &mut *self.rng;
                if rng.gen_bool(0.35 * mood.max(0.0)) {
                    text = format!("{} {text}", pick(&self.bank.positive_interjections, rng));
                } else if rng.gen_bool(0.35 * (-mood).max(0.0)) {
                    text = format!("{} {text}", pick(&self.bank.negative_interjections, rng));
                }
                (text, corrupted)
            };
            bases.push((user_text.clone(), corrupted));
            if let (Some(cue), Some(word)) = (self.config.text_cue, &cue_word) {
                let in_range = match cue.position {
                    CuePosition::Opening => t < 2,
                    CuePosition::Closing => t + 2 >= n,
                };
                if in_range {
                    user_text = format!("{user_text} {word}");
                }
            }
            let rng = &mut *self.rng;
            let asr_score = if corrupted { rng.gen_range(0.3..0.7) } else { rng.gen_range(0.75..0.99) };
            flags.offensive = rng.gen_bool(0.02);
            flags.sensitive = rng.gen_bool(0.02);

            let mut is_step_reading = false;
            let mut step_text = None;
            let mut curiosity = false;
            let (rg, system_text) = match intent {
                Intent::Fallback => {
                    flags.fallback = true;
                    ("fallback", pick(&self.bank.fallback_responses, rng).to_string())
                }
                Intent::Search => {
                    flags.search_request = true;
                    flags.result_page_shown = device == Device::Screen && rng.gen_bool(0.8);
                    ("search", fill(pick(self.bank.system_for(Phase::Search), rng), &task))
                }
                Intent::Help => ("help", "you can say next repeat or ask for more details".to_string()),
                _ if phase == Phase::Steps && !prev_curiosity && started && rng.gen_bool(0.15) => {
                    flags.curiosity_said = true;
                    curiosity = true;
                    ("curiosity", pick(&self.bank.curiosities, rng).to_string())
                }
                Intent::Next | Intent::NextStep | Intent::StartSteps | Intent::StartCooking | Intent::Repeat
                    if phase == Phase::Steps =>
                {
                    if !started {
                        started = true;
                        flags.task_started = true;
                    } else if intent != Intent::Repeat {
                        step += 1;
                    }
                    let text = self.bank.steps[step % self.bank.steps.len()].clone();
                    is_step_reading = true;
                    step_text = Some(text.clone());
                    ("steps", text)
                }
                _ => {
                    if matches!(intent, Intent::StartSteps | Intent::StartCooking) && !started {
                        started = true;
                        flags.task_started = true;
                    }
                    if phase == Phase::Conclusion && started && !finished {
                        finished = true;
                        flags.task_finished = true;
                    }
                    let rg = match phase {
                        Phase::Greeting => "greeter",
                        Phase::Search => "search",
                        Phase::TaskOverview => "overview",
                        Phase::Ingredients => "ingredients",
                        Phase::Steps => "steps",
                        Phase::StepDetail => "detail",
                        Phase::Conclusion => "closing",
                    };
                    (rg, fill(pick(self.bank.system_for(phase), rng), &task))
                }
            };
            prev_curiosity = curiosity;

            let screen_id = if device == Device::Screen {
                if phase != turns.last().map_or(Phase::Greeting, |p| p.phase) || rng.gen_bool(0.2) {
                    screen_counter += 1;
                }
                Some(format!("{}-{}", phase.label(), screen_counter))
            } else {
                None
            };

            if t > 0 {
                clock += rng.gen_range(300..4000);
            }
            let user_start_ms = clock;
            let user_end_ms = user_start_ms + words_ms(&user_text, 350, rng);
            let jitter: f64 = rng.gen_range(0.7..1.3);
            let system_start_ms = user_end_ms + (latency_s * jitter * 1000.0).round() as i64;
            let system_end_ms = system_start_ms + words_ms(&system_text, 300, rng);
            clock = system_end_ms;

            turns.push(Turn {
                index: t,
                user: Utterance::new(user_text),
                system: Utterance::new(system_text),
                intent,
                response_generator: rg.to_string(),
                phase,
                user_start_ms,
                user_end_ms,
                system_start_ms,
                system_end_ms,
                asr_score,
                is_step_reading,
                step_text,
                screen_id,
                flags,
            });
        }

        Conversation {
            id: self.id,
            device,
            domain,
            resumed,
            turns,
            rating: None,
        }
    }
}
