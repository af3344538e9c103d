//! Vocabulary, dialogue history, BLEU scoring, and the scripted grammar
//! that stands in for human dialogue data.
//!
//! The vocabulary is closed: reserved control ids first, then direction
//! words, template words, room labels, and object words. Scripted questions
//! and answers are deterministic template fills over that vocabulary, and
//! the corpus generator walks a noisy shortest-path teacher through worlds
//! while emitting them at the fixed question cadence.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::world::{
    self, Action, NodeId, Pose, World, WorldError, DIRECTION_WORDS, ROOM_LABELS,
};

#[derive(Debug, Error)]
pub enum LangError {
    #[error("vocabulary too small: {0} words (minimum 16)")]
    VocabTooSmall(usize),
    #[error("utterance malformed: {0}")]
    BadUtterance(String),
    #[error(transparent)]
    World(#[from] WorldError),
}

pub type LangResult<T> = Result<T, LangError>;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const NAV_TAG: u32 = 4;
pub const ORA_TAG: u32 = 5;

const RESERVED: [&str; 6] = ["<pad>", "<bos>", "<eos>", "<unk>", "<nav>", "<ora>"];

const TEMPLATE_WORDS: [&str; 14] = [
    "should", "i", "go", "or", "?", "to", "the", "then", "you", "are", "in", "goal", "room",
    "where",
];

/// Closed word/id bijection with fixed reserved ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, u32>,
}

impl Vocabulary {
    /// Build from extra word lists (room labels, objects, ...). Order is
    /// deterministic: reserved, directions, template words, then the extras
    /// in the order given, deduplicated.
    pub fn build<I, S>(extra: I) -> LangResult<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut words: Vec<String> = Vec::new();
        let mut index = BTreeMap::new();
        let push = |words: &mut Vec<String>, index: &mut BTreeMap<String, u32>, w: &str| {
            if !index.contains_key(w) {
                index.insert(w.to_string(), words.len() as u32);
                words.push(w.to_string());
            }
        };
        for w in RESERVED {
            push(&mut words, &mut index, w);
        }
        for w in DIRECTION_WORDS {
            push(&mut words, &mut index, w);
        }
        for w in TEMPLATE_WORDS {
            push(&mut words, &mut index, w);
        }
        for w in extra {
            push(&mut words, &mut index, w.as_ref());
        }
        if words.len() < 16 {
            return Err(LangError::VocabTooSmall(words.len()));
        }
        Ok(Self { words, index })
    }

    /// The default game vocabulary: all room labels plus the object words.
    pub fn standard(object_vocab: &[String]) -> LangResult<Self> {
        Self::build(
            ROOM_LABELS
                .iter()
                .map(|s| s.to_string())
                .chain(object_vocab.iter().cloned()),
        )
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> &str {
        self.words
            .get(id as usize)
            .map(|s| s.as_str())
            .unwrap_or("<unk>")
    }

    pub fn render(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .map(|t| self.word(*t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
    }
}

/// Restore the skipped index after deserialization.
pub fn vocabulary_from_words(words: Vec<String>) -> LangResult<Vocabulary> {
    let mut v = Vocabulary {
        words,
        index: BTreeMap::new(),
    };
    v.rebuild_index();
    if v.words.len() < 16 {
        return Err(LangError::VocabTooSmall(v.words.len()));
    }
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Question,
    Answer,
}

impl Role {
    pub fn tag(self) -> u32 {
        match self {
            Role::Question => NAV_TAG,
            Role::Answer => ORA_TAG,
        }
    }
}

/// One question or answer: content tokens only, no control ids inside.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub role: Role,
    pub tokens: Vec<u32>,
}

impl Utterance {
    pub fn new(role: Role, tokens: Vec<u32>) -> LangResult<Self> {
        if tokens
            .iter()
            .any(|t| matches!(*t, PAD | BOS | EOS | NAV_TAG | ORA_TAG))
        {
            return Err(LangError::BadUtterance(
                "control token inside utterance".into(),
            ));
        }
        Ok(Self { role, tokens })
    }
}

/// Navigator conditioning context levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    /// Target object word only.
    TargetOnly,
    /// Target plus the previous exchange.
    LastExchange,
    /// Target plus the entire dialogue history.
    FullHistory,
}

/// Token-level dialogue state: the target word plus ordered exchanges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueHistory {
    pub target_object: u32,
    pub exchanges: Vec<(Utterance, Utterance)>,
}

impl DialogueHistory {
    pub fn new(target_object: u32) -> Self {
        Self {
            target_object,
            exchanges: Vec::new(),
        }
    }

    pub fn push(&mut self, question: Utterance, answer: Utterance) {
        self.exchanges.push((question, answer));
    }
}

/// Assemble the navigator's conditioning tokens for a context mode, then
/// truncate oldest-first to `cap` tokens. The target word always survives
/// and a partially truncated utterance keeps its role tag (the tag replaces
/// the oldest kept content token, so the budget is exact).
pub fn build_context(history: &DialogueHistory, mode: ContextMode, cap: usize) -> Vec<u32> {
    let exchanges: &[(Utterance, Utterance)] = match mode {
        ContextMode::TargetOnly => &[],
        ContextMode::LastExchange => {
            let n = history.exchanges.len();
            &history.exchanges[n.saturating_sub(1)..]
        }
        ContextMode::FullHistory => &history.exchanges,
    };
    // Tagged stream with, per token, the tag of the utterance it belongs to.
    let mut stream: Vec<(u32, u32)> = Vec::new();
    for (q, a) in exchanges {
        stream.push((NAV_TAG, NAV_TAG));
        stream.extend(q.tokens.iter().map(|t| (*t, NAV_TAG)));
        stream.push((ORA_TAG, ORA_TAG));
        stream.extend(a.tokens.iter().map(|t| (*t, ORA_TAG)));
    }
    let budget = cap.saturating_sub(1).max(1);
    let cut = stream.len().saturating_sub(budget);
    let mut tail: Vec<(u32, u32)> = stream[cut..].to_vec();
    if let Some(first) = tail.first_mut() {
        if cut > 0 && first.0 != NAV_TAG && first.0 != ORA_TAG {
            first.0 = first.1;
        }
    }
    let mut out = Vec::with_capacity(1 + tail.len());
    out.push(history.target_object);
    out.extend(tail.into_iter().map(|(t, _)| t));
    out
}

/// BLEU-4 with uniform weights, closest-reference brevity penalty, and
/// add-epsilon smoothing for zero n-gram matches. Orders longer than the
/// candidate are skipped so an exact match scores 1.0 regardless of length;
/// empty candidates score 0.
pub fn bleu(candidate: &[u32], references: &[&[u32]]) -> f64 {
    const EPS: f64 = 1e-9;
    const MAX_N: usize = 4;
    if candidate.is_empty() || references.is_empty() {
        return 0.0;
    }
    let c = candidate.len();
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|len| ((*len as i64 - c as i64).abs(), *len as i64))
        .unwrap_or(0);
    let bp = if c >= r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let orders = MAX_N.min(c);
    let mut log_sum = 0.0;
    for n in 1..=orders {
        let p = modified_precision(candidate, references, n);
        log_sum += p.max(EPS).ln();
    }
    bp * (log_sum / orders as f64).exp()
}

fn ngram_counts(tokens: &[u32], n: usize) -> BTreeMap<&[u32], u64> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn modified_precision(candidate: &[u32], references: &[&[u32]], n: usize) -> f64 {
    let cand = ngram_counts(candidate, n);
    let total: u64 = cand.values().sum();
    if total == 0 {
        return 0.0;
    }
    let mut matches = 0u64;
    for (gram, count) in &cand {
        let max_ref = references
            .iter()
            .map(|r| ngram_counts(r, n).get(gram).copied().unwrap_or(0))
            .max()
            .unwrap_or(0);
        matches += (*count).min(max_ref);
    }
    matches as f64 / total as f64
}

/// Unique word types and their frequencies across generated utterances.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LexicalStats {
    pub types: usize,
    /// (word, count), most frequent first, ties by word.
    pub freq: Vec<(String, u64)>,
}

pub fn lexical_stats<'a, I>(utterances: I, vocab: &Vocabulary) -> LexicalStats
where
    I: IntoIterator<Item = &'a [u32]>,
{
    let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
    for u in utterances {
        for t in u {
            *counts.entry(*t).or_insert(0) += 1;
        }
    }
    let mut freq: Vec<(String, u64)> = counts
        .into_iter()
        .map(|(id, c)| (vocab.word(id).to_string(), c))
        .collect();
    freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    LexicalStats {
        types: freq.len(),
        freq,
    }
}

/// Deterministic question template from the directions available at a pose.
pub fn script_question(pose: Pose, world: &World, vocab: &Vocabulary) -> Utterance {
    let mut dirs: Vec<u8> = world
        .neighbors(pose.node)
        .into_iter()
        .map(|(_, b)| b)
        .collect();
    dirs.sort_unstable();
    dirs.dedup();
    let w = |s: &str| vocab.id(s);
    let tokens = match dirs.as_slice() {
        [] => vec![w("where"), w("should"), w("i"), w("go"), w("?")],
        [d] => vec![
            w("should"),
            w("i"),
            w("go"),
            w(DIRECTION_WORDS[*d as usize]),
            w("?"),
        ],
        [d1, d2, ..] => vec![
            w("should"),
            w("i"),
            w("go"),
            w(DIRECTION_WORDS[*d1 as usize]),
            w("or"),
            w(DIRECTION_WORDS[*d2 as usize]),
            w("?"),
        ],
    };
    Utterance {
        role: Role::Question,
        tokens,
    }
}

/// Deterministic answer template derived from the oracle path's turns.
pub fn script_answer(path5: &[NodeId], world: &World, vocab: &Vocabulary) -> Utterance {
    let w = |s: &str| vocab.id(s);
    if path5.is_empty() {
        return Utterance {
            role: Role::Answer,
            tokens: vec![w("you"), w("are"), w("in"), w("the"), w("goal"), w("room")],
        };
    }
    let dest_label = world.room_label(world.node(*path5.last().unwrap()).map(|n| n.room).unwrap_or(world.goal_room));
    let dirs: Vec<u8> = path5
        .windows(2)
        .map(|p| world.direction_bucket(p[0], p[1]))
        .collect();
    let mut tokens = vec![w("go")];
    if let Some(first) = dirs.first() {
        tokens.push(w(DIRECTION_WORDS[*first as usize]));
    }
    tokens.extend([w("to"), w("the"), w(dest_label)]);
    if let Some(turn) = dirs.iter().find(|d| Some(**d) != dirs.first().copied()) {
        tokens.extend([w("then"), w(DIRECTION_WORDS[*turn as usize])]);
    }
    Utterance {
        role: Role::Answer,
        tokens,
    }
}

/// One corpus record per navigation burst; the question/answer fields are
/// empty for the episode's opening burst.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub world_seed: u64,
    pub episode_id: u64,
    pub context_tokens: Vec<u32>,
    pub nav_actions: Vec<Action>,
    pub question_tokens: Vec<u32>,
    pub answer_tokens: Vec<u32>,
    pub path5: Vec<NodeId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub episodes_per_world: usize,
    /// Per-step probability of replacing the teacher action with a random
    /// non-stop action.
    pub noise: f64,
    pub question_interval: usize,
    pub max_actions: usize,
    pub max_exchanges: usize,
    pub history_cap: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            episodes_per_world: 16,
            noise: 0.1,
            question_interval: 4,
            max_actions: 80,
            max_exchanges: 20,
            history_cap: 160,
        }
    }
}

/// Start pose for an episode, shared by the corpus generator and trainers
/// that replay records.
pub fn episode_start(world: &World, corpus_seed: u64, episode_id: u64) -> Pose {
    let mix = corpus_seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(world.seed.rotate_left(17))
        .wrapping_add(episode_id.wrapping_mul(0x2545_f491_4f6c_dd1d));
    let mut rng = ChaCha8Rng::seed_from_u64(mix);
    Pose {
        node: NodeId(rng.random_range(0..world.num_nodes())),
        heading: rng.random_range(0..4),
    }
}

fn episode_rng(world: &World, corpus_seed: u64, episode_id: u64) -> ChaCha8Rng {
    let mix = corpus_seed
        .wrapping_mul(0x6c62_272e_07bb_0142)
        .wrapping_add(world.seed)
        .wrapping_add(episode_id.rotate_left(32));
    ChaCha8Rng::seed_from_u64(mix)
}

/// Walk a noisy shortest-path teacher through each world, emitting scripted
/// exchanges at the question cadence. Deterministic given the seed.
pub fn generate_corpus(
    worlds: &[World],
    vocab: &Vocabulary,
    cfg: &CorpusConfig,
    rng_seed: u64,
) -> LangResult<Vec<CorpusRecord>> {
    if !(0.0..=1.0).contains(&cfg.noise) {
        return Err(LangError::BadUtterance(format!(
            "noise {} outside [0,1]",
            cfg.noise
        )));
    }
    let mut records = Vec::new();
    for world in worlds {
        for episode in 0..cfg.episodes_per_world {
            let episode_id = episode as u64;
            let goal = world.goal_node();
            let mut rng = episode_rng(world, rng_seed, episode_id);
            let mut pose = episode_start(world, rng_seed, episode_id);
            let mut history = DialogueHistory::new(vocab.id(&world.target_object));
            let mut actions_total = 0usize;
            let mut exchanges = 0usize;
            let mut stopped = false;
            // Exchange preceding the next burst; empty for the opening burst.
            let mut pending: (Vec<u32>, Vec<u32>, Vec<NodeId>) = Default::default();

            loop {
                let mut burst = Vec::new();
                while burst.len() < cfg.question_interval && actions_total < cfg.max_actions {
                    let teacher = world::teacher_action(world, pose, goal)?;
                    let action = if cfg.noise > 0.0 && rng.random::<f64>() < cfg.noise {
                        let non_stop = [Action::Forward, Action::Left, Action::Right];
                        non_stop[rng.random_range(0..3)]
                    } else {
                        teacher
                    };
                    burst.push(action);
                    actions_total += 1;
                    pose = world::step(world, pose, action);
                    if action == Action::Stop {
                        stopped = true;
                        break;
                    }
                }
                let (question_tokens, answer_tokens, path5) = std::mem::take(&mut pending);
                records.push(CorpusRecord {
                    world_seed: world.seed,
                    episode_id,
                    context_tokens: build_context(&history, ContextMode::FullHistory, cfg.history_cap),
                    nav_actions: burst,
                    question_tokens,
                    answer_tokens,
                    path5,
                });
                if stopped || actions_total >= cfg.max_actions || exchanges >= cfg.max_exchanges {
                    break;
                }
                // Next exchange happens before the following burst.
                let q = script_question(pose, world, vocab);
                let path5 = world::shortest_path(world, pose.node, goal, Some(5))?;
                let a = script_answer(&path5, world, vocab);
                pending = (q.tokens.clone(), a.tokens.clone(), path5);
                history.push(q, a);
                exchanges += 1;
            }
        }
    }
    Ok(records)
}
