//! The turn-taking episode engine.
//!
//! An episode alternates navigation bursts with question-answer exchanges:
//! the navigator samples up to `question_interval` actions, and unless it
//! stopped or ran out of budget, one exchange is inserted into the dialogue
//! history before the next burst. Question-answer pairs come either from
//! plain sampling or from the recursive mental-model search.
//!
//! Transcripts record every event with a cumulative goal-progress stamp and
//! replay byte-identically under the same checkpoints and seeds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    AgentError, Agents, EncodedContext, GenMode, NavState, RunFlags, SpokenUtterance,
};
use crate::lang::{self, ContextMode, DialogueHistory, Role};
use crate::rmm::{self, ChosenUtterance, RmmConfig, RmmSnapshot, StreamKind};
use crate::tensor::{ParamStore, Tape, Tensor};
use crate::training::{step_reward, EpisodeTrainData, NavStepRecord, SpeakerExchangeRecord};
use crate::world::{self, Action, NodeId, Observation, Pose, World, WorldError};

#[derive(Debug, Error)]
pub enum GameError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("invalid game config: {0}")]
    InvalidConfig(String),
    #[error("transcript malformed: {0}")]
    BadTranscript(String),
}

pub type GameResult<T> = Result<T, GameError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GameConfig {
    pub question_interval: usize,
    pub max_actions: usize,
    pub max_exchanges: usize,
    pub history_cap: usize,
    pub context_mode: ContextMode,
    /// Ask an exchange before the opening burst instead of after it.
    pub question_first: bool,
    /// Sampling temperature for plain-mode question/answer generation.
    pub language_temperature: f32,
}

impl Default for GameConfig {
    fn default() -> Self {
        Self {
            question_interval: 4,
            max_actions: 80,
            max_exchanges: 20,
            history_cap: 160,
            context_mode: ContextMode::FullHistory,
            question_first: false,
            language_temperature: 0.6,
        }
    }
}

impl GameConfig {
    pub fn validate(&self) -> GameResult<()> {
        if self.question_interval == 0 || self.max_actions == 0 || self.history_cap == 0 {
            return Err(GameError::InvalidConfig("budgets must be positive".into()));
        }
        if self.max_exchanges != self.max_actions / self.question_interval {
            return Err(GameError::InvalidConfig(format!(
                "max_exchanges {} != max_actions {} / question_interval {}",
                self.max_exchanges, self.max_actions, self.question_interval
            )));
        }
        if self.language_temperature <= 0.0 {
            return Err(GameError::InvalidConfig("temperature must be > 0".into()));
        }
        Ok(())
    }
}

/// Everything that evolves during one episode.
#[derive(Debug, Clone)]
pub struct DialogueState {
    pub pose: Pose,
    pub history: DialogueHistory,
    pub actions_taken: usize,
    pub exchanges_done: usize,
}

/// How question-answer pairs are chosen at each exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Selection {
    Plain,
    Rmm(RmmConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalReason {
    Stop,
    ActionBudget,
    ExchangeBudget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EventPayload {
    Act { action: Action },
    Utt { tokens: Vec<u32>, words: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEvent {
    pub t: u32,
    pub kind: String,
    pub payload: EventPayload,
    pub pose: Pose,
    pub gp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub world_seed: u64,
    pub episode_seed: u64,
    pub start: Pose,
    pub goal: NodeId,
    pub method: String,
    pub context_mode: ContextMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub spec: EpisodeSpec,
    pub events: Vec<TranscriptEvent>,
    pub terminal: TerminalReason,
    pub final_goal_progress: f64,
    /// Best goal progress seen up to and including each exchange.
    pub best_progress_at_exchange: Vec<f64>,
    /// Best goal progress over every visited pose.
    pub oracle_goal_progress: f64,
}

impl Transcript {
    pub fn num_actions(&self) -> usize {
        self.events.iter().filter(|e| e.kind == "act").count()
    }

    pub fn num_exchanges(&self) -> usize {
        self.events.iter().filter(|e| e.kind == "q").count()
    }

    /// Generated utterances (question, answer) per exchange.
    pub fn exchanges(&self) -> Vec<(Vec<u32>, Vec<u32>)> {
        let qs: Vec<&TranscriptEvent> = self.events.iter().filter(|e| e.kind == "q").collect();
        let ans: Vec<&TranscriptEvent> = self.events.iter().filter(|e| e.kind == "a").collect();
        qs.iter()
            .zip(&ans)
            .map(|(q, a)| {
                let toks = |e: &TranscriptEvent| match &e.payload {
                    EventPayload::Utt { tokens, .. } => tokens.clone(),
                    _ => Vec::new(),
                };
                (toks(q), toks(a))
            })
            .collect()
    }

    /// One header line, one line per event, one summary line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        out.push_str(&serde_json::to_string(&self.spec).expect("spec encodes"));
        out.push('\n');
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("event encodes"));
            out.push('\n');
        }
        let summary = serde_json::json!({
            "terminal": self.terminal,
            "final_goal_progress": self.final_goal_progress,
            "oracle_goal_progress": self.oracle_goal_progress,
            "best_progress_at_exchange": self.best_progress_at_exchange,
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }

    pub fn from_jsonl(text: &str) -> GameResult<Transcript> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| GameError::BadTranscript("empty file".into()))?;
        let spec: EpisodeSpec = serde_json::from_str(header)
            .map_err(|e| GameError::BadTranscript(format!("header: {e}")))?;
        let mut events = Vec::new();
        let mut summary = None;
        for line in lines {
            if let Ok(e) = serde_json::from_str::<TranscriptEvent>(line) {
                events.push(e);
            } else {
                summary = Some(
                    serde_json::from_str::<serde_json::Value>(line)
                        .map_err(|e| GameError::BadTranscript(format!("summary: {e}")))?,
                );
            }
        }
        let summary =
            summary.ok_or_else(|| GameError::BadTranscript("missing summary line".into()))?;
        Ok(Transcript {
            spec,
            events,
            terminal: serde_json::from_value(summary["terminal"].clone())
                .map_err(|e| GameError::BadTranscript(format!("terminal: {e}")))?,
            final_goal_progress: summary["final_goal_progress"].as_f64().unwrap_or(0.0),
            oracle_goal_progress: summary["oracle_goal_progress"].as_f64().unwrap_or(0.0),
            best_progress_at_exchange: serde_json::from_value(
                summary["best_progress_at_exchange"].clone(),
            )
            .unwrap_or_default(),
        })
    }
}

/// Best goal progress attained at any visited pose.
pub fn oracle_stopping(transcript: &Transcript) -> f64 {
    transcript
        .events
        .iter()
        .map(|e| e.gp)
        .fold(0.0f64, f64::max)
}

/// The guide's privileged view: observations along the next (up to) five
/// shortest-path steps, headings oriented along the travel direction. At
/// the goal the view is the single current observation.
pub fn guide_view(world: &World, pose: Pose, goal: NodeId) -> Result<Vec<Observation>, WorldError> {
    let path = world::shortest_path(world, pose.node, goal, Some(5))?;
    Ok(path_observations(world, pose.node, &path, pose))
}

/// Observations along an explicit node path, headings along the direction
/// of travel. An empty path yields the single fallback observation.
pub fn path_observations(
    world: &World,
    from: NodeId,
    path: &[NodeId],
    fallback: Pose,
) -> Vec<Observation> {
    if path.is_empty() {
        return vec![world::observation(world, fallback)];
    }
    let mut out = Vec::with_capacity(path.len());
    let mut prev = from;
    for node in path {
        let heading = world.direction_bucket(prev, *node);
        out.push(world::observation(world, Pose { node: *node, heading }));
        prev = *node;
    }
    out
}

/// Per-episode RNG for action sampling.
pub fn episode_action_rng(episode_seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(episode_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x5bd1)
}

/// Per-episode RNG for dropout noise, kept separate so sampled trajectories
/// align between train and eval forward passes.
pub fn episode_noise_rng(episode_seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(episode_seed.wrapping_mul(0xc2b2_ae3d_27d4_eb4f) ^ 0x27d4)
}

pub struct EpisodeOutput {
    pub transcript: Transcript,
    /// Present when the episode ran with gradients enabled.
    pub train: Option<EpisodeTrainData>,
}

struct EventLog {
    events: Vec<TranscriptEvent>,
    best_at_exchange: Vec<f64>,
    best: f64,
    t: u32,
}

impl EventLog {
    fn new() -> Self {
        Self {
            events: Vec::new(),
            best_at_exchange: Vec::new(),
            best: 0.0,
            t: 0,
        }
    }

    fn push(&mut self, kind: &str, payload: EventPayload, pose: Pose, gp: f64) {
        self.t += 1;
        self.best = self.best.max(gp);
        self.events.push(TranscriptEvent {
            t: self.t,
            kind: kind.to_string(),
            payload,
            pose,
            gp,
        });
    }
}

/// Play one episode (Algorithm-style loop) and return the transcript, plus
/// training quantities when `train_dropout` is set.
#[allow(clippy::too_many_arguments)]
pub fn run_episode(
    agents: &Agents,
    store: &ParamStore,
    world: &World,
    start: Pose,
    goal: NodeId,
    config: &GameConfig,
    episode_seed: u64,
    selection: &Selection,
    train_dropout: Option<f32>,
) -> GameResult<EpisodeOutput> {
    config.validate()?;
    if let Selection::Rmm(cfg) = selection {
        cfg.validate().map_err(GameError::InvalidConfig)?;
    }
    let flags = match train_dropout {
        Some(p) => RunFlags::train(p),
        None => RunFlags::eval(),
    };
    let mut tape = Tape::new(train_dropout.is_some());
    let mut action_rng = episode_action_rng(episode_seed);
    let mut noise_rng = episode_noise_rng(episode_seed);

    let target_id = agents.vocab.id(&world.target_object);
    let mut state = DialogueState {
        pose: start,
        history: DialogueHistory::new(target_id),
        actions_taken: 0,
        exchanges_done: 0,
    };
    let mut log = EventLog::new();
    let mut nav_records: Vec<NavStepRecord> = Vec::new();
    let mut speaker_records: Vec<SpeakerExchangeRecord> = Vec::new();

    let encode = |tape: &mut Tape,
                  history: &DialogueHistory,
                  noise_rng: &mut ChaCha8Rng|
     -> GameResult<EncodedContext> {
        let tokens = lang::build_context(history, config.context_mode, config.history_cap);
        Ok(agents
            .navigator
            .encode_context(tape, store, &tokens, flags, noise_rng)?)
    };

    let mut ctx = encode(&mut tape, &state.history, &mut noise_rng)?;
    let mut nav_state = agents.navigator.start_state(&ctx);

    if config.question_first {
        let (new_ctx, new_nav) = do_exchange(
            agents, store, world, goal, config, selection, episode_seed, &mut tape, &mut state,
            &mut log, &mut speaker_records, nav_state, flags, &mut noise_rng,
        )?;
        ctx = new_ctx;
        nav_state = new_nav;
    }

    let terminal = 'episode: loop {
        // Navigation burst.
        let mut took = 0usize;
        loop {
            if state.actions_taken >= config.max_actions {
                break 'episode TerminalReason::ActionBudget;
            }
            let pose_before = state.pose;
            let obs = world::observation(world, pose_before);
            let step = agents.navigator.policy_step(
                &mut tape, store, &nav_state, &obs, &ctx, flags, &mut noise_rng,
            )?;
            let logits = tape.data(step.logits).to_vec();
            let idx = sample_action(&logits, &mut action_rng);
            let action = Action::from_index(idx).expect("action index");
            state.pose = world::step(world, pose_before, action);
            nav_state = NavState {
                prev_action: Some(action),
                ..step.state
            };
            state.actions_taken += 1;
            took += 1;
            let gp = world::goal_progress(world, start.node, state.pose.node, goal)?;
            log.push("act", EventPayload::Act { action }, state.pose, gp);
            if train_dropout.is_some() {
                nav_records.push(NavStepRecord {
                    logits: step.logits,
                    value: step.value,
                    action,
                    reward: step_reward(world, pose_before, state.pose, goal)?,
                    teacher: world::teacher_action(world, pose_before, goal)?,
                });
            }
            if action == Action::Stop {
                break 'episode TerminalReason::Stop;
            }
            if took == config.question_interval {
                break;
            }
        }
        if state.exchanges_done >= config.max_exchanges {
            break TerminalReason::ExchangeBudget;
        }
        let (new_ctx, new_nav) = do_exchange(
            agents, store, world, goal, config, selection, episode_seed, &mut tape, &mut state,
            &mut log, &mut speaker_records, nav_state, flags, &mut noise_rng,
        )?;
        ctx = new_ctx;
        nav_state = new_nav;
    };

    let final_gp = world::goal_progress(world, start.node, state.pose.node, goal)?;
    let transcript = Transcript {
        spec: EpisodeSpec {
            world_seed: world.seed,
            episode_seed,
            start,
            goal,
            method: method_name(selection),
            context_mode: config.context_mode,
        },
        events: log.events,
        terminal,
        final_goal_progress: final_gp,
        best_progress_at_exchange: log.best_at_exchange,
        oracle_goal_progress: log.best.max(0.0),
    };
    let train = train_dropout.map(|_| EpisodeTrainData {
        tape,
        nav_steps: nav_records,
        speaker_exchanges: speaker_records,
        final_goal_progress: final_gp,
    });
    Ok(EpisodeOutput { transcript, train })
}

fn method_name(selection: &Selection) -> String {
    match selection {
        Selection::Plain => "plain".to_string(),
        Selection::Rmm(cfg) => format!("rmm_n{}", cfg.n),
    }
}

fn sample_action(logits: &[f32], rng: &mut ChaCha8Rng) -> usize {
    let m = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|x| (*x as f64 - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let u: f64 = rand::Rng::random::<f64>(rng) * z;
    let mut acc = 0.0;
    for (i, e) in exps.iter().enumerate() {
        acc += e;
        if u < acc {
            return i;
        }
    }
    exps.len() - 1
}

/// Run one exchange: choose a question-answer pair (plain sampling or the
/// mental-model search), log it, grow the history, and re-encode the
/// context. The decoder state itself persists across the context change.
#[allow(clippy::too_many_arguments)]
fn do_exchange(
    agents: &Agents,
    store: &ParamStore,
    world: &World,
    goal: NodeId,
    config: &GameConfig,
    selection: &Selection,
    episode_seed: u64,
    tape: &mut Tape,
    state: &mut DialogueState,
    log: &mut EventLog,
    speaker_records: &mut Vec<SpeakerExchangeRecord>,
    nav_state: NavState,
    flags: RunFlags,
    noise_rng: &mut ChaCha8Rng,
) -> GameResult<(EncodedContext, NavState)> {
    let exchange_idx = state.exchanges_done;
    // Current cumulative progress: last action stamp, or zero before any move.
    let current_gp = log.events.last().map(|e| e.gp).unwrap_or(0.0);

    let (question, answer) = match selection {
        Selection::Plain => plain_pair(
            agents, store, world, goal, config, episode_seed, exchange_idx, tape, state,
        )?,
        Selection::Rmm(cfg) => {
            let snapshot = RmmSnapshot::freeze(tape, state, nav_state);
            let outcome = rmm::rmm_exchange(
                agents, store, world, goal, config, cfg, &snapshot, episode_seed, exchange_idx,
            )
            .map_err(|e| GameError::InvalidConfig(e.to_string()))?;
            if flags.train {
                let rec = rmm::recompute_chosen_branch(
                    agents, store, world, goal, config, cfg, &snapshot, episode_seed,
                    exchange_idx, &outcome, tape, flags, noise_rng,
                )
                .map_err(|e| GameError::InvalidConfig(e.to_string()))?;
                speaker_records.push(rec);
            }
            (outcome.question, outcome.answer)
        }
    };

    log.push(
        "q",
        EventPayload::Utt {
            tokens: question.utterance.tokens.clone(),
            words: agents.vocab.render(&question.utterance.tokens),
        },
        state.pose,
        current_gp,
    );
    log.push(
        "a",
        EventPayload::Utt {
            tokens: answer.utterance.tokens.clone(),
            words: agents.vocab.render(&answer.utterance.tokens),
        },
        state.pose,
        current_gp,
    );
    state
        .history
        .push(question.utterance.clone(), answer.utterance.clone());
    state.exchanges_done += 1;
    log.best_at_exchange.push(log.best);

    let tokens = lang::build_context(&state.history, config.context_mode, config.history_cap);
    let ctx = agents
        .navigator
        .encode_context(tape, store, &tokens, flags, noise_rng)?;
    Ok((ctx, nav_state))
}

/// Plain selection: sample one question and one answer with the pair-0
/// streams, so an aligned single-branch mental search degenerates to this.
#[allow(clippy::too_many_arguments)]
fn plain_pair(
    agents: &Agents,
    store: &ParamStore,
    world: &World,
    goal: NodeId,
    config: &GameConfig,
    episode_seed: u64,
    exchange_idx: usize,
    tape: &mut Tape,
    state: &DialogueState,
) -> GameResult<(ChosenUtterance, ChosenUtterance)> {
    let by_value = |s: SpokenUtterance| ChosenUtterance {
        utterance: s.utterance,
        emitted: s.emitted,
        logprob: s.logprob,
    };
    let target = state.history.target_object;
    let q_images = vec![world::observation(world, state.pose)];
    let mut q_rng = rmm::stream_rng(episode_seed, exchange_idx, 0, StreamKind::Question);
    let question = agents.speaker.generate(
        tape,
        store,
        Role::Question,
        &q_images,
        &[target],
        GenMode::Sample {
            temperature: config.language_temperature,
        },
        RunFlags::eval(),
        &mut q_rng,
    )?;
    let a_images = guide_view(world, state.pose, goal)?;
    let mut a_cond = vec![target];
    a_cond.extend(&question.utterance.tokens);
    let mut a_rng = rmm::stream_rng(episode_seed, exchange_idx, 0, StreamKind::Answer);
    let answer = agents.speaker.generate(
        tape,
        store,
        Role::Answer,
        &a_images,
        &a_cond,
        GenMode::Sample {
            temperature: config.language_temperature,
        },
        RunFlags::eval(),
        &mut a_rng,
    )?;
    Ok((by_value(question), by_value(answer)))
}

/// Play one episode with the shortest-path teacher as navigator and the
/// scripted templates as both speakers. This is the oracle row of the
/// results table: it always stops at the goal, so its goal progress equals
/// the initial distance exactly.
pub fn run_teacher_episode(
    world: &World,
    vocab: &crate::lang::Vocabulary,
    start: Pose,
    goal: NodeId,
    config: &GameConfig,
    episode_seed: u64,
) -> GameResult<Transcript> {
    config.validate()?;
    let mut log = EventLog::new();
    let mut pose = start;
    let mut actions = 0usize;
    let mut exchanges = 0usize;
    let terminal = 'episode: loop {
        let mut took = 0usize;
        loop {
            if actions >= config.max_actions {
                break 'episode TerminalReason::ActionBudget;
            }
            let action = world::teacher_action(world, pose, goal)?;
            pose = world::step(world, pose, action);
            actions += 1;
            took += 1;
            let gp = world::goal_progress(world, start.node, pose.node, goal)?;
            log.push("act", EventPayload::Act { action }, pose, gp);
            if action == Action::Stop {
                break 'episode TerminalReason::Stop;
            }
            if took == config.question_interval {
                break;
            }
        }
        if exchanges >= config.max_exchanges {
            break TerminalReason::ExchangeBudget;
        }
        let gp = log.events.last().map(|e| e.gp).unwrap_or(0.0);
        let q = crate::lang::script_question(pose, world, vocab);
        let path5 = world::shortest_path(world, pose.node, goal, Some(5))?;
        let a = crate::lang::script_answer(&path5, world, vocab);
        log.push(
            "q",
            EventPayload::Utt { tokens: q.tokens.clone(), words: vocab.render(&q.tokens) },
            pose,
            gp,
        );
        log.push(
            "a",
            EventPayload::Utt { tokens: a.tokens.clone(), words: vocab.render(&a.tokens) },
            pose,
            gp,
        );
        exchanges += 1;
        log.best_at_exchange.push(log.best);
    };
    let final_gp = world::goal_progress(world, start.node, pose.node, goal)?;
    Ok(Transcript {
        spec: EpisodeSpec {
            world_seed: world.seed,
            episode_seed,
            start,
            goal,
            method: "shortest_path".to_string(),
            context_mode: config.context_mode,
        },
        events: log.events,
        terminal,
        final_goal_progress: final_gp,
        best_progress_at_exchange: log.best_at_exchange,
        oracle_goal_progress: log.best.max(0.0),
    })
}

/// Check the structural invariants of a finished transcript against its
/// config: cadence, budgets, stop-at-end, progress-stamp consistency.
pub fn validate_transcript(
    transcript: &Transcript,
    config: &GameConfig,
    world: &World,
) -> GameResult<()> {
    let fail = |msg: String| Err(GameError::BadTranscript(msg));
    let actions = transcript.num_actions();
    if actions > config.max_actions {
        return fail(format!("{actions} actions exceed budget"));
    }
    if transcript.num_exchanges() > config.max_exchanges {
        return fail(format!(
            "{} exchanges exceed budget",
            transcript.num_exchanges()
        ));
    }
    // Cadence: every question follows exactly question_interval non-stop
    // actions since the last exchange (or the start, unless question-first).
    let mut since_exchange = 0usize;
    let mut saw_stop = false;
    let mut expect_answer = false;
    for e in &transcript.events {
        match e.kind.as_str() {
            "act" => {
                if expect_answer {
                    return fail("action between question and answer".into());
                }
                if saw_stop {
                    return fail("event after stop".into());
                }
                since_exchange += 1;
                if let EventPayload::Act { action } = &e.payload {
                    if *action == Action::Stop {
                        saw_stop = true;
                    }
                } else {
                    return fail("act event without action payload".into());
                }
            }
            "q" => {
                if saw_stop {
                    return fail("question after stop".into());
                }
                if !(config.question_first && since_exchange == 0)
                    && since_exchange != config.question_interval
                {
                    return fail(format!(
                        "question after {since_exchange} actions, expected {}",
                        config.question_interval
                    ));
                }
                since_exchange = 0;
                expect_answer = true;
            }
            "a" => {
                if !expect_answer {
                    return fail("answer without question".into());
                }
                expect_answer = false;
            }
            other => return fail(format!("unknown event kind {other}")),
        }
    }
    if transcript.terminal == TerminalReason::Stop && !saw_stop {
        return fail("terminal says stop but no stop action".into());
    }
    // Final stamp equals the recomputed goal progress of the final pose.
    if let Some(last_act) = transcript.events.iter().rev().find(|e| e.kind == "act") {
        let recomputed = world::goal_progress(
            world,
            transcript.spec.start.node,
            last_act.pose.node,
            transcript.spec.goal,
        )?;
        if recomputed != transcript.final_goal_progress {
            return fail(format!(
                "final gp {} != recomputed {recomputed}",
                transcript.final_goal_progress
            ));
        }
    }
    Ok(())
}

/// Freeze a live navigator state into plain tensors (used by the mental
/// search to copy without mutating).
pub fn freeze_nav_state(tape: &Tape, state: &NavState) -> (Tensor, Tensor, Option<Action>) {
    (
        tape.value(state.h),
        tape.value(state.c),
        state.prev_action,
    )
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::agents::{init_models, ModelDims};
    use crate::lang::Vocabulary;
    use crate::world::{generate_world, WorldParams};

    pub(crate) fn fixture(world_seed: u64) -> (ParamStore, Agents, World) {
        let params = WorldParams::default();
        let world = generate_world(world_seed, &params).unwrap();
        let vocab = Vocabulary::standard(&params.object_vocab).unwrap();
        let dims = ModelDims {
            hidden: 16,
            word_embed: 8,
            action_embed: 4,
            d_img: params.d_img,
            vocab_size: vocab.len(),
            l_gen: 6,
        };
        let mut store = ParamStore::new();
        init_models(&mut store, &dims, 11).unwrap();
        (store, Agents::new(dims, vocab).unwrap(), world)
    }

    fn bias_stop(store: &mut ParamStore, value: f32) {
        // Stop is action index 3 in the output head bias.
        store.get_mut("nav/out_b").unwrap().data[Action::Stop.index()] = value;
    }

    fn start_pose(world: &World) -> Pose {
        Pose { node: crate::world::NodeId(world.num_nodes() - 1), heading: 0 }
    }

    #[test]
    fn config_invariant_enforced() {
        let mut cfg = GameConfig::default();
        cfg.validate().unwrap();
        cfg.max_exchanges = 19;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn forced_stop_episode_is_single_action() {
        let (mut store, agents, world) = fixture(1);
        bias_stop(&mut store, 50.0);
        let cfg = GameConfig::default();
        let out = run_episode(
            &agents, &store, &world, start_pose(&world), world.goal_node(), &cfg, 7,
            &Selection::Plain, None,
        )
        .unwrap();
        assert_eq!(out.transcript.num_actions(), 1);
        assert_eq!(out.transcript.num_exchanges(), 0);
        assert_eq!(out.transcript.terminal, TerminalReason::Stop);
        assert_eq!(out.transcript.final_goal_progress, 0.0);
    }

    #[test]
    fn budget_exhaustion_hits_action_cap_exactly() {
        let (mut store, agents, world) = fixture(2);
        bias_stop(&mut store, -60.0);
        let cfg = GameConfig::default();
        let out = run_episode(
            &agents, &store, &world, start_pose(&world), world.goal_node(), &cfg, 9,
            &Selection::Plain, None,
        )
        .unwrap();
        assert_eq!(out.transcript.num_actions(), cfg.max_actions);
        assert!(out.transcript.num_exchanges() <= cfg.max_exchanges);
        assert_eq!(out.transcript.terminal, TerminalReason::ActionBudget);
        validate_transcript(&out.transcript, &cfg, &world).unwrap();
    }

    #[test]
    fn episodes_replay_byte_identically() {
        let (store, agents, world) = fixture(3);
        let cfg = GameConfig::default();
        let run = || {
            run_episode(
                &agents, &store, &world, start_pose(&world), world.goal_node(), &cfg, 21,
                &Selection::Plain, None,
            )
            .unwrap()
            .transcript
            .to_jsonl()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn transcript_jsonl_roundtrip() {
        let (store, agents, world) = fixture(4);
        let cfg = GameConfig::default();
        let t = run_episode(
            &agents, &store, &world, start_pose(&world), world.goal_node(), &cfg, 5,
            &Selection::Plain, None,
        )
        .unwrap()
        .transcript;
        let back = Transcript::from_jsonl(&t.to_jsonl()).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn transcripts_validate_across_seeds() {
        let (store, agents, world) = fixture(5);
        let cfg = GameConfig::default();
        for seed in 0..20u64 {
            let out = run_episode(
                &agents, &store, &world, start_pose(&world), world.goal_node(), &cfg, seed,
                &Selection::Plain, None,
            )
            .unwrap();
            validate_transcript(&out.transcript, &cfg, &world).unwrap();
            // Progress stamps are consistent with the final pose.
            let last_gp = out
                .transcript
                .events
                .iter()
                .rev()
                .find(|e| e.kind == "act")
                .map(|e| e.gp)
                .unwrap_or(0.0);
            assert_eq!(last_gp, out.transcript.final_goal_progress);
        }
    }

    #[test]
    fn guide_view_shapes() {
        let (_, _, world) = fixture(6);
        let goal = world.goal_node();
        // At the goal: single current observation.
        let at_goal = Pose { node: goal, heading: 2 };
        let view = guide_view(&world, at_goal, goal).unwrap();
        assert_eq!(view.len(), 1);
        assert_eq!(view[0], world::observation(&world, at_goal));
        // Far away: capped at five, each matching an independent recompute.
        let far = world
            .nodes
            .iter()
            .map(|n| n.id)
            .max_by_key(|id| (crate::world::distance(&world, *id, goal).unwrap() * 1e6) as u64)
            .unwrap();
        let pose = Pose { node: far, heading: 0 };
        let view = guide_view(&world, pose, goal).unwrap();
        let path = world::shortest_path(&world, far, goal, Some(5)).unwrap();
        assert_eq!(view.len(), path.len());
        let mut prev = far;
        for (obs, node) in view.iter().zip(&path) {
            let heading = world.direction_bucket(prev, *node);
            assert_eq!(*obs, world::observation(&world, Pose { node: *node, heading }));
            prev = *node;
        }
    }

    #[test]
    fn oracle_stopping_cases() {
        let (store, agents, world) = fixture(7);
        let cfg = GameConfig::default();
        for seed in 30..40u64 {
            let t = run_episode(
                &agents, &store, &world, start_pose(&world), world.goal_node(), &cfg, seed,
                &Selection::Plain, None,
            )
            .unwrap()
            .transcript;
            let oracle = oracle_stopping(&t);
            assert!(oracle >= t.final_goal_progress);
            assert!(oracle >= 0.0);
            assert_eq!(oracle, t.oracle_goal_progress);
        }
        // A stationary episode scores zero.
        let (mut store2, agents2, world2) = fixture(8);
        bias_stop(&mut store2, 50.0);
        let t = run_episode(
            &agents2, &store2, &world2, start_pose(&world2), world2.goal_node(), &cfg, 1,
            &Selection::Plain, None,
        )
        .unwrap()
        .transcript;
        assert_eq!(oracle_stopping(&t), 0.0);
    }

    #[test]
    fn question_first_flag_reorders_opening() {
        let (store, agents, world) = fixture(9);
        let cfg = GameConfig {
            question_first: true,
            ..GameConfig::default()
        };
        let t = run_episode(
            &agents, &store, &world, start_pose(&world), world.goal_node(), &cfg, 3,
            &Selection::Plain, None,
        )
        .unwrap()
        .transcript;
        assert_eq!(t.events[0].kind, "q");
        validate_transcript(&t, &cfg, &world).unwrap();
    }

    #[test]
    fn training_episode_records_align() {
        let (store, agents, world) = fixture(10);
        let cfg = GameConfig::default();
        let out = run_episode(
            &agents, &store, &world, start_pose(&world), world.goal_node(), &cfg, 12,
            &Selection::Plain, Some(0.5),
        )
        .unwrap();
        let data = out.train.unwrap();
        assert_eq!(data.nav_steps.len(), out.transcript.num_actions());
        // Rewards telescope exactly to the final goal progress.
        let total: f64 = data.nav_steps.iter().map(|s| s.reward).sum();
        assert_eq!(total, out.transcript.final_goal_progress);
    }
}
