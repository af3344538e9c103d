//! Recursive mental-model search over question-answer pairs.
//!
//! At a question point the speaker proposes N candidate questions and, for
//! each, N candidate answers. Every pair is evaluated by a mental rollout:
//! the pair is appended to a copy of the dialogue history and the navigator
//! is rolled forward on a throwaway tape. Deeper question points recurse
//! with branching decayed to one, under a total rollout budget. Training
//! selects the pair whose simulation ends closest to the goal; inference
//! selects by the navigator's own confidence. Mental work never touches the
//! real episode state or the parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{AgentError, Agents, GenMode, NavState, RunFlags};
use crate::gameplay::{guide_view, DialogueState, GameConfig};
use crate::lang::{self, DialogueHistory, Role, Utterance};
use crate::tensor::{ParamStore, Tape, Tensor};
use crate::training::{a2c_loss, ce_loss, step_reward, NavStepRecord, SpeakerExchangeRecord};
use crate::world::{self, NodeId, Pose, World, WorldError};

#[derive(Debug, Error)]
pub enum RmmError {
    #[error("rollout budget {budget} below the {pairs} top-level pairs")]
    BudgetTooSmall { budget: usize, pairs: usize },
    #[error("invalid mental-model config: {0}")]
    Invalid(String),
    #[error("no branches to select from")]
    EmptyBranches,
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

pub type RmmResult<T> = Result<T, RmmError>;

/// Scoring regime for candidate pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Smallest remaining shortest-path distance after the mental rollout
    /// (training only; uses privileged environment feedback).
    TrainDistance,
    /// Highest length-normalized log-probability of the rollout actions.
    InferConfidence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmmConfig {
    /// Branching factor N: candidates per role at the top level.
    pub n: usize,
    /// Actions per mental rollout segment.
    pub rollout_horizon: usize,
    /// Total rollout budget per exchange; 0 means the default 2*N^2.
    pub max_recursive_calls: usize,
    /// Language sampling temperature for sampled candidates.
    pub temperature: f32,
    pub selection: SelectionMode,
}

impl Default for RmmConfig {
    fn default() -> Self {
        Self {
            n: 3,
            rollout_horizon: 5,
            max_recursive_calls: 0,
            temperature: 0.6,
            selection: SelectionMode::TrainDistance,
        }
    }
}

impl RmmConfig {
    pub fn budget(&self) -> usize {
        if self.max_recursive_calls == 0 {
            2 * self.n * self.n
        } else {
            self.max_recursive_calls
        }
    }

    /// Deep layers granted to each pair after its top-level rollout.
    pub fn deep_allowance(&self) -> usize {
        self.budget() / (self.n * self.n) - 1
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.n == 0 {
            return Err("branching factor must be >= 1".into());
        }
        if self.rollout_horizon == 0 {
            return Err("rollout_horizon must be >= 1".into());
        }
        if self.temperature <= 0.0 {
            return Err("temperature must be > 0".into());
        }
        let pairs = self.n * self.n;
        if self.budget() < pairs {
            return Err(format!(
                "budget {} below the {pairs} top-level pairs",
                self.budget()
            ));
        }
        Ok(())
    }
}

/// Independent RNG stream families so mental work never perturbs the real
/// episode's draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    Question,
    Answer,
    Roll,
}

fn mix(parts: &[u64]) -> u64 {
    let mut x = 0x6c62_272e_07bb_0142u64;
    for p in parts {
        x ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        x = x.rotate_left(27).wrapping_mul(0x94d0_49bb_1331_11eb);
    }
    x
}

/// Depth-1 stream for a (exchange, pair) slot.
pub fn stream_rng(episode_seed: u64, exchange: usize, pair: usize, kind: StreamKind) -> ChaCha8Rng {
    deep_rng(episode_seed, exchange, pair, 1, kind)
}

/// Stream for deeper recursion layers.
pub fn deep_rng(
    episode_seed: u64,
    exchange: usize,
    pair: usize,
    depth: usize,
    kind: StreamKind,
) -> ChaCha8Rng {
    let salt = match kind {
        StreamKind::Question => 1,
        StreamKind::Answer => 2,
        StreamKind::Roll => 3,
    };
    ChaCha8Rng::seed_from_u64(mix(&[
        episode_seed,
        exchange as u64,
        pair as u64,
        depth as u64,
        salt,
    ]))
}

/// Frozen view of the real episode at a question point. Everything the
/// mental phase needs, copied by value.
pub struct RmmSnapshot {
    pub pose: Pose,
    pub history: DialogueHistory,
    pub nav_h: Tensor,
    pub nav_c: Tensor,
    pub prev_action: Option<world::Action>,
}

impl RmmSnapshot {
    pub fn freeze(tape: &Tape, state: &DialogueState, nav: NavState) -> Self {
        Self {
            pose: state.pose,
            history: state.history.clone(),
            nav_h: tape.value(nav.h),
            nav_c: tape.value(nav.c),
            prev_action: nav.prev_action,
        }
    }
}

/// A selected utterance carried out of the mental phase by value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChosenUtterance {
    pub utterance: Utterance,
    /// Raw emitted tokens including a terminating EOS when one was drawn.
    pub emitted: Vec<u32>,
    /// Sum of untempered log-probabilities of the emitted tokens.
    pub logprob: f64,
}

/// Per-pair outcome of the mental phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchResult {
    pub pair_index: usize,
    pub question: ChosenUtterance,
    pub answer: ChosenUtterance,
    /// Actions of the first rollout segment.
    pub trajectory: Vec<world::Action>,
    /// Remaining distance (train) or mean action log-probability (infer).
    pub score: f64,
    /// Goal progress of the full mental continuation from the exchange pose.
    pub mental_goal_progress: f64,
    pub rollouts_used: usize,
    pub deep_layers: usize,
    /// Candidate count generated at each deep layer (always 1).
    pub deep_branching: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmmOutcome {
    pub question: ChosenUtterance,
    pub answer: ChosenUtterance,
    pub chosen_index: usize,
    pub branches: Vec<BranchResult>,
    pub rollouts_used: usize,
}

/// Length-normalized confidence of a rollout from its per-step
/// log-probabilities.
pub fn confidence_score(step_logprobs: &[f64]) -> f64 {
    if step_logprobs.is_empty() {
        return f64::NEG_INFINITY;
    }
    step_logprobs.iter().sum::<f64>() / step_logprobs.len() as f64
}

/// Winning branch index: best score with ties broken by the lowest index.
pub fn select_best(branches: &[BranchResult], mode: SelectionMode) -> RmmResult<usize> {
    if branches.is_empty() {
        return Err(RmmError::EmptyBranches);
    }
    let better = |a: f64, b: f64| match mode {
        SelectionMode::TrainDistance => a < b,
        SelectionMode::InferConfidence => a > b,
    };
    let mut best = 0;
    for (i, b) in branches.iter().enumerate().skip(1) {
        if better(b.score, branches[best].score) {
            best = i;
        }
    }
    Ok(best)
}

/// Candidate decode mode for slot `k`: slot 0 samples (so a single-branch
/// search degenerates to the plain pipeline), slot 1 is the argmax
/// candidate, and further slots sample.
fn candidate_mode(k: usize, temperature: f32) -> GenMode {
    if k == 1 {
        GenMode::Argmax
    } else {
        GenMode::Sample { temperature }
    }
}

struct Continuation {
    final_pose: Pose,
    first_roll: Vec<world::Action>,
    first_roll_logprobs: Vec<f64>,
    rollouts_used: usize,
    deep_layers: usize,
    deep_branching: Vec<usize>,
    /// Per-step training quantities, only collected on a gradient tape.
    steps: Vec<NavStepRecord>,
}

/// Roll the navigator forward from the snapshot with `(question, answer)`
/// appended to a copy of the history; recurse at deeper question points
/// with branching one while the per-pair allowance lasts. Pure with respect
/// to the real episode.
#[allow(clippy::too_many_arguments)]
fn mental_continuation(
    agents: &Agents,
    store: &ParamStore,
    world: &World,
    goal: NodeId,
    game: &GameConfig,
    cfg: &RmmConfig,
    snapshot: &RmmSnapshot,
    pair_index: usize,
    episode_seed: u64,
    exchange: usize,
    question: &Utterance,
    answer: &Utterance,
    tape: &mut Tape,
    collect_steps: bool,
) -> RmmResult<Continuation> {
    let flags = RunFlags::eval();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(0); // eval mode: never drawn
    let mut history = snapshot.history.clone();
    history.push(question.clone(), answer.clone());
    let mut pose = snapshot.pose;
    let h = tape.constant(snapshot.nav_h.clone());
    let c = tape.constant(snapshot.nav_c.clone());
    let mut nav = NavState {
        h,
        c,
        prev_action: snapshot.prev_action,
    };
    let mut out = Continuation {
        final_pose: pose,
        first_roll: Vec::new(),
        first_roll_logprobs: Vec::new(),
        rollouts_used: 0,
        deep_layers: 0,
        deep_branching: Vec::new(),
        steps: Vec::new(),
    };
    let allowance = cfg.deep_allowance();
    let mut depth = 1usize;
    loop {
        let tokens = lang::build_context(&history, game.context_mode, game.history_cap);
        let ctx = agents
            .navigator
            .encode_context(tape, store, &tokens, flags, &mut noise_rng)?;
        let mut roll_rng = deep_rng(episode_seed, exchange, pair_index, depth, StreamKind::Roll);
        // Training simulates a sampled continuation; inference scores the
        // modal trajectory, the sequence with the highest probability.
        let roll_mode = match cfg.selection {
            SelectionMode::TrainDistance => GenMode::Sample { temperature: 1.0 },
            SelectionMode::InferConfidence => GenMode::Argmax,
        };
        let mut pose_before = pose;
        let rollout = crate::agents::decode_actions(
            &agents.navigator,
            tape,
            store,
            &ctx,
            nav,
            pose,
            world,
            roll_mode,
            cfg.rollout_horizon,
            flags,
            &mut roll_rng,
        )?;
        out.rollouts_used += 1;
        if depth == 1 {
            out.first_roll = rollout.actions();
            out.first_roll_logprobs = rollout.steps.iter().map(|s| s.logprob).collect();
        }
        if collect_steps {
            for s in &rollout.steps {
                out.steps.push(NavStepRecord {
                    logits: s.logits,
                    value: s.value,
                    action: s.action,
                    reward: step_reward(world, pose_before, s.pose, goal)?,
                    teacher: world::teacher_action(world, pose_before, goal)?,
                });
                pose_before = s.pose;
            }
        }
        let stopped = rollout.stopped();
        pose = rollout.poses().last().copied().unwrap_or(pose);
        nav = rollout.final_state;
        if stopped
            || cfg.selection == SelectionMode::InferConfidence
            || out.deep_layers >= allowance
        {
            break;
        }
        // Deeper question point: branching decays to one argmax pair.
        depth += 1;
        let mut q_rng = deep_rng(episode_seed, exchange, pair_index, depth, StreamKind::Question);
        let q_images = vec![world::observation(world, pose)];
        let target = history.target_object;
        let q = agents.speaker.generate(
            tape,
            store,
            Role::Question,
            &q_images,
            &[target],
            GenMode::Argmax,
            flags,
            &mut q_rng,
        )?;
        let a_images = guide_view(world, pose, goal)?;
        let mut a_cond = vec![target];
        a_cond.extend(&q.utterance.tokens);
        let mut a_rng = deep_rng(episode_seed, exchange, pair_index, depth, StreamKind::Answer);
        let a = agents.speaker.generate(
            tape,
            store,
            Role::Answer,
            &a_images,
            &a_cond,
            GenMode::Argmax,
            flags,
            &mut a_rng,
        )?;
        out.deep_branching.push(1);
        out.deep_layers += 1;
        history.push(q.utterance, a.utterance)
    }
    out.final_pose = pose;
    Ok(out)
}

/// Fan out N questions and N answers per question, evaluate all N^2 pairs
/// by mental rollout, and return the selected pair with full per-branch
/// instrumentation. The real state, tape, and parameters are untouched.
#[allow(clippy::too_many_arguments)]
pub fn rmm_exchange(
    agents: &Agents,
    store: &ParamStore,
    world: &World,
    goal: NodeId,
    game: &GameConfig,
    cfg: &RmmConfig,
    snapshot: &RmmSnapshot,
    episode_seed: u64,
    exchange: usize,
) -> RmmResult<RmmOutcome> {
    cfg.validate().map_err(RmmError::Invalid)?;
    let flags = RunFlags::eval();
    let mut tape = Tape::new(false);
    let target = snapshot.history.target_object;

    let q_images = vec![world::observation(world, snapshot.pose)];
    let mut questions = Vec::with_capacity(cfg.n);
    for qi in 0..cfg.n {
        let mut rng = stream_rng(episode_seed, exchange, qi, StreamKind::Question);
        let spoken = agents.speaker.generate(
            &mut tape,
            store,
            Role::Question,
            &q_images,
            &[target],
            candidate_mode(qi, cfg.temperature),
            flags,
            &mut rng,
        )?;
        questions.push(ChosenUtterance {
            utterance: spoken.utterance,
            emitted: spoken.emitted,
            logprob: spoken.logprob,
        });
    }

    let a_images = guide_view(world, snapshot.pose, goal)?;
    let d_before = world::distance(world, snapshot.pose.node, goal)?;
    let mut branches = Vec::with_capacity(cfg.n * cfg.n);
    let mut rollouts_used = 0usize;
    for qi in 0..cfg.n {
        for ai in 0..cfg.n {
            let pair_index = qi * cfg.n + ai;
            let mut a_cond = vec![target];
            a_cond.extend(&questions[qi].utterance.tokens);
            let mut rng = stream_rng(episode_seed, exchange, pair_index, StreamKind::Answer);
            let spoken = agents.speaker.generate(
                &mut tape,
                store,
                Role::Answer,
                &a_images,
                &a_cond,
                candidate_mode(ai, cfg.temperature),
                flags,
                &mut rng,
            )?;
            let answer = ChosenUtterance {
                utterance: spoken.utterance,
                emitted: spoken.emitted,
                logprob: spoken.logprob,
            };
            let cont = mental_continuation(
                agents, store, world, goal, game, cfg, snapshot, pair_index, episode_seed,
                exchange, &questions[qi].utterance, &answer.utterance, &mut tape, false,
            )?;
            rollouts_used += cont.rollouts_used;
            let remaining = world::distance(world, cont.final_pose.node, goal)?;
            let score = match cfg.selection {
                SelectionMode::TrainDistance => remaining,
                SelectionMode::InferConfidence => confidence_score(&cont.first_roll_logprobs),
            };
            branches.push(BranchResult {
                pair_index,
                question: questions[qi].clone(),
                answer,
                trajectory: cont.first_roll,
                score,
                mental_goal_progress: d_before - remaining,
                rollouts_used: cont.rollouts_used,
                deep_layers: cont.deep_layers,
                deep_branching: cont.deep_branching,
            });
        }
    }
    debug_assert!(rollouts_used <= cfg.budget());
    let chosen_index = select_best(&branches, cfg.selection)?;
    Ok(RmmOutcome {
        question: branches[chosen_index].question.clone(),
        answer: branches[chosen_index].answer.clone(),
        chosen_index,
        branches,
        rollouts_used,
    })
}

/// Re-run the winning branch on the training tape to obtain gradient-
/// carrying loss terms: scripted-target cross-entropy for the chosen
/// question/answer, the emitted-token likelihood for the policy-gradient
/// term, and the branch's navigator loss replayed step for step.
#[allow(clippy::too_many_arguments)]
pub fn recompute_chosen_branch(
    agents: &Agents,
    store: &ParamStore,
    world: &World,
    goal: NodeId,
    game: &GameConfig,
    cfg: &RmmConfig,
    snapshot: &RmmSnapshot,
    episode_seed: u64,
    exchange: usize,
    outcome: &RmmOutcome,
    tape: &mut Tape,
    flags: RunFlags,
    noise_rng: &mut ChaCha8Rng,
) -> RmmResult<SpeakerExchangeRecord> {
    let target = snapshot.history.target_object;
    let q_images = vec![world::observation(world, snapshot.pose)];
    let a_images = guide_view(world, snapshot.pose, goal)?;

    let scripted_q = lang::script_question(snapshot.pose, world, &agents.vocab);
    let path5 = world::shortest_path(world, snapshot.pose.node, goal, Some(5))?;
    let scripted_a = lang::script_answer(&path5, world, &agents.vocab);

    let q_cond = [target];
    let mut a_cond = vec![target];
    a_cond.extend(&outcome.question.utterance.tokens);

    let (q_ce, q_ce_tokens) = agents.speaker.score_tokens(
        tape, store, Role::Question, &q_images, &q_cond, &scripted_q.tokens, true, flags,
        noise_rng,
    )?;
    let (a_ce, a_ce_tokens) = agents.speaker.score_tokens(
        tape, store, Role::Answer, &a_images, &a_cond, &scripted_a.tokens, true, flags, noise_rng,
    )?;
    let (q_nll, _) = agents.speaker.score_tokens(
        tape, store, Role::Question, &q_images, &q_cond, &outcome.question.emitted, false, flags,
        noise_rng,
    )?;
    let (a_nll, _) = agents.speaker.score_tokens(
        tape, store, Role::Answer, &a_images, &a_cond, &outcome.answer.emitted, false, flags,
        noise_rng,
    )?;

    let chosen = &outcome.branches[outcome.chosen_index];
    let cont = mental_continuation(
        agents,
        store,
        world,
        goal,
        game,
        cfg,
        snapshot,
        chosen.pair_index,
        episode_seed,
        exchange,
        &outcome.question.utterance,
        &outcome.answer.utterance,
        tape,
        true,
    )?;
    debug_assert_eq!(cont.first_roll, chosen.trajectory, "mental replay diverged");
    let branch_ce = ce_loss(tape, &cont.steps)?;
    let branch_rl = a2c_loss(tape, &cont.steps, 1)?;
    let branch_nav_loss = tape.add(branch_ce, branch_rl)?;

    let mean_gp = outcome
        .branches
        .iter()
        .map(|b| b.mental_goal_progress)
        .sum::<f64>()
        / outcome.branches.len() as f64;
    // Normalized by the remaining distance so the weight is scale-free
    // across worlds and episode stages.
    let scale = world::distance(world, snapshot.pose.node, goal)?.max(1.0);
    let branch_advantage = (chosen.mental_goal_progress - mean_gp) / scale;

    Ok(SpeakerExchangeRecord {
        q_ce,
        a_ce,
        q_ce_tokens,
        a_ce_tokens,
        q_nll,
        a_nll,
        branch_nav_loss,
        branch_advantage,
    })
}

/// Per-exchange debug dump mirroring the instrumentation fields.
pub fn debug_dump(outcome: &RmmOutcome, vocab: &crate::lang::Vocabulary) -> serde_json::Value {
    serde_json::json!({
        "pairs": outcome
            .branches
            .iter()
            .map(|b| {
                serde_json::json!({
                    "q": vocab.render(&b.question.utterance.tokens),
                    "a": vocab.render(&b.answer.utterance.tokens),
                    "score": b.score,
                    "rollout_len": b.trajectory.len(),
                })
            })
            .collect::<Vec<_>>(),
        "chosen_index": outcome.chosen_index,
        "rollouts_used": outcome.rollouts_used,
    })
}
