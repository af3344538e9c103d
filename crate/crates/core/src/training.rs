//! Losses, optimizer-facing update steps, pretraining, self-play, and the
//! data-augmentation baseline.
//!
//! The navigator trains on the sum of teacher-forced cross-entropy (against
//! shortest-path actions) and an advantage actor-critic term whose reward
//! is the per-step goal-progress delta. The shared speaker trains on token
//! cross-entropy against the scripted grammar plus, in mental-model
//! self-play, an advantage-weighted likelihood term on its own emissions
//! and the winning branch's replayed navigator loss.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::agents::{AgentError, Agents, GenMode, NavState, RunFlags};
use crate::gameplay::{self, GameConfig, GameError, Selection};
use crate::lang::{CorpusRecord, LangError};
use crate::rmm::RmmConfig;
use crate::tensor::{
    adam_step, rmsprop_step, AdamConfig, ParamStore, RmsPropConfig, Tape, TensorError, Var,
};
use crate::world::{self, Action, NodeId, Pose, World, WorldError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("corpus references unknown world seed {0}")]
    UnknownWorld(u64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Lang(#[from] LangError),
    #[error(transparent)]
    Game(#[from] Box<GameError>),
}

impl From<GameError> for TrainError {
    fn from(e: GameError) -> Self {
        TrainError::Game(Box::new(e))
    }
}

pub type TrainResult<T> = Result<T, TrainError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_nav: f32,
    pub wd_nav: f32,
    pub lr_spk: f32,
    pub dropout: f32,
    pub batch_pretrain: usize,
    pub iters_pretrain: usize,
    pub batch_selfplay: usize,
    pub iters_selfplay: usize,
    /// TD horizon for the advantage estimate.
    pub td_k: usize,
    /// Mixing weight for generated pairs in data augmentation.
    pub lambda_da: f64,
    /// Weight of the actor-critic term relative to cross-entropy.
    pub rl_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_nav: 1e-4,
            wd_nav: 5e-4,
            lr_spk: 1e-4,
            dropout: 0.5,
            batch_pretrain: 100,
            iters_pretrain: 20_000,
            batch_selfplay: 10,
            iters_selfplay: 5_000,
            td_k: 1,
            lambda_da: 0.1,
            rl_weight: 1.0,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> TrainResult<()> {
        if self.lr_nav <= 0.0 || self.lr_spk <= 0.0 {
            return Err(TrainError::InvalidConfig("learning rates must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TrainError::InvalidConfig("dropout must be in [0,1)".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda_da) {
            return Err(TrainError::InvalidConfig("lambda_da must be in [0,1]".into()));
        }
        if self.td_k == 0 {
            return Err(TrainError::InvalidConfig("td_k must be >= 1".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr_nav,
            weight_decay: self.wd_nav,
            ..AdamConfig::default()
        }
    }

    pub fn rmsprop(&self) -> RmsPropConfig {
        RmsPropConfig {
            lr: self.lr_spk,
            ..RmsPropConfig::default()
        }
    }
}

/// One recorded policy step with everything both losses need.
pub struct NavStepRecord {
    pub logits: Var,
    pub value: Var,
    pub action: Action,
    /// Goal-progress delta earned by this step.
    pub reward: f64,
    /// Shortest-path action from the pre-step pose.
    pub teacher: Action,
}

/// Speaker training quantities for one mental-model exchange.
pub struct SpeakerExchangeRecord {
    /// Cross-entropy of the scripted question/answer at this state.
    pub q_ce: Var,
    pub a_ce: Var,
    pub q_ce_tokens: usize,
    pub a_ce_tokens: usize,
    /// Negative log-likelihood of the tokens actually emitted.
    pub q_nll: Var,
    pub a_nll: Var,
    /// Replayed navigator loss of the winning branch.
    pub branch_nav_loss: Var,
    /// Winning branch's goal progress minus the branch mean.
    pub branch_advantage: f64,
}

/// Gradient-carrying record of one training episode.
pub struct EpisodeTrainData {
    pub tape: Tape,
    pub nav_steps: Vec<NavStepRecord>,
    pub speaker_exchanges: Vec<SpeakerExchangeRecord>,
    pub final_goal_progress: f64,
}

/// Dense per-step reward: distance reduction toward the goal.
pub fn step_reward(
    world: &World,
    before: Pose,
    after: Pose,
    goal: NodeId,
) -> Result<f64, WorldError> {
    world::goal_progress(world, before.node, after.node, goal)
}

/// Teacher-forced action cross-entropy summed over the steps.
pub fn ce_loss(tape: &mut Tape, steps: &[NavStepRecord]) -> Result<Var, TensorError> {
    let mut terms = Vec::with_capacity(steps.len());
    for s in steps {
        terms.push(tape.cross_entropy(s.logits, s.teacher.index())?);
    }
    sum_scalars(tape, &terms)
}

fn sum_scalars(tape: &mut Tape, terms: &[Var]) -> Result<Var, TensorError> {
    // Folded scalar adds keep the f64 view alive for loss evaluation.
    let mut it = terms.iter();
    let Some(first) = it.next() else {
        return Ok(tape.constant(crate::tensor::Tensor::scalar(0.0)));
    };
    let mut acc = *first;
    for t in it {
        acc = tape.add(acc, *t)?;
    }
    Ok(acc)
}

/// Detached quantities of the advantage actor-critic loss: the advantage
/// weighting each policy log-likelihood and the gradient-stopped k-step
/// bootstrap target of each critic term.
#[derive(Debug, Clone)]
pub struct A2cPins {
    pub advantage: Vec<f64>,
    pub target: Vec<f64>,
}

/// Read the k-step TD quantities off the recorded values. `bootstrap` is
/// the value of the state after the final action; episodes end on stop or
/// budget, so gameplay uses `None` (zero).
pub fn a2c_pins(
    tape: &Tape,
    steps: &[NavStepRecord],
    k: usize,
    bootstrap: Option<Var>,
) -> Result<A2cPins, TensorError> {
    let t_len = steps.len();
    let mut advantage = Vec::with_capacity(t_len);
    let mut target = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut ret = 0.0f64;
        for i in 0..k {
            if t + i < t_len {
                ret += steps[t + i].reward;
            }
        }
        let boot = if t + k < t_len {
            tape.scalar64(steps[t + k].value)?
        } else if t + k == t_len {
            match bootstrap {
                Some(v) => tape.scalar64(v)?,
                None => 0.0,
            }
        } else {
            0.0
        };
        let tgt = ret + boot;
        target.push(tgt);
        advantage.push(tgt - tape.scalar64(steps[t].value)?);
    }
    Ok(A2cPins { advantage, target })
}

/// Actor and critic terms built from pinned TD quantities: the actor term
/// scales each policy log-likelihood by the (detached) advantage, the
/// critic term regresses each value toward its gradient-stopped target.
pub fn a2c_parts_pinned(
    tape: &mut Tape,
    steps: &[NavStepRecord],
    pins: &A2cPins,
) -> Result<(Var, Var), TensorError> {
    let mut actor_terms = Vec::with_capacity(steps.len());
    let mut critic_terms = Vec::with_capacity(steps.len());
    for (t, s) in steps.iter().enumerate() {
        let tgt = tape.constant(crate::tensor::Tensor::scalar(pins.target[t] as f32));
        let residual = tape.sub(tgt, s.value)?;
        let sq = tape.mul(residual, residual)?;
        critic_terms.push(tape.scale(sq, 0.5)?);
        let nll = tape.cross_entropy(s.logits, s.action.index())?;
        actor_terms.push(tape.scale(nll, pins.advantage[t] as f32)?);
    }
    let actor = sum_scalars(tape, &actor_terms)?;
    let critic = sum_scalars(tape, &critic_terms)?;
    Ok((actor, critic))
}

/// Actor and critic terms with the detached quantities read live from the
/// recorded values.
pub fn a2c_parts(
    tape: &mut Tape,
    steps: &[NavStepRecord],
    k: usize,
    bootstrap: Option<Var>,
) -> Result<(Var, Var), TensorError> {
    let pins = a2c_pins(tape, steps, k, bootstrap)?;
    a2c_parts_pinned(tape, steps, &pins)
}

/// Combined actor + critic loss with the terminal bootstrap at zero.
pub fn a2c_loss(tape: &mut Tape, steps: &[NavStepRecord], k: usize) -> Result<Var, TensorError> {
    let (actor, critic) = a2c_parts(tape, steps, k, None)?;
    tape.add(actor, critic)
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct NavUpdateReport {
    pub loss_ce: f64,
    pub loss_actor: f64,
    pub loss_critic: f64,
    pub loss_total: f64,
    /// Total recorded steps across the batch (for per-step views).
    pub steps: usize,
}

/// Batch update of the navigator (and critic): mean over episodes of
/// `ce + rl_weight * (actor + critic)`, one Adam step, gradients cleared.
pub fn navigator_update(
    store: &mut ParamStore,
    episodes: &mut [EpisodeTrainData],
    cfg: &TrainConfig,
) -> TrainResult<NavUpdateReport> {
    if episodes.is_empty() {
        return Err(TrainError::InvalidConfig("empty episode batch".into()));
    }
    let inv_b = 1.0 / episodes.len() as f32;
    let mut report = NavUpdateReport::default();
    for ep in episodes.iter_mut() {
        report.steps += ep.nav_steps.len();
        let ce = ce_loss(&mut ep.tape, &ep.nav_steps)?;
        let (actor, critic) = a2c_parts(&mut ep.tape, &ep.nav_steps, cfg.td_k, None)?;
        let rl = ep.tape.add(actor, critic)?;
        let rl_w = ep.tape.scale(rl, cfg.rl_weight as f32)?;
        let total = ep.tape.add(ce, rl_w)?;
        report.loss_ce += ep.tape.scalar64(ce)?;
        report.loss_actor += ep.tape.scalar64(actor)?;
        report.loss_critic += ep.tape.scalar64(critic)?;
        report.loss_total += ep.tape.scalar64(total)?;
        let scaled = ep.tape.scale(total, inv_b)?;
        ep.tape.backward(scaled, store)?;
    }
    let b = episodes.len() as f64;
    report.loss_ce /= b;
    report.loss_actor /= b;
    report.loss_critic /= b;
    report.loss_total /= b;
    adam_step(store, "nav/", &cfg.adam())?;
    adam_step(store, "critic/", &cfg.adam())?;
    store.zero_grads();
    Ok(report)
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct SpeakerUpdateReport {
    pub loss_ce: f64,
    pub loss_reinforce: f64,
    pub loss_branch_nav: f64,
    pub exchanges: usize,
}

/// Speaker update from mental-model exchanges: scripted-target
/// cross-entropy, advantage-weighted likelihood of the emitted tokens, and
/// the winning branch's navigator loss. Steps `spk/*` with RMSProp. The
/// branch loss also deposits gradients on `nav/*` and `critic/*`; they are
/// left in place so a following navigator update consumes the end-to-end
/// sum (zeroing is the caller's convention).
pub fn speaker_update(
    store: &mut ParamStore,
    episodes: &mut [EpisodeTrainData],
    cfg: &TrainConfig,
) -> TrainResult<SpeakerUpdateReport> {
    let total: usize = episodes.iter().map(|e| e.speaker_exchanges.len()).sum();
    let mut report = SpeakerUpdateReport {
        exchanges: total,
        ..Default::default()
    };
    if total == 0 {
        return Ok(report);
    }
    let inv = 1.0 / total as f32;
    for ep in episodes.iter_mut() {
        if ep.speaker_exchanges.is_empty() {
            continue;
        }
        let mut terms = Vec::new();
        for ex in &ep.speaker_exchanges {
            let ce = ep.tape.add(ex.q_ce, ex.a_ce)?;
            let nll = ep.tape.add(ex.q_nll, ex.a_nll)?;
            let reinforce = ep.tape.scale(nll, ex.branch_advantage as f32)?;
            let partial = ep.tape.add(ce, reinforce)?;
            let with_branch = ep.tape.add(partial, ex.branch_nav_loss)?;
            report.loss_ce += ep.tape.scalar64(ce)?;
            report.loss_reinforce += ep.tape.scalar64(reinforce)?;
            report.loss_branch_nav += ep.tape.scalar64(ex.branch_nav_loss)?;
            terms.push(with_branch);
        }
        let sum = sum_scalars(&mut ep.tape, &terms)?;
        let scaled = ep.tape.scale(sum, inv)?;
        ep.tape.backward(scaled, store)?;
    }
    report.loss_ce /= total as f64;
    report.loss_reinforce /= total as f64;
    report.loss_branch_nav /= total as f64;
    rmsprop_step(store, "spk/", &cfg.rmsprop())?;
    Ok(report)
}

/// Per-iteration training log row.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub iter: usize,
    pub loss_ce: f64,
    pub loss_actor: f64,
    pub loss_critic: f64,
    pub loss_spk: f64,
    pub mean_goal_progress: f64,
}

/// A corpus record resolved against its world with replayed poses.
#[derive(Debug, Clone)]
pub struct PreparedRecord {
    pub world_idx: usize,
    /// Pose at the start of this burst (also the exchange pose).
    pub start: Pose,
    pub context: Vec<u32>,
    pub teacher_actions: Vec<Action>,
    pub question: Vec<u32>,
    pub answer: Vec<u32>,
    pub path5: Vec<NodeId>,
}

/// A whole scripted conversation, for data augmentation.
#[derive(Debug, Clone)]
pub struct Conversation {
    pub world_idx: usize,
    pub start: Pose,
    /// Final dialogue context of the conversation.
    pub context: Vec<u32>,
}

pub struct PreparedCorpus {
    pub records: Vec<PreparedRecord>,
    pub conversations: Vec<Conversation>,
}

/// Resolve corpus records against their worlds, replaying action bursts to
/// recover the pose at every burst start.
pub fn prepare_corpus(
    worlds: &[World],
    records: &[CorpusRecord],
    corpus_seed: u64,
) -> TrainResult<PreparedCorpus> {
    if records.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let by_seed: BTreeMap<u64, usize> = worlds
        .iter()
        .enumerate()
        .map(|(i, w)| (w.seed, i))
        .collect();
    let mut out = Vec::with_capacity(records.len());
    let mut conversations = Vec::new();
    let mut cursor: BTreeMap<(u64, u64), Pose> = BTreeMap::new();
    for r in records {
        let world_idx = *by_seed
            .get(&r.world_seed)
            .ok_or(TrainError::UnknownWorld(r.world_seed))?;
        let world = &worlds[world_idx];
        let key = (r.world_seed, r.episode_id);
        let start = *cursor
            .entry(key)
            .or_insert_with(|| crate::lang::episode_start(world, corpus_seed, r.episode_id));
        out.push(PreparedRecord {
            world_idx,
            start,
            context: r.context_tokens.clone(),
            teacher_actions: r.nav_actions.clone(),
            question: r.question_tokens.clone(),
            answer: r.answer_tokens.clone(),
            path5: r.path5.clone(),
        });
        let mut pose = start;
        for a in &r.nav_actions {
            pose = world::step(world, pose, *a);
        }
        cursor.insert(key, pose);
        // The final record of an episode closes the conversation.
        if r.nav_actions.last() == Some(&Action::Stop) {
            let ep_start = crate::lang::episode_start(world, corpus_seed, r.episode_id);
            conversations.push(Conversation {
                world_idx,
                start: ep_start,
                context: r.context_tokens.clone(),
            });
        }
    }
    Ok(PreparedCorpus {
        records: out,
        conversations,
    })
}

/// Navigator loss for one prepared record: the decoder consumes its own
/// sampled action from the previous step while the loss target is the live
/// shortest-path action (student sampling).
#[allow(clippy::too_many_arguments)]
fn nav_record_loss(
    tape: &mut Tape,
    agents: &Agents,
    store: &ParamStore,
    world: &World,
    rec: &PreparedRecord,
    flags: RunFlags,
    sample_rng: &mut ChaCha8Rng,
    noise_rng: &mut ChaCha8Rng,
) -> TrainResult<(Var, f64)> {
    let goal = world.goal_node();
    let ctx = agents
        .navigator
        .encode_context(tape, store, &rec.context, flags, noise_rng)?;
    let mut state = agents.navigator.start_state(&ctx);
    let mut pose = rec.start;
    let mut terms = Vec::new();
    for _ in 0..rec.teacher_actions.len() {
        let obs = world::observation(world, pose);
        let step = agents
            .navigator
            .policy_step(tape, store, &state, &obs, &ctx, flags, noise_rng)?;
        let teacher = world::teacher_action(world, pose, goal)?;
        terms.push(tape.cross_entropy(step.logits, teacher.index())?);
        let logits = tape.data(step.logits).to_vec();
        let sampled = sample_categorical(&logits, sample_rng);
        let action = Action::from_index(sampled).expect("action index");
        pose = world::step(world, pose, action);
        state = NavState {
            prev_action: Some(action),
            ..step.state
        };
    }
    let count = terms.len().max(1) as f64;
    let loss = sum_scalars(tape, &terms)?;
    let value = tape.scalar64(loss)?;
    Ok((loss, value / count))
}

fn sample_categorical(logits: &[f32], rng: &mut ChaCha8Rng) -> usize {
    let m = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|x| (*x as f64 - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let u: f64 = rng.random::<f64>() * z;
    let mut acc = 0.0;
    for (i, e) in exps.iter().enumerate() {
        acc += e;
        if u < acc {
            return i;
        }
    }
    exps.len() - 1
}

/// Speaker loss for one prepared record's scripted exchange, if any.
fn speaker_record_loss(
    tape: &mut Tape,
    agents: &Agents,
    store: &ParamStore,
    world: &World,
    rec: &PreparedRecord,
    flags: RunFlags,
    noise_rng: &mut ChaCha8Rng,
) -> TrainResult<Option<(Var, usize)>> {
    if rec.question.is_empty() {
        return Ok(None);
    }
    let target = rec.context.first().copied().unwrap_or(0);
    let q_images = vec![world::observation(world, rec.start)];
    let (q_loss, q_n) = agents.speaker.score_tokens(
        tape,
        store,
        crate::lang::Role::Question,
        &q_images,
        &[target],
        &rec.question,
        true,
        flags,
        noise_rng,
    )?;
    let a_images = gameplay::path_observations(world, rec.start.node, &rec.path5, rec.start);
    let mut a_cond = vec![target];
    a_cond.extend(&rec.question);
    let (a_loss, a_n) = agents.speaker.score_tokens(
        tape,
        store,
        crate::lang::Role::Answer,
        &a_images,
        &a_cond,
        &rec.answer,
        true,
        flags,
        noise_rng,
    )?;
    let loss = tape.add(q_loss, a_loss)?;
    Ok(Some((loss, q_n + a_n)))
}

/// Supervised pretraining of navigator and speaker on the scripted corpus.
/// Returns the per-iteration log.
pub fn pretrain(
    agents: &Agents,
    store: &mut ParamStore,
    worlds: &[World],
    corpus: &PreparedCorpus,
    cfg: &TrainConfig,
) -> TrainResult<Vec<TrainLogRow>> {
    cfg.validate()?;
    if corpus.records.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let flags = RunFlags::train(cfg.dropout);
    let mut pick_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x517c_c1b7_2722_0a95));
    let mut log = Vec::with_capacity(cfg.iters_pretrain);
    for iter in 0..cfg.iters_pretrain {
        let mut nav_tape = Tape::new(true);
        let mut spk_tape = Tape::new(true);
        let mut sample_rng =
            ChaCha8Rng::seed_from_u64(cfg.seed ^ (iter as u64).wrapping_mul(0x2545_f491));
        let mut noise_rng =
            ChaCha8Rng::seed_from_u64(cfg.seed ^ (iter as u64).wrapping_mul(0x9e37_79b9) ^ 0xd1b5);
        let mut nav_terms = Vec::new();
        let mut spk_terms = Vec::new();
        let mut nav_mean = 0.0;
        let mut spk_tokens = 0usize;
        for _ in 0..cfg.batch_pretrain {
            let rec = &corpus.records[pick_rng.random_range(0..corpus.records.len())];
            let world = &worlds[rec.world_idx];
            let (loss, mean) = nav_record_loss(
                &mut nav_tape, agents, store, world, rec, flags, &mut sample_rng, &mut noise_rng,
            )?;
            nav_terms.push(loss);
            nav_mean += mean;
            if let Some((spk_loss, n)) = speaker_record_loss(
                &mut spk_tape, agents, store, world, rec, flags, &mut noise_rng,
            )? {
                spk_terms.push(spk_loss);
                spk_tokens += n;
            }
        }
        let nav_sum = sum_scalars(&mut nav_tape, &nav_terms)?;
        let nav_batch = nav_tape.scale(nav_sum, 1.0 / cfg.batch_pretrain as f32)?;
        let nav_value = nav_tape.scalar64(nav_batch)?;
        nav_tape.backward(nav_batch, store)?;
        adam_step(store, "nav/", &cfg.adam())?;
        store.zero_grads();

        let spk_value = if spk_terms.is_empty() {
            0.0
        } else {
            let spk_sum = sum_scalars(&mut spk_tape, &spk_terms)?;
            let spk_batch = spk_tape.scale(spk_sum, 1.0 / spk_tokens.max(1) as f32)?;
            let v = spk_tape.scalar64(spk_batch)?;
            spk_tape.backward(spk_batch, store)?;
            rmsprop_step(store, "spk/", &cfg.rmsprop())?;
            store.zero_grads();
            v
        };

        log.push(TrainLogRow {
            iter,
            loss_ce: nav_value,
            loss_actor: 0.0,
            loss_critic: 0.0,
            loss_spk: spk_value,
            mean_goal_progress: nav_mean / cfg.batch_pretrain as f64,
        });
    }
    Ok(log)
}

/// Self-play method selector mirroring the evaluation table rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    DataAug,
    Rmm1,
    Rmm3,
}

impl Method {
    pub fn selection(&self, rmm: &RmmConfig) -> Selection {
        match self {
            Method::Baseline | Method::DataAug => Selection::Plain,
            Method::Rmm1 => Selection::Rmm(RmmConfig { n: 1, ..*rmm }),
            Method::Rmm3 => Selection::Rmm(RmmConfig { n: 3, ..*rmm }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::DataAug => "da",
            Method::Rmm1 => "rmm_n1",
            Method::Rmm3 => "rmm_n3",
        }
    }
}

/// Derive the episode seed and start pose for self-play/eval episode `idx`.
/// Starts inside the goal room are re-rolled: a zero-distance episode can
/// make no progress and only adds noise.
pub fn derive_episode(world: &World, run_seed: u64, idx: u64) -> (u64, Pose) {
    let seed = run_seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(world.seed.rotate_left(23))
        .wrapping_add(idx.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0ddc_0ffe_e0dd_f00d);
    let mut start = Pose {
        node: NodeId(rng.random_range(0..world.num_nodes())),
        heading: rng.random_range(0..4),
    };
    for _ in 0..32 {
        if world.nodes[start.node.0].room != world.goal_room {
            break;
        }
        start = Pose {
            node: NodeId(rng.random_range(0..world.num_nodes())),
            heading: rng.random_range(0..4),
        };
    }
    (seed, start)
}

/// Gameplay self-play: run training episodes and update the navigator (and,
/// for the mental-model method, the speaker).
#[allow(clippy::too_many_arguments)]
pub fn selfplay(
    agents: &Agents,
    store: &mut ParamStore,
    worlds: &[World],
    method: Method,
    cfg: &TrainConfig,
    game: &GameConfig,
    rmm: &RmmConfig,
    run_seed: u64,
) -> TrainResult<Vec<TrainLogRow>> {
    cfg.validate()?;
    if worlds.is_empty() {
        return Err(TrainError::InvalidConfig("no training worlds".into()));
    }
    let selection = method.selection(rmm);
    let mut log = Vec::with_capacity(cfg.iters_selfplay);
    for iter in 0..cfg.iters_selfplay {
        let mut episodes = Vec::with_capacity(cfg.batch_selfplay);
        let mut mean_gp = 0.0;
        for b in 0..cfg.batch_selfplay {
            let idx = (iter * cfg.batch_selfplay + b) as u64;
            let world = &worlds[idx as usize % worlds.len()];
            let (episode_seed, start) = derive_episode(world, run_seed, idx);
            let goal = world.goal_node();
            let out = gameplay::run_episode(
                agents,
                store,
                world,
                start,
                goal,
                game,
                episode_seed,
                &selection,
                Some(cfg.dropout),
            )?;
            let train = out.train.expect("training episode carries data");
            mean_gp += train.final_goal_progress;
            episodes.push(train);
        }
        // Speaker first: its branch-loss gradients stay in the store so
        // the navigator step consumes the end-to-end sum.
        let spk = match method {
            Method::Rmm1 | Method::Rmm3 => speaker_update(store, &mut episodes, cfg)?,
            _ => SpeakerUpdateReport::default(),
        };
        let nav = navigator_update(store, &mut episodes, cfg)?;
        // Logged navigation loss is per step so the curve is comparable
        // across episode lengths.
        let per_step = nav.loss_ce * cfg.batch_selfplay as f64 / nav.steps.max(1) as f64;
        log.push(TrainLogRow {
            iter,
            loss_ce: per_step,
            loss_actor: nav.loss_actor,
            loss_critic: nav.loss_critic,
            loss_spk: spk.loss_ce + spk.loss_reinforce + spk.loss_branch_nav,
            mean_goal_progress: mean_gp / cfg.batch_selfplay as f64,
        });
    }
    Ok(log)
}

/// Instrumented mixing report for the data-augmentation update.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct MixReport {
    pub lambda: f64,
    /// Mean raw losses before weighting.
    pub aug_raw_nav: f64,
    pub human_raw_nav: f64,
    pub aug_raw_spk: f64,
    pub human_raw_spk: f64,
    /// Contributions actually added to the optimized loss.
    pub aug_weighted_nav: f64,
    pub human_weighted_nav: f64,
    pub aug_weighted_spk: f64,
    pub human_weighted_spk: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DaReport {
    pub rollouts_per_conversation: usize,
    pub retained_per_conversation: usize,
    pub augmented_pairs: usize,
    pub mix: MixReport,
    pub log: Vec<TrainLogRow>,
}

/// One augmented pair: the best-of-three trajectory plus the instruction
/// the pretrained speaker generated for it.
struct AugPair {
    world_idx: usize,
    start: Pose,
    context: Vec<u32>,
    actions: Vec<Action>,
    instruction: Vec<u32>,
    /// Observations along the kept trajectory.
    traj_obs: Vec<crate::world::Observation>,
}

/// Behavior-cloning loss on a stored trajectory (teacher forcing).
fn aug_nav_loss(
    tape: &mut Tape,
    agents: &Agents,
    store: &ParamStore,
    world: &World,
    pair: &AugPair,
    flags: RunFlags,
    noise_rng: &mut ChaCha8Rng,
) -> TrainResult<Var> {
    let ctx = agents
        .navigator
        .encode_context(tape, store, &pair.context, flags, noise_rng)?;
    let mut state = agents.navigator.start_state(&ctx);
    let mut pose = pair.start;
    let mut terms = Vec::new();
    for a in &pair.actions {
        let obs = world::observation(world, pose);
        let step = agents
            .navigator
            .policy_step(tape, store, &state, &obs, &ctx, flags, noise_rng)?;
        terms.push(tape.cross_entropy(step.logits, a.index())?);
        pose = world::step(world, pose, *a);
        state = NavState {
            prev_action: Some(*a),
            ..step.state
        };
    }
    Ok(sum_scalars(tape, &terms)?)
}

/// Roll three trajectories for one conversation (one argmax, two
/// sampled), keep the best by goal progress, and caption it with the
/// current speaker.
fn build_aug_pair(
    agents: &Agents,
    store: &ParamStore,
    worlds: &[World],
    conv: &Conversation,
    game: &GameConfig,
    salt: u64,
) -> TrainResult<AugPair> {
    let world = &worlds[conv.world_idx];
    let goal = world.goal_node();
    let mut best: Option<(f64, Vec<Action>, Vec<Pose>)> = None;
    for r in 0..3 {
        let mut tape = Tape::new(false);
        let mut rng = ChaCha8Rng::seed_from_u64(mix3(salt, 0, r as u64));
        let mut noise = ChaCha8Rng::seed_from_u64(0);
        let ctx = agents.navigator.encode_context(
            &mut tape,
            store,
            &conv.context,
            RunFlags::eval(),
            &mut noise,
        )?;
        let state = agents.navigator.start_state(&ctx);
        let mode = if r == 0 {
            GenMode::Argmax
        } else {
            GenMode::Sample { temperature: 1.0 }
        };
        let rollout = crate::agents::decode_actions(
            &agents.navigator,
            &mut tape,
            store,
            &ctx,
            state,
            conv.start,
            world,
            mode,
            game.max_actions,
            RunFlags::eval(),
            &mut rng,
        )?;
        let end = rollout.poses().last().map(|p| p.node).unwrap_or(conv.start.node);
        let gp = world::goal_progress(world, conv.start.node, end, goal)?;
        let better = match &best {
            None => true,
            Some((best_gp, _, _)) => gp > *best_gp,
        };
        if better {
            best = Some((gp, rollout.actions(), rollout.poses()));
        }
    }
    let (_, actions, poses) = best.expect("three rollouts ran");
    let mut traj_obs = vec![world::observation(world, conv.start)];
    traj_obs.extend(poses.iter().map(|p| world::observation(world, *p)));
    let mut tape = Tape::new(false);
    let mut rng = ChaCha8Rng::seed_from_u64(mix3(salt, 1, 77));
    let target = conv.context.first().copied().unwrap_or(0);
    let spoken = agents.speaker.generate(
        &mut tape,
        store,
        crate::lang::Role::Answer,
        &traj_obs,
        &[target],
        GenMode::Argmax,
        RunFlags::eval(),
        &mut rng,
    )?;
    let mut context = vec![target, crate::lang::ORA_TAG];
    context.extend(&spoken.utterance.tokens);
    Ok(AugPair {
        world_idx: conv.world_idx,
        start: conv.start,
        context,
        actions,
        instruction: spoken.utterance.tokens,
        traj_obs,
    })
}

/// Speaker-follower style data augmentation: three rollouts per scripted
/// conversation (one argmax, two sampled), the best by goal progress kept
/// and captioned by the pretrained speaker, then one epoch of mixed
/// training with the generated pairs downweighted by lambda.
#[allow(clippy::too_many_arguments)]
pub fn data_augmentation_round(
    agents: &Agents,
    store: &mut ParamStore,
    worlds: &[World],
    corpus: &PreparedCorpus,
    cfg: &TrainConfig,
    game: &GameConfig,
    run_seed: u64,
    train_navigator: bool,
    train_speaker: bool,
) -> TrainResult<DaReport> {
    cfg.validate()?;
    if corpus.conversations.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    // One epoch of mixed training; the augmented set is regenerated from
    // the training models every few iterations, the same way the
    // mental-model rollouts always reflect the current agent.
    let mut pairs: Vec<AugPair> = Vec::new();
    let mut pairs_generated = 0usize;
    const REGEN_EVERY: usize = 10;
    let flags = RunFlags::train(cfg.dropout);
    let lambda = cfg.lambda_da;
    let mut mix = MixReport {
        lambda,
        ..Default::default()
    };
    let mut log = Vec::new();
    let mut pick_rng = ChaCha8Rng::seed_from_u64(run_seed ^ 0x00da_00da_00da_00da);
    let iters = cfg.iters_selfplay;
    for iter in 0..iters {
        if lambda > 0.0 && iter % REGEN_EVERY == 0 {
            pairs.clear();
            for (ci, conv) in corpus.conversations.iter().enumerate() {
                pairs.push(build_aug_pair(
                    agents,
                    store,
                    worlds,
                    conv,
                    game,
                    mix3(run_seed, iter as u64, ci as u64),
                )?);
            }
            pairs_generated += pairs.len();
        }
        let mut noise_rng =
            ChaCha8Rng::seed_from_u64(run_seed ^ (iter as u64).wrapping_mul(0x6a09_e667));
        let mut sample_rng =
            ChaCha8Rng::seed_from_u64(run_seed ^ (iter as u64).wrapping_mul(0xbb67_ae85));
        // Navigator: weighted mix of augmented clones and scripted records.
        if train_navigator {
            let mut tape = Tape::new(true);
            let mut human_terms = Vec::new();
            let mut aug_terms = Vec::new();
            for _ in 0..cfg.batch_selfplay {
                let rec = &corpus.records[pick_rng.random_range(0..corpus.records.len())];
                let (loss, _) = nav_record_loss(
                    &mut tape, agents, store, &worlds[rec.world_idx], rec, flags,
                    &mut sample_rng, &mut noise_rng,
                )?;
                human_terms.push(loss);
                if lambda > 0.0 {
                    let pair = &pairs[pick_rng.random_range(0..pairs.len())];
                    aug_terms.push(aug_nav_loss(
                        &mut tape, agents, store, &worlds[pair.world_idx], pair, flags,
                        &mut noise_rng,
                    )?);
                }
            }
            let human = sum_scalars(&mut tape, &human_terms)?;
            let human = tape.scale(human, 1.0 / human_terms.len().max(1) as f32)?;
            let human_w = tape.scale(human, (1.0 - lambda) as f32)?;
            let mut total = human_w;
            let mut aug_raw = 0.0;
            let mut aug_weighted = 0.0;
            if !aug_terms.is_empty() {
                let aug = sum_scalars(&mut tape, &aug_terms)?;
                let aug = tape.scale(aug, 1.0 / aug_terms.len() as f32)?;
                let aug_w = tape.scale(aug, lambda as f32)?;
                total = tape.add(human_w, aug_w)?;
                aug_raw = tape.scalar64(aug)?;
                aug_weighted = tape.scalar64(aug_w)?;
            }
            mix.human_raw_nav += tape.scalar64(human)?;
            mix.human_weighted_nav += tape.scalar64(human_w)?;
            mix.aug_raw_nav += aug_raw;
            mix.aug_weighted_nav += aug_weighted;
            let total_v = tape.scalar64(total)?;
            tape.backward(total, store)?;
            adam_step(store, "nav/", &cfg.adam())?;
            store.zero_grads();
            log.push(TrainLogRow {
                iter,
                loss_ce: total_v,
                loss_actor: 0.0,
                loss_critic: 0.0,
                loss_spk: 0.0,
                mean_goal_progress: 0.0,
            });
        }
        // Speaker: scripted exchanges vs self-generated instructions.
        if train_speaker {
            let mut tape = Tape::new(true);
            let mut human_terms = Vec::new();
            let mut aug_terms = Vec::new();
            for _ in 0..cfg.batch_selfplay {
                let rec = &corpus.records[pick_rng.random_range(0..corpus.records.len())];
                if let Some((loss, _)) = speaker_record_loss(
                    &mut tape, agents, store, &worlds[rec.world_idx], rec, flags, &mut noise_rng,
                )? {
                    human_terms.push(loss);
                }
                if lambda > 0.0 {
                    let pair = &pairs[pick_rng.random_range(0..pairs.len())];
                    let target = pair.context.first().copied().unwrap_or(0);
                    // The generated instruction plays the guide role: path
                    // observations in, instruction tokens out.
                    let (loss, _) = agents.speaker.score_tokens(
                        &mut tape,
                        store,
                        crate::lang::Role::Answer,
                        &pair.traj_obs,
                        &[target],
                        &pair.instruction,
                        true,
                        flags,
                        &mut noise_rng,
                    )?;
                    aug_terms.push(loss);
                }
            }
            if !human_terms.is_empty() {
                let human = sum_scalars(&mut tape, &human_terms)?;
                let human = tape.scale(human, 1.0 / human_terms.len() as f32)?;
                let human_w = tape.scale(human, (1.0 - lambda) as f32)?;
                let mut total = human_w;
                if !aug_terms.is_empty() {
                    let aug = sum_scalars(&mut tape, &aug_terms)?;
                    let aug = tape.scale(aug, 1.0 / aug_terms.len() as f32)?;
                    let aug_w = tape.scale(aug, lambda as f32)?;
                    total = tape.add(human_w, aug_w)?;
                    mix.aug_raw_spk += tape.scalar64(aug)?;
                    mix.aug_weighted_spk += tape.scalar64(aug_w)?;
                }
                mix.human_raw_spk += tape.scalar64(human)?;
                mix.human_weighted_spk += tape.scalar64(human_w)?;
                tape.backward(total, store)?;
                rmsprop_step(store, "spk/", &cfg.rmsprop())?;
                store.zero_grads();
            }
        }
    }
    let n = iters.max(1) as f64;
    mix.aug_raw_nav /= n;
    mix.human_raw_nav /= n;
    mix.aug_weighted_nav /= n;
    mix.human_weighted_nav /= n;
    mix.aug_raw_spk /= n;
    mix.human_raw_spk /= n;
    mix.aug_weighted_spk /= n;
    mix.human_weighted_spk /= n;
    Ok(DaReport {
        rollouts_per_conversation: 3,
        retained_per_conversation: 1,
        augmented_pairs: pairs_generated,
        mix,
        log,
    })
}

fn mix3(a: u64, b: u64, c: u64) -> u64 {
    let mut x = a ^ 0x9e37_79b9_7f4a_7c15;
    x = x.rotate_left(13).wrapping_mul(0xbf58_476d_1ce4_e5b9) ^ b;
    x = x.rotate_left(31).wrapping_mul(0x94d0_49bb_1331_11eb) ^ c;
    x.rotate_left(29).wrapping_mul(0x2545_f491_4f6c_dd1d)
}
