//! The three dialogue roles as parameterized models.
//!
//! One parameter store holds three name families:
//! `nav/*` — the navigator's history encoder, action decoder, and heads;
//! `spk/*` — a single speaker serving both Questioner and Guide, selected
//! by the leading `<nav>`/`<ora>` tag; `critic/*` — the value head read off
//! the navigator decoder's post-attention hidden state.
//!
//! All forward passes run on a caller-owned [`Tape`], so rollouts that need
//! gradients and mental rollouts that must not touch anything share one
//! code path.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lang::{Role, Utterance, Vocabulary, EOS};
use crate::tensor::{
    attention, bilstm_encode, lstm_cell, LstmWeights, ParamStore, Tape, Tensor, TensorError, Var,
};
use crate::world::{self, Action, Observation, Pose, World};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("speaker needs at least one image observation")]
    EmptyImageSeq,
    #[error("empty conditioning tokens")]
    EmptyContext,
    #[error("{0}")]
    Invalid(String),
}

pub type AgentResult<T> = Result<T, AgentError>;

/// Model width configuration. Desk defaults keep everything small; the
/// paper-scale constructor mirrors the published dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub hidden: usize,
    pub word_embed: usize,
    pub action_embed: usize,
    pub d_img: usize,
    pub vocab_size: usize,
    /// Generation length cap for one utterance.
    pub l_gen: usize,
}

impl ModelDims {
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            hidden: 64,
            word_embed: 32,
            action_embed: 8,
            d_img: 64,
            vocab_size,
            l_gen: 12,
        }
    }

    pub fn paper_scale(vocab_size: usize) -> Self {
        Self {
            hidden: 512,
            word_embed: 256,
            action_embed: 32,
            d_img: 512,
            vocab_size,
            l_gen: 80,
        }
    }

    fn validate(&self) -> AgentResult<()> {
        if self.hidden % 2 != 0 {
            return Err(AgentError::Invalid(format!(
                "hidden size {} must be even for the bi-directional encoder",
                self.hidden
            )));
        }
        if self.vocab_size == 0 || self.l_gen == 0 {
            return Err(AgentError::Invalid("vocab_size and l_gen must be > 0".into()));
        }
        Ok(())
    }
}

/// Train/eval switches threaded through every forward pass.
#[derive(Debug, Clone, Copy)]
pub struct RunFlags {
    pub train: bool,
    pub dropout: f32,
}

impl RunFlags {
    pub fn eval() -> Self {
        Self {
            train: false,
            dropout: 0.0,
        }
    }

    pub fn train(dropout: f32) -> Self {
        Self {
            train: true,
            dropout,
        }
    }
}

/// Decoding regime for actions and tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GenMode {
    Argmax,
    /// Sample from logits softened by the temperature (1.0 = untempered).
    Sample { temperature: f32 },
}

/// Extra action-embedding row used before any action has been taken.
const START_ACTION_ROW: usize = 4;

/// Insert all `nav/*`, `spk/*`, and `critic/*` parameters.
pub fn init_models(store: &mut ParamStore, dims: &ModelDims, seed: u64) -> AgentResult<()> {
    dims.validate()?;
    let mut rng =
        <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed ^ 0xa5a5_5a5a_0f0f_f0f0);
    init_navigator(store, dims, &mut rng)?;
    init_speaker(store, dims, &mut rng)?;
    init_critic(store, dims, &mut rng)?;
    Ok(())
}

fn init_navigator(
    store: &mut ParamStore,
    dims: &ModelDims,
    rng: &mut ChaCha8Rng,
) -> AgentResult<()> {
    use crate::tensor::nn_init::*;
    let h = dims.hidden;
    insert_uniform(store, rng, "nav/embed", vec![dims.vocab_size, dims.word_embed])?;
    insert_lstm(store, rng, "nav/enc", dims.word_embed, h)?;
    insert_uniform(store, rng, "nav/act_embed", vec![5, dims.action_embed])?;
    insert_lstm(store, rng, "nav/dec", dims.action_embed + dims.d_img, h)?;
    insert_uniform(store, rng, "nav/att_q", vec![h, h])?;
    insert_uniform(store, rng, "nav/comb_w", vec![h, 2 * h])?;
    insert_zeros(store, "nav/comb_b", vec![h])?;
    insert_uniform(store, rng, "nav/out_w", vec![Action::ALL.len(), h])?;
    insert_zeros(store, "nav/out_b", vec![Action::ALL.len()])?;
    Ok(())
}

fn init_speaker(
    store: &mut ParamStore,
    dims: &ModelDims,
    rng: &mut ChaCha8Rng,
) -> AgentResult<()> {
    use crate::tensor::nn_init::*;
    let h = dims.hidden;
    let k = h / 2;
    insert_uniform(store, rng, "spk/embed", vec![dims.vocab_size, dims.word_embed])?;
    insert_lstm(store, rng, "spk/enc_fw", dims.d_img, k)?;
    insert_lstm(store, rng, "spk/enc_bw", dims.d_img, k)?;
    insert_lstm(store, rng, "spk/dec", dims.word_embed, h)?;
    insert_uniform(store, rng, "spk/att_q", vec![h, h])?;
    insert_uniform(store, rng, "spk/comb_w", vec![h, 2 * h])?;
    insert_zeros(store, "spk/comb_b", vec![h])?;
    insert_uniform(store, rng, "spk/out_w", vec![dims.vocab_size, h])?;
    insert_zeros(store, "spk/out_b", vec![dims.vocab_size])?;
    Ok(())
}

fn init_critic(
    store: &mut ParamStore,
    dims: &ModelDims,
    rng: &mut ChaCha8Rng,
) -> AgentResult<()> {
    use crate::tensor::nn_init::*;
    let h = dims.hidden;
    insert_uniform(store, rng, "critic/h_w", vec![h, h])?;
    insert_zeros(store, "critic/h_b", vec![h])?;
    insert_uniform(store, rng, "critic/out_w", vec![1, h])?;
    insert_zeros(store, "critic/out_b", vec![1])?;
    Ok(())
}

/// Encoded dialogue context: per-token vectors for attention plus the final
/// encoder state that initializes the decoder.
pub struct EncodedContext {
    pub steps: Vec<Var>,
    pub final_h: Var,
    pub final_c: Var,
}

/// Navigator recurrent state carried across decode steps (and across
/// exchanges: the decoder is not reset when the context grows).
#[derive(Debug, Clone, Copy)]
pub struct NavState {
    pub h: Var,
    pub c: Var,
    pub prev_action: Option<Action>,
}

pub struct NavStep {
    pub logits: Var,
    pub value: Var,
    pub state: NavState,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NavigatorModel {
    pub dims: ModelDims,
}

impl NavigatorModel {
    pub fn new(dims: ModelDims) -> Self {
        Self { dims }
    }

    /// Run the forward LSTM over embedded context tokens.
    pub fn encode_context(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: &[u32],
        flags: RunFlags,
        rng: &mut ChaCha8Rng,
    ) -> AgentResult<EncodedContext> {
        if tokens.is_empty() {
            return Err(AgentError::EmptyContext);
        }
        let embed = tape.param(store, "nav/embed")?;
        let w = LstmWeights::lease(tape, store, "nav/enc")?;
        let zero = tape.constant(Tensor::zeros(vec![self.dims.hidden]));
        let (mut h, mut c) = (zero, zero);
        let mut steps = Vec::with_capacity(tokens.len());
        for t in tokens {
            let x = tape.embed_row(embed, *t as usize)?;
            let x = tape.dropout(x, flags.dropout, flags.train, rng)?;
            let (nh, nc) = lstm_cell(tape, &w, x, h, c)?;
            h = nh;
            c = nc;
            steps.push(h);
        }
        Ok(EncodedContext {
            steps,
            final_h: h,
            final_c: c,
        })
    }

    /// Fresh decoder state initialized from the encoder's final state.
    pub fn start_state(&self, ctx: &EncodedContext) -> NavState {
        NavState {
            h: ctx.final_h,
            c: ctx.final_c,
            prev_action: None,
        }
    }

    /// One decode step: previous action and current observation update the
    /// recurrent state, which attends over the context to produce action
    /// logits and the critic value.
    pub fn policy_step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        state: &NavState,
        obs: &Observation,
        ctx: &EncodedContext,
        flags: RunFlags,
        rng: &mut ChaCha8Rng,
    ) -> AgentResult<NavStep> {
        let act_embed = tape.param(store, "nav/act_embed")?;
        let row = state.prev_action.map_or(START_ACTION_ROW, |a| a.index());
        let a_emb = tape.embed_row(act_embed, row)?;
        let obs_v = tape.constant(Tensor::vector(obs.features.clone()));
        let x = tape.concat(&[a_emb, obs_v])?;
        let x = tape.dropout(x, flags.dropout, flags.train, rng)?;

        let w = LstmWeights::lease(tape, store, "nav/dec")?;
        let (h, c) = lstm_cell(tape, &w, x, state.h, state.c)?;

        let att_q = tape.param(store, "nav/att_q")?;
        let (ctx_vec, _weights) = attention(tape, att_q, h, &ctx.steps)?;
        let comb_w = tape.param(store, "nav/comb_w")?;
        let comb_b = tape.param(store, "nav/comb_b")?;
        let hc = tape.concat(&[h, ctx_vec])?;
        let mixed = tape.matvec(comb_w, hc)?;
        let mixed = tape.add(mixed, comb_b)?;
        let h_tilde = tape.tanh(mixed)?;
        let h_tilde = tape.dropout(h_tilde, flags.dropout, flags.train, rng)?;

        let out_w = tape.param(store, "nav/out_w")?;
        let out_b = tape.param(store, "nav/out_b")?;
        let logits = tape.matvec(out_w, h_tilde)?;
        let logits = tape.add(logits, out_b)?;

        let value = critic_value(tape, store, h_tilde, flags, rng)?;
        Ok(NavStep {
            logits,
            value,
            state: NavState {
                h,
                c,
                prev_action: state.prev_action,
            },
        })
    }
}

/// Value head: linear, relu, dropout, then a scalar readout.
fn critic_value(
    tape: &mut Tape,
    store: &ParamStore,
    h_tilde: Var,
    flags: RunFlags,
    rng: &mut ChaCha8Rng,
) -> AgentResult<Var> {
    let h_w = tape.param(store, "critic/h_w")?;
    let h_b = tape.param(store, "critic/h_b")?;
    let pre = tape.matvec(h_w, h_tilde)?;
    let pre = tape.add(pre, h_b)?;
    let act = tape.relu(pre)?;
    let act = tape.dropout(act, flags.dropout, flags.train, rng)?;
    let out_w = tape.param(store, "critic/out_w")?;
    let out_b = tape.param(store, "critic/out_b")?;
    let v = tape.matvec(out_w, act)?;
    Ok(tape.add(v, out_b)?)
}

/// Deterministic categorical draw from f32 logits, in f64.
fn sample_from_logits(logits: &[f32], temperature: f32, rng: &mut ChaCha8Rng) -> usize {
    let m = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let t = temperature.max(1e-6) as f64;
    let exps: Vec<f64> = logits
        .iter()
        .map(|x| ((*x as f64 - m) / t).exp())
        .collect();
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

fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// One recorded step of an action rollout.
pub struct RolloutStep {
    pub logits: Var,
    pub value: Var,
    pub action: Action,
    /// Pose after taking the action.
    pub pose: Pose,
    /// Untempered log-probability of the chosen action.
    pub logprob: f64,
}

pub struct Rollout {
    pub steps: Vec<RolloutStep>,
    pub final_state: NavState,
}

impl Rollout {
    pub fn actions(&self) -> Vec<Action> {
        self.steps.iter().map(|s| s.action).collect()
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.steps.iter().map(|s| s.pose).collect()
    }

    pub fn stopped(&self) -> bool {
        self.steps.last().is_some_and(|s| s.action == Action::Stop)
    }
}

/// Roll the policy in the world until `Stop` or `max_steps`, recording
/// everything a loss needs. The caller owns cadence and budgets beyond the
/// step cap.
#[allow(clippy::too_many_arguments)]
pub fn decode_actions(
    model: &NavigatorModel,
    tape: &mut Tape,
    store: &ParamStore,
    ctx: &EncodedContext,
    state: NavState,
    start: Pose,
    world: &World,
    mode: GenMode,
    max_steps: usize,
    flags: RunFlags,
    rng: &mut ChaCha8Rng,
) -> AgentResult<Rollout> {
    if max_steps == 0 {
        return Err(AgentError::Invalid("max_steps must be >= 1".into()));
    }
    let mut steps = Vec::new();
    let mut pose = start;
    let mut state = state;
    for _ in 0..max_steps {
        let obs = world::observation(world, pose);
        let step = model.policy_step(tape, store, &state, &obs, ctx, flags, rng)?;
        let logits = tape.data(step.logits).to_vec();
        let idx = match mode {
            GenMode::Argmax => argmax(&logits),
            GenMode::Sample { temperature } => sample_from_logits(&logits, temperature, rng),
        };
        let action = Action::from_index(idx).expect("4 action logits");
        let logprob = -crate::tensor::cross_entropy_scalar(&logits, idx);
        pose = world::step(world, pose, action);
        state = NavState {
            prev_action: Some(action),
            ..step.state
        };
        steps.push(RolloutStep {
            logits: step.logits,
            value: step.value,
            action,
            pose,
            logprob,
        });
        if action == Action::Stop {
            break;
        }
    }
    Ok(Rollout {
        steps,
        final_state: state,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeakerModel {
    pub dims: ModelDims,
}

/// A generated utterance with everything needed for later losses.
pub struct SpokenUtterance {
    pub utterance: Utterance,
    /// All emitted tokens in decode order, including the terminating EOS
    /// when one was produced within the cap.
    pub emitted: Vec<u32>,
    /// Logits node per emitted token.
    pub step_logits: Vec<Var>,
    /// Sum of untempered log-probabilities of the emitted tokens.
    pub logprob: f64,
}

impl SpeakerModel {
    pub fn new(dims: ModelDims) -> Self {
        Self { dims }
    }

    fn encode_images(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        images: &[Observation],
    ) -> AgentResult<EncodedContext> {
        if images.is_empty() {
            return Err(AgentError::EmptyImageSeq);
        }
        let fw = LstmWeights::lease(tape, store, "spk/enc_fw")?;
        let bw = LstmWeights::lease(tape, store, "spk/enc_bw")?;
        let inputs: Vec<Var> = images
            .iter()
            .map(|o| tape.constant(Tensor::vector(o.features.clone())))
            .collect();
        let out = bilstm_encode(tape, &fw, &bw, &inputs, self.dims.hidden / 2)?;
        Ok(EncodedContext {
            steps: out.steps,
            final_h: out.final_h,
            final_c: out.final_c,
        })
    }

    /// Feed the role tag and condition tokens through the decoder without
    /// loss, returning the primed state and the logits for the next token.
    #[allow(clippy::too_many_arguments)]
    fn prime(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        enc: &EncodedContext,
        role: Role,
        condition: &[u32],
        flags: RunFlags,
        rng: &mut ChaCha8Rng,
    ) -> AgentResult<(Var, Var, Var)> {
        let (mut h, mut c) = (enc.final_h, enc.final_c);
        let mut logits = None;
        for t in std::iter::once(role.tag()).chain(condition.iter().copied()) {
            let (nh, nc, l) = self.decode_step(tape, store, enc, t, h, c, flags, rng)?;
            h = nh;
            c = nc;
            logits = Some(l);
        }
        Ok((h, c, logits.expect("at least the role tag")))
    }

    #[allow(clippy::too_many_arguments)]
    fn decode_step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        enc: &EncodedContext,
        token: u32,
        h: Var,
        c: Var,
        flags: RunFlags,
        rng: &mut ChaCha8Rng,
    ) -> AgentResult<(Var, Var, Var)> {
        let embed = tape.param(store, "spk/embed")?;
        let x = tape.embed_row(embed, token as usize)?;
        let x = tape.dropout(x, flags.dropout, flags.train, rng)?;
        let w = LstmWeights::lease(tape, store, "spk/dec")?;
        let (h, c) = lstm_cell(tape, &w, x, h, c)?;
        let att_q = tape.param(store, "spk/att_q")?;
        let (ctx_vec, _) = attention(tape, att_q, h, &enc.steps)?;
        let comb_w = tape.param(store, "spk/comb_w")?;
        let comb_b = tape.param(store, "spk/comb_b")?;
        let hc = tape.concat(&[h, ctx_vec])?;
        let mixed = tape.matvec(comb_w, hc)?;
        let mixed = tape.add(mixed, comb_b)?;
        let h_tilde = tape.tanh(mixed)?;
        let h_tilde = tape.dropout(h_tilde, flags.dropout, flags.train, rng)?;
        let out_w = tape.param(store, "spk/out_w")?;
        let out_b = tape.param(store, "spk/out_b")?;
        let logits = tape.matvec(out_w, h_tilde)?;
        let logits = tape.add(logits, out_b)?;
        Ok((h, c, logits))
    }

    /// Generate one utterance. The decoder state is fresh per call, so
    /// repeated calls with identical inputs are identical regardless of
    /// order.
    #[allow(clippy::too_many_arguments)]
    pub fn generate(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        role: Role,
        images: &[Observation],
        condition: &[u32],
        mode: GenMode,
        flags: RunFlags,
        rng: &mut ChaCha8Rng,
    ) -> AgentResult<SpokenUtterance> {
        let enc = self.encode_images(tape, store, images)?;
        let (mut h, mut c, mut logits) = self.prime(tape, store, &enc, role, condition, flags, rng)?;
        let mut emitted = Vec::new();
        let mut step_logits = Vec::new();
        let mut logprob = 0.0;
        for _ in 0..=self.dims.l_gen {
            let mut values = tape.data(logits).to_vec();
            // Control ids other than EOS are never emitted.
            for banned in [crate::lang::PAD, crate::lang::BOS, crate::lang::UNK, crate::lang::NAV_TAG, crate::lang::ORA_TAG] {
                if let Some(v) = values.get_mut(banned as usize) {
                    *v = f32::NEG_INFINITY;
                }
            }
            let idx = match mode {
                GenMode::Argmax => argmax(&values),
                GenMode::Sample { temperature } => sample_from_logits(&values, temperature, rng),
            };
            logprob -= crate::tensor::cross_entropy_scalar(&values, idx);
            emitted.push(idx as u32);
            step_logits.push(logits);
            if idx as u32 == EOS || emitted.len() > self.dims.l_gen {
                break;
            }
            let (nh, nc, l) = self.decode_step(tape, store, &enc, idx as u32, h, c, flags, rng)?;
            h = nh;
            c = nc;
            logits = l;
        }
        let content: Vec<u32> = emitted
            .iter()
            .copied()
            .filter(|t| *t != EOS)
            .take(self.dims.l_gen)
            .collect();
        Ok(SpokenUtterance {
            utterance: Utterance {
                role,
                tokens: content,
            },
            emitted,
            step_logits,
            logprob,
        })
    }

    /// Teacher-forced token cross-entropy of `target` under the model.
    /// With `append_eos` an EOS term is added after the targets (training
    /// the model to terminate); without it the loss covers exactly the
    /// given tokens, which is the likelihood of a previously emitted
    /// sequence. Returns the summed loss node and the token count.
    #[allow(clippy::too_many_arguments)]
    pub fn score_tokens(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        role: Role,
        images: &[Observation],
        condition: &[u32],
        target: &[u32],
        append_eos: bool,
        flags: RunFlags,
        rng: &mut ChaCha8Rng,
    ) -> AgentResult<(Var, usize)> {
        let enc = self.encode_images(tape, store, images)?;
        let (mut h, mut c, mut logits) = self.prime(tape, store, &enc, role, condition, flags, rng)?;
        let mut terms = Vec::new();
        let targets: Vec<u32> = if append_eos {
            target.iter().copied().chain(std::iter::once(EOS)).collect()
        } else {
            target.to_vec()
        };
        let last = targets.len().saturating_sub(1);
        for (i, t) in targets.iter().copied().enumerate() {
            terms.push(tape.cross_entropy(logits, t as usize)?);
            if i != last {
                let (nh, nc, l) = self.decode_step(tape, store, &enc, t, h, c, flags, rng)?;
                h = nh;
                c = nc;
                logits = l;
            }
        }
        if terms.is_empty() {
            let zero = tape.constant(Tensor::scalar(0.0));
            return Ok((zero, 0));
        }
        let mut loss = terms[0];
        for t in &terms[1..] {
            loss = tape.add(loss, *t)?;
        }
        Ok((loss, terms.len()))
    }
}

/// Convenience bundle for code that drives all three roles.
pub struct Agents {
    pub navigator: NavigatorModel,
    pub speaker: SpeakerModel,
    pub vocab: Vocabulary,
}

impl Agents {
    pub fn new(dims: ModelDims, vocab: Vocabulary) -> AgentResult<Self> {
        if dims.vocab_size != vocab.len() {
            return Err(AgentError::Invalid(format!(
                "dims.vocab_size {} != vocabulary size {}",
                dims.vocab_size,
                vocab.len()
            )));
        }
        Ok(Self {
            navigator: NavigatorModel::new(dims),
            speaker: SpeakerModel::new(dims),
            vocab,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::NAV_TAG;
    use crate::world::{generate_world, NodeId, WorldParams};
    use rand::SeedableRng;

    fn fixture() -> (ParamStore, Agents, World) {
        let params = WorldParams::default();
        let world = generate_world(3, &params).unwrap();
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
        init_models(&mut store, &dims, 7).unwrap();
        let agents = Agents::new(dims, vocab).unwrap();
        (store, agents, world)
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn policy_step_deterministic_and_normalized() {
        let (store, agents, world) = fixture();
        let tokens = [agents.vocab.id("lamp")];
        let run = || {
            let mut tape = Tape::new(false);
            let mut r = rng(1);
            let ctx = agents
                .navigator
                .encode_context(&mut tape, &store, &tokens, RunFlags::eval(), &mut r)
                .unwrap();
            let state = agents.navigator.start_state(&ctx);
            let obs = world::observation(&world, Pose { node: NodeId(0), heading: 0 });
            let step = agents
                .navigator
                .policy_step(&mut tape, &store, &state, &obs, &ctx, RunFlags::eval(), &mut r)
                .unwrap();
            (tape.data(step.logits).to_vec(), tape.data(step.value).to_vec())
        };
        let (l1, v1) = run();
        let (l2, v2) = run();
        assert_eq!(l1, l2);
        assert_eq!(v1, v2);
        assert!(l1.iter().all(|x| x.is_finite()));
        assert_eq!(v1.len(), 1);
        let probs = {
            let mut tape = Tape::new(false);
            let lv = tape.constant(Tensor::vector(l1.clone()));
            let s = tape.softmax(lv).unwrap();
            tape.data(s).to_vec()
        };
        let sum: f32 = probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zeroed_output_head_gives_uniform_policy() {
        let (mut store, agents, world) = fixture();
        for name in ["nav/out_w", "nav/out_b"] {
            store.get_mut(name).unwrap().data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new(false);
        let mut r = rng(2);
        let tokens = [agents.vocab.id("lamp")];
        let ctx = agents
            .navigator
            .encode_context(&mut tape, &store, &tokens, RunFlags::eval(), &mut r)
            .unwrap();
        let state = agents.navigator.start_state(&ctx);
        let obs = world::observation(&world, Pose { node: NodeId(1), heading: 2 });
        let step = agents
            .navigator
            .policy_step(&mut tape, &store, &state, &obs, &ctx, RunFlags::eval(), &mut r)
            .unwrap();
        for l in tape.data(step.logits) {
            assert_eq!(*l, 0.0);
        }
    }

    #[test]
    fn decode_actions_modes_are_deterministic() {
        let (store, agents, world) = fixture();
        let tokens = [agents.vocab.id("plant")];
        let roll = |mode: GenMode, seed: u64| {
            let mut tape = Tape::new(false);
            let mut r = rng(seed);
            let ctx = agents
                .navigator
                .encode_context(&mut tape, &store, &tokens, RunFlags::eval(), &mut r)
                .unwrap();
            let state = agents.navigator.start_state(&ctx);
            let start = Pose { node: NodeId(0), heading: 0 };
            decode_actions(
                &agents.navigator, &mut tape, &store, &ctx, state, start, &world, mode, 10,
                RunFlags::eval(), &mut r,
            )
            .unwrap()
            .actions()
        };
        assert_eq!(roll(GenMode::Argmax, 1), roll(GenMode::Argmax, 2));
        assert_eq!(
            roll(GenMode::Sample { temperature: 1.0 }, 5),
            roll(GenMode::Sample { temperature: 1.0 }, 5)
        );
    }

    #[test]
    fn decode_actions_respects_max_steps_and_pose_alignment() {
        let (store, agents, world) = fixture();
        let tokens = [agents.vocab.id("vase")];
        let mut tape = Tape::new(false);
        let mut r = rng(9);
        let ctx = agents
            .navigator
            .encode_context(&mut tape, &store, &tokens, RunFlags::eval(), &mut r)
            .unwrap();
        let state = agents.navigator.start_state(&ctx);
        let start = Pose { node: NodeId(0), heading: 0 };
        let rollout = decode_actions(
            &agents.navigator, &mut tape, &store, &ctx, state, start, &world,
            GenMode::Sample { temperature: 1.0 }, 7, RunFlags::eval(), &mut r,
        )
        .unwrap();
        assert!(rollout.steps.len() <= 7);
        assert_eq!(rollout.actions().len(), rollout.poses().len());
        if !rollout.stopped() {
            assert_eq!(rollout.steps.len(), 7);
        }
    }

    #[test]
    fn speaker_zero_temperature_limit_matches_argmax() {
        let (store, agents, world) = fixture();
        let images = vec![world::observation(&world, Pose { node: NodeId(0), heading: 0 })];
        let cond = [agents.vocab.id("lamp")];
        let gen = |mode: GenMode| {
            let mut tape = Tape::new(false);
            let mut r = rng(4);
            agents
                .speaker
                .generate(&mut tape, &store, Role::Question, &images, &cond, mode, RunFlags::eval(), &mut r)
                .unwrap()
                .emitted
        };
        assert_eq!(
            gen(GenMode::Argmax),
            gen(GenMode::Sample { temperature: 1e-6 })
        );
    }

    #[test]
    fn speaker_outputs_in_vocab_and_capped() {
        let (store, agents, world) = fixture();
        let images = vec![world::observation(&world, Pose { node: NodeId(2), heading: 1 })];
        let cond = [agents.vocab.id("clock")];
        let mut tape = Tape::new(false);
        let mut r = rng(6);
        let spoken = agents
            .speaker
            .generate(
                &mut tape, &store, Role::Answer, &images, &cond,
                GenMode::Sample { temperature: 0.6 }, RunFlags::eval(), &mut r,
            )
            .unwrap();
        assert!(spoken.utterance.tokens.len() <= agents.speaker.dims.l_gen);
        for t in &spoken.utterance.tokens {
            assert!((*t as usize) < agents.vocab.len());
        }
        assert_eq!(spoken.emitted.len(), spoken.step_logits.len());
        assert!(spoken.logprob <= 0.0);
    }

    #[test]
    fn speaker_stateless_across_calls() {
        let (store, agents, world) = fixture();
        let images = vec![world::observation(&world, Pose { node: NodeId(1), heading: 0 })];
        let cond = [agents.vocab.id("lamp"), NAV_TAG];
        let once = |tape: &mut Tape| {
            let mut r = rng(8);
            agents
                .speaker
                .generate(
                    tape, &store, Role::Question, &images, &cond,
                    GenMode::Sample { temperature: 0.6 }, RunFlags::eval(), &mut r,
                )
                .unwrap()
                .emitted
        };
        // Same tape, back to back: identical regardless of call order.
        let mut tape = Tape::new(false);
        let a = once(&mut tape);
        let b = once(&mut tape);
        assert_eq!(a, b);
    }

    #[test]
    fn speaker_rejects_empty_images() {
        let (store, agents, _world) = fixture();
        let cond = [agents.vocab.id("lamp")];
        let mut tape = Tape::new(false);
        let mut r = rng(3);
        let err = agents.speaker.generate(
            &mut tape, &store, Role::Answer, &[], &cond, GenMode::Argmax, RunFlags::eval(), &mut r,
        );
        assert!(matches!(err, Err(AgentError::EmptyImageSeq)));
    }

    #[test]
    fn dims_validation_rejects_odd_hidden() {
        let mut store = ParamStore::new();
        let dims = ModelDims {
            hidden: 15,
            ..ModelDims::desk(32)
        };
        assert!(init_models(&mut store, &dims, 1).is_err());
    }
}
