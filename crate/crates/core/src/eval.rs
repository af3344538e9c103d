//! Experiment harness: seen/unseen splits, metric aggregation, and the
//! analysis artifacts (lexical diversity, progress-vs-questions curves).
//!
//! Evaluation pairs every method with the same derived episodes, scores
//! generated language against the scripted oracle's question/answer for
//! the same states, and aggregates in fixed episode order so reports are
//! reproducible byte for byte.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::agents::Agents;
use crate::gameplay::{
    self, oracle_stopping, GameConfig, GameError, Selection, Transcript,
};
use crate::lang::{self, ContextMode, LexicalStats};
use crate::tensor::ParamStore;
use crate::training::derive_episode;
use crate::world::{self, World, WorldError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty evaluation split")]
    EmptySplit,
    #[error("world seed {0} appears in both the training and unseen splits")]
    SeedOverlap(u64),
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    World(#[from] WorldError),
}

pub type EvalResult<T> = Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorldSplit {
    Seen,
    Unseen,
}

impl WorldSplit {
    pub fn name(&self) -> &'static str {
        match self {
            WorldSplit::Seen => "seen",
            WorldSplit::Unseen => "unseen",
        }
    }
}

pub fn mode_name(mode: ContextMode) -> &'static str {
    match mode {
        ContextMode::TargetOnly => "t0",
        ContextMode::LastExchange => "qa1",
        ContextMode::FullHistory => "full",
    }
}

/// Aggregates for one conditioning mode.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ModeReport {
    pub episodes: usize,
    pub mean_goal_progress: f64,
    pub mean_oracle_progress: f64,
    /// BLEU averaged per generated utterance against the scripted oracle.
    pub bleu_utterance: f64,
    /// BLEU of the concatenated dialogue per episode, averaged.
    pub bleu_dialogue: f64,
    pub lexical_types: usize,
    /// Mean fraction of total goal progress reached by each question index.
    pub progress_curve: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub split: String,
    pub world_seeds: Vec<u64>,
    pub eval_seed: u64,
    pub episodes: usize,
    pub per_mode: BTreeMap<String, ModeReport>,
}

pub struct EvalOutput {
    pub report: EvalReport,
    /// Transcripts per mode name, in evaluation order.
    pub transcripts: BTreeMap<String, Vec<Transcript>>,
}

/// Scripted oracle references for every exchange of a transcript, keyed by
/// the pose at which the question was asked.
fn scripted_refs(
    transcript: &Transcript,
    world: &World,
    vocab: &crate::lang::Vocabulary,
) -> EvalResult<Vec<(Vec<u32>, Vec<u32>)>> {
    let mut out = Vec::new();
    for e in transcript.events.iter().filter(|e| e.kind == "q") {
        let q = lang::script_question(e.pose, world, vocab);
        let path5 = world::shortest_path(world, e.pose.node, transcript.spec.goal, Some(5))?;
        let a = lang::script_answer(&path5, world, vocab);
        out.push((q.tokens, a.tokens));
    }
    Ok(out)
}

struct ModeAccumulator {
    episodes: usize,
    gp_sum: f64,
    oracle_sum: f64,
    bleu_utt_sum: f64,
    bleu_utt_count: usize,
    bleu_dlg_sum: f64,
    bleu_dlg_count: usize,
    utterances: Vec<Vec<u32>>,
    /// Per question index: (sum of normalized progress, count).
    curve: Vec<(f64, usize)>,
}

impl ModeAccumulator {
    fn new(max_exchanges: usize) -> Self {
        Self {
            episodes: 0,
            gp_sum: 0.0,
            oracle_sum: 0.0,
            bleu_utt_sum: 0.0,
            bleu_utt_count: 0,
            bleu_dlg_sum: 0.0,
            bleu_dlg_count: 0,
            utterances: Vec::new(),
            curve: vec![(0.0, 0); max_exchanges],
        }
    }

    fn add(
        &mut self,
        transcript: &Transcript,
        world: &World,
        vocab: &crate::lang::Vocabulary,
    ) -> EvalResult<()> {
        self.episodes += 1;
        self.gp_sum += transcript.final_goal_progress;
        self.oracle_sum += oracle_stopping(transcript);

        let refs = scripted_refs(transcript, world, vocab)?;
        let gens = transcript.exchanges();
        let mut gen_concat = Vec::new();
        let mut ref_concat = Vec::new();
        for ((gq, ga), (rq, ra)) in gens.iter().zip(&refs) {
            self.bleu_utt_sum += lang::bleu(gq, &[rq.as_slice()]);
            self.bleu_utt_sum += lang::bleu(ga, &[ra.as_slice()]);
            self.bleu_utt_count += 2;
            gen_concat.extend_from_slice(gq);
            gen_concat.extend_from_slice(ga);
            ref_concat.extend_from_slice(rq);
            ref_concat.extend_from_slice(ra);
            self.utterances.push(gq.clone());
            self.utterances.push(ga.clone());
        }
        if !gen_concat.is_empty() {
            self.bleu_dlg_sum += lang::bleu(&gen_concat, &[ref_concat.as_slice()]);
            self.bleu_dlg_count += 1;
        }

        let initial = world::distance(world, transcript.spec.start.node, transcript.spec.goal)?;
        if initial > 0.0 {
            // Cumulative progress at each question index; episodes that
            // ended earlier contribute their final progress.
            let q_stamps: Vec<f64> = transcript
                .events
                .iter()
                .filter(|e| e.kind == "q")
                .map(|e| e.gp)
                .collect();
            for (k, slot) in self.curve.iter_mut().enumerate() {
                let gp = q_stamps
                    .get(k)
                    .copied()
                    .unwrap_or(transcript.final_goal_progress);
                slot.0 += gp / initial;
                slot.1 += 1;
            }
        }
        Ok(())
    }

    fn finish(self, vocab: &crate::lang::Vocabulary) -> ModeReport {
        let n = self.episodes.max(1) as f64;
        let stats = lang::lexical_stats(self.utterances.iter().map(|u| u.as_slice()), vocab);
        ModeReport {
            episodes: self.episodes,
            mean_goal_progress: self.gp_sum / n,
            mean_oracle_progress: self.oracle_sum / n,
            bleu_utterance: if self.bleu_utt_count == 0 {
                0.0
            } else {
                self.bleu_utt_sum / self.bleu_utt_count as f64
            },
            bleu_dialogue: if self.bleu_dlg_count == 0 {
                0.0
            } else {
                self.bleu_dlg_sum / self.bleu_dlg_count as f64
            },
            lexical_types: stats.types,
            progress_curve: self
                .curve
                .into_iter()
                .map(|(s, c)| if c == 0 { 0.0 } else { s / c as f64 })
                .collect(),
        }
    }
}

/// Check that the unseen split shares no world seed with training.
pub fn check_disjoint(train_seeds: &[u64], eval_seeds: &[u64]) -> EvalResult<()> {
    for s in eval_seeds {
        if train_seeds.contains(s) {
            return Err(EvalError::SeedOverlap(*s));
        }
    }
    Ok(())
}

/// Evaluate one method over a world split for the given conditioning
/// modes. Episodes are derived deterministically from the eval seed and
/// shared across modes and methods.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    agents: &Agents,
    store: &ParamStore,
    worlds: &[World],
    split: WorldSplit,
    train_seeds: &[u64],
    modes: &[ContextMode],
    episodes_per_world: usize,
    eval_seed: u64,
    game: &GameConfig,
    selection: &Selection,
    method: &str,
) -> EvalResult<EvalOutput> {
    if worlds.is_empty() || modes.is_empty() || episodes_per_world == 0 {
        return Err(EvalError::EmptySplit);
    }
    let world_seeds: Vec<u64> = worlds.iter().map(|w| w.seed).collect();
    if split == WorldSplit::Unseen {
        check_disjoint(train_seeds, &world_seeds)?;
    }
    let mut per_mode = BTreeMap::new();
    let mut transcripts = BTreeMap::new();
    let mut total_episodes = 0usize;
    for mode in modes {
        let mode_game = GameConfig {
            context_mode: *mode,
            ..*game
        };
        let mut acc = ModeAccumulator::new(game.max_exchanges);
        let mut mode_transcripts = Vec::new();
        for world in worlds {
            let goal = world.goal_node();
            for e in 0..episodes_per_world {
                let (episode_seed, start) = derive_episode(world, eval_seed, e as u64);
                let out = gameplay::run_episode(
                    agents,
                    store,
                    world,
                    start,
                    goal,
                    &mode_game,
                    episode_seed,
                    selection,
                    None,
                )?;
                let mut transcript = out.transcript;
                // Label with the training method so stored transcripts can
                // be replayed against the right checkpoint.
                transcript.spec.method = method.to_string();
                acc.add(&transcript, world, &agents.vocab)?;
                mode_transcripts.push(transcript);
                total_episodes += 1;
            }
        }
        per_mode.insert(mode_name(*mode).to_string(), acc.finish(&agents.vocab));
        transcripts.insert(mode_name(*mode).to_string(), mode_transcripts);
    }
    Ok(EvalOutput {
        report: EvalReport {
            method: method.to_string(),
            split: split.name().to_string(),
            world_seeds,
            eval_seed,
            episodes: total_episodes,
            per_mode,
        },
        transcripts,
    })
}

/// Evaluate the shortest-path teacher with scripted speakers; its goal
/// progress equals the mean initial distance by construction.
pub fn evaluate_teacher(
    vocab: &crate::lang::Vocabulary,
    worlds: &[World],
    split: WorldSplit,
    episodes_per_world: usize,
    eval_seed: u64,
    game: &GameConfig,
) -> EvalResult<EvalOutput> {
    if worlds.is_empty() || episodes_per_world == 0 {
        return Err(EvalError::EmptySplit);
    }
    let mut acc = ModeAccumulator::new(game.max_exchanges);
    let mut list = Vec::new();
    for world in worlds {
        let goal = world.goal_node();
        for e in 0..episodes_per_world {
            let (episode_seed, start) = derive_episode(world, eval_seed, e as u64);
            let t = gameplay::run_teacher_episode(world, vocab, start, goal, game, episode_seed)?;
            acc.add(&t, world, vocab)?;
            list.push(t);
        }
    }
    let mut per_mode = BTreeMap::new();
    per_mode.insert(
        mode_name(game.context_mode).to_string(),
        acc.finish(vocab),
    );
    let mut transcripts = BTreeMap::new();
    transcripts.insert(mode_name(game.context_mode).to_string(), list);
    Ok(EvalOutput {
        report: EvalReport {
            method: "shortest_path".to_string(),
            split: split.name().to_string(),
            world_seeds: worlds.iter().map(|w| w.seed).collect(),
            eval_seed,
            episodes: worlds.len() * episodes_per_world,
            per_mode,
        },
        transcripts,
    })
}

/// Mean fraction of total goal progress at each question index.
pub fn progress_curve(
    transcripts: &[Transcript],
    worlds: &[World],
    max_exchanges: usize,
) -> EvalResult<Vec<(usize, f64)>> {
    let by_seed: BTreeMap<u64, &World> = worlds.iter().map(|w| (w.seed, w)).collect();
    let mut curve = vec![(0.0f64, 0usize); max_exchanges];
    for t in transcripts {
        let Some(world) = by_seed.get(&t.spec.world_seed) else {
            continue;
        };
        let initial = world::distance(world, t.spec.start.node, t.spec.goal)?;
        if initial <= 0.0 {
            continue;
        }
        let q_stamps: Vec<f64> = t
            .events
            .iter()
            .filter(|e| e.kind == "q")
            .map(|e| e.gp)
            .collect();
        for (k, slot) in curve.iter_mut().enumerate() {
            let gp = q_stamps.get(k).copied().unwrap_or(t.final_goal_progress);
            slot.0 += gp / initial;
            slot.1 += 1;
        }
    }
    Ok(curve
        .into_iter()
        .enumerate()
        .map(|(k, (s, c))| (k + 1, if c == 0 { 0.0 } else { s / c as f64 }))
        .collect())
}

/// Unique word types across all generated utterances of the transcripts.
pub fn lexical_types(transcripts: &[Transcript], vocab: &crate::lang::Vocabulary) -> LexicalStats {
    let mut utterances = Vec::new();
    for t in transcripts {
        for (q, a) in t.exchanges() {
            utterances.push(q);
            utterances.push(a);
        }
    }
    lang::lexical_stats(utterances.iter().map(|u| u.as_slice()), vocab)
}
