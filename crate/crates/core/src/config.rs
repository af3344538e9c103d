//! Experiment configuration: one structured file mirroring every module's
//! knobs, with presets for desk-scale runs and the published dimensions.
//!
//! Unknown keys are rejected so a typo cannot silently fall back to a
//! default, and every run writes its fully resolved config next to the
//! outputs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::ModelDims;
use crate::gameplay::GameConfig;
use crate::lang::{ContextMode, CorpusConfig, Vocabulary};
use crate::rmm::{RmmConfig, SelectionMode};
use crate::training::TrainConfig;
use crate::world::WorldParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

pub type ConfigResult<T> = Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSection {
    pub num_rooms: usize,
    pub nodes_per_room: usize,
    pub object_vocab: Vec<String>,
    pub d_img: usize,
    pub train_worlds: usize,
    pub unseen_worlds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: usize,
    pub word_embed: usize,
    pub action_embed: usize,
    pub l_gen: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr_nav: f32,
    pub wd_nav: f32,
    pub lr_spk: f32,
    pub dropout: f32,
    pub batch_pretrain: usize,
    pub iters_pretrain: usize,
    pub batch_selfplay: usize,
    pub iters_selfplay: usize,
    pub td_k: usize,
    pub lambda_da: f64,
    pub rl_weight: f64,
    pub corpus_episodes_per_world: usize,
    pub corpus_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameSection {
    pub question_interval: usize,
    pub max_actions: usize,
    pub max_exchanges: usize,
    pub history_cap: usize,
    pub context_mode: ContextMode,
    pub question_first: bool,
    pub language_temperature: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RmmSection {
    pub n: usize,
    pub rollout_horizon: usize,
    pub max_recursive_calls: usize,
    pub temperature: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub episodes_per_world: usize,
    pub eval_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: String,
    pub world: WorldSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub game: GameSection,
    pub rmm: RmmSection,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    /// Desk-scale preset: small worlds and models, enough training to show
    /// the qualitative method differences in minutes on one core.
    pub fn tiny() -> Self {
        Self {
            seed: 7,
            out_dir: "runs/tiny".into(),
            world: WorldSection {
                num_rooms: 9,
                nodes_per_room: 2,
                object_vocab: vec![
                    "lamp".into(),
                    "plant".into(),
                    "vase".into(),
                    "clock".into(),
                ],
                d_img: 64,
                train_worlds: 6,
                unseen_worlds: 20,
            },
            model: ModelSection {
                hidden: 64,
                word_embed: 32,
                action_embed: 8,
                l_gen: 12,
            },
            train: TrainSection {
                lr_nav: 3e-3,
                wd_nav: 5e-4,
                lr_spk: 1e-3,
                dropout: 0.3,
                batch_pretrain: 16,
                iters_pretrain: 500,
                batch_selfplay: 6,
                iters_selfplay: 100,
                td_k: 1,
                lambda_da: 0.1,
                rl_weight: 0.5,
                corpus_episodes_per_world: 20,
                corpus_noise: 0.1,
            },
            game: GameSection {
                question_interval: 4,
                max_actions: 80,
                max_exchanges: 20,
                history_cap: 160,
                context_mode: ContextMode::FullHistory,
                question_first: false,
                language_temperature: 0.6,
            },
            rmm: RmmSection {
                n: 3,
                rollout_horizon: 5,
                max_recursive_calls: 0,
                temperature: 0.6,
            },
            eval: EvalSection {
                episodes_per_world: 3,
                eval_seed: 1013,
            },
        }
    }

    /// The published scale: not part of the desk acceptance path.
    pub fn paper_scale() -> Self {
        let tiny = Self::tiny();
        Self {
            out_dir: "runs/paper".into(),
            world: WorldSection {
                num_rooms: 24,
                nodes_per_room: 4,
                d_img: 512,
                train_worlds: 40,
                unseen_worlds: 40,
                ..tiny.world
            },
            model: ModelSection {
                hidden: 512,
                word_embed: 256,
                action_embed: 32,
                l_gen: 80,
            },
            train: TrainSection {
                lr_nav: 1e-4,
                wd_nav: 5e-4,
                lr_spk: 1e-4,
                dropout: 0.5,
                batch_pretrain: 100,
                iters_pretrain: 20_000,
                batch_selfplay: 10,
                iters_selfplay: 5_000,
                ..tiny.train
            },
            ..tiny
        }
    }

    pub fn from_toml(text: &str) -> ConfigResult<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> ConfigResult<()> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.world.num_rooms < 2 || self.world.nodes_per_room < 1 {
            return invalid("world: num_rooms >= 2 and nodes_per_room >= 1 required".into());
        }
        if self.world.train_worlds == 0 || self.world.unseen_worlds == 0 {
            return invalid("world: both splits need at least one world".into());
        }
        self.game_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.rmm_config(self.rmm.n)
            .validate()
            .map_err(ConfigError::Invalid)?;
        self.train_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.eval.episodes_per_world == 0 {
            return invalid("eval: episodes_per_world must be >= 1".into());
        }
        Ok(())
    }

    pub fn world_params(&self) -> WorldParams {
        WorldParams {
            num_rooms: self.world.num_rooms,
            nodes_per_room: self.world.nodes_per_room,
            object_vocab: self.world.object_vocab.clone(),
            d_img: self.world.d_img,
        }
    }

    pub fn vocabulary(&self) -> Result<Vocabulary, crate::lang::LangError> {
        Vocabulary::standard(&self.world.object_vocab)
    }

    pub fn model_dims(&self, vocab_size: usize) -> ModelDims {
        ModelDims {
            hidden: self.model.hidden,
            word_embed: self.model.word_embed,
            action_embed: self.model.action_embed,
            d_img: self.world.d_img,
            vocab_size,
            l_gen: self.model.l_gen,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr_nav: self.train.lr_nav,
            wd_nav: self.train.wd_nav,
            lr_spk: self.train.lr_spk,
            dropout: self.train.dropout,
            batch_pretrain: self.train.batch_pretrain,
            iters_pretrain: self.train.iters_pretrain,
            batch_selfplay: self.train.batch_selfplay,
            iters_selfplay: self.train.iters_selfplay,
            td_k: self.train.td_k,
            lambda_da: self.train.lambda_da,
            rl_weight: self.train.rl_weight,
            seed: self.seed,
        }
    }

    pub fn game_config(&self) -> GameConfig {
        GameConfig {
            question_interval: self.game.question_interval,
            max_actions: self.game.max_actions,
            max_exchanges: self.game.max_exchanges,
            history_cap: self.game.history_cap,
            context_mode: self.game.context_mode,
            question_first: self.game.question_first,
            language_temperature: self.game.language_temperature,
        }
    }

    pub fn rmm_config(&self, n: usize) -> RmmConfig {
        RmmConfig {
            n,
            rollout_horizon: self.rmm.rollout_horizon,
            max_recursive_calls: self.rmm.max_recursive_calls,
            temperature: self.rmm.temperature,
            selection: SelectionMode::TrainDistance,
        }
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            episodes_per_world: self.train.corpus_episodes_per_world,
            noise: self.train.corpus_noise,
            question_interval: self.game.question_interval,
            max_actions: self.game.max_actions,
            max_exchanges: self.game.max_exchanges,
            history_cap: self.game.history_cap,
        }
    }

    /// World seeds for the training split.
    pub fn train_seeds(&self) -> Vec<u64> {
        let base = self.seed.wrapping_mul(10_000);
        (0..self.world.train_worlds as u64).map(|i| base + i).collect()
    }

    /// World seeds for the unseen split, provably disjoint from training.
    pub fn unseen_seeds(&self) -> Vec<u64> {
        let base = self.seed.wrapping_mul(10_000) + 500_000;
        (0..self.world.unseen_worlds as u64).map(|i| base + i).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_roundtrip() {
        for cfg in [ExperimentConfig::tiny(), ExperimentConfig::paper_scale()] {
            cfg.validate().unwrap();
            let text = cfg.to_toml();
            let back = ExperimentConfig::from_toml(&text).unwrap();
            assert_eq!(cfg, back);
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut text = ExperimentConfig::tiny().to_toml();
        text.push_str("\nmystery_knob = 3\n");
        assert!(matches!(
            ExperimentConfig::from_toml(&text),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn split_seeds_disjoint() {
        let cfg = ExperimentConfig::tiny();
        let train = cfg.train_seeds();
        let unseen = cfg.unseen_seeds();
        assert_eq!(train.len(), cfg.world.train_worlds);
        assert_eq!(unseen.len(), cfg.world.unseen_worlds);
        for s in &unseen {
            assert!(!train.contains(s));
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = ExperimentConfig::tiny();
        cfg.game.max_exchanges = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::tiny();
        cfg.world.num_rooms = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::tiny();
        cfg.rmm.max_recursive_calls = 2;
        assert!(cfg.validate().is_err());
    }
}
