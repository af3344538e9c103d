//! Scratch calibration probe (not part of the deliverable).
use dialnav::agents::{init_models, Agents};
use dialnav::config::ExperimentConfig;
use dialnav::eval::{evaluate, WorldSplit};
use dialnav::gameplay::Selection;
use dialnav::lang::{generate_corpus, ContextMode};
use dialnav::rmm::{RmmConfig, SelectionMode};
use dialnav::tensor::ParamStore;
use dialnav::training::{self, Method};
use dialnav::world::generate_world;

fn main() {
    let pre_iters: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(800);
    let sp_iters: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(150);
    let rl_w: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let mut wins_a = 0;
    let mut wins_c = 0;
    for seed in [101u64, 102, 103] {
        let t0 = std::time::Instant::now();
        // Worlds are fixed; the training seed varies.
        let mut cfg = ExperimentConfig::tiny();
        cfg.train.iters_pretrain = pre_iters;
        cfg.train.iters_selfplay = sp_iters;
        cfg.train.batch_selfplay = 6;
        cfg.train.dropout = 0.2;
        cfg.train.rl_weight = rl_w;
        let params = cfg.world_params();
        let train_worlds: Vec<_> = cfg
            .train_seeds()
            .iter()
            .map(|s| generate_world(*s, &params).unwrap())
            .collect();
        let unseen: Vec<_> = cfg
            .unseen_seeds()
            .iter()
            .map(|s| generate_world(*s, &params).unwrap())
            .collect();
        let vocab = cfg.vocabulary().unwrap();
        let dims = cfg.model_dims(vocab.len());
        let agents = Agents::new(dims, vocab.clone()).unwrap();
        let records = generate_corpus(&train_worlds, &vocab, &cfg.corpus_config(), cfg.seed).unwrap();
        let corpus = training::prepare_corpus(&train_worlds, &records, cfg.seed).unwrap();
        let mut store = ParamStore::new();
        init_models(&mut store, &dims, seed).unwrap();
        let mut tc = cfg.train_config();
        tc.seed = seed;
        training::pretrain(&agents, &mut store, &train_worlds, &corpus, &tc).unwrap();
        let game = cfg.game_config();
        let rmm_train = RmmConfig {
            n: 3,
            selection: SelectionMode::TrainDistance,
            ..RmmConfig::default()
        };
        let rmm_infer = RmmConfig {
            n: 3,
            selection: SelectionMode::InferConfidence,
            ..RmmConfig::default()
        };

        let eval_full = |st: &ParamStore, sel: &Selection, label: &str| {
            let out = evaluate(
                &agents,
                st,
                &unseen,
                WorldSplit::Unseen,
                &[],
                &[ContextMode::FullHistory],
                cfg.eval.episodes_per_world,
                cfg.eval.eval_seed,
                &game,
                sel,
                label,
            )
            .unwrap();
            let m = &out.report.per_mode["full"];
            (
                m.mean_goal_progress,
                m.lexical_types,
                m.mean_oracle_progress,
                m.bleu_dialogue,
            )
        };

        let mut sa = store.clone();
        training::selfplay(&agents, &mut sa, &train_worlds, Method::Baseline, &tc, &game, &rmm_train, seed).unwrap();
        let mut sb = store.clone();
        training::selfplay(&agents, &mut sb, &train_worlds, Method::Rmm3, &tc, &game, &rmm_train, seed).unwrap();
        let mut sd = store.clone();
        training::data_augmentation_round(&agents, &mut sd, &train_worlds, &corpus, &tc, &game, seed, true, true).unwrap();

        let a = eval_full(&sa, &Selection::Plain, "a");
        let b = eval_full(&sb, &Selection::Rmm(rmm_infer), "b");
        let d = eval_full(&sd, &Selection::Plain, "d");
        println!("seed {seed} pre={pre_iters} sp={sp_iters} rlw={rl_w} ({:.0?})", t0.elapsed());
        println!("  A baseline: gp {:+.3} oracle {:.3} types {} bleu {:.3}", a.0, a.2, a.1, a.3);
        println!("  B rmm_n3:   gp {:+.3} oracle {:.3} types {} bleu {:.3}", b.0, b.2, b.1, b.3);
        println!("  D da:       gp {:+.3} oracle {:.3} types {} bleu {:.3}", d.0, d.2, d.1, d.3);
        if b.0 >= a.0 {
            wins_a += 1;
        }
        if b.1 > d.1 {
            wins_c += 1;
        }
        println!("  6a rmm>=base: {}   6c types rmm>da: {}", b.0 >= a.0, b.1 > d.1);
    }
    println!("TOTAL 6a {wins_a}/3  6c {wins_c}/3");
}
