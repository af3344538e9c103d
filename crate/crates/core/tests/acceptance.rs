//! Acceptance suite: one test per criterion, each printing a PASS line.
//!
//! Everything here is property-based or directional on synthetic worlds;
//! thresholds and tolerances are pinned in code.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dialnav::agents::{init_models, Agents, ModelDims, NavState, RunFlags};
use dialnav::config::ExperimentConfig;
use dialnav::eval::{self, WorldSplit};
use dialnav::gameplay::{self, GameConfig, Selection};
use dialnav::lang::{self, ContextMode, DialogueHistory, Role, Utterance, Vocabulary};
use dialnav::rmm::{self, RmmConfig, SelectionMode};
use dialnav::tensor::{check_gradients, ParamStore, Tape, Tensor};
use dialnav::training::{self, Method, NavStepRecord, TrainConfig};
use dialnav::world::{self, generate_world, Action, NodeId, Pose, World, WorldParams};

fn small_fixture(seed: u64) -> (ParamStore, Agents, World) {
    let params = WorldParams::default();
    let world = generate_world(seed, &params).unwrap();
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
    init_models(&mut store, &dims, seed).unwrap();
    (store, Agents::new(dims, vocab).unwrap(), world)
}

// ====================================================================
// Criterion 1: gradient correctness by central finite differences.
// ====================================================================

/// Per-op checks at <= 1e-4, composite blocks and both full losses at
/// <= 1e-3, >= 50 random coordinates each, all within a 2-minute budget.
#[test]
fn criterion_1_gradient_correctness() {
    let t0 = std::time::Instant::now();
    const N: usize = 50;
    // The step size trades truncation error against f32 forward rounding;
    // at 1e-2 the rounding jitter sits well below the tolerance while the
    // losses are smooth enough that truncation stays negligible.
    const EPS_OPS: f64 = 1e-2;
    const EPS: f64 = 1e-2;
    let mut rng = ChaCha8Rng::seed_from_u64(99);

    // Elementwise and structural ops, each as sum(op(params)).
    type LossFn = fn(&mut ParamStore, bool) -> Result<f64, dialnav::tensor::TensorError>;
    let elementwise: Vec<(&str, LossFn)> = vec![
        ("add", |st, g| {
            let mut tape = Tape::new(g);
            let a = tape.param(st, "a")?;
            let b = tape.param(st, "b")?;
            let y = tape.add(a, b)?;
            let w = tape.mul(y, y)?;
            let loss = tape.sum(w)?;
            if g {
                tape.backward(loss, st)?;
            }
            tape.scalar64(loss)
        }),
        ("sub_scale", |st, g| {
            let mut tape = Tape::new(g);
            let a = tape.param(st, "a")?;
            let b = tape.param(st, "b")?;
            let y = tape.sub(a, b)?;
            let y = tape.scale(y, 1.7)?;
            let w = tape.mul(y, y)?;
            let loss = tape.sum(w)?;
            if g {
                tape.backward(loss, st)?;
            }
            tape.scalar64(loss)
        }),
        ("mul", |st, g| {
            let mut tape = Tape::new(g);
            let a = tape.param(st, "a")?;
            let b = tape.param(st, "b")?;
            let y = tape.mul(a, b)?;
            let loss = tape.sum(y)?;
            if g {
                tape.backward(loss, st)?;
            }
            tape.scalar64(loss)
        }),
        ("tanh", |st, g| {
            let mut tape = Tape::new(g);
            let a = tape.param(st, "a")?;
            let y = tape.tanh(a)?;
            let loss = tape.sum(y)?;
            if g {
                tape.backward(loss, st)?;
            }
            tape.scalar64(loss)
        }),
        ("sigmoid", |st, g| {
            let mut tape = Tape::new(g);
            let a = tape.param(st, "a")?;
            let y = tape.sigmoid(a)?;
            let loss = tape.sum(y)?;
            if g {
                tape.backward(loss, st)?;
            }
            tape.scalar64(loss)
        }),
        ("relu", |st, g| {
            let mut tape = Tape::new(g);
            let a = tape.param(st, "a")?;
            let y = tape.relu(a)?;
            let sq = tape.mul(y, y)?;
            let loss = tape.sum(sq)?;
            if g {
                tape.backward(loss, st)?;
            }
            tape.scalar64(loss)
        }),
        ("softmax", |st, g| {
            let mut tape = Tape::new(g);
            let a = tape.param(st, "a")?;
            let y = tape.softmax(a)?;
            let sq = tape.mul(y, y)?;
            let loss = tape.sum(sq)?;
            if g {
                tape.backward(loss, st)?;
            }
            tape.scalar64(loss)
        }),
        ("cross_entropy", |st, g| {
            let mut tape = Tape::new(g);
            let a = tape.param(st, "a")?;
            let loss = tape.cross_entropy(a, 2)?;
            if g {
                tape.backward(loss, st)?;
            }
            tape.scalar64(loss)
        }),
        ("slice_concat", |st, g| {
            let mut tape = Tape::new(g);
            let a = tape.param(st, "a")?;
            let s1 = tape.slice(a, 0, 3)?;
            let s2 = tape.slice(a, 2, 4)?;
            let c = tape.concat(&[s1, s2])?;
            let sq = tape.mul(c, c)?;
            let loss = tape.sum(sq)?;
            if g {
                tape.backward(loss, st)?;
            }
            tape.scalar64(loss)
        }),
        ("mean", |st, g| {
            let mut tape = Tape::new(g);
            let a = tape.param(st, "a")?;
            let sq = tape.mul(a, a)?;
            let loss = tape.mean(sq)?;
            if g {
                tape.backward(loss, st)?;
            }
            tape.scalar64(loss)
        }),
        ("dropout_fixed_mask", |st, g| {
            let mut tape = Tape::new(g);
            let mut mask_rng = ChaCha8Rng::seed_from_u64(1234);
            let a = tape.param(st, "a")?;
            let y = tape.dropout(a, 0.4, true, &mut mask_rng)?;
            let sq = tape.mul(y, y)?;
            let loss = tape.sum(sq)?;
            if g {
                tape.backward(loss, st)?;
            }
            tape.scalar64(loss)
        }),
    ];
    for (name, f) in elementwise {
        let mut store = ParamStore::new();
        let init = |rng: &mut ChaCha8Rng, n: usize| {
            Tensor::vector((0..n).map(|_| rand::Rng::random_range(rng, -1.5..1.5f32)).collect())
        };
        store.insert("a", init(&mut rng, 7)).unwrap();
        store.insert("b", init(&mut rng, 7)).unwrap();
        let report = check_gradients(&mut store, "", N, EPS_OPS, &mut rng, f).unwrap();
        assert!(
            report.within(1e-4),
            "op {name}: max rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    // Matrix ops and embeddings.
    {
        let mut store = ParamStore::new();
        let rand_t = |rng: &mut ChaCha8Rng, shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            Tensor::new(
                shape,
                (0..n).map(|_| rand::Rng::random_range(rng, -1.0..1.0f32)).collect(),
            )
            .unwrap()
        };
        store.insert("m", rand_t(&mut rng, vec![4, 5])).unwrap();
        store.insert("n", rand_t(&mut rng, vec![5, 3])).unwrap();
        store.insert("x", rand_t(&mut rng, vec![5])).unwrap();
        store.insert("q", rand_t(&mut rng, vec![4])).unwrap();
        store.insert("emb", rand_t(&mut rng, vec![6, 4])).unwrap();
        let report = check_gradients(&mut store, "", N, EPS_OPS, &mut rng, |st, g| {
            let mut tape = Tape::new(g);
            let m = tape.param(st, "m")?;
            let n = tape.param(st, "n")?;
            let x = tape.param(st, "x")?;
            let q = tape.param(st, "q")?;
            let emb = tape.param(st, "emb")?;
            let mm = tape.matmul(m, n)?;
            let mv = tape.matvec(m, x)?;
            let mvt = tape.matvec_t(m, q)?;
            let row = tape.embed_row(emb, 3)?;
            let stack = tape.stack_rows(&[mv, q])?;
            let sv = tape.matvec(stack, q)?;
            let parts = [mm, mv, mvt, row, stack, sv]
                .iter()
                .map(|v| {
                    let sq = tape.mul(*v, *v)?;
                    tape.sum(sq)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let mut loss = parts[0];
            for p in &parts[1..] {
                loss = tape.add(loss, *p)?;
            }
            if g {
                tape.backward(loss, st)?;
            }
            tape.scalar64(loss)
        })
        .unwrap();
        assert!(
            report.within(1e-3),
            "matrix ops: max rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    // LSTM cell, bidirectional encoder, attention.
    {
        let mut store = ParamStore::new();
        let mut init_rng = ChaCha8Rng::seed_from_u64(5);
        dialnav::tensor::nn_init::insert_lstm(&mut store, &mut init_rng, "t/fw", 5, 4).unwrap();
        dialnav::tensor::nn_init::insert_lstm(&mut store, &mut init_rng, "t/bw", 5, 4).unwrap();
        dialnav::tensor::nn_init::insert_uniform(&mut store, &mut init_rng, "t/q", vec![8, 8])
            .unwrap();
        let report = check_gradients(&mut store, "t/", N, EPS_OPS, &mut rng, |st, g| {
            let mut tape = Tape::new(g);
            let fw = dialnav::tensor::LstmWeights::lease(&mut tape, st, "t/fw")?;
            let bw = dialnav::tensor::LstmWeights::lease(&mut tape, st, "t/bw")?;
            let proj = tape.param(st, "t/q")?;
            let xs: Vec<_> = (0..3)
                .map(|i| {
                    tape.constant(Tensor::vector(
                        (0..5).map(|j| ((i * 5 + j) as f32 * 0.13).sin()).collect(),
                    ))
                })
                .collect();
            let enc = dialnav::tensor::bilstm_encode(&mut tape, &fw, &bw, &xs, 4)?;
            let (ctx, _) = dialnav::tensor::attention(&mut tape, proj, enc.final_h, &enc.steps)?;
            let sq = tape.mul(ctx, ctx)?;
            let loss = tape.sum(sq)?;
            if g {
                tape.backward(loss, st)?;
            }
            tape.scalar64(loss)
        })
        .unwrap();
        assert!(
            report.within(1e-3),
            "lstm/attention: max rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    // Both full losses over a frozen training episode: the trajectory,
    // teacher targets, and rewards are fixed data; parameters vary.
    {
        let (mut store, agents, world) = small_fixture(8);
        let game = GameConfig::default();
        let start = Pose { node: NodeId(world.num_nodes() - 1), heading: 0 };
        let goal = world.goal_node();
        let base = gameplay::run_episode(
            &agents, &store, &world, start, goal, &game, 42, &Selection::Plain, Some(0.0),
        )
        .unwrap();
        let data = base.train.unwrap();
        let actions: Vec<Action> = data.nav_steps.iter().map(|s| s.action).collect();
        let teachers: Vec<Action> = data.nav_steps.iter().map(|s| s.teacher).collect();
        let rewards: Vec<f64> = data.nav_steps.iter().map(|s| s.reward).collect();
        let context = lang::build_context(
            &DialogueHistory::new(agents.vocab.id(&world.target_object)),
            game.context_mode,
            game.history_cap,
        );
        // Frozen-trajectory forward pass shared by both loss closures.
        let forward = |st: &ParamStore,
                       tape: &mut Tape|
         -> Result<Vec<NavStepRecord>, dialnav::tensor::TensorError> {
            let mut noise = ChaCha8Rng::seed_from_u64(0);
            let ctx = agents
                .navigator
                .encode_context(tape, st, &context, RunFlags::eval(), &mut noise)
                .map_err(|e| dialnav::tensor::TensorError::Invalid(e.to_string()))?;
            let mut state = agents.navigator.start_state(&ctx);
            let mut pose = start;
            let mut steps = Vec::new();
            for (i, action) in actions.iter().enumerate() {
                let obs = world::observation(&world, pose);
                let step = agents
                    .navigator
                    .policy_step(tape, st, &state, &obs, &ctx, RunFlags::eval(), &mut noise)
                    .map_err(|e| dialnav::tensor::TensorError::Invalid(e.to_string()))?;
                pose = world::step(&world, pose, *action);
                state = NavState { prev_action: Some(*action), ..step.state };
                steps.push(NavStepRecord {
                    logits: step.logits,
                    value: step.value,
                    action: *action,
                    reward: rewards[i],
                    teacher: teachers[i],
                });
            }
            Ok(steps)
        };
        let ce_closure = |st: &mut ParamStore, g: bool| {
            let mut tape = Tape::new(g);
            let steps = forward(st, &mut tape)?;
            let loss = training::ce_loss(&mut tape, &steps)?;
            if g {
                tape.backward(loss, st)?;
            }
            tape.scalar64(loss)
        };
        let report = check_gradients(&mut store, "", N, EPS, &mut rng, ce_closure).unwrap();
        assert!(
            report.within(1e-3),
            "full CE loss: max rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
        // The advantage and bootstrap target are detached quantities: pin
        // them from the base forward pass so the finite differences probe
        // the same loss function the analytic gradient defines.
        let pins = {
            let mut tape = Tape::new(false);
            let steps = forward(&store, &mut tape).unwrap();
            training::a2c_pins(&tape, &steps, 1, None).unwrap()
        };
        let a2c_closure = move |st: &mut ParamStore, g: bool| {
            let mut tape = Tape::new(g);
            let steps = forward(st, &mut tape)?;
            let (actor, critic) = training::a2c_parts_pinned(&mut tape, &steps, &pins)?;
            let loss = tape.add(actor, critic)?;
            if g {
                tape.backward(loss, st)?;
            }
            tape.scalar64(loss)
        };
        let report = check_gradients(&mut store, "", N, EPS, &mut rng, a2c_closure).unwrap();
        assert!(
            report.within(1e-3),
            "full A2C loss: max rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    let took = t0.elapsed();
    assert!(took.as_secs() < 120, "gradient checks took {took:?}");
    println!("ACCEPTANCE 1 gradient correctness: PASS ({took:?})");
}

// ====================================================================
// Criterion 2: planner and metric oracles.
// ====================================================================

/// Exhaustive simple-path enumeration, independent of the planner.
fn brute_force_distance(world: &World, from: NodeId, to: NodeId) -> f64 {
    fn rec(
        world: &World,
        cur: NodeId,
        to: NodeId,
        seen: &mut Vec<bool>,
        acc: f64,
        best: &mut f64,
    ) {
        if cur == to {
            *best = best.min(acc);
            return;
        }
        for (nb, _) in world.neighbors(cur) {
            if !seen[nb.0] {
                seen[nb.0] = true;
                let a = world.node(cur).unwrap();
                let b = world.node(nb).unwrap();
                let raw = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt();
                let quantized =
                    ((raw / world::DIST_EPS).round().max(1.0)) * world::DIST_EPS;
                rec(world, nb, to, seen, acc + quantized, best);
                seen[nb.0] = false;
            }
        }
    }
    let mut seen = vec![false; world.num_nodes()];
    seen[from.0] = true;
    let mut best = f64::INFINITY;
    rec(world, from, to, &mut seen, 0.0, &mut best);
    best
}

#[test]
fn criterion_2_planner_and_metric_oracles() {
    // Planner equals brute force on all pairs of 20 small worlds.
    let params = WorldParams {
        num_rooms: 4,
        nodes_per_room: 2,
        ..WorldParams::default()
    };
    for seed in 0..20u64 {
        let w = generate_world(seed, &params).unwrap();
        assert!(w.num_nodes() <= 10);
        for a in 0..w.num_nodes() {
            for b in 0..w.num_nodes() {
                let planner = world::distance(&w, NodeId(a), NodeId(b)).unwrap();
                let brute = brute_force_distance(&w, NodeId(a), NodeId(b));
                assert!(
                    (planner - brute).abs() < 1e-9,
                    "seed {seed} ({a},{b}): {planner} vs {brute}"
                );
            }
        }
    }

    // Rewards telescope exactly over 200 random episodes.
    let params = WorldParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for ep in 0..200 {
        let w = generate_world(ep % 10, &params).unwrap();
        let goal = w.goal_node();
        let mut pose = Pose {
            node: NodeId(rand::Rng::random_range(&mut rng, 0..w.num_nodes())),
            heading: rand::Rng::random_range(&mut rng, 0..4),
        };
        let start = pose;
        let mut total = 0.0;
        for _ in 0..rand::Rng::random_range(&mut rng, 1..60) {
            let action = Action::from_index(rand::Rng::random_range(&mut rng, 0..4)).unwrap();
            let next = world::step(&w, pose, action);
            total += training::step_reward(&w, pose, next, goal).unwrap();
            pose = next;
        }
        let direct = world::goal_progress(&w, start.node, pose.node, goal).unwrap();
        assert_eq!(total, direct, "episode {ep} does not telescope");
    }

    // The shortest-path agent scores the full initial distance, exactly.
    let vocab = Vocabulary::standard(&params.object_vocab).unwrap();
    let game = GameConfig::default();
    for seed in 30..40u64 {
        let w = generate_world(seed, &params).unwrap();
        let goal = w.goal_node();
        let start = Pose { node: NodeId(w.num_nodes() - 1), heading: 1 };
        let t = gameplay::run_teacher_episode(&w, &vocab, start, goal, &game, seed).unwrap();
        let d = world::distance(&w, start.node, goal).unwrap();
        assert_eq!(t.final_goal_progress, d, "seed {seed}");
    }
    println!("ACCEPTANCE 2 planner/metric oracles: PASS");
}

// ====================================================================
// Criterion 3: gameplay conformance over 100 seeded episodes.
// ====================================================================

#[test]
fn criterion_3_algorithm_conformance() {
    let (store, agents, world) = small_fixture(3);
    let game = GameConfig::default();
    let start = Pose { node: NodeId(0), heading: 0 };
    let goal = world.goal_node();
    for episode_seed in 0..100u64 {
        let selection = if episode_seed % 10 == 0 {
            Selection::Rmm(RmmConfig {
                n: 2,
                selection: SelectionMode::InferConfidence,
                ..RmmConfig::default()
            })
        } else {
            Selection::Plain
        };
        let out = gameplay::run_episode(
            &agents, &store, &world, start, goal, &game, episode_seed, &selection, None,
        )
        .unwrap();
        let t = &out.transcript;
        gameplay::validate_transcript(t, &game, &world)
            .unwrap_or_else(|e| panic!("episode {episode_seed}: {e}"));
        assert!(t.num_actions() <= game.max_actions);
        assert!(t.num_exchanges() <= game.max_exchanges);
        // History stays within the token cap at every exchange.
        let target = agents.vocab.id(&world.target_object);
        let mut history = DialogueHistory::new(target);
        for (q, a) in t.exchanges() {
            history.push(
                Utterance::new(Role::Question, q).unwrap(),
                Utterance::new(Role::Answer, a).unwrap(),
            );
            let ctx = lang::build_context(&history, ContextMode::FullHistory, game.history_cap);
            assert!(ctx.len() <= game.history_cap);
        }
    }
    println!("ACCEPTANCE 3 gameplay conformance: PASS (100 episodes)");
}

// ====================================================================
// Criterion 4: mental-model structure.
// ====================================================================

#[test]
fn criterion_4_rmm_structure() {
    let (mut store, agents, world) = small_fixture(4);
    // Bias stop away so rollouts reach deeper question points.
    store.get_mut("nav/out_b").unwrap().data[Action::Stop.index()] = -60.0;
    let game = GameConfig::default();
    let goal = world.goal_node();

    // Build a snapshot at a question point.
    let mut tape = Tape::new(false);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let target = agents.vocab.id(&world.target_object);
    let ctx = agents
        .navigator
        .encode_context(&mut tape, &store, &[target], RunFlags::eval(), &mut rng)
        .unwrap();
    let nav = agents.navigator.start_state(&ctx);
    let state = gameplay::DialogueState {
        pose: Pose { node: NodeId(0), heading: 0 },
        history: DialogueHistory::new(target),
        actions_taken: 0,
        exchanges_done: 0,
    };
    let snap = rmm::RmmSnapshot::freeze(&tape, &state, nav);

    let cfg = RmmConfig { n: 3, ..RmmConfig::default() };
    let store_before = store.value_bytes();
    let out = rmm::rmm_exchange(&agents, &store, &world, goal, &game, &cfg, &snap, 11, 0).unwrap();
    // Exactly nine top-level pairs; rollouts within budget; deep recursion
    // at branching one; the store untouched bit for bit.
    assert_eq!(out.branches.len(), 9);
    assert!(out.rollouts_used <= cfg.budget());
    let mut saw_deep = false;
    for b in &out.branches {
        if b.deep_layers > 0 {
            saw_deep = true;
            assert!(b.deep_branching.iter().all(|k| *k == 1));
        }
    }
    assert!(saw_deep, "no branch reached a deeper question point");
    assert_eq!(store.value_bytes(), store_before);

    // Single-branch search equals the plain pipeline, transcript for
    // transcript, on ten fresh episodes.
    let (store2, agents2, world2) = small_fixture(5);
    let start = Pose { node: NodeId(1), heading: 2 };
    let goal2 = world2.goal_node();
    for episode_seed in 200..210u64 {
        let plain = gameplay::run_episode(
            &agents2, &store2, &world2, start, goal2, &game, episode_seed, &Selection::Plain,
            None,
        )
        .unwrap()
        .transcript;
        let one = gameplay::run_episode(
            &agents2, &store2, &world2, start, goal2, &game, episode_seed,
            &Selection::Rmm(RmmConfig {
                n: 1,
                selection: SelectionMode::InferConfidence,
                ..RmmConfig::default()
            }),
            None,
        )
        .unwrap()
        .transcript;
        assert_eq!(plain.events, one.events, "episode {episode_seed}");
        assert_eq!(plain.final_goal_progress, one.final_goal_progress);
    }
    println!("ACCEPTANCE 4 mental-model structure: PASS");
}

// ====================================================================
// Criterion 5: BLEU against a hand-tallied oracle.
// ====================================================================

/// Independent BLEU oracle: plain window counting, clipped matches,
/// geometric mean over orders up to min(4, len), closest-length brevity
/// penalty, epsilon floor for zero matches.
fn bleu_oracle(cand: &[u32], refs: &[&[u32]]) -> f64 {
    if cand.is_empty() {
        return 0.0;
    }
    let count = |toks: &[u32], n: usize| -> Vec<Vec<u32>> {
        if toks.len() < n {
            Vec::new()
        } else {
            toks.windows(n).map(|w| w.to_vec()).collect()
        }
    };
    let orders = cand.len().min(4);
    let mut log_sum = 0.0;
    for n in 1..=orders {
        let cgrams = count(cand, n);
        let mut matches = 0usize;
        let mut used: Vec<Vec<usize>> = refs.iter().map(|r| vec![0; r.len()]).collect();
        let _ = &mut used;
        // Clipped matching: for each distinct gram, min(cand count, max ref count).
        let mut distinct: Vec<Vec<u32>> = Vec::new();
        for g in &cgrams {
            if !distinct.contains(g) {
                distinct.push(g.clone());
            }
        }
        for g in &distinct {
            let c_count = cgrams.iter().filter(|x| *x == g).count();
            let r_max = refs
                .iter()
                .map(|r| count(r, n).iter().filter(|x| *x == g).count())
                .max()
                .unwrap_or(0);
            matches += c_count.min(r_max);
        }
        let p = if matches == 0 {
            1e-9
        } else {
            matches as f64 / cgrams.len() as f64
        };
        log_sum += p.ln();
    }
    let c = cand.len() as i64;
    let r = refs
        .iter()
        .map(|r| r.len() as i64)
        .min_by_key(|len| ((len - c).abs(), *len))
        .unwrap_or(0);
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * (log_sum / orders as f64).exp()
}

#[test]
fn criterion_5_bleu_oracle() {
    let pairs: Vec<(Vec<u32>, Vec<u32>)> = vec![
        (vec![1, 2, 3, 4, 5], vec![1, 2, 3, 4, 6]),
        (vec![1, 2, 3, 4], vec![1, 2, 3, 4]),
        (vec![1, 1, 2, 2, 3], vec![1, 2, 3, 1, 2]),
        (vec![7, 8, 9, 10, 11, 12], vec![7, 8, 9, 13, 11, 12]),
        (vec![5, 5, 5, 5], vec![5, 5]),
        (vec![1, 2], vec![2, 1]),
        (vec![3, 1, 4, 1, 5, 9, 2, 6], vec![3, 1, 4, 1, 5, 9, 2, 6]),
        (vec![10, 20, 30], vec![10, 20, 30, 40, 50, 60, 70, 80]),
        (vec![1, 2, 3, 4, 5, 6, 7], vec![2, 3, 4, 5, 6, 7, 8]),
        (vec![9, 9, 9, 9, 9], vec![8, 8, 8, 8, 8]),
    ];
    assert_eq!(pairs.len(), 10);
    for (i, (cand, refr)) in pairs.iter().enumerate() {
        let ours = lang::bleu(cand, &[refr.as_slice()]);
        let oracle = bleu_oracle(cand, &[refr.as_slice()]);
        assert!(
            (ours - oracle).abs() <= 1e-9,
            "pair {i}: {ours} vs oracle {oracle}"
        );
    }
    // Identity and disjoint extremes.
    let same = [1u32, 2, 3, 4, 5];
    assert!((lang::bleu(&same, &[&same]) - 1.0).abs() < 1e-12);
    let disjoint = lang::bleu(&[1, 2, 3, 4], &[&[5u32, 6, 7, 8][..]]);
    assert!(disjoint <= 1e-6);
    println!("ACCEPTANCE 5 BLEU oracle: PASS (10 pairs)");
}

// ====================================================================
// Criterion 7: data-augmentation mixing weights.
// ====================================================================

#[test]
fn criterion_7_da_mixing() {
    let cfg = ExperimentConfig::tiny();
    let params = cfg.world_params();
    let worlds: Vec<World> = cfg.train_seeds()[..2]
        .iter()
        .map(|s| generate_world(*s, &params).unwrap())
        .collect();
    let vocab = cfg.vocabulary().unwrap();
    let dims = cfg.model_dims(vocab.len());
    let agents = Agents::new(dims, vocab.clone()).unwrap();
    let mut store = ParamStore::new();
    init_models(&mut store, &dims, 1).unwrap();
    let ccfg = lang::CorpusConfig {
        episodes_per_world: 4,
        noise: 0.0,
        ..lang::CorpusConfig::default()
    };
    let records = lang::generate_corpus(&worlds, &vocab, &ccfg, 3).unwrap();
    let corpus = training::prepare_corpus(&worlds, &records, 3).unwrap();
    // The paper's lambda = 0.1, as configured by default.
    let tcfg = TrainConfig {
        batch_selfplay: 3,
        iters_selfplay: 2,
        dropout: 0.2,
        lambda_da: 0.1,
        seed: 5,
        ..TrainConfig::default()
    };
    assert_eq!(tcfg.lambda_da, 0.1);
    let game = cfg.game_config();
    let report = training::data_augmentation_round(
        &agents, &mut store, &worlds, &corpus, &tcfg, &game, 17, true, true,
    )
    .unwrap();
    assert_eq!(report.rollouts_per_conversation, 3);
    assert_eq!(report.retained_per_conversation, 1);
    let m = &report.mix;
    let check = |weighted: f64, raw: f64, lam: f64, what: &str| {
        let rel = (weighted - lam * raw).abs() / raw.abs().max(1e-12);
        assert!(rel <= 1e-6, "{what}: weighted {weighted} vs {lam} * {raw}");
    };
    check(m.aug_weighted_nav, m.aug_raw_nav, 0.1, "nav generated");
    check(m.human_weighted_nav, m.human_raw_nav, 0.9, "nav human");
    check(m.aug_weighted_spk, m.aug_raw_spk, 0.1, "spk generated");
    check(m.human_weighted_spk, m.human_raw_spk, 0.9, "spk human");
    println!("ACCEPTANCE 7 data-augmentation mixing: PASS (lambda = {})", m.lambda);
}

// ====================================================================
// Criterion 8: byte-identical determinism.
// ====================================================================

#[test]
fn criterion_8_determinism() {
    let run = || {
        let mut cfg = ExperimentConfig::tiny();
        cfg.train.iters_pretrain = 8;
        cfg.train.iters_selfplay = 2;
        cfg.train.batch_pretrain = 4;
        cfg.train.batch_selfplay = 2;
        cfg.world.train_worlds = 2;
        cfg.world.unseen_worlds = 2;
        cfg.eval.episodes_per_world = 1;
        let params = cfg.world_params();
        let train_worlds: Vec<World> = cfg
            .train_seeds()
            .iter()
            .map(|s| generate_world(*s, &params).unwrap())
            .collect();
        let unseen: Vec<World> = cfg
            .unseen_seeds()
            .iter()
            .map(|s| generate_world(*s, &params).unwrap())
            .collect();
        let vocab = cfg.vocabulary().unwrap();
        let dims = cfg.model_dims(vocab.len());
        let agents = Agents::new(dims, vocab.clone()).unwrap();
        let records = lang::generate_corpus(&train_worlds, &vocab, &cfg.corpus_config(), cfg.seed)
            .unwrap();
        let corpus = training::prepare_corpus(&train_worlds, &records, cfg.seed).unwrap();
        let mut store = ParamStore::new();
        init_models(&mut store, &dims, cfg.seed).unwrap();
        let tcfg = cfg.train_config();
        training::pretrain(&agents, &mut store, &train_worlds, &corpus, &tcfg).unwrap();
        let game = cfg.game_config();
        training::selfplay(
            &agents, &mut store, &train_worlds, Method::Rmm3, &tcfg, &game,
            &cfg.rmm_config(3), cfg.seed,
        )
        .unwrap();
        let out = eval::evaluate(
            &agents,
            &store,
            &unseen,
            WorldSplit::Unseen,
            &cfg.train_seeds(),
            &[ContextMode::FullHistory],
            cfg.eval.episodes_per_world,
            cfg.eval.eval_seed,
            &game,
            &Selection::Rmm(RmmConfig {
                n: 3,
                selection: SelectionMode::InferConfidence,
                ..RmmConfig::default()
            }),
            "rmm_n3",
        )
        .unwrap();
        let transcript_bytes: Vec<String> = out.transcripts["full"]
            .iter()
            .map(|t| t.to_jsonl())
            .collect();
        let report_bytes = serde_json::to_string(&out.report).unwrap();
        (store.value_bytes(), transcript_bytes, report_bytes)
    };
    let a = run();
    let b = run();
    assert_eq!(a.0, b.0, "checkpoint bytes differ");
    assert_eq!(a.1, b.1, "transcript bytes differ");
    assert_eq!(a.2, b.2, "report bytes differ");
    println!("ACCEPTANCE 8 determinism: PASS");
}
