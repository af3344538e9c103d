//! Operator entry points: world/corpus generation, pretraining, self-play,
//! evaluation, analysis, and transcript replay.
//!
//! Every command is idempotent given the same config and seed. Artifacts
//! land under the config's output directory (overridable with the
//! `DIALNAV_OUT` environment variable): `worlds/`, `corpus/`, `ckpt/`,
//! `logs/`, `transcripts/`, `reports/`, plus the resolved config and a
//! version stamp.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dialnav::agents::{init_models, Agents};
use dialnav::config::ExperimentConfig;
use dialnav::eval::{self, WorldSplit};
use dialnav::gameplay::{self, GameConfig, Selection, Transcript};
use dialnav::lang::{self, ContextMode, CorpusRecord, Vocabulary};
use dialnav::rmm::{RmmConfig, SelectionMode};
use dialnav::tensor::{load_checkpoint, save_checkpoint, CheckpointMeta, ParamStore};
use dialnav::training::{self, Method, PreparedCorpus, TrainLogRow};
use dialnav::world::{generate_world, World};

const EXIT_CONFIG: u8 = 2;
const EXIT_MISSING: u8 = 3;
const EXIT_INVARIANT: u8 = 4;

#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn config(msg: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, message: msg.into() }
    }

    fn missing(msg: impl Into<String>) -> Self {
        Self { code: EXIT_MISSING, message: msg.into() }
    }

    fn run(msg: impl Into<String>) -> Self {
        Self { code: EXIT_INVARIANT, message: msg.into() }
    }
}

type CliResult<T> = Result<T, CliError>;

fn run_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::run(e.to_string())
}

#[derive(Parser)]
#[command(
    name = "dialnav",
    version,
    about = "Cooperative dialogue navigation lab: two agents, synthetic worlds, mental-model search"
)]
struct Cli {
    /// Config file path, or a preset name: `tiny` or `paper-scale`.
    #[arg(long, global = true, default_value = "tiny")]
    config: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Baseline,
    Da,
    Rmm,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Seen,
    Unseen,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    T0,
    Qa1,
    Full,
}

impl ModeArg {
    fn context(self) -> ContextMode {
        match self {
            ModeArg::T0 => ContextMode::TargetOnly,
            ModeArg::Qa1 => ContextMode::LastExchange,
            ModeArg::Full => ContextMode::FullHistory,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and unseen world splits.
    GenWorlds,
    /// Generate the scripted dialogue corpus over the training worlds.
    GenCorpus,
    /// Pretrain navigator and speaker on the scripted corpus.
    Pretrain,
    /// Fine-tune in gameplay with the chosen method.
    Selfplay {
        #[arg(long, value_enum)]
        method: MethodArg,
        /// Branching factor for the mental-model method.
        #[arg(long, default_value_t = 3)]
        n: usize,
    },
    /// Evaluate a trained method (or the shortest-path oracle) on a split.
    Eval {
        /// baseline | da | rmm | shortest-path
        #[arg(long)]
        method: String,
        #[arg(long, default_value_t = 3)]
        n: usize,
        #[arg(long, value_enum)]
        split: SplitArg,
        /// Conditioning mode; omitted means all three.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Recompute analysis artifacts from stored transcripts.
    Analyze {
        #[arg(long)]
        method: String,
        #[arg(long, value_enum)]
        split: SplitArg,
    },
    /// Re-run a stored transcript and verify the event stream matches.
    Replay { transcript: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    let (config, out) = load_config(&cli.config)?;
    match &cli.command {
        Command::GenWorlds => gen_worlds(&config, &out),
        Command::GenCorpus => gen_corpus(&config, &out),
        Command::Pretrain => pretrain(&config, &out),
        Command::Selfplay { method, n } => selfplay(&config, &out, *method, *n),
        Command::Eval { method, n, split, mode } => {
            eval_cmd(&config, &out, method, *n, *split, *mode)
        }
        Command::Analyze { method, split } => analyze(&config, &out, method, *split),
        Command::Replay { transcript } => replay(&config, &out, transcript),
    }
}

/// Resolve the config (file or preset) and prepare the output directory
/// with the resolved config and version stamp.
fn load_config(spec: &str) -> CliResult<(ExperimentConfig, PathBuf)> {
    let config = match spec {
        "tiny" => ExperimentConfig::tiny(),
        "paper-scale" => ExperimentConfig::paper_scale(),
        path => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::missing(format!("config {path}: {e}")))?;
            ExperimentConfig::from_toml(&text).map_err(|e| CliError::config(e.to_string()))?
        }
    };
    let mut out = PathBuf::from(&config.out_dir);
    if let Ok(root) = std::env::var("DIALNAV_OUT") {
        let leaf = out.file_name().map(|s| s.to_owned()).unwrap_or_default();
        out = PathBuf::from(root).join(leaf);
    }
    fs::create_dir_all(&out).map_err(run_err)?;
    fs::write(out.join("config.resolved.toml"), config.to_toml()).map_err(run_err)?;
    fs::write(out.join("VERSION"), concat!(env!("CARGO_PKG_VERSION"), "\n")).map_err(run_err)?;
    Ok((config, out))
}

fn world_path(out: &Path, split: &str, seed: u64) -> PathBuf {
    out.join("worlds").join(format!("{split}_{seed}.json"))
}

fn gen_worlds(config: &ExperimentConfig, out: &Path) -> CliResult<()> {
    let params = config.world_params();
    let dir = out.join("worlds");
    fs::create_dir_all(&dir).map_err(run_err)?;
    for (split, seeds) in [("train", config.train_seeds()), ("unseen", config.unseen_seeds())] {
        for seed in seeds {
            let world = generate_world(seed, &params).map_err(run_err)?;
            let json = serde_json::to_string_pretty(&world).map_err(run_err)?;
            fs::write(world_path(out, split, seed), json).map_err(run_err)?;
        }
    }
    let index = serde_json::json!({
        "train": config.train_seeds(),
        "unseen": config.unseen_seeds(),
    });
    fs::write(
        dir.join("index.json"),
        serde_json::to_string_pretty(&index).map_err(run_err)?,
    )
    .map_err(run_err)?;
    println!(
        "wrote {} train and {} unseen worlds under {}",
        config.world.train_worlds,
        config.world.unseen_worlds,
        dir.display()
    );
    Ok(())
}

fn load_worlds(config: &ExperimentConfig, out: &Path, split: &str) -> CliResult<Vec<World>> {
    let seeds = match split {
        "train" => config.train_seeds(),
        _ => config.unseen_seeds(),
    };
    let mut worlds = Vec::with_capacity(seeds.len());
    for seed in seeds {
        let path = world_path(out, split, seed);
        let text = fs::read_to_string(&path).map_err(|e| {
            CliError::missing(format!("{} (run gen-worlds first): {e}", path.display()))
        })?;
        worlds.push(serde_json::from_str(&text).map_err(run_err)?);
    }
    Ok(worlds)
}

/// Write lines one at a time so an interrupted run leaves whole lines.
fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(run_err)?;
    }
    let mut f = fs::File::create(path).map_err(run_err)?;
    for item in items {
        let line = serde_json::to_string(item).map_err(run_err)?;
        writeln!(f, "{line}").map_err(run_err)?;
        f.flush().map_err(run_err)?;
    }
    Ok(())
}

fn gen_corpus(config: &ExperimentConfig, out: &Path) -> CliResult<()> {
    let worlds = load_worlds(config, out, "train")?;
    let vocab = config.vocabulary().map_err(run_err)?;
    let records = lang::generate_corpus(&worlds, &vocab, &config.corpus_config(), config.seed)
        .map_err(run_err)?;
    let path = out.join("corpus").join("corpus.jsonl");
    write_jsonl(&path, &records)?;
    println!("wrote {} corpus records to {}", records.len(), path.display());
    Ok(())
}

fn load_corpus(out: &Path) -> CliResult<Vec<CorpusRecord>> {
    let path = out.join("corpus").join("corpus.jsonl");
    let text = fs::read_to_string(&path).map_err(|e| {
        CliError::missing(format!("{} (run gen-corpus first): {e}", path.display()))
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(run_err))
        .collect()
}

fn build_agents(config: &ExperimentConfig) -> CliResult<(Agents, Vocabulary)> {
    let vocab = config.vocabulary().map_err(run_err)?;
    let dims = config.model_dims(vocab.len());
    let agents = Agents::new(dims, vocab.clone()).map_err(|e| CliError::config(e.to_string()))?;
    Ok((agents, vocab))
}

fn ckpt_meta(config: &ExperimentConfig, vocab: &Vocabulary) -> CheckpointMeta {
    CheckpointMeta {
        model: serde_json::json!({
            "dims": config.model_dims(vocab.len()),
            "vocab_size": vocab.len(),
        }),
    }
}

fn load_ckpt(out: &Path, name: &str) -> CliResult<ParamStore> {
    let dir = out.join("ckpt").join(name);
    let (store, _meta) = load_checkpoint(&dir).map_err(|e| {
        CliError::missing(format!("checkpoint {} (train it first): {e}", dir.display()))
    })?;
    Ok(store)
}

fn prepared_corpus(
    config: &ExperimentConfig,
    worlds: &[World],
    out: &Path,
) -> CliResult<PreparedCorpus> {
    let records = load_corpus(out)?;
    training::prepare_corpus(worlds, &records, config.seed).map_err(run_err)
}

fn pretrain(config: &ExperimentConfig, out: &Path) -> CliResult<()> {
    let worlds = load_worlds(config, out, "train")?;
    let (agents, vocab) = build_agents(config)?;
    let corpus = prepared_corpus(config, &worlds, out)?;
    let mut store = ParamStore::new();
    init_models(&mut store, &agents.navigator.dims, config.seed).map_err(run_err)?;
    let log = training::pretrain(&agents, &mut store, &worlds, &corpus, &config.train_config())
        .map_err(run_err)?;
    write_jsonl(&out.join("logs").join("pretrain.jsonl"), &log)?;
    let dir = out.join("ckpt").join("pretrain");
    save_checkpoint(&dir, &store, &ckpt_meta(config, &vocab)).map_err(run_err)?;
    let last = log.last().map(|r| r.loss_ce).unwrap_or(f64::NAN);
    println!(
        "pretrained {} iters (final nav loss {last:.4}); checkpoint at {}",
        log.len(),
        dir.display()
    );
    Ok(())
}

fn method_from_args(method: MethodArg, n: usize) -> CliResult<Method> {
    Ok(match (method, n) {
        (MethodArg::Baseline, _) => Method::Baseline,
        (MethodArg::Da, _) => Method::DataAug,
        (MethodArg::Rmm, 1) => Method::Rmm1,
        (MethodArg::Rmm, 3) => Method::Rmm3,
        (MethodArg::Rmm, other) => {
            return Err(CliError::config(format!(
                "rmm branching factor must be 1 or 3, got {other}"
            )))
        }
    })
}

fn selfplay(config: &ExperimentConfig, out: &Path, method: MethodArg, n: usize) -> CliResult<()> {
    let method = method_from_args(method, n)?;
    let worlds = load_worlds(config, out, "train")?;
    let (agents, vocab) = build_agents(config)?;
    let mut store = load_ckpt(out, "pretrain")?;
    let tcfg = config.train_config();
    let game = config.game_config();
    let log: Vec<TrainLogRow> = match method {
        Method::DataAug => {
            let corpus = prepared_corpus(config, &worlds, out)?;
            let report = training::data_augmentation_round(
                &agents, &mut store, &worlds, &corpus, &tcfg, &game, config.seed, true, true,
            )
            .map_err(run_err)?;
            let mix_path = out.join("logs").join("da_mix.json");
            fs::create_dir_all(mix_path.parent().unwrap()).map_err(run_err)?;
            fs::write(
                &mix_path,
                serde_json::to_string_pretty(&report.mix).map_err(run_err)?,
            )
            .map_err(run_err)?;
            report.log
        }
        _ => {
            let rmm = config.rmm_config(n);
            training::selfplay(
                &agents, &mut store, &worlds, method, &tcfg, &game, &rmm, config.seed,
            )
            .map_err(run_err)?
        }
    };
    write_jsonl(
        &out.join("logs").join(format!("selfplay_{}.jsonl", method.name())),
        &log,
    )?;
    let dir = out.join("ckpt").join(method.name());
    save_checkpoint(&dir, &store, &ckpt_meta(config, &vocab)).map_err(run_err)?;
    println!("self-play ({}) done; checkpoint at {}", method.name(), dir.display());
    Ok(())
}

fn eval_modes(mode: Option<ModeArg>) -> Vec<ContextMode> {
    match mode {
        Some(m) => vec![m.context()],
        None => vec![
            ContextMode::TargetOnly,
            ContextMode::LastExchange,
            ContextMode::FullHistory,
        ],
    }
}

/// Trained-method label -> checkpoint name and inference-time selection.
fn eval_selection(label: &str) -> CliResult<(String, Selection)> {
    let selection = match label {
        "baseline" | "da" => Selection::Plain,
        "rmm_n1" | "rmm_n3" => {
            let n = if label == "rmm_n1" { 1 } else { 3 };
            Selection::Rmm(RmmConfig {
                n,
                selection: SelectionMode::InferConfidence,
                ..RmmConfig::default()
            })
        }
        other => {
            return Err(CliError::config(format!(
                "unknown trained method `{other}`"
            )))
        }
    };
    Ok((label.to_string(), selection))
}

fn transcript_file(out: &Path, method: &str, split: &str, mode: &str, idx: usize) -> PathBuf {
    out.join("transcripts")
        .join(format!("{method}_{split}_{mode}_ep{idx:04}.jsonl"))
}

fn eval_cmd(
    config: &ExperimentConfig,
    out: &Path,
    method: &str,
    n: usize,
    split: SplitArg,
    mode: Option<ModeArg>,
) -> CliResult<()> {
    let (split_name, ws) = match split {
        SplitArg::Seen => ("train", WorldSplit::Seen),
        SplitArg::Unseen => ("unseen", WorldSplit::Unseen),
    };
    let worlds = load_worlds(config, out, split_name)?;
    let game = config.game_config();
    let modes = eval_modes(mode);
    let output = if method == "shortest-path" {
        let vocab = config.vocabulary().map_err(run_err)?;
        eval::evaluate_teacher(
            &vocab,
            &worlds,
            ws,
            config.eval.episodes_per_world,
            config.eval.eval_seed,
            &game,
        )
        .map_err(run_err)?
    } else {
        let label = match method {
            "baseline" => "baseline".to_string(),
            "da" => "da".to_string(),
            "rmm" => format!("rmm_n{n}"),
            other => {
                return Err(CliError::config(format!(
                    "unknown method `{other}` (baseline | da | rmm | shortest-path)"
                )))
            }
        };
        let (ckpt_name, selection) = eval_selection(&label)?;
        let (agents, _vocab) = build_agents(config)?;
        let store = load_ckpt(out, &ckpt_name)?;
        eval::evaluate(
            &agents,
            &store,
            &worlds,
            ws,
            &config.train_seeds(),
            &modes,
            config.eval.episodes_per_world,
            config.eval.eval_seed,
            &game,
            &selection,
            &label,
        )
        .map_err(run_err)?
    };
    let label = output.report.method.clone();
    for (mode_key, transcripts) in &output.transcripts {
        for (i, t) in transcripts.iter().enumerate() {
            let path = transcript_file(out, &label, ws.name(), mode_key, i);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(run_err)?;
            }
            fs::write(&path, t.to_jsonl()).map_err(run_err)?;
        }
    }
    let report_path = out.join("reports").join(format!("{label}_{}.json", ws.name()));
    fs::create_dir_all(report_path.parent().unwrap()).map_err(run_err)?;
    let mut payload = serde_json::to_string_pretty(&output.report).map_err(run_err)?;
    payload.push('\n');
    fs::write(&report_path, payload).map_err(run_err)?;
    for (mode_key, rep) in &output.report.per_mode {
        println!(
            "{label} {} {mode_key}: goal progress {:.3} m | oracle {:.3} m | bleu {:.4}/{:.4} | {} lexical types",
            ws.name(),
            rep.mean_goal_progress,
            rep.mean_oracle_progress,
            rep.bleu_utterance,
            rep.bleu_dialogue,
            rep.lexical_types,
        );
    }
    println!("report at {}", report_path.display());
    Ok(())
}

fn analyze(config: &ExperimentConfig, out: &Path, method: &str, split: SplitArg) -> CliResult<()> {
    let (split_name, ws) = match split {
        SplitArg::Seen => ("train", WorldSplit::Seen),
        SplitArg::Unseen => ("unseen", WorldSplit::Unseen),
    };
    let worlds = load_worlds(config, out, split_name)?;
    let vocab = config.vocabulary().map_err(run_err)?;
    let dir = out.join("transcripts");
    let prefix = format!("{method}_{}_", ws.name());
    let entries = fs::read_dir(&dir)
        .map_err(|e| CliError::missing(format!("{} (run eval first): {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|s| s.to_str())
                .is_some_and(|s| s.starts_with(&prefix))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::missing(format!(
            "no transcripts matching {prefix}* under {}",
            dir.display()
        )));
    }
    let mut transcripts = Vec::with_capacity(files.len());
    for f in &files {
        let text = fs::read_to_string(f).map_err(run_err)?;
        transcripts.push(Transcript::from_jsonl(&text).map_err(run_err)?);
    }
    let game = config.game_config();
    let stats = eval::lexical_types(&transcripts, &vocab);
    let curve = eval::progress_curve(&transcripts, &worlds, game.max_exchanges).map_err(run_err)?;
    let analysis = serde_json::json!({
        "method": method,
        "split": ws.name(),
        "episodes": transcripts.len(),
        "lexical_types": stats.types,
        "word_log_frequency": stats
            .freq
            .iter()
            .map(|(w, c)| serde_json::json!({
                "word": w,
                "count": c,
                "log_count": (*c as f64).ln(),
            }))
            .collect::<Vec<_>>(),
        "progress_curve": curve,
    });
    let reports = out.join("reports");
    fs::create_dir_all(&reports).map_err(run_err)?;
    let json_path = reports.join(format!("analysis_{method}_{}.json", ws.name()));
    let mut payload = serde_json::to_string_pretty(&analysis).map_err(run_err)?;
    payload.push('\n');
    fs::write(&json_path, payload).map_err(run_err)?;
    let csv_path = reports.join(format!("curve_{method}_{}.csv", ws.name()));
    let mut csv = String::from("question_index,mean_fraction_of_goal_progress\n");
    for (k, v) in &curve {
        csv.push_str(&format!("{k},{v}\n"));
    }
    fs::write(&csv_path, csv).map_err(run_err)?;
    println!(
        "{method} {}: {} lexical types over {} transcripts; analysis at {}",
        ws.name(),
        stats.types,
        transcripts.len(),
        json_path.display()
    );
    Ok(())
}

fn replay(config: &ExperimentConfig, out: &Path, path: &Path) -> CliResult<()> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::missing(format!("{}: {e}", path.display())))?;
    let stored = Transcript::from_jsonl(&text).map_err(run_err)?;
    let spec = &stored.spec;
    // The world may come from either split.
    let world: World = ["train", "unseen"]
        .iter()
        .find_map(|split| {
            let p = world_path(out, split, spec.world_seed);
            fs::read_to_string(p).ok().and_then(|t| serde_json::from_str(&t).ok())
        })
        .ok_or_else(|| {
            CliError::missing(format!("world {} not found under worlds/", spec.world_seed))
        })?;
    let game = GameConfig {
        context_mode: spec.context_mode,
        ..config.game_config()
    };
    let replayed = if spec.method == "shortest_path" {
        let vocab = config.vocabulary().map_err(run_err)?;
        gameplay::run_teacher_episode(&world, &vocab, spec.start, spec.goal, &game, spec.episode_seed)
            .map_err(run_err)?
    } else {
        let (ckpt_name, selection) = eval_selection(&spec.method)?;
        let (agents, _) = build_agents(config)?;
        let store = load_ckpt(out, &ckpt_name)?;
        gameplay::run_episode(
            &agents, &store, &world, spec.start, spec.goal, &game, spec.episode_seed, &selection,
            None,
        )
        .map_err(run_err)?
        .transcript
    };
    if replayed.events == stored.events
        && replayed.terminal == stored.terminal
        && replayed.final_goal_progress == stored.final_goal_progress
    {
        println!("replay identical: {} events", stored.events.len());
        Ok(())
    } else {
        Err(CliError::run(format!(
            "replay diverged: stored {} events, replayed {}",
            stored.events.len(),
            replayed.events.len()
        )))
    }
}
