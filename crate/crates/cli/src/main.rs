use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use trajdiff::config::RunConfig;
use trajdiff::denoiser::{load_checkpoint, save_checkpoint, Checkpoint, Denoiser};
use trajdiff::eval::{evaluate, report_table, summarize, ExpertPlanner};
use trajdiff::experiments::{
    ablate_loss_space, ablation_curve_table, cell_stats, examples_for, matrix_table, rep_compare, rep_table,
    rl_experiment, rl_summary_table, scaling_curve_table, scaling_sweep, scaling_table, scene_set,
    speed_profile_table, summary_table, TrainedModel,
};
use trajdiff::io::{write_atomic, CsvTable};
use trajdiff::losses::{HybridConfig, Objective};
use trajdiff::par::Exec;
use trajdiff::row;
use trajdiff::scenarios::{build_dataset, export_json, generate_frames, import_json, read_dataset, Mix, Scene};
use trajdiff::train::train_il;

#[derive(Parser)]
#[command(name = "trajdiff", version, about = "Diffusion trajectory planner experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration; every key has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Run on the calling thread only.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic driving dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        frames: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write JSON lines instead of the binary format.
        #[arg(long)]
        jsonl: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Imitation training from a dataset.
    TrainIl {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Train every prediction/loss-space cell and write the score matrix.
    AblateLossSpace {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Comma-separated seeds.
        #[arg(long)]
        seeds: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Train on nested subsets of growing size and record divergence.
    ScalingSweep {
        #[arg(long)]
        out_dir: PathBuf,
        /// Dataset whose prefixes are used; generated from the config if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// Comma-separated subset sizes.
        #[arg(long)]
        sizes: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Reward-weighted safety post-training from a checkpoint.
    TrainRl {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        beta: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint (or the experts) on the held-out scene set.
    Evaluate {
        #[arg(long, required_unless_present = "expert")]
        checkpoint: Option<PathBuf>,
        /// Replay the expert trajectories instead of a model.
        #[arg(long)]
        expert: bool,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compare waypoint, velocity and hybrid-loss models on the same data.
    RepCompare {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("HDP_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).with_context(|| format!("HDP_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

/// Parse `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

fn set_key(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).with_context(|| format!("empty key in `{key}`"))?;
    let mut table = doc;
    for p in parts {
        table = table
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("`{p}` in `{key}` is not a table"))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn load_config(common: &Common, extra: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let text = match &common.config {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    let mut doc: toml::Table = toml::from_str(&text).context("parsing config")?;
    for s in &common.sets {
        let (k, v) = s.split_once('=').with_context(|| format!("override `{s}` is not KEY=VALUE"))?;
        set_key(&mut doc, k.trim(), parse_value(v.trim()))?;
    }
    for (k, v) in extra {
        if let Some(v) = v {
            set_key(&mut doc, k, parse_value(v))?;
        }
    }
    Ok(RunConfig::from_toml(&toml::to_string(&doc)?)?)
}

fn list(s: &Option<String>) -> Option<String> {
    s.as_ref().map(|s| format!("[{s}]"))
}

fn opt<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(|v| v.to_string())
}

fn exec(common: &Common) -> Exec {
    if common.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn prepare_dir(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let text = cfg.to_toml()?;
    write_atomic(&dir.join("config.toml"), |w| {
        use std::io::Write;
        w.write_all(text.as_bytes())
    })?;
    Ok(())
}

fn write_csv(dir: &Path, name: &str, table: &CsvTable, cfg: &RunConfig) -> Result<()> {
    let path = dir.join(name);
    table.write(&path, &cfg.hash()).with_context(|| format!("writing {}", path.display()))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn load_scenes(path: &Path) -> Result<Vec<Scene>> {
    let scenes = if path.extension().is_some_and(|e| e == "jsonl") {
        import_json(path)
    } else {
        read_dataset(path)
    };
    scenes.with_context(|| format!("reading dataset {}", path.display()))
}

fn eval_scenes(cfg: &RunConfig, mix: &Mix, exec: Exec) -> Result<Vec<Scene>> {
    Ok(scene_set(mix, cfg.eval.seed, cfg.eval.scenes, exec)?)
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::GenData {
            out,
            frames,
            seed,
            jsonl,
            common,
        } => {
            let cfg = load_config(&common, &[("data.frames", opt(&frames)), ("data.seed", opt(&seed))])?;
            let ex = exec(&common);
            if jsonl {
                let scenes = generate_frames(&cfg.data.mix, cfg.data.seed, 0..cfg.data.frames, ex)?;
                export_json(&out, &scenes)
            } else {
                build_dataset(cfg.data.frames, &cfg.data.mix, cfg.data.seed, &out, ex)
            }
            .with_context(|| format!("writing dataset {}", out.display()))?;
            eprintln!("wrote {} frames to {}", cfg.data.frames, out.display());
        }
        Command::TrainIl {
            data,
            out_dir,
            steps,
            seed,
            common,
        } => {
            let cfg = load_config(&common, &[("train.steps", opt(&steps)), ("train.seed", opt(&seed))])?;
            let ex = exec(&common);
            let scenes = load_scenes(&data)?;
            prepare_dir(&out_dir, &cfg)?;
            let examples = examples_for(&scenes, cfg.model.representation);
            let net = Denoiser::new(cfg.denoiser())?;
            let mut params = net.init_params(&mut ChaCha8Rng::seed_from_u64(cfg.model.init_seed));
            let held_out = if cfg.eval_every > 0 {
                eval_scenes(&cfg, &cfg.eval.mix, ex)?
            } else {
                Vec::new()
            };
            let mut evals = Vec::new();
            let curve = train_il(&net, &mut params, &cfg.schedule, &cfg.objective, &examples, &cfg.train, ex, |step, p| {
                if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
                    let m = TrainedModel {
                        net: net.clone(),
                        params: p.clone(),
                        curve: Vec::new(),
                    };
                    let s = summarize(&m.evaluate(&cfg.schedule, &held_out, &cfg.eval.metrics, ex)?);
                    eprintln!("step {step}: open-loop {:.2}", s.open_loop);
                    evals.push((step, s));
                }
                Ok(())
            })?;
            save_checkpoint(
                &out_dir.join("model.ckpt"),
                &Checkpoint {
                    config: net.config.clone(),
                    schedule: cfg.schedule,
                    params,
                },
            )?;
            let mut t = CsvTable::new(&["step", "loss", "lr"]);
            for p in &curve {
                t.push(row![p.step, p.loss, p.lr]);
            }
            write_csv(&out_dir, "loss_curve.csv", &t, &cfg)?;
            let rows = evals.iter().map(|(step, s)| (row![step], s)).collect();
            write_csv(&out_dir, "eval_curve.csv", &summary_table(&["step"], rows), &cfg)?;
        }
        Command::AblateLossSpace {
            data,
            out_dir,
            steps,
            seeds,
            common,
        } => {
            let cfg = load_config(&common, &[("train.steps", opt(&steps)), ("ablation.seeds", list(&seeds))])?;
            let ex = exec(&common);
            let scenes = load_scenes(&data)?;
            prepare_dir(&out_dir, &cfg)?;
            let held_out = eval_scenes(&cfg, &cfg.eval.mix, ex)?;
            let runs = ablate_loss_space(
                &cfg.model,
                &cfg.schedule,
                &scenes,
                &held_out,
                &cfg.train,
                &cfg.eval.metrics,
                &cfg.ablation.seeds,
                ex,
            )?;
            let stats = cell_stats(&runs);
            for c in &stats {
                eprintln!("{}: {:.2} ± {:.2}", c.spec, c.open_loop_mean, c.open_loop_std);
            }
            write_csv(&out_dir, "loss_matrix.csv", &matrix_table(&stats), &cfg)?;
            write_csv(&out_dir, "loss_curves.csv", &ablation_curve_table(&runs), &cfg)?;
            let rows = runs
                .iter()
                .map(|r| (row![r.spec.pred, r.spec.loss, r.seed], &r.summary))
                .collect();
            write_csv(&out_dir, "cell_runs.csv", &summary_table(&["pred", "loss", "seed"], rows), &cfg)?;
        }
        Command::ScalingSweep {
            out_dir,
            data,
            steps,
            sizes,
            common,
        } => {
            let cfg = load_config(&common, &[("train.steps", opt(&steps)), ("scaling.sizes", list(&sizes))])?;
            let ex = exec(&common);
            prepare_dir(&out_dir, &cfg)?;
            let sc = &cfg.scaling;
            let largest = sc.sizes.iter().copied().max().unwrap_or(0);
            let frames = match &data {
                Some(p) => load_scenes(p)?,
                None => scene_set(&Mix::only(sc.kind), sc.data_seed, largest, ex)?,
            };
            let held_out = scene_set(&Mix::only(sc.kind), sc.eval_seed, sc.eval_scenes, ex)?;
            let eval = trajdiff::eval::EvalConfig {
                divergence_generations: sc.divergence_generations,
                ..cfg.eval.metrics.clone()
            };
            let runs = scaling_sweep(
                &cfg.model,
                &cfg.schedule,
                &cfg.objective,
                &frames,
                &sc.sizes,
                &held_out,
                &cfg.train,
                &eval,
                ex,
            )?;
            for r in &runs {
                eprintln!(
                    "{} frames: divergence {:.3}, both modes {:.2}",
                    r.size, r.summary.divergence, r.summary.both_modes
                );
            }
            write_csv(&out_dir, "scaling.csv", &scaling_table(&runs), &cfg)?;
            write_csv(&out_dir, "scaling_curves.csv", &scaling_curve_table(&runs), &cfg)?;
        }
        Command::TrainRl {
            checkpoint,
            out_dir,
            iterations,
            steps,
            beta,
            common,
        } => {
            let cfg = load_config(
                &common,
                &[
                    ("rl.algo.iterations", opt(&iterations)),
                    ("rl.algo.steps_per_iteration", opt(&steps)),
                    ("rl.algo.beta", opt(&beta)),
                ],
            )?;
            let ex = exec(&common);
            prepare_dir(&out_dir, &cfg)?;
            let ckpt = load_checkpoint(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let net = Denoiser::new(ckpt.config.clone())?;
            let hybrid = match cfg.objective {
                Objective::Hybrid { hybrid, .. } => hybrid,
                Objective::Diffusion { .. } => HybridConfig::default(),
            };
            let objective = Objective::Hybrid {
                pred: ckpt.config.pred_space,
                hybrid,
            };
            let replay = scene_set(&cfg.rl.mix, cfg.rl.train_seed, cfg.rl.train_scenes, ex)?;
            let held_out = eval_scenes(&cfg, &cfg.rl.mix, ex)?;
            let out = rl_experiment(
                &net,
                &ckpt.params,
                &ckpt.schedule,
                &objective,
                &replay,
                &held_out,
                &cfg.rl.algo,
                &cfg.eval.metrics,
                ex,
            )?;
            eprintln!(
                "collision rate {:.3} -> {:.3}, open-loop {:.2} -> {:.2}, skipped steps {}",
                out.before.collision_rate, out.after.collision_rate, out.before.open_loop, out.after.open_loop, out.state.skipped
            );
            save_checkpoint(
                &out_dir.join("rl.ckpt"),
                &Checkpoint {
                    params: out.state.ema.clone(),
                    ..ckpt
                },
            )?;
            write_csv(&out_dir, "rl_log.csv", &trajdiff::rl::log_table(&out.log), &cfg)?;
            write_csv(&out_dir, "rl_summary.csv", &rl_summary_table(&out), &cfg)?;
        }
        Command::Evaluate {
            checkpoint,
            expert,
            out_dir,
            common,
        } => {
            let cfg = load_config(&common, &[])?;
            let ex = exec(&common);
            prepare_dir(&out_dir, &cfg)?;
            let held_out = eval_scenes(&cfg, &cfg.eval.mix, ex)?;
            let rows = if expert {
                evaluate(&ExpertPlanner, &held_out, &cfg.eval.metrics, ex)?
            } else {
                let Some(path) = checkpoint else {
                    bail!("either --checkpoint or --expert is required");
                };
                let ckpt = load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
                let m = TrainedModel {
                    net: Denoiser::new(ckpt.config)?,
                    params: ckpt.params,
                    curve: Vec::new(),
                };
                m.evaluate(&ckpt.schedule, &held_out, &cfg.eval.metrics, ex)?
            };
            let summary = summarize(&rows);
            eprintln!(
                "open-loop {:.2}, collision rate {:.3}, comfort {:.2}",
                summary.open_loop, summary.collision_rate, summary.comfort
            );
            write_csv(&out_dir, "report.csv", &report_table(&rows), &cfg)?;
            let json = serde_json::to_string_pretty(&serde_json::json!({
                "config": cfg.hash(),
                "summary": summary,
            }))?;
            let path = out_dir.join("summary.json");
            write_atomic(&path, |w| {
                use std::io::Write;
                w.write_all(json.as_bytes())
            })?;
        }
        Command::RepCompare {
            out_dir,
            data,
            steps,
            common,
        } => {
            let cfg = load_config(&common, &[("train.steps", opt(&steps))])?;
            let ex = exec(&common);
            prepare_dir(&out_dir, &cfg)?;
            let scenes = match &data {
                Some(p) => load_scenes(p)?,
                None => scene_set(&cfg.data.mix, cfg.data.seed, cfg.rep_compare.frames, ex)?,
            };
            let held_out = eval_scenes(&cfg, &cfg.eval.mix, ex)?;
            let hybrid = match cfg.objective {
                Objective::Hybrid { hybrid, .. } => hybrid,
                Objective::Diffusion { .. } => HybridConfig::default(),
            };
            let runs = rep_compare(
                &cfg.model,
                &cfg.schedule,
                &scenes,
                &held_out,
                &cfg.train,
                &cfg.eval.metrics,
                hybrid,
                cfg.rep_compare.profile_scenes,
                ex,
            )?;
            for r in &runs {
                eprintln!(
                    "{}: ADE score {:.2}, comfort {:.2}, open-loop {:.2}",
                    r.variant.tag(),
                    r.summary.s_ade,
                    r.summary.comfort,
                    r.summary.open_loop
                );
            }
            write_csv(&out_dir, "rep_compare.csv", &rep_table(&runs), &cfg)?;
            write_csv(&out_dir, "speed_profiles.csv", &speed_profile_table(&runs), &cfg)?;
            let mut t = CsvTable::new(&["representation", "step", "loss_value", "lr"]);
            for r in &runs {
                for p in &r.curve {
                    t.push(row![r.variant.tag(), p.step, p.loss, p.lr]);
                }
            }
            write_csv(&out_dir, "rep_curves.csv", &t, &cfg)?;
        }
    }
    Ok(())
}
