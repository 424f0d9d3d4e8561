use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use strmac_core::dataset::{
    load_dataset, read_json, read_jsonl, resolve_examples, write_json, write_jsonl, write_loss_csv,
};
use strmac_core::eval::{evaluate, render_path_svg, render_table, render_top_paths, top_paths, Method, MethodKind};
use strmac_core::evolve::{evolve_pipeline, examples_from_harvests, harvest_all, PipelineConfig, SearchMode};
use strmac_core::simenv::{generate_tasks, EnvConfig};
use strmac_core::train::{gradient_check, random_check_pair, routing_accuracy, train, ExampleRecord, GradCheckReport};
use strmac_core::{count_paths, run_inference, AgentId, Error, RouterModel, Scenario};

#[derive(Parser)]
#[command(name = "strmac", version, about = "State-aware routing over simulated expert agents")]
struct Cli {
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON file with optional `env` and `pipeline` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long, default_value_t = 300)]
        tasks: usize,
        #[arg(long)]
        agents: Option<usize>,
    },
    /// Print the number of repetition-free paths over N agents.
    Enumerate { n: usize },
    /// Harvest valid paths by tree search.
    Search {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Pruned)]
        mode: Mode,
        /// Router for guided search.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train a router on harvested examples.
    Train {
        #[arg(long)]
        examples: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Run the bootstrap-then-guided training pipeline.
    Evolve {
        #[arg(long)]
        dataset: PathBuf,
        /// Held-out tasks; defaults to the tail of the dataset.
        #[arg(long)]
        holdout: Option<PathBuf>,
    },
    /// Route every task with a trained model.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Evaluate one or more methods.
    Eval {
        /// strmac, random_chain, fixed_chain, single_agent or exhaustive_oracle. Repeatable.
        #[arg(long, required = true)]
        method: Vec<String>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Agent order for fixed_chain, e.g. `2,0,1`.
        #[arg(long, value_delimiter = ',')]
        order: Vec<u32>,
        /// Agent for single_agent.
        #[arg(long)]
        agent: Option<u32>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long, default_value_t = 3)]
        top_n: usize,
        #[arg(long)]
        mu: Option<f64>,
        #[arg(long)]
        c: Option<f64>,
    },
    /// Compare analytic and finite-difference gradients on random models.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        pairs: u64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Exhaustive,
    Pruned,
    Guided,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Config {
    env: EnvConfig,
    pipeline: PipelineConfig,
}

impl Config {
    fn load(path: Option<&Path>, seed: Option<u64>) -> strmac_core::Result<Self> {
        let mut cfg: Config = match path {
            Some(p) => read_json(p)?,
            None => Config::default(),
        };
        if let Some(s) = seed {
            cfg.env.seed = s;
            cfg.pipeline.model.seed = s;
            cfg.pipeline.train.seed = s;
        }
        cfg.env.validate()?;
        cfg.pipeline.validate()?;
        Ok(cfg)
    }
}

#[derive(Serialize)]
struct SearchStats {
    mode: String,
    tasks: usize,
    solvable_tasks: usize,
    examples: usize,
    full_space: u64,
    mean_paths_evaluated: f64,
    sampled_fraction: f64,
}

#[derive(Serialize)]
struct GradCheckSummary {
    pairs: Vec<GradCheckReport>,
    max_relative_error: Vec<(String, f64)>,
    passed: bool,
}

fn load_model(path: &Path) -> strmac_core::Result<RouterModel> {
    let model: RouterModel = read_json(path)?;
    model.validate()?;
    Ok(model)
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = Config::load(cli.config.as_deref(), cli.seed)?;
    let env_seed = cfg.env.seed;
    let out = cli.out.as_path();
    if !matches!(cli.command, Command::Enumerate { .. }) {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    }

    match cli.command {
        Command::Gen { tasks, agents } => {
            let mut env = cfg.env;
            if let Some(n) = agents {
                env.n_agents = n;
            }
            let scenarios = generate_tasks(&env, tasks)?;
            write_jsonl(&out.join("dataset.jsonl"), &scenarios)?;
            println!("wrote {} tasks over {} agents", scenarios.len(), env.n_agents);
        }
        Command::Enumerate { n } => {
            if n == 0 {
                return Err(Error::InvalidInput("N must be >= 1".into()).into());
            }
            println!("{}", count_paths(n));
        }
        Command::Search { dataset, mode, model, k } => {
            let scenarios = load_dataset(&dataset)?;
            let router = model.as_deref().map(load_model).transpose()?;
            let search_mode = match (mode, &router) {
                (Mode::Exhaustive, _) => SearchMode::Exhaustive,
                (Mode::Pruned, _) => SearchMode::Pruned,
                (Mode::Guided, Some(m)) => {
                    m.check_task(&scenarios[0])?;
                    SearchMode::Guided { model: m, k: k.unwrap_or(cfg.pipeline.k) }
                }
                (Mode::Guided, None) => return Err(Error::InvalidInput("guided search needs --model".into()).into()),
            };
            let harvests = harvest_all(&scenarios, &search_mode, env_seed, cfg.pipeline.search_cap)?;
            let examples = examples_from_harvests(&scenarios, &harvests, cfg.pipeline.train.w_alt);
            let records: Vec<ExampleRecord> = examples.iter().map(|e| e.to_record()).collect();
            let total: usize = harvests.iter().map(|h| h.paths_evaluated).sum();
            let mean = total as f64 / harvests.len() as f64;
            let full_space = harvests[0].full_space;
            let stats = SearchStats {
                mode: search_mode.name().to_string(),
                tasks: harvests.len(),
                solvable_tasks: harvests.iter().filter(|h| h.best_path.is_some()).count(),
                examples: records.len(),
                full_space,
                mean_paths_evaluated: mean,
                sampled_fraction: mean / full_space as f64,
            };
            write_jsonl(&out.join("harvest.jsonl"), &harvests)?;
            write_jsonl(&out.join("examples.jsonl"), &records)?;
            write_json(&out.join("harvest_stats.json"), &stats)?;
            println!(
                "{}: {} tasks, {} solvable, {} examples, {:.1} of {} paths evaluated per task ({:.1}%)",
                stats.mode,
                stats.tasks,
                stats.solvable_tasks,
                stats.examples,
                mean,
                full_space,
                100.0 * stats.sampled_fraction
            );
        }
        Command::Train { examples, dataset } => {
            let scenarios = load_dataset(&dataset)?;
            let records: Vec<ExampleRecord> = read_jsonl(&examples)?;
            let examples = resolve_examples(&records, &scenarios)?;
            let init = RouterModel::for_scenario(&scenarios[0], &cfg.pipeline.model)?;
            let outcome = train(&init, &examples, &cfg.pipeline.train)?;
            write_json(&out.join("model.json"), &outcome.model)?;
            write_loss_csv(&out.join("loss.csv"), &outcome.loss_history)?;
            println!(
                "trained on {} examples: final loss {:.4}, routing accuracy {:.3}",
                examples.len(),
                outcome.loss_history.last().copied().unwrap_or(f64::NAN),
                routing_accuracy(&outcome.model, &examples)?
            );
        }
        Command::Evolve { dataset, holdout } => {
            let mut tasks = load_dataset(&dataset)?;
            let held: Vec<Scenario> = match holdout {
                Some(p) => load_dataset(&p)?,
                None => {
                    let n_hold = (cfg.pipeline.holdout_fraction * tasks.len() as f64).floor() as usize;
                    tasks.split_off(tasks.len() - n_hold)
                }
            };
            let outcome = evolve_pipeline(&tasks, &held, env_seed, &cfg.pipeline)?;
            let records: Vec<ExampleRecord> = outcome.examples.iter().map(|e| e.to_record()).collect();
            write_json(&out.join("model.json"), &outcome.model)?;
            write_json(&out.join("evolve_report.json"), &outcome.report)?;
            write_jsonl(&out.join("harvest.jsonl"), &outcome.harvests)?;
            write_jsonl(&out.join("examples.jsonl"), &records)?;
            for r in &outcome.report.rounds {
                let acc = r.holdout_accuracy.map_or("-".to_string(), |a| format!("{a:.1}"));
                let tok = r.holdout_mean_tokens.map_or("-".to_string(), |t| format!("{t:.1}"));
                println!(
                    "round {} ({}): {} tasks, {} examples total, {:.1} paths/task, held-out acc {acc} tokens {tok}",
                    r.round, r.search_mode, r.tasks_searched, r.cumulative_examples, r.mean_paths_evaluated
                );
            }
            println!(
                "sampled {:.1}% of the {}-path space",
                100.0 * outcome.report.sampled_fraction,
                outcome.report.full_space
            );
        }
        Command::Infer { model, dataset, max_steps } => {
            let model = load_model(&model)?;
            let scenarios = load_dataset(&dataset)?;
            let max_steps = max_steps.unwrap_or(model.n_agents());
            let mut paths = Vec::with_capacity(scenarios.len());
            let mut trace = Vec::new();
            for s in &scenarios {
                let inf = run_inference(&model, s, max_steps, env_seed)?;
                paths.push(inf.path);
                trace.extend(inf.trace);
            }
            write_jsonl(&out.join("paths.jsonl"), &paths)?;
            write_jsonl(&out.join("trace.jsonl"), &trace)?;
            let correct = paths.iter().filter(|p| p.is_correct()).count();
            println!("routed {} tasks, {} correct", paths.len(), correct);
        }
        Command::Eval { method, dataset, model, order, agent, max_steps, top_n, mu, c } => {
            if top_n == 0 {
                return Err(Error::InvalidInput("--top-n must be >= 1".into()).into());
            }
            let scenarios = load_dataset(&dataset)?;
            let mut params = cfg.pipeline.cas;
            params.mu = mu.unwrap_or(params.mu);
            params.c = c.unwrap_or(params.c);
            let mut methods = Vec::new();
            for name in &method {
                methods.push(match name.parse::<MethodKind>()? {
                    MethodKind::Strmac => {
                        let path =
                            model.as_deref().ok_or_else(|| Error::InvalidInput("strmac needs --model".into()))?;
                        let m = load_model(path)?;
                        m.check_task(&scenarios[0])?;
                        let steps = max_steps.or(cfg.pipeline.max_steps).unwrap_or(m.n_agents());
                        Method::Strmac { model: m, max_steps: steps }
                    }
                    MethodKind::RandomChain => Method::RandomChain { seed: env_seed },
                    MethodKind::FixedChain => {
                        if order.is_empty() {
                            return Err(Error::InvalidInput("fixed_chain needs --order".into()).into());
                        }
                        Method::FixedChain { order: order.iter().map(|&a| AgentId(a)).collect() }
                    }
                    MethodKind::SingleAgent => {
                        let a = agent.ok_or_else(|| Error::InvalidInput("single_agent needs --agent".into()))?;
                        Method::SingleAgent { agent: AgentId(a) }
                    }
                    MethodKind::ExhaustiveOracle => Method::ExhaustiveOracle,
                });
            }
            let reports = methods
                .iter()
                .map(|m| evaluate(m, &scenarios, env_seed, params))
                .collect::<strmac_core::Result<Vec<_>>>()?;
            let mut text = render_table(&reports);
            for r in &reports {
                text.push_str(&format!("\n{} top-{top_n} paths\n", r.method));
                text.push_str(&render_top_paths(&top_paths(r, top_n)));
            }
            write_json(&out.join("report.json"), &reports)?;
            write_text(&out.join("report.txt"), &text)?;
            write_text(&out.join("paths.svg"), &render_path_svg(&reports[0], top_n))?;
            print!("{text}");
        }
        Command::Gradcheck { pairs, step, tolerance } => {
            if pairs == 0 {
                return Err(Error::InvalidInput("--pairs must be >= 1".into()).into());
            }
            let base = cli.seed.unwrap_or(0);
            let mut reports = Vec::new();
            for i in 0..pairs {
                let (model, ex) = random_check_pair(base.wrapping_add(i))?;
                reports.push(gradient_check(&model, std::slice::from_ref(&ex), step, tolerance)?);
            }
            let max_relative_error: Vec<(String, f64)> = reports[0]
                .blocks
                .iter()
                .enumerate()
                .map(|(b, blk)| {
                    let worst = reports.iter().map(|r| r.blocks[b].relative_error).fold(0.0, f64::max);
                    (blk.block.clone(), worst)
                })
                .collect();
            let summary =
                GradCheckSummary { passed: reports.iter().all(|r| r.passed), pairs: reports, max_relative_error };
            write_json(&out.join("gradcheck.json"), &summary)?;
            for (block, err) in &summary.max_relative_error {
                println!("{block:>4}  max relative error {err:.3e}");
            }
            if !summary.pairs[0].reliable_step {
                println!("warning: step {step} is too coarse for a reliable central difference");
            }
            if !summary.passed {
                anyhow::bail!("gradient check failed at tolerance {tolerance}");
            }
            println!("gradient check passed on {pairs} pairs");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(err) if err.is_validation() => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
