use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dualtrack::controller::{AgentVariant, Controller, ControllerConfig};
use dualtrack::experiments::{
    points_from_csv, records_jsonl, replay, run_batch, scatter_svg, to_csv, ExperimentConfig,
};
use dualtrack::kb::{builtin_by_size, builtin_profile, KnowledgeBase};
use dualtrack::model::build_dialog_pomdp;
use dualtrack::parser::StopWords;
use dualtrack::solver::PolicyCache;

/// Dual-track dialog agent: simulation batches, transcripts and live chat.
#[derive(Debug, Parser)]
#[command(name = "dualtrack", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run simulated batches and print a CSV table.
    Run(RunArgs),
    /// Render a JSON-lines event or trial log as a transcript.
    Replay {
        file: PathBuf,
    },
    /// Talk to the agent on stdin.
    Chat(ChatArgs),
    /// Draw a scatter plot (SVG) from a results CSV.
    Plot {
        csv: PathBuf,
        #[arg(long, default_value = "mean_turns_to_augment")]
        x: String,
        #[arg(long, default_value = "augment_accuracy")]
        y: String,
        #[arg(short, long, default_value = "plot.svg")]
        output: PathBuf,
    },
}

#[derive(Debug, Args)]
struct CacheArgs {
    /// Directory for solved policies.
    #[arg(long, env = "DUALTRACK_POLICY_CACHE", default_value = ".dualtrack-cache")]
    policy_cache: PathBuf,
    /// Solve every model from scratch.
    #[arg(long)]
    no_policy_cache: bool,
    /// Print the dialog model and exit.
    #[arg(long)]
    dump_model: bool,
}

impl CacheArgs {
    fn cache(&self) -> Arc<PolicyCache> {
        Arc::new(if self.no_policy_cache {
            PolicyCache::disabled()
        } else {
            PolicyCache::with_dir(self.policy_cache.clone())
        })
    }
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Config file (`key = value` lines); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Agents, comma separated: dual, baseline1, baseline2, baseline3.
    #[arg(long, value_delimiter = ',')]
    agent: Vec<String>,
    /// Bundled KB sizes, comma separated (17, 26, 37).
    #[arg(long, value_delimiter = ',')]
    kb_size: Vec<usize>,
    /// KB file instead of a bundled one.
    #[arg(long)]
    kb: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write results.csv and per-trial JSON lines here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    cache: CacheArgs,
}

#[derive(Debug, Args)]
struct ChatArgs {
    /// Bundled profile (kb17, kb26, kb37) or a KB file.
    #[arg(long, default_value = "kb17")]
    kb: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pass parsed answers through the model's observation noise.
    #[arg(long)]
    simulate_noise: bool,
    /// Print H(b), delta and the top states after every turn.
    #[arg(long)]
    verbose: bool,
    #[command(flatten)]
    cache: CacheArgs,
}

fn read_kb(path: &Path) -> Result<KnowledgeBase> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    KnowledgeBase::deserialize(&text).with_context(|| format!("parsing {}", path.display()))
}

fn run(args: RunArgs) -> Result<()> {
    let base = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let agents = if args.agent.is_empty() {
        vec![base.agent]
    } else {
        args.agent
            .iter()
            .map(|a| AgentVariant::parse(a).with_context(|| format!("unknown agent `{a}`")))
            .collect::<Result<_>>()?
    };
    let sizes = if args.kb_size.is_empty() { vec![base.kb_size] } else { args.kb_size.clone() };
    let cache = args.cache.cache();
    let mut results = Vec::new();
    for &size in &sizes {
        for &agent in &agents {
            let mut config = base.clone();
            config.agent = agent;
            config.kb_size = size;
            if let Some(kb) = &args.kb {
                config.kb_path = Some(kb.clone());
            }
            if let Some(t) = args.trials {
                config.trials = t;
            }
            if let Some(s) = args.seed {
                config.seed = s;
            }
            config.validate()?;
            let kb = config.knowledge_base()?;
            if args.cache.dump_model {
                print!("{}", build_dialog_pomdp(&kb, &config.params)?.dump(&kb));
                return Ok(());
            }
            let started = std::time::Instant::now();
            let result = run_batch(&config, &kb, cache.clone())?;
            eprintln!(
                "{} |KB|={} trials={} f1={:.3} success={:.3} ({:.1}s)",
                agent.name(),
                result.kb_size,
                config.trials,
                result.metrics.f1,
                result.metrics.success_rate,
                started.elapsed().as_secs_f64()
            );
            results.push(result);
        }
    }
    let csv = to_csv(&results);
    match &args.out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("results.csv"), &csv)?;
            for r in &results {
                let name = format!("trials_{}_{}.jsonl", r.agent.name(), r.kb_size);
                std::fs::write(dir.join(name), records_jsonl(&r.records))?;
            }
            eprintln!("wrote {}", dir.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn chat(args: ChatArgs) -> Result<()> {
    let kb = match builtin_profile(&args.kb) {
        Some(kb) => kb,
        None => match args.kb.parse::<usize>().ok().and_then(builtin_by_size) {
            Some(kb) => kb,
            None => read_kb(Path::new(&args.kb))?,
        },
    };
    let mut config = ControllerConfig::default();
    if args.simulate_noise {
        config.channel_noise = Some(config.params.noise);
    }
    if args.cache.dump_model {
        print!("{}", build_dialog_pomdp(&kb, &config.params)?.dump(&kb));
        return Ok(());
    }
    let mut ctl = Controller::new(kb, config, args.cache.cache(), Arc::new(StopWords::default()), args.seed)?;
    let show = |ctl: &Controller, verbose: bool| {
        let event = ctl.events().last().expect("at least one event");
        println!("robot> {}", event.action.text);
        if verbose {
            let top: Vec<String> = event.top_states.iter().map(|s| format!("{} {:.2}", s.state, s.p)).collect();
            println!("       H(b)={:.3} δ={} top: {}", event.entropy, event.delta, top.join(", "));
        }
    };
    ctl.start()?;
    show(&ctl, args.verbose);
    let stdin = std::io::stdin();
    let mut line = String::new();
    while !ctl.is_terminated() {
        print!("you> ");
        std::io::stdout().flush()?;
        line.clear();
        if stdin.lock().read_line(&mut line)? == 0 {
            break;
        }
        if line.trim().is_empty() {
            continue;
        }
        ctl.step(line.trim())?;
        show(&ctl, args.verbose);
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(args) => run(args),
        Command::Replay { file } => {
            let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
            print!("{}", replay(&text)?);
            Ok(())
        }
        Command::Chat(args) => chat(args),
        Command::Plot { csv, x, y, output } => {
            let text = std::fs::read_to_string(&csv).with_context(|| format!("reading {}", csv.display()))?;
            let points = points_from_csv(&text, &x, &y)?;
            if points.is_empty() {
                bail!("{} has no data rows", csv.display());
            }
            std::fs::write(&output, scatter_svg(&points, &x, &y))?;
            eprintln!("wrote {}", output.display());
            Ok(())
        }
    }
}
