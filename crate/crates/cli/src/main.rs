use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use dishforge::captioning::{enhance_prompt, retrieve_caption, CaptionLibrary};
use dishforge::config::PipelineConfig;
use dishforge::data::{read_manifest, write_manifest, DishRecord};
use dishforge::editset::{ReviewQueue, SystemClock};
use dishforge::eval::{
    aggregate_scores, dish_similarity_batch, fid, mean, EmbeddingRow, HumanScoreSheet, ScoredPair,
};
use dishforge::pipeline::{
    concept_candidates, files, inpaint_candidates, merge_review_queue, run_pipeline, RunReport,
    Stage, Workspace,
};
use dishforge::schedule::{mixture_rows, sample_mixture, MixtureSpec, TrainSample};
use dishforge::server::{serve_review, system_clock, ReviewServerConfig};
use dishforge::synth::SynthOptions;
use dishforge::EmbeddingVector;

#[derive(Parser)]
#[command(name = "dishforge", version, about = "Dish image data pipeline")]
struct Cli {
    /// Configuration file (overrides $DISHFORGE_CONFIG and ./dishforge.toml).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Workspace directory holding blobs, manifests and markers.
    #[arg(long, global = true, default_value = ".")]
    workspace: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Serves every provider role from the deterministic mock.
    #[arg(long, global = true)]
    mock: bool,
    /// Processes items one at a time instead of on the thread pool.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a seeded synthetic corpus into the workspace.
    Synth(SynthArgs),
    /// Runs several stages in order, skipping unchanged ones.
    Run {
        /// Comma-separated stages; all when omitted.
        #[arg(long, value_delimiter = ',')]
        stages: Vec<Stage>,
    },
    /// Filters images, corrects names and extracts tags.
    Curate,
    /// Writes two-stage recaptions for curated records.
    Recaption,
    #[command(subcommand)]
    Library(LibraryCmd),
    #[command(subcommand)]
    Prompt(PromptCmd),
    /// Builds the per-stage training manifests.
    Schedule,
    /// Draws one mixed batch from a dish pool and a general pool.
    Mixture(MixtureArgs),
    #[command(subcommand)]
    Editset(EditsetCmd),
    #[command(subcommand)]
    Review(ReviewCmd),
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Prints the resolved configuration as TOML.
    Config,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 50)]
    records: usize,
}

#[derive(Subcommand)]
enum LibraryCmd {
    /// Builds the caption library from recaptioned records.
    Build,
    /// Prints the best library entry for a dish and request.
    Query {
        #[arg(long)]
        dish: String,
        #[arg(long)]
        text: String,
    },
}

#[derive(Subcommand)]
enum PromptCmd {
    /// Rewrites a user request around the closest library caption.
    Enhance {
        #[arg(long)]
        dish: String,
        #[arg(long)]
        text: String,
    },
}

#[derive(Args)]
struct MixtureArgs {
    /// Manifest of dish samples.
    #[arg(long)]
    dish: PathBuf,
    /// Manifest of general-domain samples.
    #[arg(long)]
    general: PathBuf,
    #[arg(long)]
    k: usize,
    /// Dish share; the configured ratio when omitted.
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum EditsetCmd {
    /// Concept enhancement plus the rho sweep for configured concepts.
    Cep2p {
        /// Only this concept; every configured one when omitted.
        #[arg(long)]
        concept: Option<String>,
    },
    /// Bidirectional inpainting pairs from curated records.
    Inpaint {
        /// Record manifest; the workspace's recaptioned records by default.
        #[arg(long = "in")]
        input: Option<PathBuf>,
    },
    /// Writes approved pairs.
    Export {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ReviewCmd {
    /// Serves the review API until interrupted.
    Serve {
        #[arg(long)]
        bind: Option<String>,
    },
    /// Prints queue counts by status.
    Stats,
    /// Writes decided preference candidates as preference pairs.
    ExportPreferences {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Runs the evaluation stage over the workspace.
    Run,
    /// Fréchet distance between two embedding files.
    Fid {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        generated: PathBuf,
    },
    /// Mean dish text-to-image similarity over (dish, image) rows.
    Dishsim {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Per-dimension means of human score sheets.
    Human {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::resolve(cli.config.as_deref(), &cli.workspace)
        .context("loading configuration")?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.mock {
        cfg.mock = true;
    }
    if cli.sequential {
        cfg.parallel = false;
    }
    Ok(cfg)
}

fn open(cli: &Cli) -> Result<Workspace> {
    let cfg = load_config(cli)?;
    Workspace::open(&cli.workspace, cfg).context("opening workspace")
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn stages(ws: &Workspace, list: &[Stage]) -> Result<()> {
    let report: RunReport = run_pipeline(ws, list)?;
    print_json(&report)
}

fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingVector>> {
    let rows: Vec<EmbeddingRow> =
        read_manifest(path).with_context(|| format!("reading {}", path.display()))?;
    rows.iter()
        .map(|r| r.embedding().map_err(anyhow::Error::msg))
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Config => {
            print!("{}", load_config(&cli)?.to_toml());
            Ok(())
        }
        Command::Synth(args) => {
            let ws = open(&cli)?;
            let opts = SynthOptions {
                records: args.records,
                seed: ws.config().seed,
                ..SynthOptions::default()
            };
            let n = ws.write_synthetic_inputs(&opts)?;
            println!("wrote {n} records to {}", ws.manifest(files::RAW).display());
            Ok(())
        }
        Command::Run { stages: list } => {
            let ws = open(&cli)?;
            let list = if list.is_empty() { Stage::ALL.to_vec() } else { list.clone() };
            stages(&ws, &list)
        }
        Command::Curate => stages(&open(&cli)?, &[Stage::Curate]),
        Command::Recaption => stages(&open(&cli)?, &[Stage::Recaption]),
        Command::Schedule => stages(&open(&cli)?, &[Stage::Schedule]),
        Command::Library(LibraryCmd::Build) => stages(&open(&cli)?, &[Stage::Library]),
        Command::Library(LibraryCmd::Query { dish, text }) => {
            let ws = open(&cli)?;
            let lib = CaptionLibrary::load(&ws.manifest(files::LIBRARY))?;
            let entry = retrieve_caption(&lib, dish, text, ws.providers().embed.as_ref())?;
            print_json(&serde_json::json!({
                "entry_id": entry.entry_id,
                "dish_name": entry.dish_name,
                "caption": entry.caption,
            }))
        }
        Command::Prompt(PromptCmd::Enhance { dish, text }) => {
            let ws = open(&cli)?;
            let lib = CaptionLibrary::load(&ws.manifest(files::LIBRARY))?;
            let p = ws.providers();
            let prompt = enhance_prompt(
                &lib,
                text,
                dish,
                p.chat.as_ref(),
                p.embed.as_ref(),
                &ws.config().captioning,
            )?;
            println!("{prompt}");
            Ok(())
        }
        Command::Mixture(args) => {
            let cfg = load_config(&cli)?;
            let dish: Vec<TrainSample> = read_manifest(&args.dish)
                .with_context(|| format!("reading {}", args.dish.display()))?;
            let general: Vec<TrainSample> = read_manifest(&args.general)
                .with_context(|| format!("reading {}", args.general.display()))?;
            let spec = MixtureSpec::new(args.ratio.unwrap_or(cfg.schedule.dish_ratio), cfg.seed)?;
            let batch = sample_mixture(&dish, &general, &spec, args.k)?;
            let n = write_manifest(&args.out, &mixture_rows(batch))?;
            println!("wrote {n} rows to {}", args.out.display());
            Ok(())
        }
        Command::Editset(EditsetCmd::Cep2p { concept }) => {
            let ws = open(&cli)?;
            let out = concept_candidates(&ws, concept.as_deref())?;
            if out.pairs.is_empty() && concept.is_some() {
                bail!("no configured concept named {:?}", concept.as_deref().unwrap_or(""));
            }
            write_manifest(&ws.manifest(files::PROVENANCE), &out.provenance)?;
            for note in &out.notes {
                println!("{note}");
            }
            let added = merge_review_queue(&ws, out.pairs)?;
            println!("{added} pairs added to the review queue");
            Ok(())
        }
        Command::Editset(EditsetCmd::Inpaint { input }) => {
            let ws = open(&cli)?;
            let path = input
                .clone()
                .unwrap_or_else(|| ws.manifest(files::RECAPTIONED));
            let records: Vec<DishRecord> =
                read_manifest(&path).with_context(|| format!("reading {}", path.display()))?;
            let pairs = inpaint_candidates(&ws, &records)?;
            let n = pairs.len();
            let added = merge_review_queue(&ws, pairs)?;
            println!("{n} inpainting pairs, {added} new in the review queue");
            Ok(())
        }
        Command::Editset(EditsetCmd::Export { out }) => {
            let ws = open(&cli)?;
            let queue = load_review_queue(&ws)?;
            let n = write_manifest(out, &queue.export_approved())?;
            println!("wrote {n} approved pairs to {}", out.display());
            Ok(())
        }
        Command::Review(ReviewCmd::Stats) => {
            let ws = open(&cli)?;
            print_json(&load_review_queue(&ws)?.stats())
        }
        Command::Review(ReviewCmd::ExportPreferences { out }) => {
            let ws = open(&cli)?;
            let path = ws.manifest(files::PREFERENCE_QUEUE);
            let queue = dishforge::editset::PreferenceQueue::load(
                &path,
                ws.config().editset.settings.lease_secs,
                Arc::new(SystemClock),
            )
            .with_context(|| format!("reading {}", path.display()))?;
            let n = write_manifest(out, &queue.export_preferences())?;
            println!("wrote {n} preference pairs to {}", out.display());
            Ok(())
        }
        Command::Review(ReviewCmd::Serve { bind }) => {
            let ws = open(&cli)?;
            let server_cfg = &ws.config().server;
            let cfg = ReviewServerConfig {
                bind: bind.clone().unwrap_or_else(|| server_cfg.bind.clone()),
                workers: server_cfg.workers,
                lease_secs: ws.config().editset.settings.lease_secs,
                pair_queue: ws.manifest(files::REVIEW_QUEUE),
                preference_queue: ws.manifest(files::PREFERENCE_QUEUE),
                preference_seed: Some(ws.manifest(files::PREFERENCE_CANDIDATES)),
                static_dir: server_cfg.static_dir.as_ref().map(|d| ws.root().join(d)),
            };
            let server = serve_review(&cfg, ws.store().clone(), system_clock())?;
            println!("review server at {}", server.base_url());
            server.join();
            Ok(())
        }
        Command::Eval(EvalCmd::Run) => stages(&open(&cli)?, &[Stage::Eval]),
        Command::Eval(EvalCmd::Fid {
            reference,
            generated,
        }) => {
            let value = fid(&read_embeddings(reference)?, &read_embeddings(generated)?)?;
            print_json(&serde_json::json!({ "fid": value }))
        }
        Command::Eval(EvalCmd::Dishsim { input }) => {
            let ws = open(&cli)?;
            let pairs: Vec<ScoredPair> = read_manifest(input)
                .with_context(|| format!("reading {}", input.display()))?;
            let cfg = ws.config();
            let scores =
                dish_similarity_batch(&pairs, ws.providers().embed.as_ref(), cfg.execution())?;
            print_json(&serde_json::json!({
                "dish_similarity": mean(&scores),
                "count": scores.len(),
            }))
        }
        Command::Eval(EvalCmd::Human { input }) => {
            let sheets: Vec<HumanScoreSheet> = read_manifest(input)
                .with_context(|| format!("reading {}", input.display()))?;
            print_json(&aggregate_scores(&sheets))
        }
    }
}

fn load_review_queue(ws: &Workspace) -> Result<ReviewQueue> {
    let path = ws.manifest(files::REVIEW_QUEUE);
    ReviewQueue::load(
        &path,
        ws.config().editset.settings.lease_secs,
        Arc::new(SystemClock),
    )
    .with_context(|| format!("reading {}", path.display()))
}
