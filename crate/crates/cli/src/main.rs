use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tagfed::federation::{write_round_log, NodeTask};
use tagfed::graph::{load_graph, save_graph, TextAttributedGraph};
use tagfed::llm::{append_records, read_records};
use tagfed::nn::{load_checkpoint, save_checkpoint};
use tagfed::partition::client_tv_distances;
use tagfed::pipeline::{
    build_transport, derive_seed, evaluate, initial_generation, prepare_clients, pretrain_edges, replay_seed,
    run_pipeline, train_gcn, Ablation, AugmentContext, GenerationSettings, LlmBackend, RunConfig, SeedPaths,
    Summary,
};
use tagfed::synthetic::{write_class_text_dataset, SyntheticSpec};

#[derive(Parser)]
#[command(name = "tagfed", version, about = "Federated node classification with LLM-generated neighbors")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    ablate: Option<AblateArg>,
    /// Use the deterministic offline LLM stand-in.
    #[arg(long, global = true)]
    mock_llm: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblateArg {
    NoReflection,
    NoEdges,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic class-text dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        nodes: usize,
        #[arg(long, default_value_t = 5)]
        classes: usize,
    },
    /// Partition the dataset and save the client graphs.
    Partition,
    /// Train the federated edge predictor.
    PretrainEdges,
    /// Initial neighbor generation, or rebuild from a record log.
    Augment {
        #[arg(long)]
        replay: bool,
    },
    /// FedAvg on the saved client graphs.
    Train,
    /// Test accuracy of the saved model on the saved client graphs.
    Evaluate,
    /// The whole pipeline, every seed.
    Run,
    /// Print a summary table for one or more output directories.
    Report {
        dirs: Vec<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    if let Some(a) = cli.ablate {
        cfg.apply_ablation(match a {
            AblateArg::NoReflection => Ablation::NoReflection,
            AblateArg::NoEdges => Ablation::NoEdges,
            AblateArg::Both => Ablation::Both,
        });
    }
    if cli.mock_llm {
        cfg.llm.backend = LlmBackend::Mock;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_clients(paths: &SeedPaths, n: usize) -> Result<Vec<TextAttributedGraph>> {
    (0..n)
        .map(|i| load_graph(&paths.client(i)).with_context(|| format!("loading client {i}; run `partition` or `augment` first")))
        .collect()
}

fn partition(cfg: &RunConfig, seed: u64) -> Result<()> {
    let prep = prepare_clients(cfg, seed)?;
    let paths = SeedPaths::new(&cfg.out_dir, seed);
    fs::create_dir_all(&paths.root)?;
    prep.plan.save(&paths.partition())?;
    for (i, g) in prep.clients.iter().enumerate() {
        save_graph(g, &paths.client(i))?;
    }
    let tv = client_tv_distances(&prep.global, &prep.plan);
    for (i, (g, d)) in prep.clients.iter().zip(&tv).enumerate() {
        println!("seed {seed} client {i}: {} nodes, {} edges, TV {d:.4}", g.num_nodes(), g.num_edges());
    }
    Ok(())
}

fn pretrain(cfg: &RunConfig, seed: u64) -> Result<()> {
    let prep = prepare_clients(cfg, seed)?;
    let paths = SeedPaths::new(&cfg.out_dir, seed);
    fs::create_dir_all(&paths.root)?;
    match pretrain_edges(cfg, &prep.clients, seed)? {
        Some(phi) => {
            save_checkpoint(&phi, &paths.edge_predictor())?;
            println!("seed {seed}: edge predictor saved to {}", paths.edge_predictor().display());
        }
        None => println!("seed {seed}: inferred edges disabled, nothing to train"),
    }
    Ok(())
}

fn augment(cfg: &RunConfig, seed: u64, replay: bool) -> Result<()> {
    let paths = SeedPaths::new(&cfg.out_dir, seed);
    let ckpt = paths.edge_predictor();
    let have_ckpt = ckpt.with_extension("json").exists();
    if replay {
        let records = read_records(&paths.records())?;
        let phi = if cfg.uses_edges() {
            if !have_ckpt {
                bail!("replay needs the edge predictor checkpoint at {}", ckpt.display());
            }
            Some(load_checkpoint(&ckpt)?)
        } else {
            None
        };
        let clients = replay_seed(cfg, seed, &records, phi.as_ref())?;
        for (i, g) in clients.iter().enumerate() {
            save_graph(g, &paths.client(i))?;
        }
        println!("seed {seed}: replayed {} records", records.len());
        return Ok(());
    }
    let prep = prepare_clients(cfg, seed)?;
    fs::create_dir_all(&paths.root)?;
    let phi = if !cfg.uses_edges() {
        None
    } else if have_ckpt {
        Some(load_checkpoint(&ckpt)?)
    } else {
        let phi = pretrain_edges(cfg, &prep.clients, seed)?;
        if let Some(p) = &phi {
            save_checkpoint(p, &ckpt)?;
        }
        phi
    };
    let llm = build_transport(cfg, &prep.global, seed)?;
    let ctx = AugmentContext {
        features: &cfg.features,
        aux: None,
        phi: phi.as_ref(),
        edge_k: cfg.edge_k,
    };
    let settings = GenerationSettings {
        n_gen: cfg.n_gen,
        reflection_k: cfg.reflection_k,
        categories: prep.categories.clone(),
        query: cfg.llm.query,
    };
    if paths.records().exists() {
        fs::remove_file(paths.records())?;
    }
    for (i, mut g) in prep.clients.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "prompts", i as u64));
        let (recs, batch, failed) = initial_generation(&mut g, i, llm.as_ref(), &settings, &ctx, &mut rng)?;
        append_records(&paths.records(), &recs)?;
        save_graph(&g, &paths.client(i))?;
        println!(
            "seed {seed} client {i}: {} generated, {} inferred edges, {failed} failed",
            batch.new_nodes.len(),
            batch.edges.len()
        );
    }
    Ok(())
}

fn train(cfg: &RunConfig, seed: u64) -> Result<()> {
    let prep = prepare_clients(cfg, seed)?;
    let paths = SeedPaths::new(&cfg.out_dir, seed);
    let clients = load_clients(&paths, cfg.n_clients)?;
    let (params, reports, tasks) = train_gcn(cfg, &clients, prep.global.num_classes(), seed)?;
    save_checkpoint(&params, &paths.gcn())?;
    write_round_log(&paths.rounds(), &reports)?;
    let eval = evaluate(&params, &tasks)?;
    println!("seed {seed}: {} rounds, test accuracy {:.4}", reports.len(), eval.accuracy);
    Ok(())
}

fn eval(cfg: &RunConfig, seed: u64) -> Result<()> {
    let paths = SeedPaths::new(&cfg.out_dir, seed);
    let params = load_checkpoint(&paths.gcn()).context("loading the trained model; run `train` first")?;
    let clients = load_clients(&paths, cfg.n_clients)?;
    let tasks = clients.iter().map(NodeTask::from_graph).collect::<Result<Vec<_>, _>>()?;
    let e = evaluate(&params, &tasks)?;
    println!("{}", serde_json::to_string_pretty(&e)?);
    Ok(())
}

fn report(dirs: &[PathBuf], fallback: &Path) -> Result<()> {
    let dirs: Vec<&Path> = if dirs.is_empty() {
        vec![fallback]
    } else {
        dirs.iter().map(PathBuf::as_path).collect()
    };
    println!("{:<40} {:>6} {:>9} {:>9}  config", "run", "seeds", "mean", "std");
    for d in dirs {
        let path = d.join("summary.json");
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let s: Summary = serde_json::from_str(&text)?;
        println!(
            "{:<40} {:>6} {:>9.4} {:>9.4}  {}",
            d.display(),
            s.per_seed.len(),
            s.mean_acc,
            s.std_acc,
            s.config_hash
        );
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Command::Synth { out, nodes, classes } = &cli.command {
        let spec = SyntheticSpec {
            n_nodes: *nodes,
            n_classes: *classes,
            // keep the default 1:5 val and 1:2 test fractions at any size
            n_val: nodes / 5,
            n_test: nodes / 2,
            ..SyntheticSpec::default()
        };
        let g = write_class_text_dataset(&spec, cli.seed.unwrap_or(0), out)?;
        println!("wrote {} nodes and {} edges to {}", g.num_nodes(), g.num_edges(), out.display());
        return Ok(());
    }
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Synth { .. } => unreachable!(),
        Command::Run => {
            let s = run_pipeline(&cfg)?;
            println!(
                "mean accuracy {:.4} (std {:.4}) over {} seeds; summary in {}",
                s.mean_acc,
                s.std_acc,
                s.per_seed.len(),
                cfg.out_dir.join("summary.json").display()
            );
        }
        Command::Report { dirs } => report(dirs, &cfg.out_dir)?,
        cmd => {
            for &seed in &cfg.seeds {
                match cmd {
                    Command::Partition => partition(&cfg, seed)?,
                    Command::PretrainEdges => pretrain(&cfg, seed)?,
                    Command::Augment { replay } => augment(&cfg, seed, *replay)?,
                    Command::Train => train(&cfg, seed)?,
                    Command::Evaluate => eval(&cfg, seed)?,
                    _ => unreachable!(),
                }
            }
        }
    }
    Ok(())
}
