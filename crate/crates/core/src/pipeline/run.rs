use std::collections::HashMap;
use std::fs;
use std::hash::Hasher;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{
    initial_generation, reflection_step, replay_records, AugmentContext, GenerationSettings,
};
use super::config::{LlmBackend, RunConfig};
use super::eval::{evaluate, EvalSummary};
use super::{stage_msg, PipelineError, Stage, StageExt};
use crate::edges::{append_edge_audit, build_samples, train_edge_predictor_federated, EdgeAuditEntry, EdgeError, EdgeTask};
use crate::features::{featurize_graph, FeatureMode};
use crate::federation::{run_round, write_round_log, FedConfig, NodeTask, Participant, RoundReport};
use crate::graph::{load_graph, save_graph, AddedEdge, NodeId, TextAttributedGraph};
use crate::llm::{append_records, CountingTransport, GenerationRecord, HttpTransport, LlmTransport, MockLlm, MockVocab};
use crate::nn::{save_checkpoint, ModelParams, Optimizer};
use crate::partition::{dirichlet_partition, materialize_subgraphs, PartitionPlan};
use crate::synthetic::VOCAB_FILE;

/// Independent seed for one named random stream of a run.
pub fn derive_seed(seed: u64, stream: &str, index: u64) -> u64 {
    let mut h = FnvHasher::default();
    h.write_u64(seed);
    h.write(stream.as_bytes());
    h.write_u64(index);
    h.finish()
}

/// File layout of one seed's output directory.
#[derive(Clone, Debug)]
pub struct SeedPaths {
    pub root: PathBuf,
}

impl SeedPaths {
    pub fn new(out_dir: &Path, seed: u64) -> Self {
        SeedPaths {
            root: out_dir.join(format!("seed-{seed}")),
        }
    }
    pub fn partition(&self) -> PathBuf {
        self.root.join("partition.json")
    }
    pub fn edge_predictor(&self) -> PathBuf {
        self.root.join("edge_predictor")
    }
    pub fn gcn(&self) -> PathBuf {
        self.root.join("gcn")
    }
    pub fn records(&self) -> PathBuf {
        self.root.join("generation_records.jsonl")
    }
    pub fn edges(&self) -> PathBuf {
        self.root.join("edges_added.jsonl")
    }
    pub fn rounds(&self) -> PathBuf {
        self.root.join("rounds.jsonl")
    }
    pub fn reflection(&self) -> PathBuf {
        self.root.join("reflection.jsonl")
    }
    pub fn result(&self) -> PathBuf {
        self.root.join("result.json")
    }
    pub fn client(&self, i: usize) -> PathBuf {
        self.root.join("clients").join(format!("client-{i}"))
    }
}

/// Loaded, featurized and partitioned data for one seed.
#[derive(Clone, Debug)]
pub struct PreparedSeed {
    pub global: TextAttributedGraph,
    pub plan: PartitionPlan,
    pub clients: Vec<TextAttributedGraph>,
    pub categories: Vec<String>,
}

fn vocab_path(cfg: &RunConfig) -> PathBuf {
    cfg.llm.mock.vocab.clone().unwrap_or_else(|| cfg.dataset.join(VOCAB_FILE))
}

pub fn prepare_clients(cfg: &RunConfig, seed: u64) -> Result<PreparedSeed, PipelineError> {
    let mut global = load_graph(&cfg.dataset).stage(Stage::Load)?;
    match cfg.features.mode {
        FeatureMode::HashedBow => {
            featurize_graph(&cfg.features, &mut global).stage(Stage::Featurize)?;
        }
        FeatureMode::Precomputed => {
            if global.feature_dim() != Some(cfg.features.dim) {
                return Err(stage_msg(
                    Stage::Featurize,
                    format!("dataset features have dim {:?}, config says {}", global.feature_dim(), cfg.features.dim),
                ));
            }
        }
    }
    let plan = dirichlet_partition(&global, cfg.n_clients, cfg.alpha, derive_seed(seed, "partition", 0))
        .stage(Stage::Partition)?;
    let parts = materialize_subgraphs(&global, &plan).stage(Stage::Partition)?;
    log::info!(
        "seed {seed}: {} clients, {} cross-client edges dropped",
        parts.clients.len(),
        parts.dropped_edges
    );
    let categories = match &cfg.categories {
        Some(c) => c.clone(),
        None => match MockVocab::load(&vocab_path(cfg)) {
            Ok(v) => v.class_names,
            Err(_) => (0..global.num_classes()).map(|c| format!("class {c}")).collect(),
        },
    };
    Ok(PreparedSeed {
        global,
        plan,
        clients: parts.clients,
        categories,
    })
}

/// Federated edge predictor trained on each client's own edges. Returns
/// `None` when inferred edges are switched off or no client has edges.
/// Parameters are rounded to `f32` so a saved checkpoint scores identically.
pub fn pretrain_edges(
    cfg: &RunConfig,
    clients: &[TextAttributedGraph],
    seed: u64,
) -> Result<Option<ModelParams>, PipelineError> {
    if !cfg.uses_edges() {
        return Ok(None);
    }
    let mut tasks = Vec::new();
    for (i, g) in clients.iter().enumerate() {
        match build_samples(g, derive_seed(seed, "edges", i as u64)) {
            Ok(s) => tasks.push(EdgeTask::new(g, &s).stage(Stage::PretrainEdges)?),
            Err(e @ (EdgeError::NoEdges | EdgeError::TooDense { .. })) => {
                log::warn!("client {i} skipped for edge pretraining: {e}");
            }
            Err(e) => return Err(e).stage(Stage::PretrainEdges),
        }
    }
    if tasks.is_empty() {
        log::warn!("no client has usable edges; running without inferred edges");
        return Ok(None);
    }
    let (phi, _) = train_edge_predictor_federated(
        tasks,
        cfg.features.dim,
        &cfg.edge_predictor,
        derive_seed(seed, "edge-init", 0),
    )
    .stage(Stage::PretrainEdges)?;
    Ok(Some(phi.quantized_f32()))
}

/// Transport described by the config. The mock answers from the labels of
/// `global` and the vocabulary next to the dataset.
pub fn build_transport(
    cfg: &RunConfig,
    global: &TextAttributedGraph,
    seed: u64,
) -> Result<Box<dyn LlmTransport>, PipelineError> {
    match cfg.llm.backend {
        LlmBackend::Http => Ok(Box::new(HttpTransport::new(cfg.llm.http.clone()))),
        LlmBackend::Mock => {
            let vocab = MockVocab::load(&vocab_path(cfg)).stage(Stage::Config)?;
            let labels: HashMap<NodeId, usize> = global
                .nodes()
                .iter()
                .filter_map(|n| n.label.map(|l| (n.id.clone(), l)))
                .collect();
            let mut m = MockLlm::new(labels, vocab, derive_seed(cfg.llm.mock.seed, "mock", seed));
            m.p_correct_generate = cfg.llm.mock.p_correct_generate;
            m.p_correct_reflect = cfg.llm.mock.p_correct_reflect;
            Ok(Box::new(m))
        }
    }
}

fn gcn_setup(
    cfg: &RunConfig,
    clients: &[TextAttributedGraph],
    n_classes: usize,
    seed: u64,
) -> Result<(ModelParams, Vec<Participant<NodeTask>>, FedConfig), PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "gcn", 0));
    let init = ModelParams::init_gcn2(cfg.features.dim, cfg.gcn.hidden, n_classes, &mut rng);
    let mut participants = Vec::with_capacity(clients.len());
    for (i, g) in clients.iter().enumerate() {
        let task = NodeTask::from_graph(g).stage(Stage::Training)?;
        participants.push(Participant::new(i, task, Optimizer::adam(cfg.gcn.adam)));
    }
    let fed = FedConfig {
        rounds: cfg.rounds,
        local_epochs: cfg.gcn.local_epochs,
        weight_source: cfg.weight_source,
        seed: derive_seed(seed, "fed", 0),
        ..FedConfig::default()
    };
    Ok((init, participants, fed))
}

/// FedAvg on fixed client graphs, no reflection.
pub fn train_gcn(
    cfg: &RunConfig,
    clients: &[TextAttributedGraph],
    n_classes: usize,
    seed: u64,
) -> Result<(ModelParams, Vec<RoundReport>, Vec<NodeTask>), PipelineError> {
    let (init, mut participants, fed) = gcn_setup(cfg, clients, n_classes, seed)?;
    let (params, reports) = crate::federation::train_federated(&init, &mut participants, &fed).stage(Stage::Training)?;
    Ok((params, reports, participants.into_iter().map(|p| p.task).collect()))
}

/// Targets chosen at one reflection round and their mean confidence then
/// and at the next reflection round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReflectionRoundStat {
    pub round: u32,
    pub targets: Vec<(usize, NodeId)>,
    pub regenerated: usize,
    pub confidence_at_selection: Option<f64>,
    pub confidence_next: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub test_acc: f64,
    pub eval: EvalSummary,
    pub llm_calls: usize,
    pub llm_failures: usize,
    pub generated_nodes: usize,
    pub inferred_edges: usize,
    pub reflection: Vec<ReflectionRoundStat>,
    /// Whether the reflected nodes gained confidence between every pair of
    /// consecutive reflection rounds; `None` with fewer than two rounds.
    pub reflection_improved: Option<bool>,
}

struct Outputs {
    paths: Option<SeedPaths>,
}

impl Outputs {
    fn records(&self, recs: &[GenerationRecord]) -> Result<(), PipelineError> {
        match &self.paths {
            Some(p) if !recs.is_empty() => append_records(&p.records(), recs).stage(Stage::Output),
            _ => Ok(()),
        }
    }

    fn edges(&self, client: usize, round: u32, edges: &[AddedEdge]) -> Result<(), PipelineError> {
        let Some(p) = &self.paths else { return Ok(()) };
        let entries: Vec<EdgeAuditEntry> = edges
            .iter()
            .map(|e| EdgeAuditEntry {
                client,
                generated_id: e.a.clone(),
                original_id: e.b.clone(),
                score: e.score,
                round,
            })
            .collect();
        if entries.is_empty() {
            return Ok(());
        }
        append_edge_audit(&p.edges(), &entries).stage(Stage::Output)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let s = serde_json::to_string_pretty(value).stage(Stage::Output)?;
    fs::write(path, s + "\n").stage(Stage::Output)
}

/// One full run for `seed`. Uses the configured transport unless one is
/// supplied. With `out` set, every artifact goes under `out/seed-{seed}`.
pub fn run_seed(
    cfg: &RunConfig,
    seed: u64,
    transport: Option<&dyn LlmTransport>,
    out: Option<&Path>,
) -> Result<SeedResult, PipelineError> {
    cfg.validate()?;
    let prep = prepare_clients(cfg, seed)?;
    let outputs = Outputs {
        paths: out.map(|o| SeedPaths::new(o, seed)),
    };
    if let Some(p) = &outputs.paths {
        if p.root.exists() {
            fs::remove_dir_all(&p.root).stage(Stage::Output)?;
        }
        fs::create_dir_all(&p.root).stage(Stage::Output)?;
        prep.plan.save(&p.partition()).stage(Stage::Output)?;
        fs::write(p.root.join("config.toml"), cfg.to_toml()).stage(Stage::Output)?;
    }

    let owned;
    let llm: &dyn LlmTransport = match transport {
        Some(t) => t,
        None if cfg.no_generation => &NoLlm,
        None => {
            owned = build_transport(cfg, &prep.global, seed)?;
            owned.as_ref()
        }
    };
    let llm = CountingTransport::new(llm);

    let phi = if cfg.no_generation {
        None
    } else {
        pretrain_edges(cfg, &prep.clients, seed)?
    };
    if let (Some(p), Some(phi)) = (&outputs.paths, &phi) {
        save_checkpoint(phi, &p.edge_predictor()).stage(Stage::Output)?;
    }
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

    let mut clients = prep.clients;
    let n = clients.len();
    let mut history: Vec<Vec<GenerationRecord>> = vec![Vec::new(); n];
    let mut rngs: Vec<ChaCha8Rng> = (0..n)
        .map(|i| ChaCha8Rng::seed_from_u64(derive_seed(seed, "prompts", i as u64)))
        .collect();
    let mut failures = 0;
    let mut inferred_edges = 0;
    if !cfg.no_generation {
        for (i, g) in clients.iter_mut().enumerate() {
            let (recs, batch, failed) =
                initial_generation(g, i, &llm, &settings, &ctx, &mut rngs[i]).stage(Stage::Generation)?;
            failures += failed;
            inferred_edges += batch.edges.len();
            outputs.records(&recs)?;
            outputs.edges(i, 0, &batch.edges)?;
            history[i] = recs;
        }
    }

    let n_classes = prep.global.num_classes();
    let (init, mut participants, fed) = gcn_setup(cfg, &clients, n_classes, seed)?;
    let reflect_at = cfg.reflection_set();
    let mut global = init;
    let mut reports = Vec::with_capacity(cfg.rounds as usize);
    let mut trace: Vec<ReflectionRoundStat> = Vec::new();
    for t in 1..=cfg.rounds {
        let (next, mut report) = run_round(&global, &mut participants, &fed, t).stage(Stage::Training)?;
        global = next;
        if reflect_at.contains(&t) {
            let mut stat = ReflectionRoundStat {
                round: t,
                targets: Vec::new(),
                regenerated: 0,
                confidence_at_selection: None,
                confidence_next: None,
            };
            let mut all_conf = Vec::new();
            let mut prev_conf = Vec::new();
            let mut target_conf = Vec::new();
            for (i, g) in clients.iter_mut().enumerate() {
                let r = reflection_step(g, i, t, &global, &history[i], &llm, &settings, &ctx, &mut rngs[i])
                    .stage(Stage::Reflection)?;
                all_conf.extend(r.confidence.entries.iter().map(|(_, p)| *p));
                if let Some(prev) = trace.last() {
                    prev_conf.extend(
                        prev.targets
                            .iter()
                            .filter(|(c, _)| *c == i)
                            .filter_map(|(_, id)| r.confidence.get(id)),
                    );
                }
                target_conf.extend(r.targets.iter().filter_map(|id| r.confidence.get(id)));
                stat.targets.extend(r.targets.iter().map(|id| (i, id.clone())));
                stat.regenerated += r.records.len();
                failures += r.failures;
                inferred_edges += r.batch.edges.len();
                outputs.records(&r.records)?;
                outputs.edges(i, t, &r.batch.edges)?;
                history[i].extend(r.records);
                if !r.batch.new_nodes.is_empty() || !r.batch.removed_nodes.is_empty() {
                    participants[i].task = NodeTask::from_graph(g).stage(Stage::Reflection)?;
                }
            }
            if let Some(prev) = trace.last_mut() {
                prev.confidence_next = mean(&prev_conf);
            }
            stat.confidence_at_selection = mean(&target_conf);
            report.mean_confidence = mean(&all_conf);
            trace.push(stat);
        }
        report.generated_nodes = Some(clients.iter().map(TextAttributedGraph::num_generated).sum());
        report.inferred_edges = Some(inferred_edges);
        reports.push(report);
    }

    let tasks: Vec<NodeTask> = participants.into_iter().map(|p| p.task).collect();
    let eval = evaluate(&global, &tasks).stage(Stage::Evaluation)?;
    let pairs: Vec<bool> = trace
        .iter()
        .filter_map(|s| match (s.confidence_at_selection, s.confidence_next) {
            (Some(a), Some(b)) => Some(b > a),
            _ => None,
        })
        .collect();
    let result = SeedResult {
        seed,
        test_acc: eval.accuracy,
        eval,
        llm_calls: llm.calls(),
        llm_failures: failures,
        generated_nodes: clients.iter().map(TextAttributedGraph::num_generated).sum(),
        inferred_edges,
        reflection: trace,
        reflection_improved: (!pairs.is_empty()).then(|| pairs.iter().all(|&b| b)),
    };
    log::info!(
        "seed {seed}: test accuracy {:.4}, {} generated nodes, {} inferred edges, {} LLM calls",
        result.test_acc,
        result.generated_nodes,
        result.inferred_edges,
        result.llm_calls
    );

    if let Some(p) = &outputs.paths {
        write_round_log(&p.rounds(), &reports).stage(Stage::Output)?;
        save_checkpoint(&global, &p.gcn()).stage(Stage::Output)?;
        for (i, g) in clients.iter().enumerate() {
            save_graph(g, &p.client(i)).stage(Stage::Output)?;
        }
        let mut lines = String::new();
        for s in &result.reflection {
            lines += &serde_json::to_string(s).stage(Stage::Output)?;
            lines.push('\n');
        }
        fs::write(p.reflection(), lines).stage(Stage::Output)?;
        write_json(&p.result(), &result)?;
    }
    Ok(result)
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Stands in for a transport when generation is off; never called.
struct NoLlm;

impl LlmTransport for NoLlm {
    fn complete(&self, _: &crate::llm::PromptBundle) -> Result<String, crate::llm::TransportError> {
        Err(crate::llm::TransportError::Fatal("generation is disabled".into()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean_acc: f64,
    /// Population standard deviation across seeds.
    pub std_acc: f64,
    pub per_seed: Vec<SeedResult>,
    pub config_hash: String,
}

impl Summary {
    pub fn from_results(cfg: &RunConfig, per_seed: Vec<SeedResult>) -> Self {
        let accs: Vec<f64> = per_seed.iter().map(|r| r.test_acc).collect();
        let m = mean(&accs).unwrap_or(f64::NAN);
        let var = mean(&accs.iter().map(|a| (a - m).powi(2)).collect::<Vec<_>>()).unwrap_or(f64::NAN);
        Summary {
            mean_acc: m,
            std_acc: var.sqrt(),
            per_seed,
            config_hash: cfg.hash(),
        }
    }
}

/// Every configured seed, then `summary.json` in the output directory.
pub fn run_pipeline(cfg: &RunConfig) -> Result<Summary, PipelineError> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir).stage(Stage::Output)?;
    let mut results = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        results.push(run_seed(cfg, seed, None, Some(&cfg.out_dir))?);
    }
    let summary = Summary::from_results(cfg, results);
    write_json(&cfg.out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Rebuilds the augmented client graphs of a finished run from its record
/// log and edge predictor checkpoint, without any LLM calls.
pub fn replay_seed(
    cfg: &RunConfig,
    seed: u64,
    records: &[GenerationRecord],
    phi: Option<&ModelParams>,
) -> Result<Vec<TextAttributedGraph>, PipelineError> {
    let prep = prepare_clients(cfg, seed)?;
    let mut clients = prep.clients;
    let ctx = AugmentContext {
        features: &cfg.features,
        aux: None,
        phi,
        edge_k: cfg.edge_k,
    };
    replay_records(&mut clients, records, &ctx).stage(Stage::Replay)?;
    Ok(clients)
}
