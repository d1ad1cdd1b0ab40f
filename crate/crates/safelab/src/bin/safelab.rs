//! Command-line orchestration: binds a validated run configuration to the
//! library operations and owns run directories, manifests, and seed plumbing.
//!
//! Every subcommand derives its randomness from the global `seed` in the
//! config through named substreams (`train`, `decode`, `probe`, `attack`,
//! `corpus`, `data`), so adding or re-running one stage never perturbs
//! another stage's randomness.
//!
//! Exit codes: 0 on success, 1 on a domain error, 2 on a usage error.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use safelab::attack::{attack_success, gcg_attack, AttackDecoder, GcgConfig};
use safelab::config::{parse_config, CorpusMode, JudgeKind, RunConfig};
use safelab::corpus::{encode_chat_prompt, load_corpus, Corpus, Source, Vocab};
use safelab::curriculum::make_schedule;
use safelab::decode::{
    beam_decode, sample_topk_with, shortcircuit_postprocess, BeamOptions, Generation, ModelScorer,
};
use safelab::eval::{
    emit_report, run_stage_pipeline, AttackPlan, EvalDecoder, EvalReport, HttpEndpoint, Judge,
    PipelineCheckpoint, ProbePlan, PromptSet, RemoteJudge, RuleJudge, Stage, StagePipelineArgs,
    SHORTCIRCUIT_REFUSAL,
};
use safelab::fixtures;
use safelab::model::Model;
use safelab::probe::{
    separability_experiment, write_probe_csv, write_probe_svg, CheckpointEntry,
    SeparabilityOptions,
};
use safelab::rng::derive_seed;
use safelab::trainer::{
    finetune, load_checkpoint, pretrain, save_checkpoint, PretrainOpts, TrainState,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "safelab",
    version,
    about = "Safety-curriculum pretraining laboratory",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the prepared corpora, prompt sets, and refusal lexicon to a directory.
    PrepareData(PrepareDataArgs),
    /// Pretrain one model under the configured curriculum.
    Train(TrainArgs),
    /// Finetune a checkpoint on the instruction or math dataset.
    Finetune(FinetuneArgs),
    /// Generate text from a checkpoint, one JSON line per generation.
    Decode(DecodeArgs),
    /// Evaluate one checkpoint: safety ASR and overrefusal, into report/.
    Eval(EvalArgs),
    /// Linear-probe separability across the run's base checkpoints.
    Probe(ProbeArgs),
    /// Optimize a GCG adversarial suffix against a checkpoint.
    Attack(AttackArgs),
    /// Re-emit report tables and charts from a run's report.json.
    Report(ReportArgs),
    /// Full experiment: sweep, finetune stages, evaluate, probe, attack.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(path) => Ok(parse_config(path)?),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Args)]
struct PrepareDataArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output directory for corpora and prompt sets.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, value_name = "DIR")]
    run_dir: PathBuf,
    /// Intervention start fraction; defaults to curriculum.fraction.
    #[arg(long)]
    fraction: Option<f64>,
    /// Pretraining seed index for this model.
    #[arg(long, default_value_t = 0)]
    pretrain_seed: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FinetuneDataset {
    Ift,
    Math,
}

impl FinetuneDataset {
    fn label(self) -> &'static str {
        match self {
            FinetuneDataset::Ift => "ift",
            FinetuneDataset::Math => "math",
        }
    }
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, value_name = "DIR")]
    run_dir: PathBuf,
    /// Checkpoint to start from.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Which finetuning dataset to use.
    #[arg(long, value_enum)]
    dataset: FinetuneDataset,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DecoderChoice {
    Topk,
    Beam,
    Safebeam,
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Prompt text.
    #[arg(long)]
    prompt: String,
    /// Wrap the prompt in chat-turn markers.
    #[arg(long)]
    chat: bool,
    #[arg(long, value_enum, default_value_t = DecoderChoice::Topk)]
    decoder: DecoderChoice,
    /// Top-k cutoff (top-k sampling only).
    #[arg(long)]
    k: Option<usize>,
    /// Number of beams (beam decoders only).
    #[arg(long)]
    beams: Option<usize>,
    /// Fraction of most-unsafe beams dropped per step (safebeam only).
    #[arg(long)]
    drop_fraction: Option<f64>,
    #[arg(long)]
    max_tokens: Option<usize>,
    /// Number of samples (top-k sampling only; beam decoders are deterministic).
    #[arg(long, default_value_t = 1)]
    samples: usize,
    /// Sampling seed; defaults to the decode substream of the global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Write JSON lines here instead of stdout.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, value_name = "DIR")]
    run_dir: PathBuf,
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Curriculum fraction recorded for this checkpoint; defaults to
    /// curriculum.fraction.
    #[arg(long)]
    fraction: Option<f64>,
    /// Checkpoint id used in the report; defaults to the file stem.
    #[arg(long)]
    id: Option<String>,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, value_name = "DIR")]
    run_dir: PathBuf,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Prompt to attack; defaults to attack.prompt from the config.
    #[arg(long)]
    prompt: Option<String>,
    /// Write the attack outcome as JSON here instead of stdout.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, value_name = "DIR")]
    run_dir: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, value_name = "DIR")]
    run_dir: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PrepareData(args) => prepare_data(args),
        Command::Train(args) => train_cmd(args),
        Command::Finetune(args) => finetune_cmd(args),
        Command::Decode(args) => decode_cmd(args),
        Command::Eval(args) => eval_cmd(args),
        Command::Probe(args) => probe_cmd(args),
        Command::Attack(args) => attack_cmd(args),
        Command::Report(args) => report_cmd(args),
        Command::Pipeline(args) => pipeline_cmd(args),
    }
}

// ---------------------------------------------------------------------------
// Run directory and manifest

struct RunDir {
    root: PathBuf,
}

impl RunDir {
    fn create(root: &Path) -> Result<RunDir> {
        for sub in ["checkpoints", "logs", "report"] {
            std::fs::create_dir_all(root.join(sub))
                .with_context(|| format!("cannot create run directory {}", root.display()))?;
        }
        Ok(RunDir { root: root.to_path_buf() })
    }

    fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    fn report(&self) -> PathBuf {
        self.root.join("report")
    }

    fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    fn load_manifest(&self) -> Result<Option<Manifest>> {
        let path = self.manifest_path();
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path)?;
        Ok(Some(serde_json::from_str(&text).context("manifest.json is not valid")?))
    }

    fn save_manifest(&self, manifest: &Manifest) -> Result<()> {
        let mut text = serde_json::to_string_pretty(manifest)?;
        text.push('\n');
        std::fs::write(self.manifest_path(), text)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    /// Path relative to the run directory.
    file: String,
    curriculum_fraction: f64,
    pretrain_seed: u64,
    /// "base", "ift", or "math".
    stage: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Manifest {
    tool_version: String,
    seed: u64,
    /// SHA-256 of the resolved configuration TOML below.
    config_sha256: String,
    /// The fully resolved configuration this run executed with.
    resolved_config: String,
    /// SHA-256 per corpus source, over its JSONL serialization.
    corpus_digests: BTreeMap<String, String>,
    checkpoints: BTreeMap<String, CheckpointMeta>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

impl Manifest {
    fn for_config(config: &RunConfig) -> Manifest {
        let resolved = config.to_toml();
        Manifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            config_sha256: sha256_hex(resolved.as_bytes()),
            resolved_config: resolved,
            corpus_digests: BTreeMap::new(),
            checkpoints: BTreeMap::new(),
        }
    }
}

/// Load the manifest, or start one from this config. A manifest written
/// under a different configuration is rejected rather than silently mixed.
fn ensure_manifest(run: &RunDir, config: &RunConfig) -> Result<Manifest> {
    let fresh = Manifest::for_config(config);
    match run.load_manifest()? {
        Some(existing) => {
            if existing.config_sha256 != fresh.config_sha256 {
                bail!(
                    "run directory {} was created with a different configuration \
                     (manifest config hash {}, current {}); use a new run directory",
                    run.root.display(),
                    existing.config_sha256,
                    fresh.config_sha256
                );
            }
            Ok(existing)
        }
        None => Ok(fresh),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing

fn load_corpora(config: &RunConfig) -> Result<BTreeMap<Source, Corpus>> {
    match config.corpus.mode {
        CorpusMode::Builtin => {
            let opts = config.corpus.to_options(derive_seed(config.seed, "corpus"));
            Ok(fixtures::prepared_corpora(&opts, config.corpus.unsafe_threshold)?)
        }
        CorpusMode::Files => {
            let mut out = BTreeMap::new();
            for (name, path) in &config.corpus.paths {
                let source = Source::parse(name).expect("config validated source names");
                let corpus = load_corpus(path)
                    .with_context(|| format!("loading corpus {name} from {path}"))?;
                out.insert(source, corpus);
            }
            Ok(out)
        }
    }
}

fn corpus_digests(corpora: &BTreeMap<Source, Corpus>) -> BTreeMap<String, String> {
    corpora
        .iter()
        .map(|(source, corpus)| {
            (source.as_str().to_string(), sha256_hex(corpus.to_jsonl().as_bytes()))
        })
        .collect()
}

fn build_judge(config: &RunConfig) -> Result<Box<dyn Judge>> {
    match config.eval.judge {
        JudgeKind::Rule => Ok(Box::new(RuleJudge::new(fixtures::refusal_lexicon()))),
        JudgeKind::Remote => {
            let url = std::env::var("SAFELAB_JUDGE_URL").context(
                "judge = \"remote\" needs SAFELAB_JUDGE_URL (and optionally \
                 SAFELAB_JUDGE_MODEL, SAFELAB_JUDGE_KEY) in the environment",
            )?;
            let model =
                std::env::var("SAFELAB_JUDGE_MODEL").unwrap_or_else(|_| "default".to_string());
            let key = std::env::var("SAFELAB_JUDGE_KEY").ok();
            let id = format!("remote:{model}");
            Ok(Box::new(RemoteJudge::new(HttpEndpoint::new(url, model, key), id)))
        }
    }
}

/// Sampling seeds for stochastic decoders, drawn from the decode substream.
fn eval_seeds(config: &RunConfig) -> Vec<u64> {
    let base = derive_seed(config.seed, "decode");
    config.eval.seeds.iter().map(|v| derive_seed(base, &format!("eval:{v}"))).collect()
}

fn configured_decoders(config: &RunConfig) -> Vec<EvalDecoder> {
    vec![config.decode.topk.to_decoder(), config.decode.safebeam.to_decoder()]
}

fn harmful_sets() -> Vec<PromptSet> {
    vec![fixtures::harmful_completion_set(), fixtures::harmful_request_set()]
}

fn load_model(path: &Path) -> Result<Model<f32>> {
    let (model, _, _) = load_checkpoint(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(model)
}

fn checkpoint_id(fraction: f64, pretrain_seed: u64) -> String {
    format!("base-f{fraction}-s{pretrain_seed}")
}

/// Pretrain one model; writes the checkpoint, the JSONL run log, and returns
/// the trained model with its manifest entry.
fn train_one(
    config: &RunConfig,
    corpora: &BTreeMap<Source, Corpus>,
    run: &RunDir,
    fraction: f64,
    pretrain_seed: u64,
) -> Result<(String, CheckpointMeta, Model<f32>)> {
    let train_stream = derive_seed(config.seed, "train");
    let id = checkpoint_id(fraction, pretrain_seed);
    let model_config =
        config.model.to_model_config(derive_seed(train_stream, &format!("init:{id}")));
    let mut model = Model::init(model_config.clone())?;
    let schedule = make_schedule(
        fraction,
        config.curriculum.budget,
        &config.curriculum.safe_mixture()?,
        &config.curriculum.intervention_mixture()?,
    )?;
    let train_config = config.train.to_train_config(
        derive_seed(train_stream, &format!("steps:{id}")),
        config.corpus.unsafe_threshold,
    );
    let mut state = TrainState::new(&model_config, train_config.seed);

    let log_path = run.logs().join(format!("{id}.jsonl"));
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    let checkpoint_dir = run.checkpoints();
    let opts = PretrainOpts {
        pause_at_step: None,
        checkpoint_dir: train_config.checkpoint_every.map(|_| checkpoint_dir.as_path()),
    };
    let mut last_loss = f32::NAN;
    pretrain(&mut model, &schedule, corpora, &train_config, &mut state, opts, |record| {
        last_loss = record.loss;
        let line = serde_json::to_string(record).expect("run record serializes");
        let _ = writeln!(log, "{line}");
    })?;
    log.flush()?;

    let file = format!("checkpoints/{id}.bin");
    save_checkpoint(run.root.join(&file), &model, &state, &train_config)?;
    println!(
        "trained {id}: {} steps, {} tokens, final loss {last_loss:.4} -> {file}",
        state.step, state.tokens_seen
    );
    let meta = CheckpointMeta {
        file,
        curriculum_fraction: fraction,
        pretrain_seed,
        stage: "base".to_string(),
    };
    Ok((id, meta, model))
}

fn finetune_dataset(
    config: &RunConfig,
    dataset: FinetuneDataset,
) -> Result<Corpus> {
    let data_seed = derive_seed(config.seed, "data");
    let corpus = match dataset {
        FinetuneDataset::Ift => fixtures::ift_corpus(
            config.finetune.ift_benign,
            config.finetune.ift_harmful,
            derive_seed(data_seed, "ift"),
        )?,
        FinetuneDataset::Math => {
            fixtures::math_corpus(config.finetune.math_docs, derive_seed(data_seed, "math"))?
        }
    };
    Ok(corpus)
}

// ---------------------------------------------------------------------------
// Subcommands

fn prepare_data(args: PrepareDataArgs) -> Result<()> {
    let config = args.config.load()?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("cannot create {}", args.out.display()))?;
    let corpora = load_corpora(&config)?;
    for (source, corpus) in &corpora {
        let path = args.out.join(format!("{}.jsonl", source.as_str()));
        std::fs::write(&path, corpus.to_jsonl())?;
        println!("wrote {} ({} documents)", path.display(), corpus.len());
    }
    for set in [
        fixtures::harmful_completion_set(),
        fixtures::harmful_request_set(),
        fixtures::benign_request_set(),
    ] {
        let path = args.out.join(format!("{}.json", set.name));
        std::fs::write(&path, set.to_json())?;
        println!("wrote {} ({} prompts)", path.display(), set.items.len());
    }
    let lexicon_path = args.out.join("refusal_lexicon.txt");
    let mut lexicon = fixtures::refusal_lexicon().join("\n");
    lexicon.push('\n');
    std::fs::write(&lexicon_path, lexicon)?;
    println!("wrote {}", lexicon_path.display());
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let config = args.config.load()?;
    let run = RunDir::create(&args.run_dir)?;
    let fraction = args.fraction.unwrap_or(config.curriculum.fraction);
    if !(0.0..=1.0).contains(&fraction) {
        bail!("--fraction {fraction} outside [0, 1]");
    }
    let corpora = load_corpora(&config)?;
    let mut manifest = ensure_manifest(&run, &config)?;
    manifest.corpus_digests = corpus_digests(&corpora);
    let (id, meta, _) = train_one(&config, &corpora, &run, fraction, args.pretrain_seed)?;
    manifest.checkpoints.insert(id, meta);
    run.save_manifest(&manifest)?;
    Ok(())
}

fn finetune_cmd(args: FinetuneArgs) -> Result<()> {
    let config = args.config.load()?;
    let run = RunDir::create(&args.run_dir)?;
    let (mut model, _, _) = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let dataset = finetune_dataset(&config, args.dataset)?;

    let stem = args
        .checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".to_string());
    let label = args.dataset.label();
    let id = format!("{stem}-{label}");
    let train_stream = derive_seed(config.seed, "train");
    let train_config =
        config.finetune.to_train_config(derive_seed(train_stream, &format!("{label}:{stem}")));
    let mut state = TrainState::new(&model.config, train_config.seed);

    let log_path = run.logs().join(format!("{id}.jsonl"));
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    let mut last_loss = f32::NAN;
    finetune(&mut model, &dataset, &train_config, &mut state, |record| {
        last_loss = record.loss;
        let line = serde_json::to_string(record).expect("run record serializes");
        let _ = writeln!(log, "{line}");
    })?;
    log.flush()?;

    let file = format!("checkpoints/{id}.bin");
    save_checkpoint(run.root.join(&file), &model, &state, &train_config)?;
    println!(
        "finetuned {id}: {} steps on {} examples, final loss {last_loss:.4} -> {file}",
        state.step,
        dataset.len()
    );

    let mut manifest = ensure_manifest(&run, &config)?;
    let base_meta = manifest.checkpoints.get(&stem).cloned();
    manifest.checkpoints.insert(
        id,
        CheckpointMeta {
            file,
            curriculum_fraction: base_meta
                .as_ref()
                .map(|m| m.curriculum_fraction)
                .unwrap_or(config.curriculum.fraction),
            pretrain_seed: base_meta.map(|m| m.pretrain_seed).unwrap_or(0),
            stage: label.to_string(),
        },
    );
    run.save_manifest(&manifest)?;
    Ok(())
}

fn decode_cmd(args: DecodeArgs) -> Result<()> {
    let config = args.config.load()?;
    let model = load_model(&args.checkpoint)?;
    let scorer = ModelScorer::new(&model);
    let vocab = Vocab::new();
    let prompt_ids = if args.chat {
        encode_chat_prompt(&args.prompt, &vocab)
    } else {
        vocab.encode(&args.prompt)
    };

    let mut generations: Vec<Generation> = Vec::new();
    match args.decoder {
        DecoderChoice::Topk => {
            let topk = &config.decode.topk;
            let k = args.k.unwrap_or(topk.k);
            let max_tokens = args.max_tokens.unwrap_or(topk.max_tokens);
            let seed_base = args.seed.unwrap_or_else(|| derive_seed(config.seed, "decode"));
            for i in 0..args.samples.max(1) {
                let seed = derive_seed(seed_base, &format!("sample:{i}"));
                let mut gen = sample_topk_with(
                    &scorer,
                    &prompt_ids,
                    k,
                    max_tokens,
                    topk.temperature,
                    seed,
                )?;
                if topk.shortcircuit {
                    gen = shortcircuit_postprocess(gen, SHORTCIRCUIT_REFUSAL);
                }
                generations.push(gen);
            }
        }
        DecoderChoice::Beam | DecoderChoice::Safebeam => {
            let safe = args.decoder == DecoderChoice::Safebeam;
            let section = &config.decode.safebeam;
            let opts = BeamOptions {
                n_beams: args.beams.unwrap_or(section.n_beams),
                max_tokens: args.max_tokens.unwrap_or(section.max_tokens),
                drop_fraction: if safe {
                    args.drop_fraction.unwrap_or(section.drop_fraction)
                } else {
                    0.0
                },
                mask_unsafe: safe,
            };
            let (gen, _) = beam_decode(&scorer, &prompt_ids, &opts)?;
            generations.push(gen);
        }
    }

    let mut out = String::new();
    for gen in &generations {
        out.push_str(&serde_json::to_string(gen)?);
        out.push('\n');
    }
    match &args.out {
        Some(path) => std::fs::write(path, out)?,
        None => print!("{out}"),
    }
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let config = args.config.load()?;
    let run = RunDir::create(&args.run_dir)?;
    let model = load_model(&args.checkpoint)?;
    let id = args.id.clone().unwrap_or_else(|| {
        args.checkpoint
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "checkpoint".to_string())
    });
    let fraction = args.fraction.unwrap_or(config.curriculum.fraction);

    let checkpoints =
        vec![PipelineCheckpoint { id, curriculum_fraction: fraction, model }];
    let judge = build_judge(&config)?;
    let sets = harmful_sets();
    let benign = fixtures::benign_request_set();
    let decoders = configured_decoders(&config);
    let seeds = eval_seeds(&config);
    let pipeline_args = StagePipelineArgs {
        checkpoints: &checkpoints,
        stages: &[Stage::Base],
        ift_dataset: None,
        math_dataset: None,
        finetune_config: config.finetune.to_train_config(0),
        harmful_sets: &sets,
        benign_set: Some(&benign),
        decoders: &decoders,
        judge: judge.as_ref(),
        seeds: &seeds,
        base_seed: config.seed,
        probe: None,
        attack: None,
    };
    let report_dir = run.report();
    let report = run_stage_pipeline(&pipeline_args, |partial| {
        let _ = emit_report(partial, &report_dir);
    })?;
    emit_report(&report, &report_dir)?;
    print_report_summary(&report);
    println!("report written to {}", report_dir.display());
    Ok(())
}

fn probe_cmd(args: ProbeArgs) -> Result<()> {
    let config = args.config.load()?;
    let run = RunDir::create(&args.run_dir)?;
    let manifest = run
        .load_manifest()?
        .with_context(|| format!("no manifest.json in {}; train first", run.root.display()))?;

    let mut loaded: Vec<(String, f64, Model<f32>)> = Vec::new();
    for (id, meta) in &manifest.checkpoints {
        if meta.stage != "base" {
            continue;
        }
        let model = load_model(&run.root.join(&meta.file))?;
        loaded.push((id.clone(), meta.curriculum_fraction, model));
    }
    if loaded.is_empty() {
        bail!("no base checkpoints recorded in {}", run.manifest_path().display());
    }

    let entries: Vec<CheckpointEntry> = loaded
        .iter()
        .map(|(id, fraction, model)| CheckpointEntry {
            id: id.clone(),
            curriculum_fraction: *fraction,
            model,
        })
        .collect();
    let documents = fixtures::probe_documents(
        config.probe.docs_per_class,
        derive_seed(derive_seed(config.seed, "data"), "probe"),
    )?;
    let refs: Vec<&safelab::corpus::Document> = documents.iter().collect();
    let opts = SeparabilityOptions {
        layers: config.probe.parse_layers()?,
        n_seeds: config.probe.n_seeds,
        train_per_class: config.probe.train_per_class,
        threshold: config.probe.threshold,
        position: None,
        base_seed: derive_seed(config.seed, "probe"),
    };
    let results = separability_experiment(&entries, &refs, &opts)?;
    write_probe_csv(&results, &run.report().join("probe.csv"))?;
    write_probe_svg(&results, &run.report().join("probe_auc.svg"))?;
    for r in &results {
        println!(
            "{} layer {}: AUC {:.3} ± {:.3} over {} probe seeds",
            r.checkpoint_id,
            r.layer,
            r.mean,
            r.std,
            r.aucs.len()
        );
    }
    println!("probe results written to {}", run.report().display());
    Ok(())
}

fn attack_cmd(args: AttackArgs) -> Result<()> {
    let config = args.config.load()?;
    let model = load_model(&args.checkpoint)?;
    let vocab = Vocab::new();
    let prompt = args.prompt.as_deref().unwrap_or(&config.attack.prompt);
    let prompt_ids = vocab.encode(prompt);
    let gcg = GcgConfig {
        seed: derive_seed(config.seed, "attack"),
        ..config.attack.to_gcg_config(0)
    };
    let result = gcg_attack(&model, &prompt_ids, &gcg)?;
    let target_ids = vocab.encode(&gcg.target);
    let success_safebeam = attack_success(
        &model,
        &prompt_ids,
        &result.suffix_ids,
        &target_ids,
        &AttackDecoder::SafeBeam(config.decode.safebeam.to_beam_options()),
    )?;

    let payload = serde_json::json!({
        "prompt": prompt,
        "target": gcg.target,
        "suffix_text": vocab.decode(&result.suffix_ids),
        "suffix_ids": result.suffix_ids,
        "final_loss": result.final_loss,
        "steps_taken": result.steps_taken,
        "success_greedy": result.success,
        "success_safebeam": success_safebeam,
        "loss_trace_first": result.loss_trace.first(),
        "loss_trace_last": result.loss_trace.last(),
    });
    let mut text = serde_json::to_string_pretty(&payload)?;
    text.push('\n');
    match &args.out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    eprintln!(
        "attack finished in {} steps: loss {:.4}, greedy success {}, safebeam success {}",
        result.steps_taken, result.final_loss, result.success, success_safebeam
    );
    Ok(())
}

fn report_cmd(args: ReportArgs) -> Result<()> {
    let run = RunDir::create(&args.run_dir)?;
    let path = run.report().join("report.json");
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("no report at {}; run eval or pipeline first", path.display()))?;
    let report: EvalReport = serde_json::from_str(&text).context("report.json is not valid")?;
    emit_report(&report, &run.report())?;
    print_report_summary(&report);
    println!("report artifacts regenerated in {}", run.report().display());
    Ok(())
}

fn pipeline_cmd(args: PipelineArgs) -> Result<()> {
    let config = args.config.load()?;
    let run = RunDir::create(&args.run_dir)?;
    let corpora = load_corpora(&config)?;
    let mut manifest = ensure_manifest(&run, &config)?;
    manifest.corpus_digests = corpus_digests(&corpora);
    run.save_manifest(&manifest)?;

    // Pretraining sweep.
    let mut checkpoints: Vec<PipelineCheckpoint> = Vec::new();
    for &fraction in &config.pipeline.fractions {
        for &pretrain_seed in &config.pipeline.pretrain_seeds {
            let (id, meta, model) = train_one(&config, &corpora, &run, fraction, pretrain_seed)?;
            manifest.checkpoints.insert(id.clone(), meta);
            run.save_manifest(&manifest)?;
            checkpoints.push(PipelineCheckpoint {
                id,
                curriculum_fraction: fraction,
                model,
            });
        }
    }

    // Stage evaluation plus probe and attack sections.
    let stages = config.eval.parse_stages()?;
    let ift_dataset = if stages.contains(&Stage::Instruction) {
        Some(finetune_dataset(&config, FinetuneDataset::Ift)?)
    } else {
        None
    };
    let math_dataset = if stages.contains(&Stage::MathTuned) {
        Some(finetune_dataset(&config, FinetuneDataset::Math)?)
    } else {
        None
    };
    let judge = build_judge(&config)?;
    let sets = harmful_sets();
    let benign = fixtures::benign_request_set();
    let decoders = configured_decoders(&config);
    let seeds = eval_seeds(&config);
    let probe_documents = if config.probe.enabled {
        Some(fixtures::probe_documents(
            config.probe.docs_per_class,
            derive_seed(derive_seed(config.seed, "data"), "probe"),
        )?)
    } else {
        None
    };
    let probe = match &probe_documents {
        Some(documents) => Some(ProbePlan {
            documents,
            layers: config.probe.parse_layers()?,
            n_seeds: config.probe.n_seeds,
            train_per_class: config.probe.train_per_class,
            threshold: config.probe.threshold,
        }),
        None => None,
    };
    let attack = if config.attack.enabled {
        Some(AttackPlan {
            config: config.attack.to_gcg_config(0),
            prompt: &config.attack.prompt,
            safebeam: config.decode.safebeam.to_beam_options(),
        })
    } else {
        None
    };

    let train_stream = derive_seed(config.seed, "train");
    let pipeline_args = StagePipelineArgs {
        checkpoints: &checkpoints,
        stages: &stages,
        ift_dataset: ift_dataset.as_ref(),
        math_dataset: math_dataset.as_ref(),
        finetune_config: config.finetune.to_train_config(derive_seed(train_stream, "finetune")),
        harmful_sets: &sets,
        benign_set: Some(&benign),
        decoders: &decoders,
        judge: judge.as_ref(),
        seeds: &seeds,
        base_seed: config.seed,
        probe,
        attack,
    };
    let report_dir = run.report();
    let report = run_stage_pipeline(&pipeline_args, |partial| {
        if let Err(err) = emit_report(partial, &report_dir) {
            eprintln!("warning: could not flush partial report: {err}");
        }
        if let Some(stage) = partial.completed_stages.last() {
            println!("completed section: {stage}");
        }
    })?;
    emit_report(&report, &report_dir)?;
    print_report_summary(&report);
    println!("report written to {}", report_dir.display());
    Ok(())
}

fn print_report_summary(report: &EvalReport) {
    for row in &report.rows {
        for section in &row.safety {
            println!(
                "{} [{}] {} on {}: ASR {:.3} ± {:.3}",
                row.checkpoint_id,
                row.stage.label(),
                row.decoder,
                section.prompt_set,
                section.asr_mean,
                section.asr_std
            );
        }
        if let Some(over) = &row.overrefusal {
            println!(
                "{} [{}] {} on {}: overrefusal {:.3}",
                row.checkpoint_id,
                row.stage.label(),
                row.decoder,
                over.prompt_set,
                over.rate
            );
        }
    }
    for probe in &report.probes {
        println!(
            "probe {} layer {}: AUC {:.3} ± {:.3}",
            probe.checkpoint_id, probe.layer, probe.mean, probe.std
        );
    }
    for attack in &report.attacks {
        println!(
            "attack {}: loss {:.4}, greedy {}, safebeam {}",
            attack.checkpoint_id, attack.final_loss, attack.success_greedy, attack.success_safebeam
        );
    }
}
