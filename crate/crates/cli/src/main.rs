use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use msdp_core::corpus::{build_entity_index, generate_synthetic_corpus, label_set, parse_bio, to_bio, Sentence, SynthConfig};
use msdp_core::episodes::{read_episodes, sample_episodes, validate_episode, write_episodes, Episode, SamplerConfig};
use msdp_core::eval::{
    comparison_csv, evaluate_with_workers, prediction_records, representation_records, run_ablation, Benchmark,
    RunConfig, Variant,
};
use msdp_core::model::{loss_csv, Checkpoint, Model};
use msdp_core::train::{build_pretrain_instance, build_vocabulary, run_episode_training, run_pretraining, EpisodeTrainConfig};
use msdp_core::{seed, Error};

#[derive(Parser, Debug)]
#[command(name = "msdp", version, about = "Few-shot NER: corpus synthesis, episode sampling, pre-training, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic BIO corpus from templates and lexicons.
    Synth(SynthArgs),
    /// Sample N-way K~2K-shot episodes from a BIO corpus.
    SampleEpisodes(SampleArgs),
    /// Demonstration/contrastive pre-training of a fresh encoder.
    Pretrain(PretrainArgs),
    /// Episodic training of the span extractor and prototype classifier.
    Train(TrainArgs),
    /// Evaluate a checkpoint on test episodes.
    Eval(EvalArgs),
    /// Run ablation variants over several seeds.
    Ablate(AblateArgs),
    /// Dump span representations for every view.
    DumpReps(DumpArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Master seed; every component derives its own sub-seed from it.
    #[arg(long, env = "MSDP_SEED", default_value_t = 0)]
    seed: u64,
    /// Worker threads for evaluation.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Run config (TOML with [model], [model.encoder], [pretrain], [train]).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set train.lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides n_sentences from the config.
    #[arg(long)]
    n: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    n_way: usize,
    #[arg(long)]
    k_shot: usize,
    #[arg(long)]
    count: usize,
    /// Cap per-type support mentions at K instead of 2K.
    #[arg(long)]
    exact_k: bool,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    /// Also write the pre-training instances as JSONL.
    #[arg(long)]
    dump_instances: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    episodes: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    /// Start from this checkpoint (e.g. a pre-trained one).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Corpus for the vocabulary of a fresh model; defaults to the episode sentences.
    #[arg(long, conflicts_with = "init")]
    corpus: Option<PathBuf>,
    /// Prototype families to train with (full, base, no_class_oriented_proto, ...).
    #[arg(long, default_value = "full")]
    variant: Variant,
    /// Evaluated every train.eval_interval steps; the best checkpoint is kept.
    #[arg(long)]
    dev_episodes: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    episodes: PathBuf,
    /// Metrics JSON path.
    #[arg(long)]
    out: PathBuf,
    /// Variant name recorded in the metrics.
    #[arg(long, default_value = "full")]
    variant: String,
    /// Per-sentence predictions as JSONL.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    train_episodes: PathBuf,
    #[arg(long)]
    test_episodes: PathBuf,
    /// Comma-separated variants; defaults to all.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<Variant>,
    /// Comma-separated seeds; defaults to the master seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    episodes: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    args: Vec<String>,
    config: serde_json::Value,
    seed: u64,
    inputs: Vec<InputHash>,
    outputs: Vec<PathBuf>,
    started_unix: u64,
    wall_clock_secs: f64,
    versions: Versions,
}

#[derive(Serialize)]
struct InputHash {
    path: PathBuf,
    sha256: String,
}

#[derive(Serialize)]
struct Versions {
    msdp: &'static str,
}

struct Run {
    command: &'static str,
    seed: u64,
    config: serde_json::Value,
    inputs: Vec<InputHash>,
    outputs: Vec<PathBuf>,
    started: Instant,
    started_unix: u64,
}

impl Run {
    fn new(command: &'static str, seed: u64) -> Self {
        Self {
            command,
            seed,
            config: serde_json::Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        let mut hasher = Sha256::new();
        if path.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(path)
                .with_context(|| format!("reading {}", path.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            entries.sort();
            for p in entries {
                hasher.update(p.file_name().unwrap_or_default().as_encoded_bytes());
                hasher.update(fs::read(&p).map_err(|e| Error::io(&p, e))?);
            }
        } else {
            hasher.update(fs::read(path).map_err(|e| Error::io(path, e))?);
        }
        self.inputs.push(InputHash {
            path: path.to_owned(),
            sha256: format!("{:x}", hasher.finalize()),
        });
        Ok(())
    }

    fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_owned());
    }

    /// Written next to a file output, or inside a directory output.
    fn finish(self, anchor: &Path) -> Result<()> {
        let manifest = RunManifest {
            command: self.command.to_owned(),
            args: std::env::args().skip(1).collect(),
            config: self.config,
            seed: self.seed,
            inputs: self.inputs,
            outputs: self.outputs,
            started_unix: self.started_unix,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
            versions: Versions {
                msdp: env!("CARGO_PKG_VERSION"),
            },
        };
        let path = if anchor.is_dir() {
            anchor.join("run_manifest.json")
        } else {
            let mut name = anchor.file_name().unwrap_or_default().to_owned();
            name.push(".manifest.json");
            anchor.with_file_name(name)
        };
        write_atomic(&path, &serde_json::to_vec_pretty(&manifest)?)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

fn read_corpus(path: &Path) -> Result<Vec<Sentence>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_bio(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let text = match &args.config {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    let overrides = args
        .overrides
        .iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_owned(), v.trim().to_owned()))
                .ok_or_else(|| Error::Config(format!("override `{kv}` is not PATH=VALUE")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let config = RunConfig::from_toml_with(&text, &overrides).map_err(|e| match (e, &args.config) {
        (Error::Config(m), Some(p)) => Error::Config(format!("{}: {m}", p.display())),
        (e, _) => e,
    })?;
    config.validate()?;
    Ok(config)
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut run = Run::new("synth", a.common.seed);
    let cfg = SynthConfig::load(&a.config)?;
    run.input(&a.config)?;
    let base = a.config.parent().unwrap_or(Path::new("."));
    let lexicons = cfg.load_lexicons(base)?;
    let n = a.n.unwrap_or(cfg.n_sentences);
    let corpus = generate_synthetic_corpus(n, &lexicons, &cfg.templates()?, a.common.seed)?;
    write_atomic(&a.out, to_bio(&corpus).as_bytes())?;
    run.config = serde_json::json!({ "n_sentences": n, "synth": cfg });
    run.output(&a.out);
    eprintln!("wrote {} sentences to {}", corpus.len(), a.out.display());
    run.finish(&a.out)
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let mut run = Run::new("sample-episodes", a.common.seed);
    let corpus = read_corpus(&a.corpus)?;
    run.input(&a.corpus)?;
    let cfg = SamplerConfig {
        exact_k: a.exact_k,
        ..SamplerConfig::new(a.n_way, a.k_shot)
    };
    let episodes = sample_episodes(&corpus, &cfg, a.count, a.common.seed)?;
    for (i, ep) in episodes.iter().enumerate() {
        let report = validate_episode(ep, &cfg);
        if !report.is_valid() {
            return Err(Error::Validation(format!("episode {i}: {}", report.violations.join("; "))).into());
        }
    }
    write_episodes(&episodes, &a.out)?;
    run.config = serde_json::to_value(&cfg)?;
    run.output(&a.out);
    eprintln!("wrote {} episodes to {}", episodes.len(), a.out.display());
    run.finish(&a.out)
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let mut run = Run::new("pretrain", a.common.seed);
    let config = load_config(&a.config)?;
    let corpus = read_corpus(&a.corpus)?;
    run.input(&a.corpus)?;
    let pc = msdp_core::train::PretrainConfig {
        seed: seed::derive(a.common.seed, "pretrain"),
        ..config.pretrain.clone()
    };
    let mut model = Model::new(config.model.clone(), build_vocabulary(&corpus), a.common.seed)?;
    let index = build_entity_index(&corpus);
    if let Some(path) = &a.dump_instances {
        let labels = label_set(&corpus);
        let mut rows = Vec::new();
        for (i, x) in corpus.iter().enumerate() {
            let inst = build_pretrain_instance(
                x,
                &index,
                &labels,
                &model.vocab,
                model.max_len(),
                &pc,
                seed::derive_indexed(pc.seed, "dump", i as u64),
            )?;
            if let Some(inst) = inst {
                rows.push(serde_json::json!({ "sentence": i, "instance": inst }));
            }
        }
        write_jsonl(path, &rows)?;
        run.output(path);
    }
    let history = run_pretraining(&mut model, &corpus, &index, &pc)?;
    if let Some(last) = history.last() {
        eprintln!("pre-training done: {} steps, last {:?}", history.len(), last);
    }
    let ck = Checkpoint {
        step: history.len(),
        model,
        seed: a.common.seed,
        loss_history: history,
    };
    ck.save(&a.out)?;
    write_atomic(&a.out.join("losses.csv"), loss_csv(&ck.loss_history).as_bytes())?;
    run.config = serde_json::to_value(&config)?;
    run.output(&a.out);
    run.finish(&a.out)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut run = Run::new("train", a.common.seed);
    let config = load_config(&a.config)?;
    let episodes = read_episodes(&a.episodes)?;
    run.input(&a.episodes)?;
    let (mut model, mut history) = match (&a.init, &a.corpus) {
        (Some(dir), _) => {
            run.input(dir)?;
            let ck = Checkpoint::load(dir)?;
            if ck.model.config != config.model {
                eprintln!("note: using the model configuration stored in {}", dir.display());
            }
            (ck.model, ck.loss_history)
        }
        (None, Some(path)) => {
            run.input(path)?;
            let corpus = read_corpus(path)?;
            (Model::new(config.model.clone(), build_vocabulary(&corpus), a.common.seed)?, Vec::new())
        }
        (None, None) => {
            let sentences: Vec<Sentence> =
                episodes.iter().flat_map(|e| e.support.iter().chain(&e.query).cloned()).collect();
            (Model::new(config.model.clone(), build_vocabulary(&sentences), a.common.seed)?, Vec::new())
        }
    };
    let dev: Option<Vec<Episode>> = match &a.dev_episodes {
        Some(p) => {
            run.input(p)?;
            Some(read_episodes(p)?)
        }
        None => None,
    };
    let tc = EpisodeTrainConfig {
        families: a.variant.families(),
        seed: seed::derive(a.common.seed, "train"),
        ..config.train.clone()
    };
    let mut best: Option<(f64, usize, Model)> = None;
    let variant = a.variant.name();
    let train_history = run_episode_training(&mut model, &episodes, &tc, |step, m| {
        if let Some(dev) = &dev {
            let (report, _) = evaluate_with_workers(m, dev, variant, a.common.seed, a.common.workers)?;
            eprintln!("step {step}: dev micro F1 {:.4}", report.micro.f1);
            if best.as_ref().map_or(true, |(f, _, _)| report.micro.f1 > *f) {
                best = Some((report.micro.f1, step, m.clone()));
            }
        } else {
            eprintln!("step {step}");
        }
        Ok(())
    })?;
    let offset = history.len();
    history.extend(train_history.into_iter().map(|mut r| {
        r.step += offset;
        r
    }));
    if let (Some(dev), Some((f1, step, m))) = (&dev, best) {
        let (last, _) = evaluate_with_workers(&model, dev, variant, a.common.seed, a.common.workers)?;
        if f1 > last.micro.f1 {
            eprintln!("keeping step {step} (dev F1 {f1:.4} > final {:.4})", last.micro.f1);
            model = m;
        }
    }
    let ck = Checkpoint {
        step: history.len(),
        model,
        seed: a.common.seed,
        loss_history: history,
    };
    ck.save(&a.out)?;
    write_atomic(&a.out.join("losses.csv"), loss_csv(&ck.loss_history).as_bytes())?;
    run.config = serde_json::json!({ "run": config, "variant": variant });
    run.output(&a.out);
    run.finish(&a.out)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut run = Run::new("eval", a.common.seed);
    let ck = Checkpoint::load(&a.checkpoint)?;
    run.input(&a.checkpoint)?;
    let episodes = read_episodes(&a.episodes)?;
    run.input(&a.episodes)?;
    let (report, predictions) = evaluate_with_workers(&ck.model, &episodes, &a.variant, a.common.seed, a.common.workers)?;
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    write_atomic(&a.out, format!("{json}\n").as_bytes())?;
    run.output(&a.out);
    if let Some(path) = &a.predictions {
        write_jsonl(path, &prediction_records(&episodes, &predictions))?;
        run.output(path);
    }
    run.config = serde_json::json!({ "variant": a.variant, "model": ck.model.config });
    run.finish(&a.out)
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let mut run = Run::new("ablate", a.common.seed);
    let config = load_config(&a.config)?;
    let corpus = read_corpus(&a.corpus)?;
    let train = read_episodes(&a.train_episodes)?;
    let test = read_episodes(&a.test_episodes)?;
    for p in [&a.corpus, &a.train_episodes, &a.test_episodes] {
        run.input(p)?;
    }
    let variants = if a.variants.is_empty() { Variant::ALL.to_vec() } else { a.variants.clone() };
    let seeds = if a.seeds.is_empty() { vec![a.common.seed] } else { a.seeds.clone() };
    let bench = Benchmark {
        train_corpus: &corpus,
        train_episodes: &train,
        test_episodes: &test,
    };
    let reports = run_ablation(&bench, &config, &variants, &seeds, |r| {
        eprintln!("{} seed {}: micro F1 {:.4}", r.variant, r.seed, r.micro.f1);
    })?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let metrics = a.out.join("metrics.jsonl");
    write_jsonl(&metrics, &reports)?;
    let csv = a.out.join("comparison.csv");
    write_atomic(&csv, comparison_csv(&reports).as_bytes())?;
    print!("{}", comparison_csv(&reports));
    run.output(&metrics);
    run.output(&csv);
    run.config = serde_json::json!({
        "run": config,
        "variants": variants.iter().map(|v| v.name()).collect::<Vec<_>>(),
        "seeds": seeds,
    });
    run.finish(&a.out)
}

fn cmd_dump_reps(a: DumpArgs) -> Result<()> {
    let mut run = Run::new("dump-reps", a.common.seed);
    let ck = Checkpoint::load(&a.checkpoint)?;
    run.input(&a.checkpoint)?;
    let episodes = read_episodes(&a.episodes)?;
    run.input(&a.episodes)?;
    write_jsonl(&a.out, &representation_records(&ck.model, &episodes)?)?;
    run.output(&a.out);
    run.finish(&a.out)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_)) => 2,
        Some(
            Error::Parse { .. }
            | Error::Validation(_)
            | Error::SamplingExhausted(_)
            | Error::InvalidInput(_)
            | Error::Checkpoint(_)
            | Error::Io { .. }
            | Error::Json(_),
        ) => 3,
        None => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::SampleEpisodes(a) => cmd_sample(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::DumpReps(a) => cmd_dump_reps(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(64) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

