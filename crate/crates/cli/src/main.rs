use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mixdiff_core::eval::{bench_cache, eval_gen, eval_und, threshold_sweep, CacheWorkload, UndMode};
use mixdiff_core::flow::{euler_sample, export_latents, ConditionedField, EulerPlan, DEFAULT_STEPS};
use mixdiff_core::length::DecodeConfig;
use mixdiff_core::model::{Checkpoint, MixtureModel};
use mixdiff_core::report::report;
use mixdiff_core::synth::{gen_prompt_for, Corpus, SampleKind, WorldSpec};
use mixdiff_core::train::{read_metrics, MetricsRecord, TrainConfig, Trainer, METRICS_HEADER};
use mixdiff_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "mixdiff", about = "Train and probe a mixture-of-diffusion toy backbone")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic corpus directory.
    GenData(GenData),
    /// Train from a key=value config, optionally resuming a checkpoint.
    Train(Train),
    /// Decode held-out answers and score them.
    EvalUnd(EvalUnd),
    /// Sample latents for captions; optionally score them per class.
    SampleLatent(SampleLatent),
    /// Time decoding with and without the prefix cache.
    BenchCache(BenchCache),
    /// Sweep the confidence threshold on a fixed workload.
    BenchThreshold(BenchThreshold),
    /// Summarise metrics files.
    Report(Report),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50_000)]
    und: usize,
    #[arg(long, default_value_t = 50_000)]
    gen: usize,
    #[arg(long, default_value_t = 10_000)]
    inter: usize,
    /// key=value overrides of the synthetic world.
    #[arg(long)]
    world: Option<PathBuf>,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra key=value settings applied after the config file.
    #[arg(long = "set")]
    sets: Vec<String>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Append metrics records here instead of printing them.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct EvalUnd {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated block lengths; one record each.
    #[arg(long, default_value = "64", value_delimiter = ',')]
    block_len: Vec<usize>,
    #[arg(long, default_value_t = 0.95)]
    threshold: f64,
    #[arg(long, default_value_t = 8)]
    max_blocks: usize,
    /// Decode one block of the reference length instead.
    #[arg(long)]
    known_length: bool,
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct SampleLatent {
    #[command(flatten)]
    common: Common,
    /// Caption class; all classes when omitted.
    #[arg(long)]
    caption: Option<usize>,
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Tab-separated latent rows for plotting.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Score samples of every class against the true components.
    #[arg(long)]
    eval: bool,
    /// World the checkpoint was trained on.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct BenchCache {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "0,64,128,256,512", value_delimiter = ',')]
    prefixes: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    block_len: usize,
    #[arg(long, default_value_t = 2)]
    blocks: usize,
    #[arg(long, default_value_t = 8)]
    passes: usize,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
}

#[derive(Args)]
struct BenchThreshold {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "0.2,0.4,0.6,0.8,0.9,1.0", value_delimiter = ',')]
    thresholds: Vec<f64>,
    #[arg(long, default_value_t = 64)]
    block_len: usize,
    #[arg(long, default_value_t = 8)]
    max_blocks: usize,
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct Report {
    /// Metrics files to summarise.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Directory for plot-data files.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn emit(path: Option<&Path>, records: &[MetricsRecord]) -> Result<()> {
    match path {
        Some(p) => {
            let mut f = std::fs::OpenOptions::new().create(true).append(true).open(p)?;
            if f.metadata()?.len() == 0 {
                writeln!(f, "{METRICS_HEADER}")?;
            }
            for r in records {
                writeln!(f, "{}", r.to_line())?;
            }
        }
        None => {
            for r in records {
                println!("{}", r.to_line());
            }
        }
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<MixtureModel> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(ck.to_model()?)
}

fn load_corpus(dir: &Path) -> Result<Corpus> {
    Corpus::load(dir).with_context(|| format!("loading corpus {}", dir.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData(a) => {
            let spec = match &a.world {
                Some(p) => WorldSpec::from_kv(&std::fs::read_to_string(p)?)?,
                None => WorldSpec::default(),
            };
            let corpus = Corpus::generate(&spec, a.seed, [a.und, a.gen, a.inter])?;
            corpus.save(&a.out)?;
            eprintln!("wrote {} samples to {}", corpus.samples.len(), a.out.display());
        }
        Cmd::Train(a) => {
            let mut text = match &a.config {
                Some(p) => std::fs::read_to_string(p)?,
                None => String::new(),
            };
            for s in &a.sets {
                text.push('\n');
                text.push_str(s);
            }
            let cfg = TrainConfig::from_kv(&text)?;
            let corpus = load_corpus(&a.data)?;
            std::fs::create_dir_all(&a.out)?;
            let mut tr = match &a.resume {
                Some(p) => Trainer::resume(cfg, &Checkpoint::load(p)?, &corpus)?,
                None => Trainer::new(cfg, &corpus)?,
            };
            std::fs::write(a.out.join("train_config.txt"), tr.cfg.to_kv())?;
            tr.run(Some(&a.out), |r| {
                let step: usize = r.get("step").and_then(|s| s.parse().ok()).unwrap_or(0);
                if step % 50 == 0 {
                    eprintln!("{}", r.to_line());
                }
            })?;
        }
        Cmd::EvalUnd(a) => {
            let model = load_model(&a.common.checkpoint)?;
            let corpus = load_corpus(&a.data)?;
            let samples: Vec<_> = corpus.of_kind(SampleKind::Und).take(a.limit.unwrap_or(usize::MAX)).collect();
            let mut recs = Vec::new();
            if a.known_length {
                let e = eval_und(&model, &samples, UndMode::KnownLength { threshold: a.threshold })?;
                recs.push(e.to_record("eval_und").with_f("threshold", a.threshold));
            } else {
                for &l in &a.block_len {
                    let cfg = DecodeConfig {
                        block_len: l,
                        threshold: a.threshold,
                        max_blocks: a.max_blocks,
                    };
                    let e = eval_und(&model, &samples, UndMode::Blockwise(cfg))?;
                    recs.push(
                        e.to_record("eval_len")
                            .with("block_len", l)
                            .with_f("threshold", a.threshold),
                    );
                }
            }
            emit(a.common.metrics.as_deref(), &recs)?;
        }
        Cmd::SampleLatent(a) => {
            let model = load_model(&a.common.checkpoint)?;
            let spec = match &a.data {
                Some(d) => load_corpus(d)?.spec,
                None => WorldSpec::default(),
            };
            let plan = EulerPlan::uniform(a.steps)?;
            if a.eval {
                let e = eval_gen(&model, &spec, a.n, &plan, 256, a.seed)?;
                emit(a.common.metrics.as_deref(), &[e.to_record()])?;
                if let Some(out) = &a.out {
                    let labelled: Vec<(String, Tensor)> =
                        e.latents.iter().enumerate().map(|(g, t)| (format!("class{g}"), t.clone())).collect();
                    std::fs::write(out, export_latents(&labelled))?;
                }
                return Ok(());
            }
            let classes: Vec<usize> = match a.caption {
                Some(g) if g < spec.lat_classes => vec![g],
                Some(g) => bail!("caption {g} outside 0..{}", spec.lat_classes),
                None => (0..spec.lat_classes).collect(),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let mut labelled = Vec::new();
            for g in classes {
                let (layout, prompt) = gen_prompt_for(&spec, g);
                let mut field = ConditionedField::new(&model, &layout, &prompt, &Tensor::zeros(&[0, spec.d_lat]), true)?;
                for i in 0..a.n {
                    let z = euler_sample(&mut field, &[spec.lat_len, spec.d_lat], &plan, &mut rng)?;
                    labelled.push((format!("class{g}.{i}"), z));
                }
            }
            let text = export_latents(&labelled);
            match &a.out {
                Some(p) => std::fs::write(p, text)?,
                None => print!("{text}"),
            }
        }
        Cmd::BenchCache(a) => {
            let model = load_model(&a.common.checkpoint)?;
            let work = CacheWorkload {
                block_len: a.block_len,
                blocks: a.blocks,
                passes: a.passes,
                repeats: a.repeats,
            };
            let rows = bench_cache(&model, &a.prefixes, &work, 0)?;
            let recs: Vec<_> = rows.iter().map(|r| r.to_record()).collect();
            emit(a.common.metrics.as_deref(), &recs)?;
        }
        Cmd::BenchThreshold(a) => {
            let model = load_model(&a.common.checkpoint)?;
            let corpus = load_corpus(&a.data)?;
            let samples: Vec<_> = corpus.of_kind(SampleKind::Und).take(a.limit.unwrap_or(usize::MAX)).collect();
            let rows = threshold_sweep(&model, &samples, a.block_len, a.max_blocks, &a.thresholds)?;
            let recs: Vec<_> = rows
                .iter()
                .map(|r| {
                    r.eval
                        .to_record("threshold")
                        .with_f("threshold", r.threshold)
                        .with_f("tokens_per_sec", r.eval.tokens_per_sec())
                })
                .collect();
            emit(a.common.metrics.as_deref(), &recs)?;
        }
        Cmd::Report(a) => {
            let mut records = Vec::new();
            for p in &a.inputs {
                records.extend(read_metrics(p).with_context(|| format!("reading {}", p.display()))?);
            }
            let rep = report(&records);
            print!("{}", rep.text);
            if let Some(dir) = &a.out {
                std::fs::create_dir_all(dir)?;
                for (name, content) in &rep.plots {
                    std::fs::write(dir.join(name), content)?;
                }
            }
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
