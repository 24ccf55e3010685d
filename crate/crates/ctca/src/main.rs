use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use ctca::checkpoint::{self, write_atomic};
use ctca::config::RunConfig;
use ctca::exec::Threaded;
use ctca::formats::{self, Manifest, Source};
use ctca::harness::{self, Splits};
use ctca::pipeline::{self, TrainIo};
use ctca::{features, plot, synth};
use ctca_core::lm::perplexity;
use ctca_core::ParamStore;

/// Joint CTC/attention speech recognizer: synthetic data, subword units,
/// training, LM fusion decoding and evaluation.
///
/// Any `--section.key=value` argument overrides that config field, e.g.
/// `--train.alpha=0.1` or `--decode.beam=5`.
#[derive(Parser, Debug)]
#[command(name = "ctca", version)]
struct Cli {
    /// TOML run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for every random stream.
    #[arg(long, global = true, env = "CTCA_SEED", default_value_t = 0)]
    seed: u64,

    /// Worker threads for per-utterance gradient jobs.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Write the effective configuration (file plus overrides) here.
    #[arg(long, global = true)]
    dump_config: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write train/dev/test manifests of the synthetic spoken-word corpus.
    Synth(SynthArgs),
    /// Train a subword vocabulary on manifest transcripts or a text file.
    BpeTrain(BpeArgs),
    /// Compute log-mel features into a tensor archive.
    Featurize(FeaturizeArgs),
    /// Train the recognizer.
    Train(TrainArgs),
    /// Train the LSTM language model.
    LmTrain(LmArgs),
    /// Beam-search decode a manifest into an n-best list.
    Decode(DecodeArgs),
    /// Score an n-best list against a manifest.
    EvalWer(EvalArgs),
    /// Train and score one model per CTC weight.
    AlphaSweep(SweepArgs),
    /// Train and score the encoder-depth x CTC-branch grid.
    Ablation(AblationArgs),
    /// Render a CSV as an SVG line chart.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory for train.tsv, dev.tsv and test.tsv.
    #[arg(long)]
    out_dir: PathBuf,
    /// Also render WAV files and reference them from the manifests.
    #[arg(long)]
    wav: bool,
}

#[derive(Args, Debug)]
struct BpeArgs {
    /// Manifest whose transcripts form the corpus.
    #[arg(long, required_unless_present = "text", conflicts_with = "text")]
    manifest: Option<PathBuf>,
    /// Plain text corpus, one sentence per line.
    #[arg(long)]
    text: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FeaturizeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Add speed-perturbed copies (features.speed_factors).
    #[arg(long)]
    perturb: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training manifest (speed-perturbed per features.speed_factors).
    #[arg(long)]
    train: PathBuf,
    /// Validation manifest for the epsilon schedule.
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Checkpoint written at every validation and at the end.
    #[arg(long)]
    out: PathBuf,
    /// Metrics CSV.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Continue from a checkpoint of the same run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct LmArgs {
    /// Manifest whose transcripts form the corpus.
    #[arg(long, required_unless_present = "text", conflicts_with = "text")]
    manifest: Option<PathBuf>,
    /// Plain text corpus, one sentence per line.
    #[arg(long)]
    text: Option<PathBuf>,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Held-out manifest for a final perplexity report.
    #[arg(long)]
    eval: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    /// n-best TSV output.
    #[arg(long)]
    out: PathBuf,
    /// Language model for shallow fusion (weight decode.lm_weight).
    #[arg(long)]
    lm: Option<PathBuf>,
    /// Dump per-frame CTC posteriors of each utterance into this directory.
    #[arg(long)]
    posteriors: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// n-best TSV from `decode`.
    #[arg(long)]
    hyp: PathBuf,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// CSV output.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.5,1")]
    alphas: Vec<f64>,
}

#[derive(Args, Debug)]
struct AblationArgs {
    #[command(flatten)]
    split: SplitArgs,
    /// Encoder BiLSTM depths.
    #[arg(long, value_delimiter = ',', default_value = "2,3")]
    depths: Vec<usize>,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(long)]
    csv: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Columns to plot against the first (default: all others).
    #[arg(long, value_delimiter = ',')]
    columns: Vec<String>,
    #[arg(long, default_value = "")]
    title: String,
}

/// Bad invocation (exit 1) or bad data/model (exit 2).
enum Failure {
    Usage(String),
    Data(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

impl From<ctca_core::Error> for Failure {
    fn from(e: ctca_core::Error) -> Self {
        Failure::Data(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn need_file(path: &Path, flag: &str) -> Outcome {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("--{flag}: no such file {}", path.display())))
    }
}

fn need_parent(path: &Path, flag: &str) -> Outcome {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => {
            Err(Failure::Usage(format!("--{flag}: directory {} does not exist", p.display())))
        }
        _ => Ok(()),
    }
}

/// Splits `--a.b=v` config overrides from the arguments clap should see.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        if let Some(body) = a.strip_prefix("--") {
            if let Some((k, v)) = body.split_once('=') {
                if k.contains('.') {
                    overrides.push((k.to_string(), v.to_string()));
                    continue;
                }
            }
        }
        rest.push(a);
    }
    (rest, overrides)
}

fn load_config(cli: &Cli, overrides: &[(String, String)]) -> Result<RunConfig, Failure> {
    let text = match &cli.config {
        Some(p) => {
            need_file(p, "config")?;
            Some(std::fs::read_to_string(p).map_err(|e| Failure::Usage(format!("--config: {e}")))?)
        }
        None => None,
    };
    let cfg = RunConfig::load(text.as_deref(), overrides).map_err(|e| Failure::Usage(format!("{e:#}")))?;
    if let Some(p) = &cli.dump_config {
        need_parent(p, "dump-config")?;
        write_atomic(p, cfg.to_toml().as_bytes())?;
    }
    Ok(cfg)
}

fn transcripts(manifest: Option<&PathBuf>, text: Option<&PathBuf>) -> anyhow::Result<Vec<String>> {
    if let Some(m) = manifest {
        return Ok(Manifest::load(m)?.entries.into_iter().map(|e| e.transcript).collect());
    }
    let path = text.context("no corpus given")?;
    let body = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(body.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect())
}

fn cmd_synth(cfg: &RunConfig, seed: u64, a: &SynthArgs) -> Outcome {
    if !a.out_dir.is_dir() {
        std::fs::create_dir_all(&a.out_dir).map_err(|e| Failure::Usage(format!("--out-dir: {e}")))?;
    }
    let corpus = synth::synth_corpus(&cfg.synth, seed)?;
    for (name, utts) in [("train", &corpus.train), ("dev", &corpus.dev), ("test", &corpus.test)] {
        let mut m = pipeline::synth_manifest(&cfg.synth, seed, utts);
        if a.wav {
            let dir = a.out_dir.join("wav");
            std::fs::create_dir_all(&dir).context("creating wav directory")?;
            for e in &mut m.entries {
                let w = synth::render(&cfg.synth, seed, &e.id, &e.transcript)?;
                let rel = PathBuf::from("wav").join(format!("{}.wav", e.id));
                features::write_wav(&a.out_dir.join(&rel), &w)?;
                e.source = Source::Wav(rel);
            }
            m.synth.clear();
        }
        write_atomic(&a.out_dir.join(format!("{name}.tsv")), m.render().as_bytes())?;
    }
    println!(
        "wrote {} train / {} dev / {} test utterances to {}",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        a.out_dir.display()
    );
    Ok(())
}

fn cmd_bpe(cfg: &RunConfig, a: &BpeArgs) -> Outcome {
    if let Some(m) = &a.manifest {
        need_file(m, "manifest")?;
    }
    if let Some(t) = &a.text {
        need_file(t, "text")?;
    }
    need_parent(&a.out, "out")?;
    let corpus = transcripts(a.manifest.as_ref(), a.text.as_ref())?;
    let vocab = pipeline::train_vocab(&corpus, cfg.bpe.units)?;
    write_atomic(&a.out, formats::render_vocab(&vocab).as_bytes())?;
    println!("{} units ({} merges)", vocab.len(), vocab.merges().len());
    Ok(())
}

fn cmd_featurize(cfg: &RunConfig, a: &FeaturizeArgs) -> Outcome {
    need_file(&a.manifest, "manifest")?;
    need_parent(&a.out, "out")?;
    let m = Manifest::load(&a.manifest)?;
    let feats = pipeline::featurize(&m, cfg, a.perturb)?;
    let mut store = ParamStore::new();
    for f in &feats {
        store.insert(&f.id, f.features.clone());
    }
    checkpoint::save(&a.out, &store)?;
    println!("{} feature sequences", feats.len());
    Ok(())
}

fn cmd_train(cfg: &RunConfig, seed: u64, threads: usize, a: &TrainArgs) -> Outcome {
    need_file(&a.train, "train")?;
    need_file(&a.dev, "dev")?;
    need_file(&a.vocab, "vocab")?;
    if let Some(r) = &a.resume {
        need_file(r, "resume")?;
    }
    need_parent(&a.out, "out")?;
    if let Some(m) = &a.metrics {
        need_parent(m, "metrics")?;
    }
    let vocab = formats::load_vocab(&a.vocab)?;
    let train = pipeline::featurize(&Manifest::load(&a.train)?, cfg, true)?;
    let dev = pipeline::featurize(&Manifest::load(&a.dev)?, cfg, false)?;
    let io = TrainIo { checkpoint: Some(a.out.clone()), metrics: a.metrics.clone(), resume: a.resume.clone() };
    let (_, history) = pipeline::train_asr(
        cfg,
        &vocab,
        pipeline::to_utterances(&train, &vocab),
        pipeline::to_utterances(&dev, &vocab),
        seed,
        &Threaded::new(threads),
        &io,
    )?;
    if let Some(m) = history.last() {
        println!("iteration {} val_acc {:.4} train_loss {:.4}", m.iteration, m.val_acc, m.train_loss);
    }
    Ok(())
}

fn cmd_lm(cfg: &RunConfig, seed: u64, a: &LmArgs) -> Outcome {
    if let Some(m) = &a.manifest {
        need_file(m, "manifest")?;
    }
    if let Some(t) = &a.text {
        need_file(t, "text")?;
    }
    if let Some(e) = &a.eval {
        need_file(e, "eval")?;
    }
    need_file(&a.vocab, "vocab")?;
    need_parent(&a.out, "out")?;
    let vocab = formats::load_vocab(&a.vocab)?;
    let corpus = transcripts(a.manifest.as_ref(), a.text.as_ref())?;
    let (lm, log) = pipeline::train_lm(&cfg.lm, &vocab, &corpus, seed)?;
    for e in &log {
        println!("epoch {} lr {:.4} loss {:.4}", e.epoch, e.lr, e.loss);
    }
    pipeline::save_lm(&a.out, &lm, &cfg.lm, &vocab)?;
    if let Some(e) = &a.eval {
        let held: Vec<String> = Manifest::load(e)?.entries.into_iter().map(|e| e.transcript).collect();
        let ppl = perplexity(&lm, &pipeline::lm_corpus(&held, &vocab))?;
        println!("held-out perplexity {ppl:.4}");
    }
    Ok(())
}

fn cmd_decode(cfg: &RunConfig, a: &DecodeArgs) -> Outcome {
    let ckpt = a.checkpoint.as_ref().ok_or_else(|| Failure::Usage("--checkpoint is required".into()))?;
    need_file(ckpt, "checkpoint")?;
    need_file(&a.manifest, "manifest")?;
    if let Some(l) = &a.lm {
        need_file(l, "lm")?;
    }
    need_parent(&a.out, "out")?;
    if let Some(d) = &a.posteriors {
        std::fs::create_dir_all(d).map_err(|e| Failure::Usage(format!("--posteriors: {e}")))?;
    }
    let (model, trained, vocab) = pipeline::load_model(ckpt)?;
    let lm = match &a.lm {
        Some(p) => {
            let (lm, lm_vocab) = pipeline::load_lm(p)?;
            if lm_vocab != vocab {
                return Err(Failure::Data(anyhow::anyhow!("LM and recognizer use different vocabularies")));
            }
            Some(lm)
        }
        None => None,
    };
    // features must match training; search settings come from this run
    let mut fcfg = cfg.clone();
    fcfg.features = trained.features.clone();
    let feats = pipeline::featurize(&Manifest::load(&a.manifest)?, &fcfg, false)?;
    let dcfg = cfg.decode.to_decode();
    let tokens = pipeline::search_tokens(&vocab);
    let mut out = format!("{}\n", formats::NBEST_HEADER);
    for f in &feats {
        let hyps = pipeline::decode_features(&model, lm.as_ref(), &f.features, &tokens, &dcfg)?;
        for (rank, h) in hyps.iter().take(cfg.decode.nbest.max(1)).enumerate() {
            let text = pipeline::hypothesis_text(h, &vocab)?;
            out.push_str(&formats::nbest_line(&f.id, rank + 1, h, &text));
            out.push('\n');
        }
        if let Some(d) = &a.posteriors {
            let q = model.ctc_posteriors(&model.encode(&f.features)?)?;
            write_atomic(&d.join(format!("{}.post", f.id)), formats::render_posteriors(&q).as_bytes())?;
        }
    }
    write_atomic(&a.out, out.as_bytes())?;
    println!("decoded {} utterances", feats.len());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Outcome {
    need_file(&a.manifest, "manifest")?;
    need_file(&a.hyp, "hyp")?;
    let m = Manifest::load(&a.manifest)?;
    let text = std::fs::read_to_string(&a.hyp).with_context(|| format!("reading {}", a.hyp.display()))?;
    let hyps = formats::parse_nbest_best(&text)?;
    let r = pipeline::score_hypotheses(&m, &hyps)?;
    println!(
        "WER {:.2}% ({} errors / {} words: S={} I={} D={})",
        100.0 * r.wer(),
        r.errors(),
        r.ref_words,
        r.substitutions,
        r.insertions,
        r.deletions
    );
    Ok(())
}

fn load_splits(cfg: &RunConfig, s: &SplitArgs) -> Result<Splits, Failure> {
    need_file(&s.train, "train")?;
    need_file(&s.dev, "dev")?;
    need_file(&s.test, "test")?;
    need_parent(&s.out, "out")?;
    Ok(Splits::load(&Manifest::load(&s.train)?, &Manifest::load(&s.dev)?, &Manifest::load(&s.test)?, cfg)?)
}

fn cmd_sweep(cfg: &RunConfig, seed: u64, threads: usize, a: &SweepArgs) -> Outcome {
    if let Some(bad) = a.alphas.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Failure::Usage(format!("--alphas: {bad} is outside [0, 1]")));
    }
    let data = load_splits(cfg, &a.split)?;
    let rows = harness::alpha_sweep(&data, cfg, &a.alphas, seed, &Threaded::new(threads))?;
    let csv = harness::alpha_csv(&rows);
    write_atomic(&a.split.out, csv.as_bytes())?;
    print!("{csv}");
    match harness::interior_alpha_wins(&rows) {
        Some(true) => println!("an interior alpha matches or beats both endpoints"),
        Some(false) => println!("no interior alpha beats the better endpoint"),
        None => {}
    }
    Ok(())
}

fn cmd_ablation(cfg: &RunConfig, seed: u64, threads: usize, a: &AblationArgs) -> Outcome {
    if a.depths.contains(&0) {
        return Err(Failure::Usage("--depths: depth must be at least 1".into()));
    }
    let data = load_splits(cfg, &a.split)?;
    let rows = harness::ablation_grid(&data, cfg, &a.depths, &[false, true], seed, &Threaded::new(threads))?;
    let csv = harness::ablation_csv(&rows);
    write_atomic(&a.split.out, csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn cmd_plot(a: &PlotArgs) -> Outcome {
    need_file(&a.csv, "csv")?;
    need_parent(&a.out, "out")?;
    let text = std::fs::read_to_string(&a.csv).with_context(|| format!("reading {}", a.csv.display()))?;
    let (header, rows) = formats::parse_csv(&text)?;
    let svg = plot::line_chart(&header, &rows, &a.columns, &a.title)?;
    write_atomic(&a.out, svg.as_bytes())?;
    Ok(())
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Outcome {
    let cfg = load_config(&cli, overrides)?;
    let (seed, threads) = (cli.seed, cli.threads.max(1));
    match &cli.cmd {
        Cmd::Synth(a) => cmd_synth(&cfg, seed, a),
        Cmd::BpeTrain(a) => cmd_bpe(&cfg, a),
        Cmd::Featurize(a) => cmd_featurize(&cfg, a),
        Cmd::Train(a) => cmd_train(&cfg, seed, threads, a),
        Cmd::LmTrain(a) => cmd_lm(&cfg, seed, a),
        Cmd::Decode(a) => cmd_decode(&cfg, a),
        Cmd::EvalWer(a) => cmd_eval(a),
        Cmd::AlphaSweep(a) => cmd_sweep(&cfg, seed, threads, a),
        Cmd::Ablation(a) => cmd_ablation(&cfg, seed, threads, a),
        Cmd::Plot(a) => cmd_plot(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let head = msg.split("\nUsage:").next().unwrap_or(&msg);
            let line = head.split_whitespace().collect::<Vec<_>>().join(" ");
            eprintln!("{line} (see --help)");
            return ExitCode::from(1);
        }
    };
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {}", m.split_whitespace().collect::<Vec<_>>().join(" "));
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
