use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use spantrans::bench::{bench_decode, write_rows_csv, write_summary_csv, BenchConfig};
use spantrans::checkpoint::{ensure_scheme, load_checkpoint};
use spantrans::corpus::{
    load_corpus, load_embeddings, load_static_embeddings, pool_subwords, subword_align,
    write_corpus, AnnotatedSentence, LabelSet, WhitespaceTokenizer,
};
use spantrans::decode::{predict_corpus, read_predictions, write_predictions, DecodeConfig};
use spantrans::eval::{classify_errors, save_report_csv, score, write_errors_csv};
use spantrans::linearize::{delinearize, linearize, Scheme};
use spantrans::selfcheck::{automaton_equivalence, gradient_check, random_fixture};
use spantrans::synth::{gen_synthetic, SynthConfig};
use spantrans::train::{sentence_seed, train, train_model, TrainConfig};

#[derive(Parser)]
#[command(name = "spantrans", version, about = "Nested span extraction as pointer/copy/label transduction")]
struct Cli {
    /// Worker threads; defaults to all cores, except for `bench` which uses one.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Subword-align a corpus and attach embeddings, or generate a synthetic one.
    Prep(PrepArgs),
    /// Print the decision sequence of every sentence, verifying the round trip.
    Linearize(LinearizeArgs),
    /// Train a model and write the best checkpoint.
    Train(TrainArgs),
    /// Decode a corpus with a checkpoint into JSON-lines predictions.
    Predict(PredictArgs),
    /// Score predictions against gold spans.
    Eval(EvalArgs),
    /// Time single-worker decoding against sentence length.
    Bench(BenchArgs),
    /// Run the automaton equivalence and gradient oracles.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args)]
struct PrepArgs {
    /// Corpus to process (JSON lines).
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    input: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    /// Contextual vectors keyed by sentence id, one per subword.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Static word vectors (`V E` header, then `token v1 .. vE`).
    #[arg(long, conflicts_with = "embeddings")]
    static_embeddings: Option<PathBuf>,
    /// Mean-pool subword vectors back to the original tokens.
    #[arg(long, requires = "embeddings")]
    pool: bool,
    /// Generate this many synthetic sentences instead of reading a corpus.
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[arg(long, default_value_t = 6)]
    min_len: usize,
    #[arg(long, default_value_t = 24)]
    max_len: usize,
    #[arg(long, default_value_t = 4)]
    atomic_labels: usize,
    #[arg(long, default_value_t = 2)]
    composite_kinds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct LinearizeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "copynext")]
    scheme: Scheme,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Prefix every line with the sentence id and a tab.
    #[arg(long)]
    with_ids: bool,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Where the best checkpoint is written.
    #[arg(long)]
    checkpoint: PathBuf,
    /// TOML file with any `TrainConfig` keys; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Contextual vectors covering both train and dev sentence ids.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Write the training report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Continue from this checkpoint instead of a fresh initialization.
    /// Its architecture, labels and vocabulary are kept.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    scheme: Option<Scheme>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    eval_interval: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Wall-clock budget in seconds.
    #[arg(long)]
    time_limit: Option<f64>,
    #[arg(long)]
    target_f1: Option<f64>,
}

#[derive(Args)]
struct DecodeArgs {
    /// Defaults to the checkpoint's scheme; any other value is refused.
    #[arg(long)]
    scheme: Option<Scheme>,
    #[arg(long, default_value_t = 1)]
    beam: usize,
    /// Decision budget per sentence (default 8 × tokens).
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    /// Metrics CSV (`scope,label,gold,predicted,matched,precision,recall,f1`).
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Error records CSV (`id,type,gold,pred`).
    #[arg(long)]
    errors: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus to time; omit to generate synthetic sentences of lengths
    /// `--min-tokens..=--max-tokens` in steps of `--step`.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    min_tokens: usize,
    #[arg(long, default_value_t = 200)]
    max_tokens: usize,
    #[arg(long, default_value_t = 1)]
    step: usize,
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Per-sentence timings (`id,tokens,decisions,spans,truncated,seconds`).
    #[arg(long)]
    csv: PathBuf,
    /// One-row summary with fit coefficients.
    #[arg(long)]
    summary: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args)]
struct SelfcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Gradient-check fixtures per layer count.
    #[arg(long, default_value_t = 3)]
    fixtures: usize,
}

fn read_corpus(path: &Path, embeddings: Option<&Path>) -> Result<Vec<AnnotatedSentence>> {
    let mut corpus = load_corpus(path).with_context(|| format!("reading corpus {}", path.display()))?;
    if let Some(e) = embeddings {
        load_embeddings(e, &mut corpus).with_context(|| format!("attaching embeddings from {}", e.display()))?;
    }
    Ok(corpus)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn prep(a: PrepArgs) -> Result<()> {
    if let Some(count) = a.synthetic {
        let cfg = SynthConfig {
            sentences: count,
            atomic_labels: a.atomic_labels,
            composite_kinds: a.composite_kinds,
            max_depth: a.depth,
            min_len: a.min_len,
            max_len: a.max_len,
            seed: a.seed,
        };
        if cfg.max_depth == 0 || cfg.min_len == 0 || cfg.min_len > cfg.max_len {
            bail!("synthetic corpus needs depth ≥ 1 and 1 ≤ min-len ≤ max-len");
        }
        write_corpus(&a.output, &gen_synthetic(&cfg))?;
        eprintln!("wrote {count} synthetic sentences to {}", a.output.display());
        return Ok(());
    }
    let input = a.input.expect("clap enforces input or synthetic");
    let corpus = load_corpus(&input).with_context(|| format!("reading corpus {}", input.display()))?;
    let mut aligned = Vec::with_capacity(corpus.len());
    let mut maps = Vec::with_capacity(corpus.len());
    for s in &corpus {
        let (al, map) = subword_align(s, &WhitespaceTokenizer)?;
        aligned.push(al);
        maps.push(map);
    }
    if let Some(e) = &a.embeddings {
        let dim = load_embeddings(e, &mut aligned)?;
        eprintln!("attached {dim}-dimensional vectors");
        if a.pool {
            for ((al, orig), map) in aligned.iter_mut().zip(&corpus).zip(&maps) {
                al.sentence = pool_subwords(&al.sentence, map)?;
                al.spans = orig.spans.clone();
            }
        }
    }
    if let Some(s) = &a.static_embeddings {
        let table = load_static_embeddings(s)?;
        let missing: usize = aligned.iter_mut().map(|al| table.attach(&mut al.sentence)).sum();
        eprintln!("attached {}-dimensional static vectors, {missing} tokens not in the table", table.dim);
    }
    write_corpus(&a.output, &aligned)?;
    Ok(())
}

fn linearize_cmd(a: LinearizeArgs) -> Result<()> {
    let corpus = load_corpus(&a.input)?;
    let labels = LabelSet::from_corpus(&corpus)?;
    let mut out = output(a.output.as_deref())?;
    for (i, s) in corpus.iter().enumerate() {
        let n = s.sentence.len();
        let seq = linearize(&s.spans, n, a.scheme, sentence_seed(a.seed, i), &labels)?;
        let mut back = delinearize(&seq, n, a.scheme, &labels)?;
        let mut gold = s.spans.clone();
        back.sort();
        gold.sort();
        gold.dedup();
        if back != gold {
            bail!("round trip failed for sentence {}", s.id());
        }
        if a.with_ids {
            write!(out, "{}\t", s.id())?;
        }
        writeln!(out, "{}", seq.to_printed(&labels))?;
    }
    out.flush()?;
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    macro_rules! flag {
        ($($f:ident => $field:ident),*) => { $( if let Some(v) = a.$f { cfg.$field = v; } )* };
    }
    flag!(scheme => scheme, layers => layers, hidden => hidden, seed => seed, epochs => epochs,
          batch_size => batch_size, lr => learning_rate, clip => clip_norm, patience => patience,
          eval_interval => eval_interval, dropout => dropout, embed_dim => embed_dim);
    if a.time_limit.is_some() {
        cfg.time_limit = a.time_limit;
    }
    if a.target_f1.is_some() {
        cfg.target_f1 = a.target_f1;
    }
    cfg.validate()?;
    eprintln!("# training configuration\n{}", cfg.to_toml());

    let train_set = read_corpus(&a.train, a.embeddings.as_deref())?;
    let dev = match &a.dev {
        Some(p) => read_corpus(p, a.embeddings.as_deref())?,
        None => Vec::new(),
    };
    let report = match &a.init {
        Some(p) => {
            let mut model =
                load_checkpoint(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
            ensure_scheme(&model, cfg.scheme)?;
            train_model(&mut model, &train_set, &dev, &cfg, Some(&a.checkpoint))?
        }
        None => train(&train_set, &dev, &cfg, Some(&a.checkpoint))?.1,
    };
    eprint!("{report}");
    if let Some(p) = &a.report {
        let json = serde_json::to_string_pretty(&report)?;
        std::fs::write(p, json).with_context(|| format!("writing {}", p.display()))?;
    }
    eprintln!("checkpoint: {}", a.checkpoint.display());
    Ok(())
}

fn decode_config(model_scheme: Scheme, a: &DecodeArgs) -> Result<DecodeConfig> {
    let cfg = DecodeConfig {
        beam: a.beam,
        max_len: a.max_len,
        scheme: a.scheme.unwrap_or(model_scheme),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn predict_cmd(a: PredictArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let cfg = decode_config(model.scheme(), &a.decode)?;
    ensure_scheme(&model, cfg.scheme)?;
    let corpus = read_corpus(&a.input, a.embeddings.as_deref())?;
    let sents: Vec<_> = corpus.iter().map(|s| &s.sentence).collect();
    let preds = predict_corpus(&model, sents, &cfg)?;
    write_predictions(&a.output, &preds)?;
    eprintln!("wrote {} predictions to {}", preds.len(), a.output.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let gold = load_corpus(&a.gold)?;
    let pred = read_predictions(&a.pred)?;
    let report = score(&gold, &pred)?;
    print!("{report}");
    if let Some(p) = &a.csv {
        save_report_csv(&report, p)?;
    }
    if let Some(p) = &a.errors {
        let records = classify_errors(&gold, &pred)?;
        write_errors_csv(&records, File::create(p).with_context(|| format!("creating {}", p.display()))?)?;
    }
    Ok(())
}

fn bench_cmd(a: BenchArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let cfg = decode_config(model.scheme(), &a.decode)?;
    ensure_scheme(&model, cfg.scheme)?;
    let corpus = match &a.input {
        Some(p) => read_corpus(p, a.embeddings.as_deref())?,
        None => {
            if a.step == 0 || a.min_tokens == 0 || a.min_tokens > a.max_tokens {
                bail!("need 1 ≤ min-tokens ≤ max-tokens and step ≥ 1");
            }
            (a.min_tokens..=a.max_tokens)
                .step_by(a.step)
                .flat_map(|n| {
                    gen_synthetic(&SynthConfig {
                        sentences: 1,
                        max_depth: a.depth,
                        min_len: n,
                        max_len: n,
                        seed: a.seed.wrapping_add(n as u64),
                        ..SynthConfig::default()
                    })
                })
                .collect()
        }
    };
    let sents: Vec<_> = corpus.into_iter().map(|s| s.sentence).collect();
    let report = bench_decode(
        &model,
        &sents,
        &BenchConfig {
            decode: cfg,
            warmup: a.warmup,
            repeats: a.repeats,
        },
    )?;
    write_rows_csv(&report, File::create(&a.csv).with_context(|| format!("creating {}", a.csv.display()))?)?;
    if let Some(p) = &a.summary {
        write_summary_csv(&report, File::create(p).with_context(|| format!("creating {}", p.display()))?)?;
    }
    println!(
        "{} sentences, {:.1} sentences/s, {:.0} decisions/s, slope {:.3e} s/token, quadratic share at max N {:.2}%, spearman {:.3}",
        report.rows.len(),
        report.sentences_per_sec,
        report.decisions_per_sec,
        report.slope,
        100.0 * report.quadratic_share,
        report.spearman
    );
    let truncated = report.rows.iter().filter(|r| r.truncated).count();
    if truncated > 0 {
        println!("{truncated} sentences hit the decision budget");
    }
    Ok(())
}

fn selfcheck(a: SelfcheckArgs) -> Result<()> {
    let mut failed = false;
    for scheme in Scheme::ALL {
        let (checked, bad) = automaton_equivalence(3, 2, 6, scheme);
        let ok = bad.is_empty();
        failed |= !ok;
        println!(
            "[{}] automaton equivalence {scheme}: {checked} strings, {} discrepancies",
            if ok { "PASS" } else { "FAIL" },
            bad.len()
        );
    }
    for layers in [1, 2] {
        for k in 0..a.fixtures {
            let seed = a.seed.wrapping_add(100 * layers as u64 + k as u64);
            let scheme = Scheme::ALL[k % 3];
            let f = random_fixture(seed, layers, 8, 5, 3, scheme, 0.5)?;
            let g = gradient_check(&f.input, &f.target, &f.params, f.scheme, 1e-5)?;
            let ok = g.max_rel_error < 1e-4;
            failed |= !ok;
            println!(
                "[{}] gradient check J={layers} seed {seed} {scheme}: {} coordinates, max rel error {:.2e} at {}[{}]",
                if ok { "PASS" } else { "FAIL" },
                g.coordinates,
                g.max_rel_error,
                g.worst.0,
                g.worst.1
            );
        }
    }
    if failed {
        bail!("selfcheck failed");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let default_workers = match cli.command {
        Command::Bench(_) => Some(1),
        _ => None,
    };
    if let Some(w) = cli.workers.or(default_workers) {
        if w == 0 {
            bail!("--workers must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .context("configuring worker threads")?;
    }
    log::debug!("using {} worker threads", rayon::current_num_threads());
    match cli.command {
        Command::Prep(a) => prep(a),
        Command::Linearize(a) => linearize_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Selfcheck(a) => selfcheck(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
