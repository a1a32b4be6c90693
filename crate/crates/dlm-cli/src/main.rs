//! Command-line frontend: a single binary whose subcommands cover the
//! whole workflow — tokenize a corpus, pretrain the autoregressive base,
//! adapt it into a diffusion denoiser (or train one from scratch),
//! sample and infill, evaluate, and self-verify.
//!
//! Conventions: results and data go to stdout or `--out` paths; progress
//! and notices go to stderr. Every subcommand honors `--seed` and, when
//! it is omitted, derives one from entropy and prints it so the run can
//! be reproduced. Usage errors exit 2; runtime failures exit 1.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use dlm_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use dlm_core::data::{build_vocab, pack_sequences, split_documents, Vocab};
use dlm_core::eval::{choice_losses, distinct_n, elbo_estimate, gen_ppl_proxy, median};
use dlm_core::model::{AttentionMode, ModelConfig, ModelParams, Objective};
use dlm_core::sampler::{generate, infill, GenerationConstraint, SamplerConfig, UnmaskStrategy};
use dlm_core::train::{adapt, pretrain_ar, train_scratch, InitSpec, RunLog, TrainConfig};
use dlm_core::verify::run_all;
use dlm_core::TokenSeq;

#[derive(Parser)]
#[command(
    name = "dlm",
    version,
    about = "Train, sample, and evaluate an absorbing-state diffusion language model"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the character vocabulary for a corpus; optionally pack it
    /// into fixed-length training blocks.
    Tokenize(TokenizeArgs),
    /// Pretrain the autoregressive base model.
    TrainAr(TrainArArgs),
    /// Adapt a pretrained autoregressive checkpoint into a diffusion
    /// denoiser.
    Adapt(AdaptArgs),
    /// Train a diffusion denoiser from random initialization (the
    /// baseline the adaptation recipe is compared against).
    TrainScratch(TrainScratchArgs),
    /// Generate text by iterative denoising.
    Sample(SampleArgs),
    /// Fill a fixed-length hole between a prefix and a suffix.
    Infill(InfillArgs),
    /// Estimate the diffusion bound (nats per token) on a corpus.
    EvalElbo(EvalElboArgs),
    /// Score answer choices for a prompt and pick the most likely.
    EvalMc(EvalMcArgs),
    /// Generation-quality sweep over denoising step counts.
    EvalGen(EvalGenArgs),
    /// Run the built-in identity, oracle, gradient, equivalence,
    /// sampler, and checkpoint checks.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StrategyArg {
    /// Each masked position flips a posterior-probability coin.
    Posterior,
    /// Unmask the k most confident positions per step.
    Confidence,
}

impl From<StrategyArg> for UnmaskStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Posterior => UnmaskStrategy::Posterior,
            StrategyArg::Confidence => UnmaskStrategy::Confidence,
        }
    }
}

#[derive(Args)]
struct ModelOpts {
    /// Embedding width.
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    n_layers: usize,
    #[arg(long, default_value_t = 4)]
    n_heads: usize,
    /// Feed-forward hidden width.
    #[arg(long, default_value_t = 128)]
    d_ff: usize,
    /// Packed block length; doubles as the maximum sequence length.
    #[arg(long, default_value_t = 40)]
    block_len: usize,
}

impl ModelOpts {
    fn to_config(&self, vocab_size: usize, mode: AttentionMode) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_seq_len: self.block_len,
            vocab_size,
            mode,
        }
    }
}

#[derive(Args)]
struct TrainOpts {
    /// Keyed JSON training config; command-line flags take precedence
    /// over file values, and file values over built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    /// Steps over which attention anneals from causal to full.
    #[arg(long)]
    anneal_steps: Option<usize>,
    #[arg(long)]
    grad_accum: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    log_every: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Ablation: drop the one-slot logits shift from the objective.
    #[arg(long)]
    no_shift: bool,
}

#[derive(Args)]
struct TokenizeArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Where to write the vocabulary file.
    #[arg(long)]
    vocab_out: Option<PathBuf>,
    #[arg(long, default_value_t = 40)]
    block_len: usize,
    /// Where to write the packed blocks as JSON.
    #[arg(long)]
    blocks_out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the step log as JSON lines.
    #[arg(long)]
    log_out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelOpts,
    #[command(flatten)]
    train: TrainOpts,
}

#[derive(Args)]
struct AdaptArgs {
    /// Autoregressive checkpoint to start from.
    #[arg(long)]
    init: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log_out: Option<PathBuf>,
    #[command(flatten)]
    train: TrainOpts,
}

#[derive(Args)]
struct TrainScratchArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log_out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelOpts,
    #[command(flatten)]
    train: TrainOpts,
}

#[derive(Args)]
struct SamplerOpts {
    /// Number of denoising steps.
    #[arg(long = "T", default_value_t = 16)]
    steps: usize,
    #[arg(long, value_enum, default_value_t = StrategyArg::Posterior)]
    strategy: StrategyArg,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    top_p: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
}

impl SamplerOpts {
    fn to_config(&self, out_len: usize, seed: u64) -> SamplerConfig {
        SamplerConfig {
            steps: self.steps,
            buffer_len: out_len + 1,
            strategy: self.strategy.into(),
            top_k: self.top_k,
            top_p: self.top_p,
            temperature: self.temperature,
            seed,
        }
    }
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Output length in tokens.
    #[arg(long, default_value_t = 39)]
    len: usize,
    /// How many samples to draw.
    #[arg(long, default_value_t = 1)]
    num: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the denoising trace of the first sample as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    sampler: SamplerOpts,
}

#[derive(Args)]
struct InfillArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    prefix: String,
    #[arg(long)]
    suffix: String,
    /// Number of tokens to fill between prefix and suffix.
    #[arg(long)]
    hole_len: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    sampler: SamplerOpts,
}

#[derive(Args)]
struct EvalElboArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Time strata per block.
    #[arg(long, default_value_t = 16)]
    num_t: usize,
    /// Cap on the number of evaluated blocks.
    #[arg(long, default_value_t = 64)]
    max_blocks: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalMcArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    prompt: String,
    /// Candidate continuation; pass at least twice.
    #[arg(long = "choice")]
    choices: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalGenArgs {
    /// Diffusion checkpoint to sample from.
    #[arg(long)]
    ckpt: PathBuf,
    /// Causal checkpoint that scores the samples.
    #[arg(long)]
    scorer: PathBuf,
    /// Denoising step counts to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = [4usize, 16, 64])]
    steps: Vec<usize>,
    /// Samples per (step count, seed) cell.
    #[arg(long, default_value_t = 16)]
    num: usize,
    /// Independent sampling seeds per step count.
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    /// Sample length in tokens.
    #[arg(long, default_value_t = 32)]
    len: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the sweep as JSON in addition to the table.
    #[arg(long)]
    data_out: Option<PathBuf>,
    #[command(flatten)]
    sampler_filters: FilterOpts,
}

#[derive(Args)]
struct FilterOpts {
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    top_p: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    seed: Option<u64>,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.cmd) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Tokenize(a) => cmd_tokenize(a),
        Cmd::TrainAr(a) => cmd_train_ar(a),
        Cmd::Adapt(a) => cmd_adapt(a),
        Cmd::TrainScratch(a) => cmd_train_scratch(a),
        Cmd::Sample(a) => cmd_sample(a),
        Cmd::Infill(a) => cmd_infill(a),
        Cmd::EvalElbo(a) => cmd_eval_elbo(a),
        Cmd::EvalMc(a) => cmd_eval_mc(a),
        Cmd::EvalGen(a) => cmd_eval_gen(a),
        Cmd::Verify(a) => cmd_verify(a),
    }
}

/// `--seed` when given, otherwise a fresh entropy seed printed so the
/// run can be repeated.
fn resolve_seed(explicit: Option<u64>) -> u64 {
    match explicit {
        Some(s) => s,
        None => {
            let s: u64 = rand::random();
            eprintln!("seed not given; using --seed {s}");
            s
        }
    }
}

/// Merges defaults, the optional config file, and command-line flags (in
/// rising precedence). Unknown file keys are rejected; keys that fell
/// back to defaults are announced on stderr.
fn resolve_train_config(opts: &TrainOpts, objective: Objective) -> Result<TrainConfig> {
    let mut file_keys: BTreeSet<String> = BTreeSet::new();
    let mut cfg = TrainConfig::default();
    if let Some(path) = &opts.config {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        if let Some(map) = value.as_object() {
            file_keys = map.keys().cloned().collect();
        }
        cfg = serde_json::from_value(value)
            .with_context(|| format!("validating config {}", path.display()))?;
    }

    if file_keys.contains("objective") && cfg.objective != objective {
        bail!(
            "config file trains objective {:?}, but this subcommand trains {objective:?}",
            cfg.objective
        );
    }
    cfg.objective = objective;

    // These two belong to the subcommand, never to defaulting notices.
    let mut settled: BTreeSet<&'static str> = ["objective", "init"].into_iter().collect();
    macro_rules! take {
        ($flag:ident, $key:literal) => {
            if let Some(v) = opts.$flag {
                cfg.$flag = v;
                settled.insert($key);
            }
        };
    }
    take!(steps, "steps");
    take!(batch_size, "batch_size");
    take!(lr, "lr");
    take!(warmup_steps, "warmup_steps");
    take!(anneal_steps, "anneal_steps");
    take!(grad_accum, "grad_accum");
    take!(weight_decay, "weight_decay");
    take!(log_every, "log_every");
    if opts.no_shift {
        cfg.shift = false;
        settled.insert("shift");
    }
    if let Some(s) = opts.seed {
        cfg.seed = s;
        settled.insert("seed");
    } else if !file_keys.contains("seed") {
        cfg.seed = resolve_seed(None);
        settled.insert("seed");
    }

    // Unless pinned, the schedule lengths track the step budget at the
    // same ratios as the built-in defaults (1000/100/500).
    if !file_keys.contains("warmup_steps") && !settled.contains("warmup_steps") {
        cfg.warmup_steps = cfg.steps / 10;
        settled.insert("warmup_steps");
        eprintln!("config: warmup_steps defaulted to steps/10 = {}", cfg.warmup_steps);
    }
    if !file_keys.contains("anneal_steps") && !settled.contains("anneal_steps") {
        cfg.anneal_steps = cfg.steps / 2;
        settled.insert("anneal_steps");
        eprintln!("config: anneal_steps defaulted to steps/2 = {}", cfg.anneal_steps);
    }

    let defaults = serde_json::to_value(TrainConfig::default())?;
    let defaulted: Vec<String> = defaults
        .as_object()
        .expect("config serializes to an object")
        .keys()
        .filter(|k| !file_keys.contains(*k) && !settled.contains(k.as_str()))
        .cloned()
        .collect();
    if !defaulted.is_empty() {
        eprintln!("config: defaulting {}", defaulted.join(", "));
    }
    cfg.validate().map_err(|e| anyhow!(e))?;
    Ok(cfg)
}

fn read_corpus(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading corpus {}", path.display()))
}

fn corpus_blocks(vocab: &Vocab, corpus: &str, block_len: usize) -> Result<Vec<TokenSeq>> {
    let docs = split_documents(corpus);
    if docs.is_empty() {
        bail!("corpus contains no documents");
    }
    let set = pack_sequences(vocab, &docs, block_len)?;
    if set.blocks.is_empty() {
        bail!("corpus packed to zero blocks");
    }
    Ok(set.blocks)
}

fn report_run(log: &RunLog) {
    if let Some(last) = log.records.last() {
        eprintln!(
            "finished: step {}, loss {:.4}, {:.4} nats/token, {:.1}s",
            last.step, last.loss, last.per_token_nats, last.wall_secs
        );
    } else {
        eprintln!("finished: no optimizer steps taken");
    }
}

fn write_log(log: &RunLog, path: &Option<PathBuf>) -> Result<()> {
    if let Some(p) = path {
        std::fs::write(p, log.to_jsonl()?)?;
        eprintln!("wrote step log to {}", p.display());
    }
    Ok(())
}

fn save_model(
    out: &Path,
    params: &ModelParams<f32>,
    train: TrainConfig,
    vocab: Vocab,
) -> Result<()> {
    let meta = CheckpointMeta {
        model: params.config.clone(),
        train: Some(train),
        vocab: Some(vocab),
    };
    save_checkpoint(out, &meta, params)?;
    eprintln!("wrote checkpoint {}", out.display());
    Ok(())
}

/// Loads a checkpoint and insists on its embedded vocabulary, which
/// sampling and evaluation need to map text to the model's token ids.
fn load_model_with_vocab(path: &Path) -> Result<(ModelParams<f32>, Vocab)> {
    let (meta, params) = load_checkpoint(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    let vocab = meta.vocab.ok_or_else(|| {
        anyhow!(
            "checkpoint {} carries no vocabulary; re-create it with the training commands",
            path.display()
        )
    })?;
    Ok((params, vocab))
}

fn cmd_tokenize(a: TokenizeArgs) -> Result<()> {
    // Tokenization is deterministic, but the seed contract (accept the
    // flag, print a derived one when absent) holds for every subcommand.
    let _ = resolve_seed(a.seed);
    let corpus = read_corpus(&a.corpus)?;
    let vocab = build_vocab(&corpus)?;
    let docs = split_documents(&corpus);
    let chars: usize = docs.iter().map(|d| d.chars().count()).sum();
    eprintln!(
        "{} documents, {} content chars, vocabulary size {}",
        docs.len(),
        chars,
        vocab.size()
    );
    if let Some(p) = &a.vocab_out {
        vocab.save(p)?;
        eprintln!("wrote vocabulary to {}", p.display());
    }
    if let Some(p) = &a.blocks_out {
        let set = pack_sequences(&vocab, &docs, a.block_len)?;
        eprintln!(
            "{} blocks of {} tokens ({} total)",
            set.blocks.len(),
            set.block_len,
            set.total_tokens()
        );
        std::fs::write(p, serde_json::to_string(&set)?)?;
        eprintln!("wrote packed blocks to {}", p.display());
    }
    Ok(())
}

fn cmd_train_ar(a: TrainArArgs) -> Result<()> {
    let cfg = resolve_train_config(&a.train, Objective::Ar)?;
    let corpus = read_corpus(&a.corpus)?;
    let vocab = build_vocab(&corpus)?;
    let blocks = corpus_blocks(&vocab, &corpus, a.model.block_len)?;
    let model_cfg = a.model.to_config(vocab.size(), AttentionMode::Causal);
    eprintln!(
        "pretraining on {} blocks of {} tokens, vocab {}",
        blocks.len(),
        a.model.block_len,
        vocab.size()
    );
    let (params, log) = pretrain_ar(&model_cfg, &blocks, &cfg)?;
    report_run(&log);
    write_log(&log, &a.log_out)?;
    save_model(&a.out, &params, cfg, vocab)
}

fn cmd_adapt(a: AdaptArgs) -> Result<()> {
    let mut cfg = resolve_train_config(&a.train, Objective::Diffusion)?;
    let (params, vocab) = load_model_with_vocab(&a.init)?;
    let corpus = read_corpus(&a.corpus)?;
    let blocks = corpus_blocks(&vocab, &corpus, params.config.max_seq_len)?;
    cfg.init = InitSpec::Checkpoint(a.init.clone());
    eprintln!(
        "adapting {} on {} blocks of {} tokens",
        a.init.display(),
        blocks.len(),
        params.config.max_seq_len
    );
    let (adapted, log) = adapt(params, &blocks, &cfg)?;
    report_run(&log);
    write_log(&log, &a.log_out)?;
    save_model(&a.out, &adapted, cfg, vocab)
}

fn cmd_train_scratch(a: TrainScratchArgs) -> Result<()> {
    let cfg = resolve_train_config(&a.train, Objective::Diffusion)?;
    let corpus = read_corpus(&a.corpus)?;
    let vocab = build_vocab(&corpus)?;
    let blocks = corpus_blocks(&vocab, &corpus, a.model.block_len)?;
    let model_cfg = a.model.to_config(vocab.size(), AttentionMode::Causal);
    eprintln!(
        "training from scratch on {} blocks of {} tokens, vocab {}",
        blocks.len(),
        a.model.block_len,
        vocab.size()
    );
    let (params, log) = train_scratch(&model_cfg, &blocks, &cfg)?;
    report_run(&log);
    write_log(&log, &a.log_out)?;
    save_model(&a.out, &params, cfg, vocab)
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let seed = resolve_seed(a.seed);
    let (params, vocab) = load_model_with_vocab(&a.ckpt)?;
    if matches!(params.config.mode, AttentionMode::Causal) {
        eprintln!("note: model was trained causal; sampling still uses full attention");
    }
    let mut trace_out = None;
    for i in 0..a.num {
        let cfg = a.sampler.to_config(a.len, seed.wrapping_add(i as u64));
        let (out, trace) = generate(&params, &cfg, &GenerationConstraint::none())?;
        if i == 0 {
            trace_out = Some(trace);
        }
        println!("{}", vocab.decode(&out)?);
    }
    if let (Some(path), Some(trace)) = (&a.trace, &trace_out) {
        std::fs::write(path, trace.export_lines()?)?;
        eprintln!("wrote denoising trace to {}", path.display());
    }
    Ok(())
}

fn cmd_infill(a: InfillArgs) -> Result<()> {
    let seed = resolve_seed(a.seed);
    let (params, vocab) = load_model_with_vocab(&a.ckpt)?;
    let prefix = vocab.encode(&a.prefix)?;
    let suffix = vocab.encode(&a.suffix)?;
    let out_len = prefix.ids.len() + a.hole_len + suffix.ids.len();
    let cfg = a.sampler.to_config(out_len, seed);
    let fill = infill(&params, &prefix, &suffix, a.hole_len, &cfg)?;
    eprintln!("filled {} tokens between prefix and suffix", a.hole_len);
    println!("{}{}{}", a.prefix, vocab.decode(&fill)?, a.suffix);
    Ok(())
}

fn cmd_eval_elbo(a: EvalElboArgs) -> Result<()> {
    let seed = resolve_seed(a.seed);
    let (params, vocab) = load_model_with_vocab(&a.ckpt)?;
    let corpus = read_corpus(&a.corpus)?;
    let blocks = corpus_blocks(&vocab, &corpus, params.config.max_seq_len)?;
    let take = blocks.len().min(a.max_blocks);
    if take < blocks.len() {
        eprintln!("evaluating the first {take} of {} blocks", blocks.len());
    }
    let mut sum = 0.0;
    let mut var = 0.0;
    for (i, block) in blocks[..take].iter().enumerate() {
        let rep = elbo_estimate(&params, block, a.num_t, seed.wrapping_add(i as u64))?;
        sum += rep.nats_per_token;
        var += rep.standard_error * rep.standard_error;
    }
    let report = serde_json::json!({
        "blocks": take,
        "num_t_samples": a.num_t,
        "nats_per_token": sum / take as f64,
        "standard_error": var.sqrt() / take as f64,
    });
    println!("{report}");
    Ok(())
}

fn cmd_eval_mc(a: EvalMcArgs) -> Result<()> {
    let seed = resolve_seed(a.seed);
    if a.choices.len() < 2 {
        bail!("pass --choice at least twice");
    }
    let (params, vocab) = load_model_with_vocab(&a.ckpt)?;
    let prompt = vocab.encode(&a.prompt)?;
    let choices = a
        .choices
        .iter()
        .map(|c| vocab.encode(c))
        .collect::<dlm_core::Result<Vec<_>>>()?;
    for (i, c) in choices.iter().enumerate() {
        if c.ids.is_empty() {
            eprintln!("warning: choice {i} is empty and will never be picked");
        }
    }
    let losses = choice_losses(&params, &prompt, &choices, seed)?;
    let picked = losses
        .iter()
        .enumerate()
        .filter(|(_, l)| l.is_finite())
        .min_by(|(_, x), (_, y)| x.partial_cmp(y).expect("finite losses"))
        .map(|(i, _)| i)
        .ok_or_else(|| anyhow!("every choice was empty"))?;
    println!("picked {picked}");
    for (i, l) in losses.iter().enumerate() {
        if l.is_finite() {
            println!("choice {i}: {l:.4} nats/token");
        } else {
            println!("choice {i}: empty (skipped)");
        }
    }
    Ok(())
}

fn cmd_eval_gen(a: EvalGenArgs) -> Result<()> {
    let seed = resolve_seed(a.seed);
    if a.steps.is_empty() || a.num == 0 || a.seeds == 0 {
        bail!("need at least one step count, one sample, and one seed");
    }
    let (params, vocab) = load_model_with_vocab(&a.ckpt)?;
    let (scorer, _) = load_model_with_vocab(&a.scorer)?;
    let _ = &vocab;

    #[derive(serde::Serialize)]
    struct Row {
        steps: usize,
        scorer_ppl_median: f64,
        scorer_ppl_per_seed: Vec<f64>,
        distinct_2: f64,
        samples: usize,
    }

    let mut rows = Vec::new();
    for &steps in &a.steps {
        let mut ppls = Vec::with_capacity(a.seeds);
        let mut all = Vec::with_capacity(a.seeds * a.num);
        for s in 0..a.seeds {
            let mut samples = Vec::with_capacity(a.num);
            for i in 0..a.num {
                let run_seed = seed
                    .wrapping_add((steps as u64) << 40)
                    .wrapping_add((s as u64) << 20)
                    .wrapping_add(i as u64);
                let cfg = SamplerConfig {
                    steps,
                    buffer_len: a.len + 1,
                    strategy: UnmaskStrategy::Posterior,
                    top_k: a.sampler_filters.top_k,
                    top_p: a.sampler_filters.top_p,
                    temperature: a.sampler_filters.temperature,
                    seed: run_seed,
                };
                let (out, _) = generate(&params, &cfg, &GenerationConstraint::none())?;
                samples.push(out);
            }
            ppls.push(gen_ppl_proxy(&scorer, &samples)?);
            all.extend(samples);
        }
        rows.push(Row {
            steps,
            scorer_ppl_median: median(&ppls)?,
            scorer_ppl_per_seed: ppls,
            distinct_2: distinct_n(&all, 2)?,
            samples: all.len(),
        });
    }

    println!("{:>6}  {:>11}  {:>10}  {:>8}", "steps", "scorer-ppl", "distinct-2", "samples");
    for r in &rows {
        println!(
            "{:>6}  {:>11.3}  {:>10.3}  {:>8}",
            r.steps, r.scorer_ppl_median, r.distinct_2, r.samples
        );
    }
    if let Some(p) = &a.data_out {
        std::fs::write(p, serde_json::to_string_pretty(&rows)?)?;
        eprintln!("wrote sweep data to {}", p.display());
    }
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> Result<()> {
    let seed = resolve_seed(a.seed);
    let results = run_all(seed);
    let mut failed = 0;
    for r in &results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("{status} {:<26} {} ({:.2}s)", r.name, r.detail, r.elapsed.as_secs_f64());
        if !r.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        bail!("{failed} of {} checks failed", results.len());
    }
    eprintln!("all {} checks passed", results.len());
    Ok(())
}
