//! Command-line surface binding the pipeline together: index building,
//! gain-label generation, model training, expansion runs, evaluation,
//! parameter sweeps, and synthetic-corpus generation.
//!
//! Every setting resolves as flag > config file > built-in default, and
//! every subcommand is deterministic under `--seed`.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{resolve, ConfigFile};
use crate::corpus::{load_corpus_file, load_query_file, Corpus, PreprocessConfig, Query};
use crate::embed::EmbeddingTable;
use crate::error::Error;
use crate::eval::{cross_validate, sweep, EvalReport, Judgments};
use crate::expand::{
    expand_and_retrieve, generate_labels, label_content_hash, pointer_examples, ranker_examples,
    ExpansionConfig, LabelTable, TrainBundleOpts,
};
use crate::index::{
    load_index_artifact, read_trec_run, save_index_artifact, InvertedIndex, RankedList,
    DEFAULT_B, DEFAULT_K1,
};
use crate::qa_net::{train_pointer, PointerModel};
use crate::stat_rank::{train_ranker, RankerModel};
use crate::Result;

#[derive(Debug, Parser)]
#[command(name = "qa4prf", version, about = "PRF query expansion with BM25 retrieval")]
pub struct Cli {
    /// Flat key=value config file consulted for any flag left unset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Master seed for every random choice.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Evaluation depth profile: full (depth 1000, P@20) or short
    /// (depth 5, P@5).
    #[arg(long, global = true, value_enum)]
    pub mode: Option<Mode>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Full,
    Short,
}

impl Mode {
    fn depth(self) -> usize {
        match self {
            Mode::Full => 1000,
            Mode::Short => 5,
        }
    }

    fn p_at_k(self) -> usize {
        match self {
            Mode::Full => 20,
            Mode::Short => 5,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a corpus + inverted index artifact from a TSV corpus file.
    Index(IndexArgs),
    /// Compute retrieval-gain labels for every candidate term.
    Labels(LabelsArgs),
    /// Train the pointer network on cached labels.
    TrainPointer(TrainPointerArgs),
    /// Train the statistical ranker on cached labels.
    TrainRanker(TrainRankerArgs),
    /// Expand queries and write second-round rankings as a TREC run.
    Expand(ExpandArgs),
    /// Score a run against qrels, or cross-validate the full pipeline.
    Eval(EvalArgs),
    /// Grid-search expansion hyper-parameters.
    Sweep(SweepArgs),
    /// Generate a synthetic corpus with a planted expansion term.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    /// Corpus TSV: doc_id<TAB>text per line.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Extra stopwords, one per line, added to the built-in list.
    #[arg(long)]
    pub stopwords: Option<PathBuf>,
    /// Disable suffix stemming.
    #[arg(long)]
    pub no_stem: bool,
    #[arg(long)]
    pub k1: Option<f64>,
    #[arg(long)]
    pub b: Option<f64>,
    /// Output artifact path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LabelsArgs {
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long)]
    pub qrels: Option<PathBuf>,
    /// Label table output; reused untouched when its content hash still
    /// matches the inputs.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub expansion: ExpansionFlags,
}

#[derive(Debug, Args)]
pub struct TrainPointerArgs {
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Model checkpoint output path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Use the log-free linear objective instead of cross entropy.
    #[arg(long)]
    pub literal_loss: bool,
    #[command(flatten)]
    pub expansion: ExpansionFlags,
}

#[derive(Debug, Args)]
pub struct TrainRankerArgs {
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Model checkpoint output path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Sampled preference pairs per query per epoch.
    #[arg(long)]
    pub pairs: Option<usize>,
    #[command(flatten)]
    pub expansion: ExpansionFlags,
}

#[derive(Debug, Args)]
pub struct ExpandArgs {
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Pointer checkpoint; only needed when gamma > 0.
    #[arg(long)]
    pub pointer: Option<PathBuf>,
    /// Ranker checkpoint; only needed when gamma < 1.
    #[arg(long)]
    pub ranker: Option<PathBuf>,
    /// TREC run output (stdout when omitted).
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Optional per-term diagnostic TSV.
    #[arg(long)]
    pub terms: Option<PathBuf>,
    /// Run tag in the TREC output.
    #[arg(long, default_value = "qa4prf")]
    pub tag: String,
    #[command(flatten)]
    pub expansion: ExpansionFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub qrels: Option<PathBuf>,
    /// TREC run to score; omitting it switches to cross-validation of the
    /// full pipeline (requires --index and --queries).
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Baseline TREC run for robustness index and significance.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Report TSV output (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub expansion: ExpansionFlags,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long)]
    pub qrels: Option<PathBuf>,
    /// Label table; regenerated when omitted.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Grid axis as key=v1,v2,... over m, n, beta, gamma. Repeatable;
    /// unlisted keys stay at their base value.
    #[arg(long)]
    pub grid: Vec<String>,
    /// Result TSV output (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub expansion: ExpansionFlags,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Directory receiving corpus.tsv, queries.tsv, qrels.txt, manifest.tsv.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub queries: Option<usize>,
    #[arg(long)]
    pub background_docs: Option<usize>,
    #[arg(long)]
    pub filler_vocab: Option<usize>,
    #[arg(long)]
    pub doc_len: Option<usize>,
}

/// Expansion hyper-parameter flags shared by most subcommands.
#[derive(Debug, Args, Default, Clone)]
pub struct ExpansionFlags {
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub depth: Option<usize>,
}

/// Settings shared by every subcommand, resolved once.
struct Ctx {
    cfg: ConfigFile,
    seed: u64,
    depth: usize,
    p_at_k: usize,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let cfg = match &cli.config {
            Some(path) => ConfigFile::load(path)?,
            None => ConfigFile::empty(),
        };
        let seed = resolve(cli.seed, &cfg, "seed", 0)?;
        let mode = match cli.mode {
            Some(m) => m,
            None => match cfg.get("mode") {
                None | Some("full") => Mode::Full,
                Some("short") => Mode::Short,
                Some(other) => {
                    return Err(Error::InvalidConfig(format!(
                        "config key `mode`: expected full|short, got `{other}`"
                    )))
                }
            },
        };
        Ok(Ctx {
            cfg,
            seed,
            depth: mode.depth(),
            p_at_k: mode.p_at_k(),
        })
    }

    fn expansion(&self, flags: &ExpansionFlags) -> Result<ExpansionConfig> {
        let defaults = ExpansionConfig::default();
        let config = ExpansionConfig {
            m: resolve(flags.m, &self.cfg, "m", defaults.m)?,
            n: resolve(flags.n, &self.cfg, "n", defaults.n)?,
            beta: resolve(flags.beta, &self.cfg, "beta", defaults.beta)?,
            gamma: resolve(flags.gamma, &self.cfg, "gamma", defaults.gamma)?,
            alpha: resolve(flags.alpha, &self.cfg, "alpha", defaults.alpha)?,
            depth: resolve(flags.depth, &self.cfg, "depth", self.depth)?,
        };
        config.validate()?;
        Ok(config)
    }

    /// Resolve a required path from a flag or a config key.
    fn require_path(&self, flag: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
        if let Some(p) = flag {
            return Ok(p.clone());
        }
        match self.cfg.get(key) {
            Some(v) => Ok(PathBuf::from(v)),
            None => Err(Error::MissingInput(format!(
                "`--{key}` (or config key `{key}`)"
            ))),
        }
    }

    fn optional_path(&self, flag: &Option<PathBuf>, key: &str) -> Option<PathBuf> {
        flag.clone().or_else(|| self.cfg.get(key).map(PathBuf::from))
    }
}

fn write_output(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, bytes).map_err(|e| Error::io(p.display().to_string(), e)),
        None => {
            std::io::stdout()
                .write_all(bytes)
                .map_err(|e| Error::io("<stdout>".to_string(), e))
        }
    }
}

fn load_artifacts(ctx: &Ctx, index: &Option<PathBuf>) -> Result<(Corpus, InvertedIndex)> {
    load_index_artifact(&ctx.require_path(index, "index")?)
}

fn load_queries(ctx: &Ctx, queries: &Option<PathBuf>, corpus: &Corpus) -> Result<Vec<Query>> {
    load_query_file(&ctx.require_path(queries, "queries")?, corpus)
}

/// Trained or loaded scorers for the expansion pipeline; each side is only
/// present when the interpolation weight makes it reachable.
struct Pipeline {
    pointer: Option<(PointerModel, EmbeddingTable)>,
    ranker: Option<RankerModel>,
}

impl Pipeline {
    fn pointer_ref(&self) -> Option<(&PointerModel, &EmbeddingTable)> {
        self.pointer.as_ref().map(|(m, t)| (m, t))
    }

    fn expand(
        &self,
        q: &Query,
        index: &InvertedIndex,
        corpus: &Corpus,
        config: &ExpansionConfig,
    ) -> Result<(crate::expand::ExpansionResult, RankedList)> {
        expand_and_retrieve(q, index, corpus, self.pointer_ref(), self.ranker.as_ref(), config)
    }
}

/// Train exactly the scorers the gamma range requires.
fn train_pipeline(
    queries: &[Query],
    index: &InvertedIndex,
    corpus: &Corpus,
    labels: &LabelTable,
    config: &ExpansionConfig,
    opts: &TrainBundleOpts,
    need_pointer: bool,
    need_ranker: bool,
) -> Result<Pipeline> {
    let pointer = if need_pointer {
        let table = EmbeddingTable::random(&corpus.vocab, opts.embed_dim, opts.embed_seed);
        let examples = pointer_examples(queries, index, corpus, labels, config, opts.max_len)?;
        if examples.is_empty() {
            return Err(Error::MissingInput(
                "pointer training examples (no feedback document contains its query's best term)"
                    .to_string(),
            ));
        }
        let mut model = PointerModel::with_shape(
            opts.embed_dim,
            4,
            2 * opts.embed_dim,
            opts.max_len,
            opts.embed_seed,
        )?;
        train_pointer(&mut model, &table, &examples, &opts.pointer)?;
        Some((model, table))
    } else {
        None
    };
    let ranker = if need_ranker {
        let examples = ranker_examples(queries, index, corpus, labels, config)?;
        if examples.is_empty() {
            return Err(Error::MissingInput(
                "ranker training examples (label table covers no training query)".to_string(),
            ));
        }
        let mut model = RankerModel::new(examples[0].features.ncols(), opts.embed_seed);
        let mut ranker_opts = opts.ranker.clone();
        ranker_opts.relevant_n = config.n;
        train_ranker(&mut model, &examples, &ranker_opts)?;
        Some(model)
    } else {
        None
    };
    Ok(Pipeline { pointer, ranker })
}

fn bundle_opts(ctx: &Ctx) -> Result<TrainBundleOpts> {
    let mut opts = TrainBundleOpts::default();
    opts.embed_dim = resolve(None, &ctx.cfg, "embed_dim", opts.embed_dim)?;
    opts.embed_seed = ctx.seed;
    opts.max_len = resolve(None, &ctx.cfg, "max_len", opts.max_len)?;
    opts.pointer.seed = ctx.seed;
    opts.pointer.epochs = resolve(None, &ctx.cfg, "pointer_epochs", opts.pointer.epochs)?;
    opts.pointer.learning_rate =
        resolve(None, &ctx.cfg, "pointer_learning_rate", opts.pointer.learning_rate)?;
    opts.ranker.seed = ctx.seed;
    opts.ranker.epochs = resolve(None, &ctx.cfg, "ranker_epochs", opts.ranker.epochs)?;
    opts.ranker.learning_rate =
        resolve(None, &ctx.cfg, "ranker_learning_rate", opts.ranker.learning_rate)?;
    opts.ranker.pairs_per_query =
        resolve(None, &ctx.cfg, "ranker_pairs", opts.ranker.pairs_per_query)?;
    Ok(opts)
}

fn cmd_index(ctx: &Ctx, args: &IndexArgs) -> Result<()> {
    let mut preprocess = PreprocessConfig::default();
    if args.no_stem {
        preprocess.stemmer = crate::corpus::StemmerChoice::Identity;
    }
    if let Some(path) = ctx.optional_path(&args.stopwords, "stopwords") {
        preprocess = preprocess.with_stopword_file(&path)?;
    }
    let corpus = load_corpus_file(&ctx.require_path(&args.corpus, "corpus")?, preprocess)?;
    let k1 = resolve(args.k1, &ctx.cfg, "k1", DEFAULT_K1)?;
    let b = resolve(args.b, &ctx.cfg, "b", DEFAULT_B)?;
    let index = InvertedIndex::build(&corpus, k1, b);
    let out = ctx.require_path(&args.out, "index")?;
    save_index_artifact(&out, &corpus, &index)?;
    println!("documents: {}", corpus.doc_count());
    println!("vocabulary: {}", corpus.vocab.len());
    println!("avg_len: {:.4}", index.avg_len());
    println!("index written to {}", out.display());
    Ok(())
}

fn cmd_labels(ctx: &Ctx, args: &LabelsArgs) -> Result<()> {
    let (corpus, index) = load_artifacts(ctx, &args.index)?;
    let queries = load_queries(ctx, &args.queries, &corpus)?;
    let judgments = Judgments::load(&ctx.require_path(&args.qrels, "qrels")?)?;
    let config = ctx.expansion(&args.expansion)?;
    let out = ctx.require_path(&args.out, "labels")?;
    let hash = label_content_hash(&corpus, &judgments, &config);
    if out.exists() {
        if let Ok(cached) = LabelTable::load(&out, Some(&hash)) {
            println!("labels up to date ({} rows)", cached.row_count());
            return Ok(());
        }
    }
    let table = generate_labels(&queries, &index, &corpus, &judgments, &config)?;
    table.save(&out)?;
    println!("labels written: {} rows to {}", table.row_count(), out.display());
    Ok(())
}

fn cmd_train_pointer(ctx: &Ctx, args: &TrainPointerArgs) -> Result<()> {
    let (corpus, index) = load_artifacts(ctx, &args.index)?;
    let queries = load_queries(ctx, &args.queries, &corpus)?;
    let labels = LabelTable::load(&ctx.require_path(&args.labels, "labels")?, None)?;
    let config = ctx.expansion(&args.expansion)?;
    let mut bundle = bundle_opts(ctx)?;
    if let Some(d) = args.embed_dim {
        bundle.embed_dim = d;
    }
    if let Some(l) = args.max_len {
        bundle.max_len = l;
    }
    if let Some(e) = args.epochs {
        bundle.pointer.epochs = e;
    }
    if let Some(lr) = args.learning_rate {
        bundle.pointer.learning_rate = lr;
    }
    bundle.pointer.literal_loss = args.literal_loss;

    let table = EmbeddingTable::random(&corpus.vocab, bundle.embed_dim, bundle.embed_seed);
    let examples = pointer_examples(&queries, &index, &corpus, &labels, &config, bundle.max_len)?;
    if examples.is_empty() {
        return Err(Error::MissingInput("pointer training examples".to_string()));
    }
    let mut model = PointerModel::with_shape(
        bundle.embed_dim,
        4,
        2 * bundle.embed_dim,
        bundle.max_len,
        bundle.embed_seed,
    )?;
    let trace = train_pointer(&mut model, &table, &examples, &bundle.pointer)?;
    let out = ctx.require_path(&args.out, "pointer")?;
    model.save(&out)?;
    println!(
        "pointer: {} examples, loss {:.6} -> {:.6}, saved to {}",
        examples.len(),
        trace.first().copied().unwrap_or(f64::NAN),
        trace.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn cmd_train_ranker(ctx: &Ctx, args: &TrainRankerArgs) -> Result<()> {
    let (corpus, index) = load_artifacts(ctx, &args.index)?;
    let queries = load_queries(ctx, &args.queries, &corpus)?;
    let labels = LabelTable::load(&ctx.require_path(&args.labels, "labels")?, None)?;
    let config = ctx.expansion(&args.expansion)?;
    let mut bundle = bundle_opts(ctx)?;
    if let Some(e) = args.epochs {
        bundle.ranker.epochs = e;
    }
    if let Some(lr) = args.learning_rate {
        bundle.ranker.learning_rate = lr;
    }
    if let Some(p) = args.pairs {
        bundle.ranker.pairs_per_query = p;
    }
    bundle.ranker.relevant_n = config.n;

    let examples = ranker_examples(&queries, &index, &corpus, &labels, &config)?;
    if examples.is_empty() {
        return Err(Error::MissingInput("ranker training examples".to_string()));
    }
    let mut model = RankerModel::new(examples[0].features.ncols(), ctx.seed);
    let trace = train_ranker(&mut model, &examples, &bundle.ranker)?;
    let out = ctx.require_path(&args.out, "ranker")?;
    model.save(&out)?;
    println!(
        "ranker: {} queries, loss {:.6} -> {:.6}, saved to {}",
        examples.len(),
        trace.first().copied().unwrap_or(f64::NAN),
        trace.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn cmd_expand(ctx: &Ctx, args: &ExpandArgs) -> Result<()> {
    let (corpus, index) = load_artifacts(ctx, &args.index)?;
    let queries = load_queries(ctx, &args.queries, &corpus)?;
    let config = ctx.expansion(&args.expansion)?;

    let pointer = if config.gamma > 0.0 {
        let path = ctx
            .optional_path(&args.pointer, "pointer")
            .ok_or_else(|| Error::MissingInput("`--pointer` checkpoint (gamma > 0)".to_string()))?;
        let model = PointerModel::load(&path)?;
        let table = EmbeddingTable::random(&corpus.vocab, model.dim, ctx.seed);
        Some((model, table))
    } else {
        None
    };
    let ranker = if config.gamma < 1.0 {
        let path = ctx
            .optional_path(&args.ranker, "ranker")
            .ok_or_else(|| Error::MissingInput("`--ranker` checkpoint (gamma < 1)".to_string()))?;
        Some(RankerModel::load(&path)?)
    } else {
        None
    };
    let pipeline = Pipeline { pointer, ranker };

    let mut run_buf = Vec::new();
    let mut term_buf = Vec::new();
    writeln!(term_buf, "query_id\trank\tterm\tweight\tw_qa\tw_prf\ttf_feedback")
        .map_err(|e| Error::io("<buffer>".to_string(), e))?;
    for q in &queries {
        let (result, ranking) = pipeline.expand(q, &index, &corpus, &config)?;
        ranking
            .write_trec(&mut run_buf, &args.tag)
            .map_err(|e| Error::io("<buffer>".to_string(), e))?;
        result
            .write_tsv(&mut term_buf)
            .map_err(|e| Error::io("<buffer>".to_string(), e))?;
    }
    write_output(args.run.as_deref(), &run_buf)?;
    if let Some(path) = &args.terms {
        write_output(Some(path), &term_buf)?;
    }
    if let Some(path) = &args.run {
        eprintln!("run written: {} queries to {}", queries.len(), path.display());
    }
    Ok(())
}

fn cmd_eval(ctx: &Ctx, args: &EvalArgs) -> Result<()> {
    let judgments = Judgments::load(&ctx.require_path(&args.qrels, "qrels")?)?;
    let report = match &args.run {
        Some(run_path) => {
            let run = read_trec_run(run_path)?;
            let mut report = EvalReport::compute(&run, &judgments, ctx.depth, ctx.p_at_k);
            if let Some(base_path) = &args.baseline {
                let base_run = read_trec_run(base_path)?;
                let base = EvalReport::compute(&base_run, &judgments, ctx.depth, ctx.p_at_k);
                report.compare_to(&base)?;
                if report.wilcoxon_p.is_none() {
                    eprintln!("wilcoxon: not significant (fewer than 5 nonzero differences)");
                }
            }
            report
        }
        None => {
            let (corpus, index) = load_artifacts(ctx, &args.index)?;
            let queries = load_queries(ctx, &args.queries, &corpus)?;
            let config = ctx.expansion(&args.expansion)?;
            let folds = resolve(args.folds, &ctx.cfg, "folds", 5)?;
            let bundle = bundle_opts(ctx)?;
            let need_pointer = config.gamma > 0.0;
            let need_ranker = config.gamma < 1.0;
            let cv = cross_validate(
                &queries,
                &judgments,
                folds,
                ctx.seed,
                ctx.depth,
                ctx.p_at_k,
                |train: &[Query]| {
                    let labels = generate_labels(train, &index, &corpus, &judgments, &config)?;
                    let pipeline = train_pipeline(
                        train,
                        &index,
                        &corpus,
                        &labels,
                        &config,
                        &bundle,
                        need_pointer,
                        need_ranker,
                    )?;
                    let (index, corpus, config) = (&index, &corpus, config.clone());
                    Ok(move |q: &Query| Ok(pipeline.expand(q, index, corpus, &config)?.1))
                },
            )?;
            for (f, r) in cv.fold_reports.iter().enumerate() {
                eprintln!(
                    "fold {}: {} queries, ndcg {:.4}, map {:.4}",
                    f + 1,
                    r.rows.len(),
                    r.mean_ndcg,
                    r.mean_ap
                );
            }
            cv.pooled
        }
    };
    let mut buf = Vec::new();
    report
        .write_tsv(&mut buf)
        .map_err(|e| Error::io("<buffer>".to_string(), e))?;
    write_output(args.out.as_deref(), &buf)
}

/// Cartesian grid from repeated `key=v1,v2` axes; keys left unlisted stay
/// at the base config's value.
fn parse_grid(specs: &[String], base: &ExpansionConfig) -> Result<Vec<(usize, usize, f64, f64)>> {
    let mut axes: HashMap<&str, Vec<String>> = HashMap::new();
    for spec in specs {
        let (key, values) = spec.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("grid axis `{spec}`: expected key=v1,v2"))
        })?;
        if !["m", "n", "beta", "gamma"].contains(&key) {
            return Err(Error::InvalidConfig(format!(
                "grid axis `{key}`: expected one of m, n, beta, gamma"
            )));
        }
        axes.insert(key, values.split(',').map(str::to_string).collect());
    }
    fn parse_axis<T: std::str::FromStr>(
        axes: &HashMap<&str, Vec<String>>,
        key: &str,
        base: T,
    ) -> Result<Vec<T>> {
        match axes.get(key) {
            None => Ok(vec![base]),
            Some(raw) => raw
                .iter()
                .map(|v| {
                    v.parse().map_err(|_| {
                        Error::InvalidConfig(format!("grid axis `{key}`: malformed value `{v}`"))
                    })
                })
                .collect(),
        }
    }
    let ms = parse_axis(&axes, "m", base.m)?;
    let ns = parse_axis(&axes, "n", base.n)?;
    let betas = parse_axis(&axes, "beta", base.beta)?;
    let gammas = parse_axis(&axes, "gamma", base.gamma)?;
    let mut grid = Vec::new();
    for &m in &ms {
        for &n in &ns {
            for &beta in &betas {
                for &gamma in &gammas {
                    grid.push((m, n, beta, gamma));
                }
            }
        }
    }
    Ok(grid)
}

fn cmd_sweep(ctx: &Ctx, args: &SweepArgs) -> Result<()> {
    let (corpus, index) = load_artifacts(ctx, &args.index)?;
    let queries = load_queries(ctx, &args.queries, &corpus)?;
    let judgments = Judgments::load(&ctx.require_path(&args.qrels, "qrels")?)?;
    let config = ctx.expansion(&args.expansion)?;
    let grid = parse_grid(&args.grid, &config)?;

    let labels = match ctx.optional_path(&args.labels, "labels") {
        Some(path) => LabelTable::load(&path, None)?,
        None => generate_labels(&queries, &index, &corpus, &judgments, &config)?,
    };
    // Models are trained once at the base configuration; the grid varies
    // only the expansion-time parameters.
    let need_pointer = grid.iter().any(|&(_, _, _, gamma)| gamma > 0.0);
    let need_ranker = grid.iter().any(|&(_, _, _, gamma)| gamma < 1.0);
    let bundle = bundle_opts(ctx)?;
    let pipeline = train_pipeline(
        &queries,
        &index,
        &corpus,
        &labels,
        &config,
        &bundle,
        need_pointer,
        need_ranker,
    )?;

    let (points, best) = sweep(&grid, |m, n, beta, gamma| {
        let point_config = ExpansionConfig {
            m,
            n,
            beta,
            gamma,
            ..config.clone()
        };
        point_config.validate()?;
        let rankings: Vec<RankedList> = queries
            .iter()
            .map(|q| Ok(pipeline.expand(q, &index, &corpus, &point_config)?.1))
            .collect::<Result<_>>()?;
        Ok(EvalReport::compute(&rankings, &judgments, ctx.depth, ctx.p_at_k))
    })?;

    let mut buf = Vec::new();
    writeln!(buf, "m\tn\tbeta\tgamma\tmean_ap\tmean_ndcg\tmean_p@{}", ctx.p_at_k)
        .map_err(|e| Error::io("<buffer>".to_string(), e))?;
    for p in &points {
        writeln!(
            buf,
            "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}",
            p.m, p.n, p.beta, p.gamma, p.mean_ap, p.mean_ndcg, p.mean_p_at
        )
        .map_err(|e| Error::io("<buffer>".to_string(), e))?;
    }
    let b = &points[best];
    writeln!(buf, "# best m={} n={} beta={} gamma={}", b.m, b.n, b.beta, b.gamma)
        .map_err(|e| Error::io("<buffer>".to_string(), e))?;
    write_output(args.out.as_deref(), &buf)
}

fn cmd_synth(ctx: &Ctx, args: &SynthArgs) -> Result<()> {
    let mut spec = crate::synth::SynthSpec::default();
    spec.seed = ctx.seed;
    spec.queries = resolve(args.queries, &ctx.cfg, "synth_queries", spec.queries)?;
    spec.background_docs =
        resolve(args.background_docs, &ctx.cfg, "synth_background", spec.background_docs)?;
    spec.filler_vocab =
        resolve(args.filler_vocab, &ctx.cfg, "synth_filler_vocab", spec.filler_vocab)?;
    spec.doc_len = resolve(args.doc_len, &ctx.cfg, "synth_doc_len", spec.doc_len)?;
    let out = crate::synth::generate_verified(&spec)?;
    let dir = ctx.require_path(&args.out_dir, "synth_dir")?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let files = crate::synth::write_files(&out, &dir)?;
    let docs = out.corpus_text.lines().count();
    println!("synthetic corpus: {docs} documents, {} queries", spec.queries);
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

/// Parse arguments from the process environment and run the subcommand.
pub fn run() -> Result<()> {
    let cli = Cli::parse();
    run_cli(&cli)
}

pub fn run_cli(cli: &Cli) -> Result<()> {
    let ctx = Ctx::new(cli)?;
    let threads = match cli.threads {
        Some(t) => Some(t),
        None => ctx
            .cfg
            .get("threads")
            .map(|raw| {
                raw.parse().map_err(|_| {
                    Error::InvalidConfig(format!("config key `threads`: malformed value `{raw}`"))
                })
            })
            .transpose()?,
    };
    if let Some(threads) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Index(args) => cmd_index(&ctx, args),
        Command::Labels(args) => cmd_labels(&ctx, args),
        Command::TrainPointer(args) => cmd_train_pointer(&ctx, args),
        Command::TrainRanker(args) => cmd_train_ranker(&ctx, args),
        Command::Expand(args) => cmd_expand(&ctx, args),
        Command::Eval(args) => cmd_eval(&ctx, args),
        Command::Sweep(args) => cmd_sweep(&ctx, args),
        Command::Synth(args) => cmd_synth(&ctx, args),
    }
}
