//! Command-line surface and how flags fold into an [`ExperimentConfig`].

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use spanlab_core::ablate::Axis;
use spanlab_core::config::ExperimentConfig;
use spanlab_core::encoder::ProjectorKind;
use spanlab_core::spans::{parse_granularities, Granularity};

#[derive(Debug, Parser)]
#[command(name = "spanlab", version, about = "Span-contrastive pre-training and dense retrieval on a desk")]
pub struct Cli {
    /// TOML experiment config; flags given on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Experiment seed every random component derives from.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    /// Repeat for more log output on stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus for smoke runs.
    Synth(SynthArgs),
    /// Build a frequency-sorted vocabulary from a corpus.
    BuildVocab(BuildVocabArgs),
    /// Sample one span group per document and write the span file.
    SampleSpans(SampleSpansArgs),
    /// Pre-train the encoder with the contrastive and MLM objectives.
    Pretrain(PretrainArgs),
    /// Fine-tune a dual encoder on training triples.
    Finetune(FinetuneArgs),
    /// Encode a corpus into a dense index.
    BuildIndex(BuildIndexArgs),
    /// Rank the corpus for each query and write a TREC run.
    Search(SearchArgs),
    /// Produce negatives: lexical first stage, or dense mining plus fine-tuning rounds.
    MineNegatives(MineArgs),
    /// Score a TREC run against qrels.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Sweep one pre-training axis and write a results table.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    Pretrain,
    Retrieval,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "retrieval")]
    pub kind: SynthKind,
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    /// Documents for the pre-training corpus.
    #[arg(long, default_value_t = 64)]
    pub docs: usize,
    #[arg(long, default_value_t = 20)]
    pub topics: usize,
    #[arg(long, default_value_t = 5)]
    pub docs_per_topic: usize,
}

#[derive(Debug, Args)]
pub struct BuildVocabArgs {
    #[arg(long, value_name = "JSONL")]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub min_freq: usize,
}

#[derive(Debug, Args, Default)]
pub struct CorpusArgs {
    #[arg(long, value_name = "JSONL")]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub vocab: Option<PathBuf>,
    /// One stopword per line; a built-in English list otherwise.
    #[arg(long, value_name = "FILE")]
    pub stopwords: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct SamplerArgs {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, value_name = "T")]
    pub spans_per_granularity: Option<usize>,
    #[arg(long, value_name = "LIST", value_parser = granularity_list)]
    pub granularities: Option<GranularityList>,
}

/// A parsed `word,phrase,...` list.
#[derive(Debug, Clone, PartialEq)]
pub struct GranularityList(pub Vec<Granularity>);

#[derive(Debug, Args, Default)]
pub struct EncoderArgs {
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub ffn: Option<usize>,
    /// Sequence limit including `[CLS]`; longer documents are chunked.
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long, value_parser = projector)]
    pub projector: Option<ProjectorKind>,
}

#[derive(Debug, Args, Default)]
pub struct LossArgs {
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub warmup: Option<f64>,
    #[arg(long, value_name = "STEPS")]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub mlm_only: bool,
    #[arg(long)]
    pub clean_span_pass: bool,
    #[arg(long)]
    pub resample_spans: bool,
}

#[derive(Debug, Args)]
pub struct SampleSpansArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long, value_name = "TSV")]
    pub out: Option<PathBuf>,
    /// Also write the length histogram here.
    #[arg(long, value_name = "TSV")]
    pub stats: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Pre-sampled spans; sampled on the fly otherwise.
    #[arg(long, value_name = "TSV")]
    pub spans: Option<PathBuf>,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[command(flatten)]
    pub loss: LossArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct FinetuneFlags {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub warmup: Option<f64>,
    #[arg(long)]
    pub negatives: Option<usize>,
    #[arg(long)]
    pub query_max_len: Option<usize>,
    #[arg(long)]
    pub passage_max_len: Option<usize>,
    #[arg(long, value_parser = projector)]
    pub projector: Option<ProjectorKind>,
    /// Score only the listed negatives, not the rest of the batch.
    #[arg(long)]
    pub no_in_batch: bool,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, value_name = "JSONL")]
    pub queries: Option<PathBuf>,
    #[arg(long, value_name = "TSV")]
    pub triples: Option<PathBuf>,
    /// Starting weights; a fresh encoder shaped by `[encoder]` otherwise.
    #[arg(long, value_name = "CKPT")]
    pub init_from: Option<PathBuf>,
    #[command(flatten)]
    pub finetune: FinetuneFlags,
    #[arg(long, value_name = "CKPT")]
    pub out: Option<PathBuf>,
    /// Per-step loss as TSV `step<TAB>loss`.
    #[arg(long, value_name = "TSV")]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BuildIndexArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, value_name = "CKPT")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub passage_max_len: Option<usize>,
    #[arg(long, value_parser = projector)]
    pub projector: Option<ProjectorKind>,
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long, value_name = "FILE")]
    pub vocab: Option<PathBuf>,
    #[arg(long, value_name = "JSONL")]
    pub queries: Option<PathBuf>,
    #[arg(long, value_name = "CKPT")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub index: Option<PathBuf>,
    #[arg(long, value_name = "K")]
    pub topk: Option<usize>,
    #[arg(long)]
    pub query_max_len: Option<usize>,
    #[arg(long, value_name = "RUN")]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "spanlab")]
    pub tag: String,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, value_name = "JSONL")]
    pub queries: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub qrels: Option<PathBuf>,
    /// Positives to mine for; one per judged pair of the queries otherwise.
    #[arg(long, value_name = "TSV")]
    pub triples: Option<PathBuf>,
    /// Encoder to mine with and continue training.
    #[arg(long, value_name = "CKPT")]
    pub checkpoint: Option<PathBuf>,
    /// Token-overlap negatives instead of dense mining; writes `triples-iter0.tsv`.
    #[arg(long)]
    pub lexical: bool,
    #[arg(long, value_name = "K")]
    pub topk: Option<usize>,
    #[arg(long, value_name = "M")]
    pub iterations: Option<usize>,
    #[command(flatten)]
    pub finetune: FinetuneFlags,
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "RUN")]
    pub run: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub qrels: Option<PathBuf>,
    #[arg(long, default_value = "mrr@10,ndcg@10,recall@100,recall@1000")]
    pub metrics: String,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub cases: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub threshold: f64,
    /// Print the per-case report as JSON on stdout.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_parser = axis)]
    pub axis: Axis,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[command(flatten)]
    pub loss: LossArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Training triples; with them every variant is also fine-tuned and evaluated.
    #[arg(long, value_name = "TSV", requires_all = ["queries", "eval_queries", "qrels"])]
    pub triples: Option<PathBuf>,
    /// Queries the triples refer to.
    #[arg(long, value_name = "JSONL")]
    pub queries: Option<PathBuf>,
    /// Held-out queries to evaluate with.
    #[arg(long, value_name = "JSONL")]
    pub eval_queries: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub qrels: Option<PathBuf>,
    #[arg(long, value_name = "TSV")]
    pub out: Option<PathBuf>,
}

fn granularity_list(s: &str) -> Result<GranularityList, String> {
    parse_granularities(s).map(GranularityList).map_err(|e| e.to_string())
}

fn projector(s: &str) -> Result<ProjectorKind, String> {
    s.parse().map_err(|e: spanlab_core::Error| e.to_string())
}

fn axis(s: &str) -> Result<Axis, String> {
    s.parse().map_err(|e: spanlab_core::Error| e.to_string())
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, value: &Option<PathBuf>) {
    if value.is_some() {
        slot.clone_from(value);
    }
}

impl CorpusArgs {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        set_path(&mut cfg.paths.corpus, &self.corpus);
        set_path(&mut cfg.paths.vocab, &self.vocab);
        set_path(&mut cfg.paths.stopwords, &self.stopwords);
    }
}

impl SamplerArgs {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        let s = &mut cfg.sampler;
        set(&mut s.alpha, self.alpha);
        set(&mut s.beta, self.beta);
        set(&mut s.spans_per_granularity, self.spans_per_granularity);
        set(&mut s.granularities, self.granularities.clone().map(|g| g.0));
    }
}

impl EncoderArgs {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        let e = &mut cfg.encoder;
        set(&mut e.layers, self.layers);
        set(&mut e.heads, self.heads);
        set(&mut e.hidden, self.hidden);
        set(&mut e.ffn, self.ffn);
        set(&mut e.max_len, self.max_len);
        set(&mut e.projector, self.projector);
    }
}

impl LossArgs {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        set(&mut cfg.loss.tau, self.tau);
        set(&mut cfg.loss.lambda, self.lambda);
    }
}

impl TrainArgs {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        let t = &mut cfg.train;
        set(&mut t.lr, self.lr);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.epochs, self.epochs);
        if self.max_steps.is_some() {
            t.max_steps = self.max_steps;
        }
        set(&mut t.warmup_fraction, self.warmup);
        set(&mut t.checkpoint_every, self.checkpoint_every);
        t.mlm_only |= self.mlm_only;
        t.clean_span_pass |= self.clean_span_pass;
        t.resample_spans |= self.resample_spans;
    }
}

impl FinetuneFlags {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        let f = &mut cfg.finetune;
        set(&mut f.lr, self.lr);
        set(&mut f.batch_size, self.batch_size);
        set(&mut f.epochs, self.epochs);
        set(&mut f.warmup_fraction, self.warmup);
        set(&mut f.negatives, self.negatives);
        set(&mut f.query_max_len, self.query_max_len);
        set(&mut f.passage_max_len, self.passage_max_len);
        set(&mut f.projector, self.projector);
        if self.no_in_batch {
            f.in_batch_negatives = false;
        }
    }
}

impl SampleSpansArgs {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        self.corpus.apply(cfg);
        self.sampler.apply(cfg);
        set(&mut cfg.encoder.max_len, self.max_len);
        set_path(&mut cfg.paths.spans, &self.out);
    }
}

impl PretrainArgs {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        self.corpus.apply(cfg);
        self.encoder.apply(cfg);
        self.sampler.apply(cfg);
        self.loss.apply(cfg);
        self.train.apply(cfg);
        set_path(&mut cfg.paths.spans, &self.spans);
        set_path(&mut cfg.paths.out_dir, &self.out_dir);
    }
}

impl FinetuneArgs {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        self.corpus.apply(cfg);
        self.finetune.apply(cfg);
        set_path(&mut cfg.paths.queries, &self.queries);
        set_path(&mut cfg.paths.triples, &self.triples);
        set_path(&mut cfg.paths.checkpoint, &self.out);
    }
}

impl BuildIndexArgs {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        self.corpus.apply(cfg);
        set_path(&mut cfg.paths.checkpoint, &self.checkpoint);
        set_path(&mut cfg.paths.index, &self.out);
        set(&mut cfg.finetune.passage_max_len, self.passage_max_len);
        set(&mut cfg.finetune.projector, self.projector);
    }
}

impl SearchArgs {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        set_path(&mut cfg.paths.vocab, &self.vocab);
        set_path(&mut cfg.paths.queries, &self.queries);
        set_path(&mut cfg.paths.checkpoint, &self.checkpoint);
        set_path(&mut cfg.paths.index, &self.index);
        set_path(&mut cfg.paths.run, &self.out);
        set(&mut cfg.retrieval.topk, self.topk);
        set(&mut cfg.finetune.query_max_len, self.query_max_len);
    }
}

impl MineArgs {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        self.corpus.apply(cfg);
        self.finetune.apply(cfg);
        set_path(&mut cfg.paths.queries, &self.queries);
        set_path(&mut cfg.paths.qrels, &self.qrels);
        set_path(&mut cfg.paths.triples, &self.triples);
        set_path(&mut cfg.paths.checkpoint, &self.checkpoint);
        set_path(&mut cfg.paths.out_dir, &self.out_dir);
        set(&mut cfg.retrieval.mine_topk, self.topk);
        set(&mut cfg.retrieval.iterations, self.iterations);
    }
}

impl EvalArgs {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        set_path(&mut cfg.paths.run, &self.run);
        set_path(&mut cfg.paths.qrels, &self.qrels);
    }
}

impl AblateArgs {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        self.corpus.apply(cfg);
        self.encoder.apply(cfg);
        self.sampler.apply(cfg);
        self.loss.apply(cfg);
        self.train.apply(cfg);
        set_path(&mut cfg.paths.triples, &self.triples);
        set_path(&mut cfg.paths.queries, &self.queries);
        set_path(&mut cfg.paths.qrels, &self.qrels);
    }
}
