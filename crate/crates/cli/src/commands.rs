//! Subcommand bodies. Each resolves its config, reads inputs, calls into
//! the core crate and writes artifacts.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use spanlab_core::ablate::{self, Downstream};
use spanlab_core::checkpoint::Checkpoint;
use spanlab_core::config::ExperimentConfig;
use spanlab_core::corpus::{build_vocab, read_jsonl, tokenize_corpus, write_jsonl, Document, StopwordList, Vocabulary};
use spanlab_core::encoder::{EncoderConfig, ParamStore};
use spanlab_core::eval::{evaluate, parse_metrics, to_tsv, Qrels, Run};
use spanlab_core::gradcheck::{self, GradcheckConfig};
use spanlab_core::pretrain::{prepare, train, write_span_stats, RunOutput};
use spanlab_core::retrieval::{
    build_index, finetune, iterative_mining, lexical_negatives, read_triples, search_queries, triples_from_qrels,
    write_triples, DenseIndex, MiningPlan, TextTable, TrainingTriple,
};
use spanlab_core::rng::Rng;
use spanlab_core::spans::{read_spans, write_spans};
use spanlab_core::synth;
use spanlab_core::{Error, Result};

use crate::args::{Cli, Command, SynthKind};

pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    match &cli.command {
        Command::Synth(_) | Command::BuildVocab(_) | Command::Gradcheck(_) => {}
        Command::SampleSpans(a) => a.apply(&mut cfg),
        Command::Pretrain(a) => a.apply(&mut cfg),
        Command::Finetune(a) => a.apply(&mut cfg),
        Command::BuildIndex(a) => a.apply(&mut cfg),
        Command::Search(a) => a.apply(&mut cfg),
        Command::MineNegatives(a) => a.apply(&mut cfg),
        Command::Eval(a) => a.apply(&mut cfg),
        Command::Ablate(a) => a.apply(&mut cfg),
    }
    cfg.set_seed(cli.seed.unwrap_or(cfg.seed));
    cfg.validate()?;

    match &cli.command {
        Command::Synth(a) => synth_data(&cfg, a),
        Command::BuildVocab(a) => {
            let corpus = a.corpus.clone().or(cfg.paths.corpus.clone());
            let out = a.out.clone().or(cfg.paths.vocab.clone());
            build_vocabulary(require(&corpus, "corpus", "corpus")?, require(&out, "vocab", "out")?, a.min_freq)
        }
        Command::SampleSpans(a) => sample_spans(&cfg, a.stats.as_deref()),
        Command::Pretrain(a) => pretrain(&cfg, a.resume.as_deref()),
        Command::Finetune(a) => finetune_cmd(&cfg, a.init_from.as_deref(), a.log.as_deref()),
        Command::BuildIndex(_) => build_index_cmd(&cfg),
        Command::Search(a) => search(&cfg, &a.tag),
        Command::MineNegatives(a) => mine(&cfg, a.lexical),
        Command::Eval(a) => eval(&cfg, &a.metrics),
        Command::Gradcheck(a) => gradcheck_cmd(&cfg, a.cases, a.threshold, a.json),
        Command::Ablate(a) => ablate_cmd(&cfg, a.axis, a.eval_queries.as_deref(), a.out.as_deref()),
    }
}

fn require<'a>(path: &'a Option<PathBuf>, key: &str, flag: &str) -> Result<&'a Path> {
    path.as_deref().ok_or_else(|| Error::Config(format!("no {key} path: pass --{flag} or set paths.{key}")))
}

fn stdout_write(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes()).and_then(|_| out.flush()).map_err(|e| Error::io("<stdout>", e))
}

struct Corpus {
    vocab: Vocabulary,
    docs: Vec<Document>,
    stopwords: Vec<bool>,
}

/// Reads vocabulary, stopwords and corpus. With `chunk_len` long documents
/// are split; without it they are kept whole and truncated at encode time.
fn load_corpus(cfg: &ExperimentConfig, chunk_len: Option<usize>) -> Result<Corpus> {
    let vocab = Vocabulary::read_tsv(require(&cfg.paths.vocab, "vocab", "vocab")?)?;
    let stoplist = match &cfg.paths.stopwords {
        Some(p) => StopwordList::from_file(p)?,
        None => StopwordList::default(),
    };
    let records = read_jsonl(require(&cfg.paths.corpus, "corpus", "corpus")?)?;
    let docs = tokenize_corpus(&records, &vocab, chunk_len.unwrap_or(usize::MAX));
    if docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    log::info!("{} documents, vocabulary of {}", docs.len(), vocab.len());
    Ok(Corpus { stopwords: stoplist.mask_for(&vocab), vocab, docs })
}

fn load_queries(path: &Path, vocab: &Vocabulary) -> Result<Vec<Document>> {
    let mut out = Vec::new();
    for r in read_jsonl(path)? {
        match Document::from_text(r.id.clone(), &r.text, vocab) {
            Ok(d) => out.push(d),
            Err(e) => log::warn!("skipping query {}: {e}", r.id),
        }
    }
    Ok(out)
}

fn load_params(path: &Path, vocab: &Vocabulary) -> Result<ParamStore> {
    let params = Checkpoint::load(path)?.params;
    if params.config.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "checkpoint {} has a vocabulary of {}, the vocabulary file has {}",
            path.display(),
            params.config.vocab_size,
            vocab.len()
        )));
    }
    Ok(params)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn synth_data(cfg: &ExperimentConfig, a: &crate::args::SynthArgs) -> Result<()> {
    create_dir(&a.out_dir)?;
    match a.kind {
        SynthKind::Pretrain => {
            write_jsonl(&a.out_dir.join("corpus.jsonl"), &synth::pretrain_corpus(cfg.seed, a.docs))?;
        }
        SynthKind::Retrieval => {
            let toy = synth::retrieval_corpus(cfg.seed, a.topics, a.docs_per_topic);
            write_jsonl(&a.out_dir.join("corpus.jsonl"), &toy.docs)?;
            write_jsonl(&a.out_dir.join("queries-train.jsonl"), &toy.train_queries)?;
            write_jsonl(&a.out_dir.join("queries-test.jsonl"), &toy.test_queries)?;
            toy.qrels.write(&a.out_dir.join("qrels.txt"))?;
        }
    }
    log::info!("wrote synthetic data to {}", a.out_dir.display());
    Ok(())
}

fn build_vocabulary(corpus: &Path, out: &Path, min_freq: usize) -> Result<()> {
    let records = read_jsonl(corpus)?;
    let vocab = build_vocab(records.iter().map(|r| r.text.as_str()), min_freq)?;
    vocab.write_tsv(out)?;
    log::info!("{} entries written to {}", vocab.len(), out.display());
    Ok(())
}

fn sample_spans(cfg: &ExperimentConfig, stats: Option<&Path>) -> Result<()> {
    let out = require(&cfg.paths.spans, "spans", "out")?;
    let corpus = load_corpus(cfg, Some(cfg.encoder.max_len))?;
    let prepared = prepare(&corpus.docs, &cfg.sampler, &corpus.stopwords)?;
    write_spans(out, &prepared.spans)?;
    if let Some(p) = stats {
        write_span_stats(p, &prepared.spans)?;
    }
    log::info!("{} spans over {} documents written to {}", prepared.spans.len(), prepared.docs.len(), out.display());
    Ok(())
}

fn pretrain(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<()> {
    let out_dir = require(&cfg.paths.out_dir, "out_dir", "out-dir")?;
    let corpus = load_corpus(cfg, Some(cfg.encoder.max_len))?;
    let setup = cfg.pretrain_setup(corpus.vocab.len());
    setup.validate()?;
    let (docs, spans) = match &cfg.paths.spans {
        Some(path) => {
            let lengths: HashMap<String, usize> = corpus.docs.iter().map(|d| (d.id.clone(), d.n())).collect();
            let spans = read_spans(path, &lengths, &cfg.sampler.bounds)?;
            let covered: HashSet<&str> = spans.iter().map(|s| s.doc_id.as_str()).collect();
            let docs: Vec<Document> = corpus.docs.iter().filter(|d| covered.contains(d.id.as_str())).cloned().collect();
            if docs.len() < corpus.docs.len() {
                log::warn!("{} documents have no spans and are left out", corpus.docs.len() - docs.len());
            }
            (docs, spans)
        }
        None => {
            let p = prepare(&corpus.docs, &cfg.sampler, &corpus.stopwords)?;
            (p.docs, p.spans)
        }
    };
    create_dir(out_dir)?;
    write_spans(&out_dir.join("spans.tsv"), &spans)?;
    write_span_stats(&out_dir.join("span_stats.tsv"), &spans)?;
    std::fs::write(out_dir.join("config.toml"), cfg.to_toml()).map_err(|e| Error::io(out_dir, e))?;
    let resume = resume.map(Checkpoint::load).transpose()?;
    let outcome = train(&setup, &docs, &spans, &corpus.stopwords, resume, &RunOutput::to_dir(out_dir))?;
    if let Some(last) = outcome.log.last() {
        log::info!(
            "step {}: gwc {:.4} mlm {:.4} total {:.4}; checkpoint in {}",
            last.step,
            last.loss.gwc,
            last.loss.mlm,
            last.loss.total,
            out_dir.join("final.ckpt").display()
        );
    }
    Ok(())
}

fn finetune_cmd(cfg: &ExperimentConfig, init_from: Option<&Path>, log_path: Option<&Path>) -> Result<()> {
    let out = require(&cfg.paths.checkpoint, "checkpoint", "out")?;
    let corpus = load_corpus(cfg, None)?;
    let queries = load_queries(require(&cfg.paths.queries, "queries", "queries")?, &corpus.vocab)?;
    let triples = read_triples(require(&cfg.paths.triples, "triples", "triples")?)?;
    let params = match init_from {
        Some(p) => load_params(p, &corpus.vocab)?,
        None => {
            let enc = EncoderConfig { vocab_size: corpus.vocab.len(), ..cfg.encoder.clone() };
            ParamStore::init(&enc, &mut Rng::for_purpose(cfg.seed, "init"))?
        }
    };
    let table = TextTable::new(&queries, &corpus.docs);
    let outcome = finetune(params, &triples, &table, &cfg.finetune)?;
    Checkpoint::new(outcome.checkpoint.params).save(out)?;
    if let Some(p) = log_path {
        let mut text = String::from("step\tloss\n");
        for (i, l) in outcome.losses.iter().enumerate() {
            text.push_str(&format!("{}\t{l}\n", i + 1));
        }
        std::fs::write(p, text).map_err(|e| Error::io(p, e))?;
    }
    log::info!(
        "{} steps, final loss {:.4}; checkpoint in {}",
        outcome.losses.len(),
        outcome.losses.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn build_index_cmd(cfg: &ExperimentConfig) -> Result<()> {
    let out = require(&cfg.paths.index, "index", "out")?;
    let corpus = load_corpus(cfg, None)?;
    let params = load_params(require(&cfg.paths.checkpoint, "checkpoint", "checkpoint")?, &corpus.vocab)?;
    let index = build_index(&params, &corpus.docs, cfg.finetune.passage_max_len, cfg.finetune.projector)?;
    index.save(out)?;
    log::info!("indexed {} documents of dimension {} into {}", index.len(), index.dim, out.display());
    Ok(())
}

fn search(cfg: &ExperimentConfig, tag: &str) -> Result<()> {
    let out = require(&cfg.paths.run, "run", "out")?;
    let vocab = Vocabulary::read_tsv(require(&cfg.paths.vocab, "vocab", "vocab")?)?;
    let queries = load_queries(require(&cfg.paths.queries, "queries", "queries")?, &vocab)?;
    let params = load_params(require(&cfg.paths.checkpoint, "checkpoint", "checkpoint")?, &vocab)?;
    let index = DenseIndex::load(require(&cfg.paths.index, "index", "index")?)?;
    let run = search_queries(&params, &index, &queries, cfg.retrieval.topk, cfg.finetune.query_max_len)?;
    run.write(out, tag)?;
    log::info!("ranked {} queries into {}", queries.len(), out.display());
    Ok(())
}

fn mine(cfg: &ExperimentConfig, lexical: bool) -> Result<()> {
    let out_dir = require(&cfg.paths.out_dir, "out_dir", "out-dir")?;
    let corpus = load_corpus(cfg, None)?;
    let queries = load_queries(require(&cfg.paths.queries, "queries", "queries")?, &corpus.vocab)?;
    let qrels = Qrels::read(require(&cfg.paths.qrels, "qrels", "qrels")?)?;
    let seeds: Vec<TrainingTriple> = match &cfg.paths.triples {
        Some(p) => read_triples(p)?,
        None => triples_from_qrels(&qrels, &queries.iter().map(|q| q.id.clone()).collect::<Vec<_>>()),
    };
    if seeds.is_empty() {
        return Err(Error::Invalid("no judged query to mine negatives for".into()));
    }
    let table = TextTable::new(&queries, &corpus.docs);
    create_dir(out_dir)?;
    if lexical {
        let mut rng = Rng::for_purpose(cfg.seed, "negatives");
        let k = cfg.retrieval.mine_topk;
        let triples = lexical_negatives(&seeds, &table, &corpus.docs, &qrels, k, cfg.finetune.negatives, &mut rng)?;
        let path = out_dir.join("triples-iter0.tsv");
        write_triples(&path, &triples)?;
        log::info!("{} triples with lexical negatives written to {}", triples.len(), path.display());
        return Ok(());
    }
    let params = load_params(require(&cfg.paths.checkpoint, "checkpoint", "checkpoint")?, &corpus.vocab)?;
    let plan = MiningPlan {
        iterations: cfg.retrieval.iterations,
        topk: cfg.retrieval.mine_topk,
        finetune: cfg.finetune.clone(),
        out_dir: out_dir.to_path_buf(),
    };
    let (_, rounds) = iterative_mining(params, &seeds, &table, &corpus.docs, &qrels, &plan)?;
    for (i, r) in rounds.iter().enumerate() {
        log::info!(
            "round {}: final loss {:.4}, triples {}, checkpoint {}",
            i + 1,
            r.final_loss,
            r.triples_path.display(),
            r.checkpoint_path.display()
        );
    }
    Ok(())
}

fn eval(cfg: &ExperimentConfig, metrics: &str) -> Result<()> {
    let metrics = parse_metrics(metrics)?;
    let run = Run::read(require(&cfg.paths.run, "run", "run")?)?;
    let qrels = Qrels::read(require(&cfg.paths.qrels, "qrels", "qrels")?)?;
    stdout_write(&to_tsv(&evaluate(&run, &qrels, &metrics)))
}

fn gradcheck_cmd(cfg: &ExperimentConfig, cases: usize, threshold: f64, json: bool) -> Result<()> {
    let gc = GradcheckConfig { cases, seed: cfg.seed, threshold, ..Default::default() };
    let report = gradcheck::run(&gc)?;
    if json {
        let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
        stdout_write(&format!("{text}\n"))?;
    } else {
        let worst = report.cases.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error));
        stdout_write(&format!(
            "cases\t{}\nmax_rel_error\t{:e}\nworst_tensor\t{}\nthreshold\t{:e}\nresult\t{}\n",
            report.cases.len(),
            report.max_rel_error,
            worst.map_or("", |c| c.worst_tensor.as_str()),
            report.threshold,
            if report.passed { "pass" } else { "fail" }
        ))?;
    }
    if report.passed {
        Ok(())
    } else {
        Err(Error::Invalid(format!(
            "gradient check failed: max relative error {:e} above {:e}",
            report.max_rel_error, report.threshold
        )))
    }
}

fn ablate_cmd(cfg: &ExperimentConfig, axis: ablate::Axis, eval_queries: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let corpus = load_corpus(cfg, Some(cfg.encoder.max_len))?;
    let base = cfg.pretrain_setup(corpus.vocab.len());
    let downstream = match &cfg.paths.triples {
        Some(triples) => {
            let whole = load_corpus(cfg, None)?;
            let queries = load_queries(require(&cfg.paths.queries, "queries", "queries")?, &corpus.vocab)?;
            let eval_path = eval_queries.ok_or_else(|| Error::Config("--triples needs --eval-queries".into()))?;
            let test_queries = load_queries(eval_path, &corpus.vocab)?;
            let all: Vec<Document> = queries.iter().chain(&test_queries).cloned().collect();
            Some(Downstream {
                triples: read_triples(triples)?,
                table: TextTable::new(&all, &whole.docs),
                docs: whole.docs,
                test_queries,
                qrels: Qrels::read(require(&cfg.paths.qrels, "qrels", "qrels")?)?,
                finetune: cfg.finetune.clone(),
            })
        }
        None => None,
    };
    let rows = ablate::run_axis(axis, &base, &corpus.docs, &corpus.stopwords, downstream.as_ref())?;
    match out {
        Some(p) => {
            ablate::write_tsv(p, &rows)?;
            log::info!("{} rows written to {}", rows.len(), p.display());
            Ok(())
        }
        None => {
            let mut text = format!("{}\n", ablate::TSV_HEADER);
            for r in &rows {
                text.push_str(&r.to_tsv());
                text.push('\n');
            }
            stdout_write(&text)
        }
    }
}
