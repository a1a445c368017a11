//! Criterion benchmarks for the hot paths: encoder passes, the group-wise
//! loss, exhaustive search and metric evaluation.

use std::collections::{BTreeMap, HashMap};
use std::hint::black_box;

use criterion::{BenchmarkId, Criterion, Throughput};
use spanlab_core::corpus::Document;
use spanlab_core::encoder::{forward, ParamStore};
use spanlab_core::eval::{evaluate, parse_metrics, Qrels, Run};
use spanlab_core::losses::{gwc_loss, GroupRepresentations, LossConfig};
use spanlab_core::pretrain::{batch_objective, build_batch, prepare, PretrainSetup};
use spanlab_core::retrieval::{search_topk, DenseIndex};
use spanlab_core::rng::Rng;
use spanlab_core::spans::SamplerConfig;
use spanlab_core::synth::toy_encoder;

fn gaussian(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.standard_normal()).collect()
}

fn documents(rng: &mut Rng, count: usize, len: usize, vocab: usize) -> Vec<Document> {
    (0..count)
        .map(|i| Document {
            id: format!("d{i:04}"),
            tokens: (0..len).map(|_| 4 + rng.below(vocab as u64 - 4) as u32).collect(),
        })
        .collect()
}

pub fn encoder(c: &mut Criterion) {
    let mut rng = Rng::new(1);
    let enc = toy_encoder(256);
    let params = ParamStore::init(&enc, &mut rng).expect("valid encoder");
    let mut g = c.benchmark_group("forward");
    for len in [32usize, 64, 127] {
        let tokens: Vec<u32> = (0..len).map(|i| 4 + (i as u32 * 7) % 250).collect();
        g.throughput(Throughput::Elements(len as u64));
        g.bench_with_input(BenchmarkId::from_parameter(len), &tokens, |b, t| {
            b.iter(|| forward(black_box(&params), black_box(t)).unwrap())
        });
    }
    g.finish();

    let setup = PretrainSetup {
        encoder: enc,
        sampler: SamplerConfig::default(),
        loss: LossConfig::default(),
        train: Default::default(),
    };
    let docs = documents(&mut rng, 8, 80, 256);
    let prepared = prepare(&docs, &setup.sampler, &[]).expect("sampling succeeds");
    let mut by_doc: HashMap<String, Vec<_>> = HashMap::new();
    for s in prepared.spans {
        by_doc.entry(s.doc_id.clone()).or_default().push(s);
    }
    let refs: Vec<&Document> = prepared.docs.iter().collect();
    let batch = build_batch(&refs, &by_doc, &setup.loss, 256, &mut rng).expect("batch builds");
    let objective = setup.objective();
    c.bench_function("pretrain_step_objective/8x80", |b| {
        b.iter(|| batch_objective(black_box(&params), black_box(&batch), &objective).unwrap())
    });
}

pub fn group_loss(c: &mut Criterion) {
    let mut rng = Rng::new(2);
    let cfg = LossConfig::default();
    let mut g = c.benchmark_group("gwc_loss");
    for (n, t) in [(8usize, 5usize), (32, 5), (32, 20)] {
        let reps = GroupRepresentations {
            anchors: (0..n).map(|_| gaussian(&mut rng, 32)).collect(),
            positives: (0..n).map(|_| (0..4 * t).map(|_| gaussian(&mut rng, 32)).collect()).collect(),
        };
        g.bench_with_input(BenchmarkId::new(format!("N{n}"), format!("T{t}")), &reps, |b, r| {
            b.iter(|| gwc_loss(black_box(r), &cfg).unwrap())
        });
    }
    g.finish();
}

pub fn search(c: &mut Criterion) {
    let mut rng = Rng::new(3);
    let mut g = c.benchmark_group("search_topk");
    for docs in [1_000usize, 10_000] {
        let rows: Vec<Vec<f64>> = (0..docs).map(|_| gaussian(&mut rng, 64)).collect();
        let ids = (0..docs).map(|i| format!("d{i}")).collect();
        let index = DenseIndex::from_rows(ids, &rows, "bench".into()).expect("rows share a width");
        let query = gaussian(&mut rng, 64);
        g.throughput(Throughput::Elements(docs as u64));
        g.bench_with_input(BenchmarkId::from_parameter(docs), &index, |b, idx| {
            b.iter(|| search_topk(black_box(idx), black_box(&query), 1000).unwrap())
        });
    }
    g.finish();
}

pub fn metrics(c: &mut Criterion) {
    let mut rng = Rng::new(4);
    let mut run = Run::default();
    let mut qrels = Qrels::default();
    for q in 0..500 {
        let qid = format!("q{q}");
        run.set_ranking(&qid, (0..1000).map(|r| (format!("d{r}"), -(r as f64))).collect()).unwrap();
        let mut judged = BTreeMap::new();
        while judged.len() < 5 {
            judged.insert(rng.below(2000), 1 + rng.below(3) as u32);
        }
        for (d, rel) in judged {
            qrels.insert(&qid, &format!("d{d}"), rel).unwrap();
        }
    }
    let wanted = parse_metrics("mrr@10,ndcg@10,recall@100,recall@1000").unwrap();
    c.bench_function("evaluate/500x1000", |b| b.iter(|| evaluate(black_box(&run), black_box(&qrels), &wanted)));
}

pub fn benchmarks(c: &mut Criterion) {
    encoder(c);
    group_loss(c);
    search(c);
    metrics(c);
}
