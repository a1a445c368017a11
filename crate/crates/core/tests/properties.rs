use std::collections::BTreeMap;

use proptest::prelude::*;
use spanlab_core::corpus::{chunk, Document};
use spanlab_core::eval::{per_query, Metric, MetricKind};
use spanlab_core::retrieval::{search_topk, DenseIndex};
use spanlab_core::spans::{sample_group, validate_span, Granularity, SamplerConfig};

fn judged_and_ranking() -> impl Strategy<Value = (BTreeMap<String, u32>, Vec<String>)> {
    (prop::collection::btree_map(0u32..40, 0u32..4, 0..12), prop::collection::vec(0u32..40, 0..30)).prop_map(
        |(judged, ranking)| {
            let judged = judged.into_iter().map(|(d, r)| (format!("d{d}"), r)).collect();
            let mut seen = std::collections::HashSet::new();
            let ranking = ranking.into_iter().filter(|d| seen.insert(*d)).map(|d| format!("d{d}")).collect();
            (judged, ranking)
        },
    )
}

proptest! {
    #[test]
    fn metrics_stay_in_unit_interval((judged, ranking) in judged_and_ranking(), k in 1usize..40) {
        for kind in [MetricKind::Mrr, MetricKind::Ndcg, MetricKind::Recall] {
            let v = per_query(Metric { kind, k }, &ranking, &judged);
            prop_assert!((0.0..=1.0).contains(&v), "{kind:?}@{k} = {v}");
        }
    }

    #[test]
    fn mrr_and_recall_grow_with_the_cutoff((judged, ranking) in judged_and_ranking(), k in 1usize..40) {
        for kind in [MetricKind::Mrr, MetricKind::Recall] {
            let lo = per_query(Metric { kind, k }, &ranking, &judged);
            let hi = per_query(Metric { kind, k: k + 1 }, &ranking, &judged);
            prop_assert!(lo <= hi);
        }
    }

    #[test]
    fn search_matches_a_full_sort(
        rows in prop::collection::vec(prop::collection::vec(-2i8..=2, 3), 1..60),
        query in prop::collection::vec(-2i8..=2, 3),
        k in 1usize..80,
    ) {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|&x| x as f64).collect()).collect();
        let query: Vec<f64> = query.iter().map(|&x| x as f64).collect();
        let ids: Vec<String> = (0..rows.len()).map(|i| format!("doc{:03}", (i * 37) % 101)).collect();
        let index = DenseIndex::from_rows(ids.clone(), &rows, "p".into()).unwrap();
        let mut oracle: Vec<(String, f64)> = ids
            .iter()
            .zip(&rows)
            .map(|(id, r)| (id.clone(), r.iter().zip(&query).map(|(a, b)| a * b).sum()))
            .collect();
        oracle.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        oracle.truncate(k);
        prop_assert_eq!(search_topk(&index, &query, k).unwrap(), oracle);
    }

    #[test]
    fn sampled_spans_are_valid(n in 2usize..300, seed in any::<u64>(), stop_every in 1usize..5) {
        let doc = Document { id: format!("doc-{n}"), tokens: (0..n as u32).map(|i| 10 + i % 50).collect() };
        let stopwords: Vec<bool> = (0..70).map(|i| i % stop_every == 0).collect();
        let cfg = SamplerConfig { seed, ..Default::default() };
        let spans = sample_group(&doc, &cfg, &stopwords).unwrap();
        prop_assert_eq!(spans.len(), 20);
        for s in &spans {
            prop_assert!(validate_span(s, n, &cfg.bounds).is_ok(), "{:?}", s);
            if s.granularity == Granularity::Word && stop_every > 1 {
                prop_assert!(!stopwords[doc.tokens[s.start] as usize]);
            }
        }
    }

    #[test]
    fn chunks_cover_the_document(tokens in prop::collection::vec(0u32..100, 0..400), max_len in 2usize..64) {
        let doc = Document { id: "d".into(), tokens };
        let parts = chunk(&doc, max_len);
        prop_assert!(parts.iter().all(|c| c.n() <= max_len - 1));
        let joined: Vec<u32> = parts.iter().flat_map(|c| c.tokens.iter().copied()).collect();
        prop_assert_eq!(joined, doc.tokens.clone());
        if parts.len() > 1 {
            let ids: Vec<String> = (0..parts.len()).map(|k| format!("d#{k}")).collect();
            prop_assert_eq!(parts.iter().map(|c| c.id.clone()).collect::<Vec<_>>(), ids);
        }
    }
}
