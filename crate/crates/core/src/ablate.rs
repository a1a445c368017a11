//! One-axis sweeps over the pre-training setup.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::corpus::Document;
use crate::encoder::{ParamStore, ProjectorKind};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Metric, MetricKind, Qrels};
use crate::pretrain::{group_match_rate, moving_average_gwc, prepare, train, PretrainSetup, RunOutput};
use crate::retrieval::{build_index, finetune, search_queries, FinetuneConfig, TextTable, TrainingTriple};
use crate::spans::Granularity;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Temperature,
    Spans,
    Projector,
    Granularity,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::Temperature, Axis::Spans, Axis::Projector, Axis::Granularity];
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Temperature => "temperature",
            Axis::Spans => "spans",
            Axis::Projector => "projector",
            Axis::Granularity => "granularity",
        })
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown axis {s:?}; expected temperature, spans, projector or granularity")))
    }
}

pub const TEMPERATURES: [f64; 4] = [10.0, 1.0, 0.1, 0.01];
pub const SPAN_COUNTS: [usize; 4] = [3, 5, 10, 20];

/// The setups of one sweep, labelled by the swept value. Everything else
/// stays as in `base`. Granularity variants drop one level at a time and
/// raise the per-level count so the group size stays close to the base.
pub fn variants(axis: Axis, base: &PretrainSetup) -> Vec<(String, PretrainSetup)> {
    let with = |f: &dyn Fn(&mut PretrainSetup)| {
        let mut s = base.clone();
        f(&mut s);
        s
    };
    match axis {
        Axis::Temperature => TEMPERATURES.iter().map(|&t| (t.to_string(), with(&|s| s.loss.tau = t))).collect(),
        Axis::Spans => SPAN_COUNTS
            .iter()
            .map(|&t| (t.to_string(), with(&|s| s.sampler.spans_per_granularity = t)))
            .collect(),
        Axis::Projector => [ProjectorKind::Nonlinear, ProjectorKind::Linear, ProjectorKind::None]
            .iter()
            .map(|&p| (p.to_string(), with(&|s| s.encoder.projector = p)))
            .collect(),
        Axis::Granularity => {
            let levels = &base.sampler.granularities;
            let total = levels.len() * base.sampler.spans_per_granularity;
            let mut out = vec![("all".to_string(), base.clone())];
            if levels.len() > 1 {
                let per = ((total as f64 / (levels.len() - 1) as f64).round() as usize).max(1);
                for g in levels {
                    let kept: Vec<Granularity> = levels.iter().copied().filter(|x| x != g).collect();
                    out.push((
                        format!("-{g}"),
                        with(&|s| {
                            s.sampler.granularities = kept.clone();
                            s.sampler.spans_per_granularity = per;
                        }),
                    ));
                }
            }
            out
        }
    }
}

/// Queries and judgments for the fine-tune and search part of a sweep.
#[derive(Debug, Clone)]
pub struct Downstream {
    pub triples: Vec<TrainingTriple>,
    pub table: TextTable,
    pub docs: Vec<Document>,
    pub test_queries: Vec<Document>,
    pub qrels: Qrels,
    pub finetune: FinetuneConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub axis: Axis,
    pub value: String,
    pub steps: usize,
    pub final_gwc: f64,
    pub final_mlm: f64,
    pub group_match: f64,
    pub mrr_at_10: Option<f64>,
    pub ndcg_at_10: Option<f64>,
}

pub const TSV_HEADER: &str = "axis\tvalue\tsteps\tfinal_gwc\tfinal_mlm\tgroup_match\tmrr@10\tndcg@10";

impl AblationRow {
    pub fn to_tsv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.axis,
            self.value,
            self.steps,
            self.final_gwc,
            self.final_mlm,
            self.group_match,
            opt(self.mrr_at_10),
            opt(self.ndcg_at_10)
        )
    }
}

fn downstream_metrics(params: ParamStore, d: &Downstream) -> Result<(f64, f64)> {
    let tuned = finetune(params, &d.triples, &d.table, &d.finetune)?.checkpoint.params;
    let index = build_index(&tuned, &d.docs, d.finetune.passage_max_len, d.finetune.projector)?;
    let run = search_queries(&tuned, &index, &d.test_queries, 100, d.finetune.query_max_len)?;
    let m = evaluate(
        &run,
        &d.qrels,
        &[Metric { kind: MetricKind::Mrr, k: 10 }, Metric { kind: MetricKind::Ndcg, k: 10 }],
    );
    Ok((m[0].value, m[1].value))
}

/// Runs every variant of `axis`: pre-train in memory, report the last
/// 10-step average contrastive loss, the last MLM loss and the group match
/// rate, then optionally fine-tune and evaluate on `downstream`.
pub fn run_axis(
    axis: Axis,
    base: &PretrainSetup,
    docs: &[Document],
    stopwords: &[bool],
    downstream: Option<&Downstream>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (value, setup) in variants(axis, base) {
        log::info!("ablation {axis}={value}");
        let prepared = prepare(docs, &setup.sampler, stopwords)?;
        let outcome = train(&setup, &prepared.docs, &prepared.spans, stopwords, None, &RunOutput::in_memory())?;
        let steps = outcome.log.len();
        let params = outcome.checkpoint.params;
        let group_match = group_match_rate(&params, setup.encoder.projector, &prepared.docs, &prepared.spans)?;
        let (mrr, ndcg) = match downstream {
            Some(d) => {
                let (m, n) = downstream_metrics(params, d)?;
                (Some(m), Some(n))
            }
            None => (None, None),
        };
        rows.push(AblationRow {
            axis,
            value,
            steps,
            final_gwc: moving_average_gwc(&outcome.log, steps, 10),
            final_mlm: outcome.log.last().map_or(f64::NAN, |r| r.loss.mlm),
            group_match,
            mrr_at_10: mrr,
            ndcg_at_10: ndcg,
        });
    }
    Ok(rows)
}

pub fn write_tsv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = format!("{TSV_HEADER}\n");
    for r in rows {
        text.push_str(&r.to_tsv());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
