//! JSON-lines reports and ablation tables.

use std::io::{self, Write};

use serde::Serialize;
use serde_json::json;

use super::{Counters, RunOutput, Variant};
use crate::serve_eval::{FinalReport, METRIC_KS};

#[derive(Debug, Serialize)]
struct Header<'a> {
    kind: &'static str,
    variant: String,
    stream_hash: &'a str,
    config: std::collections::BTreeMap<&'static str, String>,
    counters: &'a Counters,
}

/// Header line (resolved config, stream hash, counters), one record per
/// period × slice × metric × K, then the mean over test periods.
pub fn write_jsonl<W: Write>(out: &RunOutput, mut w: W) -> io::Result<()> {
    let header = Header {
        kind: "header",
        variant: out.config.variant.to_string(),
        stream_hash: &out.stream_hash,
        config: out.config.to_kv(),
        counters: &out.counters,
    };
    serde_json::to_writer(&mut w, &header)?;
    writeln!(w)?;
    for r in &out.reports {
        for rec in r.records() {
            serde_json::to_writer(&mut w, &rec)?;
            writeln!(w)?;
        }
    }
    let summary = json!({
        "kind": "final",
        "n_periods": out.final_report.n_periods,
        "cold": out.final_report.cold,
        "popular": out.final_report.popular,
        "loss_trace": out.trace.iter().map(|t| json!({"period": t.period, "mean_loss": t.mean_loss, "mean_total": t.mean_total})).collect::<Vec<_>>(),
    });
    serde_json::to_writer(&mut w, &summary)?;
    writeln!(w)
}

/// Plain-text comparison table: one row per variant, cold and popular
/// Recall/NDCG at every K.
pub fn ablation_table(rows: &[(Variant, FinalReport)]) -> String {
    let mut s = String::from("variant");
    for slice in ["cold", "popular"] {
        for k in METRIC_KS {
            s.push_str(&format!("\t{slice}_R@{k}\t{slice}_N@{k}"));
        }
    }
    s.push('\n');
    for (v, f) in rows {
        s.push_str(&v.to_string());
        for m in [&f.cold, &f.popular] {
            for j in 0..METRIC_KS.len() {
                s.push_str(&format!("\t{:.4}\t{:.4}", m.recall[j], m.ndcg[j]));
            }
        }
        s.push('\n');
    }
    s
}
