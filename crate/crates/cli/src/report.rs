//! Tabular reports derived from the JSON outputs of the other commands.
//!
//! Every table is rebuilt from scratch, so running `report` twice produces
//! byte-identical files. Tables whose inputs are missing are skipped.

use std::fmt::Write as _;
use std::fs;

use hybridlm::train::{self, RunLog};
use hybridlm::compress::CandidateReport;
use hybridlm::Result;

use crate::run::{read_json, BenchOutput, DistillOutput, RunDir};

/// Rebuilds every table whose inputs exist. Returns the files written.
pub fn write_all(dir: &RunDir) -> Result<Vec<String>> {
    let mut written = Vec::new();
    let mut put = |name: &str, body: String| -> Result<()> {
        fs::write(dir.report(name), body)?;
        written.push(name.to_string());
        Ok(())
    };
    let full = dir.log("train_full.ndjson");
    let fp8 = dir.log("train_fp8_mixed.ndjson");
    if full.exists() && fp8.exists() {
        let a = RunLog::from_ndjson(&fs::read_to_string(full)?)?;
        let b = RunLog::from_ndjson(&fs::read_to_string(fp8)?)?;
        put("loss_gap.csv", loss_gap_csv(&a, &b)?)?;
    }
    let cands = dir.report("candidates.jsonl");
    if cands.exists() {
        let text = fs::read_to_string(cands)?;
        let rows = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Into::into))
            .collect::<Result<Vec<CandidateReport>>>()?;
        put("candidates.csv", candidates_csv(&rows))?;
    }
    let bench = dir.report("bench.json");
    if bench.exists() {
        put("flops.csv", flops_csv(&read_json(&bench)?))?;
    }
    let distill = dir.report("distill.json");
    if distill.exists() {
        let d: DistillOutput = read_json(&distill)?;
        put("distill_table.md", distill_markdown(&d))?;
        put("distill_table.csv", distill_csv(&d))?;
    }
    Ok(written)
}

pub fn loss_gap_csv(full: &[train::LogRecord], fp8: &[train::LogRecord]) -> Result<String> {
    let mut s = String::from("tokens,full_train,fp8_train,train_gap,full_val,fp8_val,val_gap\n");
    for r in train::loss_gap(full, fp8)? {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.tokens, r.full_train, r.fp8_train, r.train_gap, r.full_val, r.fp8_val, r.val_gap
        )
        .unwrap();
    }
    Ok(s)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per candidate, for accuracy-vs-agreement scatter plots.
pub fn candidates_csv(rows: &[CandidateReport]) -> String {
    let mut s = String::from(
        "id,pattern,ffn_width,params,memory_bytes,next_token_accuracy,parent_agreement,post_prune_loss,post_short_distill_avg\n",
    );
    for c in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            c.id,
            c.spec.pattern(),
            c.ffn_width,
            c.spec.count_params(),
            c.memory_bytes,
            c.next_token_accuracy,
            c.parent_agreement,
            opt(c.post_prune_loss),
            opt(c.post_short_distill_avg)
        )
        .unwrap();
    }
    s
}

pub fn flops_csv(b: &BenchOutput) -> String {
    let mut s = String::from("position,hybrid_flops,baseline_flops,ratio,hybrid_kv_bytes,baseline_kv_bytes,hybrid_state_bytes\n");
    for r in &b.flops {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.position,
            r.hybrid,
            r.baseline,
            r.baseline / r.hybrid,
            r.hybrid_kv_bytes,
            r.baseline_kv_bytes,
            r.hybrid_state_bytes
        )
        .unwrap();
    }
    s
}

/// `metric | parent | pruned → distilled`.
pub fn distill_markdown(d: &DistillOutput) -> String {
    let mut s = format!(
        "Candidate {} ({}, FFN width {}), recovery {}\n\n| metric | parent | pruned → distilled |\n|---|---|---|\n",
        d.candidate.id,
        d.candidate.spec.pattern(),
        d.candidate.ffn_width,
        d.recovery.map_or("n/a".to_string(), |r| format!("{r:.3}"))
    );
    for r in &d.rows {
        writeln!(s, "| {} | {:.4} | {:.4} → {:.4} |", r.metric, r.parent, r.pruned, r.distilled).unwrap();
    }
    s
}

pub fn distill_csv(d: &DistillOutput) -> String {
    let mut s = String::from("metric,parent,pruned,distilled\n");
    for r in &d.rows {
        writeln!(s, "{},{},{},{}", r.metric, r.parent, r.pruned, r.distilled).unwrap();
    }
    s
}
