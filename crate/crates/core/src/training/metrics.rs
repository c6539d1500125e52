//! Metrics output: line-delimited JSON and a CSV summary.
//!
//! The CSV starts with `#`-prefixed provenance lines holding the resolved
//! config as compact JSON, followed by the fixed header
//! `epoch,train_loss,train_acc,test_acc,param_count,seed`. Floats use Rust's
//! shortest round-trip formatting, so identical runs give identical bytes.

use std::io::Write;

use serde_json::json;

use crate::error::Result;

use super::train::History;

pub const CSV_COLUMNS: &[&str] = &["epoch", "train_loss", "train_acc", "test_acc", "param_count", "seed"];

pub fn write_csv<W: Write>(mut w: W, history: &History, config: &serde_json::Value) -> Result<()> {
    writeln!(w, "# config: {}", serde_json::to_string(config)?)?;
    writeln!(w, "{}", CSV_COLUMNS.join(","))?;
    for r in &history.records {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.epoch, r.train_loss, r.train_acc, r.test_acc, history.param_count, history.seed
        )?;
    }
    Ok(())
}

pub fn write_jsonl<W: Write>(mut w: W, history: &History, config: &serde_json::Value) -> Result<()> {
    writeln!(w, "{}", json!({"type": "config", "config": config}))?;
    for r in &history.records {
        writeln!(
            w,
            "{}",
            json!({
                "type": "epoch",
                "epoch": r.epoch,
                "train_loss": r.train_loss,
                "train_acc": r.train_acc,
                "test_acc": r.test_acc,
                "param_count": history.param_count,
                "seed": history.seed,
            })
        )?;
    }
    let last = history.last();
    writeln!(
        w,
        "{}",
        json!({
            "type": "summary",
            "epochs": last.epoch,
            "initial_train_loss": history.initial().train_loss,
            "final_train_loss": last.train_loss,
            "final_train_acc": last.train_acc,
            "final_test_acc": last.test_acc,
            "param_count": history.param_count,
            "seed": history.seed,
        })
    )?;
    Ok(())
}
