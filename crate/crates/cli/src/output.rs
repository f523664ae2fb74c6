use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use ssat_core::train::{write_atomic, EpochMetrics};

pub const METRICS_HEADER: &str = "epoch,l_cls,l_ssat,l_total,lr,eval_acc";

fn digest_line(digest: &str) -> String {
    format!("# config_digest={digest}\n")
}

/// Per-epoch rows under a digest comment and the fixed header.
pub fn metrics_csv(digest: &str, epochs: &[EpochMetrics]) -> String {
    let mut s = digest_line(digest);
    s.push_str(METRICS_HEADER);
    s.push('\n');
    for m in epochs {
        let acc = m.eval_acc.map(|a| a.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{},{},{},{}\n", m.epoch, m.l_cls, m.l_ssat, m.l_total, m.lr, acc));
    }
    s
}

/// Reads rows written by [`metrics_csv`]; wall times are not stored.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<EpochMetrics>> {
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.starts_with('#') && *l != METRICS_HEADER && !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            bail!("malformed metrics row {line:?}");
        }
        out.push(EpochMetrics {
            epoch: f[0].parse()?,
            l_cls: f[1].parse()?,
            l_ssat: f[2].parse()?,
            l_total: f[3].parse()?,
            lr: f[4].parse()?,
            eval_acc: if f[5].is_empty() { None } else { Some(f[5].parse()?) },
            wall_seconds: 0.0,
        });
    }
    Ok(out)
}

/// A CSV table with the digest comment in front.
pub fn table_csv(digest: &str, header: &str, rows: &[String]) -> String {
    let mut s = digest_line(digest);
    s.push_str(header);
    s.push('\n');
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}
