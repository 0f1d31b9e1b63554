//! Line-delimited JSON metric reports.
//!
//! One record per frame followed by one aggregate record. JSON has no
//! infinity, so a PSNR of +∞ (identical images) is written as the string
//! `"inf"`.

use serde_json::{json, Value};

use crate::train::FrameMetrics;

pub const INFINITY_SENTINEL: &str = "inf";

pub fn psnr_value(psnr: f64) -> Value {
    if psnr == f64::INFINITY {
        Value::String(INFINITY_SENTINEL.into())
    } else {
        json!(psnr)
    }
}

pub fn frame_record(m: &FrameMetrics, split: &str) -> Value {
    json!({
        "kind": "frame",
        "index": m.index,
        "time": m.time,
        "split": split,
        "psnr": psnr_value(m.psnr),
        "ssim": m.ssim,
    })
}

/// Mean SSIM and mean PSNR; the PSNR mean is `inf` if any frame is exact.
pub fn aggregate_record(metrics: &[FrameMetrics], split: &str) -> Value {
    let n = metrics.len();
    let mean =
        |f: fn(&FrameMetrics) -> f64| if n == 0 { f64::NAN } else { metrics.iter().map(f).sum::<f64>() / n as f64 };
    let psnr = mean(|m| m.psnr);
    let ssim = mean(|m| m.ssim);
    json!({
        "kind": "aggregate",
        "split": split,
        "frames": n,
        "psnr": if psnr.is_nan() { Value::Null } else { psnr_value(psnr) },
        "ssim": if ssim.is_nan() { Value::Null } else { json!(ssim) },
    })
}

/// Report text: per-frame lines, then an aggregate line per split present.
pub fn render_report(rows: &[(FrameMetrics, &str)]) -> String {
    let mut out = String::new();
    for (m, split) in rows {
        out.push_str(&frame_record(m, split).to_string());
        out.push('\n');
    }
    let mut splits: Vec<&str> = rows.iter().map(|r| r.1).collect();
    splits.dedup();
    splits.sort_unstable();
    splits.dedup();
    for split in splits {
        let ms: Vec<FrameMetrics> = rows.iter().filter(|r| r.1 == split).map(|r| r.0).collect();
        out.push_str(&aggregate_record(&ms, split).to_string());
        out.push('\n');
    }
    let all: Vec<FrameMetrics> = rows.iter().map(|r| r.0).collect();
    out.push_str(&aggregate_record(&all, "all").to_string());
    out.push('\n');
    out
}
