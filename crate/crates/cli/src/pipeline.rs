//! Runs stages in dependency order and summarizes the results.

use anyhow::{bail, Context, Result};

use crate::provenance::StageStatus;
use crate::stages::{self, Pipeline};
use crate::workspace::Workspace;

/// Every stage, in the order `run-all` executes them.
pub const STAGE_ORDER: &[&str] = &[
    "demo-corpus",
    "simulate-rir",
    "augment",
    "sad",
    "features",
    "train-extractor",
    "embed",
    "train-backend",
    "score",
    "normalize",
    "fuse",
    "calibrate",
    "evaluate",
];

pub fn run_stage_by_name(p: &Pipeline, name: &str) -> Result<StageStatus> {
    match name {
        "demo-corpus" => stages::demo_corpus(p),
        "simulate-rir" => stages::simulate_rir(p),
        "augment" => stages::augment(p),
        "sad" => stages::sad(p),
        "features" => stages::features(p),
        "train-extractor" => stages::train_extractor(p),
        "embed" => stages::embed(p),
        "train-backend" => stages::train_backend(p),
        "score" => stages::score(p),
        "normalize" => stages::normalize(p),
        "fuse" => stages::fuse(p),
        "calibrate" => stages::calibrate(p),
        "evaluate" => stages::evaluate(p),
        other => bail!("unknown stage {other:?}"),
    }
}

/// Runs the full pipeline, returning each stage's status in order.
pub fn run_all(p: &Pipeline) -> Result<Vec<(&'static str, StageStatus)>> {
    let mut statuses = Vec::with_capacity(STAGE_ORDER.len());
    for &name in STAGE_ORDER {
        let status = run_stage_by_name(p, name)
            .with_context(|| format!("stage {name} failed"))?;
        statuses.push((name, status));
    }
    Ok(statuses)
}

/// Human-readable digest of reports/report.json.
pub fn summarize(ws: &Workspace) -> Result<String> {
    let path = ws.full_report();
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("reading {}", path.display()))?;
    let report: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;

    let pct = |v: &serde_json::Value| v.as_f64().map(|x| x * 100.0).unwrap_or(f64::NAN);
    let num = |v: &serde_json::Value| v.as_f64().unwrap_or(f64::NAN);

    let mut out = String::new();
    if let Some(systems) = report["systems"].as_object() {
        out.push_str("per-system eval metrics (after s-norm):\n");
        for (name, splits) in systems {
            let m = &splits["eval"]["snorm"];
            out.push_str(&format!(
                "  {name:<12} EER {:5.2}%  minDCF {:.3}\n",
                pct(&m["eer"]),
                num(&m["min_dcf"])
            ));
        }
    }
    let fused = &report["fusion"]["eval"];
    if fused.is_object() {
        out.push_str(&format!(
            "fused eval:    EER {:5.2}%  minDCF {:.3}\n",
            pct(&fused["eer"]),
            num(&fused["min_dcf"])
        ));
    }
    let strat = &report["strategy"];
    if strat.is_object() {
        let m = &strat["eval"];
        out.push_str(&format!(
            "calibrated ({}): EER {:5.2}%  minDCF {:.3}  actDCF {:.3}  Cllr {:.3}\n",
            strat["name"].as_str().unwrap_or("?"),
            pct(&m["eer"]),
            num(&m["min_dcf"]),
            num(&m["act_dcf"]),
            num(&m["cllr"])
        ));
    }
    Ok(out)
}
