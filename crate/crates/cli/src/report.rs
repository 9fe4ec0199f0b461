use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use log::info;
use serde_json::Value;

use crate::evaluate::{evaluate, read_table};
use crate::manifest::Manifest;

/// `{"group_a": [0], "group_b": [1, 2]}` as `0|1,2`.
fn fmt_grouping(g: &Value) -> String {
    let side = |k: &str| {
        g[k].as_array()
            .map(|a| a.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","))
            .unwrap_or_default()
    };
    if g.is_null() {
        "-".into()
    } else {
        format!("{}|{}", side("group_a"), side("group_b"))
    }
}

fn fmt_opt(v: &Value) -> String {
    match v {
        Value::Null => "-".into(),
        Value::Number(n) => n.as_f64().map_or_else(|| n.to_string(), |x| format!("{x:.4}")),
        other => other.to_string(),
    }
}

pub fn run(dir: &Path, truth: Option<&Path>) -> Result<()> {
    let mut manifest = Manifest::load(dir)?;
    manifest.verify(dir)?;
    let report_path = manifest
        .find(dir, "bss_report")?
        .with_context(|| format!("{} lists no report.json; run `ibss bss` first", dir.join(crate::manifest::FILE).display()))?;
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&report_path)?)
        .with_context(|| format!("parsing {}", report_path.display()))?;

    let mut text = String::new();
    let mut line = |s: String| {
        println!("{s}");
        text.push_str(&s);
        text.push('\n');
    };
    line(format!("verdict:        {}", report["verdict"].as_str().unwrap_or("?")));
    line(format!("grouping:       {}", fmt_grouping(&report["grouping"])));
    line(format!("statistic:      {} (threshold {})", fmt_opt(&report["statistic"]), fmt_opt(&report["threshold"])));
    line(format!("direction_cov:  {}  linear: {}", fmt_opt(&report["direction_cov"]), report["linear"]));
    line(format!("cells:          {}", report["cells"]));
    if let Some(cands) = report["candidates"].as_array() {
        line(format!("{:<24} {:>8} {:>8} {:>10}", "grouping", "res_A", "res_B", "statistic"));
        for c in cands {
            line(format!(
                "{:<24} {:>8} {:>8} {:>10}",
                fmt_grouping(&c["grouping"]),
                fmt_opt(&c["test_a"]["residual_fraction"]),
                fmt_opt(&c["test_b"]["residual_fraction"]),
                fmt_opt(&c["factorization"]["statistic"]),
            ));
        }
    }

    let truth = match truth {
        Some(p) => Some(p.to_path_buf()),
        None => manifest.find(dir, "ground_truth")?,
    };
    let map = manifest.find(dir, "source_map")?;
    if let (Some(truth), Some(map)) = (truth, map) {
        let sigma = read_table(&map)?;
        let gt = read_table(&truth)?;
        let eval = evaluate(&sigma, &gt)?;
        line(String::new());
        line(format!("evaluation against {} ({} samples)", truth.display(), eval.samples));
        for p in &eval.pairs {
            line(format!("  {:<10} ~ {:<14} spearman {:+.4}", p.sigma, p.truth, p.spearman));
        }
        line(format!("  largest cross-pairing |spearman| {:.4}", eval.max_cross));
        std::fs::write(dir.join("evaluation.json"), serde_json::to_string_pretty(&eval)? + "\n")?;
        manifest.record(dir, "evaluation.json", "report", "evaluation")?;

        // Recovered coordinate next to its paired truth column, for scatter plots.
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(dir.join("scatter.csv"))?));
        let mut header = vec!["t".to_string()];
        for p in &eval.pairs {
            header.push(p.sigma.clone());
            header.push(p.truth.clone());
        }
        w.write_record(&header)?;
        let dt = gt.t[1] - gt.t[0];
        for (i, &t) in sigma.t.iter().enumerate() {
            let j = ((t - gt.t[0]) / dt).round();
            if j < 0.0 || j as usize >= gt.t.len() {
                continue;
            }
            let mut rec = vec![t.to_string()];
            for (a, p) in eval.pairs.iter().enumerate() {
                let b = gt.names.iter().position(|n| *n == p.truth).unwrap();
                rec.push(sigma.columns[a][i].to_string());
                rec.push(gt.columns[b][j as usize].to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        manifest.record(dir, "scatter.csv", "report", "scatter")?;
    }
    let mut f = File::create(dir.join("summary.txt"))?;
    f.write_all(text.as_bytes())?;
    manifest.record(dir, "summary.txt", "report", "summary")?;
    manifest.save(dir)?;
    info!("wrote summary.txt");
    Ok(())
}
