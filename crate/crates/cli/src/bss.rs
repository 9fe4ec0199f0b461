use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{Context, Result};
use ibss::invariants::{write_multiplets_csv, IndexGrouping};
use ibss::pipeline::{run_bss, CellStats};
use ibss::trajectory::{load_series, SeriesFormat};
use log::info;
use serde::Serialize;

use crate::Ctx;

/// Run bookkeeping that is allowed to vary between runs.
#[derive(Serialize)]
struct RunReport {
    tool_version: String,
    input: String,
    threads: usize,
    timings: Vec<(String, f64)>,
    cells: CellStats,
    verdict: String,
    /// Grouping behind `source_map.csv`: the winner, else the first charted candidate.
    source_map_grouping: Option<IndexGrouping>,
    outputs: Vec<String>,
}

pub fn run(ctx: &mut Ctx, input: Option<&Path>) -> Result<()> {
    let path = ctx.input(input, "trajectory")?;
    let ts = load_series(&path, SeriesFormat::from_path(&path)).with_context(|| format!("loading {}", path.display()))?;
    info!("{} samples of a {}-D trajectory", ts.len(), ts.dim());
    let out = run_bss(&ts, &ctx.cfg.bss)?;
    let report = out.report(ctx.cfg.bss.partition.factorization.threshold);
    info!("verdict {}", report.verdict);

    let mut outputs = vec!["report.json".to_string()];
    std::fs::write(ctx.path("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    ctx.record("report.json", "bss", "bss_report")?;

    let charted = out
        .winner()
        .filter(|c| c.source_map.is_some())
        .or_else(|| out.search.candidates.iter().find(|c| c.source_map.is_some()));
    if let Some(c) = charted {
        let map = c.source_map.as_ref().unwrap();
        map.write_csv(BufWriter::new(File::create(ctx.path("source_map.csv"))?))?;
        ctx.record("source_map.csv", "bss", "source_map")?;
        outputs.push("source_map.csv".into());
        if let (true, Some(field)) = (ctx.cfg.output.plot_data, &c.multiplets) {
            write_multiplets_csv(field, &out.index, BufWriter::new(File::create(ctx.path("invariant_clouds.csv"))?))?;
            ctx.record("invariant_clouds.csv", "bss", "invariant_clouds")?;
            outputs.push("invariant_clouds.csv".into());
        }
    }

    let run = RunReport {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        input: path.display().to_string(),
        threads: rayon::current_num_threads(),
        timings: out.timings.clone(),
        cells: out.cells,
        verdict: report.verdict.clone(),
        source_map_grouping: charted.map(|c| c.grouping.clone()),
        outputs,
    };
    std::fs::write(ctx.path("run.json"), serde_json::to_string_pretty(&run)? + "\n")?;
    ctx.record("run.json", "bss", "run_report")?;
    ctx.echo_config("bss")
}
