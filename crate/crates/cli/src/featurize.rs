use std::path::Path;

use anyhow::{Context, Result};
use ibss::audiofeatures::{featurize, reduce_dimension};
use ibss::generators::read_wav;
use ibss::trajectory::save_series;
use log::info;

use crate::Ctx;

pub fn run(ctx: &mut Ctx, input: Option<&Path>, no_reduce: bool) -> Result<()> {
    let wav = ctx.input(input, "scene_wav")?;
    let waveform = read_wav(&wav).with_context(|| format!("reading {}", wav.display()))?;
    let features = featurize(&waveform, &ctx.cfg.features)?;
    info!("{} feature frames of {} channels", features.len(), features.dim());
    let ext = ctx.cfg.output.series_ext();
    let fmt = ctx.cfg.output.series_format;
    let feat_name = format!("features.{ext}");
    save_series(&features, &ctx.path(&feat_name), fmt)?;
    ctx.record(&feat_name, "featurize", "features")?;

    if !no_reduce {
        let red = &ctx.cfg.reduction;
        let (traj, model) = reduce_dimension(&features, red.target_dim, &red.config)
            .with_context(|| format!("reducing to {} dimensions", red.target_dim))?;
        info!(
            "reduced to {}-D, residual {:.3}, intrinsic dimension estimate {}",
            red.target_dim, model.chart.residual, model.intrinsic_dim_estimate
        );
        let traj_name = format!("trajectory.{ext}");
        save_series(&traj, &ctx.path(&traj_name), fmt)?;
        std::fs::write(ctx.path("reduction.json"), serde_json::to_string(&model)? + "\n")?;
        ctx.record(&traj_name, "featurize", "trajectory")?;
        ctx.record("reduction.json", "featurize", "reduction_model")?;
    }
    ctx.echo_config("featurize")
}
