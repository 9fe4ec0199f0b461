use std::fs::File;
use std::io::BufWriter;

use anyhow::{bail, Result};
use ibss::generators::{make_toy_system, mix_scene, write_ground_truth, write_wav};
use ibss::trajectory::{save_series, write_csv};
use log::info;
use serde::Serialize;

use crate::config::SynthSource;
use crate::Ctx;

#[derive(Serialize)]
struct SceneSummary {
    duration_s: f64,
    samples: usize,
    realized_gain_db: Vec<f64>,
    normalization: f64,
    /// Clock of the ground-truth rows: one per output feature frame.
    truth_dt: f64,
}

pub fn run(ctx: &mut Ctx, duration: Option<f64>) -> Result<()> {
    match ctx.cfg.synth.source {
        SynthSource::Scene => scene(ctx, duration)?,
        SynthSource::Toy => toy(ctx, duration)?,
    }
    ctx.echo_config("synth")
}

fn scene(ctx: &mut Ctx, duration: Option<f64>) -> Result<()> {
    if let Some(d) = duration {
        ctx.cfg.synth.scene.duration_s = d;
    }
    let spec = &ctx.cfg.synth.scene;
    info!("synthesizing {} s, {} voices", spec.duration_s, spec.voices.len());
    let scene = mix_scene(spec)?;
    write_wav(&ctx.path("scene.wav"), &scene.samples)?;

    // States at the centre of every output feature frame, so truth row i
    // lines up with trajectory sample i.
    let fc = &ctx.cfg.features;
    fc.validate()?;
    let (fl, hop) = (fc.frame_len(), fc.hop());
    let raw_frames = if scene.samples.len() >= fl { 1 + (scene.samples.len() - fl) / hop } else { 0 };
    let frames = if fc.pair_average { raw_frames / 2 } else { raw_frames };
    let rows: Vec<Vec<f64>> = (0..frames)
        .map(|i| {
            let t = fc.frame_center(i);
            scene.states.iter().map(|s| s.eval(t)[0]).collect()
        })
        .collect();
    write_ground_truth(BufWriter::new(File::create(ctx.path("ground_truth.csv"))?), fc.output_dt(), &rows)?;

    let summary = SceneSummary {
        duration_s: spec.duration_s,
        samples: scene.samples.len(),
        realized_gain_db: (0..scene.voices.len()).map(|k| scene.realized_gain_db(k)).collect(),
        normalization: scene.normalization,
        truth_dt: fc.output_dt(),
    };
    std::fs::write(ctx.path("synth.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    ctx.record("scene.wav", "synth", "scene_wav")?;
    ctx.record("ground_truth.csv", "synth", "ground_truth")?;
    ctx.record("synth.json", "synth", "synth_summary")?;
    info!("wrote scene.wav ({} samples) and {} truth rows", scene.samples.len(), rows.len());
    Ok(())
}

fn toy(ctx: &mut Ctx, duration: Option<f64>) -> Result<()> {
    let toy = &mut ctx.cfg.synth.toy;
    if let Some(d) = duration {
        if !(d > 0.0) {
            bail!("duration must be positive");
        }
        toy.samples = (d / toy.dt).round() as usize;
    }
    info!("generating {} toy samples", toy.samples);
    let sys = make_toy_system(&toy.system, toy.samples, toy.dt)?;
    let traj = format!("trajectory.{}", ctx.cfg.output.series_ext());
    save_series(&sys.observed, &ctx.path(&traj), ctx.cfg.output.series_format)?;
    let names = (1..=sys.sources.dim()).map(|k| format!("source{k}")).collect();
    let sources = sys.sources.with_channel_names(names)?;
    write_csv(&sources, BufWriter::new(File::create(ctx.path("ground_truth.csv"))?))?;
    ctx.record(&traj, "synth", "trajectory")?;
    ctx.record("ground_truth.csv", "synth", "ground_truth")?;
    Ok(())
}
