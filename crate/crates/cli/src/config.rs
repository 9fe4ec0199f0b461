//! Run configuration: one TOML document, every field optional.

use std::path::Path;

use anyhow::{bail, Context, Result};
use ibss::audiofeatures::{FeatureConfig, ReductionConfig};
use ibss::generators::{SceneSpec, ToySystemSpec};
use ibss::pipeline::BssConfig;
use ibss::trajectory::SeriesFormat;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides the per-generator seeds when set.
    pub seed: Option<u64>,
    pub synth: SynthConfig,
    pub features: FeatureConfig,
    pub reduction: ReductionSection,
    pub bss: BssConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SynthSource {
    #[default]
    Scene,
    Toy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub source: SynthSource,
    pub scene: SceneSpec,
    pub toy: ToyConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            source: SynthSource::Scene,
            scene: SceneSpec::default().with_seed(1),
            toy: ToyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub system: ToySystemSpec,
    pub samples: usize,
    pub dt: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            system: ToySystemSpec::default(),
            samples: 200_000,
            dt: 0.005,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReductionSection {
    pub target_dim: usize,
    pub config: ReductionConfig,
}

impl Default for ReductionSection {
    fn default() -> Self {
        ReductionSection {
            target_dim: 2,
            config: ReductionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Format of trajectory and feature files.
    pub series_format: SeriesFormat,
    /// Invariant-cloud and σ CSVs for plotting.
    pub plot_data: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            series_format: SeriesFormat::Binary,
            plot_data: true,
        }
    }
}

impl OutputConfig {
    pub fn series_ext(&self) -> &'static str {
        match self.series_format {
            SeriesFormat::Csv => "csv",
            SeriesFormat::Binary => "bin",
        }
    }
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> Value {
    format!("v = {value}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(value.to_string()))
}

/// Applies `a.b.c=value`, creating intermediate tables.
pub fn apply_override(doc: &mut Table, assignment: &str) -> Result<()> {
    let Some((key, value)) = assignment.split_once('=') else {
        bail!("override `{assignment}` is not of the form key=value");
    };
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` has an empty segment");
    }
    let (last, parents) = path.split_last().unwrap();
    let mut table = doc;
    for p in parents {
        let entry = table.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        table = match entry {
            Value::Table(t) => t,
            _ => bail!("override `{key}`: `{p}` is not a table"),
        };
    }
    table.insert(last.to_string(), parse_value(value.trim()));
    Ok(())
}

pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            text.parse::<Table>().with_context(|| format!("parsing config {}", p.display()))?
        }
        None => Table::new(),
    };
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let mut cfg: RunConfig = Value::Table(doc).try_into().context("invalid configuration")?;
    if let Some(seed) = cfg.seed {
        cfg.synth.scene = cfg.synth.scene.with_seed(seed);
        cfg.synth.toy.system.seed = seed;
    }
    Ok(cfg)
}

pub fn echo(cfg: &RunConfig) -> Result<String> {
    toml::to_string_pretty(cfg).context("serializing configuration")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(load(None, &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = load(
            None,
            &[
                "synth.scene.duration_s=60".into(),
                "bss.min_count=300".into(),
                "output.series_format=csv".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.synth.scene.duration_s, 60.0);
        assert_eq!(cfg.bss.min_count, Some(300));
        assert_eq!(cfg.output.series_format, SeriesFormat::Csv);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = load(None, &["bss.min_cuont=3".into()]).unwrap_err();
        assert!(format!("{err:#}").contains("min_cuont"));
        assert!(load(None, &["nonsense=1".into()]).is_err());
    }

    #[test]
    fn echo_round_trips() {
        let cfg = load(None, &["seed=7".into(), "features.n_mel=10".into()]).unwrap();
        let again: RunConfig = toml::from_str(&echo(&cfg).unwrap()).unwrap();
        assert_eq!(again.features.n_mel, 10);
        assert_eq!(again.synth.scene.voices[1].seed, 8);
    }
}
