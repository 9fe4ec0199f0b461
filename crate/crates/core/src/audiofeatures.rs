//! Log mel filterbank features and their reduction to a low-dimensional
//! measurement trajectory.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Pca;
use crate::stitch::{stitch, StitchConfig, StitchedChart};
use crate::trajectory::TimeSeries;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub preemphasis: f64,
    pub frame_len_ms: f64,
    pub hop_ms: f64,
    pub n_mel: usize,
    pub mel_lo_hz: f64,
    pub mel_hi_hz: f64,
    pub pair_average: bool,
    pub nfft: usize,
    pub log_floor: f64,
    pub sample_rate: u32,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            preemphasis: 0.97,
            frame_len_ms: 25.0,
            hop_ms: 5.0,
            n_mel: 12,
            mel_lo_hz: 0.0,
            mel_hi_hz: 8000.0,
            pair_average: true,
            nfft: 512,
            log_floor: 1e-10,
            sample_rate: 16_000,
        }
    }
}

impl FeatureConfig {
    pub fn frame_len(&self) -> usize {
        (self.frame_len_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop(&self) -> usize {
        (self.hop_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    /// Time step of the output series.
    pub fn output_dt(&self) -> f64 {
        let step = if self.pair_average { 2 } else { 1 };
        (step * self.hop()) as f64 / self.sample_rate as f64
    }

    /// Centre time (seconds into the waveform) of output frame `i`.
    pub fn frame_center(&self, i: usize) -> f64 {
        let (hop, half) = (self.hop() as f64, self.frame_len() as f64 / 2.0);
        let s = if self.pair_average {
            2.0 * i as f64 * hop + hop / 2.0 + half
        } else {
            i as f64 * hop + half
        };
        s / self.sample_rate as f64
    }

    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate as f64 / 2.0;
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        if !(0.0..1.0).contains(&self.preemphasis) {
            return bad("preemphasis must lie in [0, 1)");
        }
        if self.hop() == 0 || self.frame_len() <= self.hop() {
            return bad("frame length must exceed the hop");
        }
        if self.nfft < self.frame_len() {
            return bad("nfft must be at least the frame length");
        }
        if self.n_mel == 0 || !(self.mel_lo_hz >= 0.0 && self.mel_lo_hz < self.mel_hi_hz && self.mel_hi_hz <= nyquist) {
            return bad("mel band must satisfy 0 <= lo < hi <= Nyquist");
        }
        if !(self.log_floor > 0.0) {
            return bad("log floor must be positive");
        }
        Ok(())
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Edge and centre frequencies: `n_mel + 2` points equally spaced in mel.
pub fn mel_points(cfg: &FeatureConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.mel_lo_hz), hz_to_mel(cfg.mel_hi_hz));
    (0..cfg.n_mel + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mel + 1) as f64))
        .collect()
}

/// Triangular weights over the `nfft/2 + 1` bins, one row per filter.
/// Edges sit at fractional bin positions rather than rounded bins.
pub fn mel_filterbank(cfg: &FeatureConfig) -> Vec<Vec<f64>> {
    let bins: Vec<f64> = mel_points(cfg)
        .iter()
        .map(|f| f / cfg.sample_rate as f64 * cfg.nfft as f64)
        .collect();
    (0..cfg.n_mel)
        .map(|m| {
            let (l, c, r) = (bins[m], bins[m + 1], bins[m + 2]);
            (0..=cfg.nfft / 2)
                .map(|k| {
                    let k = k as f64;
                    ((k - l) / (c - l)).min((r - k) / (r - c)).max(0.0)
                })
                .collect()
        })
        .collect()
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Log filter energies per frame before pair averaging.
pub fn frame_energies(waveform: &[f64], cfg: &FeatureConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let (fl, hop) = (cfg.frame_len(), cfg.hop());
    if waveform.len() < fl {
        return Err(Error::WaveformTooShort {
            len: waveform.len(),
            frame: fl,
        });
    }
    let mut y = Vec::with_capacity(waveform.len());
    y.push(waveform[0]);
    y.extend(waveform.windows(2).map(|w| w[1] - cfg.preemphasis * w[0]));
    let window = hann(fl);
    let bank = mel_filterbank(cfg);
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(cfg.nfft);
    let frames = 1 + (y.len() - fl) / hop;
    Ok((0..frames)
        .into_par_iter()
        .map_init(
            || vec![Complex::new(0.0, 0.0); cfg.nfft],
            |buf, f| {
                buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
                for (j, (b, w)) in buf.iter_mut().zip(&window).enumerate() {
                    b.re = y[f * hop + j] * w;
                }
                fft.process(buf);
                let power: Vec<f64> = buf[..=cfg.nfft / 2].iter().map(|c| c.norm_sqr()).collect();
                bank.iter()
                    .map(|row| row.iter().zip(&power).map(|(a, p)| a * p).sum::<f64>().max(cfg.log_floor).ln())
                    .collect()
            },
        )
        .collect())
}

pub fn featurize(waveform: &[f64], cfg: &FeatureConfig) -> Result<TimeSeries> {
    let frames = frame_energies(waveform, cfg)?;
    let rows: Vec<Vec<f64>> = if cfg.pair_average {
        frames
            .chunks_exact(2)
            .map(|p| p[0].iter().zip(&p[1]).map(|(a, b)| 0.5 * (a + b)).collect())
            .collect()
    } else {
        frames
    };
    let names = (1..=cfg.n_mel).map(|k| format!("mel{k}")).collect();
    TimeSeries::from_rows(cfg.output_dt(), &rows)?.with_channel_names(names)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReductionConfig {
    /// Global principal components kept before the local charts.
    pub prefix_dim: usize,
    pub max_residual: f64,
    pub stitch: StitchConfig,
}

impl Default for ReductionConfig {
    fn default() -> Self {
        ReductionConfig {
            prefix_dim: 6,
            max_residual: 0.15,
            stitch: StitchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionModel {
    pub global_mean: Vec<f64>,
    /// Leading global principal directions, one per row.
    pub global_basis: Vec<Vec<f64>>,
    /// Variance fraction of every global component, non-increasing.
    pub explained_variance: Vec<f64>,
    pub chart: StitchedChart,
    /// Smallest dimension whose mean local residual is within tolerance.
    pub intrinsic_dim_estimate: usize,
}

impl ReductionModel {
    pub fn apply(&self, features: &[f64]) -> Vec<f64> {
        let g: Vec<f64> = self
            .global_basis
            .iter()
            .map(|r| r.iter().zip(features).zip(&self.global_mean).map(|((a, x), m)| a * (x - m)).sum())
            .collect();
        self.chart.apply(&g)
    }
}

pub fn reduce_dimension(features: &TimeSeries, target_dim: usize, cfg: &ReductionConfig) -> Result<(TimeSeries, ReductionModel)> {
    let n = features.dim();
    if target_dim == 0 || target_dim >= n {
        return Err(Error::InvalidParameter(format!("target dimension {target_dim} for {n}-D features")));
    }
    let prefix = cfg.prefix_dim.min(n).max(target_dim);
    let pca = Pca::fit(features.as_flat().chunks_exact(n), n);
    let total: f64 = pca.values.iter().sum();
    let explained: Vec<f64> = pca.values.iter().map(|v| if total > 0.0 { v / total } else { 0.0 }).collect();
    let basis: Vec<Vec<f64>> = (0..prefix).map(|c| (0..n).map(|i| pca.vectors[(i, c)]).collect()).collect();
    let projected: Vec<Vec<f64>> = features
        .rows()
        .map(|r| {
            basis
                .iter()
                .map(|b| b.iter().zip(r).zip(&pca.mean).map(|((a, x), m)| a * (x - m)).sum())
                .collect()
        })
        .collect();
    let (chart, coords) = stitch(&projected, target_dim, &cfg.stitch)?;
    let estimated = chart
        .residual_profile
        .iter()
        .position(|&r| r <= cfg.max_residual)
        .unwrap_or(prefix);
    if chart.residual > cfg.max_residual {
        return Err(Error::DimensionMismatch {
            target_dim,
            residual: chart.residual,
            threshold: cfg.max_residual,
            estimated,
        });
    }
    let names = (1..=target_dim).map(|k| format!("x{k}")).collect();
    let ts = TimeSeries::from_rows(features.dt(), &coords)?.with_channel_names(names)?;
    Ok((
        ts,
        ReductionModel {
            global_mean: pca.mean,
            global_basis: basis,
            explained_variance: explained,
            chart,
            intrinsic_dim_estimate: estimated,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tone_peaks_in_nearest_filter() {
        let cfg = FeatureConfig::default();
        let w: Vec<f64> = (0..16_000)
            .map(|i| (std::f64::consts::TAU * 1000.0 * i as f64 / 16_000.0).sin())
            .collect();
        let f = featurize(&w, &cfg).unwrap();
        let pts = mel_points(&cfg);
        let nearest = (1..=cfg.n_mel)
            .min_by(|&a, &b| (pts[a] - 1000.0).abs().total_cmp(&(pts[b] - 1000.0).abs()))
            .unwrap()
            - 1;
        let row = f.row(f.len() / 2);
        let argmax = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert_eq!(argmax, nearest);
    }

    #[test]
    fn silence_hits_floor() {
        let cfg = FeatureConfig::default();
        let f = featurize(&vec![0.0; 4000], &cfg).unwrap();
        assert!(f.as_flat().iter().all(|&v| v == 1e-10f64.ln()));
        assert!((f.dt() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn too_short_rejected() {
        let r = featurize(&[0.0; 100], &FeatureConfig::default());
        assert!(matches!(r, Err(Error::WaveformTooShort { len: 100, frame: 400 })));
    }

    #[test]
    fn frame_centers_are_pair_midpoints() {
        let cfg = FeatureConfig::default();
        assert!((cfg.frame_center(0) - 240.0 / 16_000.0).abs() < 1e-15);
        assert!((cfg.frame_center(3) - (480.0 + 240.0) / 16_000.0).abs() < 1e-15);
    }
}
