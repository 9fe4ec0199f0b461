//! Labelled synthetic data: the two-voice acoustic scene and analytic toy
//! systems with known sources and mixing.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::TimeSeries;

pub const SAMPLE_RATE: u32 = 16_000;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Random targets in `[0, 1]^dim` at random intervals, joined by an ease-out
/// curve `h(u) = 1 − (1 − u)^power`.
///
/// The ease-out shape is deliberately time-asymmetric: fast departures and
/// slow arrivals. A time-reversible interpolant would give a velocity
/// distribution symmetric under `v → −v` in every cell, and all odd-order
/// invariants would vanish.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateProcess {
    pub dim: usize,
    pub times: Vec<f64>,
    /// Row-major, `dim` values per target.
    pub targets: Vec<f64>,
    pub power: f64,
}

impl StateProcess {
    pub fn generate(dim: usize, duration_s: f64, interval_s: (f64, f64), power: f64, rng: &mut impl Rng) -> Self {
        let (lo, hi) = interval_s;
        let mut times = vec![-rng.random::<f64>() * hi];
        while *times.last().unwrap() <= duration_s + hi {
            let step = rng.random_range(lo..=hi);
            times.push(times.last().unwrap() + step);
        }
        let targets = (0..times.len() * dim).map(|_| rng.random::<f64>()).collect();
        StateProcess {
            dim,
            times,
            targets,
            power,
        }
    }

    /// Number of targets placed inside `[t0, t1)`.
    pub fn targets_in(&self, t0: f64, t1: f64) -> usize {
        self.times.iter().filter(|&&t| t >= t0 && t < t1).count()
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        let last = self.times.len() - 2;
        let i = self.times.partition_point(|&x| x <= t).saturating_sub(1).min(last);
        let u = ((t - self.times[i]) / (self.times[i + 1] - self.times[i])).clamp(0.0, 1.0);
        let h = 1.0 - (1.0 - u).powf(self.power);
        let a = &self.targets[i * self.dim..(i + 1) * self.dim];
        let b = &self.targets[(i + 1) * self.dim..(i + 2) * self.dim];
        for k in 0..self.dim {
            out[k] = a[k] + (b[k] - a[k]) * h;
        }
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        self.eval_into(t, &mut v);
        v
    }

    /// First component sampled at `t = i·dt`.
    pub fn sample(&self, dt: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| self.eval(i as f64 * dt)[0]).collect()
    }
}

/// `offset + slope·state`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub offset: f64,
    pub slope: f64,
}

impl Affine {
    pub fn at(&self, s: f64) -> f64 {
        self.offset + self.slope * s
    }

    fn range(&self) -> (f64, f64) {
        let (a, b) = (self.at(0.0), self.at(1.0));
        (a.min(b), a.max(b))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoiceSpec {
    pub pitch_hz: f64,
    pub amplitude: Affine,
    pub frequency_hz: Affine,
    pub damping: Affine,
    pub state_interval_ms: (f64, f64),
    pub ease_power: f64,
    pub seed: u64,
}

impl VoiceSpec {
    pub fn low() -> Self {
        VoiceSpec {
            pitch_hz: 100.0,
            amplitude: Affine { offset: 1.0, slope: 0.5 },
            frequency_hz: Affine {
                offset: 300.0,
                slope: 900.0,
            },
            damping: Affine {
                offset: 300.0,
                slope: 150.0,
            },
            state_interval_ms: (100.0, 120.0),
            ease_power: 3.0,
            seed: 1,
        }
    }

    pub fn high() -> Self {
        VoiceSpec {
            pitch_hz: 160.0,
            frequency_hz: Affine {
                offset: 1500.0,
                slope: 1500.0,
            },
            seed: 2,
            ..Self::low()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (ilo, ihi) = self.state_interval_ms;
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        if !(self.pitch_hz > 0.0) {
            return bad("pitch must be positive");
        }
        if !(self.frequency_hz.range().0 > 0.0) {
            return bad("resonant frequency must stay positive over the state range");
        }
        if !(self.damping.range().0 > 0.0) {
            return bad("damping must stay positive over the state range");
        }
        if !(ilo > 0.0 && ihi >= ilo) || !(self.ease_power >= 1.0) {
            return bad("invalid state interval or ease power");
        }
        Ok(())
    }
}

pub fn synth_state_process(spec: &VoiceSpec, duration_s: f64) -> Result<StateProcess> {
    if !(duration_s > 0.0) {
        return Err(Error::InvalidParameter("duration must be positive".into()));
    }
    spec.validate()?;
    let (lo, hi) = spec.state_interval_ms;
    let mut rng = stream_rng(spec.seed, 0);
    Ok(StateProcess::generate(1, duration_s, (lo / 1000.0, hi / 1000.0), spec.ease_power, &mut rng))
}

/// Spike train at the pitch rate, each spike replaced by a damped sinusoid
/// whose parameters are read from the state at that onset.
pub fn synth_voice(spec: &VoiceSpec, states: &StateProcess, duration_s: f64) -> Result<Vec<f64>> {
    spec.validate()?;
    let sr = SAMPLE_RATE as f64;
    let nyquist = sr / 2.0;
    if spec.frequency_hz.range().1 >= nyquist {
        return Err(Error::AboveNyquist {
            freq_hz: spec.frequency_hz.range().1,
        });
    }
    let n = (duration_s * sr).round() as usize;
    let mut out = vec![0.0; n];
    let period = sr / spec.pitch_hz;
    let mut k = 0usize;
    loop {
        let onset = k as f64 * period;
        let start = onset.round() as usize;
        if start >= n {
            break;
        }
        let s = states.eval(onset / sr)[0];
        let (a, f, g) = (spec.amplitude.at(s), spec.frequency_hz.at(s), spec.damping.at(s));
        // Until the envelope falls below 1e-6.
        let len = ((1e6f64.ln() / g) * sr).ceil() as usize;
        for (j, o) in out[start..n.min(start + len)].iter_mut().enumerate() {
            let t = j as f64 / sr;
            *o += a * (-g * t).exp() * (std::f64::consts::TAU * f * t).sin();
        }
        k += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub voices: Vec<VoiceSpec>,
    /// Energy of each voice relative to the first.
    pub relative_gain_db: Vec<f64>,
    pub duration_s: f64,
    /// Peak level after normalisation, as a fraction of full scale.
    pub peak: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            voices: vec![VoiceSpec::low(), VoiceSpec::high()],
            relative_gain_db: vec![0.0, -2.4],
            duration_s: 960.0,
            peak: 0.9,
        }
    }
}

impl SceneSpec {
    /// Reseeds the voices as `seed`, `seed + 1`, ...
    pub fn with_seed(mut self, seed: u64) -> Self {
        for (k, v) in self.voices.iter_mut().enumerate() {
            v.seed = seed.wrapping_add(k as u64);
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// Gain-scaled voices before summation.
    pub voices: Vec<Vec<f64>>,
    /// Sum of the scaled voices, before peak normalisation.
    pub mixed: Vec<f64>,
    pub normalization: f64,
    pub samples: Vec<i16>,
    pub states: Vec<StateProcess>,
    pub gains: Vec<f64>,
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

impl Scene {
    /// Energy of voice `k` relative to voice 0, in dB.
    pub fn realized_gain_db(&self, k: usize) -> f64 {
        10.0 * (energy(&self.voices[k]) / energy(&self.voices[0])).log10()
    }

    pub fn waveform(&self) -> Vec<f64> {
        self.samples.iter().map(|&s| s as f64 / 32767.0).collect()
    }
}

pub fn mix_scene(spec: &SceneSpec) -> Result<Scene> {
    if spec.voices.len() < 2 || spec.relative_gain_db.len() != spec.voices.len() {
        return Err(Error::InvalidParameter("need >= 2 voices and one gain per voice".into()));
    }
    if !(spec.duration_s > 0.0) || !(spec.peak > 0.0 && spec.peak <= 1.0) {
        return Err(Error::InvalidParameter("invalid duration or peak".into()));
    }
    let synth: Vec<(StateProcess, Vec<f64>)> = spec
        .voices
        .par_iter()
        .map(|v| {
            let st = synth_state_process(v, spec.duration_s)?;
            let w = synth_voice(v, &st, spec.duration_s)?;
            Ok((st, w))
        })
        .collect::<Result<_>>()?;
    let e0 = energy(&synth[0].1);
    let gains: Vec<f64> = synth
        .iter()
        .zip(&spec.relative_gain_db)
        .map(|((_, w), db)| {
            let e = energy(w);
            if e > 0.0 && e0 > 0.0 {
                (e0 / e * 10f64.powf(db / 10.0)).sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let (states, raw): (Vec<_>, Vec<_>) = synth.into_iter().unzip();
    let voices: Vec<Vec<f64>> = raw
        .into_iter()
        .zip(&gains)
        .map(|(w, g)| w.into_iter().map(|x| x * g).collect())
        .collect();
    let n = voices[0].len();
    let mixed: Vec<f64> = (0..n).map(|i| voices.iter().map(|v| v[i]).sum()).collect();
    let peak = mixed.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let normalization = if peak > 0.0 { spec.peak / peak } else { 1.0 };
    let mut clipped = 0usize;
    let samples: Vec<i16> = mixed
        .iter()
        .map(|x| {
            let q = (x * normalization * 32767.0).round();
            if q.abs() > 32767.0 {
                clipped += 1;
            }
            q.clamp(-32767.0, 32767.0) as i16
        })
        .collect();
    let fraction = clipped as f64 / n.max(1) as f64;
    if fraction > 1e-3 {
        return Err(Error::Clipping { fraction });
    }
    Ok(Scene {
        voices,
        mixed,
        normalization,
        samples,
        states,
        gains,
    })
}

pub fn write_wav(path: &Path, samples: &[i16]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        w.write_sample(s)?;
    }
    w.finalize()?;
    Ok(())
}

/// Mono 16-bit 16 kHz PCM, scaled to `[-1, 1]`.
pub fn read_wav(path: &Path) -> Result<Vec<f64>> {
    let mut r = hound::WavReader::open(path)?;
    let s = r.spec();
    if s.channels != 1 || s.sample_rate != SAMPLE_RATE || s.bits_per_sample != 16 || s.sample_format != hound::SampleFormat::Int
    {
        return Err(Error::InvalidParameter(format!(
            "{}: expected mono 16-bit PCM at 16 kHz, got {} ch, {} Hz, {} bit",
            path.display(),
            s.channels,
            s.sample_rate,
            s.bits_per_sample
        )));
    }
    r.samples::<i16>()
        .map(|v| Ok(v? as f64 / 32767.0))
        .collect()
}

/// Writes `t, state_voice1, state_voice2, ...` with `t = i·dt`.
pub fn write_ground_truth<W: Write>(w: W, dt: f64, rows: &[Vec<f64>]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let voices = rows.first().map_or(0, Vec::len);
    let mut header = vec!["t".to_string()];
    header.extend((1..=voices).map(|k| format!("state_voice{k}")));
    out.write_record(&header)?;
    for (i, r) in rows.iter().enumerate() {
        let mut rec = vec![(i as f64 * dt).to_string()];
        rec.extend(r.iter().map(f64::to_string));
        out.write_record(&rec)?;
    }
    out.flush().map_err(|e| Error::io("<csv>", e))
}

/// Reads a ground-truth CSV back as `(dt, rows)`.
pub fn read_ground_truth(path: &Path) -> Result<(f64, Vec<Vec<f64>>)> {
    let ts = crate::trajectory::read_csv(std::fs::File::open(path).map_err(|e| Error::io(path, e))?)?;
    Ok((ts.dt(), ts.rows().map(<[f64]>::to_vec).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShearProfile {
    /// `tanh(b·(x − c))`
    Tanh { b: f64, c: f64 },
    /// `sin(w·x)`
    Sin { w: f64 },
}

impl ShearProfile {
    fn at(&self, x: f64) -> f64 {
        match *self {
            ShearProfile::Tanh { b, c } => (b * (x - c)).tanh(),
            ShearProfile::Sin { w } => (w * x).sin(),
        }
    }
}

/// One invertible layer of a smooth mixing map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffeoLayer {
    /// `x_k ← x_k + a·tanh(b·(x_k − c))`, strictly increasing when `a·b > −1`.
    Monotone { axis: usize, a: f64, b: f64, c: f64 },
    /// Givens rotation in the `(i, j)` plane.
    Rotation { i: usize, j: usize, theta: f64 },
    /// `x_t ← x_t + amp·profile(x_s)`; triangular, so always invertible.
    Shear { target: usize, source: usize, amp: f64, profile: ShearProfile },
}

impl DiffeoLayer {
    fn forward(&self, x: &mut [f64]) {
        match *self {
            DiffeoLayer::Monotone { axis, a, b, c } => x[axis] += a * (b * (x[axis] - c)).tanh(),
            DiffeoLayer::Rotation { i, j, theta } => {
                let (s, co) = theta.sin_cos();
                let (xi, xj) = (x[i], x[j]);
                x[i] = co * xi - s * xj;
                x[j] = s * xi + co * xj;
            }
            DiffeoLayer::Shear {
                target,
                source,
                amp,
                profile,
            } => x[target] += amp * profile.at(x[source]),
        }
    }

    fn inverse(&self, x: &mut [f64]) {
        match *self {
            DiffeoLayer::Monotone { axis, a, b, c } => {
                let y = x[axis];
                let f = |u: f64| u + a * (b * (u - c)).tanh() - y;
                // Bracket: |a·tanh| ≤ |a|.
                let (mut lo, mut hi) = (y - a.abs() - 1e-12, y + a.abs() + 1e-12);
                let mut u = y - a * (b * (y - c)).tanh();
                for _ in 0..100 {
                    let fu = f(u);
                    if fu.abs() < 1e-15 * (1.0 + y.abs()) {
                        break;
                    }
                    if fu > 0.0 {
                        hi = u;
                    } else {
                        lo = u;
                    }
                    let sech2 = 1.0 - (b * (u - c)).tanh().powi(2);
                    let next = u - fu / (1.0 + a * b * sech2);
                    u = if next > lo && next < hi { next } else { 0.5 * (lo + hi) };
                }
                x[axis] = u;
            }
            DiffeoLayer::Rotation { i, j, theta } => DiffeoLayer::Rotation { i, j, theta: -theta }.forward(x),
            DiffeoLayer::Shear {
                target,
                source,
                amp,
                profile,
            } => x[target] -= amp * profile.at(x[source]),
        }
    }

    fn check(&self, n: usize) -> Result<()> {
        let ok = match *self {
            DiffeoLayer::Monotone { axis, a, b, .. } => axis < n && a * b > -1.0,
            DiffeoLayer::Rotation { i, j, .. } => i < n && j < n && i != j,
            DiffeoLayer::Shear { target, source, .. } => target < n && source < n && target != source,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid layer {self:?} for N = {n}")))
        }
    }
}

/// Composition of layers applied in order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DiffeoSpec {
    pub layers: Vec<DiffeoLayer>,
}

impl DiffeoSpec {
    pub fn identity() -> Self {
        DiffeoSpec::default()
    }

    /// The default two-channel toy mixing: two opposing shears and a rotation.
    pub fn standard_2d() -> Self {
        DiffeoSpec {
            layers: vec![
                DiffeoLayer::Shear {
                    target: 0,
                    source: 1,
                    amp: 0.4,
                    profile: ShearProfile::Tanh { b: 2.0, c: 0.5 },
                },
                DiffeoLayer::Shear {
                    target: 1,
                    source: 0,
                    amp: 0.3,
                    profile: ShearProfile::Sin { w: 2.0 },
                },
                DiffeoLayer::Rotation { i: 0, j: 1, theta: 0.5 },
            ],
        }
    }

    /// Three-channel counterpart of [`DiffeoSpec::standard_2d`].
    pub fn standard_3d() -> Self {
        let shear = |target, source, amp, profile| DiffeoLayer::Shear {
            target,
            source,
            amp,
            profile,
        };
        DiffeoSpec {
            layers: vec![
                shear(0, 1, 0.3, ShearProfile::Tanh { b: 2.0, c: 0.5 }),
                shear(1, 2, 0.3, ShearProfile::Sin { w: 2.0 }),
                shear(2, 0, 0.3, ShearProfile::Tanh { b: 2.0, c: 0.5 }),
                DiffeoLayer::Rotation { i: 0, j: 1, theta: 0.5 },
                DiffeoLayer::Rotation { i: 1, j: 2, theta: 0.4 },
            ],
        }
    }

    /// Random monotone warps, shears and rotations, tame on the unit cube.
    pub fn random(n: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, 7);
        let mut layers = Vec::new();
        for axis in 0..n {
            let b = rng.random_range(1.0..3.0);
            let a = rng.random_range(-0.6..0.6) / b;
            layers.push(DiffeoLayer::Monotone {
                axis,
                a,
                b,
                c: rng.random_range(0.3..0.7),
            });
        }
        for t in 0..n {
            let s = (t + 1) % n;
            layers.push(DiffeoLayer::Shear {
                target: t,
                source: s,
                amp: rng.random_range(-0.3..0.3),
                profile: ShearProfile::Sin {
                    w: rng.random_range(1.0..2.5),
                },
            });
        }
        for i in 0..n {
            for j in i + 1..n {
                layers.push(DiffeoLayer::Rotation {
                    i,
                    j,
                    theta: rng.random_range(-1.0..1.0),
                });
            }
        }
        DiffeoSpec { layers }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        self.layers.iter().try_for_each(|l| l.check(n))
    }

    pub fn forward(&self, p: &[f64]) -> Vec<f64> {
        let mut x = p.to_vec();
        self.layers.iter().for_each(|l| l.forward(&mut x));
        x
    }

    pub fn inverse(&self, p: &[f64]) -> Vec<f64> {
        let mut x = p.to_vec();
        self.layers.iter().rev().for_each(|l| l.inverse(&mut x));
        x
    }

    /// Central-difference Jacobian of the forward map.
    pub fn jacobian(&self, p: &[f64]) -> DMatrix<f64> {
        let n = p.len();
        let h = 1e-6;
        let mut j = DMatrix::zeros(n, n);
        for c in 0..n {
            let mut a = p.to_vec();
            let mut b = p.to_vec();
            a[c] += h;
            b[c] -= h;
            let (fa, fb) = (self.forward(&a), self.forward(&b));
            for r in 0..n {
                j[(r, c)] = (fa[r] - fb[r]) / (2.0 * h);
            }
        }
        j
    }

    /// Smallest |det J| over a regular grid on `[lo, hi]^n`; errors below `min_det`.
    pub fn check_jacobian(&self, n: usize, lo: f64, hi: f64, min_det: f64) -> Result<f64> {
        let per_axis = match n {
            1 | 2 => 21,
            3 => 9,
            _ => 4,
        };
        let total = (per_axis as usize).pow(n as u32);
        let worst = (0..total)
            .map(|mut k| {
                let p: Vec<f64> = (0..n)
                    .map(|_| {
                        let i = k % per_axis;
                        k /= per_axis;
                        lo + (hi - lo) * i as f64 / (per_axis - 1) as f64
                    })
                    .collect();
                self.jacobian(&p).determinant().abs()
            })
            .fold(f64::INFINITY, f64::min);
        if worst < min_det {
            return Err(Error::JacobianCheck { min_det: worst });
        }
        Ok(worst)
    }
}

pub fn apply_diffeomorphism(ts: &TimeSeries, spec: &DiffeoSpec) -> Result<TimeSeries> {
    spec.validate(ts.dim())?;
    let data: Vec<f64> = ts.rows().flat_map(|r| spec.forward(r)).collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteOutput);
    }
    TimeSeries::from_flat(ts.dt(), ts.dim(), data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ToyKind {
    /// Independent one-dimensional sources.
    SeparableProduct,
    /// `s = (1 − c)·u + c·j`: independent sources `u` blended with one
    /// joint process `j` that moves all coordinates between shared targets.
    Coupled { coupling: f64 },
    /// Independent sources mixed by a constant matrix.
    LinearMix,
    /// Source 0 independent of the jointly driven pair (1, 2).
    Subspace1plus2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mixing {
    Identity,
    Diffeo(DiffeoSpec),
    /// Rows of the constant mixing matrix.
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySystemSpec {
    pub kind: ToyKind,
    /// Ease-out power per source; its length sets N (3 for `Subspace1plus2`).
    pub powers: Vec<f64>,
    /// Target interval range in seconds.
    pub interval_s: (f64, f64),
    pub mixing: Mixing,
    pub seed: u64,
}

impl Default for ToySystemSpec {
    fn default() -> Self {
        ToySystemSpec::separable(1)
    }
}

impl ToySystemSpec {
    pub fn separable(seed: u64) -> Self {
        ToySystemSpec {
            kind: ToyKind::SeparableProduct,
            powers: vec![2.0, 3.0],
            interval_s: (0.10, 0.12),
            mixing: Mixing::Diffeo(DiffeoSpec::standard_2d()),
            seed,
        }
    }

    pub fn dim(&self) -> usize {
        self.powers.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySystem {
    pub observed: TimeSeries,
    pub sources: TimeSeries,
}

pub fn make_toy_system(spec: &ToySystemSpec, n_samples: usize, dt: f64) -> Result<ToySystem> {
    let n = spec.dim();
    if n < 2 || !(dt > 0.0) || n_samples < 3 {
        return Err(Error::InvalidParameter("toy systems need N >= 2, dt > 0 and >= 3 samples".into()));
    }
    let duration = n_samples as f64 * dt;
    let independent = |k: usize| {
        StateProcess::generate(1, duration, spec.interval_s, spec.powers[k], &mut stream_rng(spec.seed, k as u64))
    };
    let joint = |dim: usize, power: f64| {
        StateProcess::generate(dim, duration, spec.interval_s, power, &mut stream_rng(spec.seed, 100))
    };
    let mut src = vec![0.0; n_samples * n];
    match &spec.kind {
        ToyKind::SeparableProduct | ToyKind::LinearMix => {
            for k in 0..n {
                let p = independent(k);
                for i in 0..n_samples {
                    src[i * n + k] = p.eval(i as f64 * dt)[0];
                }
            }
        }
        ToyKind::Coupled { coupling } => {
            let c = *coupling;
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::InvalidParameter("coupling must lie in [0, 1]".into()));
            }
            let j = joint(n, spec.powers[0]);
            for k in 0..n {
                let p = independent(k);
                for i in 0..n_samples {
                    let t = i as f64 * dt;
                    src[i * n + k] = (1.0 - c) * p.eval(t)[0] + c * j.eval(t)[k];
                }
            }
        }
        ToyKind::Subspace1plus2 => {
            if n != 3 {
                return Err(Error::InvalidParameter("subspace_1plus2 needs exactly 3 powers".into()));
            }
            let p = independent(0);
            let j = joint(2, spec.powers[1]);
            for i in 0..n_samples {
                let t = i as f64 * dt;
                src[i * n] = p.eval(t)[0];
                let v = j.eval(t);
                src[i * n + 1] = v[0];
                src[i * n + 2] = v[1];
            }
        }
    }
    let sources = TimeSeries::from_flat(dt, n, src)?;
    let observed = match &spec.mixing {
        Mixing::Identity => sources.clone(),
        Mixing::Diffeo(d) => {
            d.validate(n)?;
            d.check_jacobian(n, 0.0, 1.0, 1e-6)?;
            apply_diffeomorphism(&sources, d)?
        }
        Mixing::Matrix(rows) => {
            if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                return Err(Error::InvalidParameter(format!("mixing matrix must be {n}x{n}")));
            }
            let w = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
            let det = w.determinant();
            if det.abs() < 1e-9 {
                return Err(Error::JacobianCheck { min_det: det.abs() });
            }
            let data = sources
                .rows()
                .flat_map(|r| (0..n).map(move |i| (0..n).map(|j| rows[i][j] * r[j]).sum::<f64>()).collect::<Vec<_>>())
                .collect();
            TimeSeries::from_flat(dt, n, data)?
        }
    };
    Ok(ToySystem { observed, sources })
}
