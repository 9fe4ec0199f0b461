//! Time series ingestion, velocity estimation and state-space neighbourhoods.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) const MAGIC: &[u8; 4] = b"IBSS";
pub(crate) const SERIES_VERSION: u16 = 1;
const MAX_JITTER: f64 = 1e-6;

/// Uniformly sampled N-channel trajectory, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    dt: f64,
    dim: usize,
    data: Vec<f64>,
    channel_names: Vec<String>,
}

impl TimeSeries {
    pub fn from_flat(dt: f64, dim: usize, data: Vec<f64>) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::InvalidParameter(format!(
                "data length {} is not a multiple of dimension {dim}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: pos / dim + 1 });
        }
        let channel_names = (1..=dim).map(|k| format!("x{k}")).collect();
        Ok(TimeSeries {
            dt,
            dim,
            data,
            channel_names,
        })
    }

    /// Builds a series from rows, enforcing the full set of invariants
    /// (N >= 2, at least three samples).
    pub fn from_rows(dt: f64, rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::Malformed {
                    row: i + 1,
                    reason: format!("expected {dim} values, found {}", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        let ts = Self::from_flat(dt, dim, data)?;
        ts.validate()?;
        Ok(ts)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 channels, got {}",
                self.dim
            )));
        }
        if self.len() < 3 {
            return Err(Error::TooShort {
                len: self.len(),
                needed: 3,
            });
        }
        Ok(())
    }

    pub fn with_channel_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.dim {
            return Err(Error::InvalidParameter(format!(
                "{} channel names for {} channels",
                names.len(),
                self.dim
            )));
        }
        self.channel_names = names;
        Ok(self)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn channel(&self, k: usize) -> impl Iterator<Item = f64> + '_ {
        self.rows().map(move |r| r[k])
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    /// Selects a subset of channels in the given order.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Self> {
        let data = self
            .rows()
            .flat_map(|r| channels.iter().map(move |&k| r[k]))
            .collect();
        Self::from_flat(self.dt, channels.len(), data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeriesFormat {
    Csv,
    Binary,
}

impl SeriesFormat {
    /// Guesses the format from a file extension; anything but `.csv` is binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => SeriesFormat::Csv,
            _ => SeriesFormat::Binary,
        }
    }
}

pub fn load_series(path: &Path, format: SeriesFormat) -> Result<TimeSeries> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    match format {
        SeriesFormat::Csv => read_csv(BufReader::new(file)),
        SeriesFormat::Binary => read_binary(&mut BufReader::new(file)),
    }
}

pub fn save_series(ts: &TimeSeries, path: &Path, format: SeriesFormat) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    match format {
        SeriesFormat::Csv => write_csv(ts, &mut w)?,
        SeriesFormat::Binary => write_binary(ts, &mut w).map_err(|e| Error::io(path, e))?,
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<R: Read>(reader: R) -> Result<TimeSeries> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() < 2 || !header[0].eq_ignore_ascii_case("t") {
        return Err(Error::Malformed {
            row: 0,
            reason: "header must start with a `t` column".into(),
        });
    }
    let names: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
    let dim = names.len();
    let mut times = Vec::new();
    let mut data = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Malformed {
            row,
            reason: e.to_string(),
        })?;
        if rec.len() != dim + 1 {
            return Err(Error::Malformed {
                row,
                reason: format!("expected {} fields, found {}", dim + 1, rec.len()),
            });
        }
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::Malformed {
                row,
                reason: format!("cannot parse `{field}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite { row });
            }
            if j == 0 {
                times.push(v);
            } else {
                data.push(v);
            }
        }
    }
    if times.len() < 3 {
        return Err(Error::TooShort {
            len: times.len(),
            needed: 3,
        });
    }
    let dt = times[1] - times[0];
    if dt <= 0.0 {
        return Err(Error::NonUniformTime {
            row: 2,
            jitter: f64::INFINITY,
        });
    }
    for (i, w) in times.windows(2).enumerate() {
        let jitter = ((w[1] - w[0]) - dt).abs() / dt;
        if jitter > MAX_JITTER {
            return Err(Error::NonUniformTime { row: i + 2, jitter });
        }
    }
    let ts = TimeSeries::from_flat(dt, dim, data)?.with_channel_names(names)?;
    ts.validate()?;
    Ok(ts)
}

pub fn write_csv<W: Write>(ts: &TimeSeries, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["t".to_string()];
    header.extend(ts.channel_names.iter().cloned());
    w.write_record(&header)?;
    for (i, r) in ts.rows().enumerate() {
        let mut rec = Vec::with_capacity(r.len() + 1);
        rec.push((i as f64 * ts.dt).to_string());
        rec.extend(r.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

pub(crate) fn write_header<W: Write>(
    w: &mut W,
    version: u16,
    dim: usize,
    len: usize,
    dt: f64,
) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&version.to_le_bytes())?;
    w.write_all(&(dim as u16).to_le_bytes())?;
    w.write_all(&(len as u64).to_le_bytes())?;
    w.write_all(&dt.to_le_bytes())
}

pub(crate) struct Header {
    pub version: u16,
    pub dim: usize,
    pub len: usize,
    pub dt: f64,
}

pub(crate) fn read_header<R: Read>(r: &mut R) -> Result<Header> {
    let bad = |reason: &str| Error::Malformed {
        row: 0,
        reason: reason.into(),
    };
    let mut buf = [0u8; 24];
    r.read_exact(&mut buf).map_err(|_| bad("truncated header"))?;
    if &buf[0..4] != MAGIC {
        return Err(bad("bad magic bytes"));
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    let dim = u16::from_le_bytes([buf[6], buf[7]]) as usize;
    let len = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
    let dt = f64::from_le_bytes(buf[16..24].try_into().unwrap());
    Ok(Header {
        version,
        dim,
        len,
        dt,
    })
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; count * 8];
    r.read_exact(&mut bytes).map_err(|_| Error::Malformed {
        row: 0,
        reason: "truncated payload".into(),
    })?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn write_binary<W: Write>(ts: &TimeSeries, w: &mut W) -> std::io::Result<()> {
    write_header(w, SERIES_VERSION, ts.dim, ts.len(), ts.dt)?;
    for v in &ts.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_binary<R: Read>(r: &mut R) -> Result<TimeSeries> {
    let h = read_header(r)?;
    if h.version != SERIES_VERSION {
        return Err(Error::Malformed {
            row: 0,
            reason: format!("unsupported version {}", h.version),
        });
    }
    let data = read_f64s(r, h.dim * h.len)?;
    let ts = TimeSeries::from_flat(h.dt, h.dim, data)?;
    ts.validate()?;
    Ok(ts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VelocityScheme {
    #[default]
    Central,
}

/// Interior positions paired with central-difference velocities.
/// Entry `i` corresponds to sample `i + 1` of the source series.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocitySeries {
    dt: f64,
    dim: usize,
    positions: Vec<f64>,
    velocities: Vec<f64>,
}

impl VelocitySeries {
    pub fn from_parts(dt: f64, dim: usize, positions: Vec<f64>, velocities: Vec<f64>) -> Result<Self> {
        if dim == 0 || positions.len() != velocities.len() || positions.len() % dim != 0 {
            return Err(Error::InvalidParameter("inconsistent velocity series shape".into()));
        }
        if let Some(pos) = velocities.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: pos / dim + 1 });
        }
        Ok(VelocitySeries {
            dt,
            dim,
            positions,
            velocities,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.positions.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn position(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn velocity(&self, i: usize) -> &[f64] {
        &self.velocities[i * self.dim..(i + 1) * self.dim]
    }

    pub fn positions(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.positions.chunks_exact(self.dim)
    }

    pub fn velocities(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.velocities.chunks_exact(self.dim)
    }
}

pub fn estimate_velocity(ts: &TimeSeries, scheme: VelocityScheme) -> Result<VelocitySeries> {
    let VelocityScheme::Central = scheme;
    let n = ts.len();
    if n < 3 {
        return Err(Error::TooShort { len: n, needed: 3 });
    }
    let d = ts.dim;
    let inv = 1.0 / (2.0 * ts.dt);
    let positions = ts.data[d..(n - 1) * d].to_vec();
    let velocities = (1..n - 1)
        .flat_map(|t| {
            let (prev, next) = (ts.row(t - 1), ts.row(t + 1));
            (0..d).map(move |k| (next[k] - prev[k]) * inv)
        })
        .collect();
    VelocitySeries::from_parts(ts.dt, d, positions, velocities)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Axis-aligned boxes, this many per axis, over the bounding box.
    Grid { cells_per_axis: usize },
    /// Overlapping cells: `centers` farthest-point-sampled centres, `k` members each.
    Knn { k: usize, centers: usize },
}

impl Default for Strategy {
    fn default() -> Self {
        Strategy::Grid { cells_per_axis: 8 }
    }
}

/// `max(50, 10 * (N + N^2 + ... + N^5))`
pub fn default_min_count(dim: usize) -> usize {
    let s: usize = (1..=5).map(|p| dim.pow(p)).sum();
    (10 * s).max(50)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub center: Vec<f64>,
    pub members: Vec<usize>,
    /// Integer box coordinates in grid mode.
    pub coords: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodIndex {
    pub cells: Vec<Cell>,
    /// Unordered neighbour pairs `(a, b)` with `a < b`.
    pub adjacency: Vec<(usize, usize)>,
    pub min_count: usize,
    pub strategy: Strategy,
    /// Whether member lists are pairwise disjoint (grid mode).
    pub disjoint: bool,
    /// Retained cell owning each velocity sample, if any. In knn mode this
    /// is the nearest retained centre.
    pub home_cell: Vec<Option<usize>>,
    pub dropped_cells: usize,
}

impl NeighborhoodIndex {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.cells.first().map_or(0, |c| c.center.len())
    }

    /// Mean position of each cell's members. Differs from the box centre
    /// wherever occupancy is lopsided, notably at the edge of the support.
    pub fn centroids(&self, vs: &VelocitySeries) -> Vec<Vec<f64>> {
        self.cells
            .iter()
            .map(|c| {
                let mut m = vec![0.0; vs.dim()];
                for &i in &c.members {
                    m.iter_mut().zip(vs.position(i)).for_each(|(a, b)| *a += b);
                }
                m.iter_mut().for_each(|a| *a /= c.members.len() as f64);
                m
            })
            .collect()
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.cells.len()];
        for &(a, b) in &self.adjacency {
            out[a].push(b);
            out[b].push(a);
        }
        for v in &mut out {
            v.sort_unstable();
        }
        out
    }
}

pub fn build_neighborhoods(
    vs: &VelocitySeries,
    strategy: Strategy,
    min_count: usize,
) -> Result<NeighborhoodIndex> {
    if vs.is_empty() {
        return Err(Error::InvalidParameter("empty velocity series".into()));
    }
    match strategy {
        Strategy::Grid { cells_per_axis } if cells_per_axis > 0 => {
            grid_cells(vs, cells_per_axis, min_count)
        }
        Strategy::Knn { k, centers } if k > 0 && centers > 0 => {
            knn_cells(vs, k, centers, min_count)
        }
        _ => Err(Error::InvalidParameter(format!(
            "strategy parameters must be positive: {strategy:?}"
        ))),
    }
}

fn bounding_box(vs: &VelocitySeries) -> (Vec<f64>, Vec<f64>) {
    let d = vs.dim;
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for p in vs.positions() {
        for k in 0..d {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    (lo, hi)
}

fn grid_cells(vs: &VelocitySeries, per_axis: usize, min_count: usize) -> Result<NeighborhoodIndex> {
    let d = vs.dim;
    let (lo, hi) = bounding_box(vs);
    let width: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| (h - l) / per_axis as f64).collect();
    let coord_of = |p: &[f64]| -> Vec<usize> {
        (0..d)
            .map(|k| {
                if width[k] > 0.0 {
                    (((p[k] - lo[k]) / width[k]) as usize).min(per_axis - 1)
                } else {
                    0
                }
            })
            .collect()
    };
    let mut boxes: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
    for (i, p) in vs.positions().enumerate() {
        boxes.entry(coord_of(p)).or_default().push(i);
    }
    let total = boxes.len();
    let kept: Vec<(Vec<usize>, Vec<usize>)> =
        boxes.into_iter().filter(|(_, m)| m.len() >= min_count).collect();
    if kept.is_empty() {
        return Err(Error::AllCellsDropped { min_count });
    }
    let lookup: BTreeMap<&[usize], usize> =
        kept.iter().enumerate().map(|(i, (c, _))| (c.as_slice(), i)).collect();
    let mut adjacency = Vec::new();
    for (i, (c, _)) in kept.iter().enumerate() {
        for k in 0..d {
            let mut up = c.clone();
            up[k] += 1;
            if let Some(&j) = lookup.get(up.as_slice()) {
                adjacency.push((i, j));
            }
        }
    }
    adjacency.sort_unstable();
    let mut home_cell = vec![None; vs.len()];
    let cells = kept
        .into_iter()
        .enumerate()
        .map(|(ci, (coords, members))| {
            for &m in &members {
                home_cell[m] = Some(ci);
            }
            let center = (0..d)
                .map(|k| lo[k] + (coords[k] as f64 + 0.5) * width[k])
                .collect();
            Cell {
                center,
                members,
                coords: Some(coords),
            }
        })
        .collect::<Vec<_>>();
    Ok(NeighborhoodIndex {
        dropped_cells: total - cells.len(),
        cells,
        adjacency,
        min_count,
        strategy: Strategy::Grid {
            cells_per_axis: per_axis,
        },
        disjoint: true,
        home_cell,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Indices of the `k` smallest entries, ties broken by index.
pub(crate) fn k_smallest(dists: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dists.len()).collect();
    let k = k.min(idx.len());
    let cmp = |a: &usize, b: &usize| dists[*a].total_cmp(&dists[*b]).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx
}

fn knn_cells(
    vs: &VelocitySeries,
    k: usize,
    n_centers: usize,
    min_count: usize,
) -> Result<NeighborhoodIndex> {
    if k < min_count {
        return Err(Error::AllCellsDropped { min_count });
    }
    let n = vs.len();
    let n_centers = n_centers.min(n);
    // Farthest-point sampling from sample 0.
    let mut centers = vec![0usize];
    let mut nearest: Vec<f64> = vs.positions().map(|p| sq_dist(p, vs.position(0))).collect();
    while centers.len() < n_centers {
        let (next, _) = nearest
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc });
        centers.push(next);
        let c = vs.position(next).to_vec();
        nearest
            .par_iter_mut()
            .zip(vs.positions.par_chunks_exact(vs.dim))
            .for_each(|(d, p)| *d = d.min(sq_dist(p, &c)));
    }
    let cells: Vec<Cell> = centers
        .par_iter()
        .map(|&c| {
            let cp = vs.position(c);
            let dists: Vec<f64> = vs.positions().map(|p| sq_dist(p, cp)).collect();
            let mut members = k_smallest(&dists, k);
            members.sort_unstable();
            Cell {
                center: cp.to_vec(),
                members,
                coords: None,
            }
        })
        .collect();
    let adj_k = (2 * vs.dim).min(cells.len().saturating_sub(1));
    let near: Vec<Vec<usize>> = cells
        .iter()
        .enumerate()
        .map(|(i, ci)| {
            let dists: Vec<f64> = cells
                .iter()
                .enumerate()
                .map(|(j, cj)| if i == j { f64::INFINITY } else { sq_dist(&ci.center, &cj.center) })
                .collect();
            k_smallest(&dists, adj_k)
        })
        .collect();
    let mut adjacency = Vec::new();
    for (i, ni) in near.iter().enumerate() {
        for &j in ni {
            if i < j && near[j].contains(&i) {
                adjacency.push((i, j));
            }
        }
    }
    let home_cell = vs
        .positions
        .par_chunks_exact(vs.dim)
        .map(|p| {
            let dists: Vec<f64> = cells.iter().map(|c| sq_dist(p, &c.center)).collect();
            k_smallest(&dists, 1).first().copied()
        })
        .collect();
    Ok(NeighborhoodIndex {
        cells,
        adjacency,
        min_count,
        strategy: Strategy::Knn {
            k,
            centers: n_centers,
        },
        disjoint: false,
        home_cell,
        dropped_cells: 0,
    })
}
