//! The precomputed latent grid navigated by the front end.
//!
//! For an input measure, dims 0..4 of its posterior mean are swept over 10
//! equally spaced values each (endpoints included) between limits derived from
//! the training set, all other dims stay at the input's values, and all 10⁴
//! combinations are decoded. Two pads expose the grid: the left pad moves dims 0
//! and 1, the right pad dims 2 and 3.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use image::{ImageBuffer, Rgb};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attributes::{attributes, AttributeVector, MetricalWeightProfile, ATTRIBUTE_COUNT, ATTRIBUTE_NAMES};
use crate::checkpoint::{sha256_hex, write_atomic, CheckpointError};
use crate::midi::to_midi;
use crate::model::{LatentVector, ModelError, ModelParams, LATENT_DIM, REGULARISED_DIMS};
use crate::scalar::Scalar;
use crate::score::Measure;
use crate::stats::{r_squared, spearman};

pub const GRID_SAMPLES: usize = 10;
pub const GRID_CELLS: usize = 10_000;
pub const HISTOGRAM_BINS: usize = 50;
/// Limits extend the observed range by this fraction of its span on each side.
pub const LIMIT_WIDENING: f64 = 0.1;
pub const DENSITY_BINS: usize = 32;
pub const ATLAS_FORMAT_VERSION: u32 = 1;
pub const MIDI_TEMPO_BPM: f64 = 120.0;
/// Fewest labelled items accepted by [`interpretability`].
pub const MIN_INTERPRETABILITY_SAMPLES: usize = 10;

const DECODE_CHUNK: usize = 250;

#[derive(Debug, Error)]
pub enum AtlasError {
    #[error("need at least 2 training latents, got {0}")]
    TooFewLatents(usize),
    #[error("need at least {MIN_INTERPRETABILITY_SAMPLES} labelled items, got {0}")]
    TooFewSamples(usize),
    #[error("{0} latents but {1} attribute rows")]
    LengthMismatch(usize, usize),
    #[error("grid index {0} out of range")]
    IndexOutOfRange(usize),
    #[error("invalid limits for dim {0}")]
    InvalidLimits(usize),
    #[error("unsupported atlas format version {0}")]
    VersionMismatch(u32),
    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("malformed atlas manifest: {0}")]
    Manifest(String),
    #[error("image encoding failed: {0}")]
    Image(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<CheckpointError> for AtlasError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(io) => AtlasError::IoFailure(io),
            other => AtlasError::Manifest(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pad {
    Left,
    Right,
}

impl Pad {
    pub const ALL: [Pad; 2] = [Pad::Left, Pad::Right];

    /// The two regularised dims (and attributes) this pad moves.
    pub fn dims(self) -> [usize; 2] {
        match self {
            Pad::Left => [0, 1],
            Pad::Right => [2, 3],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Pad::Left => "left",
            Pad::Right => "right",
        }
    }

    pub fn parse(s: &str) -> Option<Pad> {
        match s {
            "left" => Some(Pad::Left),
            "right" => Some(Pad::Right),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    pub lo: f64,
    pub hi: f64,
}

impl Limits {
    /// `GRID_SAMPLES` equally spaced values from `lo` to `hi` inclusive.
    pub fn samples(&self) -> [f64; GRID_SAMPLES] {
        let step = (self.hi - self.lo) / (GRID_SAMPLES - 1) as f64;
        let mut out = [0.0; GRID_SAMPLES];
        for (i, v) in out.iter_mut().enumerate() {
            *v = self.lo + step * i as f64;
        }
        out[GRID_SAMPLES - 1] = self.hi;
        out
    }

    /// Bin of `value` among `bins` equal bins; values outside clamp to the end bins.
    fn bin(&self, value: f64, bins: usize) -> usize {
        let t = (value - self.lo) / (self.hi - self.lo);
        ((t * bins as f64).floor().max(0.0) as usize).min(bins - 1)
    }
}

/// Histogram of one regularised dim over the training set's posterior means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionHistogram {
    pub dim: usize,
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub limits: Limits,
    /// All values were equal, so the limits are the value ± 0.5.
    pub degenerate: bool,
}

/// Builds the histogram and sampling limits for `dim` of `latents`.
pub fn compute_limits<T: Scalar>(latents: &[LatentVector<T>], dim: usize) -> Result<DimensionHistogram, AtlasError> {
    let values: Vec<f64> = latents.iter().map(|z| z.values()[dim].to_f64_exact()).collect();
    histogram_of(&values, dim)
}

fn histogram_of(values: &[f64], dim: usize) -> Result<DimensionHistogram, AtlasError> {
    if dim >= REGULARISED_DIMS {
        return Err(AtlasError::IndexOutOfRange(dim));
    }
    if values.len() < 2 {
        return Err(AtlasError::TooFewLatents(values.len()));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !min.is_finite() || !max.is_finite() {
        return Err(AtlasError::InvalidLimits(dim));
    }
    let span = max - min;
    let degenerate = span == 0.0;
    let limits = if degenerate {
        log::warn!("latent dim {dim} is constant at {min}; limits widened to ±0.5");
        Limits { lo: min - 0.5, hi: min + 0.5 }
    } else {
        Limits { lo: min - LIMIT_WIDENING * span, hi: max + LIMIT_WIDENING * span }
    };
    let width = (limits.hi - limits.lo) / HISTOGRAM_BINS as f64;
    let edges = (0..=HISTOGRAM_BINS).map(|i| if i == HISTOGRAM_BINS { limits.hi } else { limits.lo + width * i as f64 }).collect();
    let mut counts = vec![0; HISTOGRAM_BINS];
    for v in values {
        counts[limits.bin(*v, HISTOGRAM_BINS)] += 1;
    }
    Ok(DimensionHistogram { dim, edges, counts, limits, degenerate })
}

/// Training-set statistics the atlas needs: per-dim histograms and the
/// regularised dims of every training latent mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub histograms: Vec<DimensionHistogram>,
    pub points: Vec<[f64; REGULARISED_DIMS]>,
}

impl LatentStats {
    pub fn from_latents<T: Scalar>(latents: &[LatentVector<T>]) -> Result<Self, AtlasError> {
        let histograms = (0..REGULARISED_DIMS).map(|d| compute_limits(latents, d)).collect::<Result<_, _>>()?;
        let points = latents.iter().map(|z| z.regularised().map(Scalar::to_f64_exact)).collect();
        Ok(Self { histograms, points })
    }

    /// Encodes `corpus` to posterior means first.
    pub fn from_corpus<T: Scalar>(model: &ModelParams<T>, corpus: &[Measure]) -> Result<Self, AtlasError> {
        Self::from_latents(&model.encode_means(corpus)?)
    }

    pub fn limits(&self) -> [Limits; REGULARISED_DIMS] {
        std::array::from_fn(|d| self.histograms[d].limits)
    }
}

/// A decoded measure (rests in canonical form) and its attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtlasCell {
    pub tokens: Measure,
    pub attributes: AttributeVector,
}

/// Attribute values over one pad's 10×10 grid; `values[i][j]` sits at the pad's
/// first dim's sample `i` and second dim's sample `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceMap {
    pub pad: Pad,
    pub attribute: usize,
    pub values: Vec<Vec<f64>>,
}

/// Training-latent density over a pad, `ln(1 + count) / ln(1 + max count)`;
/// `values[i][j]` follows the same axis order as [`SurfaceMap`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityPlot {
    pub pad: Pad,
    pub values: Vec<Vec<f64>>,
}

/// The 100 decodes behind one pad's surface maps; the other pad's dims stay at the input's values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PadGrid {
    pub pad: Pad,
    pub cells: Vec<AtlasCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentAtlas {
    pub format_version: u32,
    pub checkpoint_hash: String,
    pub input: Measure,
    pub base_latent: Vec<f64>,
    pub profile: MetricalWeightProfile,
    pub histograms: Vec<DimensionHistogram>,
    pub limits: [Limits; REGULARISED_DIMS],
    pub samples: [[f64; GRID_SAMPLES]; REGULARISED_DIMS],
    /// Indexed by [`cell_index`].
    pub cells: Vec<AtlasCell>,
    pub pad_grids: Vec<PadGrid>,
    pub surface_maps: Vec<SurfaceMap>,
    pub density_plots: Vec<DensityPlot>,
}

pub fn cell_index(i: [usize; REGULARISED_DIMS]) -> Result<usize, AtlasError> {
    if let Some(bad) = i.iter().find(|v| **v >= GRID_SAMPLES) {
        return Err(AtlasError::IndexOutOfRange(*bad));
    }
    Ok(((i[0] * GRID_SAMPLES + i[1]) * GRID_SAMPLES + i[2]) * GRID_SAMPLES + i[3])
}

pub fn cell_indices(index: usize) -> [usize; REGULARISED_DIMS] {
    let g = GRID_SAMPLES;
    [index / (g * g * g), index / (g * g) % g, index / g % g, index % g]
}

/// Nearest sample per axis; ties go to the lower index.
pub fn nearest_indices(samples: &[[f64; GRID_SAMPLES]; REGULARISED_DIMS], dims: [f64; REGULARISED_DIMS]) -> [usize; REGULARISED_DIMS] {
    std::array::from_fn(|d| {
        let mut best = 0;
        for (i, s) in samples[d].iter().enumerate() {
            if (s - dims[d]).abs() < (samples[d][best] - dims[d]).abs() {
                best = i;
            }
        }
        best
    })
}

fn with_dims(base: &[f64], dims: [f64; REGULARISED_DIMS]) -> Vec<f64> {
    let mut z = base.to_vec();
    z[..REGULARISED_DIMS].copy_from_slice(&dims);
    z
}

/// The latent decoded for grid cell `index`.
pub fn grid_latent(base: &[f64], samples: &[[f64; GRID_SAMPLES]; REGULARISED_DIMS], index: usize) -> Vec<f64> {
    let i = cell_indices(index);
    with_dims(base, std::array::from_fn(|d| samples[d][i[d]]))
}

/// The latent behind cell `(i, j)` of `pad`'s surface grid.
pub fn pad_latent(base: &[f64], samples: &[[f64; GRID_SAMPLES]; REGULARISED_DIMS], pad: Pad, i: usize, j: usize) -> Vec<f64> {
    let [a, b] = pad.dims();
    let mut dims: [f64; REGULARISED_DIMS] = std::array::from_fn(|d| base[d]);
    dims[a] = samples[a][i];
    dims[b] = samples[b][j];
    with_dims(base, dims)
}

fn decode_all<T: Scalar>(
    model: &ModelParams<T>,
    latents: &[Vec<f64>],
    profile: &MetricalWeightProfile,
    done: &AtomicUsize,
    total: usize,
    progress: &(dyn Fn(f64) + Sync),
) -> Result<Vec<AtlasCell>, AtlasError> {
    let chunks: Vec<Vec<AtlasCell>> = latents
        .par_chunks(DECODE_CHUNK)
        .map(|chunk| -> Result<Vec<AtlasCell>, AtlasError> {
            let zs = chunk
                .iter()
                .map(|z| LatentVector::new(z.iter().map(|v| T::from_f64_lossy(*v)).collect()))
                .collect::<Result<Vec<_>, _>>()?;
            let measures = model.decode_argmax_batch(&zs)?;
            let n = done.fetch_add(chunk.len(), Ordering::SeqCst) + chunk.len();
            progress(n as f64 / total as f64);
            Ok(measures
                .into_iter()
                .map(|m| {
                    let m = m.with_canonical_rests();
                    AtlasCell { attributes: attributes(&m, profile), tokens: m }
                })
                .collect())
        })
        .collect::<Result<_, _>>()?;
    Ok(chunks.concat())
}

/// Decodes the full grid and both pad grids for `input`.
///
/// `progress` receives the completed fraction in `(0, 1]` as decoding proceeds.
pub fn build_atlas<T: Scalar>(
    input: &Measure,
    model: &ModelParams<T>,
    stats: &LatentStats,
    profile: &MetricalWeightProfile,
    checkpoint_hash: &str,
    progress: &(dyn Fn(f64) + Sync),
) -> Result<LatentAtlas, AtlasError> {
    let limits = stats.limits();
    for (d, l) in limits.iter().enumerate() {
        if !(l.lo.is_finite() && l.hi.is_finite() && l.lo < l.hi) {
            return Err(AtlasError::InvalidLimits(d));
        }
    }
    let base: Vec<f64> = model.encode_measure(input)?.values().iter().map(|v| v.to_f64_exact()).collect();
    let samples = limits.map(|l| l.samples());

    let mut latents: Vec<Vec<f64>> = (0..GRID_CELLS).map(|i| grid_latent(&base, &samples, i)).collect();
    for pad in Pad::ALL {
        for i in 0..GRID_SAMPLES {
            for j in 0..GRID_SAMPLES {
                latents.push(pad_latent(&base, &samples, pad, i, j));
            }
        }
    }
    let done = AtomicUsize::new(0);
    let mut decoded = decode_all(model, &latents, profile, &done, latents.len(), progress)?;
    let right = decoded.split_off(GRID_CELLS + GRID_SAMPLES * GRID_SAMPLES);
    let left = decoded.split_off(GRID_CELLS);
    let cells = decoded;
    let pad_grids = vec![PadGrid { pad: Pad::Left, cells: left }, PadGrid { pad: Pad::Right, cells: right }];

    let surface_maps = pad_grids.iter().flat_map(surface_maps_of).collect();
    let density_plots = Pad::ALL.iter().map(|p| density_plot(*p, &stats.points, &limits)).collect();

    Ok(LatentAtlas {
        format_version: ATLAS_FORMAT_VERSION,
        checkpoint_hash: checkpoint_hash.to_string(),
        input: *input,
        base_latent: base,
        profile: *profile,
        histograms: stats.histograms.clone(),
        limits,
        samples,
        cells,
        pad_grids,
        surface_maps,
        density_plots,
    })
}

/// The two surface maps of one pad, read off its decoded cells.
pub fn surface_maps_of(grid: &PadGrid) -> Vec<SurfaceMap> {
    grid.pad
        .dims()
        .iter()
        .map(|&attribute| SurfaceMap {
            pad: grid.pad,
            attribute,
            values: (0..GRID_SAMPLES)
                .map(|i| (0..GRID_SAMPLES).map(|j| grid.cells[i * GRID_SAMPLES + j].attributes.get(attribute)).collect())
                .collect(),
        })
        .collect()
}

pub fn density_plot(pad: Pad, points: &[[f64; REGULARISED_DIMS]], limits: &[Limits; REGULARISED_DIMS]) -> DensityPlot {
    let [a, b] = pad.dims();
    let mut counts = vec![vec![0usize; DENSITY_BINS]; DENSITY_BINS];
    for p in points {
        counts[limits[a].bin(p[a], DENSITY_BINS)][limits[b].bin(p[b], DENSITY_BINS)] += 1;
    }
    let max = counts.iter().flatten().copied().max().unwrap_or(0);
    let norm = (1.0 + max as f64).ln();
    let values = counts
        .iter()
        .map(|row| row.iter().map(|c| if max == 0 { 0.0 } else { (1.0 + *c as f64).ln() / norm }).collect())
        .collect();
    DensityPlot { pad, values }
}

impl LatentAtlas {
    pub fn cell(&self, i: [usize; REGULARISED_DIMS]) -> Result<&AtlasCell, AtlasError> {
        Ok(&self.cells[cell_index(i)?])
    }

    /// Regularised dims of the input's latent.
    pub fn input_dims(&self) -> [f64; REGULARISED_DIMS] {
        std::array::from_fn(|d| self.base_latent[d])
    }

    pub fn nearest_cell(&self) -> [usize; REGULARISED_DIMS] {
        nearest_indices(&self.samples, self.input_dims())
    }

    pub fn latent(&self, index: usize) -> Vec<f64> {
        grid_latent(&self.base_latent, &self.samples, index)
    }

    pub fn surface_map(&self, pad: Pad, attribute: usize) -> Option<&SurfaceMap> {
        self.surface_maps.iter().find(|m| m.pad == pad && m.attribute == attribute)
    }

    pub fn density(&self, pad: Pad) -> Option<&DensityPlot> {
        self.density_plots.iter().find(|d| d.pad == pad)
    }

    /// Canonical manifest bytes; identical atlases give identical bytes.
    pub fn manifest_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("atlas serialises")
    }

    pub fn from_manifest_bytes(bytes: &[u8]) -> Result<Self, AtlasError> {
        #[derive(Deserialize)]
        struct Version {
            format_version: u32,
        }
        let v: Version = serde_json::from_slice(bytes).map_err(|e| AtlasError::Manifest(e.to_string()))?;
        if v.format_version != ATLAS_FORMAT_VERSION {
            return Err(AtlasError::VersionMismatch(v.format_version));
        }
        let atlas: LatentAtlas = serde_json::from_slice(bytes).map_err(|e| AtlasError::Manifest(e.to_string()))?;
        if atlas.cells.len() != GRID_CELLS || atlas.base_latent.len() != LATENT_DIM {
            return Err(AtlasError::Manifest("wrong number of cells or latent dims".into()));
        }
        Ok(atlas)
    }

    pub fn content_hash(&self) -> String {
        sha256_hex(&self.manifest_bytes())
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MIDI_DIR: &str = "midi";

pub fn midi_file_name(index: usize) -> String {
    let [a, b, c, d] = cell_indices(index);
    format!("{a}_{b}_{c}_{d}.mid")
}

/// Names of the six plot images, in pad then attribute order.
pub fn plot_file_names() -> Vec<String> {
    let mut out = Vec::new();
    for pad in Pad::ALL {
        out.push(format!("density_{}.png", pad.name()));
        for a in pad.dims() {
            out.push(format!("surface_{}_{}.png", pad.name(), ATTRIBUTE_NAMES[a]));
        }
    }
    out
}

const PIXELS_PER_PLOT: u32 = 160;

fn colour(t: f64) -> Rgb<u8> {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    Rgb([lerp(30.0, 250.0), lerp(20.0, 220.0), lerp(90.0, 40.0)])
}

/// Renders a matrix with its first index along x and its second along y, origin bottom left.
fn render(values: &[Vec<f64>]) -> Result<Vec<u8>, AtlasError> {
    let n = values.len() as u32;
    let scale = PIXELS_PER_PLOT / n;
    let lo = values.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let img = ImageBuffer::from_fn(n * scale, n * scale, |x, y| {
        let i = (x / scale) as usize;
        let j = (n - 1 - y / scale) as usize;
        colour((values[i][j] - lo) / span)
    });
    let mut out = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
        .map_err(|e| AtlasError::Image(e.to_string()))?;
    Ok(out)
}

/// Writes `midi/i0_i1_i2_i3.mid` for every cell, `manifest.json` and six PNG plots.
pub fn export_atlas(atlas: &LatentAtlas, dir: &Path) -> Result<(), AtlasError> {
    let midi_dir = dir.join(MIDI_DIR);
    fs::create_dir_all(&midi_dir)?;
    atlas
        .cells
        .par_iter()
        .enumerate()
        .try_for_each(|(i, cell)| fs::write(midi_dir.join(midi_file_name(i)), to_midi(&cell.tokens, MIDI_TEMPO_BPM)))?;
    let names = plot_file_names();
    let mut k = 0;
    for pad in Pad::ALL {
        let density = atlas.density(pad).ok_or_else(|| AtlasError::Manifest("missing density plot".into()))?;
        fs::write(dir.join(&names[k]), render(&density.values)?)?;
        k += 1;
        for a in pad.dims() {
            let map = atlas.surface_map(pad, a).ok_or_else(|| AtlasError::Manifest("missing surface map".into()))?;
            fs::write(dir.join(&names[k]), render(&map.values)?)?;
            k += 1;
        }
    }
    write_atomic(&dir.join(MANIFEST_FILE), &atlas.manifest_bytes())?;
    Ok(())
}

pub fn import_atlas(dir: &Path) -> Result<LatentAtlas, AtlasError> {
    LatentAtlas::from_manifest_bytes(&fs::read(dir.join(MANIFEST_FILE))?)
}

/// Spearman correlation, per regularised dim, between its 10 sample values and
/// the matching attribute averaged over the other three dims' samples.
pub fn monotonicity(atlas: &LatentAtlas) -> [f64; REGULARISED_DIMS] {
    std::array::from_fn(|d| {
        let mut sums = [0.0; GRID_SAMPLES];
        for (index, cell) in atlas.cells.iter().enumerate() {
            sums[cell_indices(index)[d]] += cell.attributes.get(d);
        }
        let per = (GRID_CELLS / GRID_SAMPLES) as f64;
        let means: Vec<f64> = sums.iter().map(|s| s / per).collect();
        spearman(&atlas.samples[d], &means)
    })
}

/// Per-dim, per-attribute coefficient of determination of a univariate linear fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpretabilityReport {
    /// `table[d][a]`: score of dim `d` for attribute `a`.
    pub table: Vec<[f64; ATTRIBUTE_COUNT]>,
    /// `table[a][a]`: the score of each attribute's assigned dim.
    pub assigned: [f64; ATTRIBUTE_COUNT],
    pub best: [f64; ATTRIBUTE_COUNT],
    pub best_dim: [usize; ATTRIBUTE_COUNT],
}

pub fn interpretability_from_latents<T: Scalar>(
    latents: &[LatentVector<T>],
    attrs: &[[f64; ATTRIBUTE_COUNT]],
) -> Result<InterpretabilityReport, AtlasError> {
    if latents.len() != attrs.len() {
        return Err(AtlasError::LengthMismatch(latents.len(), attrs.len()));
    }
    if latents.len() < MIN_INTERPRETABILITY_SAMPLES {
        return Err(AtlasError::TooFewSamples(latents.len()));
    }
    let columns: Vec<Vec<f64>> = (0..ATTRIBUTE_COUNT).map(|a| attrs.iter().map(|r| r[a]).collect()).collect();
    let table: Vec<[f64; ATTRIBUTE_COUNT]> = (0..LATENT_DIM)
        .into_par_iter()
        .map(|d| {
            let x: Vec<f64> = latents.iter().map(|z| z.values()[d].to_f64_exact()).collect();
            std::array::from_fn(|a| r_squared(&x, &columns[a]))
        })
        .collect();
    let mut best = [0.0; ATTRIBUTE_COUNT];
    let mut best_dim = [0; ATTRIBUTE_COUNT];
    for (d, row) in table.iter().enumerate() {
        for a in 0..ATTRIBUTE_COUNT {
            if row[a] > best[a] {
                best[a] = row[a];
                best_dim[a] = d;
            }
        }
    }
    let assigned = std::array::from_fn(|a| table[a][a]);
    Ok(InterpretabilityReport { table, assigned, best, best_dim })
}

/// Scores posterior means of `dataset` against its attributes.
pub fn interpretability<T: Scalar>(
    model: &ModelParams<T>,
    dataset: &[Measure],
    profile: &MetricalWeightProfile,
) -> Result<InterpretabilityReport, AtlasError> {
    if dataset.len() < MIN_INTERPRETABILITY_SAMPLES {
        return Err(AtlasError::TooFewSamples(dataset.len()));
    }
    let attrs: Vec<[f64; ATTRIBUTE_COUNT]> = dataset.iter().map(|m| attributes(m, profile).as_array()).collect();
    interpretability_from_latents(&model.encode_means(dataset)?, &attrs)
}
