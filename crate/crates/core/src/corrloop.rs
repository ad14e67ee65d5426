//! In-silico closed-loop correction, residual heatmaps, tile maps and
//! spatially varying deconvolution.
//!
//! Corrections live in coefficient space: the corrector holds `applied`,
//! the sample sees `true_ab + applied`, and each iteration subtracts the
//! prediction from `applied`.

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::confidence::{assess, ConfidenceConfig, ModeConfidence};
use crate::embedding::Embedder;
use crate::error::{Error, Result};
use crate::optics::{wiener_deconvolve, LightSheetKind, Microscope, OpticsConfig, OtfMask, Psf3D, DEFAULT_OTF_THRESHOLD};
use crate::predictor::{Predictor, Query};
use crate::rng::{self, purpose};
use crate::synth::{apply_camera, place_puncta, render_field, sample_truth, CameraModel, PunctaField, SynthConfig};
use crate::volume::Volume;
use crate::zernike::{ZernikeCoeffs, WAVELENGTH_UM};

/// Diffraction limit of the residual wavefront (λ RMS).
pub const DIFFRACTION_LIMIT_WAVES: f64 = 0.075;

/// Residual wavefront RMS in waves.
pub fn residual_waves(c: &ZernikeCoeffs) -> f64 {
    c.norm() / WAVELENGTH_UM
}

/// Everything needed to image the sample under a given residual.
pub struct LoopSim<'a> {
    pub scope: &'a Microscope,
    pub embedder: &'a Embedder,
    pub puncta: PunctaField,
    pub camera: Option<CameraModel>,
    /// Camera noise of iteration `k` comes from `(seed, k)`.
    pub seed: u64,
}

impl LoopSim<'_> {
    fn image(&self, residual: &ZernikeCoeffs, k: u64) -> Result<Volume> {
        let photons = render_field(&self.puncta, self.scope, residual)?;
        match &self.camera {
            Some(cam) => apply_camera(&photons, cam, rng::mix(&[self.seed, k])),
            None => Ok(photons),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionState {
    pub true_ab: ZernikeCoeffs,
    /// Cumulative correction.
    pub applied: ZernikeCoeffs,
    /// Aberration left after the last iteration.
    pub residual: ZernikeCoeffs,
    /// Residual RMS (λ) before the first iteration and after each one.
    pub history: Vec<f64>,
    pub predictions: Vec<ZernikeCoeffs>,
    /// Set when the predictor failed; the history stops there.
    pub error: Option<String>,
}

impl CorrectionState {
    pub fn new(true_ab: ZernikeCoeffs) -> Self {
        Self {
            true_ab,
            applied: ZernikeCoeffs::zeros(),
            residual: true_ab,
            history: vec![residual_waves(&true_ab)],
            predictions: Vec::new(),
            error: None,
        }
    }
}

/// Runs `iters` rounds of image → embed → predict → subtract.
pub fn run_loop(
    true_ab: &ZernikeCoeffs,
    predictor: &dyn Predictor,
    sim: &LoopSim,
    iters: usize,
) -> Result<CorrectionState> {
    if iters == 0 {
        return Err(Error::invalid("iters must be >= 1"));
    }
    let mut state = CorrectionState::new(*true_ab);
    for k in 0..iters as u64 {
        let residual = state.residual;
        let embedding = if predictor.needs_embedding() {
            let vol = sim.image(&residual, k)?;
            Some(sim.embedder.embed(&vol)?)
        } else {
            None
        };
        let q = Query {
            embedding: embedding.as_ref(),
            truth: Some(&residual),
            index: k,
        };
        let pred = match predictor.predict(&q) {
            Ok(p) => p,
            Err(e) => {
                state.error = Some(format!("iteration {k}: {e}"));
                break;
            }
        };
        state.applied = state.applied - pred;
        state.residual = residual - pred;
        state.predictions.push(pred);
        state.history.push(residual_waves(&state.residual));
    }
    Ok(state)
}

/// Residual heatmap over initial amplitude and photon bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub synth: SynthConfig,
    /// Bin edges of the initial aberration (λ RMS).
    pub amplitude_edges_waves: Vec<f64>,
    /// Bin edges of the integrated photons per punctum.
    pub photon_edges: Vec<f64>,
    pub samples_per_bin: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::training(),
            amplitude_edges_waves: vec![0.0, 0.125, 0.25, 0.375, 0.5],
            photon_edges: vec![1.0e3, 1.0e4, 5.0e4, 1.0e5, 2.0e5],
            samples_per_bin: 25,
            iterations: 3,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        for (name, e) in [("amplitude", &self.amplitude_edges_waves), ("photon", &self.photon_edges)] {
            if e.len() < 2 || e.windows(2).any(|w| !(w[1] > w[0])) || e.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("{name} edges must be at least two increasing values")));
            }
        }
        if self.amplitude_edges_waves[0] < 0.0 || self.photon_edges[0] < 1.0 {
            return Err(Error::invalid("amplitudes must be >= 0 and photons >= 1"));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be >= 1"));
        }
        Ok(())
    }
}

/// One heatmap cell at one iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub amp_lo_waves: f64,
    pub amp_hi_waves: f64,
    pub photons_lo: f64,
    pub photons_hi: f64,
    /// 0 is the uncorrected sample.
    pub iteration: usize,
    /// Samples that reached this iteration.
    pub n: usize,
    pub median_residual_waves: Option<f64>,
    pub frac_below_limit: Option<f64>,
    /// `empty` when no sample reached this cell.
    pub flag: String,
}

/// Fixed CSV column set of [`grid_csv`].
pub const GRID_COLUMNS: [&str; 9] = [
    "amp_lo_waves",
    "amp_hi_waves",
    "photons_lo",
    "photons_hi",
    "iteration",
    "n",
    "median_residual_waves",
    "frac_below_limit",
    "flag",
];

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Sample `i` of bin `(a, p)`: a truth rescaled to an amplitude drawn
/// uniformly inside the amplitude bin, puncta with photons inside the
/// photon bin.
fn grid_sample(cfg: &EvalConfig, a: usize, p: usize, i: usize) -> Result<(ZernikeCoeffs, PunctaField, u64)> {
    let seed = rng::mix(&[cfg.seed, a as u64, p as u64, i as u64]);
    let (_, truth) = sample_truth(seed, &cfg.synth)?;
    let mut r = rng::stream(seed, purpose::EVAL);
    let (lo, hi) = (cfg.amplitude_edges_waves[a], cfg.amplitude_edges_waves[a + 1]);
    let target_um = r.random_range(lo..hi) * WAVELENGTH_UM;
    let n = truth.norm();
    let truth = if n > 0.0 { truth.scale(target_um / n) } else { truth };
    let synth = SynthConfig {
        photon_range: [cfg.photon_edges[p], cfg.photon_edges[p + 1]],
        ..cfg.synth.clone()
    };
    Ok((truth, place_puncta(seed, &synth)?, seed))
}

/// Runs the correction loop on every sample of every bin. Work units run
/// in parallel; rows come back in bin order.
pub fn evaluate_grid(
    predictor: &dyn Predictor,
    cfg: &EvalConfig,
    scope: &Microscope,
    embedder: &Embedder,
) -> Result<Vec<GridRow>> {
    cfg.validate()?;
    let na = cfg.amplitude_edges_waves.len() - 1;
    let np = cfg.photon_edges.len() - 1;
    let jobs: Vec<(usize, usize, usize)> = (0..na)
        .flat_map(|a| (0..np).flat_map(move |p| (0..cfg.samples_per_bin).map(move |i| (a, p, i))))
        .collect();
    let histories = jobs
        .par_iter()
        .map(|&(a, p, i)| {
            let (truth, puncta, seed) = grid_sample(cfg, a, p, i)?;
            let sim = LoopSim {
                scope,
                embedder,
                puncta,
                camera: cfg.synth.camera.clone(),
                seed,
            };
            Ok(run_loop(&truth, predictor, &sim, cfg.iterations)?.history)
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let mut rows = Vec::new();
    for a in 0..na {
        for p in 0..np {
            let cell: Vec<&Vec<f64>> = jobs
                .iter()
                .zip(&histories)
                .filter(|((ja, jp, _), _)| *ja == a && *jp == p)
                .map(|(_, h)| h)
                .collect();
            for it in 0..=cfg.iterations {
                let vals: Vec<f64> = cell.iter().filter_map(|h| h.get(it).copied()).collect();
                let n = vals.len();
                let below = vals.iter().filter(|&&v| v < DIFFRACTION_LIMIT_WAVES).count();
                rows.push(GridRow {
                    amp_lo_waves: cfg.amplitude_edges_waves[a],
                    amp_hi_waves: cfg.amplitude_edges_waves[a + 1],
                    photons_lo: cfg.photon_edges[p],
                    photons_hi: cfg.photon_edges[p + 1],
                    iteration: it,
                    n,
                    median_residual_waves: median(vals),
                    frac_below_limit: (n > 0).then(|| below as f64 / n as f64),
                    flag: if n == 0 { "empty".into() } else { String::new() },
                });
            }
        }
    }
    Ok(rows)
}

/// Heatmap rows as CSV with the [`GRID_COLUMNS`] header; missing values
/// are empty fields.
pub fn grid_csv(rows: &[GridRow]) -> String {
    let mut s = GRID_COLUMNS.join(",");
    s.push('\n');
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.amp_lo_waves,
            r.amp_hi_waves,
            r.photons_lo,
            r.photons_hi,
            r.iteration,
            r.n,
            opt(r.median_residual_waves),
            opt(r.frac_below_limit),
            r.flag
        );
    }
    s
}

/// Mirror index without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

/// The `size` block at `origin` (may lie partly outside), reflected at the
/// volume borders.
pub fn extract(vol: &Volume, origin: [isize; 3], size: [usize; 3]) -> Volume {
    let sh = vol.shape();
    let data = ndarray::Array3::from_shape_fn((size[0], size[1], size[2]), |(z, y, x)| {
        vol.data[[
            reflect(origin[0] + z as isize, sh[0]),
            reflect(origin[1] + y as isize, sh[1]),
            reflect(origin[2] + x as isize, sh[2]),
        ]]
    });
    Volume::new(data, vol.voxel_um)
}

/// Row-major tile origins; the last tile on an axis may overhang the
/// volume and is then padded by reflection.
pub fn tile_origins(shape: [usize; 3], tile: [usize; 3], stride: [usize; 3]) -> Result<Vec<[usize; 3]>> {
    let mut starts: [Vec<usize>; 3] = Default::default();
    for a in 0..3 {
        if tile[a] == 0 || stride[a] == 0 {
            return Err(Error::invalid("tile and stride must be positive"));
        }
        if tile[a] > shape[a] {
            return Err(Error::invalid(format!(
                "tile {:?} is larger than the volume {:?}",
                tile, shape
            )));
        }
        let count = (shape[a] - tile[a]).div_ceil(stride[a]) + 1;
        starts[a] = (0..count).map(|i| i * stride[a]).collect();
    }
    let mut out = Vec::new();
    for &z in &starts[0] {
        for &y in &starts[1] {
            for &x in &starts[2] {
                out.push([z, y, x]);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub origin: [usize; 3],
    pub volume: Volume,
}

pub fn tile_volume(vol: &Volume, tile: [usize; 3], stride: [usize; 3]) -> Result<Vec<Tile>> {
    Ok(tile_origins(vol.shape(), tile, stride)?
        .into_iter()
        .map(|o| Tile {
            origin: o,
            volume: extract(vol, [o[0] as isize, o[1] as isize, o[2] as isize], tile),
        })
        .collect())
}

/// Pastes tiles back; later tiles overwrite earlier ones where they
/// overlap, and overhang is dropped.
pub fn reassemble(tiles: &[Tile], shape: [usize; 3], voxel_um: [f64; 3]) -> Volume {
    let mut out = Volume::zeros(shape, voxel_um);
    for t in tiles {
        paste(&mut out, &t.volume, t.origin, [0; 3], t.volume.shape());
    }
    out
}

/// Copies `src[from .. from + size]` to `dst[origin ..]`, clipped to `dst`.
fn paste(dst: &mut Volume, src: &Volume, origin: [usize; 3], from: [usize; 3], size: [usize; 3]) {
    let sh = dst.shape();
    for z in 0..size[0].min(sh[0].saturating_sub(origin[0])) {
        for y in 0..size[1].min(sh[1].saturating_sub(origin[1])) {
            for x in 0..size[2].min(sh[2].saturating_sub(origin[2])) {
                dst.data[[origin[0] + z, origin[1] + y, origin[2] + x]] =
                    src.data[[from[0] + z, from[1] + y, from[2] + x]];
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TileFlag {
    Predicted,
    /// Too little signal; the ideal PSF is used for this tile.
    IdealFallback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileEntry {
    pub origin: [usize; 3],
    pub coeffs: ZernikeCoeffs,
    pub groups: Vec<ModeConfidence>,
    pub flag: TileFlag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileMap {
    pub shape: [usize; 3],
    pub tile: [usize; 3],
    pub stride: [usize; 3],
    pub voxel_um: [f64; 3],
    pub tiles: Vec<TileEntry>,
}

impl TileMap {
    pub fn read(path: &std::path::Path) -> Result<Self> {
        crate::io::read_json(path)
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        crate::io::write_json(path, self)
    }
}

/// Ground truth of the tile at an origin, for analytic predictors.
pub type TileTruth<'a> = &'a (dyn Fn([usize; 3]) -> ZernikeCoeffs + Sync);

/// Embeds and assesses every tile. Tiles without a confident non-zero
/// group, or without any detected punctum, fall back to the ideal PSF.
pub fn map_aberrations(
    vol: &Volume,
    embedder: &Embedder,
    predictor: &dyn Predictor,
    conf: &ConfidenceConfig,
    tile: [usize; 3],
    stride: [usize; 3],
    truth: Option<TileTruth>,
) -> Result<TileMap> {
    let tiles = tile_volume(vol, tile, stride)?;
    let entries = tiles
        .par_iter()
        .map(|t| {
            let fallback = || TileEntry {
                origin: t.origin,
                coeffs: ZernikeCoeffs::zeros(),
                groups: Vec::new(),
                flag: TileFlag::IdealFallback,
            };
            let e = embedder.embed(&t.volume)?;
            if e.meta.n_peaks == 0 || !e.is_finite() {
                return Ok(fallback());
            }
            let tr = truth.map(|f| f(t.origin));
            let report = assess(&e, tr.as_ref(), predictor, conf)?;
            let flag = if report.is_uninformative() {
                TileFlag::IdealFallback
            } else {
                TileFlag::Predicted
            };
            Ok(TileEntry {
                origin: t.origin,
                coeffs: if flag == TileFlag::Predicted {
                    report.coeffs
                } else {
                    ZernikeCoeffs::zeros()
                },
                groups: report.groups,
                flag,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TileMap {
        shape: vol.shape(),
        tile,
        stride,
        voxel_um: vol.voxel_um,
        tiles: entries,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeconvConfig {
    /// Voxels added on every side of a tile before deconvolution.
    pub overlap: usize,
    pub snr: f64,
    /// OTF support threshold relative to the ideal OTF peak.
    pub otf_threshold: f64,
}

impl Default for DeconvConfig {
    fn default() -> Self {
        Self {
            overlap: 32,
            snr: 100.0,
            otf_threshold: DEFAULT_OTF_THRESHOLD,
        }
    }
}

/// PSF and OTF mask for a tile of the given extended shape; `None` asks
/// for the ideal PSF.
pub type TilePsf<'a> = &'a (dyn Fn(Option<&ZernikeCoeffs>, [usize; 3]) -> Result<(Psf3D, OtfMask)> + Sync);

/// Deconvolves every tile extended by `overlap` (reflected at the volume
/// borders) with its own PSF and stitches the tile cores.
pub fn sv_deconvolve_with(vol: &Volume, map: &TileMap, cfg: &DeconvConfig, psf: TilePsf) -> Result<Volume> {
    if map.shape != vol.shape() {
        return Err(Error::shape(format!(
            "tile map covers {:?}, volume is {:?}",
            map.shape,
            vol.shape()
        )));
    }
    let ov = cfg.overlap;
    let ext = map.tile.map(|t| t + 2 * ov);
    let cores = map
        .tiles
        .par_iter()
        .map(|t| {
            let origin = t.origin.map(|o| o as isize - ov as isize);
            let block = extract(vol, origin, ext);
            let coeffs = (t.flag == TileFlag::Predicted).then_some(&t.coeffs);
            let (p, mask) = psf(coeffs, ext)?;
            wiener_deconvolve(&block, &p, cfg.snr, &mask)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Volume::zeros(vol.shape(), vol.voxel_um);
    for (t, core) in map.tiles.iter().zip(&cores) {
        paste(&mut out, core, t.origin, [ov; 3], map.tile);
    }
    Ok(out)
}

/// [`sv_deconvolve_with`] using the simulated microscope on each extended
/// tile grid; the mask is the support of the ideal OTF.
pub fn sv_deconvolve(
    vol: &Volume,
    map: &TileMap,
    optics: &OpticsConfig,
    sheet: LightSheetKind,
    cfg: &DeconvConfig,
) -> Result<Volume> {
    let ext = map.tile.map(|t| t + 2 * cfg.overlap);
    let scope = Microscope::new(&optics.with_shape(ext), sheet)?;
    let ideal = scope.ideal()?;
    let mask = OtfMask::from_psf(&ideal, cfg.otf_threshold)?;
    let psf = |c: Option<&ZernikeCoeffs>, shape: [usize; 3]| -> Result<(Psf3D, OtfMask)> {
        debug_assert_eq!(shape, ext);
        let p = match c {
            Some(c) => scope.overall(c)?,
            None => ideal.clone(),
        };
        Ok((p, mask.clone()))
    };
    sv_deconvolve_with(vol, map, cfg, &psf)
}

/// Largest jump across tile borders relative to the local intensity, over
/// voxels brighter than `floor` times the volume maximum. The jump is the
/// step across the border minus the mean of the neighbouring steps, so a
/// smooth gradient scores zero.
pub fn border_discontinuity(vol: &Volume, tile: [usize; 3], floor: f64) -> f64 {
    let sh = vol.shape();
    let vmax = vol.data.iter().cloned().fold(0.0, f64::max);
    let d = &vol.data;
    let mut worst = 0.0f64;
    for axis in 0..3 {
        let mut b = tile[axis];
        while b + 1 < sh[axis] && b >= 2 {
            for ((z, y, x), _) in d.indexed_iter() {
                let idx = [z, y, x];
                if idx[axis] != b {
                    continue;
                }
                let at = |o: isize| {
                    let mut i = idx;
                    i[axis] = (b as isize + o) as usize;
                    d[i]
                };
                let local = 0.25 * (at(-2) + at(-1) + at(0) + at(1));
                if local <= floor * vmax || local <= 0.0 {
                    continue;
                }
                let step = at(0) - at(-1);
                let expected = 0.5 * ((at(-1) - at(-2)) + (at(1) - at(0)));
                worst = worst.max((step - expected).abs() / local);
            }
            b += tile[axis];
        }
    }
    worst
}
