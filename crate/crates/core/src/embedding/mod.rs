//! Six-plane Fourier embedding of a 3D volume.
//!
//! The volume is filtered, multi-punctum interference is divided out, and
//! the resulting spectrum τ is compared with that of the ideal PSF put
//! through the same chain. Amplitude planes hold `|τ| / |τ_ideal|`; phase
//! planes hold the unwrapped phase of `τ conj(τ_ideal)`. Plane 1 of each
//! triple is the `k_z = 0` plane, plane 2 the mean of `k_z = 0..4` and
//! plane 3 the mean of `k_z = 5..9`. Everything outside the ideal OTF
//! support is exactly zero.

pub mod interference;
pub mod preprocess;
pub mod unwrap;

pub use interference::{divide_point_map, local_maxima, ncc, refine_on_intensity, remove_interference, InterferenceConfig, InterferenceResult, Peak};
pub use preprocess::{gaussian_blur_reflect, lateral_lowpass, preprocess, tukey, PreprocessConfig};
pub use unwrap::{unwrap_quality_guided, wrap};

use ndarray::{s, Array2, Array3, Axis};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::fft::{centered_fft3, centered_ifft3};
use crate::optics::{LightSheetKind, Microscope, OpticsConfig};
use crate::volume::{Container, Volume};

/// Number of planes in an embedding.
pub const N_PLANES: usize = 6;
/// Axial frequency planes (relative to `k_z = 0`) feeding the embedding.
const N_KZ: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingConfig {
    pub preprocess: PreprocessConfig,
    pub interference: InterferenceConfig,
    /// A frequency belongs to the support when `|τ_ideal|` exceeds this
    /// fraction of its maximum.
    pub support_threshold: f64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            preprocess: PreprocessConfig::default(),
            interference: InterferenceConfig::default(),
            support_threshold: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMeta {
    pub source_shape: [usize; 3],
    pub lambda_um: f64,
    pub na: f64,
    /// Radius (pixels) of the lateral OTF support disk.
    pub support_radius_px: f64,
    pub n_peaks: usize,
    pub interference_removed: bool,
}

/// `{α1, α2, α3, φ1, φ2, φ3}`, each `d x d`.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierEmbedding {
    pub planes: Array3<f64>,
    pub meta: EmbeddingMeta,
}

impl FourierEmbedding {
    pub fn d(&self) -> usize {
        self.planes.dim().1
    }

    pub fn is_finite(&self) -> bool {
        self.planes.iter().all(|v| v.is_finite())
    }

    pub fn to_container(&self) -> Container {
        let mut meta = Map::new();
        meta.insert("embedding".into(), Value::Bool(true));
        meta.insert("embedding_meta".into(), json!(self.meta));
        Volume::new(self.planes.clone(), [1.0; 3]).to_container(meta)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.header.meta.get("embedding") != Some(&Value::Bool(true)) {
            return Err(Error::Format("container is not an embedding".into()));
        }
        let shape = &c.header.shape;
        if shape.len() != 3 || shape[0] != N_PLANES || shape[1] != shape[2] {
            return Err(Error::Format(format!("embedding shape must be (6, d, d), got {shape:?}")));
        }
        let meta: EmbeddingMeta = serde_json::from_value(
            c.header
                .meta
                .get("embedding_meta")
                .cloned()
                .ok_or_else(|| Error::Format("embedding metadata missing".into()))?,
        )?;
        let planes = Volume::from_container(c)?.data;
        Ok(Self { planes, meta })
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        self.to_container().write(path)
    }
}

/// Ideal-PSF reference and configuration; immutable once built and safe to
/// share across threads.
#[derive(Clone, Debug)]
pub struct Embedder {
    pub optics: OpticsConfig,
    pub cfg: EmbeddingConfig,
    ideal: Array3<Complex64>,
    support: Array3<bool>,
    disk_radius_px: f64,
}

impl Embedder {
    /// Reference built from the unaberrated overall PSF.
    pub fn new(optics: &OpticsConfig, sheet: LightSheetKind, cfg: &EmbeddingConfig) -> Result<Self> {
        let scope = Microscope::new(optics, sheet)?;
        Self::from_ideal(optics, &scope.ideal()?, cfg)
    }

    /// Reference built from an explicit ideal volume on the optics grid.
    pub fn from_ideal(optics: &OpticsConfig, ideal: &Volume, cfg: &EmbeddingConfig) -> Result<Self> {
        optics.validate()?;
        let [nz, ny, nx] = optics.shape;
        if ny != nx || optics.voxel_um[1] != optics.voxel_um[2] {
            return Err(Error::invalid("embeddings need square lateral grids and pixels"));
        }
        if nz < 2 * N_KZ {
            return Err(Error::invalid(format!("embeddings need at least {} z-planes", 2 * N_KZ)));
        }
        if ideal.shape() != optics.shape {
            return Err(Error::shape(format!(
                "ideal volume {:?} does not match optics shape {:?}",
                ideal.shape(),
                optics.shape
            )));
        }
        let disk_radius_px = 2.0 * optics.na_det / optics.lambda_det_um * nx as f64 * optics.voxel_um[2];
        let mut me = Self {
            optics: optics.clone(),
            cfg: cfg.clone(),
            ideal: Array3::zeros((N_KZ, ny, nx)),
            support: Array3::from_elem((N_KZ, ny, nx), false),
            disk_radius_px,
        };
        let pre = preprocess(ideal, optics, &cfg.preprocess)?;
        let r = remove_interference(&pre, &cfg.interference)?;
        if !r.removed {
            return Err(Error::invalid("ideal reference has no detectable punctum"));
        }
        me.ideal = me.kz_planes(&r.spectrum);
        let peak = me.ideal.iter().map(|c| c.norm()).fold(0.0, f64::max);
        let disk = me.lateral_disk();
        me.support = Array3::from_shape_fn((N_KZ, ny, nx), |(p, y, x)| {
            disk[[y, x]] && me.ideal[[p, y, x]].norm() > cfg.support_threshold * peak
        });
        Ok(me)
    }

    pub fn d(&self) -> usize {
        self.optics.shape[2]
    }

    pub fn support_radius_px(&self) -> f64 {
        self.disk_radius_px
    }

    /// Lateral OTF disk `|k| <= 2 NA / λ` in pixel units about `(d/2, d/2)`.
    pub fn lateral_disk(&self) -> Array2<bool> {
        disk_mask(self.d(), self.disk_radius_px)
    }

    /// Support of plane `kz` (0-based from the `k_z = 0` plane).
    pub fn support(&self, kz: usize) -> ndarray::ArrayView2<'_, bool> {
        self.support.index_axis(Axis(0), kz)
    }

    fn plane_dim(&self) -> (usize, usize) {
        (self.optics.shape[1], self.optics.shape[2])
    }

    fn kz_planes(&self, spectrum: &Array3<Complex64>) -> Array3<Complex64> {
        let c = spectrum.dim().0 / 2;
        spectrum.slice(s![c..c + N_KZ, .., ..]).to_owned()
    }

    /// Fourier crop or zero-pad to the optics grid; the implied voxel size
    /// must match the optics voxel size.
    pub fn resample(&self, vol: &Volume) -> Result<Volume> {
        let target = self.optics.shape;
        if vol.shape() == target {
            if !voxels_match(vol.voxel_um, self.optics.voxel_um) {
                return Err(Error::shape(format!(
                    "voxel size {:?} does not match optics voxel size {:?}",
                    vol.voxel_um, self.optics.voxel_um
                )));
            }
            return Ok(vol.clone());
        }
        let src = vol.shape();
        let voxel = [0, 1, 2].map(|a| vol.voxel_um[a] * src[a] as f64 / target[a] as f64);
        if !voxels_match(voxel, self.optics.voxel_um) {
            return Err(Error::shape(format!(
                "resampling {:?} at {:?} µm to {:?} gives voxels {:?}, expected {:?}",
                src, vol.voxel_um, target, voxel, self.optics.voxel_um
            )));
        }
        let spec = centered_fft3(&vol.data);
        let mut out = Array3::<Complex64>::zeros(target);
        let scale = (target.iter().product::<usize>() as f64) / (src.iter().product::<usize>() as f64);
        for ((z, y, x), v) in out.indexed_iter_mut() {
            let i = [z, y, x];
            let mut j = [0usize; 3];
            let mut inside = true;
            for a in 0..3 {
                let k = i[a] as i64 - (target[a] / 2) as i64;
                let jj = k + (src[a] / 2) as i64;
                if jj < 0 || jj >= src[a] as i64 {
                    inside = false;
                    break;
                }
                j[a] = jj as usize;
            }
            if inside {
                *v = spec[j] * scale;
            }
        }
        let data = centered_ifft3(&out).mapv(|c| c.re);
        Ok(Volume::new(data, self.optics.voxel_um))
    }

    /// Amplitude planes `(α1, α2, α3)` from an interference-removed
    /// spectrum.
    pub fn amplitude_planes(&self, tau: &Array3<Complex64>) -> [Array2<f64>; 3] {
        let planes = self.kz_planes(tau);
        let ratio = |p: usize| {
            Array2::from_shape_fn(self.plane_dim(), |(y, x)| {
                if self.support[[p, y, x]] {
                    planes[[p, y, x]].norm() / self.ideal[[p, y, x]].norm()
                } else {
                    0.0
                }
            })
        };
        let all: Vec<Array2<f64>> = (0..N_KZ).map(ratio).collect();
        [all[0].clone(), mean(&all[0..5]), mean(&all[5..10])]
    }

    /// Phase planes `(φ1, φ2, φ3)` relative to the ideal reference.
    pub fn phase_planes(&self, tau: &Array3<Complex64>) -> [Array2<f64>; 3] {
        let planes = self.kz_planes(tau);
        let phase = |p: usize| {
            let shape = self.plane_dim();
            let rel = Array2::from_shape_fn(shape, |(y, x)| {
                (planes[[p, y, x]] * self.ideal[[p, y, x]].conj()).arg()
            });
            let quality = Array2::from_shape_fn(shape, |(y, x)| planes[[p, y, x]].norm());
            unwrap_quality_guided(&rel, &quality, &self.support.index_axis(Axis(0), p).to_owned())
        };
        let all: Vec<Array2<f64>> = (0..N_KZ).map(phase).collect();
        [all[0].clone(), mean(&all[0..5]), mean(&all[5..10])]
    }

    /// `(α1, α2, α3)` of a preprocessed, interference-removed volume.
    pub fn amplitude_embedding(&self, v: &Volume) -> Result<[Array2<f64>; 3]> {
        self.check_shape(v)?;
        Ok(self.amplitude_planes(&centered_fft3(&v.data)))
    }

    /// `(φ1, φ2, φ3)` of a preprocessed, interference-removed volume.
    pub fn phase_embedding(&self, v: &Volume) -> Result<[Array2<f64>; 3]> {
        self.check_shape(v)?;
        Ok(self.phase_planes(&centered_fft3(&v.data)))
    }

    fn check_shape(&self, v: &Volume) -> Result<()> {
        if v.shape() != self.optics.shape {
            return Err(Error::shape(format!(
                "volume {:?} does not match embedding grid {:?}",
                v.shape(),
                self.optics.shape
            )));
        }
        Ok(())
    }

    /// Full chain: resample, preprocess, remove interference, build planes.
    pub fn embed(&self, raw: &Volume) -> Result<FourierEmbedding> {
        if !raw.is_finite() {
            return Err(Error::Numeric {
                location: "embedding::embed".into(),
                detail: "input volume contains non-finite values".into(),
            });
        }
        let source_shape = raw.shape();
        let v = self.resample(raw)?;
        let pre = preprocess(&v, &self.optics, &self.cfg.preprocess)?;
        let r = remove_interference(&pre, &self.cfg.interference)?;
        let [a1, a2, a3] = self.amplitude_planes(&r.spectrum);
        let [p1, p2, p3] = self.phase_planes(&r.spectrum);
        let d = self.d();
        let mut planes = Array3::zeros((N_PLANES, d, d));
        for (i, p) in [a1, a2, a3, p1, p2, p3].iter().enumerate() {
            planes.index_axis_mut(Axis(0), i).assign(p);
        }
        let e = FourierEmbedding {
            planes,
            meta: EmbeddingMeta {
                source_shape,
                lambda_um: self.optics.lambda_det_um,
                na: self.optics.na_det,
                support_radius_px: self.disk_radius_px,
                n_peaks: r.peaks.len(),
                interference_removed: r.removed,
            },
        };
        if !e.is_finite() {
            return Err(Error::Numeric {
                location: "embedding::embed".into(),
                detail: "non-finite embedding".into(),
            });
        }
        Ok(e)
    }
}

fn voxels_match(a: [f64; 3], b: [f64; 3]) -> bool {
    a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= 1e-9 * y.abs().max(1.0))
}

fn mean(planes: &[Array2<f64>]) -> Array2<f64> {
    let mut acc = Array2::zeros(planes[0].raw_dim());
    for p in planes {
        acc += p;
    }
    acc / planes.len() as f64
}

/// Pixels of a `d x d` grid within `radius` of `(d/2, d/2)`.
pub fn disk_mask(d: usize, radius: f64) -> Array2<bool> {
    let c = (d / 2) as f64;
    Array2::from_shape_fn((d, d), |(y, x)| (y as f64 - c).hypot(x as f64 - c) <= radius)
}

/// Bilinear sample of `p` at fractional `(y, x)`; 0 outside the grid.
fn bilinear(p: &ndarray::ArrayView2<f64>, y: f64, x: f64) -> f64 {
    let (ny, nx) = p.dim();
    let (y0, x0) = (y.floor(), x.floor());
    let (ty, tx) = (y - y0, x - x0);
    let get = |yy: f64, xx: f64| {
        if yy < 0.0 || xx < 0.0 || yy >= ny as f64 || xx >= nx as f64 {
            0.0
        } else {
            p[[yy as usize, xx as usize]]
        }
    };
    let mut acc = 0.0;
    for (dy, wy) in [(0.0, 1.0 - ty), (1.0, ty)] {
        for (dx, wx) in [(0.0, 1.0 - tx), (1.0, tx)] {
            let w = wy * wx;
            if w != 0.0 {
                acc += w * get(y0 + dy, x0 + dx);
            }
        }
    }
    acc
}

/// Rotates every plane counter-clockwise by `theta` about `(d/2, d/2)` with
/// bilinear interpolation; values outside the support disk are zero.
pub fn rotate_embedding(e: &FourierEmbedding, theta: f64) -> FourierEmbedding {
    let (np, d, _) = e.planes.dim();
    let c = (d / 2) as f64;
    let disk = disk_mask(d, e.meta.support_radius_px);
    let (sn, cs) = theta.sin_cos();
    let mut out = Array3::zeros((np, d, d));
    for p in 0..np {
        let src = e.planes.index_axis(Axis(0), p);
        let mut dst = out.index_axis_mut(Axis(0), p);
        for ((y, x), v) in dst.indexed_iter_mut() {
            if !disk[[y, x]] {
                continue;
            }
            let (dy, dx) = (y as f64 - c, x as f64 - c);
            // Inverse map: sample the input at R(-theta) applied to (x, y).
            let sx = cs * dx + sn * dy;
            let sy = -sn * dx + cs * dy;
            *v = bilinear(&src, sy + c, sx + c);
        }
    }
    FourierEmbedding {
        planes: out,
        meta: e.meta.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(d: usize) -> EmbeddingMeta {
        EmbeddingMeta {
            source_shape: [d, d, d],
            lambda_um: 0.51,
            na: 1.0,
            support_radius_px: d as f64 / 2.0 - 1.0,
            n_peaks: 1,
            interference_removed: true,
        }
    }

    fn smooth_embedding(d: usize) -> FourierEmbedding {
        let c = (d / 2) as f64;
        let r = d as f64 / 2.0 - 1.0;
        let planes = Array3::from_shape_fn((6, d, d), |(p, y, x)| {
            let (dy, dx) = ((y as f64 - c) / r, (x as f64 - c) / r);
            if dy.hypot(dx) > 1.0 {
                0.0
            } else {
                (p as f64 + 1.0) * (dx * dx - 0.5 * dy * dy + 0.3 * dx * dy)
            }
        });
        FourierEmbedding { planes, meta: meta(d) }
    }

    #[test]
    fn rotation_by_zero_is_identity() {
        let e = smooth_embedding(32);
        assert_eq!(rotate_embedding(&e, 0.0).planes, e.planes);
    }

    #[test]
    fn two_half_turns_restore_the_planes() {
        let e = smooth_embedding(32);
        let r = rotate_embedding(&rotate_embedding(&e, std::f64::consts::PI), std::f64::consts::PI);
        let mad = (&r.planes - &e.planes).mapv(f64::abs).mean().unwrap();
        assert!(mad < 1e-6, "{mad}");
    }

    #[test]
    fn quarter_turn_is_counter_clockwise() {
        let d = 16;
        let mut planes = Array3::zeros((6, d, d));
        // A single bright pixel on the +x axis moves to +y.
        planes[[0, 8, 12]] = 1.0;
        let e = FourierEmbedding { planes, meta: meta(d) };
        let r = rotate_embedding(&e, std::f64::consts::FRAC_PI_2);
        assert!((r.planes[[0, 12, 8]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn container_roundtrip() {
        let e = smooth_embedding(16);
        let c = e.to_container();
        let back = FourierEmbedding::from_container(&Container::from_bytes(&c.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.meta, e.meta);
        let worst = (&back.planes - &e.planes.mapv(|v| v as f32 as f64)).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
        assert_eq!(worst, 0.0);
        let plain = Volume::<f64>::zeros([6, 16, 16], [1.0; 3]).to_container(Map::new());
        assert!(FourierEmbedding::from_container(&plain).is_err());
    }
}
