#![allow(dead_code)]

use aosense::embedding::{Embedder, EmbeddingConfig, FourierEmbedding};
use aosense::optics::{LightSheetKind, Microscope, OpticsConfig};
use aosense::synth::{render_field, PunctaField};
use aosense::{Vol, ZernikeCoeffs};
use aosense::corrloop::{tile_origins, TileEntry, TileFlag, TileMap};
use aosense::optics::otf;
use aosense::volume::Volume;
use ndarray::{Array2, Array3, ArrayView2, Axis};
use rustfft::num_complex::Complex64;

pub const SHEET: LightSheetKind = LightSheetKind::MBSq35;

/// Five beads in voxel coordinates `[z, y, x]`: one at the center and four
/// on a lateral cross 10 px out, staggered axially and off the grid.
pub const CROSS_LAYOUT: [[f64; 3]; 5] = [
    [32.0, 32.0, 32.0],
    [26.15, 22.16, 31.88],
    [38.3, 42.32, 31.76],
    [26.45, 32.48, 41.64],
    [38.6, 32.64, 21.52],
];

pub fn optics() -> OpticsConfig {
    OpticsConfig::default()
}

pub fn scope() -> Microscope {
    Microscope::new(&optics(), SHEET).unwrap()
}

pub fn embedder() -> Embedder {
    Embedder::new(&optics(), SHEET, &EmbeddingConfig::default()).unwrap()
}

pub fn to_um(o: &OpticsConfig, vox: &[[f64; 3]]) -> Vec<[f64; 3]> {
    vox.iter()
        .map(|p| [p[0] * o.voxel_um[0], p[1] * o.voxel_um[1], p[2] * o.voxel_um[2]])
        .collect()
}

/// Noise-free rendering of beads at voxel positions.
pub fn field(scope: &Microscope, vox: &[[f64; 3]], coeffs: &ZernikeCoeffs) -> Vol {
    beads(scope, vox, 0.1, coeffs)
}

pub fn beads(scope: &Microscope, vox: &[[f64; 3]], fwhm_um: f64, coeffs: &ZernikeCoeffs) -> Vol {
    let p = PunctaField {
        positions_um: to_um(&scope.cfg, vox),
        fwhms_um: vec![fwhm_um; vox.len()],
        photons: 1e4,
    };
    render_field(&p, scope, coeffs).unwrap()
}

/// A centered point emitter (no bead blur).
pub fn point(scope: &Microscope, coeffs: &ZernikeCoeffs) -> Vol {
    beads(scope, &[[32.0, 32.0, 32.0]], 0.0, coeffs)
}

pub fn single(scope: &Microscope, coeffs: &ZernikeCoeffs) -> Vol {
    field(scope, &[[32.0, 32.0, 32.0]], coeffs)
}

pub fn mixed() -> ZernikeCoeffs {
    let mut c = ZernikeCoeffs::zeros();
    c[3] = 0.05;
    c[6] = 0.04;
    c[12] = 0.03;
    c
}

pub fn plane(e: &FourierEmbedding, p: usize) -> ArrayView2<'_, f64> {
    e.planes.index_axis(Axis(0), p)
}

pub fn pearson(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.sum() / n, b.sum() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b.iter()) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

/// Mean `|a - b|` over the true entries of `mask`.
pub fn masked_mad(a: ArrayView2<f64>, b: ArrayView2<f64>, mask: &Array2<bool>) -> f64 {
    let (mut s, mut n) = (0.0, 0.0);
    for ((i, &x), &y) in a.indexed_iter().zip(b.iter()) {
        if mask[i] {
            s += (x - y).abs();
            n += 1.0;
        }
    }
    s / n
}

pub fn plane_correlations(a: &FourierEmbedding, b: &FourierEmbedding) -> Vec<f64> {
    (0..a.planes.dim().0).map(|p| pearson(plane(a, p), plane(b, p))).collect()
}

/// Orthonormal ANSI Zernike modes 0..=14 written out in Cartesian pupil
/// coordinates, independent of the radial-polynomial recursion.
pub fn zernike_table(j: usize, x: f64, y: f64) -> f64 {
    let r2 = x * x + y * y;
    let (s6, s8, s10) = (6f64.sqrt(), 8f64.sqrt(), 10f64.sqrt());
    match j {
        0 => 1.0,
        1 => 2.0 * y,
        2 => 2.0 * x,
        3 => s6 * 2.0 * x * y,
        4 => 3f64.sqrt() * (2.0 * r2 - 1.0),
        5 => s6 * (x * x - y * y),
        6 => s8 * (3.0 * x * x * y - y.powi(3)),
        7 => s8 * (3.0 * r2 - 2.0) * y,
        8 => s8 * (3.0 * r2 - 2.0) * x,
        9 => s8 * (x.powi(3) - 3.0 * x * y * y),
        10 => s10 * 4.0 * (x.powi(3) * y - x * y.powi(3)),
        11 => s10 * (4.0 * r2 - 3.0) * 2.0 * x * y,
        12 => 5f64.sqrt() * (6.0 * r2 * r2 - 6.0 * r2 + 1.0),
        13 => s10 * (4.0 * r2 - 3.0) * (x * x - y * y),
        14 => s10 * (x.powi(4) - 6.0 * x * x * y * y + y.powi(4)),
        _ => panic!("mode {j} is not tabulated"),
    }
}

/// Pixel-center pupil coordinates `(x, y)` inside the unit disk of a
/// `size x size` grid.
pub fn disk_points(size: usize) -> Vec<(f64, f64)> {
    let half = size as f64 / 2.0;
    let mut pts = Vec::new();
    for i in 0..size {
        for k in 0..size {
            let y = (i as f64 + 0.5 - half) / half;
            let x = (k as f64 + 0.5 - half) / half;
            if x * x + y * y <= 1.0 {
                pts.push((x, y));
            }
        }
    }
    pts
}

pub fn ideal_map(shape: [usize; 3], tile: [usize; 3]) -> TileMap {
    TileMap {
        shape,
        tile,
        stride: tile,
        voxel_um: optics().voxel_um,
        tiles: tile_origins(shape, tile, tile)
            .unwrap()
            .into_iter()
            .map(|origin| TileEntry {
                origin,
                coeffs: ZernikeCoeffs::zeros(),
                groups: Vec::new(),
                flag: TileFlag::IdealFallback,
            })
            .collect(),
    }
}

pub fn delta(shape: [usize; 3]) -> Vol {
    let mut d = Vol::zeros(shape, optics().voxel_um);
    d.data[[shape[0] / 2, shape[1] / 2, shape[2] / 2]] = 1.0;
    d
}


/// Naive 3D DFT, `sign` = -1 forward.
pub fn dft3(a: &Array3<Complex64>, sign: f64) -> Array3<Complex64> {
    let (nz, ny, nx) = a.dim();
    let tw = |k: usize, n: usize, len: usize| {
        let ph = sign * 2.0 * std::f64::consts::PI * ((k * n) % len) as f64 / len as f64;
        Complex64::new(ph.cos(), ph.sin())
    };
    let mut t = a.clone();
    for (axis, len) in [(0, nz), (1, ny), (2, nx)] {
        let src = t.clone();
        for ((z, y, x), v) in t.indexed_iter_mut() {
            let idx = [z, y, x];
            *v = (0..len)
                .map(|n| {
                    let mut j = idx;
                    j[axis] = n;
                    src[j] * tw(idx[axis], n, len)
                })
                .sum();
        }
    }
    t
}


/// Broad blobs on a pedestal, blurred by the ideal PSF.
pub fn smooth_phantom(shape: [usize; 3]) -> Vol {
    let o = optics().with_shape(shape);
    let centers = [[30.0, 40.0, 50.0], [20.0, 90.0, 70.0], [45.0, 60.0, 100.0], [32.0, 20.0, 110.0]];
    let data = Array3::from_shape_fn((shape[0], shape[1], shape[2]), |(z, y, x)| {
        let mut v = 50.0;
        for c in centers {
            let d2 = ((z as f64 - c[0]) * o.voxel_um[0]).powi(2)
                + ((y as f64 - c[1]) * o.voxel_um[1]).powi(2)
                + ((x as f64 - c[2]) * o.voxel_um[2]).powi(2);
            v += 1000.0 * (-d2 / (2.0 * 1.5f64.powi(2))).exp();
        }
        v
    });
    let scope = aosense::optics::Microscope::new(&o, SHEET).unwrap();
    let h = otf(&scope.ideal().unwrap()).unwrap();
    let mut spec = data.mapv(|v| Complex64::new(v, 0.0));
    aosense::fft::fftn(&mut spec, false);
    spec.zip_mut_with(&h, |s, h| *s *= h);
    aosense::fft::fftn(&mut spec, true);
    Volume::new(spec.mapv(|c| c.re), o.voxel_um)
}

