//! Quality-guided 2D phase unwrapping.
//!
//! Pixels are visited in order of decreasing quality, each unwrapped
//! against the already-unwrapped neighbor it was reached from. Every
//! connected region of the mask starts at its highest-quality pixel. Ties
//! are broken by linear index so the result is deterministic.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::{PI, TAU};

use ndarray::Array2;

/// Wraps an angle into `(-π, π]`.
pub fn wrap(a: f64) -> f64 {
    let w = a - TAU * ((a + PI) / TAU).floor();
    if w <= -PI {
        w + TAU
    } else {
        w
    }
}

#[derive(PartialEq)]
struct Entry {
    quality: f64,
    index: usize,
    from: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.quality
            .total_cmp(&other.quality)
            .then_with(|| other.index.cmp(&self.index))
            .then_with(|| other.from.cmp(&self.from))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Unwraps `wrapped` inside `mask`; pixels outside the mask are 0.
pub fn unwrap_quality_guided(wrapped: &Array2<f64>, quality: &Array2<f64>, mask: &Array2<bool>) -> Array2<f64> {
    let (ny, nx) = wrapped.dim();
    let n = ny * nx;
    let w: Vec<f64> = wrapped.iter().copied().collect();
    let q: Vec<f64> = quality.iter().copied().collect();
    let m: Vec<bool> = mask.iter().copied().collect();
    let mut out = vec![0.0; n];
    let mut done = vec![false; n];

    let mut order: Vec<usize> = (0..n).filter(|&i| m[i]).collect();
    order.sort_by(|&a, &b| q[b].total_cmp(&q[a]).then(a.cmp(&b)));

    let neighbors = |i: usize| {
        let (y, x) = (i / nx, i % nx);
        let mut v = [usize::MAX; 4];
        if y > 0 {
            v[0] = i - nx;
        }
        if y + 1 < ny {
            v[1] = i + nx;
        }
        if x > 0 {
            v[2] = i - 1;
        }
        if x + 1 < nx {
            v[3] = i + 1;
        }
        v
    };

    let mut heap = BinaryHeap::new();
    for seed in order {
        if done[seed] {
            continue;
        }
        done[seed] = true;
        out[seed] = w[seed];
        for nb in neighbors(seed) {
            if nb != usize::MAX && m[nb] && !done[nb] {
                heap.push(Entry {
                    quality: q[nb],
                    index: nb,
                    from: seed,
                });
            }
        }
        while let Some(Entry { index, from, .. }) = heap.pop() {
            if done[index] {
                continue;
            }
            done[index] = true;
            out[index] = out[from] + wrap(w[index] - w[from]);
            for nb in neighbors(index) {
                if nb != usize::MAX && m[nb] && !done[nb] {
                    heap.push(Entry {
                        quality: q[nb],
                        index: nb,
                        from: index,
                    });
                }
            }
        }
    }
    Array2::from_shape_vec((ny, nx), out).expect("shape preserved")
}
