//! FFT helpers over `ndarray` containers.
//!
//! Forward transforms are unnormalized; inverse transforms scale by `1/n`
//! per axis so that `ifft(fft(x)) == x`. "Centered" transforms place the
//! zero frequency (and the real-space origin) at index `n/2` of each axis.

use ndarray::{Array, Array2, Array3, Axis, Dimension};
use num_traits::Zero;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::Real;

/// In-place 1D transform of every lane along `axis`.
pub fn fft_axis<T: Real, D: Dimension>(a: &mut Array<Complex<T>, D>, axis: usize, inverse: bool) {
    let n = a.len_of(Axis(axis));
    if n <= 1 {
        return;
    }
    let mut planner = FftPlanner::<T>::new();
    let fft = if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    };
    let mut buf = vec![Complex::<T>::zero(); n];
    let mut scratch = vec![Complex::<T>::zero(); fft.get_inplace_scratch_len()];
    let scale = T::one() / T::of(n as f64);
    for mut lane in a.lanes_mut(Axis(axis)) {
        if let Some(s) = lane.as_slice_mut() {
            fft.process_with_scratch(s, &mut scratch);
            if inverse {
                s.iter_mut().for_each(|v| *v *= scale);
            }
            continue;
        }
        for (b, v) in buf.iter_mut().zip(lane.iter()) {
            *b = *v;
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (v, b) in lane.iter_mut().zip(buf.iter()) {
            *v = if inverse { *b * scale } else { *b };
        }
    }
}

/// Transform over all axes.
pub fn fftn<T: Real, D: Dimension>(a: &mut Array<Complex<T>, D>, inverse: bool) {
    for ax in 0..a.ndim() {
        fft_axis(a, ax, inverse);
    }
}

fn rolled_index(i: usize, n: usize, shift: usize) -> usize {
    (i + shift) % n
}

/// Circular shift moving index `i` to `(i + shift) mod n` on each axis.
pub fn roll3<X: Clone>(a: &Array3<X>, shift: [usize; 3]) -> Array3<X> {
    let (n0, n1, n2) = a.dim();
    let mut out = a.clone();
    for ((i, j, k), v) in a.indexed_iter() {
        out[[
            rolled_index(i, n0, shift[0]),
            rolled_index(j, n1, shift[1]),
            rolled_index(k, n2, shift[2]),
        ]] = v.clone();
    }
    out
}

pub fn roll2<X: Clone>(a: &Array2<X>, shift: [usize; 2]) -> Array2<X> {
    let (n0, n1) = a.dim();
    let mut out = a.clone();
    for ((i, j), v) in a.indexed_iter() {
        out[[rolled_index(i, n0, shift[0]), rolled_index(j, n1, shift[1])]] = v.clone();
    }
    out
}

/// Moves index 0 to the center (`n/2`).
pub fn fftshift3<X: Clone>(a: &Array3<X>) -> Array3<X> {
    let (n0, n1, n2) = a.dim();
    roll3(a, [n0 / 2, n1 / 2, n2 / 2])
}

/// Inverse of [`fftshift3`]: moves the center back to index 0.
pub fn ifftshift3<X: Clone>(a: &Array3<X>) -> Array3<X> {
    let (n0, n1, n2) = a.dim();
    roll3(a, [n0 - n0 / 2, n1 - n1 / 2, n2 - n2 / 2])
}

pub fn fftshift2<X: Clone>(a: &Array2<X>) -> Array2<X> {
    let (n0, n1) = a.dim();
    roll2(a, [n0 / 2, n1 / 2])
}

pub fn ifftshift2<X: Clone>(a: &Array2<X>) -> Array2<X> {
    let (n0, n1) = a.dim();
    roll2(a, [n0 - n0 / 2, n1 - n1 / 2])
}

/// Centered forward 3D transform of a real volume.
pub fn centered_fft3<T: Real>(v: &Array3<T>) -> Array3<Complex<T>> {
    let mut c = ifftshift3(&v.mapv(|x| Complex::new(x, T::zero())));
    fftn(&mut c, false);
    fftshift3(&c)
}

/// Centered inverse 3D transform; the caller takes the real part if needed.
pub fn centered_ifft3<T: Real>(spec: &Array3<Complex<T>>) -> Array3<Complex<T>> {
    let mut c = ifftshift3(spec);
    fftn(&mut c, true);
    fftshift3(&c)
}

/// Signed frequency index of centered sample `i` on an axis of length `n`.
#[inline]
pub fn centered_freq_index(i: usize, n: usize) -> f64 {
    i as f64 - (n / 2) as f64
}
