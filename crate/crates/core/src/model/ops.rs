//! Dense building blocks with hand-written backward passes. Activations are
//! row-major `(rows, features)` matrices; parameter gradients accumulate
//! into flat buffers.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};
use rayon::prelude::*;

use crate::scalar::Real;

pub(crate) const LN_EPS: f64 = 1e-6;

pub(crate) fn view2<'a, T>(data: &'a [T], shape: &[usize]) -> ArrayView2<'a, T> {
    ArrayView2::from_shape((shape[0], shape[1]), data).expect("matrix shape")
}

pub(crate) fn view1<T>(data: &[T]) -> ArrayView1<'_, T> {
    ArrayView1::from(data)
}

pub(crate) fn view2_mut<'a, T>(data: &'a mut [T], shape: &[usize]) -> ArrayViewMut2<'a, T> {
    ArrayViewMut2::from_shape((shape[0], shape[1]), data).expect("matrix shape")
}

/// Replaces subnormal values by zero. Subnormal operands slow the matrix
/// kernels by orders of magnitude once attention saturates.
pub(crate) fn flush<T: Real>(x: &mut Array2<T>) {
    let tiny = T::min_positive_value();
    x.mapv_inplace(|v| if v.abs() < tiny { T::zero() } else { v });
}

/// `y = x w + b`.
pub(crate) fn linear<T: Real>(x: &Array2<T>, w: ArrayView2<T>, b: ArrayView1<T>) -> Array2<T> {
    let mut y = x.dot(&w);
    y += &b;
    y
}

/// Accumulates `dW += xᵀ dy`, `db += Σ_rows dy` and returns `dx = dy wᵀ`.
pub(crate) fn linear_backward<T: Real>(
    x: &Array2<T>,
    w: ArrayView2<T>,
    dy: &Array2<T>,
    mut gw: ArrayViewMut2<T>,
    mut gb: ArrayViewMut1<T>,
) -> Array2<T> {
    general_mat_mul(T::one(), &x.t(), dy, T::one(), &mut gw);
    gb += &dy.sum_axis(Axis(0));
    dy.dot(&w.t())
}

pub(crate) struct NormCache<T> {
    pub xhat: Array2<T>,
    pub inv_std: Array1<T>,
}

/// Row-wise layer normalization `y = γ (x - μ) / σ + β`.
pub(crate) fn layer_norm<T: Real>(
    x: &Array2<T>,
    gamma: ArrayView1<T>,
    beta: ArrayView1<T>,
) -> (Array2<T>, NormCache<T>) {
    let n = T::of(x.ncols() as f64);
    let eps = T::of(LN_EPS);
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().fold(T::zero(), |a, &v| a + v * v) / n;
        let s = T::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| v * s);
        *is = s;
    }
    let mut y = &xhat * &gamma;
    y += &beta;
    (y, NormCache { xhat, inv_std })
}

pub(crate) fn layer_norm_backward<T: Real>(
    c: &NormCache<T>,
    gamma: ArrayView1<T>,
    dy: &Array2<T>,
    mut gg: ArrayViewMut1<T>,
    mut gb: ArrayViewMut1<T>,
) -> Array2<T> {
    gg += &(dy * &c.xhat).sum_axis(Axis(0));
    gb += &dy.sum_axis(Axis(0));
    let n = T::of(dy.ncols() as f64);
    let mut dx = dy * &gamma;
    for ((mut row, xh), &s) in dx.rows_mut().into_iter().zip(c.xhat.rows()).zip(c.inv_std.iter()) {
        let mean_d = row.sum() / n;
        let mean_dx = row.iter().zip(xh.iter()).fold(T::zero(), |a, (&d, &x)| a + d * x) / n;
        Zip::from(&mut row).and(&xh).for_each(|d, &x| {
            *d = s * (*d - mean_d - x * mean_dx);
        });
    }
    dx
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x);
    (y, dy)
}

/// GELU, tanh approximation.
pub(crate) fn gelu<T: Real>(x: &Array2<T>) -> Array2<T> {
    let mut y = x.mapv(|v| gelu_parts(v).0);
    flush(&mut y);
    y
}

pub(crate) fn gelu_backward<T: Real>(pre: &Array2<T>, dy: &Array2<T>) -> Array2<T> {
    let mut out = dy.clone();
    Zip::from(&mut out).and(pre).for_each(|d, &x| *d *= gelu_parts(x).1);
    flush(&mut out);
    out
}

fn softmax_rows<T: Real>(s: &mut Array2<T>) {
    for mut row in s.rows_mut() {
        let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    flush(s);
}

/// Multi-head scaled dot-product attention over groups of `tokens`
/// consecutive rows. Returns the concatenated head outputs and the
/// attention matrices, indexed `[group * heads + head]`.
pub(crate) fn attention<T: Real>(
    q: &Array2<T>,
    k: &Array2<T>,
    v: &Array2<T>,
    tokens: usize,
    heads: usize,
) -> (Array2<T>, Vec<Array2<T>>) {
    let groups = q.nrows() / tokens;
    let dh = q.ncols() / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let parts: Vec<(Array2<T>, Vec<Array2<T>>)> = (0..groups)
        .into_par_iter()
        .map(|g| {
            let rows = g * tokens..(g + 1) * tokens;
            let mut out = Array2::zeros((tokens, q.ncols()));
            let mut atts = Vec::with_capacity(heads);
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = q.slice(s![rows.clone(), cols.clone()]);
                let kh = k.slice(s![rows.clone(), cols.clone()]);
                let vh = v.slice(s![rows.clone(), cols.clone()]);
                let mut a = qh.dot(&kh.t());
                a.mapv_inplace(|x| x * scale);
                softmax_rows(&mut a);
                out.slice_mut(s![.., cols]).assign(&a.dot(&vh));
                atts.push(a);
            }
            (out, atts)
        })
        .collect();
    let mut o = Array2::zeros(q.raw_dim());
    let mut all = Vec::with_capacity(groups * heads);
    for (g, (out, atts)) in parts.into_iter().enumerate() {
        o.slice_mut(s![g * tokens..(g + 1) * tokens, ..]).assign(&out);
        all.extend(atts);
    }
    (o, all)
}

/// Gradients of [`attention`] with respect to `q`, `k` and `v`.
pub(crate) fn attention_backward<T: Real>(
    q: &Array2<T>,
    k: &Array2<T>,
    v: &Array2<T>,
    atts: &[Array2<T>],
    d_o: &Array2<T>,
    tokens: usize,
    heads: usize,
) -> (Array2<T>, Array2<T>, Array2<T>) {
    let groups = q.nrows() / tokens;
    let dh = q.ncols() / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let parts: Vec<[Array2<T>; 3]> = (0..groups)
        .into_par_iter()
        .map(|g| {
            let rows = g * tokens..(g + 1) * tokens;
            let mut dq = Array2::zeros((tokens, q.ncols()));
            let mut dk = Array2::zeros((tokens, q.ncols()));
            let mut dv = Array2::zeros((tokens, q.ncols()));
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let a = &atts[g * heads + h];
                let qh = q.slice(s![rows.clone(), cols.clone()]);
                let kh = k.slice(s![rows.clone(), cols.clone()]);
                let vh = v.slice(s![rows.clone(), cols.clone()]);
                let doh = d_o.slice(s![rows.clone(), cols.clone()]);
                dv.slice_mut(s![.., cols.clone()]).assign(&a.t().dot(&doh));
                let da = doh.dot(&vh.t());
                let mut ds = &da * a;
                for (mut row, arow) in ds.rows_mut().into_iter().zip(a.rows()) {
                    let dot = row.sum();
                    Zip::from(&mut row).and(&arow).for_each(|d, &p| *d -= p * dot);
                }
                ds.mapv_inplace(|x| x * scale);
                flush(&mut ds);
                dq.slice_mut(s![.., cols.clone()]).assign(&ds.dot(&kh));
                dk.slice_mut(s![.., cols]).assign(&ds.t().dot(&qh));
            }
            [dq, dk, dv]
        })
        .collect();
    let mut dq = Array2::zeros(q.raw_dim());
    let mut dk = Array2::zeros(q.raw_dim());
    let mut dv = Array2::zeros(q.raw_dim());
    for (g, [a, b, c]) in parts.into_iter().enumerate() {
        let r = s![g * tokens..(g + 1) * tokens, ..];
        dq.slice_mut(r).assign(&a);
        dk.slice_mut(r).assign(&b);
        dv.slice_mut(r).assign(&c);
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x: Array2<f64> = array![[1.0, 2.0, 3.0, 4.0], [-2.0, 0.0, 2.0, 10.0]];
        let g = Array1::ones(4);
        let b = Array1::zeros(4);
        let (y, _) = layer_norm(&x, g.view(), b.view());
        for row in y.rows() {
            assert!(row.sum().abs() < 1e-12);
            assert!((row.mapv(|v| v * v).sum() / 4.0 - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn gelu_matches_reference_points() {
        let x: Array2<f64> = array![[-3.0, -1.0, 0.0, 0.5, 2.0]];
        let y = gelu(&x);
        // Tanh-approximation values.
        let want = [-0.0036373920817729943, -0.15880800939172324, 0.0, 0.34571400982514394, 1.954597694087775];
        for (a, b) in y.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let q = Array2::from_shape_fn((6, 4), |(i, j)| ((i * 3 + j) as f64).sin());
        let k = Array2::from_shape_fn((6, 4), |(i, j)| ((i + 2 * j) as f64).cos());
        let v = Array2::from_shape_fn((6, 4), |(i, j)| (i * 4 + j) as f64);
        let (o, atts) = attention(&q, &k, &v, 3, 2);
        assert_eq!(atts.len(), 4);
        for a in &atts {
            for row in a.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
        // Group 0 only mixes rows 0..3 of v.
        assert!(o.slice(s![0..3, 0..2]).iter().all(|&x| (0.0..=9.0).contains(&x)));
    }
}
