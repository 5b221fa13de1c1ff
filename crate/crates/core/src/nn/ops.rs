use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;

pub const LN_EPS: f64 = 1e-5;

/// `x · w + b`.
pub fn linear(x: &ArrayView2<f64>, w: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Array2<f64> {
    let mut y = x.dot(w);
    y += b;
    y
}

/// Accumulates weight and bias gradients and returns `∂L/∂x`.
pub fn linear_backward(
    x: &ArrayView2<f64>,
    w: &ArrayView2<f64>,
    dy: &ArrayView2<f64>,
    mut dw: ArrayViewMut2<f64>,
    mut db: ArrayViewMut1<f64>,
) -> Array2<f64> {
    dw += &x.t().dot(dy);
    db += &dy.sum_axis(Axis(0));
    dy.dot(&w.t())
}

pub struct LayerNormCache {
    pub xhat: Array2<f64>,
    pub rstd: Array1<f64>,
}

pub fn layer_norm(
    x: &Array2<f64>,
    gamma: &ArrayView1<f64>,
    beta: &ArrayView1<f64>,
) -> (Array2<f64>, LayerNormCache) {
    let n = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / n;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / n;
        *r = 1.0 / (var + LN_EPS).sqrt();
        row *= *r;
    }
    let mut y = &xhat * gamma;
    y += beta;
    (y, LayerNormCache { xhat, rstd })
}

pub fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LayerNormCache,
    gamma: &ArrayView1<f64>,
    mut dgamma: ArrayViewMut1<f64>,
    mut dbeta: ArrayViewMut1<f64>,
) -> Array2<f64> {
    dgamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    dbeta += &dy.sum_axis(Axis(0));
    let n = dy.ncols() as f64;
    let mut dx = dy * gamma;
    for ((mut row, xh), r) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.rstd.iter())
    {
        let sum = row.sum();
        let dot = row.dot(&xh);
        for (d, x) in row.iter_mut().zip(xh.iter()) {
            *d = r / n * (n * *d - sum - x * dot);
        }
    }
    dx
}

pub fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// `∂L/∂s` for `p = softmax(s)` given `∂L/∂p`.
pub fn softmax_backward(p: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let mut ds = p * dp;
    for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
        let s = row.sum();
        row.zip_mut_with(&prow, |d, &pv| *d -= pv * s);
    }
    ds
}

/// Inverted dropout mask: entries are 0 or `1/(1-p)`.
pub fn dropout_mask<R: Rng + ?Sized>(rows: usize, cols: usize, p: f64, rng: &mut R) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_fn(
        (rows, cols),
        |_| if rng.gen::<f64>() < p { 0.0 } else { keep },
    )
}

/// Sinusoidal position encoding for position `pos`.
pub fn position_encoding(pos: usize, d: usize) -> Array1<f64> {
    Array1::from_shape_fn(d, |i| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

pub fn log_softmax(z: &ArrayView1<f64>) -> Array1<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.mapv(|v| v - lse)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of a logit against a 0/1 target, computed stably.
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut s = array![[1.0, 2.0, 3.0], [-50.0, 0.0, 50.0]];
        softmax_rows(&mut s);
        for row in s.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let x = array![[0.3, -1.2, 2.0, 0.7], [1.0, 1.5, -0.5, 0.0]];
        let g = array![1.1, 0.9, 1.3, 0.7];
        let b = array![0.1, -0.2, 0.0, 0.3];
        let w = array![[0.2, -0.4, 1.0, 0.5], [-1.0, 0.3, 0.8, -0.6]];
        let loss = |x: &Array2<f64>| (layer_norm(x, &g.view(), &b.view()).0 * &w).sum();
        let (_, cache) = layer_norm(&x, &g.view(), &b.view());
        let mut dg = Array1::zeros(4);
        let mut db = Array1::zeros(4);
        let dx = layer_norm_backward(&w, &cache, &g.view(), dg.view_mut(), db.view_mut());
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..4 {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let num = (loss(&xp) - loss(&xm)) / (2.0 * h);
                assert!((num - dx[[i, j]]).abs() < 1e-7, "{num} vs {}", dx[[i, j]]);
            }
        }
    }

    #[test]
    fn bce_matches_naive_formula() {
        for &(z, y) in &[(0.3f64, 1.0), (-2.0, 0.0), (4.0, 0.0), (-1.0, 1.0)] {
            let p: f64 = 1.0 / (1.0 + (-z).exp());
            let naive = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            assert!((bce_with_logit(z, y) - naive).abs() < 1e-12);
        }
    }
}
