//! Forward kernels shared by the graph and its tests.

use super::{Scalar, Tensor};

/// Strided 2-D window into a flat buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub off: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn dense(rows: usize, cols: usize) -> View {
        View { off: 0, rows, cols, rs: cols, cs: 1 }
    }

    /// Rows `r0..r0+rows` and columns `c0..c0+cols` of a dense `_ × stride` matrix.
    pub fn block(stride: usize, r0: usize, rows: usize, c0: usize, cols: usize) -> View {
        View { off: r0 * stride + c0, rows, cols, rs: stride, cs: 1 }
    }

    pub fn t(self) -> View {
        View { off: self.off, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn end(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            self.off
        } else {
            self.off + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

/// `c = alpha * a·b + beta * c` over strided views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(alpha: T, a: &[T], va: View, b: &[T], vb: View, beta: T, c: &mut [T], vc: View) {
    assert_eq!(va.cols, vb.rows, "inner dimensions");
    assert_eq!((vc.rows, vc.cols), (va.rows, vb.cols), "output dimensions");
    assert!(va.end() <= a.len() && vb.end() <= b.len() && vc.end() <= c.len(), "view out of bounds");
    if vc.rows == 0 || vc.cols == 0 {
        return;
    }
    if va.cols == 0 {
        for r in 0..vc.rows {
            for col in 0..vc.cols {
                let k = vc.off + r * vc.rs + col * vc.cs;
                c[k] = if beta == T::zero() { T::zero() } else { beta * c[k] };
            }
        }
        return;
    }
    // SAFETY: the asserts above bound every index reachable through the views.
    unsafe {
        T::gemm(
            va.rows,
            va.cols,
            vb.cols,
            alpha,
            a.as_ptr().add(va.off),
            va.rs as isize,
            va.cs as isize,
            b.as_ptr().add(vb.off),
            vb.rs as isize,
            vb.cs as isize,
            beta,
            c.as_mut_ptr().add(vc.off),
            vc.rs as isize,
            vc.cs as isize,
        )
    }
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(a.rows, b.cols);
    gemm(
        T::one(),
        &a.data,
        View::dense(a.rows, a.cols),
        &b.data,
        View::dense(b.rows, b.cols),
        T::zero(),
        &mut out.data,
        View::dense(a.rows, b.cols),
    );
    out
}

/// In-place softmax of each row with row-max subtraction.
pub fn softmax_rows<T: Scalar>(x: &mut [T], cols: usize) {
    if cols == 0 {
        return;
    }
    for row in x.chunks_mut(cols) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        let inv = T::one() / s;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Row-wise normalization to zero mean and unit variance (population
/// variance, `eps` added before the square root). Returns `(xhat, rstd)`.
pub fn normalize_rows<T: Scalar>(x: &Tensor<T>, eps: f64) -> (Tensor<T>, Vec<T>) {
    let c = x.cols;
    let mut out = Tensor::zeros(x.rows, c);
    let mut rstd = Vec::with_capacity(x.rows);
    let inv_c = T::one() / T::of(c as f64);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() * inv_c;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
        let rs = T::one() / (var + T::of(eps)).sqrt();
        for (o, &v) in out.data[r * c..(r + 1) * c].iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
        rstd.push(rs);
    }
    (out, rstd)
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh approximation of GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let k = T::of(GELU_K);
    let a = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (k * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::of(GELU_K);
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let u = k * (x + a * x * x * x);
    let t = u.tanh();
    let du = k * (T::one() + T::of(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Probabilities entering the cross entropy are clamped to `[SIGMA_CLAMP, 1 − SIGMA_CLAMP]`.
pub const SIGMA_CLAMP: f64 = 1e-7;

/// `−(y ln p + (1 − y) ln(1 − p))` with `p` clamped.
pub fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(SIGMA_CLAMP, 1.0 - SIGMA_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = matmul::<f64>(&a, &b);
        assert_eq!(c.data, vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transposed_and_strided_views() {
        // a is 2x3; compute a · aᵀ through a transposed view
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut c = [0.0; 4];
        let va = View::dense(2, 3);
        gemm(1.0, &a, va, &a, va.t(), 0.0, &mut c, View::dense(2, 2));
        assert_eq!(c, [14.0, 32.0, 32.0, 77.0]);
        // column block [:, 1..3] times its transpose
        let vb = View::block(3, 0, 2, 1, 2);
        gemm(1.0, &a, vb, &a, vb.t(), 0.0, &mut c, View::dense(2, 2));
        assert_eq!(c, [13.0, 28.0, 28.0, 61.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut x: Vec<f64> = (0..60).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        x[3] = 800.0;
        softmax_rows(&mut x, 12);
        for row in x.chunks(12) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalized_rows_have_zero_mean_unit_variance() {
        let x = Tensor::from_vec(3, 5, (0..15).map(|i| (i as f64 * 1.7).sin() * 3.0 + i as f64).collect()).unwrap();
        let (y, _) = normalize_rows(&x, 0.0);
        for r in 0..3 {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 5.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 5.0;
            assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn gelu_derivative_matches_differences() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((num - gelu_grad(x)).abs() < 1e-8);
        }
        assert!(sigmoid(-800.0f64).is_finite() && sigmoid(800.0f64) == 1.0);
    }
}
