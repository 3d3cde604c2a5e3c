use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, ShapeBuilder};

/// A strided 2-D view into a flat buffer: `(offset, row stride, col stride)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    pub fn row_major(cols: usize) -> Self {
        Self {
            offset: 0,
            rs: cols,
            cs: 1,
        }
    }

    /// The transpose of a row-major `rows × cols` buffer.
    pub fn transposed(cols: usize) -> Self {
        Self {
            offset: 0,
            rs: 1,
            cs: cols,
        }
    }

    pub fn at(self, offset: usize) -> Self {
        Self { offset, ..self }
    }

    fn span(self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return 0;
        }
        (rows - 1) * self.rs + (cols - 1) * self.cs + 1
    }
}

/// `c = alpha·a·b + beta·c` with `a: m×k`, `b: k×n`, `c: m×n` as strided views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    la: Layout,
    b: &[f32],
    lb: Layout,
    beta: f32,
    c: &mut [f32],
    lc: Layout,
) {
    if m == 0 || n == 0 {
        return;
    }
    let a = &a[la.offset..la.offset + la.span(m, k)];
    let b = &b[lb.offset..lb.offset + lb.span(k, n)];
    let c_len = lc.span(m, n);
    let c = &mut c[lc.offset..lc.offset + c_len];
    let av = ArrayView2::from_shape((m, k).strides((la.rs, la.cs)), a).expect("gemm: a view");
    let bv = ArrayView2::from_shape((k, n).strides((lb.rs, lb.cs)), b).expect("gemm: b view");
    let mut cv =
        ArrayViewMut2::from_shape((m, n).strides((lc.rs, lc.cs)), c).expect("gemm: c view");
    general_mat_mul(alpha, &av, &bv, beta, &mut cv);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strided_product_matches_naive() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f32> = (0..m * k).map(|i| i as f32 * 0.5 - 1.0).collect();
        let b: Vec<f32> = (0..n * k).map(|i| (i as f32).sin()).collect();
        // b stored as n×k, used transposed.
        let mut c = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            &a,
            Layout::row_major(k),
            &b,
            Layout::transposed(k),
            0.0,
            &mut c,
            Layout::row_major(n),
        );
        for i in 0..m {
            for j in 0..n {
                let want: f32 = (0..k).map(|p| a[i * k + p] * b[j * k + p]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-5);
            }
        }
    }
}
