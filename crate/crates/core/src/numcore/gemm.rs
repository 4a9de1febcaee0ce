//! Thin safe wrapper over `matrixmultiply::dgemm`.

/// A strided read-only matrix view over a flat slice.
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatRef<'a> {
    /// Row-major `rows × cols` matrix with row stride `ld`, starting at `offset`.
    pub fn new(data: &'a [f64], offset: usize, rows: usize, cols: usize, ld: usize) -> Self {
        let data = &data[offset..];
        Self { data, rows, cols, rs: ld as isize, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn max_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        (self.rows - 1) * self.rs as usize + (self.cols - 1) * self.cs as usize
    }
}

/// `c = alpha * a @ b + beta * c`, where `c` is row-major with row stride `ldc`
/// starting at `offset`.
pub fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64], offset: usize, ldc: usize) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    let c = &mut c[offset..];
    assert!((m - 1) * ldc + n <= c.len(), "gemm output out of bounds");
    if k == 0 {
        for i in 0..m {
            for v in &mut c[i * ldc..i * ldc + n] {
                *v *= beta;
            }
        }
        return;
    }
    assert!(a.max_index() < a.data.len() && b.max_index() < b.data.len(), "gemm operand out of bounds");
    // SAFETY: every index touched by dgemm is bounded by the asserts above;
    // strides are non-negative and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(m, k, n, alpha, a.data.as_ptr(), a.rs, a.cs, b.data.as_ptr(), b.rs, b.cs, beta, c.as_mut_ptr(), ldc as isize, 1);
    }
}

/// Plain row-major product `[m,k] @ [k,n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(1.0, MatRef::new(a, 0, m, k, k), MatRef::new(b, 0, k, n, n), 0.0, &mut out, 0, n);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_product_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let c = matmul(&a, &b, 2, 3, 4);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert!((c[i * 4 + j] - want).abs() < 1e-14);
            }
        }
        // (Bᵀ Aᵀ) = (AB)ᵀ
        let mut ct = vec![0.0; 8];
        gemm(1.0, MatRef::new(&b, 0, 3, 4, 4).t(), MatRef::new(&a, 0, 2, 3, 3).t(), 0.0, &mut ct, 0, 2);
        for i in 0..2 {
            for j in 0..4 {
                assert!((ct[j * 2 + i] - c[i * 4 + j]).abs() < 1e-14);
            }
        }
    }
}
