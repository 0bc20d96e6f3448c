//! Safe strided wrappers over `matrixmultiply`.

pub struct MatRef<'a, F> {
    pub data: &'a [F],
    pub rs: usize,
    pub cs: usize,
}

pub struct MatMut<'a, F> {
    pub data: &'a mut [F],
    pub rs: usize,
    pub cs: usize,
}

impl<'a, F> MatRef<'a, F> {
    /// Row-major view with `cols` columns.
    pub fn rows(data: &'a [F], cols: usize) -> Self {
        Self { data, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [F], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols }
    }
}

impl<'a, F> MatMut<'a, F> {
    pub fn rows(data: &'a mut [F], cols: usize) -> Self {
        Self { data, rs: cols, cs: 1 }
    }

    pub fn transposed(data: &'a mut [F], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols }
    }
}

fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! gemm_impl {
    ($name:ident, $t:ty, $kernel:path) => {
        #[allow(clippy::too_many_arguments)]
        pub fn $name(m: usize, k: usize, n: usize, alpha: $t, a: MatRef<'_, $t>, b: MatRef<'_, $t>, beta: $t, c: MatMut<'_, $t>) {
            assert!(span(m, k, a.rs, a.cs) <= a.data.len(), "gemm: lhs out of bounds");
            assert!(span(k, n, b.rs, b.cs) <= b.data.len(), "gemm: rhs out of bounds");
            assert!(span(m, n, c.rs, c.cs) <= c.data.len(), "gemm: output out of bounds");
            if m == 0 || n == 0 {
                return;
            }
            // SAFETY: the asserts above bound every index the kernel touches;
            // strides are non-negative and `c` is uniquely borrowed.
            unsafe {
                $kernel(
                    m,
                    k,
                    n,
                    alpha,
                    a.data.as_ptr(),
                    a.rs as isize,
                    a.cs as isize,
                    b.data.as_ptr(),
                    b.rs as isize,
                    b.cs as isize,
                    beta,
                    c.data.as_mut_ptr(),
                    c.rs as isize,
                    c.cs as isize,
                );
            }
        }
    };
}

gemm_impl!(sgemm, f32, matrixmultiply::sgemm);
gemm_impl!(dgemm, f64, matrixmultiply::dgemm);
