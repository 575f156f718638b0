//! Bounds-checked wrapper over the `matrixmultiply` f64 kernel.

/// Read-only strided matrix view into a slice.
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a> MatRef<'a> {
    /// Row-major `rows x cols` matrix with row stride `ld`, starting at `offset`.
    pub fn new(data: &'a [f64], offset: usize, rows: usize, cols: usize, ld: usize) -> Self {
        Self::strided(&data[offset.min(data.len())..], rows, cols, ld, 1)
    }

    fn strided(data: &'a [f64], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        if rows > 0 && cols > 0 {
            let last = (rows - 1) * rs + (cols - 1) * cs;
            assert!(last < data.len(), "matrix view exceeds buffer");
        }
        Self {
            data,
            rows,
            cols,
            rs,
            cs,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

pub struct MatMut<'a> {
    data: &'a mut [f64],
    rows: usize,
    cols: usize,
    rs: usize,
}

impl<'a> MatMut<'a> {
    pub fn new(data: &'a mut [f64], offset: usize, rows: usize, cols: usize, ld: usize) -> Self {
        let len = data.len();
        let data = &mut data[offset.min(len)..];
        if rows > 0 && cols > 0 {
            assert!(
                (rows - 1) * ld + cols - 1 < data.len(),
                "matrix view exceeds buffer"
            );
        }
        Self {
            data,
            rows,
            cols,
            rs: ld,
        }
    }
}

/// `c = alpha * a * b + beta * c`.
pub fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: MatMut<'_>) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(b.rows, k, "inner dimensions differ");
    assert_eq!((c.rows, c.cols), (m, n), "output shape mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for x in &mut c.data[i * c.rs..i * c.rs + n] {
                *x *= beta;
            }
        }
        return;
    }
    // SAFETY: every view was bounds-checked on construction against its
    // extents and strides, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
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
            1,
        );
    }
}
