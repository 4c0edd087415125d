use super::Real;

/// Strided read-only matrix view over a flat buffer.
#[derive(Clone, Copy, Debug)]
pub struct MatView<'a, T> {
    data: &'a [T],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T> MatView<'a, T> {
    /// Row-major `rows × cols` view of the whole buffer.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix view size");
        Self {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    /// Columns `start..start + count`.
    pub fn cols_range(self, start: usize, count: usize) -> Self {
        assert!(start + count <= self.cols, "column range");
        Self {
            offset: self.offset + start * self.cs,
            cols: count,
            ..self
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// Strided mutable matrix view.
#[derive(Debug)]
pub struct MatViewMut<'a, T> {
    data: &'a mut [T],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T> MatViewMut<'a, T> {
    pub fn new(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix view size");
        Self {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    pub fn cols_range(self, start: usize, count: usize) -> Self {
        assert!(start + count <= self.cols, "column range");
        Self {
            offset: self.offset + start * self.cs,
            cols: count,
            ..self
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// `c ← alpha·a·b + beta·c`. With `beta == 0` the prior contents of `c`
/// are ignored.
pub fn gemm<T: Real>(alpha: T, a: MatView<'_, T>, b: MatView<'_, T>, beta: T, c: MatViewMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner extent");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    a.check();
    b.check();
    c.check();
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = c.offset + i * c.rs + j * c.cs;
                c.data[idx] = if beta == T::zero() {
                    T::zero()
                } else {
                    beta * c.data[idx]
                };
            }
        }
        return;
    }
    // SAFETY: all three views were bounds-checked above, the output view of
    // a row-major buffer with positive strides never aliases itself, and the
    // inputs are shared borrows distinct from the exclusive output borrow.
    unsafe {
        T::raw_gemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}
