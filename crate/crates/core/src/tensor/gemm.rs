/// Row/column strides of a matrix view.
#[derive(Clone, Copy)]
pub(crate) struct Layout {
    pub rows: isize,
    pub cols: isize,
}

impl Layout {
    /// Row-major view of a matrix with `cols` columns.
    pub fn row_major(cols: usize) -> Self {
        Layout {
            rows: cols as isize,
            cols: 1,
        }
    }

    /// The transpose of a row-major matrix with `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        Layout {
            rows: 1,
            cols: cols as isize,
        }
    }
}

fn extent(rows: usize, cols: usize, l: Layout) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * l.rows as usize + (cols - 1) * l.cols as usize + 1
}

/// `c = a * b + beta * c` with `a: m x k`, `b: k x n`, `c: m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
    lc: Layout,
) {
    assert!(a.len() >= extent(m, k, la), "gemm: lhs too short");
    assert!(b.len() >= extent(k, n, lb), "gemm: rhs too short");
    assert!(c.len() >= extent(m, n, lc), "gemm: output too short");
    // SAFETY: the asserts above bound every index the kernel touches, and
    // `c` is a unique borrow that does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rows,
            la.cols,
            b.as_ptr(),
            lb.rows,
            lb.cols,
            beta,
            c.as_mut_ptr(),
            lc.rows,
            lc.cols,
        );
    }
}
