//! Matrix kernels and the chunked execution they share.
//!
//! Work is always split into the same fixed-size chunks, whether the chunks
//! then run on the rayon pool or in a plain loop. Each output element is
//! produced by exactly one chunk with a fixed reduction order, so results are
//! bit-identical across thread counts and across the `parallel` feature.

use crate::float::Float;

/// Rows per gemm task.
pub const ROW_BLOCK: usize = 64;

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
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

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// `c <- alpha * a b + beta * c`, where `c` is row-major with row stride `rsc`.
pub fn gemm<T: Float>(
    alpha: T,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    beta: T,
    c: &mut [T],
    c_offset: usize,
    rsc: usize,
) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    a.check();
    b.check();
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(c_offset + (m - 1) * rsc + n <= c.len(), "gemm output out of bounds");
    if k == 0 {
        for r in 0..m {
            for v in &mut c[c_offset + r * rsc..c_offset + r * rsc + n] {
                *v = if beta == T::zero() { T::zero() } else { *v * beta };
            }
        }
        return;
    }
    // SAFETY: bounds of all three views were checked above and `c` is an
    // exclusive borrow, so it cannot alias `a` or `b`.
    unsafe {
        T::gemm(
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
            c.as_mut_ptr().add(c_offset),
            rsc as isize,
            1,
        );
    }
}

/// Row-blocked `c = a b` for a row-major `a` (`m x k`) and arbitrary `b`.
/// `c` must be a contiguous `m x n` buffer.
pub fn gemm_rows<T: Float>(a: &[T], m: usize, k: usize, b: MatRef<'_, T>, c: &mut [T]) {
    let n = b.cols;
    assert_eq!(b.rows, k);
    assert_eq!(a.len(), m * k);
    assert_eq!(c.len(), m * n);
    if n == 0 || m == 0 {
        return;
    }
    for_each_chunk(c, ROW_BLOCK * n, |block, out| {
        let r0 = block * ROW_BLOCK;
        let rows = out.len() / n;
        let a_view = MatRef {
            data: a,
            offset: r0 * k,
            rows,
            cols: k,
            rs: k,
            cs: 1,
        };
        gemm(T::one(), a_view, b, T::zero(), out, 0, n);
    });
}

/// Runs `f(chunk_index, chunk)` over fixed-size chunks of `data`.
pub fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Like [`for_each_chunk`] over three buffers split in lockstep.
pub fn for_each_chunk3<T, F>(
    a: &mut [T],
    ca: usize,
    b: &mut [T],
    cb: usize,
    c: &mut [T],
    cc: usize,
    f: F,
) where
    T: Send,
    F: Fn(usize, &mut [T], &mut [T], &mut [T]) + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        a.par_chunks_mut(ca.max(1))
            .zip(b.par_chunks_mut(cb.max(1)))
            .zip(c.par_chunks_mut(cc.max(1)))
            .enumerate()
            .for_each(|(i, ((x, y), z))| f(i, x, y, z));
    }
    #[cfg(not(feature = "parallel"))]
    {
        a.chunks_mut(ca.max(1))
            .zip(b.chunks_mut(cb.max(1)))
            .zip(c.chunks_mut(cc.max(1)))
            .enumerate()
            .for_each(|(i, ((x, y), z))| f(i, x, y, z));
    }
}

/// Like [`for_each_chunk`] over two buffers split in lockstep.
pub fn for_each_chunk2<T, F>(a: &mut [T], ca: usize, b: &mut [T], cb: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T], &mut [T]) + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        a.par_chunks_mut(ca.max(1))
            .zip(b.par_chunks_mut(cb.max(1)))
            .enumerate()
            .for_each(|(i, (x, y))| f(i, x, y));
    }
    #[cfg(not(feature = "parallel"))]
    {
        a.chunks_mut(ca.max(1))
            .zip(b.chunks_mut(cb.max(1)))
            .enumerate()
            .for_each(|(i, (x, y))| f(i, x, y));
    }
}
