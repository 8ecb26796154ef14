//! Functional (untimed) model of the blocked matrix multiplication.
//!
//! `A` (M×K) is cut into row blocks of height `S_i` and `B` (K×N) into column
//! blocks of width `S_j`. Each output tile `C[i][j]` is produced by `K`
//! rank-one updates: column `k` of the A block times row `k` of the B block.
//! Ragged edges are zero-padded on read; nothing is copied.

use rand::Rng;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(invalid(format!(
                "matrix dims must be >= 1, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, vec![T::zero(); rows * cols])
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::from_fn(n, n, |r, c| if r == c { T::one() } else { T::zero() })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::new(rows, cols, data)
    }

    /// Uniform values in `[-1, 1)`.
    pub fn random<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Result<Self> {
        Self::from_fn(rows, cols, |_, _| T::from_f64(rng.gen_range(-1.0..1.0)))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    /// Zero for coordinates outside the matrix.
    #[inline]
    pub fn get_or_zero(&self, r: usize, c: usize) -> T {
        if r < self.rows && c < self.cols {
            self.data[r * self.cols + c]
        } else {
            T::zero()
        }
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                data.push(self.get(r, c));
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Largest per-element relative error of `self` against `reference`.
    ///
    /// Elements that compare equal contribute zero; otherwise the error is
    /// scaled by `max(|reference|, 1e-30)`.
    pub fn max_rel_error(&self, reference: &Matrix<T>) -> Result<f64> {
        if self.rows != reference.rows || self.cols != reference.cols {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, reference.rows, reference.cols
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&reference.data)
            .map(|(&x, &y)| {
                if x == y {
                    0.0
                } else {
                    let (x, y) = (x.as_f64(), y.as_f64());
                    (x - y).abs() / y.abs().max(1e-30)
                }
            })
            .fold(0.0, f64::max))
    }
}

/// Transposes `A` so that its columns become unit-stride rows in memory.
pub fn transpose_a<T: Scalar>(a: &Matrix<T>) -> Matrix<T> {
    a.transpose()
}

/// Brute-force GEMM, accumulating each dot product in ascending `k` order.
pub fn reference_gemm<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::DimensionMismatch(format!(
            "A is {}x{}, B is {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut c = vec![T::zero(); m * n];
    // i-k-j order: each output element still accumulates in ascending k.
    for (i, row) in c.chunks_exact_mut(n).enumerate() {
        for kk in 0..k {
            let aik = a.data[i * k + kk];
            for (cj, &bkj) in row.iter_mut().zip(&b.data[kk * n..(kk + 1) * n]) {
                *cj = *cj + aik * bkj;
            }
        }
    }
    Matrix::new(m, n, c)
}

/// Same as [`reference_gemm`] but accumulated in `f64`, returned in `f64`.
pub fn reference_gemm_f64<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<f64>> {
    reference_gemm(&a.cast::<f64>(), &b.cast::<f64>())
}

/// Tile decomposition of an `M×N` output with inner dimension `K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TileGrid {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub s_i: usize,
    pub s_j: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub padded_m: usize,
    pub padded_n: usize,
}

impl TileGrid {
    pub fn tiles(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    /// Tile coordinates in row-major order.
    pub fn coords(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.grid_rows).flat_map(move |i| (0..self.grid_cols).map(move |j| (i, j)))
    }
}

pub fn partition(m: usize, n: usize, k: usize, s_i: usize, s_j: usize) -> Result<TileGrid> {
    if m == 0 || n == 0 || k == 0 || s_i == 0 || s_j == 0 {
        return Err(invalid(format!(
            "partition needs positive sizes, got M={m} N={n} K={k} S_i={s_i} S_j={s_j}"
        )));
    }
    let grid_rows = m.div_ceil(s_i);
    let grid_cols = n.div_ceil(s_j);
    Ok(TileGrid {
        m,
        n,
        k,
        s_i,
        s_j,
        grid_rows,
        grid_cols,
        padded_m: grid_rows * s_i,
        padded_n: grid_cols * s_j,
    })
}

/// One `(i, j)` sub-block product, viewing the transposed `A` and `B`.
///
/// `a_t` is `A` transposed (K×M), so column `k` of the A block is a slice of
/// row `k` of `a_t`. Reads past the real matrix edge return zero.
#[derive(Debug, Clone, Copy)]
pub struct Tile<'a, T> {
    pub i: usize,
    pub j: usize,
    pub s_i: usize,
    pub s_j: usize,
    a_t: &'a Matrix<T>,
    b: &'a Matrix<T>,
}

impl<'a, T: Scalar> Tile<'a, T> {
    pub fn new(
        grid: &TileGrid,
        i: usize,
        j: usize,
        a_t: &'a Matrix<T>,
        b: &'a Matrix<T>,
    ) -> Result<Self> {
        if i >= grid.grid_rows || j >= grid.grid_cols {
            return Err(invalid(format!(
                "tile ({i},{j}) outside {}x{} grid",
                grid.grid_rows, grid.grid_cols
            )));
        }
        if a_t.rows != grid.k || b.rows != grid.k || a_t.cols != grid.m || b.cols != grid.n {
            return Err(Error::DimensionMismatch(format!(
                "grid is M={} N={} K={}, A^T is {}x{}, B is {}x{}",
                grid.m, grid.n, grid.k, a_t.rows, a_t.cols, b.rows, b.cols
            )));
        }
        Ok(Self {
            i,
            j,
            s_i: grid.s_i,
            s_j: grid.s_j,
            a_t,
            b,
        })
    }

    pub fn k(&self) -> usize {
        self.a_t.rows
    }

    /// Element `r` of column `k` of the A block.
    #[inline]
    pub fn sa(&self, r: usize, k: usize) -> T {
        self.a_t.get_or_zero(k, self.i * self.s_i + r)
    }

    /// Element `c` of row `k` of the B block.
    #[inline]
    pub fn sb(&self, k: usize, c: usize) -> T {
        self.b.get_or_zero(k, self.j * self.s_j + c)
    }
}

/// Accumulates `K` outer products into an `S_i×S_j` tile, `k` ascending.
pub fn tile_outer_accumulate<T: Scalar>(tile: &Tile<'_, T>) -> Matrix<T> {
    let (si, sj) = (tile.s_i, tile.s_j);
    let mut acc = vec![T::zero(); si * sj];
    let mut u = vec![T::zero(); si];
    let mut v = vec![T::zero(); sj];
    for k in 0..tile.k() {
        for (r, x) in u.iter_mut().enumerate() {
            *x = tile.sa(r, k);
        }
        for (c, x) in v.iter_mut().enumerate() {
            *x = tile.sb(k, c);
        }
        for r in 0..si {
            let row = &mut acc[r * sj..(r + 1) * sj];
            for (out, &b) in row.iter_mut().zip(&v) {
                *out = *out + u[r] * b;
            }
        }
    }
    Matrix {
        rows: si,
        cols: sj,
        data: acc,
    }
}

/// Writes the in-range part of a tile result into `c`, dropping padding.
pub fn scatter_tile<T: Scalar>(
    c: &mut Matrix<T>,
    grid: &TileGrid,
    i: usize,
    j: usize,
    tile: &Matrix<T>,
) {
    let row0 = i * grid.s_i;
    let col0 = j * grid.s_j;
    for r in 0..grid.s_i.min(c.rows.saturating_sub(row0)) {
        for q in 0..grid.s_j.min(c.cols.saturating_sub(col0)) {
            c.set(row0 + r, col0 + q, tile.get(r, q));
        }
    }
}

/// Full blocked GEMM: every tile through [`tile_outer_accumulate`], cropped.
pub fn blocked_gemm<T: Scalar>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    s_i: usize,
    s_j: usize,
) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::DimensionMismatch(format!(
            "A is {}x{}, B is {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let grid = partition(a.rows, b.cols, a.cols, s_i, s_j)?;
    let a_t = transpose_a(a);
    let mut c = Matrix::zeros(a.rows, b.cols)?;
    for (i, j) in grid.coords() {
        let tile = Tile::new(&grid, i, j, &a_t, b)?;
        scatter_tile(&mut c, &grid, i, j, &tile_outer_accumulate(&tile));
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m32(rows: usize, cols: usize, v: &[f32]) -> Matrix<f32> {
        Matrix::new(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn partition_conv1_shape() {
        let g = partition(96, 3025, 363, 128, 128).unwrap();
        assert_eq!((g.grid_rows, g.grid_cols), (1, 24));
        assert_eq!((g.padded_m, g.padded_n), (128, 3072));
    }

    #[test]
    fn partition_exact_and_ragged() {
        let g = partition(128, 128, 128, 128, 128).unwrap();
        assert_eq!(
            (g.grid_rows, g.grid_cols, g.padded_m, g.padded_n),
            (1, 1, 128, 128)
        );
        let g = partition(130, 100, 50, 64, 64).unwrap();
        assert_eq!(
            (g.grid_rows, g.grid_cols, g.padded_m, g.padded_n),
            (3, 2, 192, 128)
        );
    }

    #[test]
    fn partition_rejects_zero() {
        assert!(matches!(
            partition(0, 4, 4, 2, 2),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            partition(4, 4, 4, 2, 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn matrix_rejects_bad_shape() {
        assert!(Matrix::<f32>::new(0, 3, vec![]).is_err());
        assert!(Matrix::<f32>::new(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn transpose_small() {
        let x = m32(1, 1, &[7.0]);
        assert_eq!(transpose_a(&x), x);
        let a = m32(2, 3, &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(transpose_a(&a), m32(3, 2, &[1., 4., 2., 5., 3., 6.]));
    }

    #[test]
    fn transpose_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Matrix::<f32>::random(64, 48, &mut rng).unwrap();
        assert_eq!(transpose_a(&transpose_a(&a)), a);
    }

    #[test]
    fn reference_gemm_hand_values() {
        let a = m32(2, 2, &[1., 2., 3., 4.]);
        let b = m32(2, 2, &[5., 6., 7., 8.]);
        assert_eq!(
            reference_gemm(&a, &b).unwrap(),
            m32(2, 2, &[19., 22., 43., 50.])
        );
    }

    #[test]
    fn reference_gemm_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = Matrix::<f32>::random(4, 5, &mut rng).unwrap();
        assert_eq!(
            reference_gemm(&Matrix::identity(4).unwrap(), &b).unwrap(),
            b
        );
        let z = reference_gemm(&Matrix::zeros(3, 4).unwrap(), &b).unwrap();
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reference_gemm_mismatch() {
        let a = Matrix::<f32>::zeros(2, 3).unwrap();
        assert!(matches!(
            reference_gemm(&a, &a),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn outer_product_k1() {
        // u = [1,2] as the single column of A, v = [3,4] as the single row of B.
        let a = m32(2, 1, &[1., 2.]);
        let b = m32(1, 2, &[3., 4.]);
        let grid = partition(2, 2, 1, 2, 2).unwrap();
        let a_t = transpose_a(&a);
        let t = Tile::new(&grid, 0, 0, &a_t, &b).unwrap();
        assert_eq!(tile_outer_accumulate(&t), m32(2, 2, &[3., 4., 6., 8.]));
    }

    #[test]
    fn zero_a_block_gives_zero_tile() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Matrix::<f32>::zeros(8, 16).unwrap();
        let b = Matrix::<f32>::random(16, 8, &mut rng).unwrap();
        let grid = partition(8, 8, 16, 8, 8).unwrap();
        let a_t = transpose_a(&a);
        let t = tile_outer_accumulate(&Tile::new(&grid, 0, 0, &a_t, &b).unwrap());
        assert!(t.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tile_matches_reference_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Matrix::<f32>::random(16, 16, &mut rng).unwrap();
        let b = Matrix::<f32>::random(16, 24, &mut rng).unwrap();
        let c = reference_gemm(&a, &b).unwrap();
        let grid = partition(16, 24, 16, 8, 8).unwrap();
        let a_t = transpose_a(&a);
        let t = tile_outer_accumulate(&Tile::new(&grid, 1, 2, &a_t, &b).unwrap());
        for r in 0..8 {
            for q in 0..8 {
                let want = c.get(8 + r, 16 + q);
                assert!((t.get(r, q) - want).abs() <= 1e-5 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn tile_out_of_grid() {
        let a = Matrix::<f32>::zeros(4, 4).unwrap();
        let grid = partition(4, 4, 4, 2, 2).unwrap();
        assert!(Tile::new(&grid, 2, 0, &a, &a).is_err());
    }

    #[test]
    fn f64_oracle_close_to_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Matrix::<f32>::random(20, 30, &mut rng).unwrap();
        let b = Matrix::<f32>::random(30, 10, &mut rng).unwrap();
        let c32 = reference_gemm(&a, &b).unwrap().cast::<f64>();
        let c64 = reference_gemm_f64(&a, &b).unwrap();
        for (x, y) in c32.as_slice().iter().zip(c64.as_slice()) {
            assert!((x - y).abs() < 1e-4);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn blocked_equals_reference(
            m in 1usize..=96, n in 1usize..=96, k in 1usize..=64,
            s_i in 1usize..=40, s_j in 1usize..=40, seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Matrix::<f32>::random(m, k, &mut rng).unwrap();
            let b = Matrix::<f32>::random(k, n, &mut rng).unwrap();
            let blocked = blocked_gemm(&a, &b, s_i, s_j).unwrap();
            let reference = reference_gemm(&a, &b).unwrap();
            prop_assert!(blocked.max_rel_error(&reference).unwrap() <= 1e-4);
        }

        #[test]
        fn padding_is_neutral(m in 1usize..=20, n in 1usize..=20, k in 1usize..=12, seed in any::<u64>()) {
            // The same product computed with and without ragged padding.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Matrix::<f32>::random(m, k, &mut rng).unwrap();
            let b = Matrix::<f32>::random(k, n, &mut rng).unwrap();
            let exact_fit = blocked_gemm(&a, &b, m, n).unwrap();
            let padded = blocked_gemm(&a, &b, m + 7, n + 3).unwrap();
            prop_assert_eq!(exact_fit, padded);
        }
    }
}
