//! Spatial grids and truncated spatial basis matrices.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::Real;

/// Largest truncation used when none is configured.
pub const DEFAULT_TRUNCATION: usize = 2000;

/// Default truncation `min(2000, I)`.
pub fn default_truncation(n_sites: usize) -> usize {
    DEFAULT_TRUNCATION.min(n_sites)
}

/// Axis-aligned rectangle `[x0, x1] × [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Domain<T> {
    pub x0: T,
    pub x1: T,
    pub y0: T,
    pub y1: T,
}

impl<T: Real> Domain<T> {
    pub fn new(x0: T, x1: T, y0: T, y1: T) -> Self {
        Self { x0, x1, y0, y1 }
    }

    /// The square `[-1, 1]²`.
    pub fn symmetric_unit() -> Self {
        Self::new(-T::one(), T::one(), -T::one(), T::one())
    }

    pub fn width(&self) -> T {
        self.x1 - self.x0
    }

    pub fn height(&self) -> T {
        self.y1 - self.y0
    }
}

/// Regular `nx × ny` grid of cell centers.
///
/// Sites are stored x-major: site `i = ix * ny + iy`. This matches the
/// row-major layout of an `nx × ny` image.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid<T> {
    nx: usize,
    ny: usize,
    domain: Domain<T>,
}

pub fn build_grid<T: Real>(nx: usize, ny: usize, domain: Domain<T>) -> Result<SpatialGrid<T>> {
    if nx == 0 || ny == 0 {
        return Err(Error::InvalidArgument(format!(
            "grid dimensions must be positive, got {nx}x{ny}"
        )));
    }
    let ok = |v: T| v.is_finite() && v > T::zero();
    if !ok(domain.width()) || !ok(domain.height()) {
        return Err(Error::InvalidArgument("degenerate spatial domain".into()));
    }
    Ok(SpatialGrid { nx, ny, domain })
}

impl<T: Real> SpatialGrid<T> {
    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    /// Number of sites `I = nx · ny`.
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn domain(&self) -> &Domain<T> {
        &self.domain
    }

    pub fn dx(&self) -> T {
        self.domain.width() / T::of_usize(self.nx)
    }

    pub fn dy(&self) -> T {
        self.domain.height() / T::of_usize(self.ny)
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize) -> usize {
        ix * self.ny + iy
    }

    #[inline]
    pub fn x_center(&self, ix: usize) -> T {
        self.domain.x0 + (T::of_usize(ix) + T::of(0.5)) * self.dx()
    }

    #[inline]
    pub fn y_center(&self, iy: usize) -> T {
        self.domain.y0 + (T::of_usize(iy) + T::of(0.5)) * self.dy()
    }

    pub fn site(&self, i: usize) -> (T, T) {
        (self.x_center(i / self.ny), self.y_center(i % self.ny))
    }

    pub fn sites(&self) -> Vec<(T, T)> {
        (0..self.len()).map(|i| self.site(i)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BasisKind {
    /// Tensor-product DCT-II cosine modes.
    FourierCosine,
    /// Tensor-product Haar wavelets; requires power-of-two grid sides.
    HaarWavelet,
}

/// `I × L` matrix whose column `ℓ` is basis function `φ_ℓ` at every site.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMatrix<T: Real> {
    pub values: DMatrix<T>,
    /// Frequency pair `(k_x, k_y)` of every column.
    pub order: Vec<(usize, usize)>,
    pub kind: BasisKind,
    /// 1-d modes `0..=max k_x` along x (`nx × kx`), likewise along y.
    modes_x: DMatrix<T>,
    modes_y: DMatrix<T>,
}

impl<T: Real> BasisMatrix<T> {
    pub fn n_sites(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_terms(&self) -> usize {
        self.values.ncols()
    }

    /// Multiply-adds per column for the tensor-product path.
    fn separable_cost(&self) -> usize {
        let (nx, kx) = self.modes_x.shape();
        let (ny, ky) = self.modes_y.shape();
        ny * ky * kx + ny * kx * nx
    }

    /// `Φ W` for an `L × J` coefficient matrix.
    pub fn synthesize(&self, w: &DMatrix<T>) -> DMatrix<T> {
        assert_eq!(w.nrows(), self.n_terms(), "coefficient rows must equal L");
        if self.separable_cost() >= self.values.len() {
            return &self.values * w;
        }
        let (nx, kx) = self.modes_x.shape();
        let (ny, ky) = self.modes_y.shape();
        let mut out = DMatrix::zeros(nx * ny, w.ncols());
        let mut grid = DMatrix::zeros(ky, kx);
        for (j, col) in w.column_iter().enumerate() {
            grid.fill(T::zero());
            for (&(a, b), &v) in self.order.iter().zip(col.iter()) {
                grid[(b, a)] = v;
            }
            // column-major `ny × nx` storage is the site order `ix * ny + iy`
            let img = &self.modes_y * &grid * self.modes_x.transpose();
            out.column_mut(j).copy_from_slice(img.as_slice());
        }
        out
    }

    /// `Φᵀ G` for an `I × J` field.
    pub fn analyze(&self, g: &DMatrix<T>) -> DMatrix<T> {
        assert_eq!(g.nrows(), self.n_sites(), "field rows must equal I");
        if self.separable_cost() >= self.values.len() {
            return self.values.tr_mul(g);
        }
        let nx = self.modes_x.nrows();
        let ny = self.modes_y.nrows();
        let mut out = DMatrix::zeros(self.n_terms(), g.ncols());
        for (j, col) in g.column_iter().enumerate() {
            let img = DMatrix::from_column_slice(ny, nx, col.as_slice());
            let coef = self.modes_y.tr_mul(&img) * &self.modes_x;
            for (c, &(a, b)) in self.order.iter().enumerate() {
                out[(c, j)] = coef[(b, a)];
            }
        }
        out
    }
}

/// First `l` frequency pairs with `k_x < nx`, `k_y < ny`, ordered by
/// `max(k_x, k_y)`, then `k_x + k_y`, then lexicographically.
pub fn frequency_order(nx: usize, ny: usize, l: usize) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize)> = (0..nx)
        .flat_map(|kx| (0..ny).map(move |ky| (kx, ky)))
        .collect();
    pairs.sort_by_key(|&(kx, ky)| (kx.max(ky), kx + ky, kx, ky));
    pairs.truncate(l);
    pairs
}

pub fn eval_basis<T: Real>(grid: &SpatialGrid<T>, l: usize, kind: BasisKind) -> Result<BasisMatrix<T>> {
    let n_sites = grid.len();
    if l == 0 || l > n_sites {
        return Err(Error::InvalidArgument(format!(
            "truncation L={l} must lie in 1..={n_sites}"
        )));
    }
    let (nx, ny) = (grid.nx(), grid.ny());
    if kind == BasisKind::HaarWavelet && !(nx.is_power_of_two() && ny.is_power_of_two()) {
        return Err(Error::InvalidArgument(format!(
            "Haar basis needs power-of-two grid sides, got {nx}x{ny}"
        )));
    }
    let order = frequency_order(nx, ny, l);
    let mode_1d = |n: usize, k: usize, i: usize| -> f64 {
        match kind {
            BasisKind::FourierCosine => cosine_mode(n, k, i),
            BasisKind::HaarWavelet => haar_mode(n, k, i),
        }
    };

    let mut values = DMatrix::zeros(n_sites, l);
    let mut col_x = vec![0.0; nx];
    let mut col_y = vec![0.0; ny];
    for (c, &(kx, ky)) in order.iter().enumerate() {
        for (i, v) in col_x.iter_mut().enumerate() {
            *v = mode_1d(nx, kx, i);
        }
        for (i, v) in col_y.iter_mut().enumerate() {
            *v = mode_1d(ny, ky, i);
        }
        let mut column = values.column_mut(c);
        for ix in 0..nx {
            for iy in 0..ny {
                column[ix * ny + iy] = T::of(col_x[ix] * col_y[iy]);
            }
        }
    }
    let kx = order.iter().map(|p| p.0).max().map_or(0, |k| k + 1);
    let ky = order.iter().map(|p| p.1).max().map_or(0, |k| k + 1);
    let modes_x = DMatrix::from_fn(nx, kx, |i, k| T::of(mode_1d(nx, k, i)));
    let modes_y = DMatrix::from_fn(ny, ky, |i, k| T::of(mode_1d(ny, k, i)));
    Ok(BasisMatrix { values, order, kind, modes_x, modes_y })
}

/// Orthonormal DCT-II vector `k` on `n` points, entry `i`.
fn cosine_mode(n: usize, k: usize, i: usize) -> f64 {
    let nf = n as f64;
    if k == 0 {
        (1.0 / nf).sqrt()
    } else {
        (2.0 / nf).sqrt() * (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / nf).cos()
    }
}

/// Orthonormal Haar vector `k` on `n = 2^m` points, entry `i`.
///
/// `k = 0` is the scaling function; `k = 2^j + p` is the wavelet at level `j`
/// and shift `p`.
fn haar_mode(n: usize, k: usize, i: usize) -> f64 {
    let nf = n as f64;
    if k == 0 {
        return (1.0 / nf).sqrt();
    }
    let level = usize::BITS - 1 - k.leading_zeros();
    let scale = 1usize << level;
    let shift = k - scale;
    let support = n / scale;
    let start = shift * support;
    if i < start || i >= start + support {
        return 0.0;
    }
    let amp = (scale as f64 / nf).sqrt();
    if i < start + support / 2 {
        amp
    } else {
        -amp
    }
}
