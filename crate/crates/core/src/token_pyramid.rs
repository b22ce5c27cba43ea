//! Nested coarse-to-fine visual token scales.
//!
//! A [`TokenPyramid`] is derived from a single encoder grid by repeated 2×2
//! average pooling (stride 2) and, once the grid reaches 3×3, a final 3×3
//! pooling down to one token. A 24×24 grid yields the schedule
//! `[1, 9, 36, 144, 576]`; a 12×12 grid yields `[1, 9, 36, 144]`.
//!
//! Pooling is an arithmetic mean over equal-sized blocks, so every coarse token
//! is the mean of a square block of finest-scale tokens and the global mean is
//! preserved across scales. The training-free baselines (`spatial_sample`,
//! `sequential_sample`, `inference_pool`) live here as well.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{M3Error, Result};
use crate::real::Real;

/// H×W spatial grid of C-dimensional tokens, stored row-major as `(row, col, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid<F = f32> {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<F>,
}

impl<F: Real> TokenGrid<F> {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<F>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(M3Error::Dimension(format!(
                "grid dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        let expected = height * width * channels;
        if values.len() != expected {
            return Err(M3Error::Dimension(format!(
                "{height}x{width}x{channels} grid needs {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(M3Error::NonFinite(format!("grid value at flat index {pos}")));
        }
        Ok(Self { height, width, channels, values })
    }

    /// Grid from a `(H·W) × C` row-major token matrix.
    pub fn from_tokens(height: usize, width: usize, tokens: ArrayView2<F>) -> Result<Self> {
        if tokens.nrows() != height * width {
            return Err(M3Error::Dimension(format!(
                "{} tokens cannot fill a {height}x{width} grid",
                tokens.nrows()
            )));
        }
        let channels = tokens.ncols();
        Self::new(height, width, channels, tokens.iter().copied().collect())
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: F) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn token(&self, row: usize, col: usize) -> &[F] {
        let start = (row * self.width + col) * self.channels;
        &self.values[start..start + self.channels]
    }

    /// Row-major token sequence, `(H·W) × C`.
    pub fn flatten(&self) -> Array2<F> {
        Array2::from_shape_vec((self.len(), self.channels), self.values.clone())
            .expect("grid invariant: value count equals H*W*C")
    }

    /// Mean over every token and channel, accumulated in f64.
    pub fn global_mean(&self) -> f64 {
        self.values.iter().map(|v| v.as_f64()).sum::<f64>() / self.values.len() as f64
    }

    pub fn cast<G: Real>(&self) -> TokenGrid<G> {
        TokenGrid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            values: self.values.iter().map(|v| G::of(v.as_f64())).collect(),
        }
    }

    fn block_mean(&self, side: usize) -> TokenGrid<F> {
        let (h, w, c) = (self.height / side, self.width / side, self.channels);
        let inv = 1.0 / (side * side) as f64;
        let mut values = Vec::with_capacity(h * w * c);
        let mut acc = vec![0f64; c];
        for r in 0..h {
            for col in 0..w {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for dr in 0..side {
                    for dc in 0..side {
                        let t = self.token(r * side + dr, col * side + dc);
                        for (a, v) in acc.iter_mut().zip(t) {
                            *a += v.as_f64();
                        }
                    }
                }
                values.extend(acc.iter().map(|a| F::of(a * inv)));
            }
        }
        TokenGrid { height: h, width: w, channels: c, values }
    }
}

/// 2×2 average pooling with stride 2. Odd dimensions are rejected, never padded.
pub fn pool_2x2<F: Real>(grid: &TokenGrid<F>) -> Result<TokenGrid<F>> {
    if grid.height % 2 != 0 || grid.width % 2 != 0 {
        return Err(M3Error::Dimension(format!(
            "2x2 pooling needs even dimensions, got {}x{}",
            grid.height, grid.width
        )));
    }
    Ok(grid.block_mean(2))
}

/// Collapses a 3×3 grid into its single mean token.
pub fn pool_3x3<F: Real>(grid: &TokenGrid<F>) -> Result<TokenGrid<F>> {
    if grid.height != 3 || grid.width != 3 {
        return Err(M3Error::Dimension(format!(
            "3x3 pooling needs a 3x3 grid, got {}x{}",
            grid.height, grid.width
        )));
    }
    Ok(grid.block_mean(3))
}

/// Token counts per scale, coarsest first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScaleSchedule(Vec<usize>);

impl ScaleSchedule {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(M3Error::InvalidArgument("schedule must not be empty".into()));
        }
        if sizes[0] == 0 || sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(M3Error::InvalidArgument(format!(
                "schedule must be strictly increasing positive sizes, got {sizes:?}"
            )));
        }
        Ok(Self(sizes))
    }

    pub fn sizes(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn smallest(&self) -> usize {
        self.0[0]
    }

    pub fn largest(&self) -> usize {
        *self.0.last().expect("non-empty schedule")
    }

    pub fn index_of(&self, size: usize) -> Option<usize> {
        self.0.iter().position(|&s| s == size)
    }
}

/// Nested scales derived from one grid, coarsest first.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenPyramid<F = f32> {
    scales: Vec<TokenGrid<F>>,
    schedule: ScaleSchedule,
    // side of the square block of finest tokens averaged into one token, per scale
    block_sides: Vec<usize>,
}

impl<F: Real> TokenPyramid<F> {
    pub fn scales(&self) -> &[TokenGrid<F>] {
        &self.scales
    }

    pub fn schedule(&self) -> &ScaleSchedule {
        &self.schedule
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn finest(&self) -> &TokenGrid<F> {
        self.scales.last().expect("pyramid has at least one scale")
    }

    pub fn coarsest(&self) -> &TokenGrid<F> {
        &self.scales[0]
    }

    pub fn scale_with_size(&self, size: usize) -> Option<&TokenGrid<F>> {
        self.schedule.index_of(size).map(|i| &self.scales[i])
    }

    /// Side of the finest-token block that one token of scale `index` averages.
    pub fn block_side(&self, index: usize) -> usize {
        self.block_sides[index]
    }

    /// Adjoint of the pooling cascade: maps a gradient on the tokens of scale
    /// `index` (`n_s × C`) to the gradient on the finest grid (`H·W × C`).
    pub fn scale_grad_to_finest(&self, index: usize, grad: ArrayView2<F>) -> Array2<F> {
        let fine = self.finest();
        let scale = &self.scales[index];
        let side = self.block_sides[index];
        let inv = F::one() / F::from_usize(side * side).expect("small count");
        let mut out = Array2::zeros((fine.len(), fine.channels()));
        for r in 0..fine.height() {
            for c in 0..fine.width() {
                let src = (r / side) * scale.width() + c / side;
                let mut row = out.row_mut(r * fine.width() + c);
                row.zip_mut_with(&grad.row(src), |o, &g| *o = g * inv);
            }
        }
        out
    }
}

/// Builds the coarse-to-fine cascade.
///
/// 2×2 pooling repeats while both dimensions are even and greater than 3; a
/// 3×3 grid is collapsed to one token. Grids outside the `2^a·3` square
/// family stop at their smallest reachable shape and have no 1-token scale.
/// A cascade that stalls with an odd dimension above 3 is an error.
pub fn build_pyramid<F: Real>(grid: &TokenGrid<F>) -> Result<TokenPyramid<F>> {
    let mut fine_to_coarse = vec![grid.clone()];
    let mut sides = vec![1usize];
    loop {
        let cur = fine_to_coarse.last().expect("non-empty");
        let side = *sides.last().expect("non-empty");
        let (h, w) = (cur.height(), cur.width());
        if h == 3 && w == 3 {
            let next = pool_3x3(cur)?;
            fine_to_coarse.push(next);
            sides.push(side * 3);
            break;
        }
        if h % 2 == 0 && w % 2 == 0 && h > 3 && w > 3 {
            let next = pool_2x2(cur)?;
            fine_to_coarse.push(next);
            sides.push(side * 2);
            continue;
        }
        let odd = [("height", h), ("width", w)]
            .into_iter()
            .find(|&(_, d)| d % 2 == 1 && d > 3);
        if let Some((name, d)) = odd {
            return Err(M3Error::Dimension(format!(
                "pooling cascade from {}x{} stalls at {h}x{w}: odd {name} {d} > 3",
                grid.height(),
                grid.width()
            )));
        }
        break;
    }
    fine_to_coarse.reverse();
    sides.reverse();
    let schedule = ScaleSchedule::new(fine_to_coarse.iter().map(TokenGrid::len).collect())?;
    Ok(TokenPyramid { scales: fine_to_coarse, schedule, block_sides: sides })
}

/// Row-major token sequence of a grid.
pub fn flatten<F: Real>(grid: &TokenGrid<F>) -> Array2<F> {
    grid.flatten()
}

/// Uniform `m×m` lattice selection with `k = m²`; picks the token at
/// `(floor((i+0.5)·H/m), floor((j+0.5)·W/m))`. Values are copied unchanged.
pub fn spatial_sample<F: Real>(grid: &TokenGrid<F>, k: usize) -> Result<TokenGrid<F>> {
    let m = (k as f64).sqrt().round() as usize;
    if k == 0 || m * m != k {
        return Err(M3Error::InvalidArgument(format!("spatial sample size {k} is not a positive perfect square")));
    }
    if m > grid.height() || m > grid.width() {
        return Err(M3Error::InvalidArgument(format!(
            "a {m}x{m} lattice does not fit a {}x{} grid",
            grid.height(),
            grid.width()
        )));
    }
    let pick = |i: usize, extent: usize| (2 * i + 1) * extent / (2 * m);
    let mut values = Vec::with_capacity(k * grid.channels());
    for i in 0..m {
        for j in 0..m {
            values.extend_from_slice(grid.token(pick(i, grid.height()), pick(j, grid.width())));
        }
    }
    TokenGrid::new(m, m, grid.channels(), values)
}

/// The first `k` tokens of the row-major sequence.
pub fn sequential_sample<F: Real>(grid: &TokenGrid<F>, k: usize) -> Result<Array2<F>> {
    if k == 0 || k > grid.len() {
        return Err(M3Error::InvalidArgument(format!(
            "sequential sample size {k} outside 1..={}",
            grid.len()
        )));
    }
    let c = grid.channels();
    Ok(Array2::from_shape_vec((k, c), grid.values()[..k * c].to_vec()).expect("prefix shape"))
}

/// Training-free average pooling down to `k` tokens: the same cascade the
/// pyramid uses, applied at inference.
pub fn inference_pool<F: Real>(grid: &TokenGrid<F>, k: usize) -> Result<TokenGrid<F>> {
    let pyramid = build_pyramid(grid)?;
    pyramid.scale_with_size(k).cloned().ok_or_else(|| {
        M3Error::InvalidArgument(format!(
            "{k} is not in the pooling schedule {:?}",
            pyramid.schedule().sizes()
        ))
    })
}
