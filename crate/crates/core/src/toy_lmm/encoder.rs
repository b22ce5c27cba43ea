//! Toy image encoder: each `P×P` pixel patch is reduced to its per-channel
//! mean and mapped to a C-dimensional token by a learned affine map, giving a
//! G×G token grid. Receptive fields are exactly one patch.

use ndarray::{Array2, ArrayView2, Axis};

use super::params::ModelParams;
use crate::error::{M3Error, Result};
use crate::real::Real;
use crate::token_pyramid::TokenGrid;

/// Pixel image stored row-major as `(row, col, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl PixelImage {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[self.index(row, col, ch)]
    }

    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f32) {
        let i = self.index(row, col, ch);
        self.data[i] = v;
    }

    /// Per-channel mean over all pixels.
    pub fn channel_means(&self) -> Vec<f64> {
        let mut acc = vec![0f64; self.channels];
        for px in self.data.chunks_exact(self.channels) {
            for (a, &v) in acc.iter_mut().zip(px) {
                *a += v as f64;
            }
        }
        let n = (self.height * self.width) as f64;
        acc.iter().map(|a| a / n).collect()
    }
}

impl<F: Real> ModelParams<F> {
    /// `G² × channels` matrix of patch means in row-major grid order.
    pub fn patches(&self, image: &PixelImage) -> Result<Array2<F>> {
        let cfg = self.config();
        let side = cfg.image_side();
        if image.height != side || image.width != side || image.channels != cfg.image_channels {
            return Err(M3Error::Dimension(format!(
                "image is {}x{}x{}, encoder expects {side}x{side}x{}",
                image.height, image.width, image.channels, cfg.image_channels
            )));
        }
        if image.data.len() != side * side * cfg.image_channels {
            return Err(M3Error::Dimension("image buffer length does not match its shape".into()));
        }
        let (g, p, ch) = (cfg.encoder_grid, cfg.patch_size, cfg.image_channels);
        let inv = 1.0 / (p * p) as f64;
        let mut out = Array2::zeros((g * g, ch));
        let mut acc = vec![0f64; ch];
        for gr in 0..g {
            for gc in 0..g {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for dy in 0..p {
                    for dx in 0..p {
                        let base = image.index(gr * p + dy, gc * p + dx, 0);
                        for (a, &v) in acc.iter_mut().zip(&image.data[base..base + ch]) {
                            *a += v as f64;
                        }
                    }
                }
                for (o, a) in out.row_mut(gr * g + gc).iter_mut().zip(&acc) {
                    *o = F::of(a * inv);
                }
            }
        }
        Ok(out)
    }

    pub fn encode_patches(&self, patches: ArrayView2<F>) -> Result<TokenGrid<F>> {
        let g = self.config().encoder_grid;
        let mut tokens = patches.dot(&self.encoder_w);
        tokens += &self.encoder_b;
        TokenGrid::from_tokens(g, g, tokens.view())
    }

    pub fn encode_image(&self, image: &PixelImage) -> Result<TokenGrid<F>> {
        let patches = self.patches(image)?;
        self.encode_patches(patches.view())
    }

    /// Accumulates encoder gradients given `∂loss/∂grid` (`G² × C`, row-major).
    pub fn encoder_backward(&self, patches: ArrayView2<F>, dgrid: ArrayView2<F>, grad: &mut ModelParams<F>) {
        grad.encoder_b += &dgrid.sum_axis(Axis(0));
        ndarray::linalg::general_mat_mul(F::one(), &patches.t(), &dgrid, F::one(), &mut grad.encoder_w);
    }
}
