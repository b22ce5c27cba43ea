use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{M3Error, Result};
use crate::real::Real;

/// Shapes and hyperparameters of the toy multimodal transformer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Vocabulary size V.
    pub vocab: usize,
    /// Residual width d.
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    /// Longest sequence (visual prefix + question + answer) the positional table covers.
    pub max_seq: usize,
    /// Side of the square encoder token grid.
    pub encoder_grid: usize,
    /// Pixels per patch side; one patch becomes one encoder token.
    pub patch_size: usize,
    pub image_channels: usize,
    /// Channel count C of encoder tokens (before projection to `width`).
    pub visual_channels: usize,
    /// Token id that terminates greedy decoding.
    pub end_token: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 64,
            width: 64,
            heads: 4,
            layers: 4,
            max_seq: 160,
            encoder_grid: 12,
            patch_size: 3,
            image_channels: 15,
            visual_channels: 32,
            end_token: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab", self.vocab),
            ("width", self.width),
            ("heads", self.heads),
            ("layers", self.layers),
            ("max_seq", self.max_seq),
            ("encoder_grid", self.encoder_grid),
            ("patch_size", self.patch_size),
            ("image_channels", self.image_channels),
            ("visual_channels", self.visual_channels),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(M3Error::Config(format!("model.{name} must be positive")));
        }
        if self.vocab < 2 {
            return Err(M3Error::Config("model.vocab must be at least 2".into()));
        }
        if self.width % self.heads != 0 {
            return Err(M3Error::Config(format!(
                "model.width {} is not divisible by model.heads {}",
                self.width, self.heads
            )));
        }
        if self.end_token as usize >= self.vocab {
            return Err(M3Error::Config("model.end_token outside the vocabulary".into()));
        }
        Ok(())
    }

    pub fn image_side(&self) -> usize {
        self.encoder_grid * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn ffn_width(&self) -> usize {
        4 * self.width
    }
}

/// One pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<F = f32> {
    pub ln1_g: Array1<F>,
    pub ln1_b: Array1<F>,
    pub wq: Array2<F>,
    pub bq: Array1<F>,
    pub wk: Array2<F>,
    pub bk: Array1<F>,
    pub wv: Array2<F>,
    pub bv: Array1<F>,
    pub wo: Array2<F>,
    pub bo: Array1<F>,
    pub ln2_g: Array1<F>,
    pub ln2_b: Array1<F>,
    pub w1: Array2<F>,
    pub b1: Array1<F>,
    pub w2: Array2<F>,
    pub b2: Array1<F>,
}

/// All trainable parameters. Weight matrices are stored `in × out`, so a
/// linear layer is `x.dot(w) + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F = f32> {
    config: ModelConfig,
    pub encoder_w: Array2<F>,
    pub encoder_b: Array1<F>,
    pub projector_w: Array2<F>,
    pub projector_b: Array1<F>,
    pub token_embedding: Array2<F>,
    pub position_embedding: Array2<F>,
    pub blocks: Vec<Block<F>>,
    pub final_norm_g: Array1<F>,
    pub final_norm_b: Array1<F>,
    pub head_w: Array2<F>,
    pub head_b: Array1<F>,
}

/// Coarse parameter grouping used by freezing and gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Encoder,
    Projector,
    TokenEmbedding,
    PositionEmbedding,
    Block(usize),
    FinalNorm,
    Head,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        let mut parts = name.split('.');
        match parts.next() {
            Some("encoder") => ParamGroup::Encoder,
            Some("projector") => ParamGroup::Projector,
            Some("token_embedding") => ParamGroup::TokenEmbedding,
            Some("position_embedding") => ParamGroup::PositionEmbedding,
            Some("blocks") => ParamGroup::Block(
                parts.next().and_then(|i| i.parse().ok()).expect("block index in name"),
            ),
            Some("final_norm") => ParamGroup::FinalNorm,
            Some("head") => ParamGroup::Head,
            _ => panic!("unknown parameter name {name}"),
        }
    }
}

const BLOCK_TENSORS: [&str; 16] = [
    "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_g", "ln2_b", "w1", "b1", "w2",
    "b2",
];

impl<F: Real> Block<F> {
    fn zeros(d: usize) -> Self {
        let m = || Array2::zeros((d, d));
        let v = || Array1::zeros(d);
        Block {
            ln1_g: v(),
            ln1_b: v(),
            wq: m(),
            bq: v(),
            wk: m(),
            bk: v(),
            wv: m(),
            bv: v(),
            wo: m(),
            bo: v(),
            ln2_g: v(),
            ln2_b: v(),
            w1: Array2::zeros((d, 4 * d)),
            b1: Array1::zeros(4 * d),
            w2: Array2::zeros((4 * d, d)),
            b2: v(),
        }
    }

    fn slices(&self) -> [&[F]; 16] {
        [
            s1(&self.ln1_g),
            s1(&self.ln1_b),
            s2(&self.wq),
            s1(&self.bq),
            s2(&self.wk),
            s1(&self.bk),
            s2(&self.wv),
            s1(&self.bv),
            s2(&self.wo),
            s1(&self.bo),
            s1(&self.ln2_g),
            s1(&self.ln2_b),
            s2(&self.w1),
            s1(&self.b1),
            s2(&self.w2),
            s1(&self.b2),
        ]
    }

    fn slices_mut(&mut self) -> [&mut [F]; 16] {
        [
            m1(&mut self.ln1_g),
            m1(&mut self.ln1_b),
            m2(&mut self.wq),
            m1(&mut self.bq),
            m2(&mut self.wk),
            m1(&mut self.bk),
            m2(&mut self.wv),
            m1(&mut self.bv),
            m2(&mut self.wo),
            m1(&mut self.bo),
            m1(&mut self.ln2_g),
            m1(&mut self.ln2_b),
            m2(&mut self.w1),
            m1(&mut self.b1),
            m2(&mut self.w2),
            m1(&mut self.b2),
        ]
    }

    fn shapes(&self) -> [Vec<usize>; 16] {
        [
            self.ln1_g.shape().to_vec(),
            self.ln1_b.shape().to_vec(),
            self.wq.shape().to_vec(),
            self.bq.shape().to_vec(),
            self.wk.shape().to_vec(),
            self.bk.shape().to_vec(),
            self.wv.shape().to_vec(),
            self.bv.shape().to_vec(),
            self.wo.shape().to_vec(),
            self.bo.shape().to_vec(),
            self.ln2_g.shape().to_vec(),
            self.ln2_b.shape().to_vec(),
            self.w1.shape().to_vec(),
            self.b1.shape().to_vec(),
            self.w2.shape().to_vec(),
            self.b2.shape().to_vec(),
        ]
    }
}

fn s1<F>(a: &Array1<F>) -> &[F] {
    a.as_slice().expect("standard layout")
}
fn s2<F>(a: &Array2<F>) -> &[F] {
    a.as_slice().expect("standard layout")
}
fn m1<F>(a: &mut Array1<F>) -> &mut [F] {
    a.as_slice_mut().expect("standard layout")
}
fn m2<F>(a: &mut Array2<F>) -> &mut [F] {
    a.as_slice_mut().expect("standard layout")
}

impl<F: Real> ModelParams<F> {
    /// All-zero parameters (layer-norm gains included). Used as a gradient accumulator.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let d = c.width;
        Ok(ModelParams {
            config: c.clone(),
            encoder_w: Array2::zeros((c.image_channels, c.visual_channels)),
            encoder_b: Array1::zeros(c.visual_channels),
            projector_w: Array2::zeros((c.visual_channels, d)),
            projector_b: Array1::zeros(d),
            token_embedding: Array2::zeros((c.vocab, d)),
            position_embedding: Array2::zeros((c.max_seq, d)),
            blocks: (0..c.layers).map(|_| Block::zeros(d)).collect(),
            final_norm_g: Array1::zeros(d),
            final_norm_b: Array1::zeros(d),
            head_w: Array2::zeros((d, c.vocab)),
            head_b: Array1::zeros(c.vocab),
        })
    }

    /// Seeded initialization: fan-in scaled normals for the encoder and
    /// projector, N(0, 0.02) elsewhere, residual output projections shrunk by
    /// `1/sqrt(2·layers)`, unit layer-norm gains and zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |a: &mut [F], std: f64| {
            for v in a.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = F::of(z * std);
            }
        };
        let residual_std = 0.02 / (2.0 * config.layers as f64).sqrt();
        fill(m2(&mut p.encoder_w), 1.0 / (config.image_channels as f64).sqrt());
        fill(m2(&mut p.projector_w), 1.0 / (config.visual_channels as f64).sqrt());
        fill(m2(&mut p.token_embedding), 0.02);
        fill(m2(&mut p.position_embedding), 0.02);
        for b in &mut p.blocks {
            b.ln1_g.fill(F::one());
            b.ln2_g.fill(F::one());
            fill(m2(&mut b.wq), 0.02);
            fill(m2(&mut b.wk), 0.02);
            fill(m2(&mut b.wv), 0.02);
            fill(m2(&mut b.wo), residual_std);
            fill(m2(&mut b.w1), 0.02);
            fill(m2(&mut b.w2), residual_std);
        }
        p.final_norm_g.fill(F::one());
        fill(m2(&mut p.head_w), 0.02);
        Ok(p)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config).expect("config already validated")
    }

    /// Tensor names in declaration order (the checkpoint order).
    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = [
            "encoder.w",
            "encoder.b",
            "projector.w",
            "projector.b",
            "token_embedding",
            "position_embedding",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for i in 0..self.blocks.len() {
            names.extend(BLOCK_TENSORS.iter().map(|t| format!("blocks.{i}.{t}")));
        }
        names.extend(["final_norm.g", "final_norm.b", "head.w", "head.b"].iter().map(|s| s.to_string()));
        names
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let mut out = vec![
            self.encoder_w.shape().to_vec(),
            self.encoder_b.shape().to_vec(),
            self.projector_w.shape().to_vec(),
            self.projector_b.shape().to_vec(),
            self.token_embedding.shape().to_vec(),
            self.position_embedding.shape().to_vec(),
        ];
        for b in &self.blocks {
            out.extend(b.shapes());
        }
        out.extend([
            self.final_norm_g.shape().to_vec(),
            self.final_norm_b.shape().to_vec(),
            self.head_w.shape().to_vec(),
            self.head_b.shape().to_vec(),
        ]);
        out
    }

    /// Flat views of every tensor in declaration order.
    pub fn slices(&self) -> Vec<&[F]> {
        let mut out = vec![
            s2(&self.encoder_w),
            s1(&self.encoder_b),
            s2(&self.projector_w),
            s1(&self.projector_b),
            s2(&self.token_embedding),
            s2(&self.position_embedding),
        ];
        for b in &self.blocks {
            out.extend(b.slices());
        }
        out.extend([s1(&self.final_norm_g), s1(&self.final_norm_b), s2(&self.head_w), s1(&self.head_b)]);
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [F]> {
        let mut out = vec![
            m2(&mut self.encoder_w),
            m1(&mut self.encoder_b),
            m2(&mut self.projector_w),
            m1(&mut self.projector_b),
            m2(&mut self.token_embedding),
            m2(&mut self.position_embedding),
        ];
        for b in &mut self.blocks {
            out.extend(b.slices_mut());
        }
        out.extend([
            m1(&mut self.final_norm_g),
            m1(&mut self.final_norm_b),
            m2(&mut self.head_w),
            m1(&mut self.head_b),
        ]);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn add_scaled(&mut self, alpha: F, other: &Self) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *d + alpha * *s;
            }
        }
    }

    pub fn scale(&mut self, alpha: F) {
        for dst in self.slices_mut() {
            dst.iter_mut().for_each(|v| *v = *v * alpha);
        }
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        let mut out = ModelParams::<G>::zeros(&self.config).expect("valid config");
        for (dst, src) in out.slices_mut().into_iter().zip(self.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = G::of(s.as_f64());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_shapes_and_slices_agree() {
        let p = ModelParams::<f32>::init(&ModelConfig::default(), 1).unwrap();
        let names = p.names();
        let shapes = p.shapes();
        let slices = p.slices();
        assert_eq!(names.len(), shapes.len());
        assert_eq!(names.len(), slices.len());
        for (shape, s) in shapes.iter().zip(&slices) {
            assert_eq!(shape.iter().product::<usize>(), s.len());
        }
        assert_eq!(names.len(), 6 + 16 * 4 + 4);
        assert_eq!(ParamGroup::of("blocks.3.wq"), ParamGroup::Block(3));
        assert_eq!(ParamGroup::of("encoder.w"), ParamGroup::Encoder);
    }

    #[test]
    fn init_is_deterministic_and_finite() {
        let c = ModelConfig::default();
        let a = ModelParams::<f32>::init(&c, 9).unwrap();
        let b = ModelParams::<f32>::init(&c, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.is_finite());
        assert_ne!(a, ModelParams::<f32>::init(&c, 10).unwrap());
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::default();
        c.heads = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.vocab = 1;
        c.end_token = 0;
        assert!(c.validate().is_err());
    }
}
