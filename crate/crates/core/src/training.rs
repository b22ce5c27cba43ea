//! The scale-averaged objective, the optimizer, and the training loop with
//! its ablation modes (random scale per sample, frozen language model).

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{M3Error, Result};
use crate::par::Exec;
use crate::real::Real;
use crate::token_pyramid::{build_pyramid, flatten, TokenPyramid};
use crate::toy_lmm::{ModelConfig, ModelParams, ParamGroup, PixelImage};

/// One supervised example: an image, question tokens and answer tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub image: PixelImage,
    pub question: Vec<u32>,
    pub answer: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleMode {
    /// Every sample contributes the mean of its per-scale losses.
    AverageAllScales,
    /// Every sample contributes its loss at one uniformly drawn scale.
    RandomScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainableSet {
    AllParams,
    /// Language model frozen: only the image encoder and projector train.
    EncoderAndProjector,
}

impl TrainableSet {
    pub fn includes(self, group: ParamGroup) -> bool {
        match self {
            TrainableSet::AllParams => true,
            TrainableSet::EncoderAndProjector => matches!(group, ParamGroup::Encoder | ParamGroup::Projector),
        }
    }

    /// Per-tensor trainability in declaration order.
    pub fn mask(self, params: &ModelParams<f32>) -> Vec<bool> {
        params.names().iter().map(|n| self.includes(ParamGroup::of(n))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { step_size: 3e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: ScaleMode,
    pub trainable: TrainableSet,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Leading steps trained on the finest scale only, standing in for
    /// initialization from a model trained with full tokens.
    pub finest_only_steps: usize,
    /// Validation accuracy is recorded every this many steps (0 disables).
    pub eval_interval: usize,
    /// Number of validation examples used for the periodic accuracy.
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: ScaleMode::AverageAllScales,
            trainable: TrainableSet::AllParams,
            optimizer: AdamConfig::default(),
            batch_size: 16,
            steps: 1200,
            seed: 0,
            finest_only_steps: 0,
            eval_interval: 200,
            eval_samples: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if !(o.step_size.is_finite() && o.step_size >= 0.0) {
            return Err(M3Error::Config("train.optimizer.step_size must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(M3Error::Config("train.optimizer betas must lie in [0, 1)".into()));
        }
        if !(o.epsilon > 0.0) {
            return Err(M3Error::Config("train.optimizer.epsilon must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(M3Error::Config("train.batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Mean over scales of the per-scale answer NLL.
pub fn multiscale_loss<F: Real>(
    params: &ModelParams<F>,
    pyramid: &TokenPyramid<F>,
    question: &[u32],
    answer: &[u32],
) -> Result<F> {
    if pyramid.num_scales() == 0 {
        return Err(M3Error::InvalidArgument("pyramid has no scales".into()));
    }
    let mut total = F::zero();
    for scale in pyramid.scales() {
        total = total + params.nll(flatten(scale).view(), question, answer)?;
    }
    Ok(total / F::from_usize(pyramid.num_scales()).expect("scale count"))
}

/// Full-path objective for one example: encode the image, build the pyramid,
/// average the NLL over `scale_indices`, and accumulate the gradient of that
/// mean (scaled by `weight`) into `grad`, including the encoder. Returns the
/// unweighted mean loss.
pub fn example_loss_grad<F: Real>(
    params: &ModelParams<F>,
    example: &Example,
    scale_indices: &[usize],
    weight: F,
    grad: &mut ModelParams<F>,
) -> Result<F> {
    if scale_indices.is_empty() {
        return Err(M3Error::InvalidArgument("no scales selected".into()));
    }
    let patches = params.patches(&example.image)?;
    let grid = params.encode_patches(patches.view())?;
    let pyramid = build_pyramid(&grid)?;
    let per = F::one() / F::from_usize(scale_indices.len()).expect("count");
    let mut dgrid = Array2::<F>::zeros((grid.len(), grid.channels()));
    let mut total = F::zero();
    for &i in scale_indices {
        let scale = pyramid
            .scales()
            .get(i)
            .ok_or_else(|| M3Error::InvalidArgument(format!("scale index {i} out of range")))?;
        let tokens = flatten(scale);
        let (loss, dvis) = params.nll_grad_into(tokens.view(), &example.question, &example.answer, weight * per, grad)?;
        total = total + loss;
        dgrid += &pyramid.scale_grad_to_finest(i, dvis.view());
    }
    params.encoder_backward(patches.view(), dgrid.view(), grad);
    Ok(total * per)
}

/// Loss of the same objective without gradients.
pub fn example_loss<F: Real>(params: &ModelParams<F>, example: &Example, scale_indices: &[usize]) -> Result<F> {
    let grid = params.encode_image(&example.image)?;
    let pyramid = build_pyramid(&grid)?;
    let mut total = F::zero();
    for &i in scale_indices {
        let scale = &pyramid.scales()[i];
        total = total + params.nll(flatten(scale).view(), &example.question, &example.answer)?;
    }
    Ok(total / F::from_usize(scale_indices.len()).expect("count"))
}

/// Uniform scale draws, one per sample, in sample order.
pub fn draw_scales<R: Rng>(rng: &mut R, count: usize, num_scales: usize) -> Vec<usize> {
    (0..count).map(|_| rng.gen_range(0..num_scales)).collect()
}

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    first: ModelParams<f32>,
    second: ModelParams<f32>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ModelParams<f32>) -> Self {
        Self { config, first: params.zeros_like(), second: params.zeros_like(), steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Updates tensors whose `mask` entry is true; the rest stay bit-identical.
    pub fn step(&mut self, params: &mut ModelParams<f32>, grad: &ModelParams<f32>, mask: &[bool]) {
        self.steps += 1;
        let c = &self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let lr = c.step_size as f32;
        let eps = c.epsilon as f32;
        let (bc1, bc2) = (bc1 as f32, bc2 as f32);
        let tensors = params
            .slices_mut()
            .into_iter()
            .zip(grad.slices())
            .zip(self.first.slices_mut())
            .zip(self.second.slices_mut())
            .zip(mask);
        for ((((p, g), m), v), &trainable) in tensors {
            if !trainable {
                continue;
            }
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Which scales each sample of a batch contributes at.
fn batch_scales(cfg: &TrainConfig, step: usize, num_scales: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    if step < cfg.finest_only_steps {
        return vec![vec![num_scales - 1]; batch];
    }
    match cfg.mode {
        ScaleMode::AverageAllScales => vec![(0..num_scales).collect(); batch],
        ScaleMode::RandomScale => draw_scales(rng, batch, num_scales).into_iter().map(|i| vec![i]).collect(),
    }
}

/// Mean loss over the batch and the batch-mean gradient. Per-sample gradients
/// may be computed concurrently; they are summed in sample order.
pub fn batch_loss_grad(
    params: &ModelParams<f32>,
    batch: &[&Example],
    scales: &[Vec<usize>],
    exec: Exec,
) -> Result<(f32, ModelParams<f32>)> {
    let jobs: Vec<(&Example, &Vec<usize>)> = batch.iter().copied().zip(scales).collect();
    let per_sample = exec.try_map(&jobs, |(ex, idx)| {
        let mut g = params.zeros_like();
        let loss = example_loss_grad(params, ex, idx, 1.0f32, &mut g)?;
        Ok::<_, M3Error>((loss, g))
    })?;
    let inv = 1.0 / batch.len() as f32;
    let mut grad = params.zeros_like();
    let mut loss = 0.0f32;
    for (l, g) in &per_sample {
        loss += l;
        grad.add_scaled(1.0, g);
    }
    grad.scale(inv);
    Ok((loss * inv, grad))
}

/// One optimizer update on `batch`. Aborts without touching `params` when the
/// loss or gradient is not finite.
pub fn train_step(
    params: &mut ModelParams<f32>,
    optimizer: &mut Adam,
    batch: &[&Example],
    scales: &[Vec<usize>],
    trainable: TrainableSet,
    exec: Exec,
) -> Result<f32> {
    let (loss, grad) = batch_loss_grad(params, batch, scales, exec)?;
    if !loss.is_finite() {
        return Err(M3Error::NonFinite(format!(
            "batch loss is {loss} at optimizer step {}",
            optimizer.steps() + 1
        )));
    }
    if !grad.is_finite() {
        return Err(M3Error::NonFinite(format!("gradient at optimizer step {}", optimizer.steps() + 1)));
    }
    let mask = trainable.mask(params);
    optimizer.step(params, &grad, &mask);
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f32,
    /// Per-scale validation accuracy, coarsest first, when evaluated at this step.
    pub scale_accuracy: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub curve: Vec<CurvePoint>,
}

/// True iff greedy decoding reproduces the answer exactly.
pub fn answers_correctly<F: Real>(params: &ModelParams<F>, visual: ndarray::ArrayView2<F>, example: &Example) -> Result<bool> {
    let decoded = params.generate(visual, &example.question, example.answer.len())?;
    Ok(decoded == example.answer)
}

/// Per-example, per-scale correctness (coarsest first).
pub fn scale_correctness(params: &ModelParams<f32>, examples: &[Example], exec: Exec) -> Result<Vec<Vec<bool>>> {
    exec.try_map(examples, |ex| {
        let grid = params.encode_image(&ex.image)?;
        let pyramid = build_pyramid(&grid)?;
        pyramid
            .scales()
            .iter()
            .map(|s| answers_correctly(params, flatten(s).view(), ex))
            .collect::<Result<Vec<bool>>>()
    })
}

pub fn scale_accuracy(params: &ModelParams<f32>, examples: &[Example], exec: Exec) -> Result<Vec<f64>> {
    let rows = scale_correctness(params, examples, exec)?;
    let m = rows.first().map_or(0, Vec::len);
    Ok((0..m)
        .map(|i| rows.iter().filter(|r| r[i]).count() as f64 / rows.len() as f64)
        .collect())
}

/// Trains from the seeded initialization. Deterministic in `(model, config, data)`.
pub fn train(
    model: &ModelConfig,
    data: &[Example],
    validation: &[Example],
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<TrainOutcome> {
    let params = ModelParams::<f32>::init(model, cfg.seed)?;
    train_from(params, data, validation, cfg, exec)
}

pub fn train_from(
    mut params: ModelParams<f32>,
    data: &[Example],
    validation: &[Example],
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(M3Error::InvalidArgument("training set is empty".into()));
    }
    let num_scales = {
        let grid = params.encode_image(&data[0].image)?;
        build_pyramid(&grid)?.num_scales()
    };
    let mut optimizer = Adam::new(cfg.optimizer.clone(), &params);
    // separate streams so the batch order does not depend on the scale mode
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x006f_7264_6572);
    let mut scale_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0073_6361_6c65);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    let val = &validation[..cfg.eval_samples.min(validation.len())];
    let mut curve = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(&data[order[cursor]]);
            cursor += 1;
        }
        let scales = batch_scales(cfg, step, num_scales, batch.len(), &mut scale_rng);
        let loss = train_step(&mut params, &mut optimizer, &batch, &scales, cfg.trainable, exec)?;
        let done = step + 1;
        let scale_accuracy = if cfg.eval_interval > 0 && !val.is_empty() && (done % cfg.eval_interval == 0 || done == cfg.steps) {
            Some(scale_accuracy(&params, val, exec)?)
        } else {
            None
        };
        curve.push(CurvePoint { step: done, loss, scale_accuracy });
    }
    Ok(TrainOutcome { params, curve })
}

/// SHA-256 over the little-endian bytes of every tensor outside the trainable set.
pub fn frozen_digest(params: &ModelParams<f32>, trainable: TrainableSet) -> String {
    let mut h = Sha256::new();
    for (name, s) in params.names().iter().zip(params.slices()) {
        if trainable.includes(ParamGroup::of(name)) {
            continue;
        }
        h.update(name.as_bytes());
        for v in s {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_draws_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let draws = draw_scales(&mut rng, 10_000, 4);
        let n = draws.len() as f64;
        let sigma = (n * 0.25 * 0.75).sqrt();
        for s in 0..4 {
            let count = draws.iter().filter(|&&d| d == s).count() as f64;
            assert!((count - n / 4.0).abs() <= 3.0 * sigma, "scale {s}: {count}");
        }
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.optimizer.step_size = f64::NAN;
        assert!(c.validate().is_err());
    }

    #[test]
    fn masks_follow_groups() {
        let p = ModelParams::<f32>::init(&ModelConfig::default(), 0).unwrap();
        let mask = TrainableSet::EncoderAndProjector.mask(&p);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 4);
        assert!(TrainableSet::AllParams.mask(&p).iter().all(|&m| m));
    }
}
