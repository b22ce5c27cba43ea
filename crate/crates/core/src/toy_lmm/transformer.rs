//! Decoder-only forward pass, teacher-forced negative log-likelihood and its
//! reverse-mode gradient.
//!
//! Sequence layout: `[visual tokens | question | answer prefix]`. Visual
//! tokens are projected from C to d channels; text tokens use the embedding
//! table; learned absolute positions start at 0 on the first visual token.
//! The logits row for answer token `j` is read at position `prefix_len - 1 + j`.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewMut2, Axis};

use super::params::{Block, ModelParams};
use crate::error::{M3Error, Result};
use crate::real::Real;

const LN_EPS: f64 = 1e-5;

struct LnCache<F> {
    xhat: Array2<F>,
    rstd: Array1<F>,
}

fn layer_norm<F: Real>(x: ArrayView2<F>, g: &Array1<F>, b: &Array1<F>) -> (Array2<F>, LnCache<F>) {
    let (n, d) = x.dim();
    let inv_d = F::one() / F::from_usize(d).expect("width");
    let eps = F::of(LN_EPS);
    let mut xhat = Array2::zeros((n, d));
    let mut rstd = Array1::zeros(n);
    for (i, row) in x.rows().into_iter().enumerate() {
        let mean = row.sum() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let r = F::one() / (var + eps).sqrt();
        rstd[i] = r;
        xhat.row_mut(i).zip_mut_with(&row, |o, &v| *o = (v - mean) * r);
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward<F: Real>(
    dy: ArrayView2<F>,
    cache: &LnCache<F>,
    g: &Array1<F>,
    dg: &mut Array1<F>,
    db: &mut Array1<F>,
) -> Array2<F> {
    *db += &dy.sum_axis(Axis(0));
    *dg += &(&dy * &cache.xhat).sum_axis(Axis(0));
    let dxhat = &dy * g;
    let d = F::from_usize(dy.ncols()).expect("width");
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let dh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let m1 = dh.sum() / d;
        let m2 = dh.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<F>() / d;
        let r = cache.rstd[i];
        let mut out = dx.row_mut(i);
        for j in 0..out.len() {
            out[j] = r * (dh[j] - m1 - xh[j] * m2);
        }
    }
    dx
}

fn gelu<F: Real>(x: F) -> F {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let k = F::of(0.044715);
    let half = F::of(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let k = F::of(0.044715);
    let half = F::of(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * k * x * x)
}

/// `x.dot(w) + b`
fn linear<F: Real>(x: ArrayView2<F>, w: &Array2<F>, b: &Array1<F>) -> Array2<F> {
    let mut y = x.dot(w);
    y += b;
    y
}

/// `acc += a^T · b`
fn accumulate_at_b<F: Real>(acc: &mut Array2<F>, a: ArrayView2<F>, b: ArrayView2<F>) {
    general_mat_mul(F::one(), &a.t(), &b, F::one(), acc);
}

fn row_softmax_causal<F: Real>(mut scores: ArrayViewMut2<F>) {
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let visible = row.slice(s![..=i]);
        let max = visible.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let mut sum = F::zero();
        for j in 0..row.len() {
            if j <= i {
                let e = (row[j] - max).exp();
                row[j] = e;
                sum = sum + e;
            } else {
                row[j] = F::zero();
            }
        }
        row.mapv_inplace(|v| v / sum);
    }
}

struct BlockCache<F> {
    ln1: LnCache<F>,
    h1: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    probs: Vec<Array2<F>>,
    attn: Array2<F>,
    ln2: LnCache<F>,
    h2: Array2<F>,
    u: Array2<F>,
    act: Array2<F>,
}

fn block_forward<F: Real>(blk: &Block<F>, x: &Array2<F>, heads: usize) -> (Array2<F>, BlockCache<F>) {
    let (n, d) = x.dim();
    let dh = d / heads;
    let scale = F::one() / F::from_usize(dh).expect("head dim").sqrt();
    let (h1, ln1) = layer_norm(x.view(), &blk.ln1_g, &blk.ln1_b);
    let q = linear(h1.view(), &blk.wq, &blk.bq);
    let k = linear(h1.view(), &blk.wk, &blk.bk);
    let v = linear(h1.view(), &blk.wv, &blk.bv);
    let mut attn = Array2::zeros((n, d));
    let mut probs = Vec::with_capacity(heads);
    for hd in 0..heads {
        let cols = s![.., hd * dh..(hd + 1) * dh];
        let mut p = q.slice(cols).dot(&k.slice(cols).t());
        p.mapv_inplace(|v| v * scale);
        row_softmax_causal(p.view_mut());
        general_mat_mul(F::one(), &p, &v.slice(cols), F::zero(), &mut attn.slice_mut(cols));
        probs.push(p);
    }
    let mut x1 = linear(attn.view(), &blk.wo, &blk.bo);
    x1 += x;
    let (h2, ln2) = layer_norm(x1.view(), &blk.ln2_g, &blk.ln2_b);
    let u = linear(h2.view(), &blk.w1, &blk.b1);
    let act = u.mapv(gelu);
    let mut out = linear(act.view(), &blk.w2, &blk.b2);
    out += &x1;
    (out, BlockCache { ln1, h1, q, k, v, probs, attn, ln2, h2, u, act })
}

fn block_backward<F: Real>(
    blk: &Block<F>,
    cache: &BlockCache<F>,
    dout: Array2<F>,
    grad: &mut Block<F>,
    heads: usize,
) -> Array2<F> {
    let (_, d) = dout.dim();
    let dh = d / heads;
    let scale = F::one() / F::from_usize(dh).expect("head dim").sqrt();

    // feed-forward branch
    grad.b2 += &dout.sum_axis(Axis(0));
    accumulate_at_b(&mut grad.w2, cache.act.view(), dout.view());
    let mut du = dout.dot(&blk.w2.t());
    du.zip_mut_with(&cache.u, |g, &u| *g = *g * gelu_grad(u));
    grad.b1 += &du.sum_axis(Axis(0));
    accumulate_at_b(&mut grad.w1, cache.h2.view(), du.view());
    let dh2 = du.dot(&blk.w1.t());
    let mut dx1 = layer_norm_backward(dh2.view(), &cache.ln2, &blk.ln2_g, &mut grad.ln2_g, &mut grad.ln2_b);
    dx1 += &dout;

    // attention branch
    grad.bo += &dx1.sum_axis(Axis(0));
    accumulate_at_b(&mut grad.wo, cache.attn.view(), dx1.view());
    let dattn = dx1.dot(&blk.wo.t());
    let mut dq = Array2::zeros(dattn.raw_dim());
    let mut dk = Array2::zeros(dattn.raw_dim());
    let mut dv = Array2::zeros(dattn.raw_dim());
    for hd in 0..heads {
        let cols = s![.., hd * dh..(hd + 1) * dh];
        let p = &cache.probs[hd];
        let da = dattn.slice(cols);
        let dp = da.dot(&cache.v.slice(cols).t());
        general_mat_mul(F::one(), &p.t(), &da, F::zero(), &mut dv.slice_mut(cols));
        let mut ds = Array2::zeros(p.raw_dim());
        for i in 0..p.nrows() {
            let pr = p.row(i);
            let dpr = dp.row(i);
            let dot = pr.iter().zip(dpr.iter()).map(|(&a, &b)| a * b).sum::<F>();
            let mut out = ds.row_mut(i);
            for j in 0..=i {
                out[j] = pr[j] * (dpr[j] - dot) * scale;
            }
        }
        general_mat_mul(F::one(), &ds, &cache.k.slice(cols), F::zero(), &mut dq.slice_mut(cols));
        general_mat_mul(F::one(), &ds.t(), &cache.q.slice(cols), F::zero(), &mut dk.slice_mut(cols));
    }
    grad.bq += &dq.sum_axis(Axis(0));
    grad.bk += &dk.sum_axis(Axis(0));
    grad.bv += &dv.sum_axis(Axis(0));
    accumulate_at_b(&mut grad.wq, cache.h1.view(), dq.view());
    accumulate_at_b(&mut grad.wk, cache.h1.view(), dk.view());
    accumulate_at_b(&mut grad.wv, cache.h1.view(), dv.view());
    let mut dh1 = dq.dot(&blk.wq.t());
    general_mat_mul(F::one(), &dk, &blk.wk.t(), F::one(), &mut dh1);
    general_mat_mul(F::one(), &dv, &blk.wv.t(), F::one(), &mut dh1);
    let mut dx = layer_norm_backward(dh1.view(), &cache.ln1, &blk.ln1_g, &mut grad.ln1_g, &mut grad.ln1_b);
    dx += &dx1;
    dx
}

/// Everything the backward pass needs from one forward evaluation.
pub(crate) struct ForwardCache<F> {
    n_visual: usize,
    text: Vec<u32>,
    blocks: Vec<BlockCache<F>>,
    final_in_rows: usize,
    ln_final: LnCache<F>,
    hf: Array2<F>,
}

impl<F: Real> ModelParams<F> {
    fn check_inputs(&self, visual: ArrayView2<F>, question: &[u32], answer_prefix: &[u32]) -> Result<usize> {
        let cfg = self.config();
        if visual.ncols() != cfg.visual_channels {
            return Err(M3Error::Dimension(format!(
                "visual tokens have {} channels, model expects {}",
                visual.ncols(),
                cfg.visual_channels
            )));
        }
        if let Some(&t) = question.iter().chain(answer_prefix).find(|&&t| t as usize >= cfg.vocab) {
            return Err(M3Error::InvalidArgument(format!("token id {t} outside vocabulary of {}", cfg.vocab)));
        }
        let prefix = visual.nrows() + question.len();
        if prefix == 0 {
            return Err(M3Error::InvalidArgument("empty prefix: no visual or question tokens".into()));
        }
        let len = prefix + answer_prefix.len();
        if len > cfg.max_seq {
            return Err(M3Error::SequenceOverflow { len, max: cfg.max_seq });
        }
        Ok(prefix)
    }

    /// Logits for every answer position: row `j` is the distribution of answer
    /// token `j` given the visual tokens, the question and `answer_prefix[..j]`.
    /// Returns `(answer_prefix.len() + 1) × V`.
    pub fn forward(&self, visual: ArrayView2<F>, question: &[u32], answer_prefix: &[u32]) -> Result<Array2<F>> {
        Ok(self.forward_cached(visual, question, answer_prefix)?.0)
    }

    pub(crate) fn forward_cached(
        &self,
        visual: ArrayView2<F>,
        question: &[u32],
        answer_prefix: &[u32],
    ) -> Result<(Array2<F>, ForwardCache<F>)> {
        let prefix = self.check_inputs(visual, question, answer_prefix)?;
        let cfg = self.config();
        let n_visual = visual.nrows();
        let text: Vec<u32> = question.iter().chain(answer_prefix).copied().collect();
        let n = n_visual + text.len();

        let mut x = Array2::zeros((n, cfg.width));
        if n_visual > 0 {
            x.slice_mut(s![..n_visual, ..]).assign(&linear(visual, &self.projector_w, &self.projector_b));
        }
        for (i, &t) in text.iter().enumerate() {
            x.row_mut(n_visual + i).assign(&self.token_embedding.row(t as usize));
        }
        x += &self.position_embedding.slice(s![..n, ..]);

        let mut blocks = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (next, cache) = block_forward(blk, &x, cfg.heads);
            x = next;
            blocks.push(cache);
        }
        let final_in_rows = prefix - 1;
        let (hf, ln_final) = layer_norm(x.slice(s![final_in_rows.., ..]), &self.final_norm_g, &self.final_norm_b);
        let logits = linear(hf.view(), &self.head_w, &self.head_b);
        Ok((logits, ForwardCache { n_visual, text, blocks, final_in_rows, ln_final, hf }))
    }

    /// Backpropagates `dlogits` (same shape as the forward logits) into `grad`
    /// and returns the gradient with respect to the (unprojected) visual tokens.
    pub(crate) fn backward(
        &self,
        visual: ArrayView2<F>,
        cache: &ForwardCache<F>,
        dlogits: ArrayView2<F>,
        grad: &mut ModelParams<F>,
    ) -> Array2<F> {
        let cfg = self.config();
        let n = cache.n_visual + cache.text.len();
        grad.head_b += &dlogits.sum_axis(Axis(0));
        accumulate_at_b(&mut grad.head_w, cache.hf.view(), dlogits);
        let dhf = dlogits.dot(&self.head_w.t());
        let dfinal = layer_norm_backward(
            dhf.view(),
            &cache.ln_final,
            &self.final_norm_g,
            &mut grad.final_norm_g,
            &mut grad.final_norm_b,
        );
        let mut dx = Array2::zeros((n, cfg.width));
        dx.slice_mut(s![cache.final_in_rows.., ..]).assign(&dfinal);
        for ((blk, bc), gblk) in self.blocks.iter().zip(&cache.blocks).zip(grad.blocks.iter_mut()).rev() {
            dx = block_backward(blk, bc, dx, gblk, cfg.heads);
        }
        {
            let mut pos = grad.position_embedding.slice_mut(s![..n, ..]);
            pos += &dx;
        }
        for (i, &t) in cache.text.iter().enumerate() {
            let mut row = grad.token_embedding.row_mut(t as usize);
            row += &dx.row(cache.n_visual + i);
        }
        let dproj = dx.slice(s![..cache.n_visual, ..]);
        grad.projector_b += &dproj.sum_axis(Axis(0));
        accumulate_at_b(&mut grad.projector_w, visual, dproj);
        dproj.dot(&self.projector_w.t())
    }

    /// Teacher-forced `-log P(answer | visual, question)`, summed over answer tokens.
    pub fn nll(&self, visual: ArrayView2<F>, question: &[u32], answer: &[u32]) -> Result<F> {
        let prefix = split_answer(answer)?;
        let logits = self.forward(visual, question, prefix)?;
        let per_token = token_nll(logits.view(), answer)?;
        Ok(per_token.iter().copied().sum())
    }

    /// Per-answer-token negative log-probabilities.
    pub fn token_nlls(&self, visual: ArrayView2<F>, question: &[u32], answer: &[u32]) -> Result<Vec<F>> {
        let prefix = split_answer(answer)?;
        let logits = self.forward(visual, question, prefix)?;
        token_nll(logits.view(), answer)
    }

    /// `nll` plus its gradient, accumulated into `grad` with weight `weight`.
    /// Returns the unweighted loss and `weight · ∂nll/∂visual`.
    pub fn nll_grad_into(
        &self,
        visual: ArrayView2<F>,
        question: &[u32],
        answer: &[u32],
        weight: F,
        grad: &mut ModelParams<F>,
    ) -> Result<(F, Array2<F>)> {
        let prefix = split_answer(answer)?;
        let (logits, cache) = self.forward_cached(visual, question, prefix)?;
        let (loss, mut dlogits) = softmax_xent(logits.view(), answer)?;
        dlogits.mapv_inplace(|v| v * weight);
        let dvisual = self.backward(visual, &cache, dlogits.view(), grad);
        Ok((loss, dvisual))
    }

    /// Gradient of `nll` with respect to every parameter.
    pub fn grad(&self, visual: ArrayView2<F>, question: &[u32], answer: &[u32]) -> Result<(F, ModelParams<F>)> {
        let mut g = self.zeros_like();
        let (loss, _) = self.nll_grad_into(visual, question, answer, F::one(), &mut g)?;
        Ok((loss, g))
    }

    /// Greedy decoding; stops after emitting the end token or `max_len` tokens.
    /// Ties go to the lowest token id.
    pub fn generate(&self, visual: ArrayView2<F>, question: &[u32], max_len: usize) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(max_len);
        while out.len() < max_len {
            let logits = self.forward(visual, question, &out)?;
            let next = argmax(logits.row(logits.nrows() - 1).iter().copied());
            out.push(next);
            if next == self.config().end_token {
                break;
            }
        }
        Ok(out)
    }
}

fn split_answer(answer: &[u32]) -> Result<&[u32]> {
    if answer.is_empty() {
        return Err(M3Error::InvalidArgument("answer must contain at least one token".into()));
    }
    Ok(&answer[..answer.len() - 1])
}

pub(crate) fn argmax<F: Real>(values: impl Iterator<Item = F>) -> u32 {
    let mut best = 0u32;
    let mut best_v = F::neg_infinity();
    for (i, v) in values.enumerate() {
        if v > best_v {
            best_v = v;
            best = i as u32;
        }
    }
    best
}

fn log_sum_exp<F: Real>(row: impl Iterator<Item = F> + Clone) -> F {
    let max = row.clone().fold(F::neg_infinity(), |m, v| m.max(v));
    max + row.map(|v| (v - max).exp()).sum::<F>().ln()
}

fn token_nll<F: Real>(logits: ArrayView2<F>, targets: &[u32]) -> Result<Vec<F>> {
    let mut out = Vec::with_capacity(targets.len());
    for (row, &t) in logits.rows().into_iter().zip(targets) {
        if t as usize >= row.len() {
            return Err(M3Error::InvalidArgument(format!("answer token {t} outside vocabulary")));
        }
        out.push(log_sum_exp(row.iter().copied()) - row[t as usize]);
    }
    Ok(out)
}

/// Summed cross-entropy and its gradient with respect to the logits.
fn softmax_xent<F: Real>(logits: ArrayView2<F>, targets: &[u32]) -> Result<(F, Array2<F>)> {
    let losses = token_nll(logits, targets)?;
    let mut d = logits.to_owned();
    for (mut row, &t) in d.rows_mut().into_iter().zip(targets) {
        let lse = log_sum_exp(row.iter().copied());
        row.mapv_inplace(|v| (v - lse).exp());
        row[t as usize] = row[t as usize] - F::one();
    }
    Ok((losses.into_iter().sum(), d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy_lmm::ModelConfig;
    use ndarray::Array2;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab: 11,
            width: 8,
            heads: 2,
            layers: 2,
            max_seq: 24,
            encoder_grid: 2,
            patch_size: 1,
            image_channels: 2,
            visual_channels: 3,
            end_token: 1,
        }
    }

    fn visual(n: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, c), |(i, j)| ((i * 7 + j * 3) as f64 * 0.37).sin())
    }

    #[test]
    fn gelu_derivative_matches_secant() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.3, 2.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn forward_shape_and_overflow() {
        let p = ModelParams::<f64>::init(&tiny(), 3).unwrap();
        let v = visual(4, 3);
        let logits = p.forward(v.view(), &[2, 3], &[4, 5]).unwrap();
        assert_eq!(logits.dim(), (3, 11));
        let long = vec![2u32; 30];
        assert!(matches!(p.forward(v.view(), &long, &[]), Err(M3Error::SequenceOverflow { .. })));
        assert!(p.forward(v.view(), &[99], &[]).is_err());
        assert!(p.forward(visual(4, 2).view(), &[2], &[]).is_err());
    }

    #[test]
    fn probabilities_normalize() {
        let p = ModelParams::<f64>::init(&tiny(), 5).unwrap();
        let logits = p.forward(visual(4, 3).view(), &[2, 3], &[7, 8, 9]).unwrap();
        for row in logits.rows() {
            let lse = log_sum_exp(row.iter().copied());
            let total: f64 = row.iter().map(|&z| (z - lse).exp()).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn two_class_example() {
        let logits = ndarray::arr2(&[[3f64.ln(), 0.0]]);
        let l = token_nll(logits.view(), &[0]).unwrap();
        assert!((l[0] - (1.0f64 + 1.0 / 3.0).ln()).abs() < 1e-12);
        assert!((l[0] - 0.2877).abs() < 1e-4);
    }

    #[test]
    fn empty_answer_is_an_error() {
        let p = ModelParams::<f64>::init(&tiny(), 5).unwrap();
        assert!(p.nll(visual(1, 3).view(), &[2], &[]).is_err());
    }

    #[test]
    fn generate_zero_len_is_empty() {
        let p = ModelParams::<f64>::init(&tiny(), 5).unwrap();
        assert!(p.generate(visual(4, 3).view(), &[2], 0).unwrap().is_empty());
    }

    #[test]
    fn generate_constant_argmax() {
        let mut p = ModelParams::<f64>::init(&tiny(), 5).unwrap();
        p.head_w.fill(0.0);
        p.head_b.fill(0.0);
        p.head_b[7] = 5.0;
        let out = p.generate(visual(4, 3).view(), &[2], 6).unwrap();
        assert_eq!(out, vec![7; 6]);
        // tie between 3 and 7 goes to 3
        p.head_b[3] = 5.0;
        assert_eq!(p.generate(visual(4, 3).view(), &[2], 2).unwrap(), vec![3, 3]);
    }

    #[test]
    fn generate_stops_at_end_token() {
        let mut p = ModelParams::<f64>::init(&tiny(), 5).unwrap();
        p.head_w.fill(0.0);
        p.head_b.fill(0.0);
        p.head_b[1] = 1.0;
        assert_eq!(p.generate(visual(2, 3).view(), &[2], 5).unwrap(), vec![1]);
    }

    #[test]
    fn unused_positions_get_zero_gradient() {
        let p = ModelParams::<f64>::init(&tiny(), 8).unwrap();
        let (_, g) = p.grad(visual(4, 3).view(), &[2, 3], &[4, 5]).unwrap();
        let used = 4 + 2 + 1;
        for r in used..p.config().max_seq {
            assert!(g.position_embedding.row(r).iter().all(|&v| v == 0.0));
        }
        assert!(g.position_embedding.row(0).iter().any(|&v| v != 0.0));
        // token ids that never appear get nothing
        assert!(g.token_embedding.row(10).iter().all(|&v| v == 0.0));
    }
}
