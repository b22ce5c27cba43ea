//! Test-only oracles, written independently of the library's matrix code:
//! a loop-based transformer forward pass and finite-difference helpers.
#![allow(dead_code)]

use m3_core::toy_lmm::{ModelConfig, ModelParams, PixelImage};
use m3_core::training::Example;

/// d = 8, two layers, 6×6 encoder grid (schedule [1, 9, 36]).
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab: 16,
        width: 8,
        heads: 2,
        layers: 2,
        max_seq: 48,
        encoder_grid: 6,
        patch_size: 1,
        image_channels: 3,
        visual_channels: 4,
        end_token: 1,
    }
}

pub fn tiny_example(seed: u64) -> Example {
    let cfg = tiny_config();
    let side = cfg.image_side();
    let mut image = PixelImage::zeros(side, side, cfg.image_channels);
    for (i, v) in image.data.iter_mut().enumerate() {
        *v = (((i as u64 + 1) * (seed * 2 + 7919)) % 97) as f32 / 97.0;
    }
    Example { image, question: vec![2, 5, 9], answer: vec![7, 3, 1] }
}

/// Params with non-trivial norms and biases so every group matters.
pub fn perturbed_params(seed: u64) -> ModelParams<f64> {
    let mut p = ModelParams::<f64>::init(&tiny_config(), seed).unwrap();
    let mut k = 0u64;
    for s in p.slices_mut() {
        for v in s.iter_mut() {
            k += 1;
            let jitter = (((k * 2654435761 + seed) % 1000) as f64 / 1000.0 - 0.5) * 0.2;
            *v += jitter;
        }
    }
    p
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// y = x W + b with W stored row-major `in × out`.
fn affine(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    (0..out)
        .map(|j| b[j] + x.iter().enumerate().map(|(i, xi)| xi * w[i * out + j]).sum::<f64>())
        .collect()
}

fn norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let r = 1.0 / (var + 1e-5).sqrt();
    x.iter().enumerate().map(|(i, v)| (v - mean) * r * g[i] + b[i]).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn sl(a: &ndarray::Array2<f64>) -> &[f64] {
    a.as_slice().unwrap()
}
fn sv(a: &ndarray::Array1<f64>) -> &[f64] {
    a.as_slice().unwrap()
}

/// Full-sequence logits, one row per position, computed with explicit loops
/// and O(n²·d) attention.
pub fn naive_logits(p: &ModelParams<f64>, visual: &[Vec<f64>], text: &[u32]) -> Vec<Vec<f64>> {
    let cfg = p.config();
    let d = cfg.width;
    let mut xs: Vec<Vec<f64>> = Vec::new();
    for v in visual {
        xs.push(affine(v, sl(&p.projector_w), sv(&p.projector_b)));
    }
    for &t in text {
        xs.push(p.token_embedding.row(t as usize).to_vec());
    }
    for (i, x) in xs.iter_mut().enumerate() {
        for j in 0..d {
            x[j] += p.position_embedding[[i, j]];
        }
    }
    let n = xs.len();
    let hd = d / cfg.heads;
    for blk in &p.blocks {
        let h: Vec<Vec<f64>> = xs.iter().map(|x| norm(x, sv(&blk.ln1_g), sv(&blk.ln1_b))).collect();
        let q: Vec<Vec<f64>> = h.iter().map(|x| affine(x, sl(&blk.wq), sv(&blk.bq))).collect();
        let k: Vec<Vec<f64>> = h.iter().map(|x| affine(x, sl(&blk.wk), sv(&blk.bk))).collect();
        let v: Vec<Vec<f64>> = h.iter().map(|x| affine(x, sl(&blk.wv), sv(&blk.bv))).collect();
        let mut attn = vec![vec![0.0; d]; n];
        for head in 0..cfg.heads {
            let r = head * hd..(head + 1) * hd;
            for i in 0..n {
                let scores: Vec<f64> =
                    (0..=i).map(|j| dot(&q[i][r.clone()], &k[j][r.clone()]) / (hd as f64).sqrt()).collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in r.clone() {
                    attn[i][c] = (0..=i).map(|j| e[j] / z * v[j][c]).sum();
                }
            }
        }
        for i in 0..n {
            let o = affine(&attn[i], sl(&blk.wo), sv(&blk.bo));
            for c in 0..d {
                xs[i][c] += o[c];
            }
            let h2 = norm(&xs[i], sv(&blk.ln2_g), sv(&blk.ln2_b));
            let u: Vec<f64> = affine(&h2, sl(&blk.w1), sv(&blk.b1)).into_iter().map(gelu).collect();
            let f = affine(&u, sl(&blk.w2), sv(&blk.b2));
            for c in 0..d {
                xs[i][c] += f[c];
            }
        }
    }
    xs.iter()
        .map(|x| {
            let h = norm(x, sv(&p.final_norm_g), sv(&p.final_norm_b));
            affine(&h, sl(&p.head_w), sv(&p.head_b))
        })
        .collect()
}

pub fn log_softmax_at(row: &[f64], t: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
    row[t] - m - z.ln()
}

/// −log P(answer | visual, question) built one token at a time: each step
/// reruns the naive model on the growing prefix and reads the last row.
pub fn chain_nll(p: &ModelParams<f64>, visual: &[Vec<f64>], question: &[u32], answer: &[u32]) -> f64 {
    let mut total = 0.0;
    let mut text = question.to_vec();
    for &a in answer {
        let logits = naive_logits(p, visual, &text);
        total -= log_softmax_at(logits.last().unwrap(), a as usize);
        text.push(a);
    }
    total
}

pub fn rows(a: &ndarray::Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Relative error with a small absolute floor for near-zero gradients.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn rel_close(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}
