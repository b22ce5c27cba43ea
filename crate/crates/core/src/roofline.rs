//! Analytic prefill cost model: FLOPs, two-regime roofline latency and memory
//! as functions of the prompt length.
//!
//! * FLOPs: `2·P·n + 4·N·n²·d` (one multiply-accumulate = 2 FLOPs; the
//!   quadratic term covers attention scores and the weighted value sum).
//! * Time: `max(FLOPs / peak, weight bytes / bandwidth)`.
//! * Memory: weights `P·b`, KV cache `2·N·n·d·b`, and an activation estimate
//!   `n·d·b·multiplier + n²·h·b` for one layer's peak.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{M3Error, Result};
use crate::toy_lmm::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RooflineConfig {
    /// Parameter count P.
    pub parameters: f64,
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub bytes_per_param: f64,
    /// Peak compute, FLOP/s.
    pub peak_flops: f64,
    /// Memory bandwidth, bytes/s.
    pub bandwidth: f64,
    /// Live activation tensors of width d per token in the activation estimate.
    pub activation_multiplier: f64,
}

impl Default for RooflineConfig {
    /// 7B decoder (32 layers, width 4096, 32 heads, fp16) on a V100-class device.
    fn default() -> Self {
        Self {
            parameters: 6.74e9,
            layers: 32,
            width: 4096,
            heads: 32,
            bytes_per_param: 2.0,
            peak_flops: 1.25e14,
            bandwidth: 9.0e11,
            activation_multiplier: 16.0,
        }
    }
}

impl RooflineConfig {
    pub fn validate(&self) -> Result<()> {
        let reals = [
            ("parameters", self.parameters),
            ("bytes_per_param", self.bytes_per_param),
            ("peak_flops", self.peak_flops),
            ("bandwidth", self.bandwidth),
            ("activation_multiplier", self.activation_multiplier),
        ];
        if let Some((name, _)) = reals.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(M3Error::Config(format!("roofline.{name} must be positive and finite")));
        }
        if self.layers == 0 || self.width == 0 || self.heads == 0 {
            return Err(M3Error::Config("roofline layers/width/heads must be positive".into()));
        }
        if self.width % self.heads != 0 {
            return Err(M3Error::Config("roofline.width must be divisible by roofline.heads".into()));
        }
        Ok(())
    }

    /// Cost model of the toy transformer, with P counting the matrices that
    /// take part in per-token matmuls (block projections and the output head).
    pub fn for_toy_model(model: &ModelConfig, bytes_per_param: f64, peak_flops: f64, bandwidth: f64) -> Self {
        Self {
            parameters: toy_matmul_parameter_count(model) as f64,
            layers: model.layers,
            width: model.width,
            heads: model.heads,
            bytes_per_param,
            peak_flops,
            bandwidth,
            activation_multiplier: 16.0,
        }
    }
}

/// Total parameter count of [`crate::toy_lmm::ModelParams`] for `model`.
pub fn toy_parameter_count(model: &ModelConfig) -> usize {
    let (d, v, c) = (model.width, model.vocab, model.visual_channels);
    let encoder = model.image_channels * c + c;
    let projector = c * d + d;
    let embeddings = v * d + model.max_seq * d;
    let block = 12 * d * d + 13 * d;
    let head = d * v + v;
    encoder + projector + embeddings + model.layers * block + 2 * d + head
}

/// Weights multiplied against every sequence position: `N·12d² + d·V`.
pub fn toy_matmul_parameter_count(model: &ModelConfig) -> usize {
    model.layers * 12 * model.width * model.width + model.width * model.vocab
}

pub fn prefill_flops(cfg: &RooflineConfig, n_tokens: usize) -> f64 {
    let n = n_tokens as f64;
    2.0 * cfg.parameters * n + 4.0 * cfg.layers as f64 * n * n * cfg.width as f64
}

pub fn weight_bytes(cfg: &RooflineConfig) -> f64 {
    cfg.parameters * cfg.bytes_per_param
}

pub fn compute_bound_time(cfg: &RooflineConfig, n_tokens: usize) -> f64 {
    prefill_flops(cfg, n_tokens) / cfg.peak_flops
}

pub fn memory_bound_time(cfg: &RooflineConfig) -> f64 {
    weight_bytes(cfg) / cfg.bandwidth
}

/// Seconds; whichever of the compute and weight-streaming bounds is larger.
pub fn prefill_time(cfg: &RooflineConfig, n_tokens: usize) -> f64 {
    compute_bound_time(cfg, n_tokens).max(memory_bound_time(cfg))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub weights: f64,
    pub kv_cache: f64,
    pub activation: f64,
    pub total: f64,
}

pub fn memory_report(cfg: &RooflineConfig, n_tokens: usize) -> MemoryReport {
    let n = n_tokens as f64;
    let (d, b) = (cfg.width as f64, cfg.bytes_per_param);
    let weights = weight_bytes(cfg);
    let kv_cache = 2.0 * cfg.layers as f64 * n * d * b;
    let activation = n * d * b * cfg.activation_multiplier + n * n * cfg.heads as f64 * b;
    MemoryReport { weights, kv_cache, activation, total: weights + kv_cache + activation }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub visual_tokens: usize,
    pub sequence_tokens: usize,
    pub flops: f64,
    pub compute_time: f64,
    pub memory_time: f64,
    pub prefill_time: f64,
    pub memory: MemoryReport,
}

pub fn cost_report(cfg: &RooflineConfig, visual_tokens: usize, text_tokens: usize) -> CostReport {
    let n = visual_tokens + text_tokens;
    CostReport {
        visual_tokens,
        sequence_tokens: n,
        flops: prefill_flops(cfg, n),
        compute_time: compute_bound_time(cfg, n),
        memory_time: memory_bound_time(cfg),
        prefill_time: prefill_time(cfg, n),
        memory: memory_report(cfg, n),
    }
}

/// CSV in the prefill cost-table layout: visual tokens, FLOPs in units of
/// 1e12, time in ms, total memory and activation memory in GB (1e9 bytes).
pub fn write_table_csv<W: Write>(out: W, reports: &[CostReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["tokens", "flops_tb", "prefill_time_ms", "total_memory_gb", "storing_activation_gb"])?;
    for r in reports {
        w.write_record(&[
            r.visual_tokens.to_string(),
            format!("{:.2}", r.flops / 1e12),
            format!("{:.2}", r.prefill_time * 1e3),
            format!("{:.2}", r.memory.total / 1e9),
            format!("{:.3}", r.memory.activation / 1e9),
        ])?;
    }
    w.flush()?;
    Ok(())
}
