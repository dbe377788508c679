//! Analytic compute and memory cost model for a transformer forward pass.
//!
//! Operation counts are exact integers. Iteration time is linear in the
//! forward size through a calibrated pivot point `(S_pf, T_pf)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating-point operation count.
pub type Flops = u128;

/// Operations of the fully connected layers of one transformer layer:
/// QKV (3) + attention output (1) + FC1 (4) + FC2 (4), each `2·S_f·H²`.
pub fn fcl_ops(forward_size: u64, hidden_size: u64) -> Flops {
    let (s, h) = (forward_size as u128, hidden_size as u128);
    24 * s * h * h
}

/// Attention score and value products of one layer: `4·S_f²·H`.
pub fn attention_ops(forward_size: u64, hidden_size: u64) -> Flops {
    let (s, h) = (forward_size as u128, hidden_size as u128);
    4 * s * s * h
}

/// Total operations of one layer, `24·S_f·H²·(1 + S_f/(6H))`.
///
/// Evaluated in the factored integer form `4·S_f·H·(6H + S_f)` so that it
/// equals `fcl_ops + attention_ops` exactly.
pub fn layer_ops(forward_size: u64, hidden_size: u64) -> Flops {
    let (s, h) = (forward_size as u128, hidden_size as u128);
    4 * s * h * (6 * h + s)
}

/// Transformer cost parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub hidden_size: u64,
    pub num_layers: u64,
    /// Forward size at which GPU throughput saturates (tokens).
    pub pivot_forward_size: usize,
    /// Batch execution time at the pivot forward size (seconds).
    pub pivot_time: f64,
    pub bytes_per_element: u64,
    /// Constant per-iteration overhead (seconds).
    pub fixed_overhead: f64,
}

impl ModelProfile {
    /// OPT-13B-like shape with a pivot of 768 tokens. `pivot_time` is a
    /// calibration value for an A100-class GPU, not a measured figure.
    pub fn opt_13b_like() -> Self {
        ModelProfile {
            hidden_size: 5120,
            num_layers: 40,
            pivot_forward_size: 768,
            pivot_time: 0.1,
            bytes_per_element: 2,
            fixed_overhead: 0.0,
        }
    }

    /// OPT-175B-like shape with a pivot of 1280 tokens.
    pub fn opt_175b_like() -> Self {
        ModelProfile {
            hidden_size: 12288,
            num_layers: 96,
            pivot_forward_size: 1280,
            pivot_time: 0.25,
            bytes_per_element: 2,
            fixed_overhead: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_size < 1 {
            return Err(Error::validation("hidden_size", "must be >= 1"));
        }
        if self.num_layers < 1 {
            return Err(Error::validation("num_layers", "must be >= 1"));
        }
        if self.pivot_forward_size < 1 {
            return Err(Error::validation("pivot_forward_size", "must be >= 1"));
        }
        if !(self.pivot_time > 0.0 && self.pivot_time.is_finite()) {
            return Err(Error::validation("pivot_time_s", "must be > 0"));
        }
        if !(self.fixed_overhead >= 0.0 && self.fixed_overhead.is_finite()) {
            return Err(Error::validation("fixed_overhead_s", "must be >= 0"));
        }
        if self.bytes_per_element < 1 {
            return Err(Error::validation("bytes_per_element", "must be >= 1"));
        }
        Ok(())
    }

    /// Worst-case batch execution time: one iteration at the pivot size.
    pub fn max_batch_time(&self) -> f64 {
        iteration_time(self.pivot_forward_size, self)
    }

    /// Operations to generate one token across all layers.
    pub fn ops_per_token(&self) -> Flops {
        layer_ops(1, self.hidden_size) * self.num_layers as u128
    }
}

/// Hardware parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpuProfile {
    /// Peak FLOP/s of the device.
    pub peak_flops: f64,
    /// Fraction of peak reached at saturation, in (0, 1].
    pub saturation_efficiency: f64,
    /// Total KV-cache capacity in tokens.
    pub kvc_capacity_tokens: usize,
}

impl GpuProfile {
    pub fn a100_like() -> Self {
        GpuProfile {
            peak_flops: 312e12,
            saturation_efficiency: 0.6,
            kvc_capacity_tokens: 131_072,
        }
    }

    pub fn validate(&self, block_size: usize) -> Result<()> {
        if !(self.peak_flops > 0.0 && self.peak_flops.is_finite()) {
            return Err(Error::validation("peak_flops", "must be > 0"));
        }
        if !(self.saturation_efficiency > 0.0 && self.saturation_efficiency <= 1.0) {
            return Err(Error::validation(
                "saturation_efficiency",
                "must lie in (0, 1]",
            ));
        }
        if self.kvc_capacity_tokens < block_size {
            return Err(Error::validation(
                "kvc_capacity_tokens",
                format!("must hold at least one block of {block_size} tokens"),
            ));
        }
        Ok(())
    }
}

/// KV-cache bytes per token: K and V, for every layer, `H` elements each.
pub fn kvc_bytes_per_token(profile: &ModelProfile) -> u64 {
    2 * profile.bytes_per_element * profile.num_layers * profile.hidden_size
}

/// Execution time of one iteration with `forward_size` input tokens.
pub fn iteration_time(forward_size: usize, profile: &ModelProfile) -> f64 {
    profile.fixed_overhead
        + profile.pivot_time * (forward_size as f64 / profile.pivot_forward_size as f64)
}

/// Time to process a prompt alone, in pivot-sized chunks.
pub fn prefill_latency(prompt_len: usize, profile: &ModelProfile) -> f64 {
    let chunks = prompt_len.div_ceil(profile.pivot_forward_size);
    chunks as f64 * profile.fixed_overhead
        + profile.pivot_time * (prompt_len as f64 / profile.pivot_forward_size as f64)
}

/// Pivot forward size from hardware throughput: `⌊eff·X / x⌋` with `x` the
/// per-token operation count of the whole model.
pub fn derive_pivot(hidden_size: u64, num_layers: u64, gpu: &GpuProfile) -> Result<usize> {
    let per_token = layer_ops(1, hidden_size) * num_layers as u128;
    pivot_from_per_token_ops(per_token as f64, gpu)
}

pub(crate) fn pivot_from_per_token_ops(per_token_ops: f64, gpu: &GpuProfile) -> Result<usize> {
    if per_token_ops <= 0.0 {
        return Err(Error::Config(
            "per-token operation count is zero; hidden_size and num_layers must be >= 1".into(),
        ));
    }
    let pivot = (gpu.saturation_efficiency * gpu.peak_flops / per_token_ops).floor();
    if pivot < 1.0 {
        return Err(Error::Config(format!(
            "derived pivot forward size {pivot} is below one token"
        )));
    }
    Ok(pivot as usize)
}

/// Pivot time from the operation count at the pivot divided by the
/// saturated throughput `eff·X`.
pub fn derive_pivot_time(
    hidden_size: u64,
    num_layers: u64,
    pivot_forward_size: usize,
    gpu: &GpuProfile,
) -> f64 {
    let ops = layer_ops(pivot_forward_size as u64, hidden_size) * num_layers as u128;
    ops as f64 / (gpu.saturation_efficiency * gpu.peak_flops)
}
