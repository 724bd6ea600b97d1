//! Offload cost accounting.
//!
//! Transfers are modeled, not executed. The full cache lives in host memory
//! by default; a verification step that reads it pays `bytes / bandwidth`
//! plus a fixed latency per layer prefetch. The partial view and the draft
//! cache stay on device and cost nothing to read.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OffloadCostModel {
    pub bandwidth_bytes_per_s: f64,
    pub per_transfer_latency_s: f64,
    /// Host-resident caches pay transfer cost; device-resident ones do not.
    pub full_cache_on_device: bool,
    pub partial_cache_on_device: bool,
    pub draft_cache_on_device: bool,
}

impl Default for OffloadCostModel {
    fn default() -> Self {
        OffloadCostModel {
            bandwidth_bytes_per_s: 16e9,
            per_transfer_latency_s: 10e-6,
            full_cache_on_device: false,
            partial_cache_on_device: true,
            draft_cache_on_device: true,
        }
    }
}

/// What one verification step touched.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct StepCost {
    pub tokens_in_step: usize,
    /// Bytes read from the full cache (zero for partial verification).
    pub full_cache_bytes_touched: u64,
    /// Prefetches issued when the full cache is read, one per layer.
    pub layer_transfers: usize,
}

/// Modeled wall time of one step: compute plus any host transfers.
pub fn modeled_step_time(step: &StepCost, cost: &OffloadCostModel, compute_time_s: f64) -> f64 {
    let mut time = compute_time_s;
    if step.full_cache_bytes_touched > 0 && !cost.full_cache_on_device {
        time += step.full_cache_bytes_touched as f64 / cost.bandwidth_bytes_per_s;
        time += cost.per_transfer_latency_s * step.layer_transfers as f64;
    }
    time
}
