use serde::{Deserialize, Serialize};

/// One optimizer step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub wall_seconds: f64,
    pub forward_flops: u64,
    pub backward_flops: u64,
    /// Forward FLOPs spent inside the attention core.
    pub attention_flops: u64,
    /// High-water mark of tape allocations during the step.
    pub peak_bytes: u64,
    pub loss: f64,
    pub tokens: u64,
}

impl StepMetrics {
    pub fn flops(&self) -> u64 {
        self.forward_flops + self.backward_flops
    }
}

/// One training epoch. Optional fields are `None` when the host cannot supply them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub wall_seconds: f64,
    pub mean_loss: f64,
    pub energy_joules: Option<f64>,
    pub mean_watts: Option<f64>,
    pub cpu_process_seconds: Option<f64>,
    pub disk_bytes_read: Option<u64>,
    pub disk_bytes_written: Option<u64>,
    pub device_utilization: Option<f64>,
    pub steps: usize,
    pub flops: u64,
    pub peak_bytes: u64,
    pub tokens: u64,
}
