//! Chiplet GPU description and the hardware's default workgroup dispatch.

use serde::{Deserialize, Serialize};
use thiserror::Error;

const MI300X_LIKE: &str = include_str!("../presets/mi300x-like.json");

/// How the hardware assigns launch program IDs to XCDs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DispatchPolicy {
    /// Launch pid `i` runs on XCD `i mod num_xcds`.
    #[default]
    RoundRobinXcd,
}

impl DispatchPolicy {
    pub fn describe(&self) -> &'static str {
        match self {
            DispatchPolicy::RoundRobinXcd => "Round-robin to XCDs",
        }
    }
}

/// A disaggregated GPU: `num_xcds` chiplets, each with its own CUs and L2.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub name: String,
    pub num_xcds: u32,
    pub cus_per_xcd: u32,
    pub l2_bytes_per_xcd: u64,
    pub l2_line_bytes: u64,
    pub l2_associativity: u32,
    /// Maximum concurrently resident workgroups per CU.
    pub wg_slots_per_cu: u32,
    #[serde(default)]
    pub dispatch: DispatchPolicy,
}

#[derive(Debug, Error)]
pub enum ArchError {
    #[error("malformed arch document: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("invalid arch field `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("unknown arch preset `{0}` (available: mi300x-like)")]
    UnknownPreset(String),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ArchError {
    ArchError::Invalid {
        field,
        reason: reason.into(),
    }
}

impl ArchSpec {
    /// The bundled 8-XCD preset with CDNA3-class CU count and L2 geometry.
    pub fn mi300x_like() -> Self {
        load_arch_spec(MI300X_LIKE).expect("bundled preset is valid")
    }

    pub fn preset(name: &str) -> Result<Self, ArchError> {
        match name {
            "mi300x-like" | "mi300x" => Ok(Self::mi300x_like()),
            other => Err(ArchError::UnknownPreset(other.to_string())),
        }
    }

    pub fn validate(&self) -> Result<(), ArchError> {
        if self.num_xcds == 0 {
            return Err(invalid("num_xcds", "must be at least 1"));
        }
        if self.cus_per_xcd == 0 {
            return Err(invalid("cus_per_xcd", "must be at least 1"));
        }
        if self.wg_slots_per_cu == 0 {
            return Err(invalid("wg_slots_per_cu", "must be at least 1"));
        }
        if self.l2_associativity == 0 {
            return Err(invalid("l2_associativity", "must be at least 1"));
        }
        if !self.l2_line_bytes.is_power_of_two() {
            return Err(invalid(
                "l2_line_bytes",
                format!("{} is not a power of two", self.l2_line_bytes),
            ));
        }
        if self.l2_bytes_per_xcd == 0 || !self.l2_bytes_per_xcd.is_multiple_of(self.l2_line_bytes) {
            return Err(invalid(
                "l2_bytes_per_xcd",
                format!(
                    "{} is not a positive multiple of the line size {}",
                    self.l2_bytes_per_xcd, self.l2_line_bytes
                ),
            ));
        }
        let lines = self.l2_bytes_per_xcd / self.l2_line_bytes;
        if !lines.is_multiple_of(u64::from(self.l2_associativity)) {
            return Err(invalid(
                "l2_associativity",
                format!("{lines} lines do not divide into {}-way sets", self.l2_associativity),
            ));
        }
        Ok(())
    }

    pub fn l2_sets(&self) -> u64 {
        self.l2_bytes_per_xcd / (self.l2_line_bytes * u64::from(self.l2_associativity))
    }

    pub fn l2_megabytes(&self) -> f64 {
        self.l2_bytes_per_xcd as f64 / (1024.0 * 1024.0)
    }

    pub fn with_num_xcds(mut self, num_xcds: u32) -> Self {
        self.num_xcds = num_xcds;
        self
    }

    pub fn with_l2_bytes(mut self, bytes: u64) -> Self {
        self.l2_bytes_per_xcd = bytes;
        self
    }
}

/// Round-robin placement of a launch pid.
pub fn default_xcd_assignment(launch_pid: u64, arch: &ArchSpec) -> u32 {
    (launch_pid % u64::from(arch.num_xcds)) as u32
}

/// Workgroups an XCD can hold at once.
pub fn concurrent_slots_per_xcd(arch: &ArchSpec) -> u32 {
    arch.cus_per_xcd * arch.wg_slots_per_cu
}

/// Parses a JSON arch document and checks its invariants.
pub fn load_arch_spec(document: &str) -> Result<ArchSpec, ArchError> {
    let spec: ArchSpec = serde_json::from_str(document)?;
    spec.validate()?;
    Ok(spec)
}
