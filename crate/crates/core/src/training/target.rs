//! Population-code training targets.

use crate::error::{Error, Result};
use crate::{OUTPUT_WIDTH, ROI_SIDE};

pub const PEAK: f64 = 1.0;
pub const NEIGHBOR: f64 = 0.5;

/// 1.0 at the true pixel of each population, 0.5 on its in-range
/// neighbors, zero elsewhere.
pub fn encode_target(local: (u32, u32)) -> Result<Vec<f64>> {
    let side = ROI_SIDE as u32;
    if local.0 >= side || local.1 >= side {
        return Err(Error::InvalidArgument(format!("target ({}, {}) outside the {side}x{side} region", local.0, local.1)));
    }
    let mut target = vec![0.0; OUTPUT_WIDTH];
    for (offset, p) in [(0, local.0 as usize), (ROI_SIDE, local.1 as usize)] {
        target[offset + p] = PEAK;
        if p > 0 {
            target[offset + p - 1] = NEIGHBOR;
        }
        if p + 1 < ROI_SIDE {
            target[offset + p + 1] = NEIGHBOR;
        }
    }
    Ok(target)
}
