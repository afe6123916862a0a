use serde::{Deserialize, Serialize};

use super::PreprocessError;
use crate::dataset::LAYOUT_SLOTS;

/// Number of distinct codes: each of the six slots takes one of 7 values.
pub const LAYOUT_CODE_COUNT: u32 = 117_649;

/// Base-7 codes for the output, input and kernel layouts of one node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CompressedLayout(pub [u32; 3]);

/// Packs a `-1..=5` slot vector into one integer, slot 0 least significant:
/// `sum_k (v[k] + 1) * 7^k`.
pub fn compress_layout(v: &[i8; LAYOUT_SLOTS]) -> Result<u32, PreprocessError> {
    let mut code = 0u32;
    for &slot in v.iter().rev() {
        if !(-1..=5).contains(&slot) {
            return Err(PreprocessError::LayoutSlot(slot));
        }
        code = code * 7 + (slot + 1) as u32;
    }
    Ok(code)
}

pub fn decompress_layout(mut code: u32) -> Result<[i8; LAYOUT_SLOTS], PreprocessError> {
    if code >= LAYOUT_CODE_COUNT {
        return Err(PreprocessError::CodeOutOfRange(code));
    }
    let mut out = [0i8; LAYOUT_SLOTS];
    for slot in &mut out {
        *slot = (code % 7) as i8 - 1;
        code /= 7;
    }
    Ok(out)
}
