use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Mask;

/// Cross-stream attention restriction for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskType {
    #[default]
    None,
    /// Pixel queries may not attend to semantic keys.
    SemanticToPixel,
    /// Neither stream attends to the other.
    Bidirectional,
}

/// Token layout `[pixels | semantics]` plus the blocked quadrants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionMaskSpec {
    pub n_pixel: usize,
    pub n_semantic: usize,
    /// Pixel-query rows lose the semantic-key columns.
    pub block_pixel_from_semantic: bool,
    /// Semantic-query rows lose the pixel-key columns.
    pub block_semantic_from_pixel: bool,
}

impl AttentionMaskSpec {
    pub fn new(n_pixel: usize, n_semantic: usize, mask: MaskType) -> Self {
        Self {
            n_pixel,
            n_semantic,
            block_pixel_from_semantic: mask != MaskType::None,
            block_semantic_from_pixel: mask == MaskType::Bidirectional,
        }
    }

    pub fn len(&self) -> usize {
        self.n_pixel + self.n_semantic
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn allowed(&self, row: usize, col: usize) -> bool {
        let (qp, kp) = (row < self.n_pixel, col < self.n_pixel);
        match (qp, kp) {
            (true, false) => !self.block_pixel_from_semantic,
            (false, true) => !self.block_semantic_from_pixel,
            _ => true,
        }
    }
}

/// `true` marks an attendable (query, key) pair.
pub fn build_mask(spec: &AttentionMaskSpec) -> Result<Mask> {
    if spec.n_pixel == 0 || spec.n_semantic == 0 {
        return Err(Error::Invalid(format!("mask needs tokens in both streams, got {spec:?}")));
    }
    let l = spec.len();
    let data = (0..l * l).map(|i| spec.allowed(i / l, i % l)).collect();
    Mask::new(&[l, l], data)
}

/// Expands per-sample masks to the `[B·heads, L, L]` attention layout.
/// Returns `None` when no sample is masked.
pub(crate) fn batch_mask(
    masks: &[MaskType],
    heads: usize,
    n_pixel: usize,
    n_semantic: usize,
) -> Result<Option<Mask>> {
    if masks.iter().all(|&m| m == MaskType::None) {
        return Ok(None);
    }
    let l = n_pixel + n_semantic;
    let mut data = Vec::with_capacity(masks.len() * heads * l * l);
    for &m in masks {
        let one = build_mask(&AttentionMaskSpec::new(n_pixel, n_semantic, m))?;
        for _ in 0..heads {
            data.extend_from_slice(one.data());
        }
    }
    Mask::new(&[masks.len() * heads, l, l], data).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(m: &Mask) -> Vec<Vec<bool>> {
        let n = m.shape()[1];
        m.data().chunks(n).map(<[bool]>::to_vec).collect()
    }

    #[test]
    fn none_is_all_true() {
        let m = build_mask(&AttentionMaskSpec::new(3, 2, MaskType::None)).unwrap();
        assert!(m.data().iter().all(|&b| b));
    }

    #[test]
    fn semantic_to_pixel_blocks_one_quadrant() {
        let m = build_mask(&AttentionMaskSpec::new(2, 2, MaskType::SemanticToPixel)).unwrap();
        let t = true;
        let f = false;
        assert_eq!(grid(&m), vec![vec![t, t, f, f], vec![t, t, f, f], vec![t; 4], vec![t; 4]]);
    }

    #[test]
    fn bidirectional_blocks_both_cross_quadrants() {
        let m = build_mask(&AttentionMaskSpec::new(2, 2, MaskType::Bidirectional)).unwrap();
        let t = true;
        let f = false;
        assert_eq!(
            grid(&m),
            vec![vec![t, t, f, f], vec![t, t, f, f], vec![f, f, t, t], vec![f, f, t, t]]
        );
    }

    #[test]
    fn empty_stream_rejected() {
        assert!(build_mask(&AttentionMaskSpec::new(0, 2, MaskType::None)).is_err());
    }

    #[test]
    fn batch_mask_layout() {
        assert!(batch_mask(&[MaskType::None; 3], 2, 2, 2).unwrap().is_none());
        let m = batch_mask(&[MaskType::None, MaskType::Bidirectional], 2, 1, 1)
            .unwrap()
            .unwrap();
        assert_eq!(m.shape(), &[4, 2, 2]);
        assert!(m.data()[..8].iter().all(|&b| b));
        assert_eq!(&m.data()[8..12], &[true, false, false, true]);
    }
}
