//! Binary weight masks and sparsity metrics.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Shape4;

/// Binary tensor shaped like one layer's weights; 0 marks a pruned weight.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mask {
    shape: Shape4,
    bits: Vec<u8>,
}

impl Mask {
    pub fn ones(shape: Shape4) -> Self {
        Mask { shape, bits: vec![1; shape.len()] }
    }

    pub fn from_bits(shape: Shape4, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != shape.len() {
            return Err(shape_err!("{} mask bits for shape {shape}", bits.len()));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(invalid!("mask values must be 0 or 1"));
        }
        Ok(Mask { shape, bits })
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn kept(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn pruned(&self) -> usize {
        self.len() - self.kept()
    }

    /// `(size − Σ mask) / size`.
    pub fn sparsity(&self) -> Result<f64> {
        if self.is_empty() {
            return Err(invalid!("sparsity of an empty mask"));
        }
        Ok(self.pruned() as f64 / self.len() as f64)
    }

    /// θ ← θ ⊙ M.
    pub fn apply<T: Scalar>(&self, weights: &mut [T]) -> Result<()> {
        if weights.len() != self.bits.len() {
            return Err(shape_err!("{} weights for mask of shape {}", weights.len(), self.shape));
        }
        for (w, &b) in weights.iter_mut().zip(&self.bits) {
            if b == 0 {
                *w = T::zero();
            }
        }
        Ok(())
    }

    /// One bit per weight, least significant bit first.
    pub fn pack(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, &b) in self.bits.iter().enumerate() {
            out[i / 8] |= b << (i % 8);
        }
        out
    }

    pub fn unpack(shape: Shape4, packed: &[u8]) -> Result<Self> {
        let n = shape.len();
        if packed.len() != n.div_ceil(8) {
            return Err(Error::Corrupt(format!("{} packed bytes for {n} mask bits", packed.len())));
        }
        if n % 8 != 0 && packed[n / 8] >> (n % 8) != 0 {
            return Err(Error::Corrupt("stray bits after the mask end".into()));
        }
        let bits = (0..n).map(|i| (packed[i / 8] >> (i % 8)) & 1).collect();
        Ok(Mask { shape, bits })
    }
}

/// θ ← θ ⊙ M for one layer.
pub fn apply_mask<T: Scalar>(weights: &mut [T], mask: &Mask) -> Result<()> {
    mask.apply(weights)
}

pub fn layer_sparsity(mask: &Mask) -> Result<f64> {
    mask.sparsity()
}

/// `Σ size_j·sparsity_j / Σ size_j`.
pub fn weighted_sparsity(masks: &[Mask]) -> f64 {
    let total: usize = masks.iter().map(Mask::len).sum();
    if total == 0 {
        return 0.0;
    }
    masks.iter().map(Mask::pruned).sum::<usize>() as f64 / total as f64
}
