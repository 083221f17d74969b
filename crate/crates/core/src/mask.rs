//! Random training masks and token substitution.

use ndarray::Array1;
use rand::seq::index::sample;
use rand::Rng;

use crate::error::{AmiError, Result};
use crate::graph::{Graph, Var};
use crate::tokenizer::TokenSequence;

/// Per-token visibility: `true` keeps the token, `false` masks it.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MaskVector {
    bits: Vec<bool>,
}

impl MaskVector {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn all_visible(len: usize) -> Self {
        Self { bits: vec![true; len] }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_visible(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn masked_count(&self) -> usize {
        self.bits.iter().filter(|&&b| !b).count()
    }

    /// Realized masked fraction.
    pub fn ratio(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.masked_count() as f64 / self.len() as f64
        }
    }

    pub fn masked_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| !b).map(|(i, _)| i)
    }

    /// `1.0` for visible tokens, `0.0` for masked ones.
    pub fn keep_factors(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// The all-zero filler token.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskToken {
    value: Array1<f64>,
}

impl MaskToken {
    pub fn zeros(dim: usize) -> Self {
        Self {
            value: Array1::zeros(dim),
        }
    }

    pub fn value(&self) -> &Array1<f64> {
        &self.value
    }
}

/// `round(ratio · len)` with halves rounded up.
pub fn masked_count_for(ratio: f64, len: usize) -> usize {
    ((ratio * len as f64 + 0.5).floor() as usize).min(len)
}

/// Masks exactly `round(ratio · len)` positions chosen uniformly without replacement.
pub fn mask_with_ratio(len: usize, ratio: f64, rng: &mut impl Rng) -> MaskVector {
    let n = masked_count_for(ratio, len);
    let mut bits = vec![true; len];
    for i in sample(rng, len, n) {
        bits[i] = false;
    }
    MaskVector { bits }
}

/// Draws `ρ ~ U[0, 1)` and masks `round(ρ·L)` random positions.
pub fn sample_random_mask(len: usize, rng: &mut impl Rng) -> MaskVector {
    assert!(len >= 1, "mask length must be positive");
    let ratio: f64 = rng.random();
    mask_with_ratio(len, ratio, rng)
}

/// Replaces every masked token of a not-yet-position-embedded sequence with `filler`.
pub fn substitute(seq: &TokenSequence, mask: &MaskVector, filler: &MaskToken) -> Result<TokenSequence> {
    if seq.len() != mask.len() {
        return Err(AmiError::Shape(format!(
            "sequence has {} tokens, mask has {}",
            seq.len(),
            mask.len()
        )));
    }
    if filler.value.len() != seq.dim() {
        return Err(AmiError::Shape(format!(
            "mask token dim {} vs token dim {}",
            filler.value.len(),
            seq.dim()
        )));
    }
    if seq.pos_embedded {
        return Err(AmiError::Contract("substitution must precede positional embedding".into()));
    }
    let mut out = seq.clone();
    for i in mask.masked_indices() {
        out.tokens.row_mut(i).assign(&filler.value);
    }
    Ok(out)
}

/// Graph form of [`substitute`] with the zero filler.
pub fn substitute_graph(g: &mut Graph, tokens: Var, mask: &MaskVector) -> Var {
    g.scale_rows(tokens, mask.keep_factors())
}
