//! Closed-form multiply-add counts.
//!
//! Only matrix products are counted. Softmax, layer norm, GELU, residual
//! additions and every temporal shift (an index move) contribute nothing.

use std::ops::Add;

use serde::{Deserialize, Serialize};

/// Multiply-add counts per sub-operation. `total` is always the sum of
/// the components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub qkv_proj: u64,
    pub attn_scores: u64,
    pub attn_weighted_sum: u64,
    pub out_proj: u64,
    pub mlp: u64,
    pub embed: u64,
    pub head: u64,
    pub total: u64,
}

impl FlopReport {
    pub fn new(
        qkv_proj: u64,
        attn_scores: u64,
        attn_weighted_sum: u64,
        out_proj: u64,
        mlp: u64,
        embed: u64,
        head: u64,
    ) -> Self {
        FlopReport {
            qkv_proj,
            attn_scores,
            attn_weighted_sum,
            out_proj,
            mlp,
            embed,
            head,
            total: qkv_proj + attn_scores + attn_weighted_sum + out_proj + mlp + embed + head,
        }
    }

    /// Projection plus attention plus output projection.
    pub fn attention(&self) -> u64 {
        self.qkv_proj + self.attn_scores + self.attn_weighted_sum + self.out_proj
    }

    /// Score and weighted-sum products only: the part quadratic in tokens.
    pub fn attention_core(&self) -> u64 {
        self.attn_scores + self.attn_weighted_sum
    }

    pub fn components(&self) -> [(&'static str, u64); 7] {
        [
            ("qkv_proj", self.qkv_proj),
            ("attn_scores", self.attn_scores),
            ("attn_weighted_sum", self.attn_weighted_sum),
            ("out_proj", self.out_proj),
            ("mlp", self.mlp),
            ("embed", self.embed),
            ("head", self.head),
        ]
    }
}

impl Add for FlopReport {
    type Output = FlopReport;

    fn add(self, o: FlopReport) -> FlopReport {
        FlopReport::new(
            self.qkv_proj + o.qkv_proj,
            self.attn_scores + o.attn_scores,
            self.attn_weighted_sum + o.attn_weighted_sum,
            self.out_proj + o.out_proj,
            self.mlp + o.mlp,
            self.embed + o.embed,
            self.head + o.head,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_is_sum_of_components() {
        let r = FlopReport::new(1, 2, 3, 4, 5, 6, 7) + FlopReport::new(10, 0, 0, 0, 0, 0, 1);
        assert_eq!(r.total, r.components().iter().map(|c| c.1).sum::<u64>());
        assert_eq!(r.total, 39);
    }
}
