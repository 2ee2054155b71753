//! Closed-form FLOP and activation counts of the bias path.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

/// Bias-path extents: queries `k`, grid `h × w`, heads `m`, MLP hidden width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RpbShape {
    pub k: u64,
    pub h: u64,
    pub w: u64,
    pub m: u64,
    pub hidden: u64,
}

impl RpbShape {
    /// 300 queries, 8 heads, hidden 256 on the stride-16 grid of an 800×1333 input.
    pub const REFERENCE: RpbShape = RpbShape {
        k: 300,
        h: 50,
        w: 84,
        m: 8,
        hidden: 256,
    };
    /// The toy training preset.
    pub const TOY: RpbShape = RpbShape {
        k: 16,
        h: 8,
        w: 8,
        m: 4,
        hidden: 64,
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostVariant {
    Naive,
    Decomposed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub variant: CostVariant,
    pub shape: RpbShape,
    /// Two FLOPs per multiply-add.
    pub flops: u64,
    /// Hidden activations of the bias MLPs, 4 bytes per element.
    pub activation_bytes: u64,
}

/// MLP FLOPs only (no broadcast adds).
pub fn mlp_flops(variant: CostVariant, s: RpbShape) -> u64 {
    let per_eval = |input: u64| 2 * (input * s.hidden + s.hidden * s.m);
    match variant {
        CostVariant::Naive => s.k * s.h * s.w * per_eval(4),
        CostVariant::Decomposed => s.k * (s.h + s.w) * per_eval(2),
    }
}

/// Naive `2·K·H·W·(4h + hM)`; decomposed `2·K·(H+W)·(2h + hM) + K·H·W·M`
/// where the last term is the broadcast addition.
pub fn boxrpb_flops(s: RpbShape) -> (FlopReport, FlopReport) {
    let naive = FlopReport {
        variant: CostVariant::Naive,
        shape: s,
        flops: mlp_flops(CostVariant::Naive, s),
        activation_bytes: 4 * s.k * s.h * s.w * s.hidden,
    };
    let decomposed = FlopReport {
        variant: CostVariant::Decomposed,
        shape: s,
        flops: mlp_flops(CostVariant::Decomposed, s) + s.k * s.h * s.w * s.m,
        activation_bytes: 4 * s.k * (s.h + s.w) * s.hidden,
    };
    (naive, decomposed)
}

/// Naive over decomposed MLP FLOPs: `H·W·(4+M) / ((H+W)·(2+M))`.
pub fn mlp_flop_ratio(s: RpbShape) -> f64 {
    mlp_flops(CostVariant::Naive, s) as f64 / mlp_flops(CostVariant::Decomposed, s) as f64
}

pub const CSV_HEADER: &str = "variant,K,H,W,M,h,flops,activation_bytes";

pub fn to_csv(reports: &[FlopReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        let v = match r.variant {
            CostVariant::Naive => "naive",
            CostVariant::Decomposed => "decomposed",
        };
        let s = r.shape;
        let _ = writeln!(
            out,
            "{v},{},{},{},{},{},{},{}",
            s.k, s.h, s.w, s.m, s.hidden, r.flops, r.activation_bytes
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counts() {
        let s = RpbShape {
            k: 1,
            h: 2,
            w: 2,
            m: 1,
            hidden: 2,
        };
        let (n, d) = boxrpb_flops(s);
        assert_eq!(n.flops, 80);
        assert_eq!(d.flops, 52);
        assert_eq!(n.activation_bytes, 32);
        assert_eq!(d.activation_bytes, 32);
    }

    #[test]
    fn csv_layout() {
        assert_eq!(to_csv(&[]), format!("{CSV_HEADER}\n"));
        let (n, d) = boxrpb_flops(RpbShape::TOY);
        let text = to_csv(&[n, d]);
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(1).unwrap().starts_with("naive,16,8,8,4,64,"));
    }
}
