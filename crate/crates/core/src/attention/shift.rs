use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Boundary, ShiftBlock, ShiftPlan, Tape, Var};

/// Dimension along which a temporal shift partitions its input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShiftAxis {
    /// Whole attention heads (channel groups of width `D/h`).
    Head,
    /// Token rows, class token included at index 0.
    Patch,
    /// Channels of the class token only (TokenShift).
    FeatureChannel,
}

/// Which of the projected query, key and value tensors are shifted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct QkvSet {
    pub q: bool,
    pub k: bool,
    pub v: bool,
}

impl QkvSet {
    pub const ALL: [QkvSet; 7] = [
        QkvSet::new(true, false, false),
        QkvSet::new(false, true, false),
        QkvSet::new(false, false, true),
        QkvSet::new(true, true, false),
        QkvSet::new(false, true, true),
        QkvSet::new(true, false, true),
        QkvSet::new(true, true, true),
    ];

    pub const fn new(q: bool, k: bool, v: bool) -> Self {
        QkvSet { q, k, v }
    }

    pub fn is_empty(self) -> bool {
        !(self.q || self.k || self.v)
    }

    fn letters(self) -> String {
        let mut s = String::new();
        if self.q {
            s.push('q');
        }
        if self.k {
            s.push('k');
        }
        if self.v {
            s.push('v');
        }
        s
    }

    fn parse(s: &str) -> Option<Self> {
        QkvSet::ALL.into_iter().find(|set| set.letters() == s)
    }
}

/// What a [`ShiftConfig`] moves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftTargets {
    Attention(QkvSet),
    ClassTokenChannels,
}

/// A temporal shift: which tensors, along which axis, and how many units
/// come from the previous (`back`) and next (`fwd`) frame.
///
/// Units are heads for [`ShiftAxis::Head`], token rows for
/// [`ShiftAxis::Patch`] and channels for [`ShiftAxis::FeatureChannel`].
/// The first `back` units read frame `t − 1`, the next `fwd` read frame
/// `t + 1`, the rest are untouched.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShiftConfig {
    pub axis: ShiftAxis,
    pub targets: ShiftTargets,
    pub back: usize,
    pub fwd: usize,
    pub boundary: Boundary,
}

impl ShiftConfig {
    pub fn heads(targets: QkvSet, back: usize, fwd: usize) -> Self {
        ShiftConfig {
            axis: ShiftAxis::Head,
            targets: ShiftTargets::Attention(targets),
            back,
            fwd,
            boundary: Boundary::Zero,
        }
    }

    pub fn patches(targets: QkvSet, back: usize, fwd: usize) -> Self {
        ShiftConfig {
            axis: ShiftAxis::Patch,
            ..Self::heads(targets, back, fwd)
        }
    }

    pub fn class_token(back: usize, fwd: usize) -> Self {
        ShiftConfig {
            axis: ShiftAxis::FeatureChannel,
            targets: ShiftTargets::ClassTokenChannels,
            back,
            fwd,
            boundary: Boundary::Zero,
        }
    }

    pub fn with_boundary(mut self, boundary: Boundary) -> Self {
        self.boundary = boundary;
        self
    }

    pub fn is_zero(&self) -> bool {
        self.back == 0 && self.fwd == 0
    }

    /// Checks the amounts against a `[T, tokens, dim]` input with `heads`
    /// heads.
    pub fn validate(&self, heads: usize, tokens: usize, dim: usize) -> Result<()> {
        let (limit, unit) = match self.axis {
            ShiftAxis::Head => (heads, "heads"),
            ShiftAxis::Patch => (tokens, "tokens"),
            ShiftAxis::FeatureChannel => (dim, "channels"),
        };
        if self.back + self.fwd > limit {
            return Err(Error::config(format!(
                "shift amounts back={} fwd={} exceed {limit} {unit}",
                self.back, self.fwd
            )));
        }
        match (self.axis, self.targets) {
            (ShiftAxis::FeatureChannel, ShiftTargets::ClassTokenChannels) => Ok(()),
            (ShiftAxis::FeatureChannel, _) | (_, ShiftTargets::ClassTokenChannels) => Err(
                Error::config("class-token channel shifts and feature-channel axis go together"),
            ),
            (_, ShiftTargets::Attention(set)) if set.is_empty() => {
                Err(Error::config("MSCA shift needs at least one of q, k, v"))
            }
            _ => Ok(()),
        }
    }

    /// The index plan for a `[T, tokens, dim]` tensor.
    pub fn plan(&self, heads: usize, tokens: usize, dim: usize) -> Result<ShiftPlan> {
        self.validate(heads, tokens, dim)?;
        let (b, f) = (self.back, self.fwd);
        let blocks = match self.axis {
            ShiftAxis::Head => {
                if !dim.is_multiple_of(heads) {
                    return Err(Error::config(format!(
                        "dim {dim} not divisible by {heads} heads"
                    )));
                }
                let w = dim / heads;
                vec![
                    ShiftBlock {
                        rows: 0..tokens,
                        cols: 0..b * w,
                        offset: -1,
                    },
                    ShiftBlock {
                        rows: 0..tokens,
                        cols: b * w..(b + f) * w,
                        offset: 1,
                    },
                ]
            }
            ShiftAxis::Patch => vec![
                ShiftBlock {
                    rows: 0..b,
                    cols: 0..dim,
                    offset: -1,
                },
                ShiftBlock {
                    rows: b..b + f,
                    cols: 0..dim,
                    offset: 1,
                },
            ],
            ShiftAxis::FeatureChannel => vec![
                ShiftBlock {
                    rows: 0..1,
                    cols: 0..b,
                    offset: -1,
                },
                ShiftBlock {
                    rows: 0..1,
                    cols: b..b + f,
                    offset: 1,
                },
            ],
        };
        ShiftPlan::new(blocks, self.boundary)
    }
}

fn shape3(tape: &Tape, x: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    match *tape.value(x).shape() {
        [t, r, c] => Ok((t, r, c)),
        ref s => Err(Error::Dimension {
            op,
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

fn apply(
    tape: &mut Tape,
    x: Var,
    cfg: &ShiftConfig,
    heads: usize,
    op: &'static str,
) -> Result<Var> {
    let (_, tokens, dim) = shape3(tape, x, op)?;
    let plan = cfg.plan(heads, tokens, dim)?;
    if plan.blocks().is_empty() {
        return Ok(x);
    }
    tape.shift(x, Arc::new(plan))
}

/// Shifts whole heads of a `[T, N+1, D]` tensor viewed as
/// `[T, N+1, h, D/h]`: heads `0..back` from frame `t − 1`, heads
/// `back..back+fwd` from frame `t + 1`.
pub fn temporal_shift_heads(
    tape: &mut Tape,
    x: Var,
    heads: usize,
    back: usize,
    fwd: usize,
    boundary: Boundary,
) -> Result<Var> {
    let cfg = ShiftConfig::heads(QkvSet::new(true, true, true), back, fwd).with_boundary(boundary);
    apply(tape, x, &cfg, heads, "temporal_shift_heads")
}

/// Shifts token rows of a `[T, N+1, D]` tensor: rows `0..back` from frame
/// `t − 1`, rows `back..back+fwd` from frame `t + 1`.
pub fn temporal_shift_patches(
    tape: &mut Tape,
    x: Var,
    back: usize,
    fwd: usize,
    boundary: Boundary,
) -> Result<Var> {
    let cfg =
        ShiftConfig::patches(QkvSet::new(true, true, true), back, fwd).with_boundary(boundary);
    apply(tape, x, &cfg, 1, "temporal_shift_patches")
}

/// TokenShift's shift module: only the class token (row 0) moves, with
/// channels `0..back` from frame `t − 1` and `back..back+fwd` from
/// `t + 1`. Patch tokens pass through untouched.
pub fn token_shift(
    tape: &mut Tape,
    z: Var,
    back: usize,
    fwd: usize,
    boundary: Boundary,
) -> Result<Var> {
    let cfg = ShiftConfig::class_token(back, fwd).with_boundary(boundary);
    apply(tape, z, &cfg, 1, "token_shift")
}

/// Shifts a tensor along the axis of `cfg`; `heads` is only consulted for
/// head-axis shifts.
pub fn shift_along(tape: &mut Tape, x: Var, cfg: &ShiftConfig, heads: usize) -> Result<Var> {
    apply(tape, x, cfg, heads, "shift")
}

/// Block kind, named by the variant grammar: `msa`, `tokenshift`,
/// `msca-{q,k,v,qk,kv,qv,qkv}` (head axis) and `msca-p{...}` (patch axis).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Variant {
    Msa,
    TokenShift,
    Msca { targets: QkvSet, axis: ShiftAxis },
}

impl Variant {
    /// The fourteen MSCA variants: seven head-axis then seven patch-axis.
    pub fn msca_grid() -> Vec<Variant> {
        [ShiftAxis::Head, ShiftAxis::Patch]
            .into_iter()
            .flat_map(|axis| {
                QkvSet::ALL
                    .into_iter()
                    .map(move |targets| Variant::Msca { targets, axis })
            })
            .collect()
    }

    pub fn is_msca(self) -> bool {
        matches!(self, Variant::Msca { .. })
    }

    /// Full shift configuration for this variant with the given amounts.
    pub fn shift_config(self, back: usize, fwd: usize, boundary: Boundary) -> Option<ShiftConfig> {
        let cfg = match self {
            Variant::Msa => return None,
            Variant::TokenShift => ShiftConfig::class_token(back, fwd),
            Variant::Msca {
                targets,
                axis: ShiftAxis::Patch,
            } => ShiftConfig::patches(targets, back, fwd),
            Variant::Msca { targets, .. } => ShiftConfig::heads(targets, back, fwd),
        };
        Some(cfg.with_boundary(boundary))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Msa => f.write_str("msa"),
            Variant::TokenShift => f.write_str("tokenshift"),
            Variant::Msca { targets, axis } => {
                let p = if *axis == ShiftAxis::Patch { "p" } else { "" };
                write!(f, "msca-{p}{}", targets.letters())
            }
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("unknown block kind {s:?}"));
        match s {
            "msa" => return Ok(Variant::Msa),
            "tokenshift" => return Ok(Variant::TokenShift),
            _ => {}
        }
        let rest = s.strip_prefix("msca-").ok_or_else(bad)?;
        let (axis, letters) = match rest.strip_prefix('p') {
            Some(l) => (ShiftAxis::Patch, l),
            None => (ShiftAxis::Head, rest),
        };
        let targets = QkvSet::parse(letters).ok_or_else(bad)?;
        Ok(Variant::Msca { targets, axis })
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.to_string()
    }
}
