//! Dyadic-ordered inducing points and the flat storage position of each basis.
//!
//! The inducing set for level `L` holds `M = 2^L + 1` points laid out block by
//! block: the boundary block `[0, 1]` first, then for each level `l = 1..=L`
//! the odd multiples `m·2^{-l}` in increasing `m`. Block `l` starts at the
//! 0-based position `2^{l-1} + 1`, so the basis function `ψ_{l,m}` lives at
//! position `2^{l-1} + 1 + (m - 1)/2`. All indexing in this crate is 0-based.

use crate::error::{param_err, Result};

/// Deepest supported level. Keeps `2^{-L}` far above the double-precision
/// underflow range and `M` within a `u32`.
pub const MAX_LEVEL: u32 = 20;

/// Identity of the basis function stored at a flat position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BasisIndex {
    /// `0` for the even boundary function `ψ01`, `1` for the odd `ψ02`.
    Boundary(u8),
    /// Interior tent `ψ_{level, m}` with odd `m`.
    Interior { level: u32, m: u64 },
}

/// Inducing set `U^{[L]}` in dyadic order. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct DyadicGrid {
    level: u32,
    points: Vec<f64>,
    offsets: Vec<usize>,
}

/// Builds the dyadic grid of the given level (`1 ≤ L ≤ 20`).
pub fn build_grid(level: u32) -> Result<DyadicGrid> {
    DyadicGrid::new(level)
}

/// Flat position of `ψ_{l,m}`, independent of the grid depth.
pub fn position(l: u32, m: u64) -> Result<usize> {
    if l == 0 || l > MAX_LEVEL {
        return param_err(format!("level {l} outside 1..={MAX_LEVEL}"));
    }
    if m % 2 == 0 || m >= (1u64 << l) {
        return param_err(format!("m = {m} is not an odd integer in [1, {}]", (1u64 << l) - 1));
    }
    Ok(block_offset(l) + ((m - 1) / 2) as usize)
}

#[inline]
pub(crate) fn block_offset(l: u32) -> usize {
    (1usize << (l - 1)) + 1
}

impl DyadicGrid {
    pub fn new(level: u32) -> Result<Self> {
        if level == 0 || level > MAX_LEVEL {
            return param_err(format!("dyadic level {level} outside 1..={MAX_LEVEL}"));
        }
        let size = (1usize << level) + 1;
        let mut points = Vec::with_capacity(size);
        points.push(0.0);
        points.push(1.0);
        let mut offsets = Vec::with_capacity(level as usize + 1);
        offsets.push(0);
        for l in 1..=level {
            offsets.push(points.len());
            let h = (-(l as f64)).exp2();
            points.extend((1..(1u64 << l)).step_by(2).map(|m| m as f64 * h));
        }
        debug_assert_eq!(points.len(), size);
        Ok(Self { level, points, offsets })
    }

    #[inline]
    pub fn level(&self) -> u32 {
        self.level
    }

    /// Number of inducing points `M = 2^L + 1`.
    #[inline]
    pub fn size(&self) -> usize {
        self.points.len()
    }

    /// Points in dyadic order.
    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// Block start for each of `U_0, U_1, …, U_L`.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Number of basis slots activated by one input scalar.
    #[inline]
    pub fn active_slots(&self) -> usize {
        self.level as usize + 2
    }

    pub fn position(&self, l: u32, m: u64) -> Result<usize> {
        if l > self.level {
            return param_err(format!("level {l} exceeds grid level {}", self.level));
        }
        position(l, m)
    }

    /// Inverse of [`DyadicGrid::position`].
    pub fn basis_at(&self, pos: usize) -> Result<BasisIndex> {
        match pos {
            0 | 1 => Ok(BasisIndex::Boundary(pos as u8)),
            p if p < self.size() => {
                let l = usize::BITS - (p - 1).leading_zeros();
                let m = 2 * (p - block_offset(l)) as u64 + 1;
                Ok(BasisIndex::Interior { level: l, m })
            }
            p => param_err(format!("position {p} outside grid of size {}", self.size())),
        }
    }
}
