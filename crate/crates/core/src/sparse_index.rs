//! Tensorized sparse indexing: which basis functions an input activates.
//!
//! At every level `l` exactly one interior tent can be nonzero at `x`: the
//! one centred on the odd dyadic point closest to `x`. Its within-block index
//! is `t = ⌊(⌈x·2^l⌉ + 1) / 2⌋`, clamped into `[1, 2^{l-1}]` (the raw formula
//! gives `t = 0` at `x = 0`, where every interior tent vanishes anyway).
//! Together with the two global boundary functions this gives `L + 2` active
//! slots per input scalar.

use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::dyadic_grid::{block_offset, BasisIndex, DyadicGrid};
use crate::error::{param_err, Result, SikaError};
use crate::kernel_basis::LaplaceBasis;
use crate::scalar::Scalar;

/// Upper bound on `B·D·M` for materialised dense features.
pub const DENSE_FEATURE_CAP: usize = 1 << 27;

/// Per-level within-block indices `t`, shape `(B, D, L)`, 1-based as in the
/// floor/ceil formula.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexTensor(pub Array3<u64>);

impl IndexTensor {
    pub fn levels(&self) -> u32 {
        self.0.dim().2 as u32
    }
}

/// Activated basis slots and their values, both shaped `(B, D, L + 2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseActivation<T> {
    /// Flat grid positions; slots 0 and 1 always hold the boundary bases.
    pub indices: Array3<u32>,
    pub values: Array3<T>,
}

impl<T: Scalar> SparseActivation<T> {
    pub fn batch(&self) -> usize {
        self.indices.dim().0
    }

    pub fn features(&self) -> usize {
        self.indices.dim().1
    }

    pub fn slots(&self) -> usize {
        self.indices.dim().2
    }
}

fn check_inputs<T: Scalar>(x: &ArrayView2<T>) -> Result<()> {
    for &v in x.iter() {
        if !(v >= T::zero() && v <= T::one()) {
            return Err(SikaError::Domain { what: "input", value: v.as_f64() });
        }
    }
    Ok(())
}

#[inline]
fn level_index<T: Scalar>(x: T, l: u32) -> u64 {
    let scaled = x * T::from_u64(1u64 << l).expect("power of two");
    let raw = (scaled.ceil().to_u64().unwrap_or(0) + 1) / 2;
    raw.clamp(1, 1u64 << (l - 1))
}

/// Within-block index `t` per input entry and level.
pub fn tsi_indices<T: Scalar>(x: ArrayView2<T>, level: u32) -> Result<IndexTensor> {
    if level == 0 || level > crate::dyadic_grid::MAX_LEVEL {
        return param_err(format!("level {level} out of range"));
    }
    check_inputs(&x)?;
    let (b, d) = x.dim();
    let mut t = Array3::zeros((b, d, level as usize));
    for ((i, j), &v) in x.indexed_iter() {
        for l in 1..=level {
            t[[i, j, (l - 1) as usize]] = level_index(v, l);
        }
    }
    Ok(IndexTensor(t))
}

/// Flat grid positions `[0, 1, offset_l + t_l - 1 …]`, shape `(B, D, L + 2)`.
pub fn assemble_global_indices(t: &IndexTensor) -> Array3<u32> {
    let (b, d, levels) = t.0.dim();
    let mut out = Array3::zeros((b, d, levels + 2));
    for i in 0..b {
        for j in 0..d {
            out[[i, j, 1]] = 1;
            for l in 1..=levels {
                out[[i, j, l + 1]] = (block_offset(l as u32) as u64 + t.0[[i, j, l - 1]] - 1) as u32;
            }
        }
    }
    out
}

/// Exhaustive nearest odd dyadic point per level, ties toward the smaller `m`.
pub fn brute_force_indices(x: f64, level: u32) -> Vec<(u32, u64)> {
    (1..=level)
        .map(|l| {
            let h = (-(l as f64)).exp2();
            let mut best = (f64::INFINITY, 0u64);
            for m in (1..(1u64 << l)).step_by(2) {
                let dist = (x - m as f64 * h).abs();
                if dist < best.0 {
                    best = (dist, m);
                }
            }
            (l, best.1)
        })
        .collect()
}

/// Evaluates sparse and dense feature maps for one grid and `θ`.
#[derive(Clone, Debug)]
pub struct Featurizer<T> {
    grid: DyadicGrid,
    basis: LaplaceBasis<T>,
    /// `(l, m)` of every interior position, for dense enumeration.
    interior: Vec<(u32, u64)>,
}

impl<T: Scalar> Featurizer<T> {
    pub fn new(grid: DyadicGrid, theta: T) -> Result<Self> {
        let basis = LaplaceBasis::new(theta, grid.level())?;
        let interior = (2..grid.size())
            .map(|p| match grid.basis_at(p) {
                Ok(BasisIndex::Interior { level, m }) => (level, m),
                _ => unreachable!("positions >= 2 are interior"),
            })
            .collect();
        Ok(Self { grid, basis, interior })
    }

    pub fn grid(&self) -> &DyadicGrid {
        &self.grid
    }

    pub fn basis(&self) -> &LaplaceBasis<T> {
        &self.basis
    }

    pub fn theta(&self) -> T {
        self.basis.theta()
    }

    /// Sparse activation of every entry of `x`.
    pub fn sparse(&self, x: ArrayView2<T>) -> Result<SparseActivation<T>> {
        check_inputs(&x)?;
        let (b, d) = x.dim();
        let level = self.grid.level();
        let slots = level as usize + 2;
        let mut indices = Array3::zeros((b, d, slots));
        let mut values = Array3::zeros((b, d, slots));
        {
            let idx = indices.as_slice_mut().expect("standard layout");
            let val = values.as_slice_mut().expect("standard layout");
            for (k, &v) in x.iter().enumerate() {
                let base = k * slots;
                let (e, o) = self.basis.boundary(v);
                idx[base + 1] = 1;
                val[base] = e;
                val[base + 1] = o;
                for l in 1..=level {
                    let t = level_index(v, l);
                    idx[base + l as usize + 1] = (block_offset(l) as u64 + t - 1) as u32;
                    val[base + l as usize + 1] = self.basis.interior(l, 2 * t - 1, v);
                }
            }
        }
        Ok(SparseActivation { indices, values })
    }

    /// Input derivatives `∂ψ/∂x` for the slots of an activation computed from `x`.
    pub fn sparse_derivatives(&self, x: ArrayView2<T>, act: &SparseActivation<T>) -> Array3<T> {
        let slots = act.slots();
        let mut out = Array3::zeros(act.values.raw_dim());
        let o = out.as_slice_mut().expect("standard layout");
        let idx = act.indices.as_slice().expect("standard layout");
        for (k, &v) in x.iter().enumerate() {
            let base = k * slots;
            let (de, dodd) = self.basis.boundary_derivative(v);
            o[base] = de;
            o[base + 1] = dodd;
            for s in 2..slots {
                let l = (s - 1) as u32;
                let t = idx[base + s] as u64 + 1 - block_offset(l) as u64;
                o[base + s] = self.basis.interior_derivative(l, 2 * t - 1, v);
            }
        }
        out
    }

    /// Full feature tensor `(B, D, M)`, enumerating every basis function.
    pub fn dense(&self, x: ArrayView2<T>) -> Result<Array3<T>> {
        check_inputs(&x)?;
        let (b, d) = x.dim();
        let m = self.grid.size();
        if b.saturating_mul(d).saturating_mul(m) > DENSE_FEATURE_CAP {
            return param_err(format!(
                "dense features of shape ({b}, {d}, {m}) exceed the cap of {DENSE_FEATURE_CAP} entries"
            ));
        }
        let mut out = Array3::zeros((b, d, m));
        let o = out.as_slice_mut().expect("standard layout");
        for (k, &v) in x.iter().enumerate() {
            let row = &mut o[k * m..(k + 1) * m];
            let (e, od) = self.basis.boundary(v);
            row[0] = e;
            row[1] = od;
            for (slot, &(l, mm)) in row[2..].iter_mut().zip(&self.interior) {
                *slot = self.basis.interior(l, mm, v);
            }
        }
        Ok(out)
    }
}

/// Sparse activation for the given grid and `θ`.
pub fn sparse_features<T: Scalar>(x: ArrayView2<T>, grid: &DyadicGrid, theta: T) -> Result<SparseActivation<T>> {
    Featurizer::new(grid.clone(), theta)?.sparse(x)
}

/// Dense feature tensor `(B, D, M)`.
pub fn dense_features<T: Scalar>(x: ArrayView2<T>, grid: &DyadicGrid, theta: T) -> Result<Array3<T>> {
    Featurizer::new(grid.clone(), theta)?.dense(x)
}

/// Scatters a sparse activation into a dense `(B, D, M)` tensor.
pub fn scatter<T: Scalar>(act: &SparseActivation<T>, size: usize) -> Array3<T> {
    let (b, d, _) = act.indices.dim();
    let mut out = Array3::zeros((b, d, size));
    for ((i, j, s), &pos) in act.indices.indexed_iter() {
        out[[i, j, pos as usize]] = act.values[[i, j, s]];
    }
    out
}

/// Selects the weight rows each example touches.
///
/// `weights` is in feature-major layout: row `d·M + position`. The result has
/// shape `(B, D·(L + 2), out)` with rows ordered by `(d, slot)`.
pub fn gather_weights<T: Scalar>(weights: ArrayView2<T>, indices: &Array3<u32>, size: usize) -> Result<Array3<T>> {
    let (b, d, slots) = indices.dim();
    if weights.nrows() != d * size {
        return param_err(format!(
            "weight matrix has {} rows, expected D·M = {}·{} = {}",
            weights.nrows(),
            d,
            size,
            d * size
        ));
    }
    let out_dim = weights.ncols();
    let mut out = Array3::zeros((b, d * slots, out_dim));
    for (i, mut ex) in out.axis_iter_mut(Axis(0)).enumerate() {
        for j in 0..d {
            for s in 0..slots {
                let pos = indices[[i, j, s]] as usize;
                if pos >= size {
                    return param_err(format!("index {pos} outside grid of size {size}"));
                }
                ex.row_mut(j * slots + s).assign(&weights.row(j * size + pos));
            }
        }
    }
    Ok(out)
}

/// Writes gathered rows of one example back into a feature-major matrix.
pub fn scatter_weight_rows<T: Scalar>(
    gathered: ArrayView2<T>,
    example_indices: ArrayView2<u32>,
    size: usize,
    into: &mut Array2<T>,
) {
    let (d, slots) = example_indices.dim();
    for j in 0..d {
        for s in 0..slots {
            let row = j * size + example_indices[[j, s]] as usize;
            into.row_mut(row).assign(&gathered.row(j * slots + s));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dyadic_grid::build_grid;
    use crate::kernel_basis::eval_interior_basis;
    use ndarray::{array, Array};

    fn t_of(x: f64, level: u32) -> Vec<u64> {
        tsi_indices(array![[x]].view(), level).unwrap().0.iter().copied().collect()
    }

    #[test]
    fn tsi_examples() {
        assert_eq!(t_of(0.3, 3), vec![1, 1, 2]);
        assert_eq!(t_of(0.0, 5), vec![1; 5]);
        assert_eq!(t_of(1.0, 3), vec![1, 2, 4]);
        assert!(tsi_indices(array![[1.5]].view(), 3).is_err());
        assert!(tsi_indices(array![[-0.1]].view(), 3).is_err());
    }

    #[test]
    fn tsi_at_grid_points_uses_plain_ceiling() {
        let level = 6;
        let n = 1u64 << level;
        for k in 0..=n {
            let x = k as f64 / n as f64;
            for (l, t) in (1..=level).zip(t_of(x, level)) {
                let raw = (((x * (1u64 << l) as f64).ceil() as u64) + 1) / 2;
                assert_eq!(t, raw.clamp(1, 1 << (l - 1)));
            }
        }
    }

    #[test]
    fn global_index_examples() {
        let j = assemble_global_indices(&tsi_indices(array![[0.3]].view(), 3).unwrap());
        assert_eq!(j.iter().copied().collect::<Vec<_>>(), vec![0, 1, 2, 3, 6]);
        let j = assemble_global_indices(&tsi_indices(array![[0.5]].view(), 1).unwrap());
        assert_eq!(j.iter().copied().collect::<Vec<_>>(), vec![0, 1, 2]);

        let f = Featurizer::new(build_grid(3).unwrap(), 1.0).unwrap();
        let dense = f.dense(array![[0.3]].view()).unwrap();
        let nz: Vec<usize> = (0..9).filter(|&p| dense[[0, 0, p]] != 0.0).collect();
        assert_eq!(nz, vec![0, 1, 2, 3, 6]);
    }

    #[test]
    fn brute_force_examples() {
        assert_eq!(brute_force_indices(0.3, 3), vec![(1, 1), (2, 1), (3, 3)]);
        assert_eq!(brute_force_indices(0.5, 2), vec![(1, 1), (2, 1)]);
        assert_eq!(brute_force_indices(0.875, 3), vec![(1, 1), (2, 3), (3, 7)]);
        // the tie at 0.5 is harmless: both candidates vanish there
        assert_eq!(eval_interior_basis(2, 1, 0.5, 1.0).unwrap(), 0.0);
        assert_eq!(eval_interior_basis(2, 3, 0.5, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn sparse_slot_value_matches_direct_evaluation() {
        let f = Featurizer::new(build_grid(3).unwrap(), 1.0).unwrap();
        let act = f.sparse(array![[0.3]].view()).unwrap();
        assert_eq!(act.indices[[0, 0, 4]], 6);
        assert_eq!(act.values[[0, 0, 4]], eval_interior_basis(3, 3, 0.3, 1.0).unwrap());
    }

    #[test]
    fn active_slot_counts_follow_level() {
        for (level, expected) in [(1, 3), (2, 4), (4, 6), (7, 9), (10, 12)] {
            let f = Featurizer::new(build_grid(level).unwrap(), 1.0).unwrap();
            let act = f.sparse(array![[0.3141], [0.77]].view()).unwrap();
            assert_eq!(act.slots(), expected);
            for row in act.values.lanes(Axis(2)) {
                assert_eq!(row.iter().filter(|v| **v != 0.0).count(), expected);
            }
        }
    }

    #[test]
    fn dense_guard_and_gather_layout() {
        let f = Featurizer::new(build_grid(20).unwrap(), 1.0).unwrap();
        let x = Array::from_elem((200, 1), 0.5);
        assert!(f.dense(x.view()).is_err());

        let g = build_grid(3).unwrap();
        let w = Array2::from_shape_fn((2 * 9, 2), |(r, c)| (r * 10 + c) as f64);
        let f = Featurizer::new(g, 1.0).unwrap();
        let act = f.sparse(array![[0.3, 0.9]].view()).unwrap();
        let gathered = gather_weights(w.view(), &act.indices, 9).unwrap();
        assert_eq!(gathered.dim(), (1, 2 * 5, 2));
        // feature 1, slot 0 -> row 1·9 + 0
        assert_eq!(gathered[[0, 5, 1]], 91.0);
        assert!(gather_weights(w.view(), &act.indices, 8).is_err());
    }

    #[test]
    fn full_coverage_gather_is_identity() {
        let w = Array2::from_shape_fn((9, 3), |(r, c)| (r * 3 + c) as f64);
        let all = Array3::from_shape_fn((1, 1, 9), |(_, _, s)| s as u32);
        let gathered = gather_weights(w.view(), &all, 9).unwrap();
        assert_eq!(gathered.index_axis(Axis(0), 0), w);
    }

    #[test]
    fn f32_indices_match_f64() {
        let xs: Vec<f64> = (0..500).map(|i| (i as f64 * 0.618_033_988_7).fract()).collect();
        let x64 = Array2::from_shape_vec((500, 1), xs.clone()).unwrap();
        let x32 = x64.mapv(|v| v as f32);
        // exact dyadic f32 images can differ from the f64 ones; only compare away from them
        let t64 = tsi_indices(x64.view(), 8).unwrap();
        let t32 = tsi_indices(x32.view(), 8).unwrap();
        for (i, x) in xs.iter().enumerate() {
            if (x * 256.0 - (x * 256.0).round()).abs() > 1e-4 {
                assert_eq!(t64.0.index_axis(Axis(0), i), t32.0.index_axis(Axis(0), i));
            }
        }
    }
}
