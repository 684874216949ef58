//! Matrix-calculus primitives used by the gradient code.
//!
//! Commutation matrices are never materialised: `K_{m,n} Q` is a row gather
//! and `Q K_{m,n}` a column gather. The coefficient prior covariance is
//! assembled blockwise, and derivatives of its inverse are contracted one
//! component block at a time so the `p²q² x dim θ` sparse derivative never
//! has to exist in dense form.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A list of 0-based source positions. `gather(v)[k] = v[entries[k]]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMap {
    entries: Vec<usize>,
    source_len: usize,
}

impl IndexMap {
    pub fn identity(n: usize) -> Self {
        Self {
            entries: (0..n).collect(),
            source_len: n,
        }
    }

    /// Builds a selection map; entries must lie in `0..source_len`.
    pub fn selection(entries: Vec<usize>, source_len: usize) -> Result<Self> {
        if let Some(bad) = entries.iter().find(|&&e| e >= source_len) {
            return Err(Error::InvalidArgument(format!(
                "index {bad} out of range for source length {source_len}"
            )));
        }
        Ok(Self { entries, source_len })
    }

    /// Builds a reordering map; entries must be a permutation of `0..len`.
    pub fn permutation(entries: Vec<usize>) -> Result<Self> {
        let n = entries.len();
        let mut seen = vec![false; n];
        for &e in &entries {
            if e >= n || seen[e] {
                return Err(Error::InvalidArgument("index map is not a permutation".into()));
            }
            seen[e] = true;
        }
        Ok(Self {
            entries,
            source_len: n,
        })
    }

    pub fn entries(&self) -> &[usize] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn source_len(&self) -> usize {
        self.source_len
    }

    pub fn is_permutation(&self) -> bool {
        self.entries.len() == self.source_len && {
            let mut seen = vec![false; self.source_len];
            self.entries.iter().all(|&e| !std::mem::replace(&mut seen[e], true))
        }
    }

    pub fn is_identity(&self) -> bool {
        self.is_permutation() && self.entries.iter().enumerate().all(|(i, &e)| i == e)
    }

    /// Inverse permutation. Panics if the map is not a permutation.
    pub fn inverse(&self) -> IndexMap {
        assert!(self.is_permutation(), "only permutations can be inverted");
        let mut inv = vec![0; self.entries.len()];
        for (k, &e) in self.entries.iter().enumerate() {
            inv[e] = k;
        }
        IndexMap {
            entries: inv,
            source_len: self.source_len,
        }
    }

    /// `self.then(other)` gathers by `self` first and then by `other`.
    pub fn then(&self, other: &IndexMap) -> IndexMap {
        assert_eq!(other.source_len, self.entries.len(), "composition length mismatch");
        IndexMap {
            entries: other.entries.iter().map(|&k| self.entries[k]).collect(),
            source_len: self.source_len,
        }
    }

    /// Index map of `I_left ⊗ P ⊗ I_right` where `P` is the permutation
    /// matrix represented by `self`.
    pub fn kron_identity(left: usize, inner: &IndexMap, right: usize) -> IndexMap {
        let m = inner.len();
        let mut entries = Vec::with_capacity(left * m * right);
        for a in 0..left {
            for b in 0..m {
                for c in 0..right {
                    entries.push(a * m * right + inner.entries[b] * right + c);
                }
            }
        }
        IndexMap {
            entries,
            source_len: left * inner.source_len * right,
        }
    }

    pub fn gather_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.source_len, "gather length mismatch");
        self.entries.iter().map(|&e| v[e]).collect()
    }

    pub fn gather_rows(&self, q: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(q.nrows(), self.source_len, "row gather length mismatch");
        q.select_rows(self.entries.iter())
    }

    pub fn gather_cols(&self, q: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(q.ncols(), self.source_len, "column gather length mismatch");
        q.select_columns(self.entries.iter())
    }
}

/// Index vector `t` of the commutation matrix `K_{m,n}`: fill an `m x n` grid
/// column-major with `0..mn` and read its transpose column-major. Gathering
/// the rows of `Q` by `t` yields `K_{m,n} Q`.
pub fn commutation_index(m: usize, n: usize) -> Result<IndexMap> {
    if m == 0 || n == 0 {
        return Err(Error::InvalidArgument(format!(
            "commutation matrix needs positive dimensions, got {m}x{n}"
        )));
    }
    // grid[i + j*m] = i + j*m; reading grid' column-major visits i major, j minor.
    let mut t = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            t.push(j * m + i);
        }
    }
    Ok(IndexMap {
        entries: t,
        source_len: m * n,
    })
}

/// `K_{m,n} Q` by row gather.
pub fn commute_rows(m: usize, n: usize, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(commutation_index(m, n)?.gather_rows(q))
}

/// `Q K_{m,n}` by column gather; uses the `n x m` grid.
pub fn commute_cols(m: usize, n: usize, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(commutation_index(n, m)?.gather_cols(q))
}

/// Ordered dense blocks, interpreted as a block-diagonal matrix.
#[derive(Debug, Clone, Default)]
pub struct BlockMatrix {
    pub blocks: Vec<DMatrix<f64>>,
}

impl BlockMatrix {
    pub fn new(blocks: Vec<DMatrix<f64>>) -> Self {
        Self { blocks }
    }

    pub fn nrows(&self) -> usize {
        self.blocks.iter().map(|b| b.nrows()).sum()
    }

    pub fn ncols(&self) -> usize {
        self.blocks.iter().map(|b| b.ncols()).sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nrows(), self.ncols());
        let (mut r, mut c) = (0, 0);
        for b in &self.blocks {
            out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
            r += b.nrows();
            c += b.ncols();
        }
        out
    }
}

/// Blockwise Khatri-Rao product: the block-diagonal matrix `diag(A_i ⊗ C_i)`.
pub fn khatri_rao_block(a: &BlockMatrix, c: &BlockMatrix) -> Result<DMatrix<f64>> {
    if a.blocks.len() != c.blocks.len() {
        return Err(Error::Dimension(format!(
            "Khatri-Rao factors have {} and {} blocks",
            a.blocks.len(),
            c.blocks.len()
        )));
    }
    let kron_blocks = a
        .blocks
        .iter()
        .zip(&c.blocks)
        .map(|(ai, ci)| {
            if ci.nrows() == 0 || ci.ncols() == 0 {
                DMatrix::zeros(ai.nrows() * ci.nrows(), ai.ncols() * ci.ncols())
            } else {
                ai.kronecker(ci)
            }
        })
        .collect();
    Ok(BlockMatrix::new(kron_blocks).to_dense())
}

/// The three coefficient groups, in design-matrix column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Linear,
    Additive,
    Surface,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Linear, Component::Additive, Component::Surface];

    pub fn index(self) -> usize {
        match self {
            Component::Linear => 0,
            Component::Additive => 1,
            Component::Surface => 2,
        }
    }
}

/// Column counts of the three components and the response count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComponentLayout {
    pub p: usize,
    pub q_o: usize,
    pub q_a: usize,
    pub q_s: usize,
}

impl ComponentLayout {
    pub fn new(p: usize, q_o: usize, q_a: usize, q_s: usize) -> Self {
        Self { p, q_o, q_a, q_s }
    }

    pub fn q(&self) -> usize {
        self.q_o + self.q_a + self.q_s
    }

    pub fn width(&self, c: Component) -> usize {
        match c {
            Component::Linear => self.q_o,
            Component::Additive => self.q_a,
            Component::Surface => self.q_s,
        }
    }

    /// First design-matrix column of a component.
    pub fn column_offset(&self, c: Component) -> usize {
        match c {
            Component::Linear => 0,
            Component::Additive => self.q_o,
            Component::Surface => self.q_o + self.q_a,
        }
    }

    /// First position of `vec B_c` in the component-stacked vector `b`.
    pub fn stacked_offset(&self, c: Component) -> usize {
        self.p * self.column_offset(c)
    }
}

/// Index vector `c` with `β = b(c)`, where `b = [vec B_o; vec B_a; vec B_s]`
/// and `β = vec B`.
pub fn beta_reorder_map(p: usize, q_o: usize, q_a: usize, q_s: usize) -> Result<IndexMap> {
    if q_o == 0 {
        return Err(Error::InvalidArgument("the linear component needs at least one column".into()));
    }
    let layout = ComponentLayout::new(p, q_o, q_a, q_s);
    let q = layout.q();
    let mut entries = vec![0; p * q];
    for comp in Component::ALL {
        let w = layout.width(comp);
        let col0 = layout.column_offset(comp);
        let b0 = layout.stacked_offset(comp);
        for a in 0..p {
            for r in 0..w {
                entries[a * q + col0 + r] = b0 + a * w + r;
            }
        }
    }
    IndexMap::permutation(entries)
}

/// Vec-level map `z` with `(vec Σ_b)(z) = vec Σ_β`, for `Σ_β = Σ_b(c, c)`.
pub fn vec_reorder_map(c: &IndexMap) -> IndexMap {
    let m = c.len();
    let mut entries = Vec::with_capacity(m * m);
    for k2 in 0..m {
        for k1 in 0..m {
            entries.push(c.entries[k2] * m + c.entries[k1]);
        }
    }
    IndexMap {
        entries,
        source_len: m * m,
    }
}

/// Column gather that extracts, from a matrix `C` whose columns are indexed
/// like `vec Σ_β`, the columns matching `vec` of one component's diagonal
/// block of `Σ_b`. Built from the stacked-order map `z`, the contiguous
/// column range `h` of the component's column block in `vec Σ_b`, and the
/// 0/1 mask `z_i` over that range that keeps the component's own rows.
pub fn component_slice_index(layout: &ComponentLayout, comp: Component) -> Result<IndexMap> {
    let c = beta_reorder_map(layout.p, layout.q_o, layout.q_a, layout.q_s)?;
    let pq = layout.p * layout.q();
    // C(:, z⁻¹) reindexes the columns of C into vec Σ_b order.
    let to_stacked = vec_reorder_map(&c).inverse();
    let width = layout.p * layout.width(comp);
    let start = layout.stacked_offset(comp);
    // h: columns start..start+width of the pq x pq matrix, as vec positions.
    let h: Vec<usize> = (start * pq..(start + width) * pq).collect();
    // z_i = vec([0, 1_{width x width}, 0]'): within each retained column,
    // keep rows start..start+width.
    let mask: Vec<bool> = (0..width)
        .flat_map(|_| (0..pq).map(move |row| row >= start && row < start + width))
        .collect();
    let kept: Vec<usize> = h
        .iter()
        .zip(mask)
        .filter_map(|(&pos, keep)| keep.then_some(pos))
        .collect();
    let kept = IndexMap::selection(kept, pq * pq)?;
    Ok(to_stacked.then(&kept))
}

/// Extract `C_i` for one component so that
/// `C · ∂vec Σ_β⁻¹/∂θ' = Σ_i C_i · ∂vec(M_i ⊗ P_i)/∂θ'`.
pub fn component_slice(c: &DMatrix<f64>, layout: &ComponentLayout, comp: Component) -> Result<DMatrix<f64>> {
    let pq = layout.p * layout.q();
    if c.ncols() != pq * pq {
        return Err(Error::Dimension(format!(
            "contraction matrix has {} columns, expected p²q² = {}",
            c.ncols(),
            pq * pq
        )));
    }
    Ok(component_slice_index(layout, comp)?.gather_cols(c))
}

/// The surface and additive slices `(C_s, C_a)`.
pub fn lemma1_slice(
    c: &DMatrix<f64>,
    p: usize,
    q_o: usize,
    q_a: usize,
    q_s: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let layout = ComponentLayout::new(p, q_o, q_a, q_s);
    Ok((
        component_slice(c, &layout, Component::Surface)?,
        component_slice(c, &layout, Component::Additive)?,
    ))
}

/// `(A ⊗ B) vec X = vec(B X Aᵀ)` with `X` of shape `B.ncols() x A.ncols()`.
pub fn kron_apply(a: &DMatrix<f64>, b: &DMatrix<f64>, vec_x: &[f64]) -> DVector<f64> {
    let x = DMatrix::from_column_slice(b.ncols(), a.ncols(), vec_x);
    let out = b * x * a.transpose();
    DVector::from_column_slice(out.as_slice())
}


#[cfg(test)]
mod tests {
    use super::dense::*;
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn random_matrix(rng: &mut ChaCha20Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn commutation_of_square_vec_is_transpose() {
        let q = DMatrix::from_column_slice(4, 1, &[1.0, 3.0, 2.0, 4.0]);
        let out = commute_rows(2, 2, &q).unwrap();
        assert_eq!(out.as_slice(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn commutation_with_unit_dimension_is_identity() {
        for n in 1..6 {
            assert!(commutation_index(1, n).unwrap().is_identity());
            assert!(commutation_index(n, 1).unwrap().is_identity());
        }
    }

    #[test]
    fn commutation_3x4_matches_dense() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let q = random_matrix(&mut rng, 12, 2);
        assert_eq!(commute_rows(3, 4, &q).unwrap(), commutation_matrix(3, 4) * &q);
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(commutation_index(0, 3).is_err());
        assert!(commutation_index(3, 0).is_err());
    }

    #[test]
    fn commutation_indices_are_mutually_inverse() {
        for m in 1..=8 {
            for n in 1..=8 {
                let t = commutation_index(m, n).unwrap();
                let u = commutation_index(n, m).unwrap();
                assert!(t.then(&u).is_identity(), "m={m} n={n}");
            }
        }
    }

    #[test]
    fn kron_identity_matches_dense_kronecker() {
        let inner = commutation_index(2, 3).unwrap();
        let map = IndexMap::kron_identity(2, &inner, 3);
        let dense = DMatrix::<f64>::identity(2, 2)
            .kronecker(&commutation_matrix(2, 3))
            .kronecker(&DMatrix::<f64>::identity(3, 3));
        assert_eq!(permutation_matrix(map.entries()), dense);
    }

    #[test]
    fn khatri_rao_single_block_is_kronecker() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let a = random_matrix(&mut rng, 2, 2);
        let c = random_matrix(&mut rng, 3, 3);
        let out = khatri_rao_block(&BlockMatrix::new(vec![a.clone()]), &BlockMatrix::new(vec![c.clone()])).unwrap();
        assert_eq!(out, a.kronecker(&c));
    }

    #[test]
    fn khatri_rao_identity_left_factors() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let ps: Vec<_> = [2, 1, 3].iter().map(|&k| random_matrix(&mut rng, k, k)).collect();
        let id = BlockMatrix::new(vec![DMatrix::identity(2, 2); 3]);
        let out = khatri_rao_block(&id, &BlockMatrix::new(ps.clone())).unwrap();
        let expected = BlockMatrix::new(ps.iter().map(|p| DMatrix::<f64>::identity(2, 2).kronecker(p)).collect());
        assert_eq!(out, expected.to_dense());
    }

    #[test]
    fn khatri_rao_random_three_blocks_matches_dense() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let a: Vec<_> = (0..3).map(|_| random_matrix(&mut rng, 2, 2)).collect();
        let c: Vec<_> = [1, 2, 3].iter().map(|&k| random_matrix(&mut rng, k, k)).collect();
        let out = khatri_rao_block(&BlockMatrix::new(a.clone()), &BlockMatrix::new(c.clone())).unwrap();
        // Place each Kronecker block by hand.
        let mut expected = DMatrix::zeros(12, 12);
        let mut off = 0;
        for (ai, ci) in a.iter().zip(&c) {
            let k = ci.nrows();
            for (r1, c1, r2, c2) in itertools_product(2, 2, k, k) {
                expected[(off + r1 * k + r2, off + c1 * k + c2)] = ai[(r1, c1)] * ci[(r2, c2)];
            }
            off += 2 * k;
        }
        assert!((out - expected).abs().max() == 0.0);
    }

    fn itertools_product(a: usize, b: usize, c: usize, d: usize) -> Vec<(usize, usize, usize, usize)> {
        let mut v = Vec::new();
        for i in 0..a {
            for j in 0..b {
                for k in 0..c {
                    for l in 0..d {
                        v.push((i, j, k, l));
                    }
                }
            }
        }
        v
    }

    #[test]
    fn khatri_rao_rejects_block_count_mismatch() {
        let a = BlockMatrix::new(vec![DMatrix::identity(1, 1)]);
        let c = BlockMatrix::new(vec![DMatrix::identity(1, 1); 2]);
        assert!(khatri_rao_block(&a, &c).is_err());
    }

    #[test]
    fn beta_map_identity_cases() {
        assert!(beta_reorder_map(1, 2, 3, 4).unwrap().is_identity());
        assert!(beta_reorder_map(3, 4, 0, 0).unwrap().is_identity());
    }

    #[test]
    fn beta_map_on_labelled_matrix() {
        // B is 3x2 with rows (o, a, s) and entries labelled 10*row + col.
        // b = [B_o row; B_a row; B_s row] flattened per component:
        //   vec B_o = (B[0,0], B[0,1]) etc.
        let b = [0.0, 1.0, 10.0, 11.0, 20.0, 21.0];
        // β = vec B = (B[0,0], B[1,0], B[2,0], B[0,1], B[1,1], B[2,1]).
        let beta = [0.0, 10.0, 20.0, 1.0, 11.0, 21.0];
        let c = beta_reorder_map(2, 1, 1, 1).unwrap();
        assert_eq!(c.gather_vec(&b), beta);
        assert_eq!(c.inverse().gather_vec(&beta), b);
    }

    #[test]
    fn beta_map_permutes_covariance_preserving_determinant() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let layout = ComponentLayout::new(2, 2, 1, 2);
        let blocks_a: Vec<_> = (0..3)
            .map(|_| {
                let m = random_matrix(&mut rng, 2, 2);
                &m * m.transpose() + DMatrix::identity(2, 2)
            })
            .collect();
        let blocks_p: Vec<_> = [2, 1, 2]
            .iter()
            .map(|&k| {
                let m = random_matrix(&mut rng, k, k);
                &m * m.transpose() + DMatrix::identity(k, k)
            })
            .collect();
        let sigma_b = khatri_rao_block(&BlockMatrix::new(blocks_a), &BlockMatrix::new(blocks_p)).unwrap();
        let c = beta_reorder_map(layout.p, layout.q_o, layout.q_a, layout.q_s).unwrap();
        let sigma_beta = c.gather_cols(&c.gather_rows(&sigma_b));
        let rel = (sigma_b.determinant().abs() - sigma_beta.determinant().abs()).abs() / sigma_b.determinant().abs();
        assert!(rel < 1e-12);
        // The vec-level map agrees with the row/column permutation.
        let z = vec_reorder_map(&c);
        assert_eq!(z.gather_vec(sigma_b.as_slice()), sigma_beta.as_slice());
        // SPD blocks give an SPD product.
        assert!(sigma_b.clone().cholesky().is_some());
    }

    #[test]
    fn lemma1_translation_p1_unit_counts() {
        // p = 1, q = 3 (o, a, s one column each): the stacked and β orders
        // coincide, vec positions are col*3 + row. The surface block is the
        // (2,2) entry -> position 8; the additive block is (1,1) -> 4.
        let c = DMatrix::<f64>::identity(9, 9);
        let (cs, ca) = lemma1_slice(&c, 1, 1, 1, 1).unwrap();
        assert_eq!(cs.ncols(), 1);
        assert_eq!(ca.ncols(), 1);
        assert_eq!(cs.column(0).iter().position(|&v| v == 1.0), Some(8));
        assert_eq!(ca.column(0).iter().position(|&v| v == 1.0), Some(4));
    }

    #[test]
    fn lemma1_empty_surface_component() {
        let layout = ComponentLayout::new(2, 2, 1, 0);
        let pq = layout.p * layout.q();
        let c = DMatrix::<f64>::identity(pq * pq, pq * pq);
        let (cs, ca) = lemma1_slice(&c, 2, 2, 1, 0).unwrap();
        assert_eq!(cs.ncols(), 0);
        assert_eq!(ca.ncols(), 4);
    }

    #[test]
    fn component_slices_match_dense_materialised_derivative() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let layout = ComponentLayout::new(2, 2, 1, 2);
        let pq = layout.p * layout.q();
        let c = beta_reorder_map(layout.p, layout.q_o, layout.q_a, layout.q_s).unwrap();
        let z = vec_reorder_map(&c);
        let k = 3;
        // Random per-component derivative blocks ∂vec(block_i)/∂θ'.
        let derivs: Vec<DMatrix<f64>> = Component::ALL
            .iter()
            .map(|&comp| {
                let w = layout.p * layout.width(comp);
                random_matrix(&mut rng, w * w, k)
            })
            .collect();
        // Materialise ∂vec Σ_b⁻¹/∂θ' with all the structural zeros.
        let mut dense_b = DMatrix::zeros(pq * pq, k);
        for (comp, d) in Component::ALL.iter().zip(&derivs) {
            let w = layout.p * layout.width(*comp);
            let s = layout.stacked_offset(*comp);
            for v in 0..w {
                for u in 0..w {
                    let row = (s + v) * pq + (s + u);
                    dense_b.row_mut(row).copy_from(&d.row(v * w + u));
                }
            }
        }
        let dense_beta = z.gather_rows(&dense_b);
        let cmat = random_matrix(&mut rng, 2, pq * pq);
        let expected = &cmat * dense_beta;
        let mut got = DMatrix::zeros(2, k);
        for (comp, d) in Component::ALL.iter().zip(&derivs) {
            got += component_slice(&cmat, &layout, *comp).unwrap() * d;
        }
        assert!((got - expected).abs().max() < 1e-12);
    }

    #[test]
    fn lemma1_rejects_bad_width() {
        let c = DMatrix::<f64>::zeros(1, 5);
        assert!(lemma1_slice(&c, 1, 1, 1, 1).is_err());
    }

    #[test]
    fn kron_apply_matches_dense() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let a = random_matrix(&mut rng, 2, 3);
        let b = random_matrix(&mut rng, 4, 5);
        let x: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dense = a.kronecker(&b) * DVector::from_column_slice(&x);
        assert!((kron_apply(&a, &b, &x) - dense).norm() < 1e-12);
    }

    proptest! {
        #[test]
        fn commutation_gather_is_exact(m in 1usize..=8, n in 1usize..=8, cols in 1usize..4, seed in 0u64..1000) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let q = random_matrix(&mut rng, m * n, cols);
            prop_assert_eq!(commute_rows(m, n, &q).unwrap(), commutation_matrix(m, n) * &q);
            let r = random_matrix(&mut rng, cols, m * n);
            prop_assert_eq!(commute_cols(m, n, &r).unwrap(), &r * commutation_matrix(m, n));
        }

        #[test]
        fn index_map_inverse_roundtrip(n in 1usize..40, seed in 0u64..1000) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let mut entries: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = rng.random_range(0..=i);
                entries.swap(i, j);
            }
            let map = IndexMap::permutation(entries).unwrap();
            let v: Vec<f64> = (0..n).map(|i| i as f64).collect();
            prop_assert_eq!(map.inverse().gather_vec(&map.gather_vec(&v)), v);
        }
    }
}
