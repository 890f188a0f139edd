//! Dense linear algebra, the parameter store, and the finite-difference
//! gradient checker.
//!
//! Everything here is `f64` and row-major. Vectors are plain slices; the
//! encoder treats them as row vectors multiplied on the right by weight
//! matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest norm accepted by [`l2_normalize`].
pub const EPS_NORM: f64 = 1e-12;

/// Default central-difference step for [`check_gradient`].
pub const FD_STEP: f64 = 1e-5;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {pos} is {}", data[pos])));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().position(|r| r.len() != cols) {
            return Err(Error::Dimension(format!(
                "row {r} has {} columns, expected {cols}",
                rows[r].len()
            )));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|x| *x *= c);
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.get(r, c);
            }
        }
        t
    }

    /// `self += other`, shapes must agree.
    pub fn add_assign(&mut self, other: &DenseMatrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "cannot add {:?} to {:?}",
                other.shape(),
                self.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::Dimension(format!(
            "matmul of {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = DenseMatrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            for (o, bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Row vector times matrix: `x · w` with `x.len() == w.rows()`.
pub fn vecmat(x: &[f64], w: &DenseMatrix) -> Vec<f64> {
    debug_assert_eq!(x.len(), w.rows);
    let mut out = vec![0.0; w.cols];
    for (k, &xk) in x.iter().enumerate() {
        if xk == 0.0 {
            continue;
        }
        for (o, wkj) in out.iter_mut().zip(w.row(k)) {
            *o += xk * wkj;
        }
    }
    out
}

/// Matrix times column vector transposed: `w · g` with `g.len() == w.cols()`,
/// i.e. the backward pass of [`vecmat`] with respect to `x`.
pub fn mat_vec(w: &DenseMatrix, g: &[f64]) -> Vec<f64> {
    debug_assert_eq!(g.len(), w.cols);
    (0..w.rows).map(|r| dot(w.row(r), g)).collect()
}

/// `acc += xᵀ g`, the weight gradient of `x · w`.
pub fn add_outer(acc: &mut DenseMatrix, x: &[f64], g: &[f64]) {
    debug_assert_eq!(acc.rows, x.len());
    debug_assert_eq!(acc.cols, g.len());
    for (r, &xr) in x.iter().enumerate() {
        if xr == 0.0 {
            continue;
        }
        let row = &mut acc.data[r * acc.cols..(r + 1) * acc.cols];
        for (a, gj) in row.iter_mut().zip(g) {
            *a += xr * gj;
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Returns `v / ‖v‖₂`.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !n.is_finite() {
        return Err(Error::NonFinite(format!("vector norm is {n}")));
    }
    if n < EPS_NORM {
        return Err(Error::Degenerate(format!(
            "cannot normalize vector with norm {n:e} < {EPS_NORM:e}"
        )));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// One named parameter with its gradient accumulator and momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub value: DenseMatrix,
    pub grad: DenseMatrix,
    pub momentum: DenseMatrix,
}

impl ParamSlot {
    pub fn new(name: impl Into<String>, value: DenseMatrix) -> Self {
        let (r, c) = value.shape();
        Self {
            name: name.into(),
            value,
            grad: DenseMatrix::zeros(r, c),
            momentum: DenseMatrix::zeros(r, c),
        }
    }
}

/// Ordered collection of named parameter slots.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    slots: Vec<ParamSlot>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn single(name: impl Into<String>, value: DenseMatrix) -> Self {
        let mut s = Self::new();
        s.insert(name, value);
        s
    }

    /// Adds a slot and returns its index. Replaces an existing slot of the
    /// same name.
    pub fn insert(&mut self, name: impl Into<String>, value: DenseMatrix) -> usize {
        let name = name.into();
        if let Some(i) = self.index_of(&name) {
            self.slots[i] = ParamSlot::new(name, value);
            i
        } else {
            self.slots.push(ParamSlot::new(name, value));
            self.slots.len() - 1
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.slots.iter().position(|s| s.name == name)
    }

    pub fn slot(&self, i: usize) -> &ParamSlot {
        &self.slots[i]
    }

    pub fn slot_mut(&mut self, i: usize) -> &mut ParamSlot {
        &mut self.slots[i]
    }

    pub fn get(&self, name: &str) -> Option<&ParamSlot> {
        self.index_of(name).map(|i| &self.slots[i])
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn slots_mut(&mut self) -> &mut [ParamSlot] {
        &mut self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.slots.iter().map(|s| s.value.data.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for s in &mut self.slots {
            s.grad.fill(0.0);
        }
    }

    pub fn zero_momentum(&mut self) {
        for s in &mut self.slots {
            s.momentum.fill(0.0);
        }
    }

    /// Fresh zeroed buffers shaped like each slot's value, for accumulating
    /// gradients outside the store.
    pub fn grad_buffers(&self) -> Vec<DenseMatrix> {
        self.slots
            .iter()
            .map(|s| DenseMatrix::zeros(s.value.rows, s.value.cols))
            .collect()
    }

    /// Adds externally accumulated gradients into the slot accumulators.
    pub fn accumulate(&mut self, grads: &[DenseMatrix]) -> Result<()> {
        if grads.len() != self.slots.len() {
            return Err(Error::Dimension(format!(
                "{} gradient buffers for {} slots",
                grads.len(),
                self.slots.len()
            )));
        }
        for (s, g) in self.slots.iter_mut().zip(grads) {
            s.grad.add_assign(g)?;
        }
        Ok(())
    }

    /// Squared Euclidean norm over all parameter values.
    pub fn value_norm_sq(&self) -> f64 {
        self.slots
            .iter()
            .flat_map(|s| s.value.data.iter())
            .map(|v| v * v)
            .sum()
    }
}

/// Compares the analytic gradient stored in `point`'s gradient accumulators
/// against central finite differences of `f`, returning the largest
/// coordinate-wise relative error
/// `|g_a − g_fd| / max(1, |g_a|, |g_fd|)`.
pub fn check_gradient<F>(mut f: F, point: &ParamStore, step: f64) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut probe = point.clone();
    let mut worst = 0.0_f64;
    for s in 0..point.len() {
        for k in 0..point.slots[s].value.data.len() {
            let x0 = point.slots[s].value.data[k];

            probe.slots[s].value.data[k] = x0 + step;
            let fp = f(&probe)?;
            probe.slots[s].value.data[k] = x0 - step;
            let fm = f(&probe)?;
            probe.slots[s].value.data[k] = x0;

            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite(format!(
                    "objective not finite when perturbing {}[{k}]",
                    point.slots[s].name
                )));
            }
            let fd = (fp - fm) / (2.0 * step);
            let ga = point.slots[s].grad.data[k];
            let rel = (ga - fd).abs() / 1.0_f64.max(ga.abs()).max(fd.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identity_times_matrix() {
        let a = m(&[&[1.5, -2.0, 0.25], &[3.0, 4.0, -1.0]]);
        assert_eq!(matmul(&DenseMatrix::identity(2), &a).unwrap(), a);
    }

    #[test]
    fn small_product_by_hand() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = m(&[&[0.0], &[1.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), m(&[&[2.0], &[4.0]]));
    }

    #[test]
    fn ones_inner_product() {
        let k = 7;
        let a = DenseMatrix::from_vec(1, k, vec![1.0; k]).unwrap();
        let b = DenseMatrix::from_vec(k, 1, vec![1.0; k]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap(), m(&[&[k as f64]]));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = DenseMatrix::zeros(2, 3);
        let b = DenseMatrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(matches!(
            DenseMatrix::from_vec(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn vecmat_and_mat_vec_agree_with_matmul() {
        let w = m(&[&[1.0, 2.0, 3.0], &[-1.0, 0.5, 2.0]]);
        let x = [2.0, -3.0];
        let xm = DenseMatrix::from_vec(1, 2, x.to_vec()).unwrap();
        assert_eq!(vecmat(&x, &w), matmul(&xm, &w).unwrap().data().to_vec());
        let g = [1.0, 0.0, -1.0];
        let gm = DenseMatrix::from_vec(3, 1, g.to_vec()).unwrap();
        assert_eq!(mat_vec(&w, &g), matmul(&w, &gm).unwrap().data().to_vec());
    }

    #[test]
    fn normalize_three_four() {
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_unit_is_identity() {
        let u = [0.0, 1.0, 0.0];
        assert_eq!(l2_normalize(&u).unwrap(), u.to_vec());
    }

    #[test]
    fn normalize_zero_is_degenerate() {
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(Error::Degenerate(_))));
    }

    fn scalar_store(x: f64, g: f64) -> ParamStore {
        let mut s = ParamStore::single("x", DenseMatrix::from_vec(1, 1, vec![x]).unwrap());
        s.slot_mut(0).grad.data_mut()[0] = g;
        s
    }

    #[test]
    fn gradient_check_square() {
        let p = scalar_store(3.0, 6.0);
        let err = check_gradient(|s| Ok(s.slot(0).value.get(0, 0).powi(2)), &p, FD_STEP).unwrap();
        assert!(err <= 1e-7, "{err}");
    }

    #[test]
    fn gradient_check_constant() {
        let p = scalar_store(3.0, 0.0);
        assert_eq!(check_gradient(|_| Ok(4.2), &p, FD_STEP).unwrap(), 0.0);
    }

    #[test]
    fn gradient_check_norm() {
        let mut p = ParamStore::single("x", DenseMatrix::from_vec(1, 2, vec![3.0, 4.0]).unwrap());
        p.slot_mut(0).grad.data_mut().copy_from_slice(&[0.6, 0.8]);
        let err = check_gradient(|s| Ok(norm(s.slot(0).value.data())), &p, FD_STEP).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn gradient_check_detects_wrong_gradient() {
        let p = scalar_store(3.0, 5.0);
        let err = check_gradient(|s| Ok(s.slot(0).value.get(0, 0).powi(2)), &p, FD_STEP).unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn gradient_check_non_finite() {
        let p = scalar_store(0.0, 0.0);
        let r = check_gradient(|s| Ok(s.slot(0).value.get(0, 0).ln()), &p, FD_STEP);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn param_store_shapes_and_zeroing() {
        let mut s = ParamStore::new();
        s.insert("w", DenseMatrix::from_vec(2, 3, vec![1.0; 6]).unwrap());
        s.insert("b", DenseMatrix::zeros(1, 3));
        for slot in s.slots() {
            assert_eq!(slot.value.shape(), slot.grad.shape());
            assert_eq!(slot.value.shape(), slot.momentum.shape());
        }
        let mut bufs = s.grad_buffers();
        bufs[0].fill(2.0);
        s.accumulate(&bufs).unwrap();
        s.accumulate(&bufs).unwrap();
        assert!(s.slot(0).grad.data().iter().all(|&g| g == 4.0));
        s.zero_grads();
        assert!(s.slot(0).grad.data().iter().all(|&g| g == 0.0));
        assert_eq!(s.num_scalars(), 9);
    }

    fn matrix_strategy(r: usize, c: usize) -> impl Strategy<Value = DenseMatrix> {
        prop::collection::vec(-2.0..2.0f64, r * c)
            .prop_map(move |d| DenseMatrix::from_vec(r, c, d).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_is_associative(
            a in matrix_strategy(3, 4),
            b in matrix_strategy(4, 2),
            c in matrix_strategy(2, 5),
        ) {
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            for (x, y) in left.data().iter().zip(right.data()) {
                prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1.0));
            }
        }

        #[test]
        fn normalized_vectors_have_unit_norm(v in prop::collection::vec(-1e3..1e3f64, 1..32)) {
            prop_assume!(norm(&v) >= EPS_NORM);
            let u = l2_normalize(&v).unwrap();
            prop_assert!((norm(&u) - 1.0).abs() <= 1e-9);
        }
    }
}
