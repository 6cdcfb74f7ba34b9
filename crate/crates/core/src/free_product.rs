//! Free product of pointed correspondences, evaluated lazily on alternating words.
//!
//! A vector of `H = B xi (+) (+)_{words} H°_{j_1} (x) ... (x) H°_{j_k}` is stored as a
//! map from words to exact coordinate matrices. The component at `(j_1, ..., j_k)`
//! has rows indexed by `(a_1, ..., a_k, p)` (lexicographic, `a_i < s°_{j_i}`,
//! `p < d`), i.e. it is the canonical-form vector of the tensor product of the
//! complements. The empty word holds the `B xi` coefficient.
//!
//! Operators are applied right to left with look-ahead pruning: when only `r`
//! length-changing operators remain and the caller reads components of length
//! at most `t`, words longer than `r + t` can never contribute and are dropped.
//! Pruning of that kind is exact. Content pushed beyond the hard depth `L` marks
//! the vector as truncated and any read of it fails.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::Serialize;

use crate::correspondence::PointedCorrespondence;
use crate::error::{Error, Result};
use crate::linalg::{eye, matrix_unit, max_abs, random_complex, zeros, AmpElem, BElem, Mat, Tolerances, ZERO};

pub type Word = Vec<usize>;

/// A vector (or a row of `cols / d` vectors side by side) of the free product.
#[derive(Debug, Clone)]
pub struct WordVector {
    cols: usize,
    comps: BTreeMap<Word, Mat>,
    truncated: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComponentInfo {
    pub word: Word,
    pub terms: usize,
    pub norm: f64,
}

impl WordVector {
    pub fn zero(cols: usize) -> Self {
        WordVector {
            cols,
            comps: BTreeMap::new(),
            truncated: false,
        }
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn component(&self, w: &[usize]) -> Option<&Mat> {
        self.comps.get(w)
    }

    pub fn words(&self) -> impl Iterator<Item = &Word> {
        self.comps.keys()
    }

    pub fn set(&mut self, w: Word, m: Mat) {
        debug_assert_eq!(m.ncols(), self.cols);
        self.comps.insert(w, m);
    }

    pub fn is_truncated(&self) -> bool {
        self.truncated
    }

    pub fn max_len(&self) -> usize {
        self.comps.keys().map(|w| w.len()).max().unwrap_or(0)
    }

    pub fn add_assign(&mut self, other: &WordVector) {
        debug_assert_eq!(self.cols, other.cols);
        for (w, m) in &other.comps {
            match self.comps.get_mut(w) {
                Some(x) => *x += m,
                None => {
                    self.comps.insert(w.clone(), m.clone());
                }
            }
        }
        self.truncated |= other.truncated;
    }

    /// `<self, other>`, summed word by word.
    pub fn inner(&self, other: &WordVector) -> Mat {
        let mut out = zeros(self.cols, other.cols);
        for (w, x) in &self.comps {
            if let Some(y) = other.comps.get(w) {
                out += x.adjoint() * y;
            }
        }
        out
    }

    /// Right multiplication by a `cols x cols'` matrix.
    pub fn mul_right(&self, b: &Mat) -> WordVector {
        WordVector {
            cols: b.ncols(),
            comps: self.comps.iter().map(|(w, x)| (w.clone(), x * b)).collect(),
            truncated: self.truncated,
        }
    }

    /// Left action of `b in B` on every component.
    pub fn left_mul(&self, d: usize, b: &BElem) -> WordVector {
        let mut out = WordVector::zero(self.cols);
        out.truncated = self.truncated;
        for (w, x) in &self.comps {
            let nb = x.nrows() / d;
            out.comps
                .insert(w.clone(), from_wide(&(b * to_wide(x, d, nb)), d, nb, self.cols));
        }
        out
    }

    pub fn diagnostics(&self) -> Vec<ComponentInfo> {
        self.comps
            .iter()
            .map(|(w, x)| ComponentInfo {
                word: w.clone(),
                terms: 1,
                norm: x.norm(),
            })
            .collect()
    }
}

/// `x` with rows `(A, p)` as the `d x (nb * cols)` matrix with columns `(A, c)`.
fn to_wide(x: &Mat, d: usize, nb: usize) -> Mat {
    let cols = x.ncols();
    let mut w = zeros(d, nb * cols);
    for a in 0..nb {
        w.view_mut((0, a * cols), (d, cols))
            .copy_from(&x.view((a * d, 0), (d, cols)));
    }
    w
}

fn from_wide(w: &Mat, d: usize, nb: usize, cols: usize) -> Mat {
    let mut x = zeros(nb * d, cols);
    for a in 0..nb {
        x.view_mut((a * d, 0), (d, cols))
            .copy_from(&w.view((0, a * cols), (d, cols)));
    }
    x
}

fn is_zero(m: &Mat) -> bool {
    m.iter().all(|z| *z == ZERO)
}

/// An operator on the free product, built by [`FreeProduct::embed`] and friends.
#[derive(Debug, Clone)]
pub enum Op {
    /// `rho_j(T)`, stored in the rotated coordinates `U_j^* T U_j`.
    Embed { factor: usize, rotated: Mat },
    /// Left action of `z in M_n(B)` on `n`-tuples of vectors.
    Left(AmpElem),
    /// Sum of operators.
    Sum(Vec<Op>),
}

impl Op {
    /// Maximal change of word length caused by the operator.
    pub fn reach(&self) -> usize {
        match self {
            Op::Embed { .. } => 1,
            Op::Left(_) => 0,
            Op::Sum(ops) => ops.iter().map(Op::reach).max().unwrap_or(0),
        }
    }

    pub fn left(b: &BElem) -> Op {
        Op::Left(AmpElem::from_b(b))
    }
}

fn reach_of(ops: &[Op]) -> usize {
    ops.iter().map(Op::reach).sum()
}

/// The (lazily truncated) free product `*_j (H_j, xi_j)`.
#[derive(Debug, Clone)]
pub struct FreeProduct {
    d: usize,
    depth: usize,
    factors: Vec<PointedCorrespondence>,
    rotations: Vec<Mat>,
    sc: Vec<usize>,
}

impl FreeProduct {
    pub fn new(factors: Vec<PointedCorrespondence>, depth: usize, tol: &Tolerances) -> Result<Self> {
        let d = factors
            .first()
            .map(|f| f.d())
            .ok_or_else(|| Error::Dimension("free product of no factors".into()))?;
        if depth == 0 {
            return Err(Error::Domain("truncation depth must be at least 1".into()));
        }
        for (j, f) in factors.iter().enumerate() {
            if f.d() != d {
                return Err(Error::Dimension(format!("factor {j} is over a different B")));
            }
            let rep = f.validate(tol)?;
            if !rep.pass {
                return Err(Error::Domain(format!(
                    "factor {j} is not pointed by a B-central unit vector ({:.3e})",
                    rep.worst
                )));
            }
        }
        let rotations = factors.iter().map(|f| f.splitting_unitary()).collect();
        let sc = factors.iter().map(|f| f.s() - 1).collect();
        Ok(FreeProduct {
            d,
            depth,
            factors,
            rotations,
            sc,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn factors(&self) -> &[PointedCorrespondence] {
        &self.factors
    }

    /// Number of blocks of the component at `w`.
    pub fn word_blocks(&self, w: &[usize]) -> usize {
        w.iter().map(|&j| self.sc[j]).product()
    }

    /// Number of alternating words of each length `0..=depth` with non-zero component space.
    pub fn word_counts(&self) -> Vec<usize> {
        let n = self.factors.len();
        let live: Vec<usize> = (0..n).filter(|&j| self.sc[j] > 0).collect();
        let mut counts = vec![1usize];
        let mut last: Vec<usize> = live.iter().map(|_| 1).collect();
        for _ in 1..=self.depth {
            counts.push(last.iter().sum());
            let total: usize = last.iter().sum();
            last = last.iter().map(|&c| total - c).collect();
        }
        counts
    }

    /// Scalar dimension of the truncated space.
    pub fn truncated_dimension(&self) -> usize {
        fn go(fp: &FreeProduct, last: Option<usize>, len: usize, blocks: usize) -> usize {
            let mut total = blocks * fp.d * fp.d;
            if len == fp.depth {
                return total;
            }
            for j in 0..fp.factors.len() {
                if Some(j) != last && fp.sc[j] > 0 {
                    total += go(fp, Some(j), len + 1, blocks * fp.sc[j]);
                }
            }
            total
        }
        go(self, None, 0, 1)
    }

    pub fn embed(&self, j: usize, t: &Mat) -> Result<Op> {
        let f = self
            .factors
            .get(j)
            .ok_or_else(|| Error::Dimension(format!("no factor {j}")))?;
        f.module().check_operator(t)?;
        let u = &self.rotations[j];
        Ok(Op::Embed {
            factor: j,
            rotated: u.adjoint() * t * u,
        })
    }

    /// `xi`, `n` copies side by side in an `n`-tuple: entry `i` has `I_d` in column block `i`.
    pub fn xi_tuple(&self, n: usize) -> Vec<WordVector> {
        let d = self.d;
        (0..n)
            .map(|i| {
                let mut v = WordVector::zero(n * d);
                let mut m = zeros(d, n * d);
                m.view_mut((0, i * d), (d, d)).copy_from(&eye(d));
                v.set(Vec::new(), m);
                v
            })
            .collect()
    }

    pub fn xi(&self) -> WordVector {
        self.xi_tuple(1).pop().expect("one entry")
    }

    /// The image of a vector `h` of `H_j` (columns may hold several vectors).
    pub fn from_factor_vector(&self, j: usize, h: &Mat) -> WordVector {
        let d = self.d;
        let y = self.rotations[j].adjoint() * h;
        let mut v = WordVector::zero(h.ncols());
        v.set(Vec::new(), y.rows(0, d).into_owned());
        if self.sc[j] > 0 {
            v.set(vec![j], y.rows(d, self.sc[j] * d).into_owned());
        }
        v
    }

    fn place(&self, out: &mut WordVector, w: Word, m: Mat, keep: usize) {
        if is_zero(&m) {
            return;
        }
        if w.len() > keep {
            if w.len() > self.depth {
                out.truncated = true;
            }
            return;
        }
        match out.comps.get_mut(&w) {
            Some(x) => *x += m,
            None => {
                out.comps.insert(w, m);
            }
        }
    }

    fn apply_embedded(&self, j: usize, rotated: &Mat, x: &WordVector, keep: usize) -> WordVector {
        let d = self.d;
        let sc = self.sc[j];
        let cols = x.cols;
        let mut bases: BTreeSet<Word> = BTreeSet::new();
        for w in x.comps.keys() {
            if w.first() == Some(&j) {
                bases.insert(w[1..].to_vec());
            } else {
                bases.insert(w.clone());
            }
        }
        let mut out = WordVector::zero(cols);
        out.truncated = x.truncated;
        for base in bases {
            let nb = self.word_blocks(&base);
            let mut y = zeros((1 + sc) * d, nb * cols);
            if let Some(x0) = x.comps.get(&base) {
                y.rows_mut(0, d).copy_from(&to_wide(x0, d, nb));
            }
            let mut jw = Vec::with_capacity(base.len() + 1);
            jw.push(j);
            jw.extend_from_slice(&base);
            if let Some(xj) = x.comps.get(&jw) {
                for a in 0..sc {
                    let chunk = xj.rows(a * nb * d, nb * d).into_owned();
                    y.rows_mut((1 + a) * d, d).copy_from(&to_wide(&chunk, d, nb));
                }
            }
            let yp = rotated * y;
            let top = from_wide(&yp.rows(0, d).into_owned(), d, nb, cols);
            self.place(&mut out, base, top, keep);
            if sc > 0 {
                let mut comp = zeros(sc * nb * d, cols);
                for a in 0..sc {
                    let chunk = from_wide(&yp.rows((1 + a) * d, d).into_owned(), d, nb, cols);
                    comp.rows_mut(a * nb * d, nb * d).copy_from(&chunk);
                }
                self.place(&mut out, jw, comp, keep);
            }
        }
        out
    }

    /// Apply one operator to an `n`-tuple, keeping words of length `<= keep`.
    pub fn apply(&self, op: &Op, x: &[WordVector], keep: usize) -> Result<Vec<WordVector>> {
        match op {
            Op::Embed { factor, rotated } => Ok(x
                .iter()
                .map(|v| self.apply_embedded(*factor, rotated, v, keep))
                .collect()),
            Op::Left(z) => {
                if z.n() != x.len() || z.d() != self.d {
                    return Err(Error::Dimension(format!(
                        "left action of M_{}(B) on a {}-tuple",
                        z.n(),
                        x.len()
                    )));
                }
                let n = x.len();
                let cols = x.first().map(|v| v.cols).unwrap_or(0);
                let mut out = Vec::with_capacity(n);
                for i in 0..n {
                    let mut acc = WordVector::zero(cols);
                    for (k, xk) in x.iter().enumerate() {
                        let b = z.block(i, k);
                        if max_abs(&b) == 0.0 {
                            acc.truncated |= xk.truncated;
                            continue;
                        }
                        acc.add_assign(&xk.left_mul(self.d, &b));
                    }
                    out.push(acc);
                }
                Ok(out)
            }
            Op::Sum(ops) => {
                let mut acc: Option<Vec<WordVector>> = None;
                for o in ops {
                    let y = self.apply(o, x, keep)?;
                    acc = Some(match acc {
                        None => y,
                        Some(mut a) => {
                            for (ai, yi) in a.iter_mut().zip(&y) {
                                ai.add_assign(yi);
                            }
                            a
                        }
                    });
                }
                Ok(acc.unwrap_or_else(|| {
                    x.iter().map(|v| WordVector::zero(v.cols)).collect()
                }))
            }
        }
    }

    /// Apply the product `ops[0] ops[1] ... ops[m-1]` (rightmost first); the result is
    /// exact on words of length `<= target`.
    pub fn apply_product(&self, ops: &[Op], x: &[WordVector], target: usize) -> Result<Vec<WordVector>> {
        let mut v = x.to_vec();
        let mut remaining = reach_of(ops);
        for op in ops.iter().rev() {
            remaining -= op.reach();
            v = self.apply(op, &v, target + remaining)?;
        }
        Ok(v)
    }

    fn check_budget(&self, ops: usize) -> Result<()> {
        if ops > self.depth {
            return Err(Error::Truncation(format!(
                "{ops} embedded operators exceed the truncation depth {}",
                self.depth
            )));
        }
        Ok(())
    }

    /// `E^{(n)}[T] = <xi, T xi>` for `T = ops[0] ... ops[m-1]`, acting on `n`-tuples.
    pub fn expectation_amplified(&self, ops: &[Op], n: usize) -> Result<AmpElem> {
        self.check_budget(reach_of(ops))?;
        let v = self.apply_product(ops, &self.xi_tuple(n), 0)?;
        self.read_expectation(&v, n)
    }

    pub fn expectation(&self, ops: &[Op]) -> Result<BElem> {
        Ok(self.expectation_amplified(ops, 1)?.into_mat())
    }

    fn read_expectation(&self, v: &[WordVector], n: usize) -> Result<AmpElem> {
        let d = self.d;
        let mut out = zeros(n * d, n * d);
        for (i, vi) in v.iter().enumerate() {
            if vi.truncated {
                return Err(Error::Truncation("result depends on truncated content".into()));
            }
            if let Some(m) = vi.comps.get(&Vec::new()) {
                out.view_mut((i * d, 0), (d, n * d)).copy_from(m);
            }
        }
        AmpElem::new(d, n, out)
    }

    /// The basis of the embedded copy of `H_j` as a single vector with `s_j d` columns.
    fn factor_basis(&self, j: usize) -> WordVector {
        let (d, sc) = (self.d, self.sc[j]);
        let rows = self.factors[j].s() * d;
        let mut start = WordVector::zero(rows);
        let mut e0 = zeros(d, rows);
        e0.view_mut((0, 0), (d, d)).copy_from(&eye(d));
        start.set(Vec::new(), e0);
        if sc > 0 {
            let mut ej = zeros(sc * d, rows);
            ej.view_mut((0, d), (sc * d, sc * d)).copy_from(&eye(sc * d));
            start.set(vec![j], ej);
        }
        start
    }

    fn read_factor(&self, j: usize, v: &WordVector) -> Result<Mat> {
        if v.truncated {
            return Err(Error::Truncation("result depends on truncated content".into()));
        }
        let (d, sc) = (self.d, self.sc[j]);
        let rows = self.factors[j].s() * d;
        let mut rot = zeros(rows, rows);
        if let Some(m) = v.comps.get(&Vec::new()) {
            rot.rows_mut(0, d).copy_from(m);
        }
        if sc > 0 {
            if let Some(m) = v.comps.get(&vec![j]) {
                rot.rows_mut(d, sc * d).copy_from(m);
            }
        }
        let u = &self.rotations[j];
        Ok(u * rot * u.adjoint())
    }

    /// `E_j[T]`: the compression of `T` to the embedded copy of `H_j`.
    pub fn cond_expectation(&self, j: usize, ops: &[Op]) -> Result<Mat> {
        self.check_budget(reach_of(ops))?;
        let v = self.apply_product(ops, &[self.factor_basis(j)], 1)?.pop().expect("one entry");
        self.read_factor(j, &v)
    }

    /// `sum_{k=0}^{K} pre step^k post` applied to `start`, exact on words of length `<= target`.
    /// The powers are built incrementally, pruned to what later factors can still reach.
    pub fn apply_series(
        &self,
        pre: &[Op],
        step: &[Op],
        post: &[Op],
        terms: usize,
        start: &[WordVector],
        target: usize,
    ) -> Result<Vec<WordVector>> {
        let (rp, rs) = (reach_of(pre), reach_of(step));
        self.check_budget(rp + terms * rs + reach_of(post))?;
        let mut v = self.apply_product(post, start, target + rp + terms * rs)?;
        let mut acc: Vec<WordVector> = start.iter().map(|x| WordVector::zero(x.cols())).collect();
        for k in 0..=terms {
            let term = self.apply_product(pre, &v, target)?;
            for (a, t) in acc.iter_mut().zip(&term) {
                a.add_assign(t);
            }
            if k < terms {
                v = self.apply_product(step, &v, target + rp + (terms - k - 1) * rs)?;
            }
        }
        Ok(acc)
    }

    /// `E^{(n)}[sum_{k=0}^{K} pre step^k post]`.
    pub fn series_expectation_amplified(
        &self,
        pre: &[Op],
        step: &[Op],
        post: &[Op],
        terms: usize,
        n: usize,
    ) -> Result<AmpElem> {
        let v = self.apply_series(pre, step, post, terms, &self.xi_tuple(n), 0)?;
        self.read_expectation(&v, n)
    }

    /// `E_j[sum_{k=0}^{K} pre step^k post]` as an operator on `H_j`.
    pub fn series_cond_expectation(&self, j: usize, pre: &[Op], step: &[Op], post: &[Op], terms: usize) -> Result<Mat> {
        let v = self
            .apply_series(pre, step, post, terms, &[self.factor_basis(j)], 1)?
            .pop()
            .expect("one entry");
        self.read_factor(j, &v)
    }

    /// Multilinear moments `E[pre seg E_{i_1} seg E_{i_2} ... E_{i_{k-1}} seg post]` for all
    /// matrix-unit multi-indices, index `sum_r i_r (d^2)^{k-1-r}`. Suffixes are shared.
    pub fn multilinear(&self, pre: &[Op], seg: &[Op], post: &[Op], k: usize) -> Result<Vec<BElem>> {
        if k == 0 {
            return Err(Error::Domain("multilinear moments need at least one segment".into()));
        }
        let rp = reach_of(pre);
        let rs = reach_of(seg);
        self.check_budget(rp + k * rs + reach_of(post))?;
        let d = self.d;
        let dd = d * d;
        let units: Vec<Op> = (0..dd).map(|i| Op::left(&matrix_unit(d, i / d, i % d))).collect();
        let mut out = vec![zeros(d, d); dd.pow((k - 1) as u32)];
        let start = vec![self.xi()];
        let v = self.apply_product(post, &start, rp + k * rs)?;
        let v = self.apply_product(seg, &v, rp + (k - 1) * rs)?;
        self.multilinear_rec(pre, seg, &units, v, k - 1, k, 0, rp, rs, &mut out)?;
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn multilinear_rec(
        &self,
        pre: &[Op],
        seg: &[Op],
        units: &[Op],
        v: Vec<WordVector>,
        left: usize,
        k: usize,
        index: usize,
        rp: usize,
        rs: usize,
        out: &mut [BElem],
    ) -> Result<()> {
        if left == 0 {
            let w = self.apply_product(pre, &v, 0)?.pop().expect("one entry");
            if w.truncated {
                return Err(Error::Truncation("result depends on truncated content".into()));
            }
            if let Some(m) = w.comps.get(&Vec::new()) {
                out[index] = m.clone();
            }
            return Ok(());
        }
        let dd = units.len();
        let weight = dd.pow((k - 1 - left) as u32);
        for (i, unit) in units.iter().enumerate() {
            let w = self.apply(unit, &v, rp + left * rs)?;
            if w.iter().all(|x| x.comps.is_empty()) {
                continue;
            }
            let w = self.apply_product(seg, &w, rp + (left - 1) * rs)?;
            self.multilinear_rec(pre, seg, units, w, left - 1, k, index + i * weight, rp, rs, out)?;
        }
        Ok(())
    }
}

/// Outcome of [`freeness_selftest`].
#[derive(Debug, Clone, Serialize)]
pub struct FreenessReport {
    pub patterns: usize,
    pub max_violation: f64,
    pub pass: bool,
}

/// Random operator on `H_j` with `E_j[a] = 0`.
pub fn random_centered<R: Rng + ?Sized>(rng: &mut R, f: &PointedCorrespondence) -> Mat {
    let n = f.s() * f.d();
    let a = random_complex(rng, n, n);
    let e = f.expectation(&a).expect("sizes agree");
    a - f.module().left_action(&e)
}

/// Alternating products of random centered operators of length `<= m` have expectation 0.
pub fn freeness_selftest<R: Rng + ?Sized>(
    fp: &FreeProduct,
    m: usize,
    rng: &mut R,
    tol: &Tolerances,
) -> Result<FreenessReport> {
    let n = fp.factors.len();
    let mut patterns = 0;
    let mut worst = 0.0f64;
    let mut stack: Vec<Vec<usize>> = (0..n).map(|j| vec![j]).collect();
    while let Some(p) = stack.pop() {
        let ops: Vec<Op> = p
            .iter()
            .map(|&j| fp.embed(j, &random_centered(rng, &fp.factors[j])))
            .collect::<Result<_>>()?;
        let e = fp.expectation(&ops)?;
        worst = worst.max(max_abs(&e));
        patterns += 1;
        if p.len() < m {
            for j in 0..n {
                if Some(&j) != p.last() {
                    let mut q = p.clone();
                    q.push(j);
                    stack.push(q);
                }
            }
        }
    }
    Ok(FreenessReport {
        patterns,
        max_violation: worst,
        pass: worst <= tol.eq_tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{random_hermitian, random_unit_vector, r};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tol() -> Tolerances {
        Tolerances::default()
    }

    fn random_pointed(rng: &mut ChaCha8Rng, d: usize, s: usize) -> PointedCorrespondence {
        PointedCorrespondence::new(d, random_unit_vector(rng, s)).unwrap()
    }

    /// Jacobi matrix of the semicircle truncated to `m` levels (exact to degree `2m - 1`).
    fn semicircle_jacobi(m: usize) -> Mat {
        let mut x = zeros(m, m);
        for i in 0..m - 1 {
            x[(i, i + 1)] = r(1.0);
            x[(i + 1, i)] = r(1.0);
        }
        x
    }

    #[test]
    fn free_product_examples() {
        let t = tol();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        // single factor: words are empty and (0)
        let f = random_pointed(&mut rng, 2, 3);
        let fp = FreeProduct::new(vec![f.clone()], 4, &t).unwrap();
        assert_eq!(fp.word_counts(), vec![1, 1, 0, 0, 0]);
        let a = random_complex(&mut rng, 6, 6);
        let e = fp.expectation(&[fp.embed(0, &a).unwrap()]).unwrap();
        assert!(max_abs(&(e - f.expectation(&a).unwrap())) < 1e-12);

        // trivial complements
        let fp = FreeProduct::new(
            vec![PointedCorrespondence::trivial(2), PointedCorrespondence::trivial(2)],
            5,
            &t,
        )
        .unwrap();
        assert_eq!(fp.truncated_dimension(), 4);

        // d = 1, one-dimensional complements: two words of each positive length
        let fp = FreeProduct::new(
            vec![PointedCorrespondence::standard(1, 2), PointedCorrespondence::standard(1, 2)],
            6,
            &t,
        )
        .unwrap();
        assert_eq!(fp.word_counts(), vec![1, 2, 2, 2, 2, 2, 2]);
        assert_eq!(fp.truncated_dimension(), 1 + 2 * 6);
    }

    #[test]
    fn embed_examples() {
        let t = tol();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let f1 = random_pointed(&mut rng, 2, 2);
        let f2 = random_pointed(&mut rng, 2, 3);
        let fp = FreeProduct::new(vec![f1.clone(), f2.clone()], 6, &t).unwrap();
        // rho_j(b) is the global left action
        let b = random_complex(&mut rng, 2, 2);
        let y = random_complex(&mut rng, 6, 6);
        let v = fp
            .apply_product(&[fp.embed(1, &y).unwrap(), fp.embed(0, &random_complex(&mut rng, 4, 4)).unwrap()], &[fp.xi()], 6)
            .unwrap();
        for j in 0..2 {
            let lb = fp.factors()[j].module().left_action(&b);
            let w = fp.apply(&fp.embed(j, &lb).unwrap(), &v, 6).unwrap();
            let expected = v[0].left_mul(2, &b);
            for word in expected.words() {
                let diff = w[0].component(word).unwrap() - expected.component(word).unwrap();
                assert!(max_abs(&diff) < 1e-12);
            }
        }
        // expectation preserving
        let a = random_complex(&mut rng, 6, 6);
        let e = fp.expectation(&[fp.embed(1, &a).unwrap()]).unwrap();
        assert!(max_abs(&(e - f2.expectation(&a).unwrap())) < 1e-12);
        // centered a sends xi into the word (1)
        let a0 = random_centered(&mut rng, &f2);
        let w = fp.apply(&fp.embed(1, &a0).unwrap(), &[fp.xi()], 6).unwrap();
        for word in w[0].words() {
            if word != &vec![1usize] {
                assert!(max_abs(w[0].component(word).unwrap()) < 1e-12);
            }
        }
        assert!(w[0].component(&[1]).is_some());
    }

    #[test]
    fn expectation_examples() {
        let t = tol();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let f1 = random_pointed(&mut rng, 2, 2);
        let f2 = random_pointed(&mut rng, 2, 3);
        let fp = FreeProduct::new(vec![f1.clone(), f2.clone()], 4, &t).unwrap();
        assert!(max_abs(&(fp.expectation(&[]).unwrap() - eye(2))) < 1e-15);
        let ops = [
            fp.embed(0, &random_centered(&mut rng, &f1)).unwrap(),
            fp.embed(1, &random_centered(&mut rng, &f2)).unwrap(),
        ];
        assert!(max_abs(&fp.expectation(&ops).unwrap()) < 1e-12);

        // free semicirculars: the only pairings of XYXY cross, so E[XYXY] = 0
        let m = 4;
        let sc = PointedCorrespondence::standard(1, m);
        let fp = FreeProduct::new(vec![sc.clone(), sc], 4, &t).unwrap();
        let x = semicircle_jacobi(m);
        let ops = [
            fp.embed(0, &x).unwrap(),
            fp.embed(1, &x).unwrap(),
            fp.embed(0, &x).unwrap(),
            fp.embed(1, &x).unwrap(),
        ];
        let e = fp.expectation(&ops).unwrap();
        assert!(e[(0, 0)].norm() < 1e-12);
        // XXYY and XYYX each have one non-crossing pairing
        let ops2 = [ops[0].clone(), ops[0].clone(), ops[1].clone(), ops[1].clone()];
        assert!((fp.expectation(&ops2).unwrap()[(0, 0)] - r(1.0)).norm() < 1e-12);
        let ops3 = [ops[0].clone(), ops[1].clone(), ops[1].clone(), ops[0].clone()];
        assert!((fp.expectation(&ops3).unwrap()[(0, 0)] - r(1.0)).norm() < 1e-12);

        // too many operators for the depth
        let ops5 = vec![ops[0].clone(); 5];
        assert!(matches!(fp.expectation(&ops5), Err(Error::Truncation(_))));
    }

    #[test]
    fn cond_expectation_examples() {
        let t = tol();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let f1 = random_pointed(&mut rng, 2, 3);
        let f2 = random_pointed(&mut rng, 2, 2);
        let fp = FreeProduct::new(vec![f1.clone(), f2.clone()], 5, &t).unwrap();
        let a = random_complex(&mut rng, 6, 6);
        let ce = fp.cond_expectation(0, &[fp.embed(0, &a).unwrap()]).unwrap();
        assert!(max_abs(&(ce - &a)) < 1e-12);

        let b0 = random_centered(&mut rng, &f2);
        let ce = fp.cond_expectation(0, &[fp.embed(1, &b0).unwrap()]).unwrap();
        assert!(max_abs(&ce) < 1e-12);

        let ops = [
            fp.embed(0, &random_centered(&mut rng, &f1)).unwrap(),
            fp.embed(1, &random_centered(&mut rng, &f2)).unwrap(),
            fp.embed(0, &random_centered(&mut rng, &f1)).unwrap(),
        ];
        assert!(max_abs(&fp.cond_expectation(0, &ops).unwrap()) < 1e-12);
    }

    #[test]
    fn cond_expectation_properties() {
        let t = tol();
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let f1 = random_pointed(&mut rng, 2, 2);
        let f2 = random_pointed(&mut rng, 2, 3);
        let fp = FreeProduct::new(vec![f1.clone(), f2.clone()], 6, &t).unwrap();
        let a1 = random_complex(&mut rng, 4, 4);
        let a2 = random_complex(&mut rng, 6, 6);
        let a3 = random_complex(&mut rng, 4, 4);
        let ops = vec![
            fp.embed(0, &a1).unwrap(),
            fp.embed(1, &a2).unwrap(),
            fp.embed(0, &a3).unwrap(),
        ];
        let ce = fp.cond_expectation(0, &ops).unwrap();
        // bimodular
        let b1 = random_complex(&mut rng, 2, 2);
        let b2 = random_complex(&mut rng, 2, 2);
        let mut wrapped = vec![Op::left(&b1)];
        wrapped.extend(ops.iter().cloned());
        wrapped.push(Op::left(&b2));
        let ce2 = fp.cond_expectation(0, &wrapped).unwrap();
        let m = f1.module();
        assert!(max_abs(&(ce2 - m.left_action(&b1) * &ce * m.left_action(&b2))) < 1e-12);
        // E o E_0 = E
        let lhs = f1.expectation(&ce).unwrap();
        let rhs = fp.expectation(&ops).unwrap();
        assert!(max_abs(&(lhs - rhs)) < 1e-12);
        // explicit formula: E_0[a1 rho(a2) a3] = a1 (I (x) E[a2]) a3 for the free copy
        let e2 = f2.expectation(&a2).unwrap();
        let expected = &a1 * m.left_action(&e2) * &a3;
        assert!(max_abs(&(fp.cond_expectation(0, &ops).unwrap() - expected)) < 1e-12);
    }

    #[test]
    fn freeness_selftest_passes() {
        let t = tol();
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let fs: Vec<PointedCorrespondence> = (0..3).map(|_| random_pointed(&mut rng, 2, 2)).collect();
        let fp = FreeProduct::new(fs, 5, &t).unwrap();
        let rep = freeness_selftest(&fp, 5, &mut rng, &t).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert_eq!(rep.patterns, 3 + 6 + 12 + 24 + 48);
        let rep1 = freeness_selftest(&fp, 1, &mut rng, &t).unwrap();
        assert!(rep1.max_violation < 1e-12);
    }

    #[test]
    fn single_factor_moments_are_faithful() {
        let t = tol();
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let f = random_pointed(&mut rng, 2, 3);
        let x = random_hermitian(&mut rng, 6);
        let fp = FreeProduct::new(vec![f.clone()], 6, &t).unwrap();
        let m = f.module();
        for k in 0..=6 {
            let bs: Vec<Mat> = (0..=k).map(|_| random_complex(&mut rng, 2, 2)).collect();
            let mut ops = vec![Op::left(&bs[0])];
            let mut direct = m.left_action(&bs[0]);
            for b in &bs[1..] {
                ops.push(fp.embed(0, &x).unwrap());
                ops.push(Op::left(b));
                direct = direct * &x * m.left_action(b);
            }
            let e = fp.expectation(&ops).unwrap();
            assert!(max_abs(&(e - f.expectation(&direct).unwrap())) < 1e-10);
        }
    }

    #[test]
    fn multilinear_matches_direct_products() {
        let t = tol();
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let f1 = random_pointed(&mut rng, 2, 2);
        let f2 = random_pointed(&mut rng, 2, 2);
        let fp = FreeProduct::new(vec![f1, f2], 8, &t).unwrap();
        let x = fp.embed(0, &random_hermitian(&mut rng, 4)).unwrap();
        let y = fp.embed(1, &random_hermitian(&mut rng, 4)).unwrap();
        let seg = [Op::Sum(vec![x, y])];
        let k = 3;
        let vals = fp.multilinear(&[], &seg, &[], k).unwrap();
        assert_eq!(vals.len(), 16);
        for (idx, val) in vals.iter().enumerate() {
            let (i1, i2) = (idx / 4, idx % 4);
            let ops = vec![
                seg[0].clone(),
                Op::left(&matrix_unit(2, i1 / 2, i1 % 2)),
                seg[0].clone(),
                Op::left(&matrix_unit(2, i2 / 2, i2 % 2)),
                seg[0].clone(),
            ];
            let e = fp.expectation(&ops).unwrap();
            assert!(max_abs(&(e - val)) < 1e-12);
        }
    }

    #[test]
    fn amplified_expectation_is_blockwise() {
        let t = tol();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let f1 = random_pointed(&mut rng, 2, 2);
        let f2 = random_pointed(&mut rng, 2, 2);
        let fp = FreeProduct::new(vec![f1, f2], 6, &t).unwrap();
        let x = fp.embed(0, &random_hermitian(&mut rng, 4)).unwrap();
        let y = fp.embed(1, &random_hermitian(&mut rng, 4)).unwrap();
        let z = AmpElem::new(2, 2, random_complex(&mut rng, 4, 4)).unwrap();
        let ops = vec![x.clone(), Op::Left(z.clone()), y.clone(), x.clone()];
        let e = fp.expectation_amplified(&ops, 2).unwrap();
        for i in 0..2 {
            for k in 0..2 {
                let opsb = vec![x.clone(), Op::left(&z.block(i, k)), y.clone(), x.clone()];
                let eb = fp.expectation(&opsb).unwrap();
                assert!(max_abs(&(e.block(i, k) - eb)) < 1e-12);
            }
        }
    }
}
