//! `B`-valued laws, Cauchy transforms and the R-transform.
//!
//! A law is stored through its multilinear moment maps
//! `M_k(b_1, ..., b_{k-1}) = mu[x b_1 x ... b_{k-1} x]`, densely over the matrix-unit
//! basis of `B` ([`MultilinearSeq`]), optionally together with a concrete
//! realization `(H, xi, X)`.

use rand::Rng;

use crate::correspondence::PointedCorrespondence;
use crate::error::{Error, Result};
use crate::linalg::{
    eigh, eye, imag_part, inverse, is_hermitian, matrix_unit, max_abs, min_eig, op_norm, r,
    random_complex, solve, zeros, AmpElem, BElem, Mat, Tolerances, C64, ZERO,
};

/// A family of multilinear maps `F_k: B^{k-1} -> B`, `k = 1..=N`, stored over matrix units.
///
/// Degree `k` holds `(d^2)^{k-1}` values; argument multi-index `(i_1, ..., i_{k-1})` has
/// flat index `sum_r i_r (d^2)^{k-1-r}` with `i = p * d + q` for `E_pq`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultilinearSeq {
    d: usize,
    maps: Vec<Vec<C64>>,
}

impl MultilinearSeq {
    pub fn zeros(d: usize, degree: usize) -> Self {
        let dd = d * d;
        let maps = (1..=degree)
            .map(|k| vec![ZERO; dd.pow((k - 1) as u32) * dd])
            .collect();
        MultilinearSeq { d, maps }
    }

    /// Builds a sequence from per-degree lists of `d x d` values.
    pub fn from_values(d: usize, values: Vec<Vec<Mat>>) -> Result<Self> {
        let dd = d * d;
        let mut seq = MultilinearSeq::zeros(d, values.len());
        for (k0, vals) in values.iter().enumerate() {
            let expected = dd.pow(k0 as u32);
            if vals.len() != expected {
                return Err(Error::Dimension(format!(
                    "degree {} needs {expected} values, got {}",
                    k0 + 1,
                    vals.len()
                )));
            }
            for (idx, m) in vals.iter().enumerate() {
                if m.shape() != (d, d) {
                    return Err(Error::Dimension(format!("value of degree {} is not {d}x{d}", k0 + 1)));
                }
                seq.set(k0 + 1, idx, m);
            }
        }
        Ok(seq)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn degree(&self) -> usize {
        self.maps.len()
    }

    pub fn len_of(&self, k: usize) -> usize {
        self.maps[k - 1].len() / (self.d * self.d)
    }

    pub fn raw(&self, k: usize) -> &[C64] {
        &self.maps[k - 1]
    }

    pub fn unit(&self, k: usize, idx: usize) -> Mat {
        let dd = self.d * self.d;
        Mat::from_row_slice(self.d, self.d, &self.maps[k - 1][idx * dd..(idx + 1) * dd])
    }

    pub fn set(&mut self, k: usize, idx: usize, m: &Mat) {
        let d = self.d;
        let base = idx * d * d;
        for p in 0..d {
            for q in 0..d {
                self.maps[k - 1][base + p * d + q] = m[(p, q)];
            }
        }
    }

    pub fn add_to(&mut self, k: usize, idx: usize, m: &Mat) {
        let d = self.d;
        let base = idx * d * d;
        for p in 0..d {
            for q in 0..d {
                self.maps[k - 1][base + p * d + q] += m[(p, q)];
            }
        }
    }

    /// Truncation to degree `n`.
    pub fn truncated(&self, n: usize) -> Self {
        MultilinearSeq {
            d: self.d,
            maps: self.maps[..n.min(self.maps.len())].to_vec(),
        }
    }

    /// `F_k(b_1, ..., b_{k-1})` for general arguments.
    pub fn eval(&self, k: usize, args: &[Mat]) -> Result<Mat> {
        if k == 0 || k > self.degree() {
            return Err(Error::Degree {
                requested: k,
                available: self.degree(),
            });
        }
        if args.len() != k - 1 {
            return Err(Error::Dimension(format!(
                "degree {k} takes {} arguments, got {}",
                k - 1,
                args.len()
            )));
        }
        let d = self.d;
        let dd = d * d;
        // sparse coefficient lists of each argument
        let mut coeffs: Vec<Vec<(usize, C64)>> = Vec::with_capacity(args.len());
        for a in args {
            if a.shape() != (d, d) {
                return Err(Error::Dimension("argument is not in B".into()));
            }
            coeffs.push(
                (0..dd)
                    .filter_map(|i| {
                        let v = a[(i / d, i % d)];
                        (v != ZERO).then_some((i, v))
                    })
                    .collect(),
            );
        }
        let data = &self.maps[k - 1];
        let mut acc = vec![ZERO; dd];
        fn rec(
            coeffs: &[Vec<(usize, C64)>],
            pos: usize,
            idx: usize,
            w: C64,
            dd: usize,
            data: &[C64],
            acc: &mut [C64],
        ) {
            if pos == coeffs.len() {
                for (o, v) in acc.iter_mut().zip(&data[idx * dd..(idx + 1) * dd]) {
                    *o += w * v;
                }
                return;
            }
            for &(i, c) in &coeffs[pos] {
                rec(coeffs, pos + 1, idx * dd + i, w * c, dd, data, acc);
            }
        }
        rec(&coeffs, 0, 0, C64::new(1.0, 0.0), dd, data, &mut acc);
        Ok(Mat::from_row_slice(d, d, &acc))
    }

    /// The amplification `F_k^{(n)}(z_1, ..., z_{k-1})`: block `(a_0, a_{k-1})` is
    /// `sum F_k((z_1)_{a_0 a_1}, ..., (z_{k-1})_{a_{k-2} a_{k-1}})`.
    pub fn eval_amplified(&self, k: usize, zs: &[AmpElem], n: usize) -> Result<AmpElem> {
        if k == 0 || k > self.degree() {
            return Err(Error::Degree {
                requested: k,
                available: self.degree(),
            });
        }
        if zs.len() != k - 1 || zs.iter().any(|z| z.n() != n || z.d() != self.d) {
            return Err(Error::Dimension("amplified arguments have inconsistent sizes".into()));
        }
        let d = self.d;
        let dd = d * d;
        let data = &self.maps[k - 1];
        let count = dd.pow((k - 1) as u32);
        // state rows (P, a), cols (c, out)
        let mut state = zeros(count * n, n * dd);
        for p in 0..count {
            for a in 0..n {
                for o in 0..dd {
                    state[(p * n + a, a * dd + o)] = data[p * dd + o];
                }
            }
        }
        let mut prefixes = count;
        for z in zs.iter().rev() {
            prefixes /= dd;
            // zmat[a', (i, a)] = (z_{a' a})_i
            let mut zmat = zeros(n, dd * n);
            for a2 in 0..n {
                for a in 0..n {
                    let blk = z.block(a2, a);
                    for i in 0..dd {
                        zmat[(a2, i * n + a)] = blk[(i / d, i % d)];
                    }
                }
            }
            let mut next = zeros(prefixes * n, n * dd);
            for p in 0..prefixes {
                let mp = state.rows(p * dd * n, dd * n);
                next.rows_mut(p * n, n).copy_from(&(&zmat * mp));
            }
            state = next;
        }
        let mut out = zeros(n * d, n * d);
        for a in 0..n {
            for c in 0..n {
                for o in 0..dd {
                    out[(a * d + o / d, c * d + o % d)] = state[(a, c * dd + o)];
                }
            }
        }
        AmpElem::new(d, n, out)
    }

    /// Applies `f` to every stored value (linear maps act degree-wise).
    pub fn map_values(&self, f: impl Fn(&Mat) -> Result<Mat>) -> Result<Self> {
        let mut out = self.clone();
        for k in 1..=self.degree() {
            for idx in 0..self.len_of(k) {
                out.set(k, idx, &f(&self.unit(k, idx))?);
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &MultilinearSeq) -> Result<Self> {
        if self.d != other.d {
            return Err(Error::Dimension("sequences over different B".into()));
        }
        let n = self.degree().min(other.degree());
        let maps = (0..n)
            .map(|k| self.maps[k].iter().zip(&other.maps[k]).map(|(a, b)| a + b).collect())
            .collect();
        Ok(MultilinearSeq { d: self.d, maps })
    }

    pub fn max_diff(&self, other: &MultilinearSeq, degree: usize) -> f64 {
        (0..degree.min(self.degree()).min(other.degree()))
            .flat_map(|k| self.maps[k].iter().zip(&other.maps[k]).map(|(a, b)| (a - b).norm()))
            .fold(0.0, f64::max)
    }

    /// Largest `|a - b| / max(1, |b|)` per degree.
    pub fn max_rel_diff(&self, other: &MultilinearSeq, degree: usize) -> f64 {
        (0..degree.min(self.degree()).min(other.degree()))
            .map(|k| {
                let scale = other.maps[k].iter().map(|z| z.norm()).fold(1.0, f64::max);
                self.maps[k]
                    .iter()
                    .zip(&other.maps[k])
                    .map(|(a, b)| (a - b).norm())
                    .fold(0.0, f64::max)
                    / scale
            })
            .fold(0.0, f64::max)
    }
}

/// A concrete realization `(H, xi, X)` of a law.
#[derive(Debug, Clone)]
pub struct Realization {
    pub corr: PointedCorrespondence,
    pub x: Mat,
    /// For `d = 1`: eigenvalues of `X` and the spectral weights of `xi`.
    spectral: Option<(Vec<f64>, Vec<f64>)>,
}

impl Realization {
    pub fn new(corr: PointedCorrespondence, x: Mat, tol: &Tolerances) -> Result<Self> {
        corr.module().check_operator(&x)?;
        if !is_hermitian(&x, tol.eq_tol * (1.0 + max_abs(&x))) {
            return Err(Error::Domain("X must be self-adjoint".into()));
        }
        let rep = corr.validate(tol)?;
        if !rep.pass {
            return Err(Error::Domain(format!(
                "xi is not a B-central unit vector ({:.3e})",
                rep.worst
            )));
        }
        let spectral = (corr.d() == 1).then(|| {
            let (vals, vecs) = eigh(&x);
            let xi = corr.xi();
            let weights = (0..vals.len())
                .map(|i| (vecs.column(i).adjoint() * &xi)[(0, 0)].norm_sqr())
                .collect();
            (vals, weights)
        });
        Ok(Realization { corr, x, spectral })
    }

    pub fn d(&self) -> usize {
        self.corr.d()
    }

    /// Multilinear moment maps up to `degree` by a depth-first walk sharing suffixes.
    pub fn moment_maps(&self, degree: usize) -> MultilinearSeq {
        let d = self.d();
        let dd = d * d;
        let s = self.corr.s();
        let xi = self.corr.xi();
        let mut seq = MultilinearSeq::zeros(d, degree);
        if degree == 0 {
            return seq;
        }
        let apply_unit = |v: &Mat, i: usize| -> Mat {
            let (p, q) = (i / d, i % d);
            let mut out = zeros(v.nrows(), v.ncols());
            for a in 0..s {
                out.row_mut(a * d + p).copy_from(&v.row(a * d + q));
            }
            out
        };
        fn walk(
            real: &Realization,
            seq: &mut MultilinearSeq,
            xi: &Mat,
            v: Mat,
            depth: usize,
            idx: usize,
            degree: usize,
            dd: usize,
            apply_unit: &dyn Fn(&Mat, usize) -> Mat,
        ) {
            seq.set(depth + 1, idx, &(xi.adjoint() * &v));
            if depth + 1 == degree {
                return;
            }
            let weight = dd.pow(depth as u32);
            for i in 0..dd {
                let w = apply_unit(&v, i);
                if max_abs(&w) == 0.0 {
                    continue;
                }
                walk(real, seq, xi, &real.x * w, depth + 1, idx + i * weight, degree, dd, apply_unit);
            }
        }
        let v = &self.x * &xi;
        walk(self, &mut seq, &xi, v, 0, 0, degree, dd, &apply_unit);
        seq
    }

    /// `z in M_n(B)` as an operator on `C^n (x) H`.
    pub fn lift(&self, z: &AmpElem) -> Mat {
        let (d, n, s) = (self.d(), z.n(), self.corr.s());
        let big = n * s * d;
        let mut out = zeros(big, big);
        for i in 0..n {
            for j in 0..n {
                let b = z.block(i, j);
                for a in 0..s {
                    out.view_mut(((i * s + a) * d, (j * s + a) * d), (d, d)).copy_from(&b);
                }
            }
        }
        out
    }

    pub fn x_amplified(&self, n: usize) -> Mat {
        crate::linalg::kron(&eye(n), &self.x)
    }

    fn xi_amplified(&self, n: usize) -> Mat {
        crate::linalg::kron(&eye(n), &self.corr.xi())
    }

    /// `E^{(n)}[(z - X)^{-1}]`, exact.
    pub fn resolvent_expectation(&self, z: &AmpElem) -> Result<AmpElem> {
        let n = z.n();
        if let Some((vals, weights)) = &self.spectral {
            // scalar law: sum_i w_i (z - lambda_i)^{-1}
            let mut acc = zeros(n, n);
            for (&lam, &w) in vals.iter().zip(weights) {
                if w == 0.0 {
                    continue;
                }
                acc += inverse(&(z.mat() - eye(n) * r(lam)))? * r(w);
            }
            return AmpElem::new(1, n, acc);
        }
        let a = self.lift(z) - self.x_amplified(n);
        let xin = self.xi_amplified(n);
        let y = solve(&a, &xin)?;
        AmpElem::new(self.d(), n, xin.adjoint() * y)
    }

    /// `E^{(n)}[z (1 - X z)^{-1}]`, exact whenever `1 - X z` is invertible.
    pub fn gtilde_exact(&self, z: &AmpElem) -> Result<AmpElem> {
        let n = z.n();
        let zl = self.lift(z);
        let a = eye(zl.nrows()) - self.x_amplified(n) * &zl;
        let xin = self.xi_amplified(n);
        let y = solve(&a, &xin)?;
        AmpElem::new(self.d(), n, xin.adjoint() * zl * y)
    }
}

/// A transform value with its certified truncation error.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: AmpElem,
    pub tail: f64,
}

/// Anything with a matricial Cauchy transform.
pub trait CauchyTransform {
    fn base_dim(&self) -> usize;
    fn cauchy(&self, z: &AmpElem, tol: &Tolerances) -> Result<Evaluation>;
}

/// Check `z in H^{(n)}(B)`; returns the margin `min eig im(z)`.
pub fn upper_half_plane_margin(z: &AmpElem, tol: &Tolerances) -> Result<f64> {
    let eps = min_eig(imag_part(z).mat());
    if eps <= tol.psd_tol {
        return Err(Error::Domain(format!(
            "z is not in the matricial upper half-plane (min eig of im(z) = {eps:.3e})"
        )));
    }
    Ok(eps)
}

/// `true` when `z` is strictly upper triangular as an `n x n` block matrix.
pub fn is_strictly_upper_block(z: &AmpElem) -> bool {
    (0..z.n()).all(|i| (0..=i).all(|j| max_abs(&z.block(i, j)) == 0.0))
}

/// A `B`-valued law.
#[derive(Debug, Clone)]
pub struct BLaw {
    d: usize,
    radius: f64,
    moments: MultilinearSeq,
    realization: Option<Realization>,
    formal: bool,
}

impl BLaw {
    /// Moment-form law with norm bound `radius`.
    pub fn from_moments(moments: MultilinearSeq, radius: f64) -> Result<Self> {
        if !(radius >= 0.0 && radius.is_finite()) {
            return Err(Error::Domain("moment radius must be finite and non-negative".into()));
        }
        Ok(BLaw {
            d: moments.d(),
            radius,
            moments,
            realization: None,
            formal: false,
        })
    }

    pub fn from_realization(real: Realization, degree: usize) -> Self {
        let moments = real.moment_maps(degree);
        BLaw {
            d: real.d(),
            radius: op_norm(&real.x),
            moments,
            realization: Some(real),
            formal: false,
        }
    }

    /// Point mass at a self-adjoint `m in B`.
    pub fn point_mass(m: &BElem, degree: usize, tol: &Tolerances) -> Result<Self> {
        let corr = PointedCorrespondence::trivial(m.nrows());
        Ok(BLaw::from_realization(Realization::new(corr, m.clone(), tol)?, degree))
    }

    /// Scalar semicircle of the given variance, realized by its Jacobi matrix truncated
    /// to `levels` levels (exact for moments of order `< 2 * levels`).
    pub fn semicircle(variance: f64, levels: usize, degree: usize, tol: &Tolerances) -> Result<Self> {
        if variance < 0.0 || levels < 1 {
            return Err(Error::Domain("semicircle needs variance >= 0 and levels >= 1".into()));
        }
        let mut x = zeros(levels, levels);
        for i in 0..levels - 1 {
            x[(i, i + 1)] = r(variance.sqrt());
            x[(i + 1, i)] = r(variance.sqrt());
        }
        let corr = PointedCorrespondence::standard(1, levels);
        let mut law = BLaw::from_realization(Realization::new(corr, x, tol)?, degree);
        law.radius = 2.0 * variance.sqrt();
        Ok(law)
    }

    /// Scalar law `sum_i w_i delta_{a_i}`, realized diagonally.
    pub fn scalar_discrete(atoms: &[f64], weights: &[f64], degree: usize, tol: &Tolerances) -> Result<Self> {
        if atoms.is_empty() || atoms.len() != weights.len() {
            return Err(Error::Dimension("atoms and weights must be non-empty and of equal length".into()));
        }
        if weights.iter().any(|&w| w < 0.0) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Domain("weights must be a probability vector".into()));
        }
        let s = atoms.len();
        let c: Vec<C64> = weights.iter().map(|w| r(w.sqrt())).collect();
        let corr = PointedCorrespondence::new(1, c)?;
        let x = Mat::from_fn(s, s, |i, j| if i == j { r(atoms[i]) } else { ZERO });
        Ok(BLaw::from_realization(Realization::new(corr, x, tol)?, degree))
    }

    pub fn with_formal(mut self, formal: bool) -> Self {
        self.formal = formal;
        self
    }

    pub fn with_radius(mut self, radius: f64) -> Self {
        self.radius = radius;
        self
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn max_degree(&self) -> usize {
        self.moments.degree()
    }

    pub fn moments(&self) -> &MultilinearSeq {
        &self.moments
    }

    pub fn realization(&self) -> Option<&Realization> {
        self.realization.as_ref()
    }

    pub fn is_formal(&self) -> bool {
        self.formal
    }

    /// Drops the realization, keeping only moments.
    pub fn moment_form(&self) -> BLaw {
        BLaw {
            d: self.d,
            radius: self.radius,
            moments: self.moments.clone(),
            realization: None,
            formal: self.formal,
        }
    }

    /// `mu[b_0 x b_1 ... x b_k]` for `bs = [b_0, ..., b_k]`.
    pub fn moment(&self, bs: &[Mat]) -> Result<Mat> {
        let k = bs
            .len()
            .checked_sub(1)
            .ok_or_else(|| Error::Dimension("moment needs at least b_0".into()))?;
        if bs.iter().any(|b| b.shape() != (self.d, self.d)) {
            return Err(Error::Dimension("moment arguments must be d x d".into()));
        }
        if k == 0 {
            return Ok(bs[0].clone());
        }
        if k > self.max_degree() {
            return Err(Error::Degree {
                requested: k,
                available: self.max_degree(),
            });
        }
        Ok(&bs[0] * self.moments.eval(k, &bs[1..k])? * &bs[k])
    }

    /// The same moment evaluated directly on the realization.
    pub fn moment_from_realization(&self, bs: &[Mat]) -> Result<Mat> {
        let real = self
            .realization
            .as_ref()
            .ok_or_else(|| Error::Domain("law has no realization".into()))?;
        let m = real.corr.module();
        let mut op = m.left_action(&bs[0]);
        for b in &bs[1..] {
            op = op * &real.x * m.left_action(b);
        }
        real.corr.expectation(&op)
    }

    /// `E^{(n)}[z_0 X z_1 ... X z_k]` from the moment maps.
    pub fn moment_amplified(&self, zs: &[AmpElem]) -> Result<AmpElem> {
        let k = zs.len() - 1;
        if k == 0 {
            return Ok(zs[0].clone());
        }
        let n = zs[0].n();
        let inner = self.moments.eval_amplified(k, &zs[1..k], n)?;
        zs[0].mul(&inner)?.mul(&zs[k])
    }

    /// `G~(z) = sum_k E[z (X z)^k]` from the stored moments, with a tail bound.
    pub fn gtilde_series(&self, z: &AmpElem) -> Result<Evaluation> {
        let n = z.n();
        let nz = z.norm();
        let nilpotent = is_strictly_upper_block(z);
        // z (X z)^k vanishes for k > n - 2 when z is strictly block upper triangular
        let terms = if nilpotent { n.saturating_sub(2) } else { self.max_degree() };
        if terms > self.max_degree() {
            return Err(Error::Degree {
                requested: terms,
                available: self.max_degree(),
            });
        }
        let q = self.radius * nz;
        let tail = if nilpotent {
            0.0
        } else if q < 1.0 {
            nz * q.powi(terms as i32 + 1) / (1.0 - q)
        } else {
            return Err(Error::Convergence(format!(
                "moment series diverges: R ||z|| = {q:.3e} >= 1"
            )));
        };
        let mut acc = z.clone();
        for k in 1..=terms {
            let args = vec![z.clone(); k - 1];
            let inner = self.moments.eval_amplified(k, &args, n)?;
            acc = acc.add(&z.mul(&inner)?.mul(z)?)?;
        }
        Ok(Evaluation { value: acc, tail })
    }

    /// `G~^{(n)}(z) = G^{(n)}(z^{-1})`, exact on a realization, else by the moment series.
    pub fn gtilde(&self, z: &AmpElem) -> Result<Evaluation> {
        if z.d() != self.d {
            return Err(Error::Dimension("argument over a different B".into()));
        }
        match &self.realization {
            Some(real) => Ok(Evaluation {
                value: real.gtilde_exact(z)?,
                tail: 0.0,
            }),
            None => self.gtilde_series(z),
        }
    }

    /// Cauchy transform through the moment series `sum_k E[z^{-1} (X z^{-1})^k]`.
    pub fn cauchy_series(&self, z: &AmpElem, tol: &Tolerances) -> Result<Evaluation> {
        upper_half_plane_margin(z, tol)?;
        self.gtilde_series(&z.inverse()?)
    }

    /// `mu[b_0 x b_1 ... x b_n]` read off `G~^{(n+2)}` at the nilpotent shift with
    /// superdiagonal `b_0, ..., b_n`.
    pub fn recover_moment_nilpotent(&self, bs: &[Mat]) -> Result<Mat> {
        let n = bs
            .len()
            .checked_sub(1)
            .ok_or_else(|| Error::Dimension("need at least b_0".into()))?;
        if n > self.max_degree() {
            return Err(Error::Degree {
                requested: n,
                available: self.max_degree(),
            });
        }
        let z = AmpElem::upper_shift(bs)?;
        let g = self.gtilde(&z)?.value;
        Ok(g.block(0, n + 1))
    }

    /// Solve `G~(u) = w` by Newton from `u = w`; `w` must lie in the ball `||w|| < c/R`
    /// with `c = 3 - 2 sqrt 2`.
    pub fn gtilde_inverse(&self, w: &AmpElem, tol: &Tolerances) -> Result<AmpElem> {
        let c = 3.0 - 2.0 * 2f64.sqrt();
        if self.radius > 0.0 && w.norm() * self.radius >= c * (1.0 + 1e-12) {
            return Err(Error::Domain(format!(
                "||w|| = {:.4e} is outside the inversion ball of radius {:.4e}",
                w.norm(),
                c / self.radius
            )));
        }
        self.gtilde_inverse_unchecked(w, tol)
    }

    /// Newton inversion without the ball check (used to probe the effective radius).
    pub fn gtilde_inverse_unchecked(&self, w: &AmpElem, tol: &Tolerances) -> Result<AmpElem> {
        let f = |u: &AmpElem| self.gtilde(u).map(|e| e.value);
        Ok(matricial_newton(&f, w, w.clone(), tol, 100)?.0)
    }

    /// `R(z) = [G~^{-1}(z)]^{-1} - z^{-1}`.
    pub fn r_transform(&self, z: &AmpElem, tol: &Tolerances) -> Result<AmpElem> {
        let zi = z
            .inverse()
            .map_err(|_| Error::Domain("R-transform needs an invertible argument".into()))?;
        let u = self.gtilde_inverse(z, tol)?;
        let ui = u
            .inverse()
            .map_err(|_| Error::Convergence("inverse of G~ is singular".into()))?;
        ui.sub(&zi)
    }

    /// Positivity of the moment Gram of monomials `x E_{i_1} x ... x` of degree `<= N/2`.
    /// Returns the smallest eigenvalue of the flattened Gram matrix.
    pub fn hankel_min_eig(&self) -> Result<f64> {
        let d = self.d;
        let dd = d * d;
        let half = self.max_degree() / 2;
        // generators: degree-0 monomial 1 and degree-k monomials with k-1 unit args
        let mut gens: Vec<Vec<usize>> = vec![Vec::new()];
        let mut degs: Vec<usize> = vec![0];
        for k in 1..=half {
            let count = dd.pow((k - 1) as u32);
            for idx in 0..count {
                let mut digits = Vec::with_capacity(k - 1);
                let mut rest = idx;
                for _ in 0..k - 1 {
                    digits.push(rest % dd);
                    rest /= dd;
                }
                digits.reverse();
                gens.push(digits);
                degs.push(k);
            }
        }
        let m = gens.len();
        let mut gram = zeros(m * d, m * d);
        let unit = |i: usize| matrix_unit(d, i / d, i % d);
        for a in 0..m {
            for b in 0..m {
                // g_a^* g_b = x E*_{last} x ... E*_{first} x . x E_{first} ... x
                let ka = degs[a];
                let kb = degs[b];
                let total = ka + kb;
                let val = if total == 0 {
                    eye(d)
                } else {
                    let mut args: Vec<Mat> = Vec::new();
                    for &i in gens[a].iter().rev() {
                        args.push(unit(i).adjoint());
                    }
                    if ka > 0 && kb > 0 {
                        args.push(eye(d));
                    }
                    for &i in &gens[b] {
                        args.push(unit(i));
                    }
                    self.moments.eval(total, &args)?
                };
                gram.view_mut((a * d, b * d), (d, d)).copy_from(&val);
            }
        }
        Ok(eigh(&gram).0.first().copied().unwrap_or(0.0))
    }

    /// Largest ratio `||mu(b_0 x ... x b_k)|| / (R^k prod ||b_i||)` over random samples.
    pub fn growth_ratio<R: Rng + ?Sized>(&self, rng: &mut R, samples: usize) -> Result<f64> {
        let mut worst = 0.0f64;
        for _ in 0..samples {
            let k = rng.gen_range(1..=self.max_degree());
            let bs: Vec<Mat> = (0..=k)
                .map(|_| {
                    let b = random_complex(rng, self.d, self.d);
                    let nb = op_norm(&b);
                    b / C64::new(nb, 0.0)
                })
                .collect();
            let val = op_norm(&self.moment(&bs)?);
            let bound = self.radius.powi(k as i32);
            if bound > 0.0 {
                worst = worst.max(val / bound);
            } else if val > 0.0 {
                worst = f64::INFINITY;
            }
        }
        Ok(worst)
    }

    /// Largest disagreement between the stored moments and the realization.
    pub fn realization_defect(&self) -> Result<f64> {
        let real = self
            .realization
            .as_ref()
            .ok_or_else(|| Error::Domain("law has no realization".into()))?;
        Ok(real.moment_maps(self.max_degree()).max_diff(&self.moments, self.max_degree()))
    }
}

impl CauchyTransform for BLaw {
    fn base_dim(&self) -> usize {
        self.d
    }

    /// `G^{(n)}(z) = E^{(n)}[(z - X^{(n)})^{-1}]`.
    fn cauchy(&self, z: &AmpElem, tol: &Tolerances) -> Result<Evaluation> {
        if z.d() != self.d {
            return Err(Error::Dimension("argument over a different B".into()));
        }
        upper_half_plane_margin(z, tol)?;
        match &self.realization {
            Some(real) => Ok(Evaluation {
                value: real.resolvent_expectation(z)?,
                tail: 0.0,
            }),
            None => self.gtilde_series(&z.inverse()?),
        }
    }
}

/// Directional derivative `DF(u)[h]`, read from `F([[u, h], [0, u]])`.
pub fn matricial_derivative(
    f: &dyn Fn(&AmpElem) -> Result<AmpElem>,
    u: &AmpElem,
    h: &AmpElem,
    scale: f64,
) -> Result<AmpElem> {
    let (d, n) = (u.d(), u.n());
    let nd = n * d;
    let mut big = zeros(2 * nd, 2 * nd);
    big.view_mut((0, 0), (nd, nd)).copy_from(u.mat());
    big.view_mut((nd, nd), (nd, nd)).copy_from(u.mat());
    big.view_mut((0, nd), (nd, nd)).copy_from(&(h.mat() * r(scale)));
    let val = f(&AmpElem::new(d, 2 * n, big)?)?;
    let blk = val.mat().view((0, nd), (nd, nd)).into_owned();
    AmpElem::new(d, n, blk / r(scale))
}

/// Newton's method for `F(u) = target` on `M_n(B)`, with the Jacobian assembled from
/// exact directional derivatives. Returns the solution and its residual norm.
pub fn matricial_newton(
    f: &dyn Fn(&AmpElem) -> Result<AmpElem>,
    target: &AmpElem,
    seed: AmpElem,
    tol: &Tolerances,
    max_iter: usize,
) -> Result<(AmpElem, f64)> {
    let mut u = seed;
    let mut rn = op_norm(target.sub(&f(&u)?)?.mat());
    for _ in 0..max_iter {
        if rn <= tol.newton_tol {
            // one polishing step, kept only if it helps
            if let Ok((v, rv)) = newton_step(f, target, &u) {
                if rv <= rn {
                    return Ok((v, rv));
                }
            }
            return Ok((u, rn));
        }
        if !rn.is_finite() {
            break;
        }
        let (v, rv) = newton_step(f, target, &u)?;
        u = v;
        rn = rv;
    }
    Err(Error::Convergence(format!(
        "Newton did not converge in {max_iter} iterations (last residual {rn:.3e})"
    )))
}

/// One Newton step; returns the new point and its residual.
fn newton_step(
    f: &dyn Fn(&AmpElem) -> Result<AmpElem>,
    target: &AmpElem,
    u: &AmpElem,
) -> Result<(AmpElem, f64)> {
    let (d, n) = (u.d(), u.n());
    let nd = n * d;
    let res = target.sub(&f(u)?)?;
    // derivative columns on matrix units; the probe scale keeps [[u, h], [0, u]] in the domain
    let scale = 1e-3 * (1.0 + u.norm()).recip();
    let mut jac = zeros(nd * nd, nd * nd);
    for col in 0..nd * nd {
        let mut e = zeros(nd, nd);
        e[(col / nd, col % nd)] = r(1.0);
        let dcol = matricial_derivative(f, u, &AmpElem::new(d, n, e)?, scale)?;
        for row in 0..nd * nd {
            jac[(row, col)] = dcol.mat()[(row / nd, row % nd)];
        }
    }
    let rhs = Mat::from_fn(nd * nd, 1, |k, _| res.mat()[(k / nd, k % nd)]);
    let step = solve(&jac, &rhs)
        .map_err(|_| Error::Convergence("singular Jacobian in Newton iteration".into()))?;
    let v = u.add(&AmpElem::new(d, n, Mat::from_fn(nd, nd, |i, j| step[i * nd + j]))?)?;
    let rv = op_norm(target.sub(&f(&v)?)?.mat());
    Ok((v, rv))
}

/// Report of the matricial-function axioms on sample points.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MatricialReport {
    pub direct_sum_defect: f64,
    pub similarity_defect: f64,
    pub pass: bool,
}

/// Checks `F(z (+) w) = F(z) (+) F(w)` and `F(S z S^{-1}) = S F(z) S^{-1}` on the given points.
pub fn matricial_checks<R: Rng + ?Sized>(
    f: &dyn Fn(&AmpElem) -> Result<AmpElem>,
    points: &[AmpElem],
    rng: &mut R,
    tol: &Tolerances,
) -> Result<MatricialReport> {
    let mut ds = 0.0f64;
    let mut sim = 0.0f64;
    for (i, z) in points.iter().enumerate() {
        let w = &points[(i + 1) % points.len()];
        if w.n() == z.n() {
            let lhs = f(&z.direct_sum(w)?)?;
            let rhs = f(z)?.direct_sum(&f(w)?)?;
            ds = ds.max(max_abs(&(lhs.mat() - rhs.mat())));
        }
        let n = z.n();
        let s = eye(n) + random_complex(rng, n, n) * r(0.2);
        let lhs = f(&z.similarity(&s)?)?;
        let rhs = f(z)?.similarity(&s)?;
        sim = sim.max(max_abs(&(lhs.mat() - rhs.mat())));
    }
    Ok(MatricialReport {
        direct_sum_defect: ds,
        similarity_defect: sim,
        pass: ds <= tol.eq_tol && sim <= tol.eq_tol,
    })
}

/// Inverse of a matrix known to be a resolvent, mapping failures to domain errors.
pub fn checked_inverse(z: &AmpElem) -> Result<AmpElem> {
    Ok(z.with_mat(inverse(z.mat())?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{c, random_hermitian, random_unit_vector, I};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tol() -> Tolerances {
        Tolerances::default()
    }

    pub(crate) fn random_law(rng: &mut ChaCha8Rng, d: usize, s: usize, degree: usize) -> BLaw {
        let t = Tolerances::default();
        let corr = PointedCorrespondence::new(d, random_unit_vector(rng, s)).unwrap();
        let x = random_hermitian(rng, s * d);
        BLaw::from_realization(Realization::new(corr, x, &t).unwrap(), degree)
    }

    fn semicircle_g(z: C64, t: f64) -> C64 {
        // branch with G(z) ~ 1/z
        let disc = (z * z - 4.0 * t).sqrt();
        let g1 = (z - disc) / (2.0 * t);
        let g2 = (z + disc) / (2.0 * t);
        if g1.im <= 0.0 && (g1 * z - 1.0).norm() < (g2 * z - 1.0).norm() {
            g1
        } else {
            g2
        }
    }

    #[test]
    fn moment_examples() {
        let t = tol();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let law = random_law(&mut rng, 2, 2, 4);
        let b0 = random_complex(&mut rng, 2, 2);
        assert!(max_abs(&(law.moment(std::slice::from_ref(&b0)).unwrap() - &b0)) == 0.0);

        let sc = BLaw::semicircle(1.0, 8, 6, &t).unwrap();
        let one = eye(1);
        for (k, cat) in [(2, 1.0), (4, 2.0), (6, 5.0)] {
            let m = sc.moment(&vec![one.clone(); k + 1]).unwrap();
            assert!((m[(0, 0)] - r(cat)).norm() < 1e-12);
        }
        for k in 1..=4 {
            let bs: Vec<Mat> = (0..=k).map(|_| random_complex(&mut rng, 2, 2)).collect();
            let a = law.moment(&bs).unwrap();
            let b = law.moment_from_realization(&bs).unwrap();
            assert!(max_abs(&(a - b)) < 1e-12);
        }
        assert!(matches!(
            law.moment(&vec![eye(2); 6]),
            Err(Error::Degree { .. })
        ));
    }

    #[test]
    fn cauchy_examples() {
        let t = tol();
        let zero = BLaw::point_mass(&zeros(2, 2), 4, &t).unwrap();
        let z = AmpElem::new(2, 1, Mat::from_row_slice(2, 2, &[c(1.0, 2.0), r(0.3), r(0.1), c(-1.0, 1.5)])).unwrap();
        let g = zero.cauchy(&z, &t).unwrap().value;
        assert!(max_abs(&(g.mat() - z.inverse().unwrap().mat())) < 1e-12);

        let sc = BLaw::semicircle(1.0, 80, 8, &t).unwrap();
        let z = AmpElem::from_b(&Mat::from_element(1, 1, c(0.0, 2.0)));
        let g = sc.cauchy(&z, &t).unwrap().value.mat()[(0, 0)];
        let oracle = semicircle_g(c(0.0, 2.0), 1.0);
        assert!((oracle - c(0.0, 1.0 - 2f64.sqrt())).norm() < 1e-12);
        assert!((g - oracle).norm() < 1e-10, "{g} vs {oracle}");

        // im G(z) <= -eps ||z - X||^{-2}
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let law = random_law(&mut rng, 2, 2, 4);
        let real = law.realization().unwrap();
        let eps = 0.7;
        let z = AmpElem::new(2, 1, random_hermitian(&mut rng, 2) + eye(2) * c(0.0, eps)).unwrap();
        let g = law.cauchy(&z, &t).unwrap().value;
        let zx = real.lift(&z) - &real.x;
        let bound = eps / op_norm(&zx).powi(2);
        let top = crate::linalg::max_eig(imag_part(&g).mat());
        assert!(top <= -bound + 1e-12);

        let bad = AmpElem::from_b(&random_hermitian(&mut rng, 2));
        assert!(matches!(law.cauchy(&bad, &t), Err(Error::Domain(_))));
    }

    #[test]
    fn series_and_realization_agree() {
        let t = tol();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let law = random_law(&mut rng, 2, 2, 10);
        let series = law.moment_form();
        let rad = law.radius();
        let z = AmpElem::new(2, 2, eye(4) * c(0.0, 6.0 * rad) + random_complex(&mut rng, 4, 4) * r(0.3)).unwrap();
        let exact = law.cauchy(&z, &t).unwrap();
        let approx = series.cauchy(&z, &t).unwrap();
        assert!(approx.tail > 0.0);
        let diff = op_norm(&(exact.value.mat() - approx.value.mat()));
        assert!(diff <= approx.tail + 1e-12, "{diff} > {}", approx.tail);
        // divergent series is refused
        let near = AmpElem::from_b(&(eye(2) * c(0.0, 0.5 * rad)));
        assert!(matches!(series.cauchy(&near, &t), Err(Error::Convergence(_))));
    }

    #[test]
    fn gtilde_examples() {
        let t = tol();
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let law = random_law(&mut rng, 2, 2, 6);
        let zero = AmpElem::zero(2, 2);
        assert!(max_abs(law.gtilde(&zero).unwrap().value.mat()) == 0.0);

        // G~(z) = z + z mu[x] z + O(z^3)
        let h = AmpElem::from_b(&random_complex(&mut rng, 2, 2));
        let m1 = law.moment(&[eye(2), eye(2)]).unwrap();
        for &s in &[1e-2, 1e-3] {
            let z = h.scale(r(s));
            let g = law.gtilde(&z).unwrap().value;
            let approx = z.mat() + z.mat() * &m1 * z.mat();
            assert!(max_abs(&(g.mat() - approx)) < 50.0 * s.powi(3));
        }
        // G~(z) = G(z^{-1})
        let z = AmpElem::new(2, 1, eye(2) * c(0.0, -0.05) + random_complex(&mut rng, 2, 2) * r(0.01)).unwrap();
        let g1 = law.gtilde(&z).unwrap().value;
        let g2 = law.cauchy(&z.inverse().unwrap(), &t).unwrap().value;
        assert!(max_abs(&(g1.mat() - g2.mat())) < 1e-12);
    }

    #[test]
    fn nilpotent_recovery() {
        let t = tol();
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let law = random_law(&mut rng, 2, 2, 6);
        let m1 = law.recover_moment_nilpotent(&[eye(2), eye(2)]).unwrap();
        assert!(max_abs(&(m1 - law.moment(&[eye(2), eye(2)]).unwrap())) < 1e-12);
        let zs = vec![zeros(2, 2); 4];
        assert!(max_abs(&law.recover_moment_nilpotent(&zs).unwrap()) == 0.0);
        for n in 0..=6 {
            let bs: Vec<Mat> = (0..=n).map(|_| random_complex(&mut rng, 2, 2)).collect();
            let a = law.recover_moment_nilpotent(&bs).unwrap();
            let b = law.moment(&bs).unwrap();
            assert!(max_abs(&(&a - &b)) < 1e-12);
            let c2 = law.moment_form().recover_moment_nilpotent(&bs).unwrap();
            assert!(max_abs(&(c2 - &b)) < 1e-12);
        }
        let sc = BLaw::semicircle(1.0, 5, 8, &t).unwrap();
        let bs: Vec<Mat> = (0..4).map(|_| random_complex(&mut rng, 1, 1)).collect();
        let a = sc.recover_moment_nilpotent(&bs).unwrap();
        let b = sc.moment(&bs).unwrap();
        assert!(max_abs(&(a - b)) < 1e-12);
        assert!(matches!(
            law.recover_moment_nilpotent(&vec![eye(2); 8]),
            Err(Error::Degree { .. })
        ));
    }

    #[test]
    fn gtilde_inverse_examples() {
        let t = tol();
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let law = random_law(&mut rng, 2, 2, 6);
        let zero = AmpElem::zero(2, 2);
        assert!(law.gtilde_inverse(&zero, &t).unwrap().norm() < 1e-14);

        let m = 0.7;
        let pm = BLaw::point_mass(&Mat::from_element(1, 1, r(m)), 4, &t).unwrap();
        let w = AmpElem::from_b(&Mat::from_element(1, 1, c(0.05, 0.08)));
        let u = pm.gtilde_inverse(&w, &t).unwrap();
        let w0 = w.mat()[(0, 0)];
        let expected = w0 / (1.0 + m * w0);
        assert!((u.mat()[(0, 0)] - expected).norm() < 1e-13);

        let c0 = 3.0 - 2.0 * 2f64.sqrt();
        let rad = law.radius();
        for _ in 0..50 {
            let w = random_complex(&mut rng, 4, 4);
            let w = AmpElem::new(2, 2, &w * r(0.95 * c0 / (rad * op_norm(&w)) * rng.gen_range(0.05..1.0))).unwrap();
            let u = law.gtilde_inverse(&w, &t).unwrap();
            let back = law.gtilde(&u).unwrap().value;
            assert!(op_norm(&(back.mat() - w.mat())) <= 1e-12);
        }
        let far = AmpElem::from_b(&(eye(2) * r(c0 / rad * 1.5)));
        assert!(matches!(law.gtilde_inverse(&far, &t), Err(Error::Domain(_))));
    }

    #[test]
    fn r_transform_examples() {
        let t = tol();
        let sc = BLaw::semicircle(1.0, 40, 8, &t).unwrap();
        let z = AmpElem::from_b(&Mat::from_element(1, 1, c(0.03, 0.05)));
        let rz = sc.r_transform(&z, &t).unwrap();
        assert!((rz.mat()[(0, 0)] - z.mat()[(0, 0)]).norm() < 1e-12);

        let m = -0.4;
        let pm = BLaw::point_mass(&Mat::from_element(1, 1, r(m)), 4, &t).unwrap();
        let rz = pm.r_transform(&z, &t).unwrap();
        assert!((rz.mat()[(0, 0)] - r(m)).norm() < 1e-12, "{}", rz.mat()[(0, 0)]);

        // G(z^{-1} + R(z)) = z
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let law = random_law(&mut rng, 2, 2, 6);
        let z = AmpElem::new(2, 1, eye(2) * c(0.0, -0.04) + random_complex(&mut rng, 2, 2) * r(0.01)).unwrap();
        let rz = law.r_transform(&z, &t).unwrap();
        let arg = z.inverse().unwrap().add(&rz).unwrap();
        let g = law.realization().unwrap().resolvent_expectation(&arg).unwrap();
        assert!(max_abs(&(g.mat() - z.mat())) < 1e-11);
    }

    #[test]
    fn matricial_examples() {
        let t = tol();
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let law = random_law(&mut rng, 2, 2, 6);
        let cauchy = |z: &AmpElem| law.cauchy(z, &t).map(|e| e.value);
        let pts: Vec<AmpElem> = (0..3)
            .map(|_| AmpElem::new(2, 2, eye(4) * c(0.0, 6.0) + random_complex(&mut rng, 4, 4) * r(0.3)).unwrap())
            .collect();
        let rep = matricial_checks(&cauchy, &pts, &mut rng, &t).unwrap();
        assert!(rep.pass, "{rep:?}");
        // S = identity
        let g = cauchy(&pts[0]).unwrap();
        let gs = cauchy(&pts[0].similarity(&eye(2)).unwrap()).unwrap();
        assert!(max_abs(&(g.mat() - gs.mat())) < 1e-14);
        // doubling
        let dbl = cauchy(&pts[0].direct_sum(&pts[0]).unwrap()).unwrap();
        assert!(max_abs(&(dbl.mat() - g.direct_sum(&g).unwrap().mat())) < 1e-12);

        let gt = |z: &AmpElem| law.gtilde(z).map(|e| e.value);
        let small: Vec<AmpElem> = (0..3)
            .map(|_| AmpElem::new(2, 2, random_complex(&mut rng, 4, 4) * r(0.02)).unwrap())
            .collect();
        assert!(matricial_checks(&gt, &small, &mut rng, &t).unwrap().pass);
        let rt = |z: &AmpElem| law.r_transform(z, &t);
        let small_inv: Vec<AmpElem> = (0..3)
            .map(|_| AmpElem::new(2, 2, eye(4) * c(0.0, 0.02) + random_complex(&mut rng, 4, 4) * r(0.005)).unwrap())
            .collect();
        let rep = matricial_checks(&rt, &small_inv, &mut rng, &Tolerances::new(1e-9, 1e-10, 1e-13).unwrap()).unwrap();
        assert!(rep.pass, "{rep:?}");
    }

    #[test]
    fn law_invariants() {
        let t = tol();
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let law = random_law(&mut rng, 2, 2, 6);
        assert!(law.hankel_min_eig().unwrap() >= -t.psd_tol);
        assert!(law.growth_ratio(&mut rng, 50).unwrap() <= 1.0 + 1e-10);
        assert!(law.realization_defect().unwrap() < 1e-12);
        // imaginary part of G is negative definite
        let z = AmpElem::new(2, 2, eye(4) * c(0.0, 1.0) + random_hermitian(&mut rng, 4)).unwrap();
        let g = law.cauchy(&z, &t).unwrap().value;
        assert!(crate::linalg::max_eig(imag_part(&g).mat()) < 0.0);
        let _ = I;
    }

    #[test]
    fn amplified_eval_matches_blockwise_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let law = random_law(&mut rng, 2, 2, 4);
        let zs: Vec<AmpElem> = (0..2)
            .map(|_| AmpElem::new(2, 2, random_complex(&mut rng, 4, 4)).unwrap())
            .collect();
        let amp = law.moments().eval_amplified(3, &zs, 2).unwrap();
        for a0 in 0..2 {
            for a2 in 0..2 {
                let mut acc = zeros(2, 2);
                for a1 in 0..2 {
                    acc += law
                        .moments()
                        .eval(3, &[zs[0].block(a0, a1), zs[1].block(a1, a2)])
                        .unwrap();
                }
                assert!(max_abs(&(amp.block(a0, a2) - acc)) < 1e-12);
            }
        }
    }
}
