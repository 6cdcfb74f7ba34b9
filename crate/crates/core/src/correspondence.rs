//! Finite-dimensional Hilbert `B`-modules and pointed `B`-`B`-correspondences.
//!
//! Every module is held in canonical form: a module of multiplicity `s` has
//! vectors the `sd x d` complex matrices, right action by right multiplication,
//! inner product `<x, y> = x^* y`, and left action `b -> I_s (x) b`. Module
//! operators are `sd x sd` matrices acting by left multiplication.

use crate::error::{Error, Result};
use crate::linalg::{
    block, eigh, eye, is_psd, kron, left_action, matrix_unit, max_abs, min_eig, op_norm, set_block,
    zeros, AmpElem, BElem, CpMap, Mat, Tolerances, C64, ONE, ZERO,
};

/// A right Hilbert `M_d`-module of multiplicity `s` in canonical form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HilbertModule {
    pub d: usize,
    pub s: usize,
}

impl HilbertModule {
    pub fn new(d: usize, s: usize) -> Self {
        HilbertModule { d, s }
    }

    /// Rows of a vector: `s * d`.
    pub fn rows(&self) -> usize {
        self.s * self.d
    }

    pub fn zero_vector(&self) -> Mat {
        zeros(self.rows(), self.d)
    }

    /// `e_a (x) 1`: the `a`-th canonical generator.
    pub fn unit_vector(&self, a: usize) -> Mat {
        let mut v = self.zero_vector();
        set_block(&mut v, self.d, a, 0, &eye(self.d));
        v
    }

    pub fn check_vector(&self, x: &Mat) -> Result<()> {
        if x.shape() != (self.rows(), self.d) {
            return Err(Error::Dimension(format!(
                "vector is {}x{}, module expects {}x{}",
                x.nrows(),
                x.ncols(),
                self.rows(),
                self.d
            )));
        }
        Ok(())
    }

    pub fn check_operator(&self, t: &Mat) -> Result<()> {
        if t.shape() != (self.rows(), self.rows()) {
            return Err(Error::Dimension(format!(
                "operator is {}x{}, module expects {1}x{1}",
                t.nrows(),
                self.rows(),
            )));
        }
        Ok(())
    }

    pub fn inner(&self, x: &Mat, y: &Mat) -> Result<BElem> {
        self.check_vector(x)?;
        self.check_vector(y)?;
        Ok(x.adjoint() * y)
    }

    /// `||x|| = ||<x, x>||^{1/2}`.
    pub fn norm(&self, x: &Mat) -> Result<f64> {
        Ok(op_norm(&self.inner(x, x)?).sqrt())
    }

    pub fn left_action(&self, b: &BElem) -> Mat {
        left_action(self.s, b)
    }

    pub fn identity(&self) -> Mat {
        eye(self.rows())
    }
}

/// Result of checking that a vector is a `B`-central unit vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationReport {
    pub pass: bool,
    /// Largest of `||<xi, xi> - 1||` and `max_b ||b xi - xi b||` over matrix units.
    pub worst: f64,
}

/// Check `<xi, xi> = 1`, `b xi = xi b` and `<xi, b xi> = b` on the matrix units of `B`.
pub fn validate_xi(module: &HilbertModule, xi: &Mat, tol: &Tolerances) -> Result<ValidationReport> {
    module.check_vector(xi)?;
    let d = module.d;
    let mut worst = max_abs(&(xi.adjoint() * xi - eye(d)));
    for p in 0..d {
        for q in 0..d {
            let e = matrix_unit(d, p, q);
            let bx = module.left_action(&e) * xi;
            worst = worst.max(max_abs(&(&bx - xi * &e)));
            worst = worst.max(max_abs(&(xi.adjoint() * &bx - &e)));
        }
    }
    Ok(ValidationReport {
        pass: worst <= tol.eq_tol,
        worst,
    })
}

/// A pointed correspondence `(H, xi)` with `xi = c (x) I_d`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointedCorrespondence {
    module: HilbertModule,
    c: Vec<C64>,
}

impl PointedCorrespondence {
    /// Builds the correspondence without checking that `c` is a unit vector.
    pub fn new(d: usize, c: Vec<C64>) -> Result<Self> {
        if d == 0 || c.is_empty() {
            return Err(Error::Dimension("d and s must be positive".into()));
        }
        Ok(PointedCorrespondence {
            module: HilbertModule::new(d, c.len()),
            c,
        })
    }

    /// Builds the correspondence and rejects non-central or non-unit `xi`.
    pub fn checked(d: usize, c: Vec<C64>, tol: &Tolerances) -> Result<Self> {
        let p = Self::new(d, c)?;
        let report = p.validate(tol)?;
        if !report.pass {
            return Err(Error::Domain(format!(
                "xi is not a B-central unit vector (violation {:.3e})",
                report.worst
            )));
        }
        Ok(p)
    }

    /// `B` itself, pointed at `1`.
    pub fn trivial(d: usize) -> Self {
        PointedCorrespondence {
            module: HilbertModule::new(d, 1),
            c: vec![ONE],
        }
    }

    /// `B^{(+)s}` pointed at `e_1`.
    pub fn standard(d: usize, s: usize) -> Self {
        let mut c = vec![ZERO; s];
        c[0] = ONE;
        PointedCorrespondence {
            module: HilbertModule::new(d, s),
            c,
        }
    }

    pub fn module(&self) -> &HilbertModule {
        &self.module
    }

    pub fn d(&self) -> usize {
        self.module.d
    }

    pub fn s(&self) -> usize {
        self.module.s
    }

    pub fn c(&self) -> &[C64] {
        &self.c
    }

    pub fn xi(&self) -> Mat {
        let cvec = Mat::from_column_slice(self.c.len(), 1, &self.c);
        kron(&cvec, &eye(self.d()))
    }

    pub fn validate(&self, tol: &Tolerances) -> Result<ValidationReport> {
        validate_xi(&self.module, &self.xi(), tol)
    }

    /// `E(T) = <xi, T xi>`.
    pub fn expectation(&self, t: &Mat) -> Result<BElem> {
        self.module.check_operator(t)?;
        let xi = self.xi();
        Ok(xi.adjoint() * t * xi)
    }

    /// `E^{(n)}` applied to an `n x n` block matrix of module operators.
    pub fn expectation_amplified(&self, t: &Mat, n: usize) -> Result<AmpElem> {
        let rows = self.module.rows();
        if t.shape() != (n * rows, n * rows) {
            return Err(Error::Dimension("amplified operator has the wrong size".into()));
        }
        let xin = kron(&eye(n), &self.xi());
        AmpElem::new(self.d(), n, xin.adjoint() * t * xin)
    }

    /// Orthonormal basis of `c^perp`, as the columns of an `s x (s-1)` matrix.
    pub fn complement_basis(&self) -> Mat {
        let s = self.s();
        let cvec = Mat::from_column_slice(s, 1, &self.c);
        let proj = eye(s) - &cvec * cvec.adjoint() / C64::new(cvec.norm_squared(), 0.0);
        let (_, vecs) = eigh(&proj);
        // eigenvalues ascending: the single 0 first, then the (s-1) ones
        vecs.columns(1, s - 1).into_owned()
    }

    /// `H = B xi (+) H°`: returns `H°` and the isometry `H° -> H`.
    pub fn complement_of_unit(&self) -> Complement {
        let q = self.complement_basis();
        Complement {
            module: HilbertModule::new(self.d(), self.s() - 1),
            embedding: kron(&q, &eye(self.d())),
        }
    }

    /// Unitary `[c Q] (x) I_d`, sending `B (+) H°` coordinates to `H`.
    pub fn splitting_unitary(&self) -> Mat {
        let s = self.s();
        let q = self.complement_basis();
        let mut u = zeros(s, s);
        for a in 0..s {
            u[(a, 0)] = self.c[a] / C64::new(self.c_norm(), 0.0);
        }
        if s > 1 {
            u.view_mut((0, 1), (s, s - 1)).copy_from(&q);
        }
        kron(&u, &eye(self.d()))
    }

    fn c_norm(&self) -> f64 {
        self.c.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }
}

/// The orthogonal complement `H°` of `B xi` and its isometric embedding.
#[derive(Debug, Clone)]
pub struct Complement {
    pub module: HilbertModule,
    /// `sd x (s-1)d` isometry, bimodular: commutes with the left actions.
    pub embedding: Mat,
}

pub fn direct_sum(h1: &HilbertModule, h2: &HilbertModule) -> Result<HilbertModule> {
    if h1.d != h2.d {
        return Err(Error::Dimension("direct sum of modules over different B".into()));
    }
    Ok(HilbertModule::new(h1.d, h1.s + h2.s))
}

/// `x (+) y`.
pub fn direct_sum_vectors(x: &Mat, y: &Mat) -> Result<Mat> {
    if x.ncols() != y.ncols() {
        return Err(Error::Dimension("direct sum of vectors over different B".into()));
    }
    let mut out = zeros(x.nrows() + y.nrows(), x.ncols());
    out.view_mut((0, 0), x.shape()).copy_from(x);
    out.view_mut((x.nrows(), 0), y.shape()).copy_from(y);
    Ok(out)
}

/// Pointed direct sum: `(H1 (+) H2, xi_1 (+) 0)`.
pub fn direct_sum_pointed(p: &PointedCorrespondence, h2: &HilbertModule) -> Result<PointedCorrespondence> {
    if p.d() != h2.d {
        return Err(Error::Dimension("direct sum of modules over different B".into()));
    }
    let mut c = p.c.clone();
    c.extend(std::iter::repeat_n(ZERO, h2.s));
    PointedCorrespondence::new(p.d(), c)
}

/// Interior tensor product `H1 (x)_B H2` of canonical modules; multiplicity `s1 s2`.
pub fn tensor_over_b(h1: &HilbertModule, h2: &HilbertModule) -> Result<HilbertModule> {
    if h1.d != h2.d {
        return Err(Error::Dimension("tensor product over different B".into()));
    }
    Ok(HilbertModule::new(h1.d, h1.s * h2.s))
}

/// The vector representing the elementary tensor `x1 (x) x2`: block `(a, b)` is `x1_a x2_b`.
pub fn tensor_vectors(d: usize, x1: &Mat, x2: &Mat) -> Result<Mat> {
    if x1.ncols() != d || x2.ncols() != d || !x1.nrows().is_multiple_of(d) || !x2.nrows().is_multiple_of(d) {
        return Err(Error::Dimension("tensor factors are not module vectors".into()));
    }
    let (s1, s2) = (x1.nrows() / d, x2.nrows() / d);
    let mut out = zeros(s1 * s2 * d, d);
    for a in 0..s1 {
        let xa = block(x1, d, a, 0);
        for b in 0..s2 {
            set_block(&mut out, d, a * s2 + b, 0, &(&xa * block(x2, d, b, 0)));
        }
    }
    Ok(out)
}

/// `T (x) id` on `H1 (x)_B H2` for a module operator `T` on `H1`.
pub fn operator_tensor_id(d: usize, t: &Mat, s2: usize) -> Mat {
    let s1 = t.nrows() / d;
    let n = s1 * s2 * d;
    let mut out = zeros(n, n);
    for a in 0..s1 {
        for a2 in 0..s1 {
            let tb = block(t, d, a, a2);
            for b in 0..s2 {
                set_block(&mut out, d, a * s2 + b, a2 * s2 + b, &tb);
            }
        }
    }
    out
}

/// B-valued Gram matrix of the elementary tensors `x1_i (x) x2_j`, by the nested rule
/// `<h1 (x) h2, h1' (x) h2'> = <h2, <h1, h1'> h2'>`. Generators ordered `i * m2 + j`.
pub fn tensor_gram(d: usize, xs1: &[Mat], xs2: &[Mat]) -> Mat {
    let m = xs1.len() * xs2.len();
    let mut g = zeros(m * d, m * d);
    for (i, x1) in xs1.iter().enumerate() {
        for (i2, y1) in xs1.iter().enumerate() {
            let inner1 = x1.adjoint() * y1;
            for (j, x2) in xs2.iter().enumerate() {
                let s2 = x2.nrows() / d;
                let act = left_action(s2, &inner1);
                for (j2, y2) in xs2.iter().enumerate() {
                    let val = x2.adjoint() * &act * y2;
                    set_block(&mut g, d, i * xs2.len() + j, i2 * xs2.len() + j2, &val);
                }
            }
        }
    }
    g
}

/// Rank of a flattened Gram matrix, discarding eigenvalues below `psd_tol * max`.
pub fn gram_rank(gram: &Mat, tol: &Tolerances) -> usize {
    let (vals, _) = eigh(gram);
    let top = vals.last().copied().unwrap_or(0.0).max(0.0);
    vals.iter().filter(|&&v| v > tol.psd_tol * top && v > 0.0).count()
}

/// A separation-completion: the canonical module and the quotient map.
#[derive(Debug, Clone)]
pub struct Separated {
    pub module: HilbertModule,
    /// `sd x md` matrix sending a coefficient column `(c_1; ...; c_m)` (each `c_i in B`)
    /// of the formal combination `sum_i g_i c_i` to its vector.
    pub quotient: Mat,
}

impl Separated {
    pub fn vector(&self, coeffs: &Mat) -> Mat {
        &self.quotient * coeffs
    }
}

/// Separation-completion of the span of generators `g_1..g_m` with `B`-valued Gram
/// `gram` (block `(i, j)` is `<g_i, g_j>`) and left action data `left[k * d + l]`
/// giving `E_kl g_i = sum_j g_j L_kl[j, i]`.
pub fn separation_completion(
    d: usize,
    gram: &Mat,
    left: &[Mat],
    tol: &Tolerances,
) -> Result<Separated> {
    let md = gram.nrows();
    if !gram.is_square() || !md.is_multiple_of(d) {
        return Err(Error::Dimension("Gram matrix must be md x md".into()));
    }
    if left.len() != d * d || left.iter().any(|l| l.shape() != (md, md)) {
        return Err(Error::Dimension("left action data must be d^2 matrices of size md x md".into()));
    }
    if !is_psd(gram, tol) {
        return Err(Error::Domain(format!(
            "Gram data is not positive semidefinite (min eig {:.3e})",
            min_eig(gram)
        )));
    }
    let (vals, vecs) = eigh(gram);
    let top = vals.last().copied().unwrap_or(0.0).max(0.0);
    let kept: Vec<usize> = (0..md)
        .filter(|&i| vals[i] > 0.0 && vals[i] > tol.psd_tol * top)
        .collect();
    let r = kept.len();
    if r == 0 {
        return Ok(Separated {
            module: HilbertModule::new(d, 0),
            quotient: zeros(0, md),
        });
    }
    // W = Lambda^{1/2} V^*, Wp = V Lambda^{-1/2}, so that W^* W = G and W Wp = I_r.
    let mut w = zeros(r, md);
    let mut wp = zeros(md, r);
    for (row, &i) in kept.iter().enumerate() {
        let sq = vals[i].sqrt();
        for k in 0..md {
            w[(row, k)] = vecs[(k, i)].conj() * sq;
            wp[(k, row)] = vecs[(k, i)] / sq;
        }
    }
    let pi = |k: usize, l: usize| -> Mat { &w * &left[k * d + l] * &wp };
    if !r.is_multiple_of(d) {
        return Err(Error::Construction(format!(
            "separated rank {r} is not a multiple of d = {d}; left action data is inconsistent"
        )));
    }
    let s = r / d;
    // orthonormal basis f_a of range(pi(E_11))
    let (pvals, pvecs) = eigh(&pi(0, 0));
    let range: Vec<usize> = (0..r).filter(|&i| pvals[i] > 0.5).collect();
    if range.len() != s {
        return Err(Error::Construction(
            "left action data does not define a unital representation of B".into(),
        ));
    }
    let mut u = zeros(r, r);
    let pis: Vec<Mat> = (0..d).map(|p| pi(p, 0)).collect();
    for (a, &ia) in range.iter().enumerate() {
        let f = pvecs.column(ia).into_owned();
        for (p, pp1) in pis.iter().enumerate() {
            u.set_column(a * d + p, &(pp1 * &f).column(0));
        }
    }
    let unitarity = max_abs(&(u.adjoint() * &u - eye(r)));
    if unitarity > 1e-8 {
        return Err(Error::Construction(format!(
            "left action is not a *-representation (unitarity defect {unitarity:.3e})"
        )));
    }
    Ok(Separated {
        module: HilbertModule::new(d, s),
        quotient: u.adjoint() * w,
    })
}

/// `H1 (x)_B H2` built through separation-completion of the generators
/// `(e_a (x) 1) (x) (e_b (x) 1)`; agrees with [`tensor_over_b`] and [`tensor_vectors`].
pub fn tensor_via_gram(h1: &HilbertModule, h2: &HilbertModule, tol: &Tolerances) -> Result<Separated> {
    let d = h1.d;
    let g1: Vec<Mat> = (0..h1.s).map(|a| h1.unit_vector(a)).collect();
    let g2: Vec<Mat> = (0..h2.s).map(|b| h2.unit_vector(b)).collect();
    let gram = tensor_gram(d, &g1, &g2);
    let m = h1.s * h2.s;
    // E_kl g = g E_kl for these generators
    let left: Vec<Mat> = (0..d * d)
        .map(|i| kron(&eye(m), &matrix_unit(d, i / d, i % d)))
        .collect();
    separation_completion(d, &gram, &left, tol)
}

/// `B (x)_psi B` for a CP map `psi`, together with `zeta = 1 (x) 1`.
#[derive(Debug, Clone)]
pub struct CpModule {
    pub module: HilbertModule,
    pub zeta: Mat,
    /// Quotient map from coefficients of generators `E_kl (x) 1` (index `k * d + l`).
    pub quotient: Mat,
}

impl CpModule {
    /// Vector of the elementary tensor `a (x) b`.
    pub fn elementary(&self, a: &BElem, b: &BElem) -> Mat {
        let d = a.nrows();
        // a (x) b = sum_kl a_kl (E_kl (x) 1) b
        let mut coeffs = zeros(d * d * d, d);
        for k in 0..d {
            for l in 0..d {
                set_block(&mut coeffs, d, k * d + l, 0, &(b * a[(k, l)]));
            }
        }
        &self.quotient * coeffs
    }
}

/// Separation-completion of `B (x) B` under `<a (x) b, a' (x) b'> = b^* psi(a^* a') b'`.
pub fn cp_module(psi: &CpMap, tol: &Tolerances) -> Result<CpModule> {
    if !psi.is_cp(tol) {
        return Err(Error::Domain("psi is not completely positive".into()));
    }
    let d = psi.d();
    let m = d * d;
    // generators g_{kl} = E_kl (x) 1: <g_kl, g_k'l'> = psi(E_lk E_k'l') = delta_kk' psi(E_ll')
    let mut gram = zeros(m * d, m * d);
    for k in 0..d {
        for l in 0..d {
            for l2 in 0..d {
                let val = psi.apply(&matrix_unit(d, l, l2))?;
                set_block(&mut gram, d, k * d + l, k * d + l2, &val);
            }
        }
    }
    let gram = crate::linalg::hermitian_part(&gram);
    // E_pq g_kl = delta_qk g_pl
    let mut left = Vec::with_capacity(m);
    for p in 0..d {
        for q in 0..d {
            let mut lmat = zeros(m * d, m * d);
            for l in 0..d {
                set_block(&mut lmat, d, p * d + l, q * d + l, &eye(d));
            }
            left.push(lmat);
        }
    }
    let sep = separation_completion(d, &gram, &left, tol)?;
    let mut one = zeros(m * d, d);
    for k in 0..d {
        set_block(&mut one, d, k * d + k, 0, &eye(d));
    }
    let zeta = sep.vector(&one);
    Ok(CpModule {
        module: sep.module,
        zeta,
        quotient: sep.quotient,
    })
}

/// The Kraus-stack model of `a (x) b`: the vertical stack of `a K_s b`.
pub fn kraus_stack(psi: &CpMap, a: &BElem, b: &BElem) -> Mat {
    let d = psi.d();
    let r = psi.kraus().len();
    let mut out = zeros(r * d, d);
    for (s, k) in psi.kraus().iter().enumerate() {
        set_block(&mut out, d, s, 0, &(a * k * b));
    }
    out
}
