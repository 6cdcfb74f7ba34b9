//! Complex matrix arithmetic over `B = M_d(C)` and its amplifications `M_n(B)`,
//! together with completely positive maps in Kraus and Choi form.
//!
//! Elements of `B` are plain `d x d` complex matrices ([`BElem`]). An element of
//! `M_n(B)` is an `nd x nd` matrix read as an `n x n` block matrix with `d x d`
//! blocks ([`AmpElem`]).

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type Mat = DMatrix<C64>;

/// An element of `B = M_d(C)`.
pub type BElem = Mat;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

#[inline]
pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

#[inline]
pub fn r(re: f64) -> C64 {
    C64::new(re, 0.0)
}

/// Comparison tolerances shared by every module.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub eq_tol: f64,
    pub psd_tol: f64,
    pub newton_tol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            eq_tol: 1e-10,
            psd_tol: 1e-10,
            newton_tol: 1e-12,
        }
    }
}

impl Tolerances {
    pub fn new(eq_tol: f64, psd_tol: f64, newton_tol: f64) -> Result<Self> {
        for (name, v) in [("eq_tol", eq_tol), ("psd_tol", psd_tol), ("newton_tol", newton_tol)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::schema(
                    format!("options.tolerances.{name}"),
                    "must be strictly positive",
                ));
            }
        }
        Ok(Tolerances {
            eq_tol,
            psd_tol,
            newton_tol,
        })
    }

    /// Defaults, with `eq_tol` taken from `OPFREE_TOL` when set.
    pub fn from_env() -> Result<Self> {
        let mut tol = Tolerances::default();
        if let Ok(v) = std::env::var("OPFREE_TOL") {
            let parsed: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::schema("OPFREE_TOL", format!("not a number: {v}")))?;
            tol = Tolerances::new(parsed, tol.psd_tol, tol.newton_tol)?;
        }
        Ok(tol)
    }
}

pub fn eye(n: usize) -> Mat {
    Mat::identity(n, n)
}

pub fn zeros(rows: usize, cols: usize) -> Mat {
    Mat::zeros(rows, cols)
}

/// Matrix unit `E_{pq}` in `M_d`.
pub fn matrix_unit(d: usize, p: usize, q: usize) -> Mat {
    let mut m = zeros(d, d);
    m[(p, q)] = ONE;
    m
}

/// All `d^2` matrix units, ordered by `p * d + q`.
pub fn matrix_units(d: usize) -> Vec<Mat> {
    (0..d * d).map(|i| matrix_unit(d, i / d, i % d)).collect()
}

pub fn kron(a: &Mat, b: &Mat) -> Mat {
    a.kronecker(b)
}

/// `I_s (x) b`: the canonical left action of `b` on a module of multiplicity `s`.
pub fn left_action(s: usize, b: &Mat) -> Mat {
    kron(&eye(s), b)
}

/// Largest singular value.
pub fn op_norm(m: &Mat) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

pub fn max_abs(m: &Mat) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn hermitian_part(m: &Mat) -> Mat {
    (m + m.adjoint()) * r(0.5)
}

pub fn is_hermitian(m: &Mat, tol: f64) -> bool {
    m.is_square() && max_abs(&(m - m.adjoint())) <= tol
}

/// Eigen-decomposition of the Hermitian part of `m`; eigenvalues ascending.
pub fn eigh(m: &Mat) -> (Vec<f64>, Mat) {
    let n = m.nrows();
    if n == 0 {
        return (Vec::new(), zeros(0, 0));
    }
    let e = hermitian_part(m).symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| e.eigenvalues[a].total_cmp(&e.eigenvalues[b]));
    let vals = order.iter().map(|&i| e.eigenvalues[i]).collect();
    let mut vecs = zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        vecs.set_column(k, &e.eigenvectors.column(i));
    }
    (vals, vecs)
}

pub fn min_eig(m: &Mat) -> f64 {
    eigh(m).0.first().copied().unwrap_or(0.0)
}

pub fn max_eig(m: &Mat) -> f64 {
    eigh(m).0.last().copied().unwrap_or(0.0)
}

pub fn is_psd(m: &Mat, tol: &Tolerances) -> bool {
    is_hermitian(m, tol.eq_tol.max(tol.psd_tol) * (1.0 + max_abs(m)))
        && min_eig(m) >= -tol.psd_tol
}

pub fn inverse(m: &Mat) -> Result<Mat> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "cannot invert a {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    m.clone()
        .try_inverse()
        .ok_or_else(|| Error::SingularMap("matrix is not invertible".into()))
}

/// Solve `a x = b` by LU.
pub fn solve(a: &Mat, b: &Mat) -> Result<Mat> {
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::SingularMap("linear system is singular".into()))
}

/// Positive square root of a PSD matrix.
pub fn sqrt_psd(m: &Mat) -> Mat {
    let (vals, vecs) = eigh(m);
    let diag = Mat::from_diagonal(&nalgebra::DVector::from_iterator(
        vals.len(),
        vals.iter().map(|&v| r(v.max(0.0).sqrt())),
    ));
    &vecs * diag * vecs.adjoint()
}

/// `(a - a^*) / 2i`.
pub fn imag_part_mat(a: &Mat) -> Mat {
    (a - a.adjoint()) * c(0.0, -0.5)
}

pub fn block(m: &Mat, d: usize, i: usize, j: usize) -> Mat {
    m.view((i * d, j * d), (d, d)).into_owned()
}

pub fn set_block(m: &mut Mat, d: usize, i: usize, j: usize, b: &Mat) {
    m.view_mut((i * d, j * d), (d, d)).copy_from(b);
}

pub fn direct_sum_mat(a: &Mat, b: &Mat) -> Mat {
    let mut m = zeros(a.nrows() + b.nrows(), a.ncols() + b.ncols());
    m.view_mut((0, 0), a.shape()).copy_from(a);
    m.view_mut(a.shape(), b.shape()).copy_from(b);
    m
}

// ---------------------------------------------------------------------------
// random sampling

pub fn random_complex<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| {
        c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
    })
}

pub fn random_hermitian<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Mat {
    hermitian_part(&random_complex(rng, n, n))
}

/// Random Hermitian matrix with operator norm exactly `norm`.
pub fn random_hermitian_with_norm<R: Rng + ?Sized>(rng: &mut R, n: usize, norm: f64) -> Mat {
    let h = random_hermitian(rng, n);
    let s = op_norm(&h);
    if s == 0.0 {
        return h;
    }
    h * r(norm / s)
}

/// Random matrix that is safely invertible (identity plus a small perturbation).
pub fn random_invertible<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Mat {
    eye(n) + random_complex(rng, n, n) * r(0.3)
}

pub fn random_unit_vector<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<C64> {
    let v = random_complex(rng, n, 1);
    let nrm = v.norm();
    v.iter().map(|z| z / nrm).collect()
}

// ---------------------------------------------------------------------------
// amplifications

/// An element of `M_n(B)`, stored as an `nd x nd` complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AmpElem {
    d: usize,
    n: usize,
    mat: Mat,
}

impl AmpElem {
    pub fn new(d: usize, n: usize, mat: Mat) -> Result<Self> {
        if d == 0 || n == 0 {
            return Err(Error::Dimension("d and n must be positive".into()));
        }
        if mat.nrows() != n * d || mat.ncols() != n * d {
            return Err(Error::Dimension(format!(
                "expected a {0}x{0} matrix for n={n}, d={d}, got {1}x{2}",
                n * d,
                mat.nrows(),
                mat.ncols()
            )));
        }
        Ok(AmpElem { d, n, mat })
    }

    /// Degree-one amplification: `b` itself.
    pub fn from_b(b: &BElem) -> Self {
        AmpElem {
            d: b.nrows(),
            n: 1,
            mat: b.clone(),
        }
    }

    pub fn from_blocks(d: usize, blocks: &[Vec<BElem>]) -> Result<Self> {
        let n = blocks.len();
        let mut m = zeros(n * d, n * d);
        for (i, row) in blocks.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Dimension("block matrix is not square".into()));
            }
            for (j, b) in row.iter().enumerate() {
                if b.shape() != (d, d) {
                    return Err(Error::Dimension(format!("block ({i},{j}) is not {d}x{d}")));
                }
                set_block(&mut m, d, i, j, b);
            }
        }
        AmpElem::new(d, n, m)
    }

    /// `b (x) I_n` placed on the block diagonal.
    pub fn diag_from_b(b: &BElem, n: usize) -> Self {
        let d = b.nrows();
        AmpElem {
            d,
            n,
            mat: kron(&eye(n), b),
        }
    }

    pub fn identity(d: usize, n: usize) -> Self {
        AmpElem {
            d,
            n,
            mat: eye(n * d),
        }
    }

    pub fn zero(d: usize, n: usize) -> Self {
        AmpElem {
            d,
            n,
            mat: zeros(n * d, n * d),
        }
    }

    pub fn scalar(d: usize, n: usize, s: C64) -> Self {
        AmpElem {
            d,
            n,
            mat: eye(n * d) * s,
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn mat(&self) -> &Mat {
        &self.mat
    }

    pub fn into_mat(self) -> Mat {
        self.mat
    }

    pub fn block(&self, i: usize, j: usize) -> BElem {
        block(&self.mat, self.d, i, j)
    }

    pub fn with_mat(&self, mat: Mat) -> Self {
        debug_assert_eq!(mat.shape(), self.mat.shape());
        AmpElem {
            d: self.d,
            n: self.n,
            mat,
        }
    }

    pub fn adjoint(&self) -> Self {
        self.with_mat(self.mat.adjoint())
    }

    pub fn norm(&self) -> f64 {
        op_norm(&self.mat)
    }

    pub fn inverse(&self) -> Result<Self> {
        Ok(self.with_mat(inverse(&self.mat)?))
    }

    pub fn direct_sum(&self, other: &AmpElem) -> Result<Self> {
        if self.d != other.d {
            return Err(Error::Dimension("direct sum over different B".into()));
        }
        AmpElem::new(
            self.d,
            self.n + other.n,
            direct_sum_mat(&self.mat, &other.mat),
        )
    }

    /// Conjugation by a scalar matrix `S in M_n(C)`: `(S (x) I_d) z (S (x) I_d)^{-1}`.
    pub fn similarity(&self, s: &Mat) -> Result<Self> {
        if s.shape() != (self.n, self.n) {
            return Err(Error::Dimension("similarity matrix must be n x n".into()));
        }
        let lifted = kron(s, &eye(self.d));
        let inv = inverse(&lifted)?;
        Ok(self.with_mat(&lifted * &self.mat * inv))
    }

    /// Strictly upper block-shift matrix with the given superdiagonal, in `M_{k+1}(B)`.
    pub fn upper_shift(superdiag: &[BElem]) -> Result<Self> {
        let d = superdiag
            .first()
            .map(|b| b.nrows())
            .ok_or_else(|| Error::Dimension("empty superdiagonal".into()))?;
        let n = superdiag.len() + 1;
        let mut m = zeros(n * d, n * d);
        for (i, b) in superdiag.iter().enumerate() {
            if b.shape() != (d, d) {
                return Err(Error::Dimension("superdiagonal blocks differ in size".into()));
            }
            set_block(&mut m, d, i, i + 1, b);
        }
        AmpElem::new(d, n, m)
    }

    fn check_same(&self, other: &AmpElem) -> Result<()> {
        if self.d != other.d || self.n != other.n {
            return Err(Error::Dimension(format!(
                "amplification mismatch: (d={}, n={}) vs (d={}, n={})",
                self.d, self.n, other.d, other.n
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &AmpElem) -> Result<Self> {
        self.check_same(other)?;
        Ok(self.with_mat(&self.mat + &other.mat))
    }

    pub fn sub(&self, other: &AmpElem) -> Result<Self> {
        self.check_same(other)?;
        Ok(self.with_mat(&self.mat - &other.mat))
    }

    pub fn mul(&self, other: &AmpElem) -> Result<Self> {
        self.check_same(other)?;
        Ok(self.with_mat(&self.mat * &other.mat))
    }

    pub fn scale(&self, s: C64) -> Self {
        self.with_mat(&self.mat * s)
    }
}

/// `(a - a^*)/2i`; always Hermitian.
pub fn imag_part(a: &AmpElem) -> AmpElem {
    a.with_mat(imag_part_mat(a.mat()))
}

/// Inverse of `z` together with the certified bound `||z^{-1}|| <= 1/eps`.
///
/// Requires `im(z) >= eps * 1`, i.e. `z` lies in the matricial upper half-plane.
pub fn resolvent_inverse(z: &AmpElem, eps: f64, tol: &Tolerances) -> Result<(AmpElem, f64)> {
    if !(eps > 0.0) {
        return Err(Error::Domain("eps must be positive".into()));
    }
    let lowest = min_eig(imag_part(z).mat());
    if lowest < eps - tol.psd_tol {
        return Err(Error::Domain(format!(
            "z is not in the upper half-plane with margin {eps}: min eig of im(z) = {lowest:.3e}"
        )));
    }
    Ok((z.inverse()?, 1.0 / eps))
}

// ---------------------------------------------------------------------------
// completely positive maps

/// Choi matrix `sum_{ij} E_ij (x) m(E_ij)` of an arbitrary linear map on `M_d`.
pub fn choi_of_fn(d: usize, m: impl Fn(&Mat) -> Mat) -> Mat {
    let mut out = zeros(d * d, d * d);
    for i in 0..d {
        for j in 0..d {
            let img = m(&matrix_unit(d, i, j));
            set_block(&mut out, d, i, j, &img);
        }
    }
    out
}

/// The transpose map on `M_d`. Positive but not completely positive.
pub fn transpose_choi(d: usize) -> Mat {
    choi_of_fn(d, |b| b.transpose())
}

/// A completely positive map `b -> sum_s K_s^* b K_s` on `M_d`.
#[derive(Debug, Clone)]
pub struct CpMap {
    d: usize,
    kraus: Vec<Mat>,
    choi: Mat,
}

impl CpMap {
    pub fn new(d: usize, kraus: Vec<Mat>) -> Result<Self> {
        if d == 0 {
            return Err(Error::Dimension("d must be positive".into()));
        }
        for (s, k) in kraus.iter().enumerate() {
            if k.shape() != (d, d) {
                return Err(Error::Dimension(format!(
                    "Kraus operator {s} is {}x{}, expected {d}x{d}",
                    k.nrows(),
                    k.ncols()
                )));
            }
        }
        let choi = Self::choi_from_kraus(d, &kraus);
        Ok(CpMap { d, kraus, choi })
    }

    pub fn identity(d: usize) -> Self {
        CpMap::new(d, vec![eye(d)]).expect("identity is well-formed")
    }

    /// `b -> t b` for `t >= 0`.
    pub fn scaled_identity(d: usize, t: f64) -> Result<Self> {
        if t < 0.0 {
            return Err(Error::Domain(format!("t = {t} is negative; t*id is not CP")));
        }
        if t == 0.0 {
            return CpMap::new(d, Vec::new());
        }
        CpMap::new(d, vec![eye(d) * r(t.sqrt())])
    }

    pub fn zero(d: usize) -> Self {
        CpMap::new(d, Vec::new()).expect("zero map is well-formed")
    }

    fn choi_from_kraus(d: usize, kraus: &[Mat]) -> Mat {
        // C[(i,p),(j,q)] = sum_s conj(K[i,p]) K[j,q]
        let mut out = zeros(d * d, d * d);
        for k in kraus {
            let v = Mat::from_fn(d * d, 1, |ip, _| k[(ip / d, ip % d)].conj());
            out += &v * v.adjoint();
        }
        out
    }

    /// Kraus decomposition of a PSD Choi matrix.
    pub fn from_choi(choi: &Mat, tol: &Tolerances) -> Result<Self> {
        let n = choi.nrows();
        let d = (n as f64).sqrt().round() as usize;
        if d * d != n || !choi.is_square() {
            return Err(Error::Dimension(format!(
                "Choi matrix must be d^2 x d^2, got {}x{}",
                choi.nrows(),
                choi.ncols()
            )));
        }
        if !is_psd(choi, tol) {
            return Err(Error::Domain(format!(
                "Choi matrix is not positive semidefinite (min eig {:.3e})",
                min_eig(choi)
            )));
        }
        let (vals, vecs) = eigh(choi);
        let top = vals.last().copied().unwrap_or(0.0).max(0.0);
        let mut kraus = Vec::new();
        for (idx, &lam) in vals.iter().enumerate() {
            if lam <= tol.psd_tol * top.max(1.0) {
                continue;
            }
            let v = vecs.column(idx) * r(lam.sqrt());
            kraus.push(Mat::from_fn(d, d, |i, p| v[i * d + p].conj()));
        }
        CpMap::new(d, kraus)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn kraus(&self) -> &[Mat] {
        &self.kraus
    }

    pub fn choi(&self) -> &Mat {
        &self.choi
    }

    pub fn apply(&self, b: &BElem) -> Result<BElem> {
        if b.shape() != (self.d, self.d) {
            return Err(Error::Dimension(format!(
                "CP map on M_{} applied to a {}x{} matrix",
                self.d,
                b.nrows(),
                b.ncols()
            )));
        }
        let mut out = zeros(self.d, self.d);
        for k in &self.kraus {
            out += k.adjoint() * b * k;
        }
        Ok(out)
    }

    /// The same map evaluated through the Choi matrix: `m(b) = sum_ij b_ij C_ij`.
    pub fn apply_via_choi(&self, b: &BElem) -> Result<BElem> {
        if b.shape() != (self.d, self.d) {
            return Err(Error::Dimension("argument size differs from the map".into()));
        }
        let d = self.d;
        let mut out = zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                out += block(&self.choi, d, i, j) * b[(i, j)];
            }
        }
        Ok(out)
    }

    /// `m^{(n)}`: blockwise application on `M_n(B)`.
    pub fn apply_amplified(&self, z: &AmpElem) -> Result<AmpElem> {
        if z.d() != self.d {
            return Err(Error::Dimension("amplified argument over a different B".into()));
        }
        let (d, n) = (z.d(), z.n());
        let mut out = zeros(n * d, n * d);
        for i in 0..n {
            for j in 0..n {
                let img = self.apply(&z.block(i, j))?;
                set_block(&mut out, d, i, j, &img);
            }
        }
        Ok(z.with_mat(out))
    }

    pub fn is_cp(&self, tol: &Tolerances) -> bool {
        is_psd(&self.choi, tol)
    }

    /// Choi matrix of `self - id`.
    pub fn choi_minus_identity(&self) -> Mat {
        &self.choi - CpMap::identity(self.d).choi
    }

    pub fn is_eta_minus_id_cp(&self, tol: &Tolerances) -> bool {
        is_psd(&self.choi_minus_identity(), tol)
    }

    /// `psi = self - id` as a CP map, or a domain error when it is not CP.
    pub fn minus_identity(&self, tol: &Tolerances) -> Result<CpMap> {
        let choi = self.choi_minus_identity();
        if !is_psd(&choi, tol) {
            return Err(Error::Domain(format!(
                "eta - id is not completely positive (min Choi eigenvalue {:.3e})",
                min_eig(&choi)
            )));
        }
        CpMap::from_choi(&choi, tol)
    }

    /// Matrix of the map in the matrix-unit basis: column `k` holds `vec(m(E_k))`.
    pub fn superoperator(&self) -> Mat {
        let d = self.d;
        let mut out = zeros(d * d, d * d);
        for (k, e) in matrix_units(d).iter().enumerate() {
            let img = self.apply(e).expect("matrix unit has the right size");
            for p in 0..d {
                for q in 0..d {
                    out[(p * d + q, k)] = img[(p, q)];
                }
            }
        }
        out
    }

    pub fn norm_of_unit_image(&self) -> f64 {
        op_norm(&self.apply(&eye(self.d)).expect("identity has the right size"))
    }
}

/// The inverse of a linear map on `M_d`, given by its superoperator matrix.
#[derive(Debug, Clone)]
pub struct LinearMapInverse {
    d: usize,
    matrix: Mat,
}

impl LinearMapInverse {
    pub fn of(map: &CpMap) -> Result<Self> {
        let sup = map.superoperator();
        let lu = sup.clone().lu();
        let pivot = lu
            .u()
            .diagonal()
            .iter()
            .map(|z| z.norm())
            .fold(f64::INFINITY, f64::min);
        if pivot < 1e-12 * op_norm(&sup).max(1.0) {
            return Err(Error::SingularMap(
                "eta is not invertible as a linear map on B".into(),
            ));
        }
        let matrix = inverse(&sup).map_err(|_| {
            Error::SingularMap("eta is not invertible as a linear map on B".into())
        })?;
        Ok(LinearMapInverse { d: map.d(), matrix })
    }

    pub fn apply(&self, b: &BElem) -> BElem {
        let d = self.d;
        let v = Mat::from_fn(d * d, 1, |k, _| b[(k / d, k % d)]);
        let w = &self.matrix * v;
        Mat::from_fn(d, d, |p, q| w[p * d + q])
    }

    pub fn apply_amplified(&self, z: &AmpElem) -> AmpElem {
        let (d, n) = (z.d(), z.n());
        let mut out = zeros(n * d, n * d);
        for i in 0..n {
            for j in 0..n {
                set_block(&mut out, d, i, j, &self.apply(&z.block(i, j)));
            }
        }
        z.with_mat(out)
    }
}

/// Random CP map with `eta - id` completely positive: Kraus `{I, K_1, ..., K_rank}`.
pub fn random_admissible_eta<R: Rng + ?Sized>(
    rng: &mut R,
    d: usize,
    rank: usize,
    scale: f64,
) -> CpMap {
    let mut kraus = vec![eye(d)];
    for _ in 0..rank {
        kraus.push(random_complex(rng, d, d) * r(scale));
    }
    CpMap::new(d, kraus).expect("random Kraus operators have the right size")
}
