//! The n-fold free sum versus the `eta = n id` compression model, and the explicit
//! isometry `Phi` intertwining `X_1 + ... + X_n` with `V X V`.

use serde::Serialize;

use crate::compression::{verify_v_identities, VReport, VSpace};
use crate::correspondence::PointedCorrespondence;
use crate::error::{Error, Result};
use crate::free_product::{FreeProduct, Op, Word, WordVector};
use crate::laws::{BLaw, MultilinearSeq, Realization};
use crate::linalg::{eye, kron, matrix_unit, max_abs, r, zeros, CpMap, Mat, Tolerances, C64};

/// `K = B^n` pointed at `e_1`, with `V = sqrt(n) P`, `P` the projection onto `B eps`.
#[derive(Debug, Clone)]
pub struct KSpace {
    n: usize,
    vspace: VSpace,
    epsilon: Mat,
    report: VReport,
}

impl KSpace {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn vspace(&self) -> &VSpace {
        &self.vspace
    }

    /// `eps = (1 (+) ... (+) 1) / sqrt(n)`.
    pub fn epsilon(&self) -> &Mat {
        &self.epsilon
    }

    /// Outcome of the identity checks run at construction.
    pub fn report(&self) -> &VReport {
        &self.report
    }
}

/// Builds `K` over `M_d` and checks the `V`-identities with `eta = n id`.
pub fn build_k(d: usize, n: usize, tol: &Tolerances) -> Result<KSpace> {
    if n == 0 || d == 0 {
        return Err(Error::Domain("build_k needs n >= 1 and d >= 1".into()));
    }
    let mut c = vec![C64::new(0.0, 0.0); n];
    c[0] = r(1.0);
    let corr = PointedCorrespondence::new(d, c)?;
    let ones = Mat::from_element(n, n, r(1.0 / (n as f64).sqrt()));
    let v = kron(&ones, &eye(d));
    let epsilon = kron(&Mat::from_element(n, 1, r(1.0 / (n as f64).sqrt())), &eye(d));
    let vspace = VSpace::from_parts(CpMap::scaled_identity(d, n as f64)?, corr, v)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(n as u64);
    let report = verify_v_identities(&vspace, &mut rng, 10, tol)?;
    Ok(KSpace {
        n,
        vspace,
        epsilon,
        report,
    })
}

/// Law of `rho_1(X) + ... + rho_n(X)` on the free product of `n` copies, through degree `m`.
pub fn nfold_sum_moments(mu: &BLaw, n: usize, m: usize, depth: usize, tol: &Tolerances) -> Result<BLaw> {
    let real = realized(mu)?;
    if n == 0 {
        return Err(Error::Domain("n-fold sum needs n >= 1".into()));
    }
    let fp = FreeProduct::new(vec![real.corr.clone(); n], depth, tol)?;
    let sum = Op::Sum((0..n).map(|j| fp.embed(j, &real.x)).collect::<Result<_>>()?);
    let mut values = Vec::with_capacity(m);
    for k in 1..=m {
        values.push(fp.multilinear(&[], std::slice::from_ref(&sum), &[], k)?);
    }
    BLaw::from_moments(MultilinearSeq::from_values(mu.d(), values)?, n as f64 * mu.radius())
}

fn realized(mu: &BLaw) -> Result<&Realization> {
    mu.realization()
        .ok_or_else(|| Error::Domain("this construction needs a realized law".into()))
}

/// Which consecutive-index offset labels the `K`-letters of `Phi`'s image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexConvention {
    /// `sigma_i = j_i - j_{i+1} + 1 (mod n)`.
    Backward,
    /// `sigma_i = j_{i+1} - j_i + 1 (mod n)`.
    Forward,
}

impl IndexConvention {
    /// Offset in `1..=n` for 1-based letters `a`, `b`.
    fn offset(self, a: usize, b: usize, n: usize) -> usize {
        let (a, b) = (a as i64, b as i64);
        let raw = match self {
            IndexConvention::Backward => a - b + 1,
            IndexConvention::Forward => b - a + 1,
        };
        ((raw - 1).rem_euclid(n as i64) + 1) as usize
    }
}

/// `Phi: *_j (H_j, xi_j) -> (H, xi) * (K, e_1)`, word by word.
#[derive(Debug, Clone)]
pub struct PhiMap {
    n: usize,
    convention: IndexConvention,
    source: FreeProduct,
    target: FreeProduct,
    x_sum: Op,
    vxv: Vec<Op>,
    /// `K^o`-coordinates of `e_j`, `j = 1..n` (1-based; entry 0 unused).
    q: Vec<Vec<C64>>,
    q_rest: Vec<C64>,
    l_small: usize,
}

impl PhiMap {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn convention(&self) -> IndexConvention {
        self.convention
    }

    pub fn source(&self) -> &FreeProduct {
        &self.source
    }

    pub fn target(&self) -> &FreeProduct {
        &self.target
    }

    /// Image of a word component `y` at source word `w` (letters `0..n`, `0` the distinguished copy).
    fn map_component(&self, w: &[usize], y: &Mat, out: &mut WordVector) -> Result<()> {
        let n = self.n;
        let d = self.source.d();
        let cols = y.ncols();
        // target word letters: 0 = H, 1 = K; per K-letter its coefficient vector
        let (pairs, tail_h) = match w.last() {
            None => (0, false),
            Some(&0) => (w.len() - 1, true),
            Some(_) => (w.len(), false),
        };
        let mut coeffs: Vec<&[C64]> = Vec::with_capacity(pairs);
        for i in 0..pairs {
            let a = w[i] + 1;
            let sigma = if i + 1 < pairs {
                self.convention.offset(a, w[i + 1] + 1, n)
            } else {
                a
            };
            if sigma == 1 {
                return Err(Error::Construction(format!(
                    "offset of word {w:?} hits the state vector of K"
                )));
            }
            coeffs.push(&self.q[sigma]);
        }
        let mut gword: Word = Vec::with_capacity(2 * pairs + 1);
        for _ in 0..pairs {
            gword.push(0);
            gword.push(1);
        }
        if tail_h {
            gword.push(0);
        }
        // interleave H-rows of y with K-coefficients
        let sh = self.source.word_blocks(&[0]);
        let sk = n - 1;
        let h_letters = w.len();
        let z_rows = self.target.word_blocks(&gword) * d;
        let mut z = zeros(z_rows, cols);
        let y_blocks = sh.pow(h_letters as u32);
        let k_blocks = sk.pow(pairs as u32);
        for ya in 0..y_blocks {
            // digits of the H-multi-index, most significant first
            let mut a_digits = vec![0; h_letters];
            let mut rest = ya;
            for slot in a_digits.iter_mut().rev() {
                *slot = rest % sh;
                rest /= sh;
            }
            for kc in 0..k_blocks {
                let mut c_digits = vec![0; pairs];
                let mut rest = kc;
                for slot in c_digits.iter_mut().rev() {
                    *slot = rest % sk;
                    rest /= sk;
                }
                let mut coef = C64::new(1.0, 0.0);
                let mut row = 0usize;
                for i in 0..pairs {
                    row = row * sh + a_digits[i];
                    row = row * sk + c_digits[i];
                    coef *= coeffs[i][c_digits[i]];
                }
                if tail_h {
                    row = row * sh + a_digits[h_letters - 1];
                }
                if coef == C64::new(0.0, 0.0) {
                    continue;
                }
                let src = y.rows(ya * d, d) * coef;
                let mut dst = z.rows_mut(row * d, d);
                dst += src;
            }
        }
        // eps (x) phi = (phi + sum_{j >= 2} e_j (x) phi) / sqrt(n)
        let s = r(1.0 / (n as f64).sqrt());
        let mut part = WordVector::zero(cols);
        part.set(gword.clone(), &z * s);
        if n > 1 {
            let qr = Mat::from_fn(sk, 1, |i, _| self.q_rest[i]);
            let mut lead = vec![1];
            lead.extend_from_slice(&gword);
            part.set(lead, kron(&qr, &z) * s);
        }
        out.add_assign(&part);
        Ok(())
    }

    /// `Phi(x)`.
    pub fn apply(&self, x: &WordVector) -> Result<WordVector> {
        let mut out = WordVector::zero(x.cols());
        for w in x.words() {
            let y = x.component(w).expect("listed word");
            self.map_component(w, y, &mut out)?;
        }
        Ok(out)
    }

    /// `(X_1 + ... + X_n) x` on the source.
    pub fn sum_x(&self, x: &WordVector) -> Result<WordVector> {
        Ok(self
            .source
            .apply(&self.x_sum, std::slice::from_ref(x), self.source.depth())?
            .pop()
            .expect("one entry"))
    }

    /// `V X V y` on the target.
    pub fn vxv(&self, y: &WordVector) -> Result<WordVector> {
        Ok(self
            .target
            .apply_product(&self.vxv, std::slice::from_ref(y), self.target.depth())?
            .pop()
            .expect("one entry"))
    }

    /// Spanning bundles: for every alternating word of length `< l_small`, all coordinates.
    pub fn spanning_set(&self) -> Vec<WordVector> {
        let d = self.source.d();
        let mut words: Vec<Word> = vec![Vec::new()];
        let mut frontier: Vec<Word> = vec![Vec::new()];
        for _ in 1..self.l_small {
            let mut next = Vec::new();
            for w in &frontier {
                for j in 0..self.n {
                    if w.last() != Some(&j) {
                        let mut u = w.clone();
                        u.push(j);
                        next.push(u);
                    }
                }
            }
            words.extend(next.iter().cloned());
            frontier = next;
        }
        words
            .into_iter()
            .filter(|w| self.source.word_blocks(w) > 0)
            .map(|w| {
                let rows = self.source.word_blocks(&w) * d;
                let mut v = WordVector::zero(rows);
                v.set(w, eye(rows));
                v
            })
            .collect()
    }
}

/// Outcome of [`verify_intertwine`].
#[derive(Debug, Clone, Serialize)]
pub struct Section5Report {
    pub convention: IndexConvention,
    pub max_unitarity_violation: f64,
    pub max_intertwine_violation: f64,
    pub max_bimodularity_violation: f64,
    /// `||Phi(xi_1) - eps (x) xi||`.
    pub state_vector_violation: f64,
    pub vectors_checked: usize,
    pub pass: bool,
}

fn max_diff(a: &WordVector, b: &WordVector) -> f64 {
    let mut worst = 0.0f64;
    let words: std::collections::BTreeSet<&Word> = a.words().chain(b.words()).collect();
    for w in words {
        let diff = match (a.component(w), b.component(w)) {
            (Some(x), Some(y)) => max_abs(&(x - y)),
            (Some(x), None) | (None, Some(x)) => max_abs(x),
            (None, None) => 0.0,
        };
        worst = worst.max(diff);
    }
    worst
}

fn construct(mu: &BLaw, n: usize, l_small: usize, convention: IndexConvention, tol: &Tolerances) -> Result<PhiMap> {
    let real = realized(mu)?;
    let d = real.d();
    let source = FreeProduct::new(vec![real.corr.clone(); n], l_small + 2, tol)?;
    let k = build_k(d, n, tol)?;
    let target = FreeProduct::new(vec![real.corr.clone(), k.vspace().corr().clone()], 2 * l_small + 6, tol)?;
    let x_sum = Op::Sum((0..n).map(|j| source.embed(j, &real.x)).collect::<Result<_>>()?);
    let v_hat = target.embed(1, k.vspace().v())?;
    let x_hat = target.embed(0, &real.x)?;
    let vxv = vec![v_hat.clone(), x_hat, v_hat];
    let mut q = vec![Vec::new(); n + 1];
    let mut q_rest = vec![C64::new(0.0, 0.0); n.saturating_sub(1)];
    for (j, slot) in q.iter_mut().enumerate().skip(1) {
        let mut e = zeros(n * d, d);
        e.view_mut(((j - 1) * d, 0), (d, d)).copy_from(&eye(d));
        let wv = target.from_factor_vector(1, &e);
        let coords: Vec<C64> = match wv.component(&[1]) {
            Some(m) => (0..n - 1).map(|c| m[(c * d, 0)]).collect(),
            None => vec![C64::new(0.0, 0.0); n.saturating_sub(1)],
        };
        if j >= 2 {
            for (acc, v) in q_rest.iter_mut().zip(&coords) {
                *acc += v;
            }
        }
        *slot = coords;
    }
    Ok(PhiMap {
        n,
        convention,
        source,
        target,
        x_sum,
        vxv,
        q,
        q_rest,
        l_small,
    })
}

/// Applies both sides of `Phi o (X_1 + ... + X_n) = V X V o Phi` to the spanning set,
/// and checks isometry, bimodularity and `Phi(xi_1) = eps (x) xi`.
pub fn verify_intertwine(phi: &PhiMap, tol: &Tolerances) -> Result<Section5Report> {
    let d = phi.source.d();
    let span = phi.spanning_set();
    let images: Vec<WordVector> = span.iter().map(|x| phi.apply(x)).collect::<Result<_>>()?;
    let mut unit = 0.0f64;
    for (a, ia) in span.iter().zip(&images) {
        for (b, ib) in span.iter().zip(&images) {
            unit = unit.max(max_abs(&(ia.inner(ib) - a.inner(b))));
        }
    }
    let mut inter = 0.0f64;
    for (x, ix) in span.iter().zip(&images) {
        let lhs = phi.apply(&phi.sum_x(x)?)?;
        let rhs = phi.vxv(ix)?;
        if lhs.is_truncated() || rhs.is_truncated() {
            return Err(Error::Truncation("spanning vector reached the truncation depth".into()));
        }
        inter = inter.max(max_diff(&lhs, &rhs));
    }
    let mut bimod = 0.0f64;
    for (x, ix) in span.iter().zip(&images) {
        for i in 0..d * d {
            let b = matrix_unit(d, i / d, i % d);
            let lhs = phi.apply(&x.left_mul(d, &b))?;
            let rhs = ix.left_mul(d, &b);
            bimod = bimod.max(max_diff(&lhs, &rhs));
        }
    }
    // eps (x) xi: the vector eps of K inside the target
    let k = build_k(d, phi.n, tol)?;
    let eps = phi.target.from_factor_vector(1, k.epsilon());
    let state = max_diff(&phi.apply(&phi.source.xi())?, &eps);
    let lim = 1e-10f64.max(tol.eq_tol);
    Ok(Section5Report {
        convention: phi.convention,
        max_unitarity_violation: unit,
        max_intertwine_violation: inter,
        max_bimodularity_violation: bimod,
        state_vector_violation: state,
        vectors_checked: span.len(),
        pass: unit <= lim && inter <= lim && bimod <= lim && state <= lim,
    })
}

/// Builds `Phi` under both index conventions and keeps the one that passes (the smaller
/// discrepancy when both do). Returns the map and the reports of both candidates.
pub fn build_phi(
    mu: &BLaw,
    n: usize,
    l_small: usize,
    tol: &Tolerances,
) -> Result<(PhiMap, Vec<Section5Report>)> {
    if !(1..=4).contains(&l_small) {
        return Err(Error::Domain("the spanning-set scale must be in 1..=4".into()));
    }
    if n == 0 {
        return Err(Error::Domain("n must be at least 1".into()));
    }
    let mut best: Option<(PhiMap, f64)> = None;
    let mut reports = Vec::new();
    for conv in [IndexConvention::Backward, IndexConvention::Forward] {
        let phi = construct(mu, n, l_small, conv, tol)?;
        let rep = verify_intertwine(&phi, tol)?;
        let score = rep.max_intertwine_violation.max(rep.max_unitarity_violation);
        let pass = rep.pass;
        reports.push(rep);
        if pass && best.as_ref().is_none_or(|(_, s)| score < *s) {
            best = Some((phi, score));
        }
    }
    match best {
        Some((phi, _)) => Ok((phi, reports)),
        None => Err(Error::Construction(format!(
            "no index convention makes Phi an intertwining isometry: {reports:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compression::{eta_power_cumulant, default_depth, CompressedLaw};
    use crate::linalg::{op_norm, random_hermitian, random_unit_vector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn law(rng: &mut ChaCha8Rng, d: usize, s: usize, degree: usize) -> BLaw {
        let t = Tolerances::default();
        let corr = PointedCorrespondence::new(d, random_unit_vector(rng, s)).unwrap();
        let x = random_hermitian(rng, s * d);
        let x = &x / C64::new(op_norm(&x), 0.0);
        BLaw::from_realization(Realization::new(corr, x, &t).unwrap(), degree)
    }

    #[test]
    fn k_space_examples() {
        let t = Tolerances::default();
        let k1 = build_k(2, 1, &t).unwrap();
        assert!(max_abs(&(k1.vspace().v() - eye(2))) < 1e-15);
        assert!(max_abs(&(k1.epsilon() - eye(2))) < 1e-15);
        let k2 = build_k(1, 2, &t).unwrap();
        assert!(k2.report().pass, "{:?}", k2.report());
        let v = k2.vspace().v();
        // V e_j = eps
        for j in 0..2 {
            let mut e = zeros(2, 1);
            e[(j, 0)] = r(1.0);
            assert!(max_abs(&(v * e - k2.epsilon())) < 1e-15);
        }
        // V b1 V* b2 V = V b1 (2 b2) on scalars
        let b1 = 0.3;
        let b2 = -1.7;
        let lhs = v * r(b1) * v.adjoint() * r(b2) * v;
        let rhs = v * r(b1 * 2.0 * b2);
        assert!(max_abs(&(lhs - rhs)) < 1e-14);
        let k3 = build_k(2, 3, &t).unwrap();
        assert!(k3.report().pass);
        let e = k3.vspace().corr().expectation(&(k3.vspace().v() * k3.vspace().v().adjoint())).unwrap();
        assert!(max_abs(&(e - eye(2))) < 1e-14);
    }

    #[test]
    fn nfold_sum_examples() {
        let t = Tolerances::default();
        let sc = BLaw::semicircle(1.0, 4, 4, &t).unwrap();
        let two = nfold_sum_moments(&sc, 2, 4, 4, &t).unwrap();
        assert!((two.moment(&vec![eye(1); 3]).unwrap()[(0, 0)] - r(2.0)).norm() < 1e-12);
        assert!((two.moment(&vec![eye(1); 5]).unwrap()[(0, 0)] - r(8.0)).norm() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let mu = law(&mut rng, 2, 2, 6);
        let one = nfold_sum_moments(&mu, 1, 5, 5, &t).unwrap();
        assert!(one.moments().max_diff(mu.moments(), 5) < 1e-12);
        let three = nfold_sum_moments(&mu, 3, 6, 6, &t).unwrap();
        let cum = eta_power_cumulant(&mu, &CpMap::scaled_identity(2, 3.0).unwrap(), 6, &t).unwrap();
        assert!(three.moments().max_rel_diff(cum.moments(), 6) < 1e-9);
        // the K-space compression gives the same law
        let k = build_k(2, 3, &t).unwrap();
        let viak = CompressedLaw::new(&mu, k.vspace(), default_depth(5), &t).unwrap().law(5).unwrap();
        assert!(viak.moments().max_rel_diff(three.moments(), 5) < 1e-9);
        assert!(matches!(nfold_sum_moments(&mu, 2, 6, 5, &t), Err(Error::Truncation(_))));
    }

    #[test]
    fn phi_intertwines() {
        let t = Tolerances::default();
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        for (n, d) in [(1, 1), (2, 1), (2, 2), (3, 1), (3, 2)] {
            let mu = law(&mut rng, d, 2, 4);
            let (phi, reports) = build_phi(&mu, n, 3, &t).unwrap();
            let rep = verify_intertwine(&phi, &t).unwrap();
            assert!(rep.pass, "n={n} d={d}: {rep:?} / {reports:?}");
            assert!(rep.state_vector_violation < 1e-14);
        }
    }

    #[test]
    fn phi_on_the_state_vector() {
        let t = Tolerances::default();
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let mu = law(&mut rng, 2, 2, 4);
        let (phi, _) = build_phi(&mu, 2, 2, &t).unwrap();
        let xi = phi.source().xi();
        let lhs = phi.apply(&phi.sum_x(&xi).unwrap()).unwrap();
        let rhs = phi.vxv(&phi.apply(&xi).unwrap()).unwrap();
        assert!(max_diff(&lhs, &rhs) < 1e-12);
    }
}
