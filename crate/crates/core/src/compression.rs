//! The compression model of the `eta`-convolution power: `nu` is the law of `V^* X V` under
//! `T -> E[V T V^*]`, with `V` free from `X`.

use rand::Rng;
use serde::Serialize;

use crate::correspondence::{cp_module, PointedCorrespondence};
use crate::error::{Error, Result};
use crate::free_product::{FreeProduct, Op};
use crate::laws::{upper_half_plane_margin, BLaw, CauchyTransform, Evaluation, MultilinearSeq};
use crate::linalg::{
    eye, matrix_unit, max_abs, op_norm, r, random_hermitian, zeros, AmpElem, BElem, CpMap, Mat,
    Tolerances, C64,
};

/// A pointed correspondence carrying an operator `V` with
/// `V b_1 V^* b_2 V = V b_1 eta(b_2)` and `E[V b V^*] = b`.
#[derive(Debug, Clone)]
pub struct VSpace {
    eta: CpMap,
    corr: PointedCorrespondence,
    v: Mat,
    zeta: Option<Mat>,
}

impl VSpace {
    /// Wraps an arbitrary `(H, xi, V)`; the identities are not checked here.
    pub fn from_parts(eta: CpMap, corr: PointedCorrespondence, v: Mat) -> Result<Self> {
        if eta.d() != corr.d() {
            return Err(Error::Dimension("eta and H act on different B".into()));
        }
        corr.module().check_operator(&v)?;
        Ok(VSpace {
            eta,
            corr,
            v,
            zeta: None,
        })
    }

    pub fn eta(&self) -> &CpMap {
        &self.eta
    }

    pub fn corr(&self) -> &PointedCorrespondence {
        &self.corr
    }

    pub fn d(&self) -> usize {
        self.corr.d()
    }

    pub fn v(&self) -> &Mat {
        &self.v
    }

    /// `zeta = 1 (x) 1` in the second summand (only for the construction over `B (x)_psi B`).
    pub fn zeta(&self) -> Option<&Mat> {
        self.zeta.as_ref()
    }

    /// `||V||^2`, equal to `||eta(1)||` under the identities.
    pub fn v_norm_sq(&self) -> f64 {
        op_norm(&self.v).powi(2)
    }
}

/// `H = B (+) (B (x)_psi B)` with `psi = eta - id`, `xi = 1 (+) 0` and `V(b (+) h) = b (+) zeta b`.
pub fn build_v_space(eta: &CpMap, tol: &Tolerances) -> Result<VSpace> {
    let psi = eta
        .minus_identity(tol)
        .map_err(|_| Error::Domain("eta - id is not completely positive".into()))?;
    let d = eta.d();
    let cm = cp_module(&psi, tol)?;
    let so = cm.module.s;
    let s = 1 + so;
    let mut c = vec![C64::new(0.0, 0.0); s];
    c[0] = r(1.0);
    let corr = PointedCorrespondence::new(d, c)?;
    let mut v = zeros(s * d, s * d);
    v.view_mut((0, 0), (d, d)).copy_from(&eye(d));
    if so > 0 {
        v.view_mut((d, 0), (so * d, d)).copy_from(&cm.zeta);
    }
    Ok(VSpace {
        eta: eta.clone(),
        corr,
        v,
        zeta: (so > 0).then_some(cm.zeta),
    })
}

/// Scalar space `C^2` with a projection `P` of trace `1/t` and `V = sqrt(t) P` (`eta = t`).
pub fn projection_v_space(t: f64) -> Result<VSpace> {
    if !(t >= 1.0) {
        return Err(Error::Domain(format!("projection model needs t >= 1, got {t}")));
    }
    let corr = PointedCorrespondence::new(1, vec![r(1.0), r(0.0)])?;
    let v0 = [r(t.recip().sqrt()), r((1.0 - t.recip()).max(0.0).sqrt())];
    let p = Mat::from_fn(2, 2, |i, j| v0[i] * v0[j]);
    VSpace::from_parts(CpMap::scaled_identity(1, t)?, corr, p * r(t.sqrt()))
}

/// Outcome of [`verify_v_identities`].
#[derive(Debug, Clone, Serialize)]
pub struct VReport {
    /// `max ||V b_1 V^* b_2 V - V b_1 eta(b_2)||`.
    pub max_intertwining: f64,
    /// `max ||E[V b V^*] - b||`.
    pub max_expectation: f64,
    pub checked: usize,
    pub pass: bool,
}

/// Checks both identities on all matrix units and `random_pairs` random self-adjoint pairs.
pub fn verify_v_identities<R: Rng + ?Sized>(
    vs: &VSpace,
    rng: &mut R,
    random_pairs: usize,
    tol: &Tolerances,
) -> Result<VReport> {
    let d = vs.d();
    let m = vs.corr.module();
    let v = &vs.v;
    let va = v.adjoint();
    let mut bs: Vec<(BElem, BElem)> = Vec::new();
    for i in 0..d * d {
        for j in 0..d * d {
            bs.push((matrix_unit(d, i / d, i % d), matrix_unit(d, j / d, j % d)));
        }
    }
    for _ in 0..random_pairs {
        bs.push((random_hermitian(rng, d), random_hermitian(rng, d)));
    }
    let mut w31 = 0.0f64;
    let mut w32 = 0.0f64;
    for (b1, b2) in &bs {
        let lhs = v * m.left_action(b1) * &va * m.left_action(b2) * v;
        let rhs = v * m.left_action(&(b1 * vs.eta.apply(b2)?));
        w31 = w31.max(max_abs(&(lhs - rhs)));
        let e = vs.corr.expectation(&(v * m.left_action(b1) * &va))?;
        w32 = w32.max(max_abs(&(e - b1)));
    }
    let eq = (1e-11f64).max(tol.eq_tol * 1e-1);
    Ok(VReport {
        max_intertwining: w31,
        max_expectation: w32,
        checked: bs.len(),
        pass: w31 <= eq && w32 <= eq,
    })
}

/// `mu` and `V` as free operators on `(H_mu, xi) * (H_V, xi)`.
#[derive(Debug, Clone)]
pub struct CompressedLaw {
    fp: FreeProduct,
    x_hat: Op,
    v_hat: Op,
    v_adj: Op,
    radius: f64,
    v_norm_sq: f64,
}

impl CompressedLaw {
    pub fn new(mu: &BLaw, vs: &VSpace, depth: usize, tol: &Tolerances) -> Result<Self> {
        let real = mu
            .realization()
            .ok_or_else(|| Error::Domain("the compression model needs a realized law".into()))?;
        if real.d() != vs.d() {
            return Err(Error::Dimension("law and V-space over different B".into()));
        }
        let fp = FreeProduct::new(vec![real.corr.clone(), vs.corr.clone()], depth, tol)?;
        let x_hat = fp.embed(0, &real.x)?;
        let v_hat = fp.embed(1, &vs.v)?;
        let v_adj = fp.embed(1, &vs.v.adjoint())?;
        let v_norm_sq = vs.v_norm_sq();
        Ok(CompressedLaw {
            fp,
            x_hat,
            v_hat,
            v_adj,
            radius: v_norm_sq * op_norm(&real.x),
            v_norm_sq,
        })
    }

    pub fn free_product(&self) -> &FreeProduct {
        &self.fp
    }

    /// Norm bound `||V||^2 ||X||` for `V^* X V`.
    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn d(&self) -> usize {
        self.fp.d()
    }

    /// Largest series length allowed by the truncation depth.
    pub fn max_terms(&self) -> usize {
        self.fp.depth().saturating_sub(2) / 3
    }

    /// Moment maps of `nu` through degree `m` (needs depth `>= 3m + 2`).
    pub fn moment_maps(&self, m: usize) -> Result<MultilinearSeq> {
        let d = self.d();
        let pre = [self.v_hat.clone()];
        let seg = [self.v_adj.clone(), self.x_hat.clone(), self.v_hat.clone()];
        let post = [self.v_adj.clone()];
        let mut values = Vec::with_capacity(m);
        for k in 1..=m {
            values.push(self.fp.multilinear(&pre, &seg, &post, k)?);
        }
        MultilinearSeq::from_values(d, values)
    }

    /// `nu` as a moment-form law.
    pub fn law(&self, m: usize) -> Result<BLaw> {
        BLaw::from_moments(self.moment_maps(m)?, self.radius)
    }

    fn series_ops(&self, zi: &AmpElem) -> (Vec<Op>, Vec<Op>, Vec<Op>) {
        let left = Op::Left(zi.clone());
        (
            vec![self.v_hat.clone(), left.clone()],
            vec![self.v_adj.clone(), self.x_hat.clone(), self.v_hat.clone(), left],
            vec![self.v_adj.clone()],
        )
    }

    /// Tail bound of the resolvent series after `terms` terms at `||z^{-1}|| = nzi`.
    pub fn tail_bound(&self, nzi: f64, terms: usize) -> Result<f64> {
        let q = self.radius * nzi;
        if q >= 1.0 {
            return Err(Error::Convergence(format!(
                "resolvent series diverges: R ||z^-1|| = {q:.3e} >= 1"
            )));
        }
        Ok(self.v_norm_sq * nzi * q.powi(terms as i32 + 1) / (1.0 - q))
    }

    /// Smallest series length meeting `target`, capped by the depth.
    pub fn terms_for(&self, nzi: f64, target: f64) -> Result<usize> {
        let cap = self.max_terms();
        for k in 0..=cap {
            if self.tail_bound(nzi, k)? <= target {
                return Ok(k);
            }
        }
        Ok(cap)
    }

    /// `G_nu(z) = sum_{k <= K} E[V z^{-1} (V^* X V z^{-1})^k V^*]` with its tail bound.
    pub fn cauchy_with_terms(&self, z: &AmpElem, terms: usize) -> Result<Evaluation> {
        let zi = z.inverse()?;
        let tail = self.tail_bound(zi.norm(), terms)?;
        let (pre, step, post) = self.series_ops(&zi);
        let value = self.fp.series_expectation_amplified(&pre, &step, &post, terms, z.n())?;
        Ok(Evaluation { value, tail })
    }

    /// `E_1[V (z - V^* X V)^{-1} V^*]` as an operator on `H_mu`, truncated after `terms`.
    pub fn cond_resolvent(&self, z: &BElem, terms: usize) -> Result<(Mat, f64)> {
        let zi = AmpElem::from_b(z).inverse()?;
        let tail = self.tail_bound(zi.norm(), terms)?;
        let (pre, step, post) = self.series_ops(&zi);
        let m = self.fp.series_cond_expectation(0, &pre, &step, &post, terms)?;
        Ok((m, tail))
    }
}

impl CauchyTransform for CompressedLaw {
    fn base_dim(&self) -> usize {
        self.d()
    }

    /// Adaptive series length, aiming at a tail below `newton_tol`.
    fn cauchy(&self, z: &AmpElem, tol: &Tolerances) -> Result<Evaluation> {
        upper_half_plane_margin(z, tol)?;
        let zi = z.inverse()?;
        let terms = self.terms_for(zi.norm(), tol.newton_tol)?;
        self.cauchy_with_terms(z, terms)
    }
}

/// Default truncation depth for moments through degree `m`.
pub fn default_depth(m: usize) -> usize {
    3 * m + 2
}

/// `mu^{(+)eta}` by the compression model, moments through degree `m`.
pub fn eta_power_compression(mu: &BLaw, eta: &CpMap, m: usize, depth: usize, tol: &Tolerances) -> Result<BLaw> {
    let vs = build_v_space(eta, tol)?;
    CompressedLaw::new(mu, &vs, depth, tol)?.law(m)
}

/// `mu^{(+)eta}` by the cumulant route; formal when `eta - id` is not completely positive.
pub fn eta_power_cumulant(mu: &BLaw, eta: &CpMap, m: usize, tol: &Tolerances) -> Result<BLaw> {
    use crate::cumulants::{convolve_eta, cumulants_to_moments, moments_to_cumulants};
    if m > mu.max_degree() {
        return Err(Error::Degree {
            requested: m,
            available: mu.max_degree(),
        });
    }
    let base = BLaw::from_moments(mu.moments().truncated(m), mu.radius())?;
    let kappa = convolve_eta(&moments_to_cumulants(&base), eta, tol)?;
    let radius = op_norm(&eta.apply(&eye(eta.d()))?) * mu.radius();
    cumulants_to_moments(&kappa, radius)
}

/// Scalar power `mu^{(+)t}` through a projection of trace `1/t` free from `X`.
pub fn scalar_projection_model(mu: &BLaw, t: f64, m: usize, tol: &Tolerances) -> Result<BLaw> {
    if mu.d() != 1 {
        return Err(Error::Dimension("the projection model is scalar".into()));
    }
    let vs = projection_v_space(t)?;
    CompressedLaw::new(mu, &vs, default_depth(m), tol)?.law(m)
}
