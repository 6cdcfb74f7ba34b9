//! The subordination function `F` with `G_nu = G_mu o F`, its closed form through
//! `eta^{-1}`, the conditional-expectation identity, and scalar densities.

use serde::Serialize;

use crate::compression::{CompressedLaw, VSpace};
use crate::error::{Error, Result};
use crate::laws::{upper_half_plane_margin, BLaw, CauchyTransform, Realization};
use crate::linalg::{
    eye, imag_part, inverse, max_eig, min_eig, op_norm, AmpElem, BElem, CpMap, LinearMapInverse, Mat,
    Tolerances, C64,
};

/// Which formula produced a value of `F`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Route {
    /// `F = G_mu^{-1} o G_nu`, by Newton.
    InverseComposition,
    /// `F = eta^{-1}(z) + (id - eta^{-1})(G_nu(z)^{-1})`.
    EtaIdentity,
}

#[derive(Debug, Clone)]
pub struct SubordinationResult {
    pub z: AmpElem,
    pub f: AmpElem,
    pub route: Route,
    /// `||G_mu(F(z)) - G_nu(z)||`.
    pub residual: f64,
    /// Truncation error of `G_nu(z)` (zero for exact transforms).
    pub nu_tail: f64,
    /// Whether `G_nu(z)` lay in the certified inversion ball of `G~_mu`; otherwise the value
    /// was reached by continuation and is certified by its residual alone.
    pub in_inversion_ball: bool,
    /// Smallest eigenvalue of `im F(z)`.
    pub imag_margin: f64,
}

fn realization_of(mu: &BLaw) -> Result<&Realization> {
    mu.realization()
        .ok_or_else(|| Error::Domain("subordination needs a realized law mu".into()))
}

/// `F(z)` solving `G_mu(F(z)) = G_nu(z)`, by Newton seeded at `F = z`; when the direct solve
/// fails, the target is moved from `G_mu(z)` to `G_nu(z)` in steps.
pub fn subordination_f(
    mu: &BLaw,
    nu: &dyn CauchyTransform,
    z: &AmpElem,
    tol: &Tolerances,
) -> Result<SubordinationResult> {
    let real = realization_of(mu)?;
    if nu.base_dim() != mu.d() || z.d() != mu.d() {
        return Err(Error::Dimension("mu, nu and z must live over the same B".into()));
    }
    upper_half_plane_margin(z, tol)?;
    let gnu = nu.cauchy(z, tol)?;
    let w = gnu.value;
    let c = 3.0 - 2.0 * 2f64.sqrt();
    let in_ball = w.norm() * mu.radius() < c;
    let g_mu = |u: &AmpElem| real.resolvent_expectation(u);
    let start = g_mu(z)?;
    let mut last_err = None;
    for steps in [1usize, 8, 32, 128] {
        match continuation(&g_mu, &start, &w, z, steps, tol) {
            Ok((f, residual)) => {
                let imag_margin = min_eig(imag_part(&f).mat());
                if imag_margin <= 0.0 {
                    last_err = Some(Error::Convergence(format!(
                        "Newton solution left the upper half-plane (min eig of im F = {imag_margin:.3e})"
                    )));
                    continue;
                }
                return Ok(SubordinationResult {
                    z: z.clone(),
                    f,
                    route: Route::InverseComposition,
                    residual,
                    nu_tail: gnu.tail,
                    in_inversion_ball: in_ball,
                    imag_margin,
                });
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::Convergence("subordination solve failed".into())))
}

fn continuation(
    g_mu: &dyn Fn(&AmpElem) -> Result<AmpElem>,
    start: &AmpElem,
    target: &AmpElem,
    z: &AmpElem,
    steps: usize,
    tol: &Tolerances,
) -> Result<(AmpElem, f64)> {
    let mut u = z.clone();
    let mut residual = 0.0;
    for k in 1..=steps {
        let t = k as f64 / steps as f64;
        let goal = start.scale(C64::new(1.0 - t, 0.0)).add(&target.scale(C64::new(t, 0.0)))?;
        let (v, rv) = crate::laws::matricial_newton(g_mu, &goal, u, tol, 60)?;
        u = v;
        residual = rv;
    }
    Ok((u, residual))
}

/// `F(z) = eta^{-1}(z) + (id - eta^{-1})(G_nu(z)^{-1})`, reading `F_nu` as `1 / G_nu`.
pub fn f_via_eta_identity(
    eta: &CpMap,
    nu: &dyn CauchyTransform,
    z: &AmpElem,
    tol: &Tolerances,
) -> Result<AmpElem> {
    let inv = LinearMapInverse::of(eta)?;
    upper_half_plane_margin(z, tol)?;
    let g = nu.cauchy(z, tol)?.value;
    let fnu = g
        .inverse()
        .map_err(|_| Error::Convergence("G_nu(z) is singular".into()))?;
    let a = inv.apply_amplified(z);
    let b = fnu.sub(&inv.apply_amplified(&fnu))?;
    a.add(&b)
}

const MAX_NU_TERMS: usize = 80;
/// Absolute slack added to the series tail in the conditional-expectation certificate.
pub const CERTIFICATE_SLACK: f64 = 1e-9;

/// Outcome of [`verify_cond_exp`].
#[derive(Debug, Clone, Serialize)]
pub struct CondExpReport {
    pub terms: usize,
    pub discrepancy: f64,
    /// Series tail of the left side.
    pub lhs_tail: f64,
    /// Series length used for `G_nu(z)` on the right side.
    pub nu_terms: usize,
    /// Bound on the right side's error inherited from the truncated `G_nu`.
    pub rhs_error: f64,
    pub certificate: f64,
    /// Largest eigenvalue of `im` of the left side (negative for `z` in the upper half-plane).
    pub lhs_imag_max_eig: f64,
    pub subordination_residual: f64,
    pub pass: bool,
}

/// Compares `E_1[V (z - V^* X V)^{-1} V^*]` (series on the free product, `terms` terms)
/// with `(F(z) - X)^{-1}` on the realization of `mu`, `F` solved from `G_nu(z)` to `newton_tol`.
pub fn verify_cond_exp(
    mu: &BLaw,
    vs: &VSpace,
    z: &BElem,
    terms: usize,
    depth: usize,
    tol: &Tolerances,
) -> Result<CondExpReport> {
    let real = realization_of(mu)?;
    if depth < 3 * terms + 2 {
        return Err(Error::Truncation(format!(
            "depth {depth} cannot hold {terms} series terms (needs {})",
            3 * terms + 2
        )));
    }
    let model = CompressedLaw::new(mu, vs, depth, tol)?;
    let (lhs, lhs_tail) = model.cond_resolvent(z, terms)?;
    // the right side needs G_nu(z) only, which is cheap: run its series to newton_tol
    let za = AmpElem::from_b(z);
    let nzi = za.inverse()?.norm();
    let mut nu_terms = terms;
    while model.tail_bound(nzi, nu_terms)? > tol.newton_tol && nu_terms < MAX_NU_TERMS {
        nu_terms += 1;
    }
    let nu_model = CompressedLaw::new(mu, vs, 3 * nu_terms + 2, tol)?;
    let nu = FixedTerms { model: &nu_model, terms: nu_terms };
    let sub = subordination_f(mu, &nu, &za, tol)?;
    let resolvent = inverse(&(real.lift(&sub.f) - &real.x))?;
    let rhs = resolvent.clone();
    // G_mu(F) ~ F^{-1}: an error tau in G_nu moves F by about ||F||^2 tau, and the
    // resolvent by ||(F - X)^{-1}||^2 times that.
    let nf = sub.f.norm();
    let nr = op_norm(&resolvent);
    let rhs_error = 2.0 * nr * nr * nf * nf * (sub.nu_tail + sub.residual);
    let discrepancy = op_norm(&(&lhs - &rhs));
    let certificate = lhs_tail + rhs_error + CERTIFICATE_SLACK;
    let im = (&lhs - lhs.adjoint()) * C64::new(0.0, -0.5);
    Ok(CondExpReport {
        terms,
        nu_terms,
        discrepancy,
        lhs_tail,
        rhs_error,
        certificate,
        lhs_imag_max_eig: max_eig(&im),
        subordination_residual: sub.residual,
        pass: discrepancy <= certificate,
    })
}

struct FixedTerms<'a> {
    model: &'a CompressedLaw,
    terms: usize,
}

impl CauchyTransform for FixedTerms<'_> {
    fn base_dim(&self) -> usize {
        self.model.d()
    }

    fn cauchy(&self, z: &AmpElem, _tol: &Tolerances) -> Result<crate::laws::Evaluation> {
        self.model.cauchy_with_terms(z, self.terms)
    }
}

/// `nu = mu^{boxplus eta}` through its subordination function: `F` solves
/// `F - (id - eta^{-1})(G_mu(F)^{-1}) = eta^{-1}(z)`, and `G_nu(z) = G_mu(F(z))`.
/// Only `G_mu` is needed, so this reaches points near the real axis where the
/// moment and compression series diverge.
#[derive(Debug, Clone)]
pub struct SubordinatedLaw<'a> {
    mu: &'a BLaw,
    real: &'a Realization,
    eta_inv: LinearMapInverse,
}

impl<'a> SubordinatedLaw<'a> {
    pub fn new(mu: &'a BLaw, eta: &CpMap) -> Result<Self> {
        if eta.d() != mu.d() {
            return Err(Error::Dimension("eta and mu over different B".into()));
        }
        Ok(SubordinatedLaw {
            mu,
            real: realization_of(mu)?,
            eta_inv: LinearMapInverse::of(eta)?,
        })
    }

    fn fixed_point_map(&self, f: &AmpElem) -> Result<AmpElem> {
        let g = self.real.resolvent_expectation(f)?;
        let gi = g
            .inverse()
            .map_err(|_| Error::Convergence("G_mu(F) is singular".into()))?;
        f.sub(&gi.sub(&self.eta_inv.apply_amplified(&gi))?)
    }

    /// `F(z)` and its residual, by continuation down from `z + i Y` with `Y` above the spectrum.
    pub fn subordination(&self, z: &AmpElem, tol: &Tolerances) -> Result<(AmpElem, f64)> {
        upper_half_plane_margin(z, tol)?;
        let (d, n) = (z.d(), z.n());
        let lift = 4.0 * (self.mu.radius() + 1.0) + z.norm();
        let map = |u: &AmpElem| self.fixed_point_map(u);
        let mut f: Option<AmpElem> = None;
        let mut s = lift;
        loop {
            let zk = z.add(&AmpElem::scalar(d, n, C64::new(0.0, s)))?;
            let target = self.eta_inv.apply_amplified(&zk);
            let seed = f.clone().unwrap_or_else(|| zk.clone());
            let (v, rv) = crate::laws::matricial_newton(&map, &target, seed, tol, 60)?;
            if min_eig(imag_part(&v).mat()) <= 0.0 {
                return Err(Error::Convergence("subordination path left the upper half-plane".into()));
            }
            f = Some(v);
            if s == 0.0 {
                return Ok((f.expect("set above"), rv));
            }
            s = if s < 1e-3 { 0.0 } else { s * 0.6 };
        }
    }
}

impl CauchyTransform for SubordinatedLaw<'_> {
    fn base_dim(&self) -> usize {
        self.mu.d()
    }

    /// `G_mu(F(z))`; the tail field carries the fixed-point residual.
    fn cauchy(&self, z: &AmpElem, tol: &Tolerances) -> Result<crate::laws::Evaluation> {
        let (f, residual) = self.subordination(z, tol)?;
        Ok(crate::laws::Evaluation {
            value: self.real.resolvent_expectation(&f)?,
            tail: residual,
        })
    }
}

/// Outcome of [`phi_x_check`].
#[derive(Debug, Clone, Serialize)]
pub struct PhiXReport {
    /// `||E[[1 - z (X - R(z))]^{-1} - 1]||`.
    pub expectation_norm: f64,
    pub pass: bool,
}

/// Checks `E[[1 - z (X - R(z))]^{-1} - 1] = 0` on the realization of `mu`.
pub fn phi_x_check(mu: &BLaw, z: &AmpElem, tol: &Tolerances) -> Result<PhiXReport> {
    let real = realization_of(mu)?;
    let rz = mu.r_transform(z, tol)?;
    let n = z.n();
    let zl = real.lift(z);
    let a = eye(zl.nrows()) - &zl * (real.x_amplified(n) - real.lift(&rz));
    let xi = crate::linalg::kron(&eye(n), &real.corr.xi());
    let y = crate::linalg::solve(&a, &xi)?;
    let e = xi.adjoint() * y - eye(n * real.d());
    let expectation_norm = op_norm(&e);
    Ok(PhiXReport {
        expectation_norm,
        pass: expectation_norm <= tol.eq_tol,
    })
}

/// `-im G(x + i eps) / pi` on the grid, for a scalar law.
pub fn density_scalar(law: &dyn CauchyTransform, grid: &[f64], eps_imag: f64, tol: &Tolerances) -> Result<Vec<(f64, f64)>> {
    if law.base_dim() != 1 {
        return Err(Error::Dimension("densities are defined for d = 1".into()));
    }
    if !(eps_imag > 0.0) {
        return Err(Error::Domain("eps_imag must be positive".into()));
    }
    grid.iter()
        .map(|&x| {
            let z = AmpElem::from_b(&Mat::from_element(1, 1, C64::new(x, eps_imag)));
            let g = law.cauchy(&z, tol)?.value.mat()[(0, 0)];
            Ok((x, -g.im / std::f64::consts::PI))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compression::{build_v_space, projection_v_space, CompressedLaw};
    use crate::correspondence::PointedCorrespondence;
    use crate::laws::Evaluation;
    use crate::linalg::{c, random_admissible_eta, random_complex, random_hermitian, random_unit_vector, r};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Closed-form Cauchy transform of the scalar semicircle of variance `t`.
    struct Semicircle(f64);

    impl CauchyTransform for Semicircle {
        fn base_dim(&self) -> usize {
            1
        }
        fn cauchy(&self, z: &AmpElem, _tol: &Tolerances) -> Result<Evaluation> {
            let z = z.mat()[(0, 0)];
            let t = self.0;
            let s = (z * z - 4.0 * t).sqrt();
            // branch with G ~ 1/z at infinity
            let s = if (s / z).re < 0.0 { -s } else { s };
            Ok(Evaluation {
                value: AmpElem::from_b(&Mat::from_element(1, 1, (z - s) / (2.0 * t))),
                tail: 0.0,
            })
        }
    }

    fn scalar(z: C64) -> AmpElem {
        AmpElem::from_b(&Mat::from_element(1, 1, z))
    }

    fn random_law(rng: &mut ChaCha8Rng, d: usize, s: usize) -> BLaw {
        let t = Tolerances::default();
        let corr = PointedCorrespondence::new(d, random_unit_vector(rng, s)).unwrap();
        let x = random_hermitian(rng, s * d);
        let x = &x / r(op_norm(&x));
        BLaw::from_realization(Realization::new(corr, x, &t).unwrap(), 4)
    }

    fn random_point(rng: &mut ChaCha8Rng, d: usize, n: usize, scale: f64) -> AmpElem {
        let h = random_hermitian(rng, n * d);
        let m = random_complex(rng, n * d, n * d) * r(0.3);
        let z = h + &m * m.adjoint() * c(0.0, 1.0) + eye(n * d) * c(0.0, scale);
        AmpElem::new(d, n, z).unwrap()
    }

    #[test]
    fn identity_when_nu_is_mu() {
        let t = Tolerances::default();
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let mu = random_law(&mut rng, 2, 2);
        let z = AmpElem::scalar(2, 1, c(0.0, 8.0));
        let res = subordination_f(&mu, &mu, &z, &t).unwrap();
        assert!(res.residual <= 1e-12);
        assert!(op_norm(&(res.f.mat() - z.mat())) < 1e-10);
        let f = f_via_eta_identity(&CpMap::identity(2), &mu, &z, &t).unwrap();
        assert!(op_norm(&(f.mat() - z.mat())) < 1e-12);
    }

    #[test]
    fn semicircle_closed_form() {
        let t = Tolerances::default();
        let mu = BLaw::semicircle(1.0, 60, 4, &t).unwrap();
        let z = scalar(c(0.0, 4.0));
        for var in [2.0, 3.0] {
            let nu = Semicircle(var);
            let g = nu.cauchy(&z, &t).unwrap().value.mat()[(0, 0)];
            let closed = g + 1.0 / g;
            let res = subordination_f(&mu, &nu, &z, &t).unwrap();
            assert!((res.f.mat()[(0, 0)] - closed).norm() < 1e-10, "{:?}", res.f);
            assert!(res.imag_margin > 0.0);
            let viaeta = f_via_eta_identity(&CpMap::scaled_identity(1, var).unwrap(), &nu, &z, &t).unwrap();
            assert!((viaeta.mat()[(0, 0)] - closed).norm() < 1e-12);
        }
    }

    #[test]
    fn routes_agree_for_matrix_eta() {
        let t = Tolerances::default();
        let mut rng = ChaCha8Rng::seed_from_u64(82);
        let mu = random_law(&mut rng, 2, 2);
        let eta = random_admissible_eta(&mut rng, 2, 1, 0.5);
        let vs = build_v_space(&eta, &t).unwrap();
        let nu = CompressedLaw::new(&mu, &vs, 80, &t).unwrap();
        for _ in 0..20 {
            let n = rng.gen_range(1..=2);
            let z = random_point(&mut rng, 2, n, 12.0);
            let a = subordination_f(&mu, &nu, &z, &t).unwrap();
            assert!(a.residual <= t.newton_tol);
            let b = f_via_eta_identity(&eta, &nu, &z, &t).unwrap();
            let diff = op_norm(&(a.f.mat() - b.mat()));
            assert!(diff < 1e-9, "{diff:e}");
        }
    }

    #[test]
    fn singular_eta_is_rejected() {
        let t = Tolerances::default();
        let mu = BLaw::semicircle(1.0, 4, 4, &t).unwrap();
        let z = scalar(c(0.0, 4.0));
        let err = f_via_eta_identity(&CpMap::zero(1), &mu, &z, &t).unwrap_err();
        assert!(matches!(err, Error::SingularMap(_)));
    }

    #[test]
    fn conditional_expectation_identity() {
        let t = Tolerances::default();
        // eta = id: both sides are (z - X)^{-1}
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let mu = random_law(&mut rng, 2, 2);
        let vs = build_v_space(&CpMap::identity(2), &t).unwrap();
        let z = eye(2) * c(0.0, 8.0);
        let rep = verify_cond_exp(&mu, &vs, &z, 12, 38, &t).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!(rep.discrepancy < 1e-12);
        // scalar semicircle (three-level Jacobi realization), t = 2
        let sc = BLaw::semicircle(1.0, 3, 4, &t).unwrap();
        let vs = projection_v_space(2.0).unwrap();
        let rep = verify_cond_exp(&sc, &vs, &(eye(1) * c(0.0, 8.0)), 12, 38, &t).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!(rep.lhs_imag_max_eig < 0.0);
        // d = 2, eta with Kraus {I, K/2}
        let k = random_complex(&mut rng, 2, 2) * r(0.5);
        let eta = CpMap::new(2, vec![eye(2), k]).unwrap();
        let vs = build_v_space(&eta, &t).unwrap();
        let rep = verify_cond_exp(&mu, &vs, &(eye(2) * c(0.0, 10.0)), 12, 38, &t).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!(rep.lhs_imag_max_eig < 0.0);
    }

    #[test]
    fn phi_x_expectation_vanishes() {
        let t = Tolerances::default();
        let m = Mat::from_element(1, 1, r(0.7));
        let pm = BLaw::point_mass(&m, 4, &t).unwrap();
        let rep = phi_x_check(&pm, &scalar(r(0.05)), &t).unwrap();
        assert!(rep.expectation_norm < 1e-14);
        let sc = BLaw::semicircle(1.0, 30, 4, &t).unwrap();
        let rep = phi_x_check(&sc, &scalar(r(0.05)), &t).unwrap();
        assert!(rep.expectation_norm <= 1e-10, "{rep:?}");
        let mut rng = ChaCha8Rng::seed_from_u64(84);
        let mu = random_law(&mut rng, 2, 2);
        for _ in 0..20 {
            let n = rng.gen_range(1..=2);
            let z = AmpElem::new(2, n, random_complex(&mut rng, 2 * n, 2 * n) * r(0.01) + eye(2 * n) * r(0.02)).unwrap();
            let rep = phi_x_check(&mu, &z, &t).unwrap();
            assert!(rep.expectation_norm <= 1e-8, "{rep:?}");
        }
    }

    #[test]
    fn densities() {
        let t = Tolerances::default();
        let sc = BLaw::semicircle(1.0, 500, 4, &t).unwrap();
        let d0 = density_scalar(&sc, &[0.0], 5e-2, &t).unwrap()[0].1;
        assert!((d0 - 1.0 / std::f64::consts::PI).abs() < 1e-2, "{d0}");
        let exact = density_scalar(&Semicircle(1.0), &[0.0], 1e-6, &t).unwrap()[0].1;
        assert!((exact - 1.0 / std::f64::consts::PI).abs() < 1e-6);
        let pm = BLaw::point_mass(&Mat::from_element(1, 1, r(0.0)), 2, &t).unwrap();
        let eps = 0.1;
        for (x, y) in density_scalar(&pm, &[-0.3, 0.0, 0.5], eps, &t).unwrap() {
            let lorentz = eps / (std::f64::consts::PI * (x * x + eps * eps));
            assert!((y - lorentz).abs() < 1e-12);
        }
        let two = density_scalar(&Semicircle(2.0), &[-3.0, -2.9, 2.9, 3.0, 0.0], 1e-3, &t).unwrap();
        for (x, y) in &two[..4] {
            assert!(*y < 1e-2, "{x}: {y}");
        }
        assert!(two[4].1 > 0.1);
    }

    #[test]
    fn subordinated_law_matches_compression() {
        let t = Tolerances::default();
        let mut rng = ChaCha8Rng::seed_from_u64(85);
        let mu = random_law(&mut rng, 2, 2);
        let eta = random_admissible_eta(&mut rng, 2, 1, 0.5);
        let vs = build_v_space(&eta, &t).unwrap();
        let model = CompressedLaw::new(&mu, &vs, 80, &t).unwrap();
        let sub = SubordinatedLaw::new(&mu, &eta).unwrap();
        for _ in 0..5 {
            let z = random_point(&mut rng, 2, 1, 10.0);
            let a = model.cauchy(&z, &t).unwrap().value;
            let b = sub.cauchy(&z, &t).unwrap();
            assert!(b.tail <= t.newton_tol);
            assert!(op_norm(&(a.mat() - b.value.mat())) < 1e-10);
            let f = f_via_eta_identity(&eta, &model, &z, &t).unwrap();
            assert!(op_norm(&(sub.subordination(&z, &t).unwrap().0.mat() - f.mat())) < 1e-9);
        }
        // semicircle^{boxplus 2} is the semicircle of variance 2, also near the axis
        let sc = BLaw::semicircle(1.0, 120, 4, &t).unwrap();
        let two = SubordinatedLaw::new(&sc, &CpMap::scaled_identity(1, 2.0).unwrap()).unwrap();
        for z in [c(0.3, 0.5), c(-1.0, 0.2), c(2.5, 0.3)] {
            let a = two.cauchy(&scalar(z), &t).unwrap().value.mat()[(0, 0)];
            let b = Semicircle(2.0).cauchy(&scalar(z), &t).unwrap().value.mat()[(0, 0)];
            assert!((a - b).norm() < 1e-6, "{z}: {a} vs {b}");
        }
    }
}
