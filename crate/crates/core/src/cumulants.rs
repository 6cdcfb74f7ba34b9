//! Operator-valued free cumulants over non-crossing partitions.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock, RwLock};

use crate::error::{Error, Result};
use crate::laws::{is_strictly_upper_block, BLaw, Evaluation, MultilinearSeq};
use crate::linalg::{eye, matrix_unit, op_norm, AmpElem, CpMap, Mat, Tolerances, C64, ZERO};

/// A non-crossing partition of `{0, ..., k-1}` with its nesting forest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NCPartition {
    k: usize,
    blocks: Vec<Vec<usize>>,
    parent: Vec<Option<usize>>,
    block_of: Vec<usize>,
}

impl NCPartition {
    fn from_blocks(k: usize, mut blocks: Vec<Vec<usize>>) -> Self {
        for b in blocks.iter_mut() {
            b.sort_unstable();
        }
        blocks.sort_by_key(|b| b[0]);
        let mut block_of = vec![0; k];
        for (i, b) in blocks.iter().enumerate() {
            for &p in b {
                block_of[p] = i;
            }
        }
        // parent: the block with consecutive elements a < min(B), max(B) < c, innermost
        let parent = blocks
            .iter()
            .map(|b| {
                let (lo, hi) = (b[0], *b.last().unwrap());
                blocks
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| v.windows(2).any(|w| w[0] < lo && hi < w[1]))
                    .max_by_key(|(_, v)| v[0])
                    .map(|(i, _)| i)
            })
            .collect();
        NCPartition {
            k,
            blocks,
            parent,
            block_of,
        }
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn parent(&self, block: usize) -> Option<usize> {
        self.parent[block]
    }

    pub fn is_non_crossing(&self) -> bool {
        for (i, a) in self.blocks.iter().enumerate() {
            for b in &self.blocks[i + 1..] {
                for &p in a {
                    for &q in a {
                        if p < q && b.iter().any(|&x| p < x && x < q) && b.iter().any(|&y| y < p || y > q) {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }

    /// `kappa_pi[x b_1 x ... b_{k-1} x]`, inner blocks evaluated first.
    pub fn evaluate(&self, kappa: &MultilinearSeq, bs: &[Mat]) -> Result<Mat> {
        if bs.len() + 1 != self.k {
            return Err(Error::Dimension("partition size and argument count differ".into()));
        }
        self.eval_interval(kappa, bs, 0, self.k - 1)
    }

    fn eval_interval(&self, kappa: &MultilinearSeq, bs: &[Mat], lo: usize, hi: usize) -> Result<Mat> {
        let verts = &self.blocks[self.block_of[lo]];
        let mut args = Vec::with_capacity(verts.len() - 1);
        for w in verts.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b == a + 1 {
                args.push(bs[a].clone());
            } else {
                let inner = self.eval_interval(kappa, bs, a + 1, b - 1)?;
                args.push(&bs[a] * inner * &bs[b - 1]);
            }
        }
        let val = kappa.eval(verts.len(), &args)?;
        let last = *verts.last().unwrap();
        if last == hi {
            Ok(val)
        } else {
            Ok(val * &bs[last] * self.eval_interval(kappa, bs, last + 1, hi)?)
        }
    }
}

fn enumerate(lo: usize, hi: usize) -> Vec<Vec<Vec<usize>>> {
    // partitions of the interval [lo, hi)
    if lo >= hi {
        return vec![Vec::new()];
    }
    let rest = hi - lo - 1;
    let mut out = Vec::new();
    for mask in 0u64..(1u64 << rest) {
        let mut verts = vec![lo];
        verts.extend((0..rest).filter(|i| mask >> i & 1 == 1).map(|i| lo + 1 + i));
        let mut partials: Vec<Vec<Vec<usize>>> = vec![vec![verts.clone()]];
        let mut gaps: Vec<(usize, usize)> = verts.windows(2).map(|w| (w[0] + 1, w[1])).collect();
        gaps.push((*verts.last().unwrap() + 1, hi));
        for (a, b) in gaps {
            let fills = enumerate(a, b);
            partials = partials
                .iter()
                .flat_map(|p| {
                    fills.iter().map(move |f| {
                        let mut q = p.clone();
                        q.extend(f.iter().cloned());
                        q
                    })
                })
                .collect();
        }
        out.extend(partials);
    }
    out
}

fn partition_cache() -> &'static RwLock<HashMap<usize, Arc<Vec<NCPartition>>>> {
    static CACHE: OnceLock<RwLock<HashMap<usize, Arc<Vec<NCPartition>>>>> = OnceLock::new();
    CACHE.get_or_init(|| RwLock::new(HashMap::new()))
}

/// All non-crossing partitions of `k` points, `1 <= k <= 12`.
pub fn nc_partitions(k: usize) -> Result<Arc<Vec<NCPartition>>> {
    if !(1..=12).contains(&k) {
        return Err(Error::Domain(format!("partition size {k} outside 1..=12")));
    }
    if let Some(v) = partition_cache().read().expect("cache poisoned").get(&k) {
        return Ok(v.clone());
    }
    let list: Vec<NCPartition> = enumerate(0, k)
        .into_iter()
        .map(|b| NCPartition::from_blocks(k, b))
        .collect();
    let list = Arc::new(list);
    partition_cache()
        .write()
        .expect("cache poisoned")
        .entry(k)
        .or_insert_with(|| list.clone());
    Ok(list)
}

/// `mu[x b_1 x ... x]` as the explicit sum of nested cumulants over `NC(k)`.
pub fn moment_from_partitions(kappa: &MultilinearSeq, bs: &[Mat]) -> Result<Mat> {
    let k = bs.len() + 1;
    let mut acc = Mat::zeros(kappa.d(), kappa.d());
    for p in nc_partitions(k)?.iter() {
        acc += p.evaluate(kappa, bs)?;
    }
    Ok(acc)
}

/// Free cumulants `kappa_k: B^{k-1} -> B` of a law.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulantSeq {
    seq: MultilinearSeq,
    formal: bool,
}

impl CumulantSeq {
    pub fn new(seq: MultilinearSeq) -> Self {
        CumulantSeq { seq, formal: false }
    }

    /// Cumulants of the `B`-valued semicircular element of variance `eta`.
    pub fn semicircular(eta: &CpMap, degree: usize) -> Result<Self> {
        let d = eta.d();
        let mut seq = MultilinearSeq::zeros(d, degree);
        if degree >= 2 {
            for i in 0..d * d {
                seq.set(2, i, &eta.apply(&matrix_unit(d, i / d, i % d))?);
            }
        }
        Ok(CumulantSeq::new(seq))
    }

    pub fn d(&self) -> usize {
        self.seq.d()
    }

    pub fn max_degree(&self) -> usize {
        self.seq.degree()
    }

    pub fn seq(&self) -> &MultilinearSeq {
        &self.seq
    }

    /// `true` when positivity of the corresponding law is not guaranteed.
    pub fn is_formal(&self) -> bool {
        self.formal
    }

    pub fn with_formal(mut self, formal: bool) -> Self {
        self.formal = formal;
        self
    }

    /// `kappa_k(b_1, ..., b_{k-1})`.
    pub fn cumulant(&self, bs: &[Mat]) -> Result<Mat> {
        self.seq.eval(bs.len() + 1, bs)
    }

    /// Upper bound for `sup ||kappa_k(b_1, ..)||` over unit-norm arguments.
    pub fn norm_bound(&self, k: usize) -> f64 {
        let dd = self.d() * self.d();
        let raw = self.seq.raw(k);
        raw.chunks(dd)
            .map(|c| c.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt())
            .sum()
    }
}

/// Sum over blocks `V` containing the first point of the nested terms, for matrix-unit
/// arguments `digits`; `include_full` toggles the `V = {1..k}` term.
fn nested_sum(
    k: usize,
    digits: &[usize],
    kappa: &MultilinearSeq,
    mom: &MultilinearSeq,
    include_full: bool,
    out: &mut [C64],
) {
    let d = kappa.d();
    let dd = d * d;
    let idx_of = |ds: &[usize]| ds.iter().fold(0, |acc, &i| acc * dd + i);
    let full = (1u64 << (k - 1)) - 1;
    let mut verts = Vec::with_capacity(k);
    for mask in 0u64..=full {
        if !include_full && mask == full {
            continue;
        }
        verts.clear();
        verts.push(1usize);
        verts.extend((0..k - 1).filter(|i| mask >> i & 1 == 1).map(|i| i + 2));
        let m = verts.len();
        let mut coef = C64::new(1.0, 0.0);
        let mut kidx = 0usize;
        for j in 0..m - 1 {
            let (a, b) = (verts[j], verts[j + 1]);
            let i_a = digits[a - 1];
            if b == a + 1 {
                kidx = kidx * dd + i_a;
            } else {
                // E_pq M E_rs = M_qr E_ps
                let (p, q) = (i_a / d, i_a % d);
                let i_b = digits[b - 2];
                let (rr, s) = (i_b / d, i_b % d);
                let len = b - a - 1;
                let inner = idx_of(&digits[a..b - 2]);
                coef *= mom.raw(len)[inner * dd + q * d + rr];
                kidx = kidx * dd + p * d + s;
            }
            if coef == ZERO {
                break;
            }
        }
        if coef == ZERO {
            continue;
        }
        let kval = &kappa.raw(m)[kidx * dd..(kidx + 1) * dd];
        let vm = verts[m - 1];
        if vm == k {
            for (o, v) in out.iter_mut().zip(kval) {
                *o += coef * v;
            }
        } else {
            let i_v = digits[vm - 1];
            let (p, q) = (i_v / d, i_v % d);
            let tidx = idx_of(&digits[vm..k - 1]);
            let tail = &mom.raw(k - vm)[tidx * dd..(tidx + 1) * dd];
            for a in 0..d {
                let kp = coef * kval[a * d + p];
                if kp == ZERO {
                    continue;
                }
                for b in 0..d {
                    out[a * d + b] += kp * tail[q * d + b];
                }
            }
        }
    }
}

fn digits_of(idx: usize, len: usize, dd: usize) -> Vec<usize> {
    let mut ds = vec![0; len];
    let mut rest = idx;
    for slot in ds.iter_mut().rev() {
        *slot = rest % dd;
        rest /= dd;
    }
    ds
}

/// Moment maps to free cumulants through degree `N`.
pub fn moments_to_cumulants(mu: &BLaw) -> CumulantSeq {
    let mom = mu.moments();
    let (d, n) = (mom.d(), mom.degree());
    let dd = d * d;
    let mut kappa = MultilinearSeq::zeros(d, n);
    for k in 1..=n {
        let count = mom.len_of(k);
        for idx in 0..count {
            let digits = digits_of(idx, k - 1, dd);
            let mut acc = vec![ZERO; dd];
            nested_sum(k, &digits, &kappa, mom, false, &mut acc);
            let m = mom.unit(k, idx);
            let val = Mat::from_fn(d, d, |a, b| m[(a, b)] - acc[a * d + b]);
            kappa.set(k, idx, &val);
        }
    }
    CumulantSeq::new(kappa).with_formal(mu.is_formal())
}

/// Free cumulants back to a moment-form law with norm bound `radius`.
pub fn cumulants_to_moments(kappa: &CumulantSeq, radius: f64) -> Result<BLaw> {
    let ks = kappa.seq();
    let (d, n) = (ks.d(), ks.degree());
    let dd = d * d;
    let mut mom = MultilinearSeq::zeros(d, n);
    for k in 1..=n {
        for idx in 0..mom.len_of(k) {
            let digits = digits_of(idx, k - 1, dd);
            let mut acc = vec![ZERO; dd];
            nested_sum(k, &digits, ks, &mom, true, &mut acc);
            mom.set(k, idx, &Mat::from_row_slice(d, d, &acc));
        }
    }
    Ok(BLaw::from_moments(mom, radius)?.with_formal(kappa.is_formal()))
}

/// `kappa'_k = eta o kappa_k`; flagged formal unless `eta - id` is completely positive.
pub fn convolve_eta(kappa: &CumulantSeq, eta: &CpMap, tol: &Tolerances) -> Result<CumulantSeq> {
    if eta.d() != kappa.d() {
        return Err(Error::Dimension("eta acts on a different B".into()));
    }
    let seq = kappa.seq().map_values(|m| eta.apply(m))?;
    let formal = kappa.is_formal() || !eta.is_eta_minus_id_cp(tol);
    Ok(CumulantSeq::new(seq).with_formal(formal))
}

/// Degree-wise sum: the cumulants of the free additive convolution.
pub fn convolve_add(k1: &CumulantSeq, k2: &CumulantSeq) -> Result<CumulantSeq> {
    Ok(CumulantSeq::new(k1.seq().add(k2.seq())?).with_formal(k1.is_formal() || k2.is_formal()))
}

/// `sum_{k=1}^N kappa_k^{(n)}(z, ..., z)` with a geometric tail estimate.
pub fn r_series(kappa: &CumulantSeq, z: &AmpElem, tol: &Tolerances) -> Result<Evaluation> {
    let n = z.n();
    let big_n = kappa.max_degree();
    let nilpotent = is_strictly_upper_block(z);
    let tail = if nilpotent {
        if n > big_n {
            return Err(Error::Degree {
                requested: n,
                available: big_n,
            });
        }
        0.0
    } else {
        let rho = (2..=big_n)
            .map(|k| kappa.norm_bound(k).powf(1.0 / (k - 1) as f64))
            .fold(0.0, f64::max);
        let q = rho * n as f64 * op_norm(z.mat());
        if q >= 1.0 {
            return Err(Error::Convergence(format!("cumulant series diverges (ratio {q:.3e})")));
        }
        let t = q.powi(big_n as i32) / (1.0 - q);
        if t > tol.newton_tol {
            return Err(Error::Convergence(format!(
                "cumulant series tail estimate {t:.3e} exceeds {:.1e}",
                tol.newton_tol
            )));
        }
        t
    };
    let terms = if nilpotent { n.min(big_n) } else { big_n };
    let mut acc = AmpElem::zero(z.d(), n);
    for k in 1..=terms {
        let args = vec![z.clone(); k - 1];
        acc = acc.add(&kappa.seq().eval_amplified(k, &args, n)?)?;
    }
    Ok(Evaluation { value: acc, tail })
}

/// `kappa_k(b_1, ..., b_{k-1})` extracted from the analytic R-transform: the block
/// `(0, k-1)` of `R^{(k)}` at the nilpotent shift `t S(b)` is `t^{k-1} kappa_k(b)`, and `R`
/// at that non-invertible point is the mean of `R(t S + eps e^{i theta})` over the circle.
pub fn extract_cumulant_analytic(law: &BLaw, bs: &[Mat], nodes: usize, tol: &Tolerances) -> Result<Mat> {
    let d = law.d();
    let k = bs.len() + 1;
    if k == 1 {
        let z0 = AmpElem::from_b(&eye(d));
        return circle_mean(law, &z0.scale(C64::new(0.0, 0.0)), nodes, tol).map(|m| m.block(0, 0));
    }
    let norms: f64 = bs.iter().map(op_norm).fold(0.0, f64::max).max(1e-300);
    let c = 3.0 - 2.0 * 2f64.sqrt();
    let ball = c / law.radius().max(1e-300);
    let t = 0.45 * ball / norms;
    let scaled: Vec<Mat> = bs.iter().map(|b| b * C64::new(t, 0.0)).collect();
    let s = AmpElem::upper_shift(&scaled)?;
    let mean = circle_mean(law, &s, nodes, tol)?;
    Ok(mean.block(0, k - 1) / C64::new(t.powi(k as i32 - 1), 0.0))
}

fn circle_mean(law: &BLaw, z: &AmpElem, nodes: usize, tol: &Tolerances) -> Result<AmpElem> {
    let c = 3.0 - 2.0 * 2f64.sqrt();
    let ball = c / law.radius().max(1e-300);
    let eps = 0.45 * ball;
    let nd = z.n() * z.d();
    let mut acc = AmpElem::zero(z.d(), z.n());
    for j in 0..nodes {
        let th = 2.0 * std::f64::consts::PI * (j as f64 + 0.5) / nodes as f64;
        let shift = C64::from_polar(eps, th);
        let zj = z.with_mat(z.mat() + eye(nd) * shift);
        acc = acc.add(&law.r_transform(&zj, tol)?)?;
    }
    Ok(acc.scale(C64::new(1.0 / nodes as f64, 0.0)))
}
