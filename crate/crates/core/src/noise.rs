//! Label corruption, balanced label realisation, the theory constants and the
//! accuracy conditions built on them.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill;
use crate::error::{Error, Result};
use crate::format::num;
use crate::gram::{CorrelationCase, GramModel, SuperclassMap};

/// Margin by which a strict inequality must hold; anything closer is a tie
/// and ties count as failures.
pub const STRICT_MARGIN: f64 = 1e-12;

/// Row- and column-stochastic matrix of true → given label frequencies.
#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionMatrix {
    entries: DMatrix<f64>,
}

impl CorruptionMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        Self::with_tolerance(entries, 1e-12)
    }

    /// Like [`CorruptionMatrix::new`] with a custom sum tolerance, for
    /// matrices read back from rounded text.
    pub fn with_tolerance(entries: DMatrix<f64>, tol: f64) -> Result<Self> {
        if !entries.is_square() || entries.nrows() == 0 {
            return Err(Error::invalid(format!(
                "corruption matrix must be square and non-empty, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        let k = entries.nrows();
        for i in 0..k {
            for j in 0..k {
                let x = entries[(i, j)];
                if !(0.0..=1.0).contains(&x) {
                    return Err(Error::invalid(format!(
                        "corruption entry ({i}, {j}) = {x} is outside [0, 1]"
                    )));
                }
            }
        }
        for i in 0..k {
            let s = entries.row(i).sum();
            if (s - 1.0).abs() > tol {
                return Err(Error::invalid(format!("corruption row {i} sums to {s}, not 1")));
            }
        }
        for j in 0..k {
            let s = entries.column(j).sum();
            if (s - 1.0).abs() > tol {
                return Err(Error::invalid(format!(
                    "corruption column {j} sums to {s}, not 1 (given labels must be balanced)"
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn identity(k: usize) -> Self {
        Self { entries: DMatrix::identity(k, k) }
    }

    pub fn k(&self) -> usize {
        self.entries.nrows()
    }

    pub fn get(&self, true_class: usize, given: usize) -> f64 {
        self.entries[(true_class, given)]
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn row(&self, k: usize) -> Vec<f64> {
        self.entries.row(k).iter().copied().collect()
    }

    /// `min_{k≠k'} C_kk − C_kk'`; `+∞` when `K = 1`.
    pub fn min_gap(&self) -> f64 {
        let k = self.k();
        let mut g = f64::INFINITY;
        for a in 0..k {
            for b in (0..k).filter(|&b| b != a) {
                g = g.min(self.get(a, a) - self.get(a, b));
            }
        }
        g
    }

    /// Fails if any label is flipped across superclasses.
    pub fn check_within_superclasses(&self, map: &SuperclassMap) -> Result<()> {
        if map.num_classes() != self.k() {
            return Err(Error::invalid(format!(
                "superclass map covers {} classes, corruption matrix has {}",
                map.num_classes(),
                self.k()
            )));
        }
        for a in 0..self.k() {
            for b in 0..self.k() {
                if self.get(a, b) > 0.0 && map.superclass_of(a) != map.superclass_of(b) {
                    return Err(Error::invalid(format!(
                        "corruption entry ({a}, {b}) flips labels across superclasses; \
                         the accuracy conditions assume noise stays within a superclass"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    Symmetric,
    /// Extra mass `2η/K` on the cyclic successor class `(k + 1) mod K`.
    Asymmetric,
    /// Uniform flips within the superclass only.
    Superclass,
    Explicit,
}

pub fn make_corruption(
    kind: CorruptionKind,
    eta: f64,
    k: usize,
    map: Option<&SuperclassMap>,
    explicit: Option<&DMatrix<f64>>,
) -> Result<CorruptionMatrix> {
    if kind == CorruptionKind::Explicit {
        let m = explicit.ok_or_else(|| Error::invalid("explicit corruption needs a matrix"))?;
        return CorruptionMatrix::new(m.clone());
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::invalid(format!("corruption rate {eta} outside [0, 1]")));
    }
    if k == 0 {
        return Err(Error::invalid("K must be positive"));
    }
    if eta == 0.0 {
        return Ok(CorruptionMatrix::identity(k));
    }
    if k < 2 {
        return Err(Error::invalid("label noise needs at least two classes"));
    }
    let kf = k as f64;
    let entries = match kind {
        CorruptionKind::Symmetric => DMatrix::from_fn(k, k, |a, b| {
            if a == b { 1.0 - eta } else { eta / (kf - 1.0) }
        }),
        CorruptionKind::Asymmetric => DMatrix::from_fn(k, k, |a, b| {
            if a == b {
                1.0 - eta
            } else if b == (a + 1) % k {
                2.0 * eta / kf
            } else {
                eta / kf
            }
        }),
        CorruptionKind::Superclass => {
            let map = map.ok_or_else(|| Error::invalid("superclass corruption needs a superclass map"))?;
            if map.num_classes() != k {
                return Err(Error::invalid("superclass map does not match K"));
            }
            if let Some(s) = (0..map.num_superclasses()).find(|&s| map.size(s) < 2) {
                return Err(Error::invalid(format!(
                    "superclass {s} has a single class, so superclass corruption with η > 0 is undefined"
                )));
            }
            DMatrix::from_fn(k, k, |a, b| {
                if a == b {
                    1.0 - eta
                } else if map.superclass_of(a) == map.superclass_of(b) {
                    eta / (map.size(map.superclass_of(a)) as f64 - 1.0)
                } else {
                    0.0
                }
            })
        }
        CorruptionKind::Explicit => unreachable!(),
    };
    CorruptionMatrix::new(entries)
}

/// Paired true/given labels in canonical order (sorted by true label).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelAssignment {
    pub true_labels: Vec<usize>,
    pub given_labels: Vec<usize>,
    k: usize,
}

impl LabelAssignment {
    pub fn new(true_labels: Vec<usize>, given_labels: Vec<usize>, k: usize) -> Result<Self> {
        if true_labels.len() != given_labels.len() || k == 0 || !true_labels.len().is_multiple_of(k) {
            return Err(Error::invalid("label lists must have equal length K·n"));
        }
        let n = true_labels.len() / k;
        if let Some(i) = (0..true_labels.len()).find(|&i| true_labels[i] != i / n) {
            return Err(Error::invalid(format!(
                "true labels must be in canonical sorted order (sample {i})"
            )));
        }
        let mut counts = vec![0usize; k];
        for &g in &given_labels {
            if g >= k {
                return Err(Error::invalid(format!("given label {g} out of range for K = {k}")));
            }
            counts[g] += 1;
        }
        if let Some(c) = counts.iter().position(|&c| c != n) {
            return Err(Error::invalid(format!(
                "given labels are unbalanced: class {c} appears {} times, expected {n}",
                counts[c]
            )));
        }
        Ok(Self { true_labels, given_labels, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.true_labels.len() / self.k
    }

    pub fn len(&self) -> usize {
        self.true_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.true_labels.is_empty()
    }

    /// Count matrix `N[k, k'] = |{i : y_i = k, ŷ_i = k'}|`.
    pub fn counts(&self) -> DMatrix<usize> {
        let mut m = DMatrix::zeros(self.k, self.k);
        for (&y, &g) in self.true_labels.iter().zip(&self.given_labels) {
            m[(y, g)] += 1;
        }
        m
    }

    pub fn empirical_corruption(&self) -> CorruptionMatrix {
        let n = self.n() as f64;
        CorruptionMatrix { entries: self.counts().map(|c| c as f64 / n) }
    }
}

/// Best rational approximation `p/q` of `x ∈ [0, 1]` with `q ≤ max_den`
/// within `tol`, by continued fractions.
fn rational(x: f64, tol: f64, max_den: u64) -> Option<(u64, u64)> {
    let (mut h0, mut h1) = (0u64, 1u64);
    let (mut k0, mut k1) = (1u64, 0u64);
    let mut y = x;
    for _ in 0..64 {
        let a = y.floor();
        let ai = a as u64;
        let h2 = ai.checked_mul(h1)?.checked_add(h0)?;
        let k2 = ai.checked_mul(k1)?.checked_add(k0)?;
        if k2 > max_den {
            return None;
        }
        (h0, h1, k0, k1) = (h1, h2, k1, k2);
        if (h1 as f64 / k1 as f64 - x).abs() <= tol {
            return Some((h1, k1));
        }
        let frac = y - a;
        if frac <= 0.0 {
            break;
        }
        y = 1.0 / frac;
    }
    None
}

fn counts_to_assignment(counts: &DMatrix<usize>, n: usize, seed: u64) -> LabelAssignment {
    let k = counts.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut given = Vec::with_capacity(k * n);
    for row in 0..k {
        let mut block: Vec<usize> = (0..k)
            .flat_map(|col| std::iter::repeat_n(col, counts[(row, col)]))
            .collect();
        block.shuffle(&mut rng);
        given.extend(block);
    }
    let true_labels = (0..k).flat_map(|c| std::iter::repeat_n(c, n)).collect();
    LabelAssignment { true_labels, given_labels: given, k }
}

/// Realises `C` exactly with `n` samples per class.
///
/// Fails unless every `n·C[k, k']` is an integer; the error names the first
/// offending entry (1-based) and the smallest `n` that would work.
pub fn realize_labels(c: &CorruptionMatrix, n: usize, seed: u64) -> Result<LabelAssignment> {
    if n == 0 {
        return Err(Error::invalid("n must be positive"));
    }
    let k = c.k();
    let mut counts = DMatrix::zeros(k, k);
    let mut offending = None;
    for a in 0..k {
        for b in 0..k {
            let x = n as f64 * c.get(a, b);
            if (x - x.round()).abs() <= 1e-9 {
                counts[(a, b)] = x.round() as usize;
            } else if offending.is_none() {
                offending = Some((a, b, x));
            }
        }
    }
    if let Some((a, b, x)) = offending {
        let mut lcm = 1u64;
        for v in c.entries().iter() {
            match rational(*v, 1e-9, 1_000_000) {
                Some((_, den)) => lcm = num_integer::lcm(lcm, den),
                None => {
                    return Err(Error::invalid(format!(
                        "n·C[{},{}] = {n}·{} = {} is not an integer, and C has an entry with no \
                         rational form of denominator ≤ 10^6; use the rounded realization",
                        a + 1,
                        b + 1,
                        num(c.get(a, b)),
                        num(x)
                    )))
                }
            }
        }
        return Err(Error::invalid(format!(
            "n·C[{},{}] = {n}·{} = {} is not an integer; the smallest n that realizes C exactly is {lcm}",
            a + 1,
            b + 1,
            num(c.get(a, b)),
            num(x)
        )));
    }
    Ok(counts_to_assignment(&counts, n, seed))
}

/// Realises the closest balanced integer count matrix to `n·C`.
///
/// Each count is `⌊n·C⌋` or `⌈n·C⌉`, with every row and column summing to
/// `n`, so the result is exact whenever `n·C` is integral. The empirical
/// corruption matrix of the result is what downstream closed forms should use.
pub fn realize_labels_rounded(c: &CorruptionMatrix, n: usize, seed: u64) -> Result<LabelAssignment> {
    if n == 0 {
        return Err(Error::invalid("n must be positive"));
    }
    let k = c.k();
    let mut counts = DMatrix::zeros(k, k);
    let mut fractional = vec![vec![false; k]; k];
    for a in 0..k {
        for b in 0..k {
            let x = n as f64 * c.get(a, b);
            if (x - x.round()).abs() <= 1e-9 {
                counts[(a, b)] = x.round() as usize;
            } else {
                counts[(a, b)] = x.floor() as usize;
                fractional[a][b] = true;
            }
        }
    }
    let row_deficit: Vec<usize> = (0..k)
        .map(|a| n - (0..k).map(|b| counts[(a, b)]).sum::<usize>())
        .collect();
    let mut col_deficit: Vec<usize> = (0..k)
        .map(|b| n - (0..k).map(|a| counts[(a, b)]).sum::<usize>())
        .collect();
    // Bipartite b-matching by augmenting paths: rows with deficits send one
    // unit through fractional cells to columns with deficits.
    let mut flow = vec![vec![false; k]; k];
    for a in 0..k {
        for _ in 0..row_deficit[a] {
            let mut seen = vec![false; k];
            if !augment(a, &fractional, &mut flow, &mut col_deficit, &mut seen) {
                return Err(Error::numerical(
                    "could not round n·C to a balanced integer matrix",
                ));
            }
        }
    }
    for a in 0..k {
        for b in 0..k {
            if flow[a][b] {
                counts[(a, b)] += 1;
            }
        }
    }
    Ok(counts_to_assignment(&counts, n, seed))
}

fn augment(
    row: usize,
    cells: &[Vec<bool>],
    flow: &mut [Vec<bool>],
    col_deficit: &mut [usize],
    seen: &mut [bool],
) -> bool {
    let k = cells.len();
    for col in 0..k {
        if !cells[row][col] || flow[row][col] || seen[col] {
            continue;
        }
        seen[col] = true;
        if col_deficit[col] > 0 {
            col_deficit[col] -= 1;
            flow[row][col] = true;
            return true;
        }
        // Column is saturated: try to reroute one of its current units.
        for other in 0..k {
            if flow[other][col] {
                flow[other][col] = false;
                if augment(other, cells, flow, col_deficit, seen) {
                    flow[row][col] = true;
                    return true;
                }
                flow[other][col] = true;
            }
        }
    }
    false
}

/// `λ_eig / (K²nλ + λ_eig)`.
fn ratio(eig: f64, kappa: f64) -> f64 {
    eig / (kappa + eig)
}

/// CaseV quantities: the constant `s`, the `δ_i`, and the exact
/// superclass-level operator from which `ν(t)` and `μ_s^(t)` are read off.
#[derive(Clone, Debug)]
pub struct ExtendedConstants {
    pub e: f64,
    pub s: f64,
    /// Coefficient of the all-ones class matrix in the one-round class-level
    /// operator `M = qI + a·1 + Qᵀdiag(δ)Q`. The decomposition is exact for
    /// equal superclass sizes; otherwise `a` is the mean cross-superclass
    /// entry and cross entries vary with the superclass pair.
    pub a: f64,
    pub delta: Vec<f64>,
    q: f64,
    sizes: Vec<f64>,
    block_ratios: Vec<f64>,
    block_vectors: DMatrix<f64>,
}

impl ExtendedConstants {
    /// The `t`-round operator restricted to superclass indicators, written in
    /// the (unnormalised) indicator basis.
    pub fn superclass_operator(&self, t: u32) -> DMatrix<f64> {
        let r = self.sizes.len();
        DMatrix::from_fn(r, r, |a, b| {
            let v: f64 = (0..r)
                .map(|j| {
                    self.block_vectors[(a, j)] * self.block_ratios[j].powi(t as i32) * self.block_vectors[(b, j)]
                })
                .sum();
            v * (self.sizes[b] / self.sizes[a]).sqrt()
        })
    }

    /// `Ω(t)`: the coefficient of `(ē_r − 1/K)` contributed to a sample of
    /// superclass `s` is `K_r Ω_rs`.
    pub fn omega(&self, t: u32) -> DMatrix<f64> {
        let mut b = self.superclass_operator(t);
        let qt = self.q.powi(t as i32);
        for s in 0..b.ncols() {
            b[(s, s)] -= qt;
        }
        for s in 0..b.ncols() {
            let size = self.sizes[s];
            b.column_mut(s).iter_mut().for_each(|x| *x /= size);
        }
        b
    }

    /// Mean off-diagonal entry of `Ω(t)` (zero for a single superclass).
    pub fn nu(&self, t: u32) -> f64 {
        let r = self.sizes.len();
        if r < 2 {
            return 0.0;
        }
        let om = self.omega(t);
        let mut sum = 0.0;
        for a in 0..r {
            for b in (0..r).filter(|&b| b != a) {
                sum += om[(a, b)];
            }
        }
        sum / (r * (r - 1)) as f64
    }

    /// Superclass-average coefficient `μ_s^(t) = K_s(Ω_ss − ν(t))`. With
    /// equal superclass sizes this is `(q + K_s δ_s)^t − q^t`.
    pub fn mu(&self, s: usize, t: u32) -> f64 {
        self.sizes[s] * (self.omega(t)[(s, s)] - self.nu(t))
    }
}

/// The scalars that drive every closed-form prediction.
#[derive(Clone, Debug)]
pub struct TheoryConstants {
    pub case: CorrelationCase,
    pub k: usize,
    pub n: usize,
    pub lambda: f64,
    /// Bulk ratio. For CaseII, the value of the class with the smallest
    /// `q_k/p_k`; the per-class values are in `p_class`.
    pub p: f64,
    /// Class ratio (CaseII: see `p`).
    pub q: f64,
    /// Superclass ratio per superclass.
    pub r: Vec<f64>,
    pub p_class: Vec<f64>,
    pub q_class: Vec<f64>,
    pub superclasses: SuperclassMap,
    pub extended: Option<ExtendedConstants>,
}

impl TheoryConstants {
    pub fn kappa(&self) -> f64 {
        (self.k * self.k * self.n) as f64 * self.lambda
    }

    /// `q_k / p_k` for the class of a true label.
    pub fn class_ratio(&self, k: usize) -> f64 {
        self.q_class[k] / self.p_class[k]
    }

    pub fn ratio(&self) -> f64 {
        self.q / self.p
    }

    /// `1/((q_k/p_k)^t − 1)`; infinite when the ratio does not exceed 1.
    pub fn threshold(&self, k: usize, t: u32) -> f64 {
        phase_threshold(self.class_ratio(k).powi(t as i32))
    }

    pub fn r_of_class(&self, k: usize) -> f64 {
        self.r[self.superclasses.superclass_of(k)]
    }
}

fn phase_threshold(ratio_power: f64) -> f64 {
    if ratio_power > 1.0 {
        1.0 / (ratio_power - 1.0)
    } else {
        f64::INFINITY
    }
}

pub fn theory_constants(model: &GramModel, lambda: f64) -> Result<TheoryConstants> {
    if model.c < model.d && model.case != CorrelationCase::CaseII {
        return Err(Error::invalid(format!(
            "need c >= d for the class level to dominate, got c = {}, d = {}",
            model.c, model.d
        )));
    }
    model.validate_allowing_degenerate()?;
    if model.is_perturbed() {
        return Err(Error::invalid("theory constants need an unperturbed Gram model"));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("λ must be positive and finite, got {lambda}")));
    }
    let (k, n) = (model.k, model.n);
    let (kf, nf) = (k as f64, n as f64);
    let kappa = kf * kf * nf * lambda;
    let map = model.superclass_map();

    if model.case == CorrelationCase::CaseII {
        let p_class: Vec<f64> = model.omega.iter().map(|w| ratio(1.0 - w, kappa)).collect();
        let q_class: Vec<f64> = model.omega.iter().map(|w| ratio(nf * w + 1.0 - w, kappa)).collect();
        let worst = (0..k)
            .min_by(|&a, &b| (q_class[a] / p_class[a]).total_cmp(&(q_class[b] / p_class[b])))
            .unwrap();
        let (p, q) = (p_class[worst], q_class[worst]);
        return Ok(TheoryConstants {
            case: model.case,
            k,
            n,
            lambda,
            p,
            q,
            r: vec![q],
            p_class,
            q_class,
            superclasses: map,
            extended: None,
        });
    }

    let (c, d) = (model.c, model.d);
    let e = if model.case == CorrelationCase::CaseV { model.e } else { 0.0 };
    let class_level = 1.0 - c + nf * (c - d);
    let p = ratio(1.0 - c, kappa);
    let q = ratio(class_level, kappa);
    let r: Vec<f64> = map
        .sizes()
        .iter()
        .map(|&ks| ratio(class_level + ks as f64 * nf * d, kappa))
        .collect();

    let extended = (model.case == CorrelationCase::CaseV).then(|| {
        let sizes: Vec<f64> = map.sizes().iter().map(|&x| x as f64).collect();
        let rr = sizes.len();
        let s = ratio(class_level + kf * nf * e, kappa);
        let block = DMatrix::from_fn(rr, rr, |a, b| {
            let mut v = nf * e * (sizes[a] * sizes[b]).sqrt();
            if a == b {
                v += nf * (d - e) * sizes[a] + class_level;
            }
            v
        });
        let eig = SymmetricEigen::new(block);
        let mut ext = ExtendedConstants {
            e,
            s,
            a: 0.0,
            delta: vec![0.0; rr],
            q,
            block_ratios: eig.eigenvalues.iter().map(|&m| ratio(m, kappa)).collect(),
            block_vectors: eig.eigenvectors,
            sizes,
        };
        // Read the one-round coefficients off the exact operator rather than
        // a closed-form inverse: the cross-superclass entry is the mean
        // off-diagonal of Ω(1) and δ_s is the within-superclass excess.
        let om = ext.omega(1);
        ext.a = ext.nu(1);
        ext.delta = (0..rr).map(|r| om[(r, r)] - ext.a).collect();
        ext
    });

    Ok(TheoryConstants {
        case: model.case,
        k,
        n,
        lambda,
        p,
        q,
        r,
        p_class: vec![p; k],
        q_class: vec![q; k],
        superclasses: map,
        extended,
    })
}

/// Verdict for one ordered class pair `(k, k')`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairCheck {
    pub true_class: usize,
    pub other: usize,
    /// `C[k, k']`: fraction of class `k` labelled `k'`.
    pub mass: f64,
    /// `C[k, k] − C[k, k']`.
    pub gap: f64,
    pub threshold: f64,
    /// Clean samples of class `k` still prefer `k` over `k'`.
    pub clean_ok: bool,
    /// Samples of class `k` labelled `k'` are recovered; `None` when there
    /// are no such samples.
    pub noisy_ok: Option<bool>,
}

impl PairCheck {
    pub fn holds(&self) -> bool {
        self.clean_ok && self.noisy_ok != Some(false)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConditionReport {
    pub achieves_100: bool,
    pub failing_pairs: Vec<(usize, usize)>,
    pub pairs: Vec<PairCheck>,
}

/// Evaluates the per-pair phase conditions with one threshold per true class.
///
/// A sample of class `k` given label `k'` is classified correctly iff
/// `C_kk − C_kk' > thr_k` and `C_kk > C_kk''` for every other `k''`; a clean
/// sample iff `C_kk − C_kk' > −thr_k` for every `k'`. Pairs with no samples
/// impose nothing.
fn evaluate_pairs(c: &CorruptionMatrix, thresholds: &[f64]) -> ConditionReport {
    let k = c.k();
    let mut pairs = Vec::with_capacity(k * k.saturating_sub(1));
    for a in 0..k {
        let caa = c.get(a, a);
        let thr = thresholds[a];
        for b in (0..k).filter(|&b| b != a) {
            let mass = c.get(a, b);
            let gap = caa - c.get(a, b);
            let clean_ok = caa == 0.0 || gap + thr > STRICT_MARGIN;
            let noisy_ok = (mass > 0.0).then(|| {
                gap - thr > STRICT_MARGIN
                    && (0..k)
                        .filter(|&o| o != a && o != b)
                        .all(|o| caa - c.get(a, o) > STRICT_MARGIN)
            });
            pairs.push(PairCheck { true_class: a, other: b, mass, gap, threshold: thr, clean_ok, noisy_ok });
        }
    }
    let failing_pairs: Vec<_> = pairs.iter().filter(|p| !p.holds()).map(|p| (p.true_class, p.other)).collect();
    ConditionReport { achieves_100: failing_pairs.is_empty(), failing_pairs, pairs }
}

fn check_dims(c: &CorruptionMatrix, tc: &TheoryConstants) -> Result<()> {
    if c.k() != tc.k {
        return Err(Error::invalid(format!(
            "corruption matrix is {}x{} but the constants are for K = {}",
            c.k(),
            c.k(),
            tc.k
        )));
    }
    c.check_within_superclasses(&tc.superclasses)
}

/// Whether the `t`-round self-distilled model classifies every clean and
/// noisy training pair type correctly.
pub fn sd_accuracy_condition(c: &CorruptionMatrix, tc: &TheoryConstants, t: u32) -> Result<ConditionReport> {
    if t == 0 {
        return Err(Error::invalid("the condition is defined for rounds t >= 1"));
    }
    check_dims(c, tc)?;
    let thresholds: Vec<f64> = (0..tc.k).map(|k| tc.threshold(k, t)).collect();
    Ok(evaluate_pairs(c, &thresholds))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MinimalRounds {
    Rounds(u32),
    Unreachable,
}

/// The smallest `t` at which [`sd_accuracy_condition`] holds.
pub fn minimal_rounds(c: &CorruptionMatrix, tc: &TheoryConstants) -> Result<MinimalRounds> {
    check_dims(c, tc)?;
    if let Some(k) = (0..tc.k).find(|&k| tc.class_ratio(k) <= 1.0) {
        return Err(Error::invalid(format!(
            "need q > p (class {k} has q/p = {}); distillation cannot separate noise",
            tc.class_ratio(k)
        )));
    }
    // Any noisy pair type without a strictly positive margin over every
    // other label can never be recovered.
    let mut estimate = 1.0f64;
    for a in 0..c.k() {
        for b in (0..c.k()).filter(|&b| b != a) {
            if c.get(a, b) == 0.0 {
                continue;
            }
            let row_ok = (0..c.k()).filter(|&o| o != a).all(|o| c.get(a, a) - c.get(a, o) > STRICT_MARGIN);
            if !row_ok {
                return Ok(MinimalRounds::Unreachable);
            }
            let gap = c.get(a, a) - c.get(a, b);
            estimate = estimate.max((1.0 + 1.0 / gap).ln() / tc.class_ratio(a).ln());
        }
    }
    const CAP: u32 = 100_000_000;
    if !(estimate < CAP as f64) {
        return Err(Error::numerical(format!("minimal round count exceeds {CAP}")));
    }
    let holds = |t: u32| sd_accuracy_condition(c, tc, t).map(|r| r.achieves_100);
    let mut t = (estimate.floor() as u32).max(1);
    while !holds(t)? {
        t += 1;
        if t > CAP {
            return Err(Error::numerical(format!("minimal round count exceeds {CAP}")));
        }
    }
    while t > 1 && holds(t - 1)? {
        t -= 1;
    }
    Ok(MinimalRounds::Rounds(t))
}

/// `C_kk > C_kk'` for every `k ≠ k'`: the top-2 student recovers every pair.
pub fn pll_accuracy_condition(c: &CorruptionMatrix) -> ConditionReport {
    let k = c.k();
    let mut pairs = Vec::new();
    for a in 0..k {
        for b in (0..k).filter(|&b| b != a) {
            let gap = c.get(a, a) - c.get(a, b);
            let ok = gap > STRICT_MARGIN;
            pairs.push(PairCheck {
                true_class: a,
                other: b,
                mass: c.get(a, b),
                gap,
                threshold: 0.0,
                clean_ok: ok,
                noisy_ok: (c.get(a, b) > 0.0).then_some(ok),
            });
        }
    }
    let failing_pairs: Vec<_> = pairs.iter().filter(|p| !p.clean_ok).map(|p| (p.true_class, p.other)).collect();
    ConditionReport { achieves_100: failing_pairs.is_empty(), failing_pairs, pairs }
}

/// `(p^(i), q^(i))` for one round of an evolving-feature schedule.
pub fn round_ratios(c_i: f64, d_i: f64, lambda: f64, k: usize, n: usize) -> (f64, f64) {
    let kappa = (k * k * n) as f64 * lambda;
    let nf = n as f64;
    (ratio(1.0 - c_i, kappa), ratio(1.0 - c_i + nf * (c_i - d_i), kappa))
}

/// Phase condition when the feature correlations change every round; the
/// threshold uses the product of the per-round `q/p` ratios.
pub fn evolving_condition_report(
    c: &CorruptionMatrix,
    schedule: &[(f64, f64)],
    lambda: f64,
    k: usize,
    n: usize,
    t: u32,
) -> Result<ConditionReport> {
    if t == 0 {
        return Err(Error::invalid("the condition is defined for rounds t >= 1"));
    }
    if schedule.len() < t as usize {
        return Err(Error::invalid(format!(
            "schedule has {} rounds but t = {t}",
            schedule.len()
        )));
    }
    if c.k() != k {
        return Err(Error::invalid("corruption matrix does not match K"));
    }
    if !(lambda > 0.0) || n == 0 {
        return Err(Error::invalid("need λ > 0 and n > 0"));
    }
    let mut product = 1.0;
    for (i, &(ci, di)) in schedule.iter().take(t as usize).enumerate() {
        if !(ci < 1.0 && ci > di && di >= 0.0) {
            return Err(Error::invalid(format!(
                "round {} needs 1 > c > d >= 0, got ({ci}, {di})",
                i + 1
            )));
        }
        let (p, q) = round_ratios(ci, di, lambda, k, n);
        product *= q / p;
    }
    Ok(evaluate_pairs(c, &vec![phase_threshold(product); k]))
}

pub fn evolving_condition(
    c: &CorruptionMatrix,
    schedule: &[(f64, f64)],
    lambda: f64,
    k: usize,
    n: usize,
    t: u32,
) -> Result<bool> {
    evolving_condition_report(c, schedule, lambda, k, n, t).map(|r| r.achieves_100)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyMode {
    Sd,
    Pll,
}

/// Population accuracy of the `t`-round model (or the top-2 student): the
/// mass of clean and noisy pair types that end up classified correctly.
pub fn predicted_population_accuracy(
    c: &CorruptionMatrix,
    tc: &TheoryConstants,
    t: u32,
    mode: AccuracyMode,
) -> Result<f64> {
    check_dims(c, tc)?;
    let k = c.k();
    let mut acc = 0.0;
    match mode {
        AccuracyMode::Sd => {
            let report = sd_accuracy_condition(c, tc, t)?;
            for a in 0..k {
                let row = &report.pairs[a * (k - 1)..(a + 1) * (k - 1)];
                if row.iter().all(|p| p.clean_ok) {
                    acc += c.get(a, a);
                }
                acc += row.iter().filter(|p| p.noisy_ok == Some(true)).map(|p| p.mass).sum::<f64>();
            }
        }
        AccuracyMode::Pll => {
            for a in 0..k {
                for b in 0..k {
                    if c.get(a, b) == 0.0 {
                        continue;
                    }
                    let out = distill::pll_output(distill::Sample { true_label: a, given_label: b }, c, tc)?;
                    if distill::strict_argmax(&out.output) == Some(a) {
                        acc += c.get(a, b);
                    }
                }
            }
        }
    }
    Ok(acc / k as f64)
}

pub fn write_corruption_csv(path: &Path, c: &CorruptionMatrix) -> Result<()> {
    let mut out = String::new();
    for a in 0..c.k() {
        let row: Vec<String> = (0..c.k()).map(|b| num(c.get(a, b))).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a `K × K` row-major CSV. Sums are checked to 1e-9 to allow for the
/// 12-digit text format.
pub fn read_corruption_csv(path: &Path) -> Result<CorruptionMatrix> {
    let name = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Parse { path: name.clone(), line: 0, msg: e.to_string() })?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, rec) in reader.records().enumerate() {
        let line = idx as u64 + 1;
        let rec = rec.map_err(|e| Error::Parse { path: name.clone(), line, msg: e.to_string() })?;
        let row: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        rows.push(row.map_err(|e| Error::Parse { path: name.clone(), line, msg: e.to_string() })?);
    }
    let k = rows.len();
    if let Some(i) = rows.iter().position(|r| r.len() != k) {
        return Err(Error::Parse {
            path: name,
            line: i as u64 + 1,
            msg: format!("expected {k} columns for a {k}x{k} matrix"),
        });
    }
    CorruptionMatrix::with_tolerance(DMatrix::from_fn(k, k, |a, b| rows[a][b]), 1e-9)
}

pub fn write_labels_csv(path: &Path, labels: &LabelAssignment) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut write = || -> std::io::Result<()> {
        writeln!(f, "index,true_label,given_label")?;
        for (i, (y, g)) in labels.true_labels.iter().zip(&labels.given_labels).enumerate() {
            writeln!(f, "{i},{y},{g}")?;
        }
        f.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn read_labels_csv(path: &Path, k: usize) -> Result<LabelAssignment> {
    let name = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Parse { path: name.clone(), line: 0, msg: e.to_string() })?;
    let (mut truth, mut given) = (Vec::new(), Vec::new());
    for (idx, rec) in reader.records().enumerate() {
        let line = idx as u64 + 2;
        let rec = rec.map_err(|e| Error::Parse { path: name.clone(), line, msg: e.to_string() })?;
        let parse = |j: usize| -> Result<usize> {
            rec.get(j)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Parse { path: name.clone(), line, msg: format!("bad column {j}") })
        };
        if parse(0)? != idx {
            return Err(Error::Parse { path: name.clone(), line, msg: "indices must be 0, 1, 2, ...".into() });
        }
        truth.push(parse(1)?);
        given.push(parse(2)?);
    }
    LabelAssignment::new(truth, given, k)
}
