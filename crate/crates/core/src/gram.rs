//! Structured Gram matrices and their spectra.
//!
//! Samples are always laid out in canonical order: `n` samples of class 0,
//! then `n` of class 1, and so on, with classes themselves ordered so that the
//! superclass assignment is non-decreasing. Every dense matrix in this module
//! follows that layout, which is what makes the analytic eigenvectors simple
//! block indicators and Helmert contrasts.

use std::cmp::Ordering;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Assignment of each class to a superclass (0-based on both sides).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct SuperclassMap {
    assignments: Vec<usize>,
    sizes: Vec<usize>,
}

impl SuperclassMap {
    pub fn new(assignments: Vec<usize>) -> Result<Self> {
        if assignments.is_empty() {
            return Err(Error::invalid("superclass map must cover at least one class"));
        }
        if let Some(k) = (1..assignments.len()).find(|&k| assignments[k] < assignments[k - 1]) {
            return Err(Error::invalid(format!(
                "superclass assignments must be non-decreasing in class order (class {k} maps to {} after {})",
                assignments[k],
                assignments[k - 1]
            )));
        }
        let r = assignments[assignments.len() - 1] + 1;
        let mut sizes = vec![0usize; r];
        for &s in &assignments {
            sizes[s] += 1;
        }
        if let Some(s) = sizes.iter().position(|&sz| sz == 0) {
            return Err(Error::invalid(format!("superclass {s} has no classes")));
        }
        Ok(Self { assignments, sizes })
    }

    /// Consecutive superclasses with the given numbers of classes.
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        let assignments = sizes
            .iter()
            .enumerate()
            .flat_map(|(s, &sz)| std::iter::repeat_n(s, sz))
            .collect();
        Self::new(assignments)
    }

    /// All classes in one superclass.
    pub fn single(k: usize) -> Self {
        Self {
            assignments: vec![0; k],
            sizes: vec![k],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.assignments.len()
    }

    pub fn num_superclasses(&self) -> usize {
        self.sizes.len()
    }

    pub fn superclass_of(&self, class: usize) -> usize {
        self.assignments[class]
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn size(&self, s: usize) -> usize {
        self.sizes[s]
    }

    /// Classes of superclass `s`; contiguous because assignments are sorted.
    pub fn classes_in(&self, s: usize) -> std::ops::Range<usize> {
        let start: usize = self.sizes[..s].iter().sum();
        start..start + self.sizes[s]
    }
}

impl TryFrom<Vec<usize>> for SuperclassMap {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SuperclassMap> for Vec<usize> {
    fn from(m: SuperclassMap) -> Self {
        m.assignments
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorrelationCase {
    /// Only intra-class correlation `c`.
    CaseI,
    /// Class-dependent intra-class correlation `omega[k]`.
    CaseII,
    /// Intra-class `c`, every pair of distinct classes `d`.
    CaseIII,
    /// Intra-class `c`, intra-superclass `d`, zero across superclasses.
    CaseIV,
    /// Like `CaseIV` but with correlation `e` across superclasses.
    CaseV,
}

/// Parameters of a block-structured Gram matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GramModel {
    pub case: CorrelationCase,
    pub k: usize,
    pub n: usize,
    #[serde(default)]
    pub c: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub omega: Vec<f64>,
    #[serde(default)]
    pub d: f64,
    #[serde(default)]
    pub e: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub superclasses: Option<SuperclassMap>,
    #[serde(default)]
    pub perturbation_amplitude: f64,
    #[serde(default)]
    pub seed: u64,
}

impl GramModel {
    fn base(case: CorrelationCase, k: usize, n: usize) -> Self {
        Self {
            case,
            k,
            n,
            c: 0.0,
            omega: Vec::new(),
            d: 0.0,
            e: 0.0,
            superclasses: None,
            perturbation_amplitude: 0.0,
            seed: 0,
        }
    }

    pub fn case_i(k: usize, n: usize, c: f64) -> Self {
        Self { c, ..Self::base(CorrelationCase::CaseI, k, n) }
    }

    pub fn case_ii(k: usize, n: usize, omega: Vec<f64>) -> Self {
        Self { omega, ..Self::base(CorrelationCase::CaseII, k, n) }
    }

    pub fn case_iii(k: usize, n: usize, c: f64, d: f64) -> Self {
        Self { c, d, ..Self::base(CorrelationCase::CaseIII, k, n) }
    }

    pub fn case_iv(n: usize, c: f64, d: f64, map: SuperclassMap) -> Self {
        Self {
            c,
            d,
            superclasses: Some(map.clone()),
            ..Self::base(CorrelationCase::CaseIV, map.num_classes(), n)
        }
    }

    pub fn case_v(n: usize, c: f64, d: f64, e: f64, map: SuperclassMap) -> Self {
        Self {
            c,
            d,
            e,
            superclasses: Some(map.clone()),
            ..Self::base(CorrelationCase::CaseV, map.num_classes(), n)
        }
    }

    pub fn with_perturbation(mut self, amplitude: f64, seed: u64) -> Self {
        self.perturbation_amplitude = amplitude;
        self.seed = seed;
        self
    }

    pub fn dim(&self) -> usize {
        self.k * self.n
    }

    pub fn is_perturbed(&self) -> bool {
        self.perturbation_amplitude > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        self.check(true)
    }

    /// Validation that tolerates the degenerate `c = d` boundary, where the
    /// class and bulk levels of the theory coincide.
    pub(crate) fn validate_allowing_degenerate(&self) -> Result<()> {
        self.check(false)
    }

    fn check(&self, strict_cd: bool) -> Result<()> {
        use CorrelationCase::*;
        if self.k == 0 || self.n == 0 {
            return Err(Error::invalid("K and n must be positive"));
        }
        if !(self.perturbation_amplitude >= 0.0 && self.perturbation_amplitude.is_finite()) {
            return Err(Error::invalid("perturbation amplitude must be finite and >= 0"));
        }
        match self.case {
            CaseII => {
                if self.omega.len() != self.k {
                    return Err(Error::invalid(format!(
                        "CaseII needs one omega per class: got {} for K={}",
                        self.omega.len(),
                        self.k
                    )));
                }
                if let Some((k, w)) = self.omega.iter().enumerate().find(|(_, w)| !(**w > 0.0 && **w < 1.0)) {
                    return Err(Error::invalid(format!("omega[{k}] = {w} outside (0, 1)")));
                }
            }
            CaseI => {
                if !(self.c >= 0.0 && self.c < 1.0) {
                    return Err(Error::invalid(format!("need 0 <= c < 1, got c = {}", self.c)));
                }
            }
            CaseIII | CaseIV | CaseV => {
                let e = if self.case == CaseV { self.e } else { 0.0 };
                let cd_ok = if strict_cd { self.c > self.d } else { self.c >= self.d };
                if !(self.c < 1.0 && cd_ok && self.d >= e && e >= 0.0) {
                    return Err(Error::invalid(format!(
                        "need 1 > c > d >= e >= 0, got c = {}, d = {}, e = {}",
                        self.c, self.d, e
                    )));
                }
                if self.case == CaseIII && self.e != 0.0 {
                    return Err(Error::invalid("e is only meaningful for CaseV"));
                }
                if self.case == CaseIV && self.e != 0.0 {
                    return Err(Error::invalid("e is only meaningful for CaseV (use CaseV for e > 0)"));
                }
            }
        }
        if matches!(self.case, CaseIV | CaseV) {
            let map = self.superclasses.as_ref().ok_or_else(|| {
                Error::invalid(format!("{:?} requires a superclass map", self.case))
            })?;
            if map.num_classes() != self.k {
                return Err(Error::invalid(format!(
                    "superclass map covers {} classes but K = {}",
                    map.num_classes(),
                    self.k
                )));
            }
        }
        Ok(())
    }

    /// Superclass structure implied by the case: the explicit map for
    /// CaseIV/V, a single superclass otherwise.
    pub fn superclass_map(&self) -> SuperclassMap {
        match (&self.case, &self.superclasses) {
            (CorrelationCase::CaseIV | CorrelationCase::CaseV, Some(m)) => m.clone(),
            _ => SuperclassMap::single(self.k),
        }
    }

    /// Expected correlation between a sample of class `a` and a different
    /// sample of class `b`.
    pub fn class_correlation(&self, a: usize, b: usize) -> f64 {
        use CorrelationCase::*;
        match self.case {
            CaseI => if a == b { self.c } else { 0.0 },
            CaseII => if a == b { self.omega[a] } else { 0.0 },
            CaseIII => if a == b { self.c } else { self.d },
            CaseIV | CaseV => {
                let map = self.superclasses.as_ref().expect("validated model has a map");
                if a == b {
                    self.c
                } else if map.superclass_of(a) == map.superclass_of(b) {
                    self.d
                } else if self.case == CaseV {
                    self.e
                } else {
                    0.0
                }
            }
        }
    }

    /// Canonical true labels: `n` copies of each class in order.
    pub fn canonical_labels(&self) -> Vec<usize> {
        (0..self.k).flat_map(|k| std::iter::repeat_n(k, self.n)).collect()
    }

    /// An exact feature embedding whose Gram matrix is the unperturbed model.
    ///
    /// Each feature is a weighted sum of orthonormal directions shared at the
    /// global, superclass and class level plus a private direction per
    /// sample; the weights are the square roots of the correlation increments.
    pub fn embed_features(&self) -> Result<FeatureMatrix> {
        self.validate()?;
        if self.is_perturbed() {
            return Err(Error::invalid("a perturbed Gram matrix has no exact structured embedding"));
        }
        let map = self.superclass_map();
        let r = map.num_superclasses();
        let (k, n) = (self.k, self.n);
        let dim = 1 + r + k + k * n;
        let mut rows = DMatrix::zeros(k * n, dim);
        for class in 0..k {
            let s = map.superclass_of(class);
            let (global, sup, own, private) = match self.case {
                CorrelationCase::CaseI => (0.0, 0.0, self.c, 1.0 - self.c),
                CorrelationCase::CaseII => (0.0, 0.0, self.omega[class], 1.0 - self.omega[class]),
                CorrelationCase::CaseIII | CorrelationCase::CaseIV => {
                    (0.0, self.d, self.c - self.d, 1.0 - self.c)
                }
                CorrelationCase::CaseV => (self.e, self.d - self.e, self.c - self.d, 1.0 - self.c),
            };
            for j in 0..n {
                let i = class * n + j;
                rows[(i, 0)] = global.sqrt();
                rows[(i, 1 + s)] = sup.sqrt();
                rows[(i, 1 + r + class)] = own.sqrt();
                rows[(i, 1 + r + k + i)] = private.sqrt();
            }
        }
        FeatureMatrix::new(rows, self.canonical_labels(), Some(map))
    }
}

/// Realises the model's Gram matrix in canonical sample order.
pub fn build_gram(model: &GramModel) -> Result<DMatrix<f64>> {
    model.validate()?;
    let (k, n) = (model.k, model.n);
    let mut w = DMatrix::zeros(k, k);
    for a in 0..k {
        for b in 0..k {
            w[(a, b)] = model.class_correlation(a, b);
        }
    }
    let dim = k * n;
    let mut g = DMatrix::from_fn(dim, dim, |i, j| if i == j { 1.0 } else { w[(i / n, j / n)] });
    if model.is_perturbed() {
        let a = model.perturbation_amplitude;
        let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
        for i in 0..dim {
            for j in i + 1..dim {
                let u: f64 = rng.random_range(-a..=a);
                g[(i, j)] += u;
                g[(j, i)] = g[(i, j)];
            }
        }
    }
    Ok(g)
}

/// Like [`build_gram`], but checks that the supplied labels are the
/// canonical class-sorted layout the structured matrix assumes.
pub fn build_gram_for_labels(model: &GramModel, labels: &[usize]) -> Result<DMatrix<f64>> {
    model.validate()?;
    if labels.len() != model.dim() {
        return Err(Error::invalid(format!(
            "expected {} labels, got {}",
            model.dim(),
            labels.len()
        )));
    }
    if let Some(i) = (0..labels.len()).find(|&i| labels[i] != i / model.n) {
        return Err(Error::invalid(format!(
            "labels are not in canonical sorted order: sample {i} has label {} but the layout expects {}",
            labels[i],
            i / model.n
        )));
    }
    build_gram(model)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum EigenFamily {
    /// Spanned by superclass indicators (the top `R`).
    Superclass,
    /// Class-level contrasts (the next `K - R`, or all `K` when there is no
    /// superclass level).
    Class,
    /// Within-class contrasts (`Kn - K`).
    Bulk,
    /// From a dense solver; no analytic family.
    Numeric,
}

/// Eigenpairs sorted by descending eigenvalue; eigenvectors are columns.
#[derive(Clone, Debug)]
pub struct EigenSystem {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
    pub families: Vec<EigenFamily>,
}

impl EigenSystem {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Indices grouped by family in first-appearance order. Numeric systems
    /// are grouped by numerically equal eigenvalues instead.
    pub fn multiplicity_groups(&self) -> Vec<(EigenFamily, Vec<usize>)> {
        let mut groups: Vec<(EigenFamily, Vec<usize>)> = Vec::new();
        if self.families.iter().all(|f| *f == EigenFamily::Numeric) {
            let scale = self.eigenvalues.amax().max(1.0);
            for i in 0..self.dim() {
                match groups.last_mut() {
                    Some((_, idx))
                        if (self.eigenvalues[*idx.last().unwrap()] - self.eigenvalues[i]).abs()
                            <= 1e-8 * scale =>
                    {
                        idx.push(i)
                    }
                    _ => groups.push((EigenFamily::Numeric, vec![i])),
                }
            }
            return groups;
        }
        for (i, f) in self.families.iter().enumerate() {
            match groups.iter_mut().find(|(g, _)| g == f) {
                Some((_, idx)) => idx.push(i),
                None => groups.push((*f, vec![i])),
            }
        }
        groups
    }

    /// `Σ λ_i v_i v_iᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let scaled = DMatrix::from_fn(self.dim(), self.dim(), |i, j| {
            self.eigenvectors[(i, j)] * self.eigenvalues[j]
        });
        &scaled * self.eigenvectors.transpose()
    }

    /// Max-entry deviation of `VᵀV` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.eigenvectors.transpose() * &self.eigenvectors;
        (gram - DMatrix::identity(self.dim(), self.dim())).amax()
    }

    /// Largest `‖A v − λ v‖∞` over all pairs.
    pub fn max_residual(&self, a: &DMatrix<f64>) -> f64 {
        let av = a * &self.eigenvectors;
        (0..self.dim())
            .map(|j| (av.column(j) - self.eigenvectors.column(j) * self.eigenvalues[j]).amax())
            .fold(0.0, f64::max)
    }
}

/// Helmert contrasts of length `m`: `m − 1` orthonormal vectors orthogonal to
/// the all-ones vector. The `j`-th (1-based) has `j` entries `1/√(j(j+1))`
/// followed by `−j/√(j(j+1))`.
fn helmert(m: usize) -> Vec<Vec<f64>> {
    (1..m)
        .map(|j| {
            let norm = ((j * (j + 1)) as f64).sqrt();
            let mut v = vec![0.0; m];
            for x in v.iter_mut().take(j) {
                *x = 1.0 / norm;
            }
            v[j] = -(j as f64) / norm;
            v
        })
        .collect()
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

/// Flip `v` so that its first entry of non-negligible magnitude is positive.
fn canonical_sign(v: &mut [f64]) {
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if let Some(x) = v.iter().find(|x| x.abs() > 1e-12 * scale.max(1e-300)) {
        if *x < 0.0 {
            v.iter_mut().for_each(|y| *y = -*y);
        }
    }
}

fn assemble(mut pairs: Vec<(f64, Vec<f64>, EigenFamily)>) -> EigenSystem {
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    // Within runs of (numerically) equal eigenvalues, order eigenvectors
    // lexicographically so degenerate subspaces have a deterministic basis.
    let scale = pairs.iter().fold(1.0f64, |m, p| m.max(p.0.abs()));
    let mut start = 0;
    while start < pairs.len() {
        let mut end = start + 1;
        while end < pairs.len() && (pairs[end - 1].0 - pairs[end].0).abs() <= 1e-9 * scale {
            end += 1;
        }
        pairs[start..end].sort_by(|a, b| lexicographic(&a.1, &b.1));
        start = end;
    }
    let dim = pairs.len();
    let mut vectors = DMatrix::zeros(dim, dim);
    for (j, (_, v, _)) in pairs.iter().enumerate() {
        vectors.set_column(j, &DVector::from_column_slice(v));
    }
    EigenSystem {
        eigenvalues: DVector::from_iterator(dim, pairs.iter().map(|p| p.0)),
        eigenvectors: vectors,
        families: pairs.iter().map(|p| p.2).collect(),
    }
}

/// Lifts a class-space vector `u` to sample space: `Pᵀu / √n`.
fn lift(u: &[f64], n: usize) -> Vec<f64> {
    let scale = 1.0 / (n as f64).sqrt();
    u.iter().flat_map(|&x| std::iter::repeat_n(x * scale, n)).collect()
}

/// Exact eigensystem of an unperturbed structured Gram matrix.
///
/// Every case has the form `PᵀWP + diag(1 − W_kk)`: the sample space splits
/// into the span of class indicators, where the matrix acts as
/// `nW + diag(1 − W_kk)`, and within-class contrasts with eigenvalue
/// `1 − W_kk`. Class-space eigenvectors come from superclass indicators and
/// Helmert contrasts inside each superclass; CaseV's superclass block is an
/// `R × R` symmetric problem solved directly.
pub fn analytic_eigensystem(model: &GramModel) -> Result<EigenSystem> {
    model.validate()?;
    if model.is_perturbed() {
        return Err(Error::invalid(
            "analytic eigensystem requires an unperturbed model; use numeric_eigensystem",
        ));
    }
    let (k, n) = (model.k, model.n);
    let nf = n as f64;
    let mut pairs = Vec::with_capacity(k * n);

    // Within-class contrasts.
    let h = helmert(n);
    for class in 0..k {
        let bulk = 1.0 - model.class_correlation(class, class);
        for contrast in &h {
            let mut v = vec![0.0; k * n];
            v[class * n..(class + 1) * n].copy_from_slice(contrast);
            pairs.push((bulk, v, EigenFamily::Bulk));
        }
    }

    match model.case {
        CorrelationCase::CaseI | CorrelationCase::CaseII => {
            for class in 0..k {
                let w = model.class_correlation(class, class);
                let mut u = vec![0.0; k];
                u[class] = 1.0;
                pairs.push((nf * w + 1.0 - w, lift(&u, n), EigenFamily::Class));
            }
        }
        CorrelationCase::CaseIII | CorrelationCase::CaseIV | CorrelationCase::CaseV => {
            let (c, d) = (model.c, model.d);
            let e = if model.case == CorrelationCase::CaseV { model.e } else { 0.0 };
            let map = model.superclass_map();
            let class_level = nf * (c - d) + 1.0 - c;
            for s in 0..map.num_superclasses() {
                let classes = map.classes_in(s);
                for contrast in helmert(classes.len()) {
                    let mut u = vec![0.0; k];
                    u[classes.clone()].copy_from_slice(&contrast);
                    pairs.push((class_level, lift(&u, n), EigenFamily::Class));
                }
            }
            // Superclass block in the orthonormal basis indicator_s / √K_s.
            let r = map.num_superclasses();
            let sizes: Vec<f64> = map.sizes().iter().map(|&x| x as f64).collect();
            let block = DMatrix::from_fn(r, r, |a, b| {
                let mut v = nf * e * (sizes[a] * sizes[b]).sqrt();
                if a == b {
                    v += nf * (d - e) * sizes[a] + class_level;
                }
                v
            });
            let eig = if e == 0.0 {
                // Diagonal: keep the textbook indicator eigenvectors exactly.
                SymmetricEigen {
                    eigenvalues: block.diagonal(),
                    eigenvectors: DMatrix::identity(r, r),
                }
            } else {
                SymmetricEigen::new(block)
            };
            for j in 0..r {
                let mut u = vec![0.0; k];
                for s in 0..r {
                    let coef = eig.eigenvectors[(s, j)] / sizes[s].sqrt();
                    for class in map.classes_in(s) {
                        u[class] = coef;
                    }
                }
                let mut v = lift(&u, n);
                canonical_sign(&mut v);
                pairs.push((eig.eigenvalues[j], v, EigenFamily::Superclass));
            }
        }
    }
    Ok(assemble(pairs))
}

/// Dense symmetric eigendecomposition for perturbed or empirical matrices.
pub fn numeric_eigensystem(matrix: &DMatrix<f64>) -> Result<EigenSystem> {
    if !matrix.is_square() {
        return Err(Error::invalid(format!(
            "matrix must be square, got {}x{}",
            matrix.nrows(),
            matrix.ncols()
        )));
    }
    if matrix.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("matrix has non-finite entries"));
    }
    let asym = (matrix - matrix.transpose()).amax();
    if asym > 1e-10 {
        return Err(Error::invalid(format!(
            "matrix is not symmetric (max |A - Aᵀ| = {asym:.3e})"
        )));
    }
    let eig = SymmetricEigen::new(matrix.clone());
    let pairs = (0..matrix.nrows())
        .map(|j| {
            let mut v: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
            canonical_sign(&mut v);
            (eig.eigenvalues[j], v, EigenFamily::Numeric)
        })
        .collect();
    Ok(assemble(pairs))
}

/// Unit-norm feature vectors (rows) with their true labels.
#[derive(Clone, Debug)]
pub struct FeatureMatrix {
    rows: DMatrix<f64>,
    labels: Vec<usize>,
    superclasses: Option<SuperclassMap>,
}

impl FeatureMatrix {
    pub fn new(rows: DMatrix<f64>, labels: Vec<usize>, superclasses: Option<SuperclassMap>) -> Result<Self> {
        if labels.len() != rows.nrows() {
            return Err(Error::invalid(format!(
                "{} labels for {} feature rows",
                labels.len(),
                rows.nrows()
            )));
        }
        for i in 0..rows.nrows() {
            let norm = rows.row(i).norm();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("row {i} has norm {norm}, expected 1")));
            }
        }
        if let Some(map) = &superclasses {
            if let Some(&y) = labels.iter().find(|&&y| y >= map.num_classes()) {
                return Err(Error::invalid(format!(
                    "label {y} not covered by the superclass map ({} classes)",
                    map.num_classes()
                )));
            }
        }
        Ok(Self { rows, labels, superclasses })
    }

    pub fn rows(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn superclasses(&self) -> Option<&SuperclassMap> {
        self.superclasses.as_ref()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn gram(&self) -> DMatrix<f64> {
        &self.rows * self.rows.transpose()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RelationStats {
    pub mean: f64,
    /// Population standard deviation (divides by the pair count).
    pub std: f64,
    pub pairs: u64,
}

/// Inner-product statistics over unordered pairs of distinct samples.
/// `None` marks a relation with no pairs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GramStatistics {
    pub same_class: Option<RelationStats>,
    pub same_superclass: Option<RelationStats>,
    pub cross_superclass: Option<RelationStats>,
}

/// Statistics of the feature correlations. Without a superclass map all
/// classes are treated as one superclass, so cross-class pairs land in
/// `same_superclass`.
pub fn gram_statistics(features: &FeatureMatrix) -> Result<GramStatistics> {
    gram_statistics_from_matrix(&features.gram(), features.labels(), features.superclasses())
}

/// [`gram_statistics`] for an already-formed Gram matrix.
pub fn gram_statistics_from_matrix(
    gram: &DMatrix<f64>,
    labels: &[usize],
    map: Option<&SuperclassMap>,
) -> Result<GramStatistics> {
    if !gram.is_square() || gram.nrows() != labels.len() {
        return Err(Error::invalid("Gram matrix and labels disagree in size"));
    }
    let sup = |y: usize| map.map_or(0, |m| m.superclass_of(y));
    let relation = |i: usize, j: usize| {
        if labels[i] == labels[j] {
            0
        } else if sup(labels[i]) == sup(labels[j]) {
            1
        } else {
            2
        }
    };
    let m = labels.len();
    let mut sum = [0.0f64; 3];
    let mut count = [0u64; 3];
    for i in 0..m {
        for j in i + 1..m {
            let r = relation(i, j);
            sum[r] += gram[(i, j)];
            count[r] += 1;
        }
    }
    let mean: Vec<f64> = (0..3).map(|r| sum[r] / count[r].max(1) as f64).collect();
    let mut sq = [0.0f64; 3];
    for i in 0..m {
        for j in i + 1..m {
            let r = relation(i, j);
            sq[r] += (gram[(i, j)] - mean[r]).powi(2);
        }
    }
    let stat = |r: usize| {
        (count[r] > 0).then(|| RelationStats {
            mean: mean[r],
            std: (sq[r] / count[r] as f64).sqrt(),
            pairs: count[r],
        })
    };
    Ok(GramStatistics {
        same_class: stat(0),
        same_superclass: stat(1),
        cross_superclass: stat(2),
    })
}

/// Parsed feature CSV: raw rows plus the integer labels from the last column.
#[derive(Clone, Debug)]
pub struct RawFeatures {
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<i64>,
}

/// Reads `f_1, …, f_d, label` rows. A first line that does not parse as
/// numbers is treated as a header. Errors carry the 1-based line number.
pub fn read_features_csv(path: &Path) -> Result<RawFeatures> {
    let name = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Parse { path: name.clone(), line: 0, msg: e.to_string() })?;
    let mut out = RawFeatures { rows: Vec::new(), labels: Vec::new() };
    let mut width = None;
    for (idx, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            path: name.clone(),
            line: e.position().map_or(idx as u64 + 1, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(idx as u64 + 1, |p| p.line());
        let err = |msg: String| Error::Parse { path: name.clone(), line, msg };
        if rec.len() < 2 {
            return Err(err("need at least one feature column and a label column".into()));
        }
        let label_field = &rec[rec.len() - 1];
        let parsed: std::result::Result<Vec<f64>, _> =
            rec.iter().take(rec.len() - 1).map(|f| f.parse::<f64>()).collect();
        let (features, label) = match (parsed, label_field.parse::<i64>()) {
            (Ok(f), Ok(l)) => (f, l),
            _ if idx == 0 => continue, // header
            (Err(e), _) => return Err(err(format!("bad feature value: {e}"))),
            (_, Err(_)) => return Err(err(format!("label {label_field:?} is not an integer"))),
        };
        if let Some(w) = width {
            if w != features.len() {
                return Err(err(format!("expected {w} feature columns, found {}", features.len())));
            }
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(err("non-finite feature value".into()));
        }
        width = Some(features.len());
        out.rows.push(features);
        out.labels.push(label);
    }
    if out.rows.is_empty() {
        return Err(Error::Parse { path: name, line: 0, msg: "no data rows".into() });
    }
    Ok(out)
}

/// Reads `class_index,superclass_index` lines (header optional).
pub fn read_superclass_csv(path: &Path) -> Result<Vec<(i64, i64)>> {
    let name = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Parse { path: name.clone(), line: 0, msg: e.to_string() })?;
    let mut out = Vec::new();
    for (idx, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            path: name.clone(),
            line: idx as u64 + 1,
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(idx as u64 + 1, |p| p.line());
        if rec.len() != 2 {
            return Err(Error::Parse { path: name, line, msg: "expected class_index,superclass_index".into() });
        }
        match (rec[0].parse::<i64>(), rec[1].parse::<i64>()) {
            (Ok(a), Ok(b)) => out.push((a, b)),
            _ if idx == 0 => continue,
            _ => {
                return Err(Error::Parse { path: name, line, msg: "indices must be integers".into() });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn superclass_map_validation() {
        assert!(SuperclassMap::new(vec![0, 0, 1, 1]).is_ok());
        assert!(SuperclassMap::new(vec![0, 1, 0, 1]).is_err());
        assert!(SuperclassMap::new(vec![0, 0, 2, 2]).is_err());
        let m = SuperclassMap::from_sizes(&[2, 3]).unwrap();
        assert_eq!(m.assignments(), &[0, 0, 1, 1, 1]);
        assert_eq!(m.classes_in(1), 2..5);
        assert_eq!(m.sizes().iter().sum::<usize>(), 5);
    }

    #[test]
    fn case_iii_small_matrix() {
        let g = build_gram(&GramModel::case_iii(2, 2, 0.4, 0.1)).unwrap();
        let expect = DMatrix::from_row_slice(
            4,
            4,
            &[1.0, 0.4, 0.1, 0.1, 0.4, 1.0, 0.1, 0.1, 0.1, 0.1, 1.0, 0.4, 0.1, 0.1, 0.4, 1.0],
        );
        assert_eq!(g, expect);
    }

    #[test]
    fn zero_correlation_is_identity() {
        let g = build_gram(&GramModel::case_i(3, 4, 0.0)).unwrap();
        assert_eq!(g, DMatrix::identity(12, 12));
        let eig = analytic_eigensystem(&GramModel::case_i(3, 4, 0.0)).unwrap();
        assert!(eig.eigenvalues.iter().all(|&l| l == 1.0));
    }

    #[test]
    fn case_iv_eigenvalues() {
        let map = SuperclassMap::from_sizes(&[2, 2]).unwrap();
        let eig = analytic_eigensystem(&GramModel::case_iv(100, 0.4, 0.1, map)).unwrap();
        let ev = &eig.eigenvalues;
        assert_eq!(ev.len(), 400);
        for i in 0..2 {
            assert_abs_diff_eq!(ev[i], 50.6, epsilon = 1e-12);
        }
        for i in 2..4 {
            assert_abs_diff_eq!(ev[i], 30.6, epsilon = 1e-12);
        }
        for i in 4..400 {
            assert_abs_diff_eq!(ev[i], 0.6, epsilon = 1e-12);
        }
        let groups = eig.multiplicity_groups();
        let sizes: Vec<_> = groups.iter().map(|(f, g)| (*f, g.len())).collect();
        assert_eq!(
            sizes,
            vec![(EigenFamily::Superclass, 2), (EigenFamily::Class, 2), (EigenFamily::Bulk, 396)]
        );
        // Eigen-gap between the K-th and (K+1)-th eigenvalue is n(c − d).
        assert_abs_diff_eq!(ev[3] - ev[4], 100.0 * 0.3, epsilon = 1e-10);
    }

    #[test]
    fn case_iii_eigenvalues() {
        let eig = analytic_eigensystem(&GramModel::case_iii(4, 100, 0.4, 0.1)).unwrap();
        assert_abs_diff_eq!(eig.eigenvalues[0], 70.6, epsilon = 1e-12);
        for i in 1..4 {
            assert_abs_diff_eq!(eig.eigenvalues[i], 30.6, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(eig.eigenvalues[4], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(eig.eigenvalues[399], 0.6, epsilon = 1e-12);
    }

    #[test]
    fn case_v_with_zero_e_matches_case_iv() {
        let map = SuperclassMap::from_sizes(&[2, 2]).unwrap();
        let iv = analytic_eigensystem(&GramModel::case_iv(7, 0.4, 0.1, map.clone())).unwrap();
        let v = analytic_eigensystem(&GramModel::case_v(7, 0.4, 0.1, 0.0, map)).unwrap();
        assert_eq!(iv.eigenvalues, v.eigenvalues);
        assert_eq!(iv.eigenvectors, v.eigenvectors);
    }

    #[test]
    fn analytic_systems_are_exact_decompositions() {
        let map = SuperclassMap::from_sizes(&[1, 3, 2]).unwrap();
        let models = [
            GramModel::case_i(3, 4, 0.3),
            GramModel::case_ii(3, 4, vec![0.2, 0.5, 0.7]),
            GramModel::case_iii(3, 4, 0.5, 0.2),
            GramModel::case_iv(3, 0.5, 0.2, map.clone()),
            GramModel::case_v(3, 0.5, 0.2, 0.05, map),
        ];
        for m in &models {
            let g = build_gram(m).unwrap();
            let eig = analytic_eigensystem(m).unwrap();
            assert!(eig.orthonormality_error() < 1e-12, "{:?}", m.case);
            assert!((eig.reconstruct() - &g).amax() < 1e-12, "{:?}", m.case);
            assert!(eig.max_residual(&g) < 1e-12, "{:?}", m.case);
            let num = numeric_eigensystem(&g).unwrap();
            for (a, b) in eig.eigenvalues.iter().zip(num.eigenvalues.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn numeric_small_cases() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 1.0]);
        let eig = numeric_eigensystem(&a).unwrap();
        assert_abs_diff_eq!(eig.eigenvalues[0], 1.4, epsilon = 1e-14);
        assert_abs_diff_eq!(eig.eigenvalues[1], 0.6, epsilon = 1e-14);

        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0, 2.0]));
        let eig = numeric_eigensystem(&d).unwrap();
        assert_eq!(eig.eigenvalues.as_slice(), &[3.0, 2.0, 1.0]);
        assert_eq!(eig.eigenvectors.column(0).as_slice(), &[0.0, 1.0, 0.0]);
        assert_eq!(eig.eigenvectors.column(1).as_slice(), &[0.0, 0.0, 1.0]);
        assert_eq!(eig.eigenvectors.column(2).as_slice(), &[1.0, 0.0, 0.0]);

        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.3, 1.0]);
        assert!(numeric_eigensystem(&asym).is_err());
    }

    #[test]
    fn numeric_matches_analytic_case_iv() {
        let map = SuperclassMap::from_sizes(&[2, 2]).unwrap();
        let model = GramModel::case_iv(5, 0.4, 0.1, map);
        let a = analytic_eigensystem(&model).unwrap();
        let b = numeric_eigensystem(&build_gram(&model).unwrap()).unwrap();
        assert!((a.eigenvalues - b.eigenvalues).amax() < 1e-8);
    }

    #[test]
    fn perturbation_is_bounded_symmetric_and_reproducible() {
        let base = GramModel::case_iii(3, 5, 0.4, 0.1);
        let clean = build_gram(&base).unwrap();
        let noisy = build_gram(&base.clone().with_perturbation(0.05, 9)).unwrap();
        let again = build_gram(&base.clone().with_perturbation(0.05, 9)).unwrap();
        assert_eq!(noisy, again);
        assert_eq!(noisy, noisy.transpose());
        assert!((&noisy - &clean).amax() <= 0.05);
        assert!(noisy.diagonal().iter().all(|&x| x == 1.0));
        assert!(analytic_eigensystem(&base.with_perturbation(0.05, 9)).is_err());
    }

    #[test]
    fn non_canonical_labels_rejected() {
        let m = GramModel::case_iii(2, 2, 0.4, 0.1);
        assert!(build_gram_for_labels(&m, &[0, 0, 1, 1]).is_ok());
        assert!(build_gram_for_labels(&m, &[0, 1, 0, 1]).is_err());
    }

    #[test]
    fn case_iv_without_map_rejected() {
        let mut m = GramModel::case_iii(4, 3, 0.4, 0.1);
        m.case = CorrelationCase::CaseIV;
        assert!(build_gram(&m).is_err());
    }

    #[test]
    fn statistics_identical_and_orthogonal() {
        let rows = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        let f = FeatureMatrix::new(rows, vec![0, 0, 1, 1], None).unwrap();
        let s = gram_statistics(&f).unwrap();
        let same = s.same_class.unwrap();
        assert_eq!((same.mean, same.std), (1.0, 0.0));
        let cross = s.same_superclass.unwrap();
        assert_eq!((cross.mean, cross.std), (0.0, 0.0));
        assert!(s.cross_superclass.is_none());
    }

    #[test]
    fn statistics_single_sample_per_class() {
        let rows = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let f = FeatureMatrix::new(rows, vec![0, 1], None).unwrap();
        let s = gram_statistics(&f).unwrap();
        assert!(s.same_class.is_none());
        assert_eq!(s.same_superclass.unwrap().mean, 0.0);
    }

    #[test]
    fn statistics_angles() {
        let deg = [0.0f64, 10.0, 90.0, 100.0];
        let rows = DMatrix::from_fn(4, 2, |i, j| {
            let a = deg[i].to_radians();
            if j == 0 { a.cos() } else { a.sin() }
        });
        let f = FeatureMatrix::new(rows, vec![0, 0, 1, 1], None).unwrap();
        let s = gram_statistics(&f).unwrap();
        assert_abs_diff_eq!(s.same_class.unwrap().mean, 10f64.to_radians().cos(), epsilon = 1e-12);
        assert_abs_diff_eq!(s.same_superclass.unwrap().mean, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn model_is_its_own_statistic() {
        let map = SuperclassMap::from_sizes(&[2, 2]).unwrap();
        let m = GramModel::case_v(4, 0.4, 0.1, 0.05, map.clone());
        let g = build_gram(&m).unwrap();
        let s = gram_statistics_from_matrix(&g, &m.canonical_labels(), Some(&map)).unwrap();
        for (stat, want) in [(s.same_class, 0.4), (s.same_superclass, 0.1), (s.cross_superclass, 0.05)] {
            let stat = stat.unwrap();
            assert_abs_diff_eq!(stat.mean, want, epsilon = 1e-14);
            assert!(stat.std < 1e-14);
        }
    }

    #[test]
    fn embedding_reproduces_gram() {
        let map = SuperclassMap::from_sizes(&[2, 1]).unwrap();
        for m in [
            GramModel::case_ii(3, 3, vec![0.1, 0.6, 0.3]),
            GramModel::case_v(3, 0.6, 0.3, 0.1, map),
        ] {
            let f = m.embed_features().unwrap();
            assert!((f.gram() - build_gram(&m).unwrap()).amax() < 1e-14);
        }
    }

    #[test]
    fn helmert_is_orthonormal_contrast() {
        let h = helmert(5);
        for (a, u) in h.iter().enumerate() {
            assert_abs_diff_eq!(u.iter().sum::<f64>(), 0.0, epsilon = 1e-15);
            for (b, v) in h.iter().enumerate() {
                let dot: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
                assert_abs_diff_eq!(dot, if a == b { 1.0 } else { 0.0 }, epsilon = 1e-15);
            }
        }
    }
}
