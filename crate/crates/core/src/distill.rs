//! Label averaging: the operator `Φ^(t)`, output trajectories, per-sample
//! closed forms and the top-2 partial-label student.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::format::num;
use crate::gram::{CorrelationCase, EigenSystem};
use crate::noise::{pll_accuracy_condition, CorruptionMatrix, TheoryConstants, STRICT_MARGIN};

/// Softmax outputs of one round: column `i` is sample `i`'s K-vector.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputMatrix {
    pub values: DMatrix<f64>,
    pub round: u32,
}

impl OutputMatrix {
    pub fn new(values: DMatrix<f64>, round: u32) -> Self {
        Self { values, round }
    }

    /// Round-0 targets `e(ŷ_i)`.
    pub fn one_hot(labels: &[usize], k: usize) -> Result<Self> {
        if let Some(&y) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::invalid(format!("label {y} out of range for K = {k}")));
        }
        let values = DMatrix::from_fn(k, labels.len(), |c, i| if labels[i] == c { 1.0 } else { 0.0 });
        Ok(Self { values, round: 0 })
    }

    pub fn k(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        self.values.column(i).iter().copied().collect()
    }

    /// Largest `|Σ_k y_ik − 1|` over samples.
    pub fn max_column_sum_error(&self) -> f64 {
        self.values
            .column_iter()
            .map(|c| (c.sum() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Smallest entry; negative values can appear under an indefinite Gram
    /// matrix and are reported rather than clamped.
    pub fn min_entry(&self) -> f64 {
        self.values.min()
    }

    /// Largest pairwise ℓ∞ distance between outputs of samples sharing a
    /// true label.
    pub fn within_class_dispersion(&self, true_labels: &[usize], class: usize) -> f64 {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| true_labels[i] == class).collect();
        let mut worst = 0.0f64;
        for (a, &i) in idx.iter().enumerate() {
            for &j in &idx[a + 1..] {
                let d = (self.values.column(i) - self.values.column(j)).amax();
                worst = worst.max(d);
            }
        }
        worst
    }
}

/// `Φ^(t) = Σ_i μ_i^t v_i v_iᵀ` with `μ_i = λ_i/(K²nλ + λ_i)`.
#[derive(Clone, Debug)]
pub struct AveragingOperator {
    pub matrix: DMatrix<f64>,
    pub t: u32,
    pub lambda: f64,
    /// `μ_i^t`, in the order of the source eigensystem.
    pub eigenvalues: DVector<f64>,
}

fn kappa(lambda: f64, k: usize, n: usize) -> f64 {
    (k * k * n) as f64 * lambda
}

/// One-round operator eigenvalues `λ_i/(K²nλ + λ_i)`.
pub fn operator_ratios(eig: &EigenSystem, lambda: f64, k: usize, n: usize) -> Result<DVector<f64>> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("λ must be positive and finite, got {lambda}")));
    }
    if eig.dim() != k * n {
        return Err(Error::invalid(format!(
            "eigensystem has dimension {} but K·n = {}",
            eig.dim(),
            k * n
        )));
    }
    if let Some(min) = eig.eigenvalues.iter().copied().reduce(f64::min) {
        if min < -1e-8 {
            return Err(Error::invalid(format!(
                "Gram eigenvalue {min:.3e} is negative; the averaging operator would leave [0, 1)"
            )));
        }
    }
    let kap = kappa(lambda, k, n);
    Ok(eig.eigenvalues.map(|l| l / (kap + l)))
}

pub fn averaging_operator(eig: &EigenSystem, lambda: f64, k: usize, n: usize, t: u32) -> Result<AveragingOperator> {
    let ratios = operator_ratios(eig, lambda, k, n)?;
    let powered = ratios.map(|m| m.powi(t as i32));
    let matrix = if t == 0 {
        DMatrix::identity(eig.dim(), eig.dim())
    } else {
        let v = &eig.eigenvectors;
        let scaled = DMatrix::from_fn(v.nrows(), v.ncols(), |i, j| v[(i, j)] * powered[j]);
        let mut m = &scaled * v.transpose();
        // Symmetrise away rounding so the operator is exactly symmetric.
        let mt = m.transpose();
        m += mt;
        m *= 0.5;
        m
    };
    Ok(AveragingOperator { matrix, t, lambda, eigenvalues: powered })
}

fn check_start(y0: &OutputMatrix, eig: &EigenSystem) -> Result<()> {
    if y0.len() != eig.dim() {
        return Err(Error::invalid(format!(
            "output matrix has {} samples but the eigensystem has dimension {}",
            y0.len(),
            eig.dim()
        )));
    }
    let err = y0.max_column_sum_error();
    if err > 1e-9 {
        return Err(Error::invalid(format!("initial outputs are not distributions (column sum error {err:.3e})")));
    }
    Ok(())
}

/// `Y = 1/K + (Y0 − 1/K)Φ^(t)` evaluated in the eigenbasis.
pub fn propagate(y0: &OutputMatrix, eig: &EigenSystem, lambda: f64, n: usize, t: u32) -> Result<OutputMatrix> {
    let k = y0.k();
    check_start(y0, eig)?;
    let ratios = operator_ratios(eig, lambda, k, n)?;
    if t == 0 {
        return Ok(y0.clone());
    }
    let u = 1.0 / k as f64;
    let z = y0.values.map(|x| x - u) * &eig.eigenvectors;
    Ok(apply_powers(&z, &ratios, eig, u, y0.round + t, t))
}

fn apply_powers(z: &DMatrix<f64>, ratios: &DVector<f64>, eig: &EigenSystem, u: f64, round: u32, t: u32) -> OutputMatrix {
    let powered = ratios.map(|m| m.powi(t as i32));
    let scaled = DMatrix::from_fn(z.nrows(), z.ncols(), |r, j| z[(r, j)] * powered[j]);
    OutputMatrix::new((scaled * eig.eigenvectors.transpose()).map(|x| x + u), round)
}

/// Outputs for rounds `0..=t_max` from the eigen form of the label-averaging
/// dynamics. Round 0 is returned unchanged.
pub fn trajectory(y0: &OutputMatrix, eig: &EigenSystem, lambda: f64, n: usize, t_max: u32) -> Result<Vec<OutputMatrix>> {
    check_start(y0, eig)?;
    if y0.round != 0 {
        return Err(Error::invalid("trajectory starts from round-0 targets"));
    }
    let k = y0.k();
    let ratios = operator_ratios(eig, lambda, k, n)?;
    let u = 1.0 / k as f64;
    let z = y0.values.map(|x| x - u) * &eig.eigenvectors;
    let mut rounds: Vec<OutputMatrix> = (1..=t_max)
        .into_par_iter()
        .map(|t| apply_powers(&z, &ratios, eig, u, t, t))
        .collect();
    rounds.insert(0, y0.clone());
    Ok(rounds)
}

/// A training sample type: its true label and the label it was given.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sample {
    pub true_label: usize,
    pub given_label: usize,
}

/// Class-level closed form shared by every case:
///
/// `y = 1/K + p^t(target − 1/K) + (q^t − p^t)(A_y − 1/K) + superclass term`
///
/// where `A_k` is the average target of class `k`. The superclass term is
/// `(r_s^t − q^t)(Ā_s − 1/K)` with `Ā_s` the mean of `A_k` over the
/// superclass, or for CaseV `Σ_r K_r Ω_rs(t)(Ā_r − 1/K)`.
pub fn class_level_output(target: &[f64], class_avgs: &[Vec<f64>], y: usize, tc: &TheoryConstants, t: u32) -> Vec<f64> {
    let k = tc.k;
    let u = 1.0 / k as f64;
    let ti = t as i32;
    let (pt, qt) = (tc.p_class[y].powi(ti), tc.q_class[y].powi(ti));
    let map = &tc.superclasses;
    let superclass_avg = |s: usize| -> Vec<f64> {
        let classes = map.classes_in(s);
        let size = classes.len() as f64;
        (0..k).map(|j| classes.clone().map(|c| class_avgs[c][j]).sum::<f64>() / size).collect()
    };
    let mut out: Vec<f64> = (0..k)
        .map(|j| u + pt * (target[j] - u) + (qt - pt) * (class_avgs[y][j] - u))
        .collect();
    let s = map.superclass_of(y);
    match (&tc.extended, tc.case) {
        (_, CorrelationCase::CaseII) => {}
        (Some(ext), _) if ext.e > 0.0 => {
            let omega = ext.omega(t);
            for r in 0..map.num_superclasses() {
                let coef = map.size(r) as f64 * omega[(r, s)];
                let avg = superclass_avg(r);
                for j in 0..k {
                    out[j] += coef * (avg[j] - u);
                }
            }
        }
        _ => {
            let coef = tc.r[s].powi(ti) - qt;
            let avg = superclass_avg(s);
            for j in 0..k {
                out[j] += coef * (avg[j] - u);
            }
        }
    }
    out
}

fn check_sample(sample: Sample, c: &CorruptionMatrix, tc: &TheoryConstants) -> Result<()> {
    if c.k() != tc.k {
        return Err(Error::invalid(format!("corruption matrix has K = {} but constants K = {}", c.k(), tc.k)));
    }
    if sample.true_label >= tc.k || sample.given_label >= tc.k {
        return Err(Error::invalid("sample label out of range"));
    }
    c.check_within_superclasses(&tc.superclasses)
}

fn corruption_rows(c: &CorruptionMatrix) -> Vec<Vec<f64>> {
    (0..c.k()).map(|k| c.row(k)).collect()
}

fn one_hot(k: usize, at: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[at] = 1.0;
    v
}

/// Round-`t` output for a sample with true label `y` and given label `ŷ`:
/// `p^t e(ŷ) + (q^t − p^t) C[y,:] + (r_s^t − q^t) ē_s + (1 − r_s^t)/K`.
pub fn closed_form_output(sample: Sample, c: &CorruptionMatrix, tc: &TheoryConstants, t: u32) -> Result<Vec<f64>> {
    check_sample(sample, c, tc)?;
    if tc.extended.as_ref().is_some_and(|e| e.e > 0.0) {
        return Err(Error::invalid("CaseV with e > 0 needs extended_output"));
    }
    let target = one_hot(tc.k, sample.given_label);
    Ok(class_level_output(&target, &corruption_rows(c), sample.true_label, tc, t))
}

/// Round-`t` output under the extended (CaseV) correlation model.
pub fn extended_output(sample: Sample, c: &CorruptionMatrix, tc: &TheoryConstants, t: u32) -> Result<Vec<f64>> {
    check_sample(sample, c, tc)?;
    if tc.extended.is_none() {
        return Err(Error::invalid("extended_output needs CaseV constants"));
    }
    let target = one_hot(tc.k, sample.given_label);
    Ok(class_level_output(&target, &corruption_rows(c), sample.true_label, tc, t))
}

/// Closed-form output for any case, dispatching to the extended form when
/// needed.
pub fn sample_output(sample: Sample, c: &CorruptionMatrix, tc: &TheoryConstants, t: u32) -> Result<Vec<f64>> {
    if tc.extended.is_some() {
        extended_output(sample, c, tc, t)
    } else {
        closed_form_output(sample, c, tc, t)
    }
}

/// Closed-form outputs for every sample of a label assignment.
pub fn closed_form_matrix(
    true_labels: &[usize],
    given_labels: &[usize],
    c: &CorruptionMatrix,
    tc: &TheoryConstants,
    t: u32,
) -> Result<OutputMatrix> {
    let k = tc.k;
    let mut cache: Vec<Option<Vec<f64>>> = vec![None; k * k];
    let mut values = DMatrix::zeros(k, true_labels.len());
    for (i, (&y, &g)) in true_labels.iter().zip(given_labels).enumerate() {
        if cache[y * k + g].is_none() {
            cache[y * k + g] = Some(sample_output(Sample { true_label: y, given_label: g }, c, tc, t)?);
        }
        values.set_column(i, &DVector::from_column_slice(cache[y * k + g].as_ref().unwrap()));
    }
    Ok(OutputMatrix::new(values, t))
}

/// Two-hot targets with weight 1/2 on each of two classes per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialLabelMatrix {
    pub values: DMatrix<f64>,
}

impl PartialLabelMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        for (i, col) in values.column_iter().enumerate() {
            let halves = col.iter().filter(|&&x| x == 0.5).count();
            let zeros = col.iter().filter(|&&x| x == 0.0).count();
            if halves != 2 || zeros != col.len() - 2 {
                return Err(Error::invalid(format!("column {i} is not two-hot")));
            }
        }
        Ok(Self { values })
    }

    pub fn as_outputs(&self) -> OutputMatrix {
        OutputMatrix::new(self.values.clone(), 0)
    }
}

/// Indices of the two largest entries. Values within [`STRICT_MARGIN`] of
/// each other count as tied, and ties go to the lower index.
pub fn top_two(v: &[f64]) -> (usize, usize) {
    let pick = |skip: Option<usize>| {
        let mut best: Option<usize> = None;
        for (i, &x) in v.iter().enumerate() {
            if Some(i) == skip {
                continue;
            }
            match best {
                Some(b) if x <= v[b] + STRICT_MARGIN => {}
                _ => best = Some(i),
            }
        }
        best.expect("at least two entries")
    };
    let first = pick(None);
    (first, pick(Some(first)))
}

pub fn pll_refine(teacher: &OutputMatrix) -> Result<PartialLabelMatrix> {
    let k = teacher.k();
    if k < 2 {
        return Err(Error::invalid("top-2 refinement needs K >= 2"));
    }
    let mut values = DMatrix::zeros(k, teacher.len());
    for (i, col) in teacher.values.column_iter().enumerate() {
        let v: Vec<f64> = col.iter().copied().collect();
        let (a, b) = top_two(&v);
        values[(a, i)] = 0.5;
        values[(b, i)] = 0.5;
    }
    Ok(PartialLabelMatrix { values })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PllOutput {
    pub output: Vec<f64>,
    /// Whether `C_kk > C_kk'` holds for every pair; when it does not, the
    /// top-2 set may exclude the true label and no guarantee applies.
    pub condition_holds: bool,
}

/// One-round student trained on top-2 targets of the round-1 teacher.
///
/// Each pair type's two-hot target comes from the teacher's closed-form
/// output, and the class and superclass averages are the exact averages of
/// those targets under `C`.
pub fn pll_output(sample: Sample, c: &CorruptionMatrix, tc: &TheoryConstants) -> Result<PllOutput> {
    check_sample(sample, c, tc)?;
    let k = tc.k;
    if k < 2 {
        return Err(Error::invalid("the top-2 student needs K >= 2"));
    }
    let rows = corruption_rows(c);
    let two_hot = |y: usize, g: usize| -> Vec<f64> {
        let teacher = class_level_output(&one_hot(k, g), &rows, y, tc, 1);
        let (a, b) = top_two(&teacher);
        let mut v = vec![0.0; k];
        v[a] = 0.5;
        v[b] = 0.5;
        v
    };
    let class_avgs: Vec<Vec<f64>> = (0..k)
        .map(|y| {
            let mut avg = vec![0.0; k];
            for g in (0..k).filter(|&g| c.get(y, g) > 0.0) {
                let w = c.get(y, g);
                for (a, x) in avg.iter_mut().zip(two_hot(y, g)) {
                    *a += w * x;
                }
            }
            avg
        })
        .collect();
    let target = two_hot(sample.true_label, sample.given_label);
    Ok(PllOutput {
        output: class_level_output(&target, &class_avgs, sample.true_label, tc, 1),
        condition_holds: pll_accuracy_condition(c).achieves_100,
    })
}

/// Index of the unique largest entry, or `None` when the top is tied within
/// [`STRICT_MARGIN`].
pub fn strict_argmax(v: &[f64]) -> Option<usize> {
    let (a, b) = if v.len() >= 2 { top_two(v) } else { return (!v.is_empty()).then_some(0) };
    (v[a] - v[b] > STRICT_MARGIN).then_some(a)
}

/// Fraction of samples whose strict argmax is the true label.
pub fn argmax_accuracy(outputs: &OutputMatrix, true_labels: &[usize]) -> Result<f64> {
    if outputs.len() != true_labels.len() {
        return Err(Error::invalid(format!(
            "{} outputs for {} labels",
            outputs.len(),
            true_labels.len()
        )));
    }
    if outputs.is_empty() {
        return Err(Error::invalid("no samples"));
    }
    let correct = outputs
        .values
        .column_iter()
        .zip(true_labels)
        .filter(|(col, &y)| {
            let v: Vec<f64> = col.iter().copied().collect();
            strict_argmax(&v) == Some(y)
        })
        .count();
    Ok(correct as f64 / outputs.len() as f64)
}

/// Writes `round,sample_index,class_index,value` rows for each matrix.
pub fn write_outputs_csv(path: &Path, rounds: &[&OutputMatrix]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut f = std::io::BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        writeln!(f, "round,sample_index,class_index,value")?;
        for m in rounds {
            for i in 0..m.len() {
                for k in 0..m.k() {
                    writeln!(f, "{},{},{},{}", m.round, i, k, num(m.values[(k, i)]))?;
                }
            }
        }
        f.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

/// Reads matrices written by [`write_outputs_csv`], one per round.
pub fn read_outputs_csv(path: &Path) -> Result<Vec<OutputMatrix>> {
    let name = path.display().to_string();
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Parse { path: name.clone(), line: 0, msg: e.to_string() })?;
    let mut cells: Vec<(u32, usize, usize, f64)> = Vec::new();
    for (idx, rec) in reader.records().enumerate() {
        let line = idx as u64 + 2;
        let bad = |msg: &str| Error::Parse { path: name.clone(), line, msg: msg.into() };
        let rec = rec.map_err(|e| bad(&e.to_string()))?;
        if rec.len() != 4 {
            return Err(bad("expected round,sample_index,class_index,value"));
        }
        cells.push((
            rec[0].parse().map_err(|_| bad("bad round"))?,
            rec[1].parse().map_err(|_| bad("bad sample index"))?,
            rec[2].parse().map_err(|_| bad("bad class index"))?,
            rec[3].parse().map_err(|_| bad("bad value"))?,
        ));
    }
    let mut rounds: Vec<u32> = cells.iter().map(|c| c.0).collect();
    rounds.dedup();
    let mut out = Vec::new();
    for r in rounds {
        let these: Vec<_> = cells.iter().filter(|c| c.0 == r).collect();
        let m = these.iter().map(|c| c.1).max().unwrap() + 1;
        let k = these.iter().map(|c| c.2).max().unwrap() + 1;
        let mut values = DMatrix::zeros(k, m);
        for c in these {
            values[(c.2, c.1)] = c.3;
        }
        out.push(OutputMatrix::new(values, r));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gram::{analytic_eigensystem, GramModel};
    use crate::noise::{make_corruption, realize_labels, theory_constants, CorruptionKind};
    use approx::assert_abs_diff_eq;

    fn setup_a() -> (GramModel, TheoryConstants) {
        let m = GramModel::case_iii(4, 100, 0.4, 0.1);
        let tc = theory_constants(&m, 3.125e-4).unwrap();
        (m, tc)
    }

    fn sym(eta: f64) -> CorruptionMatrix {
        make_corruption(CorruptionKind::Symmetric, eta, 4, None, None).unwrap()
    }

    #[test]
    fn operator_examples() {
        let id = GramModel::case_i(4, 100, 0.0);
        let eig = analytic_eigensystem(&id).unwrap();
        let op0 = averaging_operator(&eig, 3.125e-4, 4, 100, 0).unwrap();
        assert_eq!(op0.matrix, DMatrix::identity(400, 400));
        let op1 = averaging_operator(&eig, 3.125e-4, 4, 100, 1).unwrap();
        assert!((op1.matrix - DMatrix::identity(400, 400) / 1.5).amax() < 1e-14);

        let (m, tc) = setup_a();
        let eig = analytic_eigensystem(&m).unwrap();
        let op = averaging_operator(&eig, 3.125e-4, 4, 100, 1).unwrap();
        assert_abs_diff_eq!(op.eigenvalues[0], tc.r[0], epsilon = 1e-15);
        for i in 1..4 {
            assert_abs_diff_eq!(op.eigenvalues[i], tc.q, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(op.eigenvalues[399], tc.p, epsilon = 1e-15);
        assert_eq!(op.matrix, op.matrix.transpose());
    }

    #[test]
    fn negative_gram_eigenvalue_rejected() {
        let mut eig = analytic_eigensystem(&GramModel::case_i(2, 2, 0.0)).unwrap();
        eig.eigenvalues[3] = -1e-6;
        assert!(averaging_operator(&eig, 0.1, 2, 2, 1).is_err());
    }

    #[test]
    fn setup_a_clean_sample() {
        let (_, tc) = setup_a();
        let y = closed_form_output(Sample { true_label: 0, given_label: 0 }, &sym(0.5), &tc, 1).unwrap();
        assert_abs_diff_eq!(y[0], 0.768708, epsilon = 1e-6);
        for j in 1..4 {
            assert_abs_diff_eq!(y[j], 0.077097, epsilon = 1e-6);
        }
    }

    #[test]
    fn setup_a_noisy_crossover() {
        let (_, tc) = setup_a();
        let s = Sample { true_label: 0, given_label: 1 };
        let y3 = closed_form_output(s, &sym(0.5), &tc, 3).unwrap();
        assert_abs_diff_eq!(y3[0], 0.406993, epsilon = 1e-6);
        assert_abs_diff_eq!(y3[1], 0.305858, epsilon = 1e-6);
        let y2 = closed_form_output(s, &sym(0.5), &tc, 2).unwrap();
        assert!(y2[1] > y2[0]);
        let y0 = closed_form_output(s, &sym(0.5), &tc, 0).unwrap();
        assert_eq!(y0, vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn closed_form_matches_trajectory_setup_a() {
        let (m, tc) = setup_a();
        let c = sym(0.5);
        let la = realize_labels(&c, 6, 0).unwrap();
        let small = GramModel::case_iii(4, 6, 0.4, 0.1);
        let tc6 = theory_constants(&small, 3.125e-4).unwrap();
        let eig = analytic_eigensystem(&small).unwrap();
        let y0 = OutputMatrix::one_hot(&la.given_labels, 4).unwrap();
        let traj = trajectory(&y0, &eig, 3.125e-4, 6, 5).unwrap();
        for (t, ym) in traj.iter().enumerate() {
            let cf = closed_form_matrix(&la.true_labels, &la.given_labels, &c, &tc6, t as u32).unwrap();
            assert!((&cf.values - &ym.values).amax() < 1e-12, "t = {t}");
        }
        let _ = (m, tc);
    }

    #[test]
    fn trajectory_converges_to_uniform() {
        let (m, _) = setup_a();
        let eig = analytic_eigensystem(&m).unwrap();
        let la = realize_labels(&CorruptionMatrix::identity(4), 100, 0).unwrap();
        let y0 = OutputMatrix::one_hot(&la.given_labels, 4).unwrap();
        let y = propagate(&y0, &eig, 3.125e-4, 100, 2000).unwrap();
        assert!(y.values.iter().all(|&x| (x - 0.25).abs() < 1e-6));
    }

    #[test]
    fn pll_refine_examples() {
        let teacher = OutputMatrix::new(
            DMatrix::from_column_slice(4, 3, &[0.5, 0.3, 0.15, 0.05, 0.4, 0.4, 0.1, 0.1, 0.25, 0.25, 0.25, 0.25]),
            1,
        );
        let p = pll_refine(&teacher).unwrap();
        for i in 0..3 {
            assert_eq!(p.values.column(i).as_slice(), &[0.5, 0.5, 0.0, 0.0]);
        }
        let again = pll_refine(&p.as_outputs()).unwrap();
        assert_eq!(again, p);
        let k1 = OutputMatrix::new(DMatrix::from_element(1, 2, 1.0), 0);
        assert!(pll_refine(&k1).is_err());
    }

    #[test]
    fn pll_output_setup_a() {
        let (_, tc) = setup_a();
        let id = CorruptionMatrix::identity(4);
        let clean = pll_output(Sample { true_label: 0, given_label: 0 }, &id, &tc).unwrap();
        assert!(clean.condition_holds);
        assert_eq!(strict_argmax(&clean.output), Some(0));
        // Exact superclass averaging differs from the uniform simplification
        // by (r − q)/4 ≈ 2.3e-3.
        assert!((clean.output[0] - 0.496).abs() < 3e-3);

        let noisy = pll_output(Sample { true_label: 0, given_label: 1 }, &sym(0.5), &tc).unwrap();
        assert!((noisy.output[0] - 0.496).abs() < 3e-3);
        assert!((noisy.output[1] - 0.423).abs() < 3e-3);
        assert!(noisy.output[0] > noisy.output[1]);
    }

    #[test]
    fn pll_output_matches_matrix_form() {
        let small = GramModel::case_iii(4, 6, 0.4, 0.1);
        let tc = theory_constants(&small, 3.125e-4).unwrap();
        let eig = analytic_eigensystem(&small).unwrap();
        let c = sym(0.5);
        let la = realize_labels(&c, 6, 2).unwrap();
        let teacher = closed_form_matrix(&la.true_labels, &la.given_labels, &c, &tc, 1).unwrap();
        let bar = pll_refine(&teacher).unwrap();
        let student = propagate(&bar.as_outputs(), &eig, 3.125e-4, 6, 1).unwrap();
        for i in 0..la.len() {
            let s = Sample { true_label: la.true_labels[i], given_label: la.given_labels[i] };
            let y = pll_output(s, &c, &tc).unwrap().output;
            for k in 0..4 {
                assert_abs_diff_eq!(y[k], student.values[(k, i)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn argmax_accuracy_examples() {
        let labels = vec![0, 1, 2, 3];
        let hot = OutputMatrix::one_hot(&labels, 4).unwrap();
        assert_eq!(argmax_accuracy(&hot, &labels).unwrap(), 1.0);
        let uni = OutputMatrix::new(DMatrix::from_element(4, 4, 0.25), 1);
        assert_eq!(argmax_accuracy(&uni, &labels).unwrap(), 0.0);
    }

    #[test]
    fn outputs_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("o.csv");
        let a = OutputMatrix::one_hot(&[0, 1, 1], 2).unwrap();
        let b = OutputMatrix::new(DMatrix::from_column_slice(2, 3, &[0.7, 0.3, 0.25, 0.75, 0.5, 0.5]), 3);
        write_outputs_csv(&p, &[&a, &b]).unwrap();
        let back = read_outputs_csv(&p).unwrap();
        assert_eq!(back, vec![a, b]);
    }
}
