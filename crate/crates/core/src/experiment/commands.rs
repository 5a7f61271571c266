use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use super::{ensure_dir, realize, write_json, write_table, ExperimentConfig, Mode, Sweep, Written};
use crate::distill::{argmax_accuracy, pll_refine, propagate, trajectory, write_outputs_csv, OutputMatrix};
use crate::error::{Error, Result};
use crate::format::num;
use crate::gram::{analytic_eigensystem, build_gram, numeric_eigensystem, EigenFamily, EigenSystem, GramModel};
use crate::noise::{
    evolving_condition_report, minimal_rounds, pll_accuracy_condition, predicted_population_accuracy,
    sd_accuracy_condition, theory_constants, write_corruption_csv, write_labels_csv, AccuracyMode, ConditionReport,
    CorruptionMatrix, LabelAssignment, MinimalRounds, TheoryConstants,
};
use crate::oracle::{measure_approx_error, solve_round, ConvergenceReport};

fn eigensystem(model: &GramModel) -> Result<(DMatrix<f64>, EigenSystem)> {
    let gram = build_gram(model)?;
    let eig = if model.is_perturbed() { numeric_eigensystem(&gram)? } else { analytic_eigensystem(model)? };
    Ok((gram, eig))
}

/// The theory always describes the unperturbed model.
fn ideal_constants(model: &GramModel, lambda: f64) -> Result<TheoryConstants> {
    let ideal = GramModel { perturbation_amplitude: 0.0, ..model.clone() };
    theory_constants(&ideal, lambda)
}

/// Barycentric projection onto a regular K-gon with class `k` at angle
/// `π/2 − 2πk/K` (class 0 at the top, the rest clockwise).
pub fn project_kgon(y: &[f64]) -> (f64, f64) {
    let k = y.len() as f64;
    y.iter().enumerate().fold((0.0, 0.0), |(x, z), (i, &w)| {
        let a = std::f64::consts::FRAC_PI_2 - std::f64::consts::TAU * i as f64 / k;
        (x + w * a.cos(), z + w * a.sin())
    })
}

/// Oracle outputs for rounds `1..=t_max`, each round starting from the
/// previous oracle outputs.
fn oracle_rounds(
    y0: &OutputMatrix,
    gram: &DMatrix<f64>,
    cfg: &ExperimentConfig,
    t_max: u32,
) -> Result<Vec<(OutputMatrix, ConvergenceReport)>> {
    let mut prev = y0.clone();
    let mut out = Vec::new();
    for t in 1..=t_max {
        let res = solve_round(&prev, gram, cfg.lambda, cfg.gram.k, cfg.gram.n, &cfg.solver, 1.0)?;
        let mut outputs = res.outputs.clone();
        outputs.round = t;
        out.push((outputs.clone(), res.report()));
        prev = outputs;
    }
    Ok(out)
}

/// Per-round outputs, a simplex projection, operator spectra and
/// within-class dispersion for one realised label set.
pub fn cmd_trajectory(cfg: &ExperimentConfig, out: &Path) -> Result<Written> {
    ensure_dir(out)?;
    let model = &cfg.gram;
    let (k, n) = (model.k, model.n);
    let c = cfg.corruption()?;
    let labels = realize(cfg, &c, n)?;
    let (gram, eig) = eigensystem(model)?;
    let y0 = OutputMatrix::one_hot(&labels.given_labels, k)?;
    let rounds = trajectory(&y0, &eig, cfg.lambda, n, cfg.t_max)?;
    let mut written = Vec::new();

    for m in &rounds {
        let p = out.join(format!("round_{}.csv", m.round));
        write_outputs_csv(&p, &[m])?;
        written.push(p);
    }

    let mut header = vec!["round", "sample_index", "true_label", "given_label", "x", "y"];
    let comps: Vec<String> = (0..k).map(|j| format!("y_{j}")).collect();
    header.extend(comps.iter().map(String::as_str));
    let mut rows = Vec::new();
    for m in &rounds {
        for i in 0..m.len() {
            let col = m.column(i);
            let (x, y) = project_kgon(&col);
            let mut r = vec![
                m.round.to_string(),
                i.to_string(),
                labels.true_labels[i].to_string(),
                labels.given_labels[i].to_string(),
                num(x),
                num(y),
            ];
            r.extend(col.iter().map(|&v| num(v)));
            rows.push(r);
        }
    }
    let p = out.join("projection.csv");
    write_table(&p, &header, &rows)?;
    written.push(p);

    let ratios = crate::distill::operator_ratios(&eig, cfg.lambda, k, n)?;
    let mut rows = Vec::new();
    for t in 1..=cfg.t_max {
        for (family, value, mult) in spectrum_groups(&eig, &ratios.map(|m| m.powi(t as i32))) {
            rows.push(vec![t.to_string(), family_name(family).into(), mult.to_string(), num(value)]);
        }
    }
    let p = out.join("operator_eigenvalues.csv");
    write_table(&p, &["round", "family", "multiplicity", "eigenvalue"], &rows)?;
    written.push(p);

    let mut rows = Vec::new();
    for m in &rounds {
        for class in 0..k {
            let d = m.within_class_dispersion(&labels.true_labels, class);
            rows.push(vec![m.round.to_string(), class.to_string(), num(d)]);
        }
    }
    let p = out.join("dispersion.csv");
    write_table(&p, &["round", "class", "dispersion"], &rows)?;
    written.push(p);

    written.extend(write_realisation(out, &c, &labels)?);

    if cfg.has_mode(Mode::Oracle) {
        let solved = oracle_rounds(&y0, &gram, cfg, cfg.t_max)?;
        let mut reports = Vec::new();
        for (m, rep) in &solved {
            let p = out.join(format!("oracle_round_{}.csv", m.round));
            write_outputs_csv(&p, &[m])?;
            written.push(p);
            reports.push(json!({"round": m.round, "converged": rep.converged, "final_loss": rep.final_loss, "iterations_used": rep.iterations_used}));
        }
        let p = out.join("oracle_convergence.json");
        write_json(&p, &reports)?;
        written.push(p);
    }
    Ok(written)
}

fn write_realisation(out: &Path, c: &CorruptionMatrix, labels: &LabelAssignment) -> Result<Written> {
    let pl = out.join("labels.csv");
    write_labels_csv(&pl, labels)?;
    let pc = out.join("corruption.csv");
    write_corruption_csv(&pc, c)?;
    let pe = out.join("empirical_corruption.csv");
    write_corruption_csv(&pe, &labels.empirical_corruption())?;
    Ok(vec![pl, pc, pe])
}

fn family_name(f: EigenFamily) -> &'static str {
    match f {
        EigenFamily::Superclass => "superclass",
        EigenFamily::Class => "class",
        EigenFamily::Bulk => "bulk",
        EigenFamily::Numeric => "numeric",
    }
}

/// Runs of equal eigenvalues within a family, in eigensystem order.
fn spectrum_groups(eig: &EigenSystem, values: &nalgebra::DVector<f64>) -> Vec<(EigenFamily, f64, usize)> {
    let mut groups: Vec<(EigenFamily, f64, usize)> = Vec::new();
    for i in 0..eig.dim() {
        let (f, v) = (eig.families[i], values[i]);
        match groups.last_mut() {
            Some((gf, gv, m)) if *gf == f && (*gv - v).abs() <= 1e-12 * gv.abs().max(1.0) => *m += 1,
            _ => groups.push((f, v, 1)),
        }
    }
    groups
}

struct PhasePoint {
    rows: Vec<Vec<String>>,
}

/// Accuracy of the `t`-round models (and the top-2 student) across a sweep
/// of corruption rates: theory, the closed-form outputs and optionally the
/// oracle.
pub fn cmd_phase(cfg: &ExperimentConfig, out: &Path) -> Result<Written> {
    let Some(Sweep::Eta(etas)) = &cfg.sweep else {
        return Err(Error::invalid("phase needs sweep.eta"));
    };
    if cfg.t_max == 0 {
        return Err(Error::invalid("phase needs t_max >= 1"));
    }
    ensure_dir(out)?;
    let model = &cfg.gram;
    let tc = ideal_constants(model, cfg.lambda)?;
    let (gram, eig) = eigensystem(model)?;
    let points: Vec<PhasePoint> = etas
        .par_iter()
        .map(|&eta| phase_point(cfg, eta, &tc, &gram, &eig))
        .collect::<Result<_>>()?;
    let oracle = cfg.has_mode(Mode::Oracle);
    let mut header = vec!["eta", "t", "predicted_accuracy", "empirical_accuracy"];
    if oracle {
        header.push("oracle_accuracy");
    }
    let rows: Vec<Vec<String>> = points.into_iter().flat_map(|p| p.rows).collect();
    let p = out.join("phase.csv");
    write_table(&p, &header, &rows)?;
    Ok(vec![p])
}

fn phase_point(
    cfg: &ExperimentConfig,
    eta: f64,
    tc: &TheoryConstants,
    gram: &DMatrix<f64>,
    eig: &EigenSystem,
) -> Result<PhasePoint> {
    let (k, n) = (cfg.gram.k, cfg.gram.n);
    let c = cfg.corruption_at(eta)?;
    let labels = realize(cfg, &c, n)?;
    // Predictions use the realised frequencies so that they describe exactly
    // the samples being classified; with exact realisation this is C itself.
    let emp = labels.empirical_corruption();
    let y0 = OutputMatrix::one_hot(&labels.given_labels, k)?;
    let closed = if cfg.has_mode(Mode::ClosedForm) {
        Some(trajectory(&y0, eig, cfg.lambda, n, cfg.t_max)?)
    } else {
        None
    };
    let oracle = if cfg.has_mode(Mode::Oracle) {
        match oracle_rounds(&y0, gram, cfg, cfg.t_max) {
            Ok(r) => Some(r),
            Err(e) if e.is_numerical() => {
                log::warn!("oracle failed at eta = {eta}: {e}");
                None
            }
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    let truth = &labels.true_labels;
    let acc = |m: &OutputMatrix| argmax_accuracy(m, truth).map(num);
    let mut rows = Vec::new();
    for t in 1..=cfg.t_max {
        let mut r = vec![
            num(eta),
            t.to_string(),
            num(predicted_population_accuracy(&emp, tc, t, AccuracyMode::Sd)?),
            closed.as_ref().map(|c| acc(&c[t as usize])).transpose()?.unwrap_or_default(),
        ];
        if cfg.has_mode(Mode::Oracle) {
            let cell = oracle.as_ref().map(|o| {
                let (m, rep) = &o[t as usize - 1];
                if rep.converged { acc(m) } else { Ok(String::new()) }
            });
            r.push(cell.transpose()?.unwrap_or_default());
        }
        rows.push(r);
    }
    if cfg.has_mode(Mode::Pll) {
        let mut r = vec![
            num(eta),
            "PLL".to_string(),
            num(predicted_population_accuracy(&emp, tc, 1, AccuracyMode::Pll)?),
            match &closed {
                Some(c) => {
                    let student = propagate(&pll_refine(&c[1])?.as_outputs(), eig, cfg.lambda, n, 1)?;
                    acc(&student)?
                }
                None => String::new(),
            },
        ];
        if cfg.has_mode(Mode::Oracle) {
            let cell = match &oracle {
                Some(o) if o[0].1.converged => {
                    let targets = pll_refine(&o[0].0)?.as_outputs();
                    match solve_round(&targets, gram, cfg.lambda, k, n, &cfg.solver, 1.0) {
                        Ok(res) if res.converged => acc(&res.outputs)?,
                        Ok(_) => String::new(),
                        Err(e) if e.is_numerical() => String::new(),
                        Err(e) => return Err(e),
                    }
                }
                _ => String::new(),
            };
            r.push(cell);
        }
        rows.push(r);
    }
    Ok(PhasePoint { rows })
}

/// Largest gap between oracle and closed-form outputs for each `n` of the
/// sweep. Non-converged points are flagged and the run continues.
pub fn cmd_approx_error(cfg: &ExperimentConfig, out: &Path) -> Result<Written> {
    let Some(Sweep::N(ns)) = &cfg.sweep else {
        return Err(Error::invalid("approx-error needs sweep.n"));
    };
    if !cfg.has_mode(Mode::Oracle) {
        return Err(Error::invalid("approx-error needs the oracle mode"));
    }
    ensure_dir(out)?;
    let c = cfg.corruption()?;
    let rows: Vec<Vec<String>> = ns
        .par_iter()
        .map(|&n| -> Result<Vec<String>> {
            let model = GramModel { n, ..cfg.gram.clone() };
            model.validate()?;
            let labels = realize(cfg, &c, n)?;
            match measure_approx_error(&model, &labels, cfg.lambda, cfg.approx_rounds, &cfg.solver) {
                Ok(a) => {
                    let its: Vec<String> = a.iterations.iter().map(usize::to_string).collect();
                    Ok(vec![n.to_string(), num(a.max_linf), its.join(";"), "converged".into()])
                }
                Err(e) if e.is_numerical() => {
                    log::warn!("n = {n}: {e}");
                    Ok(vec![n.to_string(), String::new(), String::new(), "not_converged".into()])
                }
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let p = out.join("approx_error.csv");
    write_table(&p, &["n", "max_linf_error", "iterations", "status"], &rows)?;
    Ok(vec![p])
}

#[derive(Serialize)]
struct RoundVerdict {
    t: u32,
    achieves_100: bool,
    predicted_accuracy: f64,
    #[serde(flatten)]
    report: ConditionReport,
}

/// JSON summary of the constants, the minimal number of rounds and every
/// condition verdict for the configured corruption.
pub fn cmd_theory(cfg: &ExperimentConfig, out: &Path) -> Result<Written> {
    ensure_dir(out)?;
    let report = theory_report(cfg)?;
    let p = out.join("theory.json");
    write_json(&p, &report)?;
    Ok(vec![p])
}

pub(crate) fn theory_report(cfg: &ExperimentConfig) -> Result<Value> {
    let model = &cfg.gram;
    let tc = ideal_constants(model, cfg.lambda)?;
    let c = cfg.corruption()?;
    let minimal = match minimal_rounds(&c, &tc)? {
        MinimalRounds::Rounds(t) => json!(t),
        MinimalRounds::Unreachable => json!("unreachable"),
    };
    let sd = (1..=cfg.t_max)
        .map(|t| {
            let report = sd_accuracy_condition(&c, &tc, t)?;
            Ok(RoundVerdict {
                t,
                achieves_100: report.achieves_100,
                predicted_accuracy: predicted_population_accuracy(&c, &tc, t, AccuracyMode::Sd)?,
                report,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pll = pll_accuracy_condition(&c);
    let mut doc = json!({
        "case": model.case,
        "k": model.k,
        "n": model.n,
        "lambda": cfg.lambda,
        "p": tc.p,
        "q": tc.q,
        "r": tc.r,
        "q_over_p": tc.ratio(),
        "p_class": tc.p_class,
        "q_class": tc.q_class,
        "corruption": (0..c.k()).map(|a| c.row(a)).collect::<Vec<_>>(),
        "minimal_rounds": minimal,
        "sd": sd,
        "pll": {
            "achieves_100": pll.achieves_100,
            "predicted_accuracy": predicted_population_accuracy(&c, &tc, 1, AccuracyMode::Pll)?,
            "failing_pairs": pll.failing_pairs,
            "pairs": pll.pairs,
        },
    });
    if let Some(ext) = &tc.extended {
        let r = tc.superclasses.num_superclasses();
        doc["extended"] = json!({
            "s": ext.s,
            "a": ext.a,
            "delta": ext.delta,
            "nu": (1..=cfg.t_max).map(|t| ext.nu(t)).collect::<Vec<_>>(),
            "mu": (0..r).map(|s| (1..=cfg.t_max).map(|t| ext.mu(s, t)).collect::<Vec<_>>()).collect::<Vec<_>>(),
        });
    }
    if let Some(schedule) = &cfg.schedule {
        let rounds = cfg.t_max.min(schedule.len() as u32);
        let verdicts = (1..=rounds)
            .map(|t| {
                let r = evolving_condition_report(&c, schedule, cfg.lambda, model.k, model.n, t)?;
                Ok(json!({"t": t, "achieves_100": r.achieves_100, "failing_pairs": r.failing_pairs}))
            })
            .collect::<Result<Vec<_>>>()?;
        doc["evolving"] = Value::Array(verdicts);
    }
    Ok(doc)
}
