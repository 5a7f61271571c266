use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;

use super::{ensure_dir, write_json, Written};
use crate::error::{Error, Result};
use crate::gram::{gram_statistics, read_features_csv, read_superclass_csv, FeatureMatrix, GramStatistics, SuperclassMap};

/// Rows whose norm is within this relative distance of 1 are renormalised
/// with a warning; anything further off is rejected.
const RENORMALIZE_WITHIN: f64 = 0.01;

#[derive(Clone, Debug, Serialize)]
pub struct ClassEntry {
    /// Label as it appears in the input.
    pub label: i64,
    pub superclass: i64,
    /// Canonical 0-based index used everywhere else.
    pub index: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct Fitted {
    pub c: Option<f64>,
    pub d: Option<f64>,
    pub e: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct LambdaSuggestion {
    pub target_ratio: f64,
    /// `None` when no λ reaches the target ratio.
    pub lambda: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct IngestReport {
    pub samples: usize,
    pub dim: usize,
    pub classes: Vec<ClassEntry>,
    pub superclasses: usize,
    pub samples_per_class: f64,
    pub renormalized_rows: usize,
    pub statistics: GramStatistics,
    pub fitted: Fitted,
    pub suggested_lambda: Vec<LambdaSuggestion>,
}

/// λ for which the bulk and class ratios satisfy `q/p = ratio`.
///
/// With `a = 1 − c`, `b = 1 − c + n(c − d)` and `κ = K²nλ`, the ratio is
/// `b(κ + a)/(a(κ + b))`, which rises from 1 to `b/a` as `κ` grows.
pub fn suggest_lambda(c: f64, d: f64, k: usize, n: f64, ratio: f64) -> Option<f64> {
    let a = 1.0 - c;
    let b = a + n * (c - d);
    if !(a > 0.0 && b > 0.0 && ratio > 1.0) || b - ratio * a <= 0.0 {
        return None;
    }
    let kappa = a * b * (ratio - 1.0) / (b - ratio * a);
    Some(kappa / ((k * k) as f64 * n))
}

/// Correlation statistics and suggested regularisation for exported
/// features. Classes are reindexed in (superclass, label) order.
pub fn cmd_ingest(features: &Path, superclasses: Option<&Path>, out: &Path) -> Result<(IngestReport, Written)> {
    let raw = read_features_csv(features)?;
    let labels_seen: Vec<i64> = {
        let mut v = raw.labels.clone();
        v.sort_unstable();
        v.dedup();
        v
    };
    let sup_of: BTreeMap<i64, i64> = match superclasses {
        Some(p) => {
            let pairs = read_superclass_csv(p)?;
            let mut m = BTreeMap::new();
            for (label, s) in pairs {
                if m.insert(label, s).is_some_and(|prev| prev != s) {
                    return Err(Error::invalid(format!("{}: class {label} listed in two superclasses", p.display())));
                }
            }
            if let Some(l) = labels_seen.iter().find(|l| !m.contains_key(l)) {
                return Err(Error::invalid(format!("{}: class {l} has no superclass", p.display())));
            }
            m
        }
        None => labels_seen.iter().map(|&l| (l, 0)).collect(),
    };
    let mut order: Vec<(i64, i64)> = labels_seen.iter().map(|&l| (sup_of[&l], l)).collect();
    order.sort_unstable();
    let sup_ids: Vec<i64> = {
        let mut v: Vec<i64> = order.iter().map(|o| o.0).collect();
        v.dedup();
        v
    };
    let classes: Vec<ClassEntry> = order
        .iter()
        .enumerate()
        .map(|(index, &(superclass, label))| ClassEntry { label, superclass, index })
        .collect();
    let index_of: BTreeMap<i64, usize> = classes.iter().map(|c| (c.label, c.index)).collect();
    let map = superclasses
        .map(|_| SuperclassMap::new(order.iter().map(|o| sup_ids.binary_search(&o.0).unwrap()).collect()))
        .transpose()?;

    let dim = raw.rows[0].len();
    let mut renormalized = 0;
    let mut rows = DMatrix::zeros(raw.rows.len(), dim);
    for (i, r) in raw.rows.iter().enumerate() {
        let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = if (norm - 1.0).abs() <= 1e-6 {
            1.0
        } else if (norm - 1.0).abs() <= RENORMALIZE_WITHIN {
            renormalized += 1;
            1.0 / norm
        } else {
            return Err(Error::invalid(format!(
                "feature row {i} has norm {norm}; features must be unit-normalised (within 1%)"
            )));
        };
        for (j, x) in r.iter().enumerate() {
            rows[(i, j)] = x * scale;
        }
    }
    if renormalized > 0 {
        log::warn!("renormalised {renormalized} feature rows whose norms were within 1% of 1");
    }
    let labels: Vec<usize> = raw.labels.iter().map(|l| index_of[l]).collect();
    let fm = FeatureMatrix::new(rows, labels, map)?;
    let statistics = gram_statistics(&fm)?;

    let fitted = Fitted {
        c: statistics.same_class.map(|s| s.mean),
        d: statistics.same_superclass.map(|s| s.mean),
        e: statistics.cross_superclass.map(|s| s.mean),
    };
    let k = classes.len();
    let samples_per_class = raw.rows.len() as f64 / k as f64;
    let suggested_lambda = [1.8, 2.0, 2.2]
        .into_iter()
        .map(|target_ratio| LambdaSuggestion {
            target_ratio,
            lambda: match (fitted.c, fitted.d) {
                (Some(c), Some(d)) => suggest_lambda(c, d, k, samples_per_class, target_ratio),
                _ => None,
            },
        })
        .collect();
    let report = IngestReport {
        samples: raw.rows.len(),
        dim,
        classes,
        superclasses: sup_ids.len(),
        samples_per_class,
        renormalized_rows: renormalized,
        statistics,
        fitted,
        suggested_lambda,
    };
    ensure_dir(out)?;
    let p = out.join("ingest.json");
    write_json(&p, &report)?;
    Ok((report, vec![p]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suggested_lambda_recovers_setup_a() {
        let ratio = (30.6 / 31.1) / (0.6 / 1.1);
        let lambda = suggest_lambda(0.4, 0.1, 4, 100.0, ratio).unwrap();
        assert!((lambda - 3.125e-4).abs() < 1e-15, "{lambda}");
        // q/p cannot exceed b/a = 51.
        assert!(suggest_lambda(0.4, 0.1, 4, 100.0, 60.0).is_none());
        assert!(suggest_lambda(0.4, 0.4, 4, 100.0, 2.0).is_none());
    }
}
