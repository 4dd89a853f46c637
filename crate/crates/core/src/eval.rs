//! GZSL metrics, reporting, 2-D projection and class separability.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Per-class accuracies (percent) and their unweighted mean.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassAccuracy {
    pub per_class: Vec<(usize, f64)>,
    pub mean: f64,
}

/// Accuracy of each class in `classes`, counting only samples whose true
/// label is that class.
pub fn per_class_accuracy(predictions: &[usize], truth: &[usize], classes: &[usize]) -> Result<ClassAccuracy> {
    if predictions.len() != truth.len() {
        return Err(Error::Shape {
            op: "per_class_accuracy",
            left: vec![predictions.len()],
            right: vec![truth.len()],
        });
    }
    let mut per_class = Vec::with_capacity(classes.len());
    for &c in classes {
        let (mut total, mut correct) = (0usize, 0usize);
        for (&p, &t) in predictions.iter().zip(truth) {
            if t == c {
                total += 1;
                correct += usize::from(p == t);
            }
        }
        if total == 0 {
            return Err(Error::Coverage(format!("class {c} has no test samples")));
        }
        per_class.push((c, 100.0 * correct as f64 / total as f64));
    }
    let mean = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|(_, a)| a).sum::<f64>() / per_class.len() as f64
    };
    Ok(ClassAccuracy { per_class, mean })
}

/// `H = 2·As·Au / (As + Au)`, zero when both are zero.
pub fn harmonic_mean(seen: f64, unseen: f64) -> Result<f64> {
    if seen < 0.0 || unseen < 0.0 || seen.is_nan() || unseen.is_nan() {
        return Err(Error::Domain(format!("accuracies must be nonnegative, got {seen} and {unseen}")));
    }
    if seen + unseen == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * seen * unseen / (seen + unseen))
}

/// Relative improvement `(new − base) / base × 100`.
pub fn improvement_rate(new: f64, base: f64) -> Result<f64> {
    if !(base > 0.0) {
        return Err(Error::Domain(format!("baseline must be positive, got {base}")));
    }
    Ok((new - base) / base * 100.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub method: String,
    /// Per-class accuracy over seen then unseen classes, keyed by class id.
    pub per_class: Vec<(String, f64)>,
    pub seen_accuracy: f64,
    pub unseen_accuracy: f64,
    pub harmonic_mean: f64,
    /// Fisher ratio of the test-set features, when measured.
    pub separability: Option<f64>,
}

impl EvalReport {
    pub fn new(
        method: impl Into<String>,
        seen: &ClassAccuracy,
        unseen: &ClassAccuracy,
        class_names: &dyn Fn(usize) -> String,
    ) -> Result<Self> {
        let per_class = seen
            .per_class
            .iter()
            .chain(&unseen.per_class)
            .map(|&(c, a)| (class_names(c), a))
            .collect();
        Ok(EvalReport {
            method: method.into(),
            per_class,
            seen_accuracy: seen.mean,
            unseen_accuracy: unseen.mean,
            harmonic_mean: harmonic_mean(seen.mean, unseen.mean)?,
            separability: None,
        })
    }
}

pub const REPORT_HEADER: &str = "method\tAs\tAu\tH";

/// Machine-readable report rows at full precision.
pub fn report_tsv(reports: &[EvalReport]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}",
            r.method, r.seen_accuracy, r.unseen_accuracy, r.harmonic_mean
        );
    }
    out
}

/// Parsed `method As Au H` rows.
pub fn parse_report_tsv(text: &str) -> Result<Vec<(String, f64, f64, f64)>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != REPORT_HEADER {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected header `{REPORT_HEADER}`"),
                });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Parse {
            line: i + 1,
            message: "expected `method As Au H`".into(),
        };
        if cols.len() != 4 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        rows.push((cols[0].to_string(), num(cols[1])?, num(cols[2])?, num(cols[3])?));
    }
    Ok(rows)
}

/// Human-readable table, one decimal place, best H marked with `*`.
pub fn report_table(reports: &[EvalReport]) -> String {
    let width = reports.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    let best = reports
        .iter()
        .enumerate()
        .fold(None::<(usize, f64)>, |acc, (i, r)| match acc {
            Some((_, h)) if h >= r.harmonic_mean => acc,
            _ => Some((i, r.harmonic_mean)),
        })
        .map(|(i, _)| i);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>6}  {:>6}  {:>6}", "Method", "As", "Au", "H");
    for (i, r) in reports.iter().enumerate() {
        let mark = if Some(i) == best { "*" } else { "" };
        let _ = writeln!(
            out,
            "{:<width$}  {:>6.1}  {:>6.1}  {:>6.1}{}",
            r.method, r.seen_accuracy, r.unseen_accuracy, r.harmonic_mean, mark
        );
    }
    out
}

/// Points on the top two principal axes.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<usize>,
    /// Sample-covariance eigenvalues of the two axes.
    pub eigenvalues: [f64; 2],
    /// Fewer than two positive eigenvalues; missing axes are zero-filled.
    pub degenerate: bool,
}

impl Projection {
    pub fn to_tsv(&self, class_name: &dyn Fn(usize) -> String) -> String {
        let mut out = String::from("x\ty\tclass_id\n");
        for (p, &l) in self.points.iter().zip(&self.labels) {
            let _ = writeln!(out, "{}\t{}\t{}", p[0], p[1], class_name(l));
        }
        out
    }
}

/// Centre the rows and project onto the two leading eigenvectors of the
/// sample covariance. Each axis is signed so that its largest-magnitude
/// coordinate is positive.
pub fn project_2d(features: &Tensor, labels: &[usize]) -> Result<Projection> {
    let (n, d) = (features.rows(), features.cols());
    if n < 3 || d < 2 || labels.len() != n {
        return Err(Error::Precondition(format!(
            "projection needs at least 3 samples of width ≥ 2 with labels, got {n}×{d}"
        )));
    }
    let x = DMatrix::from_row_slice(n, d, features.data());
    let mean = x.row_mean();
    let centred = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = (centred.transpose() * &centred) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let tol = scale * 1e-12 * d as f64;
    let mut eigenvalues = [0.0; 2];
    let mut axes: Vec<Option<Vec<f64>>> = Vec::with_capacity(2);
    for (slot, &k) in order.iter().take(2).enumerate() {
        let lambda = eig.eigenvalues[k];
        if lambda > tol {
            let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let lead = v
                .iter()
                .enumerate()
                .fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
            if v[lead] < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            eigenvalues[slot] = lambda;
            axes.push(Some(v));
        } else {
            axes.push(None);
        }
    }
    let degenerate = axes.iter().any(Option::is_none);
    if degenerate {
        log::warn!("covariance has fewer than two positive eigenvalues; zero-filling the missing axis");
    }
    let points = (0..n)
        .map(|i| {
            let row = centred.row(i);
            let coord = |axis: &Option<Vec<f64>>| {
                axis.as_ref()
                    .map_or(0.0, |v| v.iter().zip(row.iter()).map(|(a, b)| a * b).sum())
            };
            [coord(&axes[0]), coord(&axes[1])]
        })
        .collect();
    Ok(Projection {
        points,
        labels: labels.to_vec(),
        eigenvalues,
        degenerate,
    })
}

/// Trace of the between-class scatter over trace of the within-class
/// scatter. Returns `f64::INFINITY` when the within-class scatter vanishes.
pub fn separability(features: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, d) = (features.rows(), features.cols());
    if labels.len() != n {
        return Err(Error::Shape {
            op: "separability",
            left: features.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let n_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; n_classes];
    let mut means = vec![0.0; n_classes * d];
    let mut global = vec![0.0; d];
    for (i, &c) in labels.iter().enumerate() {
        counts[c] += 1;
        for (j, v) in features.row(i).iter().enumerate() {
            means[c * d + j] += v;
            global[j] += v;
        }
    }
    let present: Vec<usize> = (0..n_classes).filter(|&c| counts[c] > 0).collect();
    if present.len() < 2 || present.iter().any(|&c| counts[c] < 2) {
        return Err(Error::Precondition(
            "separability needs at least two classes with two samples each".into(),
        ));
    }
    for &c in &present {
        for v in &mut means[c * d..(c + 1) * d] {
            *v /= counts[c] as f64;
        }
    }
    global.iter_mut().for_each(|v| *v /= n as f64);
    let between: f64 = present
        .iter()
        .map(|&c| {
            counts[c] as f64
                * means[c * d..(c + 1) * d]
                    .iter()
                    .zip(&global)
                    .map(|(m, g)| (m - g).powi(2))
                    .sum::<f64>()
        })
        .sum();
    let within: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            features
                .row(i)
                .iter()
                .zip(&means[c * d..(c + 1) * d])
                .map(|(x, m)| (x - m).powi(2))
                .sum::<f64>()
        })
        .sum();
    if within == 0.0 {
        log::warn!("within-class scatter is zero; separability is unbounded");
        return Ok(f64::INFINITY);
    }
    Ok(between / within)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(method: &str, s: f64, u: f64) -> EvalReport {
        EvalReport {
            method: method.into(),
            per_class: Vec::new(),
            seen_accuracy: s,
            unseen_accuracy: u,
            harmonic_mean: harmonic_mean(s, u).unwrap(),
            separability: None,
        }
    }

    #[test]
    fn perfect_predictions_score_100() {
        let t = [0, 1, 1, 2, 2, 2];
        let acc = per_class_accuracy(&t, &t, &[0, 1, 2]).unwrap();
        assert!(acc.per_class.iter().all(|&(_, a)| a == 100.0));
        assert_eq!(acc.mean, 100.0);
    }

    #[test]
    fn class_mean_ignores_class_sizes() {
        let truth = [0, 1, 1, 1, 1, 1, 1, 1, 1, 1];
        let pred = [0, 0, 0, 0, 0, 0, 0, 0, 0, 0];
        assert_eq!(per_class_accuracy(&pred, &truth, &[0, 1]).unwrap().mean, 50.0);
    }

    #[test]
    fn hand_counted_three_class_tally() {
        // class 0: 2/3, class 1: 1/2, class 2: 0/1
        let truth = [0, 0, 0, 1, 1, 2];
        let pred = [0, 0, 2, 1, 0, 1];
        let acc = per_class_accuracy(&pred, &truth, &[0, 1, 2]).unwrap();
        let expect = [200.0 / 3.0, 50.0, 0.0];
        for ((_, a), e) in acc.per_class.iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
        assert!((acc.mean - (200.0 / 3.0 + 50.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn missing_test_class_is_a_coverage_error() {
        assert!(matches!(per_class_accuracy(&[0], &[0], &[0, 1]), Err(Error::Coverage(_))));
    }

    #[test]
    fn harmonic_mean_cases() {
        assert_eq!(harmonic_mean(50.0, 50.0).unwrap(), 50.0);
        assert_eq!(harmonic_mean(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(harmonic_mean(80.0, 0.0).unwrap(), 0.0);
        assert!(matches!(harmonic_mean(-1.0, 2.0), Err(Error::Domain(_))));
    }

    #[test]
    fn improvement_rate_cases() {
        assert_eq!(improvement_rate(42.0, 42.0).unwrap(), 0.0);
        assert!(matches!(improvement_rate(1.0, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn table_marks_best_row_and_keeps_order() {
        let rows = [report("baseline", 60.0, 40.0), report("high", 55.0, 52.0), report("low", 61.0, 38.0)];
        let text = report_table(&rows);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("baseline") && !lines[1].ends_with('*'));
        assert!(lines[2].starts_with("high") && lines[2].ends_with('*'));
        assert!(lines[3].starts_with("low"));
    }

    #[test]
    fn single_report_gives_one_row() {
        let text = report_table(&[report("only", 10.0, 20.0)]);
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn report_tsv_reparses() {
        let rows = [report("a", 64.0, 65.2), report("b", 1.0 / 3.0, 0.1)];
        let parsed = parse_report_tsv(&report_tsv(&rows)).unwrap();
        for (r, (m, s, u, h)) in rows.iter().zip(parsed) {
            assert_eq!((r.method.as_str(), r.seen_accuracy, r.unseen_accuracy, r.harmonic_mean), (m.as_str(), s, u, h));
        }
    }

    #[test]
    fn four_point_fisher_fixture() {
        // means (1,0) and (1,4), global (1,2): between = 2·4 + 2·4, within = 4·1
        let x = Tensor::from_rows(&[[0.0, 0.0], [2.0, 0.0], [0.0, 4.0], [2.0, 4.0]]).unwrap();
        assert!((separability(&x, &[0, 0, 1, 1]).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn coincident_clouds_have_zero_ratio() {
        let x = Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]).unwrap();
        assert_eq!(separability(&x, &[0, 0, 1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn zero_within_scatter_is_infinite() {
        let x = Tensor::from_rows(&[[0.0, 0.0], [0.0, 0.0], [1.0, 1.0], [1.0, 1.0]]).unwrap();
        assert_eq!(separability(&x, &[0, 0, 1, 1]).unwrap(), f64::INFINITY);
    }

    #[test]
    fn separability_needs_two_samples_per_class() {
        let x = Tensor::from_rows(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]).unwrap();
        assert!(separability(&x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn axis_aligned_data_projects_onto_itself() {
        // variance along x is larger than along y; both means are zero
        let x = Tensor::from_rows(&[[3.0, 1.0], [-3.0, 1.0], [3.0, -1.0], [-3.0, -1.0]]).unwrap();
        let p = project_2d(&x, &[0, 0, 1, 1]).unwrap();
        assert!(!p.degenerate);
        for (pt, i) in p.points.iter().zip(0..) {
            assert!((pt[0].abs() - 3.0).abs() < 1e-12 && (pt[1].abs() - 1.0).abs() < 1e-12, "row {i}: {pt:?}");
            assert!((pt[0] - x.get(i, 0)).abs() < 1e-12 || (pt[0] + x.get(i, 0)).abs() < 1e-12);
        }
    }

    #[test]
    fn collinear_data_is_degenerate() {
        let x = Tensor::from_rows(&[[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]]).unwrap();
        let p = project_2d(&x, &[0, 1, 2]).unwrap();
        assert!(p.degenerate);
        assert!(p.points.iter().all(|pt| pt[1] == 0.0));
    }

    #[test]
    fn projection_rejects_tiny_batches() {
        let x = Tensor::from_rows(&[[1.0, 2.0], [2.0, 4.0]]).unwrap();
        assert!(project_2d(&x, &[0, 1]).is_err());
    }
}
