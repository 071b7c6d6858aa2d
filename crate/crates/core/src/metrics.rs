//! Agreement statistics between score sources: ICC(2,1) with confidence
//! interval, MAE with its spread, and the comparison report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use crate::error::{Error, Result};

/// Paired scores of two sources over the same subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingPairs {
    pub label_a: String,
    pub label_b: String,
    pub subjects: Vec<(String, f64, f64)>,
}

impl RatingPairs {
    pub fn new(label_a: &str, label_b: &str, a: &[f64], b: &[f64]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::Shape(format!("{} vs {} scores", a.len(), b.len())));
        }
        let subjects = a
            .iter()
            .zip(b)
            .enumerate()
            .map(|(i, (&x, &y))| (i.to_string(), x, y))
            .collect();
        let pairs = RatingPairs {
            label_a: label_a.into(),
            label_b: label_b.into(),
            subjects,
        };
        pairs.validate()?;
        Ok(pairs)
    }

    /// Pair two tables on subject id; both must hold the same ids.
    pub fn from_tables(
        label_a: &str,
        a: &ScoreTable,
        label_b: &str,
        b: &ScoreTable,
    ) -> Result<Self> {
        if a.keys().ne(b.keys()) {
            let only_a: Vec<&String> = a.keys().filter(|k| !b.contains_key(*k)).collect();
            let only_b: Vec<&String> = b.keys().filter(|k| !a.contains_key(*k)).collect();
            return Err(Error::Structure(format!(
                "subject ids differ between {label_a} and {label_b}: only in {label_a} {only_a:?}, only in {label_b} {only_b:?}"
            )));
        }
        let pairs = RatingPairs {
            label_a: label_a.into(),
            label_b: label_b.into(),
            subjects: a.iter().map(|(k, &x)| (k.clone(), x, b[k])).collect(),
        };
        pairs.validate()?;
        Ok(pairs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects.len() < 2 {
            return Err(Error::Structure(format!(
                "{} subjects; at least 2 are required",
                self.subjects.len()
            )));
        }
        if let Some((id, _, _)) = self
            .subjects
            .iter()
            .find(|(_, a, b)| !a.is_finite() || !b.is_finite())
        {
            return Err(Error::NonFinite(format!("score of subject {id}")));
        }
        Ok(())
    }

    pub fn a(&self) -> Vec<f64> {
        self.subjects.iter().map(|s| s.1).collect()
    }

    pub fn b(&self) -> Vec<f64> {
        self.subjects.iter().map(|s| s.2).collect()
    }

    pub fn swapped(&self) -> Self {
        RatingPairs {
            label_a: self.label_b.clone(),
            label_b: self.label_a.clone(),
            subjects: self
                .subjects
                .iter()
                .map(|(id, a, b)| (id.clone(), *b, *a))
                .collect(),
        }
    }
}

/// Mean and population standard deviation of `|a - b|`.
pub fn mae_std(pairs: &RatingPairs) -> Result<(f64, f64)> {
    if pairs.subjects.is_empty() {
        return Err(Error::Structure("no subjects".into()));
    }
    let d: Vec<f64> = pairs
        .subjects
        .iter()
        .map(|(_, a, b)| (a - b).abs())
        .collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CiMethod {
    /// Exact bounds from the F distribution.
    #[default]
    FDistribution,
    /// Percentile bootstrap over subjects.
    Bootstrap { resamples: usize, seed: u64 },
}

impl CiMethod {
    pub fn bootstrap(seed: u64) -> Self {
        CiMethod::Bootstrap {
            resamples: 2000,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IccResult {
    pub value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_subjects: usize,
    pub variant: String,
}

/// Two-way ANOVA mean squares of an `n x k` rating matrix:
/// `(between subjects, between raters, residual)`.
fn mean_squares(rows: &[[f64; 2]]) -> (f64, f64, f64) {
    let n = rows.len() as f64;
    let k = 2.0;
    let grand = rows.iter().flatten().sum::<f64>() / (n * k);
    let ss_rows: f64 = rows
        .iter()
        .map(|r| {
            let m = (r[0] + r[1]) / k - grand;
            k * m * m
        })
        .sum();
    let ss_cols: f64 = (0..2)
        .map(|j| {
            let m = rows.iter().map(|r| r[j]).sum::<f64>() / n - grand;
            n * m * m
        })
        .sum();
    let ss_total: f64 = rows
        .iter()
        .flatten()
        .map(|x| (x - grand) * (x - grand))
        .sum();
    let ss_err = (ss_total - ss_rows - ss_cols).max(0.0);
    (
        ss_rows / (n - 1.0),
        ss_cols / (k - 1.0),
        ss_err / ((n - 1.0) * (k - 1.0)),
    )
}

/// Relative tolerance below which a mean square counts as zero.
const MS_EPS: f64 = 1e-12;

fn icc_point(rows: &[[f64; 2]]) -> Result<(f64, f64, f64, f64)> {
    let (msb, msj, mse) = mean_squares(rows);
    let scale = rows.iter().flatten().map(|x| x * x).sum::<f64>().max(1.0);
    if msb <= MS_EPS * scale {
        return Err(Error::UndefinedIcc(
            "between-subject variance is zero".into(),
        ));
    }
    let (n, k) = (rows.len() as f64, 2.0);
    let value = (msb - mse) / (msb + (k - 1.0) * mse + k * (msj - mse) / n);
    Ok((value, msb, msj, mse))
}

/// ICC(2,1): two-way random effects, absolute agreement, single measure.
pub fn icc(pairs: &RatingPairs, confidence: f64, method: CiMethod) -> Result<IccResult> {
    pairs.validate()?;
    if pairs.subjects.len() < 3 {
        return Err(Error::Structure(format!(
            "{} subjects; ICC needs at least 3",
            pairs.subjects.len()
        )));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::validation(
            "confidence",
            format!("{confidence} is not in (0, 1)"),
        ));
    }
    let rows: Vec<[f64; 2]> = pairs.subjects.iter().map(|(_, a, b)| [*a, *b]).collect();
    let (value, msb, msj, mse) = icc_point(&rows)?;
    let (ci_low, ci_high) = match method {
        CiMethod::FDistribution => f_interval(value, msb, msj, mse, rows.len(), confidence)?,
        CiMethod::Bootstrap { resamples, seed } => {
            bootstrap_interval(&rows, confidence, resamples, seed)?
        }
    };
    Ok(IccResult {
        value,
        ci_low,
        ci_high,
        n_subjects: rows.len(),
        variant: "ICC(2,1)".into(),
    })
}

fn f_quantile(p: f64, d1: f64, d2: f64) -> Result<f64> {
    let dist = FisherSnedecor::new(d1, d2)
        .map_err(|e| Error::UndefinedIcc(format!("F({d1}, {d2}): {e}")))?;
    Ok(dist.inverse_cdf(p))
}

/// Confidence bounds with Satterthwaite-style degrees of freedom.
fn f_interval(
    value: f64,
    msb: f64,
    msj: f64,
    mse: f64,
    n: usize,
    confidence: f64,
) -> Result<(f64, f64)> {
    let (n, k) = (n as f64, 2.0);
    let scale = msb.max(1.0);
    if mse <= MS_EPS * scale && msj <= MS_EPS * scale {
        return Ok((1.0, 1.0));
    }
    let alpha = 1.0 - confidence;
    let v = if mse <= MS_EPS * scale {
        k - 1.0
    } else {
        let fc = msj / mse;
        let a = n * (1.0 + (k - 1.0) * value) - k * value;
        let vn = (k - 1.0) * (n - 1.0) * (k * value * fc + a).powi(2);
        let vd = (n - 1.0) * k * k * value * value * fc * fc + a * a;
        vn / vd
    };
    let f_u = f_quantile(1.0 - alpha / 2.0, n - 1.0, v)?;
    let f_l = f_quantile(1.0 - alpha / 2.0, v, n - 1.0)?;
    let c = k * msj + (k * n - k - n) * mse;
    let low = n * (msb - f_u * mse) / (f_u * c + n * msb);
    let high = n * (f_l * msb - mse) / (c + n * f_l * msb);
    Ok((low, high))
}

fn bootstrap_interval(
    rows: &[[f64; 2]],
    confidence: f64,
    resamples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if resamples == 0 {
        return Err(Error::validation("resamples", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rows.len();
    let mut values = Vec::with_capacity(resamples);
    let mut sample = vec![[0.0; 2]; n];
    for _ in 0..resamples {
        for s in sample.iter_mut() {
            *s = rows[rng.random_range(0..n)];
        }
        // Resamples without subject spread have no ICC; skip them.
        if let Ok((v, ..)) = icc_point(&sample) {
            values.push(v);
        }
    }
    if values.is_empty() {
        return Err(Error::UndefinedIcc(
            "every bootstrap resample was degenerate".into(),
        ));
    }
    values.sort_by(f64::total_cmp);
    let alpha = 1.0 - confidence;
    Ok((
        crate::interpret::percentile(&values, alpha / 2.0),
        crate::interpret::percentile(&values, 1.0 - alpha / 2.0),
    ))
}

/// Scores keyed by subject id.
pub type ScoreTable = BTreeMap<String, f64>;

/// Read a `subject_id,score` CSV.
pub fn read_score_csv(path: &Path) -> Result<ScoreTable> {
    #[derive(Deserialize)]
    struct Row {
        subject_id: String,
        score: f64,
    }
    let parse = |message: String| Error::Parse {
        context: path.display().to_string(),
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => parse(format!("{other:?}")),
    })?;
    let mut table = ScoreTable::new();
    for (i, row) in reader.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| parse(format!("row {}: {e}", i + 1)))?;
        if !row.score.is_finite() {
            return Err(parse(format!("row {}: score is not finite", i + 1)));
        }
        if table.insert(row.subject_id.clone(), row.score).is_some() {
            return Err(parse(format!("duplicate subject {}", row.subject_id)));
        }
    }
    Ok(table)
}

pub fn write_score_csv(path: &Path, table: &ScoreTable) -> Result<()> {
    let mut text = String::from("subject_id,score\n");
    for (id, score) in table {
        writeln!(text, "{id},{score}").expect("string write");
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub a: String,
    pub b: String,
    pub icc: IccResult,
    pub mae: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub confidence: f64,
    pub method: CiMethod,
    pub rows: Vec<ComparisonRow>,
    /// Free-form echo of the run configuration.
    #[serde(default)]
    pub config: serde_json::Value,
}

pub fn compare(pairs: &RatingPairs, confidence: f64, method: CiMethod) -> Result<ComparisonRow> {
    let (mae, std) = mae_std(pairs)?;
    Ok(ComparisonRow {
        a: pairs.label_a.clone(),
        b: pairs.label_b.clone(),
        icc: icc(pairs, confidence, method)?,
        mae,
        std,
    })
}

/// Model against every rater, then every rater pair in the given order.
pub fn build_report(
    model: &ScoreTable,
    raters: &[(String, ScoreTable)],
    confidence: f64,
    method: CiMethod,
) -> Result<MetricsReport> {
    let mut rows = Vec::new();
    for (name, table) in raters {
        let pairs = RatingPairs::from_tables("model", model, name, table)?;
        rows.push(compare(&pairs, confidence, method)?);
    }
    for (i, (na, ta)) in raters.iter().enumerate() {
        for (nb, tb) in &raters[i + 1..] {
            let pairs = RatingPairs::from_tables(na, ta, nb, tb)?;
            rows.push(compare(&pairs, confidence, method)?);
        }
    }
    Ok(MetricsReport {
        confidence,
        method,
        rows,
        config: serde_json::Value::Null,
    })
}

impl MetricsReport {
    /// Plain-text table: comparison, ICC with interval, MAE with spread.
    pub fn render_table(&self) -> String {
        let pct = (self.confidence * 100.0).round();
        let header_icc = format!("ICC [CI{pct}%]");
        let lines: Vec<(String, String, String)> = self
            .rows
            .iter()
            .map(|r| {
                (
                    format!("{} vs {}", r.a, r.b),
                    format!(
                        "{:.3} [{:.3}, {:.3}]",
                        r.icc.value, r.icc.ci_low, r.icc.ci_high
                    ),
                    format!("{:.2} ± {:.2}", r.mae, r.std),
                )
            })
            .collect();
        let w0 = lines
            .iter()
            .map(|l| l.0.chars().count())
            .max()
            .unwrap_or(0)
            .max(10);
        let w1 = lines
            .iter()
            .map(|l| l.1.chars().count())
            .max()
            .unwrap_or(0)
            .max(header_icc.len());
        let mut out = String::new();
        writeln!(out, "{:<w0$}  {:<w1$}  MAE ± STD", "Comparison", header_icc).unwrap();
        writeln!(out, "{}", "-".repeat(w0 + w1 + 13)).unwrap();
        for (a, b, c) in lines {
            writeln!(out, "{a:<w0$}  {b:<w1$}  {c}").unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(a: &[f64], b: &[f64]) -> RatingPairs {
        RatingPairs::new("a", "b", a, b).unwrap()
    }

    #[test]
    fn mae_std_examples() {
        assert_eq!(
            mae_std(&pairs(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0])).unwrap(),
            (0.0, 0.0)
        );
        assert_eq!(
            mae_std(&pairs(&[0.0, 10.0], &[10.0, 0.0])).unwrap(),
            (10.0, 0.0)
        );
    }

    #[test]
    fn perfect_agreement() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        let r = icc(&pairs(&v, &v), 0.95, CiMethod::FDistribution).unwrap();
        assert_eq!((r.value, r.ci_low, r.ci_high), (1.0, 1.0, 1.0));
    }

    #[test]
    fn hand_computed_four_by_two() {
        // Rows (1,2) (2,3) (3,4) (4,5): MSR = 10/3, MSC = 2, MSE = 0.
        // ICC = (10/3) / (10/3 + 2*2/4) = 10/13.
        let r = icc(
            &pairs(&[1.0, 2.0, 3.0, 4.0], &[2.0, 3.0, 4.0, 5.0]),
            0.95,
            CiMethod::FDistribution,
        )
        .unwrap();
        assert!((r.value - 10.0 / 13.0).abs() < 1e-12);
        assert!(r.ci_low <= r.value && r.value <= r.ci_high);
    }

    #[test]
    fn constant_columns_are_undefined() {
        let err = icc(&pairs(&[3.0; 5], &[4.0; 5]), 0.95, CiMethod::FDistribution);
        assert!(matches!(err, Err(Error::UndefinedIcc(_))));
    }

    #[test]
    fn matches_reference_values() {
        // Reference values from numpy mean squares and scipy F quantiles.
        let a = [9.0, 6.0, 8.0, 7.0, 10.0, 6.0];
        let b = [2.0, 1.0, 4.0, 1.0, 5.0, 2.0];
        let r = icc(&pairs(&a, &b), 0.95, CiMethod::FDistribution).unwrap();
        assert!((r.value - 0.1256544502617801).abs() < 1e-12, "{r:?}");
        assert!((r.ci_low - -0.023653221543257066).abs() < 1e-6, "{r:?}");
        assert!((r.ci_high - 0.5998514840379153).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn bootstrap_interval_brackets_estimate() {
        let a: Vec<f64> = (0..30).map(|i| i as f64 + (i % 3) as f64).collect();
        let b: Vec<f64> = (0..30).map(|i| i as f64 * 1.1 - (i % 4) as f64).collect();
        let r = icc(&pairs(&a, &b), 0.95, CiMethod::bootstrap(1)).unwrap();
        assert!(r.ci_low < r.value && r.value < r.ci_high, "{r:?}");
    }

    #[test]
    fn report_rows_and_mismatch() {
        let model: ScoreTable = (0..6).map(|i| (format!("s{i}"), i as f64 * 2.0)).collect();
        let ra = model.clone();
        let rb: ScoreTable = model
            .iter()
            .map(|(k, v)| (k.clone(), v + 1.0 + (v / 3.0).sin()))
            .collect();
        let rep = build_report(
            &model,
            &[("rater_A".into(), ra), ("rater_B".into(), rb.clone())],
            0.95,
            CiMethod::FDistribution,
        )
        .unwrap();
        let names: Vec<(&str, &str)> = rep
            .rows
            .iter()
            .map(|r| (r.a.as_str(), r.b.as_str()))
            .collect();
        assert_eq!(
            names,
            vec![
                ("model", "rater_A"),
                ("model", "rater_B"),
                ("rater_A", "rater_B")
            ]
        );
        assert_eq!(rep.rows[0].icc.value, 1.0);
        assert_eq!(rep.rows[0].mae, 0.0);
        assert!(rep.render_table().contains("model vs rater_B"));

        let mut short = rb;
        short.remove("s0");
        assert!(build_report(
            &model,
            &[("r".into(), short)],
            0.95,
            CiMethod::FDistribution
        )
        .is_err());
    }
}
