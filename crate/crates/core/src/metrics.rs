//! Length-error algebra.
//!
//! Rates are relative errors over a reference count. The total error `E` is
//! decomposed into identifying (`e_I`), counting (`e_C^n`), planning (`e_P`)
//! and aligning (`e_A^n`) parts; each part's absolute contribution is its
//! share of the sum, scaled to `E^n`, so the contributions add up to `E^n`.
//!
//! Subtractive rates (`e_I` minus the control rate, `e_C^n` = `e_IC^n` -
//! `e_I`) are floored at zero; [`ErrorReport::floored`] lists every floored
//! quantity.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{what} must be at least 1")]
    ZeroDenominator { what: &'static str },
    #[error("error parts sum to zero but the total error is {total}")]
    DegenerateSum { total: f64 },
    #[error("interval 1 is required to compute the identifying error")]
    MissingIntervalOne,
    #[error("range needs min <= max, got {min}..{max}")]
    BadRange { min: usize, max: usize },
    #[error("no counts given")]
    Empty,
    #[error("need at least {needed} records, got {got}")]
    TooFewRecords { needed: usize, got: usize },
    #[error("design matrix is rank deficient at column {column}")]
    RankDeficient { column: String },
}

fn rate(a: usize, b: usize, what: &'static str) -> Result<f64, MetricsError> {
    if b == 0 {
        return Err(MetricsError::ZeroDenominator { what });
    }
    Ok(a.abs_diff(b) as f64 / b as f64)
}

/// `|N_true - N_target| / N_target`.
pub fn lctg_error(n_true: usize, n_target: usize) -> Result<f64, MetricsError> {
    rate(n_true, n_target, "target length")
}

/// `|N_pred^1 - N_true| / N_true - control_rate`, floored at 0.
pub fn identifying_error(
    n_pred_1: usize,
    n_true: usize,
    control_rate: f64,
) -> Result<f64, MetricsError> {
    Ok((rate(n_pred_1, n_true, "true length")? - control_rate).max(0.0))
}

/// `|N_pred^n - N_true| / N_true`: identifying and counting error together.
pub fn identifying_counting_error(n_pred_n: usize, n_true: usize) -> Result<f64, MetricsError> {
    rate(n_pred_n, n_true, "true length")
}

/// `e_IC^n - e_I`, floored at 0.
pub fn counting_error(n_pred_n: usize, n_true: usize, e_i: f64) -> Result<f64, MetricsError> {
    Ok((identifying_counting_error(n_pred_n, n_true)? - e_i).max(0.0))
}

/// `|N_plan - N_target| / N_target`.
pub fn planning_error(n_plan: usize, n_target: usize) -> Result<f64, MetricsError> {
    rate(n_plan, n_target, "target length")
}

/// `|N_pred^n - N_target| / N_target`.
pub fn aligning_error(n_pred_n: usize, n_target: usize) -> Result<f64, MetricsError> {
    rate(n_pred_n, n_target, "target length")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Contributions {
    pub identifying: f64,
    pub counting: f64,
    pub planning: f64,
    pub aligning: f64,
}

impl Contributions {
    pub fn sum(&self) -> f64 {
        self.identifying + self.counting + self.planning + self.aligning
    }
}

/// `e_i / (e_I + e_C + e_P + e_A) * E` for each part. All zero when both
/// the parts and `E` are zero.
pub fn contributions(
    e_i: f64,
    e_c: f64,
    e_p: f64,
    e_a: f64,
    total: f64,
) -> Result<Contributions, MetricsError> {
    let sum = e_i + e_c + e_p + e_a;
    if sum <= 0.0 {
        if total == 0.0 {
            return Ok(Contributions {
                identifying: 0.0,
                counting: 0.0,
                planning: 0.0,
                aligning: 0.0,
            });
        }
        return Err(MetricsError::DegenerateSum { total });
    }
    let identifying = e_i / sum * total;
    let counting = e_c / sum * total;
    let planning = e_p / sum * total;
    // The last share takes the rounding remainder so the four add up to E.
    let aligning = total - identifying - counting - planning;
    Ok(Contributions {
        identifying,
        counting,
        planning,
        aligning: aligning.max(0.0),
    })
}

/// Fraction of counts outside `[min, max]`.
pub fn range_error_rate(counts: &[usize], min: usize, max: usize) -> Result<f64, MetricsError> {
    if min > max {
        return Err(MetricsError::BadRange { min, max });
    }
    if counts.is_empty() {
        return Err(MetricsError::Empty);
    }
    let outside = counts.iter().filter(|&&c| c < min || c > max).count();
    Ok(outside as f64 / counts.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorInputs {
    pub n_true: usize,
    pub n_target: usize,
    /// Final count declared by the model when counting every `n` units.
    pub n_pred: BTreeMap<usize, usize>,
    pub n_plan: Option<usize>,
    /// Error rate of the letter control at interval 1.
    pub control_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalErrors {
    pub e_c: f64,
    pub e_a: f64,
    /// Total error attributed at this interval.
    pub total: f64,
    pub contributions: Option<Contributions>,
    /// Error left unattributed because all parts are zero.
    pub unattributed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub e: f64,
    pub e_i: f64,
    pub e_p: f64,
    pub intervals: BTreeMap<usize, IntervalErrors>,
    /// Quantities that went negative before flooring, e.g. `e_I` or `e_C^16`.
    pub floored: Vec<String>,
}

fn interval_errors(e_i: f64, e_c: f64, e_p: f64, e_a: f64, total: f64) -> IntervalErrors {
    match contributions(e_i, e_c, e_p, e_a, total) {
        Ok(c) => IntervalErrors {
            e_c,
            e_a,
            total,
            contributions: Some(c),
            unattributed: 0.0,
        },
        Err(_) => IntervalErrors {
            e_c,
            e_a,
            total,
            contributions: None,
            unattributed: total,
        },
    }
}

/// Full decomposition for one item.
pub fn decompose(inputs: &ErrorInputs) -> Result<ErrorReport, MetricsError> {
    let e = lctg_error(inputs.n_true, inputs.n_target)?;
    let mut floored = Vec::new();
    let e_i = if inputs.n_pred.is_empty() {
        0.0
    } else {
        let p1 = *inputs
            .n_pred
            .get(&1)
            .ok_or(MetricsError::MissingIntervalOne)?;
        let raw = rate(p1, inputs.n_true, "true length")? - inputs.control_rate;
        if raw < 0.0 {
            floored.push("e_I".to_string());
        }
        raw.max(0.0)
    };
    let e_p = match inputs.n_plan {
        Some(p) => planning_error(p, inputs.n_target)?,
        None => 0.0,
    };
    let mut intervals = BTreeMap::new();
    for (&n, &pred) in &inputs.n_pred {
        let e_ic = identifying_counting_error(pred, inputs.n_true)?;
        if e_ic - e_i < 0.0 {
            floored.push(format!("e_C^{n}"));
        }
        let e_c = (e_ic - e_i).max(0.0);
        let e_a = aligning_error(pred, inputs.n_target)?;
        intervals.insert(n, interval_errors(e_i, e_c, e_p, e_a, e));
    }
    Ok(ErrorReport {
        e,
        e_i,
        e_p,
        intervals,
        floored,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Mean of each rate over items; contributions are recomputed from the
/// means so they still add up to the mean total. Floor flags are counted
/// as `name (k items)`.
pub fn aggregate(reports: &[ErrorReport]) -> ErrorReport {
    let e = mean(reports.iter().map(|r| r.e));
    let e_i = mean(reports.iter().map(|r| r.e_i));
    let e_p = mean(reports.iter().map(|r| r.e_p));
    let ns: BTreeSet<usize> = reports
        .iter()
        .flat_map(|r| r.intervals.keys().copied())
        .collect();
    let mut intervals = BTreeMap::new();
    for n in ns {
        let rows: Vec<&IntervalErrors> =
            reports.iter().filter_map(|r| r.intervals.get(&n)).collect();
        let e_c = mean(rows.iter().map(|x| x.e_c));
        let e_a = mean(rows.iter().map(|x| x.e_a));
        let total = mean(rows.iter().map(|x| x.total));
        intervals.insert(n, interval_errors(e_i, e_c, e_p, e_a, total));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in reports {
        for f in &r.floored {
            *counts.entry(f.as_str()).or_default() += 1;
        }
    }
    ErrorReport {
        e,
        e_i,
        e_p,
        intervals,
        floored: counts
            .into_iter()
            .map(|(k, v)| format!("{k} ({v} items)"))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub score: f64,
    pub method_id: String,
    pub model_id: String,
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthBiasFit {
    /// Design column names: `intercept`, `method=<id>`, `model=<id>`, `length`.
    pub columns: Vec<String>,
    pub coefficients: Vec<f64>,
    pub beta_length: f64,
    /// `score - beta_length * (length - reference_length)` per record.
    pub adjusted: Vec<f64>,
    pub residuals: Vec<f64>,
    /// Whether the pseudo-inverse was needed because the normal equations
    /// were numerically singular.
    pub used_pseudo_inverse: bool,
}

const RANK_TOL: f64 = 1e-10;

/// Builds the design matrix: intercept, one dummy per non-baseline method
/// and model (baseline = lexicographically first id), then length.
pub fn design_matrix(records: &[ScoreRecord]) -> (Vec<String>, DMatrix<f64>) {
    let methods: BTreeSet<&str> = records.iter().map(|r| r.method_id.as_str()).collect();
    let models: BTreeSet<&str> = records.iter().map(|r| r.model_id.as_str()).collect();
    let mut columns = vec!["intercept".to_string()];
    columns.extend(methods.iter().skip(1).map(|m| format!("method={m}")));
    columns.extend(models.iter().skip(1).map(|m| format!("model={m}")));
    columns.push("length".to_string());
    let method_cols: Vec<&str> = methods.iter().skip(1).copied().collect();
    let model_cols: Vec<&str> = models.iter().skip(1).copied().collect();
    let x = DMatrix::from_fn(records.len(), columns.len(), |i, j| {
        let r = &records[i];
        if j == 0 {
            return 1.0;
        }
        let j = j - 1;
        if j < method_cols.len() {
            return (r.method_id == method_cols[j]) as u8 as f64;
        }
        let j = j - method_cols.len();
        if j < model_cols.len() {
            return (r.model_id == model_cols[j]) as u8 as f64;
        }
        r.length
    });
    (columns, x)
}

/// First column that is (numerically) a combination of the earlier ones.
fn dependent_column(x: &DMatrix<f64>) -> Option<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let scale = col.norm().max(1.0);
        let mut v = col;
        for b in &basis {
            let proj = b.dot(&v);
            v -= b * proj;
        }
        let norm = v.norm();
        if norm <= RANK_TOL * scale {
            return Some(j);
        }
        basis.push(v / norm);
    }
    None
}

/// Ordinary least squares of score on method and model dummies plus
/// length; scores are then moved to `reference_length`.
pub fn length_bias_correct(
    records: &[ScoreRecord],
    reference_length: f64,
) -> Result<LengthBiasFit, MetricsError> {
    let (columns, x) = design_matrix(records);
    let needed = columns.len() + 1;
    if records.len() < needed {
        return Err(MetricsError::TooFewRecords {
            needed,
            got: records.len(),
        });
    }
    if let Some(j) = dependent_column(&x) {
        return Err(MetricsError::RankDeficient {
            column: columns[j].clone(),
        });
    }
    let y = DVector::from_iterator(records.len(), records.iter().map(|r| r.score));
    let xt = x.transpose();
    let xtx = &xt * &x;
    let xty = &xt * &y;
    let (beta, used_pseudo_inverse) = match xtx.clone().cholesky() {
        Some(ch) => {
            let beta = ch.solve(&xty);
            // One refinement step against the residual.
            let correction = ch.solve(&(&xt * (&y - &x * &beta)));
            (beta + correction, false)
        }
        None => {
            let pinv =
                x.clone()
                    .pseudo_inverse(RANK_TOL)
                    .map_err(|_| MetricsError::RankDeficient {
                        column: "unknown".into(),
                    })?;
            (pinv * &y, true)
        }
    };
    let residuals = &y - &x * &beta;
    let beta_length = beta[beta.len() - 1];
    let adjusted = records
        .iter()
        .map(|r| r.score - beta_length * (r.length - reference_length))
        .collect();
    Ok(LengthBiasFit {
        columns,
        coefficients: beta.iter().copied().collect(),
        beta_length,
        adjusted,
        residuals: residuals.iter().copied().collect(),
        used_pseudo_inverse,
    })
}

/// Score from a judge reply containing `###score X`, X in 1..=5. The last
/// occurrence wins.
pub fn parse_judge_score(reply: &str) -> Option<u8> {
    reply.rmatch_indices("###score").find_map(|(i, m)| {
        let rest = reply[i + m.len()..].trim_start_matches([' ', ':', '\t']);
        let digit = rest.chars().next()?.to_digit(10)?;
        let next = rest.chars().nth(1);
        if next.is_some_and(|c| c.is_ascii_digit()) {
            return None;
        }
        (1..=5).contains(&digit).then_some(digit as u8)
    })
}
