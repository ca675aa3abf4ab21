//! Window-level discrimination metrics, the alarm-silencing policy, operating
//! points and DeLong's test.

mod delong;
mod report;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use delong::{delong_test, DeLong};
pub use report::{write_roc_csv, Comparison, EvalReport, EvalSettings, PrPoint};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("metric undefined: only one class present")]
    SingleClass,
    #[error("metric undefined: no positive windows")]
    NoPositives,
    #[error("no windows to evaluate")]
    Empty,
    #[error("{what}: {left} scores but {right} labels")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("sensitivity {target} is unattainable (best {best})")]
    Unattainable { target: f64, best: f64 },
    #[error("non-finite score {0}")]
    NonFinite(f64),
}

fn check(scores: &[f64], labels: &[bool], what: &'static str) -> Result<(), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            what,
            left: scores.len(),
            right: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some(&s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(EvalError::NonFinite(s));
    }
    Ok(())
}

/// Average 1-based ranks with ties sharing their mean rank.
pub(crate) fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = 0.5 * ((i + 1) + (j + 1)) as f64;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Mann-Whitney AUC with ties counted one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    check(scores, labels, "roc_auc")?;
    let n1 = labels.iter().filter(|&&l| l).count();
    let n0 = labels.len() - n1;
    if n1 == 0 || n0 == 0 {
        return Err(EvalError::SingleClass);
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(r, _)| r)
        .sum();
    let n1f = n1 as f64;
    Ok((rank_sum - n1f * (n1f + 1.0) / 2.0) / (n1f * n0 as f64))
}

/// Indices sorted by descending score; equal scores keep input order.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Precision-recall points, one per distinct score, highest first.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<PrPoint>, EvalError> {
    check(scores, labels, "auc_pr")?;
    let total_pos = labels.iter().filter(|&&l| l).count();
    if total_pos == 0 {
        return Err(EvalError::NoPositives);
    }
    let order = descending(scores);
    let mut points = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += usize::from(labels[order[i]]);
            seen += 1;
            i += 1;
        }
        points.push(PrPoint {
            threshold: s,
            recall: tp as f64 / total_pos as f64,
            precision: tp as f64 / seen as f64,
        });
    }
    Ok(points)
}

/// Average precision. Windows tied on score are ranked together, so each
/// positive in a tie group receives the precision at the group's end.
pub fn auc_pr(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for p in pr_curve(scores, labels)? {
        ap += (p.recall - prev_recall) * p.precision;
        prev_recall = p.recall;
    }
    Ok(ap)
}

/// Alarms fired for one patient and the windows that were not silenced.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlarmTrace {
    pub alarms: Vec<usize>,
    pub retained: Vec<usize>,
}

/// Forward scan: an unsilenced window scoring at least `threshold` fires and
/// silences the following `silence_hours` windows.
pub fn apply_silencing(scores: &[f64], threshold: f64, silence_hours: usize) -> AlarmTrace {
    let mut trace = AlarmTrace::default();
    let mut next_free = 0usize;
    for (t, &s) in scores.iter().enumerate() {
        if t < next_free {
            continue;
        }
        trace.retained.push(t);
        if s >= threshold {
            trace.alarms.push(t);
            next_free = t + 1 + silence_hours;
        }
    }
    trace
}

/// One patient's evaluable windows in hour order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPatient {
    pub patient_id: String,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoredCohort {
    pub patients: Vec<ScoredPatient>,
}

impl ScoredCohort {
    pub fn pooled(&self) -> (Vec<f64>, Vec<bool>) {
        let scores = self
            .patients
            .iter()
            .flat_map(|p| p.scores.iter().copied())
            .collect();
        let labels = self
            .patients
            .iter()
            .flat_map(|p| p.labels.iter().copied())
            .collect();
        (scores, labels)
    }

    pub fn window_count(&self) -> usize {
        self.patients.iter().map(|p| p.scores.len()).sum()
    }

    fn validate(&self) -> Result<(), EvalError> {
        for p in &self.patients {
            check(&p.scores, &p.labels, "scored patient").or_else(|e| match e {
                EvalError::Empty => Ok(()),
                other => Err(other),
            })?;
        }
        if self.window_count() == 0 {
            return Err(EvalError::Empty);
        }
        Ok(())
    }
}

/// Pooled confusion counts over retained windows at one threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: i64,
    pub fp: i64,
    pub fn_: i64,
    pub tn: i64,
}

impl Confusion {
    fn rate(num: i64, den: i64) -> f64 {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }

    pub fn sensitivity(&self) -> f64 {
        Self::rate(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> f64 {
        Self::rate(self.tn, self.tn + self.fp)
    }

    pub fn false_positive_rate(&self) -> f64 {
        Self::rate(self.fp, self.fp + self.tn)
    }

    pub fn ppv(&self) -> f64 {
        Self::rate(self.tp, self.tp + self.fp)
    }

    /// Alarms fired: every retained window at or above the threshold fires.
    pub fn alarms(&self) -> i64 {
        self.tp + self.fp
    }

    fn add(&mut self, o: &Confusion, sign: i64) {
        self.tp += sign * o.tp;
        self.fp += sign * o.fp;
        self.fn_ += sign * o.fn_;
        self.tn += sign * o.tn;
    }
}

pub fn confusion_at(
    scores: &[f64],
    labels: &[bool],
    threshold: f64,
    silence_hours: usize,
) -> Confusion {
    let trace = apply_silencing(scores, threshold, silence_hours);
    let mut c = Confusion::default();
    for &t in &trace.retained {
        match (labels[t], scores[t] >= threshold) {
            (true, true) => c.tp += 1,
            (true, false) => c.fn_ += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

/// Pooled confusion at every distinct observed score, highest first.
///
/// A patient's trace changes only at thresholds equal to one of its own
/// scores, so each patient contributes a count delta at those grid points
/// and the totals are a running sum down the grid.
pub fn policy_sweep(
    cohort: &ScoredCohort,
    silence_hours: usize,
) -> Result<Vec<(f64, Confusion)>, EvalError> {
    cohort.validate()?;
    let mut grid: Vec<f64> = cohort
        .patients
        .iter()
        .flat_map(|p| p.scores.iter().copied())
        .collect();
    grid.sort_by(|a, b| b.total_cmp(a));
    grid.dedup();
    let position = |s: f64| {
        grid.binary_search_by(|g| s.total_cmp(g))
            .expect("every score is on the grid")
    };
    let mut deltas = vec![Confusion::default(); grid.len()];
    let mut base = Confusion::default();
    for p in &cohort.patients {
        let pos = p.labels.iter().filter(|&&l| l).count() as i64;
        let mut prev = Confusion {
            fn_: pos,
            tn: p.labels.len() as i64 - pos,
            ..Confusion::default()
        };
        base.add(&prev, 1);
        let mut own = p.scores.clone();
        own.sort_by(|a, b| b.total_cmp(a));
        own.dedup();
        for s in own {
            let c = confusion_at(&p.scores, &p.labels, s, silence_hours);
            let d = &mut deltas[position(s)];
            d.add(&c, 1);
            d.add(&prev, -1);
            prev = c;
        }
    }
    let mut running = base;
    Ok(grid
        .into_iter()
        .zip(deltas)
        .map(|(s, d)| {
            running.add(&d, 1);
            (s, running)
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// `None` marks the +inf and -inf endpoints.
    pub threshold: Option<f64>,
    pub tpr: f64,
    pub fpr: f64,
}

/// ROC points under the policy: (0, 0), one point per distinct score in
/// descending order, then (1, 1).
pub fn policy_curve(
    cohort: &ScoredCohort,
    silence_hours: usize,
) -> Result<Vec<RocPoint>, EvalError> {
    let sweep = policy_sweep(cohort, silence_hours)?;
    let (_, labels) = cohort.pooled();
    let n1 = labels.iter().filter(|&&l| l).count();
    if n1 == 0 || n1 == labels.len() {
        return Err(EvalError::SingleClass);
    }
    let mut points = vec![RocPoint {
        threshold: None,
        tpr: 0.0,
        fpr: 0.0,
    }];
    points.extend(sweep.iter().map(|(s, c)| RocPoint {
        threshold: Some(*s),
        tpr: c.sensitivity(),
        fpr: c.false_positive_rate(),
    }));
    points.push(RocPoint {
        threshold: None,
        tpr: 1.0,
        fpr: 1.0,
    });
    Ok(points)
}

/// Trapezoid area of the curve traversed in threshold order.
pub fn trapezoid(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) * 0.5)
        .sum()
}

pub fn policy_auc(cohort: &ScoredCohort, silence_hours: usize) -> Result<f64, EvalError> {
    Ok(trapezoid(&policy_curve(cohort, silence_hours)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub ppv: f64,
    /// Retained negative windows at or above the threshold.
    pub fp_count: i64,
    /// Alarms fired across the cohort.
    pub alarm_count: i64,
}

/// Highest threshold whose pooled retained-window sensitivity reaches
/// `target_sensitivity`.
pub fn operating_point(
    cohort: &ScoredCohort,
    target_sensitivity: f64,
    silence_hours: usize,
) -> Result<OperatingPoint, EvalError> {
    let sweep = policy_sweep(cohort, silence_hours)?;
    let mut best = 0.0f64;
    for (s, c) in &sweep {
        let sens = c.sensitivity();
        best = best.max(sens);
        if sens >= target_sensitivity {
            return Ok(OperatingPoint {
                threshold: *s,
                sensitivity: sens,
                specificity: c.specificity(),
                ppv: c.ppv(),
                fp_count: c.fp,
                alarm_count: c.alarms(),
            });
        }
    }
    Err(EvalError::Unattainable {
        target: target_sensitivity,
        best,
    })
}
