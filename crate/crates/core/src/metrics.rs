//! Ranking and classification metrics.

use serde::Serialize;

use crate::error::{Error, Result};

/// Candidate indices ordered by descending score, ties by index.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Fraction of positives ranked within the top `k` of exactly `n`
/// candidates.
pub fn recall_at_k(scores: &[f64], labels: &[u8], n: usize, k: usize) -> Result<f64> {
    if scores.len() != n || labels.len() != n {
        return Err(Error::shape(
            "recall_at_k",
            format!("expected {n} candidates, got {} scores and {} labels", scores.len(), labels.len()),
        ));
    }
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 {
        return Err(Error::Invalid("recall_at_k needs at least one positive".into()));
    }
    let hits = ranking(scores).iter().take(k).filter(|&&i| labels[i] == 1).count();
    Ok(hits as f64 / positives as f64)
}

/// Average precision, reciprocal rank and precision at 1 of one list.
pub fn ap_rr_p1(scores: &[f64], labels: &[u8]) -> Result<(f64, f64, f64)> {
    if scores.is_empty() {
        return Err(Error::Empty("ranked list"));
    }
    if scores.len() != labels.len() {
        return Err(Error::shape("ap_rr_p1", "scores and labels differ in length"));
    }
    let order = ranking(scores);
    let (mut hits, mut ap, mut rr) = (0usize, 0.0, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            ap += hits as f64 / (rank + 1) as f64;
            if hits == 1 {
                rr = 1.0 / (rank + 1) as f64;
            }
        }
    }
    if hits == 0 {
        return Err(Error::Invalid("ranked list has no positive".into()));
    }
    let p1 = if labels[order[0]] == 1 { 1.0 } else { 0.0 };
    Ok((ap / hits as f64, rr, p1))
}

/// `(MAP, MRR, P@1)` averaged over lists.
pub fn map_mrr_p1(lists: &[(Vec<f64>, Vec<u8>)]) -> Result<(f64, f64, f64)> {
    if lists.is_empty() {
        return Err(Error::Empty("ranked lists"));
    }
    let mut sum = (0.0, 0.0, 0.0);
    for (s, y) in lists {
        let (a, r, p) = ap_rr_p1(s, y)?;
        sum = (sum.0 + a, sum.1 + r, sum.2 + p);
    }
    let n = lists.len() as f64;
    Ok((sum.0 / n, sum.1 / n, sum.2 / n))
}

pub fn accuracy(predictions: &[usize], golds: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    if predictions.len() != golds.len() {
        return Err(Error::shape("accuracy", "predictions and golds differ in length"));
    }
    let correct = predictions.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Metrics over a whole evaluation set. Recall columns are `None` when
/// lists do not have the matching candidate count.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricReport {
    pub examples: usize,
    pub n: usize,
    pub r_at_1: Option<f64>,
    pub r_at_2: Option<f64>,
    pub r_at_5: Option<f64>,
    pub map: Option<f64>,
    pub mrr: Option<f64>,
    pub p_at_1: Option<f64>,
    pub accuracy: Option<f64>,
}

pub const REPORT_COLUMNS: [&str; 9] = ["examples", "n", "r_at_1", "r_at_2", "r_at_5", "map", "mrr", "p_at_1", "accuracy"];

impl MetricReport {
    /// Response-selection report over scored candidate lists. Lists without
    /// a positive are skipped.
    pub fn ranking(lists: &[(Vec<f64>, Vec<u8>)]) -> Result<Self> {
        let lists: Vec<_> = lists.iter().filter(|(_, y)| y.contains(&1)).cloned().collect();
        if lists.is_empty() {
            return Err(Error::Empty("lists with a positive"));
        }
        let n = lists[0].0.len();
        let uniform = lists.iter().all(|(s, _)| s.len() == n);
        let recall = |k: usize| -> Result<Option<f64>> {
            if !uniform || k > n {
                return Ok(None);
            }
            let total: f64 = lists.iter().map(|(s, y)| recall_at_k(s, y, n, k)).sum::<Result<f64>>()?;
            Ok(Some(total / lists.len() as f64))
        };
        let (map, mrr, p1) = map_mrr_p1(&lists)?;
        Ok(Self {
            examples: lists.len(),
            n: if uniform { n } else { 0 },
            r_at_1: recall(1)?,
            r_at_2: recall(2)?,
            r_at_5: recall(5)?,
            map: Some(map),
            mrr: Some(mrr),
            p_at_1: Some(p1),
            accuracy: None,
        })
    }

    pub fn classification(predictions: &[usize], golds: &[usize], n_options: usize) -> Result<Self> {
        Ok(Self {
            examples: predictions.len(),
            n: n_options,
            accuracy: Some(accuracy(predictions, golds)?),
            ..Self::default()
        })
    }

    /// The model-selection metric: `R@1` for ranking, accuracy otherwise.
    pub fn primary(&self) -> f64 {
        self.r_at_1.or(self.accuracy).or(self.p_at_1).unwrap_or(0.0)
    }

    pub fn csv_header() -> String {
        REPORT_COLUMNS.join(",")
    }

    /// Values in [`REPORT_COLUMNS`] order; absent metrics are empty.
    pub fn csv_row(&self) -> String {
        let f = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
        [
            self.examples.to_string(),
            self.n.to_string(),
            f(self.r_at_1),
            f(self.r_at_2),
            f(self.r_at_5),
            f(self.map),
            f(self.mrr),
            f(self.p_at_1),
            f(self.accuracy),
        ]
        .join(",")
    }

    /// Human-readable summary.
    pub fn table(&self) -> String {
        let mut out = format!("examples  {}\n", self.examples);
        let rows = [
            (format!("R{}@1", self.n), self.r_at_1),
            (format!("R{}@2", self.n), self.r_at_2),
            (format!("R{}@5", self.n), self.r_at_5),
            ("MAP".to_string(), self.map),
            ("MRR".to_string(), self.mrr),
            ("P@1".to_string(), self.p_at_1),
            ("accuracy".to_string(), self.accuracy),
        ];
        for (name, v) in rows {
            if let Some(v) = v {
                out.push_str(&format!("{name:<9} {v:.4}\n"));
            }
        }
        out
    }
}
