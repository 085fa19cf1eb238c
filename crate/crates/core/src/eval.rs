//! Three-class confusion matrix and the accuracy / precision / recall / F1
//! report built from it.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sft::SentimentLabel;

/// Rows are gold classes, columns predicted classes, both in
/// (positive, negative, neutral) order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 3]; 3],
}

impl ConfusionMatrix {
    pub fn add(&mut self, gold: SentimentLabel, pred: SentimentLabel) {
        self.counts[gold.index()][pred.index()] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..3).map(|i| self.counts[i][i]).sum()
    }

    pub fn cell(&self, gold: SentimentLabel, pred: SentimentLabel) -> u64 {
        self.counts[gold.index()][pred.index()]
    }
}

/// Tallies gold/prediction pairs; `None` predictions (unparsed) are
/// counted separately and left out of the matrix.
pub fn confusion(golds: &[SentimentLabel], preds: &[Option<SentimentLabel>]) -> Result<(ConfusionMatrix, usize)> {
    if golds.len() != preds.len() {
        return Err(Error::Input(format!(
            "{} gold labels but {} predictions",
            golds.len(),
            preds.len()
        )));
    }
    if golds.is_empty() {
        return Err(Error::Input("no evaluation pairs".into()));
    }
    let mut cm = ConfusionMatrix::default();
    let mut unparsed = 0;
    for (&g, p) in golds.iter().zip(preds) {
        match p {
            Some(p) => cm.add(g, *p),
            None => unparsed += 1,
        }
    }
    Ok((cm, unparsed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: SentimentLabel,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Gold count for the class.
    pub support: u64,
    /// No gold and no predicted instance; all three scores are 0 by the
    /// 0/0 rule.
    pub absent: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Unweighted class mean; the headline figure.
    pub macro_avg: Averages,
    /// Gold-support-weighted mean.
    pub weighted_avg: Averages,
    pub n_evaluated: u64,
    pub n_unparsed: usize,
    pub confusion: ConfusionMatrix,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics(cm: &ConfusionMatrix, n_unparsed: usize) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Input("empty confusion matrix".into()));
    }
    let per_class: Vec<ClassMetrics> = SentimentLabel::ALL
        .iter()
        .map(|&label| {
            let i = label.index();
            let tp = cm.counts[i][i];
            let predicted: u64 = (0..3).map(|g| cm.counts[g][i]).sum();
            let support: u64 = cm.counts[i].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                label,
                precision,
                recall,
                f1,
                support,
                absent: predicted == 0 && support == 0,
            }
        })
        .collect();

    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / 3.0;
    let weighted = |f: fn(&ClassMetrics) -> f64| {
        per_class.iter().map(|c| f(c) * c.support as f64).sum::<f64>() / total as f64
    };
    Ok(MetricsReport {
        accuracy: ratio(cm.trace(), total),
        macro_avg: Averages {
            precision: mean(|c| c.precision),
            recall: mean(|c| c.recall),
            f1: mean(|c| c.f1),
        },
        weighted_avg: Averages {
            precision: weighted(|c| c.precision),
            recall: weighted(|c| c.recall),
            f1: weighted(|c| c.f1),
        },
        per_class,
        n_evaluated: total,
        n_unparsed,
        confusion: cm.clone(),
    })
}

/// Confusion plus metrics in one call.
pub fn evaluate_predictions(golds: &[SentimentLabel], preds: &[Option<SentimentLabel>]) -> Result<MetricsReport> {
    let (cm, unparsed) = confusion(golds, preds)?;
    metrics(&cm, unparsed)
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "evaluated {}  unparsed {}  accuracy {:.4}",
            self.n_evaluated, self.n_unparsed, self.accuracy
        )?;
        writeln!(f, "{:<10} {:>9} {:>9} {:>9} {:>8}", "class", "precision", "recall", "f1", "support")?;
        for c in &self.per_class {
            writeln!(
                f,
                "{:<10} {:>9.4} {:>9.4} {:>9.4} {:>8}{}",
                c.label.word(),
                c.precision,
                c.recall,
                c.f1,
                c.support,
                if c.absent { "  (absent)" } else { "" }
            )?;
        }
        for (name, a) in [("macro", &self.macro_avg), ("weighted", &self.weighted_avg)] {
            writeln!(f, "{:<10} {:>9.4} {:>9.4} {:>9.4}", name, a.precision, a.recall, a.f1)?;
        }
        writeln!(f, "confusion (rows gold, cols predicted: positive negative neutral)")?;
        for (label, row) in SentimentLabel::ALL.iter().zip(&self.confusion.counts) {
            writeln!(f, "{:<10} {:>8} {:>8} {:>8}", label.word(), row[0], row[1], row[2])?;
        }
        Ok(())
    }
}
