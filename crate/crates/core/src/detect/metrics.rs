use serde::{Deserialize, Serialize};

/// Confusion counts with abnormal as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_pairs(labels: &[bool], predicted: &[bool]) -> Self {
        assert_eq!(labels.len(), predicted.len(), "labels and predictions differ in length");
        let mut c = Self::default();
        for (&y, &p) in labels.iter().zip(predicted) {
            c.add(y, p);
        }
        c
    }

    pub fn add(&mut self, label: bool, predicted: bool) {
        match (label, predicted) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// TP / (TP + FP), or 0 when nothing was predicted positive.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// TP / (TP + FN), or 0 when there are no positives.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// Harmonic mean of precision and recall, computed from the counts as
    /// 2TP / (2TP + FP + FN); 0 when TP is 0.
    pub fn f1(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Threshold on `scores` (abnormal iff score > threshold) that maximizes F1
/// against `labels`, with the F1 it reaches. Ties go to the larger
/// threshold.
pub fn best_f1_threshold(scores: &[f64], labels: &[bool]) -> (f64, f64) {
    assert_eq!(scores.len(), labels.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let positives = labels.iter().filter(|&&y| y).count();
    let mut best = (f64::INFINITY, 0.0);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        // Move every sample with this score above the threshold at once.
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let c = Confusion {
            tp,
            fp,
            tn: 0,
            fn_: positives - tp,
        };
        if c.f1() > best.1 {
            let next = order.get(i).map(|&j| scores[j]);
            let threshold = match next {
                Some(n) => (s + n) / 2.0,
                None => s - 1.0f64.max(s.abs()) * 1e-9 - f64::MIN_POSITIVE,
            };
            best = (threshold, c.f1());
        }
    }
    best
}
