//! Evaluation metrics: support-weighted multi-label F1, top-1 accuracy and
//! mean IoU.

/// Support-weighted F1 (in percent) of multi-label predictions thresholded
/// at 0.5 on the sigmoid, i.e. at logit 0.
pub fn weighted_f1(logits: &[Vec<f64>], labels: &[Vec<usize>], classes: usize) -> f64 {
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fne = vec![0usize; classes];
    for (row, lab) in logits.iter().zip(labels) {
        for c in 0..classes {
            let truth = lab.contains(&c);
            let pred = row[c] > 0.0;
            match (pred, truth) {
                (true, true) => tp[c] += 1,
                (true, false) => fp[c] += 1,
                (false, true) => fne[c] += 1,
                _ => {}
            }
        }
    }
    let support: usize = (0..classes).map(|c| tp[c] + fne[c]).sum();
    if support == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for c in 0..classes {
        let s = tp[c] + fne[c];
        if s == 0 {
            continue;
        }
        let f1 = 2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fne[c]) as f64;
        acc += f1 * s as f64;
    }
    100.0 * acc / support as f64
}

/// Percentage of samples whose highest logit is one of their labels.
pub fn top1_accuracy(logits: &[Vec<f64>], labels: &[Vec<usize>]) -> f64 {
    if logits.is_empty() {
        return 0.0;
    }
    let hits = logits
        .iter()
        .zip(labels)
        .filter(|(row, lab)| {
            let best = row.iter().enumerate().fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            lab.contains(&best)
        })
        .count();
    100.0 * hits as f64 / logits.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Confusion {
    pub classes: usize,
    /// `counts[truth * classes + pred]`
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    /// Pixels with an ignored label are skipped.
    pub fn add(&mut self, truth: &[usize], pred: &[usize], ignored: &[usize]) {
        for (&t, &p) in truth.iter().zip(pred) {
            if ignored.contains(&t) || t >= self.classes || p >= self.classes {
                continue;
            }
            self.counts[t * self.classes + p] += 1;
        }
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }

    /// Mean IoU in percent over non-ignored classes that occur in the
    /// labels or the predictions.
    pub fn miou(&self, ignored: &[usize]) -> f64 {
        let n = self.classes;
        let mut sum = 0.0;
        let mut count = 0;
        for c in (0..n).filter(|c| !ignored.contains(c)) {
            let tp = self.counts[c * n + c];
            let row: u64 = (0..n).map(|p| self.counts[c * n + p]).sum();
            let col: u64 = (0..n).filter(|t| !ignored.contains(t)).map(|t| self.counts[t * n + c]).sum();
            let union = row + col - tp;
            if union == 0 {
                continue;
            }
            sum += tp as f64 / union as f64;
            count += 1;
        }
        if count == 0 {
            0.0
        } else {
            100.0 * sum / count as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let logits = vec![vec![2.0, -1.0, 3.0], vec![-2.0, 1.0, -3.0]];
        let labels = vec![vec![0, 2], vec![1]];
        assert_eq!(weighted_f1(&logits, &labels, 3), 100.0);
        let mut c = Confusion::new(3);
        c.add(&[0, 1, 2], &[0, 1, 2], &[]);
        assert_eq!(c.miou(&[]), 100.0);
    }

    #[test]
    fn f1_weights_by_support() {
        let logits = vec![vec![1.0, 1.0], vec![1.0, -1.0], vec![-1.0, -1.0]];
        let labels = vec![vec![0], vec![0], vec![0, 1]];
        let f1_0 = 2.0 * 2.0 / (4.0 + 0.0 + 1.0);
        let f1_1 = 0.0;
        let expected = 100.0 * (f1_0 * 3.0 + f1_1 * 1.0) / 4.0;
        assert!((weighted_f1(&logits, &labels, 2) - expected).abs() < 1e-12);
    }

    #[test]
    fn degenerate_single_class() {
        let mut c = Confusion::new(4);
        c.add(&[1, 1, 1, 1], &[1, 1, 1, 2], &[]);
        assert!((c.miou(&[]) - 100.0 * (0.75 + 0.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn ignored_classes_excluded() {
        let mut c = Confusion::new(3);
        c.add(&[0, 2, 2], &[0, 1, 0], &[2]);
        assert_eq!(c.miou(&[2]), 100.0);
    }

    #[test]
    fn top1() {
        let logits = vec![vec![0.1, 0.9], vec![0.8, 0.2]];
        assert_eq!(top1_accuracy(&logits, &[vec![1], vec![1]]), 50.0);
    }
}
