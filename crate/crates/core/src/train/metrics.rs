/// Confusion counts; rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Self {
        ConfusionMatrix {
            classes: rows.len(),
            counts: rows.concat(),
        }
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.classes + pred] += 1;
    }

    fn at(&self, t: usize, p: usize) -> u64 {
        self.counts[t * self.classes + p]
    }

    fn row(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.at(c, p)).sum()
    }

    fn col(&self, c: usize) -> u64 {
        (0..self.classes).map(|t| self.at(t, c)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn overall_accuracy(&self) -> f64 {
        let correct: u64 = (0..self.classes).map(|c| self.at(c, c)).sum();
        correct as f64 / self.total().max(1) as f64
    }

    /// Per-class IoU; `None` for classes absent from both truth and
    /// predictions.
    pub fn ious(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.at(c, c);
                let union = self.row(c) + self.col(c) - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn mean_iou(&self) -> f64 {
        mean(self.ious().into_iter().flatten())
    }

    /// Mean over classes present in the ground truth of per-class recall.
    pub fn mean_accuracy(&self) -> f64 {
        mean((0..self.classes).filter_map(|c| {
            let n = self.row(c);
            (n > 0).then(|| self.at(c, c) as f64 / n as f64)
        }))
    }

    pub fn metrics(&self) -> Metrics {
        Metrics {
            accuracy: self.overall_accuracy(),
            mean_accuracy: self.mean_accuracy(),
            mean_iou: self.mean_iou(),
        }
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub mean_accuracy: f64,
    pub mean_iou: f64,
}
