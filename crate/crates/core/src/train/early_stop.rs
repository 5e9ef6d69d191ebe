/// What the training loop should do after an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    /// The score beat every earlier one; snapshot the parameters.
    Improved,
    Continue,
    Stop,
}

/// Patience-based stopping on a score where larger is better.
///
/// Stops once `patience` consecutive epochs fail to strictly improve on the
/// best score.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        assert!(patience >= 1, "patience must be at least 1");
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, score: f64) -> Decision {
        match self.best {
            Some((_, b)) if score <= b => {
                self.stale += 1;
                if self.stale >= self.patience {
                    Decision::Stop
                } else {
                    Decision::Continue
                }
            }
            _ => {
                self.best = Some((epoch, score));
                self.stale = 0;
                Decision::Improved
            }
        }
    }

    /// `(epoch, score)` of the best observation so far.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(scores: &[f64], patience: usize) -> (usize, Option<(usize, f64)>) {
        let mut es = EarlyStopping::new(patience);
        for (epoch, &s) in scores.iter().enumerate() {
            if es.observe(epoch, s) == Decision::Stop {
                return (epoch, es.best());
            }
        }
        (scores.len(), es.best())
    }

    #[test]
    fn improving_sequence_never_stops() {
        let scores: Vec<f64> = (0..30).map(|i| i as f64 / 30.0).collect();
        assert_eq!(run(&scores, 10), (30, Some((29, 29.0 / 30.0))));
    }

    #[test]
    fn flat_after_k_stops_at_k_plus_patience() {
        let k = 4;
        let mut scores: Vec<f64> = (0..=k).map(|i| i as f64 * 0.1).collect();
        scores.extend(std::iter::repeat_n(0.4, 20));
        assert_eq!(run(&scores, 10), (k + 10, Some((k, 0.4))));
    }

    #[test]
    fn late_improvement_resets_patience() {
        let scores = [0.5, 0.4, 0.4, 0.6, 0.6, 0.6];
        assert_eq!(run(&scores, 3), (6, Some((3, 0.6))));
        assert_eq!(run(&scores, 2), (2, Some((0, 0.5))));
    }
}
