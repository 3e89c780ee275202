use super::{BatchStats, Graph, Result, TensorError, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running per-channel statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub initialized: bool,
}

impl RunningStats {
    /// Zero mean, unit variance, usable in eval mode straight away.
    pub fn identity(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            initialized: true,
        }
    }

    /// No statistics yet; eval mode is refused until a training batch is seen.
    pub fn uninitialized(channels: usize) -> Self {
        RunningStats {
            initialized: false,
            ..RunningStats::identity(channels)
        }
    }

    /// Momentum update with the unbiased batch variance. The first update of
    /// an uninitialised instance copies the batch statistics.
    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        let correction = if batch.count > 1 {
            batch.count as f64 / (batch.count - 1) as f64
        } else {
            1.0
        };
        for c in 0..self.mean.len() {
            let unbiased = batch.var[c] * correction;
            if self.initialized {
                self.mean[c] = (1.0 - momentum) * self.mean[c] + momentum * batch.mean[c];
                self.var[c] = (1.0 - momentum) * self.var[c] + momentum * unbiased;
            } else {
                self.mean[c] = batch.mean[c];
                self.var[c] = unbiased;
            }
        }
        self.initialized = true;
    }
}

/// Batch normalisation with channels on axis 0. Train mode normalises with the
/// batch statistics and folds them into `stats`; eval mode uses `stats`.
pub fn batchnorm(
    g: &mut Graph,
    x: Var,
    gamma: Var,
    beta: Var,
    stats: &mut RunningStats,
    mode: Mode,
) -> Result<Var> {
    match mode {
        Mode::Train => {
            let (y, batch) = g.batchnorm_train(x, gamma, beta, BN_EPS)?;
            stats.update(&batch, BN_MOMENTUM);
            Ok(y)
        }
        Mode::Eval => {
            if !stats.initialized {
                return Err(TensorError::State(
                    "batch norm running statistics are uninitialised".into(),
                ));
            }
            g.batchnorm_eval(x, gamma, beta, &stats.mean, &stats.var, BN_EPS)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn eval_before_any_statistics_is_a_state_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]).unwrap());
        let gamma = g.constant(Tensor::full(&[2], 1.0).unwrap());
        let beta = g.constant(Tensor::zeros(&[2]).unwrap());
        let mut stats = RunningStats::uninitialized(2);
        assert!(matches!(
            batchnorm(&mut g, x, gamma, beta, &mut stats, Mode::Eval),
            Err(TensorError::State(_))
        ));
        batchnorm(&mut g, x, gamma, beta, &mut stats, Mode::Train).unwrap();
        assert!(batchnorm(&mut g, x, gamma, beta, &mut stats, Mode::Eval).is_ok());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut s = RunningStats::identity(1);
        let batch = BatchStats {
            mean: vec![2.0],
            var: vec![3.0],
            count: 4,
        };
        s.update(&batch, 0.1);
        assert!((s.mean[0] - 0.2).abs() < 1e-15);
        assert!((s.var[0] - (0.9 + 0.1 * 4.0)).abs() < 1e-15);
    }
}
