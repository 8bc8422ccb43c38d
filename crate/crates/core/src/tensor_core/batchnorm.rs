use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tensor::{Parameter, Tensor};

pub const DEFAULT_BN_EPSILON: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

/// How a batch-norm layer normalises and which statistics it updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running stats follow an exponential moving average.
    Train,
    /// Running statistics; nothing is updated.
    Eval,
    /// Batch statistics; exact aggregate statistics are accumulated.
    Recalibrate,
}

/// Exact per-channel mean/variance over every activation seen, merged
/// batch by batch (Chan et al. pairwise update, in f64).
#[derive(Debug, Clone, PartialEq)]
pub struct StatsAccumulator {
    count: Vec<f64>,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl StatsAccumulator {
    pub fn new(channels: usize) -> Self {
        Self {
            count: vec![0.0; channels],
            mean: vec![0.0; channels],
            m2: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.count.len()
    }

    /// Merges a batch summary `(n, mean, population variance)` into channel `c`.
    pub fn merge(&mut self, c: usize, n: f64, mean: f64, var: f64) {
        if n == 0.0 {
            return;
        }
        let na = self.count[c];
        let total = na + n;
        let delta = mean - self.mean[c];
        self.mean[c] += delta * n / total;
        self.m2[c] += var * n + delta * delta * na * n / total;
        self.count[c] = total;
    }

    pub fn is_empty(&self) -> bool {
        self.count.iter().all(|&n| n == 0.0)
    }

    /// Aggregate mean and population variance per channel.
    pub fn finish(&self) -> (Vec<f64>, Vec<f64>) {
        let var = self
            .m2
            .iter()
            .zip(&self.count)
            .map(|(&m2, &n)| if n > 0.0 { (m2 / n).max(0.0) } else { 0.0 })
            .collect();
        (self.mean.clone(), var)
    }
}

/// Learned affine parameters plus running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub epsilon: T,
    pub mode: BnMode,
    pub(crate) accumulator: Option<StatsAccumulator>,
}

impl<T: Scalar> BatchNormState<T> {
    /// `gamma = 1`, `beta = 0`, running mean 0 and variance 1.
    pub fn new(prefix: &str, channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::invalid("batch norm needs at least one channel"));
        }
        Ok(Self {
            gamma: Parameter::new(
                format!("{prefix}.gamma"),
                Tensor::full(&[channels], T::one()),
            )?,
            beta: Parameter::new(format!("{prefix}.beta"), Tensor::zeros(&[channels]))?,
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::of(DEFAULT_BN_MOMENTUM),
            epsilon: T::of(DEFAULT_BN_EPSILON),
            mode: BnMode::Train,
            accumulator: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn with_momentum(mut self, momentum: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum <= 1.0) {
            return Err(Error::invalid(format!(
                "batch norm momentum must be in (0, 1], got {momentum}"
            )));
        }
        self.momentum = T::of(momentum);
        Ok(self)
    }

    /// Starts a recalibration pass: switches to [`BnMode::Recalibrate`] and
    /// clears any previous aggregate.
    pub fn begin_recalibration(&mut self) {
        self.mode = BnMode::Recalibrate;
        self.accumulator = Some(StatsAccumulator::new(self.channels()));
    }

    /// Replaces the running statistics with the aggregate of the pass.
    pub fn finish_recalibration(&mut self) -> Result<()> {
        let acc = self
            .accumulator
            .take()
            .ok_or_else(|| Error::invalid("no recalibration pass in progress"))?;
        if acc.is_empty() {
            return Err(Error::EmptyBatch {
                op: "recalibrate_batchnorm",
            });
        }
        let (mean, var) = acc.finish();
        self.running_mean = mean.into_iter().map(T::of).collect();
        self.running_var = var.into_iter().map(T::of).collect();
        self.mode = BnMode::Eval;
        Ok(())
    }

    pub(crate) fn check_invariants(&self) -> Result<()> {
        let c = self.channels();
        if self.running_var.len() != c
            || self.gamma.numel() != c
            || self.beta.numel() != c
            || self.running_var.iter().any(|v| *v < T::zero())
        {
            return Err(Error::invalid(format!(
                "inconsistent batch norm state `{}`",
                self.gamma.name
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulator_matches_pooled_statistics() {
        let batches = [vec![1.0, 2.0, 3.0], vec![10.0], vec![-4.0, 4.0]];
        let mut acc = StatsAccumulator::new(1);
        for b in &batches {
            let n = b.len() as f64;
            let m = b.iter().sum::<f64>() / n;
            let v = b.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
            acc.merge(0, n, m, v);
        }
        let all: Vec<f64> = batches.concat();
        let n = all.len() as f64;
        let m = all.iter().sum::<f64>() / n;
        let v = all.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        let (mean, var) = acc.finish();
        assert!((mean[0] - m).abs() < 1e-12);
        assert!((var[0] - v).abs() < 1e-12);
    }

    #[test]
    fn finish_without_begin_is_an_error() {
        let mut bn = BatchNormState::<f64>::new("bn", 2).unwrap();
        assert!(bn.finish_recalibration().is_err());
        bn.begin_recalibration();
        assert!(matches!(
            bn.finish_recalibration(),
            Err(Error::EmptyBatch { .. })
        ));
    }

    #[test]
    fn momentum_range_checked() {
        let bn = BatchNormState::<f32>::new("bn", 1).unwrap();
        assert!(bn.clone().with_momentum(0.0).is_err());
        assert!(bn.clone().with_momentum(1.5).is_err());
        assert!(bn.with_momentum(1.0).is_ok());
    }
}
