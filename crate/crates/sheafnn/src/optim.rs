//! Training machinery: Adam with decoupled weight decay, global-norm
//! gradient clipping, a reduce-on-plateau learning-rate scheduler, and
//! early stopping.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::ParamSet;

/// Adam state: first and second moments per parameter plus the step count.
/// Weight decay is decoupled: parameters shrink by `lr * wd * theta`
/// independently of the gradient-based update.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first_moment: Vec<Matrix>,
    second_moment: Vec<Matrix>,
}

impl AdamState {
    pub fn new(lr: f64, weight_decay: f64) -> AdamState {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update over all parameters; gradients are zeroed afterwards.
/// A NaN or infinite gradient aborts with a numeric error so the caller can
/// mark the training run as failed.
pub fn adam_step(state: &mut AdamState, params: &mut ParamSet) -> Result<()> {
    if state.first_moment.is_empty() {
        for p in params.iter() {
            state
                .first_moment
                .push(Matrix::zeros(p.value.rows(), p.value.cols()));
            state
                .second_moment
                .push(Matrix::zeros(p.value.rows(), p.value.cols()));
        }
    }
    if state.first_moment.len() != params.len() {
        return Err(Error::contract(format!(
            "optimizer tracks {} parameters, model has {}",
            state.first_moment.len(),
            params.len()
        )));
    }
    for p in params.iter() {
        if !p.grad.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite gradient in parameter {}",
                p.name
            )));
        }
    }

    state.step += 1;
    let t = state.step as f64;
    let bias1 = 1.0 - state.beta1.powf(t);
    let bias2 = 1.0 - state.beta2.powf(t);

    for (id, p) in params.iter_mut().enumerate() {
        let m = &mut state.first_moment[id];
        let v = &mut state.second_moment[id];
        let n = p.value.rows() * p.value.cols();
        for k in 0..n {
            let g = p.grad.as_slice()[k];
            let mk = state.beta1 * m.as_slice()[k] + (1.0 - state.beta1) * g;
            let vk = state.beta2 * v.as_slice()[k] + (1.0 - state.beta2) * g * g;
            m.as_mut_slice()[k] = mk;
            v.as_mut_slice()[k] = vk;
            let m_hat = mk / bias1;
            let v_hat = vk / bias2;
            let theta = p.value.as_slice()[k];
            p.value.as_mut_slice()[k] = theta
                - state.lr * m_hat / (v_hat.sqrt() + state.eps)
                - state.lr * state.weight_decay * theta;
        }
    }
    params.zero_grads();
    Ok(())
}

/// Scales all gradients by `max_norm / norm` when the global L2 norm
/// exceeds `max_norm`. Returns the scaling factor applied.
pub fn clip_gradients(params: &mut ParamSet, max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 {
        return Err(Error::contract(format!(
            "gradient clip threshold must be positive, got {max_norm}"
        )));
    }
    let norm = params.grad_norm();
    if norm <= max_norm || norm == 0.0 {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    for p in params.iter_mut() {
        p.grad = p.grad.scale(scale);
    }
    Ok(scale)
}

/// Reduce-on-plateau scheduler monitoring a loss-like metric (lower is
/// better). The learning rate is multiplied by `factor` after
/// `patience + 1` consecutive non-improving observations and never rises
/// or drops below `min_lr`.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    /// Relative improvement threshold; matches common library defaults.
    pub threshold: f64,
    best: f64,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize, min_lr: f64) -> PlateauScheduler {
        PlateauScheduler {
            factor,
            patience,
            min_lr,
            threshold: 1e-4,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Observes one epoch's metric and returns the (possibly reduced)
    /// learning rate.
    pub fn step(&mut self, metric: f64, lr: f64) -> f64 {
        if metric < self.best * (1.0 - self.threshold) {
            self.best = metric;
            self.stale = 0;
            return lr;
        }
        self.stale += 1;
        if self.stale > self.patience {
            self.stale = 0;
            return (lr * self.factor).max(self.min_lr);
        }
        lr
    }
}

/// Early stopping on an accuracy-like metric (higher is better). Never
/// fires before `min_epochs`.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    pub patience: usize,
    pub min_epochs: usize,
    best: f64,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize, min_epochs: usize) -> EarlyStopper {
        EarlyStopper {
            patience,
            min_epochs,
            best: f64::NEG_INFINITY,
            stale: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Observes one epoch's validation metric; true means stop now.
    pub fn should_stop(&mut self, epoch: usize, metric: f64) -> bool {
        if metric > self.best {
            self.best = metric;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        epoch >= self.min_epochs && self.stale > self.patience
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(value: f64) -> ParamSet {
        let mut params = ParamSet::new();
        params.add("theta", Matrix::from_vec(1, 1, vec![value]).unwrap());
        params
    }

    fn set_grad(params: &mut ParamSet, g: f64) {
        params.get_mut(0).grad = Matrix::from_vec(1, 1, vec![g]).unwrap();
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = single_param(1.5);
        let mut adam = AdamState::new(0.1, 0.0);
        set_grad(&mut params, 0.0);
        adam_step(&mut adam, &mut params).unwrap();
        assert_eq!(params.get(0).value.get(0, 0), 1.5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // Bias correction makes m_hat / sqrt(v_hat) = 1 on the first step.
        let mut params = single_param(0.0);
        let mut adam = AdamState::new(0.1, 0.0);
        set_grad(&mut params, 1.0);
        adam_step(&mut adam, &mut params).unwrap();
        let got = params.get(0).value.get(0, 0);
        assert!((got + 0.1).abs() < 1e-8, "got {got}");
    }

    #[test]
    fn decay_only_shrinks_geometrically() {
        let mut params = single_param(2.0);
        let mut adam = AdamState::new(0.1, 0.5);
        let mut expected = 2.0;
        for _ in 0..5 {
            set_grad(&mut params, 0.0);
            adam_step(&mut adam, &mut params).unwrap();
            expected *= 1.0 - 0.1 * 0.5;
            let got = params.get(0).value.get(0, 0);
            assert!((got - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn nan_gradient_is_a_numeric_error() {
        let mut params = single_param(0.0);
        let mut adam = AdamState::new(0.1, 0.0);
        set_grad(&mut params, f64::NAN);
        assert!(adam_step(&mut adam, &mut params).is_err());
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // Loss |theta|^2 / 2, gradient = theta, from a far start.
        let mut params = single_param(5.0);
        let mut adam = AdamState::new(0.05, 0.0);
        for _ in 0..2000 {
            let theta = params.get(0).value.get(0, 0);
            set_grad(&mut params, theta);
            adam_step(&mut adam, &mut params).unwrap();
        }
        let theta = params.get(0).value.get(0, 0).abs();
        assert!(theta < 1e-3, "theta after 2000 steps: {theta}");
    }

    #[test]
    fn clip_leaves_small_gradients_alone() {
        let mut params = single_param(0.0);
        set_grad(&mut params, 0.5);
        let scale = clip_gradients(&mut params, 1.0).unwrap();
        assert_eq!(scale, 1.0);
        assert_eq!(params.get(0).grad.get(0, 0), 0.5);
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut params = ParamSet::new();
        params.add("v", Matrix::from_vec(2, 1, vec![0.0, 0.0]).unwrap());
        params.get_mut(0).grad = Matrix::from_vec(2, 1, vec![3.0, 4.0]).unwrap();
        clip_gradients(&mut params, 1.0).unwrap();
        let g = &params.get(0).grad;
        assert!((g.get(0, 0) - 0.6).abs() < 1e-12);
        assert!((g.get(1, 0) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn clip_is_idempotent_and_ignores_zero() {
        let mut params = single_param(0.0);
        set_grad(&mut params, 0.0);
        clip_gradients(&mut params, 1.0).unwrap();
        assert_eq!(params.get(0).grad.get(0, 0), 0.0);

        let mut params = ParamSet::new();
        params.add("v", Matrix::from_vec(2, 1, vec![0.0, 0.0]).unwrap());
        params.get_mut(0).grad = Matrix::from_vec(2, 1, vec![3.0, 4.0]).unwrap();
        clip_gradients(&mut params, 2.0).unwrap();
        let once = params.get(0).grad.clone();
        clip_gradients(&mut params, 2.0).unwrap();
        assert_eq!(params.get(0).grad, once);
    }

    #[test]
    fn scheduler_keeps_lr_while_improving() {
        let mut sched = PlateauScheduler::new(0.5, 2, 1e-6);
        let mut lr = 0.1;
        for step in 0..10 {
            lr = sched.step(1.0 / (step + 1) as f64, lr);
            assert_eq!(lr, 0.1);
        }
    }

    #[test]
    fn scheduler_halves_after_patience_plus_one_flat_epochs() {
        let mut sched = PlateauScheduler::new(0.5, 2, 1e-6);
        let mut lr = 0.1;
        let mut history = Vec::new();
        for _ in 0..4 {
            lr = sched.step(1.0, lr);
            history.push(lr);
        }
        // First observation sets the best; the reduction lands on the
        // fourth flat epoch (patience + 1 non-improving epochs after it).
        assert_eq!(history, vec![0.1, 0.1, 0.1, 0.05]);
    }

    #[test]
    fn scheduler_respects_min_lr_floor() {
        let mut sched = PlateauScheduler::new(0.5, 0, 1e-3);
        let mut lr = 2e-3;
        for _ in 0..20 {
            let next = sched.step(1.0, lr);
            assert!(next <= lr);
            lr = next;
        }
        assert_eq!(lr, 1e-3);
    }

    #[test]
    fn early_stop_respects_min_epochs() {
        let mut stopper = EarlyStopper::new(0, 50);
        for epoch in 0..50 {
            assert!(!stopper.should_stop(epoch, 0.5), "fired at epoch {epoch}");
        }
    }

    #[test]
    fn early_stop_never_fires_while_improving() {
        let mut stopper = EarlyStopper::new(3, 0);
        for epoch in 0..200 {
            assert!(!stopper.should_stop(epoch, epoch as f64));
        }
    }

    #[test]
    fn early_stop_counter_arithmetic() {
        // Best at epoch 200, flat after: with patience 80 and min_epochs
        // 200 the stop lands exactly at epoch 281.
        let mut stopper = EarlyStopper::new(80, 200);
        let mut fired_at = None;
        for epoch in 0..=400 {
            let metric = if epoch <= 200 { epoch as f64 } else { 0.0 };
            if stopper.should_stop(epoch, metric) {
                fired_at = Some(epoch);
                break;
            }
        }
        assert_eq!(fired_at, Some(281));
    }
}
