use super::{ParamSet, Tensor};

/// Adadelta accumulators, one pair per parameter in set order.
///
/// The update rule per scalar, with decay `rho` and stabilizer `eps`:
///
/// ```text
/// eg2  = rho * eg2 + (1 - rho) * g^2
/// dx   = -sqrt(ex2 + eps) / sqrt(eg2 + eps) * g
/// ex2  = rho * ex2 + (1 - rho) * dx^2
/// x    = x + dx
/// ```
#[derive(Debug, Clone)]
pub struct AdadeltaState {
    rho: f64,
    eps: f64,
    sq_grad: Vec<Tensor>,
    sq_update: Vec<Tensor>,
}

impl AdadeltaState {
    pub const DEFAULT_RHO: f64 = 0.95;
    pub const DEFAULT_EPS: f64 = 1e-6;

    pub fn new(set: &ParamSet, rho: f64, eps: f64) -> AdadeltaState {
        let zeros: Vec<Tensor> = (0..set.len())
            .map(|i| {
                let t = set.tensor_at(i);
                Tensor::zeros(t.rows(), t.cols())
            })
            .collect();
        AdadeltaState {
            rho,
            eps,
            sq_grad: zeros.clone(),
            sq_update: zeros,
        }
    }

    pub fn with_defaults(set: &ParamSet) -> AdadeltaState {
        Self::new(set, Self::DEFAULT_RHO, Self::DEFAULT_EPS)
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// Apply one update; `grads` is parallel to the set's registration order.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) {
        assert_eq!(grads.len(), params.len(), "gradient count mismatch");
        for i in 0..grads.len() {
            let g = &grads[i];
            let eg2 = &mut self.sq_grad[i];
            let ex2 = &mut self.sq_update[i];
            let x = params.tensor_at_mut(i);
            debug_assert!(x.same_shape(g));
            for k in 0..g.len() {
                let gv = g.data()[k];
                let eg = self.rho * eg2.data()[k] + (1.0 - self.rho) * gv * gv;
                eg2.data_mut()[k] = eg;
                let dx = -((ex2.data()[k] + self.eps).sqrt() / (eg + self.eps).sqrt()) * gv;
                ex2.data_mut()[k] = self.rho * ex2.data()[k] + (1.0 - self.rho) * dx * dx;
                x.data_mut()[k] += dx;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamSet;

    fn one_param(v: f64) -> ParamSet {
        let mut set = ParamSet::new();
        set.register("x", Tensor::scalar(v)).unwrap();
        set
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut set = one_param(1.25);
        let mut state = AdadeltaState::with_defaults(&set);
        // Seed the accumulators with one real step so decay is observable.
        state.step(&mut set, &[Tensor::scalar(0.5)]);
        let eg_before = state.sq_grad[0].item();
        let x_before = set.tensor_at(0).item();

        state.step(&mut set, &[Tensor::scalar(0.0)]);
        assert_eq!(set.tensor_at(0).item(), x_before);
        assert!((state.sq_grad[0].item() - 0.95 * eg_before).abs() < 1e-15);
    }

    // Hand-stepped scalar recurrences, written down before the optimizer.
    #[test]
    fn single_step_matches_scalar_oracle() {
        let (rho, eps) = (0.95, 1e-6);
        let (x0, g) = (2.0_f64, 0.3_f64);

        let eg2 = rho * 0.0 + (1.0 - rho) * g * g;
        let dx = -((0.0_f64 + eps).sqrt() / (eg2 + eps).sqrt()) * g;
        let expected = x0 + dx;

        let mut set = one_param(x0);
        let mut state = AdadeltaState::new(&set, rho, eps);
        state.step(&mut set, &[Tensor::scalar(g)]);
        assert!((set.tensor_at(0).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn default_decay_rates() {
        let set = one_param(0.0);
        let state = AdadeltaState::with_defaults(&set);
        assert_eq!(state.rho(), 0.95);
        assert_eq!(state.eps(), 1e-6);
    }
}
