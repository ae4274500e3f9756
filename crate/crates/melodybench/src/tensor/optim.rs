//! Named parameters, Adam, and learning-rate schedules.

use std::collections::HashMap;

use super::{Result, Scalar, TensorData, TensorError};

/// One named parameter: raw buffer, shape, and flags.
#[derive(Clone)]
pub struct Param<E: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<E>,
    /// Trainable parameters receive gradients; running statistics do not.
    pub trainable: bool,
    /// Included in the L2 penalty when set.
    pub regularized: bool,
    /// Adam first/second moment, allocated lazily on the first step.
    pub adam_m: Option<Vec<E>>,
    pub adam_v: Option<Vec<E>>,
}

/// Ordered collection of named parameters plus the shared Adam step counter.
///
/// Insertion order is fixed at construction, which keeps checkpoints and
/// update sweeps deterministic.
#[derive(Clone)]
pub struct ParamSet<E: Scalar> {
    params: Vec<Param<E>>,
    by_name: HashMap<String, usize>,
    pub step: u64,
}

impl<E: Scalar> ParamSet<E> {
    pub fn new() -> Self {
        Self { params: Vec::new(), by_name: HashMap::new(), step: 0 }
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<E>, trainable: bool, regularized: bool) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "{name}: shape/data mismatch");
        assert!(!self.by_name.contains_key(name), "duplicate parameter {name}");
        self.by_name.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            shape,
            data,
            trainable,
            regularized,
            adam_m: None,
            adam_v: None,
        });
    }

    pub fn get(&self, name: &str) -> &Param<E> {
        &self.params[*self.by_name.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param<E> {
        let idx = *self.by_name.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.params[idx]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<E>> {
        self.params.iter()
    }

    pub fn tensor_data(&self, name: &str) -> TensorData<E> {
        let p = self.get(name);
        TensorData::new(p.shape.clone(), p.data.clone())
    }

    /// Every stored value, trainable or not — matches the framework
    /// convention of reporting batch-norm moving statistics in the total.
    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Per-prefix totals, where the prefix is everything up to the last `.`.
    pub fn count_by_layer(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for p in &self.params {
            let prefix = p.name.rsplit_once('.').map(|(head, _)| head).unwrap_or(&p.name);
            match out.last_mut() {
                Some((name, n)) if name == prefix => *n += p.data.len(),
                _ => out.push((prefix.to_string(), p.data.len())),
            }
        }
        out
    }
}

impl<E: Scalar> Default for ParamSet<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Bias-corrected Adam over all trainable parameters with a gradient.
///
/// `grads` maps parameter name to gradient buffer; entries must shape-match.
/// Zero (or absent) gradients leave the value untouched; the shared step
/// counter still advances.
pub fn adam_step<E: Scalar>(
    params: &mut ParamSet<E>,
    grads: &HashMap<String, TensorData<E>>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    params.step += 1;
    let t = params.step as i32;
    let b1 = E::from_f64(beta1);
    let b2 = E::from_f64(beta2);
    let epsn = E::from_f64(eps);
    let bias1 = E::from_f64(1.0 - beta1.powi(t));
    let bias2 = E::from_f64(1.0 - beta2.powi(t));
    let lrn = E::from_f64(lr);
    for param in params.params.iter_mut() {
        if !param.trainable {
            continue;
        }
        let Some(grad) = grads.get(&param.name) else { continue };
        if grad.shape() != param.shape.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                detail: format!("{}: grad {:?} vs param {:?}", param.name, grad.shape(), param.shape),
            });
        }
        let m = param.adam_m.get_or_insert_with(|| vec![E::zero(); grad.numel()]);
        let v = param.adam_v.get_or_insert_with(|| vec![E::zero(); grad.numel()]);
        for ((w, g), (m, v)) in param
            .data
            .iter_mut()
            .zip(grad.values())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *m = b1 * *m + (E::one() - b1) * *g;
            *v = b2 * *v + (E::one() - b2) * *g * *g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *w = *w - lrn * m_hat / (v_hat.sqrt() + epsn);
        }
    }
    Ok(())
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Learning-rate policy.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub enum LrSchedule {
    Constant { rate: f64 },
    /// `rate = d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
    InverseSqrtWarmup { d_model: usize, warmup: u64 },
}

impl LrSchedule {
    /// Rate at 1-based optimizer step `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        match self {
            LrSchedule::Constant { rate } => *rate,
            LrSchedule::InverseSqrtWarmup { d_model, warmup } => {
                assert!(step >= 1, "warmup schedule starts at step 1");
                let step = step as f64;
                let warmup = *warmup as f64;
                (*d_model as f64).powf(-0.5) * (step.powf(-0.5)).min(step * warmup.powf(-1.5))
            }
        }
    }
}

/// ReduceLROnPlateau: multiply by `factor` after `patience` consecutive
/// validation evaluations without improvement, never dropping below `floor`.
///
/// The first observation seeds the baseline and counts as non-improving, so a
/// completely flat history reduces on schedule from the start.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct PlateauReduce {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub floor: f64,
    rate: f64,
    best: Option<f64>,
    bad_evals: usize,
}

impl PlateauReduce {
    pub fn new(initial_rate: f64, factor: f64, patience: usize, min_delta: f64, floor: f64) -> Self {
        Self {
            factor,
            patience,
            min_delta,
            floor,
            rate: initial_rate,
            best: None,
            bad_evals: 0,
        }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Feed one validation loss; returns the rate to use from now on.
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        let improved = match self.best {
            Some(best) => val_loss < best - self.min_delta,
            None => false,
        };
        if improved {
            self.best = Some(val_loss);
            self.bad_evals = 0;
        } else {
            if self.best.is_none() {
                self.best = Some(val_loss);
            }
            self.bad_evals += 1;
            if self.bad_evals >= self.patience {
                self.rate = (self.rate * self.factor).max(self.floor);
                self.bad_evals = 0;
            }
        }
        self.rate
    }

    /// Rate after replaying a whole validation-loss history from scratch.
    pub fn rate_for_history(mut self, history: &[f64]) -> f64 {
        assert!(!history.is_empty(), "plateau schedule needs a non-empty history");
        for &loss in history {
            self.observe(loss);
        }
        self.rate
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_identity_on_values() {
        let mut params = ParamSet::<f64>::new();
        params.insert("w", vec![2], vec![1.5, -0.5], true, false);
        let mut grads = HashMap::new();
        grads.insert("w".to_string(), TensorData::zeros(vec![2]));
        adam_step(&mut params, &grads, 0.1, ADAM_BETA1, ADAM_BETA2, ADAM_EPS).unwrap();
        assert_eq!(params.get("w").data, vec![1.5, -0.5]);
        assert_eq!(params.step, 1);
    }

    #[test]
    fn first_step_magnitude_is_lr_signed() {
        // With m=v=0 the bias-corrected first update is lr·g/(|g| + ε') ≈ lr·sign(g).
        let mut params = ParamSet::<f64>::new();
        params.insert("w", vec![2], vec![0.0, 0.0], true, false);
        let mut grads = HashMap::new();
        grads.insert("w".to_string(), TensorData::from_f64_slice(vec![2], &[3.0, -0.25]));
        adam_step(&mut params, &grads, 0.1, ADAM_BETA1, ADAM_BETA2, ADAM_EPS).unwrap();
        let w = &params.get("w").data;
        assert!((w[0] + 0.1).abs() < 1e-6, "{w:?}");
        assert!((w[1] - 0.1).abs() < 1e-6, "{w:?}");
    }

    #[test]
    fn converges_on_quadratic() {
        // 100 steps of f(w) = w² from w = 1 at lr 0.1 pull |w| under 0.1.
        let mut params = ParamSet::<f64>::new();
        params.insert("w", vec![1], vec![1.0], true, false);
        for _ in 0..100 {
            let w = params.get("w").data[0];
            let mut grads = HashMap::new();
            grads.insert("w".to_string(), TensorData::from_f64_slice(vec![1], &[2.0 * w]));
            adam_step(&mut params, &grads, 0.1, ADAM_BETA1, ADAM_BETA2, ADAM_EPS).unwrap();
        }
        assert!(params.get("w").data[0].abs() < 0.1);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut params = ParamSet::<f64>::new();
        params.insert("w", vec![2], vec![0.0, 0.0], true, false);
        let mut grads = HashMap::new();
        grads.insert("w".to_string(), TensorData::zeros(vec![3]));
        assert!(adam_step(&mut params, &grads, 0.1, ADAM_BETA1, ADAM_BETA2, ADAM_EPS).is_err());
    }

    #[test]
    fn inverse_sqrt_warmup_values() {
        let sched = LrSchedule::InverseSqrtWarmup { d_model: 256, warmup: 4000 };
        // At the warmup corner both branches agree: 256^-0.5 · 4000^-0.5.
        let at_corner = sched.lr_at(4000);
        assert!((at_corner - 9.882e-4).abs() < 1e-6, "{at_corner}");
        // Step 1 is deep in the linear branch.
        let linear = 256f64.powf(-0.5) * 1.0 * 4000f64.powf(-1.5);
        assert!((sched.lr_at(1) - linear).abs() < 1e-15);
        // Non-decreasing up to warmup, non-increasing after.
        for step in 1..4000u64 {
            assert!(sched.lr_at(step) <= sched.lr_at(step + 1) + 1e-18);
        }
        for step in 4000..8000u64 {
            assert!(sched.lr_at(step) >= sched.lr_at(step + 1) - 1e-18);
        }
    }

    #[test]
    fn plateau_reduces_after_patience() {
        let mut p = PlateauReduce::new(1e-3, 0.2, 2, 1e-4, 1e-6);
        // Strictly improving: unchanged.
        for loss in [1.0, 0.9, 0.8] {
            p.observe(loss);
        }
        assert_eq!(p.rate(), 1e-3);
        // Flat history of length 3 relative to best 0.8: one reduction.
        p.observe(0.8);
        p.observe(0.8);
        assert!((p.rate() - 2e-4).abs() < 1e-12);
    }

    #[test]
    fn plateau_clamps_at_floor() {
        let mut p = PlateauReduce::new(1e-3, 0.2, 2, 1e-4, 1e-6);
        for _ in 0..10 {
            p.observe(1.0);
        }
        assert!((p.rate() - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn layer_counts_group_by_prefix() {
        let mut params = ParamSet::<f32>::new();
        params.insert("enc.0.attn.wq", vec![2, 2], vec![0.0; 4], true, false);
        params.insert("enc.0.attn.bq", vec![2], vec![0.0; 2], true, false);
        params.insert("out.w", vec![2], vec![0.0; 2], true, false);
        let counts = params.count_by_layer();
        assert_eq!(counts[0], ("enc.0.attn".to_string(), 6));
        assert_eq!(counts[1], ("out".to_string(), 2));
    }
}
