//! Central-difference verification of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Agcn, AgcnConfig};
use crate::params::ParamRegistry;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst scalar.
    pub worst_index: usize,
    /// Tape and central-difference derivatives at `worst_index`.
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub loss: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compare the tape gradient of `loss_fn` with central differences
/// `(f(w+eps) - f(w-eps)) / 2eps` for every scalar in `registry`.
///
/// `loss_fn` records a scalar loss on the fresh tape it is handed; it must be
/// deterministic. The registry is restored to its original values afterwards.
pub fn finite_diff_check<F>(registry: &mut ParamRegistry, mut loss_fn: F, epsilon: f64) -> Result<GradCheckReport>
where
    F: FnMut(&ParamRegistry, &mut Tape) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(Error::config(format!("epsilon must be positive, got {epsilon}")));
    }
    // Analytic pass.
    let mut tape = Tape::new();
    let loss_var = loss_fn(registry, &mut tape)?;
    let loss = tape.value(loss_var).item();
    if !loss.is_finite() {
        return Err(Error::numeric(format!("loss evaluated to {loss}")));
    }
    let grads = tape.backward(loss_var)?;
    let analytic: Vec<(String, Vec<f64>)> = registry
        .iter()
        .map(|(name, t)| {
            let g = tape
                .bound_params()
                .iter()
                .find(|(n, _)| n == name)
                .and_then(|(_, v)| grads.get(*v))
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            (name.to_string(), g)
        })
        .collect();
    drop(tape);

    let mut eval = |reg: &ParamRegistry| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = loss_fn(reg, &mut tape)?;
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(Error::numeric(format!("loss evaluated to {v}")));
        }
        Ok(v)
    };

    let mut params = Vec::with_capacity(analytic.len());
    for (name, grad) in analytic {
        let numel = grad.len();
        let mut worst = (0.0, 0, 0.0, 0.0);
        for i in 0..numel {
            let original = registry.get(&name).expect("registered").data()[i];
            registry.get_mut(&name).expect("registered").data_mut()[i] = original + epsilon;
            let plus = eval(registry);
            registry.get_mut(&name).expect("registered").data_mut()[i] = original - epsilon;
            let minus = eval(registry);
            registry.get_mut(&name).expect("registered").data_mut()[i] = original;
            let numeric = (plus? - minus?) / (2.0 * epsilon);
            let err = relative_error(numeric, grad[i]);
            if err > worst.0 || !err.is_finite() {
                worst = (err, i, grad[i], numeric);
            }
        }
        params.push(ParamCheck { name, numel, max_rel_error: worst.0, worst_index: worst.1, analytic: worst.2, numeric: worst.3 });
    }
    Ok(GradCheckReport { params, loss })
}

/// Check every parameter of `model` on the cross-entropy of one labelled batch.
pub fn model_gradcheck(
    model: &Agcn,
    registry: &mut ParamRegistry,
    x: &Tensor,
    labels: &[usize],
    epsilon: f64,
) -> Result<GradCheckReport> {
    finite_diff_check(registry, |reg, tape| model.loss(tape, reg, x, labels), epsilon)
}

/// Check a freshly initialized `config` model on one `U(-3,3)` input of
/// class 0, both drawn from `config.seed`. The wide input range keeps
/// deep-layer gradients well above the rounding noise of the loss.
pub fn seeded_model_gradcheck(config: &AgcnConfig, epsilon: f64) -> Result<GradCheckReport> {
    let model = Agcn::new(config.clone())?;
    let mut reg = model.init_params()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9c);
    let [c, h, w] = config.input_shape();
    let x = Tensor::from_fn(&[1, c, h, w], |_| rng.random_range(-3.0..3.0));
    model_gradcheck(&model, &mut reg, &x, &[0], epsilon)
}

/// [`seeded_model_gradcheck`] on [`AgcnConfig::gradcheck_tiny`].
pub fn tiny_model_gradcheck(seed: u64, epsilon: f64) -> Result<GradCheckReport> {
    let mut config = AgcnConfig::gradcheck_tiny();
    config.seed = seed;
    seeded_model_gradcheck(&config, epsilon)
}
