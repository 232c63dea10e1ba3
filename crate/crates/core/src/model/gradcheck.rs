use super::{total_loss, DuploModel, ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::rng::SeededRng;
use crate::tensor::{relative_error, Tape, Tensor};

/// Gradient agreement for one parameter tensor.
#[derive(Clone, Debug)]
pub struct GradcheckEntry {
    pub name: String,
    /// Worst componentwise `|a − n| / max(|a|, |n|, 1e-8)`.
    pub max_rel_error: f64,
    /// `max |a − n|` over the tensor divided by its largest gradient
    /// magnitude. Unlike the componentwise figure this is not dominated by
    /// components whose true gradient is zero (a conv bias feeding a
    /// train-mode batch norm), where differencing only sees rounding noise.
    pub tensor_rel_error: f64,
    pub checked: usize,
}

impl GradcheckEntry {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.tensor_rel_error < tolerance
    }
}

/// Compares tape gradients of the total training loss against central
/// differences for every trainable tensor, in 64-bit.
///
/// The loss is evaluated in train mode; dropout masks are frozen by
/// reseeding the mask generator before every evaluation. Biases and batch
/// norm affine terms are jittered away from their initial values first. With
/// `max_per_tensor` set, each tensor is probed at its largest-gradient
/// component plus a random sample; otherwise every component is probed.
#[allow(clippy::too_many_arguments)]
pub fn model_gradcheck(
    config: &ModelConfig,
    variant: Variant,
    batch: usize,
    alphas: (f64, f64),
    seed: u64,
    step: f64,
    max_per_tensor: Option<usize>,
) -> Result<Vec<GradcheckEntry>> {
    if step <= 0.0 || batch == 0 {
        return Err(Error::Contract("gradient check needs a positive step and batch".into()));
    }
    let mut model = DuploModel::<f64>::new(config.clone(), variant)?;
    let c = config.num_classes;
    let mut rng = SeededRng::derive(seed, "gradcheck.input");
    let shape = [batch, config.timestamps, config.bands, super::PATCH, super::PATCH];
    let n: usize = shape.iter().product();
    let input = Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform()).collect())?;
    let labels: Vec<usize> = (0..batch).map(|i| i % c).collect();

    // Zero biases put ReLU inputs exactly on the kink whenever a layer's
    // input row is all zero; probe at a generic point instead.
    let mut jitter = SeededRng::derive(seed, "gradcheck.jitter");
    for id in model.store.ids().collect::<Vec<_>>() {
        let name = model.store.name(id);
        let (centre, spread) = if name.ends_with(".gamma") {
            (1.0, 0.2)
        } else if name.ends_with("bias") || name.ends_with(".beta") || name.contains(".b_") {
            (0.0, 0.1)
        } else {
            continue;
        };
        for v in model.store.get_mut(id).data_mut() {
            *v = centre + jitter.uniform_range(-spread, spread);
        }
    }

    let loss_of = |model: &mut DuploModel<f64>, grads: bool| -> Result<(f64, Tape<f64>)> {
        let mut tape = Tape::new();
        let mut mask_rng = SeededRng::derive(seed, "gradcheck.dropout");
        let out = model.forward(&mut tape, &input, Mode::Train, &mut mask_rng)?;
        let loss = total_loss(&mut tape, variant, &out.logits, &labels, alphas.0, alphas.1)?;
        if grads {
            tape.backward(loss)?;
        }
        Ok((tape.value(loss).item(), tape))
    };

    let (base, tape) = loss_of(&mut model, true)?;
    if loss_of(&mut model, false)?.0 != base {
        return Err(Error::NonDeterministic);
    }
    let ids: Vec<_> = model.store.ids().filter(|&id| model.store.is_trainable(id)).collect();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| match tape.param_grad(id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; model.store.get(id).len()],
        })
        .collect();
    drop(tape);

    let mut pick = SeededRng::derive(seed, "gradcheck.sample");
    let mut report = Vec::with_capacity(ids.len());
    for (&id, grad) in ids.iter().zip(&analytic) {
        let components: Vec<usize> = match max_per_tensor {
            Some(k) if k < grad.len() => {
                let top = (0..grad.len())
                    .max_by(|&a, &b| grad[a].abs().total_cmp(&grad[b].abs()))
                    .unwrap_or(0);
                let mut chosen = vec![top];
                while chosen.len() < k {
                    let i = pick.below(grad.len());
                    if !chosen.contains(&i) {
                        chosen.push(i);
                    }
                }
                chosen
            }
            _ => (0..grad.len()).collect(),
        };
        let mut worst = 0.0f64;
        let mut diff = 0.0f64;
        let mut scale = 1e-8f64;
        for &i in &components {
            let orig = model.store.get(id).data()[i];
            let mut at = |delta: f64| -> Result<f64> {
                model.store.get_mut(id).data_mut()[i] = orig + delta;
                let v = loss_of(&mut model, false)?.0;
                model.store.get_mut(id).data_mut()[i] = orig;
                Ok(v)
            };
            let numeric = (at(step)? - at(-step)?) / (2.0 * step);
            worst = worst.max(relative_error(grad[i], numeric));
            diff = diff.max((grad[i] - numeric).abs());
            scale = scale.max(grad[i].abs()).max(numeric.abs());
        }
        report.push(GradcheckEntry {
            name: model.store.name(id).to_string(),
            max_rel_error: worst,
            tensor_rel_error: diff / scale,
            checked: components.len(),
        });
    }
    Ok(report)
}
