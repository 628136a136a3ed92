//! Central-difference check of autograd gradients for the translator
//! parameters.

use candle_core::{DType, Tensor, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{step_losses, LossWeights, StepBatch};
use crate::error::{Result, VatError};
use crate::nets::bundle::ModelBundle;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateCheck {
    pub parameter: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub coordinates: Vec<CoordinateCheck>,
    pub max_relative_error: f64,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn set_coordinate(var: &Var, index: usize, value: f64) -> Result<()> {
    let t = var.as_tensor();
    let mut flat: Vec<f64> = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
    flat[index] = value;
    let next = Tensor::from_vec(flat, t.shape(), t.device())?.to_dtype(t.dtype())?;
    var.set(&next)?;
    Ok(())
}

fn total(bundle: &ModelBundle, batch: &StepBatch, weights: &LossWeights) -> Result<f64> {
    Ok(step_losses(bundle, batch, weights)?.total.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Compares the gradient of the total loss with respect to `count` random
/// coordinates of `θ_A` against central differences with step `h`. The
/// bundle should be built in `f64`.
pub fn check_translator_gradients(
    bundle: &ModelBundle,
    batch: &StepBatch,
    weights: &LossWeights,
    count: usize,
    h: f64,
    floor: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut named: Vec<(String, Var)> = {
        let data = bundle.theta_a.data().lock().expect("varmap lock poisoned");
        data.iter()
            .filter(|(k, _)| bundle.vat.arch.gate_enabled || !k.starts_with("gate."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    };
    if named.is_empty() || count == 0 {
        return Err(VatError::Empty("no translator coordinates to check".into()));
    }
    named.sort_by(|a, b| a.0.cmp(&b.0));

    let loss = step_losses(bundle, batch, weights)?.total;
    let grads = loss.backward()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coordinates = Vec::with_capacity(count);
    for _ in 0..count {
        let (name, var) = &named[rng.gen_range(0..named.len())];
        let index = rng.gen_range(0..var.elem_count());
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?[index],
            None => 0.0,
        };
        let original = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?[index];
        set_coordinate(var, index, original + h)?;
        let plus = total(bundle, batch, weights)?;
        set_coordinate(var, index, original - h)?;
        let minus = total(bundle, batch, weights)?;
        set_coordinate(var, index, original)?;
        let numeric = (plus - minus) / (2.0 * h);
        coordinates.push(CoordinateCheck {
            parameter: name.clone(),
            index,
            analytic,
            numeric,
            relative_error: relative_error(analytic, numeric, floor),
        });
    }
    let max_relative_error = coordinates.iter().map(|c| c.relative_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        coordinates,
        max_relative_error,
    })
}
