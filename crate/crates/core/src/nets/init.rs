//! Seeded parameter initialization.
//!
//! candle's CPU initializers draw from a thread-local RNG, so a `VarMap`
//! filled through `VarBuilder::from_varmap` is not reproducible. This backend
//! creates missing variables from a ChaCha stream instead, in request order.

use std::sync::Mutex;

use candle_core::{DType, Device, Result, Shape, Tensor, Var};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

struct SeededBackend {
    varmap: VarMap,
    rng: Mutex<ChaCha8Rng>,
}

impl SeededBackend {
    fn sample(&self, shape: &Shape, init: Init) -> Result<Vec<f64>> {
        let n = shape.elem_count();
        let mut rng = self.rng.lock().expect("init rng poisoned");
        Ok(match init {
            Init::Const(v) => vec![v; n],
            Init::Uniform { lo, up } => (0..n).map(|_| rng.gen_range(lo..up)).collect(),
            Init::Randn { mean, stdev } => {
                let normal = Normal::new(mean, stdev).map_err(|e| candle_core::Error::Msg(e.to_string()))?;
                (0..n).map(|_| normal.sample(&mut *rng)).collect()
            }
            Init::Kaiming { .. } => candle_core::bail!("kaiming init is not supported by the seeded backend"),
        })
    }
}

impl SimpleBackend for SeededBackend {
    fn get(&self, s: Shape, name: &str, h: Init, dtype: DType, dev: &Device) -> Result<Tensor> {
        if self.contains_tensor(name) {
            return self.varmap.get(s, name, h, dtype, dev);
        }
        let values = self.sample(&s, h)?;
        let tensor = Tensor::from_vec(values, s, dev)?.to_dtype(dtype)?;
        let var = Var::from_tensor(&tensor)?;
        let out = var.as_tensor().clone();
        self.varmap
            .data()
            .lock()
            .expect("varmap lock poisoned")
            .insert(name.to_string(), var);
        Ok(out)
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.varmap.data().lock().expect("varmap lock poisoned").contains_key(name)
    }
}

/// A `VarBuilder` that registers new trainable variables in `varmap`, drawing
/// their initial values from `seed`.
pub fn seeded_var_builder(varmap: &VarMap, seed: u64, dtype: DType, device: &Device) -> VarBuilder<'static> {
    let backend = SeededBackend {
        varmap: varmap.clone(),
        rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
    };
    VarBuilder::from_backend(Box::new(backend), dtype, device.clone())
}
