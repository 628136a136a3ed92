//! Loss terms of one training step.

use candle_core::{DType, Device, Result, Tensor};
use serde::{Deserialize, Serialize};

use crate::nets::bundle::ModelBundle;
use crate::nets::ops;

/// Scalar loss values of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cyc_forward: f64,
    pub cyc_backward: f64,
    pub mle_clean: f64,
    pub mle_mix: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.cyc_forward, self.cyc_backward, self.mle_clean, self.mle_mix, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// `w_cyc·(cyc_f + cyc_b) + w_mle·(mle_clean + mle_mix)`.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        w.cyc * (self.cyc_forward + self.cyc_backward) + w.mle * (self.mle_clean + self.mle_mix)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub cyc: f64,
    pub mle: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cyc: 1.0, mle: 1.0 }
    }
}

/// Mixed samples of a batch: row `rows[k]` of the degraded stream is mixed
/// with the same row of the clean stream using `lambdas[k]`.
#[derive(Debug, Clone)]
pub struct MixBatch {
    pub rows: Vec<u32>,
    pub lambdas: Vec<f64>,
    /// `K_mix × classes` soft targets.
    pub targets: Tensor,
}

/// Inputs of one step. The degraded and clean streams have equal batch size
/// but are unpaired.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub i_lq: Tensor,
    pub i_r: Tensor,
    pub i_hq: Tensor,
    /// `B × classes` clean soft labels.
    pub y_hq: Tensor,
    pub mix: Option<MixBatch>,
}

/// Differentiable loss terms; `total` is what gets minimized.
pub struct LossTensors {
    pub cyc_forward: Tensor,
    pub cyc_backward: Tensor,
    pub mle_clean: Tensor,
    pub mle_mix: Tensor,
    pub total: Tensor,
}

impl LossTensors {
    pub fn breakdown(&self) -> Result<LossBreakdown> {
        let s = |t: &Tensor| -> Result<f64> { t.to_dtype(DType::F64)?.to_scalar::<f64>() };
        Ok(LossBreakdown {
            cyc_forward: s(&self.cyc_forward)?,
            cyc_backward: s(&self.cyc_backward)?,
            mle_clean: s(&self.mle_clean)?,
            mle_mix: s(&self.mle_mix)?,
            total: s(&self.total)?,
        })
    }
}

/// Cycle terms for arbitrary forward maps: `‖f − t_b(t_a(f))‖₁` and
/// `‖hq − t_a(t_b(hq))‖₁`, each a mean absolute difference.
pub fn cycle_terms<A, B>(fused: &Tensor, i_hq: &Tensor, t_a: A, t_b: B) -> Result<(Tensor, Tensor)>
where
    A: Fn(&Tensor) -> Result<Tensor>,
    B: Fn(&Tensor) -> Result<Tensor>,
{
    if fused.dims() != i_hq.dims() {
        candle_core::bail!("cycle inputs differ in shape: {:?} vs {:?}", fused.dims(), i_hq.dims());
    }
    let forward = ops::l1_mean(fused, &t_b(&t_a(fused)?)?)?;
    let backward = ops::l1_mean(i_hq, &t_a(&t_b(i_hq)?)?)?;
    Ok((forward, backward))
}

/// Forward and backward cycle terms with `I_F = G_A(i_lq, i_r)`: the full
/// translator runs from degraded to clean, the gate-free one back.
/// Also returns `I_F` for reuse.
pub fn cycle_loss(bundle: &ModelBundle, i_lq: &Tensor, i_r: &Tensor, i_hq: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (_, fused) = bundle.vat.fuse(i_lq, i_r)?;
    let (forward, backward) = cycle_terms(&fused, i_hq, |x| bundle.vat.t_a.forward(x), |x| bundle.t_b.forward(x))?;
    Ok((forward, backward, fused))
}

/// `λ·a + (1 − λ)·b` with one `λ` per batch row.
pub fn mix_images(a: &Tensor, b: &Tensor, lambdas: &[f64]) -> Result<Tensor> {
    let n = lambdas.len();
    let lam = Tensor::from_vec(lambdas.to_vec(), (n, 1, 1, 1), &Device::Cpu)?.to_dtype(a.dtype())?;
    let rest = lam.affine(-1.0, 1.0)?;
    a.broadcast_mul(&lam)? + b.broadcast_mul(&rest)?
}

/// Clean term `CE(D(T_A(i_hq)), y_hq)` and mix term `CE(D(T_A(i_mix)), y_mix)`,
/// each averaged over its rows. The mix term is zero when nothing was mixed.
/// `fused` is `G_A(i_lq, i_r)` for the whole batch.
pub fn mle_loss(bundle: &ModelBundle, batch: &StepBatch, fused: &Tensor) -> Result<(Tensor, Tensor)> {
    let clean_logits = bundle.classifier.forward(&bundle.vat.t_a.forward(&batch.i_hq)?)?.logits;
    let mle_clean = ops::soft_cross_entropy(&clean_logits, &batch.y_hq)?.mean_all()?;
    let mle_mix = match &batch.mix {
        Some(mix) if !mix.rows.is_empty() => {
            let idx = Tensor::new(mix.rows.as_slice(), &Device::Cpu)?;
            let a = fused.index_select(&idx, 0)?;
            let b = batch.i_hq.index_select(&idx, 0)?;
            let i_mix = mix_images(&a, &b, &mix.lambdas)?;
            let logits = bundle.classifier.forward(&bundle.vat.t_a.forward(&i_mix)?)?.logits;
            ops::soft_cross_entropy(&logits, &mix.targets)?.mean_all()?
        }
        _ => Tensor::zeros((), fused.dtype(), &Device::Cpu)?,
    };
    Ok((mle_clean, mle_mix))
}

/// All loss terms for one batch. Terms with zero weight are still evaluated
/// for logging but kept out of `total`, so no gradient flows through them.
pub fn step_losses(bundle: &ModelBundle, batch: &StepBatch, weights: &LossWeights) -> Result<LossTensors> {
    let (cyc_forward, cyc_backward, fused) = cycle_loss(bundle, &batch.i_lq, &batch.i_r, &batch.i_hq)?;
    let (mle_clean, mle_mix) = mle_loss(bundle, batch, &fused)?;
    let zero = Tensor::zeros((), fused.dtype(), &Device::Cpu)?;
    let mut total = zero.clone();
    if weights.cyc != 0.0 {
        total = (total + ((&cyc_forward + &cyc_backward)? * weights.cyc)?)?;
    }
    if weights.mle != 0.0 {
        total = (total + ((&mle_clean + &mle_mix)? * weights.mle)?)?;
    }
    Ok(LossTensors {
        cyc_forward,
        cyc_backward,
        mle_clean,
        mle_mix,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::bundle::VatArchitecture;
    use crate::nets::translator::configure_identity;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_images(rng: &mut ChaCha8Rng, n: usize, side: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n * side * side * 3).map(|_| rng.gen_range(lo..hi)).collect()
    }

    fn tensor(v: &[f64], n: usize, side: usize) -> Tensor {
        Tensor::from_vec(v.to_vec(), (n, side, side, 3), &Device::Cpu).unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn identity_translators_have_zero_cycle() {
        let b = ModelBundle::random(VatArchitecture::default(), 3, DType::F64).unwrap();
        let cfg = b.vat.arch.translator;
        configure_identity(&b.theta_a, "t_a", &cfg).unwrap();
        configure_identity(&b.theta_b, "t_b", &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lq = tensor(&rand_images(&mut rng, 2, 8, 0.05, 0.95), 2, 8);
        let r = tensor(&rand_images(&mut rng, 2, 8, 0.05, 0.95), 2, 8);
        let hq = tensor(&rand_images(&mut rng, 2, 8, 0.05, 0.95), 2, 8);
        let (f, bwd, _) = cycle_loss(&b, &lq, &r, &hq).unwrap();
        assert_eq!(scalar(&f), 0.0);
        assert_eq!(scalar(&bwd), 0.0);
    }

    #[test]
    fn exact_inverse_shifts_have_zero_cycle() {
        let c = 0.1;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = tensor(&rand_images(&mut rng, 2, 4, c + 1e-3, 1.0 - c - 1e-3), 2, 4);
        let hq = tensor(&rand_images(&mut rng, 2, 4, c + 1e-3, 1.0 - c - 1e-3), 2, 4);
        let (a, b) = cycle_terms(&f, &hq, |x| (x + c)?.clamp(0.0, 1.0), |x| (x - c)?.clamp(0.0, 1.0)).unwrap();
        assert!(scalar(&a) < 1e-12);
        assert!(scalar(&b) < 1e-12);
    }

    /// Per-pixel stub maps `x ↦ σ(w·x + b)` evaluated with plain loops.
    fn reference_cycle(f: &[f64], hq: &[f64], a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let ta = |x: f64| sig(a.0 * x + a.1);
        let tb = |x: f64| sig(b.0 * x + b.1);
        let fwd = f.iter().map(|&x| (x - tb(ta(x))).abs()).sum::<f64>() / f.len() as f64;
        let bwd = hq.iter().map(|&x| (x - ta(tb(x))).abs()).sum::<f64>() / hq.len() as f64;
        (fwd, bwd)
    }

    #[test]
    fn cycle_matches_reference_on_stub_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let f = rand_images(&mut rng, 2, 4, 0.0, 1.0);
            let hq = rand_images(&mut rng, 2, 4, 0.0, 1.0);
            let a = (rng.gen_range(-3.0..3.0), rng.gen_range(-1.0..1.0));
            let b = (rng.gen_range(-3.0..3.0), rng.gen_range(-1.0..1.0));
            let (fwd, bwd) = cycle_terms(
                &tensor(&f, 2, 4),
                &tensor(&hq, 2, 4),
                |x| candle_nn::ops::sigmoid(&x.affine(a.0, a.1)?),
                |x| candle_nn::ops::sigmoid(&x.affine(b.0, b.1)?),
            )
            .unwrap();
            let (rf, rb) = reference_cycle(&f, &hq, a, b);
            assert!((scalar(&fwd) - rf).abs() < 1e-12);
            assert!((scalar(&bwd) - rb).abs() < 1e-12);
        }
    }

    #[test]
    fn cycle_rejects_shape_mismatch() {
        let a = Tensor::zeros((1, 4, 4, 3), DType::F64, &Device::Cpu).unwrap();
        let b = Tensor::zeros((1, 8, 8, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(cycle_terms(&a, &b, |x| Ok(x.clone()), |x| Ok(x.clone())).is_err());
    }

    fn reference_ce(logits: &[f64], target: &[f64]) -> f64 {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        -target.iter().zip(logits).map(|(y, z)| y * (z - lse)).sum::<f64>()
    }

    #[test]
    fn cross_entropy_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, k) = (3, 5);
        let z: Vec<f64> = (0..n * k).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let mut y: Vec<f64> = (0..n * k).map(|_| rng.gen_range(0.0..1.0)).collect();
        for row in y.chunks_mut(k) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let zt = Tensor::from_vec(z.clone(), (n, k), &Device::Cpu).unwrap();
        let yt = Tensor::from_vec(y.clone(), (n, k), &Device::Cpu).unwrap();
        let got: Vec<f64> = ops::soft_cross_entropy(&zt, &yt).unwrap().to_vec1().unwrap();
        for i in 0..n {
            let r = reference_ce(&z[i * k..(i + 1) * k], &y[i * k..(i + 1) * k]);
            assert!((got[i] - r).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_floor_is_target_entropy() {
        let y = [0.2f64, 0.3, 0.5];
        let z: Vec<f64> = y.iter().map(|p| p.ln()).collect();
        let ce = ops::soft_cross_entropy(
            &Tensor::from_vec(z, (1, 3), &Device::Cpu).unwrap(),
            &Tensor::from_vec(y.to_vec(), (1, 3), &Device::Cpu).unwrap(),
        )
        .unwrap()
        .to_vec1::<f64>()
        .unwrap()[0];
        let h: f64 = -y.iter().map(|p| p * p.ln()).sum::<f64>();
        assert!((ce - h).abs() < 1e-12);
        let one_hot = ops::soft_cross_entropy(
            &Tensor::new(&[[0.0f64, 80.0]], &Device::Cpu).unwrap(),
            &Tensor::new(&[[0.0f64, 1.0]], &Device::Cpu).unwrap(),
        )
        .unwrap()
        .to_vec1::<f64>()
        .unwrap()[0];
        assert!(one_hot.abs() < 1e-12);
    }

    #[test]
    fn mix_images_corners() {
        let a = Tensor::ones((2, 4, 4, 3), DType::F64, &Device::Cpu).unwrap();
        let b = Tensor::zeros((2, 4, 4, 3), DType::F64, &Device::Cpu).unwrap();
        let m = mix_images(&a, &b, &[1.0, 0.0]).unwrap();
        let v: Vec<f64> = m.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v[..48].iter().all(|&x| x == 1.0));
        assert!(v[48..].iter().all(|&x| x == 0.0));
    }

    fn batch(rng: &mut ChaCha8Rng, with_mix: bool) -> StepBatch {
        let n = 2;
        let y: Vec<f64> = (0..n).flat_map(|i| (0..10).map(move |c| if c == i { 0.91 } else { 0.01 })).collect();
        StepBatch {
            i_lq: tensor(&rand_images(rng, n, 16, 0.0, 1.0), n, 16),
            i_r: tensor(&rand_images(rng, n, 16, 0.0, 1.0), n, 16),
            i_hq: tensor(&rand_images(rng, n, 16, 0.0, 1.0), n, 16),
            y_hq: Tensor::from_vec(y.clone(), (n, 10), &Device::Cpu).unwrap(),
            mix: with_mix.then(|| MixBatch {
                rows: vec![1],
                lambdas: vec![0.3],
                targets: Tensor::from_vec(y[10..].to_vec(), (1, 10), &Device::Cpu).unwrap(),
            }),
        }
    }

    #[test]
    fn total_is_weighted_sum() {
        let b = ModelBundle::random(VatArchitecture::default(), 5, DType::F64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (w, mix) in [((1.0, 1.0), true), ((0.0, 1.0), true), ((1.0, 0.0), false), ((0.5, 2.0), true)] {
            let weights = LossWeights { cyc: w.0, mle: w.1 };
            let l = step_losses(&b, &batch(&mut rng, mix), &weights).unwrap().breakdown().unwrap();
            assert!(l.is_finite());
            assert!((l.total - l.weighted_sum(&weights)).abs() < 1e-6);
            if !mix {
                assert_eq!(l.mle_mix, 0.0);
            }
        }
    }
}
