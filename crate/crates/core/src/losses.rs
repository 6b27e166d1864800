//! Training objective: binary cross-entropy plus dice loss on both the
//! coarse and the final change maps, all terms weighted equally.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::ChangeMap;
use crate::nn::sigmoid;

/// Smoothing added to the dice numerator and denominator. With it an empty
/// target predicted as empty scores a loss of exactly 0.
pub const DICE_SMOOTH: f64 = 1.0;

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    if a.elem_count() == 0 {
        return Err(Error::shape(format!("{what}: empty input")));
    }
    Ok(())
}

/// `1 − (2Σ y·ŷ + ε) / (Σ y + Σ ŷ + ε)` summed over every pixel of the batch.
pub fn dice_loss(pred: &Tensor, target: &Tensor, smooth: f64) -> Result<Tensor> {
    same_shape(pred, target, "dice loss")?;
    let inter = (pred * target)?.sum_all()?;
    let denom = (pred.sum_all()? + target.sum_all()?)?;
    let ratio = ((inter * 2.0)? + smooth)?.div(&(denom + smooth)?)?;
    Ok(ratio.affine(-1.0, 1.0)?)
}

/// Mean of `max(z, 0) − z·y + ln(1 + e^{−|z|})`, the overflow-free form of
/// `−[y ln σ(z) + (1 − y) ln(1 − σ(z))]`.
pub fn bce_with_logits(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape(logits, target, "cross-entropy")?;
    let softplus = logits.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    let per_pixel = ((logits.relu()? - (logits * target)?)? + softplus)?;
    Ok(per_pixel.mean_all()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_coarse: f64,
    pub dice_coarse: f64,
    pub ce_final: f64,
    pub dice_final: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,ce_coarse,dice_coarse,ce_final,dice_final,total";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{},{}",
            self.ce_coarse, self.dice_coarse, self.ce_final, self.dice_final, self.total
        )
    }
}

/// Differentiable total together with its scalar breakdown.
#[derive(Debug, Clone)]
pub struct Objective {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn total_loss(coarse: &ChangeMap, final_map: &ChangeMap, target: &Tensor) -> Result<Objective> {
    if coarse.stride != 1 || final_map.stride != 1 {
        return Err(Error::shape("supervised maps must be at stride 1"));
    }
    let target = target.to_dtype(coarse.logits.dtype())?;
    let ce_coarse = bce_with_logits(&coarse.logits, &target)?;
    let dice_coarse = dice_loss(&sigmoid(&coarse.logits)?, &target, DICE_SMOOTH)?;
    let ce_final = bce_with_logits(&final_map.logits, &target)?;
    let dice_final = dice_loss(&sigmoid(&final_map.logits)?, &target, DICE_SMOOTH)?;
    let total = (((&ce_coarse + &dice_coarse)? + &ce_final)? + &dice_final)?;
    let breakdown = LossBreakdown {
        ce_coarse: scalar(&ce_coarse)?,
        dice_coarse: scalar(&dice_coarse)?,
        ce_final: scalar(&ce_final)?,
        dice_final: scalar(&dice_final)?,
        total: scalar(&total)?,
    };
    Ok(Objective { total, breakdown })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_slice(v, v.len(), &Device::Cpu).unwrap()
    }

    fn s(x: Tensor) -> f64 {
        x.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn dice_hand_case_without_smoothing() {
        let l = s(dice_loss(&t(&[0.5, 0.5, 1.0, 0.0]), &t(&[1.0, 0.0, 1.0, 0.0]), 0.0).unwrap());
        assert!((l - 0.25).abs() < 1e-15);
    }

    #[test]
    fn dice_limits() {
        let y = t(&[1.0, 0.0, 1.0, 0.0]);
        let perfect = s(dice_loss(&y, &y, DICE_SMOOTH).unwrap());
        assert!(perfect.abs() < 1e-15);
        let miss = s(dice_loss(&t(&[0.0; 4]), &y, DICE_SMOOTH).unwrap());
        assert!((miss - (1.0 - 1.0 / 3.0)).abs() < 1e-15);
        let miss_raw = s(dice_loss(&t(&[0.0; 4]), &y, 0.0).unwrap());
        assert_eq!(miss_raw, 1.0);
        let empty = s(dice_loss(&t(&[0.0; 4]), &t(&[0.0; 4]), DICE_SMOOTH).unwrap());
        assert_eq!(empty, 0.0);
    }

    #[test]
    fn bce_zero_logit_is_ln2() {
        for y in [0.0, 1.0] {
            let l = s(bce_with_logits(&t(&[0.0]), &t(&[y])).unwrap());
            assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn bce_is_stable_for_large_logits() {
        // softplus(−20) = ln(1 + e^−20), reference value from 30-digit arithmetic
        let l = s(bce_with_logits(&t(&[20.0]), &t(&[1.0])).unwrap());
        assert!((l - 2.061_153_620_314_381_5e-9).abs() < 1e-15, "{l}");
        let huge = s(bce_with_logits(&t(&[1e4, -1e4]), &t(&[0.0, 1.0])).unwrap());
        assert!((huge - 1e4).abs() < 1e-9);
    }

    #[test]
    fn bce_is_mean_of_pixels() {
        let z: [f64; 3] = [-2.0, 0.3, 4.0];
        let y = [1.0, 0.0, 1.0];
        let manual: f64 = z
            .iter()
            .zip(y)
            .map(|(&z, y)| {
                let p: f64 = 1.0 / (1.0 + (-z).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 3.0;
        let l = s(bce_with_logits(&t(&z), &t(&y)).unwrap());
        assert!((l - manual).abs() < 1e-14);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        assert!(dice_loss(&t(&[0.1, 0.2]), &t(&[1.0]), 1.0).is_err());
        assert!(bce_with_logits(&t(&[0.1, 0.2]), &t(&[1.0])).is_err());
    }

    #[test]
    fn total_is_sum_and_symmetric() {
        let dev = Device::Cpu;
        let logits = Tensor::from_vec(vec![-1.0, 2.0, 0.5, -3.0], (1, 1, 2, 2), &dev).unwrap();
        let target = Tensor::from_vec(vec![0.0, 1.0, 1.0, 0.0], (1, 1, 2, 2), &dev).unwrap();
        let a = ChangeMap {
            logits: logits.clone(),
            stride: 1,
        };
        let b = ChangeMap { logits, stride: 1 };
        let o1 = total_loss(&a, &b, &target).unwrap().breakdown;
        let o2 = total_loss(&b, &a, &target).unwrap().breakdown;
        assert_eq!(o1.total, o2.total);
        let sum = o1.ce_coarse + o1.dice_coarse + o1.ce_final + o1.dice_final;
        assert!((o1.total - sum).abs() < 1e-14);
    }

    #[test]
    fn perfect_hard_predictions_cost_nothing() {
        let dev = Device::Cpu;
        let y = vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0];
        let z: Vec<f64> = y.iter().map(|v| if *v > 0.5 { 60.0 } else { -60.0 }).collect();
        let target = Tensor::from_vec(y, (1, 1, 2, 3), &dev).unwrap();
        let m = ChangeMap {
            logits: Tensor::from_vec(z, (1, 1, 2, 3), &dev).unwrap(),
            stride: 1,
        };
        let o = total_loss(&m, &m, &target).unwrap().breakdown;
        assert!(o.total < 1e-12, "{o:?}");
    }

    fn toy_map(values: [f64; 9]) -> candle_core::Var {
        candle_core::Var::from_tensor(&Tensor::from_vec(values.to_vec(), (1, 1, 3, 3), &Device::Cpu).unwrap()).unwrap()
    }

    fn toy_target() -> Tensor {
        Tensor::from_vec(
            vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            (1, 1, 3, 3),
            &Device::Cpu,
        )
        .unwrap()
    }

    #[test]
    fn dice_gradient_matches_finite_differences() {
        let p = toy_map([0.2, 0.9, 0.4, 0.7, 0.55, 0.1, 0.35, 0.8, 0.6]);
        let y = toy_target();
        for smooth in [0.0, DICE_SMOOTH] {
            let err = crate::nn::gradient_check(&p, 1e-6, || dice_loss(p.as_tensor(), &y, smooth)).unwrap();
            assert!(err <= 1e-4, "smooth {smooth}: {err}");
        }
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let z = toy_map([-2.1, 0.4, 1.3, -0.2, 3.0, -0.7, 0.9, -1.5, 0.05]);
        let y = toy_target();
        let err = crate::nn::gradient_check(&z, 1e-6, || bce_with_logits(z.as_tensor(), &y)).unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let z = toy_map([-0.3, 1.1, 0.6, -1.9, 0.25, 2.2, -0.8, 0.45, -0.1]);
        let y = toy_target();
        let err = crate::nn::gradient_check(&z, 1e-6, || {
            let m = ChangeMap {
                logits: z.as_tensor().clone(),
                stride: 1,
            };
            Ok(total_loss(&m, &m, &y)?.total)
        })
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    proptest! {
        #[test]
        fn dice_bounded_and_permutation_invariant(
            pairs in proptest::collection::vec((0.0f64..=1.0, any::<bool>()), 1..40),
            rot in 0usize..40,
        ) {
            let p: Vec<f64> = pairs.iter().map(|x| x.0).collect();
            let y: Vec<f64> = pairs.iter().map(|x| f64::from(u8::from(x.1))).collect();
            let l = s(dice_loss(&t(&p), &t(&y), DICE_SMOOTH).unwrap());
            prop_assert!((0.0..=1.0).contains(&l));
            let k = rot % p.len();
            let (mut pr, mut yr) = (p.clone(), y.clone());
            pr.rotate_left(k);
            yr.rotate_left(k);
            let lr = s(dice_loss(&t(&pr), &t(&yr), DICE_SMOOTH).unwrap());
            prop_assert!((l - lr).abs() < 1e-12);
            let b = s(bce_with_logits(&t(&p), &t(&y)).unwrap());
            prop_assert!(b >= 0.0);
        }

        #[test]
        fn dice_moves_toward_target_never_increase(
            pairs in proptest::collection::vec((0.0f64..=1.0, any::<bool>()), 2..30),
            idx in 0usize..30,
            frac in 0.0f64..=1.0,
        ) {
            let p: Vec<f64> = pairs.iter().map(|x| x.0).collect();
            let mut y: Vec<f64> = pairs.iter().map(|x| f64::from(u8::from(x.1))).collect();
            y[0] = 1.0;
            let i = idx % p.len();
            let mut q = p.clone();
            q[i] += frac * (y[i] - q[i]);
            let before = s(dice_loss(&t(&p), &t(&y), 0.0).unwrap());
            let after = s(dice_loss(&t(&q), &t(&y), 0.0).unwrap());
            prop_assert!(after <= before + 1e-12);
        }
    }
}
