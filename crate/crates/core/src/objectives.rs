//! Training objectives: class-weighted cross-entropy for the supervised heads,
//! MSE for denoising pretraining, and the weighted multi-task sum.

use serde::{Deserialize, Serialize};

use crate::tensor::{Float, Tape, Tensor};
use crate::{Error, Result};

/// Positive per-class loss weights. Class 0 is background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.len() < 2 {
            return Err(Error::Config(format!("need at least 2 class weights, got {}", weights.len())));
        }
        if let Some((i, w)) = weights.iter().enumerate().find(|(_, w)| !(**w > 0.0 && w.is_finite())) {
            return Err(Error::Config(format!("class weight {i} = {w} must be positive")));
        }
        Ok(Self(weights))
    }

    pub fn uniform(num_classes: usize) -> Self {
        Self(vec![1.0; num_classes.max(2)])
    }

    /// Binary weights `[1, ratio]`: a `ratio:1` foreground-to-background weighting.
    pub fn foreground_ratio(ratio: f64) -> Result<Self> {
        Self::new(vec![1.0, ratio])
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn to_float<F: Float>(&self) -> Vec<F> {
        self.0.iter().map(|&w| F::from_f64_lossy(w)).collect()
    }
}

impl TryFrom<Vec<f64>> for ClassWeights {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ClassWeights> for Vec<f64> {
    fn from(w: ClassWeights) -> Self {
        w.0
    }
}

/// Loss coefficients for joint change-detection and segmentation training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiTaskWeights {
    pub lambda_cd: f64,
    pub lambda_ss: f64,
}

impl MultiTaskWeights {
    pub fn new(lambda_cd: f64, lambda_ss: f64) -> Result<Self> {
        let w = Self { lambda_cd, lambda_ss };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_cd", self.lambda_cd), ("lambda_ss", self.lambda_ss)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be finite and non-negative")));
            }
        }
        if self.lambda_cd == 0.0 && self.lambda_ss == 0.0 {
            return Err(Error::Config("lambda_cd and lambda_ss cannot both be zero".into()));
        }
        Ok(())
    }
}

impl Default for MultiTaskWeights {
    fn default() -> Self {
        Self {
            lambda_cd: 1.0,
            lambda_ss: 1.0,
        }
    }
}

/// Weighted mean of per-pixel negative log-likelihoods:
/// `sum_p w[y_p] * -log softmax(z_p)[y_p] / sum_p w[y_p]`.
///
/// `logits` is `[B, K, H, W]`, `target` holds `B * H * W` class indices.
pub fn weighted_cross_entropy<F: Float>(logits: &Tensor<F>, target: &[usize], weights: &ClassWeights) -> Result<F> {
    check_logits(logits, weights)?;
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let loss = tape.weighted_cross_entropy(z, target, &weights.to_float())?;
    Ok(tape.value(loss).item())
}

fn check_logits<F: Float>(logits: &Tensor<F>, weights: &ClassWeights) -> Result<()> {
    if logits.rank() != 4 {
        return Err(Error::Shape(format!("logits must be [B, K, H, W], got {:?}", logits.shape())));
    }
    if !logits.all_finite() {
        return Err(Error::Numeric("logits contain non-finite values".into()));
    }
    if logits.shape()[1] != weights.num_classes() {
        return Err(Error::Shape(format!(
            "{} logit channels but {} class weights",
            logits.shape()[1],
            weights.num_classes()
        )));
    }
    Ok(())
}

/// Mean of squared elementwise differences.
pub fn mse_denoising_loss<F: Float>(predicted: &Tensor<F>, truth: &Tensor<F>) -> Result<F> {
    let mut tape = Tape::new();
    let p = tape.constant(predicted.clone());
    let loss = tape.mse(p, truth)?;
    Ok(tape.value(loss).item())
}

/// `lambda_cd * l_cd + lambda_ss * l_ss`.
pub fn multitask_loss(l_cd: f64, l_ss: f64, w: &MultiTaskWeights) -> f64 {
    w.lambda_cd * l_cd + w.lambda_ss * l_ss
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Per-pixel oracle, written independently of the tape kernels.
    fn brute_force(logits: &[f64], k: usize, target: &[usize], w: &[f64]) -> f64 {
        let pixels = target.len();
        let (mut num, mut den) = (0.0, 0.0);
        for p in 0..pixels {
            let z: Vec<f64> = (0..k).map(|c| logits[c * pixels + p]).collect();
            let denom: f64 = z.iter().map(|v| v.exp()).sum();
            let prob = z[target[p]].exp() / denom;
            num += w[target[p]] * -prob.ln();
            den += w[target[p]];
        }
        num / den
    }

    #[test]
    fn zero_logits_give_ln_two() {
        let z = Tensor::<f64>::zeros(&[2, 2, 3, 3]);
        let target: Vec<usize> = (0..18).map(|i| i % 2).collect();
        let l = weighted_cross_entropy(&z, &target, &ClassWeights::uniform(2)).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_pixel_weighted_example() {
        // one image, two pixels in a row; channel-major layout
        let z = Tensor::<f64>::from_vec(&[1, 2, 1, 2], vec![0.3, -1.2, 1.1, 0.4]);
        let target = [1, 0];
        let w = ClassWeights::new(vec![1.0, 3.0]).unwrap();
        let got = weighted_cross_entropy(&z, &target, &w).unwrap();
        let expected = brute_force(z.data(), 2, &target, &[1.0, 3.0]);
        assert!((got - expected).abs() < 1e-14);
        // hand arithmetic: pixel 0 -> class 1 (w=3), pixel 1 -> class 0 (w=1)
        let nll0 = -(1.1f64.exp() / (0.3f64.exp() + 1.1f64.exp())).ln();
        let nll1 = -((-1.2f64).exp() / ((-1.2f64).exp() + 0.4f64.exp())).ln();
        assert!((got - (3.0 * nll0 + nll1) / 4.0).abs() < 1e-14);
    }

    #[test]
    fn confident_correct_logits_drive_loss_to_zero() {
        let mut last = f64::INFINITY;
        for scale in [1.0, 10.0, 40.0] {
            let z = Tensor::<f64>::from_vec(&[1, 2, 1, 2], vec![scale, -scale, -scale, scale]);
            let l = weighted_cross_entropy(&z, &[0, 1], &ClassWeights::uniform(2)).unwrap();
            assert!(l < last);
            last = l;
        }
        assert!(last < 1e-30);
    }

    #[test]
    fn label_out_of_range_reports_index() {
        let z = Tensor::<f64>::zeros(&[1, 2, 1, 3]);
        let err = weighted_cross_entropy(&z, &[0, 1, 2], &ClassWeights::uniform(2)).unwrap_err();
        assert!(matches!(err, Error::Label { index: 2, class: 2, .. }));
    }

    #[test]
    fn mse_examples() {
        let a = Tensor::<f64>::from_vec(&[5], vec![0.5, -1.0, 2.0, 0.0, 3.0]);
        assert_eq!(mse_denoising_loss(&a, &a).unwrap(), 0.0);
        let shifted = a.map(|v| v + 2.0);
        assert!((mse_denoising_loss(&shifted, &a).unwrap() - 4.0).abs() < 1e-12);
        let b = Tensor::<f64>::from_vec(&[5], vec![1.0, 1.0, 1.0, 1.0, 1.0]);
        // (0.25 + 4 + 1 + 1 + 4) / 5
        assert!((mse_denoising_loss(&a, &b).unwrap() - 10.25 / 5.0).abs() < 1e-12);
        assert!(matches!(mse_denoising_loss(&a, &Tensor::zeros(&[4])), Err(Error::Shape(_))));
    }

    #[test]
    fn multitask_examples() {
        let w = MultiTaskWeights::new(1.0, 1.0).unwrap();
        assert!((multitask_loss(0.5, 0.7, &w) - 1.2).abs() < 1e-15);
        let half = MultiTaskWeights::new(0.5, 0.5).unwrap();
        assert_eq!(multitask_loss(0.8, 0.4, &half), (0.8 + 0.4) / 2.0);
        let cd_only = MultiTaskWeights::new(0.7, 0.0).unwrap();
        assert_eq!(multitask_loss(1.0, 99.0, &cd_only), 0.7);
        assert!(MultiTaskWeights::new(0.0, 0.0).is_err());
        assert!(MultiTaskWeights::new(-1.0, 1.0).is_err());
    }

    #[test]
    fn class_weights_validation() {
        assert!(ClassWeights::new(vec![1.0, 0.0]).is_err());
        assert!(ClassWeights::new(vec![1.0]).is_err());
        assert_eq!(ClassWeights::foreground_ratio(3.0).unwrap().as_slice(), &[1.0, 3.0]);
    }

    fn logits_and_target(k: usize) -> impl Strategy<Value = (Vec<f64>, Vec<usize>)> {
        (
            prop::collection::vec(-5.0f64..5.0, k * 12),
            prop::collection::vec(0..k, 12),
        )
    }

    proptest! {
        #[test]
        fn uniform_weights_equal_plain_cross_entropy((z, y) in logits_and_target(3)) {
            let t = Tensor::from_vec(&[1, 3, 3, 4], z.clone());
            let got = weighted_cross_entropy(&t, &y, &ClassWeights::uniform(3)).unwrap();
            let plain = brute_force(&z, 3, &y, &[1.0; 3]);
            prop_assert!((got - plain).abs() <= 1e-7);
        }

        #[test]
        fn pixel_permutation_leaves_loss_unchanged((z, y) in logits_and_target(2), shift in 1usize..12) {
            let w = ClassWeights::new(vec![1.0, 3.0]).unwrap();
            let t = Tensor::from_vec(&[1, 2, 1, 12], z.clone());
            let perm: Vec<usize> = (0..12).map(|p| (p + shift) % 12).collect();
            let z2: Vec<f64> = (0..2).flat_map(|c| perm.iter().map(move |&p| (c, p))).map(|(c, p)| z[c * 12 + p]).collect();
            let y2: Vec<usize> = perm.iter().map(|&p| y[p]).collect();
            let t2 = Tensor::from_vec(&[1, 2, 1, 12], z2);
            let a = weighted_cross_entropy(&t, &y, &w).unwrap();
            let b = weighted_cross_entropy(&t2, &y2, &w).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }

        #[test]
        fn weight_scaling_is_normalized_away((z, y) in logits_and_target(3), c in 0.01f64..100.0) {
            let t = Tensor::from_vec(&[1, 3, 3, 4], z);
            let w = ClassWeights::new(vec![1.0, 2.5, 0.7]).unwrap();
            let scaled = ClassWeights::new(w.as_slice().iter().map(|v| v * c).collect()).unwrap();
            let a = weighted_cross_entropy(&t, &y, &w).unwrap();
            let b = weighted_cross_entropy(&t, &y, &scaled).unwrap();
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
        }

        #[test]
        fn multitask_is_bilinear(l1 in 0.0f64..10.0, l2 in 0.0f64..10.0, m1 in 0.0f64..10.0, m2 in 0.0f64..10.0,
                                 a in 0.01f64..3.0, b in 0.01f64..3.0, s in 0.1f64..5.0) {
            let w = MultiTaskWeights::new(a, b).unwrap();
            let sum = multitask_loss(l1 + m1, l2 + m2, &w);
            prop_assert!((sum - multitask_loss(l1, l2, &w) - multitask_loss(m1, m2, &w)).abs() < 1e-9);
            prop_assert!((multitask_loss(s * l1, s * l2, &w) - s * multitask_loss(l1, l2, &w)).abs() < 1e-9);
            let ws = MultiTaskWeights::new(s * a, s * b).unwrap();
            prop_assert!((multitask_loss(l1, l2, &ws) - s * multitask_loss(l1, l2, &w)).abs() < 1e-9);
        }
    }
}
