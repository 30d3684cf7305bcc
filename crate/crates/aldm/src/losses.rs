//! Scalar training objectives: noise MSE, class-balanced discriminator
//! cross-entropy, the adversarial generator loss and their combination.

use crate::error::{AldmError, Result};
use crate::tape::Var;
use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

/// Reserved label value masked out of every loss. The synthetic dataset
/// labels all pixels, so this only matters for external data.
pub const IGNORE_LABEL: usize = 255;

/// Per-class balancing weights (inverse per-pixel class frequency).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    pub gamma: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LossBreakdown {
    pub l_noise: f64,
    pub l_adv: Option<f64>,
    pub l_dm: f64,
    pub l_dis: Option<f64>,
    pub lambda_adv: f64,
}

/// Mean squared error between a noise target and its prediction, on-tape.
pub fn noise_loss<'t>(eps_hat: Var<'t>, eps: &Array4<f64>) -> Result<Var<'t>> {
    if eps_hat.shape() != eps.shape() {
        return Err(AldmError::invalid(format!(
            "noise_loss shape mismatch: {:?} vs {:?}",
            eps_hat.shape(),
            eps.shape()
        )));
    }
    let target = eps_hat.tape_leaf_of(&eps.clone().into_dyn()).detach();
    Ok(eps_hat.sub(target).square().mean_all())
}

/// Plain-value mean squared error (no gradients).
pub fn noise_loss_value(eps: &Array4<f64>, eps_hat: &Array4<f64>) -> Result<f64> {
    if eps.dim() != eps_hat.dim() {
        return Err(AldmError::invalid("noise_loss shape mismatch"));
    }
    let d = eps - eps_hat;
    Ok(d.mapv(|v| v * v).sum() / d.len() as f64)
}

/// Inverse per-pixel class frequency over a batch of label maps.
///
/// `gamma[c] = H*W / (per-image mean pixel count of class c)`; classes absent
/// from the batch get weight zero.
pub fn class_weights(labels: &Array3<usize>, n_classes: usize) -> Result<ClassWeights> {
    let (b, h, w) = labels.dim();
    let mut counts = vec![0usize; n_classes];
    for &l in labels.iter() {
        if l == IGNORE_LABEL {
            continue;
        }
        if l >= n_classes {
            return Err(AldmError::invalid(format!(
                "label {l} out of range for {n_classes} classes"
            )));
        }
        counts[l] += 1;
    }
    let pixels = (h * w) as f64;
    let gamma = counts
        .iter()
        .map(|&c| {
            if c == 0 {
                0.0
            } else {
                pixels / (c as f64 / b as f64)
            }
        })
        .collect();
    Ok(ClassWeights { gamma })
}

fn weight_maps(
    labels: &Array3<usize>,
    gamma: Option<&ClassWeights>,
    n_valid: usize,
) -> Result<(Array3<usize>, Array3<f64>)> {
    let dim = labels.dim();
    let mut targets = Array3::<usize>::zeros(dim);
    let mut weights = Array3::<f64>::zeros(dim);
    for ((idx, &l), (t, wv)) in labels
        .indexed_iter()
        .zip(targets.iter_mut().zip(weights.iter_mut()))
    {
        let _ = idx;
        if l == IGNORE_LABEL {
            *t = 0;
            *wv = 0.0;
            continue;
        }
        if l >= n_valid {
            return Err(AldmError::invalid(format!(
                "label {l} out of range for {n_valid} classes"
            )));
        }
        *t = l;
        *wv = match gamma {
            Some(g) => g.gamma[l],
            None => 1.0,
        };
    }
    Ok((targets, weights))
}

fn check_logits(logits: &Var<'_>, labels: &Array3<usize>, channels: usize) -> Result<()> {
    let s = logits.shape();
    let (b, h, w) = labels.dim();
    if s != [b, channels, h, w] {
        return Err(AldmError::invalid(format!(
            "logit shape {:?} does not match labels {:?} with {channels} channels",
            s,
            labels.dim()
        )));
    }
    Ok(())
}

/// Discriminator objective: gamma-weighted cross-entropy of real images
/// against ground-truth labels plus unweighted cross-entropy of fakes
/// against the fake class N. Both terms are normalized by batch x pixels.
pub fn discriminator_loss<'t>(
    logits_real: Var<'t>,
    labels: &Array3<usize>,
    logits_fake: Var<'t>,
    gamma: &ClassWeights,
) -> Result<Var<'t>> {
    let n = gamma.gamma.len();
    check_logits(&logits_real, labels, n + 1)?;
    check_logits(&logits_fake, labels, n + 1)?;
    let (b, h, w) = labels.dim();
    let norm = (b * h * w) as f64;
    let (targets, weights) = weight_maps(labels, Some(gamma), n)?;
    let real_term = logits_real.softmax_ce_map(&targets, &weights, norm);
    let fake_targets = Array3::<usize>::from_elem((b, h, w), n);
    let ones = Array3::<f64>::from_elem((b, h, w), 1.0);
    let fake_term = logits_fake.softmax_ce_map(&fake_targets, &ones, norm);
    Ok(real_term.add(fake_term))
}

/// Generator-side adversarial objective: gamma-weighted cross-entropy of the
/// discriminator's output on generated images against the conditioning label
/// map (real classes only). Freeze discriminator parameters at the call site.
pub fn adversarial_loss<'t>(
    logits_fake: Var<'t>,
    labels: &Array3<usize>,
    gamma: &ClassWeights,
) -> Result<Var<'t>> {
    let n = gamma.gamma.len();
    check_logits(&logits_fake, labels, n + 1)?;
    let (b, h, w) = labels.dim();
    let norm = (b * h * w) as f64;
    let (targets, weights) = weight_maps(labels, Some(gamma), n)?;
    Ok(logits_fake.softmax_ce_map(&targets, &weights, norm))
}

/// Gamma-weighted per-pixel cross-entropy for a plain N-class segmenter
/// (no fake channel); used by the evaluation oracle and downstream nets.
pub fn segmentation_loss<'t>(
    logits: Var<'t>,
    labels: &Array3<usize>,
    gamma: &ClassWeights,
) -> Result<Var<'t>> {
    let n = gamma.gamma.len();
    check_logits(&logits, labels, n)?;
    let (b, h, w) = labels.dim();
    let norm = (b * h * w) as f64;
    let (targets, weights) = weight_maps(labels, Some(gamma), n)?;
    Ok(logits.softmax_ce_map(&targets, &weights, norm))
}

/// Mean cross-entropy for (B, C) classification logits.
pub fn classification_loss<'t>(logits: Var<'t>, targets: &[usize]) -> Result<Var<'t>> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != targets.len() {
        return Err(AldmError::invalid(format!(
            "classification logits {:?} do not match {} targets",
            s,
            targets.len()
        )));
    }
    let (b, c) = (s[0], s[1]);
    for &t in targets {
        if t >= c {
            return Err(AldmError::invalid(format!("target {t} out of range for {c} classes")));
        }
    }
    let t3 = Array3::from_shape_fn((b, 1, 1), |(bi, _, _)| targets[bi]);
    let ones = Array3::<f64>::from_elem((b, 1, 1), 1.0);
    Ok(logits.reshape(&[b, c, 1, 1]).softmax_ce_map(&t3, &ones, b as f64))
}

/// L_DM = L_noise + lambda_adv * L_adv.
pub fn combined_loss(l_noise: f64, l_adv: f64, lambda_adv: f64) -> Result<LossBreakdown> {
    if !l_noise.is_finite() || !l_adv.is_finite() || !lambda_adv.is_finite() || lambda_adv < 0.0 {
        return Err(AldmError::invalid(
            "combined_loss needs finite inputs and lambda_adv >= 0",
        ));
    }
    Ok(LossBreakdown {
        l_noise,
        l_adv: Some(l_adv),
        l_dm: l_noise + lambda_adv * l_adv,
        l_dis: None,
        lambda_adv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use approx::assert_abs_diff_eq;
    use ndarray::Array4;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent oracle: explicit softmax-then-log cross-entropy loop.
    fn ce_oracle(
        logits: &Array4<f64>,
        labels: &Array3<usize>,
        weights: impl Fn(usize) -> f64,
        norm: f64,
    ) -> f64 {
        let (b, c, h, w) = logits.dim();
        let mut total = 0.0;
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let t = labels[[bi, i, j]];
                    let mut z = 0.0;
                    for ci in 0..c {
                        z += logits[[bi, ci, i, j]].exp();
                    }
                    let p = logits[[bi, t, i, j]].exp() / z;
                    total += weights(t) * (-p.ln());
                }
            }
        }
        total / norm
    }

    fn rand_logits(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_simple_fn(dim, || rng.gen_range(-3.0..3.0))
    }

    fn rand_labels(rng: &mut ChaCha8Rng, dim: (usize, usize, usize), n: usize) -> Array3<usize> {
        Array3::from_shape_simple_fn(dim, || rng.gen_range(0..n))
    }

    #[test]
    fn noise_loss_cases() {
        let eps = Array4::from_shape_simple_fn((1, 2, 2, 2), || 0.3);
        assert_abs_diff_eq!(noise_loss_value(&eps, &eps).unwrap(), 0.0);
        let off = eps.mapv(|v| v + 0.5);
        assert_abs_diff_eq!(noise_loss_value(&eps, &off).unwrap(), 0.25, epsilon = 1e-12);
        // brute-force oracle on random tensors
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = rand_logits(&mut rng, (2, 3, 4, 4));
        let b = rand_logits(&mut rng, (2, 3, 4, 4));
        let mut acc = 0.0;
        for (x, y) in a.iter().zip(b.iter()) {
            acc += (x - y) * (x - y);
        }
        acc /= a.len() as f64;
        assert_abs_diff_eq!(noise_loss_value(&a, &b).unwrap(), acc, epsilon = 1e-7);
        // the on-tape version matches
        let tape = Tape::new();
        let v = tape.leaf(b.clone().into_dyn());
        assert_abs_diff_eq!(noise_loss(v, &a).unwrap().scalar(), acc, epsilon = 1e-12);
    }

    #[test]
    fn class_weights_hand_examples() {
        // single 2x2 map [0,0,1,2], N=3 -> (2,4,4)
        let labels = Array3::from_shape_vec((1, 2, 2), vec![0, 0, 1, 2]).unwrap();
        let g = class_weights(&labels, 3).unwrap();
        assert_eq!(g.gamma, vec![2.0, 4.0, 4.0]);
        // absent class gets 0
        let labels = Array3::from_elem((1, 2, 2), 0usize);
        let g = class_weights(&labels, 2).unwrap();
        assert_eq!(g.gamma, vec![1.0, 0.0]);
        // out-of-range label rejected
        let labels = Array3::from_elem((1, 1, 1), 5usize);
        assert!(class_weights(&labels, 3).is_err());
    }

    #[test]
    fn class_weights_balanced_map() {
        let n = 4;
        let labels = Array3::from_shape_fn((2, 4, 4), |(_, i, j)| (i * 4 + j) % n);
        let g = class_weights(&labels, n).unwrap();
        for c in 0..n {
            assert_abs_diff_eq!(g.gamma[c], n as f64, epsilon = 1e-12);
        }
    }

    #[test]
    fn class_weights_matches_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..500 {
            let b = rng.gen_range(1..4);
            let n = rng.gen_range(2..6);
            let labels = rand_labels(&mut rng, (b, 5, 5), n);
            let g = class_weights(&labels, n).unwrap();
            for c in 0..n {
                let count = labels.iter().filter(|&&l| l == c).count();
                let expect = if count == 0 {
                    0.0
                } else {
                    25.0 / (count as f64 / b as f64)
                };
                assert_abs_diff_eq!(g.gamma[c], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn discriminator_loss_hand_values() {
        // one real pixel, N=2, uniform logits over 3 channels, class 0, gamma=1
        let labels = Array3::from_elem((1, 1, 1), 0usize);
        let gamma = ClassWeights { gamma: vec![1.0, 1.0] };
        let tape = Tape::new();
        let uniform = tape.leaf(Array4::<f64>::zeros((1, 3, 1, 1)).into_dyn());
        let loss = discriminator_loss(uniform, &labels, uniform, &gamma).unwrap();
        // real term + fake term, each -ln(1/3)
        assert_abs_diff_eq!(loss.scalar(), 2.0 * 3.0f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn discriminator_loss_perfect_floor() {
        let labels = Array3::from_elem((1, 2, 2), 1usize);
        let gamma = ClassWeights { gamma: vec![1.0, 1.0] };
        let mut real = Array4::<f64>::zeros((1, 3, 2, 2));
        real.index_axis_mut(ndarray::Axis(1), 1).fill(50.0);
        let mut fake = Array4::<f64>::zeros((1, 3, 2, 2));
        fake.index_axis_mut(ndarray::Axis(1), 2).fill(50.0);
        let tape = Tape::new();
        let lr = tape.leaf(real.into_dyn());
        let lf = tape.leaf(fake.into_dyn());
        let loss = discriminator_loss(lr, &labels, lf, &gamma).unwrap();
        assert!(loss.scalar() < 1e-6);
    }

    #[test]
    fn adversarial_loss_hand_values() {
        let labels = Array3::from_elem((1, 1, 1), 0usize);
        let gamma = ClassWeights { gamma: vec![1.0, 1.0] };
        let tape = Tape::new();
        // uniform over N+1=3 classes
        let uniform = tape.leaf(Array4::<f64>::zeros((1, 3, 1, 1)).into_dyn());
        let l = adversarial_loss(uniform, &labels, &gamma).unwrap();
        assert_abs_diff_eq!(l.scalar(), 3.0f64.ln(), epsilon = 1e-9);
        // probability 0.25 on the true class
        // logits: [ln(0.25), ln(a), ln(b)] with a+b=0.75 -> p0 = 0.25
        let logits =
            Array4::from_shape_vec((1, 3, 1, 1), vec![0.25f64.ln(), 0.5f64.ln(), 0.25f64.ln()])
                .unwrap();
        let v = tape.leaf(logits.into_dyn());
        let l = adversarial_loss(v, &labels, &gamma).unwrap();
        assert_abs_diff_eq!(l.scalar(), -(0.25f64.ln()), epsilon = 1e-9);
    }

    #[test]
    fn losses_match_ce_oracle_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.gen_range(2..5);
            let dim = (2, n + 1, 3, 3);
            let logits_real = rand_logits(&mut rng, dim);
            let logits_fake = rand_logits(&mut rng, dim);
            let labels = rand_labels(&mut rng, (2, 3, 3), n);
            let gamma = class_weights(&labels, n).unwrap();
            let norm = (2 * 3 * 3) as f64;

            let tape = Tape::new();
            let lr = tape.leaf(logits_real.clone().into_dyn());
            let lf = tape.leaf(logits_fake.clone().into_dyn());
            let adv = adversarial_loss(lf, &labels, &gamma).unwrap().scalar();
            let dis = discriminator_loss(lr, &labels, lf, &gamma).unwrap().scalar();

            let g = gamma.gamma.clone();
            let adv_expect = ce_oracle(&logits_fake, &labels, |c| g[c], norm);
            let fake_labels = Array3::from_elem((2, 3, 3), n);
            let dis_expect = ce_oracle(&logits_real, &labels, |c| g[c], norm)
                + ce_oracle(&logits_fake, &fake_labels, |_| 1.0, norm);
            assert_abs_diff_eq!(adv, adv_expect, epsilon = 1e-6);
            assert_abs_diff_eq!(dis, dis_expect, epsilon = 1e-6);
        }
    }

    #[test]
    fn ignore_label_is_masked() {
        let labels =
            Array3::from_shape_vec((1, 1, 2), vec![0usize, IGNORE_LABEL]).unwrap();
        let gamma = ClassWeights { gamma: vec![1.0, 1.0] };
        let tape = Tape::new();
        let logits = tape.leaf(Array4::<f64>::zeros((1, 3, 1, 2)).into_dyn());
        let l = adversarial_loss(logits, &labels, &gamma).unwrap();
        // only the first pixel contributes; norm is still B*H*W = 2
        assert_abs_diff_eq!(l.scalar(), 3.0f64.ln() / 2.0, epsilon = 1e-9);
    }

    #[test]
    fn combined_loss_cases() {
        let b = combined_loss(0.5, 2.0, 0.1).unwrap();
        assert_abs_diff_eq!(b.l_dm, 0.7, epsilon = 1e-12);
        let b = combined_loss(0.5, 2.0, 0.0).unwrap();
        assert_abs_diff_eq!(b.l_dm, b.l_noise, epsilon = 1e-12);
        assert!(combined_loss(f64::NAN, 0.0, 0.1).is_err());
        assert!(combined_loss(0.0, 0.0, -0.1).is_err());
    }

    #[test]
    fn segmentation_loss_matches_ce_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let n = 4;
        let logits = rand_logits(&mut rng, (2, n, 3, 3));
        let labels = rand_labels(&mut rng, (2, 3, 3), n);
        let gamma = class_weights(&labels, n).unwrap();
        let tape = Tape::new();
        let l = segmentation_loss(tape.leaf(logits.clone().into_dyn()), &labels, &gamma)
            .unwrap()
            .scalar();
        let expect = ce_oracle(&logits, &labels, |c| gamma.gamma[c], 18.0);
        assert_abs_diff_eq!(l, expect, epsilon = 1e-9);
        // channel count must equal N exactly (no fake channel)
        let bad = tape.leaf(rand_logits(&mut rng, (2, n + 1, 3, 3)).into_dyn());
        assert!(segmentation_loss(bad, &labels, &gamma).is_err());
    }

    #[test]
    fn classification_loss_hand_values() {
        let tape = Tape::new();
        let logits = tape.leaf(Array4::<f64>::zeros((2, 3, 1, 1)).into_dyn()).reshape(&[2, 3]);
        let l = classification_loss(logits, &[0, 2]).unwrap().scalar();
        assert_abs_diff_eq!(l, 3.0f64.ln(), epsilon = 1e-12);
        let mut a = ndarray::Array2::<f64>::zeros((1, 2));
        a[[0, 0]] = 2.0;
        let logits = tape.leaf(a.into_dyn());
        let l = classification_loss(logits, &[0]).unwrap().scalar();
        assert_abs_diff_eq!(l, (1.0 + (-2.0f64).exp()).ln(), epsilon = 1e-12);
        let logits = tape.leaf(Array4::<f64>::zeros((1, 2, 1, 1)).into_dyn()).reshape(&[1, 2]);
        assert!(classification_loss(logits, &[5]).is_err());
    }

    proptest! {
        #[test]
        fn combined_loss_affine_in_adv(l_noise in 0.0f64..5.0, l_adv in 0.0f64..5.0) {
            for lambda in [0.0, 0.1, 1.0] {
                let b = combined_loss(l_noise, l_adv, lambda).unwrap();
                prop_assert!((b.l_dm - (l_noise + lambda * l_adv)).abs() < 1e-9);
            }
        }

        #[test]
        fn adversarial_loss_monotone_in_true_logit(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 3usize;
            let logits = rand_logits(&mut rng, (1, n + 1, 2, 2));
            let labels = rand_labels(&mut rng, (1, 2, 2), n);
            let gamma = ClassWeights { gamma: vec![1.0; n] };
            let (pi, pj) = (rng.gen_range(0..2), rng.gen_range(0..2));
            let mut bumped = logits.clone();
            bumped[[0, labels[[0, pi, pj]], pi, pj]] += 0.5;
            let tape = Tape::new();
            let l0 = adversarial_loss(tape.leaf(logits.into_dyn()), &labels, &gamma).unwrap().scalar();
            let l1 = adversarial_loss(tape.leaf(bumped.into_dyn()), &labels, &gamma).unwrap().scalar();
            prop_assert!(l1 < l0);
        }
    }
}
