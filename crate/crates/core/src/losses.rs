//! Training objectives: binary cross-entropy on logits, supervised contrastive
//! loss on the projected features, and their weighted sum. Every loss returns
//! its value together with the gradient with respect to its input.

use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

fn default_tau() -> f64 {
    0.1
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight ξ of the contrastive term.
    pub xi: f64,
    /// Contrastive temperature.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// L2-normalize features before the contrastive dot products.
    #[serde(default = "default_true")]
    pub normalize_features: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            xi: 0.1,
            tau: default_tau(),
            normalize_features: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi >= 0.0 && self.xi.is_finite()) {
            return Err(Error::Param(format!("contrastive weight ξ={} must be ≥ 0", self.xi)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Param(format!("temperature τ={} must be > 0", self.tau)));
        }
        Ok(())
    }
}

fn check_labels(labels: &[u8], b: usize) -> Result<()> {
    if b == 0 {
        return Err(Error::Param("empty batch".into()));
    }
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Param(format!("label {bad} is not binary")));
    }
    Ok(())
}

/// `log(1 + e^x)` without overflow.
fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Mean binary cross-entropy of `logits` against `labels`; gradient
/// `(σ(z) − y)/b`.
pub fn bce_with_logits<T: Scalar>(logits: &Tensor<T>, labels: &[u8]) -> Result<(T, Tensor<T>)> {
    let b = logits.len();
    check_labels(labels, b)?;
    let bt = T::from_usize(b).expect("usize fits");
    let mut loss = T::zero();
    let grad = Tensor::from_fn(&[b], |i| {
        let (z, y) = (logits.data()[i], T::from_u8(labels[i]).expect("u8 fits"));
        // −[y log σ(z) + (1−y) log(1−σ(z))] = softplus(z) − y·z
        loss = loss + softplus(z) - y * z;
        (sigmoid(z) - y) / bt
    });
    Ok((loss / bt, grad))
}

/// Supervised contrastive loss over a single view of the batch.
///
/// With `s_ij = z_i·z_j/τ`, each anchor `i` that has at least one positive
/// (same label, `j ≠ i`) contributes `−mean_{p∈P(i)} s_ip + log Σ_{a≠i} e^{s_ia}`;
/// the loss is the mean over contributing anchors. When no anchor has a
/// positive, loss and gradient are zero.
pub fn supcontrast<T: Scalar>(
    features: &Tensor<T>,
    labels: &[u8],
    tau: f64,
    normalize: bool,
) -> Result<(T, Tensor<T>)> {
    if features.rank() != 2 {
        return Err(Error::Shape(format!("features must be b×d′, got {:?}", features.shape())));
    }
    let b = features.rows();
    check_labels(labels, b)?;
    if b < 2 {
        return Err(Error::Param("contrastive loss needs at least two samples".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Param(format!("temperature τ={tau} must be > 0")));
    }
    let tau = T::from_f64c(tau);
    let d = features.last_dim();

    let norms: Vec<T> = (0..b)
        .map(|i| {
            if normalize {
                features.row(i).iter().map(|&v| v * v).sum::<T>().sqrt().max(T::from_f64c(1e-12))
            } else {
                T::one()
            }
        })
        .collect();
    let z = Tensor::from_fn(&[b, d], |idx| features.data()[idx] / norms[idx / d]);

    let anchors: Vec<usize> = (0..b)
        .filter(|&i| (0..b).any(|j| j != i && labels[j] == labels[i]))
        .collect();
    if anchors.is_empty() {
        log::warn!("contrastive loss: no anchor has a positive in this batch; term is zero");
        return Ok((T::zero(), Tensor::zeros(features.shape())));
    }
    let contributing = T::from_usize(anchors.len()).expect("usize fits");

    let mut loss = T::zero();
    let mut grad_z = Tensor::<T>::zeros(&[b, d]);
    for &i in &anchors {
        let zi = z.row(i);
        let sims: Vec<T> = (0..b)
            .map(|a| zi.iter().zip(z.row(a)).map(|(&x, &y)| x * y).sum::<T>() / tau)
            .collect();
        let max = (0..b).filter(|&a| a != i).map(|a| sims[a]).fold(T::neg_infinity(), T::max);
        let denom: T = (0..b).filter(|&a| a != i).map(|a| (sims[a] - max).exp()).sum();
        let lse = max + denom.ln();
        let positives = (0..b).filter(|&p| p != i && labels[p] == labels[i]).count();
        let np = T::from_usize(positives).expect("usize fits");
        let pos_mean: T = (0..b)
            .filter(|&p| p != i && labels[p] == labels[i])
            .map(|p| sims[p])
            .sum::<T>()
            / np;
        loss = loss + lse - pos_mean;

        for a in (0..b).filter(|&a| a != i) {
            let soft = (sims[a] - max).exp() / denom;
            let target = if labels[a] == labels[i] { T::one() / np } else { T::zero() };
            // ∂loss/∂s_ia, then s_ia = z_i·z_a/τ feeds both rows
            let c = (soft - target) / contributing / tau;
            for k in 0..d {
                let (zik, zak) = (z.row(i)[k], z.row(a)[k]);
                grad_z.row_mut(i)[k] = grad_z.row(i)[k] + c * zak;
                grad_z.row_mut(a)[k] = grad_z.row(a)[k] + c * zik;
            }
        }
    }
    let loss = loss / contributing;

    if !normalize {
        return Ok((loss, grad_z));
    }
    // z = f/‖f‖  ⇒  ∂L/∂f = (g − z (z·g)) / ‖f‖
    let mut grad = Tensor::zeros(&[b, d]);
    for i in 0..b {
        let (zi, gi) = (z.row(i), grad_z.row(i));
        let proj: T = zi.iter().zip(gi).map(|(&a, &g)| a * g).sum();
        for (k, out) in grad.row_mut(i).iter_mut().enumerate() {
            *out = (gi[k] - zi[k] * proj) / norms[i];
        }
    }
    Ok((loss, grad))
}

/// Scalar losses of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown<T = f32> {
    pub total: T,
    pub ce: T,
    pub cont: T,
}

/// `L = L_CE + ξ·L_Cont` and the matching gradient streams: the CE gradient
/// enters at the logits, `ξ·∇L_Cont` at the projected features. With `ξ = 0`
/// the result is exactly the CE loss and no feature gradient is produced.
pub fn combined<T: Scalar>(
    loss_ce: T,
    grad_ce: Tensor<T>,
    loss_cont: T,
    grad_cont: Option<Tensor<T>>,
    xi: f64,
) -> (LossBreakdown<T>, Tensor<T>, Option<Tensor<T>>) {
    if xi == 0.0 {
        let losses = LossBreakdown {
            total: loss_ce,
            ce: loss_ce,
            cont: loss_cont,
        };
        return (losses, grad_ce, None);
    }
    let x = T::from_f64c(xi);
    let losses = LossBreakdown {
        total: loss_ce + x * loss_cont,
        ce: loss_ce,
        cont: loss_cont,
    };
    (losses, grad_ce, grad_cont.map(|g| g.scale(x)))
}

/// Result of [`evaluate`].
#[derive(Clone, Debug)]
pub struct LossOutput<T: Scalar = f32> {
    pub losses: LossBreakdown<T>,
    pub grad_logits: Tensor<T>,
    pub grad_features: Option<Tensor<T>>,
}

/// Full objective for one batch. The contrastive term is skipped (reported
/// as zero) when `ξ = 0` or the batch has fewer than two samples.
pub fn evaluate<T: Scalar>(
    config: &LossConfig,
    logits: &Tensor<T>,
    features: &Tensor<T>,
    labels: &[u8],
) -> Result<LossOutput<T>> {
    config.validate()?;
    let (ce, grad_ce) = bce_with_logits(logits, labels)?;
    let (cont, grad_cont) = if config.xi > 0.0 && labels.len() >= 2 {
        let (l, g) = supcontrast(features, labels, config.tau, config.normalize_features)?;
        (l, Some(g))
    } else {
        (T::zero(), None)
    };
    let (losses, grad_logits, grad_features) = combined(ce, grad_ce, cont, grad_cont, config.xi);
    Ok(LossOutput {
        losses,
        grad_logits,
        grad_features,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use rand::Rng as _;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn bce_at_zero_logit() {
        let (loss, g) = bce_with_logits(&t(&[1], &[0.0]), &[1]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((g.data()[0] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn bce_is_stable_for_large_logits() {
        let (loss, g) = bce_with_logits(&Tensor::<f32>::new(vec![2], vec![50.0, -1e4]).unwrap(), &[1, 0]).unwrap();
        assert!(loss.is_finite() && loss < 1e-10);
        assert!(g.all_finite());
        let (loss, _) = bce_with_logits(&Tensor::<f32>::new(vec![1], vec![-1e4]).unwrap(), &[1]).unwrap();
        assert_eq!(loss, 1e4);
    }

    #[test]
    fn bce_two_sample_value() {
        let (loss, _) = bce_with_logits(&t(&[2], &[1.0, -2.0]), &[1, 0]).unwrap();
        let direct = ((1.0 + (-1.0f64).exp()).ln() + (1.0 + (-2.0f64).exp()).ln()) / 2.0;
        assert!((loss - direct).abs() < 1e-12);
        assert!((loss - 0.2201).abs() < 1e-4);
    }

    #[test]
    fn bce_rejects_bad_input() {
        assert!(bce_with_logits(&t(&[1], &[0.0]), &[2]).is_err());
        assert!(bce_with_logits(&t(&[2], &[0.0, 1.0]), &[1]).is_err());
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let z = t(&[4], &[0.3, -1.7, 2.2, 0.0]);
        let y = [1, 0, 0, 1];
        let (_, g) = bce_with_logits(&z, &y).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            let mut zp = z.clone();
            zp.data_mut()[i] += h;
            let mut zm = z.clone();
            zm.data_mut()[i] -= h;
            let fd = (bce_with_logits(&zp, &y).unwrap().0 - bce_with_logits(&zm, &y).unwrap().0) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn supcon_identical_pair_is_zero() {
        let f = t(&[2, 3], &[0.6, 0.8, 0.0, 0.6, 0.8, 0.0]);
        let (loss, _) = supcontrast(&f, &[1, 1], 1.0, true).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn supcon_without_positives_is_zero() {
        let f = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let (loss, g) = supcontrast(&f, &[0, 1], 0.1, true).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    /// Enumerates every (anchor, positive, candidate) term directly.
    fn brute_force(f: &Tensor<f64>, labels: &[u8], tau: f64) -> f64 {
        let b = f.rows();
        let z: Vec<Vec<f64>> = (0..b)
            .map(|i| {
                let n = f.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                f.row(i).iter().map(|v| v / n).collect()
            })
            .collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let (mut total, mut anchors) = (0.0, 0);
        for i in 0..b {
            let pos: Vec<usize> = (0..b).filter(|&p| p != i && labels[p] == labels[i]).collect();
            if pos.is_empty() {
                continue;
            }
            anchors += 1;
            let mut li = 0.0;
            for &p in &pos {
                let mut denom = 0.0;
                for a in 0..b {
                    if a != i {
                        denom += (dot(&z[i], &z[a]) / tau).exp();
                    }
                }
                li += ((dot(&z[i], &z[p]) / tau).exp() / denom).ln();
            }
            total += -li / pos.len() as f64;
        }
        total / anchors as f64
    }

    fn fixture() -> (Tensor<f64>, [u8; 4]) {
        let f = t(
            &[4, 3],
            &[0.9, 0.1, -0.3, 0.2, 1.1, 0.4, 0.7, -0.2, -0.5, -0.1, 0.8, 0.6],
        );
        (f, [1, 0, 1, 0])
    }

    #[test]
    fn supcon_matches_brute_force_oracle() {
        let (f, y) = fixture();
        let (loss, _) = supcontrast(&f, &y, 0.1, true).unwrap();
        assert!((loss - brute_force(&f, &y, 0.1)).abs() < 1e-6);
        // an anchor without positives is skipped, not counted as zero
        let y2 = [1, 0, 1, 1];
        let (loss2, _) = supcontrast(&f, &y2, 0.1, true).unwrap();
        assert!((loss2 - brute_force(&f, &y2, 0.1)).abs() < 1e-6);
    }

    fn fd_check(f: &Tensor<f64>, y: &[u8], normalize: bool) {
        let (_, g) = supcontrast(f, y, 0.1, normalize).unwrap();
        let h = 1e-6;
        for j in 0..f.len() {
            let mut fp = f.clone();
            fp.data_mut()[j] += h;
            let mut fm = f.clone();
            fm.data_mut()[j] -= h;
            let fd = (supcontrast(&fp, y, 0.1, normalize).unwrap().0 - supcontrast(&fm, y, 0.1, normalize).unwrap().0)
                / (2.0 * h);
            let a = g.data()[j];
            assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-4) < 1e-5, "[{j}] {a} vs {fd}");
        }
    }

    #[test]
    fn supcon_gradient_matches_finite_differences() {
        let (f, y) = fixture();
        fd_check(&f, &y, true);
        fd_check(&f.scale(0.3), &y, false);
        fd_check(&f, &[1, 0, 1, 1], true);
    }

    #[test]
    fn supcon_is_scale_invariant_and_permutation_equivariant() {
        let mut r = Rng::new(3);
        let f = Tensor::<f64>::from_fn(&[6, 5], |_| r.random::<f64>() - 0.5);
        let y = [0, 1, 1, 0, 1, 0];
        let (l1, g1) = supcontrast(&f, &y, 0.1, true).unwrap();
        let (l2, _) = supcontrast(&f.scale(7.5), &y, 0.1, true).unwrap();
        assert!((l1 - l2).abs() < 1e-6);

        let perm = [3, 0, 5, 1, 4, 2];
        let fp = Tensor::from_fn(&[6, 5], |i| f.data()[perm[i / 5] * 5 + i % 5]);
        let yp: Vec<u8> = perm.iter().map(|&p| y[p]).collect();
        let (lp, gp) = supcontrast(&fp, &yp, 0.1, true).unwrap();
        assert!((l1 - lp).abs() < 1e-12);
        for (i, &p) in perm.iter().enumerate() {
            for k in 0..5 {
                assert!((gp.row(i)[k] - g1.row(p)[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn combined_weights_terms() {
        let g = t(&[1], &[0.25]);
        let (l, _, gf) = combined(0.5, g.clone(), 1.0, Some(t(&[1, 1], &[2.0])), 0.2);
        assert!((l.total - 0.7).abs() < 1e-12);
        assert!((gf.unwrap().data()[0] - 0.4).abs() < 1e-12);
        let (l0, g0, gf0) = combined(0.5, g.clone(), 1.0, Some(t(&[1, 1], &[2.0])), 0.0);
        assert_eq!(l0.total, 0.5);
        assert_eq!(g0, g);
        assert!(gf0.is_none());
    }

    #[test]
    fn evaluate_skips_contrastive_for_single_sample() {
        let cfg = LossConfig {
            xi: 0.4,
            ..LossConfig::default()
        };
        let out = evaluate(&cfg, &t(&[1], &[0.3]), &t(&[1, 2], &[1.0, 0.0]), &[1]).unwrap();
        assert_eq!(out.losses.cont, 0.0);
        assert!(out.grad_features.is_none());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn bce_is_convex_in_logits(z1 in prop::collection::vec(-30.0f64..30.0, 5), z2 in prop::collection::vec(-30.0f64..30.0, 5), y in prop::collection::vec(0u8..2, 5)) {
                let a = t(&[5], &z1);
                let b = t(&[5], &z2);
                let mid = a.add(&b).unwrap().scale(0.5);
                let f = |z: &Tensor<f64>| bce_with_logits(z, &y).unwrap().0;
                prop_assert!(f(&mid) <= (f(&a) + f(&b)) / 2.0 + 1e-7);
            }
        }
    }
}
