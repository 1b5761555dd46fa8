use super::config::{LossWeights, MarginLossConfig};
use super::types::{Activities, GaussianPosterior};
use super::variational::kl_rows;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Individual loss terms of one batch. `kl` is the unweighted per-sample
/// sum over classes, averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub recon: f64,
    pub kl: f64,
}

impl LossBreakdown {
    pub fn combine(cls: f64, recon: f64, kl: f64, w: &LossWeights) -> Self {
        LossBreakdown {
            total: cls + w.recon_weight * recon + w.kl_weight * kl,
            cls,
            recon,
            kl,
        }
    }
}

/// Checks that every row of `labels` is exactly one-hot.
pub fn validate_one_hot<T: Scalar>(labels: &Tensor<T>, classes: usize) -> Result<()> {
    if labels.shape().len() != 2 || labels.row_len() != classes {
        return Err(Error::Input(format!(
            "labels must be [batch, {classes}], got {:?}",
            labels.shape()
        )));
    }
    for (b, row) in labels.data().chunks_exact(classes).enumerate() {
        let ones = row.iter().filter(|&&x| x == T::one()).count();
        let zeros = row.iter().filter(|&&x| x == T::zero()).count();
        if ones != 1 || zeros != classes - 1 {
            return Err(Error::Input(format!("label row {b} is not one-hot")));
        }
    }
    Ok(())
}

/// Class index of each one-hot row.
pub fn label_indices<T: Scalar>(labels: &Tensor<T>) -> Vec<usize> {
    let c = labels.row_len();
    labels
        .data()
        .chunks_exact(c)
        .map(|r| r.iter().position(|&x| x == T::one()).unwrap_or(0))
        .collect()
}

/// Margin loss and its gradient with respect to the activities.
pub(crate) fn margin_loss_grad<T: Scalar>(
    a: &[T],
    labels: &[T],
    classes: usize,
    cfg: &MarginLossConfig,
) -> (f64, Vec<T>) {
    let batch = a.len() / classes;
    let (mp, mm, lam) = (
        T::lit(cfg.m_plus),
        T::lit(cfg.m_minus),
        T::lit(cfg.lambda_neg),
    );
    let two = T::lit(2.0);
    let inv_b = T::one() / T::lit(batch as f64);
    let mut total = T::zero();
    let mut grad = vec![T::zero(); a.len()];
    for ((&act, &t), g) in a.iter().zip(labels).zip(grad.iter_mut()) {
        let pos = (mp - act).max(T::zero());
        let neg = (act - mm).max(T::zero());
        total += t * pos * pos + lam * (T::one() - t) * neg * neg;
        *g = (-two * t * pos + two * lam * (T::one() - t) * neg) * inv_b;
    }
    ((total * inv_b).as_f64(), grad)
}

/// Batch-averaged margin loss over one-hot `labels`.
pub fn margin_loss<T: Scalar>(
    activities: &Activities<T>,
    labels: &Tensor<T>,
    cfg: &MarginLossConfig,
) -> Result<T> {
    let c = activities.classes();
    validate_one_hot(labels, c)?;
    if labels.rows() != activities.batch() {
        return Err(Error::Input(
            "labels and activities differ in batch size".into(),
        ));
    }
    if activities.values.data().iter().any(|&a| a < T::zero()) {
        return Err(Error::Input("activities must be non-negative".into()));
    }
    let (loss, _) = margin_loss_grad(activities.values.data(), labels.data(), c, cfg);
    Ok(T::lit(loss))
}

/// Per-sample sum of squared errors averaged over the batch, with gradient
/// with respect to the reconstruction.
pub(crate) fn recon_loss_grad<T: Scalar>(target: &[T], recon: &[T], batch: usize) -> (f64, Vec<T>) {
    let inv_b = T::one() / T::lit(batch as f64);
    let two = T::lit(2.0);
    let mut sse = T::zero();
    let grad = target
        .iter()
        .zip(recon)
        .map(|(&x, &r)| {
            let e = r - x;
            sse += e * e;
            two * e * inv_b
        })
        .collect();
    ((sse * inv_b).as_f64(), grad)
}

/// Summed-over-classes KL averaged over the batch, with gradients with
/// respect to `mu` and `log_var` for unit weight.
pub(crate) fn kl_loss_grad<T: Scalar>(
    mu: &[T],
    log_var: &[T],
    k: usize,
    batch: usize,
) -> (f64, Vec<T>, Vec<T>) {
    let inv_b = T::one() / T::lit(batch as f64);
    let half = T::lit(0.5);
    let total: T = kl_rows(mu, log_var, k).into_iter().sum();
    let dmu = mu.iter().map(|&m| m * inv_b).collect();
    let dlv = log_var
        .iter()
        .map(|&l| half * (l.exp() - T::one()) * inv_b)
        .collect();
    ((total * inv_b).as_f64(), dmu, dlv)
}

/// `cls + recon_weight * recon + kl_weight * sum_c KL_c`, each batch-averaged.
///
/// `recon` and `posterior` are optional so that the same function scores
/// models without a decoder or without a variational head.
pub fn composite_loss<T: Scalar>(
    images: &Tensor<T>,
    recon: Option<&Tensor<T>>,
    activities: &Activities<T>,
    labels: &Tensor<T>,
    posterior: Option<&GaussianPosterior<T>>,
    weights: &LossWeights,
    cfg: &MarginLossConfig,
) -> Result<LossBreakdown> {
    let batch = activities.batch();
    let cls = margin_loss(activities, labels, cfg)?.as_f64();
    let rec = match recon {
        Some(r) => {
            if r.len() != images.len() {
                return Err(Error::Shape("reconstruction and image sizes differ".into()));
            }
            recon_loss_grad(images.data(), r.data(), batch).0
        }
        None => 0.0,
    };
    let kl = match posterior {
        Some(p) => {
            let k = *p.mu.shape().last().unwrap_or(&1);
            kl_loss_grad(p.mu.data(), p.log_var.data(), k, batch).0
        }
        None => 0.0,
    };
    Ok(LossBreakdown::combine(cls, rec, kl, weights))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn acts(v: &[f64], c: usize) -> Activities<f64> {
        Activities {
            values: Tensor::from_vec(&[v.len() / c, c], v.to_vec()).unwrap(),
        }
    }

    fn one_hot(idx: &[usize], c: usize) -> Tensor<f64> {
        let mut t = Tensor::zeros(&[idx.len(), c]);
        for (b, &i) in idx.iter().enumerate() {
            t.row_mut(b)[i] = 1.0;
        }
        t
    }

    #[test]
    fn satisfied_margins_give_zero() {
        let mut a = vec![0.1; 10];
        a[3] = 0.9;
        let l = margin_loss(
            &acts(&a, 10),
            &one_hot(&[3], 10),
            &MarginLossConfig::default(),
        )
        .unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn all_zero_activities() {
        let l = margin_loss(
            &acts(&[0.0; 10], 10),
            &one_hot(&[0], 10),
            &MarginLossConfig::default(),
        )
        .unwrap();
        assert!((l - 0.81).abs() < 1e-12);
    }

    #[test]
    fn hand_evaluated_mixed_case() {
        let mut a = vec![0.0; 10];
        a[2] = 0.5;
        a[5] = 0.6;
        let l = margin_loss(
            &acts(&a, 10),
            &one_hot(&[2], 10),
            &MarginLossConfig::default(),
        )
        .unwrap();
        assert!((l - 0.285).abs() < 1e-12);
    }

    #[test]
    fn batch_average() {
        let mut a = vec![0.0; 20];
        a[10] = 0.9;
        a[11..20].iter_mut().for_each(|x| *x = 0.1);
        let l = margin_loss(
            &acts(&a, 10),
            &one_hot(&[0, 0], 10),
            &MarginLossConfig::default(),
        )
        .unwrap();
        assert!((l - 0.405).abs() < 1e-12);
    }

    #[test]
    fn non_one_hot_labels_are_rejected() {
        let mut labels = Tensor::<f64>::zeros(&[1, 3]);
        labels.data_mut()[0] = 1.0;
        labels.data_mut()[1] = 1.0;
        assert!(matches!(
            margin_loss(&acts(&[0.0; 3], 3), &labels, &MarginLossConfig::default()),
            Err(Error::Input(_))
        ));
        let labels = Tensor::<f64>::from_vec(&[1, 3], vec![0.5, 0.5, 0.0]).unwrap();
        assert!(margin_loss(&acts(&[0.0; 3], 3), &labels, &MarginLossConfig::default()).is_err());
    }

    #[test]
    fn margin_gradient_finite_difference() {
        let a = [0.3, 0.95, 0.05, 0.4, 0.7, 0.2];
        let t = [0.0, 1.0, 0.0, 1.0, 0.0, 0.0];
        let cfg = MarginLossConfig::default();
        let (_, g) = margin_loss_grad(&a, &t, 3, &cfg);
        let h = 1e-7;
        for i in 0..6 {
            let (mut ap, mut am) = (a, a);
            ap[i] += h;
            am[i] -= h;
            let fd = (margin_loss_grad(&ap, &t, 3, &cfg).0 - margin_loss_grad(&am, &t, 3, &cfg).0)
                / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn composite_recombines_and_reduces_to_margin() {
        let images = Tensor::from_vec(&[1, 4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let recon = Tensor::from_vec(&[1, 4], vec![0.0, 0.2, 0.5, 0.4]).unwrap();
        let a = acts(&[0.3, 0.6], 2);
        let labels = one_hot(&[0], 2);
        let post = GaussianPosterior {
            mu: Tensor::from_vec(&[1, 2, 1], vec![0.5, -0.2]).unwrap(),
            log_var: Tensor::from_vec(&[1, 2, 1], vec![0.1, -0.3]).unwrap(),
        };
        let cfg = MarginLossConfig::default();
        let w = LossWeights {
            recon_weight: 0.7,
            kl_weight: 0.2,
        };
        let l = composite_loss(&images, Some(&recon), &a, &labels, Some(&post), &w, &cfg).unwrap();
        assert!((l.total - (l.cls + 0.7 * l.recon + 0.2 * l.kl)).abs() < 1e-6);
        assert!((l.recon - 0.05).abs() < 1e-12);

        let zero = LossWeights {
            recon_weight: 0.0,
            kl_weight: 0.0,
        };
        let l0 =
            composite_loss(&images, Some(&recon), &a, &labels, Some(&post), &zero, &cfg).unwrap();
        let m = margin_loss(&a, &labels, &cfg).unwrap();
        assert_eq!(l0.total, m);
        assert!(l0.kl > 0.0);

        let perfect = composite_loss(&images, Some(&images), &a, &labels, None, &w, &cfg).unwrap();
        assert_eq!(perfect.recon, 0.0);
    }
}
