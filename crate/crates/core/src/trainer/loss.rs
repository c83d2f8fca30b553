//! Joint user-classification and forgery-detection loss.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

/// Per-sample and batch-mean loss terms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown {
    /// Mean of the per-sample combined loss.
    pub total: f64,
    /// Mean user cross-entropy over genuine samples (0 when there are none).
    pub user: f64,
    /// Mean forgery cross-entropy over all samples (0 without a forgery head).
    pub forgery: f64,
    pub per_sample: Vec<f64>,
    pub per_sample_user: Vec<f64>,
    pub per_sample_forgery: Vec<f64>,
    pub forged: Vec<bool>,
    pub labels: Vec<usize>,
}

/// Loss plus gradients of the batch-mean loss w.r.t. both heads' logits.
#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub breakdown: LossBreakdown,
    pub d_user: Tensor4<T>,
    pub d_forgery: Option<Tensor4<T>>,
}

/// `L = (1−f)(1−λ)·L_c + λ·L_f` per sample, averaged over the batch.
///
/// Without a forgery head (`forgery_logits = None`) the loss is `L_c` and
/// `lambda` must be `None`.
pub fn multitask_loss<T: Scalar>(
    user_logits: &Tensor4<T>,
    forgery_logits: Option<&Tensor4<T>>,
    labels: &[usize],
    forged: &[bool],
    lambda: Option<f64>,
) -> Result<LossOutput<T>> {
    let [n, m, _, _] = user_logits.dims();
    if user_logits.sample_len() != m || labels.len() != n || forged.len() != n || n == 0 {
        return Err(Error::State(format!(
            "loss inputs disagree: logits {:?}, {} labels, {} flags",
            user_logits.dims(),
            labels.len(),
            forged.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= m) {
        return Err(Error::Data(format!("label {bad} out of range for {m} users")));
    }
    let lam = match (forgery_logits, lambda) {
        (Some(f), Some(l)) => {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Config(format!("lambda must be in [0, 1], got {l}")));
            }
            if f.dims() != [n, 1, 1, 1] {
                return Err(Error::State(format!("forgery logits {:?}", f.dims())));
            }
            l
        }
        (None, None) => 0.0,
        (Some(_), None) => return Err(Error::Config("lambda is required with a forgery head".into())),
        (None, Some(_)) => return Err(Error::Config("lambda given but the model has no forgery head".into())),
    };
    let has_f = forgery_logits.is_some();
    if !has_f && forged.iter().any(|&f| f) {
        return Err(Error::Data("forgeries in a batch for a model without forgery head".into()));
    }

    let inv_n = 1.0 / n as f64;
    let mut d_user = Tensor4::zeros([n, m, 1, 1]);
    let mut d_forgery = has_f.then(|| Tensor4::zeros([n, 1, 1, 1]));
    let (mut per, mut per_c, mut per_f) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..n {
        let z: Vec<f64> = user_logits.sample(i).iter().map(|v| v.to_f64()).collect();
        let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = zmax + z.iter().map(|v| (v - zmax).exp()).sum::<f64>().ln();
        let lc = lse - z[labels[i]];
        let f = if forged[i] { 1.0 } else { 0.0 };
        let wc = (1.0 - f) * (1.0 - lam);
        for (j, &zj) in z.iter().enumerate() {
            let p = (zj - lse).exp();
            let onehot = if j == labels[i] { 1.0 } else { 0.0 };
            d_user.data_mut()[i * m + j] = T::from_f64(wc * (p - onehot) * inv_n);
        }
        let lf = match forgery_logits {
            Some(fl) => {
                let zf = fl.data()[i].to_f64();
                // softplus(z) - f z, stable for large |z|
                let lf = zf.max(0.0) - f * zf + (-zf.abs()).exp().ln_1p();
                let sig = 1.0 / (1.0 + (-zf).exp());
                d_forgery.as_mut().expect("head present").data_mut()[i] = T::from_f64(lam * (sig - f) * inv_n);
                lf
            }
            None => 0.0,
        };
        per.push(if has_f { wc * lc + lam * lf } else { lc });
        per_c.push(lc);
        per_f.push(lf);
    }
    let genuine: Vec<f64> = per_c.iter().zip(forged).filter(|(_, &f)| !f).map(|(&l, _)| l).collect();
    let breakdown = LossBreakdown {
        total: per.iter().sum::<f64>() * inv_n,
        user: if genuine.is_empty() { 0.0 } else { genuine.iter().sum::<f64>() / genuine.len() as f64 },
        forgery: per_f.iter().sum::<f64>() * inv_n,
        per_sample: per,
        per_sample_user: per_c,
        per_sample_forgery: per_f,
        forged: forged.to_vec(),
        labels: labels.to_vec(),
    };
    Ok(LossOutput { breakdown, d_user, d_forgery })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(v: &[f64]) -> Tensor4<f64> {
        Tensor4::from_vec([1, v.len(), 1, 1], v.to_vec()).unwrap()
    }

    fn scalar(z: f64) -> Tensor4<f64> {
        Tensor4::from_vec([1, 1, 1, 1], vec![z]).unwrap()
    }

    #[test]
    fn lambda_zero_genuine_is_plain_cross_entropy() {
        let u = logits(&[0.3, -1.2, 2.0]);
        let out = multitask_loss(&u, Some(&scalar(0.7)), &[2], &[false], Some(0.0)).unwrap();
        let b = &out.breakdown;
        assert_eq!(b.total, b.per_sample_user[0]);
        let z = [0.3f64, -1.2, 2.0];
        let ce = -(z[2].exp() / z.iter().map(|v| v.exp()).sum::<f64>()).ln();
        assert!((b.total - ce).abs() < 1e-12);
    }

    #[test]
    fn forgery_drops_user_term() {
        let u = logits(&[5.0, -3.0]);
        let zf = -0.4f64;
        for lam in [0.1, 0.5, 0.9] {
            let out = multitask_loss(&u, Some(&scalar(zf)), &[1], &[true], Some(lam)).unwrap();
            let p = 1.0 / (1.0 + (-zf).exp());
            assert!((out.breakdown.total - lam * -p.ln()).abs() < 1e-12);
            assert!(out.d_user.data().iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn uniform_logits_hand_computed() {
        let u = logits(&[0.0; 4]);
        let zf = 0.8f64;
        let out = multitask_loss(&u, Some(&scalar(zf)), &[0], &[false], Some(0.5)).unwrap();
        let lf = -(1.0 - 1.0 / (1.0 + (-zf).exp())).ln();
        let expect = 0.5 * 4f64.ln() + 0.5 * lf;
        assert!((out.breakdown.total - expect).abs() < 1e-12);
    }

    #[test]
    fn no_head_is_cross_entropy_and_rejects_lambda() {
        let u = logits(&[1.0, 2.0]);
        let out = multitask_loss(&u, None, &[0], &[false], None).unwrap();
        assert!(out.d_forgery.is_none());
        assert!((out.breakdown.total - (1.0 + 1f64.exp()).ln()).abs() < 1e-12);
        assert!(multitask_loss(&u, None, &[0], &[false], Some(0.5)).is_err());
        assert!(multitask_loss(&u, None, &[0], &[true], None).is_err());
    }

    #[test]
    fn lambda_out_of_range() {
        let err = multitask_loss(&logits(&[0.0, 0.0]), Some(&scalar(0.0)), &[0], &[false], Some(1.5)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let n = 3;
        let m = 4;
        let zu: Vec<f64> = (0..n * m).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.3).collect();
        let zf = vec![0.4, -1.1, 2.2];
        let labels = [1, 3, 0];
        let forged = [false, true, false];
        let lam = Some(0.35);
        let loss = |zu: &[f64], zf: &[f64]| {
            let u = Tensor4::from_vec([n, m, 1, 1], zu.to_vec()).unwrap();
            let f = Tensor4::from_vec([n, 1, 1, 1], zf.to_vec()).unwrap();
            multitask_loss(&u, Some(&f), &labels, &forged, lam).unwrap().breakdown.total
        };
        let u = Tensor4::from_vec([n, m, 1, 1], zu.clone()).unwrap();
        let f = Tensor4::from_vec([n, 1, 1, 1], zf.clone()).unwrap();
        let out = multitask_loss(&u, Some(&f), &labels, &forged, lam).unwrap();
        let h = 1e-6;
        for i in 0..zu.len() {
            let (mut a, mut b) = (zu.clone(), zu.clone());
            a[i] += h;
            b[i] -= h;
            let fd = (loss(&a, &zf) - loss(&b, &zf)) / (2.0 * h);
            let an = out.d_user.data()[i];
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(1e-3), "user {i}: {fd} vs {an}");
        }
        for i in 0..n {
            let (mut a, mut b) = (zf.clone(), zf.clone());
            a[i] += h;
            b[i] -= h;
            let fd = (loss(&zu, &a) - loss(&zu, &b)) / (2.0 * h);
            let an = out.d_forgery.as_ref().unwrap().data()[i];
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(1e-3), "forgery {i}: {fd} vs {an}");
        }
    }
}
