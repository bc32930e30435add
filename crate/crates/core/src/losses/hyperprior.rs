use ndarray::Array1;

use crate::autograd::Matrix;
use crate::error::{Error, Result};
use crate::model::LatentDistribution;

/// Learnable per-dimension inverse variances of the zero-mean latent prior,
/// `p(z_j) = N(0, 1/α_j)`. Stored as `ln α` so optimization is unconstrained.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperPrior {
    pub log_alpha: Array1<f64>,
}

impl HyperPrior {
    pub fn unit(dim: usize) -> Self {
        Self {
            log_alpha: Array1::zeros(dim),
        }
    }

    pub fn from_alpha(alpha: &Array1<f64>) -> Result<Self> {
        if alpha.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::Domain("inverse variances must be strictly positive".into()));
        }
        Ok(Self {
            log_alpha: alpha.mapv(f64::ln),
        })
    }

    pub fn alpha(&self) -> Array1<f64> {
        self.log_alpha.mapv(f64::exp)
    }

    pub fn dim(&self) -> usize {
        self.log_alpha.len()
    }
}

/// Closed-form `KL(N(μ, σ²) ‖ N(0, 1/α))` summed over dimensions:
/// `Σ_j −½ ln(α_j σ_j²) + ½ α_j (σ_j² + μ_j²) − ½`.
pub fn hyperprior_kl(dist: &LatentDistribution, prior: &HyperPrior) -> Result<f64> {
    if dist.dim() != prior.dim() {
        return Err(Error::Domain(format!(
            "latent has {} dims, prior has {}",
            dist.dim(),
            prior.dim()
        )));
    }
    if dist.stddev.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Domain("stddev must be strictly positive".into()));
    }
    if prior.log_alpha.iter().any(|a| !a.is_finite()) {
        return Err(Error::Domain("inverse variances must be strictly positive and finite".into()));
    }
    let mut kl = 0.0;
    for ((&mu, &sigma), &log_alpha) in dist.mean.iter().zip(&dist.stddev).zip(&prior.log_alpha) {
        let alpha = log_alpha.exp();
        let var = sigma * sigma;
        kl += -0.5 * (log_alpha + 2.0 * sigma.ln()) + 0.5 * alpha * (var + mu * mu) - 0.5;
    }
    Ok(kl)
}

/// Gradients of the batched KL with respect to its optimization variables.
#[derive(Debug, Clone)]
pub struct KlGrads {
    pub mean: Matrix,
    pub logvar: Matrix,
    pub log_alpha: Matrix,
}

/// Batch mean of [`hyperprior_kl`] in terms of `(μ, log σ², ln α)`.
/// `log_alpha` is `1 × d`.
pub fn hyperprior_kl_batch(mean: &Matrix, logvar: &Matrix, log_alpha: &Matrix) -> Result<(f64, KlGrads)> {
    if mean.dim() != logvar.dim() || log_alpha.dim() != (1, mean.ncols()) {
        return Err(Error::Domain("KL operands have mismatched shapes".into()));
    }
    let batch = mean.nrows() as f64;
    let alpha = log_alpha.mapv(f64::exp);
    let mut value = 0.0;
    let mut g_mean = Matrix::zeros(mean.raw_dim());
    let mut g_logvar = Matrix::zeros(mean.raw_dim());
    let mut g_alpha = Matrix::zeros(log_alpha.raw_dim());
    for b in 0..mean.nrows() {
        for j in 0..mean.ncols() {
            let (mu, lv, la, a) = (mean[[b, j]], logvar[[b, j]], log_alpha[[0, j]], alpha[[0, j]]);
            let var = lv.exp();
            value += (-0.5 * (la + lv) + 0.5 * a * (var + mu * mu) - 0.5) / batch;
            g_mean[[b, j]] = a * mu / batch;
            g_logvar[[b, j]] = (-0.5 + 0.5 * a * var) / batch;
            g_alpha[[0, j]] += (-0.5 + 0.5 * a * (var + mu * mu)) / batch;
        }
    }
    Ok((
        value,
        KlGrads {
            mean: g_mean,
            logvar: g_logvar,
            log_alpha: g_alpha,
        },
    ))
}

/// `λ_reg Σ_j (α_j⁻¹ − 1)²`.
pub fn hyperprior_reg(prior: &HyperPrior, weight: f64) -> f64 {
    weight
        * prior
            .log_alpha
            .iter()
            .map(|&la| {
                let inv = (-la).exp() - 1.0;
                inv * inv
            })
            .sum::<f64>()
}

/// Regularizer value and its gradient with respect to `ln α` (`1 × d`).
pub fn hyperprior_reg_grad(log_alpha: &Matrix, weight: f64) -> (f64, Matrix) {
    let mut value = 0.0;
    let grad = log_alpha.mapv(|la| {
        let inv = (-la).exp();
        value += weight * (inv - 1.0) * (inv - 1.0);
        -2.0 * weight * (inv - 1.0) * inv
    });
    (value, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn dist(mean: Vec<f64>, std: Vec<f64>) -> LatentDistribution {
        LatentDistribution::new(Array1::from(mean), Array1::from(std)).unwrap()
    }

    #[test]
    fn kl_examples() {
        let unit = HyperPrior::unit(3);
        assert!(hyperprior_kl(&dist(vec![0.0; 3], vec![1.0; 3]), &unit).unwrap().abs() < 1e-15);
        let one = HyperPrior::unit(1);
        assert!((hyperprior_kl(&dist(vec![1.0], vec![1.0]), &one).unwrap() - 0.5).abs() < 1e-15);
        let four = HyperPrior::from_alpha(&array![4.0]).unwrap();
        assert!(hyperprior_kl(&dist(vec![0.0], vec![0.5]), &four).unwrap().abs() < 1e-15);
    }

    #[test]
    fn kl_domain_errors() {
        let bad = LatentDistribution {
            mean: array![0.0],
            stddev: array![0.0],
        };
        assert!(hyperprior_kl(&bad, &HyperPrior::unit(1)).is_err());
        assert!(HyperPrior::from_alpha(&array![0.0]).is_err());
        assert!(hyperprior_kl(&dist(vec![0.0; 2], vec![1.0; 2]), &HyperPrior::unit(1)).is_err());
    }

    #[test]
    fn kl_batch_matches_per_sample() {
        let mean = array![[0.3, -1.0], [2.0, 0.1]];
        let logvar = array![[0.2, -0.7], [-1.5, 0.9]];
        let log_alpha = array![[0.4, -0.3]];
        let (batch, _) = hyperprior_kl_batch(&mean, &logvar, &log_alpha).unwrap();
        let prior = HyperPrior {
            log_alpha: log_alpha.row(0).to_owned(),
        };
        let per: f64 = (0..2)
            .map(|b| {
                let d = LatentDistribution::from_logvar(mean.row(b).to_owned(), &logvar.row(b).to_owned());
                hyperprior_kl(&d, &prior).unwrap()
            })
            .sum();
        assert!((batch - per / 2.0).abs() < 1e-12);
    }

    #[test]
    fn reg_examples() {
        assert_eq!(hyperprior_reg(&HyperPrior::unit(4), 2.0), 0.0);
        let p = HyperPrior::from_alpha(&array![0.5, 0.5]).unwrap();
        assert!((hyperprior_reg(&p, 2.0) - 4.0).abs() < 1e-12);
        let near = HyperPrior::from_alpha(&array![0.8]).unwrap();
        let far = HyperPrior::from_alpha(&array![0.4]).unwrap();
        assert!(hyperprior_reg(&far, 1.0) > hyperprior_reg(&near, 1.0));
        let (v, _) = hyperprior_reg_grad(&array![[p.log_alpha[0], p.log_alpha[1]]], 2.0);
        assert!((v - 4.0).abs() < 1e-12);
    }
}
