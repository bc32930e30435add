use ndarray::{Array1, ArrayView1};

use crate::autograd::Matrix;
use crate::error::{Error, Result};
use crate::model::LatentCode;

/// One running center per answer category.
///
/// Centers are state, not parameters: they move only through
/// [`CenterBank::update`], never through the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterBank {
    pub centers: Matrix,
    pub update_scale: f64,
}

impl CenterBank {
    pub fn zeros(n_categories: usize, dim: usize, update_scale: f64) -> Result<Self> {
        if !(update_scale > 0.0 && update_scale < 1.0) {
            return Err(Error::Config(format!("center update scale must lie in (0, 1), got {update_scale}")));
        }
        Ok(Self {
            centers: Matrix::zeros((n_categories, dim)),
            update_scale,
        })
    }

    pub fn n_categories(&self) -> usize {
        self.centers.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centers.ncols()
    }

    pub fn center(&self, category: usize) -> ArrayView1<'_, f64> {
        self.centers.row(category)
    }

    /// Mini-batch center step: for every category `j` present in the batch,
    /// `Δc_j = Σ_{i: y_i = j} (c_j − z_i) / (1 + n_j)` and `c_j ← c_j − γ Δc_j`.
    /// Categories absent from the batch keep their center.
    pub fn update<'a, I>(&mut self, batch: I) -> Result<()>
    where
        I: IntoIterator<Item = (ArrayView1<'a, f64>, usize)>,
    {
        let k = self.n_categories();
        let mut delta = Matrix::zeros(self.centers.raw_dim());
        let mut counts = vec![0usize; k];
        for (z, category) in batch {
            if category >= k {
                return Err(Error::Domain(format!("category {category} out of range for {k} centers")));
            }
            if z.len() != self.dim() {
                return Err(Error::Domain(format!("latent of length {} for centers of dim {}", z.len(), self.dim())));
            }
            let c = self.centers.row(category);
            let mut d = delta.row_mut(category);
            d += &(&c - &z);
            counts[category] += 1;
        }
        if counts.iter().all(|&n| n == 0) {
            return Err(Error::Domain("center update needs a nonempty batch".into()));
        }
        for (j, &n) in counts.iter().enumerate() {
            if n == 0 {
                continue;
            }
            let step = delta.row(j).mapv(|x| self.update_scale * x / (1.0 + n as f64));
            let mut c = self.centers.row_mut(j);
            c -= &step;
        }
        Ok(())
    }

    /// Functional form of [`CenterBank::update`].
    pub fn updated(&self, batch: &[(LatentCode, usize)]) -> Result<Self> {
        let mut next = self.clone();
        next.update(batch.iter().map(|(z, c)| (z.0.view(), *c)))?;
        Ok(next)
    }
}

/// `‖z − c_category‖²`.
pub fn center_loss(z: &LatentCode, category: usize, bank: &CenterBank) -> Result<f64> {
    if category >= bank.n_categories() {
        return Err(Error::Domain(format!("category {category} out of range")));
    }
    if z.0.len() != bank.dim() {
        return Err(Error::Domain("latent and center dimensions differ".into()));
    }
    let c = bank.center(category);
    Ok(z.0.iter().zip(c.iter()).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Batch mean of the center loss and its gradient with respect to `z`.
pub fn center_loss_batch(z: &Matrix, categories: &[usize], bank: &CenterBank) -> Result<(f64, Matrix)> {
    if z.nrows() != categories.len() || categories.is_empty() {
        return Err(Error::Domain("center loss needs one category per latent row".into()));
    }
    let batch = categories.len() as f64;
    let mut grad = Matrix::zeros(z.raw_dim());
    let mut total = 0.0;
    for (b, &cat) in categories.iter().enumerate() {
        if cat >= bank.n_categories() {
            return Err(Error::Domain(format!("category {cat} out of range")));
        }
        let diff: Array1<f64> = &z.row(b) - &bank.center(cat);
        total += diff.mapv(|d| d * d).sum() / batch;
        grad.row_mut(b).assign(&(diff * (2.0 / batch)));
    }
    Ok((total, grad))
}
