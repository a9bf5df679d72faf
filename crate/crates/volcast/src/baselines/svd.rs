//! Low-rank linear prediction. Training stacks each subject's first scan
//! with its demographics into a column of X and the subject's last scan
//! into Y; a truncated SVD X = U S V^T then gives the predictor
//! `y_hat = Y V S^-1 U^T x`.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::cvae::checkpoint;
use crate::cvae::{ModelParameters, Tensor};
use crate::dataio::Volume;
use crate::error::{Error, Result};

/// One training subject: first scan, last scan, demographics at the first
/// scan, and the elapsed time between the two.
#[derive(Debug, Clone)]
pub struct SvdTrainingPair {
    pub first: Volume,
    pub last: Volume,
    pub age: f64,
    pub status: f64,
    pub elapsed: f64,
}

const DEMO_ROWS: usize = 4; // age, status, elapsed, constant 1

#[derive(Debug, Clone)]
pub struct SvdModel {
    /// (p+4) x k left factor.
    u: DMatrix<f64>,
    /// k singular values, positive, non-increasing.
    s: DVector<f64>,
    /// N x k right factor.
    v: DMatrix<f64>,
    /// p x N training targets.
    y: DMatrix<f64>,
    pub k: usize,
    /// Divisors that bring the age/status/elapsed rows to unit variance.
    pub row_scales: [f64; 3],
    pub shape: [usize; 3],
}

/// Truncated SVD of `x` via the eigendecomposition of the (small) Gram
/// matrix `x^T x`; suitable when columns are few and rows are many.
pub(crate) fn truncated_svd(
    x: &DMatrix<f64>,
    k: usize,
) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    let n = x.ncols();
    if k == 0 || k > n {
        return Err(Error::Config(format!(
            "k = {k} must be in 1..=N (N = {n} columns)"
        )));
    }
    let gram = x.transpose() * x;
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let s_all: Vec<f64> = order
        .iter()
        .map(|&i| eig.eigenvalues[i].max(0.0).sqrt())
        .collect();
    let s_max = s_all.first().copied().unwrap_or(0.0);
    let rank = s_all.iter().filter(|s| **s > s_max * 1e-10).count();
    if k > rank {
        return Err(Error::Data(format!(
            "k = {k} exceeds the numerical rank {rank} of the design matrix"
        )));
    }

    let mut v = DMatrix::zeros(n, k);
    for (j, &i) in order.iter().take(k).enumerate() {
        v.set_column(j, &eig.eigenvectors.column(i));
    }
    let s = DVector::from_iterator(k, s_all.iter().take(k).copied());
    // u = x v s^-1, orthonormal because v spans eigenvectors of x^T x
    let mut u = x * &v;
    for j in 0..k {
        let mut col = u.column_mut(j);
        col /= s[j];
    }
    Ok((u, s, v))
}

fn demographic_scales(entries: &[SvdTrainingPair]) -> [f64; 3] {
    let n = entries.len() as f64;
    let mut scales = [1.0f64; 3];
    for (idx, field) in [0usize, 1, 2].iter().enumerate() {
        let vals: Vec<f64> = entries
            .iter()
            .map(|e| match field {
                0 => e.age,
                1 => e.status,
                _ => e.elapsed,
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        if var > 1e-18 {
            scales[idx] = var.sqrt();
        } else {
            log::warn!(
                "demographic row {idx} is constant across training subjects; \
                 left unscaled"
            );
        }
    }
    scales
}

fn assemble_column(
    data: &[f32],
    age: f64,
    status: f64,
    elapsed: f64,
    scales: &[f64; 3],
) -> DVector<f64> {
    let p = data.len();
    let mut x = DVector::zeros(p + DEMO_ROWS);
    for (i, v) in data.iter().enumerate() {
        x[i] = *v as f64;
    }
    x[p] = age / scales[0];
    x[p + 1] = status / scales[1];
    x[p + 2] = elapsed / scales[2];
    x[p + 3] = 1.0;
    x
}

pub fn fit_svd(entries: &[SvdTrainingPair], k: usize) -> Result<SvdModel> {
    if entries.is_empty() {
        return Err(Error::Data("SVD baseline needs at least one subject".into()));
    }
    let shape = entries[0].first.shape;
    let p: usize = shape.iter().product();
    for e in entries {
        if e.first.shape != shape || e.last.shape != shape {
            return Err(Error::Shape(format!(
                "all volumes must share shape {shape:?} (got {:?}/{:?})",
                e.first.shape, e.last.shape
            )));
        }
        if !(e.age.is_finite() && e.status.is_finite() && e.elapsed.is_finite()) {
            return Err(Error::Data("non-finite demographics".into()));
        }
    }
    let n = entries.len();
    let scales = demographic_scales(entries);

    let mut x = DMatrix::zeros(p + DEMO_ROWS, n);
    let mut y = DMatrix::zeros(p, n);
    for (j, e) in entries.iter().enumerate() {
        x.set_column(
            j,
            &assemble_column(e.first.data(), e.age, e.status, e.elapsed, &scales),
        );
        for (i, v) in e.last.data().iter().enumerate() {
            y[(i, j)] = *v as f64;
        }
    }

    let (u, s, v) = truncated_svd(&x, k)?;
    let defect = (u.transpose() * &u - DMatrix::identity(k, k)).norm();
    if defect > 1e-6 {
        return Err(Error::Numerics(format!(
            "SVD left factor lost orthonormality (defect {defect:.2e})"
        )));
    }
    Ok(SvdModel {
        u,
        s,
        v,
        y,
        k,
        row_scales: scales,
        shape,
    })
}

impl SvdModel {
    /// `y_hat = Y V S^-1 U^T x` for an assembled column.
    fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut a = self.u.transpose() * x; // k
        for j in 0..self.k {
            a[j] /= self.s[j];
        }
        let c = &self.v * a; // N
        &self.y * c // p
    }

    pub fn singular_values(&self) -> &[f64] {
        self.s.as_slice()
    }

    /// Training-set reconstruction: prediction for each stored column.
    pub fn input_dim(&self) -> usize {
        self.u.nrows()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut store = ModelParameters::empty();
        store.insert(
            "u",
            Tensor::from_vec(&[self.u.nrows(), self.u.ncols()], self.u.as_slice().to_vec()),
        );
        store.insert("s", Tensor::from_vec(&[self.s.len()], self.s.as_slice().to_vec()));
        store.insert(
            "v",
            Tensor::from_vec(&[self.v.nrows(), self.v.ncols()], self.v.as_slice().to_vec()),
        );
        store.insert(
            "y",
            Tensor::from_vec(&[self.y.nrows(), self.y.ncols()], self.y.as_slice().to_vec()),
        );
        let config = serde_json::json!({
            "kind": "svd-model",
            "k": self.k,
            "row_scales": self.row_scales,
            "shape": self.shape,
        });
        checkpoint::save_tensors(&config, &store, &BTreeMap::new(), path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (config, store, _) = checkpoint::load_tensors(path)?;
        if config.get("kind").and_then(|v| v.as_str()) != Some("svd-model") {
            return Err(Error::Data(format!(
                "{} is not an SVD baseline model",
                path.display()
            )));
        }
        let k = config
            .get("k")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Data("SVD model missing k".into()))? as usize;
        let row_scales: [f64; 3] = serde_json::from_value(
            config
                .get("row_scales")
                .cloned()
                .ok_or_else(|| Error::Data("SVD model missing row_scales".into()))?,
        )
        .map_err(|e| Error::Data(format!("SVD model row_scales: {e}")))?;
        let shape: [usize; 3] = serde_json::from_value(
            config
                .get("shape")
                .cloned()
                .ok_or_else(|| Error::Data("SVD model missing shape".into()))?,
        )
        .map_err(|e| Error::Data(format!("SVD model shape: {e}")))?;
        let matrix = |name: &str| -> Result<DMatrix<f64>> {
            let t = store
                .try_get(name)
                .ok_or_else(|| Error::Data(format!("SVD model missing tensor {name}")))?;
            if t.shape.len() != 2 {
                return Err(Error::Shape(format!("tensor {name} must be 2-d")));
            }
            Ok(DMatrix::from_column_slice(t.shape[0], t.shape[1], &t.data))
        };
        let u = matrix("u")?;
        let v = matrix("v")?;
        let y = matrix("y")?;
        let s_t = store
            .try_get("s")
            .ok_or_else(|| Error::Data("SVD model missing tensor s".into()))?;
        let s = DVector::from_column_slice(&s_t.data);
        if u.ncols() != k || v.ncols() != k || s.len() != k {
            return Err(Error::Shape("SVD model factor widths disagree with k".into()));
        }
        Ok(SvdModel {
            u,
            s,
            v,
            y,
            k,
            row_scales,
            shape,
        })
    }
}

pub fn predict_svd(
    model: &SvdModel,
    base: &Volume,
    age: f64,
    status: f64,
    elapsed: f64,
) -> Result<Volume> {
    if base.shape != model.shape {
        return Err(Error::Shape(format!(
            "base volume has shape {:?}, model was fit on {:?}",
            base.shape, model.shape
        )));
    }
    let x = assemble_column(base.data(), age, status, elapsed, &model.row_scales);
    let yhat = model.project(&x);
    let data: Vec<f32> = yhat.iter().map(|v| *v as f32).collect();
    Volume::new(base.shape, base.voxel_size, base.grid_to_world, data)
}
