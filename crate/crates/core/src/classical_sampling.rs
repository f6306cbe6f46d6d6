//! Variational form of classical bandlimited sampling: the eigenproblem of the ideal
//! bandlimited correlator on `[0, T]`, its mode count, and its relation to the sinc basis.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::linalg::{complexify, principal_angles};
use crate::{Error, Result};

/// `sin(x)/x` with the removable singularity filled in.
pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

/// Correlator `sinc(2πB(t − t'))` of the flat process on `[−B, B]`, normalized to 1 at zero lag.
pub fn bandlimited_correlator(bandwidth: f64, lag: f64) -> f64 {
    sinc(2.0 * std::f64::consts::PI * bandwidth * lag)
}

/// Nyström discretization `√w_i C(t_i − t_j) √w_j` of the bandlimited correlator.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassicalKernel {
    pub horizon: f64,
    pub bandwidth: f64,
    pub grid: Vec<f64>,
    /// Trapezoid weights of `grid`.
    pub weights: Vec<f64>,
    pub kernel: DMatrix<f64>,
}

fn trapezoid_weights(n: usize, h: f64) -> Vec<f64> {
    let mut w = vec![h; n];
    w[0] = 0.5 * h;
    w[n - 1] = 0.5 * h;
    w
}

fn nystrom(grid: &[f64], weights: &[f64], bandwidth: f64) -> DMatrix<f64> {
    let n = grid.len();
    DMatrix::from_fn(n, n, |i, j| {
        weights[i].sqrt() * bandlimited_correlator(bandwidth, grid[i] - grid[j]) * weights[j].sqrt()
    })
}

/// Kernel on a uniform grid of `n_grid` points spanning `[0, T]`; needs `n_grid ≥ 8BT`.
pub fn bandlimited_kernel(bandwidth: f64, horizon: f64, n_grid: usize) -> Result<ClassicalKernel> {
    if !bandwidth.is_finite() || bandwidth < 0.0 {
        return Err(Error::invalid("bandwidth", "must be finite and nonnegative"));
    }
    if !horizon.is_finite() || horizon <= 0.0 {
        return Err(Error::invalid("horizon", "must be finite and positive"));
    }
    if n_grid < 2 || (n_grid as f64) < 8.0 * bandwidth * horizon {
        return Err(Error::invalid(
            "n_grid",
            format!("needs at least max(2, 8BT) = {} points", (8.0 * bandwidth * horizon).ceil()),
        ));
    }
    let h = horizon / (n_grid - 1) as f64;
    let grid: Vec<f64> = (0..n_grid).map(|i| i as f64 * h).collect();
    let weights = trapezoid_weights(n_grid, h);
    let kernel = nystrom(&grid, &weights, bandwidth);
    Ok(ClassicalKernel { horizon, bandwidth, grid, weights, kernel })
}

/// Eigenmodes of a classical kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct KotelnikovModes {
    /// Number of eigenvalues with `π_k / π_1 > r_cut`.
    pub m: usize,
    /// All eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Orthonormal eigenvectors in the weighted representation `√w_i f(t_i)`, one per
    /// column, descending; the first `m` are the significant modes.
    pub vectors: DMatrix<f64>,
}

impl KotelnikovModes {
    /// The first `k` mode vectors.
    pub fn leading(&self, k: usize) -> DMatrix<f64> {
        self.vectors.columns(0, k.min(self.vectors.ncols())).into_owned()
    }

    /// Number of eigenvalues with `π_k / π_1 ≥ ratio`.
    pub fn count_above(&self, ratio: f64) -> usize {
        let top = self.eigenvalues.first().copied().unwrap_or(0.0);
        self.eigenvalues.iter().filter(|&&p| p >= ratio * top).count()
    }
}

fn sorted_eigen(k: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(k.clone());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(k.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

/// Eigendecomposition of the kernel and the count of modes above `r_cut · π_1`.
pub fn kotelnikov_mode_count(kernel: &ClassicalKernel, r_cut: f64) -> Result<KotelnikovModes> {
    if !(r_cut > 0.0 && r_cut < 1.0) {
        return Err(Error::invalid("r_cut", "must lie in (0, 1)"));
    }
    let (eigenvalues, vectors) = sorted_eigen(&kernel.kernel);
    let top = eigenvalues[0];
    let m = eigenvalues.iter().filter(|&&p| p > r_cut * top).count();
    Ok(KotelnikovModes { m, eigenvalues, vectors })
}

/// Sinc functions centred on `t_k = k/(2B) ∈ [0, T]` in the weighted representation;
/// a single constant function when `B = 0`.
pub fn sinc_basis(kernel: &ClassicalKernel) -> DMatrix<f64> {
    let b = kernel.bandwidth;
    let centres: Vec<f64> = if b == 0.0 {
        vec![0.0]
    } else {
        let k_max = (2.0 * b * kernel.horizon + 1e-9).floor() as usize;
        (0..=k_max).map(|k| k as f64 / (2.0 * b)).collect()
    };
    DMatrix::from_fn(kernel.grid.len(), centres.len(), |i, k| {
        kernel.weights[i].sqrt() * bandlimited_correlator(b, kernel.grid[i] - centres[k])
    })
}

/// Principal angles (ascending) between the span of `modes` and the sinc basis.
pub fn sinc_subspace_overlap(modes: &DMatrix<f64>, kernel: &ClassicalKernel) -> Vec<f64> {
    principal_angles(&complexify(modes), &complexify(&sinc_basis(kernel)))
}

/// Causal variant: mode count of the kernel restricted to `[0, t_j]`, against the fixed
/// reference `r_cut · π_1(T)`, at every `stride`-th grid point.
pub fn forward_sampling_staircase(kernel: &ClassicalKernel, r_cut: f64, stride: usize) -> Result<Vec<(f64, usize)>> {
    if !(r_cut > 0.0 && r_cut < 1.0) {
        return Err(Error::invalid("r_cut", "must lie in (0, 1)"));
    }
    if stride == 0 {
        return Err(Error::invalid("stride", "must be positive"));
    }
    let threshold = r_cut * sorted_eigen(&kernel.kernel).0[0];
    let n = kernel.grid.len();
    let h = kernel.grid[1] - kernel.grid[0];
    let mut out = vec![(0.0, 0)];
    let mut j = stride;
    while j < n {
        let prefix = &kernel.grid[..=j];
        let w = trapezoid_weights(j + 1, h);
        let k = nystrom(prefix, &w, kernel.bandwidth);
        let count = SymmetricEigen::new(k).eigenvalues.iter().filter(|&&p| p > threshold).count();
        out.push((kernel.grid[j], count));
        j += stride;
    }
    Ok(out)
}
