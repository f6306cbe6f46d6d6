//! Small dense linear-algebra helpers on complex matrices.

use nalgebra::DMatrix;

use crate::{CMatrix, Error, Result, C64};

/// Eigenphases closer than this to ±π are reported as branch-cut ambiguous.
pub const BRANCH_CUT_TOLERANCE: f64 = 1e-9;

/// Makes the largest-magnitude entry of `v` real and positive.
///
/// Ties within a relative `1e-10` are broken by the lowest index.
pub fn phase_fix(v: &mut [C64]) {
    let max = v.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if max == 0.0 {
        return;
    }
    let pivot = v.iter().position(|z| z.norm() >= max * (1.0 - 1e-10)).expect("nonempty vector with a maximum");
    let phase = v[pivot].conj() / v[pivot].norm();
    for z in v.iter_mut() {
        *z *= phase;
    }
}

/// Hermitian eigendecomposition with eigenvalues sorted descending.
///
/// Eigenvectors are columns of the returned matrix, each phase-fixed by [`phase_fix`].
pub fn hermitian_eigen(m: &CMatrix) -> (Vec<f64>, CMatrix) {
    let n = m.nrows();
    if n == 0 {
        return (Vec::new(), CMatrix::zeros(0, 0));
    }
    let h = hermitize(m);
    let eig = h.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = CMatrix::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        let mut v: Vec<C64> = eig.eigenvectors.column(i).iter().copied().collect();
        phase_fix(&mut v);
        for (r, z) in v.into_iter().enumerate() {
            vectors[(r, col)] = z;
        }
    }
    (values, vectors)
}

/// Returns `(m + m†)/2`.
pub fn hermitize(m: &CMatrix) -> CMatrix {
    (m + m.adjoint()) * C64::new(0.5, 0.0)
}

/// Largest entry modulus of `m − m†`.
pub fn hermiticity_defect(m: &CMatrix) -> f64 {
    (m - m.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Largest entry modulus of `u u† − I`.
pub fn unitarity_defect(u: &CMatrix) -> f64 {
    let n = u.nrows();
    (u * u.adjoint() - CMatrix::identity(n, n)).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Evaluates `exp(−i s H)` for Hermitian `H`.
pub fn expm_hermitian(h: &CMatrix, s: f64) -> CMatrix {
    let n = h.nrows();
    if n == 0 {
        return CMatrix::zeros(0, 0);
    }
    let (vals, vecs) = hermitian_eigen(h);
    let mut scaled = vecs.clone();
    for (j, &lambda) in vals.iter().enumerate() {
        let phase = C64::from_polar(1.0, -s * lambda);
        for z in scaled.column_mut(j).iter_mut() {
            *z *= phase;
        }
    }
    scaled * vecs.adjoint()
}

/// Hermitian generator `G` with `U = exp(−i G)`, i.e. `G = i ln U` on the principal branch.
///
/// Eigenphases of `U` are folded to `(−π, π]`; a phase within [`BRANCH_CUT_TOLERANCE`]
/// of `±π` is rejected because the logarithm is ambiguous there.
pub fn unitary_log(u: &CMatrix) -> Result<CMatrix> {
    match unitary_log_folded(u) {
        (_, Some(phase)) => Err(Error::LogBranchAmbiguity { phase }),
        (g, None) => Ok(g),
    }
}

/// Like [`unitary_log`], but eigenphases within [`BRANCH_CUT_TOLERANCE`] of `±π` are
/// all placed at `+π`, so a degenerate `−1` eigenspace gets a single generator value.
/// Returns the generator and the first ambiguous phase encountered, if any.
pub fn unitary_log_folded(u: &CMatrix) -> (CMatrix, Option<f64>) {
    let n = u.nrows();
    if n == 0 {
        return (CMatrix::zeros(0, 0), None);
    }
    let (q, t) = u.clone().schur().unpack();
    let mut g = CMatrix::zeros(n, n);
    let mut ambiguous = None;
    for k in 0..n {
        let mut phase = t[(k, k)].arg();
        if std::f64::consts::PI - phase.abs() < BRANCH_CUT_TOLERANCE {
            ambiguous.get_or_insert(phase);
            phase = std::f64::consts::PI;
        }
        let qk = q.column(k);
        g += (qk * qk.adjoint()) * C64::new(-phase, 0.0);
    }
    (hermitize(&g), ambiguous)
}

/// Orthonormal basis of the column span of `a` (thin QR; assumes full column rank).
pub fn orthonormalize(a: &CMatrix) -> CMatrix {
    if a.ncols() == 0 {
        return CMatrix::zeros(a.nrows(), 0);
    }
    a.clone().qr().q()
}

/// Principal angles (ascending, radians) between the column spans of `a` and `b`.
///
/// Returns `min(dim a, dim b)` angles. Sines are taken from the residual of the
/// smaller basis after projection onto the larger one, which keeps small angles accurate.
pub fn principal_angles(a: &CMatrix, b: &CMatrix) -> Vec<f64> {
    let (small, large) = if a.ncols() <= b.ncols() { (a, b) } else { (b, a) };
    if small.ncols() == 0 {
        return Vec::new();
    }
    let qs = orthonormalize(small);
    let ql = orthonormalize(large);
    let residual = &qs - &ql * (ql.adjoint() * &qs);
    let mut sines: Vec<f64> = residual.singular_values().iter().map(|s| s.clamp(0.0, 1.0)).collect();
    sines.sort_by(f64::total_cmp);
    sines.into_iter().map(f64::asin).collect()
}

/// Trace distance `‖a − b‖₁ / 2` of two Hermitian matrices.
pub fn trace_distance(a: &CMatrix, b: &CMatrix) -> f64 {
    let diff = hermitize(&(a - b));
    0.5 * diff.symmetric_eigen().eigenvalues.iter().map(|x| x.abs()).sum::<f64>()
}

/// Frobenius norm.
pub fn frobenius(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Embeds a real matrix into the complex field.
pub fn complexify(m: &DMatrix<f64>) -> CMatrix {
    m.map(|x| C64::new(x, 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn random_hermitian(n: usize, seed: u64) -> CMatrix {
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let a = CMatrix::from_fn(n, n, |_, _| C64::new(next(), next()));
        hermitize(&a)
    }

    #[test]
    fn eigen_sorted_and_reconstructs() {
        let h = random_hermitian(6, 3);
        let (vals, vecs) = hermitian_eigen(&h);
        assert!(vals.windows(2).all(|w| w[0] >= w[1]));
        let d = CMatrix::from_diagonal(&nalgebra::DVector::from_iterator(6, vals.iter().map(|&x| C64::new(x, 0.0))));
        let rebuilt = &vecs * d * vecs.adjoint();
        assert!(frobenius(&(rebuilt - h)) < 1e-12);
        for j in 0..6 {
            let col = vecs.column(j);
            let (_, big) =
                col.iter().enumerate().fold((0, 0.0), |acc, (i, z)| if z.norm() > acc.1 { (i, z.norm()) } else { acc });
            assert!(big > 0.0);
            let pivot = col.iter().find(|z| z.norm() >= big * (1.0 - 1e-10)).unwrap();
            assert_abs_diff_eq!(pivot.im, 0.0, epsilon = 1e-14);
            assert!(pivot.re > 0.0);
        }
    }

    #[test]
    fn log_of_exp_round_trip() {
        let g = random_hermitian(5, 11);
        let u = expm_hermitian(&g, 1.0);
        assert!(unitarity_defect(&u) < 1e-12);
        let back = unitary_log(&u).unwrap();
        assert!(frobenius(&(expm_hermitian(&back, 1.0) - &u)) < 1e-12);
        assert!(frobenius(&(back - g)) < 1e-10);
    }

    #[test]
    fn log_of_scalar_phase() {
        let u = CMatrix::from_element(1, 1, C64::from_polar(1.0, -0.3));
        let g = unitary_log(&u).unwrap();
        assert_abs_diff_eq!(g[(0, 0)].re, 0.3, epsilon = 1e-14);
    }

    #[test]
    fn log_rejects_branch_cut() {
        let u = CMatrix::from_element(1, 1, C64::new(-1.0, 0.0));
        assert!(matches!(unitary_log(&u), Err(Error::LogBranchAmbiguity { .. })));
        let swap = CMatrix::from_row_slice(
            2,
            2,
            &[C64::new(0.0, 0.0), C64::new(1.0, 0.0), C64::new(1.0, 0.0), C64::new(0.0, 0.0)],
        );
        let (g, cut) = unitary_log_folded(&swap);
        assert!(cut.is_some());
        assert!(frobenius(&(expm_hermitian(&g, 1.0) - swap)) < 1e-12);
    }

    #[test]
    fn principal_angles_of_known_planes() {
        let a = CMatrix::from_column_slice(3, 1, &[C64::new(1.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0)]);
        let th = 0.3f64;
        let b =
            CMatrix::from_column_slice(3, 1, &[C64::new(th.cos(), 0.0), C64::new(th.sin(), 0.0), C64::new(0.0, 0.0)]);
        let angles = principal_angles(&a, &b);
        assert_eq!(angles.len(), 1);
        assert_abs_diff_eq!(angles[0], th, epsilon = 1e-14);
        let tiny = 1e-9;
        let c = CMatrix::from_column_slice(3, 1, &[C64::new(1.0, 0.0), C64::new(0.0, 0.0), C64::new(tiny, 0.0)]);
        assert_abs_diff_eq!(principal_angles(&a, &c)[0], tiny, epsilon = 1e-15);
    }

    #[test]
    fn trace_distance_of_orthogonal_projectors() {
        let mut a = CMatrix::zeros(2, 2);
        a[(0, 0)] = C64::new(1.0, 0.0);
        let mut b = CMatrix::zeros(2, 2);
        b[(1, 1)] = C64::new(1.0, 0.0);
        assert_abs_diff_eq!(trace_distance(&a, &b), 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(trace_distance(&a, &a), 0.0, epsilon = 1e-14);
    }
}
