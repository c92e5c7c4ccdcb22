//! Linear time-invariant state-space primitives: zero-order-hold
//! discretization, the recurrent scan and its equivalent causal convolution.

use crate::error::{Error, Result};
use crate::numerics::tensor::{matmul_raw, Tensor};

/// Continuous single-input single-output SSM `h' = A h + B u`, `y = C h`.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    /// `N × N` state matrix.
    pub a: Tensor,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub delta: f64,
}

/// Step-form parameters `h_t = A_x h_{t-1} + B_x u_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSsm {
    pub a: Tensor,
    pub b: Vec<f64>,
}

impl DiscreteSsm {
    pub fn state_dim(&self) -> usize {
        self.b.len()
    }
}

impl SsmParams {
    pub fn state_dim(&self) -> usize {
        self.b.len()
    }

    /// Diagonal state matrix with entries `-(1 + k)`.
    pub fn stable_diagonal(b: Vec<f64>, c: Vec<f64>, delta: f64) -> Self {
        let n = b.len();
        let mut a = Tensor::zeros(&[n, n]);
        for k in 0..n {
            a.data_mut()[k * n + k] = -(1.0 + k as f64);
        }
        Self { a, b, c, delta }
    }

    fn validate(&self) -> Result<()> {
        let n = self.b.len();
        if n == 0 {
            return Err(Error::config("N_state", "must be at least 1"));
        }
        if self.a.shape() != [n, n] || self.c.len() != n {
            return Err(Error::ShapeMismatch {
                op: "ssm",
                left: self.a.shape().to_vec(),
                right: vec![self.b.len(), self.c.len()],
            });
        }
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(Error::config("delta", format!("step size must be positive and finite, got {}", self.delta)));
        }
        if !self.a.is_finite() {
            return Err(Error::NonFinite("ssm state matrix".into()));
        }
        Ok(())
    }
}

const SERIES_TOL: f64 = 1e-15;
const SERIES_MAX_TERMS: usize = 30;

fn one_norm(m: &[f64], n: usize) -> f64 {
    (0..n)
        .map(|j| (0..n).map(|i| m[i * n + j].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `exp(M)` by scaling and squaring around a Taylor series that stops once a
/// term's 1-norm drops below `1e-15` (relative) or after 30 terms.
pub(crate) fn expm(m: &[f64], n: usize) -> Vec<f64> {
    let norm = one_norm(m, n);
    let mut squarings = 0u32;
    let mut scale = 1.0;
    while norm * scale > 0.5 {
        scale *= 0.5;
        squarings += 1;
    }
    let scaled: Vec<f64> = m.iter().map(|v| v * scale).collect();

    let mut result = vec![0.0; n * n];
    let mut term = vec![0.0; n * n];
    for i in 0..n {
        result[i * n + i] = 1.0;
        term[i * n + i] = 1.0;
    }
    for k in 1..=SERIES_MAX_TERMS {
        term = matmul_raw(&term, &scaled, n, n, n);
        let inv_k = 1.0 / k as f64;
        term.iter_mut().for_each(|v| *v *= inv_k);
        for (r, t) in result.iter_mut().zip(&term) {
            *r += t;
        }
        if one_norm(&term, n) <= SERIES_TOL * one_norm(&result, n) {
            break;
        }
    }
    for _ in 0..squarings {
        result = matmul_raw(&result, &result, n, n, n);
    }
    result
}

/// Zero-order-hold discretization: `A_x = exp(ΔA)` and
/// `B_x = Σ_{k≥1} (ΔA)^{k-1}/k! · ΔB`.
///
/// Both come out of one exponential of the augmented matrix
/// `[[ΔA, ΔB], [0, 0]]`, whose upper-right block is exactly that series, so a
/// singular `A` needs no inversion.
pub fn discretize(p: &SsmParams) -> Result<DiscreteSsm> {
    p.validate()?;
    let n = p.state_dim();
    let m = n + 1;
    let mut aug = vec![0.0; m * m];
    for i in 0..n {
        for j in 0..n {
            aug[i * m + j] = p.delta * p.a.at(i, j);
        }
        aug[i * m + n] = p.delta * p.b[i];
    }
    let e = expm(&aug, m);
    let mut a = vec![0.0; n * n];
    let mut b = vec![0.0; n];
    for i in 0..n {
        a[i * n..(i + 1) * n].copy_from_slice(&e[i * m..i * m + n]);
        b[i] = e[i * m + n];
    }
    if a.iter().chain(&b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("discretize (delta = {})", p.delta)));
    }
    Ok(DiscreteSsm { a: Tensor::from_parts(vec![n, n], a), b })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mat_vec(a: &Tensor, v: &[f64]) -> Vec<f64> {
    (0..a.rows()).map(|i| dot(a.row(i), v)).collect()
}

/// Recurrent form from a zero state: `h_t = A_x h_{t-1} + B_x u_t`, `y_t = C h_t`.
pub fn scan(d: &DiscreteSsm, c: &[f64], u: &[f64]) -> Vec<f64> {
    let mut h = vec![0.0; d.state_dim()];
    u.iter()
        .map(|&ut| {
            let mut next = mat_vec(&d.a, &h);
            for (hn, bn) in next.iter_mut().zip(&d.b) {
                *hn += bn * ut;
            }
            h = next;
            dot(c, &h)
        })
        .collect()
}

/// Impulse response `K[k] = C A_x^k B_x` for `k = 0..len`.
pub fn kernel(d: &DiscreteSsm, c: &[f64], len: usize) -> Vec<f64> {
    let mut v = d.b.clone();
    let mut k = Vec::with_capacity(len);
    for step in 0..len {
        k.push(dot(c, &v));
        if step + 1 < len {
            v = mat_vec(&d.a, &v);
        }
    }
    k
}

/// Causal convolution `y_t = Σ_{k=0}^{t} K[k] u_{t-k}`.
pub fn conv_apply(u: &[f64], k: &[f64]) -> Result<Vec<f64>> {
    if u.len() != k.len() {
        return Err(Error::ShapeMismatch {
            op: "conv_apply",
            left: vec![u.len()],
            right: vec![k.len()],
        });
    }
    Ok((0..u.len())
        .map(|t| (0..=t).map(|j| k[j] * u[t - j]).sum())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use nalgebra::DMatrix;
    use rand::Rng;

    fn random_params(rng: &mut impl Rng, n: usize, delta: f64) -> SsmParams {
        // shrink a random matrix until its 1-norm (an upper bound on the
        // spectral radius) is below one
        let mut a: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = one_norm(&a, n);
        a.iter_mut().for_each(|v| *v *= 0.9 / norm);
        SsmParams {
            a: Tensor::from_parts(vec![n, n], a),
            b: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            c: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            delta,
        }
    }

    #[test]
    fn zero_state_matrix_gives_identity_and_delta_b() {
        let p = SsmParams {
            a: Tensor::zeros(&[3, 3]),
            b: vec![0.5, -2.0, 7.25],
            c: vec![1.0; 3],
            delta: 0.3,
        };
        let d = discretize(&p).unwrap();
        assert_eq!(d.a, Tensor::identity(3));
        assert_eq!(d.b, vec![0.3 * 0.5, 0.3 * -2.0, 0.3 * 7.25]);
    }

    #[test]
    fn small_step_limit() {
        let mut rng = stream(3, 0);
        let p = random_params(&mut rng, 4, 1e-6);
        let d = discretize(&p).unwrap();
        let a_norm = DMatrix::from_row_slice(4, 4, p.a.data()).norm();
        let diff = DMatrix::from_row_slice(4, 4, d.a.data()) - DMatrix::identity(4, 4);
        assert!(diff.norm() <= 2e-6 * a_norm);
        let b_err: f64 = d.b.iter().zip(&p.b).map(|(x, b)| (x - 1e-6 * b).powi(2)).sum::<f64>().sqrt();
        assert!(b_err <= 1e-11, "{b_err}");
    }

    #[test]
    fn rejects_bad_delta() {
        let mut p = SsmParams::stable_diagonal(vec![1.0], vec![1.0], 0.0);
        assert!(discretize(&p).is_err());
        p.delta = f64::NAN;
        assert!(discretize(&p).is_err());
    }

    #[test]
    fn rejects_non_finite_result() {
        let mut p = SsmParams::stable_diagonal(vec![1.0], vec![1.0], 1e300);
        p.a = Tensor::full(&[1, 1], 5.0);
        assert!(matches!(discretize(&p), Err(Error::NonFinite(_))));
    }

    #[test]
    fn matches_padé_exponential_oracle() {
        let mut rng = stream(4, 0);
        for _ in 0..20 {
            let p = random_params(&mut rng, 4, 0.1);
            let d = discretize(&p).unwrap();
            let a = DMatrix::from_row_slice(4, 4, p.a.data()) * p.delta;
            let ea = a.clone().exp();
            let bx = a.clone().try_inverse().unwrap()
                * (&ea - DMatrix::identity(4, 4))
                * (nalgebra::DVector::from_vec(p.b.clone()) * p.delta);
            for i in 0..4 {
                for j in 0..4 {
                    assert!((d.a.at(i, j) - ea[(i, j)]).abs() <= 1e-9);
                }
                assert!((d.b[i] - bx[i]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn single_step_scan() {
        let p = SsmParams::stable_diagonal(vec![0.3, -0.4], vec![1.5, 2.0], 0.1);
        let d = discretize(&p).unwrap();
        let y = scan(&d, &p.c, &[2.0]);
        assert!((y[0] - dot(&p.c, &d.b) * 2.0).abs() < 1e-15);
        assert!(scan(&d, &p.c, &[0.0; 9]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kernel_edge_cases() {
        let d = DiscreteSsm { a: Tensor::zeros(&[2, 2]), b: vec![1.0, 2.0] };
        assert_eq!(kernel(&d, &[3.0, 1.0], 4), vec![5.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_cases() {
        let u = [1.0, -2.0, 3.5, 0.25];
        assert_eq!(conv_apply(&u, &[1.0, 0.0, 0.0, 0.0]).unwrap(), u.to_vec());
        let k = [0.5, 0.1, -0.2, 0.7];
        assert_eq!(conv_apply(&[1.0, 0.0, 0.0, 0.0], &k).unwrap(), k.to_vec());
        assert!(conv_apply(&u, &k[..3]).is_err());
    }

    #[test]
    fn conv_matches_double_loop_oracle() {
        let mut rng = stream(5, 0);
        let u: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut want = vec![0.0; 16];
        for t in 0..16 {
            for j in 0..16 {
                if j <= t {
                    want[t] += k[j] * u[t - j];
                }
            }
        }
        assert_eq!(conv_apply(&u, &k).unwrap(), want);
    }
}
