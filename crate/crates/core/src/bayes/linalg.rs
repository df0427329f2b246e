//! Fixed-size symmetric-matrix helpers for per-pixel color statistics
//! (N = 1 for grayscale, N = 3 for RGB).

pub type Vector<const N: usize> = [f64; N];
pub type Matrix<const N: usize> = [[f64; N]; N];

pub fn zeros<const N: usize>() -> Matrix<N> {
    [[0.0; N]; N]
}

pub fn identity<const N: usize>() -> Matrix<N> {
    let mut m = zeros::<N>();
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

pub fn scaled_identity<const N: usize>(s: f64) -> Matrix<N> {
    let mut m = zeros::<N>();
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = s;
    }
    m
}

pub fn add<const N: usize>(a: &Matrix<N>, b: &Matrix<N>) -> Matrix<N> {
    let mut m = *a;
    for i in 0..N {
        for j in 0..N {
            m[i][j] += b[i][j];
        }
    }
    m
}

pub fn scale<const N: usize>(a: &Matrix<N>, s: f64) -> Matrix<N> {
    let mut m = *a;
    for row in &mut m {
        for v in row {
            *v *= s;
        }
    }
    m
}

pub fn matmul<const N: usize>(a: &Matrix<N>, b: &Matrix<N>) -> Matrix<N> {
    let mut m = zeros::<N>();
    for i in 0..N {
        for k in 0..N {
            for j in 0..N {
                m[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    m
}

pub fn transpose<const N: usize>(a: &Matrix<N>) -> Matrix<N> {
    let mut m = zeros::<N>();
    for i in 0..N {
        for j in 0..N {
            m[i][j] = a[j][i];
        }
    }
    m
}

pub fn matvec<const N: usize>(a: &Matrix<N>, v: &Vector<N>) -> Vector<N> {
    let mut out = [0.0; N];
    for i in 0..N {
        for j in 0..N {
            out[i] += a[i][j] * v[j];
        }
    }
    out
}

pub fn outer<const N: usize>(a: &Vector<N>, b: &Vector<N>) -> Matrix<N> {
    let mut m = zeros::<N>();
    for i in 0..N {
        for j in 0..N {
            m[i][j] = a[i] * b[j];
        }
    }
    m
}

pub fn dot<const N: usize>(a: &Vector<N>, b: &Vector<N>) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn trace<const N: usize>(a: &Matrix<N>) -> f64 {
    (0..N).map(|i| a[i][i]).sum()
}

/// Lower-triangular Cholesky factor of a symmetric matrix.
#[derive(Clone, Copy, Debug)]
pub struct Cholesky<const N: usize> {
    pub lower: Matrix<N>,
    /// Set when a pivot had to be floored; the factor then describes the
    /// nearest positive definite matrix rather than the input.
    pub projected: bool,
}

/// Pivots at or below this are treated as a loss of definiteness.
const PIVOT_TOLERANCE: f64 = 1e-12;

impl<const N: usize> Cholesky<N> {
    /// Strict factorization; `None` unless the matrix is numerically positive definite.
    pub fn new(a: &Matrix<N>) -> Option<Self> {
        let c = Self::factor(a, None);
        (!c.projected && c.is_finite()).then_some(c)
    }

    /// Factorization that floors any failing diagonal entry of the factor at `floor`.
    pub fn with_floor(a: &Matrix<N>, floor: f64) -> Self {
        Self::factor(a, Some(floor))
    }

    fn factor(a: &Matrix<N>, floor: Option<f64>) -> Self {
        let mut l = zeros::<N>();
        let mut projected = false;
        for j in 0..N {
            let mut d = a[j][j];
            for k in 0..j {
                d -= l[j][k] * l[j][k];
            }
            l[j][j] = if d > PIVOT_TOLERANCE && d.is_finite() {
                d.sqrt()
            } else {
                projected = true;
                floor.unwrap_or(f64::NAN)
            };
            for i in j + 1..N {
                let mut s = a[i][j];
                for k in 0..j {
                    s -= l[i][k] * l[j][k];
                }
                l[i][j] = s / l[j][j];
            }
        }
        Cholesky {
            lower: l,
            projected,
        }
    }

    fn is_finite(&self) -> bool {
        self.lower.iter().flatten().all(|v| v.is_finite())
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..N).map(|i| self.lower[i][i].ln()).sum::<f64>()
    }

    /// Solve `A x = b`.
    pub fn solve(&self, b: &Vector<N>) -> Vector<N> {
        let l = &self.lower;
        let mut z = *b;
        for i in 0..N {
            for k in 0..i {
                z[i] -= l[i][k] * z[k];
            }
            z[i] /= l[i][i];
        }
        for i in (0..N).rev() {
            for k in i + 1..N {
                z[i] -= l[k][i] * z[k];
            }
            z[i] /= l[i][i];
        }
        z
    }

    pub fn inverse(&self) -> Matrix<N> {
        let mut inv = zeros::<N>();
        for j in 0..N {
            let mut e = [0.0; N];
            e[j] = 1.0;
            let col = self.solve(&e);
            for i in 0..N {
                inv[i][j] = col[i];
            }
        }
        // symmetrize away rounding
        for i in 0..N {
            for j in i + 1..N {
                let v = 0.5 * (inv[i][j] + inv[j][i]);
                inv[i][j] = v;
                inv[j][i] = v;
            }
        }
        inv
    }

    /// `A` reassembled from the factor.
    pub fn reconstruct(&self) -> Matrix<N> {
        matmul(&self.lower, &transpose(&self.lower))
    }
}
