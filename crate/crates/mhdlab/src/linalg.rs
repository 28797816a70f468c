//! Tiny dense linear algebra for per-node d x d work (d = 2 or 3) and
//! deterministic reductions.

/// Row-major d x d matrix backed by a fixed array; only the leading d*d
/// entries are used.
#[derive(Clone, Copy, Debug)]
pub struct MatD {
    pub d: usize,
    a: [f64; 9],
}

impl MatD {
    pub fn zeros(d: usize) -> Self {
        debug_assert!(d == 2 || d == 3);
        MatD { d, a: [0.0; 9] }
    }

    pub fn identity(d: usize) -> Self {
        let mut m = Self::zeros(d);
        for i in 0..d {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_fn(d: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(d);
        for i in 0..d {
            for j in 0..d {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.d + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.a[i * self.d + j] = v;
    }

    #[inline]
    pub fn add_to(&mut self, i: usize, j: usize, v: f64) {
        self.a[i * self.d + j] += v;
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.d, |i, j| self.get(j, i))
    }

    pub fn mul(&self, o: &Self) -> Self {
        let d = self.d;
        Self::from_fn(d, |i, j| {
            let mut s = 0.0;
            for k in 0..d {
                s += self.get(i, k) * o.get(k, j);
            }
            s
        })
    }

    pub fn mul_vec(&self, v: &[f64], out: &mut [f64]) {
        let d = self.d;
        for i in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += self.get(i, k) * v[k];
            }
            out[i] = s;
        }
    }

    /// v^T M w
    pub fn quad(&self, v: &[f64], w: &[f64]) -> f64 {
        let d = self.d;
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                s += v[i] * self.get(i, j) * w[j];
            }
        }
        s
    }

    pub fn scale(&self, c: f64) -> Self {
        let mut m = *self;
        for v in m.a.iter_mut() {
            *v *= c;
        }
        m
    }

    pub fn add(&self, o: &Self) -> Self {
        Self::from_fn(self.d, |i, j| self.get(i, j) + o.get(i, j))
    }

    pub fn sub(&self, o: &Self) -> Self {
        Self::from_fn(self.d, |i, j| self.get(i, j) - o.get(i, j))
    }

    pub fn det(&self) -> f64 {
        match self.d {
            2 => self.get(0, 0) * self.get(1, 1) - self.get(0, 1) * self.get(1, 0),
            3 => {
                self.get(0, 0) * (self.get(1, 1) * self.get(2, 2) - self.get(1, 2) * self.get(2, 1))
                    - self.get(0, 1)
                        * (self.get(1, 0) * self.get(2, 2) - self.get(1, 2) * self.get(2, 0))
                    + self.get(0, 2)
                        * (self.get(1, 0) * self.get(2, 1) - self.get(1, 1) * self.get(2, 0))
            }
            _ => unreachable!(),
        }
    }

    pub fn inverse(&self) -> Option<Self> {
        let det = self.det();
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        let inv_det = 1.0 / det;
        let m = match self.d {
            2 => {
                let mut m = Self::zeros(2);
                m.set(0, 0, self.get(1, 1) * inv_det);
                m.set(0, 1, -self.get(0, 1) * inv_det);
                m.set(1, 0, -self.get(1, 0) * inv_det);
                m.set(1, 1, self.get(0, 0) * inv_det);
                m
            }
            3 => {
                let c = |i0: usize, i1: usize, j0: usize, j1: usize| {
                    self.get(i0, j0) * self.get(i1, j1) - self.get(i0, j1) * self.get(i1, j0)
                };
                let mut m = Self::zeros(3);
                // adjugate transpose
                m.set(0, 0, c(1, 2, 1, 2) * inv_det);
                m.set(0, 1, -c(0, 2, 1, 2) * inv_det);
                m.set(0, 2, c(0, 1, 1, 2) * inv_det);
                m.set(1, 0, -c(1, 2, 0, 2) * inv_det);
                m.set(1, 1, c(0, 2, 0, 2) * inv_det);
                m.set(1, 2, -c(0, 1, 0, 2) * inv_det);
                m.set(2, 0, c(1, 2, 0, 1) * inv_det);
                m.set(2, 1, -c(0, 2, 0, 1) * inv_det);
                m.set(2, 2, c(0, 1, 0, 1) * inv_det);
                m
            }
            _ => unreachable!(),
        };
        Some(m)
    }

    pub fn trace(&self) -> f64 {
        (0..self.d).map(|i| self.get(i, i)).sum()
    }

    pub fn frobenius2(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..self.d {
            for j in 0..self.d {
                s += self.get(i, j) * self.get(i, j);
            }
        }
        s
    }

    /// Eigenvalue extremes of a symmetric matrix (for conditioning checks).
    pub fn sym_eig_bounds(&self) -> (f64, f64) {
        match self.d {
            2 => {
                let a = self.get(0, 0);
                let b = self.get(0, 1);
                let c = self.get(1, 1);
                let m = 0.5 * (a + c);
                let r = (0.25 * (a - c) * (a - c) + b * b).sqrt();
                (m - r, m + r)
            }
            3 => {
                // Gershgorin-style bounds are enough for a conditioning guard.
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for i in 0..3 {
                    let mut off = 0.0;
                    for j in 0..3 {
                        if j != i {
                            off += self.get(i, j).abs();
                        }
                    }
                    lo = lo.min(self.get(i, i) - off);
                    hi = hi.max(self.get(i, i) + off);
                }
                (lo, hi)
            }
            _ => unreachable!(),
        }
    }
}

/// Deterministic pairwise-tree sum: the reduction order is a fixed function
/// of the slice length, so repeated runs are bit-identical.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        let mut s = 0.0;
        for &x in xs {
            s += x;
        }
        return s;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Deterministic dot product via pairwise reduction on a scratch buffer.
pub fn pairwise_dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    pairwise_sum_iter(a.len(), |i| a[i] * b[i])
}

/// Pairwise sum of f(i) for i in 0..n without materializing the products.
pub fn pairwise_sum_iter(n: usize, f: impl Fn(usize) -> f64 + Copy) -> f64 {
    fn go(lo: usize, hi: usize, f: impl Fn(usize) -> f64 + Copy) -> f64 {
        if hi - lo <= 8 {
            let mut s = 0.0;
            for i in lo..hi {
                s += f(i);
            }
            return s;
        }
        let mid = lo + (hi - lo) / 2;
        go(lo, mid, f) + go(mid, hi, f)
    }
    go(0, n, f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_2x2_and_3x3() {
        let m = MatD::from_fn(2, |i, j| if i == j { 3.0 } else { 1.0 });
        let inv = m.inverse().unwrap();
        let id = m.mul(&inv);
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((id.get(i, j) - want).abs() < 1e-14);
            }
        }
        let m3 = MatD::from_fn(3, |i, j| (i * 3 + j) as f64 + if i == j { 5.0 } else { 0.0 });
        let inv3 = m3.inverse().unwrap();
        let id3 = m3.mul(&inv3);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((id3.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pairwise_sum_matches_naive() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let naive: f64 = xs.iter().sum();
        assert!((pairwise_sum(&xs) - naive).abs() < 1e-10);
    }

    #[test]
    fn pairwise_sum_is_deterministic() {
        let xs: Vec<f64> = (0..777).map(|i| 1.0 / (1.0 + i as f64)).collect();
        let a = pairwise_sum(&xs);
        let b = pairwise_sum(&xs);
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
