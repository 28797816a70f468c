//! Field storage: per-node scalars, Cartesian-component vectors, and flat
//! rank-r tensors.

/// Scalar samples, one per grid node.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScalarField {
    pub data: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(n: usize) -> Self {
        ScalarField { data: vec![0.0; n] }
    }

    pub fn from_fn(n: usize, f: impl Fn(usize) -> f64) -> Self {
        ScalarField {
            data: (0..n).map(f).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn axpy(&mut self, a: f64, x: &ScalarField) {
        for (s, &v) in self.data.iter_mut().zip(x.data.iter()) {
            *s += a * v;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Vector samples with Cartesian (Eulerian) components, interleaved
/// `data[node * d + i]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VectorField {
    pub d: usize,
    pub data: Vec<f64>,
}

impl VectorField {
    pub fn zeros(n: usize, d: usize) -> Self {
        VectorField {
            d,
            data: vec![0.0; n * d],
        }
    }

    pub fn from_fn(n: usize, d: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut v = Self::zeros(n, d);
        for node in 0..n {
            for i in 0..d {
                v.data[node * d + i] = f(node, i);
            }
        }
        v
    }

    pub fn n_nodes(&self) -> usize {
        self.data.len() / self.d
    }

    #[inline]
    pub fn get(&self, node: usize) -> &[f64] {
        &self.data[node * self.d..(node + 1) * self.d]
    }

    #[inline]
    pub fn get_mut(&mut self, node: usize) -> &mut [f64] {
        &mut self.data[node * self.d..(node + 1) * self.d]
    }

    /// Extracts component i as a scalar sample array.
    pub fn component(&self, i: usize) -> Vec<f64> {
        (0..self.n_nodes()).map(|n| self.data[n * self.d + i]).collect()
    }

    pub fn axpy(&mut self, a: f64, x: &VectorField) {
        for (s, &v) in self.data.iter_mut().zip(x.data.iter()) {
            *s += a * v;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Rank-r tensor samples with Cartesian components, `d^r` per node, last
/// index fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorField {
    pub d: usize,
    pub rank: usize,
    pub data: Vec<f64>,
}

impl TensorField {
    pub fn zeros(n: usize, d: usize, rank: usize) -> Self {
        TensorField {
            d,
            rank,
            data: vec![0.0; n * d.pow(rank as u32)],
        }
    }

    pub fn comps(&self) -> usize {
        self.d.pow(self.rank as u32)
    }

    pub fn n_nodes(&self) -> usize {
        if self.comps() == 0 {
            0
        } else {
            self.data.len() / self.comps()
        }
    }

    #[inline]
    pub fn node(&self, node: usize) -> &[f64] {
        let c = self.comps();
        &self.data[node * c..(node + 1) * c]
    }

    #[inline]
    pub fn node_mut(&mut self, node: usize) -> &mut [f64] {
        let c = self.comps();
        &mut self.data[node * c..(node + 1) * c]
    }

    /// Linear offset of a component multi-index (slice of length `rank`).
    #[inline]
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.rank);
        idx.iter().fold(0, |acc, &i| acc * self.d + i)
    }

    pub fn from_scalar(s: &ScalarField, d: usize) -> Self {
        TensorField {
            d,
            rank: 0,
            data: s.data.clone(),
        }
    }

    pub fn from_vector(v: &VectorField) -> Self {
        TensorField {
            d: v.d,
            rank: 1,
            data: v.data.clone(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Iterator over all rank-r component multi-indices in offset order.
pub fn multi_indices(d: usize, rank: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..rank {
        let mut next = Vec::with_capacity(out.len() * d);
        for base in &out {
            for i in 0..d {
                let mut b = base.clone();
                b.push(i);
                next.push(b);
            }
        }
        out = next;
    }
    out
}
