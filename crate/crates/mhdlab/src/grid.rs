//! Logically rectangular reference grids.
//!
//! The production grid covers the unit disk with polar logical coordinates
//! (r, φ): radial nodes sit at r_j = (j+1/2)h so no node lands on r = 0, the
//! outermost ring lies exactly on the unit circle, and stencils that would
//! reach r < 0 pass through the pole to the antipodal column (φ + π). All
//! stencils are therefore centered except for the one-sided closures at the
//! physical boundary. A plain Cartesian patch grid is provided for
//! verification cases that need polynomial-exact differentiation.

use crate::linalg::MatD;
use crate::stencil::{cubic_quadrature_weights, first_derivative_plan, DerivPlan};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AxisTopology {
    /// wraps around (angular axis)
    Periodic,
    /// disk radial axis: r < 0 resolves to (|r|, φ+π); outer end is the boundary
    PolarRadial { conjugate: usize },
    /// closed interval with one-sided closures at both ends
    Bounded,
}

/// Ordered description of the physical boundary (the outer ring of the disk).
#[derive(Clone, Debug)]
pub struct Boundary {
    /// flat node ids in curve order (increasing φ, closed)
    pub nodes: Vec<usize>,
    /// curve parameter spacing (h_φ)
    pub param_spacing: f64,
    /// exact reference tangent dy/dφ per boundary node, interleaved
    pub y_tan: Vec<f64>,
    /// exact reference second derivative d²y/dφ² per boundary node
    pub y_tan2: Vec<f64>,
}

impl Boundary {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// 4th-order periodic derivative of ring data with respect to the curve
    /// parameter.
    pub fn ring_derivative(&self, vals: &[f64]) -> Vec<f64> {
        let n = vals.len();
        let h = self.param_spacing;
        let mut out = vec![0.0; n];
        for i in 0..n {
            let f = |o: isize| vals[(i as isize + o).rem_euclid(n as isize) as usize];
            out[i] = (f(-2) - 8.0 * f(-1) + 8.0 * f(1) - f(2)) / (12.0 * h);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GridKind {
    Disk,
    Cartesian,
}

#[derive(Clone, Debug)]
pub struct Grid {
    pub kind: GridKind,
    pub dim: usize,
    pub shape: Vec<usize>,
    pub spacing: Vec<f64>,
    pub axes: Vec<AxisTopology>,
    strides: Vec<usize>,
    /// reference positions, interleaved [node * dim + i]
    pub y: Vec<f64>,
    /// per-node product of per-axis quadrature weights (logical measure)
    pub vol_weight: Vec<f64>,
    /// exact |det ∂y/∂ξ| per node (r for the disk, 1 for Cartesian); used by
    /// quadrature so that affine flow maps integrate exactly
    pub ref_measure: Vec<f64>,
    /// derivative plan per axis
    plans: Vec<DerivPlan>,
    pub boundary: Option<Boundary>,
    /// FD-computed reference Jacobian ∂y/∂ξ per node and its inverse; using
    /// the same stencils as field derivatives makes affine maps exact.
    pub ref_jac: Vec<MatD>,
    pub ref_jac_inv: Vec<MatD>,
}

impl Grid {
    /// Unit-disk grid, `nr` radial rings (outermost on the circle) and
    /// `nphi` angular columns (must be even for pass-through stencils).
    pub fn disk(nr: usize, nphi: usize) -> Grid {
        assert!(nr >= 6, "nr must be at least 6");
        assert!(nphi >= 8 && nphi % 2 == 0, "nphi must be even and >= 8");
        let hr = 1.0 / (nr as f64 - 0.5);
        let hphi = std::f64::consts::TAU / nphi as f64;
        let shape = vec![nr, nphi];
        let spacing = vec![hr, hphi];
        let axes = vec![AxisTopology::PolarRadial { conjugate: 1 }, AxisTopology::Periodic];
        let n = nr * nphi;
        let mut y = vec![0.0; n * 2];
        for j in 0..nr {
            let r = (j as f64 + 0.5) * hr;
            for i in 0..nphi {
                let phi = i as f64 * hphi;
                let node = j * nphi + i;
                y[node * 2] = r * phi.cos();
                y[node * 2 + 1] = r * phi.sin();
            }
        }
        let plans = vec![
            first_derivative_plan(nr, hr, true, false),
            first_derivative_plan(nphi, hphi, true, true),
        ];
        let rs: Vec<f64> = (0..nr).map(|j| (j as f64 + 0.5) * hr).collect();
        let wr = cubic_quadrature_weights(&rs, 0.0, 1.0);
        let mut vol_weight = vec![0.0; n];
        for j in 0..nr {
            for i in 0..nphi {
                vol_weight[j * nphi + i] = wr[j] * hphi;
            }
        }
        let mut y_tan = vec![0.0; nphi * 2];
        let mut y_tan2 = vec![0.0; nphi * 2];
        for i in 0..nphi {
            let phi = i as f64 * hphi;
            y_tan[i * 2] = -phi.sin();
            y_tan[i * 2 + 1] = phi.cos();
            y_tan2[i * 2] = -phi.cos();
            y_tan2[i * 2 + 1] = -phi.sin();
        }
        let boundary = Some(Boundary {
            nodes: ((nr - 1) * nphi..nr * nphi).collect(),
            param_spacing: hphi,
            y_tan,
            y_tan2,
        });
        let mut ref_measure = vec![0.0; n];
        for j in 0..nr {
            for i in 0..nphi {
                ref_measure[j * nphi + i] = rs[j];
            }
        }
        let mut grid = Grid {
            kind: GridKind::Disk,
            dim: 2,
            shape,
            spacing,
            axes,
            strides: vec![nphi, 1],
            y,
            vol_weight,
            ref_measure,
            plans,
            boundary,
            ref_jac: Vec::new(),
            ref_jac_inv: Vec::new(),
        };
        grid.build_reference_jacobians();
        grid
    }

    /// Cartesian patch [x0,x1] x [y0,y1]; no physical boundary structure.
    pub fn cartesian2(n0: usize, n1: usize, ext: [[f64; 2]; 2]) -> Grid {
        assert!(n0 >= 5 && n1 >= 5);
        let h0 = (ext[0][1] - ext[0][0]) / (n0 as f64 - 1.0);
        let h1 = (ext[1][1] - ext[1][0]) / (n1 as f64 - 1.0);
        let n = n0 * n1;
        let mut y = vec![0.0; n * 2];
        for a in 0..n0 {
            for b in 0..n1 {
                let node = a * n1 + b;
                y[node * 2] = ext[0][0] + a as f64 * h0;
                y[node * 2 + 1] = ext[1][0] + b as f64 * h1;
            }
        }
        let plans = vec![
            first_derivative_plan(n0, h0, false, false),
            first_derivative_plan(n1, h1, false, false),
        ];
        let xs0: Vec<f64> = (0..n0).map(|a| ext[0][0] + a as f64 * h0).collect();
        let xs1: Vec<f64> = (0..n1).map(|b| ext[1][0] + b as f64 * h1).collect();
        let w0 = cubic_quadrature_weights(&xs0, ext[0][0], ext[0][1]);
        let w1 = cubic_quadrature_weights(&xs1, ext[1][0], ext[1][1]);
        let mut vol_weight = vec![0.0; n];
        for a in 0..n0 {
            for b in 0..n1 {
                vol_weight[a * n1 + b] = w0[a] * w1[b];
            }
        }
        let mut grid = Grid {
            kind: GridKind::Cartesian,
            dim: 2,
            shape: vec![n0, n1],
            spacing: vec![h0, h1],
            axes: vec![AxisTopology::Bounded, AxisTopology::Bounded],
            strides: vec![n1, 1],
            y,
            vol_weight,
            ref_measure: vec![1.0; n],
            plans,
            boundary: None,
            ref_jac: Vec::new(),
            ref_jac_inv: Vec::new(),
        };
        grid.build_reference_jacobians();
        grid
    }

    pub fn n_nodes(&self) -> usize {
        self.shape.iter().product()
    }

    #[inline]
    pub fn flat(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(self.strides.iter())
            .map(|(&i, &s)| i * s)
            .sum()
    }

    #[inline]
    pub fn multi(&self, mut node: usize) -> [usize; 3] {
        let mut out = [0usize; 3];
        for a in 0..self.dim {
            out[a] = node / self.strides[a];
            node %= self.strides[a];
        }
        out
    }

    #[inline]
    pub fn node_y(&self, node: usize) -> &[f64] {
        &self.y[node * self.dim..(node + 1) * self.dim]
    }

    /// Resolves a signed logical multi-index to a flat node id, applying
    /// pass-through-pole reflection and periodic wrap.
    pub fn resolve(&self, idx: &[isize]) -> usize {
        let mut ix = [0isize; 3];
        ix[..self.dim].copy_from_slice(idx);
        for a in 0..self.dim {
            if let AxisTopology::PolarRadial { conjugate } = self.axes[a] {
                if ix[a] < 0 {
                    ix[a] = -1 - ix[a];
                    ix[conjugate] += (self.shape[conjugate] / 2) as isize;
                }
            }
        }
        let mut flat = 0;
        for a in 0..self.dim {
            let n = self.shape[a] as isize;
            let i = match self.axes[a] {
                AxisTopology::Periodic => ix[a].rem_euclid(n),
                _ => {
                    debug_assert!(0 <= ix[a] && ix[a] < n, "axis {a} index {} out of range", ix[a]);
                    ix[a]
                }
            };
            flat += i as usize * self.strides[a];
        }
        flat
    }

    pub(crate) fn plan(&self, axis: usize) -> &DerivPlan {
        &self.plans[axis]
    }

    /// Logical-coordinate derivative of a scalar sample array along `axis`.
    pub fn deriv_axis(&self, f: &[f64], axis: usize, out: &mut [f64]) {
        debug_assert_eq!(f.len(), self.n_nodes());
        let plan = &self.plans[axis];
        let n = self.n_nodes();
        let mut idx = [0isize; 3];
        for node in 0..n {
            let mi = self.multi(node);
            for a in 0..self.dim {
                idx[a] = mi[a] as isize;
            }
            let base = idx[axis];
            let mut acc = 0.0;
            for &(off, w) in &plan.rows[mi[axis]] {
                idx[axis] = base + off;
                acc += w * f[self.resolve(&idx[..self.dim])];
            }
            idx[axis] = base;
            out[node] = acc;
        }
    }

    fn build_reference_jacobians(&mut self) {
        let n = self.n_nodes();
        let d = self.dim;
        let mut cols: Vec<Vec<f64>> = Vec::new();
        for a in 0..d {
            for i in 0..d {
                let comp: Vec<f64> = (0..n).map(|node| self.y[node * d + i]).collect();
                let mut dc = vec![0.0; n];
                self.deriv_axis(&comp, a, &mut dc);
                cols.push(dc);
            }
        }
        self.ref_jac = (0..n)
            .map(|node| {
                MatD::from_fn(d, |i, a| cols[a * d + i][node])
            })
            .collect();
        self.ref_jac_inv = self
            .ref_jac
            .iter()
            .map(|m| m.inverse().expect("reference Jacobian is invertible"))
            .collect();
    }

    pub fn boundary_nodes(&self) -> &[usize] {
        self.boundary.as_ref().map(|b| b.nodes.as_slice()).unwrap_or(&[])
    }

    /// Interior = everything that is not on the physical boundary.
    pub fn is_boundary(&self, node: usize) -> bool {
        match (&self.kind, &self.boundary) {
            (GridKind::Disk, Some(_)) => {
                let mi = self.multi(node);
                mi[0] == self.shape[0] - 1
            }
            _ => false,
        }
    }

    /// Nodes at least `margin` stencil layers away from any closed end, where
    /// centered interior stencils apply in every axis (verification cases
    /// restrict their norms to this set on Cartesian patches).
    pub fn deep_interior(&self, margin: usize) -> Vec<usize> {
        let mut out = Vec::new();
        'node: for node in 0..self.n_nodes() {
            let mi = self.multi(node);
            for a in 0..self.dim {
                let closed_lo = matches!(self.axes[a], AxisTopology::Bounded);
                let closed_hi = !matches!(self.axes[a], AxisTopology::Periodic);
                if closed_lo && mi[a] < margin {
                    continue 'node;
                }
                if closed_hi && mi[a] + margin >= self.shape[a] {
                    continue 'node;
                }
            }
            out.push(node);
        }
        out
    }
}
