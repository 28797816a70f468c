//! Lagrangian-coordinate geometry of the evolving domain: metric, normal,
//! projection, second fundamental form, measure rates, and the interior
//! q-tensor that weights the higher-order energies.

use std::sync::Arc;

use crate::error::{MhdError, Result};
use crate::field::{ScalarField, TensorField, VectorField};
use crate::grid::Grid;
use crate::linalg::MatD;

/// Condition-number guard for the induced metric.
pub const METRIC_COND_LIMIT: f64 = 1e8;

/// Normal-spread parameter η used when measuring l₁ on the discrete boundary.
pub const NORMAL_SPREAD_ETA: f64 = 2.0;

/// The flow map x(t, ·) on the reference grid; the evolving geometry's
/// source of truth.
#[derive(Clone, Debug)]
pub struct FlowMapState {
    pub grid: Arc<Grid>,
    /// current positions, Cartesian components per node
    pub x: VectorField,
    pub t: f64,
}

impl FlowMapState {
    pub fn identity(grid: Arc<Grid>) -> Self {
        let n = grid.n_nodes();
        let d = grid.dim;
        let x = VectorField::from_fn(n, d, |node, i| grid.node_y(node)[i]);
        FlowMapState { grid, x, t: 0.0 }
    }

    pub fn from_map(grid: Arc<Grid>, f: impl Fn(&[f64]) -> [f64; 3]) -> Self {
        let n = grid.n_nodes();
        let d = grid.dim;
        let x = VectorField::from_fn(n, d, |node, i| f(grid.node_y(node))[i]);
        FlowMapState { grid, x, t: 0.0 }
    }

    pub fn dilation(grid: Arc<Grid>, c: f64) -> Self {
        Self::from_map(grid, |y| {
            let mut out = [0.0; 3];
            for (o, &yi) in out.iter_mut().zip(y.iter()) {
                *o = c * yi;
            }
            out
        })
    }
}

/// Geometry of the boundary curve in Eulerian components.
#[derive(Clone, Debug)]
pub struct BoundaryGeometry {
    /// unit outward normal per boundary node
    pub normal: Vec<f64>,
    /// unit tangent per boundary node
    pub tangent: Vec<f64>,
    /// conormal N_a = F^T n (Lagrangian index)
    pub conormal: Vec<f64>,
    /// curvature of the boundary curve against the outward normal
    pub curvature: Vec<f64>,
    /// Eulerian second fundamental form θ_{ij} = κ T_i T_j
    pub theta: Vec<MatD>,
    /// invariant norm |θ|_g per node
    pub theta_norm: Vec<f64>,
    /// mean curvature σ = tr_g θ
    pub sigma: Vec<f64>,
    /// |∂x/∂φ|: dμ_γ = measure · dφ
    pub measure: Vec<f64>,
}

/// All geometric quantities derived from one flow map.
#[derive(Clone, Debug)]
pub struct GeometryCache {
    pub grid: Arc<Grid>,
    pub t: f64,
    /// F = ∂x/∂y per node
    pub f_jac: Vec<MatD>,
    pub f_jac_inv: Vec<MatD>,
    /// det F (positive); equals √det g
    pub det_f: Vec<f64>,
    /// induced metric g = FᵀF and inverse
    pub g: Vec<MatD>,
    pub g_inv: Vec<MatD>,
    pub bnd: BoundaryGeometry,
    /// Eulerian distance to the boundary, clamped beyond the collar
    pub dist: ScalarField,
    /// cutoff η(dist)
    pub eta: ScalarField,
    /// extended unit normal −∇dist where η > 0, zero elsewhere
    pub n_ext: VectorField,
    /// interior projection tensor q^{ij} = δ^{ij} − η² N^i N^j
    pub q: Vec<MatD>,
    /// foliation depth d₀
    pub d0: f64,
    /// injectivity-radius lower bound
    pub iota0_lower: f64,
    /// sup |θ|_g
    pub k0: f64,
    /// normal-spread length l₁ (may be infinite)
    pub l1: f64,
}

impl GeometryCache {
    /// Quadrature weight for ∫ · dμ_g at a node.
    #[inline]
    pub fn interior_weight(&self, node: usize) -> f64 {
        self.grid.vol_weight[node] * self.grid.ref_measure[node] * self.det_f[node]
    }

    /// Quadrature weight for ∮ · dμ_γ at boundary position `bi`.
    #[inline]
    pub fn boundary_weight(&self, bi: usize) -> f64 {
        let b = self.grid.boundary.as_ref().unwrap();
        b.param_spacing * self.bnd.measure[bi]
    }

    pub fn boundary_nodes(&self) -> &[usize] {
        self.grid.boundary_nodes()
    }

    /// Eulerian projector γ_i^j = δ_i^j − n_i n^j at boundary position `bi`.
    pub fn gamma(&self, bi: usize) -> MatD {
        let d = self.grid.dim;
        let n = &self.bnd.normal[bi * d..(bi + 1) * d];
        MatD::from_fn(d, |i, j| (if i == j { 1.0 } else { 0.0 }) - n[i] * n[j])
    }

    pub fn domain_area(&self) -> f64 {
        crate::linalg::pairwise_sum_iter(self.grid.n_nodes(), |n| self.interior_weight(n))
    }
}

/// Quintic C² step: 1 for s ≤ 0, 0 for s ≥ 1.
fn quintic_step_down(s: f64) -> f64 {
    if s <= 0.0 {
        1.0
    } else if s >= 1.0 {
        0.0
    } else {
        1.0 - s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
    }
}

/// η(dist): 1 for dist ≤ d₀/4, 0 for dist ≥ d₀/2, quintic in between.
pub fn eta_cutoff(dist: f64, d0: f64) -> f64 {
    quintic_step_down((dist - 0.25 * d0) / (0.25 * d0))
}

/// Lower bound for the injectivity radius of the normal exponential map,
/// min{l₁/2, 1/K₀}; either argument may be ∞ (l₁) or 0 (K₀, treated as
/// curvature-free).
pub fn injectivity_bound(k0: f64, l1: f64) -> f64 {
    let curv = if k0 > 0.0 { 1.0 / k0 } else { f64::INFINITY };
    (0.5 * l1).min(curv)
}

pub(crate) fn jacobian_of(grid: &Grid, v: &VectorField) -> Vec<MatD> {
    let n = grid.n_nodes();
    let d = grid.dim;
    // logical derivatives of every component, then chain with the FD
    // reference Jacobian inverse
    let mut dcomp = vec![vec![0.0; n]; d * d]; // [axis*d + comp]
    let mut scratch = vec![0.0; n];
    for a in 0..d {
        for i in 0..d {
            let comp: Vec<f64> = (0..n).map(|node| v.data[node * d + i]).collect();
            grid.deriv_axis(&comp, a, &mut scratch);
            dcomp[a * d + i].copy_from_slice(&scratch);
        }
    }
    (0..n)
        .map(|node| {
            let dxi = MatD::from_fn(d, |i, a| dcomp[a * d + i][node]);
            dxi.mul(&grid.ref_jac_inv[node])
        })
        .collect()
}

fn boundary_geometry(
    grid: &Grid,
    x: &VectorField,
    f_jac: &[MatD],
    g_inv: &[MatD],
) -> Result<BoundaryGeometry> {
    let b = grid
        .boundary
        .as_ref()
        .ok_or_else(|| MhdError::Precondition("grid has no physical boundary".into()))?;
    let d = grid.dim;
    debug_assert_eq!(d, 2);
    let nb = b.len();

    // x_φ = F·(dy/dφ); x_φφ = (∂φF)·(dy/dφ) + F·(d²y/dφ²) with ∂φF by ring
    // FD, so affine maps stay exact.
    let mut ring_f: Vec<Vec<f64>> = vec![vec![0.0; nb]; d * d];
    for (bi, &node) in b.nodes.iter().enumerate() {
        for i in 0..d {
            for j in 0..d {
                ring_f[i * d + j][bi] = f_jac[node].get(i, j);
            }
        }
    }
    let ring_df: Vec<Vec<f64>> = ring_f.iter().map(|row| b.ring_derivative(row)).collect();

    let mut normal = vec![0.0; nb * d];
    let mut tangent = vec![0.0; nb * d];
    let mut conormal = vec![0.0; nb * d];
    let mut curvature = vec![0.0; nb];
    let mut theta = Vec::with_capacity(nb);
    let mut theta_norm = vec![0.0; nb];
    let mut sigma = vec![0.0; nb];
    let mut measure = vec![0.0; nb];

    // orientation: decide the outward sign once from the mean position
    let mut centroid = [0.0; 2];
    for &node in &b.nodes {
        centroid[0] += x.get(node)[0] / nb as f64;
        centroid[1] += x.get(node)[1] / nb as f64;
    }
    let mut sign_sum = 0.0;

    for (bi, &node) in b.nodes.iter().enumerate() {
        let yt = &b.y_tan[bi * d..(bi + 1) * d];
        let yt2 = &b.y_tan2[bi * d..(bi + 1) * d];
        let f = &f_jac[node];
        let mut xp = [0.0; 2];
        let mut xpp = [0.0; 2];
        f.mul_vec(yt, &mut xp);
        for i in 0..d {
            let mut s = 0.0;
            for j in 0..d {
                s += ring_df[i * d + j][bi] * yt[j] + f.get(i, j) * yt2[j];
            }
            xpp[i] = s;
        }
        let sp = (xp[0] * xp[0] + xp[1] * xp[1]).sqrt();
        measure[bi] = sp;
        let t = [xp[0] / sp, xp[1] / sp];
        tangent[bi * d] = t[0];
        tangent[bi * d + 1] = t[1];
        let nvec = [t[1], -t[0]];
        normal[bi * d] = nvec[0];
        normal[bi * d + 1] = nvec[1];
        sign_sum +=
            nvec[0] * (x.get(node)[0] - centroid[0]) + nvec[1] * (x.get(node)[1] - centroid[1]);
        // signed curvature of the parameterized curve
        curvature[bi] = (xp[0] * xpp[1] - xp[1] * xpp[0]) / (sp * sp * sp);
    }
    let flip = sign_sum < 0.0;
    for (bi, &node) in b.nodes.iter().enumerate() {
        if flip {
            normal[bi * d] = -normal[bi * d];
            normal[bi * d + 1] = -normal[bi * d + 1];
        }
        // θ(T,T) = T·dN/ds with N outward: for a CCW-parameterized convex
        // curve with n = (T2,-T1) pointing outward this is +κ_signed; the
        // orientation flip negates it.
        let k = if flip { -curvature[bi] } else { curvature[bi] };
        curvature[bi] = k;
        let t = [tangent[bi * d], tangent[bi * d + 1]];
        let th = MatD::from_fn(d, |i, j| k * t[i] * t[j]);
        theta_norm[bi] = th.frobenius2().sqrt();
        sigma[bi] = th.trace();
        theta.push(th);

        let nvec = [normal[bi * d], normal[bi * d + 1]];
        let ft = f_jac[node].transpose();
        let mut cn = [0.0; 2];
        ft.mul_vec(&nvec, &mut cn);
        conormal[bi * d] = cn[0];
        conormal[bi * d + 1] = cn[1];
        // |N|_g = 1 up to discretization
        let norm_g = g_inv[node].quad(&cn, &cn);
        debug_assert!((norm_g - 1.0).abs() < 1e-6, "conormal norm {norm_g}");
    }
    Ok(BoundaryGeometry {
        normal,
        tangent,
        conormal,
        curvature,
        theta,
        theta_norm,
        sigma,
        measure,
    })
}

/// Distance from each node's image to the boundary curve.
///
/// Fast path: when the image boundary is a circle (identity, dilation, rigid
/// motions) the distance is exact. Otherwise: closest point on the
/// periodic-cubic interpolant of the boundary nodes, Newton-refined, with a
/// rough vertex pass to skip nodes deeper than the clamp.
fn boundary_distance(grid: &Grid, x: &VectorField, clamp_at: f64) -> ScalarField {
    let b = grid.boundary.as_ref().unwrap();
    let nb = b.len();
    let n = grid.n_nodes();
    let pts: Vec<[f64; 2]> = b
        .nodes
        .iter()
        .map(|&node| [x.get(node)[0], x.get(node)[1]])
        .collect();
    let mut c = [0.0; 2];
    for p in &pts {
        c[0] += p[0] / nb as f64;
        c[1] += p[1] / nb as f64;
    }
    let radii: Vec<f64> = pts
        .iter()
        .map(|p| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt())
        .collect();
    let rmean: f64 = radii.iter().sum::<f64>() / nb as f64;
    let is_circle = radii
        .iter()
        .all(|&r| (r - rmean).abs() < 1e-12 * rmean.max(1.0));

    let mut out = ScalarField::zeros(n);
    if is_circle {
        for node in 0..n {
            let p = x.get(node);
            let r = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt();
            out.data[node] = (rmean - r).min(clamp_at);
        }
        return out;
    }

    // Catmull-Rom segment through pts[i-1..i+2], parameter s in [0,1]
    let seg_point = |i: isize, s: f64| -> [f64; 2] {
        let p = |k: isize| pts[(k.rem_euclid(nb as isize)) as usize];
        let (p0, p1, p2, p3) = (p(i - 1), p(i), p(i + 1), p(i + 2));
        let mut q = [0.0; 2];
        for k in 0..2 {
            let a = 2.0 * p1[k];
            let b1 = p2[k] - p0[k];
            let c2 = 2.0 * p0[k] - 5.0 * p1[k] + 4.0 * p2[k] - p3[k];
            let d3 = -p0[k] + 3.0 * p1[k] - 3.0 * p2[k] + p3[k];
            q[k] = 0.5 * (a + b1 * s + c2 * s * s + d3 * s * s * s);
        }
        q
    };
    let dist_to_seg = |i: isize, q: &[f64]| -> f64 {
        let f = |s: f64| {
            let p = seg_point(i, s);
            (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)
        };
        let mut s = 0.5;
        for _ in 0..12 {
            let h = 1e-6;
            let df = (f(s + h) - f(s - h)) / (2.0 * h);
            let d2f = (f(s + h) - 2.0 * f(s) + f(s - h)) / (h * h);
            if d2f.abs() < 1e-30 {
                break;
            }
            let step = df / d2f;
            s = (s - step).clamp(0.0, 1.0);
            if step.abs() < 1e-12 {
                break;
            }
        }
        f(s).sqrt()
    };

    for node in 0..n {
        let q = x.get(node);
        let mut best = f64::INFINITY;
        let mut besti = 0isize;
        for (bi, p) in pts.iter().enumerate() {
            let dd = (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2);
            if dd < best {
                best = dd;
                besti = bi as isize;
            }
        }
        let rough = best.sqrt();
        if rough > clamp_at * 1.5 {
            out.data[node] = clamp_at;
            continue;
        }
        let mut dmin = f64::INFINITY;
        for i in besti - 2..=besti + 1 {
            dmin = dmin.min(dist_to_seg(i, q));
        }
        out.data[node] = dmin.min(clamp_at);
    }
    out
}

/// Computes all geometric quantities of one flow map.
pub fn compute_geometry(fm: &FlowMapState) -> Result<GeometryCache> {
    let grid = fm.grid.clone();
    let n = grid.n_nodes();
    let d = grid.dim;
    let f_jac = jacobian_of(&grid, &fm.x);
    let mut det_f = vec![0.0; n];
    let mut f_jac_inv = Vec::with_capacity(n);
    let mut g = Vec::with_capacity(n);
    let mut g_inv = Vec::with_capacity(n);
    for node in 0..n {
        let det = f_jac[node].det();
        if det <= 0.0 || !det.is_finite() {
            return Err(MhdError::Orientation { node, det, t: fm.t });
        }
        det_f[node] = det;
        let gm = f_jac[node].transpose().mul(&f_jac[node]);
        let (lo, hi) = gm.sym_eig_bounds();
        if !(lo > 0.0) || hi / lo > METRIC_COND_LIMIT {
            return Err(MhdError::Conditioning {
                node,
                cond: hi / lo.max(f64::MIN_POSITIVE),
                limit: METRIC_COND_LIMIT,
            });
        }
        f_jac_inv.push(f_jac[node].inverse().unwrap());
        g_inv.push(gm.inverse().unwrap());
        g.push(gm);
    }

    let bnd = boundary_geometry(&grid, &fm.x, &f_jac, &g_inv)?;

    // a priori geometry: K₀ = sup|θ|, l₁ from the normal spread, ι₀, d₀
    let k0 = bnd.theta_norm.iter().fold(0.0_f64, |m, &v| m.max(v));
    let bnodes = grid.boundary_nodes();
    let nb = bnodes.len();
    let mut l1 = f64::INFINITY;
    for i in 0..nb {
        for j in i + 1..nb {
            let ni = &bnd.normal[i * d..i * d + d];
            let nj = &bnd.normal[j * d..j * d + d];
            let dn = ((ni[0] - nj[0]).powi(2) + (ni[1] - nj[1]).powi(2)).sqrt();
            if dn > NORMAL_SPREAD_ETA {
                let pi_ = fm.x.get(bnodes[i]);
                let pj = fm.x.get(bnodes[j]);
                let dx = ((pi_[0] - pj[0]).powi(2) + (pi_[1] - pj[1]).powi(2)).sqrt();
                l1 = l1.min(dx);
            }
        }
    }
    let iota0_lower = injectivity_bound(k0, l1);
    // characteristic current radius from the area
    let mut area = 0.0;
    for node in 0..n {
        area += grid.vol_weight[node] * grid.ref_measure[node] * det_f[node];
    }
    let radius = (area / std::f64::consts::PI).sqrt();
    let d0 = (0.5 * iota0_lower).min(0.25 * radius);

    // distance, cutoff, extended normal, q-tensor
    let mut max_edge = 0.0_f64;
    for node in 0..n {
        let mi = grid.multi(node);
        if mi[0] + 1 < grid.shape[0] {
            let mut up = mi.clone();
            up[0] += 1;
            let other = grid.flat(&up);
            let (a, b) = (fm.x.get(node), fm.x.get(other));
            max_edge = max_edge.max(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
        }
    }
    let clamp_at = 0.5 * d0 + 4.0 * max_edge;
    let dist = boundary_distance(&grid, &fm.x, clamp_at);
    let eta = ScalarField::from_fn(n, |node| eta_cutoff(dist.data[node], d0));

    // N^i = −∂^i dist (Eulerian), normalized, where the cutoff is active
    let grad_dist = crate::numerics::gradient_scalar_raw(&grid, &f_jac_inv, &dist.data);
    let mut n_ext = VectorField::zeros(n, d);
    for node in 0..n {
        if eta.data[node] > 0.0 {
            let gslice = grad_dist.get(node);
            let norm = (gslice[0] * gslice[0] + gslice[1] * gslice[1]).sqrt();
            if norm > 1e-12 {
                for i in 0..d {
                    n_ext.data[node * d + i] = -gslice[i] / norm;
                }
            }
        }
    }
    // boundary override: exact outward normal (dist = 0, η = 1 there)
    for (bi, &node) in bnodes.iter().enumerate() {
        for i in 0..d {
            n_ext.data[node * d + i] = bnd.normal[bi * d + i];
        }
    }
    let q: Vec<MatD> = (0..n)
        .map(|node| {
            let e2 = eta.data[node] * eta.data[node];
            let nv = n_ext.get(node);
            MatD::from_fn(d, |i, j| (if i == j { 1.0 } else { 0.0 }) - e2 * nv[i] * nv[j])
        })
        .collect();

    Ok(GeometryCache {
        grid,
        t: fm.t,
        f_jac,
        f_jac_inv,
        det_f,
        g,
        g_inv,
        bnd,
        dist,
        eta,
        n_ext,
        q,
        d0,
        iota0_lower,
        k0,
        l1,
    })
}

/// Material rates of the metric quantities. No Christoffel symbols are
/// needed: D_t g_ab = Σ_i ∂_a u^i ∂_b x^i + ∂_a x^i ∂_b u^i.
#[derive(Clone, Debug)]
pub struct MetricRates {
    pub dtg: Vec<MatD>,
    pub dtg_inv: Vec<MatD>,
    /// D_t N_a at boundary nodes
    pub dt_conormal: Vec<f64>,
    /// D_t dμ_g = (div u) dμ_g
    pub dmu_g_factor: ScalarField,
    /// exact pointwise D_t dμ_γ factor = ½ γ^{ab} D_t g_ab
    pub dmu_gamma_factor: Vec<f64>,
    /// the σ (u·N) form of the boundary-measure rate; equals the exact one
    /// when the boundary restriction of u is tangentially divergence-free
    pub dmu_gamma_sigma_un: Vec<f64>,
}

pub fn metric_rates(cache: &GeometryCache, u: &VectorField) -> MetricRates {
    let grid = &cache.grid;
    let n = grid.n_nodes();
    let d = grid.dim;
    let du_dy = jacobian_of(grid, u); // U^i_a = ∂u^i/∂y^a
    let mut dtg = Vec::with_capacity(n);
    let mut dtg_inv = Vec::with_capacity(n);
    let mut divu = ScalarField::zeros(n);
    for node in 0..n {
        let f = &cache.f_jac[node];
        let u_ = &du_dy[node];
        let rate = MatD::from_fn(d, |a, b| {
            let mut s = 0.0;
            for i in 0..d {
                s += u_.get(i, a) * f.get(i, b) + f.get(i, a) * u_.get(i, b);
            }
            s
        });
        let gi = &cache.g_inv[node];
        dtg_inv.push(gi.mul(&rate).mul(gi).scale(-1.0));
        dtg.push(rate);
        divu.data[node] = u_.mul(&cache.f_jac_inv[node]).trace();
    }
    let bnodes = grid.boundary_nodes();
    let mut dt_conormal = vec![0.0; bnodes.len() * d];
    let mut dmu_gamma_factor = vec![0.0; bnodes.len()];
    let mut dmu_gamma_sigma_un = vec![0.0; bnodes.len()];
    for (bi, &node) in bnodes.iter().enumerate() {
        let cn = &cache.bnd.conormal[bi * d..(bi + 1) * d];
        let gi = &cache.g_inv[node];
        let mut nup = [0.0; 3];
        gi.mul_vec(cn, &mut nup[..d]);
        let coeff = -0.5 * dtg_inv[node].quad(cn, cn);
        for i in 0..d {
            dt_conormal[bi * d + i] = coeff * cn[i];
        }
        // γ^{ab} = g^{ab} − N^a N^b
        let gamma_up = MatD::from_fn(d, |a, b| gi.get(a, b) - nup[a] * nup[b]);
        let mut s = 0.0;
        for a in 0..d {
            for b in 0..d {
                s += gamma_up.get(a, b) * dtg[node].get(a, b);
            }
        }
        dmu_gamma_factor[bi] = 0.5 * s;
        let nvec = &cache.bnd.normal[bi * d..(bi + 1) * d];
        let uvec = u.get(node);
        let udotn: f64 = (0..d).map(|i| uvec[i] * nvec[i]).sum();
        dmu_gamma_sigma_un[bi] = cache.bnd.sigma[bi] * udotn;
    }
    MetricRates {
        dtg,
        dtg_inv,
        dt_conormal,
        dmu_g_factor: divu,
        dmu_gamma_factor,
        dmu_gamma_sigma_un,
    }
}

/// Tangential projection Π of a rank-r tensor given on boundary nodes:
/// every slot contracted with γ_i^j = δ_i^j − n_i n^j.
pub fn project(cache: &GeometryCache, alpha: &TensorField) -> TensorField {
    let d = alpha.d;
    let r = alpha.rank;
    let nb = alpha.n_nodes();
    debug_assert_eq!(nb, cache.boundary_nodes().len());
    if r == 0 {
        return alpha.clone();
    }
    let mut out = TensorField::zeros(nb, d, r);
    let idxs = crate::field::multi_indices(d, r);
    for bi in 0..nb {
        let gamma = cache.gamma(bi);
        let src = alpha.node(bi);
        let dst = out.node_mut(bi);
        for (oi, target) in idxs.iter().enumerate() {
            let mut acc = 0.0;
            for (si, source) in idxs.iter().enumerate() {
                let mut w = 1.0;
                for k in 0..r {
                    w *= gamma.get(target[k], source[k]);
                    if w == 0.0 {
                        break;
                    }
                }
                if w != 0.0 {
                    acc += w * src[si];
                }
            }
            dst[oi] = acc;
        }
    }
    out
}

/// Pointwise residual of Π∇²q = θ ∇_N q on the boundary for q vanishing
/// there (the tangential Hessian of such q is zero).
pub fn projection_identity_residual(cache: &GeometryCache, qf: &ScalarField) -> Result<Vec<f64>> {
    let grid = &cache.grid;
    let d = grid.dim;
    let bnodes = grid.boundary_nodes();
    let scale = qf.max_abs().max(1e-300);
    let mut max_trace = 0.0_f64;
    for &node in bnodes {
        max_trace = max_trace.max(qf.data[node].abs());
    }
    if max_trace > 1e-8 * scale {
        return Err(MhdError::Precondition(format!(
            "q does not vanish on the boundary: max trace {max_trace:.3e}"
        )));
    }
    let hess = crate::numerics::hessian_scalar(cache, qf);
    let grad = crate::numerics::gradient_scalar_raw(grid, &cache.f_jac_inv, &qf.data);
    let mut out = vec![0.0; bnodes.len()];
    for (bi, &node) in bnodes.iter().enumerate() {
        let gamma = cache.gamma(bi);
        let h = &hess[node];
        let ph = gamma.mul(h).mul(&gamma); // Π∇²q, both slots projected
        let nvec = &cache.bnd.normal[bi * d..(bi + 1) * d];
        let gq = grad.get(node);
        let gradn: f64 = (0..d).map(|i| nvec[i] * gq[i]).sum();
        let res = ph.sub(&cache.bnd.theta[bi].scale(gradn));
        out[bi] = res.frobenius2().sqrt();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    fn disk(nr: usize, nphi: usize) -> Arc<Grid> {
        Arc::new(Grid::disk(nr, nphi))
    }

    #[test]
    fn identity_map_unit_circle_geometry() {
        let g = disk(16, 32);
        let fm = FlowMapState::identity(g.clone());
        let cache = compute_geometry(&fm).unwrap();
        for node in 0..g.n_nodes() {
            assert!((cache.det_f[node] - 1.0).abs() < 1e-12, "J at {node}");
            for i in 0..2 {
                for j in 0..2 {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((cache.g[node].get(i, j) - want).abs() < 1e-12);
                }
            }
        }
        for (bi, &node) in g.boundary_nodes().iter().enumerate() {
            let y = g.node_y(node);
            // N(y) = y on the unit circle
            assert!((cache.bnd.normal[bi * 2] - y[0]).abs() < 1e-12);
            assert!((cache.bnd.normal[bi * 2 + 1] - y[1]).abs() < 1e-12);
            assert!((cache.bnd.sigma[bi] - 1.0).abs() < 1e-12, "sigma");
            assert!((cache.bnd.theta_norm[bi] - 1.0).abs() < 1e-12, "|theta|");
            // θ = γ
            let gamma = cache.gamma(bi);
            let diff = cache.bnd.theta[bi].sub(&gamma);
            assert!(diff.frobenius2().sqrt() < 1e-12);
        }
        assert!(
            (cache.iota0_lower - 1.0).abs() < 1e-10,
            "iota {}",
            cache.iota0_lower
        );
        assert!((cache.d0 - 0.25).abs() < 1e-10, "d0 {}", cache.d0);
    }

    #[test]
    fn dilation_geometry_2d_exact() {
        let g = disk(16, 32);
        let fm = FlowMapState::dilation(g.clone(), 2.0);
        let cache = compute_geometry(&fm).unwrap();
        for node in 0..g.n_nodes() {
            assert!((cache.det_f[node] - 4.0).abs() < 1e-12);
            for i in 0..2 {
                for j in 0..2 {
                    let want = if i == j { 4.0 } else { 0.0 };
                    assert!((cache.g[node].get(i, j) - want).abs() < 1e-11);
                }
            }
        }
        for bi in 0..g.boundary_nodes().len() {
            assert!((cache.bnd.sigma[bi] - 0.5).abs() < 1e-12);
            assert!((cache.bnd.theta_norm[bi] - 0.5).abs() < 1e-12);
            // θ = γ/2 in Eulerian components
            let gamma = cache.gamma(bi);
            let diff = cache.bnd.theta[bi].sub(&gamma.scale(0.5));
            assert!(diff.frobenius2().sqrt() < 1e-12);
        }
        assert!((cache.iota0_lower - 2.0).abs() < 1e-10);
    }

    #[test]
    fn dilation_geometry_3d_analytic_formulas() {
        // d = 3 tensor-algebra path for the sphere of radius c: g = c²δ,
        // J = c³, N_a = c·r̂, θ_ab = γ_ab/c, σ = (d−1)/c, |θ|_g = √(d−1)/c.
        let c = 2.0;
        let rhat = [1.0 / 3.0_f64.sqrt(); 3];
        let gm = MatD::from_fn(3, |i, j| if i == j { c * c } else { 0.0 });
        let g_inv = gm.inverse().unwrap();
        let conormal: Vec<f64> = rhat.iter().map(|&v| c * v).collect();
        assert!((g_inv.quad(&conormal, &conormal) - 1.0).abs() < 1e-14);
        let gamma_lag = MatD::from_fn(3, |a, b| gm.get(a, b) - conormal[a] * conormal[b]);
        let theta_lag = gamma_lag.scale(1.0 / c);
        let mut sigma = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                sigma += g_inv.get(a, b) * theta_lag.get(a, b);
            }
        }
        assert!((sigma - 1.0).abs() < 1e-14, "sigma = (d-1)/c = 1");
        let up = g_inv.mul(&theta_lag).mul(&g_inv);
        let mut norm2 = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                norm2 += up.get(a, b) * theta_lag.get(a, b);
            }
        }
        assert!((norm2 - 2.0 / (c * c)).abs() < 1e-14, "|θ|² = (d−1)/c²");
        let f = MatD::from_fn(3, |i, j| if i == j { c } else { 0.0 });
        assert!((f.det() - 8.0).abs() < 1e-14, "J = 8");
    }

    #[test]
    fn metric_matches_exact_jacobian_for_polynomial_map() {
        // x = y + ε·(polynomial in y); the oracle is the exact derivative of
        // the map (what a high-order FD of the closed form converges to).
        let g = disk(96, 192);
        let eps = 1e-3;
        let map = |y: &[f64]| {
            [
                y[0] + eps * (y[0] * y[0] * y[1] + 0.5 * y[1]),
                y[1] + eps * (y[1] * y[1] - 0.3 * y[0] * y[0] * y[0]),
                0.0,
            ]
        };
        let jac_exact = |y: &[f64]| {
            MatD::from_fn(2, |i, j| {
                let delta = if i == j { 1.0 } else { 0.0 };
                delta
                    + eps
                        * match (i, j) {
                            (0, 0) => 2.0 * y[0] * y[1],
                            (0, 1) => y[0] * y[0] + 0.5,
                            (1, 0) => -0.9 * y[0] * y[0],
                            (1, 1) => 2.0 * y[1],
                            _ => unreachable!(),
                        }
            })
        };
        let fm = FlowMapState::from_map(g.clone(), map);
        let cache = compute_geometry(&fm).unwrap();
        let mut worst = 0.0_f64;
        for node in 0..g.n_nodes() {
            let je = jac_exact(g.node_y(node));
            let ge = je.transpose().mul(&je);
            for i in 0..2 {
                for j in 0..2 {
                    let rel = (cache.g[node].get(i, j) - ge.get(i, j)).abs()
                        / ge.get(i, i).abs().max(1.0);
                    worst = worst.max(rel);
                }
            }
        }
        assert!(worst < 1e-8, "worst rel err {worst:.3e}");
    }

    #[test]
    fn rigid_rotation_kills_metric_rates() {
        let g = disk(16, 32);
        let fm = FlowMapState::identity(g.clone());
        let cache = compute_geometry(&fm).unwrap();
        let omega = 0.7;
        let u = VectorField::from_fn(g.n_nodes(), 2, |node, i| {
            let y = g.node_y(node);
            if i == 0 {
                -omega * y[1]
            } else {
                omega * y[0]
            }
        });
        let rates = metric_rates(&cache, &u);
        for node in 0..g.n_nodes() {
            assert!(rates.dtg[node].frobenius2().sqrt() < 1e-11);
        }
        for v in &rates.dt_conormal {
            assert!(v.abs() < 1e-11);
        }
        for v in rates.dmu_g_factor.data.iter() {
            assert!(v.abs() < 1e-11);
        }
    }

    #[test]
    fn dilation_velocity_rates() {
        // u = y on the identity map: D_t g = 2δ, volume factor = d
        let g = disk(16, 32);
        let fm = FlowMapState::identity(g.clone());
        let cache = compute_geometry(&fm).unwrap();
        let u = VectorField::from_fn(g.n_nodes(), 2, |node, i| g.node_y(node)[i]);
        let rates = metric_rates(&cache, &u);
        for node in 0..g.n_nodes() {
            for i in 0..2 {
                for j in 0..2 {
                    let want = if i == j { 2.0 } else { 0.0 };
                    assert!((rates.dtg[node].get(i, j) - want).abs() < 1e-11);
                }
            }
            assert!((rates.dmu_g_factor.data[node] - 2.0).abs() < 1e-11);
        }
        // radial flow: exact γ-rate equals σ(u·N)
        for bi in 0..g.boundary_nodes().len() {
            assert!((rates.dmu_gamma_factor[bi] - rates.dmu_gamma_sigma_un[bi]).abs() < 1e-11);
            assert!((rates.dmu_gamma_factor[bi] - 1.0).abs() < 1e-11);
        }
    }

    #[test]
    fn metric_rates_match_time_differences() {
        // evolve the flow map by a frozen smooth u and compare rates against
        // 4th-order centered differences in the step size
        let g = disk(24, 48);
        let fm = FlowMapState::identity(g.clone());
        let cache = compute_geometry(&fm).unwrap();
        let u = VectorField::from_fn(g.n_nodes(), 2, |node, i| {
            let y = g.node_y(node);
            if i == 0 {
                0.3 * y[0] * y[1] + 0.1 * y[1] * y[1]
            } else {
                -0.2 * y[0] * y[0] + 0.15 * y[0] * y[1]
            }
        });
        let rates = metric_rates(&cache, &u);
        let eps = 1e-3;
        let shifted = |s: f64| {
            let mut x = fm.x.clone();
            x.axpy(s, &u);
            compute_geometry(&FlowMapState {
                grid: g.clone(),
                x,
                t: 0.0,
            })
            .unwrap()
        };
        let (cm2, cm1, cp1, cp2) = (
            shifted(-2.0 * eps),
            shifted(-eps),
            shifted(eps),
            shifted(2.0 * eps),
        );
        let mut worst = 0.0_f64;
        for node in 0..g.n_nodes() {
            for i in 0..2 {
                for j in 0..2 {
                    let fd = (cm2.g[node].get(i, j) - 8.0 * cm1.g[node].get(i, j)
                        + 8.0 * cp1.g[node].get(i, j)
                        - cp2.g[node].get(i, j))
                        / (12.0 * eps);
                    worst = worst.max((fd - rates.dtg[node].get(i, j)).abs());
                }
            }
        }
        assert!(worst < 1e-9, "dtg vs time-FD: {worst:.3e}");
        let mut worst_b = 0.0_f64;
        for bi in 0..g.boundary_nodes().len() {
            let fd = (cm2.bnd.measure[bi] - 8.0 * cm1.bnd.measure[bi] + 8.0 * cp1.bnd.measure[bi]
                - cp2.bnd.measure[bi])
                / (12.0 * eps);
            let rate = rates.dmu_gamma_factor[bi] * cache.bnd.measure[bi];
            worst_b = worst_b.max((fd - rate).abs());
        }
        assert!(worst_b < 1e-9, "dmu_gamma vs time-FD: {worst_b:.3e}");
    }

    #[test]
    fn projection_annihilates_normal_and_is_idempotent() {
        use rand::{Rng, SeedableRng};
        let g = disk(12, 24);
        let fm = FlowMapState::from_map(g.clone(), |y| {
            [y[0] + 0.05 * y[1] * y[1], y[1] - 0.04 * y[0] * y[0], 0.0]
        });
        let cache = compute_geometry(&fm).unwrap();
        let nb = g.boundary_nodes().len();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut alpha = TensorField::zeros(nb, 2, 2);
        for v in alpha.data.iter_mut() {
            *v = rand::Rng::gen_range(&mut rng, -1.0..1.0);
        }
        let pa = project(&cache, &alpha);
        let ppa = project(&cache, &pa);
        for (a, b) in pa.data.iter().zip(ppa.data.iter()) {
            assert!((a - b).abs() < 1e-12, "not idempotent");
        }
        // direct double-γ-contraction oracle
        for bi in 0..nb {
            let gamma = cache.gamma(bi);
            for i in 0..2 {
                for j in 0..2 {
                    let mut want = 0.0;
                    for k in 0..2 {
                        for l in 0..2 {
                            want += gamma.get(i, k) * gamma.get(j, l) * alpha.node(bi)[k * 2 + l];
                        }
                    }
                    assert!((pa.node(bi)[i * 2 + j] - want).abs() < 1e-13);
                }
            }
            // slots annihilate n
            let n = &cache.bnd.normal[bi * 2..bi * 2 + 2];
            for j in 0..2 {
                let mut s = 0.0;
                for i in 0..2 {
                    s += n[i] * pa.node(bi)[i * 2 + j];
                }
                assert!(s.abs() < 1e-12);
            }
        }
        // N⊗N projects to zero; tangential vectors are unchanged
        let mut nn = TensorField::zeros(nb, 2, 2);
        for bi in 0..nb {
            let n = &cache.bnd.normal[bi * 2..bi * 2 + 2];
            for i in 0..2 {
                for j in 0..2 {
                    nn.node_mut(bi)[i * 2 + j] = n[i] * n[j];
                }
            }
        }
        assert!(project(&cache, &nn).max_abs() < 1e-12);
        let mut tg = TensorField::zeros(nb, 2, 1);
        for bi in 0..nb {
            let t = &cache.bnd.tangent[bi * 2..bi * 2 + 2];
            tg.node_mut(bi)[0] = 2.5 * t[0];
            tg.node_mut(bi)[1] = 2.5 * t[1];
        }
        let ptg = project(&cache, &tg);
        for (a, b) in tg.data.iter().zip(ptg.data.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        // rank-0 passes through unchanged
        let s0 = TensorField {
            d: 2,
            rank: 0,
            data: (0..nb).map(|i| i as f64).collect(),
        };
        assert_eq!(project(&cache, &s0).data, s0.data);
    }

    #[test]
    fn q_tensor_interpolates_and_matches_gamma_on_boundary() {
        let g = disk(32, 64);
        let fm = FlowMapState::identity(g.clone());
        let cache = compute_geometry(&fm).unwrap();
        for (bi, &node) in g.boundary_nodes().iter().enumerate() {
            let gamma = cache.gamma(bi);
            let diff = cache.q[node].sub(&gamma);
            assert!(diff.frobenius2().sqrt() < 1e-12, "q != gamma on boundary");
        }
        for node in 0..g.n_nodes() {
            if cache.dist.data[node] > 0.5 * cache.d0 {
                let diff = cache.q[node].sub(&MatD::identity(2));
                assert!(diff.frobenius2().sqrt() < 1e-14, "q != δ deep inside");
            }
            let (lo, hi) = cache.q[node].sym_eig_bounds();
            assert!(lo > -1e-14 && hi <= 1.0 + 1e-14, "q not in [0, 1]");
        }
    }

    #[test]
    fn injectivity_bound_examples() {
        assert!((injectivity_bound(1.0, 2.0) - 1.0).abs() < 1e-15);
        assert!((injectivity_bound(10.0, 5.0) - 0.1).abs() < 1e-15);
        assert!((injectivity_bound(0.0, 0.6) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn projection_identity_residual_analytic() {
        // q = 1 − |x|² on the unit disk: Π∇²q = −2γ = θ∇_N q exactly
        let g = disk(24, 48);
        let fm = FlowMapState::identity(g.clone());
        let cache = compute_geometry(&fm).unwrap();
        let q = ScalarField::from_fn(g.n_nodes(), |node| {
            let y = g.node_y(node);
            1.0 - y[0] * y[0] - y[1] * y[1]
        });
        let res = projection_identity_residual(&cache, &q).unwrap();
        for v in res {
            assert!(v < 1e-10, "residual {v:.3e}");
        }
        let z = ScalarField::zeros(g.n_nodes());
        let res0 = projection_identity_residual(&cache, &z).unwrap();
        assert!(res0.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn projection_identity_residual_refines_at_scheme_order() {
        let run = |nr: usize, nphi: usize| -> f64 {
            let g = disk(nr, nphi);
            let fm = FlowMapState::from_map(g.clone(), |y| {
                [y[0] + 0.1 * y[0] * y[1], y[1] - 0.08 * y[0] * y[0], 0.0]
            });
            let cache = compute_geometry(&fm).unwrap();
            let q = ScalarField::from_fn(g.n_nodes(), |node| {
                let y = g.node_y(node);
                let r2 = y[0] * y[0] + y[1] * y[1];
                (1.0 - r2) * (1.0 + 0.3 * y[0] + 0.2 * y[1] * y[1])
            });
            projection_identity_residual(&cache, &q)
                .unwrap()
                .into_iter()
                .fold(0.0_f64, f64::max)
        };
        let e1 = run(24, 48);
        let e2 = run(48, 96);
        assert!(e1 / e2 > 8.0, "order too low: {e1:.3e} -> {e2:.3e}");
    }

    #[test]
    fn precondition_rejects_nonvanishing_trace() {
        let g = disk(12, 24);
        let fm = FlowMapState::identity(g.clone());
        let cache = compute_geometry(&fm).unwrap();
        let q = ScalarField::from_fn(g.n_nodes(), |_| 0.3);
        let err = projection_identity_residual(&cache, &q).unwrap_err();
        assert!(matches!(err, MhdError::Precondition(_)));
    }

    #[test]
    fn orientation_error_reports_node() {
        let g = disk(12, 24);
        // reflection: det F = −1 everywhere
        let fm = FlowMapState::from_map(g.clone(), |y| [-y[0], y[1], 0.0]);
        match compute_geometry(&fm) {
            Err(MhdError::Orientation { node, det, .. }) => {
                assert!(det < 0.0, "det {det} at node {node}");
            }
            Err(other) => panic!("expected orientation error, got {other}"),
            Ok(_) => panic!("expected orientation error, got a cache"),
        }
    }
}
