//! Exact commutator identities between material derivatives and spatial
//! operators, checked numerically, plus empirical LHS/RHS ratio monitors for
//! the Hodge, elliptic, tensor and second-fundamental-form inequalities.
//!
//! The expansion constants are not transcribed: the normal form of
//! [∂, D_t^k] is generated by the operator recursion
//!   [∂, D_t^k] = [∂, D_t] D_t^{k−1} + D_t [∂, D_t^{k−1}],
//!   D_t M_a = M_{a+1} − M_0 M_a,   D_t v_b = v_{b+1} − M_0 v_b,
//! where (M_a)_i^j = ∂_i D_t^a u^j and (v_b)_i = ∂_i D_t^b f, and frozen as
//! coefficient tables for k ≤ 3.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{MhdError, Result};
use crate::field::{ScalarField, TensorField, VectorField};
use crate::geometry::{compute_geometry, FlowMapState, GeometryCache};
use crate::grid::Grid;
use crate::linalg::MatD;
use crate::numerics::{
    self, gradient, grad_vector, hessian_scalar, integrate, l2_norm_boundary, l2_norm_interior,
    laplacian, restrict_to_boundary, Region,
};
use crate::stencil::fd_weights;

// ---------------------------------------------------------------------------
// [D_t, Δ] — the explicit first-order commutator
// ---------------------------------------------------------------------------

/// [D_t, Δ]f = −2 (∂_i u^k) ∂²_{ki} f − (Δ u^k) ∂_k f for scalar f.
pub fn dt_laplace_commutator_scalar(
    cache: &GeometryCache,
    u: &VectorField,
    f: &ScalarField,
) -> ScalarField {
    let grid = &cache.grid;
    let n = grid.n_nodes();
    let d = grid.dim;
    let gu = grad_vector(cache, u);
    let lap_u = numerics::laplacian_vector(cache, u);
    let hess = hessian_scalar(cache, f);
    let grad_f = numerics::gradient_scalar_raw(grid, &cache.f_jac_inv, &f.data);
    ScalarField::from_fn(n, |node| {
        let mut s = 0.0;
        for i in 0..d {
            for k in 0..d {
                s -= 2.0 * gu[node].get(i, k) * hess[node].get(k, i);
            }
            s -= lap_u.data[node * d + i] * grad_f.data[node * d + i];
        }
        s
    })
}

/// Componentwise [D_t, Δ] on a vector field.
pub fn dt_laplace_commutator_vector(
    cache: &GeometryCache,
    u: &VectorField,
    x: &VectorField,
) -> VectorField {
    let n = cache.grid.n_nodes();
    let d = x.d;
    let mut out = VectorField::zeros(n, d);
    for k in 0..d {
        let comp = ScalarField {
            data: x.component(k),
        };
        let c = dt_laplace_commutator_scalar(cache, u, &comp);
        for node in 0..n {
            out.data[node * d + k] = c.data[node];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Normal-form engine for [∂, D_t^k]
// ---------------------------------------------------------------------------

/// One term c · M_{a₁} M_{a₂} ⋯ M_{a_m} · v_b of the normal form.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainTerm {
    pub coeff: f64,
    /// D_t orders of the ∂u factors, applied left to right along the chain
    pub u_orders: Vec<usize>,
    /// D_t order of the trailing ∂f factor
    pub f_order: usize,
}

/// Expansion of [∂, D_t^k] as chain terms, generated by recursion and
/// combined; k ≥ 1.
pub fn grad_dtk_expansion(k: usize) -> Vec<ChainTerm> {
    assert!(k >= 1);
    let mut terms: Vec<ChainTerm> = vec![ChainTerm {
        coeff: 1.0,
        u_orders: vec![0],
        f_order: 0,
    }];
    for kk in 2..=k {
        let mut next: Vec<ChainTerm> = vec![ChainTerm {
            coeff: 1.0,
            u_orders: vec![0],
            f_order: kk - 1,
        }];
        for t in &terms {
            // D_t of each M factor: order bump minus M_0 insertion
            for i in 0..t.u_orders.len() {
                let mut bump = t.clone();
                bump.u_orders[i] += 1;
                next.push(bump);
                let mut ins = t.clone();
                ins.coeff = -ins.coeff;
                ins.u_orders.insert(i, 0);
                next.push(ins);
            }
            // D_t of the trailing v factor
            let mut vb = t.clone();
            vb.f_order += 1;
            next.push(vb);
            let mut vins = t.clone();
            vins.coeff = -vins.coeff;
            vins.u_orders.push(0);
            next.push(vins);
        }
        terms = combine(next);
    }
    combine(terms)
}

fn combine(terms: Vec<ChainTerm>) -> Vec<ChainTerm> {
    let mut map: BTreeMap<(Vec<usize>, usize), f64> = BTreeMap::new();
    for t in terms {
        *map.entry((t.u_orders, t.f_order)).or_insert(0.0) += t.coeff;
    }
    map.into_iter()
        .filter(|(_, c)| c.abs() > 1e-12)
        .map(|((u_orders, f_order), coeff)| ChainTerm {
            coeff,
            u_orders,
            f_order,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Cases
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IdentityId {
    /// [D_t, ∂^r] on a scalar
    DtGradR,
    /// [∂, D_t^k] on a scalar
    GradDtk,
    /// [D_t^k, B·∂] on a scalar
    DtkBdot,
    /// [D_t^{r−1}, Δ] on a scalar
    DtkLaplace,
}

/// A uniformly spaced history of maps, velocities and test fields on which
/// the identities are evaluated.
pub struct IdentityCase {
    pub id: IdentityId,
    pub order: usize,
    pub grid: Arc<Grid>,
    pub dt: f64,
    pub maps: Vec<FlowMapState>,
    pub u: Vec<VectorField>,
    pub f: Vec<ScalarField>,
    pub b: Option<Vec<VectorField>>,
}

impl IdentityCase {
    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    fn center(&self) -> usize {
        self.len() / 2
    }

    fn caches(&self) -> Result<Vec<GeometryCache>> {
        self.maps.iter().map(compute_geometry).collect()
    }
}

pub struct CommutatorReport {
    /// max-norm of LHS − RHS over interior nodes
    pub max_residual: f64,
    /// max-norm of the LHS for scale
    pub lhs_scale: f64,
}

impl CommutatorReport {
    pub fn relative(&self) -> f64 {
        self.max_residual / self.lhs_scale.max(1e-300)
    }
}

fn time_weights(k: usize, m: usize, dt: f64) -> Vec<f64> {
    let xs: Vec<f64> = (-(m as isize)..=m as isize)
        .map(|j| j as f64 * dt)
        .collect();
    fd_weights(0.0, &xs, k)
}

/// k-th time derivative of a scalar-field series at the center index.
fn dt_series(fields: &[Vec<f64>], center: usize, k: usize, dt: f64, m: usize) -> Vec<f64> {
    if k == 0 {
        return fields[center].clone();
    }
    let w = time_weights(k, m, dt);
    let n = fields[0].len();
    let mut out = vec![0.0; n];
    for (j, wj) in w.iter().enumerate() {
        let fi = &fields[center - m + j];
        for i in 0..n {
            out[i] += wj * fi[i];
        }
    }
    out
}

fn max_interior(grid: &Grid, vals: &[f64], per_node: usize) -> f64 {
    let mut worst = 0.0_f64;
    for node in 0..grid.n_nodes() {
        if grid.is_boundary(node) {
            continue;
        }
        // skip the ring next to the boundary too: closures there carry the
        // largest constants and the identities are interior statements
        let mi = grid.multi(node);
        if !matches!(grid.axes[0], crate::grid::AxisTopology::Periodic)
            && mi[0] + 2 >= grid.shape[0]
        {
            continue;
        }
        for c in 0..per_node {
            worst = worst.max(vals[node * per_node + c].abs());
        }
    }
    worst
}

/// Evaluates the requested commutator identity: LHS by direct composition
/// (time differences for D_t), RHS by the expansion, max-norm residual.
pub fn commutator_residual(case: &IdentityCase) -> Result<CommutatorReport> {
    match case.id {
        IdentityId::DtGradR => commutator_dt_gradr(case),
        IdentityId::GradDtk => commutator_grad_dtk(case),
        IdentityId::DtkBdot => commutator_dtk_bdot(case),
        IdentityId::DtkLaplace => commutator_dtk_laplace(case),
    }
}

fn commutator_dt_gradr(case: &IdentityCase) -> Result<CommutatorReport> {
    let r = case.order;
    if r == 0 || r > 3 {
        return Err(MhdError::UnsupportedOrder { order: r, max: 3 });
    }
    let caches = case.caches()?;
    let c = case.center();
    let grid = &case.grid;
    let n = grid.n_nodes();
    let d = grid.dim;
    let m = 2; // 5-point time stencils for the single D_t
    if case.len() < 2 * m + 1 {
        return Err(MhdError::Window {
            needed: 2 * m + 1,
            available: case.len(),
            t: 0.0,
        });
    }

    // ∂^r f as a rank-r tensor per snapshot in the window
    let grad_r = |ci: usize, f: &ScalarField, r: usize| -> TensorField {
        let mut t = TensorField::from_scalar(f, d);
        for _ in 0..r {
            t = gradient(&caches[ci], &t);
        }
        t
    };
    let series: Vec<Vec<f64>> = (c - m..=c + m)
        .map(|ci| grad_r(ci, &case.f[ci], r).data)
        .collect();
    let dt_grad = dt_series(&series, m, 1, case.dt, m);
    // ∂^r of D_t f
    let f_series: Vec<Vec<f64>> = (c - m..=c + m).map(|ci| case.f[ci].data.clone()).collect();
    let dtf = ScalarField {
        data: dt_series(&f_series, m, 1, case.dt, m),
    };
    let grad_dtf = grad_r(c, &dtf, r);
    let comps = d.pow(r as u32);
    let mut lhs = vec![0.0; n * comps];
    for i in 0..n * comps {
        lhs[i] = dt_grad[i] - grad_dtf.data[i];
    }

    // RHS: Σ_s ∂^s( [D_t,∂] ∂^{r−1−s} f ), [D_t,∂]g = −(∂u)·(grad g)
    let cache = &caches[c];
    let gu = grad_vector(cache, &case.u[c]);
    let mut rhs = TensorField::zeros(n, d, r);
    for s in 0..r {
        let inner = grad_r(c, &case.f[c], r - 1 - s);
        let ginner = gradient(cache, &inner); // rank r−s
        let ic = ginner.comps() / d;
        let mut t = TensorField::zeros(n, d, r - s);
        for node in 0..n {
            for i in 0..d {
                for jj in 0..ic {
                    let mut acc = 0.0;
                    for k in 0..d {
                        acc -= gu[node].get(i, k) * ginner.data[node * ic * d + k * ic + jj];
                    }
                    t.data[node * ic * d + i * ic + jj] = acc;
                }
            }
        }
        let mut outer = t;
        for _ in 0..s {
            outer = gradient(cache, &outer);
        }
        for i in 0..n * comps {
            rhs.data[i] += outer.data[i];
        }
    }

    let mut resid = vec![0.0; n * comps];
    for i in 0..n * comps {
        resid[i] = lhs[i] - rhs.data[i];
    }
    Ok(CommutatorReport {
        max_residual: max_interior(grid, &resid, comps),
        lhs_scale: max_interior(grid, &lhs, comps),
    })
}

/// Evaluates the chain-term table on jet fields: out_i = Σ c (M_{a₁}⋯M v_b)_i.
fn eval_chain_terms(
    terms: &[ChainTerm],
    d: usize,
    n: usize,
    u_jets: &[Vec<MatD>],
    f_jets: &[VectorField],
) -> VectorField {
    let mut out = VectorField::zeros(n, d);
    for t in terms {
        for node in 0..n {
            // start with v_b, then apply matrices right to left
            let mut vec = [0.0f64; 3];
            let vb = f_jets[t.f_order].get(node);
            vec[..d].copy_from_slice(vb);
            for &a in t.u_orders.iter().rev() {
                let m = &u_jets[a][node];
                let mut nv = [0.0f64; 3];
                for i in 0..d {
                    let mut s = 0.0;
                    for j in 0..d {
                        s += m.get(i, j) * vec[j];
                    }
                    nv[i] = s;
                }
                vec = nv;
            }
            for i in 0..d {
                out.data[node * d + i] += t.coeff * vec[i];
            }
        }
    }
    out
}

fn jets_for(
    case: &IdentityCase,
    caches: &[GeometryCache],
    k: usize,
) -> Result<(Vec<Vec<MatD>>, Vec<VectorField>)> {
    let c = case.center();
    let m = crate::history::half_width(k);
    if c < m + 1 || c + m + 1 > case.len() {
        return Err(MhdError::Window {
            needed: 2 * (m + 1) + 1,
            available: case.len(),
            t: 0.0,
        });
    }
    let n = case.grid.n_nodes();
    let d = case.grid.dim;
    // M_a = ∂ D_t^a u: time-differentiate u, then take the gradient at the
    // center geometry (D_t commutes with per-node sampling)
    let mut u_jets = Vec::with_capacity(k);
    for a in 0..k {
        let ma = crate::history::half_width(a.max(1)).min(m);
        let series: Vec<Vec<f64>> = (c - ma..=c + ma)
            .map(|ci| case.u[ci].data.clone())
            .collect();
        let dta_u = if a == 0 {
            case.u[c].clone()
        } else {
            VectorField {
                d,
                data: dt_series(&series, ma, a, case.dt, ma),
            }
        };
        u_jets.push(grad_vector(&caches[c], &dta_u));
    }
    let mut f_jets = Vec::with_capacity(k);
    for b in 0..k {
        let mb = crate::history::half_width(b.max(1)).min(m);
        let series: Vec<Vec<f64>> = (c - mb..=c + mb)
            .map(|ci| case.f[ci].data.clone())
            .collect();
        let dtb_f = ScalarField {
            data: if b == 0 {
                case.f[c].data.clone()
            } else {
                dt_series(&series, mb, b, case.dt, mb)
            },
        };
        f_jets.push(numerics::gradient_scalar_raw(
            &case.grid,
            &caches[c].f_jac_inv,
            &dtb_f.data,
        ));
    }
    let _ = n;
    Ok((u_jets, f_jets))
}

fn commutator_grad_dtk(case: &IdentityCase) -> Result<CommutatorReport> {
    let k = case.order;
    if k == 0 || k > 3 {
        return Err(MhdError::UnsupportedOrder { order: k, max: 3 });
    }
    let caches = case.caches()?;
    let c = case.center();
    let grid = &case.grid;
    let n = grid.n_nodes();
    let d = grid.dim;
    let m = crate::history::half_width(k);
    if case.len() < 2 * m + 1 {
        return Err(MhdError::Window {
            needed: 2 * m + 1,
            available: case.len(),
            t: 0.0,
        });
    }
    // LHS = ∂(D_t^k f) − D_t^k(∂ f)
    let f_series: Vec<Vec<f64>> = (c - m..=c + m).map(|ci| case.f[ci].data.clone()).collect();
    let dtk_f = ScalarField {
        data: dt_series(&f_series, m, k, case.dt, m),
    };
    let grad_dtk_f = numerics::gradient_scalar_raw(grid, &caches[c].f_jac_inv, &dtk_f.data);
    let grads: Vec<Vec<f64>> = (c - m..=c + m)
        .map(|ci| {
            numerics::gradient_scalar_raw(grid, &caches[ci].f_jac_inv, &case.f[ci].data).data
        })
        .collect();
    let dtk_grad = dt_series(&grads, m, k, case.dt, m);
    let mut lhs = vec![0.0; n * d];
    for i in 0..n * d {
        lhs[i] = grad_dtk_f.data[i] - dtk_grad[i];
    }
    // RHS by the generated table
    let (u_jets, f_jets) = jets_for(case, &caches, k)?;
    let rhs = eval_chain_terms(&grad_dtk_expansion(k), d, n, &u_jets, &f_jets);
    let mut resid = vec![0.0; n * d];
    for i in 0..n * d {
        resid[i] = lhs[i] - rhs.data[i];
    }
    Ok(CommutatorReport {
        max_residual: max_interior(grid, &resid, d),
        lhs_scale: max_interior(grid, &lhs, d),
    })
}

fn binomial(nn: usize, kk: usize) -> f64 {
    let mut r = 1.0;
    for i in 0..kk {
        r = r * (nn - i) as f64 / (i + 1) as f64;
    }
    r
}

fn commutator_dtk_bdot(case: &IdentityCase) -> Result<CommutatorReport> {
    let k = case.order;
    if k == 0 || k > 3 {
        return Err(MhdError::UnsupportedOrder { order: k, max: 3 });
    }
    let b_series = case
        .b
        .as_ref()
        .ok_or_else(|| MhdError::Precondition("dtk_bdot needs a B history".into()))?;
    let caches = case.caches()?;
    let c = case.center();
    let grid = &case.grid;
    let n = grid.n_nodes();
    let d = grid.dim;
    let m = crate::history::half_width(k);
    if case.len() < 2 * m + 1 {
        return Err(MhdError::Window {
            needed: 2 * m + 1,
            available: case.len(),
            t: 0.0,
        });
    }
    // LHS = D_t^k(B·∂f) − B·∂(D_t^k f)
    let bdotgrad: Vec<Vec<f64>> = (c - m..=c + m)
        .map(|ci| {
            let g = numerics::gradient_scalar_raw(grid, &caches[ci].f_jac_inv, &case.f[ci].data);
            (0..n)
                .map(|node| {
                    let bb = b_series[ci].get(node);
                    (0..d).map(|i| bb[i] * g.data[node * d + i]).sum()
                })
                .collect()
        })
        .collect();
    let lhs1 = dt_series(&bdotgrad, m, k, case.dt, m);
    let f_series: Vec<Vec<f64>> = (c - m..=c + m).map(|ci| case.f[ci].data.clone()).collect();
    let dtk_f = ScalarField {
        data: dt_series(&f_series, m, k, case.dt, m),
    };
    let g_dtk_f = numerics::gradient_scalar_raw(grid, &caches[c].f_jac_inv, &dtk_f.data);
    let mut lhs = vec![0.0; n];
    for node in 0..n {
        let bb = b_series[c].get(node);
        let mut s = 0.0;
        for i in 0..d {
            s += bb[i] * g_dtk_f.data[node * d + i];
        }
        lhs[node] = lhs1[node] - s;
    }
    // RHS = Σ_{j=0}^{k−1} C(k,j) (D_t^{k−j}B)·∂(D_t^j f)
    //     + Σ_{j=1}^{k}   C(k,j) (D_t^{k−j}B)·[D_t^j, ∂] f
    let (u_jets, f_jets) = jets_for(case, &caches, k.max(1))?;
    // D_t^a B fields
    let mut b_jets: Vec<VectorField> = Vec::with_capacity(k + 1);
    for a in 0..=k {
        let ma = crate::history::half_width(a.max(1)).min(m);
        let series: Vec<Vec<f64>> = (c - ma..=c + ma)
            .map(|ci| b_series[ci].data.clone())
            .collect();
        b_jets.push(if a == 0 {
            b_series[c].clone()
        } else {
            VectorField {
                d,
                data: dt_series(&series, ma, a, case.dt, ma),
            }
        });
    }
    // ∂ D_t^j f for j < k is in f_jets; j = k needs one more
    let grad_dtj_f: Vec<VectorField> = (0..k)
        .map(|j| f_jets[j].clone())
        .collect();
    let mut rhs = vec![0.0; n];
    for j in 0..k {
        let cb = binomial(k, j);
        let dtb = &b_jets[k - j];
        let gf = &grad_dtj_f[j];
        for node in 0..n {
            let mut s = 0.0;
            for i in 0..d {
                s += dtb.data[node * d + i] * gf.data[node * d + i];
            }
            rhs[node] += cb * s;
        }
    }
    for j in 1..=k {
        let cb = binomial(k, j);
        // [D_t^j, ∂]f = −[∂, D_t^j]f
        let comm = eval_chain_terms(&grad_dtk_expansion(j), d, n, &u_jets, &f_jets);
        let dtb = &b_jets[k - j];
        for node in 0..n {
            let mut s = 0.0;
            for i in 0..d {
                s += dtb.data[node * d + i] * comm.data[node * d + i];
            }
            rhs[node] -= cb * s;
        }
    }
    let mut resid = vec![0.0; n];
    for node in 0..n {
        resid[node] = lhs[node] - rhs[node];
    }
    Ok(CommutatorReport {
        max_residual: max_interior(grid, &resid, 1),
        lhs_scale: max_interior(grid, &lhs, 1),
    })
}

fn commutator_dtk_laplace(case: &IdentityCase) -> Result<CommutatorReport> {
    let k = case.order; // this is r−1 of the identity
    if k == 0 || k > 2 {
        return Err(MhdError::UnsupportedOrder { order: k, max: 2 });
    }
    let caches = case.caches()?;
    let c = case.center();
    let grid = &case.grid;
    let n = grid.n_nodes();
    let m = crate::history::half_width(k);
    if case.len() < 2 * m + 1 {
        return Err(MhdError::Window {
            needed: 2 * m + 1,
            available: case.len(),
            t: 0.0,
        });
    }
    // LHS = D_t^k(Δf) − Δ(D_t^k f)
    let laps: Vec<Vec<f64>> = (c - m..=c + m)
        .map(|ci| laplacian(&caches[ci], &case.f[ci]).data)
        .collect();
    let dtk_lap = dt_series(&laps, m, k, case.dt, m);
    let f_series: Vec<Vec<f64>> = (c - m..=c + m).map(|ci| case.f[ci].data.clone()).collect();
    let dtk_f = ScalarField {
        data: dt_series(&f_series, m, k, case.dt, m),
    };
    let lap_dtk_f = laplacian(&caches[c], &dtk_f);
    let mut lhs = vec![0.0; n];
    for node in 0..n {
        lhs[node] = dtk_lap[node] - lap_dtk_f.data[node];
    }
    // RHS by the recursion [D_t^k, Δ] = D_t[D_t^{k−1}, Δ] + [D_t, Δ]D_t^{k−1},
    // evaluated numerically: the k = 1 bracket is explicit, the outer D_t is
    // a time difference of the evaluated field.
    let rhs: Vec<f64> = match k {
        1 => dt_laplace_commutator_scalar(&caches[c], &case.u[c], &case.f[c]).data,
        2 => {
            // D_t([D_t,Δ]f) via a 5-point series of the evaluated bracket
            let bracket: Vec<Vec<f64>> = (c - m..=c + m)
                .map(|ci| {
                    dt_laplace_commutator_scalar(&caches[ci], &case.u[ci], &case.f[ci]).data
                })
                .collect();
            let dt_bracket = dt_series(&bracket, m, 1, case.dt, m);
            // [D_t,Δ](D_t f) at the center
            let dtf = ScalarField {
                data: dt_series(&f_series, m, 1, case.dt, m),
            };
            let second = dt_laplace_commutator_scalar(&caches[c], &case.u[c], &dtf);
            (0..n).map(|i| dt_bracket[i] + second.data[i]).collect()
        }
        _ => unreachable!(),
    };
    let mut resid = vec![0.0; n];
    for node in 0..n {
        resid[node] = lhs[node] - rhs[node];
    }
    Ok(CommutatorReport {
        max_residual: max_interior(grid, &resid, 1),
        lhs_scale: max_interior(grid, &lhs, 1),
    })
}

// ---------------------------------------------------------------------------
// Inequality ratio monitors
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InequalityId {
    Hodge,
    EllipticI,
    EllipticII,
    Tensor,
    Theta,
}

#[derive(Clone, Debug)]
pub struct InequalityReport {
    pub id: InequalityId,
    pub lhs: f64,
    pub rhs: f64,
    /// None when both sides vanish (vacuous pass)
    pub ratio: Option<f64>,
}

/// Assembles both sides of the requested inequality on the given fields.
/// `q` must vanish on the boundary where the proposition requires it; the
/// θ estimate requires a positive Rayleigh-Taylor margin of `q`.
pub fn inequality_ratio(
    cache: &GeometryCache,
    id: InequalityId,
    q: Option<&ScalarField>,
    beta: Option<&VectorField>,
) -> Result<InequalityReport> {
    let grid = &cache.grid;
    let n = grid.n_nodes();
    let d = grid.dim;
    let report = |lhs: f64, rhs: f64| {
        let ratio = if lhs == 0.0 && rhs == 0.0 {
            None
        } else {
            Some(lhs / rhs.max(1e-300))
        };
        Ok(InequalityReport { id, lhs, rhs, ratio })
    };
    match id {
        InequalityId::Hodge => {
            let beta =
                beta.ok_or_else(|| MhdError::Precondition("hodge needs a vector field".into()))?;
            let gb = grad_vector(cache, beta);
            let vc = numerics::vector_calculus(cache, beta);
            let kbound = cache.k0 + 1.0 / cache.iota0_lower;
            // N extended to the interior as η·n_ext (|N|_g ≤ 1)
            let mut lhs_int = vec![0.0; n];
            let mut rhs_int = vec![0.0; n];
            for node in 0..n {
                lhs_int[node] = gb[node].frobenius2();
                let eta = cache.eta.data[node];
                let nv = cache.n_ext.get(node);
                let mut mn2 = 0.0;
                for kx in 0..d {
                    let mut s = 0.0;
                    for i in 0..d {
                        s += gb[node].get(kx, i) * eta * nv[i];
                    }
                    mn2 += s * s;
                }
                let curl2: f64 = (0..d * d)
                    .map(|c2| {
                        let v = vc.curl.data[node * d * d + c2];
                        v * v
                    })
                    .sum::<f64>()
                    / 2.0;
                let b2: f64 = beta.get(node).iter().map(|v| v * v).sum();
                rhs_int[node] = mn2
                    + vc.div.data[node] * vc.div.data[node]
                    + curl2
                    + kbound * kbound * b2;
            }
            report(
                integrate(cache, &lhs_int, Region::Interior),
                integrate(cache, &rhs_int, Region::Interior),
            )
        }
        InequalityId::EllipticI | InequalityId::EllipticII => {
            let q = q.ok_or_else(|| MhdError::Precondition("elliptic needs a scalar".into()))?;
            let grad_q = TensorField {
                d,
                rank: 1,
                data: numerics::gradient_scalar_raw(grid, &cache.f_jac_inv, &q.data).data,
            };
            let hess = gradient(cache, &grad_q);
            let lap = laplacian(cache, q);
            let grad_lap = numerics::gradient_scalar_raw(grid, &cache.f_jac_inv, &lap.data);
            let hess_b = restrict_to_boundary(cache, &hess);
            let grad_b = restrict_to_boundary(cache, &grad_q);
            let q_b = TensorField {
                d,
                rank: 0,
                data: cache
                    .boundary_nodes()
                    .iter()
                    .map(|&node| q.data[node])
                    .collect(),
            };
            let pi_terms = l2_norm_boundary(cache, &crate::geometry::project(cache, &q_b))
                + l2_norm_boundary(cache, &crate::geometry::project(cache, &grad_b))
                + l2_norm_boundary(cache, &crate::geometry::project(cache, &hess_b));
            let lap_l2 = l2_norm_interior(
                cache,
                &TensorField {
                    d,
                    rank: 0,
                    data: lap.data.clone(),
                },
            );
            let hess_l2 = l2_norm_interior(cache, &hess);
            match id {
                InequalityId::EllipticI => {
                    let grad_lap_l2 = l2_norm_interior(
                        cache,
                        &TensorField {
                            d,
                            rank: 1,
                            data: grad_lap.data.clone(),
                        },
                    );
                    let lhs = hess_l2 + l2_norm_boundary(cache, &hess_b);
                    let rhs = pi_terms + lap_l2 + grad_lap_l2;
                    report(lhs, rhs)
                }
                _ => {
                    // δ = 1 form with r = 2
                    let lhs = hess_l2 + l2_norm_boundary(cache, &grad_b);
                    let rhs = pi_terms + lap_l2;
                    report(lhs, rhs)
                }
            }
        }
        InequalityId::Tensor | InequalityId::Theta => {
            let q = q.ok_or_else(|| MhdError::Precondition("tensor/θ needs a scalar".into()))?;
            let scale = q.max_abs().max(1e-300);
            let mut max_trace = 0.0_f64;
            for &node in cache.boundary_nodes() {
                max_trace = max_trace.max(q.data[node].abs());
            }
            if max_trace > 1e-8 * scale {
                return Err(MhdError::Precondition(format!(
                    "hypothesis q|∂Ω = 0 violated: max trace {max_trace:.3e}"
                )));
            }
            let hess = hessian_scalar(cache, q);
            let grad_q = numerics::gradient_scalar_raw(grid, &cache.f_jac_inv, &q.data);
            let nb = cache.boundary_nodes().len();
            let mut pi_hess = TensorField::zeros(nb, d, 2);
            for (bi, &node) in cache.boundary_nodes().iter().enumerate() {
                for i in 0..d {
                    for j in 0..d {
                        pi_hess.node_mut(bi)[i * d + j] = hess[node].get(i, j);
                    }
                }
            }
            let pi_hess = crate::geometry::project(cache, &pi_hess);
            let dn: Vec<f64> = cache
                .boundary_nodes()
                .iter()
                .enumerate()
                .map(|(bi, &node)| {
                    let nv = &cache.bnd.normal[bi * d..(bi + 1) * d];
                    (0..d).map(|i| nv[i] * grad_q.data[node * d + i]).sum()
                })
                .collect();
            let grad_b = restrict_to_boundary(
                cache,
                &TensorField {
                    d,
                    rank: 1,
                    data: grad_q.data.clone(),
                },
            );
            match id {
                InequalityId::Tensor => {
                    // |Π∇²q| ≲ |θ ∇_N q| + |∇q| on the boundary
                    let lhs = l2_norm_boundary(cache, &pi_hess);
                    let theta_dn: Vec<f64> = (0..nb)
                        .map(|bi| {
                            let t2: f64 = cache.bnd.theta[bi].frobenius2();
                            t2 * dn[bi] * dn[bi]
                        })
                        .collect();
                    let t1 = integrate(cache, &theta_dn, Region::Boundary)
                        .max(0.0)
                        .sqrt();
                    let rhs = t1 + l2_norm_boundary(cache, &grad_b);
                    report(lhs, rhs)
                }
                _ => {
                    // θ estimate needs the sign condition on q as a total
                    // pressure stand-in
                    let margin = dn.iter().fold(f64::INFINITY, |m, &v| m.min(-v));
                    if margin <= 0.0 {
                        return Err(MhdError::Precondition(format!(
                            "hypothesis −∇_N q ≥ ε₀ > 0 violated: margin {margin:.3e}"
                        )));
                    }
                    let theta_l2: f64 = {
                        let vals: Vec<f64> = (0..nb)
                            .map(|bi| cache.bnd.theta[bi].frobenius2())
                            .collect();
                        integrate(cache, &vals, Region::Boundary).max(0.0).sqrt()
                    };
                    let rhs = l2_norm_boundary(cache, &pi_hess)
                        + l2_norm_boundary(cache, &grad_b);
                    report(theta_l2, rhs)
                }
            }
        }
    }
}

/// Max empirical ratio over a seeded sample of boundary-vanishing fields.
pub fn inequality_sweep(
    cache: &GeometryCache,
    id: InequalityId,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let grid = &cache.grid;
    let n = grid.n_nodes();
    let mut worst = 0.0_f64;
    for _ in 0..samples {
        let c: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q = ScalarField::from_fn(n, |node| {
            let y = grid.node_y(node);
            let r2 = y[0] * y[0] + y[1] * y[1];
            (1.0 - r2)
                * (c[0]
                    + c[1] * y[0]
                    + c[2] * y[1]
                    + c[3] * y[0] * y[1]
                    + c[4] * (y[0] * y[0] - y[1] * y[1])
                    + c[5] * r2
                    + c[6] * y[0] * r2
                    + c[7] * y[1] * r2)
        });
        let beta = VectorField::from_fn(n, grid.dim, |node, i| {
            let y = grid.node_y(node);
            match i {
                0 => c[0] + c[2] * y[1] + c[4] * y[0] * y[0] + c[6] * y[0] * y[1],
                _ => c[1] + c[3] * y[0] + c[5] * y[1] * y[1] + c[7] * y[0] * y[1],
            }
        });
        let rep = inequality_ratio(cache, id, Some(&q), Some(&beta))?;
        if let Some(r) = rep.ratio {
            worst = worst.max(r);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expansion_tables_match_hand_derivation() {
        // k = 1: [∂, D_t] = (∂u)·∂f
        let t1 = grad_dtk_expansion(1);
        assert_eq!(t1.len(), 1);
        assert_eq!(t1[0].u_orders, vec![0]);
        assert_eq!(t1[0].f_order, 0);
        assert!((t1[0].coeff - 1.0).abs() < 1e-14);
        // k = 2: (∂D_t u)·∂f + 2(∂u)·∂D_t f − 2(∂u)(∂u)·∂f
        let t2 = grad_dtk_expansion(2);
        let mut found = 0;
        for t in &t2 {
            match (t.u_orders.as_slice(), t.f_order) {
                ([1], 0) => {
                    assert!((t.coeff - 1.0).abs() < 1e-14);
                    found += 1;
                }
                ([0], 1) => {
                    assert!((t.coeff - 2.0).abs() < 1e-14);
                    found += 1;
                }
                ([0, 0], 0) => {
                    assert!((t.coeff + 2.0).abs() < 1e-14);
                    found += 1;
                }
                other => panic!("unexpected term {other:?}"),
            }
        }
        assert_eq!(found, 3);
        // k = 3 table is frozen by shape: total weight of first-order terms
        let t3 = grad_dtk_expansion(3);
        assert!(t3.iter().any(|t| t.u_orders == vec![2] && t.f_order == 0));
        assert!(t3
            .iter()
            .any(|t| t.u_orders == vec![0] && t.f_order == 2 && (t.coeff - 3.0).abs() < 1e-14));
    }

    #[test]
    fn expansion_annihilates_constants() {
        // every term carries ∂D_t^b f, so constants map to zero by shape
        for k in 1..=3 {
            for t in grad_dtk_expansion(k) {
                assert!(!t.u_orders.is_empty() || t.f_order > 0);
            }
        }
    }
}
