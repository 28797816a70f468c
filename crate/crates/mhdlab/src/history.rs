//! Run histories: uniformly spaced snapshots and material derivatives by
//! central time differences at fixed Lagrangian nodes (in this frame
//! D_t is plain time differentiation).

use crate::dynamics::SimState;
use crate::eos::EosParams;
use crate::error::{MhdError, Result};
use crate::field::{ScalarField, VectorField};
use crate::stencil::fd_weights;

/// Ordered snapshots at a uniform output interval.
#[derive(Clone, Debug)]
pub struct History {
    pub states: Vec<SimState>,
    /// snapshot spacing in time
    pub dt_snap: f64,
    pub params: EosParams,
    /// integration step used by the run
    pub dt_step: f64,
}

impl History {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.t).collect()
    }

    /// Index of the snapshot closest to `t`.
    pub fn index_of(&self, t: f64) -> usize {
        if self.states.is_empty() {
            return 0;
        }
        let t0 = self.states[0].t;
        let i = ((t - t0) / self.dt_snap).round() as isize;
        i.clamp(0, self.states.len() as isize - 1) as usize
    }

    /// Central window [i−m, i+m] around index `i`; shrinks `m` only by
    /// erroring (the stencil order is part of the contract).
    pub fn window(&self, i: usize, m: usize) -> Result<std::ops::Range<usize>> {
        let t = self.states.get(i).map(|s| s.t).unwrap_or(0.0);
        if i < m || i + m >= self.states.len() {
            return Err(MhdError::Window {
                needed: 2 * m + 1,
                available: self.states.len(),
                t,
            });
        }
        Ok(i - m..i + m + 1)
    }
}

/// Scalar and vector unknowns addressable in a history.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldId {
    U,
    B,
    P,
    /// flow map positions
    X,
}

pub fn scalar_of(state: &SimState, id: FieldId) -> Option<&ScalarField> {
    match id {
        FieldId::P => Some(&state.p),
        _ => None,
    }
}

pub fn vector_of(state: &SimState, id: FieldId) -> Option<&VectorField> {
    match id {
        FieldId::U => Some(&state.u),
        FieldId::B => Some(&state.b),
        FieldId::X => Some(&state.fm.x),
        _ => None,
    }
}

/// Central-difference weights for the k-th time derivative on a (2m+1)-point
/// window; order 2(m − k/2)-ish, chosen as the widest stencil available.
fn time_weights(k: usize, m: usize, dt: f64) -> Vec<f64> {
    let xs: Vec<f64> = (-(m as isize)..=m as isize)
        .map(|j| j as f64 * dt)
        .collect();
    fd_weights(0.0, &xs, k)
}

/// Window half-width used for the k-th derivative: k ≤ 2 use 5 points
/// (4th order), k = 3 uses 7 (4th order).
pub fn half_width(k: usize) -> usize {
    match k {
        0 => 0,
        1 | 2 => 2,
        _ => 3,
    }
}

/// k-th material derivative of a per-node scalar quantity extracted by
/// `get` from each snapshot, at snapshot index `i`.
pub fn dt_k_scalar(
    history: &History,
    i: usize,
    k: usize,
    get: impl Fn(&SimState) -> Vec<f64>,
) -> Result<ScalarField> {
    if k == 0 {
        return Ok(ScalarField {
            data: get(&history.states[i]),
        });
    }
    let m = half_width(k);
    let range = history.window(i, m)?;
    let w = time_weights(k, m, history.dt_snap);
    let mut acc: Option<Vec<f64>> = None;
    for (j, si) in range.enumerate() {
        let vals = get(&history.states[si]);
        match &mut acc {
            None => {
                acc = Some(vals.iter().map(|v| v * w[j]).collect());
            }
            Some(a) => {
                for (ai, vi) in a.iter_mut().zip(vals.iter()) {
                    *ai += w[j] * vi;
                }
            }
        }
    }
    Ok(ScalarField { data: acc.unwrap() })
}

/// k-th material derivative of a per-node vector quantity.
pub fn dt_k_vector(
    history: &History,
    i: usize,
    k: usize,
    get: impl Fn(&SimState) -> VectorField,
) -> Result<VectorField> {
    if k == 0 {
        return Ok(get(&history.states[i]));
    }
    let m = half_width(k);
    let range = history.window(i, m)?;
    let w = time_weights(k, m, history.dt_snap);
    let mut acc: Option<VectorField> = None;
    for (j, si) in range.enumerate() {
        let vf = get(&history.states[si]);
        match &mut acc {
            None => {
                let mut first = vf.clone();
                for v in first.data.iter_mut() {
                    *v *= w[j];
                }
                acc = Some(first);
            }
            Some(a) => a.axpy(w[j], &vf),
        }
    }
    Ok(acc.unwrap())
}
