//! Equation of state. The pressure law is linear in the density,
//! p(ρ) = κ(ρ − 1), i.e. ρ(p) = 1 + p/κ, with κ = p'(ρ)|_{ρ=1}
//! parametrizing the sound speed c = √κ. λ is the magnetic diffusivity.

use crate::error::{MhdError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EosParams {
    /// sound-speed parameter, p'(ρ) at ρ = 1
    pub kappa: f64,
    /// magnetic diffusivity (≥ 0)
    pub lambda: f64,
    /// EOS bound constant
    pub c0: f64,
}

impl EosParams {
    pub fn new(kappa: f64, lambda: f64) -> Self {
        assert!(kappa > 0.0, "kappa must be positive");
        assert!(lambda >= 0.0, "lambda must be nonnegative");
        EosParams {
            kappa,
            lambda,
            c0: 1.0,
        }
    }

    #[inline]
    pub fn rho(&self, p: f64) -> f64 {
        1.0 + p / self.kappa
    }

    /// dρ/dp (constant for the linear law)
    #[inline]
    pub fn rho_prime(&self) -> f64 {
        1.0 / self.kappa
    }

    #[inline]
    pub fn sound_speed(&self) -> f64 {
        self.kappa.sqrt()
    }

    /// ρ/ρ'(p) = κ + p, the factor in D_t p = −(ρ/ρ') div u.
    #[inline]
    pub fn rho_over_rho_prime(&self, p: f64) -> f64 {
        self.kappa + p
    }

    /// ρ'/ρ = 1/(κ + p).
    #[inline]
    pub fn rho_prime_over_rho(&self, p: f64) -> f64 {
        1.0 / (self.kappa + p)
    }
}

#[derive(Clone, Debug)]
pub struct EosReport {
    pub rho: f64,
    pub rho_prime: f64,
    pub sound_speed: f64,
    /// |ρ^(m)| ≤ c0 and |ρ^(m)| ≤ c0 |ρ'|^m for m = 1..6; only the upper
    /// bounds are checked (the printed lower bound fails for any law with
    /// vanishing higher derivatives, this one included)
    pub upper_bounds_hold: bool,
}

pub fn eos_eval(params: &EosParams, p: f64) -> Result<EosReport> {
    let rho = params.rho(p);
    if rho <= 0.0 {
        return Err(MhdError::Vacuum { rho, floor: 0.0 });
    }
    let rho_prime = params.rho_prime();
    // m = 1: |ρ'| ≤ c0 and |ρ'| ≤ c0|ρ'|; m ≥ 2: ρ^(m) = 0, bounds trivial
    let upper_bounds_hold = rho_prime <= params.c0 && params.c0 >= 1.0;
    Ok(EosReport {
        rho,
        rho_prime,
        sound_speed: params.sound_speed(),
        upper_bounds_hold,
    })
}

/// Q(ρ) = ∫₁^ρ p(R)/R² dR; closed form κ(ln ρ + 1/ρ − 1) for the linear law.
pub fn q_potential(params: &EosParams, rho: f64) -> f64 {
    params.kappa * (rho.ln() + 1.0 / rho - 1.0)
}

/// Enthalpy h(ρ) = ∫₁^ρ p'(r)/r dr = κ ln ρ for the linear law.
pub fn enthalpy(params: &EosParams, rho: f64) -> f64 {
    params.kappa * rho.ln()
}

/// Adaptive Simpson quadrature of f over [a, b]; the fallback evaluation
/// path for general pressure laws and the oracle for the closed forms.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        ((b - a) / 6.0 * (fa + 4.0 * fm + fb), m, fm)
    }
    #[allow(clippy::too_many_arguments)]
    fn go(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        whole: f64,
        m: f64,
        fm: f64,
        tol: f64,
        depth: usize,
    ) -> f64 {
        let (left, lm, flm) = simpson(f, a, fa, m, fm);
        let (right, rm, frm) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            go(f, a, fa, m, fm, left, lm, flm, 0.5 * tol, depth - 1)
                + go(f, m, fm, b, fb, right, rm, frm, 0.5 * tol, depth - 1)
        }
    }
    if a == b {
        return 0.0;
    }
    let (fa, fb) = (f(a), f(b));
    let (whole, m, fm) = simpson(f, a, fa, b, fb);
    go(f, a, fa, b, fb, whole, m, fm, tol, 40)
}

/// Q(ρ) by quadrature of the defining integral.
pub fn q_potential_quadrature(params: &EosParams, rho: f64) -> f64 {
    let kappa = params.kappa;
    adaptive_simpson(&|r| kappa * (r - 1.0) / (r * r), 1.0, rho, 1e-13)
}

/// h(ρ) by quadrature of the defining integral.
pub fn enthalpy_quadrature(params: &EosParams, rho: f64) -> f64 {
    let kappa = params.kappa;
    adaptive_simpson(&|r| kappa / r, 1.0, rho, 1e-13)
}
