//! The constrained fields derived from the network outputs.
//!
//! From the potential Ψ the gradient candidate is
//!
//! ```text
//! G = (∇×Ψ − F) / ‖∇×Ψ − F‖^((p−2)/(p−1)),     F(x) = x/3,
//! ```
//!
//! which satisfies the p-Poisson equation identically: the curl is
//! divergence-free and ∇·F = 1. The second auxiliary output Ψ̃ is projected
//! onto the closed unit ball to form G̃, the field that carries the curl-free
//! penalty. All constructions are generic over [`Scalar`], so the same code
//! produces plain values, spatial jets, and tape-recorded values.

use crate::diff::{curl_of_jets, Jet3, Scalar};
use crate::net::{forward_batch, forward_chunk, JetOutput, Params};
use crate::{Error, Result};

/// Fallback denominator when `‖∇×Ψ − F‖` vanishes; keeps G and its
/// derivatives finite at the (measure-zero) singularity.
pub const EPS_DIV_DEFAULT: f64 = 1e-8;

/// The p-Poisson exponent. Infinity is a genuine case of its own (pure
/// normalization), not a large-p limit, so it can never overflow.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PExponent {
    Finite(f64),
    Infinite,
}

impl PExponent {
    pub fn finite(p: f64) -> Result<Self> {
        if !(p >= 2.0) || !p.is_finite() {
            return Err(Error::Config(format!("p must be >= 2 and finite, got {p}")));
        }
        Ok(PExponent::Finite(p))
    }

    /// The norm exponent (p−2)/(p−1) ∈ [0, 1); exactly 1 at infinity.
    pub fn exponent(&self) -> f64 {
        match self {
            PExponent::Finite(p) => (p - 2.0) / (p - 1.0),
            PExponent::Infinite => 1.0,
        }
    }
}

impl std::fmt::Display for PExponent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PExponent::Finite(p) => write!(f, "{p}"),
            PExponent::Infinite => write!(f, "inf"),
        }
    }
}

impl std::str::FromStr for PExponent {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "infinity" | "oo" => Ok(PExponent::Infinite),
            t => {
                let p: f64 = t
                    .parse()
                    .map_err(|_| Error::Config(format!("cannot parse p exponent from {s:?}")))?;
                PExponent::finite(p)
            }
        }
    }
}

/// Derived physical quantities at one point.
#[derive(Clone, Debug)]
pub struct FieldSample {
    pub x: [f64; 3],
    pub u: f64,
    pub grad_u: [f64; 3],
    pub g: [f64; 3],
    pub g_tilde: [f64; 3],
    pub curl_g_tilde: [f64; 3],
    /// Spatial curl of G itself; needs second derivatives, so it is only
    /// filled by [`sample_fields_with_curl_g`].
    pub curl_g: Option<[f64; 3]>,
}

pub fn sq_norm3<S: Scalar>(v: &[S; 3]) -> S {
    v[0].clone() * v[0].clone() + v[1].clone() * v[1].clone() + v[2].clone() * v[2].clone()
}

/// The fixed source field F(x) = x/3 with ∇·F = 1.
pub fn source_field<S: Scalar>(x: &[S; 3]) -> [S; 3] {
    let third = S::constant(1.0 / 3.0);
    std::array::from_fn(|i| x[i].clone() * third.clone())
}

/// Assemble G from the curl of the potential: v = curl_psi − f, then
/// `v / max(‖v‖, eps_div)^e` with e = (p−2)/(p−1). For p = 2 the exponent is
/// zero and G = v exactly; for p = ∞ this is pure normalization.
pub fn construct_g<S: Scalar>(
    curl_psi: &[S; 3],
    f: &[S; 3],
    p: PExponent,
    eps_div: f64,
) -> [S; 3] {
    let v: [S; 3] = std::array::from_fn(|i| curl_psi[i].clone() - f[i].clone());
    if matches!(p, PExponent::Finite(q) if q == 2.0) {
        return v;
    }
    let n2 = sq_norm3(&v);
    let guarded = n2.value().sqrt() > eps_div;
    let m = if guarded {
        n2.sqrt()
    } else {
        S::constant(eps_div)
    };
    let denom = match p {
        PExponent::Infinite => m,
        PExponent::Finite(_) => m.powf(p.exponent()),
    };
    std::array::from_fn(|i| v[i].clone() / denom.clone())
}

/// Projection onto the closed unit ball, `y / max(1, ‖y‖)`. Inputs already
/// inside the ball (up to a 1e-13 margin on the squared norm, so the
/// projection is exactly idempotent in floating point) pass through
/// untouched; derivative propagation follows whichever branch is taken.
pub fn project_unit_ball<S: Scalar>(y: &[S; 3]) -> [S; 3] {
    let n2 = sq_norm3(y);
    if n2.value() <= 1.0 + 1e-13 {
        y.clone()
    } else {
        let m = n2.sqrt();
        std::array::from_fn(|i| y[i].clone() / m.clone())
    }
}

/// Normalization to the unit sphere with a vanishing-norm guard; used by the
/// eikonal-splitting baseline's auxiliary output.
pub fn normalize_unit<S: Scalar>(y: &[S; 3], eps: f64) -> [S; 3] {
    let n2 = sq_norm3(y);
    let m = if n2.value().sqrt() > eps {
        n2.sqrt()
    } else {
        S::constant(eps)
    };
    std::array::from_fn(|i| y[i].clone() / m.clone())
}

/// Build a [`FieldSample`] from one point's output jets. Works for both the
/// 7-output constrained mode and the 4-output eikonal baseline (where the
/// normalized auxiliary takes the role of both G and G̃).
pub fn fields_from_jets(
    out: &JetOutput,
    x: [f64; 3],
    p: PExponent,
    eps_div: f64,
) -> FieldSample {
    let u = out.u();
    match out.jets.len() {
        7 => {
            let psi = out.psi();
            let curl_psi = curl_of_jets(&psi);
            let f = source_field(&x);
            let g = construct_g(&curl_psi, &f, p, eps_div);
            let gt_jets = project_unit_ball(&out.psi_tilde());
            let curl_g_tilde = curl_of_jets(&gt_jets);
            FieldSample {
                x,
                u: u.v,
                grad_u: u.tangent(),
                g,
                g_tilde: std::array::from_fn(|i| gt_jets[i].v),
                curl_g_tilde,
                curl_g: None,
            }
        }
        4 => {
            let h_raw: [Jet3<f64>; 3] = std::array::from_fn(|i| out.jets[1 + i].clone());
            let h = normalize_unit(&h_raw, eps_div);
            let curl_h = curl_of_jets(&h);
            FieldSample {
                x,
                u: u.v,
                grad_u: u.tangent(),
                g: std::array::from_fn(|i| h[i].v),
                g_tilde: std::array::from_fn(|i| h[i].v),
                curl_g_tilde: curl_h,
                curl_g: None,
            }
        }
        n => panic!("unsupported output dimension {n}"),
    }
}

/// One forward pass with the input Jacobian, then the field constructions.
pub fn sample_fields(
    params: &Params,
    x: [f64; 3],
    p: PExponent,
    eps_div: f64,
) -> Result<FieldSample> {
    let out = crate::net::forward(params, x)?;
    Ok(fields_from_jets(&out, x, p, eps_div))
}

/// Batched field samples.
pub fn sample_fields_batch(
    params: &Params,
    xs: &[[f64; 3]],
    p: PExponent,
    eps_div: f64,
) -> Vec<FieldSample> {
    forward_batch(params, xs)
        .iter()
        .zip(xs)
        .map(|(out, &x)| fields_from_jets(out, x, p, eps_div))
        .collect()
}

/// Field sample including ∇×G, which requires second derivatives of the
/// potential (the 16-channel forward pass).
pub fn sample_fields_with_curl_g(
    params: &Params,
    x: [f64; 3],
    p: PExponent,
    eps_div: f64,
) -> Result<FieldSample> {
    if params.cfg.out_dim != 7 {
        return Err(Error::Config(
            "curl of G needs the 7-output constrained network".into(),
        ));
    }
    let (out, _) = forward_chunk::<16>(params, &[x], false);
    let inner = |base: usize| Jet3::<f64> {
        v: out[base],
        d: [out[base + 1], out[base + 2], out[base + 3]],
    };
    let jets: Vec<Jet3<Jet3<f64>>> = (0..7)
        .map(|j| Jet3 {
            v: inner(j * 16),
            d: [inner(j * 16 + 4), inner(j * 16 + 8), inner(j * 16 + 12)],
        })
        .collect();
    // First-order sample from the value components.
    let first: Vec<Jet3<f64>> = jets.iter().map(|j| j.v.clone()).collect();
    let mut sample = fields_from_jets(&JetOutput { jets: first }, x, p, eps_div);
    // G rebuilt with jet components so its spatial tangents survive.
    let psi: [Jet3<Jet3<f64>>; 3] = std::array::from_fn(|i| jets[1 + i].clone());
    let curl_psi = curl_of_jets(&psi);
    let xj = Jet3::<f64>::seed_point(x);
    let f = source_field(&xj);
    let g_jets = construct_g(&curl_psi, &f, p, eps_div);
    sample.curl_g = Some(curl_of_jets(&g_jets).map(|s| s.value()));
    Ok(sample)
}
