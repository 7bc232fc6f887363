//! Monte Carlo estimators of the training objective.
//!
//! The objective has five terms: the boundary attachment mean |u| over the
//! surface batch, and four volume terms over the collocation batch — the
//! gradient match ‖∇u − G‖², the auxiliary match ‖G − G̃‖², the squared curl
//! of the selected target field, and the smeared-delta area penalty
//! δ_ε(u)·‖∇u‖ with δ_ε(t) = 1 − tanh²(t/ε). Term estimators return raw
//! (unweighted) means; the weights are applied exactly once, in
//! [`total_loss`], so breakdown values stay comparable across ablations.
//!
//! The eikonal-splitting baseline replaces everything but the boundary term
//! with η·‖∇u − H‖², H being the normalized auxiliary output.

use crate::diff::Scalar;
use crate::fields::{sq_norm3, FieldSample};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    /// Dirac smearing width of the area term.
    pub epsilon: f64,
    /// Weight of the gradient-match term in the eikonal-splitting baseline.
    pub eta_baseline: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.1,
            lambda2: 1e-4,
            lambda3: 5e-4,
            lambda4: 0.1,
            epsilon: 1.0,
            eta_baseline: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.lambda4,
            self.eta_baseline,
        ];
        if all.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Which field the curl penalty applies to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CurlTarget {
    OnGTilde,
    OnG,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Formulation {
    Pinc,
    EikonalSplit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossMode {
    pub curl_target: CurlTarget,
    pub area_term: bool,
    pub formulation: Formulation,
}

impl Default for LossMode {
    fn default() -> Self {
        LossMode {
            curl_target: CurlTarget::OnGTilde,
            area_term: true,
            formulation: Formulation::Pinc,
        }
    }
}

/// Raw term values and the weighted total for one batch pair.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub boundary: f64,
    pub grad_match: f64,
    pub aux_match: f64,
    pub curl: f64,
    pub area: f64,
    pub total: f64,
}

// ---------------------------------------------------------------------------
// Per-sample residuals, generic so the recorded heads reuse them
// ---------------------------------------------------------------------------

pub(crate) fn grad_match_residual<S: Scalar>(grad_u: &[S; 3], g: &[S; 3]) -> S {
    let d: [S; 3] = std::array::from_fn(|i| grad_u[i].clone() - g[i].clone());
    sq_norm3(&d)
}

pub(crate) fn aux_match_residual<S: Scalar>(g: &[S; 3], g_tilde: &[S; 3]) -> S {
    let d: [S; 3] = std::array::from_fn(|i| g[i].clone() - g_tilde[i].clone());
    sq_norm3(&d)
}

/// δ_ε(u)·‖∇u‖. The norm is guarded at zero, where the term (and its
/// subgradient) vanish anyway.
pub(crate) fn area_residual<S: Scalar>(u: &S, grad_u: &[S; 3], epsilon: f64) -> S {
    let t = (u.clone() * S::constant(1.0 / epsilon)).tanh();
    let delta = S::constant(1.0) - t.clone() * t;
    let n2 = sq_norm3(grad_u);
    if n2.value() < 1e-30 {
        return S::constant(0.0);
    }
    delta * n2.sqrt()
}

fn require_nonempty(n: usize, what: &str) -> Result<()> {
    if n == 0 {
        return Err(Error::Usage(format!("{what}: empty batch")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Batch estimators
// ---------------------------------------------------------------------------

/// Mean |u| over the surface batch.
pub fn boundary_term(samples: &[FieldSample]) -> Result<f64> {
    require_nonempty(samples.len(), "boundary_term")?;
    Ok(samples.iter().map(|s| s.u.abs()).sum::<f64>() / samples.len() as f64)
}

/// Mean ‖∇u − G‖² over the collocation batch.
pub fn grad_match_term(samples: &[FieldSample]) -> Result<f64> {
    require_nonempty(samples.len(), "grad_match_term")?;
    Ok(samples
        .iter()
        .map(|s| grad_match_residual(&s.grad_u, &s.g))
        .sum::<f64>()
        / samples.len() as f64)
}

/// Mean ‖G − G̃‖².
pub fn aux_match_term(samples: &[FieldSample]) -> Result<f64> {
    require_nonempty(samples.len(), "aux_match_term")?;
    Ok(samples
        .iter()
        .map(|s| aux_match_residual(&s.g, &s.g_tilde))
        .sum::<f64>()
        / samples.len() as f64)
}

/// Mean squared curl norm of the selected target field. Exactly zero when
/// the target is `Off`. The `OnG` target needs samples produced with
/// [`crate::fields::sample_fields_with_curl_g`].
pub fn curl_term(samples: &[FieldSample], mode: &LossMode) -> Result<f64> {
    require_nonempty(samples.len(), "curl_term")?;
    match mode.curl_target {
        CurlTarget::Off => Ok(0.0),
        CurlTarget::OnGTilde => Ok(samples
            .iter()
            .map(|s| sq_norm3(&s.curl_g_tilde))
            .sum::<f64>()
            / samples.len() as f64),
        CurlTarget::OnG => {
            let mut acc = 0.0;
            for s in samples {
                let c = s.curl_g.ok_or_else(|| {
                    Error::Usage("curl_term on G requires samples carrying curl_g".into())
                })?;
                acc += sq_norm3(&c);
            }
            Ok(acc / samples.len() as f64)
        }
    }
}

/// Mean δ_ε(u)·‖∇u‖ over the collocation batch.
pub fn area_term(samples: &[FieldSample], epsilon: f64) -> Result<f64> {
    require_nonempty(samples.len(), "area_term")?;
    Ok(samples
        .iter()
        .map(|s| area_residual(&s.u, &s.grad_u, epsilon))
        .sum::<f64>()
        / samples.len() as f64)
}

fn check_finite(value: f64, term: &str) -> Result<f64> {
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss term '{term}' is not finite")));
    }
    Ok(value)
}

/// Compose the full objective. Terms switched off by the mode report zero so
/// the breakdown identity `total = boundary + λ1·gm + λ2·am + λ3·curl +
/// λ4·area` always holds as written.
pub fn total_loss(
    surface: &[FieldSample],
    collocation: &[FieldSample],
    weights: &LossWeights,
    mode: &LossMode,
) -> Result<LossBreakdown> {
    require_nonempty(surface.len(), "total_loss surface batch")?;
    require_nonempty(collocation.len(), "total_loss collocation batch")?;
    let boundary = check_finite(boundary_term(surface)?, "boundary")?;
    match mode.formulation {
        Formulation::Pinc => {
            let grad_match = check_finite(grad_match_term(collocation)?, "grad_match")?;
            let aux_match = check_finite(aux_match_term(collocation)?, "aux_match")?;
            let curl = check_finite(curl_term(collocation, mode)?, "curl")?;
            let area = if mode.area_term {
                check_finite(area_term(collocation, weights.epsilon)?, "area")?
            } else {
                0.0
            };
            let total = boundary
                + weights.lambda1 * grad_match
                + weights.lambda2 * aux_match
                + weights.lambda3 * curl
                + weights.lambda4 * area;
            Ok(LossBreakdown {
                boundary,
                grad_match,
                aux_match,
                curl,
                area,
                total,
            })
        }
        Formulation::EikonalSplit => {
            let grad_match = check_finite(grad_match_term(collocation)?, "grad_match")?;
            let total = boundary + weights.eta_baseline * grad_match;
            Ok(LossBreakdown {
                boundary,
                grad_match,
                aux_match: 0.0,
                curl: 0.0,
                area: 0.0,
                total,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Recorded heads (training path)
// ---------------------------------------------------------------------------

pub(crate) mod head {
    use super::*;
    use crate::diff::{curl_of_jets, Jet3, Var};
    use crate::fields::{construct_g, normalize_unit, project_unit_ball, source_field, PExponent};

    /// Raw per-sample term values produced alongside the recorded node.
    #[derive(Clone, Copy, Debug, Default)]
    pub struct CollocTerms {
        pub grad_match: f64,
        pub aux_match: f64,
        pub curl: f64,
        pub area: f64,
    }

    /// Surface contribution |u|; returns the raw value and the node (the
    /// boundary term carries unit weight in the total).
    pub fn surface(u: &Var) -> (f64, Var) {
        let node = u.abs();
        (node.value(), node)
    }

    /// Collocation contribution for the constrained formulation with
    /// first-order jets (curl penalty on G̃ or off).
    pub fn colloc(
        jets: &[Jet3<Var>],
        x: [f64; 3],
        p: PExponent,
        eps_div: f64,
        weights: &LossWeights,
        mode: &LossMode,
    ) -> (CollocTerms, Var) {
        debug_assert!(mode.curl_target != CurlTarget::OnG);
        let u = &jets[0];
        let psi: [Jet3<Var>; 3] = std::array::from_fn(|i| jets[1 + i].clone());
        let psi_t: [Jet3<Var>; 3] = std::array::from_fn(|i| jets[4 + i].clone());
        let curl_psi = curl_of_jets(&psi);
        let fx: [Var; 3] = std::array::from_fn(|i| Var::constant(x[i] / 3.0));
        let g = construct_g(&curl_psi, &fx, p, eps_div);
        let gt_jets = project_unit_ball(&psi_t);
        let gt: [Var; 3] = std::array::from_fn(|i| gt_jets[i].v.clone());

        let gm = grad_match_residual(&u.d, &g);
        let am = aux_match_residual(&g, &gt);
        let mut node = gm.clone() * Var::constant(weights.lambda1)
            + am.clone() * Var::constant(weights.lambda2);
        let mut terms = CollocTerms {
            grad_match: gm.value(),
            aux_match: am.value(),
            ..Default::default()
        };
        if mode.curl_target == CurlTarget::OnGTilde {
            let c = curl_of_jets(&gt_jets);
            let cn = sq_norm3(&c);
            terms.curl = cn.value();
            node = node + cn * Var::constant(weights.lambda3);
        }
        if mode.area_term {
            let ar = area_residual(&u.v, &u.d, weights.epsilon);
            terms.area = ar.value();
            node = node + ar * Var::constant(weights.lambda4);
        }
        (terms, node)
    }

    /// Collocation contribution when the curl penalty acts on G itself;
    /// requires second-order jets.
    pub fn colloc_curl_on_g(
        jets: &[Jet3<Jet3<Var>>],
        x: [f64; 3],
        p: PExponent,
        eps_div: f64,
        weights: &LossWeights,
        mode: &LossMode,
    ) -> (CollocTerms, Var) {
        let u = &jets[0];
        let u_val = u.v.v.clone();
        let grad_u: [Var; 3] = std::array::from_fn(|i| u.v.d[i].clone());
        let psi: [Jet3<Jet3<Var>>; 3] = std::array::from_fn(|i| jets[1 + i].clone());
        let psi_t_first: [Var; 3] = std::array::from_fn(|i| jets[4 + i].v.v.clone());
        // curl of psi with spatial tangents intact (inner jets)
        let curl_psi = curl_of_jets(&psi);
        let fx: [Jet3<Var>; 3] = std::array::from_fn(|i| {
            let mut d = [
                Var::constant(0.0),
                Var::constant(0.0),
                Var::constant(0.0),
            ];
            d[i] = Var::constant(1.0 / 3.0);
            Jet3 {
                v: Var::constant(x[i] / 3.0),
                d,
            }
        });
        let g_jets = construct_g(&curl_psi, &fx, p, eps_div);
        let g: [Var; 3] = std::array::from_fn(|i| g_jets[i].v.clone());
        let gt = project_unit_ball(&psi_t_first);

        let gm = grad_match_residual(&grad_u, &g);
        let am = aux_match_residual(&g, &gt);
        let curl_g = curl_of_jets(&g_jets);
        let cn = sq_norm3(&curl_g);
        let mut node = gm.clone() * Var::constant(weights.lambda1)
            + am.clone() * Var::constant(weights.lambda2)
            + cn.clone() * Var::constant(weights.lambda3);
        let mut terms = CollocTerms {
            grad_match: gm.value(),
            aux_match: am.value(),
            curl: cn.value(),
            area: 0.0,
        };
        if mode.area_term {
            let ar = area_residual(&u_val, &grad_u, weights.epsilon);
            terms.area = ar.value();
            node = node + ar * Var::constant(weights.lambda4);
        }
        (terms, node)
    }

    /// Collocation contribution of the eikonal-splitting baseline:
    /// η·‖∇u − H‖² with H the unit-normalized auxiliary output.
    pub fn colloc_eikonal(
        jets: &[Jet3<Var>],
        eps_div: f64,
        weights: &LossWeights,
    ) -> (CollocTerms, Var) {
        let u = &jets[0];
        let h_raw: [Var; 3] = std::array::from_fn(|i| jets[1 + i].v.clone());
        let h = normalize_unit(&h_raw, eps_div);
        let gm = grad_match_residual(&u.d, &h);
        let node = gm.clone() * Var::constant(weights.eta_baseline);
        (
            CollocTerms {
                grad_match: gm.value(),
                ..Default::default()
            },
            node,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(u: f64, grad_u: [f64; 3], g: [f64; 3], g_tilde: [f64; 3]) -> FieldSample {
        FieldSample {
            x: [0.0; 3],
            u,
            grad_u,
            g,
            g_tilde,
            curl_g_tilde: [0.0; 3],
            curl_g: None,
        }
    }

    #[test]
    fn boundary_examples() {
        let zeros = vec![sample(0.0, [0.0; 3], [0.0; 3], [0.0; 3]); 3];
        assert_eq!(boundary_term(&zeros).unwrap(), 0.0);
        let pair = vec![
            sample(1.0, [0.0; 3], [0.0; 3], [0.0; 3]),
            sample(-1.0, [0.0; 3], [0.0; 3], [0.0; 3]),
        ];
        assert_eq!(boundary_term(&pair).unwrap(), 1.0);
        let three = vec![
            sample(0.5, [0.0; 3], [0.0; 3], [0.0; 3]),
            sample(0.1, [0.0; 3], [0.0; 3], [0.0; 3]),
            sample(0.0, [0.0; 3], [0.0; 3], [0.0; 3]),
        ];
        assert!((boundary_term(&three).unwrap() - 0.2).abs() < 1e-15);
        assert!(boundary_term(&[]).is_err());
    }

    #[test]
    fn grad_match_examples() {
        let matched = vec![sample(0.0, [1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0; 3]); 4];
        assert_eq!(grad_match_term(&matched).unwrap(), 0.0);
        let unit = vec![sample(0.0, [1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0; 3]); 4];
        assert_eq!(grad_match_term(&unit).unwrap(), 1.0);
        let two = vec![
            sample(0.0, [1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0; 3]),
            sample(0.0, [2.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0; 3]),
        ];
        assert!((grad_match_term(&two).unwrap() - 2.5).abs() < 1e-15);
    }

    #[test]
    fn aux_match_examples() {
        let eq = vec![sample(0.0, [0.0; 3], [0.3, 0.4, 0.0], [0.3, 0.4, 0.0]); 2];
        assert_eq!(aux_match_term(&eq).unwrap(), 0.0);
        let unit = vec![sample(0.0, [0.0; 3], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]); 2];
        assert_eq!(aux_match_term(&unit).unwrap(), 1.0);
    }

    #[test]
    fn curl_examples() {
        let mode = LossMode::default();
        // field V = (-y, x, 0) has curl (0,0,2) everywhere: mean = 4
        let mut s = sample(0.0, [0.0; 3], [0.0; 3], [0.0; 3]);
        s.curl_g_tilde = [0.0, 0.0, 2.0];
        let batch = vec![s; 5];
        assert_eq!(curl_term(&batch, &mode).unwrap(), 4.0);
        let off = LossMode {
            curl_target: CurlTarget::Off,
            ..mode
        };
        assert_eq!(curl_term(&batch, &off).unwrap(), 0.0);
        // curl-free field → 0
        let free = vec![sample(0.0, [0.0; 3], [0.0; 3], [0.0; 3]); 5];
        assert!(curl_term(&free, &mode).unwrap() <= 1e-10);
        // on-G target demands second-order samples
        let on_g = LossMode {
            curl_target: CurlTarget::OnG,
            ..mode
        };
        assert!(curl_term(&batch, &on_g).is_err());
    }

    #[test]
    fn area_examples() {
        let delta1 = |t: f64| 1.0 - (t / 1.0).tanh().powi(2);
        assert_eq!(delta1(0.0), 1.0);
        assert!(delta1(10.0) < 1e-8);
        let batch = vec![sample(0.0, [1.0, 0.0, 0.0], [0.0; 3], [0.0; 3]); 3];
        assert_eq!(area_term(&batch, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn total_composition() {
        let w = LossWeights::default();
        assert_eq!(
            (w.lambda1, w.lambda2, w.lambda3, w.lambda4, w.epsilon),
            (0.1, 1e-4, 5e-4, 0.1, 1.0)
        );
        let mode = LossMode::default();
        // all residuals zero → total zero
        let surf = vec![sample(0.0, [0.0; 3], [0.0; 3], [0.0; 3]); 2];
        let coll = vec![sample(0.0, [0.0; 3], [0.0; 3], [0.0; 3]); 2];
        let b = total_loss(&surf, &coll, &w, &mode).unwrap();
        assert_eq!(b.total, 0.0);
        // weights all zero leaves only the boundary term
        let surf2 = vec![sample(0.7, [0.0; 3], [0.0; 3], [0.0; 3]); 2];
        let wz = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            lambda4: 0.0,
            ..w
        };
        let coll2 = vec![sample(0.1, [1.0, 0.0, 0.0], [0.3, 0.0, 0.0], [0.2, 0.0, 0.0]); 2];
        let b2 = total_loss(&surf2, &coll2, &wz, &mode).unwrap();
        assert!((b2.total - 0.7).abs() < 1e-15);
        assert!((b2.boundary - 0.7).abs() < 1e-15);
        // breakdown identity
        let b3 = total_loss(&surf2, &coll2, &w, &mode).unwrap();
        let recomposed = b3.boundary
            + w.lambda1 * b3.grad_match
            + w.lambda2 * b3.aux_match
            + w.lambda3 * b3.curl
            + w.lambda4 * b3.area;
        assert!((b3.total - recomposed).abs() < 1e-15);
    }

    #[test]
    fn total_is_linear_in_each_weight() {
        let mode = LossMode::default();
        let surf = vec![sample(0.3, [0.0; 3], [0.0; 3], [0.0; 3]); 2];
        let coll = vec![sample(0.2, [1.0, 0.5, 0.0], [0.4, 0.0, 0.1], [0.3, 0.0, 0.0]); 3];
        let base = LossWeights::default();
        let b0 = total_loss(&surf, &coll, &base, &mode).unwrap();
        let mut w2 = base;
        w2.lambda1 *= 3.0;
        let b1 = total_loss(&surf, &coll, &w2, &mode).unwrap();
        let expect = b0.total + 2.0 * base.lambda1 * b0.grad_match;
        assert!((b1.total - expect).abs() < 1e-12);
    }

    #[test]
    fn terms_are_permutation_invariant() {
        let a = sample(0.5, [1.0, 0.0, 0.0], [0.3, 0.1, 0.0], [0.2, 0.0, 0.0]);
        let b = sample(-0.2, [0.0, 1.0, 0.0], [0.0, 0.6, 0.0], [0.0, 0.5, 0.0]);
        let c = sample(0.05, [0.0, 0.0, 1.0], [0.0, 0.0, 0.9], [0.0, 0.0, 0.8]);
        let fwd = vec![a.clone(), b.clone(), c.clone()];
        let rev = vec![c, b, a];
        assert!(
            (grad_match_term(&fwd).unwrap() - grad_match_term(&rev).unwrap()).abs() < 1e-12
        );
        assert!((boundary_term(&fwd).unwrap() - boundary_term(&rev).unwrap()).abs() < 1e-12);
        assert!((area_term(&fwd, 1.0).unwrap() - area_term(&rev, 1.0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn without_curl_and_area_only_the_base_objective_remains() {
        // with the curl target off and the area term off, total reduces to
        // boundary + λ1·grad_match, term for term
        let mode = LossMode {
            curl_target: CurlTarget::Off,
            area_term: false,
            formulation: Formulation::Pinc,
        };
        let w = LossWeights::default();
        let surf = vec![sample(0.4, [0.0; 3], [0.0; 3], [0.0; 3]); 2];
        let mut c = sample(0.2, [1.0, 0.0, 0.0], [0.5, 0.0, 0.0], [0.4, 0.0, 0.0]);
        c.curl_g_tilde = [9.0, 9.0, 9.0]; // must be ignored
        let coll = vec![c; 2];
        let b = total_loss(&surf, &coll, &w, &mode).unwrap();
        assert_eq!(b.curl, 0.0);
        assert_eq!(b.area, 0.0);
        let expect = b.boundary + w.lambda1 * b.grad_match + w.lambda2 * b.aux_match;
        assert!((b.total - expect).abs() < 1e-15);
    }

    #[test]
    fn eikonal_split_uses_eta_and_ignores_the_rest() {
        let mode = LossMode {
            curl_target: CurlTarget::OnGTilde,
            area_term: true,
            formulation: Formulation::EikonalSplit,
        };
        let w = LossWeights::default();
        let surf = vec![sample(0.4, [0.0; 3], [0.0; 3], [0.0; 3]); 2];
        let coll = vec![sample(0.2, [1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0; 3]); 2];
        let b = total_loss(&surf, &coll, &w, &mode).unwrap();
        assert_eq!(b.curl, 0.0);
        assert_eq!(b.area, 0.0);
        assert_eq!(b.aux_match, 0.0);
        assert!((b.total - (0.4 + w.eta_baseline * 1.0)).abs() < 1e-15);
    }

    #[test]
    fn nan_terms_are_reported_as_numeric_faults() {
        let surf = vec![sample(f64::NAN, [0.0; 3], [0.0; 3], [0.0; 3])];
        let coll = vec![sample(0.0, [0.0; 3], [0.0; 3], [0.0; 3])];
        let err = total_loss(&surf, &coll, &LossWeights::default(), &LossMode::default())
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("boundary"), "fault names the term: {msg}");
    }
}
