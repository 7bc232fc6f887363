//! Nested automatic differentiation.
//!
//! Two layers compose here:
//!
//! - [`Jet3`] is a forward-mode scalar carrying a value and the three partial
//!   derivatives with respect to the spatial coordinates. Arithmetic on jets
//!   propagates derivatives by the chain rule, exactly.
//! - [`Tape`]/[`Var`] is a reverse-mode scalar engine. Every operation on a
//!   [`Var`] records its local partials; a backward sweep then yields the
//!   gradient of any recorded scalar with respect to every parameter leaf.
//!
//! The two nest through the [`Scalar`] trait: `Jet3<f64>` gives plain spatial
//! derivatives, `Jet3<Jet3<f64>>` gives second derivatives, and `Jet3<Var>`
//! gives spatial derivatives whose downstream use remains differentiable with
//! respect to network parameters. Code written once against [`Scalar`] serves
//! both the fast evaluation path and the recorded training path.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use crate::{Error, Result};

/// Scalar-like values that support the arithmetic the field and loss
/// constructions need. `value()` exposes the underlying primal so callers can
/// branch on magnitudes (projection and normalization guards) without
/// breaking derivative propagation on the taken branch.
pub trait Scalar:
    Clone
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn constant(c: f64) -> Self;
    fn value(&self) -> f64;
    fn sqrt(&self) -> Self;
    /// Absolute value with the subgradient convention sign(0) = 0.
    fn abs(&self) -> Self;
    fn tanh(&self) -> Self;
    fn exp(&self) -> Self;
    fn ln(&self) -> Self;
    fn sin(&self) -> Self;
    fn cos(&self) -> Self;
    /// Power with a constant exponent.
    fn powf(&self, e: f64) -> Self;
}

impl Scalar for f64 {
    fn constant(c: f64) -> Self {
        c
    }
    fn value(&self) -> f64 {
        *self
    }
    fn sqrt(&self) -> Self {
        f64::sqrt(*self)
    }
    fn abs(&self) -> Self {
        f64::abs(*self)
    }
    fn tanh(&self) -> Self {
        f64::tanh(*self)
    }
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
    fn ln(&self) -> Self {
        f64::ln(*self)
    }
    fn sin(&self) -> Self {
        f64::sin(*self)
    }
    fn cos(&self) -> Self {
        f64::cos(*self)
    }
    fn powf(&self, e: f64) -> Self {
        f64::powf(*self, e)
    }
}

// ---------------------------------------------------------------------------
// Reverse-mode tape
// ---------------------------------------------------------------------------

const NO_PARENT: u32 = u32::MAX;

/// One recorded primitive: up to two parents with the local partial of the
/// output with respect to each, evaluated at recording time.
#[derive(Clone, Copy)]
struct Node {
    pa: u32,
    wa: f64,
    pb: u32,
    wb: f64,
}

struct TapeInner {
    nodes: Vec<Node>,
    vals: Vec<f64>,
    /// (node index, parameter slot) pairs for leaves bound to the flat
    /// parameter vector.
    params: Vec<(u32, u32)>,
}

/// Append-only record of one forward computation. A tape lives for a single
/// batch evaluation and is dropped wholesale afterwards; no state crosses
/// optimization steps.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                vals: Vec::new(),
                params: Vec::new(),
            })),
        }
    }

    fn push(&self, val: f64, node: Node) -> Var {
        let mut t = self.inner.borrow_mut();
        let idx = t.nodes.len() as u32;
        t.nodes.push(node);
        t.vals.push(val);
        Var::Node(self.clone(), idx)
    }

    /// A differentiable leaf (an input or a bridged intermediate value).
    pub fn leaf(&self, val: f64) -> Var {
        self.push(
            val,
            Node {
                pa: NO_PARENT,
                wa: 0.0,
                pb: NO_PARENT,
                wb: 0.0,
            },
        )
    }

    /// A leaf bound to a slot of the flat parameter vector; backward sweeps
    /// accumulate its adjoint into that slot.
    pub fn param(&self, slot: usize, val: f64) -> Var {
        let v = self.leaf(val);
        if let Var::Node(_, idx) = &v {
            self.inner.borrow_mut().params.push((*idx, slot as u32));
        }
        v
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse sweep from `out`, seeded with `seed` (the adjoint of `out`
    /// itself). Returns the adjoint of every node on the tape.
    pub fn backward_seeded(&self, out: &Var, seed: f64) -> Result<Adjoints> {
        let idx = match out {
            Var::Node(t, idx) if Rc::ptr_eq(&t.inner, &self.inner) => *idx as usize,
            Var::Node(..) => {
                return Err(Error::Usage(
                    "backward: scalar was recorded on a different tape".into(),
                ))
            }
            Var::Const(_) => {
                return Err(Error::Usage("backward: scalar is not on the tape".into()))
            }
        };
        let t = self.inner.borrow();
        let mut adj = vec![0.0; t.nodes.len()];
        adj[idx] = seed;
        for i in (0..=idx).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let n = t.nodes[i];
            if n.pa != NO_PARENT {
                adj[n.pa as usize] += n.wa * a;
            }
            if n.pb != NO_PARENT {
                adj[n.pb as usize] += n.wb * a;
            }
        }
        Ok(Adjoints {
            tape: self.clone(),
            adj,
        })
    }

    pub fn backward(&self, out: &Var) -> Result<Adjoints> {
        self.backward_seeded(out, 1.0)
    }
}

/// Result of a backward sweep.
pub struct Adjoints {
    tape: Tape,
    adj: Vec<f64>,
}

impl Adjoints {
    /// Adjoint of a recorded variable (zero for constants).
    pub fn of(&self, v: &Var) -> f64 {
        match v {
            Var::Const(_) => 0.0,
            Var::Node(t, idx) => {
                debug_assert!(Rc::ptr_eq(&t.inner, &self.tape.inner));
                self.adj[*idx as usize]
            }
        }
    }

    /// Add the adjoints of all parameter leaves into the flat gradient.
    pub fn accumulate_params(&self, grad: &mut [f64]) {
        let t = self.tape.inner.borrow();
        for &(node, slot) in &t.params {
            grad[slot as usize] += self.adj[node as usize];
        }
    }
}

/// A reverse-mode scalar. `Const` never touches a tape, so expressions built
/// purely from constants record nothing.
#[derive(Clone)]
pub enum Var {
    Const(f64),
    Node(Tape, u32),
}

impl Var {
    fn val(&self) -> f64 {
        match self {
            Var::Const(c) => *c,
            Var::Node(t, idx) => t.inner.borrow().vals[*idx as usize],
        }
    }

    fn tape_of(a: &Var, b: &Var) -> Option<Tape> {
        match (a, b) {
            (Var::Node(t, _), Var::Node(u, _)) => {
                assert!(
                    Rc::ptr_eq(&t.inner, &u.inner),
                    "variables from different tapes"
                );
                Some(t.clone())
            }
            (Var::Node(t, _), _) | (_, Var::Node(t, _)) => Some(t.clone()),
            _ => None,
        }
    }

    fn idx(&self) -> u32 {
        match self {
            Var::Const(_) => NO_PARENT,
            Var::Node(_, idx) => *idx,
        }
    }

    fn binary(a: &Var, b: &Var, val: f64, wa: f64, wb: f64) -> Var {
        match Var::tape_of(a, b) {
            None => Var::Const(val),
            Some(t) => t.push(
                val,
                Node {
                    pa: a.idx(),
                    wa,
                    pb: b.idx(),
                    wb,
                },
            ),
        }
    }

    fn unary(a: &Var, val: f64, wa: f64) -> Var {
        match a {
            Var::Const(_) => Var::Const(val),
            Var::Node(t, idx) => t.push(
                val,
                Node {
                    pa: *idx,
                    wa,
                    pb: NO_PARENT,
                    wb: 0.0,
                },
            ),
        }
    }
}

impl Add for Var {
    type Output = Var;
    fn add(self, rhs: Var) -> Var {
        Var::binary(&self, &rhs, self.val() + rhs.val(), 1.0, 1.0)
    }
}

impl Sub for Var {
    type Output = Var;
    fn sub(self, rhs: Var) -> Var {
        Var::binary(&self, &rhs, self.val() - rhs.val(), 1.0, -1.0)
    }
}

impl Mul for Var {
    type Output = Var;
    fn mul(self, rhs: Var) -> Var {
        let (a, b) = (self.val(), rhs.val());
        Var::binary(&self, &rhs, a * b, b, a)
    }
}

impl Div for Var {
    type Output = Var;
    fn div(self, rhs: Var) -> Var {
        let (a, b) = (self.val(), rhs.val());
        Var::binary(&self, &rhs, a / b, 1.0 / b, -a / (b * b))
    }
}

impl Neg for Var {
    type Output = Var;
    fn neg(self) -> Var {
        let a = self.val();
        Var::unary(&self, -a, -1.0)
    }
}

impl Scalar for Var {
    fn constant(c: f64) -> Self {
        Var::Const(c)
    }
    fn value(&self) -> f64 {
        self.val()
    }
    fn sqrt(&self) -> Self {
        let s = self.val().sqrt();
        Var::unary(self, s, 0.5 / s)
    }
    fn abs(&self) -> Self {
        let a = self.val();
        let sign = if a > 0.0 {
            1.0
        } else if a < 0.0 {
            -1.0
        } else {
            0.0
        };
        Var::unary(self, a.abs(), sign)
    }
    fn tanh(&self) -> Self {
        let t = self.val().tanh();
        Var::unary(self, t, 1.0 - t * t)
    }
    fn exp(&self) -> Self {
        let e = self.val().exp();
        Var::unary(self, e, e)
    }
    fn ln(&self) -> Self {
        let a = self.val();
        Var::unary(self, a.ln(), 1.0 / a)
    }
    fn sin(&self) -> Self {
        let a = self.val();
        Var::unary(self, a.sin(), a.cos())
    }
    fn cos(&self) -> Self {
        let a = self.val();
        Var::unary(self, a.cos(), -a.sin())
    }
    fn powf(&self, e: f64) -> Self {
        let a = self.val();
        Var::unary(self, a.powf(e), e * a.powf(e - 1.0))
    }
}

// ---------------------------------------------------------------------------
// Forward-mode jets
// ---------------------------------------------------------------------------

/// Value plus its three spatial partial derivatives. Generic in the component
/// scalar so jets nest (second derivatives) and record (parameter gradients).
#[derive(Clone, Debug)]
pub struct Jet3<S> {
    pub v: S,
    pub d: [S; 3],
}

impl<S: Scalar> Jet3<S> {
    pub fn constant(c: f64) -> Self {
        Jet3 {
            v: S::constant(c),
            d: [S::constant(0.0), S::constant(0.0), S::constant(0.0)],
        }
    }

    pub fn from_scalar(v: S) -> Self {
        Jet3 {
            v,
            d: [S::constant(0.0), S::constant(0.0), S::constant(0.0)],
        }
    }

    /// A coordinate variable: value `v` seeded with unit tangent along `axis`.
    pub fn variable(v: f64, axis: usize) -> Self {
        let mut d = [S::constant(0.0), S::constant(0.0), S::constant(0.0)];
        d[axis] = S::constant(1.0);
        Jet3 {
            v: S::constant(v),
            d,
        }
    }

    /// Seed all three coordinates of a point at once.
    pub fn seed_point(x: [f64; 3]) -> [Self; 3] {
        [
            Self::variable(x[0], 0),
            Self::variable(x[1], 1),
            Self::variable(x[2], 2),
        ]
    }

    pub fn tangent(&self) -> [f64; 3] {
        [self.d[0].value(), self.d[1].value(), self.d[2].value()]
    }
}

impl Jet3<Jet3<f64>> {
    /// Seed a point for second-order differentiation: inner tangents carry
    /// first derivatives, outer tangents of inner jets carry the Hessian.
    pub fn seed_point_nested(x: [f64; 3]) -> [Self; 3] {
        std::array::from_fn(|k| {
            let mut d = [
                Jet3::<f64>::constant(0.0),
                Jet3::<f64>::constant(0.0),
                Jet3::<f64>::constant(0.0),
            ];
            d[k] = Jet3::<f64>::constant(1.0);
            Jet3 {
                v: Jet3::<f64>::variable(x[k], k),
                d,
            }
        })
    }
}

impl<S: Scalar> Add for Jet3<S> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Jet3 {
            v: self.v + rhs.v,
            d: [
                self.d[0].clone() + rhs.d[0].clone(),
                self.d[1].clone() + rhs.d[1].clone(),
                self.d[2].clone() + rhs.d[2].clone(),
            ],
        }
    }
}

impl<S: Scalar> Sub for Jet3<S> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Jet3 {
            v: self.v - rhs.v,
            d: [
                self.d[0].clone() - rhs.d[0].clone(),
                self.d[1].clone() - rhs.d[1].clone(),
                self.d[2].clone() - rhs.d[2].clone(),
            ],
        }
    }
}

impl<S: Scalar> Mul for Jet3<S> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        let d = std::array::from_fn(|i| {
            self.d[i].clone() * rhs.v.clone() + self.v.clone() * rhs.d[i].clone()
        });
        Jet3 {
            v: self.v * rhs.v,
            d,
        }
    }
}

impl<S: Scalar> Div for Jet3<S> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let q = self.v.clone() / rhs.v.clone();
        let d = std::array::from_fn(|i| {
            (self.d[i].clone() - q.clone() * rhs.d[i].clone()) / rhs.v.clone()
        });
        Jet3 { v: q, d }
    }
}

impl<S: Scalar> Neg for Jet3<S> {
    type Output = Self;
    fn neg(self) -> Self {
        Jet3 {
            v: -self.v,
            d: [
                -self.d[0].clone(),
                -self.d[1].clone(),
                -self.d[2].clone(),
            ],
        }
    }
}

impl<S: Scalar> Scalar for Jet3<S> {
    fn constant(c: f64) -> Self {
        Jet3::constant(c)
    }
    fn value(&self) -> f64 {
        self.v.value()
    }
    fn sqrt(&self) -> Self {
        let s = self.v.sqrt();
        let half = S::constant(0.5);
        let d = std::array::from_fn(|i| half.clone() * self.d[i].clone() / s.clone());
        Jet3 { v: s, d }
    }
    fn abs(&self) -> Self {
        let sign = if self.v.value() > 0.0 {
            1.0
        } else if self.v.value() < 0.0 {
            -1.0
        } else {
            0.0
        };
        let sg = S::constant(sign);
        Jet3 {
            v: self.v.abs(),
            d: std::array::from_fn(|i| sg.clone() * self.d[i].clone()),
        }
    }
    fn tanh(&self) -> Self {
        let t = self.v.tanh();
        let w = S::constant(1.0) - t.clone() * t.clone();
        Jet3 {
            v: t,
            d: std::array::from_fn(|i| w.clone() * self.d[i].clone()),
        }
    }
    fn exp(&self) -> Self {
        let e = self.v.exp();
        Jet3 {
            v: e.clone(),
            d: std::array::from_fn(|i| e.clone() * self.d[i].clone()),
        }
    }
    fn ln(&self) -> Self {
        Jet3 {
            v: self.v.ln(),
            d: std::array::from_fn(|i| self.d[i].clone() / self.v.clone()),
        }
    }
    fn sin(&self) -> Self {
        let c = self.v.cos();
        Jet3 {
            v: self.v.sin(),
            d: std::array::from_fn(|i| c.clone() * self.d[i].clone()),
        }
    }
    fn cos(&self) -> Self {
        let s = self.v.sin();
        Jet3 {
            v: self.v.cos(),
            d: std::array::from_fn(|i| -(s.clone() * self.d[i].clone())),
        }
    }
    fn powf(&self, e: f64) -> Self {
        let w = S::constant(e) * self.v.powf(e - 1.0);
        Jet3 {
            v: self.v.powf(e),
            d: std::array::from_fn(|i| w.clone() * self.d[i].clone()),
        }
    }
}

/// Numerically stable softplus `ln(1 + e^(beta x)) / beta`, with the chain
/// rule carried by the scalar type. The saturation branches keep `exp` in
/// range; each branch is exact for its own expression.
pub fn softplus<S: Scalar>(x: &S, beta: f64) -> S {
    let bx = beta * x.value();
    if bx > 30.0 {
        // ln(1+e^t) = t + e^(-t) up to O(e^(-2t)); e^(-30) is below f64 eps
        // relative to t.
        let neg = (-(x.clone()) * S::constant(beta)).exp();
        x.clone() + neg * S::constant(1.0 / beta)
    } else if bx < -30.0 {
        (x.clone() * S::constant(beta)).exp() * S::constant(1.0 / beta)
    } else {
        let e = (x.clone() * S::constant(beta)).exp();
        (S::constant(1.0) + e).ln() * S::constant(1.0 / beta)
    }
}

// ---------------------------------------------------------------------------
// Vector-calculus helpers
// ---------------------------------------------------------------------------

/// Curl of a vector field from its Jacobian, `jac[i][j] = dV_i/dx_j`.
pub fn curl(jac: &[[f64; 3]; 3]) -> [f64; 3] {
    [
        jac[2][1] - jac[1][2],
        jac[0][2] - jac[2][0],
        jac[1][0] - jac[0][1],
    ]
}

/// Divergence (trace of the Jacobian).
pub fn divergence(jac: &[[f64; 3]; 3]) -> f64 {
    jac[0][0] + jac[1][1] + jac[2][2]
}

/// Curl straight from the tangents of three field-component jets.
pub fn curl_of_jets<S: Scalar>(v: &[Jet3<S>; 3]) -> [S; 3] {
    [
        v[2].d[1].clone() - v[1].d[2].clone(),
        v[0].d[2].clone() - v[2].d[0].clone(),
        v[1].d[0].clone() - v[0].d[1].clone(),
    ]
}

/// Jacobian matrix of three field-component jets (component values).
pub fn jacobian_of_jets(v: &[Jet3<f64>; 3]) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| v[i].tangent())
}
