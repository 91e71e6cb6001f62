//! Dense f64 tensors with tape-based reverse-mode automatic differentiation.
//!
//! Every value in the pipeline (waveforms on the attack path, spectrogram
//! frames, network activations, losses) is a [`Tensor`]: a row-major flat
//! buffer plus shape. Operations on tensors that track gradients record a
//! node holding the parent handles and a backward closure; [`Tensor::backward`]
//! replays the recorded graph in reverse topological order exactly once per
//! node and accumulates gradients into every tracked ancestor.
//!
//! A tensor and its graph are confined to one thread (`Rc`/`RefCell`
//! internals, deliberately `!Send`). Frozen data may be copied across
//! threads by value.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

mod linalg;
mod norm;
mod shape_ops;

pub mod gradcheck;

pub use gradcheck::{grad_check, GradCheckReport};

/// Errors surfaced by tensor construction and operations.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    /// Extents of the operands do not line up for the requested op.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// The values or axes requested are outside the op's domain.
    #[error("domain error: {0}")]
    Domain(String),
    /// Input is too small or otherwise degenerate for the op to be defined.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    /// Caller violated an API contract (non-scalar backward root, bad label, ...).
    #[error("contract error: {0}")]
    Contract(String),
}

type BackwardFn = Box<dyn Fn(&[f64], &[Tensor])>;

struct Node {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct TensorInner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: Cell<bool>,
    node: Option<Node>,
}

/// N-dimensional dense value, optionally recorded on the gradient tape.
///
/// Cloning a `Tensor` clones the handle, not the buffer: clones share data
/// and gradient storage. This is how parameters are listed in several
/// places (model, optimizer, checkpoints) while remaining a single value.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with tape recording disabled on this thread.
///
/// Forward passes inside the closure build no graph, which makes frozen
/// teacher scoring and evaluation loops allocation-light.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    // ── Constructors ─────────────────────────────────────────────────

    /// Builds a tensor from a flat row-major buffer.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor, TensorError> {
        if numel_of(shape) != data.len() {
            return Err(TensorError::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel_of(shape),
                data.len()
            )));
        }
        Ok(Self::leaf(shape.to_vec(), data))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::leaf(shape.to_vec(), vec![0.0; numel_of(shape)])
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Self::leaf(shape.to_vec(), vec![value; numel_of(shape)])
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Tensor {
        Self::leaf(Vec::new(), vec![value])
    }

    /// Standard-normal fill from the caller's RNG.
    pub fn randn<R: rand::Rng>(shape: &[usize], rng: &mut R) -> Tensor {
        use rand_distr::{Distribution, StandardNormal};
        let data = (0..numel_of(shape))
            .map(|_| StandardNormal.sample(rng))
            .collect();
        Self::leaf(shape.to_vec(), data)
    }

    fn leaf(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor {
            inner: Rc::new(TensorInner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(false),
                node: None,
            }),
        }
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        debug_assert_eq!(numel_of(&shape), data.len());
        let record = grad_enabled() && parents.iter().any(|p| p.tracks_grad());
        Tensor {
            inner: Rc::new(TensorInner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(false),
                node: if record {
                    Some(Node { parents, backward })
                } else {
                    None
                },
            }),
        }
    }

    /// Marks a leaf tensor as trainable: backward will populate its gradient.
    pub fn trainable(self) -> Tensor {
        assert!(
            self.inner.node.is_none(),
            "only leaf tensors can be marked trainable"
        );
        self.inner.requires_grad.set(true);
        self
    }

    pub fn set_requires_grad(&self, on: bool) {
        assert!(
            self.inner.node.is_none(),
            "only leaf tensors can toggle requires_grad"
        );
        self.inner.requires_grad.set(on);
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// True when this tensor participates in gradient flow (trainable leaf
    /// or product of tracked inputs).
    pub(crate) fn tracks_grad(&self) -> bool {
        self.inner.requires_grad.get() || self.inner.node.is_some()
    }

    // ── Accessors ────────────────────────────────────────────────────

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.inner.shape)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Runs `f` over the flat data without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.inner.data.borrow())
    }

    /// Extracts the single element of a scalar (or one-element) tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() requires a one-element tensor");
        self.inner.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Overwrites the buffer of a leaf tensor in place (optimizer updates).
    ///
    /// Must not be called while a recorded graph still references the old
    /// values; the trainer drops each step's graph before updating.
    pub fn set_data(&self, new: &[f64]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), new.len(), "set_data length mismatch");
        d.copy_from_slice(new);
    }

    /// Same data, detached from the tape and non-trainable.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.inner.shape.clone(), self.to_vec())
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut gr = self.inner.grad.borrow_mut();
        match gr.as_mut() {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(g) {
                    *a += *b;
                }
            }
            None => *gr = Some(g.to_vec()),
        }
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar root.
    ///
    /// Populates `grad` on every tracked ancestor. Visits each recorded node
    /// exactly once; repeated calls without `zero_grad` accumulate.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar root, got shape {:?}",
                self.shape()
            )));
        }
        if !self.tracks_grad() {
            return Err(TensorError::Contract(
                "backward root is not on the tape (no tracked inputs)".into(),
            ));
        }
        self.accumulate_grad(&[1.0]);
        let order = topo_order(self);
        for t in order.iter().rev() {
            if let Some(node) = &t.inner.node {
                let g = t.inner.grad.borrow().clone();
                if let Some(g) = g {
                    (node.backward)(&g, &node.parents);
                }
            }
        }
        // Intermediate gradients are scratch space for the sweep; dropping
        // them here keeps only leaf gradients, so a repeated backward adds
        // exactly one more unit of seed gradient.
        for t in &order {
            if t.inner.node.is_some() {
                *t.inner.grad.borrow_mut() = None;
            }
        }
        Ok(())
    }

    // ── Elementwise ops ──────────────────────────────────────────────

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        binary_same_shape(self, other, "add", |x, y| x + y, |g, _, _| {
            (g.to_vec(), g.to_vec())
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        binary_same_shape(self, other, "sub", |x, y| x - y, |g, _, _| {
            (g.to_vec(), g.iter().map(|v| -v).collect())
        })
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        binary_same_shape(
            self,
            other,
            "mul",
            |x, y| x * y,
            |g, x, y| {
                (
                    g.iter().zip(y).map(|(gv, yv)| gv * yv).collect(),
                    g.iter().zip(x).map(|(gv, xv)| gv * xv).collect(),
                )
            },
        )
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.with_data(|d| d.iter().map(|v| v * c).collect());
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, parents| {
                if parents[0].tracks_grad() {
                    let gx: Vec<f64> = g.iter().map(|v| v * c).collect();
                    parents[0].accumulate_grad(&gx);
                }
            }),
        )
    }

    pub fn add_const(&self, c: f64) -> Tensor {
        let data = self.with_data(|d| d.iter().map(|v| v + c).collect());
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, parents| {
                if parents[0].tracks_grad() {
                    parents[0].accumulate_grad(g);
                }
            }),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    /// Multiplies every element by a one-element tensor (learnable scalar).
    pub fn mul_scalar_tensor(&self, s: &Tensor) -> Result<Tensor, TensorError> {
        if s.numel() != 1 {
            return Err(TensorError::Dimension(format!(
                "mul_scalar_tensor expects a one-element scalar, got {:?}",
                s.shape()
            )));
        }
        let sv = s.item();
        let data = self.with_data(|d| d.iter().map(|v| v * sv).collect());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), s.clone()],
            Box::new(move |g, parents| {
                if parents[0].tracks_grad() {
                    let gx: Vec<f64> = g.iter().map(|v| v * sv).collect();
                    parents[0].accumulate_grad(&gx);
                }
                if parents[1].tracks_grad() {
                    let gs = parents[0].with_data(|x| {
                        g.iter().zip(x).map(|(gv, xv)| gv * xv).sum::<f64>()
                    });
                    parents[1].accumulate_grad(&[gs]);
                }
            }),
        ))
    }

    /// Adds a one-element tensor (learnable scalar) to every element.
    pub fn add_scalar_tensor(&self, s: &Tensor) -> Result<Tensor, TensorError> {
        if s.numel() != 1 {
            return Err(TensorError::Dimension(format!(
                "add_scalar_tensor expects a one-element scalar, got {:?}",
                s.shape()
            )));
        }
        let sv = s.item();
        let data = self.with_data(|d| d.iter().map(|v| v + sv).collect());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), s.clone()],
            Box::new(move |g, parents| {
                if parents[0].tracks_grad() {
                    parents[0].accumulate_grad(g);
                }
                if parents[1].tracks_grad() {
                    parents[1].accumulate_grad(&[g.iter().sum::<f64>()]);
                }
            }),
        ))
    }

    pub fn relu(&self) -> Tensor {
        let data = self.with_data(|d| d.iter().map(|v| v.max(0.0)).collect());
        unary_borrow_parent(self, data, |g, x| {
            g.iter()
                .zip(x)
                .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                .collect()
        })
    }

    pub fn sigmoid(&self) -> Tensor {
        let out: Vec<f64> = self.with_data(|d| {
            d.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect()
        });
        unary_capture_out(self, out, |g, y| {
            g.iter().zip(y).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect()
        })
    }

    pub fn tanh(&self) -> Tensor {
        let out: Vec<f64> = self.with_data(|d| d.iter().map(|v| v.tanh()).collect());
        unary_capture_out(self, out, |g, y| {
            g.iter().zip(y).map(|(gv, yv)| gv * (1.0 - yv * yv)).collect()
        })
    }

    pub fn exp(&self) -> Tensor {
        let out: Vec<f64> = self.with_data(|d| d.iter().map(|v| v.exp()).collect());
        unary_capture_out(self, out, |g, y| {
            g.iter().zip(y).map(|(gv, yv)| gv * yv).collect()
        })
    }

    pub fn sqrt(&self) -> Tensor {
        let out: Vec<f64> = self.with_data(|d| d.iter().map(|v| v.sqrt()).collect());
        unary_capture_out(self, out, |g, y| {
            g.iter()
                .zip(y)
                .map(|(gv, yv)| gv * 0.5 / yv.max(1e-300))
                .collect()
        })
    }

    /// ln(x + offset), the log-compression used on mel energies.
    pub fn ln_offset(&self, offset: f64) -> Tensor {
        let data = self.with_data(|d| d.iter().map(|v| (v + offset).ln()).collect());
        unary_borrow_parent(self, data, move |g, x| {
            g.iter().zip(x).map(|(gv, xv)| gv / (xv + offset)).collect()
        })
    }
}

fn unary_borrow_parent(
    x: &Tensor,
    out: Vec<f64>,
    grad_fn: impl Fn(&[f64], &[f64]) -> Vec<f64> + 'static,
) -> Tensor {
    Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |g, parents| {
            if parents[0].tracks_grad() {
                let gx = parents[0].with_data(|xd| grad_fn(g, xd));
                parents[0].accumulate_grad(&gx);
            }
        }),
    )
}

fn unary_capture_out(
    x: &Tensor,
    out: Vec<f64>,
    grad_fn: impl Fn(&[f64], &[f64]) -> Vec<f64> + 'static,
) -> Tensor {
    let saved = out.clone();
    Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |g, parents| {
            if parents[0].tracks_grad() {
                let gx = grad_fn(g, &saved);
                parents[0].accumulate_grad(&gx);
            }
        }),
    )
}

fn binary_same_shape(
    a: &Tensor,
    b: &Tensor,
    name: &str,
    fwd: impl Fn(f64, f64) -> f64,
    bwd: impl Fn(&[f64], &[f64], &[f64]) -> (Vec<f64>, Vec<f64>) + 'static,
) -> Result<Tensor, TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::Dimension(format!(
            "{name}: shape {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.with_data(|x| b.with_data(|y| x.iter().zip(y).map(|(u, v)| fwd(*u, *v)).collect()));
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g, parents| {
            let need_a = parents[0].tracks_grad();
            let need_b = parents[1].tracks_grad();
            if !need_a && !need_b {
                return;
            }
            let (ga, gb) = parents[0]
                .with_data(|x| parents[1].with_data(|y| bwd(g, x, y)));
            if need_a {
                parents[0].accumulate_grad(&ga);
            }
            if need_b {
                parents[1].accumulate_grad(&gb);
            }
        }),
    ))
}

/// Deterministic post-order over the recorded graph (parents before children).
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    use std::collections::HashSet;
    let mut order = Vec::new();
    let mut visited: HashSet<*const TensorInner> = HashSet::new();
    // Iterative DFS; the stack holds (tensor, next-parent index).
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    visited.insert(Rc::as_ptr(&root.inner));
    while let Some((t, idx)) = stack.pop() {
        let parent = t
            .inner
            .node
            .as_ref()
            .and_then(|n| n.parents.get(idx))
            .cloned();
        match parent {
            Some(p) => {
                stack.push((t, idx + 1));
                if p.inner.node.is_some() && visited.insert(Rc::as_ptr(&p.inner)) {
                    stack.push((p, 0));
                }
            }
            None => order.push(t),
        }
    }
    order
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad.get())
            .field("on_tape", &self.inner.node.is_some())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(matches!(
            Tensor::from_vec(&[2, 3], vec![1.0; 5]),
            Err(TensorError::Dimension(_))
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let x = Tensor::from_vec(&[4], vec![1.0, -2.0, 3.0, 0.5])
            .unwrap()
            .trainable();
        let loss = x.reduce_sum(&[0]).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let x = Tensor::zeros(&[3]).trainable();
        let y = x.scale(2.0);
        assert!(matches!(y.backward(), Err(TensorError::Contract(_))));
    }

    #[test]
    fn disconnected_parameter_grad_stays_none() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().trainable();
        let unused = Tensor::from_vec(&[2], vec![5.0, 5.0]).unwrap().trainable();
        let loss = x.mul(&x).unwrap().reduce_sum(&[0]).unwrap();
        loss.backward().unwrap();
        assert!(unused.grad().is_none());
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap().trainable();
        let loss = x.reduce_sum(&[0]).unwrap();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn backward_is_deterministic_bitwise() {
        use rand::SeedableRng;
        let run = || {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
            let x = Tensor::randn(&[6, 5], &mut rng).trainable();
            let w = Tensor::randn(&[5, 4], &mut rng).trainable();
            let y = x.matmul(&w).unwrap().tanh();
            let loss = y.mul(&y).unwrap().reduce_mean(&[0, 1]).unwrap();
            loss.backward().unwrap();
            (x.grad().unwrap(), w.grad().unwrap())
        };
        let (gx1, gw1) = run();
        let (gx2, gw2) = run();
        assert!(gx1.iter().zip(&gx2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(gw1.iter().zip(&gw2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn no_grad_suppresses_taping() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().trainable();
        let y = no_grad(|| x.scale(3.0));
        assert!(!y.tracks_grad());
    }

    #[test]
    fn shared_subexpression_visited_once_but_grad_correct() {
        // loss = sum(x * x) with both operands the same handle.
        let x = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap().trainable();
        let sq = x.mul(&x).unwrap();
        let loss = sq.reduce_sum(&[0]).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
    }
}
