//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! Define-by-run: each operation records itself on a [`Tape`]; the tape is
//! rebuilt every iteration (no graph caching). [`Tape::backward`] replays the
//! records in reverse topological order exactly once, accumulating gradients
//! additively across fan-out. Tensors are immutable once written by their
//! producing op; a single graph runs on one logical thread, while inner loops
//! of the heavy ops fan out over disjoint output chunks (see [`crate::par`]).

mod blur;
mod conv;
mod gradcheck;
mod ops;

pub use blur::{BlurContext, LayeredBlurRecord};
pub use conv::{ConvCfg, PadMode};
pub use gradcheck::{compare_grads, numeric_grad, CoordSel, GradCheckReport};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::TensorData;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Elementwise binary op kind (broadcast per trailing-dimension rules).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

/// Activation kind with its parameter, if any.
#[derive(Debug, Clone, Copy)]
pub enum Act<T> {
    Relu,
    LeakyRelu(T),
    Sigmoid,
    Tanh,
    /// sin(omega * x)
    Sine(T),
}

#[derive(Debug, Clone, Copy)]
pub enum ReduceKind {
    Sum,
    Mean,
}

pub(crate) enum Op<T: Real> {
    Leaf,
    Binary {
        kind: BinKind,
        a: Var,
        b: Var,
    },
    /// y = mul*x + add
    Affine {
        x: Var,
        mul: T,
        add: T,
    },
    /// y = x^e for scalar e
    PowScalar {
        x: Var,
        e: T,
    },
    Activation {
        kind: Act<T>,
        x: Var,
    },
    /// Clamp with zero gradient outside [lo, hi], identity inside.
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Reduce {
        kind: ReduceKind,
        x: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Transpose2d {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    /// Concatenation along axis 0.
    Concat0 {
        parts: Vec<Var>,
    },
    /// Slice along axis 0.
    Slice0 {
        x: Var,
        start: usize,
        len: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        cfg: ConvCfg,
    },
    /// Bilinear 2x upsampling (half-pixel centers, edge clamp).
    Upsample2x {
        x: Var,
    },
    /// Per-channel normalization over spatial dims with learned scale/shift.
    InstanceNorm {
        x: Var,
        scale: Var,
        shift: Var,
        eps: T,
        /// (mean, 1/sqrt(var+eps)) per channel, cached by forward.
        stats: Vec<(T, T)>,
    },
    /// Smoothed anisotropic total variation of a 2D map, normalized by H*W.
    TotalVariation {
        x: Var,
        eps: T,
    },
    /// Differentiable layered-defocus rendering (camera model core).
    LayeredBlur {
        image: Var,
        psi: Var,
        rec: LayeredBlurRecord<T>,
    },
}

pub(crate) struct Node<T: Real> {
    pub value: TensorData<T>,
    pub requires_grad: bool,
    pub op: Op<T>,
}

/// Records executed operations; rebuilt each iteration.
pub struct Tape<T: Real> {
    pub(crate) nodes: Vec<Node<T>>,
    check_finite: bool,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
/// Only leaves hold gradients after the pass completes (intermediate buffers
/// are dropped as soon as they have been consumed).
pub struct Grads<T> {
    bufs: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.bufs.get(v.0).and_then(|b| b.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.bufs.get_mut(v.0).and_then(|b| b.take())
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: true,
            consumed: false,
        }
    }

    /// Disable the per-op finite check (verification harness keeps it on).
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a trainable leaf (gradient will be produced).
    pub fn leaf(&mut self, value: TensorData<T>) -> Var {
        self.push_node(value, true, Op::Leaf)
    }

    /// Register a constant leaf (no gradient).
    pub fn constant(&mut self, value: TensorData<T>) -> Var {
        self.push_node(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &TensorData<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push_node(&mut self, value: TensorData<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push_checked(
        &mut self,
        op_name: &'static str,
        value: TensorData<T>,
        requires_grad: bool,
        op: Op<T>,
    ) -> Result<Var> {
        if self.check_finite {
            if let Some(index) = value.first_non_finite() {
                return Err(Error::NonFinite {
                    context: op_name.to_string(),
                    index,
                });
            }
        }
        Ok(self.push_node(value, requires_grad, op))
    }

    /// Reverse pass from a scalar loss. Populates dLoss/dLeaf for every
    /// trainable leaf that participated. The tape is consumed: a second
    /// backward without rebuilding the graph is an error.
    pub fn backward(&mut self, loss: Var) -> Result<Grads<T>> {
        if self.consumed {
            return Err(Error::Numerics(
                "backward called twice on the same tape; rebuild the graph first".into(),
            ));
        }
        let loss_val = self.value(loss);
        if !loss_val.is_scalar() && loss_val.numel() != 1 {
            return Err(Error::shape(
                "backward",
                "scalar loss",
                crate::tensor::shape_str(loss_val.shape()),
            ));
        }
        self.consumed = true;

        let mut bufs: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        bufs[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                bufs[idx] = None;
                continue;
            }
            let Some(gout) = bufs[idx].take() else { continue };
            let is_leaf = matches!(self.nodes[idx].op, Op::Leaf);
            if is_leaf {
                bufs[idx] = Some(gout);
                continue;
            }
            self.backprop_node(idx, &gout, &mut bufs)?;
        }

        Ok(Grads { bufs })
    }

    /// Gradient buffer for `v`, creating a zero-filled one on first access.
    fn grad_buf<'a>(&self, bufs: &'a mut [Option<Vec<T>>], v: Var) -> &'a mut Vec<T> {
        let n = self.nodes[v.0].value.numel();
        bufs[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    fn wants_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, idx: usize, gout: &[T], bufs: &mut [Option<Vec<T>>]) -> Result<()> {
        // Split the dispatch by op family; the heavy ops live in their own
        // modules. Ops only push gradient into inputs that require it.
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => ops::backward_binary(self, idx, *kind, *a, *b, gout, bufs),
            Op::Affine { x, mul, .. } => {
                if self.wants_grad(*x) {
                    let gx = self.grad_buf(bufs, *x);
                    for (g, go) in gx.iter_mut().zip(gout) {
                        *g = *g + *go * *mul;
                    }
                }
            }
            Op::PowScalar { x, e } => ops::backward_pow_scalar(self, *x, *e, gout, bufs),
            Op::Activation { kind, x } => ops::backward_activation(self, idx, *kind, *x, gout, bufs),
            Op::Clamp { x, lo, hi } => ops::backward_clamp(self, *x, *lo, *hi, gout, bufs),
            Op::Reduce { kind, x } => ops::backward_reduce(self, *kind, *x, gout, bufs),
            Op::MatMul { a, b } => ops::backward_matmul(self, *a, *b, gout, bufs),
            Op::Transpose2d { x } => ops::backward_transpose2d(self, *x, gout, bufs),
            Op::Reshape { x } => {
                if self.wants_grad(*x) {
                    let gx = self.grad_buf(bufs, *x);
                    for (g, go) in gx.iter_mut().zip(gout) {
                        *g = *g + *go;
                    }
                }
            }
            Op::Concat0 { parts } => ops::backward_concat0(self, parts, gout, bufs),
            Op::Slice0 { x, start, len } => ops::backward_slice0(self, *x, *start, *len, gout, bufs),
            Op::Conv2d { x, w, cfg } => conv::backward_conv2d(self, *x, *w, *cfg, gout, bufs),
            Op::Upsample2x { x } => ops::backward_upsample2x(self, *x, gout, bufs),
            Op::InstanceNorm {
                x,
                scale,
                shift,
                stats,
                ..
            } => ops::backward_instance_norm(self, *x, *scale, *shift, stats, gout, bufs),
            Op::TotalVariation { x, eps } => ops::backward_tv(self, *x, *eps, gout, bufs),
            Op::LayeredBlur { image, psi, rec } => blur::backward_layered_blur(self, *image, *psi, rec, gout, bufs),
        }
        Ok(())
    }
}
