//! Forward constructors and backward rules for the elementwise, activation,
//! reduction, and structural ops.

use super::{Act, BinKind, Op, ReduceKind, Tape, Var};
use crate::error::{Error, Result};
use crate::par;
use crate::scalar::Real;
use crate::tensor::{shape_str, TensorData};

// ── Broadcasting ─────────────────────────────────────────────────────

/// Trailing-dimension broadcast plan between two shapes.
pub(crate) struct Bcast {
    pub out_shape: Vec<usize>,
    a_str: Vec<usize>,
    b_str: Vec<usize>,
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0; shape.len()];
    let mut acc = 1;
    for (i, &d) in shape.iter().enumerate().rev() {
        s[i] = acc;
        acc *= d;
    }
    s
}

impl Bcast {
    pub fn new(a: &[usize], b: &[usize]) -> Option<Bcast> {
        let nd = a.len().max(b.len());
        let mut out = vec![0usize; nd];
        let get = |s: &[usize], i: usize| -> usize {
            let off = nd - s.len();
            if i < off {
                1
            } else {
                s[i - off]
            }
        };
        for i in 0..nd {
            let (da, db) = (get(a, i), get(b, i));
            out[i] = if da == db {
                da
            } else if da == 1 {
                db
            } else if db == 1 {
                da
            } else {
                return None;
            };
        }
        let full_a = contiguous_strides(a);
        let full_b = contiguous_strides(b);
        let mut a_str = vec![0usize; nd];
        let mut b_str = vec![0usize; nd];
        let (off_a, off_b) = (nd - a.len(), nd - b.len());
        for i in 0..nd {
            if i >= off_a && a[i - off_a] != 1 {
                a_str[i] = full_a[i - off_a];
            }
            if i >= off_b && b[i - off_b] != 1 {
                b_str[i] = full_b[i - off_b];
            }
        }
        Some(Bcast { out_shape: out, a_str, b_str })
    }

    pub fn numel(&self) -> usize {
        self.out_shape.iter().product()
    }

    /// Visit every output element with flat indices (out, a, b).
    pub fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let nd = self.out_shape.len();
        if nd == 0 {
            f(0, 0, 0);
            return;
        }
        let mut ctr = vec![0usize; nd];
        let (mut ia, mut ib) = (0usize, 0usize);
        let n = self.numel();
        for io in 0..n {
            f(io, ia, ib);
            for d in (0..nd).rev() {
                ctr[d] += 1;
                ia += self.a_str[d];
                ib += self.b_str[d];
                if ctr[d] < self.out_shape[d] {
                    break;
                }
                ia -= self.a_str[d] * self.out_shape[d];
                ib -= self.b_str[d] * self.out_shape[d];
                ctr[d] = 0;
            }
        }
    }
}

#[inline(always)]
fn apply<T: Real>(kind: BinKind, a: T, b: T) -> T {
    match kind {
        BinKind::Add => a + b,
        BinKind::Sub => a - b,
        BinKind::Mul => a * b,
        BinKind::Div => a / b,
        BinKind::Pow => a.powf(b),
    }
}

/// Structural broadcast patterns with dedicated fast paths. `Block` covers
/// per-channel bias shapes ([C] or [C,1,..,1] against [C, rest..]): operand b
/// is constant over contiguous blocks of a.
enum BPat {
    Same,
    ScalarA,
    ScalarB,
    /// b[i] applies to a-block i of length `block`.
    BlockB { block: usize },
    /// b is a vector along a's last dim: b[j] applies to column j of each row.
    TailB { n: usize },
    Generic,
}

fn classify(a: &[usize], b: &[usize]) -> BPat {
    if a == b {
        return BPat::Same;
    }
    let numel = |s: &[usize]| s.iter().product::<usize>();
    if numel(b) == 1 {
        return BPat::ScalarB;
    }
    if numel(a) == 1 {
        return BPat::ScalarA;
    }
    // [C, rest..] vs [C] or [C, 1, 1, ..]: channel-major bias.
    if !a.is_empty() && !b.is_empty() && b[0] == a[0] && b[1..].iter().all(|&d| d == 1) {
        return BPat::BlockB {
            block: a[1..].iter().product::<usize>().max(1),
        };
    }
    // [rows.., n] vs [n]: row-vector bias.
    if b.len() == 1 && a.last() == Some(&b[0]) {
        return BPat::TailB { n: b[0] };
    }
    BPat::Generic
}

// ── Forward constructors ─────────────────────────────────────────────

impl<T: Real> Tape<T> {
    fn binary(&mut self, kind: BinKind, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let (ad, bd) = (av.data(), bv.data());
        let out = match classify(av.shape(), bv.shape()) {
            BPat::Same => {
                let data: Vec<T> = ad.iter().zip(bd).map(|(&x, &y)| apply(kind, x, y)).collect();
                TensorData::new(av.shape().to_vec(), data)
            }
            BPat::ScalarB => {
                let y = bd[0];
                TensorData::new(av.shape().to_vec(), ad.iter().map(|&x| apply(kind, x, y)).collect())
            }
            BPat::ScalarA => {
                let x = ad[0];
                TensorData::new(bv.shape().to_vec(), bd.iter().map(|&y| apply(kind, x, y)).collect())
            }
            BPat::BlockB { block } => {
                let mut data = vec![T::zero(); ad.len()];
                for (ci, chunk) in data.chunks_mut(block).enumerate() {
                    let y = bd[ci];
                    for (o, &x) in chunk.iter_mut().zip(&ad[ci * block..(ci + 1) * block]) {
                        *o = apply(kind, x, y);
                    }
                }
                TensorData::new(av.shape().to_vec(), data)
            }
            BPat::TailB { n } => {
                let mut data = vec![T::zero(); ad.len()];
                for (r, chunk) in data.chunks_mut(n).enumerate() {
                    for (j, o) in chunk.iter_mut().enumerate() {
                        *o = apply(kind, ad[r * n + j], bd[j]);
                    }
                }
                TensorData::new(av.shape().to_vec(), data)
            }
            BPat::Generic => {
                let bc = Bcast::new(av.shape(), bv.shape()).ok_or_else(|| {
                    Error::shape(name, "broadcastable shapes", format!("{:?} vs {:?}", av.shape(), bv.shape()))
                })?;
                let mut data = vec![T::zero(); bc.numel()];
                bc.for_each(|io, ia, ib| data[io] = apply(kind, ad[ia], bd[ib]));
                TensorData::new(bc.out_shape.clone(), data)
            }
        };
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push_checked(name, out, rg, Op::Binary { kind, a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b, "div")
    }

    /// Elementwise a^b with tensor exponent. Requires a > 0 wherever the
    /// exponent gradient is needed.
    pub fn pow(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Pow, a, b, "pow")
    }

    /// y = mul*x + add.
    pub fn affine(&mut self, x: Var, mul: T, add: T) -> Result<Var> {
        let v = self.value(x);
        let out = TensorData::new(v.shape().to_vec(), v.data().iter().map(|&t| mul * t + add).collect());
        let rg = self.requires_grad(x);
        self.push_checked("affine", out, rg, Op::Affine { x, mul, add })
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        self.affine(x, T::one(), s)
    }

    pub fn mul_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        self.affine(x, s, T::zero())
    }

    /// y = x^e for a scalar exponent.
    pub fn pow_scalar(&mut self, x: Var, e: T) -> Result<Var> {
        let v = self.value(x);
        let out = TensorData::new(v.shape().to_vec(), v.data().iter().map(|&t| t.powf(e)).collect());
        let rg = self.requires_grad(x);
        self.push_checked("pow_scalar", out, rg, Op::PowScalar { x, e })
    }

    pub fn activation(&mut self, kind: Act<T>, x: Var) -> Result<Var> {
        let v = self.value(x);
        let data: Vec<T> = match kind {
            Act::Relu => v.data().iter().map(|&t| if t > T::zero() { t } else { T::zero() }).collect(),
            Act::LeakyRelu(alpha) => v.data().iter().map(|&t| if t > T::zero() { t } else { alpha * t }).collect(),
            Act::Sigmoid => v.data().iter().map(|&t| T::one() / (T::one() + (-t).exp())).collect(),
            Act::Tanh => v.data().iter().map(|&t| t.tanh()).collect(),
            Act::Sine(omega) => v.data().iter().map(|&t| (omega * t).sin()).collect(),
        };
        let out = TensorData::new(v.shape().to_vec(), data);
        let rg = self.requires_grad(x);
        self.push_checked("activation", out, rg, Op::Activation { kind, x })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(Act::Relu, x)
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: T) -> Result<Var> {
        self.activation(Act::LeakyRelu(alpha), x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(Act::Sigmoid, x)
    }

    pub fn tanh_act(&mut self, x: Var) -> Result<Var> {
        self.activation(Act::Tanh, x)
    }

    pub fn sine(&mut self, x: Var, omega: T) -> Result<Var> {
        self.activation(Act::Sine(omega), x)
    }

    /// Clamp to [lo, hi]; gradient is identity inside (inclusive) and zero outside.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        let v = self.value(x);
        let out = TensorData::new(
            v.shape().to_vec(),
            v.data().iter().map(|&t| if t < lo { lo } else if t > hi { hi } else { t }).collect(),
        );
        let rg = self.requires_grad(x);
        self.push_checked("clamp", out, rg, Op::Clamp { x, lo, hi })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum();
        let rg = self.requires_grad(x);
        self.push_checked("sum", TensorData::scalar(s), rg, Op::Reduce { kind: ReduceKind::Sum, x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(Error::shape("mean", "non-empty tensor", "0 elements"));
        }
        let s: T = v.data().iter().copied().sum();
        let m = s / T::of_f64(v.numel() as f64);
        let rg = self.requires_grad(x);
        self.push_checked("mean", TensorData::scalar(m), rg, Op::Reduce { kind: ReduceKind::Mean, x })
    }

    /// (m x k) @ (k x n) -> (m x n).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let (m, k) = match av.shape() {
            [m, k] => (*m, *k),
            s => return Err(Error::shape("matmul", "2D lhs", shape_str(s))),
        };
        let (k2, n) = match bv.shape() {
            [k2, n] => (*k2, *n),
            s => return Err(Error::shape("matmul", "2D rhs", shape_str(s))),
        };
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dim {}", k), format!("{}", k2)));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_rowblock(m, k, n, av.data(), k, 1, bv.data(), n, 1, &mut out, false);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push_checked("matmul", TensorData::new(vec![m, n], out), rg, Op::MatMul { a, b })
    }

    pub fn transpose2d(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let (r, c) = match v.shape() {
            [r, c] => (*r, *c),
            s => return Err(Error::shape("transpose2d", "2D tensor", shape_str(s))),
        };
        let d = v.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let rg = self.requires_grad(x);
        self.push_checked("transpose2d", TensorData::new(vec![c, r], out), rg, Op::Transpose2d { x })
    }

    /// Same data, new shape (zero-copy).
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        let rg = self.requires_grad(x);
        // Reshape cannot introduce non-finite values; skip the scan.
        Ok(self.push_node(out, rg, Op::Reshape { x }))
    }

    /// Concatenate along axis 0. All trailing dims must match.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat0", "at least one part", "0 parts"));
        }
        let first = self.value(parts[0]).shape().to_vec();
        let mut c0 = 0usize;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(Error::shape("concat0", shape_str(&first), shape_str(s)));
            }
            c0 += s[0];
        }
        let mut shape = first.clone();
        shape[0] = c0;
        let mut data = Vec::with_capacity(shape.iter().product());
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        self.push_checked("concat0", TensorData::new(shape, data), rg, Op::Concat0 { parts: parts.to_vec() })
    }

    /// Slice `len` entries along axis 0 starting at `start`.
    pub fn slice0(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let s = v.shape();
        if s.is_empty() || start + len > s[0] {
            return Err(Error::shape(
                "slice0",
                format!("axis0 range within {:?}", s),
                format!("{}..{}", start, start + len),
            ));
        }
        let inner: usize = s[1..].iter().product();
        let mut shape = s.to_vec();
        shape[0] = len;
        let data = v.data()[start * inner..(start + len) * inner].to_vec();
        let rg = self.requires_grad(x);
        self.push_checked("slice0", TensorData::new(shape, data), rg, Op::Slice0 { x, start, len })
    }

    /// Bilinear 2x upsampling with half-pixel centers and edge clamping:
    /// output sample o reads input coordinate (o + 0.5)/2 - 0.5. Constants are
    /// preserved exactly; the backward pass is the transpose of the
    /// interpolation operator.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).clone();
        let (c, h, w) = match v.shape() {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::shape("upsample2x", "C x H x W", shape_str(s))),
        };
        if h < 2 || w < 2 {
            return Err(Error::shape("upsample2x", "spatial extents >= 2", format!("{}x{}", h, w)));
        }
        let ymap = up_map::<T>(h);
        let xmap = up_map::<T>(w);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); c * oh * ow];
        let src = v.data();
        par::for_each_chunk_mut(&mut out, oh * ow, |ci, chunk| {
            let plane = &src[ci * h * w..(ci + 1) * h * w];
            for oy in 0..oh {
                let (y0, y1, wy0, wy1) = ymap[oy];
                let row = &mut chunk[oy * ow..(oy + 1) * ow];
                for (ox, r) in row.iter_mut().enumerate() {
                    let (x0, x1, wx0, wx1) = xmap[ox];
                    *r = wy0 * (wx0 * plane[y0 * w + x0] + wx1 * plane[y0 * w + x1])
                        + wy1 * (wx0 * plane[y1 * w + x0] + wx1 * plane[y1 * w + x1]);
                }
            }
        });
        let rg = self.requires_grad(x);
        self.push_checked("upsample2x", TensorData::new(vec![c, oh, ow], out), rg, Op::Upsample2x { x })
    }

    /// Per-channel standardization over spatial dims (single instance),
    /// then y = xhat*scale_c + shift_c. Fully differentiable.
    pub fn instance_norm(&mut self, x: Var, scale: Var, shift: Var, eps: T) -> Result<Var> {
        let v = self.value(x).clone();
        let (c, h, w) = match v.shape() {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::shape("instance_norm", "C x H x W", shape_str(s))),
        };
        for (name, var) in [("scale", scale), ("shift", shift)] {
            let s = self.value(var).shape();
            if s != [c] {
                return Err(Error::shape("instance_norm", format!("{} of shape [{}]", name, c), shape_str(s)));
            }
        }
        let hw = h * w;
        let n = T::of_f64(hw as f64);
        let sc = self.value(scale).clone();
        let sh = self.value(shift).clone();
        let mut stats = Vec::with_capacity(c);
        let mut out = vec![T::zero(); c * hw];
        for ci in 0..c {
            let plane = &v.data()[ci * hw..(ci + 1) * hw];
            let mean = plane.iter().copied().sum::<T>() / n;
            let var = plane.iter().map(|&t| (t - mean) * (t - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            stats.push((mean, inv));
            let (g, b) = (sc.data()[ci], sh.data()[ci]);
            for (o, &t) in out[ci * hw..(ci + 1) * hw].iter_mut().zip(plane) {
                *o = (t - mean) * inv * g + b;
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(scale) || self.requires_grad(shift);
        self.push_checked(
            "instance_norm",
            TensorData::new(vec![c, h, w], out),
            rg,
            Op::InstanceNorm { x, scale, shift, eps, stats },
        )
    }

    /// Smoothed anisotropic total variation of an H x W map: mean over H*W of
    /// sqrt(d^2 + eps^2) for forward differences d along x and y.
    pub fn total_variation(&mut self, x: Var, eps: T) -> Result<Var> {
        let v = self.value(x);
        let (h, w) = match v.shape() {
            [h, w] => (*h, *w),
            s => return Err(Error::shape("total_variation", "H x W map", shape_str(s))),
        };
        let d = v.data();
        let e2 = eps * eps;
        let mut acc = T::zero();
        for y in 0..h {
            for xx in 0..w {
                if xx + 1 < w {
                    let dx = d[y * w + xx + 1] - d[y * w + xx];
                    acc = acc + (dx * dx + e2).sqrt();
                }
                if y + 1 < h {
                    let dy = d[(y + 1) * w + xx] - d[y * w + xx];
                    acc = acc + (dy * dy + e2).sqrt();
                }
            }
        }
        let out = acc / T::of_f64((h * w) as f64);
        let rg = self.requires_grad(x);
        self.push_checked("total_variation", TensorData::scalar(out), rg, Op::TotalVariation { x, eps })
    }
}

/// 1D bilinear 2x upsample map: output index -> (i0, i1, w0, w1).
fn up_map<T: Real>(n: usize) -> Vec<(usize, usize, T, T)> {
    (0..2 * n)
        .map(|o| {
            let u = (o as f64 + 0.5) / 2.0 - 0.5;
            let f = u.floor();
            let a = u - f;
            let i0 = (f.max(0.0) as usize).min(n - 1);
            let i1 = ((f + 1.0).max(0.0) as usize).min(n - 1);
            (i0, i1, T::of_f64(1.0 - a), T::of_f64(a))
        })
        .collect()
}

/// Row-block-parallel GEMM: c(m x n, contiguous) = a @ b with arbitrary
/// operand strides. `accumulate` adds into c instead of overwriting.
pub(crate) fn matmul_rowblock<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_rs: usize,
    a_cs: usize,
    b: &[T],
    b_rs: usize,
    b_cs: usize,
    c: &mut [T],
    accumulate: bool,
) {
    const BLOCKS: usize = 8;
    let rows_per = m.div_ceil(BLOCKS).max(1);
    par::for_each_chunk_mut(c, rows_per * n, |bi, chunk| {
        let r0 = bi * rows_per;
        let rows = chunk.len() / n;
        T::gemm_st(rows, k, n, &a[r0 * a_rs..], a_rs, a_cs, b, b_rs, b_cs, chunk, accumulate);
    });
}

// ── Backward rules ───────────────────────────────────────────────────

pub(crate) fn backward_binary<T: Real>(
    tape: &Tape<T>,
    idx: usize,
    kind: BinKind,
    a: Var,
    b: Var,
    gout: &[T],
    bufs: &mut [Option<Vec<T>>],
) {
    let av = tape.value(a).clone();
    let bv = tape.value(b).clone();
    let yv = tape.nodes[idx].value.clone();
    let (ad, bd, yd) = (av.data(), bv.data(), yv.data());

    // d(out)/da and d(out)/db as closures over element values.
    let da = |x: T, y: T, out: T| -> T {
        match kind {
            BinKind::Add | BinKind::Sub => T::one(),
            BinKind::Mul => y,
            BinKind::Div => T::one() / y,
            BinKind::Pow => {
                let _ = out;
                y * x.powf(y - T::one())
            }
        }
    };
    let db = |x: T, y: T, out: T| -> T {
        match kind {
            BinKind::Add => T::one(),
            BinKind::Sub => -T::one(),
            BinKind::Mul => x,
            BinKind::Div => -x / (y * y),
            BinKind::Pow => out * x.ln(),
        }
    };

    match classify(av.shape(), bv.shape()) {
        BPat::Same => {
            if tape.wants_grad(a) {
                let ga = tape.grad_buf(bufs, a);
                for i in 0..gout.len() {
                    ga[i] = ga[i] + gout[i] * da(ad[i], bd[i], yd[i]);
                }
            }
            if tape.wants_grad(b) {
                let gb = tape.grad_buf(bufs, b);
                for i in 0..gout.len() {
                    gb[i] = gb[i] + gout[i] * db(ad[i], bd[i], yd[i]);
                }
            }
        }
        BPat::ScalarB => {
            let y = bd[0];
            if tape.wants_grad(a) {
                let ga = tape.grad_buf(bufs, a);
                for i in 0..gout.len() {
                    ga[i] = ga[i] + gout[i] * da(ad[i], y, yd[i]);
                }
            }
            if tape.wants_grad(b) {
                let mut acc = T::zero();
                for i in 0..gout.len() {
                    acc = acc + gout[i] * db(ad[i], y, yd[i]);
                }
                let gb = tape.grad_buf(bufs, b);
                gb[0] = gb[0] + acc;
            }
        }
        BPat::ScalarA => {
            let x = ad[0];
            if tape.wants_grad(a) {
                let mut acc = T::zero();
                for i in 0..gout.len() {
                    acc = acc + gout[i] * da(x, bd[i], yd[i]);
                }
                let ga = tape.grad_buf(bufs, a);
                ga[0] = ga[0] + acc;
            }
            if tape.wants_grad(b) {
                let gb = tape.grad_buf(bufs, b);
                for i in 0..gout.len() {
                    gb[i] = gb[i] + gout[i] * db(x, bd[i], yd[i]);
                }
            }
        }
        BPat::BlockB { block } => {
            if tape.wants_grad(a) {
                let ga = tape.grad_buf(bufs, a);
                for ci in 0..bd.len() {
                    let y = bd[ci];
                    for i in ci * block..(ci + 1) * block {
                        ga[i] = ga[i] + gout[i] * da(ad[i], y, yd[i]);
                    }
                }
            }
            if tape.wants_grad(b) {
                let gb = tape.grad_buf(bufs, b);
                for ci in 0..bd.len() {
                    let y = bd[ci];
                    let mut acc = T::zero();
                    for i in ci * block..(ci + 1) * block {
                        acc = acc + gout[i] * db(ad[i], y, yd[i]);
                    }
                    gb[ci] = gb[ci] + acc;
                }
            }
        }
        BPat::TailB { n } => {
            let rows = ad.len() / n;
            if tape.wants_grad(a) {
                let ga = tape.grad_buf(bufs, a);
                for r in 0..rows {
                    for j in 0..n {
                        let i = r * n + j;
                        ga[i] = ga[i] + gout[i] * da(ad[i], bd[j], yd[i]);
                    }
                }
            }
            if tape.wants_grad(b) {
                let gb = tape.grad_buf(bufs, b);
                for j in 0..n {
                    let mut acc = T::zero();
                    for r in 0..rows {
                        let i = r * n + j;
                        acc = acc + gout[i] * db(ad[i], bd[j], yd[i]);
                    }
                    gb[j] = gb[j] + acc;
                }
            }
        }
        BPat::Generic => {
            let bc = Bcast::new(av.shape(), bv.shape()).expect("forward validated broadcast");
            if tape.wants_grad(a) {
                let ga = tape.grad_buf(bufs, a);
                bc.for_each(|io, ia, ib| ga[ia] = ga[ia] + gout[io] * da(ad[ia], bd[ib], yd[io]));
            }
            if tape.wants_grad(b) {
                let gb = tape.grad_buf(bufs, b);
                bc.for_each(|io, ia, ib| gb[ib] = gb[ib] + gout[io] * db(ad[ia], bd[ib], yd[io]));
            }
        }
    }
}

pub(crate) fn backward_pow_scalar<T: Real>(tape: &Tape<T>, x: Var, e: T, gout: &[T], bufs: &mut [Option<Vec<T>>]) {
    if !tape.wants_grad(x) {
        return;
    }
    let xv = tape.value(x).clone();
    let gx = tape.grad_buf(bufs, x);
    for (i, &t) in xv.data().iter().enumerate() {
        gx[i] = gx[i] + gout[i] * e * t.powf(e - T::one());
    }
}

pub(crate) fn backward_activation<T: Real>(
    tape: &Tape<T>,
    idx: usize,
    kind: Act<T>,
    x: Var,
    gout: &[T],
    bufs: &mut [Option<Vec<T>>],
) {
    if !tape.wants_grad(x) {
        return;
    }
    let xv = tape.value(x).clone();
    let yv = tape.nodes[idx].value.clone();
    let gx = tape.grad_buf(bufs, x);
    match kind {
        Act::Relu => {
            for (i, &t) in xv.data().iter().enumerate() {
                if t > T::zero() {
                    gx[i] = gx[i] + gout[i];
                }
            }
        }
        Act::LeakyRelu(alpha) => {
            for (i, &t) in xv.data().iter().enumerate() {
                let d = if t > T::zero() { T::one() } else { alpha };
                gx[i] = gx[i] + gout[i] * d;
            }
        }
        Act::Sigmoid => {
            for (i, &y) in yv.data().iter().enumerate() {
                gx[i] = gx[i] + gout[i] * y * (T::one() - y);
            }
        }
        Act::Tanh => {
            for (i, &y) in yv.data().iter().enumerate() {
                gx[i] = gx[i] + gout[i] * (T::one() - y * y);
            }
        }
        Act::Sine(omega) => {
            for (i, &t) in xv.data().iter().enumerate() {
                gx[i] = gx[i] + gout[i] * omega * (omega * t).cos();
            }
        }
    }
}

pub(crate) fn backward_clamp<T: Real>(tape: &Tape<T>, x: Var, lo: T, hi: T, gout: &[T], bufs: &mut [Option<Vec<T>>]) {
    if !tape.wants_grad(x) {
        return;
    }
    let xv = tape.value(x).clone();
    let gx = tape.grad_buf(bufs, x);
    for (i, &t) in xv.data().iter().enumerate() {
        if t >= lo && t <= hi {
            gx[i] = gx[i] + gout[i];
        }
    }
}

pub(crate) fn backward_reduce<T: Real>(tape: &Tape<T>, kind: ReduceKind, x: Var, gout: &[T], bufs: &mut [Option<Vec<T>>]) {
    if !tape.wants_grad(x) {
        return;
    }
    let n = tape.value(x).numel();
    let g = match kind {
        ReduceKind::Sum => gout[0],
        ReduceKind::Mean => gout[0] / T::of_f64(n as f64),
    };
    let gx = tape.grad_buf(bufs, x);
    for v in gx.iter_mut() {
        *v = *v + g;
    }
}

pub(crate) fn backward_matmul<T: Real>(tape: &Tape<T>, a: Var, b: Var, gout: &[T], bufs: &mut [Option<Vec<T>>]) {
    let av = tape.value(a).clone();
    let bv = tape.value(b).clone();
    let (m, k) = (av.shape()[0], av.shape()[1]);
    let n = bv.shape()[1];
    if tape.wants_grad(a) {
        // dA = G @ B^T
        let ga = tape.grad_buf(bufs, a);
        matmul_rowblock(m, n, k, gout, n, 1, bv.data(), 1, n, ga, true);
    }
    if tape.wants_grad(b) {
        // dB = A^T @ G
        let gb = tape.grad_buf(bufs, b);
        matmul_rowblock(k, m, n, av.data(), 1, k, gout, n, 1, gb, true);
    }
}

pub(crate) fn backward_transpose2d<T: Real>(tape: &Tape<T>, x: Var, gout: &[T], bufs: &mut [Option<Vec<T>>]) {
    if !tape.wants_grad(x) {
        return;
    }
    let (r, c) = {
        let s = tape.value(x).shape();
        (s[0], s[1])
    };
    let gx = tape.grad_buf(bufs, x);
    for i in 0..r {
        for j in 0..c {
            gx[i * c + j] = gx[i * c + j] + gout[j * r + i];
        }
    }
}

pub(crate) fn backward_concat0<T: Real>(tape: &Tape<T>, parts: &[Var], gout: &[T], bufs: &mut [Option<Vec<T>>]) {
    let mut off = 0usize;
    for &p in parts {
        let n = tape.value(p).numel();
        if tape.wants_grad(p) {
            let gp = tape.grad_buf(bufs, p);
            for (g, &go) in gp.iter_mut().zip(&gout[off..off + n]) {
                *g = *g + go;
            }
        }
        off += n;
    }
}

pub(crate) fn backward_slice0<T: Real>(
    tape: &Tape<T>,
    x: Var,
    start: usize,
    len: usize,
    gout: &[T],
    bufs: &mut [Option<Vec<T>>],
) {
    if !tape.wants_grad(x) {
        return;
    }
    let s = tape.value(x).shape().to_vec();
    let inner: usize = s[1..].iter().product();
    let gx = tape.grad_buf(bufs, x);
    let base = start * inner;
    for i in 0..len * inner {
        gx[base + i] = gx[base + i] + gout[i];
    }
}

pub(crate) fn backward_upsample2x<T: Real>(tape: &Tape<T>, x: Var, gout: &[T], bufs: &mut [Option<Vec<T>>]) {
    if !tape.wants_grad(x) {
        return;
    }
    let (_c, h, w) = {
        let s = tape.value(x).shape();
        (s[0], s[1], s[2])
    };
    let ymap = up_map::<T>(h);
    let xmap = up_map::<T>(w);
    let (oh, ow) = (2 * h, 2 * w);
    let gx = tape.grad_buf(bufs, x);
    par::for_each_chunk_mut(gx, h * w, |ci, plane| {
        let gchunk = &gout[ci * oh * ow..(ci + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, wy0, wy1) = ymap[oy];
            for ox in 0..ow {
                let (x0, x1, wx0, wx1) = xmap[ox];
                let g = gchunk[oy * ow + ox];
                plane[y0 * w + x0] = plane[y0 * w + x0] + g * wy0 * wx0;
                plane[y0 * w + x1] = plane[y0 * w + x1] + g * wy0 * wx1;
                plane[y1 * w + x0] = plane[y1 * w + x0] + g * wy1 * wx0;
                plane[y1 * w + x1] = plane[y1 * w + x1] + g * wy1 * wx1;
            }
        }
    });
}

pub(crate) fn backward_instance_norm<T: Real>(
    tape: &Tape<T>,
    x: Var,
    scale: Var,
    shift: Var,
    stats: &[(T, T)],
    gout: &[T],
    bufs: &mut [Option<Vec<T>>],
) {
    let xv = tape.value(x).clone();
    let sv = tape.value(scale).clone();
    let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
    let hw = h * w;
    let n = T::of_f64(hw as f64);

    if tape.wants_grad(shift) {
        let gb = tape.grad_buf(bufs, shift);
        for ci in 0..c {
            let s: T = gout[ci * hw..(ci + 1) * hw].iter().copied().sum();
            gb[ci] = gb[ci] + s;
        }
    }
    if tape.wants_grad(scale) {
        let gs = tape.grad_buf(bufs, scale);
        for ci in 0..c {
            let (mean, inv) = stats[ci];
            let plane = &xv.data()[ci * hw..(ci + 1) * hw];
            let mut s = T::zero();
            for (i, &t) in plane.iter().enumerate() {
                s = s + gout[ci * hw + i] * (t - mean) * inv;
            }
            gs[ci] = gs[ci] + s;
        }
    }
    if tape.wants_grad(x) {
        let gx = tape.grad_buf(bufs, x);
        par::for_each_chunk_mut(gx, hw, |ci, gplane| {
            let (mean, inv) = stats[ci];
            let gamma = sv.data()[ci];
            let plane = &xv.data()[ci * hw..(ci + 1) * hw];
            let gsl = &gout[ci * hw..(ci + 1) * hw];
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for (i, &t) in plane.iter().enumerate() {
                sum_g = sum_g + gsl[i];
                sum_gx = sum_gx + gsl[i] * (t - mean) * inv;
            }
            let mg = sum_g / n;
            let mgx = sum_gx / n;
            for (i, &t) in plane.iter().enumerate() {
                let xhat = (t - mean) * inv;
                gplane[i] = gplane[i] + gamma * inv * (gsl[i] - mg - xhat * mgx);
            }
        });
    }
}

pub(crate) fn backward_tv<T: Real>(tape: &Tape<T>, x: Var, eps: T, gout: &[T], bufs: &mut [Option<Vec<T>>]) {
    if !tape.wants_grad(x) {
        return;
    }
    let xv = tape.value(x).clone();
    let (h, w) = (xv.shape()[0], xv.shape()[1]);
    let d = xv.data();
    let e2 = eps * eps;
    let scale = gout[0] / T::of_f64((h * w) as f64);
    let gx = tape.grad_buf(bufs, x);
    for y in 0..h {
        for xx in 0..w {
            if xx + 1 < w {
                let diff = d[y * w + xx + 1] - d[y * w + xx];
                let dphi = diff / (diff * diff + e2).sqrt() * scale;
                gx[y * w + xx + 1] = gx[y * w + xx + 1] + dphi;
                gx[y * w + xx] = gx[y * w + xx] - dphi;
            }
            if y + 1 < h {
                let diff = d[(y + 1) * w + xx] - d[y * w + xx];
                let dphi = diff / (diff * diff + e2).sqrt() * scale;
                gx[(y + 1) * w + xx] = gx[(y + 1) * w + xx] + dphi;
                gx[y * w + xx] = gx[y * w + xx] - dphi;
            }
        }
    }
}
