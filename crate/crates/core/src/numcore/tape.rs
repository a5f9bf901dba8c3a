//! Reverse-mode gradient tape.
//!
//! Every differentiable operation appends a node holding its output value
//! and enough saved state to run its vector-Jacobian product. `backward`
//! walks the nodes in strict reverse order and returns the gradients of the
//! parameter leaves. A tape serves exactly one backward pass; reuse it only
//! after [`Tape::clear`].

use serde::{Deserialize, Serialize};

use super::conv::ConvGeom;
use super::params::ParamStore;
use super::tensor::{gemm_nn, gemm_t, Real, Tensor};
use crate::error::{OceanError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifies one parameter block: which store, which block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamKey {
    pub store: u32,
    pub index: u32,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamKey),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    AddTrailing {
        x: Var,
        y: Var,
    },
    MulTrailing {
        x: Var,
        y: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        k: T,
    },
    Shift {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    Exp {
        x: Var,
    },
    Log {
        x: Var,
        floor: T,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    GruCombine {
        gx: Var,
        gh: Var,
        h: Var,
        r: Vec<T>,
        z: Vec<T>,
        cand: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        batch: usize,
        cout: usize,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        batch: usize,
        cin: usize,
        geom: ConvGeom,
    },
    Reshape {
        x: Var,
    },
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Narrow {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        start: usize,
        width: usize,
    },
    Rows {
        x: Var,
        rows: Vec<usize>,
        cols: usize,
    },
    RepeatLast {
        x: Var,
        k: usize,
    },
    Mix {
        alpha: Var,
        x: Var,
        n: usize,
        c: usize,
        p: usize,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Mse {
        a: Var,
        b: Var,
    },
    CrossEntropy {
        probs: Var,
        labels: Vec<usize>,
        floor: T,
    },
    Pick {
        x: Var,
        index: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of the parameter leaves reached by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    pub entries: Vec<(ParamKey, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, key: ParamKey) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(k, _)| *k == key).map(|(_, g)| g)
    }

    pub fn keys(&self) -> impl Iterator<Item = ParamKey> + '_ {
        self.entries.iter().map(|(k, _)| *k)
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> OceanError {
    OceanError::shape(op, a.shape(), b.shape())
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::with_capacity(256),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    // ----------------------------------------------------------------- leaves

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Leaf whose gradient is reported under `key`.
    pub fn param_leaf(&mut self, key: ParamKey, value: Tensor<T>) -> Var {
        self.push(value, Op::Param(key), true)
    }

    /// Loads block `index` of `store` as a trainable leaf.
    pub fn param(&mut self, store: &ParamStore<T>, index: usize) -> Var {
        let key = store.key(index);
        self.param_leaf(key, store.block(index).value.clone())
    }

    /// Loads block `index` of `store` as a constant (frozen) leaf.
    pub fn frozen(&mut self, store: &ParamStore<T>, index: usize) -> Var {
        self.constant(store.block(index).value.clone())
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.val(x).clone();
        self.constant(v)
    }

    // ------------------------------------------------------------ linear algebra

    /// `a · b` for 2-D operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes a 2-D operand.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.ndim() != 2 || bv.ndim() != 2 {
            return Err(shape_err("matmul", av, bv));
        }
        let (m, k) = if ta {
            (av.dim(1), av.dim(0))
        } else {
            (av.dim(0), av.dim(1))
        };
        let (k2, n) = if tb {
            (bv.dim(1), bv.dim(0))
        } else {
            (bv.dim(0), bv.dim(1))
        };
        if k != k2 {
            return Err(shape_err("matmul", av, bv));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm_t(m, k, n, av.data(), ta, bv.data(), tb, out.data_mut(), false);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            out,
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            },
            ng,
        ))
    }

    /// `x · w + b` with `x: [B,I]`, `w: [I,O]`, `b: [O]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.val(x), self.val(w), self.val(b));
        if xv.ndim() != 2 || wv.ndim() != 2 || xv.dim(1) != wv.dim(0) {
            return Err(shape_err("affine", xv, wv));
        }
        if bv.shape() != [wv.dim(1)] {
            return Err(shape_err("affine(bias)", wv, bv));
        }
        let xw = self.matmul(x, w)?;
        self.add_trailing(xw, b)
    }

    /// `x + y` where `y`'s shape equals the trailing dims of `x`.
    pub fn add_trailing(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xv, yv) = (self.val(x), self.val(y));
        if !xv.shape().ends_with(yv.shape()) {
            return Err(shape_err("add_trailing", xv, yv));
        }
        let yd = yv.data();
        let mut out = xv.clone();
        for chunk in out.data_mut().chunks_mut(yd.len().max(1)) {
            for (o, &b) in chunk.iter_mut().zip(yd) {
                *o += b;
            }
        }
        let ng = self.ng(x) || self.ng(y);
        Ok(self.push(out, Op::AddTrailing { x, y }, ng))
    }

    /// `x ⊙ y` where `y`'s shape equals the trailing dims of `x`.
    pub fn mul_trailing(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xv, yv) = (self.val(x), self.val(y));
        if !xv.shape().ends_with(yv.shape()) {
            return Err(shape_err("mul_trailing", xv, yv));
        }
        let yd = yv.data();
        let mut out = xv.clone();
        for chunk in out.data_mut().chunks_mut(yd.len().max(1)) {
            for (o, &b) in chunk.iter_mut().zip(yd) {
                *o *= b;
            }
        }
        let ng = self.ng(x) || self.ng(y);
        Ok(self.push(out, Op::MulTrailing { x, y }, ng))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add { a, b }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub { a, b }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul { a, b }, ng))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let mut out = self.val(x).clone();
        out.scale_assign(k);
        let ng = self.ng(x);
        self.push(out, Op::Scale { x, k }, ng)
    }

    /// `x + c` elementwise.
    pub fn shift(&mut self, x: Var, c: T) -> Var {
        let mut out = self.val(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v += c);
        let ng = self.ng(x);
        self.push(out, Op::Shift { x }, ng)
    }

    // ------------------------------------------------------------ elementwise

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let xv = self.val(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        Tensor::new(xv.shape(), data).expect("same length")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.unary(x, |v| if v > T::zero() { v } else { T::zero() });
        let ng = self.ng(x);
        self.push(out, Op::Relu { x }, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.unary(x, sigmoid);
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid { x }, ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.unary(x, |v| v.tanh());
        let ng = self.ng(x);
        self.push(out, Op::Tanh { x }, ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.unary(x, |v| v.exp());
        let ng = self.ng(x);
        self.push(out, Op::Exp { x }, ng)
    }

    /// Natural log with the input clamped to `>= floor`.
    pub fn log(&mut self, x: Var, floor: T) -> Var {
        let out = self.unary(x, |v| v.max(floor).ln());
        let ng = self.ng(x);
        self.push(out, Op::Log { x, floor }, ng)
    }

    // ------------------------------------------------------------ normalizers

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let axis = self.val(x).ndim().saturating_sub(1);
        self.softmax_axis(x, axis, None)
    }

    /// Softmax over `axis`. Entries whose position along `axis` has
    /// `allowed[i] == false` receive probability exactly zero.
    pub fn softmax_axis(&mut self, x: Var, axis: usize, allowed: Option<&[bool]>) -> Result<Var> {
        let xv = self.val(x);
        if axis >= xv.ndim().max(1) {
            return Err(OceanError::invalid(format!(
                "softmax axis {axis} for shape {:?}",
                xv.shape()
            )));
        }
        let (outer, len, inner) = if xv.ndim() == 0 {
            (1, 1, 1)
        } else {
            split_axis(xv.shape(), axis)
        };
        if let Some(mask) = allowed {
            if mask.len() != len {
                return Err(OceanError::shape("softmax(mask)", xv.shape(), &[mask.len()]));
            }
            if !mask.iter().any(|&a| a) {
                return Err(OceanError::invalid("softmax: every entry masked"));
            }
        }
        let ok = |i: usize| allowed.map_or(true, |m| m[i]);
        let src = xv.data();
        let mut out = Tensor::zeros(xv.shape());
        let dst = out.data_mut();
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + j;
                let mut mx = T::neg_infinity();
                for i in (0..len).filter(|&i| ok(i)) {
                    mx = mx.max(src[idx(i)]);
                }
                let mut z = T::zero();
                for i in 0..len {
                    let e = if ok(i) { (src[idx(i)] - mx).exp() } else { T::zero() };
                    dst[idx(i)] = e;
                    z += e;
                }
                for i in 0..len {
                    dst[idx(i)] = dst[idx(i)] / z;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::Softmax { x, outer, len, inner }, ng))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (xv, gv, bv) = (self.val(x), self.val(gain), self.val(bias));
        let c = xv.dim(-1);
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(shape_err("layer_norm", xv, gv));
        }
        let rows = xv.len() / c;
        let mut out = Tensor::zeros(xv.shape());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        let cn = T::lit(c as f64);
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for i in 0..c {
                let xh = (row[i] - mean) * is;
                xhat[r * c + i] = xh;
                out.data_mut()[r * c + i] = xh * gv.data()[i] + bv.data()[i];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Gated recurrent combination from pre-computed projections.
    ///
    /// `gx` and `gh` are `[B, 3H]` with column blocks `(reset, update,
    /// candidate)`; `h` is `[B, H]`:
    ///
    /// ```text
    /// r  = σ(gx_r + gh_r)
    /// z  = σ(gx_z + gh_z)
    /// h̃  = tanh(gx_n + r ⊙ gh_n)
    /// h' = (1 − z) ⊙ h + z ⊙ h̃
    /// ```
    pub fn gru_combine(&mut self, gx: Var, gh: Var, h: Var) -> Result<Var> {
        let (gxv, ghv, hv) = (self.val(gx), self.val(gh), self.val(h));
        if hv.ndim() != 2 || gxv.shape() != ghv.shape() || gxv.shape() != [hv.dim(0), 3 * hv.dim(1)] {
            return Err(shape_err("gru_combine", gxv, hv));
        }
        let (b, hd) = (hv.dim(0), hv.dim(1));
        let mut r = vec![T::zero(); b * hd];
        let mut z = vec![T::zero(); b * hd];
        let mut cand = vec![T::zero(); b * hd];
        let mut out = Tensor::zeros(hv.shape());
        for row in 0..b {
            let x3 = &gxv.data()[row * 3 * hd..(row + 1) * 3 * hd];
            let h3 = &ghv.data()[row * 3 * hd..(row + 1) * 3 * hd];
            for j in 0..hd {
                let i = row * hd + j;
                let rr = sigmoid(x3[j] + h3[j]);
                let zz = sigmoid(x3[hd + j] + h3[hd + j]);
                let nn = (x3[2 * hd + j] + rr * h3[2 * hd + j]).tanh();
                r[i] = rr;
                z[i] = zz;
                cand[i] = nn;
                out.data_mut()[i] = (T::one() - zz) * hv.data()[i] + zz * nn;
            }
        }
        let ng = self.ng(gx) || self.ng(gh) || self.ng(h);
        Ok(self.push(
            out,
            Op::GruCombine {
                gx,
                gh,
                h,
                r,
                z,
                cand,
            },
            ng,
        ))
    }

    // ------------------------------------------------------------ convolution

    /// 2-D convolution. `x: [B,Cin,H,W]`, `w: [Cout,Cin,k,k]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xv, wv, bv) = (self.val(x), self.val(w), self.val(b));
        if xv.ndim() != 4 || wv.ndim() != 4 || wv.dim(1) != xv.dim(1) || wv.dim(2) != wv.dim(3) {
            return Err(shape_err("conv2d", xv, wv));
        }
        let (batch, cin, h, wd) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let (cout, k) = (wv.dim(0), wv.dim(2));
        if bv.shape() != [cout] {
            return Err(shape_err("conv2d(bias)", wv, bv));
        }
        let geom = ConvGeom::forward(cin, h, wd, k, stride, pad)
            .ok_or_else(|| shape_err("conv2d(geometry)", xv, wv))?;
        let (rows, ncol) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![T::zero(); rows * ncol];
        let mut out = Tensor::zeros(&[batch, cout, geom.out_h, geom.out_w]);
        for bi in 0..batch {
            let xin = &xv.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
            geom.im2col(xin, &mut cols);
            let o = &mut out.data_mut()[bi * cout * ncol..(bi + 1) * cout * ncol];
            for (c, chunk) in o.chunks_mut(ncol).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bv.data()[c]);
            }
            gemm_nn(cout, rows, ncol, wv.data(), &cols, o, true);
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                batch,
                cout,
                geom,
            },
            ng,
        ))
    }

    /// Transposed 2-D convolution. `x: [B,Cin,H,W]`, `w: [Cin,Cout,k,k]`,
    /// `b: [Cout]`; output side `(H−1)·stride − 2·pad + k + out_pad`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Var> {
        let (xv, wv, bv) = (self.val(x), self.val(w), self.val(b));
        if xv.ndim() != 4 || wv.ndim() != 4 || wv.dim(0) != xv.dim(1) || wv.dim(2) != wv.dim(3) {
            return Err(shape_err("conv_transpose2d", xv, wv));
        }
        let (batch, cin, h, wd) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let (cout, k) = (wv.dim(1), wv.dim(2));
        if bv.shape() != [cout] {
            return Err(shape_err("conv_transpose2d(bias)", wv, bv));
        }
        let geom = ConvGeom::transposed(cout, h, wd, k, stride, pad, out_pad)
            .ok_or_else(|| shape_err("conv_transpose2d(geometry)", xv, wv))?;
        let (rows, ncol) = (geom.col_rows(), geom.col_cols());
        let plane = geom.h * geom.w;
        let mut cols = vec![T::zero(); rows * ncol];
        let mut out = Tensor::zeros(&[batch, cout, geom.h, geom.w]);
        for bi in 0..batch {
            let xin = &xv.data()[bi * cin * ncol..(bi + 1) * cin * ncol];
            // cols[rows, ncol] = wᵀ[rows, cin] · x[cin, ncol]
            gemm_t(rows, cin, ncol, wv.data(), true, xin, false, &mut cols, false);
            let o = &mut out.data_mut()[bi * cout * plane..(bi + 1) * cout * plane];
            for (c, chunk) in o.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bv.data()[c]);
            }
            geom.col2im(&cols, o);
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(
            out,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                batch,
                cin,
                geom,
            },
            ng,
        ))
    }

    // ------------------------------------------------------------ shape ops

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.val(x).clone().reshaped(shape)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape { x }, ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.val(x);
        if xv.ndim() != 2 {
            return Err(OceanError::shape("transpose", xv.shape(), &[2]));
        }
        let (rows, cols) = (xv.dim(0), xv.dim(1));
        let mut out = Tensor::zeros(&[cols, rows]);
        transpose_into(xv.data(), rows, cols, out.data_mut());
        let ng = self.ng(x);
        Ok(self.push(out, Op::Transpose { x, rows, cols }, ng))
    }

    /// Slice `[start, start+width)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, width: usize) -> Result<Var> {
        let xv = self.val(x);
        if axis >= xv.ndim() || start + width > xv.dim(axis as isize) {
            return Err(OceanError::shape("narrow", xv.shape(), &[axis, start, width]));
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let mut shape = xv.shape().to_vec();
        shape[axis] = width;
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            data.extend_from_slice(&xv.data()[base..base + width * inner]);
        }
        let out = Tensor::new(&shape, data)?;
        let ng = self.ng(x);
        Ok(self.push(
            out,
            Op::Narrow {
                x,
                outer,
                len,
                inner,
                start,
                width,
            },
            ng,
        ))
    }

    /// Gathers rows of a 2-D tensor into `[rows.len(), C]`.
    pub fn rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.val(x);
        if xv.ndim() != 2 {
            return Err(OceanError::shape("rows", xv.shape(), &[2]));
        }
        let (r, c) = (xv.dim(0), xv.dim(1));
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(OceanError::Index {
                    what: "rows",
                    index: i,
                    len: r,
                });
            }
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::new(&[rows.len(), c], data)?;
        let ng = self.ng(x);
        Ok(self.push(
            out,
            Op::Rows {
                x,
                rows: rows.to_vec(),
                cols: c,
            },
            ng,
        ))
    }

    /// Appends an axis of size `k`, repeating every element `k` times.
    pub fn repeat_last(&mut self, x: Var, k: usize) -> Var {
        let xv = self.val(x);
        let mut shape = xv.shape().to_vec();
        shape.push(k);
        let mut data = Vec::with_capacity(xv.len() * k);
        for &v in xv.data() {
            data.extend(std::iter::repeat(v).take(k));
        }
        let out = Tensor::new(&shape, data).expect("consistent");
        let ng = self.ng(x);
        self.push(out, Op::RepeatLast { x, k }, ng)
    }

    /// `out[c,p] = Σ_n alpha[n,p] · x[n,c,p]` for `alpha: [N,P]`,
    /// `x: [N,C,P]`.
    pub fn mix(&mut self, alpha: Var, x: Var) -> Result<Var> {
        let (av, xv) = (self.val(alpha), self.val(x));
        if av.ndim() != 2 || xv.ndim() != 3 || xv.dim(0) != av.dim(0) || xv.dim(2) != av.dim(1) {
            return Err(shape_err("mix", av, xv));
        }
        let (n, c, p) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let mut out = Tensor::zeros(&[c, p]);
        for ni in 0..n {
            let a = &av.data()[ni * p..(ni + 1) * p];
            for ci in 0..c {
                let src = &xv.data()[(ni * c + ci) * p..(ni * c + ci + 1) * p];
                let dst = &mut out.data_mut()[ci * p..(ci + 1) * p];
                for i in 0..p {
                    dst[i] += a[i] * src[i];
                }
            }
        }
        let ng = self.ng(alpha) || self.ng(x);
        Ok(self.push(out, Op::Mix { alpha, x, n, c, p }, ng))
    }

    // ------------------------------------------------------------ reductions

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.val(x).sum());
        let ng = self.ng(x);
        self.push(out, Op::Sum { x }, ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.val(x);
        let out = Tensor::scalar(xv.sum() / T::lit(xv.len() as f64));
        let ng = self.ng(x);
        self.push(out, Op::Mean { x }, ng)
    }

    /// Sum of a list of scalars (empty list → constant zero).
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let mut it = xs.iter();
        let Some(&first) = it.next() else {
            return Ok(self.constant_scalar(T::zero()));
        };
        let mut acc = first;
        for &x in it {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mse", av, bv));
        }
        let s: T = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let out = Tensor::scalar(s / T::lit(av.len() as f64));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mse { a, b }, ng))
    }

    /// Mean over rows of `−ln(max(probs[row, label], floor))`.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize], floor: T) -> Result<Var> {
        let pv = self.val(probs);
        if pv.ndim() != 2 || pv.dim(0) != labels.len() {
            return Err(OceanError::shape("cross_entropy", pv.shape(), &[labels.len()]));
        }
        let y = pv.dim(1);
        let mut s = T::zero();
        for (row, &l) in labels.iter().enumerate() {
            if l >= y {
                return Err(OceanError::Index {
                    what: "cross_entropy label",
                    index: l,
                    len: y,
                });
            }
            s -= pv.data()[row * y + l].max(floor).ln();
        }
        let out = Tensor::scalar(s / T::lit(labels.len() as f64));
        let ng = self.ng(probs);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
                floor,
            },
            ng,
        ))
    }

    /// Scalar at flat `index`.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let xv = self.val(x);
        if index >= xv.len() {
            return Err(OceanError::Index {
                what: "pick",
                index,
                len: xv.len(),
            });
        }
        let out = Tensor::scalar(xv.data()[index]);
        let ng = self.ng(x);
        Ok(self.push(out, Op::Pick { x, index }, ng))
    }

    // ------------------------------------------------------------ backward

    /// Propagates `d loss / d node` from the scalar `loss` back to every
    /// parameter leaf.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.backward_done {
            return Err(OceanError::BackwardTwice);
        }
        if self.val(loss).len() != 1 {
            return Err(OceanError::shape("backward(loss)", self.val(loss).shape(), &[]));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(self.val(loss).shape(), T::one()));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, g, &mut grads, &mut out)?;
        }
        out.entries.reverse();
        Ok(out)
    }

    fn backprop_node(
        &self,
        i: usize,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        out: &mut Gradients<T>,
    ) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(key) => out.entries.push((*key, g)),
            &Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            } => {
                // out = A·B with A = op(a) [m,k], B = op(b) [k,n].
                if self.ng(a) {
                    let bv = self.val(b);
                    let av = self.val(a);
                    let mut da = Tensor::zeros(av.shape());
                    if ta {
                        // a stored [k,m]: da = B · gᵀ  -> [k,m]
                        gemm_t(k, n, m, bv.data(), tb, gd, true, da.data_mut(), false);
                    } else {
                        // a stored [m,k]: da = g · Bᵀ
                        gemm_t(m, n, k, gd, false, bv.data(), !tb, da.data_mut(), false);
                    }
                    acc(a, da);
                }
                if self.ng(b) {
                    let av = self.val(a);
                    let bv = self.val(b);
                    let mut db = Tensor::zeros(bv.shape());
                    if tb {
                        // b stored [n,k]: db = gᵀ · A
                        gemm_t(n, m, k, gd, true, av.data(), ta, db.data_mut(), false);
                    } else {
                        // b stored [k,n]: db = Aᵀ · g
                        gemm_t(k, m, n, av.data(), !ta, gd, false, db.data_mut(), false);
                    }
                    acc(b, db);
                }
            }
            &Op::AddTrailing { x, y: yv } => {
                if self.ng(yv) {
                    let mut dy = Tensor::zeros(self.val(yv).shape());
                    let len = dy.len().max(1);
                    for chunk in gd.chunks(len) {
                        for (d, &v) in dy.data_mut().iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    acc(yv, dy);
                }
                acc(x, g);
            }
            &Op::MulTrailing { x, y: yv } => {
                let (xv, yt) = (self.val(x), self.val(yv));
                let len = yt.len().max(1);
                if self.ng(yv) {
                    let mut dy = Tensor::zeros(yt.shape());
                    for (gc, xc) in gd.chunks(len).zip(xv.data().chunks(len)) {
                        for ((d, &gg), &xx) in dy.data_mut().iter_mut().zip(gc).zip(xc) {
                            *d += gg * xx;
                        }
                    }
                    acc(yv, dy);
                }
                if self.ng(x) {
                    let mut dx = g.clone();
                    for chunk in dx.data_mut().chunks_mut(len) {
                        for (d, &b) in chunk.iter_mut().zip(yt.data()) {
                            *d *= b;
                        }
                    }
                    acc(x, dx);
                }
            }
            &Op::Add { a, b } => {
                acc(a, g.clone());
                acc(b, g);
            }
            &Op::Sub { a, b } => {
                let mut nb = g.clone();
                nb.scale_assign(-T::one());
                acc(a, g);
                acc(b, nb);
            }
            &Op::Mul { a, b } => {
                if self.ng(a) {
                    acc(a, zip_map(&g, self.val(b), |gg, bb| gg * bb));
                }
                if self.ng(b) {
                    acc(b, zip_map(&g, self.val(a), |gg, aa| gg * aa));
                }
            }
            &Op::Scale { x, k } => {
                let mut dx = g;
                dx.scale_assign(k);
                acc(x, dx);
            }
            &Op::Shift { x } => acc(x, g),
            &Op::Relu { x } => acc(x, zip_map(&g, y, |gg, yy| if yy > T::zero() { gg } else { T::zero() })),
            &Op::Sigmoid { x } => acc(x, zip_map(&g, y, |gg, yy| gg * yy * (T::one() - yy))),
            &Op::Tanh { x } => acc(x, zip_map(&g, y, |gg, yy| gg * (T::one() - yy * yy))),
            &Op::Exp { x } => acc(x, zip_map(&g, y, |gg, yy| gg * yy)),
            &Op::Log { x, floor } => acc(
                x,
                zip_map(&g, self.val(x), |gg, xx| if xx > floor { gg / xx } else { T::zero() }),
            ),
            &Op::Softmax { x, outer, len, inner } => {
                let mut dx = Tensor::zeros(y.shape());
                let (yd, dd) = (y.data(), dx.data_mut());
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |t: usize| (o * len + t) * inner + j;
                        let dot: T = (0..len).map(|t| yd[idx(t)] * gd[idx(t)]).sum();
                        for t in 0..len {
                            dd[idx(t)] = yd[idx(t)] * (gd[idx(t)] - dot);
                        }
                    }
                }
                acc(x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.val(*gain);
                let c = gv.len();
                let rows = xhat.len() / c;
                let mut dgain = Tensor::zeros(gv.shape());
                let mut dbias = Tensor::zeros(gv.shape());
                let mut dx = Tensor::zeros(y.shape());
                let cn = T::lit(c as f64);
                for r in 0..rows {
                    let gr = &gd[r * c..(r + 1) * c];
                    let xh = &xhat[r * c..(r + 1) * c];
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for t in 0..c {
                        dgain.data_mut()[t] += gr[t] * xh[t];
                        dbias.data_mut()[t] += gr[t];
                        let dxh = gr[t] * gv.data()[t];
                        s1 += dxh;
                        s2 += dxh * xh[t];
                    }
                    for t in 0..c {
                        let dxh = gr[t] * gv.data()[t];
                        dx.data_mut()[r * c + t] = inv_std[r] * (dxh - s1 / cn - xh[t] * s2 / cn);
                    }
                }
                acc(*gain, dgain);
                acc(*bias, dbias);
                acc(*x, dx);
            }
            Op::GruCombine {
                gx,
                gh,
                h,
                r,
                z,
                cand,
            } => {
                let hv = self.val(*h);
                let ghv = self.val(*gh);
                let (b, hd) = (hv.dim(0), hv.dim(1));
                let mut dgx = Tensor::zeros(&[b, 3 * hd]);
                let mut dgh = Tensor::zeros(&[b, 3 * hd]);
                let mut dh = Tensor::zeros(&[b, hd]);
                for row in 0..b {
                    for j in 0..hd {
                        let i = row * hd + j;
                        let d = gd[i];
                        let (rr, zz, nn) = (r[i], z[i], cand[i]);
                        dh.data_mut()[i] = d * (T::one() - zz);
                        let dz = d * (nn - hv.data()[i]);
                        let dn = d * zz;
                        let dan = dn * (T::one() - nn * nn);
                        let dr = dan * ghv.data()[row * 3 * hd + 2 * hd + j];
                        let daz = dz * zz * (T::one() - zz);
                        let dar = dr * rr * (T::one() - rr);
                        let base = row * 3 * hd;
                        dgx.data_mut()[base + j] = dar;
                        dgx.data_mut()[base + hd + j] = daz;
                        dgx.data_mut()[base + 2 * hd + j] = dan;
                        dgh.data_mut()[base + j] = dar;
                        dgh.data_mut()[base + hd + j] = daz;
                        dgh.data_mut()[base + 2 * hd + j] = dan * rr;
                    }
                }
                acc(*gx, dgx);
                acc(*gh, dgh);
                acc(*h, dh);
            }
            &Op::Conv2d {
                x,
                w,
                b,
                batch,
                cout,
                geom,
            } => {
                let xv = self.val(x);
                let wv = self.val(w);
                let (rows, ncol) = (geom.col_rows(), geom.col_cols());
                let in_len = geom.c * geom.h * geom.w;
                let mut cols = vec![T::zero(); rows * ncol];
                let mut dw = Tensor::zeros(wv.shape());
                let mut dx = self.ng(x).then(|| Tensor::zeros(xv.shape()));
                let mut dcols = vec![T::zero(); rows * ncol];
                for bi in 0..batch {
                    let go = &gd[bi * cout * ncol..(bi + 1) * cout * ncol];
                    if self.ng(w) {
                        geom.im2col(&xv.data()[bi * in_len..(bi + 1) * in_len], &mut cols);
                        // dw[cout, rows] += g[cout, ncol] · colsᵀ
                        gemm_t(cout, ncol, rows, go, false, &cols, true, dw.data_mut(), true);
                    }
                    if let Some(dx) = dx.as_mut() {
                        // dcols[rows, ncol] = wᵀ · g
                        gemm_t(rows, cout, ncol, wv.data(), true, go, false, &mut dcols, false);
                        geom.col2im(&dcols, &mut dx.data_mut()[bi * in_len..(bi + 1) * in_len]);
                    }
                }
                if self.ng(b) {
                    acc(b, channel_sums(gd, batch, cout, ncol));
                }
                acc(w, dw);
                if let Some(dx) = dx {
                    acc(x, dx);
                }
            }
            &Op::ConvTranspose2d {
                x,
                w,
                b,
                batch,
                cin,
                geom,
            } => {
                let xv = self.val(x);
                let wv = self.val(w);
                let (rows, ncol) = (geom.col_rows(), geom.col_cols());
                let plane = geom.h * geom.w;
                let cout = geom.c;
                let mut cols = vec![T::zero(); rows * ncol];
                let mut dw = Tensor::zeros(wv.shape());
                let mut dx = self.ng(x).then(|| Tensor::zeros(xv.shape()));
                for bi in 0..batch {
                    let go = &gd[bi * cout * plane..(bi + 1) * cout * plane];
                    geom.im2col(go, &mut cols);
                    let xin = &xv.data()[bi * cin * ncol..(bi + 1) * cin * ncol];
                    if self.ng(w) {
                        // dw[cin, rows] += x[cin, ncol] · colsᵀ
                        gemm_t(cin, ncol, rows, xin, false, &cols, true, dw.data_mut(), true);
                    }
                    if let Some(dx) = dx.as_mut() {
                        // dx[cin, ncol] = w[cin, rows] · cols
                        let d = &mut dx.data_mut()[bi * cin * ncol..(bi + 1) * cin * ncol];
                        gemm_nn(cin, rows, ncol, wv.data(), &cols, d, false);
                    }
                }
                if self.ng(b) {
                    acc(b, channel_sums(gd, batch, cout, plane));
                }
                acc(w, dw);
                if let Some(dx) = dx {
                    acc(x, dx);
                }
            }
            &Op::Reshape { x } => {
                let shape = self.val(x).shape().to_vec();
                acc(x, g.reshaped(&shape)?);
            }
            &Op::Transpose { x, rows, cols } => {
                let mut dx = Tensor::zeros(&[rows, cols]);
                transpose_into(gd, cols, rows, dx.data_mut());
                acc(x, dx);
            }
            &Op::Narrow {
                x,
                outer,
                len,
                inner,
                start,
                width,
            } => {
                let mut dx = Tensor::zeros(self.val(x).shape());
                for o in 0..outer {
                    let base = (o * len + start) * inner;
                    dx.data_mut()[base..base + width * inner]
                        .copy_from_slice(&gd[o * width * inner..(o + 1) * width * inner]);
                }
                acc(x, dx);
            }
            Op::Rows { x, rows, cols } => {
                let mut dx = Tensor::zeros(self.val(*x).shape());
                for (k, &r) in rows.iter().enumerate() {
                    let dst = &mut dx.data_mut()[r * cols..(r + 1) * cols];
                    for (d, &v) in dst.iter_mut().zip(&gd[k * cols..(k + 1) * cols]) {
                        *d += v;
                    }
                }
                acc(*x, dx);
            }
            &Op::RepeatLast { x, k } => {
                let data = gd.chunks(k).map(|c| c.iter().copied().sum()).collect();
                acc(x, Tensor::new(self.val(x).shape(), data)?);
            }
            &Op::Mix { alpha, x, n, c, p } => {
                let (av, xv) = (self.val(alpha), self.val(x));
                if self.ng(alpha) {
                    let mut da = Tensor::zeros(&[n, p]);
                    for ni in 0..n {
                        for ci in 0..c {
                            let src = &xv.data()[(ni * c + ci) * p..(ni * c + ci + 1) * p];
                            let gg = &gd[ci * p..(ci + 1) * p];
                            let dst = &mut da.data_mut()[ni * p..(ni + 1) * p];
                            for t in 0..p {
                                dst[t] += gg[t] * src[t];
                            }
                        }
                    }
                    acc(alpha, da);
                }
                if self.ng(x) {
                    let mut dx = Tensor::zeros(&[n, c, p]);
                    for ni in 0..n {
                        let a = &av.data()[ni * p..(ni + 1) * p];
                        for ci in 0..c {
                            let gg = &gd[ci * p..(ci + 1) * p];
                            let dst = &mut dx.data_mut()[(ni * c + ci) * p..(ni * c + ci + 1) * p];
                            for t in 0..p {
                                dst[t] = a[t] * gg[t];
                            }
                        }
                    }
                    acc(x, dx);
                }
            }
            &Op::Sum { x } => acc(x, Tensor::full(self.val(x).shape(), gd[0])),
            &Op::Mean { x } => {
                let xv = self.val(x);
                acc(x, Tensor::full(xv.shape(), gd[0] / T::lit(xv.len() as f64)));
            }
            &Op::Mse { a, b } => {
                let (av, bv) = (self.val(a), self.val(b));
                let k = T::lit(2.0) * gd[0] / T::lit(av.len() as f64);
                let da = zip_map(av, bv, |x, y| k * (x - y));
                if self.ng(b) {
                    let mut db = da.clone();
                    db.scale_assign(-T::one());
                    acc(b, db);
                }
                acc(a, da);
            }
            Op::CrossEntropy {
                probs,
                labels,
                floor,
            } => {
                let pv = self.val(*probs);
                let ycount = pv.dim(1);
                let bn = T::lit(labels.len() as f64);
                let mut dp = Tensor::zeros(pv.shape());
                for (row, &l) in labels.iter().enumerate() {
                    let p = pv.data()[row * ycount + l];
                    if p > *floor {
                        dp.data_mut()[row * ycount + l] = -gd[0] / (bn * p);
                    }
                }
                acc(*probs, dp);
            }
            &Op::Pick { x, index } => {
                let mut dx = Tensor::zeros(self.val(x).shape());
                dx.data_mut()[index] = gd[0];
                acc(x, dx);
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

fn transpose_into<T: Real>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

fn channel_sums<T: Real>(g: &[T], batch: usize, channels: usize, plane: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(&[channels]);
    for bi in 0..batch {
        for c in 0..channels {
            let base = (bi * channels + c) * plane;
            out.data_mut()[c] += g[base..base + plane].iter().copied().sum::<T>();
        }
    }
    out
}
