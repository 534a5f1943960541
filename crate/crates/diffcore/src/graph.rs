use crate::error::{Error, Result};
use crate::tensor::{numel, Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Upsample {
    Nearest,
    Bilinear,
}

/// Which elements share a normalization group.
///
/// Data is viewed as `[outer, channels, inner]`; the affine parameters are
/// indexed by channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// One group per `outer` row (layer norm over the last axis).
    Layer,
    /// One group per channel across `outer` and `inner` (batch norm).
    Batch,
    /// One group per `(outer, channel)` pair (instance norm).
    Instance,
}

#[derive(Clone, Copy, Debug)]
struct NormLayout {
    kind: NormKind,
    outer: usize,
    channels: usize,
    inner: usize,
}

impl NormLayout {
    fn groups(&self) -> usize {
        match self.kind {
            NormKind::Layer => self.outer,
            NormKind::Batch => self.channels,
            NormKind::Instance => self.outer * self.channels,
        }
    }

    fn group_size(&self) -> usize {
        match self.kind {
            NormKind::Layer => self.channels * self.inner,
            NormKind::Batch => self.outer * self.inner,
            NormKind::Instance => self.inner,
        }
    }

    #[inline]
    fn group(&self, o: usize, c: usize) -> usize {
        match self.kind {
            NormKind::Layer => o,
            NormKind::Batch => c,
            NormKind::Instance => o * self.channels + c,
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Conv2d { x: Var, w: Var, bias: Option<Var>, pad: usize },
    Upsample { x: Var, mode: Upsample },
    Norm { x: Var, gamma: Var, beta: Var, layout: NormLayout, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var, Vec<T>),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddTrailing(Var, Var),
    SubTrailing(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    SumAxis { x: Var, outer: usize, len: usize, inner: usize, factor: T },
    SumAll { x: Var, factor: T },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    MaskedSelect { x: Var, idx: Vec<usize> },
    Norm2(Var),
    NormalizeRows { x: Var, norms: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A dynamic reverse-mode tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Splits `shape` around `axis` into (outer, len, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

/// Per-axis source indices and weights for 2x bilinear upsampling
/// (half-pixel centers, edge-clamped).
fn bilinear_taps<T: Real>(size: usize) -> Vec<(usize, usize, T, T)> {
    (0..2 * size)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(size - 1);
            let i1 = (i0 + 1).min(size - 1);
            let w1 = src - i0 as f64;
            (i0, i1, T::lit(1.0 - w1), T::lit(w1))
        })
        .collect()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Accumulates into the gradient buffer of `v` (allocating zeros on first use).
fn acc<T: Real>(
    grads: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    v: Var,
    f: impl FnOnce(&mut [T]),
) {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]);
    f(buf);
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies `v` into a constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a single-element node as `f64`.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item().to_f64().unwrap_or(f64::NAN)
    }

    // ----- linear algebra -----

    /// `[.., m, k] x [k, n] -> [.., m, n]`; the right operand is shared.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = numel(&sa) / k.max(1);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            false,
            false,
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            self.value(b).data(),
            T::zero(),
            &mut out,
        );
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// `[b, m, k] x [b, k, n] -> [b, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, false)
    }

    /// `[b, m, k] x [b, n, k]^T -> [b, m, n]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, true)
    }

    fn bmm_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let op = if trans_b { "bmm_nt" } else { "bmm" };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape(op, &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::shape(op, &sa, &sb));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                T::gemm(
                    false,
                    trans_b,
                    m,
                    k,
                    n,
                    T::one(),
                    &av[i * m * k..],
                    &bv[i * k * n..],
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        Ok(self.push(
            Tensor::new(vec![batch, m, n], out)?,
            Op::BatchMatMul { a, b, batch, m, k, n, trans_b },
            &[a, b],
        ))
    }

    /// Stride-1 2D convolution of `[N, C, H, W]` with `[O, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(Error::shape("conv2d bias", &sw, self.shape(b)));
            }
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        let (ho, wo) = (h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1);
        let ckk = c * kh * kw;
        let geo = ConvGeo { c, h, w: wd, kh, kw, pad, ho, wo };
        let mut out = vec![T::zero(); n * o * ho * wo];
        let mut col = vec![T::zero(); ckk * ho * wo];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = bias.map(|b| self.value(b).data());
            for img in 0..n {
                geo.im2col(&xv[img * c * h * wd..(img + 1) * c * h * wd], &mut col);
                let dst = &mut out[img * o * ho * wo..(img + 1) * o * ho * wo];
                if let Some(bv) = bv {
                    for (oc, chunk) in dst.chunks_mut(ho * wo).enumerate() {
                        chunk.fill(bv[oc]);
                    }
                }
                let beta = if bv.is_some() { T::one() } else { T::zero() };
                T::gemm(false, false, o, ckk, ho * wo, T::one(), wv, &col, beta, dst);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(
            Tensor::new(vec![n, o, ho, wo], out)?,
            Op::Conv2d { x, w, bias, pad },
            &inputs,
        ))
    }

    /// 2x spatial upsampling of `[N, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var, mode: Upsample) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] == 0 || s[3] == 0 {
            return Err(Error::shape("upsample2x", &s, &[]));
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (2 * h, 2 * w);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); nc * ho * wo];
        match mode {
            Upsample::Nearest => {
                for p in 0..nc {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            out[(p * ho + oy) * wo + ox] = xv[(p * h + oy / 2) * w + ox / 2];
                        }
                    }
                }
            }
            Upsample::Bilinear => {
                let ty = bilinear_taps::<T>(h);
                let tx = bilinear_taps::<T>(w);
                for p in 0..nc {
                    let src = &xv[p * h * w..(p + 1) * h * w];
                    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                            out[(p * ho + oy) * wo + ox] = wy0
                                * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                                + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
                        }
                    }
                }
            }
        }
        let shape = vec![s[0], s[1], ho, wo];
        Ok(self.push(Tensor::new(shape, out)?, Op::Upsample { x, mode }, &[x]))
    }

    // ----- normalization -----

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| Error::shape("layer_norm", &s, &[]))?;
        let layout = NormLayout {
            kind: NormKind::Layer,
            outer: numel(&s) / d.max(1),
            channels: d,
            inner: 1,
        };
        self.norm_impl("layer_norm", x, gamma, beta, layout, eps)
    }

    /// Batch (training-mode statistics) or instance normalization of
    /// `[N, C, ...]` with per-channel affine parameters.
    pub fn channel_norm(
        &mut self,
        kind: NormKind,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || kind == NormKind::Layer {
            return Err(Error::shape("channel_norm", &s, &[]));
        }
        let layout = NormLayout {
            kind,
            outer: s[0],
            channels: s[1],
            inner: numel(&s[2..]),
        };
        if layout.group_size() < 2 && kind == NormKind::Batch {
            return Err(Error::invalid(
                "batch_norm",
                format!("needs more than one value per channel, got shape {s:?}"),
            ));
        }
        self.norm_impl("channel_norm", x, gamma, beta, layout, eps)
    }

    fn norm_impl(
        &mut self,
        op: &'static str,
        x: Var,
        gamma: Var,
        beta: Var,
        layout: NormLayout,
        eps: f64,
    ) -> Result<Var> {
        let c = layout.channels;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(op, self.shape(x), self.shape(gamma)));
        }
        let xv = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let groups = layout.groups();
        let cnt = T::lit(layout.group_size() as f64);
        if layout.kind == NormKind::Layer && layout.inner == 1 {
            let mut xhat = vec![T::zero(); xv.len()];
            let mut out = vec![T::zero(); xv.len()];
            let mut rstd = vec![T::zero(); groups];
            for (r, row) in xv.chunks_exact(c).enumerate() {
                let m = row.iter().copied().sum::<T>() / cnt;
                let v = row.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / cnt;
                let rs = (v + T::lit(eps)).sqrt().recip();
                rstd[r] = rs;
                let (hrow, orow) = (&mut xhat[r * c..(r + 1) * c], &mut out[r * c..(r + 1) * c]);
                for j in 0..c {
                    let h = (row[j] - m) * rs;
                    hrow[j] = h;
                    orow[j] = h * g[j] + bt[j];
                }
            }
            let shape = self.shape(x).to_vec();
            return Ok(self.push(
                Tensor::new(shape, out)?,
                Op::Norm { x, gamma, beta, layout, xhat, rstd },
                &[x, gamma, beta],
            ));
        }
        let mut mean = vec![T::zero(); groups];
        let mut var = vec![T::zero(); groups];
        let NormLayout { outer, inner, .. } = layout;
        for o in 0..outer {
            for ch in 0..c {
                let gi = layout.group(o, ch);
                let base = (o * c + ch) * inner;
                mean[gi] = mean[gi] + xv[base..base + inner].iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / cnt);
        for o in 0..outer {
            for ch in 0..c {
                let gi = layout.group(o, ch);
                let base = (o * c + ch) * inner;
                let m = mean[gi];
                var[gi] = var[gi]
                    + xv[base..base + inner]
                        .iter()
                        .map(|&v| (v - m) * (v - m))
                        .sum::<T>();
            }
        }
        let eps = T::lit(eps);
        let rstd: Vec<T> = var.iter().map(|&v| (v / cnt + eps).sqrt().recip()).collect();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for ch in 0..c {
                let gi = layout.group(o, ch);
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    let h = (xv[i] - mean[gi]) * rstd[gi];
                    xhat[i] = h;
                    out[i] = h * g[ch] + bt[ch];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Norm { x, gamma, beta, layout, xhat, rstd },
            &[x, gamma, beta],
        ))
    }

    // ----- elementwise -----

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect())
            .expect("same shape");
        self.push(out, op, &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, a) = (T::lit(GELU_C), T::lit(GELU_A));
        let two = T::lit(2.0);
        let v = self.value(x);
        let mut t: Vec<T> = v.data().iter().map(|&v| two * c * (v + a * v * v * v)).collect();
        T::exp_slice(&mut t);
        // tanh(u) = 1 - 2 / (exp(2u) + 1), saturating correctly at both ends
        t.iter_mut().for_each(|e| *e = T::one() - two / (*e + T::one()));
        let half = T::lit(0.5);
        let data = v.data().iter().zip(&t).map(|(&v, &t)| half * v * (T::one() + t)).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Gelu(x, t), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(T::zero()))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::lit(slope);
        self.unary(x, Op::LeakyRelu(x, s), |v| if v > T::zero() { v } else { s * v })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| T::one() / (T::one() + (-v).exp()))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    /// `|x|` with subgradient 0 at 0.
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// Square root with gradient 0 at 0.
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), |v| v.sqrt())
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let d = *v
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax", v.shape(), &[]))?;
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(d.max(1)) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            row.iter_mut().for_each(|e| *e = *e - m);
            T::exp_slice(row);
            let s = row.iter().copied().sum::<T>().recip();
            row.iter_mut().for_each(|e| *e = *e * s);
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(name, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&p, &q)| f(p, q)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |p, q| p * q)
    }

    fn trailing(&mut self, name: &'static str, a: Var, b: Var, sign: T, op: Op<T>) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(name, sa, sb));
        }
        let bd = vb.data();
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(bd.len().max(1)) {
            for (p, &q) in row.iter_mut().zip(bd) {
                *p = *p + sign * q;
            }
        }
        let out = Tensor::new(sa.to_vec(), data)?;
        Ok(self.push(out, op, &[a, b]))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (bias, positional terms).
    pub fn add_trailing(&mut self, a: Var, b: Var) -> Result<Var> {
        self.trailing("add_trailing", a, b, T::one(), Op::AddTrailing(a, b))
    }

    /// `a - b` where `b`'s shape is a suffix of `a`'s.
    pub fn sub_trailing(&mut self, a: Var, b: Var) -> Result<Var> {
        self.trailing("sub_trailing", a, b, -T::one(), Op::SubTrailing(a, b))
    }

    // ----- reductions -----

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::invalid("sum_axis", format!("axis {axis} for shape {s:?}")));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let factor = if mean {
            T::lit(1.0 / len.max(1) as f64)
        } else {
            T::one()
        };
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let src = &xv[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = *d + v;
                }
            }
            dst.iter_mut().for_each(|d| *d = *d * factor);
        }
        let mut shape = s.clone();
        shape.remove(axis);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::SumAxis { x, outer, len, inner, factor },
            &[x],
        ))
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    /// Mean over one axis, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.reduce_all(x, T::one())
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        self.reduce_all(x, T::lit(1.0 / n as f64))
    }

    fn reduce_all(&mut self, x: Var, factor: T) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s * factor), Op::SumAll { x, factor }, &[x])
    }

    /// Euclidean norm of all elements; gradient 0 at the origin.
    pub fn norm2(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().map(|&v| v * v).sum();
        self.push(Tensor::scalar(s.sqrt()), Op::Norm2(x), &[x])
    }

    /// Scales each row of `[n, d]` to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("normalize_rows", &s, &[]));
        }
        let d = s[1];
        let xv = self.value(x).data();
        let mut norms = Vec::with_capacity(s[0]);
        let mut out = vec![T::zero(); xv.len()];
        for (r, row) in xv.chunks(d.max(1)).enumerate() {
            let nr = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if nr <= T::zero() || !nr.is_finite() {
                return Err(Error::ZeroNorm(r));
            }
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = v / nr;
            }
            norms.push(nr);
        }
        Ok(self.push(Tensor::new(s, out)?, Op::NormalizeRows { x, norms }, &[x]))
    }

    // ----- layout -----

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", &s, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let data = permute_data(self.value(x).data(), &s, perm);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Permute { x, perm: perm.to_vec() },
            &[x],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose", self.shape(x), &[]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {axis} for shape {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let sp = self.shape(p);
            let same = sp.len() == first.len()
                && sp.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(Error::shape("concat", &first, sp));
            }
            total += sp[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let v = self.value(p).data();
                data.extend_from_slice(&v[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat { parts: parts.to_vec(), axis },
            parts,
        ))
    }

    /// The slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("{start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let (outer, full, inner) = split_axis(&s, axis);
        let v = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(Tensor::new(shape, data)?, Op::Narrow { x, axis, start }, &[x]))
    }

    /// Flat 1-D selection of the elements where `mask` is true.
    pub fn masked_select(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let v = self.value(x);
        if mask.len() != v.numel() {
            return Err(Error::shape("masked_select", v.shape(), &[mask.len()]));
        }
        let idx: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
        let data = idx.iter().map(|&i| v.data()[i]).collect();
        let out = Tensor::new(vec![idx.len()], data)?;
        Ok(self.push(out, Op::MaskedSelect { x, idx }, &[x]))
    }

    // ----- backward -----

    /// Accumulates gradients of the scalar `root` into every reachable node.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let rs = self.shape(root);
        if numel(rs) != 1 {
            return Err(Error::NotScalar(rs.to_vec()));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[root.0].requires_grad {
            self.grads[root.0] = Some(vec![T::one()]);
        }
        for i in (0..=root.0).rev() {
            let Some(gy) = self.grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                self.grads[i] = Some(gy);
                continue;
            }
            backprop_node(&self.nodes, &mut self.grads, i, &gy);
        }
        Ok(())
    }

    /// Gradient of a leaf after [`Graph::backward`]. Differentiable leaves the
    /// root does not reach get zeros; constants get `None`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad || !self.backward_done {
            return None;
        }
        let data = self
            .grads
            .get(v.0)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
        Some(Tensor::new(node.value.shape().to_vec(), data).expect("grad matches value"))
    }

    /// Clears accumulated gradients so backward may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }
}

fn permute_data<T: Real>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = row_major_strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = src.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    let r = out_shape.len();
    if r == 0 {
        return src.to_vec();
    }
    let last = out_shape[r - 1];
    let last_stride = strides[r - 1];
    let mut idx = vec![0usize; r];
    let mut base = 0usize;
    loop {
        if last_stride == 1 {
            out.extend_from_slice(&src[base..base + last]);
        } else {
            out.extend((0..last).map(|j| src[base + j * last_stride]));
        }
        // advance the multi-index over all but the last axis
        let mut ax = r - 1;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

#[derive(Clone, Copy)]
struct ConvGeo {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeo {
    /// Output columns `lo..hi` whose tap `j` lands inside the input row.
    fn valid_ox(&self, j: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(j).min(self.wo);
        let hi = (self.w + self.pad).saturating_sub(j).min(self.wo).max(lo);
        (lo, hi)
    }

    fn im2col<T: Real>(&self, x: &[T], col: &mut [T]) {
        let hw = self.ho * self.wo;
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &mut col[((c * self.kh + i) * self.kw + j) * hw..][..hw];
                    let (lo, hi) = self.valid_ox(j);
                    for oy in 0..self.ho {
                        let iy = (oy + i) as isize - self.pad as isize;
                        let dst = &mut row[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..][..self.w];
                        dst[..lo].fill(T::zero());
                        dst[hi..].fill(T::zero());
                        if lo < hi {
                            let start = lo + j - self.pad;
                            dst[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, col: &[T], dx: &mut [T]) {
        let hw = self.ho * self.wo;
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &col[((c * self.kh + i) * self.kw + j) * hw..][..hw];
                    let (lo, hi) = self.valid_ox(j);
                    for oy in 0..self.ho {
                        let iy = (oy + i) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut dx[(c * self.h + iy as usize) * self.w..][..self.w];
                        if lo < hi {
                            let start = lo + j - self.pad;
                            add_into(&mut dst[start..start + hi - lo], &row[oy * self.wo + lo..oy * self.wo + hi]);
                        }
                    }
                }
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn backprop_node<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], i: usize, gy: &[T]) {
    let node = &nodes[i];
    let y = node.value.data();
    let val = |v: Var| nodes[v.0].value.data();
    fn elementwise<T: Real>(
        nodes: &[Node<T>],
        grads: &mut [Option<Vec<T>>],
        x: Var,
        gy: &[T],
        y: &[T],
        f: impl Fn(T, T, T) -> T,
    ) {
        let xv = nodes[x.0].value.data();
        acc(grads, nodes, x, |g| {
            for (((g, &d), &v), &y) in g.iter_mut().zip(gy).zip(xv).zip(y) {
                *g = *g + f(d, v, y);
            }
        });
    }
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let (av, bv) = (val(*a), val(*b));
            acc(grads, nodes, *a, |g| T::gemm(false, true, m, n, k, T::one(), gy, bv, T::one(), g));
            acc(grads, nodes, *b, |g| T::gemm(true, false, k, m, n, T::one(), av, gy, T::one(), g));
        }
        Op::BatchMatMul { a, b, batch, m, k, n, trans_b } => {
            let (batch, m, k, n, tb) = (*batch, *m, *k, *n, *trans_b);
            let (av, bv) = (val(*a), val(*b));
            acc(grads, nodes, *a, |g| {
                for s in 0..batch {
                    // dA = dY * op(B)^T
                    T::gemm(
                        false,
                        !tb,
                        m,
                        n,
                        k,
                        T::one(),
                        &gy[s * m * n..],
                        &bv[s * k * n..],
                        T::one(),
                        &mut g[s * m * k..(s + 1) * m * k],
                    );
                }
            });
            acc(grads, nodes, *b, |g| {
                for s in 0..batch {
                    let dst = &mut g[s * k * n..(s + 1) * k * n];
                    if tb {
                        // B is [n, k]: dB = dY^T * A
                        T::gemm(true, false, n, m, k, T::one(), &gy[s * m * n..], &av[s * m * k..], T::one(), dst);
                    } else {
                        T::gemm(true, false, k, m, n, T::one(), &av[s * m * k..], &gy[s * m * n..], T::one(), dst);
                    }
                }
            });
        }
        Op::Conv2d { x, w, bias, pad } => {
            let sx = nodes[x.0].value.shape();
            let sw = nodes[w.0].value.shape();
            let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
            let (o, kh, kw) = (sw[0], sw[2], sw[3]);
            let sy = node.value.shape();
            let (ho, wo) = (sy[2], sy[3]);
            let geo = ConvGeo { c, h, w: wd, kh, kw, pad: *pad, ho, wo };
            let ckk = c * kh * kw;
            let hw = ho * wo;
            if let Some(b) = bias {
                acc(grads, nodes, *b, |g| {
                    for img in 0..n {
                        for oc in 0..o {
                            let s: T = gy[(img * o + oc) * hw..(img * o + oc + 1) * hw].iter().copied().sum();
                            g[oc] = g[oc] + s;
                        }
                    }
                });
            }
            let xv = val(*x);
            let wv = val(*w);
            let mut col = vec![T::zero(); ckk * hw];
            if nodes[w.0].requires_grad {
                acc(grads, nodes, *w, |g| {
                    for img in 0..n {
                        geo.im2col(&xv[img * c * h * wd..(img + 1) * c * h * wd], &mut col);
                        T::gemm(false, true, o, hw, ckk, T::one(), &gy[img * o * hw..], &col, T::one(), g);
                    }
                });
            }
            acc(grads, nodes, *x, |g| {
                for img in 0..n {
                    T::gemm(true, false, ckk, o, hw, T::one(), wv, &gy[img * o * hw..], T::zero(), &mut col);
                    geo.col2im(&col, &mut g[img * c * h * wd..(img + 1) * c * h * wd]);
                }
            });
        }
        Op::Upsample { x, mode } => {
            let s = nodes[x.0].value.shape();
            let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
            let (ho, wo) = (2 * h, 2 * w);
            acc(grads, nodes, *x, |g| match mode {
                Upsample::Nearest => {
                    for p in 0..nc {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let d = (p * h + oy / 2) * w + ox / 2;
                                g[d] = g[d] + gy[(p * ho + oy) * wo + ox];
                            }
                        }
                    }
                }
                Upsample::Bilinear => {
                    let ty = bilinear_taps::<T>(h);
                    let tx = bilinear_taps::<T>(w);
                    for p in 0..nc {
                        let dst = &mut g[p * h * w..(p + 1) * h * w];
                        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                                let d = gy[(p * ho + oy) * wo + ox];
                                dst[y0 * w + x0] = dst[y0 * w + x0] + d * wy0 * wx0;
                                dst[y0 * w + x1] = dst[y0 * w + x1] + d * wy0 * wx1;
                                dst[y1 * w + x0] = dst[y1 * w + x0] + d * wy1 * wx0;
                                dst[y1 * w + x1] = dst[y1 * w + x1] + d * wy1 * wx1;
                            }
                        }
                    }
                }
            });
        }
        Op::Norm { x, gamma, beta, layout, xhat, rstd } => {
            let l = *layout;
            let (c, inner) = (l.channels, l.inner);
            let g_aff = val(*gamma);
            if l.kind == NormKind::Layer && inner == 1 {
                acc(grads, nodes, *beta, |g| {
                    for row in gy.chunks_exact(c) {
                        add_into(g, row);
                    }
                });
                acc(grads, nodes, *gamma, |g| {
                    for (row, h) in gy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            g[j] = g[j] + row[j] * h[j];
                        }
                    }
                });
                if nodes[x.0].requires_grad {
                    let cnt = T::lit(c as f64);
                    acc(grads, nodes, *x, |g| {
                        for (r, ((grow, dy), h)) in g
                            .chunks_exact_mut(c)
                            .zip(gy.chunks_exact(c))
                            .zip(xhat.chunks_exact(c))
                            .enumerate()
                        {
                            let (mut sd, mut sdx) = (T::zero(), T::zero());
                            for j in 0..c {
                                let d = dy[j] * g_aff[j];
                                sd = sd + d;
                                sdx = sdx + d * h[j];
                            }
                            let (md, mdx) = (sd / cnt, sdx / cnt);
                            for j in 0..c {
                                let d = dy[j] * g_aff[j];
                                grow[j] = grow[j] + rstd[r] * (d - md - h[j] * mdx);
                            }
                        }
                    });
                }
                return;
            }
            acc(grads, nodes, *beta, |g| {
                for o in 0..l.outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        g[ch] = g[ch] + gy[base..base + inner].iter().copied().sum();
                    }
                }
            });
            acc(grads, nodes, *gamma, |g| {
                for o in 0..l.outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        let s: T = (base..base + inner).map(|j| gy[j] * xhat[j]).sum();
                        g[ch] = g[ch] + s;
                    }
                }
            });
            if nodes[x.0].requires_grad {
                let groups = l.groups();
                let cnt = T::lit(l.group_size() as f64);
                let mut sum_d = vec![T::zero(); groups];
                let mut sum_dx = vec![T::zero(); groups];
                for o in 0..l.outer {
                    for ch in 0..c {
                        let gi = l.group(o, ch);
                        let base = (o * c + ch) * inner;
                        for j in base..base + inner {
                            let d = gy[j] * g_aff[ch];
                            sum_d[gi] = sum_d[gi] + d;
                            sum_dx[gi] = sum_dx[gi] + d * xhat[j];
                        }
                    }
                }
                acc(grads, nodes, *x, |g| {
                    for o in 0..l.outer {
                        for ch in 0..c {
                            let gi = l.group(o, ch);
                            let base = (o * c + ch) * inner;
                            let (md, mdx) = (sum_d[gi] / cnt, sum_dx[gi] / cnt);
                            for j in base..base + inner {
                                let d = gy[j] * g_aff[ch];
                                g[j] = g[j] + rstd[gi] * (d - md - xhat[j] * mdx);
                            }
                        }
                    }
                });
            }
        }
        Op::Gelu(x, t) => {
            let (c, a) = (T::lit(GELU_C), T::lit(GELU_A));
            let half = T::lit(0.5);
            let three = T::lit(3.0);
            let xv = val(*x);
            acc(grads, nodes, *x, |g| {
                for j in 0..g.len() {
                    let (v, t) = (xv[j], t[j]);
                    let dt = (T::one() - t * t) * c * (T::one() + three * a * v * v);
                    g[j] = g[j] + gy[j] * (half * (T::one() + t) + half * v * dt);
                }
            });
        }
        Op::Relu(x) => elementwise(nodes, grads, *x, gy, y, |d, v, _| if v > T::zero() { d } else { T::zero() }),
        Op::LeakyRelu(x, s) => {
            let s = *s;
            elementwise(nodes, grads, *x, gy, y, |d, v, _| if v > T::zero() { d } else { d * s });
        }
        Op::Sigmoid(x) => elementwise(nodes, grads, *x, gy, y, |d, _, y| d * y * (T::one() - y)),
        Op::Tanh(x) => elementwise(nodes, grads, *x, gy, y, |d, _, y| d * (T::one() - y * y)),
        Op::Abs(x) => elementwise(nodes, grads, *x, gy, y, |d, v, _| {
            if v > T::zero() {
                d
            } else if v < T::zero() {
                -d
            } else {
                T::zero()
            }
        }),
        Op::Square(x) => {
            let two = T::lit(2.0);
            elementwise(nodes, grads, *x, gy, y, |d, v, _| d * two * v);
        }
        Op::Sqrt(x) => {
            let half = T::lit(0.5);
            elementwise(nodes, grads, *x, gy, y, |d, _, y| if y > T::zero() { d * half / y } else { T::zero() });
        }
        Op::Scale(x, c) => {
            let c = *c;
            elementwise(nodes, grads, *x, gy, y, |d, _, _| d * c);
        }
        Op::AddScalar(x) => elementwise(nodes, grads, *x, gy, y, |d, _, _| d),
        Op::Softmax(x) => {
            let dlen = *node.value.shape().last().unwrap_or(&1);
            acc(grads, nodes, *x, |g| {
                for r in 0..y.len() / dlen.max(1) {
                    let (ys, ds) = (&y[r * dlen..(r + 1) * dlen], &gy[r * dlen..(r + 1) * dlen]);
                    let dot: T = ys.iter().zip(ds).map(|(&p, &q)| p * q).sum();
                    for j in 0..dlen {
                        g[r * dlen + j] = g[r * dlen + j] + ys[j] * (ds[j] - dot);
                    }
                }
            });
        }
        Op::Add(a, b) => {
            acc(grads, nodes, *a, |g| add_into(g, gy));
            acc(grads, nodes, *b, |g| add_into(g, gy));
        }
        Op::Sub(a, b) => {
            acc(grads, nodes, *a, |g| add_into(g, gy));
            acc(grads, nodes, *b, |g| {
                for (d, &s) in g.iter_mut().zip(gy) {
                    *d = *d - s;
                }
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc(grads, nodes, *a, |g| {
                for j in 0..g.len() {
                    g[j] = g[j] + gy[j] * bv[j];
                }
            });
            acc(grads, nodes, *b, |g| {
                for j in 0..g.len() {
                    g[j] = g[j] + gy[j] * av[j];
                }
            });
        }
        Op::AddTrailing(a, b) | Op::SubTrailing(a, b) => {
            let neg = matches!(node.op, Op::SubTrailing(..));
            acc(grads, nodes, *a, |g| add_into(g, gy));
            acc(grads, nodes, *b, |g| {
                for row in gy.chunks(g.len().max(1)) {
                    for (d, &s) in g.iter_mut().zip(row) {
                        *d = if neg { *d - s } else { *d + s };
                    }
                }
            });
        }
        Op::SumAxis { x, outer, len, inner, factor } => {
            let (outer, len, inner, f) = (*outer, *len, *inner, *factor);
            acc(grads, nodes, *x, |g| {
                for o in 0..outer {
                    let src = &gy[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        let dst = &mut g[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = *d + s * f;
                        }
                    }
                }
            });
        }
        Op::SumAll { x, factor } => {
            let d = gy[0] * *factor;
            acc(grads, nodes, *x, |g| g.iter_mut().for_each(|v| *v = *v + d));
        }
        Op::Norm2(x) => {
            let nrm = y[0];
            let xv = val(*x);
            if nrm > T::zero() {
                let s = gy[0] / nrm;
                acc(grads, nodes, *x, |g| {
                    for j in 0..g.len() {
                        g[j] = g[j] + s * xv[j];
                    }
                });
            }
        }
        Op::NormalizeRows { x, norms } => {
            let d = node.value.shape()[1];
            acc(grads, nodes, *x, |g| {
                for (r, &nr) in norms.iter().enumerate() {
                    let (ys, ds) = (&y[r * d..(r + 1) * d], &gy[r * d..(r + 1) * d]);
                    let dot: T = ys.iter().zip(ds).map(|(&p, &q)| p * q).sum();
                    for j in 0..d {
                        g[r * d + j] = g[r * d + j] + (ds[j] - ys[j] * dot) / nr;
                    }
                }
            });
        }
        Op::Reshape(x) => acc(grads, nodes, *x, |g| add_into(g, gy)),
        Op::Permute { x, perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let back = permute_data(gy, node.value.shape(), &inv);
            acc(grads, nodes, *x, |g| add_into(g, &back));
        }
        Op::Concat { parts, axis } => {
            let shape = node.value.shape();
            let (outer, total, inner) = split_axis(shape, *axis);
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p.0].value.shape()[*axis];
                acc(grads, nodes, p, |g| {
                    for o in 0..outer {
                        let src = &gy[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        add_into(&mut g[o * len * inner..(o + 1) * len * inner], src);
                    }
                });
                offset += len;
            }
        }
        Op::Narrow { x, axis, start } => {
            let s = nodes[x.0].value.shape();
            let (outer, full, inner) = split_axis(s, *axis);
            let len = node.value.shape()[*axis];
            acc(grads, nodes, *x, |g| {
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    add_into(&mut g[base..base + len * inner], &gy[o * len * inner..(o + 1) * len * inner]);
                }
            });
        }
        Op::MaskedSelect { x, idx } => {
            acc(grads, nodes, *x, |g| {
                for (k, &j) in idx.iter().enumerate() {
                    g[j] = g[j] + gy[k];
                }
            });
        }
    }
}
