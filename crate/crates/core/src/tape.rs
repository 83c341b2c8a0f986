//! Reverse-mode gradient accumulation over a flat operation tape.
//!
//! The tape is rebuilt for every training step: forward calls append nodes
//! (each holding its value tensor and parent indices), `backward` walks the
//! nodes in reverse and accumulates vector-Jacobian products. Parameters
//! enter as leaves bound to [`ParamStore`] names; leaves that are not on
//! any path to the loss simply keep a zero gradient.
//!
//! Recurrent cells, encoders and losses are composites of these primitives,
//! so they inherit their backward rules and stay consistent with the
//! finite-difference oracle by construction.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::params::ParamStore;
use crate::tensor::{shape_err, KernelError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Elementwise activation kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<String> },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    MatVec(usize, usize),
    Act(usize, Activation),
    Softmax(usize),
    Exp(usize),
    Sqrt(usize),
    Sum(usize),
    LogSumExp(usize),
    Concat(Vec<usize>),
    Slice { src: usize, start: usize },
    TemporalConv { seq: usize, kernel: usize },
    Conv2d { input: usize, kernel: usize, stride: usize },
    ChannelBias { map: usize, bias: usize },
    GatherCell { map: usize, cell: Option<usize> },
    MeanOf(Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Operation tape. One tape per forward pass; single writer.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` root w.r.t. `v`, if any path existed.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Untracked input tensor.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }

    /// Leaf bound to a named parameter; its gradient is written back by
    /// [`Tape::write_grads`].
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var, KernelError> {
        let value = store.value(name)?.clone();
        Ok(self.push(
            value,
            Op::Leaf {
                param: Some(name.to_string()),
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !va.same_shape(vb) {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !va.same_shape(vb) {
            return Err(shape_err(
                "sub",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Sub(a.0, b.0)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !va.same_shape(vb) {
            return Err(shape_err(
                "mul",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, KernelError> {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Scale(a.0, c)))
    }

    /// Standard matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..k {
                let x = va.data()[i * k + l];
                for j in 0..n {
                    out[i * n + j] += x * vb.data()[l * n + j];
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a.0, b.0)))
    }

    /// Matrix-vector product `[m,n] x [n] -> [m]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var, KernelError> {
        let (vw, vx) = (&self.nodes[w.0].value, &self.nodes[x.0].value);
        let (sw, sx) = (vw.shape(), vx.shape());
        if sw.len() != 2 || sx.len() != 1 || sw[1] != sx[0] {
            return Err(shape_err("matvec", format!("{sw:?} x {sx:?}")));
        }
        let (m, n) = (sw[0], sw[1]);
        let mut out = vec![0.0; m];
        for i in 0..m {
            let mut acc = 0.0;
            for j in 0..n {
                acc += vw.data()[i * n + j] * vx.data()[j];
            }
            out[i] = acc;
        }
        Ok(self.push(Tensor::vector(out), Op::MatVec(w.0, x.0)))
    }

    /// Elementwise activation. Rejects non-finite input; the relu
    /// subgradient at 0 is 0.
    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var, KernelError> {
        let va = &self.nodes[a.0].value;
        if !va.is_finite() {
            return Err(KernelError::NonFinite {
                op: "activation",
                detail: "input contains non-finite entries".to_string(),
            });
        }
        let data = va
            .data()
            .iter()
            .map(|&x| match kind {
                Activation::Relu => {
                    if x > 0.0 {
                        x
                    } else {
                        0.0
                    }
                }
                Activation::Tanh => math::tanh(x),
                Activation::Sigmoid => math::sigmoid(x),
            })
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Act(a.0, kind)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, KernelError> {
        self.activation(a, Activation::Relu)
    }

    /// Max-subtracted softmax over a vector.
    pub fn softmax(&mut self, a: Var) -> Result<Var, KernelError> {
        let va = &self.nodes[a.0].value;
        if va.shape().len() != 1 {
            return Err(shape_err(
                "softmax",
                format!("want vector, got {:?}", va.shape()),
            ));
        }
        if !va.is_finite() {
            return Err(KernelError::NonFinite {
                op: "softmax",
                detail: "input contains non-finite entries".to_string(),
            });
        }
        let value = Tensor::vector(softmax_value(va.data()));
        Ok(self.push(value, Op::Softmax(a.0)))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, KernelError> {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|&x| math::exp(x)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Exp(a.0)))
    }

    /// Elementwise square root; the subgradient at 0 is defined as 0 so
    /// exact-zero residuals stay finite.
    pub fn sqrt(&mut self, a: Var) -> Result<Var, KernelError> {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|&x| math::sqrt(x)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Sqrt(a.0)))
    }

    /// Sum of all entries -> scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var, KernelError> {
        let total: f64 = self.nodes[a.0].value.data().iter().sum();
        Ok(self.push(Tensor::scalar(total), Op::Sum(a.0)))
    }

    /// `ln(sum(exp(x)))` of a vector, max-subtracted, -> scalar.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var, KernelError> {
        let va = &self.nodes[a.0].value;
        if va.shape().len() != 1 {
            return Err(shape_err(
                "logsumexp",
                format!("want vector, got {:?}", va.shape()),
            ));
        }
        let m = va.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = va.data().iter().map(|&x| math::exp(x - m)).sum();
        Ok(self.push(Tensor::scalar(m + math::ln(s)), Op::LogSumExp(a.0)))
    }

    /// Concatenation of vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, KernelError> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs".to_string()));
        }
        let mut data = Vec::new();
        for p in parts {
            let vp = &self.nodes[p.0].value;
            if vp.shape().len() != 1 {
                return Err(shape_err(
                    "concat",
                    format!("want vectors, got {:?}", vp.shape()),
                ));
            }
            data.extend_from_slice(vp.data());
        }
        Ok(self.push(
            Tensor::vector(data),
            Op::Concat(parts.iter().map(|v| v.0).collect()),
        ))
    }

    /// Contiguous slice of a tensor's flat row-major data, as a vector.
    /// Extracts matrix rows, per-step refinement pairs, and the like.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var, KernelError> {
        let va = &self.nodes[a.0].value;
        if len == 0 || start + len > va.len() {
            return Err(shape_err(
                "slice",
                format!("[{start}..{}] of {:?}", start + len, va.shape()),
            ));
        }
        let value = Tensor::vector(va.data()[start..start + len].to_vec());
        Ok(self.push(value, Op::Slice { src: a.0, start }))
    }

    /// Valid (no-padding) 1-D convolution along time.
    /// `seq: [T, d]`, `kernel: [w, d, d']` -> `[T - w + 1, d']`.
    pub fn temporal_conv(&mut self, seq: Var, kernel: Var) -> Result<Var, KernelError> {
        let (vs, vk) = (&self.nodes[seq.0].value, &self.nodes[kernel.0].value);
        let (ss, sk) = (vs.shape(), vk.shape());
        if ss.len() != 2 || sk.len() != 3 || ss[1] != sk[1] {
            return Err(shape_err("temporal_conv", format!("seq {ss:?}, kernel {sk:?}")));
        }
        let (t, d) = (ss[0], ss[1]);
        let (w, dp) = (sk[0], sk[2]);
        if t < w {
            return Err(shape_err(
                "temporal_conv",
                format!("sequence length {t} shorter than kernel width {w}"),
            ));
        }
        let to = t - w + 1;
        let mut out = vec![0.0; to * dp];
        for ot in 0..to {
            for a in 0..w {
                for i in 0..d {
                    let x = vs.data()[(ot + a) * d + i];
                    for o in 0..dp {
                        out[ot * dp + o] += x * vk.data()[(a * d + i) * dp + o];
                    }
                }
            }
        }
        let value = Tensor::new(vec![to, dp], out)?;
        Ok(self.push(
            value,
            Op::TemporalConv {
                seq: seq.0,
                kernel: kernel.0,
            },
        ))
    }

    /// Zero-padded 2-D convolution with odd square kernels.
    /// `input: [H, W, C]`, `kernel: [k, k, C, F]` -> `[Ho, Wo, F]` with
    /// `Ho = (H + 2p - k)/stride + 1`, `p = (k - 1)/2`. Output cell `(r, c)`
    /// is centered on input cell `(r*stride, c*stride)`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var, KernelError> {
        let (vi, vk) = (&self.nodes[input.0].value, &self.nodes[kernel.0].value);
        let (si, sk) = (vi.shape(), vk.shape());
        if si.len() != 3 || sk.len() != 4 || sk[0] != sk[1] || sk[0] % 2 == 0 || si[2] != sk[2] {
            return Err(shape_err("conv2d", format!("input {si:?}, kernel {sk:?}")));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be positive".to_string()));
        }
        let (h, w, c) = (si[0], si[1], si[2]);
        let (k, f) = (sk[0], sk[3]);
        let p = (k - 1) / 2;
        let ho = (h + 2 * p - k) / stride + 1;
        let wo = (w + 2 * p - k) / stride + 1;
        let mut out = vec![0.0; ho * wo * f];
        for oy in 0..ho {
            for ox in 0..wo {
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - p as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let in_base = ((iy as usize) * w + ix as usize) * c;
                        let k_base = (ky * k + kx) * c;
                        for ch in 0..c {
                            let x = vi.data()[in_base + ch];
                            let kb = (k_base + ch) * f;
                            for o in 0..f {
                                out[(oy * wo + ox) * f + o] += x * vk.data()[kb + o];
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![ho, wo, f], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                stride,
            },
        ))
    }

    /// Adds a per-channel bias over an `[H, W, F]` map.
    pub fn channel_bias(&mut self, map: Var, bias: Var) -> Result<Var, KernelError> {
        let (vm, vb) = (&self.nodes[map.0].value, &self.nodes[bias.0].value);
        let (sm, sb) = (vm.shape(), vb.shape());
        if sm.len() != 3 || sb.len() != 1 || sm[2] != sb[0] {
            return Err(shape_err("channel_bias", format!("map {sm:?}, bias {sb:?}")));
        }
        let f = sm[2];
        let data = vm
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vb.data()[i % f])
            .collect();
        let value = Tensor::new(sm.to_vec(), data)?;
        Ok(self.push(
            value,
            Op::ChannelBias {
                map: map.0,
                bias: bias.0,
            },
        ))
    }

    /// Feature vector of one cell of an `[H, W, F]` map; `None` (out of
    /// bounds) yields a zero vector with no gradient path.
    pub fn gather_cell(&mut self, map: Var, cell: Option<usize>) -> Result<Var, KernelError> {
        let vm = &self.nodes[map.0].value;
        let sm = vm.shape();
        if sm.len() != 3 {
            return Err(shape_err("gather_cell", format!("want map, got {sm:?}")));
        }
        let f = sm[2];
        let n_cells = sm[0] * sm[1];
        let value = match cell {
            Some(i) if i < n_cells => Tensor::vector(vm.data()[i * f..(i + 1) * f].to_vec()),
            Some(i) => {
                return Err(shape_err(
                    "gather_cell",
                    format!("cell {i} out of {n_cells}"),
                ))
            }
            None => Tensor::zeros(vec![f]),
        };
        Ok(self.push(value, Op::GatherCell { map: map.0, cell }))
    }

    /// Average of same-shaped vectors (interaction-bin pooling).
    pub fn mean_of(&mut self, parts: &[Var]) -> Result<Var, KernelError> {
        if parts.is_empty() {
            return Err(shape_err("mean_of", "no inputs".to_string()));
        }
        let shape = self.nodes[parts[0].0].value.shape().to_vec();
        let mut acc = vec![0.0; self.nodes[parts[0].0].value.len()];
        for p in parts {
            let vp = &self.nodes[p.0].value;
            if vp.shape() != shape.as_slice() {
                return Err(shape_err(
                    "mean_of",
                    format!("{:?} vs {:?}", vp.shape(), shape),
                ));
            }
            for (a, b) in acc.iter_mut().zip(vp.data()) {
                *a += b;
            }
        }
        let inv = 1.0 / parts.len() as f64;
        for a in &mut acc {
            *a *= inv;
        }
        let value = Tensor::new(shape, acc)?;
        Ok(self.push(value, Op::MeanOf(parts.iter().map(|v| v.0).collect())))
    }

    /// `sum(a * b)` for same-shaped tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let m = self.mul(a, b)?;
        self.sum(m)
    }

    /// `relu(W x + b)` and friends.
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Result<Var, KernelError> {
        let wx = self.matvec(w, x)?;
        self.add(wx, b)
    }

    /// Reverse-mode accumulation from a scalar root. Gradients of all
    /// reachable nodes become available through [`Tape::grad`].
    pub fn backward(&mut self, root: Var) -> Result<(), KernelError> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(KernelError::Contract {
                op: "backward",
                detail: format!(
                    "root must be scalar, got shape {:?}",
                    self.nodes[root.0].value.shape()
                ),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Adds every bound leaf's gradient into the parameter store.
    pub fn write_grads(&self, store: &mut ParamStore) -> Result<(), KernelError> {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(name) } = &node.op {
                let zero;
                let g = match self.grads.get(i).and_then(|g| g.as_ref()) {
                    Some(g) => g,
                    None => {
                        zero = Tensor::zeros(node.value.shape().to_vec());
                        &zero
                    }
                };
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |grads: &mut [Option<Tensor>], j: usize, contrib: Tensor| match &mut grads[j] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(contrib.data()) {
                    *a += b;
                }
            }
            None => grads[j] = Some(contrib),
        };
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                let neg = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().map(|x| -x).collect(),
                )
                .expect("shape");
                acc(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect(),
                )
                .expect("shape");
                let gb = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect(),
                )
                .expect("shape");
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Scale(a, c) => {
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().map(|x| x * c).collect(),
                )
                .expect("shape");
                acc(grads, *a, ga);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                // dA = G B^T
                let mut da = vec![0.0; m * k];
                for i2 in 0..m {
                    for j in 0..n {
                        let gx = g.data()[i2 * n + j];
                        for l in 0..k {
                            da[i2 * k + l] += gx * vb.data()[l * n + j];
                        }
                    }
                }
                // dB = A^T G
                let mut db = vec![0.0; k * n];
                for i2 in 0..m {
                    for l in 0..k {
                        let x = va.data()[i2 * k + l];
                        for j in 0..n {
                            db[l * n + j] += x * g.data()[i2 * n + j];
                        }
                    }
                }
                acc(grads, *a, Tensor::new(vec![m, k], da).expect("shape"));
                acc(grads, *b, Tensor::new(vec![k, n], db).expect("shape"));
            }
            Op::MatVec(w, x) => {
                let (vw, vx) = (&self.nodes[*w].value, &self.nodes[*x].value);
                let (m, n) = (vw.shape()[0], vw.shape()[1]);
                let mut dw = vec![0.0; m * n];
                let mut dx = vec![0.0; n];
                for i2 in 0..m {
                    let gi = g.data()[i2];
                    for j in 0..n {
                        dw[i2 * n + j] += gi * vx.data()[j];
                        dx[j] += gi * vw.data()[i2 * n + j];
                    }
                }
                acc(grads, *w, Tensor::new(vec![m, n], dw).expect("shape"));
                acc(grads, *x, Tensor::vector(dx));
            }
            Op::Act(a, kind) => {
                let y = &self.nodes[i].value;
                let x = &self.nodes[*a].value;
                let data = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(j, &gj)| match kind {
                        Activation::Relu => {
                            if x.data()[j] > 0.0 {
                                gj
                            } else {
                                0.0
                            }
                        }
                        Activation::Tanh => gj * (1.0 - y.data()[j] * y.data()[j]),
                        Activation::Sigmoid => gj * y.data()[j] * (1.0 - y.data()[j]),
                    })
                    .collect();
                acc(grads, *a, Tensor::new(g.shape().to_vec(), data).expect("shape"));
            }
            Op::Softmax(a) => {
                let y = &self.nodes[i].value;
                let inner: f64 = g.data().iter().zip(y.data()).map(|(gj, yj)| gj * yj).sum();
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(yj, gj)| yj * (gj - inner))
                    .collect();
                acc(grads, *a, Tensor::vector(data));
            }
            Op::Exp(a) => {
                let y = &self.nodes[i].value;
                let data = g.data().iter().zip(y.data()).map(|(gj, yj)| gj * yj).collect();
                acc(grads, *a, Tensor::new(g.shape().to_vec(), data).expect("shape"));
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[i].value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gj, yj)| if *yj > 0.0 { gj / (2.0 * yj) } else { 0.0 })
                    .collect();
                acc(grads, *a, Tensor::new(g.shape().to_vec(), data).expect("shape"));
            }
            Op::Sum(a) => {
                let va = &self.nodes[*a].value;
                let gx = g.data()[0];
                let data = vec![gx; va.len()];
                acc(grads, *a, Tensor::new(va.shape().to_vec(), data).expect("shape"));
            }
            Op::LogSumExp(a) => {
                let va = &self.nodes[*a].value;
                let soft = softmax_value(va.data());
                let gx = g.data()[0];
                let data = soft.iter().map(|s| gx * s).collect();
                acc(grads, *a, Tensor::vector(data));
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[*p].value.len();
                    let data = g.data()[off..off + len].to_vec();
                    acc(grads, *p, Tensor::vector(data));
                    off += len;
                }
            }
            Op::Slice { src, start } => {
                let vs = &self.nodes[*src].value;
                let mut data = vec![0.0; vs.len()];
                data[*start..*start + g.len()].copy_from_slice(g.data());
                acc(grads, *src, Tensor::new(vs.shape().to_vec(), data).expect("shape"));
            }
            Op::TemporalConv { seq, kernel } => {
                let (vs, vk) = (&self.nodes[*seq].value, &self.nodes[*kernel].value);
                let (t, d) = (vs.shape()[0], vs.shape()[1]);
                let (w, dp) = (vk.shape()[0], vk.shape()[2]);
                let to = t - w + 1;
                let mut dseq = vec![0.0; t * d];
                let mut dker = vec![0.0; w * d * dp];
                for ot in 0..to {
                    for a in 0..w {
                        for i2 in 0..d {
                            let x = vs.data()[(ot + a) * d + i2];
                            for o in 0..dp {
                                let gx = g.data()[ot * dp + o];
                                dseq[(ot + a) * d + i2] += gx * vk.data()[(a * d + i2) * dp + o];
                                dker[(a * d + i2) * dp + o] += gx * x;
                            }
                        }
                    }
                }
                acc(grads, *seq, Tensor::new(vec![t, d], dseq).expect("shape"));
                acc(grads, *kernel, Tensor::new(vec![w, d, dp], dker).expect("shape"));
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
            } => {
                let (vi, vk) = (&self.nodes[*input].value, &self.nodes[*kernel].value);
                let (h, w, c) = (vi.shape()[0], vi.shape()[1], vi.shape()[2]);
                let (k, f) = (vk.shape()[0], vk.shape()[3]);
                let p = (k - 1) / 2;
                let ho = (h + 2 * p - k) / stride + 1;
                let wo = (w + 2 * p - k) / stride + 1;
                let mut din = vec![0.0; h * w * c];
                let mut dker = vec![0.0; k * k * c * f];
                for oy in 0..ho {
                    for ox in 0..wo {
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - p as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let in_base = ((iy as usize) * w + ix as usize) * c;
                                let k_base = (ky * k + kx) * c;
                                for ch in 0..c {
                                    let x = vi.data()[in_base + ch];
                                    let kb = (k_base + ch) * f;
                                    for o in 0..f {
                                        let gx = g.data()[(oy * wo + ox) * f + o];
                                        din[in_base + ch] += gx * vk.data()[kb + o];
                                        dker[kb + o] += gx * x;
                                    }
                                }
                            }
                        }
                    }
                }
                acc(grads, *input, Tensor::new(vec![h, w, c], din).expect("shape"));
                acc(grads, *kernel, Tensor::new(vec![k, k, c, f], dker).expect("shape"));
            }
            Op::ChannelBias { map, bias } => {
                let f = self.nodes[*bias].value.len();
                acc(grads, *map, g.clone());
                let mut db = vec![0.0; f];
                for (j, gx) in g.data().iter().enumerate() {
                    db[j % f] += gx;
                }
                acc(grads, *bias, Tensor::vector(db));
            }
            Op::GatherCell { map, cell } => {
                if let Some(idx) = cell {
                    let vm = &self.nodes[*map].value;
                    let f = vm.shape()[2];
                    let mut dm = vec![0.0; vm.len()];
                    dm[idx * f..(idx + 1) * f].copy_from_slice(g.data());
                    acc(grads, *map, Tensor::new(vm.shape().to_vec(), dm).expect("shape"));
                }
            }
            Op::MeanOf(parts) => {
                let inv = 1.0 / parts.len() as f64;
                for p in parts {
                    let data = g.data().iter().map(|x| x * inv).collect();
                    acc(grads, *p, Tensor::new(g.shape().to_vec(), data).expect("shape"));
                }
            }
        }
    }
}

/// Max-subtracted softmax on a raw slice.
pub(crate) fn softmax_value(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|&v| math::exp(v - m)).collect();
    let s: f64 = out.iter().sum();
    for v in &mut out {
        *v /= s;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use crate::gru::{bind_gru, gru_step, init_gru};
    use crate::params::ParamInit;
    use crate::rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_zero() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let z = tape.constant(t(&[2, 1], &[0.0, 0.0]));
        let p = tape.matmul(a, z).unwrap();
        assert_eq!(tape.value(p).data(), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[5.0, 6.0]));
        let p = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(p).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[0.0; 6]));
        let b = tape.constant(t(&[2, 2], &[0.0; 4]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn activations_pointwise() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = tape.constant(Tensor::vector(vec![0.0]));
        let th = tape.activation(z, Activation::Tanh).unwrap();
        assert_eq!(tape.value(th).data(), &[0.0]);
        let sg = tape.activation(z, Activation::Sigmoid).unwrap();
        assert_eq!(tape.value(sg).data(), &[0.5]);
    }

    #[test]
    fn activation_rejects_non_finite() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![f64::NAN]));
        assert!(matches!(
            tape.relu(x),
            Err(KernelError::NonFinite { .. })
        ));
    }

    #[test]
    fn softmax_constant_input() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![3.7, 3.7, 3.7]));
        let s = tape.softmax(x).unwrap();
        for v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_shift_invariance_and_sum() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.3, -1.2, 2.5, 0.0]));
        let xs = tape.constant(Tensor::vector(vec![5.3, 3.8, 7.5, 5.0]));
        let a = tape.softmax(x).unwrap();
        let b = tape.softmax(xs).unwrap();
        let sum: f64 = tape.value(a).data().iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12);
        for (u, v) in tape.value(a).data().iter().zip(tape.value(b).data()) {
            assert!((u - v).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_log_integers() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![
            math::ln(1.0),
            math::ln(2.0),
            math::ln(3.0),
        ]));
        let s = tape.softmax(x).unwrap();
        let want = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (u, v) in tape.value(s).data().iter().zip(want) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn temporal_conv_finite_difference_kernel() {
        let mut tape = Tape::new();
        let seq = tape.constant(t(&[3, 1], &[0.0, 1.0, 2.0]));
        let ker = tape.constant(t(&[2, 1, 1], &[-1.0, 1.0]));
        let out = tape.temporal_conv(seq, ker).unwrap();
        assert_eq!(tape.value(out).shape(), &[2, 1]);
        assert_eq!(tape.value(out).data(), &[1.0, 1.0]);
    }

    #[test]
    fn temporal_conv_zero_kernel_and_identity() {
        let mut tape = Tape::new();
        let seq = tape.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let zk = tape.constant(Tensor::zeros(vec![2, 2, 2]));
        let out = tape.temporal_conv(seq, zk).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));

        // width-1 identity kernel copies the sequence
        let ik = tape.constant(t(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let out = tape.temporal_conv(seq, ik).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(seq).data());
    }

    #[test]
    fn temporal_conv_short_sequence_rejected() {
        let mut tape = Tape::new();
        let seq = tape.constant(t(&[1, 1], &[0.0]));
        let ker = tape.constant(Tensor::zeros(vec![2, 1, 1]));
        assert!(matches!(
            tape.temporal_conv(seq, ker),
            Err(KernelError::Shape { .. })
        ));
    }

    #[test]
    fn gru_zero_params_zero_state() {
        let mut store = ParamStore::new();
        let mut r = rng::rng_from(0);
        let mut init = ParamInit::new(&mut store, &mut r);
        init_gru(&mut init, "g", 3, 2).unwrap();
        for name in ["g.wz", "g.uz", "g.wr", "g.ur", "g.wh", "g.uh"] {
            let shape = store.value(name).unwrap().shape().to_vec();
            store.set_value(name, Tensor::zeros(shape)).unwrap();
        }
        let mut tape = Tape::new();
        let g = bind_gru(&mut tape, &store, "g").unwrap();
        let h = tape.constant(Tensor::zeros(vec![3]));
        let x = tape.constant(Tensor::vector(vec![0.7, -0.3]));
        let h2 = gru_step(&mut tape, &g, h, x).unwrap();
        assert_eq!(tape.value(h2).shape(), &[3]);
        assert!(tape.value(h2).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_scalar_hand_evaluation() {
        // 1-dim cell, all weights 1, biases 0, h = 0, x = 0:
        // z = r = sigmoid(0) = 0.5, h~ = tanh(0) = 0, h' = 0.
        let mut store = ParamStore::new();
        for name in ["g.wz", "g.uz", "g.wr", "g.ur", "g.wh", "g.uh"] {
            store
                .insert(name, Tensor::matrix(1, 1, vec![1.0]).unwrap())
                .unwrap();
        }
        for name in ["g.bz", "g.br", "g.bh"] {
            store.insert(name, Tensor::vector(vec![0.0])).unwrap();
        }
        let mut tape = Tape::new();
        let g = bind_gru(&mut tape, &store, "g").unwrap();
        let h = tape.constant(Tensor::vector(vec![0.0]));
        let x = tape.constant(Tensor::vector(vec![0.0]));
        let h2 = gru_step(&mut tape, &g, h, x).unwrap();
        assert_eq!(tape.value(h2).data(), &[0.0]);

        // and with x = 1: z = r = sigmoid(1), h~ = tanh(1), h' = z * h~
        let x1 = tape.constant(Tensor::vector(vec![1.0]));
        let h3 = gru_step(&mut tape, &g, h, x1).unwrap();
        let z = math::sigmoid(1.0);
        let want = z * math::tanh(1.0);
        assert!((tape.value(h3).data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut store = ParamStore::new();
        store
            .insert("p", Tensor::vector(vec![0.4, -1.3, 2.0]))
            .unwrap();

        // loss = sum(p) -> grad all ones
        let mut tape = Tape::new();
        let p = tape.param(&store, "p").unwrap();
        let loss = tape.sum(p).unwrap();
        tape.backward(loss).unwrap();
        tape.write_grads(&mut store).unwrap();
        assert_eq!(store.grad_or_zero("p").unwrap().data(), &[1.0, 1.0, 1.0]);

        // loss = 0.5 * ||p||^2 -> grad = p
        store.zero_grads();
        let mut tape = Tape::new();
        let p = tape.param(&store, "p").unwrap();
        let sq = tape.mul(p, p).unwrap();
        let s = tape.sum(sq).unwrap();
        let loss = tape.scale(s, 0.5).unwrap();
        tape.backward(loss).unwrap();
        tape.write_grads(&mut store).unwrap();
        assert_eq!(
            store.grad_or_zero("p").unwrap().data(),
            store.value("p").unwrap().data()
        );
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(x),
            Err(KernelError::Contract { .. })
        ));
    }

    #[test]
    fn unreached_parameter_gets_zero_gradient() {
        let mut store = ParamStore::new();
        store.insert("used", Tensor::vector(vec![1.0])).unwrap();
        store.insert("unused", Tensor::vector(vec![1.0])).unwrap();
        let mut tape = Tape::new();
        let u = tape.param(&store, "used").unwrap();
        let _dangling = tape.param(&store, "unused").unwrap();
        let loss = tape.sum(u).unwrap();
        tape.backward(loss).unwrap();
        tape.write_grads(&mut store).unwrap();
        assert_eq!(store.grad_or_zero("unused").unwrap().data(), &[0.0]);
    }

    /// Builds a loss that routes through every tape primitive, so the
    /// finite-difference sweep exercises each backward rule.
    fn all_ops_loss(store: &ParamStore) -> Result<f64, KernelError> {
        let mut tape = Tape::new();
        let loss = all_ops_forward(&mut tape, store)?;
        tape.value(loss).item()
    }

    fn all_ops_forward(tape: &mut Tape, store: &ParamStore) -> Result<Var, KernelError> {
        let w1 = tape.param(store, "w1")?; // [3,4]
        let w2 = tape.param(store, "w2")?; // [2,3]
        let b1 = tape.param(store, "b1")?; // [3]
        let tker = tape.param(store, "tker")?; // [2,2,3]
        let cker = tape.param(store, "cker")?; // [3,3,2,2]
        let cbias = tape.param(store, "cbias")?; // [2]
        let g = bind_gru(tape, store, "gru")?; // hidden 3, input 3

        let x = tape.constant(Tensor::vector(vec![0.31, -0.62, 0.47, 0.11]));
        let a = tape.affine(w1, x, b1)?;
        let r = tape.relu(a)?;
        let th = tape.activation(a, Activation::Tanh)?;
        let sg = tape.activation(a, Activation::Sigmoid)?;
        let sm = tape.softmax(a)?;
        let diff = tape.sub(r, th)?;
        let prod = tape.mul(diff, sg)?;
        let ex = tape.exp(prod)?;
        let sq = tape.mul(sm, sm)?;
        let pos = tape.add(sq, ex)?;
        let rt = tape.sqrt(pos)?;

        // temporal conv + GRU roll over its rows
        let seq = tape.constant(t(
            &[4, 2],
            &[0.2, -0.1, 0.5, 0.3, -0.4, 0.6, 0.1, -0.2],
        ));
        let tc = tape.temporal_conv(seq, tker)?; // [3,3]
        let mut h = tape.constant(Tensor::zeros(vec![3]));
        for step in 0..3 {
            let row = tape.slice(tc, step * 3, 3)?;
            h = gru_step(tape, &g, h, row)?;
        }

        // scene-style conv stack + cell gather
        let grid = tape.constant(t(
            &[3, 3, 2],
            &[
                0.1, 0.9, 0.2, 0.8, 0.3, 0.7, 0.4, 0.6, 0.5, 0.5, 0.6, 0.4, 0.7, 0.3, 0.8, 0.2,
                0.9, 0.1,
            ],
        ));
        let fm = tape.conv2d(grid, cker, 1)?;
        let fm = tape.channel_bias(fm, cbias)?;
        let fm = tape.relu(fm)?;
        let cellv = tape.gather_cell(fm, Some(4))?;

        let pooled = tape.mean_of(&[r, th, sg])?;
        let joined = tape.concat(&[rt, h, cellv, pooled])?;
        let lse = tape.logsumexp(joined)?;

        let m = tape.matmul(w2, w1)?; // [2,4]
        let msum = tape.sum(m)?;
        let msc = tape.scale(msum, 0.05)?;

        let dt = tape.dot(sm, pooled)?;
        let partial = tape.add(lse, msc)?;
        tape.add(partial, dt)
    }

    fn all_ops_params(seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut r = rng::rng_from(seed);
        let mut init = ParamInit::new(&mut store, &mut r);
        init.matrix("w1", 3, 4).unwrap();
        init.matrix("w2", 2, 3).unwrap();
        init.weight("b1", vec![3], 4, 3).unwrap();
        init.weight("tker", vec![2, 2, 3], 4, 3).unwrap();
        init.weight("cker", vec![3, 3, 2, 2], 18, 2).unwrap();
        init.weight("cbias", vec![2], 2, 2).unwrap();
        init_gru(&mut init, "gru", 3, 3).unwrap();
        // non-zero biases so sigmoid/tanh paths are off-center
        for gate in ["bz", "br", "bh"] {
            let name = alloc::format!("gru.{gate}");
            let mut v = store.value(&name).unwrap().clone();
            for (i, x) in v.data_mut().iter_mut().enumerate() {
                *x = 0.05 * (i as f64 + 1.0);
            }
            store.set_value(&name, v).unwrap();
        }
        store
    }

    #[test]
    fn analytic_gradients_match_finite_differences_100_trials() {
        for trial in 0..100 {
            let mut store = all_ops_params(1000 + trial);
            let mut tape = Tape::new();
            let loss = all_ops_forward(&mut tape, &store).unwrap();
            tape.backward(loss).unwrap();
            tape.write_grads(&mut store).unwrap();
            let err = finite_diff_check(all_ops_loss, &store, 1e-6).unwrap();
            assert!(err <= 1e-4, "trial {trial}: max rel error {err}");
        }
    }

    #[test]
    fn tape_ops_are_deterministic() {
        let run = || {
            let store = all_ops_params(42);
            all_ops_loss(&store).unwrap()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn all_ops_outputs_stay_finite() {
        for trial in 0..20 {
            let store = all_ops_params(7000 + trial);
            let v = all_ops_loss(&store).unwrap();
            assert!(v.is_finite());
        }
    }
}
