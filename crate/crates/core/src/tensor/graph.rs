use super::conv::{conv2d_backward, conv2d_forward};
use super::norm::{batchnorm_backward, batchnorm_forward};
use super::pool::maxpool2d_forward;
use super::{
    axis_extents, mismatch, BatchNormMode, BatchStats, ConvGeometry, Float, Padding, Result, Tensor,
    TensorError, L2_EPS,
};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        rows: usize,
        din: usize,
        dout: usize,
    },
    Transpose {
        input: Var,
        rows: usize,
        cols: usize,
    },
    Reshape(Var),
    SoftmaxRows(Var),
    L2Normalize {
        input: Var,
        extents: (usize, usize, usize),
        norms: Vec<T>,
    },
    VladResiduals {
        assign: Var,
        features: Var,
        centres: Var,
        real: usize,
    },
    MeanTime(Var),
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    MarginScale {
        input: Var,
        scale: T,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::Relu(a) | Op::Scale(a, _) | Op::Sum(a) | Op::Reshape(a) | Op::SoftmaxRows(a) | Op::MeanTime(a) => {
                vec![*a]
            }
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::MaxPool { input, .. }
            | Op::Transpose { input, .. }
            | Op::L2Normalize { input, .. }
            | Op::MarginScale { input, .. } => vec![*input],
            Op::Linear {
                input, weight, bias, ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::VladResiduals {
                assign,
                features,
                centres,
                ..
            } => vec![*assign, *features, *centres],
            Op::SoftmaxCe { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Topologically ordered tape of op records.
///
/// Nodes are appended in creation order, so every input precedes its
/// consumers and the reverse sweep in [`Graph::backward`] visits each node
/// once. A graph built with [`Graph::inference`] skips saving backward state.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    tracking: bool,
    branches: Option<u64>,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fold(h: u64, word: u64) -> u64 {
    (h ^ word).wrapping_mul(FNV_PRIME)
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            tracking: true,
            branches: None,
        }
    }

    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            tracking: false,
            branches: None,
        }
    }

    /// Also hashes every piecewise decision (ReLU masks, maxpool winners),
    /// so two evaluations can be compared for a kink between them.
    pub fn with_branch_signature(mut self) -> Self {
        self.branches = Some(FNV_OFFSET);
        self
    }

    pub fn branch_signature(&self) -> Option<u64> {
        self.branches
    }

    pub fn is_tracking(&self) -> bool {
        self.tracking
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf; receives a gradient on backward.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        let rg = self.tracking;
        self.push_leaf(t, rg)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(t, false)
    }

    fn push_leaf(&mut self, mut t: Tensor<T>, requires_grad: bool) -> Var {
        t.clear_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Var {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced by op #{}",
            self.nodes.len()
        );
        let requires_grad = self.tracking && op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data).expect("op produced a consistent buffer");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Gradient accumulated into a leaf by the last [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: (usize, usize), padding: Padding) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(input), self.shape(kernel), stride, padding)?;
        let out = conv2d_forward(&geom, self.data(input), self.data(kernel));
        Ok(self.push(geom.output_shape().to_vec(), out, Op::Conv2d { input, kernel, geom }))
    }

    /// Normalizes over all axes but the last. In eval mode `running` must hold
    /// the running mean and variance; in train mode batch statistics are used
    /// and returned so the caller can fold them into its running buffers.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode,
        running: Option<(&[T], &[T])>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let shape = self.shape(input).to_vec();
        let channels = *shape.last().unwrap();
        if self.value(gamma).len() != channels || self.value(beta).len() != channels {
            return Err(mismatch(
                "batchnorm2d",
                format!(
                    "{channels} channels but gamma/beta have {}/{}",
                    self.value(gamma).len(),
                    self.value(beta).len()
                ),
            ));
        }
        let running = match mode {
            BatchNormMode::Train => None,
            BatchNormMode::Eval => {
                let (m, v) = running.ok_or_else(|| mismatch("batchnorm2d", "eval mode needs running statistics"))?;
                if m.len() != channels || v.len() != channels {
                    return Err(mismatch("batchnorm2d", "running statistics length"));
                }
                Some((m, v))
            }
        };
        let fwd = batchnorm_forward(self.data(input), channels, self.data(gamma), self.data(beta), running);
        let (xhat, inv_std) = if self.tracking {
            (fwd.xhat, fwd.inv_std)
        } else {
            (Vec::new(), Vec::new())
        };
        let v = self.push(
            shape,
            fwd.out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mode,
                xhat,
                inv_std,
            },
        );
        Ok((v, fwd.stats))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.data(input).iter().map(|&v| v.max(T::zero())).collect();
        if let Some(mut h) = self.branches {
            for chunk in self.data(input).chunks(64) {
                let word = chunk
                    .iter()
                    .enumerate()
                    .fold(0u64, |w, (i, &v)| w | (((v > T::zero()) as u64) << i));
                h = fold(h, word);
            }
            self.branches = Some(h);
        }
        self.push(self.shape(input).to_vec(), out, Op::Relu(input))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| *x + *y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| *x * *y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let out = self.data(input).iter().map(|&v| v * factor).collect();
        self.push(self.shape(input).to_vec(), out, Op::Scale(input, factor))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.data(input).iter().copied().sum();
        self.push(vec![1], vec![s], Op::Sum(input))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn maxpool2d(&mut self, input: Var, kernel: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let (shape, out, argmax) = maxpool2d_forward(self.data(input), self.shape(input), kernel, stride)?;
        if let Some(h) = self.branches {
            self.branches = Some(argmax.iter().fold(h, |h, &i| fold(h, i as u64)));
        }
        let argmax = if self.tracking { argmax } else { Vec::new() };
        Ok(self.push(shape, out, Op::MaxPool { input, argmax }))
    }

    /// `input · weight + bias` over the trailing axis; `weight` is `din x dout`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if ws.len() != 2 || *xs.last().unwrap() != ws[0] {
            return Err(mismatch("linear", format!("input {xs:?} with weight {ws:?}")));
        }
        let (din, dout) = (ws[0], ws[1]);
        let rows = self.value(input).len() / din;
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = bias {
            let bd = self.data(b);
            if bd.len() != dout {
                return Err(mismatch("linear", format!("bias length {} vs {dout}", bd.len())));
            }
            for row in out.chunks_exact_mut(dout) {
                row.copy_from_slice(bd);
            }
        }
        T::gemm(rows, din, dout, self.data(input), false, self.data(weight), false, &mut out, T::one());
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        Ok(self.push(
            shape,
            out,
            Op::Linear {
                input,
                weight,
                bias,
                rows,
                din,
                dout,
            },
        ))
    }

    pub fn transpose(&mut self, input: Var) -> Result<Var> {
        let &[rows, cols] = self.shape(input) else {
            return Err(mismatch("transpose", format!("expected 2-D, got {:?}", self.shape(input))));
        };
        let x = self.data(input);
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = x[r * cols + c];
            }
        }
        Ok(self.push(vec![cols, rows], out, Op::Transpose { input, rows, cols }))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(input).len() {
            return Err(mismatch("reshape", format!("{:?} into {shape:?}", self.shape(input))));
        }
        let data = self.data(input).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(input)))
    }

    /// Softmax over the trailing axis, max-subtracted.
    pub fn softmax_rows(&mut self, input: Var) -> Var {
        let shape = self.shape(input).to_vec();
        let k = *shape.last().unwrap();
        let mut out = self.data(input).to_vec();
        for row in out.chunks_exact_mut(k) {
            softmax_in_place(row);
        }
        self.push(shape, out, Op::SoftmaxRows(input))
    }

    /// Scales every slice along `axis` to unit Euclidean norm (zero slices stay zero).
    pub fn l2_normalize(&mut self, input: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(mismatch("l2_normalize", format!("axis {axis} for shape {shape:?}")));
        }
        let extents = axis_extents(&shape, axis);
        let (outer, len, inner) = extents;
        let x = self.data(input);
        let eps = T::from_f64_lossy(L2_EPS);
        let mut out = vec![T::zero(); x.len()];
        let mut norms = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let sq: T = (0..len).map(|j| x[base + j * inner].powi(2)).sum();
                let norm = sq.sqrt();
                let denom = norm.max(eps);
                for j in 0..len {
                    out[base + j * inner] = x[base + j * inner] / denom;
                }
                norms.push(norm);
            }
        }
        Ok(self.push(shape, out, Op::L2Normalize { input, extents, norms }))
    }

    /// Soft-assigned residual sums per cluster.
    ///
    /// `assign` is `N x T x (K+G)`, `features` is `N x T x D`, `centres` is
    /// `(K+G) x D`; the output keeps only the first `real` clusters:
    /// `V[n,k,j] = sum_t assign[n,t,k] * (features[n,t,j] - centres[k,j])`.
    pub fn vlad_residuals(&mut self, assign: Var, features: Var, centres: Var, real: usize) -> Result<Var> {
        let (n, t, kt) = dims3("vlad_residuals", self.shape(assign))?;
        let (nf, tf, d) = dims3("vlad_residuals", self.shape(features))?;
        let cs = self.shape(centres);
        if n != nf || t != tf || cs != [kt, d] || real == 0 || real > kt {
            return Err(mismatch(
                "vlad_residuals",
                format!(
                    "assign {:?}, features {:?}, centres {:?}, real clusters {real}",
                    self.shape(assign),
                    self.shape(features),
                    cs
                ),
            ));
        }
        let a = self.data(assign);
        let x = self.data(features);
        let c = self.data(centres);
        let mut out = vec![T::zero(); n * real * d];
        for b in 0..n {
            let ob = &mut out[b * real * d..][..real * d];
            for ti in 0..t {
                let arow = &a[(b * t + ti) * kt..][..kt];
                let xrow = &x[(b * t + ti) * d..][..d];
                for k in 0..real {
                    let w = arow[k];
                    let crow = &c[k * d..][..d];
                    let orow = &mut ob[k * d..][..d];
                    for j in 0..d {
                        orow[j] = orow[j] + w * (xrow[j] - crow[j]);
                    }
                }
            }
        }
        Ok(self.push(
            vec![n, real, d],
            out,
            Op::VladResiduals {
                assign,
                features,
                centres,
                real,
            },
        ))
    }

    /// Mean over axis 1 of an `N x T x D` tensor.
    pub fn mean_time(&mut self, input: Var) -> Result<Var> {
        let (n, t, d) = dims3("mean_time", self.shape(input))?;
        let x = self.data(input);
        let inv = T::one() / T::from_usize(t).unwrap();
        let mut out = vec![T::zero(); n * d];
        for b in 0..n {
            for ti in 0..t {
                for j in 0..d {
                    out[b * d + j] = out[b * d + j] + x[(b * t + ti) * d + j];
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        Ok(self.push(vec![n, d], out, Op::MeanTime(input)))
    }

    /// Mean softmax cross-entropy of `n x C` logits against integer labels.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let &[n, classes] = self.shape(logits) else {
            return Err(mismatch("softmax_ce", format!("expected 2-D logits, got {:?}", self.shape(logits))));
        };
        if labels.len() != n {
            return Err(mismatch("softmax_ce", format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::LabelOutOfRange { label, classes });
        }
        let z = self.data(logits);
        let mut probs = vec![T::zero(); z.len()];
        let mut loss = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &z[r * classes..][..classes];
            let (top, max) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (i, v)| if v > best.1 { (i, v) } else { best });
            // ln(sum exp(v - max)) as ln_1p over the non-maximal terms keeps
            // tiny losses of confident rows from rounding to zero.
            let rest = row
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != top)
                .map(|(_, &v)| (v - max).exp())
                .sum::<T>();
            let log_norm = rest.ln_1p();
            loss = loss + ((max - row[label]) + log_norm);
            for (p, &v) in probs[r * classes..][..classes].iter_mut().zip(row) {
                *p = (v - max - log_norm).exp();
            }
        }
        loss = loss / T::from_usize(n).unwrap();
        let probs = if self.tracking { probs } else { Vec::new() };
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// `scale * (x - margin * onehot(labels))` on `n x C` cosine logits.
    pub fn margin_scale(&mut self, input: Var, labels: &[usize], margin: T, scale: T) -> Result<Var> {
        let &[n, classes] = self.shape(input) else {
            return Err(mismatch("margin_scale", format!("expected 2-D input, got {:?}", self.shape(input))));
        };
        if labels.len() != n {
            return Err(mismatch("margin_scale", format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::LabelOutOfRange { label, classes });
        }
        let mut out: Vec<T> = self.data(input).iter().map(|&v| v * scale).collect();
        for (r, &l) in labels.iter().enumerate() {
            let i = r * classes + l;
            out[i] = out[i] - scale * margin;
        }
        Ok(self.push(vec![n, classes], out, Op::MarginScale { input, scale }))
    }

    /// Reverse sweep from a scalar output. Gradients land on every leaf that
    /// was created with [`Graph::param`].
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if !self.tracking {
            return Err(TensorError::NotTracking);
        }
        if self.value(output).len() != 1 {
            return Err(TensorError::NonScalarOutput(self.shape(output).to_vec()));
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![T::one()]);
        for i in (0..=output.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.set_grad(dy)?;
                continue;
            }
            for (var, g) in self.local_backward(i, &dy) {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.len(), self.nodes[var.0].value.len());
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_backward(&self, i: usize, dy: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d { input, kernel, geom } => {
                let (dx, dk) = conv2d_backward(
                    geom,
                    self.data(*input),
                    self.data(*kernel),
                    dy,
                    self.needs(*input),
                    self.needs(*kernel),
                );
                let mut out = Vec::new();
                out.extend(dx.map(|g| (*input, g)));
                out.extend(dk.map(|g| (*kernel, g)));
                out
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mode,
                xhat,
                inv_std,
            } => {
                let (dx, dg, db) = batchnorm_backward(dy, xhat, inv_std, self.data(*gamma), *mode);
                vec![(*input, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                let g = dy
                    .iter()
                    .zip(x)
                    .map(|(d, v)| if *v > T::zero() { *d } else { T::zero() })
                    .collect();
                vec![(*a, g)]
            }
            Op::Add(a, b) => vec![(*a, dy.to_vec()), (*b, dy.to_vec())],
            Op::Mul(a, b) => {
                let ga = dy.iter().zip(self.data(*b)).map(|(d, v)| *d * *v).collect();
                let gb = dy.iter().zip(self.data(*a)).map(|(d, v)| *d * *v).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, f) => vec![(*a, dy.iter().map(|d| *d * *f).collect())],
            Op::Sum(a) => vec![(*a, vec![dy[0]; self.value(*a).len()])],
            Op::MaxPool { input, argmax } => {
                let mut g = vec![T::zero(); self.value(*input).len()];
                for (d, &idx) in dy.iter().zip(argmax) {
                    g[idx] = g[idx] + *d;
                }
                vec![(*input, g)]
            }
            Op::Linear {
                input,
                weight,
                bias,
                rows,
                din,
                dout,
            } => {
                let mut out = Vec::new();
                if self.needs(*input) {
                    let mut dx = vec![T::zero(); rows * din];
                    T::gemm(*rows, *dout, *din, dy, false, self.data(*weight), true, &mut dx, T::zero());
                    out.push((*input, dx));
                }
                if self.needs(*weight) {
                    let mut dw = vec![T::zero(); din * dout];
                    T::gemm(*din, *rows, *dout, self.data(*input), true, dy, false, &mut dw, T::zero());
                    out.push((*weight, dw));
                }
                if let Some(b) = bias {
                    let mut db = vec![T::zero(); *dout];
                    for row in dy.chunks_exact(*dout) {
                        db.iter_mut().zip(row).for_each(|(a, v)| *a = *a + *v);
                    }
                    out.push((*b, db));
                }
                out
            }
            Op::Transpose { input, rows, cols } => {
                let mut g = vec![T::zero(); rows * cols];
                for r in 0..*rows {
                    for c in 0..*cols {
                        g[r * cols + c] = dy[c * rows + r];
                    }
                }
                vec![(*input, g)]
            }
            Op::Reshape(a) => vec![(*a, dy.to_vec())],
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let k = *node.value.shape().last().unwrap();
                let mut g = vec![T::zero(); y.len()];
                for ((gr, yr), dr) in g.chunks_exact_mut(k).zip(y.chunks_exact(k)).zip(dy.chunks_exact(k)) {
                    let dot: T = yr.iter().zip(dr).map(|(a, b)| *a * *b).sum();
                    for j in 0..k {
                        gr[j] = yr[j] * (dr[j] - dot);
                    }
                }
                vec![(*a, g)]
            }
            Op::L2Normalize { input, extents, norms } => {
                let (outer, len, inner) = *extents;
                let y = node.value.data();
                let eps = T::from_f64_lossy(L2_EPS);
                let mut g = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let norm = norms[o * inner + i];
                        if norm > eps {
                            let dot: T = (0..len).map(|j| dy[base + j * inner] * y[base + j * inner]).sum();
                            for j in 0..len {
                                let idx = base + j * inner;
                                g[idx] = (dy[idx] - y[idx] * dot) / norm;
                            }
                        } else {
                            for j in 0..len {
                                let idx = base + j * inner;
                                g[idx] = dy[idx] / eps;
                            }
                        }
                    }
                }
                vec![(*input, g)]
            }
            Op::VladResiduals {
                assign,
                features,
                centres,
                real,
            } => {
                let real = *real;
                let [n, t, kt] = self.shape(*assign)[..] else { unreachable!() };
                let d = self.shape(*features)[2];
                let a = self.data(*assign);
                let x = self.data(*features);
                let c = self.data(*centres);
                let mut da = vec![T::zero(); a.len()];
                let mut dx = vec![T::zero(); x.len()];
                let mut dc = vec![T::zero(); c.len()];
                for b in 0..n {
                    let dv = &dy[b * real * d..][..real * d];
                    for ti in 0..t {
                        let row = b * t + ti;
                        let xrow = &x[row * d..][..d];
                        for k in 0..real {
                            let w = a[row * kt + k];
                            let dvk = &dv[k * d..][..d];
                            let crow = &c[k * d..][..d];
                            let mut acc = T::zero();
                            for j in 0..d {
                                acc = acc + dvk[j] * (xrow[j] - crow[j]);
                                dx[row * d + j] = dx[row * d + j] + dvk[j] * w;
                                dc[k * d + j] = dc[k * d + j] - dvk[j] * w;
                            }
                            da[row * kt + k] = acc;
                        }
                    }
                }
                vec![(*assign, da), (*features, dx), (*centres, dc)]
            }
            Op::MeanTime(a) => {
                let [n, t, d] = self.shape(*a)[..] else { unreachable!() };
                let inv = T::one() / T::from_usize(t).unwrap();
                let mut g = vec![T::zero(); n * t * d];
                for b in 0..n {
                    for ti in 0..t {
                        for j in 0..d {
                            g[(b * t + ti) * d + j] = dy[b * d + j] * inv;
                        }
                    }
                }
                vec![(*a, g)]
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let classes = self.shape(*logits)[1];
                let scale = dy[0] / T::from_usize(labels.len()).unwrap();
                let mut g: Vec<T> = probs.iter().map(|p| *p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    g[r * classes + l] = g[r * classes + l] - scale;
                }
                vec![(*logits, g)]
            }
            Op::MarginScale { input, scale } => vec![(*input, dy.iter().map(|d| *d * *scale).collect())],
        }
    }
}

fn dims3(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(mismatch(op, format!("expected 3-D tensor, got {shape:?}"))),
    }
}

pub(crate) fn softmax_in_place<T: Float>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}
