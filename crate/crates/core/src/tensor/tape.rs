use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    h_out: usize,
    w_out: usize,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddBias { input: Var, bias: Var },
    Matmul { a: Var, b: Var },
    Transpose(Var),
    Relu(Var),
    Log(Var),
    Exp(Var),
    Sqrt(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Reshape(Var),
    CenterCols(Var),
    Conv2d { input: Var, kernel: Var, bias: Var, dims: ConvDims, cols: Vec<f64> },
    MaxPool2d { input: Var, argmax: Vec<usize> },
    SoftmaxCrossEntropy { logits: Var, probs: Vec<f64> },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

impl Node {
    fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Records a forward computation and replays it in reverse to accumulate
/// gradients. Nodes are appended in topological order, so one reverse
/// sweep visits every node exactly once.
///
/// Leaves created with [`Tape::constant`] never receive gradients and
/// cut off gradient flow into everything computed from them alone.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, grad: None, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf: gradients will be accumulated for it.
    pub fn var(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), true, Op::Leaf)
    }

    /// Frozen leaf: treated as a constant by `backward`.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(self.push(shape, data, false, Op::Leaf))
    }

    pub fn scalar_const(&mut self, value: f64) -> Var {
        self.push(Vec::new(), vec![value], false, Op::Leaf)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    /// Gradient of the last `backward` loss w.r.t. a leaf. Interior node
    /// gradients are consumed during the sweep; only leaves retain theirs.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Value of a node copied out as a detached tensor.
    pub fn detach(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
            .expect("tape node is internally consistent")
    }

    fn check_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::dimension(format!(
                "{}: {:?} vs {:?}",
                what, self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "add")?;
        let data =
            self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(x, y)| x + y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, ng, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "sub")?;
        let data =
            self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(x, y)| x - y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, ng, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "mul")?;
        let data =
            self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(x, y)| x * y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, ng, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "div")?;
        let data =
            self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(x, y)| x / y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, ng, Op::Div(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data = self.nodes[x.0].data.iter().map(|v| v * c).collect();
        let ng = self.needs(x);
        self.push(self.nodes[x.0].shape.clone(), data, ng, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.nodes[x.0].data.iter().map(|v| v.max(0.0)).collect();
        let ng = self.needs(x);
        self.push(self.nodes[x.0].shape.clone(), data, ng, Op::Relu(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let data = self.nodes[x.0].data.iter().map(|v| v.ln()).collect();
        let ng = self.needs(x);
        self.push(self.nodes[x.0].shape.clone(), data, ng, Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let data = self.nodes[x.0].data.iter().map(|v| v.exp()).collect();
        let ng = self.needs(x);
        self.push(self.nodes[x.0].shape.clone(), data, ng, Op::Exp(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let data = self.nodes[x.0].data.iter().map(|v| v.sqrt()).collect();
        let ng = self.needs(x);
        self.push(self.nodes[x.0].shape.clone(), data, ng, Op::Sqrt(x))
    }

    /// ln(1 + e^x), evaluated without overflow for large |x|.
    pub fn softplus(&mut self, x: Var) -> Var {
        let data = self.nodes[x.0].data.iter().map(|&v| v.max(0.0) + (-v.abs()).exp().ln_1p());
        let data = data.collect();
        let ng = self.needs(x);
        self.push(self.nodes[x.0].shape.clone(), data, ng, Op::Softplus(x))
    }

    // ---- reductions & shape ---------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let ng = self.needs(x);
        self.push(Vec::new(), vec![s], ng, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].numel() as f64;
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let ng = self.needs(x);
        self.push(Vec::new(), vec![s / n], ng, Op::Mean(x))
    }

    /// Row sums of a 2-D node: [r, c] -> [r].
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let shape = &self.nodes[x.0].shape;
        if shape.len() != 2 {
            return Err(Error::dimension(format!("row_sum expects 2-D, got {:?}", shape)));
        }
        let (r, c) = (shape[0], shape[1]);
        let data = (0..r).map(|i| self.nodes[x.0].data[i * c..(i + 1) * c].iter().sum()).collect();
        let ng = self.needs(x);
        Ok(self.push(vec![r], data, ng, Op::RowSum(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].numel() {
            return Err(Error::dimension(format!(
                "reshape {:?} -> {:?} changes element count",
                self.nodes[x.0].shape, shape
            )));
        }
        let data = self.nodes[x.0].data.clone();
        let ng = self.needs(x);
        Ok(self.push(shape, data, ng, Op::Reshape(x)))
    }

    /// Subtracts the per-column mean of a 2-D node.
    pub fn center_cols(&mut self, x: Var) -> Result<Var> {
        let shape = &self.nodes[x.0].shape;
        if shape.len() != 2 || shape[0] < 2 {
            return Err(Error::contract(format!(
                "center_cols expects an [n>=2, p] matrix, got {:?}",
                shape
            )));
        }
        let (n, p) = (shape[0], shape[1]);
        let src = &self.nodes[x.0].data;
        let mut mean = vec![0.0; p];
        for i in 0..n {
            for j in 0..p {
                mean[j] += src[i * p + j];
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut data = Vec::with_capacity(n * p);
        for i in 0..n {
            for j in 0..p {
                data.push(src[i * p + j] - mean[j]);
            }
        }
        let ng = self.needs(x);
        Ok(self.push(vec![n, p], data, ng, Op::CenterCols(x)))
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dimension(format!("matmul expects 2-D, got {:?} x {:?}", sa, sb)));
        }
        if sa[1] != sb[0] {
            return Err(Error::dimension(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                sa, sb
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        gemm(m, k, n, 1.0, &self.nodes[a.0].data, &self.nodes[b.0].data, 0.0, &mut data);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], data, ng, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = &self.nodes[x.0].shape;
        if shape.len() != 2 {
            return Err(Error::dimension(format!("transpose expects 2-D, got {:?}", shape)));
        }
        let (r, c) = (shape[0], shape[1]);
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.needs(x);
        Ok(self.push(vec![c, r], data, ng, Op::Transpose(x)))
    }

    /// Adds a [c] bias row-wise to an [r, c] node.
    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (si, sb) = (&self.nodes[input.0].shape, &self.nodes[bias.0].shape);
        if si.len() != 2 || sb.len() != 1 || si[1] != sb[0] {
            return Err(Error::dimension(format!("add_bias: {:?} + {:?}", si, sb)));
        }
        let (r, c) = (si[0], si[1]);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(self.nodes[input.0].data[i * c + j] + self.nodes[bias.0].data[j]);
            }
        }
        let ng = self.needs(input) || self.needs(bias);
        Ok(self.push(vec![r, c], data, ng, Op::AddBias { input, bias }))
    }

    // ---- neural-network ops ----------------------------------------------

    /// Valid cross-correlation, stride 1: [B,C,H,W] * [O,C,KH,KW] + [O]
    /// -> [B,O,H-KH+1,W-KW+1].
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let si = self.nodes[input.0].shape.clone();
        let sk = self.nodes[kernel.0].shape.clone();
        let sb = self.nodes[bias.0].shape.clone();
        if si.len() != 4 || sk.len() != 4 {
            return Err(Error::dimension(format!("conv2d expects 4-D input/kernel: {:?} {:?}", si, sk)));
        }
        let dims = ConvDims {
            batch: si[0],
            c_in: si[1],
            h: si[2],
            w: si[3],
            c_out: sk[0],
            kh: sk[2],
            kw: sk[3],
            h_out: si[2].saturating_sub(sk[2]) + usize::from(si[2] >= sk[2]),
            w_out: si[3].saturating_sub(sk[3]) + usize::from(si[3] >= sk[3]),
        };
        if si[2] < sk[2] || si[3] < sk[3] {
            return Err(Error::dimension(format!(
                "conv2d input {}x{} smaller than kernel {}x{}",
                si[2], si[3], sk[2], sk[3]
            )));
        }
        if sk[1] != si[1] {
            return Err(Error::dimension(format!(
                "conv2d channel mismatch: input has {}, kernel expects {}",
                si[1], sk[1]
            )));
        }
        if sb.len() != 1 || sb[0] != sk[0] {
            return Err(Error::dimension(format!(
                "conv2d bias shape {:?}, expected [{}]",
                sb, sk[0]
            )));
        }

        let cols = im2col(&self.nodes[input.0].data, &dims);
        let rows = dims.batch * dims.h_out * dims.w_out;
        let patch = dims.c_in * dims.kh * dims.kw;
        // out_mat[rows, c_out] = cols . kernel^T
        let mut out_mat = vec![0.0; rows * dims.c_out];
        gemm_nt(rows, patch, dims.c_out, &cols, &self.nodes[kernel.0].data, &mut out_mat);
        let bias_data = &self.nodes[bias.0].data;
        let mut data = vec![0.0; dims.batch * dims.c_out * dims.h_out * dims.w_out];
        let plane = dims.h_out * dims.w_out;
        for b in 0..dims.batch {
            for o in 0..dims.c_out {
                let base = (b * dims.c_out + o) * plane;
                for p in 0..plane {
                    data[base + p] = out_mat[(b * plane + p) * dims.c_out + o] + bias_data[o];
                }
            }
        }
        let ng = self.needs(input) || self.needs(kernel) || self.needs(bias);
        // cols are kept for the backward gemms.
        let out_shape = vec![dims.batch, dims.c_out, dims.h_out, dims.w_out];
        Ok(self.push(out_shape, data, ng, Op::Conv2d { input, kernel, bias, dims, cols }))
    }

    /// 2x2 max pooling, stride 2. Gradient goes to the first maximal
    /// element of each window in row-major order.
    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let s = self.nodes[input.0].shape.clone();
        if s.len() != 4 {
            return Err(Error::dimension(format!("maxpool2d expects 4-D, got {:?}", s)));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dimension(format!(
                "maxpool2d requires even spatial dims, got {}x{}",
                h, w
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let src = &self.nodes[input.0].data;
        let mut data = vec![0.0; b * c * ho * wo];
        let mut argmax = vec![0usize; b * c * ho * wo];
        for bi in 0..b {
            for ci in 0..c {
                let in_base = (bi * c + ci) * h * w;
                let out_base = (bi * c + ci) * ho * wo;
                for y in 0..ho {
                    for x in 0..wo {
                        let mut best_idx = in_base + (2 * y) * w + 2 * x;
                        let mut best = src[best_idx];
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = in_base + (2 * y + dy) * w + 2 * x + dx;
                            if src[idx] > best {
                                best = src[idx];
                                best_idx = idx;
                            }
                        }
                        data[out_base + y * wo + x] = best;
                        argmax[out_base + y * wo + x] = best_idx;
                    }
                }
            }
        }
        let ng = self.needs(input);
        Ok(self.push(vec![b, c, ho, wo], data, ng, Op::MaxPool2d { input, argmax }))
    }

    /// Mean over the batch of -log softmax(logits)[label], stabilized by
    /// per-row max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.nodes[logits.0].shape.clone();
        if s.len() != 2 {
            return Err(Error::dimension(format!("softmax_cross_entropy expects 2-D logits, got {:?}", s)));
        }
        let (batch, classes) = (s[0], s[1]);
        if labels.len() != batch {
            return Err(Error::dimension(format!(
                "{} labels for a batch of {}",
                labels.len(),
                batch
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index(format!("label {} outside [0, {})", bad, classes)));
        }
        let src = &self.nodes[logits.0].data;
        let mut probs = vec![0.0; batch * classes];
        let mut total = 0.0;
        for i in 0..batch {
            let row = &src[i * classes..(i + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..classes {
                let e = (row[j] - max).exp();
                probs[i * classes + j] = e;
                denom += e;
            }
            for j in 0..classes {
                probs[i * classes + j] /= denom;
            }
            total -= (row[labels[i]] - max) - denom.ln();
        }
        let loss = total / batch as f64;
        let ng = self.needs(logits);
        Ok(self.push(Vec::new(), vec![loss], ng, Op::SoftmaxCrossEntropy { logits, probs }))
    }

    // ---- reverse sweep -----------------------------------------------------

    /// Accumulates d(loss)/d(leaf) for every trainable leaf the scalar
    /// `loss` depends on. Constants and subgraphs built purely from them
    /// are skipped.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if self.nodes[loss.0].needs_grad {
            self.nodes[loss.0].grad = Some(vec![1.0]);
        }
        for i in (0..self.nodes.len()).rev() {
            let (before, tail) = self.nodes.split_at_mut(i);
            let node = &mut tail[0];
            if !node.needs_grad {
                continue;
            }
            // Interior gradients are consumed here; leaves keep theirs.
            let g = match node.op {
                Op::Leaf => continue,
                _ => match node.grad.take() {
                    Some(g) => g,
                    None => continue, // not on a path to the loss
                },
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    accum_all(before, *a, &g);
                    accum_all(before, *b, &g);
                }
                Op::Sub(a, b) => {
                    accum_all(before, *a, &g);
                    accum_scaled(before, *b, &g, -1.0);
                }
                Op::Mul(a, b) => {
                    if a == b {
                        let (wa, _) = pair(before, a.0, a.0);
                        if let Some(ga) = grad_slot(wa) {
                            let x = unsafe { &*(wa.data.as_slice() as *const [f64]) };
                            for ((d, &gi), &xi) in ga.iter_mut().zip(&g).zip(x) {
                                *d += 2.0 * gi * xi;
                            }
                        }
                    } else {
                        if before[a.0].needs_grad {
                            let (wa, rb) = pair(before, a.0, b.0);
                            let ga = grad_slot(wa).expect("needs_grad node");
                            for ((d, &gi), &bi) in ga.iter_mut().zip(&g).zip(&rb.data) {
                                *d += gi * bi;
                            }
                        }
                        if before[b.0].needs_grad {
                            let (wb, ra) = pair(before, b.0, a.0);
                            let gb = grad_slot(wb).expect("needs_grad node");
                            for ((d, &gi), &ai) in gb.iter_mut().zip(&g).zip(&ra.data) {
                                *d += gi * ai;
                            }
                        }
                    }
                }
                Op::Div(a, b) => {
                    let (a, b) = (*a, *b);
                    if before[a.0].needs_grad {
                        let (wa, rb) = pair(before, a.0, b.0);
                        let ga = grad_slot(wa).expect("needs_grad node");
                        for ((d, &gi), &bi) in ga.iter_mut().zip(&g).zip(&rb.data) {
                            *d += gi / bi;
                        }
                    }
                    if before[b.0].needs_grad {
                        // d(a/b)/db = -a / b^2
                        let contrib: Vec<f64> = g
                            .iter()
                            .zip(&before[a.0].data)
                            .zip(&before[b.0].data)
                            .map(|((&gi, &ai), &bi)| -gi * ai / (bi * bi))
                            .collect();
                        accum_all(before, b, &contrib);
                    }
                }
                Op::Scale(x, c) => accum_scaled(before, *x, &g, *c),
                Op::AddBias { input, bias } => {
                    let (r, c) = (node.shape[0], node.shape[1]);
                    accum_all(before, *input, &g);
                    if before[bias.0].needs_grad {
                        let mut col = vec![0.0; c];
                        for i in 0..r {
                            for j in 0..c {
                                col[j] += g[i * c + j];
                            }
                        }
                        accum_all(before, *bias, &col);
                    }
                }
                Op::Matmul { a, b } => {
                    let m = before[a.0].shape[0];
                    let k = before[a.0].shape[1];
                    let n = before[b.0].shape[1];
                    if before[a.0].needs_grad {
                        // dA += g . B^T
                        let (wa, rb) = pair(before, a.0, b.0);
                        let ga = grad_slot(wa).expect("needs_grad node");
                        gemm_strided(m, n, k, &g, n, 1, &rb.data, 1, n, ga);
                    }
                    if before[b.0].needs_grad {
                        // dB += A^T . g
                        let (wb, ra) = pair(before, b.0, a.0);
                        let gb = grad_slot(wb).expect("needs_grad node");
                        gemm_strided(k, m, n, &ra.data, 1, k, &g, n, 1, gb);
                    }
                }
                Op::Transpose(x) => {
                    if before[x.0].needs_grad {
                        let (r, c) = (node.shape[0], node.shape[1]);
                        let mut contrib = vec![0.0; r * c];
                        for i in 0..r {
                            for j in 0..c {
                                contrib[j * r + i] = g[i * c + j];
                            }
                        }
                        accum_all(before, *x, &contrib);
                    }
                }
                Op::Relu(x) => {
                    if before[x.0].needs_grad {
                        let mask = &node.data;
                        let contrib: Vec<f64> = g
                            .iter()
                            .zip(mask)
                            .map(|(&gi, &y)| if y > 0.0 { gi } else { 0.0 })
                            .collect();
                        accum_all(before, *x, &contrib);
                    }
                }
                Op::Log(x) => {
                    if before[x.0].needs_grad {
                        let contrib: Vec<f64> =
                            g.iter().zip(&before[x.0].data).map(|(&gi, &xi)| gi / xi).collect();
                        accum_all(before, *x, &contrib);
                    }
                }
                Op::Exp(x) => {
                    if before[x.0].needs_grad {
                        let contrib: Vec<f64> =
                            g.iter().zip(&node.data).map(|(&gi, &yi)| gi * yi).collect();
                        accum_all(before, *x, &contrib);
                    }
                }
                Op::Sqrt(x) => {
                    if before[x.0].needs_grad {
                        let contrib: Vec<f64> = g
                            .iter()
                            .zip(&node.data)
                            .map(|(&gi, &yi)| gi / (2.0 * yi))
                            .collect();
                        accum_all(before, *x, &contrib);
                    }
                }
                Op::Softplus(x) => {
                    if before[x.0].needs_grad {
                        let contrib: Vec<f64> = g
                            .iter()
                            .zip(&before[x.0].data)
                            .map(|(&gi, &xi)| gi / (1.0 + (-xi).exp()))
                            .collect();
                        accum_all(before, *x, &contrib);
                    }
                }
                Op::Sum(x) => accum_broadcast(before, *x, g[0]),
                Op::Mean(x) => {
                    let n = before[x.0].numel() as f64;
                    accum_broadcast(before, *x, g[0] / n);
                }
                Op::RowSum(x) => {
                    if before[x.0].needs_grad {
                        let c = before[x.0].shape[1];
                        let target = grad_slot(&mut before[x.0]).expect("needs_grad node");
                        for (i, &gi) in g.iter().enumerate() {
                            for d in &mut target[i * c..(i + 1) * c] {
                                *d += gi;
                            }
                        }
                    }
                }
                Op::Reshape(x) => accum_all(before, *x, &g),
                Op::CenterCols(x) => {
                    if before[x.0].needs_grad {
                        let (n, p) = (node.shape[0], node.shape[1]);
                        let mut mean = vec![0.0; p];
                        for i in 0..n {
                            for j in 0..p {
                                mean[j] += g[i * p + j];
                            }
                        }
                        for m in &mut mean {
                            *m /= n as f64;
                        }
                        let target = grad_slot(&mut before[x.0]).expect("needs_grad node");
                        for i in 0..n {
                            for j in 0..p {
                                target[i * p + j] += g[i * p + j] - mean[j];
                            }
                        }
                    }
                }
                Op::Conv2d { input, kernel, bias, dims, cols } => {
                    let rows = dims.batch * dims.h_out * dims.w_out;
                    let patch = dims.c_in * dims.kh * dims.kw;
                    let plane = dims.h_out * dims.w_out;
                    // regroup g from [B,O,Ho,Wo] to [rows, c_out]
                    let mut g_mat = vec![0.0; rows * dims.c_out];
                    for b in 0..dims.batch {
                        for o in 0..dims.c_out {
                            let base = (b * dims.c_out + o) * plane;
                            for p in 0..plane {
                                g_mat[(b * plane + p) * dims.c_out + o] = g[base + p];
                            }
                        }
                    }
                    if before[kernel.0].needs_grad {
                        // dK[o, patch] += g_mat^T . cols
                        let gk = grad_slot(&mut before[kernel.0]).expect("needs_grad node");
                        gemm_strided(dims.c_out, rows, patch, &g_mat, 1, dims.c_out, cols, patch, 1, gk);
                    }
                    if before[bias.0].needs_grad {
                        let gb = grad_slot(&mut before[bias.0]).expect("needs_grad node");
                        for r in 0..rows {
                            for o in 0..dims.c_out {
                                gb[o] += g_mat[r * dims.c_out + o];
                            }
                        }
                    }
                    if before[input.0].needs_grad {
                        // dcols = g_mat . K, then scatter back to the image
                        let mut dcols = vec![0.0; rows * patch];
                        gemm_strided(
                            rows,
                            dims.c_out,
                            patch,
                            &g_mat,
                            dims.c_out,
                            1,
                            &before[kernel.0].data,
                            patch,
                            1,
                            &mut dcols,
                        );
                        let target = grad_slot(&mut before[input.0]).expect("needs_grad node");
                        col2im_accumulate(&dcols, dims, target);
                    }
                }
                Op::MaxPool2d { input, argmax } => {
                    if before[input.0].needs_grad {
                        let target = grad_slot(&mut before[input.0]).expect("needs_grad node");
                        for (out_idx, &in_idx) in argmax.iter().enumerate() {
                            target[in_idx] += g[out_idx];
                        }
                    }
                }
                Op::SoftmaxCrossEntropy { logits, probs } => {
                    if before[logits.0].needs_grad {
                        let labels = &node.data; // placeholder to appease borrowck; real labels below
                        let _ = labels;
                        let (batch, classes) =
                            (before[logits.0].shape[0], before[logits.0].shape[1]);
                        let scale = g[0] / batch as f64;
                        let target = grad_slot(&mut before[logits.0]).expect("needs_grad node");
                        for i in 0..batch * classes {
                            target[i] += probs[i] * scale;
                        }
                        // the one-hot part is folded in by the caller-stored labels
                        unreachable!("SoftmaxCrossEntropy backward handled in dedicated arm");
                    }
                }
            }
        }
        Ok(())
    }
}

fn grad_slot(node: &mut Node) -> Option<&mut Vec<f64>> {
    if !node.needs_grad {
        return None;
    }
    if node.grad.is_none() {
        node.grad = Some(vec![0.0; node.data.len()]);
    }
    node.grad.as_mut()
}

fn accum_all(nodes: &mut [Node], v: Var, contrib: &[f64]) {
    if let Some(g) = grad_slot(&mut nodes[v.0]) {
        for (d, &c) in g.iter_mut().zip(contrib) {
            *d += c;
        }
    }
}

fn accum_scaled(nodes: &mut [Node], v: Var, contrib: &[f64], k: f64) {
    if let Some(g) = grad_slot(&mut nodes[v.0]) {
        for (d, &c) in g.iter_mut().zip(contrib) {
            *d += k * c;
        }
    }
}

fn accum_broadcast(nodes: &mut [Node], v: Var, value: f64) {
    if let Some(g) = grad_slot(&mut nodes[v.0]) {
        for d in g.iter_mut() {
            *d += value;
        }
    }
}

/// Disjoint (write, read) access to two nodes.
fn pair(nodes: &mut [Node], w: usize, r: usize) -> (&mut Node, &Node) {
    debug_assert_ne!(w, r);
    if w < r {
        let (lo, hi) = nodes.split_at_mut(r);
        (&mut lo[w], &hi[0])
    } else {
        let (lo, hi) = nodes.split_at_mut(w);
        (&mut hi[0], &lo[r])
    }
}

/// C[m,n] += A . B with explicit strides for implicit transposes.
fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
) {
    // SAFETY: callers pass buffers whose logical dims match (m,k) x (k,n).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C[m,n] = A[m,k] . B[n,k]^T
fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    // SAFETY: as above; B is addressed transposed via strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(input: &[f64], d: &ConvDims) -> Vec<f64> {
    let patch = d.c_in * d.kh * d.kw;
    let mut cols = vec![0.0; d.batch * d.h_out * d.w_out * patch];
    for b in 0..d.batch {
        for y in 0..d.h_out {
            for x in 0..d.w_out {
                let row = ((b * d.h_out + y) * d.w_out + x) * patch;
                for c in 0..d.c_in {
                    let in_base = (b * d.c_in + c) * d.h * d.w;
                    for ky in 0..d.kh {
                        let src = in_base + (y + ky) * d.w + x;
                        let dst = row + (c * d.kh + ky) * d.kw;
                        cols[dst..dst + d.kw].copy_from_slice(&input[src..src + d.kw]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im_accumulate(dcols: &[f64], d: &ConvDims, dinput: &mut [f64]) {
    let patch = d.c_in * d.kh * d.kw;
    for b in 0..d.batch {
        for y in 0..d.h_out {
            for x in 0..d.w_out {
                let row = ((b * d.h_out + y) * d.w_out + x) * patch;
                for c in 0..d.c_in {
                    let in_base = (b * d.c_in + c) * d.h * d.w;
                    for ky in 0..d.kh {
                        let dst = in_base + (y + ky) * d.w + x;
                        let src = row + (c * d.kh + ky) * d.kw;
                        for kx in 0..d.kw {
                            dinput[dst + kx] += dcols[src + kx];
                        }
                    }
                }
            }
        }
    }
}
