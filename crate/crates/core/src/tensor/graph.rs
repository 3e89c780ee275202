use rand::Rng;

use super::kernels::{self, gemm};
use super::{Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Elements per channel.
    pub count: usize,
}

type CustomVjp = Box<dyn Fn(&[f64], &[f64], &[f64]) -> Vec<f64> + Send + Sync>;

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddRowBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    AddConst(Var),
    Relu(Var),
    Softmax(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Vec<(f64, f64)>,
    },
    Conv2d {
        x: Var,
        w: Var,
        cols: Vec<f64>,
        cin: usize,
        h: usize,
        wd: usize,
        stride: (usize, usize),
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        /// Normalised input (train) or centred input (eval).
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        pad: Option<usize>,
        eps: f64,
        probs: Vec<f64>,
        weight: f64,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Permute3 {
        x: Var,
        perm: [usize; 3],
    },
    Sum(Var),
    Custom {
        x: Var,
        vjp: CustomVjp,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The tape. Each forward operation appends one node; `backward` replays the
/// nodes in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

fn accumulate(grads: &mut [Option<Vec<f64>>], len: usize, id: Var, f: impl FnOnce(&mut [f64])) {
    let buf = grads[id.0].get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Records a leaf; gradients are tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        let value = Graph::tensor(t.shape, t.data);
        self.push(value, Op::Leaf, rg)
    }

    /// Records a copy of a parameter as a gradient-tracking leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let value = Graph::tensor(t.shape.clone(), t.data.clone());
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let value = Graph::tensor(t.shape, t.data);
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    /// Accumulated gradient of a leaf after one or more `backward` calls.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
        TensorError::DimensionMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) * op(b)` where `ta`/`tb` select transposition.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Graph::mismatch("matmul", sa, sb));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(Graph::mismatch("matmul", sa, sb));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            self.data(a),
            ta,
            self.data(b),
            tb,
            0.0,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Graph::tensor(vec![m, n], out),
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Graph::mismatch("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Graph::tensor(shape, out), Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Graph::mismatch("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Graph::tensor(shape, out), Op::Mul(a, b), rg))
    }

    /// Adds a length-`n` bias to every row of an `m x n` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x);
        let n = *sx.last().unwrap();
        if self.value(bias).numel() != n {
            return Err(Graph::mismatch("add_row_bias", sx, self.shape(bias)));
        }
        let b = self.data(bias);
        let out: Vec<f64> = self
            .data(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, c)| v + c))
            .collect();
        let shape = sx.to_vec();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Graph::tensor(shape, out), Op::AddRowBias { x, bias }, rg))
    }

    /// `x @ w + b` for `x: [m, i]`, `w: [i, o]`, `b: [o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.data(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Graph::tensor(shape, out), Op::Scale { x, c }, rg)
    }

    /// Adds a constant (non-differentiable) tensor, e.g. an attention mask.
    pub fn add_const(&mut self, x: Var, c: &[f64]) -> Result<Var> {
        if c.len() != self.value(x).numel() {
            return Err(Graph::mismatch("add_const", self.shape(x), &[c.len()]));
        }
        let out = self.data(x).iter().zip(c).map(|(a, b)| a + b).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Graph::tensor(shape, out), Op::AddConst(x), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Graph::tensor(shape, out), Op::Relu(x), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        let mut out = self.data(x).to_vec();
        out.chunks_mut(n).for_each(kernels::softmax_in_place);
        let rg = self.rg(x);
        self.push(Graph::tensor(shape, out), Op::Softmax(x), rg)
    }

    /// Inverted dropout: kept units are scaled by `1/(1-p)`. Identity unless `train`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..=1.0).contains(&p) || p.is_nan() {
            return Err(TensorError::Parameter {
                op: "dropout",
                reason: format!("p={p} outside [0, 1]"),
            });
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let n = self.value(x).numel();
        let mask: Vec<f64> = if p >= 1.0 {
            vec![0.0; n]
        } else {
            let keep = 1.0 / (1.0 - p);
            (0..n)
                .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
                .collect()
        };
        let out = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Graph::tensor(shape, out), Op::Dropout { x, mask }, rg))
    }

    /// Layer normalisation over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Graph::mismatch("layer_norm", &shape, self.shape(gamma)));
        }
        let mut out = vec![0.0; self.value(x).numel()];
        let (g, b) = (self.data(gamma), self.data(beta));
        let stats: Vec<(f64, f64)> = self
            .data(x)
            .chunks(n)
            .zip(out.chunks_mut(n))
            .map(|(row, o)| kernels::layer_norm_row(row, g, b, eps, o))
            .collect();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Graph::tensor(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            rg,
        ))
    }

    /// 3x3 convolution with padding 1 over `x: [c_in, H, W]`, `w: [c_out, c_in, 3, 3]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: (usize, usize)) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                shape: sx,
                reason: "expected [c_in, H, W]".into(),
            });
        }
        if sw.len() != 4 || sw[1] != sx[0] || sw[2] != 3 || sw[3] != 3 {
            return Err(Graph::mismatch("conv2d", &sx, &sw));
        }
        if !matches!(stride, (1, 1) | (2, 2)) {
            return Err(TensorError::Parameter {
                op: "conv2d",
                reason: format!("unsupported stride {stride:?}"),
            });
        }
        let (cin, h, wd) = (sx[0], sx[1], sx[2]);
        let cout = sw[0];
        let oh = kernels::conv_out_len(h, stride.0);
        let ow = kernels::conv_out_len(wd, stride.1);
        let cols = kernels::im2col(self.data(x), cin, h, wd, stride.0, stride.1);
        let mut out = vec![0.0; cout * oh * ow];
        gemm(
            cout,
            cin * 9,
            oh * ow,
            1.0,
            self.data(w),
            false,
            &cols,
            false,
            0.0,
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(
            Graph::tensor(vec![cout, oh, ow], out),
            Op::Conv2d {
                x,
                w,
                cols,
                cin,
                h,
                wd,
                stride,
            },
            rg,
        ))
    }

    fn bn_check(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize)> {
        let shape = self.shape(x);
        let c = shape[0];
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Graph::mismatch("batchnorm", shape, self.shape(gamma)));
        }
        Ok((c, self.value(x).numel() / c))
    }

    /// Training-mode batch norm with channels on axis 0; statistics are taken
    /// over every other axis.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (c, m) = self.bn_check(x, gamma, beta)?;
        let xd = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let mut inv_std = vec![0.0; c];
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for ch in 0..c {
            let s = &xd[ch * m..(ch + 1) * m];
            let mu = s.iter().sum::<f64>() / m as f64;
            let v = s.iter().map(|t| (t - mu) * (t - mu)).sum::<f64>() / m as f64;
            let is = 1.0 / (v + eps).sqrt();
            for i in 0..m {
                let xh = (s[i] - mu) * is;
                xhat[ch * m + i] = xh;
                out[ch * m + i] = xh * g[ch] + b[ch];
            }
            mean[ch] = mu;
            var[ch] = v;
            inv_std[ch] = is;
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let y = self.push(
            Graph::tensor(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: true,
            },
            rg,
        );
        Ok((
            y,
            BatchStats {
                mean,
                var,
                count: m,
            },
        ))
    }

    /// Evaluation-mode batch norm using fixed running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (c, m) = self.bn_check(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Graph::mismatch(
                "batchnorm",
                self.shape(x),
                &[running_mean.len()],
            ));
        }
        let xd = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xc = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for ch in 0..c {
            for i in 0..m {
                let idx = ch * m + i;
                xc[idx] = xd[idx] - running_mean[ch];
                out[idx] = xc[idx] * inv_std[ch] * g[ch] + b[ch];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Graph::tensor(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: xc,
                inv_std,
                train: false,
            },
            rg,
        ))
    }

    /// Row lookup into `table: [V, d]`.
    pub fn embedding(&mut self, ids: &[usize], table: Var) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "embedding",
                shape: st,
                reason: "table must be [V, d]".into(),
            });
        }
        if ids.is_empty() {
            return Err(TensorError::EmptyInput("embedding"));
        }
        let (v, d) = (st[0], st[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Index {
                    op: "embedding",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(&self.data(table)[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Graph::tensor(vec![ids.len(), d], out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Label-smoothed cross entropy. `logits` has the vocabulary on its last
    /// axis; every other axis is flattened into positions matched with
    /// `targets`. Positions whose target equals `pad` are skipped. The
    /// smoothed target is `(1-eps)*onehot + eps/V`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        eps: f64,
        pad: Option<usize>,
        reduction: Reduction,
    ) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let v = *shape.last().unwrap();
        let rows = self.value(logits).numel() / v;
        if targets.len() != rows {
            return Err(Graph::mismatch("cross_entropy", &shape, &[targets.len()]));
        }
        if !(0.0..=1.0).contains(&eps) {
            return Err(TensorError::Parameter {
                op: "cross_entropy",
                reason: format!("smoothing {eps} outside [0, 1]"),
            });
        }
        let xd = self.data(logits);
        let mut probs = vec![0.0; xd.len()];
        let mut total = 0.0;
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: t,
                    bound: v,
                });
            }
            if Some(t) == pad {
                continue;
            }
            count += 1;
            let row = &xd[r * v..(r + 1) * v];
            let lse = kernels::log_sum_exp(row);
            let sum_logp: f64 = row.iter().map(|x| x - lse).sum();
            total -= (1.0 - eps) * (row[t] - lse) + eps / v as f64 * sum_logp;
            for c in 0..v {
                probs[r * v + c] = (row[c] - lse).exp();
            }
        }
        if count == 0 {
            return Err(TensorError::DegenerateBatch);
        }
        let weight = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / count as f64,
        };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total * weight),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad,
                eps,
                probs,
                weight,
            },
            rg,
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or(TensorError::EmptyInput("concat"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: first,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Graph::mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, inner) = outer_inner(&first, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &x in xs {
                let chunk = self.shape(x)[axis] * inner;
                out.extend_from_slice(&self.data(x)[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(
            Graph::tensor(shape, out),
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(TensorError::InvalidShape {
                op: "slice",
                shape: s,
                reason: format!("axis {axis} range {start}..{}", start + len),
            });
        }
        let (outer, inner) = outer_inner(&s, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        let d = self.data(x);
        for o in 0..outer {
            let base = o * s[axis] * inner + start * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Graph::tensor(shape, out), Op::Slice { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() || shape.contains(&0) {
            return Err(Graph::mismatch("reshape", self.shape(x), shape));
        }
        let out = self.data(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Graph::tensor(shape.to_vec(), out), Op::Reshape(x), rg))
    }

    /// Axis permutation of a rank-3 tensor: output axis `i` is input axis `perm[i]`.
    pub fn permute3(&mut self, x: Var, perm: [usize; 3]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut sorted = perm;
        sorted.sort_unstable();
        if s.len() != 3 || sorted != [0, 1, 2] {
            return Err(TensorError::InvalidShape {
                op: "permute3",
                shape: s,
                reason: format!("bad permutation {perm:?}"),
            });
        }
        let in_strides = [s[1] * s[2], s[2], 1];
        let os = [s[perm[0]], s[perm[1]], s[perm[2]]];
        let st = [
            in_strides[perm[0]],
            in_strides[perm[1]],
            in_strides[perm[2]],
        ];
        let d = self.data(x);
        let mut out = Vec::with_capacity(d.len());
        for i in 0..os[0] {
            for j in 0..os[1] {
                for k in 0..os[2] {
                    out.push(d[i * st[0] + j * st[1] + k * st[2]]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Graph::tensor(os.to_vec(), out),
            Op::Permute3 { x, perm },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    /// Elementwise op with a caller-supplied vector-Jacobian product
    /// `vjp(x, y, dy) -> dx`.
    pub fn custom_unary(
        &mut self,
        x: Var,
        forward: impl Fn(&[f64]) -> Vec<f64>,
        vjp: impl Fn(&[f64], &[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Result<Var> {
        let out = forward(self.data(x));
        if out.len() != self.value(x).numel() {
            return Err(Graph::mismatch("custom_unary", self.shape(x), &[out.len()]));
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Graph::tensor(shape, out),
            Op::Custom {
                x,
                vjp: Box::new(vjp),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar loss. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        if !self.rg(loss) {
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves = Vec::new();
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                leaves.push((id, g));
            } else {
                self.propagate(&node.op, &node.value, &g, &mut grads);
            }
        }
        for (id, g) in leaves {
            match &mut self.leaf_grads[id] {
                Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].value.data.len()
    }

    fn propagate(&self, op: &Op, y: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let rg = |v: Var| nodes[v.0].requires_grad;
        let data = |v: Var| &nodes[v.0].value.data[..];
        match op {
            // Leaves are collected by `backward` itself.
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                if rg(*a) {
                    let len = self.numel(*a);
                    accumulate(grads, len, *a, |da| {
                        if *ta {
                            gemm(k, n, m, 1.0, data(*b), *tb, g, true, 1.0, da);
                        } else {
                            gemm(m, n, k, 1.0, g, false, data(*b), !*tb, 1.0, da);
                        }
                    });
                }
                if rg(*b) {
                    let len = self.numel(*b);
                    accumulate(grads, len, *b, |db| {
                        if *tb {
                            gemm(n, m, k, 1.0, g, true, data(*a), *ta, 1.0, db);
                        } else {
                            gemm(k, m, n, 1.0, data(*a), !*ta, g, false, 1.0, db);
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if rg(v) {
                        accumulate(grads, g.len(), v, |d| {
                            d.iter_mut().zip(g).for_each(|(x, y)| *x += y)
                        });
                    }
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let bd = data(*b);
                    accumulate(grads, g.len(), *a, |d| {
                        for i in 0..g.len() {
                            d[i] += g[i] * bd[i];
                        }
                    });
                }
                if rg(*b) {
                    let ad = data(*a);
                    accumulate(grads, g.len(), *b, |d| {
                        for i in 0..g.len() {
                            d[i] += g[i] * ad[i];
                        }
                    });
                }
            }
            Op::AddRowBias { x, bias } => {
                if rg(*x) {
                    accumulate(grads, g.len(), *x, |d| {
                        d.iter_mut().zip(g).for_each(|(a, b)| *a += b)
                    });
                }
                if rg(*bias) {
                    let n = self.numel(*bias);
                    accumulate(grads, n, *bias, |d| {
                        for row in g.chunks(n) {
                            d.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                    });
                }
            }
            Op::Scale { x, c } => {
                accumulate(grads, g.len(), *x, |d| {
                    d.iter_mut().zip(g).for_each(|(a, b)| *a += c * b)
                });
            }
            Op::AddConst(x) | Op::Reshape(x) => {
                accumulate(grads, g.len(), *x, |d| {
                    d.iter_mut().zip(g).for_each(|(a, b)| *a += b)
                });
            }
            Op::Relu(x) => {
                let xd = data(*x);
                accumulate(grads, g.len(), *x, |d| {
                    for i in 0..g.len() {
                        if xd[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let n = *y.shape.last().unwrap();
                accumulate(grads, g.len(), *x, |d| {
                    for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.data.chunks(n)) {
                        let s = kernels::dot(gr, yr);
                        for j in 0..n {
                            dr[j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                accumulate(grads, g.len(), *x, |d| {
                    for i in 0..g.len() {
                        d[i] += g[i] * mask[i];
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let n = *y.shape.last().unwrap();
                let xd = data(*x);
                let gm = data(*gamma);
                if rg(*x) {
                    accumulate(grads, g.len(), *x, |d| {
                        let mut dxhat = vec![0.0; n];
                        for (r, &(mean, rstd)) in stats.iter().enumerate() {
                            let xr = &xd[r * n..(r + 1) * n];
                            let gr = &g[r * n..(r + 1) * n];
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for j in 0..n {
                                dxhat[j] = gr[j] * gm[j];
                                let xh = (xr[j] - mean) * rstd;
                                s1 += dxhat[j];
                                s2 += dxhat[j] * xh;
                            }
                            let nf = n as f64;
                            for j in 0..n {
                                let xh = (xr[j] - mean) * rstd;
                                d[r * n + j] += rstd * (dxhat[j] - s1 / nf - xh * s2 / nf);
                            }
                        }
                    });
                }
                if rg(*gamma) {
                    accumulate(grads, n, *gamma, |d| {
                        for (r, &(mean, rstd)) in stats.iter().enumerate() {
                            for j in 0..n {
                                d[j] += g[r * n + j] * (xd[r * n + j] - mean) * rstd;
                            }
                        }
                    });
                }
                if rg(*beta) {
                    accumulate(grads, n, *beta, |d| {
                        for row in g.chunks(n) {
                            d.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                    });
                }
            }
            Op::Conv2d {
                x,
                w,
                cols,
                cin,
                h,
                wd,
                stride,
            } => {
                let cout = y.shape[0];
                let ohw = y.shape[1] * y.shape[2];
                let kk = cin * 9;
                if rg(*w) {
                    accumulate(grads, cout * kk, *w, |dw| {
                        gemm(cout, ohw, kk, 1.0, g, false, cols, true, 1.0, dw);
                    });
                }
                if rg(*x) {
                    let mut dcols = vec![0.0; kk * ohw];
                    gemm(
                        kk,
                        cout,
                        ohw,
                        1.0,
                        data(*w),
                        true,
                        g,
                        false,
                        0.0,
                        &mut dcols,
                    );
                    let len = self.numel(*x);
                    accumulate(grads, len, *x, |dx| {
                        kernels::col2im(&dcols, *cin, *h, *wd, stride.0, stride.1, dx);
                    });
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let c = inv_std.len();
                let m = g.len() / c;
                let gm = data(*gamma);
                if rg(*x) {
                    accumulate(grads, g.len(), *x, |d| {
                        for ch in 0..c {
                            let gs = &g[ch * m..(ch + 1) * m];
                            let xs = &xhat[ch * m..(ch + 1) * m];
                            let scale = gm[ch] * inv_std[ch];
                            if *train {
                                let mf = m as f64;
                                let s1: f64 = gs.iter().sum();
                                let s2 = kernels::dot(gs, xs);
                                for i in 0..m {
                                    d[ch * m + i] += scale * (gs[i] - s1 / mf - xs[i] * s2 / mf);
                                }
                            } else {
                                for i in 0..m {
                                    d[ch * m + i] += scale * gs[i];
                                }
                            }
                        }
                    });
                }
                if rg(*gamma) {
                    accumulate(grads, c, *gamma, |d| {
                        for ch in 0..c {
                            let s =
                                kernels::dot(&g[ch * m..(ch + 1) * m], &xhat[ch * m..(ch + 1) * m]);
                            d[ch] += if *train { s } else { s * inv_std[ch] };
                        }
                    });
                }
                if rg(*beta) {
                    accumulate(grads, c, *beta, |d| {
                        for ch in 0..c {
                            d[ch] += g[ch * m..(ch + 1) * m].iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::Embedding { table, ids } => {
                let len = self.numel(*table);
                let dm = y.shape[1];
                accumulate(grads, len, *table, |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..dm {
                            d[id * dm + j] += g[r * dm + j];
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                pad,
                eps,
                probs,
                weight,
            } => {
                let len = self.numel(*logits);
                let v = len / targets.len();
                let scale = g[0] * weight;
                accumulate(grads, len, *logits, |d| {
                    for (r, &t) in targets.iter().enumerate() {
                        if Some(t) == *pad {
                            continue;
                        }
                        for c in 0..v {
                            let q = eps / v as f64 + if c == t { 1.0 - eps } else { 0.0 };
                            d[r * v + c] += scale * (probs[r * v + c] - q);
                        }
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let (outer, inner) = outer_inner(&y.shape, *axis);
                let total = y.shape[*axis] * inner;
                let mut offset = 0;
                for &x in xs {
                    let chunk = nodes[x.0].value.shape[*axis] * inner;
                    if rg(x) {
                        let len = self.numel(x);
                        accumulate(grads, len, x, |d| {
                            for o in 0..outer {
                                let src = &g[o * total + offset..o * total + offset + chunk];
                                d[o * chunk..(o + 1) * chunk]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(a, b)| *a += b);
                            }
                        });
                    }
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = &nodes[x.0].value.shape;
                let (outer, inner) = outer_inner(xs, *axis);
                let full = xs[*axis] * inner;
                let chunk = y.shape[*axis] * inner;
                let len = self.numel(*x);
                accumulate(grads, len, *x, |d| {
                    for o in 0..outer {
                        let base = o * full + start * inner;
                        d[base..base + chunk]
                            .iter_mut()
                            .zip(&g[o * chunk..(o + 1) * chunk])
                            .for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Permute3 { x, perm } => {
                let s = &nodes[x.0].value.shape;
                let in_strides = [s[1] * s[2], s[2], 1];
                let st = [
                    in_strides[perm[0]],
                    in_strides[perm[1]],
                    in_strides[perm[2]],
                ];
                let os = &y.shape;
                accumulate(grads, g.len(), *x, |d| {
                    let mut idx = 0;
                    for i in 0..os[0] {
                        for j in 0..os[1] {
                            for k in 0..os[2] {
                                d[i * st[0] + j * st[1] + k * st[2]] += g[idx];
                                idx += 1;
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let len = self.numel(*x);
                accumulate(grads, len, *x, |d| d.iter_mut().for_each(|a| *a += g[0]));
            }
            Op::Custom { x, vjp } => {
                let dx = vjp(data(*x), &y.data, g);
                accumulate(grads, g.len(), *x, |d| {
                    d.iter_mut().zip(&dx).for_each(|(a, b)| *a += b)
                });
            }
        }
    }
}
