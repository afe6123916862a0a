use super::tensor::{axis_split, Tensor};
use super::AutodiffError;

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
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
        factor: f64,
    },
    AddScalar {
        x: Var,
    },
    Exp {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Gather {
        x: Var,
        axis: usize,
        indices: Vec<usize>,
    },
    SegmentSum {
        x: Var,
        axis: usize,
        ids: Vec<usize>,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    Sum {
        x: Var,
    },
    L2Normalize {
        x: Var,
        axis: usize,
        eps: f64,
        norms: Vec<f64>,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: Var,
        temperature: Var,
        axis: usize,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Dynamic reverse-mode tape. Every operation appends a node; inputs always
/// precede their consumers, so a reverse sweep is a valid topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Output shape for elementwise binary ops. The lower-rank operand must match
/// a trailing suffix of the other and is repeated over its leading dims.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let (big, small) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if big.ends_with(small) {
        Ok(big.to_vec())
    } else {
        Err(AutodiffError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(AutodiffError::InvalidArgument {
            op,
            msg: format!("axis {axis} out of range for shape {shape:?}"),
        });
    }
    Ok(())
}

/// The `c`-th length-`m` chunk of a broadcast operand: its own slice when it
/// spans the full output of length `n`, the whole operand otherwise.
fn chunk(x: &[f64], c: usize, m: usize, n: usize) -> &[f64] {
    if x.len() == n {
        &x[c * m..(c + 1) * m]
    } else {
        x
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Records an input tensor. Gradients are reported for it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `a[..., K] x b[K, N] -> [..., N]`; `b` is shared across leading dims of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let k = sb[0];
        let n = sb[1];
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let rows = if k == 0 { 0 } else { av.len() / k };
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let arow = &av[r * k..(r + 1) * k];
            let orow = &mut out[r * n..(r + 1) * n];
            for (kk, &aval) in arow.iter().enumerate() {
                if aval == 0.0 {
                    continue;
                }
                let brow = &bv[kk * n..(kk + 1) * n];
                for (o, &bval) in orow.iter_mut().zip(brow) {
                    *o += aval * bval;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push("matmul", value, Op::MatMul { a, b }, &[a, b])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let shape = broadcast_shape(name, self.shape(a), self.shape(b))?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let n: usize = shape.iter().product();
        let m = av.len().min(bv.len());
        let mut data = Vec::with_capacity(n);
        for c in 0..n.checked_div(m).unwrap_or(0) {
            let (ac, bc) = (chunk(av, c, m, n), chunk(bv, c, m, n));
            data.extend(ac.iter().zip(bc).map(|(&x, &y)| f(x, y)));
        }
        Tensor::new(shape, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", v, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", v, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", v, Op::Mul { a, b }, &[a, b])
    }

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        Tensor::new(t.shape().to_vec(), data).expect("unary op keeps shape")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let v = self.unary(x, |a| a * factor);
        self.push("scale", v, Op::Scale { x, factor }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.unary(x, |a| a + c);
        self.push("add_scalar", v, Op::AddScalar { x }, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.unary(x, f64::exp);
        self.push("exp", v, Op::Exp { x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.unary(x, |a| a.max(0.0));
        self.push("relu", v, Op::Relu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.unary(x, sigmoid);
        self.push("sigmoid", v, Op::Sigmoid { x }, &[x])
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = self.unary(x, gelu);
        self.push("gelu", v, Op::Gelu { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", v, Op::Reshape { x }, &[x])
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("narrow", &shape, axis)?;
        if start + len > shape[axis] {
            return Err(AutodiffError::InvalidArgument {
                op: "narrow",
                msg: format!(
                    "range {start}..{} exceeds axis length {}",
                    start + len,
                    shape[axis]
                ),
            });
        }
        let (outer, alen, inner) = axis_split(&shape, axis);
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            data.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let v = Tensor::new(out_shape, data)?;
        self.push("narrow", v, Op::Narrow { x, axis, start }, &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or(AutodiffError::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out_shape = base;
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis] * inner;
                data.extend_from_slice(&self.value(x).data()[o * len..(o + 1) * len]);
            }
        }
        let v = Tensor::new(out_shape, data)?;
        self.push(
            "concat",
            v,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        )
    }

    /// Selects entries `indices` along `axis` (rows may repeat).
    pub fn gather(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("gather", &shape, axis)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[axis]) {
            return Err(AutodiffError::InvalidArgument {
                op: "gather",
                msg: format!("index {bad} out of range for axis length {}", shape[axis]),
            });
        }
        let (outer, alen, inner) = axis_split(&shape, axis);
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * alen + i) * inner;
                data.extend_from_slice(&xv[base..base + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        let v = Tensor::new(out_shape, data)?;
        self.push(
            "gather",
            v,
            Op::Gather {
                x,
                axis,
                indices: indices.to_vec(),
            },
            &[x],
        )
    }

    /// Sums entries along `axis` into `n_segments` buckets given by `segment_ids`.
    pub fn segment_sum(
        &mut self,
        x: Var,
        axis: usize,
        segment_ids: &[usize],
        n_segments: usize,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("segment_sum", &shape, axis)?;
        if segment_ids.len() != shape[axis] {
            return Err(AutodiffError::InvalidArgument {
                op: "segment_sum",
                msg: format!(
                    "{} segment ids for axis length {}",
                    segment_ids.len(),
                    shape[axis]
                ),
            });
        }
        if let Some(&bad) = segment_ids.iter().find(|&&s| s >= n_segments) {
            return Err(AutodiffError::InvalidArgument {
                op: "segment_sum",
                msg: format!("segment id {bad} not below {n_segments}"),
            });
        }
        let (outer, alen, inner) = axis_split(&shape, axis);
        let xv = self.value(x).data();
        let mut data = vec![0.0; outer * n_segments * inner];
        for o in 0..outer {
            for (j, &s) in segment_ids.iter().enumerate() {
                let src = &xv[(o * alen + j) * inner..(o * alen + j + 1) * inner];
                let dst = &mut data[(o * n_segments + s) * inner..(o * n_segments + s + 1) * inner];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = n_segments;
        let v = Tensor::new(out_shape, data)?;
        self.push(
            "segment_sum",
            v,
            Op::SegmentSum {
                x,
                axis,
                ids: segment_ids.to_vec(),
            },
            &[x],
        )
    }

    /// Mean along `axis`; the axis is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("mean", &shape, axis)?;
        let (outer, alen, inner) = axis_split(&shape, axis);
        if alen == 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "mean",
                msg: "empty axis".into(),
            });
        }
        let xv = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut data[o * inner..(o + 1) * inner];
            for j in 0..alen {
                let src = &xv[(o * alen + j) * inner..(o * alen + j + 1) * inner];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d += v;
                }
            }
            let scale = 1.0 / alen as f64;
            dst.iter_mut().for_each(|d| *d *= scale);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let v = Tensor::new(out_shape, data)?;
        self.push("mean", v, Op::Mean { x, axis }, &[x])
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    /// `x / max(||x||_2, eps)` along `axis`.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("l2_normalize", &shape, axis)?;
        let (outer, alen, inner) = axis_split(&shape, axis);
        let xv = self.value(x).data();
        let mut norms = vec![0.0; outer * inner];
        let mut data = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * alen + j) * inner + i;
                let norm = (0..alen)
                    .map(|j| xv[idx(j)] * xv[idx(j)])
                    .sum::<f64>()
                    .sqrt();
                norms[o * inner + i] = norm;
                let denom = norm.max(eps);
                for j in 0..alen {
                    data[idx(j)] = xv[idx(j)] / denom;
                }
            }
        }
        let v = Tensor::new(shape, data)?;
        self.push(
            "l2_normalize",
            v,
            Op::L2Normalize {
                x,
                axis,
                eps,
                norms,
            },
            &[x],
        )
    }

    /// Normalizes `x` to zero mean and unit variance along `axis`, then applies
    /// a per-channel affine map. Channels are the last dimension; `gamma` and
    /// `beta` have shape `[channels]`.
    pub fn instance_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("instance_norm", &shape, axis)?;
        let channels = *shape.last().unwrap();
        for p in [gamma, beta] {
            if self.shape(p) != [channels] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "instance_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (outer, alen, inner) = axis_split(&shape, axis);
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; outer * inner];
        let mut data = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * alen + j) * inner + i;
                let mean = (0..alen).map(|j| xv[idx(j)]).sum::<f64>() / alen as f64;
                let var = (0..alen).map(|j| (xv[idx(j)] - mean).powi(2)).sum::<f64>() / alen as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[o * inner + i] = is;
                for j in 0..alen {
                    let f = idx(j);
                    let c = f % channels;
                    xhat[f] = (xv[f] - mean) * is;
                    data[f] = g[c] * xhat[f] + b[c];
                }
            }
        }
        let v = Tensor::new(shape, data)?;
        self.push(
            "instance_norm",
            v,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// `softmax(x / T)` along `axis`; `temperature` is a one-element tensor and
    /// receives a gradient like any other input.
    pub fn softmax(&mut self, x: Var, axis: usize, temperature: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("softmax", &shape, axis)?;
        let t = self
            .value(temperature)
            .item()
            .ok_or_else(|| AutodiffError::InvalidArgument {
                op: "softmax",
                msg: "temperature must hold one value".into(),
            })?;
        if t <= 0.0 {
            return Err(AutodiffError::InvalidArgument {
                op: "softmax",
                msg: format!("temperature {t} is not positive"),
            });
        }
        let (outer, alen, inner) = axis_split(&shape, axis);
        let xv = self.value(x).data();
        let mut data = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * alen + j) * inner + i;
                let max = (0..alen)
                    .map(|j| xv[idx(j)] / t)
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut terms = Vec::with_capacity(alen);
                for j in 0..alen {
                    let e = (xv[idx(j)] / t - max).exp();
                    data[idx(j)] = e;
                    terms.push(e);
                }
                // Summing in sorted order makes the normalizer independent of
                // the order of entries along the axis, down to the last bit.
                terms.sort_by(f64::total_cmp);
                let total: f64 = terms.iter().sum();
                for j in 0..alen {
                    data[idx(j)] /= total;
                }
            }
        }
        let v = Tensor::new(shape, data)?;
        self.push(
            "softmax",
            v,
            Op::Softmax {
                x,
                temperature,
                axis,
            },
            &[x, temperature],
        )
    }

    /// Looks up rows of `table` (`[vocab, dim]`). The result has shape
    /// `index_shape ++ [dim]`.
    pub fn embedding(
        &mut self,
        table: Var,
        indices: &[usize],
        index_shape: &[usize],
    ) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(AutodiffError::InvalidArgument {
                op: "embedding",
                msg: format!("table must be 2-D, got {ts:?}"),
            });
        }
        if index_shape.iter().product::<usize>() != indices.len() {
            return Err(AutodiffError::InvalidArgument {
                op: "embedding",
                msg: format!("{} indices for index shape {index_shape:?}", indices.len()),
            });
        }
        let (vocab, dim) = (ts[0], ts[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(AutodiffError::InvalidArgument {
                op: "embedding",
                msg: format!("index {bad} out of range for vocabulary {vocab}"),
            });
        }
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            data.extend_from_slice(&tv[i * dim..(i + 1) * dim]);
        }
        let mut shape = index_shape.to_vec();
        shape.push(dim);
        let v = Tensor::new(shape, data)?;
        self.push(
            "embedding",
            v,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            &[table],
        )
    }

    /// Reverse sweep from a one-element `loss`. Every leaf created with
    /// `requires_grad` gets a gradient (zeros when unreachable).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ls = self.value(loss);
        if ls.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(ls.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| {
                if !node.requires_grad {
                    return None;
                }
                let g = grads.get_mut(i).and_then(Option::take);
                match (&node.op, g) {
                    (_, Some(g)) => Some(Tensor::new(node.value.shape().to_vec(), g).unwrap()),
                    (Op::Leaf, None) => Some(Tensor::zeros(node.value.shape())),
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let (k, n) = (self.shape(*b)[0], self.shape(*b)[1]);
                let rows = if k == 0 { 0 } else { av.len() / k };
                if self.wants(*a) {
                    let mut bt = vec![0.0; k * n];
                    for kk in 0..k {
                        for j in 0..n {
                            bt[j * k + kk] = bv[kk * n + j];
                        }
                    }
                    let ga = accumulate(&mut grads[a.0], av.len());
                    for r in 0..rows {
                        let grow = &g[r * n..(r + 1) * n];
                        let garow = &mut ga[r * k..(r + 1) * k];
                        for (j, &gval) in grow.iter().enumerate() {
                            if gval == 0.0 {
                                continue;
                            }
                            for (d, &b) in garow.iter_mut().zip(&bt[j * k..(j + 1) * k]) {
                                *d += gval * b;
                            }
                        }
                    }
                }
                if self.wants(*b) {
                    let gb = accumulate(&mut grads[b.0], bv.len());
                    for r in 0..rows {
                        let grow = &g[r * n..(r + 1) * n];
                        for kk in 0..k {
                            let aval = av[r * k + kk];
                            if aval == 0.0 {
                                continue;
                            }
                            let gbrow = &mut gb[kk * n..(kk + 1) * n];
                            for (d, gv) in gbrow.iter_mut().zip(grow) {
                                *d += aval * gv;
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) {
                    -1.0
                } else {
                    1.0
                };
                for (v, s) in [(*a, 1.0), (*b, sign)] {
                    if self.wants(v) {
                        let len = self.value(v).numel();
                        let gv = accumulate(&mut grads[v.0], len);
                        for gc in g.chunks(len.max(1)) {
                            for (d, gi) in gv.iter_mut().zip(gc) {
                                *d += s * gi;
                            }
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let n = g.len();
                let m = av.len().min(bv.len());
                for (target, own, other) in [(*a, av, bv), (*b, bv, av)] {
                    if !self.wants(target) {
                        continue;
                    }
                    let gt = accumulate(&mut grads[target.0], own.len());
                    for c in 0..n.checked_div(m).unwrap_or(0) {
                        let gc = &g[c * m..(c + 1) * m];
                        let oc = chunk(other, c, m, n);
                        let dst = if own.len() == n {
                            &mut gt[c * m..(c + 1) * m]
                        } else {
                            &mut gt[..]
                        };
                        for ((d, gi), o) in dst.iter_mut().zip(gc).zip(oc) {
                            *d += gi * o;
                        }
                    }
                }
            }
            Op::Scale { x, factor } => {
                let gx = accumulate(&mut grads[x.0], g.len());
                for (d, gi) in gx.iter_mut().zip(g) {
                    *d += factor * gi;
                }
            }
            Op::AddScalar { x } | Op::Reshape { x } => {
                let gx = accumulate(&mut grads[x.0], g.len());
                for (d, gi) in gx.iter_mut().zip(g) {
                    *d += gi;
                }
            }
            Op::Exp { x } => {
                let gx = accumulate(&mut grads[x.0], g.len());
                for ((d, gi), y) in gx.iter_mut().zip(g).zip(out) {
                    *d += gi * y;
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let gx = accumulate(&mut grads[x.0], g.len());
                for ((d, gi), xi) in gx.iter_mut().zip(g).zip(xv) {
                    if *xi > 0.0 {
                        *d += gi;
                    }
                }
            }
            Op::Sigmoid { x } => {
                let gx = accumulate(&mut grads[x.0], g.len());
                for ((d, gi), y) in gx.iter_mut().zip(g).zip(out) {
                    *d += gi * y * (1.0 - y);
                }
            }
            Op::Gelu { x } => {
                let xv = self.value(*x).data();
                let gx = accumulate(&mut grads[x.0], g.len());
                for ((d, gi), xi) in gx.iter_mut().zip(g).zip(xv) {
                    *d += gi * gelu_grad(*xi);
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, alen, inner) = axis_split(xs, *axis);
                let len = node.value.shape()[*axis];
                let gx = accumulate(&mut grads[x.0], self.value(*x).numel());
                for o in 0..outer {
                    let dst = (o * alen + start) * inner;
                    let src = o * len * inner;
                    for t in 0..len * inner {
                        gx[dst + t] += g[src + t];
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis];
                    if self.wants(x) {
                        let gx = accumulate(&mut grads[x.0], self.value(x).numel());
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for t in 0..len * inner {
                                gx[dst + t] += g[src + t];
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Gather { x, axis, indices } => {
                let (outer, alen, inner) = axis_split(self.shape(*x), *axis);
                let m = indices.len();
                let gx = accumulate(&mut grads[x.0], self.value(*x).numel());
                for o in 0..outer {
                    for (j, &i) in indices.iter().enumerate() {
                        let src = (o * m + j) * inner;
                        let dst = (o * alen + i) * inner;
                        for t in 0..inner {
                            gx[dst + t] += g[src + t];
                        }
                    }
                }
            }
            Op::SegmentSum { x, axis, ids } => {
                let (outer, alen, inner) = axis_split(self.shape(*x), *axis);
                let n_seg = node.value.shape()[*axis];
                let gx = accumulate(&mut grads[x.0], self.value(*x).numel());
                for o in 0..outer {
                    for (j, &s) in ids.iter().enumerate() {
                        let src = (o * n_seg + s) * inner;
                        let dst = (o * alen + j) * inner;
                        for t in 0..inner {
                            gx[dst + t] += g[src + t];
                        }
                    }
                }
            }
            Op::Mean { x, axis } => {
                let (outer, alen, inner) = axis_split(self.shape(*x), *axis);
                let scale = 1.0 / alen as f64;
                let gx = accumulate(&mut grads[x.0], self.value(*x).numel());
                for o in 0..outer {
                    for j in 0..alen {
                        for i in 0..inner {
                            gx[(o * alen + j) * inner + i] += g[o * inner + i] * scale;
                        }
                    }
                }
            }
            Op::Sum { x } => {
                let gx = accumulate(&mut grads[x.0], self.value(*x).numel());
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::L2Normalize {
                x,
                axis,
                eps,
                norms,
            } => {
                let (outer, alen, inner) = axis_split(self.shape(*x), *axis);
                let gx = accumulate(&mut grads[x.0], self.value(*x).numel());
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * alen + j) * inner + i;
                        let norm = norms[o * inner + i];
                        if norm > *eps {
                            let dot: f64 = (0..alen).map(|j| g[idx(j)] * out[idx(j)]).sum();
                            for j in 0..alen {
                                gx[idx(j)] += (g[idx(j)] - out[idx(j)] * dot) / norm;
                            }
                        } else {
                            for j in 0..alen {
                                gx[idx(j)] += g[idx(j)] / eps;
                            }
                        }
                    }
                }
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                inv_std,
            } => {
                let shape = self.shape(*x);
                let channels = *shape.last().unwrap();
                let (outer, alen, inner) = axis_split(shape, *axis);
                let gv = self.value(*gamma).data();
                if self.wants(*gamma) {
                    let gg = accumulate(&mut grads[gamma.0], channels);
                    for (f, gi) in g.iter().enumerate() {
                        gg[f % channels] += gi * xhat[f];
                    }
                }
                if self.wants(*beta) {
                    let gb = accumulate(&mut grads[beta.0], channels);
                    for (f, gi) in g.iter().enumerate() {
                        gb[f % channels] += gi;
                    }
                }
                if self.wants(*x) {
                    let gx = accumulate(&mut grads[x.0], g.len());
                    let n = alen as f64;
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * alen + j) * inner + i;
                            let mut sum_g = 0.0;
                            let mut sum_gx = 0.0;
                            for j in 0..alen {
                                let f = idx(j);
                                let gh = g[f] * gv[f % channels];
                                sum_g += gh;
                                sum_gx += gh * xhat[f];
                            }
                            let is = inv_std[o * inner + i];
                            for j in 0..alen {
                                let f = idx(j);
                                let gh = g[f] * gv[f % channels];
                                gx[f] += is * (gh - sum_g / n - xhat[f] * sum_gx / n);
                            }
                        }
                    }
                }
            }
            Op::Softmax {
                x,
                temperature,
                axis,
            } => {
                let (outer, alen, inner) = axis_split(node.value.shape(), *axis);
                let t = self.value(*temperature).data()[0];
                let xv = self.value(*x).data();
                // gradient with respect to the scaled logits z = x / T
                let mut gz = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * alen + j) * inner + i;
                        let dot: f64 = (0..alen).map(|j| g[idx(j)] * out[idx(j)]).sum();
                        for j in 0..alen {
                            gz[idx(j)] = out[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                if self.wants(*x) {
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for (d, v) in gx.iter_mut().zip(&gz) {
                        *d += v / t;
                    }
                }
                if self.wants(*temperature) {
                    let gt: f64 = gz.iter().zip(xv).map(|(v, xi)| -v * xi / (t * t)).sum();
                    let gtv = accumulate(&mut grads[temperature.0], 1);
                    gtv[0] += gt;
                }
            }
            Op::Embedding { table, indices } => {
                let dim = self.shape(*table)[1];
                let gt = accumulate(&mut grads[table.0], self.value(*table).numel());
                for (r, &i) in indices.iter().enumerate() {
                    for t in 0..dim {
                        gt[i * dim + t] += g[r * dim + t];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]), true);
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn square_gradient_is_two_x() {
        let mut tape = Tape::new();
        let data = [1.0, -2.0, 3.0];
        let x = tape.leaf(t(&[3], &data), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        let expected: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.get(x).unwrap().data(), expected.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = tape.relu(x).unwrap();
        assert!(matches!(
            tape.backward(y),
            Err(AutodiffError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let unused = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(unused).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 5]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[4, 5]"),
            "{msg}"
        );
    }

    #[test]
    fn add_broadcasts_over_leading_dims() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2], &[10.0, 20.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0, 22.0, 13.0, 24.0]);
        let bad = tape.constant(t(&[3], &[0.0; 3]));
        assert!(tape.add(a, bad).is_err());
    }

    #[test]
    fn nan_in_forward_fails_fast() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[1000.0]));
        let inf = tape.exp(x);
        assert!(matches!(inf, Err(AutodiffError::NonFinite { op: "exp" })));
    }

    #[test]
    fn softmax_single_element_axis() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 3], &[0.3, -1.0, 2.0]), true);
        let temp = tape.leaf(Tensor::scalar(1.0), true);
        let y = tape.softmax(x, 0, temp).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0; 3]);
        let w = tape.constant(t(&[1, 3], &[0.5, -2.0, 1.5]));
        let yw = tape.mul(y, w).unwrap();
        let s = tape.sum(yw).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|v| *v == 0.0));
        assert_eq!(g.get(temp).unwrap().data(), &[0.0]);
    }

    #[test]
    fn l2_normalize_zero_vector_is_guarded() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]), true);
        let y = tape.l2_normalize(x, 1, 1e-12).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
        let w = tape.constant(t(&[2, 3], &[1e-13, 0.0, 0.0, 0.0, 0.0, 0.0]));
        let yw = tape.mul(y, w).unwrap();
        let s = tape.sum(yw).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().is_finite());
    }

    #[test]
    fn segment_sum_preserves_total() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let y = tape.segment_sum(x, 0, &[2, 0, 2, 1], 3).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0, 7.0, 8.0, 6.0, 8.0]);
        assert!(tape.segment_sum(x, 0, &[0, 1, 2, 3], 3).is_err());
    }

    #[test]
    fn gelu_matches_reference_values() {
        assert_eq!(gelu(0.0), 0.0);
        // 0.5 * (1 + erf(1/sqrt(2))) = Phi(1)
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
        assert!((gelu(-1.0) + 0.158_655_253_931_457_05).abs() < 1e-15);
    }
}
