//! Reverse-mode differentiation over an eagerly recorded tape.
//!
//! Every operation appends a node holding its value and enough saved state to
//! run its backward rule. Nodes only reference earlier nodes, so reverse
//! insertion order is a topological order. Kernels produced by upstream
//! operations (predicted convolution kernels) are ordinary nodes and receive
//! gradients like any other operand.

pub mod gradcheck;

use crate::error::{Error, Result};
use crate::nn::conv::{self, ConvGeom};
use crate::tensor::{matmul_into, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalization statistics source for [`Tape::batch_norm`].
#[derive(Clone, Debug)]
pub enum BnStats<'a, T> {
    /// Normalize with statistics of the current batch.
    Batch { eps: f64 },
    /// Normalize with stored running statistics.
    Running { mean: &'a [T], var: &'a [T], eps: f64 },
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    GatherChannels {
        x: Var,
        perm: Vec<usize>,
    },
    Conv {
        x: Var,
        k: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        invstd: Vec<T>,
        batch_stats: bool,
    },
    WeightNorm {
        v: Var,
        gain: Option<Var>,
        norms: Vec<T>,
    },
    GlobalAvgPool(Var),
    AddSpatial(Var, Var),
    SpatialSoftmax(Var),
    WeightedSpatialSum {
        x: Var,
        w: Var,
    },
    Embedding {
        table: Var,
        tokens: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// One forward evaluation's computation graph.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to the tape's leaves.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`; zeros when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]).expect("node shapes are valid"),
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: operand shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, "add")?;
        let out = Tensor::new(x.shape(), zip_map(x.data(), y.data(), |p, q| p + q))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, "sub")?;
        let out = Tensor::new(x.shape(), zip_map(x.data(), y.data(), |p, q| p - q))?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, "mul")?;
        let out = Tensor::new(x.shape(), zip_map(x.data(), y.data(), |p, q| p * q))?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let (s, c) = (T::from_f64(scale), T::from_f64(shift));
        let x = self.value(a);
        let data = x.data().iter().map(|&v| s * v + c).collect();
        let out = Tensor::new(x.shape(), data).expect("unary op keeps shape");
        self.push(out, Op::Affine(a, scale), &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(x.shape(), data).expect("unary op keeps shape");
        self.push(out, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.tanh(), Op::Tanh(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds `bias[D]` to every length-`D` row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let d = bv.numel();
        if bv.rank() != 1 || xv.shape().last() != Some(&d) {
            return Err(Error::Shape(format!(
                "bias {:?} does not match rows of {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(d) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o = *o + b;
            }
        }
        let out = Tensor::new(xv.shape(), data)?;
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_all();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.sum_all() / T::from_f64(x.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape(format!("concat axis {axis} out of range")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape(format!("concat operands {base:?} and {s:?}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let x = self.value(p);
                let chunk = x.shape()[axis] * inner;
                data.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Output channel `j` is input channel `perm[j]` (axis 1 of NCHW or NC).
    pub fn gather_channels(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() < 2 {
            return Err(Error::Shape(format!("channel gather needs rank >= 2, got {s:?}")));
        }
        let (b, c) = (s[0], s[1]);
        if let Some(&bad) = perm.iter().find(|&&p| p >= c) {
            return Err(Error::Index(format!("channel {bad} of {c}")));
        }
        let plane: usize = s[2..].iter().product();
        let mut data = Vec::with_capacity(b * perm.len() * plane);
        for bi in 0..b {
            for &p in perm {
                let off = (bi * c + p) * plane;
                data.extend_from_slice(&xv.data()[off..off + plane]);
            }
        }
        let mut shape = s.to_vec();
        shape[1] = perm.len();
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::GatherChannels { x, perm: perm.to_vec() }, &[x]))
    }

    /// Grouped 2-D convolution, no bias. `k` may be a shared rank-4 kernel or
    /// a rank-5 per-sample kernel.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(k), stride, pad, groups)?;
        let data = conv::forward(&geom, self.value(x).data(), self.value(k).data());
        let out = Tensor::new(&geom.output_shape(), data)?;
        Ok(self.push(out, Op::Conv { x, k, geom }, &[x, k]))
    }

    /// Per-channel normalization of NCHW input followed by `gamma`, `beta`.
    /// With batch statistics, also returns the biased batch mean and the
    /// unbiased batch variance per channel.
    #[allow(clippy::type_complexity)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BnStats<'_, T>,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let [b, c, h, w] = self.value(x).dims4()?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape(format!("batch norm affine must have shape [{c}]")));
        }
        let plane = h * w;
        let count = b * plane;
        let xd = self.value(x).data();
        let (mean, var, eps, batch_stats) = match stats {
            BnStats::Batch { eps } => {
                if count < 2 {
                    return Err(Error::Shape(format!(
                        "batch norm in train mode needs B*H*W >= 2, got {count}"
                    )));
                }
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for bi in 0..b {
                        let off = (bi * c + ch) * plane;
                        s += xd[off..off + plane].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut q = 0.0;
                    for bi in 0..b {
                        let off = (bi * c + ch) * plane;
                        q += xd[off..off + plane]
                            .iter()
                            .map(|v| (v.as_f64() - m).powi(2))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = q / count as f64;
                }
                (mean, var, eps, true)
            }
            BnStats::Running { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Shape("running statistics length".into()));
                }
                (
                    mean.iter().map(|v| v.as_f64()).collect(),
                    var.iter().map(|v| v.as_f64()).collect(),
                    eps,
                    false,
                )
            }
        };
        let invstd: Vec<T> = var.iter().map(|v| T::from_f64(1.0 / (v + eps).sqrt())).collect();
        let mean_t: Vec<T> = mean.iter().map(|&v| T::from_f64(v)).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * plane;
                for i in off..off + plane {
                    let xh = (xd[i] - mean_t[ch]) * invstd[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + be[ch];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let out = Tensor::new(&shape, out)?;
        let update = batch_stats.then(|| {
            let unbiased = count as f64 / (count as f64 - 1.0);
            (mean_t.clone(), var.iter().map(|v| T::from_f64(v * unbiased)).collect())
        });
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
                batch_stats,
            },
            &[x, gamma, beta],
        );
        Ok((v, update))
    }

    /// `w[c] = gain[c] * v[c] / max(||v[c]||, 1e-8)` over each leading slice.
    /// Without `gain` the gain is fixed at 1.
    pub fn weight_norm(&mut self, v: Var, gain: Option<Var>) -> Result<Var> {
        let vv = self.value(v);
        let rows = vv.shape()[0];
        let len = vv.numel() / rows;
        if let Some(gv) = gain {
            if self.shape(gv) != [rows] {
                return Err(Error::Shape(format!(
                    "weight norm gain {:?} for {rows} channels",
                    self.shape(gv)
                )));
            }
        }
        let floor = T::from_f64(WN_EPS);
        let mut norms = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(vv.numel());
        for r in 0..rows {
            let slice = &vv.data()[r * len..(r + 1) * len];
            let n = slice.iter().map(|&e| e * e).sum::<T>().sqrt().max(floor);
            let g = gain.map_or(T::one(), |gv| self.value(gv).data()[r]);
            data.extend(slice.iter().map(|&e| g * e / n));
            norms.push(n);
        }
        let out = Tensor::new(vv.shape(), data)?;
        let parents: Vec<Var> = std::iter::once(v).chain(gain).collect();
        Ok(self.push(out, Op::WeightNorm { v, gain, norms }, &parents))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        let plane = h * w;
        let xd = self.value(x).data();
        let data = (0..b * c)
            .map(|i| xd[i * plane..(i + 1) * plane].iter().copied().sum::<T>() / T::from_f64(plane as f64))
            .collect();
        let out = Tensor::new(&[b, c], data)?;
        Ok(self.push(out, Op::GlobalAvgPool(x), &[x]))
    }

    /// `x[b,c,:,:] + v[b,c]`.
    pub fn add_spatial(&mut self, x: Var, v: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        if self.shape(v) != [b, c] {
            return Err(Error::Shape(format!(
                "spatial broadcast of {:?} onto [{b},{c},..]",
                self.shape(v)
            )));
        }
        let plane = h * w;
        let vd = self.value(v).data();
        let mut data = self.value(x).data().to_vec();
        for (i, chunk) in data.chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|e| *e = *e + vd[i]);
        }
        let out = Tensor::new(&[b, c, h, w], data)?;
        Ok(self.push(out, Op::AddSpatial(x, v), &[x, v]))
    }

    /// Softmax over the spatial positions of each `[b, c]` plane.
    pub fn spatial_softmax(&mut self, s: Var) -> Result<Var> {
        let [_, _, h, w] = self.value(s).dims4()?;
        let plane = h * w;
        let mut data = self.value(s).data().to_vec();
        for chunk in data.chunks_mut(plane) {
            let m = chunk.iter().copied().fold(T::neg_infinity(), T::max);
            chunk.iter_mut().for_each(|e| *e = (*e - m).exp());
            let z: T = chunk.iter().copied().sum();
            chunk.iter_mut().for_each(|e| *e = *e / z);
        }
        let out = Tensor::new(self.shape(s), data)?;
        Ok(self.push(out, Op::SpatialSoftmax(s), &[s]))
    }

    /// `out[b,c] = sum_p w[b,0,p] * x[b,c,p]`.
    pub fn weighted_spatial_sum(&mut self, x: Var, w: Var) -> Result<Var> {
        let [b, c, h, wd] = self.value(x).dims4()?;
        if self.shape(w) != [b, 1, h, wd] {
            return Err(Error::Shape(format!("spatial weights {:?}", self.shape(w))));
        }
        let plane = h * wd;
        let (xd, wv) = (self.value(x).data(), self.value(w).data());
        let mut data = vec![T::zero(); b * c];
        for bi in 0..b {
            let ws = &wv[bi * plane..(bi + 1) * plane];
            for ch in 0..c {
                let xs = &xd[(bi * c + ch) * plane..(bi * c + ch + 1) * plane];
                data[bi * c + ch] = xs.iter().zip(ws).map(|(&p, &q)| p * q).sum();
            }
        }
        let out = Tensor::new(&[b, c], data)?;
        Ok(self.push(out, Op::WeightedSpatialSum { x, w }, &[x, w]))
    }

    /// Gathers rows of `table[V, E]`.
    pub fn embedding(&mut self, table: Var, tokens: &[usize]) -> Result<Var> {
        let [v, e] = self.value(table).dims2()?;
        if tokens.is_empty() {
            return Err(Error::Shape("embedding of an empty token list".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= v) {
            return Err(Error::Index(format!("token {bad} outside vocabulary of {v}")));
        }
        let td = self.value(table).data();
        let mut data = Vec::with_capacity(tokens.len() * e);
        for &t in tokens {
            data.extend_from_slice(&td[t * e..(t + 1) * e]);
        }
        let out = Tensor::new(&[tokens.len(), e], data)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                tokens: tokens.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let [b, a] = self.value(logits).dims2()?;
        if targets.len() != b {
            return Err(Error::Shape(format!("{} targets for batch {b}", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= a) {
            return Err(Error::Index(format!("target {bad} outside {a} answers")));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![T::zero(); b * a];
        let mut loss = 0.0f64;
        for (i, &t) in targets.iter().enumerate() {
            let row = &ld[i * a..(i + 1) * a];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&l| (l - m).exp()).sum();
            let lse = m + z.ln();
            loss += (lse - row[t]).as_f64();
            for j in 0..a {
                probs[i * a + j] = (row[j] - lse).exp();
            }
        }
        let out = Tensor::scalar(T::from_f64(loss / b as f64));
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape())?);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (parent, pg) in self.node_backward(i, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn node_backward(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        let val = |v: Var| &self.nodes[v.0].value;
        let like = |v: Var, data: Vec<T>| Tensor::new(val(v).shape(), data);
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, like(*b, gd.iter().map(|&v| -v).collect())?)],
            Op::Mul(a, b) => vec![
                (*a, like(*a, zip_map(gd, val(*b).data(), |p, q| p * q))?),
                (*b, like(*b, zip_map(gd, val(*a).data(), |p, q| p * q))?),
            ],
            Op::Affine(a, s) => {
                let s = T::from_f64(*s);
                vec![(*a, like(*a, gd.iter().map(|&v| v * s).collect())?)]
            }
            Op::Relu(a) => vec![(
                *a,
                like(
                    *a,
                    zip_map(gd, val(*a).data(), |p, x| if x > T::zero() { p } else { T::zero() }),
                )?,
            )],
            Op::Sigmoid(a) => vec![(*a, like(*a, zip_map(gd, out.data(), |p, y| p * y * (T::one() - y)))?)],
            Op::Tanh(a) => vec![(*a, like(*a, zip_map(gd, out.data(), |p, y| p * (T::one() - y * y)))?)],
            Op::MatMul(a, b) => {
                let [m, k] = val(*a).dims2()?;
                let [_, n] = val(*b).dims2()?;
                let mut res = Vec::with_capacity(2);
                if wants(*a) {
                    let bt = val(*b).transpose2()?;
                    let mut da = vec![T::zero(); m * k];
                    matmul_into(gd, bt.data(), &mut da, m, n, k);
                    res.push((*a, like(*a, da)?));
                }
                if wants(*b) {
                    let at = val(*a).transpose2()?;
                    let mut db = vec![T::zero(); k * n];
                    matmul_into(at.data(), gd, &mut db, k, m, n);
                    res.push((*b, like(*b, db)?));
                }
                res
            }
            Op::AddBias(x, b) => {
                let d = val(*b).numel();
                let mut db = vec![T::zero(); d];
                for row in gd.chunks(d) {
                    for (o, &v) in db.iter_mut().zip(row) {
                        *o = *o + v;
                    }
                }
                vec![(*x, g.clone()), (*b, like(*b, db)?)]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), gd[0])?)],
            Op::Mean(a) => {
                let n = T::from_f64(val(*a).numel() as f64);
                vec![(*a, Tensor::full(val(*a).shape(), gd[0] / n)?)]
            }
            Op::Reshape(a) => vec![(*a, like(*a, gd.to_vec())?)],
            Op::Concat { parts, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut bufs: Vec<Vec<T>> = parts.iter().map(|p| Vec::with_capacity(val(*p).numel())).collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (pi, p) in parts.iter().enumerate() {
                        let chunk = val(*p).shape()[*axis] * inner;
                        bufs[pi].extend_from_slice(&gd[pos..pos + chunk]);
                        pos += chunk;
                    }
                }
                parts
                    .iter()
                    .zip(bufs)
                    .map(|(p, d)| Ok((*p, like(*p, d)?)))
                    .collect::<Result<_>>()?
            }
            Op::GatherChannels { x, perm } => {
                let s = val(*x).shape();
                let (b, c) = (s[0], s[1]);
                let plane: usize = s[2..].iter().product();
                let mut dx = vec![T::zero(); val(*x).numel()];
                for bi in 0..b {
                    for (j, &p) in perm.iter().enumerate() {
                        let src = (bi * perm.len() + j) * plane;
                        let dst = (bi * c + p) * plane;
                        for q in 0..plane {
                            dx[dst + q] = dx[dst + q] + gd[src + q];
                        }
                    }
                }
                vec![(*x, like(*x, dx)?)]
            }
            Op::Conv { x, k, geom } => {
                let mut res = Vec::with_capacity(2);
                if wants(*x) {
                    res.push((*x, like(*x, conv::backward_input(geom, val(*k).data(), gd))?));
                }
                if wants(*k) {
                    res.push((*k, like(*k, conv::backward_kernel(geom, val(*x).data(), gd))?));
                }
                res
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
                batch_stats,
            } => {
                let [b, c, h, w] = val(*x).dims4()?;
                let plane = h * w;
                let count = T::from_f64((b * plane) as f64);
                let gam = val(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * plane;
                        for q in off..off + plane {
                            dbeta[ch] = dbeta[ch] + gd[q];
                            dgamma[ch] = dgamma[ch] + gd[q] * xhat[q];
                        }
                    }
                }
                let mut dx = vec![T::zero(); gd.len()];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * plane;
                        let scale = gam[ch] * invstd[ch];
                        for q in off..off + plane {
                            dx[q] = if *batch_stats {
                                scale * (gd[q] - (dbeta[ch] + xhat[q] * dgamma[ch]) / count)
                            } else {
                                scale * gd[q]
                            };
                        }
                    }
                }
                vec![
                    (*x, like(*x, dx)?),
                    (*gamma, like(*gamma, dgamma)?),
                    (*beta, like(*beta, dbeta)?),
                ]
            }
            Op::WeightNorm { v, gain, norms } => {
                let vd = val(*v).data();
                let rows = norms.len();
                let len = vd.len() / rows;
                let floor = T::from_f64(WN_EPS);
                let mut dv = vec![T::zero(); vd.len()];
                let mut dgain = vec![T::zero(); rows];
                for r in 0..rows {
                    let n = norms[r];
                    let gr = gain.map_or(T::one(), |gv| val(gv).data()[r]);
                    let sl = r * len..(r + 1) * len;
                    // u = v/n; w = g*u; dL/du = g * dL/dw.
                    let dot: T = gd[sl.clone()]
                        .iter()
                        .zip(&vd[sl.clone()])
                        .map(|(&p, &q)| p * q)
                        .sum::<T>()
                        / n;
                    dgain[r] = dot;
                    for q in sl {
                        let u = vd[q] / n;
                        dv[q] = if n > floor {
                            gr / n * (gd[q] - u * dot)
                        } else {
                            gr / n * gd[q]
                        };
                    }
                }
                let mut res = vec![(*v, like(*v, dv)?)];
                if let Some(gv) = gain {
                    res.push((*gv, like(*gv, dgain)?));
                }
                res
            }
            Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = val(*x).dims4()?;
                let plane = h * w;
                let inv = T::one() / T::from_f64(plane as f64);
                let dx = gd.iter().flat_map(|&v| std::iter::repeat_n(v * inv, plane)).collect();
                vec![(*x, like(*x, dx)?)]
            }
            Op::AddSpatial(x, v) => {
                let [_, _, h, w] = val(*x).dims4()?;
                let plane = h * w;
                let dv = gd.chunks(plane).map(|c| c.iter().copied().sum()).collect();
                vec![(*x, g.clone()), (*v, like(*v, dv)?)]
            }
            Op::SpatialSoftmax(s) => {
                let [_, _, h, w] = val(*s).dims4()?;
                let plane = h * w;
                let mut ds = vec![T::zero(); gd.len()];
                for ((d, gs), ys) in ds.chunks_mut(plane).zip(gd.chunks(plane)).zip(out.data().chunks(plane)) {
                    let dot: T = gs.iter().zip(ys).map(|(&p, &q)| p * q).sum();
                    for ((dv, &gv), &yv) in d.iter_mut().zip(gs).zip(ys) {
                        *dv = yv * (gv - dot);
                    }
                }
                vec![(*s, like(*s, ds)?)]
            }
            Op::WeightedSpatialSum { x, w } => {
                let [b, c, h, wd] = val(*x).dims4()?;
                let plane = h * wd;
                let (xd, wv) = (val(*x).data(), val(*w).data());
                let mut dx = vec![T::zero(); xd.len()];
                let mut dw = vec![T::zero(); wv.len()];
                for bi in 0..b {
                    for ch in 0..c {
                        let gv = gd[bi * c + ch];
                        let off = (bi * c + ch) * plane;
                        for p in 0..plane {
                            dx[off + p] = gv * wv[bi * plane + p];
                            dw[bi * plane + p] = dw[bi * plane + p] + gv * xd[off + p];
                        }
                    }
                }
                vec![(*x, like(*x, dx)?), (*w, like(*w, dw)?)]
            }
            Op::Embedding { table, tokens } => {
                let [_, e] = val(*table).dims2()?;
                let mut dt = vec![T::zero(); val(*table).numel()];
                for (r, &t) in tokens.iter().enumerate() {
                    for j in 0..e {
                        dt[t * e + j] = dt[t * e + j] + gd[r * e + j];
                    }
                }
                vec![(*table, like(*table, dt)?)]
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let [b, a] = val(*logits).dims2()?;
                let scale = gd[0] / T::from_f64(b as f64);
                let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    dl[i * a + t] = dl[i * a + t] - scale;
                }
                vec![(*logits, like(*logits, dl)?)]
            }
        })
    }
}

/// Norm floor used by weight normalization.
pub const WN_EPS: f64 = 1e-8;
