//! Reverse-mode autodiff over whole tensors.
//!
//! A [`Tape`] records every op of one forward pass in execution order.
//! [`Tape::backward`] walks it in reverse once; afterwards the tape is
//! consumed and must be rebuilt by a fresh forward pass.
//!
//! Gradient requirement propagates forward: a node needs a gradient only
//! if one of its inputs does. Frozen parameters therefore stop the
//! backward sweep early and their subgraphs never allocate gradients.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::batchnorm::{BatchNormState, BnMode};
use super::kernels::{self, ConvGeom};
use super::tensor::{Parameter, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Silu {
        input: Var,
    },
    GlobalAvgPool {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    SmoothedCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<T>,
    },
    Sum {
        input: Var,
    },
    WeightedSum {
        input: Var,
        weights: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    consumed: bool,
}

fn ensure_finite<T: Scalar>(data: &[T], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn nchw(t: &Tensor<impl Scalar>, op: &'static str) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::ShapeMismatch {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![0, 0, 0, 0],
        }),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        if self.consumed {
            return Err(Error::StaleGraph);
        }
        ensure_finite(value.data(), name)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Records an input tensor; it requires a gradient iff the tensor does.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Result<Var> {
        let mut tensor = tensor;
        tensor.clear_grad();
        self.push(tensor, Op::Leaf, "leaf")
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Result<Var> {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Records a model parameter under its (unique) name.
    pub fn param(&mut self, p: &Parameter<T>) -> Result<Var> {
        if self.params.contains_key(&p.name) {
            return Err(Error::invalid(format!(
                "parameter `{}` recorded twice on one tape",
                p.name
            )));
        }
        let v = self.leaf(p.tensor.clone())?;
        self.params.insert(p.name.clone(), v);
        Ok(v)
    }

    /// Copies `v` into a new leaf that is cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let t = self.node(v).detached();
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.node(v)
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.node(v).grad()
    }

    pub fn param_grad(&self, name: &str) -> Option<&[T]> {
        self.params.get(name).and_then(|&v| self.grad(v))
    }

    /// Inputs of every batch-norm op, in execution order.
    pub fn batch_norm_inputs(&self) -> Vec<&Tensor<T>> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::BatchNorm { input, .. } => Some(self.node(input)),
                _ => None,
            })
            .collect()
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = self.node(input);
        let w = self.node(weight);
        let [n, c, h, wd] = nchw(x, "conv2d")?;
        let [o, ci, k, k2] = nchw(w, "conv2d")?;
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        };
        if ci != c || k != k2 || stride == 0 || h + 2 * padding < k || wd + 2 * padding < k {
            return Err(mismatch());
        }
        if let Some(b) = bias {
            if self.node(b).shape() != [o] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    lhs: w.shape().to_vec(),
                    rhs: self.node(b).shape().to_vec(),
                });
            }
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            o,
            k,
            stride,
            pad: padding,
            ho: (h + 2 * padding - k) / stride + 1,
            wo: (wd + 2 * padding - k) / stride + 1,
        };
        let keep_cols = w.requires_grad();
        let (out, cols) = kernels::conv_forward(
            x.data(),
            w.data(),
            bias.map(|b| self.node(b).data()),
            &geom,
            keep_cols,
        );
        let rg = x.requires_grad() || w.requires_grad() || bias.is_some_and(|b| self.needs_grad(b));
        let value = Tensor::new(vec![n, o, geom.ho, geom.wo], out)?.with_requires_grad(rg);
        self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            "conv2d",
        )
    }

    /// Batch normalisation over the N, H, W axes of an NCHW tensor, in the
    /// mode stored on `state`.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<T>,
    ) -> Result<Var> {
        let x = self.node(input);
        let [n, c, h, w] = nchw(x, "batch_norm")?;
        if c != state.channels()
            || self.node(gamma).len() != c
            || self.node(beta).len() != c
        {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: x.shape().to_vec(),
                rhs: vec![state.channels()],
            });
        }
        let hw = h * w;
        let m = n * hw;
        let batch_stats = state.mode != BnMode::Eval;
        if batch_stats && m == 0 {
            return Err(Error::EmptyBatch { op: "batch_norm" });
        }
        let xd = x.data();
        let g = self.node(gamma).data();
        let b = self.node(beta).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        if batch_stats {
            let mt = T::of(m as f64);
            for ch in 0..c {
                let plane = |i: usize| &xd[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                let s: T = (0..n).map(|i| plane(i).iter().copied().sum::<T>()).sum();
                let mu = s / mt;
                let ss: T = (0..n)
                    .map(|i| plane(i).iter().map(|&v| (v - mu) * (v - mu)).sum::<T>())
                    .sum();
                mean[ch] = mu;
                var[ch] = ss / mt;
            }
        } else {
            mean.copy_from_slice(&state.running_mean);
            var.copy_from_slice(&state.running_var);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + state.epsilon).sqrt()).collect();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for j in base..base + hw {
                    let z = (xd[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = z;
                    out[j] = g[ch] * z + b[ch];
                }
            }
        }
        match state.mode {
            BnMode::Train => {
                let mom = state.momentum;
                for ch in 0..c {
                    state.running_mean[ch] = (T::one() - mom) * state.running_mean[ch] + mom * mean[ch];
                    state.running_var[ch] = (T::one() - mom) * state.running_var[ch] + mom * var[ch];
                }
            }
            BnMode::Recalibrate => {
                let acc = state
                    .accumulator
                    .get_or_insert_with(|| super::batchnorm::StatsAccumulator::new(c));
                for ch in 0..c {
                    acc.merge(ch, m as f64, mean[ch].to_f64_lossy(), var[ch].to_f64_lossy());
                }
            }
            BnMode::Eval => {}
        }
        let rg = x.requires_grad() || self.needs_grad(gamma) || self.needs_grad(beta);
        let shape = x.shape().to_vec();
        let value = Tensor::new(shape, out)?.with_requires_grad(rg);
        let (xhat, inv_std) = if rg { (xhat, inv_std) } else { (Vec::new(), Vec::new()) };
        self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            "batch_norm",
        )
    }

    /// `x * sigmoid(x)`, elementwise.
    pub fn silu(&mut self, input: Var) -> Result<Var> {
        let x = self.node(input);
        let out = x.data().iter().map(|&v| v * kernels::sigmoid(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?.with_requires_grad(x.requires_grad());
        self.push(value, Op::Silu { input }, "silu")
    }

    /// Mean over H and W: `N x C x H x W -> N x C`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.node(input);
        let [n, c, h, w] = nchw(x, "global_avg_pool")?;
        let hw = T::of((h * w) as f64);
        let out = x
            .data()
            .chunks_exact(h * w)
            .map(|plane| plane.iter().copied().sum::<T>() / hw)
            .collect();
        let value = Tensor::new(vec![n, c], out)?.with_requires_grad(x.requires_grad());
        self.push(value, Op::GlobalAvgPool { input }, "global_avg_pool")
    }

    /// `x @ weight^T + bias` for `x: N x F`, `weight: G x F`, `bias: G`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.node(input);
        let w = self.node(weight);
        let b = self.node(bias);
        let (n, f, g) = match (x.shape(), w.shape(), b.shape()) {
            (&[n, f], &[g, f2], &[g2]) if f == f2 && g == g2 => (n, f, g),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "linear",
                    lhs: x.shape().to_vec(),
                    rhs: w.shape().to_vec(),
                })
            }
        };
        let mut out: Vec<T> = b.data().iter().copied().cycle().take(n * g).collect();
        T::gemm(
            n,
            f,
            g,
            T::one(),
            x.data(),
            f as isize,
            1,
            w.data(),
            1,
            f as isize,
            T::one(),
            &mut out,
            g as isize,
            1,
        );
        let rg = x.requires_grad() || w.requires_grad() || b.requires_grad();
        let value = Tensor::new(vec![n, g], out)?.with_requires_grad(rg);
        self.push(
            value,
            Op::Linear {
                input,
                weight,
                bias,
            },
            "linear",
        )
    }

    /// Mean over the batch of `-sum_k q_k log softmax(logits)_k` with
    /// `q = (1 - epsilon) * onehot(label) + epsilon / K`.
    pub fn smoothed_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        epsilon: f64,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&epsilon) {
            return Err(Error::invalid(format!(
                "label smoothing epsilon must be in [0, 1), got {epsilon}"
            )));
        }
        let z = self.node(logits);
        let &[n, k] = z.shape() else {
            return Err(Error::ShapeMismatch {
                op: "smoothed_cross_entropy",
                lhs: z.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        };
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "smoothed_cross_entropy",
                lhs: z.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("label {bad} outside [0, {k})")));
        }
        let logp = kernels::log_softmax(z.data(), k);
        let off = T::of(epsilon / k as f64);
        let on = T::of(1.0 - epsilon) + off;
        let mut targets = vec![off; n * k];
        for (i, &l) in labels.iter().enumerate() {
            targets[i * k + l] = on;
        }
        let total: T = logp
            .iter()
            .zip(&targets)
            .map(|(&lp, &q)| if q == T::zero() { T::zero() } else { -q * lp })
            .sum();
        let loss = total / T::of(n as f64);
        let probs = logp.iter().map(|v| v.exp()).collect();
        let value = Tensor::scalar(loss).with_requires_grad(z.requires_grad());
        self.push(
            value,
            Op::SmoothedCrossEntropy {
                logits,
                probs,
                targets,
            },
            "smoothed_cross_entropy",
        )
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let x = self.node(input);
        let value = Tensor::scalar(x.data().iter().copied().sum()).with_requires_grad(x.requires_grad());
        self.push(value, Op::Sum { input }, "sum")
    }

    /// `sum_i weights_i * x_i`; handy for probing gradients with a random
    /// cotangent.
    pub fn weighted_sum(&mut self, input: Var, weights: &[T]) -> Result<Var> {
        let x = self.node(input);
        if weights.len() != x.len() {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum",
                lhs: x.shape().to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let s = x.data().iter().zip(weights).map(|(&a, &b)| a * b).sum();
        let value = Tensor::scalar(s).with_requires_grad(x.requires_grad());
        self.push(
            value,
            Op::WeightedSum {
                input,
                weights: weights.to_vec(),
            },
            "weighted_sum",
        )
    }

    /// Propagates `d loss / d node` to every node that requires a gradient
    /// and stores it on that node. The tape cannot be reused afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::StaleGraph);
        }
        let shape = self.node(loss).shape().to_vec();
        if self.node(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.needs_grad(loss) {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            ensure_finite(&g, "backward")?;
            for (target, contrib) in self.backward_op(i, &g) {
                match &mut grads[target.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += *c),
                    slot @ None => *slot = Some(contrib),
                }
            }
            self.nodes[i].value.set_grad(g)?;
        }
        Ok(())
    }

    fn backward_op(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let mut out = Vec::new();
        let mut emit = |v: Var, f: &dyn Fn() -> Vec<T>| {
            if self.needs_grad(v) {
                out.push((v, f()));
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                emit(*input, &|| kernels::conv_input_grad(g, self.node(*weight).data(), geom));
                emit(*weight, &|| kernels::conv_weight_grad(g, cols, geom));
                if let Some(b) = bias {
                    emit(*b, &|| {
                        let p = geom.positions();
                        let mut db = vec![T::zero(); geom.o];
                        for (j, row) in g.chunks_exact(p).enumerate() {
                            db[j % geom.o] += row.iter().copied().sum::<T>();
                        }
                        db
                    });
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = self.node(*input).shape();
                let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        for j in base..base + hw {
                            dgamma[ch] += g[j] * xhat[j];
                            dbeta[ch] += g[j];
                        }
                    }
                }
                emit(*input, &|| {
                    let gam = self.node(*gamma).data();
                    let mut dx = vec![T::zero(); g.len()];
                    let m = T::of((n * hw) as f64);
                    for s in 0..n {
                        for ch in 0..c {
                            let scale = gam[ch] * inv_std[ch];
                            let base = (s * c + ch) * hw;
                            for j in base..base + hw {
                                dx[j] = if *batch_stats {
                                    scale * (g[j] - (dbeta[ch] + xhat[j] * dgamma[ch]) / m)
                                } else {
                                    scale * g[j]
                                };
                            }
                        }
                    }
                    dx
                });
                emit(*gamma, &|| dgamma.clone());
                emit(*beta, &|| dbeta.clone());
            }
            Op::Silu { input } => {
                emit(*input, &|| {
                    self.node(*input)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&x, &dy)| {
                            let s = kernels::sigmoid(x);
                            dy * s * (T::one() + x * (T::one() - s))
                        })
                        .collect()
                });
            }
            Op::GlobalAvgPool { input } => {
                emit(*input, &|| {
                    let s = self.node(*input).shape();
                    let hw = s[2] * s[3];
                    let inv = T::one() / T::of(hw as f64);
                    g.iter()
                        .flat_map(|&d| std::iter::repeat_n(d * inv, hw))
                        .collect()
                });
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = self.node(*input);
                let w = self.node(*weight);
                let (n, f) = (x.shape()[0], x.shape()[1]);
                let gdim = w.shape()[0];
                emit(*input, &|| {
                    let mut dx = vec![T::zero(); n * f];
                    T::gemm(
                        n, gdim, f, T::one(), g, gdim as isize, 1, w.data(), f as isize, 1,
                        T::zero(), &mut dx, f as isize, 1,
                    );
                    dx
                });
                emit(*weight, &|| {
                    let mut dw = vec![T::zero(); gdim * f];
                    T::gemm(
                        gdim, n, f, T::one(), g, 1, gdim as isize, x.data(), f as isize, 1,
                        T::zero(), &mut dw, f as isize, 1,
                    );
                    dw
                });
                emit(*bias, &|| {
                    let mut db = vec![T::zero(); gdim];
                    for row in g.chunks_exact(gdim) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += *b);
                    }
                    db
                });
            }
            Op::SmoothedCrossEntropy {
                logits,
                probs,
                targets,
            } => {
                emit(*logits, &|| {
                    let n = self.node(*logits).shape()[0];
                    let scale = g[0] / T::of(n as f64);
                    probs
                        .iter()
                        .zip(targets)
                        .map(|(&p, &q)| (p - q) * scale)
                        .collect()
                });
            }
            Op::Sum { input } => {
                emit(*input, &|| vec![g[0]; self.node(*input).len()]);
            }
            Op::WeightedSum { input, weights } => {
                emit(*input, &|| weights.iter().map(|&w| w * g[0]).collect());
            }
        }
        out
    }
}
