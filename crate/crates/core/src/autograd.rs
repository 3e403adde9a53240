//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation as a node holding its value, its
//! parents and a closure mapping the output gradient to parent gradients.
//! Operations are coarse (a whole graph aggregation or batch norm is one
//! node), which keeps the tape short and the backward rules explicit.

use crate::tensor::Tensor;
use crate::train::loss;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Tensor,
    /// Biased variance.
    pub var: Tensor,
    pub count: usize,
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected rank-4 tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

fn dims3(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 3, "expected rank-3 tensor, got {s:?}");
    (s[0], s[1], s[2])
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

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: vec![],
            backward: None,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: vec![],
            backward: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let (Some(f), Some(g)) = (&node.backward, &grads[i]) else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let parent_grads = f(g, &inputs);
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                if !self.nodes[p].requires_grad {
                    continue;
                }
                if let Some(pg) = pg {
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
        }
        Gradients { grads }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, &[a, b], Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, &[a], Box::new(move |g, _| vec![Some(g.scale(s))]))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let v = Tensor::scalar(self.value(a).sum() / n);
        self.push(
            v,
            &[a],
            Box::new(move |g, inp| vec![Some(Tensor::full(inp[0].shape(), g.item() / n))]),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(
            v,
            &[a],
            Box::new(|g, inp| vec![Some(g.zip_map(inp[0], |g, x| if x > 0.0 { g } else { 0.0 }))]),
        )
    }

    /// `x[..., C] @ w[C, O]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let xs = self.value(x);
        let ws = self.value(w);
        let (c, o) = (ws.shape()[0], ws.shape()[1]);
        assert_eq!(xs.last_dim(), c, "matmul inner dimension");
        let m = xs.len() / c;
        let mut out = vec![0.0; m * o];
        let (xd, wd) = (xs.data(), ws.data());
        for r in 0..m {
            let orow = &mut out[r * o..(r + 1) * o];
            for (k, &xv) in xd[r * c..(r + 1) * c].iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (ov, wv) in orow.iter_mut().zip(&wd[k * o..(k + 1) * o]) {
                    *ov += xv * wv;
                }
            }
        }
        let mut shape = xs.shape().to_vec();
        *shape.last_mut().unwrap() = o;
        let v = Tensor::from_vec(&shape, out).unwrap();
        self.push(
            v,
            &[x, w],
            Box::new(move |g, inp| {
                let (xd, wd, gd) = (inp[0].data(), inp[1].data(), g.data());
                let mut dx = vec![0.0; m * c];
                let mut dw = vec![0.0; c * o];
                for r in 0..m {
                    let grow = &gd[r * o..(r + 1) * o];
                    for k in 0..c {
                        let wrow = &wd[k * o..(k + 1) * o];
                        dx[r * c + k] = grow.iter().zip(wrow).map(|(a, b)| a * b).sum();
                        let xv = xd[r * c + k];
                        if xv != 0.0 {
                            for (dwv, gv) in dw[k * o..(k + 1) * o].iter_mut().zip(grow) {
                                *dwv += xv * gv;
                            }
                        }
                    }
                }
                vec![
                    Some(Tensor::from_vec(inp[0].shape(), dx).unwrap()),
                    Some(Tensor::from_vec(&[c, o], dw).unwrap()),
                ]
            }),
        )
    }

    /// `mask ⊙ (fixed + learned + attention[n])` for every sequence `n`.
    pub fn combine_adjacency(
        &mut self,
        fixed: &Tensor,
        learned: Var,
        attention: Option<Var>,
        mask: &Tensor,
        batch: usize,
    ) -> Var {
        let vv = fixed.len();
        let base: Vec<f64> = fixed
            .data()
            .iter()
            .zip(self.value(learned).data())
            .map(|(a, b)| a + b)
            .collect();
        let mut out = vec![0.0; batch * vv];
        for n in 0..batch {
            let row = &mut out[n * vv..(n + 1) * vv];
            for i in 0..vv {
                let att = attention.map_or(0.0, |c| self.value(c).data()[n * vv + i]);
                row[i] = mask.data()[i] * (base[i] + att);
            }
        }
        let v = Tensor::from_vec(&[batch, fixed.shape()[0], fixed.shape()[1]], out).unwrap();
        let mask = mask.clone();
        let shape = fixed.shape().to_vec();
        let parents: Vec<Var> = std::iter::once(learned).chain(attention).collect();
        let has_attention = attention.is_some();
        self.push(
            v,
            &parents,
            Box::new(move |g, _| {
                let masked = g.data().iter().enumerate().map(|(i, gv)| gv * mask.data()[i % vv]);
                let masked: Vec<f64> = masked.collect();
                let mut db = vec![0.0; vv];
                for n in 0..batch {
                    for i in 0..vv {
                        db[i] += masked[n * vv + i];
                    }
                }
                let mut grads = vec![Some(Tensor::from_vec(&shape, db).unwrap())];
                if has_attention {
                    grads.push(Some(Tensor::from_vec(&[batch, shape[0], shape[1]], masked).unwrap()));
                }
                grads
            }),
        )
    }

    /// `y[n,t,w,:] = Σ_v x[n,t,v,:] · adj[n,v,w]`.
    pub fn graph_aggregate(&mut self, x: Var, adj: Var) -> Var {
        self.graph_aggregate_within(x, adj, None)
    }

    /// [`Tape::graph_aggregate`] whose adjacency gradient is only computed
    /// where `support[v,w]` is nonzero and left zero elsewhere. Exact when the
    /// adjacency was itself masked by `support`.
    pub fn graph_aggregate_within(&mut self, x: Var, adj: Var, support: Option<&Tensor>) -> Var {
        let support: Option<Vec<bool>> = support.map(|m| m.data().iter().map(|&w| w != 0.0).collect());
        let (n, t, v, c) = dims4(self.value(x));
        assert_eq!(self.value(adj).shape(), &[n, v, v], "adjacency shape");
        let xd = self.value(x).data();
        let ad = self.value(adj).data();
        let mut out = vec![0.0; n * t * v * c];
        for b in 0..n {
            let a = &ad[b * v * v..(b + 1) * v * v];
            for f in 0..t {
                let base = (b * t + f) * v * c;
                for src in 0..v {
                    let xrow = &xd[base + src * c..base + (src + 1) * c];
                    for dst in 0..v {
                        let w = a[src * v + dst];
                        if w == 0.0 {
                            continue;
                        }
                        let orow = &mut out[base + dst * c..base + (dst + 1) * c];
                        for (o, xv) in orow.iter_mut().zip(xrow) {
                            *o += w * xv;
                        }
                    }
                }
            }
        }
        let val = Tensor::from_vec(&[n, t, v, c], out).unwrap();
        self.push(
            val,
            &[x, adj],
            Box::new(move |g, inp| {
                let (xd, ad, gd) = (inp[0].data(), inp[1].data(), g.data());
                let mut dx = vec![0.0; n * t * v * c];
                let mut da = vec![0.0; n * v * v];
                for b in 0..n {
                    let a = &ad[b * v * v..(b + 1) * v * v];
                    let dab = &mut da[b * v * v..(b + 1) * v * v];
                    for f in 0..t {
                        let base = (b * t + f) * v * c;
                        for src in 0..v {
                            let xrow = &xd[base + src * c..base + (src + 1) * c];
                            for dst in 0..v {
                                let grow = &gd[base + dst * c..base + (dst + 1) * c];
                                if support.as_ref().is_none_or(|m| m[src * v + dst]) {
                                    dab[src * v + dst] += xrow.iter().zip(grow).map(|(p, q)| p * q).sum::<f64>();
                                }
                                let w = a[src * v + dst];
                                if w != 0.0 {
                                    let dxrow = &mut dx[base + src * c..base + (src + 1) * c];
                                    for (d, gv) in dxrow.iter_mut().zip(grow) {
                                        *d += w * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                vec![
                    Some(Tensor::from_vec(&[n, t, v, c], dx).unwrap()),
                    Some(Tensor::from_vec(&[n, v, v], da).unwrap()),
                ]
            }),
        )
    }

    /// Mean over the time axis: `[N,T,V,C] -> [N,V,C]`.
    pub fn mean_time(&mut self, x: Var) -> Var {
        let (n, t, v, c) = dims4(self.value(x));
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * v * c];
        for b in 0..n {
            for f in 0..t {
                let src = &xd[(b * t + f) * v * c..(b * t + f + 1) * v * c];
                for (o, s) in out[b * v * c..(b + 1) * v * c].iter_mut().zip(src) {
                    *o += s;
                }
            }
        }
        let inv = 1.0 / t as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let val = Tensor::from_vec(&[n, v, c], out).unwrap();
        self.push(
            val,
            &[x],
            Box::new(move |g, _| {
                let gd = g.data();
                let mut dx = vec![0.0; n * t * v * c];
                for b in 0..n {
                    for f in 0..t {
                        let dst = &mut dx[(b * t + f) * v * c..(b * t + f + 1) * v * c];
                        for (d, gv) in dst.iter_mut().zip(&gd[b * v * c..(b + 1) * v * c]) {
                            *d = gv * inv;
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&[n, t, v, c], dx).unwrap())]
            }),
        )
    }

    /// `s[n,i,j] = scale · Σ_e q[n,i,e] k[n,j,e]`.
    pub fn attention_logits(&mut self, q: Var, k: Var, scale: f64) -> Var {
        let (n, v, e) = dims3(self.value(q));
        assert_eq!(self.value(k).shape(), &[n, v, e]);
        let (qd, kd) = (self.value(q).data(), self.value(k).data());
        let mut out = vec![0.0; n * v * v];
        for b in 0..n {
            for i in 0..v {
                let qi = &qd[(b * v + i) * e..(b * v + i + 1) * e];
                for j in 0..v {
                    let kj = &kd[(b * v + j) * e..(b * v + j + 1) * e];
                    out[(b * v + i) * v + j] = scale * qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>();
                }
            }
        }
        let val = Tensor::from_vec(&[n, v, v], out).unwrap();
        self.push(
            val,
            &[q, k],
            Box::new(move |g, inp| {
                let (qd, kd, gd) = (inp[0].data(), inp[1].data(), g.data());
                let mut dq = vec![0.0; n * v * e];
                let mut dk = vec![0.0; n * v * e];
                for b in 0..n {
                    for i in 0..v {
                        for j in 0..v {
                            let gij = scale * gd[(b * v + i) * v + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for x in 0..e {
                                dq[(b * v + i) * e + x] += gij * kd[(b * v + j) * e + x];
                                dk[(b * v + j) * e + x] += gij * qd[(b * v + i) * e + x];
                            }
                        }
                    }
                }
                vec![
                    Some(Tensor::from_vec(&[n, v, e], dq).unwrap()),
                    Some(Tensor::from_vec(&[n, v, e], dk).unwrap()),
                ]
            }),
        )
    }

    /// Row softmax of `[N,V,V]` restricted to the nonzero entries of `mask`;
    /// entries outside the mask are exactly zero.
    pub fn masked_softmax(&mut self, s: Var, mask: &Tensor) -> Var {
        let (n, v, _) = dims3(self.value(s));
        let sd = self.value(s).data();
        let md = mask.data();
        let mut out = vec![0.0; n * v * v];
        for b in 0..n {
            for i in 0..v {
                let row = &sd[(b * v + i) * v..(b * v + i + 1) * v];
                let support = |j: usize| md[i * v + j] != 0.0;
                let max = (0..v)
                    .filter(|&j| support(j))
                    .map(|j| row[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                let o = &mut out[(b * v + i) * v..(b * v + i + 1) * v];
                let mut z = 0.0;
                for j in (0..v).filter(|&j| support(j)) {
                    o[j] = (row[j] - max).exp();
                    z += o[j];
                }
                for j in (0..v).filter(|&j| support(j)) {
                    o[j] /= z;
                }
            }
        }
        let val = Tensor::from_vec(&[n, v, v], out).unwrap();
        let y = val.clone();
        self.push(
            val,
            &[s],
            Box::new(move |g, _| {
                let (yd, gd) = (y.data(), g.data());
                let mut ds = vec![0.0; n * v * v];
                for r in 0..n * v {
                    let yr = &yd[r * v..(r + 1) * v];
                    let gr = &gd[r * v..(r + 1) * v];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..v {
                        ds[r * v + j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![Some(Tensor::from_vec(&[n, v, v], ds).unwrap())]
            }),
        )
    }

    /// Batch norm over the last axis using the statistics of this batch.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, BatchStats) {
        let xs = self.value(x);
        let c = xs.last_dim();
        let m = xs.len() / c;
        let xd = xs.data();
        let mut mean = vec![0.0; c];
        for r in 0..m {
            for (mu, xv) in mean.iter_mut().zip(&xd[r * c..(r + 1) * c]) {
                *mu += xv;
            }
        }
        mean.iter_mut().for_each(|mu| *mu /= m as f64);
        let mut var = vec![0.0; c];
        for r in 0..m {
            for k in 0..c {
                let d = xd[r * c + k] - mean[k];
                var[k] += d * d;
            }
        }
        var.iter_mut().for_each(|s| *s /= m as f64);
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; m * c];
        let mut out = vec![0.0; m * c];
        for r in 0..m {
            for k in 0..c {
                let h = (xd[r * c + k] - mean[k]) * inv_std[k];
                xhat[r * c + k] = h;
                out[r * c + k] = gd[k] * h + bd[k];
            }
        }
        let shape = xs.shape().to_vec();
        let val = Tensor::from_vec(&shape, out).unwrap();
        let stats = BatchStats {
            mean: Tensor::from_vec(&[c], mean).unwrap(),
            var: Tensor::from_vec(&[c], var).unwrap(),
            count: m,
        };
        let out = self.push(
            val,
            &[x, gamma, beta],
            Box::new(move |g, inp| {
                let gamma = inp[1].data();
                let gd = g.data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gh = vec![0.0; c];
                for r in 0..m {
                    for k in 0..c {
                        sum_g[k] += gd[r * c + k];
                        sum_gh[k] += gd[r * c + k] * xhat[r * c + k];
                    }
                }
                let mf = m as f64;
                let mut dx = vec![0.0; m * c];
                for r in 0..m {
                    for k in 0..c {
                        let i = r * c + k;
                        dx[i] = gamma[k] * inv_std[k] / mf * (mf * gd[i] - sum_g[k] - xhat[i] * sum_gh[k]);
                    }
                }
                vec![
                    Some(Tensor::from_vec(&shape, dx).unwrap()),
                    Some(Tensor::from_vec(&[c], sum_gh).unwrap()),
                    Some(Tensor::from_vec(&[c], sum_g).unwrap()),
                ]
            }),
        );
        (out, stats)
    }

    /// Batch norm over the last axis using fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
    ) -> Var {
        let xs = self.value(x);
        let c = xs.last_dim();
        let m = xs.len() / c;
        let inv_std: Vec<f64> = running_var.data().iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
        let mean = running_mean.data().to_vec();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let xd = xs.data();
        let mut out = vec![0.0; m * c];
        for r in 0..m {
            for k in 0..c {
                out[r * c + k] = gd[k] * (xd[r * c + k] - mean[k]) * inv_std[k] + bd[k];
            }
        }
        let shape = xs.shape().to_vec();
        let val = Tensor::from_vec(&shape, out).unwrap();
        self.push(
            val,
            &[x, gamma, beta],
            Box::new(move |g, inp| {
                let (xd, gamma, gd) = (inp[0].data(), inp[1].data(), g.data());
                let mut dx = vec![0.0; m * c];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for r in 0..m {
                    for k in 0..c {
                        let i = r * c + k;
                        dx[i] = gd[i] * gamma[k] * inv_std[k];
                        dgamma[k] += gd[i] * (xd[i] - mean[k]) * inv_std[k];
                        dbeta[k] += gd[i];
                    }
                }
                vec![
                    Some(Tensor::from_vec(&shape, dx).unwrap()),
                    Some(Tensor::from_vec(&[c], dgamma).unwrap()),
                    Some(Tensor::from_vec(&[c], dbeta).unwrap()),
                ]
            }),
        )
    }

    /// Per-channel temporal convolution with zero "same" padding:
    /// `y[n,t,v,c] = Σ_j w[j,c] · x[n, t + j - K/2, v, c]`.
    pub fn temporal_conv(&mut self, x: Var, w: Var) -> Var {
        let (n, t, v, c) = dims4(self.value(x));
        let kernel = self.value(w).shape()[0];
        assert_eq!(self.value(w).shape(), &[kernel, c], "temporal filter shape");
        let half = (kernel / 2) as isize;
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let frame = v * c;
        let mut out = vec![0.0; n * t * frame];
        for b in 0..n {
            for f in 0..t {
                let dst = (b * t + f) * frame;
                for j in 0..kernel {
                    let src_t = f as isize + j as isize - half;
                    if src_t < 0 || src_t >= t as isize {
                        continue;
                    }
                    let src = (b * t + src_t as usize) * frame;
                    let wrow = &wd[j * c..(j + 1) * c];
                    for p in 0..v {
                        for k in 0..c {
                            out[dst + p * c + k] += wrow[k] * xd[src + p * c + k];
                        }
                    }
                }
            }
        }
        let val = Tensor::from_vec(&[n, t, v, c], out).unwrap();
        self.push(
            val,
            &[x, w],
            Box::new(move |g, inp| {
                let (xd, wd, gd) = (inp[0].data(), inp[1].data(), g.data());
                let mut dx = vec![0.0; n * t * frame];
                let mut dw = vec![0.0; kernel * c];
                for b in 0..n {
                    for f in 0..t {
                        let dst = (b * t + f) * frame;
                        for j in 0..kernel {
                            let src_t = f as isize + j as isize - half;
                            if src_t < 0 || src_t >= t as isize {
                                continue;
                            }
                            let src = (b * t + src_t as usize) * frame;
                            for p in 0..v {
                                for k in 0..c {
                                    let gv = gd[dst + p * c + k];
                                    dx[src + p * c + k] += wd[j * c + k] * gv;
                                    dw[j * c + k] += xd[src + p * c + k] * gv;
                                }
                            }
                        }
                    }
                }
                vec![
                    Some(Tensor::from_vec(&[n, t, v, c], dx).unwrap()),
                    Some(Tensor::from_vec(&[kernel, c], dw).unwrap()),
                ]
            }),
        )
    }

    /// Average pool plus max pool over the joints of each part:
    /// `[N,T,V,C] -> [N,T,P,C]`. Max ties resolve to the first listed joint.
    pub fn part_pool(&mut self, x: Var, parts: &[Vec<usize>]) -> Var {
        let (n, t, v, c) = dims4(self.value(x));
        let p = parts.len();
        assert!(parts.iter().all(|g| !g.is_empty()), "empty pooling part");
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * t * p * c];
        let mut argmax = vec![0usize; n * t * p * c];
        for r in 0..n * t {
            for (pi, part) in parts.iter().enumerate() {
                for k in 0..c {
                    let mut sum = 0.0;
                    let mut best = f64::NEG_INFINITY;
                    let mut best_j = part[0];
                    for &j in part {
                        let xv = xd[(r * v + j) * c + k];
                        sum += xv;
                        if xv > best {
                            best = xv;
                            best_j = j;
                        }
                    }
                    let o = (r * p + pi) * c + k;
                    out[o] = sum / part.len() as f64 + best;
                    argmax[o] = best_j;
                }
            }
        }
        let val = Tensor::from_vec(&[n, t, p, c], out).unwrap();
        let parts = parts.to_vec();
        self.push(
            val,
            &[x],
            Box::new(move |g, _| {
                let gd = g.data();
                let mut dx = vec![0.0; n * t * v * c];
                for r in 0..n * t {
                    for (pi, part) in parts.iter().enumerate() {
                        let inv = 1.0 / part.len() as f64;
                        for k in 0..c {
                            let o = (r * p + pi) * c + k;
                            for &j in part {
                                dx[(r * v + j) * c + k] += gd[o] * inv;
                            }
                            dx[(r * v + argmax[o]) * c + k] += gd[o];
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&[n, t, v, c], dx).unwrap())]
            }),
        )
    }

    /// Max over the time axis: `[N,T,P,C] -> [N,P,C]`.
    pub fn max_time(&mut self, x: Var) -> Var {
        let (n, t, p, c) = dims4(self.value(x));
        let xd = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; n * p * c];
        let mut arg = vec![0usize; n * p * c];
        for b in 0..n {
            for f in 0..t {
                for i in 0..p * c {
                    let xv = xd[(b * t + f) * p * c + i];
                    if xv > out[b * p * c + i] {
                        out[b * p * c + i] = xv;
                        arg[b * p * c + i] = f;
                    }
                }
            }
        }
        let val = Tensor::from_vec(&[n, p, c], out).unwrap();
        self.push(
            val,
            &[x],
            Box::new(move |g, _| {
                let gd = g.data();
                let mut dx = vec![0.0; n * t * p * c];
                for b in 0..n {
                    for i in 0..p * c {
                        dx[(b * t + arg[b * p * c + i]) * p * c + i] += gd[b * p * c + i];
                    }
                }
                vec![Some(Tensor::from_vec(&[n, t, p, c], dx).unwrap())]
            }),
        )
    }

    /// Slice `[N,P,C] -> [N,C]` at middle index `index`.
    pub fn select_mid(&mut self, x: Var, index: usize) -> Var {
        let (n, p, c) = dims3(self.value(x));
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c);
        for b in 0..n {
            out.extend_from_slice(&xd[(b * p + index) * c..(b * p + index + 1) * c]);
        }
        let val = Tensor::from_vec(&[n, c], out).unwrap();
        self.push(
            val,
            &[x],
            Box::new(move |g, _| {
                let mut dx = vec![0.0; n * p * c];
                for b in 0..n {
                    dx[(b * p + index) * c..(b * p + index + 1) * c].copy_from_slice(&g.data()[b * c..(b + 1) * c]);
                }
                vec![Some(Tensor::from_vec(&[n, p, c], dx).unwrap())]
            }),
        )
    }

    /// Stack `S` tensors of shape `[N,E]` into `[N,S,E]`.
    pub fn stack_mid(&mut self, xs: &[Var]) -> Var {
        let s = xs.len();
        let (n, e) = {
            let sh = self.value(xs[0]).shape();
            (sh[0], sh[1])
        };
        let mut out = vec![0.0; n * s * e];
        for (si, &x) in xs.iter().enumerate() {
            let xd = self.value(x).data();
            assert_eq!(self.value(x).shape(), &[n, e], "stack_mid shapes");
            for b in 0..n {
                out[(b * s + si) * e..(b * s + si + 1) * e].copy_from_slice(&xd[b * e..(b + 1) * e]);
            }
        }
        let val = Tensor::from_vec(&[n, s, e], out).unwrap();
        self.push(
            val,
            xs,
            Box::new(move |g, _| {
                let gd = g.data();
                (0..s)
                    .map(|si| {
                        let mut d = Vec::with_capacity(n * e);
                        for b in 0..n {
                            d.extend_from_slice(&gd[(b * s + si) * e..(b * s + si + 1) * e]);
                        }
                        Some(Tensor::from_vec(&[n, e], d).unwrap())
                    })
                    .collect()
            }),
        )
    }

    /// Batch-hard triplet loss of every slot of `[N,S,E]`, giving `[S]`.
    pub fn triplet_per_slot(&mut self, metric: Var, labels: &[usize], margin: f64) -> Var {
        let (n, s, e) = dims3(self.value(metric));
        let md = self.value(metric).data();
        let mut losses = vec![0.0; s];
        let mut grads = vec![0.0; n * s * e];
        for si in 0..s {
            let part = gather_slot(md, n, s, e, si);
            let (l, g) = loss::triplet_batch_hard(&part, e, labels, margin);
            losses[si] = l;
            scatter_slot(&mut grads, &g, n, s, e, si);
        }
        let val = Tensor::from_vec(&[s], losses).unwrap();
        self.push(
            val,
            &[metric],
            Box::new(move |g, _| {
                let mut d = grads.clone();
                for (i, dv) in d.iter_mut().enumerate() {
                    *dv *= g.data()[(i / e) % s];
                }
                vec![Some(Tensor::from_vec(&[n, s, e], d).unwrap())]
            }),
        )
    }

    /// Softmax cross-entropy of every slot of `[N,S,K]` logits, giving `[S]`.
    pub fn cross_entropy_per_slot(&mut self, logits: Var, labels: &[usize]) -> Var {
        let (n, s, k) = dims3(self.value(logits));
        let ld = self.value(logits).data();
        let mut losses = vec![0.0; s];
        let mut grads = vec![0.0; n * s * k];
        for si in 0..s {
            let part = gather_slot(ld, n, s, k, si);
            let (l, g) = loss::cross_entropy(&part, k, labels);
            losses[si] = l;
            scatter_slot(&mut grads, &g, n, s, k, si);
        }
        let val = Tensor::from_vec(&[s], losses).unwrap();
        self.push(
            val,
            &[logits],
            Box::new(move |g, _| {
                let mut d = grads.clone();
                for (i, dv) in d.iter_mut().enumerate() {
                    *dv *= g.data()[(i / k) % s];
                }
                vec![Some(Tensor::from_vec(&[n, s, k], d).unwrap())]
            }),
        )
    }
}

fn gather_slot(d: &[f64], n: usize, s: usize, e: usize, slot: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * e);
    for b in 0..n {
        out.extend_from_slice(&d[(b * s + slot) * e..(b * s + slot + 1) * e]);
    }
    out
}

fn scatter_slot(d: &mut [f64], src: &[f64], n: usize, s: usize, e: usize, slot: usize) {
    for b in 0..n {
        d[(b * s + slot) * e..(b * s + slot + 1) * e].copy_from_slice(&src[b * e..(b + 1) * e]);
    }
}
