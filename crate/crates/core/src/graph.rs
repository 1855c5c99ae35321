//! Reverse-mode automatic differentiation over a per-step tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters enter as
//! leaves tagged with their store, so after [`Graph::backward`] each module
//! can pull its own gradients with [`Gradients::for_store`].

use crate::error::{Error, Result};
use crate::kernels::{conv2d_backward, conv2d_forward, ConvGeom};
use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{Real, Strides, Tensor};

/// Node handle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param {
        store: u64,
        id: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    BiasChannels {
        x: Var,
        b: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        /// Training mode normalises with batch statistics, which makes the
        /// statistics themselves depend on `x`.
        batch_stats: bool,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    PairAdd {
        a: Var,
        b: Var,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    NtXent {
        z: Var,
        partner: Vec<usize>,
        inv_tau: T,
        scale: T,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Sigmoid {
        x: Var,
    },
    Mse {
        x: Var,
        target: Vec<T>,
    },
    WeightedSum {
        terms: Vec<(Var, T)>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Batch statistics produced by a training-mode batch-norm, for updating
/// running averages.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(
            store.get(id).clone(),
            Op::Param {
                store: store.uid(),
                id: id.0,
            },
        )
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(shape_err(format!("conv2d input {xs:?} with weight {ws:?}")));
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(shape_err(format!("conv2d kernel {ws:?} larger than padded input {xs:?}")));
        }
        let geom = ConvGeom {
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel: ws[2],
            stride,
            pad,
        };
        let (n, o) = (xs[0], ws[0]);
        let out = conv2d_forward(self.value(x).data(), n, self.value(w).data(), o, &geom);
        let t = Tensor::from_vec(&[n, o, geom.out_h(), geom.out_w()], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, geom }))
    }

    pub fn bias_channels(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let bv = self.value(b);
        if xs.len() < 2 || bv.len() != xs[1] {
            return Err(shape_err(format!("channel bias {:?} for input {xs:?}", bv.shape())));
        }
        let plane: usize = xs[2..].iter().product();
        let mut out = self.value(x).clone();
        let bd = bv.data().to_vec();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let c = bd[i % xs[1]];
            chunk.iter_mut().for_each(|v| *v += c);
        }
        Ok(self.push(out, Op::BiasChannels { x, b }))
    }

    fn bn_check(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let xs = self.value(x).shape();
        if xs.len() < 2 {
            return Err(shape_err(format!("batch norm input {xs:?}")));
        }
        let c = xs[1];
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(shape_err(format!("batch norm affine parameters for {c} channels")));
        }
        Ok((xs[0], c, xs[2..].iter().product()))
    }

    /// Batch normalisation with batch statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        let (n, c, plane) = self.bn_check(x, gamma, beta)?;
        let m = n * plane;
        let xv = self.value(x);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let s = &xv.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                mean[ch] += s.iter().copied().sum::<T>();
            }
        }
        let mt = T::lit(m as f64);
        mean.iter_mut().for_each(|v| *v /= mt);
        for b in 0..n {
            for ch in 0..c {
                let s = &xv.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                var[ch] += s.iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
            }
        }
        let unbiased: Vec<T> = var
            .iter()
            .map(|&v| if m > 1 { v / T::lit((m - 1) as f64) } else { T::zero() })
            .collect();
        var.iter_mut().for_each(|v| *v /= mt);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::lit(eps)).sqrt()).collect();
        let (out, xhat) = self.bn_apply(x, gamma, beta, &mean, &inv_std, n, c, plane);
        let y = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: true,
            },
        );
        Ok((y, BatchStats { mean, var: unbiased }))
    }

    /// Batch normalisation with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: f64) -> Result<Var> {
        let (n, c, plane) = self.bn_check(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err(format!("running statistics for {c} channels")));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::lit(eps)).sqrt()).collect();
        let (out, xhat) = self.bn_apply(x, gamma, beta, mean, &inv_std, n, c, plane);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: false,
            },
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
        n: usize,
        c: usize,
        plane: usize,
    ) -> (Tensor<T>, Vec<T>) {
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = Tensor::zeros(xv.shape());
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                for i in r {
                    let h = (xv.data()[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out.data_mut()[i] = g[ch] * h + bt[ch];
                }
            }
        }
        (out, xhat)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(out, Op::Sigmoid { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(format!(
                "add {:?} + {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add { a, b }))
    }

    /// All-pairs broadcast sum: `a` is `P×…`, `b` is `K×…`, result is
    /// `(P·K)×…` with row `p·K + k` equal to `a[p] + b[k]`.
    pub fn pair_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape()[1..] != bv.shape()[1..] {
            return Err(shape_err(format!("pair_add {:?} with {:?}", av.shape(), bv.shape())));
        }
        let (p, k, r) = (av.dim(0), bv.dim(0), av.row_len());
        let mut data = Vec::with_capacity(p * k * r);
        for i in 0..p {
            let ar = av.row(i);
            for j in 0..k {
                data.extend(ar.iter().zip(bv.row(j)).map(|(&x, &y)| x + y));
            }
        }
        let mut shape = av.shape().to_vec();
        shape[0] = p * k;
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(out, Op::PairAdd { a, b }))
    }

    /// Concatenation along axis 1 (channels for `N×C×H×W`, input channels for
    /// `O×C×k×k` weights).
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(shape_err(format!("concat {sa:?} with {sb:?}")));
        }
        let (ra, rb) = (av.row_len(), bv.row_len());
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for i in 0..sa[0] {
            data.extend_from_slice(&av.data()[i * ra..(i + 1) * ra]);
            data.extend_from_slice(&bv.data()[i * rb..(i + 1) * rb]);
        }
        let mut shape = sa.to_vec();
        shape[1] = sa[1] + sb[1];
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(out, Op::ConcatChannels { a, b }))
    }

    /// `N×C×H×W → N×C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 4 {
            return Err(shape_err(format!("global pool on {:?}", xv.shape())));
        }
        let (n, c) = (xv.dim(0), xv.dim(1));
        let plane = xv.dim(2) * xv.dim(3);
        let inv = T::one() / T::lit(plane as f64);
        let data = xv.data().chunks(plane).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let out = Tensor::from_vec(&[n, c], data)?;
        Ok(self.push(out, Op::GlobalAvgPool { x }))
    }

    /// `y = x·Wᵀ + b` with `x: N×in`, `W: out×in`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err(format!("linear input {xs:?} with weight {ws:?}")));
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * fout];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != fout {
                return Err(shape_err(format!("linear bias {:?} for {fout} outputs", bv.shape())));
            }
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bv.data());
            }
        }
        T::gemm(
            n,
            fin,
            fout,
            T::one(),
            self.value(x).data(),
            Strides::row_major(fin),
            self.value(w).data(),
            Strides::transposed(fin),
            T::one(),
            &mut out,
            Strides::row_major(fout),
        );
        let t = Tensor::from_vec(&[n, fout], out)?;
        Ok(self.push(t, Op::Linear { x, w, b }))
    }

    /// Row-wise unit normalisation of an `N×D` matrix. A zero row has no
    /// direction and is an error.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(shape_err(format!("l2 normalize on {:?}", xv.shape())));
        }
        let d = xv.dim(1);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.dim(0));
        for row in out.data_mut().chunks_mut(d) {
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(nrm > T::zero()) {
                return Err(Error::ZeroVector);
            }
            row.iter_mut().for_each(|v| *v /= nrm);
            norms.push(nrm);
        }
        Ok(self.push(out, Op::L2Normalize { x, norms }))
    }

    /// NT-Xent over unit rows `z` (`2B×D`). `partner[i]` is the positive of
    /// row `i`; every other row is a negative. Similarities are clamped to
    /// `[-1, 1]` before scaling by `1/τ`; the clamp only removes rounding
    /// error, so the gradient passes straight through it.
    ///
    /// With `mean = false` the per-sample losses are summed.
    pub fn nt_xent(&mut self, z: Var, partner: &[usize], tau: f64, mean: bool) -> Result<Var> {
        let zv = self.value(z);
        if zv.shape().len() != 2 {
            return Err(shape_err(format!("nt_xent on {:?}", zv.shape())));
        }
        let (n, d) = (zv.dim(0), zv.dim(1));
        if n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Temperature(tau));
        }
        check_pairing(partner, n)?;
        let mut sim = vec![T::zero(); n * n];
        T::gemm(
            n,
            d,
            n,
            T::one(),
            zv.data(),
            Strides::row_major(d),
            zv.data(),
            Strides::transposed(d),
            T::zero(),
            &mut sim,
            Strides::row_major(n),
        );
        let inv_tau = T::lit(1.0 / tau);
        let mut probs = vec![T::zero(); n * n];
        let mut total = T::zero();
        for i in 0..n {
            let row = &sim[i * n..(i + 1) * n];
            let logit = |k: usize| row[k].max(-T::one()).min(T::one()) * inv_tau;
            let mx = (0..n).filter(|&k| k != i).map(logit).fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for k in (0..n).filter(|&k| k != i) {
                let e = (logit(k) - mx).exp();
                probs[i * n + k] = e;
                denom += e;
            }
            for k in (0..n).filter(|&k| k != i) {
                probs[i * n + k] /= denom;
            }
            let lse = mx + denom.ln();
            total += lse - logit(partner[i]);
        }
        let scale = if mean { T::one() / T::lit(n as f64) } else { T::one() };
        let out = Tensor::scalar(total * scale);
        Ok(self.push(
            out,
            Op::NtXent {
                z,
                partner: partner.to_vec(),
                inv_tau,
                scale,
                probs,
            },
        ))
    }

    /// Mean softmax cross-entropy of `N×K` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 || lv.dim(0) != labels.len() {
            return Err(shape_err(format!(
                "cross entropy logits {:?} with {} labels",
                lv.shape(),
                labels.len()
            )));
        }
        let (n, k) = (lv.dim(0), lv.dim(1));
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Label { label: bad, classes: k });
        }
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = lv.row(i);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                probs[i * k + j] = e;
                denom += e;
            }
            probs[i * k..(i + 1) * k].iter_mut().for_each(|p| *p /= denom);
            total += mx + denom.ln() - row[label];
        }
        let out = Tensor::scalar(total / T::lit(n.max(1) as f64));
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: &[T]) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != target.len() {
            return Err(shape_err(format!("mse {:?} against {} targets", xv.shape(), target.len())));
        }
        let s: T = xv.data().iter().zip(target).map(|(&a, &t)| (a - t) * (a - t)).sum();
        let out = Tensor::scalar(s / T::lit(target.len().max(1) as f64));
        Ok(self.push(
            out,
            Op::Mse {
                x,
                target: target.to_vec(),
            },
        ))
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = T::zero();
        let mut ts = Vec::with_capacity(terms.len());
        for &(v, w) in terms {
            let val = self.value(v);
            if val.len() != 1 {
                return Err(shape_err(format!("weighted sum over non-scalar {:?}", val.shape())));
            }
            total += val.item() * T::lit(w);
            ts.push((v, T::lit(w)));
        }
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum { terms: ts }))
    }

    /// Back-propagates from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .zip(grads)
            .filter_map(|(node, g)| match node.op {
                Op::Param { store, id } => g.map(|g| (store, id, g)),
                _ => None,
            })
            .collect();
        Gradients { params }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Input | Op::Param { .. } => {}
            Op::Conv2d { x, w, geom } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let n = xv.dim(0);
                let mut dw = vec![T::zero(); wv.len()];
                let wants_dx = self.needs_grad(*x);
                let mut dx = if wants_dx { vec![T::zero(); xv.len()] } else { Vec::new() };
                conv2d_backward(
                    xv.data(),
                    n,
                    wv.data(),
                    wv.dim(0),
                    geom,
                    g.data(),
                    &mut dw,
                    wants_dx.then_some(dx.as_mut_slice()),
                );
                accumulate(grads, *w, wv.shape(), dw);
                if wants_dx {
                    accumulate(grads, *x, xv.shape(), dx);
                }
            }
            Op::BiasChannels { x, b } => {
                let c = self.value(*b).len();
                let plane: usize = g.shape()[2..].iter().product();
                let mut db = vec![T::zero(); c];
                for (i, chunk) in g.data().chunks(plane).enumerate() {
                    db[i % c] += chunk.iter().copied().sum::<T>();
                }
                accumulate(grads, *b, self.value(*b).shape(), db);
                accumulate(grads, *x, g.shape(), g.data().to_vec());
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = g.shape();
                let (n, c) = (shape[0], shape[1]);
                let plane: usize = shape[2..].iter().product();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        for i in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                            dgamma[ch] += g.data()[i] * xhat[i];
                            dbeta[ch] += g.data()[i];
                        }
                    }
                }
                let mut dx = vec![T::zero(); g.len()];
                let m = T::lit((n * plane) as f64);
                for b in 0..n {
                    for ch in 0..c {
                        let k = gam[ch] * inv_std[ch];
                        for i in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                            dx[i] = if *batch_stats {
                                // dx = γ/σ · (dy − mean(dy) − x̂·mean(dy·x̂))
                                k * (g.data()[i] - dbeta[ch] / m - xhat[i] * dgamma[ch] / m)
                            } else {
                                k * g.data()[i]
                            };
                        }
                    }
                }
                accumulate(grads, *gamma, &[c], dgamma);
                accumulate(grads, *beta, &[c], dbeta);
                accumulate(grads, *x, shape, dx);
            }
            Op::Relu { x } => {
                let dx = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&d, &y)| if y > T::zero() { d } else { T::zero() })
                    .collect();
                accumulate(grads, *x, g.shape(), dx);
            }
            Op::Sigmoid { x } => {
                let dx = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&d, &y)| d * y * (T::one() - y))
                    .collect();
                accumulate(grads, *x, g.shape(), dx);
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, g.shape(), g.data().to_vec());
                accumulate(grads, *b, g.shape(), g.data().to_vec());
            }
            Op::PairAdd { a, b } => {
                let (p, k) = (self.value(*a).dim(0), self.value(*b).dim(0));
                let r = g.row_len();
                let mut da = vec![T::zero(); p * r];
                let mut db = vec![T::zero(); k * r];
                for i in 0..p {
                    for j in 0..k {
                        let src = g.row(i * k + j);
                        for t in 0..r {
                            da[i * r + t] += src[t];
                            db[j * r + t] += src[t];
                        }
                    }
                }
                accumulate(grads, *a, self.value(*a).shape(), da);
                accumulate(grads, *b, self.value(*b).shape(), db);
            }
            Op::ConcatChannels { a, b } => {
                let (ra, rb) = (self.value(*a).row_len(), self.value(*b).row_len());
                let n = g.dim(0);
                let mut da = Vec::with_capacity(n * ra);
                let mut db = Vec::with_capacity(n * rb);
                for i in 0..n {
                    let row = g.row(i);
                    da.extend_from_slice(&row[..ra]);
                    db.extend_from_slice(&row[ra..]);
                }
                accumulate(grads, *a, self.value(*a).shape(), da);
                accumulate(grads, *b, self.value(*b).shape(), db);
            }
            Op::GlobalAvgPool { x } => {
                let xs = self.value(*x).shape();
                let plane = xs[2] * xs[3];
                let inv = T::one() / T::lit(plane as f64);
                let mut dx = Vec::with_capacity(plane * g.len());
                for &d in g.data() {
                    dx.extend(std::iter::repeat_n(d * inv, plane));
                }
                accumulate(grads, *x, xs, dx);
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, fin, fout) = (xv.dim(0), xv.dim(1), wv.dim(0));
                if self.needs_grad(*x) {
                    let mut dx = vec![T::zero(); n * fin];
                    T::gemm(
                        n,
                        fout,
                        fin,
                        T::one(),
                        g.data(),
                        Strides::row_major(fout),
                        wv.data(),
                        Strides::row_major(fin),
                        T::zero(),
                        &mut dx,
                        Strides::row_major(fin),
                    );
                    accumulate(grads, *x, xv.shape(), dx);
                }
                let mut dw = vec![T::zero(); fout * fin];
                T::gemm(
                    fout,
                    n,
                    fin,
                    T::one(),
                    g.data(),
                    Strides::transposed(fout),
                    xv.data(),
                    Strides::row_major(fin),
                    T::zero(),
                    &mut dw,
                    Strides::row_major(fin),
                );
                accumulate(grads, *w, wv.shape(), dw);
                if let Some(b) = b {
                    let mut db = vec![T::zero(); fout];
                    for row in g.data().chunks(fout) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *b, &[fout], db);
                }
            }
            Op::L2Normalize { x, norms } => {
                let d = g.dim(1);
                let y = &node.value;
                let mut dx = vec![T::zero(); g.len()];
                for (i, &nrm) in norms.iter().enumerate() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for t in 0..d {
                        dx[i * d + t] = (gr[t] - yr[t] * dot) / nrm;
                    }
                }
                accumulate(grads, *x, g.shape(), dx);
            }
            Op::NtXent {
                z,
                partner,
                inv_tau,
                scale,
                probs,
            } => {
                let zv = self.value(*z);
                let (n, d) = (zv.dim(0), zv.dim(1));
                let up = g.item() * *scale * *inv_tau;
                // dL/dS[i][k] from row i's softmax, then symmetrise since S is ZZᵀ.
                let mut ds = vec![T::zero(); n * n];
                for i in 0..n {
                    for k in 0..n {
                        if k == i {
                            continue;
                        }
                        let mut v = probs[i * n + k];
                        if k == partner[i] {
                            v -= T::one();
                        }
                        ds[i * n + k] = v * up;
                    }
                }
                let mut sym = vec![T::zero(); n * n];
                for i in 0..n {
                    for k in 0..n {
                        sym[i * n + k] = ds[i * n + k] + ds[k * n + i];
                    }
                }
                let mut dz = vec![T::zero(); n * d];
                T::gemm(
                    n,
                    n,
                    d,
                    T::one(),
                    &sym,
                    Strides::row_major(n),
                    zv.data(),
                    Strides::row_major(d),
                    T::zero(),
                    &mut dz,
                    Strides::row_major(d),
                );
                accumulate(grads, *z, zv.shape(), dz);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let lv = self.value(*logits);
                let (n, k) = (lv.dim(0), lv.dim(1));
                let up = g.item() / T::lit(n.max(1) as f64);
                let mut dl = probs.clone();
                for (i, &label) in labels.iter().enumerate() {
                    dl[i * k + label] -= T::one();
                }
                dl.iter_mut().for_each(|v| *v *= up);
                accumulate(grads, *logits, lv.shape(), dl);
            }
            Op::Mse { x, target } => {
                let xv = self.value(*x);
                let up = g.item() * T::lit(2.0) / T::lit(target.len().max(1) as f64);
                let dx = xv.data().iter().zip(target).map(|(&a, &t)| (a - t) * up).collect();
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    accumulate(grads, v, &[], vec![g.item() * w]);
                }
            }
        }
    }

    /// Inputs never need gradients; anything else might.
    fn needs_grad(&self, v: Var) -> bool {
        !matches!(self.nodes[v.0].op, Op::Input)
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, shape: &[usize], data: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(data) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::from_vec(shape, data).expect("gradient shape"));
        }
    }
}

/// Checks that `partner` is an involution on `0..n` without fixed points.
pub fn check_pairing(partner: &[usize], n: usize) -> Result<()> {
    if partner.len() != n {
        return Err(Error::Shape(format!("pairing of length {} for {n} views", partner.len())));
    }
    for (i, &j) in partner.iter().enumerate() {
        if j >= n || j == i || partner[j] != i {
            return Err(Error::Pairing(i));
        }
    }
    Ok(())
}

/// Parameter gradients produced by one backward pass.
pub struct Gradients<T> {
    params: Vec<(u64, usize, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    /// Gradients belonging to `store`, summed over every leaf that bound the
    /// same parameter.
    pub fn for_store(&self, store: &ParamStore<T>) -> Grads<T> {
        let mut out = Grads::empty(store.len());
        for (uid, id, g) in &self.params {
            if *uid != store.uid() || !store.entries()[*id].trainable {
                continue;
            }
            match &mut out.slots[*id] {
                Some(acc) => acc.add_assign(g),
                slot @ None => *slot = Some(g.clone()),
            }
        }
        out
    }
}
