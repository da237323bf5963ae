//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles created on
//! it. Calling [`Tape::backward`] on a scalar result walks the tape in reverse
//! and returns the gradient of every trainable leaf. A tape built with
//! [`Tape::inference`] records no backward closures at all.

use std::cell::RefCell;
use std::rc::Rc;

use crate::kernels::{self, ConvGeom, RoiPlan};
use crate::scalar::Scalar;
use crate::tensor::{Nchw, Tensor};

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    record: bool,
}

#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

/// Gradients of trainable leaves, indexed by the leaf's [`Var`].
pub struct Grads<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), record: true }
    }

    /// A tape that never records gradients; all vars behave as constants.
    pub fn inference() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), record: false }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, requires_grad: bool, parents: Vec<usize>, backward: Option<BackwardFn<T>>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), requires_grad, parents, backward });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Trainable leaf (when the tape records).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        let rg = self.record;
        self.push(value, rg, Vec::new(), None)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, false, Vec::new(), None)
    }

    fn op(&self, value: Tensor<T>, parents: &[Var<'_, T>], backward: BackwardFn<T>) -> Var<'_, T> {
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let needs = self.record && {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        if needs {
            self.push(value, true, ids, Some(backward))
        } else {
            self.push(value, false, Vec::new(), None)
        }
    }

    /// Back-propagates from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Grads<T> {
        let mut nodes = self.nodes.borrow_mut();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward from non-scalar");
        if !nodes[loss.id].requires_grad {
            return Grads { grads };
        }
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape()));
        for id in (0..=loss.id).rev() {
            let Some(backward) = nodes[id].backward.take() else { continue };
            let Some(g) = grads[id].take() else { continue };
            let needs: Vec<bool> = nodes[id].parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), nodes[id].parents.len());
            for (k, pg) in parent_grads.into_iter().enumerate() {
                let p = nodes[id].parents[k];
                if !needs[k] {
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
        // Only leaves keep their gradient.
        for (id, node) in nodes.iter().enumerate() {
            if !node.parents.is_empty() {
                grads[id] = None;
            }
        }
        Grads { grads }
    }
}

fn unary<'t, T: Scalar>(x: Var<'t, T>, value: Tensor<T>, f: impl Fn(&Tensor<T>) -> Tensor<T> + 'static) -> Var<'t, T> {
    x.tape.op(value, &[x], Box::new(move |g, _| vec![Some(f(g))]))
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant((*self.value()).clone())
    }

    pub fn add(&self, other: Var<'t, T>) -> Var<'t, T> {
        let v = self.value().zip_map(&other.value(), |a, b| a + b);
        self.tape.op(v, &[*self, other], Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&self, other: Var<'t, T>) -> Var<'t, T> {
        let v = self.value().zip_map(&other.value(), |a, b| a - b);
        self.tape.op(v, &[*self, other], Box::new(|g, _| vec![Some(g.clone()), Some(g.map(|x| -x))]))
    }

    pub fn mul(&self, other: Var<'t, T>) -> Var<'t, T> {
        let (a, b) = (self.value(), other.value());
        let v = a.zip_map(&b, |x, y| x * y);
        self.tape.op(
            v,
            &[*self, other],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.zip_map(&b, |gv, y| gv * y)),
                    needs[1].then(|| g.zip_map(&a, |gv, x| gv * x)),
                ]
            }),
        )
    }

    pub fn scale(&self, s: f64) -> Var<'t, T> {
        let s = T::lit(s);
        unary(*self, self.value().scale(s), move |g| g.scale(s))
    }

    pub fn relu(&self) -> Var<'t, T> {
        let x = self.value();
        let v = x.map(|a| a.max(T::zero()));
        unary(*self, v, move |g| g.zip_map(&x, |gv, a| if a > T::zero() { gv } else { T::zero() }))
    }

    pub fn silu(&self) -> Var<'t, T> {
        let x = self.value();
        let v = x.map(|a| a / (T::one() + (-a).exp()));
        unary(*self, v, move |g| {
            g.zip_map(&x, |gv, a| {
                let s = T::one() / (T::one() + (-a).exp());
                gv * (s + a * s * (T::one() - s))
            })
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t, T> {
        let old = self.shape();
        let v = (*self.value()).clone().reshape(shape);
        unary(*self, v, move |g| g.clone().reshape(&old))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let shape = self.shape();
        let v = Tensor::scalar(self.value().sum());
        unary(*self, v, move |g| Tensor::full(&shape, g.item()))
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn conv2d(&self, w: Var<'t, T>, b: Option<Var<'t, T>>, geom: ConvGeom) -> Var<'t, T> {
        let (x, wv) = (self.value(), w.value());
        let bv = b.map(|b| b.value());
        let out = kernels::conv2d(&x, &wv, bv.as_deref(), geom);
        let mut parents = vec![*self, w];
        parents.extend(b);
        let has_bias = b.is_some();
        self.tape.op(
            out,
            &parents,
            Box::new(move |g, needs| {
                let (dx, dw, db) = kernels::conv2d_backward(&x, &wv, g, geom, needs[0]);
                let mut v = vec![dx, Some(dw)];
                if has_bias {
                    v.push(Some(db));
                }
                v
            }),
        )
    }

    /// `x: [N, in] . w: [in, out] + b: [out]`.
    pub fn linear(&self, w: Var<'t, T>, b: Option<Var<'t, T>>) -> Var<'t, T> {
        let (x, wv) = (self.value(), w.value());
        let (n, k, m) = (x.dim(0), x.dim(1), wv.dim(1));
        assert_eq!(wv.dim(0), k, "linear: input width {k} vs weight {:?}", wv.shape());
        let mut out = vec![T::zero(); n * m];
        let beta = if let Some(b) = b {
            let bv = b.value();
            for row in out.chunks_mut(m) {
                row.copy_from_slice(bv.data());
            }
            T::one()
        } else {
            T::zero()
        };
        T::gemm(n, k, m, x.data(), false, wv.data(), false, &mut out, beta);
        let mut parents = vec![*self, w];
        parents.extend(b);
        let has_bias = b.is_some();
        self.tape.op(
            Tensor::from_vec(&[n, m], out),
            &parents,
            Box::new(move |g, needs| {
                let dx = needs[0].then(|| {
                    let mut dx = vec![T::zero(); n * k];
                    T::gemm(n, m, k, g.data(), false, wv.data(), true, &mut dx, T::zero());
                    Tensor::from_vec(&[n, k], dx)
                });
                let mut dw = vec![T::zero(); k * m];
                T::gemm(k, n, m, x.data(), true, g.data(), false, &mut dw, T::zero());
                let mut v = vec![dx, Some(Tensor::from_vec(&[k, m], dw))];
                if has_bias {
                    let mut db = vec![T::zero(); m];
                    for row in g.data().chunks(m) {
                        for (d, &r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    v.push(Some(Tensor::from_vec(&[m], db)));
                }
                v
            }),
        )
    }

    /// Adds a per-sample, per-channel vector `v: [N, C]` to `x: [N, C, H, W]`.
    pub fn add_channel_vec(&self, v: Var<'t, T>) -> Var<'t, T> {
        let x = self.value();
        let s = Nchw::of(&x);
        let vv = v.value();
        assert_eq!(vv.shape(), &[s.n, s.c], "add_channel_vec shape");
        let mut out = (*x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(s.plane()).enumerate() {
            let add = vv.data()[i];
            chunk.iter_mut().for_each(|a| *a += add);
        }
        self.tape.op(
            out,
            &[*self, v],
            Box::new(move |g, needs| {
                let dv = needs[1].then(|| {
                    let d: Vec<T> = g.data().chunks(s.plane()).map(|c| c.iter().copied().sum()).collect();
                    Tensor::from_vec(&[s.n, s.c], d)
                });
                vec![Some(g.clone()), dv]
            }),
        )
    }

    pub fn group_norm(&self, gamma: Var<'t, T>, beta: Var<'t, T>, groups: usize) -> Var<'t, T> {
        let gv = gamma.value();
        let (out, cache) = kernels::group_norm(&self.value(), &gv, &beta.value(), groups, 1e-5);
        self.tape.op(
            out,
            &[*self, gamma, beta],
            Box::new(move |g, _| {
                let (dx, dg, db) = kernels::group_norm_backward(g, &gv, &cache, groups);
                vec![Some(dx), Some(dg), Some(db)]
            }),
        )
    }

    pub fn upsample2(&self) -> Var<'t, T> {
        unary(*self, kernels::upsample_nearest2(&self.value()), kernels::upsample_nearest2_backward)
    }

    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Var<'t, T> {
        let s = Nchw::of(&self.value());
        let out = kernels::bilinear_resize(&self.value(), out_h, out_w);
        unary(*self, out, move |g| kernels::bilinear_resize_backward(g, s.h, s.w))
    }

    pub fn roi_align(&self, plan: Rc<RoiPlan>) -> Var<'t, T> {
        let shape = self.shape();
        let out = kernels::roi_align(&self.value(), &plan);
        unary(*self, out, move |g| kernels::roi_align_backward(g, &plan, &shape))
    }

    /// `[1, C, H, W]` -> `[H*W, C]`.
    pub fn chw_to_rows(&self) -> Var<'t, T> {
        let shape = self.shape();
        unary(*self, kernels::chw_to_rows(&self.value()), move |g| kernels::rows_to_chw(g, &shape))
    }

    /// Concatenates `[N, C_i, H, W]` tensors along channels.
    pub fn concat_channels(parts: &[Var<'t, T>]) -> Var<'t, T> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        let vals: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let s0 = Nchw::of(&vals[0]);
        let chans: Vec<usize> = vals.iter().map(|v| Nchw::of(v).c).collect();
        for v in &vals {
            let s = Nchw::of(v);
            assert!(s.n == s0.n && s.h == s0.h && s.w == s0.w, "concat_channels spatial mismatch");
        }
        let total: usize = chans.iter().sum();
        let plane = s0.plane();
        let mut out = Vec::with_capacity(s0.n * total * plane);
        for n in 0..s0.n {
            for (v, &c) in vals.iter().zip(&chans) {
                out.extend_from_slice(&v.data()[n * c * plane..(n + 1) * c * plane]);
            }
        }
        tape.op(
            Tensor::from_vec(&[s0.n, total, s0.h, s0.w], out),
            parts,
            Box::new(move |g, _| {
                let mut grads: Vec<Vec<T>> = chans.iter().map(|&c| Vec::with_capacity(s0.n * c * plane)).collect();
                let mut off = 0;
                for _ in 0..s0.n {
                    for (gi, &c) in grads.iter_mut().zip(&chans) {
                        gi.extend_from_slice(&g.data()[off..off + c * plane]);
                        off += c * plane;
                    }
                }
                grads
                    .into_iter()
                    .zip(&chans)
                    .map(|(d, &c)| Some(Tensor::from_vec(&[s0.n, c, s0.h, s0.w], d)))
                    .collect()
            }),
        )
    }

    /// Concatenates `[R_i, C]` matrices along rows.
    pub fn concat_rows(parts: &[Var<'t, T>]) -> Var<'t, T> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        let vals: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let cols = vals[0].dim(1);
        let rows: Vec<usize> = vals.iter().map(|v| v.dim(0)).collect();
        let mut out = Vec::new();
        for v in &vals {
            assert_eq!(v.dim(1), cols, "concat_rows width mismatch");
            out.extend_from_slice(v.data());
        }
        tape.op(
            Tensor::from_vec(&[rows.iter().sum(), cols], out),
            parts,
            Box::new(move |g, _| {
                let mut off = 0;
                rows.iter()
                    .map(|&r| {
                        let t = Tensor::from_vec(&[r, cols], g.data()[off * cols..(off + r) * cols].to_vec());
                        off += r;
                        Some(t)
                    })
                    .collect()
            }),
        )
    }

    /// Rows `index` of a `[R, C]` matrix.
    pub fn gather_rows(&self, index: &[usize]) -> Var<'t, T> {
        let x = self.value();
        let (r, c) = (x.dim(0), x.dim(1));
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            out.extend_from_slice(&x.data()[i * c..(i + 1) * c]);
        }
        let index = index.to_vec();
        unary(*self, Tensor::from_vec(&[index.len(), c], out), move |g| {
            let mut d = vec![T::zero(); r * c];
            for (k, &i) in index.iter().enumerate() {
                for j in 0..c {
                    d[i * c + j] += g.data()[k * c + j];
                }
            }
            Tensor::from_vec(&[r, c], d)
        })
    }

    /// `sum_i w_i * BCE(sigmoid(x_i), y_i)` over a flat logit vector.
    pub fn bce_with_logits(&self, targets: &[T], weights: &[T]) -> Var<'t, T> {
        let x = self.value();
        assert!(x.len() == targets.len() && x.len() == weights.len());
        let mut loss = T::zero();
        for ((&z, &y), &w) in x.data().iter().zip(targets).zip(weights) {
            // max(z,0) - z*y + log(1 + exp(-|z|))
            loss += w * (z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln());
        }
        let (targets, weights) = (targets.to_vec(), weights.to_vec());
        unary(*self, Tensor::scalar(loss), move |g| {
            let gv = g.item();
            let d = x
                .data()
                .iter()
                .zip(&targets)
                .zip(&weights)
                .map(|((&z, &y), &w)| gv * w * (T::one() / (T::one() + (-z).exp()) - y))
                .collect();
            Tensor::from_vec(x.shape(), d)
        })
    }

    /// `sum_r w_r * CE(softmax(x_r), label_r)` for logits `[R, K]`.
    pub fn softmax_cross_entropy(&self, labels: &[usize], weights: &[T]) -> Var<'t, T> {
        let x = self.value();
        let (r, k) = (x.dim(0), x.dim(1));
        assert!(labels.len() == r && weights.len() == r);
        let mut probs = vec![T::zero(); r * k];
        let mut loss = T::zero();
        for i in 0..r {
            let row = &x.data()[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - m).exp() / z;
            }
            loss += weights[i] * (z.ln() + m - row[labels[i]]);
        }
        let (labels, weights) = (labels.to_vec(), weights.to_vec());
        unary(*self, Tensor::scalar(loss), move |g| {
            let gv = g.item();
            let mut d = probs.clone();
            for i in 0..r {
                d[i * k + labels[i]] -= T::one();
                for j in 0..k {
                    d[i * k + j] *= gv * weights[i];
                }
            }
            Tensor::from_vec(&[r, k], d)
        })
    }

    /// `sum_i w_i * smoothL1(x_i - t_i)` with transition point `beta`.
    pub fn smooth_l1(&self, targets: &Tensor<T>, weights: &Tensor<T>, beta: f64) -> Var<'t, T> {
        let x = self.value();
        assert!(x.shape() == targets.shape() && x.shape() == weights.shape(), "smooth_l1 shapes");
        let b = T::lit(beta);
        let half = T::lit(0.5);
        let mut loss = T::zero();
        for ((&p, &t), &w) in x.data().iter().zip(targets.data()).zip(weights.data()) {
            if w == T::zero() {
                continue;
            }
            let d = (p - t).abs();
            loss += w * if d < b { half * d * d / b } else { d - half * b };
        }
        let (targets, weights) = (targets.clone(), weights.clone());
        unary(*self, Tensor::scalar(loss), move |g| {
            let gv = g.item();
            let d = x
                .data()
                .iter()
                .zip(targets.data())
                .zip(weights.data())
                .map(|((&p, &t), &w)| {
                    let r = p - t;
                    let s = if r.abs() < b { r / b } else { r.signum() };
                    gv * w * s
                })
                .collect();
            Tensor::from_vec(x.shape(), d)
        })
    }

    /// Mean squared error against a constant target.
    pub fn mse(&self, target: &Tensor<T>) -> Var<'t, T> {
        let x = self.value();
        assert_eq!(x.shape(), target.shape(), "mse shapes");
        let n = T::lit(x.len() as f64);
        let diff = x.zip_map(target, |a, b| a - b);
        let loss = diff.data().iter().map(|&d| d * d).sum::<T>() / n;
        unary(*self, Tensor::scalar(loss), move |g| {
            let s = g.item() * T::lit(2.0) / n;
            diff.scale(s)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(f)/d(input) for a scalar-valued graph.
    fn check<F>(inputs: Vec<Tensor<f64>>, f: F)
    where
        F: for<'t> Fn(&[Var<'t, f64>]) -> Var<'t, f64>,
    {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&vars);
        let grads = tape.backward(out);
        let h = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).expect("gradient present");
            for i in 0..input.len() {
                let eval = |delta: f64| {
                    let t2 = Tape::inference();
                    let vs: Vec<_> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            let mut t = t.clone();
                            if j == k {
                                t.data_mut()[i] += delta;
                            }
                            t2.constant(t)
                        })
                        .collect();
                    f(&vs).value().item()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[i];
                let err = (a - numeric).abs() / (1.0 + a.abs().max(numeric.abs()));
                assert!(err < 1e-5, "input {k} elem {i}: analytic {a} numeric {numeric}");
            }
        }
    }

    fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn weighted_sum<'t>(v: Var<'t, f64>, seed: u64) -> Var<'t, f64> {
        let w = v.tape().constant(rnd(&v.shape(), seed));
        v.mul(w).sum()
    }

    #[test]
    fn grad_conv_bias_and_silu() {
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
            check(vec![rnd(&[2, 2, 5, 4], 1), rnd(&[3, 2, k, k], 2), rnd(&[3], 3)], |v| {
                weighted_sum(v[0].conv2d(v[1], Some(v[2]), ConvGeom { stride, pad }).silu(), 9)
            });
        }
    }

    #[test]
    fn grad_group_norm() {
        check(vec![rnd(&[2, 4, 3, 3], 4), rnd(&[4], 5), rnd(&[4], 6)], |v| {
            weighted_sum(v[0].group_norm(v[1], v[2], 2), 7)
        });
    }

    #[test]
    fn grad_linear_relu_and_channel_vec() {
        check(vec![rnd(&[3, 4], 1), rnd(&[4, 2], 2), rnd(&[2], 3)], |v| {
            weighted_sum(v[0].linear(v[1], Some(v[2])).relu(), 4)
        });
        check(vec![rnd(&[2, 3, 2, 2], 1), rnd(&[2, 3], 2)], |v| weighted_sum(v[0].add_channel_vec(v[1]), 3));
    }

    #[test]
    fn grad_resampling_ops() {
        check(vec![rnd(&[1, 2, 5, 7], 1)], |v| weighted_sum(v[0].bilinear_resize(2, 3), 2));
        check(vec![rnd(&[1, 2, 3, 3], 1)], |v| weighted_sum(v[0].bilinear_resize(6, 5), 2));
        check(vec![rnd(&[1, 2, 3, 2], 1)], |v| weighted_sum(v[0].upsample2(), 2));
        let plan = Rc::new(kernels::roi_align_plan(&[[0.3, 0.7, 3.9, 4.2], [2.0, 1.0, 5.5, 3.0]], 5, 6, 2));
        check(vec![rnd(&[1, 3, 5, 6], 1)], move |v| weighted_sum(v[0].roi_align(plan.clone()), 2));
    }

    #[test]
    fn grad_structural_ops() {
        check(vec![rnd(&[1, 2, 2, 3], 1), rnd(&[1, 1, 2, 3], 2)], |v| {
            weighted_sum(Var::concat_channels(&[v[0], v[1]]).chw_to_rows(), 3)
        });
        check(vec![rnd(&[2, 3], 1), rnd(&[1, 3], 2)], |v| {
            weighted_sum(Var::concat_rows(&[v[0], v[1]]).gather_rows(&[2, 0, 0]), 3)
        });
    }

    #[test]
    fn grad_losses() {
        let y = [1.0, 0.0, 1.0, 0.0];
        let w = [0.5, 1.0, 0.0, 2.0];
        check(vec![rnd(&[4], 1)], move |v| v[0].bce_with_logits(&y, &w));
        check(vec![rnd(&[3, 4], 2)], |v| v[0].softmax_cross_entropy(&[0, 3, 1], &[1.0, 0.5, 2.0]));
        let t = rnd(&[2, 3], 3).scale(0.3);
        let wt = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 1.0, 1.0, 2.0, 1.0]);
        check(vec![rnd(&[2, 3], 4).scale(0.3)], move |v| v[0].smooth_l1(&t, &wt, 1.0));
        let tgt = rnd(&[5], 5);
        check(vec![rnd(&[5], 6)], move |v| v[0].mse(&tgt));
    }

    #[test]
    fn inference_tape_records_nothing() {
        let tape = Tape::<f32>::inference();
        let x = tape.leaf(Tensor::ones(&[2]));
        let y = x.scale(2.0).sum();
        assert!(!y.requires_grad());
        assert_eq!(y.value().item(), 4.0);
        assert!(tape.backward(y).get(x).is_none());
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[1], vec![3.0]));
        let y = x.mul(x).add(x);
        let g = tape.backward(y);
        assert_eq!(g.get(x).unwrap().item(), 7.0);
    }
}
