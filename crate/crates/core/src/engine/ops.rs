use std::rc::Rc;

use super::{GradSink, Graph, Tensor, Var};

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Maps every flat index of `out_shape` to a flat index of `src_shape`,
/// where `src_shape` has size 1 on broadcast axes.
fn broadcast_index(src_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let src_strides = strides(src_shape);
    let eff: Vec<usize> = src_shape.iter().zip(&src_strides).map(|(&d, &s)| if d == 1 { 0 } else { s }).collect();
    let n: usize = out_shape.iter().product();
    let mut idx = vec![0usize; n];
    let mut coord = vec![0usize; out_shape.len()];
    let mut src = 0usize;
    for slot in idx.iter_mut() {
        *slot = src;
        for d in (0..out_shape.len()).rev() {
            coord[d] += 1;
            src += eff[d];
            if coord[d] < out_shape[d] {
                break;
            }
            src -= eff[d] * coord[d];
            coord[d] = 0;
        }
    }
    idx
}

impl<'g> Var<'g> {
    fn unary(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'g> {
        let x = self.value();
        let out = Tensor::new(x.shape.clone(), x.data.iter().map(|v| f(*v)).collect());
        let y = Rc::new(out.clone());
        let id = self.id;
        self.g.record(out, &[id], move || {
            Box::new(move |grad: &[f64], sink: &mut GradSink| {
                sink.with(id, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += grad[i] * df(x.data[i], y.data[i]);
                    }
                })
            })
        })
    }

    fn check_same(&self, other: &Var<'g>) {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape, b.shape, "elementwise op on mismatched shapes");
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        self.check_same(&other);
        let (a, b) = (self.value(), other.value());
        let out = Tensor::new(a.shape.clone(), a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect());
        let (ia, ib) = (self.id, other.id);
        self.g.record(out, &[ia, ib], move || {
            Box::new(move |grad, sink| {
                sink.add(ia, grad);
                sink.add(ib, grad);
            })
        })
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        self.add(other.scale(-1.0))
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        self.check_same(&other);
        let (a, b) = (self.value(), other.value());
        let out = Tensor::new(a.shape.clone(), a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect());
        let (ia, ib) = (self.id, other.id);
        self.g.record(out, &[ia, ib], move || {
            Box::new(move |grad, sink| {
                sink.with(ia, |g| g.iter_mut().zip(grad).zip(&b.data).for_each(|((g, d), y)| *g += d * y));
                sink.with(ib, |g| g.iter_mut().zip(grad).zip(&a.data).for_each(|((g, d), x)| *g += d * x));
            })
        })
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        let x = self.value();
        let out = Tensor::new(x.shape.clone(), x.data.iter().map(|v| v * s).collect());
        let id = self.id;
        self.g.record(out, &[id], move || Box::new(move |grad, sink| sink.with(id, |g| g.iter_mut().zip(grad).for_each(|(g, d)| *g += s * d))))
    }

    pub fn add_scalar(self, s: f64) -> Var<'g> {
        self.unary(move |v| v + s, |_, _| 1.0)
    }

    pub fn sqr(self) -> Var<'g> {
        self.unary(|v| v * v, |x, _| 2.0 * x)
    }

    pub fn silu(self) -> Var<'g> {
        self.unary(
            |v| v / (1.0 + (-v).exp()),
            |x, _| {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    /// Elementwise Huber penalty with threshold `delta`.
    pub fn huber(self, delta: f64) -> Var<'g> {
        self.unary(
            move |r| if r.abs() <= delta { 0.5 * r * r } else { delta * (r.abs() - 0.5 * delta) },
            move |r, _| if r.abs() <= delta { r } else { delta * r.signum() },
        )
    }

    /// Broadcasts size-1 axes up to `shape` (same rank).
    pub fn broadcast_to(self, shape: &[usize]) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.shape.len(), shape.len(), "broadcast must keep rank");
        for (a, b) in x.shape.iter().zip(shape) {
            assert!(*a == *b || *a == 1, "cannot broadcast {:?} to {:?}", x.shape, shape);
        }
        if x.shape == shape {
            return self;
        }
        let idx = Rc::new(broadcast_index(&x.shape, shape));
        let out = Tensor::new(shape.to_vec(), idx.iter().map(|i| x.data[*i]).collect());
        let id = self.id;
        self.g.record(out, &[id], move || {
            Box::new(move |grad, sink| {
                sink.with(id, |g| {
                    for (o, i) in idx.iter().enumerate() {
                        g[*i] += grad[o];
                    }
                })
            })
        })
    }

    pub fn add_bcast(self, other: Var<'g>) -> Var<'g> {
        let shape = self.shape();
        self.add(other.broadcast_to(&shape))
    }

    pub fn mul_bcast(self, other: Var<'g>) -> Var<'g> {
        let shape = self.shape();
        self.mul(other.broadcast_to(&shape))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.numel(), shape.iter().product::<usize>(), "reshape {:?} -> {:?}", x.shape, shape);
        let out = Tensor::new(shape.to_vec(), x.data.clone());
        let id = self.id;
        self.g.record(out, &[id], move || Box::new(move |grad, sink| sink.add(id, grad)))
    }

    pub fn sum_all(self) -> Var<'g> {
        let x = self.value();
        let out = Tensor::scalar(x.data.iter().sum());
        let id = self.id;
        self.g.record(out, &[id], move || {
            Box::new(move |grad, sink| {
                let d = grad[0];
                sink.with(id, |g| g.iter_mut().for_each(|v| *v += d))
            })
        })
    }

    pub fn mean_all(self) -> Var<'g> {
        let n = self.value().numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Mean over every axis but the first: `[B, ...] -> [B]`.
    pub fn mean_per_sample(self) -> Var<'g> {
        let x = self.value();
        let b = x.shape[0];
        let inner = x.numel() / b;
        let out = Tensor::new(vec![b], x.data.chunks(inner).map(|c| c.iter().sum::<f64>() / inner as f64).collect());
        let id = self.id;
        self.g.record(out, &[id], move || {
            Box::new(move |grad, sink| {
                sink.with(id, |g| {
                    for (k, chunk) in g.chunks_mut(inner).enumerate() {
                        let d = grad[k] / inner as f64;
                        chunk.iter_mut().for_each(|v| *v += d);
                    }
                })
            })
        })
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g> {
        let x = self.value();
        let outer: usize = x.shape[..axis].iter().product();
        let dim = x.shape[axis];
        assert!(start + len <= dim, "narrow out of range");
        let inner: usize = x.shape[axis + 1..].iter().product();
        let mut shape = x.shape.clone();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&x.data[base..base + len * inner]);
        }
        let id = self.id;
        self.g.record(Tensor::new(shape, data), &[id], move || {
            Box::new(move |grad, sink| {
                sink.with(id, |g| {
                    for o in 0..outer {
                        let base = (o * dim + start) * inner;
                        let src = &grad[o * len * inner..(o + 1) * len * inner];
                        g[base..base + len * inner].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                })
            })
        })
    }

    /// Softmax over the last axis.
    pub fn softmax_last(self) -> Var<'g> {
        let x = self.value();
        let n = *x.shape.last().unwrap();
        let mut data = x.data.clone();
        for row in data.chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let y = Rc::new(data.clone());
        let id = self.id;
        self.g.record(Tensor::new(x.shape.clone(), data), &[id], move || {
            Box::new(move |grad, sink| {
                sink.with(id, |g| {
                    for ((gr, dy), yr) in g.chunks_mut(n).zip(grad.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = dy.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for i in 0..n {
                            gr[i] += yr[i] * (dy[i] - dot);
                        }
                    }
                })
            })
        })
    }

    /// Batched matrix product of `[B, M, K]` (or `[B, K, M]` when
    /// `trans_a`) with `[B, K, N]` (or `[B, N, K]` when `trans_b`). Either
    /// operand may have batch 1, in which case it is shared.
    pub fn matmul(self, other: Var<'g>, trans_a: bool, trans_b: bool) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert!(a.shape.len() == 3 && b.shape.len() == 3, "matmul expects rank-3 operands");
        let (ba, bb) = (a.shape[0], b.shape[0]);
        assert!(ba == bb || ba == 1 || bb == 1, "matmul batch mismatch: {ba} vs {bb}");
        let batch = ba.max(bb);
        let (m, k) = if trans_a { (a.shape[2], a.shape[1]) } else { (a.shape[1], a.shape[2]) };
        let (k2, n) = if trans_b { (b.shape[2], b.shape[1]) } else { (b.shape[1], b.shape[2]) };
        assert_eq!(k, k2, "matmul inner dimension mismatch: {:?} x {:?}", a.shape, b.shape);
        let a_at = move |bi: usize| if ba == 1 { 0 } else { bi * m * k };
        let b_at = move |bi: usize| if bb == 1 { 0 } else { bi * k * n };
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            gemm(
                &a.data[a_at(bi)..a_at(bi) + m * k],
                trans_a,
                &b.data[b_at(bi)..b_at(bi) + k * n],
                trans_b,
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
                0.0,
            );
        }
        let (ia, ib) = (self.id, other.id);
        self.g.record(Tensor::new(vec![batch, m, n], out), &[ia, ib], move || {
            Box::new(move |grad, sink| {
                for bi in 0..batch {
                    let gout = &grad[bi * m * n..(bi + 1) * m * n];
                    let bslice = &b.data[b_at(bi)..b_at(bi) + k * n];
                    let aslice = &a.data[a_at(bi)..a_at(bi) + m * k];
                    // dA = dC · op(B)^T, stored in A's own layout
                    sink.with(ia, |ga| {
                        let dst = &mut ga[a_at(bi)..a_at(bi) + m * k];
                        if trans_a {
                            // A stored [K, M]: dA^T = op(B) · dC^T
                            gemm(bslice, trans_b, gout, true, dst, k, n, m, 1.0);
                        } else {
                            gemm(gout, false, bslice, !trans_b, dst, m, n, k, 1.0);
                        }
                    });
                    sink.with(ib, |gb| {
                        let dst = &mut gb[b_at(bi)..b_at(bi) + k * n];
                        if trans_b {
                            // B stored [N, K]: dB^T = dC^T · op(A)
                            gemm(gout, true, aslice, trans_a, dst, n, m, k, 1.0);
                        } else {
                            gemm(aslice, !trans_a, gout, false, dst, k, m, n, 1.0);
                        }
                    });
                }
            })
        })
    }

    /// Rotary position embedding on `[B, D, L]` (D even): each channel pair
    /// `(2i, 2i+1)` at position `l` is rotated by `angles[i * L + l]`.
    pub fn rotary(self, angles: Rc<Vec<f64>>) -> Var<'g> {
        let x = self.value();
        let (b, d, l) = (x.shape[0], x.shape[1], x.shape[2]);
        assert!(d % 2 == 0 && angles.len() == d / 2 * l, "rotary layout");
        let trig: Rc<Vec<(f64, f64)>> = Rc::new(angles.iter().map(|a| a.sin_cos()).collect());
        let rotate = move |src: &[f64], dst: &mut [f64], sign: f64| {
            for bi in 0..b {
                for i in 0..d / 2 {
                    let (e, o) = ((bi * d + 2 * i) * l, (bi * d + 2 * i + 1) * l);
                    for p in 0..l {
                        let (s, c) = trig[i * l + p];
                        let s = sign * s;
                        let (u, v) = (src[e + p], src[o + p]);
                        dst[e + p] += c * u - s * v;
                        dst[o + p] += s * u + c * v;
                    }
                }
            }
        };
        let mut out = vec![0.0; x.numel()];
        rotate(&x.data, &mut out, 1.0);
        let id = self.id;
        self.g.record(Tensor::new(x.shape.clone(), out), &[id], move || Box::new(move |grad, sink| sink.with(id, |g| rotate(grad, g, -1.0))))
    }
}

/// Concatenate along `axis`.
pub fn concat<'g>(vars: &[Var<'g>], axis: usize) -> Var<'g> {
    assert!(!vars.is_empty());
    let g: &'g Graph = vars[0].graph();
    let vals: Vec<Rc<Tensor>> = vars.iter().map(|v| v.value()).collect();
    let base = &vals[0].shape;
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let dims: Vec<usize> = vals.iter().map(|v| v.shape[axis]).collect();
    for v in &vals {
        assert_eq!(v.shape.len(), base.len());
        for d in 0..base.len() {
            if d != axis {
                assert_eq!(v.shape[d], base[d], "concat shape mismatch on axis {d}");
            }
        }
    }
    let total: usize = dims.iter().sum();
    let mut shape = base.clone();
    shape[axis] = total;
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, d) in vals.iter().zip(&dims) {
            data.extend_from_slice(&v.data[o * d * inner..(o + 1) * d * inner]);
        }
    }
    let ids: Vec<usize> = vars.iter().map(|v| v.id()).collect();
    let ids2 = ids.clone();
    g.record(Tensor::new(shape, data), &ids, move || {
        Box::new(move |grad, sink| {
            let mut offset = 0;
            for (id, d) in ids2.iter().zip(&dims) {
                if sink.wants(*id) {
                    sink.with(*id, |gv| {
                        for o in 0..outer {
                            let src = &grad[(o * total + offset) * inner..(o * total + offset + d) * inner];
                            gv[o * d * inner..(o + 1) * d * inner].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    });
                }
                offset += d;
            }
        })
    })
}

/// `C = alpha_c * C + op(A) · op(B)` for row-major operands, where `op(A)` is
/// `m x k` and `op(B)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], m: usize, k: usize, n: usize, beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slices cover the m*k, k*n and m*n extents addressed by the
    // strides above.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}
