use super::{Tensor, Var};

const EPS: f64 = 1e-5;

impl<'g> Var<'g> {
    /// Group normalisation of `[B, C, H, W]` with per-channel affine
    /// `gamma`, `beta` of shape `[C]`.
    pub fn group_norm(self, groups: usize, gamma: Var<'g>, beta: Var<'g>) -> Var<'g> {
        let x = self.value();
        let (b, c, h, w) = x.dims4();
        assert!(c % groups == 0, "{c} channels not divisible into {groups} groups");
        let gv = gamma.value();
        let bv = beta.value();
        assert_eq!((gv.numel(), bv.numel()), (c, c), "group norm affine size");
        let cg = c / groups;
        let hw = h * w;
        let m = cg * hw;

        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; b * groups];
        for bi in 0..b {
            for gi in 0..groups {
                let off = (bi * c + gi * cg) * hw;
                let seg = &x.data[off..off + m];
                let mean = seg.iter().sum::<f64>() / m as f64;
                let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                let is = 1.0 / (var + EPS).sqrt();
                inv_std[bi * groups + gi] = is;
                for (o, v) in xhat[off..off + m].iter_mut().zip(seg) {
                    *o = (v - mean) * is;
                }
            }
        }
        let mut out = vec![0.0; x.numel()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                for k in off..off + hw {
                    out[k] = xhat[k] * gv.data[ch] + bv.data[ch];
                }
            }
        }

        let (xid, gid, bid) = (self.id, gamma.id, beta.id);
        self.g.record(Tensor::new(x.shape.clone(), out), &[xid, gid, bid], move || {
            Box::new(move |grad, sink| {
                sink.with(bid, |gb| {
                    for bi in 0..b {
                        for ch in 0..c {
                            let off = (bi * c + ch) * hw;
                            gb[ch] += grad[off..off + hw].iter().sum::<f64>();
                        }
                    }
                });
                sink.with(gid, |gg| {
                    for bi in 0..b {
                        for ch in 0..c {
                            let off = (bi * c + ch) * hw;
                            gg[ch] += (off..off + hw).map(|k| grad[k] * xhat[k]).sum::<f64>();
                        }
                    }
                });
                sink.with(xid, |gx| {
                    for bi in 0..b {
                        for gi in 0..groups {
                            let off = (bi * c + gi * cg) * hw;
                            let is = inv_std[bi * groups + gi];
                            // dxhat = grad * gamma; dx = is * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
                            let dxhat = |k: usize| grad[k] * gv.data[k / hw % c];
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for k in off..off + m {
                                let d = dxhat(k);
                                s1 += d;
                                s2 += d * xhat[k];
                            }
                            s1 /= m as f64;
                            s2 /= m as f64;
                            for k in off..off + m {
                                gx[k] += is * (dxhat(k) - s1 - xhat[k] * s2);
                            }
                        }
                    }
                });
            })
        })
    }

    /// Cosine similarity between `self` and `other` along the channel axis
    /// of `[B, C, H, W]`, giving `[B, H, W]`.
    pub fn channel_cosine(self, other: Var<'g>) -> Var<'g> {
        let a = self.value();
        let o = other.value();
        assert_eq!(a.shape, o.shape, "channel_cosine shapes");
        let (b, c, h, w) = a.dims4();
        let hw = h * w;
        let idx = move |bi: usize, ch: usize, p: usize| (bi * c + ch) * hw + p;
        let mut na = vec![0.0; b * hw];
        let mut nb = vec![0.0; b * hw];
        let mut cos = vec![0.0; b * hw];
        for bi in 0..b {
            for p in 0..hw {
                let (mut dot, mut sa, mut sb) = (0.0, 0.0, 0.0);
                for ch in 0..c {
                    let (x, y) = (a.data[idx(bi, ch, p)], o.data[idx(bi, ch, p)]);
                    dot += x * y;
                    sa += x * x;
                    sb += y * y;
                }
                let q = bi * hw + p;
                na[q] = sa.sqrt().max(1e-8);
                nb[q] = sb.sqrt().max(1e-8);
                cos[q] = dot / (na[q] * nb[q]);
            }
        }
        let (aid, oid) = (self.id, other.id);
        let cos_out = cos.clone();
        self.g.record(Tensor::new(vec![b, h, w], cos_out), &[aid, oid], move || {
            Box::new(move |grad, sink| {
                // d cos / d a = b/(|a||b|) - cos * a/|a|^2
                for (id, mine, theirs, nm, nt) in [(aid, &a, &o, &na, &nb), (oid, &o, &a, &nb, &na)] {
                    sink.with(id, |g| {
                        for bi in 0..b {
                            for p in 0..hw {
                                let q = bi * hw + p;
                                let gq = grad[q];
                                for ch in 0..c {
                                    let k = idx(bi, ch, p);
                                    g[k] += gq * (theirs.data[k] / (nm[q] * nt[q]) - cos[q] * mine.data[k] / (nm[q] * nm[q]));
                                }
                            }
                        }
                    });
                }
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::check_grad;
    use super::super::Graph;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalised_groups_have_zero_mean_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = Graph::inference();
        let x = g.constant(Tensor::randn([2, 4, 3, 5], 3.0, &mut rng));
        let y = x.group_norm(2, g.constant(Tensor::full([4], 1.0)), g.constant(Tensor::zeros([4]))).value();
        for seg in y.data.chunks(2 * 15) {
            let mean = seg.iter().sum::<f64>() / 30.0;
            let var = seg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 30.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn group_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::randn([2, 4, 2, 3], 1.0, &mut rng);
        let gamma = Tensor::randn([4], 1.0, &mut rng);
        let beta = Tensor::randn([4], 1.0, &mut rng);
        let weights = Tensor::randn([2, 4, 2, 3], 1.0, &mut rng);
        let (g1, b1, w1) = (gamma.clone(), beta.clone(), weights.clone());
        let ex = check_grad(&x, move |g, x| x.group_norm(2, g.constant(g1.clone()), g.constant(b1.clone())).mul(g.constant(w1.clone())).sqr().sum_all(), 1e-6);
        let (x2, b2, w2) = (x.clone(), beta.clone(), weights.clone());
        let eg = check_grad(&gamma, move |g, ga| g.constant(x2.clone()).group_norm(4, ga, g.constant(b2.clone())).mul(g.constant(w2.clone())).sum_all(), 1e-6);
        let (x3, g3) = (x.clone(), gamma.clone());
        let eb = check_grad(&beta, move |g, be| g.constant(x3.clone()).group_norm(1, g.constant(g3.clone()), be).sqr().sum_all(), 1e-6);
        assert!(ex < 1e-5 && eg < 1e-6 && eb < 1e-6, "{ex} {eg} {eb}");
    }

    #[test]
    fn channel_cosine_values_and_gradients() {
        let g = Graph::inference();
        let a = g.constant(Tensor::new([1, 2, 1, 2], vec![1.0, 1.0, 0.0, 1.0]));
        let b = g.constant(Tensor::new([1, 2, 1, 2], vec![2.0, -1.0, 0.0, -1.0]));
        let c = a.channel_cosine(b).value();
        assert!((c.data[0] - 1.0).abs() < 1e-12);
        assert!((c.data[1] + 1.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn([2, 3, 2, 2], 1.0, &mut rng);
        let y = Tensor::randn([2, 3, 2, 2], 1.0, &mut rng);
        let y2 = y.clone();
        assert!(check_grad(&x, move |g, x| x.channel_cosine(g.constant(y2.clone())).sqr().sum_all(), 1e-6) < 1e-6);
        let x2 = x.clone();
        assert!(check_grad(&y, move |g, y| g.constant(x2.clone()).channel_cosine(y).sum_all(), 1e-6) < 1e-6);
    }
}
