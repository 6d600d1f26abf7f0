use std::rc::Rc;

use super::ops::gemm;
use super::{Tensor, Var};

/// Padding and stride of a 2-D convolution. Padding is `k / 2` on each side;
/// the horizontal axis wraps around when `circular` is set, the vertical
/// axis is always zero-padded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: (usize, usize),
    pub circular: bool,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self { stride: (1, 1), circular: true }
    }
}

struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    spec: ConvSpec,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == (1, 1)
    }

    /// Source column for output column `ox` and kernel column `j`, or
    /// `None` when it falls into zero padding.
    #[inline]
    fn source_col(&self, ox: usize, j: usize) -> Option<usize> {
        let x = (ox * self.spec.stride.1 + j) as isize - (self.kw / 2) as isize;
        if self.spec.circular {
            Some(x.rem_euclid(self.w as isize) as usize)
        } else if x < 0 || x >= self.w as isize {
            None
        } else {
            Some(x as usize)
        }
    }

    /// Source row for output row `oy` and kernel row `i`.
    #[inline]
    fn source_row(&self, oy: usize, i: usize) -> Option<usize> {
        let y = (oy * self.spec.stride.0 + i) as isize - (self.kh / 2) as isize;
        (y >= 0 && y < self.h as isize).then_some(y as usize)
    }

    /// Column gather table for kernel column `j`: `wo` source indices,
    /// `usize::MAX` for padding.
    fn col_table(&self) -> Vec<usize> {
        let mut t = Vec::with_capacity(self.kw * self.wo);
        for j in 0..self.kw {
            t.extend((0..self.wo).map(|ox| self.source_col(ox, j).unwrap_or(usize::MAX)));
        }
        t
    }

    fn im2col(&self, img: &[f64], col: &mut [f64], table: &[usize]) {
        let p = self.cols();
        for c in 0..self.cin {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let dst = &mut col[row * p..(row + 1) * p];
                    let tj = &table[j * self.wo..(j + 1) * self.wo];
                    for oy in 0..self.ho {
                        let d = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        match self.source_row(oy, i) {
                            None => d.fill(0.0),
                            Some(y) => {
                                let src = &img[(c * self.h + y) * self.w..(c * self.h + y + 1) * self.w];
                                for (o, &x) in d.iter_mut().zip(tj) {
                                    *o = if x == usize::MAX { 0.0 } else { src[x] };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], img: &mut [f64], table: &[usize]) {
        let p = self.cols();
        for c in 0..self.cin {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let src = &col[row * p..(row + 1) * p];
                    let tj = &table[j * self.wo..(j + 1) * self.wo];
                    for oy in 0..self.ho {
                        if let Some(y) = self.source_row(oy, i) {
                            let dst = &mut img[(c * self.h + y) * self.w..(c * self.h + y + 1) * self.w];
                            for (v, &x) in src[oy * self.wo..(oy + 1) * self.wo].iter().zip(tj) {
                                if x != usize::MAX {
                                    dst[x] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<'g> Var<'g> {
    /// 2-D convolution of `[B, Cin, H, W]` with weights `[Cout, Cin, kh, kw]`
    /// (odd kernel sizes) and optional bias `[Cout]`.
    pub fn conv2d(self, weight: Var<'g>, bias: Option<Var<'g>>, spec: ConvSpec) -> Var<'g> {
        let x = self.value();
        let wt = weight.value();
        let (b, cin, h, w) = x.dims4();
        let (cout, wcin, kh, kw) = wt.dims4();
        assert_eq!(cin, wcin, "conv input channels {cin} vs weight {wcin}");
        assert!(kh % 2 == 1 && kw % 2 == 1, "conv kernels must be odd-sized");
        let (sh, sw) = spec.stride;
        let ho = (h + 2 * (kh / 2) - kh) / sh + 1;
        let wo = (w + 2 * (kw / 2) - kw) / sw + 1;
        let geo = Rc::new(Geometry { cin, h, w, kh, kw, ho, wo, spec });
        let (k, p) = (geo.rows(), geo.cols());
        let table = Rc::new(geo.col_table());
        let bias_val = bias.map(|v| v.value());
        if let Some(bv) = &bias_val {
            assert_eq!(bv.data.len(), cout, "conv bias length");
        }

        // Pointwise convolutions read the input directly; its layout already
        // matches the column matrix.
        let cols: Rc<Tensor> = if geo.is_pointwise() {
            Rc::clone(&x)
        } else {
            let mut cols = vec![0.0; b * k * p];
            for bi in 0..b {
                geo.im2col(&x.data[bi * cin * h * w..(bi + 1) * cin * h * w], &mut cols[bi * k * p..(bi + 1) * k * p], &table);
            }
            Rc::new(Tensor::new(vec![b, k, p], cols))
        };

        let mut out = vec![0.0; b * cout * p];
        for bi in 0..b {
            let dst = &mut out[bi * cout * p..(bi + 1) * cout * p];
            if let Some(bv) = &bias_val {
                for (co, chunk) in dst.chunks_mut(p).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = bv.data[co]);
                }
            }
            let col = &cols.data[bi * k * p..(bi + 1) * k * p];
            gemm(&wt.data, false, col, false, dst, cout, k, p, 1.0);
        }

        let mut inputs = vec![self.id, weight.id];
        let bias_id = bias.map(|v| v.id);
        if let Some(id) = bias_id {
            inputs.push(id);
        }
        let (xid, wid) = (self.id, weight.id);
        self.g.record(Tensor::new(vec![b, cout, ho, wo], out), &inputs, move || {
            Box::new(move |grad, sink| {
                if let Some(bid) = bias_id {
                    sink.with(bid, |gb| {
                        for bi in 0..b {
                            for co in 0..cout {
                                gb[co] += grad[(bi * cout + co) * p..(bi * cout + co + 1) * p].iter().sum::<f64>();
                            }
                        }
                    });
                }
                sink.with(wid, |gw| {
                    for bi in 0..b {
                        let col = &cols.data[bi * k * p..(bi + 1) * k * p];
                        gemm(&grad[bi * cout * p..(bi + 1) * cout * p], false, col, true, gw, cout, p, k, 1.0);
                    }
                });
                sink.with(xid, |gx| {
                    let mut dcol = if geo.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
                    for bi in 0..b {
                        let gout = &grad[bi * cout * p..(bi + 1) * cout * p];
                        let gimg = &mut gx[bi * cin * h * w..(bi + 1) * cin * h * w];
                        if geo.is_pointwise() {
                            gemm(&wt.data, true, gout, false, gimg, k, cout, p, 1.0);
                        } else {
                            gemm(&wt.data, true, gout, false, &mut dcol, k, cout, p, 0.0);
                            geo.col2im(&dcol, gimg, &table);
                        }
                    }
                });
            })
        })
    }

    /// Average pooling with window equal to stride.
    pub fn avg_pool(self, sh: usize, sw: usize) -> Var<'g> {
        let x = self.value();
        let (b, c, h, w) = x.dims4();
        assert!(h % sh == 0 && w % sw == 0, "pooling {sh}x{sw} does not tile {h}x{w}");
        if sh == 1 && sw == 1 {
            return self;
        }
        let (ho, wo) = (h / sh, w / sw);
        let scale = 1.0 / (sh * sw) as f64;
        let mut out = vec![0.0; b * c * ho * wo];
        for plane in 0..b * c {
            for y in 0..h {
                for xx in 0..w {
                    out[(plane * ho + y / sh) * wo + xx / sw] += scale * x.data[(plane * h + y) * w + xx];
                }
            }
        }
        let id = self.id;
        self.g.record(Tensor::new(vec![b, c, ho, wo], out), &[id], move || {
            Box::new(move |grad, sink| {
                sink.with(id, |g| {
                    for plane in 0..b * c {
                        for y in 0..h {
                            for xx in 0..w {
                                g[(plane * h + y) * w + xx] += scale * grad[(plane * ho + y / sh) * wo + xx / sw];
                            }
                        }
                    }
                })
            })
        })
    }

    /// Bilinear upsampling by integer factors (half-pixel centres). Rows clamp
    /// at the edges; columns wrap around.
    pub fn upsample_bilinear(self, fh: usize, fw: usize) -> Var<'g> {
        let x = self.value();
        let (b, c, h, w) = x.dims4();
        if fh == 1 && fw == 1 {
            return self;
        }
        let (ho, wo) = (h * fh, w * fw);
        let rows = Rc::new(taps(h, fh, false));
        let colt = Rc::new(taps(w, fw, true));
        let mut out = vec![0.0; b * c * ho * wo];
        for plane in 0..b * c {
            let src = &x.data[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
            for (oy, &(y0, y1, wy)) in rows.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in colt.iter().enumerate() {
                    let top = (1.0 - wx) * src[y0 * w + x0] + wx * src[y0 * w + x1];
                    let bot = (1.0 - wx) * src[y1 * w + x0] + wx * src[y1 * w + x1];
                    dst[oy * wo + ox] = (1.0 - wy) * top + wy * bot;
                }
            }
        }
        let id = self.id;
        self.g.record(Tensor::new(vec![b, c, ho, wo], out), &[id], move || {
            Box::new(move |grad, sink| {
                sink.with(id, |g| {
                    for plane in 0..b * c {
                        let gi = &mut g[plane * h * w..(plane + 1) * h * w];
                        let go = &grad[plane * ho * wo..(plane + 1) * ho * wo];
                        for (oy, &(y0, y1, wy)) in rows.iter().enumerate() {
                            for (ox, &(x0, x1, wx)) in colt.iter().enumerate() {
                                let d = go[oy * wo + ox];
                                gi[y0 * w + x0] += d * (1.0 - wy) * (1.0 - wx);
                                gi[y0 * w + x1] += d * (1.0 - wy) * wx;
                                gi[y1 * w + x0] += d * wy * (1.0 - wx);
                                gi[y1 * w + x1] += d * wy * wx;
                            }
                        }
                    }
                })
            })
        })
    }

    /// Cyclic shift of the last (column) axis by `shift` positions.
    pub fn roll_columns(self, shift: isize) -> Var<'g> {
        let x = self.value();
        let w = *x.shape.last().unwrap();
        let s = shift.rem_euclid(w as isize) as usize;
        let mut out = vec![0.0; x.numel()];
        for (src, dst) in x.data.chunks(w).zip(out.chunks_mut(w)) {
            for i in 0..w {
                dst[(i + s) % w] = src[i];
            }
        }
        let id = self.id;
        self.g.record(Tensor::new(x.shape.clone(), out), &[id], move || {
            Box::new(move |grad, sink| {
                sink.with(id, |g| {
                    for (gs, gd) in g.chunks_mut(w).zip(grad.chunks(w)) {
                        for i in 0..w {
                            gs[i] += gd[(i + s) % w];
                        }
                    }
                })
            })
        })
    }
}

/// Per output index: `(lower source, upper source, weight of upper)`.
fn taps(n: usize, factor: usize, wrap: bool) -> Vec<(usize, usize, f64)> {
    (0..n * factor)
        .map(|o| {
            let s = (o as f64 + 0.5) / factor as f64 - 0.5;
            let lo = s.floor();
            let frac = s - lo;
            let lo = lo as isize;
            let hi = lo + 1;
            if wrap {
                (lo.rem_euclid(n as isize) as usize, hi.rem_euclid(n as isize) as usize, frac)
            } else {
                let clamp = |i: isize| i.clamp(0, n as isize - 1) as usize;
                (clamp(lo), clamp(hi), frac)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::testutil::check_grad;
    use super::super::Graph;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn conv_once(x: &Tensor, w: &Tensor, spec: ConvSpec) -> Tensor {
        let g = Graph::inference();
        let out = g.constant(x.clone()).conv2d(g.constant(w.clone()), None, spec);
        (*out.value()).clone()
    }

    /// Direct nested-loop convolution used as an independent reference.
    fn naive_conv(x: &Tensor, w: &Tensor, circular: bool) -> Tensor {
        let (b, cin, h, wd) = x.dims4();
        let (cout, _, kh, kw) = w.dims4();
        let mut out = Tensor::zeros([b, cout, h, wd]);
        for bi in 0..b {
            for co in 0..cout {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let sy = y as isize + i as isize - (kh / 2) as isize;
                                    let mut sx = xx as isize + j as isize - (kw / 2) as isize;
                                    if sy < 0 || sy >= h as isize {
                                        continue;
                                    }
                                    if circular {
                                        sx = sx.rem_euclid(wd as isize);
                                    } else if sx < 0 || sx >= wd as isize {
                                        continue;
                                    }
                                    acc += w.data[((co * cin + ci) * kh + i) * kw + j] * x.data[((bi * cin + ci) * h + sy as usize) * wd + sx as usize];
                                }
                            }
                        }
                        out.data[((bi * cout + co) * h + y) * wd + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn([1, 2, 3, 5], 1.0, &mut rng);
        let mut w = Tensor::zeros([2, 2, 3, 3]);
        w.data[4] = 1.0;
        w.data[(2 + 1) * 9 + 4] = 1.0;
        assert_eq!(conv_once(&x, &w, ConvSpec::default()), x);
    }

    #[test]
    fn mean_kernel_wraps_impulse() {
        let mut x = Tensor::zeros([1, 1, 1, 6]);
        x.data[0] = 1.0;
        let w = Tensor::full([1, 1, 1, 3], 1.0 / 3.0);
        let y = conv_once(&x, &w, ConvSpec::default());
        assert!((y.data[5] - 1.0 / 3.0).abs() < 1e-15);
        assert!((y.data[1] - 1.0 / 3.0).abs() < 1e-15);
        let y = conv_once(&x, &w, ConvSpec { circular: false, ..Default::default() });
        assert_eq!(y.data[5], 0.0);
    }

    #[test]
    fn matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn([2, 3, 4, 7], 1.0, &mut rng);
        let w = Tensor::randn([4, 3, 3, 3], 1.0, &mut rng);
        for circular in [true, false] {
            let fast = conv_once(&x, &w, ConvSpec { stride: (1, 1), circular });
            assert!(fast.max_abs_diff(&naive_conv(&x, &w, circular)) < 1e-12);
        }
        let w1 = Tensor::randn([5, 3, 1, 1], 1.0, &mut rng);
        assert!(conv_once(&x, &w1, ConvSpec::default()).max_abs_diff(&naive_conv(&x, &w1, true)) < 1e-12);
    }

    #[test]
    fn strided_output_size() {
        let x = Tensor::zeros([1, 1, 8, 16]);
        let w = Tensor::zeros([1, 1, 3, 3]);
        let y = conv_once(&x, &w, ConvSpec { stride: (2, 2), circular: true });
        assert_eq!(y.shape, vec![1, 1, 4, 8]);
    }

    #[test]
    fn shift_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn([1, 2, 3, 9], 1.0, &mut rng);
        let w = Tensor::randn([2, 2, 3, 3], 1.0, &mut rng);
        let g = Graph::inference();
        let xv = g.constant(x);
        let wv = g.constant(w);
        let a = xv.roll_columns(4).conv2d(wv, None, ConvSpec::default()).value();
        let b = xv.conv2d(wv, None, ConvSpec::default()).roll_columns(4).value();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn([2, 2, 3, 5], 1.0, &mut rng);
        let w = Tensor::randn([3, 2, 3, 3], 0.5, &mut rng);
        let bias = Tensor::randn([3], 0.5, &mut rng);
        let (w2, b2) = (w.clone(), bias.clone());
        let ex = check_grad(&x, move |g, x| x.conv2d(g.constant(w2.clone()), Some(g.constant(b2.clone())), ConvSpec::default()).sqr().sum_all(), 1e-6);
        let x2 = x.clone();
        let ew = check_grad(&w, move |g, w| g.constant(x2.clone()).conv2d(w, None, ConvSpec { stride: (2, 1), circular: true }).sqr().sum_all(), 1e-6);
        let (x3, w3) = (x.clone(), w.clone());
        let eb = check_grad(&bias, move |g, b| g.constant(x3.clone()).conv2d(g.constant(w3.clone()), Some(b), ConvSpec::default()).sqr().sum_all(), 1e-6);
        let w1 = Tensor::randn([3, 2, 1, 1], 0.5, &mut rng);
        let ep = check_grad(&x, move |g, x| x.conv2d(g.constant(w1.clone()), None, ConvSpec::default()).sqr().sum_all(), 1e-6);
        assert!(ex < 1e-6 && ew < 1e-6 && eb < 1e-6 && ep < 1e-6, "{ex} {ew} {eb} {ep}");
    }

    #[test]
    fn pool_and_upsample() {
        let g = Graph::inference();
        let x = g.constant(Tensor::new([1, 1, 2, 4], vec![1., 2., 3., 4., 5., 6., 7., 8.]));
        assert_eq!(x.avg_pool(2, 2).value().data, vec![3.5, 5.5]);
        let c = g.constant(Tensor::full([1, 1, 2, 3], 2.5));
        assert!(c.upsample_bilinear(2, 2).value().data.iter().all(|v| (v - 2.5).abs() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = Tensor::randn([1, 2, 2, 4], 1.0, &mut rng);
        assert!(check_grad(&t, |_, x| x.upsample_bilinear(2, 2).sqr().sum_all(), 1e-6) < 1e-6);
        assert!(check_grad(&t, |_, x| x.avg_pool(1, 2).sqr().sum_all(), 1e-6) < 1e-6);
        assert!(check_grad(&t, |_, x| x.roll_columns(-3).silu().sum_all(), 1e-6) < 1e-6);
    }

    #[test]
    fn upsample_commutes_with_matched_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = Graph::inference();
        let x = g.constant(Tensor::randn([1, 1, 2, 5], 1.0, &mut rng));
        let a = x.roll_columns(1).upsample_bilinear(2, 2).value();
        let b = x.upsample_bilinear(2, 2).roll_columns(2).value();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }
}
