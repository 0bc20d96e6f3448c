//! Forward operations and their backward rules.

use super::gemm::{MatMut, MatRef};
use super::tape::BackwardCtx;
use super::{shape_err, Real, Tape, Tensor, TensorError, Var};

type R = Result<Var, TensorError>;

fn acc_sum<F: Real>(values: impl Iterator<Item = F>) -> F {
    F::of(values.map(|v| v.as_f64()).sum::<f64>())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_px(&self) -> usize {
        self.h_out * self.w_out
    }
}

fn im2col<F: Real>(g: &ConvGeom, x: &[F], cols: &mut [F]) {
    let px = g.out_px();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &mut cols[((c * g.kh + ki) * g.kw + kj) * px..][..px];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        dst.iter_mut().for_each(|d| *d = F::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            F::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<F: Real>(g: &ConvGeom, cols: &[F], x_grad: &mut [F]) {
    let px = g.out_px();
    for c in 0..g.c_in {
        let plane = &mut x_grad[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &cols[((c * g.kh + ki) * g.kw + kj) * px..][..px];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in row[oy * g.w_out..(oy + 1) * g.w_out].iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

impl<F: Real> Tape<F> {
    /// `[M,K]·[K,N]`, `[B,M,K]·[K,N]` (shared right operand) or
    /// `[B,M,K]·[B,K,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> R {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (batch, m, k, n, b_batched) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (1, sa[0], sa[1], sb[1], false),
            (3, 2) if sa[2] == sb[0] => (sa[0], sa[1], sa[2], sb[1], false),
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => (sa[0], sa[1], sa[2], sb[2], true),
            _ => return Err(shape_err("matmul", &sa, &sb)),
        };
        let mut out = vec![F::zero(); batch * m * n];
        {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            for bi in 0..batch {
                let bb = if b_batched { &vb[bi * k * n..(bi + 1) * k * n] } else { vb };
                F::gemm(
                    m,
                    k,
                    n,
                    F::one(),
                    MatRef::rows(&va[bi * m * k..(bi + 1) * m * k], k),
                    MatRef::rows(bb, n),
                    F::zero(),
                    MatMut::rows(&mut out[bi * m * n..(bi + 1) * m * n], n),
                );
            }
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let value = Tensor { shape, data: out };
        self.record("matmul", vec![a, b], value, move |ctx: &BackwardCtx<'_, F>| {
            let (va, vb) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let g = ctx.grad;
            let ga = ctx.needs[0].then(|| {
                let mut ga = vec![F::zero(); batch * m * k];
                for bi in 0..batch {
                    let bb = if b_batched { &vb[bi * k * n..(bi + 1) * k * n] } else { vb };
                    F::gemm(
                        m,
                        n,
                        k,
                        F::one(),
                        MatRef::rows(&g[bi * m * n..(bi + 1) * m * n], n),
                        MatRef::transposed(bb, n),
                        F::zero(),
                        MatMut::rows(&mut ga[bi * m * k..(bi + 1) * m * k], k),
                    );
                }
                ga
            });
            let gb = ctx.needs[1].then(|| {
                let mut gb = vec![F::zero(); if b_batched { batch * k * n } else { k * n }];
                for bi in 0..batch {
                    let (dst, beta) = if b_batched {
                        (&mut gb[bi * k * n..(bi + 1) * k * n], F::zero())
                    } else {
                        (&mut gb[..], if bi == 0 { F::zero() } else { F::one() })
                    };
                    F::gemm(
                        k,
                        m,
                        n,
                        F::one(),
                        MatRef::transposed(&va[bi * m * k..(bi + 1) * m * k], k),
                        MatRef::rows(&g[bi * m * n..(bi + 1) * m * n], n),
                        beta,
                        MatMut::rows(dst, n),
                    );
                }
                gb
            });
            vec![ga, gb]
        })
    }

    /// `x·Wᵀ + b` over the last dimension of `x`; `weight` is `[out, in]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> R {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(weight).to_vec();
        let in_f = *sx.last().unwrap_or(&0);
        if sw.len() != 2 || sw[1] != in_f {
            return Err(shape_err("linear", &sx, &sw));
        }
        let out_f = sw[0];
        if let Some(b) = bias {
            if self.shape(b) != [out_f] {
                return Err(shape_err("linear bias", &sw, self.shape(b)));
            }
        }
        let rows = self.value(x).len() / in_f;
        let mut out = vec![F::zero(); rows * out_f];
        if let Some(b) = bias {
            let vb = self.value(b).data();
            for row in out.chunks_mut(out_f) {
                row.copy_from_slice(vb);
            }
        }
        F::gemm(
            rows,
            in_f,
            out_f,
            F::one(),
            MatRef::rows(self.value(x).data(), in_f),
            MatRef::transposed(self.value(weight).data(), in_f),
            if bias.is_some() { F::one() } else { F::zero() },
            MatMut::rows(&mut out, out_f),
        );
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = out_f;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.record("linear", inputs, Tensor { shape, data: out }, move |ctx| {
            let g = ctx.grad;
            let gx = ctx.needs[0].then(|| {
                let mut gx = vec![F::zero(); rows * in_f];
                F::gemm(
                    rows,
                    out_f,
                    in_f,
                    F::one(),
                    MatRef::rows(g, out_f),
                    MatRef::rows(ctx.inputs[1].data(), in_f),
                    F::zero(),
                    MatMut::rows(&mut gx, in_f),
                );
                gx
            });
            let gw = ctx.needs[1].then(|| {
                let mut gw = vec![F::zero(); out_f * in_f];
                F::gemm(
                    out_f,
                    rows,
                    in_f,
                    F::one(),
                    MatRef::transposed(g, out_f),
                    MatRef::rows(ctx.inputs[0].data(), in_f),
                    F::zero(),
                    MatMut::rows(&mut gw, in_f),
                );
                gw
            });
            let mut res = vec![gx, gw];
            if ctx.inputs.len() == 3 {
                res.push(ctx.needs[2].then(|| {
                    (0..out_f)
                        .map(|j| acc_sum((0..rows).map(|r| g[r * out_f + j])))
                        .collect()
                }));
            }
            res
        })
    }

    /// 2D convolution (cross-correlation). `x` is `[B,Cin,H,W]`, `weight` is
    /// `[Cout,Cin,kh,kw]`, `bias` is `[Cout]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> R {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(weight).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(shape_err("conv2d", &sx, &sw));
        }
        let (hp, wp) = (sx[2] + 2 * padding, sx[3] + 2 * padding);
        if hp < sw[2] || wp < sw[3] {
            return Err(shape_err("conv2d", &sx, &sw));
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(shape_err("conv2d bias", &sw, self.shape(b)));
            }
        }
        let g = ConvGeom {
            batch: sx[0],
            c_in: sx[1],
            h: sx[2],
            w: sx[3],
            c_out: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad: padding,
            h_out: (hp - sw[2]) / stride + 1,
            w_out: (wp - sw[3]) / stride + 1,
        };
        let (patch, px) = (g.patch(), g.out_px());
        let mut out = vec![F::zero(); g.batch * g.c_out * px];
        let mut cols = vec![F::zero(); patch * px];
        {
            let vx = self.value(x).data();
            let vw = self.value(weight).data();
            let vb = bias.map(|b| self.value(b).data());
            for bi in 0..g.batch {
                im2col(&g, &vx[bi * g.c_in * g.h * g.w..(bi + 1) * g.c_in * g.h * g.w], &mut cols);
                let dst = &mut out[bi * g.c_out * px..(bi + 1) * g.c_out * px];
                if let Some(vb) = vb {
                    for (co, row) in dst.chunks_mut(px).enumerate() {
                        row.iter_mut().for_each(|v| *v = vb[co]);
                    }
                }
                F::gemm(
                    g.c_out,
                    patch,
                    px,
                    F::one(),
                    MatRef::rows(vw, patch),
                    MatRef::rows(&cols, px),
                    if vb.is_some() { F::one() } else { F::zero() },
                    MatMut::rows(dst, px),
                );
            }
        }
        let shape = vec![g.batch, g.c_out, g.h_out, g.w_out];
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.record("conv2d", inputs, Tensor { shape, data: out }, move |ctx| {
            let (vx, vw) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let grad = ctx.grad;
            let mut gx = ctx.needs[0].then(|| vec![F::zero(); vx.len()]);
            let mut gw = ctx.needs[1].then(|| vec![F::zero(); vw.len()]);
            let mut cols = vec![F::zero(); patch * px];
            for bi in 0..g.batch {
                let gb = &grad[bi * g.c_out * px..(bi + 1) * g.c_out * px];
                let xb = g.c_in * g.h * g.w;
                if let Some(gw) = gw.as_mut() {
                    im2col(&g, &vx[bi * xb..(bi + 1) * xb], &mut cols);
                    F::gemm(
                        g.c_out,
                        px,
                        patch,
                        F::one(),
                        MatRef::rows(gb, px),
                        MatRef::transposed(&cols, px),
                        if bi == 0 { F::zero() } else { F::one() },
                        MatMut::rows(gw, patch),
                    );
                }
                if let Some(gx) = gx.as_mut() {
                    F::gemm(
                        patch,
                        g.c_out,
                        px,
                        F::one(),
                        MatRef::transposed(vw, patch),
                        MatRef::rows(gb, px),
                        F::zero(),
                        MatMut::rows(&mut cols, px),
                    );
                    col2im(&g, &cols, &mut gx[bi * xb..(bi + 1) * xb]);
                }
            }
            let mut res = vec![gx, gw];
            if ctx.inputs.len() == 3 {
                res.push(ctx.needs[2].then(|| {
                    (0..g.c_out)
                        .map(|co| {
                            acc_sum((0..g.batch).flat_map(|bi| {
                                grad[(bi * g.c_out + co) * px..(bi * g.c_out + co + 1) * px].iter().copied()
                            }))
                        })
                        .collect()
                }));
            }
            res
        })
    }

    pub fn relu(&mut self, x: Var) -> R {
        let v = self.value(x);
        let value = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|&a| if a > F::zero() { a } else { F::zero() }).collect(),
        };
        self.record("relu", vec![x], value, |ctx| {
            let out = ctx.output.data();
            vec![Some(
                ctx.grad
                    .iter()
                    .zip(out)
                    .map(|(&g, &y)| if y > F::zero() { g } else { F::zero() })
                    .collect(),
            )]
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> R {
        let v = self.value(x);
        let value = Tensor {
            shape: v.shape().to_vec(),
            data: v
                .data()
                .iter()
                .map(|&a| F::of(1.0 / (1.0 + (-a.as_f64()).exp())))
                .collect(),
        };
        self.record("sigmoid", vec![x], value, |ctx| {
            let out = ctx.output.data();
            vec![Some(
                ctx.grad
                    .iter()
                    .zip(out)
                    .map(|(&g, &y)| g * y * (F::one() - y))
                    .collect(),
            )]
        })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            Err(shape_err(op, self.shape(a), self.shape(b)))
        } else {
            Ok(())
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> R {
        self.same_shape("add", a, b)?;
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data: self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x + y)
                .collect(),
        };
        self.record("add", vec![a, b], value, |ctx| {
            vec![
                ctx.needs[0].then(|| ctx.grad.to_vec()),
                ctx.needs[1].then(|| ctx.grad.to_vec()),
            ]
        })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> R {
        self.same_shape("mul", a, b)?;
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data: self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x * y)
                .collect(),
        };
        self.record("mul", vec![a, b], value, |ctx| {
            let (va, vb) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            vec![
                ctx.needs[0].then(|| ctx.grad.iter().zip(vb).map(|(&g, &y)| g * y).collect()),
                ctx.needs[1].then(|| ctx.grad.iter().zip(va).map(|(&g, &x)| g * x).collect()),
            ]
        })
    }

    pub fn scalar_mul(&mut self, x: Var, s: f64) -> R {
        let k = F::of(s);
        let v = self.value(x);
        let value = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|&a| a * k).collect(),
        };
        self.record("scalar_mul", vec![x], value, move |ctx| {
            vec![Some(ctx.grad.iter().map(|&g| g * k).collect())]
        })
    }

    pub fn softmax_last_dim(&mut self, x: Var) -> R {
        let v = self.value(x);
        let n = *v.shape().last().unwrap();
        let mut data = vec![F::zero(); v.len()];
        for (src, dst) in v.data().chunks(n).zip(data.chunks_mut(n)) {
            let max = src.iter().fold(f64::NEG_INFINITY, |m, &a| m.max(a.as_f64()));
            let exps: Vec<f64> = src.iter().map(|&a| (a.as_f64() - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for (d, e) in dst.iter_mut().zip(exps) {
                *d = F::of(e / total);
            }
        }
        let value = Tensor {
            shape: v.shape().to_vec(),
            data,
        };
        self.record("softmax", vec![x], value, move |ctx| {
            let y = ctx.output.data();
            let mut gx = vec![F::zero(); y.len()];
            for ((yr, gr), dst) in y.chunks(n).zip(ctx.grad.chunks(n)).zip(gx.chunks_mut(n)) {
                let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a.as_f64() * b.as_f64()).sum();
                for ((d, &yy), &gg) in dst.iter_mut().zip(yr).zip(gr) {
                    *d = F::of(yy.as_f64() * (gg.as_f64() - dot));
                }
            }
            vec![Some(gx)]
        })
    }

    pub fn sum(&mut self, x: Var) -> R {
        let s = acc_sum(self.value(x).data().iter().copied());
        self.record("sum", vec![x], Tensor::scalar(s), |ctx| {
            vec![Some(vec![ctx.grad[0]; ctx.inputs[0].len()])]
        })
    }

    pub fn mean(&mut self, x: Var) -> R {
        let n = self.value(x).len();
        let s = self.value(x).data().iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
        self.record("mean", vec![x], Tensor::scalar(F::of(s)), move |ctx| {
            vec![Some(vec![ctx.grad[0] / F::of(n as f64); n])]
        })
    }

    /// Mean over dimension 1 of a `[B,N,C]` tensor, giving `[B,C]`.
    pub fn mean_axis1(&mut self, x: Var) -> R {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(shape_err("mean_axis1", &s, &[0, 0, 0]));
        }
        let (b, n, c) = (s[0], s[1], s[2]);
        let v = self.value(x).data();
        let mut out = vec![F::zero(); b * c];
        for bi in 0..b {
            for ci in 0..c {
                let total: f64 = (0..n).map(|ni| v[(bi * n + ni) * c + ci].as_f64()).sum();
                out[bi * c + ci] = F::of(total / n as f64);
            }
        }
        self.record("mean_axis1", vec![x], Tensor { shape: vec![b, c], data: out }, move |ctx| {
            let inv = F::of(1.0 / n as f64);
            let mut gx = vec![F::zero(); b * n * c];
            for bi in 0..b {
                for ni in 0..n {
                    for ci in 0..c {
                        gx[(bi * n + ni) * c + ci] = ctx.grad[bi * c + ci] * inv;
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> R {
        let first = self
            .shape(*parts.first().ok_or_else(|| TensorError::Contract("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", &first, &[axis]));
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return Err(shape_err("concat", &first, s));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &sz) in parts.iter().zip(&sizes) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.record("concat", parts.to_vec(), Tensor { shape, data }, move |ctx| {
            let mut offset = 0;
            let mut res = Vec::with_capacity(sizes.len());
            for (i, &sz) in sizes.iter().enumerate() {
                res.push(ctx.needs[i].then(|| {
                    let mut gi = Vec::with_capacity(outer * sz * inner);
                    for o in 0..outer {
                        let start = o * total * inner + offset * inner;
                        gi.extend_from_slice(&ctx.grad[start..start + sz * inner]);
                    }
                    gi
                }));
                offset += sz;
            }
            res
        })
    }

    /// Nearest-neighbour 2× upsampling of `[B,C,H,W]`.
    pub fn nearest_upsample2x(&mut self, x: Var) -> R {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("upsample2x", &s, &[0, 0, 0, 0]));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let v = self.value(x).data();
        let mut data = vec![F::zero(); planes * 4 * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    data[(p * 2 * h + y) * 2 * w + xx] = v[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let shape = vec![s[0], s[1], 2 * h, 2 * w];
        self.record("upsample2x", vec![x], Tensor { shape, data }, move |ctx| {
            let mut gx = vec![F::zero(); planes * h * w];
            for p in 0..planes {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        gx[(p * h + y / 2) * w + xx / 2] += ctx.grad[(p * 2 * h + y) * 2 * w + xx];
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    pub fn transpose_last_two(&mut self, x: Var) -> R {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(shape_err("transpose_last_two", &s, &[0, 0]));
        }
        let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = self.value(x).len() / (m * n);
        let transpose = move |src: &[F], rows: usize, cols: usize| {
            let mut dst = vec![F::zero(); src.len()];
            for b in 0..batch {
                for i in 0..rows {
                    for j in 0..cols {
                        dst[b * rows * cols + j * rows + i] = src[b * rows * cols + i * cols + j];
                    }
                }
            }
            dst
        };
        let data = transpose(self.value(x).data(), m, n);
        let mut shape = s.clone();
        let len = shape.len();
        shape.swap(len - 2, len - 1);
        self.record("transpose_last_two", vec![x], Tensor { shape, data }, move |ctx| {
            vec![Some(transpose(ctx.grad, n, m))]
        })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> R {
        let v = self.value(x);
        if shape.iter().product::<usize>() != v.len() || shape.contains(&0) {
            return Err(shape_err("reshape", v.shape(), shape));
        }
        let value = Tensor {
            shape: shape.to_vec(),
            data: v.data().to_vec(),
        };
        self.record("reshape", vec![x], value, |ctx| vec![Some(ctx.grad.to_vec())])
    }

    /// Stacks `times` copies of `x` along a new leading dimension.
    pub fn repeat_batch(&mut self, x: Var, times: usize) -> R {
        let v = self.value(x);
        let n = v.len();
        let mut shape = vec![times];
        shape.extend_from_slice(v.shape());
        let data: Vec<F> = (0..times).flat_map(|_| v.data().iter().copied()).collect();
        self.record("repeat_batch", vec![x], Tensor { shape, data }, move |ctx| {
            let gx = (0..n)
                .map(|i| acc_sum((0..times).map(|t| ctx.grad[t * n + i])))
                .collect();
            vec![Some(gx)]
        })
    }

    /// Slice `index` of the leading dimension.
    pub fn select_batch(&mut self, x: Var, index: usize) -> R {
        let s = self.shape(x).to_vec();
        if s.is_empty() || index >= s[0] {
            return Err(shape_err("select_batch", &s, &[index]));
        }
        let n: usize = s[1..].iter().product();
        let shape = if s.len() == 1 { vec![1] } else { s[1..].to_vec() };
        let data = self.value(x).data()[index * n..(index + 1) * n].to_vec();
        let total = self.value(x).len();
        self.record("select_batch", vec![x], Tensor { shape, data }, move |ctx| {
            let mut gx = vec![F::zero(); total];
            gx[index * n..(index + 1) * n].copy_from_slice(ctx.grad);
            vec![Some(gx)]
        })
    }

    /// Samples a `[C,H,W]` image at continuous pixel coordinates `[N,2]`
    /// (`u` = column, `v` = row), returning `[N,C]`.
    ///
    /// Pixel `(i, j)` covers `[j, j+1) × [i, i+1)` with its center at
    /// `(j + 0.5, i + 0.5)`. Coordinates are clamped to the span of pixel
    /// centers, and the coordinate gradient is zero on a clamped axis.
    pub fn bilinear_sample(&mut self, image: Var, coords: Var) -> R {
        let si = self.shape(image).to_vec();
        let sc = self.shape(coords).to_vec();
        if si.len() != 3 || sc.len() != 2 || sc[1] != 2 {
            return Err(shape_err("bilinear_sample", &si, &sc));
        }
        let (c, h, w) = (si[0], si[1], si[2]);
        let n = sc[0];
        let taps: Vec<Taps> = self
            .value(coords)
            .data()
            .chunks(2)
            .map(|uv| Taps::new(uv[0].as_f64(), uv[1].as_f64(), w, h))
            .collect();
        let img = self.value(image).data();
        let mut out = vec![F::zero(); n * c];
        for (pi, t) in taps.iter().enumerate() {
            for ch in 0..c {
                out[pi * c + ch] = F::of(t.sample(&img[ch * h * w..(ch + 1) * h * w], w));
            }
        }
        self.record("bilinear_sample", vec![image, coords], Tensor { shape: vec![n, c], data: out }, move |ctx| {
            let img = ctx.inputs[0].data();
            let g = ctx.grad;
            let gi = ctx.needs[0].then(|| {
                let mut gi = vec![F::zero(); c * h * w];
                for (pi, t) in taps.iter().enumerate() {
                    for ch in 0..c {
                        t.scatter(&mut gi[ch * h * w..(ch + 1) * h * w], w, g[pi * c + ch].as_f64());
                    }
                }
                gi
            });
            let gc = ctx.needs[1].then(|| {
                let mut gc = vec![F::zero(); n * 2];
                for (pi, t) in taps.iter().enumerate() {
                    let (mut du, mut dv) = (0.0, 0.0);
                    for ch in 0..c {
                        let (a, b) = t.coord_grad(&img[ch * h * w..(ch + 1) * h * w], w);
                        let gg = g[pi * c + ch].as_f64();
                        du += gg * a;
                        dv += gg * b;
                    }
                    gc[pi * 2] = F::of(du);
                    gc[pi * 2 + 1] = F::of(dv);
                }
                gc
            });
            vec![gi, gc]
        })
    }
}

/// Interpolation cell for one sample location.
#[derive(Debug, Clone, Copy)]
struct Taps {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    // zero when the axis is clamped or degenerate
    active_x: bool,
    active_y: bool,
}

impl Taps {
    fn axis(coord: f64, len: usize) -> (usize, usize, f64, bool) {
        // continuous coordinate → grid position of pixel centers
        let g = coord - 0.5;
        if len == 1 {
            return (0, 0, 0.0, false);
        }
        let hi = (len - 1) as f64;
        let (g, active) = if g < 0.0 {
            (0.0, false)
        } else if g > hi {
            (hi, false)
        } else {
            (g, true)
        };
        let i0 = (g.floor() as usize).min(len - 2);
        (i0, i0 + 1, g - i0 as f64, active)
    }

    fn new(u: f64, v: f64, w: usize, h: usize) -> Self {
        let (x0, x1, fx, active_x) = Self::axis(u, w);
        let (y0, y1, fy, active_y) = Self::axis(v, h);
        Self {
            x0,
            y0,
            x1,
            y1,
            fx,
            fy,
            active_x,
            active_y,
        }
    }

    fn weights(&self) -> [f64; 4] {
        [
            (1.0 - self.fx) * (1.0 - self.fy),
            self.fx * (1.0 - self.fy),
            (1.0 - self.fx) * self.fy,
            self.fx * self.fy,
        ]
    }

    fn idx(&self, w: usize) -> [usize; 4] {
        [
            self.y0 * w + self.x0,
            self.y0 * w + self.x1,
            self.y1 * w + self.x0,
            self.y1 * w + self.x1,
        ]
    }

    fn sample<F: Real>(&self, plane: &[F], w: usize) -> f64 {
        self.weights()
            .iter()
            .zip(self.idx(w))
            .map(|(wt, i)| wt * plane[i].as_f64())
            .sum()
    }

    fn scatter<F: Real>(&self, plane: &mut [F], w: usize, g: f64) {
        for (wt, i) in self.weights().iter().zip(self.idx(w)) {
            plane[i] += F::of(wt * g);
        }
    }

    fn coord_grad<F: Real>(&self, plane: &[F], w: usize) -> (f64, f64) {
        let [a, b, c, d] = self.idx(w).map(|i| plane[i].as_f64());
        let du = if self.active_x {
            (1.0 - self.fy) * (b - a) + self.fy * (d - c)
        } else {
            0.0
        };
        let dv = if self.active_y {
            (1.0 - self.fx) * (c - a) + self.fx * (d - b)
        } else {
            0.0
        };
        (du, dv)
    }
}
