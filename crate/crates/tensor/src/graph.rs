use std::sync::Arc;

use crate::gemm::gemm;
use crate::spectral::{transform3, Pass, SpectralBasis};
use crate::{ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    AvgPool {
        x: Var,
        f: [usize; 3],
    },
    Upsample {
        x: Var,
        f: [usize; 3],
    },
    Concat {
        a: Var,
        b: Var,
    },
    SliceChannels {
        x: Var,
        start: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: f64,
    },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: Vec<(f64, f64)>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Vec<(f64, f64)>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    CausalSoftmax(Var),
    MeanSpatial(Var),
    MeanChannels(Var),
    Spectral {
        x: Var,
        wr: Var,
        wi: Var,
        basis: Arc<SpectralBasis>,
        xhat: (Vec<f64>, Vec<f64>),
    },
    RepeatBatch {
        x: Var,
        r: usize,
    },
    StackBatch(Vec<Var>),
    ExternalLoss {
        x: Var,
        grad: Tensor,
    },
    SumAll(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed like the parameter store.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub params: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    pub fn global_norm(&self) -> f64 {
        self.params.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }
}

/// A single forward pass recorded for reverse-mode differentiation.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    shape_only: bool,
    peak_bytes: usize,
}

fn spatial(shape: &[usize]) -> (usize, usize, [usize; 3]) {
    assert_eq!(shape.len(), 5, "expected [N, C, X, Y, Z], got {shape:?}");
    (shape[0], shape[1], [shape[2], shape[3], shape[4]])
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    assert_eq!(a.len(), b.len(), "broadcast rank mismatch {a:?} vs {b:?}");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            assert!(x == y || x == 1 || y == 1, "cannot broadcast {a:?} with {b:?}");
            x.max(y)
        })
        .collect()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Element offsets of `src` (broadcast into `out`) for every output element.
fn broadcast_offsets(src: &[usize], out: &[usize]) -> Vec<usize> {
    let st = strides(src);
    let eff: Vec<usize> = src
        .iter()
        .zip(&st)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let n: usize = out.iter().product();
    let mut offs = Vec::with_capacity(n);
    let mut idx = vec![0usize; out.len()];
    let mut off = 0usize;
    for _ in 0..n {
        offs.push(off);
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    offs
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh())
}

fn gelu_grad(v: f64) -> f64 {
    let u = GELU_C * (v + 0.044715 * v * v * v);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du
}

/// Kernel geometry for one im2col pass over `[C, d0, d1, d2]`.
#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    d: [usize; 3],
    k: [usize; 3],
}

impl ConvGeom {
    fn new(c: usize, d: [usize; 3], k: [usize; 3]) -> Self {
        // fold a singleton trailing axis so the innermost copy runs along y
        if d[2] == 1 && k[2] == 1 {
            Self {
                c,
                d: [1, d[0], d[1]],
                k: [1, k[0], k[1]],
            }
        } else {
            Self { c, d, k }
        }
    }

    fn s(&self) -> usize {
        self.d.iter().product()
    }

    fn rows(&self) -> usize {
        self.c * self.k.iter().product::<usize>()
    }

    /// Visits every (row, dst offset, src offset, run length) copy segment.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let [d0, d1, d2] = self.d;
        let [k0, k1, k2] = self.k;
        let (p0, p1, p2) = (k0 / 2, k1 / 2, k2 / 2);
        let s = self.s();
        let mut row = 0;
        for ci in 0..self.c {
            for a in 0..k0 {
                for b in 0..k1 {
                    for c in 0..k2 {
                        let lo2 = p2.saturating_sub(c);
                        let hi2 = (d2 + p2).saturating_sub(c).min(d2);
                        for i0 in 0..d0 {
                            let s0 = i0 + a;
                            if s0 < p0 || s0 - p0 >= d0 {
                                continue;
                            }
                            let s0 = s0 - p0;
                            for i1 in 0..d1 {
                                let s1 = i1 + b;
                                if s1 < p1 || s1 - p1 >= d1 {
                                    continue;
                                }
                                let s1 = s1 - p1;
                                if lo2 >= hi2 {
                                    continue;
                                }
                                let dst = row * s + (i0 * d1 + i1) * d2 + lo2;
                                let src = ((ci * d0 + s0) * d1 + s1) * d2 + lo2 + c - p2;
                                f(row, dst, src, hi2 - lo2);
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        cols.fill(0.0);
        self.for_each_run(|_, dst, src, len| {
            cols[dst..dst + len].copy_from_slice(&x[src..src + len]);
        });
    }

    fn col2im(&self, cols: &[f64], gx: &mut [f64]) {
        self.for_each_run(|_, dst, src, len| {
            for j in 0..len {
                gx[src + j] += cols[dst + j];
            }
        });
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            shape_only: false,
            peak_bytes: 0,
        }
    }

    /// A graph that propagates shapes without computing values.
    pub fn shape_only(params: &'p ParamStore) -> Self {
        Self {
            shape_only: true,
            ..Self::new(params)
        }
    }

    pub fn is_shape_only(&self) -> bool {
        self.shape_only
    }

    /// Bytes of activations held by the tape, counted at 4 bytes per element.
    pub fn activation_bytes(&self) -> usize {
        self.peak_bytes
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.params.get(*id),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if !matches!(op, Op::Param(_)) {
            self.peak_bytes += 4 * value.numel();
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn out(&self, shape: &[usize], data: impl FnOnce() -> Vec<f64>) -> Tensor {
        if self.shape_only {
            Tensor::meta(shape)
        } else {
            Tensor::from_vec(shape, data()).expect("op produced wrong element count")
        }
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        let t = if self.shape_only {
            Tensor::meta(t.shape())
        } else {
            t
        };
        self.push(t, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.push(Tensor::meta(&[0]), Op::Param(id), true)
    }

    /// Same-padded, stride-1 convolution. `w` is `[Co, Ci, kx, ky, kz]` with odd kernel sizes.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let (n, ci, d) = spatial(&xs);
        assert_eq!(ws.len(), 5, "conv weight must be rank 5");
        assert_eq!(ws[1], ci, "conv expects {} input channels, got {ci}", ws[1]);
        let co = ws[0];
        let k = [ws[2], ws[3], ws[4]];
        assert!(k.iter().all(|v| v % 2 == 1), "conv kernels must be odd");
        let os = [n, co, d[0], d[1], d[2]];
        let geom = ConvGeom::new(ci, d, k);
        let value = self.out(&os, || {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let s = geom.s();
            let rows = geom.rows();
            let mut out = vec![0.0; n * co * s];
            let pointwise = rows == ci;
            let mut cols = if pointwise { Vec::new() } else { vec![0.0; rows * s] };
            for i in 0..n {
                let xi = &xv[i * ci * s..(i + 1) * ci * s];
                let src: &[f64] = if pointwise {
                    xi
                } else {
                    geom.im2col(xi, &mut cols);
                    &cols
                };
                gemm(co, rows, s, 1.0, wv, false, src, false, 0.0, &mut out[i * co * s..(i + 1) * co * s]);
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for i in 0..n {
                    for c in 0..co {
                        let o = (i * co + c) * s;
                        out[o..o + s].iter_mut().for_each(|v| *v += bv[c]);
                    }
                }
            }
            out
        });
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(value, Op::Conv { x, w, b }, rg)
    }

    /// Average pooling with per-axis factors of 1 or 2.
    pub fn avg_pool(&mut self, x: Var, f: [usize; 3]) -> Var {
        let xs = self.shape(x);
        let (n, c, d) = spatial(&xs);
        for a in 0..3 {
            assert!(d[a] % f[a] == 0, "axis {a} of size {} not divisible by {}", d[a], f[a]);
        }
        let o = [d[0] / f[0], d[1] / f[1], d[2] / f[2]];
        let os = [n, c, o[0], o[1], o[2]];
        let value = self.out(&os, || {
            let xv = self.value(x).data();
            let inv = 1.0 / (f[0] * f[1] * f[2]) as f64;
            let mut out = vec![0.0; n * c * o[0] * o[1] * o[2]];
            for nc in 0..n * c {
                for i in 0..d[0] {
                    for j in 0..d[1] {
                        for k in 0..d[2] {
                            let src = ((nc * d[0] + i) * d[1] + j) * d[2] + k;
                            let dst = ((nc * o[0] + i / f[0]) * o[1] + j / f[1]) * o[2] + k / f[2];
                            out[dst] += xv[src] * inv;
                        }
                    }
                }
            }
            out
        });
        let rg = self.rg(x);
        self.push(value, Op::AvgPool { x, f }, rg)
    }

    /// Nearest-neighbour upsampling by per-axis integer factors.
    pub fn upsample(&mut self, x: Var, f: [usize; 3]) -> Var {
        let xs = self.shape(x);
        let (n, c, d) = spatial(&xs);
        let o = [d[0] * f[0], d[1] * f[1], d[2] * f[2]];
        let os = [n, c, o[0], o[1], o[2]];
        let value = self.out(&os, || {
            let xv = self.value(x).data();
            let mut out = vec![0.0; n * c * o[0] * o[1] * o[2]];
            for nc in 0..n * c {
                for i in 0..o[0] {
                    for j in 0..o[1] {
                        for k in 0..o[2] {
                            let dst = ((nc * o[0] + i) * o[1] + j) * o[2] + k;
                            let src = ((nc * d[0] + i / f[0]) * d[1] + j / f[1]) * d[2] + k / f[2];
                            out[dst] = xv[src];
                        }
                    }
                }
            }
            out
        });
        let rg = self.rg(x);
        self.push(value, Op::Upsample { x, f }, rg)
    }

    /// Concatenation along axis 1.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a);
        let sb = self.shape(b);
        assert_eq!(sa.len(), sb.len());
        assert_eq!(sa[0], sb[0]);
        assert_eq!(sa[2..], sb[2..], "concat spatial mismatch {sa:?} vs {sb:?}");
        let inner: usize = sa[2..].iter().product();
        let mut os = sa.clone();
        os[1] = sa[1] + sb[1];
        let value = self.out(&os, || {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            let (la, lb) = (sa[1] * inner, sb[1] * inner);
            let mut out = Vec::with_capacity(sa[0] * (la + lb));
            for i in 0..sa[0] {
                out.extend_from_slice(&av[i * la..(i + 1) * la]);
                out.extend_from_slice(&bv[i * lb..(i + 1) * lb]);
            }
            out
        });
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Concat { a, b }, rg)
    }

    /// Channels `start..start + len` along axis 1.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xs = self.shape(x);
        assert!(start + len <= xs[1]);
        let inner: usize = xs[2..].iter().product();
        let mut os = xs.clone();
        os[1] = len;
        let value = self.out(&os, || {
            let xv = self.value(x).data();
            let mut out = Vec::with_capacity(xs[0] * len * inner);
            for i in 0..xs[0] {
                let o = (i * xs[1] + start) * inner;
                out.extend_from_slice(&xv[o..o + len * inner]);
            }
            out
        });
        let rg = self.rg(x);
        self.push(value, Op::SliceChannels { x, start }, rg)
    }

    fn binary(&mut self, a: Var, b: Var, mul: bool) -> Var {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let os = broadcast_shape(&sa, &sb);
        let value = self.out(&os, || {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            let f = |x: f64, y: f64| if mul { x * y } else { x + y };
            if sa == sb {
                av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
            } else {
                let oa = broadcast_offsets(&sa, &os);
                let ob = broadcast_offsets(&sb, &os);
                oa.iter().zip(&ob).map(|(&i, &j)| f(av[i], bv[j])).collect()
            }
        });
        let rg = self.rg(a) || self.rg(b);
        let op = if mul { Op::Mul { a, b } } else { Op::Add { a, b } };
        self.push(value, op, rg)
    }

    /// Broadcasting elementwise sum (equal ranks, size-1 axes broadcast).
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, false)
    }

    /// Broadcasting elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, true)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let xs = self.shape(x);
        let value = self.out(&xs, || self.value(x).data().iter().map(|v| v * s).collect());
        let rg = self.rg(x);
        self.push(value, Op::Scale { x, s }, rg)
    }

    fn unary(&mut self, x: Var, f: fn(f64) -> f64, op: Op) -> Var {
        let xs = self.shape(x);
        let value = self.out(&xs, || self.value(x).data().iter().map(|&v| f(v)).collect());
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// Group normalization over `[N, C, ...]` with per-channel affine `[C]`.
    /// `groups == C` gives instance normalization.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let xs = self.shape(x);
        let (n, c) = (xs[0], xs[1]);
        assert!(c % groups == 0, "{c} channels not divisible into {groups} groups");
        let inner: usize = xs[2..].iter().product();
        let per = c / groups;
        let mut stats = Vec::new();
        let value = if self.shape_only {
            Tensor::meta(&xs)
        } else {
            let xv = self.value(x).data();
            let gv = self.value(gamma).data();
            let bv = self.value(beta).data();
            let mut out = vec![0.0; xv.len()];
            let m = (per * inner) as f64;
            for i in 0..n {
                for g in 0..groups {
                    let o = (i * c + g * per) * inner;
                    let seg = &xv[o..o + per * inner];
                    let mean = seg.iter().sum::<f64>() / m;
                    let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
                    let rstd = 1.0 / (var + NORM_EPS).sqrt();
                    stats.push((mean, rstd));
                    for cc in 0..per {
                        let ch = g * per + cc;
                        let base = o + cc * inner;
                        for j in 0..inner {
                            out[base + j] = (xv[base + j] - mean) * rstd * gv[ch] + bv[ch];
                        }
                    }
                }
            }
            Tensor::from_vec(&xs, out).expect("shape")
        };
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            rg,
        )
    }

    /// Layer normalization over the last axis with affine `[D]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xs = self.shape(x);
        let dd = *xs.last().expect("rank >= 1");
        let mut stats = Vec::new();
        let value = if self.shape_only {
            Tensor::meta(&xs)
        } else {
            let xv = self.value(x).data();
            let gv = self.value(gamma).data();
            let bv = self.value(beta).data();
            let mut out = vec![0.0; xv.len()];
            for (r, seg) in xv.chunks(dd).enumerate() {
                let mean = seg.iter().sum::<f64>() / dd as f64;
                let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dd as f64;
                let rstd = 1.0 / (var + NORM_EPS).sqrt();
                stats.push((mean, rstd));
                for j in 0..dd {
                    out[r * dd + j] = (seg[j] - mean) * rstd * gv[j] + bv[j];
                }
            }
            Tensor::from_vec(&xs, out).expect("shape")
        };
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            rg,
        )
    }

    /// Batched `[B, M, K] x [B, K, N]`; either batch may be 1 and broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a);
        let sb = self.shape(b);
        assert!(sa.len() == 3 && sb.len() == 3, "matmul needs rank-3 operands");
        assert_eq!(sa[2], sb[1], "matmul inner mismatch {sa:?} x {sb:?}");
        let bt = sa[0].max(sb[0]);
        assert!((sa[0] == bt || sa[0] == 1) && (sb[0] == bt || sb[0] == 1));
        let (m, k, nn) = (sa[1], sa[2], sb[2]);
        let os = [bt, m, nn];
        let value = self.out(&os, || {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            let mut out = vec![0.0; bt * m * nn];
            for i in 0..bt {
                let ia = if sa[0] == 1 { 0 } else { i };
                let ib = if sb[0] == 1 { 0 } else { i };
                gemm(
                    m,
                    k,
                    nn,
                    1.0,
                    &av[ia * m * k..(ia + 1) * m * k],
                    false,
                    &bv[ib * k * nn..(ib + 1) * k * nn],
                    false,
                    0.0,
                    &mut out[i * m * nn..(i + 1) * m * nn],
                );
            }
            out
        });
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul { a, b }, rg)
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let xs = self.shape(x);
        assert_eq!(perm.len(), xs.len());
        let os: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
        let value = self.out(&os, || permute_data(self.value(x).data(), &xs, perm));
        let rg = self.rg(x);
        self.push(
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let xs = self.shape(x);
        assert_eq!(
            xs.iter().product::<usize>(),
            shape.iter().product::<usize>(),
            "cannot reshape {xs:?} to {shape:?}"
        );
        let value = self.out(shape, || self.value(x).data().to_vec());
        let rg = self.rg(x);
        self.push(value, Op::Reshape(x), rg)
    }

    /// Softmax over the last axis of `[..., T, T]` with entries above the diagonal masked out.
    pub fn causal_softmax(&mut self, x: Var) -> Var {
        let xs = self.shape(x);
        let t = xs[xs.len() - 1];
        assert_eq!(xs[xs.len() - 2], t, "causal softmax needs square trailing axes");
        let value = self.out(&xs, || {
            let xv = self.value(x).data();
            let mut out = vec![0.0; xv.len()];
            for (r, row) in xv.chunks(t).enumerate() {
                let i = r % t;
                let mx = row[..=i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..=i {
                    let e = (row[j] - mx).exp();
                    out[r * t + j] = e;
                    z += e;
                }
                for j in 0..=i {
                    out[r * t + j] /= z;
                }
            }
            out
        });
        let rg = self.rg(x);
        self.push(value, Op::CausalSoftmax(x), rg)
    }

    /// Mean over spatial axes: `[N, C, X, Y, Z] -> [N, C, 1, 1, 1]`.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let xs = self.shape(x);
        let (n, c, _) = spatial(&xs);
        let inner: usize = xs[2..].iter().product();
        let value = self.out(&[n, c, 1, 1, 1], || {
            self.value(x)
                .data()
                .chunks(inner)
                .map(|s| s.iter().sum::<f64>() / inner as f64)
                .collect()
        });
        let rg = self.rg(x);
        self.push(value, Op::MeanSpatial(x), rg)
    }

    /// Mean over axis 1: `[N, C, ...] -> [N, 1, ...]`.
    pub fn mean_channels(&mut self, x: Var) -> Var {
        let xs = self.shape(x);
        let (n, c) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        let mut os = xs.clone();
        os[1] = 1;
        let value = self.out(&os, || {
            let xv = self.value(x).data();
            let mut out = vec![0.0; n * inner];
            for i in 0..n {
                for ch in 0..c {
                    let o = (i * c + ch) * inner;
                    for j in 0..inner {
                        out[i * inner + j] += xv[o + j] / c as f64;
                    }
                }
            }
            out
        });
        let rg = self.rg(x);
        self.push(value, Op::MeanChannels(x), rg)
    }

    /// Spectral convolution: truncated DFT, per-mode complex channel mixing
    /// with weights `[Ci, Co, Kx, Ky, Kz]` (real and imaginary parts), then
    /// the real part of the truncated inverse DFT.
    pub fn spectral_conv(&mut self, x: Var, wr: Var, wi: Var, basis: Arc<SpectralBasis>) -> Var {
        let xs = self.shape(x);
        let (n, ci, d) = spatial(&xs);
        assert_eq!(d, basis.dims(), "spectral basis built for other dims");
        let ws = self.shape(wr);
        let kc = basis.mode_counts();
        assert_eq!(ws[0], ci);
        assert_eq!(&ws[2..], &kc[..], "spectral weight mode shape mismatch");
        let co = ws[1];
        let os = [n, co, d[0], d[1], d[2]];
        let mut xhat = (Vec::new(), Vec::new());
        let value = if self.shape_only {
            Tensor::meta(&os)
        } else {
            let xv = self.value(x).data().to_vec();
            let zeros = vec![0.0; xv.len()];
            let (hr, hi) = transform3(&basis, xv, zeros, n * ci, Pass::Forward);
            let kk: usize = kc.iter().product();
            let (wrv, wiv) = (self.value(wr).data(), self.value(wi).data());
            let mut yr = vec![0.0; n * co * kk];
            let mut yi = vec![0.0; n * co * kk];
            for i in 0..n {
                for a in 0..ci {
                    let xo = (i * ci + a) * kk;
                    for b in 0..co {
                        let wo = (a * co + b) * kk;
                        let yo = (i * co + b) * kk;
                        for k in 0..kk {
                            let (xr, xi) = (hr[xo + k], hi[xo + k]);
                            let (pr, pi) = (wrv[wo + k], wiv[wo + k]);
                            yr[yo + k] += xr * pr - xi * pi;
                            yi[yo + k] += xr * pi + xi * pr;
                        }
                    }
                }
            }
            let (outr, _) = transform3(&basis, yr, yi, n * co, Pass::Inverse);
            xhat = (hr, hi);
            Tensor::from_vec(&os, outr).expect("shape")
        };
        let rg = self.rg(x) || self.rg(wr) || self.rg(wi);
        self.push(
            value,
            Op::Spectral {
                x,
                wr,
                wi,
                basis,
                xhat,
            },
            rg,
        )
    }

    /// Repeats each batch entry `r` times consecutively: `[N, ...] -> [N*r, ...]`.
    pub fn repeat_batch(&mut self, x: Var, r: usize) -> Var {
        let xs = self.shape(x);
        let inner: usize = xs[1..].iter().product();
        let mut os = xs.clone();
        os[0] *= r;
        let value = self.out(&os, || {
            let xv = self.value(x).data();
            let mut out = Vec::with_capacity(xv.len() * r);
            for i in 0..xs[0] {
                for _ in 0..r {
                    out.extend_from_slice(&xv[i * inner..(i + 1) * inner]);
                }
            }
            out
        });
        let rg = self.rg(x);
        self.push(value, Op::RepeatBatch { x, r }, rg)
    }

    /// Interleaves equally shaped `[N, ...]` tensors into `[N*T, ...]` with index `n*T + t`.
    pub fn stack_batch(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let s0 = self.shape(xs[0]);
        for &v in xs {
            assert_eq!(self.shape(v), s0, "stack_batch shape mismatch");
        }
        let t = xs.len();
        let inner: usize = s0[1..].iter().product();
        let mut os = s0.clone();
        os[0] *= t;
        let value = self.out(&os, || {
            let mut out = Vec::with_capacity(s0[0] * t * inner);
            for i in 0..s0[0] {
                for &v in xs {
                    out.extend_from_slice(&self.value(v).data()[i * inner..(i + 1) * inner]);
                }
            }
            out
        });
        let rg = xs.iter().any(|&v| self.rg(v));
        self.push(value, Op::StackBatch(xs.to_vec()), rg)
    }

    /// Attaches a loss computed outside the graph, given its value and its
    /// gradient with respect to `x`.
    pub fn external_loss(&mut self, x: Var, value: f64, grad: Tensor) -> Var {
        assert_eq!(grad.shape(), self.value(x).shape());
        let rg = self.rg(x);
        self.push(Tensor::scalar(value), Op::ExternalLoss { x, grad }, rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = if self.shape_only {
            Tensor::meta(&[1])
        } else {
            Tensor::scalar(self.value(x).sum())
        };
        let rg = self.rg(x);
        self.push(v, Op::SumAll(x), rg)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert!(!self.shape_only, "backward on a shape-only graph");
        assert_eq!(self.value(root).numel(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        let mut pgrads: Vec<Tensor> = self
            .params
            .values()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads, &mut pgrads);
        }
        Gradients { params: pgrads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.axpy(1.0, &g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().expect("set").data_mut());
    }

    fn backprop_node(
        &self,
        idx: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        pgrads: &mut [Tensor],
    ) {
        let gd = g.data();
        match &self.nodes[idx].op {
            Op::Input => {}
            Op::Param(id) => pgrads[id.0].axpy(1.0, g),
            Op::Conv { x, w, b } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (n, ci, d) = spatial(&xs);
                let co = ws[0];
                let geom = ConvGeom::new(ci, d, [ws[2], ws[3], ws[4]]);
                let s = geom.s();
                let rows = geom.rows();
                let pointwise = rows == ci;
                if let Some(b) = b {
                    self.acc_with(grads, *b, |gb| {
                        for i in 0..n {
                            for c in 0..co {
                                let o = (i * co + c) * s;
                                gb[c] += gd[o..o + s].iter().sum::<f64>();
                            }
                        }
                    });
                }
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let need_w = self.rg(*w);
                let need_x = self.rg(*x);
                let mut gw = vec![0.0; co * rows];
                let mut gx = if need_x { vec![0.0; xv.len()] } else { Vec::new() };
                let mut cols = if pointwise { Vec::new() } else { vec![0.0; rows * s] };
                let mut gcols = if pointwise || !need_x { Vec::new() } else { vec![0.0; rows * s] };
                for i in 0..n {
                    let gi = &gd[i * co * s..(i + 1) * co * s];
                    let xi = &xv[i * ci * s..(i + 1) * ci * s];
                    if need_w {
                        let src: &[f64] = if pointwise {
                            xi
                        } else {
                            geom.im2col(xi, &mut cols);
                            &cols
                        };
                        gemm(co, s, rows, 1.0, gi, false, src, true, 1.0, &mut gw);
                    }
                    if need_x {
                        let gxi = &mut gx[i * ci * s..(i + 1) * ci * s];
                        if pointwise {
                            gemm(rows, co, s, 1.0, wv, true, gi, false, 1.0, gxi);
                        } else {
                            gemm(rows, co, s, 1.0, wv, true, gi, false, 0.0, &mut gcols);
                            geom.col2im(&gcols, gxi);
                        }
                    }
                }
                if need_w {
                    self.acc(grads, *w, Tensor::from_vec(&ws, gw).expect("shape"));
                }
                if need_x {
                    self.acc(grads, *x, Tensor::from_vec(&xs, gx).expect("shape"));
                }
            }
            Op::AvgPool { x, f } => {
                let xs = self.shape(*x);
                let (n, c, d) = spatial(&xs);
                let o = [d[0] / f[0], d[1] / f[1], d[2] / f[2]];
                let inv = 1.0 / (f[0] * f[1] * f[2]) as f64;
                self.acc_with(grads, *x, |gx| {
                    for nc in 0..n * c {
                        for i in 0..d[0] {
                            for j in 0..d[1] {
                                for k in 0..d[2] {
                                    let src = ((nc * d[0] + i) * d[1] + j) * d[2] + k;
                                    let dst = ((nc * o[0] + i / f[0]) * o[1] + j / f[1]) * o[2]
                                        + k / f[2];
                                    gx[src] += gd[dst] * inv;
                                }
                            }
                        }
                    }
                });
            }
            Op::Upsample { x, f } => {
                let xs = self.shape(*x);
                let (n, c, d) = spatial(&xs);
                let o = [d[0] * f[0], d[1] * f[1], d[2] * f[2]];
                self.acc_with(grads, *x, |gx| {
                    for nc in 0..n * c {
                        for i in 0..o[0] {
                            for j in 0..o[1] {
                                for k in 0..o[2] {
                                    let dst = ((nc * o[0] + i) * o[1] + j) * o[2] + k;
                                    let src = ((nc * d[0] + i / f[0]) * d[1] + j / f[1]) * d[2]
                                        + k / f[2];
                                    gx[src] += gd[dst];
                                }
                            }
                        }
                    }
                });
            }
            Op::Concat { a, b } => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let inner: usize = sa[2..].iter().product();
                let (la, lb) = (sa[1] * inner, sb[1] * inner);
                self.acc_with(grads, *a, |ga| {
                    for i in 0..sa[0] {
                        let o = i * (la + lb);
                        for j in 0..la {
                            ga[i * la + j] += gd[o + j];
                        }
                    }
                });
                self.acc_with(grads, *b, |gb| {
                    for i in 0..sa[0] {
                        let o = i * (la + lb) + la;
                        for j in 0..lb {
                            gb[i * lb + j] += gd[o + j];
                        }
                    }
                });
            }
            Op::SliceChannels { x, start } => {
                let xs = self.shape(*x);
                let inner: usize = xs[2..].iter().product();
                let len = g.shape()[1];
                self.acc_with(grads, *x, |gx| {
                    for i in 0..xs[0] {
                        let o = (i * xs[1] + start) * inner;
                        for j in 0..len * inner {
                            gx[o + j] += gd[i * len * inner + j];
                        }
                    }
                });
            }
            Op::Add { a, b } | Op::Mul { a, b } => {
                let is_mul = matches!(self.nodes[idx].op, Op::Mul { .. });
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let os = g.shape().to_vec();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if sa == sb {
                    self.acc_with(grads, *a, |ga| {
                        for j in 0..gd.len() {
                            ga[j] += if is_mul { gd[j] * bv[j] } else { gd[j] };
                        }
                    });
                    self.acc_with(grads, *b, |gb| {
                        for j in 0..gd.len() {
                            gb[j] += if is_mul { gd[j] * av[j] } else { gd[j] };
                        }
                    });
                } else {
                    let oa = broadcast_offsets(&sa, &os);
                    let ob = broadcast_offsets(&sb, &os);
                    self.acc_with(grads, *a, |ga| {
                        for j in 0..gd.len() {
                            ga[oa[j]] += if is_mul { gd[j] * bv[ob[j]] } else { gd[j] };
                        }
                    });
                    self.acc_with(grads, *b, |gb| {
                        for j in 0..gd.len() {
                            gb[ob[j]] += if is_mul { gd[j] * av[oa[j]] } else { gd[j] };
                        }
                    });
                }
            }
            Op::Scale { x, s } => {
                self.acc(grads, *x, g.map(|v| v * s));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.acc_with(grads, *x, |gx| {
                    for j in 0..gd.len() {
                        if xv[j] > 0.0 {
                            gx[j] += gd[j];
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.acc_with(grads, *x, |gx| {
                    for j in 0..gd.len() {
                        gx[j] += gd[j] * gelu_grad(xv[j]);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yv = self.nodes[idx].value.data();
                self.acc_with(grads, *x, |gx| {
                    for j in 0..gd.len() {
                        gx[j] += gd[j] * yv[j] * (1.0 - yv[j]);
                    }
                });
            }
            Op::Tanh(x) => {
                let yv = self.nodes[idx].value.data();
                self.acc_with(grads, *x, |gx| {
                    for j in 0..gd.len() {
                        gx[j] += gd[j] * (1.0 - yv[j] * yv[j]);
                    }
                });
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let inner: usize = xs[2..].iter().product();
                let per = c / groups;
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let mut ggam = vec![0.0; c];
                let mut gbet = vec![0.0; c];
                let need_x = self.rg(*x);
                let mut gx = if need_x { vec![0.0; xv.len()] } else { Vec::new() };
                let m = (per * inner) as f64;
                for i in 0..n {
                    for gi in 0..*groups {
                        let (mean, rstd) = stats[i * groups + gi];
                        let o = (i * c + gi * per) * inner;
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for cc in 0..per {
                            let ch = gi * per + cc;
                            let base = o + cc * inner;
                            for j in 0..inner {
                                let xh = (xv[base + j] - mean) * rstd;
                                let gy = gd[base + j];
                                ggam[ch] += gy * xh;
                                gbet[ch] += gy;
                                let dxh = gy * gv[ch];
                                s1 += dxh;
                                s2 += dxh * xh;
                            }
                        }
                        if need_x {
                            let (s1, s2) = (s1 / m, s2 / m);
                            for cc in 0..per {
                                let ch = gi * per + cc;
                                let base = o + cc * inner;
                                for j in 0..inner {
                                    let xh = (xv[base + j] - mean) * rstd;
                                    let dxh = gd[base + j] * gv[ch];
                                    gx[base + j] += rstd * (dxh - s1 - xh * s2);
                                }
                            }
                        }
                    }
                }
                let gs = self.shape(*gamma);
                self.acc(grads, *gamma, Tensor::from_vec(&gs, ggam).expect("shape"));
                self.acc(grads, *beta, Tensor::from_vec(&gs, gbet).expect("shape"));
                if need_x {
                    self.acc(grads, *x, Tensor::from_vec(&xs, gx).expect("shape"));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let xs = self.shape(*x);
                let dd = *xs.last().expect("rank");
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let mut ggam = vec![0.0; dd];
                let mut gbet = vec![0.0; dd];
                let mut gx = vec![0.0; xv.len()];
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let o = r * dd;
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..dd {
                        let xh = (xv[o + j] - mean) * rstd;
                        let gy = gd[o + j];
                        ggam[j] += gy * xh;
                        gbet[j] += gy;
                        s1 += gy * gv[j];
                        s2 += gy * gv[j] * xh;
                    }
                    let (s1, s2) = (s1 / dd as f64, s2 / dd as f64);
                    for j in 0..dd {
                        let xh = (xv[o + j] - mean) * rstd;
                        gx[o + j] = rstd * (gd[o + j] * gv[j] - s1 - xh * s2);
                    }
                }
                let gs = self.shape(*gamma);
                self.acc(grads, *gamma, Tensor::from_vec(&gs, ggam).expect("shape"));
                self.acc(grads, *beta, Tensor::from_vec(&gs, gbet).expect("shape"));
                self.acc(grads, *x, Tensor::from_vec(&xs, gx).expect("shape"));
            }
            Op::MatMul { a, b } => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let bt = g.shape()[0];
                let (m, k, nn) = (sa[1], sa[2], sb[2]);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc_with(grads, *a, |ga| {
                    for i in 0..bt {
                        let ia = if sa[0] == 1 { 0 } else { i };
                        let ib = if sb[0] == 1 { 0 } else { i };
                        gemm(
                            m,
                            nn,
                            k,
                            1.0,
                            &gd[i * m * nn..(i + 1) * m * nn],
                            false,
                            &bv[ib * k * nn..(ib + 1) * k * nn],
                            true,
                            1.0,
                            &mut ga[ia * m * k..(ia + 1) * m * k],
                        );
                    }
                });
                self.acc_with(grads, *b, |gb| {
                    for i in 0..bt {
                        let ia = if sa[0] == 1 { 0 } else { i };
                        let ib = if sb[0] == 1 { 0 } else { i };
                        gemm(
                            k,
                            m,
                            nn,
                            1.0,
                            &av[ia * m * k..(ia + 1) * m * k],
                            true,
                            &gd[i * m * nn..(i + 1) * m * nn],
                            false,
                            1.0,
                            &mut gb[ib * k * nn..(ib + 1) * k * nn],
                        );
                    }
                });
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let data = permute_data(gd, g.shape(), &inv);
                let xs = self.shape(*x);
                self.acc(grads, *x, Tensor::from_vec(&xs, data).expect("shape"));
            }
            Op::Reshape(x) => {
                let xs = self.shape(*x);
                self.acc(grads, *x, Tensor::from_vec(&xs, gd.to_vec()).expect("shape"));
            }
            Op::CausalSoftmax(x) => {
                let yv = self.nodes[idx].value.data();
                let t = *g.shape().last().expect("rank");
                self.acc_with(grads, *x, |gx| {
                    for r in 0..gd.len() / t {
                        let i = r % t;
                        let o = r * t;
                        let dot: f64 = (0..=i).map(|j| gd[o + j] * yv[o + j]).sum();
                        for j in 0..=i {
                            gx[o + j] += yv[o + j] * (gd[o + j] - dot);
                        }
                    }
                });
            }
            Op::MeanSpatial(x) => {
                let xs = self.shape(*x);
                let inner: usize = xs[2..].iter().product();
                self.acc_with(grads, *x, |gx| {
                    for (r, &gv) in gd.iter().enumerate() {
                        for j in 0..inner {
                            gx[r * inner + j] += gv / inner as f64;
                        }
                    }
                });
            }
            Op::MeanChannels(x) => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let inner: usize = xs[2..].iter().product();
                self.acc_with(grads, *x, |gx| {
                    for i in 0..n {
                        for ch in 0..c {
                            let o = (i * c + ch) * inner;
                            for j in 0..inner {
                                gx[o + j] += gd[i * inner + j] / c as f64;
                            }
                        }
                    }
                });
            }
            Op::Spectral {
                x,
                wr,
                wi,
                basis,
                xhat,
            } => {
                let xs = self.shape(*x);
                let (n, ci, _) = spatial(&xs);
                let co = g.shape()[1];
                let kk: usize = basis.mode_counts().iter().product();
                // complex gradient convention: d/d(re) + i d/d(im)
                let zeros = vec![0.0; gd.len()];
                let (gyr, gyi) = transform3(basis, gd.to_vec(), zeros, n * co, Pass::InverseAdjoint);
                let (wrv, wiv) = (self.value(*wr).data(), self.value(*wi).data());
                let (hr, hi) = xhat;
                let mut gwr = vec![0.0; ci * co * kk];
                let mut gwi = vec![0.0; ci * co * kk];
                let mut gxr = vec![0.0; n * ci * kk];
                let mut gxi = vec![0.0; n * ci * kk];
                for i in 0..n {
                    for a in 0..ci {
                        let xo = (i * ci + a) * kk;
                        for b in 0..co {
                            let wo = (a * co + b) * kk;
                            let yo = (i * co + b) * kk;
                            for k in 0..kk {
                                let (gr, gi) = (gyr[yo + k], gyi[yo + k]);
                                // gW += gY * conj(X)
                                gwr[wo + k] += gr * hr[xo + k] + gi * hi[xo + k];
                                gwi[wo + k] += gi * hr[xo + k] - gr * hi[xo + k];
                                // gX += gY * conj(W)
                                gxr[xo + k] += gr * wrv[wo + k] + gi * wiv[wo + k];
                                gxi[xo + k] += gi * wrv[wo + k] - gr * wiv[wo + k];
                            }
                        }
                    }
                }
                let ws = self.shape(*wr);
                self.acc(grads, *wr, Tensor::from_vec(&ws, gwr).expect("shape"));
                self.acc(grads, *wi, Tensor::from_vec(&ws, gwi).expect("shape"));
                if self.rg(*x) {
                    let (gx, _) = transform3(basis, gxr, gxi, n * ci, Pass::ForwardAdjoint);
                    self.acc(grads, *x, Tensor::from_vec(&xs, gx).expect("shape"));
                }
            }
            Op::RepeatBatch { x, r } => {
                let xs = self.shape(*x);
                let inner: usize = xs[1..].iter().product();
                self.acc_with(grads, *x, |gx| {
                    for i in 0..xs[0] {
                        for rep in 0..*r {
                            let o = (i * r + rep) * inner;
                            for j in 0..inner {
                                gx[i * inner + j] += gd[o + j];
                            }
                        }
                    }
                });
            }
            Op::StackBatch(xs) => {
                let s0 = self.shape(xs[0]);
                let t = xs.len();
                let inner: usize = s0[1..].iter().product();
                for (ti, &v) in xs.iter().enumerate() {
                    self.acc_with(grads, v, |gx| {
                        for i in 0..s0[0] {
                            let o = (i * t + ti) * inner;
                            for j in 0..inner {
                                gx[i * inner + j] += gd[o + j];
                            }
                        }
                    });
                }
            }
            Op::ExternalLoss { x, grad } => {
                self.acc(grads, *x, grad.map(|v| v * gd[0]));
            }
            Op::SumAll(x) => {
                let xs = self.shape(*x);
                self.acc(grads, *x, Tensor::full(&xs, gd[0]));
            }
        }
    }
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let os: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let ist = strides(shape);
    let pst: Vec<usize> = perm.iter().map(|&p| ist[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; os.len()];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(data[off]);
        for d in (0..os.len()).rev() {
            idx[d] += 1;
            off += pst[d];
            if idx[d] < os[d] {
                break;
            }
            off -= pst[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}
