//! Building blocks shared by the zoo families.

use plume_tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Group,
    Instance,
}

impl NormKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "group" => Some(Self::Group),
            "instance" => Some(Self::Instance),
            _ => None,
        }
    }
}

/// Parameter registration with hierarchical names.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    /// Kernel used for "3x3" convolutions: `[3, 3, 1]` in 2-D, `[3, 3, 3]` in 3-D.
    pub kernel: [usize; 3],
}

impl Builder<'_> {
    pub fn conv_weight(&mut self, name: &str, ci: usize, co: usize, k: [usize; 3]) -> ParamId {
        let fan_in = ci * k.iter().product::<usize>();
        self.store
            .add_kaiming(name, &[co, ci, k[0], k[1], k[2]], fan_in, self.rng)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add_zeros(name, shape)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add_ones(name, shape)
    }

    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let a = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-a..a)).collect();
        self.store.add(name, Tensor::from_vec(shape, data).expect("shape"))
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        self.store.add_normal(name, shape, std, self.rng)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Conv {
    pub fn new(bd: &mut Builder, name: &str, ci: usize, co: usize, k: [usize; 3], bias: bool) -> Self {
        let w = bd.conv_weight(&format!("{name}.weight"), ci, co, k);
        let b = bias.then(|| bd.zeros(&format!("{name}.bias"), &[co]));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.conv(x, w, b)
    }
}

fn groups_for(kind: NormKind, c: usize) -> usize {
    match kind {
        NormKind::Instance => c,
        NormKind::Group => [8, 4, 2, 1].into_iter().find(|g| c % g == 0).unwrap_or(1),
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl Norm {
    pub fn new(bd: &mut Builder, name: &str, c: usize, kind: NormKind, zero_gamma: bool) -> Self {
        let gamma = if zero_gamma {
            bd.zeros(&format!("{name}.gamma"), &[c])
        } else {
            bd.ones(&format!("{name}.gamma"), &[c])
        };
        let beta = bd.zeros(&format!("{name}.beta"), &[c]);
        Self {
            gamma,
            beta,
            groups: groups_for(kind, c),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (ga, be) = (g.param(self.gamma), g.param(self.beta));
        g.group_norm(x, ga, be, self.groups)
    }
}

/// conv (no bias) -> norm -> relu, twice.
#[derive(Clone, Debug)]
pub struct DoubleConv {
    c1: Conv,
    n1: Norm,
    c2: Conv,
    n2: Norm,
}

impl DoubleConv {
    pub fn new(bd: &mut Builder, name: &str, ci: usize, co: usize, norm: NormKind) -> Self {
        let k = bd.kernel;
        Self {
            c1: Conv::new(bd, &format!("{name}.conv1"), ci, co, k, false),
            n1: Norm::new(bd, &format!("{name}.norm1"), co, norm, false),
            c2: Conv::new(bd, &format!("{name}.conv2"), co, co, k, false),
            n2: Norm::new(bd, &format!("{name}.norm2"), co, norm, false),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.c1.forward(g, x);
        let h = self.n1.forward(g, h);
        let h = g.relu(h);
        let h = self.c2.forward(g, h);
        let h = self.n2.forward(g, h);
        g.relu(h)
    }
}

/// Residual block: relu(norm(conv(relu(norm(conv(x))))) + skip(x)),
/// with a 1x1 projection on the skip when the width changes.
#[derive(Clone, Debug)]
pub struct ResBlock {
    c1: Conv,
    n1: Norm,
    c2: Conv,
    n2: Norm,
    proj: Option<Conv>,
}

impl ResBlock {
    pub fn new(bd: &mut Builder, name: &str, ci: usize, co: usize, norm: NormKind, zero_init: bool) -> Self {
        let k = bd.kernel;
        Self {
            c1: Conv::new(bd, &format!("{name}.conv1"), ci, co, k, false),
            n1: Norm::new(bd, &format!("{name}.norm1"), co, norm, false),
            c2: Conv::new(bd, &format!("{name}.conv2"), co, co, k, false),
            n2: Norm::new(bd, &format!("{name}.norm2"), co, norm, zero_init),
            proj: (ci != co).then(|| Conv::new(bd, &format!("{name}.proj"), ci, co, [1, 1, 1], false)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.c1.forward(g, x);
        let h = self.n1.forward(g, h);
        let h = g.relu(h);
        let h = self.c2.forward(g, h);
        let h = self.n2.forward(g, h);
        let skip = match &self.proj {
            Some(p) => p.forward(g, x),
            None => x,
        };
        let s = g.add(h, skip);
        g.relu(s)
    }
}

/// Either block type, so encoders and decoders can be shared.
#[derive(Clone, Debug)]
pub enum Block {
    Plain(DoubleConv),
    Res(ResBlock),
}

impl Block {
    pub fn new(bd: &mut Builder, name: &str, ci: usize, co: usize, norm: NormKind, residual: bool, zero_init: bool) -> Self {
        if residual {
            Block::Res(ResBlock::new(bd, name, ci, co, norm, zero_init))
        } else {
            Block::Plain(DoubleConv::new(bd, name, ci, co, norm))
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        match self {
            Block::Plain(b) => b.forward(g, x),
            Block::Res(b) => b.forward(g, x),
        }
    }
}

/// Pooling factors per level: x and y always halve, z halves while even.
pub fn pool_factors(dims: [usize; 3], levels: usize) -> Vec<[usize; 3]> {
    let mut d = dims;
    let mut out = Vec::with_capacity(levels);
    for _ in 0..levels {
        let f = [2, 2, if d[2] > 1 && d[2] % 2 == 0 { 2 } else { 1 }];
        for a in 0..3 {
            d[a] /= f[a];
        }
        out.push(f);
    }
    out
}

/// U-Net style encoder/decoder producing `bc` feature channels at full resolution.
#[derive(Clone, Debug)]
pub struct UNetCore {
    pub enc: Vec<Block>,
    pub up: Vec<Conv>,
    pub dec: Vec<Block>,
    pub factors: Vec<[usize; 3]>,
}

impl UNetCore {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        bd: &mut Builder,
        name: &str,
        cin: usize,
        bc: usize,
        levels: usize,
        dims: [usize; 3],
        norm: NormKind,
        residual: bool,
        zero_init: bool,
    ) -> Self {
        let widths: Vec<usize> = (0..=levels).map(|l| bc << l).collect();
        let mut enc = Vec::new();
        let mut prev = cin;
        for (l, &w) in widths.iter().enumerate() {
            enc.push(Block::new(bd, &format!("{name}.enc{l}"), prev, w, norm, residual, zero_init));
            prev = w;
        }
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for l in (0..levels).rev() {
            up.push(Conv::new(bd, &format!("{name}.up{l}"), widths[l + 1], widths[l], [1, 1, 1], false));
            dec.push(Block::new(bd, &format!("{name}.dec{l}"), 2 * widths[l], widths[l], norm, residual, zero_init));
        }
        Self {
            enc,
            up,
            dec,
            factors: pool_factors(dims, levels),
        }
    }

    pub fn levels(&self) -> usize {
        self.factors.len()
    }

    /// Returns the skip features (finest first) and the bottleneck.
    pub fn encode(&self, g: &mut Graph, x: Var) -> (Vec<Var>, Var) {
        let mut skips = Vec::new();
        let mut h = self.enc[0].forward(g, x);
        for l in 0..self.levels() {
            skips.push(h);
            let p = g.avg_pool(h, self.factors[l]);
            h = self.enc[l + 1].forward(g, p);
        }
        (skips, h)
    }

    /// Decodes from `h` using `skips` (finest first).
    pub fn decode(&self, g: &mut Graph, mut h: Var, skips: &[Var]) -> Var {
        for (i, l) in (0..self.levels()).rev().enumerate() {
            let u = g.upsample(h, self.factors[l]);
            let u = self.up[i].forward(g, u);
            let c = g.concat(u, skips[l]);
            h = self.dec[i].forward(g, c);
        }
        h
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (skips, h) = self.encode(g, x);
        self.decode(g, h, &skips)
    }
}

/// Convolutional LSTM cell; gates from one convolution over `[x, h]`.
#[derive(Clone, Debug)]
pub struct ConvLstm {
    gates: Conv,
    pub hidden: usize,
}

impl ConvLstm {
    pub fn new(bd: &mut Builder, name: &str, cin: usize, hidden: usize) -> Self {
        let k = bd.kernel;
        let gates = Conv::new(bd, &format!("{name}.gates"), cin + hidden, 4 * hidden, k, true);
        // forget-gate bias of one keeps early memory
        if let Some(b) = gates.b {
            let data = bd.store.get_mut(b).data_mut();
            for v in &mut data[hidden..2 * hidden] {
                *v = 1.0;
            }
        }
        Self { gates, hidden }
    }

    /// Unrolls `steps` times on a constant input; returns every hidden state.
    pub fn unroll(&self, g: &mut Graph, x: Var, steps: usize) -> Vec<Var> {
        let xs = g.shape(x);
        let state_shape = [xs[0], self.hidden, xs[2], xs[3], xs[4]];
        let zeros = if g.is_shape_only() {
            Tensor::meta(&state_shape)
        } else {
            Tensor::zeros(&state_shape)
        };
        let mut h = g.input(zeros.clone());
        let mut c = g.input(zeros);
        let hd = self.hidden;
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let cat = g.concat(x, h);
            let z = self.gates.forward(g, cat);
            let zi = g.slice_channels(z, 0, hd);
            let zf = g.slice_channels(z, hd, hd);
            let zo = g.slice_channels(z, 2 * hd, hd);
            let zg = g.slice_channels(z, 3 * hd, hd);
            let i = g.sigmoid(zi);
            let f = g.sigmoid(zf);
            let o = g.sigmoid(zo);
            let gg = g.tanh(zg);
            let fc = g.mul(f, c);
            let ig = g.mul(i, gg);
            c = g.add(fc, ig);
            let tc = g.tanh(c);
            h = g.mul(o, tc);
            out.push(h);
        }
        out
    }
}

/// Dense layer on the last axis of `[B, M, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new(bd: &mut Builder, name: &str, din: usize, dout: usize) -> Self {
        Self {
            w: bd.uniform(&format!("{name}.weight"), &[1, din, dout], din),
            b: bd.zeros(&format!("{name}.bias"), &[1, 1, dout]),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (w, b) = (g.param(self.w), g.param(self.b));
        let y = g.matmul(x, w);
        g.add(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new(bd: &mut Builder, name: &str, d: usize) -> Self {
        Self {
            gamma: bd.ones(&format!("{name}.gamma"), &[d]),
            beta: bd.zeros(&format!("{name}.beta"), &[d]),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (ga, be) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, ga, be)
    }
}
