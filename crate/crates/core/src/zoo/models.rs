//! The eight surrogate families. Every network maps `[N, 1, X, Y, Z]` to
//! `[N, T, X, Y, Z]`.

use std::sync::Arc;

use plume_tensor::{Graph, ParamId, ParamStore, SpectralBasis, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{pool_factors, Block, Builder, Conv, ConvLstm, LayerNorm, Linear, NormKind, UNetCore};
use crate::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Family {
    UNet,
    ResUNet,
    RecurrentRUNet,
    EDConvLSTM,
    CNNTransformer,
    UDeepONet,
    FNO,
    UFNO,
}

impl Family {
    pub const ALL: [Family; 8] = [
        Family::UNet,
        Family::ResUNet,
        Family::RecurrentRUNet,
        Family::EDConvLSTM,
        Family::CNNTransformer,
        Family::UDeepONet,
        Family::FNO,
        Family::UFNO,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::UNet => "UNet",
            Family::ResUNet => "ResUNet",
            Family::RecurrentRUNet => "RecurrentRUNet",
            Family::EDConvLSTM => "EDConvLSTM",
            Family::CNNTransformer => "CNNTransformer",
            Family::UDeepONet => "UDeepONet",
            Family::FNO => "FNO",
            Family::UFNO => "UFNO",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.as_str().eq_ignore_ascii_case(s))
    }

    /// Families whose spatial path pools by two per level.
    pub fn pools(self) -> bool {
        !matches!(self, Family::FNO)
    }

    pub fn supports_aux_bce(self) -> bool {
        matches!(
            self,
            Family::UNet | Family::ResUNet | Family::RecurrentRUNet | Family::EDConvLSTM
        )
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Fully resolved construction parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub dims: [usize; 3],
    pub timesteps: usize,
    pub base_channels: usize,
    pub norm: NormKind,
    pub levels: usize,
    /// Transformer depth and heads (CNNTransformer only).
    pub layers: usize,
    pub heads: usize,
    /// Zero-initialised residual branches (ResUNet family).
    pub zero_init_residual: bool,
}

impl ModelSpec {
    pub fn new(family: Family, dims: [usize; 3], timesteps: usize, base_channels: usize) -> Self {
        Self {
            family,
            dims,
            timesteps,
            base_channels,
            norm: NormKind::Group,
            levels: default_levels(dims),
            layers: 1,
            heads: 1,
            zero_init_residual: false,
        }
    }

    pub fn is_3d(&self) -> bool {
        self.dims[2] > 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.timesteps == 0 {
            return Err(CoreError::Parameter("timesteps must be positive".into()));
        }
        if self.base_channels == 0 {
            return Err(CoreError::Parameter("base_channels must be positive".into()));
        }
        if self.family == Family::CNNTransformer {
            if !(1..=3).contains(&self.layers) {
                return Err(CoreError::Parameter(format!("transformer layers {} outside [1, 3]", self.layers)));
            }
            if ![1, 2, 4].contains(&self.heads) {
                return Err(CoreError::Parameter(format!("attention heads {} not in {{1, 2, 4}}", self.heads)));
            }
        }
        let levels = match self.family {
            Family::FNO => 0,
            Family::UFNO => 1,
            _ => self.levels,
        };
        if self.family.pools() && levels == 0 {
            return Err(CoreError::Parameter("levels must be at least 1".into()));
        }
        let need = 1usize << levels;
        for (axis, name) in [(0, "x"), (1, "y")] {
            let n = self.dims[axis];
            if n % need != 0 || n < need.max(2) {
                return Err(CoreError::Shape {
                    dim: name.into(),
                    reason: format!(
                        "{} needs {name} divisible by {need} for {levels} pooling level(s), got {n}",
                        self.family
                    ),
                });
            }
        }
        if self.dims[2] == 0 {
            return Err(CoreError::Shape {
                dim: "z".into(),
                reason: "z extent must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Two levels in 2-D; in 3-D up to four, limited by the lateral extent.
pub fn default_levels(dims: [usize; 3]) -> usize {
    if dims[2] <= 1 {
        return 2;
    }
    let mut l = 4;
    while l > 1 && (dims[0] % (1 << l) != 0 || dims[1] % (1 << l) != 0) {
        l -= 1;
    }
    l
}

/// Per-axis Fourier modes kept by the spectral layers.
pub fn fourier_modes(dims: [usize; 3]) -> [usize; 3] {
    dims.map(|n| (n / 2).clamp(1, 8))
}

#[derive(Clone, Debug)]
struct FourierLayer {
    wr: ParamId,
    wi: ParamId,
    pointwise: Conv,
    unet: Option<MiniUNet>,
}

impl FourierLayer {
    fn new(bd: &mut Builder, name: &str, width: usize, basis: &SpectralBasis, unet: Option<MiniUNet>) -> Self {
        let k = basis.mode_counts();
        let shape = [width, width, k[0], k[1], k[2]];
        let scale = 1.0 / (width * width) as f64;
        let wr = bd.normal(&format!("{name}.spectral_re"), &shape, scale);
        let wi = bd.normal(&format!("{name}.spectral_im"), &shape, scale);
        let pointwise = Conv::new(bd, &format!("{name}.pointwise"), width, width, [1, 1, 1], true);
        Self { wr, wi, pointwise, unet }
    }

    fn forward(&self, g: &mut Graph, x: Var, basis: &Arc<SpectralBasis>, act: bool) -> Var {
        let (wr, wi) = (g.param(self.wr), g.param(self.wi));
        let s = g.spectral_conv(x, wr, wi, basis.clone());
        let p = self.pointwise.forward(g, x);
        let mut h = g.add(s, p);
        if let Some(u) = &self.unet {
            let uo = u.forward(g, x);
            h = g.add(h, uo);
        }
        if act {
            g.gelu(h)
        } else {
            h
        }
    }
}

/// One-level U-Net used inside the U-Fourier layers.
#[derive(Clone, Debug)]
struct MiniUNet {
    c1: Conv,
    c2: Conv,
    up: Conv,
    c3: Conv,
    factor: [usize; 3],
}

impl MiniUNet {
    fn new(bd: &mut Builder, name: &str, width: usize, dims: [usize; 3]) -> Self {
        let k = bd.kernel;
        Self {
            c1: Conv::new(bd, &format!("{name}.conv1"), width, width, k, true),
            c2: Conv::new(bd, &format!("{name}.conv2"), width, 2 * width, k, true),
            up: Conv::new(bd, &format!("{name}.up"), 2 * width, width, [1, 1, 1], false),
            c3: Conv::new(bd, &format!("{name}.conv3"), 2 * width, width, k, true),
            factor: pool_factors(dims, 1)[0],
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let a = self.c1.forward(g, x);
        let a = g.relu(a);
        let p = g.avg_pool(a, self.factor);
        let b = self.c2.forward(g, p);
        let b = g.relu(b);
        let u = g.upsample(b, self.factor);
        let u = self.up.forward(g, u);
        let c = g.concat(u, a);
        self.c3.forward(g, c)
    }
}

#[derive(Clone, Debug)]
struct Cbam {
    fc1: Conv,
    fc2: Conv,
    spatial: Conv,
}

impl Cbam {
    fn new(bd: &mut Builder, name: &str, c: usize) -> Self {
        let hidden = (c / 4).max(1);
        let k = bd.kernel;
        Self {
            fc1: Conv::new(bd, &format!("{name}.fc1"), c, hidden, [1, 1, 1], true),
            fc2: Conv::new(bd, &format!("{name}.fc2"), hidden, c, [1, 1, 1], true),
            spatial: Conv::new(bd, &format!("{name}.spatial"), 1, 1, k, true),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let m = g.mean_spatial(x);
        let a = self.fc1.forward(g, m);
        let a = g.relu(a);
        let a = self.fc2.forward(g, a);
        let a = g.sigmoid(a);
        let x = g.mul(x, a);
        let s = g.mean_channels(x);
        let s = self.spatial.forward(g, s);
        let s = g.sigmoid(s);
        g.mul(x, s)
    }
}

#[derive(Clone, Debug)]
struct Head {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Debug)]
struct TransformerLayer {
    ln1: LayerNorm,
    heads: Vec<Head>,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    head_dim: usize,
}

impl TransformerLayer {
    fn new(bd: &mut Builder, name: &str, d: usize, heads: usize) -> Self {
        let dh = d / heads;
        let hs = (0..heads)
            .map(|h| Head {
                q: Linear::new(bd, &format!("{name}.h{h}.q"), d, dh),
                k: Linear::new(bd, &format!("{name}.h{h}.k"), d, dh),
                v: Linear::new(bd, &format!("{name}.h{h}.v"), d, dh),
                o: Linear::new(bd, &format!("{name}.h{h}.o"), dh, d),
            })
            .collect();
        Self {
            ln1: LayerNorm::new(bd, &format!("{name}.ln1"), d),
            heads: hs,
            ln2: LayerNorm::new(bd, &format!("{name}.ln2"), d),
            fc1: Linear::new(bd, &format!("{name}.fc1"), d, 2 * d),
            fc2: Linear::new(bd, &format!("{name}.fc2"), 2 * d, d),
            head_dim: dh,
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.ln1.forward(g, x);
        let mut att_sum: Option<Var> = None;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        for hd in &self.heads {
            let q = hd.q.forward(g, h);
            let k = hd.k.forward(g, h);
            let v = hd.v.forward(g, h);
            let kt = g.permute(k, &[0, 2, 1]);
            let s = g.matmul(q, kt);
            let s = g.scale(s, scale);
            let a = g.causal_softmax(s);
            let o = g.matmul(a, v);
            let o = hd.o.forward(g, o);
            att_sum = Some(match att_sum {
                Some(acc) => g.add(acc, o),
                None => o,
            });
        }
        let x = g.add(x, att_sum.expect("at least one head"));
        let h = self.ln2.forward(g, x);
        let h = self.fc1.forward(g, h);
        let h = g.gelu(h);
        let h = self.fc2.forward(g, h);
        g.add(x, h)
    }
}

#[derive(Clone, Debug)]
enum Net {
    UNet {
        core: UNetCore,
        head: Conv,
    },
    Recurrent {
        core: UNetCore,
        lstm: ConvLstm,
        head: Conv,
    },
    EncDec {
        enc: Vec<Block>,
        factors: Vec<[usize; 3]>,
        cbam: Cbam,
        lstm: ConvLstm,
        up: Vec<Conv>,
        dec: Vec<Block>,
        head: Conv,
    },
    Transformer {
        core: UNetCore,
        embed: Linear,
        pos: ParamId,
        layers: Vec<TransformerLayer>,
        ln_f: LayerNorm,
        out: Linear,
        bias: ParamId,
    },
    DeepONet {
        core: UNetCore,
        branch: Conv,
        trunk: Vec<Linear>,
        bias: ParamId,
    },
    Fourier {
        lift: Conv,
        layers: Vec<FourierLayer>,
        proj1: Conv,
        proj2: Conv,
        basis: Arc<SpectralBasis>,
    },
}

/// A built network and its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamStore,
    net: Net,
}

impl Model {
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kernel = if spec.is_3d() { [3, 3, 3] } else { [3, 3, 1] };
        let mut bd = Builder {
            store: &mut params,
            rng: &mut rng,
            kernel,
        };
        let bc = spec.base_channels;
        let t = spec.timesteps;
        let dims = spec.dims;
        let levels = spec.levels;
        let norm = spec.norm;
        let net = match spec.family {
            Family::UNet | Family::ResUNet => {
                let residual = spec.family == Family::ResUNet;
                let zi = residual && spec.zero_init_residual;
                let core = UNetCore::new(&mut bd, "unet", 1, bc, levels, dims, norm, residual, zi);
                let head = Conv::new(&mut bd, "head", bc, t, [1, 1, 1], true);
                Net::UNet { core, head }
            }
            Family::RecurrentRUNet => {
                let core = UNetCore::new(&mut bd, "runet", 1, bc, levels, dims, norm, true, spec.zero_init_residual);
                let cl = bc << levels;
                let lstm = ConvLstm::new(&mut bd, "lstm", cl, cl);
                let head = Conv::new(&mut bd, "head", bc, 1, [1, 1, 1], true);
                Net::Recurrent { core, lstm, head }
            }
            Family::EDConvLSTM => {
                let widths: Vec<usize> = (0..=levels).map(|l| bc << l).collect();
                let mut enc = Vec::new();
                let mut prev = 1;
                for (l, &w) in widths.iter().enumerate() {
                    enc.push(Block::new(&mut bd, &format!("enc{l}"), prev, w, norm, false, false));
                    prev = w;
                }
                let cl = widths[levels];
                let cbam = Cbam::new(&mut bd, "cbam", cl);
                let lstm = ConvLstm::new(&mut bd, "lstm", cl, cl);
                let mut up = Vec::new();
                let mut dec = Vec::new();
                for l in (0..levels).rev() {
                    up.push(Conv::new(&mut bd, &format!("up{l}"), widths[l + 1], widths[l], [1, 1, 1], false));
                    dec.push(Block::new(&mut bd, &format!("dec{l}"), widths[l], widths[l], norm, false, false));
                }
                let head = Conv::new(&mut bd, "head", bc, 1, [1, 1, 1], true);
                Net::EncDec {
                    enc,
                    factors: pool_factors(dims, levels),
                    cbam,
                    lstm,
                    up,
                    dec,
                    head,
                }
            }
            Family::CNNTransformer => {
                let core = UNetCore::new(&mut bd, "unet", 1, bc, levels, dims, norm, false, false);
                let d = 4 * bc;
                let cl = bc << levels;
                let embed = Linear::new(&mut bd, "embed", cl, d);
                let pos = bd.normal("pos", &[1, t, d], 0.02);
                let layers = (0..spec.layers)
                    .map(|i| TransformerLayer::new(&mut bd, &format!("block{i}"), d, spec.heads))
                    .collect();
                let ln_f = LayerNorm::new(&mut bd, "ln_f", d);
                let out = Linear::new(&mut bd, "out", d, bc);
                let bias = bd.zeros("out_bias", &[1, t, 1]);
                Net::Transformer {
                    core,
                    embed,
                    pos,
                    layers,
                    ln_f,
                    out,
                    bias,
                }
            }
            Family::UDeepONet => {
                let p = bc;
                let core = UNetCore::new(&mut bd, "branch", 1, bc, levels, dims, norm, false, false);
                let branch = Conv::new(&mut bd, "branch_out", bc, p, [1, 1, 1], true);
                let w = 2 * bc;
                let trunk = vec![
                    Linear::new(&mut bd, "trunk0", 1, w),
                    Linear::new(&mut bd, "trunk1", w, w),
                    Linear::new(&mut bd, "trunk2", w, p),
                ];
                let bias = bd.zeros("out_bias", &[1, t, 1]);
                Net::DeepONet { core, branch, trunk, bias }
            }
            Family::FNO | Family::UFNO => {
                let width = bc;
                let ncoord = if spec.is_3d() { 3 } else { 2 };
                let basis = Arc::new(SpectralBasis::new(dims, fourier_modes(dims)));
                let lift = Conv::new(&mut bd, "lift", 1 + ncoord, width, [1, 1, 1], true);
                let mut layers = Vec::new();
                for i in 0..4 {
                    let unet = (spec.family == Family::UFNO && i >= 2)
                        .then(|| MiniUNet::new(&mut bd, &format!("fourier{i}.unet"), width, dims));
                    layers.push(FourierLayer::new(&mut bd, &format!("fourier{i}"), width, &basis, unet));
                }
                let proj1 = Conv::new(&mut bd, "proj1", width, 2 * width, [1, 1, 1], true);
                let proj2 = Conv::new(&mut bd, "proj2", 2 * width, t, [1, 1, 1], true);
                Net::Fourier {
                    lift,
                    layers,
                    proj1,
                    proj2,
                    basis,
                }
            }
        };
        Ok(Self {
            spec: spec.clone(),
            params,
            net,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Forward pass; `x` is `[N, 1, X, Y, Z]`, output `[N, T, X, Y, Z]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let xs = g.shape(x);
        let n = xs[0];
        let t = self.spec.timesteps;
        let d = [xs[2], xs[3], xs[4]];
        let cells = d[0] * d[1] * d[2];
        match &self.net {
            Net::UNet { core, head } => {
                let h = core.forward(g, x);
                head.forward(g, h)
            }
            Net::Recurrent { core, lstm, head } => {
                let (skips, b) = core.encode(g, x);
                let hs = lstm.unroll(g, b, t);
                let h = g.stack_batch(&hs);
                let skips: Vec<Var> = skips.iter().map(|&s| g.repeat_batch(s, t)).collect();
                let y = core.decode(g, h, &skips);
                let y = head.forward(g, y);
                g.reshape(y, &[n, t, d[0], d[1], d[2]])
            }
            Net::EncDec {
                enc,
                factors,
                cbam,
                lstm,
                up,
                dec,
                head,
            } => {
                let mut h = enc[0].forward(g, x);
                for (l, f) in factors.iter().enumerate() {
                    let p = g.avg_pool(h, *f);
                    h = enc[l + 1].forward(g, p);
                }
                let h = cbam.forward(g, h);
                let hs = lstm.unroll(g, h, t);
                let mut y = g.stack_batch(&hs);
                for (i, l) in (0..factors.len()).rev().enumerate() {
                    let u = g.upsample(y, factors[l]);
                    let u = up[i].forward(g, u);
                    y = dec[i].forward(g, u);
                }
                let y = head.forward(g, y);
                g.reshape(y, &[n, t, d[0], d[1], d[2]])
            }
            Net::Transformer {
                core,
                embed,
                pos,
                layers,
                ln_f,
                out,
                bias,
            } => {
                let (skips, b) = core.encode(g, x);
                let cl = g.shape(b)[1];
                let tok = g.mean_spatial(b);
                let tok = g.reshape(tok, &[n, 1, cl]);
                let tok = embed.forward(g, tok);
                let p = g.param(*pos);
                let mut z = g.add(tok, p);
                for layer in layers {
                    z = layer.forward(g, z);
                }
                let z = ln_f.forward(g, z);
                let w = out.forward(g, z);
                let feats = core.decode(g, b, &skips);
                let bc = g.shape(feats)[1];
                let feats = g.reshape(feats, &[n, bc, cells]);
                let y = g.matmul(w, feats);
                let bv = g.param(*bias);
                let y = g.add(y, bv);
                g.reshape(y, &[n, t, d[0], d[1], d[2]])
            }
            Net::DeepONet {
                core,
                branch,
                trunk,
                bias,
            } => {
                let feats = core.forward(g, x);
                let bfeat = branch.forward(g, feats);
                let p = g.shape(bfeat)[1];
                let bfeat = g.reshape(bfeat, &[n, p, cells]);
                let denom = (t.max(2) - 1) as f64;
                let times: Vec<f64> = (0..t).map(|i| i as f64 / denom).collect();
                let mut z = g.input(Tensor::from_vec(&[1, t, 1], times).expect("shape"));
                for (i, layer) in trunk.iter().enumerate() {
                    z = layer.forward(g, z);
                    if i + 1 < trunk.len() {
                        z = g.tanh(z);
                    }
                }
                let y = g.matmul(z, bfeat);
                let bv = g.param(*bias);
                let y = g.add(y, bv);
                g.reshape(y, &[n, t, d[0], d[1], d[2]])
            }
            Net::Fourier {
                lift,
                layers,
                proj1,
                proj2,
                basis,
            } => {
                let coords = coordinate_channels(n, d, self.spec.is_3d());
                let c = g.input(coords);
                let h = g.concat(x, c);
                let mut h = lift.forward(g, h);
                let last = layers.len() - 1;
                for (i, layer) in layers.iter().enumerate() {
                    h = layer.forward(g, h, basis, i < last);
                }
                let h = proj1.forward(g, h);
                let h = g.gelu(h);
                proj2.forward(g, h)
            }
        }
    }

    /// Bytes of non-parameter activations recorded by one forward pass at
    /// batch size one.
    pub fn activation_bytes_per_sample(&self) -> usize {
        let mut g = Graph::shape_only(&self.params);
        let d = self.spec.dims;
        let x = g.input(Tensor::meta(&[1, 1, d[0], d[1], d[2]]));
        self.forward(&mut g, x);
        g.activation_bytes()
    }
}

fn coordinate_channels(n: usize, d: [usize; 3], three_d: bool) -> Tensor {
    let nc = if three_d { 3 } else { 2 };
    let cells = d[0] * d[1] * d[2];
    let mut data = Vec::with_capacity(n * nc * cells);
    let lin = |i: usize, m: usize| if m > 1 { i as f64 / (m - 1) as f64 } else { 0.0 };
    for _ in 0..n {
        for axis in 0..nc {
            for i in 0..d[0] {
                for j in 0..d[1] {
                    for k in 0..d[2] {
                        data.push(match axis {
                            0 => lin(i, d[0]),
                            1 => lin(j, d[1]),
                            _ => lin(k, d[2]),
                        });
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, nc, d[0], d[1], d[2]], data).expect("shape")
}
