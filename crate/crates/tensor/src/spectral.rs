use std::f64::consts::PI;

/// Truncated DFT matrices for one spatial axis.
#[derive(Clone, Debug)]
pub(crate) struct AxisBasis {
    pub n: usize,
    pub modes: Vec<usize>,
    // [K, n] forward, [n, K] inverse (with 1/n), and their conjugate transposes
    pub fwd: (Vec<f64>, Vec<f64>),
    pub inv: (Vec<f64>, Vec<f64>),
    pub fwd_adj: (Vec<f64>, Vec<f64>),
    pub inv_adj: (Vec<f64>, Vec<f64>),
}

impl AxisBasis {
    fn new(n: usize, m: usize) -> Self {
        let mut modes: Vec<usize> = (0..m.min(n)).collect();
        for k in n.saturating_sub(m)..n {
            if !modes.contains(&k) {
                modes.push(k);
            }
        }
        modes.sort_unstable();
        let kk = modes.len();
        let mut fr = vec![0.0; kk * n];
        let mut fi = vec![0.0; kk * n];
        let mut ir = vec![0.0; n * kk];
        let mut ii = vec![0.0; n * kk];
        for (r, &k) in modes.iter().enumerate() {
            for x in 0..n {
                let ang = 2.0 * PI * ((k * x) % n) as f64 / n as f64;
                fr[r * n + x] = ang.cos();
                fi[r * n + x] = -ang.sin();
                ir[x * kk + r] = ang.cos() / n as f64;
                ii[x * kk + r] = ang.sin() / n as f64;
            }
        }
        let adj = |re: &[f64], im: &[f64], rows: usize, cols: usize| {
            let mut ar = vec![0.0; rows * cols];
            let mut ai = vec![0.0; rows * cols];
            for i in 0..rows {
                for j in 0..cols {
                    ar[j * rows + i] = re[i * cols + j];
                    ai[j * rows + i] = -im[i * cols + j];
                }
            }
            (ar, ai)
        };
        let fwd_adj = adj(&fr, &fi, kk, n);
        let inv_adj = adj(&ir, &ii, n, kk);
        Self {
            n,
            modes,
            fwd: (fr, fi),
            inv: (ir, ii),
            fwd_adj,
            inv_adj,
        }
    }

    pub fn k(&self) -> usize {
        self.modes.len()
    }
}

/// Retained Fourier modes for a three-axis spectral convolution.
///
/// Along an axis of length `n` with `m` requested modes the retained set is
/// `{0, .., m-1} ∪ {n-m, .., n-1}`, so low positive and negative frequencies
/// are both kept.
#[derive(Clone, Debug)]
pub struct SpectralBasis {
    pub(crate) axes: [AxisBasis; 3],
}

impl SpectralBasis {
    pub fn new(dims: [usize; 3], modes: [usize; 3]) -> Self {
        Self {
            axes: [
                AxisBasis::new(dims[0], modes[0]),
                AxisBasis::new(dims[1], modes[1]),
                AxisBasis::new(dims[2], modes[2]),
            ],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.axes[0].n, self.axes[1].n, self.axes[2].n]
    }

    /// Number of retained modes per axis.
    pub fn mode_counts(&self) -> [usize; 3] {
        [self.axes[0].k(), self.axes[1].k(), self.axes[2].k()]
    }

    pub fn modes(&self, axis: usize) -> &[usize] {
        &self.axes[axis].modes
    }
}

/// Complex `out[a, k, b] = sum_l m[k, l] * in[a, l, b]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn axis_apply(
    re: &[f64],
    im: &[f64],
    a: usize,
    l: usize,
    b: usize,
    m: &(Vec<f64>, Vec<f64>),
    k: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut or = vec![0.0; a * k * b];
    let mut oi = vec![0.0; a * k * b];
    let (mr, mi) = m;
    for ia in 0..a {
        for ik in 0..k {
            let ob = (ia * k + ik) * b;
            for il in 0..l {
                let wr = mr[ik * l + il];
                let wi = mi[ik * l + il];
                let ib = (ia * l + il) * b;
                let (src_r, src_i) = (&re[ib..ib + b], &im[ib..ib + b]);
                let (dr, di) = (&mut or[ob..ob + b], &mut oi[ob..ob + b]);
                for j in 0..b {
                    dr[j] += wr * src_r[j] - wi * src_i[j];
                    di[j] += wr * src_i[j] + wi * src_r[j];
                }
            }
        }
    }
    (or, oi)
}

/// Which matrix of each axis to apply.
#[derive(Clone, Copy)]
pub(crate) enum Pass {
    Forward,
    Inverse,
    ForwardAdjoint,
    InverseAdjoint,
}

/// Applies the selected per-axis matrix along all three spatial axes of
/// `batch` blocks laid out `[batch, d0, d1, d2]`.
pub(crate) fn transform3(
    basis: &SpectralBasis,
    re: Vec<f64>,
    im: Vec<f64>,
    batch: usize,
    pass: Pass,
) -> (Vec<f64>, Vec<f64>) {
    let sizes = |ax: &AxisBasis| match pass {
        Pass::Forward | Pass::InverseAdjoint => (ax.n, ax.k()),
        Pass::Inverse | Pass::ForwardAdjoint => (ax.k(), ax.n),
    };
    fn mat(ax: &AxisBasis, pass: Pass) -> &(Vec<f64>, Vec<f64>) {
        match pass {
        Pass::Forward => &ax.fwd,
        Pass::Inverse => &ax.inv,
        Pass::ForwardAdjoint => &ax.fwd_adj,
        Pass::InverseAdjoint => &ax.inv_adj,
        }
    }
    let mut cur = [0usize; 3];
    for (d, ax) in basis.axes.iter().enumerate() {
        cur[d] = sizes(ax).0;
    }
    let (mut re, mut im) = (re, im);
    for d in 0..3 {
        let ax = &basis.axes[d];
        let (l, k) = sizes(ax);
        let a = batch * cur[..d].iter().product::<usize>();
        let b = cur[d + 1..].iter().product::<usize>();
        let out = axis_apply(&re, &im, a, l, b, mat(ax, pass), k);
        re = out.0;
        im = out.1;
        cur[d] = k;
    }
    (re, im)
}
