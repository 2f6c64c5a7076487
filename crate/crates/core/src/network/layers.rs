//! Layer kernels with hand-written backward passes.
//!
//! Convolutions lower to `im2col` + SGEMM. All reductions run in a fixed
//! order, so results are bitwise reproducible for a given input.

use rand::Rng;

use super::params::{Init, ParamId, ParamStore};

const NORM_EPS: f32 = 1e-5;
pub(crate) const LEAKY_SLOPE: f32 = 0.01;

/// Dense feature map, channel-major then `[x, y, z]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Feat {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<f32>,
}

impl Feat {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Feat {
            channels,
            dims,
            data: vec![0.0; channels * dims.iter().product::<usize>()],
        }
    }

    pub fn from_vec(channels: usize, dims: [usize; 3], data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * dims.iter().product::<usize>());
        Feat { channels, dims, data }
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }
}

/// `c[m x n] = beta * c + a[m x k] * b[k x n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= (m - 1) * rsa + (k.max(1) - 1) * csa + 1 || k == 0);
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe in-bounds views of `a`, `b` and `c`
    // (checked by the debug assertions and by construction at every call site).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Lower a 3x3x3, padding-1 neighbourhood into columns: row `ci * 27 + tap`,
/// column = output voxel.
fn im2col3(x: &Feat) -> Vec<f32> {
    let [d, h, w] = x.dims;
    let n = d * h * w;
    let mut col = vec![0.0f32; x.channels * 27 * n];
    for ci in 0..x.channels {
        let src = x.channel(ci);
        for tap in 0..27 {
            let (a, b, c) = (tap / 9, (tap / 3) % 3, tap % 3);
            let row = &mut col[(ci * 27 + tap) * n..(ci * 27 + tap + 1) * n];
            for z in 0..d {
                let sz = z as isize + a as isize - 1;
                if sz < 0 || sz >= d as isize {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + b as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (sz as usize * h + sy as usize) * w;
                    let d0 = (z * h + y) * w;
                    match c {
                        0 => row[d0 + 1..d0 + w].copy_from_slice(&src[s0..s0 + w - 1]),
                        1 => row[d0..d0 + w].copy_from_slice(&src[s0..s0 + w]),
                        _ => row[d0..d0 + w - 1].copy_from_slice(&src[s0 + 1..s0 + w]),
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col3`]: scatter-add columns back onto the input grid.
fn col2im3(col: &[f32], channels: usize, dims: [usize; 3]) -> Feat {
    let [d, h, w] = dims;
    let n = d * h * w;
    let mut out = Feat::zeros(channels, dims);
    for ci in 0..channels {
        let dst = out.channel_mut(ci);
        for tap in 0..27 {
            let (a, b, c) = (tap / 9, (tap / 3) % 3, tap % 3);
            let row = &col[(ci * 27 + tap) * n..(ci * 27 + tap + 1) * n];
            for z in 0..d {
                let sz = z as isize + a as isize - 1;
                if sz < 0 || sz >= d as isize {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + b as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (sz as usize * h + sy as usize) * w;
                    let d0 = (z * h + y) * w;
                    let (dst_range, src_range) = match c {
                        0 => (s0..s0 + w - 1, d0 + 1..d0 + w),
                        1 => (s0..s0 + w, d0..d0 + w),
                        _ => (s0 + 1..s0 + w, d0..d0 + w - 1),
                    };
                    for (o, v) in dst[dst_range].iter_mut().zip(&row[src_range]) {
                        *o += v;
                    }
                }
            }
        }
    }
    out
}

/// Same-padded 3D convolution with kernel 1 or 3.
#[derive(Debug, Clone)]
pub(crate) struct Conv3d {
    w: ParamId,
    b: ParamId,
    cin: usize,
    cout: usize,
    k: usize,
}

impl Conv3d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Self {
        assert!(k == 1 || k == 3, "kernel must be 1 or 3");
        let taps = k * k * k;
        let w = store.add(
            format!("{name}.weight"),
            &[cout, cin, k, k, k],
            Init::He { fan_in: cin * taps },
            rng,
        );
        let b = store.add(format!("{name}.bias"), &[cout], Init::Zeros, rng);
        Conv3d { w, b, cin, cout, k }
    }

    fn taps(&self) -> usize {
        self.k * self.k * self.k
    }

    pub fn forward(&self, p: &ParamStore, x: &Feat) -> Feat {
        assert_eq!(x.channels, self.cin);
        let n = x.voxels();
        let rows = self.cin * self.taps();
        let mut y = Feat::zeros(self.cout, x.dims);
        let w = p.get(self.w);
        if self.k == 3 {
            let col = im2col3(x);
            gemm(self.cout, rows, n, w, (rows, 1), &col, (n, 1), 0.0, &mut y.data);
        } else {
            gemm(self.cout, rows, n, w, (rows, 1), &x.data, (n, 1), 0.0, &mut y.data);
        }
        let b = p.get(self.b);
        for (co, &bias) in b.iter().enumerate() {
            for v in y.channel_mut(co) {
                *v += bias;
            }
        }
        y
    }

    pub fn backward(
        &self,
        p: &ParamStore,
        x: &Feat,
        dy: &Feat,
        grads: &mut [f32],
        need_dx: bool,
    ) -> Option<Feat> {
        let n = x.voxels();
        let rows = self.cin * self.taps();
        let col_owned;
        let col: &[f32] = if self.k == 3 {
            col_owned = im2col3(x);
            &col_owned
        } else {
            &x.data
        };
        {
            let dw = p.slot(grads, self.w);
            gemm(self.cout, n, rows, &dy.data, (n, 1), col, (1, n), 1.0, dw);
        }
        {
            let db = p.slot(grads, self.b);
            for (co, g) in db.iter_mut().enumerate() {
                *g += dy.channel(co).iter().map(|&v| f64::from(v)).sum::<f64>() as f32;
            }
        }
        if !need_dx {
            return None;
        }
        let w = p.get(self.w);
        let mut dcol = vec![0.0f32; rows * n];
        gemm(rows, self.cout, n, w, (1, rows), &dy.data, (n, 1), 0.0, &mut dcol);
        if self.k == 3 {
            Some(col2im3(&dcol, self.cin, x.dims))
        } else {
            Some(Feat::from_vec(self.cin, x.dims, dcol))
        }
    }
}

/// Per-channel normalisation over the spatial extent with affine scale/shift.
#[derive(Debug, Clone)]
pub(crate) struct InstanceNorm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct NormCache {
    xhat: Feat,
    inv_std: Vec<f32>,
}

impl InstanceNorm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, c: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), &[c], Init::Ones, rng);
        let beta = store.add(format!("{name}.beta"), &[c], Init::Zeros, rng);
        InstanceNorm { gamma, beta }
    }

    pub fn forward(&self, p: &ParamStore, x: &Feat) -> (Feat, NormCache) {
        let n = x.voxels() as f64;
        let gamma = p.get(self.gamma);
        let beta = p.get(self.beta);
        let mut y = Feat::zeros(x.channels, x.dims);
        let mut xhat = Feat::zeros(x.channels, x.dims);
        let mut inv_std = Vec::with_capacity(x.channels);
        for c in 0..x.channels {
            let src = x.channel(c);
            let mean = src.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
            let var = src
                .iter()
                .map(|&v| {
                    let d = f64::from(v) - mean;
                    d * d
                })
                .sum::<f64>()
                / n;
            let inv = (1.0 / (var + f64::from(NORM_EPS)).sqrt()) as f32;
            let mean = mean as f32;
            inv_std.push(inv);
            let xh = xhat.channel_mut(c);
            for (o, &v) in xh.iter_mut().zip(src) {
                *o = (v - mean) * inv;
            }
            let (g, b) = (gamma[c], beta[c]);
            for (o, &v) in y.channel_mut(c).iter_mut().zip(xhat.channel(c)) {
                *o = g * v + b;
            }
        }
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward(&self, p: &ParamStore, cache: &NormCache, dy: &Feat, grads: &mut [f32]) -> Feat {
        let n = dy.voxels() as f64;
        let gamma = p.get(self.gamma).to_vec();
        let mut dx = Feat::zeros(dy.channels, dy.dims);
        let mut dgamma = vec![0f32; dy.channels];
        let mut dbeta = vec![0f32; dy.channels];
        for c in 0..dy.channels {
            let g = dy.channel(c);
            let xh = cache.xhat.channel(c);
            let sum_dy: f64 = g.iter().map(|&v| f64::from(v)).sum();
            let sum_dy_xh: f64 = g.iter().zip(xh).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
            dgamma[c] = sum_dy_xh as f32;
            dbeta[c] = sum_dy as f32;
            // d xhat = dy * gamma; dx = inv/N (N dxh - sum dxh - xh sum(dxh xh))
            let gm = f64::from(gamma[c]);
            let s1 = gm * sum_dy;
            let s2 = gm * sum_dy_xh;
            let inv = f64::from(cache.inv_std[c]);
            let scale = inv / n;
            for ((o, &gv), &x) in dx.channel_mut(c).iter_mut().zip(g).zip(xh) {
                *o = (scale * (n * gm * f64::from(gv) - s1 - f64::from(x) * s2)) as f32;
            }
        }
        for (o, v) in p.slot(grads, self.gamma).iter_mut().zip(dgamma) {
            *o += v;
        }
        for (o, v) in p.slot(grads, self.beta).iter_mut().zip(dbeta) {
            *o += v;
        }
        dx
    }
}

pub(crate) fn leaky_relu(x: &mut [f32]) {
    for v in x {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
}

/// Backward through a leaky ReLU given its output (sign is preserved).
pub(crate) fn leaky_relu_backward(out: &[f32], dy: &mut [f32]) {
    for (g, &o) in dy.iter_mut().zip(out) {
        if o < 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
}

/// Convolution, instance normalisation and leaky ReLU.
#[derive(Debug, Clone)]
pub(crate) struct ConvBlock {
    conv: Conv3d,
    norm: InstanceNorm,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockCache {
    input: Feat,
    norm: NormCache,
    out: Feat,
}

impl ConvBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, cin: usize, cout: usize) -> Self {
        ConvBlock {
            conv: Conv3d::new(store, rng, &format!("{name}.conv"), cin, cout, 3),
            norm: InstanceNorm::new(store, rng, &format!("{name}.norm"), cout),
        }
    }

    pub fn forward(&self, p: &ParamStore, x: &Feat) -> Feat {
        let (mut y, _) = self.norm.forward(p, &self.conv.forward(p, x));
        leaky_relu(&mut y.data);
        y
    }

    pub fn forward_train(&self, p: &ParamStore, x: Feat) -> (Feat, BlockCache) {
        let (mut y, norm) = self.norm.forward(p, &self.conv.forward(p, &x));
        leaky_relu(&mut y.data);
        let cache = BlockCache {
            input: x,
            norm,
            out: y.clone(),
        };
        (y, cache)
    }

    pub fn backward(
        &self,
        p: &ParamStore,
        cache: &BlockCache,
        mut dy: Feat,
        grads: &mut [f32],
        need_dx: bool,
    ) -> Option<Feat> {
        leaky_relu_backward(&cache.out.data, &mut dy.data);
        let dz = self.norm.backward(p, &cache.norm, &dy, grads);
        self.conv.backward(p, &cache.input, &dz, grads, need_dx)
    }
}

/// Two stacked [`ConvBlock`]s.
#[derive(Debug, Clone)]
pub(crate) struct DoubleConv {
    a: ConvBlock,
    b: ConvBlock,
}

#[derive(Debug, Clone)]
pub(crate) struct DoubleCache {
    a: BlockCache,
    b: BlockCache,
}

impl DoubleConv {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, cin: usize, cout: usize) -> Self {
        DoubleConv {
            a: ConvBlock::new(store, rng, &format!("{name}.0"), cin, cout),
            b: ConvBlock::new(store, rng, &format!("{name}.1"), cout, cout),
        }
    }

    pub fn forward(&self, p: &ParamStore, x: &Feat) -> Feat {
        self.b.forward(p, &self.a.forward(p, x))
    }

    pub fn forward_train(&self, p: &ParamStore, x: Feat) -> (Feat, DoubleCache) {
        let (h, a) = self.a.forward_train(p, x);
        let (y, b) = self.b.forward_train(p, h);
        (y, DoubleCache { a, b })
    }

    pub fn backward(
        &self,
        p: &ParamStore,
        cache: &DoubleCache,
        dy: Feat,
        grads: &mut [f32],
        need_dx: bool,
    ) -> Option<Feat> {
        let dh = self
            .b
            .backward(p, &cache.b, dy, grads, true)
            .expect("inner gradient requested");
        self.a.backward(p, &cache.a, dh, grads, need_dx)
    }
}

/// 2x2x2 max pooling; returns the pooled map and the winning tap per output.
pub(crate) fn max_pool2(x: &Feat) -> (Feat, Vec<u8>) {
    let [d, h, w] = x.dims;
    let od = [d / 2, h / 2, w / 2];
    let mut y = Feat::zeros(x.channels, od);
    let mut arg = vec![0u8; y.data.len()];
    let on = y.voxels();
    for c in 0..x.channels {
        let src = x.channel(c);
        for z in 0..od[0] {
            for yy in 0..od[1] {
                for xx in 0..od[2] {
                    let mut best = f32::NEG_INFINITY;
                    let mut bi = 0u8;
                    for t in 0..8u8 {
                        let (a, b, cc) = ((t >> 2) as usize, ((t >> 1) & 1) as usize, (t & 1) as usize);
                        let v = src[((2 * z + a) * h + 2 * yy + b) * w + 2 * xx + cc];
                        if v > best {
                            best = v;
                            bi = t;
                        }
                    }
                    let o = c * on + (z * od[1] + yy) * od[2] + xx;
                    y.data[o] = best;
                    arg[o] = bi;
                }
            }
        }
    }
    (y, arg)
}

pub(crate) fn max_pool2_backward(dy: &Feat, arg: &[u8], in_dims: [usize; 3]) -> Feat {
    let [_, h, w] = in_dims;
    let od = dy.dims;
    let mut dx = Feat::zeros(dy.channels, in_dims);
    let on = dy.voxels();
    for c in 0..dy.channels {
        let dst = dx.channel_mut(c);
        for z in 0..od[0] {
            for yy in 0..od[1] {
                for xx in 0..od[2] {
                    let o = c * on + (z * od[1] + yy) * od[2] + xx;
                    let t = arg[o];
                    let (a, b, cc) = ((t >> 2) as usize, ((t >> 1) & 1) as usize, (t & 1) as usize);
                    dst[((2 * z + a) * h + 2 * yy + b) * w + 2 * xx + cc] += dy.data[o];
                }
            }
        }
    }
    dx
}

/// Transposed convolution with kernel 2 and stride 2 (exact 2x upsampling).
#[derive(Debug, Clone)]
pub(crate) struct UpConv2 {
    w: ParamId,
    b: ParamId,
    cin: usize,
    cout: usize,
}

const UP_TAPS: usize = 8;

impl UpConv2 {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, cin: usize, cout: usize) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            &[cin, cout, 2, 2, 2],
            Init::He { fan_in: cin },
            rng,
        );
        let b = store.add(format!("{name}.bias"), &[cout], Init::Zeros, rng);
        UpConv2 { w, b, cin, cout }
    }

    pub fn forward(&self, p: &ParamStore, x: &Feat) -> Feat {
        let n = x.voxels();
        let rows = self.cout * UP_TAPS;
        let mut cols = vec![0.0f32; rows * n];
        // cols[(co, tap), n] = sum_ci W[ci, (co, tap)] x[ci, n]
        gemm(rows, self.cin, n, p.get(self.w), (1, rows), &x.data, (n, 1), 0.0, &mut cols);
        let [d, h, w] = x.dims;
        let od = [2 * d, 2 * h, 2 * w];
        let mut y = Feat::zeros(self.cout, od);
        let b = p.get(self.b);
        for co in 0..self.cout {
            let bias = b[co];
            let dst = y.channel_mut(co);
            for tap in 0..UP_TAPS {
                let (a, bb, c) = (tap >> 2, (tap >> 1) & 1, tap & 1);
                let row = &cols[(co * UP_TAPS + tap) * n..(co * UP_TAPS + tap + 1) * n];
                for z in 0..d {
                    for yy in 0..h {
                        for xx in 0..w {
                            dst[((2 * z + a) * od[1] + 2 * yy + bb) * od[2] + 2 * xx + c] =
                                row[(z * h + yy) * w + xx] + bias;
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward(&self, p: &ParamStore, x: &Feat, dy: &Feat, grads: &mut [f32]) -> Feat {
        let n = x.voxels();
        let rows = self.cout * UP_TAPS;
        let [d, h, w] = x.dims;
        let od = dy.dims;
        let mut dcols = vec![0.0f32; rows * n];
        let mut db = vec![0f64; self.cout];
        for co in 0..self.cout {
            let src = dy.channel(co);
            for tap in 0..UP_TAPS {
                let (a, bb, c) = (tap >> 2, (tap >> 1) & 1, tap & 1);
                let row = &mut dcols[(co * UP_TAPS + tap) * n..(co * UP_TAPS + tap + 1) * n];
                for z in 0..d {
                    for yy in 0..h {
                        for xx in 0..w {
                            row[(z * h + yy) * w + xx] =
                                src[((2 * z + a) * od[1] + 2 * yy + bb) * od[2] + 2 * xx + c];
                        }
                    }
                }
                db[co] += row.iter().map(|&v| f64::from(v)).sum::<f64>();
            }
        }
        {
            let dw = p.slot(grads, self.w);
            gemm(self.cin, n, rows, &x.data, (n, 1), &dcols, (1, n), 1.0, dw);
        }
        for (o, v) in p.slot(grads, self.b).iter_mut().zip(db) {
            *o += v as f32;
        }
        let mut dx = Feat::zeros(self.cin, x.dims);
        gemm(self.cin, rows, n, p.get(self.w), (rows, 1), &dcols, (n, 1), 0.0, &mut dx.data);
        dx
    }
}

pub(crate) fn concat(a: &Feat, b: &Feat) -> Feat {
    assert_eq!(a.dims, b.dims);
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Feat::from_vec(a.channels + b.channels, a.dims, data)
}

pub(crate) fn split(g: Feat, first: usize) -> (Feat, Feat) {
    let n = g.voxels();
    let mut data = g.data;
    let rest = data.split_off(first * n);
    (
        Feat::from_vec(first, g.dims, data),
        Feat::from_vec(g.channels - first, g.dims, rest),
    )
}

/// Channel softmax at every voxel.
pub(crate) fn softmax_channels(logits: &Feat) -> Feat {
    let n = logits.voxels();
    let c = logits.channels;
    let mut out = Feat::zeros(c, logits.dims);
    for i in 0..n {
        let mut m = f32::NEG_INFINITY;
        for k in 0..c {
            m = m.max(logits.data[k * n + i]);
        }
        let mut s = 0.0f32;
        for k in 0..c {
            let e = (logits.data[k * n + i] - m).exp();
            out.data[k * n + i] = e;
            s += e;
        }
        for k in 0..c {
            out.data[k * n + i] /= s;
        }
    }
    out
}

pub(crate) fn softmax_backward(probs: &Feat, dp: &Feat) -> Feat {
    let n = probs.voxels();
    let c = probs.channels;
    let mut dz = Feat::zeros(c, probs.dims);
    for i in 0..n {
        let dot: f32 = (0..c).map(|k| probs.data[k * n + i] * dp.data[k * n + i]).sum();
        for k in 0..c {
            dz.data[k * n + i] = probs.data[k * n + i] * (dp.data[k * n + i] - dot);
        }
    }
    dz
}

/// Fully connected layer `y = W x + b`.
#[derive(Debug, Clone)]
pub(crate) struct Linear {
    w: ParamId,
    b: ParamId,
    cin: usize,
    cout: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, cin: usize, cout: usize) -> Self {
        let w = store.add(format!("{name}.weight"), &[cout, cin], Init::He { fan_in: cin }, rng);
        let b = store.add(format!("{name}.bias"), &[cout], Init::Zeros, rng);
        Linear { w, b, cin, cout }
    }

    pub fn forward(&self, p: &ParamStore, x: &[f32]) -> Vec<f32> {
        let w = p.get(self.w);
        let b = p.get(self.b);
        (0..self.cout)
            .map(|o| {
                b[o] + w[o * self.cin..(o + 1) * self.cin]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum::<f32>()
            })
            .collect()
    }

    pub fn backward(&self, p: &ParamStore, x: &[f32], dy: &[f32], grads: &mut [f32]) -> Vec<f32> {
        {
            let dw = p.slot(grads, self.w);
            for o in 0..self.cout {
                for i in 0..self.cin {
                    dw[o * self.cin + i] += dy[o] * x[i];
                }
            }
        }
        for (g, d) in p.slot(grads, self.b).iter_mut().zip(dy) {
            *g += d;
        }
        let w = p.get(self.w);
        (0..self.cin)
            .map(|i| (0..self.cout).map(|o| w[o * self.cin + i] * dy[o]).sum())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_feat(rng: &mut ChaCha8Rng, c: usize, dims: [usize; 3]) -> Feat {
        let n = c * dims.iter().product::<usize>();
        Feat::from_vec(c, dims, (0..n).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect())
    }

    /// Direct nested-loop convolution, used as oracle.
    fn conv_ref(x: &Feat, w: &[f32], b: &[f32], cout: usize, k: usize) -> Feat {
        let [d, h, wd] = x.dims;
        let r = (k / 2) as isize;
        let mut y = Feat::zeros(cout, x.dims);
        for co in 0..cout {
            for z in 0..d {
                for yy in 0..h {
                    for xx in 0..wd {
                        let mut s = b[co] as f64;
                        for ci in 0..x.channels {
                            for a in 0..k {
                                for bb in 0..k {
                                    for c in 0..k {
                                        let (sz, sy, sx) = (
                                            z as isize + a as isize - r,
                                            yy as isize + bb as isize - r,
                                            xx as isize + c as isize - r,
                                        );
                                        if sz < 0 || sy < 0 || sx < 0 || sz >= d as isize || sy >= h as isize || sx >= wd as isize {
                                            continue;
                                        }
                                        let wi = (((co * x.channels + ci) * k + a) * k + bb) * k + c;
                                        let xi = ci * d * h * wd + ((sz as usize * h + sy as usize) * wd + sx as usize);
                                        s += w[wi] as f64 * x.data[xi] as f64;
                                    }
                                }
                            }
                        }
                        y.data[co * d * h * wd + (z * h + yy) * wd + xx] = s as f32;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in [1, 3] {
            let mut store = ParamStore::default();
            let conv = Conv3d::new(&mut store, &mut rng, "c", 3, 4, k);
            let mut vals = store.values().to_vec();
            for v in vals.iter_mut().rev().take(4) {
                *v = rng.random::<f32>();
            }
            store.load(vals).unwrap();
            let x = rand_feat(&mut rng, 3, [4, 5, 6]);
            let got = conv.forward(&store, &x);
            let n = 4 * 3 * k * k * k;
            let want = conv_ref(&x, &store.values()[..n], &store.values()[n..], 4, k);
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }

    /// Check `sum(dy * f(x))` against its analytic input/parameter gradient.
    fn check_grad(f: &dyn Fn(&ParamStore, &Feat) -> Feat, b: &dyn Fn(&ParamStore, &Feat, &Feat, &mut [f32]) -> Feat, store: &ParamStore, x: &Feat, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = f(store, x);
        let dy = rand_feat(&mut rng, y.channels, y.dims);
        let mut grads = store.zeros_like();
        let dx = b(store, x, &dy, &mut grads);
        let obj = |s: &ParamStore, xx: &Feat| -> f64 {
            f(s, xx).data.iter().zip(&dy.data).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        let eps = 1e-2f32;
        for idx in [0usize, x.data.len() / 3, x.data.len() - 1] {
            let mut xp = x.clone();
            xp.data[idx] += eps;
            let mut xm = x.clone();
            xm.data[idx] -= eps;
            let fd = (obj(store, &xp) - obj(store, &xm)) / (2.0 * eps as f64);
            assert!((fd - dx.data[idx] as f64).abs() < 2e-2 * (1.0 + fd.abs()), "dx[{idx}] fd {fd} vs {}", dx.data[idx]);
        }
        for idx in [0usize, store.len() / 2, store.len() - 1] {
            let mut sp = store.clone();
            sp.values_mut()[idx] += eps;
            let mut sm = store.clone();
            sm.values_mut()[idx] -= eps;
            let fd = (obj(&sp, x) - obj(&sm, x)) / (2.0 * eps as f64);
            assert!((fd - grads[idx] as f64).abs() < 2e-2 * (1.0 + fd.abs()), "dp[{idx}] fd {fd} vs {}", grads[idx]);
        }
    }

    #[test]
    fn conv_block_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::default();
        let block = ConvBlock::new(&mut store, &mut rng, "b", 2, 3);
        let x = rand_feat(&mut rng, 2, [4, 4, 4]);
        check_grad(
            &|s, x| block.forward(s, x),
            &|s, x, dy, g| {
                let (_, cache) = block.forward_train(s, x.clone());
                block.backward(s, &cache, dy.clone(), g, true).unwrap()
            },
            &store,
            &x,
            3,
        );
    }

    #[test]
    fn upconv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::default();
        let up = UpConv2::new(&mut store, &mut rng, "u", 3, 2);
        let x = rand_feat(&mut rng, 3, [2, 3, 2]);
        check_grad(&|s, x| up.forward(s, x), &|s, x, dy, g| up.backward(s, x, dy, g), &store, &x, 5);
    }

    #[test]
    fn pool_routes_gradient_to_max() {
        let x = Feat::from_vec(1, [2, 2, 2], vec![0.1, 0.9, 0.3, 0.2, 0.5, 0.4, 0.0, 0.8]);
        let (y, arg) = max_pool2(&x);
        assert_eq!(y.data, vec![0.9]);
        let dx = max_pool2_backward(&Feat::from_vec(1, [1, 1, 1], vec![2.0]), &arg, [2, 2, 2]);
        assert_eq!(dx.data, vec![0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_sums_to_one_and_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = rand_feat(&mut rng, 2, [3, 3, 3]);
        let p = softmax_channels(&z);
        for i in 0..27 {
            assert!((p.data[i] + p.data[27 + i] - 1.0).abs() < 1e-6);
        }
        let dp = rand_feat(&mut rng, 2, [3, 3, 3]);
        let dz = softmax_backward(&p, &dp);
        let obj = |z: &Feat| -> f64 { softmax_channels(z).data.iter().zip(&dp.data).map(|(a, b)| *a as f64 * *b as f64).sum() };
        let mut zp = z.clone();
        zp.data[5] += 1e-3;
        let mut zm = z.clone();
        zm.data[5] -= 1e-3;
        let fd = (obj(&zp) - obj(&zm)) / 2e-3;
        assert!((fd - dz.data[5] as f64).abs() < 1e-3);
    }
}
