//! The detection model: a 3D encoder-decoder with a softmax prediction head
//! at each of the finest `num_scales` decoder levels (deep supervision) and a
//! patch-classification head on the full-resolution lesion probability.

mod layers;
mod params;
mod resample;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};
use crate::losses::{self, LossWeights};

pub use layers::Feat;
use layers::{
    concat, leaky_relu, leaky_relu_backward, max_pool2, max_pool2_backward, softmax_backward,
    softmax_channels, split, Conv3d, DoubleCache, DoubleConv, Linear, UpConv2,
};
pub use params::{ParamId, ParamInfo, ParamStore};
pub use resample::rescale_to_full;

/// Class index of the lesion channel.
pub const LESION: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub num_scales: usize,
    pub num_classes: usize,
    pub patch_size: [usize; 3],
    /// Average-pooling kernel (and stride) of the classification head.
    pub pool_kernel: usize,
    pub fc_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            levels: 4,
            base_channels: 16,
            num_scales: 3,
            num_classes: 2,
            patch_size: [128; 3],
            pool_kernel: 32,
            fc_hidden: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.levels == 0 || self.base_channels == 0 || self.fc_hidden == 0 {
            return bad("levels, base_channels and fc_hidden must be positive".into());
        }
        if self.num_scales == 0 || self.num_scales > self.levels {
            return bad(format!(
                "num_scales must be in [1, levels={}], got {}",
                self.levels, self.num_scales
            ));
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2".into());
        }
        let div = 1usize << (self.levels - 1);
        if self.patch_size.iter().any(|&s| s == 0 || s % div != 0) {
            return bad(format!(
                "patch size {:?} must be divisible by 2^(levels-1) = {div}",
                self.patch_size
            ));
        }
        if self.pool_kernel == 0 || self.patch_size.iter().any(|&s| s % self.pool_kernel != 0) {
            return bad(format!(
                "patch size {:?} must be divisible by the pooling kernel {}",
                self.patch_size, self.pool_kernel
            ));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Resolution of scale `s` (0-based, finest first).
    pub fn scale_dims(&self, s: usize) -> [usize; 3] {
        self.patch_size.map(|d| d >> s)
    }

    pub fn pooled_dims(&self) -> [usize; 3] {
        self.patch_size.map(|d| d / self.pool_kernel)
    }
}

/// Multi-scale output of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionPyramid {
    /// Per-scale class probabilities at native resolution, finest first.
    pub raw: Vec<Feat>,
    /// The same predictions upsampled to the patch resolution.
    pub rescaled: Vec<Feat>,
    /// Patch-level class distribution.
    pub class_probs: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub seg: f64,
    pub cls: f64,
    pub ent: f64,
    pub total: f64,
}

/// Which auxiliary objectives contribute to the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Objectives {
    pub use_cls: bool,
    pub use_ent: bool,
}

/// One supervised patch.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub image: &'a [f32],
    pub label: &'a [u8],
    pub valid: &'a [bool],
    pub patch_class: usize,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    enc: Vec<DoubleConv>,
    up: Vec<UpConv2>,
    dec: Vec<DoubleConv>,
    heads: Vec<Conv3d>,
    fc1: Linear,
    fc2: Linear,
}

struct TrainCache {
    enc: Vec<DoubleCache>,
    pool: Vec<(Vec<u8>, [usize; 3])>,
    /// Decoder outputs per level; the last entry is the bottleneck output.
    dec_out: Vec<Feat>,
    dec: Vec<DoubleCache>,
    raw: Vec<Feat>,
    pooled: Vec<f32>,
    hidden: Vec<f32>,
    class_probs: Vec<f32>,
}

impl Model {
    /// Fresh model with seeded He initialisation.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let l = config.levels;
        let mut enc = Vec::with_capacity(l);
        for level in 0..l {
            let cin = if level == 0 { 1 } else { config.channels(level - 1) };
            enc.push(DoubleConv::new(&mut store, &mut rng, &format!("enc{level}"), cin, config.channels(level)));
        }
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for level in 0..l - 1 {
            let c = config.channels(level);
            up.push(UpConv2::new(&mut store, &mut rng, &format!("up{level}"), config.channels(level + 1), c));
            dec.push(DoubleConv::new(&mut store, &mut rng, &format!("dec{level}"), 2 * c, c));
        }
        let heads = (0..config.num_scales)
            .map(|s| Conv3d::new(&mut store, &mut rng, &format!("head{s}"), config.channels(s), config.num_classes, 1))
            .collect();
        let feats: usize = config.pooled_dims().iter().product();
        let fc1 = Linear::new(&mut store, &mut rng, "cls.fc1", feats, config.fc_hidden);
        let fc2 = Linear::new(&mut store, &mut rng, "cls.fc2", config.fc_hidden, config.num_classes);
        Ok(Model {
            config,
            params: store,
            enc,
            up,
            dec,
            heads,
            fc1,
            fc2,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.len()
    }

    fn input(&self, image: &[f32]) -> Result<Feat> {
        let n: usize = self.config.patch_size.iter().product();
        if image.len() != n {
            return Err(shape_mismatch(&self.config.patch_size, &[image.len()]));
        }
        if image.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("input contains non-finite values".into()));
        }
        Ok(Feat::from_vec(1, self.config.patch_size, image.to_vec()))
    }

    /// Decoder features for the finest `levels_needed` levels.
    fn features(&self, x: &Feat, levels_needed: usize) -> Vec<Feat> {
        let p = &self.params;
        let l = self.config.levels;
        let mut skips = Vec::with_capacity(l);
        let mut h = self.enc[0].forward(p, x);
        for level in 1..l {
            let (pooled, _) = max_pool2(&h);
            skips.push(h);
            h = self.enc[level].forward(p, &pooled);
        }
        let mut out = vec![Feat::zeros(0, [0; 3]); l];
        let mut d = h;
        for level in (0..l - 1).rev() {
            let u = self.up[level].forward(p, &d);
            let skip = skips.pop().expect("one skip per level");
            let nd = self.dec[level].forward(p, &concat(&skip, &u));
            out[level + 1] = d;
            d = nd;
        }
        out[0] = d;
        out.truncate(levels_needed);
        out
    }

    /// Full forward pass producing the prediction pyramid.
    pub fn forward(&self, image: &[f32]) -> Result<PredictionPyramid> {
        let x = self.input(image)?;
        let feats = self.features(&x, self.config.num_scales);
        let raw: Vec<Feat> = feats
            .iter()
            .zip(&self.heads)
            .map(|(f, h)| softmax_channels(&h.forward(&self.params, f)))
            .collect();
        let rescaled = raw
            .iter()
            .map(|r| rescale_to_full(r, self.config.patch_size))
            .collect::<Result<Vec<_>>>()?;
        let class_probs = self.classification_head(rescaled[0].channel(LESION))?;
        Ok(PredictionPyramid {
            raw,
            rescaled,
            class_probs,
        })
    }

    /// Full-resolution class probabilities only (`P1`), as used at inference.
    pub fn predict_full_res(&self, image: &[f32]) -> Result<Feat> {
        let x = self.input(image)?;
        let feats = self.features(&x, 1);
        Ok(softmax_channels(&self.heads[0].forward(&self.params, &feats[0])))
    }

    /// Average-pool the lesion probability with kernel = stride = `pool_kernel`.
    pub fn pool_features(&self, lesion: &[f32]) -> Result<(Vec<f32>, [usize; 3])> {
        pool_average(lesion, self.config.patch_size, self.config.pool_kernel)
    }

    /// Pooled lesion probability through two fully connected layers and softmax.
    pub fn classification_head(&self, lesion: &[f32]) -> Result<Vec<f32>> {
        let (pooled, _) = self.pool_features(lesion)?;
        let (_, _, probs) = self.cls_forward(&pooled);
        Ok(probs)
    }

    fn cls_forward(&self, pooled: &[f32]) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let mut hidden = self.fc1.forward(&self.params, pooled);
        leaky_relu(&mut hidden);
        let logits = self.fc2.forward(&self.params, &hidden);
        let logits = Feat::from_vec(logits.len(), [1, 1, 1], logits);
        let probs = softmax_channels(&logits).data;
        (pooled.to_vec(), hidden, probs)
    }

    fn forward_train(&self, x: Feat) -> Result<TrainCache> {
        let p = &self.params;
        let l = self.config.levels;
        let mut enc_caches = Vec::with_capacity(l);
        let mut pool = Vec::with_capacity(l.saturating_sub(1));
        let mut skips = Vec::with_capacity(l);
        let (mut h, c0) = self.enc[0].forward_train(p, x);
        enc_caches.push(c0);
        for level in 1..l {
            let (pooled, arg) = max_pool2(&h);
            pool.push((arg, h.dims));
            skips.push(h);
            let (nh, c) = self.enc[level].forward_train(p, pooled);
            enc_caches.push(c);
            h = nh;
        }
        let mut dec_out = vec![Feat::zeros(0, [0; 3]); l];
        let mut dec_caches: Vec<Option<DoubleCache>> = (0..l.saturating_sub(1)).map(|_| None).collect();
        let mut d = h;
        for level in (0..l - 1).rev() {
            let u = self.up[level].forward(p, &d);
            let skip = &skips[level];
            let (nd, c) = self.dec[level].forward_train(p, concat(skip, &u));
            dec_caches[level] = Some(c);
            dec_out[level + 1] = d;
            d = nd;
        }
        dec_out[0] = d;
        let raw: Vec<Feat> = (0..self.config.num_scales)
            .map(|s| softmax_channels(&self.heads[s].forward(p, &dec_out[s])))
            .collect();
        let p1 = rescale_to_full(&raw[0], self.config.patch_size)?;
        let (pooled, _) = self.pool_features(p1.channel(LESION))?;
        let (pooled, hidden, class_probs) = self.cls_forward(&pooled);
        Ok(TrainCache {
            enc: enc_caches,
            pool,
            dec_out,
            dec: dec_caches.into_iter().map(|c| c.expect("cached")).collect(),
            raw,
            pooled,
            hidden,
            class_probs,
        })
    }

    /// Loss components and the gradient of the weighted total with respect to
    /// every parameter, for one patch.
    pub fn loss_and_grad(
        &self,
        sample: Sample<'_>,
        weights: &LossWeights,
        objectives: Objectives,
    ) -> Result<(LossBreakdown, Vec<f32>)> {
        let x = self.input(sample.image)?;
        let n = x.voxels();
        if sample.label.len() != n || sample.valid.len() != n {
            return Err(shape_mismatch(&[n], &[sample.label.len()]));
        }
        let cache = self.forward_train(x)?;
        let size = self.config.patch_size;
        let c = self.config.num_classes;
        let rescaled: Vec<Feat> = cache
            .raw
            .iter()
            .map(|r| rescale_to_full(r, size))
            .collect::<Result<_>>()?;
        let as64: Vec<Vec<f64>> = rescaled
            .iter()
            .map(|f| f.data.iter().map(|&v| f64::from(v)).collect())
            .collect();
        let valid = Some(sample.valid);
        let (seg, mut dscale) = losses::seg_loss_grad(&as64, c, sample.label, valid, weights)?;

        let ent_scales = if weights.entropy_all_scales { as64.len() } else { 1 };
        let mut ent = 0.0;
        let lambda_ent = if objectives.use_ent { weights.lambda_ent } else { 0.0 };
        for (s, probs) in as64.iter().enumerate().take(ent_scales) {
            let (e, g) = losses::entropy_loss_grad(probs, c, valid)?;
            ent += e / ent_scales as f64;
            if lambda_ent > 0.0 {
                for (d, gv) in dscale[s].iter_mut().zip(g) {
                    *d += lambda_ent * gv / ent_scales as f64;
                }
            }
        }

        let cp64: Vec<f64> = cache.class_probs.iter().map(|&v| f64::from(v)).collect();
        let (cls, dcp) = losses::classification_loss_grad(&cp64, sample.patch_class)?;
        let lambda_cls = if objectives.use_cls { weights.lambda_cls } else { 0.0 };
        let effective = LossWeights {
            lambda_cls,
            lambda_ent,
            ..weights.clone()
        };
        let total = losses::total_loss(seg, cls, ent, &effective)?;

        let dp: Vec<Feat> = dscale
            .into_iter()
            .map(|g| Feat::from_vec(c, size, g.into_iter().map(|v| v as f32).collect()))
            .collect();
        let dcp: Vec<f32> = dcp.into_iter().map(|v| (v * lambda_cls) as f32).collect();
        let grads = self.backward(&cache, dp, (lambda_cls > 0.0).then_some(dcp))?;
        Ok((LossBreakdown { seg, cls, ent, total }, grads))
    }

    fn backward(&self, cache: &TrainCache, mut dp: Vec<Feat>, dcp: Option<Vec<f32>>) -> Result<Vec<f32>> {
        let p = &self.params;
        let mut grads = p.zeros_like();
        let size = self.config.patch_size;
        let l = self.config.levels;

        if let Some(dcp) = dcp {
            let probs = Feat::from_vec(dcp.len(), [1, 1, 1], cache.class_probs.clone());
            let dlogit = softmax_backward(&probs, &Feat::from_vec(dcp.len(), [1, 1, 1], dcp));
            let mut dh = self.fc2.backward(p, &cache.hidden, &dlogit.data, &mut grads);
            leaky_relu_backward(&cache.hidden, &mut dh);
            let dpool = self.fc1.backward(p, &cache.pooled, &dh, &mut grads);
            let dl = pool_average_backward(&dpool, size, self.config.pool_kernel);
            for (d, g) in dp[0].channel_mut(LESION).iter_mut().zip(dl) {
                *d += g;
            }
        }

        let mut g_dec: Vec<Option<Feat>> = (0..l).map(|_| None).collect();
        for (s, dq) in dp.iter().enumerate() {
            let draw = resample::rescale_backward(&cache.raw[s], size, dq)?;
            let dlogit = softmax_backward(&cache.raw[s], &draw);
            let df = self.heads[s]
                .backward(p, &cache.dec_out[s], &dlogit, &mut grads, true)
                .expect("input gradient");
            g_dec[s] = Some(df);
        }

        let mut g_enc: Vec<Option<Feat>> = (0..l).map(|_| None).collect();
        for level in 0..l - 1 {
            let Some(g) = g_dec[level].take() else { continue };
            let dcat = self.dec[level]
                .backward(p, &cache.dec[level], g, &mut grads, true)
                .expect("input gradient");
            let (dskip, du) = split(dcat, self.config.channels(level));
            accumulate(&mut g_enc[level], dskip);
            let dnext = self.up[level].backward(p, &cache.dec_out[level + 1], &du, &mut grads);
            accumulate(&mut g_dec[level + 1], dnext);
        }
        if let Some(g) = g_dec[l - 1].take() {
            accumulate(&mut g_enc[l - 1], g);
        }
        for level in (0..l).rev() {
            let Some(g) = g_enc[level].take() else { continue };
            let need = level > 0;
            let dx = self.enc[level].backward(p, &cache.enc[level], g, &mut grads, need);
            if let Some(dx) = dx {
                let (arg, dims) = &cache.pool[level - 1];
                accumulate(&mut g_enc[level - 1], max_pool2_backward(&dx, arg, *dims));
            }
        }
        Ok(grads)
    }
}

fn accumulate(slot: &mut Option<Feat>, g: Feat) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data.iter_mut().zip(g.data) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Non-overlapping average pooling of a single-channel grid.
pub fn pool_average(values: &[f32], dims: [usize; 3], kernel: usize) -> Result<(Vec<f32>, [usize; 3])> {
    if values.len() != dims.iter().product::<usize>() {
        return Err(shape_mismatch(&dims, &[values.len()]));
    }
    if kernel == 0 || dims.iter().any(|&d| d % kernel != 0) {
        return Err(Error::InvalidArgument(format!(
            "resolution {dims:?} is not divisible by the pooling kernel {kernel}"
        )));
    }
    let od = dims.map(|d| d / kernel);
    let mut sums = vec![0f64; od.iter().product()];
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let cell = ((i / kernel) * od[1] + j / kernel) * od[2] + k / kernel;
                sums[cell] += f64::from(values[(i * dims[1] + j) * dims[2] + k]);
            }
        }
    }
    let inv = 1.0 / (kernel * kernel * kernel) as f64;
    Ok((sums.into_iter().map(|s| (s * inv) as f32).collect(), od))
}

fn pool_average_backward(dpool: &[f32], dims: [usize; 3], kernel: usize) -> Vec<f32> {
    let od = dims.map(|d| d / kernel);
    let inv = 1.0 / (kernel * kernel * kernel) as f32;
    let mut out = vec![0f32; dims.iter().product()];
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let cell = ((i / kernel) * od[1] + j / kernel) * od[2] + k / kernel;
                out[(i * dims[1] + j) * dims[2] + k] = dpool[cell] * inv;
            }
        }
    }
    out
}
