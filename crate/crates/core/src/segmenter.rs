//! Patch-based 2D segmentation network with a full-resolution pathway and a
//! context pathway at one third of the resolution, trained from a mix of real
//! and synthetic slices.

use gansfer_nn::{Adam, AdamConfig, Graph, ParamStore, Tensor, Var};
use gansfer_nn::layers::Conv2d;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::{SegSlice, Source};
use crate::error::{Error, Result};
use crate::grid::{Grid2, Grid3, Image, Volume};

const SLOPE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegNetConfig {
    pub n_classes: usize,
    /// Side of the predicted patch; a multiple of `downsample`.
    pub out_patch: usize,
    /// Widths of the valid 3x3 convolutions of the full-resolution pathway.
    pub normal_widths: Vec<usize>,
    /// Widths of the valid 3x3 convolutions of the context pathway.
    pub low_widths: Vec<usize>,
    /// Widths of the 1x1 layers after the pathways merge.
    pub head_widths: Vec<usize>,
    pub downsample: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub reflection: bool,
    /// Share of patches centred on a foreground pixel.
    pub foreground_fraction: f64,
    pub seed: u64,
    /// Steps averaged into one loss-curve point.
    pub log_every: usize,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        Self {
            n_classes: 8,
            out_patch: 12,
            normal_widths: vec![16, 16, 24, 24],
            low_widths: vec![16, 16, 24, 24],
            head_widths: vec![48],
            downsample: 3,
            steps: 2000,
            batch_size: 16,
            lr: 1e-3,
            reflection: true,
            foreground_fraction: 0.5,
            seed: 0,
            log_every: 50,
        }
    }
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.downsample != 3 {
            return Err(Error::Config("the context pathway downsamples by 3".into()));
        }
        if self.out_patch == 0 || self.out_patch % self.downsample != 0 {
            return Err(Error::Config(format!("out_patch {} must be a positive multiple of 3", self.out_patch)));
        }
        if self.normal_widths.is_empty() || self.low_widths.is_empty() || self.n_classes < 2 {
            return Err(Error::Config("both pathways need layers and at least two classes".into()));
        }
        if self.steps == 0 || self.batch_size == 0 || self.log_every == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("segmenter counts and learning rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.foreground_fraction) {
            return Err(Error::Config("foreground_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Side of the full-resolution input patch.
    pub fn normal_input(&self) -> usize {
        self.out_patch + 2 * self.normal_widths.len()
    }

    /// Side of the context input patch before downsampling.
    pub fn context_input(&self) -> usize {
        (self.out_patch / self.downsample + 2 * self.low_widths.len()) * self.downsample
    }
}

/// Real-to-synthetic sampling ratio.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ratio {
    /// Real data only.
    Baseline,
    /// `r` real patches per synthetic patch.
    RealPerSynthetic(u32),
}

impl Ratio {
    pub fn synthetic_probability(self) -> f64 {
        match self {
            Ratio::Baseline => 0.0,
            Ratio::RealPerSynthetic(r) => 1.0 / (r as f64 + 1.0),
        }
    }

    pub fn label(self) -> String {
        match self {
            Ratio::Baseline => "baseline".into(),
            Ratio::RealPerSynthetic(r) => r.to_string(),
        }
    }
}

impl std::str::FromStr for Ratio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Ratio::Baseline),
            _ => match s.parse::<u32>() {
                Ok(r @ (100 | 10 | 2 | 1)) => Ok(Ratio::RealPerSynthetic(r)),
                _ => Err(Error::Config(format!("ratio must be baseline, 100, 10, 2 or 1, got {s:?}"))),
            },
        }
    }
}

/// Zero-padded square crop with top-left corner `(top, left)`.
pub fn crop_padded<T: Copy + Default>(g: &Grid2<T>, top: isize, left: isize, size: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size as isize {
        for x in 0..size as isize {
            let (yy, xx) = (top + y, left + x);
            let inside = yy >= 0 && xx >= 0 && (yy as usize) < g.h && (xx as usize) < g.w;
            out.push(if inside { *g.get(yy as usize, xx as usize) } else { T::default() });
        }
    }
    out
}

fn flip_rows<T: Copy>(v: &mut [T], size: usize) {
    for row in v.chunks_mut(size) {
        row.reverse();
    }
}

/// One training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub normal: Vec<f32>,
    pub context: Vec<f32>,
    pub labels: Vec<u8>,
    pub source: Source,
    /// Output-patch top-left corner in image coordinates.
    pub origin: (isize, isize),
    pub slice: usize,
    pub flipped: bool,
}

/// Patch geometry relative to the output patch.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    out: usize,
    normal: usize,
    context: usize,
}

impl Geometry {
    fn of(cfg: &SegNetConfig) -> Self {
        Self { out: cfg.out_patch, normal: cfg.normal_input(), context: cfg.context_input() }
    }

    fn extract(&self, s: &SegSlice, top: isize, left: isize) -> (Vec<f32>, Vec<f32>, Vec<u8>) {
        let n_off = ((self.normal - self.out) / 2) as isize;
        let c_off = ((self.context - self.out) / 2) as isize;
        (
            crop_padded(&s.mr, top - n_off, left - n_off, self.normal),
            crop_padded(&s.mr, top - c_off, left - c_off, self.context),
            crop_padded(&s.labels, top, left, self.out),
        )
    }
}

#[derive(Clone, Debug)]
pub struct MixedSampler {
    pub real: Vec<SegSlice>,
    pub synthetic: Vec<SegSlice>,
    pub ratio: Ratio,
    rng: ChaCha8Rng,
}

impl MixedSampler {
    pub fn new(real: Vec<SegSlice>, synthetic: Vec<SegSlice>, ratio: Ratio, seed: u64) -> Result<Self> {
        if real.is_empty() {
            return Err(Error::EmptyPool("real segmentation slices"));
        }
        if ratio != Ratio::Baseline && synthetic.is_empty() {
            return Err(Error::EmptyPool("synthetic segmentation slices"));
        }
        let shape = (real[0].mr.h, real[0].mr.w);
        if real.iter().chain(&synthetic).any(|s| (s.mr.h, s.mr.w) != shape || !s.mr.same_shape(&s.labels)) {
            return Err(Error::ShapeMismatch("segmentation slices differ in shape".into()));
        }
        Ok(Self { real, synthetic, ratio, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    /// Which pool the next patch comes from.
    pub fn draw_source(&mut self) -> Source {
        let p = self.ratio.synthetic_probability();
        if p > 0.0 && self.rng.random::<f64>() < p {
            Source::Synthetic
        } else {
            Source::Real
        }
    }

    pub fn sample_patch(&mut self, cfg: &SegNetConfig) -> Patch {
        let source = self.draw_source();
        let pool = match source {
            Source::Real => &self.real,
            Source::Synthetic => &self.synthetic,
        };
        let si = self.rng.random_range(0..pool.len());
        let s = &pool[si];
        let fg: Vec<usize> = if self.rng.random::<f64>() < cfg.foreground_fraction {
            s.labels.data.iter().enumerate().filter(|(_, &l)| l > 0).map(|(i, _)| i).collect()
        } else {
            Vec::new()
        };
        let centre = if fg.is_empty() { self.rng.random_range(0..s.labels.data.len()) } else { fg[self.rng.random_range(0..fg.len())] };
        let (cy, cx) = ((centre / s.labels.w) as isize, (centre % s.labels.w) as isize);
        let half = (cfg.out_patch / 2) as isize;
        let geo = Geometry::of(cfg);
        let (mut normal, mut context, mut labels) = geo.extract(s, cy - half, cx - half);
        let flipped = cfg.reflection && self.rng.random::<bool>();
        if flipped {
            flip_rows(&mut normal, geo.normal);
            flip_rows(&mut context, geo.context);
            flip_rows(&mut labels, geo.out);
        }
        Patch { normal, context, labels, source, origin: (cy - half, cx - half), slice: si, flipped }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegNet {
    pub config: SegNetConfig,
    pub params: ParamStore<f32>,
    normal: Vec<Conv2d>,
    low: Vec<Conv2d>,
    head: Vec<Conv2d>,
    out: Conv2d,
}

impl SegNet {
    pub fn build<R: Rng>(config: SegNetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let chain = |params: &mut ParamStore<f32>, prefix: &str, widths: &[usize], rng: &mut R| {
            let mut in_ch = 1;
            widths
                .iter()
                .enumerate()
                .map(|(i, &w)| {
                    let c = Conv2d::new(params, &format!("{prefix}{i}"), prefix, in_ch, w, 3, 2.0, rng).valid();
                    in_ch = w;
                    c
                })
                .collect::<Vec<_>>()
        };
        let normal = chain(&mut params, "normal", &config.normal_widths, rng);
        let low = chain(&mut params, "low", &config.low_widths, rng);
        let mut in_ch = config.normal_widths.last().unwrap() + config.low_widths.last().unwrap();
        let mut head = Vec::new();
        for (i, &w) in config.head_widths.iter().enumerate() {
            head.push(Conv2d::new(&mut params, &format!("head{i}"), "head", in_ch, w, 1, 2.0, rng));
            in_ch = w;
        }
        let out = Conv2d::new(&mut params, "classifier", "head", in_ch, config.n_classes, 1, 1.0, rng);
        Ok(Self { config, params, normal, low, head, out })
    }

    /// `normal: [N,1,Pn,Pn]`, `context: [N,1,Pc,Pc]` to logits `[N,C,P,P]`.
    pub fn forward(&self, g: &mut Graph<f32>, p: &gansfer_nn::Bound, normal: Var, context: Var) -> Var {
        let mut a = normal;
        for c in &self.normal {
            let y = c.forward(g, p, a);
            a = g.leaky_relu(y, SLOPE);
        }
        let mut b = g.avg_pool(context, self.config.downsample);
        for c in &self.low {
            let y = c.forward(g, p, b);
            b = g.leaky_relu(y, SLOPE);
        }
        let b = g.upsample(b, self.config.downsample);
        let mut h = g.concat_channels(a, b);
        for c in &self.head {
            let y = c.forward(g, p, h);
            h = g.leaky_relu(y, SLOPE);
        }
        self.out.forward(g, p, h)
    }

    fn logits(&self, normal: Tensor<f32>, context: Tensor<f32>) -> Tensor<f32> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let n = g.input(normal);
        let c = g.input(context);
        let y = self.forward(&mut g, &p, n, c);
        g.value(y).clone()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainedSegNet {
    pub net: SegNet,
    /// Mean cross-entropy per `log_every` steps.
    pub loss_curve: Vec<f64>,
    pub synthetic_draws: usize,
    pub total_draws: usize,
}

pub fn train_segnet(cfg: &SegNetConfig, sampler: &mut MixedSampler) -> Result<TrainedSegNet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = SegNet::build(cfg.clone(), &mut rng)?;
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 });
    let (pn, pc, po) = (cfg.normal_input(), cfg.context_input(), cfg.out_patch);
    let bs = cfg.batch_size;
    let mut loss_curve = Vec::new();
    let mut acc = 0.0;
    let mut synthetic_draws = 0;
    for step in 0..cfg.steps {
        let mut normal = Vec::with_capacity(bs * pn * pn);
        let mut context = Vec::with_capacity(bs * pc * pc);
        let mut labels = Vec::with_capacity(bs * po * po);
        for _ in 0..bs {
            let p = sampler.sample_patch(cfg);
            synthetic_draws += usize::from(p.source == Source::Synthetic);
            normal.extend(p.normal);
            context.extend(p.context);
            labels.extend(p.labels);
        }
        let mut g = Graph::new();
        let bound = net.params.bind(&mut g);
        let n = g.input(Tensor::from_vec(&[bs, 1, pn, pn], normal));
        let c = g.input(Tensor::from_vec(&[bs, 1, pc, pc], context));
        let logits = net.forward(&mut g, &bound, n, c);
        let loss = g.softmax_cross_entropy(logits, labels);
        let ids = net.params.trainable_ids();
        let vars: Vec<Var> = ids.iter().map(|&id| bound.var(id)).collect();
        let grads = g.grad(loss, &vars);
        let grads: Vec<_> = ids.into_iter().zip(grads.into_iter().map(|v| g.value(v).clone())).collect();
        opt.step(&mut net.params, &grads);
        acc += g.value(loss).data()[0] as f64;
        if (step + 1) % cfg.log_every == 0 {
            loss_curve.push(acc / cfg.log_every as f64);
            acc = 0.0;
        }
    }
    Ok(TrainedSegNet { net, loss_curve, synthetic_draws, total_draws: cfg.steps * bs })
}

/// Top-left corners of the output tiles along one axis.
pub fn tile_offsets(len: usize, patch: usize) -> Vec<usize> {
    (0..len).step_by(patch).collect()
}

/// Dense label map of one slice, predicted tile by tile.
pub fn segment_slice(net: &SegNet, mr: &Image) -> Grid2<u8> {
    let cfg = &net.config;
    let geo = Geometry::of(cfg);
    let empty = SegSlice { mr: mr.clone(), labels: mr.map(|_| 0u8), slice_index: 0 };
    let tiles: Vec<(usize, usize)> =
        tile_offsets(mr.h, geo.out).into_iter().flat_map(|y| tile_offsets(mr.w, geo.out).into_iter().map(move |x| (y, x))).collect();
    let mut normal = Vec::new();
    let mut context = Vec::new();
    for &(y, x) in &tiles {
        let (n, c, _) = geo.extract(&empty, y as isize, x as isize);
        normal.extend(n);
        context.extend(c);
    }
    let k = tiles.len();
    let logits = net.logits(
        Tensor::from_vec(&[k, 1, geo.normal, geo.normal], normal),
        Tensor::from_vec(&[k, 1, geo.context, geo.context], context),
    );
    let (_, nc, _, _) = logits.dims4();
    let plane = geo.out * geo.out;
    let d = logits.data();
    let mut out = mr.map(|_| 0u8);
    for (t, &(ty, tx)) in tiles.iter().enumerate() {
        for py in 0..geo.out {
            for px in 0..geo.out {
                let (y, x) = (ty + py, tx + px);
                if y >= mr.h || x >= mr.w {
                    continue;
                }
                let p = py * geo.out + px;
                let best = (0..nc).max_by(|&a, &b| d[(t * nc + a) * plane + p].total_cmp(&d[(t * nc + b) * plane + p]).then(b.cmp(&a)));
                out.set(y, x, best.unwrap_or(0) as u8);
            }
        }
    }
    out
}

/// Per-slice prediction over a volume.
pub fn segment(net: &SegNet, volume: &Volume, expected: Option<[usize; 3]>) -> Result<Grid3<u8>> {
    if let Some(shape) = expected {
        if volume.shape() != shape {
            return Err(Error::ShapeMismatch(format!("volume {:?}, model trained on {shape:?}", volume.shape())));
        }
    }
    let mut out = volume.map(|_| 0u8);
    let plane = volume.h * volume.w;
    for z in 0..volume.d {
        let s = segment_slice(net, &volume.plane(z));
        out.data[z * plane..(z + 1) * plane].copy_from_slice(&s.data);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gan::checkpoint::hash_of;

    fn slice(k: usize) -> SegSlice {
        let mr = Image::from_fn(16, 16, |y, x| if (4..10).contains(&y) && (3..9).contains(&x) { 1.0 } else { 0.2 * ((x + k) % 2) as f32 });
        let labels = mr.map(|&v| if v == 1.0 { 3 } else { 0 });
        SegSlice { mr, labels, slice_index: k }
    }

    fn quick() -> SegNetConfig {
        SegNetConfig {
            normal_widths: vec![8, 8],
            low_widths: vec![8, 8],
            head_widths: vec![16],
            steps: 300,
            batch_size: 8,
            lr: 3e-3,
            log_every: 50,
            ..Default::default()
        }
    }

    #[test]
    fn geometry() {
        let c = SegNetConfig::default();
        assert_eq!(c.normal_input(), 20);
        assert_eq!(c.context_input(), 36);
        assert_eq!(tile_offsets(32, 12), vec![0, 12, 24]);
        assert!("3".parse::<Ratio>().is_err());
        assert_eq!("100".parse::<Ratio>().unwrap(), Ratio::RealPerSynthetic(100));
    }

    #[test]
    fn sampler_ratio_one() {
        let mut s = MixedSampler::new(vec![slice(0)], vec![slice(1)], Ratio::RealPerSynthetic(1), 5).unwrap();
        let n = 30_000;
        let syn = (0..n).filter(|_| s.draw_source() == Source::Synthetic).count() as f64 / n as f64;
        assert!((syn - 0.5).abs() < 0.01, "{syn}");
        let mut b = MixedSampler::new(vec![slice(0)], vec![], Ratio::Baseline, 5).unwrap();
        assert!((0..1000).all(|_| b.draw_source() == Source::Real));
        assert!(matches!(MixedSampler::new(vec![slice(0)], vec![], Ratio::RealPerSynthetic(2), 0), Err(Error::EmptyPool(_))));
    }

    #[test]
    fn flips_are_consistent() {
        let cfg = SegNetConfig::default();
        let real = vec![slice(0), slice(1)];
        let mut s = MixedSampler::new(real.clone(), vec![], Ratio::Baseline, 9).unwrap();
        let geo = Geometry::of(&cfg);
        let mut seen = 0;
        for _ in 0..50 {
            let p = s.sample_patch(&cfg);
            let (mut n, mut c, mut l) = geo.extract(&real[p.slice], p.origin.0, p.origin.1);
            if p.flipped {
                seen += 1;
                flip_rows(&mut n, geo.normal);
                flip_rows(&mut c, geo.context);
                flip_rows(&mut l, geo.out);
            }
            assert_eq!((n, c, l), (p.normal, p.context, p.labels));
        }
        assert!(seen > 0);
    }

    #[test]
    fn overfits_one_slice_and_reruns_identically() {
        let cfg = quick();
        let train = || {
            let mut s = MixedSampler::new(vec![slice(0)], vec![], Ratio::Baseline, 1).unwrap();
            train_segnet(&cfg, &mut s).unwrap()
        };
        let a = train();
        let pred = segment_slice(&a.net, &slice(0).mr);
        let truth = slice(0).labels;
        let inter = pred.data.iter().zip(&truth.data).filter(|(&p, &t)| p == 3 && t == 3).count() as f64;
        let dsc = 2.0 * inter / (pred.data.iter().filter(|&&p| p == 3).count() + truth.data.iter().filter(|&&t| t == 3).count()) as f64;
        assert!(dsc >= 0.95, "dsc {dsc}, curve {:?}", a.loss_curve);
        assert!(pred.data.iter().all(|&v| v < 8));
        let b = train();
        assert_eq!(hash_of(&a.net.params), hash_of(&b.net.params));
    }
}
