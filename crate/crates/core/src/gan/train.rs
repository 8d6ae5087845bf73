use std::ops::Range;

use gansfer_nn::{Adam, Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::critic::CriticNet;
use super::generator::{sample_latents, GeneratorNet};
use super::loss::{critic_loss, generator_loss, CriticLossParts};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanTrainConfig {
    /// Images shown per progressive stage; the first half fades the new block in.
    pub images_per_stage: usize,
    pub critic_updates_per_gen: usize,
    pub gp_weight: f64,
    pub drift_weight: f64,
    pub lr_generator: f64,
    pub lr_critic: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            images_per_stage: 8000,
            critic_updates_per_gen: 1,
            gp_weight: 10.0,
            drift_weight: 0.001,
            lr_generator: 1e-3,
            lr_critic: 1e-3,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl GanTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.images_per_stage == 0 || self.batch_size == 0 || self.critic_updates_per_gen == 0 {
            return Err(Error::Config("GAN counts must be positive".into()));
        }
        if self.gp_weight < 0.0 || self.drift_weight < 0.0 || self.lr_generator <= 0.0 || self.lr_critic <= 0.0 {
            return Err(Error::Config("GAN weights and learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self, lr: f64) -> gansfer_nn::AdamConfig {
        gansfer_nn::AdamConfig { lr, ..Default::default() }
    }
}

/// Real images for one critic, always at the full target resolution.
pub trait BatchSource {
    fn batch(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Tensor<f32>;
}

/// Uniform sampling with replacement from a fixed set of images.
#[derive(Clone, Debug)]
pub struct ImagePool {
    items: Vec<Vec<f32>>,
    shape: [usize; 3],
}

impl ImagePool {
    /// `items` are channel-major `[C, H, W]` images.
    pub fn new(items: Vec<Vec<f32>>, shape: [usize; 3]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptyPool("image pool"));
        }
        let n: usize = shape.iter().product();
        if items.iter().any(|i| i.len() != n) {
            return Err(Error::ShapeMismatch(format!("pool items must have {n} values")));
        }
        Ok(Self { items, shape })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn get(&self, i: usize) -> &[f32] {
        &self.items[i]
    }

    pub fn stack(&self, idx: &[usize]) -> Tensor<f32> {
        let mut data = Vec::with_capacity(idx.len() * self.items[0].len());
        for &i in idx {
            data.extend_from_slice(&self.items[i]);
        }
        let [c, h, w] = self.shape;
        Tensor::from_vec(&[idx.len(), c, h, w], data)
    }
}

impl BatchSource for ImagePool {
    fn batch(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.items.len())).collect();
        self.stack(&idx)
    }
}

/// Mean pooling of an NCHW tensor by `f`.
pub fn downsample(t: &Tensor<f32>, f: usize) -> Tensor<f32> {
    if f == 1 {
        return t.clone();
    }
    let mut g = Graph::new();
    let x = g.input(t.clone());
    let y = g.avg_pool(x, f);
    g.value(y).clone()
}

/// Real batch at the generator's current resolution. While a new block fades
/// in, the reals are blended with their coarser version by the same alpha the
/// generator uses, so the critic cannot tell stages apart by sharpness alone.
pub fn real_at_stage(real: &Tensor<f32>, res: usize, stage: usize, alpha: f64) -> Tensor<f32> {
    let fine = downsample(real, real.shape()[2] / res);
    if stage == 0 || alpha >= 1.0 {
        return fine;
    }
    let mut g = Graph::new();
    let x = g.input(fine);
    let coarse = g.avg_pool(x, 2);
    let coarse = g.upsample(coarse, 2);
    let y = g.blend(x, coarse, alpha);
    g.value(y).clone()
}

/// One critic and everything needed to train it.
pub struct Adversary<'a> {
    pub critic: &'a mut CriticNet<f32>,
    pub opt: &'a mut Adam<f32>,
    /// Generator output channels this critic sees.
    pub channels: Range<usize>,
    /// Weight of this critic's term in the generator loss.
    pub weight: f64,
    pub real: &'a mut dyn BatchSource,
    /// Critic updates before the next generator update.
    pub critic_updates: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub critic_updates: Vec<usize>,
    /// Loss of each critic's last update.
    pub critic_loss: Vec<CriticLossParts>,
    pub generator_loss: f64,
}

fn select_channels(t: &Tensor<f32>, range: &Range<usize>) -> Tensor<f32> {
    let (n, c, h, w) = t.dims4();
    if range.start == 0 && range.end == c {
        return t.clone();
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * range.len() * plane);
    for i in 0..n {
        data.extend_from_slice(&t.data()[(i * c + range.start) * plane..(i * c + range.end) * plane]);
    }
    Tensor::from_vec(&[n, range.len(), h, w], data)
}

/// Runs every adversary's critic updates, then one generator update.
///
/// All randomness (real batches, latents, interpolation weights) is drawn from
/// `rng` in a fixed order, so a step is reproducible from the RNG state.
pub fn train_step(
    gen: &mut GeneratorNet<f32>,
    gen_opt: &mut Adam<f32>,
    adversaries: &mut [Adversary<'_>],
    cfg: &GanTrainConfig,
    rng: &mut ChaCha8Rng,
) -> StepMetrics {
    let bs = cfg.batch_size;
    let res = gen.resolution();
    let latent = gen.config.latent_dim;
    let mut metrics = StepMetrics::default();
    for adv in adversaries.iter_mut() {
        let mut last = CriticLossParts::default();
        for _ in 0..adv.critic_updates {
            let real = adv.real.batch(bs, rng);
            let real = real_at_stage(&real, res, gen.stage(), gen.alpha);
            let z = sample_latents(bs, latent, rng);
            let fake = gen.generate(&z).expect("latent size is fixed by the generator");
            let fake = select_channels(&fake, &adv.channels);
            let eps: Vec<f64> = (0..bs).map(|_| rng.random::<f64>()).collect();
            let (parts, grads) = critic_loss(&*adv.critic, &real, &fake, &eps, cfg.gp_weight, cfg.drift_weight);
            adv.opt.step(&mut adv.critic.params, &grads);
            last = parts;
        }
        metrics.critic_updates.push(adv.critic_updates);
        metrics.critic_loss.push(last);
    }
    let z = sample_latents(bs, latent, rng);
    metrics.generator_loss = generator_step(gen, gen_opt, adversaries, &z);
    metrics
}

/// One generator update against the weighted sum of the adversaries' losses.
/// Adversaries with zero weight contribute nothing.
pub fn generator_step(gen: &mut GeneratorNet<f32>, gen_opt: &mut Adam<f32>, adversaries: &[Adversary<'_>], z: &Tensor<f32>) -> f64 {
    let mut g = Graph::new();
    let gp = gen.params.bind(&mut g);
    let zv = g.input(z.clone());
    let out = gen.forward(&mut g, &gp, zv);
    let mut total: Option<Var> = None;
    for adv in adversaries.iter().filter(|a| a.weight != 0.0) {
        let cp = adv.critic.params.bind(&mut g);
        let c = g.shape(out)[1];
        let x = if adv.channels.start == 0 && adv.channels.end == c {
            out
        } else {
            g.channel_slice(out, adv.channels.start, adv.channels.len())
        };
        let l = generator_loss(&*adv.critic, &mut g, &cp, x);
        let l = g.scale(l, adv.weight);
        total = Some(match total {
            Some(t) => g.add(t, l),
            None => l,
        });
    }
    let Some(total) = total else { return 0.0 };
    let ids = gen.params.trainable_ids();
    if !ids.is_empty() {
        let vars: Vec<Var> = ids.iter().map(|&id| gp.var(id)).collect();
        let grads = g.grad(total, &vars);
        let grads: Vec<_> = ids.into_iter().zip(grads.into_iter().map(|v| g.value(v).clone())).collect();
        gen_opt.step(&mut gen.params, &grads);
    }
    g.value(total).data()[0] as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gan::critic::{Critic, CriticConfig};
    use crate::gan::generator::GeneratorConfig;
    use gansfer_nn::ParamId;
    use rand::SeedableRng;

    fn nets(alpha: f64) -> (GeneratorNet<f64>, CriticNet<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gc = GeneratorConfig { latent_dim: 4, base_res: 4, target_res: 8, out_channels: 2, widths: vec![3, 3] };
        let cc = CriticConfig { in_channels: 2, base_res: 4, target_res: 8, widths: vec![3, 3] };
        let mut gen = GeneratorNet::build_full(gc, &mut rng).unwrap();
        let mut critic = CriticNet::build_full(cc, &mut rng).unwrap();
        gen.alpha = alpha;
        critic.alpha = alpha;
        (gen, critic)
    }

    fn latents() -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        sample_latents(2, 4, &mut rng)
    }

    fn gen_loss(gen: &GeneratorNet<f64>, critic: &CriticNet<f64>, z: &Tensor<f64>, ids: Option<&[ParamId]>) -> (f64, Vec<f64>) {
        let mut g = Graph::new();
        let gp = gen.params.bind(&mut g);
        let cp = critic.params.bind(&mut g);
        let zv = g.input(z.clone());
        let out = gen.forward(&mut g, &gp, zv);
        let l = generator_loss(critic, &mut g, &cp, out);
        let mut grads = Vec::new();
        if let Some(ids) = ids {
            let vars: Vec<Var> = ids.iter().map(|&i| gp.var(i)).collect();
            for v in g.grad(l, &vars) {
                grads.extend_from_slice(g.value(v).data());
            }
        }
        (g.value(l).data()[0], grads)
    }

    /// Central differences over every scalar of the listed parameters.
    fn numeric(store: &mut dyn FnMut(ParamId, usize, f64) -> f64, ids: &[ParamId], sizes: &[usize]) -> Vec<f64> {
        let h = 1e-6;
        let mut out = Vec::new();
        for (&id, &n) in ids.iter().zip(sizes) {
            for k in 0..n {
                out.push((store(id, k, h) - store(id, k, -h)) / (2.0 * h));
            }
        }
        out
    }

    fn assert_close(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            let scale = x.abs().max(y.abs()).max(1e-3);
            assert!((x - y).abs() / scale < 1e-4, "{x} vs {y}");
        }
    }

    #[test]
    fn generator_loss_gradient_matches_finite_differences() {
        for alpha in [0.3, 1.0] {
            let (gen, critic) = nets(alpha);
            let z = latents();
            let ids = gen.params.trainable_ids();
            let sizes: Vec<usize> = ids.iter().map(|&i| gen.params.get(i).value.numel()).collect();
            let (_, analytic) = gen_loss(&gen, &critic, &z, Some(&ids));
            let mut f = |id: ParamId, k: usize, h: f64| {
                let mut g2 = gen.clone();
                g2.params.value_mut(id).data_mut()[k] += h;
                gen_loss(&g2, &critic, &z, None).0
            };
            assert_close(&analytic, &numeric(&mut f, &ids, &sizes));
        }
    }

    #[test]
    fn critic_loss_gradient_matches_finite_differences() {
        for alpha in [0.3, 1.0] {
            let (gen, critic) = nets(alpha);
            let fake = gen.generate(&latents()).unwrap();
            let real = Tensor::from_vec(fake.shape(), (0..fake.numel()).map(|i| (i as f64 * 0.71).sin()).collect());
            let eps = [0.25, 0.8];
            let (_, grads) = critic_loss(&critic, &real, &fake, &eps, 10.0, 0.001);
            let ids: Vec<ParamId> = grads.iter().map(|(i, _)| *i).collect();
            let sizes: Vec<usize> = grads.iter().map(|(_, t)| t.numel()).collect();
            let analytic: Vec<f64> = grads.iter().flat_map(|(_, t)| t.data().to_vec()).collect();
            let mut f = |id: ParamId, k: usize, h: f64| {
                let mut c2 = critic.clone();
                c2.params_mut().value_mut(id).data_mut()[k] += h;
                critic_loss(&c2, &real, &fake, &eps, 10.0, 0.001).0.total
            };
            assert_close(&analytic, &numeric(&mut f, &ids, &sizes));
        }
    }
}
