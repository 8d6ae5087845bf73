use gansfer_nn::layers::{lrelu, pixel_norm, Conv2d, Linear};
use gansfer_nn::{Bound, Element, Graph, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dyadic_stages;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    pub base_res: usize,
    pub target_res: usize,
    pub out_channels: usize,
    /// Feature maps per stage, one entry per resolution.
    pub widths: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Block {
    conv0: Option<Conv2d>,
    conv1: Conv2d,
}

/// PGGAN-style generator. Block `i` produces `base_res * 2^i` feature maps;
/// `to_output[i]` is a 1x1 convolution with no nonlinearity after it.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Element")]
pub struct GeneratorNet<T: Element = f32> {
    pub config: GeneratorConfig,
    pub params: ParamStore<T>,
    dense: Linear,
    blocks: Vec<Block>,
    to_output: Vec<Conv2d>,
    /// Fade-in weight of the newest block.
    pub alpha: f64,
}

pub fn block_group(i: usize) -> String {
    format!("block{i}")
}

pub fn to_output_group(i: usize) -> String {
    format!("to_output{i}")
}

impl<T: Element> GeneratorNet<T> {
    /// Network at the base resolution; call [`GeneratorNet::grow`] to add stages.
    pub fn build<R: Rng>(config: GeneratorConfig, rng: &mut R) -> Result<Self> {
        let n = dyadic_stages(config.base_res, config.target_res)? + 1;
        if config.widths.len() != n {
            return Err(Error::Config(format!("{} widths for {n} stages", config.widths.len())));
        }
        let mut params = ParamStore::new();
        let (w0, b) = (config.widths[0], config.base_res);
        let dense = Linear::new(&mut params, "block0.dense", &block_group(0), config.latent_dim, w0 * b * b, 2.0 / 16.0, rng);
        let conv1 = Conv2d::new(&mut params, "block0.conv1", &block_group(0), w0, w0, 3, 2.0, rng);
        let to0 = Conv2d::new(&mut params, "to_output0", &to_output_group(0), w0, config.out_channels, 1, 1.0, rng);
        Ok(Self { config, params, dense, blocks: vec![Block { conv0: None, conv1 }], to_output: vec![to0], alpha: 1.0 })
    }

    /// Network grown all the way to the target resolution.
    pub fn build_full<R: Rng>(config: GeneratorConfig, rng: &mut R) -> Result<Self> {
        let mut g = Self::build(config, rng)?;
        while g.stage() < g.n_stages() - 1 {
            g.grow(rng)?;
        }
        g.alpha = 1.0;
        Ok(g)
    }

    pub fn n_stages(&self) -> usize {
        self.config.widths.len()
    }

    /// Index of the newest block.
    pub fn stage(&self) -> usize {
        self.blocks.len() - 1
    }

    pub fn resolution(&self) -> usize {
        self.config.base_res << self.stage()
    }

    /// Appends a block and its output layer; existing weights are untouched and alpha resets to 0.
    pub fn grow<R: Rng>(&mut self, rng: &mut R) -> Result<()> {
        let s = self.stage() + 1;
        if s >= self.n_stages() {
            return Err(Error::AlreadyAtTarget(self.resolution()));
        }
        let (wi, wo) = (self.config.widths[s - 1], self.config.widths[s]);
        let group = block_group(s);
        let conv0 = Conv2d::new(&mut self.params, &format!("block{s}.conv0"), &group, wi, wo, 3, 2.0, rng);
        let conv1 = Conv2d::new(&mut self.params, &format!("block{s}.conv1"), &group, wo, wo, 3, 2.0, rng);
        let to = Conv2d::new(&mut self.params, &format!("to_output{s}"), &to_output_group(s), wo, self.config.out_channels, 1, 1.0, rng);
        self.blocks.push(Block { conv0: Some(conv0), conv1 });
        self.to_output.push(to);
        self.alpha = 0.0;
        Ok(())
    }

    fn features(&self, g: &mut Graph<T>, p: &Bound, z: Var, upto: usize) -> Var {
        let n = g.shape(z)[0];
        let (w0, b) = (self.config.widths[0], self.config.base_res);
        let x = pixel_norm(g, z);
        let x = self.dense.forward(g, p, x);
        let x = g.reshape(x, &[n, w0, b, b]);
        let x = lrelu(g, x);
        let mut x = pixel_norm(g, x);
        for (i, block) in self.blocks[..=upto].iter().enumerate() {
            if i > 0 {
                x = g.upsample(x, 2);
            }
            if let Some(c) = &block.conv0 {
                x = c.forward(g, p, x);
                x = lrelu(g, x);
                x = pixel_norm(g, x);
            }
            x = block.conv1.forward(g, p, x);
            x = lrelu(g, x);
            x = pixel_norm(g, x);
        }
        x
    }

    /// `z: [N, latent_dim] -> [N, out_channels, res, res]`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Var {
        let s = self.stage();
        if s == 0 || self.alpha >= 1.0 {
            let f = self.features(g, p, z, s);
            return self.to_output[s].forward(g, p, f);
        }
        let prev = self.features(g, p, z, s - 1);
        let old = self.to_output[s - 1].forward(g, p, prev);
        let old = g.upsample(old, 2);
        let block = &self.blocks[s];
        let mut x = g.upsample(prev, 2);
        for c in block.conv0.iter().chain([&block.conv1]) {
            x = c.forward(g, p, x);
            x = lrelu(g, x);
            x = pixel_norm(g, x);
        }
        let new = self.to_output[s].forward(g, p, x);
        g.blend(new, old, self.alpha)
    }

    pub fn generate(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        if z.shape().len() != 2 || z.shape()[1] != self.config.latent_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.latent_dim,
                got: z.shape().get(1).copied().unwrap_or(0),
            });
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let zv = g.input(z.clone());
        let y = self.forward(&mut g, &p, zv);
        Ok(g.value(y).clone())
    }

    /// Applies the current output layer to externally supplied penultimate
    /// features `[N, width, H, W]`.
    pub fn output_layer(&self, features: &Tensor<T>) -> Tensor<T> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let x = g.input(features.clone());
        let y = self.to_output[self.stage()].forward(&mut g, &p, x);
        g.value(y).clone()
    }

    /// Group names of the output layers.
    pub fn output_groups(&self) -> Vec<String> {
        (0..self.blocks.len()).map(to_output_group).collect()
    }

    pub fn block_groups(&self) -> Vec<String> {
        (0..self.blocks.len()).map(block_group).collect()
    }
}

/// Standard-normal latent batch.
pub fn sample_latents<T: Element, R: Rng>(n: usize, dim: usize, rng: &mut R) -> Tensor<T> {
    let data = (0..n * dim).map(|_| T::of(rng.sample::<f64, _>(rand_distr::StandardNormal))).collect();
    Tensor::from_vec(&[n, dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use gansfer_nn::graph::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(base: usize, target: usize, ch: usize) -> GeneratorConfig {
        let n = dyadic_stages(base, target).unwrap() + 1;
        GeneratorConfig { latent_dim: 16, base_res: base, target_res: target, out_channels: ch, widths: vec![8; n] }
    }

    #[test]
    fn stage_counts_and_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = GeneratorNet::<f32>::build_full(GeneratorConfig { latent_dim: 256, ..cfg(4, 32, 3) }, &mut rng).unwrap();
        assert_eq!(g.n_stages(), 4);
        let z = sample_latents(2, 256, &mut rng);
        assert_eq!(g.generate(&z).unwrap().shape(), &[2, 3, 32, 32]);
        let single = GeneratorNet::<f32>::build(cfg(4, 4, 8), &mut rng).unwrap();
        assert_eq!(single.n_stages(), 1);
        let mut five = GeneratorNet::<f32>::build_full(cfg(5, 80, 8), &mut rng).unwrap();
        assert_eq!(five.n_stages(), 5);
        assert_eq!(five.resolution(), 80);
        assert!(matches!(five.grow(&mut rng), Err(Error::AlreadyAtTarget(80))));
        assert!(matches!(GeneratorNet::<f32>::build(cfg(4, 4, 8).clone_with_target(24), &mut rng), Err(Error::NonDyadic { .. })));
    }

    impl GeneratorConfig {
        fn clone_with_target(mut self, t: usize) -> Self {
            self.target_res = t;
            self
        }
    }

    #[test]
    fn deterministic_and_batch_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = GeneratorNet::<f32>::build_full(cfg(4, 16, 8), &mut rng).unwrap();
        let z = sample_latents::<f32, _>(2, 16, &mut rng);
        let a = g.generate(&z).unwrap();
        assert_eq!(a, g.generate(&z).unwrap());
        assert_eq!(a.item(1), g.generate(&z.item(1)).unwrap());
        assert!(a.is_finite());
        let bad = sample_latents::<f32, _>(1, 15, &mut rng);
        assert!(matches!(g.generate(&bad), Err(Error::DimensionMismatch { expected: 16, got: 15 })));
    }

    #[test]
    fn grow_keeps_weights_and_fades_in_from_upsampled_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = GeneratorNet::<f32>::build(cfg(4, 16, 3), &mut rng).unwrap();
        let z = sample_latents::<f32, _>(3, 16, &mut rng);
        let before = g.generate(&z).unwrap();
        let snap = g.params.snapshot();
        g.grow(&mut rng).unwrap();
        assert_eq!(g.alpha, 0.0);
        assert!(snap.changed_groups(&g.params.snapshot()).is_empty());
        let after = g.generate(&z).unwrap();
        let mut gr = Graph::new();
        let b = gr.input(before);
        let up = gr.upsample(b, 2);
        assert!(after.max_abs_diff(gr.value(up)) <= 1e-5);
        g.grow(&mut rng).unwrap();
        assert_eq!(g.resolution(), 16);
    }

    #[test]
    fn output_layer_is_a_weighted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = GeneratorNet::<f64>::build(cfg(4, 4, 8), &mut rng).unwrap();
        let width = 8;
        let to = &g.to_output[0];
        let w = &g.params.get(to.weight).value;
        let b = &g.params.get(to.bias).value;
        for f in 0..width {
            let mut feat = Tensor::<f64>::zeros(&[1, width, 1, 1]);
            feat.data_mut()[f] = 1.0;
            let out = g.output_layer(&feat);
            for c in 0..8 {
                let want = to.scale * w.data()[c * width + f] + b.data()[c];
                assert!((out.data()[c] - want).abs() < 1e-12);
            }
        }
        // Linearity: response to a combination equals the combination of responses.
        let x = Tensor::<f64>::from_f64(&[1, width, 1, 1], &[0.5, -1.0, 2.0, 0.0, 1.0, 3.0, -0.5, 0.25]);
        let zero = g.output_layer(&Tensor::zeros(&[1, width, 1, 1]));
        let out = g.output_layer(&x);
        for c in 0..8 {
            let mut want = zero.data()[c];
            for f in 0..width {
                want += x.data()[f] * to.scale * w.data()[c * width + f];
            }
            assert!((out.data()[c] - want).abs() < 1e-9);
        }
    }
}
