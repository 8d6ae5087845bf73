use gansfer_nn::layers::{lrelu, Conv2d, Linear};
use gansfer_nn::{Bound, Element, Graph, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dyadic_stages;
use crate::error::{Error, Result};

/// Anything that maps an image batch `[N, C, H, W]` to scores `[N, 1]`.
pub trait Critic<T: Element> {
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
    fn in_channels(&self) -> usize;
    fn score(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var;

    fn evaluate(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut g = Graph::new();
        let p = self.params().bind(&mut g);
        let xv = g.input(x.clone());
        let y = self.score(&mut g, &p, xv);
        g.value(y).clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub in_channels: usize,
    pub base_res: usize,
    pub target_res: usize,
    pub widths: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Block {
    conv0: Conv2d,
    conv1: Conv2d,
}

/// Mirror image of the generator: `from_input[i]` is a 1x1 convolution at
/// resolution `base_res * 2^i`, each block halves the resolution, and the head
/// maps the base-resolution features to one score.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Element")]
pub struct CriticNet<T: Element = f32> {
    pub config: CriticConfig,
    pub params: ParamStore<T>,
    from_input: Vec<Conv2d>,
    /// `blocks[i - 1]` takes stage `i` down to stage `i - 1`.
    blocks: Vec<Block>,
    head_conv: Conv2d,
    head_dense: Linear,
    head_out: Linear,
    pub alpha: f64,
}

impl<T: Element> CriticNet<T> {
    pub fn build<R: Rng>(config: CriticConfig, rng: &mut R) -> Result<Self> {
        let n = dyadic_stages(config.base_res, config.target_res)? + 1;
        if config.widths.len() != n {
            return Err(Error::Config(format!("{} widths for {n} stages", config.widths.len())));
        }
        let mut params = ParamStore::new();
        let (w0, b) = (config.widths[0], config.base_res);
        let from0 = Conv2d::new(&mut params, "from_input0", "from_input0", config.in_channels, w0, 1, 2.0, rng);
        let head_conv = Conv2d::new(&mut params, "head.conv", "head", w0, w0, 3, 2.0, rng);
        let head_dense = Linear::new(&mut params, "head.dense", "head", w0 * b * b, w0, 2.0, rng);
        let head_out = Linear::new(&mut params, "head.out", "head", w0, 1, 1.0, rng);
        Ok(Self { config, params, from_input: vec![from0], blocks: Vec::new(), head_conv, head_dense, head_out, alpha: 1.0 })
    }

    pub fn build_full<R: Rng>(config: CriticConfig, rng: &mut R) -> Result<Self> {
        let mut c = Self::build(config, rng)?;
        while c.stage() < c.config.widths.len() - 1 {
            c.grow(rng)?;
        }
        c.alpha = 1.0;
        Ok(c)
    }

    pub fn stage(&self) -> usize {
        self.blocks.len()
    }

    pub fn resolution(&self) -> usize {
        self.config.base_res << self.stage()
    }

    pub fn grow<R: Rng>(&mut self, rng: &mut R) -> Result<()> {
        let s = self.stage() + 1;
        if s >= self.config.widths.len() {
            return Err(Error::AlreadyAtTarget(self.resolution()));
        }
        let (wi, wo) = (self.config.widths[s], self.config.widths[s - 1]);
        let group = format!("block{s}");
        let from = Conv2d::new(&mut self.params, &format!("from_input{s}"), &format!("from_input{s}"), self.config.in_channels, wi, 1, 2.0, rng);
        let conv0 = Conv2d::new(&mut self.params, &format!("block{s}.conv0"), &group, wi, wi, 3, 2.0, rng);
        let conv1 = Conv2d::new(&mut self.params, &format!("block{s}.conv1"), &group, wi, wo, 3, 2.0, rng);
        self.from_input.push(from);
        self.blocks.push(Block { conv0, conv1 });
        self.alpha = 0.0;
        Ok(())
    }

    fn block(&self, g: &mut Graph<T>, p: &Bound, i: usize, x: Var) -> Var {
        let b = &self.blocks[i - 1];
        let x = b.conv0.forward(g, p, x);
        let x = lrelu(g, x);
        let x = b.conv1.forward(g, p, x);
        let x = lrelu(g, x);
        g.avg_pool(x, 2)
    }
}

impl<T: Element> Critic<T> for CriticNet<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn in_channels(&self) -> usize {
        self.config.in_channels
    }

    fn score(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let shape = g.shape(x).to_vec();
        assert_eq!(shape[1], self.config.in_channels, "critic channel count");
        assert_eq!(shape[2], self.resolution(), "critic resolution");
        let s = self.stage();
        let mut h = self.from_input[s].forward(g, p, x);
        h = lrelu(g, h);
        if s > 0 {
            h = self.block(g, p, s, h);
            if self.alpha < 1.0 {
                let down = g.avg_pool(x, 2);
                let skip = self.from_input[s - 1].forward(g, p, down);
                let skip = lrelu(g, skip);
                h = g.blend(h, skip, self.alpha);
            }
            for i in (1..s).rev() {
                h = self.block(g, p, i, h);
            }
        }
        let h = self.head_conv.forward(g, p, h);
        let h = lrelu(g, h);
        let n = shape[0];
        let h = g.reshape(h, &[n, self.head_dense.in_dim]);
        let h = self.head_dense.forward(g, p, h);
        let h = lrelu(g, h);
        self.head_out.forward(g, p, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scores_every_stage_and_keeps_weights_on_growth() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = CriticConfig { in_channels: 7, base_res: 4, target_res: 16, widths: vec![8, 8, 4] };
        let mut c = CriticNet::<f32>::build(cfg, &mut rng).unwrap();
        let x4 = Tensor::ones(&[2, 7, 4, 4]);
        assert_eq!(c.evaluate(&x4).shape(), &[2, 1]);
        let snap = c.params.snapshot();
        c.grow(&mut rng).unwrap();
        assert!(snap.changed_groups(&c.params.snapshot()).is_empty());
        // At alpha 0 the new block is bypassed: the score equals the old critic on pooled input.
        let mut before = c.clone();
        before.blocks.pop();
        before.from_input.pop();
        let x8 = Tensor::from_vec(&[2, 7, 8, 8], (0..896).map(|i| (i % 13) as f32 * 0.1).collect());
        let mut g = Graph::new();
        let xv = g.input(x8.clone());
        let pooled = g.avg_pool(xv, 2);
        let want = before.evaluate(g.value(pooled));
        assert!(c.evaluate(&x8).max_abs_diff(&want) < 1e-5);
        c.grow(&mut rng).unwrap();
        assert_eq!(c.evaluate(&Tensor::ones(&[1, 7, 16, 16])).shape(), &[1, 1]);
        assert!(matches!(c.grow(&mut rng), Err(Error::AlreadyAtTarget(16))));
    }

    #[test]
    #[should_panic(expected = "critic channel count")]
    fn rejects_wrong_channel_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = CriticConfig { in_channels: 1, base_res: 4, target_res: 4, widths: vec![4] };
        let c = CriticNet::<f32>::build(cfg, &mut rng).unwrap();
        c.evaluate(&Tensor::ones(&[1, 8, 4, 4]));
    }
}
