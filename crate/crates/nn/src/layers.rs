//! Layers with equalized learning rate: weights are stored as N(0, 1) and
//! scaled by `sqrt(gain / fan_in)` at every forward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamId, ParamStore};

pub const LRELU_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub pad: usize,
    pub scale: f64,
}

impl Conv2d {
    /// "Same" padding for odd kernels.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        group: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_normal(format!("{name}.weight"), group, &[out_ch, in_ch, kernel, kernel], rng);
        let bias = store.add_zeros(format!("{name}.bias"), group, &[out_ch]);
        let fan_in = (in_ch * kernel * kernel) as f64;
        Self { weight, bias, in_ch, out_ch, kernel, pad: kernel / 2, scale: (gain / fan_in).sqrt() }
    }

    /// Same layer without padding, so each side shrinks by `kernel / 2`.
    pub fn valid(mut self) -> Self {
        self.pad = 0;
        self
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let w = g.scale(p.var(self.weight), self.scale);
        let y = g.conv2d(x, w, self.pad);
        g.add_bias(y, p.var(self.bias))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub scale: f64,
}

impl Linear {
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        group: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_normal(format!("{name}.weight"), group, &[in_dim, out_dim], rng);
        let bias = store.add_zeros(format!("{name}.bias"), group, &[out_dim]);
        Self { weight, bias, in_dim, out_dim, scale: (gain / in_dim as f64).sqrt() }
    }

    /// `x: [N, in_dim] -> [N, out_dim]`.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let w = g.scale(p.var(self.weight), self.scale);
        let y = g.matmul(x, w);
        g.add_bias(y, p.var(self.bias))
    }
}

/// Per-pixel feature normalisation across channels.
pub fn pixel_norm<T: Element>(g: &mut Graph<T>, x: Var) -> Var {
    let c = g.shape(x)[1];
    let sq = g.square(x);
    let s = g.sum_channels(sq);
    let m = g.scale(s, 1.0 / c as f64);
    let m = g.add_scalar(m, 1e-8);
    let inv = g.powf(m, -0.5);
    let inv = g.expand_channels(inv, c);
    g.mul(x, inv)
}

pub fn lrelu<T: Element>(g: &mut Graph<T>, x: Var) -> Var {
    g.leaky_relu(x, LRELU_SLOPE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pixel_norm_gives_unit_mean_square() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_f64(&[1, 2, 1, 2], &[3.0, 1.0, 4.0, -1.0]));
        let y = pixel_norm(&mut g, x);
        let d = g.value(y).data();
        for p in 0..2 {
            let ms = (d[p] * d[p] + d[2 + p] * d[2 + p]) / 2.0;
            assert!((ms - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_keeps_spatial_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f32>::new();
        let conv = Conv2d::new(&mut store, "c", "c", 2, 5, 3, 2.0, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.input(Tensor::ones(&[3, 2, 6, 7]));
        let y = conv.forward(&mut g, &p, x);
        assert_eq!(g.shape(y), &[3, 5, 6, 7]);
    }
}
