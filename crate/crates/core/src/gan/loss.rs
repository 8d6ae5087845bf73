use gansfer_nn::{Element, Graph, ParamId, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::critic::Critic;

/// Added under the square root of the gradient norm so the penalty stays
/// differentiable when a critic is locally flat.
pub const GP_NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CriticLossParts {
    pub total: f64,
    /// `E[D(fake)] - E[D(real)]`.
    pub wasserstein: f64,
    pub gradient_penalty: f64,
    pub drift: f64,
}

/// `x_hat_i = eps_i * real_i + (1 - eps_i) * fake_i`.
pub fn interpolate<T: Element>(real: &Tensor<T>, fake: &Tensor<T>, eps: &[f64]) -> Tensor<T> {
    assert_eq!(real.shape(), fake.shape(), "real and fake batches differ in shape");
    let n = real.shape()[0];
    assert_eq!(eps.len(), n);
    let per = real.numel() / n;
    let data = real
        .data()
        .iter()
        .zip(fake.data())
        .enumerate()
        .map(|(i, (&r, &f))| {
            let e = T::of(eps[i / per]);
            e * r + (T::one() - e) * f
        })
        .collect();
    Tensor::from_vec(real.shape(), data)
}

/// Builds the WGAN-GP critic loss on `g` and returns it with its parts.
#[allow(clippy::too_many_arguments)]
pub fn critic_loss_graph<T: Element, C: Critic<T> + ?Sized>(
    critic: &C,
    g: &mut Graph<T>,
    p: &gansfer_nn::Bound,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    eps: &[f64],
    gp_weight: f64,
    drift_weight: f64,
) -> (Var, [Var; 4]) {
    let x_hat = interpolate(real, fake, eps);
    let real = g.input(real.clone());
    let fake = g.input(fake.clone());
    let x_hat = g.input(x_hat);
    let d_real = critic.score(g, p, real);
    let d_fake = critic.score(g, p, fake);
    let m_real = g.mean(d_real);
    let m_fake = g.mean(d_fake);
    let wasserstein = g.sub(m_fake, m_real);

    let d_hat = critic.score(g, p, x_hat);
    let s = g.sum(d_hat);
    let gx = g.grad(s, &[x_hat])[0];
    let sq = g.square(gx);
    let per = g.sum_per_sample(sq);
    let per = g.add_scalar(per, GP_NORM_EPS);
    let norm = g.powf(per, 0.5);
    let dev = g.add_scalar(norm, -1.0);
    let dev2 = g.square(dev);
    let gp = g.mean(dev2);

    let r2 = g.square(d_real);
    let drift = g.mean(r2);

    let a = g.scale(gp, gp_weight);
    let b = g.scale(drift, drift_weight);
    let total = g.add(wasserstein, a);
    let total = g.add(total, b);
    (total, [total, wasserstein, gp, drift])
}

/// Critic loss value and its gradients for every trainable critic parameter.
pub fn critic_loss<T: Element, C: Critic<T> + ?Sized>(
    critic: &C,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    eps: &[f64],
    gp_weight: f64,
    drift_weight: f64,
) -> (CriticLossParts, Vec<(ParamId, Tensor<T>)>) {
    let mut g = Graph::new();
    let p = critic.params().bind(&mut g);
    let (total, parts) = critic_loss_graph(critic, &mut g, &p, real, fake, eps, gp_weight, drift_weight);
    let ids = critic.params().trainable_ids();
    let vars: Vec<Var> = ids.iter().map(|&id| p.var(id)).collect();
    let grads = g.grad(total, &vars);
    let value = |v: Var| g.value(v).data()[0].as_f64();
    let parts = CriticLossParts {
        total: value(parts[0]),
        wasserstein: value(parts[1]),
        gradient_penalty: value(parts[2]),
        drift: value(parts[3]),
    };
    (parts, ids.into_iter().zip(grads.into_iter().map(|v| g.value(v).clone())).collect())
}

/// `-E[D(x)]` for a generated batch `x` already on the graph.
pub fn generator_loss<T: Element, C: Critic<T> + ?Sized>(
    critic: &C,
    g: &mut Graph<T>,
    p: &gansfer_nn::Bound,
    x: Var,
) -> Var {
    let d = critic.score(g, p, x);
    let m = g.mean(d);
    g.scale(m, -1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gan::critic::{CriticConfig, CriticNet};
    use gansfer_nn::{Bound, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Zero {
        params: ParamStore<f64>,
    }

    impl Critic<f64> for Zero {
        fn params(&self) -> &ParamStore<f64> {
            &self.params
        }
        fn params_mut(&mut self) -> &mut ParamStore<f64> {
            &mut self.params
        }
        fn in_channels(&self) -> usize {
            1
        }
        fn score(&self, g: &mut Graph<f64>, _p: &Bound, x: Var) -> Var {
            let n = g.shape(x)[0];
            g.input(Tensor::zeros(&[n, 1]))
        }
    }

    #[test]
    fn constant_critic_costs_only_the_penalty() {
        let c = Zero { params: ParamStore::new() };
        let real = Tensor::<f64>::ones(&[3, 1, 2, 2]);
        let fake = Tensor::<f64>::zeros(&[3, 1, 2, 2]);
        let (parts, _) = critic_loss(&c, &real, &fake, &[0.1, 0.5, 0.9], 10.0, 0.001);
        assert_eq!(parts.wasserstein, 0.0);
        assert_eq!(parts.drift, 0.0);
        assert!((parts.total - 10.0).abs() < 1e-4, "{}", parts.total);
    }

    #[test]
    fn identical_batches_have_zero_wasserstein_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = CriticConfig { in_channels: 2, base_res: 4, target_res: 4, widths: vec![4] };
        let c = CriticNet::<f64>::build(cfg, &mut rng).unwrap();
        let x = Tensor::<f64>::from_vec(&[2, 2, 4, 4], (0..64).map(|i| (i as f64 * 0.37).sin()).collect());
        let (parts, _) = critic_loss(&c, &x, &x, &[0.3, 0.6], 10.0, 0.001);
        assert_eq!(parts.wasserstein, 0.0);
    }
}
