//! Progressive-growing generator and critic, WGAN-GP losses and the
//! single-step training primitive shared by all GAN phases.

pub mod checkpoint;
pub mod critic;
pub mod generator;
pub mod loss;
pub mod train;

use gansfer_nn::{Element, ParamStore};

use crate::error::{Error, Result};

pub use critic::{Critic, CriticConfig, CriticNet};
pub use generator::{GeneratorConfig, GeneratorNet};
pub use loss::{critic_loss, generator_loss, CriticLossParts};
pub use train::{train_step, Adversary, BatchSource, GanTrainConfig, StepMetrics};

/// Number of doublings from `base` to `target`.
pub fn dyadic_stages(base: usize, target: usize) -> Result<usize> {
    if base == 0 || target < base || target % base != 0 || !(target / base).is_power_of_two() {
        return Err(Error::NonDyadic { base, target });
    }
    Ok((target / base).trailing_zeros() as usize)
}

/// Groups matched by `selector`: an exact group name, a prefix ending in `*`,
/// or `*` alone for every group.
pub fn resolve_selector<T: Element>(store: &ParamStore<T>, selector: &str) -> Result<Vec<String>> {
    let groups = store.groups();
    let matched: Vec<String> = match selector.strip_suffix('*') {
        Some(prefix) => groups.into_iter().filter(|g| g.starts_with(prefix)).collect(),
        None => groups.into_iter().filter(|g| g == selector).collect(),
    };
    if matched.is_empty() {
        return Err(Error::UnknownLayer(selector.to_string()));
    }
    Ok(matched)
}

/// Sets every group matched by `selector` (un)trainable.
pub fn set_trainable<T: Element>(store: &mut ParamStore<T>, selector: &str, trainable: bool) -> Result<Vec<String>> {
    let groups = resolve_selector(store, selector)?;
    for g in &groups {
        store.set_group_trainable(g, trainable);
    }
    Ok(groups)
}

/// Per-stage feature widths: `max_width` halving from the first stage that
/// reaches `halve_from` resolution, never below `min_width`.
pub fn stage_widths(n_stages: usize, base_res: usize, max_width: usize, min_width: usize, halve_from: usize) -> Vec<usize> {
    (0..n_stages)
        .map(|s| {
            let res = base_res << s;
            let mut w = max_width;
            let mut r = halve_from;
            while r <= res && w / 2 >= min_width {
                w /= 2;
                r *= 2;
            }
            w
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dyadic_checks() {
        assert_eq!(dyadic_stages(4, 32).unwrap(), 3);
        assert_eq!(dyadic_stages(4, 4).unwrap(), 0);
        assert_eq!(dyadic_stages(5, 80).unwrap(), 4);
        assert!(matches!(dyadic_stages(4, 24), Err(Error::NonDyadic { .. })));
        assert!(matches!(dyadic_stages(8, 4), Err(Error::NonDyadic { .. })));
    }

    #[test]
    fn widths_halve() {
        assert_eq!(stage_widths(4, 4, 32, 8, 16), vec![32, 32, 16, 8]);
        assert_eq!(stage_widths(2, 4, 8, 8, 16), vec![8, 8]);
    }
}
