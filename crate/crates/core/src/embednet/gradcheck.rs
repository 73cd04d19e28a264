use alloc::vec::Vec;

use rand::seq::index;

use super::network::{EmbedNetwork, Target};
use crate::rng;
use crate::{Error, Result};

/// Relative error floor: gradients smaller than this are compared absolutely.
const REL_FLOOR: f64 = 1e-8;

/// Maximum relative error between backprop and central finite differences
/// over a seeded random subset of `samples` parameters (all of them if the
/// network is smaller).
pub fn gradient_check(
    net: &EmbedNetwork,
    patch: &[f64],
    context: &[f64],
    target: &Target,
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let (_, analytic) = net.loss_and_gradient(patch, context, target)?;
    let mut rng = rng::stream(seed, rng::tags::GRADCHECK);
    let n = net.param_count();
    let indices: Vec<usize> = index::sample(&mut rng, n, samples.min(n)).into_vec();
    compare_with_finite_differences(net, patch, context, target, &analytic, &indices, epsilon)
}

/// Compares a supplied gradient against central differences at `indices`.
/// The error for one parameter is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn compare_with_finite_differences(
    net: &EmbedNetwork,
    patch: &[f64],
    context: &[f64],
    target: &Target,
    analytic: &[f64],
    indices: &[usize],
    epsilon: f64,
) -> Result<f64> {
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(Error::config("gradcheck.epsilon", "must lie in [1e-6, 1e-3]"));
    }
    if analytic.len() != net.param_count() {
        return Err(Error::shape("gradient length differs from parameter count"));
    }
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for &i in indices {
        let original = probe.params()[i];
        probe.params_mut()[i] = original + epsilon;
        let up = probe.loss(patch, context, target)?;
        probe.params_mut()[i] = original - epsilon;
        let down = probe.loss(patch, context, target)?;
        probe.params_mut()[i] = original;
        let numeric = (up - down) / (2.0 * epsilon);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        worst = worst.max(err);
    }
    Ok(worst)
}
