//! Seeded synthetic activations and weights.

use rand::Rng;

use super::{ConvLayerSpec, FilterSet, NetworkSpec, Tensor3D};
use crate::fxp::{Fx16, FX_FRAC_BITS};

fn random_words(rng: &mut impl Rng, n: usize, magnitude: f64) -> Vec<Fx16> {
    let limit = ((magnitude * (1u32 << FX_FRAC_BITS) as f64) as i32).clamp(1, i16::MAX as i32);
    (0..n)
        .map(|_| Fx16::from_bits(rng.gen_range(-limit..=limit) as i16))
        .collect()
}

/// Tensor with entries uniform over the Q8.8 grid in `[-magnitude, magnitude]`.
pub fn random_tensor(rng: &mut impl Rng, c: usize, h: usize, w: usize, magnitude: f64) -> Tensor3D {
    Tensor3D::from_vec(c, h, w, random_words(rng, c * h * w, magnitude)).expect("sized")
}

pub fn random_filters(rng: &mut impl Rng, l: &ConvLayerSpec, magnitude: f64) -> FilterSet {
    let mut f = FilterSet::for_layer(l);
    f.weights = random_words(rng, f.weights.len(), magnitude);
    if l.has_bias {
        f.biases = random_words(rng, f.m, magnitude);
    }
    f
}

/// Weights for every layer, scaled so activations stay well inside Q8.8
/// through a deep stack: each layer's weights shrink with its fan-in.
pub fn random_network_filters(rng: &mut impl Rng, net: &NetworkSpec) -> Vec<FilterSet> {
    net.layers
        .iter()
        .map(|l| {
            let fan_in = (l.channels_per_group() * l.kernel * l.kernel) as f64;
            random_filters(rng, l, (2.0 / fan_in.sqrt()).max(1.0 / 64.0))
        })
        .collect()
}
