//! Deterministic synthetic activation/mask generators.
//!
//! Each sample has a rectangular foreground. Its *key* channels (the channel
//! group of its sub-concept) carry noisy `+1` (foreground) / `-1`
//! (background) copies of the mask; a sample-specific *helper* channel
//! carries a weaker copy; every other channel is noise. Samples keyed to
//! different groups form separable sub-concepts.

use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::projection::{ActivationTensor, ConceptMask};
use crate::store::{Container, ContainerWriter, LayerSpec};

#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub activation: ActivationTensor,
    pub mask: ConceptMask,
    /// Index of the sub-concept (key group) the sample was drawn from.
    pub subconcept: usize,
}

/// Normalized foreground rectangle `[y0, y1) x [x0, x1)` in `[0, 1]^2`.
#[derive(Clone, Copy, Debug)]
struct Rect {
    y0: f64,
    y1: f64,
    x0: f64,
    x1: f64,
}

impl Rect {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let hh = rng.random_range(0.3..0.7);
        let ww = rng.random_range(0.3..0.7);
        let y0 = rng.random_range(0.0..1.0 - hh);
        let x0 = rng.random_range(0.0..1.0 - ww);
        Rect {
            y0,
            y1: y0 + hh,
            x0,
            x1: x0 + ww,
        }
    }

    /// Pixel-center containment test on an `h x w` grid.
    fn contains(&self, (i, j): (usize, usize), (h, w): (usize, usize)) -> bool {
        let y = (i as f64 + 0.5) / h as f64;
        let x = (j as f64 + 0.5) / w as f64;
        y >= self.y0 && y < self.y1 && x >= self.x0 && x < self.x1
    }
}

/// Noise levels of a keyed sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseProfile {
    /// Std of the noise added to the key channels' +-1 signal.
    pub key_noise: f64,
    /// Amplitude of the helper channel's copy of the mask (0 disables).
    pub helper_amplitude: f64,
    /// Std of every non-signal channel.
    pub background_noise: f64,
    /// Std of the other sub-concepts' key channels on this sample.
    pub off_key_noise: f64,
}

impl Default for NoiseProfile {
    fn default() -> Self {
        Self {
            key_noise: 0.5,
            helper_amplitude: 0.5,
            background_noise: 1.0,
            off_key_noise: 1.0,
        }
    }
}

/// One sample of sub-concept `subconcept` of `groups`. Key channels of the
/// other groups get `off_key_noise`; one random channel outside every group
/// is the helper.
#[allow(clippy::too_many_arguments)]
pub fn keyed_sample(
    rng: &mut ChaCha8Rng,
    subconcept: usize,
    groups: &[Vec<usize>],
    channels: usize,
    act_hw: (usize, usize),
    image_hw: (usize, usize),
    noise: &NoiseProfile,
    layer_id: &str,
) -> SyntheticSample {
    let rect = Rect::random(rng);
    let own = &groups[subconcept];
    let key_channels: Vec<usize> = groups.iter().flatten().copied().collect();
    let free: Vec<usize> = (0..channels).filter(|c| !key_channels.contains(c)).collect();
    let helper = if free.is_empty() || noise.helper_amplitude == 0.0 {
        None
    } else {
        Some(free[rng.random_range(0..free.len())])
    };
    let std = |s: f64| Normal::new(0.0, s.max(0.0)).unwrap();
    let (key_n, bg_n, off_n) = (std(noise.key_noise), std(noise.background_noise), std(noise.off_key_noise));
    let data = Array3::from_shape_fn((channels, act_hw.0, act_hw.1), |(k, i, j)| {
        let sign = if rect.contains((i, j), act_hw) { 1.0 } else { -1.0 };
        let v = if own.contains(&k) {
            sign + key_n.sample(rng)
        } else if Some(k) == helper {
            noise.helper_amplitude * sign + bg_n.sample(rng) * noise.helper_amplitude
        } else if key_channels.contains(&k) {
            off_n.sample(rng)
        } else {
            bg_n.sample(rng)
        };
        v as f32
    });
    let mask = ConceptMask::from_fn(image_hw, |ij| rect.contains(ij, image_hw));
    SyntheticSample {
        activation: ActivationTensor::new(data, layer_id).expect("finite by construction"),
        mask,
        subconcept,
    }
}

/// Channel 0 is `+1 +- 0.25` on the foreground and `-1 +- 0.25` elsewhere, so
/// the mask is exactly the indicator of `channel 0 > 0.5`; the remaining
/// `n_noise` channels are standard normal.
pub fn separable_sample(seed: u64, n_noise: usize, hw: (usize, usize)) -> SyntheticSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rect = Rect::random(&mut rng);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let data = Array3::from_shape_fn((n_noise + 1, hw.0, hw.1), |(k, i, j)| {
        if k == 0 {
            let sign = if rect.contains((i, j), hw) { 1.0 } else { -1.0 };
            (sign + rng.random_range(-0.25..0.25)) as f32
        } else {
            normal.sample(&mut rng) as f32
        }
    });
    let mask = ConceptMask::from_fn(hw, |(i, j)| data[[0, i, j]] > 0.5);
    SyntheticSample {
        activation: ActivationTensor::new(data, "synthetic").unwrap(),
        mask,
        subconcept: 0,
    }
}

/// `n_groups` consecutive channel groups of `size` starting at `first`.
pub fn planted_groups(first: usize, n_groups: usize, size: usize) -> Vec<Vec<usize>> {
    (0..n_groups).map(|g| (first + g * size..first + (g + 1) * size).collect()).collect()
}

/// Samples cycling through the sub-concepts keyed to `groups`.
pub fn subconcept_samples(
    seed: u64,
    n_samples: usize,
    groups: &[Vec<usize>],
    channels: usize,
    act_hw: (usize, usize),
    image_hw: (usize, usize),
    noise: &NoiseProfile,
) -> Vec<SyntheticSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_samples)
        .map(|i| {
            keyed_sample(&mut rng, i % groups.len(), groups, channels, act_hw, image_hw, noise, "synthetic")
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub label: String,
    /// Key channel group of every sub-concept.
    pub subconcepts: Vec<Vec<usize>>,
}

/// Layout of a synthetic multi-concept container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureSpec {
    pub layer_id: String,
    pub channels: usize,
    pub act_hw: (usize, usize),
    pub image_hw: (usize, usize),
    pub samples_per_concept: usize,
    pub concepts: Vec<ConceptSpec>,
    pub noise: NoiseProfile,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            layer_id: "synthetic.layer".into(),
            channels: 24,
            act_hw: (12, 12),
            image_hw: (48, 48),
            samples_per_concept: 20,
            concepts: vec![
                ConceptSpec {
                    label: "car".into(),
                    subconcepts: planted_groups(0, 2, 4),
                },
                ConceptSpec {
                    label: "bus".into(),
                    subconcepts: planted_groups(8, 1, 4),
                },
                ConceptSpec {
                    label: "cat".into(),
                    subconcepts: planted_groups(12, 1, 4),
                },
            ],
            noise: NoiseProfile::default(),
            seed: 0,
        }
    }
}

/// Writes a synthetic container; sample ids are `<label>-<index>`.
pub fn write_fixture(root: impl AsRef<Path>, spec: &FixtureSpec) -> Result<Container> {
    let mut w = ContainerWriter::create(root)?;
    w.set_metadata(serde_json::json!({ "generator": "synthetic", "spec": spec }));
    w.add_layer(LayerSpec {
        layer_id: spec.layer_id.clone(),
        channels: spec.channels,
        height: spec.act_hw.0,
        width: spec.act_hw.1,
        tokens: None,
    });
    let groups: Vec<Vec<usize>> = spec.concepts.iter().flat_map(|c| c.subconcepts.iter().cloned()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut first_group = 0;
    for concept in &spec.concepts {
        for i in 0..spec.samples_per_concept {
            let s = keyed_sample(
                &mut rng,
                first_group + i % concept.subconcepts.len(),
                &groups,
                spec.channels,
                spec.act_hw,
                spec.image_hw,
                &spec.noise,
                &spec.layer_id,
            );
            w.add_sample(&format!("{}-{i:03}", concept.label), &concept.label, &s.activation, &s.mask)?;
        }
        first_group += concept.subconcepts.len();
    }
    w.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_mask_is_channel_threshold() {
        let s = separable_sample(1, 16, (30, 30));
        for ((i, j), &m) in s.mask.data().indexed_iter() {
            assert_eq!(m == 1, s.activation.data()[[0, i, j]] > 0.5);
        }
        assert!(!s.mask.is_empty());
    }

    #[test]
    fn fixture_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = FixtureSpec {
            samples_per_concept: 3,
            ..Default::default()
        };
        let ca = write_fixture(a.path(), &spec).unwrap();
        write_fixture(b.path(), &spec).unwrap();
        assert_eq!(ca.records().len(), 9);
        for r in ca.records() {
            let x = std::fs::read(a.path().join(&r.activation_path)).unwrap();
            let y = std::fs::read(b.path().join(&r.activation_path)).unwrap();
            assert_eq!(x, y);
        }
    }
}
