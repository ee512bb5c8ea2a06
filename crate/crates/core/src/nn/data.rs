//! Procedural "textured patch" images.
//!
//! Each class owns a fixed texture prototype (orientation, frequency, colour) derived from the
//! recipe alone, so datasets generated from different seeds share one labelling function.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tape::Tensor;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataRecipe {
    pub id: String,
    pub resolution: usize,
    pub channels: usize,
    pub num_classes: usize,
    /// Pixel noise standard deviation.
    pub noise: f64,
    /// Texture amplitude relative to the background.
    pub contrast: f64,
    /// Side of the textured square patch.
    pub patch: usize,
}

impl Default for DataRecipe {
    fn default() -> Self {
        DataRecipe { id: "textured-patch-v1".into(), resolution: 16, channels: 3, num_classes: 8, noise: 0.6, contrast: 1.0, patch: 10 }
    }
}

#[derive(Debug, Clone, Copy)]
struct Prototype {
    angle: f64,
    frequency: f64,
    colour: [f64; 3],
}

impl DataRecipe {
    fn prototypes(&self) -> Vec<Prototype> {
        let mut rng = seed::rng(0, &format!("data/prototypes/{}", self.id));
        let orientations = self.num_classes.div_ceil(2).max(1);
        (0..self.num_classes)
            .map(|c| {
                let angle = PI * (c % orientations) as f64 / orientations as f64;
                let frequency = if c / orientations == 0 { 0.12 } else { 0.27 };
                let mut colour = [0.0; 3];
                for v in &mut colour {
                    *v = rng.random_range(0.3..1.0);
                }
                Prototype { angle, frequency, colour }
            })
            .collect()
    }

    fn render(&self, proto: &Prototype, rng: &mut seed::Rng, out: &mut [f64]) {
        let (r, ch) = (self.resolution, self.channels);
        let noise = Normal::new(0.0, self.noise.max(1e-12)).expect("finite noise");
        let angle = proto.angle + rng.random_range(-0.15..0.15);
        let freq = proto.frequency * rng.random_range(0.85..1.15);
        let phase = rng.random_range(0.0..2.0 * PI);
        let p = self.patch.min(r);
        let (oy, ox) = (rng.random_range(0..=r - p), rng.random_range(0..=r - p));
        let shift: Vec<f64> = (0..ch).map(|_| rng.random_range(-0.3..0.3)).collect();
        let (ca, sa) = (angle.cos(), angle.sin());
        for y in 0..r {
            for x in 0..r {
                let inside = y >= oy && y < oy + p && x >= ox && x < ox + p;
                let wave = if inside { (2.0 * PI * freq * (x as f64 * ca + y as f64 * sa) + phase).sin() } else { 0.0 };
                for c in 0..ch {
                    let colour = proto.colour[c % 3];
                    out[(y * r + x) * ch + c] = self.contrast * colour * wave + shift[c] + noise.sample(rng);
                }
            }
        }
    }
}

/// Inputs `[N, H, W, C]` with one class index per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Split {
        Split { inputs: self.inputs.gather_rows(idx), labels: idx.iter().map(|&i| self.labels[i]).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub recipe: DataRecipe,
    pub seed: u64,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

fn balanced_split(recipe: &DataRecipe, protos: &[Prototype], n: usize, rng: &mut seed::Rng) -> Split {
    let mut labels: Vec<usize> = (0..n).map(|i| i % recipe.num_classes).collect();
    labels.shuffle(rng);
    let per = recipe.resolution * recipe.resolution * recipe.channels;
    let mut data = vec![0.0; n * per];
    for (i, &y) in labels.iter().enumerate() {
        recipe.render(&protos[y], rng, &mut data[i * per..(i + 1) * per]);
    }
    let inputs = Tensor { shape: vec![n, recipe.resolution, recipe.resolution, recipe.channels], data };
    Split { inputs, labels }
}

/// Regenerates bit-identically from `(recipe, seed, sizes)`.
pub fn generate(recipe: &DataRecipe, seed: u64, sizes: SplitSizes) -> SyntheticDataset {
    let protos = recipe.prototypes();
    let mut rng = seed::rng(seed, &format!("data/{}", recipe.id));
    let train = balanced_split(recipe, &protos, sizes.train, &mut rng);
    let val = balanced_split(recipe, &protos, sizes.val, &mut rng);
    let test = balanced_split(recipe, &protos, sizes.test, &mut rng);
    SyntheticDataset { recipe: recipe.clone(), seed, train, val, test }
}

/// A single unlabelled-looking pool (labels kept for evaluation only), e.g. attacker data.
pub fn generate_pool(recipe: &DataRecipe, seed: u64, n: usize) -> Split {
    let protos = recipe.prototypes();
    let mut rng = seed::rng(seed, &format!("data/pool/{}", recipe.id));
    balanced_split(recipe, &protos, n, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SIZES: SplitSizes = SplitSizes { train: 37, val: 11, test: 9 };

    #[test]
    fn regeneration_is_bit_identical() {
        let r = DataRecipe::default();
        assert_eq!(generate(&r, 4, SIZES), generate(&r, 4, SIZES));
        assert_ne!(generate(&r, 4, SIZES).train, generate(&r, 5, SIZES).train);
    }

    #[test]
    fn classes_balanced_within_one() {
        let r = DataRecipe::default();
        let d = generate(&r, 1, SIZES);
        for split in [&d.train, &d.val, &d.test] {
            let mut counts = vec![0usize; r.num_classes];
            split.labels.iter().for_each(|&y| counts[y] += 1);
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1, "{counts:?}");
        }
    }

    #[test]
    fn splits_are_disjoint() {
        let r = DataRecipe::default();
        let d = generate(&r, 2, SIZES);
        let per = r.resolution * r.resolution * r.channels;
        let rows = |s: &Split| s.inputs.data.chunks(per).map(|c| c.iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>();
        let (a, b, c) = (rows(&d.train), rows(&d.val), rows(&d.test));
        for x in &a {
            assert!(!b.contains(x) && !c.contains(x));
        }
        for x in &b {
            assert!(!c.contains(x));
        }
    }
}
