use rand_distr::{Distribution, Normal};

use super::scene::Scene;
use super::vocab::{Category, Cell, Color, Size};
use crate::autodiff::Array;
use crate::rng::{substream, Stream};

/// Width of one cell block: category, colour and size one-hots.
pub const CELL_BLOCK: usize = Category::COUNT + Color::COUNT + Size::COUNT;

/// Feature dimension for the standard enums: 9 x (12 + 6 + 3) = 189.
pub const FEATURE_DIM: usize = Cell::COUNT * CELL_BLOCK;

/// Stand-in for a frozen vision encoder: per-cell one-hot blocks, plus
/// optional Gaussian noise seeded from the scene seed.
pub fn render_features(scene: &Scene, noise_sigma: f64) -> Array {
    let mut data = vec![0.0; FEATURE_DIM];
    for o in &scene.objects {
        let base = o.position.index() * CELL_BLOCK;
        data[base + o.category.index()] = 1.0;
        data[base + Category::COUNT + o.color.index()] = 1.0;
        data[base + Category::COUNT + Color::COUNT + o.size.index()] = 1.0;
    }
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).expect("sigma validated by SceneConfig");
        let mut rng = substream(scene.seed, Stream::Render, 0);
        for v in &mut data {
            *v += normal.sample(&mut rng);
        }
    }
    Array::vector(data)
}
