//! Shared inputs for the criterion benchmarks.

use biasprobe_core::adapters::VqaAnswer;
use biasprobe_core::probe::Sample;
use biasprobe_core::{GenderLabel, Image};

/// A deterministic textured RGB image.
pub fn test_image(side: u32) -> Image {
    Image::from_fn(side, side, |x, y| {
        let r = (x * 7 + y * 3) % 256;
        let g = (x * x + y * 11) % 256;
        let b = (x ^ y).wrapping_mul(13) % 256;
        [r as u8, g as u8, b as u8]
    })
}

/// `(score, image_id, gender)` candidates with pseudo-random scores.
pub fn skew_candidates(n: usize) -> Vec<(f64, String, GenderLabel)> {
    (0..n)
        .map(|i| {
            let score = ((i as u64).wrapping_mul(2_654_435_761) % 10_007) as f64 / 10_007.0;
            let g = if i % 2 == 0 { GenderLabel::Woman } else { GenderLabel::Man };
            (score, format!("img{i:06}"), g)
        })
        .collect()
}

/// Linearly separable probe samples of dimension `dim`.
pub fn probe_samples(n: usize, dim: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let label = if i % 2 == 0 { GenderLabel::Woman } else { GenderLabel::Man };
            let shift = if label == GenderLabel::Man { 0.5 } else { -0.5 };
            let values = (0..dim)
                .map(|j| ((i * 31 + j * 17) % 97) as f64 / 97.0 - 0.5 + shift)
                .collect();
            Sample::new(values, label)
        })
        .collect()
}

/// Alternating answers for YGap benchmarks.
pub fn answers(n: usize) -> Vec<(GenderLabel, VqaAnswer)> {
    (0..n)
        .map(|i| {
            let g = if i % 2 == 0 { GenderLabel::Woman } else { GenderLabel::Man };
            let a = if i % 3 == 0 { VqaAnswer::Yes } else { VqaAnswer::No };
            (g, a)
        })
        .collect()
}
