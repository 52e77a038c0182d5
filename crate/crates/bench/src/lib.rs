//! Fixtures shared by the kernel benchmarks in `benches/`.

use shapeseed::synth::{degrade_scores, synth, Degradation, SceneKind, SYNTH_CHANNELS};
use shapeseed::{ClassSet, ImageRgb, LabelMask, Tensor3};

pub struct Fixture {
    pub image: ImageRgb,
    pub gt: LabelMask,
    pub probs: Tensor3<f32>,
    pub present: ClassSet,
}

/// A textured synthetic scene with a degraded score map over four channels.
pub fn fixture(size: usize, seed: u64) -> Fixture {
    let scene = synth(SceneKind::Shapes, size, size, seed).expect("size >= 16");
    let probs = degrade_scores(&scene.gt, SYNTH_CHANNELS, &Degradation::default(), seed)
        .expect("labels in range");
    Fixture {
        image: scene.image,
        gt: scene.gt,
        probs,
        present: scene.present,
    }
}
