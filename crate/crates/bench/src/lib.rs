//! Fixtures shared by the benchmarks.

use autolabel_core::datagen::{self, RandomizationConfig, SceneAssets};
use autolabel_core::renderer::RenderOutput;
use autolabel_core::splats::{self, Archetype};
use autolabel_core::{Intrinsics, Lighting, Pose, Scene, Vec3};

/// Car over `env0`, viewed from 2.5 object sizes, at `size`×`size`.
pub fn car_scene(size: u32) -> (Scene, Pose, Intrinsics) {
    let car = splats::generate_archetype(Archetype::Car, 0);
    let eye = Vec3::new(1.8, -1.2, 0.9).normalize() * 2.5 * car.object_size();
    let camera = Pose::look_at(eye, Vec3::zeros(), Vec3::z(), 0.0);
    let assets = SceneAssets::new(car, &["env0".to_string()]).expect("built-in environment");
    let scene = assets.scene("env0", Some(Pose::identity()), 1.0).expect("scene");
    (scene, camera, Intrinsics::centered(size, size, 1.1))
}

pub fn neutral_light() -> Lighting {
    Lighting { gain: 1.0, tint: [1.0; 3] }
}

/// One randomized labeled frame at `size`.
pub fn labeled_frame(size: u32, index: usize) -> RenderOutput {
    let car = splats::generate_archetype(Archetype::Car, 0);
    let cfg = RandomizationConfig { width: size, height: size, ..RandomizationConfig::default() };
    let assets = SceneAssets::new(car, &cfg.backgrounds).expect("built-in environments");
    datagen::render_frame(&assets, &cfg, index).expect("render").1
}
