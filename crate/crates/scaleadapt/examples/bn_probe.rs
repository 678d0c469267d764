//! Does re-estimating batch-norm running statistics on native-scale target
//! tiles (no weight updates) close any of the cross-scale gap for a
//! source-only model?

use scaleadapt::metrics::evaluate_with;
use scaleadapt::nn::{Tape, Tensor};
use scaleadapt::scenegen::{generate, ClassProfile, LocationProfile, SceneSpec, ShapeKind, SizeDist};
use scaleadapt::segnet::SegModel;
use scaleadapt::types::{Dataset, Location, Raster};

fn class(
    name: &str,
    shape: ShapeKind,
    color_mean: [f32; 3],
    density_per_ha: f64,
    size: (f64, f64, f64, f64),
) -> ClassProfile {
    ClassProfile {
        name: name.into(),
        shape,
        color_mean,
        color_std: [0.03, 0.03, 0.03],
        density_per_ha,
        size: SizeDist {
            length_mean_m: size.0,
            length_std_m: size.1,
            width_mean_m: size.2,
            width_std_m: size.3,
        },
    }
}

pub fn desk_profile() -> LocationProfile {
    LocationProfile {
        name: "desk".into(),
        texture_noise: std::env::var("DESK_NOISE").ok().and_then(|v| v.parse().ok()).unwrap_or(0.02),
        classes: vec![
            class("surface", ShapeKind::Rect, [0.45, 0.45, 0.45], 0.0, (1.0, 0.0, 1.0, 0.0)),
            class("building", ShapeKind::Rect, [0.85, 0.15, 0.15], 300.0, (3.4, 0.3, 2.6, 0.25)),
            class("low_veg", ShapeKind::Ellipse, [0.2, 0.8, 0.3], 240.0, (3.6, 0.3, 2.6, 0.25)),
            class("tree", ShapeKind::Circle, [0.05, 0.3, 0.8], 300.0, (2.6, 0.2, 2.6, 0.2)),
        ],
    }
}

fn scene(gsd: f64, px: usize, n: usize, seed: u64, loc: Location) -> Dataset {
    generate(&SceneSpec {
        seed,
        gsd_m: gsd,
        tile_px: px,
        num_tiles: n,
        location: loc,
        profile: desk_profile(),
    })
    .unwrap()
}

fn eval_miou(model: &SegModel<f32>, ds: &Dataset) -> f64 {
    evaluate_with(|t| model.forward(t).map(|(p, _)| p).map_err(|e| panic!("{e}")).unwrap(), ds)
        .unwrap()
        .miou
        * 100.0
}

fn main() {
    let ckpt = std::env::args().nth(1).unwrap_or_else(|| {
        std::env::temp_dir()
            .join("probe-1-800-0.00025-source-only/best_model.bin")
            .to_string_lossy()
            .into_owned()
    });
    let tgt = scene(0.045, 128, 16, 22, Location::Target);
    let eval = scene(0.045, 128, 8, 33, Location::Target);
    let mut model: SegModel<f32> = SegModel::load(std::path::Path::new(&ckpt)).unwrap();
    println!("as loaded:        miou {:.2}%", eval_miou(&model, &eval));

    // Re-estimate running stats with target-scale forwards only.
    for pass in 0..8 {
        for pair in tgt.tiles.chunks(2) {
            let rs: Vec<&Raster> = pair.iter().map(|t| &t.pixels).collect();
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::from_rasters(&rs));
            let _ = model.forward_batch(&mut tape, x, true, false);
        }
        println!("after pass {pass}:     miou {:.2}%", eval_miou(&model, &eval));
    }
}
