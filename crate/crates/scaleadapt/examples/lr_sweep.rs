use scaleadapt::scenegen::{generate, ClassProfile, LocationProfile, SceneSpec, ShapeKind, SizeDist};
use scaleadapt::trainer::{run, OptimizerSpec, TrainOptions};
use scaleadapt::types::{Dataset, Location};

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
        texture_noise: 0.02,
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

fn main() {
    let iters: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let tgt = scene(0.045, 128, 16, 22, Location::Target);
    let eval = scene(0.045, 128, 8, 33, Location::Target);
    for lr in [2.5e-4, 1e-3, 3e-3] {
        for sam in [false, true] {
            let opts = TrainOptions {
                max_iter: iters,
                batch_size: 4,
                seed: 1,
                enable_d_feat: false,
                enable_d_scale: false,
                enable_sam: sam,
                eval_interval: iters / 3,
                num_classes: 4,
                optim: OptimizerSpec { gen_lr: lr, ..Default::default() },
                ..Default::default()
            };
            let dir = std::env::temp_dir().join(format!("sweep3-{lr}-{sam}-{iters}"));
            let _ = std::fs::remove_dir_all(&dir);
            let s = run(&opts, &tgt, &tgt, Some(&eval), &dir).unwrap();
            let r = s.final_eval.unwrap();
            let per: Vec<String> = r
                .per_class_iou
                .iter()
                .map(|c| c.map_or("-".into(), |v| format!("{:.0}", v * 100.0)))
                .collect();
            println!("lr {lr:<8} sam {sam}: miou {:.2}%  per-class {:?}", r.miou * 100.0, per);
        }
    }
}
