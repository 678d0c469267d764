use std::time::Instant;

use scaleadapt::scenegen::{generate, LocationProfile, SceneSpec};
use scaleadapt::trainer::{train_step, TrainOptions, TrainState};
use scaleadapt::types::Location;

fn bench(mini: bool, batch: usize, src_px: usize, tgt_px: usize) {
    let src_spec = SceneSpec {
        seed: 1,
        gsd_m: 0.09,
        tile_px: src_px,
        num_tiles: batch,
        location: Location::Source,
        profile: LocationProfile::loc_a(),
    };
    let tgt_spec = SceneSpec { gsd_m: 0.18, tile_px: tgt_px, location: Location::Target, seed: 2, ..src_spec.clone() };
    let src = generate(&src_spec).unwrap();
    let tgt = generate(&tgt_spec).unwrap();
    let opts = TrainOptions { mini_model: mini, batch_size: batch, max_iter: 100, ..Default::default() };
    let mut state = TrainState::new(&opts);
    let masks = src.masks.as_ref().unwrap();
    let batch_s: Vec<_> = (0..batch).map(|i| (&src.tiles[i], &masks[i])).collect();
    let batch_t: Vec<_> = (0..batch).map(|i| &tgt.tiles[i]).collect();
    train_step(&mut state, &opts, &batch_s, &batch_t).unwrap();
    let t0 = Instant::now();
    let n = 5;
    for _ in 0..n {
        train_step(&mut state, &opts, &batch_s, &batch_t).unwrap();
    }
    println!(
        "mini={mini} batch={batch} src={src_px} tgt={tgt_px}: {:.3} s/iter",
        t0.elapsed().as_secs_f64() / n as f64
    );
}

fn main() {
    bench(false, 4, 64, 64);
    bench(false, 4, 64, 32);
    bench(false, 2, 64, 32);
    bench(true, 4, 64, 32);
    bench(true, 2, 64, 32);
    bench(true, 2, 64, 64);
    bench(true, 4, 64, 64);
}
