use octprog::dataio::{render_pair, SynthConfig};
use octprog::models::PpmaeConfig;
use octprog::preprocess::{preprocess_pair, PreprocessParams};
use octprog::training::{
    copy_baseline_masked_mse, masked_val_mse, train_ppmae, AugmentSpec, TrainConfig, TrainTask,
};

#[test]
#[ignore]
fn scratch_ppmae_beats_copy() {
    let synth = SynthConfig {
        height: 64,
        width: 64,
        band_thickness: 26,
        tilt_range: 4.0,
        offset_range: (4, 16),
        pocket_radius: 6.0,
        class_balance: [0.0, 0.0, 1.0, 0.0],
        seed: 100,
        ..SynthConfig::default()
    };
    let pre = PreprocessParams { out_height: 64, out_width: 64, ..Default::default() };
    let t_start = std::time::Instant::now();
    let pairs: Vec<_> = (0..512)
        .map(|i| {
            let (t0, t1) = render_pair(&synth, i, 2);
            preprocess_pair(&t0, &t1, &pre).unwrap()
        })
        .collect();
    println!("data: {:?}", t_start.elapsed());

    let model_cfg = PpmaeConfig::desk();
    let cfg = TrainConfig {
        task: TrainTask::Ppmae,
        epochs: 40,
        batch_size: 16,
        lr: 1e-3,
        augment: false,
        split_ratio: 0.75,
        seed: 42,
        ..Default::default()
    };
    let t_train = std::time::Instant::now();
    let (model, log) = train_ppmae(&model_cfg, &pairs, &cfg, &AugmentSpec::identity()).unwrap();
    println!("train 10 epochs: {:?}", t_train.elapsed());
    for r in &log {
        println!("{} {} {:?}", r.epoch, r.split, r.mse);
    }
    // same val split the trainer used
    let (_, val_idx) = octprog::training::split_indices(512, 0.75, 42);
    let val: Vec<_> = val_idx.iter().map(|&i| pairs[i].clone()).collect();
    let model_mse = masked_val_mse(&model, &val, 42).unwrap();
    let copy_mse = copy_baseline_masked_mse(&val, &model_cfg, 42).unwrap();
    println!("model {model_mse} copy {copy_mse} ratio {}", model_mse / copy_mse);
}
