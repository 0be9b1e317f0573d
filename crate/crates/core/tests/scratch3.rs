use octprog::dataio::{class_sequence, pocket_area, render_pair, resize_bilinear, GrayImage, SynthConfig};
use octprog::models::{PpmaeConfig, PpmaeModel};
use octprog::preprocess::{preprocess_pair, PreprocessParams};
use octprog::training::*;

fn gen(cfg: &SynthConfig, n: usize, pre: &PreprocessParams) -> Vec<(GrayImage, GrayImage, u8)> {
    let labels = class_sequence(&cfg.class_balance, n);
    (0..n)
        .map(|i| {
            let (t0, t1) = render_pair(cfg, i, labels[i]);
            let (p0, p1) = preprocess_pair(&t0, &t1, pre).unwrap();
            (p0, p1, labels[i])
        })
        .collect()
}

#[test]
#[ignore]
fn scratch_recon_quality() {
    let synth = SynthConfig { seed: 500, ..SynthConfig::default() };
    let pre = PreprocessParams::default();
    let data = gen(&synth, 400, &pre);
    let pairs: Vec<(GrayImage, GrayImage)> = data
        .iter()
        .filter(|(_, _, l)| *l != 3)
        .map(|(p0, p1, _)| (resize_bilinear(p0, 64, 64), resize_bilinear(p1, 64, 64)))
        .collect();
    let pcfg = TrainConfig {
        task: TrainTask::Ppmae, epochs: 40, lr: 1e-3, augment: false, seed: 78, ..Default::default()
    };
    let (ppmae, _) = train_ppmae(&PpmaeConfig::desk(), &pairs, &pcfg, &AugmentSpec::identity()).unwrap();

    let test_synth = SynthConfig {
        seed: 901,
        class_balance: [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0],
        ..SynthConfig::default()
    };
    let test = gen(&test_synth, 30, &pre);
    println!("label | area(t0) area(t1) area(recon) | min(recon pocket px)");
    for (i, (p0, p1, label)) in test.iter().enumerate() {
        let recon = ppmae.reconstruct_future(p0, 1000 + i as u64, 32, 80).unwrap();
        let min_px = recon.pixels().iter().cloned().fold(1.0f64, f64::min);
        println!(
            "{label}    | {:8} {:8} {:11} | {min_px:.3}",
            pocket_area(p0),
            pocket_area(p1),
            pocket_area(&recon),
        );
        if i == 4 {
            // dump one reconstruction triplet for inspection
            octprog::dataio::save_image(p0, std::path::Path::new("/tmp/octbench/insp_t0.pgm")).unwrap();
            octprog::dataio::save_image(p1, std::path::Path::new("/tmp/octbench/insp_t1.pgm")).unwrap();
            octprog::dataio::save_image(&recon, std::path::Path::new("/tmp/octbench/insp_rc.pgm")).unwrap();
        }
    }
    let _ = PpmaeModel::from_checkpoint(&ppmae.to_checkpoint(0)).unwrap();
}
