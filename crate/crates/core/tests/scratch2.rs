use octprog::dataio::{class_sequence, render_pair, GrayImage, SynthConfig};
use octprog::metrics::{confusion, macro_f1};
use octprog::models::{FusionConfig, FusionKind, PpmaeConfig};
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
fn scratch_task2_end_to_end() {
    let synth = SynthConfig { seed: 500, ..SynthConfig::default() };
    let pre = PreprocessParams::default(); // 32x80
    let t = std::time::Instant::now();
    let data = gen(&synth, 400, &pre);
    println!("gen: {:?}", t.elapsed());

    // fold by patient (2 pairs per patient, consecutive)
    let samples: Vec<FusionSample> = data
        .iter()
        .enumerate()
        .map(|(i, (p0, p1, label))| FusionSample {
            t0: p0.clone(),
            t1: p1.clone(),
            label: *label as usize,
            fold: Some((i / 2) % 4),
            index: i,
        })
        .collect();

    let model_cfg = FusionConfig::desk(FusionKind::Late);
    let tcfg = TrainConfig { epochs: 8, lr: 1e-3, seed: 77, ..Default::default() };
    let spec = AugmentSpec::default();
    let t = std::time::Instant::now();
    let mut folds = Vec::new();
    for fold in 0..4 {
        let (m, log) = train_fusion(&model_cfg, &samples, fold, &tcfg, &spec).unwrap();
        let best = log.iter().filter(|r| r.split == "val").filter_map(|r| r.f1).fold(0.0, f64::max);
        println!("fold {fold} best val F1 {best}");
        folds.push(m);
    }
    println!("late fusion 4 folds: {:?}", t.elapsed());

    // ppmae trained on classes 0-2 of the same processed data (64x64)
    let ppmae_cfg = PpmaeConfig::desk();
    let pairs: Vec<(GrayImage, GrayImage)> = data
        .iter()
        .filter(|(_, _, l)| *l != 3)
        .map(|(p0, p1, _)| {
            (
                octprog::dataio::resize_bilinear(p0, 64, 64),
                octprog::dataio::resize_bilinear(p1, 64, 64),
            )
        })
        .collect();
    let pcfg = TrainConfig {
        task: TrainTask::Ppmae,
        epochs: 40,
        lr: 1e-3,
        augment: false,
        seed: 78,
        ..Default::default()
    };
    let t = std::time::Instant::now();
    let (ppmae, plog) = train_ppmae(&ppmae_cfg, &pairs, &pcfg, &AugmentSpec::identity()).unwrap();
    println!(
        "ppmae: {:?}, last val mse {:?}",
        t.elapsed(),
        plog.iter().filter(|r| r.split == "val").last().unwrap().mse
    );

    // held-out test set, classes 0..2
    let test_synth = SynthConfig {
        seed: 901,
        class_balance: [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0],
        ..SynthConfig::default()
    };
    let test = gen(&test_synth, 120, &pre);
    let truth: Vec<usize> = test.iter().map(|(_, _, l)| *l as usize).collect();

    let score = |preds: &[usize], name: &str| {
        let cm = confusion(&truth, preds, 3).unwrap();
        let f1 = macro_f1(&cm).unwrap();
        println!("{name}: macro F1 {f1:.4} cm {:?}", cm);
        f1
    };

    // oracle ceiling: ensemble on (t0, true t1), class-3 dropped
    let mut preds = Vec::new();
    for (p0, p1, _) in &test {
        let probs = ensemble_predict(&folds, p0, p1).unwrap();
        let mut p3 = probs[..3].to_vec();
        let s: f64 = p3.iter().sum();
        for v in &mut p3 { *v /= s; }
        preds.push(argmax_tie_low(&p3));
    }
    score(&preds, "true-t1  ");

    // degenerate: (t0, t0)
    let mut preds = Vec::new();
    for (p0, _, _) in &test {
        let probs = ensemble_predict(&folds, p0, p0).unwrap();
        let mut p3 = probs[..3].to_vec();
        let s: f64 = p3.iter().sum();
        for v in &mut p3 { *v /= s; }
        preds.push(argmax_tie_low(&p3));
    }
    score(&preds, "copy-t0  ");

    for samples in [1usize, 4, 8] {
        let mut m = octprog::models::PpmaeModel::from_checkpoint(&ppmae.to_checkpoint(0)).unwrap();
        m.config.recon_samples = samples;
        let mut preds = Vec::new();
        for (i, (p0, _, _)) in test.iter().enumerate() {
            let (class, _) = predict_task2(&m, &folds, p0, 1000 + i as u64).unwrap();
            preds.push(class);
        }
        score(&preds, &format!("recon x{samples}"));
    }
}
