use rtdk_core::metrics::{evaluate, OperatingPoint};
use rtdk_core::model::{Model, ModelConfig};
use rtdk_core::synth::{generate_dataset, SceneSpec};
use rtdk_core::train::{build_eval_samples, train_epoch, OptState, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(300);
    let batch: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(8);
    let lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.01);
    let images: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(8);
    let count_max: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(15);
    let count_min: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(5);
    let eps: f64 = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(1e-8);
    let beta2: f64 = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(0.999);
    let beta1: f64 = args.get(9).map(|s| s.parse().unwrap()).unwrap_or(0.9);
    let okind = match args.get(10).map(String::as_str).unwrap_or("adam") {
        "sgd" => rtdk_core::train::OptimizerKind::Sgd,
        _ => rtdk_core::train::OptimizerKind::Adam,
    };
    let clip_arg: f64 = args.get(11).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let clip = if clip_arg <= 0.0 { None } else { Some(clip_arg) };
    let mu: f64 = args.get(12).map(|s| s.parse().unwrap()).unwrap_or(0.9);

    let scene = SceneSpec { lesion_count_min: count_min, lesion_count_max: count_max, ..SceneSpec::default() };
    let data = generate_dataset(&scene, images);
    let n_obj: usize = data.iter().map(|d| d.boxes.len()).sum();
    println!("{images} images, {n_obj} objects, batch {batch}, lr {lr}, eps {eps}, beta2 {beta2}, beta1 {beta1}");
    let mc = ModelConfig::default();
    let tc = TrainConfig { epochs, batch_size: batch, learning_rate: lr, epsilon: eps, beta2, beta1, optimizer: okind, momentum: mu, grad_clip_norm: clip, ..TrainConfig::default() };
    let mut model = Model::new(mc, tc.seed).unwrap();
    let mut state = OptState::new(&model.params);
    let start = Instant::now();
    for e in 1..=tc.epochs {
        let rec = train_epoch(&mut model, &data, &tc, &mut state, e).unwrap();
        if e % 20 == 0 || e == 1 {
            let samples = build_eval_samples(&model, &data, 0.0).unwrap();
            let rep = evaluate(&samples, OperatingPoint::BestF1).unwrap();
            println!(
                "epoch {e:4} loss {:.4} (cls {:.4} l1 {:.4} giou {:.4}) mAP50 {:.3} mAP50-95 {:.3} P {:.3} R {:.3} [{:.1}s]",
                rec.loss.total, rec.loss.cls, rec.loss.l1, rec.loss.giou,
                rep.map50, rep.map50_95, rep.precision, rep.recall,
                start.elapsed().as_secs_f64()
            );
        }
    }
}
