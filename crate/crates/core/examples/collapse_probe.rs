use rtdk_core::model::{Model, ModelConfig};
use rtdk_core::synth::{generate_dataset, SceneSpec};
use rtdk_core::train::{train_epoch, OptState, TrainConfig};

fn spread(model: &Model, img: &rtdk_core::synth::AnnotatedImage) -> (f64, f64, f64) {
    let p = model.forward(&img.pixels).unwrap();
    let n = p.num_queries();
    // mean pairwise L1 distance between predicted boxes
    let mut dist = 0.0;
    let mut pairs = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let a = p.query_box(i);
            let b = p.query_box(j);
            dist += (a.cx - b.cx).abs() + (a.cy - b.cy).abs() + (a.w - b.w).abs() + (a.h - b.h).abs();
            pairs += 1.0;
        }
    }
    // spread of class probabilities across queries (std of prob of class 0)
    let probs: Vec<f64> = (0..n).map(|i| p.query_probs(i)[0]).collect();
    let mean = probs.iter().sum::<f64>() / n as f64;
    let var = probs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    // mean box size
    let wmean = (0..n).map(|i| p.query_box(i).w).sum::<f64>() / n as f64;
    (dist / pairs, var.sqrt(), wmean)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.01);
    let scene = SceneSpec::default();
    let data = generate_dataset(&scene, 8);
    let tc = TrainConfig { epochs: 120, batch_size: 2, learning_rate: lr, ..TrainConfig::default() };
    let mut model = Model::new(ModelConfig::default(), tc.seed).unwrap();
    let mut state = OptState::new(&model.params);
    for e in 1..=tc.epochs {
        let rec = train_epoch(&mut model, &data, &tc, &mut state, e).unwrap();
        if e % 20 == 0 || e == 1 || e == 5 || e == 10 {
            let (d, s, w) = spread(&model, &data[0]);
            println!(
                "epoch {e:4} loss {:.3} cls {:.3} | box-spread {:.4} prob-std {:.4} mean-w {:.3}",
                rec.loss.total, rec.loss.cls, d, s, w
            );
        }
    }
}
