use rtdk_core::graph::Graph;
use rtdk_core::losses::composite_loss;
use rtdk_core::matching::{build_cost_matrix, hungarian, MatchWeights};
use rtdk_core::model::{Model, ModelConfig, Predictions};
use rtdk_core::synth::{generate_dataset, SceneSpec};
use rtdk_core::train::{train_epoch, OptState, TrainConfig};

fn grad_stats(model: &mut Model, data: &[rtdk_core::synth::AnnotatedImage]) {
    model.params.zero_grads();
    for img in data {
        let gts: Vec<(usize, rtdk_core::boxes::BoxCS)> =
            img.labels.iter().copied().zip(img.boxes.iter().copied()).collect();
        let mut g = Graph::new();
        let b = model.params.bind(&mut g);
        let (lv, bv) = model.forward_on(&mut g, &b, &img.pixels).unwrap();
        let preds = Predictions { class_logits: g.value(lv), boxes: g.value(bv) };
        let cost = build_cost_matrix(&preds, &gts, &MatchWeights::default()).unwrap();
        let a = hungarian(&cost).unwrap();
        let (total, _) = composite_loss(&mut g, lv, bv, &gts, &a, &Default::default()).unwrap();
        let scaled = g.scale(total, 1.0 / data.len() as f64);
        g.backward(scaled).unwrap();
        model.params.accumulate_grads(&g, &b).unwrap();
    }
    let mut sq = 0.0;
    let mut rows: Vec<(String, f64, usize)> = vec![];
    for (name, t) in model.params.iter() {
        if let Some(gr) = t.grad() {
            let s: f64 = gr.iter().map(|v| v * v).sum();
            sq += s;
            rows.push((name.to_string(), (s / gr.len() as f64).sqrt(), gr.len()));
        }
    }
    rows.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    println!("global grad norm: {:.4}", sq.sqrt());
    for (n, rms, len) in rows.iter().take(8) {
        println!("  rms {rms:.5}  n {len:6}  {n}");
    }
}

fn main() {
    let scene = SceneSpec::default();
    let data = generate_dataset(&scene, 8);
    let tc = TrainConfig { epochs: 1, batch_size: 2, ..TrainConfig::default() };
    let mut model = Model::new(ModelConfig::default(), tc.seed).unwrap();
    println!("--- at init ---");
    grad_stats(&mut model, &data);
    let mut state = OptState::new(&model.params);
    for e in 1..=100 {
        train_epoch(&mut model, &data, &tc, &mut state, e).unwrap();
    }
    println!("--- after 100 epochs (lr 0.01) ---");
    grad_stats(&mut model, &data);
}
