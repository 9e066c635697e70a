use artiqc::qcmetrics::{argmax_labels, dice};
use artiqc::toytrain::{generate_phantoms, ToyModel, DEFAULT_SHAPE};
use artiqc::uncmath::scaled_softmax;
use artiqc::artefact::corrupt;

fn main() {
    let dir = std::path::Path::new("/tmp/cascade_probe");
    let test = generate_phantoms(8, 2002, DEFAULT_SHAPE).unwrap();
    for name in ["task", "student"] {
        let model = ToyModel::load(dir.join(format!("{name}.ckpt"))).unwrap();
        let mut dices = Vec::new();
        let mut fg_probs: Vec<f64> = Vec::new();
        let mut s_task_mean = 0.0;
        for i in 0..test.len() {
            let (clean, _) = corrupt(&test.images[i], &[]).unwrap();
            let (logits, bundle) = model.infer(&clean).unwrap();
            let probs = scaled_softmax(&logits, &bundle.total_variance()).unwrap();
            let pred = argmax_labels(&probs).unwrap();
            dices.push(dice(&pred, &test.labels[i], 1).unwrap());
            // mean foreground logit margin on true-fg voxels
            let mut margin = 0.0;
            let mut count = 0.0;
            for ((x, y, z), &l) in test.labels[i].labels().indexed_iter() {
                if l == 1 {
                    margin += logits.data()[[1, x, y, z]] - logits.data()[[0, x, y, z]];
                    count += 1.0;
                }
            }
            fg_probs.push(margin / count);
            s_task_mean += bundle.s_task.mean().unwrap();
        }
        println!(
            "{name}: clean dice {:?}\n  mean fg logit margin {:?}\n  mean s_task {:.3}",
            dices.iter().map(|d| format!("{d:.3}")).collect::<Vec<_>>(),
            fg_probs.iter().map(|m| format!("{m:.3}")).collect::<Vec<_>>(),
            s_task_mean / test.len() as f64
        );
    }
}
