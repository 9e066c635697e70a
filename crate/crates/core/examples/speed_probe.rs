use artiqc::toytrain::autodiff::{Tape, Tensor};
use artiqc::toytrain::model::{ModelHeader, ToyModel, volume_to_tensor};
use artiqc::toytrain::{generate_phantoms, DEFAULT_SHAPE};
use artiqc::artefact::{corrupt, sample_pipeline, ArtefactPipelineConfig};
use artiqc::rng::rng_stream;
use std::time::Instant;

fn main() {
    let data = generate_phantoms(4, 1, DEFAULT_SHAPE).unwrap();
    let header = ModelHeader {
        width: 8, num_classes: 2, num_unc: 1, aug_kinds: vec![],
        stage: "probe".into(), seed: 3, tool_version: "x".into(),
        phantom_shape: [48, 48, 4],
    };
    let model = ToyModel::new(header).unwrap();
    let input_t = volume_to_tensor(&data.images[0]);

    // forward only
    let t0 = Instant::now();
    let reps = 50;
    for _ in 0..reps {
        let mut tape = Tape::new();
        let input = tape.leaf(input_t.clone());
        let _ = model.forward_tape(&mut tape, input).unwrap();
    }
    println!("forward: {:.1} ms", t0.elapsed().as_millis() as f64 / reps as f64);

    // forward + backward with dummy seeds
    let t1 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let input = tape.leaf(input_t.clone());
        let (seg, unc, _ids) = model.forward_tape(&mut tape, input).unwrap();
        let gseg = Tensor::from_vec(vec![1e-3; tape.value(seg).len()], &tape.value(seg).shape.clone());
        let gunc = Tensor::from_vec(vec![1e-3; tape.value(unc).len()], &tape.value(unc).shape.clone());
        let _ = tape.backward(&[(seg, gseg), (unc, gunc)]);
    }
    println!("forward+backward: {:.1} ms", t1.elapsed().as_millis() as f64 / reps as f64);

    // corrupt clean (bias only config)
    let cfg = ArtefactPipelineConfig::only(&[], 0.5);
    let t2 = Instant::now();
    let mut rng = rng_stream(9, 0);
    for _ in 0..reps {
        let specs = sample_pipeline(&cfg, DEFAULT_SHAPE, &mut rng).unwrap();
        let _ = corrupt(&data.images[0], &specs).unwrap();
    }
    println!("corrupt(empty-ish): {:.1} ms", t2.elapsed().as_millis() as f64 / reps as f64);

    let cfg2 = ArtefactPipelineConfig::default();
    let t3 = Instant::now();
    for _ in 0..reps {
        let specs = sample_pipeline(&cfg2, DEFAULT_SHAPE, &mut rng).unwrap();
        let _ = corrupt(&data.images[0], &specs).unwrap();
    }
    println!("corrupt(5 kinds @ rate .5): {:.1} ms", t3.elapsed().as_millis() as f64 / reps as f64);
}
