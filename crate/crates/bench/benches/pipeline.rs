use artiqc::artefact::{corrupt, sample_pipeline, ArtefactPipelineConfig};
use artiqc::rng::rng_stream;
use artiqc::spectral::{fft3, ifft3};
use artiqc::toytrain::autodiff::{Tape, Tensor};
use artiqc::toytrain::model::{volume_to_tensor, ModelHeader, ToyModel};
use artiqc::toytrain::{generate_phantoms, DEFAULT_SHAPE};
use artiqc::uncmath::{
    combined_loss_grad, consistency_loss_grad, LogitField, UncertaintyBundle,
};
use artiqc::volume::{LabelVolume, Volume};
use criterion::{black_box, criterion_group, criterion_main, Criterion};
use ndarray::{Array3, Array4};
use rand::Rng;

fn bench_fft(c: &mut Criterion) {
    let mut rng = rng_stream(1, 0);
    let vol = Volume::from_data(Array3::from_shape_fn((32, 32, 32), |_| rng.gen_range(0.0..1.0)));
    c.bench_function("fft3_32cubed", |b| b.iter(|| black_box(fft3(&vol))));
    let k = fft3(&vol);
    c.bench_function("ifft3_32cubed", |b| b.iter(|| black_box(ifft3(&k))));
}

fn bench_corrupt(c: &mut Criterion) {
    let ds = generate_phantoms(1, 2, DEFAULT_SHAPE).unwrap();
    let cfg = ArtefactPipelineConfig { rate: 1.0, ..Default::default() };
    let mut rng = rng_stream(3, 0);
    let specs = sample_pipeline(&cfg, DEFAULT_SHAPE, &mut rng).unwrap();
    c.bench_function("corrupt_default_phantom", |b| {
        b.iter(|| black_box(corrupt(&ds.images[0], &specs).unwrap()))
    });
}

fn bench_losses(c: &mut Criterion) {
    let shape = (24, 24, 4);
    let mut rng = rng_stream(4, 0);
    let logits = LogitField::new(Array4::from_shape_fn((2, shape.0, shape.1, shape.2), |_| {
        rng.gen_range(-2.0..2.0)
    }))
    .unwrap();
    let target = LabelVolume::new(
        Array3::from_shape_fn(shape, |_| rng.gen_range(0..2u8)),
        2,
    )
    .unwrap();
    let bundle = UncertaintyBundle::new(
        Array3::from_shape_fn(shape, |_| rng.gen_range(-1.0..0.5)),
        vec![
            Array3::from_shape_fn(shape, |_| rng.gen_range(-1.0..0.5)),
            Array3::from_shape_fn(shape, |_| rng.gen_range(-1.0..0.5)),
        ],
    )
    .unwrap();
    c.bench_function("combined_loss_grad_24x24x4_n2", |b| {
        b.iter(|| black_box(combined_loss_grad(&logits, &target, &bundle, 0.05).unwrap()))
    });

    let pred = Array3::from_shape_fn(shape, |_| rng.gen_range(0.1..1.0));
    let targ = Array3::from_shape_fn(shape, |_| rng.gen_range(0.1..1.0));
    c.bench_function("consistency_loss_grad_24x24x4", |b| {
        b.iter(|| black_box(consistency_loss_grad(&pred, &targ, 0.1).unwrap()))
    });
}

fn bench_model(c: &mut Criterion) {
    let header = ModelHeader {
        width: 8,
        num_classes: 2,
        num_unc: 6,
        aug_kinds: vec![],
        stage: "bench".into(),
        seed: 5,
        tool_version: "bench".into(),
        phantom_shape: [48, 48, 4],
    };
    let model = ToyModel::new(header).unwrap();
    let ds = generate_phantoms(1, 6, DEFAULT_SHAPE).unwrap();
    let input = volume_to_tensor(&ds.images[0]);
    c.bench_function("model_forward_48x48x4", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let id = tape.leaf(input.clone());
            black_box(model.forward_tape(&mut tape, id).unwrap());
        })
    });
    c.bench_function("model_forward_backward_48x48x4", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let id = tape.leaf(input.clone());
            let (seg, unc, _) = model.forward_tape(&mut tape, id).unwrap();
            let gseg = Tensor::from_vec(vec![1e-3; tape.value(seg).len()], &tape.value(seg).shape.clone());
            let gunc = Tensor::from_vec(vec![1e-3; tape.value(unc).len()], &tape.value(unc).shape.clone());
            black_box(tape.backward(&[(seg, gseg), (unc, gunc)]));
        })
    });
}

criterion_group!(benches, bench_fft, bench_corrupt, bench_losses, bench_model);
criterion_main!(benches);
