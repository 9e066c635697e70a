use artiqc::artefact::ArtefactKind;
use artiqc::qcmetrics::spearman;
use artiqc::toytrain::{
    evaluate_cascade, generate_phantoms, train_stage, Frozen, Stage, TrainConfig, DEFAULT_SHAPE,
};
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let out_dir = std::path::Path::new("/tmp/cascade_probe");
    std::fs::create_dir_all(out_dir).unwrap();
    let train = generate_phantoms(500, 1001, DEFAULT_SHAPE).unwrap();
    let test = generate_phantoms(126, 2002, DEFAULT_SHAPE).unwrap();
    let cfg = TrainConfig { iterations: 1500, seed: 7, ..Default::default() };
    let teacher_cfg = TrainConfig { iterations: 1200, ..cfg.clone() };

    let (task, task_log) = train_stage(Stage::Task, &cfg, &train, &Frozen::default()).unwrap();
    task.save(out_dir.join("task.ckpt")).unwrap();
    println!("[{:6.1?}] task done: loss {:.4} -> {:.4}, eps {:.5}",
        t0.elapsed(), task_log[0].loss, task_log.last().unwrap().loss,
        task_log.last().unwrap().epsilon);

    let kinds = ArtefactKind::DECOUPLED;
    let mut teachers = Vec::new();
    std::thread::scope(|s| {
        let handles: Vec<_> = kinds.iter().map(|&kind| {
            let cfg = teacher_cfg.clone();
            let task_ref = &task;
            let train_ref = &train;
            s.spawn(move || {
                let frozen = Frozen { task: Some(task_ref), teachers: vec![] };
                let (m, log) = train_stage(Stage::Teacher(kind), &cfg, train_ref, &frozen).unwrap();
                (kind, m, log.last().unwrap().loss)
            })
        }).collect();
        for h in handles {
            let (kind, m, last) = h.join().unwrap();
            println!("[{:6.1?}] teacher {} done: final loss {:.4}", t0.elapsed(), kind.name(), last);
            teachers.push((kind, m));
        }
    });
    teachers.sort_by_key(|(k, _)| k.stage());
    for (k, m) in &teachers {
        m.save(out_dir.join(format!("teacher_{}.ckpt", k.name()))).unwrap();
    }

    let teacher_refs: Vec<&artiqc::toytrain::ToyModel> = teachers.iter().map(|(_, m)| m).collect();
    let frozen = Frozen { task: Some(&task), teachers: teacher_refs };
    let (student, slog) = train_stage(Stage::Student, &cfg, &train, &frozen).unwrap();
    student.save(out_dir.join("student.ckpt")).unwrap();
    println!("[{:6.1?}] student done: loss {:.4} -> {:.4}", t0.elapsed(), slog[0].loss, slog.last().unwrap().loss);

    let rows = evaluate_cascade(&student, &test, &kinds, 18.0 / 126.0, 42).unwrap();
    let art: Vec<_> = rows.iter().filter(|r| r.artefact_kind.is_some()).collect();
    let clean: Vec<_> = rows.iter().filter(|r| r.artefact_kind.is_none()).collect();
    println!("rows: {} artefacted, {} clean", art.len(), clean.len());

    let dice: Vec<f64> = art.iter().map(|r| r.dice).collect();
    let var: Vec<f64> = art.iter().map(|r| r.mean_artefact_variance).collect();
    let snr: Vec<f64> = art.iter().map(|r| r.snr).collect();
    let cnr: Vec<f64> = art.iter().map(|r| r.cnr).collect();
    let r_var = spearman(&var, &dice).unwrap();
    let r_snr = spearman(&snr, &dice).unwrap();
    let r_cnr = spearman(&cnr, &dice).unwrap();
    println!("rho(var, dice) = {:.3} (p {:.2e})", r_var.rho, r_var.p_value);
    println!("rho(snr, dice) = {:.3} (p {:.2e})", r_snr.rho, r_snr.p_value);
    println!("rho(cnr, dice) = {:.3} (p {:.2e})", r_cnr.rho, r_cnr.p_value);

    // per-kind diagnostics
    for kind in kinds {
        let sub: Vec<_> = art.iter().filter(|r| r.artefact_kind == Some(kind)).collect();
        let d: f64 = sub.iter().map(|r| r.dice).sum::<f64>() / sub.len() as f64;
        let v: f64 = sub.iter().map(|r| r.mean_artefact_variance).sum::<f64>() / sub.len() as f64;
        println!("  {:>9}: n {} mean dice {:.3}, mean var {:.4}", kind.name(), sub.len(), d, v);
    }
    let mut cv: Vec<f64> = clean.iter().map(|r| r.mean_artefact_variance).collect();
    let mut av: Vec<f64> = art.iter().map(|r| r.mean_artefact_variance).collect();
    cv.sort_by(|a, b| a.partial_cmp(b).unwrap());
    av.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!("median var clean {:.4} vs artefacted {:.4}", cv[cv.len()/2], av[av.len()/2]);
    let clean_dice: f64 = clean.iter().map(|r| r.dice).sum::<f64>() / clean.len() as f64;
    println!("mean clean dice {:.3}", clean_dice);
    println!("total {:?}", t0.elapsed());
}
