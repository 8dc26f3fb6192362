//! Train the toy scorer on synthetic phantoms and evaluate it.
//!
//! `cargo run --release -p voxdet-core --example desk_run -- [steps] [lambda]`

use std::time::Instant;

use voxdet_core::metrics::{froc, sensitivity_at_fps};
use voxdet_core::synthetic::{
    desk_anchor_spec, desk_pipeline_config, evaluate_toy, generate_dataset, mean_positive_cosine, prepare_dataset,
    train_toy, EvalConfig, SyntheticSpec, ToyScorer, TrainConfig,
};
use voxdet_core::{AssignmentConfig, LossParams};

fn main() -> voxdet_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let lambda = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.7);
    let t0 = Instant::now();
    let spec = SyntheticSpec::default();
    let train = generate_dataset(&spec, 30)?;
    let test = generate_dataset(&SyntheticSpec { seed: spec.seed + 1, ..spec.clone() }, 20)?;
    let anchors = desk_anchor_spec();
    let prepared = prepare_dataset(&train, &anchors, &AssignmentConfig::default())?;
    println!("prepared in {:.1?}", t0.elapsed());

    let cfg = TrainConfig { steps, ..Default::default() };
    let params = LossParams { lambda, ..Default::default() };
    let scorer = ToyScorer::for_dataset(&prepared, cfg.embed_dim, cfg.seed)?;
    let out = train_toy(&prepared, scorer, &params, &cfg)?;
    for h in out.history.iter().step_by((steps / 10).max(1)).chain(out.history.last()) {
        println!("{:4} rpn {:.4} cls {:.4} reg {:.4} sim {:.4}", h.step, h.l_rpn, h.l_cls, h.l_reg, h.l_sim);
    }
    println!("trained in {:.1?}", t0.elapsed());
    println!("mean positive cosine {:.4}", mean_positive_cosine(&out.scorer, &prepared)?);

    let eval = evaluate_toy(&out.scorer, &test, &anchors, &desk_pipeline_config(), &EvalConfig::default())?;
    let r = &eval.report;
    println!(
        "lesions {} hits {} fps {} sens {:.3} fps/vol {:.2} miou {:.3}",
        r.n_lesions, r.n_hits, r.n_false_positives, r.sensitivity, r.fps_per_volume, r.miou
    );
    let mut thresholds: Vec<f64> = eval.results.iter().flat_map(|v| v.detections.iter().map(|d| d.score)).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let points = froc(&eval.results, &thresholds, &EvalConfig::default().matching)?;
    println!("best at <=2 fps: {:?}", sensitivity_at_fps(&points, 2.0));
    println!("classification: {:?}", eval.classification);
    println!("total {:.1?}", t0.elapsed());
    Ok(())
}
