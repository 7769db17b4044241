// scratch: desk-scale convergence probe
use sdict::config::TrainConfig;

fn main() {
    let mut cfg = TrainConfig::default();
    cfg.eval_every = 50;
    cfg.checkpoint_every = 1000;
    let dir = std::env::temp_dir().join("sdict_converge");
    if let Ok(s) = std::env::var("STEPS") { cfg.steps = s.parse().unwrap(); }
    if let Ok(p) = std::env::var("PATCH") { cfg.model.patch_side = p.parse().unwrap(); }
    if let Ok(l) = std::env::var("L1") { cfg.loss.lambda_l1 = l.parse().unwrap(); }
    let t0 = std::time::Instant::now();
    let out = sdict::trainer::train(&cfg, &dir).unwrap();
    println!(
        "stopped at step {} (early={}) in {:.1?}; cap {:.4} vqa {:.4}",
        out.steps_run, out.early_stopped, t0.elapsed(),
        out.final_eval.caption_acc, out.final_eval.vqa_acc
    );
    let log = std::fs::read_to_string(&out.metrics_path).unwrap();
    for (i, line) in log.lines().enumerate() {
        if i % 100 == 0 { println!("{line}"); }
    }
}
