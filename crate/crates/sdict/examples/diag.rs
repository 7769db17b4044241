//! Scratch probe: break down held-out errors by caption position, scene
//! size, and question type for a saved checkpoint.

use sdict::autograd::Tape;
use sdict::checkpoint;
use sdict::config::TrainConfig;
use sdict::dataset;
use sdict::model::{argmax, Model};

fn main() {
    let cfg = TrainConfig::default();
    let mut model = Model::new(&cfg.model).unwrap();
    let ckpt = std::env::args().nth(1).unwrap_or("/tmp/sdict_converge/model.sdv1".into());
    checkpoint::load_into(std::path::Path::new(&ckpt), &mut model.store).unwrap();

    let all = dataset::gen_dataset(cfg.data_seed, cfg.train_examples + cfg.eval_examples, 32);
    let eval = &all[cfg.train_examples..];

    let mut pos_hits = vec![0usize; 8];
    let mut pos_tot = vec![0usize; 8];
    let mut by_scene = [[0usize; 2]; 3]; // [n_shapes-1][hit,tot] for vqa
    let mut q_stats = std::collections::HashMap::new();
    let mut cap_by_scene = [[0usize; 2]; 3];

    for ex in eval {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &ex.pixels, &ex.question_ids).unwrap();
        let lc = tape.value(out.logits_cap);
        let ns = ex.spec.len().min(3) - 1;
        for t in 0..8 {
            if ex.caption_ids[t] == 0 {
                continue; // PAD
            }
            let pred = argmax(lc.row(t));
            pos_tot[t] += 1;
            cap_by_scene[ns][1] += 1;
            if pred == ex.caption_ids[t] {
                pos_hits[t] += 1;
                cap_by_scene[ns][0] += 1;
            }
        }
        let lv = tape.value(out.logits_vqa);
        let pred = argmax(lv.row(0));
        // Question token 0 distinguishes the two templates; count answers are
        // ids 0..3, what-at answers 3..6.
        let key = if ex.answer_id < 3 { "count" } else { "what_at" };
        let e = q_stats.entry(key).or_insert([0usize; 2]);
        e[1] += 1;
        by_scene[ns][1] += 1;
        if pred == ex.answer_id {
            e[0] += 1;
            by_scene[ns][0] += 1;
        }
    }

    println!("caption accuracy by position (quad fields: shape,size,intensity,cell x2):");
    for t in 0..8 {
        if pos_tot[t] > 0 {
            println!(
                "  pos {t}: {:.3} ({}/{})",
                pos_hits[t] as f64 / pos_tot[t] as f64,
                pos_hits[t],
                pos_tot[t]
            );
        }
    }
    println!("caption accuracy by shape count:");
    for n in 0..3 {
        if cap_by_scene[n][1] > 0 {
            println!(
                "  {} shapes: {:.3} ({}/{})",
                n + 1,
                cap_by_scene[n][0] as f64 / cap_by_scene[n][1] as f64,
                cap_by_scene[n][0],
                cap_by_scene[n][1]
            );
        }
    }
    println!("vqa accuracy by question type:");
    for (k, v) in &q_stats {
        println!("  {k}: {:.3} ({}/{})", v[0] as f64 / v[1] as f64, v[0], v[1]);
    }
    println!("vqa accuracy by shape count:");
    for n in 0..3 {
        if by_scene[n][1] > 0 {
            println!(
                "  {} shapes: {:.3} ({}/{})",
                n + 1,
                by_scene[n][0] as f64 / by_scene[n][1] as f64,
                by_scene[n][0],
                by_scene[n][1]
            );
        }
    }
}
