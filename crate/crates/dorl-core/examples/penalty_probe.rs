//! Prints the uncertainty and entropy-bonus landscape of a trained pipeline
//! against item exposure: which items the behavior policy favored, what
//! variance the reward model assigns them, and what order-1 entropy bonus
//! they earn. Useful when tuning a synthetic world.
//!
//! Usage: cargo run -p dorl-core --example penalty_probe -- CONFIG OUT_DIR

use dorl_core::data::dominated_categories;
use dorl_core::penalty::entropy_penalty;
use dorl_core::pipeline::{
    load_config, load_entropy_index, load_logs_artifact, load_user_model, load_world, Workdir,
};
use dorl_core::user_model::{ensemble_reward, uncertainty};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let config = args.next().expect("usage: penalty_probe CONFIG OUT_DIR");
    let out = Workdir::new(args.next().expect("usage: penalty_probe CONFIG OUT_DIR"));

    let cfg = load_config(config)?;
    let world = load_world(&cfg, &out)?;
    let logs = load_logs_artifact(&cfg, &out)?;
    let ensemble = load_user_model(&cfg, &out, false)?;
    let index = load_entropy_index(&cfg, &out)?;

    let mut counts = vec![0u64; world.n_items];
    for r in &logs.records {
        counts[r.item_id as usize] += 1;
    }

    let mean_over_users = |f: &dyn Fn(usize, usize) -> f64, item: usize| -> f64 {
        (0..world.n_users).map(|u| f(u, item)).sum::<f64>() / world.n_users as f64
    };

    // Group items by exposure count bands.
    let bands: [(u64, u64); 6] = [
        (0, 1),
        (1, 2),
        (2, 6),
        (6, 21),
        (21, 101),
        (101, u64::MAX),
    ];
    println!(
        "{:>12} {:>7} {:>9} {:>9} {:>9} {:>8}",
        "exposure", "items", "mean_pu", "mean_e1", "mean_rhat", "cats"
    );
    for (lo, hi) in bands {
        let items: Vec<usize> = (0..world.n_items)
            .filter(|&i| counts[i] >= lo && counts[i] < hi)
            .collect();
        if items.is_empty() {
            continue;
        }
        let mean_pu = items
            .iter()
            .map(|&i| mean_over_users(&|u, i| uncertainty(&ensemble, u, i), i))
            .sum::<f64>()
            / items.len() as f64;
        let mean_e1 = items
            .iter()
            .map(|&i| entropy_penalty(&index, &[i as u32]))
            .sum::<f64>()
            / items.len() as f64;
        let mean_rhat = items
            .iter()
            .map(|&i| mean_over_users(&|u, i| ensemble_reward(&ensemble, u, i), i))
            .sum::<f64>()
            / items.len() as f64;
        let cats: std::collections::BTreeSet<u32> =
            items.iter().map(|&i| world.item_category[i]).collect();
        let hi_label = if hi == u64::MAX {
            "inf".to_string()
        } else {
            hi.to_string()
        };
        println!(
            "{:>5}..{:<5} {:>7} {:>9.4} {:>9.4} {:>9.4} {:>8}",
            lo,
            hi_label,
            items.len(),
            mean_pu,
            mean_e1,
            mean_rhat,
            cats.len()
        );
    }

    let dominated = dominated_categories(&logs, cfg.eval.coverage)?;
    println!("\ndominated categories (>= {:.0}% coverage): {dominated:?}", cfg.eval.coverage * 100.0);
    let mut by_cat = vec![0u64; world.n_categories];
    for r in &logs.records {
        by_cat[r.category_id as usize] += 1;
    }
    println!("events per category: {by_cat:?}");
    Ok(())
}
