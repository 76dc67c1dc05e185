//! Trains all four objectives on a planted world and prints the
//! closed-closed correlation between planted similarity and the kernel of
//! the learned d-vectors.
//!
//! cargo run --release -p simembed --example planted_recovery -- \
//!     [seed] [hidden,...] [epochs] [cluster_strength] [spread] [clusters]
//!
//! `LOSSES=dvec_sce,prop_mat` restricts the objectives; `epochs = 0` only
//! reports the negative score fraction of the world.

use std::time::Instant;

use simembed::analysis::{embedding_correlation, PairSubset, SubsetKind};
use simembed::datagen::{generate_roster_frames, generate_world, WorldConfig};
use simembed::embedding::{extract_all, train, TrainConfig};
use simembed::losses::{Kernel, LossTag};
use simembed::network::Architecture;

fn main() -> simembed::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map_or(1, |s| s.parse().expect("seed"));
    let hidden: Vec<usize> = args.get(2).map_or(vec![32, 32, 32, 4], |s| {
        s.split(',').map(|v| v.parse().expect("size")).collect()
    });
    let epochs: usize = args.get(3).map_or(300, |s| s.parse().expect("epochs"));

    let mut wc = WorldConfig::new(16, 13, 4, 16, 0.3, seed);
    if let Some(v) = args.get(4) {
        wc.cluster_strength = v.parse().expect("strength");
    }
    if let Some(v) = args.get(5) {
        wc.spread = v.parse().expect("spread");
    }
    if let Some(v) = args.get(6) {
        wc.clusters = v.parse().expect("clusters");
    }
    let world = generate_world(&wc)?;
    let answers = simembed::datagen::generate_answers(&world, 10, 3, 0.5, seed)?;
    let hist = simembed::scoring::global_histogram(&answers)?;
    println!("negative score fraction {:.3}", hist.negative_fraction());
    if epochs == 0 {
        return Ok(());
    }
    let roster = generate_roster_frames(&world, 200, 0.7, seed)?;
    let sim = &world.ground_truth_sim;
    println!("negative ground-truth fraction {:.3}", world.negative_fraction());
    let arch = Architecture { hidden };
    let only: Option<Vec<LossTag>> = std::env::var("LOSSES")
        .ok()
        .map(|v| v.split(',').map(|t| t.parse().expect("loss")).collect());
    for loss in only.unwrap_or(LossTag::ALL.to_vec()) {
        let start = Instant::now();
        let mut cfg = TrainConfig::new(loss);
        cfg.epochs = epochs;
        cfg.seed = seed;
        let out = train(&roster, sim, &cfg, &arch)?;
        let dvecs = extract_all(&out.network, &roster)?;
        let r = |kind, pos| {
            embedding_correlation(
                &dvecs,
                sim,
                Kernel::Sigmoid,
                PairSubset::new(kind, pos),
                &world.roster,
            )
            .map(|c| c.r)
            .unwrap_or(f64::NAN)
        };
        println!(
            "{loss:12} loss {:.4} -> {:.4}  r(cc) {:.3}  r(co) {:.3}  r(cc+) {:.3}  {:.1}s",
            out.loss_trace[0],
            out.loss_trace.last().unwrap(),
            r(SubsetKind::ClosedClosed, false),
            r(SubsetKind::ClosedOpen, false),
            r(SubsetKind::ClosedClosed, true),
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
