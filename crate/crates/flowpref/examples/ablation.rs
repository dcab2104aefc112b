//! Run one ablation study end to end and print its report.
//!
//! Pick the study on the command line (default: flip):
//!
//! ```bash
//! cargo run -p flowpref --example ablation -- flip
//! cargo run -p flowpref --example ablation -- majority_vote
//! cargo run -p flowpref --example ablation -- segment_length
//! ```

use flowpref::harness::studies::{run_study, Study};
use flowpref::harness::RunConfig;
use flowpref::world::ArtifactKind;

fn main() {
    let name = std::env::args().nth(1).unwrap_or_else(|| "flip".into());
    let study = Study::parse(&name).expect("flip|quantity|segment_length|majority_vote|new_gt");

    let mut cfg = RunConfig::default();
    cfg.seed = 1;
    cfg.sft.fit.steps = 1500;
    cfg.annotate.tau_frac = 0.3;
    cfg.annotate.tau_global_frac = 0.3;
    cfg.dpo.steps = 300;
    if study == Study::Flip {
        // label damage shows best against injected artifacts
        cfg.pairs.artifacts.prob = 0.75;
        cfg.pairs.artifacts.both_prob = 0.35;
        cfg.pairs.artifacts.severities = vec![8.0, 16.0];
        cfg.pairs.artifacts.kind = ArtifactKind::AmplitudeSpike;
    }

    println!("running the '{}' study (one base model, one arm per row)...\n", study.name());
    let report = run_study(&cfg, study).unwrap();
    for line in report.csv_lines() {
        println!("{line}");
    }
}
