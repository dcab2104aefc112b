//! Fit the velocity model on rendered clips and sample from it.
//!
//! ```bash
//! cargo run -p flowpref --example sft_training
//! ```

use flowpref::flow::{euler_sample, SamplerConfig};
use flowpref::harness::stages::{build_world, eval_rows, fit_sft, summarize};
use flowpref::harness::RunConfig;
use flowpref::world::MicroVideo;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn ascii(video: &MicroVideo) -> String {
    let shades = [' ', '.', ':', '+', '*', '#'];
    (0..video.rows())
        .map(|f| {
            video
                .row(f)
                .iter()
                .map(|&v| {
                    let idx = (v.clamp(0.0, 1.0) * (shades.len() - 1) as f64).round() as usize;
                    shades[idx]
                })
                .collect::<String>()
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn main() {
    let mut cfg = RunConfig::default();
    cfg.seed = 1;
    cfg.sft.fit.steps = 1500;

    let data = build_world(&cfg).unwrap();
    println!(
        "dataset: {} training clips, {} holdout clips",
        data.train.len(),
        data.holdout.len()
    );

    let (net, summary, records) = fit_sft(&cfg, &data).unwrap();
    println!(
        "flow loss over training: {:.3} -> {:.3}",
        records.first().unwrap().loss,
        records.last().unwrap().loss
    );
    println!(
        "holdout flow loss: {:.3} -> {:.3}",
        summary.holdout_loss_init, summary.holdout_loss_final
    );

    // sample a clip for one holdout condition and compare with the truth
    let item = &data.holdout[0];
    let scfg = SamplerConfig::new(40).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(99);
    let sample = euler_sample(&net, &item.cond, &[24, 16], &scfg, &mut rng).unwrap();
    println!("\nground truth:\n{}", ascii(&item.video));
    println!("\nsampled from noise, same condition:\n{}", ascii(&sample));

    let rows = eval_rows(&net, &data.holdout, cfg.world.seg_frames, 40, 1, 7).unwrap();
    let s = summarize(&rows);
    println!(
        "\nholdout metrics: segment error {:.4}, temporal error {:.4}, dynamic degree {:.4}",
        s.toy_segment_error, s.toy_temporal_error, s.toy_dynamic_degree
    );
}
