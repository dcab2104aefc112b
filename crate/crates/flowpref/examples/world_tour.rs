//! Tour of the synthetic micro-video world: trajectories, rendering,
//! artifact injection, and motion measurement.
//!
//! ```bash
//! cargo run -p flowpref --example world_tour
//! ```

use flowpref::world::{
    dynamic_degree, inject_artifact, make_condition, render_video, ArtifactEvent, ArtifactKind,
    MicroVideo, SpecLattice, TrajectorySpec,
};
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
    let spec = TrajectorySpec {
        amplitude: 4.0,
        frequency: 1.0,
        width: 1.2,
        phase: 0.0,
        d_len: 16,
        t_len: 24,
    };
    let video = render_video(&spec).unwrap();
    println!("ground truth (rows = frames, columns = grid cells):");
    println!("{}", ascii(&video));
    println!("dynamic degree: {:.4}", dynamic_degree(&video));
    println!("condition vector: {:?}\n", make_condition(&spec).data());

    let calm = render_video(&TrajectorySpec {
        amplitude: 0.5,
        ..spec
    })
    .unwrap();
    println!(
        "a calm trajectory has a lower dynamic degree: {:.4}",
        dynamic_degree(&calm)
    );

    let mut rng = ChaCha12Rng::seed_from_u64(7);
    for (kind, severity) in [
        (ArtifactKind::SmoothingBlur, 8.0),
        (ArtifactKind::AmplitudeSpike, 8.0),
    ] {
        let event = ArtifactEvent {
            start_frame: 8,
            end_frame: 12,
            severity,
            kind,
        };
        let corrupted = inject_artifact(&video, &event, &mut rng).unwrap();
        println!(
            "\n{:?} at severity {severity} on frames 8..12 (everything else is bit-identical):",
            kind
        );
        println!("{}", ascii(&corrupted));
        println!(
            "distance from clean: {:.3}, dynamic degree: {:.4}",
            corrupted.sub(&video).unwrap().norm(),
            dynamic_degree(&corrupted)
        );
    }

    let lattice = SpecLattice::default();
    println!(
        "\ndefault lattice: {} specs across {} motion strata",
        lattice.enumerate_all(24, 16).len(),
        lattice.n_strata()
    );
}
