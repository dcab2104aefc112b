//! The label toolbox: per-segment and whole-clip oracles, stochastic
//! preference draws, flipping, majority voting, filtering, and the JSONL
//! exchange format.
//!
//! ```bash
//! cargo run -p flowpref --example label_pipeline
//! ```

use flowpref::preference::{
    bt_sample, export_labels, filter_pairs, flip_dense, import_labels, majority_vote,
    oracle_dense, oracle_global, segment_bounds, self_consistency, DenseLabel, Pref,
    PreferencePair, Provenance,
};
use flowpref::tensor::Tensor;
use flowpref::world::{make_condition, render_video, TrajectorySpec};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn main() {
    let spec = TrajectorySpec {
        amplitude: 3.0,
        frequency: 1.0,
        width: 1.2,
        phase: 0.0,
        d_len: 16,
        t_len: 24,
    };
    let gt = render_video(&spec).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(11);

    // two noisy copies; corrupt one segment of the second copy harder
    let x0 = gt
        .zip_map(&Tensor::randn(vec![24, 16], &mut rng), |a, b| a + 0.05 * b)
        .unwrap();
    let mut x1 = gt
        .zip_map(&Tensor::randn(vec![24, 16], &mut rng), |a, b| a + 0.05 * b)
        .unwrap();
    for f in (8..12).chain(16..20) {
        for v in x1.row_mut(f) {
            *v += 0.4;
        }
    }

    let seg = 4;
    println!("segments: {:?}", segment_bounds(24, seg).unwrap());
    let dense = oracle_dense(&x0, &x1, &gt, seg, 1e-3).unwrap();
    println!("dense label: {:?} (+1 prefers the first clip)", dense.seg_labels);
    println!("majority vote: {:?}", majority_vote(&dense));
    println!(
        "global oracle: {:?}",
        oracle_global(&x0, &x1, &gt, 0.0, 1e-4).unwrap()
    );

    // stochastic labels from rewards
    let wins = (0..10_000)
        .filter(|_| bt_sample(2.0, 0.0, &mut rng) == Pref::First)
        .count();
    println!(
        "\nreward gap 2.0 wins {:.1}% of stochastic draws (analytic 88.1%)",
        wins as f64 / 100.0
    );

    // perturbation and self-consistency
    let flipped = flip_dense(&dense, 0.4, &mut rng);
    println!("\n40% flipped: {:?}", flipped.seg_labels);
    println!(
        "self-consistency keeps order-stable entries only: {:?}",
        flowpref::preference::self_consistency_dense(&dense, &dense.negate())
            .unwrap()
            .seg_labels
    );
    println!(
        "an order-biased judgment becomes a tie: {:?}",
        self_consistency(Pref::First, Pref::First)
    );

    // filtering and the exchange file
    let mk = |id: &str, dense: Option<DenseLabel>| PreferencePair {
        id: id.into(),
        spec_id: 0,
        cond: make_condition(&spec),
        x0: x0.clone(),
        x1: x1.clone(),
        provenance: Provenance::Guided { eta: 0.7 },
        global: None,
        dense,
    };
    let pairs = vec![
        mk("p0", Some(dense.clone())),
        mk("p1", Some(DenseLabel::new(vec![0; 6], seg).unwrap())),
    ];
    let (kept, stats) = filter_pairs(pairs, 0.2).unwrap();
    println!(
        "\nfilter at 20% non-tie segments: kept {}/{} (retention {:.2})",
        stats.kept, stats.total, stats.retention
    );

    let dir = std::env::temp_dir().join("flowpref_label_demo");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("labels.jsonl");
    export_labels(&kept, &path).unwrap();
    println!("\nexchange file {}:", path.display());
    print!("{}", std::fs::read_to_string(&path).unwrap());

    let mut fresh = vec![mk("p0", None)];
    let stats = import_labels(&mut fresh, &path).unwrap();
    println!(
        "re-imported {} records; labels identical: {}",
        stats.applied,
        fresh[0].dense.as_ref() == kept[0].dense.as_ref()
    );
}
