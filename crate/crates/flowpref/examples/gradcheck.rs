//! Reverse-mode gradients against central finite differences, for both the
//! flow-matching loss and the preference losses.
//!
//! ```bash
//! cargo run -p flowpref --example gradcheck
//! ```

use flowpref::dpo::{dense_loss_node, pair_reward_graph, DenseMode, DpoConfig};
use flowpref::flow::{draw_flow, flow_item_loss_graph, LogitNormal};
use flowpref::graph::Tape;
use flowpref::net::{NetConfig, VelocityNet};
use flowpref::preference::{DenseLabel, PreferencePair, Provenance};
use flowpref::tensor::Tensor;
use flowpref::world::{make_condition, render_video, TrajectorySpec};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn main() {
    let cfg = NetConfig {
        t_len: 12,
        d_len: 8,
        window: 3,
        time_emb: 4,
        cond_dim: 5,
        hidden: vec![10],
    };
    let net = VelocityNet::init(cfg, 3).unwrap();
    println!("network with {} parameters", net.param_count());

    let spec = TrajectorySpec {
        amplitude: 2.0,
        frequency: 1.0,
        width: 1.2,
        phase: 0.3,
        d_len: 8,
        t_len: 12,
    };
    let video = render_video(&spec).unwrap();
    let cond = make_condition(&spec);
    let mut rng = ChaCha12Rng::seed_from_u64(4);

    // flow-matching loss
    let draw = draw_flow(&LogitNormal::default(), &[12, 8], &mut rng);
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let loss = flow_item_loss_graph(&mut tape, &net, &bound, &video, &cond, &draw).unwrap();
    let value = tape.scalar_value(loss);
    let grads = bound.collect_grads(&net, &tape.backward(loss).unwrap());
    println!("flow loss {value:.5}, gradient norm {:.5}", grads.global_norm());

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let pi = rng.gen_range(0..grads.tensors.len());
        let ei = rng.gen_range(0..grads.tensors[pi].len());
        let analytic = grads.tensors[pi].data()[ei];
        let eval = |delta: f64| {
            let mut probe = net.clone();
            probe.params_mut()[pi].data_mut()[ei] += delta;
            flowpref::flow::flow_loss_at(&probe, &video, &cond, draw.t, &draw.eps).unwrap()
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        worst = worst.max((analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6));
    }
    println!("flow loss: max relative error vs finite differences {worst:.2e}");

    // dense preference loss through the full composite graph
    let reference = VelocityNet::init(net.cfg.clone(), 5).unwrap();
    let pair = PreferencePair {
        id: "demo".into(),
        spec_id: 0,
        cond: cond.clone(),
        x0: video
            .zip_map(&Tensor::randn(vec![12, 8], &mut rng), |a, b| a + 0.1 * b)
            .unwrap(),
        x1: video
            .zip_map(&Tensor::randn(vec![12, 8], &mut rng), |a, b| a + 0.1 * b)
            .unwrap(),
        provenance: Provenance::Guided { eta: 0.7 },
        global: None,
        dense: None,
    };
    let label = DenseLabel::new(vec![1, 0, -1], 4).unwrap();
    let dcfg = DpoConfig::default();
    let t = 0.5;
    let eps = Tensor::randn(vec![12, 8], &mut rng);

    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let g = pair_reward_graph(
        &mut tape, &net, &bound, &reference, &pair.x0, &pair.x1, &pair.cond, t, &eps, &eps,
    )
    .unwrap();
    let loss = dense_loss_node(&mut tape, g.diff, &label, &dcfg).unwrap();
    let value = tape.scalar_value(loss);
    let grads = bound.collect_grads(&net, &tape.backward(loss).unwrap());
    println!("\ndense preference loss {value:.5} (ln 2 is {:.5})", std::f64::consts::LN_2);

    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let pi = rng.gen_range(0..grads.tensors.len());
        let ei = rng.gen_range(0..grads.tensors[pi].len());
        let analytic = grads.tensors[pi].data()[ei];
        let eval = |delta: f64| {
            let mut probe = net.clone();
            probe.params_mut()[pi].data_mut()[ei] += delta;
            flowpref::dpo::dense_dpo_loss_at(
                &probe,
                &reference,
                &pair,
                &label,
                &DpoConfig {
                    dense_mode: DenseMode::PerSegment,
                    ..dcfg.clone()
                },
                t,
                &eps,
                &eps,
            )
            .unwrap()
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        worst = worst.max((analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6));
    }
    println!("dense loss: max relative error vs finite differences {worst:.2e}");
}
