//! Rough per-component timing at the acceptance-run scale.

use evae::autodiff::Tape;
use evae::config::RunConfig;
use evae::kernels;
use evae::nn::Bound;
use evae::tensor::Tensor;
use evae::trainer::{build_step_graph, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let cfg = RunConfig::from_toml(
        r#"
        [schedule]
        gamma = 0.6
        [data]
        resolution = [32, 32]
        count = 64
        [encoder]
        downsample_factor = 4
        latent_channels = 4
        base_width = 8
        ch_mult = [1, 1, 2]
        [decoder]
        width_scale = 0.125
        [discriminator]
        base_width = 16
        num_downsample_layers = 3
        [trainer]
        batch_size = 8
        total_steps = 10
        warmup_steps = 2
        seed = 0
        [eval]
        count = 8
        "#,
        &[],
    )
    .unwrap();
    let trainer = Trainer::<f32>::new(&cfg).unwrap();
    let batch = trainer.dataset.load_batch::<f32>(0, 0, 8).unwrap();
    let draws = trainer.draws_for_step(0);

    // raw conv throughput
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x: Tensor<f32> = Tensor::randn(&[8, 8, 32, 32], &mut rng);
    let w: Tensor<f32> = Tensor::randn(&[8, 8, 3, 3], &mut rng);
    let t0 = Instant::now();
    let reps = 50;
    for _ in 0..reps {
        let _ = kernels::conv2d(&x, &w, 1, 1);
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    let flops = 2.0 * 8.0 * 16.0 * 16.0 * 9.0 * 1024.0;
    println!(
        "conv2d 8x16x32x32 k3: {:.3} ms  ({:.2} GFLOP/s)",
        dt * 1e3,
        flops / dt / 1e9
    );

    // decoder forward only
    let t0 = Instant::now();
    for i in 0..5 {
        let mut tape = Tape::new();
        let dec_bound = Bound::new(&mut tape, &trainer.dec_params);
        let xid = tape.leaf(batch.clone());
        let zdata: Tensor<f32> = Tensor::randn(&[8, 4, 8, 8], &mut ChaCha8Rng::seed_from_u64(i));
        let zid = tape.leaf(zdata);
        let v = trainer
            .decoder
            .forward(&mut tape, &dec_bound, xid, &draws.t, zid)
            .unwrap();
        let _ = tape.value(v);
        if i == 0 {
            println!("decoder forward tape nodes: {}", tape.len());
        }
    }
    println!(
        "decoder forward: {:.1} ms",
        t0.elapsed().as_secs_f64() / 5.0 * 1e3
    );

    // full step graph + both gradients
    let t0 = Instant::now();
    for _ in 0..3 {
        let mut tape = Tape::new();
        let graph = build_step_graph(
            &mut tape,
            &cfg,
            &trainer.encoder,
            &trainer.enc_params,
            &trainer.decoder,
            &trainer.dec_params,
            trainer
                .disc
                .as_ref()
                .map(|d| (d, trainer.disc_params.as_ref().unwrap())),
            trainer.extractor.as_ref(),
            &batch,
            &draws,
            true,
        )
        .unwrap();
        let fwd_nodes = tape.len();
        let t1 = Instant::now();
        if let (Some(td), Some(db)) = (graph.total_d, graph.disc_bound.as_ref()) {
            let ids: Vec<_> = db.entries().iter().map(|(_, i)| *i).collect();
            let _ = tape.grad(td, &ids).unwrap();
        }
        let d_ms = t1.elapsed().as_secs_f64() * 1e3;
        let t2 = Instant::now();
        let mut ids: Vec<_> = graph.enc_bound.entries().iter().map(|(_, i)| *i).collect();
        ids.extend(graph.dec_bound.entries().iter().map(|(_, i)| *i));
        let _ = tape.grad(graph.total_g, &ids).unwrap();
        println!(
            "forward {} nodes; d-grad {:.0} ms; g-grad {:.0} ms; total nodes {}",
            fwd_nodes,
            d_ms,
            t2.elapsed().as_secs_f64() * 1e3,
            tape.len()
        );
    }
    println!(
        "full graph+grads: {:.1} ms/step",
        t0.elapsed().as_secs_f64() / 3.0 * 1e3
    );
    #[cfg(feature = "profile-ops")]
    {
        evae::autodiff::profile::reset();
        let mut tape = Tape::new();
        let graph = build_step_graph(
            &mut tape,
            &cfg,
            &trainer.encoder,
            &trainer.enc_params,
            &trainer.decoder,
            &trainer.dec_params,
            trainer
                .disc
                .as_ref()
                .map(|d| (d, trainer.disc_params.as_ref().unwrap())),
            trainer.extractor.as_ref(),
            &batch,
            &draws,
            true,
        )
        .unwrap();
        if let (Some(td), Some(db)) = (graph.total_d, graph.disc_bound.as_ref()) {
            let ids: Vec<_> = db.entries().iter().map(|(_, i)| *i).collect();
            let _ = tape.grad(td, &ids).unwrap();
        }
        let mut ids: Vec<_> = graph.enc_bound.entries().iter().map(|(_, i)| *i).collect();
        ids.extend(graph.dec_bound.entries().iter().map(|(_, i)| *i));
        let _ = tape.grad(graph.total_g, &ids).unwrap();
        println!(
            "---- per-op time ----\n{}",
            evae::autodiff::profile::report()
        );
    }
}
