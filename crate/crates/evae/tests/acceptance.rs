//! Acceptance suite: every release criterion runs here, one pass/fail line
//! per criterion. Training-based criteria share the same desk-scale runs,
//! so the whole suite executes as a single sequential test.
//!
//! `EVAE_ACCEPT_STEPS` can shorten the training criteria while iterating
//! locally; the shipped default is the full 20k steps per stage.

use evae::adversary::{Discriminator, DiscriminatorConfig, TrajectoryPair};
use evae::autodiff::Tape;
use evae::config::RunConfig;
use evae::decoder::{Decoder, DecoderConfig};
use evae::encoder::{Encoder, EncoderConfig};
use evae::flowmath::{self, InferenceGrid, ScheduleConfig, ScheduleKind, TimeSamplerConfig};
use evae::metrics::{self, evaluate_model, FrechetStats};
use evae::objectives::{LossBundle, RandomPyramid};
use evae::sampler::{self, GridKind, ModelSampler, SamplerConfig};
use evae::tensor::Tensor;
use evae::trainer::{build_step_graph, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

struct Outcome {
    name: &'static str,
    passed: bool,
    detail: String,
    seconds: f64,
}

fn run_criterion(
    results: &mut Vec<Outcome>,
    name: &'static str,
    f: impl FnOnce() -> Result<String, String>,
) {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    let seconds = start.elapsed().as_secs_f64();
    println!(
        "{} {name} [{seconds:.1}s] {detail}",
        if passed { "PASS" } else { "FAIL" }
    );
    results.push(Outcome { name, passed, detail, seconds });
}

fn desk_steps() -> usize {
    std::env::var("EVAE_ACCEPT_STEPS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(20_000)
}

fn desk_config(stage: &str) -> RunConfig {
    let steps = desk_steps();
    let warmup = (steps / 10).min(2000);
    RunConfig::from_toml(
        &format!(
            r#"
            [schedule]
            gamma = 0.6

            [data]
            resolution = [32, 32]
            count = 256
            seed = 0

            [encoder]
            downsample_factor = 4
            latent_channels = 4
            base_width = 8
            ch_mult = [1, 1, 2]
            num_res_blocks = 1

            [decoder]
            width_scale = 0.125

            [discriminator]
            base_width = 16
            num_downsample_layers = 3

            [trainer]
            batch_size = 4
            total_steps = {steps}
            warmup_steps = {warmup}
            lr = 1e-3
            seed = 42
            ablation_stage = "{stage}"

            [eval]
            count = 128
            batch_size = 16
            "#
        ),
        &[],
    )
    .expect("desk config parses")
}

/// Trains one ablation stage to completion, returning the trainer and its
/// loss stream.
fn train_stage(stage: &str) -> (Trainer<f32>, Vec<LossBundle>) {
    let cfg = desk_config(stage);
    let mut trainer = Trainer::<f32>::new(&cfg).expect("trainer builds");
    let mut stream = Vec::with_capacity(cfg.trainer.total_steps);
    while trainer.step < cfg.trainer.total_steps {
        let b = trainer.train_step().expect("finite training step");
        stream.push(b);
    }
    (trainer, stream)
}

fn eval_trainer(trainer: &Trainer<f32>, steps: usize, grid: GridKind, resolution: usize) -> metrics::EvalReport {
    let spec = evae::data_io::DatasetSpec {
        resolution: (resolution, resolution),
        seed: trainer.cfg.eval.seed,
        count: trainer.cfg.eval.count,
        augment: Default::default(),
        ..trainer.cfg.data.clone()
    };
    let ds = evae::data_io::Dataset::load(&spec).expect("eval corpus");
    let images: Tensor<f32> = ds.stacked();
    let extractor = RandomPyramid::new(trainer.cfg.eval.metric_extractor_seed);
    let sampler_cfg = SamplerConfig {
        num_steps: steps,
        grid,
        gamma: trainer.cfg.schedule.gamma,
        seed: 9,
        ..trainer.cfg.sampler
    };
    let (enc_params, dec_params) = trainer.eval_params();
    evaluate_model(
        &trainer.encoder,
        enc_params,
        &trainer.decoder,
        dec_params,
        &sampler_cfg,
        &images,
        &extractor,
        trainer.cfg.eval.batch_size,
        trainer.digest(),
    )
    .expect("evaluation runs")
}

fn criterion_1_algebraic() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut max_x0 = 0.0f64;
    let mut max_eps = 0.0f64;
    for _ in 0..10_000 {
        let x0: Tensor<f64> = Tensor::randn(&[8], &mut rng);
        let eps: Tensor<f64> = Tensor::randn(&[8], &mut rng);
        let t: f64 = rng.gen();
        let xt = flowmath::rf_point(&x0, &eps, t).unwrap();
        let v = flowmath::velocity(&x0, &eps, 1.0).unwrap();
        let rec = flowmath::estimate_x0(&xt, t, &v).unwrap();
        let e1 = rec.zip_map(&x0, |a, b| (a - b).abs()).unwrap().max_abs();
        max_x0 = max_x0.max(e1);
        let eh = flowmath::eps_from_velocity(&xt, t, &v).unwrap();
        let e2 = eh.zip_map(&eps, |a, b| (a - b).abs()).unwrap().max_abs();
        max_eps = max_eps.max(e2);
    }
    if max_x0 >= 1e-12 || max_eps >= 1e-12 {
        return Err(format!("round-trip errors {max_x0:.2e} / {max_eps:.2e} exceed 1e-12"));
    }
    // w_t equivalence at 100 random times
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let t = 0.01 + 0.98 * rng.gen::<f64>();
        let x0: Tensor<f64> = Tensor::randn(&[64], &mut rng);
        let eps: Tensor<f64> = Tensor::randn(&[64], &mut rng);
        let v_true = flowmath::velocity(&x0, &eps, 1.0).unwrap();
        let xt = flowmath::rf_point(&x0, &eps, t).unwrap();
        let noise: Tensor<f64> = Tensor::randn(&[64], &mut rng);
        let v_hat = v_true.zip_map(&noise, |a, b| a + b).unwrap();
        let v_err: f64 = v_hat.zip_map(&v_true, |a, b| (a - b) * (a - b)).unwrap().sum();
        let eps_hat = flowmath::eps_from_velocity(&xt, t, &v_hat).unwrap();
        let e_err: f64 = eps_hat.zip_map(&eps, |a, b| (a - b) * (a - b)).unwrap().sum();
        let want = (1.0 / (1.0 - t)).powi(2);
        let rel = ((v_err / e_err) - want).abs() / want;
        worst = worst.max(rel);
    }
    if worst >= 1e-9 {
        return Err(format!("w_t equivalence rel error {worst:.2e} exceeds 1e-9"));
    }
    Ok(format!(
        "10^4 round trips exact to {max_x0:.1e}/{max_eps:.1e}; w_t ratio rel err {worst:.1e}"
    ))
}

fn criterion_2_schedule() -> Result<String, String> {
    let r0 = flowmath::rho_log(0.0, 1.0, 100.0).unwrap();
    let r1 = flowmath::rho_log(1.0, 1.0, 100.0).unwrap();
    let rh = flowmath::rho_log(0.5, 1.0, 100.0).unwrap();
    if (r0 - 1.0).abs() > 0.0 || (r1 - 0.0).abs() > 0.0 {
        return Err(format!("rho_log boundaries {r0} / {r1}"));
    }
    if (rh - 0.85166).abs() > 1e-4 {
        return Err(format!("rho_log(0.5) = {rh}, want 0.85166 +- 1e-4"));
    }
    for n in [1usize, 2, 3, 5, 10, 50] {
        let grid = InferenceGrid::rho_log(n, 1.0, 100.0).map_err(|e| e.to_string())?;
        let gaps: Vec<f64> = grid.times.windows(2).map(|w| w[0] - w[1]).collect();
        for w in gaps.windows(2) {
            if w[1] <= w[0] {
                return Err(format!("gaps not strictly increasing toward t=0 at N={n}: {gaps:?}"));
            }
        }
    }
    // DDPM coefficients vs a brute-force product oracle
    let cfg = ScheduleConfig {
        kind: ScheduleKind::DdpmLinear,
        num_discrete_steps: 1000,
        ..ScheduleConfig::default()
    };
    let (alpha, sigma) = flowmath::ddpm_coefficients(&cfg).unwrap();
    let betas = flowmath::ddpm_betas(&cfg).unwrap();
    let mut prod = 1.0f64;
    let mut worst_norm = 0.0f64;
    let mut worst_prod = 0.0f64;
    for i in 0..1000 {
        prod *= 1.0 - betas[i];
        worst_prod = worst_prod.max((alpha[i] - prod.sqrt()).abs());
        worst_norm = worst_norm.max((alpha[i] * alpha[i] + sigma[i] * sigma[i] - 1.0).abs());
    }
    if worst_norm > 1e-12 {
        return Err(format!("alpha^2 + sigma^2 deviates by {worst_norm:.2e}"));
    }
    if worst_prod > 1e-10 {
        return Err(format!("alpha deviates from product oracle by {worst_prod:.2e}"));
    }
    Ok(format!(
        "rho_log golden ok; grid gaps monotone; DDPM oracle err {worst_prod:.1e}, norm err {worst_norm:.1e}"
    ))
}

fn criterion_3_oracle_sampler() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let raw: Tensor<f64> = Tensor::randn(&[1, 3, 8, 8], &mut rng);
    let target = raw.map(|v| 0.8 * v.tanh());
    let mut worst = 0.0f64;
    for n in 1..=3usize {
        for seed in 0..20u64 {
            let cfg = SamplerConfig { num_steps: n, seed, ..SamplerConfig::default() };
            let out = sampler::decode_with(&[1, 3, 8, 8], &cfg, |step| {
                sampler::oracle_velocity(step.xt, step.t, &target)
            })
            .map_err(|e| e.to_string())?;
            if out.nfe != n {
                return Err(format!("NFE {} != {n}", out.nfe));
            }
            let err = out.image.zip_map(&target, |a, b| (a - b).abs()).unwrap().max_abs();
            worst = worst.max(err);
        }
    }
    if worst >= 1e-5 {
        return Err(format!("oracle decode error {worst:.2e} exceeds 1e-5"));
    }
    Ok(format!("point-mass decode exact to {worst:.1e} over N in 1..3, 20 seeds"))
}

/// Micro generator (every loss term active, float64) checked against central
/// finite differences on 50 randomly selected parameters.
fn criterion_4_gradients() -> Result<String, String> {
    let cfg = RunConfig::from_toml(
        r#"
        [schedule]
        gamma = 0.6
        [data]
        resolution = [8, 8]
        count = 4
        augment = { random_crop = false, horizontal_flip = false }
        [encoder]
        downsample_factor = 4
        latent_channels = 4
        base_width = 4
        ch_mult = [1, 1, 2]
        latent_mode = "kl"
        kl_weight = 0.1
        [decoder]
        width_scale = 0.0625
        mid_attention = false
        [discriminator]
        base_width = 8
        num_downsample_layers = 2
        [trainer]
        batch_size = 2
        total_steps = 4
        warmup_steps = 1
        seed = 5
        ablation_stage = "g"
        [eval]
        count = 4
        "#,
        &[],
    )
    .map_err(|e| e.to_string())?;
    let mut cfg = cfg;
    cfg.trainer.zero_init_decoder_out = false;
    let trainer = Trainer::<f64>::new(&cfg).map_err(|e| e.to_string())?;
    let batch: Tensor<f64> = trainer.dataset.load_batch(0, 0, 2).map_err(|e| e.to_string())?;
    let draws = trainer.draws_for_step(0);

    let total_of = |enc: &evae::nn::ParamStore<f64>, dec: &evae::nn::ParamStore<f64>| -> f64 {
        let mut tape = Tape::new();
        let graph = build_step_graph(
            &mut tape,
            &trainer.cfg,
            &trainer.encoder,
            enc,
            &trainer.decoder,
            dec,
            trainer.disc.as_ref().map(|d| (d, trainer.disc_params.as_ref().unwrap())),
            trainer.extractor.as_ref(),
            &batch,
            &draws,
            true,
        )
        .expect("graph builds");
        tape.value(graph.total_g).item()
    };

    // analytic gradients once
    let mut tape = Tape::new();
    let graph = build_step_graph(
        &mut tape,
        &trainer.cfg,
        &trainer.encoder,
        &trainer.enc_params,
        &trainer.decoder,
        &trainer.dec_params,
        trainer.disc.as_ref().map(|d| (d, trainer.disc_params.as_ref().unwrap())),
        trainer.extractor.as_ref(),
        &batch,
        &draws,
        true,
    )
    .map_err(|e| e.to_string())?;
    // every term is genuinely active
    if tape.value(graph.score).item() <= 0.0
        || graph.lpips.is_none()
        || graph.adv_g.is_none()
        || graph.r1.is_none()
        || graph.reg.is_none()
    {
        return Err("expected all loss terms active in the micro model".into());
    }
    let enc_entries = graph.enc_bound.entries();
    let dec_entries = graph.dec_bound.entries();
    let mut ids: Vec<_> = enc_entries.iter().map(|(_, i)| *i).collect();
    ids.extend(dec_entries.iter().map(|(_, i)| *i));
    let grads = tape.grad_values(graph.total_g, &ids).map_err(|e| e.to_string())?;

    let n_params: usize = trainer.enc_params.num_scalars() + trainer.dec_params.num_scalars();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut checked = 0;
    let mut worst = 0.0f64;
    while checked < 50 {
        let pick_enc = rng.gen_bool(
            trainer.enc_params.num_scalars() as f64 / n_params as f64,
        );
        let (entries, offset) = if pick_enc { (&enc_entries, 0) } else { (&dec_entries, enc_entries.len()) };
        let ei = rng.gen_range(0..entries.len());
        let name = &entries[ei].0;
        let store = if pick_enc { &trainer.enc_params } else { &trainer.dec_params };
        let len = store.get(name).len();
        let idx = rng.gen_range(0..len);
        let g = match &grads[offset + ei] {
            Some(t) => t.data()[idx],
            None => 0.0,
        };
        let h = 1e-4;
        let mut enc_p = trainer.enc_params.clone();
        let mut dec_p = trainer.dec_params.clone();
        {
            let target = if pick_enc { enc_p.get_mut(name) } else { dec_p.get_mut(name) };
            target.data_mut()[idx] += h;
        }
        let up = total_of(&enc_p, &dec_p);
        {
            let target = if pick_enc { enc_p.get_mut(name) } else { dec_p.get_mut(name) };
            target.data_mut()[idx] -= 2.0 * h;
        }
        let down = total_of(&enc_p, &dec_p);
        let fd = (up - down) / (2.0 * h);
        let denom = g.abs().max(fd.abs()).max(1e-4);
        let rel = (g - fd).abs() / denom;
        worst = worst.max(rel);
        if rel >= 1e-4 {
            return Err(format!("{name}[{idx}]: autodiff {g:.6e} vs FD {fd:.6e} (rel {rel:.2e})"));
        }
        checked += 1;
    }

    // R1 penalty vs finite-difference gradient norms on a tiny discriminator
    let dcfg = DiscriminatorConfig {
        base_width: 8,
        num_downsample_layers: 2,
        ..DiscriminatorConfig::default()
    };
    let disc = Discriminator::new(&dcfg).unwrap();
    let params = disc.init_params::<f64>(7);
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let e: Tensor<f64> = Tensor::randn(&[1, 3, 8, 8], &mut rng);
    let a: Tensor<f64> = Tensor::randn(&[1, 3, 8, 8], &mut rng);
    let pair = TrajectoryPair::new(e.clone(), a.clone(), vec![0.3]).unwrap();
    let r1 = evae::adversary::r1_penalty(&disc, &params, &pair).map_err(|e| e.to_string())?;
    let logit_of = |ec: &Tensor<f64>, ac: &Tensor<f64>| -> f64 {
        let p = TrajectoryPair::new(ec.clone(), ac.clone(), vec![0.3]).unwrap();
        disc.discriminate(&params, &p).unwrap()[0]
    };
    let h = 1e-5;
    let mut norm2 = 0.0;
    for idx in 0..e.len() {
        let mut ep = e.clone();
        ep.data_mut()[idx] += h;
        let mut em = e.clone();
        em.data_mut()[idx] -= h;
        let gfd = (logit_of(&ep, &a) - logit_of(&em, &a)) / (2.0 * h);
        norm2 += gfd * gfd;
    }
    for idx in 0..a.len() {
        let mut ap = a.clone();
        ap.data_mut()[idx] += h;
        let mut am = a.clone();
        am.data_mut()[idx] -= h;
        let gfd = (logit_of(&e, &ap) - logit_of(&e, &am)) / (2.0 * h);
        norm2 += gfd * gfd;
    }
    let want = dcfg.r1_weight / 2.0 * norm2;
    let r1_rel = (r1 - want).abs() / want.max(1e-12);
    if r1_rel >= 1e-3 {
        return Err(format!("R1 {r1:.6e} vs FD {want:.6e} (rel {r1_rel:.2e})"));
    }
    Ok(format!(
        "50 params match FD (worst rel {worst:.1e}); R1 matches FD norms (rel {r1_rel:.1e}); micro generator has {n_params} params"
    ))
}

struct HeavyRuns {
    rfid_c: f64,
    rfid_d: f64,
    rfid_e: f64,
    rfid_f_n5: f64,
    rfid_g_n3: f64,
    stream_e_finite: bool,
    stream_g_finite: bool,
    trainer_g: Trainer<f32>,
}

fn run_heavy_stages() -> HeavyRuns {
    let eval_res = 32;
    println!("  training stage c ({} steps)...", desk_steps());
    let (tr_c, _) = train_stage("c");
    let rfid_c = eval_trainer(&tr_c, 50, GridKind::Uniform, eval_res).rfid_proxy;
    println!("  stage c rfid@50 = {rfid_c:.4}");
    drop(tr_c);

    println!("  training stage d...");
    let (tr_d, _) = train_stage("d");
    let rfid_d = eval_trainer(&tr_d, 10, GridKind::Uniform, eval_res).rfid_proxy;
    println!("  stage d rfid@10 = {rfid_d:.4}");
    drop(tr_d);

    println!("  training stage e...");
    let (tr_e, stream_e) = train_stage("e");
    let rfid_e = eval_trainer(&tr_e, 5, GridKind::Uniform, eval_res).rfid_proxy;
    println!("  stage e rfid@5 = {rfid_e:.4}");
    let stream_e_finite = stream_e.iter().all(|b| b.is_finite());
    drop(tr_e);

    println!("  training stage g (gamma 0.6; same weights as stage f)...");
    let (tr_g, stream_g) = train_stage("g");
    let rfid_f_n5 = eval_trainer(&tr_g, 5, GridKind::Uniform, eval_res).rfid_proxy;
    let rfid_g_n3 = eval_trainer(&tr_g, 3, GridKind::RhoLog, eval_res).rfid_proxy;
    println!("  stage f rfid@5 = {rfid_f_n5:.4}; stage g rfid@3 (rho-log) = {rfid_g_n3:.4}");
    let stream_g_finite = stream_g.iter().all(|b| b.is_finite());

    HeavyRuns {
        rfid_c,
        rfid_d,
        rfid_e,
        rfid_f_n5,
        rfid_g_n3,
        stream_e_finite,
        stream_g_finite,
        trainer_g: tr_g,
    }
}

fn criterion_5_ablation_trend(h: &HeavyRuns) -> Result<String, String> {
    if !(h.rfid_d < h.rfid_c) {
        return Err(format!("stage d ({:.4}) must improve on stage c ({:.4})", h.rfid_d, h.rfid_c));
    }
    if !(h.rfid_e < h.rfid_d) {
        return Err(format!("stage e ({:.4}) must improve on stage d ({:.4})", h.rfid_e, h.rfid_d));
    }
    // few-step viability: rho-log at N=3 is no more than 5% worse than
    // uniform at N=5 on the same trained weights
    if h.rfid_g_n3 > 1.05 * h.rfid_f_n5 {
        return Err(format!(
            "stage g at N=3 ({:.4}) worse than 1.05x stage f at N=5 ({:.4})",
            h.rfid_g_n3, h.rfid_f_n5
        ));
    }
    Ok(format!(
        "rfid c@50 {:.4} > d@10 {:.4} > e@5 {:.4}; g@3 {:.4} within 5% of f@5 {:.4}",
        h.rfid_c, h.rfid_d, h.rfid_e, h.rfid_g_n3, h.rfid_f_n5
    ))
}

fn criterion_6_gamma(h: &HeavyRuns) -> Result<String, String> {
    if !h.stream_e_finite || !h.stream_g_finite {
        return Err("training losses were not finite for gamma in {1.0, 0.6}".into());
    }
    // Monte-Carlo variance of the normalized network input over 1e5 samples
    let sampler = TimeSamplerConfig::default();
    for gamma in [1.0, 0.6] {
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let n = 100_000;
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        for _ in 0..n {
            let t = flowmath::sample_train_time(&mut rng, &sampler);
            let x0: f64 = rng.sample(rand_distr::StandardNormal);
            let eps: f64 = rng.sample(rand_distr::StandardNormal);
            let xt = gamma * (1.0 - t) * x0 + t * eps;
            let u = xt / flowmath::norm_divisor(t, gamma);
            sum += u;
            sumsq += u * u;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        if !(0.9..=1.1).contains(&var) {
            return Err(format!("normalized input variance {var:.4} out of [0.9, 1.1] at gamma {gamma}"));
        }
    }
    Ok("losses finite for gamma in {1.0, 0.6}; normalized variance in [0.9, 1.1] (1e5 samples)".into())
}

fn criterion_7_resolution(h: &HeavyRuns) -> Result<String, String> {
    let tr = &h.trainer_g;
    // shape contracts across resolutions divisible by f
    let (enc_params, dec_params) = tr.eval_params();
    for res in [32usize, 48, 64] {
        let mut rng = ChaCha8Rng::seed_from_u64(res as u64);
        let x: Tensor<f32> = Tensor::randn(&[1, 3, res, res], &mut rng);
        let z = tr.encoder.encode(enc_params, &x).map_err(|e| e.to_string())?;
        if z.z.shape() != [1, 4, res / 4, res / 4] {
            return Err(format!("latent shape {:?} wrong at {res}", z.z.shape()));
        }
        let mut ms = ModelSampler::new(&tr.decoder, dec_params);
        let cfg = SamplerConfig {
            num_steps: 2,
            gamma: tr.cfg.schedule.gamma,
            ..SamplerConfig::default()
        };
        let out = ms.decode(&z, &cfg).map_err(|e| e.to_string())?;
        if out.image.shape() != x.shape() {
            return Err(format!("decode shape {:?} wrong at {res}", out.image.shape()));
        }
    }
    // full evaluation protocol at 2x the training resolution
    let report = eval_trainer(tr, 3, GridKind::RhoLog, 64);
    if !report.is_finite() {
        return Err(format!("64x64 report not finite: {report:?}"));
    }
    if report.resolution != (64, 64) || report.nfe != 3 {
        return Err("report metadata wrong".into());
    }
    Ok(format!(
        "model trained at 32x32 evaluates at 64x64: rfid {:.4}, psnr {:.2}, ssim {:.4}",
        report.rfid_proxy, report.psnr, report.ssim
    ))
}

fn criterion_8_metric_oracles() -> Result<String, String> {
    // identical stats
    let mut p = FrechetStats::new(3);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..32 {
        let row: Vec<f64> = (0..3).map(|_| rng.gen::<f64>()).collect();
        p.push(&row).unwrap();
    }
    let d0 = metrics::frechet_distance(&p, &p).unwrap();
    if d0.abs() > 1e-6 {
        return Err(format!("identical stats give {d0:.2e}"));
    }
    // 1-D shifted unit Gaussians
    let o = (0.5f64).sqrt();
    let mut a = FrechetStats::new(1);
    let mut b = FrechetStats::new(1);
    for &s in &[-o, o] {
        a.push(&[s]).unwrap();
        b.push(&[1.0 + s]).unwrap();
    }
    let d1 = metrics::frechet_distance(&a, &b).unwrap();
    if (d1 - 1.0).abs() > 1e-6 {
        return Err(format!("1-D case gives {d1}"));
    }
    // 2-D commuting case
    let o2 = (0.75f64).sqrt();
    let mut a = FrechetStats::new(2);
    let mut b = FrechetStats::new(2);
    for &(x, y) in &[(-o2, -o2), (o2, o2), (-o2, o2), (o2, -o2)] {
        a.push(&[x, y]).unwrap();
        b.push(&[2.0 * x, 2.0 * y]).unwrap();
    }
    let d2 = metrics::frechet_distance(&a, &b).unwrap();
    if (d2 - 2.0).abs() > 1e-6 {
        return Err(format!("2-D case gives {d2}"));
    }
    // PSNR / SSIM trivial cases
    let img: Tensor<f64> = {
        let mut rng = ChaCha8Rng::seed_from_u64(88);
        let raw: Tensor<f64> = Tensor::randn(&[1, 3, 16, 16], &mut rng);
        raw.map(|v| v.tanh())
    };
    if metrics::psnr(&img, &img, 2.0).unwrap() != f64::INFINITY {
        return Err("PSNR of identical images must hit the cap".into());
    }
    let zeros = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
    let ones = Tensor::<f64>::ones(&[1, 1, 2, 2]);
    let p0 = metrics::psnr(&zeros, &ones, 1.0).unwrap();
    if p0.abs() > 1e-12 {
        return Err(format!("PSNR MSE=1 peak=1 gave {p0}"));
    }
    let s1 = metrics::ssim(&img, &img).unwrap();
    if (s1 - 1.0).abs() > 1e-12 {
        return Err(format!("SSIM self gave {s1}"));
    }
    Ok(format!("frechet 0/{d1:.6}/{d2:.6}; psnr/ssim trivial cases exact"))
}

fn criterion_9_reproducibility() -> Result<String, String> {
    let mut cfg = desk_config("g");
    cfg.trainer.total_steps = 600;
    cfg.trainer.warmup_steps = 60;

    let stream_of = |cfg: &RunConfig| -> Result<Vec<String>, String> {
        let mut t = Trainer::<f32>::new(cfg).map_err(|e| e.to_string())?;
        let mut lines = Vec::new();
        while t.step < cfg.trainer.total_steps {
            let b = t.train_step().map_err(|e| e.to_string())?;
            lines.push(serde_json::to_string(&b).unwrap());
        }
        Ok(lines)
    };
    let s1 = stream_of(&cfg)?;
    let s2 = stream_of(&cfg)?;
    if s1 != s2 {
        let first = s1.iter().zip(&s2).position(|(a, b)| a != b).unwrap_or(0);
        return Err(format!("metric streams diverge at step {first}"));
    }

    // save at step 300, resume, and match the uninterrupted run for 100 steps
    let mut full = Trainer::<f32>::new(&cfg).map_err(|e| e.to_string())?;
    let mut reference = Vec::new();
    for _ in 0..400 {
        reference.push(full.train_step().map_err(|e| e.to_string())?);
    }
    let mut part = Trainer::<f32>::new(&cfg).map_err(|e| e.to_string())?;
    for _ in 0..300 {
        part.train_step().map_err(|e| e.to_string())?;
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    part.save_checkpoint(dir.path()).map_err(|e| e.to_string())?;
    let mut resumed = Trainer::<f32>::load_checkpoint(&cfg, dir.path()).map_err(|e| e.to_string())?;
    for (k, want) in reference.iter().enumerate().skip(300).take(100) {
        let got = resumed.train_step().map_err(|e| e.to_string())?;
        if (got.total_g - want.total_g).abs() > 1e-6 || (got.total_d - want.total_d).abs() > 1e-6 {
            return Err(format!(
                "resume diverged at step {k}: {} vs {}",
                got.total_g, want.total_g
            ));
        }
    }
    Ok("two 600-step stage-g runs bitwise identical; resume matches for 100 steps to 1e-6".into())
}

fn criterion_10_nfe() -> Result<String, String> {
    let cfg = EncoderConfig {
        base_width: 4,
        ..EncoderConfig::default()
    };
    let enc = Encoder::new(&cfg).unwrap();
    let enc_params = enc.init_params::<f32>(0);
    let dcfg = DecoderConfig { width_scale: 0.0625, mid_attention: false, ..DecoderConfig::default() };
    let dec = Decoder::new(&dcfg, 4, 16, true).unwrap();
    let dec_params = dec.init_params::<f32>(0, true);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x: Tensor<f32> = Tensor::randn(&[2, 3, 16, 16], &mut rng);
    let z = enc.encode(&enc_params, &x).unwrap();
    let mut ms = ModelSampler::new(&dec, &dec_params);
    let mut total = 0;
    for n in [1usize, 2, 3, 10] {
        let out = ms
            .decode(&z, &SamplerConfig { num_steps: n, ..SamplerConfig::default() })
            .map_err(|e| e.to_string())?;
        if out.nfe != n {
            return Err(format!("decode with N={n} spent {} forward passes", out.nfe));
        }
        total += n;
        if ms.nfe_total() != total as u64 {
            return Err(format!("cumulative NFE {} != {total}", ms.nfe_total()));
        }
    }
    Ok("decode spends exactly N forward passes for N in {1,2,3,10}".into())
}

#[test]
fn acceptance() {
    let mut results = Vec::new();
    run_criterion(&mut results, "criterion 1 (algebraic identities)", criterion_1_algebraic);
    run_criterion(&mut results, "criterion 2 (schedule golden values)", criterion_2_schedule);
    run_criterion(&mut results, "criterion 3 (analytic-oracle sampler)", criterion_3_oracle_sampler);
    run_criterion(&mut results, "criterion 4 (gradient fidelity)", criterion_4_gradients);

    println!("running desk-scale training stages for criteria 5-7...");
    let heavy = run_heavy_stages();
    run_criterion(&mut results, "criterion 5 (ablation trend)", || criterion_5_ablation_trend(&heavy));
    run_criterion(&mut results, "criterion 6 (gamma scaling)", || criterion_6_gamma(&heavy));
    run_criterion(&mut results, "criterion 7 (resolution generalization)", || {
        criterion_7_resolution(&heavy)
    });
    run_criterion(&mut results, "criterion 8 (metric oracles)", criterion_8_metric_oracles);
    run_criterion(&mut results, "criterion 9 (reproducibility)", criterion_9_reproducibility);
    run_criterion(&mut results, "criterion 10 (NFE accounting)", criterion_10_nfe);

    let failed: Vec<&Outcome> = results.iter().filter(|o| !o.passed).collect();
    let total: f64 = results.iter().map(|o| o.seconds).sum();
    println!(
        "acceptance: {}/{} criteria passed in {total:.0}s",
        results.len() - failed.len(),
        results.len()
    );
    assert!(
        failed.is_empty(),
        "failed criteria: {}",
        failed
            .iter()
            .map(|o| format!("{}: {}", o.name, o.detail))
            .collect::<Vec<_>>()
            .join("; ")
    );
}
