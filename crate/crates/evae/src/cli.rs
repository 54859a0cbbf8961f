//! Command implementations behind the binary: training, reconstruction,
//! evaluation and figure emission.
//!
//! Exit-code contract: 0 success, 2 usage/config errors, 3 numerical aborts.

use crate::config::RunConfig;
use crate::data_io::{denormalize_to_u8, Dataset, DatasetSpec};
use crate::decoder::Decoder;
use crate::encoder::Encoder;
use crate::error::Error;
use crate::metrics::{evaluate_model, EvalReport};
use crate::nn::ParamStore;
use crate::objectives::{LossBundle, RandomPyramid};
use crate::plot::{emit_figures, PlotKind};
use crate::sampler::{GridKind, ModelSampler, SamplerConfig};
use crate::tensor::Tensor;
use crate::trainer::{derive_seed, Trainer};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

fn fail(err: &Error) -> i32 {
    eprintln!("error: {err}");
    exit_code_for(err)
}

/// Default output root: `EVAE_OUT_ROOT` or `./runs`.
pub fn out_root() -> PathBuf {
    std::env::var_os("EVAE_OUT_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Parses trailing `--section.key value` (or `--section.key=value`) tokens.
pub fn parse_overrides(tokens: &[String]) -> Result<Vec<(String, String)>, Error> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let tok = &tokens[i];
        let Some(body) = tok.strip_prefix("--") else {
            return Err(Error::invalid_argument(format!(
                "override {tok:?} must start with --section.key"
            )));
        };
        let (key, val) = if let Some((k, v)) = body.split_once('=') {
            i += 1;
            (k.to_string(), v.to_string())
        } else {
            if i + 1 >= tokens.len() {
                return Err(Error::invalid_argument(format!(
                    "override {tok:?} is missing a value"
                )));
            }
            i += 2;
            (body.to_string(), tokens[i - 1].clone())
        };
        if !key.contains('.') {
            return Err(Error::invalid_argument(format!(
                "override key {key:?} must be a dotted config path"
            )));
        }
        out.push((key, val));
    }
    Ok(out)
}

#[derive(Serialize)]
struct MetricLine<'a> {
    step: usize,
    #[serde(flatten)]
    losses: &'a LossBundle,
    lr: f64,
    wall_ms: u64,
}

/// Runs training to `total_steps`, streaming JSON-lines metrics and writing
/// checkpoints under the run directory.
pub fn cmd_train(
    config_path: &Path,
    override_tokens: &[String],
    out: Option<PathBuf>,
    resume: bool,
) -> i32 {
    let overrides = match parse_overrides(override_tokens) {
        Ok(o) => o,
        Err(e) => return fail(&e),
    };
    let cfg = match RunConfig::from_file(config_path, &overrides) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    let digest = cfg.digest();
    let run_dir = out.unwrap_or_else(|| out_root().join(format!("run-{}", &digest[..12])));
    let ckpt_dir = run_dir.join("checkpoint");

    let mut trainer = if resume && ckpt_dir.join("manifest.json").exists() {
        match Trainer::<f32>::load_checkpoint(&cfg, &ckpt_dir) {
            Ok(t) => t,
            Err(e) => return fail(&e),
        }
    } else {
        if let Err(e) = std::fs::create_dir_all(&run_dir) {
            return fail(&Error::io(format!("{}: {e}", run_dir.display())));
        }
        let toml_text = toml::to_string_pretty(&cfg).expect("config serializes");
        if let Err(e) = std::fs::write(run_dir.join("config.toml"), toml_text) {
            return fail(&Error::io(format!("config.toml: {e}")));
        }
        match Trainer::<f32>::new(&cfg) {
            Ok(t) => t,
            Err(e) => return fail(&e),
        }
    };

    let metrics_path = run_dir.join("metrics.jsonl");
    let mut metrics = match std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
    {
        Ok(f) => f,
        Err(e) => return fail(&Error::io(format!("{}: {e}", metrics_path.display()))),
    };

    use std::io::Write;
    let started = Instant::now();
    let every = cfg.trainer.checkpoint_every;
    while trainer.step < cfg.trainer.total_steps {
        let at = trainer.step;
        let bundle = match trainer.train_step() {
            Ok(b) => b,
            Err(e) => {
                eprintln!("training aborted at step {at}: {e}");
                return EXIT_NUMERICAL;
            }
        };
        let line = MetricLine {
            step: at,
            losses: &bundle,
            lr: crate::trainer::lr_at(at, &cfg.trainer),
            wall_ms: started.elapsed().as_millis() as u64,
        };
        let json = serde_json::to_string(&line).expect("metrics serialize");
        if writeln!(metrics, "{json}").is_err() {
            return fail(&Error::io("failed writing metrics stream"));
        }
        if every > 0 && trainer.step % every == 0 {
            if let Err(e) = trainer.save_checkpoint(&ckpt_dir) {
                return fail(&e);
            }
        }
    }
    if let Err(e) = trainer.save_checkpoint(&ckpt_dir) {
        return fail(&e);
    }
    println!(
        "trained {} steps; checkpoint at {}",
        trainer.step,
        ckpt_dir.display()
    );
    EXIT_OK
}

struct LoadedModel {
    cfg: RunConfig,
    encoder: Encoder,
    decoder: Decoder,
    enc_params: ParamStore<f32>,
    dec_params: ParamStore<f32>,
    digest: String,
}

fn load_model(run_dir: &Path) -> Result<LoadedModel, Error> {
    let cfg_path = run_dir.join("config.toml");
    let cfg = RunConfig::from_file(&cfg_path, &[])?;
    let ckpt = run_dir.join("checkpoint");
    let manifest = Trainer::<f32>::read_manifest(&ckpt)?;
    let digest = cfg.digest();
    if manifest.config_digest != digest {
        return Err(Error::config_mismatch(format!(
            "checkpoint digest {} does not match config {}",
            manifest.config_digest, digest
        )));
    }
    let encoder = Encoder::new(&cfg.encoder)?;
    let train_res = cfg.data.resolution.0.min(cfg.data.resolution.1);
    let decoder = Decoder::new(
        &cfg.decoder,
        cfg.encoder.latent_channels,
        train_res,
        cfg.adm_unet(),
    )?;
    let (enc_file, dec_file) = if cfg.trainer.ema_for_eval {
        ("ema_encoder.bin", "ema_decoder.bin")
    } else {
        ("encoder.bin", "decoder.bin")
    };
    let enc_params = crate::trainer::read_params(&ckpt.join(enc_file))?;
    let dec_params = crate::trainer::read_params(&ckpt.join(dec_file))?;
    Ok(LoadedModel {
        cfg,
        encoder,
        decoder,
        enc_params,
        dec_params,
        digest,
    })
}

fn grid_kind(s: &str) -> Result<GridKind, Error> {
    match s {
        "rholog" => Ok(GridKind::RhoLog),
        "uniform" => Ok(GridKind::Uniform),
        other => Err(Error::invalid_argument(format!(
            "unknown grid {other:?} (rholog|uniform)"
        ))),
    }
}

fn save_png(path: &Path, img: &Tensor<f32>, index: usize) -> Result<(), Error> {
    let (_, _, h, w) = img.dims4();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for hi in 0..h {
        for wi in 0..w {
            let px: Vec<u8> = (0..3)
                .map(|ci| denormalize_to_u8(img.at4(index, ci, hi, wi) as f64))
                .collect();
            buf.put_pixel(wi as u32, hi as u32, image::Rgb([px[0], px[1], px[2]]));
        }
    }
    buf.save(path)
        .map_err(|e| Error::io(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct ReconstructReport {
    nfe: usize,
    num_steps: usize,
    grid: String,
    times: Vec<f64>,
    seed: u64,
    count: usize,
    config_digest: String,
}

/// Reconstructs every input image through encode + few-step decode and
/// writes original/reconstruction PNG pairs plus a JSON report.
pub fn cmd_reconstruct(
    run_dir: &Path,
    input: Option<&Path>,
    steps: usize,
    grid: &str,
    seed: u64,
    out: Option<PathBuf>,
) -> i32 {
    let model = match load_model(run_dir) {
        Ok(m) => m,
        Err(e) => return fail(&e),
    };
    let grid_k = match grid_kind(grid) {
        Ok(g) => g,
        Err(e) => return fail(&e),
    };
    let sampler_cfg = SamplerConfig {
        num_steps: steps,
        grid: grid_k,
        gamma: model.cfg.schedule.gamma,
        seed,
        ..model.cfg.sampler
    };
    if let Err(e) = sampler_cfg.validate() {
        return fail(&e);
    }
    let out_dir = out.unwrap_or_else(|| run_dir.join("reconstructions"));
    if let Err(e) = std::fs::create_dir_all(&out_dir) {
        return fail(&Error::io(format!("{}: {e}", out_dir.display())));
    }

    // gather inputs: a folder of images, or the configured eval corpus
    let images: Vec<(String, Tensor<f32>)> = match input {
        Some(dir) => match load_native_images(dir, model.cfg.encoder.downsample_factor) {
            Ok(v) => v,
            Err(e) => return fail(&e),
        },
        None => {
            let spec = DatasetSpec {
                seed: model.cfg.eval.seed,
                count: model.cfg.eval.count.min(16),
                augment: Default::default(),
                ..model.cfg.data.clone()
            };
            match Dataset::load(&spec) {
                Ok(ds) => {
                    let stacked: Tensor<f32> = ds.stacked();
                    (0..ds.len())
                        .map(|i| {
                            let img = crate::metrics::slice_batch(&stacked, i, 1).unwrap();
                            (format!("{i:04}"), img)
                        })
                        .collect()
                }
                Err(e) => return fail(&e),
            }
        }
    };

    let mut ms = ModelSampler::new(&model.decoder, &model.dec_params);
    let grid_times = match sampler_cfg.build_grid() {
        Ok(g) => g.times,
        Err(e) => return fail(&e),
    };
    println!("inference grid: {grid_times:?}");
    let count = images.len();
    for (idx, (stem, img)) in images.into_iter().enumerate() {
        let z = match model.encoder.encode(&model.enc_params, &img) {
            Ok(z) => z,
            Err(e) => return fail(&e),
        };
        let per_image = SamplerConfig {
            seed: derive_seed(seed, idx as u64),
            ..sampler_cfg
        };
        let decoded = match ms.decode(&z, &per_image) {
            Ok(d) => d,
            Err(e) => return fail(&e),
        };
        if decoded.nfe != steps {
            return fail(&Error::numerical(format!(
                "NFE accounting mismatch: {} vs {steps}",
                decoded.nfe
            )));
        }
        if let Err(e) = save_png(&out_dir.join(format!("{stem}_orig.png")), &img, 0) {
            return fail(&e);
        }
        if let Err(e) = save_png(
            &out_dir.join(format!("{stem}_recon.png")),
            &decoded.image,
            0,
        ) {
            return fail(&e);
        }
    }
    let report = ReconstructReport {
        nfe: steps,
        num_steps: steps,
        grid: grid.to_string(),
        times: grid_times,
        seed,
        count,
        config_digest: model.digest.clone(),
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    if let Err(e) = std::fs::write(out_dir.join("report.json"), &json) {
        return fail(&Error::io(format!("report.json: {e}")));
    }
    println!("{json}");
    EXIT_OK
}

fn load_native_images(dir: &Path, factor: usize) -> Result<Vec<(String, Tensor<f32>)>, Error> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
                Some(ref ext) if ["png", "jpg", "jpeg"].contains(&ext.as_str())
            )
        })
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::invalid_argument(format!(
            "no images in {}",
            dir.display()
        )));
    }
    let mut out = Vec::new();
    for path in entries {
        let img = image::open(&path)
            .map_err(|e| Error::io(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::invalid_argument(format!(
                "{}: resolution {h}x{w} not divisible by encoder factor {factor}",
                path.display()
            )));
        }
        let mut t = Tensor::zeros(&[1, 3, h, w]);
        for (x, y, px) in img.enumerate_pixels() {
            for ci in 0..3 {
                t.set4(
                    0,
                    ci,
                    y as usize,
                    x as usize,
                    crate::data_io::normalize_u8(px.0[ci]) as f32,
                );
            }
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("img")
            .to_string();
        out.push((stem, t));
    }
    Ok(out)
}

#[derive(Serialize)]
struct EvalRecord {
    #[serde(flatten)]
    report: EvalReport,
    stage: String,
    gamma: f64,
    grid: String,
}

/// Evaluates reconstruction quality on a synthetic corpus (optionally at a
/// resolution different from training) and emits the report as JSON.
#[allow(clippy::too_many_arguments)]
pub fn cmd_eval(
    run_dir: &Path,
    resolution: Option<usize>,
    steps: Option<usize>,
    grid: Option<&str>,
    seed: Option<u64>,
    count: Option<usize>,
    out: Option<PathBuf>,
    append: Option<PathBuf>,
) -> i32 {
    let model = match load_model(run_dir) {
        Ok(m) => m,
        Err(e) => return fail(&e),
    };
    let cfg = &model.cfg;
    let res = resolution.unwrap_or(cfg.data.resolution.0);
    if res % cfg.encoder.downsample_factor != 0 {
        return fail(&Error::invalid_argument(format!(
            "resolution {res} not divisible by encoder factor {}",
            cfg.encoder.downsample_factor
        )));
    }
    let mut sampler_cfg = SamplerConfig {
        gamma: cfg.schedule.gamma,
        ..cfg.sampler
    };
    if let Some(n) = steps {
        sampler_cfg.num_steps = n;
    }
    if let Some(g) = grid {
        sampler_cfg.grid = match grid_kind(g) {
            Ok(k) => k,
            Err(e) => return fail(&e),
        };
    }
    if let Some(s) = seed {
        sampler_cfg.seed = s;
    }
    let spec = DatasetSpec {
        resolution: (res, res),
        seed: cfg.eval.seed,
        count: count.unwrap_or(cfg.eval.count),
        augment: Default::default(),
        ..cfg.data.clone()
    };
    let ds = match Dataset::load(&spec) {
        Ok(d) => d,
        Err(e) => return fail(&e),
    };
    let images: Tensor<f32> = ds.stacked();
    let extractor = RandomPyramid::new(cfg.eval.metric_extractor_seed);
    let report = match evaluate_model(
        &model.encoder,
        &model.enc_params,
        &model.decoder,
        &model.dec_params,
        &sampler_cfg,
        &images,
        &extractor,
        cfg.eval.batch_size,
        &model.digest,
    ) {
        Ok(r) => r,
        Err(e) => return fail(&e),
    };
    let record = EvalRecord {
        report,
        stage: serde_json::to_value(cfg.trainer.ablation_stage)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default(),
        gamma: cfg.schedule.gamma,
        grid: match sampler_cfg.grid {
            GridKind::RhoLog => "rholog".into(),
            GridKind::Uniform => "uniform".into(),
        },
    };
    let json = serde_json::to_string(&record).expect("report serializes");
    println!("{json}");
    if let Some(path) = out {
        if let Err(e) = std::fs::write(&path, &json) {
            return fail(&Error::io(format!("{}: {e}", path.display())));
        }
    }
    if let Some(path) = append {
        use std::io::Write;
        let mut f = match std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
        {
            Ok(f) => f,
            Err(e) => return fail(&Error::io(format!("{}: {e}", path.display()))),
        };
        if writeln!(f, "{json}").is_err() {
            return fail(&Error::io("failed appending eval record"));
        }
    }
    EXIT_OK
}

/// Renders SVG + PNG figures from a JSON-lines stream of eval records.
pub fn cmd_plot(input: &Path, kind: &str, out_prefix: &Path) -> i32 {
    let kind = match PlotKind::parse(kind) {
        Ok(k) => k,
        Err(e) => return fail(&e),
    };
    let text = match std::fs::read_to_string(input) {
        Ok(t) => t,
        Err(e) => return fail(&Error::io(format!("{}: {e}", input.display()))),
    };
    match emit_figures(kind, &text, out_prefix) {
        Ok(()) => {
            println!(
                "wrote {} and {}",
                out_prefix.with_extension("svg").display(),
                out_prefix.with_extension("png").display()
            );
            EXIT_OK
        }
        Err(e) => fail(&e),
    }
}
