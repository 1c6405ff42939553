//! One function per subcommand.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use eranet::degrade::{gen_dataset, parameter_log, procedural_image, procedural_set, Pair};
use eranet::losses::{psnr, LossWeights};
use eranet::model::{
    forward_macs, fuse_model, BlockConv, BlockKind, EraNetModel, Mode, ModelConfig,
};
use eranet::reparam::{fused_macs_per_pixel, krm_training_macs_per_pixel};
use eranet::train::{evaluate, init_and_train, ssim_index, train, Schedule, TrainConfig};
use eranet::weights::{decode_container, decode_weights, encode_weights, VERSION};
use eranet::Tensor4;
use rayon::prelude::*;

use crate::cli::{
    exists, BenchArgs, EnhanceArgs, FuseArgs, InspectArgs, MetricsArgs, SynthArgs, TrainArgs,
};
use crate::error::{CliError, Result};
use crate::imageio::{list_images, load_image, save_image, write_atomic};

fn read_weights<T: eranet::Real>(path: &Path) -> Result<EraNetModel<T>> {
    let bytes =
        fs::read(path).map_err(|e| CliError::Weights(format!("{}: {e}", path.display())))?;
    decode_weights(&bytes).map_err(|e| CliError::Weights(format!("{}: {e}", path.display())))
}

fn write_weights<T: eranet::Real>(path: &Path, m: &EraNetModel<T>) -> Result<()> {
    write_atomic(path, &encode_weights(m))
}

fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Training => "training",
        Mode::Fused => "fused",
    }
}

fn ext(raw: bool) -> &'static str {
    if raw {
        "eraf"
    } else {
        "png"
    }
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let clean = match &a.clean {
        Some(dir) => {
            exists(dir)?;
            list_images(dir)?
                .iter()
                .map(|p| load_image(p))
                .collect::<Result<Vec<_>>>()?
        }
        None => procedural_set(a.count, a.size.height, a.size.width, a.seed),
    };
    if clean.is_empty() {
        return Err(CliError::Data("no clean images to degrade".into()));
    }
    let pairs = gen_dataset(&clean, a.scene, a.seed)?;
    fs::create_dir_all(&a.out).map_err(|e| CliError::Data(format!("{}: {e}", a.out.display())))?;
    for (i, p) in pairs.iter().enumerate() {
        save_image(
            &a.out.join(format!("degraded_{i:04}.{}", ext(a.raw))),
            &p.degraded,
        )?;
        save_image(
            &a.out.join(format!("clean_{i:04}.{}", ext(a.raw))),
            &p.clean,
        )?;
    }
    write_atomic(&a.out.join("params.log"), parameter_log(&pairs).as_bytes())?;
    say!(
        "synth: {} {} pairs (seed {}) written to {}",
        pairs.len(),
        a.scene,
        a.seed,
        a.out.display()
    );
    Ok(())
}

/// `degraded_<id>.*` / `clean_<id>.*` pairs from a directory, sorted by id.
pub fn load_pairs(dir: &Path) -> Result<Vec<Pair<f64>>> {
    exists(dir)?;
    let mut degraded = BTreeMap::new();
    let mut clean = BTreeMap::new();
    for path in list_images(dir)? {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("")
            .to_string();
        if let Some(id) = stem.strip_prefix("degraded_") {
            degraded.insert(id.to_string(), path);
        } else if let Some(id) = stem.strip_prefix("clean_") {
            clean.insert(id.to_string(), path);
        }
    }
    let mut pairs = Vec::new();
    for (id, d) in &degraded {
        let Some(c) = clean.get(id) else {
            log::warn!("{}: no matching clean_{id} image, skipped", d.display());
            continue;
        };
        let (degraded, clean) = (load_image(d)?, load_image(c)?);
        if degraded.shape() != clean.shape() {
            return Err(CliError::Data(format!(
                "pair {id}: shapes {:?} and {:?} differ",
                degraded.shape(),
                clean.shape()
            )));
        }
        pairs.push(Pair {
            degraded,
            clean,
            degradation: None,
        });
    }
    if pairs.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no degraded_*/clean_* pairs",
            dir.display()
        )));
    }
    Ok(pairs)
}

pub fn train_cmd(a: &TrainArgs) -> Result<()> {
    let pairs = match &a.data {
        Some(dir) => load_pairs(dir)?,
        None => gen_dataset(
            &procedural_set(a.count, a.size.height, a.size.width, a.seed),
            a.scene,
            a.seed,
        )?,
    };
    let model_config = ModelConfig {
        channels: a.channels,
        blocks: a.blocks,
        reduction: a.reduction,
        operator: a.operator,
        block_kind: if a.plain {
            BlockKind::Plain
        } else {
            BlockKind::Reparam
        },
        use_cam: !a.no_cam,
        use_sam: !a.no_sam,
        ..ModelConfig::default()
    };
    model_config
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    if a.batch_size == 0 {
        return Err(CliError::Usage("--batch-size must be positive".into()));
    }
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        schedule: Schedule {
            base_lr: a.lr,
            decay: a.decay,
            period: a.decay_every,
        },
        weights: LossWeights {
            ms_ssim: a.w_msssim,
            l1: a.w_l1,
            tv: a.w_tv,
        },
        clip: a.clip,
        max_steps: a.steps,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let outcome = match &a.init {
        Some(path) => {
            let m: EraNetModel<f64> = read_weights(path)?;
            if m.mode != Mode::Training {
                return Err(CliError::Weights(format!(
                    "{}: fused weights cannot be trained",
                    path.display()
                )));
            }
            log::info!(
                "architecture taken from {}; architecture flags ignored",
                path.display()
            );
            train(&m, &pairs, &config)?
        }
        None => init_and_train(model_config, &pairs, &config)?,
    };
    let mut curve = String::new();
    for r in &outcome.curve {
        say!("{}", r.to_line());
        let _ = writeln!(curve, "{}", r.to_line());
    }
    if let Some(path) = &a.curve {
        write_atomic(path, curve.as_bytes())?;
    }
    write_weights(&a.out, &outcome.model)?;
    let eval = evaluate(&outcome.model, &pairs)?;
    say!(
        "train: {} pairs, {} steps; psnr {:.3} -> {:.3} dB, ssim {:.4} -> {:.4} on the training pairs",
        pairs.len(),
        outcome.steps,
        eval.mean_psnr_in(),
        eval.mean_psnr_out(),
        eval.mean_ssim_in(),
        eval.mean_ssim_out()
    );
    say!(
        "train: saved training-mode weights ({} parameters) to {}",
        outcome.model.param_count(),
        a.out.display()
    );
    Ok(())
}

pub fn fuse(a: &FuseArgs) -> Result<()> {
    let m: EraNetModel<f64> = read_weights(&a.input)?;
    let fused = fuse_model(&m)?;
    for (i, (b, f)) in m.blocks.iter().zip(&fused.blocks).enumerate() {
        if let (BlockConv::Reparam(k), BlockConv::Fused(c)) = (&b.conv, &f.conv) {
            let (before, after) = (k.param_count(), c.param_count());
            say!(
                "block {i}: reparameterization {before} -> {after} parameters ({:.3}x)",
                before as f64 / after as f64
            );
        }
    }
    let (before, after) = (m.param_report(), fused.param_report());
    say!(
        "model: {} -> {} parameters ({:.1} KB -> {:.1} KB, {:.3}x)",
        before.total,
        after.total,
        before.bytes() as f64 / 1024.0,
        after.bytes() as f64 / 1024.0,
        before.total as f64 / after.total as f64
    );
    write_weights(&a.out, &fused)?;
    say!("fuse: wrote fused weights to {}", a.out.display());
    Ok(())
}

/// Worker count from `ERA_THREADS`, or rayon's default.
fn thread_count() -> Result<Option<usize>> {
    match std::env::var("ERA_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!(
                "ERA_THREADS must be a positive integer, got `{v}`"
            ))),
        },
        Err(_) => Ok(None),
    }
}

struct Enhanced {
    output: PathBuf,
    size: (usize, usize),
    forward_ms: f64,
    total_ms: f64,
}

fn enhance_one(m: &EraNetModel<f32>, input: &Path, out_dir: &Path, raw: bool) -> Result<Enhanced> {
    let start = Instant::now();
    let x = load_image(input)?;
    let t = Instant::now();
    let y = m.forward(&x.cast::<f32>())?;
    let forward_ms = t.elapsed().as_secs_f64() * 1e3;
    let stem = input
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image");
    let output = out_dir.join(format!("{stem}.{}", ext(raw)));
    save_image(&output, &y.cast::<f64>())?;
    Ok(Enhanced {
        output,
        size: (x.w(), x.h()),
        forward_ms,
        total_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

pub fn enhance(a: &EnhanceArgs) -> Result<()> {
    let threads = thread_count()?;
    let loaded: EraNetModel<f32> = read_weights(&a.weights)?;
    let model = match loaded.mode {
        Mode::Training if a.fused_only => {
            return Err(CliError::Weights(format!(
                "{}: training-mode weights refused by --fused-only",
                a.weights.display()
            )));
        }
        Mode::Training if a.no_fuse => loaded,
        Mode::Training => {
            log::info!("fusing training-mode weights before inference");
            fuse_model(&loaded)?
        }
        Mode::Fused => {
            if a.no_fuse {
                log::warn!("--no-fuse has no effect on fused weights");
            }
            loaded
        }
    };
    exists(&a.input)?;
    let inputs = list_images(&a.input)?;
    if inputs.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no PNG or ERAF images",
            a.input.display()
        )));
    }
    fs::create_dir_all(&a.out).map_err(|e| CliError::Data(format!("{}: {e}", a.out.display())))?;

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let results: Vec<Result<Enhanced>> = pool.install(|| {
        inputs
            .par_iter()
            .map(|p| enhance_one(&model, p, &a.out, a.raw))
            .collect()
    });

    let mut ok = 0;
    for (input, r) in inputs.iter().zip(results) {
        match r {
            Ok(e) => {
                ok += 1;
                say!(
                    "enhance: {} -> {} {}x{} forward {:.3} ms total {:.3} ms",
                    input.display(),
                    e.output.display(),
                    e.size.0,
                    e.size.1,
                    e.forward_ms,
                    e.total_ms
                );
            }
            Err(e) => log::warn!("skipping {}: {e}", input.display()),
        }
    }
    if ok == 0 {
        return Err(CliError::Data("no image could be enhanced".into()));
    }
    say!(
        "enhance: {ok}/{} images with {} weights",
        inputs.len(),
        mode_name(model.mode)
    );
    Ok(())
}

fn fmt_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

fn metric_pairs(reference: &Path, test: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    exists(reference)?;
    exists(test)?;
    if test.is_file() {
        let name = test
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or("image")
            .to_string();
        let r = if reference.is_dir() {
            reference.join(&name)
        } else {
            reference.to_path_buf()
        };
        return Ok(vec![(name, r, test.to_path_buf())]);
    }
    let mut out = Vec::new();
    for t in list_images(test)? {
        let name = t
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or("")
            .to_string();
        let r = reference.join(&name);
        if r.is_file() {
            out.push((name, r, t));
        } else {
            log::warn!("{}: no reference {}, skipped", t.display(), r.display());
        }
    }
    if out.is_empty() {
        return Err(CliError::Data("no test/reference pairs found".into()));
    }
    Ok(out)
}

pub fn metrics(a: &MetricsArgs) -> Result<()> {
    let pairs = metric_pairs(&a.reference, &a.test)?;
    let (mut sum_p, mut sum_s) = (0.0, 0.0);
    for (name, r, t) in &pairs {
        let (r, t) = (load_image(r)?, load_image(t)?);
        if r.shape() != t.shape() {
            return Err(CliError::Data(format!(
                "{name}: shapes {:?} and {:?} differ",
                r.shape(),
                t.shape()
            )));
        }
        let p = psnr(&t, &r, 1.0)?;
        let s = ssim_index(&t, &r)?;
        say!("pair={name} psnr={} ssim={s:.6}", fmt_psnr(p));
        sum_p += p;
        sum_s += s;
    }
    let n = pairs.len() as f64;
    say!(
        "mean pairs={} psnr={} ssim={:.6}",
        pairs.len(),
        fmt_psnr(sum_p / n),
        sum_s / n
    );
    Ok(())
}

struct Stats {
    mean: f64,
    median: f64,
    p95: f64,
}

fn stats(mut ms: Vec<f64>) -> Stats {
    ms.sort_by(f64::total_cmp);
    let n = ms.len();
    let rank = |q: f64| ms[((q * n as f64).ceil() as usize).clamp(1, n) - 1];
    Stats {
        mean: ms.iter().sum::<f64>() / n as f64,
        median: if n % 2 == 1 {
            ms[n / 2]
        } else {
            0.5 * (ms[n / 2 - 1] + ms[n / 2])
        },
        p95: rank(0.95),
    }
}

fn time_forward(
    m: &EraNetModel<f32>,
    x: &Tensor4<f32>,
    warmup: usize,
    iters: usize,
) -> Result<Vec<f64>> {
    for _ in 0..warmup {
        m.forward(x)?;
    }
    let mut out = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        m.forward(x)?;
        out.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(out)
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    let (w, h) = (a.size.width, a.size.height);
    if w < 8 || h < 8 {
        return Err(CliError::Usage(format!(
            "--size must be at least 8x8, got {}",
            a.size
        )));
    }
    let model: EraNetModel<f32> = match &a.weights {
        Some(p) => read_weights(p)?,
        None => {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(a.seed);
            EraNetModel::init(ModelConfig::default(), &mut rng)?
        }
    };
    let cfg = model.config;
    let train_macs = forward_macs(&cfg, Mode::Training, h, w);
    let fused_macs = forward_macs(&cfg, Mode::Fused, h, w);
    let per_krm =
        krm_training_macs_per_pixel(cfg.channels, cfg.expansion, cfg.operator.branch_count());
    let per_fused = fused_macs_per_pixel(cfg.channels);
    say!(
        "analytic per block conv: training {per_krm} vs fused {per_fused} multiplies/pixel ({:.3}x)",
        per_krm as f64 / per_fused as f64
    );
    say!(
        "analytic network at {}: training {:.3} GMAC, fused {:.3} GMAC ({:.3}x)",
        a.size,
        train_macs as f64 / 1e9,
        fused_macs as f64 / 1e9,
        train_macs as f64 / fused_macs as f64
    );
    if cfg.block_kind == BlockKind::Reparam && fused_macs >= train_macs {
        return Err(CliError::Data(
            "analytic check failed: fused cost is not below training cost".into(),
        ));
    }

    let x = procedural_image(h, w, a.seed).cast::<f32>();
    let mut variants: Vec<(&str, EraNetModel<f32>)> = Vec::new();
    match model.mode {
        Mode::Training => {
            let fused = fuse_model(&model)?;
            variants.push(("training", model));
            variants.push(("fused", fused));
        }
        Mode::Fused => {
            say!("training: n/a (weights are fused)");
            variants.push(("fused", model));
        }
    }
    let mut means = Vec::new();
    for (label, m) in &variants {
        let ms = time_forward(m, &x, a.warmup, a.iters)?;
        if ms.is_empty() {
            say!("{label}: {} warmup runs, no timed iterations", a.warmup);
            continue;
        }
        let s = stats(ms);
        say!(
            "{label}: mean {:.3} ms median {:.3} ms p95 {:.3} ms {:.2} frames/s ({} iters)",
            s.mean,
            s.median,
            s.p95,
            1e3 / s.mean,
            a.iters
        );
        means.push(s.mean);
    }
    if let [t, f] = means[..] {
        say!("measured fused speedup {:.2}x (informational)", t / f);
    }
    Ok(())
}

pub fn inspect(a: &InspectArgs) -> Result<()> {
    let bytes = fs::read(&a.weights)
        .map_err(|e| CliError::Weights(format!("{}: {e}", a.weights.display())))?;
    let container = decode_container(&bytes)
        .map_err(|e| CliError::Weights(format!("{}: {e}", a.weights.display())))?;
    let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    say!(
        "file={} bytes={} magic=ERAW version={VERSION} mode={} tensors={} crc32={crc:08x}",
        a.weights.display(),
        bytes.len(),
        mode_name(container.mode),
        container.records.len()
    );
    for r in &container.records {
        let mut h = crc32fast::Hasher::new();
        for v in r.tensor.data() {
            h.update(&v.to_le_bytes());
        }
        say!(
            "tensor {} shape={:?} params={} crc32={:08x}",
            r.name,
            r.tensor.shape(),
            r.tensor.numel(),
            h.finalize()
        );
    }
    let m: EraNetModel<f32> = decode_weights(&bytes)
        .map_err(|e| CliError::Weights(format!("{}: {e}", a.weights.display())))?;
    let c = m.config;
    say!(
        "architecture channels={} blocks={} expansion={} reduction={} operator={} block={:?} cam={} sam={} global_residual={}",
        c.channels,
        c.blocks,
        c.expansion,
        c.reduction,
        c.operator.name(),
        c.block_kind,
        c.use_cam,
        c.use_sam,
        c.global_residual
    );
    let report = m.param_report();
    for l in &report.layers {
        say!("layer {} params={}", l.name, l.params);
    }
    say!("total params={} bytes_f32={}", report.total, report.bytes());
    Ok(())
}
