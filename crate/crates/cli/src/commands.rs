use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use deeprest::io::{load_codes, load_image, load_model, save_codes, save_image, save_model};
use deeprest::*;
use log::info;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::manifest::RunManifest;
use crate::{Cli, Command, DecodeArgs, DenoiseArgs, EncodeArgs, PsnrArgs, ScheduleArgs, TableArgs, TrainArgs};

/// Bad flags or an inconsistent schedule; maps to exit code 1.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl fmt::Display) -> anyhow::Error {
    Usage(msg.to_string()).into()
}

pub fn run(cli: Cli) -> Result<()> {
    let out = cli.out_dir.as_path();
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let manifest = match cli.command {
        Command::Train(a) => train(out, cli.json, a)?,
        Command::Encode(a) => encode_cmd(out, cli.json, a)?,
        Command::Decode(a) => decode_cmd(out, cli.json, a)?,
        Command::Denoise(a) => denoise(out, cli.json, a)?,
        Command::Psnr(a) => psnr_cmd(cli.json, a)?,
        Command::Table(a) => table(out, cli.json, a)?,
    };
    let path = manifest.write(out)?;
    info!("manifest written to {}", path.display());
    Ok(())
}

impl ScheduleArgs {
    fn config(&self, sigma: f64, layers: usize, seed: u64) -> Result<DenoiseConfig> {
        let cfg = DenoiseConfig {
            sigma,
            layers,
            first_patch: self.patch,
            depths: self.keep_schedule.clone(),
            eta_mult_first: self.eta_mult1,
            eta_mult_rest: self.eta_mult2,
            iters: self.iters,
            pass_sigmas: Vec::new(),
            seed,
        };
        cfg.validate().map_err(usage)?;
        Ok(cfg)
    }
}

fn load(path: &Path) -> Result<Image64> {
    load_image(path).with_context(|| format!("loading {}", path.display()))
}

fn emit_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_json<T: Serialize>(value: &T, path: &Path, manifest: &mut RunManifest) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))?;
    manifest.output(path)
}

fn train(out: &Path, json: bool, a: TrainArgs) -> Result<RunManifest> {
    let cfg = a.schedule.config(a.sigma, a.layers, 0)?;
    let configs = cfg.layer_configs(a.sigma).map_err(usage)?;
    let img = load(&a.image)?;
    let mut manifest = RunManifest::new("train", json!({ "schedule": cfg, "layers": configs }), None);
    manifest.input(&a.image)?;

    let (model, report) = train_model(&img, &configs, InitPolicy::default())?;
    let model_path = out.join("model.drtm");
    save_model(&model, &model_path)?;
    manifest.output(&model_path)?;
    for (l, (layer, cfg)) in model.layers().iter().zip(&configs).enumerate() {
        let path = out.join(format!("atoms_layer{}.pgm", l + 1));
        save_image(&atom_montage(layer, cfg)?, &path, true)?;
        manifest.output(&path)?;
    }
    write_json(&report, &out.join("train_report.json"), &mut manifest)?;

    if json {
        emit_json(&report)?;
    } else {
        for (l, layer) in report.layers.iter().enumerate() {
            println!(
                "layer {}: final cost {:.6e}, sparsity {:.4}, {:.1}s",
                l + 1,
                layer.costs.last().copied().unwrap_or(f64::NAN),
                layer.sparsity,
                layer.seconds
            );
        }
    }
    Ok(manifest)
}

fn encode_cmd(out: &Path, json: bool, a: EncodeArgs) -> Result<RunManifest> {
    let model: Model64 = load_model(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let img = load(&a.image)?;
    let mut manifest = RunManifest::new("encode", json!({ "layers": model.configs() }), None);
    manifest.input(&a.model)?;
    manifest.input(&a.image)?;
    let enc = encode(&img, &model)?;
    let path = out.join("codes.drtc");
    save_codes(&enc, &path)?;
    manifest.output(&path)?;

    let nnz: Vec<usize> = enc
        .coeffs
        .iter()
        .map(|z| z.iter().filter(|v| **v != 0.0).count())
        .collect();
    if json {
        emit_json(&json!({ "height": enc.height, "width": enc.width, "nnz": nnz }))?;
    } else {
        println!("{} nonzero coefficients per layer: {nnz:?}", enc.nnz());
    }
    Ok(manifest)
}

fn decode_cmd(out: &Path, json: bool, a: DecodeArgs) -> Result<RunManifest> {
    let model: Model64 = load_model(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let enc: Encoded64 = load_codes(&a.codes).with_context(|| format!("loading {}", a.codes.display()))?;
    let mut manifest = RunManifest::new("decode", json!({ "layers": model.configs() }), None);
    manifest.input(&a.model)?;
    manifest.input(&a.codes)?;
    let img = decode(&enc, &model)?;
    let path = out.join("decoded.pgm");
    save_image(&img, &path, true)?;
    manifest.output(&path)?;
    if json {
        emit_json(&json!({ "output": path }))?;
    } else {
        println!("wrote {}", path.display());
    }
    Ok(manifest)
}

fn pass_sigmas(cfg: &DenoiseConfig, passes: Option<usize>, sigmas: Option<Vec<f64>>) -> Result<Vec<f64>> {
    match (passes, sigmas) {
        (Some(0), _) => Err(usage("--passes must be at least 1")),
        (None, None) => Ok(Vec::new()),
        (Some(n), None) => cfg.preset_pass_sigmas(n).ok_or_else(|| {
            usage(format!(
                "no preset for {n} passes at sigma {}; give --pass-sigmas",
                cfg.sigma
            ))
        }),
        (Some(n), Some(s)) if s.len() != n => {
            Err(usage(format!("--passes {n} but --pass-sigmas has {} values", s.len())))
        }
        (_, Some(s)) => Ok(s),
    }
}

fn denoise(out: &Path, json: bool, a: DenoiseArgs) -> Result<RunManifest> {
    let cfg = a.schedule.config(a.sigma, a.layers, a.seed)?;
    let passes = pass_sigmas(&cfg, a.passes, a.pass_sigmas)?;
    let cfg = cfg.with_passes(&passes);
    cfg.validate().map_err(usage)?;
    let img = load(&a.image)?;
    let mut manifest = RunManifest::new(
        "denoise",
        json!({ "schedule": cfg, "noisy_input": a.noisy_input }),
        (!a.noisy_input).then_some(a.seed),
    );
    manifest.input(&a.image)?;

    let (denoised, report) = if a.noisy_input {
        denoise_multipass(&img, &cfg)?
    } else {
        let (noisy, denoised, report) = simulate_and_denoise(&img, &cfg)?;
        let path = out.join("noisy.pgm");
        save_image(&noisy, &path, true)?;
        manifest.output(&path)?;
        (denoised, report)
    };
    let path = out.join("denoised.pgm");
    save_image(&denoised, &path, true)?;
    manifest.output(&path)?;
    write_json(&report, &out.join("report.json"), &mut manifest)?;

    if json {
        emit_json(&report)?;
    } else {
        if let Some(p) = report.input_psnr {
            println!("noisy: {p:.2} dB");
        }
        for (k, pass) in report.passes.iter().enumerate() {
            let score = pass.psnr.map_or("n/a".to_string(), |p| format!("{p:.2} dB"));
            println!(
                "pass {} (sigma {}): {score}, {:.1}s",
                k + 1,
                pass.sigma_estimate,
                pass.seconds
            );
        }
    }
    Ok(manifest)
}

fn fmt_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

fn psnr_cmd(json: bool, a: PsnrArgs) -> Result<RunManifest> {
    let reference = load(&a.reference)?;
    let test = load(&a.test)?;
    let value = psnr(&reference, &test).map_err(usage)?;
    let mut manifest = RunManifest::new("psnr", json!({ "peak": deeprest::denoise::PSNR_PEAK }), None);
    manifest.input(&a.reference)?;
    manifest.input(&a.test)?;
    if json {
        // JSON has no infinity; identical images report the string "inf".
        let v = if value.is_finite() { json!(value) } else { json!("inf") };
        emit_json(&json!({ "psnr": v }))?;
    } else {
        println!("{}", fmt_psnr(value));
    }
    Ok(manifest)
}

#[derive(Debug, Serialize)]
struct Cell {
    image: String,
    sigma: f64,
    layers: usize,
    seed: u64,
    input_psnr: f64,
    output_psnr: f64,
    seconds: f64,
}

#[derive(Debug, Serialize)]
struct TableReport {
    images: Vec<String>,
    sigmas: Vec<f64>,
    layers: Vec<usize>,
    base_seed: u64,
    cells: Vec<Cell>,
}

impl TableReport {
    fn render(&self) -> String {
        let mut s = format!("{:<12} {:>6} {:>8}", "image", "sigma", "noisy");
        for l in &self.layers {
            s += &format!(" {:>8}", format!("L={l}"));
        }
        s.push('\n');
        for row in self.cells.chunks(self.layers.len()) {
            s += &format!("{:<12} {:>6} {:>8.2}", row[0].image, row[0].sigma, row[0].input_psnr);
            for c in row {
                s += &format!(" {:>8.2}", c.output_psnr);
            }
            s.push('\n');
        }
        s
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn table(out: &Path, json: bool, a: TableArgs) -> Result<RunManifest> {
    if a.jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    if a.sigmas.is_empty() || a.layers.is_empty() {
        return Err(usage("--sigmas and --layers must not be empty"));
    }
    // Cell k, in image-major order, is seeded with base + k.
    let mut plan: Vec<(usize, DenoiseConfig)> = Vec::new();
    for img in 0..a.images.len() {
        for &sigma in &a.sigmas {
            for &layers in &a.layers {
                let seed = a.seed + plan.len() as u64;
                plan.push((img, a.schedule.config(sigma, layers, seed)?));
            }
        }
    }
    let images = a.images.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = a.images.iter().map(|p| stem(p)).collect();
    let mut manifest = RunManifest::new(
        "table",
        json!({ "schedule": a.schedule.config(a.sigmas[0], a.layers[0], a.seed)?, "sigmas": a.sigmas, "layers": a.layers }),
        Some(a.seed),
    );
    for p in &a.images {
        manifest.input(p)?;
    }

    let pool = rayon::ThreadPoolBuilder::new().num_threads(a.jobs).build()?;
    let cells = pool.install(|| {
        plan.par_iter()
            .map(|(img, cfg)| {
                let started = Instant::now();
                let (_, _, report) = simulate_and_denoise(&images[*img], cfg)?;
                let cell = Cell {
                    image: names[*img].clone(),
                    sigma: cfg.sigma,
                    layers: cfg.layers,
                    seed: cfg.seed,
                    input_psnr: report.input_psnr.unwrap_or(f64::NAN),
                    output_psnr: report.output_psnr().unwrap_or(f64::NAN),
                    seconds: started.elapsed().as_secs_f64(),
                };
                info!(
                    "{} sigma={} L={}: {:.2} dB",
                    cell.image, cell.sigma, cell.layers, cell.output_psnr
                );
                Ok(cell)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let report = TableReport {
        images: names,
        sigmas: a.sigmas,
        layers: a.layers,
        base_seed: a.seed,
        cells,
    };

    write_json(&report, &out.join("table.json"), &mut manifest)?;
    let text_path: PathBuf = out.join("table.txt");
    std::fs::write(&text_path, report.render())?;
    manifest.output(&text_path)?;
    if json {
        emit_json(&report)?;
    } else {
        print!("{}", report.render());
    }
    Ok(manifest)
}
