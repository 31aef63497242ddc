//! Denoise one PGM at a given noise level and print the PSNRs.
//!
//! cargo run --release -p deeprest --example denoise_image -- data/images/camera.pgm 20 3

use deeprest::io::load_image;
use deeprest::{simulate_and_denoise, DenoiseConfig, Image64};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    if args.len() < 4 {
        eprintln!("usage: denoise_image <image.pgm> <sigma> <layers> [pass sigmas...]");
        std::process::exit(1);
    }
    let clean: Image64 = load_image(&args[1])?;
    let sigma: f64 = args[2].parse()?;
    let layers: usize = args[3].parse()?;
    let passes: Vec<f64> = args[4..].iter().map(|s| s.parse()).collect::<Result<_, _>>()?;
    let cfg = DenoiseConfig::new(sigma, layers).with_passes(&passes);
    let (_, _, report) = simulate_and_denoise(&clean, &cfg)?;
    println!("input  PSNR {:.2} dB", report.input_psnr.unwrap_or(f64::NAN));
    for (i, pass) in report.passes.iter().enumerate() {
        println!(
            "pass {} (sigma {}) PSNR {:.2} dB in {:.1}s, sparsity {:?}",
            i + 1,
            pass.sigma_estimate,
            pass.psnr.unwrap_or(f64::NAN),
            pass.seconds,
            pass.layer_sparsity
        );
    }
    Ok(())
}
