use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use deeprest::io::{load_codes, load_image, load_model, save_image};
use deeprest::{decode, encode, Encoded64, Image64, Model64};
use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_deeprest"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

/// Smooth gradient with a bright square: some structure to learn from.
fn write_test_image(dir: &Path) -> PathBuf {
    let values = (0..32 * 32)
        .map(|k| {
            let (i, j) = (k / 32, k % 32);
            if (8..20).contains(&i) && (10..24).contains(&j) {
                230.0
            } else {
                4.0 * i as f64 + 2.0 * j as f64
            }
        })
        .collect();
    let img = Image64::from_vec(32, 32, values).unwrap();
    let path = dir.join("img.pgm");
    save_image(&img, &path, true).unwrap();
    path
}

fn manifest(dir: &Path, command: &str) -> Value {
    let text = std::fs::read_to_string(dir.join(format!("manifest-{command}.json"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn psnr_of_identical_images_is_inf() {
    let tmp = TempDir::new().unwrap();
    let img = write_test_image(tmp.path());
    let out = run(tmp.path(), &["psnr", img.to_str().unwrap(), img.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "inf");
    let m = manifest(tmp.path(), "psnr");
    assert_eq!(m["inputs"].as_array().unwrap().len(), 2);
}

#[test]
fn usage_and_runtime_errors_have_distinct_codes() {
    let tmp = TempDir::new().unwrap();
    let img = write_test_image(tmp.path());
    let img = img.to_str().unwrap();
    let usage_cases: [&[&str]; 6] = [
        &[
            "denoise",
            img,
            "--sigma",
            "20",
            "--layers",
            "3",
            "--keep-schedule",
            "100,36",
        ],
        &[
            "denoise",
            img,
            "--sigma",
            "20",
            "--layers",
            "3",
            "--keep-schedule",
            "36,49",
        ],
        &[
            "denoise",
            img,
            "--sigma",
            "20",
            "--layers",
            "3",
            "--keep-schedule",
            "49",
        ],
        &["denoise", img, "--sigma", "20", "--passes", "2"],
        &["denoise", img, "--sigma", "-1"],
        &["train", img],
    ];
    for args in usage_cases {
        let out = run(tmp.path(), args);
        assert_eq!(
            out.status.code(),
            Some(1),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(!out.stderr.is_empty());
    }
    let out = run(tmp.path(), &["psnr", "missing.pgm", img]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(run(tmp.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn file_round_trip_matches_in_memory_codec() {
    let tmp = TempDir::new().unwrap();
    let img_path = write_test_image(tmp.path());
    let img_arg = img_path.to_str().unwrap();
    let common = ["--out-dir", "m", "--iters", "8", "--patch", "4x4"];
    let out = run(
        tmp.path(),
        &[
            &[
                "train",
                img_arg,
                "--sigma",
                "5",
                "--layers",
                "2",
                "--keep-schedule",
                "9",
            ],
            &common[..],
        ]
        .concat(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("m/atoms_layer2.pgm").exists());

    let model_arg = "m/model.drtm";
    assert!(
        run(tmp.path(), &["encode", "--model", model_arg, img_arg, "--out-dir", "m"])
            .status
            .success()
    );
    assert!(run(
        tmp.path(),
        &["decode", "--model", model_arg, "m/codes.drtc", "--out-dir", "m"]
    )
    .status
    .success());

    let model: Model64 = load_model(tmp.path().join(model_arg)).unwrap();
    let img: Image64 = load_image(&img_path).unwrap();
    let in_memory = encode(&img, &model).unwrap();
    let from_file: Encoded64 = load_codes(tmp.path().join("m/codes.drtc")).unwrap();
    for (a, b) in in_memory.coeffs.iter().zip(&from_file.coeffs) {
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let expect = decode(&in_memory, &model)
        .unwrap()
        .data()
        .mapv(|v| v.round().clamp(0.0, 255.0));
    let got: Image64 = load_image(tmp.path().join("m/decoded.pgm")).unwrap();
    assert_eq!(got.data(), expect);
}

#[test]
fn denoise_run_replays_from_its_manifest() {
    let tmp = TempDir::new().unwrap();
    let img = write_test_image(tmp.path());
    let args = [
        "denoise",
        img.to_str().unwrap(),
        "--sigma",
        "15",
        "--layers",
        "2",
        "--seed",
        "7",
        "--iters",
        "5",
        "--patch",
        "5",
        "--keep-schedule",
        "16",
        "--pass-sigmas",
        "15,5",
        "--out-dir",
        "run",
        "--json",
    ];
    let out = run(tmp.path(), &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passes"].as_array().unwrap().len(), 2);
    assert!(report["passes"][1]["psnr"].as_f64().unwrap() > report["input_psnr"].as_f64().unwrap());

    let first = manifest(&tmp.path().join("run"), "denoise");
    assert_eq!(first["seed"], 7);
    let names: Vec<&str> = first["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|o| o["path"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["run/noisy.pgm", "run/denoised.pgm", "run/report.json"]);

    let replay_dir = TempDir::new().unwrap();
    let argv: Vec<String> = first["argv"].as_array().unwrap()[1..]
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    assert!(
        run(replay_dir.path(), &argv.iter().map(String::as_str).collect::<Vec<_>>())
            .status
            .success()
    );
    let second = manifest(&replay_dir.path().join("run"), "denoise");
    // The report carries timings, so compare the images only.
    assert_eq!(first["outputs"][0], second["outputs"][0]);
    assert_eq!(first["outputs"][1], second["outputs"][1]);
    assert_eq!(first["inputs"], second["inputs"]);
}

#[test]
fn table_has_one_cell_per_combination_with_derived_seeds() {
    let tmp = TempDir::new().unwrap();
    let img = write_test_image(tmp.path());
    let other = tmp.path().join("other.pgm");
    std::fs::copy(&img, &other).unwrap();
    let out = run(
        tmp.path(),
        &[
            "table",
            img.to_str().unwrap(),
            other.to_str().unwrap(),
            "--sigmas",
            "10,30",
            "--layers",
            "1,2",
            "--iters",
            "3",
            "--patch",
            "4",
            "--keep-schedule",
            "9",
            "--seed",
            "100",
            "--jobs",
            "2",
            "--out-dir",
            "t",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().count(), 1 + 2 * 2);
    assert!(text.lines().next().unwrap().contains("L=2"));

    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("t/table.json")).unwrap()).unwrap();
    let cells = report["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 8);
    for (k, cell) in cells.iter().enumerate() {
        assert_eq!(cell["seed"], 100 + k as u64);
        assert_eq!(cell["layers"], [1, 2][k % 2]);
        assert_eq!(cell["sigma"].as_f64().unwrap(), [10.0, 30.0][(k / 2) % 2]);
    }
    // Same image, same sigma, different seeds: different noise.
    assert_ne!(cells[0]["input_psnr"], cells[4]["input_psnr"]);
}
