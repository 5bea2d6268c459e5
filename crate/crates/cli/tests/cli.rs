use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn ern(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ern")).args(args).output().expect("spawn ern")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new(seed: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let f = Fixture { dir };
        let o = ern(&["init-random", "--arch", "erns18x075", "--seed", seed, "--out", s(&f.ckpt())]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let o = ern(&["compile", "--manifest", s(&f.ckpt()), "--out", s(&f.model())]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn ckpt(&self) -> PathBuf {
        self.path("ckpt")
    }

    fn model(&self) -> PathBuf {
        self.path("model.ern")
    }

    fn ppm(&self, name: &str, h: usize, w: usize, pixel: impl Fn(usize, usize) -> [u8; 3]) -> PathBuf {
        let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
        for y in 0..h {
            for x in 0..w {
                buf.extend(pixel(y, x));
            }
        }
        let p = self.path(name);
        fs::write(&p, buf).unwrap();
        p
    }
}

fn noise(y: usize, x: usize) -> [u8; 3] {
    let v = (y * 131 + x * 71) as u32;
    [(v % 256) as u8, (v * 7 % 256) as u8, (v * 13 % 253) as u8]
}

fn probabilities(out: &str) -> Vec<(usize, f64)> {
    out.lines()
        .map(|l| {
            let mut it = l.split('\t');
            (it.next().unwrap().parse().unwrap(), it.next().unwrap().parse().unwrap())
        })
        .collect()
}

#[test]
fn compile_is_deterministic() {
    let f = Fixture::new("3");
    let again = f.path("again.ern");
    let o = ern(&["compile", "--manifest", s(&f.ckpt().join("manifest.json")), "--out", s(&again)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(f.model()).unwrap(), fs::read(again).unwrap());
}

#[test]
fn missing_blob_is_an_input_error_naming_the_layer() {
    let f = Fixture::new("4");
    fs::remove_file(f.ckpt().join("stage3.block1.conv1.f32")).unwrap();
    let o = ern(&["compile", "--manifest", s(&f.ckpt()), "--out", s(&f.path("x.ern"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("stage3.block1.conv1"), "{}", stderr(&o));
}

#[test]
fn infer_prints_top_classes() {
    let f = Fixture::new("5");
    let img = f.ppm("img.ppm", 64, 64, noise);
    let o = ern(&["infer", "--model", s(&f.model()), "--image", s(&img)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let p = probabilities(&stdout(&o));
    assert_eq!(p.len(), 5);
    assert!(p.windows(2).all(|w| w[0].1 >= w[1].1));
    let total: f64 = p.iter().map(|x| x.1).sum();
    assert!(total > 0.0 && total <= 1.0 + 1e-6);

    let o = ern(&["infer", "--model", s(&f.model()), "--image", s(&img), "--top", "1000"]);
    let total: f64 = probabilities(&stdout(&o)).iter().map(|x| x.1).sum();
    assert!((total - 1.0).abs() < 1e-4, "{total}");
}

#[test]
fn raw_input_matches_ppm() {
    let f = Fixture::new("6");
    let img = f.ppm("img.ppm", 40, 48, noise);
    let mut chw = vec![0u8; 3 * 40 * 48];
    for y in 0..40 {
        for x in 0..48 {
            for (c, v) in noise(y, x).into_iter().enumerate() {
                chw[(c * 40 + y) * 48 + x] = v;
            }
        }
    }
    let raw = f.path("img.raw");
    fs::write(&raw, chw).unwrap();
    let a = ern(&["infer", "--model", s(&f.model()), "--image", s(&img)]);
    let b = ern(&["infer", "--model", s(&f.model()), "--raw", s(&raw), "--height", "40", "--width", "48"]);
    assert_eq!(code(&b), 0, "{}", stderr(&b));
    assert_eq!(stdout(&a), stdout(&b));
}

#[test]
fn ten_crop_of_constant_image_equals_single_crop() {
    let f = Fixture::new("7");
    let big = f.ppm("big.ppm", 80, 96, |_, _| [120, 30, 200]);
    let small = f.ppm("small.ppm", 64, 64, |_, _| [120, 30, 200]);
    let a = ern(&["infer", "--model", s(&f.model()), "--image", s(&big), "--ten-crop", "--crop-size", "64"]);
    let b = ern(&["infer", "--model", s(&f.model()), "--image", s(&small)]);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b));

    let o = ern(&["infer", "--model", s(&f.model()), "--image", s(&small), "--ten-crop", "--crop-size", "65"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn larger_eval_resolution_runs() {
    let f = Fixture::new("8");
    let img = f.ppm("img.ppm", 288, 288, noise);
    let o = ern(&["infer", "--model", s(&f.model()), "--image", s(&img), "--top", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 3);
}

#[test]
fn bad_inputs_exit_with_input_error() {
    let f = Fixture::new("9");
    let bad = f.path("bad.ppm");
    fs::write(&bad, b"P3\n2 2\n255\n").unwrap();
    assert_eq!(code(&ern(&["infer", "--model", s(&f.model()), "--image", s(&bad)])), 2);
    let tiny = f.ppm("tiny.ppm", 8, 8, noise);
    assert_eq!(code(&ern(&["infer", "--model", s(&f.model()), "--image", s(&tiny)])), 2);
    let mut ern_bytes = fs::read(f.model()).unwrap();
    let n = ern_bytes.len();
    ern_bytes[n / 2] ^= 1;
    fs::write(f.path("corrupt.ern"), ern_bytes).unwrap();
    let img = f.ppm("img.ppm", 64, 64, noise);
    let o = ern(&["infer", "--model", s(&f.path("corrupt.ern")), "--image", s(&img)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("checksum"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&ern(&[])), 1);
    assert_eq!(code(&ern(&["stats"])), 1);
    assert_eq!(code(&ern(&["stats", "--arch", "resnet9000"])), 1);
    assert_eq!(code(&ern(&["frobnicate"])), 1);
    assert_eq!(code(&ern(&["--help"])), 0);
}

#[test]
fn stats_reports_reference_numbers() {
    let o = ern(&["stats", "--conv", "3:64:7:2", "--resolution", "224", "--json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["layer"]["macs"], 118_013_952u64);
    let o = ern(&["stats", "--conv", "30:64:7:2", "--resolution", "224"]);
    assert!(stdout(&o).contains("1180139520"));

    let o = ern(&["stats", "--arch", "erns50", "--json"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["final_layer_bytes"], 256_000u64);
    let o = ern(&["stats", "--arch", "erns18", "--resolution", "256"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("64000 bytes (0.061 MiB)"), "{}", stdout(&o));
}

#[test]
fn verify_passes_on_matching_manifest() {
    let f = Fixture::new("10");
    let o = ern(&[
        "verify",
        "--model",
        s(&f.model()),
        "--manifest",
        s(&f.ckpt()),
        "--images",
        "2",
        "--resolution",
        "32",
        "--json",
    ]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["passed"], true);
    assert_eq!(v["per_image"].as_array().unwrap().len(), 2);
}

#[test]
fn verify_fails_on_foreign_manifest() {
    let f = Fixture::new("11");
    let other = f.path("other");
    let o = ern(&["init-random", "--arch", "erns18x075", "--seed", "12", "--out", s(&other)]);
    assert_eq!(code(&o), 0);
    let o = ern(&["verify", "--model", s(&f.model()), "--manifest", s(&other), "--images", "1", "--resolution", "32"]);
    assert_eq!(code(&o), 3, "{}", stdout(&o));
    assert!(stdout(&o).contains("first divergence at"));
}

#[test]
fn bench_checks_paths_agree() {
    let f = Fixture::new("13");
    let o = ern(&["bench", "--model", s(&f.model()), "--iters", "1", "--resolution", "32", "--threads", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("logits identical"));
    let o = ern(&["bench", "--model", s(&f.model()), "--iters", "1", "--resolution", "32", "--kernel", "popcount"]);
    assert_eq!(code(&o), 0);
}
