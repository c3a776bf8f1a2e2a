use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ndarray::{ArrayD, Ix4};
use urope::config::Precision;
use urope::io::{csv_diff, read_tensor, tensor4_csv, write_tensor};

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/golden").join(name)
}

fn urope(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_urope")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_matches_golden(golden_name: &str, actual: &str) {
    let expected = fs::read_to_string(golden(golden_name)).unwrap();
    if let Some(d) = csv_diff(&expected, actual, 1e-9) {
        panic!("{golden_name}: {d}");
    }
}

#[test]
fn gen_scene_reproduces_the_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("scene.json");
    let args = ["gen-scene", "--seed", "7", "--views", "2", "--size", "32", "--patch", "8", "--jitter", "0.2", "--spread", "0.5"];
    let o = urope(&[&args[..], &["--out", s(&out)]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(&out).unwrap(), fs::read(golden("scene.json")).unwrap());
}

#[test]
fn gen_scene_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    for p in [&a, &b] {
        let o = urope(&["gen-scene", "--seed", "11", "--views", "3", "--size", "64x48", "--points", "5", "--out", s(p)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn patch_must_divide_image() {
    let dir = tempfile::tempdir().unwrap();
    let o = urope(&["gen-scene", "--size", "30", "--patch", "8", "--out", s(&dir.path().join("x.json"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("divisible by patch size"), "{}", stderr(&o));
}

#[test]
fn existing_outputs_need_force() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("scene.json");
    assert!(urope(&["gen-scene", "--out", s(&out)]).status.success());
    let o = urope(&["gen-scene", "--seed", "1", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--force"), "{}", stderr(&o));
    assert!(urope(&["gen-scene", "--seed", "1", "--out", s(&out), "--force"]).status.success());
}

#[test]
fn project_matches_golden() {
    let o = urope(&["project", "--scene", s(&golden("scene.json")), "--src", "0", "--dst", "1", "--u", "11.5", "--v", "3.5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_matches_golden("projection.csv", &String::from_utf8(o.stdout).unwrap());
}

#[test]
fn project_to_same_view_is_identity() {
    let o = urope(&["project", "--scene", s(&golden("scene.json")), "--src", "1", "--dst", "1", "--u", "5.25", "--v", "17"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    for row in text.lines().skip(1) {
        let c: Vec<&str> = row.split(',').collect();
        let (u, v): (f64, f64) = (c[1].parse().unwrap(), c[2].parse().unwrap());
        assert!((u - 5.25).abs() < 1e-9 && (v - 17.0).abs() < 1e-9, "{row}");
        assert_eq!(c[4], "true");
    }
}

#[test]
fn project_marks_points_behind_the_camera() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene.json");
    // views 0 and 2 face each other across the rig
    assert!(urope(&["gen-scene", "--views", "3", "--spread", "1.57", "--out", s(&scene)]).status.success());
    let o = urope(&["project", "--scene", s(&scene), "--src", "0", "--dst", "2", "--u", "15.5", "--v", "15.5", "--depths", "50"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert!(row[3].parse::<f64>().unwrap() < 0.0, "{text}");
    assert_eq!(row[4], "false");
}

#[test]
fn attn_matches_golden_and_dumps_weights() {
    let dir = tempfile::tempdir().unwrap();
    let (out, weights) = (dir.path().join("out.json"), dir.path().join("w.json"));
    let inputs = golden("inputs");
    let o = urope(&[
        "attn",
        "--scene",
        s(&golden("scene.json")),
        "--q",
        s(&inputs.join("q.json")),
        "--k",
        s(&inputs.join("k.json")),
        "--v",
        s(&inputs.join("v.json")),
        "--out",
        s(&out),
        "--weights",
        s(&weights),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let x = read_tensor(&out).unwrap().into_dimensionality::<Ix4>().unwrap();
    assert_matches_golden("attention.csv", &tensor4_csv(&x));
    let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(side["config"]["heads"], 8);
    assert_eq!(read_tensor(&weights).unwrap().shape(), &[1, 8, 32, 32]);

    let diag = dir.path().join("diag");
    let o = urope(&["diag", "--weights", s(&weights), "--scene", s(&golden("scene.json")), "--out-dir", s(&diag)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for name in ["entropy.csv", "dominant.csv"].into_iter().map(String::from).chain((0..8).map(|h| format!("heatmap_h{h}.csv"))) {
        assert_matches_golden(&name, &fs::read_to_string(diag.join(&name)).unwrap());
    }
    assert!(diag.join("heatmap.json").exists());
}

#[test]
fn attn_rejects_malformed_headers() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("q.json");
    fs::write(&bad, r#"{"shape":[1,32,8,16],"dtype":"f64","order":"column-major","endianness":"little"}"#).unwrap();
    fs::copy(golden("inputs/q.bin"), dir.path().join("q.bin")).unwrap();
    let inputs = golden("inputs");
    let o = urope(&[
        "attn",
        "--scene",
        s(&golden("scene.json")),
        "--q",
        s(&bad),
        "--k",
        s(&inputs.join("k.json")),
        "--v",
        s(&inputs.join("v.json")),
        "--out",
        s(&dir.path().join("out.json")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("row-major"), "{}", stderr(&o));
}

#[test]
fn diag_on_uniform_weights_gives_entropy_one() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w.json");
    let uniform = ArrayD::from_elem(vec![1, 8, 32, 32], 1.0 / 32.0);
    write_tensor(&w, &uniform, Precision::F64, None, false).unwrap();
    let out = dir.path().join("diag");
    let o = urope(&["diag", "--weights", s(&w), "--scene", s(&golden("scene.json")), "--out-dir", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("entropy.csv")).unwrap();
    for row in text.lines().skip(1) {
        assert_eq!(row.rsplit(',').next().unwrap(), "1", "{row}");
    }
}

#[test]
fn missing_scene_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = urope(&[
        "diag",
        "--weights",
        s(&golden("inputs/q.json")),
        "--scene",
        s(&dir.path().join("nope.json")),
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn selftest_quick_passes() {
    let o = urope(&["selftest"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains(", 0 failed"));
}
