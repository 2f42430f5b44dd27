//! End-to-end tests of the `meshgen` binary: each test shells out to the
//! compiled executable and inspects files, exit codes and stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_meshgen")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("failed to spawn meshgen")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// First stderr line: the machine-parsable `error code=... kind=...:` line.
/// Messages may span further lines (e.g. TOML parse context).
fn stderr_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr)
        .lines()
        .next()
        .unwrap_or_default()
        .to_string()
}

/// A tetrahedron OBJ used by the codec tests.
const TETRA: &str = "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\n\
                     f 1 3 2\nf 1 2 4\nf 1 4 3\nf 2 3 4\n";

/// One shared dataset + trained checkpoint for the tests that need a model.
struct Fixture {
    _dir: TempDir,
    config: PathBuf,
    data: PathBuf,
    ckpt: PathBuf,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let config = dir.path().join("tiny.toml");
        fs::write(
            &config,
            r#"
[data]
quant_level = 64
count = 4
families = ["box"]
points = 32
seed = 7

[model]
depths = [1, 1, 1]
channels = 16
head_channels = 8
ffn_hidden = 32
window = 18
conditioned = false

[training]
steps = 2
batch_size = 2
window = 18
stride = 18
warmup_steps = 1

[sampling]
temperature = 0.0
faces = 5
seed = 3
"#,
        )
        .unwrap();
        let data = dir.path().join("data");
        let train_out = dir.path().join("run");
        assert_ok(&run(&[
            "gen-dataset",
            "--output-dir",
            data.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
        ]));
        assert_ok(&run(&[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--output-dir",
            train_out.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
        ]));
        Fixture {
            config,
            data,
            ckpt: train_out.join("model.ckpt"),
            _dir: dir,
        }
    })
}

fn encode(input: &Path, output: &Path) {
    assert_ok(&run(&[
        "encode",
        "--input",
        input.to_str().unwrap(),
        "--output",
        output.to_str().unwrap(),
    ]));
}

#[test]
fn encode_decode_round_trip_preserves_the_token_stream() {
    let dir = TempDir::new().unwrap();
    let obj = dir.path().join("tetra.obj");
    fs::write(&obj, TETRA).unwrap();

    // Mesh -> tokens -> mesh -> tokens. The second pass starts from the
    // decoded (already canonical, grid-aligned) mesh, so the two token
    // streams must be byte-identical: re-quantization is the identity on
    // grid points and canonical ordering is idempotent.
    let first = dir.path().join("a.mtok");
    let decoded = dir.path().join("b.obj");
    let second = dir.path().join("b.mtok");
    encode(&obj, &first);
    assert_ok(&run(&[
        "decode",
        "--input",
        first.to_str().unwrap(),
        "--output",
        decoded.to_str().unwrap(),
    ]));
    encode(&decoded, &second);
    assert_eq!(
        fs::read(&first).unwrap(),
        fs::read(&second).unwrap(),
        "decode followed by encode changed the token stream"
    );
}

#[test]
fn validate_accepts_every_encoder_output() {
    let fx = fixture();
    let dir = TempDir::new().unwrap();
    let mut mtoks = Vec::new();
    for entry in fs::read_dir(&fx.data).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "obj") {
            let out = dir.path().join(format!(
                "{}.mtok",
                path.file_stem().unwrap().to_str().unwrap()
            ));
            encode(&path, &out);
            mtoks.push(out);
        }
    }
    assert_eq!(mtoks.len(), 4);
    let mut args = vec!["validate"];
    let paths: Vec<String> = mtoks.iter().map(|p| p.display().to_string()).collect();
    args.extend(paths.iter().map(String::as_str));
    assert_ok(&run(&args));
}

#[test]
fn generate_respects_the_face_budget_and_records_the_halt() {
    let fx = fixture();
    let dir = TempDir::new().unwrap();
    let obj = dir.path().join("gen.obj");
    let out = run(&[
        "generate",
        "--checkpoint",
        fx.ckpt.to_str().unwrap(),
        "--output",
        obj.to_str().unwrap(),
        "--config",
        fx.config.to_str().unwrap(),
        "--faces",
        "5",
    ]);
    assert_ok(&out);

    let faces = fs::read_to_string(&obj)
        .unwrap()
        .lines()
        .filter(|l| l.starts_with("f "))
        .count();
    assert!(faces <= 10, "generated {faces} faces, budget allows 10");

    let halt: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("gen.halt.json")).unwrap())
            .unwrap();
    let reason = halt["halt"].as_str().unwrap();
    assert!(reason == "natural" || reason == "face_limit", "halt={reason}");
    assert!(halt["faces"].as_u64().unwrap() <= 10);
    assert!(halt["tokens"].as_u64().unwrap() >= 9);
}

#[test]
fn identical_seeds_give_bit_identical_outputs() {
    let fx = fixture();
    let dir = TempDir::new().unwrap();

    // Same dataset seed twice: every artifact byte-identical.
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        assert_ok(&run(&[
            "gen-dataset",
            "--output-dir",
            d.to_str().unwrap(),
            "--config",
            fx.config.to_str().unwrap(),
        ]));
    }
    assert_eq!(
        fs::read(a.join("manifest.json")).unwrap(),
        fs::read(b.join("manifest.json")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("mesh_00000.obj")).unwrap(),
        fs::read(b.join("mesh_00000.obj")).unwrap()
    );

    // Same sampling seed twice: identical mesh and halt record.
    let (g1, g2) = (dir.path().join("g1.obj"), dir.path().join("g2.obj"));
    for g in [&g1, &g2] {
        assert_ok(&run(&[
            "generate",
            "--checkpoint",
            fx.ckpt.to_str().unwrap(),
            "--output",
            g.to_str().unwrap(),
            "--config",
            fx.config.to_str().unwrap(),
            "--temperature",
            "0.9",
            "--seed",
            "11",
        ]));
    }
    assert_eq!(fs::read(&g1).unwrap(), fs::read(&g2).unwrap());
    assert_eq!(
        fs::read(dir.path().join("g1.halt.json")).unwrap(),
        fs::read(dir.path().join("g2.halt.json")).unwrap()
    );
}

#[test]
fn every_run_writes_its_resolved_config() {
    let fx = fixture();
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("ds");
    assert_ok(&run(&[
        "gen-dataset",
        "--output-dir",
        out_dir.to_str().unwrap(),
        "--config",
        fx.config.to_str().unwrap(),
        "--count",
        "3",
    ]));
    let text = fs::read_to_string(out_dir.join("gen-dataset-resolved.toml")).unwrap();
    let doc: toml::Value = toml::from_str(&text).unwrap();
    assert_eq!(doc["command"].as_str(), Some("gen-dataset"));
    assert_eq!(doc["flags"]["count"].as_str(), Some("3"));
    assert_eq!(doc["data"]["count"].as_integer(), Some(3));
    assert_eq!(doc["data"]["quant_level"].as_integer(), Some(64));
}

#[test]
fn unknown_config_keys_exit_with_the_config_code() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[data]\nbogus_knob = 1\n").unwrap();
    let out = run(&[
        "gen-dataset",
        "--output-dir",
        dir.path().join("x").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let line = stderr_line(&out);
    assert!(
        line.starts_with("error code=2 kind=config:"),
        "unexpected error line: {line}"
    );
}

#[test]
fn missing_input_exits_with_the_io_code() {
    let dir = TempDir::new().unwrap();
    let out = run(&[
        "encode",
        "--input",
        dir.path().join("nope.obj").to_str().unwrap(),
        "--output",
        dir.path().join("out.mtok").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr_line(&out).starts_with("error code=3 kind=io:"));
}

#[test]
fn malformed_token_files_exit_with_the_data_code() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.mtok");
    fs::write(&bad, "this is not a token stream").unwrap();
    let out = run(&[
        "decode",
        "--input",
        bad.to_str().unwrap(),
        "--output",
        dir.path().join("out.obj").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert!(stderr_line(&out).starts_with("error code=4 kind=framing:"));
}

#[test]
fn bad_flags_exit_with_the_usage_code() {
    let out = run(&["encode", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
}
