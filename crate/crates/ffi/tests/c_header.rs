//! Builds a C program against the generated header and the static library
//! and checks its output against the Rust engine.

use std::fs;
use std::path::PathBuf;
use std::process::Command;

use tempfile::TempDir;
use vocmerge::format::write_vocabulary;
use vocmerge::index::write_index;
use vocmerge::{
    build_index, generate_synthetic, score_query, train_vocabulary, MergeConfig, Method, ScoringMethod, SyntheticSpec,
};

/// Builds the static library for the profile this test runs under;
/// `cargo test` itself only produces the rlib.
fn static_lib() -> PathBuf {
    // target/<profile>/deps/<this test> -> target/<profile>
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap().to_path_buf();
    let mut build = Command::new(env!("CARGO"));
    build
        .args(["build", "--quiet", "-p", "vocmerge-ffi", "--lib", "--target-dir"])
        .arg(profile_dir.parent().unwrap());
    if profile_dir.ends_with("release") {
        build.arg("--release");
    }
    let out = build.output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    profile_dir.join("libvocmerge_ffi.a")
}

#[test]
fn c_client_agrees_with_engine() {
    let lib = static_lib();
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler");
        return;
    }
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let dir = TempDir::new().unwrap();
    let d = dir.path();

    let spec = SyntheticSpec {
        n_images: 100,
        n_queries: 3,
        training_images: 30,
        features_per_image: 25,
        dim: 8,
        n_clusters: 30,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec).unwrap();
    let vocabs: Vec<_> = (0..2)
        .map(|k| train_vocabulary(&data.training, 16, k, 10).unwrap())
        .collect();
    let index = build_index(&data.db, &vocabs, None).unwrap();
    for (k, v) in vocabs.iter().enumerate() {
        write_vocabulary(v, d.join(format!("vocab{k}.bmvc"))).unwrap();
    }
    write_index(&index, d.join("db.idx")).unwrap();
    let q = data.queries.image(1);
    let bytes: Vec<u8> = q.raw().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(d.join("query.f32"), bytes).unwrap();

    let exe = d.join("c_client");
    let cc = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(manifest.join("tests/c_client.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(
        cc.status.success(),
        "cc failed: {}",
        String::from_utf8_lossy(&cc.stderr)
    );

    let run = Command::new(&exe)
        .current_dir(d)
        .args(["db.idx", "vocab0.bmvc", "vocab1.bmvc", "query.f32"])
        .arg(q.len().to_string())
        .arg(q.dim().to_string())
        .output()
        .unwrap();
    assert!(
        run.status.success(),
        "client failed: {}",
        String::from_utf8_lossy(&run.stderr)
    );

    let want = score_query(q, &index, &ScoringMethod::new(Method::Bayes), &MergeConfig::default()).unwrap();
    let got: Vec<(u32, f64)> = String::from_utf8(run.stdout)
        .unwrap()
        .lines()
        .map(|l| {
            let (id, s) = l.split_once(' ').unwrap();
            (id.parse().unwrap(), s.parse().unwrap())
        })
        .collect();
    assert_eq!(got.len(), want.len().min(10));
    assert_eq!(got, want.entries[..got.len()]);
}
