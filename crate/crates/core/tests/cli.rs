use std::path::Path;
use std::process::{Command, Output};

use adl_core::pipeline::{verify_manifest, Stage, MANIFEST};

const TINY: &str = "\
[run]
seed = 4
precision = fp64

[data]
total = 100
size = 32
min_per_class = 10

[model]
width = 4
hidden = 16
time_dim = 8
embed_dim = 4
grid = 8

[train]
epochs = 1
draws_per_sample = 1

[finetune]
epochs = 1
prior_per_class = 1
prior_steps = 3

[sample]
steps = 3
per_class = 4

[evaluate]
encoder_epochs = 12
msssim_pairs = 5

[embed]
perplexity = 3
iterations = 60

[segcheck]
epochs = 1
overlays = 1
";

fn adl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adl"))
        .args(args)
        .args(["--config", dir.join("tiny.ini").to_str().unwrap(), "--out", dir.join("runs").to_str().unwrap()])
        .env("ADL_THREADS", "1")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.ini"), TINY).unwrap();
    let run = dir.path().join("runs/run-4");

    let o = adl(dir.path(), &["evaluate"]);
    assert_eq!(o.status.code(), Some(6), "{}", stderr(&o));
    assert!(stderr(&o).contains("run `gen-data` first"), "{}", stderr(&o));

    assert!(adl(dir.path(), &["gen-data"]).status.success());
    let o = adl(dir.path(), &["evaluate"]);
    assert_eq!(o.status.code(), Some(6));
    assert!(stderr(&o).contains("run `sample` first"), "{}", stderr(&o));

    let o = adl(dir.path(), &["all", "--sampler", "euler_a", "--guidance", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("MS-SSIM") && stdout.contains("Synthetic"), "{stdout}");
    let sidecar = std::fs::read_to_string(run.join("sample/samples.csv")).unwrap();
    assert!(sidecar.lines().nth(1).unwrap().contains(",euler_a,3,3.0,1,0"), "{sidecar}");
    assert_eq!(sidecar.lines().count(), 1 + 5 * 4);

    // Integrity sweep: every manifest's recorded files exist with matching hashes.
    let mut verified = 0;
    for stage in Stage::ALL {
        verified += verify_manifest(&run, &run.join(stage.name()).join(MANIFEST)).unwrap();
    }
    assert!(verified > 50, "{verified}");
    let manifest = std::fs::read_to_string(run.join("sample").join(MANIFEST)).unwrap();
    assert!(manifest.contains("stage = sample") && manifest.contains("method = euler_a"));

    // Partial metrics still render, with gaps.
    std::fs::remove_file(run.join("segcheck/dice.csv")).unwrap();
    let o = adl(dir.path(), &["report"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("n/a"));
    assert!(stderr(&o).contains("missing metrics"), "{}", stderr(&o));

    std::fs::write(run.join("sample/c1.tns"), b"tampered").unwrap();
    assert!(verify_manifest(&run, &run.join("sample").join(MANIFEST)).is_err());
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.ini"), "[sample]\nsteps = 20\nbogus = 1\n").unwrap();
    let o = adl(dir.path(), &["gen-data"]);
    assert_eq!(o.status.code(), Some(7));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    std::fs::write(dir.path().join("tiny.ini"), "").unwrap();
    let o = adl(dir.path(), &["sample", "--class", "9"]);
    assert!(!o.status.success());
    let o = adl(dir.path(), &["sample", "--steps", "5000"]);
    assert_eq!(o.status.code(), Some(7), "{}", stderr(&o));
}
