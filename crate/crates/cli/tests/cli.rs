use std::path::Path;
use std::process::{Command, Output};

fn seqcorr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqcorr"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = seqcorr(args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn phantoms_then_fixed_reconstruction() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    let output = dir.path().join("out");
    ok(&[
        "make-phantoms",
        "--count",
        "2",
        "--size",
        "16",
        "--seed",
        "3",
        "--output",
        p(&input),
    ]);
    assert_eq!(std::fs::read_dir(&input).unwrap().count(), 2);

    let stdout = ok(&[
        "reconstruct",
        "--model",
        "nld",
        "--correction",
        "fixed",
        "--noise",
        "gaussian",
        "--noise-level",
        "0.03",
        "--fidelity",
        "l2",
        "--lambda",
        "0.01",
        "--seed",
        "1",
        "--input",
        p(&input),
        "--output",
        p(&output),
        "--size",
        "16",
        "--outer-max",
        "3",
        "--inner-max",
        "200",
    ]);
    assert!(stdout.contains("mean psnr"));
    for f in [
        "metrics.csv",
        "run.json",
        "000_phantom_00000_recon.pgm",
        "001_phantom_00001_convergence.csv",
    ] {
        assert!(output.join(f).is_file(), "{f} missing");
    }
}

#[test]
fn aem_fit_and_error_scatter() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train");
    ok(&[
        "make-phantoms",
        "--count",
        "6",
        "--size",
        "16",
        "--output",
        p(&train),
    ]);
    let stats = dir.path().join("nld.aem");
    ok(&[
        "aem-fit",
        "--model",
        "nld",
        "--input",
        p(&train),
        "--size",
        "16",
        "--noise-level",
        "0.03",
        "--skip",
        "2",
        "--output",
        p(&stats),
    ]);
    let loaded = seqcorr::aem::AemStats::load(&stats).unwrap();
    assert_eq!(loaded.n_samples, 4);

    let csv = dir.path().join("scatter.csv");
    ok(&[
        "error-scatter",
        "--model",
        "cf",
        "--phantoms",
        "5",
        "--size",
        "16",
        "--pairs",
        "3",
        "--output",
        p(&csv),
    ]);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "sample,pixel_i,pixel_j,eps_i,eps_j"
    );
    assert_eq!(text.lines().count(), 1 + 5 * 3);
}

#[test]
fn bad_arguments_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = seqcorr(&[
        "reconstruct",
        "--model",
        "nld",
        "--correction",
        "aem",
        "--noise",
        "impulse",
        "--noise-level",
        "0.04",
        "--fidelity",
        "l1",
        "--lambda",
        "0.1",
        "--input",
        p(dir.path()),
        "--output",
        p(dir.path()),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let out = seqcorr(&["reconstruct", "--model", "ld"]);
    assert!(!out.status.success());
}
