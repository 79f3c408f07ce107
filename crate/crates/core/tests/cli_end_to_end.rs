use std::path::Path;
use std::process::Command;

use negmine::manifest::{RunManifest, RunStatus};
use negmine::runlog::{self, StepRecord};

const SMALL: &[&str] = &[
    "--set", "world.n_concepts=6",
    "--set", "world.n_images=80",
    "--set", "world.n_texts=80",
    "--set", "world.n_eval_images=16",
    "--set", "world.d_latent=8",
    "--set", "world.d_img=8",
    "--set", "world.k_text=6",
    "--set", "world.vocab=16",
    "--set", "train.epochs=3",
    "--set", "train.batch_size=8",
    "--set", "train.search_space=32",
    "--set", "model.d_emb=8",
    "--set", "model.hidden=16",
    "--set", "sim.quantiles=8",
    "--set", "scheduler.hidden=16",
];

fn negmine(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_negmine"))
        .args(args)
        .output()
        .expect("spawn negmine");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn with_small<'a>(head: &[&'a str]) -> Vec<&'a str> {
    let mut v = head.to_vec();
    v.extend_from_slice(SMALL);
    v
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_train_eval_compare() {
    let dir = tempfile::tempdir().unwrap();
    let world = dir.path().join("world.jsonl");
    let (code, out, err) = negmine(&with_small(&["gen-world", "--seed", "1", "--out", s(&world)]));
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("p_fn="), "{out}");

    let mut runs = Vec::new();
    for policy in ["falcon", "fixed:1.0", "uniform"] {
        let run = dir.path().join(policy.replace(':', "_"));
        let (code, out, err) = negmine(&with_small(&[
            "train", "--policy", policy, "--world", s(&world), "--out", s(&run),
        ]));
        assert_eq!(code, 0, "{policy}: {err}");
        assert!(out.contains("finished"), "{out}");
        let manifest = RunManifest::read(&run).unwrap();
        assert_eq!(manifest.status, RunStatus::Complete);
        let steps: Vec<StepRecord> = runlog::read_csv(&run.join(runlog::METRICS_FILE)).unwrap();
        assert_eq!(steps.len(), 3 * 64 / 8);

        let (code, out, err) = negmine(&["eval", "--run", s(&run)]);
        assert_eq!(code, 0, "{err}");
        assert!(out.contains("t2i strict R@1"), "{out}");
        assert!(run.join(runlog::RECALL_FILE).exists());
        assert!(run.join(runlog::FN_CURVE_FILE).exists());
        runs.push(run);
    }

    let table = dir.path().join("compare.csv");
    let mut args = vec!["compare", "--out", s(&table)];
    args.extend(runs.iter().map(|r| s(r)));
    let (code, out, err) = negmine(&args);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("falcon"), "{out}");
    let text = std::fs::read_to_string(&table).unwrap();
    assert!(text.starts_with("# comparison_key="), "{text}");
    assert_eq!(text.lines().filter(|l| l.contains(",mean,") || l.starts_with("mean")).count(), 3, "{text}");
}

#[test]
fn compare_refuses_runs_with_different_settings() {
    let dir = tempfile::tempdir().unwrap();
    let world = dir.path().join("world.jsonl");
    assert_eq!(negmine(&with_small(&["gen-world", "--out", s(&world)])).0, 0);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let mut args = with_small(&["train", "--policy", "uniform", "--world", s(&world), "--out", s(&a)]);
    assert_eq!(negmine(&args).0, 0);
    args = with_small(&["train", "--policy", "uniform", "--world", s(&world), "--out", s(&b)]);
    args.extend_from_slice(&["--set", "train.lr=0.002"]);
    assert_eq!(negmine(&args).0, 0);
    for r in [&a, &b] {
        assert_eq!(negmine(&["eval", "--run", s(r)]).0, 0);
    }
    let (code, _, err) = negmine(&["compare", "--out", s(&dir.path().join("c.csv")), s(&a), s(&b)]);
    assert_eq!(code, 2);
    assert!(err.contains("incomparable"), "{err}");
}

#[test]
fn exit_codes() {
    assert_eq!(negmine(&["no-such-command"]).0, 1);
    assert_eq!(negmine(&["config", "--set", "train.epochs=zero"]).0, 1);
    assert_eq!(negmine(&["config", "--set", "bogus.key=1"]).0, 1);
    let (code, out, _) = negmine(&["config", "--defaults"]);
    assert_eq!(code, 0);
    assert!(out.contains("epochs = 20"), "{out}");
    let (code, _, err) = negmine(&["eval", "--run", "/definitely/not/here"]);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn dump_sim_writes_npy_matrices() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let mut args = with_small(&["train", "--policy", "fixed:0.5", "--dump-sim", "--out", s(&run)]);
    args.extend_from_slice(&["--set", "train.epochs=2"]);
    let (code, _, err) = negmine(&args);
    assert_eq!(code, 0, "{err}");
    let dumps: Vec<_> = std::fs::read_dir(run.join("sim"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".npy"))
        .collect();
    assert_eq!(dumps.len(), 2, "{dumps:?}");
    let bytes = std::fs::read(run.join("sim").join(&dumps[0])).unwrap();
    assert_eq!(&bytes[..6], b"\x93NUMPY");
    // 32×32 little-endian f64 after a 64-byte-aligned header.
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    assert_eq!((10 + header_len) % 64, 0);
    assert_eq!(bytes.len() - 10 - header_len, 32 * 32 * 8);
}
