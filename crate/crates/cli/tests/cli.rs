use std::path::Path;
use std::process::{Command, Output};

use agcn_core::audio::{save_wav, AudioClip};
use agcn_core::Tensor;

fn agcn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agcn")).env_remove("AGCN_SEED").args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Small synthetic dataset with a two-epoch config.
fn quick_dataset(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data");
    let o = agcn(&["synth", "--classes", "2", "--train", "8", "--test", "6", "--out", s(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = data.join("config.txt");
    let text = std::fs::read_to_string(&cfg).unwrap();
    let text = text.lines().map(|l| if l.starts_with("train.epochs") { "train.epochs = 2" } else { l }).collect::<Vec<_>>();
    std::fs::write(&cfg, text.join("\n")).unwrap();
    cfg
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.txt");
    let o = agcn(&["train", "--config", s(&missing), "--out", s(&dir.path().join("ck"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let empty = dir.path().join("empty.tsv");
    std::fs::write(&empty, "# nothing here\n\n").unwrap();
    let o = agcn(&["extract", "--manifest", s(&empty), "--modality", "audio", "--out", s(&dir.path().join("f"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("empty manifest"));

    assert_eq!(agcn(&["gradcheck"]).status.code(), Some(2));
    assert_eq!(agcn(&["gradcheck", "--tiny", "--config", "x"]).status.code(), Some(2));
    assert_eq!(agcn(&["bogus"]).status.code(), Some(2));

    let bad_key = dir.path().join("bad.txt");
    std::fs::write(&bad_key, "data.colour = red\n").unwrap();
    let o = agcn(&["train", "--config", s(&bad_key), "--out", s(&dir.path().join("ck"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn audio_extraction_shapes_and_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = String::new();
    for (i, rate) in [16_000u32, 22_050, 44_100].into_iter().enumerate() {
        let samples = (0..5 * rate as usize).map(|t| (t as f64 * 0.01 * (i + 1) as f64).sin() * 0.5).collect();
        let name = format!("clip{i}.wav");
        save_wav(&AudioClip::new(samples, rate).unwrap(), dir.path().join(&name)).unwrap();
        manifest.push_str(&format!("{name}\t{i}\n"));
    }
    let m = dir.path().join("clips.tsv");
    std::fs::write(&m, manifest).unwrap();

    let runs: Vec<Vec<Vec<u8>>> = ["a", "b"]
        .iter()
        .map(|out| {
            let out = dir.path().join(out);
            let o = agcn(&["extract", "--manifest", s(&m), "--modality", "audio", "--out", s(&out)]);
            assert!(o.status.success(), "{}", stderr(&o));
            (0..3)
                .map(|i| {
                    let p = out.join(format!("{i:05}.agt"));
                    assert_eq!(Tensor::load_agt1(&p).unwrap().shape(), [1, 201, 64]);
                    std::fs::read(p).unwrap()
                })
                .collect()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
    let index = std::fs::read_to_string(dir.path().join("a/index.tsv")).unwrap();
    assert_eq!(index.lines().filter(|l| l.ends_with("ok 1x201x64")).count(), 3);
}

#[test]
fn partial_extraction_failure_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    save_wav(&AudioClip::new(vec![0.1; 16_000], 16_000).unwrap(), dir.path().join("ok.wav")).unwrap();
    std::fs::write(dir.path().join("broken.wav"), b"not a wav").unwrap();
    let m = dir.path().join("m.tsv");
    std::fs::write(&m, "ok.wav\nbroken.wav\n").unwrap();
    let out = dir.path().join("f");
    let o = agcn(&["extract", "--manifest", s(&m), "--modality", "audio", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("manifest line 2"));
    let index = std::fs::read_to_string(out.join("index.tsv")).unwrap();
    assert!(index.lines().nth(1).unwrap().ends_with("ok 1x201x64"));
    assert!(index.lines().nth(2).unwrap().contains("error:"));
}

#[test]
fn train_eval_round_trip_and_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_dataset(dir.path());
    let ck = dir.path().join("ck");
    let o = Command::new(env!("CARGO_BIN_EXE_agcn"))
        .env("AGCN_SEED", "4242")
        .args(["train", "--quiet", "--config", s(&cfg), "--out", s(&ck)])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).is_empty());
    let trained = stdout(&o).trim().strip_prefix("final test accuracy ").unwrap().to_string();
    assert!(std::fs::read_to_string(ck.join("config.txt")).unwrap().contains("train.seed = 4242"));
    assert_eq!(std::fs::read_to_string(ck.join("metrics.csv")).unwrap().lines().count(), 3);

    let confusion = dir.path().join("conf.csv");
    let o = agcn(&["eval", "--checkpoint", s(&ck), "--config", s(&cfg), "--confusion", s(&confusion)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), format!("accuracy {trained}"));
    assert_eq!(std::fs::read(confusion).unwrap(), std::fs::read(ck.join("confusion.csv")).unwrap());

    let test_manifest = dir.path().join("data/test.tsv");
    let o = agcn(&["eval", "--checkpoint", s(&ck), "--manifest", s(&test_manifest)]);
    assert_eq!(stdout(&o).trim(), format!("accuracy {trained}"));

    let o = Command::new(env!("CARGO_BIN_EXE_agcn"))
        .env("AGCN_SEED", "minus one")
        .args(["train", "--config", s(&cfg), "--out", s(&dir.path().join("ck2"))])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn visualize_rejects_oversized_k() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_dataset(dir.path());
    let ck = dir.path().join("ck");
    assert!(agcn(&["train", "--quiet", "--config", s(&cfg), "--out", s(&ck)]).status.success());
    let img = dir.path().join("data/test/00000.ppm");
    let out = dir.path().join("o.ppm");
    let o = agcn(&["visualize", "--input", s(&img), "--checkpoint", s(&ck), "--k", "20", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(!out.exists());
    let o = agcn(&["visualize", "--input", s(&img), "--checkpoint", s(&ck), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("drew 16 node markers"));
}
