use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn thinvlad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_thinvlad"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn eer_on_perfect_separation() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("scores.csv");
    fs::write(
        &csv,
        "label,path_a,path_b,score\n1,a,b,0.9\n1,a,c,0.8\n0,a,d,0.1\n0,b,d,0.2\n",
    )
    .unwrap();
    let out = thinvlad(&["eer", s(&csv)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(stdout(&out).lines().next(), Some("EER 0.0000"));
}

#[test]
fn shape_check_passes() {
    let out = thinvlad(&["shape-check"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
}

#[test]
fn exit_codes() {
    let usage = thinvlad(&["eer"]);
    assert_eq!(usage.status.code(), Some(1));
    assert!(!stderr(&usage).is_empty());

    assert_eq!(thinvlad(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(thinvlad(&["--help"]).status.code(), Some(0));

    let missing = thinvlad(&["eer", "/definitely/not/here.csv"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(stderr(&missing).starts_with("error:"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = thinvlad(&[
        "train",
        "--data",
        "unused.lst",
        "--out",
        s(&out_dir),
        "--set",
        "learning_rat=0.1",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("unknown config key 'learning_rat'"), "{}", stderr(&out));

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "epochs = 2\nbogus = 1\n").unwrap();
    let out = thinvlad(&["train", "--config", s(&cfg), "--data", "x.lst", "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("bad.cfg:2"), "{}", stderr(&out));
    assert!(!out_dir.exists());
}

#[test]
fn spectrogram_writes_spg() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let out = thinvlad(&[
        "synth-data",
        s(&data),
        "--speakers",
        "2",
        "--utts",
        "2",
        "--seed",
        "3",
        "--min-seconds",
        "3",
        "--max-seconds",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stderr(&out).contains("no held-out trial list"));
    assert!(!data.join("heldout_pairs.lst").exists());
    let wav = data.join("spk000/utt000.wav");
    let spg = dir.path().join("a.spg");
    let out = thinvlad(&["spectrogram", s(&wav), s(&spg), "--normalize"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let bytes = fs::read(&spg).unwrap();
    assert_eq!(&bytes[..4], b"SPG1");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 257);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 300);
    assert_eq!(bytes.len(), 12 + 257 * 300 * 4);
}

fn dir_snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn small_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let synth = |name: &str| {
        let d = dir.path().join(name);
        let out = thinvlad(&[
            "synth-data",
            s(&d),
            "--speakers",
            "3",
            "--utts",
            "10",
            "--seed",
            "11",
            "--min-seconds",
            "3",
            "--max-seconds",
            "3.5",
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        d
    };
    let data = synth("a");
    assert_eq!(dir_snapshot(&data), dir_snapshot(&synth("b")));
    let before = dir_snapshot(&data);

    let cfg = dir.path().join("tiny.cfg");
    fs::write(
        &cfg,
        "width_multiplier = 0.0625\nembed_dim = 16\nepochs = 2\nbatch_size = 4\nseed = 5\n",
    )
    .unwrap();
    let train = |name: &str| {
        let run = dir.path().join(name);
        let out = thinvlad(&[
            "train",
            "--config",
            s(&cfg),
            "--data",
            s(&data.join("train.lst")),
            "--out",
            s(&run),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        assert!(stderr(&out).contains("width_multiplier = 0.0625"));
        run
    };
    let run = train("run1");
    let ckpt = run.join("final.vldn");
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(train("run2").join("final.vldn")).unwrap());
    let resolved = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(resolved.contains("epochs = 2"));
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,step,lr,loss,acc\n"));

    let pairs = data.join("heldout_pairs.lst");
    let scored = thinvlad(&["score-pairs", "--ckpt", s(&ckpt), "--pairs", s(&pairs)]);
    assert_eq!(scored.status.code(), Some(0), "{}", stderr(&scored));
    let text = stdout(&scored);
    assert!(text.starts_with("label,path_a,path_b,score\n"));
    assert!(text.lines().count() > 1);

    let cropped = |seed: &str| {
        let o = thinvlad(&[
            "score-pairs",
            "--ckpt",
            s(&ckpt),
            "--pairs",
            s(&pairs),
            "--crop-seconds",
            "2",
            "--seed",
            seed,
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        stdout(&o)
    };
    assert_eq!(cropped("4"), cropped("4"));

    let scores = dir.path().join("scores.csv");
    fs::write(&scores, &text).unwrap();
    let eer = thinvlad(&["eer", s(&scores)]);
    assert_eq!(eer.status.code(), Some(0));
    let first = stdout(&eer);
    let value: f64 = first.lines().next().unwrap().strip_prefix("EER ").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&value));

    let emb = thinvlad(&["embed", "--ckpt", s(&ckpt), s(&data.join("spk001/utt004.wav"))]);
    assert_eq!(emb.status.code(), Some(0), "{}", stderr(&emb));
    let values: Vec<f64> = stdout(&emb).split_whitespace().map(|v| v.parse().unwrap()).collect();
    assert_eq!(values.len(), 16);
    assert!((values.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-4);

    let probe = |seed: &str| {
        let o = thinvlad(&[
            "length-probe",
            "--ckpt",
            s(&ckpt),
            "--data",
            s(&data.join("all.lst")),
            "--lengths",
            "2,3",
            "--repeats",
            "2",
            "--seed",
            seed,
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        stdout(&o)
    };
    let table = probe("8");
    assert_eq!(table, probe("8"));
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "length_s,eer_mean,eer_std");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("2,") && rows[2].starts_with("3,"));

    let too_long = thinvlad(&[
        "length-probe",
        "--ckpt",
        s(&ckpt),
        "--data",
        s(&data.join("all.lst")),
        "--lengths",
        "2,6",
    ]);
    assert_eq!(too_long.status.code(), Some(2));

    assert_eq!(dir_snapshot(&data), before, "inputs were modified");
}
