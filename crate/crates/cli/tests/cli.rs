//! End-to-end checks of the `audiotag` binary on a small synthetic corpus.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use audiotag_core::container::{read_features, ModelFile};
use audiotag_core::experiment::Manifest;
use audiotag_core::features::FeatureKind;
use audiotag_core::synth::{generate_corpus, write_corpus, SynthConfig};

const TINY_DNN: &str = r#"
[dnn]
half_width = 4
hidden = [16, 8]
max_epochs = 2
patience = 1
batch_size = 50
"#;

fn audiotag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_audiotag"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = audiotag(args);
    assert!(
        out.status.success(),
        "audiotag {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// 25 chunks over the five development folds.
fn corpus(dir: &Path) -> PathBuf {
    let chunks = generate_corpus(
        25,
        &SynthConfig {
            tag_probability: 0.45,
            ..SynthConfig::default()
        },
    );
    write_corpus(&dir.join("data"), &chunks).unwrap()
}

fn config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, format!("{body}\n[data]\nchunk_list = \"data/chunks.csv\"\n")).unwrap();
    p
}

fn tree_digest(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap());
    }
    out
}

#[test]
fn same_config_twice_gives_identical_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let list = corpus(tmp.path());
    let before = tree_digest(list.parent().unwrap());
    let cfg = config(tmp.path(), "dnn.toml", &format!("family = \"dnn\"\nfolds = [\"0\", \"1\"]\n{TINY_DNN}"));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["run", "--config", s(&cfg), "--output-dir", s(&a)]);
    ok(&["run", "--config", s(&cfg), "--output-dir", s(&b)]);

    let ma = Manifest::read(&a.join("manifest.json")).unwrap();
    let mb = Manifest::read(&b.join("manifest.json")).unwrap();
    assert_eq!(ma, mb);
    assert!(ma.artifacts.contains_key("scores/0.csv"));
    assert!(ma.artifacts.contains_key("fold-1/model.atmd"));
    assert_eq!(ma.seeds.len(), 2);
    assert_eq!(fs::read(a.join("scores/1.csv")).unwrap(), fs::read(b.join("scores/1.csv")).unwrap());
    // Reading the dataset never writes to it.
    assert_eq!(tree_digest(list.parent().unwrap()), before);

    // A different master seed changes the trained models.
    let c = tmp.path().join("c");
    ok(&["run", "--config", s(&cfg), "--output-dir", s(&c), "--seed", "9"]);
    let mc = Manifest::read(&c.join("manifest.json")).unwrap();
    assert_ne!(mc.artifacts["fold-0/model.atmd"], ma.artifacts["fold-0/model.atmd"]);
}

#[test]
fn gmm_run_writes_a_per_tag_report() {
    let tmp = tempfile::tempdir().unwrap();
    corpus(tmp.path());
    let cfg = config(
        tmp.path(),
        "gmm.toml",
        "family = \"gmm\"\noutput_dir = \"gmm-run\"\n[gmm]\ncomponents = 2\niterations = 3\n",
    );
    let out = ok(&["run", "--config", s(&cfg)]);
    let dir = tmp.path().join("gmm-run");
    let report = fs::read_to_string(dir.join("report.csv")).unwrap();
    let rows: Vec<&str> = report.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(rows, ["b", "c", "f", "m", "o", "p", "v", "average"]);
    let folds = fs::read_to_string(dir.join("report_folds.csv")).unwrap();
    for k in 0..5 {
        assert!(dir.join(format!("scores/{k}.csv")).exists());
        assert!(folds.lines().any(|l| l.starts_with(&format!("{k},"))), "fold {k} missing:\n{folds}");
    }
    assert!(String::from_utf8_lossy(&out.stdout).contains("MFCC-GMM"));
}

#[test]
fn dae_dnn_run_produces_codes_and_tagger() {
    let tmp = tempfile::tempdir().unwrap();
    let list = corpus(tmp.path());
    let cfg = config(
        tmp.path(),
        "adae.toml",
        &format!(
            "family = \"dae+dnn\"\nfolds = [\"0\"]\noutput_dir = \"adae\"\n{TINY_DNN}\n[dae]\nvariant = \"adae\"\n\
             encoder_hidden = 32\ndecoder_hidden = 32\nepochs = 1\n"
        ),
    );
    ok(&["run", "--config", s(&cfg)]);
    let fold = tmp.path().join("adae/fold-0");

    let dae = ModelFile::read(&fold.join("dae.atmd")).unwrap();
    assert_eq!(dae.family, "dae");
    let tagger = ModelFile::read(&fold.join("model.atmd")).unwrap();
    assert_eq!(tagger.family, "dnn");
    assert_eq!(tagger.meta["config"]["feature_kind"], "daecode");

    let ids: Vec<String> = fs::read_to_string(&list)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().to_string())
        .collect();
    assert_eq!(ids.len(), 25);
    for id in &ids {
        let codes = read_features(&fold.join(format!("features/daecode/{id}.atfc"))).unwrap();
        assert_eq!(codes.kind, FeatureKind::DaeCode);
        assert_eq!(codes.dims(), 50);
        assert_eq!(codes.frames(), 399);
        assert!(codes.values.iter().all(|v| *v >= 0.0));
    }
    assert!(tmp.path().join("adae/scores/0.csv").exists());
}

#[test]
fn stage_commands_reproduce_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let list = corpus(tmp.path());
    let cfg = config(tmp.path(), "dnn.toml", &format!("folds = [\"2\"]\noutput_dir = \"run\"\n{TINY_DNN}"));
    ok(&["run", "--config", s(&cfg)]);

    let feats = tmp.path().join("mbk");
    let model = tmp.path().join("dnn.atmd");
    let scores = tmp.path().join("2.csv");
    ok(&["extract-features", "--chunks", s(&list), "--kind", "mbk", "--out", s(&feats)]);
    ok(&[
        "train-dnn", "--chunks", s(&list), "--features", s(&feats), "--fold", "2", "--config", s(&cfg), "--out",
        s(&model),
    ]);
    ok(&[
        "predict", "--model", s(&model), "--features", s(&feats), "--chunks", s(&list), "--fold", "2", "--out",
        s(&scores),
    ]);
    let run_dir = tmp.path().join("run");
    assert_eq!(fs::read(&model).unwrap(), fs::read(run_dir.join("fold-2/model.atmd")).unwrap());
    assert_eq!(fs::read(&scores).unwrap(), fs::read(run_dir.join("scores/2.csv")).unwrap());

    let eval_dir = tmp.path().join("eval");
    ok(&[
        "evaluate", "--chunks", s(&list), s(&scores), "--threshold", "0.4", "--name", "MBK-DNN", "--out-dir",
        s(&eval_dir),
    ]);
    assert_eq!(
        fs::read(eval_dir.join("report_folds.csv")).unwrap(),
        fs::read(run_dir.join("report_folds.csv")).unwrap()
    );
}

#[test]
fn per_tag_gmm_models_merge_into_the_full_model() {
    let tmp = tempfile::tempdir().unwrap();
    let list = corpus(tmp.path());
    let feats = tmp.path().join("mfcc");
    ok(&["extract-features", "--chunks", s(&list), "--kind", "mfcc", "--out", s(&feats)]);
    let cfg = config(tmp.path(), "gmm.toml", "[gmm]\ncomponents = 2\niterations = 3\n");
    let train = |tags: Option<&str>, out: &Path| {
        let mut args = vec!["train-gmm", "--chunks", s(&list), "--features", s(&feats), "--fold", "0", "--config"];
        args.push(s(&cfg));
        if let Some(t) = tags {
            args.extend(["--tag", t]);
        }
        args.extend(["--out", s(out)]);
        ok(&args);
    };
    let full = tmp.path().join("full.atmd");
    let (part_a, part_b, merged) = (tmp.path().join("a.atmd"), tmp.path().join("b.atmd"), tmp.path().join("m.atmd"));
    train(None, &full);
    train(Some("b,c,f"), &part_a);
    train(Some("mopv"), &part_b);
    ok(&["train-gmm", "--merge", s(&part_a), s(&part_b), "--out", s(&merged)]);
    assert_eq!(fs::read(&full).unwrap(), fs::read(&merged).unwrap());

    // A partial model cannot score chunks.
    let out = audiotag(&["predict", "--model", s(&part_a), "--features", s(&feats), "--out", s(&tmp.path().join("x.csv"))]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

fn write_report(dir: &Path, name: &str, eers: [f64; 7]) -> PathBuf {
    let d = dir.join(name);
    fs::create_dir_all(&d).unwrap();
    let mut text = String::from("tag,eer,precision,recall,f_score\n");
    for (t, e) in ["b", "c", "f", "m", "o", "p", "v"].iter().zip(eers) {
        text.push_str(&format!("{t},{e},0.5,0.5,0.5\n"));
    }
    text.push_str(&format!("average,{},0.5,0.5,0.5\n", eers.iter().sum::<f64>() / 7.0));
    let p = d.join("report.csv");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn compare_prints_deltas_in_argument_order() {
    let tmp = tempfile::tempdir().unwrap();
    let a = write_report(tmp.path(), "mbk", [0.1, 0.2, 0.3, 0.2, 0.1, 0.15, 0.05]);
    let b = write_report(tmp.path(), "adae", [0.08, 0.2, 0.25, 0.3, 0.1, 0.1, 0.04]);
    let c = write_report(tmp.path(), "gmm", [0.12, 0.19, 0.31, 0.33, 0.25, 0.21, 0.06]);
    let csv = tmp.path().join("cmp.csv");
    let out = ok(&["compare", s(&a), s(&b), s(&c), "--csv", s(&csv)]);
    let md = String::from_utf8_lossy(&out.stdout);
    let header = md.lines().next().unwrap();
    let (ia, ib, ic) = (header.find("mbk").unwrap(), header.find("adae").unwrap(), header.find("gmm").unwrap());
    assert!(ia < ib && ib < ic, "{header}");

    let table = fs::read_to_string(&csv).unwrap();
    let head: Vec<&str> = table.lines().next().unwrap().split(',').collect();
    let col = |name: &str| head.iter().position(|h| *h == name).unwrap_or_else(|| panic!("no column {name} in {head:?}"));
    let row_b = table.lines().find(|l| l.starts_with("b,")).unwrap();
    let fields: Vec<&str> = row_b.split(',').collect();
    let get = |name: &str| fields[col(name)].parse::<f64>().unwrap();
    assert!((get("adae") - get("mbk") - get("delta_adae")).abs() < 2e-6);
    assert!((get("delta_adae") - (0.08 - 0.1)).abs() < 1e-9);

    let out = ok(&["compare", s(&a), s(&a), "--names", "x,y", "--csv", s(&csv)]);
    assert!(out.status.success());
    let table = fs::read_to_string(&csv).unwrap();
    let head: Vec<&str> = table.lines().next().unwrap().split(',').collect();
    let dcol = head.iter().position(|h| *h == "delta_y").unwrap();
    for line in table.lines().skip(1) {
        assert_eq!(line.split(',').nth(dcol).unwrap().parse::<f64>().unwrap(), 0.0, "{line}");
    }
}

#[test]
fn failures_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let list = corpus(tmp.path());

    // Unknown config key: configuration error.
    let bad = config(tmp.path(), "bad.toml", "famly = \"gmm\"\n");
    let out = audiotag(&["run", "--config", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    // Non-shrinking hidden layers are rejected before any compute.
    let grow = config(tmp.path(), "grow.toml", "output_dir = \"grow\"\n[dnn]\nhidden = [8, 16]\n");
    assert_eq!(audiotag(&["run", "--config", s(&grow)]).status.code(), Some(2));
    assert!(!tmp.path().join("grow").exists());
    // Unknown fold on the command line.
    let out = audiotag(&["train-dnn", "--chunks", s(&list), "--features", "x", "--fold", "9", "--out", "m"]);
    assert_eq!(out.status.code(), Some(2));

    // Missing audio: data error, tagged with the failing stage.
    fs::remove_file(tmp.path().join("data/synth0003.wav")).unwrap();
    let cfg = config(tmp.path(), "dnn.toml", &format!("output_dir = \"r\"\n{TINY_DNN}"));
    let out = audiotag(&["run", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("[extract-features]"));

    // Diverging training: numeric failure.
    let list = corpus(tmp.path());
    let feats = tmp.path().join("mbk");
    ok(&["extract-features", "--chunks", s(&list), "--out", s(&feats)]);
    let wild = config(
        tmp.path(),
        "wild.toml",
        "[dnn]\nhalf_width = 2\nhidden = [16, 8]\nmax_epochs = 3\nlearning_rate = 1e12\nhidden_activation = \"linear\"\n",
    );
    let out = audiotag(&[
        "train-dnn", "--chunks", s(&list), "--features", s(&feats), "--fold", "0", "--config", s(&wild), "--out",
        s(&tmp.path().join("m.atmd")),
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));

    // Corrupt feature file: data error.
    fs::write(feats.join("synth0000.atfc"), b"not a container").unwrap();
    let out = audiotag(&[
        "train-dnn", "--chunks", s(&list), "--features", s(&feats), "--fold", "1", "--out",
        s(&tmp.path().join("m.atmd")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}
