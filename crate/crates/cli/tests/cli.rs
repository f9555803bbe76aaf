use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use esmc_core::kmeans::{kmeans_fit, KMeansConfig};
use esmc_core::localization::read_target;
use esmc_core::synth::{gaussian_blobs, planted_corpus, BlobSpec, PlantedSpec};
use esmc_core::tensor_store::{
    read_embeddings, write_dump, write_embeddings, write_labels, write_unembedding, write_vocab,
    EmbeddingSet, EmbeddingSource, LabelRow, LabelTable,
};
use esmc_core::{target_embedding, Cell};

fn esmc<A: AsRef<std::ffi::OsStr>>(args: &[A]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_esmc"))
        .args(args)
        .env("ESMC_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = esmc(args);
    assert!(
        out.status.success(),
        "esmc {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Runs a command that must fail with exit 2; returns stderr.
fn fails(args: &[&str]) -> String {
    let out = esmc(args);
    assert_eq!(out.status.code(), Some(2), "esmc {args:?} should fail");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Planted {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Planted {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let c = planted_corpus(&PlantedSpec::default());
        for d in &c.dumps {
            write_dump(d, &root.join("dumps").join(&d.image_id)).unwrap();
        }
        write_unembedding(&c.unembedding, &root.join("unembed.bin")).unwrap();
        write_vocab(&c.vocab, &root.join("vocab.txt")).unwrap();
        fs::write(
            root.join("colors.txt"),
            "# car colors\nwhite\nblack\n\nblue\nred\n",
        )
        .unwrap();
        let rows = c
            .dumps
            .iter()
            .zip(&c.truth)
            .enumerate()
            .flat_map(|(i, (d, color))| {
                [
                    LabelRow {
                        image_id: d.image_id.clone(),
                        criterion: "color".into(),
                        label: color.clone(),
                    },
                    LabelRow {
                        image_id: d.image_id.clone(),
                        criterion: "parity".into(),
                        label: (i % 2).to_string(),
                    },
                ]
            })
            .collect();
        write_labels(&LabelTable::new(rows).unwrap(), &root.join("labels.csv")).unwrap();
        Self { _tmp: tmp, root }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn arg(&self, name: &str) -> String {
        s(&self.root.join(name)).to_string()
    }

    fn localize(&self, extra: &[&str]) -> Output {
        let mut args: Vec<String> = vec![
            "localize".into(),
            "--dumps".into(),
            self.arg("dumps"),
            "--unembed".into(),
            self.arg("unembed.bin"),
            "--vocab".into(),
            self.arg("vocab.txt"),
            "--keywords".into(),
            self.arg("colors.txt"),
            "--feature".into(),
            "color".into(),
            "--out".into(),
            self.arg("loc"),
        ];
        args.extend(extra.iter().map(|a| a.to_string()));
        esmc(&args)
    }

    fn embed(&self, out: &str, extra: &[&str]) -> Output {
        let mut args: Vec<String> = vec![
            "embed".into(),
            "--target".into(),
            self.arg("loc/target.json"),
            "--dumps".into(),
            self.arg("dumps"),
            "--unembed".into(),
            self.arg("unembed.bin"),
            "--vocab".into(),
            self.arg("vocab.txt"),
            "--out".into(),
            self.arg(out),
        ];
        args.extend(extra.iter().map(|a| a.to_string()));
        esmc(&args)
    }
}

/// Four well-separated blobs as a raw-logit embedding set, plus labels.
fn blob_set(root: &Path) -> (PathBuf, PathBuf, Vec<usize>) {
    let b = gaussian_blobs(&BlobSpec::new(80, 12, 4, 3));
    let set = EmbeddingSet {
        image_ids: (0..80).map(|i| format!("img{i:03}")).collect(),
        vocab_size: 12,
        source: EmbeddingSource {
            feature: "shape".into(),
            layer: 3,
            position: 7,
        },
        normalized: false,
        matrix: b.data.iter().map(|&v| v as f32).collect(),
    };
    let emb = root.join("emb");
    write_embeddings(&set, &emb).unwrap();
    let rows = set
        .image_ids
        .iter()
        .zip(&b.labels)
        .map(|(id, l)| LabelRow {
            image_id: id.clone(),
            criterion: "shape".into(),
            label: format!("s{l}"),
        })
        .collect();
    let labels = root.join("labels.csv");
    write_labels(&LabelTable::new(rows).unwrap(), &labels).unwrap();
    (emb, labels, b.labels)
}

#[test]
fn localize_embed_cluster_eval_on_planted_corpus() {
    let f = Planted::new();
    let out = f.localize(&[]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("chosen E_27(263)"), "{stdout}");
    let target = read_target(&f.p("loc/target.json")).unwrap();
    assert_eq!(target.chosen, Cell::new(27, 263));
    assert_eq!(target.feature, "color");

    assert!(f.embed("emb", &[]).status.success());
    let set = read_embeddings(&f.p("emb")).unwrap();
    assert_eq!((set.len(), set.vocab_size), (10, 16));
    assert!(set.normalized);
    assert_eq!((set.source.layer, set.source.position), (27, 263));
    let c = planted_corpus(&PlantedSpec::default());
    for (i, d) in c.dumps.iter().enumerate() {
        let row = target_embedding(d, &c.unembedding, target.chosen, true).unwrap();
        let expect: Vec<f32> = row.values.iter().map(|&v| v as f32).collect();
        assert_eq!(set.row(i), &expect[..]);
    }

    let emb = f.p("emb");
    let run = f.p("run");
    ok(&[
        "cluster",
        "--embeddings",
        s(&emb),
        "--out",
        s(&run),
        "--k",
        "4",
        "--alpha",
        "0.3",
        "--seed",
        "42",
    ]);
    for name in [
        "assignments.csv",
        "history.json",
        "pseudo_labels.json",
        "run.json",
        "head/manifest.json",
    ] {
        assert!(run.join(name).exists(), "{name} missing");
    }
    let stdout = ok(&[
        "eval",
        "--predictions",
        s(&run.join("assignments.csv")),
        "--labels",
        s(&f.p("labels.csv")),
        "--criterion",
        "color",
        "--out",
        s(&run),
    ]);
    assert!(stdout.contains("nmi        1.000000"), "{stdout}");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["nmi"], 1.0);
    assert_eq!(report["rand_index"], 1.0);
    assert_eq!(report["config"]["layer"], 27);
    assert_eq!(report["config"]["alpha"], 0.3);
}

#[test]
fn sampled_localization_is_stable() {
    let f = Planted::new();
    for n in ["3", "5"] {
        let out = f.localize(&["--sample", n, "--seed", "9"]);
        assert!(out.status.success());
        assert_eq!(
            read_target(&f.p("loc/target.json")).unwrap().chosen,
            Cell::new(27, 263)
        );
    }
    let err = String::from_utf8(f.localize(&["--sample", "11"]).stderr).unwrap();
    assert!(err.contains("exceeds"), "{err}");
}

#[test]
fn localize_flags_reach_the_counter() {
    let f = Planted::new();
    assert!(f
        .localize(&["--restrict-to-text", "--top-k-filter", "1"])
        .status
        .success());
    assert_eq!(
        read_target(&f.p("loc/target.json")).unwrap().chosen,
        Cell::new(27, 263)
    );
    assert!(f
        .localize(&["--raw-logits", "--tau", "3.0"])
        .status
        .success());
    let t = read_target(&f.p("loc/target.json")).unwrap();
    assert_eq!(t.tau, 3.0);
    assert_eq!(t.chosen, Cell::new(27, 263));
}

#[test]
fn missing_keywords_file_names_the_path() {
    let f = Planted::new();
    fs::remove_file(f.p("colors.txt")).unwrap();
    let out = f.localize(&[]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("colors.txt"), "{err}");
    assert!(!f.p("loc").exists());
}

#[test]
fn tau_above_one_is_rejected() {
    let f = Planted::new();
    let out = f.localize(&["--tau", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("tau"));
    assert!(!f.p("loc").exists());
}

#[test]
fn raw_logit_embeddings_are_flagged() {
    let f = Planted::new();
    assert!(f.localize(&[]).status.success());
    assert!(f.embed("raw", &["--raw-logits"]).status.success());
    let set = read_embeddings(&f.p("raw")).unwrap();
    assert!(!set.normalized);
    // Keyword logit of the planted cell for image 0 ("white").
    assert!(set.row(0)[0] > 5.0);
}

#[test]
fn embed_names_image_missing_the_cell() {
    let f = Planted::new();
    assert!(f.localize(&[]).status.success());
    let short = planted_corpus(&PlantedSpec {
        num_images: 1,
        num_tokens: 200,
        plants: vec![],
        distractor: None,
        seed: 5,
        ..Default::default()
    });
    let mut d = short.dumps[0].clone();
    d.image_id = "truncated".into();
    write_dump(&d, &f.p("dumps/zz")).unwrap();
    let out = f.embed("emb", &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("truncated"));
    assert!(!f.p("emb").exists());
}

#[test]
fn cluster_is_deterministic_and_validates() {
    let tmp = tempfile::tempdir().unwrap();
    let (emb, _, _) = blob_set(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        ok(&[
            "cluster",
            "--embeddings",
            s(&emb),
            "--out",
            s(out),
            "--k",
            "4",
            "--alpha",
            "0.3",
            "--seed",
            "42",
        ]);
    }
    for name in [
        "assignments.csv",
        "history.json",
        "pseudo_labels.json",
        "head/w1.bin",
    ] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }

    let bad = tmp.path().join("bad");
    let err = fails(&[
        "cluster",
        "--embeddings",
        s(&emb),
        "--out",
        s(&bad),
        "--k",
        "4",
        "--alpha",
        "0",
    ]);
    assert!(err.contains("alpha"), "{err}");
    let err = fails(&[
        "cluster",
        "--embeddings",
        s(&emb),
        "--out",
        s(&bad),
        "--k",
        "81",
    ]);
    assert!(err.contains("exceeds"), "{err}");
    let err = fails(&[
        "cluster",
        "--embeddings",
        s(&emb),
        "--out",
        s(&bad),
        "--k",
        "4",
        "--epochs",
        "0",
    ]);
    assert!(err.contains("epochs"), "{err}");
    assert!(!bad.exists());
}

#[test]
fn skip_head_emits_kmeans_assignments() {
    let tmp = tempfile::tempdir().unwrap();
    let (emb, _, _) = blob_set(tmp.path());
    let out = tmp.path().join("km");
    ok(&[
        "cluster",
        "--embeddings",
        s(&emb),
        "--out",
        s(&out),
        "--k",
        "4",
        "--seed",
        "7",
        "--skip-head",
    ]);
    let set = read_embeddings(&emb).unwrap();
    let model = kmeans_fit(set.to_matrix().view(), &KMeansConfig::new(4, 7)).unwrap();
    let text = fs::read_to_string(out.join("assignments.csv")).unwrap();
    let got: Vec<usize> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(got, model.assignments);
    assert!(!out.join("head").exists());
    assert!(!out.join("pseudo_labels.json").exists());
}

#[test]
fn eval_reports_and_rejects() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let labels = root.join("labels.csv");
    let rows = [0, 0, 0, 1, 1]
        .iter()
        .enumerate()
        .map(|(i, l)| LabelRow {
            image_id: format!("i{i}"),
            criterion: "truth".into(),
            label: l.to_string(),
        })
        .collect();
    write_labels(&LabelTable::new(rows).unwrap(), &labels).unwrap();
    let pred = root.join("pred.csv");
    fs::write(&pred, "image_id,cluster\ni0,0\ni1,0\ni2,1\ni3,1\ni4,1\n").unwrap();
    let out = root.join("out");
    ok(&[
        "eval",
        "--predictions",
        s(&pred),
        "--labels",
        s(&labels),
        "--criterion",
        "truth",
        "--out",
        s(&out),
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!((report["nmi"].as_f64().unwrap() - 0.432_538_067_766_312_56).abs() < 1e-10);
    assert!((report["rand_index"].as_f64().unwrap() - 0.6).abs() < 1e-12);

    let same = root.join("same.csv");
    fs::write(&same, "image_id,cluster\ni0,5\ni1,5\ni2,5\ni3,2\ni4,2\n").unwrap();
    let stdout = ok(&[
        "eval",
        "--predictions",
        s(&same),
        "--labels",
        s(&labels),
        "--criterion",
        "truth",
        "--out",
        s(&out),
        "--nmi-norm",
        "max",
    ]);
    assert!(stdout.contains("nmi        1.000000 (max)"), "{stdout}");

    let err = fails(&[
        "eval",
        "--predictions",
        s(&pred),
        "--labels",
        s(&labels),
        "--criterion",
        "brand",
        "--out",
        s(&out),
    ]);
    assert!(err.contains("available: truth"), "{err}");
    let extra = root.join("extra.csv");
    fs::write(&extra, "image_id,cluster\ni0,0\nghost,1\nphantom,0\n").unwrap();
    let err = fails(&[
        "eval",
        "--predictions",
        s(&extra),
        "--labels",
        s(&labels),
        "--criterion",
        "truth",
        "--out",
        s(&out),
    ]);
    assert!(err.contains("ghost, phantom"), "{err}");
    let err = fails(&[
        "eval",
        "--predictions",
        s(&pred),
        "--labels",
        s(&labels),
        "--criterion",
        "truth",
        "--out",
        s(&out),
        "--nmi-norm",
        "median",
    ]);
    assert!(err.contains("median"), "{err}");
}

#[test]
fn sweep_grid_and_composition() {
    let tmp = tempfile::tempdir().unwrap();
    let (emb, labels, _) = blob_set(tmp.path());
    let out = tmp.path().join("sweep");
    ok(&[
        "sweep",
        "--embeddings",
        s(&emb),
        "--labels",
        s(&labels),
        "--criterion",
        "shape",
        "--k",
        "4",
        "--epochs",
        "20",
        "--out",
        s(&out),
    ]);
    let text = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "kind,alpha,seed,nmi,ri,nmi_std,ri_std");
    assert_eq!(lines.iter().filter(|l| l.starts_with("run,")).count(), 45);
    assert_eq!(lines.iter().filter(|l| l.starts_with("mean,")).count(), 9);

    // One cell of the sweep equals cluster followed by eval.
    ok(&[
        "sweep",
        "--embeddings",
        s(&emb),
        "--labels",
        s(&labels),
        "--criterion",
        "shape",
        "--k",
        "4",
        "--alphas",
        "0.3",
        "--seeds",
        "11",
        "--epochs",
        "20",
        "--out",
        s(&out),
    ]);
    let text = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let cols: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    let run = tmp.path().join("run");
    ok(&[
        "cluster",
        "--embeddings",
        s(&emb),
        "--out",
        s(&run),
        "--k",
        "4",
        "--alpha",
        "0.3",
        "--seed",
        "11",
        "--epochs",
        "20",
    ]);
    ok(&[
        "eval",
        "--predictions",
        s(&run.join("assignments.csv")),
        "--labels",
        s(&labels),
        "--criterion",
        "shape",
        "--out",
        s(&run),
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(
        cols[3].parse::<f64>().unwrap(),
        report["nmi"].as_f64().unwrap()
    );
    assert_eq!(
        cols[4].parse::<f64>().unwrap(),
        report["rand_index"].as_f64().unwrap()
    );

    let fresh = tmp.path().join("fresh");
    let err = fails(&[
        "sweep",
        "--embeddings",
        s(&emb),
        "--labels",
        s(&labels),
        "--criterion",
        "shape",
        "--k",
        "4",
        "--alphas",
        "",
        "--out",
        s(&fresh),
    ]);
    assert!(err.contains("no alpha"), "{err}");
    assert!(!fresh.exists());
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, _, _) = blob_set(tmp.path());
    let cfg = tmp.path().join("run.toml");
    fs::write(
        &cfg,
        "embeddings = \"emb\"\nout = \"from_config\"\nk = 4\nalpha = 0.3\nseed = 42\n",
    )
    .unwrap();
    ok(&["cluster", "--config", s(&cfg)]);
    let run: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("from_config/run.json")).unwrap())
            .unwrap();
    assert_eq!(run["k"], 4);
    assert_eq!(run["alpha"], 0.3);
    assert_eq!(run["epochs"], 100);

    let flagged = tmp.path().join("flagged");
    ok(&[
        "cluster",
        "--config",
        s(&cfg),
        "--k",
        "3",
        "--out",
        s(&flagged),
    ]);
    let run: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(flagged.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["k"], 3);
    assert_eq!(run["seed"], 42);

    fs::write(&cfg, "kay = 4\n").unwrap();
    let err = fails(&["cluster", "--config", s(&cfg)]);
    assert!(err.contains("kay"), "{err}");
}

#[test]
fn help_documents_defaults() {
    let text = ok(&["localize", "--help"]);
    assert!(text.contains("[default: 0.2]"));
    let text = ok(&["cluster", "--help"]);
    for needle in [
        "[default: 0.1",
        "[default: 100]",
        "[default: 0.001]",
        "[default: 512]",
    ] {
        assert!(text.contains(needle), "{needle} missing from cluster help");
    }
    let text = ok(&["sweep", "--help"]);
    assert!(text.contains("0.1,0.2,...,0.9"));
}

#[test]
fn bad_thread_count_is_reported() {
    let out = Command::new(env!("CARGO_BIN_EXE_esmc"))
        .args(["eval", "--help"])
        .env("ESMC_THREADS", "zero")
        .output()
        .unwrap();
    // Help short-circuits before any work.
    assert!(out.status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_esmc"))
        .args(["eval", "--predictions", "/nonexistent"])
        .env("ESMC_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr)
        .unwrap()
        .contains("ESMC_THREADS"));
}
