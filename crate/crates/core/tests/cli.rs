mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::*;
use fmprune::imageio::{write_ppm, RawImage};
use fmprune::model::{format_config, load_weights, parse_config, NetworkModel};
use fmprune::stats::static_prune;
use fmprune::{forward, PruneConfig};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use tempfile::TempDir;

fn fmprune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fmprune")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

struct Fixture {
    dir: TempDir,
    net: NetworkModel,
    cfg: PathBuf,
    weights: PathBuf,
}

impl Fixture {
    fn new(seed: u64) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let net = toy_classifier(&mut rng, 6);
        let dir = TempDir::new().unwrap();
        let (cfg, weights) = write_model(dir.path(), &net);
        let mut manifest = String::new();
        for i in 0..6 {
            let px: Vec<u8> = (0..3 * 10 * 10).map(|_| if rng.gen_bool(0.3) { 0 } else { rng.gen() }).collect();
            let name = format!("img{i}.ppm");
            write_ppm(&RawImage::new(10, 10, px).unwrap(), std::fs::File::create(dir.path().join(&name)).unwrap())
                .unwrap();
            manifest.push_str(&format!("{name}\t{}\n", i % 6));
        }
        write_tensor(&dir.path().join("raw.tensor"), &sparse_tensor(&mut rng, net.input, 0.3));
        manifest.push_str("raw.tensor\t2\n");
        std::fs::write(dir.path().join("manifest.txt"), manifest).unwrap();
        std::fs::write(dir.path().join("names.txt"), "cat\ndog\nfox\nowl\nbee\nemu\n").unwrap();
        Self { dir, net, cfg, weights }
    }

    fn path(&self, name: &str) -> String {
        self.dir.path().join(name).to_str().unwrap().to_string()
    }

    fn model_args(&self) -> Vec<String> {
        vec![
            "--model".into(),
            self.cfg.to_str().unwrap().into(),
            "--weights".into(),
            self.weights.to_str().unwrap().into(),
        ]
    }

    fn run(&self, cmd: &str, extra: &[&str]) -> Output {
        let mut args: Vec<String> = vec![cmd.into()];
        args.extend(self.model_args());
        args.extend(extra.iter().map(|s| s.to_string()));
        fmprune(&args.iter().map(String::as_str).collect::<Vec<_>>())
    }
}

fn csv_rows(path: &str) -> Vec<Vec<String>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_path(path).unwrap();
    rdr.records().map(|r| r.unwrap().iter().map(str::to_string).collect()).collect()
}

#[test]
fn analyze_weights_default_and_custom_thresholds() {
    let f = Fixture::new(41);
    let out = f.path("sparsity.csv");
    stdout(&f.run("analyze-weights", &["--out", &out]));
    let rows = csv_rows(&out);
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0].len(), 10);
    assert_eq!(rows[0][0], "scope");
    assert_eq!((rows[1][0].as_str(), rows[2][0].as_str()), ("all_parameters", "conv_kernels"));

    stdout(&f.run("analyze-weights", &["--thresholds", "0,0.1", "--out", &out]));
    let rows = csv_rows(&out);
    assert_eq!(rows[0], vec!["scope", "0", "0.1"]);

    let json = f.path("sparsity.json");
    stdout(&f.run("analyze-weights", &["--format", "json", "--out", &json, "--manifest", &f.path("manifest.txt")]));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(v["accuracy_class"].as_array().unwrap().len(), 9);
}

#[test]
fn missing_files_and_bad_flags_exit_2() {
    let f = Fixture::new(42);
    let o = fmprune(&["analyze-weights", "--model", f.cfg.to_str().unwrap(), "--weights", &f.path("nope.weights")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
    assert_eq!(f.run("infer", &["--mode", "bogus", &f.path("img0.ppm")]).status.code(), Some(2));
    assert_eq!(f.run("infer", &["--epsilon", "-1", &f.path("img0.ppm")]).status.code(), Some(2));
    assert_eq!(fmprune(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn corrupt_weights_exit_1() {
    let f = Fixture::new(43);
    let mut bytes = std::fs::read(&f.weights).unwrap();
    bytes.truncate(bytes.len() - 8);
    std::fs::write(&f.weights, bytes).unwrap();
    assert_eq!(f.run("cost", &[]).status.code(), Some(1));
}

#[test]
fn infer_prints_five_lines_and_zero_epsilon_is_identity() {
    let f = Fixture::new(44);
    let img = f.path("img1.ppm");
    let names = f.path("names.txt");
    let plain = stdout(&f.run("infer", &[&img, "--classes", &names]));
    assert_eq!(plain.lines().count(), 5);
    for line in plain.lines() {
        let (name, p) = line.split_once('\t').unwrap();
        assert!(["cat", "dog", "fox", "owl", "bee", "emu"].contains(&name));
        assert_eq!(p.split_once('.').unwrap().1.len(), 6);
    }
    let again = stdout(&f.run("infer", &[&img, "--classes", &names]));
    assert_eq!(plain, again);
    let pruned = stdout(&f.run("infer", &[&img, "--classes", &names, "--mode", "literal_eq1", "--epsilon", "0"]));
    assert_eq!(plain, pruned);
}

fn skipped_total(trace: &str) -> usize {
    let mut rdr = csv::Reader::from_path(trace).unwrap();
    let col = rdr.headers().unwrap().iter().position(|h| h == "channels_skipped").unwrap();
    rdr.records().map(|r| r.unwrap()[col].parse::<usize>().unwrap()).sum()
}

#[test]
fn trace_is_capability_invariant() {
    let f = Fixture::new(45);
    let img = f.path("raw.tensor");
    let mut totals = Vec::new();
    for cap in ["1x1", "4x4", "3x5", "16x16"] {
        let trace = f.path(&format!("trace-{cap}.csv"));
        stdout(
            &f.run("infer", &[&img, "--mode", "literal", "--epsilon", "0.1", "--capability", cap, "--trace", &trace]),
        );
        assert_eq!(csv_rows(&trace).len(), 1 + 3);
        totals.push(skipped_total(&trace));
    }
    assert!(totals.windows(2).all(|w| w[0] == w[1]), "{totals:?}");
}

#[test]
fn sweep_default_epsilons_give_six_rows() {
    let f = Fixture::new(46);
    let out = f.path("sweep.csv");
    let text = stdout(&f.run("sweep", &["--manifest", &f.path("manifest.txt"), "--out", &out]));
    assert!(text.starts_with("baseline"));
    let rows = csv_rows(&out);
    assert_eq!(rows.len(), 7);
    let eps: Vec<&str> = rows[1..].iter().map(|r| r[0].as_str()).collect();
    assert_eq!(eps, ["0", "0.1", "0.2", "0.3", "0.4", "0.5"]);
    assert_eq!(rows[1][3], "0.000000");

    let json = f.path("sweep.json");
    stdout(&f.run(
        "sweep",
        &["--manifest", &f.path("manifest.txt"), "--epsilons", "0,0.2", "--format", "json", "--out", &json],
    ));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 2);
    assert_eq!(v["rows"][0]["savings"]["layers"].as_array().unwrap().len(), 3);
}

#[test]
fn eval_compare_cost_and_activation_sparsity() {
    let f = Fixture::new(47);
    let manifest = f.path("manifest.txt");
    let out = f.path("eval.csv");
    let text = stdout(&f.run("eval", &["--manifest", &manifest, "--out", &out, "--trace", &f.path("eval-trace.csv")]));
    assert!(text.contains("images\t7"));
    let rows = csv_rows(&out);
    assert_eq!(rows[0], vec!["k", "correct", "accuracy"]);
    assert_eq!((rows[1][0].as_str(), rows[2][0].as_str()), ("1", "5"));
    assert_eq!(csv_rows(&f.path("eval-trace.csv")).len(), 1 + 7 * 3);

    let cmp = f.path("cmp.csv");
    stdout(&f.run("compare", &["--manifest", &manifest, "--mode", "literal", "--epsilon", "0", "--out", &cmp]));
    let rows = csv_rows(&cmp);
    assert_eq!(rows.len(), 8);
    let (u, p) = (
        rows[0].iter().position(|h| h == "prob_unpruned").unwrap(),
        rows[0].iter().position(|h| h == "prob_pruned").unwrap(),
    );
    assert!(rows[1..].iter().all(|r| r[u] == r[p]));

    let cost = f.path("cost.json");
    stdout(&f.run("cost", &["--format", "json", "--out", &cost]));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(cost).unwrap()).unwrap();
    assert_eq!(v["layers"].as_array().unwrap().len(), 4);

    let act = f.path("act.csv");
    stdout(&f.run("activation-sparsity", &["--manifest", &manifest, "--thresholds", "0,0.5", "--out", &act]));
    assert_eq!(csv_rows(&act)[0], vec!["scope", "0", "0.5"]);
}

#[test]
fn unreadable_manifest_entry_is_reported() {
    let f = Fixture::new(48);
    let manifest = f.path("broken.txt");
    std::fs::write(&manifest, "img0.ppm\t0\nmissing.ppm\t1\n").unwrap();
    let text = stdout(&f.run("eval", &["--manifest", &manifest]));
    assert!(text.contains("images\t1"));
    assert!(text.contains("skipped\tmissing.ppm"));
}

fn load(cfg: &Path, weights: &Path) -> NetworkModel {
    let skeleton = parse_config(&std::fs::read_to_string(cfg).unwrap()).unwrap();
    load_weights(&std::fs::read(weights).unwrap(), &skeleton).unwrap()
}

#[test]
fn static_prune_round_trips() {
    let f = Fixture::new(49);
    let same = f.path("same.weights");
    stdout(&f.run("static-prune", &["--epsilon", "0", "--out", &same]));
    assert_eq!(std::fs::read(&same).unwrap(), std::fs::read(&f.weights).unwrap());

    let pruned_path = f.path("pruned.weights");
    stdout(&f.run("static-prune", &["--epsilon", "0.1", "--out", &pruned_path]));
    let reloaded = load(&f.cfg, Path::new(&pruned_path));
    let in_memory = static_prune(&f.net, 0.1).unwrap();
    assert_eq!(reloaded.layers, in_memory.layers);
    let mut rng = StdRng::seed_from_u64(50);
    let x = random_tensor(&mut rng, f.net.input, 1.0);
    let a = forward(&reloaded, &x, &PruneConfig::off(), None).unwrap();
    let b = forward(&in_memory, &x, &PruneConfig::off(), None).unwrap();
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );

    // sparsity at 0 after pruning equals sparsity at ε before
    let before = f.path("before.csv");
    let after = f.path("after.csv");
    stdout(&f.run("analyze-weights", &["--thresholds", "0.1", "--out", &before]));
    let cfg_args = [
        "analyze-weights",
        "--model",
        f.cfg.to_str().unwrap(),
        "--weights",
        &pruned_path,
        "--thresholds",
        "0",
        "--out",
        &after,
    ];
    stdout(&fmprune(&cfg_args));
    let (b, a) = (csv_rows(&before), csv_rows(&after));
    assert_eq!(b[1][1], a[1][1]);
    assert_eq!(b[2][1], a[2][1]);
    assert_eq!(format_config(&reloaded), format_config(&f.net));
}
