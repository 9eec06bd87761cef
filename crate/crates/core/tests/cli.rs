use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use scent::cli::{self, CliError, RunConfig, CHECKPOINT_FILE, STEP_LOG};
use scent::eval::mcd;
use scent::features::{AlignmentMatrix, FeatureSequence};
use scent::io::{self, Checkpoint};
use scent::numerics::Tensor;
use scent::synth::{load_split, Manifest, Split};

const TINY: &str = r#"
[corpus]
n_train = 4
n_val = 1
n_test = 2
min_frames = 60
max_frames = 90

[model]
encoder_units = 8
prenet_units = 8
attn_units = 8
attn_filters = 2
attn_kernel = 5
attn_v_dim = 8
decoder_units = 8
postnet_kernels = 3
postnet_channels = 8

[train]
epochs = 1
batch = 2
"#;

struct Env {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Env {
    fn new(extra: &str) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let config = root.join("tiny.toml");
        fs::write(&config, format!("{TINY}{extra}")).unwrap();
        Self { _tmp: tmp, root, config }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.root.join(p)
    }

    fn s(&self, p: &str) -> String {
        self.path(p).display().to_string()
    }

    fn run(&self, args: &[&str]) -> Result<(), CliError> {
        let cfg = self.config.display().to_string();
        let mut full = vec!["scent", "--config", cfg.as_str()];
        full.extend_from_slice(args);
        cli::run(full)
    }

    fn corpus(&self) -> &Self {
        self.run(&["gen-data", "--out", &self.s("corpus")]).unwrap();
        self
    }

    fn cfg(&self) -> RunConfig {
        let mut c = RunConfig::load(&self.config).unwrap();
        c.paths.corpus = self.path("corpus");
        c
    }
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_scent"))
}

fn read(p: &Path) -> FeatureSequence {
    io::read_features(p).unwrap()
}

#[test]
fn gen_data_refuses_to_overwrite_without_force() {
    let env = Env::new("");
    env.corpus();
    let err = env.run(&["gen-data", "--out", &env.s("corpus")]).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
    env.run(&["gen-data", "--out", &env.s("corpus"), "--force"]).unwrap();
    let m = Manifest::read(&env.path("corpus/manifest.tsv")).unwrap();
    m.validate(&env.path("corpus")).unwrap();
    assert_eq!(m.records.len(), 2 * (4 + 1 + 2));
}

#[test]
fn seed_changes_corpus_but_not_schema() {
    let env = Env::new("");
    env.run(&["gen-data", "--out", &env.s("a")]).unwrap();
    env.run(&["gen-data", "--out", &env.s("b")]).unwrap();
    env.run(&["gen-data", "--out", &env.s("c"), "--seed", "99"]).unwrap();
    let mel = "train0000.src.mel.fea";
    let (a, b, c) = (
        fs::read(env.path("a").join(mel)).unwrap(),
        fs::read(env.path("b").join(mel)).unwrap(),
        fs::read(env.path("c").join(mel)).unwrap(),
    );
    assert_eq!(a, b);
    assert_ne!(a, c);
    let header = |d: &str| fs::read_to_string(env.path(d).join("manifest.tsv")).unwrap().lines().take(2).collect::<Vec<_>>().join("\n");
    assert_eq!(header("a"), header("c"));
    assert_eq!(
        fs::read_to_string(env.path("a/manifest.tsv")).unwrap(),
        fs::read_to_string(env.path("b/manifest.tsv")).unwrap()
    );
}

#[test]
fn train_resume_continues_identically() {
    let env = Env::new("");
    env.corpus();
    let corpus = env.s("corpus");
    env.run(&["train", "--corpus", &corpus, "--run", &env.s("full"), "--epochs", "2"]).unwrap();
    env.run(&["train", "--corpus", &corpus, "--run", &env.s("split"), "--epochs", "1"]).unwrap();
    env.run(&["train", "--corpus", &corpus, "--run", &env.s("split"), "--epochs", "2", "--resume"]).unwrap();
    let log = |d: &str| fs::read_to_string(env.path(d).join(STEP_LOG)).unwrap();
    assert_eq!(log("full"), log("split"));
    assert_eq!(log("full").lines().count(), 1 + 2 * 2);
    assert_eq!(
        fs::read(env.path("full").join(CHECKPOINT_FILE)).unwrap(),
        fs::read(env.path("split").join(CHECKPOINT_FILE)).unwrap()
    );
    let err = env.run(&["train", "--corpus", &corpus, "--run", &env.s("full")]).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn both_output_modes_train() {
    let env = Env::new("");
    env.corpus();
    for mode in ["mse", "gmm:2"] {
        let run = env.s(&format!("run-{mode}"));
        env.run(&["train", "--corpus", &env.s("corpus"), "--run", &run, "--mode", mode, "--epochs", "2"]).unwrap();
        let ck = Checkpoint::load(&Path::new(&run).join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(ck.model.output.to_string(), mode);
        assert_eq!(ck.epoch, 2);
        let epochs = fs::read_to_string(Path::new(&run).join("epochs.tsv")).unwrap();
        assert_eq!(epochs.lines().count(), 3);
    }
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let env = Env::new("");
    env.corpus();
    env.run(&["train", "--corpus", &env.s("corpus"), "--run", &env.s("run")]).unwrap();
    let path = env.path("run").join(CHECKPOINT_FILE);
    let bytes = fs::read(&path).unwrap();
    let again = env.path("again.ckpt");
    Checkpoint::load(&path).unwrap().save(&again).unwrap();
    assert_eq!(bytes, fs::read(&again).unwrap());
}

#[test]
fn no_att_interp_sets_output_length() {
    let env = Env::new("");
    env.corpus();
    let run = env.s("run");
    env.run(&["train", "--corpus", &env.s("corpus"), "--run", &run, "--ablate", "no-att"]).unwrap();
    env.run(&["convert", "--run", &run, "--corpus", &env.s("corpus"), "--out", &env.s("plain")]).unwrap();
    env.run(&["convert", "--run", &run, "--corpus", &env.s("corpus"), "--out", &env.s("interp"), "--interp", "0.5"])
        .unwrap();
    let pairs = load_split(&Manifest::read(&env.path("corpus/manifest.tsv")).unwrap(), &env.path("corpus"), Split::Test).unwrap();
    for p in &pairs {
        let tx = p.source.frames();
        assert_eq!(read(&env.path(&format!("plain/{}.mel.fea", p.id))).frames(), tx);
        let expected = (0.5 * tx as f64).round() as usize;
        assert_eq!(read(&env.path(&format!("interp/{}.mel.fea", p.id))).frames(), expected);
    }
}

#[test]
fn step_cap_exits_five_with_partial_outputs() {
    let env = Env::new("");
    env.corpus();
    let run = env.s("run");
    env.run(&["train", "--corpus", &env.s("corpus"), "--run", &run]).unwrap();
    let err = env
        .run(&["convert", "--run", &run, "--corpus", &env.s("corpus"), "--out", &env.s("conv"), "--max-steps", "3"])
        .unwrap_err();
    assert_eq!(err.exit_code(), 5, "{err}");
    let index = fs::read_to_string(env.path("conv/conversions.tsv")).unwrap();
    assert!(index.contains("step-cap"));
    let mel = read(&env.path("conv/test0000.mel.fea"));
    assert!(mel.frames() <= 3 * 2);
    let a = read(&env.path("conv/test0000.align.fea"));
    assert!(a.frames() <= 3);
}

fn copy_targets_as_converted(env: &Env, dir: &str) {
    let out = env.path(dir);
    fs::create_dir_all(&out).unwrap();
    let m = Manifest::read(&env.path("corpus/manifest.tsv")).unwrap();
    for (_, t) in m.pairs(Split::Test) {
        fs::copy(env.path("corpus").join(&t.mel), out.join(format!("{}.mel.fea", t.id))).unwrap();
        fs::copy(env.path("corpus").join(&t.wav), out.join(format!("{}.wav", t.id))).unwrap();
    }
}

#[test]
fn self_evaluation_scores_zero() {
    let env = Env::new("");
    env.corpus();
    copy_targets_as_converted(&env, "self");
    let cfg = env.cfg();
    let reports = cli::cmd_eval(&cfg, &[cli::System::parse(&format!("ref={}", env.s("self")))], Split::Test, &env.path("eval"))
        .unwrap();
    let r = &reports[0];
    assert_eq!(r.mcd(), Some(0.0));
    assert_eq!(r.f0_rmse(), Some(0.0));
    assert_eq!(r.ddur(), Some(0.0));
    assert!(r.voiced_frames() > 0);
    let text = fs::read_to_string(env.path("eval/ref.report.txt")).unwrap();
    assert!(text.contains("[aggregate ref]"));
}

#[test]
fn missing_items_are_reported_and_fail() {
    let env = Env::new("");
    env.corpus();
    copy_targets_as_converted(&env, "partial");
    fs::remove_file(env.path("partial/test0001.mel.fea")).unwrap();
    let err = env
        .run(&["eval", "--corpus", &env.s("corpus"), "--converted", &env.s("partial"), "--out", &env.s("eval")])
        .unwrap_err();
    assert_eq!(err.exit_code(), 3);
    let text = fs::read_to_string(env.path("eval/partial.report.txt")).unwrap();
    assert!(text.contains("[utterance test0001]\nmcd_db = n/a"));
    assert!(text.contains("error = converted features are missing"));
    assert!(text.contains("failures = 1"));
}

#[test]
fn table_style_summary_has_one_row_per_system() {
    let env = Env::new("");
    env.corpus();
    let run = env.s("run");
    env.run(&["train", "--corpus", &env.s("corpus"), "--run", &run, "--ablate", "no-att"]).unwrap();
    env.run(&["convert", "--run", &run, "--corpus", &env.s("corpus"), "--out", &env.s("baseline")]).unwrap();
    env.run(&["convert", "--run", &run, "--corpus", &env.s("corpus"), "--out", &env.s("i-baseline"), "--interp", "auto"])
        .unwrap();
    copy_targets_as_converted(&env, "proposed");
    env.run(&[
        "eval",
        "--corpus",
        &env.s("corpus"),
        "--converted",
        &env.s("baseline"),
        "--converted",
        &env.s("i-baseline"),
        "--converted",
        &format!("proposed={}", env.s("proposed")),
        "--out",
        &env.s("eval"),
    ])
    .unwrap();
    let summary = fs::read_to_string(env.path("eval/summary.tsv")).unwrap();
    let rows: Vec<&str> = summary.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(rows, ["baseline", "i-baseline", "proposed"]);
}

#[test]
fn plot_exports_heat_map_and_overlay() {
    let env = Env::new("");
    env.corpus();
    let conv = env.path("conv");
    fs::create_dir_all(&conv).unwrap();
    let (steps, states) = (6, 4);
    let mut t = Tensor::zeros(steps, states);
    for s in 0..steps {
        t.row_mut(s)[(s * states / steps).min(states - 1)] = 1.0;
    }
    let a = AlignmentMatrix::new(t.clone());
    io::write_features(&conv.join("test0000.align.fea"), &FeatureSequence::new(steps, states, t.data().to_vec()).unwrap())
        .unwrap();
    env.run(&["plot", "--converted", &env.s("conv"), "--corpus", &env.s("corpus"), "--out", &env.s("plot")]).unwrap();
    let pgm = fs::read(env.path("plot/test0000.pgm")).unwrap();
    let header = format!("P5\n{states} {steps}\n255\n");
    assert!(pgm.starts_with(header.as_bytes()));
    let pixels = &pgm[header.len()..];
    assert_eq!(pixels.len(), steps * states);
    for s in 0..steps {
        let row = &pixels[s * states..(s + 1) * states];
        assert_eq!(row.iter().filter(|p| **p == 255).count(), 1);
        assert_eq!(row.iter().position(|p| *p == 255), Some(a.argmax(s)));
    }
    let overlay = fs::read_to_string(env.path("plot/test0000.overlay.tsv")).unwrap();
    assert_eq!(overlay.lines().count(), 1 + steps);
}

#[test]
fn converting_a_training_item_after_overfitting_recovers_its_target() {
    let env = Env::new("");
    fs::write(
        &env.config,
        TINY.replace("n_train = 4", "n_train = 1")
            .replace("n_val = 1", "n_val = 0")
            .replace("n_test = 2", "n_test = 0")
            .replace("epochs = 1", "epochs = 400\nlr = 0.005\nweights = { w_dec = 1.0, w_post = 1.0, w_end = 0.2 }")
            .replace("batch = 2", "batch = 1")
            .replace("postnet_channels = 8", "postnet_channels = 8\nzoneout = 0.0\nprenet_dropout = 0.0"),
    )
    .unwrap();
    env.corpus();
    let run = env.s("run");
    env.run(&["train", "--corpus", &env.s("corpus"), "--run", &run]).unwrap();
    env.run(&["convert", "--run", &run, "--corpus", &env.s("corpus"), "--split", "train", "--out", &env.s("conv")]).unwrap();
    let m = Manifest::read(&env.path("corpus/manifest.tsv")).unwrap();
    let p = &load_split(&m, &env.path("corpus"), Split::Train).unwrap()[0];
    let converted = read(&env.path("conv/train0000.mel.fea"));
    let ours = mcd(&converted, &p.target).unwrap().mcd;
    let untouched = mcd(&p.source.select_dims(0, 16), &p.target).unwrap().mcd;
    assert!(ours < 0.5 * untouched, "converted {ours:.3} dB vs source {untouched:.3} dB");
    let frames = converted.frames() as f64;
    assert!((frames - p.target.frames() as f64).abs() <= 0.1 * p.target.frames() as f64);
}

#[test]
fn binary_exit_codes() {
    let env = Env::new("");
    let bad = env.path("bad.toml");
    fs::write(&bad, "[train]\nlr = \"fast\"\n").unwrap();
    let st = bin().args(["--config", bad.to_str().unwrap(), "gen-data", "--out", &env.s("x")]).status().unwrap();
    assert_eq!(st.code(), Some(2));
    let st = bin().args(["train", "--corpus", &env.s("nowhere"), "--run", &env.s("r")]).status().unwrap();
    assert_eq!(st.code(), Some(3));
    let st = bin().args(["train", "--mode", "gmm:0"]).status().unwrap();
    assert_eq!(st.code(), Some(2));
    let st = bin().args(["--config", env.config.to_str().unwrap(), "gen-data", "--out", &env.s("ok")]).status().unwrap();
    assert_eq!(st.code(), Some(0));
}
