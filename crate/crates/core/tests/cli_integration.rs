use std::path::{Path, PathBuf};

use cldl::checkpoint;
use cldl::cli::{self, EvalSplit};
use cldl::config::{DataSource, RunConfig};
use cldl::data::{self, Label, Split, SynthSpec, Tier};
use cldl::inference;
use cldl::loss::{self, LossMode, ScoreMatrix};
use cldl::tensor::Tensor;
use cldl::Error;
use proptest::prelude::*;

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// The shipped synthetic config shrunk to a few seconds of work.
fn small_config(out: &Path, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::load(&configs_dir().join("synthetic-tiers.json")).unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg.trainer.epochs = epochs;
    cfg.trainer.threads = 1;
    if let DataSource::Synthetic { train, val } = &mut cfg.data {
        train.samples_per_class = 30;
        val.samples_per_class = 20;
    }
    cfg
}

#[test]
fn shipped_configs_validate() {
    for name in ["mnist-mlp.json", "synthetic-tiers.json"] {
        let cfg = RunConfig::load(&configs_dir().join(name)).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.attach_points().unwrap().len(), 3, "{name}");
    }
}

#[test]
fn zero_epochs_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 0);
    let out = cli::cmd_train(&cfg).unwrap();
    assert!(out.metrics.is_empty());

    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1, "header only: {metrics:?}");

    let init = cfg.build_model().unwrap();
    let ck = checkpoint::read(&cfg.checkpoint_path()).unwrap();
    let saved: Vec<&Tensor> = ck.tensors.iter().collect();
    assert_eq!(saved, init.tensors());
    assert_eq!(ck.state.unwrap().epoch, 0);
}

#[test]
fn scores_csv_reproduces_the_inspect_histogram() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 3);
    cli::cmd_train(&cfg).unwrap();
    let eval = cli::cmd_eval(&cfg, None, EvalSplit::Val, 2).unwrap();
    let report = cli::cmd_inspect(&cfg, None, EvalSplit::Val).unwrap();
    let m = cfg.head_count();
    let recomputed = cli::tier_wins_from_scores_csv(&dir.path().join("scores.csv"), m, cfg.classes).unwrap();
    assert_eq!(recomputed, report.tier_histogram);
    assert_eq!(eval.scores.len(), 6 * 20);
    assert!((0.0..=1.0).contains(&eval.combined_accuracy));

    let spec = std::fs::read_to_string(dir.path().join("specialization.csv")).unwrap();
    assert!(spec.starts_with("group,name,wins_h1,wins_h2,wins_h3"));
    let preds = std::fs::read_to_string(dir.path().join("predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 1 + 6 * 20);
}

#[test]
fn corrupted_checkpoint_magic_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 1);
    cli::cmd_train(&cfg).unwrap();
    let path = cfg.checkpoint_path();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[..4].copy_from_slice(b"NOPE");
    std::fs::write(&path, &bytes).unwrap();

    let err = cli::cmd_eval(&cfg, None, EvalSplit::Val, 1).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(ref m) if m.contains("magic")), "{err}");
    assert_eq!(cli::exit_code(&err), 3);
}

#[test]
fn comparison_csv_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 2);
    let rows = cli::cmd_compare(&cfg, &[4, 5]).unwrap();
    assert_eq!(rows.len(), 8);

    let mut rdr = csv::Reader::from_path(dir.path().join("comparison.csv")).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(
        header,
        ["mode", "seed", "acc_val_h1", "acc_val_h2", "acc_val_h3", "acc_val_combined", "final_loss"]
    );
    let recs: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(recs.len(), 8 + 4);
    for r in &recs {
        let filled: Vec<bool> = (2..5).map(|i| !r[i].is_empty()).collect();
        if &r[0] == "single" {
            assert_eq!(filled, [false, false, true]);
        } else {
            assert_eq!(filled, [true, true, true]);
        }
    }
    let means: Vec<&str> = recs.iter().filter(|r| &r[1] == "mean").map(|r| r.get(0).unwrap()).collect();
    assert_eq!(means, ["cldl", "cldl-minus", "dsn-star", "single"]);
    for mode in LossMode::ALL {
        assert!(dir.path().join(format!("compare/{}-seed4/metrics.csv", mode.name())).exists());
    }
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    assert_eq!(cli::run(["cldl", "train", "--config", missing.to_str().unwrap()]), 2);

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"seed": 1, "bogus": true}"#).unwrap();
    assert_eq!(cli::run(["cldl", "train", "--config", bad.to_str().unwrap()]), 2);

    let cfg = small_config(dir.path(), 1);
    let good = dir.path().join("good.json");
    std::fs::write(&good, cfg.to_json()).unwrap();
    let out = dir.path().join("run");
    let args = |cmd: &'static str| vec!["cldl", cmd, "--config", good.to_str().unwrap(), "--out", out.to_str().unwrap()];
    assert_eq!(cli::run(args("eval")), 3, "no checkpoint yet");
    assert_eq!(cli::run(args("train")), 0);
    assert_eq!(cli::run(args("eval")), 0);
    assert_eq!(cli::run(args("inspect")), 0);
    assert_eq!(cli::run(args("synth")), 0);
    assert!(out.join("val-images.idx").exists());
    assert_eq!(cli::run(args("gradcheck")), 0);
    assert!(out.join("gradcheck.csv").exists());
}

#[test]
fn synth_export_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 0);
    cli::cmd_synth(&cfg).unwrap();
    let ds = data::load_idx(&dir.path().join("train-images.idx"), &dir.path().join("train-labels.idx"), Split::Train).unwrap();
    let (train, _) = cfg.load_data().unwrap();
    assert_eq!(ds.samples().data(), train.samples().data());
    assert_eq!(ds.labels(), train.labels());
}

fn arb_tier() -> impl Strategy<Value = Tier> {
    prop_oneof![Just(Tier::Linear), Just(Tier::Radial), Just(Tier::XorLike)]
}

fn arb_scores(max_heads: usize) -> impl Strategy<Value = (ScoreMatrix, usize)> {
    (1..=max_heads, 2usize..8).prop_flat_map(|(m, k)| {
        (prop::collection::vec(prop::collection::vec(-6.0f64..6.0, k), m), 0..k).prop_map(|(logits, y)| {
            let rows: Vec<Vec<f64>> = logits
                .iter()
                .map(|z| {
                    let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
                    let s: f64 = e.iter().sum();
                    e.iter().map(|v| v / s).collect()
                })
                .collect();
            (ScoreMatrix::new(&rows).unwrap(), y)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn config_round_trips(seed in any::<u64>(), lam in prop::collection::vec(0.0f64..3.0, 3), alpha in 0.0f64..1e-2,
                          tiers in prop::collection::vec(arb_tier(), 6), noise in 0.0f64..1.0, epochs in 0usize..50) {
        let dir = std::env::temp_dir();
        let mut cfg = small_config(&dir, epochs);
        cfg.seed = seed;
        cfg.loss.lambda = lam;
        cfg.loss.alpha = alpha;
        if let DataSource::Synthetic { train, .. } = &mut cfg.data {
            *train = SynthSpec::new(tiers, 5, noise, seed);
        }
        prop_assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn idx_round_trips(n in 1usize..6, h in 1usize..5, w in 1usize..5, seed in any::<u8>()) {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<f64> = (0..n * h * w).map(|i| ((i * 37 + seed as usize) % 256) as f64 / 255.0).collect();
        let images = Tensor::new(vec![n, h, w], pixels).unwrap();
        let labels: Vec<Label> = (0..n).map(|i| Label::from_index((i + seed as usize) % 3)).collect();
        let (ip, lp) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
        data::write_idx_u8(&ip, &images).unwrap();
        data::write_idx_labels(&lp, &labels).unwrap();
        let ds = data::load_idx(&ip, &lp, Split::Train).unwrap();
        prop_assert_eq!(ds.samples().data(), images.data());
        prop_assert_eq!(ds.labels(), &labels[..]);
    }

    #[test]
    fn modulation_is_bounded_and_decreasing((s, y) in arb_scores(5), bump in 0.01f64..0.5) {
        let y = Label::from_index(y);
        let eps = loss::DEFAULT_EPSILON;
        let m = s.heads();
        for h in 0..m {
            let t = loss::modulation(h, &s, y, LossMode::Cldl, eps);
            prop_assert!((0.0..=1.0).contains(&t));
            let hl = loss::per_head_loss(h, &s, y, LossMode::Cldl, eps);
            prop_assert_eq!(hl.loss, hl.modulation * hl.confidence);
        }
        if m > 1 {
            // raise companion 1's score on y, renormalizing the rest of its row
            let k = s.classes();
            let mut rows: Vec<Vec<f64>> = (0..m).map(|r| s.row(r).to_vec()).collect();
            let old = rows[1][y.index()];
            let new = old + bump * (1.0 - old);
            for (c, v) in rows[1].iter_mut().enumerate() {
                *v = if c == y.index() { new } else { *v * (1.0 - new) / (1.0 - old) };
            }
            prop_assume!(new < 1.0 - 1e-9 && k >= 2);
            let s2 = ScoreMatrix::new(&rows).unwrap();
            let before = loss::modulation(0, &s, y, LossMode::Cldl, eps);
            let after = loss::modulation(0, &s2, y, LossMode::Cldl, eps);
            prop_assert!(after < before, "{} !< {}", after, before);
            // heads at or above the changed one never enter a lower head's cascade factor
            prop_assert_eq!(
                loss::modulation(1, &s, y, LossMode::CldlMinus, eps),
                loss::modulation(1, &s2, y, LossMode::CldlMinus, eps)
            );
            prop_assert_eq!(
                loss::modulation(0, &s, y, LossMode::CldlMinus, eps),
                loss::modulation(0, &s2, y, LossMode::CldlMinus, eps)
            );
        }
    }

    #[test]
    fn inference_ignores_weight_decay((s, _) in arb_scores(4), alpha in 0.0f64..1.0) {
        let mode = if s.heads() == 1 { LossMode::Single } else { LossMode::Cldl };
        let base = loss::LossConfig::new(mode, s.heads());
        let a = inference::infer(&s, &base);
        let b = inference::infer(&s, &base.clone().with_alpha(alpha));
        prop_assert_eq!(a.label, b.label);
        let post: f64 = a.posterior.iter().sum();
        prop_assert!((post - 1.0).abs() < 1e-12);
    }
}
