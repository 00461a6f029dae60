use std::path::Path;
use std::process::{Command, Output};

use reid_cli::matrix::ScoreMatrix;
use reid_cli::weights;
use reid_core::imaging::PatchGrid;
use reid_core::salmatch::RankModel;
use reid_core::store::{load_grids, load_saliency, save_grids, save_model};

fn reid(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reid"))
        .current_dir(dir)
        .env_remove("REID_SEED")
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = reid(dir, args);
    assert_eq!(code(&out), 0, "{args:?}: {}", stderr(&out));
}

fn synth(dir: &Path, identities: usize) {
    ok(
        dir,
        &["synth", "--out", "data", "--identities", &identities.to_string()],
    );
}

fn grid(rows: usize, cols: usize, values: &[[f32; 2]], camera: &str, id: &str) -> PatchGrid {
    let data = values.iter().flatten().copied().collect();
    PatchGrid::from_descriptors(rows, cols, 2, data)
        .unwrap()
        .with_meta(id, camera, Some(id.to_string()))
}

#[test]
fn extract_is_deterministic_across_job_counts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 3);
    ok(
        d,
        &[
            "--jobs",
            "1",
            "extract",
            "--manifest",
            "data/manifest.csv",
            "--out",
            "one.bin",
        ],
    );
    ok(
        d,
        &[
            "--jobs",
            "3",
            "extract",
            "--manifest",
            "data/manifest.csv",
            "--out",
            "three.bin",
        ],
    );
    ok(d, &["extract", "--manifest", "data/manifest.csv", "--out", "one.bin"]);
    let read = |p: &str| std::fs::read(d.join(p)).unwrap();
    assert_eq!(read("one.bin"), read("three.bin"));
    assert_eq!(read("one.bin.ids"), read("three.bin.ids"));
    let grids = load_grids(&d.join("one.bin")).unwrap();
    assert_eq!(grids.len(), 6);
    assert_eq!(grids[0].image_id, "000_A");
    assert_eq!(grids[0].dim(), 672);
}

#[test]
fn missing_image_is_reported_as_partial_failure() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 2);
    let mut manifest = std::fs::read_to_string(d.join("data/manifest.csv")).unwrap();
    manifest.push_str("images/ghost.png,A,9\n");
    std::fs::write(d.join("data/manifest.csv"), manifest).unwrap();
    let out = reid(d, &["extract", "--manifest", "data/manifest.csv", "--out", "desc.bin"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("ghost.png"));
    assert_eq!(load_grids(&d.join("desc.bin")).unwrap().len(), 4);
}

#[test]
fn fatal_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(
        code(&reid(d, &["extract", "--manifest", "nope.csv", "--out", "x.bin"])),
        1
    );
    assert_eq!(code(&reid(d, &["extract", "--out", "x.bin"])), 1);
    assert_eq!(code(&reid(d, &["frobnicate"])), 1);
    std::fs::write(d.join("bad.toml"), "[kernel]\nsigma = -2.0\n").unwrap();
    assert_eq!(code(&reid(d, &["--config", "bad.toml", "synth", "--out", "x"])), 1);
    let out = Command::new(env!("CARGO_BIN_EXE_reid"))
        .current_dir(d)
        .env("REID_SEED", "not-a-number")
        .args(["synth", "--out", "x"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
    assert_eq!(code(&reid(d, &["--help"])), 0);
    assert_eq!(
        code(&reid(d, &["annotate-serve", "--data-dir", "missing", "--port", "0"])),
        1
    );
}

#[test]
fn densefeats_matches_hand_computed_scores() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let probes = vec![grid(2, 1, &[[0.0, 0.0], [1.0, 0.0]], "A", "p")];
    let gallery = vec![
        grid(2, 1, &[[0.0, 0.0], [1.0, 1.0]], "B", "g0"),
        grid(2, 1, &[[0.0, 2.0], [1.0, 0.0]], "B", "g1"),
    ];
    save_grids(&d.join("p.bin"), &probes).unwrap();
    save_grids(&d.join("g.bin"), &gallery).unwrap();
    std::fs::write(d.join("cfg.toml"), "[kernel]\nsigma = 1.0\n").unwrap();
    ok(
        d,
        &[
            "--config",
            "cfg.toml",
            "match",
            "--method",
            "densefeats",
            "--descriptors",
            "p.bin",
            "--gallery-descriptors",
            "g.bin",
            "--out",
            "s.csv",
        ],
    );
    let m = ScoreMatrix::read_csv(std::fs::File::open(d.join("s.csv")).unwrap()).unwrap();
    assert_eq!(m.probes, vec!["p"]);
    assert_eq!(m.gallery, vec!["g0", "g1"]);
    // exp(-d^2 / 2) summed over the two aligned patches
    let want = [1.0 + (-0.5f64).exp(), (-2.0f64).exp() + 1.0];
    for (got, want) in m.values[0].iter().zip(want) {
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn identical_image_tops_its_row_under_patmatch() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 4);
    ok(d, &["extract", "--manifest", "data/manifest.csv", "--out", "desc.bin"]);
    ok(
        d,
        &[
            "match",
            "--method",
            "patmatch",
            "--descriptors",
            "desc.bin",
            "--gallery-descriptors",
            "desc.bin",
            "--out",
            "s.csv",
        ],
    );
    let m = ScoreMatrix::read_csv(std::fs::File::open(d.join("s.csv")).unwrap()).unwrap();
    assert_eq!(m.probes.len(), 8);
    for (i, row) in m.values.iter().enumerate() {
        let best = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(best, i, "{}", m.probes[i]);
    }
}

#[test]
fn saliency_against_itself_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 1);
    let manifest = std::fs::read_to_string(d.join("data/manifest.csv")).unwrap();
    let one: String = manifest.lines().take(2).map(|l| format!("{l}\n")).collect();
    std::fs::write(d.join("data/one.csv"), one).unwrap();
    ok(d, &["extract", "--manifest", "data/one.csv", "--out", "one.bin"]);
    ok(
        d,
        &[
            "saliency",
            "--descriptors",
            "one.bin",
            "--refs",
            "one.bin",
            "--out",
            "sal.bin",
            "--pgm-dir",
            "pgm",
        ],
    );
    let maps = load_saliency(&d.join("sal.bin")).unwrap();
    assert_eq!(maps.len(), 1);
    assert!(maps[0].score.iter().all(|&s| s == 0.0));
    assert!(d.join("pgm/000_A.pgm").exists());
}

#[test]
fn salmatch_requires_model_and_saliency() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 2);
    ok(d, &["extract", "--manifest", "data/manifest.csv", "--out", "desc.bin"]);
    let out = reid(
        d,
        &[
            "match",
            "--method",
            "salmatch",
            "--descriptors",
            "desc.bin",
            "--out",
            "s.csv",
        ],
    );
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("--saliency"));
    ok(d, &["saliency", "--descriptors", "desc.bin", "--out", "sal.bin"]);
    let out = reid(
        d,
        &[
            "match",
            "--method",
            "salmatch",
            "--descriptors",
            "desc.bin",
            "--saliency",
            "sal.bin",
            "--out",
            "s.csv",
        ],
    );
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("--model"));
}

#[test]
fn train_match_and_eval_through_config_paths() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 8);
    std::fs::write(
        d.join("cfg.toml"),
        "[trial]\ntrials = 3\n[paths]\nmanifest = \"data/manifest.csv\"\ndescriptors = \"desc.bin\"\n\
         saliency = \"sal.bin\"\nmodel = \"w.bin\"\noutput_dir = \"out\"\n",
    )
    .unwrap();
    let c = ["--config", "cfg.toml"];
    ok(d, &[&c[..], &["extract"]].concat());
    ok(d, &[&c[..], &["saliency"]].concat());
    ok(d, &[&c[..], &["train", "--log", "train.csv"]].concat());
    assert!(std::fs::read_to_string(d.join("train.csv"))
        .unwrap()
        .starts_with("iteration,"));
    ok(
        d,
        &[&c[..], &["match", "--method", "salmatch", "--out", "s.csv"]].concat(),
    );
    let m = ScoreMatrix::read_csv(std::fs::File::open(d.join("s.csv")).unwrap()).unwrap();
    assert_eq!((m.probes.len(), m.gallery.len()), (8, 8));
    ok(d, &[&c[..], &["eval", "--method", "patmatch"]].concat());
    let cmc = std::fs::read_to_string(d.join("out/cmc_patmatch.csv")).unwrap();
    assert!(cmc.starts_with("rank,mean,trial_0,trial_1,trial_2\n"));
    assert_eq!(cmc.lines().count(), 1 + 4);
}

#[test]
fn eval_of_an_oracle_matrix_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 10);
    let ids = |cam: &str| (0..10).map(|i| format!("{i:03}_{cam}")).collect::<Vec<_>>();
    let values = (0..10)
        .map(|p| (0..10).map(|g| if p == g { 1.0 } else { 0.0 }).collect())
        .collect();
    let m = ScoreMatrix::new(ids("A"), ids("B"), values).unwrap();
    m.write_csv(std::fs::File::create(d.join("oracle.csv")).unwrap())
        .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_reid"))
        .current_dir(d)
        .env("REID_SEED", "42")
        .args([
            "eval",
            "--manifest",
            "data/manifest.csv",
            "--scores",
            "oracle.csv",
            "--out-dir",
            "ev",
        ])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let cmc = std::fs::read_to_string(d.join("ev/cmc_scores.csv")).unwrap();
    let rank1: Vec<&str> = cmc.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(rank1[0], "1");
    assert!(rank1[1..].iter().all(|v| *v == "1"), "{cmc}");
    let cfg = reid_core::config::PipelineConfig::load(&d.join("ev/config.toml")).unwrap();
    assert_eq!(cfg.trial.seed, 42);
}

#[test]
fn exported_weights_read_back() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (rows, cols) = (3, 2);
    let w: Vec<f64> = (0..8 * rows * cols).map(|i| (i as f64 - 20.0) / 7.0).collect();
    let model = RankModel::new(rows, cols, w).unwrap();
    save_model(&d.join("w.bin"), &model).unwrap();
    ok(d, &["export-weights", "--model", "w.bin", "--out-dir", "raw"]);
    for name in weights::SLOT_NAMES {
        let text = std::fs::read_to_string(d.join("raw").join(format!("{name}.csv"))).unwrap();
        assert_eq!(text.lines().count(), rows);
        assert!(text.lines().all(|l| l.split(',').count() == cols));
    }
    assert_eq!(weights::import(&d.join("raw")).unwrap(), model);
    // slot 0 of patch (0, 1) is weight 8
    let alpha1 = std::fs::read_to_string(weights::lattice_path(&d.join("raw"), 0)).unwrap();
    assert_eq!(
        alpha1.lines().next().unwrap(),
        format!("{},{}", -20.0 / 7.0, -12.0 / 7.0)
    );

    ok(
        d,
        &["export-weights", "--model", "w.bin", "--out-dir", "norm", "--normalize"],
    );
    let norm = weights::import(&d.join("norm")).unwrap();
    let max = norm.w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!((max - 1.0).abs() < 1e-15);
}

#[test]
fn synth_manifest_uses_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 2);
    let text = std::fs::read_to_string(dir.path().join("data/manifest.csv")).unwrap();
    assert_eq!(text.lines().nth(1), Some("images/000_A.png,A,000"));
    assert!(dir.path().join("data/images/001_B.png").exists());
}

#[test]
fn resize_changes_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 1);
    ok(
        d,
        &[
            "extract",
            "--manifest",
            "data/manifest.csv",
            "--out",
            "r.bin",
            "--resize",
            "128x48",
        ],
    );
    // 10-pixel patches at stride 4: (128 - 10) / 4 + 1 = 30 rows, (48 - 10) / 4 + 1 = 10 cols
    assert_eq!(load_grids(&d.join("r.bin")).unwrap()[0].shape(), (30, 10));
    assert_eq!(
        code(&reid(
            d,
            &[
                "extract",
                "--manifest",
                "data/manifest.csv",
                "--out",
                "r.bin",
                "--resize",
                "0x4"
            ]
        )),
        1
    );
}

#[test]
fn calibrated_sigma0_is_the_median_score() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 3);
    ok(d, &["extract", "--manifest", "data/manifest.csv", "--out", "desc.bin"]);
    ok(
        d,
        &[
            "saliency",
            "--descriptors",
            "desc.bin",
            "--out",
            "sal.bin",
            "--calibrate-sigma0",
        ],
    );
    let maps = load_saliency(&d.join("sal.bin")).unwrap();
    let mut scores: Vec<f64> = maps.iter().flat_map(|m| m.score.iter().copied()).collect();
    scores.sort_by(f64::total_cmp);
    let n = scores.len();
    let median = if n % 2 == 1 {
        scores[n / 2]
    } else {
        (scores[n / 2 - 1] + scores[n / 2]) / 2.0
    };
    // probabilities are stored as f32
    for m in &maps {
        for (s, p) in m.score.iter().zip(&m.prob) {
            let want = 1.0 - (-(s * s) / (median * median)).exp();
            assert!((p - want).abs() < 1e-6, "{p} vs {want}");
        }
    }
}
