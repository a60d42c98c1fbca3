use std::path::Path;

use fusetrack::cli::{self, cmd_eval, cmd_track, main_with, EvalArgs, ResultFile, TrackArgs, EXIT_FAILURE, EXIT_OK, EXIT_USAGE};
use fusetrack::harness::Checkpoint;
use fusetrack::Error;

const TINY: &str = "\
# small enough to train in a second
model.patch=4
model.dim=8
model.depth=2
model.heads=2
model.mlp_ratio=2
model.template_size=8
model.search_size=16
model.head_width=8
training.batch=2
training.steps=3
data.frames=8
data.frame_size=64
";

fn run(args: &[&str]) -> i32 {
    main_with(std::iter::once("fusetrack").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_then_track_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let run_dir = dir.path().join("run");
    assert_eq!(run(&["train", "--config", s(&cfg), "--out", s(&run_dir)]), EXIT_OK);

    let curves = std::fs::read_to_string(run_dir.join("curves.csv")).unwrap();
    let body: Vec<&str> = curves.lines().filter(|l| !l.starts_with('#')).collect();
    assert!(body[0].starts_with("step,"), "{}", body[0]);
    assert_eq!(body.len(), 4);
    assert!(curves.contains("# model.depth=2"));

    let ckpt = Checkpoint::load(&run_dir.join("checkpoint.bin")).unwrap();
    assert_eq!(ckpt.step, 3);

    let track = |out: &Path| TrackArgs {
        checkpoint: run_dir.join("checkpoint.bin"),
        config: Some(cfg.clone()),
        sequence_seed: Some(5),
        init: None,
        out: out.to_path_buf(),
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let first = cmd_track(&track(&a)).unwrap();
    cmd_track(&track(&b)).unwrap();
    assert_eq!(first.rows.len(), 8);
    for f in ["result.txt", "rgb_gt.txt", "thermal_gt.txt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let reparsed = ResultFile::parse(&std::fs::read_to_string(a.join("result.txt")).unwrap(), "result").unwrap();
    assert_eq!(reparsed, first);

    assert_eq!(
        run(&["eval", "--result", s(&a.join("result.txt")), "--rgb-gt", s(&a.join("rgb_gt.txt")), "--thermal-gt", s(&a.join("thermal_gt.txt"))]),
        EXIT_OK
    );
}

#[test]
fn track_rejects_a_checkpoint_for_another_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let run_dir = dir.path().join("run");
    assert_eq!(run(&["train", "--config", s(&cfg), "--out", s(&run_dir)]), EXIT_OK);
    let other = dir.path().join("other.cfg");
    std::fs::write(&other, TINY.replace("model.dim=8", "model.dim=12")).unwrap();
    let args = TrackArgs {
        checkpoint: run_dir.join("checkpoint.bin"),
        config: Some(other),
        sequence_seed: None,
        init: None,
        out: dir.path().join("t"),
    };
    assert!(matches!(cmd_track(&args), Err(Error::Version(_))));
}

#[test]
fn missing_config_is_a_usage_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.cfg");
    match cli::RunConfig::load(&missing) {
        Err(e) => assert!(e.to_string().contains("nope.cfg"), "{e}"),
        Ok(_) => panic!("loaded a missing file"),
    }
    assert_eq!(run(&["train", "--config", s(&missing), "--out", s(&dir.path().join("o"))]), EXIT_USAGE);
    assert_eq!(run(&["no-such-command"]), EXIT_USAGE);
}

#[test]
fn bad_config_values_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "model.depth=four\n").unwrap();
    assert_eq!(run(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]), EXIT_USAGE);
}

fn write_fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf, std::path::PathBuf) {
    let result = format!(
        "# fixture\n{}\n\
         0,rgb,1,0,0,0,20,20,0,0,20,20,0,0,20,20\n\
         1,thermal,0,1,30,0,20,20,30,0,20,20,30,0,20,20\n\
         2,rgb,1,0,10,10,20,20,10,10,20,20,10,10,20,20\n",
        fusetrack::cli::formats::RESULT_HEADER
    );
    let (r, g, t) = (dir.join("result.txt"), dir.join("rgb_gt.txt"), dir.join("thermal_gt.txt"));
    std::fs::write(&r, result).unwrap();
    std::fs::write(&g, "0,0,20,20\n0,0,20,20\n10,10,20,20\n").unwrap();
    std::fs::write(&t, "0,0,20,20\n25,0,20,20\n10,10,20,20\n").unwrap();
    (r, g, t)
}

#[test]
fn eval_scores_a_three_frame_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let (r, g, t) = write_fixture(dir.path());
    let args = |thermal: Option<&Path>| EvalArgs {
        result: r.clone(),
        rgb_gt: g.clone(),
        thermal_gt: thermal.map(Path::to_path_buf),
        tau: 20.0,
        out: Some(dir.path().join("curves")),
    };
    let rgb_only = cmd_eval(&args(None)).unwrap();
    // frame 1 is 30 px from the rgb box, 5 px from the thermal box
    assert_eq!(rgb_only.pr, 2.0 / 3.0);
    assert_eq!(rgb_only.mpr, rgb_only.pr);
    assert_eq!(rgb_only.msr, rgb_only.sr);
    let both = cmd_eval(&args(Some(&t))).unwrap();
    assert_eq!(both.pr, 2.0 / 3.0);
    assert_eq!(both.mpr, 1.0);
    assert!(both.msr > both.sr);
    let precision = std::fs::read_to_string(dir.path().join("curves/precision.csv")).unwrap();
    assert!(precision.lines().count() > 1);
}

#[test]
fn eval_frame_count_mismatch_fails() {
    let dir = tempfile::tempdir().unwrap();
    let (r, g, _) = write_fixture(dir.path());
    std::fs::write(&g, "0,0,20,20\n0,0,20,20\n").unwrap();
    assert_eq!(run(&["eval", "--result", s(&r), "--rgb-gt", s(&g)]), EXIT_FAILURE);
}
