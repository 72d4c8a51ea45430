use std::path::{Path, PathBuf};

use tailor_core::ablation::{AblationTable, TABLE_CSV, TABLE_JSON};
use tailor_core::cli::{command, run_cli, EXIT_FAILURE, EXIT_OK, EXIT_USAGE};
use tailor_core::config::SCHEMA;
use tailor_core::dual_stream::TeacherMode;
use tailor_core::evaluation::{Metric, MetricReport};
use tailor_core::run::{read_steps_log, RunManifest};

fn cli(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run_cli(std::iter::once("tailor").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn ok(args: &[&str]) -> String {
    let (code, out, err) = cli(args);
    assert_eq!(code, EXIT_OK, "{args:?}: {err}");
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A 16 px toy pair plus the flags for a short toy run writing under `dir/runs`.
fn setup(dir: &Path) -> (PathBuf, Vec<String>) {
    let pair = PathBuf::from(ok(&["make-toy-pair", "--out", s(&dir.join("pair")), "--resolution", "16", "--images", "2"]).trim());
    let flags = [
        ("--data.pair", s(&pair).to_string()),
        ("--output.dir", s(&dir.join("runs")).to_string()),
        ("--backbone.kind", "toy".into()),
        ("--backbone.attn_size", "4".into()),
        ("--warmup.steps", "3".into()),
        ("--dsbal.steps", "3".into()),
    ]
    .into_iter()
    .flat_map(|(k, v)| [k.to_string(), v])
    .collect();
    (pair, flags)
}

fn with<'a>(head: &[&'a str], flags: &'a [String]) -> Vec<&'a str> {
    head.iter().copied().chain(flags.iter().map(String::as_str)).collect()
}

const STUBS: [&str; 10] = [
    "--eval.steps",
    "2",
    "--eval.images_per_prompt",
    "2",
    "--eval.segmenter",
    "rects:0,0,1,1/0.25,0.25,0.75,0.75",
    "--eval.scorer_clip_t",
    "prompt_index",
    "--eval.scorer_clip_i",
    "constant:0.5",
];

const MORE_STUBS: [&str; 4] = ["--eval.scorer_dino", "constant:0.25", "--eval.scorer_dreamsim", "constant:0.125"];

#[test]
fn help_lists_every_config_key() {
    let mut cmd = command();
    cmd.build();
    let help = cmd.find_subcommand_mut("train").unwrap().render_long_help().to_string();
    for spec in SCHEMA {
        assert!(help.contains(&format!("--{}", spec.key)), "train help lacks {}", spec.key);
    }
    let eval_help = cmd.find_subcommand_mut("evaluate").unwrap().render_long_help().to_string();
    for spec in SCHEMA {
        assert_eq!(eval_help.contains(&format!("--{} ", spec.key)), spec.key.starts_with("eval."), "{}", spec.key);
    }
    assert!(eval_help.contains("--prompts"));
    let (code, out, _) = cli(&["--help"]);
    assert_eq!(code, EXIT_OK);
    for sub in ["train", "evaluate", "generate", "ablate", "inspect-masks", "make-toy-pair"] {
        assert!(out.contains(sub), "{sub}");
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.yaml");
    let (code, _, err) = cli(&["train", "--config", s(&missing)]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("nope.yaml"), "{err}");
    assert_eq!(cli(&["train", "--degradation.mode", "sideways"]).0, EXIT_USAGE);
    assert_eq!(cli(&["train", "--no-such-flag"]).0, EXIT_USAGE);
    assert_eq!(cli(&[]).0, EXIT_USAGE);
    assert_eq!(cli(&["evaluate", s(&tmp.path().join("missing-ckpt"))]).0, EXIT_USAGE);
    // training keys are not accepted by evaluate
    assert_eq!(cli(&["evaluate", "x", "--dsbal.beta", "0.5"]).0, EXIT_USAGE);
    assert_eq!(cli(&["make-toy-pair", "--out", s(tmp.path()), "--resolution", "10"]).0, EXIT_USAGE);
}

#[test]
fn real_backend_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, flags) = setup(tmp.path());
    let flags: Vec<String> = flags.into_iter().map(|f| if f == "toy" { "real".into() } else { f }).collect();
    let args = with(&["train"], &flags);
    let (code, _, err) = cli(&args);
    assert_eq!(code, EXIT_FAILURE, "{err}");
    assert!(err.contains("real backend required"), "{err}");
}

#[test]
fn train_records_overrides_and_config_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let (pair, flags) = setup(tmp.path());
    let mut args = with(&["train"], &flags);
    args.extend(["--dsbal.beta", "0.5"]);
    let run = PathBuf::from(ok(&args).trim());
    let m = RunManifest::read(&run).unwrap();
    assert_eq!(m.config.dsbal.beta, 0.5);
    assert_eq!(m.config.dsbal.teacher, TeacherMode::Ema);
    assert_eq!(read_steps_log(&run).unwrap().len(), 6);
    assert!(run.join("checkpoints/final").exists());
    assert!(run.join("checkpoints/post_warmup").exists());

    // file beats default, flag beats file
    let cfg = tmp.path().join("run.yaml");
    std::fs::write(
        &cfg,
        format!(
            "data:\n  pair: {}\nbackbone:\n  kind: toy\n  attn_size: 4\nwarmup:\n  steps: 2\ndsbal:\n  steps: 2\n  beta: 0.9\noutput:\n  dir: {}\n",
            s(&pair),
            s(&tmp.path().join("runs2"))
        ),
    )
    .unwrap();
    let run = PathBuf::from(ok(&["train", "--config", s(&cfg), "--dsbal.steps", "1"]).trim());
    let m = RunManifest::read(&run).unwrap();
    assert_eq!((m.config.warmup.steps, m.config.dsbal.steps, m.config.dsbal.beta), (2, 1, 0.9));
}

#[test]
fn evaluate_with_custom_prompts_and_stub_scorers() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, flags) = setup(tmp.path());
    let run = PathBuf::from(ok(&with(&["train"], &flags)).trim());
    let ckpt = run.join("checkpoints/final");

    let prompts = tmp.path().join("prompts.txt");
    std::fs::write(
        &prompts,
        ["on the beach", "in the jungle", "in the snow", "at night", "in autumn"]
            .map(|t| format!("<placeholder>, {t}\n"))
            .concat(),
    )
    .unwrap();

    // missing scorers fail at runtime with a hint
    let (code, _, err) = cli(&["evaluate", s(&ckpt), "--prompts", s(&prompts)]);
    assert_eq!(code, EXIT_FAILURE);
    assert!(err.contains("scorer"), "{err}");

    let mut args = vec!["evaluate", s(&ckpt), "--prompts", s(&prompts)];
    args.extend(STUBS);
    args.extend(MORE_STUBS);
    let metrics = PathBuf::from(ok(&args).trim());
    assert_eq!(metrics, run.join("eval/metrics.json"));
    let report: MetricReport = serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    assert_eq!(report.per_prompt.len(), 5);
    assert_eq!(report.settings.image_count, 10);
    assert_eq!(report.per_metric_means.len(), 4);
    // prompt_index scores i/100 for i in 0..5
    assert!((report.per_metric_means[&Metric::ClipT].unwrap() - 0.02).abs() < 1e-12);
    assert_eq!(report.per_metric_means[&Metric::ClipI], Some(0.5));
    assert_eq!(report.per_metric_means[&Metric::Dino], Some(0.25));
    assert_eq!(report.per_metric_means[&Metric::Dreamsim], Some(0.125));

    let out = tmp.path().join("gen");
    let mut args = vec!["generate", s(&ckpt), "--out", s(&out)];
    args.extend(&STUBS[..4]);
    let manifest = ok(&args);
    assert!(manifest.trim().ends_with("manifest.json"));
    assert_eq!(std::fs::read_dir(out.join("images")).unwrap().count(), 20 * 2);
}

#[test]
fn inspect_masks_writes_three_masks_per_image() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, flags) = setup(tmp.path());
    let out = tmp.path().join("masks");
    let mut args = with(&["inspect-masks"], &flags);
    args.extend(["--out", s(&out)]);
    ok(&args);
    let mut names: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.len(), 2 * 2 * 3);
    assert!(names.contains(&"s0_i0_effective.png".to_string()));
    assert!(names.contains(&"s1_i1_attention.png".to_string()));
}

#[test]
fn ablate_runs_a_grid_file() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, flags) = setup(tmp.path());
    let grid = tmp.path().join("grid.yaml");
    std::fs::write(
        &grid,
        "variants:\n  - name: g8\n    set: {degradation.gamma: 8}\n  - name: g64\n    set: {degradation.gamma: 64}\n  - name: off\n    label: no degradation\n    set: {degradation.mode: off}\n",
    )
    .unwrap();
    let out = tmp.path().join("abl");
    let mut args = with(&["ablate", "--grid", s(&grid), "--out", s(&out)], &flags);
    args.push("--dsbal.beta");
    args.push("0.9");
    let printed = ok(&args);
    assert!(printed.contains(TABLE_CSV) && printed.contains(TABLE_JSON));
    let table: AblationTable = serde_json::from_str(&std::fs::read_to_string(out.join(TABLE_JSON)).unwrap()).unwrap();
    assert_eq!(table.rows.len(), 3);
    assert_eq!(table.rows[0].gamma, 8.0);
    assert_eq!(table.rows[2].label, "no degradation");
    assert!(table.rows.iter().all(|r| r.beta == 0.9 && r.final_total.is_some()));
    let csv = std::fs::read_to_string(out.join(TABLE_CSV)).unwrap();
    assert_eq!(csv.lines().count(), 4);

    let empty = tmp.path().join("empty.yaml");
    std::fs::write(&empty, "variants: []\n").unwrap();
    let (code, _, err) = cli(&with(&["ablate", "--grid", s(&empty)], &flags));
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("no variants"), "{err}");

    let bad = tmp.path().join("bad.yaml");
    std::fs::write(&bad, "variants:\n  - name: x\n    set: {data.pair: elsewhere}\n").unwrap();
    assert_eq!(cli(&with(&["ablate", "--grid", s(&bad)], &flags)).0, EXIT_USAGE);
    assert_eq!(cli(&with(&["ablate", "--preset", "nope"], &flags)).0, EXIT_USAGE);
}
