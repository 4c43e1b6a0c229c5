use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use voxnav::simulator::FloorPlan;

fn voxnav(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxnav")).args(args).env_remove("VOXNAV_THREADS").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = voxnav(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_RIG: [&str; 6] = ["--image-width", "48", "--image-height", "36", "--focal", "30"];

fn small_world(dir: &Path, seed: &str) -> PathBuf {
    let out = dir.join("world");
    ok(&["--seed", seed, "gen-world", "--width", "5", "--depth", "5", "--min-rooms", "2", "--max-rooms", "3", "--out", s(&out)]);
    out.join("plan.json")
}

/// Plan, 12 captured frames and a briefly trained map.
fn small_pipeline(dir: &Path) -> (PathBuf, PathBuf) {
    let plan = small_world(dir, "3");
    let data = dir.join("data");
    let mut args = vec!["--seed", "3", "capture", "--plan", s(&plan), "--count", "12", "--out", s(&data)];
    args.extend(SMALL_RIG);
    ok(&args);
    let learned = dir.join("learned");
    ok(&["--seed", "3", "learn", "--dataset", s(&data), "--plan", s(&plan), "--steps", "20", "--out", s(&learned)]);
    (plan, learned.join("map.vox"))
}

#[test]
fn gen_world_is_deterministic_and_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_world(&dir.path().join("a"), "5");
    let b = small_world(&dir.path().join("b"), "5");
    let c = small_world(&dir.path().join("c"), "6");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    let plan = FloorPlan::load(&a).unwrap();
    assert!(!plan.walls.is_empty());
    assert!(a.parent().unwrap().join("config.json").exists());
}

#[test]
fn exit_codes_separate_failure_classes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("w");
    let bad_spec = voxnav(&["gen-world", "--width", "-1", "--out", s(&out)]);
    assert_eq!(code(&bad_spec), 2, "{}", String::from_utf8_lossy(&bad_spec.stderr));
    assert_eq!(code(&voxnav(&["navigate", "--plan", "/no/such/plan.json", "--map", "/no/such.vox", "--out", s(&out)])), 3);
    assert_eq!(code(&voxnav(&["navigate", "--plan", "p", "--map", "m", "--noise", "medium", "--out", s(&out)])), 2);
    let threads =
        Command::new(env!("CARGO_BIN_EXE_voxnav")).args(["gen-world", "--out", s(&out)]).env("VOXNAV_THREADS", "many").output().unwrap();
    assert_eq!(code(&threads), 2);

    // A plan whose only room is too small for any task is an algorithmic failure.
    let plan = dir.path().join("tiny.json");
    let c = [[0.0, 0.0], [0.15, 0.0], [0.15, 0.15], [0.0, 0.15]];
    let walls: Vec<String> = (0..4)
        .map(|k| {
            format!(
                r#"{{"a":[{},{}],"b":[{},{}],"height":1.0,"rgb":[0.5,0.5,0.5]}}"#,
                c[k][0],
                c[k][1],
                c[(k + 1) % 4][0],
                c[(k + 1) % 4][1]
            )
        })
        .collect();
    fs::write(&plan, format!(r#"{{"body_length":0.2,"bbox":[[0.0,0.0],[0.15,0.15]],"walls":[{}],"obstacles":[]}}"#, walls.join(",")))
        .unwrap();
    FloorPlan::load(&plan).unwrap();
    let cap = voxnav(&["capture", "--plan", s(&plan), "--count", "2", "--out", s(&out)]);
    assert_eq!(code(&cap), 4, "{}", String::from_utf8_lossy(&cap.stderr));
}

#[test]
fn learning_resumes_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let plan = small_world(dir.path(), "2");
    let data = dir.path().join("data");
    let mut args = vec!["--seed", "2", "capture", "--plan", s(&plan), "--count", "8", "--out", s(&data)];
    args.extend(SMALL_RIG);
    ok(&args);
    let learn = |out: &Path, steps: &str, resume: bool| {
        let mut a = vec![
            "--seed",
            "2",
            "learn",
            "--dataset",
            s(&data),
            "--plan",
            s(&plan),
            "--steps",
            steps,
            "--checkpoint-every",
            "4",
            "--out",
            s(out),
        ];
        if resume {
            a.push("--resume");
        }
        ok(&a);
    };
    let straight = dir.path().join("straight");
    learn(&straight, "12", false);
    let split = dir.path().join("split");
    learn(&split, "6", false);
    learn(&split, "12", true);
    assert_eq!(fs::read(straight.join("map.vox")).unwrap(), fs::read(split.join("map.vox")).unwrap());
    let losses = fs::read_to_string(straight.join("loss.csv")).unwrap();
    assert_eq!(losses, fs::read_to_string(split.join("loss.csv")).unwrap());
    let lines: Vec<&str> = losses.lines().collect();
    assert_eq!(lines[0], "step,loss,sigma");
    assert_eq!(lines.len(), 13);
    for (k, l) in lines[1..].iter().enumerate() {
        assert!(l.starts_with(&format!("{k},")), "{l}");
    }
}

#[test]
fn evaluation_commands_write_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    let (plan, map) = small_pipeline(dir.path());

    let nav = dir.path().join("nav");
    let mut args = vec![
        "--seed",
        "4",
        "navigate",
        "--plan",
        s(&plan),
        "--map",
        s(&map),
        "--tasks",
        "3",
        "--method",
        "dynamics",
        "--plots",
        "2",
        "--out",
        s(&nav),
    ];
    args.extend(SMALL_RIG);
    ok(&args);
    let csv = fs::read_to_string(nav.join("navigation.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "env,task,method,noise,success,p_len,l_len,spl_term,loc_rmse,ori_rmse,steps,seconds_per_step");
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 3);
    let mean = rows.iter().map(|r| r[7].parse::<f64>().unwrap()).sum::<f64>() / 3.0;
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(nav.join("summary.json")).unwrap()).unwrap();
    assert!((summary["spl"].as_f64().unwrap() - mean).abs() < 1e-12);
    assert_eq!(fs::read_dir(nav.join("trajectories")).unwrap().count(), 2);

    // Replaying the snapshot reproduces everything but the timings.
    let replay = dir.path().join("replay");
    let mut cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(nav.join("config.json")).unwrap()).unwrap();
    cfg["command"]["navigate"]["out"] = serde_json::Value::String(s(&replay).into());
    let cfg_path = dir.path().join("replay.json");
    fs::write(&cfg_path, cfg.to_string()).unwrap();
    ok(&["--from-config", s(&cfg_path)]);
    let strip = |text: String| -> Vec<String> { text.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect() };
    assert_eq!(strip(csv), strip(fs::read_to_string(replay.join("navigation.csv")).unwrap()));

    let track = dir.path().join("track");
    let mut args = vec![
        "--seed",
        "4",
        "track-eval",
        "--plan",
        s(&plan),
        "--map",
        s(&map),
        "--trajectories",
        "2",
        "--seeds",
        "2",
        "--methods",
        "dynamics,no-map",
        "--out",
        s(&track),
    ];
    args.extend(SMALL_RIG);
    ok(&args);
    for m in ["dynamics", "no-map"] {
        let t = fs::read_to_string(track.join(format!("track_{m}.csv"))).unwrap();
        assert_eq!(t.lines().next().unwrap(), "traj_id,seed,loc_rmse_m,ori_rmse_rad,mean_step_seconds");
        assert_eq!(t.lines().count(), 5);
    }

    let bench = dir.path().join("bench");
    let mut args = vec!["bench", "--plan", s(&plan), "--map", s(&map), "--trials", "3", "--out", s(&bench)];
    args.extend(SMALL_RIG);
    let stdout = ok(&args);
    assert!(stdout.contains("track_step is"), "{stdout}");
    let b = fs::read_to_string(bench.join("bench.csv")).unwrap();
    let lines: Vec<&str> = b.lines().collect();
    assert_eq!(lines[0], "component,trials,mean_seconds,std_seconds");
    assert_eq!(lines.len(), 5);
    assert!(lines[1..].iter().all(|l| l.split(',').nth(1) == Some("3")));
}
