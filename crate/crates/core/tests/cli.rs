use std::path::Path;
use std::process::{Command, Output};

fn comil(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_comil"))
        .args(args)
        .current_dir(cwd)
        .env_remove("COMIL_THREADS")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &[&str] = &[
    "--classes",
    "4",
    "--bags-per-class",
    "6",
    "--instances-per-bag",
    "8",
    "--seed",
    "7",
];

fn generate_small(dir: &Path, name: &str) {
    let mut args = vec!["generate"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["-o", name]);
    let out = comil(&args, dir);
    assert!(out.status.success(), "{}", stderr(&out));
}

fn write_config(dir: &Path, name: &str, body: &str) {
    std::fs::write(dir.join(name), body).unwrap();
}

#[test]
fn generate_writes_a_reproducible_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = comil(
        &[
            "generate",
            "--classes",
            "8",
            "--bags-per-class",
            "50",
            "--seed",
            "7",
            "-o",
            "data.milds",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(
        String::from_utf8_lossy(&out.stdout).trim(),
        "generated classes=8 bags=400 instances=25600"
    );
    generate_small(dir.path(), "a.milds");
    generate_small(dir.path(), "b.milds");
    let a = std::fs::read(dir.path().join("a.milds")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.milds")).unwrap());
    assert!(a.starts_with(b"MILDS 1 16 4\n"));
}

#[test]
fn generate_usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = comil(&["generate", "--classes", "3"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--output"), "{}", stderr(&out));

    let out = comil(
        &["generate", "-o", "missing_dir/sub/data.milds"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("missing_dir"), "{}", stderr(&out));

    let out = comil(
        &[
            "generate",
            "--class-separation",
            "50",
            "--d-in",
            "1",
            "-o",
            "x.milds",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_documents_the_summary_schema() {
    let dir = tempfile::tempdir().unwrap();
    let out = comil(&["--help"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("method,seed,avg_acc,avg_forget"));
    assert!(text.contains("COMIL_THREADS"));
}

#[test]
fn run_single_seed_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate_small(d, "data.milds");
    write_config(
        d,
        "comil.cfg",
        "dataset=data.milds\nmethod=comil\nK=40\nepochs=3\nlr=0.05\nseeds=1\noutput=runs/comil\n",
    );
    let out = comil(&["run", "comil.cfg"], d);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let summary = std::fs::read_to_string(d.join("runs/comil/summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], "method,seed,avg_acc,avg_forget");
    let row: Vec<&str> = lines[1].split(',').collect();
    let agg: Vec<&str> = lines[2].split(',').collect();
    assert_eq!(agg[1], "mean±std");
    assert_eq!(agg[2], format!("{}±0.000000", row[2]));
    assert_eq!(agg[3], format!("{}±0.000000", row[3]));
    assert!(d.join("runs/comil/report_comil_seed1.txt").exists());

    let out = comil(&["report", "runs/comil", "-o", "one.csv"], d);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 2);
    assert_eq!(
        std::fs::read_to_string(d.join("one.csv"))
            .unwrap()
            .lines()
            .count(),
        2
    );

    write_config(
        d,
        "ft.cfg",
        "dataset=data.milds\nmethod=finetune\nepochs=3\nseeds=1,2\noutput=runs/ft\n",
    );
    let out = comil(&["run", "ft.cfg"], d);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let out = comil(&["report", "runs/comil", "runs/ft"], d);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let table = String::from_utf8_lossy(&out.stdout);
    assert_eq!(table.lines().count(), 3);
    assert!(table.contains("finetune") && table.contains("comil"));
    let csv = std::fs::read_to_string(d.join("comparison.csv")).unwrap();
    assert!(
        csv.starts_with("method,runs,avg_acc_mean,avg_acc_std,avg_forget_mean,avg_forget_std\n")
    );
    assert!(csv.contains("\nfinetune,2,"));
}

#[test]
fn parallel_seeds_match_sequential_output() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate_small(d, "data.milds");
    write_config(
        d,
        "a.cfg",
        "dataset=data.milds\nepochs=2\nK=30\nseeds=1,2,3\noutput=seq\n",
    );
    write_config(
        d,
        "b.cfg",
        "dataset=data.milds\nepochs=2\nK=30\nseeds=1,2,3\noutput=par\n",
    );
    assert!(comil(&["run", "a.cfg"], d).status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_comil"))
        .args(["run", "b.cfg"])
        .current_dir(d)
        .env("COMIL_THREADS", "3")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(
        std::fs::read(d.join("seq/summary.csv")).unwrap(),
        std::fs::read(d.join("par/summary.csv")).unwrap()
    );
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate_small(d, "data.milds");
    write_config(d, "bad.cfg", "dataset=data.milds\noutput=o\nepochs=many\n");
    let out = comil(&["run", "bad.cfg"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("`epochs`"), "{}", stderr(&out));

    write_config(
        d,
        "unknown.cfg",
        "dataset=data.milds\noutput=o\ntemperature=2\n",
    );
    let out = comil(&["run", "unknown.cfg"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("temperature"));

    let out = comil(&["run", "absent.cfg"], d);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_failures_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::create_dir_all(d.join("broken")).unwrap();
    std::fs::write(
        d.join("broken/summary.csv"),
        "method,seed,avg_acc,avg_forget\ncomil,1,oops,0.1\n",
    )
    .unwrap();
    let out = comil(&["report", "broken"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr(&out).contains("broken/summary.csv"),
        "{}",
        stderr(&out)
    );

    std::fs::create_dir_all(d.join("empty")).unwrap();
    let out = comil(&["report", "empty"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("empty"), "{}", stderr(&out));
}
