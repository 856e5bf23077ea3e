use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cgperf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cgperf")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = cgperf(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        ok(&["gen-data", "--space", "mbv3-like", "--n", "8", "--seed", "1", "--out", s(d.path())]);
    }
    let fa = fs::read(a.path().join("graphs-mbv3-like.jsonl")).unwrap();
    let fb = fs::read(b.path().join("graphs-mbv3-like.jsonl")).unwrap();
    assert_eq!(fa, fb);
    assert!(String::from_utf8(fa).unwrap().lines().next().unwrap().contains("config_hash"));
}

#[test]
fn inspect_reports_graph_core_flops() {
    let d = tempfile::tempdir().unwrap();
    ok(&["gen-data", "--space", "pn-like", "--n", "3", "--out", s(d.path())]);
    let file = d.path().join("graphs-pn-like.jsonl");
    let out = ok(&["inspect", "--graphs", s(&file), "--index", "2"]);
    let row: Vec<&str> = out.lines().nth(1).unwrap().split('\t').collect();
    let (_, graphs) = cgperf::dataset::read_graphs(&fs::read_to_string(&file).unwrap()).unwrap();
    let g = &graphs[2];
    assert_eq!(row[0], g.meta.name);
    assert_eq!(row[1].parse::<usize>().unwrap(), g.node_count());
    assert_eq!(row[4].parse::<f64>().unwrap(), cgperf::graph::flops(g).unwrap());
}

#[test]
fn small_pipeline_runs_and_reproduces() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("exp.toml");
    fs::write(
        &cfg,
        "seed = 4\n\
         [[tasks]]\ntag = \"a\"\nseed = 1\n\
         [[tasks]]\ntag = \"b\"\nseed = 2\n\
         [train.backbone]\nepochs = 1\nlr = 0.001\nbatch_size = 8\nseed = 0\n\
         [train.adapter]\nepochs = 1\nlr = 0.001\nbatch_size = 8\nseed = 0\n\
         [train.finetune]\nepochs = 1\nlr = 0.001\nbatch_size = 4\nseed = 0\n\
         [pseudo.head]\nsteps = 5\n\
         [pseudo.finetune]\nepochs = 1\ntrain_images = 8\neval_images = 16\n\
         [eval]\nseeds = 2\nsamples = 5\n",
    )
    .unwrap();
    let run = |out: &Path| {
        let c = |args: &[&str]| {
            let mut v = vec!["--config", s(&cfg), "--out", s(out)];
            v.extend_from_slice(args);
            ok(&v)
        };
        c(&["gen-data", "--space", "mbv3-like", "--n", "12"]);
        let graphs = out.join("graphs-mbv3-like.jsonl");
        c(&["pseudo-label", "--graphs", s(&graphs), "--task", "a"]);
        c(&["pseudo-label", "--graphs", s(&graphs), "--task", "b", "--ground-truth"]);
        c(&["train-backbone", "--data", s(&out.join("labeled-a-pseudo.jsonl"))]);
        let ckpt = out.join("predictor.ckpt");
        c(&["train-adapter", "--checkpoint", s(&ckpt), "--data", s(&out.join("labeled-a-pseudo.jsonl"))]);
        let table = c(&["eval", "--checkpoint", s(&ckpt), "--data", s(&out.join("labeled-b-ground-truth.jsonl"))]);
        assert!(table.contains("zero-shot") && table.contains('±'), "{table}");
        c(&["finetune-eval", "--checkpoint", s(&ckpt), "--data", s(&out.join("labeled-b-ground-truth.jsonl"))]);
        let line = c(&["search", "--checkpoint", s(&ckpt), "--graphs", s(&graphs), "--task", "a", "--budget", "50"]);
        assert!(line.contains("evaluations"), "{line}");
    };
    let a = d.path().join("a");
    let b = d.path().join("b");
    run(&a);
    run(&b);
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 9, "{names:?}");
    for n in &names {
        let text = fs::read_to_string(a.join(n)).unwrap_or_default();
        if !n.to_str().unwrap().ends_with(".ckpt") {
            assert!(text.lines().next().unwrap().contains("config_hash"), "{n:?}");
        }
    }
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(cgperf(&["gen-data", "--spaec", "x"]).status.code(), Some(2));
    assert_eq!(cgperf(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn bad_config_exits_one_with_locus() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("bad.toml");
    fs::write(&cfg, "[[tasks]]\ntag = \"a\"\nspace = \"nope\"\n").unwrap();
    let o = cgperf(&["--config", s(&cfg), "gen-data", "--space", "mbv3-like"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("tasks[0].space"));
}
