use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIGS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs");

fn qbit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qbit"))
        .args(args)
        .env_remove("QBIT_DATA_DIR")
        .output()
        .expect("run qbit")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Writes an MNIST-style directory of 8x8 digits: class `c` lights up
/// the `c`-th cell of a coarse grid, plus deterministic noise.
fn write_idx(dir: &Path, side: usize, train: usize, test: usize) {
    std::fs::create_dir_all(dir).unwrap();
    let mut state = 12345u32;
    let mut noise = move || {
        state = state.wrapping_mul(1664525).wrapping_add(1013904223);
        (state >> 24) as u8 / 4
    };
    for (prefix, n) in [("train", train), ("t10k", test)] {
        let mut img = vec![0, 0, 8, 3];
        for v in [n, side, side] {
            img.extend_from_slice(&(v as u32).to_be_bytes());
        }
        let mut lab = vec![0, 0, 8, 1];
        lab.extend_from_slice(&(n as u32).to_be_bytes());
        for i in 0..n {
            let c = i % 10;
            let (cy, cx) = (c / 4 * 2, c % 4 * 2);
            for y in 0..side {
                for x in 0..side {
                    let on = y / 2 == cy / 2 && x / 2 == cx / 2;
                    img.push(if on { 200 + noise() / 2 } else { noise() });
                }
            }
            lab.push(c as u8);
        }
        std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), img).unwrap();
        std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), lab).unwrap();
    }
}

fn write_config(dir: &Path, data: &Path, extra_train: &str) -> PathBuf {
    let text = format!(
        "[network]\nname = tiny\ninput = 1x8x8\nclasses = 10\n\n[layers]\nc1 = conv 4 k=3 p=1\nb1 = bn\na1 = clamp\n\
         p1 = maxpool 2\nfc2 = linear 16\nb2 = bn\na2 = clamp\nfc3 = linear 10 bias\n\n[schedule]\nweights = 2-1\n\
         activations = 2\n\n[train]\nlr = 0.05\nbatch_size = 32\nepochs = 1\nseed = 3\nmilestones = 5\n{extra_train}\n\
         [data]\nkind = mnist\nroot = {}\nval_fraction = 1/10\n",
        data.display()
    );
    let path = dir.join("tiny.cfg");
    std::fs::write(&path, text).unwrap();
    path
}

fn accuracy_line(out: &str) -> String {
    out.lines()
        .find(|l| l.starts_with("test accuracy"))
        .unwrap_or_else(|| panic!("no accuracy in {out}"))
        .to_string()
}

#[test]
fn train_writes_log_and_loadable_model() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_idx(&data, 8, 400, 100);
    let cfg = write_config(tmp.path(), &data, "");
    let run = tmp.path().join("run");
    let o = qbit(&["train", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = std::fs::read_to_string(run.join("metrics.tsv")).unwrap();
    assert_eq!(log.lines().count(), 1);
    assert_eq!(log.lines().next().unwrap().split('\t').count(), 5);
    let logged = accuracy_line(&stdout(&o));

    let e = qbit(&["eval", "--model", run.join("model.qbm").to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert!(e.status.success(), "{}", stderr(&e));
    assert_eq!(accuracy_line(&stdout(&e)), logged);

    let packed = tmp.path().join("repacked.qbm");
    let p = qbit(&["pack", "--model", run.join("checkpoint.qbc").to_str().unwrap(), "--out", packed.to_str().unwrap()]);
    assert!(p.status.success(), "{}", stderr(&p));
    assert_eq!(std::fs::read(&packed).unwrap(), std::fs::read(run.join("model.qbm")).unwrap());
}

#[test]
fn fixed_seed_gives_identical_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_idx(&data, 8, 300, 50);
    let cfg = write_config(tmp.path(), &data, "");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("epochs = 1", "epochs = 2");
    std::fs::write(&cfg, text).unwrap();
    let cfg = cfg.to_str().unwrap();
    let logs: Vec<String> = ["a", "b"]
        .iter()
        .map(|d| {
            let out = tmp.path().join(d);
            let o = qbit(&["train", "--config", cfg, "--seed", "9", "--out", out.to_str().unwrap()]);
            assert!(o.status.success(), "{}", stderr(&o));
            std::fs::read_to_string(out.join("metrics.tsv")).unwrap()
        })
        .collect();
    assert_eq!(logs[0].lines().count(), 2);
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn config_errors_exit_3_naming_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), Path::new("/nonexistent"), "milestones = 4,2\n");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("milestones = 5\n", "");
    std::fs::write(&cfg, text).unwrap();
    let o = qbit(&["train", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("train.milestones"), "{}", stderr(&o));
}

#[test]
fn missing_dataset_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tmp.path().join("absent"), "");
    let o = qbit(&["train", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("absent"));
}

#[test]
fn corrupted_dataset_header_exits_2_with_offset() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_idx(&data, 8, 20, 10);
    let path = data.join("train-images-idx3-ubyte");
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[3] = 0x99;
    std::fs::write(&path, bytes).unwrap();
    let cfg = write_config(tmp.path(), &data, "");
    let o = qbit(&["train", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("at byte 0"), "{}", stderr(&o));
}

#[test]
fn eval_rejects_wrong_shape_bad_files_and_empty_sets() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_idx(&data, 8, 200, 20);
    let cfg = write_config(tmp.path(), &data, "");
    let run = tmp.path().join("run");
    assert!(qbit(&["train", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()]).status.success());
    let model = run.join("model.qbm");
    let model = model.to_str().unwrap();

    let other = tmp.path().join("other");
    write_idx(&other, 6, 10, 10);
    let o = qbit(&["eval", "--model", model, "--data", other.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));

    let empty = tmp.path().join("empty");
    write_idx(&empty, 8, 10, 0);
    let o = qbit(&["eval", "--model", model, "--data", empty.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!stdout(&o).contains("accuracy"));

    let junk = tmp.path().join("junk.qbm");
    std::fs::write(&junk, b"QBM1\x00\x01").unwrap();
    let o = qbit(&["eval", "--model", junk.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("junk.qbm"));
}

#[test]
fn size_report_averages_match_presets() {
    for (arch, sched, avg) in [
        ("vgg7.arch", "8-4-2-1-1-1/1", "1.06"),
        ("resnet20.arch", "4-2-1", "1.34"),
        ("resnet18.arch", "8-4-2-1", "1.42"),
        ("alexnet.arch", "8-4-2-1/1-1", "1.10"),
    ] {
        let arch = format!("{CONFIGS}/{arch}");
        let o = qbit(&["size-report", "--arch", &arch, "--schedule", sched, "--baseline", "2"]);
        assert!(o.status.success(), "{}", stderr(&o));
        let out = stdout(&o);
        let line = out.lines().find(|l| l.starts_with("average bitwidth")).unwrap();
        assert!(line.contains(&format!(" {avg} (")), "{arch}: {line}");
        let again = qbit(&["size-report", "--arch", &arch, "--schedule", sched, "--baseline", "2"]);
        assert_eq!(again.stdout, o.stdout);
    }
}

#[test]
fn size_report_grammar_errors_exit_3() {
    let arch = format!("{CONFIGS}/vgg7.arch");
    for bad in ["8-x-2", "8-4-2-1-1-1/1/1", ""] {
        let o = qbit(&["size-report", "--arch", &arch, "--schedule", bad, "--baseline", "2"]);
        assert_eq!(o.status.code(), Some(3), "{bad}: {}", stderr(&o));
        assert!(stderr(&o).contains("--schedule"));
    }
}
