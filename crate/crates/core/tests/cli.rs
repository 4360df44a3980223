use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mole(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mole"));
    c.args(args)
        .env_remove("MOLE_SEED")
        .env_remove("MOLE_THREADS");
    for (k, v) in envs {
        c.env(k, v);
    }
    c.output().expect("run mole binary")
}

fn ok(args: &[&str], envs: &[(&str, &str)]) -> String {
    let out = mole(args, envs);
    assert!(
        out.status.success(),
        "mole {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SPEC: &str = "train_frames = 800\ndev_utterances = 5\ntest_utterances = 10\n";
const CONFIG: &str = r#"
kind = "mole"
num_blocks = 2
expert_positions = [2]
d_model = 8
d_ff = 16
gate_hidden = 4

[train]
steps = 8
batch_size = 4
"#;

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("spec.toml"), SPEC).unwrap();
    fs::write(d.join("mole.toml"), CONFIG).unwrap();
    let corpus = d.join("corpus");
    let out = ok(
        &[
            "gen-corpus",
            "--spec",
            p(&d.join("spec.toml")),
            "--out",
            p(&corpus),
        ],
        &[],
    );
    assert!(out.contains("sha256"));
    assert!(corpus.join("manifest.toml").exists());

    let ckpt = d.join("m.ckpt");
    ok(
        &[
            "train",
            "--config",
            p(&d.join("mole.toml")),
            "--corpus",
            p(&corpus),
            "--out",
            p(&ckpt),
        ],
        &[],
    );
    assert!(ckpt.exists());
    let log = fs::read_to_string(d.join("m.ckpt.log.tsv")).unwrap();
    assert_eq!(
        log.lines()
            .filter(|l| !l.starts_with("eval") && !l.starts_with("step"))
            .count(),
        8
    );

    let table = ok(
        &[
            "eval",
            "--ckpt",
            p(&ckpt),
            "--corpus",
            p(&corpus),
            "--split",
            "test",
        ],
        &[],
    );
    assert!(table.contains("OVR"));
    let csv = ok(
        &[
            "eval",
            "--ckpt",
            p(&ckpt),
            "--corpus",
            p(&corpus),
            "--split",
            "test",
            "--report",
            "csv",
        ],
        &[("MOLE_THREADS", "3")],
    );
    assert!(csv.starts_with("language,utterances,errors,reference_chars,cer"));

    let routes = d.join("routes.csv");
    let out = ok(
        &[
            "route-inspect",
            "--ckpt",
            p(&ckpt),
            "--corpus",
            p(&corpus),
            "--out",
            p(&routes),
        ],
        &[],
    );
    assert!(out.contains("language id accuracy"));
    let routes = fs::read_to_string(routes).unwrap();
    assert!(routes.starts_with("layer,utterance_id,language,selected,gamma,posterior"));
    assert_eq!(routes.lines().count(), 1 + 5 * 10);

    let abl = d.join("ablation.csv");
    let cfg = CONFIG.replace("steps = 8", "steps = 2");
    fs::write(d.join("abl.toml"), cfg).unwrap();
    ok(
        &[
            "ablate",
            "--config",
            p(&d.join("abl.toml")),
            "--corpus",
            p(&corpus),
            "--out",
            p(&abl),
        ],
        &[],
    );
    assert_eq!(fs::read_to_string(abl).unwrap().lines().count(), 8);
}

#[test]
fn seed_variable_overrides_the_spec() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("spec.toml"), SPEC).unwrap();
    let hash = |name: &str, envs: &[(&str, &str)]| {
        let out = ok(
            &[
                "gen-corpus",
                "--spec",
                p(&d.join("spec.toml")),
                "--out",
                p(&d.join(name)),
            ],
            envs,
        );
        out.lines()
            .find(|l| l.starts_with("sha256"))
            .unwrap()
            .to_string()
    };
    let a = hash("a", &[]);
    let b = hash("b", &[]);
    let c = hash("c", &[("MOLE_SEED", "99")]);
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn gradcheck_single_module() {
    let out = ok(&["gradcheck", "--module", "ctc"], &[]);
    assert!(out.contains("ctc") && out.contains("PASS"));
    let bad = mole(&["gradcheck", "--module", "nope"], &[]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("unknown gradcheck module"));
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = mole(
        &[
            "eval",
            "--ckpt",
            p(&dir.path().join("missing.ckpt")),
            "--corpus",
            p(dir.path()),
        ],
        &[],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    fs::write(
        dir.path().join("bad.toml"),
        "kind = \"tfm\"\nexpert_positions = [1]\n",
    )
    .unwrap();
    let out = mole(
        &[
            "train",
            "--config",
            p(&dir.path().join("bad.toml")),
            "--corpus",
            p(dir.path()),
            "--out",
            "x",
        ],
        &[],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid configuration"));
}
