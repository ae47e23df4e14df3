use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn splatlink(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splatlink")).args(args).output().expect("spawn splatlink")
}

fn example(name: &str) -> String {
    let p: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "docs", "examples", name].iter().collect();
    p.to_str().unwrap().to_string()
}

fn report(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn build_send_recv_over_a_pipe_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let repo = format!("{}:arm", d.join("repo").display());
    let (rep, stream) = (d.join("r.json"), d.join("stream.bin"));
    let rep_s = rep.to_str().unwrap();
    ok(&splatlink(&["--seed", "1", "avatar", "build", "--spec", &example("rig-arm.json"), "--gaussians", "300", "--controllers", "20", "--allow-nonstandard", "--out", &repo]));
    ok(&splatlink(&["--virtual-time", "--report", rep_s, "send", "--synthetic", "wave", "--frames", "30", "--rate", "30", "--connect", &format!("pipe:{}", stream.display()), "--avatar", &repo]));
    let sent = report(&rep);
    assert_eq!(sent["frames_sent"], 30);
    ok(&splatlink(&["--virtual-time", "--report", rep_s, "recv", "--avatar", &repo, "--listen", &format!("pipe:{}", stream.display()), "--composite", &example("camera.json")]));
    let got = report(&rep);
    assert_eq!(got["input_frames"], 30);
    assert_eq!(got["output_frames"], 59);
    assert_eq!(got["gaussian_count"], 300);
}

#[test]
fn bench_accepts_documented_channel_files() {
    let dir = tempfile::tempdir().unwrap();
    let rep = dir.path().join("b.json");
    for ch in ["channel-lte.json", "channel-trace.json"] {
        ok(&splatlink(&[
            "--virtual-time",
            "--report",
            rep.to_str().unwrap(),
            "bench",
            "--gaussians",
            "500",
            "--frames",
            "40",
            "--controllers",
            "120",
            "--allow-nonstandard",
            "--rig",
            &example("rig-capsule.json"),
            "--channel",
            &example(ch),
        ]));
        let r = report(&rep);
        assert_eq!(r["session"]["frames_sent"], 40, "{ch}");
    }
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(splatlink(&["bench", "--frames", "x"]).status.code(), Some(2));

    let bad_channel = d.join("bad.json");
    std::fs::write(&bad_channel, r#"{"bandwidth":{"kind":"constant","bps":1e6},"lossrate":0.1}"#).unwrap();
    let out = splatlink(&["--virtual-time", "bench", "--frames", "10", "--gaussians", "200", "--channel", bad_channel.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let missing = format!("{}:nothing", d.join("repo").display());
    assert_eq!(splatlink(&["avatar", "inspect", "--avatar", &missing]).status.code(), Some(3));

    let repo = format!("{}:g", d.join("repo").display());
    ok(&splatlink(&["avatar", "build", "--spec", &example("rig-arm.json"), "--gaussians", "100", "--controllers", "10", "--allow-nonstandard", "--out", &repo]));
    let garbage = d.join("garbage.bin");
    std::fs::write(&garbage, b"NOPE-this-is-not-a-packet-stream-at-all").unwrap();
    let out = splatlink(&["--virtual-time", "recv", "--avatar", &repo, "--listen", &format!("pipe:{}", garbage.display())]);
    assert_eq!(out.status.code(), Some(4), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}
