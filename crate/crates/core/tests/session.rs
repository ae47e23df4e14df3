use splatlink_core::bench::{build_package, run_bench_with, BenchChannel, BenchConfig};
use splatlink_core::codec;
use splatlink_core::motion::{self, Preset};
use splatlink_core::netsim::{Bandwidth, ChannelConfig, TraceSample};
use splatlink_core::package::{fetch_avatar, publish_avatar};
use splatlink_core::receiver::{run_receiver, ReceiverOptions};
use splatlink_core::skinning::RigSpec;

fn small(frames: usize, seed: u64) -> BenchConfig {
    let mut cfg = BenchConfig::new(400, frames, seed);
    cfg.rig = RigSpec::capsule(10);
    cfg.controllers = 50;
    cfg.allow_nonstandard = true;
    cfg
}

#[test]
fn lossy_session_accounts_for_every_frame() {
    let mut cfg = small(240, 3);
    cfg.rate_hz = 60.0;
    let up = ChannelConfig {
        bandwidth: Bandwidth::Trace {
            samples: vec![TraceSample { t_s: 0.0, bps: 4e5 }, TraceSample { t_s: 0.1, bps: 5e3 }, TraceSample { t_s: 0.2, bps: 2e5 }],
        },
        base_delay_ms: 25.0,
        jitter_ms: 8.0,
        loss_rate: 0.1,
        reorder: true,
        seed: 9,
        queue_cap_bytes: Some(300),
    };
    cfg.channel = BenchChannel {
        up,
        down: Some(ChannelConfig::ideal()),
    };
    let dir = tempfile::tempdir().unwrap();
    let pkg = build_package(&cfg).unwrap();
    let mut halves = Vec::new();
    let r = run_bench_with(&cfg, pkg, dir.path(), |f| halves.push(f.half_index)).unwrap();
    let s = &r.session;
    assert_eq!(s.frames_sent, 240);
    assert_eq!(s.frames_sent, s.frames_delivered + s.dropped_loss + s.dropped_queue);
    assert!(s.dropped_loss > 0 && s.dropped_queue > 0);
    assert_eq!(r.conformance.violations, 0);
    let rx = &r.receiver;
    assert_eq!(rx.packets_received, s.frames_delivered);
    assert_eq!(rx.input_frames + rx.dropped_late + rx.dropped_duplicate + rx.decode_errors, rx.packets_received);
    assert_eq!(rx.output_frames, halves.len());
    assert!(halves.windows(2).all(|w| w[0] < w[1]), "output is not in presentation order");
    // an interpolated frame always sits between two rendered inputs
    for &h in halves.iter().filter(|h| *h % 2 == 1) {
        assert!(halves.contains(&(h - 1)) && halves.contains(&(h + 1)));
    }
}

#[test]
fn bench_is_reproducible_and_seed_sensitive() {
    let run = |seed| {
        let cfg = small(60, seed);
        let dir = tempfile::tempdir().unwrap();
        run_bench_with(&cfg, build_package(&cfg).unwrap(), dir.path(), |_| {}).unwrap()
    };
    let (a, b, c) = (run(4), run(4), run(5));
    assert_eq!(a.to_json(), b.to_json());
    assert_ne!(a.frame_digests, c.frame_digests);
    assert_eq!(a.receiver.output_frames, 119);
}

#[test]
fn package_round_trip_drives_the_same_frames() {
    let cfg = small(20, 6);
    let pkg = build_package(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    publish_avatar(dir.path(), "a", &pkg).unwrap();
    let fetched = fetch_avatar(dir.path(), "a").unwrap();
    assert_eq!(fetched.content_hash(), pkg.content_hash());
    let packets: Vec<_> = motion::generate(Preset::Walk, 20, 30.0, 6)
        .unwrap()
        .iter()
        .map(|p| (codec::encode_frame(p).unwrap(), 0))
        .collect();
    let opts = ReceiverOptions::default();
    let a = run_receiver(&packets, pkg, &opts, |_| {}).unwrap();
    let b = run_receiver(&packets, fetched, &opts, |_| {}).unwrap();
    assert_eq!(a.chain_digest, b.chain_digest);
    assert_eq!(a.output_frames, 39);
}
