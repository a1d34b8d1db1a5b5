use std::collections::BTreeMap;
use std::io::BufReader;
use std::net::TcpStream;
use std::time::Duration;

use cavsim_core::client::{run_client, ClientOptions};
use cavsim_core::config::{parse_scenario, ScenarioConfig};
use cavsim_core::manager::events::{check_lockstep, EventKind};
use cavsim_core::manager::{bind, run_scenario, write_run_dir, Placement, RunOptions, RunOutcome, RunStatus};
use cavsim_core::metrics::load_run;
use cavsim_core::protocol::{Body, ClientKind, Envelope, FrameReader, FrameWriter, Register};

const SCENARIO: &str = r#"
world:
  seed: 3
  max_ticks: 60
  barrier_timeout_s: 10
edge_base:
  algorithm: clustered_astar
  target_speed: 60
network:
  model: constant
  latency_ms: 51
base: &base
  behavior:
    max_speed: 100
    overtake_allowed: true
vehicles:
  - <<: *base
    spawn_position: [30.0, 1.75, 0, 0, 0, 0]
  - <<: *base
    spawn_position: [20.0, 1.75, 0, 0, 0, 0]
  - <<: *base
    spawn_position: [25.0, 5.25, 0, 0, 0, 0]
"#;

fn scenario() -> ScenarioConfig {
    parse_scenario(SCENARIO).unwrap()
}

fn sequential(config: ScenarioConfig) -> RunOutcome {
    run_scenario(config, RunOptions::default()).unwrap()
}

fn traffic_csv(outcome: &RunOutcome) -> Vec<u8> {
    let dir = tempfile::tempdir().unwrap();
    write_run_dir(outcome, SCENARIO, dir.path()).unwrap();
    std::fs::read(dir.path().join("traffic.csv")).unwrap()
}

#[test]
fn sequential_run_keeps_lockstep_and_row_counts() {
    let out = sequential(scenario());
    assert_eq!(out.status, RunStatus::Complete, "{:?}", out.bundle.notes);
    assert!(check_lockstep(&out.events).is_empty());
    let s = &out.summary;
    assert_eq!(s.ticks, 60);
    assert_eq!(s.traffic_rows, 3 * 60);
    assert_eq!(out.bundle.timings.len(), 3 * 60);
    assert_eq!(s.safety.collisions, 0);

    let mut done: BTreeMap<(u64, u32), u32> = BTreeMap::new();
    for e in out.events.iter().filter(|e| e.event == EventKind::ClientDone) {
        *done.entry((e.tick, e.peer.unwrap())).or_default() += 1;
    }
    assert_eq!(done.len(), 3 * 60);
    assert!(done.values().all(|n| *n == 1));
    let ends = out.events.iter().filter(|e| e.event == EventKind::EndCmd).count();
    assert_eq!(ends, 1);

    for inv in &out.bundle.edge.invocations {
        if let Some(d) = inv.min_delivery_tick {
            assert!(d > inv.generation_tick);
        }
        assert_eq!(inv.cluster_sizes.iter().sum::<usize>(), inv.n_vehicles);
    }
}

#[test]
fn summary_matches_csv_recomputation() {
    let out = sequential(scenario());
    let dir = tempfile::tempdir().unwrap();
    write_run_dir(&out, SCENARIO, dir.path()).unwrap();

    let mut rdr = csv::Reader::from_path(dir.path().join("traffic.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (iv, idev, itick) = (col("v"), col("deviation"), col("tick"));
    let mut v_sum = 0.0;
    let mut dev_sum = 0.0;
    let mut rows = 0usize;
    let mut per_tick: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let v: f64 = rec[iv].parse().unwrap();
        let dev: f64 = rec[idev].parse().unwrap();
        let t: u64 = rec[itick].parse().unwrap();
        v_sum += v;
        dev_sum += dev;
        rows += 1;
        let e = per_tick.entry(t).or_default();
        e.0 += dev;
        e.1 += 1;
    }
    let s = &out.summary;
    assert_eq!(rows, s.traffic_rows);
    assert!((v_sum / rows as f64 - s.mean_velocity_mps).abs() < 1e-9);
    assert!((dev_sum / rows as f64 - s.mean_deviation_mps).abs() < 1e-9);
    let band = per_tick
        .iter()
        .find(|(_, (d, n))| d / *n as f64 <= 0.5)
        .map(|(t, _)| *t as f64 * 0.05);
    assert_eq!(band.is_some(), s.time_to_band_s.is_some());
    if let (Some(a), Some(b)) = (band, s.time_to_band_s) {
        assert!((a - b).abs() < 1e-9);
    }

    let loaded = load_run(dir.path()).unwrap();
    assert_eq!(loaded.summary.mean_velocity_mps, s.mean_velocity_mps);
    assert_eq!(loaded.traffic.len(), rows);
}

#[test]
fn zero_ticks_ends_immediately() {
    let mut cfg = scenario();
    cfg.world.max_ticks = 0;
    let out = sequential(cfg);
    assert_eq!(out.status, RunStatus::Complete);
    assert_eq!(out.summary.ticks, 0);
    assert_eq!(out.summary.traffic_rows, 0);
    assert!(out.events.iter().any(|e| e.event == EventKind::EndCmd));
    assert!(!out.events.iter().any(|e| e.event == EventKind::TickCmd));
}

#[test]
fn same_seed_same_trajectories() {
    assert_eq!(traffic_csv(&sequential(scenario())), traffic_csv(&sequential(scenario())));
}

fn remote_run(config: ScenarioConfig, opts: RunOptions, client: impl Fn(String, u32) + Send + Sync + 'static) -> RunOutcome {
    let n = config.vehicles.len() as u32;
    let bound = bind(
        config,
        RunOptions {
            placement: Placement::Remote,
            port: Some(0),
            ..opts
        },
    )
    .unwrap();
    let addr = bound.local_addr().unwrap().to_string();
    let client = std::sync::Arc::new(client);
    let handles: Vec<_> = (0..n)
        .map(|i| {
            let (addr, client) = (addr.clone(), client.clone());
            std::thread::spawn(move || client(addr, i))
        })
        .collect();
    let out = bound.run().unwrap();
    for h in handles {
        h.join().unwrap();
    }
    out
}

fn tcp_client(addr: String, index: u32) {
    run_client(&ClientOptions {
        manager: addr,
        vehicle_index: index,
        connect_timeout: Duration::from_secs(10),
    })
    .unwrap();
}

#[test]
fn tcp_clients_match_sequential_run() {
    let remote = remote_run(scenario(), RunOptions::default(), tcp_client);
    assert_eq!(remote.status, RunStatus::Complete, "{:?}", remote.bundle.notes);
    assert!(check_lockstep(&remote.events).is_empty());
    assert_eq!(traffic_csv(&remote), traffic_csv(&sequential(scenario())));
    let r = &remote.summary;
    let s = sequential(scenario()).summary;
    assert_eq!(r.mean_velocity_mps, s.mean_velocity_mps);
    assert_eq!(r.counters, s.counters);
    assert_eq!(r.safety, s.safety);
}

/// Registers as vehicle 2, then hangs up on the first tick command.
fn quitter(addr: String, index: u32) {
    if index != 2 {
        // The others may be cut off when the run aborts.
        let _ = run_client(&ClientOptions {
            manager: addr,
            vehicle_index: index,
            connect_timeout: Duration::from_secs(10),
        });
        return;
    }
    let stream = TcpStream::connect(addr).unwrap();
    let mut reader = FrameReader::new(BufReader::new(stream.try_clone().unwrap()));
    let mut writer = FrameWriter::new(stream);
    writer
        .send(&Envelope::new(
            0,
            0,
            Body::Register(Register {
                client_kind: ClientKind::Vehicle,
                requested_vehicle_index: 2,
            }),
        ))
        .unwrap();
    while let Ok(Some(frame)) = reader.read_frame() {
        if matches!(frame.body, Body::TickCmd(_)) {
            return;
        }
    }
}

#[test]
fn dropout_aborts_by_default() {
    let out = remote_run(scenario(), RunOptions::default(), quitter);
    assert_eq!(out.status, RunStatus::Partial);
    assert!(out.summary.ticks < 60);
    assert!(out.events.iter().any(|e| e.event == EventKind::Disconnect && e.peer == Some(2)));
    assert!(check_lockstep(&out.events).is_empty());
}

#[test]
fn dropout_can_be_tolerated() {
    let opts = RunOptions {
        continue_on_dropout: true,
        ..RunOptions::default()
    };
    let out = remote_run(scenario(), opts, quitter);
    assert_eq!(out.summary.ticks, 60, "{:?}", out.bundle.notes);
    assert!(check_lockstep(&out.events).is_empty());
    // Vehicle 2's log never arrives, so the run is flagged.
    assert_eq!(out.status, RunStatus::Partial);
}

#[test]
fn ideal_and_synchronous_edge_modes_run() {
    for (ideal, sync) in [(true, false), (false, true), (true, true)] {
        let out = run_scenario(
            scenario(),
            RunOptions {
                ideal_edge: ideal,
                sync_edge: sync,
                ..RunOptions::default()
            },
        )
        .unwrap();
        assert_eq!(out.status, RunStatus::Complete);
        assert!(out.summary.counters.edge_ticks > 0);
        if ideal {
            for inv in &out.bundle.edge.invocations {
                if let Some(d) = inv.max_delivery_tick {
                    assert_eq!(d, inv.generation_tick + 1);
                }
            }
        }
    }
}
