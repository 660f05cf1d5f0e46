//! Thin command-line front end over the library: deterministic scenario
//! runs, a socket server and client for distributed operation, and
//! snapshot / trajectory-error utilities.

use std::collections::BTreeMap;
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use collab_slam::channel::{RecvEvent, ReliableEndpoint, TcpTransport, DEFAULT_RESEND_WINDOW};
use collab_slam::client::{Client, ClientConfig};
use collab_slam::config::{self, ScenarioConfig};
use collab_slam::eval::{
    check_assertions, load_snapshot, map_digest, per_map_ate, render_plot_data,
    render_text_report, run_scenario_with_watchdog, save_snapshot,
};
use collab_slam::geom::Pose;
use collab_slam::server::{Server, ServerConfig};
use collab_slam::simworld::{generate_world, observe};

#[derive(Parser)]
#[command(name = "collab-slam", about = "Collaborative visual SLAM simulator and tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TransportKind {
    Inproc,
    Socket,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full scenario and evaluate its assertions.
    Run {
        /// Scenario TOML; mutually exclusive with --preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Built-in scenario: two-robot-merge, rigid-dual-camera,
        /// eight-client-stress, monocular-join, lossy-link.
        #[arg(long)]
        preset: Option<String>,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Fails the run if any nondeterminism is detected (the scenario
        /// is executed twice and digests compared).
        #[arg(long, default_value_t = false)]
        deterministic: bool,
        #[arg(long, value_enum, default_value_t = TransportKind::Inproc)]
        transport: TransportKind,
        /// Directory for report.txt, plot.tsv, and snapshot.bin.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Wall-clock budget in seconds.
        #[arg(long, default_value_t = 600.0)]
        watchdog: f64,
    },
    /// Accept socket clients and maintain the global map database.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7117")]
        addr: String,
        /// Exit after this many seconds without traffic.
        #[arg(long, default_value_t = 10.0)]
        idle_exit: f64,
    },
    /// Drive one scenario camera against a socket server.
    Client {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        client_id: u32,
        #[arg(long, default_value = "127.0.0.1:7117")]
        addr: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Load a snapshot, audit it, and print a summary.
    ReplaySnapshot {
        #[arg(long)]
        snapshot: PathBuf,
    },
    /// Absolute trajectory error of a snapshot against the ground truth
    /// regenerated from the scenario config.
    Ate {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Per-map contents of a snapshot.
    InspectSnapshot {
        #[arg(long)]
        snapshot: PathBuf,
    },
}

fn preset_by_name(name: &str, seed: u64) -> Option<ScenarioConfig> {
    match name {
        "two-robot-merge" => Some(config::two_robot_merge(seed)),
        "rigid-dual-camera" => Some(config::rigid_dual_camera(seed)),
        "eight-client-stress" => Some(config::eight_client_stress(seed)),
        "monocular-join" => Some(config::monocular_join(seed)),
        "lossy-link" => Some(config::lossy_link(seed, 0.1)),
        _ => None,
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(ok) => {
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<bool, Box<dyn std::error::Error>> {
    match cli.command {
        Command::Run { config, preset, seed, deterministic, transport, out_dir, watchdog } => {
            if transport == TransportKind::Socket {
                return Err("socket transport is handled by the serve/client subcommands".into());
            }
            let mut cfg = match (config, preset) {
                (Some(path), None) => ScenarioConfig::load(&path)?,
                (None, Some(name)) => preset_by_name(&name, seed.unwrap_or(1))
                    .ok_or_else(|| format!("unknown preset {name}"))?,
                _ => return Err("pass exactly one of --config or --preset".into()),
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let outcome = run_scenario_with_watchdog(&cfg, watchdog)?;
            if deterministic {
                let second = run_scenario_with_watchdog(&cfg, watchdog)?;
                if second.report.digest != outcome.report.digest {
                    eprintln!("nondeterministic run: digests differ");
                    return Ok(false);
                }
            }
            let report = &outcome.report;
            print!("{}", render_text_report(report));
            if let Some(dir) = out_dir {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("report.txt"), render_text_report(report))?;
                std::fs::write(dir.join("plot.tsv"), render_plot_data(report))?;
                save_snapshot(&dir.join("snapshot.bin"), outcome.server.maps())?;
            }
            let checks = check_assertions(report, &cfg.assertions);
            let mut all_ok = true;
            for (desc, ok) in &checks {
                println!("[{}] {desc}", if *ok { "PASS" } else { "FAIL" });
                all_ok &= ok;
            }
            Ok(all_ok)
        }
        Command::Serve { addr, idle_exit } => {
            serve(&addr, idle_exit)?;
            Ok(true)
        }
        Command::Client { config, client_id, addr, seed } => {
            let mut cfg = ScenarioConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            socket_client(&cfg, client_id, &addr)?;
            Ok(true)
        }
        Command::ReplaySnapshot { snapshot } => {
            let maps = load_snapshot(&snapshot)?;
            let mut ok = true;
            for (id, map) in &maps {
                match map.audit() {
                    Ok(()) => println!(
                        "map {id}: {} keyframes, {} landmarks, audit ok",
                        map.keyframes.len(),
                        map.landmarks.len()
                    ),
                    Err(e) => {
                        println!("map {id}: audit FAILED: {e}");
                        ok = false;
                    }
                }
            }
            println!("digest: {:016x}", map_digest(&maps));
            Ok(ok)
        }
        Command::Ate { snapshot, config, seed } => {
            let mut cfg = ScenarioConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let maps = load_snapshot(&snapshot)?;
            let truth = regenerate_truth(&cfg);
            // Borrow the per-map ATE helper through a throwaway server
            // shell so the computation stays in one place.
            let mut server = Server::new(ServerConfig::default());
            server.adopt_maps(maps);
            let ates = per_map_ate(&server, &truth);
            if ates.is_empty() {
                println!("no maps with enough associations");
                return Ok(false);
            }
            for a in &ates {
                println!(
                    "map {}: {} keyframes, ATE {:.4} m (scaled {:.4} m, scale {:.4})",
                    a.map_id, a.keyframes, a.rmse, a.rmse_scaled, a.scale
                );
            }
            Ok(true)
        }
        Command::InspectSnapshot { snapshot } => {
            let maps = load_snapshot(&snapshot)?;
            for (id, map) in &maps {
                println!("map {id}");
                let mut sessions: BTreeMap<(u32, u32), usize> = BTreeMap::new();
                for kf in map.keyframes.values() {
                    *sessions.entry((kf.id.client_id, kf.id.session_id)).or_default() += 1;
                }
                for ((c, s), n) in sessions {
                    println!("  client {c} session {s}: {n} keyframes");
                }
                println!("  landmarks: {}", map.landmarks.len());
            }
            Ok(true)
        }
    }
}

/// True camera trajectories implied by the scenario config.
fn regenerate_truth(cfg: &ScenarioConfig) -> BTreeMap<u32, Vec<(f64, Pose)>> {
    let mut truth = BTreeMap::new();
    for robot in &cfg.robots {
        for cam in &robot.cameras {
            let tr = &robot.trajectory;
            let mut track = Vec::new();
            let mut k = 0u64;
            loop {
                let t = tr.start_offset + k as f64 / tr.sample_rate_hz;
                if t > cfg.duration {
                    break;
                }
                track.push((t, tr.base_pose_at(t - tr.start_offset).compose(&cam.mount.base_from_cam())));
                k += 1;
            }
            truth.insert(cam.client_id, track);
        }
    }
    truth
}

fn serve(addr: &str, idle_exit: f64) -> std::io::Result<()> {
    let listener = TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    println!("listening on {addr}");
    let mut server = Server::new(ServerConfig::default());
    let mut endpoints: Vec<ReliableEndpoint> = Vec::new();
    let mut owners: Vec<Option<u32>> = Vec::new();
    let started = Instant::now();
    let mut last_traffic = Instant::now();
    loop {
        match listener.accept() {
            Ok((stream, peer)) => {
                println!("client connected from {peer}");
                stream.set_nodelay(true).ok();
                endpoints.push(ReliableEndpoint::new(
                    Box::new(TcpTransport::new(stream)?),
                    DEFAULT_RESEND_WINDOW,
                ));
                owners.push(None);
                last_traffic = Instant::now();
            }
            Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {}
            Err(e) => return Err(e),
        }
        let now = started.elapsed().as_secs_f64();
        let mut outgoing = Vec::new();
        for (i, ep) in endpoints.iter_mut().enumerate() {
            for ev in ep.poll(now) {
                if let RecvEvent::Message(m) = ev {
                    last_traffic = Instant::now();
                    owners[i] = Some(m.client_id);
                    match server.handle_message(&m, now) {
                        Ok(out) => outgoing.extend(out),
                        Err(e) => eprintln!("rejected message: {e}"),
                    }
                }
            }
        }
        for o in outgoing {
            if let Some(i) = owners.iter().position(|c| *c == Some(o.client_id)) {
                let _ = endpoints[i].send(o.message, now);
            }
        }
        if last_traffic.elapsed().as_secs_f64() > idle_exit {
            break;
        }
        std::thread::sleep(std::time::Duration::from_millis(2));
    }
    println!("idle, shutting down: {} maps", server.map_count());
    for (id, map) in server.maps() {
        println!("map {id}: {} keyframes, {} landmarks", map.keyframes.len(), map.landmarks.len());
    }
    Ok(())
}

fn socket_client(
    cfg: &ScenarioConfig,
    client_id: u32,
    addr: &str,
) -> Result<(), Box<dyn std::error::Error>> {
    use rand_chacha::rand_core::SeedableRng;
    let (robot, cam) = cfg
        .camera(client_id)
        .ok_or_else(|| format!("client {client_id} not in scenario"))?;
    let world = generate_world(&cfg.world, cfg.seed);
    let mut ccfg = ClientConfig::new(client_id);
    ccfg.depth_camera = cam.depth;
    ccfg.window_size = cam.window_size;
    ccfg.augment_cap = cam.augment_cap;
    let mut client = Client::new(ccfg);
    let mount = cam.mount.base_from_cam();
    let stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    let mut ep = ReliableEndpoint::new(Box::new(TcpTransport::new(stream)?), DEFAULT_RESEND_WINDOW);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x0B5E_0000 + client_id as u64));
    let tr = &robot.trajectory;
    let mut prev: Option<Pose> = None;
    let mut k = 0u64;
    loop {
        let t = tr.start_offset + k as f64 / tr.sample_rate_hz;
        if t > cfg.duration {
            break;
        }
        k += 1;
        let cam_pose = tr.base_pose_at(t - tr.start_offset).compose(&mount);
        let frame = observe(
            &world, &cam_pose, &client.cfg.intrinsics, &cfg.noise, t, client_id,
            client.cfg.depth_camera, &mut rng,
        );
        let odom = prev.map_or(Pose::identity(), |p: Pose| p.inverse().compose(&cam_pose));
        prev = Some(cam_pose);
        let result = client.process_frame(&frame, &odom);
        for m in result.messages {
            ep.send(m, t)?;
        }
        for ev in ep.poll(t) {
            if let RecvEvent::Message(m) = ev {
                let _ = client.apply_server_message(&m);
            }
        }
        // Pace to a fraction of real time so the server keeps up without
        // making test runs slow.
        std::thread::sleep(std::time::Duration::from_millis(5));
    }
    println!(
        "client {client_id}: sent {} B, session {}, map {}",
        ep.bytes_sent(),
        client.session_id(),
        client.map_id()
    );
    Ok(())
}
