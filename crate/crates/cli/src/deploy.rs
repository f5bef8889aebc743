//! `kmn deploy up|down|status`: one child process per role on this host,
//! tracked through `<data_dir>/pids.json`.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::net::{SocketAddr, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use log::LevelFilter;
use serde::Serialize;

use crate::error::CliError;
use crate::topology::{role_configs, write_toml, Materials, TopologyConfig};

const START_TIMEOUT: Duration = Duration::from_secs(60);
const STOP_TIMEOUT: Duration = Duration::from_secs(15);

fn pid_file(topo: &TopologyConfig) -> PathBuf {
    topo.data_dir.join("pids.json")
}

fn read_pids(topo: &TopologyConfig) -> Result<BTreeMap<String, u32>, CliError> {
    let path = pid_file(topo);
    match fs::read(&path) {
        Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| CliError::Config(format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(BTreeMap::new()),
        Err(e) => Err(CliError::other(e)),
    }
}

/// Whether `pid` is a live process; zombies count as gone.
fn alive(pid: u32) -> bool {
    match fs::read_to_string(format!("/proc/{pid}/stat")) {
        Ok(stat) => stat
            .rsplit_once(')')
            .and_then(|(_, rest)| rest.split_whitespace().next())
            .is_some_and(|state| state != "Z" && state != "X"),
        Err(_) => false,
    }
}

fn signal(pid: u32, sig: libc::c_int) {
    // SAFETY: kill(2) has no memory-safety preconditions.
    unsafe {
        libc::kill(pid as libc::pid_t, sig);
    }
}

fn listening(addr: SocketAddr) -> bool {
    TcpStream::connect_timeout(&addr, Duration::from_millis(200)).is_ok()
}

fn log_tail(path: &Path) -> String {
    let text = fs::read_to_string(path).unwrap_or_default();
    let lines: Vec<&str> = text.lines().collect();
    lines[lines.len().saturating_sub(5)..].join("\n")
}

struct Launched {
    name: String,
    child: Child,
    log: PathBuf,
}

struct Launcher {
    exe: PathBuf,
    data_dir: PathBuf,
    level: LevelFilter,
    launched: Vec<Launched>,
}

impl Launcher {
    fn spawn<T: Serialize>(&mut self, role: &str, name: &str, config: &T) -> Result<(), CliError> {
        let config_path = self.data_dir.join("roles").join(format!("{name}.toml"));
        write_toml(&config_path, config)?;
        let log = self.data_dir.join("logs").join(format!("{name}.log"));
        fs::create_dir_all(log.parent().expect("logs dir")).map_err(CliError::other)?;
        let out = OpenOptions::new().create(true).append(true).open(&log).map_err(CliError::other)?;
        let err = out.try_clone().map_err(CliError::other)?;
        let child = {
            use std::os::unix::process::CommandExt;
            Command::new(&self.exe)
                .args(["--log-level", &self.level.to_string().to_lowercase(), "run", role, "--config"])
                .arg(&config_path)
                .stdin(Stdio::null())
                .stdout(out)
                .stderr(err)
                .process_group(0)
                .spawn()
                .map_err(|e| CliError::Other(format!("spawn {name}: {e}")))?
        };
        log::info!("started {name} (pid {})", child.id());
        self.launched.push(Launched {
            name: name.to_string(),
            child,
            log,
        });
        Ok(())
    }

    /// Waits until every address accepts connections, failing fast if a
    /// child exits.
    fn await_listening(&mut self, addrs: &[SocketAddr]) -> Result<(), CliError> {
        let deadline = Instant::now() + START_TIMEOUT;
        for &addr in addrs {
            while !listening(addr) {
                for l in &mut self.launched {
                    if let Ok(Some(status)) = l.child.try_wait() {
                        return Err(CliError::Network(format!(
                            "{} exited with {status} during startup:\n{}",
                            l.name,
                            log_tail(&l.log)
                        )));
                    }
                }
                if Instant::now() > deadline {
                    return Err(CliError::Network(format!("nothing listening on {addr} after {START_TIMEOUT:?}")));
                }
                thread::sleep(Duration::from_millis(50));
            }
        }
        Ok(())
    }

    fn abort(&mut self) {
        for l in &mut self.launched {
            let _ = l.child.kill();
            let _ = l.child.wait();
        }
    }
}

/// Starts every daemon of the topology and returns once all of them listen.
pub fn up(topo: &TopologyConfig, level: LevelFilter) -> Result<(), CliError> {
    let running: Vec<String> = read_pids(topo)?
        .into_iter()
        .filter(|&(_, pid)| alive(pid))
        .map(|(name, _)| name)
        .collect();
    if !running.is_empty() {
        return Err(CliError::Config(format!("already up: {}", running.join(", "))));
    }
    if let Some(addr) = topo.addresses().into_iter().find(|&a| listening(a)) {
        return Err(CliError::Network(format!("{addr} is already in use")));
    }
    fs::create_dir_all(&topo.data_dir).map_err(CliError::other)?;
    let materials = Materials::load_or_generate(topo)?;
    let roles = role_configs(topo, &materials)?;
    let mut launcher = Launcher {
        exe: std::env::current_exe().map_err(CliError::other)?,
        data_dir: topo.data_dir.clone(),
        level,
        launched: Vec::new(),
    };

    let result = (|| {
        launcher.spawn("verifier", "verifier", &roles.verifier)?;
        launcher.await_listening(&[roles.verifier.listen])?;
        for (name, c) in &roles.nodes {
            launcher.spawn("kmn-node", name, c)?;
        }
        let node_addrs: Vec<SocketAddr> = roles.nodes.iter().flat_map(|(_, c)| [c.room_listen, c.rpc_listen]).collect();
        launcher.await_listening(&node_addrs)?;
        for (name, c) in &roles.coordinators {
            launcher.spawn("coordinator", name, c)?;
        }
        let coordinator_addrs: Vec<SocketAddr> = roles.coordinators.iter().map(|(_, c)| c.listen).collect();
        launcher.await_listening(&coordinator_addrs)?;
        for (name, c) in &roles.pps {
            launcher.spawn("pp", name, c)?;
        }
        let pp_addrs: Vec<SocketAddr> = roles.pps.iter().flat_map(|(_, c)| [c.client_listen, c.peer_listen]).collect();
        launcher.await_listening(&pp_addrs)
    })();
    if let Err(e) = result {
        launcher.abort();
        return Err(e);
    }

    let pids: BTreeMap<&str, u32> = launcher.launched.iter().map(|l| (l.name.as_str(), l.child.id())).collect();
    fs::write(pid_file(topo), serde_json::to_vec_pretty(&pids).map_err(CliError::other)?).map_err(CliError::other)?;
    println!("{} daemons up, state in {}", pids.len(), topo.data_dir.display());
    for f in &topo.fsps {
        println!("fsp {}: pp client api {}", f.id, f.pp_client);
    }
    Ok(())
}

/// Sends SIGTERM to every daemon, then SIGKILL to any still running after
/// the grace period.
pub fn down(topo: &TopologyConfig) -> Result<(), CliError> {
    let pids = read_pids(topo)?;
    if pids.is_empty() {
        println!("nothing running");
        return Ok(());
    }
    for &pid in pids.values() {
        signal(pid, libc::SIGTERM);
    }
    let deadline = Instant::now() + STOP_TIMEOUT;
    while pids.values().any(|&p| alive(p)) && Instant::now() < deadline {
        thread::sleep(Duration::from_millis(50));
    }
    let mut killed = Vec::new();
    for (name, &pid) in &pids {
        if alive(pid) {
            signal(pid, libc::SIGKILL);
            killed.push(name.as_str());
        }
    }
    fs::remove_file(pid_file(topo)).map_err(CliError::other)?;
    if killed.is_empty() {
        println!("{} daemons stopped", pids.len());
    } else {
        println!("{} daemons stopped, killed after timeout: {}", pids.len(), killed.join(", "));
    }
    Ok(())
}

/// Reports each daemon's process and the reachability of every address.
pub fn status(topo: &TopologyConfig) -> Result<(), CliError> {
    let pids = read_pids(topo)?;
    let mut healthy = !pids.is_empty();
    for (name, &pid) in &pids {
        let up = alive(pid);
        healthy &= up;
        println!("{name:<24} pid {pid:<8} {}", if up { "running" } else { "gone" });
    }
    for addr in topo.addresses() {
        let up = listening(addr);
        healthy &= up;
        println!("{addr:<24} {}", if up { "listening" } else { "closed" });
    }
    if healthy {
        Ok(())
    } else {
        Err(CliError::Network("deployment is not healthy".into()))
    }
}
