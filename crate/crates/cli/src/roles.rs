//! The four daemons behind `kmn run <role>`. Each `start_*` binds its
//! sockets and returns a [`Daemon`] that serves until dropped.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use kmn_core::ec::{GroupPoint, KeyPair, Scalar};
use kmn_core::protocol::{FaultPlan, PartyContext};
use kmn_core::transport::{tcp, Directory, Endpoint, IdentitySecrets, Mailboxes, PeerKeys, PeerPublic, StaticIdentity, TcpLink, TransportConfig};
use kmn_core::{PartyIndex, Profile};
use kmn_service::coordinator::{Coordinator, CoordinatorConfig, PoolConfig};
use kmn_service::wire::{serve_tcp, SecureChannel, SecureHandler, TcpChannel, TcpServer};
use kmn_service::{Caller, Channel, KeyService, KmnClient, KmnNode, NodeStore, PaymentProcessor, PeerService, PpConfig, SignerKind, SingleSigner, Verifier, VerifierClient};
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::topology::{paillier_from_public_hex, paillier_from_secret_hex};

const RPC_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodePeer {
    pub index: PartyIndex,
    pub room: SocketAddr,
    pub keys: PeerKeys,
    /// Hex of the encoded Paillier public key.
    pub paillier: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeRole {
    pub fsp: u16,
    pub index: PartyIndex,
    pub room_listen: SocketAddr,
    pub rpc_listen: SocketAddr,
    pub identity: IdentitySecrets,
    /// Hex of the encoded Paillier primes.
    pub paillier: String,
    pub peers: Vec<NodePeer>,
    #[serde(default)]
    pub profile: Profile,
    #[serde(default)]
    pub transport: TransportConfig,
    pub store: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeRpc {
    pub index: PartyIndex,
    pub rpc: SocketAddr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoordinatorRole {
    /// Requests on `listen` are attributed to this FSP's PP.
    pub fsp: u16,
    pub threshold: u16,
    pub listen: SocketAddr,
    pub nodes: Vec<NodeRpc>,
    #[serde(default)]
    pub pool: PoolConfig,
    pub registry: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifierRole {
    pub listen: SocketAddr,
    pub key: Scalar,
    pub bank: GroupPoint,
    pub log: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpPeer {
    pub fsp: u16,
    pub addr: SocketAddr,
    pub keys: PeerKeys,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpRole {
    pub fsp: u16,
    pub client_listen: SocketAddr,
    pub peer_listen: SocketAddr,
    #[serde(default)]
    pub signer: SignerKind,
    pub coordinator: SocketAddr,
    pub verifier: SocketAddr,
    pub verifier_key: GroupPoint,
    /// Enables the FUND verb.
    pub bank: Option<Scalar>,
    pub identity: IdentitySecrets,
    pub peers: Vec<PpPeer>,
    pub snapshot: PathBuf,
}

/// Sockets and threads of a running daemon; dropping it shuts down.
pub struct Daemon {
    pub name: String,
    servers: Vec<TcpServer>,
    shutdown: Arc<AtomicBool>,
    listeners: Vec<JoinHandle<()>>,
    coordinator: Option<Arc<Coordinator>>,
}

impl Daemon {
    fn new(name: String) -> Self {
        Daemon {
            name,
            servers: Vec::new(),
            shutdown: Arc::default(),
            listeners: Vec::new(),
            coordinator: None,
        }
    }

    pub fn addrs(&self) -> Vec<SocketAddr> {
        self.servers.iter().map(TcpServer::addr).collect()
    }
}

impl Drop for Daemon {
    fn drop(&mut self) {
        if let Some(c) = &self.coordinator {
            c.shutdown();
        }
        self.servers.clear();
        self.shutdown.store(true, Ordering::SeqCst);
        for h in self.listeners.drain(..) {
            let _ = h.join();
        }
        log::info!("{} stopped", self.name);
    }
}

fn bind(addr: SocketAddr) -> Result<TcpListener, CliError> {
    TcpListener::bind(addr).map_err(|e| CliError::Network(format!("bind {addr}: {e}")))
}

fn serve(daemon: &mut Daemon, addr: SocketAddr, handler: Arc<dyn kmn_service::Handler>, caller: Caller) -> Result<(), CliError> {
    let server = serve_tcp(bind(addr)?, handler, caller).map_err(CliError::network)?;
    daemon.servers.push(server);
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(CliError::other),
        _ => Ok(()),
    }
}

fn channel(addr: SocketAddr) -> Arc<dyn Channel> {
    Arc::new(TcpChannel::new(addr, RPC_TIMEOUT))
}

pub fn start_node(c: &NodeRole) -> Result<Daemon, CliError> {
    let mut daemon = Daemon::new(format!("fsp {} node {}", c.fsp, c.index));
    let identity = StaticIdentity::from_secrets(c.index, &c.identity).map_err(CliError::config)?;
    let paillier = Arc::new(paillier_from_secret_hex(&c.paillier)?);
    if paillier.owner() != c.index {
        return Err(CliError::Config(format!("Paillier key belongs to party {}", paillier.owner())));
    }
    let mut publics = vec![identity.public()];
    let mut addrs = HashMap::from([(c.index, c.room_listen)]);
    let mut paillier_keys = BTreeMap::from([(c.index, paillier.public().clone())]);
    for p in &c.peers {
        publics.push(PeerPublic::from_keys(p.index, &p.keys).map_err(CliError::config)?);
        addrs.insert(p.index, p.room);
        paillier_keys.insert(p.index, paillier_from_public_hex(&p.paillier)?);
    }

    let mailboxes = Arc::new(Mailboxes::new());
    let listener = tcp::spawn_listener(bind(c.room_listen)?, mailboxes.clone(), daemon.shutdown.clone()).map_err(CliError::network)?;
    daemon.listeners.push(listener);
    let endpoint = Endpoint::new(
        identity,
        Directory::new(publics),
        Arc::new(TcpLink::new(addrs)),
        mailboxes,
        c.transport.clone(),
    );
    let context = PartyContext {
        endpoint,
        paillier,
        paillier_keys: Arc::new(paillier_keys),
        profile: c.profile,
        faults: FaultPlan::default(),
    };
    ensure_parent(&c.store)?;
    let store = Arc::new(NodeStore::open(&c.store).map_err(CliError::other)?);
    let node = Arc::new(KmnNode::new(context, store));
    serve(&mut daemon, c.rpc_listen, node, Caller::ANONYMOUS)?;
    Ok(daemon)
}

pub fn start_coordinator(c: &CoordinatorRole) -> Result<Daemon, CliError> {
    let mut daemon = Daemon::new(format!("fsp {} coordinator", c.fsp));
    let config = CoordinatorConfig {
        threshold: c.threshold,
        parties: c.nodes.iter().map(|n| n.index).collect(),
        pool: c.pool.clone(),
    };
    let nodes = c.nodes.iter().map(|n| (n.index, channel(n.rpc))).collect();
    ensure_parent(&c.registry)?;
    let coordinator = Arc::new(Coordinator::open(config, nodes, &c.registry).map_err(CliError::config)?);
    daemon.coordinator = Some(coordinator.clone());
    serve(&mut daemon, c.listen, coordinator, Caller(c.fsp))?;
    Ok(daemon)
}

pub fn start_verifier(c: &VerifierRole) -> Result<Daemon, CliError> {
    let mut daemon = Daemon::new("verifier".into());
    let key = KeyPair::from_secret(c.key).map_err(CliError::config)?;
    ensure_parent(&c.log)?;
    let verifier = Arc::new(Verifier::open(key, c.bank, &c.log).map_err(CliError::other)?);
    log::info!("verifier key {}", verifier.public_key().to_hex());
    serve(&mut daemon, c.listen, verifier, Caller::ANONYMOUS)?;
    Ok(daemon)
}

pub fn start_pp(c: &PpRole) -> Result<Daemon, CliError> {
    let mut daemon = Daemon::new(format!("fsp {} pp", c.fsp));
    let identity = StaticIdentity::from_secrets(c.fsp, &c.identity).map_err(CliError::config)?;
    let keys: Arc<dyn KeyService> = match c.signer {
        SignerKind::Threshold => Arc::new(KmnClient::new(channel(c.coordinator))),
        SignerKind::Single => Arc::new(SingleSigner::new()),
    };
    let bank = c.bank.map(KeyPair::from_secret).transpose().map_err(CliError::config)?;
    ensure_parent(&c.snapshot)?;
    let config = PpConfig {
        fsp: c.fsp,
        snapshot: Some(c.snapshot.clone()),
        bank,
        verifier_key: c.verifier_key,
    };
    let pp = Arc::new(PaymentProcessor::new(config, keys, VerifierClient::new(channel(c.verifier)))?);
    let mut publics = vec![identity.public()];
    for peer in &c.peers {
        let public = PeerPublic::from_keys(peer.fsp, &peer.keys).map_err(CliError::config)?;
        pp.add_peer(peer.fsp, Arc::new(SecureChannel::new(channel(peer.addr), &identity, &public)));
        publics.push(public);
    }
    let peer_service = SecureHandler::new(Arc::new(PeerService(pp.clone())), identity, Directory::new(publics));
    serve(&mut daemon, c.peer_listen, Arc::new(peer_service), Caller::ANONYMOUS)?;
    serve(&mut daemon, c.client_listen, pp.clone(), Caller::ANONYMOUS)?;
    for (id, result) in pp.recover() {
        match result {
            Ok(_) => log::info!("resumed transfer {id}"),
            Err(e) => log::warn!("transfer {id} still open: {e}"),
        }
    }
    Ok(daemon)
}
