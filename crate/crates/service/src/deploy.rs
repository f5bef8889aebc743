//! Wiring for a KMN in one process: nodes, their stores and the coordinator,
//! connected either through in-process channels or over loopback TCP.

use std::collections::{BTreeMap, HashMap};
use std::net::{SocketAddr, TcpListener};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use kmn_core::cluster::cached_paillier;
use kmn_core::paillier::{PaillierProfile, PaillierPublicKey};
use kmn_core::protocol::{FaultPlan, PartyContext, Profile};
use kmn_core::transport::{tcp, Directory, Endpoint, InProcessNetwork, Mailboxes, StaticIdentity, TcpLink, TransportConfig};
use kmn_core::PartyIndex;
use parking_lot::Mutex;
use rand::rngs::OsRng;
use serde::{Deserialize, Serialize};

use crate::coordinator::{Coordinator, CoordinatorConfig, PoolConfig};
use crate::error::KmnError;
use crate::keys::KmnClient;
use crate::node::KmnNode;
use crate::store::NodeStore;
use crate::wire::{serve_tcp, Caller, Channel, Handler, LocalChannel, Mount, TcpChannel, TcpServer};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    InProcess,
    Tcp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KmnOptions {
    pub threshold: u16,
    pub parties: u16,
    pub paillier: PaillierProfile,
    pub profile: Profile,
    pub transport: TransportConfig,
    pub pool: PoolConfig,
    pub backend: Backend,
    /// Persist node stores and the coordinator registry here.
    pub data_dir: Option<PathBuf>,
}

impl Default for KmnOptions {
    fn default() -> Self {
        KmnOptions {
            threshold: 2,
            parties: 3,
            paillier: PaillierProfile::default(),
            profile: Profile::Production,
            transport: TransportConfig::default(),
            pool: PoolConfig::default(),
            backend: Backend::InProcess,
            data_dir: None,
        }
    }
}

impl KmnOptions {
    /// 1024-bit Paillier, the test profile and pooling disabled.
    pub fn fast(threshold: u16, parties: u16) -> Self {
        KmnOptions {
            threshold,
            parties,
            paillier: PaillierProfile::fast_test(),
            profile: Profile::Test,
            pool: PoolConfig::disabled(),
            ..KmnOptions::default()
        }
    }
}

/// Serves whatever is mounted; an unmounted slot answers with an empty body.
struct Relay(LocalChannel);

impl Handler for Relay {
    fn handle(&self, _caller: Caller, request: &[u8]) -> Vec<u8> {
        self.0.call(request).unwrap_or_default()
    }
}

struct NodeSlot {
    mount: Mount,
    context: PartyContext,
    store: Arc<NodeStore>,
    node: Arc<KmnNode>,
}

pub struct KmnDeployment {
    options: KmnOptions,
    nodes: Mutex<BTreeMap<PartyIndex, NodeSlot>>,
    coordinator: Arc<Coordinator>,
    network: Option<InProcessNetwork>,
    servers: Mutex<Vec<TcpServer>>,
    client_servers: Mutex<HashMap<Caller, SocketAddr>>,
    shutdown: Arc<AtomicBool>,
    listeners: Vec<JoinHandle<()>>,
}

impl KmnDeployment {
    pub fn start(options: KmnOptions) -> Result<Self, KmnError> {
        let service = |e: &dyn std::fmt::Display| KmnError::Service(e.to_string());
        let n = options.parties;
        let identities: Vec<StaticIdentity> = (1..=n).map(|i| StaticIdentity::generate(i, &mut OsRng)).collect();
        let directory = Directory::new(identities.iter().map(|id| id.public()));
        let mut paillier = BTreeMap::new();
        for i in 1..=n {
            paillier.insert(i, cached_paillier(i, options.paillier).map_err(|e| service(&e))?);
        }
        let public: Arc<BTreeMap<PartyIndex, PaillierPublicKey>> =
            Arc::new(paillier.iter().map(|(&i, k)| (i, k.public().clone())).collect());

        let shutdown = Arc::new(AtomicBool::new(false));
        let mut listeners = Vec::new();
        let mut network = None;
        let endpoints: Vec<Endpoint> = match options.backend {
            Backend::InProcess => {
                let net = InProcessNetwork::new();
                let eps = identities
                    .into_iter()
                    .map(|id| net.endpoint(id, directory.clone(), options.transport.clone()))
                    .collect();
                network = Some(net);
                eps
            }
            Backend::Tcp => {
                let mut sockets = Vec::new();
                let mut addrs = HashMap::new();
                for id in &identities {
                    let l = TcpListener::bind("127.0.0.1:0").map_err(|e| service(&e))?;
                    addrs.insert(id.index(), l.local_addr().map_err(|e| service(&e))?);
                    sockets.push(l);
                }
                let mut eps = Vec::new();
                for (id, l) in identities.into_iter().zip(sockets) {
                    let mailboxes = Arc::new(Mailboxes::new());
                    listeners.push(tcp::spawn_listener(l, mailboxes.clone(), shutdown.clone()).map_err(|e| service(&e))?);
                    let link = Arc::new(TcpLink::new(addrs.clone()));
                    eps.push(Endpoint::new(id, directory.clone(), link, mailboxes, options.transport.clone()));
                }
                eps
            }
        };

        let mut nodes = BTreeMap::new();
        let mut channels: BTreeMap<PartyIndex, Arc<dyn Channel>> = BTreeMap::new();
        let mut servers = Vec::new();
        for endpoint in endpoints {
            let index = endpoint.me();
            let context = PartyContext {
                endpoint,
                paillier: paillier[&index].clone(),
                paillier_keys: public.clone(),
                profile: options.profile,
                faults: FaultPlan::default(),
            };
            let store = Arc::new(match &options.data_dir {
                Some(dir) => NodeStore::open(dir.join(format!("node-{index}.log"))).map_err(|e| service(&e))?,
                None => NodeStore::in_memory(),
            });
            let node = Arc::new(KmnNode::new(context.clone(), store.clone()));
            let mount = Mount::new(node.clone());
            let channel: Arc<dyn Channel> = match options.backend {
                Backend::InProcess => Arc::new(mount.channel(Caller::ANONYMOUS)),
                Backend::Tcp => {
                    let l = TcpListener::bind("127.0.0.1:0").map_err(|e| service(&e))?;
                    let relay = Arc::new(Relay(mount.channel(Caller::ANONYMOUS)));
                    let server = serve_tcp(l, relay, Caller::ANONYMOUS).map_err(|e| service(&e))?;
                    let ch = TcpChannel::new(server.addr(), Duration::from_secs(60));
                    servers.push(server);
                    Arc::new(ch)
                }
            };
            channels.insert(index, channel);
            nodes.insert(
                index,
                NodeSlot {
                    mount,
                    context,
                    store,
                    node,
                },
            );
        }

        let config = CoordinatorConfig {
            threshold: options.threshold,
            parties: (1..=n).collect(),
            pool: options.pool.clone(),
        };
        let coordinator = Arc::new(match &options.data_dir {
            Some(dir) => Coordinator::open(config, channels, dir.join("coordinator.log"))?,
            None => Coordinator::new(config, channels)?,
        });
        Ok(KmnDeployment {
            options,
            nodes: Mutex::new(nodes),
            coordinator,
            network,
            servers: Mutex::new(servers),
            client_servers: Mutex::new(HashMap::new()),
            shutdown,
            listeners,
        })
    }

    pub fn options(&self) -> &KmnOptions {
        &self.options
    }

    pub fn coordinator(&self) -> &Arc<Coordinator> {
        &self.coordinator
    }

    /// The in-process room network, when that backend is in use.
    pub fn network(&self) -> Option<&InProcessNetwork> {
        self.network.as_ref()
    }

    /// A channel to the coordinator on behalf of `caller`.
    pub fn channel(&self, caller: Caller) -> Result<Arc<dyn Channel>, KmnError> {
        match self.options.backend {
            Backend::InProcess => Ok(Arc::new(LocalChannel::new(self.coordinator.clone(), caller))),
            Backend::Tcp => {
                let mut known = self.client_servers.lock();
                let addr = match known.get(&caller) {
                    Some(a) => *a,
                    None => {
                        let l = TcpListener::bind("127.0.0.1:0").map_err(|e| KmnError::Service(e.to_string()))?;
                        let server = serve_tcp(l, self.coordinator.clone(), caller).map_err(|e| KmnError::Service(e.to_string()))?;
                        let a = server.addr();
                        self.servers.lock().push(server);
                        known.insert(caller, a);
                        a
                    }
                };
                Ok(Arc::new(TcpChannel::new(addr, Duration::from_secs(120))))
            }
        }
    }

    pub fn client(&self, caller: Caller) -> Result<KmnClient, KmnError> {
        Ok(KmnClient::new(self.channel(caller)?))
    }

    pub fn parties(&self) -> Vec<PartyIndex> {
        self.nodes.lock().keys().copied().collect()
    }

    pub fn node(&self, party: PartyIndex) -> Arc<KmnNode> {
        self.nodes.lock()[&party].node.clone()
    }

    pub fn store(&self, party: PartyIndex) -> Arc<NodeStore> {
        self.nodes.lock()[&party].store.clone()
    }

    /// Replaces `party`'s daemon with one that misbehaves per `faults`.
    pub fn set_faults(&self, party: PartyIndex, faults: FaultPlan) {
        let mut nodes = self.nodes.lock();
        let slot = nodes.get_mut(&party).expect("known party");
        slot.context.faults = faults;
        slot.node = Arc::new(KmnNode::new(slot.context.clone(), slot.store.clone()));
        slot.mount.mount(slot.node.clone());
    }

    pub fn clear_faults(&self) {
        for p in self.parties() {
            self.set_faults(p, FaultPlan::default());
        }
    }

    /// Takes `party` offline; coordinator calls to it fail as unreachable.
    pub fn stop_node(&self, party: PartyIndex) {
        self.nodes.lock()[&party].mount.unmount();
    }

    pub fn start_node(&self, party: PartyIndex) {
        let nodes = self.nodes.lock();
        let slot = &nodes[&party];
        slot.mount.mount(slot.node.clone());
    }
}

impl Drop for KmnDeployment {
    fn drop(&mut self) {
        self.coordinator.shutdown();
        self.servers.lock().clear();
        self.shutdown.store(true, Ordering::SeqCst);
        for h in self.listeners.drain(..) {
            let _ = h.join();
        }
    }
}
