//! Deployment topology, the key material generated for it, and the per-role
//! config files derived from both.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use kmn_core::ec::{KeyPair, Scalar};
use kmn_core::encoding::{Reader, Writer};
use kmn_core::paillier::{PaillierKeypair, PaillierProfile, PaillierPublicKey};
use kmn_core::sharing::check_params;
use kmn_core::transport::{IdentitySecrets, PeerKeys, StaticIdentity, TransportConfig};
use kmn_core::{PartyIndex, Profile};
use kmn_service::{PoolConfig, SignerKind};
use rand::rngs::OsRng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::roles::{CoordinatorRole, NodePeer, NodeRole, NodeRpc, PpPeer, PpRole, VerifierRole};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeEndpoints {
    /// Room transport between nodes.
    pub room: SocketAddr,
    /// Coordinator-to-node RPC.
    pub rpc: SocketAddr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FspDescriptor {
    pub id: u16,
    pub threshold: u16,
    #[serde(default)]
    pub signer: SignerKind,
    pub coordinator: SocketAddr,
    pub pp_client: SocketAddr,
    pub pp_peer: SocketAddr,
    /// One entry per KMN node; party indices follow the order, from 1.
    #[serde(default)]
    pub nodes: Vec<NodeEndpoints>,
}

impl FspDescriptor {
    pub fn parties(&self) -> u16 {
        self.nodes.len() as u16
    }

    pub fn threshold_kmn(&self) -> bool {
        self.signer == SignerKind::Threshold
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifierEndpoint {
    pub addr: SocketAddr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    /// State, generated keys, role configs and logs. Relative paths are
    /// taken from the topology file's directory.
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    #[serde(default)]
    pub paillier: PaillierProfile,
    #[serde(default)]
    pub profile: Profile,
    #[serde(default)]
    pub transport: TransportConfig,
    #[serde(default)]
    pub pool: PoolConfig,
    pub verifier: VerifierEndpoint,
    #[serde(rename = "fsp")]
    pub fsps: Vec<FspDescriptor>,
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("kmn-data")
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = toml::to_string(value).map_err(CliError::other)?;
    write_private(path, text.as_bytes())
}

/// Writes a file readable by the owner only; role configs hold secrets.
fn write_private(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    use std::io::Write;
    use std::os::unix::fs::OpenOptionsExt;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(CliError::other)?;
    }
    let mut f = fs::OpenOptions::new()
        .write(true)
        .create(true)
        .truncate(true)
        .mode(0o600)
        .open(path)
        .map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
    f.write_all(bytes).map_err(CliError::other)
}

impl TopologyConfig {
    /// Reads and validates a topology; `data_dir` comes back absolute.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let mut topo: TopologyConfig = read_toml(path)?;
        if topo.data_dir.is_relative() {
            let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            topo.data_dir = std::path::absolute(base.join(&topo.data_dir)).map_err(CliError::other)?;
        }
        topo.validate()?;
        Ok(topo)
    }

    /// The two-FSP layout on loopback: (2, 3) KMNs and one verifier,
    /// ports counted up from `base_port`.
    pub fn local(base_port: u16) -> Self {
        let mut port = base_port;
        Self::local_with(|| {
            let addr = SocketAddr::from(([127, 0, 0, 1], port));
            port += 1;
            addr
        })
    }

    /// The same layout with addresses drawn from `next`.
    pub fn local_with(mut next: impl FnMut() -> SocketAddr) -> Self {
        let verifier = VerifierEndpoint { addr: next() };
        let fsps = (1..=2)
            .map(|id| FspDescriptor {
                id,
                threshold: 2,
                signer: SignerKind::Threshold,
                coordinator: next(),
                pp_client: next(),
                pp_peer: next(),
                nodes: (0..3).map(|_| NodeEndpoints { room: next(), rpc: next() }).collect(),
            })
            .collect();
        TopologyConfig {
            data_dir: default_data_dir(),
            paillier: PaillierProfile::default(),
            profile: Profile::Production,
            transport: TransportConfig::default(),
            pool: PoolConfig::default(),
            verifier,
            fsps,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.paillier.validate().map_err(CliError::config)?;
        if self.fsps.is_empty() {
            return Err(CliError::Config("no FSPs in the topology".into()));
        }
        let mut ids = BTreeSet::new();
        for f in &self.fsps {
            if f.id == 0 || !ids.insert(f.id) {
                return Err(CliError::Config(format!("FSP id {} is zero or repeated", f.id)));
            }
            if f.threshold_kmn() {
                check_params(f.threshold, f.parties()).map_err(|e| CliError::Config(format!("FSP {}: {e}", f.id)))?;
            } else if !f.nodes.is_empty() {
                return Err(CliError::Config(format!("FSP {} uses a single signer but lists KMN nodes", f.id)));
            }
        }
        let mut seen = BTreeSet::new();
        for addr in self.addresses() {
            if !seen.insert(addr) {
                return Err(CliError::Config(format!("address {addr} is used twice")));
            }
        }
        Ok(())
    }

    /// Every address a daemon listens on.
    pub fn addresses(&self) -> Vec<SocketAddr> {
        let mut out = vec![self.verifier.addr];
        for f in &self.fsps {
            out.extend([f.pp_client, f.pp_peer]);
            if f.threshold_kmn() {
                out.push(f.coordinator);
                out.extend(f.nodes.iter().flat_map(|n| [n.room, n.rpc]));
            }
        }
        out
    }

    pub fn fsp(&self, id: u16) -> Option<&FspDescriptor> {
        self.fsps.iter().find(|f| f.id == id)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NodeMaterials {
    pub identity: IdentitySecrets,
    /// Hex of the encoded Paillier primes.
    pub paillier: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FspMaterials {
    pub identity: IdentitySecrets,
    pub nodes: Vec<NodeMaterials>,
}

/// Long-lived secrets of a deployment, generated once and kept in
/// `<data_dir>/materials.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Materials {
    pub verifier_key: Scalar,
    pub bank_key: Scalar,
    pub fsps: BTreeMap<u16, FspMaterials>,
}

pub fn paillier_secret_hex(key: &PaillierKeypair) -> String {
    let mut w = Writer::new();
    key.encode_secret(&mut w);
    hex::encode(w.finish())
}

pub fn paillier_from_secret_hex(s: &str) -> Result<PaillierKeypair, CliError> {
    let bytes = hex::decode(s).map_err(CliError::config)?;
    let mut r = Reader::new(&bytes);
    let key = PaillierKeypair::decode_secret(&mut r).map_err(CliError::config)?;
    r.finish().map_err(CliError::config)?;
    Ok(key)
}

pub fn paillier_public_hex(key: &PaillierPublicKey) -> String {
    let mut w = Writer::new();
    key.encode(&mut w);
    hex::encode(w.finish())
}

pub fn paillier_from_public_hex(s: &str) -> Result<PaillierPublicKey, CliError> {
    let bytes = hex::decode(s).map_err(CliError::config)?;
    let mut r = Reader::new(&bytes);
    let key = PaillierPublicKey::decode(&mut r).map_err(CliError::config)?;
    r.finish().map_err(CliError::config)?;
    Ok(key)
}

fn identity(index: PartyIndex, secrets: &IdentitySecrets) -> Result<StaticIdentity, CliError> {
    StaticIdentity::from_secrets(index, secrets).map_err(CliError::config)
}

fn peer_keys(index: PartyIndex, secrets: &IdentitySecrets) -> Result<PeerKeys, CliError> {
    Ok(identity(index, secrets)?.public().keys())
}

impl Materials {
    pub fn generate(topo: &TopologyConfig) -> Result<Self, CliError> {
        let mut fsps = BTreeMap::new();
        for f in &topo.fsps {
            let nodes = (1..=f.parties())
                .map(|i| {
                    log::info!("generating keys for FSP {} node {i}", f.id);
                    let paillier = PaillierKeypair::generate(i, topo.paillier, &mut OsRng).map_err(CliError::config)?;
                    Ok(NodeMaterials {
                        identity: StaticIdentity::generate(i, &mut OsRng).secrets(),
                        paillier: paillier_secret_hex(&paillier),
                    })
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            fsps.insert(
                f.id,
                FspMaterials {
                    identity: StaticIdentity::generate(f.id, &mut OsRng).secrets(),
                    nodes,
                },
            );
        }
        Ok(Materials {
            verifier_key: *KeyPair::generate(&mut OsRng).secret(),
            bank_key: *KeyPair::generate(&mut OsRng).secret(),
            fsps,
        })
    }

    /// The materials stored by an earlier `deploy up`, if any.
    pub fn load(topo: &TopologyConfig) -> Result<Option<Self>, CliError> {
        let path = topo.data_dir.join("materials.json");
        if !path.exists() {
            return Ok(None);
        }
        let bytes = fs::read(&path).map_err(CliError::other)?;
        let m: Materials = serde_json::from_slice(&bytes).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        m.check(topo)?;
        Ok(Some(m))
    }

    /// Loads the materials of an earlier run, or generates and stores them.
    pub fn load_or_generate(topo: &TopologyConfig) -> Result<Self, CliError> {
        if let Some(m) = Self::load(topo)? {
            return Ok(m);
        }
        let path = topo.data_dir.join("materials.json");
        let m = Materials::generate(topo)?;
        write_private(&path, &serde_json::to_vec_pretty(&m).map_err(CliError::other)?)?;
        Ok(m)
    }

    fn check(&self, topo: &TopologyConfig) -> Result<(), CliError> {
        for f in &topo.fsps {
            let nodes = self.fsps.get(&f.id).map(|m| m.nodes.len());
            if nodes != Some(f.nodes.len()) {
                return Err(CliError::Config(format!(
                    "stored key material does not match FSP {}; remove {} to regenerate",
                    f.id,
                    topo.data_dir.display()
                )));
            }
        }
        Ok(())
    }

    fn fsp(&self, id: u16) -> &FspMaterials {
        &self.fsps[&id]
    }
}

/// All role configs of a topology, named by the file they are written to.
pub struct RoleConfigs {
    pub verifier: VerifierRole,
    pub nodes: Vec<(String, NodeRole)>,
    pub coordinators: Vec<(String, CoordinatorRole)>,
    pub pps: Vec<(String, PpRole)>,
}

pub fn role_configs(topo: &TopologyConfig, m: &Materials) -> Result<RoleConfigs, CliError> {
    let state = topo.data_dir.join("state");
    let bank = KeyPair::from_secret(m.bank_key).map_err(CliError::config)?;
    let verifier_key = KeyPair::from_secret(m.verifier_key).map_err(CliError::config)?;
    let verifier = VerifierRole {
        listen: topo.verifier.addr,
        key: m.verifier_key,
        bank: bank.public(),
        log: state.join("verifier.log"),
    };

    let mut nodes = Vec::new();
    let mut coordinators = Vec::new();
    let mut pps = Vec::new();
    for f in &topo.fsps {
        let fm = m.fsp(f.id);
        if f.threshold_kmn() {
            let publics = fm
                .nodes
                .iter()
                .enumerate()
                .map(|(i, n)| {
                    let index = i as PartyIndex + 1;
                    let paillier = paillier_from_secret_hex(&n.paillier)?;
                    Ok(NodePeer {
                        index,
                        room: f.nodes[i].room,
                        keys: peer_keys(index, &n.identity)?,
                        paillier: paillier_public_hex(paillier.public()),
                    })
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            for (i, n) in fm.nodes.iter().enumerate() {
                let index = i as PartyIndex + 1;
                nodes.push((
                    format!("fsp-{}-node-{index}", f.id),
                    NodeRole {
                        fsp: f.id,
                        index,
                        room_listen: f.nodes[i].room,
                        rpc_listen: f.nodes[i].rpc,
                        identity: n.identity.clone(),
                        paillier: n.paillier.clone(),
                        peers: publics.iter().filter(|p| p.index != index).cloned().collect(),
                        profile: topo.profile,
                        transport: topo.transport.clone(),
                        store: state.join(format!("fsp-{}", f.id)).join(format!("node-{index}.log")),
                    },
                ));
            }
            coordinators.push((
                format!("fsp-{}-coordinator", f.id),
                CoordinatorRole {
                    fsp: f.id,
                    threshold: f.threshold,
                    listen: f.coordinator,
                    nodes: f
                        .nodes
                        .iter()
                        .enumerate()
                        .map(|(i, n)| NodeRpc {
                            index: i as PartyIndex + 1,
                            rpc: n.rpc,
                        })
                        .collect(),
                    pool: topo.pool.clone(),
                    registry: state.join(format!("fsp-{}", f.id)).join("coordinator.log"),
                },
            ));
        }
        let peers = topo
            .fsps
            .iter()
            .filter(|g| g.id != f.id)
            .map(|g| {
                Ok(PpPeer {
                    fsp: g.id,
                    addr: g.pp_peer,
                    keys: peer_keys(g.id, &m.fsp(g.id).identity)?,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        pps.push((
            format!("fsp-{}-pp", f.id),
            PpRole {
                fsp: f.id,
                client_listen: f.pp_client,
                peer_listen: f.pp_peer,
                signer: f.signer,
                coordinator: f.coordinator,
                verifier: topo.verifier.addr,
                verifier_key: verifier_key.public(),
                bank: Some(m.bank_key),
                identity: fm.identity.clone(),
                peers,
                snapshot: state.join(format!("fsp-{}", f.id)).join("pp.json"),
            },
        ));
    }
    Ok(RoleConfigs {
        verifier,
        nodes,
        coordinators,
        pps,
    })
}
