//! Several FSPs in one process: each with its own KMN (or a single-signer
//! stand-in) and payment processor, all sharing one verifier. PPs talk to
//! each other over sealed channels keyed by static FSP identities.

use std::collections::BTreeMap;
use std::fs;
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use kmn_core::ec::KeyPair;
use kmn_core::transport::{Directory, StaticIdentity};
use parking_lot::{Mutex, RwLock};
use rand::rngs::OsRng;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::deploy::{Backend, KmnDeployment, KmnOptions};
use crate::keys::{KeyService, SingleSigner};
use crate::pp::{FspId, PaymentProcessor, PeerService, PpClient, PpConfig, PpError, TransferOutcome};
use crate::verifier::{Totals, Verifier, VerifierClient};
use crate::wire::{serve_tcp, Caller, Channel, Handler, Mount, SecureChannel, SecureHandler, TcpChannel, TcpServer};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignerKind {
    #[default]
    Threshold,
    /// One in-memory key per note; the baseline for comparisons.
    Single,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FspOptions {
    pub fsps: Vec<FspId>,
    pub kmn: KmnOptions,
    pub signer: SignerKind,
    /// Holds `fsp-{id}/` (KMN state and the PP snapshot) and `verifier.log`.
    /// Needed for [`FspNetwork::restart_pp`].
    pub data_dir: Option<PathBuf>,
}

impl Default for FspOptions {
    fn default() -> Self {
        FspOptions {
            fsps: vec![1, 2],
            kmn: KmnOptions::default(),
            signer: SignerKind::Threshold,
            data_dir: None,
        }
    }
}

impl FspOptions {
    pub fn fast() -> Self {
        FspOptions {
            kmn: KmnOptions::fast(2, 3),
            ..FspOptions::default()
        }
    }
}

struct Fsp {
    kmn: Option<KmnDeployment>,
    keys: Arc<dyn KeyService>,
    pp: RwLock<Arc<PaymentProcessor>>,
    config: PpConfig,
    client: Mount,
    peer: Mount,
    peer_channels: BTreeMap<FspId, Arc<dyn Channel>>,
}

pub struct FspNetwork {
    options: FspOptions,
    verifier: Arc<Verifier>,
    verifier_channel: Arc<dyn Channel>,
    bank: KeyPair,
    fsps: BTreeMap<FspId, Fsp>,
    servers: Mutex<Vec<TcpServer>>,
}

fn storage(e: impl std::fmt::Display) -> PpError {
    PpError::Storage(e.to_string())
}

impl FspNetwork {
    pub fn start(options: FspOptions) -> Result<Self, PpError> {
        let tcp = options.kmn.backend == Backend::Tcp;
        let mut servers = Vec::new();
        let mut expose = |handler: Arc<dyn Handler>| -> Result<Arc<dyn Channel>, PpError> {
            if tcp {
                let server = serve_tcp(TcpListener::bind("127.0.0.1:0").map_err(storage)?, handler, Caller::ANONYMOUS)
                    .map_err(storage)?;
                let ch = TcpChannel::new(server.addr(), Duration::from_secs(120));
                servers.push(server);
                Ok(Arc::new(ch))
            } else {
                Ok(Arc::new(Mount::new(handler).channel(Caller::ANONYMOUS)))
            }
        };

        if let Some(dir) = &options.data_dir {
            fs::create_dir_all(dir).map_err(storage)?;
        }
        let bank = KeyPair::generate(&mut OsRng);
        let verifier_key = KeyPair::generate(&mut OsRng);
        let verifier = Arc::new(match &options.data_dir {
            Some(dir) => Verifier::open(verifier_key, bank.public(), dir.join("verifier.log")).map_err(storage)?,
            None => Verifier::new(verifier_key, bank.public()),
        });
        let verifier_channel = expose(verifier.clone())?;

        let identities: BTreeMap<FspId, StaticIdentity> = options
            .fsps
            .iter()
            .map(|&f| (f, StaticIdentity::generate(f, &mut OsRng)))
            .collect();
        let directory = Directory::new(identities.values().map(StaticIdentity::public));

        let mut peer_mounts = BTreeMap::new();
        let mut sealed_ends = BTreeMap::new();
        for (&f, identity) in &identities {
            let peer = Mount::default();
            let secure = Arc::new(SecureHandler::new(Arc::new(peer.clone()), identity.clone(), directory.clone()));
            sealed_ends.insert(f, expose(secure)?);
            peer_mounts.insert(f, peer);
        }

        let mut fsps = BTreeMap::new();
        for (&f, identity) in &identities {
            let fsp_dir = options.data_dir.as_ref().map(|d| d.join(format!("fsp-{f}")));
            if let Some(d) = &fsp_dir {
                fs::create_dir_all(d).map_err(storage)?;
            }
            let (kmn, keys): (Option<KmnDeployment>, Arc<dyn KeyService>) = match options.signer {
                SignerKind::Threshold => {
                    let mut kmn_opts = options.kmn.clone();
                    kmn_opts.data_dir = fsp_dir.as_ref().map(|d| d.join("kmn"));
                    if let Some(d) = &kmn_opts.data_dir {
                        fs::create_dir_all(d).map_err(storage)?;
                    }
                    let kmn = KmnDeployment::start(kmn_opts)?;
                    let client = kmn.client(Caller(f))?;
                    (Some(kmn), Arc::new(client))
                }
                SignerKind::Single => (None, Arc::new(SingleSigner::new())),
            };
            let config = PpConfig {
                fsp: f,
                snapshot: fsp_dir.as_ref().map(|d| d.join("pp.json")),
                bank: Some(bank.clone()),
                verifier_key: verifier.public_key(),
            };
            let peer_channels: BTreeMap<FspId, Arc<dyn Channel>> = identities
                .keys()
                .filter(|&&g| g != f)
                .map(|&g| {
                    let public = directory.get(g).expect("directory member");
                    let ch: Arc<dyn Channel> = Arc::new(SecureChannel::new(sealed_ends[&g].clone(), identity, public));
                    (g, ch)
                })
                .collect();
            let pp = build_pp(&config, &keys, &verifier_channel, &peer_channels)?;
            let client = Mount::default();
            let fsp = Fsp {
                kmn,
                keys,
                pp: RwLock::new(pp),
                config,
                client,
                peer: peer_mounts[&f].clone(),
                peer_channels,
            };
            fsps.insert(f, fsp);
        }
        let net = FspNetwork {
            options,
            verifier,
            verifier_channel,
            bank,
            fsps,
            servers: Mutex::new(servers),
        };
        for f in net.fsp_ids() {
            net.mount_pp(f);
        }
        Ok(net)
    }

    /// Builds the PP of `fsp` from its snapshot and mounts it.
    fn boot_pp(&self, fsp: FspId) -> Result<Arc<PaymentProcessor>, PpError> {
        let slot = &self.fsps[&fsp];
        let pp = build_pp(&slot.config, &slot.keys, &self.verifier_channel, &slot.peer_channels)?;
        *slot.pp.write() = pp.clone();
        self.mount_pp(fsp);
        Ok(pp)
    }

    fn mount_pp(&self, fsp: FspId) {
        let slot = &self.fsps[&fsp];
        let pp = slot.pp.read().clone();
        slot.client.mount(pp.clone());
        slot.peer.mount(Arc::new(PeerService(pp)));
    }

    pub fn options(&self) -> &FspOptions {
        &self.options
    }

    pub fn fsp_ids(&self) -> Vec<FspId> {
        self.fsps.keys().copied().collect()
    }

    pub fn pp(&self, fsp: FspId) -> Arc<PaymentProcessor> {
        self.fsps[&fsp].pp.read().clone()
    }

    pub fn client(&self, fsp: FspId) -> PpClient {
        PpClient::new(Arc::new(self.fsps[&fsp].client.channel(Caller::ANONYMOUS)))
    }

    pub fn kmn(&self, fsp: FspId) -> Option<&KmnDeployment> {
        self.fsps[&fsp].kmn.as_ref()
    }

    pub fn keys(&self, fsp: FspId) -> Arc<dyn KeyService> {
        self.fsps[&fsp].keys.clone()
    }

    pub fn verifier(&self) -> &Arc<Verifier> {
        &self.verifier
    }

    pub fn bank(&self) -> &KeyPair {
        &self.bank
    }

    /// Takes the PP of `fsp` offline; peers see it as unreachable.
    pub fn stop_pp(&self, fsp: FspId) {
        let slot = &self.fsps[&fsp];
        slot.client.unmount();
        slot.peer.unmount();
    }

    /// Restarts the PP of `fsp` from its snapshot and resumes its open
    /// sessions.
    pub fn restart_pp(&self, fsp: FspId) -> Result<Vec<(Uuid, Result<TransferOutcome, PpError>)>, PpError> {
        if self.fsps[&fsp].config.snapshot.is_none() {
            return Err(PpError::Storage("restart needs a data directory".into()));
        }
        self.stop_pp(fsp);
        Ok(self.boot_pp(fsp)?.recover())
    }

    /// Checks that wallets plus in-flight value across all PPs equal the
    /// verifier's active value, and that the verifier conserves value.
    /// Only meaningful while no transfer is running.
    pub fn audit(&self) -> Result<Totals, String> {
        let totals = self.verifier.audit()?;
        let held: u64 = self
            .fsps
            .keys()
            .map(|&f| {
                let pp = self.pp(f);
                pp.total_value() + pp.in_flight_value()
            })
            .sum();
        if held != totals.active_value {
            return Err(format!("payment processors hold {held}, verifier has {} active", totals.active_value));
        }
        Ok(totals)
    }
}

fn build_pp(
    config: &PpConfig,
    keys: &Arc<dyn KeyService>,
    verifier: &Arc<dyn Channel>,
    peers: &BTreeMap<FspId, Arc<dyn Channel>>,
) -> Result<Arc<PaymentProcessor>, PpError> {
    let pp = PaymentProcessor::new(config.clone(), keys.clone(), VerifierClient::new(verifier.clone()))?;
    for (&g, ch) in peers {
        pp.add_peer(g, ch.clone());
    }
    Ok(Arc::new(pp))
}

impl Drop for FspNetwork {
    fn drop(&mut self) {
        self.servers.lock().clear();
    }
}
