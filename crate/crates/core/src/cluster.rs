//! An in-process cluster of parties for tests, examples and benchmarks.
//! Each party runs its side of a session on its own thread.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use rand::rngs::OsRng;
use uuid::Uuid;

use crate::ec::{Digest, EcdsaSignature, GroupPoint};
use crate::paillier::{PaillierError, PaillierKeypair, PaillierProfile, PaillierPublicKey};
use crate::protocol::session::{self, Outcome};
use crate::protocol::{FaultPlan, KeyShareRecord, PartyContext, PresignatureRecord, Profile, ProtocolError};
use crate::transport::{Directory, InProcessNetwork, RoomId, SessionStats, StaticIdentity, TransportConfig};
use crate::PartyIndex;

#[derive(Clone, Debug)]
pub struct ClusterOptions {
    pub n: u16,
    pub paillier: PaillierProfile,
    pub transport: TransportConfig,
    pub profile: Profile,
}

impl ClusterOptions {
    /// 1024-bit Paillier and the test profile.
    pub fn fast(n: u16) -> Self {
        ClusterOptions {
            n,
            paillier: PaillierProfile::fast_test(),
            transport: TransportConfig::default(),
            profile: Profile::Test,
        }
    }
}

type PaillierCache = Mutex<HashMap<(PartyIndex, u64), Arc<PaillierKeypair>>>;

/// Paillier keys are node-level and long-lived, so clusters built in the
/// same process reuse them per (index, size).
pub fn cached_paillier(index: PartyIndex, profile: PaillierProfile) -> Result<Arc<PaillierKeypair>, PaillierError> {
    static CACHE: OnceLock<PaillierCache> = OnceLock::new();
    profile.validate()?;
    let cache = CACHE.get_or_init(Default::default);
    if let Some(k) = cache.lock().expect("cache lock").get(&(index, profile.bits)) {
        return Ok(k.clone());
    }
    let key = Arc::new(PaillierKeypair::generate(index, profile, &mut OsRng)?);
    cache
        .lock()
        .expect("cache lock")
        .entry((index, profile.bits))
        .or_insert(key.clone());
    Ok(key)
}

/// Every party's result of one session.
#[derive(Debug)]
pub struct Session<T> {
    pub room: RoomId,
    pub outputs: BTreeMap<PartyIndex, Result<T, ProtocolError>>,
    pub stats: BTreeMap<PartyIndex, SessionStats>,
    pub wall: Duration,
}

impl<T> Session<T> {
    pub fn is_ok(&self) -> bool {
        self.outputs.values().all(|r| r.is_ok())
    }

    /// All outputs, or the first error.
    pub fn into_ok(self) -> Result<BTreeMap<PartyIndex, T>, ProtocolError> {
        self.outputs.into_iter().map(|(p, r)| r.map(|v| (p, v))).collect()
    }

    /// Union of culprits named by the given parties.
    pub fn culprits_named_by(&self, parties: &[PartyIndex]) -> BTreeSet<PartyIndex> {
        parties
            .iter()
            .filter_map(|p| self.outputs.get(p))
            .filter_map(|r| r.as_ref().err())
            .flat_map(|e| e.culprits())
            .collect()
    }
}

pub struct LocalCluster {
    network: InProcessNetwork,
    contexts: BTreeMap<PartyIndex, PartyContext>,
}

impl LocalCluster {
    /// Parties `1..=n`.
    pub fn new(options: ClusterOptions) -> Result<Self, PaillierError> {
        let network = InProcessNetwork::new();
        let identities: Vec<StaticIdentity> = (1..=options.n)
            .map(|i| StaticIdentity::generate(i, &mut OsRng))
            .collect();
        let directory = Directory::new(identities.iter().map(|id| id.public()));
        let mut paillier = BTreeMap::new();
        for i in 1..=options.n {
            paillier.insert(i, cached_paillier(i, options.paillier)?);
        }
        let public: Arc<BTreeMap<PartyIndex, PaillierPublicKey>> =
            Arc::new(paillier.iter().map(|(&i, k)| (i, k.public().clone())).collect());
        let contexts = identities
            .into_iter()
            .map(|id| {
                let index = id.index();
                let endpoint = network.endpoint(id, directory.clone(), options.transport.clone());
                let ctx = PartyContext {
                    endpoint,
                    paillier: paillier[&index].clone(),
                    paillier_keys: public.clone(),
                    profile: options.profile,
                    faults: FaultPlan::default(),
                };
                (index, ctx)
            })
            .collect();
        Ok(LocalCluster { network, contexts })
    }

    pub fn network(&self) -> &InProcessNetwork {
        &self.network
    }

    pub fn parties(&self) -> Vec<PartyIndex> {
        self.contexts.keys().copied().collect()
    }

    pub fn context(&self, party: PartyIndex) -> &PartyContext {
        &self.contexts[&party]
    }

    pub fn set_faults(&mut self, party: PartyIndex, faults: FaultPlan) {
        if let Some(ctx) = self.contexts.get_mut(&party) {
            ctx.faults = faults;
        }
    }

    pub fn clear_faults(&mut self) {
        for ctx in self.contexts.values_mut() {
            ctx.faults = FaultPlan::default();
        }
    }

    fn run<T: Send, I: Send>(
        &self,
        room: RoomId,
        inputs: BTreeMap<PartyIndex, I>,
        f: impl Fn(&PartyContext, I) -> Outcome<T> + Sync,
    ) -> Session<T> {
        let start = Instant::now();
        let outcomes: Vec<(PartyIndex, Outcome<T>)> = std::thread::scope(|scope| {
            let handles: Vec<_> = inputs
                .into_iter()
                .map(|(p, input)| {
                    let ctx = &self.contexts[&p];
                    let f = &f;
                    (p, scope.spawn(move || f(ctx, input)))
                })
                .collect();
            handles
                .into_iter()
                .map(|(p, h)| (p, h.join().expect("party thread panicked")))
                .collect()
        });
        let wall = start.elapsed();
        let mut session = Session {
            room,
            outputs: BTreeMap::new(),
            stats: BTreeMap::new(),
            wall,
        };
        for (p, o) in outcomes {
            session.outputs.insert(p, o.result);
            session.stats.insert(p, o.stats);
        }
        session
    }

    /// Keygen among all parties.
    pub fn keygen(&self, threshold: u16) -> Session<KeyShareRecord> {
        let room = RoomId::random(&mut OsRng);
        let key_uuid = Uuid::new_v4();
        let parties = self.parties();
        let inputs = parties.iter().map(|&p| (p, ())).collect();
        self.run(room, inputs, |ctx, ()| session::keygen(ctx, room, &parties, threshold, key_uuid))
    }

    pub fn presign(&self, keys: &BTreeMap<PartyIndex, KeyShareRecord>, signers: &[PartyIndex]) -> Session<PresignatureRecord> {
        let room = RoomId::random(&mut OsRng);
        let inputs = signers.iter().map(|&p| (p, &keys[&p])).collect();
        self.run(room, inputs, |ctx, key| session::presign(ctx, room, key, signers))
    }

    pub fn sign(
        &self,
        presigs: BTreeMap<PartyIndex, PresignatureRecord>,
        public_key: &GroupPoint,
        digest: &Digest,
    ) -> (Session<EcdsaSignature>, BTreeMap<PartyIndex, PresignatureRecord>) {
        let room = RoomId::random(&mut OsRng);
        let used = Mutex::new(BTreeMap::new());
        let session = self.run(room, presigs, |ctx, mut presig| {
            let out = session::sign(ctx, room, &mut presig, public_key, digest);
            used.lock().expect("lock").insert(ctx.index(), presig);
            out
        });
        (session, used.into_inner().expect("lock"))
    }

    pub fn sign_interactive(
        &self,
        keys: &BTreeMap<PartyIndex, KeyShareRecord>,
        signers: &[PartyIndex],
        digest: &Digest,
    ) -> Session<EcdsaSignature> {
        let room = RoomId::random(&mut OsRng);
        let inputs = signers.iter().map(|&p| (p, &keys[&p])).collect();
        self.run(room, inputs, |ctx, key| session::sign_interactive(ctx, room, key, signers, digest))
    }
}
