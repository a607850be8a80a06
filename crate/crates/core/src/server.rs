//! Round orchestration. Clients train in parallel; everything after the
//! uploads (decoding, aggregation, billing, dispatch) runs on one thread in
//! client-id order so floating-point reductions never depend on scheduling.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accounting::{count_style_params, CostLedger, Direction};
use crate::aggregation::{
    cluster_mass, fedavg_aggregate, personalized_aggregate_with_basis, sample_participants, SiteAttention,
};
use crate::client::{ClientState, Incoming, LocalTraining, StyleUpdate};
use crate::config::{ExperimentConfig, SimilarityBasis, Strategy};
use crate::error::{Error, Result};
use crate::lora::{AdapterRole, AdapterSet, Matrix};
use crate::rng::{stream, stream_rng};
use crate::synth::{generate_world, MetricsRecord, World};

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    personalized_store: BTreeMap<usize, AdapterSet>,
    pub global_init: AdapterSet,
    pub round: usize,
}

impl ServerState {
    pub fn new(global_init: AdapterSet) -> Result<Self> {
        if global_init.role != AdapterRole::Style {
            return Err(Error::Protocol("global init must be a style adapter".into()));
        }
        Ok(Self { personalized_store: BTreeMap::new(), global_init, round: 0 })
    }

    pub fn store(&self) -> &BTreeMap<usize, AdapterSet> {
        &self.personalized_store
    }

    pub fn stored(&self, client: usize) -> Option<&AdapterSet> {
        self.personalized_store.get(&client)
    }

    pub fn put(&mut self, client: usize, set: AdapterSet) -> Result<()> {
        if set.role != AdapterRole::Style {
            return Err(Error::Invariant("identity adapter offered to the server store".into()));
        }
        self.personalized_store.insert(client, set);
        Ok(())
    }

    /// What a client installs before training.
    pub fn outgoing(&self, client: usize) -> Incoming<'_> {
        match self.personalized_store.get(&client) {
            Some(set) => Incoming::Personalized(set),
            None => Incoming::GlobalInit(&self.global_init),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireMessage {
    pub round: usize,
    pub client_id: usize,
    pub direction: Direction,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientMetrics {
    pub client_id: usize,
    pub cluster: usize,
    pub participated: bool,
    #[serde(flatten)]
    pub metrics: MetricsRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub strategy: Strategy,
    pub world_hash: String,
    pub participants: Vec<usize>,
    /// Per site; empty when the strategy computes no attention.
    pub attention: Vec<SiteAttention>,
    pub upload_params: u64,
    pub download_params: u64,
    pub cumulative_bytes: u64,
    pub cumulative_gib: f64,
    pub metrics: Vec<ClientMetrics>,
}

impl RoundRecord {
    pub fn mean_expressive_mse(&self) -> f64 {
        mean(self.metrics.iter().map(|m| m.metrics.expressive_test_mse))
    }

    pub fn mean_identity_error(&self) -> f64 {
        mean(self.metrics.iter().map(|m| m.metrics.identity_error))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultsBundle {
    pub config: ExperimentConfig,
    pub world_hash: String,
    pub initial: Vec<ClientMetrics>,
    pub rounds: Vec<RoundRecord>,
    pub ledger: CostLedger,
    pub wire_log: Vec<WireMessage>,
}

impl ResultsBundle {
    pub fn final_metrics(&self) -> &[ClientMetrics] {
        self.rounds.last().map(|r| r.metrics.as_slice()).unwrap_or(&self.initial)
    }

    pub fn final_mean_expressive_mse(&self) -> f64 {
        mean(self.final_metrics().iter().map(|m| m.metrics.expressive_test_mse))
    }

    pub fn final_mean_identity_error(&self) -> f64 {
        mean(self.final_metrics().iter().map(|m| m.metrics.identity_error))
    }

    pub fn final_mean_neutral_mse(&self) -> f64 {
        mean(self.final_metrics().iter().map(|m| m.metrics.neutral_test_mse))
    }

    pub fn final_mean_style_error(&self) -> f64 {
        mean(self.final_metrics().iter().map(|m| m.metrics.style_error))
    }

    /// Mean (within, cross) cluster attention mass over the last `k` rounds,
    /// averaged across sites and across the alpha and beta matrices.
    pub fn cluster_attention_mass(&self, k: usize) -> Option<(f64, f64)> {
        let mut acc = (0.0, 0.0, 0usize);
        for rec in self.rounds.iter().rev().take(k) {
            let clusters: Vec<usize> = rec
                .participants
                .iter()
                .map(|&id| rec.metrics[id].cluster)
                .collect();
            for site in &rec.attention {
                for att in [&site.alpha, &site.beta] {
                    let (w, c) = cluster_mass(att, &clusters);
                    acc = (acc.0 + w, acc.1 + c, acc.2 + 1);
                }
            }
        }
        (acc.2 > 0).then(|| (acc.0 / acc.2 as f64, acc.1 / acc.2 as f64))
    }

    /// Same as [`Self::cluster_attention_mass`] restricted to alpha (`A`) or
    /// beta (`B`) matrices.
    pub fn cluster_attention_mass_of(&self, k: usize, factor: Factor) -> Option<(f64, f64)> {
        let mut acc = (0.0, 0.0, 0usize);
        for rec in self.rounds.iter().rev().take(k) {
            let clusters: Vec<usize> = rec.participants.iter().map(|&id| rec.metrics[id].cluster).collect();
            for site in &rec.attention {
                let att = match factor {
                    Factor::A => &site.alpha,
                    Factor::B => &site.beta,
                };
                let (w, c) = cluster_mass(att, &clusters);
                acc = (acc.0 + w, acc.1 + c, acc.2 + 1);
            }
        }
        (acc.2 > 0).then(|| (acc.0 / acc.2 as f64, acc.1 / acc.2 as f64))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Factor {
    A,
    B,
}

/// Adapter bytes captured around one client's local phases.
///
/// Index 0 is after installation, 1 after the timbre phase, 2 after the
/// stylization phase.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseAudit {
    pub round: usize,
    pub client_id: usize,
    pub id: [Vec<u8>; 3],
    pub style: [Vec<u8>; 3],
}

impl PhaseAudit {
    /// Timbre training left the style adapter alone and stylization left the
    /// identity adapter alone.
    pub fn isolated(&self) -> bool {
        self.style[0] == self.style[1] && self.id[1] == self.id[2]
    }
}

/// A running federation over one world.
pub struct Simulation {
    pub config: ExperimentConfig,
    pub world: Arc<World>,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub ledger: CostLedger,
    pub wire_log: Vec<WireMessage>,
    /// When set, every local update appends a [`PhaseAudit`].
    pub audit: Option<Vec<PhaseAudit>>,
    local: LocalTraining,
}

impl Simulation {
    pub fn new(config: ExperimentConfig, world: Arc<World>) -> Result<Self> {
        config.validate()?;
        if world.spec != config.world {
            return Err(Error::Config("world does not match the configured world spec".into()));
        }
        let spec = &config.world;
        let (rank, alpha) = (config.adapter.rank, config.adapter.alpha);
        let mut rng = stream_rng(config.seed, &[stream::GLOBAL_INIT]);
        let global_init = AdapterSet::init(AdapterRole::Style, spec.num_sites, spec.d_out, spec.d_in, rank, alpha, &mut rng)?;
        let clients = (0..spec.num_clients)
            .map(|i| {
                let mut rng = stream_rng(config.seed, &[stream::CLIENT_INIT, i as u64]);
                let id = AdapterSet::init(AdapterRole::Identity, spec.num_sites, spec.d_out, spec.d_in, rank, alpha, &mut rng)?;
                ClientState::new(i, id, global_init.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        let local = LocalTraining {
            schedule: config.schedule,
            optimizer: config.optimizer,
            layout: config.strategy.layout(),
            rounds: config.rounds,
        };
        Ok(Self {
            ledger: CostLedger::new(config.bytes_per_param),
            server: ServerState::new(global_init)?,
            clients,
            world,
            local,
            wire_log: Vec::new(),
            audit: None,
            config,
        })
    }

    /// The style adapter a client would deploy right now.
    pub fn deployed_style(&self, client: usize) -> &AdapterSet {
        match self.server.stored(client) {
            Some(set) if self.local.layout.uploads => set,
            _ => &self.clients[client].style_adapter,
        }
    }

    pub fn evaluate_all(&self, participants: &[usize]) -> Result<Vec<ClientMetrics>> {
        self.clients
            .iter()
            .map(|c| {
                let metrics = self.world.evaluate_client_gated(
                    c.client_id,
                    &c.id_adapter,
                    self.deployed_style(c.client_id),
                    self.local.layout.gate,
                )?;
                Ok(ClientMetrics {
                    client_id: c.client_id,
                    cluster: self.world.assignment[c.client_id],
                    participated: participants.binary_search(&c.client_id).is_ok(),
                    metrics,
                })
            })
            .collect()
    }

    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let round = self.server.round + 1;
        let cfg = &self.config;
        let plan = sample_participants(self.world.num_clients(), cfg.participation_rate, round, cfg.seed)?;
        let mut in_plan = vec![false; self.world.num_clients()];
        for &id in &plan.participant_ids {
            in_plan[id] = true;
        }

        let installed: BTreeMap<usize, AdapterSet> = plan
            .participant_ids
            .iter()
            .map(|&id| {
                let (Incoming::Personalized(s) | Incoming::GlobalInit(s)) = self.server.outgoing(id);
                (id, s.clone())
            })
            .collect();

        let world = &self.world;
        let local = &self.local;
        let seed = cfg.seed;
        let installed_ref = &installed;
        let auditing = self.audit.is_some();
        let mut trained: Vec<(StyleUpdate, Option<PhaseAudit>)> = self
            .clients
            .par_iter_mut()
            .filter(|c| in_plan[c.client_id])
            .map(|c| -> Result<(StyleUpdate, Option<PhaseAudit>)> {
                let id = c.client_id as u64;
                let snap = |c: &ClientState| (c.id_adapter.fingerprint(), c.style_adapter.fingerprint());
                c.install_style(Incoming::Personalized(&installed_ref[&c.client_id]))?;
                let s0 = auditing.then(|| snap(c));
                c.timbre_phase(world, local, &mut stream_rng(seed, &[stream::TIMBRE, round as u64, id]))?;
                let s1 = auditing.then(|| snap(c));
                let up = c.style_phase(world, local, round, &mut stream_rng(seed, &[stream::STYLE, round as u64, id]))?;
                let audit = s0.zip(s1).map(|(s0, s1)| {
                    let s2 = snap(c);
                    PhaseAudit { round, client_id: c.client_id, id: [s0.0, s1.0, s2.0], style: [s0.1, s1.1, s2.1] }
                });
                Ok((up, audit))
            })
            .collect::<Result<Vec<_>>>()?;
        trained.sort_by_key(|(u, _)| u.client_id);
        let (trained, audits): (Vec<StyleUpdate>, Vec<Option<PhaseAudit>>) = trained.into_iter().unzip();
        if let Some(log) = self.audit.as_mut() {
            log.extend(audits.into_iter().flatten());
        }

        let mut upload_params = 0u64;
        let mut download_params = 0u64;
        let mut attention = Vec::new();

        if self.local.layout.uploads {
            // Server-side view: only what was decoded off the wire.
            let mut received = Vec::with_capacity(trained.len());
            for up in &trained {
                let bytes = up.to_wire();
                upload_params += count_style_params(&bytes)?;
                if self.config.cost_scope.bills(Direction::Upload) {
                    self.ledger.record_payload(round, up.client_id, Direction::Upload, &bytes)?;
                }
                received.push(StyleUpdate::from_wire(&bytes)?);
                self.wire_log.push(WireMessage { round, client_id: up.client_id, direction: Direction::Upload, bytes });
            }

            let outputs: BTreeMap<usize, AdapterSet> = match self.config.strategy {
                Strategy::FedPisa | Strategy::NoIdLora => {
                    let basis: Option<Vec<Vec<(Matrix, Matrix)>>> = match self.config.similarity_basis {
                        SimilarityBasis::Absolute => None,
                        SimilarityBasis::Delta => Some(
                            received
                                .iter()
                                .map(|u| {
                                    u.sites
                                        .iter()
                                        .zip(&installed[&u.client_id].sites)
                                        .map(|(now, before)| (now.a() - before.a(), now.b() - before.b()))
                                        .collect()
                                })
                                .collect(),
                        ),
                    };
                    let res = personalized_aggregate_with_basis(&received, basis.as_deref(), self.config.tau)?;
                    attention = res.attention;
                    res.outputs
                        .into_iter()
                        .map(|(id, sites)| (id, AdapterSet::new(AdapterRole::Style, sites)))
                        .collect()
                }
                Strategy::FedAvg => {
                    let sizes: Vec<usize> = received
                        .iter()
                        .map(|u| self.world.datasets[u.client_id].expressive.train.len())
                        .collect();
                    let avg = fedavg_aggregate(&received, self.config.fedavg_weighting, Some(&sizes))?;
                    let set = AdapterSet::new(AdapterRole::Style, avg);
                    received.iter().map(|u| (u.client_id, set.clone())).collect()
                }
                Strategy::LocalOnly => received.iter().map(|u| (u.client_id, u.as_adapter_set())).collect(),
                Strategy::NoStyleLora => unreachable!("strategy never uploads"),
            };

            for (id, set) in outputs {
                let bytes = StyleUpdate::new(id, round, &set).to_wire();
                download_params += count_style_params(&bytes)?;
                if self.config.cost_scope.bills(Direction::Download) {
                    self.ledger.record_payload(round, id, Direction::Download, &bytes)?;
                }
                self.wire_log.push(WireMessage { round, client_id: id, direction: Direction::Download, bytes });
                self.server.put(id, set)?;
            }
        }

        self.server.round = round;
        let metrics = self.evaluate_all(&plan.participant_ids)?;
        let cumulative_bytes = self.ledger.total_bytes();
        Ok(RoundRecord {
            round,
            strategy: self.config.strategy,
            world_hash: self.world.hash_hex(),
            participants: plan.participant_ids,
            attention,
            upload_params,
            download_params,
            cumulative_bytes,
            cumulative_gib: self.ledger.total_cost_gib(),
            metrics,
        })
    }

    pub fn run(mut self) -> Result<ResultsBundle> {
        let initial = self.evaluate_all(&[])?;
        let mut rounds = Vec::with_capacity(self.config.rounds);
        for _ in 0..self.config.rounds {
            rounds.push(self.run_round()?);
        }
        Ok(ResultsBundle {
            world_hash: self.world.hash_hex(),
            config: self.config,
            initial,
            rounds,
            ledger: self.ledger,
            wire_log: self.wire_log,
        })
    }
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ResultsBundle> {
    config.validate()?;
    let world = Arc::new(generate_world(&config.world)?);
    run_experiment_on(config, world)
}

pub fn run_experiment_on(config: &ExperimentConfig, world: Arc<World>) -> Result<ResultsBundle> {
    Simulation::new(config.clone(), world)?.run()
}
