//! A client's local lifecycle: install the personalized style adapter, run the
//! timbre phase (identity only) and the stylization phase (style only), and
//! produce the style upload.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::accounting::MESSAGE_HEADER_LEN;
use crate::error::{Error, Result};
use crate::lora::{AdapterRole, AdapterSet, LoraAdapter, Matrix};
use crate::model::{grad_adapter, Batch, StyleGate};
use crate::optim::{lr_at, AdamWParams, AdamWState, ScheduleConfig};
use crate::rng::SimRng;
use crate::synth::World;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdTraining {
    /// Identity adapter is trained on the client's first participation only.
    #[default]
    FirstParticipation,
    EveryRound,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub timbre_steps: usize,
    pub style_steps: usize,
    pub batch_size: usize,
    pub id_training: IdTraining,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self { timbre_steps: 80, style_steps: 20, batch_size: 16, id_training: IdTraining::FirstParticipation }
    }
}

impl TrainSchedule {
    pub fn local_budget(&self) -> usize {
        self.timbre_steps + self.style_steps
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleScope {
    /// Each local phase runs its own warmup + cosine schedule.
    #[default]
    Phase,
    /// One schedule per (client, adapter) spanning every round.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub warmup_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule_scope: ScheduleScope,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let hp = AdamWParams::default();
        Self {
            lr: 2e-5,
            warmup_ratio: 0.1,
            beta1: hp.beta1,
            beta2: hp.beta2,
            eps: hp.eps,
            weight_decay: hp.weight_decay,
            schedule_scope: ScheduleScope::Phase,
        }
    }
}

impl OptimizerConfig {
    pub fn adamw(&self) -> AdamWParams {
        AdamWParams { beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }

    pub fn validate(&self) -> Result<()> {
        ScheduleConfig { peak_lr: self.lr, total_steps: 1, warmup_ratio: self.warmup_ratio }.validate()?;
        self.adamw().validate()
    }
}

/// Which adapter each phase trains, how style is gated, and whether the
/// style adapter leaves the device.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterLayout {
    pub timbre_target: AdapterRole,
    pub style_target: AdapterRole,
    pub gate: StyleGate,
    pub uploads: bool,
}

impl Default for AdapterLayout {
    fn default() -> Self {
        Self {
            timbre_target: AdapterRole::Identity,
            style_target: AdapterRole::Style,
            gate: StyleGate::ExpressiveOnly,
            uploads: true,
        }
    }
}

/// Everything a client needs to run its local phases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTraining {
    pub schedule: TrainSchedule,
    pub optimizer: OptimizerConfig,
    pub layout: AdapterLayout,
    /// Experiment length, used to size the global schedule.
    pub rounds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleUpdate {
    pub client_id: usize,
    pub round: usize,
    pub sites: Vec<LoraAdapter>,
    pub param_count: usize,
}

impl StyleUpdate {
    pub fn new(client_id: usize, round: usize, style: &AdapterSet) -> Self {
        Self { client_id, round, sites: style.sites.clone(), param_count: style.param_count() }
    }

    pub fn a_factor(&self) -> &Matrix {
        self.sites[0].a()
    }

    pub fn b_factor(&self) -> &Matrix {
        self.sites[0].b()
    }

    pub fn as_adapter_set(&self) -> AdapterSet {
        AdapterSet::new(AdapterRole::Style, self.sites.clone())
    }

    /// `client_id u32, round u32` followed by one style-role adapter record
    /// per site.
    pub fn to_wire(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(MESSAGE_HEADER_LEN + self.param_count * 8 + 21 * self.sites.len());
        out.extend_from_slice(&(self.client_id as u32).to_le_bytes());
        out.extend_from_slice(&(self.round as u32).to_le_bytes());
        for site in &self.sites {
            site.encode(AdapterRole::Style, &mut out);
        }
        out
    }

    pub fn from_wire(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MESSAGE_HEADER_LEN {
            return Err(Error::Decode("style update shorter than its header".into()));
        }
        let client_id = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
        let round = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let mut rest = &bytes[MESSAGE_HEADER_LEN..];
        let mut sites = Vec::new();
        while !rest.is_empty() {
            let (role, adapter, used) = LoraAdapter::decode(rest)?;
            if role != AdapterRole::Style {
                return Err(Error::Invariant("identity adapter inside a style update".into()));
            }
            sites.push(adapter);
            rest = &rest[used..];
        }
        if sites.is_empty() {
            return Err(Error::Decode("style update without adapters".into()));
        }
        let param_count = sites.iter().map(LoraAdapter::param_count).sum();
        Ok(Self { client_id, round, sites, param_count })
    }
}

/// What the server hands a client before local training.
#[derive(Debug, Clone, Copy)]
pub enum Incoming<'a> {
    Personalized(&'a AdapterSet),
    GlobalInit(&'a AdapterSet),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub client_id: usize,
    pub id_adapter: AdapterSet,
    pub style_adapter: AdapterSet,
    pub id_opt_state: AdamWState,
    pub style_opt_state: AdamWState,
    pub has_trained_id: bool,
    pub id_steps_done: usize,
    pub style_steps_done: usize,
}

impl ClientState {
    pub fn new(client_id: usize, id_adapter: AdapterSet, style_adapter: AdapterSet) -> Result<Self> {
        if id_adapter.role != AdapterRole::Identity || style_adapter.role != AdapterRole::Style {
            return Err(Error::Protocol("client adapters have the wrong roles".into()));
        }
        Ok(Self {
            client_id,
            id_opt_state: AdamWState::for_adapters(&id_adapter),
            style_opt_state: AdamWState::for_adapters(&style_adapter),
            id_adapter,
            style_adapter,
            has_trained_id: false,
            id_steps_done: 0,
            style_steps_done: 0,
        })
    }

    /// Replace the style adapter and reset its optimizer moments.
    pub fn install_style(&mut self, incoming: Incoming<'_>) -> Result<()> {
        let (Incoming::Personalized(set) | Incoming::GlobalInit(set)) = incoming;
        if set.role != AdapterRole::Style {
            return Err(Error::Protocol("only style adapters can be installed".into()));
        }
        if !set.same_shape(&self.style_adapter) {
            return Err(Error::Protocol(format!(
                "client {}: incoming style adapter shape does not match",
                self.client_id
            )));
        }
        self.style_adapter = set.clone();
        self.style_opt_state = AdamWState::for_adapters(&self.style_adapter);
        Ok(())
    }

    /// Timbre phase: `n` AdamW steps on neutral batches, updating only the
    /// layout's timbre target.
    pub fn timbre_phase(&mut self, world: &World, local: &LocalTraining, rng: &mut SimRng) -> Result<()> {
        let target = local.layout.timbre_target;
        if target == AdapterRole::Identity
            && local.schedule.id_training == IdTraining::FirstParticipation
            && self.has_trained_id
        {
            return Ok(());
        }
        let data = world.client_data(self.client_id)?;
        self.run_phase(world, &data.neutral.train, target, local.schedule.timbre_steps, local, rng)?;
        if target == AdapterRole::Identity {
            self.has_trained_id = true;
        }
        Ok(())
    }

    /// Stylization phase: `m` AdamW steps on expressive batches, then the
    /// style adapter is packaged as the round's upload.
    pub fn style_phase(&mut self, world: &World, local: &LocalTraining, round: usize, rng: &mut SimRng) -> Result<StyleUpdate> {
        let data = world.client_data(self.client_id)?;
        self.run_phase(world, &data.expressive.train, local.layout.style_target, local.schedule.style_steps, local, rng)?;
        Ok(StyleUpdate::new(self.client_id, round, &self.style_adapter))
    }

    fn run_phase(
        &mut self,
        world: &World,
        split: &Batch,
        target: AdapterRole,
        steps: usize,
        local: &LocalTraining,
        rng: &mut SimRng,
    ) -> Result<()> {
        if split.is_empty() {
            return Err(Error::Data(format!(
                "client {}: no {:?} training data",
                self.client_id, split.style_label
            )));
        }
        if steps == 0 {
            return Ok(());
        }
        let opt = &local.optimizer;
        let hp = opt.adamw();
        let done = match target {
            AdapterRole::Identity => self.id_steps_done,
            AdapterRole::Style => self.style_steps_done,
        };
        let (sched, offset) = match opt.schedule_scope {
            ScheduleScope::Phase => (ScheduleConfig::new(opt.lr, steps, opt.warmup_ratio)?, 0),
            ScheduleScope::Global => {
                let total = steps * local.rounds.max(1);
                (ScheduleConfig::new(opt.lr, total, opt.warmup_ratio)?, done)
            }
        };
        let mut idx = vec![0usize; local.schedule.batch_size];
        for k in 0..steps {
            for slot in idx.iter_mut() {
                *slot = rng.random_range(0..split.len());
            }
            let batch = split.select(&idx);
            let grads = grad_adapter(
                &world.backbone,
                &self.id_adapter,
                &self.style_adapter,
                &batch,
                target,
                local.layout.gate,
            )?;
            let lr = lr_at(offset + k, &sched)?;
            match target {
                AdapterRole::Identity => self.id_opt_state.step_adapters(&mut self.id_adapter, &grads, lr, &hp)?,
                AdapterRole::Style => self.style_opt_state.step_adapters(&mut self.style_adapter, &grads, lr, &hp)?,
            }
        }
        match target {
            AdapterRole::Identity => self.id_steps_done += steps,
            AdapterRole::Style => self.style_steps_done += steps,
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{batch_loss, StyleGate};
    use crate::rng::seeded;
    use crate::synth::{generate_world, SampleCounts, WorldSpec};

    fn world() -> World {
        generate_world(&WorldSpec {
            num_clients: 3,
            num_style_clusters: 3,
            d_in: 4,
            d_out: 4,
            sigma_noise: 0.0,
            samples: SampleCounts { neutral_train: 32, expressive_train: 32, ..Default::default() },
            seed: 5,
            ..Default::default()
        })
        .unwrap()
    }

    fn client(world: &World, id: usize) -> ClientState {
        let spec = &world.spec;
        let mut rng = seeded(100 + id as u64);
        let ida = AdapterSet::init(AdapterRole::Identity, 1, spec.d_out, spec.d_in, 4, 4.0, &mut rng).unwrap();
        let sty = AdapterSet::init(AdapterRole::Style, 1, spec.d_out, spec.d_in, 4, 4.0, &mut rng).unwrap();
        ClientState::new(id, ida, sty).unwrap()
    }

    fn local(n: usize, m: usize) -> LocalTraining {
        LocalTraining {
            schedule: TrainSchedule { timbre_steps: n, style_steps: m, batch_size: 8, id_training: IdTraining::EveryRound },
            optimizer: OptimizerConfig { lr: 0.02, ..Default::default() },
            layout: AdapterLayout::default(),
            rounds: 1,
        }
    }

    #[test]
    fn global_init_and_own_upload_install_verbatim() {
        let w = world();
        let mut c = client(&w, 0);
        let id_before = c.id_adapter.fingerprint();
        let init = AdapterSet::init(AdapterRole::Style, 1, 4, 4, 4, 4.0, &mut seeded(9)).unwrap();
        c.install_style(Incoming::GlobalInit(&init)).unwrap();
        assert_eq!(c.style_adapter, init);
        assert!(c.style_adapter.merge_deltas()[0].iter().all(|v| *v == 0.0));
        let upload = c.style_phase(&w, &local(0, 5), 1, &mut seeded(1)).unwrap();
        let own = upload.as_adapter_set();
        c.install_style(Incoming::Personalized(&own)).unwrap();
        assert_eq!(c.style_adapter, own);
        assert_eq!(c.style_opt_state.step_count(), 0);
        assert_eq!(c.id_adapter.fingerprint(), id_before);
    }

    #[test]
    fn install_rejects_wrong_shape() {
        let w = world();
        let mut c = client(&w, 0);
        let wrong = AdapterSet::init(AdapterRole::Style, 1, 4, 4, 2, 4.0, &mut seeded(9)).unwrap();
        assert!(matches!(c.install_style(Incoming::Personalized(&wrong)), Err(Error::Protocol(_))));
    }

    #[test]
    fn zero_step_phases_leave_adapters_alone() {
        let w = world();
        let mut c = client(&w, 1);
        let before = c.clone();
        c.timbre_phase(&w, &local(0, 0), &mut seeded(2)).unwrap();
        let up = c.style_phase(&w, &local(0, 0), 1, &mut seeded(3)).unwrap();
        assert_eq!(c.id_adapter, before.id_adapter);
        assert_eq!(up.as_adapter_set(), before.style_adapter);
    }

    #[test]
    fn timbre_phase_lowers_neutral_loss_and_freezes_style() {
        let w = world();
        let mut c = client(&w, 2);
        let train = &w.datasets[2].neutral.train;
        let loss = |c: &ClientState| batch_loss(&w.backbone, &c.id_adapter, &c.style_adapter, train, StyleGate::ExpressiveOnly).unwrap();
        let before = loss(&c);
        let style_bytes = c.style_adapter.fingerprint();
        c.timbre_phase(&w, &local(80, 20), &mut seeded(4)).unwrap();
        assert!(loss(&c) < before);
        assert_eq!(c.style_adapter.fingerprint(), style_bytes);
        assert!(c.has_trained_id);
    }

    #[test]
    fn style_phase_lowers_expressive_loss_and_freezes_identity() {
        let w = world();
        let mut c = client(&w, 0);
        let truth = &w.id_truth[0][0];
        let exact = LoraAdapter::from_factors(Matrix::eye(4), truth.clone(), 4.0).unwrap();
        c.id_adapter = AdapterSet::new(AdapterRole::Identity, vec![exact]);
        let train = &w.datasets[0].expressive.train;
        let loss = |c: &ClientState| batch_loss(&w.backbone, &c.id_adapter, &c.style_adapter, train, StyleGate::ExpressiveOnly).unwrap();
        let before = loss(&c);
        let id_bytes = c.id_adapter.fingerprint();
        let up = c.style_phase(&w, &local(80, 20), 1, &mut seeded(5)).unwrap();
        assert!(loss(&c) < before);
        assert_eq!(c.id_adapter.fingerprint(), id_bytes);
        assert_eq!(up.param_count, up.a_factor().len() + up.b_factor().len());
    }

    #[test]
    fn first_participation_trains_identity_once() {
        let w = world();
        let mut c = client(&w, 1);
        let mut lt = local(10, 0);
        lt.schedule.id_training = IdTraining::FirstParticipation;
        c.timbre_phase(&w, &lt, &mut seeded(6)).unwrap();
        let after_first = c.id_adapter.clone();
        c.timbre_phase(&w, &lt, &mut seeded(7)).unwrap();
        assert_eq!(c.id_adapter, after_first);
        lt.schedule.id_training = IdTraining::EveryRound;
        c.timbre_phase(&w, &lt, &mut seeded(7)).unwrap();
        assert_ne!(c.id_adapter, after_first);
    }

    #[test]
    fn identical_inputs_give_identical_updates() {
        let w = world();
        let run = || {
            let mut c = client(&w, 2);
            c.timbre_phase(&w, &local(12, 8), &mut seeded(11)).unwrap();
            c.style_phase(&w, &local(12, 8), 3, &mut seeded(12)).unwrap().to_wire()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn wire_form_has_header_and_style_role_only() {
        let w = world();
        let c = client(&w, 1);
        let up = StyleUpdate::new(1, 7, &c.style_adapter);
        let bytes = up.to_wire();
        assert_eq!(&bytes[0..4], &1u32.to_le_bytes());
        assert_eq!(&bytes[4..8], &7u32.to_le_bytes());
        assert_eq!(bytes[8], AdapterRole::Style.tag());
        assert_eq!(StyleUpdate::from_wire(&bytes).unwrap(), up);
        let mut tampered = bytes.clone();
        tampered[8] = AdapterRole::Identity.tag();
        assert!(matches!(StyleUpdate::from_wire(&tampered), Err(Error::Invariant(_))));
    }

    #[test]
    fn global_scope_exhausts_after_planned_rounds() {
        let w = world();
        let mut c = client(&w, 0);
        let mut lt = local(5, 0);
        lt.optimizer.schedule_scope = ScheduleScope::Global;
        lt.rounds = 2;
        c.timbre_phase(&w, &lt, &mut seeded(1)).unwrap();
        c.timbre_phase(&w, &lt, &mut seeded(2)).unwrap();
        assert!(matches!(c.timbre_phase(&w, &lt, &mut seeded(3)), Err(Error::ScheduleExhausted { .. })));
    }
}
