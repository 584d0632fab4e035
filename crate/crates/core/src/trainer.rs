//! Adversarial training: the progressive grow-and-defreeze pipeline, the
//! jointly trained baseline, encoder training and the branch-suppression lab.
//!
//! Every stage after the first runs in two phases. In Stage I only the newly
//! grown generator layers (plus the whole discriminator) train while the new
//! sub-vector is fed zeros. In Stage II everything trains and the new
//! sub-vector is drawn from `U(-alpha, alpha)` with `alpha` ramping from 0 to 1.
//!
//! All randomness is keyed by `(seed, global step)` and the batch order by
//! `(shuffle seed, stage, step)`, so a run resumed from a checkpoint repeats
//! the uninterrupted run bit for bit.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::config::{NetConfig, Profile};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::latent::{sample_latent, BranchedLatent, SamplePolicy, SubvectorSource};
use crate::networks::{Discriminator, Encoder, Generator, Network};
use crate::nn::layers::sigmoid;
use crate::nn::{self, Adam, Grads, Tensor};
use crate::rng;
use crate::spectral::{variance_image, VarianceImage};

// seed-derivation tags
const TAG_G_INIT: u64 = 1;
const TAG_D_INIT: u64 = 2;
const TAG_GROW: u64 = 3;
const TAG_STEP: u64 = 4;
const TAG_ENC_INIT: u64 = 5;
const TAG_ENC_TRAIN: u64 = 6;
const TAG_ENC_HELDOUT: u64 = 7;
const TAG_SUPPRESS: u64 = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimSpec {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub batch_size: usize,
}

impl Default for OptimSpec {
    fn default() -> Self {
        OptimSpec {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 16,
        }
    }
}

impl OptimSpec {
    pub fn for_profile(profile: Profile) -> Self {
        OptimSpec {
            batch_size: profile.batch_size(),
            ..OptimSpec::default()
        }
    }

    pub fn adam(&self) -> Adam {
        Adam::new(self.learning_rate, self.beta1, self.beta2)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("optimizer needs lr > 0 and betas in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RampShape {
    Linear,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaRamp {
    pub start: f32,
    pub end: f32,
    pub shape: RampShape,
}

impl Default for AlphaRamp {
    fn default() -> Self {
        AlphaRamp {
            start: 0.0,
            end: 1.0,
            shape: RampShape::Linear,
        }
    }
}

impl AlphaRamp {
    /// Value at step `i` of `n`; hits `start` at 0 and `end` at `n - 1` exactly.
    pub fn value(&self, i: usize, n: usize) -> f32 {
        if n <= 1 || i + 1 >= n {
            return self.end;
        }
        if i == 0 {
            return self.start;
        }
        let frac = i as f64 / (n - 1) as f64;
        let shaped = match self.shape {
            RampShape::Linear => frac,
            RampShape::Cosine => 0.5 - 0.5 * (PI * frac).cos(),
        };
        let v = f64::from(self.start) + (f64::from(self.end) - f64::from(self.start)) * shaped;
        (v as f32).clamp(self.start, self.end)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// The first stage: everything trains, only `z^0` is active.
    Base,
    /// New block only, new sub-vector zero-fed.
    StageI,
    /// Everything trains, new sub-vector ramps in.
    StageII,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleStage {
    /// 1-based stage index.
    pub stage: usize,
    pub resolution: (usize, usize),
    pub epochs: usize,
    /// Fixed step budget; overrides `epochs` when set.
    #[serde(default)]
    pub steps: Option<usize>,
    pub stage1_fraction: f64,
    pub alpha_ramp: AlphaRamp,
    /// Sub-vectors active during this stage (the newest one ramps in).
    pub active: Vec<usize>,
}

impl ScheduleStage {
    pub fn total_steps(&self, dataset_len: usize, batch_size: usize) -> usize {
        self.steps
            .unwrap_or_else(|| (self.epochs * dataset_len).div_ceil(batch_size.max(1)))
            .max(1)
    }

    /// Length of Stage I; zero for the first stage. Stage II keeps at least one step.
    pub fn stage1_steps(&self, total: usize) -> usize {
        if self.stage == 1 || total < 2 {
            return 0;
        }
        ((self.stage1_fraction * total as f64).round() as usize).clamp(1, total - 1)
    }

    pub fn new_subvector(&self) -> Option<usize> {
        (self.stage > 1).then(|| self.stage - 1)
    }

    pub fn phase_at(&self, step: usize, total: usize) -> Phase {
        if self.stage == 1 {
            Phase::Base
        } else if step < self.stage1_steps(total) {
            Phase::StageI
        } else {
            Phase::StageII
        }
    }

    /// Sampling range of the new sub-vector at `step` (None before Stage II or at stage 1).
    pub fn alpha(&self, step: usize, total: usize) -> Option<f32> {
        let s1 = self.stage1_steps(total);
        (self.phase_at(step, total) == Phase::StageII).then(|| self.alpha_ramp.value(step - s1, total - s1))
    }

    pub fn policy(&self, branches: usize, step: usize, total: usize) -> SamplePolicy {
        let mut policy = SamplePolicy::active(branches, &self.active);
        if let Some(t) = self.new_subvector() {
            policy.sources[t] = match self.alpha(step, total) {
                Some(alpha) => SubvectorSource::Uniform { alpha },
                None => SubvectorSource::Frozen,
            };
        }
        policy
    }

    /// Trainable parameter names for `phase`.
    pub fn mask(&self, g: &Generator, d: &Discriminator, phase: Phase) -> BTreeSet<String> {
        let mut mask = d.active_params();
        match phase {
            Phase::StageI => mask.extend(g.growth_unit()),
            Phase::Base | Phase::StageII => mask.extend(g.active_params()),
        }
        mask
    }
}

/// The standard pipeline: one stage per resolution, one new sub-vector per stage.
pub fn default_schedule(config: &NetConfig, epochs: usize) -> Vec<ScheduleStage> {
    let res = config.resolutions();
    (1..=config.stages)
        .map(|s| ScheduleStage {
            stage: s,
            resolution: res[s],
            epochs,
            steps: None,
            stage1_fraction: 0.25,
            alpha_ramp: AlphaRamp::default(),
            active: (0..s).collect(),
        })
        .collect()
}

/// Same schedule with a fixed step budget per stage.
pub fn fixed_step_schedule(config: &NetConfig, steps: usize) -> Vec<ScheduleStage> {
    default_schedule(config, 0)
        .into_iter()
        .map(|s| ScheduleStage { steps: Some(steps), ..s })
        .collect()
}

pub fn validate_schedule(config: &NetConfig, schedule: &[ScheduleStage]) -> Result<()> {
    config.validate()?;
    if schedule.len() != config.stages {
        return Err(Error::InvalidConfig(format!(
            "schedule has {} stages, config has {}",
            schedule.len(),
            config.stages
        )));
    }
    if config.branch_count() < config.stages {
        return Err(Error::InvalidConfig(format!(
            "{} stages need at least as many sub-vectors (have {})",
            config.stages,
            config.branch_count()
        )));
    }
    let res = config.resolutions();
    for (i, s) in schedule.iter().enumerate() {
        let bad = |m: String| Err(Error::InvalidConfig(format!("schedule stage {}: {m}", i + 1)));
        if s.stage != i + 1 {
            return bad(format!("index {} out of order", s.stage));
        }
        if s.resolution != res[s.stage] {
            return bad(format!("resolution {:?}, network gives {:?}", s.resolution, res[s.stage]));
        }
        if s.active != (0..s.stage).collect::<Vec<_>>() {
            return bad(format!("active set {:?} must be 0..{}", s.active, s.stage));
        }
        if !(s.stage1_fraction > 0.0 && s.stage1_fraction < 1.0) {
            return bad("stage1_fraction must lie in (0, 1)".into());
        }
        if !(s.alpha_ramp.start <= s.alpha_ramp.end) || s.alpha_ramp.start < 0.0 || s.alpha_ramp.end > 1.0 {
            return bad("alpha ramp must be non-decreasing inside [0, 1]".into());
        }
        if s.steps == Some(0) || (s.steps.is_none() && s.epochs == 0) {
            return bad("needs a positive step or epoch budget".into());
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub global_step: u64,
    pub stage: usize,
    pub step: usize,
    pub phase: Phase,
    pub alpha: Option<f32>,
    pub d_loss: f64,
    pub g_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum StageEvent {
    StageStart { global_step: u64, stage: usize, resolution: (usize, usize), active: Vec<usize> },
    PhaseStart { global_step: u64, stage: usize, phase: Phase },
    StageEnd { global_step: u64, stage: usize },
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub seed: u64,
    pub stage: usize,
    pub step_in_stage: usize,
    pub global_step: u64,
    pub finished: bool,
    pub adam_g: Adam,
    pub adam_d: Adam,
    pub history: Vec<StepRecord>,
    pub events: Vec<StageEvent>,
}

impl TrainState {
    pub fn new(seed: u64, optim: &OptimSpec) -> Self {
        TrainState {
            seed,
            stage: 1,
            step_in_stage: 0,
            global_step: 0,
            finished: false,
            adam_g: optim.adam(),
            adam_d: optim.adam(),
            history: Vec::new(),
            events: Vec::new(),
        }
    }

    /// Per-step loss log as CSV.
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("global_step,stage,step,phase,alpha,d_loss,g_loss\n");
        for r in &self.history {
            let phase = serde_json::to_value(r.phase).expect("phase serializes");
            let alpha = r.alpha.map(|a| a.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.global_step,
                r.stage,
                r.step,
                phase.as_str().unwrap_or_default(),
                alpha,
                r.d_loss,
                r.g_loss
            ));
        }
        s
    }

    /// Stage-transition log, one JSON object per line.
    pub fn events_jsonl(&self) -> String {
        self.events
            .iter()
            .map(|e| serde_json::to_string(e).expect("event serializes") + "\n")
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub d_loss: f64,
    pub g_loss: f64,
    /// Nonzero gradient entries found in zero-fed first-linear columns.
    pub frozen_nonzero: usize,
}

fn softplus(x: f32) -> f64 {
    let x = f64::from(x);
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Generator, discriminator and their optimizers.
#[derive(Clone, Debug, PartialEq)]
pub struct GanModels {
    pub g: Generator,
    pub d: Discriminator,
    pub adam_g: Adam,
    pub adam_d: Adam,
}

impl GanModels {
    pub fn build(config: &NetConfig, stage: usize, optim: &OptimSpec, seed: u64) -> Result<Self> {
        Ok(GanModels {
            g: Generator::build(config, stage, rng::derive(seed, &[TAG_G_INIT]))?,
            d: Discriminator::build(config, stage, rng::derive(seed, &[TAG_D_INIT]))?,
            adam_g: optim.adam(),
            adam_d: optim.adam(),
        })
    }

    pub fn gan_step(
        &mut self,
        real: &Tensor,
        policy: &SamplePolicy,
        mask: &BTreeSet<String>,
        seed: u64,
    ) -> Result<StepOutcome> {
        gan_step(&mut self.g, &mut self.d, &mut self.adam_g, &mut self.adam_d, real, policy, mask, seed)
    }
}

/// One discriminator update followed by one generator update (non-saturating loss).
///
/// Only parameters named in `mask` change. Latents are drawn from `policy`
/// with a stream keyed by `seed`.
#[allow(clippy::too_many_arguments)]
pub fn gan_step(
    g: &mut Generator,
    d: &mut Discriminator,
    adam_g: &mut Adam,
    adam_d: &mut Adam,
    real: &Tensor,
    policy: &SamplePolicy,
    mask: &BTreeSet<String>,
    seed: u64,
) -> Result<StepOutcome> {
    let cfg = g.config().clone();
    policy.validate(&cfg)?;
    let (h, w) = g.resolution();
    if (real.h, real.w) != (h, w) || real.c != cfg.output_channels {
        return Err(Error::ResolutionMismatch {
            expected: (h, w),
            actual: (real.h, real.w),
        });
    }
    if let Some(bad) = mask
        .iter()
        .find(|k| !g.params.contains_key(*k) && !d.params.contains_key(*k))
    {
        return Err(Error::InvalidConfig(format!("mask names unknown parameter {bad}")));
    }
    let n = real.n;
    let mut r = rng::rng(seed, &[]);
    let zs: Vec<BranchedLatent> = (0..n).map(|_| policy.sample_with(&cfg, &mut r)).collect();
    let g_ops = g.ops();
    let d_ops = d.ops();
    let g_tape = g.forward(g.latents_to_tensor(&zs)?);
    let fake = g_tape.output();

    // discriminator: real and fake in one batch
    let mut both = Vec::with_capacity(2 * real.data.len());
    both.extend_from_slice(&real.data);
    both.extend_from_slice(&fake.data);
    let d_tape = d.forward(Tensor::from_vec(2 * n, real.c, h, w, both));
    let logits = &d_tape.output().data;
    let inv_n = 1.0 / n as f32;
    let mut d_loss = 0.0;
    let mut dlogit = Tensor::zeros(2 * n, 1, 1, 1);
    for (i, &l) in logits.iter().enumerate() {
        if i < n {
            d_loss += softplus(-l);
            dlogit.data[i] = -sigmoid(-l) * inv_n;
        } else {
            d_loss += softplus(l);
            dlogit.data[i] = sigmoid(l) * inv_n;
        }
    }
    d_loss /= n as f64;
    if !d_loss.is_finite() {
        return Err(Error::NonFinite(format!("discriminator loss {d_loss}")));
    }
    let mut d_grads = Grads::default();
    nn::backward(&d_ops, &d.params, &d_tape, dlogit, Some(&mut d_grads));
    adam_d.step(&mut d.params, &d_grads, |k| mask.contains(k));

    // generator through the updated discriminator
    let d_tape = d.forward(fake.clone());
    let mut g_loss = 0.0;
    let mut dlogit = Tensor::zeros(n, 1, 1, 1);
    for (i, &l) in d_tape.output().data.iter().enumerate() {
        g_loss += softplus(-l);
        dlogit.data[i] = -sigmoid(-l) * inv_n;
    }
    g_loss /= n as f64;
    if !g_loss.is_finite() {
        return Err(Error::NonFinite(format!("generator loss {g_loss}")));
    }
    let dx = nn::backward(&d_ops, &d.params, &d_tape, dlogit, None);
    let mut g_grads = Grads::default();
    nn::backward(&g_ops, &g.params, &g_tape, dx, Some(&mut g_grads));
    let frozen_nonzero = frozen_column_nonzeros(&cfg, &g_grads, &policy.frozen());
    adam_g.step(&mut g.params, &g_grads, |k| mask.contains(k));
    Ok(StepOutcome {
        d_loss,
        g_loss,
        frozen_nonzero,
    })
}

/// Counts nonzero gradient entries in the first-linear columns of `frozen` sub-vectors.
pub fn frozen_column_nonzeros(config: &NetConfig, grads: &Grads, frozen: &[usize]) -> usize {
    let Some(dw) = grads.get("g.linear.w") else {
        return 0;
    };
    let inputs = config.latent_dim();
    let offsets = config.subvector_offsets();
    let mut count = 0;
    for row in dw.chunks(inputs) {
        for &t in frozen {
            let cols = &row[offsets[t]..offsets[t] + config.subvector_dims[t]];
            count += cols.iter().filter(|v| **v != 0.0).count();
        }
    }
    count
}

/// Events observed while a [`Trainer`] runs.
#[derive(Clone, Debug)]
pub enum TrainEvent<'a> {
    Stage(&'a StageEvent),
    Step(&'a StepRecord),
}

/// Progressive trainer: owns the models exclusively while training.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: NetConfig,
    pub schedule: Vec<ScheduleStage>,
    pub optim: OptimSpec,
    pub g: Generator,
    pub d: Discriminator,
    pub state: TrainState,
    /// Abort with an error if a zero-fed column ever receives gradient.
    pub strict_freeze: bool,
}

impl Trainer {
    pub fn new(config: &NetConfig, schedule: Vec<ScheduleStage>, optim: OptimSpec, seed: u64) -> Result<Self> {
        validate_schedule(config, &schedule)?;
        optim.validate()?;
        let m = GanModels::build(config, 1, &optim, seed)?;
        Ok(Trainer {
            config: config.clone(),
            schedule,
            state: TrainState::new(seed, &optim),
            optim,
            g: m.g,
            d: m.d,
            strict_freeze: true,
        })
    }

    /// Continues from saved networks and state.
    pub fn resume(
        g: Generator,
        d: Discriminator,
        state: TrainState,
        schedule: Vec<ScheduleStage>,
        optim: OptimSpec,
    ) -> Result<Self> {
        let config = g.config().clone();
        validate_schedule(&config, &schedule)?;
        optim.validate()?;
        if g.stage() != state.stage || d.stage() != state.stage {
            return Err(Error::Checkpoint(format!(
                "networks at stages {}/{} but state at stage {}",
                g.stage(),
                d.stage(),
                state.stage
            )));
        }
        Ok(Trainer {
            config,
            schedule,
            optim,
            g,
            d,
            state,
            strict_freeze: true,
        })
    }

    pub fn total_steps(&self, dataset: &Dataset, stage: usize) -> usize {
        self.schedule[stage - 1].total_steps(dataset.len(), self.optim.batch_size)
    }

    /// Total step budget over all stages.
    pub fn budget(&self, dataset: &Dataset) -> usize {
        (1..=self.config.stages).map(|s| self.total_steps(dataset, s)).sum()
    }

    fn emit(&mut self, e: StageEvent, observer: &mut dyn FnMut(&Trainer, TrainEvent) -> Result<()>) -> Result<()> {
        self.state.events.push(e.clone());
        observer(self, TrainEvent::Stage(&e))
    }

    /// Runs one step, growing to the next stage first when the current one is complete.
    /// Returns `None` once the last stage has finished.
    pub fn step(
        &mut self,
        dataset: &Dataset,
        observer: &mut dyn FnMut(&Trainer, TrainEvent) -> Result<()>,
    ) -> Result<Option<StepRecord>> {
        if self.state.finished {
            return Ok(None);
        }
        let mut stage = self.state.stage;
        let mut total = self.total_steps(dataset, stage);
        if self.state.step_in_stage >= total {
            if stage == self.config.stages {
                self.state.finished = true;
                return Ok(None);
            }
            let seed = rng::derive(self.state.seed, &[TAG_GROW, stage as u64 + 1]);
            self.g = self.g.grow(seed)?;
            self.d = self.d.grow(rng::derive(seed, &[TAG_D_INIT]))?;
            stage += 1;
            self.state.stage = stage;
            self.state.step_in_stage = 0;
            total = self.total_steps(dataset, stage);
        }
        let spec = self.schedule[stage - 1].clone();
        let step = self.state.step_in_stage;
        let gs = self.state.global_step;
        let phase = spec.phase_at(step, total);
        if step == 0 {
            let e = StageEvent::StageStart {
                global_step: gs,
                stage,
                resolution: spec.resolution,
                active: spec.active.clone(),
            };
            self.emit(e, observer)?;
        }
        if step == 0 || phase != spec.phase_at(step - 1, total) {
            self.emit(StageEvent::PhaseStart { global_step: gs, stage, phase }, observer)?;
        }
        let level = dataset.level(stage)?;
        if level[0].resolution() != self.g.resolution() {
            return Err(Error::ResolutionMismatch {
                expected: self.g.resolution(),
                actual: level[0].resolution(),
            });
        }
        let real = dataset.batch(stage, &dataset.batch_indices(stage, step, self.optim.batch_size))?;
        let policy = spec.policy(self.config.branch_count(), step, total);
        let mask = spec.mask(&self.g, &self.d, phase);
        let outcome = gan_step(
            &mut self.g,
            &mut self.d,
            &mut self.state.adam_g,
            &mut self.state.adam_d,
            &real,
            &policy,
            &mask,
            rng::derive(self.state.seed, &[TAG_STEP, gs]),
        )?;
        if self.strict_freeze && outcome.frozen_nonzero > 0 {
            return Err(Error::NonFinite(format!(
                "{} gradient entries leaked into zero-fed columns at step {gs}",
                outcome.frozen_nonzero
            )));
        }
        let record = StepRecord {
            global_step: gs,
            stage,
            step,
            phase,
            alpha: spec.alpha(step, total),
            d_loss: outcome.d_loss,
            g_loss: outcome.g_loss,
        };
        self.state.history.push(record.clone());
        self.state.step_in_stage += 1;
        self.state.global_step += 1;
        observer(self, TrainEvent::Step(&record))?;
        if self.state.step_in_stage == total {
            self.emit(StageEvent::StageEnd { global_step: gs + 1, stage }, observer)?;
        }
        Ok(Some(record))
    }

    /// Trains until the schedule is exhausted or `max_steps` more steps have run.
    pub fn run(
        &mut self,
        dataset: &Dataset,
        max_steps: Option<usize>,
        observer: &mut dyn FnMut(&Trainer, TrainEvent) -> Result<()>,
    ) -> Result<()> {
        let mut done = 0;
        while max_steps.is_none_or(|m| done < m) {
            if self.step(dataset, observer)?.is_none() {
                break;
            }
            done += 1;
        }
        Ok(())
    }

    /// Runs the rest of the current stage.
    pub fn run_stage(&mut self, dataset: &Dataset) -> Result<&TrainState> {
        let remaining = self.total_steps(dataset, self.state.stage) - self.state.step_in_stage.min(self.total_steps(dataset, self.state.stage));
        self.run(dataset, Some(remaining), &mut |_, _| Ok(()))?;
        Ok(&self.state)
    }
}

/// Trains the full schedule from scratch and returns the final trainer.
pub fn run_progressive(
    config: &NetConfig,
    schedule: Vec<ScheduleStage>,
    dataset: &Dataset,
    optim: OptimSpec,
    seed: u64,
) -> Result<Trainer> {
    let mut t = Trainer::new(config, schedule, optim, seed)?;
    t.run(dataset, None, &mut |_, _| Ok(()))?;
    Ok(t)
}

/// Baseline without progression or freezing: the final architecture trained
/// from the start with every sub-vector uniform, for `steps` steps.
pub fn run_joint(config: &NetConfig, dataset: &Dataset, optim: &OptimSpec, steps: usize, seed: u64) -> Result<GanModels> {
    optim.validate()?;
    let stage = config.stages;
    let mut m = GanModels::build(config, stage, optim, seed)?;
    let policy = SamplePolicy::uniform(config.branch_count());
    train_fixed(&mut m, dataset, &policy, steps, 0, seed, optim.batch_size)?;
    Ok(m)
}

/// Trains at the models' current stage with a fixed policy and full mask.
/// `offset` continues the step numbering (and so the data order and seeds).
fn train_fixed(
    m: &mut GanModels,
    dataset: &Dataset,
    policy: &SamplePolicy,
    steps: usize,
    offset: usize,
    seed: u64,
    batch_size: usize,
) -> Result<Vec<StepOutcome>> {
    let stage = m.g.stage();
    let mut mask = m.g.active_params();
    mask.extend(m.d.active_params());
    let mut out = Vec::with_capacity(steps);
    for step in offset..offset + steps {
        let real = dataset.batch(stage, &dataset.batch_indices(stage, step, batch_size))?;
        out.push(m.gan_step(&real, policy, &mask, rng::derive(seed, &[TAG_STEP, step as u64]))?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderTraining {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    /// Evaluate the held-out error every this many steps.
    pub eval_every: usize,
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for EncoderTraining {
    fn default() -> Self {
        EncoderTraining {
            steps: 1500,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eval_every: 150,
            eval_samples: 256,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderReport {
    pub encoder: Encoder,
    pub initial_error: f64,
    pub final_error: f64,
    /// `(step, held-out error)` at every evaluation point, starting at step 0.
    pub curve: Vec<(usize, f64)>,
}

/// Mean absolute coordinate error of `encode(generate(z))` against `z`.
pub fn latent_recovery_error(e: &Encoder, g: &Generator, zs: &[BranchedLatent]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in zs.chunks(64) {
        let rec = e.encode_batch(&g.generate_batch(chunk)?)?;
        for (a, b) in rec.iter().zip(chunk) {
            for (x, y) in a.flatten().iter().zip(b.flatten()) {
                total += f64::from((x - y).abs());
                count += 1;
            }
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Trains an encoder at the generator's stage with an L1 latent loss.
pub fn train_encoder(g: &Generator, spec: &EncoderTraining) -> Result<EncoderReport> {
    if spec.steps == 0 || spec.batch_size == 0 || spec.eval_every == 0 || spec.eval_samples == 0 {
        return Err(Error::InvalidConfig("encoder training needs positive steps/batch/eval sizes".into()));
    }
    let cfg = g.config().clone();
    let policy = SamplePolicy::uniform(cfg.branch_count());
    let mut e = Encoder::build(&cfg, g.stage(), rng::derive(spec.seed, &[TAG_ENC_INIT]))?;
    let mut adam = Adam::new(spec.learning_rate, spec.beta1, spec.beta2);
    let held: Vec<BranchedLatent> = (0..spec.eval_samples)
        .map(|i| sample_latent(&cfg, &policy, rng::derive(spec.seed, &[TAG_ENC_HELDOUT, i as u64])))
        .collect::<Result<_>>()?;
    let initial_error = latent_recovery_error(&e, g, &held)?;
    let mut curve = vec![(0, initial_error)];
    let ops = e.ops();
    let scale = 1.0 / (spec.batch_size * cfg.latent_dim()) as f32;
    for step in 0..spec.steps {
        let mut r = rng::rng(spec.seed, &[TAG_ENC_TRAIN, step as u64]);
        let zs: Vec<BranchedLatent> = (0..spec.batch_size).map(|_| policy.sample_with(&cfg, &mut r)).collect();
        let x = Image::to_tensor(&g.generate_batch(&zs)?)?;
        let tape = e.forward(x);
        let out = tape.output();
        let mut dy = out.zeros_like();
        for (i, z) in zs.iter().enumerate() {
            for ((d, o), t) in dy.item_mut(i).iter_mut().zip(out.item(i)).zip(z.flatten()) {
                *d = (o - t).signum() * scale;
            }
        }
        let mut grads = Grads::default();
        nn::backward(&ops, &e.params, &tape, dy, Some(&mut grads));
        if !grads.is_finite() {
            return Err(Error::NonFinite(format!("encoder gradient at step {step}")));
        }
        adam.step(&mut e.params, &grads, |_| true);
        if (step + 1) % spec.eval_every == 0 || step + 1 == spec.steps {
            curve.push((step + 1, latent_recovery_error(&e, g, &held)?));
        }
    }
    let final_error = curve.last().map(|c| c.1).unwrap_or(initial_error);
    Ok(EncoderReport {
        encoder: e,
        initial_error,
        final_error,
        curve,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuppressionKind {
    /// Branch 0 trains alone first, then all branches train jointly.
    PretrainedDominant,
    /// Branches are de-frozen one at a time with equal step budgets.
    SequentialDefreeze,
}

impl std::str::FromStr for SuppressionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrained_dominant" | "a" => Ok(SuppressionKind::PretrainedDominant),
            "sequential_defreeze" | "b" => Ok(SuppressionKind::SequentialDefreeze),
            other => Err(Error::InvalidConfig(format!("unknown suppression kind '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuppressionBudget {
    pub steps_per_phase: usize,
    /// Base latents the other branches are held at.
    pub eval_constants: usize,
    /// Draws of the varied branch per base latent.
    pub eval_samples: usize,
}

impl Default for SuppressionBudget {
    fn default() -> Self {
        SuppressionBudget {
            steps_per_phase: 400,
            eval_constants: 8,
            eval_samples: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuppressionReport {
    pub kind: SuppressionKind,
    /// Active sub-vectors of each training phase.
    pub phases: Vec<Vec<usize>>,
    /// Total output variance attributed to each branch.
    pub branch_variance: Vec<f64>,
    pub variance_images: Vec<VarianceImage>,
    /// `dominance[i][j] = variance_i / variance_j`, defined when `variance_j > 0`.
    pub dominance: Vec<Vec<Option<f64>>>,
}

/// Mean per-pixel variance when only `branch` varies (drawn from its source in
/// `policy`) and the other sub-vectors are held at sampled constants.
pub fn attributed_variance(
    g: &Generator,
    policy: &SamplePolicy,
    branch: usize,
    constants: usize,
    samples: usize,
    seed: u64,
) -> Result<VarianceImage> {
    let cfg = g.config();
    policy.validate(cfg)?;
    if branch >= cfg.branch_count() {
        return Err(Error::IndexOutOfRange {
            index: branch,
            len: cfg.branch_count(),
        });
    }
    let mut acc: Option<VarianceImage> = None;
    for c in 0..constants {
        let mut r = rng::rng(seed, &[c as u64]);
        let base = policy.sample_with(cfg, &mut r);
        let zs: Vec<BranchedLatent> = (0..samples)
            .map(|_| {
                let mut z = base.clone();
                z.subvectors[branch] = policy.sample_with(cfg, &mut r).subvectors.swap_remove(branch);
                z
            })
            .collect();
        let v = variance_image(&g.generate_batch(&zs)?)?;
        match &mut acc {
            None => acc = Some(v),
            Some(a) => a.values.iter_mut().zip(&v.values).for_each(|(x, y)| *x += y),
        }
    }
    let mut v = acc.ok_or_else(|| Error::InvalidConfig("need at least one constant".into()))?;
    v.values.iter_mut().for_each(|x| *x /= constants as f64);
    v.display_max = v.values.iter().copied().fold(0.0, f64::max);
    Ok(v)
}

/// Report for a trained generator under its final sampling policy.
pub fn suppression_report(
    kind: SuppressionKind,
    phases: Vec<Vec<usize>>,
    g: &Generator,
    policy: &SamplePolicy,
    budget: &SuppressionBudget,
    seed: u64,
) -> Result<SuppressionReport> {
    let branches = g.config().branch_count();
    let variance_images = (0..branches)
        .map(|b| {
            attributed_variance(
                g,
                policy,
                b,
                budget.eval_constants,
                budget.eval_samples,
                rng::derive(seed, &[TAG_SUPPRESS, b as u64]),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let branch_variance: Vec<f64> = variance_images.iter().map(VarianceImage::total).collect();
    let dominance = branch_variance
        .iter()
        .map(|vi| {
            branch_variance
                .iter()
                .map(|vj| (*vj > 0.0).then(|| vi / vj))
                .collect()
        })
        .collect();
    Ok(SuppressionReport {
        kind,
        phases,
        branch_variance,
        variance_images,
        dominance,
    })
}

/// Appendix-style suppression lab at the final resolution (no growing).
pub fn suppression_experiment(
    kind: SuppressionKind,
    config: &NetConfig,
    dataset: &Dataset,
    optim: &OptimSpec,
    budget: &SuppressionBudget,
    seed: u64,
) -> Result<(SuppressionReport, Generator)> {
    let branches = config.branch_count();
    if branches < 2 {
        return Err(Error::InvalidConfig("suppression needs at least 2 branches".into()));
    }
    if budget.steps_per_phase == 0 || budget.eval_constants == 0 || budget.eval_samples < 2 {
        return Err(Error::InvalidConfig("suppression budget needs steps, constants and >= 2 samples".into()));
    }
    optim.validate()?;
    let phases: Vec<Vec<usize>> = match kind {
        SuppressionKind::PretrainedDominant => vec![vec![0], (0..branches).collect()],
        SuppressionKind::SequentialDefreeze => (1..=branches).map(|k| (0..k).collect()).collect(),
    };
    let mut m = GanModels::build(config, config.stages, optim, seed)?;
    for (i, active) in phases.iter().enumerate() {
        let policy = SamplePolicy::active(branches, active);
        let steps = budget.steps_per_phase;
        train_fixed(&mut m, dataset, &policy, steps, i * steps, seed, optim.batch_size)?;
    }
    let final_policy = SamplePolicy::active(branches, phases.last().expect("at least one phase"));
    let report = suppression_report(kind, phases, &m.g, &final_policy, budget, seed)?;
    Ok((report, m.g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticRecipe};

    fn tiny() -> NetConfig {
        NetConfig {
            subvector_dims: vec![3, 2],
            base_resolution: (2, 2),
            output_resolution: (8, 8),
            channel_schedule: vec![8, 4],
            stages: 2,
            ..NetConfig::desk()
        }
    }

    fn tiny_data(cfg: &NetConfig, n: usize) -> Dataset {
        let recipe = SyntheticRecipe {
            samples: n,
            resolution: cfg.output_resolution,
            ..SyntheticRecipe::default()
        };
        Dataset::from_images(&generate_synthetic(&recipe, 1).unwrap(), &cfg.resolutions()[1..], 2).unwrap()
    }

    fn optim() -> OptimSpec {
        OptimSpec {
            batch_size: 4,
            ..OptimSpec::default()
        }
    }

    #[test]
    fn ramp_hits_endpoints_and_is_monotone() {
        for shape in [RampShape::Linear, RampShape::Cosine] {
            let r = AlphaRamp {
                shape,
                ..AlphaRamp::default()
            };
            let vals: Vec<f32> = (0..37).map(|i| r.value(i, 37)).collect();
            assert_eq!(vals[0], 0.0);
            assert_eq!(vals[36], 1.0);
            assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn schedule_phases_and_alpha() {
        let cfg = tiny();
        let s = &fixed_step_schedule(&cfg, 8)[1];
        assert_eq!(s.stage1_steps(8), 2);
        assert_eq!(s.phase_at(1, 8), Phase::StageI);
        assert_eq!(s.alpha(1, 8), None);
        assert_eq!(s.alpha(2, 8), Some(0.0));
        assert_eq!(s.alpha(7, 8), Some(1.0));
        assert_eq!(s.policy(2, 0, 8).sources[1], SubvectorSource::Frozen);
        let first = &fixed_step_schedule(&cfg, 8)[0];
        assert_eq!(first.policy(2, 0, 8).frozen(), vec![1]);
        assert_eq!(first.phase_at(0, 8), Phase::Base);
    }

    #[test]
    fn stage_one_mask_is_growth_unit_plus_discriminator() {
        let cfg = tiny();
        let g = Generator::build(&cfg, 1, 0).unwrap().grow(1).unwrap();
        let d = Discriminator::build(&cfg, 2, 0).unwrap();
        let s = &default_schedule(&cfg, 1)[1];
        let mask = s.mask(&g, &d, Phase::StageI);
        let expected: BTreeSet<String> = g.growth_unit().union(&d.active_params()).cloned().collect();
        assert_eq!(mask, expected);
        assert!(!mask.contains("g.linear.w"));
        assert!(s.mask(&g, &d, Phase::StageII).contains("g.linear.w"));
    }

    #[test]
    fn schedule_validation() {
        let cfg = tiny();
        let mut s = default_schedule(&cfg, 1);
        validate_schedule(&cfg, &s).unwrap();
        s[1].stage1_fraction = 1.0;
        assert!(validate_schedule(&cfg, &s).is_err());
        assert!(validate_schedule(&cfg, &s[..1]).is_err());
    }

    #[test]
    fn masked_parameters_stay_bit_identical() {
        let cfg = tiny();
        let data = tiny_data(&cfg, 8);
        let mut m = GanModels::build(&cfg, 2, &optim(), 3).unwrap();
        let before = m.clone();
        let mask: BTreeSet<String> = m.d.active_params();
        let real = data.batch(2, &[0, 1, 2, 3]).unwrap();
        m.gan_step(&real, &SamplePolicy::uniform(2), &mask, 9).unwrap();
        assert_eq!(m.g.params, before.g.params);
        assert_ne!(m.d.params, before.d.params);
        let mut bad = BTreeSet::new();
        bad.insert("nope".to_string());
        assert!(m.gan_step(&real, &SamplePolicy::uniform(2), &bad, 9).is_err());
    }

    #[test]
    fn frozen_columns_get_zero_gradient_and_moments() {
        let cfg = tiny();
        let data = tiny_data(&cfg, 8);
        let mut m = GanModels::build(&cfg, 2, &optim(), 3).unwrap();
        let w0 = m.g.params["g.linear.w"].clone();
        let mut mask = m.g.active_params();
        mask.extend(m.d.active_params());
        let policy = SamplePolicy::active(2, &[0]);
        for step in 0..3 {
            let real = data.batch(2, &data.batch_indices(2, step, 4)).unwrap();
            let o = m.gan_step(&real, &policy, &mask, step as u64).unwrap();
            assert_eq!(o.frozen_nonzero, 0);
        }
        let w = &m.g.params["g.linear.w"];
        let mom = &m.adam_g.moments["g.linear.w"];
        for row in 0..w.shape[0] {
            for col in 3..5 {
                let i = row * 5 + col;
                assert_eq!(w.data[i].to_bits(), w0.data[i].to_bits());
                assert_eq!((mom.m[i], mom.v[i]), (0.0, 0.0));
            }
        }
        assert_ne!(w.data[0], w0.data[0]);
    }

    #[test]
    fn progressive_run_grows_and_logs() {
        let cfg = tiny();
        let data = tiny_data(&cfg, 8);
        let mut events = Vec::new();
        let mut t = Trainer::new(&cfg, fixed_step_schedule(&cfg, 4), optim(), 5).unwrap();
        t.run(&data, None, &mut |_, e| {
            if let TrainEvent::Stage(s) = e {
                events.push(s.clone());
            }
            Ok(())
        })
        .unwrap();
        assert!(t.state.finished);
        assert_eq!(t.g.stage(), 2);
        assert_eq!(t.state.history.len(), 8);
        assert_eq!(events, t.state.events);
        let kinds: Vec<String> = t
            .state
            .events_jsonl()
            .lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["event"].as_str().unwrap().to_string())
            .collect();
        assert_eq!(
            kinds,
            ["stage_start", "phase_start", "stage_end", "stage_start", "phase_start", "phase_start", "stage_end"]
        );
        assert_eq!(t.state.loss_csv().lines().count(), 9);
    }

    #[test]
    fn stage_one_keeps_earlier_generator_blocks() {
        let cfg = NetConfig {
            subvector_dims: vec![2, 2, 2],
            base_resolution: (2, 2),
            output_resolution: (16, 16),
            channel_schedule: vec![8, 4, 4],
            stages: 3,
            ..NetConfig::desk()
        };
        let data = tiny_data(&cfg, 8);
        let mut t = Trainer::new(&cfg, fixed_step_schedule(&cfg, 4), optim(), 5).unwrap();
        t.run(&data, Some(4), &mut |_, _| Ok(())).unwrap();
        let snapshot = t.g.params.clone();
        // grows into stage 2 and runs its single Stage I step
        t.run(&data, Some(1), &mut |_, _| Ok(())).unwrap();
        assert_eq!(t.state.history.last().unwrap().phase, Phase::StageI);
        let unit = t.g.growth_unit();
        assert!(unit.iter().all(|k| !snapshot.contains_key(k)));
        for (k, v) in &snapshot {
            assert_eq!(&t.g.params[k], v, "{k}");
        }
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let cfg = tiny();
        let data = tiny_data(&cfg, 8);
        let mut a = Trainer::new(&cfg, fixed_step_schedule(&cfg, 5), optim(), 5).unwrap();
        a.run(&data, None, &mut |_, _| Ok(())).unwrap();
        let mut b = Trainer::new(&cfg, fixed_step_schedule(&cfg, 5), optim(), 5).unwrap();
        b.run(&data, Some(6), &mut |_, _| Ok(())).unwrap();
        let mut c = Trainer::resume(b.g.clone(), b.d.clone(), b.state.clone(), b.schedule.clone(), b.optim.clone()).unwrap();
        c.run(&data, None, &mut |_, _| Ok(())).unwrap();
        assert_eq!(a.g.params, c.g.params);
        assert_eq!(a.d.params, c.d.params);
        assert_eq!(a.state, c.state);
    }

    #[test]
    fn zero_fed_branch_has_zero_attributed_variance() {
        let cfg = tiny();
        let g = Generator::build(&cfg, 2, 4).unwrap();
        let policy = SamplePolicy::active(2, &[0]);
        let v = attributed_variance(&g, &policy, 1, 3, 4, 0).unwrap();
        assert_eq!(v.total(), 0.0);
        assert!(attributed_variance(&g, &policy, 0, 3, 4, 0).unwrap().total() > 0.0);
    }

    #[test]
    fn suppression_report_shape() {
        let cfg = tiny();
        let data = tiny_data(&cfg, 8);
        let budget = SuppressionBudget {
            steps_per_phase: 2,
            eval_constants: 2,
            eval_samples: 3,
        };
        let (r, _) =
            suppression_experiment(SuppressionKind::SequentialDefreeze, &cfg, &data, &optim(), &budget, 1).unwrap();
        assert_eq!(r.phases, vec![vec![0], vec![0, 1]]);
        assert_eq!(r.branch_variance.len(), 2);
        assert!(r.branch_variance.iter().all(|v| *v >= 0.0));
        assert_eq!(r.dominance[0][0], Some(1.0));
        let one = NetConfig {
            subvector_dims: vec![4],
            stages: 1,
            channel_schedule: vec![8],
            output_resolution: (4, 4),
            ..tiny()
        };
        assert!(suppression_experiment(SuppressionKind::PretrainedDominant, &one, &data, &optim(), &budget, 1).is_err());
    }

    #[test]
    fn encoder_training_reduces_error() {
        let cfg = tiny();
        let g = Generator::build(&cfg, 2, 4).unwrap();
        let spec = EncoderTraining {
            steps: 60,
            batch_size: 16,
            eval_every: 20,
            eval_samples: 64,
            ..EncoderTraining::default()
        };
        let r = train_encoder(&g, &spec).unwrap();
        assert_eq!(r.curve.len(), 4);
        assert!(r.final_error < r.initial_error, "{:?}", r.curve);
    }
}
