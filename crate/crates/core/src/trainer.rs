//! Collaborative training of denoiser and detector with mutual freezing,
//! plus the simultaneous-update baseline.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataset::{derive_seed, CtSample};
use crate::denoiser::{discriminator_loss, Critic, CriticConfig, Denoiser, DenoiserConfig, Discriminator, Variant};
use crate::detector::{Detector, DetectorConfig};
use crate::error::{Error, Result};
use crate::metrics::{denoise_images, detection_ap, EvalConfig};
use crate::objectives::{generator_objective, LossBreakdown, ObjectiveOptions};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::phantom::{Annotation, Image};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    Collaborative,
    Simultaneous,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    PretrainDet,
    Denoiser,
    Detector,
    /// Simultaneous baseline: both networks every step.
    Joint,
    Done,
}

impl Phase {
    /// One-letter trace code.
    pub fn code(self) -> char {
        match self {
            Phase::PretrainDet => 'P',
            Phase::Denoiser => 'D',
            Phase::Detector => 'T',
            Phase::Joint => 'S',
            Phase::Done => '.',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::PretrainDet => "pretrain_det",
            Phase::Denoiser => "denoiser",
            Phase::Detector => "detector",
            Phase::Joint => "joint",
            Phase::Done => "done",
        }
    }

    /// `(denoiser frozen, detector frozen)` for this phase.
    pub fn frozen(self) -> (bool, bool) {
        match self {
            Phase::PretrainDet | Phase::Detector => (true, false),
            Phase::Denoiser => (false, true),
            Phase::Joint => (false, false),
            Phase::Done => (true, true),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub t1: usize,
    pub t2: usize,
    pub t3: usize,
    pub rounds: usize,
    pub batch_size: usize,
    pub variant: Variant,
    pub strategy: Strategy,
    pub objective: ObjectiveOptions,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub lr_detector: f64,
    pub gp_weight: f64,
    /// Global steps between AP evaluations; 0 disables the curve.
    pub eval_every: usize,
    /// Stop after this many evaluations without an AP-50 gain, checked at
    /// round boundaries.
    pub early_stop_patience: Option<usize>,
    pub seed: u64,
    pub denoiser: DenoiserConfig,
    pub detector: DetectorConfig,
    pub critic: CriticConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Small-scale defaults for 64x64 phantoms on a CPU.
    pub fn desk() -> Self {
        Self {
            t1: 1500,
            t2: 1000,
            t3: 500,
            rounds: 4,
            batch_size: 8,
            variant: Variant::Cnn,
            strategy: Strategy::Collaborative,
            objective: ObjectiveOptions::default(),
            lr_generator: 1e-4,
            lr_discriminator: 4e-4,
            lr_detector: 1e-2,
            gp_weight: 10.0,
            eval_every: 250,
            early_stop_patience: None,
            seed: 0,
            denoiser: DenoiserConfig::default(),
            detector: DetectorConfig::desk(),
            critic: CriticConfig::default(),
        }
    }

    /// Published full-scale hyperparameters.
    pub fn paper() -> Self {
        Self {
            t1: 4000,
            t2: 4000,
            t3: 2000,
            rounds: 5,
            lr_detector: 5e-3,
            detector: DetectorConfig::default(),
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds < 1 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        for (name, lr) in [
            ("lr_generator", self.lr_generator),
            ("lr_discriminator", self.lr_discriminator),
            ("lr_detector", self.lr_detector),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(self.gp_weight >= 0.0) {
            return Err(Error::Config("gp_weight must be non-negative".into()));
        }
        if self.objective.top_k < 1 || self.objective.roi_pool < 1 {
            return Err(Error::Config("top_k and roi_pool must be at least 1".into()));
        }
        self.objective.weights.validate()?;
        self.detector.validate()
    }

    /// Optimizer steps a run takes under either strategy.
    pub fn total_steps(&self) -> usize {
        self.t1 + self.rounds * (self.t2 + self.t3)
    }
}

/// Position in the training schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub phase: Phase,
    pub step_in_phase: usize,
    pub round: usize,
}

impl TrainSchedule {
    /// `(denoiser frozen, detector frozen)`.
    pub fn frozen(&self) -> (bool, bool) {
        self.phase.frozen()
    }

    /// Phase blocks `(phase, round, steps)` in execution order.
    pub fn blocks(cfg: &TrainConfig) -> Vec<(Phase, usize, usize)> {
        match cfg.strategy {
            Strategy::Simultaneous => vec![(Phase::Joint, 0, cfg.total_steps())],
            Strategy::Collaborative => {
                let mut b = vec![(Phase::PretrainDet, 0, cfg.t1)];
                for r in 0..cfg.rounds {
                    b.push((Phase::Denoiser, r, cfg.t2));
                    b.push((Phase::Detector, r, cfg.t3));
                }
                b
            }
        }
    }

    /// The per-step unrolling of [`TrainSchedule::blocks`].
    pub fn trace(cfg: &TrainConfig) -> Vec<TrainSchedule> {
        Self::blocks(cfg)
            .into_iter()
            .flat_map(|(phase, round, n)| (0..n).map(move |step_in_phase| TrainSchedule { phase, step_in_phase, round }))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: u64,
    pub phase: Phase,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApPoint {
    pub step: u64,
    pub phase: Phase,
    pub ap50: f64,
    pub ap75: f64,
}

/// Optimizer steps and parameter checksums around one phase block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: Phase,
    pub round: usize,
    pub steps: usize,
    pub denoiser_before: String,
    pub denoiser_after: String,
    pub detector_before: String,
    pub detector_after: String,
}

/// Detector input hash against an independent recomputation of G(x).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataflowCheck {
    pub step: u64,
    pub input: String,
    pub expected: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLogs {
    pub trace: Vec<Phase>,
    pub losses: Vec<LossRow>,
    pub ap_curve: Vec<ApPoint>,
    pub phases: Vec<PhaseRecord>,
    pub dataflow: Vec<DataflowCheck>,
    pub stopped_early: bool,
}

impl TrainLogs {
    pub fn trace_string(&self) -> String {
        self.trace.iter().map(|p| p.code()).collect()
    }

    pub fn losses_csv(&self) -> String {
        let mut s = String::from(LossBreakdown::CSV_HEADER);
        s.push('\n');
        for r in &self.losses {
            s.push_str(&r.loss.csv_row(r.step, r.phase.name()));
            s.push('\n');
        }
        s
    }

    pub fn ap_csv(&self) -> String {
        let mut s = String::from("step,phase,ap50,ap75\n");
        for p in &self.ap_curve {
            s.push_str(&format!("{},{},{},{}\n", p.step, p.phase.name(), p.ap50, p.ap75));
        }
        s
    }
}

/// Networks and optimizer state of a run.
pub struct TrainState<T: Scalar> {
    pub denoiser: Denoiser<T>,
    pub detector: Detector<T>,
    pub critic: Option<Discriminator<T>>,
    pub opt_generator: Optimizer<T>,
    pub opt_critic: Option<Optimizer<T>>,
    pub opt_detector: Optimizer<T>,
    pub step: u64,
    pub rng: ChaCha8Rng,
    sampler: BatchSampler,
    pub logs: TrainLogs,
}

/// Data and side outputs for a run.
#[derive(Clone, Copy)]
pub struct TrainContext<'a> {
    pub train: &'a [CtSample],
    /// Held-out samples for the AP curve; empty disables it.
    pub eval: &'a [CtSample],
    pub eval_config: &'a EvalConfig,
    /// Phase-boundary checkpoints go under this directory when set.
    pub checkpoint_dir: Option<&'a Path>,
}

/// Epoch-wise shuffled minibatches.
#[derive(Clone, Debug)]
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    fn new(n: usize) -> Self {
        Self { order: (0..n).collect(), pos: n }
    }

    fn next(&mut self, batch: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..batch)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

struct Batch<T> {
    ldct: Tensor<T>,
    ndct: Tensor<T>,
    annotations: Vec<Vec<Annotation>>,
}

fn batch<T: Scalar>(samples: &[CtSample], idx: &[usize]) -> Batch<T> {
    let s = samples[idx[0]].ndct.shape();
    let shape = [idx.len(), 1, s[0], s[1]];
    let stack = |f: fn(&CtSample) -> &Image| {
        Tensor::stack(&idx.iter().map(|&i| f(&samples[i]).clone()).collect::<Vec<_>>())
            .reshape(&shape)
            .cast::<T>()
    };
    Batch {
        ldct: stack(|s| &s.ldct),
        ndct: stack(|s| &s.ndct),
        annotations: idx.iter().map(|&i| samples[i].annotations.clone()).collect(),
    }
}

fn training_error(step: u64, phase: Phase, e: Error) -> Error {
    match e {
        Error::Training { msg, .. } => Error::Training { step, phase: phase.name().into(), msg },
        other => other,
    }
}

fn check_finite(v: f64, step: u64, phase: Phase, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Training {
            step,
            phase: phase.name().into(),
            msg: format!("non-finite {what} loss"),
        })
    }
}

impl<T: Scalar> TrainState<T> {
    /// Fresh networks seeded from `cfg.seed`.
    pub fn new(cfg: &TrainConfig, n_train: usize, image_size: usize) -> Result<Self> {
        cfg.validate()?;
        if n_train == 0 {
            return Err(Error::Data("training set is empty".into()));
        }
        let denoiser = Denoiser::new(cfg.denoiser.clone(), derive_seed(cfg.seed, 1))?;
        let detector = Detector::new(cfg.detector.clone(), derive_seed(cfg.seed, 2))?;
        let critic = match cfg.variant {
            Variant::Gan => Some(Discriminator::new(cfg.critic.clone(), image_size, derive_seed(cfg.seed, 3))?),
            Variant::Cnn => None,
        };
        let opt_generator = Optimizer::new(OptimizerConfig::adam(cfg.lr_generator), &denoiser.params);
        let opt_critic = critic
            .as_ref()
            .map(|c| Optimizer::new(OptimizerConfig::adam(cfg.lr_discriminator), &c.params));
        let opt_detector = Optimizer::new(OptimizerConfig::sgd(cfg.lr_detector), &detector.params);
        Ok(Self {
            denoiser,
            detector,
            critic,
            opt_generator,
            opt_critic,
            opt_detector,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 4)),
            sampler: BatchSampler::new(n_train),
            logs: TrainLogs::default(),
        })
    }

    /// Replaces the detector (and resets its optimizer), e.g. with an
    /// already pretrained one.
    pub fn with_detector(mut self, detector: Detector<T>, cfg: &TrainConfig) -> Self {
        self.opt_detector = Optimizer::new(OptimizerConfig::sgd(cfg.lr_detector), &detector.params);
        self.detector = detector;
        self
    }

    fn next_batch(&mut self, cfg: &TrainConfig, ctx: &TrainContext) -> Batch<T> {
        let idx = self.sampler.next(cfg.batch_size, &mut self.rng);
        batch(ctx.train, &idx)
    }

    fn log(&mut self, phase: Phase, loss: LossBreakdown) {
        self.logs.trace.push(phase);
        self.logs.losses.push(LossRow { step: self.step, phase, loss });
    }

    /// One detector update on `x` (NDCT or denoised images).
    fn detector_step(&mut self, phase: Phase, x: &Tensor<T>, annotations: &[Vec<Annotation>]) -> Result<f64> {
        let tape = crate::Tape::new();
        let p = self.detector.params.bind(&tape, true);
        let (loss, _) = self.detector.full_loss(&p, tape.constant(x.clone()), annotations, &mut self.rng)?;
        let value = loss.total.item().as_f64();
        check_finite(value, self.step + 1, phase, "detection")?;
        let grads = p.grads(&tape.backward(loss.total, false));
        drop(p);
        self.opt_detector
            .step(&mut self.detector.params, &grads)
            .map_err(|e| training_error(self.step + 1, phase, e))?;
        Ok(value)
    }

    /// One critic update against the current generator output.
    fn critic_step(&mut self, cfg: &TrainConfig, phase: Phase, x_hat: &Tensor<T>, y: &Tensor<T>) -> Result<()> {
        let (Some(critic), Some(opt)) = (self.critic.as_mut(), self.opt_critic.as_mut()) else {
            return Ok(());
        };
        let tape = crate::Tape::new();
        let p = critic.params.bind(&tape, true);
        let loss = discriminator_loss(&tape, &*critic, &p, x_hat, y, cfg.gp_weight, &mut self.rng)?;
        check_finite(loss.total.item().as_f64(), self.step + 1, phase, "critic")?;
        let grads = p.grads(&tape.backward(loss.total, false));
        drop(p);
        opt.step(&mut critic.params, &grads)
            .map_err(|e| training_error(self.step + 1, phase, e))
    }

    /// One generator update with the detector (and critic) bound frozen.
    /// Returns the loss breakdown and the pre-update output `G(x)`.
    fn generator_step(&mut self, cfg: &TrainConfig, phase: Phase, b: &Batch<T>) -> Result<(LossBreakdown, Tensor<T>)> {
        let tape = crate::Tape::new();
        let gp = self.denoiser.params.bind(&tape, true);
        let dp = self.detector.params.bind(&tape, false);
        let cp = self.critic.as_ref().map(|c| (c, c.params.bind(&tape, false)));
        let x_hat = self.denoiser.forward(&gp, tape.constant(b.ldct.clone()))?;
        let critic = cp.as_ref().map(|(c, p)| (*c as &dyn Critic<T>, p));
        let terms = generator_objective(
            cfg.variant,
            &cfg.objective,
            x_hat,
            &b.ndct,
            &b.annotations,
            &self.detector,
            &dp,
            critic,
            &mut self.rng,
        )?;
        check_finite(terms.breakdown.total, self.step + 1, phase, "generator")?;
        let grads = gp.grads(&tape.backward(terms.total, false));
        let out = (*x_hat.value()).clone();
        let breakdown = terms.breakdown;
        drop((terms, gp, dp, cp));
        self.opt_generator
            .step(&mut self.denoiser.params, &grads)
            .map_err(|e| training_error(self.step + 1, phase, e))?;
        Ok((breakdown, out))
    }

    /// AP of the co-trained detector on denoised held-out LDCT images.
    pub fn eval_ap(&self, ctx: &TrainContext) -> Result<(f64, f64)> {
        let ldct: Vec<Image> = ctx.eval.iter().map(|s| s.ldct.clone()).collect();
        let anns: Vec<Vec<Annotation>> = ctx.eval.iter().map(|s| s.annotations.clone()).collect();
        let images = denoise_images(&self.denoiser, &ldct, ctx.eval_config.batch_size)?;
        detection_ap(&self.detector, &images, &anns, ctx.eval_config)
    }

    fn after_step(&mut self, cfg: &TrainConfig, ctx: &TrainContext, phase: Phase) -> Result<()> {
        if cfg.eval_every > 0 && !ctx.eval.is_empty() && self.step % cfg.eval_every as u64 == 0 {
            let (ap50, ap75) = self.eval_ap(ctx)?;
            self.logs.ap_curve.push(ApPoint { step: self.step, phase, ap50, ap75 });
            log::info!("step {}: AP-50 {ap50:.3}, AP-75 {ap75:.3}", self.step);
        }
        Ok(())
    }

    fn checkpoint(&self, ctx: &TrainContext, label: &str) -> Result<()> {
        let Some(root) = ctx.checkpoint_dir else {
            return Ok(());
        };
        let dir = root.join(label);
        let meta = serde_json::json!({ "label": label, "step": self.step });
        checkpoint::save(&dir.join("denoiser"), &self.denoiser.params, Some(&self.opt_generator), self.step, meta.clone())?;
        checkpoint::save(&dir.join("detector"), &self.detector.params, Some(&self.opt_detector), self.step, meta.clone())?;
        if let Some(c) = &self.critic {
            checkpoint::save(&dir.join("critic"), &c.params, self.opt_critic.as_ref(), self.step, meta)?;
        }
        Ok(())
    }

    /// Runs one phase block of `steps` optimizer steps, verifying that the
    /// frozen network is bit-identical afterwards.
    pub fn run_phase(
        &mut self,
        cfg: &TrainConfig,
        ctx: &TrainContext,
        phase: Phase,
        round: usize,
        steps: usize,
    ) -> Result<()> {
        let (den_frozen, det_frozen) = phase.frozen();
        let den_before = self.denoiser.params.checksum();
        let det_before = self.detector.params.checksum();
        for i in 0..steps {
            let b = self.next_batch(cfg, ctx);
            let loss = match phase {
                Phase::PretrainDet => {
                    let det = self.detector_step(phase, &b.ndct, &b.annotations)?;
                    LossBreakdown { detection: det, total: det, ..Default::default() }
                }
                Phase::Denoiser => {
                    if cfg.variant == Variant::Gan {
                        let x_hat = self.denoiser.denoise_batch(&b.ldct)?;
                        self.critic_step(cfg, phase, &x_hat, &b.ndct)?;
                    }
                    self.generator_step(cfg, phase, &b)?.0
                }
                Phase::Detector => {
                    let x_hat = self.denoiser.denoise_batch(&b.ldct)?;
                    if i % 50 == 0 {
                        let expected = self.denoiser.denoise_batch(&b.ldct)?;
                        let check = DataflowCheck {
                            step: self.step + 1,
                            input: x_hat.checksum(),
                            expected: expected.checksum(),
                        };
                        if check.input != check.expected {
                            return Err(Error::Invariant(format!(
                                "detector input at step {} is not the frozen generator output",
                                check.step
                            )));
                        }
                        self.logs.dataflow.push(check);
                    }
                    let det = self.detector_step(phase, &x_hat, &b.annotations)?;
                    LossBreakdown { detection: det, total: det, ..Default::default() }
                }
                Phase::Joint => {
                    if cfg.variant == Variant::Gan {
                        let x_hat = self.denoiser.denoise_batch(&b.ldct)?;
                        self.critic_step(cfg, phase, &x_hat, &b.ndct)?;
                    }
                    let (loss, x_hat) = self.generator_step(cfg, phase, &b)?;
                    self.detector_step(phase, &x_hat, &b.annotations)?;
                    loss
                }
                Phase::Done => return Err(Error::Scheduling("no steps run in the done phase".into())),
            };
            self.step += 1;
            self.log(phase, loss);
            self.after_step(cfg, ctx, phase)?;
        }
        let den_after = self.denoiser.params.checksum();
        let det_after = self.detector.params.checksum();
        if den_frozen && den_after != den_before {
            return Err(Error::Invariant(format!("denoiser changed during frozen {} phase", phase.name())));
        }
        if det_frozen && det_after != det_before {
            return Err(Error::Invariant(format!("detector changed during frozen {} phase", phase.name())));
        }
        self.logs.phases.push(PhaseRecord {
            phase,
            round,
            steps,
            denoiser_before: den_before,
            denoiser_after: den_after,
            detector_before: det_before,
            detector_after: det_after,
        });
        let index = self.logs.phases.len() - 1;
        if let Some(last) = self.logs.losses.last() {
            log::info!("{} phase, round {round}: {steps} steps, loss {:.5} at step {}", phase.name(), last.loss.total, self.step);
        }
        self.checkpoint(ctx, &format!("{index:02}-{}-r{round}", phase.name()))
    }

    /// Evaluations since the best AP-50 so far.
    fn evals_without_gain(&self) -> usize {
        let mut best = f64::NEG_INFINITY;
        let mut since = 0;
        for p in &self.logs.ap_curve {
            if p.ap50 > best {
                best = p.ap50;
                since = 0;
            } else {
                since += 1;
            }
        }
        since
    }
}

impl<T: Scalar> Denoiser<T> {
    /// [`Denoiser::denoise`] for `[N, 1, H, W]` batches.
    pub fn denoise_batch(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape().to_vec();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::Contract(format!("expected [N, 1, H, W], got {s:?}")));
        }
        Ok(self.denoise(&x.clone().reshape(&[s[0], s[2], s[3]]))?.reshape(&s))
    }
}

fn image_size(train: &[CtSample]) -> Result<usize> {
    let s = train
        .first()
        .ok_or_else(|| Error::Data("training set is empty".into()))?
        .ndct
        .shape();
    Ok(s[0])
}

/// Detector pretraining on clean images: exactly `cfg.t1` steps.
pub fn pretrain_detector<T: Scalar>(cfg: &TrainConfig, ctx: &TrainContext) -> Result<TrainState<T>> {
    let mut state = TrainState::new(cfg, ctx.train.len(), image_size(ctx.train)?)?;
    state.run_phase(cfg, ctx, Phase::PretrainDet, 0, cfg.t1)?;
    Ok(state)
}

/// `cfg.t2` generator steps with the detector frozen.
pub fn run_denoiser_phase<T: Scalar>(cfg: &TrainConfig, ctx: &TrainContext, state: &mut TrainState<T>, round: usize) -> Result<()> {
    state.run_phase(cfg, ctx, Phase::Denoiser, round, cfg.t2)
}

/// `cfg.t3` detector steps on denoised inputs with the denoiser frozen.
pub fn run_detector_phase<T: Scalar>(cfg: &TrainConfig, ctx: &TrainContext, state: &mut TrainState<T>, round: usize) -> Result<()> {
    state.run_phase(cfg, ctx, Phase::Detector, round, cfg.t3)
}

/// Pretraining followed by `rounds` alternating denoiser and detector phases.
/// With `pretrained`, that detector replaces the pretraining phase outcome and
/// its `t1` steps are skipped.
pub fn run_collaborative<T: Scalar>(
    cfg: &TrainConfig,
    ctx: &TrainContext,
    pretrained: Option<Detector<T>>,
) -> Result<TrainState<T>> {
    if cfg.strategy != Strategy::Collaborative {
        return Err(Error::Config("run_collaborative needs the collaborative strategy".into()));
    }
    let mut state = match pretrained {
        Some(d) => TrainState::new(cfg, ctx.train.len(), image_size(ctx.train)?)?.with_detector(d, cfg),
        None => pretrain_detector(cfg, ctx)?,
    };
    for round in 0..cfg.rounds {
        run_denoiser_phase(cfg, ctx, &mut state, round)?;
        run_detector_phase(cfg, ctx, &mut state, round)?;
        if let Some(patience) = cfg.early_stop_patience {
            if round + 1 < cfg.rounds && state.evals_without_gain() >= patience {
                log::info!("AP-50 plateau after round {round}; stopping");
                state.logs.stopped_early = true;
                break;
            }
        }
    }
    final_eval(ctx, &mut state)?;
    state.checkpoint(ctx, "final")?;
    Ok(state)
}

/// Both networks updated on every step, for `t1 + rounds (t2 + t3)` steps.
pub fn run_simultaneous<T: Scalar>(cfg: &TrainConfig, ctx: &TrainContext) -> Result<TrainState<T>> {
    if cfg.strategy != Strategy::Simultaneous {
        return Err(Error::Config("run_simultaneous needs the simultaneous strategy".into()));
    }
    let mut state = TrainState::new(cfg, ctx.train.len(), image_size(ctx.train)?)?;
    state.run_phase(cfg, ctx, Phase::Joint, 0, cfg.total_steps())?;
    final_eval(ctx, &mut state)?;
    state.checkpoint(ctx, "final")?;
    Ok(state)
}

/// Dispatches on `cfg.strategy`.
pub fn train<T: Scalar>(cfg: &TrainConfig, ctx: &TrainContext) -> Result<TrainState<T>> {
    match cfg.strategy {
        Strategy::Collaborative => run_collaborative(cfg, ctx, None),
        Strategy::Simultaneous => run_simultaneous(cfg, ctx),
    }
}

/// Makes sure the curve ends with a point at the last step.
fn final_eval<T: Scalar>(ctx: &TrainContext, state: &mut TrainState<T>) -> Result<()> {
    if ctx.eval.is_empty() || state.logs.ap_curve.last().is_some_and(|p| p.step == state.step) {
        return Ok(());
    }
    let (ap50, ap75) = state.eval_ap(ctx)?;
    state.logs.ap_curve.push(ApPoint {
        step: state.step,
        phase: Phase::Done,
        ap50,
        ap75,
    });
    Ok(())
}

/// Trains a detector on clean images only, for use as the frozen evaluator.
pub fn train_eval_detector<T: Scalar>(cfg: &TrainConfig, train: &[CtSample]) -> Result<(Detector<T>, Vec<f64>)> {
    let eval_config = EvalConfig::default();
    let ctx = TrainContext {
        train,
        eval: &[],
        eval_config: &eval_config,
        checkpoint_dir: None,
    };
    let state = pretrain_detector::<T>(cfg, &ctx)?;
    let losses = state.logs.losses.iter().map(|r| r.loss.detection).collect();
    Ok((state.detector, losses))
}
