//! The training loop over the dual-branch objective.
//!
//! Gradient partition: the classification path binds style-net parameters
//! as constants, and the style-net objective sees detached features, so a
//! single backward pass over `L_total + L_φ` gives the backbone adjoints
//! of `L_total` only and the style nets adjoints of `L_φ` only.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{StyleEmbedding, TrainConfig};
use super::optim::{adam_step, ema_decay_at, ema_update, Adam, GradAccumulator};
use crate::data::{crop, normalize, sample_crop, ImageSet, PrepMode};
use crate::error::{Error, Result};
use crate::losses::{combine_graph, content_consistency_with, focal_loss, pdr_loss, LossBundle};
use crate::model::{forward_dual, FeatureStyler, Mode, ModelGraph, ModelState};
use crate::rng::rng_from;
use crate::scalar::{Scalar, EPSILON};
use crate::srm_fl::{srm_fl_apply, style_net_loss, StyleNets};
use crate::style::srm_il_with;
use crate::tensor::{Graph, Tensor};

const TAG_INIT: u64 = 1;
const TAG_ORDER: u64 = 2;
const TAG_SAMPLE: u64 = 3;
const TAG_STYLE: u64 = 4;
const TAG_PAIR: u64 = 5;

/// Which objective drives a step. Training uses `Both`; the other two
/// isolate one side of the gradient partition.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepObjective {
    Both,
    TotalOnly,
    PhiOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub losses: LossBundle,
}

/// Network inputs of one micro-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct MicroBatch<T> {
    pub clean: Tensor<T>,
    pub stylized: Tensor<T>,
    pub labels: Tensor<T>,
    pub pairing: Vec<usize>,
}

/// Gradients and losses of one micro-batch, before accumulation.
pub struct MicroResult<T> {
    pub losses: LossBundle,
    pub backbone: Vec<Option<Vec<T>>>,
    pub style: Vec<Option<Vec<T>>>,
}

pub struct Trainer<T> {
    pub cfg: TrainConfig,
    pub state: ModelState<T>,
    pub nets: StyleNets<T>,
    pub adam: Adam<T>,
    pub log: Vec<StepLog>,
    pub epochs_done: usize,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh model and style nets drawn from `cfg.seed`. The config must
    /// carry resolved normalization statistics.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        let mut rng = rng_from(cfg.seed, &[TAG_INIT]);
        let state = ModelState::init(&cfg.backbone, &mut rng)?;
        let nets = StyleNets::init_with(
            cfg.insertion_channels(),
            cfg.srm_fl.reduction,
            cfg.srm_fl.init,
            &mut rng,
        )?;
        Self::from_parts(cfg, state, nets)
    }

    /// Resumes from existing parameters; optimizer moments start at zero.
    pub fn from_parts(cfg: TrainConfig, state: ModelState<T>, nets: StyleNets<T>) -> Result<Self> {
        cfg.validate()?;
        cfg.preprocess.normalization()?;
        if state.config != cfg.backbone {
            return Err(Error::config(
                "model state was built for a different backbone",
            ));
        }
        let adam = Adam::new(cfg.adam(), &state.params, &nets.params);
        Ok(Self {
            cfg,
            state,
            nets,
            adam,
            log: Vec::new(),
            epochs_done: 0,
        })
    }

    /// Micro-batches of each optimizer step in `epoch`. Incomplete trailing
    /// micro-batches and accumulation groups are dropped.
    pub fn epoch_plan(&self, n: usize, epoch: usize) -> Vec<Vec<Vec<usize>>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_from(self.cfg.seed, &[TAG_ORDER, epoch as u64]));
        let (b, a) = (self.cfg.batch_size, self.cfg.grad_accum_steps);
        order
            .chunks_exact(b * a)
            .map(|step| step.chunks_exact(b).map(<[usize]>::to_vec).collect())
            .collect()
    }

    /// Crops, flips, stylizes and normalizes the listed samples. Every
    /// random draw is keyed by `(seed, epoch, sample)` so the inputs do not
    /// depend on how samples are grouped into batches; only the pairing is
    /// keyed by the micro-batch.
    pub fn prepare(
        &self,
        data: &ImageSet,
        indices: &[usize],
        epoch: usize,
    ) -> Result<MicroBatch<T>> {
        let pre = &self.cfg.preprocess;
        let (mean, std) = pre.normalization()?;
        let n = data.num_classes()?;
        let mut clean = Vec::with_capacity(indices.len());
        let mut stylized = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            let e = epoch as u64;
            let mut rng = rng_from(self.cfg.seed, &[TAG_SAMPLE, e, i as u64]);
            let raw: Tensor<T> = crop(
                &data.images[i],
                pre.crop_to,
                sample_crop(pre, PrepMode::Train, &mut rng),
            )?;
            let styled = if self.cfg.toggles.use_srm_il {
                let mut srng = rng_from(
                    self.cfg.seed,
                    &[TAG_STYLE, self.cfg.srm_il.rng_seed, e, i as u64],
                );
                let (mu, sigma) = self.cfg.srm_il.sample(&mut srng);
                srm_il_with(&raw, T::lit(mu), T::lit(sigma), T::lit(EPSILON))?
            } else {
                raw.clone()
            };
            clean.push(normalize(&raw, mean, std));
            stylized.push(normalize(&styled, mean, std));
            let rec = &data.records[i];
            if rec.labels.len() != n {
                return Err(Error::shape(format!("{}: expected {n} labels", rec.path)));
            }
            labels.extend(rec.labels.iter().map(|&l| T::lit(l as f64)));
        }
        let mut pairing: Vec<usize> = (0..indices.len()).collect();
        let key = indices.first().copied().unwrap_or(0) as u64;
        pairing.shuffle(&mut rng_from(self.cfg.seed, &[TAG_PAIR, epoch as u64, key]));
        Ok(MicroBatch {
            clean: Tensor::stack(&clean)?,
            stylized: Tensor::stack(&stylized)?,
            labels: Tensor::new(&[indices.len(), n], labels)?,
            pairing,
        })
    }

    /// Forward and backward of one micro-batch; parameters are untouched.
    pub fn micro_step(
        &mut self,
        batch: &MicroBatch<T>,
        objective: StepObjective,
    ) -> Result<MicroResult<T>> {
        let cfg = &self.cfg;
        let t = &cfg.toggles;
        let learned = t.use_srm_fl && cfg.style_embedding == StyleEmbedding::Learned;
        let mut g = Graph::new();
        let backbone_trainable = objective != StepObjective::PhiOnly;
        let mut mg = ModelGraph::bind(&mut g, &self.state, backbone_trainable, Mode::Train);
        let nets_main = learned.then(|| self.nets.params.bind(&mut g, false));
        let nets_phi = (learned && objective != StepObjective::TotalOnly)
            .then(|| self.nets.params.bind(&mut g, true));

        let clean = t
            .needs_clean_branch()
            .then(|| g.constant(batch.clean.clone()));
        let stylized = g.constant(batch.stylized.clone());
        let styler = match (&nets_main, t.use_srm_fl) {
            (Some(bound), _) => FeatureStyler::Nets {
                nets: &self.nets,
                bound,
            },
            (None, true) => FeatureStyler::Adain,
            (None, false) => FeatureStyler::Off,
        };
        let out = forward_dual(
            &mut g,
            &self.state,
            &mut mg,
            clean,
            stylized,
            &batch.pairing,
            &styler,
            cfg.srm_fl.insertion_stage,
        )?;
        mg.commit_buffers(&mut self.state);

        let l_cls = focal_loss(&mut g, out.p_s, &batch.labels, &cfg.focal)?;
        let l_ccr = match (t.use_l_ccr, out.clean) {
            (true, Some((f, _))) => Some(content_consistency_with(
                &mut g,
                out.f_s,
                f,
                cfg.ccr_reduction,
            )?),
            _ => None,
        };
        let l_pdr = match (t.use_l_pdr, out.clean) {
            (true, Some((_, p))) => Some(pdr_loss(&mut g, out.p_s, p)?),
            _ => None,
        };
        let l_total = combine_graph(&mut g, l_cls, l_ccr, l_pdr)?;

        let l_phi = match (&nets_phi, out.style_triple) {
            (Some(bound), Some((z1, z2, _))) => {
                let z1 = g.detach(z1);
                let z2 = g.detach(z2);
                let xs = srm_fl_apply(&mut g, &self.nets, bound, z1, z2, T::lit(EPSILON))?;
                Some(style_net_loss(&mut g, z1, z2, xs, T::lit(cfg.srm_fl.eta))?.total)
            }
            _ => None,
        };

        let objective_var = match (objective, l_phi) {
            (StepObjective::Both, Some(phi)) => g.add(l_total, phi)?,
            (StepObjective::Both | StepObjective::TotalOnly, _) => l_total,
            (StepObjective::PhiOnly, Some(phi)) => phi,
            (StepObjective::PhiOnly, None) => {
                return Err(Error::config(
                    "a style-net step needs learned feature stylization",
                ))
            }
        };
        g.backward(objective_var)?;

        let val = |v: Option<crate::tensor::Var>, g: &Graph<T>| {
            v.map_or(0.0, |v| g.value(v).item().as_f64())
        };
        let losses = LossBundle::combine(
            g.value(l_cls).item().as_f64(),
            val(l_ccr, &g),
            val(l_pdr, &g),
            val(l_phi, &g),
        )?;
        let backbone = self.state.params.collect_grads(&g, &mg.bound);
        let style = match &nets_phi {
            Some(b) => self.nets.params.collect_grads(&g, b),
            None => vec![None; self.nets.params.len()],
        };
        Ok(MicroResult {
            losses,
            backbone,
            style,
        })
    }

    /// Accumulates the listed micro-batches, then applies one Adam step per
    /// parameter group and one EMA update.
    pub fn optimizer_step(
        &mut self,
        data: &ImageSet,
        micro: &[Vec<usize>],
        epoch: usize,
        objective: StepObjective,
    ) -> Result<LossBundle> {
        let mut acc_b = GradAccumulator::new(self.state.params.len());
        let mut acc_s = GradAccumulator::new(self.nets.params.len());
        let mut losses = LossBundle::default();
        for idx in micro {
            let batch = self.prepare(data, idx, epoch)?;
            let r = self.micro_step(&batch, objective)?;
            losses.accumulate(&r.losses);
            acc_b.add(r.backbone);
            acc_s.add(r.style);
        }
        let gb = acc_b.take_mean();
        let gs = acc_s.take_mean();
        // Reject the whole step before either group moves.
        for (name, g) in [("backbone", &gb), ("style nets", &gs)] {
            if g.iter().flatten().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("{name} gradient")));
            }
        }
        let adam_cfg = self.adam.cfg;
        adam_step(
            &mut self.state.params,
            &gb,
            &mut self.adam.backbone,
            &adam_cfg,
        )?;
        adam_step(&mut self.nets.params, &gs, &mut self.adam.style, &adam_cfg)?;
        let decay = ema_decay_at(self.cfg.ema_decay, self.state.step, self.cfg.ema_warmup);
        ema_update(&mut self.state.ema, &self.state.params, decay)?;
        self.state.step += 1;
        let mean = losses.scaled(1.0 / micro.len().max(1) as f64);
        self.log.push(StepLog {
            step: self.state.step,
            epoch,
            losses: mean,
        });
        Ok(mean)
    }

    pub fn train_epoch(&mut self, data: &ImageSet, epoch: usize) -> Result<()> {
        for step in self.epoch_plan(data.len(), epoch) {
            self.optimizer_step(data, &step, epoch, StepObjective::Both)?;
        }
        self.epochs_done = epoch + 1;
        Ok(())
    }

    /// Runs the remaining epochs. On error the parameters hold the last
    /// completed optimizer step.
    pub fn fit(&mut self, data: &ImageSet) -> Result<()> {
        if data.len() < self.cfg.batch_size * self.cfg.grad_accum_steps {
            return Err(Error::config(format!(
                "{} samples cannot fill one optimizer step of {}x{}",
                data.len(),
                self.cfg.batch_size,
                self.cfg.grad_accum_steps
            )));
        }
        for epoch in self.epochs_done..self.cfg.epochs {
            self.train_epoch(data, epoch)?;
            if let Some(m) = self.epoch_means().last() {
                log::info!(
                    "epoch {} l_cls {:.5} l_cons {:.5} l_phi {:.5}",
                    epoch + 1,
                    m.l_cls,
                    m.l_cons,
                    m.l_phi
                );
            }
        }
        Ok(())
    }

    /// Mean loss bundle of every completed epoch.
    pub fn epoch_means(&self) -> Vec<LossBundle> {
        let mut out = Vec::new();
        for e in 0..self.epochs_done {
            let rows: Vec<&StepLog> = self.log.iter().filter(|l| l.epoch == e).collect();
            let mut sum = LossBundle::default();
            rows.iter().for_each(|l| sum.accumulate(&l.losses));
            out.push(sum.scaled(1.0 / rows.len().max(1) as f64));
        }
        out
    }
}
