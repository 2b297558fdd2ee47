//! Four-stage convolutional backbone, sigmoid classifier head, and the
//! dual-branch (clean / stylized) forward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{conv_bias, fan_in_uniform, Bound, ParamSet};
use crate::scalar::{Scalar, EPSILON};
use crate::srm_fl::{srm_fl_apply, InsertionStage, StyleNets};
use crate::style::{adain_graph, broadcast_channels, normalize_graph};
use crate::tensor::{Graph, Tensor, Var};

/// Normalization used inside backbone blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Instance,
    Batch,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: usize,
    pub input_size: usize,
    pub num_classes: usize,
    pub norm: NormKind,
    /// IBN flavour: in stages 1–2 the first half of each block's channels
    /// use instance normalization, the rest use `norm`.
    pub use_instance_norm_in_early_stages: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_channels: [8, 16, 32, 64],
            blocks_per_stage: 1,
            input_size: 64,
            num_classes: 5,
            norm: NormKind::Instance,
            use_instance_norm_in_early_stages: false,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be >= 1"));
        }
        if self.blocks_per_stage == 0 || self.stage_channels.iter().any(|&c| c == 0) {
            return Err(Error::config(
                "stages need at least one block and one channel",
            ));
        }
        if self.input_size < 8 {
            return Err(Error::config(
                "input_size must be >= 8 (three 2x downsamples)",
            ));
        }
        Ok(())
    }

    /// Channel count after `stage` (1-based; 0 is the single-channel input).
    pub fn channels_after(&self, stage: usize) -> usize {
        if stage == 0 {
            1
        } else {
            self.stage_channels[stage - 1]
        }
    }

    /// Spatial extent after `stage` for an `input`-sized square image.
    pub fn spatial_after(&self, stage: usize, input: usize) -> usize {
        (0..stage.min(3)).fold(input, |s, _| s / 2)
    }

    fn has_norm(&self, stage: usize) -> bool {
        self.norm != NormKind::None || (self.use_instance_norm_in_early_stages && stage <= 2)
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        for s in 1..=4 {
            let out = self.stage_channels[s - 1];
            for b in 0..self.blocks_per_stage {
                let cin = if b == 0 {
                    self.channels_after(s - 1)
                } else {
                    out
                };
                n += cin * out * 9 + out;
                if self.has_norm(s) {
                    n += 2 * out;
                }
            }
        }
        n + self.num_classes * self.stage_channels[3] + self.num_classes
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Momentum of batch-norm running statistics.
const BN_MOMENTUM: f64 = 0.1;

/// Trainable parameters, batch-norm running statistics, and the EMA shadow.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    pub config: BackboneConfig,
    pub params: ParamSet<T>,
    pub buffers: ParamSet<T>,
    pub ema: ParamSet<T>,
    pub step: u64,
}

fn block_name(stage: usize, block: usize) -> String {
    format!("stage{stage}.block{block}")
}

impl<T: Scalar> ModelState<T> {
    pub fn init<R: Rng + ?Sized>(config: &BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut buffers = ParamSet::new();
        for s in 1..=4 {
            let out = config.stage_channels[s - 1];
            for b in 0..config.blocks_per_stage {
                let cin = if b == 0 {
                    config.channels_after(s - 1)
                } else {
                    out
                };
                let name = block_name(s, b);
                // Uniform He initialization: bound sqrt(6 / fan_in).
                let fan_in = cin * 9;
                let w = fan_in_uniform::<T, R>(&[out, cin, 3, 3], fan_in, rng)
                    .map(|v| v * T::lit(6f64.sqrt()));
                params.push(format!("{name}.conv.weight"), w);
                params.push(format!("{name}.conv.bias"), Tensor::zeros(&[out]));
                if config.has_norm(s) {
                    params.push(format!("{name}.norm.gamma"), Tensor::full(&[out], T::one()));
                    params.push(format!("{name}.norm.beta"), Tensor::zeros(&[out]));
                }
                if config.norm == NormKind::Batch {
                    buffers.push(format!("{name}.norm.running_mean"), Tensor::zeros(&[out]));
                    buffers.push(
                        format!("{name}.norm.running_var"),
                        Tensor::full(&[out], T::one()),
                    );
                }
            }
        }
        let c4 = config.stage_channels[3];
        params.push(
            "classifier.weight",
            fan_in_uniform(&[config.num_classes, c4], c4, rng),
        );
        params.push("classifier.bias", Tensor::zeros(&[config.num_classes]));
        Ok(Self {
            config: config.clone(),
            ema: params.clone(),
            params,
            buffers,
            step: 0,
        })
    }

    /// State whose live parameters are the EMA shadow; used for evaluation.
    pub fn ema_snapshot(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.ema.clone(),
            buffers: self.buffers.clone(),
            ema: self.ema.clone(),
            step: self.step,
        }
    }
}

/// Per-forward bookkeeping: parameter handles, mode, and pending batch-norm
/// statistic updates (applied by [`ModelGraph::commit_buffers`]).
pub struct ModelGraph<T> {
    pub bound: Bound,
    pub mode: Mode,
    bn_updates: Vec<(String, Vec<T>, Vec<T>)>,
}

impl<T: Scalar> ModelGraph<T> {
    pub fn bind(g: &mut Graph<T>, state: &ModelState<T>, trainable: bool, mode: Mode) -> Self {
        Self {
            bound: state.params.bind(g, trainable),
            mode,
            bn_updates: Vec::new(),
        }
    }

    /// Folds the batch statistics observed during this forward into the
    /// running estimates, in order of observation.
    pub fn commit_buffers(&mut self, state: &mut ModelState<T>) {
        let m = T::lit(BN_MOMENTUM);
        for (name, mean, var) in self.bn_updates.drain(..) {
            for (key, obs) in [("running_mean", mean), ("running_var", var)] {
                if let Some(buf) = state.buffers.get_mut(&format!("{name}.norm.{key}")) {
                    for (r, o) in buf.data_mut().iter_mut().zip(obs) {
                        *r = (T::one() - m) * *r + m * o;
                    }
                }
            }
        }
    }
}

fn batch_norm<T: Scalar>(
    g: &mut Graph<T>,
    state: &ModelState<T>,
    mg: &mut ModelGraph<T>,
    name: &str,
    x: Var,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let axes = [0usize, 2, 3];
    let eps = T::lit(EPSILON);
    match mg.mode {
        Mode::Train => {
            let mu = g.mean(x, &axes)?;
            let mu_e = g.expand(mu, &shape, &axes)?;
            let centered = g.sub(x, mu_e)?;
            let sq = g.square(centered)?;
            let var = g.mean(sq, &axes)?;
            let n = (shape[0] * shape[2] * shape[3]) as f64;
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            mg.bn_updates.push((
                name.to_string(),
                g.value(mu).data().to_vec(),
                g.value(var)
                    .data()
                    .iter()
                    .map(|&v| v * T::lit(unbiased))
                    .collect(),
            ));
            let var_eps = g.add_scalar(var, eps)?;
            let sd = g.sqrt(var_eps)?;
            let sd_e = g.expand(sd, &shape, &axes)?;
            g.div(centered, sd_e)
        }
        Mode::Eval => {
            let rm = state
                .buffers
                .get(&format!("{name}.norm.running_mean"))
                .ok_or_else(|| Error::Other(format!("missing running mean for {name}")))?;
            let rv = state
                .buffers
                .get(&format!("{name}.norm.running_var"))
                .ok_or_else(|| Error::Other(format!("missing running var for {name}")))?;
            let scale = rv.map(|v| T::one() / (v + eps).sqrt());
            let mu = g.constant(rm.clone());
            let sc = g.constant(scale);
            let mu_e = broadcast_channels(g, mu, &shape)?;
            let sc_e = broadcast_channels(g, sc, &shape)?;
            let centered = g.sub(x, mu_e)?;
            g.mul(centered, sc_e)
        }
    }
}

fn block<T: Scalar>(
    g: &mut Graph<T>,
    state: &ModelState<T>,
    mg: &mut ModelGraph<T>,
    stage: usize,
    idx: usize,
    x: Var,
) -> Result<Var> {
    let cfg = &state.config;
    let name = block_name(stage, idx);
    let w = mg.bound.var(&format!("{name}.conv.weight"))?;
    let b = mg.bound.var(&format!("{name}.conv.bias"))?;
    let y = conv_bias(g, x, w, b, 1)?;
    if !cfg.has_norm(stage) {
        return g.relu(y);
    }
    let shape = g.shape(y).to_vec();
    let eps = T::lit(EPSILON);
    let primary = match cfg.norm {
        NormKind::Instance => Some(normalize_graph(g, y, eps)?),
        NormKind::Batch => Some(batch_norm(g, state, mg, &name, y)?),
        NormKind::None => None,
    };
    let normalized =
        if cfg.use_instance_norm_in_early_stages && stage <= 2 && cfg.norm != NormKind::Instance {
            let inst = normalize_graph(g, y, eps)?;
            let c = shape[1];
            let half = c / 2;
            let rest = primary.unwrap_or(y);
            let mask = Tensor::from_fn(&[c], |i| if i < half { T::one() } else { T::zero() });
            let inv = mask.map(|m| T::one() - m);
            let mv = g.constant(mask);
            let iv = g.constant(inv);
            let me = broadcast_channels(g, mv, &shape)?;
            let ie = broadcast_channels(g, iv, &shape)?;
            let a = g.mul(inst, me)?;
            let r = g.mul(rest, ie)?;
            g.add(a, r)?
        } else {
            primary.expect("has_norm implies a primary normalization")
        };
    let gamma = mg.bound.var(&format!("{name}.norm.gamma"))?;
    let beta = mg.bound.var(&format!("{name}.norm.beta"))?;
    let ge = broadcast_channels(g, gamma, &shape)?;
    let be = broadcast_channels(g, beta, &shape)?;
    let scaled = g.mul(normalized, ge)?;
    let affine = g.add(scaled, be)?;
    g.relu(affine)
}

/// Applies backbone stages `from..=to` (1-based). Stages 1–3 end with a 2×
/// average-pool downsample; stage 4 keeps its map for pooling.
pub fn forward_stages<T: Scalar>(
    g: &mut Graph<T>,
    state: &ModelState<T>,
    mg: &mut ModelGraph<T>,
    x: Var,
    from: usize,
    to: usize,
) -> Result<Var> {
    if !(1 <= from && from <= to && to <= 4) {
        return Err(Error::config(format!("invalid stage range {from}..={to}")));
    }
    let expect = state.config.channels_after(from - 1);
    let shape = g.shape(x);
    if shape.len() != 4 || shape[1] != expect {
        return Err(Error::shape(format!(
            "stage {from} expects [B,{expect},H,W], got {shape:?}"
        )));
    }
    let mut h = x;
    for s in from..=to {
        for b in 0..state.config.blocks_per_stage {
            h = block(g, state, mg, s, b, h)?;
        }
        if s < 4 {
            h = g.avg_pool2(h)?;
        }
    }
    Ok(h)
}

/// Pools features and applies the linear + sigmoid head.
/// Returns `(logits, probs)`, both `[B,N]`.
pub fn classify<T: Scalar>(
    g: &mut Graph<T>,
    mg: &ModelGraph<T>,
    features: Var,
) -> Result<(Var, Var)> {
    let w = mg.bound.var("classifier.weight")?;
    let b = mg.bound.var("classifier.bias")?;
    let (n, c) = (g.shape(w)[0], g.shape(w)[1]);
    let fs = g.shape(features);
    if fs.len() != 4 || fs[1] != c {
        return Err(Error::shape(format!(
            "classifier expects [B,{c},H,W] features, got {fs:?}"
        )));
    }
    let batch = fs[0];
    let pooled = g.global_avg_pool(features)?;
    let wt = g.transpose(w)?;
    let lin = g.matmul(pooled, wt)?;
    let be = g.expand(b, &[batch, n], &[0])?;
    let logits = g.add(lin, be)?;
    let probs = g.sigmoid(logits)?;
    Ok((logits, probs))
}

/// Source of the affine maps used for feature-level stylization.
pub enum FeatureStyler<'a, T> {
    /// No feature-level stylization.
    Off,
    /// Learned style nets; `bound` decides whether their parameters
    /// receive adjoints in this graph.
    Nets {
        nets: &'a StyleNets<T>,
        bound: &'a Bound,
    },
    /// Channel statistics of the partner features (plain AdaIN).
    Adain,
}

/// Outputs of the dual-branch forward.
#[derive(Clone, Copy, Debug)]
pub struct DualOutput {
    /// Clean-branch global features and probabilities, when computed.
    pub clean: Option<(Var, Var)>,
    pub f_s: Var,
    pub logits_s: Var,
    pub p_s: Var,
    /// `(Z₁, Z₂, Z_s)` when feature-level stylization ran.
    pub style_triple: Option<(Var, Var, Var)>,
}

pub fn check_permutation(pairing: &[usize], batch: usize) -> Result<()> {
    if pairing.len() != batch {
        return Err(Error::config(format!(
            "pairing has {} entries for batch {}",
            pairing.len(),
            batch
        )));
    }
    let mut seen = vec![false; batch];
    for &p in pairing {
        if p >= batch || std::mem::replace(&mut seen[p], true) {
            return Err(Error::config(format!(
                "pairing {pairing:?} is not a permutation"
            )));
        }
    }
    Ok(())
}

/// Clean branch over all four stages (when `clean` is given) and the
/// stylized branch with feature-level stylization after `insertion`.
#[allow(clippy::too_many_arguments)]
pub fn forward_dual<T: Scalar>(
    g: &mut Graph<T>,
    state: &ModelState<T>,
    mg: &mut ModelGraph<T>,
    clean: Option<Var>,
    stylized: Var,
    pairing: &[usize],
    styler: &FeatureStyler<'_, T>,
    insertion: InsertionStage,
) -> Result<DualOutput> {
    check_permutation(pairing, g.shape(stylized)[0])?;
    if let Some(c) = clean {
        if g.shape(c) != g.shape(stylized) {
            return Err(Error::shape("clean and stylized batches differ in shape"));
        }
    }
    let clean_out = match clean {
        Some(c) => {
            let f = forward_stages(g, state, mg, c, 1, 4)?;
            let (_, p) = classify(g, mg, f)?;
            Some((f, p))
        }
        None => None,
    };

    let (f_s, style_triple) = match styler {
        FeatureStyler::Off => (forward_stages(g, state, mg, stylized, 1, 4)?, None),
        _ => {
            let k = insertion.stage();
            let z1 = forward_stages(g, state, mg, stylized, 1, k)?;
            let z2 = g.index_select0(z1, pairing)?;
            let eps = T::lit(EPSILON);
            let zs = match styler {
                FeatureStyler::Nets { nets, bound } => srm_fl_apply(g, nets, bound, z1, z2, eps)?,
                FeatureStyler::Adain => adain_graph(g, z1, z2, eps)?,
                FeatureStyler::Off => unreachable!(),
            };
            let f_s = forward_stages(g, state, mg, zs, k + 1, 4)?;
            (f_s, Some((z1, z2, zs)))
        }
    };
    let (logits_s, p_s) = classify(g, mg, f_s)?;
    Ok(DualOutput {
        clean: clean_out,
        f_s,
        logits_s,
        p_s,
        style_triple,
    })
}

/// Eval-mode probabilities of a `[B,1,H,W]` batch.
pub fn predict<T: Scalar>(state: &ModelState<T>, batch: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let mut mg = ModelGraph::bind(&mut g, state, false, Mode::Eval);
    let x = g.constant(batch.clone());
    let f = forward_stages(&mut g, state, &mut mg, x, 1, 4)?;
    let (_, p) = classify(&mut g, &mg, f)?;
    Ok(g.value(p).clone())
}
