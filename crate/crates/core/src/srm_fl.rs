//! Feature-level style randomization: the pixel-wise GammaNet / BetaNet
//! style nets, the stylization operator and the style-net objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{conv_bias, fan_in_uniform, Bound, ParamSet};
use crate::scalar::Scalar;
use crate::style::{gram_graph, normalize_graph};
use crate::tensor::{Graph, Tensor, Var};

/// Backbone stage after which feature-level stylization is inserted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertionStage {
    AfterStage1,
    AfterStage2,
    AfterStage3,
}

impl InsertionStage {
    /// Number of backbone stages run before stylization.
    pub fn stage(self) -> usize {
        match self {
            InsertionStage::AfterStage1 => 1,
            InsertionStage::AfterStage2 => 2,
            InsertionStage::AfterStage3 => 3,
        }
    }
}

/// Initialization of the style nets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleNetInit {
    /// Fan-in scaled uniform weights and biases in every layer.
    #[default]
    Uniform,
    /// Uniform hidden layers, zero output weights, output biases 1 (γ) and
    /// 0 (β): the stylized features start as the normalized content.
    NearIdentity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SrmFlConfig {
    /// Weight of the Gram (style) term in the style-net objective.
    pub eta: f64,
    /// Channel squeeze ratio of the middle layers.
    pub reduction: usize,
    pub insertion_stage: InsertionStage,
    pub init: StyleNetInit,
}

impl Default for SrmFlConfig {
    fn default() -> Self {
        Self {
            eta: 0.01,
            reduction: 4,
            insertion_stage: InsertionStage::AfterStage2,
            init: StyleNetInit::Uniform,
        }
    }
}

impl SrmFlConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if !(self.eta >= 0.0) {
            return Err(Error::config("srm_fl: eta must be >= 0"));
        }
        if self.reduction == 0 || channels % self.reduction != 0 {
            return Err(Error::config(format!(
                "srm_fl: reduction {} must divide {} channels",
                self.reduction, channels
            )));
        }
        Ok(())
    }
}

const NETS: [&str; 2] = ["gamma", "beta"];

/// `(in, out, kernel)` of the four layers for `channels` and `reduction`.
fn layer_plan(channels: usize, reduction: usize) -> [(usize, usize, usize); 4] {
    let squeezed = channels / reduction;
    [
        (channels, channels, 1),
        (channels, squeezed, 3),
        (squeezed, channels, 3),
        (channels, channels, 1),
    ]
}

/// Parameters of the two style nets. Each net is four biased convolutions
/// (1×1, 3×3, 3×3, 1×1) without normalization or activations.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleNets<T> {
    pub channels: usize,
    pub reduction: usize,
    pub params: ParamSet<T>,
}

impl<T: Scalar> StyleNets<T> {
    pub fn init<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        Self::build(channels, reduction, |shape, fan_in| {
            fan_in_uniform(shape, fan_in, rng)
        })
    }

    pub fn init_with<R: Rng + ?Sized>(
        channels: usize,
        reduction: usize,
        init: StyleNetInit,
        rng: &mut R,
    ) -> Result<Self> {
        let mut nets = Self::init(channels, reduction, rng)?;
        if init == StyleNetInit::NearIdentity {
            for (net, bias) in [("gamma", T::one()), ("beta", T::zero())] {
                for (suffix, value) in [("weight", T::zero()), ("bias", bias)] {
                    let t = nets
                        .params
                        .get_mut(&format!("{net}.3.{suffix}"))
                        .expect("output layer exists");
                    t.data_mut().iter_mut().for_each(|v| *v = value);
                }
            }
        }
        Ok(nets)
    }

    /// All-zero weights; both nets then emit zero maps.
    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        Self::build(channels, reduction, |shape, _| Tensor::zeros(shape))
    }

    fn build(
        channels: usize,
        reduction: usize,
        mut make: impl FnMut(&[usize], usize) -> Tensor<T>,
    ) -> Result<Self> {
        if channels == 0 || reduction == 0 || channels % reduction != 0 {
            return Err(Error::config(format!(
                "style nets: reduction {reduction} must divide {channels} channels"
            )));
        }
        let mut params = ParamSet::new();
        for net in NETS {
            for (i, (cin, cout, k)) in layer_plan(channels, reduction).into_iter().enumerate() {
                let fan_in = cin * k * k;
                params.push(
                    format!("{net}.{i}.weight"),
                    make(&[cout, cin, k, k], fan_in),
                );
                params.push(format!("{net}.{i}.bias"), make(&[cout], fan_in));
            }
        }
        Ok(Self {
            channels,
            reduction,
            params,
        })
    }

    /// Channel extents along either net: `[C, C, C/r, C, C]`.
    pub fn channel_trajectory(&self) -> Vec<usize> {
        let plan = layer_plan(self.channels, self.reduction);
        std::iter::once(plan[0].0)
            .chain(plan.iter().map(|l| l.1))
            .collect()
    }

    pub fn kernel_sizes(&self) -> [usize; 4] {
        layer_plan(self.channels, self.reduction).map(|l| l.2)
    }
}

fn run_net<T: Scalar>(g: &mut Graph<T>, bound: &Bound, net: &str, x: Var) -> Result<Var> {
    let mut h = x;
    for (i, k) in [1usize, 3, 3, 1].into_iter().enumerate() {
        let w = bound.var(&format!("{net}.{i}.weight"))?;
        let b = bound.var(&format!("{net}.{i}.bias"))?;
        h = conv_bias(g, h, w, b, k / 2)?;
    }
    Ok(h)
}

/// Pixel-wise affine maps `(φ_γ(x_rs), φ_β(x_rs))`, each shaped like `x_rs`.
pub fn style_nets_forward<T: Scalar>(
    g: &mut Graph<T>,
    nets: &StyleNets<T>,
    bound: &Bound,
    x_rs: Var,
) -> Result<(Var, Var)> {
    let shape = g.shape(x_rs);
    if shape.len() != 4 || shape[1] != nets.channels {
        return Err(Error::shape(format!(
            "style nets expect [B,{},H,W], got {:?}",
            nets.channels, shape
        )));
    }
    let gamma = run_net(g, bound, "gamma", x_rs)?;
    let beta = run_net(g, bound, "beta", x_rs)?;
    Ok((gamma, beta))
}

/// `γ_map ⊙ (x_c - μ(x_c)) / σ(x_c) + β_map`.
pub fn stylize_with_maps<T: Scalar>(
    g: &mut Graph<T>,
    x_c: Var,
    gamma_map: Var,
    beta_map: Var,
    epsilon: T,
) -> Result<Var> {
    if g.shape(gamma_map) != g.shape(x_c) || g.shape(beta_map) != g.shape(x_c) {
        return Err(Error::shape(format!(
            "affine maps {:?}/{:?} do not match content {:?}",
            g.shape(gamma_map),
            g.shape(beta_map),
            g.shape(x_c)
        )));
    }
    let n = normalize_graph(g, x_c, epsilon)?;
    let scaled = g.mul(gamma_map, n)?;
    g.add(scaled, beta_map)
}

/// Re-styles `x_c` with affine maps predicted from `x_rs`.
pub fn srm_fl_apply<T: Scalar>(
    g: &mut Graph<T>,
    nets: &StyleNets<T>,
    bound: &Bound,
    x_c: Var,
    x_rs: Var,
    epsilon: T,
) -> Result<Var> {
    if g.shape(x_c) != g.shape(x_rs) {
        return Err(Error::shape(format!(
            "srm_fl: content {:?} and reference {:?} differ",
            g.shape(x_c),
            g.shape(x_rs)
        )));
    }
    let (gamma, beta) = style_nets_forward(g, nets, bound, x_rs)?;
    stylize_with_maps(g, x_c, gamma, beta, epsilon)
}

/// Style-net objective terms.
#[derive(Clone, Copy, Debug)]
pub struct StyleLoss {
    pub content: Var,
    pub style: Var,
    pub total: Var,
}

/// `L_c = ‖x_c − x_s‖²_F`, `L_s = ‖G(x_rs) − G(x_s)‖²_F`, `L_φ = L_c + η·L_s`.
///
/// Batched `[B,C,H,W]` inputs sum per instance and average over `B`.
pub fn style_net_loss<T: Scalar>(
    g: &mut Graph<T>,
    x_c: Var,
    x_rs: Var,
    x_s: Var,
    eta: T,
) -> Result<StyleLoss> {
    let shape = g.shape(x_c).to_vec();
    if g.shape(x_rs) != shape.as_slice() || g.shape(x_s) != shape.as_slice() {
        return Err(Error::shape("style_net_loss: operands must share a shape"));
    }
    let (batch, per_instance): (usize, Vec<usize>) = match shape.len() {
        3 => (1, shape.clone()),
        4 => (shape[0], shape[1..].to_vec()),
        _ => return Err(Error::shape(format!("style_net_loss on {shape:?}"))),
    };
    let inv_b = T::one() / T::lit(batch as f64);

    let diff = g.sub(x_c, x_s)?;
    let sq = g.square(diff)?;
    let lc_sum = g.sum_all(sq)?;
    let content = g.mul_scalar(lc_sum, inv_b)?;

    let mut style_terms = Vec::with_capacity(batch);
    for b in 0..batch {
        let (r, s) = if shape.len() == 4 {
            let r = g.index_select0(x_rs, &[b])?;
            let s = g.index_select0(x_s, &[b])?;
            (g.reshape(r, &per_instance)?, g.reshape(s, &per_instance)?)
        } else {
            (x_rs, x_s)
        };
        let gr = gram_graph(g, r)?;
        let gs = gram_graph(g, s)?;
        let d = g.sub(gr, gs)?;
        let d2 = g.square(d)?;
        style_terms.push(g.sum_all(d2)?);
    }
    let mut ls = style_terms[0];
    for &t in &style_terms[1..] {
        ls = g.add(ls, t)?;
    }
    let style = g.mul_scalar(ls, inv_b)?;
    let weighted = g.mul_scalar(style, eta)?;
    let total = g.add(content, weighted)?;
    Ok(StyleLoss {
        content,
        style,
        total,
    })
}
