//! Central-difference gradient battery over every differentiable operator,
//! the loss terms, and the composed training objectives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::losses::{
    combine_graph, content_consistency, focal_loss, kld_sym, pdr_loss, FocalConfig,
};
use crate::model::{
    forward_dual, BackboneConfig, FeatureStyler, Mode, ModelGraph, ModelState, NormKind,
};
use crate::params::Bound;
use crate::srm_fl::{srm_fl_apply, style_net_loss, InsertionStage, StyleNets};
use crate::style::{adain_graph, channel_stats_graph, gram_graph, instance_norm_graph};
use crate::tensor::{grad_check, Graph, Tensor, Var};

pub const BATTERY_TOL: f64 = 1e-4;
const STEP: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

type Probe = Box<dyn Fn(&mut Graph<f64>, Var) -> Result<Var>>;

struct Case {
    name: String,
    input: Tensor<f64>,
    f: Probe,
}

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, so relu kinks and divisions stay clear
/// of the finite-difference step.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.2..1.5);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `Σ w ⊙ y` with fixed random weights, turning any output into a scalar
/// whose gradient exercises every output coordinate.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = g.constant(uniform(g.shape(y), -1.0, 1.0, seed ^ 0x5eed));
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

fn case(
    name: &str,
    input: Tensor<f64>,
    f: impl Fn(&mut Graph<f64>, Var) -> Result<Var> + 'static,
) -> Case {
    Case {
        name: name.into(),
        input,
        f: Box::new(f),
    }
}

fn unary(name: &str, input: Tensor<f64>, op: fn(&mut Graph<f64>, Var) -> Result<Var>) -> Case {
    case(name, input, move |g, x| {
        let y = op(g, x)?;
        project(g, y, 1)
    })
}

fn operator_cases() -> Vec<Case> {
    let s = [2, 3, 4];
    let pos = || uniform(&[2, 3, 4], 0.3, 2.0, 11);
    let other = away_from_zero(&s, 12);
    let mut v = vec![
        unary("exp", uniform(&s, -1.0, 1.0, 10), |g, x| g.exp(x)),
        unary("log", pos(), |g, x| g.log(x)),
        unary("sqrt", pos(), |g, x| g.sqrt(x)),
        unary("pow", pos(), |g, x| g.pow(x, 2.5)),
        unary("square", uniform(&s, -1.0, 1.0, 13), |g, x| g.square(x)),
        unary("neg", uniform(&s, -1.0, 1.0, 14), |g, x| g.neg(x)),
        unary("relu", away_from_zero(&s, 15), |g, x| g.relu(x)),
        unary("sigmoid", uniform(&s, -3.0, 3.0, 16), |g, x| g.sigmoid(x)),
        unary("clamp", away_from_zero(&s, 17), |g, x| {
            g.clamp(x, -1.0, 1.0)
        }),
        unary("add_scalar", uniform(&s, -1.0, 1.0, 18), |g, x| {
            g.add_scalar(x, 0.7)
        }),
        unary("mul_scalar", uniform(&s, -1.0, 1.0, 19), |g, x| {
            g.mul_scalar(x, -1.3)
        }),
        unary("sum", uniform(&s, -1.0, 1.0, 20), |g, x| g.sum(x, &[1])),
        unary("mean", uniform(&s, -1.0, 1.0, 21), |g, x| {
            g.mean(x, &[0, 2])
        }),
        unary("sum_all", uniform(&s, -1.0, 1.0, 22), |g, x| g.sum_all(x)),
        unary("mean_all", uniform(&s, -1.0, 1.0, 23), |g, x| g.mean_all(x)),
        unary("expand", uniform(&[2, 4], -1.0, 1.0, 24), |g, x| {
            g.expand(x, &[2, 3, 4], &[1])
        }),
        unary("reshape", uniform(&s, -1.0, 1.0, 25), |g, x| {
            g.reshape(x, &[6, 4])
        }),
        unary("transpose", uniform(&[3, 5], -1.0, 1.0, 26), |g, x| {
            g.transpose(x)
        }),
        unary(
            "avg_pool2",
            uniform(&[2, 2, 4, 6], -1.0, 1.0, 27),
            |g, x| g.avg_pool2(x),
        ),
        unary(
            "global_avg_pool",
            uniform(&[2, 3, 3, 3], -1.0, 1.0, 28),
            |g, x| g.global_avg_pool(x),
        ),
        unary("index_select0", uniform(&s, -1.0, 1.0, 29), |g, x| {
            g.index_select0(x, &[1, 0, 1])
        }),
    ];
    for (name, op) in [
        (
            "add",
            Graph::add as fn(&mut Graph<f64>, Var, Var) -> Result<Var>,
        ),
        ("sub", Graph::sub),
        ("mul", Graph::mul),
        ("div", Graph::div),
    ] {
        let b = other.clone();
        v.push(case(
            &format!("{name}/lhs"),
            uniform(&s, -1.0, 1.0, 30),
            move |g, x| {
                let bv = g.constant(b.clone());
                let y = op(g, x, bv)?;
                project(g, y, 2)
            },
        ));
        let a = uniform(&s, -1.0, 1.0, 31);
        v.push(case(&format!("{name}/rhs"), other.clone(), move |g, x| {
            let av = g.constant(a.clone());
            let y = op(g, av, x)?;
            project(g, y, 3)
        }));
    }
    let mb = uniform(&[4, 2], -1.0, 1.0, 32);
    v.push(case(
        "matmul/lhs",
        uniform(&[3, 4], -1.0, 1.0, 33),
        move |g, x| {
            let b = g.constant(mb.clone());
            let y = g.matmul(x, b)?;
            project(g, y, 4)
        },
    ));
    let ma = uniform(&[3, 4], -1.0, 1.0, 34);
    v.push(case(
        "matmul/rhs",
        uniform(&[4, 2], -1.0, 1.0, 35),
        move |g, x| {
            let a = g.constant(ma.clone());
            let y = g.matmul(a, x)?;
            project(g, y, 5)
        },
    ));
    for (stride, pad) in [(1, 0), (1, 1), (2, 0), (2, 1)] {
        let kernel = uniform(&[3, 2, 3, 3], -1.0, 1.0, 36);
        v.push(case(
            &format!("conv2d/input/s{stride}p{pad}"),
            uniform(&[2, 2, 7, 7], -1.0, 1.0, 37),
            move |g, x| {
                let k = g.constant(kernel.clone());
                let y = g.conv2d(x, k, stride, pad)?;
                project(g, y, 6)
            },
        ));
        let input = uniform(&[2, 2, 7, 7], -1.0, 1.0, 38);
        v.push(case(
            &format!("conv2d/kernel/s{stride}p{pad}"),
            uniform(&[3, 2, 3, 3], -1.0, 1.0, 39),
            move |g, k| {
                let x = g.constant(input.clone());
                let y = g.conv2d(x, k, stride, pad)?;
                project(g, y, 7)
            },
        ));
    }
    v
}

fn style_cases() -> Vec<Case> {
    let eps = crate::scalar::EPSILON;
    let shape = [2, 3, 4, 4];
    let mut v = vec![
        case(
            "channel_stats/mean",
            uniform(&shape, -1.0, 1.0, 40),
            move |g, x| {
                let (mu, _) = channel_stats_graph(g, x, eps)?;
                project(g, mu, 8)
            },
        ),
        case(
            "channel_stats/std",
            uniform(&shape, -1.0, 1.0, 41),
            move |g, x| {
                let (_, sigma) = channel_stats_graph(g, x, eps)?;
                project(g, sigma, 9)
            },
        ),
        case(
            "instance_norm",
            uniform(&shape, -1.0, 1.0, 42),
            move |g, x| {
                let gamma = g.constant(uniform(&[3], 0.5, 1.5, 43));
                let beta = g.constant(uniform(&[3], -0.5, 0.5, 44));
                let y = instance_norm_graph(g, x, gamma, beta, eps)?;
                project(g, y, 10)
            },
        ),
        case("gram", uniform(&[3, 4, 4], -1.0, 1.0, 45), |g, x| {
            let y = gram_graph(g, x)?;
            project(g, y, 11)
        }),
    ];
    let reference = uniform(&shape, -2.0, 2.0, 46);
    v.push(case(
        "adain/content",
        uniform(&shape, -1.0, 1.0, 47),
        move |g, x| {
            let r = g.constant(reference.clone());
            let y = adain_graph(g, x, r, eps)?;
            project(g, y, 12)
        },
    ));
    let content = uniform(&shape, -1.0, 1.0, 48);
    v.push(case(
        "adain/reference",
        uniform(&shape, -2.0, 2.0, 49),
        move |g, x| {
            let c = g.constant(content.clone());
            let y = adain_graph(g, c, x, eps)?;
            project(g, y, 13)
        },
    ));
    v
}

fn loss_cases() -> Vec<Case> {
    let labels = Tensor::from_f64(&[2, 3], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).expect("static shape");
    let other = uniform(&[2, 3], 0.1, 0.9, 50);
    let mut v = Vec::new();
    for (gamma_prime, alpha) in [(2.0, 0.25), (0.0, 0.5), (1.5, 0.7)] {
        let labels = labels.clone();
        v.push(case(
            &format!("focal/gamma{gamma_prime}/alpha{alpha}"),
            uniform(&[2, 3], 0.05, 0.95, 51),
            move |g, p| {
                let cfg = FocalConfig {
                    alpha_t: alpha,
                    gamma_prime,
                };
                focal_loss(g, p, &labels, &cfg)
            },
        ));
    }
    let q = other.clone();
    v.push(case(
        "kld_sym/first",
        uniform(&[2, 3], 0.1, 0.9, 52),
        move |g, p| {
            let qv = g.constant(q.clone());
            kld_sym(g, p, qv)
        },
    ));
    let q = other.clone();
    v.push(case(
        "pdr/second",
        uniform(&[2, 3], 0.1, 0.9, 53),
        move |g, p| {
            let qv = g.constant(q.clone());
            pdr_loss(g, qv, p)
        },
    ));
    let f = uniform(&[2, 3, 2, 2], -1.0, 1.0, 54);
    v.push(case(
        "content_consistency",
        uniform(&[2, 3, 2, 2], -1.0, 1.0, 55),
        move |g, x| {
            let fv = g.constant(f.clone());
            content_consistency(g, x, fv)
        },
    ));
    let (c, r) = (
        uniform(&[2, 4, 3, 3], -1.0, 1.0, 56),
        uniform(&[2, 4, 3, 3], -1.0, 1.0, 57),
    );
    v.push(case(
        "style_net_loss",
        uniform(&[2, 4, 3, 3], -1.0, 1.0, 58),
        move |g, xs| {
            let cv = g.constant(c.clone());
            let rv = g.constant(r.clone());
            Ok(style_net_loss(g, cv, rv, xs, 0.1)?.total)
        },
    ));
    v
}

/// Tiny model shared by the composed-objective checks.
struct Fixture {
    state: ModelState<f64>,
    nets: StyleNets<f64>,
    clean: Tensor<f64>,
    stylized: Tensor<f64>,
    labels: Tensor<f64>,
}

fn fixture(norm: NormKind, ibn: bool) -> Result<Fixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let cfg = BackboneConfig {
        stage_channels: [4, 4, 8, 8],
        blocks_per_stage: 1,
        input_size: 8,
        num_classes: 3,
        norm,
        use_instance_norm_in_early_stages: ibn,
    };
    let mut state = ModelState::init(&cfg, &mut rng)?;
    // Zero shifts put 1×1 instance-normalized maps exactly on the relu kink.
    let shifts: Vec<String> = state
        .params
        .iter()
        .map(|(n, _)| n)
        .filter(|n| n.ends_with("norm.beta"))
        .map(String::from)
        .collect();
    for (i, name) in shifts.iter().enumerate() {
        let t = state.params.get_mut(name).expect("listed parameter");
        *t = away_from_zero(t.shape(), 70 + i as u64).map(|v| 0.5 * v);
    }
    let nets = StyleNets::init(
        cfg.channels_after(InsertionStage::AfterStage2.stage()),
        2,
        &mut rng,
    )?;
    Ok(Fixture {
        state,
        nets,
        clean: uniform(&[2, 1, 8, 8], -1.5, 1.5, 61),
        stylized: uniform(&[2, 1, 8, 8], -2.0, 2.0, 62),
        labels: Tensor::from_f64(&[2, 3], &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0])?,
    })
}

/// Which value a composed check differentiates with respect to.
#[derive(Clone)]
enum Target {
    Clean,
    Stylized,
    Backbone(String),
}

/// `L_total` of the full method (both SRMs, both consistency terms) with
/// one input swapped for the probe variable.
fn l_total(fx: &Fixture, g: &mut Graph<f64>, x: Var, target: &Target) -> Result<Var> {
    let mut mg = ModelGraph::bind(g, &fx.state, false, Mode::Train);
    let nets_bound = fx.nets.params.bind(g, false);
    let mut clean = g.constant(fx.clean.clone());
    let mut stylized = g.constant(fx.stylized.clone());
    match target {
        Target::Clean => clean = x,
        Target::Stylized => stylized = x,
        Target::Backbone(name) => mg.bound.replace(name, x)?,
    }
    let styler = FeatureStyler::Nets {
        nets: &fx.nets,
        bound: &nets_bound,
    };
    let out = forward_dual(
        g,
        &fx.state,
        &mut mg,
        Some(clean),
        stylized,
        &[1, 0],
        &styler,
        InsertionStage::AfterStage2,
    )?;
    let (f, p) = out.clean.expect("clean branch requested");
    let l_cls = focal_loss(g, out.p_s, &fx.labels, &FocalConfig::default())?;
    let l_ccr = content_consistency(g, out.f_s, f)?;
    let l_pdr = pdr_loss(g, out.p_s, p)?;
    combine_graph(g, l_cls, Some(l_ccr), Some(l_pdr))
}

/// `L_φ` on fixed features, differentiated with respect to one style-net
/// tensor.
fn l_phi(fx: &Fixture, g: &mut Graph<f64>, x: Var, name: &str) -> Result<Var> {
    let mut bound: Bound = fx.nets.params.bind(g, false);
    bound.replace(name, x)?;
    let z1 = g.constant(uniform(&[2, 4, 2, 2], 0.0, 1.5, 63));
    let z2 = g.index_select0(z1, &[1, 0])?;
    let zs = srm_fl_apply(g, &fx.nets, &bound, z1, z2, crate::scalar::EPSILON)?;
    Ok(style_net_loss(g, z1, z2, zs, 0.01)?.total)
}

fn composed_cases() -> Result<Vec<Case>> {
    let mut v = Vec::new();
    for (label, norm, ibn) in [
        ("instance", NormKind::Instance, false),
        ("batch", NormKind::Batch, false),
        ("ibn", NormKind::Batch, true),
    ] {
        let fx = std::rc::Rc::new(fixture(norm, ibn)?);
        let mut targets = vec![
            (Target::Clean, fx.clean.clone()),
            (Target::Stylized, fx.stylized.clone()),
        ];
        for name in [
            "stage1.block0.conv.weight",
            "stage2.block0.norm.gamma",
            "stage3.block0.conv.bias",
            "stage4.block0.norm.beta",
            "classifier.weight",
        ] {
            let t = fx
                .state
                .params
                .get(name)
                .expect("fixture parameter")
                .clone();
            targets.push((Target::Backbone(name.into()), t));
        }
        for (target, input) in targets {
            let tag = match &target {
                Target::Clean => "clean input".to_string(),
                Target::Stylized => "stylized input".to_string(),
                Target::Backbone(n) => n.clone(),
            };
            let fx = fx.clone();
            v.push(case(
                &format!("l_total/{label}/{tag}"),
                input,
                move |g, x| l_total(&fx, g, x, &target),
            ));
        }
        if label == "instance" {
            for name in [
                "gamma.0.weight",
                "gamma.1.weight",
                "beta.2.bias",
                "beta.3.weight",
            ] {
                let input = fx
                    .nets
                    .params
                    .get(name)
                    .expect("style-net parameter")
                    .clone();
                let fx = fx.clone();
                v.push(case(&format!("l_phi/{name}"), input, move |g, x| {
                    l_phi(&fx, g, x, name)
                }));
            }
        }
    }
    Ok(v)
}

/// Runs every check in double precision.
pub fn gradient_battery() -> Result<Vec<CheckOutcome>> {
    let mut cases = operator_cases();
    cases.extend(style_cases());
    cases.extend(loss_cases());
    cases.extend(composed_cases()?);
    cases
        .into_iter()
        .map(|c| {
            let r = grad_check(&c.f, &c.input, STEP, BATTERY_TOL)?;
            Ok(CheckOutcome {
                name: c.name,
                coordinates: c.input.numel(),
                max_rel_err: r.max_rel_err,
                passed: r.passed(),
            })
        })
        .collect()
}
