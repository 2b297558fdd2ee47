#![allow(dead_code)]

use std::path::Path;

use styledg::data::{
    default_domain_specs, generate_dataset, save_manifest, GeneratorConfig, ImageSet,
};
use styledg::losses::focal_loss;
use styledg::model::{classify, forward_stages, BackboneConfig, Mode, ModelGraph, NormKind};
use styledg::params::ParamSet;
use styledg::train::{resolve_normalization, Toggles, TrainConfig, Trainer};
use styledg::{Graph, Scalar};

/// Renders a small three-domain corpus under `root` and loads it.
pub fn tiny_corpus(
    root: &Path,
    per_domain: usize,
    image_size: usize,
    resize_to: usize,
) -> ImageSet {
    let mut domains = default_domain_specs();
    domains.iter_mut().for_each(|d| d.count = Some(per_domain));
    let cfg = GeneratorConfig {
        image_size,
        seed: 7,
        domains,
        ..Default::default()
    };
    let manifest = generate_dataset(&cfg, root).unwrap();
    save_manifest(&manifest, &root.join("manifest.jsonl")).unwrap();
    ImageSet::load(&manifest, root, resize_to).unwrap()
}

/// Small network and schedule for 16×16 crops.
pub fn tiny_config(data: &ImageSet, toggles: Toggles) -> TrainConfig {
    let mut cfg = TrainConfig {
        lr: 1e-3,
        batch_size: 4,
        grad_accum_steps: 2,
        epochs: 1,
        toggles,
        seed: 11,
        backbone: BackboneConfig {
            stage_channels: [4, 8, 8, 16],
            input_size: 16,
            norm: NormKind::Instance,
            ..Default::default()
        },
        ..Default::default()
    };
    cfg.srm_fl.reduction = 2;
    cfg.preprocess.resize_to = 18;
    cfg.preprocess.crop_to = 16;
    resolve_normalization(&mut cfg, data).unwrap();
    cfg
}

/// Plain Adam, written out independently of the library optimizer.
struct RefAdam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

/// Clean-branch focal-loss training: forward, focal loss, mean of the
/// micro-batch gradients, Adam. Batches come from the trainer's data plan
/// so both runs see identical inputs. Returns the per-step mean loss and
/// the final parameters.
pub fn reference_focal_training(
    cfg: &TrainConfig,
    data: &ImageSet,
    steps: usize,
) -> (Vec<f64>, ParamSet<f64>) {
    let planner = Trainer::<f64>::new(cfg.clone()).unwrap();
    let mut state = planner.state.clone();
    let mut adam = RefAdam {
        m: state
            .params
            .iter()
            .map(|(_, t)| vec![0.0; t.numel()])
            .collect(),
        v: state
            .params
            .iter()
            .map(|(_, t)| vec![0.0; t.numel()])
            .collect(),
        t: 0,
    };
    let mut losses = Vec::new();
    let mut epoch = 0;
    while losses.len() < steps {
        for step in planner.epoch_plan(data.len(), epoch) {
            if losses.len() == steps {
                break;
            }
            let mut sum: Vec<Vec<f64>> = adam.m.iter().map(|m| vec![0.0; m.len()]).collect();
            let mut loss = 0.0;
            for idx in &step {
                let batch = planner.prepare(data, idx, epoch).unwrap();
                let mut g = Graph::new();
                let mut mg = ModelGraph::bind(&mut g, &state, true, Mode::Train);
                let x = g.constant(batch.clean.clone());
                let f = forward_stages(&mut g, &state, &mut mg, x, 1, 4).unwrap();
                let (_, p) = classify(&mut g, &mg, f).unwrap();
                let l = focal_loss(&mut g, p, &batch.labels, &cfg.focal).unwrap();
                g.backward(l).unwrap();
                loss += g.value(l).item();
                for (acc, &v) in sum.iter_mut().zip(&mg.bound.vars) {
                    for (a, gv) in acc.iter_mut().zip(g.grad(v).unwrap()) {
                        *a += gv;
                    }
                }
            }
            let k = step.len() as f64;
            adam.t += 1;
            let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
            let c1 = 1.0 - b1.powi(adam.t);
            let c2 = 1.0 - b2.powi(adam.t);
            for (i, t) in state.params.tensors_mut().enumerate() {
                for (j, p) in t.data_mut().iter_mut().enumerate() {
                    let gr = sum[i][j] / k;
                    adam.m[i][j] = b1 * adam.m[i][j] + (1.0 - b1) * gr;
                    adam.v[i][j] = b2 * adam.v[i][j] + (1.0 - b2) * gr * gr;
                    *p -=
                        cfg.lr * (adam.m[i][j] / c1) / ((adam.v[i][j] / c2).sqrt() + cfg.adam_eps);
                }
            }
            losses.push(loss / k);
        }
        epoch += 1;
    }
    (losses, state.params)
}

/// Largest absolute difference between two parameter sets of equal layout.
pub fn max_param_diff<T: Scalar>(a: &ParamSet<T>, b: &ParamSet<T>) -> f64 {
    assert!(a.same_layout(b));
    a.iter()
        .zip(b.iter())
        .flat_map(|((_, x), (_, y))| {
            x.data()
                .iter()
                .zip(y.data())
                .map(|(p, q)| (p.as_f64() - q.as_f64()).abs())
        })
        .fold(0.0, f64::max)
}

/// Trains `cfg` for exactly `steps` optimizer steps.
pub fn run_steps<T: Scalar>(cfg: &TrainConfig, data: &ImageSet, steps: usize) -> Trainer<T> {
    let mut t = Trainer::<T>::new(cfg.clone()).unwrap();
    let mut epoch = 0;
    while (t.state.step as usize) < steps {
        for step in t.epoch_plan(data.len(), epoch) {
            if t.state.step as usize == steps {
                break;
            }
            t.optimizer_step(data, &step, epoch, styledg::train::StepObjective::Both)
                .unwrap();
        }
        epoch += 1;
    }
    t
}
