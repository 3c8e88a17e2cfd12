use padnet::model::DistillationFeatures;
use padnet::{FinalTask, ParamStore, Shape4, Tape, Task, Tensor4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{rng, uniform};

pub const INSTANCES: u64 = 50;

pub struct Instance {
    pub features: Vec<(Task, Tensor4)>,
    pub channels: usize,
    pub params: ParamStore,
}

fn conv(params: &mut ParamStore, name: &str, c: usize, scale: f64, bias: f64, r: &mut ChaCha8Rng) {
    params.insert(format!("{name}.weight"), uniform(Shape4::new(c, c, 3, 3), r).map(|v| v * scale));
    params.insert(format!("{name}.bias"), Tensor4::full(Shape4::new(1, c, 1, 1), bias));
}

/// Random features for all four tasks and random gated-distillation layers.
pub fn instance(seed: u64, attention_bias: f64) -> Instance {
    let mut r = rng(seed);
    let channels = r.random_range(1..5);
    let (n, h, w) = (r.random_range(1..3), r.random_range(2..7), r.random_range(2..7));
    let features = Task::ALL
        .iter()
        .map(|&t| (t, uniform(Shape4::new(n, channels, h, w), &mut r)))
        .collect();
    let mut params = ParamStore::new();
    for t in Task::ALL {
        conv(&mut params, &format!("distill.message.{t}"), channels, 0.5, r.random_range(-0.5..0.5), &mut r);
    }
    for k in FinalTask::ALL {
        conv(&mut params, &format!("distill.attention.{k}"), channels, 0.1, attention_bias, &mut r);
    }
    Instance {
        features,
        channels,
        params,
    }
}

pub fn run(inst: &Instance, f: impl Fn(&mut Tape, &padnet::params::Bound, &DistillationFeatures) -> padnet::Result<padnet::Var>) -> Tensor4 {
    let mut tape = Tape::new();
    let bound = inst.params.bind(&mut tape, |_| false);
    let features = DistillationFeatures {
        maps: inst.features.iter().map(|(t, v)| (*t, tape.constant(v.clone()))).collect(),
    };
    let out = f(&mut tape, &bound, &features).unwrap();
    tape.value(out).clone()
}

pub fn own(inst: &Instance, k: FinalTask) -> &Tensor4 {
    &inst.features.iter().find(|(t, _)| *t == k.task()).unwrap().1
}

/// Sets each ungated per-pair kernel `t_to_k` to the shared kernel of `t`.
pub fn copy_shared_to_pair_kernels(inst: &mut Instance) {
    let shared: Vec<(String, Tensor4)> = inst
        .params
        .iter()
        .filter(|(n, _)| n.starts_with("distill.message."))
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();
    for k in FinalTask::ALL {
        for (name, t) in &shared {
            let (layer, suffix) = name.rsplit_once('.').unwrap();
            inst.params.insert(format!("{layer}_to_{k}.{suffix}"), t.clone());
        }
    }
}
