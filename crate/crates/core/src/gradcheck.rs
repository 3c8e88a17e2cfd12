//! Central finite-difference check of every parameter gradient against the tape.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::autograd::Tape;
use crate::config::NetworkConfig;
use crate::data::{generate_scene, Sample, SceneConfig};
use crate::error::{Error, Result};
use crate::loss::{build_objective, stack_images, LossKind, Targets};
use crate::model::{build_params, forward, Stage};
use crate::params::{group_of, ParamStore};
use crate::tensor::Tensor4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Floor of the gradient scale dividing the error.
    pub floor: f64,
    /// Canvas side of the synthetic probe image.
    pub size: usize,
    pub max_pos_weight: f64,
    /// Test hook: scales every conv weight gradient on the analytic side.
    pub corrupt_conv_weight_grad: Option<f64>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-4,
            floor: 1e-8,
            size: 16,
            max_pos_weight: 20.0,
            corrupt_conv_weight_grad: None,
        }
    }
}

/// Per parameter group, the worst over losses of the norm-wise relative
/// error `max|a - n| / max(max|a|, max|n|)` taken over the group's scalars.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupResult {
    pub group: String,
    pub scalars: usize,
    pub max_rel_error: f64,
    /// Loss and scalar with the largest absolute discrepancy.
    pub worst_loss: String,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub losses: Vec<String>,
    pub groups: Vec<GroupResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_error < self.tolerance)
    }

    pub fn failing_groups(&self) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|g| !(g.max_rel_error < self.tolerance))
            .map(|g| g.group.as_str())
            .collect()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    /// One tab-separated line per group.
    pub fn to_table(&self) -> String {
        let mut out = String::from("group\tscalars\tmax_rel_error\tworst_loss\tworst_param\tanalytic\tnumeric\tstatus\n");
        for g in &self.groups {
            let status = if g.max_rel_error < self.tolerance { "ok" } else { "FAIL" };
            let _ = writeln!(
                out,
                "{}\t{}\t{:.3e}\t{}\t{}[{}]\t{:.6e}\t{:.6e}\t{status}",
                g.group, g.scalars, g.max_rel_error, g.worst_loss, g.worst_param, g.worst_index, g.worst_analytic, g.worst_numeric
            );
        }
        out
    }
}

struct Probe<'a> {
    net: &'a NetworkConfig,
    image: Tensor4,
    targets: Targets,
    max_pos_weight: f64,
}

impl Probe<'_> {
    fn losses(&self, params: &ParamStore) -> Result<[Option<f64>; 6]> {
        let mut tape = Tape::new();
        let image = tape.constant(self.image.clone());
        let bound = params.bind(&mut tape, |_| false);
        let out = forward(&mut tape, &bound, self.net, image, Stage::Full)?;
        let obj = build_objective(&mut tape, &out, &self.targets, self.net, Stage::Full, self.max_pos_weight)?;
        Ok(obj.terms.map(|t| t.map(|v| tape.value(v).item())))
    }

    /// Analytic gradient of each active loss with respect to every parameter.
    fn gradients(&self, params: &ParamStore, corrupt: Option<f64>) -> Result<Vec<(LossKind, BTreeMap<String, Tensor4>)>> {
        let mut tape = Tape::new();
        if let Some(scale) = corrupt {
            tape.corrupt_conv_weight_grad(scale);
        }
        let image = tape.constant(self.image.clone());
        let bound = params.bind(&mut tape, |_| true);
        let out = forward(&mut tape, &bound, self.net, image, Stage::Full)?;
        let obj = build_objective(&mut tape, &out, &self.targets, self.net, Stage::Full, self.max_pos_weight)?;
        let mut result = Vec::new();
        for kind in LossKind::ALL {
            let Some(l) = obj.terms[kind.index()] else { continue };
            let mut grads = tape.backward(l)?;
            result.push((kind, bound.collect_grads(&tape, &mut grads)));
        }
        Ok(result)
    }
}

/// Checks a freshly initialised network built from `net` and `seed` on one
/// synthetic scene.
pub fn gradcheck(net: &NetworkConfig, seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    net.validate()?;
    let scene = SceneConfig {
        height: opts.size,
        width: opts.size,
        num_classes: net.num_classes,
        ..SceneConfig::default()
    };
    let sample = generate_scene(seed, &scene)?;
    let mut params = build_params(net, seed)?;
    perturb_zero_inits(&mut params, seed);
    gradcheck_params(net, &params, &sample, opts)
}

/// Zero-initialised message kernels and biases make some gradients vanish
/// identically; a small deterministic perturbation exercises every path.
fn perturb_zero_inits(params: &mut ParamStore, seed: u64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    for (_, t) in params.iter_mut() {
        if t.data().iter().all(|&v| v == 0.0) {
            for v in t.data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
}

/// Checks the given parameters on `sample`.
pub fn gradcheck_params(net: &NetworkConfig, params: &ParamStore, sample: &Sample, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let probe = Probe {
        net,
        image: stack_images(&[sample])?,
        targets: Targets::from_samples(&[sample])?,
        max_pos_weight: opts.max_pos_weight,
    };
    let analytic = probe.gradients(params, opts.corrupt_conv_weight_grad)?;
    if analytic.is_empty() {
        return Err(Error::Config("no loss term is active".into()));
    }
    // (group, loss) -> running max |a - n| with its location, and max |a|, |n|.
    let mut acc: BTreeMap<(String, LossKind), Tally> = BTreeMap::new();
    let mut scalars: BTreeMap<String, usize> = BTreeMap::new();
    let mut work = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let group = group_of(name).to_string();
        let len = params.get(name).expect("known name").len();
        *scalars.entry(group.clone()).or_default() += len;
        for i in 0..len {
            let original = params.get(name).expect("known name").data()[i];
            work.get_mut(name).expect("known name").data_mut()[i] = original + opts.step;
            let plus = probe.losses(&work)?;
            work.get_mut(name).expect("known name").data_mut()[i] = original - opts.step;
            let minus = probe.losses(&work)?;
            work.get_mut(name).expect("known name").data_mut()[i] = original;
            for (kind, grads) in &analytic {
                let k = kind.index();
                let (Some(p), Some(m)) = (plus[k], minus[k]) else { continue };
                let numeric = (p - m) / (2.0 * opts.step);
                let a = grads.get(name).map_or(0.0, |g| g.data()[i]);
                let t = acc.entry((group.clone(), *kind)).or_default();
                t.scale = t.scale.max(a.abs()).max(numeric.abs());
                let diff = (a - numeric).abs();
                if !(diff <= t.diff) {
                    t.diff = diff;
                    t.at = (name.clone(), i, a, numeric);
                }
            }
        }
    }
    let mut groups: BTreeMap<String, GroupResult> = scalars
        .into_iter()
        .map(|(group, scalars)| {
            let r = GroupResult {
                group: group.clone(),
                scalars,
                max_rel_error: 0.0,
                worst_loss: String::new(),
                worst_param: String::new(),
                worst_index: 0,
                worst_analytic: 0.0,
                worst_numeric: 0.0,
            };
            (group, r)
        })
        .collect();
    for ((group, kind), t) in acc {
        let g = groups.get_mut(&group).expect("group tallied");
        let err = t.diff / t.scale.max(opts.floor);
        if !(err <= g.max_rel_error) || g.worst_loss.is_empty() {
            g.max_rel_error = err;
            g.worst_loss = kind.name().to_string();
            (g.worst_param, g.worst_index, g.worst_analytic, g.worst_numeric) = t.at;
        }
    }
    Ok(GradcheckReport {
        tolerance: opts.tolerance,
        losses: analytic.iter().map(|(k, _)| k.name().to_string()).collect(),
        groups: groups.into_values().collect(),
    })
}

#[derive(Default)]
struct Tally {
    diff: f64,
    scale: f64,
    at: (String, usize, f64, f64),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupted_conv_gradient_is_caught() {
        let net = NetworkConfig::tiny(3);
        let opts = GradcheckOptions {
            size: 8,
            corrupt_conv_weight_grad: Some(1.5),
            ..GradcheckOptions::default()
        };
        let report = gradcheck(&net, 0, &opts).unwrap();
        assert!(!report.passed());
        assert!(report.failing_groups().contains(&"frontend.stage1"));
    }
}
