use padnet::checkpoint::sha256_hex;
use padnet::data::generate_dataset;
use padnet::metrics::format_table;
use padnet::model::in_pretrain_phase;
use padnet::train::{evaluate, format_curve, two_phase_train, TrainState};
use padnet::{Checkpoint, MetricsRow, NetworkConfig, RelDenominator, SceneConfig, TrainConfig};

fn small() -> (NetworkConfig, TrainConfig, Vec<padnet::Sample>) {
    let net = NetworkConfig::tiny(3);
    let train = TrainConfig {
        phase1_epochs: 1,
        phase2_epochs: 2,
        ..TrainConfig::desk()
    };
    let scene = SceneConfig {
        height: 16,
        width: 16,
        num_classes: 3,
        ..SceneConfig::default()
    };
    (net, train, generate_dataset(5, 4, &scene).unwrap())
}

fn run(seed: u64) -> TrainState {
    let (net, train, data) = small();
    two_phase_train(&net, &train, &data, seed, |_, _| Ok(())).map_err(|f| f.error).unwrap()
}

#[test]
fn same_seed_same_run() {
    let (net, _, data) = small();
    let a = run(3);
    let b = run(3);
    assert_eq!(format_curve(&a.curve), format_curve(&b.curve));
    let bytes = |s: &TrainState| Checkpoint::from_state(s, net.digest()).to_bytes().unwrap();
    assert_eq!(sha256_hex(&bytes(&a)), sha256_hex(&bytes(&b)));
    let table = |s: &TrainState| {
        let e = evaluate(&s.params, &net, &data, RelDenominator::Gt, false).unwrap();
        format_table(&[MetricsRow {
            method: "run".into(),
            depth: e.depth,
            parsing: e.parsing,
        }])
    };
    assert_eq!(table(&a), table(&b));
    assert_ne!(format_curve(&a.curve), format_curve(&run(4).curve));
}

#[test]
fn curve_covers_both_phases() {
    let s = run(0);
    // 4 samples in batches of 2: 2 iterations per epoch.
    assert_eq!(s.curve.len(), 6);
    assert_eq!(s.curve.iter().filter(|r| r.phase == 1).count(), 2);
    let inactive = |line: String| line.split('\t').filter(|f| *f == "-").count();
    assert_eq!(inactive(s.curve.last().unwrap().to_line()), 0, "all six terms active in phase 2");
    assert_eq!(inactive(s.curve[0].to_line()), 5, "phase 1 trains parsing only");
}

#[test]
fn phase_one_leaves_later_layers_untouched() {
    let (net, mut train, data) = small();
    train.phase2_epochs = 0;
    let init = padnet::model::build_params(&net, 2).unwrap();
    let s = two_phase_train(&net, &train, &data, 2, |_, _| Ok(())).map_err(|f| f.error).unwrap();
    for (name, t) in s.params.iter() {
        let changed = t != init.get(name).unwrap();
        if !in_pretrain_phase(name) {
            assert!(!changed, "{name} moved during pre-training");
        }
    }
    assert_ne!(s.params.get("heads.parsing.score.weight"), init.get("heads.parsing.score.weight"));
}

#[test]
fn checkpoint_file_round_trip() {
    let (net, _, _) = small();
    let s = run(1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.padc");
    let ckpt = Checkpoint::from_state(&s, net.digest());
    ckpt.save(&path).unwrap();
    let first = std::fs::read(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.iteration, s.iteration);
    assert_eq!(loaded.config_digest, net.digest());
    assert_eq!(loaded.velocities.len(), s.optimizer.velocities.len());
    loaded.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
}
