use num_rational::Ratio;
use proptest::prelude::*;

use degaa::adapt::{episode_loss, evaluate, pseudo_accuracy, run_adaptation, unknown_recall, AdaptState, Metrics};
use degaa::config::RunConfig;
use degaa::data::{DatasetBundle, Role};
use degaa::gaa::{GaaNetwork, GraphBatch};
use degaa::numcore::{rng_for, Tape};
use degaa::openset::{LofConfig, PseudoLabelSet};
use degaa::pipeline::{conditioner, embed_stage, gen_stage, run_in_memory, warmup_stage};
use degaa::backbone::Conditioner;

const SMALL: &str = r#"{
  "data": {"per_class": 12},
  "embedding": {"episode": {"support": 4, "query": 4, "episodes": 20}},
  "warmup": {"steps": 30, "batch_size": 32},
  "adapt": {"refresh_period": 3, "outer_iters": 2, "source_batch": 24, "target_batch": 24}
}"#;

fn small() -> RunConfig {
    RunConfig::from_json(SMALL).unwrap()
}

struct Fixture {
    cfg: RunConfig,
    bundle: DatasetBundle,
    cond: Conditioner,
    state: AdaptState,
}

fn fixture() -> Fixture {
    let cfg = small();
    let bundle = gen_stage(&cfg).unwrap();
    let embed = embed_stage(&cfg, &bundle).unwrap();
    let warm = warmup_stage(&cfg, &bundle, &embed.table).unwrap();
    let mut rng = rng_for(cfg.seed, 3);
    let mut gaa = GaaNetwork::new(&cfg.gaa, warm.backbone.feat_dim(), bundle.shared_classes(), &mut rng).unwrap();
    // non-zero updates so target nodes actually influence source outputs
    for layer in &mut gaa.layers {
        let f = layer.update.layers[1].in_dim();
        layer.update.layers[1] = degaa::numcore::Linear::he(f, f, &mut rng);
    }
    let state = AdaptState { backbone: warm.backbone, gaa, centroids: warm.centroids, projection: None };
    let cond = conditioner(&cfg, &embed.table);
    Fixture { cfg, bundle, cond, state }
}

fn ce(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() - logits[label]
}

struct Loss {
    total: f64,
    source: f64,
}

fn loss(f: &Fixture, source: &[usize], targets: &[usize], pseudo: &[usize], lambda: f64) -> Loss {
    let mut tape = Tape::new();
    let trunk = f.state.backbone.trunk.bind(&mut tape).unwrap();
    let gaa = f.state.gaa.bind(&mut tape).unwrap();
    let l = episode_loss(&mut tape, &trunk, &gaa, &f.state.backbone, &f.bundle, &f.cond, source, targets, pseudo, lambda)
        .unwrap();
    Loss { total: tape.value(l.total).item(), source: tape.value(l.source).item() }
}

fn pick(f: &Fixture, role: Role, n: usize, offset: usize) -> Vec<usize> {
    f.bundle.indices_of_role(role).into_iter().skip(offset).step_by(5).take(n).collect()
}

#[test]
fn zero_lambda_is_source_cross_entropy() {
    let f = fixture();
    let (s, t) = (pick(&f, Role::Source, 8, 0), pick(&f, Role::Target, 6, 1));
    let l = loss(&f, &s, &t, &[0, 1, 2, 3, 4, 5], 0.0);
    assert_eq!(l.total, l.source);
}

#[test]
fn empty_known_set_leaves_the_source_term() {
    let f = fixture();
    let s = pick(&f, Role::Source, 8, 2);
    for lambda in [0.0, 0.5, 3.0] {
        let l = loss(&f, &s, &[], &[], lambda);
        assert_eq!(l.total, l.source);
        assert!(l.total.is_finite() && l.total >= 0.0);
    }
}

#[test]
fn loss_matches_composed_evaluation() {
    let f = fixture();
    let (s, t) = (pick(&f, Role::Source, 7, 3), pick(&f, Role::Target, 5, 4));
    let pseudo = [2, 0, 5, 1, 1];
    let lambda = 0.7;
    let got = loss(&f, &s, &t, &pseudo, lambda).total;

    let all: Vec<usize> = s.iter().chain(&t).copied().collect();
    let feats = f.state.backbone.features(&f.bundle, &all, &f.cond).unwrap();
    let graph = GraphBatch::new(
        all.iter().map(|&i| f.bundle.samples[i].role).collect(),
        all.iter().map(|&i| f.bundle.samples[i].domain_id).collect(),
    )
    .unwrap();
    let logits = f.state.gaa.eval(&feats, &graph).unwrap().logits;
    let src: f64 = s.iter().enumerate().map(|(r, &i)| ce(logits.row(r), f.bundle.samples[i].label.unwrap())).sum::<f64>()
        / s.len() as f64;
    let tgt: f64 =
        pseudo.iter().enumerate().map(|(r, &c)| ce(logits.row(s.len() + r), c)).sum::<f64>() / pseudo.len() as f64;
    assert!((got - (src + lambda * tgt)).abs() < 1e-9, "{got} vs {}", src + lambda * tgt);
}

#[test]
fn zero_lambda_adds_no_target_gradient() {
    let f = fixture();
    let (s, t) = (pick(&f, Role::Source, 6, 0), pick(&f, Role::Target, 4, 0));
    let mut tape = Tape::new();
    let trunk = f.state.backbone.trunk.bind(&mut tape).unwrap();
    let gaa = f.state.gaa.bind(&mut tape).unwrap();
    let l = episode_loss(&mut tape, &trunk, &gaa, &f.state.backbone, &f.bundle, &f.cond, &s, &t, &[0, 1, 2, 3], 0.0)
        .unwrap();
    let g_total = tape.backward(l.total).unwrap();
    let g_source = tape.backward(l.source).unwrap();
    for v in trunk.vars().into_iter().chain(gaa.vars()) {
        let like = tape.value(v).clone();
        assert_eq!(g_total.get_or_zeros(v, &like), g_source.get_or_zeros(v, &like));
    }
}

#[test]
fn no_outer_iterations_change_nothing() {
    let f = fixture();
    let mut cfg = f.cfg.adapt.clone();
    cfg.outer_iters = 0;
    let (after, logs) =
        run_adaptation(&f.bundle, &f.cond, f.state.clone(), &cfg, &f.cfg.lof, &f.cfg.adapt_sgd, &mut rng_for(0, 3))
            .unwrap();
    assert_eq!(after.backbone, f.state.backbone);
    assert_eq!(after.gaa, f.state.gaa);
    assert!(logs.episodes.is_empty() && logs.refreshes.is_empty());
}

#[test]
fn adaptation_is_reproducible_and_logs_sane_losses() {
    let f = fixture();
    let run = || {
        run_adaptation(&f.bundle, &f.cond, f.state.clone(), &f.cfg.adapt, &f.cfg.lof, &f.cfg.adapt_sgd, &mut rng_for(1, 3))
            .unwrap()
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a.gaa, b.gaa);
    assert_eq!(format!("{la:?}"), format!("{lb:?}"));
    assert_eq!(la.episodes.len(), 6);
    assert_eq!(la.refreshes.len(), 2);
    assert!(la.episodes.iter().all(|e| e.loss >= 0.0));
}

#[test]
fn full_small_run_is_deterministic() {
    let a = run_in_memory(&small()).unwrap();
    let b = run_in_memory(&small()).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.metrics.os_ratio(), b.metrics.os_ratio());
    assert!(a.metrics.per_class_accuracy.contains_key(&a.bundle.unknown_id()));
}

#[test]
fn everything_known_without_rejection() {
    let f = fixture();
    let lof = LofConfig { threshold: f64::INFINITY, ..LofConfig::default() };
    let (m, pred) = evaluate(&f.bundle, &f.state, &f.cond, &lof, &f.cfg.adapt, &mut rng_for(0, 4)).unwrap();
    assert!(pred.iter().all(|&p| p < f.bundle.shared_classes()));
    assert_eq!(m.unknown_recall, Some(0.0));
}

#[test]
fn perfect_and_all_unknown_predictions() {
    let truth: Vec<usize> = (0..7).flat_map(|c| [c, c]).collect();
    let perfect = Metrics::from_predictions(&truth, &truth, 6).unwrap();
    assert_eq!((perfect.os, perfect.os_star), (1.0, 1.0));
    let unk = Metrics::from_predictions(&truth, &vec![6; truth.len()], 6).unwrap();
    assert_eq!(unk.os_ratio(), Ratio::new(1, 7));
    assert_eq!(unk.os_star, 0.0);
}

#[test]
fn hand_built_confusion_table() {
    // classes 0, 1 and unknown (2)
    let truth = [0, 0, 0, 1, 1, 2, 2, 2, 2];
    let pred = [0, 0, 1, 1, 2, 2, 2, 0, 2];
    let m = Metrics::from_predictions(&truth, &pred, 2).unwrap();
    assert_eq!(m.os_star_ratio(), Ratio::new(7, 12));
    assert_eq!(m.os_ratio(), Ratio::new(23, 36));
    assert_eq!(m.unknown_recall_ratio(), Some(Ratio::new(3, 4)));
    assert_eq!(m.per_class_accuracy[&1], 0.5);
}

#[test]
fn pseudo_label_bookkeeping() {
    let f = fixture();
    let idx: Vec<usize> = f.bundle.indices_of_role(Role::Target).into_iter().take(4).collect();
    let truth: Vec<usize> = idx.iter().map(|&i| f.bundle.eval_truth()[i]).collect();
    let set = PseudoLabelSet {
        known: vec![0, 1, 2],
        unknown: vec![3],
        labels: vec![truth[0], (truth[1] + 1) % 6, truth[2]],
        scores: vec![1.0; 4],
    };
    assert_eq!(pseudo_accuracy(&f.bundle, &idx, &set), Some(2.0 / 3.0));
    // the first targets belong to shared class 0, so there is nothing to recall
    assert_eq!(unknown_recall(&f.bundle, &idx, &set), None);
    let empty = PseudoLabelSet { known: vec![], unknown: vec![0, 1, 2, 3], labels: vec![], scores: vec![2.0; 4] };
    assert_eq!(pseudo_accuracy(&f.bundle, &idx, &empty), None);
}

#[test]
fn mismatched_prediction_lengths() {
    assert!(Metrics::from_predictions(&[0, 1], &[0], 2).is_err());
}

proptest! {
    #[test]
    fn open_set_identity(shared in 1usize..8, seed in any::<u64>(), n in 1usize..80) {
        use rand::Rng as _;
        let mut rng = rng_for(seed, 0);
        let classes = shared + 1;
        let mut truth: Vec<usize> = (0..classes).collect();
        truth.extend((0..n).map(|_| rng.random_range(0..classes)));
        let pred: Vec<usize> = truth.iter().map(|&t| if rng.random_bool(0.6) { t } else { rng.random_range(0..classes) }).collect();
        let m = Metrics::from_predictions(&truth, &pred, shared).unwrap();
        let c = Ratio::from_integer(shared as i128);
        let lhs = m.os_ratio();
        let rhs = (c * m.os_star_ratio() + m.unknown_recall_ratio().unwrap()) / (c + Ratio::from_integer(1));
        prop_assert_eq!(lhs, rhs);
        prop_assert!(m.os >= 0.0 && m.os <= 1.0 && m.os_star >= 0.0 && m.os_star <= 1.0);
    }
}
