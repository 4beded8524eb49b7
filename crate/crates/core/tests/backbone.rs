use degaa::backbone::{compute_centroids, source_accuracy, warmup_train, Backbone, CombineMode, Conditioner};
use degaa::config::RunConfig;
use degaa::data::{generate_bundle, BundleSpec, DatasetBundle, Role};
use degaa::embed::{build_embedding_table, DomainEmbeddingTable, EmbeddingNet};
use degaa::numcore::{rng_for, Linear, Tensor};
use degaa::Error;

fn forward(layers: &[Linear], x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (li, l) in layers.iter().enumerate() {
        let mut out = vec![0.0; l.out_dim()];
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = l.bias.data()[j];
            for (i, hi) in h.iter().enumerate() {
                acc += hi * l.weight.get(i, j);
            }
            *o = if li + 1 < layers.len() { acc.max(0.0) } else { acc };
        }
        h = out;
    }
    h
}

fn table(bundle: &DatasetBundle, dim: usize) -> DomainEmbeddingTable {
    let net = EmbeddingNet::new(bundle.in_dim(), &[16], dim, &mut rng_for(0, 1)).unwrap();
    build_embedding_table(bundle, &net).unwrap()
}

fn backbone(in_dim: usize, de: usize, mode: CombineMode, seed: u64) -> Backbone {
    Backbone::new(in_dim, de, &[12, 10], 8, 6, mode, &mut rng_for(seed, 2)).unwrap()
}

#[test]
fn zero_weights_give_zero_features() {
    let mut net = backbone(4, 3, CombineMode::Concat, 0);
    for l in &mut net.trunk.layers {
        *l = Linear::zeros(l.in_dim(), l.out_dim());
    }
    assert_eq!(net.extract(&[1.0, -2.0, 3.0, 0.5], &[0.1, 0.2, 0.3]).unwrap(), vec![0.0; 8]);
}

#[test]
fn multiplying_by_ones_is_feeding_x_alone() {
    let net = backbone(5, 5, CombineMode::ElementwiseMul, 1);
    let x = [0.3, -1.2, 2.0, 0.0, 4.5];
    let got = net.extract(&x, &[1.0; 5]).unwrap();
    assert_eq!(got, net.trunk.eval(&Tensor::from_rows(&[x]).unwrap()).unwrap().into_data());
}

#[test]
fn extract_matches_plain_arithmetic() {
    let net = backbone(4, 3, CombineMode::Concat, 2);
    let (x, de) = ([0.5, -0.25, 1.5, 2.0], [0.7, -0.1, 0.05]);
    let joined: Vec<f64> = x.iter().chain(&de).copied().collect();
    let want = forward(&net.trunk.layers, &joined);
    for (a, b) in net.extract(&x, &de).unwrap().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }

    let mul = backbone(3, 3, CombineMode::ElementwiseMul, 3);
    let want = forward(&mul.trunk.layers, &[0.5 * 2.0, -1.0 * 0.5, 3.0 * -1.0]);
    for (a, b) in mul.extract(&[0.5, -1.0, 3.0], &[2.0, 0.5, -1.0]).unwrap().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn mismatched_dimensions_name_the_combine_mode() {
    let net = backbone(4, 3, CombineMode::Concat, 0);
    match net.extract(&[1.0; 4], &[1.0; 2]) {
        Err(Error::Dimension { detail, .. }) => assert!(detail.contains("concat"), "{detail}"),
        other => panic!("{other:?}"),
    }
    let r = Backbone::new(4, 3, &[8], 8, 6, CombineMode::ElementwiseMul, &mut rng_for(0, 2));
    assert!(matches!(r, Err(Error::Dimension { .. })));
}

#[test]
fn zero_steps_change_nothing() {
    let b = generate_bundle(&BundleSpec { per_class: 5, ..BundleSpec::default() }, 0).unwrap();
    let cond = Conditioner::new(table(&b, 3), true);
    let net = backbone(b.in_dim(), 3, CombineMode::Concat, 0);
    let cfg = RunConfig::default();
    let (after, log) = warmup_train(&b, &cond, net.clone(), &cfg.warmup.sgd, 0, 8, &mut rng_for(0, 2)).unwrap();
    assert_eq!(after, net);
    assert!(log.is_empty());
}

#[test]
fn missing_source_embedding_is_a_config_error() {
    let b = generate_bundle(&BundleSpec { per_class: 5, ..BundleSpec::default() }, 0).unwrap();
    let mut t = table(&b, 3);
    t.entries.remove(&1);
    let cond = Conditioner::new(t, true);
    let net = backbone(b.in_dim(), 3, CombineMode::Concat, 0);
    let r = warmup_train(&b, &cond, net, &RunConfig::default().warmup.sgd, 5, 8, &mut rng_for(0, 2));
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn warmup_fits_the_sources_reproducibly() {
    let cfg = RunConfig::default();
    let b = generate_bundle(&cfg.data, 0).unwrap();
    let cond = Conditioner::new(table(&b, cfg.embedding.dim), true);
    let run = || {
        let net = Backbone::new(
            b.in_dim(),
            cfg.embedding.dim,
            &cfg.backbone.hidden,
            cfg.backbone.feat_dim,
            b.shared_classes(),
            CombineMode::Concat,
            &mut rng_for(0, 2),
        )
        .unwrap();
        warmup_train(&b, &cond, net, &cfg.warmup.sgd, 500, cfg.warmup.batch_size, &mut rng_for(0, 2)).unwrap()
    };
    let (net, log) = run();
    assert_eq!(log.len(), 500);
    let acc = source_accuracy(&b, &cond, &net).unwrap();
    assert!(acc >= 0.95, "source accuracy {acc}");
    assert_eq!(run().0, net);
}

#[test]
fn centroids_are_class_means() {
    let b = generate_bundle(&BundleSpec { per_class: 9, ..BundleSpec::default() }, 4).unwrap();
    let cond = Conditioner::new(table(&b, 3), true);
    let net = backbone(b.in_dim(), 3, CombineMode::Concat, 4);
    let cents = compute_centroids(&b, &cond, &net).unwrap();
    assert_eq!(cents.len(), b.shared_classes());
    let mut sums = vec![vec![0.0; 8]; b.shared_classes()];
    let mut counts = vec![0usize; b.shared_classes()];
    for i in b.indices_of_role(Role::Source) {
        let s = &b.samples[i];
        let de = cond.vector(s.domain_id, CombineMode::Concat).unwrap();
        let joined: Vec<f64> = s.x.iter().chain(&de).copied().collect();
        let c = s.label.unwrap();
        sums[c].iter_mut().zip(forward(&net.trunk.layers, &joined)).for_each(|(a, v)| *a += v);
        counts[c] += 1;
    }
    for c in 0..b.shared_classes() {
        for (got, s) in cents.classes[c].iter().zip(&sums[c]) {
            assert!((got - s / counts[c] as f64).abs() < 1e-12);
        }
    }
}

#[test]
fn small_class_centroids() {
    let mut b = generate_bundle(&BundleSpec { n_sources: 1, per_class: 2, ..BundleSpec::default() }, 0).unwrap();
    let cond = Conditioner::new(table(&b, 3), true);
    let net = backbone(b.in_dim(), 3, CombineMode::Concat, 5);
    let de = cond.vector(0, CombineMode::Concat).unwrap();
    let feats: Vec<Vec<f64>> = b.indices_of_domain(0).iter().map(|&i| net.extract(&b.samples[i].x, &de).unwrap()).collect();
    let two = compute_centroids(&b, &cond, &net).unwrap();
    for (a, (p, q)) in two.classes[0].iter().zip(feats[0].iter().zip(&feats[1])) {
        assert!((a - (p + q) / 2.0).abs() < 1e-15);
    }

    // drop the second draw of every source class
    let keep: Vec<usize> = (0..b.samples.len()).filter(|&i| b.samples[i].role == Role::Target || i % 2 == 0).collect();
    b.samples = keep.iter().map(|&i| b.samples[i].clone()).collect();
    let one = compute_centroids(&b, &cond, &net).unwrap();
    assert_eq!(one.classes[0], feats[0]);
}

#[test]
fn disabled_embedding_feeds_the_neutral_vector() {
    let b = generate_bundle(&BundleSpec { per_class: 3, ..BundleSpec::default() }, 0).unwrap();
    let cond = Conditioner::new(table(&b, 3), false);
    assert_eq!(cond.vector(0, CombineMode::Concat).unwrap(), vec![0.0; 3]);
    assert_eq!(cond.vector(2, CombineMode::ElementwiseMul).unwrap(), vec![1.0; 3]);
}
