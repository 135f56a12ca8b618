use glass_core::aggregation::TiePolicy;
use glass_core::eval::{compare_masks, method_comparison, prepare_documents, EvalMethod, EvalOptions, GlobalStats};
use glass_core::fixture::{build_drift_fixture, DriftConfig};
use glass_core::importance::{global_activation_stats, local_activation_stats, Corpus, NpsConfig};
use glass_core::model::{init_model, ModelSpec};
use glass_core::pruning::{build_masks, compress, masked_model_forward, Method};
use glass_core::storage::{load, save};
use glass_core::sweep::{aggregate, per_seed_csv, read_per_seed_csv, run_sweep, SweepConfig};
use glass_core::Error;

fn small() -> DriftConfig {
    let mut cfg = DriftConfig::with_seed(11);
    cfg.spec.ffn_width = 16;
    cfg.spec.vocab_size = 24;
    cfg.planted_per_layer = 3;
    cfg.documents = 3;
    cfg.doc_len = 48;
    cfg.topic_len = 16;
    cfg.prompt_len = 8;
    cfg.nps = NpsConfig { count: 6, length: 24, ..NpsConfig::default() };
    cfg.reseeded(11)
}

fn opts() -> EvalOptions {
    EvalOptions { top_k: 8, gen_len: None, tie_policy: TiePolicy::default() }
}

#[test]
fn fixture_masks_compress_and_evaluate() {
    let f = build_drift_fixture(&small()).unwrap();
    let local = local_activation_stats(&f.model, &f.documents[0][..8]).unwrap();
    let mask = build_masks(&f.model, Method::IGlass, Some(&local), Some(&f.global_impact), 5, 0.5, TiePolicy::default()).unwrap();
    let small_model = compress(&f.model, &mask).unwrap();
    assert_eq!(small_model.ffn_width(), 5);
    let a = masked_model_forward(&f.documents[1], &f.model, &mask).unwrap();
    let b = glass_core::model::model_forward(&f.documents[1], &small_model).unwrap();
    for (x, y) in a.logits.as_slice().iter().zip(b.logits.as_slice()) {
        assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
    }

    let globals = GlobalStats { activation: Some(&f.global_activation), impact: Some(&f.global_impact) };
    let report = method_comparison(&f.model, &f.documents, 8, 5, 0.5, &Method::ALL, globals, &opts()).unwrap();
    assert_eq!(report.methods.len(), 1 + Method::ALL.len());
    let oracle = report.get(EvalMethod::Sparse(Method::Oracle)).unwrap();
    assert!(oracle.jaccard.as_ref().unwrap().iter().all(|&j| j == 1.0));
    let dense = report.get(EvalMethod::Dense).unwrap();
    assert_eq!(dense.kld.mean, 0.0);

    let prepared = prepare_documents(&f.model, &f.documents, 8, &opts()).unwrap();
    let full = build_masks(&f.model, Method::Local, Some(&local), None, 16, 0.5, TiePolicy::default()).unwrap();
    let r = compare_masks(&f.model, &prepared, &[full], true, &opts()).unwrap();
    let row = r.get(EvalMethod::Sparse(Method::Local)).unwrap();
    assert_eq!(row.kld_per_doc, vec![0.0; 3]);
    assert_eq!(row.ppl_per_doc, r.get(EvalMethod::Dense).unwrap().ppl_per_doc);
}

#[test]
fn stale_stats_are_a_provenance_error() {
    let spec = ModelSpec { vocab_size: 12, d_model: 8, ffn_width: 8, n_layers: 2, n_heads: 2, max_seq: 32, ..ModelSpec::default() };
    let a = init_model(&spec, None).unwrap();
    let b = init_model(&ModelSpec { seed: 1, ..spec.clone() }, None).unwrap();
    let corpus = Corpus::external(vec![vec![0, 3, 4, 5], vec![0, 7, 1]], 12).unwrap();
    let stats = global_activation_stats(&a, &corpus).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.json");
    save(&stats, &p).unwrap();
    let stats = load(&p).unwrap();
    let err = build_masks(&b, Method::GlobalActivation, None, Some(&stats), 4, 0.0, TiePolicy::default()).unwrap_err();
    assert!(matches!(err, Error::Provenance(_)), "{err}");
    assert_eq!(err.exit_code(), 3);

    let err = build_masks(&a, Method::GlobalImpact, None, Some(&stats), 4, 0.0, TiePolicy::default()).unwrap_err();
    assert!(matches!(err, Error::Provenance(_)), "{err}");
}

#[test]
fn sweep_is_deterministic_and_csv_round_trips() {
    let cfg = SweepConfig {
        densities: vec![0.25, 0.5],
        methods: vec![Method::Local, Method::AGlass],
        lambdas: vec![0.5],
        seeds: vec![1, 2],
        base: small(),
        top_k: Some(8),
    };
    let a = run_sweep(&cfg).unwrap();
    let b = run_sweep(&cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows.len(), 2 * 2 * 3);
    assert_eq!(a.per_seed.len(), 2 * 2 * 2 * 3);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("seeds.csv");
    std::fs::write(&p, per_seed_csv(&a.per_seed).unwrap()).unwrap();
    let back = read_per_seed_csv(&p).unwrap();
    assert_eq!(back, a.per_seed);
    assert_eq!(aggregate(&back), a.rows);
}
