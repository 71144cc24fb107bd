use std::collections::BTreeMap;
use std::sync::Arc;

use mdm_core::bench::experiment::{build_suite, warm_base};
use mdm_core::bench::{evaluate, train_task, BenchConfig, LossKind, MlpTaskObjective, Split};
use mdm_core::merge::{save_basis, load_basis, MergeState};
use mdm_core::optimize::{optimize_cmaes, optimize_gradient, CmaConfig, FitnessSpec, GradConfig, WeightedTask};
use mdm_core::orthogonal::{orthogonality_check, orthogonalize_sequence, TOL_ORTH};
use mdm_core::params::{extract_delta, DeltaRecord, LayerLayout, ParameterVector};
use proptest::prelude::*;

fn small_cfg() -> BenchConfig {
    let mut cfg = BenchConfig::default();
    cfg.apply_text("tasks=3\nclasses=3\nepochs=3\n").unwrap();
    cfg
}

#[test]
fn trained_deltas_merge_and_unmerge_cleanly() {
    let cfg = small_cfg();
    let suite = build_suite(&cfg, 4).unwrap();
    let base = warm_base(&suite, &cfg.warmup, 4).unwrap();
    let deltas: Vec<DeltaRecord> = suite
        .tasks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let (theta, _) = train_task(&suite.mlp, &base, t, &cfg.train, 10 + i as u64).unwrap();
            extract_delta(t.task_id.clone(), &theta, &base).unwrap()
        })
        .collect();

    let basis = orthogonalize_sequence(&deltas).unwrap();
    assert_eq!(basis.len(), 3);
    assert!(orthogonality_check(&basis).max_abs_cosine <= TOL_ORTH);
    let alphas: BTreeMap<String, f64> = basis.ids().map(|id| (id.to_string(), 1.0)).collect();
    let mut state = MergeState::merge(base.clone(), basis.clone(), &alphas, "it").unwrap();

    let spec = FitnessSpec::new(
        suite
            .tasks
            .iter()
            .map(|t| WeightedTask {
                objective: Arc::new(MlpTaskObjective::validation(suite.mlp.clone(), t.clone(), LossKind::CrossEntropy)),
                weight: 1.0,
            })
            .collect(),
    );
    let start = mdm_core::optimize::evaluate_fitness(&state.alpha_vector(), &spec, &state).unwrap().total;
    let cma = optimize_cmaes(&spec, &state, &CmaConfig { max_iters: 40, seed: 2, ..CmaConfig::default() }).unwrap();
    assert!(cma.best <= start);
    let grad = optimize_gradient(&spec, &state, &GradConfig { max_epochs: 100, ..GradConfig::default() }).unwrap();
    assert!(grad.best <= start);
    state.reweight_all(&cma.alphas).unwrap();

    // each merged task beats the untouched base
    for t in &suite.tasks {
        let merged = evaluate(&suite.mlp, state.merged_values(), t, Split::Test, LossKind::CrossEntropy).unwrap();
        let at_base = evaluate(&suite.mlp, base.values(), t, Split::Test, LossKind::CrossEntropy).unwrap();
        assert!(merged.accuracy > at_base.accuracy, "{}: {} vs {}", t.task_id, merged.accuracy, at_base.accuracy);
    }

    let dir = tempfile::tempdir().unwrap();
    state.save(dir.path()).unwrap();
    save_basis(&basis, &dir.path().join("basis")).unwrap();
    assert_eq!(load_basis(&dir.path().join("basis")).unwrap(), basis);
    let mut loaded = MergeState::load(dir.path(), false).unwrap();
    assert_eq!(loaded.merged_values(), state.merged_values());

    let removed = deltas[1].model_id.clone();
    let admitted = loaded.ledger().entries().iter().find(|e| e.model_id.as_deref() == Some(removed.as_str())).unwrap().delta_hash.unwrap();
    loaded.unmerge(&removed, false).unwrap();
    let report = loaded.verify_removal(&removed, admitted).unwrap();
    assert!(report.verified, "{:?}", report.reasons);
    loaded.check_replay(1e-10).unwrap();
}

fn delta_strategy(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reintegrating_the_latest_member_restores_the_state(
        raw in prop::collection::vec(delta_strategy(12), 1..6),
        alphas in prop::collection::vec(-2.0f64..2.0, 6),
    ) {
        let layout = Arc::new(LayerLayout::single("w", 12));
        let base = ParameterVector::new(vec![0.25; 12], layout.clone()).unwrap();
        let mut state = MergeState::empty(base, "prop");
        for (i, v) in raw.iter().enumerate() {
            let d = DeltaRecord::new(format!("m{i}"), v.clone(), layout.clone()).unwrap();
            state.integrate(&d, alphas[i]).unwrap();
        }
        let before = state.merged_values().to_vec();
        let extra = DeltaRecord::new("extra", (0..12).map(|i| (i as f64).sin()).collect(), layout).unwrap();
        if state.integrate(&extra, 0.8).unwrap().is_accepted() {
            state.unmerge("extra", false).unwrap();
            for (a, b) in state.merged_values().iter().zip(&before) {
                prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
            }
        }
        prop_assert!(orthogonality_check(state.basis()).max_abs_cosine <= TOL_ORTH);
        state.check_replay(1e-10).unwrap();
    }

    #[test]
    fn merged_equals_base_plus_weighted_members(
        raw in prop::collection::vec(delta_strategy(9), 1..5),
        alphas in prop::collection::vec(-2.0f64..2.0, 5),
    ) {
        let layout = Arc::new(LayerLayout::single("w", 9));
        let base = ParameterVector::new((0..9).map(|i| i as f64 * 0.1).collect(), layout.clone()).unwrap();
        let deltas: Vec<DeltaRecord> = raw
            .iter()
            .enumerate()
            .map(|(i, v)| DeltaRecord::new(format!("m{i}"), v.clone(), layout.clone()).unwrap())
            .collect();
        let basis = orthogonalize_sequence(&deltas).unwrap();
        let map: BTreeMap<String, f64> = basis.ids().enumerate().map(|(i, id)| (id.to_string(), alphas[i])).collect();
        let state = MergeState::merge(base.clone(), basis.clone(), &map, "prop").unwrap();
        for (j, m) in state.merged_values().iter().enumerate() {
            let want: f64 = base.values()[j] + basis.members().iter().map(|b| map[&b.model_id] * b.values()[j]).sum::<f64>();
            prop_assert!((m - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
    }
}
