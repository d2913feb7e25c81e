use proptest::prelude::*;

use svlab::model::{AttentionKind, Checkpoint, LogitRows, Model, ModelConfig, PatchSpec, SeqRequest, TrainingMeta};
use svlab::statevec::{
    ablate_optimize, average_aggregate, influences, inner_optimize, optimize, Algorithm, OptConfig, StateVector,
    SvMeta,
};
use svlab::tasks::{build_prompt, sample_episode, task_catalog};
use svlab::Lab;

fn sv(vectors: Vec<Vec<f64>>, seen: usize) -> StateVector {
    StateVector::new(
        vectors,
        SvMeta {
            n_examples_seen: seen,
            ..SvMeta::default()
        },
    )
    .unwrap()
}

/// `n` state vectors of `layers × dim`.
fn sv_stack() -> impl Strategy<Value = Vec<StateVector>> {
    (2usize..10, 1usize..4, 1usize..8).prop_flat_map(|(n, layers, dim)| {
        prop::collection::vec(prop::collection::vec(prop::collection::vec(-5.0f64..5.0, dim), layers), n)
            .prop_map(|stack| stack.into_iter().enumerate().map(|(i, v)| sv(v, i + 1)).collect())
    })
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

proptest! {
    #[test]
    fn inner_optimize_is_scale_equivariant(svs in sv_stack(), alpha in -3.0f64..3.0, k_frac in 0.0f64..1.0) {
        let k = 1 + ((svs.len() - 1) as f64 * k_frac) as usize;
        let scaled: Vec<StateVector> = svs.iter().map(|s| s.scale(alpha)).collect();
        let lhs = inner_optimize(&scaled, k).unwrap().flatten();
        let rhs: Vec<f64> = inner_optimize(&svs, k).unwrap().flatten().iter().map(|x| alpha * x).collect();
        prop_assert!(close(&lhs, &rhs, 1e-12));
    }

    #[test]
    fn influences_telescope(svs in sv_stack()) {
        let e = influences(&svs).unwrap();
        prop_assert_eq!(e.len(), svs.len() - 1);
        let mut acc = svs[0].flatten();
        for item in &e.items {
            for (a, x) in acc.iter_mut().zip(item.concat()) {
                *a += x;
            }
        }
        prop_assert!(close(&acc, &svs[svs.len() - 1].flatten(), 1e-12));
    }

    #[test]
    fn window_mean_ignores_order(svs in sv_stack(), seed in any::<u64>()) {
        let k = svs.len();
        let mut shuffled = svs.clone();
        let rot = (seed % k as u64) as usize;
        shuffled.rotate_left(rot);
        shuffled.reverse();
        let a = inner_optimize(&svs, k).unwrap().flatten();
        let b = inner_optimize(&shuffled, k).unwrap().flatten();
        prop_assert!(close(&a, &b, 1e-12));
        let c = average_aggregate(&svs).unwrap().flatten();
        let d = average_aggregate(&shuffled).unwrap().flatten();
        prop_assert!(close(&c, &d, 1e-12));
    }

    #[test]
    fn optimizers_preserve_shape(svs in sv_stack(), beta in 0.0f64..0.99) {
        let e = influences(&svs).unwrap();
        let v_bar = inner_optimize(&svs, 1).unwrap();
        for cfg in [
            OptConfig::momentum(beta),
            OptConfig::ablation(Algorithm::Adagrad),
            OptConfig::ablation(Algorithm::Rmsprop),
            OptConfig::ablation(Algorithm::Adam),
        ] {
            let out = optimize(&v_bar, &e, &cfg).unwrap();
            prop_assert_eq!(out.n_layers(), v_bar.n_layers());
            prop_assert_eq!(out.dim(), v_bar.dim());
            prop_assert!(out.flatten().iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn ablation_steps_are_bounded_by_lr(svs in sv_stack()) {
        let e = influences(&svs).unwrap();
        let v_bar = inner_optimize(&svs, 1).unwrap();
        for alg in [Algorithm::Adagrad, Algorithm::Rmsprop] {
            let cfg = OptConfig::ablation(alg);
            let out = ablate_optimize(&v_bar, &e, &cfg).unwrap();
            let limit = e.len() as f64 * cfg.lr / (1.0 - cfg.rho).sqrt() + 1e-12;
            for (o, v) in out.flatten().iter().zip(v_bar.flatten()) {
                prop_assert!((o - v).abs() <= limit);
            }
        }
    }
}

fn tiny_lab() -> Lab {
    let config = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_head: 8,
        d_ff: 32,
        vocab_size: svlab::tasks::VOCAB_SIZE,
        max_seq: 40,
        attention_kind: AttentionKind::Softmax,
    };
    Lab::new(Checkpoint::new(Model::init(config, 5).unwrap(), TrainingMeta::default()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn patching_leaves_earlier_positions_untouched(
        family_idx in 0usize..4,
        n in 1usize..10,
        seed in any::<u64>(),
        fill in -2.0f64..2.0,
        layers in 1usize..=2,
    ) {
        let lab = tiny_lab();
        let family = &task_catalog()[family_idx];
        let ep = sample_episode(family, n, seed).unwrap();
        let prompt = build_prompt(&ep.demonstrations, ep.test[0]);
        let pos = prompt.final_separator();
        let width = lab.model().config.tap_width();
        let patch = PatchSpec::prefix(pos, &vec![vec![fill; width]; layers]);
        let run = |patch: Option<&PatchSpec>| {
            lab.model()
                .run(&[SeqRequest { tokens: &prompt.tokens, taps: None, patches: patch, logits: LogitRows::All }])
                .unwrap()
                .remove(0)
                .logits
        };
        let base = run(None);
        let patched = run(Some(&patch));
        let vocab = lab.model().config.vocab_size;
        prop_assert_eq!(&base.data()[..pos * vocab], &patched.data()[..pos * vocab]);
    }
}
