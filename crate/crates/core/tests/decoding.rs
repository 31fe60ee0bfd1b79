use d2cache::decoder::random_prompt;
use d2cache::selection::{CertaintyParams, RolloutParams};
use d2cache::{
    generate, CachePolicy, DecodeConfig, DecodeTrace, MaskedUpdate, Model, ModelConfig, Precision,
    Strategy, TokenId,
};
use proptest::prelude::*;

fn toy_model(seed: u64) -> Model<f64> {
    Model::new(ModelConfig {
        precision: Precision::F64,
        seed,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn d2cache(sigma: f64, k: usize, p: f64) -> CachePolicy {
    CachePolicy::D2Cache {
        certainty: CertaintyParams { sigma, k },
        rollout: RolloutParams { p },
        masked_update: MaskedUpdate::PriorTopk,
    }
}

fn run(model: &Model<f64>, prompt: &[TokenId], n: usize, strategy: Strategy, policy: CachePolicy) -> DecodeTrace {
    generate(model, prompt, n, DecodeConfig::new(strategy, policy, n)).unwrap().1
}

fn check_conservation(trace: &DecodeTrace, mask: TokenId) {
    let mut seen: Vec<usize> = trace.decode_order().iter().map(|(p, _)| *p).collect();
    seen.sort_unstable();
    let expected: Vec<usize> = (trace.prompt_len..trace.len).collect();
    assert_eq!(seen, expected, "every response position decoded exactly once");
    assert!(trace.final_tokens.iter().all(|&t| t != mask));
    for s in &trace.steps {
        for d in &s.decoded {
            assert_eq!(trace.final_tokens[d.position], d.token, "decoded tokens never change");
        }
    }
}

#[test]
fn vanilla_queries_everything_every_step() {
    let model = toy_model(1);
    let prompt = random_prompt(2, 0, 64, 63);
    let trace = run(&model, &prompt, 4, Strategy::ConfidenceNar, CachePolicy::Vanilla);
    assert_eq!(trace.stats.per_step_query_sizes, vec![6, 6, 6, 6]);
    assert_eq!(trace.stats.total_position_updates, 24);
    assert_eq!(trace.stats.savings_ratio(), 0.0);
    check_conservation(&trace, 63);
}

#[test]
fn degenerate_d2cache_reproduces_vanilla() {
    let model = toy_model(2);
    let prompt = random_prompt(6, 1, 64, 63);
    for strategy in [
        Strategy::ConfidenceNar,
        Strategy::CertaintyPrior { sigma: 10.0 },
        Strategy::RandomOrder { seed: 9 },
    ] {
        let vanilla = run(&model, &prompt, 10, strategy.clone(), CachePolicy::Vanilla);
        let cached = run(&model, &prompt, 10, strategy, d2cache(10.0, 64, 1.0));
        assert_eq!(vanilla.final_tokens, cached.final_tokens);
        for (a, b) in vanilla.steps.iter().zip(&cached.steps) {
            assert_eq!(a.decoded, b.decoded);
            assert_eq!(b.query_size, 16);
        }
    }
}

#[test]
fn d2cache_query_sets_respect_selection_budget() {
    let model = toy_model(3);
    let prompt = random_prompt(4, 2, 64, 63);
    let trace = run(&model, &prompt, 12, Strategy::CertaintyPrior { sigma: 10.0 }, d2cache(10.0, 2, 0.1));
    assert_eq!(trace.steps[0].query_size, 16);
    for t in 1..trace.steps.len() {
        assert!(trace.steps[t].query_size <= 5, "step {t}: {}", trace.steps[t].query_size);
        let prev = &trace.steps[t - 1];
        let bound = 2 + (0.1 * (16 - prev.m_star.len()) as f64).ceil() as usize + prev.decoded.len();
        assert!(trace.steps[t].query_size <= bound);
    }
    assert!(trace.stats.savings_ratio() > 0.5);
    check_conservation(&trace, 63);
}

#[test]
fn certainty_prior_with_narrow_sigma_goes_left_to_right() {
    let model = toy_model(4);
    let prompt = random_prompt(4, 3, 64, 63);
    for policy in [CachePolicy::Vanilla, d2cache(1.0, 4, 0.1)] {
        let mut cfg = DecodeConfig::new(Strategy::CertaintyPrior { sigma: 1.0 }, policy, 16);
        cfg.uniform_confidence = true;
        let (_, trace) = generate(&model, &prompt, 16, cfg).unwrap();
        let order: Vec<usize> = trace.decode_order().iter().map(|(p, _)| *p).collect();
        assert_eq!(order, (4..20).collect::<Vec<_>>());
    }
}

#[test]
fn semi_ar_never_leaves_the_active_block() {
    let model = toy_model(5);
    let prompt = random_prompt(3, 4, 64, 63);
    let mut cfg = DecodeConfig::new(Strategy::SemiArBlock { block_size: 4 }, CachePolicy::Vanilla, 12);
    cfg.tokens_per_step = 2;
    cfg.steps = 6;
    let (_, trace) = generate(&model, &prompt, 12, cfg).unwrap();
    let mut highest_done = 0;
    for s in &trace.steps {
        for d in &s.decoded {
            let block = (d.position - 3) / 4;
            assert!(block >= highest_done);
            highest_done = block;
        }
    }
    // Each block takes exactly two steps of two tokens.
    for (t, s) in trace.steps.iter().enumerate() {
        assert!(s.decoded.iter().all(|d| (d.position - 3) / 4 == t / 2));
    }
    check_conservation(&trace, 63);
}

#[test]
fn interval_refresh_every_step_matches_vanilla_accounting() {
    let model = toy_model(6);
    let prompt = random_prompt(5, 5, 64, 63);
    let vanilla = run(&model, &prompt, 8, Strategy::ConfidenceNar, CachePolicy::Vanilla);
    let interval = run(
        &model,
        &prompt,
        8,
        Strategy::ConfidenceNar,
        CachePolicy::IntervalRefresh { prompt_interval: 1, response_interval: 1 },
    );
    assert_eq!(vanilla.stats, interval.stats);
    assert_eq!(vanilla.final_tokens, interval.final_tokens);
}

#[test]
fn interval_refresh_skips_segments_between_refreshes() {
    let model = toy_model(6);
    let prompt = random_prompt(5, 5, 64, 63);
    let trace = run(
        &model,
        &prompt,
        8,
        Strategy::ConfidenceNar,
        CachePolicy::IntervalRefresh { prompt_interval: 4, response_interval: 2 },
    );
    // t=1: masked only (7); t=2: response (8); t=3: masked (5); t=4: all (13).
    assert_eq!(&trace.stats.per_step_query_sizes[..5], &[13, 7, 8, 5, 13]);
    check_conservation(&trace, 63);
}

#[test]
fn block_cache_recomputes_current_and_later_blocks() {
    let model = toy_model(7);
    let prompt = random_prompt(4, 6, 64, 63);
    let trace = run(
        &model,
        &prompt,
        8,
        Strategy::SemiArBlock { block_size: 4 },
        CachePolicy::BlockCache { block_size: 4 },
    );
    // Block 0 spans 4..8, block 1 spans 8..12. Step 0 is full, steps 1-3 see
    // block 0 plus the masked block 1, step 4 refreshes after block 0 is done.
    assert_eq!(trace.stats.per_step_query_sizes, vec![12, 8, 8, 8, 12, 4, 4, 4]);
    check_conservation(&trace, 63);
}

#[test]
fn all_masked_update_queries_every_mask() {
    let model = toy_model(8);
    let prompt = random_prompt(4, 7, 64, 63);
    let policy = CachePolicy::D2Cache {
        certainty: CertaintyParams { sigma: 10.0, k: 1 },
        rollout: RolloutParams { p: 0.1 },
        masked_update: MaskedUpdate::AllMasked,
    };
    let trace = run(&model, &prompt, 8, Strategy::ConfidenceNar, policy);
    for t in 1..trace.steps.len() {
        let remaining: Vec<usize> = (4..12)
            .filter(|p| trace.steps[..t].iter().all(|s| s.decoded.iter().all(|d| d.position != *p)))
            .collect();
        for p in remaining {
            assert!(trace.steps[t].query_positions.contains(&p));
        }
    }
    check_conservation(&trace, 63);
}

#[test]
fn generation_is_deterministic() {
    let model = toy_model(9);
    let prompt = random_prompt(6, 8, 64, 63);
    let write = |trace: &DecodeTrace| {
        let mut buf = Vec::new();
        trace.write_jsonl(&mut buf).unwrap();
        buf
    };
    for policy in [CachePolicy::Vanilla, d2cache(10.0, 3, 0.1)] {
        let a = run(&model, &prompt, 10, Strategy::RandomOrder { seed: 1 }, policy.clone());
        let b = run(&model, &prompt, 10, Strategy::RandomOrder { seed: 1 }, policy);
        assert_eq!(write(&a), write(&b));
    }
}

#[test]
fn small_k_with_large_m_falls_back_instead_of_stalling() {
    let model = toy_model(10);
    let prompt = random_prompt(4, 9, 64, 63);
    let mut cfg = DecodeConfig::new(Strategy::ConfidenceNar, d2cache(10.0, 1, 0.1), 12);
    cfg.tokens_per_step = 3;
    cfg.steps = 4;
    let (_, trace) = generate(&model, &prompt, 12, cfg).unwrap();
    assert!(trace.steps.iter().all(|s| s.decoded.len() == 3));
    assert!(trace.steps.iter().any(|s| !s.fallback.is_empty()));
    check_conservation(&trace, 63);
}

#[test]
fn f32_models_decode_too() {
    let model = Model::<f32>::new(ModelConfig::default()).unwrap();
    let prompt = random_prompt(4, 0, 64, 63);
    let (tokens, trace) = generate(
        &model,
        &prompt,
        8,
        DecodeConfig::new(Strategy::CertaintyPrior { sigma: 10.0 }, d2cache(10.0, 32, 0.1), 8),
    )
    .unwrap();
    assert_eq!(tokens.len(), 12);
    check_conservation(&trace, 63);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn splice_matches_full_forward(
        seed in 0u64..50,
        len in 2usize..24,
        raw_tokens in proptest::collection::vec(0u32..64, 24),
        keep in proptest::collection::vec(any::<bool>(), 24),
    ) {
        let model = toy_model(seed);
        let tokens: Vec<TokenId> = raw_tokens[..len].to_vec();
        let mut q: Vec<usize> = (0..len).filter(|&i| keep[i]).collect();
        if q.is_empty() {
            q.push(len / 2);
        }
        let full = model.full_forward(&tokens).unwrap();
        let mut cache = model.new_cache(len).unwrap();
        cache.commit(0, &full).unwrap();
        let part = model.partial_forward(&tokens, &q, &cache).unwrap();
        for (r, &pos) in q.iter().enumerate() {
            for (a, b) in part.logits.row(r).iter().zip(full.logits.row(pos)) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn every_policy_unmasks_everything(
        seed in 0u64..20,
        policy_pick in 0usize..4,
        strategy_pick in 0usize..4,
    ) {
        let model = toy_model(seed);
        let prompt = random_prompt(4, seed, 64, 63);
        let policy = match policy_pick {
            0 => CachePolicy::Vanilla,
            1 => d2cache(10.0, 2, 0.1),
            2 => CachePolicy::BlockCache { block_size: 4 },
            _ => CachePolicy::IntervalRefresh { prompt_interval: 3, response_interval: 2 },
        };
        let strategy = match strategy_pick {
            0 => Strategy::ConfidenceNar,
            1 => Strategy::CertaintyPrior { sigma: 3.0 },
            2 => Strategy::SemiArBlock { block_size: 4 },
            _ => Strategy::RandomOrder { seed },
        };
        let trace = run(&model, &prompt, 8, strategy, policy);
        check_conservation(&trace, 63);
        let total: usize = trace.stats.per_step_query_sizes.iter().sum();
        prop_assert_eq!(total, trace.stats.total_position_updates);
    }
}
