use kvgate_core::cache::CompressionPlan;
use kvgate_core::engine::{Engine, EvictionSetup};
use kvgate_core::indexer::{IndexerConfig, IndexerParams};
use kvgate_core::math::{Matrix, Rng};
use kvgate_core::memory::{MemoryConfig, MemorySlowWeights};
use kvgate_core::policy::{HeadPool, PolicyId};
use kvgate_core::teacher::{TeacherConfig, TeacherModel};
use proptest::prelude::*;

fn teacher() -> TeacherModel {
    TeacherModel::new(TeacherConfig { n_layers: 2, seed: 21, ..TeacherConfig::default() }).unwrap()
}

fn policy(i: usize) -> PolicyId {
    [
        PolicyId::Knorm,
        PolicyId::Tova,
        PolicyId::Random { seed: 4 },
        PolicyId::SnapKv { window: 4, pool: HeadPool::Max },
        PolicyId::Indexer,
    ][i]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn decode_respects_budget_and_accounts_for_every_row(
        budget in 12usize..40,
        interval in 1usize..12,
        ratio in 0.0f64..1.0,
        prompt in 1usize..40,
        steps in 1usize..80,
        which in 0usize..5,
        seed in 0u64..1000,
    ) {
        let t = teacher();
        let mut rng = Rng::new(seed);
        let ix: Vec<IndexerParams> = (0..2)
            .map(|_| IndexerParams::init(IndexerConfig { n_heads: 2, d_index: 4 }, 64, 64, &mut rng).unwrap())
            .collect();
        let mc = MemoryConfig::for_model(64);
        let slow = (0..2).map(|_| MemorySlowWeights::init(mc.d_mem, 64, &mut rng)).collect();
        let setup = EvictionSetup {
            plan: CompressionPlan { ratio, interval, budget, sinks: 3, local_window: 5 },
            policy: policy(which),
            ..EvictionSetup::default()
        };
        let mut e = Engine::new(&t, setup, Some(&ix), Some((mc, slow))).unwrap();
        let x = Matrix::random_normal(prompt + steps, 64, 1.0, &mut rng);
        e.prefill(&x.gather_rows(&(0..prompt).collect::<Vec<_>>())).unwrap();
        for i in prompt..prompt + steps {
            e.step(x.row(i)).unwrap();
            prop_assert!(e.max_rows() <= budget + interval);
            for l in 0..2 {
                let kept = e.cache().layer(l).positions();
                prop_assert_eq!(&kept[..3.min(i + 1)], &[0, 1, 2][..3.min(i + 1)]);
                let mut all: Vec<usize> = kept.iter().chain(e.evicted_positions(l)).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..=i).collect::<Vec<_>>());
            }
        }
    }
}

#[test]
fn memory_changes_outputs_only_after_eviction() {
    let t = teacher();
    let mut rng = Rng::new(8);
    let mc = MemoryConfig::for_model(64);
    let slow: Vec<MemorySlowWeights> = (0..2).map(|_| MemorySlowWeights::init(mc.d_mem, 64, &mut rng)).collect();
    let setup = EvictionSetup {
        plan: CompressionPlan { ratio: 0.0, interval: 4, budget: 20, sinks: 2, local_window: 4 },
        policy: PolicyId::Knorm,
        ..EvictionSetup::default()
    };
    let mut with = Engine::new(&t, setup.clone(), None, Some((mc, slow))).unwrap();
    let mut without = Engine::new(&t, setup, None, None).unwrap();
    let x = Matrix::random_normal(40, 64, 1.0, &mut rng);
    let p = x.gather_rows(&(0..8).collect::<Vec<_>>());
    assert_eq!(with.prefill(&p).unwrap(), without.prefill(&p).unwrap());
    let mut diverged = false;
    for i in 8..40 {
        let (a, b) = (with.step(x.row(i)).unwrap(), without.step(x.row(i)).unwrap());
        if with.evicted_total() == 0 {
            assert_eq!(a, b);
        } else {
            diverged |= a != b;
        }
    }
    assert!(diverged);
}
