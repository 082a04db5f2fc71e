use lakehopper::corpus::{gen_lake_pair, save_data_lake, CountRange, LakePairSpec, SplitKind};
use lakehopper::experiment::load_lake_dir;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_lakes_round_trip_through_disk(
        n_source in 1usize..6,
        n_target in 1usize..6,
        shared_frac in 0.0f64..=1.0,
        skew in 0.0f64..2.0,
        noise in 0.0f64..0.3,
        seed in any::<u64>(),
    ) {
        let spec = LakePairSpec {
            n_source_types: n_source,
            n_target_types: n_target,
            n_shared_types: (shared_frac * n_source.min(n_target) as f64).floor() as usize,
            columns_per_type: CountRange { min: 3, max: 12 },
            cells_per_column: CountRange { min: 1, max: 8 },
            long_tail_skew: skew,
            noise_rate: noise,
            seed,
            train_frac: 0.6,
            valid_frac: 0.2,
            max_table_width: 3,
        };
        let (source, target) = gen_lake_pair(&spec).unwrap();
        for lake in [source, target] {
            let dir = tempfile::tempdir().unwrap();
            save_data_lake(&lake, dir.path()).unwrap();
            let loaded = load_lake_dir(dir.path(), 0).unwrap();
            prop_assert_eq!(&loaded.type_set, &lake.type_set);
            prop_assert_eq!(loaded.columns(), lake.columns());
            for kind in [SplitKind::Train, SplitKind::Validation, SplitKind::Test] {
                prop_assert_eq!(loaded.split(kind).unwrap(), lake.split(kind).unwrap());
            }
        }
    }
}
