//! Randomised round trips of the on-disk formats.

use proptest::prelude::*;

use itsr::config::RunConfig;
use itsr::tsre;
use itsr_core::Tensor;

fn any_tensor() -> impl Strategy<Value = Tensor> {
    (1usize..12, 1usize..12, any::<bool>()).prop_flat_map(|(r, c, vector)| {
        proptest::collection::vec(any::<u32>(), r * c).prop_map(move |bits| {
            // Arbitrary bit patterns, including NaN payloads and infinities.
            let data = bits.into_iter().map(f32::from_bits).collect();
            if vector {
                Tensor::new(&[r * c], data).unwrap()
            } else {
                Tensor::new(&[r, c], data).unwrap()
            }
        })
    })
}

proptest! {
    #[test]
    fn embedding_files_round_trip_bitwise(t in any_tensor()) {
        let bytes = tsre::encode(&t);
        let back = tsre::decode(&bytes).unwrap();
        let rows = if t.shape().len() == 1 { 1 } else { t.shape()[0] };
        prop_assert_eq!(back.shape(), &[rows, t.numel() / rows][..]);
        let a: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, b);
        prop_assert!(tsre::decode(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn resolved_config_reads_back_equal(
        fusion in prop::sample::select(vec!["gff-sub", "gff-concat", "tff"]),
        heads in prop::option::of(1usize..8),
        epochs in 1usize..500,
        seed in any::<u64>(),
        lr in 1e-5f32..1.0,
        scope in prop::sample::select(vec!["all", "full", "change", "no_change"]),
        split in prop::sample::select(vec!["none", "levir", "dubai", "0.5,0.25,0.25"]),
    ) {
        let mut c = RunConfig::default();
        c.set("fusion", fusion).unwrap();
        c.set("heads", &heads.map_or("auto".to_string(), |h| h.to_string())).unwrap();
        c.set("epochs", &epochs.to_string()).unwrap();
        c.set("seed", &seed.to_string()).unwrap();
        c.set("lr", &lr.to_string()).unwrap();
        c.set("scope", scope).unwrap();
        c.set("split", split).unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.render(), std::path::Path::new("config.txt")).unwrap();
        prop_assert_eq!(back, c);
    }
}
