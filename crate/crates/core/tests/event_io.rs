use proptest::prelude::*;
use pvag::event_io::{
    decode_binary, encode_binary, format_csv, parse_csv, read_events, synth_dataset, write_events, DatasetManifest,
    Event, EventCloud, EventFormat, Polarity, Split, SynthConfig,
};
use pvag::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_cloud(seed: u64, n: usize) -> EventCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let events = (0..n)
        .map(|_| {
            let p = if rng.gen() { Polarity::Positive } else { Polarity::Negative };
            Event::new(rng.gen_range(0..346), rng.gen_range(0..260), rng.gen_range(0..5_000_000), p)
        })
        .collect();
    EventCloud::new(346, 260, events).unwrap()
}

proptest! {
    #[test]
    fn binary_and_csv_round_trip(seed in any::<u64>(), n in 0usize..300) {
        let cloud = random_cloud(seed, n);
        let bytes = encode_binary(&cloud);
        prop_assert_eq!(bytes.len(), 16 + 13 * n);
        let back = decode_binary(&bytes).unwrap();
        prop_assert_eq!(&back, &cloud);
        prop_assert_eq!(parse_csv(&format_csv(&cloud), 346, 260).unwrap(), cloud);
    }

    #[test]
    fn events_come_out_time_sorted(seed in any::<u64>(), n in 1usize..300) {
        let cloud = random_cloud(seed, n);
        prop_assert!(cloud.events().windows(2).all(|w| w[0].t <= w[1].t));
    }

    #[test]
    fn truncated_binary_is_rejected(seed in any::<u64>(), n in 1usize..50, cut in 1usize..13) {
        let bytes = encode_binary(&random_cloud(seed, n));
        let short = &bytes[..bytes.len() - cut];
        let is_parse_error = matches!(decode_binary(short), Err(Error::Parse { .. }));
        prop_assert!(is_parse_error);
    }
}

#[test]
fn ten_thousand_events_survive_files_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = random_cloud(7, 10_000);
    for (name, format) in [
        ("a.evs", EventFormat::Binary),
        ("a.csv", EventFormat::Csv { width: 346, height: 260 }),
    ] {
        let path = dir.path().join(name);
        write_events(&cloud, &path, format).unwrap();
        let first = std::fs::read(&path).unwrap();
        let back = read_events(&path, format).unwrap();
        assert_eq!(back, cloud);
        let again = dir.path().join(format!("again-{name}"));
        write_events(&back, &again, format).unwrap();
        assert_eq!(std::fs::read(&again).unwrap(), first);
    }
}

#[test]
fn malformed_input_is_reported_with_location() {
    let err = parse_csv("1,2,3,1\n1,2,x,1\n", 10, 10).unwrap_err();
    assert!(err.to_string().contains("line 2"), "{err}");
    assert!(matches!(parse_csv("1,2,3,2", 10, 10), Err(Error::Parse { .. })));
    assert!(matches!(parse_csv("1,2,3", 10, 10), Err(Error::Parse { .. })));
    assert!(matches!(parse_csv("10,2,3,1", 10, 10), Err(Error::Validation(_))));
    let mut bytes = encode_binary(&random_cloud(1, 3));
    bytes[16 + 12] = 5;
    assert!(decode_binary(&bytes).unwrap_err().to_string().contains("offset 28"));
    assert!(matches!(decode_binary(b"EVS2\0\0\0\0\0\0\0\0\0\0\0\0"), Err(Error::Parse { .. })));
}

#[test]
fn zero_polarity_reads_as_negative() {
    let cloud = parse_csv("# comment\n\n0,0,5,0\n1,1,4,-1\n2,2,6,+1\n", 4, 4).unwrap();
    let ps: Vec<Polarity> = cloud.events().iter().map(|e| e.p).collect();
    assert_eq!(ps, [Polarity::Negative, Polarity::Negative, Polarity::Positive]);
}

#[test]
fn synthetic_dataset_is_balanced_and_reproducible() {
    let cfg = SynthConfig { num_classes: 4, ..SynthConfig::default() };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = synth_dataset(a.path(), &cfg, 10, 0).unwrap();
    let mb = synth_dataset(b.path(), &cfg, 10, 0).unwrap();
    assert_eq!(ma.samples.len(), 40);
    assert_eq!(ma.indices(Split::Train).len(), 32);
    assert_eq!(ma.indices(Split::Test).len(), 8);
    for class in 0..4 {
        let test = ma.samples.iter().filter(|s| s.label == class && s.split == Split::Test).count();
        assert_eq!(test, 2);
    }
    for (sa, sb) in ma.samples.iter().zip(&mb.samples) {
        assert_eq!(sa, sb);
        assert_eq!(std::fs::read(a.path().join(&sa.path)).unwrap(), std::fs::read(b.path().join(&sb.path)).unwrap());
    }
    let loaded = DatasetManifest::load(a.path().join("manifest.json")).unwrap();
    assert_eq!(loaded.load_sample(3).unwrap(), ma.load_sample(3).unwrap());
}
