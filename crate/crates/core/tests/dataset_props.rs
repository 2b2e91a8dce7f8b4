//! Dataset format and mixture properties over random rolls.

use proptest::prelude::*;

use mixsep::dataset::{decode_dataset, encode_dataset};
use mixsep::phrase::Phrase;
use mixsep::roll::{mixture_from_roll, Pianoroll, RollDims};

fn dims() -> impl Strategy<Value = RollDims> {
    (1usize..9, 1usize..9, 1usize..6).prop_map(|(t, p, c)| RollDims::new(t, p, c))
}

fn phrases(d: RollDims) -> impl Strategy<Value = Vec<Phrase>> {
    prop::collection::vec(
        (prop::collection::vec(any::<bool>(), d.len()), "[a-z/._-]{0,12}", any::<u32>()),
        0..6,
    )
    .prop_map(move |rows| {
        rows.into_iter()
            .map(|(cells, source_id, bar_offset)| Phrase {
                roll: Pianoroll::from_cells(d, cells).unwrap(),
                source_id,
                bar_offset,
            })
            .collect()
    })
}

fn dims_and_phrases() -> impl Strategy<Value = (RollDims, Vec<Phrase>)> {
    dims().prop_flat_map(|d| (Just(d), phrases(d)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn encode_decode_round_trips((d, ps) in dims_and_phrases()) {
        let bytes = encode_dataset(&ps, d).unwrap();
        let per_phrase: usize = ps.iter().map(|p| 2 + p.source_id.len() + 4 + d.len().div_ceil(8)).sum();
        prop_assert_eq!(bytes.len(), 4 + 2 + 12 + 8 + per_phrase);
        let (back_dims, back) = decode_dataset(&bytes).unwrap();
        prop_assert_eq!(back_dims, d);
        prop_assert_eq!(back, ps);
    }

    #[test]
    fn every_proper_prefix_is_rejected((d, ps) in dims_and_phrases(), cut in any::<prop::sample::Index>()) {
        let bytes = encode_dataset(&ps, d).unwrap();
        let n = cut.index(bytes.len());
        prop_assert!(decode_dataset(&bytes[..n]).is_err());
    }

    #[test]
    fn mixture_is_the_channel_or((d, ps) in dims_and_phrases()) {
        for p in &ps {
            let m = mixture_from_roll(&p.roll);
            prop_assert_eq!((m.time(), m.pitch()), (d.time, d.pitch));
            for t in 0..d.time {
                for q in 0..d.pitch {
                    let any = (0..d.channels).any(|c| p.roll.get(t, q, c));
                    prop_assert_eq!(m.get(t, q), any);
                }
            }
        }
    }
}
