use misinfo_core::{check_format, parse_output, render_output, BBox, Category, StructuredOutputF64};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grid_box() -> impl Strategy<Value = BBox<f64>> {
    (0u64..100_000_000, 0u64..100_000_000, 1u64..50_000_000, 1u64..50_000_000).prop_map(|(x, y, w, h)| {
        let c = |k: u64| k as f64 / 1e6;
        BBox::new(c(x), c(y), c(x + w), c(y + h)).unwrap()
    })
}

fn output() -> impl Strategy<Value = StructuredOutputF64> {
    (
        proptest::option::of("[a-zA-Z0-9 ,.:;!?<>/\"'\\\\\u{4e00}-\u{4e2f}]{0,60}"),
        0usize..Category::COUNT,
        proptest::collection::vec(grid_box(), 0..5),
    )
        .prop_filter_map("think must not close early", |(think, c, boxes)| {
            StructuredOutputF64::new(think, Category::from_index(c).unwrap(), boxes).ok()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn render_then_parse_is_identity(out in output()) {
        let text = render_output(&out);
        let back: StructuredOutputF64 = parse_output(&text).unwrap();
        prop_assert_eq!(&back, &out);
        prop_assert_eq!(render_output(&back), text);
    }

    #[test]
    fn verdict_matches_parse(text in ".{0,200}") {
        let verdict = check_format(&text);
        let parsed = parse_output::<f64>(&text);
        prop_assert_eq!(verdict.is_valid, parsed.is_ok());
        prop_assert_eq!(verdict.failure_reason, parsed.err());
    }

    #[test]
    fn mutated_outputs_never_panic(out in output(), cuts in proptest::collection::vec((0usize..400, any::<char>()), 1..4)) {
        let mut chars: Vec<char> = render_output(&out).chars().collect();
        for (pos, c) in cuts {
            let i = pos % (chars.len() + 1);
            if c.is_ascii_digit() && i < chars.len() {
                chars.remove(i);
            } else {
                chars.insert(i, c);
            }
        }
        let text: String = chars.into_iter().collect();
        let parsed = parse_output::<f64>(&text);
        prop_assert_eq!(check_format(&text).is_valid, parsed.is_ok());
    }
}

#[test]
fn random_bytes_never_panic() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut valid = 0;
    for _ in 0..20_000 {
        let len = rng.random_range(0..256);
        let bytes: Vec<u8> = (0..len).map(|_| rng.random()).collect();
        let text = String::from_utf8_lossy(&bytes);
        let parsed = parse_output::<f64>(&text);
        assert_eq!(check_format(&text).is_valid, parsed.is_ok());
        valid += parsed.is_ok() as usize;
    }
    assert_eq!(valid, 0);
}
