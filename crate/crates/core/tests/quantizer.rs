use proptest::prelude::*;
use zsq_core::quant::{dequantize_scalar, qmax, qmin, quant_params, quantize_scalar};

proptest! {
    #[test]
    fn codes_round_trip_and_stay_in_range(
        lo in -10.0f64..0.0,
        width in 0.01f64..20.0,
        bits in prop::sample::select(vec![2u32, 3, 4, 8]),
        t in prop::collection::vec(0.0f64..1.0, 1..64),
    ) {
        let hi = lo + width;
        let p = quant_params(lo, hi, bits).unwrap();
        let mut prev = None;
        let mut xs: Vec<f64> = t.iter().map(|u| lo + u * width).collect();
        xs.sort_by(f64::total_cmp);
        for x in xs {
            let q = quantize_scalar(x, &p);
            prop_assert!(q >= qmin(bits) && q <= qmax(bits));
            prop_assert!((dequantize_scalar(q, &p) - x).abs() <= 0.5 / p.scale + 1e-9);
            prop_assert_eq!(quantize_scalar(dequantize_scalar(q, &p), &p), q);
            if let Some(pq) = prev {
                prop_assert!(q >= pq);
            }
            prev = Some(q);
        }
        prop_assert_eq!(quantize_scalar(lo, &p), qmin(bits));
        prop_assert_eq!(quantize_scalar(hi, &p), qmax(bits));
    }
}
