//! Property tests for the structural invariants.

use bnnkit::binkernel::{pack, unpack, xnor_popcount_dot};
use bnnkit::tensor::Tensor;
use proptest::prelude::*;

proptest! {
    #[test]
    fn pack_unpack_roundtrip(bits in proptest::collection::vec(any::<bool>(), 1..1200)) {
        let vals: Vec<f32> = bits.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect();
        let t = Tensor::from_vec(&[1, vals.len()], vals);
        let bt = pack(&t).unwrap();
        bt.validate().unwrap();
        let back: Tensor<f32> = unpack(&bt);
        prop_assert_eq!(back.data(), t.data());
    }

    #[test]
    fn xnor_dot_equals_integer_dot(
        pair in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..800)
    ) {
        let a: Vec<f32> = pair.iter().map(|&(x, _)| if x { 1.0 } else { -1.0 }).collect();
        let b: Vec<f32> = pair.iter().map(|&(_, y)| if y { 1.0 } else { -1.0 }).collect();
        let want: i64 = a.iter().zip(&b).map(|(&x, &y)| (x * y) as i64).sum();
        let pa = pack(&Tensor::from_vec(&[1, a.len()], a.clone())).unwrap();
        let pb = pack(&Tensor::from_vec(&[1, b.len()], b)).unwrap();
        prop_assert_eq!(xnor_popcount_dot(&pa, 0, &pb, 0).unwrap(), want);
    }

    #[test]
    fn reshape_roundtrip(data in proptest::collection::vec(-1e4f32..1e4, 1..256)) {
        let n = data.len();
        let t = Tensor::from_vec(&[n], data);
        let there = t.reshape(&[1, n]).unwrap();
        let back = there.reshape(&[n]).unwrap();
        prop_assert_eq!(back.data(), t.data());
    }
}
