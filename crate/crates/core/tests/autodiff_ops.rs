mod common;

use idmlab::autodiff::{Tape, Tensor};
use idmlab::Error;
use proptest::prelude::*;

fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn linear_reproduces_motion_matrix() {
    // W = [[1,-1,0,0],[0,0,1,-1]]ᵀ stored as [out=4, in=2]
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 2], vec![1.0, 0.0]));
    let w = tape.constant(t(&[4, 2], vec![1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]));
    let b = tape.constant(Tensor::zeros(&[4]));
    let y = tape.linear(x, w, Some(b)).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, -1.0, 0.0, 0.0]);
}

#[test]
fn linear_zero_input_broadcasts_bias() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[3, 5]));
    let w = tape.constant(Tensor::full(&[2, 5], 0.3));
    let b = tape.constant(t(&[2], vec![0.5, -2.0]));
    let y = tape.linear(x, w, Some(b)).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, -2.0, 0.5, -2.0, 0.5, -2.0]);
}

#[test]
fn linear_shape_mismatch_is_dimension_error() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 3]));
    let w = tape.constant(Tensor::zeros(&[4, 2]));
    assert!(matches!(tape.linear(x, w, None), Err(Error::Dimension { .. })));
}

#[test]
fn identity_kernel_with_padding_is_identity() {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
    let x = t(&[2, 1, 5, 4], common::uniform(&mut rng, 40));
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let kv = tape.constant(t(&[1, 1, 3, 3], k));
    let y = tape.conv2d(xv, kv, None, 1, 1).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn six_channel_unpadded_conv_shrinks_to_eight() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 6, 10, 10]));
    let k = tape.constant(Tensor::zeros(&[4, 6, 3, 3]));
    let y = tape.conv2d(x, k, None, 0, 1).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 4, 8, 8]);
}

#[test]
fn non_integral_conv_output_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 6, 6]));
    let k = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
    assert!(matches!(tape.conv2d(x, k, None, 0, 2), Err(Error::Dimension { .. })));
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 4]));
    let y = tape.softmax(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.25; 4]);
}

#[test]
fn cross_entropy_of_uniform_is_ln4() {
    for label in 0..4 {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 4], 0.7));
        let l = tape.cross_entropy_loss(x, &[label]).unwrap();
        assert!((tape.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_label_out_of_range() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 4]));
    assert!(matches!(
        tape.cross_entropy_loss(x, &[0, 4]),
        Err(Error::Index { label: 4, classes: 4 })
    ));
}

#[test]
fn maxpool_ties_route_to_lowest_index() {
    let mut tape = Tape::new();
    let x = tape.param(&t(&[1, 1, 2, 2], vec![1.0, 1.0, 1.0, 1.0]));
    let y = tape.maxpool2x2(x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn maxpool_drops_odd_edge() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 3, 3], (0..9).map(f64::from).collect()));
    let y = tape.maxpool2x2(x).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0]);
}

#[test]
fn straight_through_passes_gradient_unchanged() {
    let mut tape = Tape::new();
    let z = tape.param(&t(&[1, 2], vec![0.3, -0.2]));
    let q = tape.constant(t(&[1, 2], vec![1.0, 0.0]));
    let st = tape.straight_through(z, q).unwrap();
    assert_eq!(tape.value(st).data(), &[1.0, 0.0]);
    let target = tape.constant(t(&[1, 2], vec![0.5, 0.5]));
    let loss = tape.mse_loss(st, target).unwrap();
    let g = tape.backward(loss).unwrap();
    // d/dq of mean((q - target)^2) = (q - target)
    assert_eq!(g.get(z).unwrap(), &[0.5, -0.5]);
}

#[test]
fn every_layer_matches_finite_differences() {
    for layer in common::LAYERS {
        for seed in 0..5 {
            let err = common::layer_case(layer, seed);
            assert!(err < common::FD_TOL, "{layer} seed {seed}: rel err {err:e}");
        }
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in proptest::collection::vec(-30.0f64..30.0, 1..24), width in 1usize..6) {
        let rows = vals.len() / width;
        prop_assume!(rows > 0);
        let data = vals[..rows * width].to_vec();
        let mut tape = Tape::new();
        let x = tape.constant(t(&[rows, width], data));
        let y = tape.softmax(x).unwrap();
        for r in tape.value(y).data().chunks(width) {
            prop_assert!(r.iter().all(|&p| p >= 0.0));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_nonnegative(vals in proptest::collection::vec(-10.0f64..10.0, 4), label in 0usize..4) {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 4], vals));
        let l = tape.cross_entropy_loss(x, &[label]).unwrap();
        prop_assert!(tape.value(l).data()[0] >= 0.0);
    }

    #[test]
    fn forward_is_bit_deterministic(vals in proptest::collection::vec(-1.0f64..1.0, 2 * 3 * 5 * 5)) {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.constant(t(&[2, 3, 5, 5], vals.clone()));
            let k = tape.constant(t(&[2, 3, 3, 3], vals[..54].to_vec()));
            let y = tape.conv2d(x, k, None, 1, 1).unwrap();
            let y = tape.relu(y).unwrap();
            let y = tape.maxpool2x2(y).unwrap();
            tape.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }
}

#[test]
fn cross_entropy_zero_only_at_point_mass() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 4], vec![800.0, 0.0, 0.0, 0.0]));
    let l = tape.cross_entropy_loss(x, &[0]).unwrap();
    assert_eq!(tape.value(l).data()[0], 0.0);
}
