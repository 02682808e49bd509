use patchloc::backbone::blur_downsample;
use patchloc::tensor::{Checkpoint, Tape, Tensor};
use patchloc::Error;
use proptest::prelude::*;

fn grad_of(f: impl Fn(&mut Tape<f64>, patchloc::tensor::Var) -> patchloc::tensor::Var, w: &[f64]) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::new(vec![1, w.len()], w.to_vec()).unwrap().with_requires_grad(true));
    let loss = f(&mut tape, x);
    let g = tape.backward(loss).unwrap();
    (tape.scalar(loss), g.wrt(x).unwrap().to_vec())
}

#[test]
fn square_has_gradient_twice_the_input() {
    let (v, g) = grad_of(
        |t, x| {
            let sq = t.hadamard(x, x).unwrap();
            t.sum(sq).unwrap()
        },
        &[3.0],
    );
    assert_eq!(v, 9.0);
    assert_eq!(g, vec![6.0]);
}

#[test]
fn dead_relu_blocks_every_gradient() {
    let (_, g) = grad_of(
        |t, x| {
            let shifted = t.affine_const(x, &[1.0, 1.0], &[-5.0, -7.0]).unwrap();
            let r = t.relu(shifted).unwrap();
            let r = t.hadamard(r, x).unwrap();
            t.sum(r).unwrap()
        },
        &[0.0, 1.0],
    );
    assert_eq!(g, vec![0.0, 0.0]);
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let (_, g) = grad_of(
        |t, x| {
            let r = t.relu(x).unwrap();
            t.sum(r).unwrap()
        },
        &[0.0, 2.0],
    );
    assert_eq!(g, vec![0.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalar_and_detached_losses() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_requires_grad(true));
    assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
    let c = tape.constant(vec![1], vec![4.0]).unwrap();
    assert!(matches!(tape.backward(c), Err(Error::Detached)));
}

#[test]
fn blur_has_unit_dc_gain_and_binomial_impulse_response() {
    let c = Tensor::full(vec![1, 2, 8, 8], 0.37f64);
    for taps in [1, 2, 3, 5] {
        let y = blur_downsample(&c, taps).unwrap();
        assert_eq!(y.shape(), &[1, 2, 4, 4]);
        assert!(y.data().iter().all(|v| (v - 0.37).abs() < 1e-15), "taps {taps}");
    }
    // A vertical line impulse at column 4 isolates the 1-D row response.
    let mut data = vec![0.0; 64];
    for r in 0..8 {
        data[r * 8 + 4] = 1.0;
    }
    let line = Tensor::new(vec![1, 1, 8, 8], data.clone()).unwrap();
    let y = blur_downsample(&line, 3).unwrap();
    // Blurred row [.., 0.25, 0.5, 0.25, ..] at columns 3..=5, sampled at even columns.
    assert_eq!(&y.data()[..4], &[0.0, 0.0, 0.5, 0.0]);
    let mut shifted = vec![0.0; 64];
    for r in 0..8 {
        shifted[r * 8 + 3] = 1.0;
    }
    let y = blur_downsample(&Tensor::new(vec![1, 1, 8, 8], shifted).unwrap(), 3).unwrap();
    assert_eq!(&y.data()[..4], &[0.0, 0.25, 0.25, 0.0]);
    // One tap is plain subsampling.
    let y = blur_downsample(&line, 1).unwrap();
    assert_eq!(&y.data()[..4], &[0.0, 0.0, 1.0, 0.0]);
    assert!(blur_downsample(&Tensor::<f64>::zeros(vec![1, 1, 7, 8]), 3).is_err());
}

fn tanh_like(t: &mut Tape<f64>, x: patchloc::tensor::Var, w: &[f64]) -> patchloc::tensor::Var {
    let s = t.sigmoid(x).unwrap();
    let h = t.hadamard(s, x).unwrap();
    let m = t.masked_sum(h, w).unwrap();
    t.sum(m).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backward_is_linear_in_the_loss(
        xs in prop::collection::vec(-3.0f64..3.0, 1..12),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
        seed in 0u64..1000,
    ) {
        let n = xs.len();
        let w1: Vec<f64> = (0..n).map(|i| ((i as u64 * 7 + seed) % 5) as f64 - 2.0).collect();
        let w2: Vec<f64> = (0..n).map(|i| ((i as u64 * 3 + seed) % 7) as f64 * 0.5).collect();
        let (_, g1) = grad_of(|t, x| tanh_like(t, x, &w1), &xs);
        let (_, g2) = grad_of(|t, x| {
            let r = t.relu(x).unwrap();
            let m = t.masked_sum(r, &w2).unwrap();
            t.sum(m).unwrap()
        }, &xs);
        let (_, g) = grad_of(|t, x| {
            let l1 = tanh_like(t, x, &w1);
            let r = t.relu(x).unwrap();
            let m = t.masked_sum(r, &w2).unwrap();
            let l2 = t.sum(m).unwrap();
            let l1 = t.mul(l1, a).unwrap();
            let l2 = t.mul(l2, b).unwrap();
            t.add(l1, l2).unwrap()
        }, &xs);
        for i in 0..n {
            let expect = a * g1[i] + b * g2[i];
            prop_assert!((g[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()), "{} vs {}", g[i], expect);
        }
    }

    #[test]
    fn replaying_a_tape_is_bit_identical(xs in prop::collection::vec(-3.0f64..3.0, 1..16)) {
        let w: Vec<f64> = (0..xs.len()).map(|i| (i % 3) as f64 - 1.0).collect();
        let a = grad_of(|t, x| tanh_like(t, x, &w), &xs);
        let b = grad_of(|t, x| tanh_like(t, x, &w), &xs);
        prop_assert_eq!(a.0.to_bits(), b.0.to_bits());
        prop_assert_eq!(
            a.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn checkpoints_roundtrip_byte_exactly(
        tensors in prop::collection::vec(
            (prop::collection::vec(1usize..4, 0..4), any::<u64>()),
            0..6,
        )
    ) {
        let mut ck = Checkpoint::new();
        for (i, (shape, bits)) in tensors.iter().enumerate() {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|j| (bits.wrapping_mul(j as u64 + 1) % 10_000) as f64 / 97.0 - 50.0).collect();
            ck.push(format!("layer.{i}.weight"), Tensor::new(shape.clone(), data).unwrap());
        }
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}
