use pemd::histograms::{logits_to_distribution, to_spatial_map};
use pemd::model::Trainable;
use pemd::{ArchConfig, ClassDistribution, DisplacementGrid, Head, Tape, Tensor, TwinRegistrationModel};
use proptest::prelude::*;

fn logits() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-30.0f64..30.0, 2 * 25)
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(z in logits(), shift in -50.0f64..50.0, scale in 0.05f64..2.0) {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::new([2, 25], z.clone()), false);
        let b = tape.leaf(Tensor::new([2, 25], z.iter().map(|v| v + shift).collect()), false);
        let pa = tape.softmax_temperature(a, scale).unwrap();
        let pb = tape.softmax_temperature(b, scale).unwrap();
        for row in tape.value(pa).data().chunks(25) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
        for (x, y) in tape.value(pa).data().iter().zip(tape.value(pb).data()) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn cumulative_sum_then_difference_is_identity(x in proptest::collection::vec(-10.0f64..10.0, 3 * 7)) {
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(Tensor::new([3, 7], x.clone()), false);
        let c = tape.cumulative_sum(v, 1).unwrap();
        let cs = tape.value(c).data();
        for r in 0..3 {
            for j in 0..7 {
                let prev = if j == 0 { 0.0 } else { cs[r * 7 + j - 1] };
                prop_assert!((cs[r * 7 + j] - prev - x[r * 7 + j]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn class_index_round_trips(i in 0usize..25) {
        let grid = DisplacementGrid::default();
        let (dx, dy) = grid.class_to_displacement(i).unwrap();
        prop_assert_eq!(grid.displacement_to_class(dx, dy).unwrap(), i);
    }

    #[test]
    fn spatial_map_copies_mass_exactly(raw in proptest::collection::vec(0.01f64..1.0, 25)) {
        let t: f64 = raw.iter().sum();
        let d = ClassDistribution::new(raw.iter().map(|v| v / t).collect()).unwrap();
        let map = to_spatial_map(&d).unwrap();
        prop_assert_eq!(map.flatten(), d.probs().to_vec());
        prop_assert_eq!(map.total(), d.probs().iter().sum::<f64>());
    }
}

#[test]
fn grid_corners_and_center() {
    let grid = DisplacementGrid::default();
    assert_eq!(grid.class_to_displacement(0).unwrap(), (-38, -38));
    assert_eq!(grid.class_to_displacement(12).unwrap(), (0, 0));
    assert_eq!(grid.class_to_displacement(24).unwrap(), (38, 38));
    assert!(grid.class_to_displacement(25).is_err());
}

#[test]
fn scaled_softmax_of_single_peak() {
    let mut z = vec![0.0f32; 25];
    z[3] = 10.0;
    let d = logits_to_distribution(&z, 0.1).unwrap();
    let e = std::f64::consts::E;
    assert!((d.probs()[3] - e / (e + 24.0)).abs() < 1e-6);
    assert_eq!(d.argmax(), 3);
}

fn model_gradients(model: &TwinRegistrationModel, fixed: &Tensor<f32>, moving: &Tensor<f32>) -> (Vec<f32>, Vec<Vec<f32>>) {
    let all = Trainable { feature: true, head1: true, head2: true };
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, all);
    let a = tape.constant(fixed.clone());
    let b = tape.constant(moving.clone());
    let logits = model.forward(&mut tape, &bound, a, b, Head::First).unwrap();
    let loss = tape.cross_entropy(logits, &[3, 17]).unwrap();
    tape.backward(loss).unwrap();
    let grads = bound.iter().filter_map(|(_, v)| tape.grad(v).map(|g| g.data().to_vec())).collect();
    (tape.value(logits).data().to_vec(), grads)
}

#[test]
fn forward_and_backward_are_bit_identical_across_runs() {
    let arch = ArchConfig::default();
    let model = TwinRegistrationModel::init(&arch, 5);
    let n = arch.patch_side * arch.patch_side;
    let fixed = Tensor::new([2, 1, arch.patch_side, arch.patch_side], (0..2 * n).map(|i| ((i * 37 % 101) as f32) / 50.0 - 1.0).collect());
    let moving = Tensor::new([2, 1, arch.patch_side, arch.patch_side], (0..2 * n).map(|i| ((i * 53 % 97) as f32) / 48.0 - 1.0).collect());
    let first = model_gradients(&model, &fixed, &moving);
    let second = model_gradients(&model, &fixed, &moving);
    assert!(!first.1.is_empty());
    assert_eq!(first, second);
}
