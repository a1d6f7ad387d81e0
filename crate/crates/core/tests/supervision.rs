use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stnet_core::data::{generate_dataset, CrowdSample, SceneSpec};
use stnet_core::model::{ModelSpec, STNetModel};
use stnet_core::scale_tree::{CrossScaleGates, EnhancerSpec, LeafAssignment};
use stnet_core::supervision::{
    compose_batch, loss_background, loss_confidence, loss_density, make_crowd_label, objective_from_images,
    CrowdLabel, MixedBatch,
};
use stnet_core::tensor::{Shape, Tape, Tensor};

fn scenes() -> (Vec<CrowdSample>, Vec<CrowdSample>) {
    let spec = SceneSpec {
        width: 32,
        height: 32,
        count_range: (1, 6),
        head_radius_range: (1.0, 2.0),
        seed: 12,
        ..SceneSpec::default()
    };
    let crowd = generate_dataset(&spec, 6).unwrap();
    let bg = generate_dataset(&SceneSpec { count_range: (0, 0), ..spec }, 3).unwrap();
    (crowd, bg)
}

fn model() -> STNetModel {
    let spec = ModelSpec {
        enhancer_count: 1,
        enhancer: EnhancerSpec::new(9, LeafAssignment::Reverse).unwrap(),
        head_channels: 8,
        ..ModelSpec::desk_default()
    };
    let mut m = STNetModel::build(&spec, 2).unwrap();
    let w = m.params().find("density.conv1.weight").unwrap();
    let shape = m.params().shape(w);
    *m.params_mut().value_mut(w) = Tensor::uniform(shape, 0.01, 0.1, &mut ChaCha8Rng::seed_from_u64(3));
    m.set_gates(CrossScaleGates::fixed(0.3, 0.9));
    m
}

fn batch(lambda: f64) -> MixedBatch {
    let (crowd, bg) = scenes();
    compose_batch(&crowd, &bg, 4, lambda, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
}

fn all_grads(m: &STNetModel) -> Vec<f64> {
    m.params().iter().flat_map(|(_, p)| p.grad.data().to_vec()).collect()
}

#[test]
fn total_gradient_is_sum_of_term_gradients() {
    let mut m = model();
    let b = batch(0.25);
    let mut tape = Tape::new();
    let images = tape.constant(b.images.clone());
    let obj = objective_from_images(&m, &mut tape, images, &b).unwrap();
    let v = obj.values(&tape);
    assert_eq!(v.total, v.density + v.confidence + v.background);

    m.params_mut().zero_grad();
    tape.backward(obj.total, m.params_mut()).unwrap();
    let together = all_grads(&m);

    m.params_mut().zero_grad();
    for term in [obj.density, obj.confidence.unwrap(), obj.background.unwrap()] {
        tape.backward(term, m.params_mut()).unwrap();
    }
    let separate = all_grads(&m);
    let err = together
        .iter()
        .zip(&separate)
        .map(|(a, b)| (a - b).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max);
    assert!(err < 1e-10, "additivity error {err:e}");
}

/// Gradient of each term with respect to every image of the batch.
fn image_grads(lambda: f64) -> (MixedBatch, Vec<Tensor>) {
    let mut m = model();
    let b = batch(lambda);
    let id = m.params_mut().add("probe.images", b.images.clone());
    let mut tape = Tape::new();
    let images = tape.param(m.params(), id);
    let obj = objective_from_images(&m, &mut tape, images, &b).unwrap();
    let terms = [Some(obj.density), obj.confidence, obj.background];
    let grads = terms
        .iter()
        .flatten()
        .map(|&t| {
            m.params_mut().zero_grad();
            tape.backward(t, m.params_mut()).unwrap();
            m.params().grad(id).clone()
        })
        .collect();
    (b, grads)
}

fn item_norm(t: &Tensor, n: usize) -> f64 {
    t.item(n).data().iter().map(|g| g * g).sum()
}

#[test]
fn terms_only_see_their_sub_batch() {
    let (b, grads) = image_grads(0.25);
    let [ld, lc, lb] = &grads[..] else { panic!("three terms expected") };
    for &slot in &b.background_slots {
        assert_eq!(item_norm(ld, slot), 0.0);
        assert_eq!(item_norm(lc, slot), 0.0);
        assert!(item_norm(lb, slot) > 0.0);
    }
    for &slot in &b.crowd_slots {
        assert_eq!(item_norm(lb, slot), 0.0);
        assert!(item_norm(ld, slot) > 0.0);
        assert!(item_norm(lc, slot) > 0.0);
    }
}

#[test]
fn zero_lambda_skips_the_background_term() {
    let (b, grads) = image_grads(0.0);
    assert!(b.background_slots.is_empty());
    assert_eq!(grads.len(), 2);
}

#[test]
fn background_fraction_over_many_batches() {
    let (crowd, bg) = scenes();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut nb, mut total) = (0, 0);
    for _ in 0..1000 {
        let b = compose_batch(&crowd, &bg, 16, 0.25, &mut rng).unwrap();
        nb += b.background_slots.len();
        total += b.len();
        assert!(b.density.shape().n == b.crowd_slots.len());
    }
    let frac = nb as f64 / total as f64;
    assert!((0.24..=0.26).contains(&frac), "{frac}");
}

#[test]
fn background_slots_carry_no_annotation() {
    let b = batch(0.5);
    assert_eq!(b.background_slots.len(), 2);
    assert_eq!(b.density.shape().n, 2);
    assert_eq!(b.labels.map().shape().n, 2);
    let mut slots: Vec<usize> = b.crowd_slots.iter().chain(&b.background_slots).copied().collect();
    slots.sort_unstable();
    assert_eq!(slots, [0, 1, 2, 3]);
}

fn density_strategy() -> impl Strategy<Value = Tensor> {
    (1usize..3, 1usize..7, 1usize..7)
        .prop_flat_map(|(n, h, w)| {
            proptest::collection::vec(prop_oneof![Just(0.0), 0.0f64..5.0], n * h * w)
                .prop_map(move |v| Tensor::from_vec(Shape::new(n, 1, h, w), v).unwrap())
        })
}

proptest! {
    #[test]
    fn label_is_invariant_to_positive_scaling(d in density_strategy(), k in prop_oneof![Just(2.0), Just(0.5), 0.01f64..100.0]) {
        let a = make_crowd_label(&d).unwrap();
        let b = make_crowd_label(&d.map(|v| k * v)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn labels_are_binary_and_losses_non_negative(d in density_strategy(), seed in 0u64..500) {
        let label = make_crowd_label(&d).unwrap();
        prop_assert!(label.map().data().iter().all(|&v| v == 0.0 || v == 1.0));
        let n = d.shape().n;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let pred = tape.constant(Tensor::uniform(d.shape(), 0.0, 3.0, &mut rng));
        let ld = loss_density(&mut tape, pred, &d, 0.0, n).unwrap();
        let conf = tape.constant(Tensor::uniform(d.shape(), 0.0, 1.0, &mut rng));
        let lc = loss_confidence(&mut tape, conf, &label, 0.0, n).unwrap();
        let lb = loss_background(&mut tape, conf, 0.5, 2 * n).unwrap();
        for t in [ld, lc, lb] {
            prop_assert!(tape.value(t).data()[0] >= 0.0);
        }
    }
}

#[test]
fn uniform_and_zero_maps() {
    let ones = make_crowd_label(&Tensor::full(Shape::new(1, 1, 5, 4), 0.3)).unwrap();
    assert!(ones.map().data().iter().all(|&v| v == 1.0));
    let zeros = make_crowd_label(&Tensor::zeros(Shape::new(1, 1, 5, 4))).unwrap();
    assert!(zeros.map().data().iter().all(|&v| v == 0.0));
    assert!(CrowdLabel::from_map(Tensor::full(Shape::new(1, 1, 1, 1), 2.0)).is_err());
}
