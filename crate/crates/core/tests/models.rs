use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidistill::layers::Mode;
use vidistill::models::{StudentKind, StudentNet, TeacherNet2D, TrunkConfig};
use vidistill::tensor::{Graph, Tensor};

fn frames(rng: &mut ChaCha8Rng, b: usize) -> Tensor {
    Tensor::from_fn([b, 1, 32, 32], |_| rng.random_range(0.0f32..1.0))
}

fn clips(rng: &mut ChaCha8Rng, b: usize) -> Tensor {
    Tensor::from_fn([b, 1, 8, 32, 32], |_| rng.random_range(0.0f32..1.0))
}

fn eval_teacher(rng: &mut ChaCha8Rng) -> TeacherNet2D {
    let mut t = TeacherNet2D::new(&TrunkConfig::default(), 8, rng).unwrap();
    t.mode = Mode::Eval;
    t
}

#[test]
fn teacher_logits_require_eval_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut t = TeacherNet2D::<f32>::new(&TrunkConfig::default(), 8, &mut rng).unwrap();
    let x = frames(&mut rng, 2);
    assert!(t.logits(&x).is_err());
    t.mode = Mode::Eval;
    let before = t.params.clone();
    let z = t.logits(&x).unwrap();
    assert_eq!(z.shape(), &[2, 8]);
    for (n, p) in before.iter() {
        assert_eq!(t.params.value(n).unwrap().data(), p.value.data(), "{n} changed");
    }
}

#[test]
fn teacher_logits_independent_of_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = eval_teacher(&mut rng);
    let x = frames(&mut rng, 4);
    let all = t.logits(&x).unwrap();
    for i in 0..4 {
        let one = t.logits(&x.select_rows(&[i]).unwrap()).unwrap();
        for (a, b) in one.data().iter().zip(all.row(i)) {
            assert!((a - b).abs() < 1e-6);
        }
    }
    // the same frame twice gives identical rows
    let twice = t.logits(&x.select_rows(&[2, 2]).unwrap()).unwrap();
    assert_eq!(twice.row(0), twice.row(1));
}

#[test]
fn zero_head_gives_zero_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut t = eval_teacher(&mut rng);
    t.params.set_value("head.weight", Tensor::zeros([8, 16])).unwrap();
    let z = t.logits(&frames(&mut rng, 3)).unwrap();
    assert!(z.data().iter().all(|&v| v == 0.0));
}

#[test]
fn heads_share_trunk_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for kind in [StudentKind::Res3d, StudentKind::R2Plus1d] {
        let mut s = StudentNet::<f32>::new(kind, &TrunkConfig::default(), &mut rng).unwrap();
        s.add_head("a", 8, &mut rng).unwrap();
        s.add_head("b", 4, &mut rng).unwrap();
        // head b made equal to the first 4 rows of head a
        let wa = s.params.value("heads.a.weight").unwrap().select_rows(&[0, 1, 2, 3]).unwrap();
        let ba = Tensor::new([4], s.params.value("heads.a.bias").unwrap().data()[..4].to_vec()).unwrap();
        s.params.set_value("heads.b.weight", wa).unwrap();
        s.params.set_value("heads.b.bias", ba).unwrap();
        s.mode = Mode::Eval;
        let x = clips(&mut rng, 2);
        let mut g = Graph::inference();
        let xv = g.constant(x);
        let out = s.forward_heads(&mut g, xv, &["a", "b"]).unwrap();
        for r in 0..2 {
            assert_eq!(&g.value(out[0]).row(r)[..4], g.value(out[1]).row(r));
        }
    }
}

#[test]
fn unknown_head_and_empty_batch_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut s = StudentNet::<f32>::new(StudentKind::R2Plus1d, &TrunkConfig::default(), &mut rng).unwrap();
    s.add_head("a", 3, &mut rng).unwrap();
    assert!(s.logits(&clips(&mut rng, 1), "b").is_err());
    // an empty batch cannot even be built: tensor dimensions are positive
    assert!(Tensor::<f32>::new([0, 1, 8, 32, 32], vec![]).is_err());
    assert!(s.add_head("a", 3, &mut rng).is_err());
}

#[test]
fn eval_forward_is_pure() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut s = StudentNet::<f32>::new(StudentKind::Res3d, &TrunkConfig::default(), &mut rng).unwrap();
    s.add_head("a", 5, &mut rng).unwrap();
    let x = clips(&mut rng, 3);
    let a = s.logits(&x, "a").unwrap();
    let b = s.logits(&x, "a").unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn res3d_weights_gain_one_temporal_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = TrunkConfig::default();
    let t = TeacherNet2D::<f32>::new(&cfg, 8, &mut rng).unwrap();
    let s = StudentNet::<f32>::new(StudentKind::Res3d, &cfg, &mut rng).unwrap();
    let mut tn = t.trunk_param_names();
    let mut sn = s.trunk_param_names();
    tn.sort();
    sn.sort();
    assert_eq!(tn, sn);
    for n in &tn {
        let (a, b) = (t.params.value(n).unwrap().shape(), s.params.value(n).unwrap().shape());
        if n.ends_with("weight") && a.len() == 4 {
            assert_eq!(b.len(), 5, "{n}");
            assert_eq!((&a[..2], &a[2..]), (&b[..2], &b[3..]), "{n}");
        } else {
            assert_eq!(a, b, "{n}");
        }
    }
}
