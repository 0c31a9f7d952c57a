mod common;

use common::iou_oracle;
use geopool::metrics::{finalize, ConfusionMatrix};
use geopool::{LabelGrid, Rng};
use proptest::prelude::*;

fn random_pair(rng: &mut Rng, n: usize, k: usize) -> (Vec<u32>, Vec<u32>) {
    // Skew toward low ids so some classes are occasionally absent.
    let draw = |rng: &mut Rng| rng.below(k).min(rng.below(k)) as u32;
    let pred = (0..n).map(|_| draw(rng)).collect();
    let truth = (0..n).map(|_| draw(rng)).collect();
    (pred, truth)
}

#[test]
fn finalize_matches_set_oracle() {
    let mut rng = Rng::new(17);
    for _ in 0..100 {
        let k = 2 + rng.below(5);
        let n = 1 + rng.below(200);
        let (pred, truth) = random_pair(&mut rng, n, k);
        let mut cm = ConfusionMatrix::new(k).unwrap();
        cm.accumulate_labels(&pred, &truth).unwrap();
        let r = finalize(&cm).unwrap();
        let (ious, acc) = iou_oracle(&pred, &truth, k);
        assert_eq!(r.per_class_iou, ious);
        assert_eq!(r.pixel_accuracy, acc);
        let present: Vec<f64> = ious.iter().flatten().copied().collect();
        assert_eq!(r.miou, present.iter().sum::<f64>() / present.len() as f64);
        let absent: Vec<usize> = (0..k).filter(|&c| ious[c].is_none()).collect();
        assert_eq!(r.classes_ignored, absent);
    }
}

#[test]
fn label_grids_accumulate() {
    let truth = LabelGrid::new(2, 2, 3, vec![0, 1, 2, 2]).unwrap();
    let pred = LabelGrid::new(2, 2, 3, vec![0, 2, 2, 1]).unwrap();
    let mut cm = ConfusionMatrix::new(3).unwrap();
    cm.accumulate(&pred, &truth).unwrap();
    assert_eq!(cm.counts(), &[1, 0, 0, 0, 0, 1, 0, 1, 1]);
    let wrong = LabelGrid::new(1, 4, 3, vec![0; 4]).unwrap();
    assert!(cm.accumulate(&wrong, &truth).is_err());
}

proptest! {
    #[test]
    fn permutation_equivariance(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let k = 4;
        let (pred, truth) = random_pair(&mut rng, 64, k);
        let mut perm: Vec<u32> = (0..k as u32).collect();
        rng.shuffle(&mut perm);
        let relabel = |v: &[u32]| v.iter().map(|&l| perm[l as usize]).collect::<Vec<_>>();
        let mut a = ConfusionMatrix::new(k).unwrap();
        a.accumulate_labels(&pred, &truth).unwrap();
        let mut b = ConfusionMatrix::new(k).unwrap();
        b.accumulate_labels(&relabel(&pred), &relabel(&truth)).unwrap();
        let (ra, rb) = (a.finalize().unwrap(), b.finalize().unwrap());
        for (c, &pc) in perm.iter().enumerate() {
            prop_assert_eq!(ra.per_class_iou[c], rb.per_class_iou[pc as usize]);
        }
        prop_assert!((ra.miou - rb.miou).abs() < 1e-15);
        prop_assert_eq!(ra.pixel_accuracy, rb.pixel_accuracy);
    }

    #[test]
    fn accumulation_is_linear(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let (p1, t1) = random_pair(&mut rng, 40, 3);
        let (p2, t2) = random_pair(&mut rng, 25, 3);
        let mut joint = ConfusionMatrix::new(3).unwrap();
        joint.accumulate_labels(&[p1.clone(), p2.clone()].concat(), &[t1.clone(), t2.clone()].concat()).unwrap();
        let mut a = ConfusionMatrix::new(3).unwrap();
        a.accumulate_labels(&p1, &t1).unwrap();
        let mut b = ConfusionMatrix::new(3).unwrap();
        b.accumulate_labels(&p2, &t2).unwrap();
        a.merge(&b).unwrap();
        prop_assert_eq!(a, joint);
    }

    #[test]
    fn bounds_hold(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let (pred, truth) = random_pair(&mut rng, 50, 5);
        let mut cm = ConfusionMatrix::new(5).unwrap();
        cm.accumulate_labels(&pred, &truth).unwrap();
        let r = cm.finalize().unwrap();
        prop_assert!((0.0..=1.0).contains(&r.miou));
        prop_assert!((0.0..=1.0).contains(&r.pixel_accuracy));
        let total = cm.total() as f64;
        for c in 0..5 {
            prop_assert!(r.pixel_accuracy >= cm.get(c, c) as f64 / total);
            if let Some(iou) = r.per_class_iou[c] {
                prop_assert!((0.0..=1.0).contains(&iou));
            }
        }
    }
}
