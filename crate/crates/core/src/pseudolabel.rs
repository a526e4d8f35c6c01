//! Confidence-filtered pseudo-labeling and running threshold estimation.
//!
//! A pixel receives its argmax class only if the winning probability clears
//! that class's threshold; thresholds are per-class medians of winning
//! confidences, capped at 0.9, and evolve by exponential moving average as
//! the target model trains.

use crate::error::{shape_err, usage_err, value_err, Result};
use crate::labelmap::{LabelMap, NO_LABEL};
use crate::model::Model;
use crate::tensor::{softmax, Tensor};

/// Upper bound on every threshold.
pub const THRESHOLD_CAP: f64 = 0.9;

/// Per-pixel argmax class (lowest index wins ties) and winning probability.
fn argmax_confidence(prob: &Tensor) -> Result<(Vec<u8>, Vec<f64>)> {
    let (b, c, h, w) = prob.dims4()?;
    if b != 1 {
        return Err(shape_err!("expected a single probability map, got batch {b}"));
    }
    if c > NO_LABEL as usize {
        return Err(value_err!("{c} classes collide with the NO_LABEL sentinel"));
    }
    let hw = h * w;
    let mut arg = vec![0u8; hw];
    let mut conf = vec![0.0; hw];
    for p in 0..hw {
        let mut best = 0usize;
        let mut bestv = prob.data()[p];
        for ci in 1..c {
            let v = prob.data()[ci * hw + p];
            if v > bestv {
                best = ci;
                bestv = v;
            }
        }
        arg[p] = best as u8;
        conf[p] = bestv;
    }
    Ok((arg, conf))
}

/// Labels each pixel with its argmax class when the winning probability
/// strictly exceeds that class's threshold, `NO_LABEL` otherwise.
pub fn pseudo_label(prob: &Tensor, thresholds: &[f64]) -> Result<LabelMap> {
    let (_, c, h, w) = prob.dims4()?;
    if thresholds.len() != c {
        return Err(shape_err!(
            "threshold vector length {} does not match {c} classes",
            thresholds.len()
        ));
    }
    let (arg, conf) = argmax_confidence(prob)?;
    let mut out = LabelMap::filled(h, w, NO_LABEL);
    for p in 0..h * w {
        if conf[p] > thresholds[arg[p] as usize] {
            out.data_mut()[p] = arg[p];
        }
    }
    Ok(out)
}

/// Lower-middle median of an unsorted non-empty slice.
fn lower_median(vals: &mut [f64]) -> f64 {
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    vals[(vals.len() - 1) / 2]
}

fn thresholds_from_populations(pops: &mut [Vec<f64>]) -> (Vec<f64>, Vec<bool>) {
    let mut p = Vec::with_capacity(pops.len());
    let mut valid = Vec::with_capacity(pops.len());
    for pop in pops {
        if pop.is_empty() {
            p.push(THRESHOLD_CAP);
            valid.push(false);
        } else {
            p.push(lower_median(pop).min(THRESHOLD_CAP));
            valid.push(true);
        }
    }
    (p, valid)
}

/// Dataset-level thresholds: for each class, the median winning confidence
/// over every pixel of the dataset predicted as that class, capped at 0.9.
/// Classes never predicted fall back to the cap.
pub fn dataset_thresholds(model: &mut Model, dataset: &[Tensor]) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(usage_err!("threshold estimation needs a non-empty dataset"));
    }
    let c = model.num_classes();
    let mut pops: Vec<Vec<f64>> = vec![Vec::new(); c];
    for img in dataset {
        let prob = softmax(&model.forward(img)?)?;
        let (arg, conf) = argmax_confidence(&prob)?;
        for p in 0..arg.len() {
            pops[arg[p] as usize].push(conf[p]);
        }
    }
    Ok(thresholds_from_populations(&mut pops).0)
}

/// Single-image thresholds plus a per-class validity mask; classes absent
/// from the image are invalid (their entry is the cap but carries no signal).
pub fn image_thresholds(prob: &Tensor) -> Result<(Vec<f64>, Vec<bool>)> {
    let (_, c, _, _) = prob.dims4()?;
    let (arg, conf) = argmax_confidence(prob)?;
    let mut pops: Vec<Vec<f64>> = vec![Vec::new(); c];
    for p in 0..arg.len() {
        pops[arg[p] as usize].push(conf[p]);
    }
    Ok(thresholds_from_populations(&mut pops))
}

/// EMA step `p <- lambda*p + (1-lambda)*p_k` on the valid classes only.
pub fn ema_update(p: &mut [f64], p_k: &[f64], valid: &[bool], lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(value_err!("EMA factor must lie in [0, 1], got {lambda}"));
    }
    if p.len() != p_k.len() || p.len() != valid.len() {
        return Err(shape_err!("threshold vector length mismatch"));
    }
    for j in 0..p.len() {
        if valid[j] {
            p[j] = lambda * p[j] + (1.0 - lambda) * p_k[j];
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transforms::Transform;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn prob_map(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let logits = Tensor::new(
            vec![1, c, h, w],
            (0..c * h * w).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        )
        .unwrap();
        softmax(&logits).unwrap()
    }

    #[test]
    fn pseudo_label_threshold_examples() {
        let prob = Tensor::new(vec![1, 3, 1, 2], vec![0.7, 0.5, 0.2, 0.3, 0.1, 0.2]).unwrap();
        // pixel 0: (0.7, 0.2, 0.1) clears 0.6; pixel 1: (0.5, 0.3, 0.2) does not
        let m = pseudo_label(&prob, &[0.6, 0.6, 0.6]).unwrap();
        assert_eq!(m.data(), &[0, NO_LABEL]);
    }

    #[test]
    fn zero_thresholds_give_plain_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let prob = prob_map(4, 6, 7, &mut rng);
        let m = pseudo_label(&prob, &[0.0; 4]).unwrap();
        assert_eq!(m.labeled_count(), 42);
        let (arg, _) = argmax_confidence(&prob).unwrap();
        assert_eq!(m.data(), &arg[..]);
    }

    #[test]
    fn unit_thresholds_label_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let prob = prob_map(3, 5, 5, &mut rng);
        let m = pseudo_label(&prob, &[1.0; 3]).unwrap();
        assert_eq!(m.labeled_count(), 0);
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        let prob = Tensor::new(vec![1, 2, 1, 1], vec![0.5, 0.5]).unwrap();
        let m = pseudo_label(&prob, &[0.1, 0.1]).unwrap();
        assert_eq!(m.data(), &[0]);
    }

    #[test]
    fn raising_thresholds_never_adds_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        for _ in 0..20 {
            let prob = prob_map(5, 8, 8, &mut rng);
            let lo: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..0.9)).collect();
            let mut hi = lo.clone();
            let j = rng.gen_range(0..5);
            hi[j] = (lo[j] + rng.gen_range(0.0..0.5)).min(1.0);
            let m_lo = pseudo_label(&prob, &lo).unwrap();
            let m_hi = pseudo_label(&prob, &hi).unwrap();
            assert!(m_hi.labeled_count() <= m_lo.labeled_count());
            for p in 0..64 {
                if m_hi.data()[p] != NO_LABEL {
                    assert_eq!(m_hi.data()[p], m_lo.data()[p]);
                }
            }
        }
    }

    #[test]
    fn pseudo_label_commutes_with_spatial_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let prob = prob_map(4, 9, 11, &mut rng);
        let thresholds = [0.3, 0.4, 0.25, 0.5];
        let y = pseudo_label(&prob, &thresholds).unwrap();
        for t in [Transform::Mirror { c: 6 }, Transform::Rotate { theta_deg: -4.0 }] {
            let tp = t.apply_probs(&prob).unwrap();
            let ty = t.apply_labels(&y).unwrap();
            let from_probs = pseudo_label(&tp, &thresholds).unwrap();
            for p in 0..9 * 11 {
                // fill pixels (NO_LABEL from the transform) carry no claim
                if let Transform::Rotate { .. } = t {
                    let src = ty.data()[p];
                    if src == NO_LABEL {
                        continue;
                    }
                }
                assert_eq!(from_probs.data()[p], ty.data()[p], "transform {t:?} pixel {p}");
            }
        }
    }

    #[test]
    fn median_examples() {
        assert_eq!(lower_median(&mut [0.7, 0.9, 0.95]).min(THRESHOLD_CAP), 0.9);
        assert_eq!(lower_median(&mut [0.5, 0.6, 0.7]).min(THRESHOLD_CAP), 0.6);
        // even count takes the lower middle
        assert_eq!(lower_median(&mut [0.1, 0.2, 0.3, 0.4]), 0.2);
    }

    #[test]
    fn image_thresholds_single_pixel_and_cap() {
        let prob = Tensor::new(vec![1, 2, 1, 1], vec![0.8, 0.2]).unwrap();
        let (p, valid) = image_thresholds(&prob).unwrap();
        assert_eq!(p[0], 0.8);
        assert!(valid[0]);
        assert!(!valid[1]);
        assert_eq!(p[1], THRESHOLD_CAP);

        let confident = Tensor::new(vec![1, 2, 1, 2], vec![0.95, 0.95, 0.05, 0.05]).unwrap();
        let (p, valid) = image_thresholds(&confident).unwrap();
        assert_eq!(p[0], THRESHOLD_CAP);
        assert!(valid[0]);
    }

    #[test]
    fn image_thresholds_match_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let prob = prob_map(3, 10, 10, &mut rng);
        let (p, valid) = image_thresholds(&prob).unwrap();
        let (arg, conf) = argmax_confidence(&prob).unwrap();
        for j in 0..3 {
            let mut pop: Vec<f64> =
                (0..100).filter(|&i| arg[i] == j as u8).map(|i| conf[i]).collect();
            if pop.is_empty() {
                assert!(!valid[j]);
                continue;
            }
            pop.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let med = pop[(pop.len() - 1) / 2];
            assert_eq!(p[j], med.min(THRESHOLD_CAP));
            assert!(valid[j]);
        }
    }

    #[test]
    fn dataset_thresholds_capped_and_complete() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let arch = crate::model::ArchConfig {
            widths: vec![4],
            num_classes: 3,
            ..Default::default()
        };
        let mut m = crate::model::init_model(&arch, 3).unwrap();
        let images: Vec<Tensor> = (0..3)
            .map(|_| {
                Tensor::new(
                    vec![1, 3, 6, 6],
                    (0..108).map(|_| rng.gen_range(0.0..1.0)).collect(),
                )
                .unwrap()
            })
            .collect();
        let p = dataset_thresholds(&mut m, &images).unwrap();
        assert_eq!(p.len(), 3);
        for v in &p {
            assert!(*v > 0.0 && *v <= THRESHOLD_CAP);
        }
        assert!(dataset_thresholds(&mut m, &[]).is_err());
    }

    #[test]
    fn ema_closed_forms() {
        let mut p = vec![0.9, 0.5];
        ema_update(&mut p, &[0.5, 0.7], &[true, true], 1.0).unwrap();
        assert_eq!(p, vec![0.9, 0.5]);
        ema_update(&mut p, &[0.5, 0.7], &[true, false], 0.99).unwrap();
        assert!((p[0] - 0.896).abs() < 1e-12);
        assert_eq!(p[1], 0.5);
        assert!(ema_update(&mut p, &[0.5, 0.7], &[true, true], 1.5).is_err());
    }

    #[test]
    fn ema_converges_geometrically() {
        let lambda = 0.9f64;
        let target = 0.4;
        let p0 = 0.85;
        let mut p = vec![p0];
        for t in 1..=30 {
            ema_update(&mut p, &[target], &[true], lambda).unwrap();
            let expect = lambda.powi(t) * (p0 - target) + target;
            assert!((p[0] - expect).abs() < 1e-12);
            // iterate stays between the endpoints
            assert!(p[0] >= target && p[0] <= p0);
        }
    }
}
