use crate::contrastive::dot;
use crate::contrastive::prototypes::PrototypeBank;
use crate::contrastive::queries::QuerySet;
use crate::error::{Error, Result};

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Pixel-to-prototype InfoNCE.
///
/// Each query of class `c` is pulled toward the class mean and pushed from
/// every member prototype of the other class. Per-class losses are means over
/// that class's queries, then averaged over the classes that have queries.
pub fn contrastive_loss(queries: &[QuerySet], bank: &PrototypeBank, tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::param(format!("tau must be positive, got {tau}")));
    }
    bank.validate()?;
    let dim = bank.channels();
    let mut total = 0f64;
    let mut classes = 0usize;
    for set in queries {
        if set.class_id > 1 {
            return Err(Error::param(format!("class_id must be 0 or 1, got {}", set.class_id)));
        }
        if set.is_empty() {
            continue;
        }
        let positive = &bank.class(set.class_id).mean;
        let negatives = &bank.class(1 - set.class_id).members;
        let mut sum = 0f64;
        let mut logits = Vec::with_capacity(negatives.len() + 1);
        for z in set.iter() {
            if z.len() != dim {
                return Err(Error::shape(format!("query has dimension {}, bank has {dim}", z.len())));
            }
            logits.clear();
            let pos = dot(z, positive) / tau;
            logits.push(pos);
            logits.extend(negatives.iter().map(|(_, n)| dot(z, n) / tau));
            sum += log_sum_exp(&logits) - pos;
        }
        total += sum / set.len() as f64;
        classes += 1;
    }
    if classes == 0 {
        return Ok(0.0);
    }
    let loss = total / classes as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("contrastive loss".into()));
    }
    Ok(loss.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrastive::normalize;
    use crate::contrastive::prototypes::{ClassPrototypes, Slot};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        normalize(&v).unwrap()
    }

    fn bank(bg: Vec<Vec<f64>>, fg: Vec<Vec<f64>>, bg_mean: Vec<f64>, fg_mean: Vec<f64>) -> PrototypeBank {
        let bg_members = bg.into_iter().enumerate().map(|(k, v)| (if k == 0 { Slot::PseudoBackground } else { Slot::BackgroundCluster(k - 1) }, v)).collect();
        let fg_slots = [Slot::SourceForeground, Slot::TargetLabelForeground, Slot::PseudoForeground];
        let fg_members = fg.into_iter().zip(fg_slots).map(|(v, s)| (s, v)).collect();
        PrototypeBank::from_classes(
            ClassPrototypes { mean: bg_mean, members: bg_members },
            ClassPrototypes { mean: fg_mean, members: fg_members },
            0,
            1000,
        )
        .unwrap()
    }

    fn set(class_id: u8, easy: Vec<Vec<f64>>, hard: Vec<Vec<f64>>) -> QuerySet {
        QuerySet { class_id, easy_pixels: vec![0; easy.len()], hard_pixels: vec![0; hard.len()], easy, hard }
    }

    /// The loss written term by term, without any rearrangement.
    fn oracle(queries: &[QuerySet], bank: &PrototypeBank, tau: f64) -> f64 {
        let mut total = 0.0;
        let mut classes = 0;
        for q in queries {
            if q.is_empty() {
                continue;
            }
            let pos_proto = if q.class_id == 1 { &bank.foreground.mean } else { &bank.background.mean };
            let negs = if q.class_id == 1 { &bank.background.members } else { &bank.foreground.members };
            let mut s = 0.0;
            for z in q.easy.iter().chain(&q.hard) {
                let num = (z.iter().zip(pos_proto).map(|(a, b)| a * b).sum::<f64>() / tau).exp();
                let mut den = num;
                for (_, n) in negs {
                    den += (z.iter().zip(n).map(|(a, b)| a * b).sum::<f64>() / tau).exp();
                }
                s += -(num / den).ln();
            }
            total += s / (q.easy.len() + q.hard.len()) as f64;
            classes += 1;
        }
        total / classes as f64
    }

    #[test]
    fn closed_form_unit_case() {
        let b = bank(vec![vec![0.0, 1.0]], vec![vec![1.0, 0.0]], vec![0.0, 1.0], vec![1.0, 0.0]);
        let q = set(1, vec![vec![1.0, 0.0]], vec![]);
        let loss = contrastive_loss(&[q], &b, 1.0).unwrap();
        assert!((loss - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((loss - 0.31326168751822286).abs() < 1e-9);
    }

    #[test]
    fn no_negatives_gives_zero() {
        let b = bank(vec![], vec![vec![1.0, 0.0]], vec![0.0, 1.0], vec![1.0, 0.0]);
        let q = set(1, vec![vec![0.6, 0.8], vec![1.0, 0.0]], vec![vec![0.0, 1.0]]);
        assert_eq!(contrastive_loss(&[q], &b, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn matches_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let c = rng.random_range(2..7);
            let b = bank(
                (0..3).map(|_| unit(&mut rng, c)).collect(),
                (0..rng.random_range(1..4)).map(|_| unit(&mut rng, c)).collect(),
                unit(&mut rng, c),
                unit(&mut rng, c),
            );
            let qs: Vec<QuerySet> = (0..2u8)
                .map(|class| {
                    let ne = rng.random_range(0..5);
                    let nh = rng.random_range(0..4);
                    set(class, (0..ne).map(|_| unit(&mut rng, c)).collect(), (0..nh).map(|_| unit(&mut rng, c)).collect())
                })
                .collect();
            if qs.iter().all(|q| q.is_empty()) {
                continue;
            }
            let tau = rng.random_range(0.1..1.5);
            let got = contrastive_loss(&qs, &b, tau).unwrap();
            assert!((got - oracle(&qs, &b, tau)).abs() < 1e-9);
        }
    }

    #[test]
    fn finite_at_small_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = bank((0..3).map(|_| unit(&mut rng, 8)).collect(), (0..3).map(|_| unit(&mut rng, 8)).collect(), unit(&mut rng, 8), unit(&mut rng, 8));
        let q = set(0, (0..64).map(|_| unit(&mut rng, 8)).collect(), vec![]);
        let loss = contrastive_loss(std::slice::from_ref(&q), &b, 0.05).unwrap();
        assert!(loss.is_finite() && loss >= 0.0);
        // the same ratio scaled by a huge common factor would overflow the naive form
        let tiny = contrastive_loss(&[q], &b, 1e-3).unwrap();
        assert!(tiny.is_finite());
    }

    #[test]
    fn invariant_to_ordering() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bg: Vec<Vec<f64>> = (0..3).map(|_| unit(&mut rng, 4)).collect();
        let fg: Vec<Vec<f64>> = (0..3).map(|_| unit(&mut rng, 4)).collect();
        let (bm, fm) = (unit(&mut rng, 4), unit(&mut rng, 4));
        let easy: Vec<Vec<f64>> = (0..6).map(|_| unit(&mut rng, 4)).collect();
        let a = contrastive_loss(&[set(1, easy.clone(), vec![])], &bank(bg.clone(), fg.clone(), bm.clone(), fm.clone()), 0.5).unwrap();
        let mut rev_easy = easy;
        rev_easy.reverse();
        let mut rev_bg = bg;
        rev_bg.reverse();
        let b = contrastive_loss(&[set(1, rev_easy, vec![])], &bank(rev_bg, fg, bm, fm), 0.5).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn closer_positive_lowers_loss() {
        let neg = vec![vec![0.0, 1.0]];
        let z = vec![1.0, 0.0];
        let mut last = f64::INFINITY;
        for angle in [1.2f64, 0.8, 0.4, 0.0] {
            let mean = vec![angle.cos(), angle.sin()];
            let b = bank(neg.clone(), vec![mean.clone()], vec![0.0, 1.0], mean);
            let loss = contrastive_loss(&[set(1, vec![z.clone()], vec![])], &b, 0.5).unwrap();
            assert!(loss < last);
            last = loss;
        }
    }

    #[test]
    fn rejects_bad_tau() {
        let b = bank(vec![vec![0.0, 1.0]], vec![vec![1.0, 0.0]], vec![0.0, 1.0], vec![1.0, 0.0]);
        for tau in [0.0, -1.0, f64::NAN] {
            assert!(contrastive_loss(&[], &b, tau).is_err());
        }
    }
}
