//! Binary-classification metrics over membership scores.
//!
//! All metrics assume "higher score means member" after orientation
//! normalization; [`oriented`] applies the per-attack direction flag.

use rand::Rng;

use crate::attacks::Orientation;
use crate::error::{Error, Result};
use crate::seeds;

fn check_classes(members: &[f64], nonmembers: &[f64]) -> Result<()> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::EmptyClass {
            members: members.len(),
            nonmembers: nonmembers.len(),
        });
    }
    Ok(())
}

/// Normalize scores so that higher always means member.
pub fn oriented(scores: &[f64], orientation: Orientation) -> Vec<f64> {
    match orientation {
        Orientation::HigherIsMember => scores.to_vec(),
        Orientation::LowerIsMember => scores.iter().map(|v| -v).collect(),
    }
}

/// Probability that a random member outscores a random nonmember, with
/// half credit for ties, computed by the rank statistic in O(n log n).
pub fn auc(members: &[f64], nonmembers: &[f64]) -> Result<f64> {
    check_classes(members, nonmembers)?;
    let n_m = members.len();
    let n_n = nonmembers.len();
    let mut all: Vec<(f64, bool)> = members
        .iter()
        .map(|&v| (v, true))
        .chain(nonmembers.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Sum of member ranks with ties sharing their average rank. Average
    // ranks are half-integers, so the arithmetic below is exact in f64
    // far beyond any realistic table size.
    let mut member_rank_sum = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i + 1;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = (i + j + 1) as f64 / 2.0; // ranks are 1-based
        member_rank_sum += avg_rank * all[i..j].iter().filter(|(_, m)| *m).count() as f64;
        i = j;
    }
    let wins = member_rank_sum - (n_m * (n_m + 1)) as f64 / 2.0;
    Ok(wins / (n_m as f64 * n_n as f64))
}

/// Brute-force pair-counting oracle for [`auc`]; quadratic, exact.
pub fn auc_by_pair_count(members: &[f64], nonmembers: &[f64]) -> Result<f64> {
    check_classes(members, nonmembers)?;
    let mut wins = 0.0f64;
    for &m in members {
        for &n in nonmembers {
            if m > n {
                wins += 1.0;
            } else if m == n {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (members.len() * nonmembers.len()) as f64)
}

/// [`auc`] with the attack's direction flag applied first.
pub fn auc_oriented(
    members: &[f64],
    nonmembers: &[f64],
    orientation: Orientation,
) -> Result<f64> {
    auc(&oriented(members, orientation), &oriented(nonmembers, orientation))
}

/// True-positive rate at a false-positive budget: the threshold is the
/// smallest score with at most `fpr` of nonmembers strictly above it
/// (no interpolation), and the result is the member fraction strictly
/// above that threshold.
pub fn tpr_at_fpr(members: &[f64], nonmembers: &[f64], fpr: f64) -> Result<f64> {
    check_classes(members, nonmembers)?;
    if !(fpr > 0.0 && fpr < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "fpr level must lie in (0, 1), got {fpr}"
        )));
    }
    let allowed = (fpr * nonmembers.len() as f64).floor() as usize;
    let mut descending = nonmembers.to_vec();
    descending.sort_by(|a, b| b.total_cmp(a));
    let threshold = descending[allowed];
    let hits = members.iter().filter(|&&m| m > threshold).count();
    Ok(hits as f64 / members.len() as f64)
}

/// [`tpr_at_fpr`] with the attack's direction flag applied first.
pub fn tpr_at_fpr_oriented(
    members: &[f64],
    nonmembers: &[f64],
    orientation: Orientation,
    fpr: f64,
) -> Result<f64> {
    tpr_at_fpr(&oriented(members, orientation), &oriented(nonmembers, orientation), fpr)
}

/// Seeded bootstrap of any two-sample metric: `n_boot` resamples with
/// replacement, classes resampled independently (members drawn first
/// each round), returning the mean and population standard deviation of
/// the per-resample values.
pub fn bootstrap<F>(
    members: &[f64],
    nonmembers: &[f64],
    n_boot: usize,
    seed: u64,
    metric: F,
) -> Result<(f64, f64)>
where
    F: Fn(&[f64], &[f64]) -> Result<f64>,
{
    check_classes(members, nonmembers)?;
    if n_boot == 0 {
        return Err(Error::InvalidConfig("n_boot must be at least 1".into()));
    }
    let mut rng = seeds::rng(seed);
    let mut values = Vec::with_capacity(n_boot);
    let mut m_draw = vec![0.0; members.len()];
    let mut n_draw = vec![0.0; nonmembers.len()];
    for _ in 0..n_boot {
        for slot in m_draw.iter_mut() {
            *slot = members[rng.gen_range(0..members.len())];
        }
        for slot in n_draw.iter_mut() {
            *slot = nonmembers[rng.gen_range(0..nonmembers.len())];
        }
        values.push(metric(&m_draw, &n_draw)?);
    }
    let mean = values.iter().sum::<f64>() / n_boot as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n_boot as f64;
    Ok((mean, var.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn auc_on_reference_tables() {
        // Perfect separation.
        assert_eq!(auc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        // All ties.
        assert_eq!(auc(&[1.0, 1.0], &[1.0, 1.0, 1.0]).unwrap(), 0.5);
        // Mixed table enumerated by hand: 3>2, 3>0, 1<2, 1>0.
        assert_eq!(auc(&[3.0, 1.0], &[2.0, 0.0]).unwrap(), 0.75);
        assert_eq!(auc_by_pair_count(&[3.0, 1.0], &[2.0, 0.0]).unwrap(), 0.75);
        // Total inversion.
        assert_eq!(auc(&[0.0], &[1.0]).unwrap(), 0.0);
    }

    #[test]
    fn empty_classes_are_rejected() {
        assert!(matches!(
            auc(&[], &[1.0]),
            Err(Error::EmptyClass { members: 0, nonmembers: 1 })
        ));
        assert!(tpr_at_fpr(&[1.0], &[], 0.1).is_err());
        assert!(bootstrap(&[], &[1.0], 10, 0, auc).is_err());
    }

    #[test]
    fn orientation_flips_scores_for_lower_is_member() {
        let m = [0.1, 0.2];
        let n = [0.8, 0.9];
        // Lower scores mean member: after orientation the member class wins.
        let a = auc_oriented(&m, &n, Orientation::LowerIsMember).unwrap();
        assert_eq!(a, 1.0);
        let t = tpr_at_fpr_oriented(&m, &n, Orientation::LowerIsMember, 0.5).unwrap();
        assert_eq!(t, 1.0);
    }

    #[test]
    fn tpr_threshold_enumeration() {
        // One nonmember allowed above threshold at fpr=0.5 with n=3?
        // floor(0.5*3)=1, threshold = 2nd largest nonmember.
        let members = [5.0, 4.0, 3.0];
        let nonmembers = [2.0, 1.0, 0.0];
        assert_eq!(tpr_at_fpr(&members, &nonmembers, 0.01).unwrap(), 1.0);
        // Overlapping classes: threshold moves with the budget.
        let m = [3.0, 1.5, 0.5];
        let n = [2.0, 1.0, 0.0];
        // fpr 0.1 → 0 allowed → threshold 2.0 → only 3.0 counted.
        assert_eq!(tpr_at_fpr(&m, &n, 0.1).unwrap(), 1.0 / 3.0);
        // fpr 0.34 → 1 allowed → threshold 1.0 → 3.0 and 1.5 counted.
        assert_eq!(tpr_at_fpr(&m, &n, 0.34).unwrap(), 2.0 / 3.0);
        // fpr 0.67 → 2 allowed → threshold 0.0 → all counted.
        assert_eq!(tpr_at_fpr(&m, &n, 0.67).unwrap(), 1.0);
        // Ties at the threshold are not counted as above it.
        assert_eq!(tpr_at_fpr(&[2.0, 2.0], &[2.0], 0.5).unwrap(), 0.0);
    }

    #[test]
    fn tpr_matches_rate_on_identical_distributions() {
        let mut rng = seeds::rng(97);
        let mut draw = || rand::Rng::gen_range(&mut rng, -1.0..1.0);
        let m: Vec<f64> = (0..10000).map(|_| draw()).collect();
        let n: Vec<f64> = (0..10000).map(|_| draw()).collect();
        let t = tpr_at_fpr(&m, &n, 0.1).unwrap();
        assert!((t - 0.1).abs() <= 0.02, "tpr {t}");
        let t01 = tpr_at_fpr(&m, &n, 0.01).unwrap();
        assert!((t01 - 0.01).abs() <= 0.02, "tpr {t01}");
    }

    #[test]
    fn bootstrap_is_deterministic_and_degenerates_correctly() {
        // Overlapping classes so resampling genuinely moves the value.
        let m = [3.0, 1.2, 2.0, 0.4];
        let n = [1.0, 2.5, 0.0];
        let a = bootstrap(&m, &n, 200, 11, auc).unwrap();
        let b = bootstrap(&m, &n, 200, 11, auc).unwrap();
        assert_eq!(a, b);
        let c = bootstrap(&m, &n, 200, 12, auc).unwrap();
        assert!(a != c);

        // One resample has zero spread.
        let (_, std1) = bootstrap(&m, &n, 1, 5, auc).unwrap();
        assert_eq!(std1, 0.0);

        // Perfect separation is invariant under resampling.
        let sep_m = [3.0, 2.5, 2.0, 1.5];
        let sep_n = [1.0, 0.5, 0.0];
        let (mean, std) = bootstrap(&sep_m, &sep_n, 100, 7, auc).unwrap();
        assert_eq!((mean, std), (1.0, 0.0));
    }

    proptest! {
        #[test]
        fn rank_auc_equals_pair_counting(
            members in proptest::collection::vec(-8i32..8, 1..200),
            nonmembers in proptest::collection::vec(-8i32..8, 1..200),
        ) {
            // Small integer grid forces heavy ties.
            let m: Vec<f64> = members.iter().map(|&v| v as f64 / 2.0).collect();
            let n: Vec<f64> = nonmembers.iter().map(|&v| v as f64 / 2.0).collect();
            let fast = auc(&m, &n).unwrap();
            let slow = auc_by_pair_count(&m, &n).unwrap();
            prop_assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
        }

        #[test]
        fn auc_antisymmetry_under_flip(
            members in proptest::collection::vec(-10i32..10, 1..60),
            nonmembers in proptest::collection::vec(-10i32..10, 1..60),
        ) {
            let m: Vec<f64> = members.iter().map(|&v| v as f64).collect();
            let n: Vec<f64> = nonmembers.iter().map(|&v| v as f64).collect();
            let plain = auc(&m, &n).unwrap();
            let flipped = auc_oriented(&m, &n, Orientation::LowerIsMember).unwrap();
            prop_assert!((plain + flipped - 1.0).abs() < 1e-12);
        }

        #[test]
        fn tpr_is_monotone_in_the_budget(
            members in proptest::collection::vec(-10i32..10, 1..50),
            nonmembers in proptest::collection::vec(-10i32..10, 1..50),
            budgets in proptest::collection::vec(0.01f64..0.99, 2..6),
        ) {
            let m: Vec<f64> = members.iter().map(|&v| v as f64).collect();
            let n: Vec<f64> = nonmembers.iter().map(|&v| v as f64).collect();
            let mut sorted = budgets.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut last = -1.0;
            for f in sorted {
                let t = tpr_at_fpr(&m, &n, f).unwrap();
                prop_assert!(t >= last);
                last = t;
            }
        }

        #[test]
        fn auc_stays_in_unit_interval(
            members in proptest::collection::vec(-100f64..100.0, 1..40),
            nonmembers in proptest::collection::vec(-100f64..100.0, 1..40),
        ) {
            let a = auc(&members, &nonmembers).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
