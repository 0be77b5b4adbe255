//! Negative-label mining and learnable-subset selection.
//!
//! Candidates from a lexicon are ranked by their nearest-InD-label cosine
//! similarity, ascending, so the front of the ranking is semantically far
//! from every in-distribution label. The default band skips the most
//! distant 5% (degenerate directions) before taking M labels; a plain tail
//! mode is kept behind the config flag.

use std::collections::BTreeSet;

use crate::clip::TextEncoder;
use crate::config::MiningBand;
use crate::embedding::LabelSpace;
use crate::error::{Error, Result};

/// Build the negative label set from a lexicon.
pub fn mine_negatives(
    ind_labels: &[String],
    lexicon: &[String],
    encoder: &dyn TextEncoder,
    m: usize,
    band: MiningBand,
) -> Result<LabelSpace> {
    let mut seen = BTreeSet::new();
    for word in lexicon {
        if !seen.insert(word.to_lowercase()) {
            return Err(Error::DuplicateLexiconEntry(word.clone()));
        }
    }

    let ind_fold: BTreeSet<String> = ind_labels.iter().map(|l| l.to_lowercase()).collect();
    let candidates: Vec<&String> = lexicon
        .iter()
        .filter(|w| !ind_fold.contains(&w.to_lowercase()))
        .collect();
    if candidates.len() < m {
        return Err(Error::LexiconTooSmall {
            available: candidates.len(),
            requested: m,
        });
    }

    let ind_embeds = ind_labels
        .iter()
        .map(|l| encoder.embed_label(l))
        .collect::<Result<Vec<_>>>()?;

    // Distance statistic: similarity to the nearest InD label.
    let mut ranked: Vec<(usize, f64)> = Vec::with_capacity(candidates.len());
    for (i, word) in candidates.iter().enumerate() {
        let e = encoder.embed_label(word)?;
        let mut nearest = f64::NEG_INFINITY;
        for ind in &ind_embeds {
            nearest = nearest.max(e.cosine(ind)?);
        }
        ranked.push((i, nearest));
    }
    // Stable sort keeps lexicon order on ties, making mining deterministic.
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1));

    let start = match band {
        MiningBand::PercentileBand => {
            let p5 = candidates.len() / 20;
            p5.min(candidates.len() - m)
        }
        MiningBand::Tail => 0,
    };
    let neg_labels: Vec<String> = ranked[start..start + m]
        .iter()
        .map(|&(i, _)| candidates[i].clone())
        .collect();
    LabelSpace::new(ind_labels.to_vec(), neg_labels)
}

/// Outcome of learnable-subset selection.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetReport {
    pub m_prime: usize,
    pub ratio: f64,
    pub ratio_warning: bool,
}

/// Mark exactly the negatives that at least one synthetic sample was
/// assigned to as learnable. Warns when M'/M strays far from one half.
pub fn select_learnable_subset<'a>(
    labels: &LabelSpace,
    assigned: impl IntoIterator<Item = &'a str>,
) -> Result<(LabelSpace, SubsetReport)> {
    let mut mask = vec![false; labels.num_neg()];
    for label in assigned {
        let idx = labels
            .neg_index(label)
            .ok_or_else(|| Error::UnknownNegativeLabel(label.to_string()))?;
        mask[idx] = true;
    }
    let m_prime = mask.iter().filter(|&&b| b).count();
    let ratio = if labels.num_neg() == 0 {
        0.0
    } else {
        m_prime as f64 / labels.num_neg() as f64
    };
    let ratio_warning = (ratio - 0.5).abs() > 0.2;
    if ratio_warning {
        log::warn!(
            "learnable subset is {m_prime}/{} negatives (ratio {ratio:.2}); \
             expected roughly half",
            labels.num_neg()
        );
    }
    let mut out = labels.clone();
    out.learnable_mask = mask;
    Ok((
        out,
        SubsetReport {
            m_prime,
            ratio,
            ratio_warning,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clip::FixedTextEncoder;
    use ndarray::array;

    fn circle_encoder(words: &[(&str, f64)]) -> FixedTextEncoder {
        // Places words on the unit circle at the given angle (radians).
        FixedTextEncoder::new(
            words
                .iter()
                .map(|(w, theta)| (w.to_string(), array![theta.cos(), theta.sin()])),
        )
    }

    #[test]
    fn only_candidate_is_selected() {
        let encoder = circle_encoder(&[("ind", 0.0), ("novel", 1.0)]);
        let ind = vec!["ind".to_string()];
        let lexicon = vec!["ind".to_string(), "novel".to_string()];
        let space =
            mine_negatives(&ind, &lexicon, &encoder, 1, MiningBand::Tail).unwrap();
        assert_eq!(space.neg_labels, vec!["novel".to_string()]);
    }

    #[test]
    fn angular_ranking_matches_hand_computation() {
        // InD at angle 0; candidates at increasing angles are decreasingly
        // similar. Tail selection must pick the farthest angles first.
        let encoder = circle_encoder(&[
            ("ind", 0.0),
            ("a", 0.3),
            ("b", 1.1),
            ("c", 2.0),
            ("d", 2.9),
        ]);
        let ind = vec!["ind".to_string()];
        let lexicon: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let space = mine_negatives(&ind, &lexicon, &encoder, 2, MiningBand::Tail).unwrap();
        assert_eq!(space.neg_labels, vec!["d".to_string(), "c".to_string()]);

        // The percentile band on 4 candidates starts at index 0 anyway.
        let band = mine_negatives(&ind, &lexicon, &encoder, 2, MiningBand::PercentileBand)
            .unwrap();
        assert_eq!(band.neg_labels, space.neg_labels);
    }

    #[test]
    fn percentile_band_skips_the_far_tail() {
        // 40 candidates at angles spread over (0, pi); p5 skips the two
        // most distant ones.
        let mut words = vec![("ind".to_string(), 0.0f64)];
        for i in 0..40 {
            words.push((format!("w{i:02}"), 0.05 + i as f64 * 0.07));
        }
        let encoder = FixedTextEncoder::new(
            words
                .iter()
                .map(|(w, theta)| (w.clone(), array![theta.cos(), theta.sin()])),
        );
        let ind = vec!["ind".to_string()];
        let lexicon: Vec<String> = (0..40).map(|i| format!("w{i:02}")).collect();
        let tail = mine_negatives(&ind, &lexicon, &encoder, 5, MiningBand::Tail).unwrap();
        let band =
            mine_negatives(&ind, &lexicon, &encoder, 5, MiningBand::PercentileBand).unwrap();
        assert_eq!(tail.neg_labels[0], "w39");
        assert_eq!(band.neg_labels[0], "w37");
        assert_eq!(tail.neg_labels[2..], band.neg_labels[..3]);
    }

    #[test]
    fn full_candidate_count_is_stable() {
        let encoder = circle_encoder(&[("ind", 0.0), ("x", 1.0), ("y", 2.0), ("z", 3.0)]);
        let ind = vec!["ind".to_string()];
        let lexicon: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
        let a = mine_negatives(&ind, &lexicon, &encoder, 3, MiningBand::PercentileBand).unwrap();
        let b = mine_negatives(&ind, &lexicon, &encoder, 3, MiningBand::PercentileBand).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.neg_labels.len(), 3);
    }

    #[test]
    fn duplicates_and_small_lexicons_error() {
        let encoder = circle_encoder(&[("ind", 0.0), ("x", 1.0)]);
        let ind = vec!["ind".to_string()];
        let dup = vec!["x".to_string(), "X".to_string()];
        assert!(matches!(
            mine_negatives(&ind, &dup, &encoder, 1, MiningBand::Tail),
            Err(Error::DuplicateLexiconEntry(_))
        ));
        let small = vec!["x".to_string()];
        assert!(matches!(
            mine_negatives(&ind, &small, &encoder, 2, MiningBand::Tail),
            Err(Error::LexiconTooSmall { .. })
        ));
    }

    #[test]
    fn mined_sets_are_disjoint_case_folded() {
        let encoder = circle_encoder(&[
            ("Panda", 0.0),
            ("panda", 0.1),
            ("bear", 1.0),
            ("kite", 2.0),
        ]);
        let ind = vec!["Panda".to_string()];
        let lexicon: Vec<String> =
            ["panda", "bear", "kite"].iter().map(|s| s.to_string()).collect();
        let space = mine_negatives(&ind, &lexicon, &encoder, 2, MiningBand::Tail).unwrap();
        assert!(!space.neg_labels.iter().any(|l| l.to_lowercase() == "panda"));
    }

    #[test]
    fn empty_manifest_gives_empty_mask_with_warning() {
        let labels = LabelSpace::new(
            vec!["a".into()],
            vec!["x".into(), "y".into()],
        )
        .unwrap();
        let (out, report) = select_learnable_subset(&labels, std::iter::empty()).unwrap();
        assert_eq!(out.num_learnable(), 0);
        assert!(report.ratio_warning);
        assert_eq!(report.m_prime, 0);
    }

    #[test]
    fn mask_matches_assigned_indices() {
        let labels = LabelSpace::new(
            vec!["a".into()],
            (0..10).map(|i| format!("n{i}")).collect(),
        )
        .unwrap();
        let assigned = ["n3", "n7", "n3"];
        let (out, report) =
            select_learnable_subset(&labels, assigned.iter().copied()).unwrap();
        assert_eq!(out.learnable_indices(), vec![3, 7]);
        assert_eq!(report.m_prime, 2);
    }

    #[test]
    fn mask_equals_set_union_oracle() {
        use rand::Rng;
        let mut rng = crate::seeding::module_rng(4, "mining-test");
        let labels = LabelSpace::new(
            vec!["a".into()],
            (0..25).map(|i| format!("n{i}")).collect(),
        )
        .unwrap();
        let assigned: Vec<String> = (0..500)
            .map(|_| format!("n{}", rng.random_range(0..12)))
            .collect();
        let (out, _) =
            select_learnable_subset(&labels, assigned.iter().map(|s| s.as_str())).unwrap();
        let union: BTreeSet<&str> = assigned.iter().map(|s| s.as_str()).collect();
        for (i, name) in labels.neg_labels.iter().enumerate() {
            assert_eq!(out.learnable_mask[i], union.contains(name.as_str()));
        }
    }

    #[test]
    fn unknown_assignment_errors() {
        let labels = LabelSpace::new(vec!["a".into()], vec!["x".into()]).unwrap();
        let err = select_learnable_subset(&labels, ["zebra"].iter().copied()).unwrap_err();
        assert!(matches!(err, Error::UnknownNegativeLabel(_)));
    }
}
