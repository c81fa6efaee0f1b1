//! Marker-majority classification.
//!
//! Every class owns a few marker words. An example is a bag of filler words
//! with a handful of markers mixed in; its clean label is the class whose
//! markers are most frequent (ties are re-drawn). A fraction `noise` of the
//! labels is then flipped to a different class, so the Bayes-optimal
//! accuracy is exactly `1 - noise`.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::tensor::Rng;

use super::{DataError, DatasetSplits, Result, TextExample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    /// Words per example, markers included.
    pub seq_len: usize,
    pub min_markers: usize,
    pub max_markers: usize,
    pub markers_per_class: usize,
    pub filler_words: usize,
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 2,
            train_size: 2000,
            dev_size: 500,
            test_size: 500,
            seq_len: 8,
            min_markers: 1,
            max_markers: 5,
            markers_per_class: 4,
            filler_words: 40,
            noise: 0.1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(DataError::Config(m.to_string()));
        if self.num_classes < 2 {
            return fail("synthetic task needs at least 2 classes");
        }
        if !(0.0..1.0).contains(&self.noise) {
            return fail("noise must lie in [0, 1)");
        }
        if self.min_markers == 0 || self.min_markers > self.max_markers {
            return fail("need 1 <= min_markers <= max_markers");
        }
        if self.max_markers > self.seq_len {
            return fail("max_markers exceeds seq_len");
        }
        if self.markers_per_class == 0 || self.filler_words == 0 {
            return fail("markers_per_class and filler_words must be positive");
        }
        if self.train_size == 0 {
            return fail("train_size must be positive");
        }
        Ok(())
    }

    /// Accuracy of the optimal classifier on this task.
    pub fn bayes_accuracy(&self) -> f64 {
        1.0 - self.noise
    }

    fn marker(&self, class: usize, j: usize) -> String {
        format!("c{class}m{j}")
    }
}

fn draw(spec: &SyntheticSpec, rng: &mut Rng) -> TextExample {
    loop {
        let m = spec.min_markers + rng.below(spec.max_markers - spec.min_markers + 1);
        let mut counts = vec![0usize; spec.num_classes];
        let mut words = Vec::with_capacity(spec.seq_len);
        for _ in 0..m {
            let c = rng.below(spec.num_classes);
            counts[c] += 1;
            words.push(spec.marker(c, rng.below(spec.markers_per_class)));
        }
        let top = *counts.iter().max().expect("at least two classes");
        if counts.iter().filter(|&&c| c == top).count() > 1 {
            continue;
        }
        let clean = counts.iter().position(|&c| c == top).expect("max exists");
        for _ in m..spec.seq_len {
            words.push(format!("w{}", rng.below(spec.filler_words)));
        }
        rng.shuffle(&mut words);
        let label = if rng.bernoulli(spec.noise) {
            (clean + 1 + rng.below(spec.num_classes - 1)) % spec.num_classes
        } else {
            clean
        };
        return TextExample {
            text_a: words.join(" "),
            text_b: None,
            label,
        };
    }
}

/// Generates disjoint train/dev/test splits. Identical `(spec, seed)` gives
/// identical splits.
pub fn make_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<DatasetSplits> {
    spec.validate()?;
    let mut rng = Rng::new(seed).fork("synthetic");
    let mut seen = HashSet::new();
    let mut split = |n: usize| -> Result<Vec<TextExample>> {
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n {
            attempts += 1;
            if attempts > 100 * n + 1000 {
                return Err(DataError::Config(
                    "cannot draw enough distinct examples; enlarge the vocabulary or seq_len"
                        .into(),
                ));
            }
            let ex = draw(spec, &mut rng);
            if seen.insert(ex.text_a.clone()) {
                out.push(ex);
            }
        }
        Ok(out)
    };
    let train = split(spec.train_size)?;
    let dev = split(spec.dev_size)?;
    let test = split(spec.test_size)?;
    DatasetSplits::new(train, dev, test, spec.num_classes)
}

/// Label the example would carry without noise.
#[cfg(test)]
fn clean_label(spec: &SyntheticSpec, text: &str) -> Option<usize> {
    let mut counts = vec![0usize; spec.num_classes];
    for w in text.split_whitespace() {
        if let Some(rest) = w.strip_prefix('c') {
            if let Some((c, _)) = rest.split_once('m') {
                counts[c.parse::<usize>().ok()?] += 1;
            }
        }
    }
    let top = *counts.iter().max()?;
    (counts.iter().filter(|&&c| c == top).count() == 1)
        .then(|| counts.iter().position(|&c| c == top))?
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(noise: f64) -> SyntheticSpec {
        SyntheticSpec {
            train_size: 400,
            dev_size: 200,
            test_size: 200,
            noise,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn same_seed_same_splits() {
        let a = make_synthetic(&small(0.1), 7).unwrap();
        let b = make_synthetic(&small(0.1), 7).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.dev, b.dev);
        assert_ne!(a.train, make_synthetic(&small(0.1), 8).unwrap().train);
    }

    #[test]
    fn splits_are_disjoint() {
        assert!(make_synthetic(&small(0.1), 3).unwrap().disjoint());
    }

    #[test]
    fn noiseless_labels_follow_the_majority_rule() {
        let s = small(0.0);
        let d = make_synthetic(&s, 1).unwrap();
        for e in d.train.iter().chain(&d.dev) {
            assert_eq!(clean_label(&s, &e.text_a), Some(e.label));
            assert_eq!(e.text_a.split_whitespace().count(), s.seq_len);
        }
    }

    #[test]
    fn noise_rate_matches_flip_fraction() {
        let s = SyntheticSpec {
            train_size: 4000,
            noise: 0.1,
            ..SyntheticSpec::default()
        };
        let d = make_synthetic(&s, 2).unwrap();
        let flipped = d
            .train
            .iter()
            .filter(|e| clean_label(&s, &e.text_a) != Some(e.label))
            .count() as f64
            / d.train.len() as f64;
        // Binomial(4000, 0.1) has standard deviation ~0.0047.
        assert!((flipped - 0.1).abs() < 0.02, "flip rate {flipped}");
        assert_eq!(s.bayes_accuracy(), 0.9);
    }

    #[test]
    fn inconsistent_specs_are_rejected() {
        for bad in [
            SyntheticSpec {
                num_classes: 1,
                ..small(0.0)
            },
            SyntheticSpec {
                noise: 1.0,
                ..small(0.0)
            },
            SyntheticSpec {
                max_markers: 20,
                ..small(0.0)
            },
            SyntheticSpec {
                min_markers: 0,
                ..small(0.0)
            },
        ] {
            assert!(
                matches!(make_synthetic(&bad, 0), Err(DataError::Config(_))),
                "{bad:?}"
            );
        }
    }
}
