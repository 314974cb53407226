//! Synthetic sequence-to-sequence tasks and padded batches.

use rand::Rng;
use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// First id available to content tokens.
pub const FIRST_TOKEN: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Copy,
    Reverse,
    /// Swaps each adjacent pair of tokens and maps every token through a
    /// fixed permutation of the content vocabulary.
    SwapTranslate,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Copy => "copy",
            Task::Reverse => "reverse",
            Task::SwapTranslate => "swap-translate",
        }
    }

    /// Target sequence for `src`, without BOS/EOS.
    pub fn target(self, src: &[usize], vocab: usize) -> Vec<usize> {
        match self {
            Task::Copy => src.to_vec(),
            Task::Reverse => src.iter().rev().copied().collect(),
            Task::SwapTranslate => {
                let content = vocab - FIRST_TOKEN;
                (0..src.len())
                    .map(|i| {
                        let j = if i % 2 == 0 { i + 1 } else { i - 1 };
                        let tok = src[if j < src.len() { j } else { i }];
                        FIRST_TOKEN + (content - 1 - (tok - FIRST_TOKEN) + 3) % content
                    })
                    .collect()
            }
        }
    }
}

/// Sequence lengths and vocabulary shared by the generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskShape {
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl TaskShape {
    pub fn sample_source<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let len = rng.random_range(self.min_len..=self.max_len);
        (0..len)
            .map(|_| rng.random_range(FIRST_TOKEN..self.vocab))
            .collect()
    }
}

/// Padded batch of `B` examples.
///
/// `tgt_in` is `BOS` followed by the target and `tgt_out` is the target
/// followed by `EOS`, so both have the same length.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    /// `[B × src_len]`, row-major.
    pub src: Vec<usize>,
    pub tgt_in: Vec<usize>,
    pub tgt_out: Vec<usize>,
    pub src_mask: Vec<bool>,
    pub tgt_mask: Vec<bool>,
}

impl Batch {
    pub fn from_pairs(pairs: &[(Vec<usize>, Vec<usize>)]) -> Batch {
        let size = pairs.len();
        let src_len = pairs.iter().map(|p| p.0.len()).max().unwrap_or(0);
        let tgt_len = pairs.iter().map(|p| p.1.len() + 1).max().unwrap_or(0);
        let mut b = Batch {
            size,
            src_len,
            tgt_len,
            src: vec![PAD; size * src_len],
            tgt_in: vec![PAD; size * tgt_len],
            tgt_out: vec![PAD; size * tgt_len],
            src_mask: vec![false; size * src_len],
            tgt_mask: vec![false; size * tgt_len],
        };
        for (i, (s, t)) in pairs.iter().enumerate() {
            for (k, &tok) in s.iter().enumerate() {
                b.src[i * src_len + k] = tok;
                b.src_mask[i * src_len + k] = true;
            }
            b.tgt_in[i * tgt_len] = BOS;
            for (k, &tok) in t.iter().enumerate() {
                b.tgt_in[i * tgt_len + k + 1] = tok;
                b.tgt_out[i * tgt_len + k] = tok;
            }
            b.tgt_out[i * tgt_len + t.len()] = EOS;
            for k in 0..=t.len() {
                b.tgt_mask[i * tgt_len + k] = true;
            }
        }
        b
    }

    pub fn sample<R: Rng + ?Sized>(
        task: Task,
        shape: &TaskShape,
        size: usize,
        rng: &mut R,
    ) -> Batch {
        let pairs: Vec<_> = (0..size)
            .map(|_| {
                let s = shape.sample_source(rng);
                let t = task.target(&s, shape.vocab);
                (s, t)
            })
            .collect();
        Batch::from_pairs(&pairs)
    }

    pub fn target_tokens(&self) -> usize {
        self.tgt_mask.iter().filter(|&&m| m).count()
    }

    /// Keeps only the examples at `rows`, in that order.
    pub fn select(&self, rows: &[usize]) -> Batch {
        let pick = |v: &[usize], w: usize| {
            rows.iter()
                .flat_map(|&r| v[r * w..(r + 1) * w].to_vec())
                .collect()
        };
        let pick_m = |v: &[bool], w: usize| {
            rows.iter()
                .flat_map(|&r| v[r * w..(r + 1) * w].to_vec())
                .collect()
        };
        Batch {
            size: rows.len(),
            src_len: self.src_len,
            tgt_len: self.tgt_len,
            src: pick(&self.src, self.src_len),
            tgt_in: pick(&self.tgt_in, self.tgt_len),
            tgt_out: pick(&self.tgt_out, self.tgt_len),
            src_mask: pick_m(&self.src_mask, self.src_len),
            tgt_mask: pick_m(&self.tgt_mask, self.tgt_len),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn task_targets() {
        let src = [3, 4, 5, 6, 7];
        assert_eq!(Task::Copy.target(&src, 10), src.to_vec());
        assert_eq!(Task::Reverse.target(&src, 10), vec![7, 6, 5, 4, 3]);
        // content vocab 7: v -> (6 - v + 3) mod 7, after the pair swap
        let t = Task::SwapTranslate.target(&src, 10);
        assert_eq!(
            t,
            vec![
                FIRST_TOKEN + 1,
                FIRST_TOKEN + 2,
                FIRST_TOKEN + 6,
                FIRST_TOKEN,
                FIRST_TOKEN + 5
            ]
        );
    }

    #[test]
    fn swap_translate_is_a_bijection_on_tokens() {
        let vocab = 20;
        let mut seen = vec![false; vocab];
        for v in FIRST_TOKEN..vocab {
            let t = Task::SwapTranslate.target(&[v], vocab)[0];
            assert!((FIRST_TOKEN..vocab).contains(&t));
            assert!(!seen[t]);
            seen[t] = true;
        }
    }

    #[test]
    fn batches_are_padded_and_shifted() {
        let b = Batch::from_pairs(&[(vec![5, 6], vec![6, 5]), (vec![7], vec![7])]);
        assert_eq!((b.src_len, b.tgt_len), (2, 3));
        assert_eq!(b.src, vec![5, 6, 7, PAD]);
        assert_eq!(b.tgt_in, vec![BOS, 6, 5, BOS, 7, PAD]);
        assert_eq!(b.tgt_out, vec![6, 5, EOS, 7, EOS, PAD]);
        assert_eq!(b.tgt_mask, vec![true, true, true, true, true, false]);
        assert_eq!(b.target_tokens(), 5);
        assert_eq!(b.select(&[1]).src, vec![7, PAD]);
    }

    #[test]
    fn sampling_respects_shape() {
        let shape = TaskShape {
            vocab: 12,
            min_len: 2,
            max_len: 5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = Batch::sample(Task::Reverse, &shape, 32, &mut rng);
        assert!(b.src_len <= 5 && b.tgt_len <= 6);
        assert!(b
            .src
            .iter()
            .all(|&t| t == PAD || (FIRST_TOKEN..12).contains(&t)));
    }
}
