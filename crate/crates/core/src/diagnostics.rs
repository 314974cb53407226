//! Agreement statistics over routing iterations and heatmap export.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::routing::RoutingState;
use crate::tensor::Tensor;

/// Assignment probabilities at one routing iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct AgreementSnapshot {
    /// 1-based.
    pub iteration: usize,
    /// `[L, N]`, averaged over the selected positions.
    pub mean: Tensor,
    /// `[J, L, N]` for the selected positions, when requested.
    pub per_position: Option<Tensor>,
}

fn dims2(c: &Tensor) -> Result<(usize, usize)> {
    match *c.shape() {
        [l, n] => Ok((l, n)),
        ref s => Err(Error::Shape {
            op: "agreement matrix",
            lhs: s.to_vec(),
            rhs: vec![2],
        }),
    }
}

impl AgreementSnapshot {
    /// Builds one snapshot per recorded iteration of `state`. `positions`
    /// selects rows of the trace (e.g. non-padding tokens); `None` keeps all.
    pub fn from_state(
        state: &RoutingState,
        positions: Option<&[usize]>,
        keep_positions: bool,
    ) -> Result<Vec<AgreementSnapshot>> {
        state
            .iteration_trace
            .iter()
            .enumerate()
            .map(|(t, c)| Self::from_assignments(t + 1, c, positions, keep_positions))
            .collect()
    }

    /// `c` is `[R, L, N]`.
    pub fn from_assignments(
        iteration: usize,
        c: &Tensor,
        positions: Option<&[usize]>,
        keep_positions: bool,
    ) -> Result<AgreementSnapshot> {
        let [r, l, n] = *c.shape() else {
            return Err(Error::Shape {
                op: "assignment trace",
                lhs: c.shape().to_vec(),
                rhs: vec![3],
            });
        };
        let all: Vec<usize> = (0..r).collect();
        let rows = positions.unwrap_or(&all);
        if rows.is_empty() {
            return Err(Error::Contract("no positions selected".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&p| p >= r) {
            return Err(Error::Contract(format!("position {bad} out of range for {r}")));
        }
        let block = l * n;
        let mut mean = vec![0.0; block];
        let mut kept = Vec::with_capacity(if keep_positions { rows.len() * block } else { 0 });
        for &p in rows {
            let src = &c.data()[p * block..(p + 1) * block];
            mean.iter_mut().zip(src).for_each(|(m, v)| *m += v);
            if keep_positions {
                kept.extend_from_slice(src);
            }
        }
        let k = rows.len() as f64;
        mean.iter_mut().for_each(|m| *m /= k);
        Ok(AgreementSnapshot {
            iteration,
            mean: Tensor::new([l, n], mean)?,
            per_position: if keep_positions {
                Some(Tensor::new([rows.len(), l, n], kept)?)
            } else {
                None
            },
        })
    }

    /// Per-position `[L, N]` slices; empty when they were not kept.
    pub fn positions(&self) -> Vec<Tensor> {
        let Some(pp) = &self.per_position else {
            return Vec::new();
        };
        let (j, l, n) = (pp.shape()[0], pp.shape()[1], pp.shape()[2]);
        (0..j)
            .map(|p| {
                Tensor::new([l, n], pp.data()[p * l * n..(p + 1) * l * n].to_vec())
                    .expect("slice of an [L, N] block")
            })
            .collect()
    }
}

/// `−(1/L) Σ_l Σ_n C ln C` in nats, with `0 ln 0 = 0`.
pub fn entropy(c: &Tensor) -> Result<f64> {
    let (l, _) = dims2(c)?;
    let s: f64 = c
        .data()
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum();
    Ok(-s / l as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Diversity {
    /// Mean cosine distance over all column pairs.
    pub value: f64,
    /// Set when some column had zero norm; its pairs contributed 0.
    pub zero_column: bool,
}

/// Mean over pairs `i < j` of `1 − cos(C_i, C_j)`, where `C_n` is column `n`.
pub fn diversity(c: &Tensor) -> Result<Diversity> {
    let (l, n) = dims2(c)?;
    if n < 2 {
        return Err(Error::Contract(format!("diversity needs N >= 2, got {n}")));
    }
    let col = |j: usize| (0..l).map(move |i| c.data()[i * n + j]);
    let sq: Vec<f64> = (0..n).map(|j| col(j).map(|v| v * v).sum()).collect();
    let mut total = 0.0;
    let mut zero_column = false;
    for i in 0..n {
        for j in i + 1..n {
            if sq[i] == 0.0 || sq[j] == 0.0 {
                zero_column = true;
                continue;
            }
            let dot: f64 = col(i).zip(col(j)).map(|(a, b)| a * b).sum();
            // Identical columns give exactly 1, since sqrt(x * x) == x.
            let cos = dot / (sq[i] * sq[j]).sqrt();
            total += 1.0 - cos.clamp(-1.0, 1.0);
        }
    }
    Ok(Diversity {
        value: total / (n * (n - 1) / 2) as f64,
        zero_column,
    })
}

/// Entropy and diversity of one iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationStats {
    pub iteration: usize,
    /// Of the position-averaged matrix.
    pub entropy: f64,
    pub diversity: f64,
    /// Means of the per-position values; equal to the above when positions
    /// were not kept.
    pub position_entropy: f64,
    pub position_diversity: f64,
}

pub fn iteration_stats(snapshots: &[AgreementSnapshot]) -> Result<Vec<IterationStats>> {
    snapshots
        .iter()
        .map(|s| {
            let entropy = entropy(&s.mean)?;
            let diversity = diversity(&s.mean)?.value;
            let pos = s.positions();
            let (pe, pd) = if pos.is_empty() {
                (entropy, diversity)
            } else {
                let mut e = 0.0;
                let mut d = 0.0;
                for c in &pos {
                    e += self::entropy(c)?;
                    d += self::diversity(c)?.value;
                }
                (e / pos.len() as f64, d / pos.len() as f64)
            };
            Ok(IterationStats {
                iteration: s.iteration,
                entropy,
                diversity,
                position_entropy: pe,
                position_diversity: pd,
            })
        })
        .collect()
}

pub const STATS_CSV_HEADER: &str = "iteration,entropy,diversity,position_entropy,position_diversity";

pub fn stats_csv(stats: &[IterationStats]) -> String {
    let mut s = format!("{STATS_CSV_HEADER}\n");
    for r in stats {
        let _ = writeln!(
            s,
            "{},{:.9},{:.9},{:.9},{:.9}",
            r.iteration, r.entropy, r.diversity, r.position_entropy, r.position_diversity
        );
    }
    s
}

/// `L` lines of `N` comma-separated values with six decimals.
pub fn heatmap_csv(c: &Tensor) -> Result<String> {
    let (_, n) = dims2(c)?;
    let mut s = String::new();
    for row in c.data().chunks(n.max(1)) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    Ok(s)
}

/// Binary 8-bit PGM, `N` wide and `L` high; darker means higher agreement.
pub fn heatmap_pgm(c: &Tensor) -> Result<Vec<u8>> {
    let (l, n) = dims2(c)?;
    let max = c.data().iter().copied().fold(0.0, f64::max);
    let mut out = format!("P5\n{n} {l}\n255\n").into_bytes();
    out.extend(c.data().iter().map(|&v| {
        if max > 0.0 {
            (255.0 * (1.0 - v / max)).round().clamp(0.0, 255.0) as u8
        } else {
            255
        }
    }));
    Ok(out)
}

/// Writes `agreement_iter{t}.csv` and `.pgm` into `dir`.
pub fn export_heatmap(snapshot: &AgreementSnapshot, dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    let stem = format!("agreement_iter{}", snapshot.iteration);
    let csv = dir.join(format!("{stem}.csv"));
    let pgm = dir.join(format!("{stem}.pgm"));
    std::fs::write(&csv, heatmap_csv(&snapshot.mean)?)?;
    std::fs::write(&pgm, heatmap_pgm(&snapshot.mean)?)?;
    Ok((csv, pgm))
}

/// Writes the per-position matrices as `agreement_iter{t}_positions.csv`,
/// one block of `L` lines per position with a `position,layer,...` prefix.
pub fn export_positions(snapshot: &AgreementSnapshot, dir: impl AsRef<Path>) -> Result<Option<PathBuf>> {
    let pos = snapshot.positions();
    if pos.is_empty() {
        return Ok(None);
    }
    let mut s = String::new();
    for (j, c) in pos.iter().enumerate() {
        for (l, line) in heatmap_csv(c)?.lines().enumerate() {
            let _ = writeln!(s, "{j},{l},{line}");
        }
    }
    let path = dir
        .as_ref()
        .join(format!("agreement_iter{}_positions.csv", snapshot.iteration));
    std::fs::write(&path, s)?;
    Ok(Some(path))
}

/// Reads a heatmap CSV back into an `[L, N]` tensor.
pub fn read_heatmap_csv(text: &str) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (i, line) in text.lines().filter(|l| !l.is_empty()).enumerate() {
        let cells = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Contract(format!("heatmap line {}: {e}", i + 1)))?;
        if *width.get_or_insert(cells.len()) != cells.len() {
            return Err(Error::Contract(format!("heatmap line {} has {} cells", i + 1, cells.len())));
        }
        data.extend(cells);
        rows += 1;
    }
    Tensor::new([rows, width.unwrap_or(0)], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_and_one_hot_entropy() {
        let u = Tensor::full([3, 4], 0.25);
        assert!((entropy(&u).unwrap() - 4f64.ln()).abs() < 1e-15);
        let one_hot = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(entropy(&one_hot).unwrap(), 0.0);
        let d = diversity(&one_hot).unwrap();
        assert_eq!(d.value, 1.0);
        assert!(!d.zero_column);
    }

    #[test]
    fn zero_columns_are_flagged() {
        let c = Tensor::new([2, 3], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let d = diversity(&c).unwrap();
        assert!(d.zero_column);
        assert_eq!(d.value, 0.0);
        assert!(diversity(&Tensor::ones([2, 1])).is_err());
    }

    #[test]
    fn pgm_marks_the_peak_darkest() {
        let c = Tensor::new([1, 3], vec![0.0, 1.0, 0.5]).unwrap();
        let pgm = heatmap_pgm(&c).unwrap();
        assert_eq!(&pgm[..11], b"P5\n3 1\n255\n");
        assert_eq!(&pgm[11..], &[255, 0, 128]);
    }

    #[test]
    fn snapshot_averages_selected_positions() {
        let c = Tensor::new([3, 1, 2], vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5]).unwrap();
        let s = AgreementSnapshot::from_assignments(2, &c, Some(&[0, 1]), true).unwrap();
        assert_eq!(s.mean.data(), &[0.5, 0.5]);
        assert_eq!(s.positions().len(), 2);
        assert!(AgreementSnapshot::from_assignments(1, &c, Some(&[3]), false).is_err());
    }
}
