//! Seeded synthetic block-sparse ensembles.
//!
//! `L` random fractions `r_l` (summing to one) fix both the nonzero block
//! sizes, `B_l = ceil(K r_l)` for `l < L` and `B_L = K - sum B_l`, and the
//! lengths of `L` contiguous super-blocks covering `0..n`. Each block is
//! placed at a uniform start inside its super-block. Nonzero values and
//! the entries of `A` are standard normal; the signal and the columns of
//! `A` are then scaled to unit l2 norm. Noise, when requested, is rescaled
//! so the realised SNR `20 log10(||Ax|| / ||w||)` is exactly the target.
//!
//! Every instance is a pure function of its [`EnsembleSpec`]; the random
//! stream is ChaCha20 seeded from `spec.seed`.

use nalgebra::{DMatrix, DVector};
use rand::distr::{Distribution, Open01};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::model::Problem;
use crate::{Error, Result};

/// Redraws allowed for degenerate partitions before giving up.
pub const MAX_REDRAWS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub l: usize,
    pub snr_db: Option<f64>,
    pub seed: u64,
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1 <= self.l && self.l <= self.k && self.k <= self.n) {
            return Err(Error::InvalidInput(format!(
                "need 1 <= L <= K <= n, got L={}, K={}, n={}",
                self.l, self.k, self.n
            )));
        }
        if self.m == 0 {
            return Err(Error::InvalidInput("m must be at least 1".into()));
        }
        if let Some(snr) = self.snr_db {
            if !snr.is_finite() {
                return Err(Error::InvalidInput(format!("snr_db must be finite, got {snr}")));
            }
        }
        Ok(())
    }
}

/// A planted block: `len` nonzeros starting at `start`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub start: usize,
    pub len: usize,
}

#[derive(Clone, Debug)]
pub struct Instance {
    /// Problem with truth attached; noise variance is `||w||^2 / m`, or zero
    /// for exact measurements.
    pub problem: Problem,
    pub block_layout: Vec<Block>,
    pub fractions: Vec<f64>,
    pub spec: EnsembleSpec,
}

impl Instance {
    pub fn truth(&self) -> &DVector<f64> {
        self.problem
            .truth()
            .expect("generated instances always carry their truth")
    }

    /// Realised `20 log10(||Ax|| / ||y - Ax||)`; infinite for exact data.
    pub fn measured_snr_db(&self) -> f64 {
        let clean = self.problem.a() * self.truth();
        let noise = self.problem.y() - &clean;
        20.0 * (clean.norm() / noise.norm()).log10()
    }
}

/// Block sizes from fractions: ceilings for all but the last block, which
/// closes the total to `k`. The last size may come out below one.
pub fn block_sizes(k: usize, fractions: &[f64]) -> Vec<i64> {
    let l = fractions.len();
    let mut sizes: Vec<i64> = fractions[..l - 1]
        .iter()
        .map(|r| (k as f64 * r).ceil() as i64)
        .collect();
    let used: i64 = sizes.iter().sum();
    sizes.push(k as i64 - used);
    sizes
}

/// Splits `0..n` into contiguous lengths proportional to `fractions` by
/// largest-remainder apportionment; the lengths sum to `n` exactly.
pub fn superblock_lengths(n: usize, fractions: &[f64]) -> Vec<usize> {
    let total: f64 = fractions.iter().sum();
    let quotas: Vec<f64> = fractions.iter().map(|r| n as f64 * r / total).collect();
    let mut lengths: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = lengths.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    // Largest remainder first; ties go to the lower index.
    order.sort_by(|&i, &j| {
        let ri = quotas[i] - quotas[i].floor();
        let rj = quotas[j] - quotas[j].floor();
        rj.total_cmp(&ri).then(i.cmp(&j))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        lengths[i] += 1;
    }
    lengths
}

fn draw_fractions<R: Rng + ?Sized>(l: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..l).map(|_| Open01.sample(rng)).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|r| r / sum).collect()
}

/// Draws block sizes and the fractions behind them, redrawing while the
/// last block would be empty.
pub fn draw_partition<R: Rng + ?Sized>(k: usize, l: usize, rng: &mut R) -> Result<(Vec<usize>, Vec<f64>)> {
    if !(1 <= l && l <= k) {
        return Err(Error::InvalidInput(format!("need 1 <= L <= K, got L={l}, K={k}")));
    }
    for _ in 0..MAX_REDRAWS {
        let fractions = draw_fractions(l, rng);
        let sizes = block_sizes(k, &fractions);
        if sizes.iter().all(|&b| b >= 1) {
            return Ok((sizes.into_iter().map(|b| b as usize).collect(), fractions));
        }
    }
    Err(Error::Generation(format!(
        "no valid partition of K={k} into L={l} blocks after {MAX_REDRAWS} draws"
    )))
}

/// Places block `l` uniformly inside super-block `l`.
pub fn place_blocks<R: Rng + ?Sized>(
    n: usize,
    sizes: &[usize],
    fractions: &[f64],
    rng: &mut R,
) -> Result<Vec<Block>> {
    if sizes.len() != fractions.len() || sizes.is_empty() {
        return Err(Error::InvalidInput(
            "sizes and fractions must be non-empty and of equal length".into(),
        ));
    }
    let lengths = superblock_lengths(n, fractions);
    let mut offset = 0;
    let mut layout = Vec::with_capacity(sizes.len());
    for (&size, &span) in sizes.iter().zip(&lengths) {
        if size > span {
            return Err(Error::Generation(format!(
                "block of size {size} does not fit super-block of length {span}"
            )));
        }
        let start = offset + rng.random_range(0..=span - size);
        layout.push(Block { start, len: size });
        offset += span;
    }
    Ok(layout)
}

fn partition_and_place<R: Rng + ?Sized>(spec: &EnsembleSpec, rng: &mut R) -> Result<(Vec<Block>, Vec<f64>)> {
    let mut last = None;
    for _ in 0..MAX_REDRAWS {
        let (sizes, fractions) = draw_partition(spec.k, spec.l, rng)?;
        match place_blocks(spec.n, &sizes, &fractions, rng) {
            Ok(layout) => return Ok((layout, fractions)),
            Err(e @ Error::Generation(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::Generation("placement failed".into())))
}

/// Generates the instance described by `spec`.
pub fn generate(spec: &EnsembleSpec) -> Result<Instance> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let (layout, fractions) = partition_and_place(spec, &mut rng)?;

    let mut x = DVector::zeros(spec.n);
    for block in &layout {
        for i in block.start..block.start + block.len {
            x[i] = StandardNormal.sample(&mut rng);
        }
    }
    let x_norm = x.norm();
    if x_norm == 0.0 {
        return Err(Error::Generation("drew an all-zero signal".into()));
    }
    x /= x_norm;

    let mut a = DMatrix::from_fn(spec.m, spec.n, |_, _| StandardNormal.sample(&mut rng));
    for mut col in a.column_iter_mut() {
        let norm = col.norm();
        col /= norm;
    }

    let clean = &a * &x;
    let (y, noise_variance) = match spec.snr_db {
        None => (clean, 0.0),
        Some(snr_db) => {
            let mut w: DVector<f64> =
                DVector::from_fn(spec.m, |_, _| StandardNormal.sample(&mut rng));
            let target = clean.norm() / 10f64.powf(snr_db / 20.0);
            w *= target / w.norm();
            let variance = w.norm_squared() / spec.m as f64;
            (clean + w, variance)
        }
    };

    let problem = Problem::new(a, y)?
        .with_noise_variance(noise_variance)?
        .with_truth(x)?;
    Ok(Instance {
        problem,
        block_layout: layout,
        fractions,
        spec: spec.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn spec(seed: u64) -> EnsembleSpec {
        EnsembleSpec {
            n: 100,
            m: 40,
            k: 25,
            l: 4,
            snr_db: None,
            seed,
        }
    }

    #[test]
    fn single_block_partition() {
        let (sizes, fractions) = draw_partition(25, 1, &mut rng(1)).unwrap();
        assert_eq!(sizes, vec![25]);
        assert_eq!(fractions, vec![1.0]);
    }

    #[test]
    fn ceiling_rule() {
        assert_eq!(block_sizes(4, &[0.3, 0.7]), vec![2, 2]);
        assert_eq!(block_sizes(10, &[0.25, 0.25, 0.5]), vec![3, 3, 4]);
        // The closing block can go non-positive; draw_partition redraws then.
        assert_eq!(block_sizes(3, &[0.34, 0.33, 0.33]), vec![2, 1, 0]);
    }

    #[test]
    fn partitions_close_to_k() {
        let mut r = rng(2);
        for _ in 0..500 {
            let (sizes, fractions) = draw_partition(25, 4, &mut r).unwrap();
            assert_eq!(sizes.iter().sum::<usize>(), 25);
            assert!(sizes.iter().all(|&b| b >= 1));
            assert!((fractions.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn impossible_partition_errors() {
        assert!(matches!(
            draw_partition(2, 3, &mut rng(3)),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn superblocks_apportion_exactly() {
        assert_eq!(superblock_lengths(10, &[0.25, 0.25, 0.5]), vec![3, 2, 5]);
        assert_eq!(superblock_lengths(7, &[1.0]), vec![7]);
        let mut r = rng(4);
        for _ in 0..200 {
            let f = draw_fractions(5, &mut r);
            assert_eq!(superblock_lengths(97, &f).iter().sum::<usize>(), 97);
        }
    }

    #[test]
    fn zero_slack_forces_starts() {
        let fractions = [0.2, 0.5, 0.3];
        let lengths = superblock_lengths(20, &fractions);
        let layout = place_blocks(20, &lengths, &fractions, &mut rng(5)).unwrap();
        let mut offset = 0;
        for (block, len) in layout.iter().zip(&lengths) {
            assert_eq!(block.start, offset);
            assert_eq!(block.len, *len);
            offset += len;
        }
    }

    #[test]
    fn single_block_start_covers_all_feasible_positions() {
        let mut r = rng(6);
        let mut seen = [false; 76];
        for _ in 0..20_000 {
            let layout = place_blocks(100, &[25], &[1.0], &mut r).unwrap();
            assert!(layout[0].start <= 75);
            seen[layout[0].start] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn oversized_block_errors() {
        let err = place_blocks(10, &[6, 1], &[0.5, 0.5], &mut rng(7));
        assert!(matches!(err, Err(Error::Generation(_))));
    }

    #[test]
    fn blocks_stay_inside_superblocks() {
        let mut r = rng(8);
        for _ in 0..10_000 {
            let (sizes, fractions) = draw_partition(25, 4, &mut r).unwrap();
            let Ok(layout) = place_blocks(100, &sizes, &fractions, &mut r) else {
                continue;
            };
            let lengths = superblock_lengths(100, &fractions);
            let mut offset = 0;
            for (block, span) in layout.iter().zip(&lengths) {
                assert!(block.start >= offset);
                assert!(block.start + block.len <= offset + span);
                offset += span;
            }
        }
    }

    #[test]
    fn generated_instance_invariants() {
        let inst = generate(&spec(7)).unwrap();
        let a = inst.problem.a();
        for col in a.column_iter() {
            assert!((col.norm() - 1.0).abs() < 1e-12);
        }
        let x = inst.truth();
        assert!((x.norm() - 1.0).abs() < 1e-12);
        let mut support = vec![false; 100];
        for b in &inst.block_layout {
            for s in &mut support[b.start..b.start + b.len] {
                *s = true;
            }
        }
        for i in 0..100 {
            assert_eq!(x[i] != 0.0, support[i]);
        }
        assert_eq!(x.iter().filter(|v| **v != 0.0).count(), 25);
        assert_eq!(inst.block_layout.iter().map(|b| b.len).sum::<usize>(), 25);
        assert!(inst.problem.is_noise_free());
        assert!((inst.problem.y() - a * x).amax() < 1e-15);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&spec(7)).unwrap();
        let b = generate(&spec(7)).unwrap();
        assert_eq!(a.problem, b.problem);
        assert_eq!(a.block_layout, b.block_layout);
    }

    #[test]
    fn snr_is_hit_exactly() {
        let s = EnsembleSpec {
            snr_db: Some(15.0),
            ..spec(9)
        };
        let inst = generate(&s).unwrap();
        assert!((inst.measured_snr_db() - 15.0).abs() < 1e-9);
        let w = inst.problem.y() - inst.problem.a() * inst.truth();
        let planted = inst.problem.noise_variance().unwrap();
        assert!((planted - w.norm_squared() / 40.0).abs() < 1e-15);
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = EnsembleSpec { l: 0, ..spec(1) };
        assert!(generate(&bad).is_err());
        let bad = EnsembleSpec { k: 101, ..spec(1) };
        assert!(generate(&bad).is_err());
        let bad = EnsembleSpec { m: 0, ..spec(1) };
        assert!(generate(&bad).is_err());
    }
}
