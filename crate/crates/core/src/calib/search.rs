//! Clip-range search minimizing quantization plus saturation loss.

use serde::{Deserialize, Serialize};

use super::stats::TensorStats;
use crate::error::{Error, Result};
use crate::tensor::{choose_qparams_from_range, round_half_away, QuantParams};

/// Candidate positions per clip end.
pub const CLIP_STEPS: usize = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClipLoss {
    /// Squared error of bin centers inside the representable range.
    pub quantization: f64,
    /// Squared error of bin centers clipped to the range ends.
    pub saturation: f64,
    pub total: f64,
}

/// Non-empty bins of a histogram as `(center, count)` pairs.
struct Mass {
    bins: Vec<(f64, f64)>,
}

impl Mass {
    fn new(stats: &TensorStats) -> Self {
        Self {
            bins: stats
                .histogram
                .iter()
                .enumerate()
                .filter(|(_, &c)| c > 0)
                .map(|(b, &c)| (stats.bin_center(b), c as f64))
                .collect(),
        }
    }

    fn loss(&self, q: QuantParams) -> ClipLoss {
        let (lo, hi) = q.representable_range();
        // bins are sorted by center, so the saturated ones sit at both ends
        let first = self.bins.partition_point(|&(c, _)| c < lo);
        let last = self.bins.partition_point(|&(c, _)| c <= hi);
        let mut sat = 0.0;
        for &(c, n) in &self.bins[..first] {
            sat += n * (lo - c) * (lo - c);
        }
        let mut quant = 0.0;
        let d = q.delta;
        for &(c, n) in &self.bins[first..last] {
            // same value as a quantize-dequantize round trip of an in-range value
            let e = d * round_half_away(c / d) as f64 - c;
            quant += n * e * e;
        }
        for &(c, n) in &self.bins[last..] {
            sat += n * (hi - c) * (hi - c);
        }
        ClipLoss {
            quantization: quant,
            saturation: sat,
            total: quant + sat,
        }
    }
}

/// Loss of quantizing the histogram with parameters chosen for
/// `[clip_min, clip_max]`.
pub fn loss_for_clip(stats: &TensorStats, clip_min: f64, clip_max: f64) -> Result<ClipLoss> {
    if !(clip_min.is_finite() && clip_max.is_finite()) || clip_min >= clip_max {
        return Err(Error::InvalidArgument(format!(
            "degenerate clip range [{clip_min}, {clip_max}]"
        )));
    }
    let q = choose_qparams_from_range(clip_min, clip_max)?;
    Ok(Mass::new(stats).loss(q))
}

/// Outcome of a clip search.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub qparams: QuantParams,
    pub clip_min: f64,
    pub clip_max: f64,
    /// Steps walked down from the maximum.
    pub max_steps: usize,
    /// Steps walked up from the minimum.
    pub min_steps: usize,
    pub loss: ClipLoss,
    pub evaluations: usize,
    /// True when the statistics had no usable range.
    pub degenerate: bool,
}

/// The fixed clip grid: `clip_max = max - i * step`, `clip_min = min + j * step`
/// with `step = (max - min) / 64`; pairs with `i + j >= 64` would cross.
struct Grid<'a> {
    stats: &'a TensorStats,
    mass: Mass,
    step: f64,
    memo: Vec<Option<ClipLoss>>,
    evaluations: usize,
}

impl<'a> Grid<'a> {
    fn new(stats: &'a TensorStats) -> Self {
        Self {
            stats,
            mass: Mass::new(stats),
            step: (stats.max - stats.min) / CLIP_STEPS as f64,
            memo: vec![None; CLIP_STEPS * CLIP_STEPS],
            evaluations: 0,
        }
    }

    fn clip(&self, i: usize, j: usize) -> (f64, f64) {
        let hi = if i == 0 {
            self.stats.max
        } else {
            self.stats.max - i as f64 * self.step
        };
        let lo = if j == 0 {
            self.stats.min
        } else {
            self.stats.min + j as f64 * self.step
        };
        (lo, hi)
    }

    fn qparams(&self, i: usize, j: usize) -> QuantParams {
        let (lo, hi) = self.clip(i, j);
        choose_qparams_from_range(lo, hi).expect("grid clips are finite and ordered")
    }

    fn loss(&mut self, i: usize, j: usize) -> f64 {
        if i + j >= CLIP_STEPS {
            return f64::INFINITY;
        }
        let k = i * CLIP_STEPS + j;
        if let Some(l) = self.memo[k] {
            return l.total;
        }
        let l = self.mass.loss(self.qparams(i, j));
        self.evaluations += 1;
        self.memo[k] = Some(l);
        l.total
    }

    fn result(&mut self, i: usize, j: usize) -> SearchResult {
        self.loss(i, j);
        let (lo, hi) = self.clip(i, j);
        SearchResult {
            qparams: self.qparams(i, j),
            clip_min: lo,
            clip_max: hi,
            max_steps: i,
            min_steps: j,
            loss: self.memo[i * CLIP_STEPS + j].expect("evaluated"),
            evaluations: self.evaluations,
            degenerate: false,
        }
    }
}

fn degenerate(stats: &TensorStats) -> Result<SearchResult> {
    let q = choose_qparams_from_range(stats.min, stats.max)?;
    let loss = if stats.count == 0 {
        ClipLoss::default()
    } else {
        Mass::new(stats).loss(q)
    };
    Ok(SearchResult {
        qparams: q,
        clip_min: stats.min,
        clip_max: stats.max,
        max_steps: 0,
        min_steps: 0,
        loss,
        evaluations: 0,
        degenerate: true,
    })
}

/// Best index along one axis; keeps `current` when it is among the minima,
/// otherwise takes the smallest minimizing index.
fn line_search(current: usize, mut f: impl FnMut(usize) -> f64) -> usize {
    let cur = f(current);
    let mut best = (cur, current);
    for k in 0..CLIP_STEPS {
        let l = f(k);
        if l < best.0 {
            best = (l, k);
        }
    }
    best.1
}

/// Coordinate descent over the clip grid starting from the full range:
/// alternately re-optimize the upper and the lower clip with the other held
/// fixed, until neither end moves.
pub fn greedy_search(stats: &TensorStats) -> Result<SearchResult> {
    if stats.is_degenerate() {
        return degenerate(stats);
    }
    let mut grid = Grid::new(stats);
    let (mut i, mut j) = (0, 0);
    loop {
        let ni = line_search(i, |k| grid.loss(k, j));
        let nj = line_search(j, |k| grid.loss(ni, k));
        if (ni, nj) == (i, j) {
            break;
        }
        (i, j) = (ni, nj);
    }
    Ok(grid.result(i, j))
}

pub fn greedy_search_qparams(stats: &TensorStats) -> Result<QuantParams> {
    Ok(greedy_search(stats)?.qparams)
}

/// Exhaustive evaluation of the whole clip grid; ties go to the smallest
/// `(max_steps, min_steps)`.
pub fn brute_force_search(stats: &TensorStats) -> Result<SearchResult> {
    if stats.is_degenerate() {
        return degenerate(stats);
    }
    let mut grid = Grid::new(stats);
    let mut best = (f64::INFINITY, 0, 0);
    for i in 0..CLIP_STEPS {
        for j in 0..CLIP_STEPS - i {
            let l = grid.loss(i, j);
            if l < best.0 {
                best = (l, i, j);
            }
        }
    }
    Ok(grid.result(best.1, best.2))
}

pub fn brute_force_qparams(stats: &TensorStats) -> Result<QuantParams> {
    Ok(brute_force_search(stats)?.qparams)
}
