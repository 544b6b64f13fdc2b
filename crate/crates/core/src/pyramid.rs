//! Bottom-up span features and the flat multi-scale span matrix.
//!
//! Level 1 holds the token features. Each row of level `l` is a linear
//! function of two adjacent rows of level `l - 1`, so row `i` of level `l`
//! describes the span of `l` tokens starting at `i`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Linear, ParameterStore, Var};

/// A span of `length` tokens starting at token `start` (0-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SpanIndex {
    pub length: usize,
    pub start: usize,
}

impl SpanIndex {
    /// Index of the last token, inclusive.
    pub fn end(&self) -> usize {
        self.start + self.length - 1
    }
}

pub fn effective_limit(n: usize, limit: usize) -> usize {
    limit.min(n)
}

/// Number of spans of length at most `limit` in a sentence of `n` tokens.
pub fn span_count(n: usize, limit: usize) -> usize {
    let l = effective_limit(n, limit);
    (2 * n + 1 - l) * l / 2
}

/// Bijection between spans and rows of the flat span matrix: level-major,
/// start ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpanIndexer {
    n: usize,
    limit: usize,
    offsets: Vec<usize>,
}

impl SpanIndexer {
    pub fn new(n: usize, limit: usize) -> Result<Self> {
        if n == 0 || limit == 0 {
            return Err(Error::InvalidArgument(format!(
                "span indexing needs at least one token and a limit of at least 1, got n={n}, limit={limit}"
            )));
        }
        let limit = effective_limit(n, limit);
        let mut offsets = Vec::with_capacity(limit + 1);
        let mut total = 0;
        for l in 1..=limit {
            offsets.push(total);
            total += n - l + 1;
        }
        offsets.push(total);
        Ok(SpanIndexer { n, limit, offsets })
    }

    pub fn num_tokens(&self) -> usize {
        self.n
    }

    /// Longest enumerated span length, `min(limit, n)`.
    pub fn limit(&self) -> usize {
        self.limit
    }

    pub fn len(&self) -> usize {
        self.offsets[self.limit]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, span: SpanIndex) -> bool {
        (1..=self.limit).contains(&span.length) && span.start + span.length <= self.n
    }

    pub fn to_flat(&self, span: SpanIndex) -> Result<usize> {
        if !self.contains(span) {
            return Err(Error::InvalidArgument(format!(
                "span (length {}, start {}) outside a {}-token sentence with limit {}",
                span.length, span.start, self.n, self.limit
            )));
        }
        Ok(self.offsets[span.length - 1] + span.start)
    }

    pub fn from_flat(&self, flat: usize) -> Result<SpanIndex> {
        if flat >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "flat span index {flat} out of range for {} spans",
                self.len()
            )));
        }
        let level = self.offsets.partition_point(|&o| o <= flat);
        Ok(SpanIndex {
            length: level,
            start: flat - self.offsets[level - 1],
        })
    }

    /// All spans in flat order.
    pub fn iter(&self) -> impl Iterator<Item = SpanIndex> + '_ {
        (1..=self.limit).flat_map(move |length| (0..=self.n - length).map(move |start| SpanIndex { length, start }))
    }
}

/// Span features for one sentence.
#[derive(Clone, Debug)]
pub struct SpanPyramid {
    /// Level `l` (index `l - 1`) has `n - l + 1` rows.
    pub levels: Vec<Var>,
    /// Level-major concatenation of all levels.
    pub flat: Var,
    pub indexer: SpanIndexer,
}

/// The linear maps that combine adjacent spans: one shared map, or one per
/// level when `per_level` is set.
#[derive(Clone, Debug)]
pub struct PyramidBuilder {
    combine: Vec<Linear>,
}

impl PyramidBuilder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        d: usize,
        limit: usize,
        per_level: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if limit == 0 {
            return Err(Error::Config("span_limit must be at least 1".into()));
        }
        let mut combine = Vec::new();
        if per_level {
            for l in 2..=limit {
                combine.push(Linear::new(store, &format!("pyramid.level{l}"), 2 * d, d, rng)?);
            }
        } else if limit > 1 {
            combine.push(Linear::new(store, "pyramid.combine", 2 * d, d, rng)?);
        }
        Ok(PyramidBuilder { combine })
    }

    pub fn attach(store: &ParameterStore, limit: usize, per_level: bool) -> Result<Self> {
        let mut combine = Vec::new();
        if per_level {
            for l in 2..=limit {
                combine.push(Linear::attach(store, &format!("pyramid.level{l}"))?);
            }
        } else if limit > 1 {
            combine.push(Linear::attach(store, "pyramid.combine")?);
        }
        Ok(PyramidBuilder { combine })
    }

    fn map_for(&self, level: usize) -> &Linear {
        if self.combine.len() == 1 {
            &self.combine[0]
        } else {
            &self.combine[level - 2]
        }
    }

    /// Builds levels `1..=min(limit, n)` from `n × d` token features.
    pub fn build(&self, g: &mut Graph, tokens: Var, limit: usize) -> Result<SpanPyramid> {
        let (n, d) = g.shape(tokens);
        let indexer = SpanIndexer::new(n, limit)?;
        let top_level = indexer.limit();
        if top_level > 1 && self.combine.len() != 1 && self.combine.len() < top_level - 1 {
            return Err(Error::Config(format!(
                "pyramid has maps for {} levels, {top_level} requested",
                self.combine.len() + 1
            )));
        }
        // [a; b]·W = a·W_top + b·W_bottom, which avoids materializing the
        // concatenated pairs
        let mut split = Vec::new();
        for (k, lin) in self.combine.iter().enumerate() {
            if lin.in_dim() != 2 * d || lin.out_dim() != d {
                return Err(Error::Config(format!(
                    "{} maps {} -> {}, token width is {d}",
                    lin.name(),
                    lin.in_dim(),
                    lin.out_dim()
                )));
            }
            if self.combine.len() > 1 && k + 2 > top_level {
                break;
            }
            let w = g.param(lin.weight());
            let top = g.slice_rows(w, 0, d);
            let bottom = g.slice_rows(w, d, d);
            let bias = lin
                .bias()
                .ok_or_else(|| Error::Config(format!("`{}` has no bias", lin.name())))?;
            let bias = g.param(bias);
            split.push((top, bottom, bias));
        }
        let mut levels = vec![tokens];
        for l in 2..=top_level {
            let prev = levels[l - 2];
            let rows = n - l + 1;
            let (top, bottom, bias) = if split.len() == 1 { split[0] } else { split[l - 2] };
            let left = g.slice_rows(prev, 0, rows);
            let right = g.slice_rows(prev, 1, rows);
            let a = g.matmul(left, top);
            let b = g.matmul(right, bottom);
            let sum = g.add(a, b);
            levels.push(g.add_row(sum, bias));
        }
        let flat = flatten_multiscale(g, &levels);
        Ok(SpanPyramid { levels, flat, indexer })
    }

    pub fn linear_for_level(&self, level: usize) -> Option<&Linear> {
        (level >= 2 && !self.combine.is_empty()).then(|| self.map_for(level))
    }
}

/// Level-major concatenation of pyramid levels.
pub fn flatten_multiscale(g: &mut Graph, levels: &[Var]) -> Var {
    if levels.len() == 1 {
        levels[0]
    } else {
        g.concat_rows(levels)
    }
}
