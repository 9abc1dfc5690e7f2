use super::EvalError;

/// `a` ranks ahead of `b`: higher score first, then lower row index.
#[inline]
pub(crate) fn ranks_before(a: (usize, f64), b: (usize, f64)) -> bool {
    match a.1.total_cmp(&b.1) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => a.0 < b.0,
    }
}

/// Bounded accumulator keeping the `k` best `(index, score)` pairs in rank order.
#[derive(Debug, Clone)]
pub struct TopK {
    k: usize,
    items: Vec<(usize, f64)>,
}

impl TopK {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::with_capacity(k.min(1024)),
        }
    }

    pub fn push(&mut self, index: usize, score: f64) {
        let cand = (index, score);
        if self.items.len() == self.k {
            match self.items.last() {
                Some(&worst) if ranks_before(cand, worst) => {
                    self.items.pop();
                }
                _ => return,
            }
        }
        let pos = self.items.partition_point(|&x| ranks_before(x, cand));
        self.items.insert(pos, cand);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn into_sorted(self) -> Vec<(usize, f64)> {
        self.items
    }
}

/// The `k` highest-scoring candidates, best first; ties go to the lower index.
/// `mask[i] == false` excludes fact `i`. Returns every candidate when fewer than `k` exist.
pub fn top_k(scores: &[f64], k: usize, mask: Option<&[bool]>) -> Result<Vec<(usize, f64)>, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidK(0));
    }
    let mut acc = TopK::new(k);
    for (i, &s) in scores.iter().enumerate() {
        if mask.is_none_or(|m| m[i]) {
            acc.push(i, s);
        }
    }
    if acc.is_empty() {
        return Err(EvalError::EmptyCandidates);
    }
    Ok(acc.into_sorted())
}
