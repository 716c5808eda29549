use std::fmt;

/// A set of event ids drawn from `0..n`.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct EventSet {
    n: usize,
    bits: Vec<u64>,
}

fn words(n: usize) -> usize {
    n.div_ceil(64).max(1)
}

impl EventSet {
    pub fn empty(n: usize) -> Self {
        EventSet {
            n,
            bits: vec![0; words(n)],
        }
    }

    pub fn full(n: usize) -> Self {
        let mut s = Self::empty(n);
        for i in 0..n {
            s.insert(i);
        }
        s
    }

    pub fn from_iter(n: usize, it: impl IntoIterator<Item = usize>) -> Self {
        let mut s = Self::empty(n);
        for i in it {
            s.insert(i);
        }
        s
    }

    pub fn universe(&self) -> usize {
        self.n
    }

    pub fn insert(&mut self, i: usize) {
        assert!(i < self.n, "event {i} outside universe {}", self.n);
        self.bits[i / 64] |= 1 << (i % 64);
    }

    pub fn contains(&self, i: usize) -> bool {
        i < self.n && self.bits[i / 64] & (1 << (i % 64)) != 0
    }

    pub fn len(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|w| *w == 0)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(move |i| self.contains(*i))
    }

    pub fn union(&self, o: &EventSet) -> EventSet {
        self.zip(o, |a, b| a | b)
    }

    pub fn intersection(&self, o: &EventSet) -> EventSet {
        self.zip(o, |a, b| a & b)
    }

    pub fn difference(&self, o: &EventSet) -> EventSet {
        self.zip(o, |a, b| a & !b)
    }

    fn zip(&self, o: &EventSet, f: impl Fn(u64, u64) -> u64) -> EventSet {
        assert_eq!(self.n, o.n, "event universes differ");
        EventSet {
            n: self.n,
            bits: self
                .bits
                .iter()
                .zip(&o.bits)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        }
    }
}

impl fmt::Debug for EventSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

/// A binary relation over event ids `0..n`, stored as a dense bit matrix.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Relation {
    n: usize,
    w: usize,
    rows: Vec<u64>,
}

impl Relation {
    pub fn empty(n: usize) -> Self {
        let w = words(n);
        Relation {
            n,
            w,
            rows: vec![0; n * w],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut r = Self::empty(n);
        for i in 0..n {
            r.insert(i, i);
        }
        r
    }

    /// `[S]`: the identity restricted to `s`.
    pub fn identity_on(s: &EventSet) -> Self {
        let mut r = Self::empty(s.universe());
        for i in s.iter() {
            r.insert(i, i);
        }
        r
    }

    /// `A * B`: every pair with source in `a` and target in `b`.
    pub fn product(a: &EventSet, b: &EventSet) -> Self {
        assert_eq!(a.universe(), b.universe(), "event universes differ");
        let mut r = Self::empty(a.universe());
        for i in a.iter() {
            let row = r.row_mut(i);
            row.copy_from_slice(&b.bits);
        }
        r
    }

    pub fn from_pairs(n: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut r = Self::empty(n);
        for (a, b) in pairs {
            r.insert(a, b);
        }
        r
    }

    pub fn universe(&self) -> usize {
        self.n
    }

    fn row(&self, i: usize) -> &[u64] {
        &self.rows[i * self.w..(i + 1) * self.w]
    }

    fn row_mut(&mut self, i: usize) -> &mut [u64] {
        &mut self.rows[i * self.w..(i + 1) * self.w]
    }

    pub fn insert(&mut self, a: usize, b: usize) {
        assert!(
            a < self.n && b < self.n,
            "pair ({a},{b}) outside universe {}",
            self.n
        );
        self.rows[a * self.w + b / 64] |= 1 << (b % 64);
    }

    pub fn contains(&self, a: usize, b: usize) -> bool {
        a < self.n && b < self.n && self.rows[a * self.w + b / 64] & (1 << (b % 64)) != 0
    }

    pub fn len(&self) -> usize {
        self.rows.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.iter().all(|w| *w == 0)
    }

    /// Successors of `a`.
    pub fn successors(&self, a: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(move |b| self.contains(a, *b))
    }

    /// All pairs in row-major order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n).flat_map(move |a| self.successors(a).map(move |b| (a, b)))
    }

    pub fn domain(&self) -> EventSet {
        EventSet::from_iter(
            self.n,
            (0..self.n).filter(|a| self.row(*a).iter().any(|w| *w != 0)),
        )
    }

    pub fn union(&self, o: &Relation) -> Relation {
        self.zip(o, |a, b| a | b)
    }

    pub fn intersection(&self, o: &Relation) -> Relation {
        self.zip(o, |a, b| a & b)
    }

    pub fn difference(&self, o: &Relation) -> Relation {
        self.zip(o, |a, b| a & !b)
    }

    fn zip(&self, o: &Relation, f: impl Fn(u64, u64) -> u64) -> Relation {
        assert_eq!(self.n, o.n, "event universes differ");
        Relation {
            n: self.n,
            w: self.w,
            rows: self
                .rows
                .iter()
                .zip(&o.rows)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        }
    }

    pub fn is_subset(&self, o: &Relation) -> bool {
        self.rows.iter().zip(&o.rows).all(|(a, b)| a & !b == 0)
    }

    pub fn inverse(&self) -> Relation {
        Relation::from_pairs(self.n, self.pairs().map(|(a, b)| (b, a)))
    }

    /// `self ; o`.
    pub fn compose(&self, o: &Relation) -> Relation {
        assert_eq!(self.n, o.n, "event universes differ");
        let mut out = Relation::empty(self.n);
        for a in 0..self.n {
            for m in self.successors(a).collect::<Vec<_>>() {
                let src: Vec<u64> = o.row(m).to_vec();
                for (d, s) in out.row_mut(a).iter_mut().zip(src) {
                    *d |= s;
                }
            }
        }
        out
    }

    /// `self^+`.
    pub fn plus(&self) -> Relation {
        let mut r = self.clone();
        for k in 0..self.n {
            let rk: Vec<u64> = r.row(k).to_vec();
            for i in 0..self.n {
                if r.contains(i, k) {
                    for (d, s) in r.row_mut(i).iter_mut().zip(&rk) {
                        *d |= *s;
                    }
                }
            }
        }
        r
    }

    /// `self^*`.
    pub fn star(&self) -> Relation {
        self.plus().union(&Relation::identity(self.n))
    }

    pub fn is_irreflexive(&self) -> bool {
        (0..self.n).all(|i| !self.contains(i, i))
    }

    pub fn is_acyclic(&self) -> bool {
        self.plus().is_irreflexive()
    }

    /// Re-indexes into a larger universe, keeping ids.
    pub fn widen(&self, n: usize) -> Relation {
        assert!(n >= self.n);
        Relation::from_pairs(n, self.pairs())
    }
}

impl fmt::Debug for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.pairs()).finish()
    }
}
