use mabsa::mcl::{crf_nll, BioLabel, CrfScores};
use mabsa::numerics::{Rng, Tape, Tensor};

pub const L: usize = 7;

pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

pub fn all_paths(n: usize) -> Vec<Vec<BioLabel>> {
    (0..L.pow(n as u32))
        .map(|mut code| {
            let mut path = vec![BioLabel::O; n];
            for t in (0..n).rev() {
                path[t] = BioLabel::from_index(code % L).unwrap();
                code /= L;
            }
            path
        })
        .collect()
}

pub struct RandomCrf {
    pub emissions: Vec<f64>,
    pub transitions: Vec<f64>,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

impl RandomCrf {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let mut draw = |len: usize| (0..len).map(|_| rng.normal(0.0, 1.0)).collect::<Vec<_>>();
        Self {
            emissions: draw(n * L),
            transitions: draw(L * L),
            start: draw(L),
            end: draw(L),
        }
    }

    pub fn scores(&self) -> CrfScores<'_> {
        CrfScores {
            transitions: &self.transitions,
            start: &self.start,
            end: &self.end,
        }
    }

    /// Direct path score, independent of the library's scorer.
    pub fn score(&self, path: &[BioLabel]) -> f64 {
        let mut s = self.start[path[0].index()] + self.end[path[path.len() - 1].index()];
        for t in 0..path.len() {
            s += self.emissions[t * L + path[t].index()];
            if t > 0 {
                s += self.transitions[path[t - 1].index() * L + path[t].index()];
            }
        }
        s
    }

    pub fn log_z(&self, n: usize) -> f64 {
        let scores: Vec<f64> = all_paths(n).iter().map(|p| self.score(p)).collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
    }
}

pub fn nll_of(crf: &RandomCrf, labels: &[BioLabel]) -> f64 {
    let mut tape = Tape::new();
    let e = tape.constant(Tensor::matrix(labels.len(), L, crf.emissions.clone()).unwrap());
    let t = tape.constant(Tensor::matrix(L, L, crf.transitions.clone()).unwrap());
    let s = tape.constant(Tensor::vector(crf.start.clone()).unwrap());
    let n = tape.constant(Tensor::vector(crf.end.clone()).unwrap());
    let l = crf_nll(&mut tape, e, labels, t, s, n).unwrap();
    tape.value(l).item()
}
