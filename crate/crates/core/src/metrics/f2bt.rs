use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Compatibility scores `[method][outfit]`, all methods on the same outfits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub methods: Vec<String>,
    pub scores: Vec<Vec<f64>>,
}

impl ScoreTable {
    pub fn new(methods: Vec<String>, scores: Vec<Vec<f64>>) -> Result<Self> {
        let t = Self { methods, scores };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.len() != self.scores.len() {
            return shape_err(format!("{} method names for {} score rows", self.methods.len(), self.scores.len()));
        }
        if self.scores.len() < 2 {
            return Err(Error::Input("a tournament needs at least 2 methods".into()));
        }
        let n = self.scores[0].len();
        if n == 0 {
            return Err(Error::Input("a tournament needs at least 1 outfit".into()));
        }
        if self.scores.iter().any(|row| row.len() != n) {
            return shape_err("ragged score table: methods scored on different outfit counts");
        }
        Ok(())
    }

    pub fn n_outfits(&self) -> usize {
        self.scores.first().map_or(0, Vec::len)
    }

    /// One row per outfit, one column per method.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["outfit".to_string()];
        header.extend(self.methods.iter().cloned());
        out.write_record(&header)?;
        for o in 0..self.n_outfits() {
            let mut row = vec![o.to_string()];
            row.extend(self.scores.iter().map(|s| s[o].to_string()));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Per method, the number of outfits on which its score strictly exceeds
/// every other method's score. Ties award nobody.
pub fn f2bt(table: &ScoreTable) -> Result<Vec<usize>> {
    table.validate()?;
    let m = table.scores.len();
    let mut wins = vec![0usize; m];
    for o in 0..table.n_outfits() {
        let mut best = 0;
        for i in 1..m {
            if table.scores[i][o] > table.scores[best][o] {
                best = i;
            }
        }
        let top = table.scores[best][o];
        if (0..m).all(|i| i == best || table.scores[i][o] < top) {
            wins[best] += 1;
        }
    }
    Ok(wins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn table(scores: Vec<Vec<f64>>) -> ScoreTable {
        let methods = (0..scores.len()).map(|i| format!("m{i}")).collect();
        ScoreTable::new(methods, scores).unwrap()
    }

    fn brute_force(t: &ScoreTable) -> Vec<usize> {
        let m = t.scores.len();
        (0..m)
            .map(|i| {
                (0..t.n_outfits())
                    .filter(|&o| (0..m).filter(|&j| j != i).all(|j| t.scores[i][o] > t.scores[j][o]))
                    .count()
            })
            .collect()
    }

    #[test]
    fn two_method_example() {
        let t = table(vec![vec![0.9, 0.8, 0.1], vec![0.5, 0.9, 0.05]]);
        assert_eq!(f2bt(&t).unwrap(), vec![2, 1]);
    }

    #[test]
    fn full_ties_award_nobody() {
        let t = table(vec![vec![0.3; 5]; 3]);
        assert_eq!(f2bt(&t).unwrap(), vec![0, 0, 0]);
        // A tie for first between two methods, with a third below.
        let t = table(vec![vec![1.0], vec![1.0], vec![0.0]]);
        assert_eq!(f2bt(&t).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn rejects_malformed_tables() {
        assert!(ScoreTable::new(vec!["a".into(), "b".into()], vec![vec![1.0, 2.0], vec![1.0]]).is_err());
        assert!(ScoreTable::new(vec!["a".into()], vec![vec![1.0]]).is_err());
        assert!(ScoreTable::new(vec!["a".into(), "b".into()], vec![vec![], vec![]]).is_err());
    }

    #[test]
    fn matches_brute_force_on_random_tables() {
        let mut rng = seeded(2024);
        for _ in 0..1000 {
            let m = rng.gen_range(2..6);
            let n = rng.gen_range(1..30);
            // Coarse values make ties common.
            let scores = (0..m).map(|_| (0..n).map(|_| rng.gen_range(0..5) as f64).collect()).collect();
            let t = table(scores);
            let got = f2bt(&t).unwrap();
            assert_eq!(got, brute_force(&t));
            assert!(got.iter().sum::<usize>() <= n);
        }
    }

    #[test]
    fn csv_layout() {
        let t = table(vec![vec![0.5, 1.0], vec![0.25, 2.0]]);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "outfit,m0,m1\n0,0.5,0.25\n1,1,2\n");
    }

    proptest! {
        #[test]
        fn wins_never_exceed_outfits(scores in prop::collection::vec(prop::collection::vec(-3i32..3, 7), 2..5)) {
            let t = table(scores.into_iter().map(|r| r.into_iter().map(f64::from).collect()).collect());
            prop_assert!(f2bt(&t).unwrap().iter().sum::<usize>() <= 7);
        }
    }
}
