use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::{DatasetSplit, OutfitRecord, RecordFiles};
use crate::error::{config_err, Result};
use crate::rng::{substream, tags};

pub(crate) fn record_files(split: &str, rec: &OutfitRecord) -> RecordFiles {
    let dir = format!("{split}/{}", rec.id);
    RecordFiles {
        items: (0..rec.n_items()).map(|k| format!("{dir}/item_{k}.png")).collect(),
        masks: (0..rec.n_items()).map(|k| format!("{dir}/mask_{k}.png")).collect(),
        meta: format!("{dir}/meta.json"),
    }
}

/// Seeded shuffle, then the first `floor(ratio * n)` records train.
pub fn split_dataset(records: Vec<OutfitRecord>, ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if records.is_empty() {
        return config_err("cannot split an empty record list");
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return config_err(format!("split ratio {ratio} must lie in (0, 1)"));
    }
    let n_train = (ratio * records.len() as f64).floor() as usize;
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut substream(seed, tags::SPLIT, 0));

    let mut slots: Vec<Option<OutfitRecord>> = records.into_iter().map(Some).collect();
    let mut take = |i: usize| slots[i].take().expect("indices are a permutation");
    let train: Vec<_> = order[..n_train].iter().map(|&i| take(i)).collect();
    let test: Vec<_> = order[n_train..].iter().map(|&i| take(i)).collect();

    let mut manifest = BTreeMap::new();
    for (name, part) in [("train", &train), ("test", &test)] {
        for rec in part {
            manifest.insert(rec.id.clone(), record_files(name, rec));
        }
    }
    Ok(DatasetSplit { train, test, seed, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_records;
    use std::collections::HashSet;

    fn stub(n: usize) -> Vec<OutfitRecord> {
        (0..n)
            .map(|i| OutfitRecord { id: format!("r{i}"), items: vec![], silhouettes: vec![], likes: None })
            .collect()
    }

    #[test]
    fn paper_scale_sizes() {
        let s = split_dataset(stub(20_000), 0.8, 1).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (16_000, 4_000));
    }

    #[test]
    fn small_sizes_and_disjointness() {
        let s = split_dataset(stub(10), 0.8, 3).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (8, 2));
        let train: HashSet<_> = s.train.iter().map(|r| r.id.clone()).collect();
        assert!(s.test.iter().all(|r| !train.contains(&r.id)));
        assert_eq!(s.manifest.len(), 10);
    }

    #[test]
    fn deterministic_by_seed() {
        let recs = generate_records(2, 12, 16, 4).unwrap();
        let a = split_dataset(recs.clone(), 0.8, 5).unwrap();
        let b = split_dataset(recs.clone(), 0.8, 5).unwrap();
        assert_eq!(a, b);
        let c = split_dataset(recs, 0.8, 6).unwrap();
        assert_ne!(
            a.train.iter().map(|r| &r.id).collect::<Vec<_>>(),
            c.train.iter().map(|r| &r.id).collect::<Vec<_>>()
        );
    }

    #[test]
    fn rejects_bad_input() {
        assert!(split_dataset(vec![], 0.8, 0).is_err());
        assert!(split_dataset(stub(4), 1.0, 0).is_err());
        assert!(split_dataset(stub(4), 0.0, 0).is_err());
    }
}
