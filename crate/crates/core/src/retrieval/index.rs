//! Exact nearest-neighbor retrieval over unit descriptors, Recall@k, and
//! the descriptor DB file (magic "TDSC", little-endian u32 count and dim,
//! then per row: u32 place-id, u32 image-id, f32 values).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Descriptor;

use super::dataset::GroundTruth;

pub const DESCRIPTOR_MAGIC: &[u8; 4] = b"TDSC";

/// Searchable set of unit descriptors with `(place, image)` ids.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorIndex {
    ids: Vec<(u32, u32)>,
    rows: Vec<Descriptor<f32>>,
}

impl DescriptorIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[(u32, u32)] {
        &self.ids
    }

    pub fn rows(&self) -> &[Descriptor<f32>] {
        &self.rows
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map(|r| r.dim()).unwrap_or(0)
    }
}

/// Build an index; every row must be unit-norm (checked to 1e-5) and ids
/// must align one-to-one with descriptors.
pub fn build_index(
    descriptors: Vec<Descriptor<f32>>,
    ids: Vec<(u32, u32)>,
) -> Result<DescriptorIndex> {
    if descriptors.len() != ids.len() {
        return Err(Error::Usage(format!(
            "{} descriptors but {} ids",
            descriptors.len(),
            ids.len()
        )));
    }
    if let Some(first) = descriptors.first() {
        let dim = first.dim();
        if descriptors.iter().any(|d| d.dim() != dim) {
            return Err(Error::Dimension("descriptor widths differ".into()));
        }
    }
    for (i, d) in descriptors.iter().enumerate() {
        if (d.l2_norm() - 1.0).abs() > 1e-5 {
            return Err(Error::Numeric(format!(
                "row {i} is not unit-norm ({})",
                d.l2_norm()
            )));
        }
    }
    Ok(DescriptorIndex { ids, rows: descriptors })
}

/// Ranked ids by descending cosine similarity (dot product of unit
/// vectors); ties broken by lower insertion index.
pub fn search(
    index: &DescriptorIndex,
    query: &Descriptor<f32>,
    top_k: usize,
) -> Result<Vec<(u32, u32)>> {
    if index.is_empty() {
        return Err(Error::Usage("search on an empty index".into()));
    }
    if top_k == 0 || top_k > index.len() {
        return Err(Error::Parameter(format!(
            "top_k {top_k} outside 1..={}",
            index.len()
        )));
    }
    if query.dim() != index.dim() {
        return Err(Error::Dimension(format!(
            "query width {} does not match index width {}",
            query.dim(),
            index.dim()
        )));
    }
    let mut order: Vec<(usize, f64)> = index
        .rows
        .iter()
        .map(|r| r.dot(query))
        .enumerate()
        .collect();
    order.sort_by(|(ia, sa), (ib, sb)| {
        sb.partial_cmp(sa)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(ia.cmp(ib))
    });
    Ok(order[..top_k].iter().map(|&(i, _)| index.ids[i]).collect())
}

/// Fraction of queries whose top-k ranking contains any correct reference.
pub fn recall_at_k(
    rankings: &[((u32, u32), Vec<(u32, u32)>)],
    ground_truth: &GroundTruth,
    k: usize,
) -> Result<f64> {
    if rankings.is_empty() {
        return Err(Error::Usage("recall over an empty query set".into()));
    }
    let mut hits = 0usize;
    for (query, ranked) in rankings {
        let refs = ground_truth.get(query).ok_or_else(|| {
            Error::Data(format!("query {query:?} missing from ground truth"))
        })?;
        if refs.is_empty() {
            return Err(Error::Data(format!(
                "query {query:?} has no ground-truth references"
            )));
        }
        let top = &ranked[..k.min(ranked.len())];
        if top.iter().any(|id| refs.contains(id)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / rankings.len() as f64)
}

/// Write the descriptor DB file.
pub fn write_descriptor_db(path: &Path, index: &DescriptorIndex) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(DESCRIPTOR_MAGIC)?;
    f.write_all(&(index.len() as u32).to_le_bytes())?;
    f.write_all(&(index.dim() as u32).to_le_bytes())?;
    for (id, row) in index.ids.iter().zip(&index.rows) {
        f.write_all(&id.0.to_le_bytes())?;
        f.write_all(&id.1.to_le_bytes())?;
        for v in row.values() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Read a descriptor DB file back into an index.
pub fn read_descriptor_db(path: &Path) -> Result<DescriptorIndex> {
    let mut f = BufReader::new(File::open(path)?);
    let mut head = [0u8; 12];
    f.read_exact(&mut head).map_err(|e| truncated(path, e))?;
    if &head[..4] != DESCRIPTOR_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic, expected \"TDSC\"",
            path.display()
        )));
    }
    let count = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let mut ids = Vec::with_capacity(count);
    let mut rows = Vec::with_capacity(count);
    let mut row_buf = vec![0u8; 8 + 4 * dim];
    for _ in 0..count {
        f.read_exact(&mut row_buf).map_err(|e| truncated(path, e))?;
        let place = u32::from_le_bytes(row_buf[0..4].try_into().unwrap());
        let image = u32::from_le_bytes(row_buf[4..8].try_into().unwrap());
        let values: Vec<f32> = row_buf[8..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        ids.push((place, image));
        rows.push(Descriptor::from_values(values).map_err(|e| {
            Error::Format(format!("{}: row is not unit-norm ({e})", path.display()))
        })?);
    }
    Ok(DescriptorIndex { ids, rows })
}

fn truncated(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format(format!("{}: truncated descriptor DB", path.display()))
    } else {
        Error::Io(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Prng;

    fn unit(values: Vec<f32>) -> Descriptor<f32> {
        let norm = values.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        Descriptor::from_values(values.iter().map(|v| (*v as f64 / norm) as f32).collect())
            .unwrap()
    }

    #[test]
    fn self_match_ranks_first() {
        let rows = vec![unit(vec![1.0, 0.0]), unit(vec![0.6, 0.8]), unit(vec![0.0, 1.0])];
        let index = build_index(rows.clone(), vec![(0, 0), (1, 0), (2, 0)]).unwrap();
        let ranked = search(&index, &rows[1], 3).unwrap();
        assert_eq!(ranked[0], (1, 0));
    }

    #[test]
    fn orthonormal_pair_example() {
        let e1 = unit(vec![1.0, 0.0]);
        let e2 = unit(vec![0.0, 1.0]);
        let index = build_index(vec![e1, e2.clone()], vec![(0, 0), (1, 0)]).unwrap();
        assert_eq!(search(&index, &e2, 2).unwrap(), vec![(1, 0), (0, 0)]);
    }

    #[test]
    fn ranking_matches_brute_force_sort() {
        let mut prng = Prng::new(80);
        let dim = 8;
        let rows: Vec<Descriptor<f32>> = (0..100)
            .map(|_| {
                let v: Vec<f32> = (0..dim).map(|_| prng.normal() as f32).collect();
                unit(v)
            })
            .collect();
        let ids: Vec<(u32, u32)> = (0..100).map(|i| (i as u32, 0)).collect();
        let index = build_index(rows.clone(), ids.clone()).unwrap();
        let query = unit((0..dim).map(|_| prng.normal() as f32).collect());
        let ranked = search(&index, &query, 100).unwrap();

        // Independent oracle: repeated argmax scan over the similarities.
        let mut sims: Vec<(usize, f64)> = rows.iter().map(|r| r.dot(&query)).enumerate().collect();
        let mut expected = Vec::new();
        while !sims.is_empty() {
            let mut best = 0;
            for i in 1..sims.len() {
                if sims[i].1 > sims[best].1 {
                    best = i;
                }
            }
            expected.push(ids[sims[best].0]);
            sims.remove(best);
        }
        assert_eq!(ranked, expected);
    }

    #[test]
    fn empty_index_and_oversized_k_are_rejected() {
        let index = DescriptorIndex { ids: vec![], rows: vec![] };
        assert!(search(&index, &unit(vec![1.0, 0.0]), 1).is_err());
        let index = build_index(vec![unit(vec![1.0, 0.0])], vec![(0, 0)]).unwrap();
        assert!(search(&index, &unit(vec![1.0, 0.0]), 2).is_err());
    }

    #[test]
    fn recall_counts_ranks_correctly() {
        // Three queries with their correct reference at ranks 1, 2 and 5.
        let gt: GroundTruth = [
            ((0, 10), vec![(0, 0)]),
            ((1, 10), vec![(1, 0)]),
            ((2, 10), vec![(2, 0)]),
        ]
        .into();
        let rankings = vec![
            ((0, 10), vec![(0, 0), (9, 0), (8, 0), (7, 0), (6, 0)]),
            ((1, 10), vec![(9, 0), (1, 0), (8, 0), (7, 0), (6, 0)]),
            ((2, 10), vec![(9, 0), (8, 0), (7, 0), (6, 0), (2, 0)]),
        ];
        let r1 = recall_at_k(&rankings, &gt, 1).unwrap();
        let r2 = recall_at_k(&rankings, &gt, 2).unwrap();
        let r5 = recall_at_k(&rankings, &gt, 5).unwrap();
        assert!((r1 - 1.0 / 3.0).abs() < 1e-12);
        assert!((r2 - 2.0 / 3.0).abs() < 1e-12);
        assert!((r5 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recall_extremes() {
        let gt: GroundTruth = [((0, 1), vec![(0, 0)]), ((1, 1), vec![(1, 0)])].into();
        let self_matched = vec![
            ((0, 1), vec![(0, 0)]),
            ((1, 1), vec![(1, 0)]),
        ];
        assert_eq!(recall_at_k(&self_matched, &gt, 1).unwrap(), 1.0);
        let adversarial: GroundTruth =
            [((0, 1), vec![(9, 9)]), ((1, 1), vec![(9, 9)])].into();
        assert_eq!(recall_at_k(&self_matched, &adversarial, 1).unwrap(), 0.0);
    }

    #[test]
    fn recall_requires_ground_truth_for_every_query() {
        let gt: GroundTruth = [((0, 1), vec![(0, 0)])].into();
        let rankings = vec![((5, 5), vec![(0, 0)])];
        assert!(matches!(
            recall_at_k(&rankings, &gt, 1),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn recall_is_monotone_in_k() {
        let mut prng = Prng::new(81);
        let rows: Vec<Descriptor<f32>> = (0..20)
            .map(|_| unit((0..4).map(|_| prng.normal() as f32).collect()))
            .collect();
        let ids: Vec<(u32, u32)> = (0..20).map(|i| (i as u32, 0)).collect();
        let index = build_index(rows, ids).unwrap();
        let gt: GroundTruth = (0..20u32).map(|i| ((i, 1), vec![(i, 0)])).collect();
        let rankings: Vec<((u32, u32), Vec<(u32, u32)>)> = (0..20u32)
            .map(|i| {
                let q = unit((0..4).map(|_| prng.normal() as f32).collect());
                ((i, 1), search(&index, &q, 20).unwrap())
            })
            .collect();
        let mut prev = 0.0;
        for k in 1..=20 {
            let r = recall_at_k(&rankings, &gt, k).unwrap();
            assert!(r >= prev);
            prev = r;
        }
    }

    #[test]
    fn descriptor_db_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut prng = Prng::new(82);
        let rows: Vec<Descriptor<f32>> = (0..10)
            .map(|_| unit((0..6).map(|_| prng.normal() as f32).collect()))
            .collect();
        let ids: Vec<(u32, u32)> = (0..10).map(|i| (i as u32, i as u32 + 100)).collect();
        let index = build_index(rows, ids).unwrap();
        let path = dir.path().join("d.tdsc");
        write_descriptor_db(&path, &index).unwrap();
        let loaded = read_descriptor_db(&path).unwrap();
        assert_eq!(loaded, index);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[1] = b'X';
        std::fs::write(dir.path().join("bad.tdsc"), &bytes).unwrap();
        assert!(read_descriptor_db(&dir.path().join("bad.tdsc")).is_err());
    }
}
