use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::rng_for;

/// One parsed line of an interaction file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawInteraction {
    pub user: String,
    pub item: String,
    pub rating: f64,
    pub timestamp: Option<i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub item: usize,
    pub rating: f64,
    pub timestamp: Option<i64>,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetFormat {
    /// `user \t item \t rating [\t timestamp]`, `#` comments.
    Tsv,
    /// MovieLens `ratings.dat`: `user::item::rating::timestamp`.
    MovieLensDat,
}

impl std::str::FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(Self::Tsv),
            "movielens" | "dat" => Ok(Self::MovieLensDat),
            other => Err(Error::config("dataset.format", format!("unknown format `{other}`"))),
        }
    }
}

/// Interactions re-indexed to dense user and item ids.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionDataset {
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    /// Per user, sorted by item index.
    pub per_user: Vec<Vec<Interaction>>,
    /// Duplicate (user, item) lines dropped at load time.
    pub duplicates_collapsed: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Most recent records go to test; falls back to random for users without timestamps.
    Temporal,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub test_fraction: f64,
    pub valid_fraction: f64,
    pub mode: SplitMode,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            valid_fraction: 0.1,
            mode: SplitMode::Temporal,
            seed: 0,
        }
    }
}

/// Written next to a run as `split.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub test_fraction: f64,
    pub valid_fraction: f64,
    pub mode: SplitMode,
    pub num_users: usize,
    pub num_items: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

pub fn parse_line(line: &str, format: DatasetFormat, line_no: usize) -> Result<Option<RawInteraction>> {
    let trimmed = line.trim();
    if trimmed.is_empty() || trimmed.starts_with('#') {
        return Ok(None);
    }
    let fields: Vec<&str> = match format {
        DatasetFormat::Tsv => trimmed.split('\t').collect(),
        DatasetFormat::MovieLensDat => trimmed.split("::").collect(),
    };
    if !(3..=4).contains(&fields.len()) {
        return Err(Error::Parse {
            line: line_no,
            message: format!("expected 3 or 4 fields, found {}", fields.len()),
        });
    }
    let rating: f64 = fields[2].trim().parse().map_err(|_| Error::Parse {
        line: line_no,
        message: format!("bad rating `{}`", fields[2]),
    })?;
    if !rating.is_finite() {
        return Err(Error::Parse {
            line: line_no,
            message: "rating is not finite".into(),
        });
    }
    let timestamp = match fields.get(3).map(|s| s.trim()) {
        None | Some("") => None,
        Some(t) => Some(t.parse::<i64>().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("bad timestamp `{t}`"),
        })?),
    };
    let (user, item) = (fields[0].trim(), fields[1].trim());
    if user.is_empty() || item.is_empty() {
        return Err(Error::Parse {
            line: line_no,
            message: "empty user or item id".into(),
        });
    }
    Ok(Some(RawInteraction {
        user: user.to_string(),
        item: item.to_string(),
        rating,
        timestamp,
    }))
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<InteractionDataset> {
    let file = std::fs::File::open(path)?;
    let mut records = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        if let Some(r) = parse_line(&line?, format, i + 1)? {
            records.push(r);
        }
    }
    if records.is_empty() {
        return Err(Error::Empty(format!("no interactions in {}", path.display())));
    }
    Ok(InteractionDataset::from_records(records))
}

impl InteractionDataset {
    /// Dense re-indexing in first-appearance order; the first occurrence of
    /// a duplicate (user, item) pair wins.
    pub fn from_records(records: impl IntoIterator<Item = RawInteraction>) -> Self {
        let mut users: HashMap<String, usize> = HashMap::new();
        let mut items: HashMap<String, usize> = HashMap::new();
        let mut user_ids = Vec::new();
        let mut item_ids = Vec::new();
        let mut per_user: Vec<BTreeMap<usize, Interaction>> = Vec::new();
        let mut duplicates = 0;
        for r in records {
            let u = *users.entry(r.user.clone()).or_insert_with(|| {
                user_ids.push(r.user.clone());
                per_user.push(BTreeMap::new());
                user_ids.len() - 1
            });
            let i = *items.entry(r.item.clone()).or_insert_with(|| {
                item_ids.push(r.item.clone());
                item_ids.len() - 1
            });
            if per_user[u].contains_key(&i) {
                duplicates += 1;
                continue;
            }
            per_user[u].insert(
                i,
                Interaction {
                    item: i,
                    rating: r.rating,
                    timestamp: r.timestamp,
                    split: Split::Train,
                },
            );
        }
        Self {
            user_ids,
            item_ids,
            per_user: per_user.into_iter().map(|m| m.into_values().collect()).collect(),
            duplicates_collapsed: duplicates,
        }
    }

    pub fn num_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.per_user.iter().map(Vec::len).sum()
    }

    pub fn count_split(&self, split: Split) -> usize {
        self.per_user
            .iter()
            .flatten()
            .filter(|r| r.split == split)
            .count()
    }

    /// Items of `user` in `split`, ascending.
    pub fn items_in(&self, user: usize, split: Split) -> Vec<usize> {
        self.per_user[user]
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.item)
            .collect()
    }

    /// Every item `user` interacted with in any split, ascending.
    pub fn all_items(&self, user: usize) -> Vec<usize> {
        self.per_user[user].iter().map(|r| r.item).collect()
    }

    /// Implicit feedback: every retained record becomes `r = 1`.
    pub fn to_implicit(mut self) -> Self {
        for r in self.per_user.iter_mut().flatten() {
            r.rating = 1.0;
        }
        self
    }

    /// Keeps the `n` most active users (ties by lower index) and re-densifies
    /// items to those they touched, preserving relative order.
    pub fn subsample_top_users(&self, n: usize) -> Self {
        let mut order: Vec<usize> = (0..self.num_users()).collect();
        order.sort_by(|&a, &b| {
            self.per_user[b]
                .len()
                .cmp(&self.per_user[a].len())
                .then(a.cmp(&b))
        });
        let mut kept: Vec<usize> = order.into_iter().take(n).collect();
        kept.sort_unstable();
        let used: BTreeSet<usize> = kept
            .iter()
            .flat_map(|&u| self.per_user[u].iter().map(|r| r.item))
            .collect();
        let remap: HashMap<usize, usize> = used.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        let per_user = kept
            .iter()
            .map(|&u| {
                let mut rs: Vec<Interaction> = self.per_user[u]
                    .iter()
                    .map(|r| Interaction {
                        item: remap[&r.item],
                        ..*r
                    })
                    .collect();
                rs.sort_by_key(|r| r.item);
                rs
            })
            .collect();
        Self {
            user_ids: kept.iter().map(|&u| self.user_ids[u].clone()).collect(),
            item_ids: used.iter().map(|&i| self.item_ids[i].clone()).collect(),
            per_user,
            duplicates_collapsed: self.duplicates_collapsed,
        }
    }

    /// Labels each record train/valid/test.
    ///
    /// Per user with `n` records, `⌊test_fraction·n⌋` go to test (most recent
    /// under [`SplitMode::Temporal`]), then `round(valid_fraction·rest)` of the
    /// remainder are sampled into valid. At least one record always stays train.
    pub fn split(mut self, cfg: &SplitConfig) -> Result<(Self, SplitManifest)> {
        if !(0.0..1.0).contains(&cfg.test_fraction) || !(0.0..1.0).contains(&cfg.valid_fraction) {
            return Err(Error::config("dataset.test_fraction", "fractions must lie in [0, 1)"));
        }
        for (u, records) in self.per_user.iter_mut().enumerate() {
            if records.is_empty() {
                return Err(Error::Domain(format!("user {u} has no interactions")));
            }
            for r in records.iter_mut() {
                r.split = Split::Train;
            }
            let n = records.len();
            let n_test = ((cfg.test_fraction * n as f64).floor() as usize).min(n - 1);
            let mut rng = rng_for(cfg.seed, &[0x5b11, u as u64]);
            let mut idx: Vec<usize> = (0..n).collect();
            let temporal = cfg.mode == SplitMode::Temporal && records.iter().all(|r| r.timestamp.is_some());
            if temporal {
                idx.sort_by_key(|&i| (std::cmp::Reverse(records[i].timestamp), records[i].item));
            } else {
                idx.shuffle(&mut rng);
            }
            for &i in &idx[..n_test] {
                records[i].split = Split::Test;
            }
            let mut rest: Vec<usize> = idx[n_test..].to_vec();
            rest.sort_unstable();
            let n_valid = ((cfg.valid_fraction * rest.len() as f64).round() as usize).min(rest.len() - 1);
            rest.shuffle(&mut rng);
            for &i in &rest[..n_valid] {
                records[i].split = Split::Valid;
            }
        }
        let manifest = SplitManifest {
            seed: cfg.seed,
            test_fraction: cfg.test_fraction,
            valid_fraction: cfg.valid_fraction,
            mode: cfg.mode,
            num_users: self.num_users(),
            num_items: self.num_items(),
            train: self.count_split(Split::Train),
            valid: self.count_split(Split::Valid),
            test: self.count_split(Split::Test),
        };
        Ok((self, manifest))
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "# user\titem\trating\ttimestamp")?;
        for (u, records) in self.per_user.iter().enumerate() {
            for r in records {
                match r.timestamp {
                    Some(t) => writeln!(w, "{}\t{}\t{}\t{}", self.user_ids[u], self.item_ids[r.item], r.rating, t)?,
                    None => writeln!(w, "{}\t{}\t{}", self.user_ids[u], self.item_ids[r.item], r.rating)?,
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn raw(u: &str, i: &str, r: f64, t: i64) -> RawInteraction {
        RawInteraction {
            user: u.into(),
            item: i.into(),
            rating: r,
            timestamp: Some(t),
        }
    }

    #[test]
    fn loads_three_line_file() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "# header\nu1\ta\t4\t10\nu1\tb\t3.5\t11\nu2\ta\t5").unwrap();
        let ds = load_dataset(f.path(), DatasetFormat::Tsv).unwrap();
        assert_eq!((ds.num_users(), ds.num_items(), ds.num_interactions()), (2, 2, 3));
        assert_eq!(ds.per_user[1][0].timestamp, None);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "u1\ta\t4\t10\nu2\tb\tnot-a-number\t3").unwrap();
        match load_dataset(f.path(), DatasetFormat::Tsv) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_error() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "# only a comment").unwrap();
        assert!(matches!(load_dataset(f.path(), DatasetFormat::Tsv), Err(Error::Empty(_))));
    }

    #[test]
    fn movielens_dat_format() {
        let r = parse_line("1::1193::5::978300760", DatasetFormat::MovieLensDat, 1)
            .unwrap()
            .unwrap();
        assert_eq!(r, raw("1", "1193", 5.0, 978300760));
    }

    #[test]
    fn duplicates_collapse() {
        let ds = InteractionDataset::from_records(vec![
            raw("u", "a", 1.0, 1),
            raw("u", "a", 2.0, 2),
            raw("u", "b", 1.0, 3),
            raw("v", "a", 1.0, 1),
        ]);
        assert_eq!(ds.duplicates_collapsed, 1);
        assert_eq!(ds.num_interactions(), 3);
        assert_eq!(ds.per_user[0][0].rating, 1.0);
    }

    #[test]
    fn implicit_sets_all_ratings_to_one() {
        let ds = InteractionDataset::from_records(vec![raw("u", "a", 3.5, 1), raw("u", "b", 5.0, 2)]).to_implicit();
        assert!(ds.per_user.iter().flatten().all(|r| r.rating == 1.0));
        let empty = InteractionDataset::from_records(vec![]).to_implicit();
        assert_eq!(empty.num_users(), 0);
    }

    #[test]
    fn split_arithmetic() {
        let mut recs: Vec<RawInteraction> = (0..10).map(|i| raw("a", &format!("i{i}"), 1.0, i)).collect();
        recs.push(raw("b", "i0", 1.0, 0));
        let (ds, m) = InteractionDataset::from_records(recs)
            .split(&SplitConfig::default())
            .unwrap();
        assert_eq!(ds.items_in(0, Split::Test).len(), 2);
        assert_eq!(ds.items_in(0, Split::Valid).len(), 1);
        assert_eq!(ds.items_in(0, Split::Train).len(), 7);
        // temporal: the two latest records are the test ones
        let test = ds.items_in(0, Split::Test);
        let latest: Vec<usize> = ds.per_user[0]
            .iter()
            .filter(|r| r.timestamp >= Some(8))
            .map(|r| r.item)
            .collect();
        assert_eq!(test, latest);
        assert_eq!(ds.items_in(1, Split::Train).len(), 1);
        assert_eq!(ds.items_in(1, Split::Test).len(), 0);
        assert_eq!(m.train + m.valid + m.test, 11);
    }

    #[test]
    fn subsample_keeps_most_active_and_redensifies() {
        let ds = InteractionDataset::from_records(vec![
            raw("a", "x", 1.0, 1),
            raw("b", "y", 1.0, 1),
            raw("b", "z", 1.0, 2),
            raw("c", "z", 1.0, 1),
            raw("c", "w", 1.0, 2),
        ]);
        let sub = ds.subsample_top_users(2);
        assert_eq!(sub.user_ids, vec!["b", "c"]);
        assert_eq!(sub.item_ids, vec!["y", "z", "w"]);
        assert_eq!(sub.all_items(1), vec![1, 2]);
    }
}
