//! Dataset ingestion and generation: the MovieLens-100k directory layout,
//! synthetic bilinear ratings, feature encoding, cross-validation splits,
//! and error metrics.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kernels::AttributeMatrix;
use crate::model::RatingsDataset;

/// Occupation vocabulary, in the order of the MovieLens-100k `u.occupation`
/// file; one one-hot slot each.
pub const OCCUPATIONS: [&str; 21] = [
    "administrator",
    "artist",
    "doctor",
    "educator",
    "engineer",
    "entertainment",
    "executive",
    "healthcare",
    "homemaker",
    "lawyer",
    "librarian",
    "marketing",
    "none",
    "other",
    "programmer",
    "retired",
    "salesman",
    "scientist",
    "student",
    "technician",
    "writer",
];

/// Genre names in `u.genre` order; item features are these 19 flags.
pub const GENRES: [&str; 19] = [
    "unknown",
    "Action",
    "Adventure",
    "Animation",
    "Children's",
    "Comedy",
    "Crime",
    "Documentary",
    "Drama",
    "Fantasy",
    "Film-Noir",
    "Horror",
    "Musical",
    "Mystery",
    "Romance",
    "Sci-Fi",
    "Thriller",
    "War",
    "Western",
];

/// Age bucket boundaries `[lo, hi)`; out-of-range ages snap to the nearest
/// bucket so exactly one flag is always set.
pub const AGE_BUCKETS: [(u32, u32); 5] = [(7, 18), (18, 25), (25, 35), (35, 45), (45, 74)];

/// User feature width: 5 age buckets + 1 gender flag + 21 occupations.
pub const USER_DIM: usize = AGE_BUCKETS.len() + 1 + OCCUPATIONS.len();

/// Item feature width: the 19 genre flags.
pub const ITEM_DIM: usize = GENRES.len();

/// Index of the bucket containing `age`.
pub fn age_bucket(age: u32) -> usize {
    for (i, &(lo, hi)) in AGE_BUCKETS.iter().enumerate() {
        if age >= lo && age < hi {
            return i;
        }
    }
    if age < AGE_BUCKETS[0].0 {
        0
    } else {
        AGE_BUCKETS.len() - 1
    }
}

/// One-hot user encoding: age bucket, gender flag (1 = M), occupation.
pub fn encode_user(age: u32, male: bool, occupation: &str) -> Result<Vec<f64>> {
    let occ = OCCUPATIONS
        .iter()
        .position(|&o| o == occupation)
        .ok_or_else(|| Error::InvalidParam(format!("unknown occupation token {occupation:?}")))?;
    let mut v = vec![0.0; USER_DIM];
    v[age_bucket(age)] = 1.0;
    if male {
        v[AGE_BUCKETS.len()] = 1.0;
    }
    v[AGE_BUCKETS.len() + 1 + occ] = 1.0;
    Ok(v)
}

/// Loads a MovieLens-100k directory (`u.data`, `u.item`, `u.user`) into a
/// ratings dataset plus encoded user and item attributes. Entity ids in the
/// files are 1-based and must be sequential; parse failures carry the file
/// and line they occurred on.
pub fn load_movielens(dir: &Path) -> Result<(RatingsDataset, AttributeMatrix, AttributeMatrix)> {
    let users = parse_users(&dir.join("u.user"))?;
    let items = parse_items(&dir.join("u.item"))?;
    let ratings = parse_ratings(&dir.join("u.data"), users.nrows(), items.nrows())?;
    let d = RatingsDataset::new(ratings, users.nrows(), items.nrows())?;
    Ok((
        d,
        AttributeMatrix::new(users)?,
        AttributeMatrix::new(items)?,
    ))
}

fn data_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::DataFormat {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    Ok(text.lines().map(str::to_owned).collect())
}

fn parse_id(path: &Path, line: usize, field: &str, expected: usize) -> Result<()> {
    let id: usize = field
        .parse()
        .map_err(|_| data_err(path, line, format!("bad id {field:?}")))?;
    if id != expected {
        return Err(data_err(
            path,
            line,
            format!("ids must be sequential: got {id}, expected {expected}"),
        ));
    }
    Ok(())
}

fn parse_users(path: &Path) -> Result<DMatrix<f64>> {
    let lines = read_lines(path)?;
    if lines.is_empty() {
        return Err(data_err(path, 1, "no users"));
    }
    let mut rows = Vec::with_capacity(lines.len());
    for (i, raw) in lines.iter().enumerate() {
        let line = i + 1;
        let fields: Vec<&str> = raw.split('|').collect();
        if fields.len() != 5 {
            return Err(data_err(
                path,
                line,
                format!("expected 5 pipe-separated fields, got {}", fields.len()),
            ));
        }
        parse_id(path, line, fields[0], line)?;
        let age: u32 = fields[1]
            .parse()
            .map_err(|_| data_err(path, line, format!("bad age {:?}", fields[1])))?;
        let male = match fields[2] {
            "M" => true,
            "F" => false,
            g => return Err(data_err(path, line, format!("bad gender {g:?}"))),
        };
        let encoded =
            encode_user(age, male, fields[3]).map_err(|e| data_err(path, line, e.to_string()))?;
        rows.push(encoded);
    }
    Ok(DMatrix::from_fn(rows.len(), USER_DIM, |i, j| rows[i][j]))
}

fn parse_items(path: &Path) -> Result<DMatrix<f64>> {
    let lines = read_lines(path)?;
    if lines.is_empty() {
        return Err(data_err(path, 1, "no items"));
    }
    let mut rows = Vec::with_capacity(lines.len());
    for (i, raw) in lines.iter().enumerate() {
        let line = i + 1;
        let fields: Vec<&str> = raw.split('|').collect();
        if fields.len() != 5 + ITEM_DIM {
            return Err(data_err(
                path,
                line,
                format!(
                    "expected {} pipe-separated fields, got {}",
                    5 + ITEM_DIM,
                    fields.len()
                ),
            ));
        }
        parse_id(path, line, fields[0], line)?;
        let mut flags = vec![0.0; ITEM_DIM];
        for (g, field) in fields[5..].iter().enumerate() {
            flags[g] = match *field {
                "0" => 0.0,
                "1" => 1.0,
                f => {
                    return Err(data_err(
                        path,
                        line,
                        format!("genre flag must be 0 or 1, got {f:?}"),
                    ))
                }
            };
        }
        rows.push(flags);
    }
    Ok(DMatrix::from_fn(rows.len(), ITEM_DIM, |i, j| rows[i][j]))
}

fn parse_ratings(path: &Path, n_users: usize, n_items: usize) -> Result<Vec<(usize, usize, f64)>> {
    let lines = read_lines(path)?;
    let mut seen = HashSet::with_capacity(lines.len());
    let mut obs = Vec::with_capacity(lines.len());
    for (i, raw) in lines.iter().enumerate() {
        let line = i + 1;
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 4 {
            return Err(data_err(
                path,
                line,
                format!("expected 4 tab-separated fields, got {}", fields.len()),
            ));
        }
        let user: usize = fields[0]
            .parse()
            .map_err(|_| data_err(path, line, format!("bad user id {:?}", fields[0])))?;
        let item: usize = fields[1]
            .parse()
            .map_err(|_| data_err(path, line, format!("bad item id {:?}", fields[1])))?;
        if user < 1 || user > n_users {
            return Err(data_err(path, line, format!("user id {user} out of range")));
        }
        if item < 1 || item > n_items {
            return Err(data_err(path, line, format!("item id {item} out of range")));
        }
        let rating: f64 = fields[2]
            .parse()
            .map_err(|_| data_err(path, line, format!("bad rating {:?}", fields[2])))?;
        if !(1.0..=5.0).contains(&rating) || rating.fract() != 0.0 {
            return Err(data_err(
                path,
                line,
                format!("rating must be an integer in 1..=5, got {rating}"),
            ));
        }
        if !seen.insert((user, item)) {
            return Err(data_err(
                path,
                line,
                format!("duplicate rating for user {user}, item {item}"),
            ));
        }
        obs.push((user - 1, item - 1, rating));
    }
    Ok(obs)
}

/// Parameters of the synthetic generator: hidden features of width `d_full`
/// on both sides, a random bilinear operator, Gaussian label noise, and
/// truncation of the released attributes to the first `d_obs` coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub n_x: usize,
    pub n_y: usize,
    pub d_full: usize,
    pub d_obs: usize,
    pub noise_sd: f64,
    pub n_ratings: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_x: 50,
            n_y: 50,
            d_full: 6,
            d_obs: 3,
            noise_sd: 0.1,
            n_ratings: 800,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.n_x == 0 || self.n_y == 0 || self.d_full == 0 {
            return Err(Error::InvalidParam(
                "entity and feature counts must be >= 1".into(),
            ));
        }
        if self.d_obs == 0 || self.d_obs > self.d_full {
            return Err(Error::InvalidParam(format!(
                "observed width {} outside [1, {}]",
                self.d_obs, self.d_full
            )));
        }
        if !(self.noise_sd >= 0.0) || !self.noise_sd.is_finite() {
            return Err(Error::InvalidParam(
                "noise_sd must be finite and >= 0".into(),
            ));
        }
        if self.n_ratings == 0 || self.n_ratings > self.n_x * self.n_y {
            return Err(Error::InvalidParam(format!(
                "n_ratings {} outside [1, {}]",
                self.n_ratings,
                self.n_x * self.n_y
            )));
        }
        Ok(())
    }
}

/// The generator's hidden state, returned for reconstruction checks.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTruth {
    /// The bilinear operator over the full feature spaces.
    pub operator: DMatrix<f64>,
    pub user_features: DMatrix<f64>,
    pub object_features: DMatrix<f64>,
}

/// Draws features, operator, rated pairs (without replacement), and noisy
/// labels `t = x^T B y + noise`. Released attributes keep only the first
/// `d_obs` feature coordinates. Deterministic under the config seed.
pub fn synth_generate(
    cfg: &SynthConfig,
) -> Result<(RatingsDataset, AttributeMatrix, AttributeMatrix, SynthTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
    let xs = DMatrix::from_fn(cfg.n_x, cfg.d_full, |_, _| normal(&mut rng));
    let ys = DMatrix::from_fn(cfg.n_y, cfg.d_full, |_, _| normal(&mut rng));
    let b = DMatrix::from_fn(cfg.d_full, cfg.d_full, |_, _| normal(&mut rng) / 6.0);
    let mut cells: Vec<usize> = (0..cfg.n_x * cfg.n_y).collect();
    let (picked, _) = cells.partial_shuffle(&mut rng, cfg.n_ratings);
    let scores = &xs * &b * ys.transpose();
    let mut obs = Vec::with_capacity(cfg.n_ratings);
    for &cell in picked.iter() {
        let (a, o) = (cell / cfg.n_y, cell % cfg.n_y);
        let t = scores[(a, o)] + cfg.noise_sd * normal(&mut rng);
        obs.push((a, o, t));
    }
    let d = RatingsDataset::new(obs, cfg.n_x, cfg.n_y)?;
    let ua = AttributeMatrix::new(xs.columns(0, cfg.d_obs).into_owned())?;
    let oa = AttributeMatrix::new(ys.columns(0, cfg.d_obs).into_owned())?;
    let truth = SynthTruth {
        operator: b,
        user_features: xs,
        object_features: ys,
    };
    Ok((d, ua, oa, truth))
}

/// Shuffles observation indices and cuts them into `k` folds whose sizes
/// differ by at most one; returns `(train, test)` index pairs, both sorted.
pub fn kfold_split(
    d: &RatingsDataset,
    k: usize,
    seed: u64,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let n = d.len();
    if k < 2 {
        return Err(Error::InvalidParam("need at least 2 folds".into()));
    }
    if k > n {
        return Err(Error::InvalidParam(format!(
            "cannot cut {n} observations into {k} folds"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = n / k;
    let rem = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < rem);
        let mut test: Vec<usize> = order[start..start + size].to_vec();
        let mut train: Vec<usize> = order[..start]
            .iter()
            .chain(&order[start + size..])
            .copied()
            .collect();
        test.sort_unstable();
        train.sort_unstable();
        folds.push((train, test));
        start += size;
    }
    Ok(folds)
}

/// Root mean squared error between two equal-length vectors.
pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::EmptyInput("rmse needs at least one value".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::DimMismatch(format!(
            "rmse over {} predictions vs {} targets",
            pred.len(),
            truth.len()
        )));
    }
    let mse: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64;
    Ok(mse.sqrt())
}

/// Serializes observations as tab-separated `user<TAB>item<TAB>rating` lines
/// with 1-based ids, in observation order.
pub fn triplet_lines(d: &RatingsDataset) -> String {
    let mut out = String::new();
    for &(a, b, t) in d.observations() {
        let _ = writeln!(out, "{}\t{}\t{}", a + 1, b + 1, t);
    }
    out
}

/// Writes [`triplet_lines`] to a file.
pub fn write_triplets(path: &Path, d: &RatingsDataset) -> Result<()> {
    fs::write(path, triplet_lines(d))?;
    Ok(())
}

/// Writes attributes as CSV: header `id,f0,...`, one entity per line.
pub fn write_attributes_csv(path: &Path, a: &AttributeMatrix) -> Result<()> {
    let mut out = String::new();
    let _ = write!(out, "id");
    for j in 0..a.dim() {
        let _ = write!(out, ",f{j}");
    }
    let _ = writeln!(out);
    for i in 0..a.rows() {
        let _ = write!(out, "{}", i + 1);
        for j in 0..a.dim() {
            let _ = write!(out, ",{}", a.features()[(i, j)]);
        }
        let _ = writeln!(out);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Keeps a seeded random subset of users and items together with all the
/// ratings between them, reindexing entities densely (original order
/// preserved among the kept ones).
pub fn subsample(
    d: &RatingsDataset,
    users: &AttributeMatrix,
    items: &AttributeMatrix,
    n_users: usize,
    n_items: usize,
    seed: u64,
) -> Result<(RatingsDataset, AttributeMatrix, AttributeMatrix)> {
    if users.rows() != d.n_x() || items.rows() != d.n_y() {
        return Err(Error::DimMismatch(format!(
            "attributes cover {}x{} entities, dataset {}x{}",
            users.rows(),
            items.rows(),
            d.n_x(),
            d.n_y()
        )));
    }
    if n_users == 0 || n_users > d.n_x() || n_items == 0 || n_items > d.n_y() {
        return Err(Error::InvalidParam(format!(
            "subsample {n_users}x{n_items} outside dataset {}x{}",
            d.n_x(),
            d.n_y()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = |n: usize, m: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        let mut ids: Vec<usize> = (0..n).collect();
        let (chosen, _) = ids.partial_shuffle(rng, m);
        let mut chosen = chosen.to_vec();
        chosen.sort_unstable();
        chosen
    };
    let keep_u = pick(d.n_x(), n_users, &mut rng);
    let keep_i = pick(d.n_y(), n_items, &mut rng);
    let mut map_u = vec![usize::MAX; d.n_x()];
    for (new, &old) in keep_u.iter().enumerate() {
        map_u[old] = new;
    }
    let mut map_i = vec![usize::MAX; d.n_y()];
    for (new, &old) in keep_i.iter().enumerate() {
        map_i[old] = new;
    }
    let obs: Vec<(usize, usize, f64)> = d
        .observations()
        .iter()
        .filter(|&&(a, b, _)| map_u[a] != usize::MAX && map_i[b] != usize::MAX)
        .map(|&(a, b, t)| (map_u[a], map_i[b], t))
        .collect();
    if obs.is_empty() {
        return Err(Error::EmptyInput(
            "subsample kept no ratings; enlarge it or change the seed".into(),
        ));
    }
    let sub_users = DMatrix::from_fn(n_users, users.dim(), |i, j| {
        users.features()[(keep_u[i], j)]
    });
    let sub_items = DMatrix::from_fn(n_items, items.dim(), |i, j| {
        items.features()[(keep_i[i], j)]
    });
    Ok((
        RatingsDataset::new(obs, n_users, n_items)?,
        AttributeMatrix::new(sub_users)?,
        AttributeMatrix::new(sub_items)?,
    ))
}

/// Writes a MovieLens-100k-shaped fixture into `dir`: exactly 943 users,
/// 1682 items, 100000 ratings, at least 20 per user, integer ratings 1..=5.
/// Ratings carry an occupation-genre affinity signal plus user and item
/// biases, so the encoded attributes are informative. Intended for tests
/// and smoke runs when the real dataset is not on disk.
pub fn write_movielens_fixture(dir: &Path, seed: u64) -> Result<()> {
    const N_USERS: usize = 943;
    const N_ITEMS: usize = 1682;
    const N_RATINGS: usize = 100_000;
    const MIN_PER_USER: usize = 20;
    fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

    let affinity = DMatrix::from_fn(OCCUPATIONS.len(), ITEM_DIM, |_, _| {
        rng.random_range(-1.0..1.0)
    });

    struct FixtureUser {
        age: u32,
        male: bool,
        occ: usize,
        bias: f64,
    }
    let users: Vec<FixtureUser> = (0..N_USERS)
        .map(|_| FixtureUser {
            age: rng.random_range(7..74),
            male: rng.random_bool(0.71),
            occ: rng.random_range(0..OCCUPATIONS.len()),
            bias: 0.35 * normal(&mut rng),
        })
        .collect();

    struct FixtureItem {
        genres: Vec<usize>,
        bias: f64,
    }
    let items: Vec<FixtureItem> = (0..N_ITEMS)
        .map(|_| {
            let count = 1 + rng.random_range(0..3);
            let mut ids: Vec<usize> = (0..ITEM_DIM).collect();
            let (chosen, _) = ids.partial_shuffle(&mut rng, count);
            let mut genres = chosen.to_vec();
            genres.sort_unstable();
            FixtureItem {
                genres,
                bias: 0.35 * normal(&mut rng),
            }
        })
        .collect();

    // per-user rating counts: a skewed share of the pool on top of the
    // minimum, topped up one by one to hit the exact total
    let extra_total = N_RATINGS - N_USERS * MIN_PER_USER;
    let weights: Vec<f64> = (0..N_USERS)
        .map(|u| 1.0 / ((u + 1) as f64).sqrt())
        .collect();
    let wsum: f64 = weights.iter().sum();
    let mut counts: Vec<usize> = weights
        .iter()
        .map(|w| MIN_PER_USER + ((extra_total as f64) * w / wsum).floor() as usize)
        .collect();
    let mut assigned: usize = counts.iter().sum();
    let mut u = 0;
    while assigned < N_RATINGS {
        if counts[u] < N_ITEMS {
            counts[u] += 1;
            assigned += 1;
        }
        u = (u + 1) % N_USERS;
    }

    let mut data = String::with_capacity(N_RATINGS * 24);
    let mut stamp: u64 = 874_000_000;
    for (u, user) in users.iter().enumerate() {
        let mut ids: Vec<usize> = (0..N_ITEMS).collect();
        let (chosen, _) = ids.partial_shuffle(&mut rng, counts[u]);
        let mut chosen = chosen.to_vec();
        chosen.sort_unstable();
        for i in chosen {
            let item = &items[i];
            let aff: f64 = item
                .genres
                .iter()
                .map(|&g| affinity[(user.occ, g)])
                .sum::<f64>()
                / item.genres.len() as f64;
            let score = 3.6 + 0.9 * aff + user.bias + item.bias + 0.6 * normal(&mut rng);
            let rating = (score.round() as i64).clamp(1, 5);
            stamp += 1;
            let _ = writeln!(data, "{}\t{}\t{}\t{}", u + 1, i + 1, rating, stamp);
        }
    }
    write_file(&dir.join("u.data"), &data)?;

    let mut user_rows = String::new();
    for (u, user) in users.iter().enumerate() {
        let _ = writeln!(
            user_rows,
            "{}|{}|{}|{}|{:05}",
            u + 1,
            user.age,
            if user.male { "M" } else { "F" },
            OCCUPATIONS[user.occ],
            10000 + (u * 89) % 90000
        );
    }
    write_file(&dir.join("u.user"), &user_rows)?;

    let mut item_rows = String::new();
    for (i, item) in items.iter().enumerate() {
        let _ = write!(
            item_rows,
            "{}|Item {} ({})|01-Jan-1995||http://example.org/item/{}",
            i + 1,
            i + 1,
            1990 + i % 9,
            i + 1
        );
        for g in 0..ITEM_DIM {
            let flag = u8::from(item.genres.contains(&g));
            let _ = write!(item_rows, "|{flag}");
        }
        let _ = writeln!(item_rows);
    }
    write_file(&dir.join("u.item"), &item_rows)?;
    Ok(())
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(content.as_bytes())?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn encoding_widths_and_flags() {
        assert_eq!(USER_DIM, 27);
        assert_eq!(ITEM_DIM, 19);
        let v = encode_user(30, true, "engineer").unwrap();
        assert_eq!(v.len(), 27);
        let ages: f64 = v[..5].iter().sum();
        assert_eq!(ages, 1.0);
        assert_eq!(v[2], 1.0);
        assert_eq!(v[5], 1.0);
        let occs: f64 = v[6..].iter().sum();
        assert_eq!(occs, 1.0);
        assert!(encode_user(30, true, "astronaut").is_err());
        assert_eq!(age_bucket(6), 0);
        assert_eq!(age_bucket(90), 4);
        assert_eq!(age_bucket(18), 1);
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_relative_eq!(rmse(&[2.0, 3.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_relative_eq!(
            rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap(),
            5.0 / 2.0_f64.sqrt(),
            epsilon = 1e-12
        );
        assert!(rmse(&[], &[]).is_err());
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn kfold_partitions() {
        let obs: Vec<(usize, usize, f64)> = (0..10).map(|i| (i, i, 1.0)).collect();
        let d = RatingsDataset::new(obs, 10, 10).unwrap();
        let folds = kfold_split(&d, 10, 3).unwrap();
        assert_eq!(folds.len(), 10);
        let mut all: Vec<usize> = folds.iter().flat_map(|(_, t)| t.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        for (train, test) in &folds {
            assert_eq!(test.len(), 1);
            assert_eq!(train.len(), 9);
            assert!(train.iter().all(|i| !test.contains(i)));
        }
        assert!(kfold_split(&d, 11, 0).is_err());
        assert!(kfold_split(&d, 1, 0).is_err());
    }

    #[test]
    fn kfold_even_sizes_on_large_n() {
        let obs: Vec<(usize, usize, f64)> = (0..100_000).map(|i| (i / 400, i % 400, 1.0)).collect();
        let d = RatingsDataset::new(obs, 250, 400).unwrap();
        let folds = kfold_split(&d, 10, 0).unwrap();
        for (_, test) in &folds {
            assert_eq!(test.len(), 10_000);
        }
    }

    #[test]
    fn synth_is_deterministic_and_exact_at_zero_noise() {
        let cfg = SynthConfig {
            n_x: 12,
            n_y: 9,
            d_obs: 6,
            noise_sd: 0.0,
            n_ratings: 40,
            ..SynthConfig::default()
        };
        let (d1, ua1, _, truth) = synth_generate(&cfg).unwrap();
        let (d2, ua2, _, _) = synth_generate(&cfg).unwrap();
        assert_eq!(d1.observations(), d2.observations());
        assert_eq!(ua1.features(), ua2.features());
        assert_eq!(ua1.dim(), 6);
        for &(a, b, t) in d1.observations() {
            let x = truth.user_features.row(a);
            let y = truth.object_features.row(b);
            let clean = (x * &truth.operator * y.transpose())[(0, 0)];
            assert_relative_eq!(t, clean, epsilon = 1e-12);
        }
    }

    #[test]
    fn synth_truth_recoverable_by_least_squares() {
        let cfg = SynthConfig {
            n_x: 12,
            n_y: 12,
            d_obs: 6,
            noise_sd: 0.0,
            n_ratings: 144,
            ..SynthConfig::default()
        };
        let (d, _, _, truth) = synth_generate(&cfg).unwrap();
        let dd = cfg.d_full;
        let mut design = DMatrix::zeros(d.len(), dd * dd);
        let mut target = nalgebra::DVector::zeros(d.len());
        for (row, &(a, b, t)) in d.observations().iter().enumerate() {
            for p in 0..dd {
                for q in 0..dd {
                    design[(row, p * dd + q)] =
                        truth.user_features[(a, p)] * truth.object_features[(b, q)];
                }
            }
            target[row] = t;
        }
        let sol = design.svd(true, true).solve(&target, 1e-12).unwrap();
        let recovered = DMatrix::from_fn(dd, dd, |p, q| sol[p * dd + q]);
        let rel = (&recovered - &truth.operator).norm() / truth.operator.norm();
        assert!(rel < 1e-6, "relative error {rel}");
    }

    #[test]
    fn synth_default_labels_dominate_noise() {
        let cfg = SynthConfig::default();
        let (d, ua, oa, _) = synth_generate(&cfg).unwrap();
        assert_eq!(d.len(), 800);
        assert_eq!((ua.rows(), ua.dim()), (50, 3));
        assert_eq!((oa.rows(), oa.dim()), (50, 3));
        let targets = d.targets();
        let mean = targets.iter().sum::<f64>() / targets.len() as f64;
        let var =
            targets.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / targets.len() as f64;
        assert!(var > cfg.noise_sd * cfg.noise_sd, "label variance {var}");
    }

    #[test]
    fn synth_rejects_bad_configs() {
        let wide = SynthConfig {
            d_obs: 7,
            ..Default::default()
        };
        assert!(synth_generate(&wide).is_err());
        let over = SynthConfig {
            n_ratings: 2501,
            ..Default::default()
        };
        assert!(synth_generate(&over).is_err());
    }

    fn tiny_layout(dir: &Path) {
        fs::write(
            dir.join("u.user"),
            "1|24|M|technician|85711\n2|53|F|other|94043\n3|33|M|artist|32067\n",
        )
        .unwrap();
        let mut items = String::new();
        for i in 1..=4 {
            let mut flags = vec!["0"; ITEM_DIM];
            flags[i % ITEM_DIM] = "1";
            items.push_str(&format!(
                "{i}|Title {i} (1995)|01-Jan-1995||http://example.org/{i}|{}\n",
                flags.join("|")
            ));
        }
        fs::write(dir.join("u.item"), items).unwrap();
        fs::write(
            dir.join("u.data"),
            "1\t1\t5\t874965758\n1\t2\t3\t876893171\n2\t3\t4\t878542960\n3\t4\t1\t880606923\n3\t1\t2\t886397596\n",
        )
        .unwrap();
    }

    #[test]
    fn movielens_layout_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        tiny_layout(dir.path());
        let (d, users, items) = load_movielens(dir.path()).unwrap();
        assert_eq!((d.n_x(), d.n_y(), d.len()), (3, 4, 5));
        assert_eq!(users.dim(), USER_DIM);
        assert_eq!(items.dim(), ITEM_DIM);
        assert_eq!(users.features()[(0, 5)], 1.0);
        assert_eq!(users.features()[(1, 5)], 0.0);
        let original = fs::read_to_string(dir.path().join("u.data")).unwrap();
        let without_stamps: String = original
            .lines()
            .map(|l| {
                let mut f = l.split('\t');
                format!(
                    "{}\t{}\t{}\n",
                    f.next().unwrap(),
                    f.next().unwrap(),
                    f.next().unwrap()
                )
            })
            .collect();
        assert_eq!(triplet_lines(&d), without_stamps);
    }

    #[test]
    fn movielens_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        tiny_layout(dir.path());
        fs::write(
            dir.path().join("u.data"),
            "1\t1\t5\t874965758\n1\t1\t3\t876893171\n",
        )
        .unwrap();
        match load_movielens(dir.path()) {
            Err(Error::DataFormat { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("duplicate"), "{msg}");
            }
            other => panic!("expected a format error, got {other:?}"),
        }
        fs::write(dir.path().join("u.data"), "1\t1\t6\t874965758\n").unwrap();
        assert!(load_movielens(dir.path()).is_err());
        fs::write(dir.path().join("u.data"), "1\t1\t5\t874965758\n").unwrap();
        fs::write(
            dir.path().join("u.user"),
            "1|24|M|astronaut|85711\n2|53|F|other|94043\n3|33|M|artist|32067\n",
        )
        .unwrap();
        match load_movielens(dir.path()) {
            Err(Error::DataFormat { line, msg, .. }) => {
                assert_eq!(line, 1);
                assert!(msg.contains("astronaut"), "{msg}");
            }
            other => panic!("expected a format error, got {other:?}"),
        }
    }

    #[test]
    fn subsample_keeps_mutual_ratings() {
        let cfg = SynthConfig {
            n_x: 20,
            n_y: 15,
            n_ratings: 120,
            ..SynthConfig::default()
        };
        let (d, ua, oa, _) = synth_generate(&cfg).unwrap();
        let (sub, sua, soa) = subsample(&d, &ua, &oa, 8, 6, 5).unwrap();
        assert_eq!((sub.n_x(), sub.n_y()), (8, 6));
        assert_eq!((sua.rows(), soa.rows()), (8, 6));
        let expected = d
            .observations()
            .iter()
            .filter(|&&(a, b, _)| {
                // recover membership by matching attribute rows
                (0..8).any(|i| sua.features().row(i) == ua.features().row(a))
                    && (0..6).any(|j| soa.features().row(j) == oa.features().row(b))
            })
            .count();
        assert_eq!(sub.len(), expected);
        let (sub2, ..) = subsample(&d, &ua, &oa, 8, 6, 5).unwrap();
        assert_eq!(sub.observations(), sub2.observations());
    }

    #[test]
    fn fixture_conforms_to_layout() {
        let dir = tempfile::tempdir().unwrap();
        write_movielens_fixture(dir.path(), 7).unwrap();
        let (d, users, items) = load_movielens(dir.path()).unwrap();
        assert_eq!((d.n_x(), d.n_y(), d.len()), (943, 1682, 100_000));
        assert_eq!(users.dim(), USER_DIM);
        assert_eq!(items.dim(), ITEM_DIM);
        let mut per_user = vec![0usize; d.n_x()];
        for &(a, _, t) in d.observations() {
            per_user[a] += 1;
            assert!((1.0..=5.0).contains(&t) && t.fract() == 0.0);
        }
        assert!(per_user.iter().all(|&c| c >= 20));
    }
}
