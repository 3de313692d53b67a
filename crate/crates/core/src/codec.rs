//! Semantic-subspace orthogonal perturbation and the count-sketch channel.
//!
//! A client rotates its boundary activations inside the top-`r` right
//! singular subspace of its probe embeddings, then every token vector is
//! count-sketched into a `Y x Z` table. The receiver decodes each coordinate
//! as the median over rows of the signed bucket values.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ElsaError, Result};
use crate::model::Activation;
use crate::seed;

/// Result of [`fit_subspace`].
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceFit {
    /// `D x r`, orthonormal columns.
    pub basis: DMatrix<f64>,
    /// Set when the matrix had fewer than `r` non-negligible singular values
    /// and the basis was completed deterministically.
    pub degenerate: bool,
}

fn fix_column_sign(m: &mut DMatrix<f64>, col: usize) {
    let c = m.column(col);
    let mut best = 0;
    for i in 0..c.len() {
        if c[i].abs() > c[best].abs() {
            best = i;
        }
    }
    if m[(best, col)] < 0.0 {
        m.column_mut(col).neg_mut();
    }
}

/// Top-`r` right singular vectors of `j` (rows are samples).
pub fn fit_subspace(j: &DMatrix<f64>, r: usize) -> Result<SubspaceFit> {
    let (q, d) = j.shape();
    if r == 0 || r > q.min(d) {
        return Err(ElsaError::Input(format!(
            "subspace rank {r} must be in [1, min({q}, {d})]"
        )));
    }
    if !j.iter().all(|v| v.is_finite()) {
        return Err(ElsaError::Numeric("non-finite entry in subspace input".into()));
    }
    let svd = j.clone().svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| ElsaError::Numeric("SVD did not produce right singular vectors".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let top = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = top * 1e-10 * (q.max(d) as f64);

    let mut basis = DMatrix::zeros(d, r);
    let mut filled = 0;
    for &k in &order {
        if filled == r || svd.singular_values[k] <= tol || top == 0.0 {
            break;
        }
        basis.column_mut(filled).copy_from(&v_t.row(k).transpose());
        fix_column_sign(&mut basis, filled);
        filled += 1;
    }
    let degenerate = filled < r;
    // complete with Gram-Schmidt over the standard basis
    let mut e = 0;
    while filled < r {
        let mut cand = DVector::zeros(d);
        cand[e] = 1.0;
        for _ in 0..2 {
            for c in 0..filled {
                let col = basis.column(c).clone_owned();
                let proj = col.dot(&cand);
                cand -= col * proj;
            }
        }
        let n = cand.norm();
        if n > 1e-8 {
            basis.column_mut(filled).copy_from(&(cand / n));
            fix_column_sign(&mut basis, filled);
            filled += 1;
        }
        e += 1;
    }
    Ok(SubspaceFit { basis, degenerate })
}

/// Client-specific `r x r` orthogonal matrix from the QR factor of a seeded
/// gaussian matrix. The seed is `Hash(salt || client)`.
pub fn gen_rotation(salt: &[u8], client: u64, r: usize) -> DMatrix<f64> {
    let mut rng = seed::rng(seed::salted_hash(salt, &[client]));
    let normal = Normal::new(0.0, 1.0).unwrap();
    let phi = DMatrix::from_fn(r, r, |_, _| normal.sample(&mut rng));
    let qr = phi.qr();
    let mut q = qr.q();
    let rr = qr.r();
    // sign-normalize so the factorization is unique
    for k in 0..r {
        if rr[(k, k)] < 0.0 {
            q.column_mut(k).neg_mut();
        }
    }
    q
}

/// `Q = U V U^T + (I - U U^T)`.
pub fn build_perturbation(u: &DMatrix<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
    let d = u.nrows();
    let uut = u * u.transpose();
    u * v * u.transpose() + DMatrix::identity(d, d) - uut
}

/// SS-OP material for one client.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationBasis {
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub rank: usize,
    pub salt: Vec<u8>,
    pub client: u64,
    pub degenerate: bool,
}

impl PerturbationBasis {
    /// Fits the subspace on `j` (`Q x D`) and builds the rotation.
    pub fn fit(j: &DMatrix<f64>, rank: usize, salt: &[u8], client: u64) -> Result<Self> {
        let fit = fit_subspace(j, rank)?;
        let v = gen_rotation(salt, client, rank);
        let q = build_perturbation(&fit.basis, &v);
        Ok(Self {
            u: fit.basis,
            v,
            q,
            rank,
            salt: salt.to_vec(),
            client,
            degenerate: fit.degenerate,
        })
    }
}

/// Multiplies every token row by `Q`.
pub fn perturb(h: &Activation, q: &DMatrix<f64>) -> Result<Activation> {
    if q.nrows() != h.values.ncols() || q.ncols() != h.values.ncols() {
        return Err(ElsaError::Input(format!(
            "perturbation is {}x{} but activations have width {}",
            q.nrows(),
            q.ncols(),
            h.values.ncols()
        )));
    }
    Activation::new(&h.values * q.transpose(), h.mask.clone())
}

/// Sketch geometry and the seed material that determines its hashes.
///
/// Row `j` hashes with `Hash(salt || client || round || j)`; the edge holds
/// the same salt, so it can re-derive the tables to decode.
#[derive(Debug, Clone)]
pub struct SketchParams {
    pub rows: usize,
    pub buckets: usize,
    pub dim: usize,
    pub salt: Vec<u8>,
    pub client: u64,
    pub round: u64,
    bucket_of: Vec<Vec<u32>>,
    sign_of: Vec<Vec<f64>>,
}

const SIGN_STREAM: u64 = 0xA5A5_5A5A_C3C3_3C3C;

impl PartialEq for SketchParams {
    fn eq(&self, o: &Self) -> bool {
        self.rows == o.rows
            && self.buckets == o.buckets
            && self.dim == o.dim
            && self.salt == o.salt
            && self.client == o.client
            && self.round == o.round
    }
}

impl SketchParams {
    pub fn new(rows: usize, buckets: usize, dim: usize, salt: &[u8], client: u64, round: u64) -> Result<Self> {
        if rows == 0 || buckets == 0 || dim == 0 {
            return Err(ElsaError::Config(format!(
                "sketch needs rows, buckets and dim >= 1 (got {rows}, {buckets}, {dim})"
            )));
        }
        let mut bucket_of = Vec::with_capacity(rows);
        let mut sign_of = Vec::with_capacity(rows);
        for j in 0..rows {
            let s = seed::salted_hash(salt, &[client, round, j as u64]);
            let bucket_seed = seed::mix64(s);
            let sign_seed = seed::mix64(s ^ SIGN_STREAM);
            bucket_of.push(
                (0..dim)
                    .map(|d| (seed::mix64(bucket_seed ^ seed::mix64(d as u64)) % buckets as u64) as u32)
                    .collect(),
            );
            sign_of.push(
                (0..dim)
                    .map(|d| {
                        if seed::mix64(sign_seed ^ seed::mix64(d as u64)) & 1 == 0 {
                            1.0
                        } else {
                            -1.0
                        }
                    })
                    .collect(),
            );
        }
        Ok(Self {
            rows,
            buckets,
            dim,
            salt: salt.to_vec(),
            client,
            round,
            bucket_of,
            sign_of,
        })
    }

    pub fn bucket(&self, row: usize, d: usize) -> usize {
        self.bucket_of[row][d] as usize
    }

    pub fn sign(&self, row: usize, d: usize) -> f64 {
        self.sign_of[row][d]
    }

    pub fn ratio(&self) -> f64 {
        compression_ratio(self.dim, self.rows, self.buckets)
    }

    /// True when no two coordinates share a bucket in any row.
    pub fn collision_free(&self) -> bool {
        self.bucket_of.iter().all(|row| {
            let mut seen = vec![false; self.buckets];
            row.iter().all(|&b| !std::mem::replace(&mut seen[b as usize], true))
        })
    }

    fn header(&self) -> SketchHeader {
        SketchHeader {
            rows: self.rows as u32,
            buckets: self.buckets as u32,
            dim: self.dim as u32,
            round: self.round,
            client: self.client,
        }
    }

    fn key(&self) -> u64 {
        seed::salted_hash(&self.salt, &[self.client, self.round, u64::MAX])
    }
}

/// Fixed-size prefix of every transmitted sketch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SketchHeader {
    pub rows: u32,
    pub buckets: u32,
    pub dim: u32,
    pub round: u64,
    pub client: u64,
}

impl SketchHeader {
    pub const BYTES: usize = 4 + 4 + 4 + 8 + 8;
}

/// An encoded vector: `rows x buckets` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Sketch {
    pub values: DMatrix<f64>,
    pub header: SketchHeader,
    key: u64,
}

impl Sketch {
    /// Wire bytes excluding the header.
    pub fn payload_bytes(&self, zeta: usize) -> usize {
        self.values.len() * zeta
    }

    /// Serializes as `[u32 Y][u32 Z][u32 D][u64 round][u64 client]` followed by
    /// `Y*Z` row-major values, all little-endian. `zeta` is 4 (f32) or 8 (f64).
    pub fn to_wire(&self, zeta: usize) -> Result<Vec<u8>> {
        if zeta != 4 && zeta != 8 {
            return Err(ElsaError::Config(format!("unsupported value width {zeta} bytes")));
        }
        let h = &self.header;
        let mut out = Vec::with_capacity(SketchHeader::BYTES + self.payload_bytes(zeta));
        out.extend_from_slice(&h.rows.to_le_bytes());
        out.extend_from_slice(&h.buckets.to_le_bytes());
        out.extend_from_slice(&h.dim.to_le_bytes());
        out.extend_from_slice(&h.round.to_le_bytes());
        out.extend_from_slice(&h.client.to_le_bytes());
        for j in 0..self.values.nrows() {
            for k in 0..self.values.ncols() {
                let v = self.values[(j, k)];
                if zeta == 4 {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                } else {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    /// Parses [`Sketch::to_wire`] output; decoding still needs matching params.
    pub fn from_wire(bytes: &[u8], zeta: usize, params: &SketchParams) -> Result<Self> {
        let bad = |m: &str| ElsaError::Decode(m.to_string());
        if bytes.len() < SketchHeader::BYTES {
            return Err(bad("truncated sketch header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let header = SketchHeader {
            rows: u32_at(0),
            buckets: u32_at(4),
            dim: u32_at(8),
            round: u64_at(12),
            client: u64_at(20),
        };
        let (y, z) = (header.rows as usize, header.buckets as usize);
        if bytes.len() != SketchHeader::BYTES + y * z * zeta {
            return Err(bad("sketch payload length does not match header"));
        }
        let body = &bytes[SketchHeader::BYTES..];
        let values = DMatrix::from_fn(y, z, |j, k| {
            let o = (j * z + k) * zeta;
            if zeta == 4 {
                f32::from_le_bytes(body[o..o + 4].try_into().unwrap()) as f64
            } else {
                f64::from_le_bytes(body[o..o + 8].try_into().unwrap())
            }
        });
        Ok(Self {
            values,
            header,
            key: params.key(),
        })
    }
}

/// `U[j, u] = sum over d with h_j(d) = u of sign_j(d) * h[d]`.
pub fn sketch_encode(h: &[f64], params: &SketchParams) -> Result<Sketch> {
    if h.len() != params.dim {
        return Err(ElsaError::Input(format!(
            "vector of length {} does not match sketch dim {}",
            h.len(),
            params.dim
        )));
    }
    let mut values = DMatrix::zeros(params.rows, params.buckets);
    for j in 0..params.rows {
        for (d, x) in h.iter().enumerate() {
            values[(j, params.bucket(j, d))] += params.sign(j, d) * x;
        }
    }
    Ok(Sketch {
        values,
        header: params.header(),
        key: params.key(),
    })
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Per-coordinate median over rows; even row counts average the middle pair.
pub fn sketch_decode(sk: &Sketch, params: &SketchParams) -> Result<Vec<f64>> {
    if sk.header != params.header() || sk.key != params.key() {
        return Err(ElsaError::Decode(
            "sketch was produced with different parameters".into(),
        ));
    }
    let mut est = vec![0.0; params.rows];
    Ok((0..params.dim)
        .map(|d| {
            for (j, e) in est.iter_mut().enumerate() {
                *e = params.sign(j, d) * sk.values[(j, params.bucket(j, d))];
            }
            median(&mut est)
        })
        .collect())
}

/// `rho = D / (Y Z)`.
pub fn compression_ratio(dim: usize, rows: usize, buckets: usize) -> f64 {
    dim as f64 / (rows * buckets) as f64
}

/// Bucket count giving roughly the requested ratio for `rows` hash rows.
pub fn buckets_for_ratio(dim: usize, rows: usize, ratio: f64) -> usize {
    ((dim as f64 / (ratio * rows as f64)).round() as usize).max(1)
}

/// Encodes and decodes every row of a matrix with one parameter set.
pub fn sketch_roundtrip_rows(m: &DMatrix<f64>, params: &SketchParams) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    let mut row = vec![0.0; m.ncols()];
    for i in 0..m.nrows() {
        for (k, r) in row.iter_mut().enumerate() {
            *r = m[(i, k)];
        }
        let dec = sketch_decode(&sketch_encode(&row, params)?, params)?;
        for (k, v) in dec.into_iter().enumerate() {
            out[(i, k)] = v;
        }
    }
    Ok(out)
}

/// What the uplink does to an activation before the edge sees it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChannelMode {
    #[serde(rename = "direct")]
    Direct,
    #[serde(rename = "gaussian-noise")]
    GaussianNoise,
    #[serde(rename = "sketch-only")]
    SketchOnly,
    #[serde(rename = "ssop+sketch")]
    SsopSketch,
}

/// Variance of the additive-noise baseline.
pub const GAUSSIAN_NOISE_VARIANCE: f64 = 0.25;

impl ChannelMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Self::Direct),
            "gaussian-noise" => Ok(Self::GaussianNoise),
            "sketch-only" => Ok(Self::SketchOnly),
            "ssop+sketch" => Ok(Self::SsopSketch),
            other => Err(ElsaError::Config(format!(
                "unknown codec mode '{other}' (expected direct | gaussian-noise | sketch-only | ssop+sketch)"
            ))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Direct => "direct",
            Self::GaussianNoise => "gaussian-noise",
            Self::SketchOnly => "sketch-only",
            Self::SsopSketch => "ssop+sketch",
        }
    }

    pub fn sketches(&self) -> bool {
        matches!(self, Self::SketchOnly | Self::SsopSketch)
    }

    pub fn all() -> [ChannelMode; 4] {
        [Self::Direct, Self::GaussianNoise, Self::SketchOnly, Self::SsopSketch]
    }
}

/// The uplink transform: returns what the receiving party observes.
///
/// `noise_seed` drives the gaussian baseline and is ignored otherwise.
pub fn channel_forward(
    h: &Activation,
    basis: Option<&PerturbationBasis>,
    params: &SketchParams,
    mode: ChannelMode,
    noise_seed: u64,
) -> Result<Activation> {
    if h.values.ncols() != params.dim {
        return Err(ElsaError::Input(format!(
            "activation width {} does not match sketch dim {}",
            h.values.ncols(),
            params.dim
        )));
    }
    match mode {
        ChannelMode::Direct => Ok(h.clone()),
        ChannelMode::GaussianNoise => {
            let mut rng = seed::rng_for(&[seed::tag::NOISE, noise_seed]);
            let normal = Normal::new(0.0, GAUSSIAN_NOISE_VARIANCE.sqrt()).unwrap();
            let noisy = h.values.map(|v| v + normal.sample(&mut rng));
            Activation::new(noisy, h.mask.clone())
        }
        ChannelMode::SketchOnly => Activation::new(sketch_roundtrip_rows(&h.values, params)?, h.mask.clone()),
        ChannelMode::SsopSketch => {
            let basis = basis.ok_or_else(|| {
                ElsaError::Config("ssop+sketch mode requires a perturbation basis".into())
            })?;
            let rotated = perturb(h, &basis.q)?;
            Activation::new(sketch_roundtrip_rows(&rotated.values, params)?, h.mask.clone())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, s: u64) -> DMatrix<f64> {
        let mut rng = seed::rng(s);
        let normal = Normal::new(0.0, 1.0).unwrap();
        DMatrix::from_fn(rows, cols, |_, _| normal.sample(&mut rng))
    }

    #[test]
    fn rank_one_subspace() {
        let mut j = DMatrix::zeros(5, 6);
        for i in 0..5 {
            j[(i, 0)] = 1.0;
        }
        let fit = fit_subspace(&j, 1).unwrap();
        assert!((fit.basis[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(!fit.degenerate);
        let fit2 = fit_subspace(&j, 3).unwrap();
        assert!(fit2.degenerate);
        let gram = fit2.basis.transpose() * &fit2.basis;
        assert!((gram - DMatrix::<f64>::identity(3, 3)).amax() < 1e-10);
    }

    #[test]
    fn subspace_rejects_oversized_rank() {
        assert!(fit_subspace(&DMatrix::zeros(3, 8), 4).is_err());
    }

    #[test]
    fn reconstruction_error_matches_tail_singular_values() {
        // full SVD oracle on an 8 x 16 matrix
        let j = random_matrix(8, 16, 3);
        let sv = j.clone().svd(false, false).singular_values;
        let mut s: Vec<f64> = sv.iter().cloned().collect();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for r in 1..8 {
            let u = fit_subspace(&j, r).unwrap().basis;
            let resid = &j - &j * &u * u.transpose();
            let tail: f64 = s[r..].iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((resid.norm() - tail).abs() < 1e-9, "r = {r}");
        }
    }

    #[test]
    fn rotation_is_orthogonal_and_deterministic() {
        for r in [1, 2, 5, 8] {
            let v = gen_rotation(b"s", 7, r);
            assert!((v.transpose() * &v - DMatrix::<f64>::identity(r, r)).amax() < 1e-10);
            assert_eq!(v, gen_rotation(b"s", 7, r));
        }
    }

    #[test]
    fn rotations_differ_across_clients() {
        let base = gen_rotation(b"salt", 0, 8);
        for n in 1..100u64 {
            let v = gen_rotation(b"salt", n, 8);
            assert!((&v - &base).norm() > 1e-3);
        }
    }

    #[test]
    fn identity_rotation_gives_identity() {
        let u = fit_subspace(&random_matrix(10, 6, 1), 3).unwrap().basis;
        let q = build_perturbation(&u, &DMatrix::identity(3, 3));
        assert!((q - DMatrix::<f64>::identity(6, 6)).amax() < 1e-12);
    }

    #[test]
    fn perturb_round_trip_and_norms() {
        let basis = PerturbationBasis::fit(&random_matrix(12, 8, 5), 3, b"k", 2).unwrap();
        let h = Activation::new(random_matrix(4, 8, 6), vec![true, true, true, false]).unwrap();
        let p = perturb(&h, &basis.q).unwrap();
        let back = perturb(&p, &basis.q.transpose()).unwrap();
        assert!((&back.values - &h.values).amax() < 1e-10);
        for i in 0..4 {
            assert!((p.values.row(i).norm() - h.values.row(i).norm()).abs() < 1e-10);
        }
        assert_eq!(p.mask, h.mask);
        let same = perturb(&h, &DMatrix::identity(8, 8)).unwrap();
        assert_eq!(same, h);
        assert!(perturb(&h, &DMatrix::identity(7, 7)).is_err());
    }

    #[test]
    fn encode_zero_and_linearity() {
        let p = SketchParams::new(3, 5, 12, b"x", 1, 0).unwrap();
        let z = sketch_encode(&[0.0; 12], &p).unwrap();
        assert!(z.values.iter().all(|v| *v == 0.0));
        assert!(sketch_decode(&z, &p).unwrap().iter().all(|v| *v == 0.0));
        let mut rng = seed::rng(9);
        let a: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let sum = sketch_encode(&a, &p).unwrap().values + sketch_encode(&b, &p).unwrap().values;
        assert!((sum - sketch_encode(&ab, &p).unwrap().values).amax() < 1e-12);
    }

    #[test]
    fn distinct_buckets_hold_signed_values() {
        // enumerate rounds until the three coordinates land in distinct buckets
        let h = [1.5, -2.0, 0.25];
        let p = (0..)
            .map(|round| SketchParams::new(1, 8, 3, b"enum", 0, round).unwrap())
            .find(|p| p.collision_free())
            .unwrap();
        let sk = sketch_encode(&h, &p).unwrap();
        for d in 0..3 {
            assert_eq!(sk.values[(0, p.bucket(0, d))], p.sign(0, d) * h[d]);
        }
        let nonzero = sk.values.iter().filter(|v| **v != 0.0).count();
        assert_eq!(nonzero, 3);
    }

    #[test]
    fn collision_free_decode_is_exact() {
        let h = [0.3, -1.7, 4.2];
        let p = (0..)
            .map(|round| SketchParams::new(3, 64, 3, b"cf", 5, round).unwrap())
            .find(|p| p.collision_free())
            .unwrap();
        let dec = sketch_decode(&sketch_encode(&h, &p).unwrap(), &p).unwrap();
        for (a, b) in dec.iter().zip(&h) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn decode_rejects_mismatched_params() {
        let p = SketchParams::new(2, 4, 6, b"a", 0, 0).unwrap();
        let sk = sketch_encode(&[1.0; 6], &p).unwrap();
        let other_round = SketchParams::new(2, 4, 6, b"a", 0, 1).unwrap();
        let other_salt = SketchParams::new(2, 4, 6, b"b", 0, 0).unwrap();
        assert!(matches!(sketch_decode(&sk, &other_round), Err(ElsaError::Decode(_))));
        assert!(matches!(sketch_decode(&sk, &other_salt), Err(ElsaError::Decode(_))));
    }

    #[test]
    fn even_row_median_is_mean_of_central_pair() {
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
        assert_eq!(median(&mut [5.0, 1.0, 3.0]), 3.0);
    }

    #[test]
    fn error_shrinks_as_buckets_grow() {
        let dim = 64;
        let mut prev = f64::INFINITY;
        for z in [8, 16, 32, 64, 128] {
            let mut total = 0.0;
            for s in 0..100u64 {
                let p = SketchParams::new(3, z, dim, b"sweep", s, 0).unwrap();
                let mut rng = seed::rng(1000 + s);
                let h: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let dec = sketch_decode(&sketch_encode(&h, &p).unwrap(), &p).unwrap();
                let err: f64 = dec.iter().zip(&h).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                total += err / h.iter().map(|x| x * x).sum::<f64>().sqrt();
            }
            let mean = total / 100.0;
            assert!(mean < prev, "Z = {z}: {mean} !< {prev}");
            prev = mean;
        }
    }

    #[test]
    fn ratios() {
        assert!((compression_ratio(768, 4, 91) - 2.1099).abs() < 1e-3);
        assert_eq!(compression_ratio(64, 2, 32), 1.0);
        assert_eq!(compression_ratio(768, 2, 32), 12.0);
        assert_eq!(buckets_for_ratio(32, 1, 4.0), 8);
    }

    #[test]
    fn wire_round_trip() {
        let p = SketchParams::new(2, 3, 5, b"w", 4, 9).unwrap();
        let sk = sketch_encode(&[0.5, 1.0, -2.0, 0.0, 3.25], &p).unwrap();
        let bytes = sk.to_wire(8).unwrap();
        assert_eq!(bytes.len(), SketchHeader::BYTES + 2 * 3 * 8);
        assert_eq!(Sketch::from_wire(&bytes, 8, &p).unwrap(), sk);
        let b4 = sk.to_wire(4).unwrap();
        assert_eq!(b4.len(), SketchHeader::BYTES + 2 * 3 * 4);
        assert!(Sketch::from_wire(&b4[..10], 4, &p).is_err());
    }

    #[test]
    fn channel_modes() {
        let h = Activation::new(random_matrix(4, 8, 2), vec![true; 4]).unwrap();
        let p = SketchParams::new(1, 2, 8, b"c", 0, 0).unwrap();
        assert_eq!(channel_forward(&h, None, &p, ChannelMode::Direct, 0).unwrap(), h);
        assert!(channel_forward(&h, None, &p, ChannelMode::SsopSketch, 0).is_err());
        assert!(ChannelMode::parse("carrier-pigeon").is_err());
        for m in ChannelMode::all() {
            assert_eq!(ChannelMode::parse(m.label()).unwrap(), m);
        }

        // sketch-only error is linear in scale
        let e1 = channel_forward(&h, None, &p, ChannelMode::SketchOnly, 0).unwrap().values - &h.values;
        let h2 = Activation::new(&h.values * 2.0, h.mask.clone()).unwrap();
        let e2 = channel_forward(&h2, None, &p, ChannelMode::SketchOnly, 0).unwrap().values - &h2.values;
        assert!(e1.norm() > 0.0);
        assert!((e2.norm() - 2.0 * e1.norm()).abs() < 1e-10);
    }

    #[test]
    fn ssop_through_collision_free_sketch_is_exact_rotation() {
        let h = Activation::new(random_matrix(3, 3, 8), vec![true; 3]).unwrap();
        let basis = PerturbationBasis::fit(&random_matrix(6, 3, 9), 2, b"salt", 1).unwrap();
        let p = (0..)
            .map(|round| SketchParams::new(1, 3, 3, b"salt", 1, round).unwrap())
            .find(|p| p.collision_free())
            .unwrap();
        assert_eq!(p.ratio(), 1.0);
        let out = channel_forward(&h, Some(&basis), &p, ChannelMode::SsopSketch, 0).unwrap();
        let want = perturb(&h, &basis.q).unwrap();
        assert!((out.values - want.values).amax() < 1e-12);
    }
}
