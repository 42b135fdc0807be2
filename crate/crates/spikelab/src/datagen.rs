//! Spiked cumulant datasets.
//!
//! Row μ is `x = λ u*/√d + S(ν v*/√d + z)` with `S = I − s·v*v*ᵀ/d`. The
//! whitening matrix is applied through its rank-one form and each row draws
//! from its own counter-indexed stream, so generation is reproducible under
//! any parallel split. Entries are stored as `f32` to halve memory; every
//! computation on them is carried out in `f64`.

use std::io::{self, Read, Write};
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::latents::LatentDistribution;
use crate::rng::stream;

const MAGIC: &[u8; 4] = b"SPKC";
const FORMAT_VERSION: u32 = 1;
const MAX_SPIKE_RETRIES: u64 = 8;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("spike draws were numerically collinear after {0} attempts")]
    DegenerateDraw(u64),
    #[error("dimension must be at least 2, got {0}")]
    DimensionTooSmall(usize),
    #[error("bad dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSpikes {
    pub u_star: Vec<f64>,
    pub v_star: Vec<f64>,
}

impl TeacherSpikes {
    pub fn dim(&self) -> usize {
        self.u_star.len()
    }
}

/// Raw Gaussian pair of attempt `attempt`, before orthogonalization.
pub fn raw_spike_draw(d: usize, seed: u64, attempt: u64) -> (Vec<f64>, Vec<f64>) {
    let mut ru = stream(seed, "spike-u", attempt);
    let mut rv = stream(seed, "spike-v", attempt);
    let u = (0..d).map(|_| ru.sample::<f64, _>(StandardNormal)).collect();
    let v = (0..d).map(|_| rv.sample::<f64, _>(StandardNormal)).collect();
    (u, v)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gaussian spikes, Gram–Schmidt orthogonalized and scaled to norm `√d`.
pub fn make_spikes(d: usize, seed: u64) -> Result<TeacherSpikes, DataError> {
    if d < 2 {
        return Err(DataError::DimensionTooSmall(d));
    }
    for attempt in 0..MAX_SPIKE_RETRIES {
        let (mut u, mut v) = raw_spike_draw(d, seed, attempt);
        let nu = dot(&u, &u).sqrt();
        let nv = dot(&v, &v).sqrt();
        if nu == 0.0 || nv == 0.0 {
            continue;
        }
        u.iter_mut().for_each(|x| *x /= nu);
        let c = dot(&u, &v);
        v.iter_mut().zip(&u).for_each(|(x, y)| *x -= c * y);
        let nperp = dot(&v, &v).sqrt();
        if nperp < 1e-6 * nv {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= nperp);
        // second pass removes the rounding residue of the first
        let c2 = dot(&u, &v);
        v.iter_mut().zip(&u).for_each(|(x, y)| *x -= c2 * y);
        let n2 = dot(&v, &v).sqrt();
        let sd = (d as f64).sqrt();
        u.iter_mut().for_each(|x| *x *= sd);
        v.iter_mut().for_each(|x| *x *= sd / n2);
        return Ok(TeacherSpikes { u_star: u, v_star: v });
    }
    Err(DataError::DegenerateDraw(MAX_SPIKE_RETRIES))
}

/// Scalar `s` of the whitening matrix `S = I − s·v*v*ᵀ/d`.
pub fn whitening_shrink(e_nu2: f64) -> f64 {
    e_nu2 / (1.0 + e_nu2 + (1.0 + e_nu2).sqrt())
}

#[derive(Debug, Clone)]
pub struct SpikedDataset {
    pub n: usize,
    pub d: usize,
    x: Vec<f32>,
    pub spikes: Arc<TeacherSpikes>,
    pub latent_kind: String,
    pub seed: u64,
    /// Latent pairs per row; empty when loaded from disk.
    pub latents: Vec<(f64, f64)>,
}

impl SpikedDataset {
    pub fn from_rows(
        x: Vec<f32>,
        n: usize,
        spikes: Arc<TeacherSpikes>,
        latent_kind: &str,
        seed: u64,
    ) -> Self {
        let d = spikes.dim();
        assert_eq!(x.len(), n * d);
        SpikedDataset { n, d, x, spikes, latent_kind: latent_kind.into(), seed, latents: Vec::new() }
    }

    pub fn alpha(&self) -> f64 {
        self.n as f64 / self.d as f64
    }

    pub fn row(&self, mu: usize) -> &[f32] {
        &self.x[mu * self.d..(mu + 1) * self.d]
    }

    pub fn data(&self) -> &[f32] {
        &self.x
    }

    /// Rows reordered by `perm` (row `k` of the result is row `perm[k]`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut x = Vec::with_capacity(self.x.len());
        for &p in perm {
            x.extend_from_slice(self.row(p));
        }
        let latents = if self.latents.is_empty() {
            Vec::new()
        } else {
            perm.iter().map(|&p| self.latents[p]).collect()
        };
        SpikedDataset { x, latents, ..self.clone() }
    }

    /// `X v / √d` for every row.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        let sd = (self.d as f64).sqrt();
        self.x
            .par_chunks(self.d)
            .map(|r| r.iter().zip(v).map(|(&a, &b)| a as f64 * b).sum::<f64>() / sd)
            .collect()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), DataError> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.n as u64).to_le_bytes())?;
        w.write_all(&(self.d as u64).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        let mut buf = Vec::with_capacity(8 * self.d);
        for r in self.x.chunks(self.d) {
            buf.clear();
            for &v in r {
                buf.extend_from_slice(&(v as f64).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        for spike in [&self.spikes.u_star, &self.spikes.v_star] {
            buf.clear();
            for &v in spike.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, DataError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(DataError::Format("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != FORMAT_VERSION {
            return Err(DataError::Format(format!("unsupported version {version}")));
        }
        let mut b8 = [0u8; 8];
        let mut next = |r: &mut R| -> Result<u64, DataError> {
            r.read_exact(&mut b8)?;
            Ok(u64::from_le_bytes(b8))
        };
        let n = next(&mut r)? as usize;
        let d = next(&mut r)? as usize;
        let seed = next(&mut r)?;
        let read_f64s = |r: &mut R, len: usize| -> Result<Vec<f64>, DataError> {
            let mut bytes = vec![0u8; 8 * len];
            r.read_exact(&mut bytes)?;
            Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let mut x = Vec::with_capacity(n * d);
        for _ in 0..n {
            x.extend(read_f64s(&mut r, d)?.into_iter().map(|v| v as f32));
        }
        let u_star = read_f64s(&mut r, d)?;
        let v_star = read_f64s(&mut r, d)?;
        Ok(SpikedDataset {
            n,
            d,
            x,
            spikes: Arc::new(TeacherSpikes { u_star, v_star }),
            latent_kind: "from-file".into(),
            seed,
            latents: Vec::new(),
        })
    }
}

/// Draw one row into `out`; returns the latent pair used.
pub fn generate_row(
    dist: &LatentDistribution,
    spikes: &TeacherSpikes,
    shrink: f64,
    seed: u64,
    mu: u64,
    out: &mut [f32],
) -> (f64, f64) {
    let d = spikes.dim();
    let sd = (d as f64).sqrt();
    let mut rng = stream(seed, "row", mu);
    let (lambda, nu) = dist.sample_one(&mut rng);
    let mut z = vec![0.0f64; d];
    for zi in z.iter_mut() {
        *zi = rng.sample(StandardNormal);
    }
    let v = &spikes.v_star;
    let u = &spikes.u_star;
    let vv = dot(v, v);
    // S(νv/√d + z) = νv/√d + z − (s/d)·vᵀ(νv/√d + z)·v
    let t = nu * vv / sd + dot(v, &z);
    let c = shrink * t / d as f64;
    for i in 0..d {
        out[i] = (lambda * u[i] / sd + nu * v[i] / sd + z[i] - c * v[i]) as f32;
    }
    (lambda, nu)
}

/// Generate `n` rows of the spiked cumulant model.
pub fn generate(
    dist: &LatentDistribution,
    spikes: Arc<TeacherSpikes>,
    n: usize,
    seed: u64,
) -> SpikedDataset {
    let d = spikes.dim();
    let s = whitening_shrink(dist.e_nu2);
    let mut x = vec![0f32; n * d];
    let latents: Vec<(f64, f64)> = x
        .par_chunks_mut(d)
        .enumerate()
        .map(|(mu, row)| generate_row(dist, &spikes, s, seed, mu as u64, row))
        .collect();
    SpikedDataset { n, d, x, spikes, latent_kind: dist.name(), seed, latents }
}

#[derive(Debug, Clone, Copy)]
pub struct SpikeProjection {
    pub proj_u: f64,
    pub proj_v: f64,
    pub cross: f64,
    /// Standard errors of the three estimates.
    pub se_u: f64,
    pub se_v: f64,
    pub se_cross: f64,
}

/// Quadratic forms of the empirical covariance along the spikes:
/// `u*ᵀΣ̂u*/d − 1`, `v*ᵀΣ̂v*/d − 1`, `u*ᵀΣ̂v*/d`.
pub fn covariance_spike_projection(ds: &SpikedDataset) -> SpikeProjection {
    let a = ds.project(&ds.spikes.u_star);
    let b = ds.project(&ds.spikes.v_star);
    let n = ds.n as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let stats = |f: &dyn Fn(usize) -> f64| {
        let vals: Vec<f64> = (0..ds.n).map(f).collect();
        let m = vals.iter().sum::<f64>() / (n - 1.0);
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (v / n).sqrt())
    };
    let (uu, se_u) = stats(&|i| (a[i] - ma).powi(2));
    let (vv, se_v) = stats(&|i| (b[i] - mb).powi(2));
    let (uv, se_cross) = stats(&|i| (a[i] - ma) * (b[i] - mb));
    SpikeProjection { proj_u: uu - 1.0, proj_v: vv - 1.0, cross: uv, se_u, se_v, se_cross }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shrink_values() {
        assert_eq!(whitening_shrink(0.0), 0.0);
        assert!((whitening_shrink(2.0) - 2.0 / (3.0 + 3f64.sqrt())).abs() < 1e-15);
        assert!((whitening_shrink(2.0) - 0.422_649_730_810_374).abs() < 1e-12);
        assert!((whitening_shrink(3.0) - 0.5).abs() < 1e-15);
        // 1 − s = 1/√(1+E[ν²])
        for e in [0.3, 1.0, 2.0, 7.5] {
            assert!((1.0 - whitening_shrink(e) - 1.0 / (1.0f64 + e).sqrt()).abs() < 1e-14);
        }
    }

    #[test]
    fn spikes_are_orthogonal_and_normalized() {
        for (d, seed) in [(2usize, 0u64), (2, 5), (17, 1), (1000, 3)] {
            let s = make_spikes(d, seed).unwrap();
            assert!(dot(&s.u_star, &s.v_star).abs() < 1e-10);
            assert!((dot(&s.u_star, &s.u_star) - d as f64).abs() < 1e-9);
            assert!((dot(&s.v_star, &s.v_star) - d as f64).abs() < 1e-9);
        }
        assert!(make_spikes(1, 0).is_err());
    }

    #[test]
    fn raw_draws_are_nearly_orthogonal() {
        let (u, v) = raw_spike_draw(1000, 3, 0);
        assert!(dot(&u, &v).abs() / 1000.0 < 0.2);
    }

    #[test]
    fn spikes_are_deterministic() {
        assert_eq!(make_spikes(50, 9).unwrap(), make_spikes(50, 9).unwrap());
        assert_ne!(make_spikes(50, 9).unwrap(), make_spikes(50, 10).unwrap());
    }

    #[test]
    fn rows_are_reproducible_from_seed_and_index() {
        let dist = LatentDistribution::k2_threshold();
        let spikes = Arc::new(make_spikes(30, 1).unwrap());
        let ds = generate(&dist, spikes.clone(), 40, 77);
        let mut row = vec![0f32; 30];
        let s = whitening_shrink(dist.e_nu2);
        let lat = generate_row(&dist, &spikes, s, 77, 23, &mut row);
        assert_eq!(&row[..], ds.row(23));
        assert_eq!(lat, ds.latents[23]);
    }

    #[test]
    fn binary_round_trip() {
        let dist = LatentDistribution::k3_sign_threshold();
        let spikes = Arc::new(make_spikes(12, 4).unwrap());
        let ds = generate(&dist, spikes, 9, 5);
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"SPKC");
        assert_eq!(buf.len(), 4 + 4 + 24 + 8 * (9 * 12 + 2 * 12));
        let back = SpikedDataset::read_from(&buf[..]).unwrap();
        assert_eq!(back.n, 9);
        assert_eq!(back.d, 12);
        assert_eq!(back.seed, 5);
        assert_eq!(back.data(), ds.data());
        assert_eq!(*back.spikes, *ds.spikes);
        assert!(SpikedDataset::read_from(&b"XXXX"[..]).is_err());
    }
}
