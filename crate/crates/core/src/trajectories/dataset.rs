//! Self-describing little-endian trajectory dataset.
//!
//! Layout: `"DSNO"`, u32 version, u32 d, u32 M, u64 N, f64 beta_min,
//! f64 beta_max, f64 t_min, f64 T, M × f64 grid times, then N records of
//! `d × f32` initial noise followed by `M·d × f32` trajectory values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{solve_trajectory, Solver, TimeGrid};
use crate::error::{Error, Result};
use crate::oracle::GaussianMixture;
use crate::schedule::NoiseSchedule;

pub const DATASET_MAGIC: &[u8; 4] = b"DSNO";
pub const DATASET_VERSION: u32 = 1;

const CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHeader {
    pub dim: usize,
    pub schedule: NoiseSchedule,
    pub grid: TimeGrid,
    pub len: u64,
}

impl DatasetHeader {
    pub fn resolution(&self) -> usize {
        self.grid.len()
    }

    fn record_floats(&self) -> usize {
        self.dim * (1 + self.grid.len())
    }

    fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.grid.len() as u32).to_le_bytes())?;
        w.write_all(&self.len.to_le_bytes())?;
        for v in [
            self.schedule.beta_min,
            self.schedule.beta_max,
            self.schedule.t_min,
            self.schedule.t_max,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for t in self.grid.times() {
            w.write_all(&t.to_le_bytes())?;
        }
        Ok(())
    }

    fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::format("dataset", "bad magic"));
        }
        let version = read_u32(r)?;
        if version != DATASET_VERSION {
            return Err(Error::format("dataset", format!("unsupported version {version}")));
        }
        let dim = read_u32(r)? as usize;
        let m = read_u32(r)? as usize;
        let len = read_u64(r)?;
        if dim == 0 || m == 0 {
            return Err(Error::format("dataset", "zero dimension or resolution"));
        }
        let beta_min = read_f64(r)?;
        let beta_max = read_f64(r)?;
        let t_min = read_f64(r)?;
        let t_max = read_f64(r)?;
        let schedule = NoiseSchedule::new(beta_min, beta_max, t_max, t_min)
            .map_err(|e| Error::format("dataset", e.to_string()))?;
        let times = (0..m).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
        let grid =
            TimeGrid::from_times(times).map_err(|e| Error::format("dataset", e.to_string()))?;
        Ok(Self {
            dim,
            schedule,
            grid,
            len,
        })
    }
}

/// Trajectories stored in single precision, as persisted.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub header: DatasetHeader,
    /// `N × d`.
    x_t: Vec<f32>,
    /// `N × M × d`.
    values: Vec<f32>,
}

impl TrajectoryDataset {
    pub fn new(header: DatasetHeader, x_t: Vec<f32>, values: Vec<f32>) -> Result<Self> {
        let n = header.len as usize;
        if x_t.len() != n * header.dim {
            return Err(Error::shape("dataset noise", n * header.dim, x_t.len()));
        }
        if values.len() != n * header.dim * header.resolution() {
            return Err(Error::shape(
                "dataset values",
                n * header.dim * header.resolution(),
                values.len(),
            ));
        }
        Ok(Self { header, x_t, values })
    }

    pub fn len(&self) -> usize {
        self.header.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.header.len == 0
    }

    pub fn dim(&self) -> usize {
        self.header.dim
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.header.grid
    }

    pub fn x_t(&self, j: usize) -> &[f32] {
        let d = self.header.dim;
        &self.x_t[j * d..(j + 1) * d]
    }

    /// All initial conditions, `N × d`.
    pub fn all_x_t(&self) -> &[f32] {
        &self.x_t
    }

    /// All recorded values, `N × M × d`.
    pub fn all_values(&self) -> &[f32] {
        &self.values
    }

    /// `M × d` values of record `j`.
    pub fn values(&self, j: usize) -> &[f32] {
        let w = self.header.dim * self.header.resolution();
        &self.values[j * w..(j + 1) * w]
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        self.header.write_to(w)?;
        for j in 0..self.len() {
            write_f32s(w, self.x_t(j))?;
            write_f32s(w, self.values(j))?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let header = DatasetHeader::read_from(r)?;
        let n = header.len as usize;
        let d = header.dim;
        let w = d * header.resolution();
        let mut x_t = Vec::with_capacity(n * d);
        let mut values = Vec::with_capacity(n * w);
        let mut buf = vec![0u8; 4 * header.record_floats()];
        for j in 0..n {
            r.read_exact(&mut buf).map_err(|e| {
                Error::format("dataset", format!("record {j} of {n} truncated: {e}"))
            })?;
            let mut floats = buf
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
            x_t.extend(floats.by_ref().take(d));
            values.extend(floats);
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(Error::format("dataset", "trailing bytes after last record"));
        }
        Self::new(header, x_t, values)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// Initial noise for record `j`: a standard normal vector seeded by
/// `base_seed + j`.
pub fn record_noise(base_seed: u64, j: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(j));
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Solves `n` trajectories in parallel and streams them to `path` in record
/// order. On an I/O failure the error reports how many records made it out.
#[allow(clippy::too_many_arguments)]
pub fn generate_dataset(
    gm: &GaussianMixture,
    sched: &NoiseSchedule,
    grid: &TimeGrid,
    n: u64,
    base_seed: u64,
    solver: Solver,
    substeps: usize,
    path: &Path,
) -> Result<DatasetHeader> {
    if n == 0 {
        return Err(Error::Config("dataset size N must be at least 1".into()));
    }
    let header = DatasetHeader {
        dim: gm.dim(),
        schedule: *sched,
        grid: grid.clone(),
        len: n,
    };
    let mut w = BufWriter::new(File::create(path)?);
    let partial = |written, source| Error::PartialWrite {
        written,
        total: n,
        source,
    };
    header.write_to(&mut w).map_err(|e| partial(0, e))?;

    let mut written = 0u64;
    while written < n {
        let end = (written + CHUNK as u64).min(n);
        let chunk = (written..end)
            .into_par_iter()
            .map(|j| {
                let x_t = record_noise(base_seed, j, gm.dim());
                solve_trajectory(gm, sched, &x_t, grid, solver, substeps)
            })
            .collect::<Result<Vec<_>>>()?;
        for traj in &chunk {
            let x32: Vec<f32> = traj.x_t.iter().map(|v| *v as f32).collect();
            let v32: Vec<f32> = traj.values.iter().map(|v| *v as f32).collect();
            write_f32s(&mut w, &x32)
                .and_then(|_| write_f32s(&mut w, &v32))
                .map_err(|e| partial(written, e))?;
            written += 1;
        }
    }
    w.flush().map_err(|e| partial(written, e))?;
    Ok(header)
}

fn write_f32s<W: Write>(w: &mut W, values: &[f32]) -> std::io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectories::{make_time_grid, GridScheme};

    fn setup() -> (GaussianMixture, NoiseSchedule, TimeGrid) {
        let sched = NoiseSchedule::default();
        let grid = make_time_grid(4, GridScheme::Quadratic, 1.0, sched.t_min).unwrap();
        (GaussianMixture::default_bimodal(), sched, grid)
    }

    #[test]
    fn header_layout_is_bit_exact() {
        let (gm, sched, grid) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.dsno");
        generate_dataset(&gm, &sched, &grid, 3, 7, Solver::Heun, 4, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"DSNO");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 4);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 3);
        assert_eq!(f64::from_le_bytes(bytes[24..32].try_into().unwrap()), 0.1);
        assert_eq!(f64::from_le_bytes(bytes[32..40].try_into().unwrap()), 20.0);
        assert_eq!(f64::from_le_bytes(bytes[40..48].try_into().unwrap()), 1e-3);
        assert_eq!(f64::from_le_bytes(bytes[48..56].try_into().unwrap()), 1.0);
        for (m, t) in grid.times().iter().enumerate() {
            let off = 56 + 8 * m;
            assert_eq!(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()), *t);
        }
        let header_len = 56 + 8 * 4;
        assert_eq!(bytes.len(), header_len + 3 * 4 * (2 + 8));
        let first = f32::from_le_bytes(bytes[header_len..header_len + 4].try_into().unwrap());
        assert_eq!(first, record_noise(7, 0, 2)[0] as f32);
    }

    #[test]
    fn round_trip_and_regeneration_are_bit_exact() {
        let (gm, sched, grid) = setup();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.dsno");
        let b = dir.path().join("b.dsno");
        generate_dataset(&gm, &sched, &grid, 10, 42, Solver::Heun, 8, &a).unwrap();
        generate_dataset(&gm, &sched, &grid, 10, 42, Solver::Heun, 8, &b).unwrap();
        let bytes = std::fs::read(&a).unwrap();
        assert_eq!(bytes, std::fs::read(&b).unwrap());

        let ds = TrajectoryDataset::load(&a).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.grid().times(), grid.times());
        assert_eq!(ds.header.schedule, sched);
        assert_eq!(ds.to_bytes(), bytes);
    }

    #[test]
    fn records_match_direct_solves() {
        let (gm, sched, grid) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.dsno");
        generate_dataset(&gm, &sched, &grid, 5, 100, Solver::Heun, 8, &path).unwrap();
        let ds = TrajectoryDataset::load(&path).unwrap();
        for j in 0..5 {
            let x = record_noise(100, j as u64, 2);
            let traj = solve_trajectory(&gm, &sched, &x, &grid, Solver::Heun, 8).unwrap();
            let expected: Vec<f32> = traj.values.iter().map(|v| *v as f32).collect();
            assert_eq!(ds.values(j), expected.as_slice());
        }
    }

    #[test]
    fn malformed_files_are_rejected() {
        let (gm, sched, grid) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dsno");
        generate_dataset(&gm, &sched, &grid, 2, 0, Solver::Euler, 2, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(TrajectoryDataset::read_from(&mut bad_magic.as_slice()).is_err());

        let truncated = &bytes[..bytes.len() - 3];
        assert!(TrajectoryDataset::read_from(&mut &truncated[..]).is_err());

        let mut extra = bytes.clone();
        extra.push(0);
        assert!(TrajectoryDataset::read_from(&mut extra.as_slice()).is_err());
    }

    #[test]
    fn zero_records_is_a_config_error() {
        let (gm, sched, grid) = setup();
        let dir = tempfile::tempdir().unwrap();
        let r = generate_dataset(&gm, &sched, &grid, 0, 0, Solver::Heun, 8, &dir.path().join("z"));
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
