//! Wavelength-indexed patch embedding that accepts any band count.
//!
//! Each 10 nm interval of the spectrum owns a `[j, p, p]` weight slice in two banks, one for
//! the three key bands and one for the full cube. A cube's convolution weights are assembled by
//! looking up every band's wavelength, so the same parameters embed a 15-band and a 128-band
//! sensor into the same token space.

use rand::Rng;

use crate::cube::{key_bands, HyperCube, MAX_WAVELENGTH, MIN_WAVELENGTH};
use crate::error::{Error, Result};
use crate::numerics::{init, Graph, ParamId, ParamStore, Partition, Scalar, Tensor, Var};

pub const BASE_NM: f64 = 370.0;
pub const BIN_NM: f64 = 10.0;
pub const N_ENTRIES: usize = 134;
/// Typical band count used to scale the initial weights.
const TYPICAL_BANDS: f64 = 31.0;

/// Dictionary slot of a wavelength.
pub fn wavelength_index(lambda_nm: f32) -> Result<usize> {
    if !(lambda_nm >= MIN_WAVELENGTH && lambda_nm < MAX_WAVELENGTH) {
        return Err(Error::WavelengthOutOfRange(lambda_nm));
    }
    let i = ((lambda_nm as f64 - BASE_NM) / BIN_NM).floor() as usize;
    Ok(i.min(N_ENTRIES - 1))
}

/// Which bank of the dictionary a lookup reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bank {
    Key,
    Cube,
}

#[derive(Clone, Debug)]
pub struct WavelengthDictionary {
    key: Vec<ParamId>,
    cube: Vec<ParamId>,
    pub patch: usize,
    pub dim: usize,
}

impl WavelengthDictionary {
    pub fn register<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, patch: usize, dim: usize) -> Result<Self> {
        if patch == 0 || dim == 0 {
            return Err(Error::Invalid(format!("patch {patch} and token dim {dim} must be positive")));
        }
        let scale = 1.0 / (TYPICAL_BANDS * (patch * patch) as f64).sqrt();
        let shape = [dim, patch, patch];
        let mut key = Vec::with_capacity(N_ENTRIES);
        for i in 0..N_ENTRIES {
            key.push(store.add(format!("embed.key.{i}"), Partition::Backbone, init::uniform(rng, &shape, scale))?);
        }
        let mut cube = Vec::with_capacity(N_ENTRIES);
        for i in 0..N_ENTRIES {
            cube.push(store.add(format!("embed.cube.{i}"), Partition::Backbone, init::uniform(rng, &shape, scale))?);
        }
        Ok(Self { key, cube, patch, dim })
    }

    pub fn entry(&self, bank: Bank, index: usize) -> ParamId {
        match bank {
            Bank::Key => self.key[index],
            Bank::Cube => self.cube[index],
        }
    }

    /// Convolution weight `[j, c, p, p]` whose channel slot `i` is the entry for
    /// `wavelengths[i]`. Bands in the same bin share one parameter leaf.
    pub fn assemble_weights<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        bank: Bank,
        wavelengths: &[f32],
    ) -> Result<Var> {
        let slices = wavelengths
            .iter()
            .map(|&l| Ok(g.param(store, self.entry(bank, wavelength_index(l)?))))
            .collect::<Result<Vec<_>>>()?;
        g.stack_channels(&slices)
    }

    /// Token grid `[rows·cols, j]` in row-major cell order.
    pub fn embed<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, inputs: &BranchInputs) -> Result<Var> {
        let (h, w, p) = (inputs.height, inputs.width, self.patch);
        if h % p != 0 || w % p != 0 {
            return Err(Error::NotDivisible { height: h, width: w, patch: p });
        }
        let (rows, cols) = (h / p, w / p);
        let xk = g.input(Tensor::new(vec![1, 3, h, w], cast_vec(&inputs.key_data))?);
        let wk = self.assemble_weights(g, store, Bank::Key, &inputs.key_wavelengths)?;
        let tk = g.conv2d(xk, wk, p)?;
        let c = inputs.cube_wavelengths.len();
        let xc = g.input(Tensor::new(vec![1, c, h, w], cast_vec(&inputs.cube_data))?);
        let wc = self.assemble_weights(g, store, Bank::Cube, &inputs.cube_wavelengths)?;
        let tc = g.conv2d(xc, wc, p)?;
        let t = g.add(tk, tc)?;
        let t = g.reshape(t, &[self.dim, rows * cols])?;
        g.transpose(t)
    }
}

fn cast_vec<T: Scalar>(v: &[f32]) -> Vec<T> {
    v.iter().map(|&x| T::of(x as f64)).collect()
}

/// The two embedding inputs: three key bands and the full cube, band-sequential.
///
/// Bands are held in ascending wavelength order whatever order they arrived in, so the
/// embedding depends only on the set of (wavelength, plane) pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchInputs {
    pub height: usize,
    pub width: usize,
    /// Indices into the wavelength-sorted cube of the bands nearest 650, 550 and 450 nm.
    pub key_bands: [usize; 3],
    pub key_wavelengths: Vec<f32>,
    pub key_data: Vec<f32>,
    pub cube_wavelengths: Vec<f32>,
    pub cube_data: Vec<f32>,
}

impl BranchInputs {
    /// From bands in any order. Wavelengths must be distinct.
    pub fn from_bands(height: usize, width: usize, wavelengths: &[f32], data: &[f32]) -> Result<Self> {
        let c = wavelengths.len();
        let plane = height * width;
        if data.len() != plane * c {
            return Err(Error::shape(format!("{} values for {height}x{width}x{c}", data.len())));
        }
        if c < 3 {
            return Err(Error::TooFewBands(c));
        }
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| wavelengths[a].total_cmp(&wavelengths[b]));
        let sorted: Vec<f32> = order.iter().map(|&i| wavelengths[i]).collect();
        crate::cube::validate_wavelengths(&sorted)?;
        let mut cube_data = Vec::with_capacity(data.len());
        for &i in &order {
            cube_data.extend_from_slice(&data[i * plane..(i + 1) * plane]);
        }
        let key = key_bands(&sorted)?;
        let mut key_data = Vec::with_capacity(3 * plane);
        for &b in &key {
            key_data.extend_from_slice(&cube_data[b * plane..(b + 1) * plane]);
        }
        Ok(Self {
            height,
            width,
            key_bands: key,
            key_wavelengths: key.iter().map(|&b| sorted[b]).collect(),
            key_data,
            cube_wavelengths: sorted,
            cube_data,
        })
    }
}

pub fn split_branches(cube: &HyperCube) -> Result<BranchInputs> {
    BranchInputs::from_bands(cube.height(), cube.width(), cube.wavelengths(), cube.data())
}

/// Embedded tokens outside a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl TokenGrid {
    pub fn get(&self, row: usize, col: usize) -> &[f32] {
        let i = (row * self.cols + col) * self.dim;
        &self.data[i..i + self.dim]
    }
}

/// Embeds a cube without tracking gradients.
pub fn embed(cube: &HyperCube, dictionary: &WavelengthDictionary, store: &ParamStore<f32>) -> Result<TokenGrid> {
    let inputs = split_branches(cube)?;
    let mut g = Graph::new();
    let t = dictionary.embed(&mut g, store, &inputs)?;
    let p = dictionary.patch;
    Ok(TokenGrid { rows: cube.height() / p, cols: cube.width() / p, dim: dictionary.dim, data: g.value(t).data().to_vec() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, DEFAULT_EPS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cube(h: usize, w: usize, wl: Vec<f32>, seed: u64) -> HyperCube {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * wl.len()).map(|_| rng.gen::<f32>()).collect();
        HyperCube::new(h, w, wl, data).unwrap()
    }

    fn linspace(lo: f32, hi: f32, n: usize) -> Vec<f32> {
        (0..n).map(|i| lo + (hi - lo) * i as f32 / (n - 1) as f32).collect()
    }

    #[test]
    fn index_binning() {
        assert_eq!(wavelength_index(600.0).unwrap(), 23);
        assert_eq!(wavelength_index(377.0).unwrap(), 0);
        assert_eq!(wavelength_index(1700.0).unwrap(), 133);
        assert_eq!(wavelength_index(370.0).unwrap(), 0);
        assert!(wavelength_index(369.9).is_err());
        assert!(wavelength_index(1710.0).is_err());
    }

    #[test]
    fn weights_use_entries_by_bin() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let dict = WavelengthDictionary::register(&mut store, &mut rng, 2, 3).unwrap();
        let mut g = Graph::new();
        let w = dict.assemble_weights(&mut g, &store, Bank::Cube, &[450.0, 550.0, 650.0]).unwrap();
        assert_eq!(g.value(w).shape(), &[3, 3, 2, 2]);
        assert_eq!(g.referenced_params().len(), 3);
        let w = dict.assemble_weights(&mut g, &store, Bank::Key, &linspace(600.0, 975.0, 25)).unwrap();
        assert_eq!(g.value(w).shape(), &[3, 25, 2, 2]);
        // slot 0 holds entry 23 of the key bank
        let entry = store.get(dict.entry(Bank::Key, 23));
        let v = g.value(w);
        for jj in 0..3 {
            assert_eq!(&v.data()[jj * 100..jj * 100 + 4], &entry.data()[jj * 4..jj * 4 + 4]);
        }
    }

    #[test]
    fn shared_bin_accumulates_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let dict = WavelengthDictionary::register(&mut store, &mut rng, 2, 2).unwrap();
        // 601 and 605 nm share bin 23
        let c = cube(4, 4, vec![450.0, 601.0, 605.0, 700.0], 2);
        let inputs = split_branches(&c).unwrap();
        let shared = dict.entry(Bank::Cube, 23);
        let report = grad_check(
            |g, s| {
                let t = dict.embed(g, s, &inputs)?;
                let sq = g.mul(t, t)?;
                Ok(g.sum_all(sq))
            },
            &store,
            &[shared, dict.entry(Bank::Key, 23), dict.entry(Bank::Cube, 8)],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn split_picks_key_bands() {
        let b = split_branches(&cube(2, 2, vec![450.0, 550.0, 650.0], 0)).unwrap();
        assert_eq!(b.key_bands, [2, 1, 0]);
        assert_eq!(b.cube_wavelengths, vec![450.0, 550.0, 650.0]);
        let b = split_branches(&cube(2, 2, linspace(600.0, 975.0, 25), 0)).unwrap();
        assert!(b.key_wavelengths.iter().all(|&l| l >= 600.0));
        assert_eq!(b.key_bands, [3, 0, 0]);
        assert!(split_branches(&cube(2, 2, vec![400.0, 700.0], 0)).is_err());
    }

    #[test]
    fn zero_cube_bank_leaves_key_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f32>::new();
        let dict = WavelengthDictionary::register(&mut store, &mut rng, 4, 8).unwrap();
        let c = cube(8, 8, linspace(450.0, 900.0, 10), 3);
        let full = embed(&c, &dict, &store).unwrap();
        for i in 0..N_ENTRIES {
            store.get_mut(dict.entry(Bank::Cube, i)).data_mut().fill(0.0);
        }
        let key_only = embed(&c, &dict, &store).unwrap();
        assert_ne!(full, key_only);
        // recompute the key branch alone
        let inputs = split_branches(&c).unwrap();
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::new(vec![1, 3, 8, 8], inputs.key_data.clone()).unwrap());
        let w = dict.assemble_weights(&mut g, &store, Bank::Key, &inputs.key_wavelengths).unwrap();
        let y = g.conv2d(x, w, 4).unwrap();
        let y = g.reshape(y, &[8, 4]).unwrap();
        let y = g.transpose(y).unwrap();
        assert_eq!(g.value(y).data(), key_only.data.as_slice());
    }

    #[test]
    fn shapes_independent_of_band_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f32>::new();
        let dict = WavelengthDictionary::register(&mut store, &mut rng, 8, 16).unwrap();
        for wl in [linspace(600.0, 850.0, 15), linspace(450.0, 950.0, 128), linspace(600.0, 975.0, 25)] {
            let t = embed(&cube(64, 64, wl, 1), &dict, &store).unwrap();
            assert_eq!((t.rows, t.cols, t.dim, t.data.len()), (8, 8, 16, 8 * 8 * 16));
        }
        assert!(embed(&cube(12, 16, linspace(450.0, 650.0, 3), 0), &dict, &store).is_err());
    }

    #[test]
    fn zero_input_zero_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f32>::new();
        let dict = WavelengthDictionary::register(&mut store, &mut rng, 4, 8).unwrap();
        let c = HyperCube::new(8, 8, linspace(450.0, 700.0, 5), vec![0.0; 8 * 8 * 5]).unwrap();
        assert!(embed(&c, &dict, &store).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn band_permutation_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::<f32>::new();
        let dict = WavelengthDictionary::register(&mut store, &mut rng, 4, 8).unwrap();
        let c = cube(8, 8, linspace(400.0, 700.0, 31), 4);
        let base = split_branches(&c).unwrap();
        let mut g = Graph::new();
        let t0 = dict.embed(&mut g, &store, &base).unwrap();
        let plane = 64;
        let mut perm: Vec<usize> = (0..31).collect();
        perm.reverse();
        perm.swap(3, 17);
        let wl: Vec<f32> = perm.iter().map(|&i| c.wavelengths()[i]).collect();
        let data: Vec<f32> = perm.iter().flat_map(|&i| c.data()[i * plane..(i + 1) * plane].iter().copied()).collect();
        let shuffled = BranchInputs::from_bands(8, 8, &wl, &data).unwrap();
        let t1 = dict.embed(&mut g, &store, &shuffled).unwrap();
        assert_eq!(g.value(t0), g.value(t1));
    }
}
