//! Greedy layer-wise training.
//!
//! Each layer minimizes `||Q P - Z||_F^2 + eta^2 ||Z||_0` over unitary `Q`
//! and codes `Z` by alternating the two closed-form updates (codes first,
//! then transform), with all earlier layers frozen. The residual maps of the
//! trained layer, minus the lowest-energy ones, feed the next layer.

use std::time::Instant;

use ndarray::{linalg::general_mat_mul, Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{downsample_residuals, forward_patches, validate_chain, DeepRestModel, LayerConfig, TransformLayer};
use crate::patch::{extract_patches, Image};
use crate::scalar::Real;
use crate::transform::{dct2_init, keep, procrustes_from_cross, CoefficientMaps, Unitary};

/// How each layer's transform is initialized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitPolicy {
    /// 2D DCT in the first layer, identity in later layers.
    #[default]
    DctThenIdentity,
    /// Identity everywhere.
    Identity,
}

impl InitPolicy {
    pub fn init<F: Real>(&self, layer: usize, cfg: &LayerConfig) -> Result<Unitary<F>> {
        match self {
            InitPolicy::DctThenIdentity if layer == 0 && cfg.patch.depth == 1 => {
                dct2_init(cfg.patch.rows, cfg.patch.cols)
            }
            _ => Unitary::identity(cfg.filters()),
        }
    }
}

/// Result of training one layer.
#[derive(Clone, Debug)]
pub struct LayerFit<F> {
    pub omega: Unitary<F>,
    /// Codes from the last code update.
    pub codes: CoefficientMaps<F>,
    /// Objective after each alternation, evaluated after the transform update.
    pub costs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub costs: Vec<f64>,
    /// `nnz(Z) / (m * N)` of the codes the trained layer produces.
    pub sparsity: f64,
    pub retained: Option<Vec<usize>>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub layers: Vec<LayerReport>,
}

impl TrainReport {
    pub fn total_seconds(&self) -> f64 {
        self.layers.iter().map(|l| l.seconds).sum()
    }
}

fn fit_cost<F: Real>(product: &Array2<F>, codes: &Array2<F>, eta: F) -> f64 {
    let mut fit = F::zero();
    let mut nnz = 0usize;
    Zip::from(product).and(codes).for_each(|&b, &z| {
        let d = b - z;
        fit = fit + d * d;
        nnz += (z != F::zero()) as usize;
    });
    (fit + eta * eta * F::of_usize(nnz)).as_f64()
}

/// Below this code density `P Z^T` is accumulated from the nonzeros only.
const SPARSE_CROSS_DENSITY: f64 = 0.2;

/// `P Z^T` visiting only nonzero codes. Needs column-contiguous patches and
/// row-major codes; returns `None` otherwise.
fn sparse_cross<F: Real>(patches: &ArrayView2<'_, F>, codes: &Array2<F>) -> Option<Array2<F>> {
    let (m, _) = patches.dim();
    if m > 1 && patches.strides()[0] != 1 {
        return None;
    }
    let p = patches.as_slice_memory_order()?;
    let z = codes.as_slice()?;
    let n = codes.ncols();
    let mut cross_t = Array2::<F>::zeros((codes.nrows(), m));
    for (j, mut acc) in cross_t.rows_mut().into_iter().enumerate() {
        let acc = acc.as_slice_mut().expect("row of a standard array");
        for (k, &zjk) in z[j * n..(j + 1) * n].iter().enumerate() {
            if zjk != F::zero() {
                for (a, &pv) in acc.iter_mut().zip(&p[k * m..(k + 1) * m]) {
                    *a = *a + zjk * pv;
                }
            }
        }
    }
    Some(cross_t.reversed_axes())
}

/// Runs `iters` alternations of code update then Procrustes transform update.
///
/// The cost of alternation `t` is read off the product `Q_{t+1} P` that the
/// next code update needs anyway, so only one extra product is spent.
pub fn train_layer<F: Real>(
    patches: &ArrayView2<'_, F>,
    init: Unitary<F>,
    eta: F,
    iters: usize,
) -> Result<LayerFit<F>> {
    let (m, n) = patches.dim();
    if init.side() != m {
        return invalid(format!(
            "initial transform side {} does not match {m} patch rows",
            init.side()
        ));
    }
    if iters == 0 {
        return invalid("train_layer needs at least one iteration");
    }
    if !(eta >= F::zero()) || !eta.is_finite() {
        return invalid(format!("threshold must be finite and non-negative, got {eta}"));
    }

    let mut omega = init;
    let mut product = Array2::<F>::zeros((m, n));
    let mut codes = Array2::<F>::zeros((m, n));
    let mut costs = Vec::with_capacity(iters);
    for t in 0..=iters {
        general_mat_mul(F::one(), &omega.matrix(), patches, F::zero(), &mut product);
        if t > 0 {
            costs.push(fit_cost(&product, &codes, eta));
        }
        if t == iters {
            break;
        }
        let mut nnz = 0usize;
        Zip::from(&mut codes).and(&product).for_each(|z, &b| {
            *z = if keep(b, eta) {
                nnz += 1;
                b
            } else {
                F::zero()
            };
        });
        let cross = if (nnz as f64) < SPARSE_CROSS_DENSITY * (m * n) as f64 {
            sparse_cross(patches, &codes).unwrap_or_else(|| patches.dot(&codes.t()))
        } else {
            patches.dot(&codes.t())
        };
        omega = procrustes_from_cross(&cross)?;
    }
    Ok(LayerFit { omega, codes, costs })
}

/// Trains a model on `img` with the given initialization policy.
pub fn train_model<F: Real>(
    img: &Image<F>,
    configs: &[LayerConfig],
    policy: InitPolicy,
) -> Result<(DeepRestModel<F>, TrainReport)> {
    let inits = configs
        .iter()
        .enumerate()
        .map(|(l, cfg)| policy.init(l, cfg))
        .collect::<Result<Vec<_>>>()?;
    train_model_with_inits(img, configs, inits)
}

/// Trains a model starting every layer from the supplied transform.
pub fn train_model_with_inits<F: Real>(
    img: &Image<F>,
    configs: &[LayerConfig],
    inits: Vec<Unitary<F>>,
) -> Result<(DeepRestModel<F>, TrainReport)> {
    validate_chain(configs)?;
    if inits.len() != configs.len() {
        return invalid(format!(
            "{} initial transforms for {} layers",
            inits.len(),
            configs.len()
        ));
    }
    let (h, w) = img.dims();
    let last = configs.len() - 1;
    let mut vol = img.to_volume();
    let mut layers = Vec::with_capacity(configs.len());
    let mut report = TrainReport::default();

    for (l, (cfg, init)) in configs.iter().zip(inits).enumerate() {
        let started = Instant::now();
        let eta = F::lit(cfg.eta);
        let patches = extract_patches(&vol, &cfg.patch)?;
        let fit = train_layer(&patches.view(), init, eta, cfg.iters)?;
        let out = forward_patches(&patches.view(), &fit.omega, eta, l == last, h, w)?;
        drop(patches);

        let nnz = out.codes.iter().filter(|&&v| v != F::zero()).count();
        let sparsity = nnz as f64 / out.codes.len() as f64;
        let retained = match out.residual {
            Some(res) => {
                let (kept, idx) = downsample_residuals(&res, cfg.keep)?;
                vol = kept;
                Some(idx)
            }
            None => None,
        };
        log::debug!(
            "layer {}: final cost {:.6e}, sparsity {:.4}",
            l + 1,
            fit.costs.last().copied().unwrap_or(f64::NAN),
            sparsity
        );
        report.layers.push(LayerReport {
            costs: fit.costs,
            sparsity,
            retained: retained.clone(),
            seconds: started.elapsed().as_secs_f64(),
        });
        layers.push(TransformLayer {
            omega: fit.omega,
            retained,
        });
    }

    let model = DeepRestModel::new(layers, configs.to_vec(), (h, w))?;
    Ok((model, report))
}

/// Tile shape used to display one atom of a layer.
fn atom_tile(cfg: &LayerConfig) -> (usize, usize) {
    if cfg.patch.depth == 1 {
        (cfg.patch.rows, cfg.patch.cols)
    } else {
        let side = (cfg.filters() as f64).sqrt().ceil() as usize;
        (side, side)
    }
}

/// Renders every atom (row) of a layer's transform as a tile, each
/// min-max normalized to 0..=255, on a square-ish grid with 1-pixel white
/// separators. Atoms of depth > 1 are zero-padded into the smallest square.
pub fn atom_montage<F: Real>(layer: &TransformLayer<F>, cfg: &LayerConfig) -> Result<Image<F>> {
    let m = layer.omega.side();
    if m != cfg.filters() {
        return invalid(format!(
            "transform side {m} does not match patch length {}",
            cfg.filters()
        ));
    }
    let (th, tw) = atom_tile(cfg);
    let grid_cols = (m as f64).sqrt().ceil() as usize;
    let grid_rows = m.div_ceil(grid_cols);
    let height = grid_rows * th + grid_rows - 1;
    let width = grid_cols * tw + grid_cols - 1;
    let white = F::lit(255.0);
    let mut out = Array2::from_elem((height, width), white);

    for (k, atom) in layer.omega.matrix().rows().into_iter().enumerate() {
        let mut tile = vec![F::zero(); th * tw];
        for (dst, &v) in tile.iter_mut().zip(atom.iter()) {
            *dst = v;
        }
        let lo = tile.iter().copied().fold(F::infinity(), F::min);
        let hi = tile.iter().copied().fold(F::neg_infinity(), F::max);
        let span = hi - lo;
        let (gr, gc) = (k / grid_cols, k % grid_cols);
        let (top, left) = (gr * (th + 1), gc * (tw + 1));
        for i in 0..th {
            for j in 0..tw {
                let v = tile[i * tw + j];
                out[[top + i, left + j]] = if span > F::zero() {
                    (v - lo) / span * white
                } else {
                    white / F::lit(2.0)
                };
            }
        }
    }
    Image::new(out)
}
