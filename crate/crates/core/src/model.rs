//! The layered model: configuration chain, forward encoder, residual
//! downsampling and the unitary decoder.

use ndarray::{Array2, Array3, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::patch::{aggregate_patches, extract_patches, Image, PatchSpec, Volume};
use crate::scalar::Real;
use crate::transform::{hard_threshold_inplace, keep, CoefficientMaps, Unitary};

/// Hyper-parameters for one layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub patch: PatchSpec,
    /// Hard threshold used both in training and in encoding.
    pub eta: f64,
    /// Residual maps handed to the next layer. Ignored for the last layer.
    pub keep: usize,
    /// Alternations run when training this layer.
    pub iters: usize,
}

impl LayerConfig {
    pub fn new(patch: PatchSpec, eta: f64, keep: usize, iters: usize) -> Self {
        Self {
            patch,
            eta,
            keep,
            iters,
        }
    }

    /// Number of filters, i.e. the transform side.
    pub fn filters(&self) -> usize {
        self.patch.len()
    }
}

/// Checks a layer chain: first layer reads the image (depth 1), each later
/// layer's patch depth equals the previous layer's `keep`.
pub fn validate_chain(configs: &[LayerConfig]) -> Result<()> {
    if configs.is_empty() {
        return invalid("a model needs at least one layer");
    }
    let last = configs.len() - 1;
    let mut depth = 1;
    for (l, cfg) in configs.iter().enumerate() {
        let p = cfg.patch;
        if p.rows == 0 || p.cols == 0 || p.depth == 0 {
            return invalid(format!(
                "layer {}: empty patch {}x{}x{}",
                l + 1,
                p.rows,
                p.cols,
                p.depth
            ));
        }
        if p.depth != depth {
            return invalid(format!(
                "layer {}: patch depth {} but the incoming volume has {depth} maps",
                l + 1,
                p.depth
            ));
        }
        if !(cfg.eta >= 0.0) || !cfg.eta.is_finite() {
            return invalid(format!(
                "layer {}: threshold {} must be finite and >= 0",
                l + 1,
                cfg.eta
            ));
        }
        if cfg.iters == 0 {
            return invalid(format!("layer {}: at least one iteration is required", l + 1));
        }
        if l < last {
            if cfg.keep == 0 || cfg.keep > cfg.filters() {
                return invalid(format!(
                    "layer {}: keep = {} must lie in 1..={}",
                    l + 1,
                    cfg.keep,
                    cfg.filters()
                ));
            }
            depth = cfg.keep;
        }
    }
    Ok(())
}

/// A trained layer: its transform and, for all but the last layer, the
/// ascending indices of the residual maps forwarded to the next layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformLayer<F> {
    pub omega: Unitary<F>,
    pub retained: Option<Vec<usize>>,
}

/// An `L`-layer model. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct DeepRestModel<F> {
    layers: Vec<TransformLayer<F>>,
    configs: Vec<LayerConfig>,
    height: usize,
    width: usize,
}

impl<F: Real> DeepRestModel<F> {
    pub fn new(
        layers: Vec<TransformLayer<F>>,
        configs: Vec<LayerConfig>,
        (height, width): (usize, usize),
    ) -> Result<Self> {
        validate_chain(&configs)?;
        if layers.len() != configs.len() {
            return invalid(format!("{} layers but {} configs", layers.len(), configs.len()));
        }
        if height == 0 || width == 0 {
            return invalid("model image dimensions must be positive");
        }
        let last = layers.len() - 1;
        for (l, (layer, cfg)) in layers.iter().zip(&configs).enumerate() {
            if cfg.patch.rows > height || cfg.patch.cols > width {
                return invalid(format!("layer {}: patch larger than the {height}x{width} image", l + 1));
            }
            let m = cfg.filters();
            if layer.omega.side() != m {
                return invalid(format!(
                    "layer {}: transform side {} but patch length {m}",
                    l + 1,
                    layer.omega.side()
                ));
            }
            match (&layer.retained, l < last) {
                (Some(idx), true) => {
                    if idx.len() != cfg.keep {
                        return invalid(format!(
                            "layer {}: {} retained maps recorded, keep = {}",
                            l + 1,
                            idx.len(),
                            cfg.keep
                        ));
                    }
                    if idx.windows(2).any(|w| w[0] >= w[1]) || idx.iter().any(|&i| i >= m) {
                        return invalid(format!(
                            "layer {}: retained indices must be strictly ascending and below {m}",
                            l + 1
                        ));
                    }
                }
                (None, true) => {
                    return invalid(format!("layer {}: missing retained map indices", l + 1));
                }
                (Some(_), false) => {
                    return invalid("the last layer does not forward residual maps");
                }
                (None, false) => {}
            }
        }
        Ok(Self {
            layers,
            configs,
            height,
            width,
        })
    }

    pub fn layers(&self) -> &[TransformLayer<F>] {
        &self.layers
    }

    pub fn configs(&self) -> &[LayerConfig] {
        &self.configs
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn image_dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// Sparse coefficient maps of every layer for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedImage<F> {
    pub coeffs: Vec<CoefficientMaps<F>>,
    pub height: usize,
    pub width: usize,
}

impl<F: Real> EncodedImage<F> {
    pub fn nnz(&self) -> usize {
        self.coeffs
            .iter()
            .map(|z| z.iter().filter(|&&v| v != F::zero()).count())
            .sum()
    }
}

/// Output of one encoder layer.
#[derive(Clone, Debug)]
pub struct LayerOutput<F> {
    pub codes: CoefficientMaps<F>,
    /// Full-depth residual volume; `None` for the last layer.
    pub residual: Option<Volume<F>>,
}

/// Runs one layer: `Z = H_eta(Q P(vol))` and, unless `is_last`, the residual
/// `Q P(vol) - Z` with row `i` reshaped into residual map `i`.
pub fn forward_layer<F: Real>(
    vol: &Volume<F>,
    omega: &Unitary<F>,
    cfg: &LayerConfig,
    is_last: bool,
) -> Result<LayerOutput<F>> {
    if vol.depth() != cfg.patch.depth {
        return invalid(format!(
            "layer input has {} maps, patch depth is {}",
            vol.depth(),
            cfg.patch.depth
        ));
    }
    let p = extract_patches(vol, &cfg.patch)?;
    forward_patches(&p.view(), omega, F::lit(cfg.eta), is_last, vol.height(), vol.width())
}

/// [`forward_layer`] on an already extracted patch matrix.
pub(crate) fn forward_patches<F: Real>(
    p: &ArrayView2<'_, F>,
    omega: &Unitary<F>,
    eta: F,
    is_last: bool,
    height: usize,
    width: usize,
) -> Result<LayerOutput<F>> {
    let mut codes = omega.apply(p)?;
    if is_last {
        hard_threshold_inplace(&mut codes, eta);
        return Ok(LayerOutput { codes, residual: None });
    }
    let mut r = Array2::<F>::zeros(codes.raw_dim());
    Zip::from(&mut r).and(&mut codes).for_each(|r, z| {
        if !keep(*z, eta) {
            *r = *z;
            *z = F::zero();
        }
    });
    let residual = Some(Volume::from_maps(r, height, width)?);
    Ok(LayerOutput { codes, residual })
}

/// Keeps the `keep` highest-energy maps (ties go to the lower index) and
/// returns them in ascending index order together with their indices.
pub fn downsample_residuals<F: Real>(r: &Volume<F>, keep: usize) -> Result<(Volume<F>, Vec<usize>)> {
    if keep == 0 || keep > r.depth() {
        return invalid(format!("keep = {keep} must lie in 1..={}", r.depth()));
    }
    let energy = r.map_energies();
    let mut order: Vec<usize> = (0..r.depth()).collect();
    order.sort_by(|&a, &b| {
        energy[b]
            .partial_cmp(&energy[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut retained: Vec<usize> = order[..keep].to_vec();
    retained.sort_unstable();
    Ok((select_maps(r, &retained)?, retained))
}

/// Stacks the listed maps of `r` in the given order.
pub fn select_maps<F: Real>(r: &Volume<F>, indices: &[usize]) -> Result<Volume<F>> {
    if indices.iter().any(|&i| i >= r.depth()) {
        return invalid("map index out of range");
    }
    Volume::new(r.data().select(Axis(0), indices))
}

/// Inverse of [`select_maps`]: places each map at its recorded index in a
/// `depth`-deep volume and leaves every other map zero.
pub fn inflate_maps<F: Real>(r: &Volume<F>, indices: &[usize], depth: usize) -> Result<Volume<F>> {
    if indices.len() != r.depth() || indices.iter().any(|&i| i >= depth) {
        return invalid(format!(
            "cannot place {} maps at {} indices within depth {depth}",
            r.depth(),
            indices.len()
        ));
    }
    let (_, h, w) = r.dims();
    let mut out = Array3::<F>::zeros((depth, h, w));
    for (src, &dst) in r.data().outer_iter().zip(indices) {
        out.index_axis_mut(Axis(0), dst).assign(&src);
    }
    Volume::new(out)
}

/// Encodes `img` through every layer, reusing the stored retained-map lists.
pub fn encode<F: Real>(img: &Image<F>, model: &DeepRestModel<F>) -> Result<EncodedImage<F>> {
    if img.dims() != model.image_dims() {
        return invalid(format!(
            "image is {:?} but the model was trained at {:?}",
            img.dims(),
            model.image_dims()
        ));
    }
    let last = model.depth() - 1;
    let mut vol = img.to_volume();
    let mut coeffs = Vec::with_capacity(model.depth());
    for (l, (layer, cfg)) in model.layers.iter().zip(&model.configs).enumerate() {
        let out = forward_layer(&vol, &layer.omega, cfg, l == last)?;
        coeffs.push(out.codes);
        if let (Some(res), Some(idx)) = (out.residual, layer.retained.as_ref()) {
            vol = select_maps(&res, idx)?;
        }
    }
    Ok(EncodedImage {
        coeffs,
        height: img.height(),
        width: img.width(),
    })
}

/// Decodes coefficient maps back to an image by running the layers in
/// reverse: `P(R_{L-1}) = Q_L^T Z_L`, then `P(R_{j-1}) = Q_j^T (Z_j + R_j)`,
/// averaging overlapping patches and re-inserting dropped maps as zeros.
pub fn decode<F: Real>(enc: &EncodedImage<F>, model: &DeepRestModel<F>) -> Result<Image<F>> {
    let (h, w) = model.image_dims();
    if (enc.height, enc.width) != (h, w) {
        return invalid(format!(
            "codes are for a {}x{} image, model expects {h}x{w}",
            enc.height, enc.width
        ));
    }
    if enc.coeffs.len() != model.depth() {
        return invalid(format!(
            "{} coefficient layers for a {}-layer model",
            enc.coeffs.len(),
            model.depth()
        ));
    }
    for (l, (z, cfg)) in enc.coeffs.iter().zip(&model.configs).enumerate() {
        if z.dim() != (cfg.filters(), h * w) {
            return invalid(format!(
                "layer {}: codes are {:?}, expected {:?}",
                l + 1,
                z.dim(),
                (cfg.filters(), h * w)
            ));
        }
    }

    // Residual volume handed down from the layer above, already re-inflated
    // to the full filter count of the current layer.
    let mut residual: Option<Volume<F>> = None;
    for l in (0..model.depth()).rev() {
        let layer = &model.layers[l];
        let cfg = &model.configs[l];
        let mut rhs = enc.coeffs[l].clone();
        if let Some(r) = residual.take() {
            rhs = rhs + r.to_maps();
        }
        let patches = layer.omega.apply_transpose(&rhs.view())?;
        let vol = aggregate_patches(&patches.view(), (cfg.patch.depth, h, w), &cfg.patch)?;
        residual = Some(match l {
            0 => vol,
            _ => {
                let below = &model.layers[l - 1];
                let idx = below.retained.as_ref().expect("validated at construction");
                inflate_maps(&vol, idx, model.configs[l - 1].filters())?
            }
        });
    }
    residual.expect("at least one layer").into_image()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn vol_from(maps: &[&[f64]], h: usize, w: usize) -> Volume<f64> {
        let v: Vec<f64> = maps.iter().flat_map(|m| m.iter().copied()).collect();
        Volume::new(Array3::from_shape_vec((maps.len(), h, w), v).unwrap()).unwrap()
    }

    #[test]
    fn downsample_examples() {
        let r = vol_from(&[&[2.0, 1.0], &[0.0, 0.0], &[3.0, 0.0]], 1, 2);
        let (kept, idx) = downsample_residuals(&r, 2).unwrap();
        assert_eq!(idx, vec![0, 2]);
        assert_eq!(kept.depth(), 2);
        assert_eq!(kept.data().index_axis(Axis(0), 1), array![[3.0, 0.0]]);

        let (same, all) = downsample_residuals(&r, 3).unwrap();
        assert_eq!(all, vec![0, 1, 2]);
        assert_eq!(same, r);

        let ties = vol_from(&[&[1.0], &[-1.0], &[1.0]], 1, 1);
        assert_eq!(downsample_residuals(&ties, 2).unwrap().1, vec![0, 1]);

        assert!(downsample_residuals(&r, 0).is_err());
        assert!(downsample_residuals(&r, 4).is_err());
    }

    #[test]
    fn inflate_inverts_select() {
        let r = vol_from(&[&[1.0], &[2.0], &[3.0], &[4.0]], 1, 1);
        let s = select_maps(&r, &[1, 3]).unwrap();
        let back = inflate_maps(&s, &[1, 3], 4).unwrap();
        assert_eq!(
            back.data().iter().copied().collect::<Vec<_>>(),
            vec![0.0, 2.0, 0.0, 4.0]
        );
        assert!(inflate_maps(&s, &[1, 4], 4).is_err());
    }

    #[test]
    fn forward_layer_extremes() {
        let img = Image::from_vec(3, 3, (0..9).map(|v| v as f64 - 3.0).collect()).unwrap();
        let cfg = LayerConfig::new(PatchSpec::new(2, 2, 1).unwrap(), 0.0, 4, 1);
        let q = Unitary::dct2(2, 2).unwrap();
        let out = forward_layer(&img.to_volume(), &q, &cfg, false).unwrap();
        assert_eq!(out.residual.as_ref().unwrap().dims(), (4, 3, 3));
        assert!(out.residual.unwrap().data().iter().all(|&v| v == 0.0));

        let big = LayerConfig { eta: 1e6, ..cfg };
        let out = forward_layer(&img.to_volume(), &q, &big, false).unwrap();
        assert!(out.codes.iter().all(|&v| v == 0.0));
        let qp = q
            .apply(&extract_patches(&img.to_volume(), &cfg.patch).unwrap().view())
            .unwrap();
        assert_eq!(out.residual.unwrap().to_maps(), qp);

        let bad = LayerConfig::new(PatchSpec::new(1, 1, 2).unwrap(), 0.0, 1, 1);
        assert!(forward_layer(&img.to_volume(), &Unitary::identity(2).unwrap(), &bad, true).is_err());
    }

    #[test]
    fn chain_validation() {
        let l1 = LayerConfig::new(PatchSpec::new(2, 2, 1).unwrap(), 1.0, 3, 5);
        let l2 = LayerConfig::new(PatchSpec::fiber(3).unwrap(), 1.0, 3, 5);
        assert!(validate_chain(&[l1, l2]).is_ok());
        assert!(validate_chain(&[]).is_err());
        let wrong_depth = LayerConfig::new(PatchSpec::fiber(2).unwrap(), 1.0, 2, 5);
        assert!(validate_chain(&[l1, wrong_depth]).is_err());
        assert!(validate_chain(&[LayerConfig { keep: 5, ..l1 }, l2]).is_err());
        assert!(validate_chain(&[LayerConfig { eta: -1.0, ..l1 }]).is_err());
        assert!(validate_chain(&[LayerConfig { iters: 0, ..l1 }]).is_err());
        assert!(validate_chain(&[LayerConfig::new(PatchSpec::fiber(2).unwrap(), 0.0, 1, 1)]).is_err());
    }

    #[test]
    fn model_rejects_inconsistent_layers() {
        let cfg = LayerConfig::new(PatchSpec::new(2, 2, 1).unwrap(), 0.0, 4, 1);
        let layer = TransformLayer {
            omega: Unitary::<f64>::dct2(2, 2).unwrap(),
            retained: None,
        };
        assert!(DeepRestModel::new(vec![layer.clone()], vec![cfg], (4, 4)).is_ok());
        assert!(DeepRestModel::new(vec![layer.clone()], vec![cfg], (1, 4)).is_err());
        let wrong = TransformLayer {
            omega: Unitary::<f64>::identity(3).unwrap(),
            retained: None,
        };
        assert!(DeepRestModel::new(vec![wrong], vec![cfg], (4, 4)).is_err());
        let dangling = TransformLayer {
            retained: Some(vec![0, 1, 2, 3]),
            ..layer
        };
        assert!(DeepRestModel::new(vec![dangling], vec![cfg], (4, 4)).is_err());
    }

    #[test]
    fn zero_codes_decode_to_zero_image() {
        let cfgs = vec![
            LayerConfig::new(PatchSpec::new(2, 2, 1).unwrap(), 1.0, 2, 1),
            LayerConfig::new(PatchSpec::fiber(2).unwrap(), 1.0, 2, 1),
        ];
        let layers = vec![
            TransformLayer {
                omega: Unitary::<f64>::dct2(2, 2).unwrap(),
                retained: Some(vec![1, 3]),
            },
            TransformLayer {
                omega: Unitary::identity(2).unwrap(),
                retained: None,
            },
        ];
        let model = DeepRestModel::new(layers, cfgs, (3, 4)).unwrap();
        let enc = EncodedImage {
            coeffs: vec![Array2::zeros((4, 12)), Array2::zeros((2, 12))],
            height: 3,
            width: 4,
        };
        let img = decode(&enc, &model).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));

        let short = EncodedImage {
            coeffs: vec![Array2::zeros((4, 12))],
            height: 3,
            width: 4,
        };
        assert!(decode(&short, &model).is_err());
        assert!(encode(&Image::<f64>::zeros(4, 4).unwrap(), &model).is_err());
    }
}
