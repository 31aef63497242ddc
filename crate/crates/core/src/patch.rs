//! Patch extraction and aggregation with circular boundaries.
//!
//! Patches are taken at stride 1 with wrap-around, so an `H x W` volume
//! always yields exactly `H * W` patches and every voxel is covered by
//! exactly `rows * cols` of them.
//!
//! Layout of a patch matrix (frozen, model files depend on it):
//!
//! * column `k` is the patch whose top-left corner sits at spatial position
//!   `k = r * W + c` (row-major over the image plane);
//! * inside a column, entry `d * rows * cols + i * cols + j` holds voxel
//!   `(d, (r + i) mod H, (c + j) mod W)`, i.e. depth-major, then patch row,
//!   then patch column.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, ShapeBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scalar::Real;

/// Patch matrix: one vectorized patch per column.
pub type PatchMatrix<F> = Array2<F>;

/// A 2D grayscale image with real intensities (nominally 0..=255, never clamped).
#[derive(Clone, Debug, PartialEq)]
pub struct Image<F> {
    data: Array2<F>,
}

impl<F: Real> Image<F> {
    pub fn new(data: Array2<F>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return invalid(format!("image must be non-empty, got {:?}", data.dim()));
        }
        Ok(Self { data })
    }

    pub fn from_vec(height: usize, width: usize, values: Vec<F>) -> Result<Self> {
        if values.len() != height * width {
            return invalid(format!("{} values do not fill a {height}x{width} image", values.len()));
        }
        let data = Array2::from_shape_vec((height, width), values)
            .map_err(|e| crate::Error::InvalidArgument(e.to_string()))?;
        Self::new(data)
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(Array2::zeros((height, width)))
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> ArrayView2<'_, F> {
        self.data.view()
    }

    pub fn data_mut(&mut self) -> &mut Array2<F> {
        &mut self.data
    }

    pub fn into_inner(self) -> Array2<F> {
        self.data
    }

    /// Copies out the `height x width` window starting at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height() || left + width > self.width() {
            return invalid(format!(
                "crop {height}x{width}@({top},{left}) exceeds image {:?}",
                self.dims()
            ));
        }
        Self::new(
            self.data
                .slice(ndarray::s![top..top + height, left..left + width])
                .to_owned(),
        )
    }

    /// Views the image as a depth-1 volume.
    pub fn to_volume(&self) -> Volume<F> {
        let (h, w) = self.dims();
        let data = self
            .data
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((1, h, w))
            .expect("depth-1 reshape");
        Volume { data }
    }
}

/// A stack of residual maps, indexed `(map, row, col)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<F> {
    data: Array3<F>,
}

impl<F: Real> Volume<F> {
    pub fn new(data: Array3<F>) -> Result<Self> {
        let (d, h, w) = data.dim();
        if d == 0 || h == 0 || w == 0 {
            return invalid(format!("volume must be non-empty, got {:?}", (d, h, w)));
        }
        Ok(Self { data })
    }

    pub fn zeros(depth: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(Array3::zeros((depth, height, width)))
    }

    /// Builds a volume from a `depth x (height * width)` matrix whose rows are
    /// row-major maps.
    pub fn from_maps(maps: Array2<F>, height: usize, width: usize) -> Result<Self> {
        let depth = maps.nrows();
        if maps.ncols() != height * width {
            return invalid(format!(
                "map matrix has {} columns, expected {height}x{width}",
                maps.ncols()
            ));
        }
        let data = maps
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((depth, height, width))
            .map_err(|e| crate::Error::InvalidArgument(e.to_string()))?;
        Self::new(data)
    }

    pub fn depth(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> ArrayView3<'_, F> {
        self.data.view()
    }

    pub fn into_inner(self) -> Array3<F> {
        self.data
    }

    /// Flattens to a `depth x (height * width)` matrix, one map per row.
    pub fn to_maps(&self) -> Array2<F> {
        let (d, h, w) = self.dims();
        self.data
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((d, h * w))
            .expect("contiguous reshape")
    }

    /// Sum of squares of each map.
    pub fn map_energies(&self) -> Vec<F> {
        self.data.outer_iter().map(|m| m.iter().map(|&v| v * v).sum()).collect()
    }

    pub fn frobenius_sq(&self) -> F {
        self.data.iter().map(|&v| v * v).sum()
    }

    /// Drops the depth axis of a depth-1 volume.
    pub fn into_image(self) -> Result<Image<F>> {
        let (d, h, w) = self.dims();
        if d != 1 {
            return invalid(format!("cannot view depth-{d} volume as an image"));
        }
        let data = self
            .data
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((h, w))
            .expect("depth-1 reshape");
        Image::new(data)
    }
}

impl<F: Real> From<Image<F>> for Volume<F> {
    fn from(img: Image<F>) -> Self {
        img.to_volume()
    }
}

/// Patch geometry `rows x cols x depth`. The spatial stride is always 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchSpec {
    pub rows: usize,
    pub cols: usize,
    pub depth: usize,
}

impl PatchSpec {
    pub fn new(rows: usize, cols: usize, depth: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || depth == 0 {
            return invalid(format!("patch dimensions must be positive, got {rows}x{cols}x{depth}"));
        }
        Ok(Self { rows, cols, depth })
    }

    /// A `1 x 1 x depth` patch: the depth fiber at one pixel.
    pub fn fiber(depth: usize) -> Result<Self> {
        Self::new(1, 1, depth)
    }

    /// Number of entries in a vectorized patch.
    pub fn len(&self) -> usize {
        self.rows * self.cols * self.depth
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// How many patches cover each voxel.
    pub fn coverage(&self) -> usize {
        self.rows * self.cols
    }

    fn check_fits(&self, depth: usize, height: usize, width: usize) -> Result<()> {
        if self.depth != depth {
            return invalid(format!(
                "patch depth {} does not match volume depth {depth}",
                self.depth
            ));
        }
        if self.rows > height || self.cols > width {
            return invalid(format!(
                "{}x{} patch does not fit a {height}x{width} plane",
                self.rows, self.cols
            ));
        }
        Ok(())
    }
}

/// Extracts every wrap-around patch of `vol`, one per column.
///
/// The returned matrix is stored column-major so each patch is contiguous.
pub fn extract_patches<F: Real>(vol: &Volume<F>, spec: &PatchSpec) -> Result<PatchMatrix<F>> {
    let (depth, height, width) = vol.dims();
    spec.check_fits(depth, height, width)?;

    let n = spec.len();
    let mut out = Array2::<F>::zeros((n, height * width).f());
    let src = vol.data.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let dst = out
        .as_slice_memory_order_mut()
        .expect("freshly allocated array is contiguous");

    let plane = height * width;
    for r in 0..height {
        let rows: Vec<usize> = (0..spec.rows).map(|i| (r + i) % height).collect();
        for c in 0..width {
            let cols: Vec<usize> = (0..spec.cols).map(|j| (c + j) % width).collect();
            let column = &mut dst[(r * width + c) * n..(r * width + c + 1) * n];
            let mut idx = 0;
            for d in 0..depth {
                let base = d * plane;
                for &rr in &rows {
                    let row_base = base + rr * width;
                    for &cc in &cols {
                        column[idx] = src[row_base + cc];
                        idx += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`extract_patches`]: every voxel becomes the mean of all patch
/// entries that map onto it (`rows * cols` of them).
pub fn aggregate_patches<F: Real>(
    patches: &ArrayView2<'_, F>,
    dims: (usize, usize, usize),
    spec: &PatchSpec,
) -> Result<Volume<F>> {
    let (depth, height, width) = dims;
    if depth == 0 || height == 0 || width == 0 {
        return invalid(format!("target volume must be non-empty, got {dims:?}"));
    }
    spec.check_fits(depth, height, width)?;
    let n = spec.len();
    if patches.nrows() != n || patches.ncols() != height * width {
        return invalid(format!(
            "patch matrix is {}x{}, expected {n}x{} for {dims:?}",
            patches.nrows(),
            patches.ncols(),
            height * width
        ));
    }

    let plane = height * width;
    let mut acc = vec![F::zero(); depth * plane];
    let mut column = vec![F::zero(); n];
    for r in 0..height {
        let rows: Vec<usize> = (0..spec.rows).map(|i| (r + i) % height).collect();
        for c in 0..width {
            let cols: Vec<usize> = (0..spec.cols).map(|j| (c + j) % width).collect();
            for (dst, &v) in column.iter_mut().zip(patches.column(r * width + c)) {
                *dst = v;
            }
            let mut idx = 0;
            for d in 0..depth {
                let base = d * plane;
                for &rr in &rows {
                    let row_base = base + rr * width;
                    for &cc in &cols {
                        acc[row_base + cc] = acc[row_base + cc] + column[idx];
                        idx += 1;
                    }
                }
            }
        }
    }

    let scale = F::of_usize(spec.coverage());
    for v in acc.iter_mut() {
        *v = *v / scale;
    }
    let data = Array3::from_shape_vec((depth, height, width), acc).expect("sized above");
    Volume::new(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};
    use proptest::prelude::*;

    fn image(rows: &[&[f64]]) -> Volume<f64> {
        let h = rows.len();
        let w = rows[0].len();
        let v: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Image::from_vec(h, w, v).unwrap().to_volume()
    }

    #[test]
    fn unit_patches_vectorize_the_image() {
        let vol = image(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let p = extract_patches(&vol, &PatchSpec::new(1, 1, 1).unwrap()).unwrap();
        assert_eq!(p, array![[1.0, 2.0, 3.0, 4.0]]);
    }

    #[test]
    fn wrapped_2x2_patches() {
        let vol = image(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let p = extract_patches(&vol, &PatchSpec::new(2, 2, 1).unwrap()).unwrap();
        // Hand enumeration of the four wrapped windows.
        let expected = array![
            [1.0, 2.0, 3.0, 4.0],
            [2.0, 1.0, 4.0, 3.0],
            [3.0, 4.0, 1.0, 2.0],
            [4.0, 3.0, 2.0, 1.0],
        ];
        assert_eq!(p, expected);
        for col in p.columns() {
            assert_eq!(col.sum(), 10.0);
            let mut v: Vec<f64> = col.to_vec();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(v, vec![1.0, 2.0, 3.0, 4.0]);
        }
    }

    #[test]
    fn depth_fibers() {
        let data = Array3::from_shape_vec((2, 2, 3), (0..12).map(f64::from).collect()).unwrap();
        let vol = Volume::new(data).unwrap();
        let p = extract_patches(&vol, &PatchSpec::fiber(2).unwrap()).unwrap();
        assert_eq!(p.dim(), (2, 6));
        for k in 0..6 {
            assert_eq!(p[[0, k]], k as f64);
            assert_eq!(p[[1, k]], (k + 6) as f64);
        }
    }

    #[test]
    fn depth_mismatch_is_rejected() {
        let vol = image(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert!(extract_patches(&vol, &PatchSpec::new(1, 1, 2).unwrap()).is_err());
        assert!(extract_patches(&vol, &PatchSpec::new(3, 1, 1).unwrap()).is_err());
        assert!(PatchSpec::new(0, 1, 1).is_err());
    }

    #[test]
    fn aggregate_of_zeros_is_zero() {
        let spec = PatchSpec::new(2, 3, 1).unwrap();
        let pm = Array2::<f64>::zeros((6, 20));
        let v = aggregate_patches(&pm.view(), (1, 4, 5), &spec).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn aggregate_averages_over_coverage() {
        let vol = image(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let spec = PatchSpec::new(2, 2, 1).unwrap();
        let mut p = extract_patches(&vol, &spec).unwrap();
        // Column 1 is anchored at (0,1); its entry 0 maps to voxel (0,1).
        p[[0, 1]] += 4.0;
        let out = aggregate_patches(&p.view(), (1, 2, 2), &spec).unwrap();
        let expected = array![[1.0, 3.0], [3.0, 4.0]];
        assert_eq!(out.data().index_axis(ndarray::Axis(0), 0), expected);
    }

    #[test]
    fn aggregate_rejects_bad_dims() {
        let spec = PatchSpec::new(2, 2, 1).unwrap();
        let pm = Array2::<f64>::zeros((4, 5));
        assert!(aggregate_patches(&pm.view(), (1, 2, 2), &spec).is_err());
        assert!(aggregate_patches(&pm.view(), (2, 1, 5), &spec).is_err());
    }

    #[test]
    fn volume_map_round_trip() {
        let data = Array3::from_shape_vec((3, 2, 2), (0..12).map(f64::from).collect()).unwrap();
        let vol = Volume::new(data).unwrap();
        let maps = vol.to_maps();
        assert_eq!(maps.row(2).to_vec(), vec![8.0, 9.0, 10.0, 11.0]);
        assert_eq!(Volume::from_maps(maps, 2, 2).unwrap(), vol);
        assert_eq!(vol.map_energies(), vec![14.0, 126.0, 366.0]);
    }

    fn volume_strategy() -> impl Strategy<Value = (Volume<f64>, PatchSpec)> {
        (1usize..4, 1usize..7, 1usize..7)
            .prop_flat_map(|(d, h, w)| {
                (
                    proptest::collection::vec(-100.0f64..100.0, d * h * w),
                    Just((d, h, w)),
                    1..=h,
                    1..=w,
                )
            })
            .prop_map(|(v, (d, h, w), a, b)| {
                let vol = Volume::new(Array3::from_shape_vec((d, h, w), v).unwrap()).unwrap();
                (vol, PatchSpec::new(a, b, d).unwrap())
            })
    }

    proptest! {
        #[test]
        fn round_trip_recovers_volume((vol, spec) in volume_strategy()) {
            let p = extract_patches(&vol, &spec).unwrap();
            prop_assert_eq!(p.ncols(), vol.height() * vol.width());
            let back = aggregate_patches(&p.view(), vol.dims(), &spec).unwrap();
            for (x, y) in back.data().iter().zip(vol.data().iter()) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }

        #[test]
        fn energy_scales_with_coverage((vol, spec) in volume_strategy()) {
            let p = extract_patches(&vol, &spec).unwrap();
            let lhs: f64 = p.iter().map(|v| v * v).sum();
            let rhs = spec.coverage() as f64 * vol.frobenius_sq();
            prop_assert!((lhs - rhs).abs() <= 1e-10 * rhs.max(1.0));
        }

        #[test]
        fn extraction_is_linear((u, spec) in volume_strategy(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let v = Volume::new(u.data().mapv(|x| (x * 0.37).sin() * 50.0)).unwrap();
            let mix = Volume::new(&u.data() * alpha + &v.data() * beta).unwrap();
            let lhs = extract_patches(&mix, &spec).unwrap();
            let rhs = extract_patches(&u, &spec).unwrap() * alpha + extract_patches(&v, &spec).unwrap() * beta;
            for (x, y) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((x - y).abs() <= 1e-10);
            }
        }
    }
}
