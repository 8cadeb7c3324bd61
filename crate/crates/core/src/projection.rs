//! Shared math substrate: activation/mask containers, bilinear rescaling,
//! concept projection, binarization, IoU and transformer token rearrangement.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};

use crate::error::{Error, Result};

/// One sample's activations at a single layer, `C×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTensor {
    data: Array3<f32>,
    layer_id: String,
}

impl ActivationTensor {
    pub fn new(data: Array3<f32>, layer_id: impl Into<String>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "activation dims must be >= 1, got {c}x{h}x{w}"
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("activation contains non-finite entries".into()));
        }
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
            layer_id: layer_id.into(),
        })
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn layer_id(&self) -> &str {
        &self.layer_id
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }
}

/// Binary foreground mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConceptMask {
    data: Array2<u8>,
    foreground_count: usize,
}

impl ConceptMask {
    pub fn new(data: Array2<u8>) -> Result<Self> {
        let mut count = 0;
        for &v in data.iter() {
            match v {
                0 => {}
                1 => count += 1,
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "mask values must be 0 or 1, found {other}"
                    )))
                }
            }
        }
        Ok(Self {
            data,
            foreground_count: count,
        })
    }

    pub fn from_fn(dim: (usize, usize), mut f: impl FnMut((usize, usize)) -> bool) -> Self {
        let data = Array2::from_shape_fn(dim, |ij| u8::from(f(ij)));
        let foreground_count = data.iter().filter(|&&v| v == 1).count();
        Self {
            data,
            foreground_count,
        }
    }

    pub fn data(&self) -> &Array2<u8> {
        &self.data
    }

    pub fn dim(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn foreground_count(&self) -> usize {
        self.foreground_count
    }

    pub fn pixel_count(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.foreground_count == 0
    }
}

/// Pre-sigmoid concept projection logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionMask {
    pub data: Array2<f64>,
}

impl ProjectionMask {
    pub fn dim(&self) -> (usize, usize) {
        self.data.dim()
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Source sample positions for corner-aligned bilinear resampling.
fn sample_grid(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let x = if dst == 1 {
                (src - 1) as f64 / 2.0
            } else {
                i as f64 * (src - 1) as f64 / (dst - 1) as f64
            };
            let lo = (x.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, x - lo as f64)
        })
        .collect()
}

fn bilinear<T: Copy + Into<f64>>(src: ArrayView2<T>, target: (usize, usize)) -> Array2<f64> {
    let (sh, sw) = src.dim();
    let rows = sample_grid(sh, target.0);
    let cols = sample_grid(sw, target.1);
    let at = |i: usize, j: usize| -> f64 { src[[i, j]].into() };
    Array2::from_shape_fn(target, |(i, j)| {
        let (r0, r1, fy) = rows[i];
        let (c0, c1, fx) = cols[j];
        let (a, b, c, d) = (at(r0, c0), at(r0, c1), at(r1, c0), at(r1, c1));
        // lerp form keeps constant fields exactly constant
        let top = a + fx * (b - a);
        let bottom = c + fx * (d - c);
        top + fy * (bottom - top)
    })
}

fn check_target(target: (usize, usize)) -> Result<()> {
    if target.0 == 0 || target.1 == 0 {
        return Err(Error::InvalidArgument(format!(
            "target resolution must be >= 1, got {}x{}",
            target.0, target.1
        )));
    }
    Ok(())
}

/// Bilinearly resamples every channel independently to `target` (corner-aligned).
pub fn rescale_activation(act: &ActivationTensor, target: (usize, usize)) -> Result<ActivationTensor> {
    check_target(target)?;
    if act.spatial() == target {
        return Ok(act.clone());
    }
    let c = act.channels();
    let mut out = Array3::<f32>::zeros((c, target.0, target.1));
    for (k, channel) in act.data.outer_iter().enumerate() {
        let resampled = bilinear(channel, target);
        out.index_axis_mut(Axis(0), k)
            .zip_mut_with(&resampled, |o, &v| *o = v as f32);
    }
    Ok(ActivationTensor {
        data: out,
        layer_id: act.layer_id.clone(),
    })
}

/// Bilinear resampling of the {0,1} field followed by a `>= 0.5` threshold.
pub fn rescale_mask(mask: &ConceptMask, target: (usize, usize)) -> Result<ConceptMask> {
    check_target(target)?;
    if mask.dim() == target {
        return Ok(mask.clone());
    }
    let field = bilinear(mask.data.view(), target);
    Ok(ConceptMask::from_fn(target, |ij| field[ij] >= 0.5))
}

/// Concept projection `P[i,j] = sum_k v_k * act[k,i,j]`.
pub fn project(v: &[f64], act: &ActivationTensor) -> Result<ProjectionMask> {
    project_raw(v, act.data())
}

pub(crate) fn project_raw(v: &[f64], act: &Array3<f32>) -> Result<ProjectionMask> {
    let (c, h, w) = act.dim();
    if v.len() != c {
        return Err(Error::DimensionMismatch(format!(
            "concept vector has {} entries, activation has {c} channels",
            v.len()
        )));
    }
    let mut out = vec![0.0f64; h * w];
    let flat = act
        .as_slice()
        .expect("activation tensors are kept in standard layout");
    for (k, &vk) in v.iter().enumerate() {
        if vk == 0.0 {
            continue;
        }
        let plane = &flat[k * h * w..(k + 1) * h * w];
        for (o, &a) in out.iter_mut().zip(plane) {
            *o += vk * f64::from(a);
        }
    }
    Ok(ProjectionMask {
        data: Array2::from_shape_vec((h, w), out).unwrap(),
    })
}

/// `1` where `sigmoid(P) > 0.5`, i.e. strictly `P > 0`.
pub fn binarize(p: &ProjectionMask) -> ConceptMask {
    ConceptMask::from_fn(p.dim(), |ij| p.data[ij] > 0.0)
}

/// Intersection over union; `0.0` when both masks are empty.
pub fn iou(a: &ConceptMask, b: &ConceptMask) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!(
            "iou of {:?} and {:?} masks",
            a.dim(),
            b.dim()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(b.data.iter()) {
        inter += usize::from(x & y);
        union += usize::from(x | y);
    }
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

/// Rearranges a `T×C` token sequence into `C×H×W` quasi-activations, dropping
/// the first `n_prefix_tokens` (class/register tokens). Token `i*W + j` lands
/// at spatial position `(i, j)`.
pub fn tokens_to_quasi_activations(
    tokens: ArrayView2<f32>,
    grid: (usize, usize),
    n_prefix_tokens: usize,
    layer_id: impl Into<String>,
) -> Result<ActivationTensor> {
    let (t, c) = tokens.dim();
    let (h, w) = grid;
    if t != n_prefix_tokens + h * w {
        return Err(Error::ShapeMismatch {
            what: format!("token sequence for {h}x{w} grid with {n_prefix_tokens} prefix tokens"),
            expected: vec![n_prefix_tokens + h * w, c],
            found: vec![t, c],
        });
    }
    let patches = tokens.slice(s![n_prefix_tokens.., ..]);
    // (HW, C) -> (C, HW) -> (C, H, W)
    let data = patches
        .t()
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, h, w))
        .expect("token count checked above");
    ActivationTensor::new(data, layer_id)
}

/// Inverse of [`tokens_to_quasi_activations`] on the patch tokens: `C×H×W -> HW×C`.
pub fn quasi_activations_to_tokens(act: &ActivationTensor) -> Array2<f32> {
    let (c, h, w) = act.data.dim();
    act.data
        .view()
        .into_shape_with_order((c, h * w))
        .unwrap()
        .t()
        .as_standard_layout()
        .into_owned()
}
