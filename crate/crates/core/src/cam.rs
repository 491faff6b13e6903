//! EigenCAM activation maps and their split into class-specific and
//! class-generic binary masks.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::tensor::{Grid, LatentTensor};

/// Normalized activation map for one class, entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CamMap {
    pub class: usize,
    pub map: Grid,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn filled(h: usize, w: usize, v: bool) -> Self {
        BinaryMask {
            h,
            w,
            data: vec![v; h * w],
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.w + j]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Class-specific (`≥ τ_h`) and class-generic (`≤ τ_l`) masks.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair {
    pub specific: BinaryMask,
    pub generic: BinaryMask,
    pub tau_h: f64,
    pub tau_l: f64,
}

/// How activation channels are weighted before the principal-component
/// projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CamMode {
    /// Channels scaled by the positive part of the class's head weights.
    #[default]
    ClassGated,
    /// Plain EigenCAM, identical for every class.
    Agnostic,
}

/// Projection of the (optionally gated) activations onto their first right
/// singular vector, sign-fixed to a non-negative sum with negatives clamped.
pub fn eigencam_raw(a: &LatentTensor, class_gate: Option<&[f64]>) -> Result<Grid> {
    let d = a.dims();
    if !a.is_finite() {
        return Err(Error::Numeric("non-finite activations".into()));
    }
    if let Some(g) = class_gate {
        if g.len() != d.c {
            return Err(Error::Shape(format!(
                "gate of length {} for {} activation channels",
                g.len(),
                d.c
            )));
        }
    }
    let n = d.spatial();
    let gated = DMatrix::from_fn(n, d.c, |p, k| {
        let gate = class_gate.map(|g| g[k].max(0.0)).unwrap_or(1.0);
        a.data()[p * d.c + k] * gate
    });
    if gated.iter().all(|&v| v == 0.0) {
        return Grid::new(d.h, d.w, vec![0.0; n]);
    }
    let gram = gated.transpose() * &gated;
    let eig = SymmetricEigen::new(gram);
    let top = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|x, y| x.1.total_cmp(y.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let v1 = eig.eigenvectors.column(top);
    let mut proj: Vec<f64> = (&gated * v1).iter().copied().collect();
    if proj.iter().sum::<f64>() < 0.0 {
        proj.iter_mut().for_each(|v| *v = -*v);
    }
    proj.iter_mut().for_each(|v| *v = v.max(0.0));
    Grid::new(d.h, d.w, proj)
}

/// Min-max scaling to `[0, 1]`; a constant map becomes all 0.5.
pub fn normalize_map(raw: &Grid, class: usize) -> CamMap {
    let min = raw.data.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let data = if max > min {
        raw.data.iter().map(|v| (v - min) / (max - min)).collect()
    } else {
        vec![0.5; raw.data.len()]
    };
    CamMap {
        class,
        map: Grid {
            h: raw.h,
            w: raw.w,
            data,
        },
    }
}

/// Bilinear resize with cell-centre sample points and edge clamping.
pub fn upsample_bilinear(m: &Grid, h: usize, w: usize) -> Result<Grid> {
    if h < m.h || w < m.w {
        return Err(Error::Unsupported(format!(
            "cannot shrink a {}x{} map to {h}x{w}",
            m.h, m.w
        )));
    }
    if h == m.h && w == m.w {
        return Ok(m.clone());
    }
    let source = |x: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let s = ((x as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(inp - 1);
        (lo, hi, s - lo as f64)
    };
    let mut data = Vec::with_capacity(h * w);
    for i in 0..h {
        let (i0, i1, fy) = source(i, h, m.h);
        for j in 0..w {
            let (j0, j1, fx) = source(j, w, m.w);
            let top = m.get(i0, j0) * (1.0 - fx) + m.get(i0, j1) * fx;
            let bottom = m.get(i1, j0) * (1.0 - fx) + m.get(i1, j1) * fx;
            data.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Grid::new(h, w, data)
}

pub fn threshold_masks(m: &CamMap, tau_h: f64, tau_l: f64) -> Result<MaskPair> {
    for (name, t) in [("tau_h", tau_h), ("tau_l", tau_l)] {
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::Config(format!("cam.{name}: {t} must lie in (0, 1)")));
        }
    }
    let (h, w) = (m.map.h, m.map.w);
    Ok(MaskPair {
        specific: BinaryMask {
            h,
            w,
            data: m.map.data.iter().map(|&v| v >= tau_h).collect(),
        },
        generic: BinaryMask {
            h,
            w,
            data: m.map.data.iter().map(|&v| v <= tau_l).collect(),
        },
        tau_h,
        tau_l,
    })
}

/// Normalized CAM of `class` for one classifier input, resized to the
/// input's spatial size.
pub fn class_cam(
    classifier: &Classifier,
    input: &LatentTensor,
    class: usize,
    mode: CamMode,
) -> Result<CamMap> {
    if class >= classifier.num_classes() {
        return Err(Error::Invalid(format!(
            "class {class} out of range {}",
            classifier.num_classes()
        )));
    }
    let scores = classifier.forward(input)?;
    let gate = match mode {
        CamMode::ClassGated => Some(classifier.head_weights(class)),
        CamMode::Agnostic => None,
    };
    let raw = eigencam_raw(&scores.activations, gate.as_deref())?;
    let d = input.dims();
    let raw = upsample_bilinear(&raw, d.h, d.w)?;
    Ok(normalize_map(&raw, class))
}

/// Binary greyscale PGM (P5, maxval 255).
pub fn write_pgm(map: &Grid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = format!("P5\n{} {}\n255\n", map.w, map.h).into_bytes();
    bytes.extend(
        map.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
