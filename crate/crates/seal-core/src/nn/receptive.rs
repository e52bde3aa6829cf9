//! Receptive-field geometry for convolutional prefixes.

use crate::error::{Result, SealError};
use crate::nn::{Layer, Network};

/// Input-plane rectangle that can influence one activation of a conv
/// layer. `top`/`left` may be negative or extend past the image when
/// padding pulls the window over the border; callers intersect with the
/// actual image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ReceptiveField {
    pub top: i64,
    pub left: i64,
    pub height: usize,
    pub width: usize,
}

impl ReceptiveField {
    /// Intersection with an H x W image, or None if disjoint.
    pub fn intersect(&self, h: usize, w: usize) -> Option<(usize, usize, usize, usize)> {
        let top = self.top.max(0);
        let left = self.left.max(0);
        let bottom = (self.top + self.height as i64 - 1).min(h as i64 - 1);
        let right = (self.left + self.width as i64 - 1).min(w as i64 - 1);
        if top > bottom || left > right {
            return None;
        }
        Some((
            top as usize,
            left as usize,
            (bottom - top + 1) as usize,
            (right - left + 1) as usize,
        ))
    }
}

/// Receptive field on the network input of position (row, col) of the
/// response map of conv layer `j`. Every layer before `j` must be
/// spatial-geometry preserving (elementwise, batch norm, squeeze-excite)
/// or a convolution; `j` itself must be a convolution.
pub fn receptive_field(
    net: &Network,
    j: usize,
    row: usize,
    col: usize,
) -> Result<ReceptiveField> {
    let layer = net.layer(j)?;
    let Layer::Conv2d { .. } = layer else {
        return Err(SealError::Precondition(format!(
            "receptive_field targets a conv2d layer, found {} at {j}",
            layer.kind_name()
        )));
    };

    let shapes = net.shapes()?;
    let out = layer.out_shape(&shapes[j])?;
    if row >= out[1] || col >= out[2] {
        return Err(SealError::InvalidArgument(format!(
            "position ({row}, {col}) outside layer-{j} response map {}x{}",
            out[1], out[2]
        )));
    }

    // Walk backward from the requested position through every conv,
    // growing the [lo, hi] ranges; geometry-preserving layers leave them
    // unchanged.
    let mut row_range = (row as i64, row as i64);
    let mut col_range = (col as i64, col as i64);
    for i in (0..=j).rev() {
        match net.layer(i)? {
            Layer::Conv2d {
                weight,
                stride,
                pad,
                ..
            } => {
                let k = weight.shape()[2] as i64;
                let (s, p) = (*stride as i64, *pad as i64);
                row_range = (row_range.0 * s - p, row_range.1 * s - p + k - 1);
                col_range = (col_range.0 * s - p, col_range.1 * s - p + k - 1);
            }
            Layer::Relu | Layer::Sigmoid | Layer::BatchNorm2d { .. } | Layer::SqEx { .. } => {}
            other => {
                return Err(SealError::Precondition(format!(
                    "layer {i} ({}) does not preserve spatial geometry",
                    other.kind_name()
                )))
            }
        }
    }

    Ok(ReceptiveField {
        top: row_range.0,
        left: col_range.0,
        height: (row_range.1 - row_range.0 + 1) as usize,
        width: (col_range.1 - col_range.0 + 1) as usize,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn conv(c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Layer {
        Layer::Conv2d {
            weight: Tensor::filled(&[c_out, c_in, k, k], 0.1),
            bias: Tensor::zeros(&[c_out]),
            stride,
            pad,
        }
    }

    #[test]
    fn single_conv_no_pad() {
        let net = Network::new(vec![1, 8, 8], vec![("c0".into(), conv(1, 2, 3, 1, 0))]).unwrap();
        let rf = receptive_field(&net, 0, 2, 4).unwrap();
        assert_eq!(
            rf,
            ReceptiveField {
                top: 2,
                left: 4,
                height: 3,
                width: 3
            }
        );
    }

    #[test]
    fn stacked_convs_grow_field() {
        let net = Network::new(
            vec![1, 16, 16],
            vec![
                ("c0".into(), conv(1, 2, 3, 1, 1)),
                ("a0".into(), Layer::Relu),
                ("c1".into(), conv(2, 2, 3, 2, 1)),
            ],
        )
        .unwrap();
        let rf = receptive_field(&net, 2, 0, 0).unwrap();
        // Layer c1 at (0,0): rows [-1, 1]; through c0: rows [-2, 2].
        assert_eq!(rf.top, -2);
        assert_eq!(rf.left, -2);
        assert_eq!(rf.height, 5);
        assert_eq!(rf.width, 5);
    }

    #[test]
    fn rejects_non_conv_target_and_bad_position() {
        let net = Network::new(
            vec![1, 8, 8],
            vec![("c0".into(), conv(1, 2, 3, 1, 0)), ("a".into(), Layer::Relu)],
        )
        .unwrap();
        assert!(receptive_field(&net, 1, 0, 0).is_err());
        assert!(receptive_field(&net, 0, 6, 0).is_err());
    }

    #[test]
    fn intersect_clips_to_image() {
        let rf = ReceptiveField {
            top: -2,
            left: 3,
            height: 5,
            width: 5,
        };
        assert_eq!(rf.intersect(8, 8), Some((0, 3, 3, 5)));
        let off = ReceptiveField {
            top: 100,
            left: 0,
            height: 2,
            width: 2,
        };
        assert_eq!(off.intersect(8, 8), None);
    }
}
