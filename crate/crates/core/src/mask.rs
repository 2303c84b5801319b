//! Multi-object soft masks and label maps.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-object soft segmentation planes over the pixel domain, object ids
/// 1..=num_objects (0 is background in label maps).
#[derive(Clone, Debug, PartialEq)]
pub struct Mask<S: Scalar = f32> {
    /// [objects, H, W]
    planes: Tensor<S>,
}

impl<S: Scalar> Mask<S> {
    pub fn new(planes: Tensor<S>) -> Self {
        assert!(
            planes.shape().len() == 3 && planes.shape()[0] >= 1,
            "mask planes must be [objects, H, W], got {:?}",
            planes.shape()
        );
        Mask { planes }
    }

    pub fn zeros(objects: usize, h: usize, w: usize) -> Self {
        Mask {
            planes: Tensor::zeros(&[objects, h, w]),
        }
    }

    /// Binary planes from a label map (0 = background, i = object i).
    pub fn from_label_map(labels: &[u8], h: usize, w: usize, objects: usize) -> Self {
        assert_eq!(labels.len(), h * w);
        let mut data = vec![S::ZERO; objects * h * w];
        for (i, &l) in labels.iter().enumerate() {
            if l > 0 {
                assert!(
                    (l as usize) <= objects,
                    "label {l} exceeds object count {objects}"
                );
                data[(l as usize - 1) * h * w + i] = S::ONE;
            }
        }
        Mask {
            planes: Tensor::new(vec![objects, h, w], data),
        }
    }

    pub fn num_objects(&self) -> usize {
        self.planes.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.planes.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.planes.shape()[2]
    }

    pub fn planes(&self) -> &Tensor<S> {
        &self.planes
    }

    pub fn planes_mut(&mut self) -> &mut Tensor<S> {
        &mut self.planes
    }

    pub fn into_planes(self) -> Tensor<S> {
        self.planes
    }

    pub fn plane(&self, object: usize) -> &[S] {
        let hw = self.height() * self.width();
        &self.planes.data()[object * hw..(object + 1) * hw]
    }

    pub fn cast<T: Scalar>(&self) -> Mask<T> {
        Mask {
            planes: self.planes.cast(),
        }
    }

    /// Label map via soft aggregation: background score is the product of
    /// (1 - p_i); argmax over {background, objects}, 0 = background.
    pub fn label_map(&self) -> Vec<u8> {
        let (h, w) = (self.height(), self.width());
        let hw = h * w;
        let n = self.num_objects();
        let mut labels = vec![0u8; hw];
        for i in 0..hw {
            let mut bg = 1.0f64;
            for o in 0..n {
                bg *= 1.0 - self.planes.data()[o * hw + i].to_f64();
            }
            let mut best = bg;
            let mut best_label = 0u8;
            for o in 0..n {
                let p = self.planes.data()[o * hw + i].to_f64();
                if p > best {
                    best = p;
                    best_label = (o + 1) as u8;
                }
            }
            labels[i] = best_label;
        }
        labels
    }
}

/// Soft-aggregated normalized scores at one pixel: background = prod(1 - p_i),
/// then everything divided by (background + sum of object scores).
pub fn aggregate_pixel(object_scores: &[f64]) -> (f64, Vec<f64>) {
    let bg: f64 = object_scores.iter().map(|p| 1.0 - p).product();
    let denom: f64 = bg + object_scores.iter().sum::<f64>();
    (
        bg / denom,
        object_scores.iter().map(|p| p / denom).collect(),
    )
}
