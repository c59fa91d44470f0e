//! Label maps and segmentation metrics: pixel accuracy and mean IoU.
//!
//! Dataset-level numbers accumulate a global confusion matrix rather than
//! averaging per-image ratios, so empty classes never divide by zero; a
//! per-pair mode is available through the free functions.

use crate::error::{Error, Result};

/// Single-channel map of integer class IDs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(format!(
                "label map {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(LabelMap { width, height, data })
    }

    pub fn filled(width: usize, height: usize, class: u8) -> Self {
        LabelMap {
            width,
            height,
            data: vec![class; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, class: u8) {
        self.data[y * self.width + x] = class;
    }

    fn check_same_size(&self, other: &LabelMap) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::shape(format!(
                "label maps {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}

/// Global class-by-class pixel counts; rows are ground truth, columns are
/// predictions.
#[derive(Clone, Debug)]
pub struct ConfusionMatrix {
    class_count: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(class_count: usize) -> Self {
        ConfusionMatrix {
            class_count,
            counts: vec![0; class_count * class_count],
        }
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn update(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        pred.check_same_size(gt)?;
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if (p as usize) >= self.class_count {
                return Err(Error::UnknownClassId(p as u32));
            }
            if (g as usize) >= self.class_count {
                return Err(Error::UnknownClassId(g as u32));
            }
            self.counts[g as usize * self.class_count + p as usize] += 1;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn pixel_accuracy(&self) -> f32 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let correct: u64 = (0..self.class_count)
            .map(|c| self.counts[c * self.class_count + c])
            .sum();
        (correct as f64 / total as f64) as f32
    }

    /// Mean IoU over classes present in either the ground truth or the
    /// prediction; classes absent from both are left out of the mean.
    pub fn mean_iou(&self) -> f32 {
        let k = self.class_count;
        let mut sum = 0.0f64;
        let mut present = 0usize;
        for c in 0..k {
            let gt_total: u64 = (0..k).map(|p| self.counts[c * k + p]).sum();
            let pred_total: u64 = (0..k).map(|g| self.counts[g * k + c]).sum();
            let inter = self.counts[c * k + c];
            let union = gt_total + pred_total - inter;
            if union > 0 {
                sum += inter as f64 / union as f64;
                present += 1;
            }
        }
        if present == 0 {
            0.0
        } else {
            (sum / present as f64) as f32
        }
    }
}

/// Fraction of pixels labeled identically, in [0, 1].
pub fn pixel_accuracy(pred: &LabelMap, gt: &LabelMap) -> Result<f32> {
    pred.check_same_size(gt)?;
    let equal = pred.data.iter().zip(&gt.data).filter(|(p, g)| p == g).count();
    Ok((equal as f64 / pred.data.len() as f64) as f32)
}

/// Per-pair mean IoU; see [`ConfusionMatrix::mean_iou`].
pub fn mean_iou(pred: &LabelMap, gt: &LabelMap, class_count: usize) -> Result<f32> {
    let mut cm = ConfusionMatrix::new(class_count);
    cm.update(pred, gt)?;
    Ok(cm.mean_iou())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_accuracy_examples() {
        let a = LabelMap::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        assert_eq!(pixel_accuracy(&a, &a).unwrap(), 1.0);
        let b = LabelMap::new(2, 2, vec![1, 2, 3, 0]).unwrap();
        assert_eq!(pixel_accuracy(&a, &b).unwrap(), 0.0);
        let c = LabelMap::new(2, 2, vec![0, 1, 2, 0]).unwrap();
        assert_eq!(pixel_accuracy(&a, &c).unwrap(), 0.75);
    }

    #[test]
    fn mean_iou_perfect_and_disjoint() {
        let a = LabelMap::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        assert_eq!(mean_iou(&a, &a, 2).unwrap(), 1.0);
        let ones = LabelMap::filled(2, 2, 1);
        let twos = LabelMap::filled(2, 2, 2);
        assert_eq!(mean_iou(&ones, &twos, 3).unwrap(), 0.0);
    }

    #[test]
    fn mean_iou_enumeration_case() {
        // pred = [0,0,1,1], gt = [0,1,1,1]:
        // IoU_0 = 1/2, IoU_1 = 2/3, mean = 7/12.
        let pred = LabelMap::new(2, 2, vec![0, 0, 1, 1]).unwrap();
        let gt = LabelMap::new(2, 2, vec![0, 1, 1, 1]).unwrap();
        let got = mean_iou(&pred, &gt, 2).unwrap();
        assert!((got - 7.0 / 12.0).abs() < 1e-7, "{got}");
    }

    #[test]
    fn out_of_range_class_is_an_error() {
        let pred = LabelMap::new(1, 1, vec![5]).unwrap();
        let gt = LabelMap::new(1, 1, vec![0]).unwrap();
        assert!(matches!(
            mean_iou(&pred, &gt, 3),
            Err(Error::UnknownClassId(5))
        ));
    }

    #[test]
    fn absent_classes_are_excluded_from_the_mean() {
        // Class 2 never appears; the mean runs over classes 0 and 1 only.
        let pred = LabelMap::new(2, 1, vec![0, 1]).unwrap();
        let gt = LabelMap::new(2, 1, vec![0, 0]).unwrap();
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&pred, &gt).unwrap();
        // IoU_0 = 1/2, IoU_1 = 0/1 -> mean 1/4.
        assert!((cm.mean_iou() - 0.25).abs() < 1e-7);
    }

    #[test]
    fn both_metrics_are_one_iff_maps_identical() {
        let a = LabelMap::new(3, 1, vec![0, 1, 2]).unwrap();
        let b = LabelMap::new(3, 1, vec![0, 1, 1]).unwrap();
        assert!(pixel_accuracy(&a, &b).unwrap() < 1.0);
        assert!(mean_iou(&a, &b, 3).unwrap() < 1.0);
        assert_eq!(pixel_accuracy(&a, &a).unwrap(), 1.0);
        assert_eq!(mean_iou(&a, &a, 3).unwrap(), 1.0);
    }

    #[test]
    fn confusion_matrix_accumulates_across_pairs() {
        let mut cm = ConfusionMatrix::new(2);
        let p1 = LabelMap::new(2, 1, vec![0, 0]).unwrap();
        let g1 = LabelMap::new(2, 1, vec![0, 1]).unwrap();
        let p2 = LabelMap::new(2, 1, vec![1, 1]).unwrap();
        let g2 = LabelMap::new(2, 1, vec![1, 1]).unwrap();
        cm.update(&p1, &g1).unwrap();
        cm.update(&p2, &g2).unwrap();
        assert_eq!(cm.total(), 4);
        assert_eq!(cm.pixel_accuracy(), 0.75);
    }
}
