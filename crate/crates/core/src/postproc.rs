//! Boundary extraction from a predicted probability map, and the
//! per-column mean absolute error used to score it.

use std::fmt::{self, Write as _};

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Per-column row of a layer boundary. `None` marks a column where no
/// boundary was found.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryCurve {
    pub rows: Vec<Option<f64>>,
}

impl BoundaryCurve {
    pub fn from_rows(rows: impl IntoIterator<Item = f64>) -> Self {
        BoundaryCurve {
            rows: rows.into_iter().map(Some).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn invalid_count(&self) -> usize {
        self.rows.iter().filter(|r| r.is_none()).count()
    }

    /// Every valid row shifted by `k`.
    pub fn shifted(&self, k: f64) -> Self {
        BoundaryCurve {
            rows: self.rows.iter().map(|r| r.map(|v| v + k)).collect(),
        }
    }
}

/// A single-plane binary image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(h: usize, w: usize) -> Self {
        Mask {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                data.push(f(r, c) as u8);
            }
        }
        Mask { h, w, data }
    }

    /// Plane `(n, c)` of `t`; non-zero values become foreground.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, n: usize, c: usize) -> Self {
        let s = t.shape();
        Mask {
            h: s.h,
            w: s.w,
            data: t.plane(n, c).iter().map(|&v| (v != T::zero()) as u8).collect(),
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::lit(v as f64)).collect();
        Tensor::from_vec(Shape::new(1, 1, self.h, self.w), data).expect("mask dimensions are positive")
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.w + c] != 0
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.w + c] = v as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }
}

/// 1 where `p >= threshold`, else 0.
pub fn binarize<T: Real>(prob: &Tensor<T>, threshold: f64) -> Tensor<T> {
    let t = T::lit(threshold);
    prob.map(|p| if p >= t { T::one() } else { T::zero() })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cleanup {
    pub mask: Mask,
    /// Foreground pixels cleared.
    pub removed_foreground: usize,
    /// Background pixels filled.
    pub filled_background: usize,
    /// The input had no foreground and was returned unchanged.
    pub empty: bool,
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let p = parent[x as usize];
        parent[x as usize] = parent[p as usize];
        x = p;
    }
    x
}

/// 4-connected component labels of the pixels equal to `value`. Labels are
/// dense and numbered in raster order of each component's first pixel;
/// other pixels get `u32::MAX`. Returns the labels and component areas.
pub fn label_components(mask: &Mask, value: bool) -> (Vec<u32>, Vec<usize>) {
    let (h, w) = (mask.h, mask.w);
    let v = value as u8;
    let mut parent: Vec<u32> = (0..(h * w) as u32).collect();
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if mask.data[i] != v {
                continue;
            }
            if c > 0 && mask.data[i - 1] == v {
                let (a, b) = (find(&mut parent, i as u32), find(&mut parent, (i - 1) as u32));
                parent[a.max(b) as usize] = a.min(b);
            }
            if r > 0 && mask.data[i - w] == v {
                let (a, b) = (find(&mut parent, i as u32), find(&mut parent, (i - w) as u32));
                parent[a.max(b) as usize] = a.min(b);
            }
        }
    }
    let mut labels = vec![u32::MAX; h * w];
    let mut root_label = vec![u32::MAX; h * w];
    let mut areas = Vec::new();
    for i in 0..h * w {
        if mask.data[i] != v {
            continue;
        }
        let root = find(&mut parent, i as u32) as usize;
        if root_label[root] == u32::MAX {
            root_label[root] = areas.len() as u32;
            areas.push(0);
        }
        labels[i] = root_label[root];
        areas[labels[i] as usize] += 1;
    }
    (labels, areas)
}

/// Removes foreground islands smaller than `min_area` (the largest
/// foreground component is always kept), then fills background components
/// smaller than `min_area`. Connectivity is 4-neighbour for both.
pub fn remove_small_components(mask: &Mask, min_area: usize) -> Cleanup {
    let mut out = mask.clone();
    let (labels, areas) = label_components(mask, true);
    if areas.is_empty() {
        return Cleanup {
            mask: out,
            removed_foreground: 0,
            filled_background: 0,
            empty: true,
        };
    }
    let largest = (0..areas.len()).fold(0, |best, i| if areas[i] > areas[best] { i } else { best });
    let mut removed_foreground = 0;
    for (px, &l) in out.data.iter_mut().zip(&labels) {
        if l != u32::MAX && l as usize != largest && areas[l as usize] < min_area {
            *px = 0;
            removed_foreground += 1;
        }
    }
    let (labels, areas) = label_components(&out, false);
    let mut filled_background = 0;
    for (px, &l) in out.data.iter_mut().zip(&labels) {
        if l != u32::MAX && areas[l as usize] < min_area {
            *px = 1;
            filled_background += 1;
        }
    }
    Cleanup {
        mask: out,
        removed_foreground,
        filled_background,
        empty: false,
    }
}

/// Per column, the first row holding foreground.
pub fn boundary_of(mask: &Mask) -> BoundaryCurve {
    BoundaryCurve {
        rows: (0..mask.w)
            .map(|c| (0..mask.h).find(|&r| mask.get(r, c)).map(|r| r as f64))
            .collect(),
    }
}

/// Mean `|pred - gt|` over the columns valid in both curves.
pub fn mae(pred: &BoundaryCurve, gt: &BoundaryCurve) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape("mae", "curve length", gt.len(), pred.len()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, g) in pred.rows.iter().zip(&gt.rows) {
        if let (Some(p), Some(g)) = (p, g) {
            sum += (p - g).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Data("mae: the curves share no valid column".into()));
    }
    Ok(sum / n as f64)
}

/// Default small-component threshold: 0.1% of the image area, at least 1.
pub fn default_min_area(h: usize, w: usize, fraction: f64) -> usize {
    ((fraction * (h * w) as f64).ceil() as usize).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub threshold: f64,
    /// Components smaller than this fraction of the image area are removed.
    pub min_area_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: 0.5,
            min_area_fraction: 0.001,
        }
    }
}

/// What the pipeline produced for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub mask: Mask,
    pub boundary: BoundaryCurve,
    pub empty: bool,
}

/// Binarize, denoise and trace the first plane of a probability map.
pub fn extract_boundary<T: Real>(prob: &Tensor<T>, cfg: &EvalConfig) -> Extraction {
    let s = prob.shape();
    let raw = Mask::from_tensor(&binarize(prob, cfg.threshold), 0, 0);
    let cleaned = remove_small_components(&raw, default_min_area(s.h, s.w, cfg.min_area_fraction));
    let boundary = boundary_of(&cleaned.mask);
    Extraction {
        mask: cleaned.mask,
        boundary,
        empty: cleaned.empty,
    }
}

/// Anything that maps an image to a foreground probability map of the same
/// spatial size.
pub trait Segmenter {
    fn segment(&self, image: &Tensor<f64>, mask: &Tensor<f64>) -> Result<Tensor<f64>>;
}

impl<F> Segmenter for F
where
    F: Fn(&Tensor<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
{
    fn segment(&self, image: &Tensor<f64>, mask: &Tensor<f64>) -> Result<Tensor<f64>> {
        self(image, mask)
    }
}

/// One test image to score.
pub struct EvalItem<'a> {
    pub id: String,
    pub image: &'a Tensor<f64>,
    pub mask: &'a Tensor<f64>,
    pub gt: &'a BoundaryCurve,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageScore {
    pub id: String,
    pub mae: Option<f64>,
    pub invalid_columns: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub images: Vec<ImageScore>,
    /// Mean and population standard deviation over the scored images;
    /// `None` when no image could be scored.
    pub mean_mae: Option<f64>,
    pub std_mae: Option<f64>,
    pub invalid_columns: usize,
    pub failures: usize,
}

pub fn evaluate(method: &str, segmenter: &dyn Segmenter, items: &[EvalItem<'_>], cfg: &EvalConfig) -> EvalReport {
    let mut images = Vec::with_capacity(items.len());
    for item in items {
        let scored = segmenter.segment(item.image, item.mask).map(|prob| {
            let ex = extract_boundary(&prob, cfg);
            let invalid = ex.boundary.invalid_count();
            let err = mae(&ex.boundary, item.gt);
            (err, invalid, ex.empty)
        });
        let score = match scored {
            Ok((Ok(m), invalid, _)) => ImageScore {
                id: item.id.clone(),
                mae: Some(m),
                invalid_columns: invalid,
                error: None,
            },
            Ok((Err(e), invalid, empty)) => ImageScore {
                id: item.id.clone(),
                mae: None,
                invalid_columns: invalid,
                error: Some(if empty {
                    "prediction has no foreground".to_string()
                } else {
                    e.to_string()
                }),
            },
            Err(e) => ImageScore {
                id: item.id.clone(),
                mae: None,
                invalid_columns: item.gt.len(),
                error: Some(e.to_string()),
            },
        };
        if let Some(e) = &score.error {
            log::warn!("{method}: image {}: {e}", score.id);
        }
        images.push(score);
    }
    EvalReport::from_scores(method, images)
}

impl EvalReport {
    pub fn from_scores(method: &str, images: Vec<ImageScore>) -> Self {
        let maes: Vec<f64> = images.iter().filter_map(|s| s.mae).collect();
        let (mean_mae, std_mae) = if maes.is_empty() {
            (None, None)
        } else {
            let n = maes.len() as f64;
            let mean = maes.iter().sum::<f64>() / n;
            let var = maes.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / n;
            (Some(mean), Some(var.sqrt()))
        };
        EvalReport {
            method: method.to_string(),
            invalid_columns: images.iter().map(|s| s.invalid_columns).sum(),
            failures: images.iter().filter(|s| s.mae.is_none()).count(),
            images,
            mean_mae,
            std_mae,
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

pub const SUMMARY_HEADER: &str = "method,mean_mae,std_mae,invalid_columns,failures";

/// One CSV row per report under [`SUMMARY_HEADER`].
pub fn summary_csv(reports: &[EvalReport]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.method,
            opt(r.mean_mae),
            opt(r.std_mae),
            r.invalid_columns,
            r.failures
        );
    }
    s
}

pub fn per_image_csv(report: &EvalReport) -> String {
    let mut s = String::from("id,mae,invalid_columns,error\n");
    for img in &report.images {
        let err = img.error.as_deref().unwrap_or("").replace(',', ";");
        let _ = writeln!(s, "{},{},{},{}", img.id, opt(img.mae), img.invalid_columns, err);
    }
    s
}

/// Fixed-width table of several reports.
pub struct SummaryTable<'a>(pub &'a [EvalReport]);

impl fmt::Display for SummaryTable<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<10} {:>10} {:>10} {:>16}",
            "method", "mean_mae", "std_mae", "invalid_columns"
        )?;
        for r in self.0 {
            let cell = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v:.3}"));
            writeln!(
                f,
                "{:<10} {:>10} {:>10} {:>16}",
                r.method,
                cell(r.mean_mae),
                cell(r.std_mae),
                r.invalid_columns
            )?;
        }
        Ok(())
    }
}
