//! View-consistency metrics over turntable renders.
//!
//! * adjacent-view distance: mean image distance between neighboring
//!   turntable frames (high when the object changes abruptly with azimuth),
//! * face detector: normalized cross-correlation of the face-patch region
//!   against the canonical template, per view bin,
//! * alignment curves: similarity of every frame to each bin's template.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;

use crate::field::VoxelField;
use crate::image::{ImageBuffer, Rect};
use crate::prompt::ViewBinConfig;
use crate::renderer::{turntable, CameraRig, RenderConfig};
use crate::scoremodel::TemplateSet;
use crate::{Error, Result};

pub const PYRAMID_LEVELS: usize = 3;
pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.6;
/// Patches whose standard deviation is below this fraction of their mean
/// cannot show a face.
pub const DEFAULT_MIN_CONTRAST: f64 = 0.02;

type DistanceImpl = dyn Fn(&ImageBuffer, &ImageBuffer) -> Result<f64> + Send + Sync;

/// Image distance used by the metrics.
#[derive(Clone, Default)]
pub enum Distance {
    #[default]
    PyramidMad,
    MeanAbs,
    Plugin {
        name: String,
        f: Arc<DistanceImpl>,
    },
}

impl std::fmt::Debug for Distance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl PartialEq for Distance {
    fn eq(&self, other: &Self) -> bool {
        self.name() == other.name()
    }
}

impl Distance {
    pub fn name(&self) -> &str {
        match self {
            Distance::PyramidMad => "pyramid_mad",
            Distance::MeanAbs => "mean_abs",
            Distance::Plugin { name, .. } => name,
        }
    }

    /// Looks up a built-in distance, then `plugins`, by name.
    pub fn by_name(name: &str, plugins: &[Distance]) -> Result<Distance> {
        match name {
            "pyramid_mad" => Ok(Distance::PyramidMad),
            "mean_abs" => Ok(Distance::MeanAbs),
            _ => plugins
                .iter()
                .find(|d| d.name() == name)
                .cloned()
                .ok_or_else(|| Error::Lookup(format!("unknown distance {name:?}"))),
        }
    }

    pub fn eval(&self, a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
        match self {
            Distance::PyramidMad => pyramid_mad(a, b),
            Distance::MeanAbs => a.mean_abs_diff(b),
            Distance::Plugin { f, .. } => f(a, b),
        }
    }
}

/// 2x2 box average, halving each dimension (odd trailing rows/cols dropped).
fn downsample(im: &ImageBuffer) -> ImageBuffer {
    let (h, w) = (im.height() / 2, im.width() / 2);
    let mut out = ImageBuffer::zeros(h, w, im.kind());
    for r in 0..h {
        for c in 0..w {
            let p = [
                im.pixel(2 * r, 2 * c),
                im.pixel(2 * r, 2 * c + 1),
                im.pixel(2 * r + 1, 2 * c),
                im.pixel(2 * r + 1, 2 * c + 1),
            ];
            out.set_pixel(
                r,
                c,
                std::array::from_fn(|k| 0.25 * (p[0][k] + p[1][k] + p[2][k] + p[3][k])),
            );
        }
    }
    out
}

/// Mean absolute difference averaged over a 3-level blur-and-downsample
/// pyramid with equal level weights.
pub fn pyramid_mad(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.same_shape(b)?;
    let min_side = 1 << (PYRAMID_LEVELS - 1);
    if a.height() < min_side || a.width() < min_side {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} too small for a {PYRAMID_LEVELS}-level pyramid",
            a.height(),
            a.width()
        )));
    }
    let (mut x, mut y) = (a.clone(), b.clone());
    let mut total = x.mean_abs_diff(&y)?;
    for _ in 1..PYRAMID_LEVELS {
        x = downsample(&x);
        y = downsample(&y);
        total += x.mean_abs_diff(&y)?;
    }
    Ok(total / PYRAMID_LEVELS as f64)
}

/// Mean distance over the cyclic adjacent pairs `(k, k+1 mod n)`.
pub fn adjacent_consistency(images: &[ImageBuffer], d: &Distance) -> Result<f64> {
    if images.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "adjacent consistency needs at least 2 images, got {}",
            images.len()
        )));
    }
    let n = images.len();
    let dists: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|k| d.eval(&images[k], &images[(k + 1) % n]))
        .collect::<Result<_>>()?;
    Ok(dists.iter().sum::<f64>() / n as f64)
}

/// Per-channel means of an interleaved RGB buffer.
fn channel_means(im: &ImageBuffer) -> [f64; 3] {
    let mut m = [0.0; 3];
    for px in im.data().chunks_exact(3) {
        for k in 0..3 {
            m[k] += px[k];
        }
    }
    let n = (im.len() / 3).max(1) as f64;
    m.map(|v| v / n)
}

/// Normalized cross-correlation of two equally sized color buffers, each
/// channel centered on its own mean; 0 when either side has no variance.
pub fn ncc(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.same_shape(b)?;
    let (ma, mb) = (channel_means(a), channel_means(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (pa, pb) in a.data().chunks_exact(3).zip(b.data().chunks_exact(3)) {
        for k in 0..3 {
            let (dx, dy) = (pa[k] - ma[k], pb[k] - mb[k]);
            sab += dx * dy;
            saa += dx * dx;
            sbb += dy * dy;
        }
    }
    let denom = (saa * sbb).sqrt();
    if denom <= 1e-12 * a.len() as f64 {
        return Ok(0.0);
    }
    Ok(sab / denom)
}

/// Root-mean-square deviation from the per-channel means, over the mean
/// value; 0 for a black patch.
pub fn relative_contrast(im: &ImageBuffer) -> f64 {
    let m = im.mean();
    if m <= 0.0 || im.is_empty() {
        return 0.0;
    }
    let cm = channel_means(im);
    let ss: f64 = im
        .data()
        .chunks_exact(3)
        .map(|px| {
            (0..3)
                .map(|k| (px[k] - cm[k]) * (px[k] - cm[k]))
                .sum::<f64>()
        })
        .sum();
    (ss / im.len() as f64).sqrt() / m
}

/// Turntable renders with the azimuth (degrees) of every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Turntable {
    pub azimuths_deg: Vec<f64>,
    pub elevation_deg: f64,
    pub images: Vec<ImageBuffer>,
}

impl Turntable {
    pub fn render(
        field: &VoxelField,
        n_views: usize,
        elevation_deg: f64,
        rig: &CameraRig,
        cfg: &RenderConfig,
    ) -> Result<Turntable> {
        let images = turntable(field, n_views, elevation_deg.to_radians(), rig, cfg)?;
        Ok(Turntable {
            azimuths_deg: (0..n_views)
                .map(|k| 360.0 * k as f64 / n_views as f64)
                .collect(),
            elevation_deg,
            images,
        })
    }

    /// Frames with their own azimuths; `images[k]` sits at `360 k / n`.
    pub fn from_images(images: Vec<ImageBuffer>, elevation_deg: f64) -> Turntable {
        let n = images.len();
        Turntable {
            azimuths_deg: (0..n).map(|k| 360.0 * k as f64 / n as f64).collect(),
            elevation_deg,
            images,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JanusResult {
    /// Number of bins in which some frame matches the canonical face.
    pub bin_count: usize,
    pub success: bool,
    /// Best correlation per bin (bins without frames are absent).
    pub best_ncc: BTreeMap<String, f64>,
}

/// Face detector settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detector {
    pub match_threshold: f64,
    /// Minimum [`relative_contrast`] of a frame's patch. Both the correlation
    /// and this ratio ignore global brightness, so the detector does too.
    pub min_contrast: f64,
}

impl Default for Detector {
    fn default() -> Self {
        Detector {
            match_threshold: DEFAULT_MATCH_THRESHOLD,
            min_contrast: DEFAULT_MIN_CONTRAST,
        }
    }
}

impl Detector {
    /// Correlation score of one frame patch; 0 when the patch is too flat.
    pub fn score(&self, patch: &ImageBuffer, reference: &ImageBuffer) -> Result<f64> {
        if relative_contrast(patch) < self.min_contrast {
            patch.same_shape(reference)?;
            return Ok(0.0);
        }
        ncc(patch, reference)
    }
}

/// Counts the view bins whose frames show the canonical face. Success means
/// the face appears in the canonical bin and nowhere else.
pub fn janus_score(
    tt: &Turntable,
    canonical: &ImageBuffer,
    face_patch: Rect,
    bins: &ViewBinConfig,
    canonical_bin: &str,
    detector: &Detector,
) -> Result<JanusResult> {
    let reference = canonical.crop(face_patch)?;
    let scores: Vec<(String, f64)> = tt
        .images
        .par_iter()
        .zip(&tt.azimuths_deg)
        .map(|(im, &az)| {
            canonical.same_shape(im)?;
            let bin = bins.azimuth_bin(az).to_string();
            Ok((bin, detector.score(&im.crop(face_patch)?, &reference)?))
        })
        .collect::<Result<_>>()?;
    let mut best_ncc: BTreeMap<String, f64> = BTreeMap::new();
    for (bin, s) in scores {
        let e = best_ncc.entry(bin).or_insert(f64::NEG_INFINITY);
        *e = e.max(s);
    }
    let matched: Vec<&String> = best_ncc
        .iter()
        .filter(|(_, &s)| s > detector.match_threshold)
        .map(|(b, _)| b)
        .collect();
    Ok(JanusResult {
        bin_count: matched.len(),
        success: matched.len() == 1 && matched[0] == canonical_bin,
        best_ncc,
    })
}

/// Similarity (negative distance) of every frame to each bin's clean template.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentCurves {
    pub azimuths_deg: Vec<f64>,
    /// Bin each frame falls in.
    pub own_bin: Vec<String>,
    /// Per bin: similarity of every frame to that bin's template.
    pub per_bin: BTreeMap<String, Vec<f64>>,
}

impl AlignmentCurves {
    /// Similarity of each frame to its own bin's template.
    pub fn own_curve(&self) -> Vec<f64> {
        self.own_bin
            .iter()
            .enumerate()
            .map(|(k, b)| self.per_bin[b][k])
            .collect()
    }

    /// Azimuth at which the bin's curve peaks (first frame on ties).
    pub fn peak_azimuth(&self, bin: &str) -> Result<f64> {
        let curve = self
            .per_bin
            .get(bin)
            .ok_or_else(|| Error::Lookup(format!("no curve for bin {bin:?}")))?;
        let mut best = 0;
        for (k, &v) in curve.iter().enumerate() {
            if v > curve[best] {
                best = k;
            }
        }
        Ok(self.azimuths_deg[best])
    }

    /// Whether the bin's curve peaks inside the bin itself.
    pub fn peaks_in_bin(&self, bins: &ViewBinConfig, bin: &str) -> Result<bool> {
        let az = self.peak_azimuth(bin)?;
        let b = bins
            .bin(bin)
            .ok_or_else(|| Error::Lookup(format!("bin {bin:?} not configured")))?;
        Ok(b.contains(az))
    }

    /// Mean own-bin similarity over the frames of each bin.
    pub fn bin_means(&self) -> BTreeMap<String, f64> {
        let own = self.own_curve();
        let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for (b, v) in self.own_bin.iter().zip(own) {
            let e = acc.entry(b.clone()).or_default();
            e.0 += v;
            e.1 += 1;
        }
        acc.into_iter()
            .map(|(b, (s, n))| (b, s / n as f64))
            .collect()
    }
}

/// Per-azimuth similarity to the azimuth bins' templates, using `-d`.
pub fn view_alignment_curves(
    tt: &Turntable,
    templates: &TemplateSet,
    bins: &ViewBinConfig,
    d: &Distance,
) -> Result<AlignmentCurves> {
    let own_bin: Vec<String> = tt
        .azimuths_deg
        .iter()
        .map(|&a| bins.azimuth_bin(a).to_string())
        .collect();
    let mut per_bin = BTreeMap::new();
    for bin in &bins.bins {
        let template = templates.clean(&bin.name)?;
        let curve: Vec<f64> = tt
            .images
            .par_iter()
            .map(|im| d.eval(im, template).map(|v| -v))
            .collect::<Result<_>>()?;
        per_bin.insert(bin.name.clone(), curve);
    }
    Ok(AlignmentCurves {
        azimuths_deg: tt.azimuths_deg.clone(),
        own_bin,
        per_bin,
    })
}

/// Similarity of each frame to its own bin's template.
pub fn view_alignment_curve(
    tt: &Turntable,
    templates: &TemplateSet,
    bins: &ViewBinConfig,
    d: &Distance,
) -> Result<Vec<f64>> {
    Ok(view_alignment_curves(tt, templates, bins, d)?.own_curve())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricConfig {
    pub n_views: usize,
    pub elevation_deg: f64,
    pub rig: CameraRig,
    pub render: RenderConfig,
    pub distance: Distance,
    pub detector: Detector,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            n_views: 100,
            elevation_deg: 15.0,
            rig: CameraRig::default(),
            render: RenderConfig::default(),
            distance: Distance::PyramidMad,
            detector: Detector::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub run_id: String,
    pub a_dist: f64,
    pub janus_bin_count: usize,
    pub janus_success: bool,
    /// Own-bin similarity per turntable frame.
    pub alignment_curve: Vec<f64>,
    pub curves: AlignmentCurves,
    pub janus: JanusResult,
    /// Mean distance of the frames to their own bin's template.
    pub template_distance: f64,
}

impl MetricReport {
    pub fn bin_alignment_means(&self) -> BTreeMap<String, f64> {
        self.curves.bin_means()
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec![
            "run_id".to_string(),
            "a_dist".into(),
            "janus_bin_count".into(),
            "janus_success".into(),
            "template_distance".into(),
        ];
        for b in self.bin_alignment_means().keys() {
            cols.push(format!("alignment_{}", b.replace(' ', "_")));
        }
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut row = format!(
            "{},{},{},{},{}",
            self.run_id,
            self.a_dist,
            self.janus_bin_count,
            self.janus_success,
            self.template_distance
        );
        for v in self.bin_alignment_means().values() {
            let _ = write!(row, ",{v}");
        }
        row
    }

    /// Header plus one row.
    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", self.csv_header(), self.csv_row())
    }

    /// One line per frame: azimuth, own bin, own similarity, then each bin's curve.
    pub fn curve_csv(&self) -> String {
        let c = &self.curves;
        let mut out = String::from("azimuth_deg,bin,similarity");
        for b in c.per_bin.keys() {
            let _ = write!(out, ",sim_{}", b.replace(' ', "_"));
        }
        out.push('\n');
        for k in 0..c.azimuths_deg.len() {
            let _ = write!(
                out,
                "{},{},{}",
                c.azimuths_deg[k], c.own_bin[k], self.alignment_curve[k]
            );
            for curve in c.per_bin.values() {
                let _ = write!(out, ",{}", curve[k]);
            }
            out.push('\n');
        }
        out
    }

    /// Per-bin alignment curves as an SVG line plot.
    pub fn curve_svg(&self) -> String {
        curves_svg(&self.curves)
    }
}

/// Computes every metric from an existing turntable.
pub fn evaluate_turntable(
    run_id: &str,
    tt: &Turntable,
    templates: &TemplateSet,
    bins: &ViewBinConfig,
    canonical_bin: &str,
    cfg: &MetricConfig,
) -> Result<MetricReport> {
    let a_dist = adjacent_consistency(&tt.images, &cfg.distance)?;
    let janus = janus_score(
        tt,
        templates.clean(canonical_bin)?,
        templates.face_patch,
        bins,
        canonical_bin,
        &cfg.detector,
    )?;
    let curves = view_alignment_curves(tt, templates, bins, &cfg.distance)?;
    let alignment_curve = curves.own_curve();
    let template_distance = -alignment_curve.iter().sum::<f64>() / alignment_curve.len() as f64;
    if !a_dist.is_finite() {
        return Err(Error::NonFinite("adjacent-view distance".into()));
    }
    Ok(MetricReport {
        run_id: run_id.to_string(),
        a_dist,
        janus_bin_count: janus.bin_count,
        janus_success: janus.success,
        alignment_curve,
        curves,
        janus,
        template_distance,
    })
}

/// Renders the turntable for `field` and evaluates it.
pub fn evaluate(
    run_id: &str,
    field: &VoxelField,
    templates: &TemplateSet,
    bins: &ViewBinConfig,
    canonical_bin: &str,
    cfg: &MetricConfig,
) -> Result<(MetricReport, Turntable)> {
    let tt = Turntable::render(field, cfg.n_views, cfg.elevation_deg, &cfg.rig, &cfg.render)?;
    let report = evaluate_turntable(run_id, &tt, templates, bins, canonical_bin, cfg)?;
    Ok((report, tt))
}

const SVG_COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

fn curves_svg(c: &AlignmentCurves) -> String {
    let (w, h, pad) = (640.0, 320.0, 40.0);
    let values = c.per_bin.values().flatten().copied();
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let x = |az: f64| pad + az / 360.0 * (w - 2.0 * pad);
    let y = |v: f64| h - pad - (v - lo) / span * (h - 2.0 * pad);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - pad,
        w - pad,
        h - pad
    );
    for (i, (bin, curve)) in c.per_bin.iter().enumerate() {
        let color = SVG_COLORS[i % SVG_COLORS.len()];
        let pts: Vec<String> = c
            .azimuths_deg
            .iter()
            .zip(curve)
            .map(|(&a, &v)| format!("{:.2},{:.2}", x(a), y(v)))
            .collect();
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            pts.join(" ")
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{bin}</text>",
            pad + 110.0 * i as f64,
            pad - 12.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ImageKind;

    fn flat(v: f64) -> ImageBuffer {
        ImageBuffer::filled(8, 8, ImageKind::Radiance, [v; 3])
    }

    #[test]
    fn pyramid_constant_difference() {
        assert!((pyramid_mad(&flat(0.0), &flat(1.0)).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(pyramid_mad(&flat(0.3), &flat(0.3)).unwrap(), 0.0);
        let small = ImageBuffer::zeros(2, 8, ImageKind::Radiance);
        assert!(pyramid_mad(&small, &small).is_err());
    }

    #[test]
    fn adjacent_examples() {
        let (a, b) = (flat(0.0), flat(0.4));
        let d = Distance::MeanAbs;
        let seq = vec![a.clone(), b.clone(), a.clone(), b.clone()];
        assert!((adjacent_consistency(&seq, &d).unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(
            adjacent_consistency(&[a.clone(), a.clone(), a.clone()], &d).unwrap(),
            0.0
        );
        assert!(adjacent_consistency(&[a], &d).is_err());
    }

    #[test]
    fn ncc_handles_flat_patches() {
        assert_eq!(ncc(&flat(0.2), &flat(0.9)).unwrap(), 0.0);
        // Flat patches of different hues carry no structure either.
        let body = ImageBuffer::filled(8, 8, ImageKind::Radiance, [0.85, 0.65, 0.42]);
        let ear = ImageBuffer::filled(8, 8, ImageKind::Radiance, [0.4, 0.22, 0.1]);
        assert_eq!(ncc(&body, &ear).unwrap(), 0.0);
        assert!(relative_contrast(&body) < 1e-12);
        let mut g = flat(0.0);
        g.set_pixel(1, 1, [1.0, 0.5, 0.0]);
        assert!((ncc(&g, &g.scaled(0.8)).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn plugin_lookup() {
        let plug = Distance::Plugin {
            name: "max_abs".into(),
            f: Arc::new(|a: &ImageBuffer, b: &ImageBuffer| {
                Ok(a.zip_map(b, |x, y| x - y)?.max_abs())
            }),
        };
        let d = Distance::by_name("max_abs", &[plug]).unwrap();
        assert_eq!(d.eval(&flat(0.1), &flat(0.6)).unwrap(), 0.5);
        assert_eq!(
            Distance::by_name("pyramid_mad", &[]).unwrap(),
            Distance::PyramidMad
        );
        assert!(Distance::by_name("lpips", &[]).is_err());
    }
}
