//! Serialized comparison reports and heatmap images of alignment matrices.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assign::Method;
use crate::detect::{AlignmentFinding, BasisSource, DetectionReport, Reliability, Stage, StageFailure};
use crate::error::{Error, Result};
use crate::Matrix;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelNames {
    pub a: String,
    pub b: String,
}

/// One stage as it appears in the JSON report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FindingRecord {
    pub stage: Stage,
    pub trace: f64,
    pub identity_trace: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log10_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    pub significant: bool,
    pub reliability: Reliability,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<Method>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual: Option<f64>,
    pub effective_rank: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perm: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signs: Option<Vec<i8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_map: Option<Vec<usize>>,
}

impl From<&AlignmentFinding> for FindingRecord {
    fn from(f: &AlignmentFinding) -> Self {
        FindingRecord {
            stage: f.stage,
            trace: f.trace_c,
            identity_trace: f.identity_trace,
            log10_p: f.log10_p(),
            dim: f.pv.as_ref().map(|p| p.dim_d),
            significant: f.significant(),
            reliability: f.reliability,
            method: f.perm.as_ref().map(|p| p.method),
            scale: f.scale,
            residual: f.residual,
            effective_rank: f.effective_rank,
            perm: f.perm.as_ref().map(|p| p.perm.clone()),
            signs: f.perm.as_ref().and_then(|p| p.signs.clone()),
            channel_map: f.channel_map.clone(),
        }
    }
}

/// JSON document written by the `compare` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    #[serde(rename = "schemaVersion")]
    pub schema_version: u32,
    pub related: bool,
    pub threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub headline_log10_p: Option<f64>,
    pub models: ModelNames,
    pub common_tokens: usize,
    pub basis: BasisSource,
    pub findings: Vec<FindingRecord>,
    #[serde(default)]
    pub failures: Vec<StageFailure>,
    #[serde(default)]
    pub heatmaps: Vec<String>,
    pub wall_time: f64,
}

impl ReportDocument {
    pub fn from_report(r: &DetectionReport, heatmaps: Vec<String>) -> Self {
        ReportDocument {
            schema_version: SCHEMA_VERSION,
            related: r.related,
            threshold: r.threshold,
            headline_log10_p: r.headline_log10_p(),
            models: ModelNames { a: r.model_a.clone(), b: r.model_b.clone() },
            common_tokens: r.common_tokens,
            basis: r.basis,
            findings: r.findings.iter().map(FindingRecord::from).collect(),
            failures: r.failures.clone(),
            heatmaps,
            wall_time: r.wall_time,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ReportDocument = serde_json::from_str(text)?;
        if doc.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidArgument(format!(
                "report schema version {} is not supported (expected {SCHEMA_VERSION})",
                doc.schema_version
            )));
        }
        Ok(doc)
    }
}

pub const DEFAULT_CROP: (usize, usize) = (512, 512);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide magnitudes by the largest magnitude in the crop.
    #[default]
    AbsMax,
    /// Use magnitudes as-is, clamped to `[0, 1]`.
    Unit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSpec {
    pub source: String,
    pub crop: (usize, usize),
    pub normalization: Normalization,
    pub output_path: PathBuf,
}

impl HeatmapSpec {
    pub fn new(source: impl Into<String>, output_path: impl Into<PathBuf>) -> Self {
        HeatmapSpec {
            source: source.into(),
            crop: DEFAULT_CROP,
            normalization: Normalization::AbsMax,
            output_path: output_path.into(),
        }
    }
}

/// RGB pixels of the top-left crop, row-major: white at zero, pure red at
/// full intensity.
pub fn heatmap_pixels(m: &Matrix, crop: (usize, usize), norm: Normalization) -> Result<(usize, usize, Vec<u8>)> {
    if !m.is_finite() {
        return Err(Error::NonFiniteValue("heatmap source".into()));
    }
    if crop.0 > m.rows() || crop.1 > m.cols() {
        log::debug!(
            "heatmap crop {}x{} clamped to matrix shape {}x{}",
            crop.0,
            crop.1,
            m.rows(),
            m.cols()
        );
    }
    let block = m.top_left(crop.0, crop.1);
    let (h, w) = block.shape();
    let denom = match norm {
        Normalization::AbsMax => block.max_abs(),
        Normalization::Unit => 1.0,
    };
    let mut rgb = Vec::with_capacity(w * h * 3);
    for &x in block.data() {
        let v = if denom > 0.0 { (x.abs() / denom).clamp(0.0, 1.0) } else { 0.0 };
        let fade = (255.0 * (1.0 - v)).round() as u8;
        rgb.extend_from_slice(&[255, fade, fade]);
    }
    Ok((w, h, rgb))
}

/// Binary PPM encoding of [`heatmap_pixels`].
pub fn encode_ppm(m: &Matrix, crop: (usize, usize), norm: Normalization) -> Result<Vec<u8>> {
    let (w, h, rgb) = heatmap_pixels(m, crop, norm)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&rgb);
    Ok(out)
}

/// Writes the heatmap. Paths ending in `.png` are PNG-encoded when the `png`
/// feature is enabled; everything else is written as PPM.
pub fn render_heatmap(m: &Matrix, spec: &HeatmapSpec) -> Result<PathBuf> {
    let path = spec.output_path.as_path();
    if is_png(path) {
        return write_png(m, spec);
    }
    let bytes = encode_ppm(m, spec.crop, spec.normalization)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

fn is_png(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

#[cfg(feature = "png")]
fn write_png(m: &Matrix, spec: &HeatmapSpec) -> Result<PathBuf> {
    let (w, h, rgb) = heatmap_pixels(m, spec.crop, spec.normalization)?;
    let path = spec.output_path.as_path();
    image::save_buffer(path, &rgb, w as u32, h as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    Ok(path.to_path_buf())
}

#[cfg(not(feature = "png"))]
fn write_png(_m: &Matrix, spec: &HeatmapSpec) -> Result<PathBuf> {
    Err(Error::InvalidArgument(format!(
        "{}: PNG output requires the `png` feature",
        spec.output_path.display()
    )))
}

/// File-name stem for a stage's heatmap.
pub fn heatmap_name(stage: &Stage) -> String {
    match stage {
        Stage::Embedding => "embedding".to_string(),
        Stage::Attention { layer, role } => format!("layer{layer}_{}", role.to_string().to_lowercase()),
        Stage::Mlp { layer } => format!("layer{layer}_mlp"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn red_count(ppm: &[u8], header_len: usize) -> usize {
        ppm[header_len..].chunks(3).filter(|p| p == &[255, 0, 0]).count()
    }

    #[test]
    fn identity_draws_red_diagonal() {
        let ppm = encode_ppm(&Matrix::identity(4), (4, 4), Normalization::AbsMax).unwrap();
        let header = b"P6\n4 4\n255\n";
        assert_eq!(&ppm[..header.len()], header);
        assert_eq!(ppm.len(), header.len() + 48);
        for (k, px) in ppm[header.len()..].chunks(3).enumerate() {
            let want: &[u8] = if k / 4 == k % 4 { &[255, 0, 0] } else { &[255, 255, 255] };
            assert_eq!(px, want);
        }
    }

    #[test]
    fn zero_matrix_is_white() {
        let ppm = encode_ppm(&Matrix::zeros(3, 5), (512, 512), Normalization::AbsMax).unwrap();
        let header = b"P6\n5 3\n255\n";
        assert_eq!(&ppm[..header.len()], header);
        assert!(ppm[header.len()..].iter().all(|&b| b == 255));
    }

    #[test]
    fn signed_permutation_has_one_red_pixel_per_row() {
        let mut p = Matrix::permutation(&[2, 0, 3, 1, 5, 4]);
        p[(0, 2)] = -1.0;
        let ppm = encode_ppm(&p, (512, 512), Normalization::AbsMax).unwrap();
        assert_eq!(red_count(&ppm, b"P6\n6 6\n255\n".len()), 6);
    }

    #[test]
    fn crop_is_top_left() {
        let m = Matrix::from_fn(600, 700, |i, j| if i == j { 1.0 } else { 0.0 });
        let ppm = encode_ppm(&m, DEFAULT_CROP, Normalization::AbsMax).unwrap();
        let header = b"P6\n512 512\n255\n";
        assert_eq!(&ppm[..header.len()], header);
        assert_eq!(red_count(&ppm, header.len()), 512);
    }

    #[test]
    fn half_intensity() {
        let m = Matrix::from_rows(&[vec![0.5, -1.0]]).unwrap();
        let (_, _, rgb) = heatmap_pixels(&m, (1, 2), Normalization::AbsMax).unwrap();
        assert_eq!(rgb, vec![255, 128, 128, 255, 0, 0]);
        let (_, _, rgb) = heatmap_pixels(&m.scale(0.5), (1, 2), Normalization::Unit).unwrap();
        assert_eq!(rgb, vec![255, 191, 191, 255, 128, 128]);
    }

    #[test]
    fn non_finite_rejected() {
        let m = Matrix::from_rows(&[vec![f64::NAN]]).unwrap();
        assert!(encode_ppm(&m, (1, 1), Normalization::AbsMax).is_err());
    }

    #[test]
    fn render_writes_ppm() {
        let dir = tempfile::tempdir().unwrap();
        let spec = HeatmapSpec::new("test", dir.path().join("x.ppm"));
        let path = render_heatmap(&Matrix::identity(3), &spec).unwrap();
        let bytes = std::fs::read(path).unwrap();
        assert_eq!(bytes, encode_ppm(&Matrix::identity(3), DEFAULT_CROP, Normalization::AbsMax).unwrap());
    }

    #[test]
    fn report_round_trip() {
        use crate::detect::{run_mdir, DetectConfig};
        use crate::forge::make_toy_model;
        use crate::weights::ArchSpec;
        let a = make_toy_model(&ArchSpec::toy(), 1);
        let b = make_toy_model(&ArchSpec::toy(), 2);
        for (x, y) in [(&a, &a), (&a, &b)] {
            let r = run_mdir(x, y, None, &DetectConfig::default()).unwrap();
            let doc = ReportDocument::from_report(&r, vec!["h.ppm".into()]);
            let text = doc.to_json().unwrap();
            assert!(text.contains("\"schemaVersion\": 1"));
            assert_eq!(ReportDocument::from_json(&text).unwrap(), doc);
        }
    }

    #[test]
    fn stage_file_names() {
        use crate::weights::Role;
        assert_eq!(heatmap_name(&Stage::Attention { layer: 2, role: Role::Q }), "layer2_q");
        assert_eq!(heatmap_name(&Stage::Mlp { layer: 0 }), "layer0_mlp");
    }
}
