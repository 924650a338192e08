//! Detection and annotation records, native JSON Lines I/O and the COCO
//! compatibility reader.
//!
//! All geometry is held in relative center format: `(cx, cy, w, h)` as
//! fractions of the image width and height. COCO files carry absolute
//! top-left `[x, y, w, h]` pixel boxes and are converted on ingestion using
//! the image dimension records of the annotation file.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Default tolerated overhang beyond the image border, as a fraction of the
/// image dimension. Boxes overhanging by more are rejected.
pub const DEFAULT_CLAMP_TOLERANCE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxGeometry {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxGeometry {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = BoxGeometry { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    /// Checks the field ranges: centers in `[0, 1]`, extents in `(0, 1]`.
    pub fn validate(&self) -> Result<()> {
        let BoxGeometry { cx, cy, w, h } = *self;
        if ![cx, cy, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::Validation(format!("non-finite box {self:?}")));
        }
        if !(0.0..=1.0).contains(&cx) || !(0.0..=1.0).contains(&cy) {
            return Err(Error::Validation(format!("box center outside [0,1]: {self:?}")));
        }
        if !(w > 0.0 && w <= 1.0 && h > 0.0 && h <= 1.0) {
            return Err(Error::Validation(format!("box extent outside (0,1]: {self:?}")));
        }
        Ok(())
    }

    /// Checks that the box stays inside the image up to `tolerance`.
    pub fn validate_extent(&self, tolerance: f64) -> Result<()> {
        let (x0, y0, x1, y1) = self.corners();
        if x0 < -tolerance || y0 < -tolerance || x1 > 1.0 + tolerance || y1 > 1.0 + tolerance {
            return Err(Error::Validation(format!(
                "box {self:?} extends beyond the image by more than {tolerance}"
            )));
        }
        Ok(())
    }

    /// Relative `(x_min, y_min, x_max, y_max)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Converts an absolute top-left `[x, y, w, h]` pixel box.
    ///
    /// Overhangs up to `clamp_tolerance` of the image dimension are clamped
    /// to the border; larger overhangs and nonpositive extents are errors.
    pub fn from_absolute(bbox: [f64; 4], image: &ImageRecord, clamp_tolerance: f64) -> Result<Self> {
        let [x, y, bw, bh] = bbox;
        if !bbox.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation(format!("non-finite box {bbox:?}")));
        }
        if bw <= 0.0 || bh <= 0.0 {
            return Err(Error::Validation(format!(
                "box {bbox:?} has nonpositive width or height"
            )));
        }
        let (cx, w) = clamp_axis(x, bw, image.width_px as f64, clamp_tolerance)
            .ok_or_else(|| overhang_error(bbox, image))?;
        let (cy, h) = clamp_axis(y, bh, image.height_px as f64, clamp_tolerance)
            .ok_or_else(|| overhang_error(bbox, image))?;
        BoxGeometry::new(cx, cy, w, h)
    }

    /// Absolute top-left `[x, y, w, h]` in pixels.
    pub fn to_absolute(&self, image: &ImageRecord) -> [f64; 4] {
        let iw = image.width_px as f64;
        let ih = image.height_px as f64;
        [
            (self.cx - 0.5 * self.w) * iw,
            (self.cy - 0.5 * self.h) * ih,
            self.w * iw,
            self.h * ih,
        ]
    }
}

fn overhang_error(bbox: [f64; 4], image: &ImageRecord) -> Error {
    Error::Validation(format!(
        "box {bbox:?} overhangs image {} ({}x{}) beyond the clamping tolerance",
        image.image_id, image.width_px, image.height_px
    ))
}

/// Returns relative (center, extent) along one axis, or `None` when the
/// overhang exceeds the tolerance.
fn clamp_axis(start: f64, extent: f64, size: f64, tolerance: f64) -> Option<(f64, f64)> {
    let lo = start / size;
    let hi = (start + extent) / size;
    if lo < -tolerance || hi > 1.0 + tolerance {
        return None;
    }
    if lo >= 0.0 && hi <= 1.0 {
        return Some(((start + 0.5 * extent) / size, extent / size));
    }
    let lo = lo.max(0.0);
    let hi = hi.min(1.0);
    if hi <= lo {
        return None;
    }
    Some((0.5 * (lo + hi), hi - lo))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub category_id: i64,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: BoxGeometry,
}

impl Detection {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Validation(format!(
                "detection score {} outside [0,1]",
                self.score
            )));
        }
        self.bbox.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub image_id: String,
    pub category_id: i64,
    #[serde(rename = "box")]
    pub bbox: BoxGeometry,
    #[serde(rename = "crowd", default)]
    pub crowd_flag: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub width_px: u32,
    pub height_px: u32,
}

/// Category id to display name.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CategoryTable(pub BTreeMap<i64, String>);

impl CategoryTable {
    pub fn contains(&self, id: i64) -> bool {
        self.0.contains_key(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = i64> + '_ {
        self.0.keys().copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GroundTruthObject>,
    pub images: Vec<ImageRecord>,
    pub categories: CategoryTable,
}

/// What to do with a record that fails validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InvalidRecordPolicy {
    #[default]
    Fail,
    SkipWithWarning,
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    pub invalid_records: InvalidRecordPolicy,
    pub clamp_tolerance: f64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            invalid_records: InvalidRecordPolicy::Fail,
            clamp_tolerance: DEFAULT_CLAMP_TOLERANCE,
        }
    }
}

/// Loads detections and annotations. Either file may be native JSON Lines or
/// COCO JSON; the format is sniffed from the content.
pub fn load_dataset(
    detections_path: impl AsRef<Path>,
    annotations_path: impl AsRef<Path>,
    opts: &LoadOptions,
) -> Result<Dataset> {
    let ann_path = annotations_path.as_ref();
    let det_path = detections_path.as_ref();

    let ann_text = read_text(ann_path)?;
    let annotations = match sniff(&ann_text) {
        Format::CocoDocument(doc) => parse_coco_annotations(ann_path, doc, opts)?,
        Format::CocoArray(_) => {
            return Err(Error::Parse {
                path: ann_path.to_path_buf(),
                line: 1,
                message: "annotation file is a bare JSON array; expected a COCO object with `images` or JSON Lines".into(),
            })
        }
        Format::JsonLines => parse_native_annotations(ann_path, &ann_text, opts)?,
    };
    let image_index: HashMap<&str, &ImageRecord> = annotations
        .images
        .iter()
        .map(|im| (im.image_id.as_str(), im))
        .collect();

    let det_text = read_text(det_path)?;
    let detections = match sniff(&det_text) {
        Format::CocoArray(items) => parse_coco_results(det_path, items, &image_index, opts)?,
        Format::CocoDocument(_) => {
            return Err(Error::Parse {
                path: det_path.to_path_buf(),
                line: 1,
                message: "detection file is a JSON object; expected a COCO results array or JSON Lines".into(),
            })
        }
        Format::JsonLines => parse_native_detections(det_path, &det_text, &image_index, opts)?,
    };

    let mut categories = annotations.categories;
    match categories {
        Some(ref table) => {
            for d in &detections {
                if !table.contains(d.category_id) {
                    return Err(Error::ReferentialIntegrity(format!(
                        "detection on image {} has category {} missing from the category table",
                        d.image_id, d.category_id
                    )));
                }
            }
        }
        None => {
            let mut table = BTreeMap::new();
            for id in annotations
                .objects
                .iter()
                .map(|g| g.category_id)
                .chain(detections.iter().map(|d| d.category_id))
            {
                table.entry(id).or_insert_with(|| id.to_string());
            }
            categories = Some(CategoryTable(table));
        }
    }

    Ok(Dataset {
        detections,
        ground_truth: annotations.objects,
        images: annotations.images,
        categories: categories.unwrap_or_default(),
    })
}

/// Writes detections as native JSON Lines, one record per line.
pub fn write_detections(detections: &[Detection], path: impl AsRef<Path>) -> Result<()> {
    write_json_lines(detections, path.as_ref())
}

/// Writes image records followed by object records as native JSON Lines.
pub fn write_annotations(
    images: &[ImageRecord],
    objects: &[GroundTruthObject],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for image in images {
        let line = serde_json::to_string(&AnnotationLine::Image { image: image.clone() })
            .expect("image record serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    for obj in objects {
        let line = serde_json::to_string(obj).expect("object record serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json_lines<T: Serialize>(records: &[T], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Validation(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Parses every nonblank line of a JSON Lines file.
pub(crate) fn read_json_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = read_text(path)?;
    json_lines(&text)
        .map(|(line, raw)| {
            serde_json::from_str(raw).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: e.to_string(),
            })
        })
        .collect()
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn json_lines<'a>(text: &'a str) -> impl Iterator<Item = (usize, &'a str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

enum Format {
    CocoArray(Vec<Value>),
    CocoDocument(Value),
    JsonLines,
}

fn sniff(text: &str) -> Format {
    let trimmed = text.trim_start();
    if trimmed.starts_with('[') {
        if let Ok(Value::Array(items)) = serde_json::from_str::<Value>(trimmed) {
            return Format::CocoArray(items);
        }
    } else if trimmed.starts_with('{') {
        if let Ok(doc @ Value::Object(_)) = serde_json::from_str::<Value>(trimmed) {
            if doc.get("images").is_some() {
                return Format::CocoDocument(doc);
            }
        }
    }
    Format::JsonLines
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum AnnotationLine {
    Image { image: ImageRecord },
    Object(GroundTruthObject),
}

struct Annotations {
    images: Vec<ImageRecord>,
    objects: Vec<GroundTruthObject>,
    categories: Option<CategoryTable>,
}

/// Applies the invalid-record policy; `Ok(None)` means skip.
fn admit<T>(result: Result<T>, policy: InvalidRecordPolicy, path: &Path, line: usize) -> Result<Option<T>> {
    match result {
        Ok(v) => Ok(Some(v)),
        Err(Error::Validation(msg)) => match policy {
            InvalidRecordPolicy::Fail => Err(Error::Validation(format!(
                "{}:{line}: {msg}",
                path.display()
            ))),
            InvalidRecordPolicy::SkipWithWarning => {
                log::warn!("skipping {}:{line}: {msg}", path.display());
                Ok(None)
            }
        },
        Err(e) => Err(e),
    }
}

fn check_unique_images(images: &[ImageRecord]) -> Result<()> {
    let mut seen = HashMap::new();
    for im in images {
        if im.width_px == 0 || im.height_px == 0 {
            return Err(Error::Validation(format!(
                "image {} has zero width or height",
                im.image_id
            )));
        }
        if seen.insert(im.image_id.as_str(), ()).is_some() {
            return Err(Error::ReferentialIntegrity(format!(
                "duplicate image record {}",
                im.image_id
            )));
        }
    }
    Ok(())
}

fn parse_native_annotations(path: &Path, text: &str, opts: &LoadOptions) -> Result<Annotations> {
    let mut images = Vec::new();
    let mut pending = Vec::new();
    for (line, raw) in json_lines(text) {
        let parsed: AnnotationLine = serde_json::from_str(raw).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        match parsed {
            AnnotationLine::Image { image } => images.push(image),
            AnnotationLine::Object(obj) => pending.push((line, obj)),
        }
    }
    check_unique_images(&images)?;
    let known: HashMap<&str, ()> = images.iter().map(|im| (im.image_id.as_str(), ())).collect();
    let mut objects = Vec::with_capacity(pending.len());
    for (line, obj) in pending {
        if !known.contains_key(obj.image_id.as_str()) {
            return Err(Error::ReferentialIntegrity(format!(
                "{}:{line}: object references unknown image {}",
                path.display(),
                obj.image_id
            )));
        }
        let checked = obj
            .bbox
            .validate()
            .and_then(|_| obj.bbox.validate_extent(opts.clamp_tolerance))
            .map(|_| obj);
        if let Some(obj) = admit(checked, opts.invalid_records, path, line)? {
            objects.push(obj);
        }
    }
    Ok(Annotations {
        images,
        objects,
        categories: None,
    })
}

fn parse_native_detections(
    path: &Path,
    text: &str,
    images: &HashMap<&str, &ImageRecord>,
    opts: &LoadOptions,
) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (line, raw) in json_lines(text) {
        let det: Detection = serde_json::from_str(raw).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        if !images.contains_key(det.image_id.as_str()) {
            return Err(Error::ReferentialIntegrity(format!(
                "{}:{line}: detection references unknown image {}",
                path.display(),
                det.image_id
            )));
        }
        let checked = det
            .validate()
            .and_then(|_| det.bbox.validate_extent(opts.clamp_tolerance))
            .map(|_| det);
        if let Some(det) = admit(checked, opts.invalid_records, path, line)? {
            out.push(det);
        }
    }
    Ok(out)
}

fn id_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn coco_field<'a>(path: &Path, item: &'a Value, idx: usize, key: &str) -> Result<&'a Value> {
    item.get(key).ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: format!("record {idx} lacks `{key}`"),
    })
}

fn coco_bbox(path: &Path, item: &Value, idx: usize) -> Result<[f64; 4]> {
    let raw = coco_field(path, item, idx, "bbox")?;
    let arr: Vec<f64> = serde_json::from_value(raw.clone()).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: format!("record {idx}: bad bbox: {e}"),
    })?;
    <[f64; 4]>::try_from(arr).map_err(|a| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: format!("record {idx}: bbox has {} entries, expected 4", a.len()),
    })
}

fn coco_int(path: &Path, item: &Value, idx: usize, key: &str) -> Result<i64> {
    coco_field(path, item, idx, key)?.as_i64().ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: format!("record {idx}: `{key}` is not an integer"),
    })
}

fn parse_coco_annotations(path: &Path, doc: Value, opts: &LoadOptions) -> Result<Annotations> {
    let section = |key: &str| -> Vec<Value> {
        match doc.get(key) {
            Some(Value::Array(items)) => items.clone(),
            _ => Vec::new(),
        }
    };
    let mut images = Vec::new();
    for (idx, item) in section("images").iter().enumerate() {
        let image_id = id_string(coco_field(path, item, idx, "id")?).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("image {idx}: `id` must be a number or string"),
        })?;
        let width = coco_int(path, item, idx, "width")?;
        let height = coco_int(path, item, idx, "height")?;
        if width <= 0 || height <= 0 || width > u32::MAX as i64 || height > u32::MAX as i64 {
            return Err(Error::Validation(format!(
                "image {image_id} has invalid dimensions {width}x{height}"
            )));
        }
        images.push(ImageRecord {
            image_id,
            width_px: width as u32,
            height_px: height as u32,
        });
    }
    check_unique_images(&images)?;
    let index: HashMap<&str, &ImageRecord> = images.iter().map(|im| (im.image_id.as_str(), im)).collect();

    let mut table = BTreeMap::new();
    for (idx, item) in section("categories").iter().enumerate() {
        let id = coco_int(path, item, idx, "id")?;
        let name = item
            .get("name")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .unwrap_or_else(|| id.to_string());
        table.insert(id, name);
    }

    let mut objects = Vec::new();
    for (idx, item) in section("annotations").iter().enumerate() {
        let image_id = id_string(coco_field(path, item, idx, "image_id")?).unwrap_or_default();
        let image = *index.get(image_id.as_str()).ok_or_else(|| {
            Error::ReferentialIntegrity(format!("annotation {idx} references unknown image {image_id}"))
        })?;
        let category_id = coco_int(path, item, idx, "category_id")?;
        if !table.is_empty() && !table.contains_key(&category_id) {
            return Err(Error::ReferentialIntegrity(format!(
                "annotation {idx} has unknown category {category_id}"
            )));
        }
        let crowd_flag = item.get("iscrowd").and_then(Value::as_i64).unwrap_or(0) != 0;
        let bbox = coco_bbox(path, item, idx)?;
        let geometry = BoxGeometry::from_absolute(bbox, image, opts.clamp_tolerance);
        if let Some(bbox) = admit(geometry, opts.invalid_records, path, idx + 1)? {
            objects.push(GroundTruthObject {
                image_id,
                category_id,
                bbox,
                crowd_flag,
            });
        }
    }

    // without a `categories` section the table is derived like the native format
    let categories = (!table.is_empty()).then_some(CategoryTable(table));
    Ok(Annotations {
        images,
        objects,
        categories,
    })
}

fn parse_coco_results(
    path: &Path,
    items: Vec<Value>,
    images: &HashMap<&str, &ImageRecord>,
    opts: &LoadOptions,
) -> Result<Vec<Detection>> {
    let mut out = Vec::with_capacity(items.len());
    for (idx, item) in items.iter().enumerate() {
        let image_id = id_string(coco_field(path, item, idx, "image_id")?).unwrap_or_default();
        let image = *images.get(image_id.as_str()).ok_or_else(|| {
            Error::ReferentialIntegrity(format!("result {idx} references unknown image {image_id}"))
        })?;
        let category_id = coco_int(path, item, idx, "category_id")?;
        let score = coco_field(path, item, idx, "score")?.as_f64().ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("result {idx}: `score` is not a number"),
        })?;
        let bbox = coco_bbox(path, item, idx)?;
        let det = BoxGeometry::from_absolute(bbox, image, opts.clamp_tolerance).and_then(|bbox| {
            let det = Detection {
                image_id: image_id.clone(),
                category_id,
                score,
                bbox,
            };
            det.validate().map(|_| det)
        });
        if let Some(det) = admit(det, opts.invalid_records, path, idx + 1)? {
            out.push(det);
        }
    }
    Ok(out)
}
