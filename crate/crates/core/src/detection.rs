//! Hybrid control detection: accessibility filtering, vision fusion and
//! Set-of-Mark annotation.

use std::collections::BTreeSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::domain::{iou, BoundingBox, Control, ControlSource};
use crate::simenv::Snapshot;

/// Vision boxes overlapping an accessibility box by more than 1/10 are dropped.
pub const DEDUP_IOU_NUMERATOR: u64 = 1;
pub const DEDUP_IOU_DENOMINATOR: u64 = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionDetection {
    pub control_type: String,
    pub confidence: f64,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    /// Caption for the detected element, if the detector produces one.
    #[serde(default)]
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionMetadata {
    pub acc_count: usize,
    pub vis_count: usize,
    pub discarded_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionResult {
    pub controls: Vec<Control>,
    pub metadata: FusionMetadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionOptions {
    /// Detections below this confidence are dropped before dedup.
    pub confidence_floor: f64,
    /// Also drop vision boxes that overlap an earlier surviving vision box.
    pub dedup_vision: bool,
}

impl Default for FusionOptions {
    fn default() -> Self {
        Self {
            confidence_floor: 0.0,
            dedup_vision: false,
        }
    }
}

/// Keep controls that pass the runtime predicates. Controls without an id get
/// `acc-<n>` from their position in the dump, so repeated calls agree.
pub fn filter_accessibility(raw: &[Control]) -> Vec<Control> {
    raw.iter()
        .enumerate()
        .filter(|(_, c)| c.visible)
        .map(|(i, c)| {
            let mut c = c.clone();
            if c.id.is_empty() {
                c.id = format!("acc-{i}");
            }
            c.source = ControlSource::Accessibility;
            c
        })
        .collect()
}

fn overlaps(a: &BoundingBox, b: &BoundingBox) -> bool {
    iou(a, b).exceeds(DEDUP_IOU_NUMERATOR, DEDUP_IOU_DENOMINATOR)
}

pub fn fuse(acc: &[Control], vis: &[VisionDetection], options: &FusionOptions) -> FusionResult {
    let mut controls = acc.to_vec();
    let mut kept: Vec<BoundingBox> = Vec::new();
    let mut discarded = 0;
    for det in vis {
        let drop = det.confidence < options.confidence_floor
            || acc.iter().any(|a| overlaps(&det.bbox, &a.bbox))
            || (options.dedup_vision && kept.iter().any(|k| overlaps(&det.bbox, k)));
        if drop {
            discarded += 1;
            continue;
        }
        controls.push(Control {
            id: format!("vis-{}", kept.len()),
            source: ControlSource::Vision,
            control_type: det.control_type.clone(),
            label: det.label.clone(),
            bbox: det.bbox,
            visible: true,
            enabled: true,
            som_mark: None,
            confidence: Some(det.confidence.clamp(0.0, 1.0)),
            stale: false,
        });
        kept.push(det.bbox);
    }
    FusionResult {
        controls,
        metadata: FusionMetadata {
            acc_count: acc.len(),
            vis_count: vis.len(),
            discarded_count: discarded,
        },
    }
}

/// Number controls 1..n in list order.
pub fn annotate_som(mut controls: Vec<Control>) -> Vec<Control> {
    for (i, c) in controls.iter_mut().enumerate() {
        c.som_mark = Some(i as u32 + 1);
    }
    controls
}

#[derive(Debug, thiserror::Error)]
pub enum DetectorError {
    #[error("vision detector request failed: {0}")]
    Transport(String),
    #[error("vision detector returned malformed detections: {0}")]
    Malformed(String),
}

pub trait VisionDetector: Send + Sync {
    fn detect(&self, snapshot: &Snapshot) -> Result<Vec<VisionDetection>, DetectorError>;
}

/// Detector that never sees anything (accessibility-only perception).
#[derive(Debug, Default, Clone, Copy)]
pub struct NullDetector;

impl VisionDetector for NullDetector {
    fn detect(&self, _: &Snapshot) -> Result<Vec<VisionDetection>, DetectorError> {
        Ok(Vec::new())
    }
}

/// Reports the simulator's custom-rendered controls as detections, with an
/// optional deterministic per-control box jitter of up to `jitter` pixels.
#[derive(Debug, Clone, Default)]
pub struct FixtureDetector {
    pub jitter: i32,
    pub confidence: f64,
}

impl FixtureDetector {
    pub fn new() -> Self {
        Self {
            jitter: 0,
            confidence: 0.9,
        }
    }

    pub fn with_jitter(mut self, jitter: i32) -> Self {
        self.jitter = jitter.max(0);
        self
    }

    fn offset(&self, id: &str, salt: u8) -> i32 {
        if self.jitter == 0 {
            return 0;
        }
        let h = id.bytes().chain([salt]).fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
        });
        let span = 2 * self.jitter as u64 + 1;
        (h % span) as i32 - self.jitter
    }
}

impl VisionDetector for FixtureDetector {
    fn detect(&self, snapshot: &Snapshot) -> Result<Vec<VisionDetection>, DetectorError> {
        Ok(snapshot
            .vision_only
            .iter()
            .map(|c| VisionDetection {
                control_type: c.control_type.clone(),
                confidence: self.confidence,
                bbox: c.bbox.translated(self.offset(&c.id, 0), self.offset(&c.id, 1)),
                label: c.label.clone(),
            })
            .collect())
    }
}

#[derive(Serialize)]
struct DetectRequest<'a> {
    screenshot_ref: &'a str,
    app_id: &'a str,
}

/// Client for an external grounding model: POSTs `{screenshot_ref, app_id}`
/// and expects a JSON list of [`VisionDetection`].
pub struct HttpDetector {
    endpoint: String,
    client: reqwest::blocking::Client,
}

impl HttpDetector {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Result<Self, DetectorError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| DetectorError::Transport(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into(),
            client,
        })
    }
}

impl VisionDetector for HttpDetector {
    fn detect(&self, snapshot: &Snapshot) -> Result<Vec<VisionDetection>, DetectorError> {
        let body = self
            .client
            .post(&self.endpoint)
            .json(&DetectRequest {
                screenshot_ref: &snapshot.screenshot_ref,
                app_id: &snapshot.app_id,
            })
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.text())
            .map_err(|e| DetectorError::Transport(e.to_string()))?;
        let detections: Vec<VisionDetection> =
            serde_json::from_str(&body).map_err(|e| DetectorError::Malformed(e.to_string()))?;
        if let Some(bad) = detections.iter().find(|d| !(0.0..=1.0).contains(&d.confidence)) {
            return Err(DetectorError::Malformed(format!("confidence {} outside [0,1]", bad.confidence)));
        }
        Ok(detections)
    }
}

/// True when every SoM mark in `controls` is distinct.
pub fn marks_unique(controls: &[Control]) -> bool {
    let mut seen = BTreeSet::new();
    controls.iter().filter_map(|c| c.som_mark).all(|m| seen.insert(m))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn acc(id: &str, l: i32, t: i32, r: i32, b: i32) -> Control {
        Control {
            id: id.into(),
            source: ControlSource::Accessibility,
            control_type: "Button".into(),
            label: id.into(),
            bbox: BoundingBox::new(l, t, r, b).unwrap(),
            visible: true,
            enabled: true,
            som_mark: None,
            confidence: None,
            stale: false,
        }
    }

    fn vis(l: i32, t: i32, r: i32, b: i32) -> VisionDetection {
        VisionDetection {
            control_type: "Icon".into(),
            confidence: 0.8,
            bbox: BoundingBox::new(l, t, r, b).unwrap(),
            label: String::new(),
        }
    }

    #[test]
    fn filter_drops_invisible_and_keeps_order() {
        let mut hidden = acc("h", 0, 0, 1, 1);
        hidden.visible = false;
        let mut disabled = acc("d", 0, 0, 1, 1);
        disabled.enabled = false;
        let out = filter_accessibility(&[acc("a", 0, 0, 1, 1), hidden, disabled, acc("", 2, 2, 3, 3)]);
        let ids: Vec<_> = out.iter().map(|c| c.id.as_str()).collect();
        assert_eq!(ids, ["a", "d", "acc-3"]);
        assert!(!out[1].enabled);
        assert!(filter_accessibility(&[]).is_empty());
    }

    #[test]
    fn filter_ids_stable() {
        let raw: Vec<_> = (0..10).map(|i| acc("", i, 0, i + 1, 1)).collect();
        assert_eq!(filter_accessibility(&raw), filter_accessibility(&raw));
        assert_eq!(filter_accessibility(&raw).len(), 10);
    }

    #[test]
    fn overlapping_vision_discarded() {
        let out = fuse(&[acc("a", 0, 0, 10, 10)], &[vis(5, 0, 15, 10)], &FusionOptions::default());
        assert_eq!(out.controls.len(), 1);
        assert_eq!(out.metadata.discarded_count, 1);
    }

    #[test]
    fn disjoint_vision_retained() {
        let out = fuse(&[acc("a", 0, 0, 10, 10)], &[vis(100, 100, 110, 110)], &FusionOptions::default());
        assert_eq!(out.controls[1].id, "vis-0");
        assert_eq!(out.controls[1].source, ControlSource::Vision);
        assert_eq!(out.metadata, FusionMetadata { acc_count: 1, vis_count: 1, discarded_count: 0 });
    }

    #[test]
    fn nothing_to_dedup_against() {
        let out = fuse(&[], &[vis(0, 0, 1, 1), vis(0, 0, 1, 1), vis(5, 5, 6, 6)], &FusionOptions::default());
        assert_eq!(out.controls.len(), 3);
    }

    #[test]
    fn exact_tenth_is_retained() {
        // 10x10 vs 10x1 strip inside it: inter 10, union 100.
        let out = fuse(&[acc("a", 0, 0, 10, 10)], &[vis(0, 0, 10, 1)], &FusionOptions::default());
        assert_eq!(out.controls.len(), 2);
        // 10/101 sits just under the threshold
        let out = fuse(&[acc("a", 0, 0, 10, 10)], &[vis(0, 0, 11, 1)], &FusionOptions::default());
        assert_eq!(out.controls.len(), 2);
        // 11/100 is over it
        let out = fuse(&[acc("a", 0, 0, 10, 10)], &[vis(0, 0, 10, 1), vis(0, 1, 1, 2)], &FusionOptions::default());
        assert_eq!(out.controls.len(), 3);
        let out = fuse(&[acc("a", 0, 0, 10, 10)], &[vis(-1, 0, 10, 1)], &FusionOptions::default());
        assert_eq!(out.metadata.discarded_count, 0, "10/101");
        let out = fuse(&[acc("a", 0, 0, 11, 10)], &[vis(0, 0, 11, 1)], &FusionOptions::default());
        assert_eq!(out.metadata.discarded_count, 0, "11/110 is exactly a tenth");
        let out = fuse(&[acc("a", 0, 0, 10, 10)], &[vis(0, 0, 10, 2)], &FusionOptions::default());
        assert_eq!(out.metadata.discarded_count, 1, "20/100");
    }

    #[test]
    fn options_floor_and_vision_dedup() {
        let mut low = vis(0, 0, 5, 5);
        low.confidence = 0.1;
        let opts = FusionOptions { confidence_floor: 0.5, dedup_vision: true };
        let out = fuse(&[], &[low, vis(20, 20, 30, 30), vis(21, 20, 31, 30)], &opts);
        assert_eq!(out.controls.len(), 1);
        assert_eq!(out.metadata.discarded_count, 2);
    }

    #[test]
    fn som_marks() {
        let marked = annotate_som(vec![acc("a", 0, 0, 1, 1), acc("b", 0, 0, 1, 1), acc("c", 0, 0, 1, 1)]);
        let marks: Vec<_> = marked.iter().map(|c| c.som_mark.unwrap()).collect();
        assert_eq!(marks, [1, 2, 3]);
        assert!(marks_unique(&marked));
        assert_eq!(annotate_som(marked.clone()), marked);
        assert!(annotate_som(vec![]).is_empty());
    }

    #[test]
    fn fixture_jitter_is_bounded_and_deterministic() {
        let snap = Snapshot {
            app_id: "x".into(),
            screenshot_ref: "x@0".into(),
            accessibility: vec![],
            vision_only: vec![acc("w1", 10, 10, 20, 20), acc("w2", 30, 30, 40, 40)],
            tick: 0,
        };
        let det = FixtureDetector::new().with_jitter(3);
        let a = det.detect(&snap).unwrap();
        assert_eq!(a, det.detect(&snap).unwrap());
        for (d, c) in a.iter().zip(&snap.vision_only) {
            assert!((d.bbox.left - c.bbox.left).abs() <= 3);
            assert_eq!(d.bbox.width(), c.bbox.width());
        }
    }
}
