//! Scene manifest: the single JSON document that records segment layout,
//! seeds, directives, and per-segment status as a pipeline run advances.
//!
//! Statuses move only forward along the lattice
//! Pending -> Generated -> PoseEstimated -> {Normal | Abnormal} ->
//! Accepted; the only backward edge is Abnormal -> Pending, taken by the
//! QA retry path, which also bumps the segment seed so no seed is ever
//! reused. Writes are atomic (temp file + rename) so an interrupted run
//! leaves a consistent manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::LossWeights;
use crate::plan::{ExtensionDirective, SequenceLayout};
use crate::trajectory::Thresholds;

pub const MANIFEST_SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported schema version {0}")]
    UnsupportedSchema(u32),
    #[error("manifest invariant violated: {0}")]
    Invalid(String),
    #[error("unknown segment id: {0}")]
    UnknownSegment(String),
    #[error("illegal status transition for {segment}: {from:?} -> {to:?}")]
    IllegalTransition {
        segment: String,
        from: SegmentStatus,
        to: SegmentStatus,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentRole {
    Init,
    ExtendLeft,
    ExtendRight,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentStatus {
    Pending,
    Generated,
    PoseEstimated,
    Normal,
    Abnormal,
    Accepted,
}

impl SegmentStatus {
    /// Forward edges of the status lattice.
    pub fn can_advance_to(self, next: SegmentStatus) -> bool {
        use SegmentStatus::*;
        matches!(
            (self, next),
            (Pending, Generated)
                | (Generated, PoseEstimated)
                | (PoseEstimated, Normal)
                | (PoseEstimated, Abnormal)
                | (Normal, Accepted)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentEntry {
    pub segment_id: String,
    pub role: SegmentRole,
    pub frame_dir: PathBuf,
    pub frame_count: usize,
    pub seed: u64,
    pub directive: Option<ExtensionDirective>,
    pub status: SegmentStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub schema: u32,
    pub scene_name: String,
    /// Free-text generation prompt, recorded as metadata.
    pub prompt: Option<String>,
    pub segments: Vec<SegmentEntry>,
    pub pose_model_dir: PathBuf,
    pub priors_dir: PathBuf,
    pub weights: LossWeights,
    pub thresholds: Thresholds,
    pub max_retries: u32,
}

impl SceneManifest {
    /// Build a fresh manifest from a sequence layout: all segments
    /// Pending, extension segments carrying their directives, segment
    /// seeds derived as base_seed + position.
    pub fn from_layout(
        scene_name: &str,
        layout: &SequenceLayout,
        directives: &[(String, ExtensionDirective)],
        root: &Path,
        base_seed: u64,
    ) -> Result<Self, ManifestError> {
        let directive_for = |id: &str| -> Option<ExtensionDirective> {
            directives
                .iter()
                .find(|(d_id, _)| d_id == id)
                .map(|(_, d)| *d)
        };
        let segments = layout
            .segment_ids
            .iter()
            .enumerate()
            .map(|(pos, id)| {
                let role = if id == "init" {
                    SegmentRole::Init
                } else if id.starts_with("left_") {
                    SegmentRole::ExtendLeft
                } else {
                    SegmentRole::ExtendRight
                };
                let frame_count = if role == SegmentRole::Init {
                    layout.init_length
                } else {
                    layout.extension_length
                };
                let directive = directive_for(id);
                if role != SegmentRole::Init && directive.is_none() {
                    return Err(ManifestError::Invalid(format!(
                        "extension segment {} has no directive",
                        id
                    )));
                }
                Ok(SegmentEntry {
                    segment_id: id.clone(),
                    role,
                    frame_dir: root.join("frames").join(id),
                    frame_count,
                    seed: base_seed + pos as u64,
                    directive,
                    status: SegmentStatus::Pending,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let m = SceneManifest {
            schema: MANIFEST_SCHEMA,
            scene_name: scene_name.to_string(),
            prompt: None,
            segments,
            pose_model_dir: root.join("poses"),
            priors_dir: root.join("priors"),
            weights: LossWeights::default(),
            thresholds: Thresholds::default(),
            max_retries: 10,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), ManifestError> {
        if self.schema != MANIFEST_SCHEMA {
            return Err(ManifestError::UnsupportedSchema(self.schema));
        }
        let init_count = self
            .segments
            .iter()
            .filter(|s| s.role == SegmentRole::Init)
            .count();
        if init_count != 1 {
            return Err(ManifestError::Invalid(format!(
                "expected exactly one Init segment, found {}",
                init_count
            )));
        }
        let init_pos = self
            .segments
            .iter()
            .position(|s| s.role == SegmentRole::Init)
            .unwrap();
        for (i, s) in self.segments.iter().enumerate() {
            let expected = if i < init_pos {
                SegmentRole::ExtendLeft
            } else if i == init_pos {
                SegmentRole::Init
            } else {
                SegmentRole::ExtendRight
            };
            if s.role != expected {
                return Err(ManifestError::Invalid(format!(
                    "segment {} at position {} has role {:?}, expected {:?}",
                    s.segment_id, i, s.role, expected
                )));
            }
            if s.role != SegmentRole::Init && s.directive.is_none() {
                return Err(ManifestError::Invalid(format!(
                    "extension segment {} has no directive",
                    s.segment_id
                )));
            }
            if s.frame_count == 0 {
                return Err(ManifestError::Invalid(format!(
                    "segment {} has zero frames",
                    s.segment_id
                )));
            }
        }
        self.thresholds
            .validate()
            .map_err(ManifestError::Invalid)?;
        Ok(())
    }

    pub fn segment(&self, id: &str) -> Result<&SegmentEntry, ManifestError> {
        self.segments
            .iter()
            .find(|s| s.segment_id == id)
            .ok_or_else(|| ManifestError::UnknownSegment(id.to_string()))
    }

    fn segment_mut(&mut self, id: &str) -> Result<&mut SegmentEntry, ManifestError> {
        self.segments
            .iter_mut()
            .find(|s| s.segment_id == id)
            .ok_or_else(|| ManifestError::UnknownSegment(id.to_string()))
    }

    /// Advance a segment one step forward along the lattice.
    pub fn advance_status(
        &mut self,
        id: &str,
        next: SegmentStatus,
    ) -> Result<(), ManifestError> {
        let seg = self.segment_mut(id)?;
        if !seg.status.can_advance_to(next) {
            return Err(ManifestError::IllegalTransition {
                segment: seg.segment_id.clone(),
                from: seg.status,
                to: next,
            });
        }
        seg.status = next;
        Ok(())
    }

    /// The one legal backward edge: an Abnormal segment returns to
    /// Pending for regeneration with the next seed.
    pub fn reset_for_retry(&mut self, id: &str) -> Result<u64, ManifestError> {
        let seg = self.segment_mut(id)?;
        if seg.status != SegmentStatus::Abnormal {
            return Err(ManifestError::IllegalTransition {
                segment: seg.segment_id.clone(),
                from: seg.status,
                to: SegmentStatus::Pending,
            });
        }
        seg.status = SegmentStatus::Pending;
        seg.seed += 1;
        Ok(seg.seed)
    }

    pub fn all_accepted(&self) -> bool {
        self.segments
            .iter()
            .all(|s| s.status == SegmentStatus::Accepted)
    }

    /// Serialize to pretty JSON (stable field order via serde derive).
    pub fn to_json(&self) -> Result<String, ManifestError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, ManifestError> {
        let m: SceneManifest = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    /// Atomic save: write to a sibling temp file, then rename over the
    /// target, so readers never observe a torn manifest.
    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        let json = self.to_json()?;
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, json.as_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }
}
