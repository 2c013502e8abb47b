//! Joint RGB + alpha layouts and the trimap-conditioned reference image.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::rgba::{to_u8, RgbClip, RgbFrame};

/// How the RGB and alpha-as-RGB halves are joined into one clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutMode {
    /// Side by side within each frame, RGB on the left.
    WidthWise,
    /// Stacked within each frame, RGB on top.
    HeightWise,
    /// RGB frames followed by alpha frames.
    TemporalWise,
}

impl LayoutMode {
    pub const ALL: [LayoutMode; 3] = [
        LayoutMode::WidthWise,
        LayoutMode::HeightWise,
        LayoutMode::TemporalWise,
    ];

    pub fn is_spatial(self) -> bool {
        !matches!(self, LayoutMode::TemporalWise)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LayoutMode::WidthWise => "width_wise",
            LayoutMode::HeightWise => "height_wise",
            LayoutMode::TemporalWise => "temporal_wise",
        }
    }
}

impl fmt::Display for LayoutMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayoutMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "width_wise" | "w" => Ok(LayoutMode::WidthWise),
            "height_wise" | "h" => Ok(LayoutMode::HeightWise),
            "temporal_wise" | "t" => Ok(LayoutMode::TemporalWise),
            other => Err(Error::config(format!("unknown layout {other:?}"))),
        }
    }
}

/// The jointly modeled RGB-only clip.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositeClip {
    frames: Vec<RgbFrame>,
    layout: LayoutMode,
    boundary: usize,
}

impl CompositeClip {
    /// Wrap raw frames, checking that `boundary` splits them into two equal halves.
    pub fn new(frames: Vec<RgbFrame>, layout: LayoutMode, boundary: usize) -> Result<Self> {
        let clip = RgbClip::new(frames)?;
        let (h, w) = clip.dims();
        let extent = match layout {
            LayoutMode::WidthWise => w,
            LayoutMode::HeightWise => h,
            LayoutMode::TemporalWise => clip.len(),
        };
        if extent != 2 * boundary || boundary == 0 {
            return Err(Error::InvalidInput(format!(
                "boundary {boundary} does not halve {layout} extent {extent}"
            )));
        }
        Ok(Self {
            frames: clip.into_frames(),
            layout,
            boundary,
        })
    }

    pub fn frames(&self) -> &[RgbFrame] {
        &self.frames
    }

    pub fn layout(&self) -> LayoutMode {
        self.layout
    }

    pub fn boundary(&self) -> usize {
        self.boundary
    }

    pub fn dims(&self) -> (usize, usize) {
        self.frames[0].dims()
    }
}

fn join_frames(a: &RgbFrame, b: &RgbFrame, mode: LayoutMode) -> RgbFrame {
    let (h, w) = a.dims();
    match mode {
        LayoutMode::WidthWise => RgbFrame::from_fn(h, 2 * w, |c, y, x| {
            if x < w {
                a.get(c, y, x)
            } else {
                b.get(c, y, x - w)
            }
        }),
        LayoutMode::HeightWise => RgbFrame::from_fn(2 * h, w, |c, y, x| {
            if y < h {
                a.get(c, y, x)
            } else {
                b.get(c, y - h, x)
            }
        }),
        LayoutMode::TemporalWise => unreachable!("temporal layouts do not join frames"),
    }
}

fn halve_frame(f: &RgbFrame, mode: LayoutMode, boundary: usize) -> (RgbFrame, RgbFrame) {
    let (h, w) = f.dims();
    match mode {
        LayoutMode::WidthWise => (
            RgbFrame::from_fn(h, boundary, |c, y, x| f.get(c, y, x)),
            RgbFrame::from_fn(h, w - boundary, |c, y, x| f.get(c, y, x + boundary)),
        ),
        LayoutMode::HeightWise => (
            RgbFrame::from_fn(boundary, w, |c, y, x| f.get(c, y, x)),
            RgbFrame::from_fn(h - boundary, w, |c, y, x| f.get(c, y + boundary, x)),
        ),
        LayoutMode::TemporalWise => unreachable!("temporal layouts do not split frames"),
    }
}

/// Join an RGB clip with its alpha-as-RGB counterpart under `mode`.
pub fn concat_joint(rgb: &RgbClip, alpha_rgb: &RgbClip, mode: LayoutMode) -> Result<CompositeClip> {
    ensure_dim("frame count", rgb.len(), alpha_rgb.len())?;
    let (h, w) = rgb.dims();
    ensure_dim("height", h, alpha_rgb.dims().0)?;
    ensure_dim("width", w, alpha_rgb.dims().1)?;
    let (frames, boundary) = match mode {
        LayoutMode::WidthWise | LayoutMode::HeightWise => {
            let frames = rgb
                .frames()
                .iter()
                .zip(alpha_rgb.frames())
                .map(|(a, b)| join_frames(a, b, mode))
                .collect();
            (frames, if mode == LayoutMode::WidthWise { w } else { h })
        }
        LayoutMode::TemporalWise => {
            let frames = rgb
                .frames()
                .iter()
                .chain(alpha_rgb.frames())
                .cloned()
                .collect();
            (frames, rgb.len())
        }
    };
    Ok(CompositeClip {
        frames,
        layout: mode,
        boundary,
    })
}

/// Separate a composite back into its RGB half and its alpha-as-RGB half.
///
/// Generated composites need not have an exactly gray alpha half, so both
/// halves come back as plain clips; run the second through
/// [`crate::rgba::alpha_decode`] to obtain mattes.
pub fn split_joint(comp: &CompositeClip, mode: LayoutMode) -> Result<(RgbClip, RgbClip)> {
    if comp.layout != mode {
        return Err(Error::InvalidInput(format!(
            "composite has layout {} but {} was requested",
            comp.layout, mode
        )));
    }
    let (h, w) = comp.dims();
    let extent = match mode {
        LayoutMode::WidthWise => w,
        LayoutMode::HeightWise => h,
        LayoutMode::TemporalWise => comp.frames.len(),
    };
    if comp.boundary == 0 || 2 * comp.boundary != extent {
        return Err(Error::InvalidInput(format!(
            "boundary {} inconsistent with {mode} extent {extent}",
            comp.boundary
        )));
    }
    match mode {
        LayoutMode::TemporalWise => {
            let (a, b) = comp.frames.split_at(comp.boundary);
            Ok((RgbClip::new(a.to_vec())?, RgbClip::new(b.to_vec())?))
        }
        _ => {
            let (rgb, alpha): (Vec<_>, Vec<_>) = comp
                .frames
                .iter()
                .map(|f| halve_frame(f, mode, comp.boundary))
                .unzip();
            Ok((RgbClip::new(rgb)?, RgbClip::new(alpha)?))
        }
    }
}

/// Binary foreground map: white where the brightest 8-bit channel reaches `beta`.
pub fn make_trimap(reference: &RgbFrame, beta: u8) -> RgbFrame {
    let (h, w) = reference.dims();
    let mut out = RgbFrame::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let peak = (0..3).map(|c| to_u8(reference.get(c, y, x))).max().unwrap();
            if peak >= beta {
                for c in 0..3 {
                    out.set(c, y, x, 1.0);
                }
            }
        }
    }
    out
}

/// Which single image stands in for the reference under temporal layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalChoice {
    Rgb,
    Trimap,
}

/// What fills the alpha side of a spatially composed reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceFill {
    /// The thresholded trimap of the reference.
    Trimap,
    /// A plain copy of the reference.
    Duplicate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceImage {
    pub rgb: RgbFrame,
    pub trimap: RgbFrame,
    pub composed: RgbFrame,
}

/// `[ref | trimap(ref)]` along the layout axis, or a single image for temporal layouts.
pub fn compose_reference(
    reference: &RgbFrame,
    beta: u8,
    mode: LayoutMode,
    temporal_choice: TemporalChoice,
) -> ReferenceImage {
    compose_reference_with(reference, beta, mode, ReferenceFill::Trimap, temporal_choice)
}

/// Like [`compose_reference`], with a selectable fill for the alpha side.
pub fn compose_reference_with(
    reference: &RgbFrame,
    beta: u8,
    mode: LayoutMode,
    fill: ReferenceFill,
    temporal_choice: TemporalChoice,
) -> ReferenceImage {
    let trimap = make_trimap(reference, beta);
    let composed = match mode {
        LayoutMode::TemporalWise => match temporal_choice {
            TemporalChoice::Rgb => reference.clone(),
            TemporalChoice::Trimap => trimap.clone(),
        },
        spatial => {
            let side = match fill {
                ReferenceFill::Trimap => &trimap,
                ReferenceFill::Duplicate => reference,
            };
            join_frames(reference, side, spatial)
        }
    };
    ReferenceImage {
        rgb: reference.clone(),
        trimap,
        composed,
    }
}
