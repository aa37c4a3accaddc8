//! Landmark sets and the layout metadata that gives indices meaning:
//! inner/contour tags, the horizontal-flip permutation, eye rings used for
//! pupil estimation, and the polygon loops of the makeup parts.
//!
//! "Left" and "right" always refer to the image, not the subject.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub points: Vec<[f64; 2]>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 2]>) -> Self {
        LandmarkSet { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `(min_x, min_y, max_x, max_y)`.
    pub fn bounds(&self) -> Option<[f64; 4]> {
        let first = self.points.first()?;
        Some(self.points.iter().fold([first[0], first[1], first[0], first[1]], |b, p| {
            [b[0].min(p[0]), b[1].min(p[1]), b[2].max(p[0]), b[3].max(p[1])]
        }))
    }

    pub fn centroid(&self, indices: &[usize]) -> [f64; 2] {
        let n = indices.len().max(1) as f64;
        let (sx, sy) = indices
            .iter()
            .fold((0.0, 0.0), |(sx, sy), &i| (sx + self.points[i][0], sy + self.points[i][1]));
        [sx / n, sy / n]
    }

    pub fn map(&self, f: impl Fn([f64; 2]) -> [f64; 2]) -> Self {
        LandmarkSet {
            points: self.points.iter().map(|&p| f(p)).collect(),
        }
    }

    pub fn flat(&self) -> Vec<f32> {
        self.points.iter().flat_map(|p| [p[0] as f32, p[1] as f32]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointTag {
    Inner,
    Contour,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Inner,
    Contour,
    All,
}

impl Subset {
    pub fn contains(self, tag: PointTag) -> bool {
        match self {
            Subset::All => true,
            Subset::Inner => tag == PointTag::Inner,
            Subset::Contour => tag == PointTag::Contour,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FacePart {
    UpperLip,
    LowerLip,
    LeftCheek,
    RightCheek,
    LeftEyelid,
    RightEyelid,
}

impl FacePart {
    pub const ALL: [FacePart; 6] = [
        FacePart::UpperLip,
        FacePart::LowerLip,
        FacePart::LeftCheek,
        FacePart::RightCheek,
        FacePart::LeftEyelid,
        FacePart::RightEyelid,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkLayout {
    pub name: String,
    pub tags: Vec<PointTag>,
    /// `flip_remap[i]` is the index that point `i` becomes after a
    /// horizontal flip.
    pub flip_remap: Vec<usize>,
    pub left_eye: Vec<usize>,
    pub right_eye: Vec<usize>,
    pub parts: Vec<(FacePart, Vec<usize>)>,
}

fn pairs_to_remap(n: usize, pairs: &[(usize, usize)]) -> Vec<usize> {
    let mut remap: Vec<usize> = (0..n).collect();
    for &(a, b) in pairs {
        remap[a] = b;
        remap[b] = a;
    }
    remap
}

impl LandmarkLayout {
    /// The 65-point layout produced by the synthetic face generator: 62 inner
    /// points (brows, eye rings with pupils, nose, lips) and 3 contour points
    /// (chin bottom and both jaw sides).
    pub fn synthetic65() -> Self {
        let mut pairs = Vec::new();
        // brows: outer -> inner on both sides
        pairs.extend((0..6).map(|k| (k, 6 + k)));
        // eye rings start at the outer corner, pupils last
        pairs.extend((0..8).map(|k| (12 + k, 21 + k)));
        pairs.push((20, 29));
        // nose bottom arc and wings
        pairs.extend([(35, 39), (36, 38), (40, 41)]);
        // outer lips: upper arc corner to corner, then lower arc back
        pairs.extend([(42, 48), (43, 47), (44, 46), (49, 53), (50, 52)]);
        // inner lips
        pairs.extend([(54, 58), (55, 57), (59, 61)]);
        pairs.push((63, 64));
        let mut tags = vec![PointTag::Inner; 62];
        tags.extend([PointTag::Contour; 3]);
        LandmarkLayout {
            name: "synthetic65".into(),
            tags,
            flip_remap: pairs_to_remap(65, &pairs),
            left_eye: (12..20).collect(),
            right_eye: (21..29).collect(),
            parts: vec![
                (FacePart::UpperLip, vec![42, 43, 44, 45, 46, 47, 48, 58, 57, 56, 55, 54]),
                (FacePart::LowerLip, vec![48, 49, 50, 51, 52, 53, 42, 54, 61, 60, 59, 58]),
                (FacePart::LeftCheek, vec![19, 40, 42, 63]),
                (FacePart::RightCheek, vec![28, 41, 48, 64]),
                (FacePart::LeftEyelid, vec![12, 13, 14, 15, 16, 5, 4, 3, 2, 1, 0]),
                (FacePart::RightEyelid, vec![21, 22, 23, 24, 25, 11, 10, 9, 8, 7, 6]),
            ],
        }
    }

    /// The 68-point iBUG/300W layout (0-based indices).
    pub fn ibug68() -> Self {
        let mut pairs: Vec<(usize, usize)> = (0..8).map(|i| (i, 16 - i)).collect();
        pairs.extend((0..5).map(|i| (17 + i, 26 - i)));
        pairs.extend([(31, 35), (32, 34)]);
        pairs.extend([(36, 45), (37, 44), (38, 43), (39, 42), (40, 47), (41, 46)]);
        pairs.extend([(48, 54), (49, 53), (50, 52), (55, 59), (56, 58)]);
        pairs.extend([(60, 64), (61, 63), (65, 67)]);
        let mut tags = vec![PointTag::Contour; 17];
        tags.extend([PointTag::Inner; 51]);
        LandmarkLayout {
            name: "ibug68".into(),
            tags,
            flip_remap: pairs_to_remap(68, &pairs),
            left_eye: (36..42).collect(),
            right_eye: (42..48).collect(),
            parts: vec![
                (FacePart::UpperLip, vec![48, 49, 50, 51, 52, 53, 54, 64, 63, 62, 61, 60]),
                (FacePart::LowerLip, vec![54, 55, 56, 57, 58, 59, 48, 60, 67, 66, 65, 64]),
                (FacePart::LeftCheek, vec![40, 31, 48, 4, 2]),
                (FacePart::RightCheek, vec![47, 14, 12, 54, 35]),
                (FacePart::LeftEyelid, vec![36, 37, 38, 39, 21, 20, 19, 18, 17]),
                (FacePart::RightEyelid, vec![42, 43, 44, 45, 26, 25, 24, 23, 22]),
            ],
        }
    }

    /// `n` untagged inner points with no flip symmetry and no eyes; enough
    /// for training and inference, not for inter-pupil evaluation.
    pub fn generic(n: usize) -> Self {
        LandmarkLayout {
            name: format!("generic{n}"),
            tags: vec![PointTag::Inner; n],
            flip_remap: (0..n).collect(),
            left_eye: Vec::new(),
            right_eye: Vec::new(),
            parts: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn part_loop(&self, part: FacePart) -> Option<&[usize]> {
        self.parts.iter().find(|(p, _)| *p == part).map(|(_, l)| l.as_slice())
    }

    pub fn indices(&self, subset: Subset) -> Vec<usize> {
        (0..self.len()).filter(|&i| subset.contains(self.tags[i])).collect()
    }

    /// Centroids of the two eye rings, image-left first.
    pub fn pupils(&self, set: &LandmarkSet) -> Result<([f64; 2], [f64; 2])> {
        if self.left_eye.is_empty() || self.right_eye.is_empty() {
            return Err(Error::Data(format!("layout {} defines no eye rings", self.name)));
        }
        if set.len() != self.len() {
            return Err(Error::Data(format!(
                "layout {} has {} points, landmark set has {}",
                self.name,
                self.len(),
                set.len()
            )));
        }
        Ok((set.centroid(&self.left_eye), set.centroid(&self.right_eye)))
    }

    /// Mirror landmarks horizontally in a frame of `width` pixels, applying
    /// the index permutation.
    pub fn flip(&self, set: &LandmarkSet, width: f64) -> LandmarkSet {
        let mut points = vec![[0.0; 2]; set.len()];
        for (i, p) in set.points.iter().enumerate() {
            points[self.flip_remap[i]] = [width - 1.0 - p[0], p[1]];
        }
        LandmarkSet { points }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.flip_remap.len() != n {
            return Err(Error::Config("flip remap length differs from point count".into()));
        }
        for (i, &j) in self.flip_remap.iter().enumerate() {
            if j >= n || self.flip_remap[j] != i {
                return Err(Error::Config(format!("flip remap is not an involution at {i}")));
            }
        }
        let in_range = |v: &[usize]| v.iter().all(|&i| i < n);
        if !in_range(&self.left_eye) || !in_range(&self.right_eye) {
            return Err(Error::Config("eye ring index out of range".into()));
        }
        if !self.parts.iter().all(|(_, l)| in_range(l) && l.len() >= 3) {
            return Err(Error::Config("part loop invalid".into()));
        }
        Ok(())
    }
}

/// Layouts are referred to by name in model and training configs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayoutName {
    Synthetic65,
    Ibug68,
    Generic(usize),
}

impl LayoutName {
    pub fn layout(&self) -> LandmarkLayout {
        match self {
            LayoutName::Synthetic65 => LandmarkLayout::synthetic65(),
            LayoutName::Ibug68 => LandmarkLayout::ibug68(),
            LayoutName::Generic(n) => LandmarkLayout::generic(*n),
        }
    }

    pub fn num_points(&self) -> usize {
        match self {
            LayoutName::Synthetic65 => 65,
            LayoutName::Ibug68 => 68,
            LayoutName::Generic(n) => *n,
        }
    }
}

impl fmt::Display for LayoutName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayoutName::Synthetic65 => f.write_str("synthetic65"),
            LayoutName::Ibug68 => f.write_str("ibug68"),
            LayoutName::Generic(n) => write!(f, "generic{n}"),
        }
    }
}

impl FromStr for LayoutName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic65" => Ok(LayoutName::Synthetic65),
            "ibug68" => Ok(LayoutName::Ibug68),
            _ => s
                .strip_prefix("generic")
                .and_then(|n| n.parse().ok())
                .filter(|&n| n > 0)
                .map(LayoutName::Generic)
                .ok_or_else(|| Error::Config(format!("unknown landmark layout `{s}`"))),
        }
    }
}
