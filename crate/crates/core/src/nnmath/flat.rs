use crate::{Error, Result};

/// One named matrix (or vector, `cols == 1`) inside a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered description of the segments that make up a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParamLayout {
    segments: Vec<Segment>,
}

impl ParamLayout {
    pub fn new(segments: Vec<Segment>) -> Self {
        Self { segments }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Total number of scalars.
    pub fn len(&self) -> usize {
        self.segments.iter().map(Segment::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Append `other`, prefixing its segment names.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamLayout) {
        for s in &other.segments {
            self.segments.push(Segment {
                name: format!("{prefix}{}", s.name),
                ..s.clone()
            });
        }
    }

    /// Offset of the named segment, if present.
    pub fn offset_of(&self, name: &str) -> Option<(usize, &Segment)> {
        let mut offset = 0;
        for s in &self.segments {
            if s.name == name {
                return Some((offset, s));
            }
            offset += s.len();
        }
        None
    }
}

/// A parameter vector together with the layout that maps it back to networks.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatParams {
    pub values: Vec<f64>,
    pub layout: ParamLayout,
}

impl FlatParams {
    pub fn new(values: Vec<f64>, layout: ParamLayout) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::invalid(format!(
                "flat vector has {} values but layout describes {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: ParamLayout) -> Self {
        Self {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
