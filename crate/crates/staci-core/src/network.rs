//! Directed stream-network topology.
//!
//! A network is a set of polyline segments joined by downstream pointers into
//! a tree draining to a single outlet, plus an ordered list of observation
//! sites. The site order fixes the dimension index of every vector and matrix
//! produced by the rest of the crate.
//!
//! Sites are addressed by `(segment, arc fraction)` rather than planar
//! coordinates: hydrologic distance is then exact arc-length arithmetic and
//! never requires projecting a point onto a polyline. Planar coordinates are
//! derived on demand.

use std::collections::HashMap;

use thiserror::Error;

/// A planar point in network-wide consistent (but otherwise arbitrary) units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// One stream segment: a polyline from its upstream end to its downstream
/// end, a positive flow weight, and an optional downstream segment.
#[derive(Debug, Clone)]
pub struct Segment {
    pub id: String,
    /// Ordered upstream-first; consecutive points must be distinct.
    pub polyline: Vec<Point>,
    /// Flow weight w(r), constant along the segment.
    pub weight: f64,
    /// Segment this one drains into; `None` marks the outlet.
    pub downstream_id: Option<String>,
}

/// An observation site, addressed by segment and arc-length fraction
/// (0 = upstream end, 1 = downstream end).
#[derive(Debug, Clone)]
pub struct Site {
    pub id: String,
    pub segment_id: String,
    pub arc_position: f64,
}

/// A point on the network in internal (segment index, arc fraction) form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Location {
    pub segment: usize,
    pub arc: f64,
}

/// Directional flow relation between two locations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowRelation {
    /// Neither location drains through the other (parallel branches).
    None,
    AUpstreamOfB,
    BUpstreamOfA,
    SameLocation,
}

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("network needs at least one segment and one site")]
    Empty,
    #[error("segment {0:?}: polyline needs >= 2 points")]
    PolylineTooShort(String),
    #[error("segment {0:?}: consecutive polyline points coincide")]
    DegeneratePolyline(String),
    #[error("segment {0:?}: weight must be > 0, got {1}")]
    NonPositiveWeight(String, f64),
    #[error("duplicate segment id {0:?}")]
    DuplicateSegment(String),
    #[error("segment {0:?} drains into unknown segment {1:?}")]
    DanglingDownstream(String, String),
    #[error("downstream pointers contain a cycle through segment {0:?}")]
    CycleDetected(String),
    #[error("network has no outlet segment")]
    NoOutlet,
    #[error("multiple outlet segments: {0:?}")]
    MultipleOutlets(Vec<String>),
    #[error("site {0:?} references unknown segment {1:?}")]
    UnknownSegment(String, String),
    #[error("site {0:?}: arc_position {1} outside [0, 1]")]
    ArcOutOfRange(String, f64),
    #[error("unknown segment id {0:?}")]
    NoSuchSegment(String),
    #[error("arc fraction {0} outside [0, 1]")]
    BadArc(f64),
    #[error("locations are not flow-connected; hydrologic distance undefined")]
    NotFlowConnected,
}

/// One confluence whose weight differs from the sum of its upstream weights.
#[derive(Debug, Clone)]
pub struct AdditivityViolation {
    pub segment_id: String,
    pub weight: f64,
    pub upstream_sum: f64,
    pub residual: f64,
}

/// Report from [`StreamNetwork::validate_additivity`]. Headwater segments are
/// never flagged (the constraint is vacuous without upstream children).
#[derive(Debug, Clone)]
pub struct AdditivityReport {
    pub tolerance: f64,
    pub violations: Vec<AdditivityViolation>,
}

impl AdditivityReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// A validated stream network. Immutable after construction; safe to share
/// read-only across threads.
#[derive(Debug, Clone)]
pub struct StreamNetwork {
    segments: Vec<Segment>,
    sites: Vec<Site>,
    seg_index: HashMap<String, usize>,
    site_locations: Vec<Location>,
    lengths: Vec<f64>,
    downstream: Vec<Option<usize>>,
    upstream_children: Vec<Vec<usize>>,
    outlet: usize,
}

/// Validates topology and site placement, and precomputes arc lengths and
/// the downstream-pointer structure.
pub fn build_network(segments: Vec<Segment>, sites: Vec<Site>) -> Result<StreamNetwork, NetworkError> {
    if segments.is_empty() || sites.is_empty() {
        return Err(NetworkError::Empty);
    }

    let mut seg_index = HashMap::new();
    for (k, seg) in segments.iter().enumerate() {
        if seg.polyline.len() < 2 {
            return Err(NetworkError::PolylineTooShort(seg.id.clone()));
        }
        if seg.polyline.windows(2).any(|w| w[0] == w[1]) {
            return Err(NetworkError::DegeneratePolyline(seg.id.clone()));
        }
        if seg.weight <= 0.0 || seg.weight.is_nan() {
            return Err(NetworkError::NonPositiveWeight(seg.id.clone(), seg.weight));
        }
        if seg_index.insert(seg.id.clone(), k).is_some() {
            return Err(NetworkError::DuplicateSegment(seg.id.clone()));
        }
    }

    let mut downstream = Vec::with_capacity(segments.len());
    let mut outlets = Vec::new();
    for seg in &segments {
        match &seg.downstream_id {
            Some(id) => {
                let &k = seg_index
                    .get(id)
                    .ok_or_else(|| NetworkError::DanglingDownstream(seg.id.clone(), id.clone()))?;
                downstream.push(Some(k));
            }
            None => {
                outlets.push(seg.id.clone());
                downstream.push(None);
            }
        }
    }
    if outlets.is_empty() {
        return Err(NetworkError::NoOutlet);
    }
    if outlets.len() > 1 {
        return Err(NetworkError::MultipleOutlets(outlets));
    }
    let outlet = segments.iter().position(|s| s.downstream_id.is_none()).unwrap();

    // Every segment must reach the outlet without revisiting anything.
    for (k, seg) in segments.iter().enumerate() {
        let mut seen = vec![false; segments.len()];
        let mut cur = k;
        seen[cur] = true;
        while let Some(next) = downstream[cur] {
            if seen[next] {
                return Err(NetworkError::CycleDetected(seg.id.clone()));
            }
            seen[next] = true;
            cur = next;
        }
        if cur != outlet {
            // Unreachable given the single-outlet check, but keep the guard.
            return Err(NetworkError::NoOutlet);
        }
    }

    let mut upstream_children = vec![Vec::new(); segments.len()];
    for (k, d) in downstream.iter().enumerate() {
        if let Some(d) = d {
            upstream_children[*d].push(k);
        }
    }

    let lengths: Vec<f64> = segments
        .iter()
        .map(|s| s.polyline.windows(2).map(|w| w[0].dist(&w[1])).sum())
        .collect();

    let mut site_locations = Vec::with_capacity(sites.len());
    for site in &sites {
        let &k = seg_index
            .get(&site.segment_id)
            .ok_or_else(|| NetworkError::UnknownSegment(site.id.clone(), site.segment_id.clone()))?;
        if !(0.0..=1.0).contains(&site.arc_position) {
            return Err(NetworkError::ArcOutOfRange(site.id.clone(), site.arc_position));
        }
        site_locations.push(Location { segment: k, arc: site.arc_position });
    }

    Ok(StreamNetwork {
        segments,
        sites,
        seg_index,
        site_locations,
        lengths,
        downstream,
        upstream_children,
        outlet,
    })
}

impl StreamNetwork {
    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn site_count(&self) -> usize {
        self.sites.len()
    }

    pub fn segment_count(&self) -> usize {
        self.segments.len()
    }

    pub fn outlet(&self) -> usize {
        self.outlet
    }

    pub fn segment_index(&self, id: &str) -> Option<usize> {
        self.seg_index.get(id).copied()
    }

    pub fn segment_length(&self, segment: usize) -> f64 {
        self.lengths[segment]
    }

    pub fn segment_weight(&self, segment: usize) -> f64 {
        self.segments[segment].weight
    }

    pub fn downstream_of(&self, segment: usize) -> Option<usize> {
        self.downstream[segment]
    }

    /// Immediate upstream children of a segment (empty for headwaters).
    pub fn upstream_children(&self, segment: usize) -> &[usize] {
        &self.upstream_children[segment]
    }

    pub fn is_headwater(&self, segment: usize) -> bool {
        self.upstream_children[segment].is_empty()
    }

    pub fn site_location(&self, site: usize) -> Location {
        self.site_locations[site]
    }

    /// Resolves a `(segment id, arc fraction)` address.
    pub fn locate(&self, segment_id: &str, arc: f64) -> Result<Location, NetworkError> {
        let segment = self
            .segment_index(segment_id)
            .ok_or_else(|| NetworkError::NoSuchSegment(segment_id.to_string()))?;
        if !(0.0..=1.0).contains(&arc) {
            return Err(NetworkError::BadArc(arc));
        }
        Ok(Location { segment, arc })
    }

    /// Checks `|w(segment) - sum of immediate upstream weights| <= tolerance`
    /// at every confluence. Report-only: equal-weight networks violate strict
    /// additivity yet remain usable for the tail-up formulas.
    pub fn validate_additivity(&self, tolerance: f64) -> AdditivityReport {
        let mut violations = Vec::new();
        for (k, children) in self.upstream_children.iter().enumerate() {
            if children.is_empty() {
                continue;
            }
            let upstream_sum: f64 = children.iter().map(|&c| self.segments[c].weight).sum();
            let residual = (self.segments[k].weight - upstream_sum).abs();
            if residual > tolerance {
                violations.push(AdditivityViolation {
                    segment_id: self.segments[k].id.clone(),
                    weight: self.segments[k].weight,
                    upstream_sum,
                    residual,
                });
            }
        }
        AdditivityReport { tolerance, violations }
    }

    /// True when `upper`'s downstream path passes through `lower`
    /// (`upper != lower`).
    fn drains_through(&self, upper: usize, lower: usize) -> bool {
        let mut cur = upper;
        while let Some(next) = self.downstream[cur] {
            if next == lower {
                return true;
            }
            cur = next;
        }
        false
    }

    /// Total length of the segments strictly between `upper` and `lower` on
    /// the downstream chain; `None` if `upper` does not drain through `lower`.
    fn between_length(&self, upper: usize, lower: usize) -> Option<f64> {
        let mut total = 0.0;
        let mut cur = self.downstream[upper]?;
        while cur != lower {
            total += self.lengths[cur];
            cur = self.downstream[cur]?;
        }
        Some(total)
    }

    /// The upstream set of a location: its own segment restricted to
    /// `[0, arc]`, plus every segment draining through it with full `[0, 1]`.
    /// Intervals are arc fractions.
    pub fn upstream_segments(&self, loc: Location) -> Vec<(usize, (f64, f64))> {
        let mut out = vec![(loc.segment, (0.0, loc.arc))];
        for k in 0..self.segments.len() {
            if k != loc.segment && self.drains_through(k, loc.segment) {
                out.push((k, (0.0, 1.0)));
            }
        }
        out
    }

    /// Directional flow relation between two locations.
    pub fn relation(&self, a: Location, b: Location) -> FlowRelation {
        if a.segment == b.segment {
            if a.arc == b.arc {
                FlowRelation::SameLocation
            } else if a.arc < b.arc {
                FlowRelation::AUpstreamOfB
            } else {
                FlowRelation::BUpstreamOfA
            }
        } else if self.drains_through(a.segment, b.segment) {
            FlowRelation::AUpstreamOfB
        } else if self.drains_through(b.segment, a.segment) {
            FlowRelation::BUpstreamOfA
        } else {
            FlowRelation::None
        }
    }

    pub fn site_relation(&self, a: usize, b: usize) -> FlowRelation {
        self.relation(self.site_locations[a], self.site_locations[b])
    }

    /// Hydrologic distance (along the stream) between two flow-connected
    /// locations. Symmetric; errors for parallel-branch pairs, where the
    /// tail-up model leaves the distance undefined.
    pub fn distance(&self, a: Location, b: Location) -> Result<f64, NetworkError> {
        let (up, down) = match self.relation(a, b) {
            FlowRelation::SameLocation => return Ok(0.0),
            FlowRelation::AUpstreamOfB => (a, b),
            FlowRelation::BUpstreamOfA => (b, a),
            FlowRelation::None => return Err(NetworkError::NotFlowConnected),
        };
        if up.segment == down.segment {
            return Ok((down.arc - up.arc) * self.lengths[up.segment]);
        }
        let between = self
            .between_length(up.segment, down.segment)
            .expect("relation() established connectivity");
        Ok((1.0 - up.arc) * self.lengths[up.segment] + between + down.arc * self.lengths[down.segment])
    }

    pub fn site_distance(&self, a: usize, b: usize) -> Result<f64, NetworkError> {
        self.distance(self.site_locations[a], self.site_locations[b])
    }

    /// Planar coordinates of a location by linear interpolation along the
    /// segment polyline at the given arc-length fraction.
    pub fn coordinates(&self, loc: Location) -> Point {
        let poly = &self.segments[loc.segment].polyline;
        let target = loc.arc * self.lengths[loc.segment];
        let mut walked = 0.0;
        for w in poly.windows(2) {
            let step = w[0].dist(&w[1]);
            if walked + step >= target || step == 0.0 {
                let frac = if step > 0.0 { (target - walked) / step } else { 0.0 };
                let frac = frac.clamp(0.0, 1.0);
                return Point::new(w[0].x + frac * (w[1].x - w[0].x), w[0].y + frac * (w[1].y - w[0].y));
            }
            walked += step;
        }
        *poly.last().unwrap()
    }

    pub fn site_coordinates(&self, site: usize) -> Point {
        self.coordinates(self.site_locations[site])
    }
}
