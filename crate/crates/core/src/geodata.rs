//! Sites, vector-derived strata layers, and the location embedding.
//!
//! Strata layers carry integer codes per pixel (−1 = unassigned) plus a
//! legend, and come from three sources: rasterized vector data (geology
//! polygons, river polylines), distance transforms of masks, and binning
//! of continuous grids. All of them drive the stratified error tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{
    read_grid, read_stack, write_grid, write_stack, GeoTransform, Grid, Stack,
    MAX_CANOPY_HEIGHT_M,
};

/// One modeling site: imagery, aligned height labels, optional strata.
#[derive(Debug, Clone)]
pub struct Site {
    pub id: String,
    pub imagery: Stack,
    pub labels: Grid,
    pub strata: BTreeMap<String, StrataLayer>,
    /// Site centroid in degrees, for the location-embedding bands.
    pub latlon: Option<(f64, f64)>,
}

impl Site {
    pub fn new(
        id: impl Into<String>,
        imagery: Stack,
        labels: Grid,
        latlon: Option<(f64, f64)>,
    ) -> Result<Site> {
        if imagery.width() != labels.width()
            || imagery.height() != labels.height()
            || imagery.transform() != labels.transform()
        {
            return Err(Error::shape(
                "imagery and labels must share shape and transform",
            ));
        }
        for &v in labels.values() {
            if !v.is_nan() && !(0.0..=MAX_CANOPY_HEIGHT_M).contains(&v) {
                return Err(Error::parameter(format!(
                    "label {v} outside [0, {MAX_CANOPY_HEIGHT_M}]; clamp labels first"
                )));
            }
        }
        Ok(Site {
            id: id.into(),
            imagery,
            labels,
            strata: BTreeMap::new(),
            latlon,
        })
    }

    pub fn add_stratum(&mut self, name: impl Into<String>, layer: StrataLayer) -> Result<()> {
        if layer.width() != self.labels.width()
            || layer.height() != self.labels.height()
            || layer.transform() != self.labels.transform()
        {
            return Err(Error::shape("stratum layer must align with the site grids"));
        }
        self.strata.insert(name.into(), layer);
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.labels.width()
    }

    pub fn height(&self) -> usize {
        self.labels.height()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryKind {
    Polyline,
    Polygon,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorPart {
    pub category: String,
    pub vertices: Vec<(f64, f64)>,
}

/// Vector geometry in map units. Polygons are rings (implicitly closed; a
/// repeated closing vertex is dropped on construction).
#[derive(Debug, Clone, PartialEq)]
pub struct VectorLayer {
    pub kind: GeometryKind,
    pub parts: Vec<VectorPart>,
}

impl VectorLayer {
    pub fn new(kind: GeometryKind, mut parts: Vec<VectorPart>) -> Result<VectorLayer> {
        for part in &mut parts {
            match kind {
                GeometryKind::Polyline => {
                    if part.vertices.len() < 2 {
                        return Err(Error::parameter("polyline part needs at least 2 vertices"));
                    }
                }
                GeometryKind::Polygon => {
                    if part.vertices.len() >= 4 && part.vertices.first() == part.vertices.last() {
                        part.vertices.pop();
                    }
                    if part.vertices.len() < 3 {
                        return Err(Error::parameter("polygon part needs at least 3 vertices"));
                    }
                }
            }
            if part.vertices.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
                return Err(Error::parameter("vector vertices must be finite"));
            }
        }
        Ok(VectorLayer { kind, parts })
    }

    /// Parses the line-oriented text form: `KIND;CATEGORY;x1,y1 x2,y2 ...`,
    /// one part per line. All lines must agree on KIND.
    pub fn parse_text(text: &str) -> Result<VectorLayer> {
        let mut kind: Option<GeometryKind> = None;
        let mut parts = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.splitn(3, ';');
            let kind_str = fields.next().unwrap_or("");
            let category = fields
                .next()
                .ok_or_else(|| Error::format(format!("line {}: missing category field", lineno + 1)))?;
            let coords = fields
                .next()
                .ok_or_else(|| Error::format(format!("line {}: missing coordinates", lineno + 1)))?;
            let this_kind = match kind_str {
                "polyline" => GeometryKind::Polyline,
                "polygon" => GeometryKind::Polygon,
                other => {
                    return Err(Error::format(format!(
                        "line {}: unknown geometry kind {other:?}",
                        lineno + 1
                    )))
                }
            };
            match kind {
                None => kind = Some(this_kind),
                Some(k) if k != this_kind => {
                    return Err(Error::format(format!(
                        "line {}: mixed geometry kinds in one layer",
                        lineno + 1
                    )))
                }
                _ => {}
            }
            let mut vertices = Vec::new();
            for pair in coords.split_whitespace() {
                let (x, y) = pair.split_once(',').ok_or_else(|| {
                    Error::format(format!("line {}: bad vertex {pair:?}", lineno + 1))
                })?;
                let x: f64 = x.parse().map_err(|_| {
                    Error::format(format!("line {}: bad x coordinate {x:?}", lineno + 1))
                })?;
                let y: f64 = y.parse().map_err(|_| {
                    Error::format(format!("line {}: bad y coordinate {y:?}", lineno + 1))
                })?;
                vertices.push((x, y));
            }
            parts.push(VectorPart {
                category: category.to_string(),
                vertices,
            });
        }
        let kind = kind.ok_or_else(|| Error::format("empty vector text"))?;
        VectorLayer::new(kind, parts)
    }

    pub fn to_text(&self) -> String {
        let kind = match self.kind {
            GeometryKind::Polyline => "polyline",
            GeometryKind::Polygon => "polygon",
        };
        let mut out = String::new();
        for part in &self.parts {
            out.push_str(kind);
            out.push(';');
            out.push_str(&part.category);
            out.push(';');
            let coords: Vec<String> = part
                .vertices
                .iter()
                .map(|(x, y)| format!("{x},{y}"))
                .collect();
            out.push_str(&coords.join(" "));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StrataKind {
    Categorical,
    Binned { edges: Vec<f64> },
}

/// Integer stratum codes on a grid; −1 marks unassigned pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct StrataLayer {
    width: usize,
    height: usize,
    transform: GeoTransform,
    codes: Vec<i32>,
    legend: BTreeMap<i32, String>,
    kind: StrataKind,
}

impl StrataLayer {
    pub fn new(
        width: usize,
        height: usize,
        transform: GeoTransform,
        codes: Vec<i32>,
        legend: BTreeMap<i32, String>,
        kind: StrataKind,
    ) -> Result<StrataLayer> {
        transform.validate()?;
        if codes.len() != width * height {
            return Err(Error::shape(format!(
                "{} codes for {width}x{height} layer",
                codes.len()
            )));
        }
        for &c in &codes {
            if c >= 0 && !legend.contains_key(&c) {
                return Err(Error::parameter(format!("code {c} missing from legend")));
            }
        }
        if let StrataKind::Binned { edges } = &kind {
            check_edges(edges)?;
        }
        Ok(StrataLayer {
            width,
            height,
            transform,
            codes,
            legend,
            kind,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn transform(&self) -> &GeoTransform {
        &self.transform
    }

    pub fn codes(&self) -> &[i32] {
        &self.codes
    }

    #[inline]
    pub fn code(&self, col: usize, row: usize) -> i32 {
        self.codes[row * self.width + col]
    }

    pub fn legend(&self) -> &BTreeMap<i32, String> {
        &self.legend
    }

    pub fn kind(&self) -> &StrataKind {
        &self.kind
    }

    /// Codes present in the layer, ascending, excluding −1.
    pub fn present_codes(&self) -> Vec<i32> {
        let mut seen: Vec<i32> = self.codes.iter().copied().filter(|&c| c >= 0).collect();
        seen.sort_unstable();
        seen.dedup();
        seen
    }
}

fn check_edges(edges: &[f64]) -> Result<()> {
    if edges.len() < 2 {
        return Err(Error::parameter("need at least two bin edges"));
    }
    if edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::parameter("bin edges must be strictly increasing"));
    }
    if edges.iter().any(|e| e.is_nan()) {
        return Err(Error::parameter("bin edges must not be NaN"));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct StrataSidecar {
    #[serde(flatten)]
    kind: StrataKind,
    legend: BTreeMap<String, String>,
}

fn legend_path(grd_path: &Path) -> PathBuf {
    let mut os = grd_path.as_os_str().to_owned();
    os.push(".legend.json");
    PathBuf::from(os)
}

/// Writes the codes as a single-band grid (codes stored as binary32) plus a
/// JSON legend sidecar next to it.
pub fn write_strata(layer: &StrataLayer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let values: Vec<f32> = layer.codes.iter().map(|&c| c as f32).collect();
    let grid = Grid::new(layer.width, layer.height, layer.transform, values)?;
    write_grid(&grid, path)?;
    let sidecar = StrataSidecar {
        kind: layer.kind.clone(),
        legend: layer
            .legend
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect(),
    };
    fs::write(legend_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

pub fn read_strata(path: impl AsRef<Path>) -> Result<StrataLayer> {
    let path = path.as_ref();
    let grid = read_grid(path)?;
    let sidecar: StrataSidecar = serde_json::from_slice(&fs::read(legend_path(path))?)?;
    let mut codes = Vec::with_capacity(grid.values().len());
    for &v in grid.values() {
        if !v.is_finite() || v.fract() != 0.0 {
            return Err(Error::format(format!("non-integer stratum code {v}")));
        }
        codes.push(v as i32);
    }
    let mut legend = BTreeMap::new();
    for (k, v) in sidecar.legend {
        let code: i32 = k
            .parse()
            .map_err(|_| Error::format(format!("bad legend code {k:?}")))?;
        legend.insert(code, v);
    }
    StrataLayer::new(
        grid.width(),
        grid.height(),
        *grid.transform(),
        codes,
        legend,
        sidecar.kind,
    )
    .map_err(|e| Error::format(format!("inconsistent strata file: {e}")))
}

/// Even-odd point-in-polygon with the usual half-open crossing rule:
/// strict inequalities make points on shared edges land in exactly one of
/// two adjacent polygons (left/bottom edges in, right/top out, for y-up
/// map coordinates).
fn point_in_ring(x: f64, y: f64, ring: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = ring.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = ring[i];
        let (xj, yj) = ring[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Liang-Barsky feasibility test: does the closed segment meet the closed
/// axis-aligned box?
fn segment_meets_box(
    (x0, y0): (f64, f64),
    (x1, y1): (f64, f64),
    (bx0, by0): (f64, f64),
    (bx1, by1): (f64, f64),
) -> bool {
    let dx = x1 - x0;
    let dy = y1 - y0;
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    for (p, q) in [
        (-dx, x0 - bx0),
        (dx, bx1 - x0),
        (-dy, y0 - by0),
        (dy, by1 - y0),
    ] {
        if p == 0.0 {
            if q < 0.0 {
                return false;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    t0 <= t1
}

/// Burns vector geometry into stratum codes on the target geometry.
///
/// Polylines mark every pixel whose square footprint the line touches with
/// code 1. Polygons assign the code of the part containing the pixel
/// center; on overlap, later parts win (painter's order). Categories map
/// to codes in order of first appearance.
pub fn rasterize(
    vector: &VectorLayer,
    target: &GeoTransform,
    width: usize,
    height: usize,
) -> Result<StrataLayer> {
    target.validate()?;
    if width == 0 || height == 0 {
        return Err(Error::parameter("target dimensions must be nonzero"));
    }
    let mut codes = vec![-1i32; width * height];
    let mut legend = BTreeMap::new();

    match vector.kind {
        GeometryKind::Polyline => {
            if let Some(part) = vector.parts.first() {
                let name = if part.category.is_empty() {
                    "feature".to_string()
                } else {
                    part.category.clone()
                };
                legend.insert(1, name);
            }
            for part in &vector.parts {
                // work in pixel-corner coordinates: footprints become unit squares
                let px: Vec<(f64, f64)> = part
                    .vertices
                    .iter()
                    .map(|&(x, y)| target.invert(x, y))
                    .collect();
                for seg in px.windows(2) {
                    let (a, b) = (seg[0], seg[1]);
                    let cmin = (a.0.min(b.0).floor().max(0.0)) as usize;
                    let cmax = a.0.max(b.0).floor().min(width as f64 - 1.0);
                    let rmin = (a.1.min(b.1).floor().max(0.0)) as usize;
                    let rmax = a.1.max(b.1).floor().min(height as f64 - 1.0);
                    if cmax < 0.0 || rmax < 0.0 {
                        continue;
                    }
                    for r in rmin..=rmax as usize {
                        for c in cmin..=cmax as usize {
                            let boxmin = (c as f64, r as f64);
                            let boxmax = (c as f64 + 1.0, r as f64 + 1.0);
                            if segment_meets_box(a, b, boxmin, boxmax) {
                                codes[r * width + c] = 1;
                            }
                        }
                    }
                }
            }
        }
        GeometryKind::Polygon => {
            let mut category_code: BTreeMap<&str, i32> = BTreeMap::new();
            let mut next_code = 0i32;
            for part in &vector.parts {
                let code = *category_code.entry(&part.category).or_insert_with(|| {
                    let c = next_code;
                    legend.insert(c, part.category.clone());
                    next_code += 1;
                    c
                });
                // bound the scan by the ring's bbox in pixel space
                let px: Vec<(f64, f64)> = part
                    .vertices
                    .iter()
                    .map(|&(x, y)| target.invert(x, y))
                    .collect();
                let cmin = px.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
                let cmax = px.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
                let rmin = px.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
                let rmax = px.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
                if cmax < 0.0 || rmax < 0.0 || cmin >= width as f64 || rmin >= height as f64 {
                    continue;
                }
                let c0 = cmin.floor().max(0.0) as usize;
                let c1 = cmax.floor().min(width as f64 - 1.0) as usize;
                let r0 = rmin.floor().max(0.0) as usize;
                let r1 = rmax.floor().min(height as f64 - 1.0) as usize;
                for r in r0..=r1 {
                    for c in c0..=c1 {
                        let (x, y) = target.pixel_center(c, r);
                        if point_in_ring(x, y, &part.vertices) {
                            codes[r * width + c] = code;
                        }
                    }
                }
            }
        }
    }

    StrataLayer::new(width, height, *target, codes, legend, StrataKind::Categorical)
}

const DIST_INF: u64 = u64::MAX;

/// Lower-envelope pass of the exact squared Euclidean distance transform.
/// `f` holds squared distances (DIST_INF = no site); writes the 1D result
/// min_q (p-q)^2 + f[q] into `out`.
fn envelope_pass(f: &[u64], out: &mut [u64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let mut sites = (0..n).filter(|&q| f[q] != DIST_INF);
    let first = match sites.next() {
        Some(q) => q,
        None => {
            out.fill(DIST_INF);
            return;
        }
    };
    v.push(first);
    z.push(f64::NEG_INFINITY);
    z.push(f64::INFINITY);
    let sq = |q: usize| (q * q) as f64;
    for q in sites {
        loop {
            let p = *v.last().unwrap();
            let s = ((f[q] as f64 + sq(q)) - (f[p] as f64 + sq(p))) / (2.0 * (q as f64 - p as f64));
            if s <= z[z.len() - 2] && v.len() > 1 {
                v.pop();
                z.pop();
                z.pop();
                z.push(f64::INFINITY);
            } else {
                let last = z.len() - 1;
                z[last] = s;
                z.push(f64::INFINITY);
                v.push(q);
                break;
            }
        }
    }
    let mut k = 0usize;
    for p in 0..n {
        while z[k + 1] < p as f64 {
            k += 1;
        }
        let q = v[k];
        let d = p.abs_diff(q) as u64;
        out[p] = d * d + f[q];
    }
}

/// Exact Euclidean distance, center to center, from every pixel to the
/// nearest code-1 pixel, in meters. Two-pass squared transform: integer
/// squared distances are exact, so results match an all-pairs brute force
/// bit for bit.
pub fn distance_to_nearest(mask: &StrataLayer, pixel_size: f64) -> Result<Grid> {
    if !(pixel_size > 0.0) || !pixel_size.is_finite() {
        return Err(Error::parameter(format!("pixel_size must be positive, got {pixel_size}")));
    }
    let (w, h) = (mask.width(), mask.height());
    if !mask.codes().iter().any(|&c| c == 1) {
        return Err(Error::domain("no target pixels in extent"));
    }

    // vertical pass: squared row distance to the nearest target per column
    let mut g = vec![DIST_INF; w * h];
    for c in 0..w {
        let mut last: Option<usize> = None;
        for r in 0..h {
            if mask.code(c, r) == 1 {
                last = Some(r);
            }
            if let Some(t) = last {
                let d = (r - t) as u64;
                g[r * w + c] = d * d;
            }
        }
        last = None;
        for r in (0..h).rev() {
            if mask.code(c, r) == 1 {
                last = Some(r);
            }
            if let Some(t) = last {
                let d = (t - r) as u64;
                let cell = &mut g[r * w + c];
                *cell = (*cell).min(d * d);
            }
        }
    }

    // horizontal pass: lower envelope over columns per row
    let mut out = vec![0f32; w * h];
    let mut row_in = vec![0u64; w];
    let mut row_out = vec![0u64; w];
    let mut v = Vec::with_capacity(w);
    let mut z = Vec::with_capacity(w + 1);
    for r in 0..h {
        row_in.copy_from_slice(&g[r * w..(r + 1) * w]);
        envelope_pass(&row_in, &mut row_out, &mut v, &mut z);
        for c in 0..w {
            out[r * w + c] = ((row_out[c] as f64).sqrt() * pixel_size) as f32;
        }
    }
    Grid::new(w, h, *mask.transform(), out)
}

/// Bins a continuous grid into left-closed intervals [edges[i], edges[i+1]).
/// Values outside the edge range and NaN map to −1.
pub fn bin_continuous(grid: &Grid, edges: &[f64]) -> Result<StrataLayer> {
    check_edges(edges)?;
    let mut legend = BTreeMap::new();
    for i in 0..edges.len() - 1 {
        legend.insert(i as i32, format!("[{}, {})", edges[i], edges[i + 1]));
    }
    let codes: Vec<i32> = grid
        .values()
        .iter()
        .map(|&v| {
            if v.is_nan() {
                return -1;
            }
            let v = f64::from(v);
            let pp = edges.partition_point(|e| *e <= v);
            if pp == 0 || pp == edges.len() {
                -1
            } else {
                (pp - 1) as i32
            }
        })
        .collect();
    StrataLayer::new(
        grid.width(),
        grid.height(),
        *grid.transform(),
        codes,
        legend,
        StrataKind::Binned {
            edges: edges.to_vec(),
        },
    )
}

/// Default height-bin edges for stratified tables, meters.
pub const DEFAULT_HEIGHT_EDGES: [f64; 6] = [0.0, 1.0, 3.0, 5.0, 10.0, 30.0];

/// Default distance-to-river bin edges, meters.
pub const DEFAULT_DISTANCE_EDGES: [f64; 6] = [0.0, 100.0, 250.0, 500.0, 1000.0, f64::INFINITY];

/// Three bounded channels encoding a position on the globe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocationEmbedding(pub [f64; 3]);

/// Unit-sphere Cartesian embedding of (lat, lon) in degrees: continuous,
/// bounded in [−1, 1], and free of the dateline/pole discontinuities raw
/// degrees would have.
pub fn location_embedding(lat: f64, lon: f64) -> Result<LocationEmbedding> {
    if !(-90.0..=90.0).contains(&lat) || lat.is_nan() {
        return Err(Error::parameter(format!("latitude {lat} outside [-90, 90]")));
    }
    if !(-180.0..=180.0).contains(&lon) || lon.is_nan() {
        return Err(Error::parameter(format!("longitude {lon} outside [-180, 180]")));
    }
    let (lat, lon) = (lat.to_radians(), lon.to_radians());
    Ok(LocationEmbedding([
        lat.cos() * lon.cos(),
        lat.cos() * lon.sin(),
        lat.sin(),
    ]))
}

#[derive(Serialize, Deserialize)]
struct SiteMeta {
    id: String,
    lat: Option<f64>,
    lon: Option<f64>,
}

/// Writes a site directory: site.json, imagery.grd, labels.grd, and one
/// grd+legend pair per stratum under strata/.
pub fn save_site(site: &Site, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let meta = SiteMeta {
        id: site.id.clone(),
        lat: site.latlon.map(|l| l.0),
        lon: site.latlon.map(|l| l.1),
    };
    fs::write(dir.join("site.json"), serde_json::to_vec_pretty(&meta)?)?;
    write_stack(&site.imagery, dir.join("imagery.grd"))?;
    write_grid(&site.labels, dir.join("labels.grd"))?;
    if !site.strata.is_empty() {
        let sdir = dir.join("strata");
        fs::create_dir_all(&sdir)?;
        for (name, layer) in &site.strata {
            write_strata(layer, sdir.join(format!("{name}.grd")))?;
        }
    }
    Ok(())
}

pub fn load_site(dir: impl AsRef<Path>) -> Result<Site> {
    let dir = dir.as_ref();
    let meta: SiteMeta = serde_json::from_slice(&fs::read(dir.join("site.json"))?)?;
    let imagery = read_stack(dir.join("imagery.grd"))?;
    let labels = read_grid(dir.join("labels.grd"))?;
    let latlon = match (meta.lat, meta.lon) {
        (Some(lat), Some(lon)) => Some((lat, lon)),
        _ => None,
    };
    let mut site = Site::new(meta.id, imagery, labels, latlon)?;
    let sdir = dir.join("strata");
    if sdir.is_dir() {
        let mut names: Vec<String> = Vec::new();
        for entry in fs::read_dir(&sdir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) == Some("grd") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    names.push(stem.to_string());
                }
            }
        }
        names.sort();
        for name in names {
            let layer = read_strata(sdir.join(format!("{name}.grd")))?;
            site.add_stratum(name, layer)?;
        }
    }
    Ok(site)
}

/// Loads every site directory (any subdirectory holding a site.json)
/// under `root`, ordered by site id.
pub fn load_sites(root: impl AsRef<Path>) -> Result<Vec<Site>> {
    let mut sites = Vec::new();
    for entry in fs::read_dir(root.as_ref())? {
        let path = entry?.path();
        if path.is_dir() && path.join("site.json").is_file() {
            sites.push(load_site(&path)?);
        }
    }
    if sites.is_empty() {
        return Err(Error::domain(format!(
            "no site directories under {}",
            root.as_ref().display()
        )));
    }
    sites.sort_by(|a, b| a.id.cmp(&b.id));
    for pair in sites.windows(2) {
        if pair[0].id == pair[1].id {
            return Err(Error::format(format!("duplicate site id {:?}", pair[0].id)));
        }
    }
    Ok(sites)
}
