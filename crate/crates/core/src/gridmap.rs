//! Static 2-D occupancy map.
//!
//! Two on-disk formats are understood:
//!
//! * ASCII: a header line `W H RES OX OY` followed by `H` lines of `W`
//!   characters, `.` for free and `#` for occupied. The first grid line is
//!   row 0, the minimum-y row. Any other character loads as occupied.
//! * Binary PGM (`P5`), one byte per cell. Values `>= 250` (after scaling
//!   to a 255 max) are free, everything else occupied. The first pixel row
//!   is row 0. A header comment of the form `# RES OX OY` sets resolution
//!   and origin; otherwise [`RASTER_DEFAULT_RESOLUTION`] and the zero origin
//!   apply.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Grayscale values at or above this are free.
pub const RASTER_FREE_THRESHOLD: u8 = 250;
/// Meters per cell for rasters that carry no resolution comment.
pub const RASTER_DEFAULT_RESOLUTION: f64 = 0.05;
/// Smallest accepted width or height, in cells.
pub const MIN_DIMENSION: usize = 3;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("line {line}: {message}")]
    Ascii { line: usize, message: String },
    #[error("byte {offset}: {message}")]
    Raster { offset: usize, message: String },
    #[error("invalid map: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellState {
    Free,
    Occupied,
}

/// Integer cell coordinates. `x` is the column, `y` the row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

impl Cell {
    pub const fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WorldPoint {
    pub x: f64,
    pub y: f64,
}

impl WorldPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &WorldPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    width: usize,
    height: usize,
    resolution: f64,
    origin: WorldPoint,
    cells: Vec<CellState>,
}

impl OccupancyGrid {
    pub fn new(
        width: usize,
        height: usize,
        resolution: f64,
        origin: WorldPoint,
        cells: Vec<CellState>,
    ) -> Result<Self, MapError> {
        if width < MIN_DIMENSION || height < MIN_DIMENSION {
            return Err(MapError::Invalid(format!(
                "dimensions {width}x{height} below minimum {MIN_DIMENSION}x{MIN_DIMENSION}"
            )));
        }
        if !(resolution.is_finite() && resolution > 0.0) {
            return Err(MapError::Invalid(format!("resolution {resolution} must be positive")));
        }
        if !origin.is_finite() {
            return Err(MapError::Invalid("origin must be finite".into()));
        }
        if cells.len() != width * height {
            return Err(MapError::Invalid(format!(
                "expected {} cells, got {}",
                width * height,
                cells.len()
            )));
        }
        Ok(Self { width, height, resolution, origin, cells })
    }

    /// All-free grid with the origin at zero.
    pub fn free(width: usize, height: usize, resolution: f64) -> Result<Self, MapError> {
        Self::new(
            width,
            height,
            resolution,
            WorldPoint::default(),
            vec![CellState::Free; width * height],
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn origin(&self) -> WorldPoint {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> &[CellState] {
        &self.cells
    }

    /// Row-major index of `cell`. Panics in debug builds when out of bounds.
    #[inline]
    pub fn index(&self, cell: Cell) -> usize {
        debug_assert!(self.contains(cell));
        cell.y * self.width + cell.x
    }

    #[inline]
    pub fn cell_at(&self, index: usize) -> Cell {
        Cell::new(index % self.width, index / self.width)
    }

    #[inline]
    pub fn contains(&self, cell: Cell) -> bool {
        cell.x < self.width && cell.y < self.height
    }

    /// State of an in-bounds cell; `None` when out of bounds.
    pub fn state(&self, cell: Cell) -> Option<CellState> {
        self.contains(cell).then(|| self.cells[self.index(cell)])
    }

    pub fn is_free(&self, cell: Cell) -> bool {
        self.state(cell) == Some(CellState::Free)
    }

    pub fn set(&mut self, cell: Cell, state: CellState) {
        let i = self.index(cell);
        self.cells[i] = state;
    }

    pub fn free_count(&self) -> usize {
        self.cells.iter().filter(|c| **c == CellState::Free).count()
    }

    /// Containing cell of a world point, flooring. `None` outside the map.
    pub fn world_to_cell(&self, p: WorldPoint) -> Option<Cell> {
        let fx = ((p.x - self.origin.x) / self.resolution).floor();
        let fy = ((p.y - self.origin.y) / self.resolution).floor();
        if !(fx.is_finite() && fy.is_finite()) || fx < 0.0 || fy < 0.0 {
            return None;
        }
        let cell = Cell::new(fx as usize, fy as usize);
        self.contains(cell).then_some(cell)
    }

    /// Center of `cell` in world coordinates.
    pub fn cell_to_world(&self, cell: Cell) -> WorldPoint {
        WorldPoint::new(
            self.origin.x + (cell.x as f64 + 0.5) * self.resolution,
            self.origin.y + (cell.y as f64 + 0.5) * self.resolution,
        )
    }

    /// True when `p` lies inside the map on a free cell.
    pub fn is_free_at(&self, p: WorldPoint) -> bool {
        self.world_to_cell(p).is_some_and(|c| self.is_free(c))
    }

    /// World extent of the map diagonal.
    pub fn diagonal(&self) -> f64 {
        (self.width as f64 * self.resolution).hypot(self.height as f64 * self.resolution)
    }

    /// Grow every occupied cell by `radius` meters. A free cell becomes
    /// occupied when its center lies within `radius` of an occupied cell's
    /// center.
    pub fn inflate(&self, radius: f64) -> OccupancyGrid {
        assert!(radius >= 0.0, "inflation radius must be nonnegative");
        let reach = radius / self.resolution;
        let span = reach.floor() as isize;
        let limit = reach * reach + 1e-9;
        let mut offsets = Vec::new();
        for dy in -span..=span {
            for dx in -span..=span {
                if (dx != 0 || dy != 0) && ((dx * dx + dy * dy) as f64) <= limit {
                    offsets.push((dx, dy));
                }
            }
        }

        let mut out = self.clone();
        if offsets.is_empty() {
            return out;
        }
        let (w, h) = (self.width as isize, self.height as isize);
        for (i, state) in self.cells.iter().enumerate() {
            if *state != CellState::Occupied {
                continue;
            }
            let c = self.cell_at(i);
            for &(dx, dy) in &offsets {
                let (nx, ny) = (c.x as isize + dx, c.y as isize + dy);
                if nx >= 0 && ny >= 0 && nx < w && ny < h {
                    out.cells[(ny * w + nx) as usize] = CellState::Occupied;
                }
            }
        }
        out
    }

    /// Serialize in the ASCII format.
    pub fn to_ascii(&self) -> String {
        let mut s = format!(
            "{} {} {} {} {}\n",
            self.width, self.height, self.resolution, self.origin.x, self.origin.y
        );
        for row in self.cells.chunks(self.width) {
            s.extend(row.iter().map(|c| match c {
                CellState::Free => '.',
                CellState::Occupied => '#',
            }));
            s.push('\n');
        }
        s
    }

    pub fn parse_ascii(text: &str) -> Result<Self, MapError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(MapError::Ascii {
            line: 1,
            message: "empty file".into(),
        })?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(MapError::Ascii {
                line: 1,
                message: format!("header needs `W H RES OX OY`, got {} fields", fields.len()),
            });
        }
        let bad = |what: &str, v: &str| MapError::Ascii {
            line: 1,
            message: format!("bad {what} `{v}`"),
        };
        let width: usize = fields[0].parse().map_err(|_| bad("width", fields[0]))?;
        let height: usize = fields[1].parse().map_err(|_| bad("height", fields[1]))?;
        let resolution: f64 = fields[2].parse().map_err(|_| bad("resolution", fields[2]))?;
        let ox: f64 = fields[3].parse().map_err(|_| bad("origin x", fields[3]))?;
        let oy: f64 = fields[4].parse().map_err(|_| bad("origin y", fields[4]))?;
        if width == 0 || height == 0 {
            return Err(MapError::Ascii { line: 1, message: "zero dimension".into() });
        }
        if width < MIN_DIMENSION || height < MIN_DIMENSION {
            return Err(MapError::Ascii {
                line: 1,
                message: format!("dimensions below {MIN_DIMENSION}x{MIN_DIMENSION}"),
            });
        }
        if !(resolution.is_finite() && resolution > 0.0) {
            return Err(bad("resolution", fields[2]));
        }
        if !(ox.is_finite() && oy.is_finite()) {
            return Err(MapError::Ascii { line: 1, message: "origin must be finite".into() });
        }
        let cap = width.checked_mul(height).ok_or(MapError::Ascii {
            line: 1,
            message: "dimensions overflow".into(),
        })?;

        let mut cells = Vec::with_capacity(cap.min(1 << 24));
        for row in 0..height {
            let line_no = row + 2;
            let line = lines.next().ok_or(MapError::Ascii {
                line: line_no,
                message: format!("missing grid row {row} of {height}"),
            })?;
            let line = line.strip_suffix('\r').unwrap_or(line);
            let count = line.chars().count();
            if count != width {
                return Err(MapError::Ascii {
                    line: line_no,
                    message: format!("row has {count} cells, expected {width}"),
                });
            }
            cells.extend(line.chars().map(|ch| match ch {
                '.' => CellState::Free,
                _ => CellState::Occupied,
            }));
        }
        if let Some((extra, _)) = lines.enumerate().find(|(_, l)| !l.trim().is_empty()) {
            return Err(MapError::Ascii {
                line: height + 2 + extra,
                message: "trailing content after grid".into(),
            });
        }
        Self::new(width, height, resolution, WorldPoint::new(ox, oy), cells)
    }

    pub fn parse_pgm(bytes: &[u8]) -> Result<Self, MapError> {
        let mut pos = 0usize;
        let mut comments: Vec<String> = Vec::new();

        if bytes.len() < 2 || &bytes[..2] != b"P5" {
            return Err(MapError::Raster { offset: 0, message: "missing P5 magic".into() });
        }
        pos += 2;

        let mut fields = [0usize; 3];
        for (k, name) in ["width", "height", "maxval"].iter().enumerate() {
            // whitespace and comments
            loop {
                match bytes.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        let start = pos + 1;
                        while pos < bytes.len() && bytes[pos] != b'\n' {
                            pos += 1;
                        }
                        comments.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
                    }
                    _ => break,
                }
            }
            let start = pos;
            while pos < bytes.len() && bytes[pos].is_ascii_digit() {
                pos += 1;
            }
            if start == pos || pos - start > 9 {
                return Err(MapError::Raster {
                    offset: start,
                    message: format!("expected {name}"),
                });
            }
            fields[k] = std::str::from_utf8(&bytes[start..pos])
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or(MapError::Raster { offset: start, message: format!("bad {name}") })?;
        }
        match bytes.get(pos) {
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            _ => {
                return Err(MapError::Raster {
                    offset: pos,
                    message: "expected single whitespace before pixel data".into(),
                })
            }
        }
        let [width, height, maxval] = fields;
        if width == 0 || height == 0 {
            return Err(MapError::Raster { offset: pos, message: "zero dimension".into() });
        }
        if width < MIN_DIMENSION || height < MIN_DIMENSION {
            return Err(MapError::Raster {
                offset: pos,
                message: format!("dimensions below {MIN_DIMENSION}x{MIN_DIMENSION}"),
            });
        }
        if maxval == 0 || maxval > 255 {
            return Err(MapError::Raster {
                offset: pos,
                message: format!("maxval {maxval} unsupported (1..=255)"),
            });
        }
        let n = width * height;
        let data = &bytes[pos..];
        if data.len() < n {
            return Err(MapError::Raster {
                offset: bytes.len(),
                message: format!("pixel data truncated: {} of {n} bytes", data.len()),
            });
        }

        let (resolution, origin) = comments
            .iter()
            .find_map(|c| parse_geometry_comment(c))
            .unwrap_or((RASTER_DEFAULT_RESOLUTION, WorldPoint::default()));

        let cells = data[..n]
            .iter()
            .map(|&v| {
                let scaled = (v as usize * 255) / maxval;
                if scaled >= RASTER_FREE_THRESHOLD as usize {
                    CellState::Free
                } else {
                    CellState::Occupied
                }
            })
            .collect();
        Self::new(width, height, resolution, origin, cells)
    }

    /// Encode as `P5` with a geometry comment so that [`parse_pgm`] restores
    /// resolution and origin.
    ///
    /// [`parse_pgm`]: OccupancyGrid::parse_pgm
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!(
            "P5\n# {} {} {}\n{} {}\n255\n",
            self.resolution, self.origin.x, self.origin.y, self.width, self.height
        )
        .into_bytes();
        out.extend(self.cells.iter().map(|c| match c {
            CellState::Free => 254u8,
            CellState::Occupied => 0u8,
        }));
        out
    }

    /// Parse either format, detected from the leading magic.
    pub fn parse(bytes: &[u8]) -> Result<Self, MapError> {
        if bytes.starts_with(b"P5") {
            Self::parse_pgm(bytes)
        } else {
            let text = std::str::from_utf8(bytes).map_err(|e| {
                let offset = e.valid_up_to();
                let line = bytes[..offset].iter().filter(|b| **b == b'\n').count() + 1;
                MapError::Ascii { line, message: "not valid UTF-8".into() }
            })?;
            Self::parse_ascii(text)
        }
    }
}

fn parse_geometry_comment(comment: &str) -> Option<(f64, WorldPoint)> {
    let nums: Vec<f64> = comment
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<Result<_, _>>()
        .ok()?;
    match nums[..] {
        [r, ox, oy] if r.is_finite() && r > 0.0 && ox.is_finite() && oy.is_finite() => {
            Some((r, WorldPoint::new(ox, oy)))
        }
        _ => None,
    }
}

pub fn load_map(path: impl AsRef<Path>) -> Result<OccupancyGrid, MapError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| MapError::Io {
        path: path.display().to_string(),
        source,
    })?;
    OccupancyGrid::parse(&bytes)
}
