//! Event streams, depth ground truth, and their conversion into
//! `[T, C, H, W]` network inputs.
//!
//! Cumulative stacking splits a window into `T` equal sub-bins; frame `τ`
//! counts every event from the window start up to the end of sub-bin `τ`,
//! so successive frames are nested. Positive events land in channel 0,
//! negative ones in channel 1. Bins are half-open `[start, end)`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EVENT_CSV_HEADER: &str = "t_us,x,y,p";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn sign(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }

    fn channel(self) -> usize {
        match self {
            Polarity::Positive => 0,
            Polarity::Negative => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Event {
    /// Microseconds.
    pub t: u64,
    pub x: u32,
    pub y: u32,
    pub p: Polarity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
}

impl Geometry {
    pub fn new(height: usize, width: usize) -> Self {
        Geometry { height, width }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

pub fn parse_events(text: &str) -> Result<Vec<Event>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == EVENT_CSV_HEADER => {}
        Some((_, h)) => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected header {EVENT_CSV_HEADER:?}, found {h:?}"),
            })
        }
        None => return Ok(Vec::new()),
    }
    let mut events = Vec::new();
    let mut prev = 0u64;
    for (i, raw) in lines {
        let line = i + 1;
        let raw = raw.trim_end();
        if raw.is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let num = |k: usize, name: &str| -> Result<u64> {
            fields[k].parse::<u64>().map_err(|_| Error::Parse {
                line,
                msg: format!("{name} is not an unsigned integer: {:?}", fields[k]),
            })
        };
        let t = num(0, "t_us")?;
        let x = u32::try_from(num(1, "x")?).map_err(|_| Error::Parse {
            line,
            msg: "x out of range".into(),
        })?;
        let y = u32::try_from(num(2, "y")?).map_err(|_| Error::Parse {
            line,
            msg: "y out of range".into(),
        })?;
        let p = match num(3, "p")? {
            1 => Polarity::Positive,
            0 => Polarity::Negative,
            other => {
                return Err(Error::Parse {
                    line,
                    msg: format!("polarity must be 0 or 1, found {other}"),
                })
            }
        };
        if t < prev {
            return Err(Error::Ordering { line, t, prev });
        }
        prev = t;
        events.push(Event { t, x, y, p });
    }
    Ok(events)
}

/// Canonical CSV form: header, then one `t,x,y,p` record per line.
pub fn format_events(events: &[Event]) -> String {
    let mut s = String::with_capacity(16 * (events.len() + 1));
    s.push_str(EVENT_CSV_HEADER);
    s.push('\n');
    for e in events {
        let p = u8::from(e.p == Polarity::Positive);
        let _ = writeln!(s, "{},{},{},{}", e.t, e.x, e.y, p);
    }
    s
}

pub fn read_events(path: &Path) -> Result<Vec<Event>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_events(&text)
}

pub fn write_events(path: &Path, events: &[Event]) -> Result<()> {
    fs::write(path, format_events(events)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StackMode {
    Cumulative,
    Repeat,
}

impl std::str::FromStr for StackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cumulative" => Ok(StackMode::Cumulative),
            "repeat" => Ok(StackMode::Repeat),
            other => Err(Error::Validation(format!(
                "stack mode must be cumulative or repeat, got {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for StackMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StackMode::Cumulative => "cumulative",
            StackMode::Repeat => "repeat",
        })
    }
}

/// Network input `[T, C, H, W]` of non-negative event counts.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedTensor {
    pub data: Tensor,
    pub window_start: u64,
    pub window_len: u64,
}

impl StackedTensor {
    pub fn time_steps(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn geometry(&self) -> Geometry {
        Geometry::new(self.data.shape()[2], self.data.shape()[3])
    }

    /// Clamps every count to {0, 1}.
    pub fn binarized(&self) -> StackedTensor {
        StackedTensor {
            data: self.data.map(|c| c.min(1.0)),
            ..*self
        }
    }

    /// Splits a binocular tensor back into its (left, right) halves.
    pub fn split_channels(&self) -> Result<(StackedTensor, StackedTensor)> {
        if self.channels() != 4 {
            return Err(Error::dim("split_channels", 1, 4, self.channels()));
        }
        let s = self.data.shape();
        let (t, plane) = (s[0], s[2] * s[3]);
        let mut left = Vec::with_capacity(t * 2 * plane);
        let mut right = Vec::with_capacity(t * 2 * plane);
        for tau in 0..t {
            let base = tau * 4 * plane;
            left.extend_from_slice(&self.data.data()[base..base + 2 * plane]);
            right.extend_from_slice(&self.data.data()[base + 2 * plane..base + 4 * plane]);
        }
        let shape = vec![t, 2, s[2], s[3]];
        let mk = |d| StackedTensor {
            data: Tensor::new(shape.clone(), d).unwrap(),
            ..*self
        };
        Ok((mk(left), mk(right)))
    }
}

fn check_window(op: &'static str, window_len: u64, steps: usize) -> Result<u64> {
    if steps == 0 {
        return Err(Error::arg(op, "T must be >= 1"));
    }
    if window_len == 0 || window_len % steps as u64 != 0 {
        return Err(Error::arg(
            op,
            format!("window length {window_len} us is not a positive multiple of T={steps}"),
        ));
    }
    Ok(window_len / steps as u64)
}

/// Per-sub-bin counts `[T, 2, H, W]` (not yet accumulated).
fn bin_counts(
    op: &'static str,
    events: &[Event],
    window_start: u64,
    window_len: u64,
    steps: usize,
    geometry: Geometry,
) -> Result<Vec<f64>> {
    let bin = check_window(op, window_len, steps)?;
    let plane = geometry.pixels();
    let mut counts = vec![0.0; steps * 2 * plane];
    let end = window_start + window_len;
    for e in events {
        if e.t < window_start || e.t >= end {
            continue;
        }
        if e.x as usize >= geometry.width || e.y as usize >= geometry.height {
            return Err(Error::Bounds {
                x: e.x,
                y: e.y,
                width: geometry.width,
                height: geometry.height,
            });
        }
        let tau = ((e.t - window_start) / bin) as usize;
        let idx = (tau * 2 + e.p.channel()) * plane + e.y as usize * geometry.width + e.x as usize;
        counts[idx] += 1.0;
    }
    Ok(counts)
}

pub fn cumulative_stack(
    events: &[Event],
    window_start: u64,
    window_len: u64,
    steps: usize,
    geometry: Geometry,
) -> Result<StackedTensor> {
    let mut counts = bin_counts("cumulative_stack", events, window_start, window_len, steps, geometry)?;
    let frame = 2 * geometry.pixels();
    for tau in 1..steps {
        let (done, rest) = counts.split_at_mut(tau * frame);
        let prev = &done[(tau - 1) * frame..];
        for (c, p) in rest[..frame].iter_mut().zip(prev) {
            *c += p;
        }
    }
    Ok(StackedTensor {
        data: Tensor::new(vec![steps, 2, geometry.height, geometry.width], counts)?,
        window_start,
        window_len,
    })
}

/// The whole-window histogram replicated `steps` times.
pub fn repeat_stack(
    events: &[Event],
    window_start: u64,
    window_len: u64,
    steps: usize,
    geometry: Geometry,
) -> Result<StackedTensor> {
    check_window("repeat_stack", window_len, steps)?;
    let single = bin_counts("repeat_stack", events, window_start, window_len, 1, geometry)?;
    let data = single.repeat(steps);
    Ok(StackedTensor {
        data: Tensor::new(vec![steps, 2, geometry.height, geometry.width], data)?,
        window_start,
        window_len,
    })
}

pub fn stack(
    mode: StackMode,
    events: &[Event],
    window_start: u64,
    window_len: u64,
    steps: usize,
    geometry: Geometry,
) -> Result<StackedTensor> {
    match mode {
        StackMode::Cumulative => cumulative_stack(events, window_start, window_len, steps, geometry),
        StackMode::Repeat => repeat_stack(events, window_start, window_len, steps, geometry),
    }
}

/// Channel order `[left+, left-, right+, right-]`.
pub fn binocular_concat(left: &StackedTensor, right: &StackedTensor) -> Result<StackedTensor> {
    const OP: &str = "binocular_concat";
    let (ls, rs) = (left.data.shape(), right.data.shape());
    for axis in [0, 2, 3] {
        if ls[axis] != rs[axis] {
            return Err(Error::dim(OP, axis, ls[axis], rs[axis]));
        }
    }
    if ls[1] != 2 || rs[1] != 2 {
        return Err(Error::dim(OP, 1, 2, if ls[1] != 2 { ls[1] } else { rs[1] }));
    }
    if left.window_start != right.window_start || left.window_len != right.window_len {
        return Err(Error::dim(
            OP,
            "window",
            format!("{}+{}", left.window_start, left.window_len),
            format!("{}+{}", right.window_start, right.window_len),
        ));
    }
    let (t, plane) = (ls[0], ls[2] * ls[3]);
    let mut data = Vec::with_capacity(t * 4 * plane);
    for tau in 0..t {
        let range = tau * 2 * plane..(tau + 1) * 2 * plane;
        data.extend_from_slice(&left.data.data()[range.clone()]);
        data.extend_from_slice(&right.data.data()[range]);
    }
    Ok(StackedTensor {
        data: Tensor::new(vec![t, 4, ls[2], ls[3]], data)?,
        window_start: left.window_start,
        window_len: left.window_len,
    })
}

// ---------------------------------------------------------------------------
// depth ground truth
// ---------------------------------------------------------------------------

/// Depth map in meters. Invalid pixels hold 0.0 in `depth` and `false` in
/// `valid`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthFrame {
    pub depth: Tensor,
    pub valid: Vec<bool>,
    pub t: u64,
}

impl DepthFrame {
    pub fn fully_valid(depth: Tensor, t: u64) -> Self {
        let valid = vec![true; depth.len()];
        DepthFrame { depth, valid, t }
    }

    pub fn geometry(&self) -> Geometry {
        Geometry::new(self.depth.shape()[0], self.depth.shape()[1])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Parses the `H W t_us` grid format, requiring valid depths to be
    /// finite and positive.
    pub fn parse(text: &str) -> Result<Self> {
        let frame = parse_grid(text)?;
        for (i, (&d, &v)) in frame.depth.data().iter().zip(&frame.valid).enumerate() {
            if v && d <= 0.0 {
                let w = frame.depth.shape()[1];
                return Err(Error::Parse {
                    line: 2 + i / w,
                    msg: format!("depth must be positive, found {d}"),
                });
            }
        }
        Ok(frame)
    }

    pub fn to_text(&self) -> String {
        format_grid(&self.depth, Some(&self.valid), self.t)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Writes a rank-2 grid as `H W t_us` followed by `H` lines of `W` values;
/// masked-out cells are written as `nan`. Values use the shortest decimal
/// that round-trips exactly.
pub fn format_grid(grid: &Tensor, valid: Option<&[bool]>, t: u64) -> String {
    let (h, w) = (grid.shape()[0], grid.shape()[1]);
    let mut s = format!("{h} {w} {t}\n");
    for y in 0..h {
        for x in 0..w {
            if x > 0 {
                s.push(' ');
            }
            let i = y * w + x;
            if valid.is_some_and(|v| !v[i]) {
                s.push_str("nan");
            } else {
                let _ = write!(s, "{}", grid.data()[i]);
            }
        }
        s.push('\n');
    }
    s
}

/// Parses the grid format without the positivity check.
pub fn parse_grid(text: &str) -> Result<DepthFrame> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty depth file".into(),
    })?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let parse_u = |s: &str| s.parse::<u64>().ok();
    let (h, w, t) = match fields.as_slice() {
        [h, w, t] => match (parse_u(h), parse_u(w), parse_u(t)) {
            (Some(h), Some(w), Some(t)) if h > 0 && w > 0 => (h as usize, w as usize, t),
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("bad header {header:?}"),
                })
            }
        },
        _ => {
            return Err(Error::Parse {
                line: 1,
                msg: "header must be \"H W t_us\"".into(),
            })
        }
    };
    let mut depth = Vec::with_capacity(h * w);
    let mut valid = Vec::with_capacity(h * w);
    for row in 0..h {
        let line = row + 2;
        let raw = lines.next().ok_or(Error::Parse {
            line,
            msg: format!("expected {h} rows, found {row}"),
        })?;
        let vals: Vec<&str> = raw.split_whitespace().collect();
        if vals.len() != w {
            return Err(Error::Parse {
                line,
                msg: format!("expected {w} values, found {}", vals.len()),
            });
        }
        for v in vals {
            if v == "nan" {
                depth.push(0.0);
                valid.push(false);
                continue;
            }
            let d: f64 = v.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("not a number: {v:?}"),
            })?;
            if !d.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: format!("non-finite depth {v:?}"),
                });
            }
            depth.push(d);
            valid.push(true);
        }
    }
    if lines.any(|l| !l.trim().is_empty()) {
        return Err(Error::Parse {
            line: h + 2,
            msg: "trailing data after grid".into(),
        });
    }
    Ok(DepthFrame {
        depth: Tensor::new(vec![h, w], depth)?,
        valid,
        t,
    })
}

/// The frame nearest to the window end (ties go to the earlier frame),
/// provided it lies within half a window of it.
pub fn align_ground_truth(frames: &[DepthFrame], window_start: u64, window_len: u64) -> Result<&DepthFrame> {
    let target = window_start + window_len;
    let tolerance = window_len / 2;
    let best = frames
        .iter()
        .min_by_key(|f| (f.t.abs_diff(target), f.t))
        .filter(|f| f.t.abs_diff(target) <= tolerance);
    best.ok_or_else(|| Error::Alignment {
        target,
        tolerance,
        nearest: frames.iter().min_by_key(|f| (f.t.abs_diff(target), f.t)).map(|f| f.t),
    })
}
