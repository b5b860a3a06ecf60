//! Synthetic stereo event scenes with exact depth.
//!
//! A scene is a set of fronto-parallel planes tiling the frame. Each plane
//! carries vertical stripes whose log intensity is a triangle wave of
//! period `texture_period_px` and peak `texture_amplitude`. The camera
//! translates laterally, so a plane at depth `d` slides by
//! `camera_velocity / d` pixels per second. A pixel fires an event each time
//! its log intensity crosses a multiple of `contrast_threshold`; since the
//! wave is piecewise linear in time the crossing instants are solved in
//! closed form. The right camera sees every plane shifted left by
//! `round(binocular_baseline_px / d)` pixels.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::parse_key_values;
use crate::error::{Error, Result};
use crate::events::{format_events, DepthFrame, Event, Geometry, Polarity};
use crate::tensor::Tensor;

/// Length of one window and spacing of ground-truth frames.
pub const WINDOW_US: u64 = 50_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub depth_m: f64,
    /// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub texture_period_px: f64,
}

impl Plane {
    fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }

    fn region(&self) -> String {
        format!("[{},{})x[{},{})", self.x0, self.x1, self.y0, self.y1)
    }

    pub fn disparity(&self, baseline_px: f64) -> usize {
        (baseline_px / self.depth_m).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub geometry: Geometry,
    pub n_windows: usize,
    pub planes: Vec<Plane>,
    /// Lateral image speed in pixels per second of a plane at 1 m.
    pub camera_velocity: f64,
    pub contrast_threshold: f64,
    /// Peak log intensity of the stripe texture.
    pub texture_amplitude: f64,
    /// Disparity in pixels of a plane at 1 m.
    pub binocular_baseline_px: f64,
    pub stereo: bool,
    /// Spurious events per pixel per second, per camera.
    pub noise_rate: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            geometry: Geometry::new(64, 64),
            n_windows: 8,
            planes: Vec::new(),
            camera_velocity: 200.0,
            contrast_threshold: 0.3,
            texture_amplitude: 1.0,
            binocular_baseline_px: 8.0,
            stereo: true,
            noise_rate: 0.0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("{key}: cannot parse {v:?}"),
    })
}

impl SceneSpec {
    /// Parses `key = value` lines; `plane = depth x0 y0 x1 y1 period` may
    /// repeat.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = SceneSpec::default();
        let (mut h, mut w) = (spec.geometry.height, spec.geometry.width);
        for (line, key, value) in parse_key_values(text)? {
            let v = value.as_str();
            match key.as_str() {
                "seed" => spec.seed = parse_num(line, &key, v)?,
                "height" => h = parse_num(line, &key, v)?,
                "width" => w = parse_num(line, &key, v)?,
                "n_windows" => spec.n_windows = parse_num(line, &key, v)?,
                "camera_velocity" => spec.camera_velocity = parse_num(line, &key, v)?,
                "contrast_threshold" => spec.contrast_threshold = parse_num(line, &key, v)?,
                "texture_amplitude" => spec.texture_amplitude = parse_num(line, &key, v)?,
                "binocular_baseline_px" => spec.binocular_baseline_px = parse_num(line, &key, v)?,
                "stereo" => spec.stereo = parse_num(line, &key, v)?,
                "noise_rate" => spec.noise_rate = parse_num(line, &key, v)?,
                "plane" => {
                    let f: Vec<&str> = v.split_whitespace().collect();
                    if f.len() != 6 {
                        return Err(Error::Parse {
                            line,
                            msg: format!("plane needs 6 fields (depth x0 y0 x1 y1 period), got {}", f.len()),
                        });
                    }
                    spec.planes.push(Plane {
                        depth_m: parse_num(line, "plane depth", f[0])?,
                        x0: parse_num(line, "plane x0", f[1])?,
                        y0: parse_num(line, "plane y0", f[2])?,
                        x1: parse_num(line, "plane x1", f[3])?,
                        y1: parse_num(line, "plane y1", f[4])?,
                        texture_period_px: parse_num(line, "plane period", f[5])?,
                    });
                }
                _ => {
                    return Err(Error::Parse {
                        line,
                        msg: format!("unknown scene key {key:?}"),
                    })
                }
            }
        }
        spec.geometry = Geometry::new(h, w);
        spec.validate()?;
        Ok(spec)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical text form; parses back to an equal spec.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.echo() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    fn echo(&self) -> Vec<(String, String)> {
        let mut kv = vec![
            ("seed".to_string(), self.seed.to_string()),
            ("height".into(), self.geometry.height.to_string()),
            ("width".into(), self.geometry.width.to_string()),
            ("n_windows".into(), self.n_windows.to_string()),
            ("camera_velocity".into(), self.camera_velocity.to_string()),
            ("contrast_threshold".into(), self.contrast_threshold.to_string()),
            ("texture_amplitude".into(), self.texture_amplitude.to_string()),
            ("binocular_baseline_px".into(), self.binocular_baseline_px.to_string()),
            ("stereo".into(), self.stereo.to_string()),
            ("noise_rate".into(), self.noise_rate.to_string()),
        ];
        for p in &self.planes {
            kv.push((
                "plane".into(),
                format!("{} {} {} {} {} {}", p.depth_m, p.x0, p.y0, p.x1, p.y1, p.texture_period_px),
            ));
        }
        kv
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        let g = self.geometry;
        if g.height == 0 || g.width == 0 {
            return bad("scene geometry must be non-empty".into());
        }
        if self.n_windows == 0 {
            return bad("n_windows must be >= 1".into());
        }
        for (name, v) in [
            ("camera_velocity", self.camera_velocity),
            ("binocular_baseline_px", self.binocular_baseline_px),
            ("noise_rate", self.noise_rate),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        for (name, v) in [
            ("contrast_threshold", self.contrast_threshold),
            ("texture_amplitude", self.texture_amplitude),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be > 0, got {v}"));
            }
        }
        if self.planes.is_empty() {
            return bad("scene needs at least one plane".into());
        }
        for p in &self.planes {
            if !(p.depth_m.is_finite() && p.depth_m > 0.0) {
                return bad(format!("plane {} depth must be > 0, got {}", p.region(), p.depth_m));
            }
            if !(p.texture_period_px.is_finite() && p.texture_period_px > 0.0) {
                return bad(format!("plane {} texture period must be > 0", p.region()));
            }
            if p.x0 >= p.x1 || p.y0 >= p.y1 || p.x1 > g.width || p.y1 > g.height {
                return bad(format!(
                    "plane region {} is empty or outside the {}x{} frame",
                    p.region(),
                    g.height,
                    g.width
                ));
            }
        }
        for (i, a) in self.planes.iter().enumerate() {
            for b in &self.planes[i + 1..] {
                if a.x0 < b.x1 && b.x0 < a.x1 && a.y0 < b.y1 && b.y0 < a.y1 {
                    return bad(format!("plane regions {} and {} overlap", a.region(), b.region()));
                }
            }
        }
        let covered: usize = self.planes.iter().map(|p| (p.x1 - p.x0) * (p.y1 - p.y0)).sum();
        if covered != g.pixels() {
            let (x, y) = (0..g.height)
                .flat_map(|y| (0..g.width).map(move |x| (x, y)))
                .find(|&(x, y)| !self.planes.iter().any(|p| p.contains(x, y)))
                .expect("disjoint planes cover fewer pixels than the frame");
            return bad(format!("planes do not tile the frame: pixel (x={x}, y={y}) is uncovered"));
        }
        Ok(())
    }

    pub fn duration_us(&self) -> u64 {
        self.n_windows as u64 * WINDOW_US
    }

    /// Index into `planes` for every pixel, row-major.
    pub fn plane_map(&self) -> Vec<usize> {
        let g = self.geometry;
        let mut map = vec![0; g.pixels()];
        for (i, p) in self.planes.iter().enumerate() {
            for y in p.y0..p.y1 {
                map[y * g.width + p.x0..y * g.width + p.x1].fill(i);
            }
        }
        map
    }

    /// Crossing phases within one texture period: rising (positive) at
    /// `k·C/(2A)`, falling (negative) at `1 − k·C/(2A)` for every level
    /// `k·C` strictly below the peak.
    fn crossing_phases(&self) -> Vec<(f64, Polarity)> {
        let (c, a) = (self.contrast_threshold, self.texture_amplitude);
        let mut out = Vec::new();
        let mut k = 1;
        while (k as f64) * c < a {
            let f = k as f64 * c / (2.0 * a);
            out.push((f, Polarity::Positive));
            out.push((1.0 - f, Polarity::Negative));
            k += 1;
        }
        out.sort_by(|x, y| x.0.total_cmp(&y.0));
        out
    }
}

/// Events and ground truth of one generated scene.
#[derive(Clone, Debug)]
pub struct Scene {
    pub left: Vec<Event>,
    pub right: Option<Vec<Event>>,
    /// One fully valid frame per window, stamped at the window end.
    pub frames: Vec<DepthFrame>,
}

/// Crossing times (µs) and polarities for one column of one plane, given
/// the column's phase at t = 0.
fn column_events(spec: &SceneSpec, plane: &Plane, phase0: f64, crossings: &[(f64, Polarity)]) -> Vec<(u64, Polarity)> {
    // phase advances by `rate` texture periods per second
    let rate = spec.camera_velocity / (plane.depth_m * plane.texture_period_px);
    if rate == 0.0 || crossings.is_empty() {
        return Vec::new();
    }
    let end_us = spec.duration_us();
    let phase1 = phase0 + rate * end_us as f64 * 1e-6;
    let mut out = Vec::new();
    let mut n = phase0.floor();
    while n <= phase1 {
        for &(f, p) in crossings {
            let phi = n + f;
            if phi > phase0 && phi < phase1 {
                let t = ((phi - phase0) / rate * 1e6).floor() as u64;
                if t < end_us {
                    out.push((t, p));
                }
            }
        }
        n += 1.0;
    }
    out
}

pub fn generate(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let g = spec.geometry;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let offsets: Vec<f64> = spec.planes.iter().map(|_| rng.random::<f64>()).collect();
    let crossings = spec.crossing_phases();

    let mut left = Vec::new();
    let mut right = Vec::new();
    for (plane, &off) in spec.planes.iter().zip(&offsets) {
        let disp = plane.disparity(spec.binocular_baseline_px);
        for x in plane.x0..plane.x1 {
            let phase0 = off + x as f64 / plane.texture_period_px;
            let col = column_events(spec, plane, phase0, &crossings);
            for y in plane.y0..plane.y1 {
                for &(t, p) in &col {
                    left.push(Event {
                        t,
                        x: x as u32,
                        y: y as u32,
                        p,
                    });
                    if spec.stereo && x >= disp {
                        right.push(Event {
                            t,
                            x: (x - disp) as u32,
                            y: y as u32,
                            p,
                        });
                    }
                }
            }
        }
    }

    if spec.noise_rate > 0.0 {
        let n = (spec.noise_rate * g.pixels() as f64 * spec.duration_us() as f64 * 1e-6).floor() as usize;
        let mut noise = |events: &mut Vec<Event>| {
            for _ in 0..n {
                events.push(Event {
                    t: rng.random_range(0..spec.duration_us()),
                    x: rng.random_range(0..g.width) as u32,
                    y: rng.random_range(0..g.height) as u32,
                    p: if rng.random::<bool>() {
                        Polarity::Positive
                    } else {
                        Polarity::Negative
                    },
                });
            }
        };
        noise(&mut left);
        if spec.stereo {
            noise(&mut right);
        }
    }

    let key = |e: &Event| (e.t, e.y, e.x, e.p == Polarity::Negative);
    left.sort_by_key(key);
    right.sort_by_key(key);

    let map = spec.plane_map();
    let depth = Tensor::new(
        vec![g.height, g.width],
        map.iter().map(|&i| spec.planes[i].depth_m).collect(),
    )?;
    let frames = (1..=spec.n_windows as u64)
        .map(|k| DepthFrame::fully_valid(depth.clone(), k * WINDOW_US))
        .collect();

    Ok(Scene {
        left,
        right: spec.stereo.then_some(right),
        frames,
    })
}

// ---------------------------------------------------------------------------
// dataset directory
// ---------------------------------------------------------------------------

pub const MANIFEST_NAME: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct WindowEntry {
    pub start_us: u64,
    pub len_us: u64,
    /// Ground-truth file, relative to the dataset directory.
    pub gt: PathBuf,
}

/// Index of a dataset directory: event files, windows, and the spec echo.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub dir: PathBuf,
    pub geometry: Geometry,
    pub events_left: PathBuf,
    pub events_right: Option<PathBuf>,
    pub windows: Vec<WindowEntry>,
    /// Remaining `spec.*` lines, verbatim.
    pub spec_echo: Vec<(String, String)>,
}

impl Manifest {
    pub fn path(&self, rel: &Path) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("format=mssdepth-dataset-1\n");
        out.push_str(&format!("height={}\nwidth={}\n", self.geometry.height, self.geometry.width));
        out.push_str(&format!("events_left={}\n", self.events_left.display()));
        if let Some(r) = &self.events_right {
            out.push_str(&format!("events_right={}\n", r.display()));
        }
        out.push_str(&format!("n_windows={}\n", self.windows.len()));
        for (i, w) in self.windows.iter().enumerate() {
            out.push_str(&format!("window.{i}={} {} {}\n", w.start_us, w.len_us, w.gt.display()));
        }
        for (k, v) in &self.spec_echo {
            out.push_str(&format!("spec.{k}={v}\n"));
        }
        out
    }

    pub fn parse(text: &str, dir: &Path) -> Result<Self> {
        let mut geometry = (None, None);
        let mut left = None;
        let mut right = None;
        let mut n_windows = None;
        let mut windows: Vec<(usize, WindowEntry)> = Vec::new();
        let mut echo = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let raw = raw.trim();
            if raw.is_empty() || raw.starts_with('#') {
                continue;
            }
            let Some((k, v)) = raw.split_once('=') else {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected key=value, got {raw:?}"),
                });
            };
            let (k, v) = (k.trim(), v.trim());
            match k {
                "format" if v == "mssdepth-dataset-1" => {}
                "format" => {
                    return Err(Error::Parse {
                        line,
                        msg: format!("unsupported manifest format {v:?}"),
                    })
                }
                "height" => geometry.0 = Some(parse_num::<usize>(line, k, v)?),
                "width" => geometry.1 = Some(parse_num::<usize>(line, k, v)?),
                "events_left" => left = Some(PathBuf::from(v)),
                "events_right" => right = Some(PathBuf::from(v)),
                "n_windows" => n_windows = Some(parse_num::<usize>(line, k, v)?),
                _ => {
                    if let Some(idx) = k.strip_prefix("window.") {
                        let idx: usize = parse_num(line, k, idx)?;
                        let f: Vec<&str> = v.splitn(3, ' ').collect();
                        if f.len() != 3 {
                            return Err(Error::Parse {
                                line,
                                msg: "window entry needs: start_us len_us gt_path".into(),
                            });
                        }
                        windows.push((
                            idx,
                            WindowEntry {
                                start_us: parse_num(line, "window start", f[0])?,
                                len_us: parse_num(line, "window length", f[1])?,
                                gt: PathBuf::from(f[2]),
                            },
                        ));
                    } else if let Some(s) = k.strip_prefix("spec.") {
                        echo.push((s.to_owned(), v.to_owned()));
                    } else {
                        return Err(Error::Parse {
                            line,
                            msg: format!("unknown manifest key {k:?}"),
                        });
                    }
                }
            }
        }
        let missing = |k: &str| Error::Validation(format!("manifest lacks {k}"));
        windows.sort_by_key(|(i, _)| *i);
        if windows.iter().enumerate().any(|(i, (j, _))| i != *j) {
            return Err(Error::Validation("manifest window indices are not 0..n".into()));
        }
        let n = n_windows.ok_or_else(|| missing("n_windows"))?;
        if n != windows.len() {
            return Err(Error::Validation(format!(
                "manifest declares {n} windows but lists {}",
                windows.len()
            )));
        }
        Ok(Manifest {
            dir: dir.to_path_buf(),
            geometry: Geometry::new(
                geometry.0.ok_or_else(|| missing("height"))?,
                geometry.1.ok_or_else(|| missing("width"))?,
            ),
            events_left: left.ok_or_else(|| missing("events_left"))?,
            events_right: right,
            windows: windows.into_iter().map(|(_, w)| w).collect(),
            spec_echo: echo,
        })
    }

    /// Reads `dir/manifest.txt`, or the file itself when given one.
    pub fn read(path: &Path) -> Result<Self> {
        let (file, dir) = if path.is_dir() {
            (path.join(MANIFEST_NAME), path.to_path_buf())
        } else {
            (
                path.to_path_buf(),
                path.parent().map(Path::to_path_buf).unwrap_or_default(),
            )
        };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        Self::parse(&text, &dir)
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes events, ground truth and the manifest under `out_dir`; returns
/// the manifest path.
pub fn dataset_manifest(spec: &SceneSpec, scene: &Scene, out_dir: &Path) -> Result<PathBuf> {
    let gt_dir = out_dir.join("gt");
    fs::create_dir_all(&gt_dir).map_err(|e| Error::io(&gt_dir, e))?;
    write_file(&out_dir.join("events_left.csv"), &format_events(&scene.left))?;
    if let Some(r) = &scene.right {
        write_file(&out_dir.join("events_right.csv"), &format_events(r))?;
    }
    let mut windows = Vec::with_capacity(spec.n_windows);
    for (i, frame) in scene.frames.iter().enumerate() {
        let rel = PathBuf::from(format!("gt/{i:04}.txt"));
        write_file(&out_dir.join(&rel), &frame.to_text())?;
        windows.push(WindowEntry {
            start_us: i as u64 * WINDOW_US,
            len_us: WINDOW_US,
            gt: rel,
        });
    }
    let manifest = Manifest {
        dir: out_dir.to_path_buf(),
        geometry: spec.geometry,
        events_left: PathBuf::from("events_left.csv"),
        events_right: scene.right.as_ref().map(|_| PathBuf::from("events_right.csv")),
        windows,
        spec_echo: spec.echo(),
    };
    let path = out_dir.join(MANIFEST_NAME);
    write_file(&path, &manifest.to_text())?;
    Ok(path)
}
