use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ObjectRecord, PointCloudScene, Relation, AUX_DIM};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// Axis-aligned box resting on the floor (full extents in meters).
    Cuboid { width: f64, depth: f64, height: f64 },
    Cylinder { radius: f64, height: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    pub shape: Shape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorSpec {
    pub name: String,
    pub rgb: [f64; 3],
}

/// Settings for the synthetic room generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_points: usize,
    /// Floor size (x, y) in meters.
    pub room_extent: [f64; 2],
    pub wall_height: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Share of the points sampled on the floor and walls.
    pub shell_fraction: f64,
    pub shell_rgb: [f64; 3],
    pub color_noise: f64,
    /// Clearance kept between object footprints and to the walls.
    pub min_gap: f64,
    pub max_retries: usize,
    pub categories: Vec<CategorySpec>,
    pub colors: Vec<ColorSpec>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let cat = |name: &str, shape| CategorySpec { name: name.into(), shape };
        let col = |name: &str, rgb| ColorSpec { name: name.into(), rgb };
        GeneratorConfig {
            n_points: 4096,
            room_extent: [5.0, 5.0],
            wall_height: 1.0,
            min_objects: 3,
            max_objects: 6,
            shell_fraction: 0.35,
            shell_rgb: [0.5, 0.5, 0.5],
            color_noise: 0.02,
            min_gap: 0.35,
            max_retries: 200,
            categories: vec![
                cat("chair", Shape::Cuboid { width: 0.5, depth: 0.5, height: 0.8 }),
                cat("table", Shape::Cuboid { width: 1.2, depth: 0.8, height: 0.75 }),
                cat("cabinet", Shape::Cuboid { width: 0.6, depth: 0.5, height: 1.4 }),
                cat("sofa", Shape::Cuboid { width: 1.6, depth: 0.8, height: 0.6 }),
                cat("lamp", Shape::Cylinder { radius: 0.15, height: 1.3 }),
                cat("bin", Shape::Cylinder { radius: 0.22, height: 0.5 }),
            ],
            colors: vec![
                col("red", [0.9, 0.1, 0.1]),
                col("green", [0.1, 0.75, 0.2]),
                col("blue", [0.1, 0.2, 0.9]),
                col("yellow", [0.95, 0.9, 0.1]),
                col("purple", [0.6, 0.1, 0.75]),
                col("orange", [1.0, 0.55, 0.0]),
                col("white", [0.97, 0.97, 0.97]),
                col("black", [0.05, 0.05, 0.05]),
            ],
        }
    }
}

/// Name of the category assigned to the room shell (category id 0).
pub const SHELL_CATEGORY: &str = "room";

struct Placed {
    category: usize,
    color: usize,
    center: [f64; 2],
    half: [f64; 2],
}

/// Builds a room (floor and walls, instance 0) with colored objects.
/// Output is a pure function of `(config, seed)`.
pub fn generate_scene(
    config: &GeneratorConfig,
    scene_id: &str,
    seed: u64,
) -> Result<(PointCloudScene, Vec<ObjectRecord>)> {
    if config.categories.is_empty() || config.colors.is_empty() {
        return Err(Error::Config("generator needs categories and colors".into()));
    }
    if config.min_objects > config.max_objects {
        return Err(Error::Config("min_objects exceeds max_objects".into()));
    }
    let combos = config.categories.len() * config.colors.len();
    if config.max_objects > combos {
        return Err(Error::Config(format!(
            "at most {combos} distinct (category, color) objects are possible"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_objects = rng.random_range(config.min_objects..=config.max_objects);
    let placed = place_objects(config, n_objects, &mut rng)?;

    // Point budget: shell first, the rest split by surface area.
    let mut areas = vec![shell_area(config)];
    areas.extend(placed.iter().map(|p| surface_area(&config.categories[p.category].shape)));
    let budget = allocate_points(config, &areas)?;

    let noise = Normal::new(0.0, config.color_noise.max(0.0))
        .map_err(|e| Error::Config(format!("color noise: {e}")))?;
    let mut scene = PointCloudScene {
        scene_id: scene_id.to_string(),
        positions: Vec::with_capacity(config.n_points),
        aux: Vec::with_capacity(config.n_points),
        instance_id: Vec::with_capacity(config.n_points),
        category_id: Vec::with_capacity(config.n_points),
    };
    let push = |scene: &mut PointCloudScene, rng: &mut ChaCha8Rng, pos: [f64; 3], normal: [f64; 3], rgb: [f64; 3], inst: usize, cat: usize| {
        let mut aux = [0.0; AUX_DIM];
        for c in 0..3 {
            aux[c] = (rgb[c] + noise.sample(rng)).clamp(0.0, 1.0);
        }
        aux[3..].copy_from_slice(&normal);
        scene.positions.push(pos);
        scene.aux.push(aux);
        scene.instance_id.push(inst);
        scene.category_id.push(cat);
    };

    for _ in 0..budget[0] {
        let (pos, normal) = sample_shell(config, &mut rng);
        push(&mut scene, &mut rng, pos, normal, config.shell_rgb, 0, 0);
    }
    for (k, p) in placed.iter().enumerate() {
        let shape = &config.categories[p.category].shape;
        let rgb = config.colors[p.color].rgb;
        for _ in 0..budget[k + 1] {
            let (pos, normal) = sample_object(shape, p.center, &mut rng);
            push(&mut scene, &mut rng, pos, normal, rgb, k + 1, p.category + 1);
        }
    }

    let records = placed
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let nearest = placed
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != k)
                .min_by(|(_, a), (_, b)| {
                    let da = (a.center[0] - p.center[0]).hypot(a.center[1] - p.center[1]);
                    let db = (b.center[0] - p.center[0]).hypot(b.center[1] - p.center[1]);
                    da.total_cmp(&db)
                })
                .map(|(j, _)| j);
            ObjectRecord {
                instance: k + 1,
                category: config.categories[p.category].name.clone(),
                color: config.colors[p.color].name.clone(),
                relations: nearest
                    .map(|j| Relation { relation: "near".into(), target: j + 1 })
                    .into_iter()
                    .collect(),
            }
        })
        .collect();
    Ok((scene, records))
}

fn footprint(shape: &Shape) -> [f64; 2] {
    match *shape {
        Shape::Cuboid { width, depth, .. } => [width / 2.0, depth / 2.0],
        Shape::Cylinder { radius, .. } => [radius, radius],
    }
}

fn place_objects(config: &GeneratorConfig, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Placed>> {
    let mut placed: Vec<Placed> = Vec::with_capacity(n);
    let cats: Vec<usize> = (0..config.categories.len()).collect();
    let cols: Vec<usize> = (0..config.colors.len()).collect();
    let [ex, ey] = config.room_extent;
    let gap = config.min_gap;
    for _ in 0..n {
        let mut done = false;
        for _ in 0..config.max_retries {
            let category = *cats.choose(rng).unwrap();
            let color = *cols.choose(rng).unwrap();
            if placed.iter().any(|p| p.category == category && p.color == color) {
                continue;
            }
            let half = footprint(&config.categories[category].shape);
            let (lo_x, hi_x) = (half[0] + gap, ex - half[0] - gap);
            let (lo_y, hi_y) = (half[1] + gap, ey - half[1] - gap);
            if lo_x >= hi_x || lo_y >= hi_y {
                continue;
            }
            let center = [rng.random_range(lo_x..hi_x), rng.random_range(lo_y..hi_y)];
            let clear = placed.iter().all(|p| {
                (p.center[0] - center[0]).abs() >= p.half[0] + half[0] + gap
                    || (p.center[1] - center[1]).abs() >= p.half[1] + half[1] + gap
            });
            if clear {
                placed.push(Placed { category, color, center, half });
                done = true;
                break;
            }
        }
        if !done {
            return Err(Error::Generation(format!(
                "could not place object {} of {n} after {} attempts",
                placed.len() + 1,
                config.max_retries
            )));
        }
    }
    Ok(placed)
}

fn shell_area(config: &GeneratorConfig) -> f64 {
    let [ex, ey] = config.room_extent;
    ex * ey + 2.0 * (ex + ey) * config.wall_height
}

fn surface_area(shape: &Shape) -> f64 {
    match *shape {
        Shape::Cuboid { width, depth, height } => width * depth + 2.0 * (width + depth) * height,
        Shape::Cylinder { radius, height } => {
            std::f64::consts::PI * radius * (radius + 2.0 * height)
        }
    }
}

/// Splits `n_points` by area with the largest-remainder rule, giving the
/// shell its configured share and every object at least 8 points.
fn allocate_points(config: &GeneratorConfig, areas: &[f64]) -> Result<Vec<usize>> {
    let n = config.n_points;
    let n_obj = areas.len() - 1;
    let min_obj = 8;
    let shell = if n_obj == 0 {
        n
    } else {
        ((n as f64) * config.shell_fraction).round() as usize
    };
    if shell == 0 || n < shell + min_obj * n_obj {
        return Err(Error::Generation(format!(
            "{n} points cannot cover the shell and {n_obj} objects"
        )));
    }
    let mut out = vec![shell];
    if n_obj == 0 {
        return Ok(out);
    }
    let rest = n - shell - min_obj * n_obj;
    let total: f64 = areas[1..].iter().sum();
    let exact: Vec<f64> = areas[1..].iter().map(|a| a / total * rest as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut left = rest - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..n_obj).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    out.extend(counts.into_iter().map(|c| c + min_obj));
    Ok(out)
}

fn sample_shell(config: &GeneratorConfig, rng: &mut ChaCha8Rng) -> ([f64; 3], [f64; 3]) {
    let [ex, ey] = config.room_extent;
    let h = config.wall_height;
    let faces = [ex * ey, ex * h, ex * h, ey * h, ey * h];
    let total: f64 = faces.iter().sum();
    let mut u = rng.random_range(0.0..total);
    let mut face = 0;
    while face < faces.len() - 1 && u >= faces[face] {
        u -= faces[face];
        face += 1;
    }
    let (a, b) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
    match face {
        0 => ([a * ex, b * ey, 0.0], [0.0, 0.0, 1.0]),
        1 => ([a * ex, 0.0, b * h], [0.0, 1.0, 0.0]),
        2 => ([a * ex, ey, b * h], [0.0, -1.0, 0.0]),
        3 => ([0.0, a * ey, b * h], [1.0, 0.0, 0.0]),
        _ => ([ex, a * ey, b * h], [-1.0, 0.0, 0.0]),
    }
}

fn sample_object(shape: &Shape, center: [f64; 2], rng: &mut ChaCha8Rng) -> ([f64; 3], [f64; 3]) {
    let (a, b) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
    match *shape {
        Shape::Cuboid { width, depth, height } => {
            let (x0, y0) = (center[0] - width / 2.0, center[1] - depth / 2.0);
            let faces = [width * depth, width * height, width * height, depth * height, depth * height];
            let total: f64 = faces.iter().sum();
            let mut u = rng.random_range(0.0..total);
            let mut face = 0;
            while face < faces.len() - 1 && u >= faces[face] {
                u -= faces[face];
                face += 1;
            }
            match face {
                0 => ([x0 + a * width, y0 + b * depth, height], [0.0, 0.0, 1.0]),
                1 => ([x0 + a * width, y0, b * height], [0.0, -1.0, 0.0]),
                2 => ([x0 + a * width, y0 + depth, b * height], [0.0, 1.0, 0.0]),
                3 => ([x0, y0 + a * depth, b * height], [-1.0, 0.0, 0.0]),
                _ => ([x0 + width, y0 + a * depth, b * height], [1.0, 0.0, 0.0]),
            }
        }
        Shape::Cylinder { radius, height } => {
            let side = 2.0 * std::f64::consts::PI * radius * height;
            let top = std::f64::consts::PI * radius * radius;
            if rng.random_range(0.0..side + top) < side {
                let t = a * std::f64::consts::TAU;
                let (s, c) = t.sin_cos();
                ([center[0] + radius * c, center[1] + radius * s, b * height], [c, s, 0.0])
            } else {
                let r = radius * a.sqrt();
                let t = b * std::f64::consts::TAU;
                ([center[0] + r * t.cos(), center[1] + r * t.sin(), height], [0.0, 0.0, 1.0])
            }
        }
    }
}
