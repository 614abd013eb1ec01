//! Demonstration trajectories: analytic generators, resampling, perturbed starts, CSV I/O.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameter range upper bound of the unstable spiral, used literally (not `pi`).
#[allow(clippy::approx_constant)]
pub const UNSTABLE_SPIRAL_T_END: f64 = 3.14;
/// Euler step of the stable spiral generator.
pub const STABLE_SPIRAL_STEP: f64 = 0.003;
/// Stop threshold on the stable spiral's per-step displacement rate.
pub const STABLE_SPIRAL_STOP: f64 = 1e-2;
pub const STABLE_SPIRAL_THETA0: f64 = 0.1;
pub const STABLE_SPIRAL_PSI0: f64 = 0.0;
/// Final radius of the Archimedean spiral.
pub const ARCHIMEDEAN_RADIUS: f64 = 0.1;
pub const ARCHIMEDEAN_TURN: f64 = 3.0 * PI;
pub const ARCHIMEDEAN_DURATION: f64 = 12.0;

const CSV_MAGIC: &str = "# chebds demonstration v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    /// `N x n` positions; the last row is the attractor.
    pub points: DMatrix<f64>,
    pub velocities: Option<DMatrix<f64>>,
    pub dt: Option<f64>,
    pub label: String,
}

impl Demonstration {
    pub fn new(points: DMatrix<f64>, label: impl Into<String>) -> Result<Self> {
        let demo = Self {
            points,
            velocities: None,
            dt: None,
            label: label.into(),
        };
        demo.validate()?;
        Ok(demo)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.nrows() < 3 {
            return Err(Error::InvalidParameter(format!(
                "demonstration needs at least 3 points, got {}",
                self.points.nrows()
            )));
        }
        if self.points.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("demonstration '{}'", self.label)));
        }
        if let Some(v) = &self.velocities {
            if v.shape() != self.points.shape() {
                return Err(Error::ShapeMismatch {
                    expected: self.points.shape(),
                    found: v.shape(),
                });
            }
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
            }
        }
        Ok(())
    }

    pub fn n_points(&self) -> usize {
        self.points.nrows()
    }

    pub fn n_dims(&self) -> usize {
        self.points.ncols()
    }

    pub fn start(&self) -> Vec<f64> {
        self.points.row(0).iter().copied().collect()
    }

    pub fn attractor(&self) -> Vec<f64> {
        self.points.row(self.n_points() - 1).iter().copied().collect()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        matrix_rows(&self.points)
    }

    /// Same demonstration resampled to `n_out` points; velocities are dropped.
    pub fn resampled(&self, n_out: usize) -> Result<Self> {
        let points = resample_uniform(&self.points, n_out)?;
        let dt = self.dt.map(|dt| dt * (self.n_points() - 1) as f64 / (n_out - 1) as f64);
        Ok(Self {
            points,
            velocities: None,
            dt,
            label: self.label.clone(),
        })
    }
}

pub(crate) fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// `(sin t cos ct, sin t sin ct, cos t)` at uniform `t` in `[0, 3.14]`.
pub fn unstable_spiral(c: f64, n_samples: usize) -> Result<Demonstration> {
    if n_samples < 3 {
        return Err(Error::InvalidParameter(format!(
            "need at least 3 samples, got {n_samples}"
        )));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "spiral constant must be positive, got {c}"
        )));
    }
    let step = UNSTABLE_SPIRAL_T_END / (n_samples - 1) as f64;
    let points = DMatrix::from_fn(n_samples, 3, |i, j| {
        let t = if i == n_samples - 1 {
            UNSTABLE_SPIRAL_T_END
        } else {
            i as f64 * step
        };
        match j {
            0 => t.sin() * (c * t).cos(),
            1 => t.sin() * (c * t).sin(),
            _ => t.cos(),
        }
    });
    let mut demo = Demonstration::new(points, format!("unstable-spiral c={c}"))?;
    demo.dt = Some(step);
    Ok(demo)
}

fn sphere_point(theta: f64, psi: f64) -> [f64; 3] {
    [theta.sin() * psi.cos(), theta.sin() * psi.sin(), theta.cos()]
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Euler-integrated spherical spiral converging to the south pole.
///
/// `theta' = 0.3 (pi - theta)`, `psi' = 0.3 (2 c pi - psi)` with step 0.003 from
/// `(theta, psi) = (0.1, 0)`. Generation stops at the first step whose displacement
/// per unit time falls below `1e-2` after having been above it.
pub fn stable_spiral(c: f64) -> Result<Demonstration> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "spiral constant must be positive, got {c}"
        )));
    }
    let mut theta = STABLE_SPIRAL_THETA0;
    let mut psi = STABLE_SPIRAL_PSI0;
    let mut rows = vec![sphere_point(theta, psi)];
    let mut armed = false;
    // guard: the rate decays like exp(-0.3 t), far below this many steps
    for _ in 0..1_000_000 {
        let theta_dot = 0.3 * (PI - theta);
        let psi_dot = 0.3 * (2.0 * c * PI - psi);
        theta += STABLE_SPIRAL_STEP * theta_dot;
        psi += STABLE_SPIRAL_STEP * psi_dot;
        let p = sphere_point(theta, psi);
        let rate = distance(&p, rows.last().unwrap()) / STABLE_SPIRAL_STEP;
        rows.push(p);
        if rate >= STABLE_SPIRAL_STOP {
            armed = true;
        } else if armed {
            break;
        }
    }
    let n = rows.len();
    let points = DMatrix::from_fn(n, 3, |i, j| rows[i][j]);
    let mut demo = Demonstration::new(points, format!("stable-spiral c={c}"))?;
    demo.dt = Some(STABLE_SPIRAL_STEP);
    Ok(demo)
}

/// Planar spiral with `theta = 3 pi t / T` and `r = R theta / (3 pi)` for `t` in `[0, 12]`.
pub fn archimedean_spiral(n_samples: usize) -> Result<Demonstration> {
    if n_samples < 3 {
        return Err(Error::InvalidParameter(format!(
            "need at least 3 samples, got {n_samples}"
        )));
    }
    let step = ARCHIMEDEAN_DURATION / (n_samples - 1) as f64;
    let rate = ARCHIMEDEAN_TURN / ARCHIMEDEAN_DURATION;
    let points = DMatrix::from_fn(n_samples, 2, |i, j| {
        let theta = if i == n_samples - 1 {
            ARCHIMEDEAN_TURN
        } else {
            rate * (i as f64 * step)
        };
        let r = ARCHIMEDEAN_RADIUS * theta / ARCHIMEDEAN_TURN;
        if j == 0 {
            r * theta.cos()
        } else {
            r * theta.sin()
        }
    });
    let mut demo = Demonstration::new(points, "archimedean-spiral")?;
    demo.dt = Some(step);
    Ok(demo)
}

/// Linear interpolation at `n_out` uniformly spaced sample indices; endpoints are copied.
pub fn resample_uniform(points: &DMatrix<f64>, n_out: usize) -> Result<DMatrix<f64>> {
    let n_in = points.nrows();
    if n_in < 2 || n_out < 2 {
        return Err(Error::InvalidParameter(format!(
            "resampling needs at least 2 input and output points ({n_in} -> {n_out})"
        )));
    }
    let scale = (n_in - 1) as f64 / (n_out - 1) as f64;
    let mut out = DMatrix::zeros(n_out, points.ncols());
    for k in 0..n_out {
        if k == n_out - 1 {
            out.row_mut(k).copy_from(&points.row(n_in - 1));
            continue;
        }
        let s = k as f64 * scale;
        let lo = (s.floor() as usize).min(n_in - 2);
        let w = s - lo as f64;
        for j in 0..points.ncols() {
            out[(k, j)] = if w == 0.0 {
                points[(lo, j)]
            } else {
                (1.0 - w) * points[(lo, j)] + w * points[(lo + 1, j)]
            };
        }
    }
    Ok(out)
}

/// `count` points uniform in the ball of `radius` around `center`, reproducible from `seed`.
pub fn perturb_starts(center: &[f64], radius: f64, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "radius must be positive, got {radius}"
        )));
    }
    if count == 0 {
        return Err(Error::InvalidParameter("count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = center.len();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        // rejection sampling from the enclosing cube keeps the law exactly uniform
        let u: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let r2: f64 = u.iter().map(|x| x * x).sum();
        if r2 <= 1.0 {
            out.push(center.iter().zip(&u).map(|(c, x)| c + radius * x).collect());
        }
    }
    Ok(out)
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Writes `time` (if `dt` is known), `y_1..y_n` and `v_1..v_n` (if present).
pub fn save_csv(demo: &Demonstration, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(File::create(path)?);
    write_csv(demo, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_csv<W: Write>(demo: &Demonstration, out: &mut W) -> Result<()> {
    let n = demo.n_dims();
    writeln!(out, "{CSV_MAGIC} label={}", demo.label.replace('\n', " "))?;
    let mut header = Vec::new();
    if demo.dt.is_some() {
        header.push("time".to_string());
    }
    header.extend((1..=n).map(|j| format!("y_{j}")));
    if demo.velocities.is_some() {
        header.extend((1..=n).map(|j| format!("v_{j}")));
    }
    writeln!(out, "{}", header.join(","))?;
    for i in 0..demo.n_points() {
        let mut fields = Vec::with_capacity(header.len());
        if let Some(dt) = demo.dt {
            fields.push(fmt_f64(i as f64 * dt));
        }
        fields.extend(demo.points.row(i).iter().map(|&v| fmt_f64(v)));
        if let Some(vel) = &demo.velocities {
            fields.extend(vel.row(i).iter().map(|&v| fmt_f64(v)));
        }
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Demonstration> {
    let path = path.as_ref();
    let fallback = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_csv(BufReader::new(File::open(path)?), &fallback)
}

enum Column {
    Time,
    Position(usize),
    Velocity(usize),
}

fn parse_header(fields: &[&str], line: usize) -> Result<(Vec<Column>, usize, bool, bool)> {
    let mut columns = Vec::with_capacity(fields.len());
    let (mut n_pos, mut n_vel, mut has_time) = (0, 0, false);
    for f in fields {
        let f = f.trim();
        let indexed = |prefix: &str| -> Option<usize> {
            f.strip_prefix(prefix)
                .and_then(|s| s.parse::<usize>().ok())
                .filter(|&k| k >= 1)
        };
        if f == "time" || f == "t" {
            if has_time {
                return Err(Error::Csv {
                    line,
                    message: "duplicate time column".into(),
                });
            }
            has_time = true;
            columns.push(Column::Time);
        } else if let Some(k) = indexed("y_") {
            n_pos = n_pos.max(k);
            columns.push(Column::Position(k - 1));
        } else if let Some(k) = indexed("v_") {
            n_vel = n_vel.max(k);
            columns.push(Column::Velocity(k - 1));
        } else {
            return Err(Error::Csv {
                line,
                message: format!("unknown column '{f}'"),
            });
        }
    }
    let count_pos = columns.iter().filter(|c| matches!(c, Column::Position(_))).count();
    let count_vel = columns.iter().filter(|c| matches!(c, Column::Velocity(_))).count();
    if n_pos == 0 || count_pos != n_pos {
        return Err(Error::Csv {
            line,
            message: "position columns must be y_1..y_n".into(),
        });
    }
    if n_vel > 0 && (count_vel != n_vel || n_vel != n_pos) {
        return Err(Error::Csv {
            line,
            message: "velocity columns must be v_1..v_n matching y".into(),
        });
    }
    Ok((columns, n_pos, n_vel > 0, has_time))
}

pub fn read_csv<R: BufRead>(reader: R, fallback_label: &str) -> Result<Demonstration> {
    let mut label = fallback_label.to_string();
    let mut header: Option<(Vec<Column>, usize, bool, bool)> = None;
    let mut pos: Vec<f64> = Vec::new();
    let mut vel: Vec<f64> = Vec::new();
    let mut times: Vec<f64> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if trimmed.starts_with('#') {
            if let Some(rest) = trimmed.strip_prefix(CSV_MAGIC) {
                if let Some(l) = rest.trim().strip_prefix("label=") {
                    label = l.to_string();
                }
            }
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        let Some((columns, n, _, _)) = &header else {
            header = Some(parse_header(&fields, line_no)?);
            continue;
        };
        if fields.len() != columns.len() {
            return Err(Error::Csv {
                line: line_no,
                message: format!("expected {} fields, found {}", columns.len(), fields.len()),
            });
        }
        let mut row_pos = vec![0.0; *n];
        let mut row_vel = vec![0.0; *n];
        for (col, raw) in columns.iter().zip(&fields) {
            let v: f64 = raw.trim().parse().map_err(|_| Error::Csv {
                line: line_no,
                message: format!("cannot parse '{}' as a number", raw.trim()),
            })?;
            if !v.is_finite() {
                return Err(Error::Csv {
                    line: line_no,
                    message: format!("non-finite value '{}'", raw.trim()),
                });
            }
            match col {
                Column::Time => times.push(v),
                Column::Position(k) => row_pos[*k] = v,
                Column::Velocity(k) => row_vel[*k] = v,
            }
        }
        pos.extend(row_pos);
        vel.extend(row_vel);
    }
    let Some((_, n, has_vel, has_time)) = header else {
        return Err(Error::Csv {
            line: 0,
            message: "missing header".into(),
        });
    };
    let rows = pos.len() / n;
    let points = DMatrix::from_row_slice(rows, n, &pos);
    let velocities = has_vel.then(|| DMatrix::from_row_slice(rows, n, &vel));
    let dt = if has_time && times.len() >= 2 {
        Some(times[1] - times[0])
    } else {
        None
    };
    let demo = Demonstration {
        points,
        velocities,
        dt,
        label,
    };
    demo.validate()?;
    Ok(demo)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unstable_spiral_shape_and_endpoints() {
        let d = unstable_spiral(7.0, 500).unwrap();
        assert_eq!(d.points.shape(), (500, 3));
        assert_eq!(d.start(), vec![0.0, 0.0, 1.0]);
        #[allow(clippy::approx_constant)]
        let t: f64 = 3.14;
        let end = [t.sin() * (7.0 * t).cos(), t.sin() * (7.0 * t).sin(), t.cos()];
        for (j, e) in end.iter().enumerate() {
            assert!((d.points[(499, j)] - e).abs() < 1e-15);
        }
        for row in d.points.row_iter() {
            assert!((row.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stable_spiral_stop_rule() {
        for c in [1.0, 3.0, 7.0] {
            let d = stable_spiral(c).unwrap();
            let rows = d.rows();
            let n = rows.len();
            assert!(n > 100);
            for r in &rows {
                let norm: f64 = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-12);
            }
            let last = distance(&rows[n - 1], &rows[n - 2]) / STABLE_SPIRAL_STEP;
            let prev = distance(&rows[n - 2], &rows[n - 3]) / STABLE_SPIRAL_STEP;
            assert!(last < STABLE_SPIRAL_STOP);
            assert!(prev >= STABLE_SPIRAL_STOP);
        }
    }

    #[test]
    fn stable_spiral_theta_moves_monotonically_to_pi() {
        let d = stable_spiral(3.0).unwrap();
        let thetas: Vec<f64> = d.points.column(2).iter().map(|z| z.clamp(-1.0, 1.0).acos()).collect();
        assert!(thetas.windows(2).all(|w| w[1] > w[0]));
        assert!(*thetas.last().unwrap() < PI);
        // closed form of the Euler iteration for the scalar linear ODE
        let k = thetas.len() - 1;
        let expected = PI - (PI - STABLE_SPIRAL_THETA0) * (1.0 - 0.3 * STABLE_SPIRAL_STEP).powi(k as i32);
        assert!((thetas[k] - expected).abs() < 1e-9);
    }

    #[test]
    fn archimedean_endpoints() {
        let d = archimedean_spiral(500).unwrap();
        assert_eq!(d.n_dims(), 2);
        let first = d.start();
        assert!(first[0].hypot(first[1]) < 1e-15);
        let last = d.attractor();
        assert!((last[0].hypot(last[1]) - ARCHIMEDEAN_RADIUS).abs() < 1e-12);
        // unwrap the polar angle to recover the total turn
        let mut total = 0.0;
        let angles: Vec<f64> = d.rows().iter().skip(1).map(|p| p[1].atan2(p[0])).collect();
        for w in angles.windows(2) {
            let mut delta = w[1] - w[0];
            if delta < -PI {
                delta += 2.0 * PI;
            }
            if delta > PI {
                delta -= 2.0 * PI;
            }
            total += delta;
        }
        let first_angle = ARCHIMEDEAN_TURN / ARCHIMEDEAN_DURATION * d.dt.unwrap();
        assert!((total + first_angle - ARCHIMEDEAN_TURN).abs() < 1e-9);
    }

    #[test]
    fn resample_identity_and_midpoint() {
        let m = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 1.0, 2.0, 2.0, 4.0, 3.0, 5.0]);
        assert_eq!(resample_uniform(&m, 4).unwrap(), m);
        let two = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, 3.0]);
        let r = resample_uniform(&two, 3).unwrap();
        assert_eq!(r, DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 1.0, 2.0, 2.0, 3.0]));
        assert!(resample_uniform(&two, 1).is_err());
    }

    #[test]
    fn resampled_spiral_stays_on_curve() {
        let fine = unstable_spiral(1.0, 5000).unwrap();
        let coarse = resample_uniform(&fine.points, 500).unwrap();
        let mut worst = 0.0_f64;
        for k in 0..500 {
            let t = UNSTABLE_SPIRAL_T_END * k as f64 / 499.0;
            let exact = [t.sin() * t.cos(), t.sin() * t.sin(), t.cos()];
            for j in 0..3 {
                worst = worst.max((coarse[(k, j)] - exact[j]).abs());
            }
        }
        assert!(worst < 1e-4, "max deviation {worst}");
        assert_eq!(coarse.row(0), fine.points.row(0));
        assert_eq!(coarse.row(499), fine.points.row(4999));
    }

    #[test]
    fn perturbed_starts_are_in_ball_and_seeded() {
        let c = [0.0, 0.0, 1.0];
        let a = perturb_starts(&c, 0.1, 20, 42).unwrap();
        let b = perturb_starts(&c, 0.1, 20, 42).unwrap();
        let other = perturb_starts(&c, 0.1, 20, 43).unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(a, b);
        assert_ne!(a, other);
        for p in &a {
            assert!(distance(p, &c) <= 0.1);
        }
        assert!(perturb_starts(&c, 0.0, 3, 1).is_err());
        assert!(perturb_starts(&c, 0.1, 0, 1).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let mut d = unstable_spiral(3.0, 50).unwrap();
        d.velocities = Some(d.points.map(|v| v * 0.5 - 1e-17));
        let mut buf = Vec::new();
        write_csv(&d, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), "x").unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn csv_seven_columns() {
        let mut text = String::from("y_1,y_2,y_3,y_4,y_5,y_6,y_7\n");
        for i in 0..5 {
            let row: Vec<String> = (0..7).map(|j| format!("{}", (i * 7 + j) as f64 * 0.01)).collect();
            text.push_str(&row.join(","));
            text.push('\n');
        }
        let d = read_csv(text.as_bytes(), "joints").unwrap();
        assert_eq!(d.n_dims(), 7);
        assert_eq!(d.n_points(), 5);
        assert_eq!(d.label, "joints");
        assert!(d.velocities.is_none());
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let nan = "y_1,y_2\n0,0\n1,NaN\n2,2\n";
        match read_csv(nan.as_bytes(), "x") {
            Err(Error::Csv { line: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let ragged = "y_1,y_2\n0,0\n1\n2,2\n";
        assert!(matches!(
            read_csv(ragged.as_bytes(), "x"),
            Err(Error::Csv { line: 3, .. })
        ));
        let garbage = "y_1,y_2\n0,0\n1,abc\n2,2\n";
        assert!(matches!(
            read_csv(garbage.as_bytes(), "x"),
            Err(Error::Csv { line: 3, .. })
        ));
        let bad_header = "y_1,y_3\n0,0\n";
        assert!(matches!(
            read_csv(bad_header.as_bytes(), "x"),
            Err(Error::Csv { line: 1, .. })
        ));
    }
}
