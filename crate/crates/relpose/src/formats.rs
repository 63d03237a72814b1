//! Line-oriented file formats.
//!
//! Every file starts with a `relpose <kind> v1` header, carries the
//! effective run configuration as `#`-prefixed comment lines for
//! provenance, and then holds one record per line: space-separated tokens,
//! counts written before variable-length tails so a reader never guesses.
//! Floats are printed in scientific notation with 17 significant digits,
//! which is enough for `parse(serialize(x))` to reproduce every finite
//! `f64` bit for bit. Poses are 12 numbers — the rotation matrix in
//! row-major order, then the translation. A missing pose is the literal
//! token `none`.
//!
//! Parsers skip comment and blank lines, enforce exact token counts, and
//! report failures as [`Error::Parse`] with the 1-based line number.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::evaluation::EvalReport;
use crate::geometry::{Intrinsics, Pose};
use crate::toy::backbone::{ImageParams, ToyBackbone};
use crate::toy::scene::{SceneConfig, ScenePoint, SyntheticScene};
use crate::toy::train::{Checkpoint, IterationRecord, TrainingHistory};

/// Format a float with 17 significant digits; bit-exact under [`parse_float`].
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// One estimate produced for one scene pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRecord {
    pub id: u64,
    /// Soft inlier score of the winning hypothesis; 0 when there is none.
    pub confidence: f64,
    /// `None` when estimation produced no hypothesis.
    pub pose: Option<Pose>,
}

struct Reader<'a> {
    lines: std::str::Lines<'a>,
    line: usize,
}

impl<'a> Reader<'a> {
    fn new(text: &'a str) -> Self {
        Reader { lines: text.lines(), line: 0 }
    }

    fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Parse { line: self.line, msg: msg.into() })
    }

    /// Next significant line, split into tokens.
    fn next(&mut self) -> Result<Vec<&'a str>> {
        loop {
            let line = match self.lines.next() {
                Some(l) => l,
                None => return Err(Error::Parse { line: self.line, msg: "unexpected end of file".into() }),
            };
            self.line += 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            return Ok(trimmed.split_ascii_whitespace().collect());
        }
    }

    /// A line that must read `<keyword> <fields...>` with exactly `count`
    /// fields.
    fn record(&mut self, keyword: &str, count: usize) -> Result<Vec<&'a str>> {
        let tokens = self.next()?;
        if tokens.first() != Some(&keyword) {
            return self.fail(format!(
                "expected a {keyword:?} record, found {:?}",
                tokens.first().copied().unwrap_or("")
            ));
        }
        if tokens.len() != count + 1 {
            return self
                .fail(format!("{keyword:?} takes {count} fields, found {}", tokens.len() - 1));
        }
        Ok(tokens[1..].to_vec())
    }

    /// A `<keyword> <count>` line.
    fn count_record(&mut self, keyword: &str) -> Result<usize> {
        let t = self.record(keyword, 1)?;
        self.usize(t[0])
    }

    /// A `<keyword> <float>` line.
    fn float_record(&mut self, keyword: &str) -> Result<f64> {
        let t = self.record(keyword, 1)?;
        self.float(t[0])
    }

    /// A `<keyword> <12 numbers>` pose line.
    fn pose_record(&mut self, keyword: &str) -> Result<Pose> {
        let t = self.record(keyword, 12)?;
        self.pose(&t)
    }

    fn finish(&mut self) -> Result<()> {
        for line in self.lines.by_ref() {
            self.line += 1;
            let trimmed = line.trim();
            if !(trimmed.is_empty() || trimmed.starts_with('#')) {
                return Err(Error::Parse {
                    line: self.line,
                    msg: format!("unexpected trailing content: {trimmed:?}"),
                });
            }
        }
        Ok(())
    }

    fn float(&self, token: &str) -> Result<f64> {
        let v: f64 = token
            .parse()
            .map_err(|_| Error::Parse { line: self.line, msg: format!("bad float {token:?}") })?;
        if !v.is_finite() {
            return self.fail(format!("non-finite value {token:?}"));
        }
        Ok(v)
    }

    fn floats(&self, tokens: &[&str]) -> Result<Vec<f64>> {
        tokens.iter().map(|t| self.float(t)).collect()
    }

    fn usize(&self, token: &str) -> Result<usize> {
        token
            .parse()
            .map_err(|_| Error::Parse { line: self.line, msg: format!("bad count {token:?}") })
    }

    fn u64(&self, token: &str) -> Result<u64> {
        token
            .parse()
            .map_err(|_| Error::Parse { line: self.line, msg: format!("bad integer {token:?}") })
    }

    fn flag(&self, token: &str) -> Result<bool> {
        match token {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => self.fail(format!("bad flag {token:?}, expected 0 or 1")),
        }
    }

    fn pose(&self, tokens: &[&str]) -> Result<Pose> {
        let v = self.floats(tokens)?;
        if v.len() != 12 {
            return self.fail(format!("a pose takes 12 numbers, found {}", v.len()));
        }
        let r = Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]);
        Pose::new(r, Vector3::new(v[9], v[10], v[11]))
            .map_err(|e| Error::Parse { line: self.line, msg: e.to_string() })
    }
}

fn header(out: &mut String, kind: &str, config_echo: &str) {
    out.push_str("relpose ");
    out.push_str(kind);
    out.push_str(" v1\n");
    for line in config_echo.lines() {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
}

fn expect_header(r: &mut Reader, kind: &str) -> Result<()> {
    let tokens = r.next()?;
    if tokens != ["relpose", kind, "v1"] {
        return r.fail(format!("expected header 'relpose {kind} v1', found {:?}", tokens.join(" ")));
    }
    Ok(())
}

fn push_pose(out: &mut String, pose: &Pose) {
    let r = pose.rotation();
    for i in 0..3 {
        for j in 0..3 {
            out.push(' ');
            out.push_str(&fmt_float(r[(i, j)]));
        }
    }
    for v in pose.translation().iter() {
        out.push(' ');
        out.push_str(&fmt_float(*v));
    }
}

pub fn serialize_scenes(scenes: &[SyntheticScene], config_echo: &str) -> String {
    let mut out = String::new();
    header(&mut out, "scenes", config_echo);
    out.push_str(&format!("scenes {}\n", scenes.len()));
    for (index, scene) in scenes.iter().enumerate() {
        let c = &scene.config;
        out.push_str(&format!("scene {index}\n"));
        out.push_str(&format!(
            "config {} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {}\n",
            c.grid_width,
            c.grid_height,
            fmt_float(c.grid_factor),
            fmt_float(c.focal),
            c.points,
            fmt_float(c.depth_range.0),
            fmt_float(c.depth_range.1),
            fmt_float(c.rotation_angle_range.0),
            fmt_float(c.rotation_angle_range.1),
            fmt_float(c.translation_ranges[0].0),
            fmt_float(c.translation_ranges[0].1),
            fmt_float(c.translation_ranges[1].0),
            fmt_float(c.translation_ranges[1].1),
            fmt_float(c.translation_ranges[2].0),
            fmt_float(c.translation_ranges[2].1),
            fmt_float(c.noise_sigma),
            fmt_float(c.outlier_fraction),
            c.descriptor_dim,
            c.max_point_retries,
            c.max_scene_retries,
        ));
        let k = &scene.intrinsics;
        out.push_str(&format!(
            "intrinsics {} {} {} {} {} {}\n",
            fmt_float(k.fx),
            fmt_float(k.fy),
            fmt_float(k.cx),
            fmt_float(k.cy),
            fmt_float(k.width),
            fmt_float(k.height),
        ));
        out.push_str("camera_a");
        push_pose(&mut out, &scene.camera_a);
        out.push('\n');
        out.push_str("camera_b");
        push_pose(&mut out, &scene.camera_b);
        out.push('\n');
        out.push_str(&format!("points {}\n", scene.points.len()));
        for p in &scene.points {
            out.push_str("point");
            for v in p.world.iter() {
                out.push(' ');
                out.push_str(&fmt_float(*v));
            }
            out.push_str(&format!(" {} {}", p.cell_a, p.cell_b));
            for v in [p.offset_a[0], p.offset_a[1], p.offset_b[0], p.offset_b[1]] {
                out.push(' ');
                out.push_str(&fmt_float(v));
            }
            out.push(' ');
            out.push_str(&fmt_float(p.depth_a));
            out.push(' ');
            out.push_str(&fmt_float(p.depth_b));
            out.push_str(if p.outlier { " 1" } else { " 0" });
            for d in &p.descriptor {
                out.push(' ');
                out.push_str(&fmt_float(*d));
            }
            out.push('\n');
        }
    }
    out
}

pub fn parse_scenes(text: &str) -> Result<Vec<SyntheticScene>> {
    let mut r = Reader::new(text);
    expect_header(&mut r, "scenes")?;
    let count = r.count_record("scenes")?;
    let mut scenes = Vec::with_capacity(count);
    for index in 0..count {
        let idx = r.count_record("scene")?;
        if idx != index {
            return r.fail(format!("scene records out of order: expected {index}, found {idx}"));
        }
        let t = r.record("config", 20)?;
        let config = SceneConfig {
            grid_width: r.usize(t[0])?,
            grid_height: r.usize(t[1])?,
            grid_factor: r.float(t[2])?,
            focal: r.float(t[3])?,
            points: r.usize(t[4])?,
            depth_range: (r.float(t[5])?, r.float(t[6])?),
            rotation_angle_range: (r.float(t[7])?, r.float(t[8])?),
            translation_ranges: [
                (r.float(t[9])?, r.float(t[10])?),
                (r.float(t[11])?, r.float(t[12])?),
                (r.float(t[13])?, r.float(t[14])?),
            ],
            noise_sigma: r.float(t[15])?,
            outlier_fraction: r.float(t[16])?,
            descriptor_dim: r.usize(t[17])?,
            max_point_retries: r.usize(t[18])?,
            max_scene_retries: r.usize(t[19])?,
        };
        let t = r.record("intrinsics", 6)?;
        let v = r.floats(&t)?;
        let intrinsics = Intrinsics::new(v[0], v[1], v[2], v[3], v[4], v[5])
            .map_err(|e| Error::Parse { line: r.line, msg: e.to_string() })?;
        let camera_a = r.pose_record("camera_a")?;
        let camera_b = r.pose_record("camera_b")?;
        let n_points = r.count_record("points")?;
        let mut points = Vec::with_capacity(n_points);
        for _ in 0..n_points {
            let t = r.record("point", 12 + config.descriptor_dim)?;
            points.push(ScenePoint {
                world: Vector3::new(r.float(t[0])?, r.float(t[1])?, r.float(t[2])?),
                cell_a: r.usize(t[3])?,
                cell_b: r.usize(t[4])?,
                offset_a: [r.float(t[5])?, r.float(t[6])?],
                offset_b: [r.float(t[7])?, r.float(t[8])?],
                depth_a: r.float(t[9])?,
                depth_b: r.float(t[10])?,
                outlier: r.flag(t[11])?,
                descriptor: r.floats(&t[12..])?,
            });
        }
        scenes.push(SyntheticScene { config, intrinsics, camera_a, camera_b, points });
    }
    r.finish()?;
    Ok(scenes)
}

pub fn serialize_estimates(records: &[EstimateRecord], config_echo: &str) -> String {
    let mut out = String::new();
    header(&mut out, "estimates", config_echo);
    out.push_str(&format!("pairs {}\n", records.len()));
    for rec in records {
        out.push_str(&format!("pair {} {}", rec.id, fmt_float(rec.confidence)));
        match &rec.pose {
            Some(pose) => {
                out.push_str(" pose");
                push_pose(&mut out, pose);
            }
            None => out.push_str(" none"),
        }
        out.push('\n');
    }
    out
}

pub fn parse_estimates(text: &str) -> Result<Vec<EstimateRecord>> {
    let mut r = Reader::new(text);
    expect_header(&mut r, "estimates")?;
    let count = r.count_record("pairs")?;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let tokens = r.next()?;
        if tokens.first() != Some(&"pair") {
            return r.fail(format!("expected a \"pair\" record, found {tokens:?}"));
        }
        let record = match tokens.get(3) {
            Some(&"pose") if tokens.len() == 16 => EstimateRecord {
                id: r.u64(tokens[1])?,
                confidence: r.float(tokens[2])?,
                pose: Some(r.pose(&tokens[4..])?),
            },
            Some(&"none") if tokens.len() == 4 => EstimateRecord {
                id: r.u64(tokens[1])?,
                confidence: r.float(tokens[2])?,
                pose: None,
            },
            _ => return r.fail("a pair record is 'pair <id> <confidence> pose <12 numbers>' or 'pair <id> <confidence> none'"),
        };
        records.push(record);
    }
    r.finish()?;
    Ok(records)
}

pub fn serialize_history(history: &TrainingHistory, config_echo: &str) -> String {
    let mut out = String::new();
    header(&mut out, "history", config_echo);
    out.push_str(&format!("records {}\n", history.records.len()));
    for rec in &history.records {
        out.push_str(&format!(
            "record {} {} {} {} {} losses {}",
            rec.iteration,
            fmt_float(rec.selected_mean_loss),
            fmt_float(rec.gradient_norm),
            rec.skipped_hypotheses,
            rec.failed_samplings,
            rec.scene_losses.len(),
        ));
        for l in &rec.scene_losses {
            out.push(' ');
            out.push_str(&fmt_float(*l));
        }
        out.push_str(&format!(" selected {}", rec.selected.len()));
        for s in &rec.selected {
            out.push_str(&format!(" {s}"));
        }
        out.push('\n');
    }
    out
}

pub fn parse_history(text: &str) -> Result<TrainingHistory> {
    let mut r = Reader::new(text);
    expect_header(&mut r, "history")?;
    let count = r.count_record("records")?;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let tokens = r.next()?;
        if tokens.first() != Some(&"record") || tokens.get(6) != Some(&"losses") {
            return r.fail("malformed record line");
        }
        let n_losses = r.usize(tokens[7])?;
        let losses_end = 8 + n_losses;
        if tokens.get(losses_end) != Some(&"selected") {
            return r.fail("record losses count disagrees with the line");
        }
        let n_selected = r.usize(tokens[losses_end + 1])?;
        if tokens.len() != losses_end + 2 + n_selected {
            return r.fail("record selected count disagrees with the line");
        }
        records.push(IterationRecord {
            iteration: r.usize(tokens[1])?,
            selected_mean_loss: r.float(tokens[2])?,
            gradient_norm: r.float(tokens[3])?,
            skipped_hypotheses: r.usize(tokens[4])?,
            failed_samplings: r.usize(tokens[5])?,
            scene_losses: r.floats(&tokens[8..losses_end])?,
            selected: tokens[losses_end + 2..]
                .iter()
                .map(|t| r.usize(t))
                .collect::<Result<Vec<_>>>()?,
        });
    }
    r.finish()?;
    Ok(TrainingHistory { records, checkpoints: Vec::new() })
}

pub fn serialize_checkpoint(checkpoint: &Checkpoint, config_echo: &str) -> String {
    let b = &checkpoint.backbone;
    let mut out = String::new();
    header(&mut out, "checkpoint", config_echo);
    out.push_str(&format!("iteration {}\n", checkpoint.iteration));
    out.push_str(&format!(
        "grid {} {} {} {} {}\n",
        b.width(),
        b.height(),
        fmt_float(b.factor()),
        b.descriptor_dim(),
        b.image_count(),
    ));
    out.push_str(&format!("dustbin {}\n", fmt_float(b.dustbin)));
    for (idx, img) in b.images.iter().enumerate() {
        out.push_str(&format!("image {idx}\n"));
        for cell in 0..b.cells() {
            out.push_str(&format!(
                "cell {cell} {} {} {} {}",
                fmt_float(img.offset_logits[cell][0]),
                fmt_float(img.offset_logits[cell][1]),
                fmt_float(img.log_depths[cell]),
                fmt_float(img.confidence[cell]),
            ));
            let dim = b.descriptor_dim();
            for d in &img.descriptors[cell * dim..(cell + 1) * dim] {
                out.push(' ');
                out.push_str(&fmt_float(*d));
            }
            out.push('\n');
        }
    }
    out
}

pub fn parse_checkpoint(text: &str) -> Result<Checkpoint> {
    let mut r = Reader::new(text);
    expect_header(&mut r, "checkpoint")?;
    let iteration = r.count_record("iteration")?;
    let t = r.record("grid", 5)?;
    let (width, height) = (r.usize(t[0])?, r.usize(t[1])?);
    let factor = r.float(t[2])?;
    let dim = r.usize(t[3])?;
    let image_count = r.usize(t[4])?;
    let dustbin = r.float_record("dustbin")?;
    let cells = width * height;
    let mut images = Vec::with_capacity(image_count);
    for index in 0..image_count {
        let idx = r.count_record("image")?;
        if idx != index {
            return r.fail(format!("image records out of order: expected {index}, found {idx}"));
        }
        let mut img = ImageParams {
            offset_logits: Vec::with_capacity(cells),
            log_depths: Vec::with_capacity(cells),
            confidence: Vec::with_capacity(cells),
            descriptors: Vec::with_capacity(cells * dim),
        };
        for cell in 0..cells {
            let t = r.record("cell", 5 + dim)?;
            if r.usize(t[0])? != cell {
                return r.fail(format!("cell records out of order at {cell}"));
            }
            img.offset_logits.push([r.float(t[1])?, r.float(t[2])?]);
            img.log_depths.push(r.float(t[3])?);
            img.confidence.push(r.float(t[4])?);
            img.descriptors.extend(r.floats(&t[5..])?);
        }
        images.push(img);
    }
    r.finish()?;
    let backbone = ToyBackbone::from_parts(width, height, factor, dim, images, dustbin)
        .map_err(|e| Error::Parse { line: r.line, msg: e.to_string() })?;
    Ok(Checkpoint { iteration, backbone })
}

fn push_optional(out: &mut String, key: &str, value: Option<f64>) {
    match value {
        Some(v) => out.push_str(&format!("{key} {}\n", fmt_float(v))),
        None => out.push_str(&format!("{key} none\n")),
    }
}

pub fn serialize_report(report: &EvalReport, config_echo: &str) -> String {
    let mut out = String::new();
    header(&mut out, "report", config_echo);
    out.push_str(&format!("pairs {}\n", report.pairs));
    out.push_str(&format!("estimates {}\n", report.estimates));
    out.push_str(&format!("estimate_rate {}\n", fmt_float(report.estimate_rate)));
    out.push_str(&format!("precision {}\n", fmt_float(report.precision)));
    out.push_str(&format!("auc {}\n", fmt_float(report.auc)));
    push_optional(&mut out, "median_vcre", report.median_vcre);
    push_optional(&mut out, "median_rotation_deg", report.median_rotation_deg);
    push_optional(&mut out, "median_translation", report.median_translation);
    out
}

pub fn parse_report(text: &str) -> Result<EvalReport> {
    let mut r = Reader::new(text);
    expect_header(&mut r, "report")?;
    let pairs = r.count_record("pairs")?;
    let estimates = r.count_record("estimates")?;
    let estimate_rate = r.float_record("estimate_rate")?;
    let precision = r.float_record("precision")?;
    let auc = r.float_record("auc")?;
    let mut optional = |key: &str| -> Result<Option<f64>> {
        let t = r.record(key, 1)?;
        if t[0] == "none" {
            Ok(None)
        } else {
            r.float(t[0]).map(Some)
        }
    };
    let median_vcre = optional("median_vcre")?;
    let median_rotation_deg = optional("median_rotation_deg")?;
    let median_translation = optional("median_translation")?;
    r.finish()?;
    Ok(EvalReport {
        pairs,
        estimates,
        estimate_rate,
        precision,
        auc,
        median_vcre,
        median_rotation_deg,
        median_translation,
    })
}

pub fn serialize_curve(points: &[(f64, f64)], config_echo: &str) -> String {
    let mut out = String::new();
    header(&mut out, "curve", config_echo);
    out.push_str(&format!("points {}\n", points.len()));
    for (ratio, precision) in points {
        out.push_str(&format!("point {} {}\n", fmt_float(*ratio), fmt_float(*precision)));
    }
    out
}

pub fn parse_curve(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut r = Reader::new(text);
    expect_header(&mut r, "curve")?;
    let count = r.count_record("points")?;
    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let t = r.record("point", 2)?;
        points.push((r.float(t[0])?, r.float(t[1])?));
    }
    r.finish()?;
    Ok(points)
}
