//! Procedural training corpus: one colored shape on a plain background, with a templated
//! caption, rendered at any resolution. Records are stored as line-delimited JSON
//! manifests and turned into token sequences for every supported task.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcodec::{encode_image, Codebook, ImageGrid};
use crate::seqbuild::{ControlTask, SeqBuilder, SequenceSample, TaskKind, TaskTexts};

/// Named colors shared by the corpus and the color-coverage verifier.
pub const PALETTE: [(&str, [f32; 3]); 8] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.7, 0.2]),
    ("blue", [0.1, 0.2, 0.9]),
    ("yellow", [0.95, 0.9, 0.1]),
    ("orange", [1.0, 0.55, 0.0]),
    ("purple", [0.55, 0.15, 0.7]),
    ("white", [1.0, 1.0, 1.0]),
    ("black", [0.0, 0.0, 0.0]),
];

pub fn color_rgb(name: &str) -> Result<[f32; 3]> {
    PALETTE
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, c)| *c)
        .ok_or_else(|| Error::Data(format!("unknown color {name:?}")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Bar,
    Column,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Square, Shape::Circle, Shape::Bar, Shape::Column];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Bar => "bar",
            Shape::Column => "column",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub shape: Shape,
    pub fg: String,
    pub bg: String,
    pub large: bool,
    /// Shape center as a fraction of the image side.
    pub cx: f32,
    pub cy: f32,
}

impl Scene {
    pub fn random(rng: &mut impl Rng, jitter: f32) -> Self {
        let shape = *Shape::ALL.choose(rng).unwrap();
        let fg = rng.random_range(0..PALETTE.len());
        let mut bg = rng.random_range(0..PALETTE.len() - 1);
        if bg >= fg {
            bg += 1;
        }
        let mut off = || {
            if jitter > 0.0 {
                rng.random_range(-jitter..=jitter)
            } else {
                0.0
            }
        };
        let (cx, cy) = (0.5 + off(), 0.5 + off());
        Scene {
            shape,
            fg: PALETTE[fg].0.into(),
            bg: PALETTE[bg].0.into(),
            large: rng.random_bool(0.5),
            cx,
            cy,
        }
    }

    pub fn caption(&self) -> String {
        let size = if self.large { "large" } else { "small" };
        format!(
            "a {size} {} {} on a {} background",
            self.fg,
            self.shape.name(),
            self.bg
        )
    }

    fn covers(&self, u: f32, v: f32) -> bool {
        let s = if self.large { 0.6 } else { 0.35 };
        let (dx, dy) = ((u - self.cx).abs(), (v - self.cy).abs());
        match self.shape {
            Shape::Square => dx <= s / 2.0 && dy <= s / 2.0,
            Shape::Circle => dx * dx + dy * dy <= s * s / 4.0,
            Shape::Bar => dx <= s / 2.0 && dy <= s / 6.0,
            Shape::Column => dx <= s / 6.0 && dy <= s / 2.0,
        }
    }

    /// Binary coverage mask sampled at pixel centers.
    pub fn mask(&self, res: usize) -> Vec<bool> {
        let mut m = Vec::with_capacity(res * res);
        for y in 0..res {
            for x in 0..res {
                let (u, v) = ((x as f32 + 0.5) / res as f32, (y as f32 + 0.5) / res as f32);
                m.push(self.covers(u, v));
            }
        }
        m
    }

    pub fn render(&self, res: usize) -> Result<ImageGrid> {
        self.render_with(res, color_rgb(&self.fg)?, color_rgb(&self.bg)?)
    }

    fn render_with(&self, res: usize, fg: [f32; 3], bg: [f32; 3]) -> Result<ImageGrid> {
        let mut img = ImageGrid::filled(res, res, bg);
        for (i, on) in self.mask(res).into_iter().enumerate() {
            if on {
                img.set_pixel(i % res, i / res, fg);
            }
        }
        Ok(img)
    }

    /// White one-pixel outline of the shape on black.
    pub fn edge_map(&self, res: usize) -> ImageGrid {
        let m = self.mask(res);
        let mut img = ImageGrid::filled(res, res, [0.0; 3]);
        for y in 0..res {
            for x in 0..res {
                let here = m[y * res + x];
                let differs = [(1i32, 0i32), (0, 1), (-1, 0), (0, -1)].iter().any(|(dx, dy)| {
                    let (nx, ny) = (x as i32 + dx, y as i32 + dy);
                    nx >= 0
                        && ny >= 0
                        && (nx as usize) < res
                        && (ny as usize) < res
                        && m[ny as usize * res + nx as usize] != here
                });
                if here && differs {
                    img.set_pixel(x, y, [1.0; 3]);
                }
            }
        }
        img
    }

    /// Depth-like map: the shape as a near (bright) plane over a far background.
    pub fn depth_map(&self, res: usize) -> ImageGrid {
        let near = if self.large { 0.9 } else { 0.6 };
        self.render_with(res, [near; 3], [0.15; 3]).expect("fixed colors")
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    /// Task name as accepted by [`TaskKind::parse`].
    pub task: String,
    /// Side length in pixels of each image panel.
    pub resolution: usize,
    pub scene: Scene,
    /// Target color of editing records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edit_color: Option<String>,
}

impl ManifestRecord {
    pub fn caption(&self) -> String {
        self.scene.caption()
    }
}

/// Deterministic manifest of `n` records, tasks drawn uniformly from `tasks`.
pub fn generate_manifest(
    n: usize,
    resolution: usize,
    tasks: &[TaskKind],
    jitter: f32,
    seed: u64,
) -> Result<Vec<ManifestRecord>> {
    if tasks.is_empty() {
        return Err(Error::invalid("task mix is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let task = *tasks.choose(&mut rng).unwrap();
            let scene = Scene::random(&mut rng, jitter);
            let edit_color = matches!(task, TaskKind::Editing).then(|| {
                let options: Vec<&str> = PALETTE
                    .iter()
                    .map(|(n, _)| *n)
                    .filter(|n| *n != scene.fg && *n != scene.bg)
                    .collect();
                options.choose(&mut rng).unwrap().to_string()
            });
            ManifestRecord {
                task: task.to_string(),
                resolution,
                scene,
                edit_color,
            }
        })
        .collect())
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Data(e.to_string()))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{}:{}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}

/// Images a record contributes, for codebook fitting.
pub fn record_images(rec: &ManifestRecord) -> Result<Vec<ImageGrid>> {
    let (upper, lower) = panels(rec)?;
    Ok(upper.into_iter().chain([lower]).collect())
}

/// The (optional upper, lower-or-only) panels of a record.
fn panels(rec: &ManifestRecord) -> Result<(Option<ImageGrid>, ImageGrid)> {
    let res = rec.resolution;
    let s = &rec.scene;
    Ok(match TaskKind::parse(&rec.task)? {
        TaskKind::TextToImage => (None, s.render(res)?),
        TaskKind::SubjectDriven => {
            let mut obj = s.clone();
            obj.bg = if s.fg == "white" { "black" } else { "white" }.into();
            (obj.cx, obj.cy) = (0.5, 0.5);
            (Some(obj.render(res)?), s.render(res)?)
        }
        TaskKind::Editing => {
            let color = rec
                .edit_color
                .as_deref()
                .ok_or_else(|| Error::Data("editing record without edit_color".into()))?;
            let mut edited = s.clone();
            edited.fg = color.into();
            (Some(s.render(res)?), edited.render(res)?)
        }
        TaskKind::Controllable(c) => (Some(control_map(s, c, res)?), s.render(res)?),
        TaskKind::DensePrediction(c) => (Some(s.render(res)?), control_map(s, c, res)?),
    })
}

fn control_map(s: &Scene, c: ControlTask, res: usize) -> Result<ImageGrid> {
    match c {
        ControlTask::Canny | ControlTask::Hed => Ok(s.edge_map(res)),
        ControlTask::Depth => Ok(s.depth_map(res)),
        ControlTask::Pose => Err(Error::Data("pose maps are not part of the shapes corpus".into())),
    }
}

/// Task texts of a record.
pub fn record_texts(rec: &ManifestRecord) -> Result<TaskTexts> {
    let caption = rec.caption();
    let mut t = TaskTexts::default();
    match TaskKind::parse(&rec.task)? {
        TaskKind::TextToImage | TaskKind::Controllable(_) => t.prompt = Some(caption),
        TaskKind::SubjectDriven => {
            t.object_description = Some(format!("a {} {}", rec.scene.fg, rec.scene.shape.name()));
            t.subject_prompt = Some(caption);
        }
        TaskKind::Editing => {
            t.image_description = Some(caption);
            t.editing_instruction = Some(format!(
                "make the {} {}",
                rec.scene.shape.name(),
                rec.edit_color.as_deref().unwrap_or_default()
            ));
        }
        TaskKind::DensePrediction(_) => t.image_description = Some(caption),
    }
    Ok(t)
}

/// Builds the training sequence of a record at a stage resolution.
pub fn record_sample(
    rec: &ManifestRecord,
    stage_resolution: usize,
    builder: &SeqBuilder,
    codebook: &Codebook,
) -> Result<SequenceSample> {
    if rec.resolution != stage_resolution {
        return Err(Error::Data(format!(
            "manifest record at {}px in a {stage_resolution}px stage",
            rec.resolution
        )));
    }
    let task = TaskKind::parse(&rec.task)?;
    let texts = record_texts(rec)?;
    let (upper, lower) = panels(rec)?;
    let lower = encode_image(&lower, codebook)?;
    match upper {
        None => builder.build_t2i_sequence(texts.prompt.as_deref().unwrap_or_default(), &lower),
        Some(u) => {
            let upper = encode_image(&u, codebook)?;
            builder.build_dual_panel_sequence(task, &texts, &upper, &lower)
        }
    }
}

/// Stage data source: a manifest file, or records generated on the fly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DataSource {
    Manifest(PathBuf),
    Generated {
        records: usize,
        #[serde(default)]
        seed: u64,
    },
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgcodec::fit_codebook;
    use crate::vocab::Vocabulary;

    #[test]
    fn rendering_and_caption() {
        let s = Scene {
            shape: Shape::Square,
            fg: "red".into(),
            bg: "blue".into(),
            large: true,
            cx: 0.5,
            cy: 0.5,
        };
        assert_eq!(s.caption(), "a large red square on a blue background");
        let img = s.render(16).unwrap();
        assert_eq!(img.pixel(8, 8), color_rgb("red").unwrap());
        assert_eq!(img.pixel(0, 0), color_rgb("blue").unwrap());
        let edges = s.edge_map(16);
        assert_eq!(edges.pixel(8, 8), [0.0; 3]);
        assert!(edges.pixels.contains(&1.0));
    }

    #[test]
    fn manifests_are_deterministic_and_round_trip() {
        let tasks = [TaskKind::TextToImage, TaskKind::Editing];
        let a = generate_manifest(20, 16, &tasks, 0.1, 3).unwrap();
        assert_eq!(a, generate_manifest(20, 16, &tasks, 0.1, 3).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        write_manifest(&p, &a).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), a);
    }

    #[test]
    fn samples_for_every_task() {
        let tasks = [
            TaskKind::TextToImage,
            TaskKind::SubjectDriven,
            TaskKind::Editing,
            TaskKind::Controllable(ControlTask::Canny),
            TaskKind::DensePrediction(ControlTask::Depth),
        ];
        let recs = generate_manifest(30, 8, &tasks, 0.1, 1).unwrap();
        let imgs: Vec<ImageGrid> = recs.iter().flat_map(|r| record_images(r).unwrap()).collect();
        let cb = fit_codebook(&imgs, 16, 2, 3, 0).unwrap();
        let b = SeqBuilder::new(Vocabulary::new(16).unwrap(), 2);
        for r in &recs {
            let s = record_sample(r, 8, &b, &cb).unwrap();
            assert_eq!(s.tokens.len(), s.loss_mask.len());
            assert!(record_sample(r, 16, &b, &cb).is_err());
        }
    }
}
