//! Token sequence construction for every task, and the inverse parser.
//!
//! Every task is laid out as text-to-image generation: `bos`, the task's system prompt as
//! byte tokens, one image block, `eos`. An image block is
//!
//! ```text
//! image-start height-marker <rows> width-marker <cols>
//!     (cell × cols, row-end) × rows      -- upper panel rows, for dual-panel tasks
//!     panel-separator                    -- dual-panel tasks only
//!     (cell × cols, row-end) × rows      -- lower panel rows
//! image-end
//! ```
//!
//! `<rows>` and `<cols>` are token-grid dimensions written as text-range ids, and `<rows>`
//! counts both panels. Raster order puts every upper-panel token before every lower-panel
//! token, which is what lets the upper panel condition the lower one.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcodec::{ImageGrid, TokenMap};
use crate::vocab::{Special, TokenClass, TokenId, Vocabulary};

/// Tokens before the first block body token: start, two markers, two dimension values.
pub const HEADER_LEN: usize = 5;

const T2I_TEMPLATE: &str = "Generate an image of {width}\u{d7}{height} according to the following text prompt: {User Text Prompt}";
const SUBJECT_TEMPLATE: &str = "Generate a dual-panel image of {width}\u{d7}{height} where the <upper half> displays: {Object Description}, while the <lower half> shows the image according to the object and following prompt: {Subject Driven Prompt}.";
const EDITING_TEMPLATE: &str = "Generate a dual-panel image of {width}\u{d7}{height} where the <upper half> displays an image: {Image Description}, while the <lower half> shows an image according to the upper part: {Editing Instruction}";
const CONTROLLABLE_TEMPLATE: &str = "Generate a dual-panel image of {width}\u{d7}{height} where the <upper half> shows a <Control Task> image, while the <lower half> displays the  image according to the upper part and following prompt: {User Text Prompt}";
const DENSE_TEMPLATE: &str = "Generate a dual-panel image of {width}\u{d7}{height} where the <upper half> displays the image according to the following description: {Image Description}, while the <lower half> shows a <Control Task> image according to the upper part.";

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlTask {
    Canny,
    Depth,
    Pose,
    Hed,
}

impl ControlTask {
    pub const ALL: [ControlTask; 4] = [
        ControlTask::Canny,
        ControlTask::Depth,
        ControlTask::Pose,
        ControlTask::Hed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ControlTask::Canny => "canny",
            ControlTask::Depth => "depth",
            ControlTask::Pose => "pose",
            ControlTask::Hed => "hed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ControlTask::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown control task {s:?}")))
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub enum TaskKind {
    TextToImage,
    SubjectDriven,
    Editing,
    Controllable(ControlTask),
    DensePrediction(ControlTask),
}

impl TaskKind {
    /// Parses `t2i`, `subject`, `edit`, `control:<name>` or `dense:<name>`.
    pub fn parse(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some(("control", c)) => Ok(TaskKind::Controllable(ControlTask::parse(c)?)),
            Some(("dense", c)) => Ok(TaskKind::DensePrediction(ControlTask::parse(c)?)),
            None => match s {
                "t2i" => Ok(TaskKind::TextToImage),
                "subject" => Ok(TaskKind::SubjectDriven),
                "edit" => Ok(TaskKind::Editing),
                _ => Err(Error::invalid(format!("unknown task {s:?}"))),
            },
            _ => Err(Error::invalid(format!("unknown task {s:?}"))),
        }
    }

    pub fn is_dual_panel(self) -> bool {
        !matches!(self, TaskKind::TextToImage)
    }

    /// Dual-panel tasks condition on a caller-supplied upper panel at inference time.
    pub fn requires_reference(self) -> bool {
        self.is_dual_panel()
    }

    fn template(self) -> &'static str {
        match self {
            TaskKind::TextToImage => T2I_TEMPLATE,
            TaskKind::SubjectDriven => SUBJECT_TEMPLATE,
            TaskKind::Editing => EDITING_TEMPLATE,
            TaskKind::Controllable(_) => CONTROLLABLE_TEMPLATE,
            TaskKind::DensePrediction(_) => DENSE_TEMPLATE,
        }
    }

    fn control(self) -> Option<ControlTask> {
        match self {
            TaskKind::Controllable(c) | TaskKind::DensePrediction(c) => Some(c),
            _ => None,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskKind::TextToImage => f.write_str("t2i"),
            TaskKind::SubjectDriven => f.write_str("subject"),
            TaskKind::Editing => f.write_str("edit"),
            TaskKind::Controllable(c) => write!(f, "control:{}", c.name()),
            TaskKind::DensePrediction(c) => write!(f, "dense:{}", c.name()),
        }
    }
}

/// User-supplied text fields. Which ones a task needs is fixed by its template.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskTexts {
    pub prompt: Option<String>,
    pub object_description: Option<String>,
    pub subject_prompt: Option<String>,
    pub image_description: Option<String>,
    pub editing_instruction: Option<String>,
}

impl TaskTexts {
    pub fn prompt(p: impl Into<String>) -> Self {
        TaskTexts {
            prompt: Some(p.into()),
            ..Default::default()
        }
    }

    /// Same fields present, all emptied. Used for the unconditional branch of guidance.
    pub fn blanked(&self) -> Self {
        let blank = |o: &Option<String>| o.as_ref().map(|_| String::new());
        TaskTexts {
            prompt: blank(&self.prompt),
            object_description: blank(&self.object_description),
            subject_prompt: blank(&self.subject_prompt),
            image_description: blank(&self.image_description),
            editing_instruction: blank(&self.editing_instruction),
        }
    }

    /// The text the user would call "the prompt" for this task.
    pub fn primary(&self) -> Option<&str> {
        self.prompt
            .as_deref()
            .or(self.subject_prompt.as_deref())
            .or(self.editing_instruction.as_deref())
            .or(self.image_description.as_deref())
    }

    fn field(&self, label: &str) -> Option<&str> {
        match label {
            "User Text Prompt" => self.prompt.as_deref(),
            "Object Description" => self.object_description.as_deref(),
            "Subject Driven Prompt" => self.subject_prompt.as_deref(),
            "Image Description" => self.image_description.as_deref(),
            "Editing Instruction" => self.editing_instruction.as_deref(),
            _ => None,
        }
    }
}

fn static_label(label: &str) -> &'static str {
    [
        "User Text Prompt",
        "Object Description",
        "Subject Driven Prompt",
        "Image Description",
        "Editing Instruction",
    ]
    .into_iter()
    .find(|l| *l == label)
    .unwrap_or("unknown")
}

/// Renders the task's system prompt with pixel dimensions and user fields substituted.
pub fn render_system_prompt(
    task: TaskKind,
    width: usize,
    height: usize,
    texts: &TaskTexts,
) -> Result<String> {
    let template = task.template();
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    while let Some(i) = rest.find(['{', '<']) {
        out.push_str(&rest[..i]);
        rest = &rest[i..];
        if let Some(after) = rest.strip_prefix("<Control Task>") {
            out.push_str(task.control().map(ControlTask::name).unwrap_or_default());
            rest = after;
        } else if rest.starts_with('{') {
            let end = rest.find('}').expect("template placeholders are closed");
            let label = &rest[1..end];
            match label {
                "width" => out.push_str(&width.to_string()),
                "height" => out.push_str(&height.to_string()),
                _ => out.push_str(texts.field(label).ok_or(Error::Template {
                    field: static_label(label),
                })?),
            }
            rest = &rest[end + 1..];
        } else {
            out.push('<');
            rest = &rest[1..];
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// Which tokens may appear at a position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Legal {
    Any,
    /// Ids in `[start, end)`.
    Span { start: u32, end: u32 },
    Only(TokenId),
}

impl Legal {
    pub fn allows(&self, t: TokenId) -> bool {
        match *self {
            Legal::Any => true,
            Legal::Span { start, end } => (start..end).contains(&t.0),
            Legal::Only(o) => o == t,
        }
    }

    pub fn support_size(&self, vocab_size: usize) -> usize {
        match *self {
            Legal::Any => vocab_size,
            Legal::Span { start, end } => (end - start) as usize,
            Legal::Only(_) => 1,
        }
    }
}

/// Shape of one image block body.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageBlockSpec {
    /// Token rows over both panels.
    pub rows: usize,
    pub cols: usize,
    /// Rows above the panel separator; `None` for single-panel blocks.
    pub upper_rows: Option<usize>,
}

/// Role of one block body token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BodySlot {
    Cell { row: usize, col: usize, upper: bool },
    RowEnd { row: usize, upper: bool },
    Separator,
    End,
}

impl ImageBlockSpec {
    pub fn single(rows: usize, cols: usize) -> Self {
        ImageBlockSpec {
            rows,
            cols,
            upper_rows: None,
        }
    }

    pub fn dual(upper_rows: usize, lower_rows: usize, cols: usize) -> Self {
        ImageBlockSpec {
            rows: upper_rows + lower_rows,
            cols,
            upper_rows: Some(upper_rows),
        }
    }

    /// Tokens after the header, image-end included.
    pub fn body_len(&self) -> usize {
        self.rows * (self.cols + 1) + usize::from(self.upper_rows.is_some()) + 1
    }

    /// Header plus body.
    pub fn block_len(&self) -> usize {
        HEADER_LEN + self.body_len()
    }

    /// Role of body token `k`, or `None` past the end of the block.
    pub fn slot(&self, k: usize) -> Option<BodySlot> {
        let row_len = self.cols + 1;
        let mut k = k;
        let upper_rows = self.upper_rows.unwrap_or(0);
        if self.upper_rows.is_some() {
            let upper_tokens = upper_rows * row_len;
            if k == upper_tokens {
                return Some(BodySlot::Separator);
            }
            if k > upper_tokens {
                k -= 1;
            }
        }
        let grid_tokens = self.rows * row_len;
        if k < grid_tokens {
            let (row, col) = (k / row_len, k % row_len);
            let upper = self.upper_rows.is_some() && row < upper_rows;
            Some(if col == self.cols {
                BodySlot::RowEnd { row, upper }
            } else {
                BodySlot::Cell { row, col, upper }
            })
        } else if k == grid_tokens {
            Some(BodySlot::End)
        } else {
            None
        }
    }

    pub fn legal(&self, k: usize, vocab: &Vocabulary) -> Legal {
        match self.slot(k) {
            Some(BodySlot::Cell { .. }) => {
                let r = vocab.image_range();
                Legal::Span {
                    start: r.start as u32,
                    end: r.end as u32,
                }
            }
            Some(BodySlot::RowEnd { .. }) => Legal::Only(vocab.special(Special::RowEnd)),
            Some(BodySlot::Separator) => Legal::Only(vocab.special(Special::PanelSeparator)),
            Some(BodySlot::End) => Legal::Only(vocab.special(Special::ImageEnd)),
            None => Legal::Any,
        }
    }
}

/// Per-position legality over a generation that continues `offset` tokens into a block body.
#[derive(Clone, Debug)]
pub struct BlockGrammar {
    pub spec: ImageBlockSpec,
    pub offset: usize,
    pub vocab: Vocabulary,
}

impl BlockGrammar {
    /// Legality of the `g`-th generated token.
    pub fn legal_at(&self, g: usize) -> Legal {
        self.spec.legal(self.offset + g, &self.vocab)
    }

    /// Number of tokens left to complete the block.
    pub fn remaining(&self) -> usize {
        self.spec.body_len() - self.offset
    }
}

/// Whether the upper panel of a dual-panel training sample carries loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpperPanelLoss {
    /// On for dense prediction (both panels are model output), off when the upper panel is
    /// a reference supplied at inference.
    #[default]
    Auto,
    Always,
    Never,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub tokens: Vec<TokenId>,
    /// 1 where the token is a training target.
    pub loss_mask: Vec<u8>,
    pub task: TaskKind,
    pub target_width: usize,
    pub target_height: usize,
    /// Index of the first block body token in `tokens`.
    pub body_start: usize,
    pub spec: ImageBlockSpec,
}

impl SequenceSample {
    /// Legality of each token position, as a prediction target.
    pub fn legality(&self, vocab: &Vocabulary) -> Vec<Legal> {
        (0..self.tokens.len())
            .map(|i| {
                if i >= self.body_start {
                    self.spec.legal(i - self.body_start, vocab)
                } else {
                    Legal::Any
                }
            })
            .collect()
    }
}

/// Everything a decoder needs to continue a block from an inference prefix.
#[derive(Clone, Debug)]
pub struct InferencePrefix {
    pub tokens: Vec<TokenId>,
    pub grammar: BlockGrammar,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParsedImage {
    Single(TokenMap),
    Dual { upper: TokenMap, lower: TokenMap },
}

impl ParsedImage {
    /// The generated image: the lower panel for dual-panel blocks.
    pub fn output(&self) -> &TokenMap {
        match self {
            ParsedImage::Single(tm) => tm,
            ParsedImage::Dual { lower, .. } => lower,
        }
    }
}

/// Sequence builder bound to one vocabulary and patch size.
#[derive(Clone, Debug)]
pub struct SeqBuilder {
    pub vocab: Vocabulary,
    pub patch_size: usize,
    /// Largest allowed token-grid side (at most 255, the largest dimension value).
    pub max_grid: usize,
    pub upper_loss: UpperPanelLoss,
}

impl SeqBuilder {
    pub fn new(vocab: Vocabulary, patch_size: usize) -> Self {
        SeqBuilder {
            vocab,
            patch_size,
            max_grid: 255,
            upper_loss: UpperPanelLoss::Auto,
        }
    }

    fn check_dims(&self, rows: usize, cols: usize) -> Result<()> {
        let max = self.max_grid.min(255);
        if rows == 0 || cols == 0 || rows > max || cols > max {
            return Err(Error::invalid(format!(
                "token grid {rows}x{cols} outside 1..={max}"
            )));
        }
        Ok(())
    }

    fn check_ids(&self, tm: &TokenMap) -> Result<()> {
        let cb = self.vocab.codebook_size();
        if tm.ids.len() != tm.rows * tm.cols {
            return Err(Error::invalid("token map shape does not match its id count"));
        }
        if let Some(pos) = tm.ids.iter().position(|&i| i as usize >= cb) {
            return Err(Error::invalid(format!(
                "token map id {} at position {pos} outside codebook of {cb}",
                tm.ids[pos]
            )));
        }
        Ok(())
    }

    fn header(&self, rows: usize, cols: usize) -> [TokenId; HEADER_LEN] {
        let v = &self.vocab;
        [
            v.special(Special::ImageStart),
            v.special(Special::HeightMarker),
            v.text_token(rows as u8),
            v.special(Special::WidthMarker),
            v.text_token(cols as u8),
        ]
    }

    fn push_rows(&self, out: &mut Vec<TokenId>, tm: &TokenMap) {
        let row_end = self.vocab.special(Special::RowEnd);
        for r in 0..tm.rows {
            out.extend(tm.row(r).iter().map(|&e| self.vocab.image_token(e as usize)));
            out.push(row_end);
        }
    }

    fn prompt_tokens(
        &self,
        task: TaskKind,
        rows: usize,
        cols: usize,
        texts: &TaskTexts,
    ) -> Result<Vec<TokenId>> {
        let p = self.patch_size;
        let text = render_system_prompt(task, cols * p, rows * p, texts)?;
        let mut out = vec![self.vocab.special(Special::Bos)];
        out.extend(self.vocab.encode_text(text.as_bytes()));
        Ok(out)
    }

    fn upper_trained(&self, task: TaskKind) -> bool {
        match self.upper_loss {
            UpperPanelLoss::Always => true,
            UpperPanelLoss::Never => false,
            UpperPanelLoss::Auto => matches!(task, TaskKind::DensePrediction(_)),
        }
    }

    fn finish(
        &self,
        task: TaskKind,
        mut tokens: Vec<TokenId>,
        body_start: usize,
        spec: ImageBlockSpec,
    ) -> SequenceSample {
        tokens.push(self.vocab.special(Special::Eos));
        let upper_trained = self.upper_trained(task);
        let mut loss_mask = vec![0u8; tokens.len()];
        for k in 0..spec.body_len() {
            let on = match spec.slot(k) {
                Some(BodySlot::Cell { upper, .. }) | Some(BodySlot::RowEnd { upper, .. }) => {
                    !upper || upper_trained
                }
                Some(BodySlot::End) => true,
                Some(BodySlot::Separator) | None => false,
            };
            loss_mask[body_start + k] = u8::from(on);
        }
        SequenceSample {
            tokens,
            loss_mask,
            task,
            target_width: spec.cols * self.patch_size,
            target_height: spec.rows * self.patch_size,
            body_start,
            spec,
        }
    }

    pub fn build_t2i_sequence(&self, prompt: &str, tm: &TokenMap) -> Result<SequenceSample> {
        self.check_dims(tm.rows, tm.cols)?;
        self.check_ids(tm)?;
        let task = TaskKind::TextToImage;
        let mut tokens = self.prompt_tokens(task, tm.rows, tm.cols, &TaskTexts::prompt(prompt))?;
        tokens.extend(self.header(tm.rows, tm.cols));
        let body_start = tokens.len();
        self.push_rows(&mut tokens, tm);
        tokens.push(self.vocab.special(Special::ImageEnd));
        Ok(self.finish(task, tokens, body_start, ImageBlockSpec::single(tm.rows, tm.cols)))
    }

    pub fn build_dual_panel_sequence(
        &self,
        task: TaskKind,
        texts: &TaskTexts,
        upper: &TokenMap,
        lower: &TokenMap,
    ) -> Result<SequenceSample> {
        if !task.is_dual_panel() {
            return Err(Error::invalid(format!("{task} is not a dual-panel task")));
        }
        if upper.cols != lower.cols {
            return Err(Error::invalid(format!(
                "panel widths differ: {} vs {} columns",
                upper.cols, lower.cols
            )));
        }
        let spec = ImageBlockSpec::dual(upper.rows, lower.rows, upper.cols);
        self.check_dims(spec.rows, spec.cols)?;
        self.check_ids(upper)?;
        self.check_ids(lower)?;
        let mut tokens = self.prompt_tokens(task, spec.rows, spec.cols, texts)?;
        tokens.extend(self.header(spec.rows, spec.cols));
        let body_start = tokens.len();
        self.push_rows(&mut tokens, upper);
        tokens.push(self.vocab.special(Special::PanelSeparator));
        self.push_rows(&mut tokens, lower);
        tokens.push(self.vocab.special(Special::ImageEnd));
        Ok(self.finish(task, tokens, body_start, spec))
    }

    /// Prefix from which the model generates the (lower-panel) image of `rows` x `cols`
    /// tokens. For dual-panel tasks `cols` must match the reference.
    pub fn build_inference_prefix(
        &self,
        task: TaskKind,
        texts: &TaskTexts,
        reference: Option<&TokenMap>,
        rows: usize,
        cols: usize,
    ) -> Result<InferencePrefix> {
        let (spec, reference) = match (task.requires_reference(), reference) {
            (false, None) => (ImageBlockSpec::single(rows, cols), None),
            (false, Some(_)) => {
                return Err(Error::invalid(format!("{task} takes no reference image")))
            }
            (true, None) => {
                return Err(Error::invalid(format!("{task} requires a reference image")))
            }
            (true, Some(r)) => {
                if r.cols != cols {
                    return Err(Error::invalid(format!(
                        "reference has {} columns, target has {cols}",
                        r.cols
                    )));
                }
                self.check_ids(r)?;
                (ImageBlockSpec::dual(r.rows, rows, cols), Some(r))
            }
        };
        self.check_dims(spec.rows, spec.cols)?;
        let mut tokens = self.prompt_tokens(task, spec.rows, spec.cols, texts)?;
        tokens.extend(self.header(spec.rows, spec.cols));
        let body_start = tokens.len();
        if let Some(r) = reference {
            self.push_rows(&mut tokens, r);
            tokens.push(self.vocab.special(Special::PanelSeparator));
        }
        Ok(InferencePrefix {
            grammar: BlockGrammar {
                spec,
                offset: tokens.len() - body_start,
                vocab: self.vocab.clone(),
            },
            tokens,
        })
    }

    /// Recovers the token grid(s) of the first image block in `tokens`.
    pub fn parse_generated(&self, tokens: &[TokenId]) -> Result<ParsedImage> {
        let v = &self.vocab;
        let err = |position: usize, reason: String| Error::Parse { position, reason };
        let start = tokens
            .iter()
            .position(|&t| t == v.special(Special::ImageStart))
            .ok_or_else(|| err(tokens.len(), "no image-start token".into()))?;
        let at = |i: usize| {
            tokens
                .get(i)
                .copied()
                .ok_or_else(|| err(i, "truncated image block".into()))
        };
        let expect = |i: usize, s: Special| -> Result<()> {
            let t = at(i)?;
            if t != v.special(s) {
                return Err(err(i, format!("expected {}, found token {t}", s.name())));
            }
            Ok(())
        };
        let dim = |i: usize| -> Result<usize> {
            let t = at(i)?;
            match v.classify(t)? {
                TokenClass::Text if t.0 > 0 => Ok(t.0 as usize),
                _ => Err(err(i, format!("expected a grid dimension, found token {t}"))),
            }
        };
        expect(start + 1, Special::HeightMarker)?;
        let rows = dim(start + 2)?;
        expect(start + 3, Special::WidthMarker)?;
        let cols = dim(start + 4)?;

        let mut i = start + HEADER_LEN;
        let mut panels: Vec<(usize, Vec<u32>)> = vec![(0, Vec::new())];
        for row in 0..rows {
            if at(i)? == v.special(Special::PanelSeparator) {
                if panels.len() > 1 || row == 0 {
                    return Err(err(i, format!("unexpected panel separator before row {row}")));
                }
                panels.push((0, Vec::new()));
                i += 1;
            }
            let (n, ids) = panels.last_mut().unwrap();
            for col in 0..cols {
                let t = at(i)?;
                match v.image_entry(t) {
                    Some(e) => ids.push(e as u32),
                    None => {
                        return Err(err(
                            i,
                            format!("row {row} has {col} cells, expected {cols} (found token {t})"),
                        ))
                    }
                }
                i += 1;
            }
            let t = at(i)?;
            if t != v.special(Special::RowEnd) {
                return Err(err(i, format!("row {row} is longer than {cols} cells (found token {t})")));
            }
            *n += 1;
            i += 1;
        }
        expect(i, Special::ImageEnd)?;
        let mut panels = panels.into_iter();
        let (ur, upper) = panels.next().unwrap();
        match panels.next() {
            None => Ok(ParsedImage::Single(TokenMap::new(ur, cols, upper)?)),
            Some((lr, lower)) if lr > 0 => Ok(ParsedImage::Dual {
                upper: TokenMap::new(ur, cols, upper)?,
                lower: TokenMap::new(lr, cols, lower)?,
            }),
            Some(_) => Err(err(i, "empty lower panel".into())),
        }
    }
}

/// Stacks two equal-width images, `upper` on top.
pub fn stack_panels(upper: &ImageGrid, lower: &ImageGrid) -> Result<ImageGrid> {
    if upper.width != lower.width {
        return Err(Error::invalid(format!(
            "panel widths differ: {} vs {}",
            upper.width, lower.width
        )));
    }
    let mut pixels = upper.pixels.clone();
    pixels.extend_from_slice(&lower.pixels);
    Ok(ImageGrid {
        width: upper.width,
        height: upper.height + lower.height,
        pixels,
    })
}

/// Splits a stacked image at row `upper_height`.
pub fn split_panels(img: &ImageGrid, upper_height: usize) -> Result<(ImageGrid, ImageGrid)> {
    if upper_height > img.height {
        return Err(Error::invalid("split row beyond image height"));
    }
    Ok((
        img.crop_rows(0, upper_height),
        img.crop_rows(upper_height, img.height - upper_height),
    ))
}
