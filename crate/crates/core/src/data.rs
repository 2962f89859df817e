//! Synthetic domain-shift corpora and the `DATF1` text format.
//!
//! Speech frames of class `c` scatter around a per-class anchor; target-domain
//! speech is additionally rotated in its first two dimensions and then shifted.
//! Silence sits near the origin in both domains. Class and silence counts are
//! allocated deterministically, so the same spec always yields the same
//! composition.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{DatModel, Domain, Frame};
use crate::numeric::Pcg32;

/// Which held-out draw of a corpus to produce. Anchors are shared by all splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|sp| sp.name() == s)
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 101,
            Split::Dev => 102,
            Split::Test => 103,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub dim: usize,
    pub classes: usize,
    pub utterances_per_domain: usize,
    pub frames_per_utterance: usize,
    /// Speech frames come in same-class runs of this length.
    pub segment_frames: usize,
    /// Target-domain mean offset, one entry per dimension.
    pub shift: Vec<f64>,
    /// Target-domain rotation in the plane of dimensions 0 and 1, radians.
    pub rotation: f64,
    pub silence_fraction: f64,
    pub noise_sigma: f64,
    /// Anchor coordinates are drawn with standard deviation `anchor_scale·noise_sigma`.
    pub anchor_scale: f64,
    pub seed: u64,
    pub split: Split,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        let dim = 8;
        let noise_sigma = 1.0;
        CorpusSpec {
            dim,
            classes: 4,
            utterances_per_domain: 100,
            frames_per_utterance: 25,
            segment_frames: 5,
            shift: default_shift(dim, 3.0 * noise_sigma),
            rotation: 30f64.to_radians(),
            silence_fraction: 0.2,
            noise_sigma,
            anchor_scale: 1.5,
            seed: 7,
            split: Split::Train,
        }
    }
}

/// Shift of the given norm spread evenly over all dimensions.
pub fn default_shift(dim: usize, norm: f64) -> Vec<f64> {
    vec![norm / (dim as f64).sqrt(); dim]
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dim < 2 {
            return fail(format!("corpus.dim must be >= 2, got {}", self.dim));
        }
        if self.classes < 2 {
            return fail(format!("corpus.classes must be >= 2, got {}", self.classes));
        }
        if self.frames_per_utterance == 0 {
            return fail("corpus.frames_per_utterance must be >= 1".into());
        }
        if self.segment_frames == 0 {
            return fail("corpus.segment_frames must be >= 1".into());
        }
        if self.shift.len() != self.dim {
            return fail(format!("corpus.shift has {} entries, expected dim={}", self.shift.len(), self.dim));
        }
        if !(0.0..1.0).contains(&self.silence_fraction) {
            return fail(format!("corpus.silence_fraction must be in [0,1), got {}", self.silence_fraction));
        }
        if !(self.noise_sigma > 0.0) || !self.noise_sigma.is_finite() {
            return fail(format!("corpus.noise_sigma must be > 0, got {}", self.noise_sigma));
        }
        if !(self.anchor_scale > 0.0) || !self.anchor_scale.is_finite() {
            return fail(format!("corpus.anchor_scale must be > 0, got {}", self.anchor_scale));
        }
        if !self.rotation.is_finite() || self.shift.iter().any(|v| !v.is_finite()) {
            return fail("corpus.rotation and corpus.shift must be finite".into());
        }
        Ok(())
    }

    pub fn with_split(&self, split: Split) -> CorpusSpec {
        CorpusSpec { split, ..self.clone() }
    }

    /// Per-class anchor means. Depends only on `seed`, `dim`, `classes` and scale.
    pub fn anchors(&self) -> Vec<Vec<f64>> {
        let mut rng = Pcg32::new(self.seed, 0x616e63686f72);
        let spread = self.anchor_scale * self.noise_sigma;
        (0..self.classes)
            .map(|_| (0..self.dim).map(|_| spread * rng.gauss()).collect())
            .collect()
    }

    /// Applies the target-domain rotation then shift.
    pub fn accent(&self, x: &mut [f64]) {
        let (s, c) = self.rotation.sin_cos();
        let (a, b) = (x[0], x[1]);
        x[0] = c * a - s * b;
        x[1] = s * a + c * b;
        for (v, d) in x.iter_mut().zip(&self.shift) {
            *v += d;
        }
    }
}

/// Frames plus, optionally, the true label of every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub dim: usize,
    pub classes: usize,
    pub frames: Vec<Frame>,
    /// True class for every speech frame, aligned with `frames`.
    pub truth: Option<Vec<Option<usize>>>,
}

/// Frame counts per (domain, vad, labeled) cell.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CellCounts(pub [[[usize; 2]; 2]; 2]);

impl CellCounts {
    pub fn get(&self, domain: Domain, vad: bool, labeled: bool) -> usize {
        self.0[domain.index()][vad as usize][labeled as usize]
    }
}

impl Corpus {
    pub fn empty(dim: usize, classes: usize) -> Corpus {
        Corpus { dim, classes, frames: Vec::new(), truth: None }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn counts(&self) -> CellCounts {
        let mut c = CellCounts::default();
        for f in &self.frames {
            c.0[f.domain.index()][f.vad as usize][f.is_labeled() as usize] += 1;
        }
        c
    }

    /// Keeps only frames from `domain` (truth follows).
    pub fn domain(&self, domain: Domain) -> Corpus {
        self.filter(|f| f.domain == domain)
    }

    pub fn filter(&self, keep: impl Fn(&Frame) -> bool) -> Corpus {
        let idx: Vec<usize> = (0..self.frames.len()).filter(|&i| keep(&self.frames[i])).collect();
        Corpus {
            dim: self.dim,
            classes: self.classes,
            frames: idx.iter().map(|&i| self.frames[i].clone()).collect(),
            truth: self.truth.as_ref().map(|t| idx.iter().map(|&i| t[i]).collect()),
        }
    }

    /// Concatenates two corpora of the same shape. Truth survives only if both carry it.
    pub fn concat(&self, other: &Corpus) -> Result<Corpus> {
        if (self.dim, self.classes) != (other.dim, other.classes) {
            return Err(Error::Format(format!(
                "cannot merge dim={} classes={} with dim={} classes={}",
                self.dim, self.classes, other.dim, other.classes
            )));
        }
        let mut frames = self.frames.clone();
        frames.extend(other.frames.iter().cloned());
        let truth = match (&self.truth, &other.truth) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => None,
        };
        Ok(Corpus { dim: self.dim, classes: self.classes, frames, truth })
    }

    /// Only source speech frames carry labels.
    pub fn no_trans(&self) -> Corpus {
        let mut out = self.clone();
        for f in &mut out.frames {
            if f.domain == Domain::Target {
                f.label = None;
            }
        }
        out
    }

    /// Every speech frame carries its true label.
    pub fn human_trans(&self) -> Result<Corpus> {
        let truth = self.require_truth()?;
        let mut out = self.clone();
        for (f, t) in out.frames.iter_mut().zip(truth) {
            if f.vad {
                f.label = *t;
            }
        }
        Ok(out)
    }

    pub fn require_truth(&self) -> Result<&[Option<usize>]> {
        self.truth
            .as_deref()
            .ok_or_else(|| Error::Validation("corpus has no truth labels".into()))
    }
}

/// Generates a corpus from `spec`.
pub fn gen_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let anchors = spec.anchors();
    let mut rng = Pcg32::new(spec.seed, spec.split.stream());
    let mut frames = Vec::new();
    let mut truth = Vec::new();
    let utts = spec.utterances_per_domain;
    let per_utt = spec.frames_per_utterance;
    let silence_total = (spec.silence_fraction * (utts * per_utt) as f64).round() as usize;

    for domain in [Domain::Source, Domain::Target] {
        let mut classes = ClassCycle::new(spec.classes);
        for u in 0..utts {
            let utt = (domain.index() * utts + u) as u32;
            let silence = silence_total * (u + 1) / utts - silence_total * u / utts;
            let head = silence / 2;
            let speech = per_utt - silence;
            let mut current = 0;
            for t in 0..per_utt {
                let is_speech = t >= head && t < head + speech;
                let mut x = vec![0.0; spec.dim];
                let label = if is_speech {
                    if (t - head) % spec.segment_frames == 0 {
                        current = classes.next(&mut rng);
                    }
                    for (v, a) in x.iter_mut().zip(&anchors[current]) {
                        *v = a + spec.noise_sigma * rng.gauss();
                    }
                    if domain == Domain::Target {
                        spec.accent(&mut x);
                    }
                    Some(current)
                } else {
                    for v in x.iter_mut() {
                        *v = 0.25 * spec.noise_sigma * rng.gauss();
                    }
                    None
                };
                frames.push(Frame {
                    utt,
                    domain,
                    vad: is_speech,
                    label: if domain == Domain::Source { label } else { None },
                    features: x,
                });
                truth.push(label);
            }
        }
    }
    Ok(Corpus { dim: spec.dim, classes: spec.classes, frames, truth: Some(truth) })
}

/// Hands out classes in shuffled rounds so every class appears once per round.
struct ClassCycle {
    order: Vec<usize>,
    pos: usize,
}

impl ClassCycle {
    fn new(classes: usize) -> Self {
        ClassCycle { order: (0..classes).collect(), pos: classes }
    }

    fn next(&mut self, rng: &mut Pcg32) -> usize {
        if self.pos == self.order.len() {
            rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Labels every unlabeled target speech frame with the model's argmax prediction.
///
/// Fails if any target frame already carries a label.
pub fn pseudo_label(corpus: &Corpus, model: &DatModel) -> Result<Corpus> {
    if corpus.dim != model.arch().input_dim {
        return Err(Error::Shape {
            op: "pseudo_label",
            left: (corpus.len(), corpus.dim),
            right: (model.input_width(), model.arch().input_dim),
        });
    }
    if let Some(i) = corpus.frames.iter().position(|f| f.domain == Domain::Target && f.is_labeled()) {
        return Err(Error::Validation(format!("target frame {i} is already labeled")));
    }
    let predictions = predict_frames(model, &corpus.frames)?;
    let mut out = corpus.clone();
    for (f, p) in out.frames.iter_mut().zip(predictions) {
        if f.domain == Domain::Target && f.vad {
            f.label = Some(p);
        }
    }
    Ok(out)
}

/// Task predictions for every frame, splicing each utterance at stride 1.
pub fn predict_frames(model: &DatModel, frames: &[Frame]) -> Result<Vec<usize>> {
    let inputs = splice_every_frame(model, frames)?;
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(1024) {
        out.extend(model.predict(chunk)?);
    }
    Ok(out)
}

/// Model inputs for every frame (no subsampling), aligned with `frames`.
pub fn splice_every_frame(model: &DatModel, frames: &[Frame]) -> Result<Vec<Frame>> {
    let spec = crate::layers::SpliceSpec::new(model.arch().context.clone(), 1)?;
    crate::model::prepare_frames(&spec, model.arch().input_dim, frames)
}

const MAGIC: &str = "#DATF1";

fn header(dim: usize, classes: usize) -> String {
    format!("{MAGIC} dim={dim} classes={classes}\n")
}

fn render(corpus: &Corpus, labels: impl Iterator<Item = Option<usize>>) -> String {
    let mut s = header(corpus.dim, corpus.classes);
    for (f, label) in corpus.frames.iter().zip(labels) {
        let label = label.map_or(-1, |l| l as i64);
        let _ = write!(s, "{} {} {} {}", f.utt, f.domain.index(), f.vad as u8, label);
        for v in &f.features {
            let _ = write!(s, " {v:?}");
        }
        s.push('\n');
    }
    s
}

/// Writes the frames file with emitted labels.
pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = render(corpus, corpus.frames.iter().map(|f| f.label));
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the sidecar holding the true label of every frame.
pub fn write_truth(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let truth = corpus.require_truth()?;
    let text = render(corpus, truth.iter().copied());
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Sidecar path convention: `<corpus>.truth`.
pub fn truth_path(path: impl AsRef<Path>) -> std::path::PathBuf {
    let mut s = path.as_ref().as_os_str().to_owned();
    s.push(".truth");
    s.into()
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::Format(format!("{} is not UTF-8 text", path.display())))?;
    parse_corpus(&text)
}

/// Reads a corpus and attaches the truth sidecar.
pub fn read_corpus_with_truth(path: impl AsRef<Path>, truth: impl AsRef<Path>) -> Result<Corpus> {
    let mut corpus = read_corpus(path)?;
    let sidecar = read_corpus(truth)?;
    attach_truth(&mut corpus, &sidecar)?;
    Ok(corpus)
}

pub fn attach_truth(corpus: &mut Corpus, sidecar: &Corpus) -> Result<()> {
    if (sidecar.dim, sidecar.classes, sidecar.len()) != (corpus.dim, corpus.classes, corpus.len()) {
        return Err(Error::Format(format!(
            "truth sidecar shape dim={} classes={} frames={} does not match corpus dim={} classes={} frames={}",
            sidecar.dim,
            sidecar.classes,
            sidecar.len(),
            corpus.dim,
            corpus.classes,
            corpus.len()
        )));
    }
    for (i, (a, b)) in corpus.frames.iter().zip(&sidecar.frames).enumerate() {
        if (a.utt, a.domain, a.vad) != (b.utt, b.domain, b.vad) {
            return Err(Error::Format(format!("truth sidecar disagrees with corpus at frame {i}")));
        }
    }
    corpus.truth = Some(sidecar.frames.iter().map(|f| f.label).collect());
    Ok(())
}

pub fn parse_corpus(text: &str) -> Result<Corpus> {
    let mut lines = text.lines().enumerate();
    let (_, head) = lines
        .next()
        .ok_or_else(|| Error::Format("missing #DATF1 header".into()))?;
    let (dim, classes) = parse_header(head)?;
    let mut frames = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        frames.push(parse_frame(line, lineno, dim, classes)?);
    }
    Ok(Corpus { dim, classes, frames, truth: None })
}

fn parse_header(line: &str) -> Result<(usize, usize)> {
    let mut parts = line.split(' ');
    if parts.next() != Some(MAGIC) {
        return Err(Error::Format(format!("bad header {line:?}, expected {MAGIC}")));
    }
    let (mut dim, mut classes) = (None, None);
    for p in parts {
        match p.split_once('=') {
            Some(("dim", v)) => dim = v.parse().ok(),
            Some(("classes", v)) => classes = v.parse().ok(),
            _ => return Err(Error::Format(format!("bad header field {p:?}"))),
        }
    }
    match (dim, classes) {
        (Some(d), Some(c)) => Ok((d, c)),
        _ => Err(Error::Format(format!("header needs dim= and classes=: {line:?}"))),
    }
}

fn parse_frame(line: &str, lineno: usize, dim: usize, classes: usize) -> Result<Frame> {
    let err = |msg: String| Error::Parse { line: lineno, msg };
    let fields: Vec<&str> = line.split(' ').collect();
    if fields.len() != 4 + dim {
        return Err(err(format!("expected {} fields (dim={dim}), found {}", 4 + dim, fields.len())));
    }
    let utt: u32 = fields[0].parse().map_err(|_| err(format!("bad utterance id {:?}", fields[0])))?;
    let domain = match fields[1] {
        "0" => Domain::Source,
        "1" => Domain::Target,
        d => return Err(err(format!("bad domain {d:?}"))),
    };
    let vad = match fields[2] {
        "0" => false,
        "1" => true,
        v => return Err(err(format!("bad vad {v:?}"))),
    };
    let raw: i64 = fields[3].parse().map_err(|_| err(format!("bad label {:?}", fields[3])))?;
    let label = match raw {
        -1 => None,
        l if l >= 0 && (l as usize) < classes => Some(l as usize),
        l => return Err(err(format!("label {l} outside [0,{classes})"))),
    };
    let features = fields[4..]
        .iter()
        .map(|s| s.parse::<f64>().ok().filter(|v| v.is_finite()))
        .collect::<Option<Vec<f64>>>()
        .ok_or_else(|| err("bad feature value".into()))?;
    Ok(Frame { utt, domain, vad, label, features })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CorpusSpec {
        CorpusSpec { utterances_per_domain: 10, ..CorpusSpec::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        assert_eq!(gen_corpus(&spec).unwrap(), gen_corpus(&spec).unwrap());
        let other = gen_corpus(&spec.with_split(Split::Dev)).unwrap();
        assert_ne!(other.frames, gen_corpus(&spec).unwrap().frames);
    }

    #[test]
    fn silence_allocation_is_exact() {
        let spec = CorpusSpec {
            utterances_per_domain: 40,
            frames_per_utterance: 25,
            silence_fraction: 0.2,
            ..CorpusSpec::default()
        };
        let c = gen_corpus(&spec).unwrap();
        for d in [Domain::Source, Domain::Target] {
            let silence = c.frames.iter().filter(|f| f.domain == d && !f.vad).count();
            assert_eq!(silence, 200);
        }
    }

    #[test]
    fn class_balance_per_domain() {
        let c = gen_corpus(&small_spec()).unwrap();
        let truth = c.truth.as_ref().unwrap();
        for d in [Domain::Source, Domain::Target] {
            let mut counts = vec![0; c.classes];
            for (f, t) in c.frames.iter().zip(truth) {
                if f.domain == d {
                    if let Some(l) = t {
                        counts[*l] += 1;
                    }
                }
            }
            assert!(counts.iter().all(|&n| n == counts[0]), "{counts:?}");
        }
    }

    #[test]
    fn labeling_invariants() {
        let c = gen_corpus(&small_spec()).unwrap();
        let truth = c.truth.as_ref().unwrap();
        for (f, t) in c.frames.iter().zip(truth) {
            assert_eq!(f.vad, t.is_some());
            match f.domain {
                Domain::Source => assert_eq!(f.label, *t),
                Domain::Target => assert_eq!(f.label, None),
            }
        }
        // domain constant per utterance
        for w in c.frames.windows(2) {
            if w[0].utt == w[1].utt {
                assert_eq!(w[0].domain, w[1].domain);
            }
        }
    }

    #[test]
    fn views() {
        let c = gen_corpus(&small_spec()).unwrap();
        let no = c.no_trans();
        let human = c.human_trans().unwrap();
        for (n, h) in no.frames.iter().zip(&human.frames) {
            assert_eq!(n.is_labeled(), n.domain == Domain::Source && n.vad);
            assert_eq!(h.is_labeled(), h.vad);
        }
        assert!(matches!(
            Corpus { truth: None, ..c }.human_trans(),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn null_shift_domains_share_distribution() {
        let spec = CorpusSpec {
            shift: vec![0.0; 8],
            rotation: 0.0,
            utterances_per_domain: 200,
            ..CorpusSpec::default()
        };
        let c = gen_corpus(&spec).unwrap();
        let truth = c.truth.as_ref().unwrap();
        for class in 0..c.classes {
            let mean = |d: Domain| {
                let rows: Vec<&Frame> = c
                    .frames
                    .iter()
                    .zip(truth)
                    .filter(|(f, t)| f.domain == d && **t == Some(class))
                    .map(|(f, _)| f)
                    .collect();
                let n = rows.len() as f64;
                let m: Vec<f64> = (0..c.dim).map(|k| rows.iter().map(|f| f.features[k]).sum::<f64>() / n).collect();
                (m, rows.len())
            };
            let (ms, n) = mean(Domain::Source);
            let (mt, _) = mean(Domain::Target);
            let bound = 4.0 * spec.noise_sigma / (n as f64).sqrt();
            for k in 0..c.dim {
                assert!((ms[k] - mt[k]).abs() <= bound, "class {class} dim {k}");
            }
        }
    }

    #[test]
    fn accent_rotates_then_shifts() {
        let spec = CorpusSpec {
            rotation: std::f64::consts::FRAC_PI_2,
            shift: vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5],
            ..CorpusSpec::default()
        };
        let mut x = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        spec.accent(&mut x);
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 1.0).abs() < 1e-15);
        assert_eq!(x[7], 0.5);
    }

    #[test]
    fn invalid_specs() {
        for spec in [
            CorpusSpec { silence_fraction: 1.0, ..CorpusSpec::default() },
            CorpusSpec { noise_sigma: 0.0, ..CorpusSpec::default() },
            CorpusSpec { classes: 1, ..CorpusSpec::default() },
            CorpusSpec { shift: vec![0.0; 3], ..CorpusSpec::default() },
        ] {
            assert!(matches!(gen_corpus(&spec), Err(Error::Config(_))));
        }
    }

    #[test]
    fn text_round_trip() {
        let c = gen_corpus(&small_spec()).unwrap();
        let back = parse_corpus(&render(&c, c.frames.iter().map(|f| f.label))).unwrap();
        assert_eq!(back.frames, c.frames);
        let truth = parse_corpus(&render(&c, c.truth.clone().unwrap().into_iter())).unwrap();
        let mut merged = back;
        attach_truth(&mut merged, &truth).unwrap();
        assert_eq!(merged, c);
    }

    #[test]
    fn empty_corpus_is_header_only() {
        let c = Corpus::empty(3, 2);
        let text = render(&c, std::iter::empty());
        assert_eq!(text, "#DATF1 dim=3 classes=2\n");
        assert_eq!(parse_corpus(&text).unwrap(), c);
    }

    #[test]
    fn short_row_names_its_line() {
        let text = "#DATF1 dim=3 classes=2\n0 0 1 0 1.0 2.0 3.0\n0 0 1 1 1.0 2.0\n";
        match parse_corpus(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_header_and_labels() {
        assert!(matches!(parse_corpus("#DATF2 dim=3 classes=2\n"), Err(Error::Format(_))));
        assert!(matches!(parse_corpus(""), Err(Error::Format(_))));
        let text = "#DATF1 dim=1 classes=2\n0 0 1 2 1.0\n";
        assert!(matches!(parse_corpus(text), Err(Error::Parse { line: 2, .. })));
    }
}
