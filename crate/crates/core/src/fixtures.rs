//! Synthetic corpora with known turn timelines.
//!
//! "Speakers" are harmonic complexes with distinct fundamentals over a low
//! noise floor. Each recording is a sequence of units `[silence][A][A+B][B]`
//! laid out on the 10 ms frame grid, so the planted overlap ratio is exact
//! in frames. Turn edges sit halfway between frame centres. Everything is a
//! pure function of the seed.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::annotations::{format_rttm, ManifestRecord, SegmentManifest, SpeakerTurn};
use crate::audio::{write_wav_i16, SampleSpan, SAMPLE_RATE};
use crate::error::{OsdError, Result};

const FRAME: usize = 160;
const FRAMES_PER_SECOND: usize = 100;
const VOICE_F0: [f64; 4] = [140.0, 210.0, 300.0, 420.0];
const RAMP: usize = 80;

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub seed: u64,
    /// Fraction of frames with two active speakers.
    pub overlap_ratio: f64,
    pub recording_seconds: usize,
    pub train_recordings: usize,
    pub dev_recordings: usize,
    pub test_recordings_per_tag: usize,
    pub test_tags: Vec<String>,
    pub noise_clips: usize,
    pub rir_clips: usize,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            seed: 7,
            overlap_ratio: 0.15,
            recording_seconds: 20,
            train_recordings: 8,
            dev_recordings: 2,
            test_recordings_per_tag: 2,
            test_tags: vec!["fixture_a".into(), "fixture_b".into()],
            noise_clips: 3,
            rir_clips: 3,
        }
    }
}

impl FixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.overlap_ratio) {
            return Err(OsdError::Config(format!(
                "overlap ratio must be in [0, 0.5), got {}",
                self.overlap_ratio
            )));
        }
        if self.recording_seconds < 4 {
            return Err(OsdError::Config("recordings must be at least 4 s long".into()));
        }
        if self.train_recordings == 0 || self.dev_recordings == 0 || self.test_recordings_per_tag == 0 {
            return Err(OsdError::Config("every split needs at least one recording".into()));
        }
        if self.test_tags.is_empty() {
            return Err(OsdError::Config("at least one test tag is required".into()));
        }
        Ok(())
    }
}

/// Frame-level layout of one unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Unit {
    start: usize,
    silence: usize,
    lead: usize,
    overlap: usize,
    trail: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureRecording {
    pub recording_id: String,
    pub dataset_tag: String,
    pub samples: Vec<f32>,
    pub turns: Vec<SpeakerTurn>,
    pub overlap_frames: usize,
    pub total_frames: usize,
}

fn seconds(frames: usize) -> f64 {
    frames as f64 / FRAMES_PER_SECOND as f64
}

/// Time half a frame before frame `i`'s centre, so the turn `[edge(s), edge(e))`
/// covers exactly the frame centres `s..e` with a 5 ms margin on each side.
fn edge(i: usize) -> f64 {
    (2 * i - 1) as f64 / (2 * FRAMES_PER_SECOND) as f64
}

fn layout(total_frames: usize, overlap_ratio: f64, rng: &mut ChaCha8Rng) -> Vec<Unit> {
    let units = (total_frames / 400).max(1);
    let unit_len = total_frames / units;
    let overlap_total = (overlap_ratio * total_frames as f64).round() as usize;
    let mut out = Vec::with_capacity(units);
    for k in 0..units {
        let len = if k + 1 == units { total_frames - unit_len * k } else { unit_len };
        let overlap = overlap_total / units + usize::from(k < overlap_total % units);
        let silence = rng.gen_range(len / 10..=len / 5);
        let rest = len - overlap - silence;
        let lead = rng.gen_range(rest / 3..=rest - rest / 3);
        out.push(Unit {
            start: k * unit_len,
            silence,
            lead,
            overlap,
            trail: rest - lead,
        });
    }
    out
}

struct Voice {
    f0: f64,
    phases: Vec<f64>,
    gain: f64,
}

impl Voice {
    fn new(f0: f64, rng: &mut ChaCha8Rng) -> Self {
        let harmonics = (4000.0 / f0) as usize;
        Voice {
            f0,
            phases: (0..harmonics).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect(),
            gain: rng.gen_range(0.08..0.12),
        }
    }

    fn add_to(&self, out: &mut [f64], from: usize, to: usize) {
        let sr = SAMPLE_RATE as f64;
        for n in from..to {
            let t = n as f64 / sr;
            let edge = (n - from).min(to - 1 - n);
            let ramp = if edge < RAMP {
                0.5 - 0.5 * (std::f64::consts::PI * edge as f64 / RAMP as f64).cos()
            } else {
                1.0
            };
            let vib = 1.0 + 0.01 * (std::f64::consts::TAU * 5.0 * t).sin();
            let mut v = 0.0;
            for (h, ph) in self.phases.iter().enumerate() {
                let k = (h + 1) as f64;
                v += (std::f64::consts::TAU * k * self.f0 * vib * t + ph).sin() / k;
            }
            out[n] += self.gain * ramp * v;
        }
    }
}

/// Build one recording's audio and turns.
pub fn synth_recording(
    recording_id: &str,
    dataset_tag: &str,
    spec: &FixtureSpec,
    noise_floor: f64,
    rng: &mut ChaCha8Rng,
) -> FixtureRecording {
    let total_frames = spec.recording_seconds * FRAMES_PER_SECOND;
    let n = total_frames * FRAME;
    let mut audio: Vec<f64> = (0..n).map(|_| rng.gen_range(-noise_floor..noise_floor)).collect();
    let a = rng.gen_range(0..VOICE_F0.len());
    let b = (a + rng.gen_range(1..VOICE_F0.len())) % VOICE_F0.len();
    let names = [format!("spk{a}"), format!("spk{b}")];
    let mut turns = Vec::new();
    let mut overlap_frames = 0;
    for (k, u) in layout(total_frames, spec.overlap_ratio, rng).into_iter().enumerate() {
        // alternate who speaks first
        let (first, second) = if k % 2 == 0 { (0, 1) } else { (1, 0) };
        let f0 = [VOICE_F0[a], VOICE_F0[b]];
        let s1 = u.start + u.silence;
        let e1 = s1 + u.lead + u.overlap;
        let s2 = s1 + u.lead;
        let e2 = s2 + u.overlap + u.trail;
        for (who, s, e) in [(first, s1, e1), (second, s2, e2)] {
            Voice::new(f0[who], rng).add_to(&mut audio, s * FRAME - FRAME / 2, e * FRAME - FRAME / 2);
            turns.push(
                SpeakerTurn::new(recording_id, edge(s), seconds(e - s), names[who].clone())
                    .expect("positive turn"),
            );
        }
        overlap_frames += u.overlap;
    }
    let peak = audio.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.9 { 0.9 / peak } else { 1.0 };
    FixtureRecording {
        recording_id: recording_id.to_string(),
        dataset_tag: dataset_tag.to_string(),
        samples: audio.iter().map(|&v| (v * scale) as f32).collect(),
        turns,
        overlap_frames,
        total_frames,
    }
}

fn noise_clip(rng: &mut ChaCha8Rng, seconds: usize) -> Vec<f32> {
    // first-order low-passed noise, mildly coloured
    let mut prev = 0.0f64;
    (0..seconds * SAMPLE_RATE as usize)
        .map(|_| {
            prev = 0.7 * prev + 0.3 * rng.gen_range(-1.0..1.0);
            (prev * 0.5) as f32
        })
        .collect()
}

fn rir_clip(rng: &mut ChaCha8Rng) -> Vec<f32> {
    let len = rng.gen_range(1600..4800);
    let delay = rng.gen_range(0..40);
    let t60 = rng.gen_range(0.15..0.4) * SAMPLE_RATE as f64;
    (0..len)
        .map(|n| {
            if n < delay {
                0.0
            } else if n == delay {
                1.0
            } else {
                let decay = (-6.9 * (n - delay) as f64 / t60).exp();
                (0.3 * decay * rng.gen_range(-1.0..1.0)) as f32
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSummary {
    pub root: PathBuf,
    /// Split name, overlap frames, total frames.
    pub splits: Vec<(String, usize, usize)>,
}

impl FixtureSummary {
    pub fn overlap_ratio(&self, split: &str) -> Option<f64> {
        self.splits
            .iter()
            .find(|(s, _, _)| s == split)
            .map(|(_, o, t)| *o as f64 / *t as f64)
    }
}

fn write_split(
    root: &Path,
    name: &str,
    recordings: &[FixtureRecording],
) -> Result<()> {
    let mut records = Vec::new();
    for r in recordings {
        let wav = PathBuf::from("wav").join(format!("{}.wav", r.recording_id));
        write_wav_i16(&root.join(&wav), &r.samples, SAMPLE_RATE)?;
        let rttm = root.join("rttm").join(format!("{}.rttm", r.recording_id));
        std::fs::write(&rttm, format_rttm(&r.turns))
            .map_err(|e| OsdError::io(format!("writing {}", rttm.display()), e))?;
        records.push(ManifestRecord {
            segment_id: r.recording_id.clone(),
            audio_path: wav,
            span: SampleSpan {
                start: 0,
                end: r.samples.len(),
            },
            recording_id: r.recording_id.clone(),
            dataset_tag: r.dataset_tag.clone(),
        });
    }
    SegmentManifest::new(records, root)?.save(&root.join(format!("{name}.tsv")))
}

fn write_corpus(root: &Path, name: &str, clips: &[Vec<f32>]) -> Result<()> {
    let mut records = Vec::new();
    for (i, c) in clips.iter().enumerate() {
        let id = format!("{name}{i:02}");
        let wav = PathBuf::from(name).join(format!("{id}.wav"));
        write_wav_i16(&root.join(&wav), c, SAMPLE_RATE)?;
        records.push(ManifestRecord {
            segment_id: id.clone(),
            audio_path: wav,
            span: SampleSpan { start: 0, end: c.len() },
            recording_id: id,
            dataset_tag: name.to_string(),
        });
    }
    SegmentManifest::new(records, root)?.save(&root.join(format!("{name}.tsv")))
}

/// Generate the full corpus under `root`: `wav/`, `rttm/`, `train.tsv`,
/// `dev.tsv`, `test.tsv`, `noise/` + `noise.tsv`, `rir/` + `rir.tsv` and
/// `fixture_meta.txt` with the planted statistics.
pub fn make_fixtures(root: &Path, spec: &FixtureSpec) -> Result<FixtureSummary> {
    spec.validate()?;
    for d in ["wav", "rttm", "noise", "rir"] {
        let p = root.join(d);
        std::fs::create_dir_all(&p).map_err(|e| OsdError::io(format!("creating {}", p.display()), e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut splits = Vec::new();
    let mut meta = String::new();
    let _ = writeln!(meta, "seed={}", spec.seed);
    let _ = writeln!(meta, "requested_overlap_ratio={}", spec.overlap_ratio);
    let _ = writeln!(meta, "recording_seconds={}", spec.recording_seconds);

    let mut plan: Vec<(&str, Vec<(String, String, f64)>)> = Vec::new();
    let mk = |prefix: &str, tag: &str, n: usize, floor: f64| -> Vec<(String, String, f64)> {
        (0..n).map(|i| (format!("{prefix}{i:03}"), tag.to_string(), floor)).collect()
    };
    plan.push(("train", mk("train", "fixture_train", spec.train_recordings, 0.003)));
    plan.push(("dev", mk("dev", "fixture_dev", spec.dev_recordings, 0.003)));
    let mut test = Vec::new();
    for (k, tag) in spec.test_tags.iter().enumerate() {
        // later tags get a slightly louder noise floor
        let floor = 0.003 * (1.0 + k as f64);
        test.extend(mk(&format!("{tag}_"), tag, spec.test_recordings_per_tag, floor));
    }
    plan.push(("test", test));

    for (split, recs) in plan {
        let recordings: Vec<FixtureRecording> = recs
            .iter()
            .map(|(id, tag, floor)| synth_recording(id, tag, spec, *floor, &mut rng))
            .collect();
        write_split(root, split, &recordings)?;
        let ov: usize = recordings.iter().map(|r| r.overlap_frames).sum();
        let total: usize = recordings.iter().map(|r| r.total_frames).sum();
        let _ = writeln!(meta, "{split}.overlap_frames={ov}");
        let _ = writeln!(meta, "{split}.total_frames={total}");
        let _ = writeln!(meta, "{split}.overlap_ratio={}", ov as f64 / total as f64);
        splits.push((split.to_string(), ov, total));
    }

    let noise: Vec<Vec<f32>> = (0..spec.noise_clips).map(|_| noise_clip(&mut rng, 2)).collect();
    write_corpus(root, "noise", &noise)?;
    let rirs: Vec<Vec<f32>> = (0..spec.rir_clips).map(|_| rir_clip(&mut rng)).collect();
    write_corpus(root, "rir", &rirs)?;

    let meta_path = root.join("fixture_meta.txt");
    std::fs::write(&meta_path, meta).map_err(|e| OsdError::io(format!("writing {}", meta_path.display()), e))?;
    Ok(FixtureSummary {
        root: root.to_path_buf(),
        splits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::{rasterize_labels, FrameClass};
    use crate::audio::{segment_range, SampleSpan as Span};

    #[test]
    fn layout_plants_exact_overlap() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let units = layout(2000, 0.15, &mut rng);
        let ov: usize = units.iter().map(|u| u.overlap).sum();
        let total: usize = units.iter().map(|u| u.silence + u.lead + u.overlap + u.trail).sum();
        assert_eq!((ov, total), (300, 2000));
    }

    #[test]
    fn rasterized_turns_match_plan() {
        let spec = FixtureSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = synth_recording("r", "t", &spec, 0.003, &mut rng);
        let segs = segment_range("r", Span { start: 0, end: r.samples.len() }, 4.0).unwrap();
        let mut ov = 0;
        for s in &segs {
            let l = rasterize_labels(&r.turns, s, 0.01).unwrap();
            ov += l.valid().iter().filter(|&&c| c == FrameClass::Overlap).count();
        }
        assert_eq!(ov, r.overlap_frames);
        assert_eq!(ov, 300);
        assert!(r.samples.iter().all(|v| v.abs() <= 0.9));
    }

    #[test]
    fn same_seed_same_recording() {
        let spec = FixtureSpec::default();
        let a = synth_recording("r", "t", &spec, 0.003, &mut ChaCha8Rng::seed_from_u64(9));
        let b = synth_recording("r", "t", &spec, 0.003, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn bad_specs_rejected() {
        let s = FixtureSpec {
            overlap_ratio: 0.7,
            ..Default::default()
        };
        assert!(s.validate().is_err());
    }
}
