//! Synthetic long video streams with scheduled distribution drift.
//!
//! Frames are produced by one continuous simulation, so the last frame of
//! clip `i` is immediately followed by the first frame of clip `i + 1`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Pixel geometry of a clip. Channels are folded into the frame axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClipShape {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for ClipShape {
    fn default() -> Self {
        ClipShape { frames: 4, height: 32, width: 32 }
    }
}

impl ClipShape {
    pub fn dims(&self) -> [usize; 3] {
        [self.frames, self.height, self.width]
    }

    pub fn numel(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width
    }
}

/// A block of consecutive grayscale frames, `[frames, height, width]`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pixels: Tensor,
}

impl VideoClip {
    pub fn new(pixels: Tensor) -> Result<Self> {
        if pixels.rank() != 3 {
            return Err(Error::shape("video_clip", format!("expected [S, H, W], got {:?}", pixels.shape())));
        }
        Ok(VideoClip { pixels })
    }

    pub fn shape(&self) -> ClipShape {
        let s = self.pixels.shape();
        ClipShape { frames: s[0], height: s[1], width: s[2] }
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn into_pixels(self) -> Tensor {
        self.pixels
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        let len = self.shape().frame_len();
        &self.pixels.data()[i * len..][..len]
    }

    /// Network layout `[1, S, H, W]`.
    pub fn batched(&self) -> Tensor {
        let s = self.pixels.shape();
        self.pixels.clone().reshaped(&[1, s[0], s[1], s[2]]).expect("same numel")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorKind {
    BouncingSprites,
    DriftingTexture,
}

impl std::str::FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bouncing-sprites" => Ok(GeneratorKind::BouncingSprites),
            "drifting-texture" => Ok(GeneratorKind::DriftingTexture),
            other => Err(Error::InvalidSpec(format!("unknown generator {other}"))),
        }
    }
}

impl std::fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GeneratorKind::BouncingSprites => "bouncing-sprites",
            GeneratorKind::DriftingTexture => "drifting-texture",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpriteShape {
    Circle,
    Square,
}

/// Parameter change applied from a given clip onwards.
///
/// Sprite streams use the velocity, shape and background fields; texture
/// streams use frequency, direction, velocity scale and background.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DriftDelta {
    pub velocity_scale: f64,
    pub velocity_rotation: f64,
    pub shape: Option<SpriteShape>,
    pub background_shift: f64,
    pub frequency_scale: f64,
    pub direction_rotation: f64,
}

impl Default for DriftDelta {
    fn default() -> Self {
        DriftDelta {
            velocity_scale: 1.0,
            velocity_rotation: 0.0,
            shape: None,
            background_shift: 0.0,
            frequency_scale: 1.0,
            direction_rotation: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DriftEvent {
    pub at_clip: usize,
    pub delta: DriftDelta,
}

/// Initial dynamics, sampled per sprite from these ranges.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpriteRanges {
    pub count: usize,
    pub speed: (f64, f64),
    pub radius: (f64, f64),
    pub intensity: (f64, f64),
    pub background: (f64, f64),
    /// Probability that a sprite is a square.
    pub square_prob: f64,
}

impl Default for SpriteRanges {
    fn default() -> Self {
        SpriteRanges {
            count: 2,
            speed: (0.75, 1.75),
            radius: (3.0, 5.0),
            intensity: (0.75, 0.95),
            background: (0.15, 0.3),
            square_prob: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamSpec {
    pub kind: GeneratorKind,
    pub length: usize,
    pub clip: ClipShape,
    pub sprites: SpriteRanges,
    pub drift: Vec<DriftEvent>,
    pub seed: u64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        StreamSpec {
            kind: GeneratorKind::BouncingSprites,
            length: 300,
            clip: ClipShape::default(),
            sprites: SpriteRanges::default(),
            drift: vec![DriftEvent {
                at_clip: 150,
                delta: DriftDelta {
                    velocity_scale: 1.6,
                    velocity_rotation: PI / 2.0,
                    shape: Some(SpriteShape::Square),
                    background_shift: 0.1,
                    frequency_scale: 1.5,
                    direction_rotation: PI / 3.0,
                },
            }],
            seed: 0,
        }
    }
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::InvalidSpec("length must be positive".into()));
        }
        let c = self.clip;
        if c.frames == 0 || c.height == 0 || c.width == 0 {
            return Err(Error::InvalidSpec(format!("degenerate clip shape {c:?}")));
        }
        let r = &self.sprites;
        for (name, (lo, hi)) in [("speed", r.speed), ("radius", r.radius), ("intensity", r.intensity), ("background", r.background)] {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi || lo < 0.0 {
                return Err(Error::InvalidSpec(format!("bad {name} range ({lo}, {hi})")));
            }
        }
        if !(0.0..=1.0).contains(&r.square_prob) {
            return Err(Error::InvalidSpec("square_prob outside [0, 1]".into()));
        }
        let mut prev = None;
        for e in &self.drift {
            if e.at_clip >= self.length || prev.is_some_and(|p| e.at_clip <= p) {
                return Err(Error::InvalidSpec(format!("drift index {} not strictly increasing within length", e.at_clip)));
            }
            prev = Some(e.at_clip);
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Sprite {
    pos: (f64, f64),
    vel: (f64, f64),
    radius: f64,
    intensity: f64,
    shape: SpriteShape,
}

#[derive(Clone, Debug)]
struct Texture {
    frequency: f64,
    direction: f64,
    speed: f64,
    phase: f64,
    contrast: f64,
}

enum Scene {
    Sprites(Vec<Sprite>),
    Texture(Texture),
}

/// Stateful frame simulator behind [`generate_stream`].
pub struct StreamGenerator {
    spec: StreamSpec,
    scene: Scene,
    background: f64,
    next_clip: usize,
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

impl StreamGenerator {
    pub fn new(spec: StreamSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let r = spec.sprites;
        let (h, w) = (spec.clip.height as f64, spec.clip.width as f64);
        let background = sample_range(&mut rng, r.background);
        let scene = match spec.kind {
            GeneratorKind::BouncingSprites => Scene::Sprites(
                (0..r.count)
                    .map(|_| {
                        let radius = sample_range(&mut rng, r.radius);
                        let speed = sample_range(&mut rng, r.speed);
                        let angle = rng.random_range(0.0..2.0 * PI);
                        let x = rng.random_range(radius.min(w / 2.0)..(w - radius).max(w / 2.0 + 1e-9));
                        let y = rng.random_range(radius.min(h / 2.0)..(h - radius).max(h / 2.0 + 1e-9));
                        let shape = if rng.random_bool(r.square_prob) { SpriteShape::Square } else { SpriteShape::Circle };
                        Sprite {
                            pos: (x, y),
                            vel: (speed * angle.cos(), speed * angle.sin()),
                            radius,
                            intensity: sample_range(&mut rng, r.intensity),
                            shape,
                        }
                    })
                    .collect(),
            ),
            GeneratorKind::DriftingTexture => Scene::Texture(Texture {
                frequency: rng.random_range(1.0..3.0),
                direction: rng.random_range(0.0..2.0 * PI),
                speed: sample_range(&mut rng, r.speed) * 0.25,
                phase: rng.random_range(0.0..2.0 * PI),
                contrast: sample_range(&mut rng, r.intensity) * 0.4,
            }),
        };
        Ok(StreamGenerator { spec, scene, background, next_clip: 0 })
    }

    fn apply_drift(&mut self, d: &DriftDelta) {
        self.background = (self.background + d.background_shift).clamp(0.0, 1.0);
        match &mut self.scene {
            Scene::Sprites(sprites) => {
                let (c, s) = (d.velocity_rotation.cos(), d.velocity_rotation.sin());
                for sp in sprites {
                    let (vx, vy) = sp.vel;
                    sp.vel = (d.velocity_scale * (c * vx - s * vy), d.velocity_scale * (s * vx + c * vy));
                    if let Some(shape) = d.shape {
                        sp.shape = shape;
                    }
                }
            }
            Scene::Texture(t) => {
                t.frequency *= d.frequency_scale;
                t.direction += d.direction_rotation;
                t.speed *= d.velocity_scale;
            }
        }
    }

    fn render(&self, out: &mut [f64]) {
        let ClipShape { height, width, .. } = self.spec.clip;
        match &self.scene {
            Scene::Sprites(sprites) => {
                out.iter_mut().for_each(|p| *p = self.background);
                for sp in sprites {
                    let reach = sp.radius + 1.0;
                    let y0 = (sp.pos.1 - reach).floor().max(0.0) as usize;
                    let y1 = ((sp.pos.1 + reach).ceil() as usize).min(height);
                    let x0 = (sp.pos.0 - reach).floor().max(0.0) as usize;
                    let x1 = ((sp.pos.0 + reach).ceil() as usize).min(width);
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let dx = x as f64 + 0.5 - sp.pos.0;
                            let dy = y as f64 + 0.5 - sp.pos.1;
                            let dist = match sp.shape {
                                SpriteShape::Circle => (dx * dx + dy * dy).sqrt(),
                                SpriteShape::Square => dx.abs().max(dy.abs()),
                            };
                            let cover = (sp.radius + 0.5 - dist).clamp(0.0, 1.0);
                            let p = &mut out[y * width + x];
                            *p = *p * (1.0 - cover) + sp.intensity * cover;
                        }
                    }
                }
            }
            Scene::Texture(t) => {
                let (c, s) = (t.direction.cos(), t.direction.sin());
                for y in 0..height {
                    for x in 0..width {
                        let u = (x as f64 * c + y as f64 * s) / width as f64;
                        let v = 0.5 + t.contrast * (2.0 * PI * t.frequency * u + t.phase).sin();
                        out[y * width + x] = (v + self.background - 0.2).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }

    fn advance(&mut self) {
        let ClipShape { height, width, .. } = self.spec.clip;
        match &mut self.scene {
            Scene::Sprites(sprites) => {
                for sp in sprites {
                    let (w, h) = (width as f64, height as f64);
                    sp.pos.0 += sp.vel.0;
                    sp.pos.1 += sp.vel.1;
                    reflect(&mut sp.pos.0, &mut sp.vel.0, sp.radius, w);
                    reflect(&mut sp.pos.1, &mut sp.vel.1, sp.radius, h);
                }
            }
            Scene::Texture(t) => {
                t.phase = (t.phase + 2.0 * PI * t.speed * t.frequency / width as f64).rem_euclid(2.0 * PI);
            }
        }
    }

    /// Drift applies from the first frame of the scheduled clip.
    pub fn next_clip(&mut self) -> Option<VideoClip> {
        if self.next_clip >= self.spec.length {
            return None;
        }
        let events: Vec<DriftDelta> =
            self.spec.drift.iter().filter(|e| e.at_clip == self.next_clip).map(|e| e.delta).collect();
        for d in &events {
            self.apply_drift(d);
        }
        let shape = self.spec.clip;
        let mut data = vec![0.0; shape.numel()];
        for f in 0..shape.frames {
            self.render(&mut data[f * shape.frame_len()..][..shape.frame_len()]);
            self.advance();
        }
        self.next_clip += 1;
        Some(VideoClip { pixels: Tensor::new(shape.dims().to_vec(), data).expect("sized") })
    }
}

impl Iterator for StreamGenerator {
    type Item = VideoClip;

    fn next(&mut self) -> Option<VideoClip> {
        self.next_clip()
    }
}

/// Keep `pos` within `[radius, extent - radius]` by mirroring at the walls.
fn reflect(pos: &mut f64, vel: &mut f64, radius: f64, extent: f64) {
    let (lo, hi) = (radius.min(extent / 2.0), (extent - radius).max(extent / 2.0));
    if *pos < lo {
        *pos = 2.0 * lo - *pos;
        *vel = -*vel;
    } else if *pos > hi {
        *pos = 2.0 * hi - *pos;
        *vel = -*vel;
    }
}

/// All clips of a stream. Pure function of the spec.
pub fn generate_stream(spec: &StreamSpec) -> Result<Vec<VideoClip>> {
    Ok(StreamGenerator::new(spec.clone())?.collect())
}

/// Upper bound on the mean absolute change between two consecutive frames
/// of a drift-free sprite stream: twice the speed times the area fraction,
/// summed over sprites.
pub fn sprite_motion_bound(spec: &StreamSpec) -> f64 {
    let r = spec.sprites;
    let area = (spec.clip.height * spec.clip.width) as f64;
    let radius = r.radius.1 + 0.5;
    let sprite_area = match r.square_prob {
        p if p > 0.0 => (2.0 * radius).powi(2),
        _ => PI * radius * radius,
    };
    r.count as f64 * 2.0 * r.speed.1 * sprite_area / area
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::boundary_consistency;

    fn spec(seed: u64) -> StreamSpec {
        StreamSpec { length: 40, drift: vec![], seed, ..StreamSpec::default() }
    }

    #[test]
    fn same_seed_same_stream() {
        let a = generate_stream(&spec(3)).unwrap();
        let b = generate_stream(&spec(3)).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.pixels().bit_eq(y.pixels())));
        let c = generate_stream(&spec(4)).unwrap();
        assert_ne!(a[0], c[0]);
    }

    #[test]
    fn static_sprites_never_change() {
        let mut s = spec(1);
        s.sprites.speed = (0.0, 0.0);
        let clips = generate_stream(&s).unwrap();
        let first = clips[0].frame(0).to_vec();
        for clip in &clips {
            for f in 0..clip.shape().frames {
                assert_eq!(clip.frame(f), first.as_slice());
            }
        }
    }

    #[test]
    fn values_in_unit_range() {
        for kind in [GeneratorKind::BouncingSprites, GeneratorKind::DriftingTexture] {
            let s = StreamSpec { kind, length: 20, drift: vec![], ..StreamSpec::default() };
            for clip in generate_stream(&s).unwrap() {
                assert!(clip.pixels().data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn consecutive_clips_are_continuous() {
        let s = StreamSpec { length: 101, drift: vec![], seed: 11, ..StreamSpec::default() };
        let bound = sprite_motion_bound(&s);
        let clips = generate_stream(&s).unwrap();
        for pair in clips.windows(2) {
            let b = boundary_consistency(&pair[0], &pair[1]).unwrap();
            assert!(b <= bound, "boundary {b} exceeds {bound}");
        }
    }

    #[test]
    fn drift_changes_dynamics_at_scheduled_clip() {
        let base = StreamSpec { length: 12, drift: vec![], seed: 5, ..StreamSpec::default() };
        let mut drifted = base.clone();
        drifted.drift = vec![DriftEvent { at_clip: 6, delta: DriftDelta { background_shift: 0.2, ..DriftDelta::default() } }];
        let a = generate_stream(&base).unwrap();
        let b = generate_stream(&drifted).unwrap();
        assert_eq!(a[..6], b[..6]);
        assert_ne!(a[6], b[6]);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec(0);
        s.drift = vec![
            DriftEvent { at_clip: 5, delta: DriftDelta::default() },
            DriftEvent { at_clip: 5, delta: DriftDelta::default() },
        ];
        assert!(matches!(generate_stream(&s), Err(Error::InvalidSpec(_))));
        s.drift = vec![DriftEvent { at_clip: 40, delta: DriftDelta::default() }];
        assert!(matches!(generate_stream(&s), Err(Error::InvalidSpec(_))));
        s.drift.clear();
        s.length = 0;
        assert!(generate_stream(&s).is_err());
    }
}
