//! Procedural synthetic face-forgery benchmark.
//!
//! Renders identity-parameterized cartoon faces, plants manipulations with
//! pixel-exact soft masks, groups frames into videos and emits train/test
//! splits with disjoint identities and manipulation families. Every render
//! is a pure function of its seeds.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;
use crate::tensor::Tensor;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Manipulation family of a frame or video.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    None,
    Blend,
    Warp,
    Texture,
    Fullface,
}

impl Family {
    pub fn is_fake(self) -> bool {
        self != Family::None
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Family::None => "none",
            Family::Blend => "blend",
            Family::Warp => "warp",
            Family::Texture => "texture",
            Family::Fullface => "fullface",
        }
    }
}

/// Pixel-space face geometry (canvas fractions are resolved at render time).
#[derive(Clone, Debug)]
pub struct FaceGeometry {
    pub center: (f64, f64),
    pub radii: (f64, f64),
    pub eye_offset: f64,
    pub eye_y: f64,
    pub eye_r: f64,
    pub mouth_y: f64,
    pub mouth_w: f64,
    pub mouth_h: f64,
}

/// Colors and background texture of a face.
#[derive(Clone, Debug)]
pub struct FaceAppearance {
    pub skin: [f64; 3],
    pub iris: [f64; 3],
    pub mouth: [f64; 3],
    pub brow: [f64; 3],
    pub background: [f64; 3],
    pub bg_wave: (f64, f64, f64),
    pub sharpness: f64,
}

/// Geometry plus appearance, derived deterministically from a seed.
#[derive(Clone, Debug)]
pub struct FaceParams {
    pub geometry: FaceGeometry,
    pub appearance: FaceAppearance,
}

/// A synthetic identity: `face_params` is a pure function of `seed`.
#[derive(Clone, Debug)]
pub struct Identity {
    pub seed: u64,
    pub face_params: FaceParams,
}

impl Identity {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seeds::derive(seed, "identity-params", 0));
        let u = |rng: &mut ChaCha20Rng, lo: f64, hi: f64| rng.gen_range(lo..hi);
        let geometry = FaceGeometry {
            center: (u(&mut rng, 0.44, 0.56), u(&mut rng, 0.46, 0.58)),
            radii: (u(&mut rng, 0.26, 0.34), u(&mut rng, 0.32, 0.40)),
            eye_offset: u(&mut rng, 0.10, 0.15),
            eye_y: u(&mut rng, 0.09, 0.13),
            eye_r: u(&mut rng, 0.035, 0.055),
            mouth_y: u(&mut rng, 0.13, 0.19),
            mouth_w: u(&mut rng, 0.08, 0.14),
            mouth_h: u(&mut rng, 0.025, 0.050),
        };
        let appearance = FaceAppearance {
            skin: [u(&mut rng, 0.55, 0.95), u(&mut rng, 0.45, 0.75), u(&mut rng, 0.35, 0.65)],
            iris: [u(&mut rng, 0.05, 0.55), u(&mut rng, 0.15, 0.60), u(&mut rng, 0.35, 0.90)],
            mouth: [u(&mut rng, 0.55, 0.85), u(&mut rng, 0.10, 0.35), u(&mut rng, 0.15, 0.40)],
            brow: [u(&mut rng, 0.05, 0.35), u(&mut rng, 0.03, 0.25), u(&mut rng, 0.02, 0.20)],
            background: [u(&mut rng, 0.10, 0.90), u(&mut rng, 0.10, 0.90), u(&mut rng, 0.10, 0.90)],
            bg_wave: (u(&mut rng, 1.5, 5.0), u(&mut rng, 1.5, 5.0), u(&mut rng, 0.0, 6.28)),
            sharpness: u(&mut rng, 1.2, 2.2),
        };
        Identity { seed, face_params: FaceParams { geometry, appearance } }
    }
}

/// Provenance of a procedurally rendered frame; manipulations need it to
/// recover the jittered geometry.
#[derive(Clone, Copy, Debug)]
pub struct RenderInfo {
    pub frame_index: usize,
    pub jitter_seed: u64,
    pub image_size: usize,
}

/// One frame with its label and soft ground-truth forgery mask.
#[derive(Clone, Debug)]
pub struct FrameSample {
    /// [h, w, 3] in [0,1].
    pub image: Tensor,
    /// 0 real, 1 fake.
    pub label: u8,
    /// [h, w] in [0,1]; all zero exactly when the frame is real.
    pub mask: Tensor,
    pub video_id: String,
    pub identity_id: u64,
    pub family: Family,
    /// Present on procedurally rendered frames, absent on frames loaded from disk.
    pub render_info: Option<RenderInfo>,
}

/// K frames sharing one label, family and identity.
#[derive(Clone, Debug)]
pub struct VideoSample {
    pub frames: Vec<FrameSample>,
    pub video_id: String,
    pub identity_id: u64,
    pub family: Family,
    pub label: u8,
}

impl VideoSample {
    pub fn from_frames(frames: Vec<FrameSample>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Validation("a video needs at least one frame".into()))?;
        let (video_id, identity_id, family, label) =
            (first.video_id.clone(), first.identity_id, first.family, first.label);
        for f in &frames {
            if f.video_id != video_id || f.identity_id != identity_id || f.family != family || f.label != label
            {
                return Err(Error::Validation(format!(
                    "frames of video {video_id} disagree on label/family/identity"
                )));
            }
        }
        Ok(VideoSample { frames, video_id, identity_id, family, label })
    }
}

/// Which families and identity fractions land in which split.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SplitProtocol {
    pub train_families: Vec<Family>,
    pub test_families: Vec<Family>,
    /// Fraction of identities assigned to the train split.
    pub train_identity_fraction: f64,
}

impl Default for SplitProtocol {
    fn default() -> Self {
        SplitProtocol {
            train_families: vec![Family::Blend, Family::Warp],
            test_families: vec![Family::Texture, Family::Fullface],
            train_identity_fraction: 0.5,
        }
    }
}

impl SplitProtocol {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.train_families.is_empty() || self.test_families.is_empty() {
            problems.push("both splits need at least one manipulation family".to_string());
        }
        if self.train_families.iter().chain(&self.test_families).any(|f| !f.is_fake()) {
            problems.push("split families must be manipulation families, not none".to_string());
        }
        if !(0.0..1.0).contains(&self.train_identity_fraction)
            || self.train_identity_fraction <= 0.0
        {
            problems.push(format!(
                "train_identity_fraction {} must lie strictly between 0 and 1",
                self.train_identity_fraction
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Benchmark-generation configuration.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DataConfig {
    pub num_identities: usize,
    pub videos_per_identity: usize,
    pub frames_per_video: usize,
    pub image_size: usize,
    /// Manipulation strength range sampled per fake video.
    pub strength_min: f64,
    pub strength_max: f64,
    pub protocol: SplitProtocol,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            num_identities: 32,
            videos_per_identity: 4,
            frames_per_video: 8,
            image_size: 64,
            strength_min: 0.6,
            strength_max: 1.0,
            protocol: SplitProtocol::default(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_identities < 4 {
            problems.push(format!("num_identities {} must be >= 4", self.num_identities));
        }
        if self.videos_per_identity == 0 || self.frames_per_video == 0 {
            problems.push("videos_per_identity and frames_per_video must be >= 1".to_string());
        }
        if self.image_size < 16 {
            problems.push(format!("image_size {} must be >= 16", self.image_size));
        }
        if !(self.strength_min > 0.0 && self.strength_min <= self.strength_max && self.strength_max <= 1.0)
        {
            problems.push(format!(
                "strength range [{}, {}] must satisfy 0 < min <= max <= 1",
                self.strength_min, self.strength_max
            ));
        }
        if let Err(Error::Config(msg)) = self.protocol.validate() {
            problems.push(msg);
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

// ── rendering ────────────────────────────────────────────────────────────

/// Per-frame jitter: bounded translation and brightness wobble.
#[derive(Clone, Copy, Debug)]
struct Jitter {
    dx: f64,
    dy: f64,
    brightness: f64,
}

fn frame_jitter(jitter_seed: u64, frame_index: usize) -> Jitter {
    let mut rng =
        ChaCha20Rng::seed_from_u64(seeds::derive(jitter_seed, "jitter", frame_index as u64));
    Jitter {
        dx: rng.gen_range(-2.0..=2.0),
        dy: rng.gen_range(-2.0..=2.0),
        brightness: rng.gen_range(0.95..=1.05),
    }
}

/// Geometry shifted into pixel space for one jittered frame.
#[derive(Clone, Debug)]
struct PixelGeometry {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    eye_l: (f64, f64),
    eye_r: (f64, f64),
    eye_rad: f64,
    mouth: (f64, f64),
    mouth_w: f64,
    mouth_h: f64,
}

fn pixel_geometry(geom: &FaceGeometry, size: usize, jitter: Jitter) -> PixelGeometry {
    let s = size as f64;
    let cx = geom.center.0 * s + jitter.dx;
    let cy = geom.center.1 * s + jitter.dy;
    PixelGeometry {
        cx,
        cy,
        rx: geom.radii.0 * s,
        ry: geom.radii.1 * s,
        eye_l: (cx - geom.eye_offset * s, cy - geom.eye_y * s),
        eye_r: (cx + geom.eye_offset * s, cy - geom.eye_y * s),
        eye_rad: geom.eye_r * s,
        mouth: (cx, cy + geom.mouth_y * s),
        mouth_w: geom.mouth_w * s,
        mouth_h: geom.mouth_h * s,
    }
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Normalized elliptical radius of a point.
fn ellipse_r(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let dx = (x - cx) / rx;
    let dy = (y - cy) / ry;
    (dx * dx + dy * dy).sqrt()
}

/// Face-interior coverage in [0,1] with an antialiased rim.
fn face_alpha(g: &PixelGeometry, x: f64, y: f64, feather: f64) -> f64 {
    let r = ellipse_r(x, y, g.cx, g.cy, g.rx, g.ry);
    1.0 - smoothstep(1.0 - feather, 1.0, r)
}

/// Render a face with the given geometry and appearance onto a canvas.
fn render_face(
    geom: &PixelGeometry,
    app: &FaceAppearance,
    size: usize,
    brightness: f64,
) -> Tensor {
    let s = size as f64;
    let mut img = Tensor::zeros(&[size, size, 3]);
    let feather = 2.0 / geom.rx.min(geom.ry);
    let edge = app.sharpness;
    for yi in 0..size {
        for xi in 0..size {
            let (x, y) = (xi as f64 + 0.5, yi as f64 + 0.5);
            // Background: flat color plus a slow diagonal wave.
            let wave = (app.bg_wave.0 * x / s + app.bg_wave.1 * y / s + app.bg_wave.2).sin();
            let mut px = [
                (app.background[0] + 0.08 * wave).clamp(0.0, 1.0),
                (app.background[1] + 0.08 * wave).clamp(0.0, 1.0),
                (app.background[2] + 0.08 * wave).clamp(0.0, 1.0),
            ];
            let fa = face_alpha(geom, x, y, feather);
            if fa > 0.0 {
                // Skin with gentle vertical shading.
                let shade = 1.0 - 0.12 * ((y - geom.cy) / geom.ry).clamp(-1.0, 1.0);
                let mut face = [
                    app.skin[0] * shade,
                    app.skin[1] * shade,
                    app.skin[2] * shade,
                ];
                // Eyes: white sclera, colored iris, dark pupil, brow bar above.
                for &(ex, ey) in &[geom.eye_l, geom.eye_r] {
                    let er = ellipse_r(x, y, ex, ey, geom.eye_rad * 1.35, geom.eye_rad);
                    let ea = 1.0 - smoothstep(1.0 - 0.25 * edge, 1.0, er);
                    if ea > 0.0 {
                        let sclera = [0.93, 0.93, 0.90];
                        blend_into(&mut face, &sclera, ea);
                        let ir = ellipse_r(x, y, ex, ey, geom.eye_rad * 0.62, geom.eye_rad * 0.62);
                        let ia = 1.0 - smoothstep(1.0 - 0.35 * edge, 1.0, ir);
                        if ia > 0.0 {
                            blend_into(&mut face, &app.iris, ia);
                            let pr =
                                ellipse_r(x, y, ex, ey, geom.eye_rad * 0.26, geom.eye_rad * 0.26);
                            let pa = 1.0 - smoothstep(1.0 - 0.5 * edge, 1.0, pr);
                            blend_into(&mut face, &[0.05, 0.05, 0.05], pa);
                        }
                    }
                    let br = ellipse_r(
                        x,
                        y,
                        ex,
                        ey - geom.eye_rad * 2.2,
                        geom.eye_rad * 1.5,
                        geom.eye_rad * 0.45,
                    );
                    let ba = 1.0 - smoothstep(1.0 - 0.3 * edge, 1.0, br);
                    blend_into(&mut face, &app.brow, ba);
                }
                // Nose: faint vertical darkening.
                let nr = ellipse_r(x, y, geom.cx, geom.cy + geom.ry * 0.05, geom.rx * 0.08, geom.ry * 0.22);
                let na = (1.0 - smoothstep(0.7, 1.0, nr)) * 0.25;
                let nose = [face[0] * 0.82, face[1] * 0.82, face[2] * 0.82];
                blend_into(&mut face, &nose, na);
                // Mouth.
                let mr = ellipse_r(x, y, geom.mouth.0, geom.mouth.1, geom.mouth_w, geom.mouth_h);
                let ma = 1.0 - smoothstep(1.0 - 0.3 * edge, 1.0, mr);
                blend_into(&mut face, &app.mouth, ma);

                blend_into(&mut px, &face, fa);
            }
            for c in 0..3 {
                img.data_mut()[(yi * size + xi) * 3 + c] = (px[c] * brightness).clamp(0.0, 1.0);
            }
        }
    }
    img
}

fn blend_into(dst: &mut [f64; 3], src: &[f64; 3], alpha: f64) {
    let a = alpha.clamp(0.0, 1.0);
    for c in 0..3 {
        dst[c] = (1.0 - a) * dst[c] + a * src[c];
    }
}

/// Deterministic pristine render of one frame.
pub fn render_real(identity: &Identity, frame_index: usize, jitter_seed: u64) -> FrameSample {
    render_real_sized(identity, frame_index, jitter_seed, 64)
}

pub fn render_real_sized(
    identity: &Identity,
    frame_index: usize,
    jitter_seed: u64,
    image_size: usize,
) -> FrameSample {
    let jitter = frame_jitter(jitter_seed, frame_index);
    let geom = pixel_geometry(&identity.face_params.geometry, image_size, jitter);
    let image = render_face(&geom, &identity.face_params.appearance, image_size, jitter.brightness);
    FrameSample {
        image,
        label: 0,
        mask: Tensor::zeros(&[image_size, image_size]),
        video_id: String::new(),
        identity_id: identity.seed,
        family: Family::None,
        render_info: Some(RenderInfo { frame_index, jitter_seed, image_size }),
    }
}

// ── manipulations ────────────────────────────────────────────────────────

/// Quantize a raw alpha field to the 8-bit grid the mask files use, so that
/// mask support and manipulated support agree exactly.
fn quantize_mask(raw: &Tensor) -> Tensor {
    raw.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

/// 3x3 box blur; emulates the resampling/compositing smoothing every real
/// forgery pipeline leaves behind.
fn box_blur(img: &Tensor, size: usize) -> Tensor {
    let mut out = img.clone();
    for yi in 0..size {
        for xi in 0..size {
            for c in 0..3 {
                let mut acc = 0.0;
                let mut cnt = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let ny = yi as i64 + dy;
                        let nx = xi as i64 + dx;
                        if ny < 0 || nx < 0 || ny >= size as i64 || nx >= size as i64 {
                            continue;
                        }
                        acc += img.data()[((ny as usize) * size + nx as usize) * 3 + c];
                        cnt += 1.0;
                    }
                }
                out.data_mut()[(yi * size + xi) * 3 + c] = acc / cnt;
            }
        }
    }
    out
}

fn bilinear_sample(img: &Tensor, size: usize, x: f64, y: f64, c: usize) -> f64 {
    let xc = x.clamp(0.0, (size - 1) as f64);
    let yc = y.clamp(0.0, (size - 1) as f64);
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(size - 1);
    let y1 = (y0 + 1).min(size - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    let v = |yy: usize, xx: usize| img.data()[(yy * size + xx) * 3 + c];
    let top = v(y0, x0) + fx * (v(y0, x1) - v(y0, x0));
    let bot = v(y1, x0) + fx * (v(y1, x1) - v(y1, x0));
    top + fy * (bot - top)
}

/// Composite `content` over `src` with a per-pixel alpha mask. Pixels with
/// zero alpha keep src bit-for-bit.
fn composite(src: &Tensor, content: &Tensor, alpha: &Tensor, size: usize) -> Tensor {
    let mut out = src.clone();
    for p in 0..size * size {
        let a = alpha.data()[p];
        if a == 0.0 {
            continue;
        }
        for c in 0..3 {
            let i = p * 3 + c;
            out.data_mut()[i] = (1.0 - a) * src.data()[i] + a * content.data()[i];
        }
    }
    out
}

/// Plant a manipulation into a pristine rendered frame.
///
/// The returned mask is the exact editing alpha: pixels where it is zero are
/// bit-identical to the input frame. `strength` must be positive; zero would
/// produce an unchanged frame labeled fake, which is rejected.
pub fn apply_manipulation(
    real: &FrameSample,
    family: Family,
    donor: &Identity,
    strength: f64,
    rng_seed: u64,
) -> Result<FrameSample> {
    if !family.is_fake() {
        return Err(Error::Validation("manipulation family must not be none".into()));
    }
    if strength <= 0.0 || strength > 1.0 {
        return Err(Error::Validation(format!(
            "manipulation strength {strength} must lie in (0, 1]"
        )));
    }
    if real.label != 0 {
        return Err(Error::Validation("manipulations start from a real frame".into()));
    }
    let info = real.render_info.ok_or_else(|| {
        Error::Validation("manipulation requires a procedurally rendered source frame".into())
    })?;
    if matches!(family, Family::Blend | Family::Fullface) && donor.seed == real.identity_id {
        return Err(Error::Validation(
            "blend and fullface manipulations need a donor distinct from the source".into(),
        ));
    }

    let size = info.image_size;
    let source = Identity::new(real.identity_id);
    let jitter = frame_jitter(info.jitter_seed, info.frame_index);
    let geom = pixel_geometry(&source.face_params.geometry, size, jitter);
    let mut rng = ChaCha20Rng::seed_from_u64(seeds::derive(rng_seed, "manip", 0));

    let (content, raw_alpha) = match family {
        Family::None => unreachable!(),
        Family::Blend => blend_content(real, &source, donor, &geom, size, strength, jitter, &mut rng),
        Family::Warp => warp_content(real, &geom, size, strength, &mut rng),
        Family::Texture => texture_content(real, &geom, size, strength, &mut rng),
        Family::Fullface => {
            fullface_content(&source, donor, &geom, size, strength, jitter)
        }
    };

    let mask = quantize_mask(&raw_alpha);
    if mask.data().iter().all(|&v| v == 0.0) {
        return Err(Error::Validation(format!(
            "{} manipulation produced an empty mask",
            family.as_str()
        )));
    }
    let image = composite(&real.image, &content, &mask, size);
    Ok(FrameSample {
        image,
        label: 1,
        mask,
        video_id: real.video_id.clone(),
        identity_id: real.identity_id,
        family,
        render_info: real.render_info,
    })
}

/// A sub-face elliptical region anchored on a facial feature.
fn pick_region(
    geom: &PixelGeometry,
    rng: &mut ChaCha20Rng,
) -> (f64, f64, f64, f64) {
    let anchors = [
        (geom.eye_l.0, geom.eye_l.1),
        (geom.eye_r.0, geom.eye_r.1),
        (geom.mouth.0, geom.mouth.1),
        (geom.cx, geom.cy),
    ];
    let (ax, ay) = anchors[rng.gen_range(0..anchors.len())];
    let rx = rng.gen_range(0.45..0.70) * geom.rx;
    let ry = rng.gen_range(0.40..0.60) * geom.ry;
    (ax, ay, rx, ry)
}

/// Region alpha, feathered, clipped to stay strictly inside the face ellipse.
fn region_alpha(
    geom: &PixelGeometry,
    size: usize,
    center: (f64, f64),
    radii: (f64, f64),
    peak: f64,
) -> Tensor {
    let mut alpha = Tensor::zeros(&[size, size]);
    for yi in 0..size {
        for xi in 0..size {
            let (x, y) = (xi as f64 + 0.5, yi as f64 + 0.5);
            let r = ellipse_r(x, y, center.0, center.1, radii.0, radii.1);
            let a = (1.0 - smoothstep(0.55, 1.0, r)) * peak;
            // Hard interior clip keeps the support inside the face rim.
            let face_r = ellipse_r(x, y, geom.cx, geom.cy, geom.rx, geom.ry);
            let clip = 1.0 - smoothstep(0.80, 0.92, face_r);
            alpha.data_mut()[yi * size + xi] = a * clip;
        }
    }
    alpha
}

fn blend_content(
    real: &FrameSample,
    _source: &Identity,
    donor: &Identity,
    geom: &PixelGeometry,
    size: usize,
    strength: f64,
    jitter: Jitter,
    rng: &mut ChaCha20Rng,
) -> (Tensor, Tensor) {
    // Donor appearance rendered in the source's jittered geometry, then
    // softened like a pasted-and-smoothed face patch.
    let donor_render = render_face(geom, &donor.face_params.appearance, size, jitter.brightness);
    let content = box_blur(&donor_render, size);
    let (ax, ay, rx, ry) = pick_region(geom, rng);
    let alpha = region_alpha(geom, size, (ax, ay), (rx, ry), strength);
    let _ = real;
    (content, alpha)
}

fn warp_content(
    real: &FrameSample,
    geom: &PixelGeometry,
    size: usize,
    strength: f64,
    rng: &mut ChaCha20Rng,
) -> (Tensor, Tensor) {
    // Displacement bumps around the eyes and mouth; the mask is the
    // normalized displacement magnitude.
    let bumps: Vec<((f64, f64), f64, (f64, f64))> = [geom.eye_l, geom.eye_r, geom.mouth]
        .iter()
        .map(|&(bx, by)| {
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let sigma = rng.gen_range(0.9..1.4) * geom.eye_rad * 2.6;
            ((bx, by), sigma, (angle.cos(), angle.sin()))
        })
        .collect();
    let amp = 3.0 * strength;
    let mut disp = vec![(0.0f64, 0.0f64); size * size];
    let mut mag = Tensor::zeros(&[size, size]);
    let mut max_mag = 0.0f64;
    for yi in 0..size {
        for xi in 0..size {
            let (x, y) = (xi as f64 + 0.5, yi as f64 + 0.5);
            let mut dx = 0.0;
            let mut dy = 0.0;
            for &((bx, by), sigma, (ux, uy)) in &bumps {
                let d2 = (x - bx) * (x - bx) + (y - by) * (y - by);
                // Truncate to keep the support compact.
                if d2 > (3.0 * sigma) * (3.0 * sigma) {
                    continue;
                }
                let w = amp * (-d2 / (2.0 * sigma * sigma)).exp();
                dx += w * ux;
                dy += w * uy;
            }
            let m = (dx * dx + dy * dy).sqrt();
            disp[yi * size + xi] = (dx, dy);
            mag.data_mut()[yi * size + xi] = m;
            max_mag = max_mag.max(m);
        }
    }
    // Normalize against half the peak so mid-field displacement still
    // registers clearly in the mask.
    let raw_alpha =
        if max_mag > 0.0 { mag.map(|v| (v / (0.5 * max_mag)).min(1.0)) } else { mag };
    // Zero displacement wherever the quantized mask will be zero, so those
    // pixels stay bit-identical.
    let q = quantize_mask(&raw_alpha);
    let mut content = real.image.clone();
    for yi in 0..size {
        for xi in 0..size {
            if q.data()[yi * size + xi] == 0.0 {
                continue;
            }
            let (dx, dy) = disp[yi * size + xi];
            for c in 0..3 {
                content.data_mut()[(yi * size + xi) * 3 + c] =
                    bilinear_sample(&real.image, size, xi as f64 + dx, yi as f64 + dy, c);
            }
        }
    }
    (content, raw_alpha)
}

fn texture_content(
    real: &FrameSample,
    geom: &PixelGeometry,
    size: usize,
    strength: f64,
    rng: &mut ChaCha20Rng,
) -> (Tensor, Tensor) {
    // Band-limited noise: a handful of random sinusoidal plane waves.
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let freq = rng.gen_range(4.0..10.0);
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            (
                freq * angle.cos() * std::f64::consts::TAU / size as f64,
                freq * angle.sin() * std::f64::consts::TAU / size as f64,
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.5..1.0),
            )
        })
        .collect();
    let (ax, ay, rx, ry) = pick_region(geom, rng);
    let alpha = region_alpha(geom, size, (ax, ay), (rx, ry), 1.0);
    let mut content = real.image.clone();
    for yi in 0..size {
        for xi in 0..size {
            let (x, y) = (xi as f64 + 0.5, yi as f64 + 0.5);
            let mut n = 0.0;
            for &(fx, fy, phase, amp) in &waves {
                n += amp * (fx * x + fy * y + phase).sin();
            }
            for c in 0..3 {
                let i = (yi * size + xi) * 3 + c;
                content.data_mut()[i] =
                    (real.image.data()[i] + 0.35 * strength * n / 4.0_f64.sqrt()).clamp(0.0, 1.0);
            }
        }
    }
    let content = box_blur(&content, size);
    (content, alpha)
}

fn fullface_content(
    source: &Identity,
    donor: &Identity,
    geom: &PixelGeometry,
    size: usize,
    strength: f64,
    jitter: Jitter,
) -> (Tensor, Tensor) {
    // Re-render the whole face interior from the donor's appearance,
    // interpolated toward the source by (1 - strength), with the slightly
    // banded colors a generative re-synthesis leaves behind.
    let mut app = donor.face_params.appearance.clone();
    let src_app = &source.face_params.appearance;
    let lerp3 = |a: &[f64; 3], b: &[f64; 3]| {
        [
            a[0] + strength * (b[0] - a[0]),
            a[1] + strength * (b[1] - a[1]),
            a[2] + strength * (b[2] - a[2]),
        ]
    };
    app.skin = lerp3(&src_app.skin, &donor.face_params.appearance.skin);
    app.iris = lerp3(&src_app.iris, &donor.face_params.appearance.iris);
    app.mouth = lerp3(&src_app.mouth, &donor.face_params.appearance.mouth);
    app.background = src_app.background;
    app.bg_wave = src_app.bg_wave;
    let rendered = render_face(geom, &app, size, jitter.brightness);
    // Posterize the interior: quantized color bands, then resampling blur.
    let banded = rendered.map(|v| (v * 14.0).round() / 14.0);
    let content = box_blur(&banded, size);

    let mut alpha = Tensor::zeros(&[size, size]);
    let feather = 2.0 / geom.rx.min(geom.ry);
    for yi in 0..size {
        for xi in 0..size {
            let (x, y) = (xi as f64 + 0.5, yi as f64 + 0.5);
            alpha.data_mut()[yi * size + xi] = face_alpha(geom, x, y, feather);
        }
    }
    (content, alpha)
}

// ── benchmark assembly ───────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One manifest line.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub schema_version: u32,
    pub video_id: String,
    pub identity_id: u64,
    pub family: Family,
    pub label: u8,
    pub split: Split,
    pub num_frames: usize,
}

/// A generated benchmark rooted at a directory.
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
    pub image_size: usize,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = root.join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&manifest)
            .map_err(|e| Error::io(format!("reading {}", manifest.display()), e))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| {
                Error::Validation(format!("manifest line {}: {e}", i + 1))
            })?;
            if rec.schema_version != MANIFEST_SCHEMA_VERSION {
                return Err(Error::Validation(format!(
                    "manifest line {}: unsupported schema version {}",
                    i + 1,
                    rec.schema_version
                )));
            }
            records.push(rec);
        }
        if records.is_empty() {
            return Err(Error::Validation(format!("{} holds no records", manifest.display())));
        }
        // Probe one frame for the image size.
        let first = &records[0];
        let probe = root.join("frames").join(&first.video_id).join("0.png");
        let img = crate::imgio::load_rgb(&probe)?;
        let image_size = img.shape()[0];
        Ok(Dataset { root: root.to_path_buf(), records, image_size })
    }

    pub fn split_records(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// Load one frame and its mask from disk.
    pub fn load_frame(&self, rec: &ManifestRecord, frame_index: usize) -> Result<FrameSample> {
        let fpath = self.root.join("frames").join(&rec.video_id).join(format!("{frame_index}.png"));
        let mpath = self.root.join("masks").join(&rec.video_id).join(format!("{frame_index}.png"));
        let image = crate::imgio::load_rgb(&fpath)?;
        let mask = crate::imgio::load_gray(&mpath)?;
        Ok(FrameSample {
            image,
            label: rec.label,
            mask,
            video_id: rec.video_id.clone(),
            identity_id: rec.identity_id,
            family: rec.family,
            render_info: None,
        })
    }

    pub fn load_video(&self, rec: &ManifestRecord) -> Result<VideoSample> {
        let frames = (0..rec.num_frames)
            .map(|k| self.load_frame(rec, k))
            .collect::<Result<Vec<_>>>()?;
        VideoSample::from_frames(frames)
    }
}

/// Generate the full benchmark under `out_dir`; deterministic in `seed`.
pub fn build_benchmark(config: &DataConfig, seed: u64, out_dir: &Path) -> Result<Dataset> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;

    let n_train = ((config.num_identities as f64) * config.protocol.train_identity_fraction)
        .round() as usize;
    let n_train = n_train.clamp(1, config.num_identities - 1);

    let identity_seeds: Vec<u64> = (0..config.num_identities)
        .map(|i| seeds::derive(seed, "identity", i as u64))
        .collect();
    let identities: Vec<Identity> = identity_seeds.iter().map(|&s| Identity::new(s)).collect();

    let mut records = Vec::new();
    let mut video_index = 0u64;
    for (idx, identity) in identities.iter().enumerate() {
        let split = if idx < n_train { Split::Train } else { Split::Test };
        let families = match split {
            Split::Train => &config.protocol.train_families,
            Split::Test => &config.protocol.test_families,
        };
        let peer_range = match split {
            Split::Train => 0..n_train,
            Split::Test => n_train..config.num_identities,
        };
        let mut fake_counter = 0usize;
        for v in 0..config.videos_per_identity {
            let video_id = format!("id{idx:03}_v{v}");
            let is_fake = v % 2 == 1;
            let jitter_seed = seeds::derive(seed, "jitter", video_index);
            let mut family = Family::None;
            let mut frames = Vec::with_capacity(config.frames_per_video);
            if is_fake {
                family = families[fake_counter % families.len()];
                fake_counter += 1;
                let vid_rng_seed = seeds::derive(seed, "video", video_index);
                let mut vid_rng = ChaCha20Rng::seed_from_u64(vid_rng_seed);
                let strength = vid_rng.gen_range(config.strength_min..=config.strength_max);
                let peers: Vec<usize> = peer_range.clone().filter(|&p| p != idx).collect();
                let donor = &identities[peers[vid_rng.gen_range(0..peers.len())]];
                for k in 0..config.frames_per_video {
                    let mut real =
                        render_real_sized(identity, k, jitter_seed, config.image_size);
                    real.video_id = video_id.clone();
                    let mut fake = apply_manipulation(&real, family, donor, strength, vid_rng_seed)?;
                    fake.video_id = video_id.clone();
                    frames.push(fake);
                }
            } else {
                for k in 0..config.frames_per_video {
                    let mut real =
                        render_real_sized(identity, k, jitter_seed, config.image_size);
                    real.video_id = video_id.clone();
                    frames.push(real);
                }
            }
            // Write frames and masks.
            let fdir = out_dir.join("frames").join(&video_id);
            let mdir = out_dir.join("masks").join(&video_id);
            for (k, frame) in frames.iter().enumerate() {
                crate::imgio::save_rgb(&fdir.join(format!("{k}.png")), &frame.image)?;
                crate::imgio::save_gray(&mdir.join(format!("{k}.png")), &frame.mask)?;
            }
            records.push(ManifestRecord {
                schema_version: MANIFEST_SCHEMA_VERSION,
                video_id,
                identity_id: identity.seed,
                family,
                label: u8::from(is_fake),
                split,
                num_frames: config.frames_per_video,
            });
            video_index += 1;
        }
    }

    let manifest_path = out_dir.join(MANIFEST_NAME);
    let mut text = String::new();
    for rec in &records {
        text.push_str(&serde_json::to_string(rec).expect("record serializes"));
        text.push('\n');
    }
    std::fs::write(&manifest_path, text)
        .map_err(|e| Error::io(format!("writing {}", manifest_path.display()), e))?;

    Ok(Dataset { root: out_dir.to_path_buf(), records, image_size: config.image_size })
}
