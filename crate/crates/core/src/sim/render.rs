use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::emotion::{preprocess_face, EmotionClass, LabeledDataset, RawCrop, Split, FACE_SIZE};

pub const BACKGROUND_LEVEL: f64 = 40.0;
pub const BLOB_AMPLITUDE: f64 = 170.0;
pub const BLOB_SIGMA_PX: f64 = 16.0;
pub const PIXEL_NOISE_SIGMA: f64 = 10.0;

/// Blob center `(x, y)` for each class: boredom top-left, confusion
/// top-right, engagement bottom-left, frustration bottom-right.
pub fn blob_center(emotion: EmotionClass) -> (f64, f64) {
    let near = FACE_SIZE as f64 * 0.25;
    let far = FACE_SIZE as f64 * 0.75;
    match emotion {
        EmotionClass::Boredom => (near, near),
        EmotionClass::Confusion => (far, near),
        EmotionClass::Engagement => (near, far),
        EmotionClass::Frustration => (far, far),
    }
}

/// Class-conditional 64x64 grayscale crop: a Gaussian blob in the class
/// quadrant over a flat background, plus seeded per-pixel Gaussian noise.
pub fn render_emotion_crop(emotion: EmotionClass, seed: u64) -> RawCrop {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, PIXEL_NOISE_SIGMA).expect("valid sigma");
    let (cx, cy) = blob_center(emotion);
    let two_var = 2.0 * BLOB_SIGMA_PX * BLOB_SIGMA_PX;
    let mut data = Vec::with_capacity(FACE_SIZE * FACE_SIZE);
    for y in 0..FACE_SIZE {
        for x in 0..FACE_SIZE {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let blob = BLOB_AMPLITUDE * (-(dx * dx + dy * dy) / two_var).exp();
            let v = BACKGROUND_LEVEL + blob + noise.sample(&mut rng);
            data.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    RawCrop::grayscale(FACE_SIZE, FACE_SIZE, data).expect("64x64 crop")
}

/// Seed offset separating held-out crops from training crops.
pub const HELD_OUT_SEED_OFFSET: u64 = 1_000_000;

/// `per_class` preprocessed crops of every class, interleaved by class.
/// Item `i` of class `c` uses seed `seed_offset + 4i + code(c)`.
pub fn synthetic_dataset(per_class: usize, seed_offset: u64, split: Split) -> LabeledDataset {
    let mut items = Vec::with_capacity(per_class * EmotionClass::ALL.len());
    for i in 0..per_class {
        for class in EmotionClass::ALL {
            let crop = render_emotion_crop(class, seed_offset + (i * 4 + class.code()) as u64);
            items.push((preprocess_face(&crop).expect("valid crop"), class));
        }
    }
    LabeledDataset::new(items, split)
}
