use crate::diffusion::NoiseSource;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const SIDE: usize = 16;
pub const NOISE_AMPLITUDE: f64 = 0.05;
const FOREGROUND: f64 = 0.45;
const MODULATION: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ContentClass {
    Disk,
    Cross,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StyleClass {
    Plain,
    Stripes,
    Checker,
}

impl ContentClass {
    pub const ALL: [ContentClass; 2] = [ContentClass::Disk, ContentClass::Cross];

    pub fn name(self) -> &'static str {
        match self {
            ContentClass::Disk => "disk",
            ContentClass::Cross => "cross",
        }
    }

    fn contains(self, r: usize, c: usize) -> bool {
        match self {
            ContentClass::Disk => {
                let (dr, dc) = (r as f64 - 7.5, c as f64 - 7.5);
                dr * dr + dc * dc <= 25.0
            }
            ContentClass::Cross => (6..9).contains(&r) || (6..9).contains(&c),
        }
    }
}

impl StyleClass {
    pub const ALL: [StyleClass; 3] = [StyleClass::Plain, StyleClass::Stripes, StyleClass::Checker];

    pub fn name(self) -> &'static str {
        match self {
            StyleClass::Plain => "plain",
            StyleClass::Stripes => "stripes",
            StyleClass::Checker => "checker",
        }
    }

    fn modulation(self, r: usize, c: usize) -> f64 {
        let sign = |even: bool| if even { MODULATION } else { -MODULATION };
        match self {
            StyleClass::Plain => 0.0,
            StyleClass::Stripes => sign(r % 2 == 0),
            StyleClass::Checker => sign((r / 4 + c / 4) % 2 == 0),
        }
    }
}

/// Parameters of the synthetic content/style image family.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub side: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            side: SIDE,
            noise: NOISE_AMPLITUDE,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub content: ContentClass,
    pub style: StyleClass,
    pub index: usize,
    pub image: Tensor,
}

impl LabeledImage {
    pub fn file_stem(&self) -> String {
        format!(
            "{}_{}_{:04}",
            self.content.name(),
            self.style.name(),
            self.index
        )
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn item_seed(seed: u64, content: ContentClass, style: StyleClass, index: usize) -> u64 {
    [content as u64, style as u64, index as u64]
        .into_iter()
        .fold(splitmix(seed), |acc, v| splitmix(acc ^ v))
}

/// Pure function of `(spec, content, style, index)`.
pub fn render(
    spec: &SyntheticSpec,
    content: ContentClass,
    style: StyleClass,
    index: usize,
) -> Result<Tensor> {
    if spec.side != SIDE {
        return Err(Error::Validation(format!(
            "image side must be {SIDE}, got {}",
            spec.side
        )));
    }
    let mut noise = NoiseSource::new(item_seed(spec.seed, content, style, index));
    let mut px = Vec::with_capacity(SIDE * SIDE);
    for r in 0..SIDE {
        for c in 0..SIDE {
            let base = if content.contains(r, c) {
                FOREGROUND
            } else {
                -FOREGROUND
            };
            let jitter = spec.noise * (2.0 * noise.uniform() - 1.0);
            px.push((base + style.modulation(r, c) + jitter).clamp(-1.0, 1.0));
        }
    }
    Tensor::vector(px)
}

/// `n_per_cell` images for each listed cell, cell-major.
pub fn make_dataset(
    spec: &SyntheticSpec,
    cells: &[(ContentClass, StyleClass)],
    n_per_cell: usize,
) -> Result<Vec<LabeledImage>> {
    let mut out = Vec::with_capacity(cells.len() * n_per_cell);
    for &(content, style) in cells {
        for index in 0..n_per_cell {
            out.push(LabeledImage {
                content,
                style,
                index,
                image: render(spec, content, style, index)?,
            });
        }
    }
    Ok(out)
}

pub fn all_cells() -> Vec<(ContentClass, StyleClass)> {
    ContentClass::ALL
        .into_iter()
        .flat_map(|c| StyleClass::ALL.into_iter().map(move |s| (c, s)))
        .collect()
}

pub fn content_cells() -> Vec<(ContentClass, StyleClass)> {
    vec![(ContentClass::Cross, StyleClass::Plain)]
}

pub fn style_cells() -> Vec<(ContentClass, StyleClass)> {
    vec![
        (ContentClass::Disk, StyleClass::Stripes),
        (ContentClass::Cross, StyleClass::Stripes),
    ]
}
