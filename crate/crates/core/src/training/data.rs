use std::path::Path;

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Image;

use super::{Task, TrainConfig};

/// One training example. `mask` is present only for inpainting.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: Image,
    pub target: Image,
    pub mask: Option<Image>,
}

/// Training images large enough to yield `patch_size` crops.
#[derive(Clone, Debug)]
pub struct Corpus {
    images: Vec<Image>,
    patch_size: usize,
}

impl Corpus {
    pub fn new(images: Vec<Image>, patch_size: usize) -> Result<Self> {
        if patch_size == 0 {
            return Err(Error::Parameter("patch size must be positive".into()));
        }
        let total = images.len();
        let images: Vec<Image> = images
            .into_iter()
            .enumerate()
            .filter(|(k, img)| {
                let ok = img.height() >= patch_size && img.width() >= patch_size;
                if !ok {
                    warn!("skipping corpus image {k} ({}x{}): smaller than {patch_size}", img.height(), img.width());
                }
                ok
            })
            .map(|(_, img)| img)
            .collect();
        if images.is_empty() {
            return Err(Error::Data(format!("no usable images among {total} for {patch_size}x{patch_size} patches")));
        }
        let c = images[0].channels();
        if images.iter().any(|img| img.channels() != c) {
            return Err(Error::Data("corpus images differ in channel count".into()));
        }
        Ok(Self { images, patch_size })
    }

    /// All PGM files of a directory.
    pub fn from_dir(dir: impl AsRef<Path>, patch_size: usize) -> Result<Self> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(Error::Data(format!("corpus directory {} does not exist", dir.display())));
        }
        let images = crate::pgm::read_pgm_dir(dir)?.into_iter().map(|(_, img)| img).collect();
        Self::new(images, patch_size)
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn channels(&self) -> usize {
        self.images[0].channels()
    }
}

/// Random crops with the task's degradation applied.
pub fn make_batch<R: Rng + ?Sized>(corpus: &Corpus, cfg: &TrainConfig, rng: &mut R) -> Result<Vec<Sample>> {
    let ps = corpus.patch_size;
    let noise = Normal::new(0.0, cfg.sigma_n / 255.0).map_err(|e| Error::Parameter(format!("noise level: {e}")))?;
    (0..cfg.batch_size)
        .map(|_| {
            let img = &corpus.images[rng.random_range(0..corpus.images.len())];
            let top = rng.random_range(0..=img.height() - ps);
            let left = rng.random_range(0..=img.width() - ps);
            let target = img.crop(top, left, ps, ps)?;
            let (h, w, c) = target.dims();
            Ok(match cfg.task {
                Task::Denoise => {
                    let input = if cfg.sigma_n > 0.0 {
                        target.data().iter().map(|v| v + noise.sample(rng)).collect()
                    } else {
                        target.data().to_vec()
                    };
                    Sample { input: Image::from_vec(h, w, c, input)?, target, mask: None }
                }
                Task::Inpaint => {
                    let mask: Vec<f64> = (0..h * w * c).map(|_| f64::from(u8::from(rng.random_bool(cfg.mask_density)))).collect();
                    let input = target.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
                    Sample { input: Image::from_vec(h, w, c, input)?, target, mask: Some(Image::from_vec(h, w, c, mask)?) }
                }
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn corpus(ps: usize) -> Corpus {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let imgs = (0..3)
            .map(|k| {
                let (h, w) = (40 + 3 * k, 37 + k);
                Image::from_vec(h, w, 1, (0..h * w).map(|_| rng.random_range(0.0..=1.0)).collect()).unwrap()
            })
            .collect();
        Corpus::new(imgs, ps).unwrap()
    }

    fn cfg(task: Task) -> TrainConfig {
        TrainConfig { task, patch_size: 32, batch_size: 16, ..Default::default() }
    }

    #[test]
    fn noise_level_matches_sigma() {
        let c = corpus(32);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut n, mut s2) = (0usize, 0.0);
        while n < 1_000_000 {
            for smp in make_batch(&c, &cfg(Task::Denoise), &mut rng).unwrap() {
                assert!(smp.mask.is_none());
                for (a, b) in smp.input.data().iter().zip(smp.target.data()) {
                    s2 += (a - b) * (a - b);
                }
                n += smp.input.data().len();
            }
        }
        let std = (s2 / n as f64).sqrt();
        assert!((0.0745..=0.0824).contains(&std), "std = {std}");
    }

    #[test]
    fn mask_density_matches() {
        let c = corpus(32);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut n, mut ones) = (0usize, 0.0);
        while n < 1_000_000 {
            for smp in make_batch(&c, &cfg(Task::Inpaint), &mut rng).unwrap() {
                let m = smp.mask.unwrap();
                for ((x, t), mv) in smp.input.data().iter().zip(smp.target.data()).zip(m.data()) {
                    assert!(*mv == 0.0 || *mv == 1.0);
                    assert_eq!(*x, t * mv);
                }
                ones += m.data().iter().sum::<f64>();
                n += m.data().len();
            }
        }
        let density = ones / n as f64;
        assert!((0.497..=0.503).contains(&density), "density = {density}");
    }

    #[test]
    fn targets_are_normalized_crops() {
        let c = corpus(32);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for smp in make_batch(&c, &cfg(Task::Denoise), &mut rng).unwrap() {
            assert_eq!(smp.target.dims(), (32, 32, 1));
            assert!(smp.target.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let c = corpus(32);
        let a = make_batch(&c, &cfg(Task::Inpaint), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = make_batch(&c, &cfg(Task::Inpaint), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn undersized_images_are_skipped() {
        let imgs = vec![Image::zeros(10, 10, 1), Image::zeros(40, 40, 1)];
        assert_eq!(Corpus::new(imgs, 32).unwrap().images().len(), 1);
        assert!(matches!(Corpus::new(vec![Image::zeros(10, 10, 1)], 32), Err(Error::Data(_))));
        assert!(matches!(Corpus::new(vec![], 32), Err(Error::Data(_))));
        assert!(matches!(Corpus::from_dir("/nonexistent/corpus", 32), Err(Error::Data(_))));
    }
}
