//! Seeded two-view augmentation.
//!
//! Every random draw comes from a ChaCha stream keyed by
//! `(seed, draw_index, view, sample_id)`, so any batch can be replayed exactly
//! and the two views never share random numbers.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{config_err, Error, Result};
use crate::numerics::Tensor;

/// Smallest spatial size accepted by [`make_view_pair`].
pub const MIN_IMAGE_SIDE: usize = 8;

const SHUFFLE_TAG: u64 = 0x5348_5546_464c_4500;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub noise_sigma: f64,
    pub brightness_delta: f64,
    pub contrast_range: (f64, f64),
    pub crop_scale_range: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            noise_sigma: 0.02,
            brightness_delta: 0.1,
            contrast_range: (0.8, 1.2),
            crop_scale_range: (0.6, 1.0),
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Configuration under which both views equal the input exactly.
    pub fn identity(seed: u64) -> Self {
        Self {
            flip_prob: 0.0,
            noise_sigma: 0.0,
            brightness_delta: 0.0,
            contrast_range: (1.0, 1.0),
            crop_scale_range: (1.0, 1.0),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (clo, chi) = self.contrast_range;
        let (slo, shi) = self.crop_scale_range;
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return config_err(format!("flip_prob {} outside [0,1]", self.flip_prob));
        }
        if !(self.noise_sigma >= 0.0) || !(self.brightness_delta >= 0.0) {
            return config_err("noise_sigma and brightness_delta must be >= 0");
        }
        if !(clo > 0.0 && clo <= 1.0 && chi >= 1.0 && chi.is_finite()) {
            return config_err(format!("contrast range ({clo}, {chi}) must satisfy 0 < lo <= 1 <= hi"));
        }
        if !(slo > 0.0 && slo <= shi && shi <= 1.0) {
            return config_err(format!(
                "crop scale range ({slo}, {shi}) must lie in (0, 1] and be ordered"
            ));
        }
        Ok(())
    }
}

/// Two augmented versions of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub view_a: Tensor,
    pub view_b: Tensor,
    pub source_ids: Vec<u64>,
}

pub(crate) fn substream(seed: u64, draw_index: u64, view: u64, sample_id: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (chunk, word) in key.chunks_exact_mut(8).zip([seed, draw_index, view, sample_id]) {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let u: f64 = rng.random();
    lo + (hi - lo) * u
}

/// Augments one `C×H×W` image held in `src`, writing into `dst`.
fn augment_one(src: &[f64], dst: &mut [f64], c: usize, h: usize, w: usize, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) {
    let scale = uniform(rng, cfg.crop_scale_range.0, cfg.crop_scale_range.1);
    let ch = ((scale * h as f64).round() as usize).clamp(1, h);
    let cw = ((scale * w as f64).round() as usize).clamp(1, w);
    let oy = rng.random_range(0..=h - ch);
    let ox = rng.random_range(0..=w - cw);
    let flip = rng.random::<f64>() < cfg.flip_prob;
    let brightness = uniform(rng, -cfg.brightness_delta, cfg.brightness_delta);
    let contrast = uniform(rng, cfg.contrast_range.0, cfg.contrast_range.1);

    // crop + nearest-neighbour rescale, then optional horizontal flip
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        let out = &mut dst[ci * h * w..(ci + 1) * h * w];
        for y in 0..h {
            let sy = oy + y * ch / h;
            for x in 0..w {
                let tx = if flip { w - 1 - x } else { x };
                let sx = ox + tx * cw / w;
                out[y * w + x] = plane[sy * w + sx];
            }
        }
    }
    if brightness != 0.0 {
        dst.iter_mut().for_each(|v| *v += brightness);
    }
    if contrast != 1.0 {
        let mean = dst.iter().sum::<f64>() / dst.len() as f64;
        dst.iter_mut().for_each(|v| *v = mean + contrast * (*v - mean));
    }
    if cfg.noise_sigma > 0.0 {
        for v in dst.iter_mut() {
            let n: f64 = StandardNormal.sample(rng);
            *v += cfg.noise_sigma * n;
        }
    }
    dst.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// Produces two independently augmented views of `x` (`B×C×H×W`), using
/// sample ids `0..B`.
pub fn make_view_pair(x: &Tensor, cfg: &AugmentConfig, draw_index: u64) -> Result<ViewPair> {
    let b = x.shape().first().copied().unwrap_or(0) as u64;
    let ids: Vec<u64> = (0..b).collect();
    make_view_pair_with_ids(x, &ids, cfg, draw_index)
}

/// As [`make_view_pair`], keying each sample's random stream by its dataset id.
pub fn make_view_pair_with_ids(x: &Tensor, ids: &[u64], cfg: &AugmentConfig, draw_index: u64) -> Result<ViewPair> {
    cfg.validate()?;
    let (b, c, h, w) = x.dims4()?;
    if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
        return Err(Error::Data(format!(
            "image {h}x{w} smaller than the minimum crop side {MIN_IMAGE_SIDE}"
        )));
    }
    if ids.len() != b {
        return Err(Error::Shape(format!("{} ids for a batch of {b}", ids.len())));
    }
    x.check_finite("augmentation input")?;
    let per = c * h * w;
    let mut views = [vec![0.0; x.len()], vec![0.0; x.len()]];
    for (view, out) in views.iter_mut().enumerate() {
        for (i, &id) in ids.iter().enumerate() {
            let mut rng = substream(cfg.seed, draw_index, view as u64, id);
            augment_one(
                &x.data()[i * per..(i + 1) * per],
                &mut out[i * per..(i + 1) * per],
                c,
                h,
                w,
                cfg,
                &mut rng,
            );
        }
    }
    let [a, bv] = views;
    Ok(ViewPair {
        view_a: Tensor::new(x.shape().to_vec(), a)?,
        view_b: Tensor::new(x.shape().to_vec(), bv)?,
        source_ids: ids.to_vec(),
    })
}

/// Deterministic partition of `0..n` into shuffled batches for one epoch.
///
/// Samples left over after the last full batch are dropped, so every batch has
/// exactly `batch_size` samples.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return config_err(format!(
            "batch size {batch_size} < 2 leaves cross-correlation undefined"
        ));
    }
    if n == 0 {
        return Err(Error::Data("empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = substream(seed, epoch, SHUFFLE_TAG, 0);
    order.shuffle(&mut rng);
    Ok(order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect())
}

/// Number of full batches per epoch.
pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    n / batch_size
}

/// One element of an [`augmentation_stream`].
#[derive(Clone, Debug)]
pub struct AugmentedBatch {
    pub ids: Vec<u64>,
    pub images: Tensor,
    pub views: ViewPair,
    pub draw_index: u64,
}

/// Shuffled, augmented batches covering `images` once for `epoch`.
///
/// `images` is `N×C×H×W`; `ids` are the samples' dataset identifiers.
pub fn augmentation_stream(
    images: &Tensor,
    ids: &[u64],
    cfg: &AugmentConfig,
    epoch: u64,
    batch_size: usize,
) -> Result<Vec<AugmentedBatch>> {
    let n = images.shape()[0];
    if ids.len() != n {
        return Err(Error::Shape(format!("{} ids for {n} images", ids.len())));
    }
    let batches = epoch_batches(n, batch_size, cfg.seed, epoch)?;
    let per_epoch = batches.len() as u64;
    batches
        .into_iter()
        .enumerate()
        .map(|(bi, idx)| {
            let x = images.select_rows(&idx)?;
            let bids: Vec<u64> = idx.iter().map(|&i| ids[i]).collect();
            let draw_index = epoch * per_epoch + bi as u64;
            let views = make_view_pair_with_ids(&x, &bids, cfg, draw_index)?;
            Ok(AugmentedBatch {
                ids: bids,
                images: x,
                views,
                draw_index,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(b: usize, c: usize, h: usize, w: usize) -> Tensor {
        let n = b * c * h * w;
        Tensor::new(vec![b, c, h, w], (0..n).map(|i| (i % 97) as f64 / 96.0).collect()).unwrap()
    }

    #[test]
    fn identity_config_is_identity() {
        let x = ramp(3, 2, 8, 9);
        let vp = make_view_pair(&x, &AugmentConfig::identity(7), 11).unwrap();
        assert_eq!(vp.view_a, x);
        assert_eq!(vp.view_b, x);
        assert_eq!(vp.source_ids, vec![0, 1, 2]);
    }

    #[test]
    fn deterministic_per_draw() {
        let x = ramp(2, 3, 10, 10);
        let cfg = AugmentConfig::default();
        assert_eq!(
            make_view_pair(&x, &cfg, 3).unwrap(),
            make_view_pair(&x, &cfg, 3).unwrap()
        );
        assert_ne!(
            make_view_pair(&x, &cfg, 3).unwrap(),
            make_view_pair(&x, &cfg, 4).unwrap()
        );
    }

    #[test]
    fn forced_flip_mirrors_columns() {
        let x = ramp(2, 3, 8, 8);
        let cfg = AugmentConfig {
            flip_prob: 1.0,
            ..AugmentConfig::identity(1)
        };
        let vp = make_view_pair(&x, &cfg, 0).unwrap();
        let (b, c, h, w) = x.dims4().unwrap();
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let src = x.data()[((bi * c + ci) * h + y) * w + (w - 1 - xx)];
                        let at = ((bi * c + ci) * h + y) * w + xx;
                        assert_eq!(vp.view_a.data()[at], src);
                        assert_eq!(vp.view_b.data()[at], src);
                    }
                }
            }
        }
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        let x = ramp(4, 3, 12, 12);
        let cfg = AugmentConfig {
            noise_sigma: 0.5,
            brightness_delta: 0.5,
            contrast_range: (0.2, 3.0),
            ..AugmentConfig::default()
        };
        let vp = make_view_pair(&x, &cfg, 9).unwrap();
        assert!(vp
            .view_a
            .data()
            .iter()
            .chain(vp.view_b.data())
            .all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn views_use_disjoint_streams() {
        // changing one sample's id changes only that sample in both views
        let x = ramp(2, 1, 8, 8);
        let cfg = AugmentConfig::default();
        let a = make_view_pair_with_ids(&x, &[10, 11], &cfg, 0).unwrap();
        let b = make_view_pair_with_ids(&x, &[10, 12], &cfg, 0).unwrap();
        assert_eq!(a.view_a.data()[..64], b.view_a.data()[..64]);
        assert_eq!(a.view_b.data()[..64], b.view_b.data()[..64]);
        assert_ne!(a.view_a.data()[..64], a.view_b.data()[..64]);
    }

    #[test]
    fn small_images_rejected() {
        let x = ramp(2, 1, 7, 8);
        assert!(matches!(
            make_view_pair(&x, &AugmentConfig::default(), 0),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn stream_partitions_epoch() {
        let x = ramp(8, 1, 8, 8);
        let ids: Vec<u64> = (100..108).collect();
        let cfg = AugmentConfig::default();
        let s = augmentation_stream(&x, &ids, &cfg, 0, 4).unwrap();
        assert_eq!(s.len(), 2);
        let mut seen: Vec<u64> = s.iter().flat_map(|b| b.ids.clone()).collect();
        seen.sort();
        assert_eq!(seen, ids);
        let again = augmentation_stream(&x, &ids, &cfg, 0, 4).unwrap();
        assert_eq!(
            s.iter().map(|b| b.ids.clone()).collect::<Vec<_>>(),
            again.iter().map(|b| b.ids.clone()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn stream_drops_one_of_nine() {
        let batches = epoch_batches(9, 4, 5, 2).unwrap();
        assert_eq!(batches.len(), 2);
        // replay the shuffle independently
        let mut order: Vec<usize> = (0..9).collect();
        order.shuffle(&mut substream(5, 2, SHUFFLE_TAG, 0));
        assert_eq!(batches.concat(), order[..8].to_vec());
        let dropped = order[8];
        assert!(!batches.concat().contains(&dropped));
        assert_eq!(epoch_batches(9, 4, 5, 2).unwrap(), batches);
    }

    #[test]
    fn batch_size_one_rejected() {
        assert!(matches!(epoch_batches(8, 1, 0, 0), Err(Error::Config(_))));
    }
}
