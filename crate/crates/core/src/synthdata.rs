//! Synthetic multi-domain segmentation benchmark.
//!
//! Fundus-like targets: an elliptical "disc" with a concentric inner "cup" on
//! a textured background. Geometry (shapes, positions) is drawn from ranges
//! shared by every domain; appearance (palette, gamma, texture, noise,
//! foreground gains) is what shifts between domains. Geometry and appearance
//! consume separate seeded streams, so swapping two domains' appearance
//! parameters changes the pixels but leaves every mask bit-identical.
//!
//! Generated images are quantized onto the 8-bit grid before wrapping, which
//! makes the PNG round trip lossless and datasets byte-stable per seed.

use crate::error::{Error, Result};
use crate::raster::ImageTensor;
use crate::rng;
use crate::sdf::BinaryMask;
use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

/// Shape ranges shared by all domains of a benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometrySpec {
    /// Disc radius as a fraction of the image side.
    pub disc_radius_frac: (f64, f64),
    /// Cup radius as a fraction of the disc radius.
    pub cup_ratio: (f64, f64),
    /// Center offset bound as a fraction of the image side.
    pub center_jitter_frac: f64,
    /// Per-axis radius multiplier range (mild ellipticity).
    pub aspect_range: (f64, f64),
}

impl Default for GeometrySpec {
    fn default() -> Self {
        Self {
            disc_radius_frac: (0.22, 0.33),
            cup_ratio: (0.45, 0.70),
            center_jitter_frac: 0.08,
            aspect_range: (0.85, 1.15),
        }
    }
}

impl GeometrySpec {
    fn validate(&self) -> Result<()> {
        let (rlo, rhi) = self.disc_radius_frac;
        if !(0.0 < rlo && rlo <= rhi && rhi <= 0.45) {
            return Err(Error::config(format!(
                "disc radius range ({rlo}, {rhi}) degenerate"
            )));
        }
        let (clo, chi) = self.cup_ratio;
        if !(0.0 < clo && clo <= chi && chi < 1.0) {
            return Err(Error::config(format!("cup ratio range ({clo}, {chi}) degenerate")));
        }
        if !(0.0..=0.2).contains(&self.center_jitter_frac) {
            return Err(Error::config("center jitter must lie in [0, 0.2]"));
        }
        let (alo, ahi) = self.aspect_range;
        if !(0.5 <= alo && alo <= ahi && ahi <= 1.5) {
            return Err(Error::config("aspect range degenerate"));
        }
        Ok(())
    }
}

/// Appearance of one source domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: usize,
    /// Per-channel base background intensity.
    pub palette: [f64; 3],
    /// Intensity exponent applied to the finished image.
    pub gamma: f64,
    /// Background sinusoid frequency (cycles per image side).
    pub texture_freq: f64,
    /// Background sinusoid amplitude.
    pub texture_amp: f64,
    /// Additive Gaussian noise level.
    pub noise_sigma: f64,
    /// Disc fill = clamp(palette · disc_gain + disc_bias).
    pub disc_gain: f64,
    pub disc_bias: f64,
    /// Cup fill = clamp(palette · cup_gain).
    pub cup_gain: f64,
    pub geometry: GeometrySpec,
}

impl DomainSpec {
    fn validate(&self) -> Result<()> {
        if self.palette.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::config("palette values must lie in [0, 1]"));
        }
        if self.gamma <= 0.0 {
            return Err(Error::config("gamma must be positive"));
        }
        if self.texture_amp < 0.0 || self.texture_amp > 0.5 {
            return Err(Error::config("texture_amp must lie in [0, 0.5]"));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::config("noise_sigma must be nonnegative"));
        }
        self.geometry.validate()
    }
}

/// One labeled record.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: ImageTensor<f64>,
    /// Channel 0 = cup, channel 1 = disc; cup ⊆ disc.
    pub mask: BinaryMask,
    pub domain_id: usize,
    pub sample_id: String,
}

/// K source domains with train/test splits.
#[derive(Debug, Clone)]
pub struct DomainSet {
    pub specs: Vec<DomainSpec>,
    pub train: Vec<Vec<Sample>>,
    pub test: Vec<Vec<Sample>>,
    pub seed: u64,
    pub resolution: usize,
    pub held_out: Option<usize>,
}

impl DomainSet {
    pub fn num_domains(&self) -> usize {
        self.specs.len()
    }

    /// Domain ids available for training iterators (held-out excluded).
    pub fn train_domain_ids(&self) -> Vec<usize> {
        (0..self.num_domains())
            .filter(|&k| Some(k) != self.held_out)
            .collect()
    }

    pub fn with_held_out(&self, k: usize) -> DomainSet {
        let mut ds = self.clone();
        ds.held_out = Some(k);
        ds
    }
}

/// Leave-one-domain-out split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LooSplit {
    pub train_domains: Vec<usize>,
    pub held_out: usize,
}

/// All K leave-one-domain-out splits.
pub fn loo_splits(k: usize) -> Vec<LooSplit> {
    (0..k)
        .map(|held| LooSplit {
            train_domains: (0..k).filter(|&d| d != held).collect(),
            held_out: held,
        })
        .collect()
}

/// A whole benchmark definition, as shipped in `benchmark_v1.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub name: String,
    pub schema_version: u32,
    pub resolution: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub domains: Vec<DomainSpec>,
}

/// The frozen default benchmark.
pub fn benchmark_v1() -> BenchmarkSpec {
    serde_json::from_str(include_str!("../assets/benchmark_v1.json"))
        .expect("embedded benchmark_v1.json parses")
}

/// Generate the benchmark dataset described by `spec`.
pub fn generate_benchmark(spec: &BenchmarkSpec) -> Result<DomainSet> {
    generate(&spec.domains, spec.resolution, spec.n_train, spec.n_test, spec.seed)
}

/// Generate `n_train`+`n_test` samples for each domain.
pub fn generate(
    specs: &[DomainSpec],
    resolution: usize,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<DomainSet> {
    if specs.len() < 2 {
        return Err(Error::config("need at least two source domains"));
    }
    for s in specs {
        s.validate()?;
    }
    for s in &specs[1..] {
        if s.geometry != specs[0].geometry {
            return Err(Error::config(
                "geometry ranges must be identical across domains (structure is domain-invariant)",
            ));
        }
    }
    if resolution < 8 {
        return Err(Error::config("resolution too small"));
    }

    let mut train = Vec::with_capacity(specs.len());
    let mut test = Vec::with_capacity(specs.len());
    for spec in specs {
        let k = spec.domain_id;
        let mut train_k = Vec::with_capacity(n_train);
        for i in 0..n_train {
            train_k.push(make_sample(
                spec,
                resolution,
                seed,
                i as u64,
                format!("d{k}-train-{i:03}"),
            )?);
        }
        let mut test_k = Vec::with_capacity(n_test);
        for i in 0..n_test {
            test_k.push(make_sample(
                spec,
                resolution,
                seed,
                (n_train + i) as u64,
                format!("d{k}-test-{i:03}"),
            )?);
        }
        train.push(train_k);
        test.push(test_k);
    }
    Ok(DomainSet {
        specs: specs.to_vec(),
        train,
        test,
        seed,
        resolution,
        held_out: None,
    })
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

fn make_sample(
    spec: &DomainSpec,
    res: usize,
    seed: u64,
    index: u64,
    sample_id: String,
) -> Result<Sample> {
    let k = spec.domain_id;
    // geometry never looks at appearance parameters
    let mut geom = rng::indexed_stream(seed, &format!("geom/{k}"), index);
    let side = res as f64;
    let g = &spec.geometry;
    let r_frac = geom.random_range(g.disc_radius_frac.0..g.disc_radius_frac.1);
    let ax = geom.random_range(g.aspect_range.0..g.aspect_range.1);
    let ay = geom.random_range(g.aspect_range.0..g.aspect_range.1);
    let jx = geom.random_range(-g.center_jitter_frac..g.center_jitter_frac);
    let jy = geom.random_range(-g.center_jitter_frac..g.center_jitter_frac);
    let cup_ratio = geom.random_range(g.cup_ratio.0..g.cup_ratio.1);
    let (cx, cy) = (side / 2.0 + jx * side, side / 2.0 + jy * side);
    let (rx, ry) = (r_frac * side * ax, r_frac * side * ay);
    let (crx, cry) = (rx * cup_ratio, ry * cup_ratio);

    let mut mask = BinaryMask::zeros(res, res, 2);
    for i in 0..res {
        for j in 0..res {
            let dx = j as f64 - cx;
            let dy = i as f64 - cy;
            let in_disc = (dx / rx).powi(2) + (dy / ry).powi(2) <= 1.0;
            let in_cup = (dx / crx).powi(2) + (dy / cry).powi(2) <= 1.0;
            if in_cup {
                mask.data_mut()[[i, j, 0]] = 1;
            }
            if in_disc {
                mask.data_mut()[[i, j, 1]] = 1;
            }
        }
    }

    let mut app = rng::indexed_stream(seed, &format!("app/{k}"), index);
    let palette: Vec<f64> = spec
        .palette
        .iter()
        .map(|&p| clamp01(p + app.random_range(-0.04..0.04)))
        .collect();
    let theta = app.random_range(0.0..std::f64::consts::TAU);
    let phase = app.random_range(0.0..std::f64::consts::TAU);
    let disc_fill: Vec<f64> = palette
        .iter()
        .map(|&p| clamp01(p * spec.disc_gain + spec.disc_bias))
        .collect();
    let cup_fill: Vec<f64> = palette.iter().map(|&p| clamp01(p * spec.cup_gain)).collect();
    let noise = Normal::new(0.0, 1.0).expect("unit normal");

    let mut img = Array3::<f64>::zeros((res, res, 3));
    for i in 0..res {
        for j in 0..res {
            let arg = std::f64::consts::TAU * spec.texture_freq
                * (theta.cos() * j as f64 + theta.sin() * i as f64)
                / side
                + phase;
            let tex = 1.0 + spec.texture_amp * arg.sin();
            let in_cup = mask.data()[[i, j, 0]] == 1;
            let in_disc = mask.data()[[i, j, 1]] == 1;
            for c in 0..3 {
                let base = if in_cup {
                    cup_fill[c]
                } else if in_disc {
                    disc_fill[c]
                } else {
                    palette[c] * tex
                };
                let n = if spec.noise_sigma > 0.0 {
                    spec.noise_sigma * noise.sample(&mut app)
                } else {
                    0.0
                };
                let v = clamp01(clamp01(base + n).powf(spec.gamma));
                // quantize onto the 8-bit grid so PNG round trips are lossless
                img[[i, j, c]] = (v * 255.0).round() / 255.0;
            }
        }
    }

    Ok(Sample {
        image: ImageTensor::new(img)?,
        mask,
        domain_id: k,
        sample_id,
    })
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    domain: usize,
    split: String,
    image: String,
    mask: String,
    sha256_image: String,
    sha256_mask: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    seed: u64,
    resolution: usize,
    n_train: usize,
    n_test: usize,
    specs: Vec<DomainSpec>,
    samples: Vec<ManifestEntry>,
    content_hash: String,
}

const MANIFEST_SCHEMA: u32 = 1;

fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(crate::nn::hex_string(&Sha256::digest(&bytes)))
}

fn mask_to_png(mask: &BinaryMask, path: &Path) -> Result<()> {
    let (h, w, c) = mask.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let mut byte = 0u8;
            for ch in 0..c {
                byte |= mask.data()[[i, j, ch]] << ch;
            }
            img.put_pixel(j as u32, i as u32, image::Luma([byte]));
        }
    }
    img.save(path)?;
    Ok(())
}

fn mask_from_png(path: &Path, channels: usize) -> Result<BinaryMask> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let mut mask = BinaryMask::zeros(h as usize, w as usize, channels);
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..channels {
            mask.data_mut()[[y as usize, x as usize, ch]] = (px.0[0] >> ch) & 1;
        }
    }
    Ok(mask)
}

/// Write the dataset as PNGs plus a manifest; returns the content hash.
pub fn save(ds: &DomainSet, dir: &Path) -> Result<String> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut entries = Vec::new();
    let splits: [(&str, &Vec<Vec<Sample>>); 2] = [("train", &ds.train), ("test", &ds.test)];
    for (split, groups) in splits {
        for group in groups.iter() {
            for s in group {
                let image_rel = format!("images/{}.png", s.sample_id);
                let mask_rel = format!("masks/{}.png", s.sample_id);
                s.image.write_png(&dir.join(&image_rel))?;
                mask_to_png(&s.mask, &dir.join(&mask_rel))?;
                entries.push(ManifestEntry {
                    id: s.sample_id.clone(),
                    domain: s.domain_id,
                    split: split.to_string(),
                    sha256_image: file_hash(&dir.join(&image_rel))?,
                    sha256_mask: file_hash(&dir.join(&mask_rel))?,
                    image: image_rel,
                    mask: mask_rel,
                });
            }
        }
    }
    let content_hash = combined_hash(&entries);
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA,
        seed: ds.seed,
        resolution: ds.resolution,
        n_train: ds.train.first().map_or(0, |g| g.len()),
        n_test: ds.test.first().map_or(0, |g| g.len()),
        specs: ds.specs.clone(),
        samples: entries,
        content_hash: content_hash.clone(),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(content_hash)
}

fn combined_hash(entries: &[ManifestEntry]) -> String {
    let mut pairs: Vec<(String, String, String)> = entries
        .iter()
        .map(|e| (e.id.clone(), e.sha256_image.clone(), e.sha256_mask.clone()))
        .collect();
    pairs.sort();
    let mut h = Sha256::new();
    for (id, hi, hm) in pairs {
        h.update(id.as_bytes());
        h.update(hi.as_bytes());
        h.update(hm.as_bytes());
    }
    crate::nn::hex_string(&h.finalize())
}

/// Load a dataset directory, verifying every file hash and the content hash.
pub fn load(dir: &Path) -> Result<DomainSet> {
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    if manifest.schema_version != MANIFEST_SCHEMA {
        return Err(Error::data(format!(
            "unsupported manifest schema {}",
            manifest.schema_version
        )));
    }
    for e in &manifest.samples {
        if file_hash(&dir.join(&e.image))? != e.sha256_image
            || file_hash(&dir.join(&e.mask))? != e.sha256_mask
        {
            return Err(Error::data(format!("corrupt dataset: hash mismatch for {}", e.id)));
        }
    }
    if combined_hash(&manifest.samples) != manifest.content_hash {
        return Err(Error::data("corrupt dataset: content hash mismatch".to_string()));
    }

    let k = manifest.specs.len();
    let mut train: Vec<Vec<Sample>> = vec![Vec::new(); k];
    let mut test: Vec<Vec<Sample>> = vec![Vec::new(); k];
    for e in &manifest.samples {
        let image = ImageTensor::read_png(&dir.join(&e.image))?;
        let mask = mask_from_png(&dir.join(&e.mask), 2)?;
        let sample = Sample {
            image,
            mask,
            domain_id: e.domain,
            sample_id: e.id.clone(),
        };
        match e.split.as_str() {
            "train" => train[e.domain].push(sample),
            "test" => test[e.domain].push(sample),
            other => return Err(Error::data(format!("unknown split {other}"))),
        }
    }
    Ok(DomainSet {
        specs: manifest.specs,
        train,
        test,
        seed: manifest.seed,
        resolution: manifest.resolution,
        held_out: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_specs() -> Vec<DomainSpec> {
        let base = DomainSpec {
            domain_id: 0,
            palette: [0.7, 0.45, 0.35],
            gamma: 1.0,
            texture_freq: 4.0,
            texture_amp: 0.08,
            noise_sigma: 0.02,
            disc_gain: 1.4,
            disc_bias: 0.05,
            cup_gain: 0.5,
            geometry: GeometrySpec::default(),
        };
        let mut second = base.clone();
        second.domain_id = 1;
        second.palette = [0.3, 0.55, 0.75];
        second.gamma = 1.6;
        vec![base, second]
    }

    #[test]
    fn cup_is_subset_of_disc_and_channels_nonempty() {
        let ds = generate(&two_specs(), 32, 6, 2, 7).unwrap();
        for group in ds.train.iter().chain(ds.test.iter()) {
            for s in group {
                let areas = s.mask.areas();
                assert!(areas[0] > 0 && areas[1] > 0, "{}", s.sample_id);
                let (h, w, _) = s.mask.dim();
                for i in 0..h {
                    for j in 0..w {
                        assert!(s.mask.data()[[i, j, 0]] <= s.mask.data()[[i, j, 1]]);
                    }
                }
            }
        }
    }

    #[test]
    fn same_seed_reproduces_byte_identical_samples() {
        let a = generate(&two_specs(), 32, 3, 1, 11).unwrap();
        let b = generate(&two_specs(), 32, 3, 1, 11).unwrap();
        for (ga, gb) in a.train.iter().zip(b.train.iter()) {
            for (sa, sb) in ga.iter().zip(gb.iter()) {
                assert_eq!(sa, sb);
            }
        }
    }

    #[test]
    fn appearance_swap_keeps_masks_bit_identical() {
        let specs = two_specs();
        let mut swapped = specs.clone();
        // swap every appearance knob, keep domain ids and geometry
        let (a, b) = (specs[0].clone(), specs[1].clone());
        swapped[0] = DomainSpec { domain_id: 0, geometry: a.geometry.clone(), ..b.clone() };
        swapped[1] = DomainSpec { domain_id: 1, geometry: b.geometry.clone(), ..a.clone() };

        let d1 = generate(&specs, 32, 4, 1, 5).unwrap();
        let d2 = generate(&swapped, 32, 4, 1, 5).unwrap();
        let mut any_pixel_differs = false;
        for (ga, gb) in d1.train.iter().zip(d2.train.iter()) {
            for (sa, sb) in ga.iter().zip(gb.iter()) {
                assert_eq!(sa.mask, sb.mask);
                if sa.image != sb.image {
                    any_pixel_differs = true;
                }
            }
        }
        assert!(any_pixel_differs);
    }

    #[test]
    fn flat_quiet_domain_is_piecewise_constant() {
        let mut specs = two_specs();
        for s in &mut specs {
            s.noise_sigma = 0.0;
            s.texture_amp = 0.0;
        }
        let ds = generate(&specs, 32, 2, 1, 3).unwrap();
        let s = &ds.train[0][0];
        // background pixels all share one value per channel; the mask boundary
        // coincides with the intensity discontinuity
        let (h, w, _) = s.mask.dim();
        let mut bg_vals = std::collections::BTreeSet::new();
        for i in 0..h {
            for j in 0..w {
                if s.mask.data()[[i, j, 1]] == 0 {
                    bg_vals.insert((s.image.data()[[i, j, 0]] * 255.0).round() as u8);
                }
            }
        }
        assert_eq!(bg_vals.len(), 1);
        // disc fill differs from background fill
        let bg = *bg_vals.iter().next().unwrap();
        let mut disc_differs = false;
        for i in 0..h {
            for j in 0..w {
                if s.mask.data()[[i, j, 1]] == 1 && s.mask.data()[[i, j, 0]] == 0 {
                    let v = (s.image.data()[[i, j, 0]] * 255.0).round() as u8;
                    if v != bg {
                        disc_differs = true;
                    }
                }
            }
        }
        assert!(disc_differs);
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&two_specs(), 32, 3, 2, 9).unwrap();
        let hash = save(&ds, dir.path()).unwrap();
        let back = load(dir.path()).unwrap();
        assert_eq!(ds.train.len(), back.train.len());
        for (ga, gb) in ds.train.iter().zip(back.train.iter()).chain(ds.test.iter().zip(back.test.iter())) {
            for (sa, sb) in ga.iter().zip(gb.iter()) {
                assert_eq!(sa, sb);
            }
        }
        assert!(!hash.is_empty());
    }

    #[test]
    fn corrupt_file_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&two_specs(), 32, 2, 1, 9).unwrap();
        save(&ds, dir.path()).unwrap();
        // flip one byte of one image
        let victim = dir.path().join("images/d0-train-000.png");
        let mut bytes = std::fs::read(&victim).unwrap();
        let last = bytes.len() - 20;
        bytes[last] ^= 0xff;
        std::fs::write(&victim, bytes).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Data(_)) | Err(Error::Image(_))));
    }

    #[test]
    fn loo_splits_cover_and_exclude() {
        let splits = loo_splits(4);
        assert_eq!(splits.len(), 4);
        for (k, s) in splits.iter().enumerate() {
            assert_eq!(s.held_out, k);
            assert_eq!(s.train_domains.len(), 3);
            assert!(!s.train_domains.contains(&k));
        }
        assert_eq!(loo_splits(2).len(), 2);

        let ds = generate(&two_specs(), 32, 2, 1, 1).unwrap();
        let held = ds.with_held_out(1);
        assert_eq!(held.train_domain_ids(), vec![0]);
    }

    #[test]
    fn mismatched_geometry_is_rejected() {
        let mut specs = two_specs();
        specs[1].geometry.cup_ratio = (0.3, 0.4);
        assert!(generate(&specs, 32, 2, 1, 0).is_err());
    }

    #[test]
    fn gamma_shift_moves_intensity_but_not_areas() {
        // two domains differing only in gamma: mean intensities separate,
        // per-sample foreground areas stay exchangeable
        let mut specs = two_specs();
        specs[1] = DomainSpec {
            domain_id: 1,
            gamma: 2.2,
            ..specs[0].clone()
        };
        let n = 200;
        let ds = generate(&specs, 32, n, 0, 13).unwrap();
        let means = |g: &Vec<Sample>| -> Vec<f64> {
            g.iter()
                .map(|s| s.image.data().iter().sum::<f64>() / s.image.data().len() as f64)
                .collect()
        };
        let areas = |g: &Vec<Sample>| -> Vec<f64> {
            g.iter().map(|s| s.mask.areas()[1] as f64).collect()
        };
        let ks = |a: &[f64], b: &[f64]| -> f64 {
            let mut xa = a.to_vec();
            let mut xb = b.to_vec();
            xa.sort_by(f64::total_cmp);
            xb.sort_by(f64::total_cmp);
            let mut d: f64 = 0.0;
            let (mut i, mut j) = (0usize, 0usize);
            while i < xa.len() && j < xb.len() {
                if xa[i] <= xb[j] {
                    i += 1;
                } else {
                    j += 1;
                }
                let fa = i as f64 / xa.len() as f64;
                let fb = j as f64 / xb.len() as f64;
                d = d.max((fa - fb).abs());
            }
            d
        };
        let ks_mean = ks(&means(&ds.train[0]), &means(&ds.train[1]));
        let ks_area = ks(&areas(&ds.train[0]), &areas(&ds.train[1]));
        // γ = 1 vs 2.2 separates intensities almost completely
        assert!(ks_mean > 0.5, "mean-intensity KS {ks_mean}");
        // critical value at α = 0.01 for n = m = 200 is ≈ 0.163
        assert!(ks_area < 0.163, "area KS {ks_area}");
    }
}
