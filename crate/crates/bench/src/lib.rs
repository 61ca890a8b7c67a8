//! Fixtures shared by the benchmarks.

use xfsl_core::alignment::Mask;
use xfsl_core::backbone::{init_encoder, Encoder, EncoderConfig};
use xfsl_core::fewshot::{compute_prototypes, PrototypeSet, Sample};
use xfsl_core::synthdata::{render_sample, SynthConfig};
use xfsl_core::Tensor;

/// Default-sized encoder and a rendered 64×64 sample per class.
pub struct Fixture {
    pub encoder: Encoder,
    pub samples: Vec<Sample>,
    pub prototypes: PrototypeSet,
}

pub fn samples(per_class: usize, seed: u64) -> Vec<Sample> {
    use rand_chacha::rand_core::SeedableRng;
    let cfg = SynthConfig::default();
    let (h, w) = cfg.image_size;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..3 * per_class)
        .map(|i| {
            let label = i % 3;
            let r = render_sample(&cfg, label, cfg.spurious_rate, &mut rng);
            let mask = Mask::new(h, w, r.mask.iter().map(|&m| u8::from(m)).collect()).expect("mask");
            let image = Tensor::new(&[1, h, w], r.image).expect("image");
            Sample::new(format!("bench_{i:05}"), image, Some(mask), label).expect("sample")
        })
        .collect()
}

pub fn fixture() -> Fixture {
    let encoder = init_encoder(EncoderConfig::default()).expect("default encoder");
    let samples = samples(5, 0);
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let embeddings = encoder.embed(&images).expect("embed");
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let ids: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    let prototypes = compute_prototypes(&embeddings, &labels, &ids, 3).expect("prototypes");
    Fixture {
        encoder,
        samples,
        prototypes,
    }
}
