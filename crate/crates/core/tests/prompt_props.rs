use ovseg_core::encoders::{ClassEmbeddingBank, FrozenEncoders, ImageEncoderWeights, Nonlinearity, TextEncoderWeights};
use ovseg_core::numerics::argmax;
use ovseg_core::prompt::{
    adapter_forward, batch_mean, build_class_prompt, classify, init_context, inject, loss_and_grads, train_prompts,
    AdapterParams, EmbeddedExample, InitMode, LearnedPrompts, PromptPath, PromptTrainConfig,
};
use ovseg_core::world::WeakLabel;
use ovseg_core::{ClassId, RngStream, Vector};
use proptest::prelude::*;

const D: usize = 8;

fn unit(rng: &mut RngStream) -> Vector {
    Vector::new(rng.normal_vec(D, 1.0)).unwrap().normalized().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn classify_argmax_ignores_tau_and_scale(seed in any::<u64>(), tau in 0.001f64..3.0, c in 0.01f64..100.0) {
        let mut rng = RngStream::new(seed, 1);
        let x = Vector::new(rng.normal_vec(D, 1.0)).unwrap();
        let texts: Vec<Vector> = (0..5).map(|_| unit(&mut rng)).collect();
        let base = argmax(classify(&x, &texts, 0.01).unwrap().as_slice());
        prop_assert_eq!(argmax(classify(&x, &texts, tau).unwrap().as_slice()), base);
        prop_assert_eq!(argmax(classify(&x.scaled(c), &texts, 0.01).unwrap().as_slice()), base);
    }

    #[test]
    fn batch_shift_moves_mean_and_prompts_by_delta(seed in any::<u64>(), lambda in 0.0f64..2.0) {
        let mut rng = RngStream::new(seed, 2);
        let theta = AdapterParams::seeded(D, seed);
        let feats: Vec<Vector> =
            (0..4).map(|_| adapter_forward(&theta, &Vector::new(rng.normal_vec(D, 1.0)).unwrap()).unwrap()).collect();
        let delta = Vector::new(rng.normal_vec(D, 1.0)).unwrap();
        let shifted: Vec<Vector> = feats.iter().map(|f| f.add(&delta)).collect();
        let (mu, mu2) = (batch_mean(&feats).unwrap(), batch_mean(&shifted).unwrap());
        for ((a, b), d) in mu.as_slice().iter().zip(mu2.as_slice()).zip(delta.as_slice()) {
            prop_assert!((b - a - d).abs() <= 1e-12);
        }
        let context = init_context(3, D, InitMode::Normal, seed).unwrap();
        let prompt = build_class_prompt(&context, &unit(&mut rng)).unwrap();
        let (v, v2) = (inject(&prompt, &mu, lambda).unwrap(), inject(&prompt, &mu2, lambda).unwrap());
        for col in 0..prompt.cols() {
            for row in 0..D {
                let moved = v2.get(row, col) - v.get(row, col);
                prop_assert!((moved - lambda * delta.as_slice()[row]).abs() <= 1e-12);
            }
        }
    }
}

struct Setup {
    text: TextEncoderWeights,
    image: ImageEncoderWeights,
    bank: ClassEmbeddingBank,
    xs: Vec<Vector>,
    labels: Vec<WeakLabel>,
    classes: Vec<ClassId>,
}

fn setup(seed: u64) -> Setup {
    let classes: Vec<ClassId> = (1..=3).map(ClassId).collect();
    let mut rng = RngStream::new(seed, 3);
    let xs = (0..12).map(|_| unit(&mut rng)).collect();
    let labels = (0..12).map(|i| WeakLabel::from_classes([classes[i % 3]])).collect();
    Setup {
        text: TextEncoderWeights::seeded(seed, D, D, Nonlinearity::Identity),
        image: ImageEncoderWeights::seeded(seed, D),
        bank: ClassEmbeddingBank::generate(seed, &classes, D).unwrap(),
        xs,
        labels,
        classes,
    }
}

impl Setup {
    fn encoders(&self) -> FrozenEncoders<'_> {
        FrozenEncoders { text: &self.text, image: &self.image, bank: &self.bank }
    }

    fn examples(&self) -> Vec<EmbeddedExample<'_>> {
        self.xs.iter().zip(&self.labels).map(|(embedding, label)| EmbeddedExample { embedding, label }).collect()
    }
}

#[test]
fn training_leaves_encoders_untouched() {
    let s = setup(4);
    let before = serde_json::to_vec(&(&s.text, &s.image, &s.bank)).unwrap();
    let cfg = PromptTrainConfig { steps: 30, batch_size: 4, ..Default::default() };
    let out = train_prompts(&s.examples(), &s.classes, &cfg, s.encoders(), PromptPath::BatchMean).unwrap();
    assert_eq!(out.losses.len(), 30);
    assert_eq!(serde_json::to_vec(&(&s.text, &s.image, &s.bank)).unwrap(), before);
}

#[test]
fn zero_lambda_paths_agree_bitwise() {
    let s = setup(5);
    let cfg = PromptTrainConfig { lambda: 0.0, ..Default::default() };
    let prompts = LearnedPrompts::initial(&cfg, D).unwrap();
    let ex = s.examples();
    let a = loss_and_grads(&ex[..4], &s.classes, &prompts, s.encoders(), PromptPath::BatchMean).unwrap();
    let b = loss_and_grads(&ex[..4], &s.classes, &prompts, s.encoders(), PromptPath::Plain).unwrap();
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    assert_eq!(a.context, b.context);
}

#[test]
fn training_is_deterministic() {
    let s = setup(6);
    let cfg = PromptTrainConfig { steps: 20, batch_size: 4, ..Default::default() };
    let run = || {
        let out = train_prompts(&s.examples(), &s.classes, &cfg, s.encoders(), PromptPath::BatchMean).unwrap();
        serde_json::to_vec(&out.prompts).unwrap()
    };
    assert_eq!(run(), run());
}
