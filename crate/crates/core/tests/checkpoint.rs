use sigspp::nn::{build_architecture, decode_model, decode_optimizer, encode_model, encode_optimizer, glorot_init};
use sigspp::sigproc::Raster;
use sigspp::trainer::{train, Protocol, TrainConfig, TrainData, TrainSample};
use sigspp::Model;

fn data() -> TrainData {
    let group = |h: usize, w: usize, n: usize, salt: usize| -> Vec<TrainSample> {
        (0..n)
            .map(|i| TrainSample {
                image: Raster::from_fn(h, w, |y, x| if (y * 5 + x * (i + salt + 1)) % 13 < 4 { 220 } else { 0 }),
                user: i % 3,
                forgery: false,
            })
            .collect()
    };
    TrainData::Multi(vec![group(28, 36, 7, 0), group(28, 48, 5, 1), vec![], group(40, 36, 6, 2), group(52, 60, 3, 3)])
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 4, seed: 9, protocol: Protocol::Multi, ..TrainConfig::default() }
}

fn fresh() -> Model<f32> {
    glorot_init(build_architecture("SigNet-SPP-desk", None, 3, false).unwrap(), 4).unwrap()
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let data = data();

    let mut straight = fresh();
    let mut opt = config(2).optimizer(&straight).unwrap();
    train(&mut straight, &data, &config(2), &mut opt, None).unwrap();

    let mut first = fresh();
    let mut opt = config(1).optimizer(&first).unwrap();
    train(&mut first, &data, &config(1), &mut opt, None).unwrap();
    let (model_bytes, opt_bytes) = (encode_model(&first), encode_optimizer(&opt));
    drop(first);

    let mut resumed = decode_model(&model_bytes).unwrap();
    let mut opt = decode_optimizer(&opt_bytes, &resumed).unwrap();
    assert_eq!(opt.epoch, 1);
    let history = train(&mut resumed, &data, &config(2), &mut opt, None).unwrap();
    assert_eq!(history.len(), 1);
    assert_eq!(history[0].epoch, 1);
    assert_eq!(encode_model(&resumed), encode_model(&straight));
}

#[test]
fn fresh_velocity_diverges_from_resumed() {
    let data = data();
    let mut first = fresh();
    let mut opt = config(1).optimizer(&first).unwrap();
    train(&mut first, &data, &config(1), &mut opt, None).unwrap();

    let mut kept = first.clone();
    let mut kept_opt = decode_optimizer(&encode_optimizer(&opt), &kept).unwrap();
    train(&mut kept, &data, &config(2), &mut kept_opt, None).unwrap();

    let mut reset = first;
    opt.reset_velocity(&reset);
    train(&mut reset, &data, &config(2), &mut opt, None).unwrap();
    assert_ne!(encode_model(&kept), encode_model(&reset));
}
