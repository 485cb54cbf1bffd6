use partscope::TrainConfig;
use partscope::datasets::synthetic::SyntheticSpec;

#[test]
fn shipped_configs_parse() {
    let train = TrainConfig::from_toml(include_str!("../../../configs/train-synthetic.toml")).unwrap();
    train.validate().unwrap();
    assert_eq!((train.parts, train.steps, train.lambda_feature, train.resolution), (4, 600, 0.1, 0.5));
    let spec = SyntheticSpec::from_toml(include_str!("../../../configs/synthetic.toml")).unwrap();
    assert_eq!(spec, SyntheticSpec::default());
}
