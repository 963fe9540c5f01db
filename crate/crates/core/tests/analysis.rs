use dmst_core::analysis::{membership_maps, MembershipMap};
use dmst_core::model::rng::stream_rng;
use dmst_core::model::{generate_synthetic, subspace_tokens, train, RunConfig};

fn separation(values: &[f64], group: &[usize]) -> f64 {
    let stats = |g: usize| {
        let v: Vec<f64> = values.iter().zip(group).filter(|(_, &c)| c == g).map(|(x, _)| *x).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        (mean, var)
    };
    let ((m0, v0), (m1, v1)) = (stats(0), stats(1));
    (m0 - m1).abs() / ((v0 + v1) / 2.0).sqrt().max(1e-12)
}

#[test]
fn a_head_separates_tokens_from_two_subspaces() {
    let mut cfg = RunConfig::default();
    cfg.train.epochs = 8;
    let data = generate_synthetic(&cfg.data, cfg.seed()).unwrap();
    let model = train(&cfg, &data).unwrap().model;
    let bases = data.bases.as_ref().unwrap();

    // left half of the grid from class 0, right half from class 1
    let grid = cfg.model.grid();
    let group: Vec<usize> = (0..cfg.data.tokens).map(|j| usize::from(j % grid >= grid / 2)).collect();
    let mut rng = stream_rng(7, 50);
    let tokens = subspace_tokens(bases, &group, cfg.data.noise, &mut rng);

    let ratios: Vec<f64> = (0..cfg.model.depth)
        .flat_map(|layer| membership_maps(&model, &tokens, layer).unwrap())
        .map(|m| separation(&m.values, &group))
        .collect();
    let best = ratios.iter().copied().fold(0.0, f64::max);
    assert!(best > 1.0, "best between-group gap / within-group std {best}");
}

#[test]
fn constant_membership_is_uniform_grey() {
    let map = MembershipMap {
        layer: 0,
        head: 0,
        grid: [3, 3],
        values: vec![0.25; 9],
    };
    let img = map.to_pgm();
    assert_eq!((img.width, img.height), (3, 3));
    assert!(img.pixels.iter().all(|&p| p == img.pixels[0]));
}
