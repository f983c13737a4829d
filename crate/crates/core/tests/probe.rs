use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scsm_core::autodiff::Graph;
use scsm_core::params::{ParamGroup, ParamStore};
use scsm_core::probe::{
    export_channel_maps, read_pgm, top_channel_mask, train_probe, write_pgm, ProbeConfig, SeProbe,
};
use scsm_core::{ScsmError, Tensor};

const C: usize = 8;

/// Channels 0 and 1 carry the label, the rest are loud noise that a fixed
/// readout also listens to.
fn planted(n: usize, rng: &mut ChaCha8Rng) -> (Tensor, Vec<usize>) {
    let mut data = Vec::with_capacity(n * C * 4);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 2;
        let sign = if y == 0 { 1.0 } else { -1.0 };
        for c in 0..C {
            let level = match c {
                0 => sign,
                1 => -sign,
                _ => 3.0 * rng.gen_range(-1.0..1.0),
            };
            for _ in 0..4 {
                data.push(level + 0.05 * rng.gen_range(-1.0..1.0));
            }
        }
        labels.push(y);
    }
    (Tensor::new(&[n, C, 2, 2], data).unwrap(), labels)
}

fn readout() -> Tensor {
    let mut w = Tensor::zeros(&[C, 2]);
    for c in 0..C {
        let (a, b) = match c {
            0 => (2.0, -2.0),
            1 => (-2.0, 2.0),
            _ if c % 2 == 0 => (1.5, -1.5),
            _ => (-1.5, 1.5),
        };
        w.set(&[c, 0], a);
        w.set(&[c, 1], b);
    }
    w
}

fn host() -> (ParamStore, scsm_core::params::ParamId) {
    let mut store = ParamStore::new();
    let head = store.add("head.weight", readout(), ParamGroup::Head);
    store.set_group_trainable(ParamGroup::Head, false);
    (store, head)
}

#[test]
fn probe_finds_the_planted_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (features, labels) = planted(64, &mut rng);
    let (mut store, head) = host();
    let probe = SeProbe::attach(&mut store, 0, C, 2, 0).unwrap();
    let tail = |g: &mut Graph, s: &ParamStore, h| {
        let pooled = g.adaptive_avg_pool2d(h, 1)?;
        let flat = g.reshape(pooled, &[g.shape(h)[0], C])?;
        let w = g.param(s, head);
        g.matmul(flat, w)
    };
    let cfg = ProbeConfig { steps: 400, lr: 0.1, ..ProbeConfig::default() };
    let head_before = store.group_checksum(ParamGroup::Head);
    let losses = train_probe(&mut store, &probe, &features, &labels, &tail, &cfg, 0).unwrap();
    assert!(losses.last().unwrap() < &(losses[0] * 0.5), "{losses:?}");
    assert_eq!(store.group_checksum(ParamGroup::Head), head_before);

    let w = probe.weights_of(&store, &features).unwrap();
    let mean = |c: usize| (0..64).map(|i| w.at(&[i, c])).sum::<f64>() / 64.0;
    let signal = mean(0).min(mean(1));
    let noise = (2..C).map(mean).fold(0.0f64, f64::max);
    assert!(signal > noise, "signal {signal} vs noise {noise}");
}

#[test]
fn probe_refuses_a_trainable_host() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (features, labels) = planted(8, &mut rng);
    let (mut store, head) = host();
    store.set_group_trainable(ParamGroup::Head, true);
    let probe = SeProbe::attach(&mut store, 0, C, 2, 0).unwrap();
    let tail = |g: &mut Graph, s: &ParamStore, h| {
        let pooled = g.adaptive_avg_pool2d(h, 1)?;
        let flat = g.reshape(pooled, &[g.shape(h)[0], C])?;
        let w = g.param(s, head);
        g.matmul(flat, w)
    };
    let err = train_probe(&mut store, &probe, &features, &labels, &tail, &ProbeConfig::default(), 0).unwrap_err();
    assert!(matches!(err, ScsmError::PolicyViolation(_)));
    assert!(SeProbe::attach(&mut store, 0, C, 2, 0).is_err());
}

#[test]
fn masks_keep_exactly_the_requested_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = Tensor::uniform(&[5, 16], 1.0, &mut rng);
    for keep in [0, 1, 7, 16] {
        let m = top_channel_mask(&w, keep);
        assert_eq!(m.shape(), &[5, 16, 1, 1]);
        for b in 0..5 {
            let row: Vec<f64> = (0..16).map(|c| m.at(&[b, c, 0, 0])).collect();
            assert_eq!(row.iter().sum::<f64>() as usize, keep);
            // every kept weight outranks every dropped one
            let kept_min = (0..16).filter(|&c| row[c] == 1.0).map(|c| w.at(&[b, c])).fold(f64::INFINITY, f64::min);
            let dropped_max = (0..16).filter(|&c| row[c] == 0.0).map(|c| w.at(&[b, c])).fold(f64::NEG_INFINITY, f64::max);
            assert!(kept_min >= dropped_max);
        }
    }
}

#[test]
fn pgm_round_trip_and_map_export() {
    let dir = tempfile::tempdir().unwrap();
    let px: Vec<u8> = (0..35).map(|i| (i * 7) as u8).collect();
    let p = dir.path().join("x.pgm");
    write_pgm(&p, 7, 5, &px).unwrap();
    assert_eq!(read_pgm(&p).unwrap(), (7, 5, px));
    assert!(write_pgm(&p, 3, 3, &[0; 4]).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f = Tensor::randn(&[6, 4, 4], &mut rng);
    let weights = [0.1, 0.9, 0.5, 0.3, 0.95, 0.2];
    let paths = export_channel_maps(&f, &weights, 2, 2, dir.path()).unwrap();
    let names: Vec<String> = paths.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(
        names,
        [
            "stage2_top00_ch004_w0.9500.pgm",
            "stage2_top01_ch001_w0.9000.pgm",
            "stage2_bottom00_ch000_w0.1000.pgm",
            "stage2_bottom01_ch005_w0.2000.pgm"
        ]
    );
    let (w, h, pixels) = read_pgm(&paths[0]).unwrap();
    assert_eq!((w, h), (4, 4));
    assert!(pixels.contains(&0) && pixels.contains(&255));
    assert!(export_channel_maps(&f, &weights, 2, 7, dir.path()).is_err());
}
