use glass::error::FormatError;
use glass::glft::{decode, encode, from_features, read_features, to_features, write, GlftLevel, MAGIC, VERSION};
use glass_core::featpipe::PipelineConfig;
use proptest::prelude::*;

fn level(h: u32, w: u32, c: u32, f: impl FnMut(usize) -> f32) -> GlftLevel {
    GlftLevel { height: h, width: w, channels: c, data: (0..(h * w * c) as usize).map(f).collect() }
}

fn bits(levels: &[GlftLevel]) -> Vec<Vec<u32>> {
    levels.iter().map(|l| l.data.iter().map(|v| v.to_bits()).collect()).collect()
}

#[test]
fn large_single_level_becomes_feature_map() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.glft");
    let l = level(36, 36, 1536, |i| (i % 977) as f32 * 0.001 - 0.4);
    write(&path, std::slice::from_ref(&l)).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 10 + 12 + 4 * 36 * 36 * 1536);
    let feats = read_features(&path).unwrap();
    assert_eq!(feats.levels[0].id, "l0");
    let map = PipelineConfig { patch: 1, levels: vec![] }.merge(&feats, "glft").unwrap();
    assert_eq!((map.height(), map.width(), map.channels()), (36, 36, 1536));
    assert_eq!(map.grid.data[5], l.data[5] as f64);
}

#[test]
fn header_layout() {
    let bytes = encode(&[level(1, 2, 1, |i| i as f32)]).unwrap();
    assert_eq!(&bytes[..4], &MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
    assert_eq!(u16::from_le_bytes(bytes[8..10].try_into().unwrap()), 1);
    assert_eq!(&bytes[10..22], &[1, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0]);
    assert_eq!(&bytes[26..30], &1.0f32.to_le_bytes());
}

#[test]
fn malformed_files_are_rejected() {
    let good = encode(&[level(2, 2, 3, |i| i as f32), level(1, 1, 3, |_| -0.0)]).unwrap();
    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(matches!(decode(&bad), Err(FormatError::BadMagic { .. })));
    let mut bad = good.clone();
    bad[4] = 9;
    assert_eq!(decode(&bad), Err(FormatError::UnsupportedVersion(9)));
    for cut in [3, 9, 15, good.len() - 1] {
        assert!(matches!(decode(&good[..cut]), Err(FormatError::Truncated { .. })), "cut {cut}");
    }
    let mut long = good.clone();
    long.push(0);
    assert_eq!(decode(&long), Err(FormatError::Trailing(1)));
    let mut huge = encode(&[level(1, 1, 1, |_| 0.0)]).unwrap();
    huge[10..22].copy_from_slice(&[0xff; 12]);
    assert!(matches!(decode(&huge), Err(FormatError::Overflow(_)) | Err(FormatError::Truncated { .. })));
    let mut wrong = level(2, 2, 2, |_| 0.0);
    wrong.data.pop();
    assert!(matches!(encode(&[wrong]), Err(FormatError::Invalid(_))));
}

#[test]
fn mismatched_level_grids_fail_validation() {
    let levels = [level(4, 4, 2, |_| 0.0), level(2, 2, 2, |_| f32::NAN)];
    assert!(to_features(&levels).is_err());
}

proptest! {
    #[test]
    fn round_trip_is_bit_exact(
        raw in prop::collection::vec((1u32..5, 1u32..5, 1u32..6), 1..4),
        seed in any::<u64>(),
    ) {
        let mut state = seed;
        let mut next = || { state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); state };
        let levels: Vec<GlftLevel> = raw
            .iter()
            .map(|&(h, w, c)| level(h, w, c, |_| {
                let r = next();
                match r % 7 {
                    0 => 0.0,
                    1 => -0.0,
                    2 => f32::MIN_POSITIVE / 4.0,
                    _ => f32::from_bits((r >> 32) as u32 & 0x7f7f_ffff) * if r & 1 == 0 { 1.0 } else { -1.0 },
                }
            }))
            .collect();
        let back = decode(&encode(&levels).unwrap()).unwrap();
        prop_assert_eq!(bits(&back), bits(&levels));
        prop_assert_eq!(back.iter().map(|l| (l.height, l.width, l.channels)).collect::<Vec<_>>(),
                        levels.iter().map(|l| (l.height, l.width, l.channels)).collect::<Vec<_>>());
    }

    #[test]
    fn features_survive_f32_storage(vals in prop::collection::vec(-1e6f32..1e6, 12)) {
        let l = GlftLevel { height: 2, width: 2, channels: 3, data: vals.clone() };
        let feats = to_features(std::slice::from_ref(&l)).unwrap();
        let again = from_features(&feats).unwrap();
        prop_assert_eq!(bits(&again), bits(&[l]));
    }
}
