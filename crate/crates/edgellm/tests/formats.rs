use edgellm::dump::{decode_activation, encode_activation};
use edgellm::formats::{
    check_weights, decode_program, decode_weights, encode_program, encode_weights, FormatError, ProgramBundle,
};
use edgellm_core::compiler::{compile, patch_for_token, TokenBinding};
use edgellm_core::config::ModelConfig;
use edgellm_core::fp16::Fp16Bits;
use edgellm_core::layout::UnifiedTensor;
use edgellm_core::model::synthetic_weights;
use edgellm_core::perf::Phase;
use proptest::prelude::*;

fn toy_bundle() -> ProgramBundle {
    let cfg = ModelConfig::toy();
    ProgramBundle::new(vec![
        compile(&cfg, Phase::Prefill, TokenBinding::Symbolic).unwrap(),
        compile(&cfg, Phase::Decode, TokenBinding::Symbolic).unwrap(),
    ])
    .unwrap()
}

#[test]
fn weights_round_trip() {
    let cfg = ModelConfig::toy();
    let w = synthetic_weights(&cfg, 4).unwrap();
    let bytes = encode_weights(&cfg, Some(4), &w).unwrap();
    assert_eq!(&bytes[..4], b"ELWP");
    let (h, back) = decode_weights(&bytes).unwrap();
    assert_eq!(back, w);
    assert_eq!(h.seed, Some(4));
    check_weights(&cfg, &h).unwrap();

    let mut other = cfg.clone();
    other.strategy = edgellm_core::config::Strategy::Dense;
    assert!(check_weights(&other, &h).is_err());
}

#[test]
fn weight_file_streams_ports_in_order() {
    let cfg = ModelConfig::toy();
    let w = synthetic_weights(&cfg, 1).unwrap();
    let bytes = encode_weights(&cfg, None, &w).unwrap();
    let hl = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12 + hl..];
    let first = &w.package.layers[0];
    let p0 = first.port_stream(0);
    assert_eq!(&body[..p0.len()], &p0[..]);
    let p1 = first.port_stream(1);
    assert_eq!(&body[p0.len()..p0.len() + p1.len()], &p1[..]);
}

#[test]
fn weights_reject_corruption() {
    let cfg = ModelConfig::toy();
    let w = synthetic_weights(&cfg, 4).unwrap();
    let bytes = encode_weights(&cfg, None, &w).unwrap();
    assert!(matches!(decode_weights(&bytes[..bytes.len() - 1]), Err(FormatError::Truncated(_))));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(decode_weights(&extra), Err(FormatError::Invalid(_))));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(decode_weights(&magic), Err(FormatError::Magic { .. })));
    let mut ver = bytes;
    ver[4] = 9;
    assert!(matches!(decode_weights(&ver), Err(FormatError::Version(9))));
}

#[test]
fn program_round_trip_preserves_patching() {
    let b = toy_bundle();
    let bytes = encode_program(&b).unwrap();
    assert_eq!(&bytes[..4], b"ELPG");
    let back = decode_program(&bytes).unwrap();
    assert_eq!(back, b);
    for p in &back.programs {
        for t in [1, 17, 64] {
            let orig = b.get(p.phase).unwrap();
            assert_eq!(patch_for_token(p, t).unwrap(), patch_for_token(orig, t).unwrap());
        }
    }
    assert!(decode_program(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn program_bundle_rejects_mixed_models() {
    let toy = compile(&ModelConfig::toy(), Phase::Decode, TokenBinding::Symbolic).unwrap();
    let mut other_cfg = ModelConfig::toy();
    other_cfg.layers = 1;
    let other = compile(&other_cfg, Phase::Prefill, TokenBinding::Symbolic).unwrap();
    assert!(ProgramBundle::new(vec![toy, other]).is_err());
    assert!(ProgramBundle::new(vec![]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn activation_dump_round_trip(outer in 1usize..3, ch in 1usize..40, h in 1usize..4, w in 1usize..5, seed in 0u16..1000) {
        let mut t = UnifiedTensor::zeros(outer, ch, h, w, 16).unwrap();
        for o in 0..outer {
            for c in 0..ch {
                for y in 0..h {
                    for x in 0..w {
                        t.set(o, c, y, x, Fp16Bits(seed.wrapping_add((o * 97 + c * 13 + y * 5 + x) as u16) & 0x7bff));
                    }
                }
            }
        }
        let bytes = encode_activation(&t).unwrap();
        prop_assert_eq!(&bytes[..4], b"ELAD");
        prop_assert_eq!(decode_activation(&bytes).unwrap(), t);
    }
}
