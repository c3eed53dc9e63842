use edgellm_core::arith::{dot_ffn, trace_ffn, Int4Weight, PeConfig};
use edgellm_core::compiler::memory::allocate_memory;
use edgellm_core::compiler::{build_block_graph, compile, patch_for_token, BinOp, RpnOp, SymExpr, TokenBinding};
use edgellm_core::config::ModelConfig;
use edgellm_core::fp16::{fp16_mul, Fp16Bits, RoundingMode};
use edgellm_core::layout::{from_unified, head_merge, head_split, to_unified, SlabLayout};
use edgellm_core::ops::{softmax_row, vmm_channel, DecodedLayer};
use edgellm_core::perf::{
    block_latency, ideal_vmm_time, utilization, HwConfig, MemoryKind, Overheads, Phase,
};
use edgellm_core::sparse::{
    decode_group, decode_slots, encode_group, pack_row, sparsify, validate_windows, LayerSpec, PackFormat,
    SparsityLevel, GROUP_CHANNELS, QUANT_BLOCK, SCALES_PER_GROUP,
};
use proptest::prelude::*;

fn fp16_small() -> impl Strategy<Value = Fp16Bits> {
    (-4.0f64..4.0).prop_map(Fp16Bits::from_f64)
}

fn int4() -> impl Strategy<Value = Int4Weight> {
    (-7i32..=7).prop_map(|v| Int4Weight::new(v).unwrap())
}

#[test]
fn fp16_compose_decompose_all_patterns() {
    for b in 0..=u16::MAX {
        let x = Fp16Bits(b);
        assert_eq!(Fp16Bits::compose(x.decompose()), x);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ffn_lane_permutation_invariant(
        lanes in proptest::collection::vec((fp16_small(), int4()), 128),
        seed in any::<u64>(),
    ) {
        let pe = PeConfig::default();
        let (f, w): (Vec<_>, Vec<_>) = lanes.iter().copied().unzip();
        let a = dot_ffn(&pe, &f, &w, Fp16Bits::ONE).unwrap();
        prop_assume!(!a.saturated);
        let mut idx: Vec<usize> = (0..128).collect();
        let mut s = seed;
        for i in (1..idx.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            idx.swap(i, (s >> 33) as usize % (i + 1));
        }
        let pf: Vec<_> = idx.iter().map(|&i| f[i]).collect();
        let pw: Vec<_> = idx.iter().map(|&i| w[i]).collect();
        prop_assert_eq!(dot_ffn(&pe, &pf, &pw, Fp16Bits::ONE).unwrap().value, a.value);
    }

    #[test]
    fn ffn_sign_symmetry(lanes in proptest::collection::vec((fp16_small(), int4()), 128), scale in fp16_small()) {
        let pe = PeConfig::default();
        let (f, w): (Vec<_>, Vec<_>) = lanes.iter().copied().unzip();
        let neg: Vec<_> = w.iter().map(|x| Int4Weight::new(-(x.get() as i32)).unwrap()).collect();
        let a = dot_ffn(&pe, &f, &w, scale).unwrap().value;
        let b = dot_ffn(&pe, &f, &neg, scale).unwrap().value;
        prop_assert_eq!(a.to_f64(), -b.to_f64());
    }

    #[test]
    fn ffn_scale_is_final_stage(lanes in proptest::collection::vec((fp16_small(), int4()), 128), scale in fp16_small()) {
        let pe = PeConfig::default();
        let (f, w): (Vec<_>, Vec<_>) = lanes.iter().copied().unzip();
        let unit = dot_ffn(&pe, &f, &w, Fp16Bits::ONE).unwrap();
        let scaled = dot_ffn(&pe, &f, &w, scale).unwrap();
        prop_assume!(!unit.overflow && !scaled.overflow);
        let (m, _) = fp16_mul(unit.value, scale, RoundingMode::NearestEven);
        prop_assert_eq!(scaled.value.to_f64(), m.to_f64());
    }

    #[test]
    fn ffn_trace_is_deterministic(lanes in proptest::collection::vec((fp16_small(), int4()), 128)) {
        let pe = PeConfig::default();
        let (f, w): (Vec<_>, Vec<_>) = lanes.iter().copied().unzip();
        let a = trace_ffn(&pe, &f, &w, Fp16Bits::ONE).unwrap();
        let b = trace_ffn(&pe, &f, &w, Fp16Bits::ONE).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.1.replay(&pe), a.0.value);
    }

    #[test]
    fn sparsify_respects_windows(w in proptest::collection::vec(-1.0f32..1.0, 256), li in 0usize..4) {
        let level = SparsityLevel::ALL[li];
        let s = sparsify(&w, level).unwrap();
        let q: Vec<Int4Weight> = s.iter().map(|&x| Int4Weight::clamped((x * 7.0).round() as i32)).collect();
        prop_assert!(validate_windows(&q, level).is_ok());
    }

    #[test]
    fn pack_round_trip_and_sparse_dense_vmm(
        row in proptest::collection::vec(-1.0f32..1.0, GROUP_CHANNELS),
        feats in proptest::collection::vec(fp16_small(), GROUP_CHANNELS),
        fi in 0usize..5,
    ) {
        let format = PackFormat::ALL[fi];
        let groups = pack_row(&row, format).unwrap();
        let (scales, weights) = decode_group(&groups[0]).unwrap();
        prop_assert_eq!(encode_group(&scales, &weights, format).unwrap(), groups[0].clone());
        prop_assert_eq!(groups[0].bytes.len() * 8, format.total_bits());

        let dense = encode_group(&scales, &weights, PackFormat::DENSE).unwrap();
        let spec = |f| LayerSpec::new("m", GROUP_CHANNELS, 1, f);
        let sparse_l = DecodedLayer { spec: spec(format), groups: vec![decode_slots(&groups[0]).unwrap()] };
        let dense_l = DecodedLayer { spec: spec(PackFormat::DENSE), groups: vec![decode_slots(&dense).unwrap()] };
        let pe = PeConfig::default();
        prop_assert_eq!(vmm_channel(&pe, &feats, &sparse_l, 0).unwrap(), vmm_channel(&pe, &feats, &dense_l, 0).unwrap());
        prop_assert_eq!(scales.len(), SCALES_PER_GROUP);
        prop_assert_eq!(weights.len() / QUANT_BLOCK, SCALES_PER_GROUP);
    }

    #[test]
    fn layout_round_trips(tokens in 1usize..20, slabs in 1usize..5, heads_pow in 0u32..3, odd in 0usize..16) {
        let t_out = 16;
        let heads = 1usize << heads_pow;
        let ch = slabs * t_out * heads;
        let flat: Vec<Fp16Bits> = (0..tokens * ch).map(|i| Fp16Bits::from_f64((i % 977) as f64)).collect();
        let u = to_unified(&flat, tokens, ch, t_out).unwrap();
        prop_assert_eq!(from_unified(&u), flat);
        prop_assert_eq!(head_merge(&head_split(&u, heads).unwrap(), heads).unwrap(), u);
        let ragged = ch - odd.min(ch - 1);
        let flat: Vec<Fp16Bits> = (0..tokens * ragged).map(|i| Fp16Bits::from_f64(i as f64)).collect();
        let r = to_unified(&flat, tokens, ragged, t_out).unwrap();
        prop_assert!(r.validate().is_ok());
        prop_assert_eq!(from_unified(&r), flat);
    }

    #[test]
    fn transpose_view_matches_naive(rows in 1usize..64, slabs in 1usize..4, cap_extra in 0usize..8, base in 0usize..64) {
        let t_out = 16;
        let lay = SlabLayout { base: base * t_out, outer: 1, slabs, row_capacity: rows + cap_extra, t_out };
        let mem: Vec<Fp16Bits> = (0..lay.base + lay.footprint()).map(|i| Fp16Bits((i % 30000) as u16)).collect();
        let v = lay.segmented_transpose_view(0, rows);
        let kt = v.gather(&mem);
        for c in 0..slabs * t_out {
            for j in 0..rows {
                prop_assert_eq!(kt[c * rows + j], mem[lay.address(0, c, j)]);
            }
        }
        prop_assert!(v.segments.iter().all(|s| s.start % t_out == 0 && s.len % t_out == 0));
        let plan = lay.full_plan(rows);
        prop_assert!(plan.is_aligned());
        prop_assert_eq!(plan.elements(), slabs * rows * t_out);
    }

    #[test]
    fn softmax_is_a_distribution(r in proptest::collection::vec(-20.0f64..20.0, 1..300)) {
        let p = softmax_row(&r);
        let s: f64 = p.iter().map(|x| x.to_f64()).sum();
        prop_assert!(p.iter().all(|x| x.to_f64() >= 0.0));
        prop_assert!((s - 1.0).abs() <= 1.0 / 256.0, "sum {}", s);
    }

    #[test]
    fn fold_preserves_evaluation(e in expr(), t in 1i64..5000) {
        if let Ok(v) = e.eval(t) {
            prop_assert_eq!(e.fold().eval(t).unwrap(), v);
            prop_assert_eq!(e.bind(t).as_const(), Some(v));
        }
    }

    #[test]
    fn rpn_round_trip(e in expr(), t in 1i64..5000) {
        let r = e.to_rpn();
        let mut b = Vec::new();
        RpnOp::encode(&r, &mut b);
        prop_assert_eq!(RpnOp::decode(&b).unwrap(), r.clone());
        prop_assert_eq!(SymExpr::from_rpn(&r).unwrap(), e.clone());
        prop_assert_eq!(edgellm_core::compiler::expr::eval_rpn(&r, t).ok(), e.eval(t).ok());
    }

    #[test]
    fn ideal_time_is_linear(ci in 1usize..64, co in 1usize..64, k in 1usize..8, fi in 0usize..5) {
        let hw = HwConfig::default();
        let f = PackFormat::ALL[fi];
        let a = ideal_vmm_time(ci * 128, co * 128, f, &hw);
        let b = ideal_vmm_time(ci * 128 * k, co * 128, f, &hw);
        prop_assert!((b / a - k as f64).abs() < 1e-9);
        let d = ideal_vmm_time(ci * 128, co * 128, PackFormat::DENSE, &hw);
        prop_assert!((a / d - f.effective_bitwidth() / 4.125).abs() < 1e-9);
    }

    #[test]
    fn utilization_bounded_and_monotone(ideal in 1.0f64..100.0, extra in 0.0f64..100.0, more in 0.001f64..50.0) {
        let u = utilization(ideal, ideal + extra);
        prop_assert!(u.fraction > 0.0 && u.fraction <= 1.0 && !u.inconsistent);
        prop_assert!(utilization(ideal, ideal + extra + more).fraction < u.fraction);
    }
}

fn expr() -> impl Strategy<Value = SymExpr> {
    let leaf = prop_oneof![Just(SymExpr::Token), (-50i64..50).prop_map(SymExpr::Const)];
    leaf.prop_recursive(5, 32, 2, |inner| {
        (0usize..BinOp::ALL.len(), inner.clone(), inner).prop_map(|(o, a, b)| SymExpr::bin(BinOp::ALL[o], a, b))
    })
}

#[test]
fn decode_latency_grows_with_cache() {
    let cfg = ModelConfig::glm6b();
    let hw = HwConfig::default();
    let o = Overheads::zero();
    let mut prev = 0.0;
    let mut mha = Vec::new();
    for t in (64..=1024).step_by(64) {
        let l = block_latency(&cfg, &hw, t, Phase::Decode, MemoryKind::Hbm, &o).unwrap();
        assert!(l.total_us >= prev);
        prev = l.total_us;
        let p = block_latency(&cfg, &hw, t, Phase::Prefill, MemoryKind::Hbm, &o).unwrap();
        mha.push(p.breakdown().0);
    }
    for w in mha.windows(3) {
        assert!(w[2] - 2.0 * w[1] + w[0] > 0.0);
    }
}

#[test]
fn memory_kinds_agree_at_equal_bandwidth() {
    let cfg = ModelConfig::glm6b();
    let mut hw = HwConfig::default();
    hw.ddr_bytes_per_s = hw.hbm_bytes_per_s();
    let o = Overheads::zero();
    for p in [Phase::Decode, Phase::Prefill] {
        let a = block_latency(&cfg, &hw, 128, p, MemoryKind::Hbm, &o).unwrap();
        let b = block_latency(&cfg, &hw, 128, p, MemoryKind::Ddr, &o).unwrap();
        assert!((a.total_us - b.total_us).abs() < 1e-9);
    }
}

#[test]
fn instruction_count_independent_of_token() {
    let cfg = ModelConfig::toy();
    for phase in [Phase::Decode, Phase::Prefill] {
        let sym = compile(&cfg, phase, TokenBinding::Symbolic).unwrap();
        for t in [1, 17, 64] {
            let c = compile(&cfg, phase, TokenBinding::Constant(t)).unwrap();
            assert_eq!(c.instructions.len(), sym.instructions.len());
            assert_eq!(patch_for_token(&sym, t).unwrap().len(), c.total_words());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn allocation_is_safe_for_varied_models(
        layers in 1usize..4,
        heads_pow in 0u32..3,
        kv_div in 0u32..2,
        ffn_mult in 1usize..4,
        max_token in 1usize..200,
        strategy in 0usize..4,
    ) {
        let mut c = ModelConfig::toy();
        c.layers = layers;
        c.heads = 1 << heads_pow;
        c.kv_heads = (c.heads >> kv_div).max(1);
        c.hidden = c.heads * c.head_dim;
        c.ffn = ffn_mult * 64;
        c.max_token = max_token;
        c.strategy = edgellm_core::config::Strategy::ALL[strategy];
        let g = build_block_graph(&c).unwrap();
        prop_assert_eq!(g.validate().unwrap(), 0);
        let m = allocate_memory(&g).unwrap();
        prop_assert!(m.audit().is_ok());
        let p = compile(&c, Phase::Prefill, TokenBinding::Symbolic).unwrap();
        for t in [1, max_token] {
            prop_assert_eq!(patch_for_token(&p, t).unwrap(), compile(&c, Phase::Prefill, TokenBinding::Constant(t)).unwrap().encode().unwrap());
        }
    }
}
